use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::png::{decode_gray, decode_rgb, write_gray, write_rgb};
use super::{check_size, gen_sample, CamoSample, SampleMeta, SCALES};
use crate::error::{invalid, io_err, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSeeds {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// 70/10/20 split over consecutive seed ranges, in integer arithmetic.
pub fn split_seeds(seeds: &[u64]) -> SplitSeeds {
    let n = seeds.len();
    let train = n * 7 / 10;
    let val = n / 10;
    SplitSeeds {
        train: seeds[..train].to_vec(),
        val: seeds[train..train + val].to_vec(),
        test: seeds[train + val..].to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub seed: u64,
    pub dir: String,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub scales: Vec<usize>,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    pub splits: SplitSeeds,
    pub samples: Vec<SampleEntry>,
    /// SHA-256 of every file, keyed by path relative to the corpus root.
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    /// SHA-256 over the canonical manifest JSON.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<CamoSample>,
}

impl Corpus {
    pub fn sample(&self, seed: u64) -> Option<&CamoSample> {
        self.samples.iter().find(|s| s.seed == seed)
    }

    pub fn split(&self, split: Split) -> Vec<&CamoSample> {
        let seeds = match split {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
        };
        seeds.iter().filter_map(|&s| self.sample(s)).collect()
    }
}

/// Directory name and report id of a sample.
pub fn sample_id(seed: u64) -> String {
    format!("sample_{seed:06}")
}

fn hq_file() -> &'static str {
    "hq.png"
}

fn lq_file(n: usize) -> String {
    format!("lq_x{n}.png")
}

fn mask_file() -> &'static str {
    "mask.png"
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Generates `count` samples with seeds `base_seed..base_seed + count` and
/// writes them under `out_dir`, manifest last.
pub fn build_corpus(count: usize, size: (usize, usize), base_seed: u64, out_dir: &Path) -> Result<Manifest> {
    if count == 0 {
        return Err(invalid("corpus count must be at least 1"));
    }
    check_size(size.0, size.1)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let seeds: Vec<u64> = (0..count as u64).map(|i| base_seed + i).collect();
    let mut checksums = BTreeMap::new();
    let mut samples = Vec::with_capacity(count);
    for &seed in &seeds {
        let s = gen_sample(seed, size)?;
        let dir_name = sample_id(seed);
        let dir = out_dir.join(&dir_name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut files = vec![(hq_file().to_string(), dir.join(hq_file()))];
        write_rgb(&files[0].1, &s.image_hq)?;
        for n in SCALES {
            let path = dir.join(lq_file(n));
            write_rgb(&path, &s.image_lq[&n])?;
            files.push((lq_file(n), path));
        }
        let mask_path = dir.join(mask_file());
        write_gray(&mask_path, &s.mask)?;
        files.push((mask_file().to_string(), mask_path));
        for (name, path) in files {
            checksums.insert(format!("{dir_name}/{name}"), sha256_file(&path)?);
        }
        samples.push(SampleEntry {
            seed,
            dir: dir_name,
            meta: s.meta,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        count,
        height: size.0,
        width: size.1,
        scales: SCALES.to_vec(),
        base_seed,
        splits: split_seeds(&seeds),
        seeds,
        samples,
        checksums,
    };
    let path = out_dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptCorpus(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::CorruptCorpus(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Reads a corpus, verifying every checksum before decoding.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let read_checked = |rel: String| -> Result<(PathBuf, Vec<u8>)> {
        let path = dir.join(&rel);
        let expected = manifest
            .checksums
            .get(&rel)
            .ok_or_else(|| Error::CorruptCorpus(format!("no checksum for {rel}")))?;
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = hex::encode(Sha256::digest(&bytes));
        if &actual != expected {
            return Err(Error::CorruptCorpus(format!("checksum mismatch for {}", path.display())));
        }
        Ok((path, bytes))
    };
    for entry in &manifest.samples {
        let (path, bytes) = read_checked(format!("{}/{}", entry.dir, hq_file()))?;
        let image_hq = decode_rgb(&path, &bytes)?;
        let mut image_lq = BTreeMap::new();
        for &n in &manifest.scales {
            let (path, bytes) = read_checked(format!("{}/{}", entry.dir, lq_file(n)))?;
            image_lq.insert(n, decode_rgb(&path, &bytes)?);
        }
        let (path, bytes) = read_checked(format!("{}/{}", entry.dir, mask_file()))?;
        let mask = decode_gray(&path, &bytes)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        if (mask.height, mask.width) != (manifest.height, manifest.width) {
            return Err(Error::CorruptCorpus(format!("{}: unexpected mask size", path.display())));
        }
        samples.push(CamoSample {
            image_hq,
            image_lq,
            mask,
            seed: entry.seed,
            meta: entry.meta.clone(),
        });
    }
    Ok(Corpus {
        root: dir.to_path_buf(),
        manifest,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let s = split_seeds(&(0..10).collect::<Vec<_>>());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s.val, vec![7]);
        let s = split_seeds(&(0..200).collect::<Vec<_>>());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 20, 40));
        let s = split_seeds(&[5]);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (0, 0, 1));
    }

    #[test]
    fn build_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_corpus(10, (64, 64), 100, dir.path()).unwrap();
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.manifest, m);
        assert_eq!(c.samples.len(), 10);
        for s in &c.samples {
            assert_eq!(s, &gen_sample(s.seed, (64, 64)).unwrap());
        }
        assert_eq!(c.split(Split::Test).len(), 2);
    }

    #[test]
    fn manifests_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_corpus(3, (64, 64), 7, a.path()).unwrap();
        build_corpus(3, (64, 64), 7, b.path()).unwrap();
        let read = |d: &Path| fs::read(d.join(MANIFEST)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        build_corpus(2, (64, 64), 0, dir.path()).unwrap();
        let mask = dir.path().join(sample_id(1)).join(mask_file());
        let mut bytes = fs::read(&mask).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xff;
        fs::write(&mask, bytes).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::CorruptCorpus(_))));
    }

    #[test]
    fn missing_corpus_names_the_path() {
        let err = load_corpus(Path::new("/nonexistent/corpus")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/corpus"));
    }

    #[test]
    fn rejects_empty_and_bad_sizes() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_corpus(0, (64, 64), 0, dir.path()).is_err());
        assert!(build_corpus(1, (130, 130), 0, dir.path()).is_err());
    }
}
