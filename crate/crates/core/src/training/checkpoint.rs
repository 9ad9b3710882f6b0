use std::collections::BTreeMap;
use std::path::Path;

use camorect_autograd::nn::{AdamWState, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::models::{ConditionalModel, EncoderKind, ModelConfig};

pub const CHECKPOINT_SCHEMA: u32 = 1;
const MAGIC: &[u8; 14] = b"CAMORECT-CKPT\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Leader,
    Follower,
}

/// Optimizer moments for the encoder and denoiser stores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub encoder: AdamWState,
    pub denoiser: AdamWState,
}

/// Model parameters plus everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub model: ConditionalModel,
    pub optimizer: Option<OptimizerState>,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Every random draw of a run derives from this seed and the epoch
    /// counter, so the pair is the complete generator state.
    pub rng_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    module: Role,
    encoder_kind: EncoderKind,
    tce_mode: Option<String>,
    seed: u64,
    frozen: bool,
    model: ModelConfig,
    config_hash: String,
    epoch: usize,
    rng_seed: u64,
    optimizer_steps: Option<(u64, u64)>,
    arrays: Vec<ArrayEntry>,
}

fn push_store(group: &str, store: &ParamStore, arrays: &mut Vec<ArrayEntry>, blob: &mut Vec<u8>) {
    for (name, p) in store.iter() {
        arrays.push(ArrayEntry {
            group: group.into(),
            name: name.clone(),
            shape: p.shape.clone(),
        });
        for v in p.data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn push_moments(group: &str, moments: &BTreeMap<String, Vec<f64>>, arrays: &mut Vec<ArrayEntry>, blob: &mut Vec<u8>) {
    for (name, values) in moments {
        arrays.push(ArrayEntry {
            group: group.into(),
            name: name.clone(),
            shape: vec![values.len()],
        });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn moments<'a>(o: &'a mut OptimizerState, group: &str) -> Option<&'a mut BTreeMap<String, Vec<f64>>> {
    match group {
        "adam_m.encoder" => Some(&mut o.encoder.m),
        "adam_v.encoder" => Some(&mut o.encoder.v),
        "adam_m.denoiser" => Some(&mut o.denoiser.m),
        "adam_v.denoiser" => Some(&mut o.denoiser.v),
        _ => None,
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Byte-stable serialization: magic, header length, JSON header, then
    /// little-endian `f64` arrays in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        let mut blob = Vec::new();
        push_store("encoder", &self.model.encoder, &mut arrays, &mut blob);
        push_store("denoiser", &self.model.denoiser, &mut arrays, &mut blob);
        if let Some(opt) = &self.optimizer {
            push_moments("adam_m.encoder", &opt.encoder.m, &mut arrays, &mut blob);
            push_moments("adam_v.encoder", &opt.encoder.v, &mut arrays, &mut blob);
            push_moments("adam_m.denoiser", &opt.denoiser.m, &mut arrays, &mut blob);
            push_moments("adam_v.denoiser", &opt.denoiser.v, &mut arrays, &mut blob);
        }
        let header = Header {
            schema_version: CHECKPOINT_SCHEMA,
            module: self.role,
            encoder_kind: self.model.encoder_kind,
            tce_mode: match self.model.encoder_kind {
                EncoderKind::Tce(m) => Some(m.as_str().into()),
                EncoderKind::Pyramid => None,
            },
            seed: self.model.encoder.seed(),
            frozen: self.model.is_frozen(),
            model: self.model.config.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            rng_seed: self.rng_seed,
            optimizer_steps: self.optimizer.as_ref().map(|o| (o.encoder.step, o.denoiser.step)),
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| corrupt("not a checkpoint file"))?;
        if rest.len() < 8 {
            return Err(corrupt("truncated header"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.schema_version != CHECKPOINT_SCHEMA {
            return Err(corrupt(format!("schema version {}", header.schema_version)));
        }
        let mut blob = &rest[len..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if blob.len() < n * 8 {
                return Err(corrupt("truncated parameter data"));
            }
            let values = blob[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blob = &blob[n * 8..];
            Ok(values)
        };

        // rebuild the architecture, then overwrite every array by name
        let mut model = ConditionalModel::new(header.model.clone(), header.encoder_kind, header.seed)?;
        let mut expected: Vec<(String, String)> = model
            .encoder
            .names()
            .map(|n| ("encoder".to_string(), n.clone()))
            .chain(model.denoiser.names().map(|n| ("denoiser".to_string(), n.clone())))
            .collect();
        let mut opt = header.optimizer_steps.map(|(e, d)| OptimizerState {
            encoder: AdamWState {
                step: e,
                ..AdamWState::default()
            },
            denoiser: AdamWState {
                step: d,
                ..AdamWState::default()
            },
        });
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            let values = take(n)?;
            match entry.group.as_str() {
                "encoder" | "denoiser" => {
                    let store = if entry.group == "encoder" { &mut model.encoder } else { &mut model.denoiser };
                    let p = store
                        .get(&entry.name)
                        .ok_or_else(|| corrupt(format!("unknown parameter {}/{}", entry.group, entry.name)))?;
                    if p.shape != entry.shape {
                        return Err(corrupt(format!(
                            "{}/{}: shape {:?}, architecture expects {:?}",
                            entry.group, entry.name, entry.shape, p.shape
                        )));
                    }
                    *store.values_mut(&entry.name)? = values;
                    expected.retain(|(g, n)| !(g == &entry.group && n == &entry.name));
                }
                _ => {
                    let o = opt.as_mut().ok_or_else(|| corrupt("optimizer arrays without optimizer state"))?;
                    let map = moments(o, &entry.group).ok_or_else(|| corrupt(format!("unknown array group {}", entry.group)))?;
                    map.insert(entry.name.clone(), values);
                }
            }
        }
        if !blob.is_empty() {
            return Err(corrupt("trailing bytes after parameter data"));
        }
        if let Some((g, n)) = expected.first() {
            return Err(corrupt(format!("missing parameter {g}/{n}")));
        }
        model.set_frozen(header.frozen);
        Ok(Checkpoint {
            role: header.module,
            model,
            optimizer: opt,
            config_hash: header.config_hash,
            epoch: header.epoch,
            rng_seed: header.rng_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the model part alone (parameters and frozen flag).
    pub fn model_digest(&self) -> String {
        let bare = Checkpoint {
            optimizer: None,
            config_hash: String::new(),
            epoch: 0,
            rng_seed: 0,
            ..self.clone()
        };
        hex::encode(Sha256::digest(bare.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TceMode;

    fn tiny() -> ModelConfig {
        ModelConfig {
            resolution: 32,
            cond_channels: 2,
            denoiser_channels: 3,
            token_dim: 4,
            tce_layers: 4,
            mlp_ratio: 1,
            time_dim: 4,
            t_max: 10,
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        for kind in [EncoderKind::Pyramid, EncoderKind::Tce(TceMode::GL)] {
            let mut model = ConditionalModel::new(tiny(), kind, 3).unwrap();
            *model.denoiser.values_mut("den.head.bias").unwrap() = vec![0.25; 16];
            let mut opt = OptimizerState::default();
            opt.encoder.step = 4;
            opt.denoiser.step = 4;
            opt.denoiser.m.insert("den.head.bias".into(), vec![0.5; 16]);
            opt.denoiser.v.insert("den.head.bias".into(), vec![1e-3; 16]);
            let ck = Checkpoint {
                role: Role::Follower,
                model,
                optimizer: Some(opt),
                config_hash: "abc".into(),
                epoch: 2,
                rng_seed: 9,
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn frozen_flag_survives() {
        let mut model = ConditionalModel::new(tiny(), EncoderKind::Pyramid, 1).unwrap();
        model.set_frozen(true);
        let ck = Checkpoint {
            role: Role::Leader,
            model,
            optimizer: None,
            config_hash: String::new(),
            epoch: 1,
            rng_seed: 0,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.model.is_frozen());
        assert_eq!(back.model_digest(), ck.model_digest());
    }

    #[test]
    fn damage_is_reported() {
        let model = ConditionalModel::new(tiny(), EncoderKind::Pyramid, 1).unwrap();
        let ck = Checkpoint {
            role: Role::Leader,
            model,
            optimizer: None,
            config_hash: String::new(),
            epoch: 0,
            rng_seed: 0,
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
