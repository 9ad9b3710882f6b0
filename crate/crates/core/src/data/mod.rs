//! Procedural camouflage corpus: textured scenes whose foreground shares the
//! background's colour statistics and differs only in fine texture.

mod augment;
mod corpus;
mod noise;
mod png;
mod resample;
mod shapes;

use std::collections::BTreeMap;

use camorect_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::plane::Plane;

pub use augment::{augment_pair, augment_pair_with, augment_view, AugParams, AugmentedPair, View};
pub use corpus::{
    build_corpus, load_corpus, read_manifest, sample_id, split_seeds, Corpus, Manifest, SampleEntry, Split, SplitSeeds,
    MANIFEST, SCHEMA_VERSION,
};
pub use noise::{fractal_noise, value_noise};
pub use png::{decode_gray, decode_rgb, read_gray, write_gray, write_rgb};
pub use resample::{crop_bilinear, crop_nearest, cubic_kernel, degrade, psnr, upsample, Window};
pub use shapes::{count_components, draw_shape, ShapeKind};

pub const SCALES: [usize; 3] = [2, 4, 8];

/// Planar three-channel image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb {
    pub channels: [Plane; 3],
}

impl Rgb {
    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    pub fn map_planes(&self, f: impl Fn(&Plane) -> Plane) -> Rgb {
        Rgb {
            channels: [f(&self.channels[0]), f(&self.channels[1]), f(&self.channels[2])],
        }
    }

    pub fn try_map_planes(&self, f: impl Fn(&Plane) -> Result<Plane>) -> Result<Rgb> {
        Ok(Rgb {
            channels: [f(&self.channels[0])?, f(&self.channels[1])?, f(&self.channels[2])?],
        })
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Rgb {
        self.map_planes(|p| p.map(quantize))
    }

    /// Model input values `2x - 1`, appended as `[3, H, W]`.
    pub fn push_model_input(&self, out: &mut Vec<f64>) {
        for c in &self.channels {
            out.extend(c.data.iter().map(|v| 2.0 * v - 1.0));
        }
    }
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Stacks images into a `[B, 3, H, W]` model input in `[-1, 1]`.
pub fn images_to_tensor(images: &[&Rgb]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if (im.height(), im.width()) != (h, w) {
            return Err(invalid("images in a batch must share one size"));
        }
        im.push_model_input(&mut data);
    }
    Ok(Tensor::from_vec(data, &[images.len(), 3, h, w])?)
}

/// Stacks binary masks into a `[B, 1, H, W]` tensor of zeros and ones.
pub fn masks_to_tensor(masks: &[&Plane]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| invalid("empty mask batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if (m.height, m.width) != (h, w) {
            return Err(invalid("masks in a batch must share one size"));
        }
        data.extend_from_slice(&m.data);
    }
    Ok(Tensor::from_vec(data, &[masks.len(), 1, h, w])?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub base_color: [f64; 3],
    /// Foreground minus background mean colour, per channel.
    pub color_shift: [f64; 3],
    pub coarse_cell: f64,
    pub coarse_amplitude: f64,
    /// Cell sizes of the foreground grain layers, finest first.
    pub grain_cells: Vec<f64>,
    /// Amplitude of each grain layer.
    pub grain_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub shape: ShapeKind,
    pub texture: TextureParams,
    pub shape_attempts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamoSample {
    pub image_hq: Rgb,
    pub image_lq: BTreeMap<usize, Rgb>,
    pub mask: Plane,
    pub seed: u64,
    pub meta: SampleMeta,
}

impl CamoSample {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    /// LQ image at `scale`, bicubic-enlarged back to the HQ size.
    pub fn lq_upsampled(&self, scale: usize) -> Result<Rgb> {
        let lq = self
            .image_lq
            .get(&scale)
            .ok_or_else(|| invalid(format!("sample {} has no {scale}x image", self.seed)))?;
        let (h, w) = (self.height(), self.width());
        Ok(lq.map_planes(|p| upsample(p, h, w)))
    }

    /// Input image for `scale`, where scale 1 means the HQ image itself.
    pub fn input_at(&self, scale: usize) -> Result<Rgb> {
        if scale == 1 {
            Ok(self.image_hq.clone())
        } else {
            self.lq_upsampled(scale)
        }
    }
}

pub fn check_size(height: usize, width: usize) -> Result<()> {
    if height < 64 || width < 64 || height % 8 != 0 || width % 8 != 0 {
        return Err(invalid(format!(
            "sample size must be at least 64x64 and divisible by 8, got {height}x{width}"
        )));
    }
    Ok(())
}

const MAX_SHAPE_ATTEMPTS: usize = 64;
const MIN_AREA: f64 = 0.01;
const MAX_AREA: f64 = 0.60;

fn centred(p: &Plane, amplitude: f64) -> Plane {
    p.map(|v| amplitude * (v - 0.5))
}

/// Deterministically generates one camouflage scene.
pub fn gen_sample(seed: u64, size: (usize, usize)) -> Result<CamoSample> {
    let (h, w) = size;
    check_size(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut attempts = 0;
    let (kind, mask) = loop {
        attempts += 1;
        let kind = if rng.random_bool(0.5) { ShapeKind::Blob } else { ShapeKind::Critter };
        let mask = draw_shape(kind, h, w, &mut rng);
        let area = mask.mean();
        if count_components(&mask) == 1 && (MIN_AREA..=MAX_AREA).contains(&area) {
            break (kind, mask);
        }
        if attempts == MAX_SHAPE_ATTEMPTS {
            return Err(invalid(format!("seed {seed}: no valid silhouette after {attempts} attempts")));
        }
    };

    let side = h.min(w) as f64;
    let base_color = [0; 3].map(|_| rng.random_range(0.3..0.7));
    let shift_norm = rng.random_range(0.02..0.05);
    let direction = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
    let dnorm = direction.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
    let color_shift = direction.map(|d| shift_norm * d / dnorm);
    let texture = TextureParams {
        base_color,
        color_shift,
        coarse_cell: side / 4.0,
        coarse_amplitude: rng.random_range(0.2..0.3),
        grain_cells: [32.0, 16.0, 8.0].map(|d| (side / d).max(2.0)).to_vec(),
        grain_amplitude: rng.random_range(0.2..0.3),
    };

    // both regions carry the same kind of coarse mottling; only the
    // foreground carries the grain, spread over octaves so that each
    // degradation factor removes more of it
    let coarse_bg = centred(&fractal_noise(h, w, texture.coarse_cell, 3, &mut rng), texture.coarse_amplitude);
    let coarse_fg = centred(&fractal_noise(h, w, texture.coarse_cell, 3, &mut rng), texture.coarse_amplitude);
    let mut grain = Plane::filled(h, w, 0.0);
    for &cell in &texture.grain_cells {
        let layer = centred(&value_noise(h, w, cell, &mut rng), texture.grain_amplitude);
        grain.data.iter_mut().zip(&layer.data).for_each(|(g, v)| *g += v);
    }
    let tints: Vec<Plane> = (0..3)
        .map(|_| centred(&fractal_noise(h, w, side / 8.0, 2, &mut rng), 0.06))
        .collect();

    let inside: Vec<bool> = mask.data.iter().map(|&m| m > 0.5).collect();
    let fg_count = inside.iter().filter(|&&b| b).count() as f64;
    let bg_count = inside.len() as f64 - fg_count;
    let channels = [0, 1, 2].map(|c| {
        let mut p = Plane::from_fn(h, w, |y, x| {
            let i = y * w + x;
            let local = if inside[i] { coarse_fg.data[i] + grain.data[i] } else { coarse_bg.data[i] };
            base_color[c] + local + tints[c].data[i]
        });
        // pin the region means so the colour distance is exactly the shift
        let (mut fg_sum, mut bg_sum) = (0.0, 0.0);
        for (v, &fg) in p.data.iter().zip(&inside) {
            if fg {
                fg_sum += v;
            } else {
                bg_sum += v;
            }
        }
        let correction = bg_sum / bg_count + color_shift[c] - fg_sum / fg_count;
        for (v, &fg) in p.data.iter_mut().zip(&inside) {
            if fg {
                *v += correction;
            }
        }
        p.map(quantize)
    });
    let image_hq = Rgb { channels };
    let mut image_lq = BTreeMap::new();
    for n in SCALES {
        image_lq.insert(n, image_hq.try_map_planes(|p| degrade(p, n))?.quantized());
    }
    Ok(CamoSample {
        image_hq,
        image_lq,
        mask,
        seed,
        meta: SampleMeta {
            shape: kind,
            texture,
            shape_attempts: attempts,
        },
    })
}

/// Mean colour distance between foreground and background.
pub fn region_color_distance(image: &Rgb, mask: &Plane) -> f64 {
    let mut d2 = 0.0;
    for c in &image.channels {
        let (mut fs, mut fc, mut bs, mut bc) = (0.0, 0.0, 0.0, 0.0);
        for (v, m) in c.data.iter().zip(&mask.data) {
            if *m > 0.5 {
                fs += v;
                fc += 1.0;
            } else {
                bs += v;
                bc += 1.0;
            }
        }
        d2 += (fs / fc - bs / bc).powi(2);
    }
    d2.sqrt()
}

/// Mean forward-difference gradient magnitude (summed over channels) inside
/// and outside the mask. Pixel pairs straddling the boundary are skipped.
pub fn region_gradient_energy(image: &Rgb, mask: &Plane) -> (f64, f64) {
    let (h, w) = (mask.height, mask.width);
    let (mut fs, mut fc, mut bs, mut bc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let m = mask.at(y, x);
            if mask.at(y, x + 1) != m || mask.at(y + 1, x) != m {
                continue;
            }
            let g: f64 = image
                .channels
                .iter()
                .map(|c| ((c.at(y, x + 1) - c.at(y, x)).powi(2) + (c.at(y + 1, x) - c.at(y, x)).powi(2)).sqrt())
                .sum();
            if m > 0.5 {
                fs += g;
                fc += 1.0;
            } else {
                bs += g;
                bc += 1.0;
            }
        }
    }
    (fs / fc.max(1.0), bs / bc.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let a = gen_sample(11, (64, 64)).unwrap();
        let b = gen_sample(11, (64, 64)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image_hq, gen_sample(12, (64, 64)).unwrap().image_hq);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(gen_sample(0, (130, 128)).is_err());
        assert!(gen_sample(0, (56, 56)).is_err());
        assert!(gen_sample(0, (64, 72)).is_ok());
    }

    #[test]
    fn lq_shapes_are_exact() {
        let s = gen_sample(3, (64, 80)).unwrap();
        for n in SCALES {
            let lq = &s.image_lq[&n];
            assert_eq!((lq.height(), lq.width()), (64 / n, 80 / n));
        }
        assert_eq!(s.lq_upsampled(4).unwrap().height(), 64);
    }

    #[test]
    fn values_are_quantized_unit_range() {
        let s = gen_sample(5, (64, 64)).unwrap();
        for c in s.image_hq.channels.iter().chain(s.image_lq.values().flat_map(|r| r.channels.iter())) {
            for &v in &c.data {
                assert!((0.0..=1.0).contains(&v));
                assert!(((v * 255.0).round() - v * 255.0).abs() < 1e-9);
            }
        }
    }

    // calibration over 100 seeds: the thresholds below were fixed after
    // inspecting the observed ranges (distance <= 0.049, gradient ratio >= 5.6)
    #[test]
    fn camouflage_calibration_over_100_seeds() {
        for seed in 0..100 {
            let s = gen_sample(seed, (64, 64)).unwrap();
            assert!(s.mask.data.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(count_components(&s.mask), 1, "seed {seed}");
            let area = s.mask.mean();
            assert!((0.01..=0.6).contains(&area), "seed {seed}: area {area}");
            let dist = region_color_distance(&s.image_hq, &s.mask);
            assert!(dist < 0.08, "seed {seed}: colour distance {dist}");
            let (fg, bg) = region_gradient_energy(&s.image_hq, &s.mask);
            assert!(fg > 1.5 * bg, "seed {seed}: gradients {fg} vs {bg}");
        }
    }

    #[test]
    fn degradation_loses_more_information_with_scale() {
        for seed in 0..10 {
            let s = gen_sample(seed, (64, 64)).unwrap();
            let psnrs: Vec<f64> = SCALES
                .iter()
                .map(|&n| {
                    let up = s.lq_upsampled(n).unwrap();
                    let mse: f64 = (0..3)
                        .map(|c| 10f64.powf(-psnr(&up.channels[c], &s.image_hq.channels[c]) / 10.0))
                        .sum::<f64>()
                        / 3.0;
                    -10.0 * mse.log10()
                })
                .collect();
            assert!(psnrs[0] > psnrs[1] && psnrs[1] > psnrs[2], "seed {seed}: {psnrs:?}");
        }
    }
}
