use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resample::{crop_bilinear, crop_nearest, Window};
use super::{CamoSample, Rgb, SCALES};
use crate::error::{invalid, Result};
use crate::plane::Plane;

/// One augmentation draw. Geometry is expressed relative to the image size so
/// the same descriptor applies to every resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub flip: bool,
    /// Side of the crop window as a fraction of the image side, in `[0.9, 1]`.
    pub crop_scale: f64,
    /// Position of the window inside the leftover margin, in `[0, 1]`.
    pub crop_top: f64,
    pub crop_left: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugParams {
    pub const MAX_CROP: f64 = 0.1;
    pub const MAX_JITTER: f64 = 0.1;

    pub fn identity() -> Self {
        AugParams {
            flip: false,
            crop_scale: 1.0,
            crop_top: 0.0,
            crop_left: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn flip_only() -> Self {
        AugParams {
            flip: true,
            ..Self::identity()
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        AugParams {
            flip: rng.random_bool(0.5),
            crop_scale: rng.random_range(1.0 - Self::MAX_CROP..=1.0),
            crop_top: rng.random_range(0.0..=1.0),
            crop_left: rng.random_range(0.0..=1.0),
            brightness: rng.random_range(-Self::MAX_JITTER..=Self::MAX_JITTER),
            contrast: rng.random_range(-Self::MAX_JITTER..=Self::MAX_JITTER),
        }
    }

    fn window(&self, height: usize, width: usize) -> Window {
        let (h, w) = (height as f64, width as f64);
        let (ch, cw) = (self.crop_scale * h, self.crop_scale * w);
        Window {
            top: self.crop_top * (h - ch),
            left: self.crop_left * (w - cw),
            height: ch,
            width: cw,
        }
    }

    fn geometric(&self, p: &Plane, nearest: bool) -> Plane {
        let flipped;
        let src = if self.flip {
            flipped = p.flip_horizontal();
            &flipped
        } else {
            p
        };
        if self.crop_scale == 1.0 {
            return src.clone();
        }
        let win = self.window(src.height, src.width);
        if nearest {
            crop_nearest(src, win, src.height, src.width)
        } else {
            crop_bilinear(src, win, src.height, src.width)
        }
    }

    fn photometric(&self, v: f64) -> f64 {
        ((v - 0.5) * (1.0 + self.contrast) + 0.5 + self.brightness).clamp(0.0, 1.0)
    }

    pub fn apply_image(&self, image: &Rgb) -> Rgb {
        let photometric = self.brightness != 0.0 || self.contrast != 0.0;
        image.map_planes(|p| {
            let g = self.geometric(p, false);
            if photometric {
                g.map(|v| self.photometric(v))
            } else {
                g
            }
        })
    }

    pub fn apply_mask(&self, mask: &Plane) -> Plane {
        self.geometric(mask, true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Rgb,
    pub mask: Plane,
}

/// Two differently augmented views of one image. `view_b` is the second view.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub view_a: View,
    pub view_b: View,
    pub params_a: AugParams,
    pub params_b: AugParams,
}

pub fn augment_view(image: &Rgb, mask: &Plane, params: &AugParams) -> View {
    View {
        image: params.apply_image(image),
        mask: params.apply_mask(mask),
    }
}

/// Draws descriptors `a` and `b` from `rng_seed` and applies each to the HQ
/// image, the enlarged LQ image at `scale`, and the mask.
pub fn augment_pair(sample: &CamoSample, scale: usize, rng_seed: u64) -> Result<(AugmentedPair, AugmentedPair)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let a = AugParams::sample(&mut rng);
    let b = AugParams::sample(&mut rng);
    augment_pair_with(sample, scale, a, b)
}

pub fn augment_pair_with(
    sample: &CamoSample,
    scale: usize,
    a: AugParams,
    b: AugParams,
) -> Result<(AugmentedPair, AugmentedPair)> {
    if !SCALES.contains(&scale) {
        return Err(invalid(format!("scale must be one of {SCALES:?}, got {scale}")));
    }
    let lq = sample.lq_upsampled(scale)?;
    let pair = |image: &Rgb| AugmentedPair {
        view_a: augment_view(image, &sample.mask, &a),
        view_b: augment_view(image, &sample.mask, &b),
        params_a: a,
        params_b: b,
    };
    Ok((pair(&sample.image_hq), pair(&lq)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_sample;
    use proptest::prelude::*;

    fn iou(a: &Plane, b: &Plane) -> f64 {
        let (mut i, mut u) = (0.0, 0.0);
        for (x, y) in a.data.iter().zip(&b.data) {
            let (x, y) = (*x > 0.5, *y > 0.5);
            i += (x && y) as u8 as f64;
            u += (x || y) as u8 as f64;
        }
        if u == 0.0 {
            1.0
        } else {
            i / u
        }
    }

    #[test]
    fn identity_views_equal_originals() {
        let s = gen_sample(1, (64, 64)).unwrap();
        let id = AugParams::identity();
        let (hq, lq) = augment_pair_with(&s, 4, id, id).unwrap();
        assert_eq!(hq.view_a.image, s.image_hq);
        assert_eq!(hq.view_b.mask, s.mask);
        assert_eq!(lq.view_a.image, s.lq_upsampled(4).unwrap());
        assert_eq!(lq.view_b.mask, s.mask);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = gen_sample(2, (64, 64)).unwrap();
        let f = AugParams::flip_only();
        let once = augment_view(&s.image_hq, &s.mask, &f);
        assert_eq!(once.mask, s.mask.flip_horizontal());
        let twice = augment_view(&once.image, &once.mask, &f);
        assert_eq!(twice.image, s.image_hq);
        assert_eq!(twice.mask, s.mask);
    }

    #[test]
    fn descriptors_are_deterministic() {
        let s = gen_sample(3, (64, 64)).unwrap();
        let (x, _) = augment_pair(&s, 2, 99).unwrap();
        let (y, _) = augment_pair(&s, 2, 99).unwrap();
        assert_eq!((x.params_a, x.params_b), (y.params_a, y.params_b));
        assert_eq!(x, y);
        assert!(augment_pair(&s, 3, 99).is_err());
    }

    #[test]
    fn hq_and_lq_views_share_descriptors_and_masks() {
        let s = gen_sample(4, (64, 64)).unwrap();
        let (hq, lq) = augment_pair(&s, 8, 5).unwrap();
        assert_eq!(hq.params_a, lq.params_a);
        assert_eq!(hq.view_a.mask, lq.view_a.mask);
        assert_eq!(hq.view_b.mask, lq.view_b.mask);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn geometry_is_mask_synchronized(seed in 0u64..1000, aug in 0u64..1000) {
            let s = gen_sample(seed, (64, 64)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(aug);
            let p = AugParams::sample(&mut rng);
            // the mask of the transformed view is the transformed mask, and a
            // mask carried as an image channel lands on the same pixels
            let view = augment_view(&s.image_hq, &s.mask, &p);
            prop_assert_eq!(iou(&p.apply_mask(&s.mask), &view.mask), 1.0);
            let geo = AugParams { brightness: 0.0, contrast: 0.0, ..p };
            let as_image = geo.apply_image(&Rgb { channels: [s.mask.clone(), s.mask.clone(), s.mask.clone()] });
            let rounded = as_image.channels[0].map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            prop_assert!(iou(&rounded, &view.mask) > 0.9);
        }
    }
}
