use camorect_autograd::Tensor;

use crate::error::{invalid, Result};

/// Side of the box filter that locates boundary regions.
pub const EDGE_KERNEL: usize = 31;
pub const EDGE_GAIN: f64 = 5.0;

/// `1 + 5·|box(gt) − gt|` per pixel, with a zero-padded `31 × 31` box that
/// always divides by the full window area.
pub fn edge_weights(gt: &[f64], batch: usize, height: usize, width: usize) -> Vec<f64> {
    let r = EDGE_KERNEL / 2;
    let area = (EDGE_KERNEL * EDGE_KERNEL) as f64;
    let mut out = vec![0.0; gt.len()];
    let mut sat = vec![0.0; (height + 1) * (width + 1)];
    for b in 0..batch {
        let img = &gt[b * height * width..(b + 1) * height * width];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += img[y * width + x];
                sat[(y + 1) * (width + 1) + x + 1] = sat[y * (width + 1) + x + 1] + row;
            }
        }
        for y in 0..height {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(height));
            for x in 0..width {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(width));
                let s = sat[y1 * (width + 1) + x1] - sat[y0 * (width + 1) + x1] - sat[y1 * (width + 1) + x0]
                    + sat[y0 * (width + 1) + x0];
                let v = img[y * width + x];
                out[b * height * width + y * width + x] = 1.0 + EDGE_GAIN * (s / area - v).abs();
            }
        }
    }
    out
}

/// Edge-weighted binary cross-entropy plus edge-weighted soft IoU, averaged
/// over the batch. `pred_logits` and `gt` are `[B, 1, H, W]`; `gt` is binary.
pub fn structure_loss(pred_logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred_logits.shape() != gt.shape() || pred_logits.rank() != 4 || pred_logits.dim(1) != 1 {
        return Err(invalid(format!(
            "structure_loss needs matching [B, 1, H, W] tensors, got {:?} and {:?}",
            pred_logits.shape(),
            gt.shape()
        )));
    }
    let (b, h, w) = (gt.dim(0), gt.dim(2), gt.dim(3));
    let gt = gt.detach();
    let weights = Tensor::from_vec(edge_weights(gt.data(), b, h, w), gt.shape())?;
    let flat = |t: &Tensor| t.reshape(&[b, h * w]);
    let per_image_sum = |t: &Tensor| -> Result<Tensor> { Ok(flat(t)?.sum_axis(1)?) };

    // softplus(x) − x·y is the logits form of binary cross-entropy
    let bce = pred_logits.softplus().sub(&pred_logits.mul(&gt)?)?;
    let wbce = per_image_sum(&bce.mul(&weights)?)?.div(&per_image_sum(&weights)?)?;

    let p = pred_logits.sigmoid();
    let inter = per_image_sum(&p.mul(&gt)?.mul(&weights)?)?;
    let union = per_image_sum(&p.add(&gt)?.mul(&weights)?)?;
    let wiou = inter
        .add_scalar(1.0)
        .div(&union.sub(&inter)?.add_scalar(1.0))?
        .neg()
        .add_scalar(1.0);
    Ok(wbce.add(&wiou)?.mean_all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use camorect_autograd::fd::{central_difference, relative_error};

    fn seeded_case() -> (Tensor, Tensor) {
        let (b, h, w) = (2, 8, 8);
        let logits: Vec<f64> = (0..b * h * w).map(|i| ((i * 29) % 23) as f64 / 23.0 * 6.0 - 3.0).collect();
        let mask: Vec<f64> = (0..b * h * w)
            .map(|i| {
                let (s, y, x) = (i / (h * w), (i / w) % h, i % w);
                let d = (y as f64 - 3.5).powi(2) + (x as f64 - 3.5 - s as f64).powi(2);
                if d < 7.0 { 1.0 } else { 0.0 }
            })
            .collect();
        (
            Tensor::from_vec(logits, &[b, 1, h, w]).unwrap(),
            Tensor::from_vec(mask, &[b, 1, h, w]).unwrap(),
        )
    }

    #[test]
    fn uniform_foreground_at_half_probability() {
        // every pixel sees 16 ones in its 31x31 window
        let w = 1.0 + 5.0 * 945.0 / 961.0;
        let expected = 2f64.ln() + 1.0 - (8.0 * w + 1.0) / (16.0 * w + 1.0);
        let loss = structure_loss(&Tensor::zeros(&[1, 1, 4, 4]), &Tensor::ones(&[1, 1, 4, 4]))
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn matches_reference_transcription() {
        let (logits, mask) = seeded_case();
        let loss = structure_loss(&logits, &mask).unwrap().item().unwrap();
        assert!((loss - 1.4158425975856936).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn near_perfect_fit_is_small() {
        let mask: Vec<f64> = (0..256).map(|i| if (i / 16) % 16 > 4 && i % 16 < 11 { 1.0 } else { 0.0 }).collect();
        let logits: Vec<f64> = mask.iter().map(|&m| if m > 0.5 { 30.0 } else { -30.0 }).collect();
        let loss = structure_loss(
            &Tensor::from_vec(logits, &[1, 1, 16, 16]).unwrap(),
            &Tensor::from_vec(mask, &[1, 1, 16, 16]).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap();
        assert!(loss < 0.01, "{loss}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mask = Tensor::from_vec(
            vec![0., 1., 1., 0., 1., 1., 1., 0., 0., 1., 0., 0., 0., 0., 0., 1.],
            &[1, 1, 4, 4],
        )
        .unwrap();
        let x0: Vec<f64> = (0..16).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let logits = Tensor::variable(x0.clone(), &[1, 1, 4, 4]).unwrap();
        let grads = structure_loss(&logits, &mask).unwrap().backward().unwrap();
        let analytic = grads.get(&logits).unwrap().to_vec();
        let numeric = central_difference(
            |x| {
                let t = Tensor::from_slice(x, &[1, 1, 4, 4]).unwrap();
                structure_loss(&t, &mask).unwrap().item().unwrap()
            },
            &x0,
            1e-5,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(structure_loss(&Tensor::zeros(&[1, 1, 4, 4]), &Tensor::zeros(&[1, 1, 4, 5])).is_err());
        assert!(structure_loss(&Tensor::zeros(&[1, 2, 4, 4]), &Tensor::zeros(&[1, 2, 4, 4])).is_err());
    }
}
