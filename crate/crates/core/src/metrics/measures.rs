//! The four camouflaged-object-detection measures on a continuous
//! prediction in `[0, 1]` against a binary ground truth. Ground-truth
//! pixels count as foreground when `> 0.5`.

use crate::error::Result;
use crate::plane::Plane;

/// Machine epsilon, used as the guard term in every ratio.
const EPS: f64 = f64::EPSILON;

fn foreground(gt: &Plane) -> Vec<bool> {
    gt.data.iter().map(|&v| v > 0.5).collect()
}

/// Mean absolute error.
pub fn mae(pred: &Plane, gt: &Plane) -> Result<f64> {
    pred.same_shape(gt, "mae")?;
    Ok(pred.data.iter().zip(&gt.data).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Structure measure `α·S_object + (1 − α)·S_region`.
pub fn s_measure(pred: &Plane, gt: &Plane, alpha: f64) -> Result<f64> {
    pred.same_shape(gt, "s_measure")?;
    let fg = foreground(gt);
    let ratio = fg.iter().filter(|&&f| f).count() as f64 / fg.len() as f64;
    if ratio == 0.0 {
        return Ok(1.0 - pred.mean());
    }
    if ratio == 1.0 {
        return Ok(pred.mean());
    }
    let score = alpha * s_object(pred, &fg, ratio) + (1.0 - alpha) * s_region(pred, &fg, gt.width, gt.height);
    Ok(score.max(0.0))
}

fn s_object(pred: &Plane, fg: &[bool], ratio: f64) -> f64 {
    let inside: Vec<f64> = pred.data.iter().zip(fg).filter(|(_, &f)| f).map(|(&p, _)| p).collect();
    let outside: Vec<f64> = pred.data.iter().zip(fg).filter(|(_, &f)| !f).map(|(&p, _)| 1.0 - p).collect();
    ratio * object_score(&inside) + (1.0 - ratio) * object_score(&outside)
}

fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

/// Foreground centroid, rounded half-to-even and shifted by one, as
/// `(column, row)` split points.
fn centroid(fg: &[bool], width: usize, height: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in fg.iter().enumerate().filter(|(_, &f)| f) {
        sx += (i % width) as f64;
        sy += (i / width) as f64;
        n += 1;
    }
    let (x, y) = if n == 0 {
        ((width as f64 / 2.0).round_ties_even(), (height as f64 / 2.0).round_ties_even())
    } else {
        ((sx / n as f64).round_ties_even(), (sy / n as f64).round_ties_even())
    };
    (x as usize + 1, y as usize + 1)
}

fn s_region(pred: &Plane, fg: &[bool], width: usize, height: usize) -> f64 {
    let (cx, cy) = centroid(fg, width, height);
    let area = (width * height) as f64;
    let quadrants = [(0, cy, 0, cx), (0, cy, cx, width), (cy, height, 0, cx), (cy, height, cx, width)];
    let mut score = 0.0;
    let mut weight_sum = 0.0;
    for (qi, &(y0, y1, x0, x1)) in quadrants.iter().enumerate() {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(pred.at(y, x));
                g.push(if fg[y * width + x] { 1.0 } else { 0.0 });
            }
        }
        let weight = if qi == 3 {
            1.0 - weight_sum
        } else {
            ((y1 - y0) * (x1 - x0)) as f64 / area
        };
        weight_sum += weight;
        score += weight * region_ssim(&p, &g);
    }
    score
}

fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n as f64;
    let y = gt.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (p, g) in pred.iter().zip(gt) {
            sxx += (p - x) * (p - x);
            syy += (g - y) * (g - y);
            sxy += (p - x) * (g - y);
        }
        let d = (n - 1) as f64;
        sxx /= d;
        syy /= d;
        sxy /= d;
    }
    let num = 4.0 * x * y * sxy;
    let den = (x * x + y * y) * (sxx + syy);
    if num != 0.0 {
        num / (den + EPS)
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Mean enhanced-alignment measure over the 256 thresholds `k/256`,
/// `k = 1..=256`, a pixel being foreground when `pred >= k/256`.
pub fn e_measure(pred: &Plane, gt: &Plane) -> Result<f64> {
    pred.same_shape(gt, "e_measure")?;
    let fg = foreground(gt);
    let n = fg.len();
    let gt_fg = fg.iter().filter(|&&f| f).count();
    // 256·p is exact, so its floor is the highest threshold index reached
    let mut hist_fg = [0usize; 257];
    let mut hist_bg = [0usize; 257];
    for (&p, &f) in pred.data.iter().zip(&fg) {
        let level = (p.clamp(0.0, 1.0) * 256.0).floor() as usize;
        if f {
            hist_fg[level] += 1;
        } else {
            hist_bg[level] += 1;
        }
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut total = 0.0;
    for k in (1..=256).rev() {
        tp += hist_fg[k];
        fp += hist_bg[k];
        let pred_fg = tp + fp;
        let sum = if gt_fg == 0 {
            (n - pred_fg) as f64
        } else if gt_fg == n {
            pred_fg as f64
        } else {
            alignment_sum(tp, fp, pred_fg, gt_fg, n)
        };
        total += sum / n as f64;
    }
    Ok(total / 256.0)
}

fn alignment_sum(tp: usize, fp: usize, pred_fg: usize, gt_fg: usize, n: usize) -> f64 {
    let fn_ = gt_fg - tp;
    let tn = n - pred_fg - fn_;
    let mean_pred = pred_fg as f64 / n as f64;
    let mean_gt = gt_fg as f64 / n as f64;
    let parts = [
        (tp, 1.0 - mean_pred, 1.0 - mean_gt),
        (fp, 1.0 - mean_pred, -mean_gt),
        (fn_, -mean_pred, 1.0 - mean_gt),
        (tn, -mean_pred, -mean_gt),
    ];
    parts
        .iter()
        .map(|&(count, a, b)| {
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            (align + 1.0).powi(2) / 4.0 * count as f64
        })
        .sum()
}

/// Weighted F-measure with error dependency (7×7 Gaussian, σ = 5) and
/// distance-based importance of background errors.
pub fn weighted_f(pred: &Plane, gt: &Plane, beta2: f64) -> Result<f64> {
    pred.same_shape(gt, "weighted_f")?;
    let fg = foreground(gt);
    if !fg.iter().any(|&f| f) {
        return Ok(0.0);
    }
    let (h, w) = (gt.height, gt.width);
    let g: Vec<f64> = fg.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    let err: Vec<f64> = pred.data.iter().zip(&g).map(|(p, g)| (p - g).abs()).collect();
    let (dist, nearest) = nearest_foreground(&fg, w, h);

    // background errors take the error of their nearest object pixel
    let et: Vec<f64> = (0..h * w).map(|i| if fg[i] { err[i] } else { err[nearest[i]] }).collect();
    let kernel = gaussian_kernel(7, 5.0);
    let ea = convolve_zero(&et, w, h, &kernel, 7);
    let mut fp = 0.0;
    let mut fg_err = 0.0;
    let mut fg_count = 0.0;
    for i in 0..h * w {
        let min_e = if fg[i] && ea[i] < err[i] { ea[i] } else { err[i] };
        let importance = if fg[i] {
            1.0
        } else {
            2.0 - ((0.5f64).ln() / 5.0 * dist[i]).exp()
        };
        let ew = min_e * importance;
        if fg[i] {
            fg_err += ew;
            fg_count += 1.0;
        } else {
            fp += ew;
        }
    }
    let tp = fg_count - fg_err;
    let recall = 1.0 - fg_err / fg_count;
    let precision = tp / (tp + fp + EPS);
    Ok((1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS))
}

/// Euclidean distance to, and index of, the nearest foreground pixel.
/// Ties go to the smallest row-major index. Only boundary pixels of the
/// object can be nearest, so the search is restricted to them.
fn nearest_foreground(fg: &[bool], w: usize, h: usize) -> (Vec<f64>, Vec<usize>) {
    let boundary: Vec<usize> = (0..h * w)
        .filter(|&i| {
            if !fg[i] {
                return false;
            }
            let (y, x) = (i / w, i % w);
            (y > 0 && !fg[i - w]) || (y + 1 < h && !fg[i + w]) || (x > 0 && !fg[i - 1]) || (x + 1 < w && !fg[i + 1])
        })
        .collect();
    let mut dist = vec![0.0; h * w];
    let mut nearest: Vec<usize> = (0..h * w).collect();
    for i in 0..h * w {
        if fg[i] {
            continue;
        }
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        let mut best = (i64::MAX, usize::MAX);
        for &b in &boundary {
            let (by, bx) = ((b / w) as i64, (b % w) as i64);
            let d2 = (by - y).pow(2) + (bx - x).pow(2);
            if d2 < best.0 || (d2 == best.0 && b < best.1) {
                best = (d2, b);
            }
        }
        dist[i] = (best.0 as f64).sqrt();
        nearest[i] = best.1;
    }
    (dist, nearest)
}

/// Normalized `size × size` Gaussian with negligible tails zeroed.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let max = k.iter().cloned().fold(0.0, f64::max);
    for v in &mut k {
        if *v < f64::EPSILON * max {
            *v = 0.0;
        }
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_zero(src: &[f64], w: usize, h: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for ky in -r..=r {
                for kx in -r..=r {
                    let (sy, sx) = (y - ky, x - kx);
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        acc += kernel[((ky + r) as usize) * size + (kx + r) as usize] * src[sy as usize * w + sx as usize];
                    }
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, v: &[f64]) -> Plane {
        Plane::new(h, w, v.to_vec()).unwrap()
    }

    fn square_gt() -> Plane {
        Plane::from_fn(8, 8, |y, x| if (2..6).contains(&y) && (3..7).contains(&x) { 1.0 } else { 0.0 })
    }

    #[test]
    fn mae_cases() {
        let gt = plane(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&gt.map(|v| 1.0 - v), &gt).unwrap(), 1.0);
        assert_eq!(mae(&plane(2, 2, &[0.5, 0.5, 0.0, 1.0]), &gt).unwrap(), 0.25);
        assert!(mae(&plane(1, 4, &[0.0; 4]), &gt).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = square_gt();
        assert!((s_measure(&gt, &gt, 0.5).unwrap() - 1.0).abs() < 1e-12);
        assert!((e_measure(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!((weighted_f(&gt, &gt, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_ground_truths() {
        let zeros = Plane::filled(8, 8, 0.0);
        let ones = Plane::filled(8, 8, 1.0);
        assert_eq!(s_measure(&zeros, &zeros, 0.5).unwrap(), 1.0);
        assert_eq!(s_measure(&ones, &ones, 0.5).unwrap(), 1.0);
        assert_eq!(s_measure(&ones, &zeros, 0.5).unwrap(), 0.0);
        assert_eq!(e_measure(&ones, &ones).unwrap(), 1.0);
        assert_eq!(e_measure(&zeros, &zeros).unwrap(), 1.0);
        assert_eq!(weighted_f(&zeros, &zeros, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn empty_prediction_has_zero_weighted_f() {
        // the object keeps clear of the border, where zero padding would
        // shrink the propagated error
        let gt = Plane::from_fn(16, 16, |y, x| if (5..11).contains(&y) && (4..12).contains(&x) { 1.0 } else { 0.0 });
        assert!(weighted_f(&Plane::filled(16, 16, 0.0), &gt, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn half_to_even_centroid() {
        // foreground columns 0 and 1 average to 0.5, which rounds to 0
        let fg = [true, true, false, false];
        assert_eq!(centroid(&fg, 4, 1), (1, 1));
        // columns 2 and 3 average to 2.5, which rounds to 2
        let fg = [false, false, true, true];
        assert_eq!(centroid(&fg, 4, 1), (3, 1));
    }

    /// Deterministic pair shared with a numpy/scipy transcription of the
    /// measures; the frozen values below come from that transcription, with
    /// nearest-object ties resolved to the first pixel in row-major order.
    fn reference_case(n: usize) -> (Plane, Plane) {
        let c = (n as f64 - 1.0) / 2.0;
        let nn = (n * n) as f64;
        let pred = Plane::from_fn(n, n, |y, x| ((y * n + x) * 37 % 101) as f64 / 100.0);
        let gt = Plane::from_fn(n, n, |y, x| {
            let (dy, dx) = (y as f64 - c + 0.7, x as f64 - c - 0.4);
            if dy * dy / (nn / 9.0) + dx * dx / (nn / 16.0) < 1.0 { 1.0 } else { 0.0 }
        });
        (pred, gt)
    }

    #[test]
    fn matches_frozen_reference_values() {
        let cases = [
            (8, [0.361_859_475_819_711_34, 0.417_363_721_123_446_05, 0.413_175_680_737_682_4, 0.479_843_75]),
            (16, [0.309_257_928_454_552_74, 0.392_693_305_242_470_54, 0.335_915_662_335_999_2, 0.507_148_437_5]),
        ];
        for (n, [s, e, f, m]) in cases {
            let (pred, gt) = reference_case(n);
            assert!((s_measure(&pred, &gt, 0.5).unwrap() - s).abs() < 1e-12, "S n={n}");
            assert!((e_measure(&pred, &gt).unwrap() - e).abs() < 1e-12, "E n={n}");
            assert!((weighted_f(&pred, &gt, 1.0).unwrap() - f).abs() < 1e-12, "F n={n}");
            assert!((mae(&pred, &gt).unwrap() - m).abs() < 1e-12, "M n={n}");
            // an inverted binary prediction is anti-aligned at every threshold
            let inverse = gt.map(|v| 1.0 - v);
            assert!(e_measure(&inverse, &gt).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(7, 5.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[48]);
        assert!(k[24] > k[0]);
    }
}
