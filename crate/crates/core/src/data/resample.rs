use crate::error::{invalid, Result};
use crate::plane::Plane;

/// Catmull-Rom cubic kernel (a = -0.5).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample (first index, weights) for a 1-D resampling pass.
/// `support` is the kernel stretch: `n` when shrinking, 1 when enlarging.
fn taps(src: usize, dst: usize, support: f64) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let centre = (i as f64 + 0.5) * scale - 0.5;
            let reach = 2.0 * support;
            let lo = (centre - reach).ceil().max(0.0) as usize;
            let hi = ((centre + reach).floor() as isize).min(src as isize - 1).max(0) as usize;
            let mut w: Vec<f64> = (lo..=hi).map(|j| cubic_kernel((j as f64 - centre) / support)).collect();
            let total: f64 = w.iter().sum();
            for v in &mut w {
                *v /= total;
            }
            (lo, w)
        })
        .collect()
}

fn separable(p: &Plane, out_h: usize, out_w: usize, rows: &[(usize, Vec<f64>)], cols: &[(usize, Vec<f64>)]) -> Plane {
    let mut tmp = vec![0.0; p.height * out_w];
    for y in 0..p.height {
        let row = &p.data[y * p.width..(y + 1) * p.width];
        for (x, (lo, w)) in cols.iter().enumerate() {
            tmp[y * out_w + x] = w.iter().enumerate().map(|(k, wk)| wk * row[lo + k]).sum();
        }
    }
    Plane::from_fn(out_h, out_w, |y, x| {
        let (lo, w) = &rows[y];
        w.iter().enumerate().map(|(k, wk)| wk * tmp[(lo + k) * out_w + x]).sum()
    })
}

/// Antialiased bicubic downsampling by an integer factor: the kernel is
/// stretched by `n`, weights falling outside the image are dropped and the
/// rest renormalized. Output is clipped to `[0, 1]`.
pub fn degrade(p: &Plane, n: usize) -> Result<Plane> {
    if ![2, 4, 8].contains(&n) {
        return Err(invalid(format!("degradation factor must be 2, 4 or 8, got {n}")));
    }
    if p.height % n != 0 || p.width % n != 0 {
        return Err(invalid(format!("{}x{} is not divisible by {n}", p.height, p.width)));
    }
    let (oh, ow) = (p.height / n, p.width / n);
    let rows = taps(p.height, oh, n as f64);
    let cols = taps(p.width, ow, n as f64);
    Ok(separable(p, oh, ow, &rows, &cols).map(|v| v.clamp(0.0, 1.0)))
}

/// Plain bicubic enlargement to `out_h x out_w`, edge-clamped and clipped to `[0, 1]`.
pub fn upsample(p: &Plane, out_h: usize, out_w: usize) -> Plane {
    let rows = taps(p.height, out_h, 1.0);
    let cols = taps(p.width, out_w, 1.0);
    // border taps are renormalized rather than clamped; with support 1 the
    // two differ only in the outermost half pixel
    separable(p, out_h, out_w, &rows, &cols).map(|v| v.clamp(0.0, 1.0))
}

/// A crop window in source pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl Window {
    pub fn full(p: &Plane) -> Window {
        Window {
            top: 0.0,
            left: 0.0,
            height: p.height as f64,
            width: p.width as f64,
        }
    }

    fn source(&self, i: usize, out: usize, along_y: bool) -> f64 {
        let (start, len) = if along_y { (self.top, self.height) } else { (self.left, self.width) };
        start + (i as f64 + 0.5) * len / out as f64 - 0.5
    }
}

/// Bilinear resampling of `window` onto an `out_h x out_w` grid.
pub fn crop_bilinear(p: &Plane, window: Window, out_h: usize, out_w: usize) -> Plane {
    let clampi = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    Plane::from_fn(out_h, out_w, |y, x| {
        let sy = clampi(window.source(y, out_h, true), p.height);
        let sx = clampi(window.source(x, out_w, false), p.width);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(p.height - 1), (x0 + 1).min(p.width - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        if fy == 0.0 && fx == 0.0 {
            return p.at(y0, x0);
        }
        let top = p.at(y0, x0) * (1.0 - fx) + p.at(y0, x1) * fx;
        let bottom = p.at(y1, x0) * (1.0 - fx) + p.at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resampling of `window`; keeps binary masks binary.
pub fn crop_nearest(p: &Plane, window: Window, out_h: usize, out_w: usize) -> Plane {
    Plane::from_fn(out_h, out_w, |y, x| {
        let sy = window.source(y, out_h, true).round().clamp(0.0, (p.height - 1) as f64) as usize;
        let sx = window.source(x, out_w, false).round().clamp(0.0, (p.width - 1) as f64) as usize;
        p.at(sy, sx)
    })
}

pub fn psnr(a: &Plane, b: &Plane) -> f64 {
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_image_is_preserved() {
        let p = Plane::filled(32, 24, 0.37);
        for n in [2, 4, 8] {
            let d = degrade(&p, n).unwrap();
            assert_eq!((d.height, d.width), (32 / n, 24 / n));
            assert!(d.data.iter().all(|v| (v - 0.37).abs() < 1e-12));
            let u = upsample(&d, 32, 24);
            assert!(u.data.iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn ramp_matches_direct_convolution() {
        // direct convolution + decimation with hand-derived Catmull-Rom taps
        let ramp = Plane::from_fn(4, 4, |y, x| (x + y) as f64 / 6.0);
        let d = degrade(&ramp, 2).unwrap();
        let expected = [0.19559228650137742, 0.5, 0.5, 0.8044077134986226];
        for (v, e) in d.data.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
        let ramp = Plane::from_fn(4, 4, |y, x| (x + 4 * y) as f64 / 15.0);
        let d = degrade(&ramp, 2).unwrap();
        let expected = [0.19559228650137742, 0.3173553719008265, 0.6826446280991737, 0.8044077134986227];
        for (v, e) in d.data.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn rejects_bad_factors() {
        let p = Plane::filled(12, 12, 0.0);
        assert!(degrade(&p, 3).is_err());
        assert!(degrade(&p, 8).is_err());
        assert_eq!(degrade(&Plane::filled(64, 64, 0.5), 8).unwrap().height, 8);
    }

    #[test]
    fn identity_window_is_exact() {
        let p = Plane::from_fn(9, 7, |y, x| ((y * 7 + x) % 5) as f64 / 4.0);
        assert_eq!(crop_bilinear(&p, Window::full(&p), 9, 7), p);
        assert_eq!(crop_nearest(&p, Window::full(&p), 9, 7), p);
    }

    #[test]
    fn output_is_clipped() {
        let p = Plane::from_fn(16, 16, |_, x| if x < 8 { 0.0 } else { 1.0 });
        let d = degrade(&p, 2).unwrap();
        assert!(d.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let u = upsample(&d, 16, 16);
        assert!(u.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
