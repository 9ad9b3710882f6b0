use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::plane::Plane;

/// Bilinear-smoothstep value noise: random lattice values every `cell`
/// pixels, smoothly interpolated. Output lies in `[0, 1]`.
pub fn value_noise(height: usize, width: usize, cell: f64, rng: &mut ChaCha8Rng) -> Plane {
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    // random sub-cell offset so lattice lines do not align across layers
    let (oy, ox) = (rng.random::<f64>(), rng.random::<f64>());
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    Plane::from_fn(height, width, |y, x| {
        let fy = y as f64 / cell + oy;
        let fx = x as f64 / cell + ox;
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
        let v = |a: usize, b: usize| lattice[a * gw + b];
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
        let bottom = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Sum of `octaves` value-noise layers, each at half the cell size and half
/// the amplitude of the previous, renormalized to `[0, 1]`.
pub fn fractal_noise(height: usize, width: usize, cell: f64, octaves: usize, rng: &mut ChaCha8Rng) -> Plane {
    let mut acc = Plane::filled(height, width, 0.0);
    let (mut amp, mut total, mut c) = (1.0, 0.0, cell);
    for _ in 0..octaves.max(1) {
        let layer = value_noise(height, width, c.max(1.0), rng);
        for (a, v) in acc.data.iter_mut().zip(&layer.data) {
            *a += amp * v;
        }
        total += amp;
        amp *= 0.5;
        c *= 0.5;
    }
    acc.map(|v| v / total)
}
