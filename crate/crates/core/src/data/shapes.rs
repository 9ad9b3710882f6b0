use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::plane::Plane;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Star-shaped blob with a few harmonic wobbles.
    Blob,
    /// Body, head, legs and tail built from overlapping ellipses.
    Critter,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    /// Point at fraction `t` of the major semi-axis, `side` of the minor.
    fn point(&self, t: f64, side: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (t * self.rx, side * self.ry);
        (self.cy + s * u + c * v, self.cx + c * u - s * v)
    }
}

/// Rasterizes a random silhouette of `kind` at pixel centres.
pub fn draw_shape(kind: ShapeKind, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Plane {
    let side = height.min(width) as f64;
    let cy = height as f64 * rng.random_range(0.35..0.65);
    let cx = width as f64 * rng.random_range(0.35..0.65);
    match kind {
        ShapeKind::Blob => {
            let r0 = side * rng.random_range(0.14..0.28);
            let harmonics: Vec<(f64, f64, f64)> = (2..=4)
                .map(|k| (k as f64, rng.random_range(-0.15..0.15), rng.random_range(0.0..2.0 * PI)))
                .collect();
            Plane::from_fn(height, width, |y, x| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let theta = dy.atan2(dx);
                let r = r0 * (1.0 + harmonics.iter().map(|(k, a, p)| a * (k * theta + p).cos()).sum::<f64>());
                if (dy * dy + dx * dx).sqrt() <= r { 1.0 } else { 0.0 }
            })
        }
        ShapeKind::Critter => {
            let angle = rng.random_range(0.0..PI);
            let body = Ellipse {
                cy,
                cx,
                rx: side * rng.random_range(0.15..0.22),
                ry: side * rng.random_range(0.07..0.11),
                angle,
            };
            let mut parts = vec![body];
            let (hy, hx) = body.point(1.0, 0.0);
            let head_r = side * rng.random_range(0.05..0.08);
            parts.push(Ellipse {
                cy: hy,
                cx: hx,
                ry: head_r,
                rx: head_r * 1.2,
                angle,
            });
            for (t, s) in [(-0.5, 1.0), (0.5, 1.0), (-0.5, -1.0), (0.5, -1.0)] {
                let (ly, lx) = body.point(t, s * 0.9);
                let tilt = rng.random_range(-0.4..0.4);
                parts.push(Ellipse {
                    cy: ly,
                    cx: lx,
                    rx: side * 0.035,
                    ry: side * rng.random_range(0.07..0.1),
                    angle: angle + tilt,
                });
            }
            let (ty, tx) = body.point(-1.0, 0.0);
            parts.push(Ellipse {
                cy: ty,
                cx: tx,
                rx: side * rng.random_range(0.08..0.12),
                ry: side * 0.035,
                angle: angle + rng.random_range(-0.5..0.5),
            });
            Plane::from_fn(height, width, |y, x| {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if parts.iter().any(|e| e.contains(py, px)) { 1.0 } else { 0.0 }
            })
        }
    }
}

/// Number of 8-connected foreground components.
pub fn count_components(mask: &Plane) -> usize {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] <= 0.5 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] > 0.5 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}
