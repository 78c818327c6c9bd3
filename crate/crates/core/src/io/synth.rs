//! Procedural images with oriented structure, so HOG targets are never
//! degenerate.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

enum Feature {
    Ramp { angle: f64 },
    Bar { cx: f64, cy: f64, angle: f64, half_width: f64 },
    Grating { angle: f64, freq: f64, phase: f64 },
    Blob { cx: f64, cy: f64, sigma: f64 },
}

impl Feature {
    fn random(rng: &mut ChaCha8Rng, kind: usize, side: f64) -> Self {
        let angle = rng.gen_range(0.0..PI);
        match kind {
            0 => Feature::Ramp { angle },
            1 => Feature::Bar {
                cx: rng.gen_range(0.0..side),
                cy: rng.gen_range(0.0..side),
                angle,
                half_width: rng.gen_range(0.04..0.15) * side,
            },
            2 => Feature::Grating {
                angle,
                freq: rng.gen_range(1.5..6.0) / side,
                phase: rng.gen_range(0.0..2.0 * PI),
            },
            _ => Feature::Blob {
                cx: rng.gen_range(0.0..side),
                cy: rng.gen_range(0.0..side),
                sigma: rng.gen_range(0.05..0.2) * side,
            },
        }
    }

    fn eval(&self, x: f64, y: f64, side: f64) -> f64 {
        match *self {
            Feature::Ramp { angle } => (x * angle.cos() + y * angle.sin()) / side,
            Feature::Bar { cx, cy, angle, half_width } => {
                // distance across the bar, with a one-pixel soft edge
                let d = ((x - cx) * angle.cos() + (y - cy) * angle.sin()).abs();
                (half_width - d + 0.5).clamp(0.0, 1.0)
            }
            Feature::Grating { angle, freq, phase } => {
                (2.0 * PI * freq * (x * angle.cos() + y * angle.sin()) + phase).sin()
            }
            Feature::Blob { cx, cy, sigma } => {
                (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
            }
        }
    }
}

/// Image `index` of the stream for `seed`; independent of every other index.
pub fn synth_image(seed: u64, index: usize, side: usize, channels: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let s = side as f64;
    let mut layers = vec![(Feature::random(&mut rng, 0, s), colour(&mut rng, channels))];
    let extra = rng.gen_range(2..=5);
    for _ in 0..extra {
        let kind = rng.gen_range(1..4);
        layers.push((Feature::random(&mut rng, kind, s), colour(&mut rng, channels)));
    }
    let mut img = Tensor::from_fn([channels, side, side], |k| {
        let (c, y, x) = (k / (side * side), (k / side % side) as f64 + 0.5, (k % side) as f64 + 0.5);
        layers.iter().map(|(f, w)| w[c] * f.eval(x, y, s)).sum()
    });
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in img.data_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
    img
}

fn colour(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    (0..channels).map(|_| sign * rng.gen_range(0.3..1.0)).collect()
}

/// `count` deterministic images of shape `[channels, side, side]`.
pub fn synth_dataset(seed: u64, count: usize, side: usize, channels: usize) -> Result<Vec<Tensor>> {
    if count == 0 {
        return Err(Error::config("data.count", "must be at least 1"));
    }
    if side == 0 || channels == 0 {
        return Err(Error::dim(format!("image {channels}×{side}×{side}")));
    }
    Ok((0..count).map(|i| synth_image(seed, i, side, channels)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_dataset(3, 4, 16, 3).unwrap();
        let b = synth_dataset(3, 4, 16, 3).unwrap();
        assert_eq!(a, b);
        for img in &a {
            let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
        assert_ne!(a[0], a[1]);
    }
}
