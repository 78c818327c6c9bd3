use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Which patches of one image are hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskPlan {
    pub num_patches: usize,
    /// Sorted ascending.
    pub masked_indices: Vec<usize>,
    /// Sorted ascending; complement of `masked_indices`.
    pub visible_indices: Vec<usize>,
    pub seed: u64,
}

/// Number of masked patches for ratio `r`: `round(r · n)`.
pub fn masked_count(n: usize, r: f64) -> usize {
    (r * n as f64).round() as usize
}

/// Uniform subset of `round(r·n)` patches without replacement,
/// deterministic in `seed`.
pub fn sample_mask(seed: u64, n: usize, r: f64) -> Result<MaskPlan> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::config("model.mask_ratio", format!("mask ratio ∈ (0,1) required, got {r}")));
    }
    if n < 2 {
        return Err(Error::contract(format!("need at least 2 patches to mask, got {n}")));
    }
    let m = masked_count(n, r);
    if m >= n {
        return Err(Error::config(
            "model.mask_ratio",
            format!("ratio {r} masks all {n} patches, leaving nothing visible"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = rand::seq::index::sample(&mut rng, n, m).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        num_patches: n,
        masked_indices: masked,
        visible_indices: visible,
        seed,
    })
}

impl MaskPlan {
    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked_indices.binary_search(&patch).is_ok()
    }

    pub fn ratio(&self) -> f64 {
        self.masked_indices.len() as f64 / self.num_patches as f64
    }

    /// Side of the square patch grid.
    pub fn grid(&self) -> Result<usize> {
        let g = (self.num_patches as f64).sqrt().round() as usize;
        if g * g != self.num_patches {
            return Err(Error::dim(format!("{} patches do not form a square grid", self.num_patches)));
        }
        Ok(g)
    }

    /// Mask weights at a `scale × scale` supervision map, raster order.
    ///
    /// At scales at least as fine as the patch grid each position inherits
    /// its patch's 0/1 value. At coarser scales a position covers several
    /// patches and takes the fraction of them that are masked, so the mean
    /// weight equals the mask ratio at every scale.
    pub fn scale_weights(&self, scale: usize) -> Result<Vec<f64>> {
        let g = self.grid()?;
        let mut flags = vec![0.0; self.num_patches];
        for &i in &self.masked_indices {
            flags[i] = 1.0;
        }
        if scale >= g {
            if !scale.is_multiple_of(g) {
                return Err(Error::dim(format!("scale {scale} is not a multiple of grid {g}")));
            }
            let f = scale / g;
            Ok((0..scale * scale)
                .map(|p| flags[(p / scale / f) * g + (p % scale) / f])
                .collect())
        } else {
            if g % scale != 0 {
                return Err(Error::dim(format!("grid {g} is not a multiple of scale {scale}")));
            }
            let f = g / scale;
            let area = (f * f) as f64;
            Ok((0..scale * scale)
                .map(|p| {
                    let (sy, sx) = (p / scale, p % scale);
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += flags[(sy * f + dy) * g + sx * f + dx];
                        }
                    }
                    acc / area
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vitb_masks_147_of_196() {
        let m = sample_mask(3, 196, 0.75).unwrap();
        assert_eq!(m.masked_indices.len(), 147);
        assert_eq!(m.visible_indices.len(), 49);
    }

    #[test]
    fn same_seed_same_plan() {
        assert_eq!(sample_mask(11, 64, 0.75).unwrap(), sample_mask(11, 64, 0.75).unwrap());
        assert_ne!(sample_mask(11, 64, 0.75).unwrap(), sample_mask(12, 64, 0.75).unwrap());
    }

    #[test]
    fn ratio_bounds() {
        for r in [0.0, 1.0, -0.1, 1.2] {
            assert!(matches!(sample_mask(0, 64, r), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn scale_weights_keep_ratio() {
        let m = sample_mask(5, 64, 0.75).unwrap();
        for s in [2, 4, 8, 16, 32] {
            let w = m.scale_weights(s).unwrap();
            assert_eq!(w.len(), s * s);
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            assert!((mean - 0.75).abs() < 1e-12, "scale {s}: {mean}");
        }
        assert!(m.scale_weights(12).is_err());
    }

    #[test]
    fn fine_scale_broadcasts_patch_value() {
        let m = sample_mask(9, 4, 0.5).unwrap();
        let w = m.scale_weights(4).unwrap();
        for (p, &wp) in w.iter().enumerate() {
            let patch = (p / 4 / 2) * 2 + (p % 4) / 2;
            assert_eq!(wp == 1.0, m.is_masked(patch));
        }
    }
}
