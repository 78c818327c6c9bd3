use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits a `C×H×W` image into `N = HW/P²` rows of `P²·C` values.
///
/// Patches are in raster order; within a patch, pixels are row-major and
/// the channel index varies fastest.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::dim(format!("patchify expects C×H×W, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!("{h}×{w} image is not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * row);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        out.push(src[(ch * h + py * patch + y) * w + px * patch + x]);
                    }
                }
            }
        }
    }
    Tensor::new([gh * gw, row], out)
}

/// Inverse of [`patchify`] for a square image of `channels` channels.
pub fn unpatchify(patches: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let n = patches.shape()[0];
    let g = (n as f64).sqrt().round() as usize;
    if patches.rank() != 2 || g * g != n || patches.shape()[1] != patch * patch * channels {
        return Err(Error::dim(format!(
            "cannot unpatchify {:?} with patch {patch} and {channels} channels",
            patches.shape()
        )));
    }
    let side = g * patch;
    let mut out = vec![0.0; channels * side * side];
    let src = patches.data();
    let mut i = 0;
    for py in 0..g {
        for px in 0..g {
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..channels {
                        out[(ch * side + py * patch + y) * side + px * patch + x] = src[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Tensor::new([channels, side, side], out)
}

/// Fixed 2D sine-cosine positional embeddings, `[grid², dim]`.
///
/// Half the channels encode the row, half the column; `dim` must be a
/// multiple of 4.
pub fn sincos_2d(grid: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(4) {
        return Err(Error::dim(format!("sin-cos embedding needs dim % 4 == 0, got {dim}")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(grid * grid * dim);
    for y in 0..grid {
        for x in 0..grid {
            for pos in [y as f64, x as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin()));
                out.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Tensor::new([grid * grid, dim], out)
}
