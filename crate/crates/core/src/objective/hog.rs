//! Histogram-of-oriented-gradients supervision targets.
//!
//! Centered `[-1, 0, 1]` derivatives with edge replication, unsigned
//! orientations over `[0, π)` split linearly between the two nearest bin
//! centers (bin `k` is centered at `kπ/bins`), magnitude-weighted per-cell
//! accumulation and per-cell L2 normalization.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRule {
    /// Each pixel votes with the channel of largest gradient magnitude.
    #[default]
    MaxMagnitude,
    /// Every channel votes with its own gradient.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HogConfig {
    pub bins: usize,
    pub channel_rule: ChannelRule,
    pub eps: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            bins: 9,
            channel_rule: ChannelRule::MaxMagnitude,
            eps: 1e-6,
        }
    }
}

/// Per-pixel gradient votes of one image.
#[derive(Clone, Debug)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    /// `(pixel index, magnitude, unsigned orientation)`.
    pub votes: Vec<(usize, f64, f64)>,
}

fn unsigned_angle(gx: f64, gy: f64) -> f64 {
    let mut theta = gy.atan2(gx);
    if theta < 0.0 {
        theta += PI;
    }
    if theta >= PI {
        theta -= PI;
    }
    theta
}

pub fn gradient_field(image: &Tensor, rule: ChannelRule) -> Result<GradientField> {
    if image.rank() != 3 {
        return Err(Error::dim(format!("expected C×H×W image, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let px = image.data();
    let at = |ch: usize, y: usize, x: usize| px[(ch * h + y) * w + x];
    let mut votes = Vec::with_capacity(h * w * if rule == ChannelRule::Sum { c } else { 1 });
    for y in 0..h {
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let pixel = y * w + x;
            let mut best: Option<(f64, f64, f64)> = None;
            for ch in 0..c {
                let gx = at(ch, y, xr) - at(ch, y, xl);
                let gy = at(ch, yd, x) - at(ch, yu, x);
                let mag = (gx * gx + gy * gy).sqrt();
                match rule {
                    ChannelRule::Sum => votes.push((pixel, mag, unsigned_angle(gx, gy))),
                    ChannelRule::MaxMagnitude => {
                        if best.is_none_or(|(m, _, _)| mag > m) {
                            best = Some((mag, gx, gy));
                        }
                    }
                }
            }
            if let Some((mag, gx, gy)) = best {
                votes.push((pixel, mag, unsigned_angle(gx, gy)));
            }
        }
    }
    Ok(GradientField { height: h, width: w, votes })
}

/// Unnormalized `[bins, H/cell, W/cell]` histograms.
pub fn cell_histograms_raw(field: &GradientField, cell: usize, bins: usize) -> Result<Tensor> {
    if cell == 0 || !field.height.is_multiple_of(cell) || !field.width.is_multiple_of(cell) {
        return Err(Error::dim(format!(
            "{}×{} image is not divisible into {cell}-pixel cells",
            field.height, field.width
        )));
    }
    if bins == 0 {
        return Err(Error::config("hog.bins", "need at least one orientation bin"));
    }
    let (ch, cw) = (field.height / cell, field.width / cell);
    let mut hist = vec![0.0; bins * ch * cw];
    let bin_width = PI / bins as f64;
    for &(pixel, mag, theta) in &field.votes {
        if mag == 0.0 {
            continue;
        }
        let (y, x) = (pixel / field.width, pixel % field.width);
        let c = (y / cell) * cw + x / cell;
        let pos = theta / bin_width;
        let lo_f = pos.floor();
        let frac = pos - lo_f;
        let lo = (lo_f as usize) % bins;
        let hi = (lo + 1) % bins;
        hist[lo * ch * cw + c] += mag * (1.0 - frac);
        hist[hi * ch * cw + c] += mag * frac;
    }
    Tensor::new([bins, ch, cw], hist)
}

/// Scales each cell's histogram by `1 / sqrt(‖h‖² + eps²)`.
pub fn normalize_cells(hist: &mut Tensor, eps: f64) {
    let bins = hist.shape()[0];
    let cells = hist.numel() / bins;
    let data = hist.data_mut();
    for c in 0..cells {
        let norm2: f64 = (0..bins).map(|b| data[b * cells + c].powi(2)).sum();
        let inv = 1.0 / (norm2 + eps * eps).sqrt();
        for b in 0..bins {
            data[b * cells + c] *= inv;
        }
    }
}

/// HOG descriptor map `[bins, H/cell, W/cell]` of a `C×H×W` image.
pub fn hog_features(image: &Tensor, cell: usize, cfg: &HogConfig) -> Result<Tensor> {
    let field = gradient_field(image, cfg.channel_rule)?;
    let mut hist = cell_histograms_raw(&field, cell, cfg.bins)?;
    normalize_cells(&mut hist, cfg.eps);
    Ok(hist)
}

/// Reorders a `[bins, s, s]` map into `[s·s, bins]` rows in raster order,
/// the layout decoder predictions use.
pub fn to_rows(map: &Tensor) -> Result<Tensor> {
    let bins = map.shape()[0];
    let cells = map.numel() / bins;
    let d = map.data();
    Tensor::new(
        [cells, bins],
        (0..cells * bins).map(|i| d[(i % bins) * cells + i / bins]).collect(),
    )
}

/// Per-scale HOG targets of one image; `maps[l]` is `[s_l², bins]` or
/// `None` when that scale was not requested.
#[derive(Clone, Debug)]
pub struct SupervisionTarget {
    pub scales: Vec<usize>,
    pub maps: Vec<Option<Tensor>>,
}

/// Builds targets at every scale; scale `s` uses `H/s`-pixel cells.
pub fn build_targets(image: &Tensor, scales: &[usize], cfg: &HogConfig) -> Result<SupervisionTarget> {
    build_targets_for(image, scales, &vec![true; scales.len()], cfg)
}

/// Like [`build_targets`] but only for scales with `wanted[l]`.
pub fn build_targets_for(
    image: &Tensor,
    scales: &[usize],
    wanted: &[bool],
    cfg: &HogConfig,
) -> Result<SupervisionTarget> {
    if image.rank() != 3 {
        return Err(Error::dim(format!("expected C×H×W image, got {:?}", image.shape())));
    }
    let h = image.shape()[1];
    for &s in scales {
        if s == 0 || !h.is_multiple_of(s) || !image.shape()[2].is_multiple_of(s) {
            return Err(Error::config(
                "model.supervision_scales",
                format!("scale {s} does not divide image size {h}"),
            ));
        }
    }
    let field = if wanted.iter().any(|&w| w) {
        Some(gradient_field(image, cfg.channel_rule)?)
    } else {
        None
    };
    let maps = scales
        .iter()
        .zip(wanted)
        .map(|(&s, &want)| match (&field, want) {
            (Some(f), true) => {
                let mut hist = cell_histograms_raw(f, h / s, cfg.bins)?;
                normalize_cells(&mut hist, cfg.eps);
                to_rows(&hist).map(Some)
            }
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    Ok(SupervisionTarget {
        scales: scales.to_vec(),
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_histograms() {
        let img = Tensor::full([3, 16, 16], 0.4);
        let h = hog_features(&img, 4, &HogConfig::default()).unwrap();
        assert_eq!(h.shape(), &[9, 4, 4]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_cells_rejected() {
        let img = Tensor::zeros([1, 10, 10]);
        assert!(matches!(hog_features(&img, 4, &HogConfig::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn normalized_cells_have_unit_or_zero_norm() {
        let img = Tensor::from_fn([3, 16, 16], |i| ((i * 37) % 101) as f64 / 100.0);
        let h = hog_features(&img, 4, &HogConfig::default()).unwrap();
        for c in 0..16 {
            let n2: f64 = (0..9).map(|b| h.data()[b * 16 + c].powi(2)).sum();
            assert!(n2.sqrt() <= 1.0 + 1e-6);
            assert!(h.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cell_sizes_follow_scales() {
        let img = Tensor::from_fn([3, 64, 64], |i| (i % 7) as f64 / 7.0);
        let t = build_targets(&img, &[16, 8, 8, 4], &HogConfig::default()).unwrap();
        let rows: Vec<_> = t.maps.iter().map(|m| m.as_ref().unwrap().shape().to_vec()).collect();
        assert_eq!(rows, vec![vec![256, 9], vec![64, 9], vec![64, 9], vec![16, 9]]);
        assert!(build_targets(&img, &[5], &HogConfig::default()).is_err());
    }

    #[test]
    fn to_rows_transposes() {
        let m = Tensor::from_fn([2, 1, 3], |i| i as f64);
        let r = to_rows(&m).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
