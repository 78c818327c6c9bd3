//! Analytic work model and wall-clock metering.
//!
//! A frozen layer still runs forward (it only leaves the backward pass);
//! a pruned head drops out entirely.

use std::collections::VecDeque;
use std::time::Duration;

use serde::Serialize;

use crate::model::{ModelConfig, Rescale};
use crate::schedule::LayerSchedule;

/// Forward flops of one transformer block over `tokens` tokens.
pub fn block_flops(tokens: usize, dim: usize, heads: usize, mlp_ratio: usize) -> f64 {
    let (t, d, h) = (tokens as f64, dim as f64, heads as f64);
    let hidden = d * mlp_ratio as f64;
    let norms = 2.0 * 8.0 * t * d;
    let projections = 4.0 * 2.0 * t * d * d + 4.0 * t * d;
    let attention = 2.0 * 2.0 * t * t * d + 5.0 * h * t * t;
    let mlp = 2.0 * 2.0 * t * d * hidden + t * hidden + t * d + 10.0 * t * hidden;
    let residual = 2.0 * t * d;
    norms + projections + attention + mlp + residual
}

/// Per-layer and per-head forward work for one batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopProfile {
    pub layer_forward: Vec<f64>,
    pub head_forward: Vec<f64>,
    /// Tap block of each head.
    pub head_taps: Vec<usize>,
    /// Backward work as a multiple of forward work.
    pub backward_factor: f64,
}

impl FlopProfile {
    pub fn from_config(cfg: &ModelConfig, batch: usize, backward_factor: f64) -> Self {
        let b = batch as f64;
        let v = cfg.num_visible();
        let n = cfg.num_patches();
        let (d, dd) = (cfg.embed_dim as f64, cfg.decoder_dim as f64);
        let embed = 2.0 * v as f64 * cfg.patch_dim() as f64 * d + 2.0 * v as f64 * d;
        let mut layer_forward = vec![b * embed];
        for _ in 0..cfg.num_blocks {
            layer_forward.push(b * block_flops(v, cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio));
        }
        let bins = cfg.hog.bins as f64;
        let head_forward = cfg
            .supervision_scales
            .iter()
            .map(|&s| {
                let s2 = (s * s) as f64;
                let norm_in = 8.0 * v as f64 * d;
                let embed = 2.0 * v as f64 * d * dd + n as f64 * dd;
                let block = block_flops(n, cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio);
                let norm_out = 8.0 * n as f64 * dd;
                let mut side = cfg.grid();
                let mut rescale = 0.0;
                for step in cfg.rescale_chain(s).unwrap_or_default() {
                    match step {
                        Rescale::Upsample => {
                            side *= 2;
                            rescale += (side * side) as f64 * dd;
                        }
                        Rescale::Pool => {
                            rescale += (side * side) as f64 * dd;
                            side /= 2;
                        }
                    }
                }
                let pred = 2.0 * s2 * dd * bins + s2 * bins;
                let loss = 3.0 * s2 * bins;
                b * (norm_in + embed + block + norm_out + rescale + pred + loss)
            })
            .collect();
        Self {
            layer_forward,
            head_forward,
            head_taps: cfg.tap_layers.clone(),
            backward_factor,
        }
    }

    /// Work of one iteration with `frozen_prefix` frozen layers and the
    /// given heads alive.
    pub fn work(&self, frozen_prefix: usize, alive: &[bool]) -> f64 {
        let encoder: f64 = self
            .layer_forward
            .iter()
            .enumerate()
            .map(|(i, f)| if i < frozen_prefix { *f } else { f * (1.0 + self.backward_factor) })
            .sum();
        let heads: f64 = self
            .head_forward
            .iter()
            .zip(alive)
            .filter(|(_, a)| **a)
            .map(|(f, _)| f * (1.0 + self.backward_factor))
            .sum();
        encoder + heads
    }

    pub fn full_work(&self) -> f64 {
        self.work(0, &vec![true; self.head_forward.len()])
    }

    /// Heads alive once `frozen_prefix` layers are frozen.
    pub fn alive_heads(&self, frozen_prefix: usize) -> Vec<bool> {
        self.head_taps.iter().map(|&tap| frozen_prefix <= tap).collect()
    }
}

/// Ratio of total scheduled work to `total_steps` never-freezing
/// iterations. A layer freezing after step `s` is excluded from steps
/// `s+1..`; pruning follows from the frozen prefix.
pub fn predict_speedup(profile: &FlopProfile, sched: &LayerSchedule, total_steps: usize) -> f64 {
    let freeze_steps: Vec<usize> = (0..sched.num_layers())
        .map(|i| sched.freeze_step(i, total_steps))
        .collect();
    let full = profile.full_work();
    let mut total = 0.0;
    for step in 1..=total_steps {
        let prefix = freeze_steps.iter().take_while(|&&f| f < step).count();
        total += profile.work(prefix, &profile.alive_heads(prefix));
    }
    total / (total_steps as f64 * full)
}

/// Predicted work and measured wall time as training proceeds.
#[derive(Clone, Debug)]
pub struct CostMeter {
    profile: FlopProfile,
    recent: VecDeque<f64>,
    capacity: usize,
    discard: usize,
    seen: usize,
    pub cumulative_work: f64,
}

impl CostMeter {
    pub fn new(profile: FlopProfile, capacity: usize, discard: usize) -> Self {
        Self {
            profile,
            recent: VecDeque::with_capacity(capacity),
            capacity,
            discard,
            seen: 0,
            cumulative_work: 0.0,
        }
    }

    pub fn profile(&self) -> &FlopProfile {
        &self.profile
    }

    /// Accounts one executed iteration's predicted work.
    pub fn record_work(&mut self, frozen_prefix: usize, alive: &[bool]) -> f64 {
        let w = self.profile.work(frozen_prefix, alive);
        self.cumulative_work += w;
        w
    }

    /// Appends an iteration's wall time in milliseconds. The first
    /// `discard` samples are cache warm-up and are dropped.
    pub fn measure_iteration(&mut self, elapsed: Duration) -> Option<f64> {
        self.seen += 1;
        let ms = elapsed.as_secs_f64() * 1e3;
        if self.seen <= self.discard {
            return None;
        }
        if self.recent.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back(ms);
        Some(ms)
    }

    pub fn recent_median(&self) -> Option<f64> {
        median(self.recent.iter().copied().collect())
    }
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{LrScaling, ScheduleConfig, Spacing};

    fn single_layer() -> FlopProfile {
        FlopProfile {
            layer_forward: vec![1.0, 0.0],
            head_forward: vec![],
            head_taps: vec![],
            backward_factor: 2.0,
        }
    }

    #[test]
    fn never_freezing_is_one() {
        let p = single_layer();
        let cfg = ScheduleConfig {
            t0: 1.0,
            warmup_fraction: 0.0,
            ..ScheduleConfig::default()
        };
        let s = LayerSchedule::new(&cfg, 2, 1.0).unwrap();
        assert_eq!(predict_speedup(&p, &s, 1000), 1.0);
    }

    #[test]
    fn half_frozen_single_layer() {
        // layer 0 frozen after t = 0.5; layer 1 carries no work
        let p = single_layer();
        let cfg = ScheduleConfig {
            t0: 0.5,
            spacing: Spacing::Linear,
            lr_scaling: LrScaling::Unscaled,
            warmup_fraction: 0.0,
            ..ScheduleConfig::default()
        };
        let s = LayerSchedule::new(&cfg, 2, 1.0).unwrap();
        let r = predict_speedup(&p, &s, 1000);
        assert!((r - (1.0 - 2.0 / 3.0 * 0.5)).abs() < 1e-12, "{r}");
    }

    #[test]
    fn work_strictly_drops_per_frozen_layer() {
        let p = FlopProfile::from_config(&ModelConfig::vit_b(), 1, 2.0);
        let mut prev = f64::INFINITY;
        for prefix in 0..=13 {
            let w = p.work(prefix, &p.alive_heads(prefix));
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn meter_discards_warmup() {
        let mut m = CostMeter::new(single_layer(), 4, 2);
        for ms in [100, 100, 5, 6, 7] {
            m.measure_iteration(Duration::from_millis(ms));
        }
        assert_eq!(m.recent_median(), Some(6.0));
    }
}
