//! Per-layer freeze times and learning-rate curves.
//!
//! Every freezable layer `i` gets a freeze time `t_i ∈ (0, 1]` expressed as
//! a fraction of the whole run, and an initial learning rate `α_i(0)`. Its
//! rate ramps linearly from 0 during warm-up, then follows a half cosine
//! that reaches exactly 0 at `t_i`, after which the layer is frozen.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    #[default]
    Cubic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScaling {
    #[default]
    Scaled,
    Unscaled,
}

/// User-facing schedule knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Freezable layers: patch embedding plus every encoder block. `None`
    /// means "derive from the model".
    pub num_layers: Option<usize>,
    /// First-layer freeze fraction before spacing is applied.
    pub t0: f64,
    pub spacing: Spacing,
    pub lr_scaling: LrScaling,
    /// Base learning rate at batch size 256.
    pub base_lr: f64,
    pub warmup_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_layers: None,
            t0: 0.8,
            spacing: Spacing::Cubic,
            lr_scaling: LrScaling::Scaled,
            base_lr: 1.5e-4,
            warmup_fraction: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return Err(Error::config("schedule.t0", format!("t0 ∈ (0,1] required, got {}", self.t0)));
        }
        if let Some(n) = self.num_layers {
            if n < 2 {
                return Err(Error::config("schedule.num_layers", format!("need ≥ 2 layers, got {n}")));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("schedule.base_lr", format!("must be > 0, got {}", self.base_lr)));
        }
        let first = match self.spacing {
            Spacing::Linear => self.t0,
            Spacing::Cubic => self.t0.powi(3),
        };
        if !(self.warmup_fraction >= 0.0 && self.warmup_fraction < first) {
            return Err(Error::config(
                "schedule.warmup_fraction",
                format!(
                    "0 ≤ warmup_fraction < first freeze time {first} required, got {}",
                    self.warmup_fraction
                ),
            ));
        }
        Ok(())
    }
}

/// Freeze times for `num_layers` layers: linear spacing from `t0` to 1,
/// cubed under [`Spacing::Cubic`]. The last layer always freezes at 1.
pub fn compute_freeze_times(num_layers: usize, t0: f64, spacing: Spacing) -> Result<Vec<f64>> {
    if !(t0 > 0.0 && t0 <= 1.0) {
        return Err(Error::config("schedule.t0", format!("t0 ∈ (0,1] required, got {t0}")));
    }
    if num_layers < 2 {
        return Err(Error::config("schedule.num_layers", format!("need ≥ 2 layers, got {num_layers}")));
    }
    let step = (1.0 - t0) / (num_layers - 1) as f64;
    Ok((0..num_layers)
        .map(|i| {
            let linear = if i + 1 == num_layers { 1.0 } else { t0 + i as f64 * step };
            match spacing {
                Spacing::Linear => linear,
                Spacing::Cubic => linear * linear * linear,
            }
        })
        .collect())
}

/// `α / t_i` when scaled, so every curve integrates to the same area.
pub fn initial_lr(alpha: f64, t_i: f64, scaling: LrScaling) -> Result<f64> {
    if !(t_i > 0.0 && t_i <= 1.0) {
        return Err(Error::contract(format!("freeze time must be in (0,1], got {t_i}")));
    }
    Ok(match scaling {
        LrScaling::Scaled => alpha / t_i,
        LrScaling::Unscaled => alpha,
    })
}

/// Warm-up ramp to `alpha0` over `[0, warmup)`, then a half cosine over
/// `[warmup, t_freeze)` ending at 0; 0 afterwards.
pub fn lr_curve(alpha0: f64, t_freeze: f64, warmup: f64, t: f64) -> f64 {
    if t >= t_freeze {
        0.0
    } else if t < warmup {
        alpha0 * t / warmup
    } else {
        let phase = (t - warmup) / (t_freeze - warmup);
        0.5 * alpha0 * (1.0 + (PI * phase).cos())
    }
}

/// Resolved per-layer schedule. Immutable after construction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSchedule {
    pub freeze_times: Vec<f64>,
    pub initial_lrs: Vec<f64>,
    pub warmup: f64,
    /// Effective base rate `α` (after any batch-size rule).
    pub alpha: f64,
}

impl LayerSchedule {
    /// Builds the schedule with effective base rate `alpha`.
    pub fn new(cfg: &ScheduleConfig, num_layers: usize, alpha: f64) -> Result<Self> {
        cfg.validate()?;
        let freeze_times = compute_freeze_times(num_layers, cfg.t0, cfg.spacing)?;
        let initial_lrs = freeze_times
            .iter()
            .map(|&t| initial_lr(alpha, t, cfg.lr_scaling))
            .collect::<Result<_>>()?;
        Ok(Self {
            freeze_times,
            initial_lrs,
            warmup: cfg.warmup_fraction,
            alpha,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.freeze_times.len()
    }

    /// Learning rate of layer `i` at normalized progress `t ∈ [0, 1]`.
    pub fn lr_at(&self, i: usize, t: f64) -> f64 {
        lr_curve(self.initial_lrs[i], self.freeze_times[i], self.warmup, t)
    }

    /// Rate for parameters outside the freezable stack: the base rate with
    /// the same warm-up, annealed over the whole run.
    pub fn global_lr(&self, t: f64) -> f64 {
        lr_curve(self.alpha, 1.0, self.warmup, t)
    }

    /// First 1-based step `s` of a `total`-step run with `t_i ≤ s/total`.
    pub fn freeze_step(&self, i: usize, total: usize) -> usize {
        let t = self.freeze_times[i];
        let mut s = ((t * total as f64).ceil() as usize).clamp(1, total);
        while s > 1 && reached(t, s - 1, total) {
            s -= 1;
        }
        while s < total && !reached(t, s, total) {
            s += 1;
        }
        s
    }

    /// Trapezoid quadrature of layer `i`'s curve over `[0, 1]`.
    pub fn lr_curve_integral(&self, i: usize, points: usize) -> f64 {
        let n = points.max(2) - 1;
        let h = 1.0 / n as f64;
        let mut acc = 0.5 * (self.lr_at(i, 0.0) + self.lr_at(i, 1.0));
        for k in 1..n {
            acc += self.lr_at(i, k as f64 * h);
        }
        acc * h
    }
}

/// Absolute slack on `t_i ≤ s/T`. Cubing a decimal `t0` lands a few ulps
/// off the exact product (0.8³ evaluates to 0.5120000000000001), which
/// would otherwise postpone a freeze that falls exactly on a step boundary.
pub const FREEZE_SLACK: f64 = 1e-12;

/// Whether freeze time `t` has been reached after step `step` of `total`.
pub fn reached(t: f64, step: usize, total: usize) -> bool {
    t <= step as f64 / total as f64 + FREEZE_SLACK
}

/// Reports each layer exactly once, when its freeze time is reached.
#[derive(Clone, Debug)]
pub struct FreezeTracker {
    next: usize,
    last_step: usize,
}

impl FreezeTracker {
    pub fn new() -> Self {
        Self { next: 0, last_step: 0 }
    }

    /// Layers newly frozen after completing step `step` of `total`. Steps
    /// must not go backwards.
    pub fn freeze_events(&mut self, sched: &LayerSchedule, step: usize, total: usize) -> Vec<usize> {
        debug_assert!(step >= self.last_step, "freeze_events called with decreasing step");
        self.last_step = step;
        let mut out = Vec::new();
        while self.next < sched.num_layers() && reached(sched.freeze_times[self.next], step, total) {
            out.push(self.next);
            self.next += 1;
        }
        out
    }
}

impl Default for FreezeTracker {
    fn default() -> Self {
        Self::new()
    }
}

pub const EXPORT_GRID_POINTS: usize = 1000;

/// CSV with one row per (layer, grid point); `step` is normalized progress.
pub fn export_schedule_csv(sched: &LayerSchedule, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "layer,t_freeze,alpha0,step,lr")?;
    for i in 0..sched.num_layers() {
        for k in 0..EXPORT_GRID_POINTS {
            let t = k as f64 / (EXPORT_GRID_POINTS - 1) as f64;
            writeln!(
                out,
                "{i},{},{},{},{}",
                sched.freeze_times[i],
                sched.initial_lrs[i],
                t,
                sched.lr_at(i, t)
            )?;
        }
    }
    Ok(())
}

/// Line plot of every layer's learning rate over normalized progress.
pub fn schedule_svg(sched: &LayerSchedule, title: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 480.0;
    const M: f64 = 56.0;
    let y_max = sched.initial_lrs.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let px = |t: f64| M + t * (W - 2.0 * M);
    let py = |lr: f64| H - M - lr / y_max * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} L{} {} M{M} {} L{M} {M}" stroke="black" fill="none"/>"#,
        H - M,
        W - M,
        H - M,
        H - M
    );
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{t:.1}</text>"#,
            px(t),
            H - M + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">training progress</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{M}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{y_max:.3e}</text>"#,
        M - 6.0
    );
    let n = sched.num_layers();
    for i in 0..n {
        let hue = 360.0 * i as f64 / n as f64;
        let mut pts = String::new();
        for k in 0..EXPORT_GRID_POINTS {
            let t = k as f64 / (EXPORT_GRID_POINTS - 1) as f64;
            let _ = write!(pts, "{:.2},{:.2} ", px(t), py(sched.lr_at(i, t)));
        }
        let _ = writeln!(
            s,
            r#"<polyline data-layer="{i}" points="{}" fill="none" stroke="hsl({hue:.0},70%,45%)" stroke-width="1.5"/>"#,
            pts.trim_end()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vitb(warmup: f64) -> LayerSchedule {
        let cfg = ScheduleConfig {
            warmup_fraction: warmup,
            ..ScheduleConfig::default()
        };
        LayerSchedule::new(&cfg, 13, 1.0).unwrap()
    }

    #[test]
    fn cubed_first_freeze_times() {
        let t = compute_freeze_times(13, 0.5, Spacing::Cubic).unwrap();
        assert!((t[0] - 0.125).abs() < 1e-15);
        let t = compute_freeze_times(13, 0.8, Spacing::Cubic).unwrap();
        assert!((t[0] - 0.512).abs() < 1e-15);
        assert_eq!(*t.last().unwrap(), 1.0);
        let t = compute_freeze_times(13, 0.8, Spacing::Linear).unwrap();
        assert_eq!(*t.last().unwrap(), 1.0);
    }

    #[test]
    fn bad_t0_is_rejected() {
        assert!(matches!(compute_freeze_times(13, 0.0, Spacing::Cubic), Err(Error::Config { .. })));
        assert!(matches!(compute_freeze_times(13, 1.5, Spacing::Linear), Err(Error::Config { .. })));
    }

    #[test]
    fn initial_lr_cases() {
        assert_eq!(initial_lr(1.0, 1.0, LrScaling::Scaled).unwrap(), 1.0);
        assert_eq!(initial_lr(1.0, 0.512, LrScaling::Scaled).unwrap(), 1.953125);
        assert_eq!(initial_lr(3.0, 0.3, LrScaling::Unscaled).unwrap(), 3.0);
        assert!(matches!(initial_lr(1.0, 0.0, LrScaling::Scaled), Err(Error::Contract(_))));
    }

    #[test]
    fn lr_curve_points() {
        assert_eq!(lr_curve(2.0, 0.6, 0.0, 0.6), 0.0);
        assert!((lr_curve(2.0, 0.6, 0.0, 0.3) - 1.0).abs() < 1e-15);
        assert!((lr_curve(2.0, 0.6, 0.1, 0.05) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vitb_freeze_event_at_052() {
        let s = vitb(0.1);
        assert!((s.freeze_times[1] - (0.8f64 + 0.2 / 12.0).powi(3)).abs() < 1e-15);
        let mut tr = FreezeTracker::new();
        assert!(tr.freeze_events(&s, 50, 100).is_empty());
        assert_eq!(tr.freeze_events(&s, 52, 100), vec![0]);
        let rest = tr.freeze_events(&s, 100, 100);
        assert_eq!(rest, (1..13).collect::<Vec<_>>());
        assert!(tr.freeze_events(&s, 100, 100).is_empty());
    }

    #[test]
    fn freeze_step_matches_tracker() {
        let s = vitb(0.1);
        for total in [7, 100, 500, 1234] {
            let mut tr = FreezeTracker::new();
            let mut seen = [0; 13];
            for step in 1..=total {
                for i in tr.freeze_events(&s, step, total) {
                    seen[i] = step;
                }
            }
            for (i, &at) in seen.iter().enumerate() {
                assert_eq!(at, s.freeze_step(i, total), "layer {i} total {total}");
            }
        }
    }

    #[test]
    fn warmup_must_precede_first_freeze() {
        let cfg = ScheduleConfig {
            t0: 0.5,
            warmup_fraction: 0.2,
            ..ScheduleConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "schedule.warmup_fraction"));
    }

    #[test]
    fn csv_has_one_row_per_layer_and_grid_point() {
        let s = vitb(0.1);
        let mut buf = Vec::new();
        export_schedule_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 13 * EXPORT_GRID_POINTS + 1);
        assert!(text.starts_with("layer,t_freeze,alpha0,step,lr\n"));
    }

    #[test]
    fn svg_has_a_polyline_per_layer() {
        let svg = schedule_svg(&vitb(0.0), "cubic <t0=0.8>");
        assert_eq!(svg.matches("<polyline").count(), 13);
        assert!(svg.contains("&lt;t0=0.8&gt;"));
    }
}
