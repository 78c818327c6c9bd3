use serde::Serialize;

use super::cost::median;
use crate::schedule::LayerSchedule;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FreezeEvent {
    pub layer: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneEvent {
    pub head: usize,
    pub tap: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    /// Wall time; `None` when timing is disabled or during cache warm-up.
    pub iter_ms: Option<f64>,
    pub frozen_prefix: usize,
    pub alive_heads: usize,
    /// Recorded ops the backward pass visited.
    pub tape_len: usize,
    pub predicted_work: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDigest {
    pub layer: usize,
    pub at_freeze: String,
    pub at_end: String,
}

/// State dumped when a step produced a non-finite loss.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbortDiagnostic {
    pub step: usize,
    pub layer_lrs: Vec<f64>,
    pub head_lr: f64,
    /// `(head, value)` per alive head.
    pub loss_terms: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub total_steps: usize,
    pub steps_run: usize,
    pub schedule: LayerSchedule,
    pub trace: Vec<TraceRow>,
    pub freeze_events: Vec<FreezeEvent>,
    pub prune_events: Vec<PruneEvent>,
    /// Executed work over `total_steps` never-freezing iterations.
    pub predicted_work_ratio: f64,
    /// Set by [`TrainReport::compare_with_baseline`].
    pub measured_time_ratio: Option<f64>,
    pub frozen_digests: Vec<LayerDigest>,
    pub abort: Option<AbortDiagnostic>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.loss).collect()
    }

    pub fn timed(&self) -> impl Iterator<Item = &TraceRow> {
        self.trace.iter().filter(|r| r.iter_ms.is_some())
    }

    /// Wall-clock work ratio against a never-freezing run of the same
    /// length: each freeze phase contributes its length times its median
    /// iteration time, divided by the baseline median times the step count.
    pub fn measured_ratio_against(&self, baseline: &TrainReport) -> Option<f64> {
        let base = median(baseline.timed().filter_map(|r| r.iter_ms).collect())?;
        let mut phases: Vec<((usize, usize), Vec<f64>, usize)> = Vec::new();
        for row in &self.trace {
            let key = (row.frozen_prefix, row.alive_heads);
            match phases.last_mut() {
                Some((k, _, len)) if *k == key => *len += 1,
                _ => phases.push((key, Vec::new(), 1)),
            }
            if let Some(ms) = row.iter_ms {
                phases.last_mut().unwrap().1.push(ms);
            }
        }
        let mut total = 0.0;
        let mut steps = 0usize;
        for (_, samples, len) in phases {
            total += len as f64 * median(samples)?;
            steps += len;
        }
        Some(total / (steps as f64 * base))
    }

    pub fn compare_with_baseline(&mut self, baseline: &TrainReport) {
        self.measured_time_ratio = self.measured_ratio_against(baseline);
    }
}
