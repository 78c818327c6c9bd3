use std::sync::mpsc::{sync_channel, Receiver};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cost::{predict_speedup, CostMeter, FlopProfile};
use super::optim::OptimizerState;
use super::report::{
    AbortDiagnostic, FreezeEvent, LayerDigest, PruneEvent, TraceRow, TrainReport,
};
use crate::error::{Error, Result};
use crate::io::RunConfig;
use crate::model::{Batch, MimModel, ModelConfig, ParamGroup, ParamId, StepGraph};
use crate::objective::{build_targets_for, sample_mask};
use crate::schedule::{FreezeTracker, LayerSchedule};
use crate::tensor::Tensor;

/// Ready batches each background worker may hold.
const QUEUE_DEPTH: usize = 2;

/// Hooks into the training loop, mainly for tests that need to inspect
/// the model mid-run. All methods default to no-ops.
pub trait TrainObserver {
    /// After backward, before the optimizer touches anything.
    fn after_backward(
        &mut self,
        _step: usize,
        _model: &MimModel,
        _batch: &Batch,
        _graph: &StepGraph<'_>,
        _grads: &[(ParamId, Tensor)],
    ) {
    }

    /// After the optimizer update, before this step's freeze and prune events.
    fn after_update(&mut self, _step: usize, _model: &MimModel, _batch: &Batch) {}

    /// After this step's freeze and prune events.
    fn after_events(&mut self, _step: usize, _model: &MimModel, _batch: &Batch) {}
}

impl TrainObserver for () {}

/// Samples step `step`'s batch. The result depends only on the arguments,
/// so inline and background preparation agree. Targets are built only for
/// heads flagged in `wanted`.
pub fn prepare_batch(
    dataset: &[Tensor],
    cfg: &ModelConfig,
    batch_size: usize,
    seed: u64,
    step: usize,
    wanted: &[bool],
) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let mut batch = Batch {
        images: Vec::with_capacity(batch_size),
        masks: Vec::with_capacity(batch_size),
        targets: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let image = dataset[rng.gen_range(0..dataset.len())].clone();
        batch.masks.push(sample_mask(rng.gen(), cfg.num_patches(), cfg.mask_ratio)?);
        batch
            .targets
            .push(build_targets_for(&image, &cfg.supervision_scales, wanted, &cfg.hog)?);
        batch.images.push(image);
    }
    Ok(batch)
}

/// FNV-1a over the bit patterns of one layer's parameters.
pub fn layer_digest(model: &MimModel, layer: usize) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in model.params().ids_in(ParamGroup::Layer(layer)) {
        for byte in model.params().get(id).value.to_bits().iter().flat_map(|b| b.to_le_bytes()) {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

enum Source<'a> {
    Inline {
        dataset: &'a [Tensor],
    },
    Workers {
        queues: Vec<Receiver<Result<Batch>>>,
    },
}

impl Source<'_> {
    fn next(&mut self, cfg: &RunConfig, seed: u64, step: usize, wanted: &[bool]) -> Result<Batch> {
        match self {
            Source::Inline { dataset } => {
                prepare_batch(dataset, &cfg.model, cfg.trainer.batch_size, seed, step, wanted)
            }
            Source::Workers { queues } => {
                let q = &queues[(step - 1) % queues.len()];
                q.recv()
                    .map_err(|_| Error::contract(format!("batch worker for step {step} exited")))?
            }
        }
    }
}

/// Runs the full freeze schedule.
pub fn train(cfg: &RunConfig, dataset: &[Tensor], seed: u64) -> Result<TrainReport> {
    Ok(train_observed(cfg, dataset, seed, &mut ())?.0)
}

/// Like [`train`], also returning the final model.
pub fn train_with_model(cfg: &RunConfig, dataset: &[Tensor], seed: u64) -> Result<(TrainReport, MimModel)> {
    train_observed(cfg, dataset, seed, &mut ())
}

pub fn train_observed(
    cfg: &RunConfig,
    dataset: &[Tensor],
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainReport, MimModel)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    let expected = [cfg.model.channels, cfg.model.image_size, cfg.model.image_size];
    if let Some(bad) = dataset.iter().find(|t| t.shape() != expected) {
        return Err(Error::dim(format!(
            "dataset image {:?} does not match model input {expected:?}",
            bad.shape()
        )));
    }
    let threads = cfg.trainer.threads;
    let total = cfg.trainer.steps;
    std::thread::scope(|scope| {
        let mut source = if threads == 0 {
            Source::Inline { dataset }
        } else {
            let all = vec![true; cfg.model.tap_layers.len()];
            let queues = (0..threads)
                .map(|j| {
                    let (tx, rx) = sync_channel(QUEUE_DEPTH);
                    let all = all.clone();
                    scope.spawn(move || {
                        for step in (1 + j..=total).step_by(threads) {
                            let b = prepare_batch(
                                dataset,
                                &cfg.model,
                                cfg.trainer.batch_size,
                                seed,
                                step,
                                &all,
                            );
                            if tx.send(b).is_err() {
                                break;
                            }
                        }
                    });
                    rx
                })
                .collect();
            Source::Workers { queues }
        };
        run(cfg, seed, &mut source, observer)
    })
}

fn run(
    cfg: &RunConfig,
    seed: u64,
    source: &mut Source<'_>,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainReport, MimModel)> {
    let tc = &cfg.trainer;
    let total = tc.steps;
    let mut model = MimModel::new(cfg.model.clone(), seed)?;
    let alpha = tc.effective_lr(cfg.schedule.base_lr);
    let sched = LayerSchedule::new(&cfg.schedule, model.num_layers(), alpha)?;
    let profile = FlopProfile::from_config(&cfg.model, tc.batch_size, tc.backward_factor);
    let full_work = profile.full_work();
    let mut meter = CostMeter::new(profile.clone(), 256, tc.warmup_discard);
    let mut opt = OptimizerState::new(tc.optimizer.clone(), model.params().len());
    let groups: Vec<ParamGroup> = model.params().iter().map(|(_, p)| p.group).collect();
    let mut tracker = FreezeTracker::new();
    let mut report = TrainReport {
        seed,
        total_steps: total,
        steps_run: 0,
        schedule: sched.clone(),
        trace: Vec::with_capacity(total),
        freeze_events: Vec::new(),
        prune_events: Vec::new(),
        predicted_work_ratio: predict_speedup(&profile, &sched, total),
        measured_time_ratio: None,
        frozen_digests: Vec::new(),
        abort: None,
    };
    let mut executed_work = 0.0;

    for step in 1..=total {
        let alive = model.alive_heads();
        if alive.is_empty() {
            break;
        }
        let t = (step - 1) as f64 / total as f64;
        let wanted: Vec<bool> = model.heads().iter().map(|h| !h.pruned).collect();
        let batch = source.next(cfg, seed, step, &wanted)?;
        let prefix = model.frozen_prefix();

        let start = Instant::now();
        let sg = model.forward_loss(&batch, None)?;
        let loss = sg.graph.value(sg.loss.total).item()?;
        if !loss.is_finite() {
            report.abort = Some(AbortDiagnostic {
                step,
                layer_lrs: (0..sched.num_layers()).map(|i| sched.lr_at(i, t)).collect(),
                head_lr: sched.global_lr(t),
                loss_terms: sg
                    .loss
                    .terms
                    .iter()
                    .map(|&(k, n)| (k, sg.graph.value(n).data()[0]))
                    .collect(),
            });
            break;
        }
        let mut grads = sg.graph.backward(sg.loss.total)?;
        let tape_len = sg.graph.tape_len();
        let (param_grads, stray) = sg.binder.collect(&mut grads);
        if let Some(id) = stray.first() {
            return Err(Error::contract(format!(
                "step {step}: gradient reached non-trainable parameter `{}`",
                model.params().get(*id).name
            )));
        }
        if let Some((id, _)) = param_grads.iter().find(|(id, _)| !model.is_param_trainable(*id, prefix)) {
            return Err(Error::contract(format!(
                "step {step}: gradient map contains frozen parameter `{}`",
                model.params().get(*id).name
            )));
        }
        observer.after_backward(step, &model, &batch, &sg, &param_grads);
        drop(sg);

        opt.adamw_step(model.params_mut(), &param_grads, |id: ParamId| match groups[id.index()] {
            ParamGroup::Layer(i) => sched.lr_at(i, t),
            ParamGroup::Head(_) => sched.global_lr(t),
        })?;
        let elapsed = start.elapsed();
        observer.after_update(step, &model, &batch);

        for layer in tracker.freeze_events(&sched, step, total) {
            let ids = model.freeze_layer(layer, step)?;
            opt.discard(&ids);
            report.freeze_events.push(FreezeEvent { layer, step });
            report.frozen_digests.push(LayerDigest {
                layer,
                at_freeze: layer_digest(&model, layer),
                at_end: String::new(),
            });
        }
        for k in alive.iter().copied() {
            if model.prune_decoder_if_dead(k, step) {
                report.prune_events.push(PruneEvent {
                    head: k,
                    tap: model.heads()[k].tap,
                    step,
                });
            }
        }
        observer.after_events(step, &model, &batch);

        let alive_mask: Vec<bool> = (0..model.heads().len()).map(|k| alive.contains(&k)).collect();
        let work = meter.record_work(prefix, &alive_mask);
        executed_work += work;
        let iter_ms = if tc.timing { meter.measure_iteration(elapsed) } else { None };
        report.trace.push(TraceRow {
            step,
            loss,
            iter_ms,
            frozen_prefix: prefix,
            alive_heads: alive.len(),
            tape_len,
            predicted_work: work / full_work,
        });
        report.steps_run = step;
    }

    for d in &mut report.frozen_digests {
        d.at_end = layer_digest(&model, d.layer);
    }
    // Steps skipped once every head is pruned cost nothing.
    report.predicted_work_ratio = executed_work / (total as f64 * full_work);
    Ok((report, model))
}
