use vitfreeze::io::{parse_config_str, synth_dataset, RunConfig};
use vitfreeze::model::{ParamGroup, ParamStore};
use vitfreeze::trainer::{
    predict_speedup, train, AdamWConfig, FlopProfile, OptimizerState, TraceRow, TrainReport,
};
use vitfreeze::{Error, Tensor};

const STEPS: usize = 20;

fn short_run(extra: &str) -> RunConfig {
    let base = format!(r#"{{"trainer":{{"steps":{STEPS},"batch_size":4,"timing":false{extra}}},"data":{{"count":16}}}}"#);
    parse_config_str(&base, None).unwrap()
}

fn data(cfg: &RunConfig) -> Vec<Tensor> {
    synth_dataset(cfg.trainer.seed, cfg.data.count, cfg.model.image_size, cfg.model.channels).unwrap()
}

fn json(r: &TrainReport) -> String {
    serde_json::to_string(r).unwrap()
}

#[test]
fn default_schedule_freezes_on_exact_steps() {
    let cfg = short_run("");
    let report = train(&cfg, &data(&cfg), 0).unwrap();
    assert_eq!(report.steps_run, STEPS);
    // Linear times (16 + i)/20, cubed: first step with (16 + i)³ ≤ 400·s.
    let want: Vec<usize> = (0..5u64).map(|i| ((16 + i).pow(3) as usize).div_ceil(400)).collect();
    let got: Vec<usize> = report.freeze_events.iter().map(|e| e.step).collect();
    assert_eq!(got, want);
    assert_eq!(report.freeze_events.iter().map(|e| e.layer).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
    // Heads tap blocks 1..=4, i.e. layers 1..=4: each dies with its tap.
    for p in &report.prune_events {
        assert_eq!(p.step, want[p.tap], "head {}", p.head);
    }
    assert_eq!(report.prune_events.len(), 4);
    assert_eq!(report.schedule.alpha, cfg.schedule.base_lr * 4.0 / 256.0);
}

#[test]
fn trace_rows_follow_the_freeze_state() {
    let cfg = short_run("");
    let report = train(&cfg, &data(&cfg), 1).unwrap();
    let rows: &[TraceRow] = &report.trace;
    for w in rows.windows(2) {
        assert!(w[1].frozen_prefix >= w[0].frozen_prefix);
        assert!(w[1].predicted_work <= w[0].predicted_work);
        if w[1].frozen_prefix > w[0].frozen_prefix {
            assert!(w[1].tape_len < w[0].tape_len, "step {}", w[1].step);
            assert!(w[1].predicted_work < w[0].predicted_work);
        }
    }
    assert!(rows.iter().all(|r| r.iter_ms.is_none() && r.loss.is_finite()));
    for d in &report.frozen_digests {
        assert_eq!(d.at_freeze, d.at_end, "layer {} changed after freezing", d.layer);
    }
    let mean: f64 = rows.iter().map(|r| r.predicted_work).sum::<f64>() / STEPS as f64;
    assert!((mean - report.predicted_work_ratio).abs() < 1e-12);
}

#[test]
fn never_freezing_costs_full_work() {
    let cfg = short_run("");
    let mut cfg = cfg;
    cfg.schedule.t0 = 1.0;
    let report = train(&cfg, &data(&cfg), 0).unwrap();
    assert!(report.freeze_events.iter().all(|e| e.step == STEPS));
    assert!(report.prune_events.iter().all(|e| e.step == STEPS));
    assert_eq!(report.freeze_events.len(), 5);
    assert!(report.trace.iter().all(|r| r.frozen_prefix == 0 && r.alive_heads == 4));
    assert!((report.predicted_work_ratio - 1.0).abs() < 1e-12);
}

#[test]
fn predicted_ratio_matches_the_cost_model() {
    let cfg = short_run("");
    let report = train(&cfg, &data(&cfg), 0).unwrap();
    let profile = FlopProfile::from_config(&cfg.model, 4, 2.0);
    let predicted = predict_speedup(&profile, &report.schedule, STEPS);
    assert!((predicted - report.predicted_work_ratio).abs() < 1e-12);
    assert!(predicted < 1.0);
}

#[test]
fn runs_are_deterministic_with_and_without_workers() {
    let inline = short_run("");
    let threaded = short_run(r#","threads":2"#);
    let d = data(&inline);
    let a = json(&train(&inline, &d, 5).unwrap());
    assert_eq!(a, json(&train(&inline, &d, 5).unwrap()));
    assert_eq!(a, json(&train(&threaded, &d, 5).unwrap()));
    assert_ne!(a, json(&train(&inline, &d, 6).unwrap()));
}

#[test]
fn non_finite_data_aborts_with_a_diagnostic() {
    let cfg = short_run("");
    let mut d = data(&cfg);
    for img in &mut d {
        img.data_mut()[0] = f64::NAN;
    }
    let report = train(&cfg, &d, 0).unwrap();
    let abort = report.abort.as_ref().expect("run should abort");
    assert_eq!(abort.step, 1);
    assert_eq!(report.steps_run, 0);
    assert!(report.trace.is_empty());
    assert_eq!(abort.layer_lrs.len(), 5);
    assert_eq!(abort.loss_terms.len(), 4);
    assert!(abort.loss_terms.iter().any(|(_, v)| !v.is_finite()));
}

#[test]
fn bad_datasets_are_rejected() {
    let cfg = short_run("");
    assert!(matches!(train(&cfg, &[], 0), Err(Error::Contract(_))));
    let wrong = vec![Tensor::zeros([3, 32, 32])];
    assert!(matches!(train(&cfg, &wrong, 0), Err(Error::Dimension(_))));
}

#[test]
fn measured_ratio_uses_phase_medians() {
    let cfg = short_run("");
    let report = train(&cfg, &data(&cfg), 0).unwrap();
    let mut frozen = report.clone();
    let mut baseline = report.clone();
    for r in &mut baseline.trace {
        r.iter_ms = Some(10.0);
        r.frozen_prefix = 0;
        r.alive_heads = 4;
    }
    // Every phase runs at a speed proportional to its predicted work, with
    // one wild outlier per phase that the median must ignore.
    let mut seen = std::collections::HashSet::new();
    for r in &mut frozen.trace {
        let outlier = seen.insert((r.frozen_prefix, r.alive_heads));
        r.iter_ms = Some(if outlier { 1e6 } else { 10.0 * r.predicted_work });
    }
    // Give single-step phases a real sample.
    let mut counts = std::collections::HashMap::new();
    for r in &frozen.trace {
        *counts.entry((r.frozen_prefix, r.alive_heads)).or_insert(0) += 1;
    }
    for r in &mut frozen.trace {
        if counts[&(r.frozen_prefix, r.alive_heads)] < 3 {
            r.iter_ms = Some(10.0 * r.predicted_work);
        }
    }
    let ratio = frozen.measured_ratio_against(&baseline).unwrap();
    assert!((ratio - report.predicted_work_ratio).abs() < 1e-9, "{ratio} vs {}", report.predicted_work_ratio);
    assert!(frozen.measured_ratio_against(&report).is_none());
}

#[test]
fn discarded_optimizer_state_stays_discarded() {
    let mut store = ParamStore::default();
    let a = store.add("a", Tensor::ones([2, 2]), ParamGroup::Layer(0));
    let b = store.add("b", Tensor::ones([2]), ParamGroup::Layer(1));
    let mut opt = OptimizerState::new(AdamWConfig::default(), store.len());
    let grads = vec![(a, Tensor::ones([2, 2])), (b, Tensor::ones([2]))];
    opt.adamw_step(&mut store, &grads, |_| 1e-2).unwrap();
    assert!(opt.has_moments(a) && opt.has_moments(b));
    assert_eq!(opt.state_elements(), 12);
    opt.discard(&[a]);
    assert!(!opt.has_moments(a));
    assert_eq!(opt.state_elements(), 4);
    let before = store.get(a).value.to_bits();
    opt.adamw_step(&mut store, &grads[1..], |_| 1e-2).unwrap();
    assert_eq!(store.get(a).value.to_bits(), before);
    assert!(matches!(opt.adamw_step(&mut store, &grads, |_| 1e-2), Err(Error::Contract(_))));
}
