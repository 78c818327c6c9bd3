//! A short toy training run that prints freeze and prune events as they
//! land in the report, plus the loss curve at a few checkpoints.
//!
//!     cargo run --release --example train_toy

use vitfreeze::io::{events_log, parse_config_str, synth_dataset};
use vitfreeze::trainer::train;

fn main() -> anyhow::Result<()> {
    let cfg = parse_config_str(r#"{"trainer":{"steps":60,"batch_size":8},"data":{"count":64}}"#, None)?;
    let data = synth_dataset(cfg.trainer.seed, cfg.data.count, cfg.model.image_size, cfg.model.channels)?;
    let report = train(&cfg, &data, cfg.trainer.seed)?;
    for row in report.trace.iter().filter(|r| r.step == 1 || r.step % 10 == 0) {
        println!(
            "step {:3}  loss {:8.4}  frozen {}  heads {}  tape {:4}  work {:.3}",
            row.step, row.loss, row.frozen_prefix, row.alive_heads, row.tape_len, row.predicted_work
        );
    }
    print!("{}", events_log(&report));
    println!("predicted work ratio {:.4}", report.predicted_work_ratio);
    Ok(())
}
