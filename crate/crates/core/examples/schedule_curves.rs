//! Prints per-layer freeze times and learning rates for both presets and
//! writes the curves as CSV and SVG.
//!
//!     cargo run --example schedule_curves -- [out-dir]

use std::path::PathBuf;

use vitfreeze::io::emit_schedule;
use vitfreeze::model::ModelConfig;
use vitfreeze::schedule::{LayerSchedule, ScheduleConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("vitfreeze-schedule"));
    let cfg = ScheduleConfig::default();
    for (name, model) in [("vit-toy", ModelConfig::vit_toy()), ("vit-b", ModelConfig::vit_b())] {
        let sched = LayerSchedule::new(&cfg, model.num_layers(), cfg.base_lr)?;
        println!("{name}: {} layers, t0 = {}", sched.num_layers(), cfg.t0);
        for i in 0..sched.num_layers() {
            println!(
                "  layer {i:2}  t_freeze {:.4}  alpha0 {:.3e}  area {:.3e}",
                sched.freeze_times[i],
                sched.initial_lrs[i],
                sched.lr_curve_integral(i, 10_001)
            );
        }
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        for p in emit_schedule(&sched, &format!("{name} freeze schedule"), &dir)? {
            println!("  wrote {}", p.display());
        }
    }
    Ok(())
}
