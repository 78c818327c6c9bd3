//! Sweeps the first freeze fraction and reports the predicted reduction in
//! training work for the toy model and ViT-B.

use vitfreeze::model::ModelConfig;
use vitfreeze::schedule::{LayerSchedule, ScheduleConfig, Spacing};
use vitfreeze::trainer::{predict_speedup, FlopProfile};

fn main() -> anyhow::Result<()> {
    let steps = 1000;
    for (name, model) in [("vit-toy", ModelConfig::vit_toy()), ("vit-b", ModelConfig::vit_b())] {
        let profile = FlopProfile::from_config(&model, 32, 2.0);
        println!("{name}");
        println!("  t0     cubic   linear");
        for t0 in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
            let mut row = format!("  {t0:.1}");
            for spacing in [Spacing::Cubic, Spacing::Linear] {
                let cfg = ScheduleConfig {
                    t0,
                    spacing,
                    warmup_fraction: 0.0,
                    ..ScheduleConfig::default()
                };
                let sched = LayerSchedule::new(&cfg, model.num_layers(), cfg.base_lr)?;
                let ratio = predict_speedup(&profile, &sched, steps);
                row += &format!("  {:5.1}%", 100.0 * (1.0 - ratio));
            }
            println!("{row}");
        }
    }
    Ok(())
}
