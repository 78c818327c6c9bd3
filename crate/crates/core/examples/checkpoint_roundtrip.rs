//! Trains briefly, saves a checkpoint and reloads it into a fresh model.

use vitfreeze::io::{parse_config_str, synth_dataset};
use vitfreeze::model::MimModel;
use vitfreeze::trainer::train_with_model;

fn main() -> anyhow::Result<()> {
    let cfg = parse_config_str(r#"{"trainer":{"steps":12,"batch_size":4},"data":{"count":16}}"#, None)?;
    let data = synth_dataset(0, cfg.data.count, cfg.model.image_size, cfg.model.channels)?;
    let (_, model) = train_with_model(&cfg, &data, 0)?;
    let path = std::env::temp_dir().join("vitfreeze-example.ckpt");
    model.save_checkpoint(&path)?;
    let back = MimModel::load_checkpoint(cfg.model.clone(), &path)?;
    let worst = model
        .params()
        .iter()
        .zip(back.params().iter())
        .map(|((_, a), (_, b))| a.value.max_abs_diff(&b.value))
        .fold(0.0, f64::max);
    println!(
        "{} tensors, {} values, {} bytes on disk",
        model.params().len(),
        model.params().total_elements(),
        std::fs::metadata(&path)?.len()
    );
    println!("frozen prefix {} -> {}", model.frozen_prefix(), back.frozen_prefix());
    println!("alive heads {:?} -> {:?}", model.alive_heads(), back.alive_heads());
    println!("largest f32 rounding error {worst:.2e}");
    Ok(())
}
