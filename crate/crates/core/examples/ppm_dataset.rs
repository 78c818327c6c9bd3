//! Writes synthetic images as binary PPM files, then trains a few steps
//! from that directory.

use vitfreeze::io::{load_dataset, parse_config_str, synth_dataset, write_ppm};
use vitfreeze::trainer::train;

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("vitfreeze-ppm-example");
    std::fs::create_dir_all(&dir)?;
    for (i, img) in synth_dataset(1, 8, 64, 3)?.iter().enumerate() {
        write_ppm(&dir.join(format!("img{i:03}.ppm")), img)?;
    }
    let text = format!(
        r#"{{"trainer":{{"steps":5,"batch_size":4}},"data":{{"source":"directory","path":{}}}}}"#,
        serde_json::to_string(&dir)?
    );
    let cfg = parse_config_str(&text, None)?;
    let data = load_dataset(&cfg, 0)?;
    println!("loaded {} images of shape {:?} from {}", data.len(), data[0].shape(), dir.display());
    let report = train(&cfg, &data, 0)?;
    println!("losses {:?}", report.losses().iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>());
    Ok(())
}
