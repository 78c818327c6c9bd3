//! Builds multi-scale HOG targets for a synthetic image and summarizes the
//! dominant orientation at every supervision scale.

use vitfreeze::io::synth_image;
use vitfreeze::model::ModelConfig;
use vitfreeze::objective::build_targets;

fn main() -> anyhow::Result<()> {
    let cfg = ModelConfig::vit_toy();
    let image = synth_image(7, 0, cfg.image_size, cfg.channels);
    let targets = build_targets(&image, &cfg.supervision_scales, &cfg.hog)?;
    let bins = cfg.hog.bins;
    for (s, map) in targets.scales.iter().zip(&targets.maps) {
        let map = map.as_ref().expect("all scales requested");
        let mut totals = vec![0.0; bins];
        for row in map.data().chunks(bins) {
            for (t, v) in totals.iter_mut().zip(row) {
                *t += v;
            }
        }
        let (best, _) = totals
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let bars: String = totals
            .iter()
            .map(|v| {
                let level = (v / totals[best] * 7.0).round() as u32;
                char::from_u32(0x2581 + level).unwrap_or(' ')
            })
            .collect();
        println!(
            "scale {s:2}×{s:<2}  {} cells  {bars}  dominant {:.0}°",
            map.shape()[0],
            best as f64 * 180.0 / bins as f64
        );
    }
    Ok(())
}
