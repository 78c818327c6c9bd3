//! Draws a random patch mask and its weights at coarser and finer scales.

use vitfreeze::objective::sample_mask;

fn show(weights: &[f64], side: usize) {
    for row in weights.chunks(side) {
        let line: String = row
            .iter()
            .map(|&w| {
                if w == 0.0 {
                    '.'
                } else if w == 1.0 {
                    '#'
                } else {
                    '+'
                }
            })
            .collect();
        println!("    {line}");
    }
}

fn main() -> anyhow::Result<()> {
    let mask = sample_mask(3, 64, 0.75)?;
    println!("masked {} of {} patches", mask.masked_indices.len(), mask.num_patches);
    for s in [16, 8, 4] {
        let w = mask.scale_weights(s)?;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        println!("  scale {s} (mean weight {mean:.3}):");
        show(&w, s);
    }
    Ok(())
}
