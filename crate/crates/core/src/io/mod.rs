//! Run configuration, datasets and report files.

mod config;
mod ppm;
mod reports;
mod synth;

pub use config::{
    ensure_writable, parse_config, parse_config_str, resolved_json, write_resolved_config, DataConfig,
    DataSource, RunConfig, RESOLVED_CONFIG,
};
pub use ppm::{decode_ppm, encode_ppm, load_images, quantize, read_ppm, write_ppm};
pub use reports::{
    emit_reports, emit_schedule, events_log, trace_csv, EVENTS_LOG, REPORT_JSON, SCHEDULE_CSV,
    SCHEDULE_SVG, TRACE_CSV,
};
pub use synth::{synth_dataset, synth_image};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Materializes the configured dataset.
pub fn load_dataset(cfg: &RunConfig, seed: u64) -> Result<Vec<Tensor>> {
    let m = &cfg.model;
    match cfg.data.source {
        DataSource::Synthetic => synth_dataset(seed, cfg.data.count, m.image_size, m.channels),
        DataSource::Directory => {
            let dir = cfg
                .data
                .path
                .as_deref()
                .ok_or_else(|| Error::config("data.path", "required for directory source"))?;
            let images = load_images(dir)?;
            let want = [m.channels, m.image_size, m.image_size];
            if images[0].shape() != want {
                return Err(Error::config(
                    "data.path",
                    format!("images are {:?}, model expects {want:?}", images[0].shape()),
                ));
            }
            Ok(images)
        }
    }
}
