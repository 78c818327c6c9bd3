use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::schedule::{export_schedule_csv, schedule_svg, LayerSchedule};
use crate::trainer::TrainReport;

pub const SCHEDULE_CSV: &str = "schedule.csv";
pub const SCHEDULE_SVG: &str = "schedule.svg";
pub const TRACE_CSV: &str = "trace.csv";
pub const EVENTS_LOG: &str = "events.log";
pub const REPORT_JSON: &str = "report.json";

/// Writes the schedule CSV and SVG; returns their paths.
pub fn emit_schedule(sched: &LayerSchedule, title: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let csv = dir.join(SCHEDULE_CSV);
    let mut w = BufWriter::new(File::create(&csv)?);
    export_schedule_csv(sched, &mut w)?;
    w.flush()?;
    let svg = dir.join(SCHEDULE_SVG);
    fs::write(&svg, schedule_svg(sched, title))?;
    Ok(vec![csv, svg])
}

pub fn trace_csv(report: &TrainReport) -> String {
    let mut s = String::from("step,loss,iter_ms,frozen_prefix,alive_heads\n");
    for r in &report.trace {
        let ms = r.iter_ms.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.loss, ms, r.frozen_prefix, r.alive_heads);
    }
    s
}

pub fn events_log(report: &TrainReport) -> String {
    let mut lines: Vec<(usize, String)> = Vec::new();
    for e in &report.freeze_events {
        lines.push((e.step, format!("step {}: freeze layer {}", e.step, e.layer)));
    }
    for e in &report.prune_events {
        lines.push((e.step, format!("step {}: prune head {} (tap {})", e.step, e.head, e.tap)));
    }
    // stable: freezes stay ahead of the prunes they trigger
    lines.sort_by_key(|(s, _)| *s);
    let mut s: String = lines.into_iter().map(|(_, l)| l + "\n").collect();
    if let Some(a) = &report.abort {
        let _ = writeln!(
            s,
            "step {}: abort, non-finite loss; terms {:?}; head lr {}; layer lrs {:?}",
            a.step, a.loss_terms, a.head_lr, a.layer_lrs
        );
    }
    s
}

/// Writes the schedule artifacts, trace CSV, events log and JSON report.
pub fn emit_reports(report: &TrainReport, title: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = emit_schedule(&report.schedule, title, dir)?;
    let trace = dir.join(TRACE_CSV);
    fs::write(&trace, trace_csv(report))?;
    let events = dir.join(EVENTS_LOG);
    fs::write(&events, events_log(report))?;
    let json = dir.join(REPORT_JSON);
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n")?;
    out.extend([trace, events, json]);
    Ok(out)
}
