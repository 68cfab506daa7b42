//! SVG rendering of selection traces.

use std::fmt::Write;
use std::path::Path;

use super::experiment::{read_json, TraceRecord};
use super::EvalError;
use crate::data::SeriesFrame;

const WIDTH: f64 = 960.0;
const PANEL: f64 = 220.0;
const MARGIN: f64 = 30.0;

fn check(r: &TraceRecord, i: usize) -> Result<(), EvalError> {
    let fail = |what: &str| Err(EvalError::Trace(format!("record {i}: {what}")));
    if r.context.is_empty() {
        return fail("empty context");
    }
    if r.patch_size == 0 {
        return fail("patch_size is zero");
    }
    if r.selected_starts.is_empty() || r.selected_starts.len() != r.reassembly_order.len() {
        return fail("selected_starts and reassembly_order must be non-empty and of equal length");
    }
    let mut seen = vec![false; r.reassembly_order.len()];
    for &j in &r.reassembly_order {
        if j >= seen.len() || std::mem::replace(&mut seen[j], true) {
            return fail("reassembly_order is not a permutation");
        }
    }
    if r.forecast.len() != r.target.len() {
        return fail("forecast and target lengths differ");
    }
    Ok(())
}

/// Replaces context and target with the values of `source` at the record's
/// window, which must lie inside the series.
pub fn attach_source(record: &mut TraceRecord, source: &SeriesFrame) -> Result<(), EvalError> {
    let (t, l) = (record.context.len(), record.target.len());
    let start = record
        .window_origin
        .checked_sub(source.offset)
        .filter(|s| s + t + l <= source.len());
    let Some(start) = start else {
        return Err(EvalError::Trace(format!(
            "window at {} (+{} steps) is outside the source series [{}, {})",
            record.window_origin,
            t + l,
            source.offset,
            source.offset + source.len()
        )));
    };
    let series = source
        .channels()
        .get(record.channel)
        .ok_or_else(|| EvalError::Trace(format!("channel {} not in source", record.channel)))?;
    record.context = series[start..start + t].to_vec();
    record.target = series[start + t..start + t + l].to_vec();
    Ok(())
}

fn polyline(
    out: &mut String,
    xs: impl Iterator<Item = f64>,
    ys: &[f64],
    y_of: &dyn Fn(f64) -> f64,
    class: &str,
    color: &str,
) {
    let pts: Vec<String> = xs
        .zip(ys)
        .map(|(x, &y)| format!("{x:.2},{:.2}", y_of(y)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline class="{class}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
        pts.join(" ")
    );
}

/// One panel per record: context and target as lines, forecast dashed, and
/// a grey rectangle `[start, start + p)` per sampled patch labelled with its
/// reassembled position.
pub fn render_svg(records: &[TraceRecord]) -> Result<String, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Trace("no trace records".into()));
    }
    for (i, r) in records.iter().enumerate() {
        check(r, i)?;
    }
    let height = PANEL * records.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    for (i, r) in records.iter().enumerate() {
        let top = PANEL * i as f64;
        let (t, l) = (r.context.len(), r.target.len());
        let padded_end = r
            .selected_starts
            .iter()
            .map(|s| s + r.patch_size)
            .max()
            .unwrap_or(0);
        let steps = (t + l).max(padded_end).max(2) as f64;
        let dx = (WIDTH - 2.0 * MARGIN) / (steps - 1.0);
        let x_of = |s: f64| MARGIN + s * dx;
        let all = r
            .context
            .iter()
            .chain(&r.target)
            .chain(&r.forecast)
            .copied();
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let plot_h = PANEL - 2.0 * MARGIN;
        let y_of = |v: f64| top + MARGIN + (hi - v) / span * plot_h;
        let _ = writeln!(
            out,
            r#"<g class="panel" data-channel="{}" data-origin="{}">"#,
            r.channel, r.window_origin
        );
        let _ = writeln!(
            out,
            r#"<text x="{MARGIN}" y="{:.2}" font-size="12" font-family="monospace">channel {} origin {}</text>"#,
            top + MARGIN - 10.0,
            r.channel,
            r.window_origin
        );
        let mut position = vec![0; r.reassembly_order.len()];
        for (slot, &j) in r.reassembly_order.iter().enumerate() {
            position[j] = slot;
        }
        for (j, &s) in r.selected_starts.iter().enumerate() {
            let x = x_of(s as f64);
            let _ = writeln!(
                out,
                r#"<rect class="patch" x="{x:.2}" y="{:.2}" width="{:.2}" height="{plot_h:.2}" fill="grey" fill-opacity="0.18" stroke="grey" data-start="{s}" data-slot="{j}" data-position="{}"/>"#,
                top + MARGIN,
                r.patch_size as f64 * dx,
                position[j]
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="9" font-family="monospace">{}</text>"#,
                x + 2.0,
                top + PANEL - MARGIN + 12.0,
                position[j]
            );
        }
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black" stroke-dasharray="2,3"/>"#,
            top + MARGIN,
            top + PANEL - MARGIN,
            x = x_of(t as f64 - 0.5)
        );
        polyline(
            &mut out,
            (0..t).map(|s| x_of(s as f64)),
            &r.context,
            &y_of,
            "context",
            "steelblue",
        );
        polyline(
            &mut out,
            (t..t + l).map(|s| x_of(s as f64)),
            &r.target,
            &y_of,
            "target",
            "black",
        );
        polyline(
            &mut out,
            (t..t + l).map(|s| x_of(s as f64)),
            &r.forecast,
            &y_of,
            "forecast",
            "crimson",
        );
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders the records of a `trace-*.json` file to `out`.
pub fn viz_trace(
    trace_path: &Path,
    source: Option<&SeriesFrame>,
    out: &Path,
) -> Result<usize, EvalError> {
    let mut records: Vec<TraceRecord> = read_json(trace_path)?;
    if let Some(frame) = source {
        for r in &mut records {
            attach_source(r, frame)?;
        }
    }
    let svg = render_svg(&records)?;
    std::fs::write(out, svg).map_err(|source| EvalError::Io {
        path: out.display().to_string(),
        source,
    })?;
    Ok(records.len())
}
