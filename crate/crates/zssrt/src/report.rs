//! Evaluation outputs: per-view CSV, JSON summary and a summary plot.

use std::path::Path;

use serde::Serialize;
use zssrt_core::metrics::MetricReport;
use zssrt_core::Image;

use crate::error::{write_atomic, AppError, Result};
use crate::imageio::save_png;

pub const LPIPS_NOTE: &str = "LPIPS not computed: it requires a pretrained perceptual network";

pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from("view_id,psnr_db,ssim\n");
    for ((id, p), s) in report.view_ids.iter().zip(&report.psnr).zip(&report.ssim) {
        out.push_str(&format!("{id},{p:.6},{s:.6}\n"));
    }
    out
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    mean_psnr_db: f64,
    mean_ssim: f64,
    views: usize,
    runtime_seconds: f64,
    config_digest: &'a str,
    model: &'a str,
    lpips: Option<f64>,
    note: &'a str,
}

pub fn summary_json(report: &MetricReport, model: &str) -> String {
    let s = Summary {
        mean_psnr_db: report.mean_psnr,
        mean_ssim: report.mean_ssim,
        views: report.psnr.len(),
        runtime_seconds: report.runtime_seconds,
        config_digest: &report.config_digest,
        model,
        lpips: None,
        note: LPIPS_NOTE,
    };
    serde_json::to_string_pretty(&s).expect("summary serializes")
}

const PLOT_W: usize = 640;
const PLOT_H: usize = 240;
const PALETTE: [[f64; 3]; 3] = [[0.12, 0.47, 0.71], [1.0, 0.5, 0.05], [0.17, 0.63, 0.17]];

fn put(img: &mut Image, x: isize, y: isize, c: [f64; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.data[3 * (y as usize * img.width + x as usize)..][..3].copy_from_slice(&c);
    }
}

fn line(img: &mut Image, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [f64; 3]) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(img, (x0 + t * (x1 - x0)).round() as isize, (y0 + t * (y1 - y0)).round() as isize, c);
    }
}

fn frame(img: &mut Image, x0: usize, x1: usize) {
    let g = [0.6; 3];
    let (t, b) = (10.0, (PLOT_H - 10) as f64);
    line(img, (x0 as f64, t), (x0 as f64, b), g);
    line(img, (x0 as f64, b), (x1 as f64, b), g);
}

/// Left panel: log10 loss per stage against normalized step. Right panel:
/// per-view PSNR bars scaled to the largest value.
pub fn plot(losses: &[(String, usize, f64)], report: &MetricReport) -> Image {
    let mut img = Image::filled(PLOT_W, PLOT_H, 3, 1.0);
    let half = PLOT_W / 2;
    frame(&mut img, 10, half - 10);
    frame(&mut img, half + 10, PLOT_W - 10);
    let (top, bottom) = (10.0, (PLOT_H - 10) as f64);
    let logs: Vec<f64> = losses.iter().filter(|r| r.2 > 0.0).map(|r| r.2.log10()).collect();
    if let (Some(lo), Some(hi)) = (logs.iter().cloned().reduce(f64::min), logs.iter().cloned().reduce(f64::max)) {
        let span = (hi - lo).max(1e-9);
        for (k, stage) in ["coarse", "sdm", "fine"].iter().enumerate() {
            let rows: Vec<_> = losses.iter().filter(|r| r.0 == *stage && r.2 > 0.0).collect();
            let last = rows.iter().map(|r| r.1).max().unwrap_or(1).max(1) as f64;
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .map(|r| {
                    let x = 12.0 + (half as f64 - 24.0) * r.1 as f64 / last;
                    let y = bottom - (bottom - top) * (r.2.log10() - lo) / span;
                    (x, y)
                })
                .collect();
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], PALETTE[k]);
            }
        }
    }
    let max = report.psnr.iter().cloned().filter(|v| v.is_finite()).fold(1.0, f64::max);
    let n = report.psnr.len().max(1);
    let slot = (half - 30) as f64 / n as f64;
    for (i, p) in report.psnr.iter().enumerate() {
        let h = if p.is_finite() { (bottom - top) * (p / max).clamp(0.0, 1.0) } else { bottom - top };
        let x0 = (half + 14) as f64 + i as f64 * slot;
        for x in x0 as usize..(x0 + 0.7 * slot).max(x0 + 1.0) as usize {
            line(&mut img, (x as f64, bottom), (x as f64, bottom - h), PALETTE[0]);
        }
    }
    img
}

/// Write `metrics.csv`, the summary JSON and the plot.
pub fn emit_report(
    report: &MetricReport,
    losses: &[(String, usize, f64)],
    model: &str,
    csv: &Path,
    summary: &Path,
    plot_path: &Path,
) -> Result<()> {
    if report.psnr.is_empty() {
        return Err(AppError::Usage("no metrics to report".into()));
    }
    write_atomic(csv, metrics_csv(report).as_bytes())?;
    write_atomic(summary, summary_json(report, model).as_bytes())?;
    save_png(plot_path, &plot(losses, report))
}
