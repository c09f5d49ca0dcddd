use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::metrics::{psnr, psnr_mu, ssim, ssim_mu, PSNR_CAP};
use crate::data::{list_scenes, load_scene, ExposureStack, HdrImage};
use crate::error::{Error, Result};
use crate::model::LfDiffModel;

pub const REPORT_CSV_HEADER: &str = "scene,psnr_mu,psnr_l,ssim_mu,ssim_l,time_s";
pub const ABLATION_CSV_HEADER: &str = "steps,psnr_mu,psnr_l,ssim_mu,ssim_l,time_s";

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMetrics {
    pub scene: String,
    pub psnr_mu: f64,
    pub psnr_l: f64,
    pub ssim_mu: f64,
    pub ssim_l: f64,
    pub time_s: f64,
}

impl SceneMetrics {
    fn csv_values(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?},{:?}",
            self.psnr_mu, self.psnr_l, self.ssim_mu, self.ssim_l, self.time_s
        )
    }
}

/// Per-scene metrics for one sampler setting.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub steps: usize,
    pub seed: u64,
    pub scenes: Vec<SceneMetrics>,
    /// Scenes that could not be scored, with the reason.
    pub skipped: Vec<String>,
}

impl MetricReport {
    /// Arithmetic means over scenes (`scene` is `"mean"`); `None` when empty.
    pub fn mean(&self) -> Option<SceneMetrics> {
        if self.scenes.is_empty() {
            return None;
        }
        let n = self.scenes.len() as f64;
        let avg = |f: fn(&SceneMetrics) -> f64| self.scenes.iter().map(f).sum::<f64>() / n;
        Some(SceneMetrics {
            scene: "mean".into(),
            psnr_mu: avg(|s| s.psnr_mu),
            psnr_l: avg(|s| s.psnr_l),
            ssim_mu: avg(|s| s.ssim_mu),
            ssim_l: avg(|s| s.ssim_l),
            time_s: avg(|s| s.time_s),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for m in &self.scenes {
            let _ = writeln!(s, "{},{}", m.scene, m.csv_values());
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "sampling steps: {}\nseed: {}\nscenes: {}\n",
            self.steps,
            self.seed,
            self.scenes.len()
        );
        match self.mean() {
            Some(m) => {
                let _ = writeln!(
                    s,
                    "mean PSNR-mu {:.4} dB\nmean PSNR-L {:.4} dB\nmean SSIM-mu {:.6}\nmean SSIM-L {:.6}\nmean time {:.4} s/image",
                    m.psnr_mu, m.psnr_l, m.ssim_mu, m.ssim_l, m.time_s
                );
            }
            None => s.push_str("no scenes evaluated\n"),
        }
        for k in &self.skipped {
            let _ = writeln!(s, "skipped: {k}");
        }
        s
    }
}

/// Parses the CSV written by [`MetricReport::to_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<SceneMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_CSV_HEADER) {
        return Err(Error::Format("report CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad report row '{l}'"));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(SceneMetrics {
                scene: f[0].to_string(),
                psnr_mu: num(1)?,
                psnr_l: num(2)?,
                ssim_mu: num(3)?,
                ssim_l: num(4)?,
                time_s: num(5)?,
            })
        })
        .collect()
}

/// Runs inference on in-memory scenes and scores them against ground truth.
pub fn evaluate_scenes(
    model: &LfDiffModel,
    scenes: &[(String, ExposureStack)],
    steps: usize,
    seed: u64,
) -> Result<MetricReport> {
    evaluate_with(scenes, steps, seed, |stack| model.infer(stack, steps, seed))
}

/// Scores an arbitrary reconstruction function; `infer` is timed per scene.
pub fn evaluate_with(
    scenes: &[(String, ExposureStack)],
    steps: usize,
    seed: u64,
    mut infer: impl FnMut(&ExposureStack) -> Result<HdrImage>,
) -> Result<MetricReport> {
    let mut sorted: Vec<&(String, ExposureStack)> = scenes.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut report = MetricReport {
        steps,
        seed,
        scenes: Vec::new(),
        skipped: Vec::new(),
    };
    for (name, stack) in sorted {
        let Some(gt) = stack.ground_truth() else {
            log::warn!("scene {name} has no ground truth; skipped");
            report.skipped.push(format!("{name}: no ground truth"));
            continue;
        };
        let start = Instant::now();
        let out = infer(stack)?;
        let time_s = start.elapsed().as_secs_f64();
        let (g, o) = (gt.pixels(), out.pixels());
        report.scenes.push(SceneMetrics {
            scene: name.clone(),
            psnr_mu: psnr_mu(g, o)?,
            psnr_l: psnr(g, o, PSNR_CAP)?,
            ssim_mu: ssim_mu(g, o)?,
            ssim_l: ssim(g, o)?,
            time_s,
        });
    }
    Ok(report)
}

/// Loads every `scene_*` directory under `dir` (sorted) and evaluates it.
pub fn evaluate_dataset(
    model: &LfDiffModel,
    dir: impl AsRef<Path>,
    steps: usize,
    seed: u64,
) -> Result<MetricReport> {
    let scenes = list_scenes(dir)?
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_scene(&p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_scenes(model, &scenes, steps, seed)
}

/// Mean metrics for each sampler setting.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAblation {
    pub reports: Vec<MetricReport>,
}

impl StepAblation {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.reports {
            if let Some(m) = r.mean() {
                let _ = writeln!(s, "{},{}", r.steps, m.csv_values());
            }
        }
        s
    }

    /// `(S, mean PSNR-μ)` and `(S, mean seconds per image)` series.
    pub fn series(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let rows: Vec<(f64, SceneMetrics)> = self
            .reports
            .iter()
            .filter_map(|r| r.mean().map(|m| (r.steps as f64, m)))
            .collect();
        (
            rows.iter().map(|(s, m)| (*s, m.psnr_mu)).collect(),
            rows.iter().map(|(s, m)| (*s, m.time_s)).collect(),
        )
    }
}

pub fn ablate_steps_on(
    model: &LfDiffModel,
    scenes: &[(String, ExposureStack)],
    steps: &[usize],
    seed: u64,
) -> Result<StepAblation> {
    let reports = steps
        .iter()
        .map(|&s| evaluate_scenes(model, scenes, s, seed))
        .collect::<Result<_>>()?;
    Ok(StepAblation { reports })
}

pub fn ablate_sampling_steps(
    model: &LfDiffModel,
    dir: impl AsRef<Path>,
    steps: &[usize],
    seed: u64,
) -> Result<StepAblation> {
    let scenes = list_scenes(dir)?
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_scene(&p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ablate_steps_on(model, &scenes, steps, seed)
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Plot geometry shared by the writer and tests.
pub const PLOT_WIDTH: f64 = 480.0;
pub const PLOT_HEIGHT: f64 = 320.0;
pub const PLOT_MARGIN: f64 = 50.0;

/// A single-series SVG line plot. The axis ranges (written as
/// `data-x-min` etc. on the root element) always contain every point.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    if let Some(&(x, y)) = points.first() {
        (x0, x1, y0, y1) = (x, x, y, y);
        for &(x, y) in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let pad_x = if x1 > x0 { 0.05 * (x1 - x0) } else { 1.0 };
        let pad_y = if y1 > y0 { 0.05 * (y1 - y0) } else { 1.0 };
        (x0, x1, y0, y1) = (x0 - pad_x, x1 + pad_x, y0 - pad_y, y1 + pad_y);
    }
    let (w, h, m) = (PLOT_WIDTH, PLOT_HEIGHT, PLOT_MARGIN);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         data-x-min=\"{x0:?}\" data-x-max=\"{x1:?}\" data-y-min=\"{y0:?}\" data-y-max=\"{y1:?}\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>",
        w / 2.0
    );
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>",
        h - m
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
            px(xv),
            h - m + 14.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
            m - 4.0,
            py(yv) + 3.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{x_label}</text>",
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{y_label}</text>",
        h / 2.0,
        h / 2.0
    );
    if !points.is_empty() {
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>",
                px(x),
                py(y)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `summary.txt` and `psnr_mu.svg` (per-scene PSNR-μ).
pub fn emit_report(report: &MetricReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, "report.csv", &report.to_csv())?;
    write(dir, "summary.txt", &report.summary())?;
    let pts: Vec<(f64, f64)> = report
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (i as f64, s.psnr_mu))
        .collect();
    write(
        dir,
        "psnr_mu.svg",
        &svg_line_plot("PSNR-mu per scene", "scene index", "PSNR-mu (dB)", &pts),
    )
}

/// Writes `ablation.csv`, `psnr_vs_steps.svg` and `time_vs_steps.svg`.
pub fn emit_ablation(ablation: &StepAblation, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, "ablation.csv", &ablation.to_csv())?;
    let (psnr_pts, time_pts) = ablation.series();
    write(
        dir,
        "psnr_vs_steps.svg",
        &svg_line_plot("PSNR-mu vs sampling steps", "S", "PSNR-mu (dB)", &psnr_pts),
    )?;
    write(
        dir,
        "time_vs_steps.svg",
        &svg_line_plot(
            "Inference time vs sampling steps",
            "S",
            "seconds / image",
            &time_pts,
        ),
    )
}
