//! Image-quality metrics, dataset evaluation and report files.

mod metrics;
mod report;

pub use metrics::{psnr, psnr_mu, ssim, ssim_mu, PSNR_CAP};
pub use report::{
    ablate_sampling_steps, ablate_steps_on, emit_ablation, emit_report, evaluate_dataset,
    evaluate_scenes, parse_report_csv, svg_line_plot, MetricReport, SceneMetrics, StepAblation,
    ABLATION_CSV_HEADER, PLOT_HEIGHT, PLOT_MARGIN, PLOT_WIDTH, REPORT_CSV_HEADER,
};
