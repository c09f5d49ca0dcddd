//! Acceptance gate: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use common::suites::{diffusion_oracle, exact_identities, identity_at_init, Check};
use lfdiff::data::{generate_scene, ExposureStack, SceneSpec};
use lfdiff::eval::{ablate_steps_on, psnr_mu};
use lfdiff::model::{tensor_to_images, Batch, LfDiffConfig, LfDiffModel};
use lfdiff::nn::ops;
use lfdiff::training::{Dataset, TrainConfig, Trainer};
use lfdiff::{DType, Result, Tensor};

const DESK_SIZE: usize = 64;
const STAGE1_STEPS: usize = 1000;
const STAGE2_STEPS: usize = 500;
const DESK_LR: f64 = 1e-3;
/// Step after which the desk learning rate drops tenfold.
const DESK_DECAY_STEP: usize = 600;
/// The reference frame clips above a quarter of the scene peak.
const DESK_EXPOSURES: [f32; 3] = [0.0, 2.0, 4.0];
const ABLATION_STEPS: [usize; 4] = [5, 10, 20, 50];
/// Loss comparisons use the mean over this many final steps.
const LOSS_WINDOW: usize = 50;

struct Gate {
    passed: usize,
    failed: usize,
}

impl Gate {
    fn report(&mut self, id: usize, title: &str, ok: bool, detail: &str) {
        let tag = if ok { "PASS" } else { "FAIL" };
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!("{tag} criterion {id}: {title} ({detail})");
    }

    fn suite(&mut self, id: usize, title: &str, checks: Vec<Check>, start: Instant) {
        let failed: Vec<String> = checks
            .iter()
            .filter(|c| !c.ok)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        let detail = if failed.is_empty() {
            format!(
                "{} checks, {:.1}s",
                checks.len(),
                start.elapsed().as_secs_f64()
            )
        } else {
            failed.join("; ")
        };
        self.report(id, title, failed.is_empty(), &detail);
    }
}

fn desk_scenes() -> Vec<(String, ExposureStack)> {
    (0..2)
        .map(|i| {
            let spec = SceneSpec {
                seed: i,
                height: DESK_SIZE,
                width: DESK_SIZE,
                exposure_set: DESK_EXPOSURES,
                ..SceneSpec::default()
            };
            (
                format!("scene_{i:04}"),
                generate_scene(&spec).expect("scene generation"),
            )
        })
        .collect()
}

fn desk_config(use_prior: bool) -> TrainConfig {
    TrainConfig {
        lr0: DESK_LR,
        lr_decay_epochs: DESK_DECAY_STEP,
        grad_clip: 1.0,
        batch_size: 2,
        patch_size: DESK_SIZE,
        epochs: STAGE1_STEPS,
        model: LfDiffConfig {
            use_prior,
            ..LfDiffConfig::desk()
        },
        ..TrainConfig::default()
    }
}

fn full_batch(model: &LfDiffModel, scenes: &[(String, ExposureStack)]) -> Result<Batch> {
    let stacks: Vec<&ExposureStack> = scenes.iter().map(|s| &s.1).collect();
    Batch::from_stacks(&stacks, model.config().gamma, model.dtype())
}

fn mean_psnr_mu(out: &Tensor, gt: &Tensor) -> Result<f64> {
    let (o, g) = (tensor_to_images(out)?, tensor_to_images(gt)?);
    let mut sum = 0.0;
    for (a, b) in g.iter().zip(&o) {
        sum += psnr_mu(a, b)?;
    }
    Ok(sum / g.len() as f64)
}

/// Train-set PSNR-μ of the stage-one reconstruction (prior from ground truth when enabled).
fn stage1_psnr(model: &LfDiffModel, batch: &Batch) -> Result<f64> {
    let gt = batch.ground_truth.as_ref().expect("ground truth");
    let z = if model.config().use_prior {
        Some(model.lpenet_forward(gt)?)
    } else {
        None
    };
    mean_psnr_mu(&model.reconstruct(&batch.frames, z.as_ref())?, gt)
}

fn tail_loss(t: &Trainer) -> f64 {
    let h = &t.state().history;
    let w = &h[h.len().saturating_sub(LOSS_WINDOW)..];
    w.iter().map(|r| r.l_total).sum::<f64>() / w.len() as f64
}

/// Mean |ẑ - z| between the sampled prior and the prior extracted from ground truth.
fn prior_gap(model: &LfDiffModel, batch: &Batch, seed: u64) -> Result<f64> {
    let gt = batch.ground_truth.as_ref().expect("ground truth");
    let z = model.lpenet_forward(gt)?;
    let z_hat = model.sample_prior(&batch.frames, model.config().sampling_steps, seed)?;
    ops::scalar(&ops::l1(&z_hat, &z)?)
}

fn train(cfg: TrainConfig, data: &Dataset) -> Result<(Trainer, f64)> {
    let start = Instant::now();
    let mut t = Trainer::new(cfg)?;
    t.fit(data, |_, _| Ok(()))?;
    Ok((t, start.elapsed().as_secs_f64()))
}

fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

fn desk_criteria(gate: &mut Gate) -> Result<()> {
    let scenes = desk_scenes();
    let data = Dataset::new(scenes.clone())?;
    let dir = tempfile::tempdir().expect("temporary directory");

    // 5: stage-one overfit with the ground-truth prior
    let (s1, secs) = train(desk_config(true), &data)?;
    let batch = full_batch(s1.model(), &scenes)?;
    let p_prior = stage1_psnr(s1.model(), &batch)?;
    gate.report(
        5,
        "desk-scale stage-1 overfit",
        p_prior >= 35.0 && secs <= 1800.0,
        &format!("{STAGE1_STEPS} steps, PSNR-mu {p_prior:.2} dB (>= 35), {secs:.0}s (<= 1800)"),
    );

    // 6: prior ablation under the same budget and seeds
    let (base, _) = train(desk_config(false), &data)?;
    let p_base = stage1_psnr(base.model(), &batch)?;
    let (l_prior, l_base) = (tail_loss(&s1), tail_loss(&base));
    gate.report(
        6,
        "prior ablation",
        l_prior < l_base && p_prior - p_base >= 1.0,
        &format!(
            "final loss {l_prior:.5} vs {l_base:.5}, PSNR-mu {p_prior:.2} vs {p_base:.2} dB (gain {:.2}, need >= 1)",
            p_prior - p_base
        ),
    );

    // 7: stage two from the stage-one checkpoint
    let ck = dir.path().join("stage1.lfck");
    s1.save(&ck)?;
    let cfg2 = TrainConfig {
        stage: 2,
        epochs: STAGE2_STEPS,
        stage1_checkpoint: Some(ck),
        ..desk_config(true)
    };
    let start = Instant::now();
    let mut s2 = Trainer::new(cfg2)?;
    let gap0 = prior_gap(s2.model(), &batch, 99)?;
    s2.fit(&data, |_, _| Ok(()))?;
    let secs2 = start.elapsed().as_secs_f64();
    let gap1 = prior_gap(s2.model(), &batch, 99)?;
    let s = s2.model().config().sampling_steps;
    let gt = batch.ground_truth.as_ref().expect("ground truth");
    let p_infer = mean_psnr_mu(&s2.model().infer_batch(&batch.frames, s, 0)?, gt)?;
    let reduction = 1.0 - gap1 / gap0;
    gate.report(
        7,
        "desk-scale stage 2",
        reduction >= 0.5 && p_prior - p_infer <= 3.0,
        &format!(
            "{STAGE2_STEPS} steps in {secs2:.0}s, |z_hat - z| {gap0:.4} -> {gap1:.4} ({:.0}% reduction, need >= 50%), \
             infer PSNR-mu {p_infer:.2} vs stage-1 {p_prior:.2} dB (need gap <= 3)",
            100.0 * reduction
        ),
    );

    // 8: sampling-step ablation
    let model = s2.model();
    let table = ablate_steps_on(model, &scenes, &ABLATION_STEPS, 3)?;
    let again = ablate_steps_on(model, &scenes, &ABLATION_STEPS, 3)?;
    let strip = |t: &lfdiff::eval::StepAblation| -> Vec<Vec<f64>> {
        t.reports
            .iter()
            .map(|r| r.scenes.iter().map(|m| m.psnr_mu).collect())
            .collect()
    };
    let deterministic = strip(&table) == strip(&again) && {
        let a = model.infer_batch(&batch.frames, s, 5)?;
        let b = model.infer_batch(&batch.frames, s, 5)?;
        common::suites::max_abs(&a, &b)? == 0.0
    };
    let (psnr_pts, time_pts) = table.series();
    let (a, b) = linear_fit(&time_pts);
    let worst_time = time_pts
        .iter()
        .map(|&(x, y)| ((y - (a + b * x)) / (a + b * x)).abs())
        .fold(0.0f64, f64::max);
    let trained: Vec<f64> = psnr_pts
        .iter()
        .filter(|p| p.0 >= s as f64)
        .map(|p| p.1)
        .collect();
    let spread = trained.iter().cloned().fold(f64::MIN, f64::max)
        - trained.iter().cloned().fold(f64::MAX, f64::min);
    let series = psnr_pts
        .iter()
        .zip(&time_pts)
        .map(|(p, t)| format!("S={} {:.2} dB {:.3}s", p.0, p.1, t.1))
        .collect::<Vec<_>>()
        .join(", ");
    gate.report(
        8,
        "sampling-step ablation",
        b > 0.0 && worst_time <= 0.3 && spread < 0.2 && deterministic,
        &format!(
            "{series}; time off linear fit by {:.0}% (<= 30), spread for S >= {s}: {spread:.3} dB (< 0.2), deterministic {deterministic}",
            100.0 * worst_time
        ),
    );
    Ok(())
}

fn parameter_accounting(gate: &mut Gate) -> Result<()> {
    let model = LfDiffModel::new(LfDiffConfig::default(), DType::F32, 0)?;
    let counts = model.param_count();
    println!("{counts}");
    let den = counts.get("denoiser").unwrap_or(0);
    let ok =
        (1_200_000..=2_600_000).contains(&den) && (5_000_000..=10_000_000).contains(&counts.total);
    gate.report(
        9,
        "parameter accounting",
        ok,
        &format!("denoiser {den}, total {}", counts.total),
    );
    Ok(())
}

fn determinism_and_resume(gate: &mut Gate) -> Result<()> {
    let scenes: Vec<(String, ExposureStack)> = (0..2)
        .map(|i| {
            let spec = SceneSpec {
                seed: 60 + i,
                height: 24,
                width: 24,
                ..SceneSpec::default()
            };
            (
                format!("scene_{i}"),
                generate_scene(&spec).expect("scene generation"),
            )
        })
        .collect();
    let data = Dataset::new(scenes)?;
    let cfg = |epochs| TrainConfig {
        lr0: 1e-3,
        batch_size: 2,
        patch_size: 16,
        epochs,
        model: LfDiffConfig {
            dhr_channels: 8,
            blocks_per_group: vec![1],
            heads: vec![2],
            ..LfDiffConfig::desk()
        },
        ..TrainConfig::default()
    };
    let losses = |t: &Trainer| {
        t.state()
            .history
            .iter()
            .map(|r| r.l_total)
            .collect::<Vec<_>>()
    };
    let (a, _) = train(cfg(4), &data)?;
    let (b, _) = train(cfg(4), &data)?;
    let identical = losses(&a) == losses(&b);

    let dir = tempfile::tempdir().expect("temporary directory");
    let (first, _) = train(cfg(2), &data)?;
    let ck = dir.path().join("e2.lfck");
    first.save(&ck)?;
    let mut resumed = Trainer::resume_with(&ck, cfg(4))?;
    resumed.fit(&data, |_, _| Ok(()))?;
    let diff = losses(&a)
        .iter()
        .zip(&losses(&resumed))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    gate.report(
        10,
        "determinism and resume",
        identical && diff <= 1e-6 && losses(&resumed).len() == losses(&a).len(),
        &format!("identical traces {identical}, resume max loss difference {diff:.2e} (<= 1e-6)"),
    );
    Ok(())
}

fn main() {
    let mut gate = Gate {
        passed: 0,
        failed: 0,
    };

    let t = Instant::now();
    gate.suite(1, "exact identities", exact_identities(), t);
    let t = Instant::now();
    gate.suite(2, "diffusion oracle", diffusion_oracle(), t);

    let t = Instant::now();
    let grads: Vec<Check> = common::gradient_cases()
        .into_iter()
        .map(|(name, case)| match case() {
            Ok(r) => Check {
                name: name.into(),
                ok: r.checked > 0 && r.max_rel_err <= common::TOL,
                detail: format!("max rel {:.2e} at {}", r.max_rel_err, r.worst),
            },
            Err(e) => Check {
                name: name.into(),
                ok: false,
                detail: format!("error: {e}"),
            },
        })
        .collect();
    gate.suite(3, "gradient checks", grads, t);
    let t = Instant::now();
    gate.suite(4, "identity at initialization", identity_at_init(), t);

    if let Err(e) = desk_criteria(&mut gate) {
        gate.report(5, "desk-scale criteria 5-8", false, &format!("error: {e}"));
    }
    if let Err(e) = parameter_accounting(&mut gate) {
        gate.report(9, "parameter accounting", false, &format!("error: {e}"));
    }
    if let Err(e) = determinism_and_resume(&mut gate) {
        gate.report(10, "determinism and resume", false, &format!("error: {e}"));
    }

    println!("acceptance: {} passed, {} failed", gate.passed, gate.failed);
    if gate.failed > 0 {
        std::process::exit(1);
    }
}
