#![allow(dead_code)]

pub mod suites;

use candle_core::{DType, Device, Tensor, Var};
use lfdiff::blocks::{
    AlignmentModule, ChannelAttention, CrossAttention, Frm, GatedFfn, NafBlock, Pim, ResidualBlock,
    TimeEmbedding, TransposedSelfAttention,
};
use lfdiff::model::{Denoiser, LfDiffConfig, Lpenet};
use lfdiff::nn::gradcheck::{check_gradients, GradCheck};
use lfdiff::nn::{ops, ParamStore};
use lfdiff::training::{reconstruction_loss, RandomConvPyramid};
use lfdiff::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
const SAMPLES: usize = 8;
const FLOOR: f64 = 1e-3;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn input(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Var {
    Var::from_tensor(&uniform(shape, lo, hi, seed)).unwrap()
}

/// Random linear functional of `out`, so every output coordinate matters.
fn project(out: &Tensor, seed: u64) -> Result<Tensor> {
    let w = uniform(out.dims(), -1.0, 1.0, seed);
    Ok((out * w)?.sum_all()?)
}

fn run(
    store: &ParamStore,
    inputs: &[(&str, &Var)],
    f: impl Fn() -> Result<Tensor>,
) -> Result<GradCheck> {
    store.randomize("", 0.3, 11)?;
    let mut vars: Vec<(String, Var)> = store.vars().into_iter().collect();
    vars.extend(inputs.iter().map(|(n, v)| (n.to_string(), (*v).clone())));
    check_gradients(&vars, SAMPLES, H, FLOOR, 3, f)
}

fn store() -> ParamStore {
    ParamStore::new(DType::F64, 5)
}

pub type Case = (&'static str, fn() -> Result<GradCheck>);

pub fn gradient_cases() -> Vec<Case> {
    vec![
        ("residual block", residual),
        ("channel attention", channel_attention),
        ("simple gate", simple_gate),
        ("transposed self-attention", tsa),
        ("gated feed-forward", gated_ffn),
        ("cross-attention", cross_attention),
        ("feature refinement module", frm),
        ("prior integration module", pim),
        ("NAF block + time embedding", naf),
        ("alignment module", alignment),
        ("prior extractor", lpenet),
        ("denoiser 16x16", denoiser),
        ("reconstruction loss", recon_loss),
    ]
}

fn residual() -> Result<GradCheck> {
    let s = store();
    let b = ResidualBlock::new(&s.root(), 4)?;
    let x = input(&[1, 4, 6, 6], -1.0, 1.0, 1);
    run(&s, &[("x", &x)], || project(&b.forward(x.as_tensor())?, 9))
}

fn channel_attention() -> Result<GradCheck> {
    let s = store();
    let b = ChannelAttention::new(&s.root(), 8)?;
    let x = input(&[2, 8, 5, 5], -1.0, 1.0, 1);
    run(&s, &[("x", &x)], || project(&b.forward(x.as_tensor())?, 9))
}

fn simple_gate() -> Result<GradCheck> {
    let s = store();
    let x = input(&[1, 6, 4, 4], -1.0, 1.0, 1);
    run(&s, &[("x", &x)], || {
        project(&ops::simple_gate(x.as_tensor())?, 9)
    })
}

fn tsa() -> Result<GradCheck> {
    let s = store();
    let b = TransposedSelfAttention::new(&s.root(), 8, 2)?;
    let x = input(&[1, 8, 6, 6], -1.0, 1.0, 1);
    run(&s, &[("x", &x)], || project(&b.forward(x.as_tensor())?, 9))
}

fn gated_ffn() -> Result<GradCheck> {
    let s = store();
    let b = GatedFfn::new(&s.root(), 6, 2.66)?;
    let x = input(&[1, 6, 5, 5], -1.0, 1.0, 1);
    run(&s, &[("x", &x)], || project(&b.forward(x.as_tensor())?, 9))
}

fn cross_attention() -> Result<GradCheck> {
    let s = store();
    let b = CrossAttention::new(&s.root(), 8, 3)?;
    let f = input(&[1, 8, 4, 4], -1.0, 1.0, 1);
    let z = input(&[1, 3, 4, 4], -1.0, 1.0, 2);
    run(&s, &[("f", &f), ("z", &z)], || {
        project(&b.forward(f.as_tensor(), z.as_tensor())?, 9)
    })
}

fn frm() -> Result<GradCheck> {
    let s = store();
    let b = Frm::new(&s.root(), 4, 2, 2.0, 2)?;
    let x = input(&[1, 4, 8, 8], -1.0, 1.0, 1);
    run(&s, &[("x", &x)], || project(&b.forward(x.as_tensor())?, 9))
}

fn pim() -> Result<GradCheck> {
    let s = store();
    let b = Pim::new(&s.root(), 4, 3, 2.0, 4)?;
    let x = input(&[1, 4, 8, 8], -1.0, 1.0, 1);
    let z = input(&[1, 3, 2, 2], -1.0, 1.0, 2);
    run(&s, &[("x", &x), ("z", &z)], || {
        project(&b.forward(x.as_tensor(), z.as_tensor())?, 9)
    })
}

fn naf() -> Result<GradCheck> {
    let s = store();
    let temb = TimeEmbedding::new(&s.root().pp("time"), 8)?;
    let b = NafBlock::new(&s.root().pp("naf"), 4, temb.out_dim())?;
    let x = input(&[2, 4, 5, 5], -1.0, 1.0, 1);
    run(&s, &[("x", &x)], || {
        let t = temb.forward(&[3, 150], DType::F64, &Device::Cpu)?;
        project(&b.forward(x.as_tensor(), &t)?, 9)
    })
}

fn alignment() -> Result<GradCheck> {
    let s = store();
    let b = AlignmentModule::new(&s.root(), 6, 4)?;
    let frames: Vec<Var> = (0..3)
        .map(|i| input(&[1, 6, 6, 6], 0.0, 1.0, 20 + i))
        .collect();
    run(
        &s,
        &[("f0", &frames[0]), ("f1", &frames[1]), ("f2", &frames[2])],
        || {
            let f: Vec<Tensor> = frames.iter().map(|v| v.as_tensor().clone()).collect();
            project(&b.forward(&f)?, 9)
        },
    )
}

fn lpenet() -> Result<GradCheck> {
    let s = store();
    let cfg = LfDiffConfig {
        lpenet_channels: 8,
        lpenet_blocks: 2,
        ..LfDiffConfig::desk()
    };
    let b = Lpenet::new(&s.root(), 12, &cfg)?;
    let x = input(&[1, 12, 4, 4], 0.0, 1.0, 1);
    run(&s, &[("x", &x)], || project(&b.forward(x.as_tensor())?, 9))
}

fn denoiser() -> Result<GradCheck> {
    let s = store();
    let cfg = LfDiffConfig {
        denoiser_base_channels: 8,
        denoiser_multipliers: vec![1, 2],
        ..LfDiffConfig::desk()
    };
    let b = Denoiser::new(&s.root(), &cfg)?;
    let z = input(&[1, cfg.lpr_channels, 16, 16], -1.0, 1.0, 1);
    let d = input(&[1, cfg.lpr_channels, 16, 16], -1.0, 1.0, 2);
    run(&s, &[("z", &z), ("d", &d)], || {
        project(&b.forward(z.as_tensor(), d.as_tensor(), &[37])?, 9)
    })
}

fn recon_loss() -> Result<GradCheck> {
    let s = store();
    let ex = RandomConvPyramid::new(7, DType::F64)?;
    let h = uniform(&[1, 3, 8, 8], 0.05, 1.0, 1);
    let h_hat = input(&[1, 3, 8, 8], 0.05, 1.0, 2);
    run(&s, &[("h_hat", &h_hat)], || {
        Ok(reconstruction_loss(&h, h_hat.as_tensor(), 0.5, 5000.0, &ex)?.total)
    })
}
