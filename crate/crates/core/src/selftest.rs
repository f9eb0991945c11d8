//! Quick invariant suite behind `semcom selftest`.
//!
//! Each check is small enough that the whole suite runs in seconds; the
//! acceptance target repeats them at full size.

use num_complex::Complex64;
use rand::Rng;

use crate::channel::{self, c2r_unflatten, flatten_r2c, rayleigh_gain, transmit, ChannelConfig, ChannelKind};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::FeatureProvider;
use crate::error::Result;
use crate::model::{Model, Stage, Transmission};
use crate::params::GroupSet;
use crate::rate::{self, CandidateRates, MaskAndSideInfo};
use crate::seed;
use crate::tensor::{gradcheck, gradcheck_params, Tape, Tensor};
use crate::train::Experiment;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match run() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Configuration used by the pipeline checks: `l_v = 4`, `d = 8`, two codec
/// layers, one head.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    let m = &mut c.model;
    m.l_c = 2;
    m.l_f = 2;
    m.objects = 3;
    m.feature_dim = 6;
    m.d = 8;
    m.heads = 1;
    m.temporal_blocks = 1;
    m.jsc_layers = 2;
    m.text_blocks = 1;
    m.refine_blocks = 1;
    c.data.n_train = 4;
    c.data.n_test = 2;
    c.data.total_frames = 8;
    c.resolved()
}

fn op_gradients() -> Result<(bool, String)> {
    let mut rng = seed::rng(1, "selftest-ops", 0);
    let a = Tensor::randn(vec![3, 4], 1.0, &mut rng)?;
    let b = Tensor::randn(vec![4, 3], 1.0, &mut rng)?;
    let g = Tensor::randn(vec![4], 1.0, &mut rng)?;
    let w = Tensor::randn(vec![3, 4], 1.0, &mut rng)?;
    let r = gradcheck(
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let s = t.softmax(m)?;
            let x = t.matmul(s, v[0])?;
            let ln = t.layer_norm(x, v[2], v[2], 1e-5)?;
            let ge = t.gelu(ln);
            let p = t.mul(ge, v[3])?;
            Ok(t.sum_all(p))
        },
        &[a, b, g, w],
        1e-6,
    )?;
    Ok((r.rel_error < 1e-4, format!("rel error {:.2e} over {} partials", r.rel_error, r.checked)))
}

fn pipeline_gradients() -> Result<(bool, String)> {
    let cfg = tiny_config();
    let exp = Experiment::new(cfg)?;
    let mut model = Model::new(&exp.cfg)?;
    // move the zero-initialized compensation off its kink-free start
    let mut rng = seed::rng(2, "selftest-perturb", 0);
    for (_, p) in model.store.iter_mut() {
        for x in p.value.data_mut() {
            *x += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
    let task = &exp.data.train[0];
    let video = exp.provider.video(task.class, task.seed)?;
    let report = gradcheck_params(
        &model.store,
        Stage::S4.trainable(),
        |t| {
            let y_v = model.encoder.encode(t, &video)?;
            let y_q = model.text.encode(t, &task.tokens, &task.pad_mask)?;
            let mut rng = seed::rng(3, "selftest-channel", 0);
            let f = model.forward(t, y_v, y_q, task, Transmission::Full, &ChannelConfig::noiseless(), 0.0, &mut rng)?;
            Ok(f.loss)
        },
        1e-5,
        Some(3),
    )?;
    Ok((
        report.rel_error < 1e-4,
        format!("rel error {:.2e} over {} partials", report.rel_error, report.checked),
    ))
}

fn gumbel_max() -> Result<(bool, String)> {
    let mut rng = seed::rng(4, "selftest-gumbel", 0);
    let p = [0.1, 0.2, 0.3, 0.4];
    let n = 20_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[rate::sample_hard(&p, &mut rng)] += 1;
    }
    let tv = 0.5 * p.iter().zip(counts).map(|(q, c)| (c as f64 / n as f64 - q).abs()).sum::<f64>();
    Ok((tv < 0.015, format!("total variation {tv:.4} over {n} draws")))
}

fn straight_through() -> Result<(bool, String)> {
    let rates = CandidateRates::new(8)?;
    let mut rng = seed::rng(5, "selftest-st", 0);
    let logits = Tensor::randn(vec![4, 3], 1.0, &mut rng)?;
    let run = |st: bool| -> Result<(Tensor, Vec<f64>)> {
        let mut rng = seed::rng(5, "selftest-st-noise", 0);
        let mut t = Tape::new();
        let x = t.leaf(logits.clone());
        let d = t.softmax(x)?;
        let s = rate::gumbel_sample(&mut t, d, 0.5, &mut rng)?;
        let sel = if st { rate::straight_through_select(&mut t, &s)? } else { s.soft };
        let value = if st { t.value(sel).clone() } else { s.hard.clone() };
        let loss = rate::rate_surrogate(&mut t, sel, &rates)?;
        t.backward(loss)?;
        Ok((value, t.grad(x).unwrap_or_default().to_vec()))
    };
    let (hard_st, g_st) = run(true)?;
    let (hard, g_soft) = run(false)?;
    Ok((hard_st == hard && g_st == g_soft, "forward one-hot, gradients bit-identical".into()))
}

fn channel_stats() -> Result<(bool, String)> {
    let mut rng = seed::rng(6, "selftest-channel", 0);
    let n = 100_000;
    let zeros = channel::SymbolStream {
        symbols: vec![Complex64::new(0.0, 0.0); n],
        norm_factor: 1.0,
    };
    let (rx, _) = transmit(&zeros, &ChannelConfig::awgn(0.0), &mut rng);
    let power = rx.power();
    let sigma_h = 1.0;
    let mean_h = (0..n).map(|_| rayleigh_gain(sigma_h, &mut rng).norm()).sum::<f64>() / n as f64;
    let expect_h = sigma_h * (std::f64::consts::PI / 2.0).sqrt();
    let ok = (power - 1.0).abs() < 0.02 && (mean_h / expect_h - 1.0).abs() < 0.02;
    Ok((ok, format!("noise power {power:.4} (1.0), mean |h| {mean_h:.4} ({expect_h:.4})")))
}

fn protocol_roundtrip() -> Result<(bool, String)> {
    let (l_v, d) = (6, 16);
    let mut rng = seed::rng(7, "selftest-protocol", 0);
    let mut worst: f64 = 0.0;
    let mut bijective = true;
    for _ in 0..200 {
        let counts: Vec<usize> = (0..l_v).map(|_| 2 * rng.random_range(1..=d / 2)).collect();
        let side = MaskAndSideInfo::from_counts(counts.clone(), d)?;
        bijective &= MaskAndSideInfo::from_side_info(&side.side_info(), d)? == side;
        bijective &= side.rate_loss() == counts.iter().sum::<usize>();
        let s = Tensor::randn(vec![l_v, d], 3.0, &mut rng)?.zip_map(&side.mask(), |a, m| a * m)?;
        let tx = flatten_r2c(&s, &side)?;
        let back = c2r_unflatten(&tx, &side, tx.norm_factor)?;
        worst = s.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        bijective &= tx.power() <= 1.0 + 1e-9;
    }
    Ok((worst <= 1e-12 && bijective, format!("max roundtrip error {worst:.1e}")))
}

fn checkpoint_roundtrip() -> Result<(bool, String)> {
    let model = Model::new(&tiny_config())?;
    let ckpt = Checkpoint::from_store(&model.store, 7, "stage=1");
    let back = Checkpoint::from_bytes(&ckpt.to_bytes())?;
    let mut other = Model::new(&{
        let mut c = tiny_config();
        c.seed = 8;
        c
    })?;
    back.apply_to(&mut other.store)?;
    let same = model.store.iter().zip(other.store.iter()).all(|((_, a), (_, b))| a.value == b.value);
    Ok((same && back.to_bytes() == ckpt.to_bytes(), format!("{} tensors", ckpt.entries.len())))
}

fn config_roundtrip() -> Result<(bool, String)> {
    let mut c = ExperimentConfig::default();
    c.channel.kind = ChannelKind::Rayleigh;
    c.train.fixed_snr = Some(3.5);
    let text = c.to_toml();
    let back = ExperimentConfig::parse(&text)?;
    Ok((back == c.resolved(), format!("{} bytes of TOML", text.len())))
}

fn replay() -> Result<(bool, String)> {
    let exp = Experiment::new(tiny_config())?;
    let model = Model::new(&exp.cfg)?;
    let run = || -> Result<Vec<f64>> {
        let task = &exp.data.test[0];
        let mut t = Tape::with_params(&model.store, GroupSet::NONE);
        let (y_v, y_q) = model.semantics(&mut t, task, &exp.provider)?;
        let mut rng = seed::rng(9, "selftest-replay", 0);
        let f = model.forward(&mut t, y_v, y_q, task, Transmission::Sample { tau: 1.0 }, &ChannelConfig::awgn(0.0), 0.0, &mut rng)?;
        Ok(t.value(f.scores).data().to_vec())
    };
    let (a, b) = (run()?, run()?);
    Ok((a == b, "identical scores across replays".into()))
}

/// Runs every check in order.
pub fn run_all() -> Vec<Check> {
    vec![
        check("op gradients", op_gradients),
        check("pipeline gradients", pipeline_gradients),
        check("gumbel-max frequencies", gumbel_max),
        check("straight-through contract", straight_through),
        check("channel statistics", channel_stats),
        check("protocol roundtrip", protocol_roundtrip),
        check("checkpoint roundtrip", checkpoint_roundtrip),
        check("config roundtrip", config_roundtrip),
        check("seeded replay", replay),
    ]
}
