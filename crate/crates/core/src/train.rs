//! Progressive training, evaluation sweeps and allocation reports.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::channel::{compute_bcr, ChannelConfig, ChannelKind};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{Dataset, QaTask, SyntheticVideoProvider};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::model::{training_transmission, Model, Stage, Transmission};
use crate::params::{GroupSet, ParamId, ParamStore};
use crate::rate::MaskAndSideInfo;
use crate::seed;
use crate::tensor::{Tape, Tensor};

/// Adam with per-parameter moments, indexed like the parameter store.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &ExperimentConfig, lr: f64) -> Self {
        let t = &cfg.train;
        Self::new(store, lr, t.adam_beta1, t.adam_beta2, t.adam_eps)
    }

    /// One bias-corrected update of every parameter with a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.get_mut(*id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub stage: u8,
    pub epoch: usize,
    /// Optimizer steps taken in this stage so far.
    pub step: u64,
    pub loss_total: f64,
    pub loss_task: f64,
    /// Mean `Σ k_i` of the sent allocations.
    pub loss_rate_bits: Option<f64>,
    pub accuracy: f64,
    pub tau: Option<f64>,
    /// Mean training SNR of the epoch.
    pub snr_db: Option<f64>,
    /// Mean retained channels per token.
    pub mean_k: Option<f64>,
    pub bcr: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 11] = [
    "stage",
    "epoch",
    "step",
    "loss_total",
    "loss_task",
    "loss_rate_bits",
    "accuracy",
    "tau",
    "snr_db",
    "mean_k",
    "bcr",
];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.stage.to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.loss_total.to_string(),
            r.loss_task.to_string(),
            opt(r.loss_rate_bits),
            r.accuracy.to_string(),
            opt(r.tau),
            opt(r.snr_db),
            opt(r.mean_k),
            opt(r.bcr),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let parse = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::input(format!("bad number {s:?} in {}", path.display()))) };
    let parse_opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { parse(s).map(Some) } };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != METRIC_COLUMNS.len() {
            return Err(Error::input(format!("{} has {} columns", path.display(), rec.len())));
        }
        rows.push(MetricRow {
            stage: parse(&rec[0])? as u8,
            epoch: parse(&rec[1])? as usize,
            step: parse(&rec[2])? as u64,
            loss_total: parse(&rec[3])?,
            loss_task: parse(&rec[4])?,
            loss_rate_bits: parse_opt(&rec[5])?,
            accuracy: parse(&rec[6])?,
            tau: parse_opt(&rec[7])?,
            snr_db: parse_opt(&rec[8])?,
            mean_k: parse_opt(&rec[9])?,
            bcr: parse_opt(&rec[10])?,
        });
    }
    Ok(rows)
}

/// Dataset, feature provider and the fixed allocation of a baseline.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub provider: SyntheticVideoProvider,
    pub fixed: Option<MaskAndSideInfo>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let data = Dataset::generate(cfg.seed, &cfg.data)?;
        let provider = SyntheticVideoProvider::new(cfg.seed, cfg.model.encoder().geometry(), &cfg.data)?;
        let fixed = cfg
            .train
            .fixed_total_k
            .map(|k| MaskAndSideInfo::uniform_total(k, cfg.model.l_v(), cfg.model.d))
            .transpose()?;
        Ok(Experiment {
            cfg,
            data,
            provider,
            fixed,
        })
    }

    pub fn channel(&self, snr_db: f64) -> ChannelConfig {
        ChannelConfig {
            kind: self.cfg.channel.kind,
            snr_db,
            sigma_h: self.cfg.channel.sigma_h,
        }
    }

    fn frame(&self) -> (usize, usize) {
        (self.cfg.channel.frame_width, self.cfg.channel.frame_height)
    }
}

struct SampleStats {
    grads: Vec<(ParamId, Vec<f64>)>,
    loss_total: f64,
    loss_task: f64,
    rate_bits: f64,
    correct: bool,
}

/// Trains one stage in place and returns its per-epoch metrics.
pub fn train_stage(model: &mut Model, exp: &Experiment, stage: Stage, mode: ExecMode) -> Result<Vec<MetricRow>> {
    let cfg = &exp.cfg;
    let sc = cfg.stage(stage.number());
    let epochs = sc.epochs.unwrap_or(0);
    let lr = sc.lr.ok_or_else(|| Error::contract("unresolved stage learning rate"))?;
    let adaptive = stage.adaptive() && exp.fixed.is_none();
    let lambda = if adaptive { sc.lambda.unwrap_or(0.0) } else { 0.0 };
    if exp.fixed.is_some() && stage == Stage::S3 {
        return Err(Error::contract("fixed-rate baselines have no stage 3"));
    }
    let trainable = stage.trainable();
    let mut adam = Adam::from_config(&model.store, cfg, lr);
    let n = exp.data.train.len();
    let bz = cfg.train.batch_size;
    let root = cfg.seed;
    let s = stage.number();

    // Frozen encoder and text branch: their outputs never change this stage.
    let cache: Option<Vec<(Tensor, Tensor)>> = if stage == Stage::S2 || stage == Stage::S3 {
        let m: &Model = model;
        Some(exec::try_map_indexed(n, mode, |i| m.semantics_values(&exp.data.train[i], &exp.provider))?)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let tau = if adaptive {
            Some(stage.anneal_tau(sc.tau_init.unwrap_or(1.0), sc.tau_decay.unwrap_or(1.0), epoch)?)
        } else {
            None
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng2(root, &format!("shuffle-s{s}"), epoch as u64, 0));
        let (mut sum_total, mut sum_task, mut sum_bits, mut correct, mut snr_sum, mut batches) = (0.0, 0.0, 0.0, 0usize, 0.0, 0usize);
        for batch in order.chunks(bz) {
            let step = adam.step;
            let snr_db = match cfg.train.fixed_snr {
                Some(v) => v,
                None => seed::rng2(root, &format!("snr-s{s}"), step, 0).random_range(cfg.train.snr_min..=cfg.train.snr_max),
            };
            let channel = exp.channel(snr_db);
            let tx = training_transmission(stage, exp.fixed.as_ref(), tau.unwrap_or(1.0));
            let m: &Model = model;
            let stats = exec::try_map_indexed(batch.len(), mode, |j| -> Result<SampleStats> {
                let idx = batch[j];
                let task = &exp.data.train[idx];
                let mut t = Tape::with_params(&m.store, trainable);
                let (y_v, y_q) = match &cache {
                    Some(c) => (t.constant(c[idx].0.clone()), t.constant(c[idx].1.clone())),
                    None => m.semantics(&mut t, task, &exp.provider)?,
                };
                let mut rng = seed::rng2(root, &format!("sample-s{s}"), step, j as u64);
                let f = m.forward(&mut t, y_v, y_q, task, tx, &channel, lambda, &mut rng)?;
                t.backward(f.loss)?;
                Ok(SampleStats {
                    grads: t.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect(),
                    loss_total: f.loss_total,
                    loss_task: f.loss_task,
                    rate_bits: f.rate_bits,
                    correct: f.correct,
                })
            })?;
            let mut grads: Vec<(ParamId, Vec<f64>)> = Vec::new();
            for st in &stats {
                if grads.is_empty() {
                    grads = st.grads.clone();
                    continue;
                }
                for ((ia, a), (ib, b)) in grads.iter_mut().zip(&st.grads) {
                    debug_assert_eq!(ia, ib);
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
            let inv = 1.0 / stats.len() as f64;
            grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|x| *x *= inv);
            clip_global_norm(&mut grads, cfg.train.grad_clip);
            adam.update(&mut model.store, &grads);
            for st in &stats {
                sum_total += st.loss_total;
                sum_task += st.loss_task;
                sum_bits += st.rate_bits;
                correct += st.correct as usize;
            }
            snr_sum += snr_db;
            batches += 1;
        }
        let nf = n as f64;
        let sends = stage != Stage::S1;
        let mean_bits = sum_bits / nf;
        let l_v = cfg.model.l_v() as f64;
        let bcr = mean_bits / 2.0 / (l_v * 3.0 * (cfg.channel.frame_width * cfg.channel.frame_height) as f64);
        rows.push(MetricRow {
            stage: s,
            epoch,
            step: adam.step,
            loss_total: sum_total / nf,
            loss_task: sum_task / nf,
            loss_rate_bits: sends.then_some(mean_bits),
            accuracy: correct as f64 / nf,
            tau,
            snr_db: sends.then_some(snr_sum / batches as f64),
            mean_k: sends.then_some(mean_bits / l_v),
            bcr: sends.then_some(bcr),
        });
    }
    Ok(rows)
}

pub fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join("checkpoints").join(format!("stage{}.ckpt", stage.number()))
}

/// Stage recorded in a checkpoint's metadata.
pub fn checkpoint_stage(ckpt: &Checkpoint) -> Result<Stage> {
    let n = ckpt
        .metadata
        .split(';')
        .find_map(|kv| kv.strip_prefix("stage="))
        .and_then(|v| v.parse::<u8>().ok())
        .ok_or_else(|| Error::Checkpoint(format!("metadata {:?} names no stage", ckpt.metadata)))?;
    Stage::from_number(n)
}

pub fn checkpoint_metadata(cfg: &ExperimentConfig, stage: Stage) -> String {
    let t = &cfg.train;
    let fixed = t.fixed_total_k.map_or_else(|| "none".to_string(), |k| k.to_string());
    format!(
        "stage={};optimizer=adam;beta1={};beta2={};eps={};grad_clip={};fixed_total_k={}",
        stage.number(),
        t.adam_beta1,
        t.adam_beta2,
        t.adam_eps,
        t.grad_clip,
        fixed
    )
}

/// The most advanced stage checkpoint in `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Option<(Stage, PathBuf)> {
    Stage::ALL
        .iter()
        .rev()
        .map(|&s| (s, checkpoint_path(out, s)))
        .find(|(_, p)| p.exists())
}

fn metrics_stage_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("metrics_stage{}.csv", stage.number()))
}

/// Outcome of [`run_training`].
pub struct TrainingRun {
    pub model: Model,
    pub stage: Stage,
    pub metrics: Vec<MetricRow>,
    /// Stages restored from checkpoints instead of trained.
    pub resumed: Vec<Stage>,
}

/// Runs the configured stages in order, writing a checkpoint and a metrics
/// file after each one. Stages whose checkpoint already exists in `out` are
/// loaded instead of retrained, unless `force` is set.
pub fn run_training(exp: &Experiment, out: &Path, force: bool, mode: ExecMode) -> Result<TrainingRun> {
    let cfg = &exp.cfg;
    let ckpt_dir = out.join("checkpoints");
    if force && ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    }
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let stages = cfg.train.stages.iter().map(|&n| Stage::from_number(n)).collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(cfg)?;
    let mut last = None;
    let mut resumed = Vec::new();
    // restore the most advanced checkpoint at or before the last planned stage
    let target = *stages.last().ok_or_else(|| Error::input("no stages to run"))?;
    if let Some((s, path)) = latest_checkpoint(out).filter(|(s, _)| *s <= target) {
        Checkpoint::load(&path)?.apply_to(&mut model.store)?;
        last = Some(s);
    }
    let mut metrics = Vec::new();
    for &stage in &stages {
        if last.is_some_and(|l| stage <= l) {
            let p = metrics_stage_path(out, stage);
            if p.exists() {
                metrics.extend(read_metrics(&p)?);
            }
            resumed.push(stage);
            continue;
        }
        let rows = train_stage(&mut model, exp, stage, mode)?;
        write_metrics(&metrics_stage_path(out, stage), &rows)?;
        Checkpoint::from_store(&model.store, cfg.seed, checkpoint_metadata(cfg, stage)).save(&checkpoint_path(out, stage))?;
        metrics.extend(rows);
        last = Some(stage);
    }
    write_metrics(&out.join("metrics.csv"), &metrics)?;
    Ok(TrainingRun {
        model,
        stage: last.unwrap_or(target),
        metrics,
        resumed,
    })
}

/// Rebuilds a model from a checkpoint.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<(Model, Stage)> {
    let ckpt = Checkpoint::load(path)?;
    let stage = checkpoint_stage(&ckpt)?;
    let mut model = Model::new(cfg)?;
    ckpt.apply_to(&mut model.store)?;
    Ok((model, stage))
}

/// The transmission a model trained up to `stage` is evaluated with.
pub fn eval_transmission(stage: Stage, fixed: Option<&MaskAndSideInfo>) -> Transmission<'_> {
    match (stage, fixed) {
        (Stage::S1, _) => Transmission::Lossless,
        (_, Some(m)) => Transmission::Fixed(m),
        (Stage::S2, None) => Transmission::Full,
        _ => Transmission::Argmax,
    }
}

/// One evaluated sample: correctness and the allocation it used.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub correct: bool,
    pub counts: Option<Vec<usize>>,
}

/// Runs `draws` noise realizations of every task at every SNR. Result is
/// `[snr][task][draw]`.
pub fn evaluate_samples(
    model: &Model,
    exp: &Experiment,
    stage: Stage,
    tasks: &[QaTask],
    snrs: &[f64],
    kind: ChannelKind,
    sigma_h: f64,
    draws: usize,
    mode: ExecMode,
) -> Result<Vec<Vec<Vec<EvalSample>>>> {
    let tx = eval_transmission(stage, exp.fixed.as_ref());
    let root = exp.cfg.seed;
    let per_task = exec::try_map_indexed(tasks.len(), mode, |i| -> Result<Vec<Vec<EvalSample>>> {
        let task = &tasks[i];
        let (yv, yq) = model.semantics_values(task, &exp.provider)?;
        snrs.iter()
            .map(|&snr_db| {
                let channel = ChannelConfig { kind, snr_db, sigma_h };
                (0..draws)
                    .map(|draw| {
                        let mut t = Tape::with_params(&model.store, GroupSet::NONE);
                        let (y_v, y_q) = (t.constant(yv.clone()), t.constant(yq.clone()));
                        let label = format!("eval-{}-{}", kind.label(), snr_db);
                        let mut rng = seed::rng2(root, &label, task.id as u64, draw as u64);
                        let f = model.forward(&mut t, y_v, y_q, task, tx, &channel, 0.0, &mut rng)?;
                        Ok(EvalSample {
                            correct: f.correct,
                            counts: f.side.map(|s| s.counts().to_vec()),
                        })
                    })
                    .collect()
            })
            .collect()
    })?;
    Ok((0..snrs.len())
        .map(|k| per_task.iter().map(|t| t[k].clone()).collect())
        .collect())
}

/// One row of an evaluation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub trials: usize,
    pub accuracy: f64,
    /// 95% normal-approximation half-width of `accuracy`.
    pub ci_half_width: f64,
    pub mean_sum_k: f64,
    pub mean_bcr: f64,
}

/// Accuracy, mean `Σ k_i` and mean BCR per SNR.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_sweep(
    model: &Model,
    exp: &Experiment,
    stage: Stage,
    tasks: &[QaTask],
    snrs: &[f64],
    kind: ChannelKind,
    sigma_h: f64,
    draws: usize,
    mode: ExecMode,
) -> Result<Vec<EvalRow>> {
    let samples = evaluate_samples(model, exp, stage, tasks, snrs, kind, sigma_h, draws, mode)?;
    let (l_v, d) = (exp.cfg.model.l_v(), exp.cfg.model.d);
    snrs.iter()
        .zip(samples)
        .map(|(&snr_db, per_task)| {
            let flat: Vec<&EvalSample> = per_task.iter().flatten().collect();
            let n = flat.len();
            if n == 0 {
                return Err(Error::input("evaluation needs at least one task and one draw"));
            }
            let p = flat.iter().filter(|s| s.correct).count() as f64 / n as f64;
            let (mut sum_k, mut sum_bcr) = (0.0, 0.0);
            for s in &flat {
                if let Some(c) = &s.counts {
                    let side = MaskAndSideInfo::from_counts(c.clone(), d)?;
                    debug_assert_eq!(side.l_v(), l_v);
                    sum_k += side.rate_loss() as f64;
                    sum_bcr += compute_bcr(&side, exp.frame())?.bcr;
                }
            }
            Ok(EvalRow {
                channel: kind,
                snr_db,
                trials: n,
                accuracy: p,
                ci_half_width: 1.96 * (p * (1.0 - p) / n as f64).sqrt(),
                mean_sum_k: sum_k / n as f64,
                mean_bcr: sum_bcr / n as f64,
            })
        })
        .collect()
}

pub fn write_eval(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["channel", "snr_db", "trials", "accuracy", "ci_half_width", "mean_sum_k", "mean_bcr"])?;
    for r in rows {
        w.write_record([
            r.channel.label().to_string(),
            r.snr_db.to_string(),
            r.trials.to_string(),
            r.accuracy.to_string(),
            r.ci_half_width.to_string(),
            r.mean_sum_k.to_string(),
            r.mean_bcr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-SNR, per-token allocation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocRow {
    pub snr_db: f64,
    pub token: usize,
    pub mean_k: f64,
    /// Occurrences of each candidate rate `2, 4, …, d`.
    pub histogram: Vec<usize>,
}

/// Allocation statistics of every token at every SNR.
pub fn allocation_report(
    model: &Model,
    exp: &Experiment,
    stage: Stage,
    tasks: &[QaTask],
    snrs: &[f64],
    draws: usize,
    mode: ExecMode,
) -> Result<Vec<AllocRow>> {
    let ch = &exp.cfg.channel;
    let samples = evaluate_samples(model, exp, stage, tasks, snrs, ch.kind, ch.sigma_h, draws, mode)?;
    let rates = model.codec.rates.rates().to_vec();
    let l_v = exp.cfg.model.l_v();
    let mut rows = Vec::new();
    for (&snr_db, per_task) in snrs.iter().zip(&samples) {
        let counts: Vec<&Vec<usize>> = per_task.iter().flatten().filter_map(|s| s.counts.as_ref()).collect();
        if counts.is_empty() {
            return Err(Error::input("a lossless model has no allocation to report"));
        }
        for token in 0..l_v {
            let mut histogram = vec![0; rates.len()];
            let mut sum = 0.0;
            for c in &counts {
                let k = c[token];
                sum += k as f64;
                histogram[rates.iter().position(|&r| r == k).expect("counts are candidate rates")] += 1;
            }
            rows.push(AllocRow {
                snr_db,
                token,
                mean_k: sum / counts.len() as f64,
                histogram,
            });
        }
    }
    Ok(rows)
}

pub fn write_alloc(path: &Path, rows: &[AllocRow], rates: &[usize]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["snr_db".to_string(), "token".to_string(), "mean_k".to_string()];
    header.extend(rates.iter().map(|k| format!("n_k{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.snr_db.to_string(), r.token.to_string(), r.mean_k.to_string()];
        rec.extend(r.histogram.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Text table: mean complex symbols per token, one column per SNR.
pub fn render_alloc_table(rows: &[AllocRow], snrs: &[f64]) -> String {
    let mut s = String::from("token");
    for snr in snrs {
        s.push_str(&format!("  {:>9}", format!("{snr} dB")));
    }
    s.push('\n');
    let tokens = rows.iter().map(|r| r.token + 1).max().unwrap_or(0);
    let mut totals = vec![0.0; snrs.len()];
    for token in 0..tokens {
        s.push_str(&format!("{token:>5}"));
        for (j, snr) in snrs.iter().enumerate() {
            let r = rows.iter().find(|r| r.token == token && r.snr_db == *snr).expect("row per token and SNR");
            totals[j] += r.mean_k / 2.0;
            s.push_str(&format!("  {:>9.2}", r.mean_k / 2.0));
        }
        s.push('\n');
    }
    s.push_str("total");
    for t in totals {
        s.push_str(&format!("  {t:>9.2}"));
    }
    s.push('\n');
    s
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Test tasks selected by `eval.tasks`.
pub fn eval_tasks(exp: &Experiment) -> &[QaTask] {
    let n = exp.cfg.eval.tasks.unwrap_or(exp.data.test.len()).min(exp.data.test.len());
    &exp.data.test[..n]
}
