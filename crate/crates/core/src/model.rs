//! The assembled transceiver and its per-sample forward pass.

use num_complex::Complex64;

use crate::channel::{self, ChannelConfig, ChannelTrace};
use crate::config::ExperimentConfig;
use crate::data::{FeatureProvider, QaTask};
use crate::encoder::SemanticEncoder;
use crate::error::{Error, Result};
use crate::fuser::{task_loss, Fuser, TextEncoder};
use crate::jsc::{JscCodec, Selection};
use crate::params::{GroupSet, ParamGroup, ParamStore};
use crate::rate::MaskAndSideInfo;
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

/// Progressive training stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// Semantic encoder and fuser, lossless link.
    S1,
    /// Codec at a fixed rate; encoder, fuser and predictors frozen.
    S2,
    /// Adds the rate predictors.
    S3,
    /// Everything.
    S4,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::S1, Stage::S2, Stage::S3, Stage::S4];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1..=4 => Ok(Stage::ALL[n as usize - 1]),
            _ => Err(Error::input(format!("no stage {n}"))),
        }
    }

    pub fn trainable(self) -> GroupSet {
        use ParamGroup::*;
        let codec = GroupSet::of(&[JscEncoder, JscDecoder, SharedRate]);
        match self {
            Stage::S1 => GroupSet::of(&[Semantic, Fuser]),
            Stage::S2 => codec,
            Stage::S3 => codec.with(Predictor),
            Stage::S4 => GroupSet::all(),
        }
    }

    pub fn adaptive(self) -> bool {
        self >= Stage::S3
    }

    /// `τ = τ₀ · decayᵉᵖᵒᶜʰ`; only the adaptive stages sample.
    pub fn anneal_tau(self, tau_init: f64, tau_decay: f64, epoch: usize) -> Result<f64> {
        if !self.adaptive() {
            return Err(Error::contract(format!("stage {} has no temperature", self.number())));
        }
        Ok(tau_init * tau_decay.powi(epoch as i32))
    }
}

/// How video semantics reach the fuser.
#[derive(Clone, Copy, Debug)]
pub enum Transmission<'a> {
    /// Straight to the fuser, no codec and no channel.
    Lossless,
    /// Every channel of every token.
    Full,
    Fixed(&'a MaskAndSideInfo),
    /// Gumbel straight-through sampling at temperature `tau`.
    Sample { tau: f64 },
    /// Most likely rate per token.
    Argmax,
}

pub struct Model {
    pub store: ParamStore,
    pub encoder: SemanticEncoder,
    pub text: TextEncoder,
    pub codec: JscCodec,
    pub fuser: Fuser,
}

/// Result of one forward pass.
pub struct Forward {
    /// Differentiable objective.
    pub loss: Var,
    pub loss_task: f64,
    /// `Σ k_i` of the sent allocation; 0 on the lossless link.
    pub rate_bits: f64,
    pub loss_total: f64,
    pub scores: Var,
    pub answer: usize,
    pub correct: bool,
    pub side: Option<MaskAndSideInfo>,
    pub trace: Option<ChannelTrace>,
}

impl Model {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let m = &cfg.model;
        let mut rng = seed::rng(cfg.seed, "init", 0);
        let mut store = ParamStore::new();
        let hidden = m.ffn_mult * m.d;
        let encoder = SemanticEncoder::new(&mut store, &m.encoder(), &mut rng)?;
        let codec = JscCodec::new(&mut store, &m.jsc(cfg.channel.snr_inputs()), &mut rng)?;
        let text = TextEncoder::new(&mut store, m.d, m.heads, m.text_blocks, hidden, &mut rng)?;
        let fuser = Fuser::new(&mut store, m.d, m.heads, m.refine_blocks, hidden, &mut rng)?;
        Ok(Model {
            store,
            encoder,
            text,
            codec,
            fuser,
        })
    }

    /// `Y_v` and `Y_q` of one task.
    pub fn semantics(&self, t: &mut Tape<'_>, task: &QaTask, provider: &dyn FeatureProvider) -> Result<(Var, Var)> {
        let video = provider.video(task.class, task.seed)?;
        let y_v = self.encoder.encode(t, &video)?;
        let y_q = self.text.encode(t, &task.tokens, &task.pad_mask)?;
        Ok((y_v, y_q))
    }

    /// Values of `Y_v` and `Y_q` without recording gradients.
    pub fn semantics_values(&self, task: &QaTask, provider: &dyn FeatureProvider) -> Result<(Tensor, Tensor)> {
        let mut t = Tape::with_params(&self.store, GroupSet::NONE);
        let (y_v, y_q) = self.semantics(&mut t, task, provider)?;
        Ok((t.value(y_v).clone(), t.value(y_q).clone()))
    }

    /// SNR values fed to SNR-adaptive predictors for a given block gain.
    fn predictor_snr(&self, channel: &ChannelConfig, gain: Complex64) -> Vec<f64> {
        match self.codec.cfg.predictor_snr_inputs() {
            0 => vec![],
            1 => vec![channel.snr_db],
            _ => vec![channel.snr_db, channel::instantaneous_snr(channel.snr_db, gain)],
        }
    }

    /// Encode, channel, decode, fuse, predict and score one task, in that
    /// order. `lambda` weights the rate term when sampling.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: rand::Rng + ?Sized>(
        &self,
        t: &mut Tape<'_>,
        y_v: Var,
        y_q: Var,
        task: &QaTask,
        tx: Transmission<'_>,
        channel: &ChannelConfig,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Forward> {
        let (y_v_hat, side, trace, rate_term) = match tx {
            Transmission::Lossless => (y_v, None, None, None),
            _ => {
                let gain = channel::draw_gain(channel, rng);
                let snr = self.predictor_snr(channel, gain);
                let selection = match tx {
                    Transmission::Full => Selection::Full,
                    Transmission::Fixed(m) => Selection::Fixed(m),
                    Transmission::Sample { tau } => Selection::Sample { tau, snr_db: &snr },
                    _ => Selection::Argmax { snr_db: &snr },
                };
                let enc = self.codec.encode(t, y_v, selection, rng)?;
                let (s_hat, trace) = channel::pass_through_with_gain(t, enc.s_v, &enc.side, channel, gain, rng)?;
                let y = self.codec.decode(t, s_hat, &enc.side)?;
                (y, Some(enc.side), Some(trace), enc.diagnostics.rate_term)
            }
        };
        let y_qv = self.fuser.fuse(t, y_v_hat, y_q, &task.pad_mask)?;
        let pred = self.fuser.predict(t, y_qv, y_q, &task.pad_mask)?;
        let task_var = task_loss(t, pred.scores, task.label)?;
        let loss_task = t.value(task_var).data()[0];
        let rate_bits = side.as_ref().map_or(0.0, |s| s.rate_loss() as f64);
        let loss = match rate_term {
            Some(r) => stage_loss(t, Stage::S3, task_var, Some(r), lambda)?,
            None => task_var,
        };
        let loss_total = t.value(loss).data()[0];
        if !loss_total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss on task {}", task.id)));
        }
        Ok(Forward {
            loss,
            loss_task,
            rate_bits,
            loss_total,
            scores: pred.scores,
            answer: pred.answer,
            correct: pred.answer == task.label,
            side,
            trace,
        })
    }
}

/// The transmission a stage trains with.
pub fn training_transmission(stage: Stage, fixed: Option<&MaskAndSideInfo>, tau: f64) -> Transmission<'_> {
    match (stage, fixed) {
        (Stage::S1, _) => Transmission::Lossless,
        (_, Some(m)) => Transmission::Fixed(m),
        (Stage::S2, None) => Transmission::Full,
        _ => Transmission::Sample { tau },
    }
}

/// `L_task` in stages 1–2, `L_task + λ·L_rate` in stages 3–4.
pub fn stage_loss(t: &mut Tape<'_>, stage: Stage, task: Var, rate: Option<Var>, lambda: f64) -> Result<Var> {
    if !stage.adaptive() {
        return Ok(task);
    }
    let rate = rate.ok_or_else(|| Error::contract("adaptive stages need a rate term"))?;
    let rate = t.reshape(rate, t.shape(task).to_vec().as_slice())?;
    let rate = t.scale(rate, lambda);
    t.add(task, rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, SyntheticVideoProvider};

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model.l_c = 2;
        c.model.l_f = 2;
        c.model.objects = 3;
        c.model.feature_dim = 8;
        c.model.d = 8;
        c.model.heads = 2;
        c.model.jsc_layers = 2;
        c.model.text_blocks = 1;
        c.model.refine_blocks = 1;
        c.model.temporal_blocks = 1;
        c.data.n_train = 8;
        c.data.n_test = 4;
        c.data.total_frames = 8;
        c
    }

    fn setup() -> (ExperimentConfig, Model, Dataset, SyntheticVideoProvider) {
        let c = tiny();
        let model = Model::new(&c).unwrap();
        let data = Dataset::generate(c.seed, &c.data).unwrap();
        let provider = SyntheticVideoProvider::new(c.seed, c.model.encoder().geometry(), &c.data).unwrap();
        (c, model, data, provider)
    }

    #[test]
    fn tau_schedule() {
        assert_eq!(Stage::S3.anneal_tau(5.0, 0.9, 0).unwrap(), 5.0);
        assert!((Stage::S3.anneal_tau(5.0, 0.9, 2).unwrap() - 4.05).abs() < 1e-12);
        assert!((Stage::S4.anneal_tau(1.0, 0.95, 1).unwrap() - 0.95).abs() < 1e-12);
        assert!(matches!(Stage::S1.anneal_tau(5.0, 0.9, 0), Err(Error::Contract(_))));
        assert!(matches!(Stage::S2.anneal_tau(5.0, 0.9, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn stage_groups() {
        use ParamGroup::*;
        assert!(!Stage::S2.trainable().contains(Semantic));
        assert!(!Stage::S2.trainable().contains(Fuser));
        assert!(!Stage::S2.trainable().contains(Predictor));
        assert!(Stage::S2.trainable().contains(SharedRate));
        assert!(Stage::S3.trainable().contains(Predictor));
        assert!(!Stage::S3.trainable().contains(Semantic));
        assert_eq!(Stage::S4.trainable(), GroupSet::all());
    }

    #[test]
    fn stage_one_never_touches_the_channel() {
        let (_, model, data, provider) = setup();
        let mut t = Tape::with_params(&model.store, Stage::S1.trainable());
        let (y_v, y_q) = model.semantics(&mut t, &data.train[0], &provider).unwrap();
        let mut rng = seed::rng(1, "t", 0);
        let f = model
            .forward(&mut t, y_v, y_q, &data.train[0], Transmission::Lossless, &ChannelConfig::awgn(0.0), 0.0, &mut rng)
            .unwrap();
        assert!(f.trace.is_none() && f.side.is_none());
        assert_eq!(f.rate_bits, 0.0);
    }

    #[test]
    fn stage_two_sends_every_channel() {
        let (c, model, data, provider) = setup();
        let mut t = Tape::with_params(&model.store, Stage::S2.trainable());
        let (y_v, y_q) = model.semantics(&mut t, &data.train[1], &provider).unwrap();
        let mut rng = seed::rng(1, "t", 0);
        let tx = training_transmission(Stage::S2, None, 1.0);
        let f = model.forward(&mut t, y_v, y_q, &data.train[1], tx, &ChannelConfig::awgn(5.0), 0.0, &mut rng).unwrap();
        let side = f.side.unwrap();
        assert!(side.counts().iter().all(|&k| k == c.model.d));
        assert!(side.mask().data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn replay_gives_identical_scores() {
        let (_, model, data, provider) = setup();
        let run = || {
            let mut t = Tape::with_params(&model.store, Stage::S4.trainable());
            let (y_v, y_q) = model.semantics(&mut t, &data.train[2], &provider).unwrap();
            let mut rng = seed::rng(9, "replay", 0);
            let f = model
                .forward(&mut t, y_v, y_q, &data.train[2], Transmission::Sample { tau: 2.0 }, &ChannelConfig::awgn(0.0), 1e-3, &mut rng)
                .unwrap();
            t.value(f.scores).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adaptive_loss_decomposes() {
        let (_, model, data, provider) = setup();
        let lambda = 3e-3;
        for i in 0..4 {
            let mut t = Tape::with_params(&model.store, Stage::S3.trainable());
            let (y_v, y_q) = model.semantics(&mut t, &data.train[i], &provider).unwrap();
            let mut rng = seed::rng(4, "decomp", i as u64);
            let f = model
                .forward(&mut t, y_v, y_q, &data.train[i], Transmission::Sample { tau: 5.0 }, &ChannelConfig::awgn(0.0), lambda, &mut rng)
                .unwrap();
            assert!((f.loss_total - (f.loss_task + lambda * f.rate_bits)).abs() <= 1e-12);
            assert!(f.rate_bits >= 2.0 * 4.0);
        }
    }

    #[test]
    fn stage_loss_branches() {
        let mut t = Tape::new();
        let task = t.leaf(Tensor::vector(vec![0.7]).unwrap());
        let rate = t.leaf(Tensor::scalar(40.0));
        let l1 = stage_loss(&mut t, Stage::S1, task, None, 1.0).unwrap();
        assert_eq!(t.value(l1).data(), &[0.7]);
        let l3 = stage_loss(&mut t, Stage::S3, task, Some(rate), 0.0).unwrap();
        assert_eq!(t.value(l3).data(), &[0.7]);
        let l4 = stage_loss(&mut t, Stage::S4, task, Some(rate), 0.01).unwrap();
        assert!((t.value(l4).data()[0] - 1.1).abs() < 1e-12);
        assert!(stage_loss(&mut t, Stage::S3, task, None, 0.01).is_err());
    }
}
