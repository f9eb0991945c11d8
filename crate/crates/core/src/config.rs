//! Experiment configuration: one TOML file with a section per concern.
//! Unknown keys are rejected; every key has a default.
//!
//! ```toml
//! seed = 7
//!
//! [data]      # n_train, n_test, classes, total_frames, drift_scale, offset_std, noise_std
//! [model]     # l_c, l_f, objects, feature_dim, d, heads, temporal_blocks, ffn_mult,
//!             # jsc_layers, text_blocks, refine_blocks, rate_mode = "content" | "snr"
//! [channel]   # kind = "awgn" | "rayleigh", sigma_h, frame_width, frame_height, fading_snr_input
//! [train]     # batch_size, snr_min, snr_max, fixed_snr, grad_clip, adam_beta1, adam_beta2,
//!             # adam_eps, schedule = "desk" | "paper", stages, fixed_total_k, parallel
//! [stage1]    # epochs, lr  (stage2 likewise; stage3/stage4 add lambda, tau_init, tau_decay)
//! [eval]      # snrs, noise_draws, tasks
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelKind;
use crate::data::DataConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::jsc::{JscConfig, RateMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub l_c: usize,
    pub l_f: usize,
    pub objects: usize,
    pub feature_dim: usize,
    pub d: usize,
    pub heads: usize,
    pub temporal_blocks: usize,
    pub ffn_mult: usize,
    pub jsc_layers: usize,
    pub text_blocks: usize,
    pub refine_blocks: usize,
    pub rate_mode: RateMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        ModelConfig {
            l_c: e.l_c,
            l_f: e.l_f,
            objects: e.objects,
            feature_dim: e.feature_dim,
            d: e.d,
            heads: e.heads,
            temporal_blocks: e.temporal_blocks,
            ffn_mult: e.ffn_mult,
            jsc_layers: 4,
            text_blocks: 2,
            refine_blocks: 2,
            rate_mode: RateMode::Content,
        }
    }
}

impl ModelConfig {
    pub fn l_v(&self) -> usize {
        self.l_c * self.l_f
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            l_c: self.l_c,
            l_f: self.l_f,
            objects: self.objects,
            feature_dim: self.feature_dim,
            d: self.d,
            heads: self.heads,
            temporal_blocks: self.temporal_blocks,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn jsc(&self, snr_inputs: usize) -> JscConfig {
        JscConfig {
            l_v: self.l_v(),
            d: self.d,
            layers: self.jsc_layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            rate_mode: self.rate_mode,
            snr_inputs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    pub sigma_h: f64,
    pub frame_width: usize,
    pub frame_height: usize,
    /// With fading, also feed the instantaneous SNR `snr + 10·log₁₀|h|²` to
    /// SNR-adaptive predictors.
    pub fading_snr_input: bool,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            kind: ChannelKind::Awgn,
            sigma_h: 1.0,
            frame_width: 167,
            frame_height: 167,
            fading_snr_input: false,
        }
    }
}

impl ChannelSection {
    /// SNR scalars fed to SNR-adaptive predictors.
    pub fn snr_inputs(&self) -> usize {
        if self.kind == ChannelKind::Rayleigh && self.fading_snr_input {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Short runs sized for a single laptop core.
    Desk,
    /// Epoch counts and learning rates of the original four-stage recipe.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub snr_min: f64,
    pub snr_max: f64,
    /// Overrides the mixed-SNR sampling when set.
    pub fixed_snr: Option<f64>,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub schedule: Schedule,
    /// Stages to run, in order, from 1..=4.
    pub stages: Vec<u8>,
    /// Trains a fixed-rate baseline: every sample keeps this many channels in
    /// total, spread evenly over tokens. Only stages 1 and 2 apply.
    pub fixed_total_k: Option<usize>,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            snr_min: -5.0,
            snr_max: 15.0,
            fixed_snr: None,
            grad_clip: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            schedule: Schedule::Desk,
            stages: vec![1, 2, 3, 4],
            fixed_total_k: None,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn exec_mode(&self) -> ExecMode {
        if self.parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Per-stage settings; absent values come from the schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub tau_init: Option<f64>,
    pub tau_decay: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub snrs: Vec<f64>,
    pub noise_draws: usize,
    /// Test tasks to evaluate; all when absent.
    pub tasks: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snrs: vec![-5.0, 0.0, 5.0, 10.0],
            noise_draws: 5,
            tasks: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub channel: ChannelSection,
    pub train: TrainConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub stage4: StageConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            channel: ChannelSection::default(),
            train: TrainConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            stage3: StageConfig::default(),
            stage4: StageConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// `(epochs, lr, lambda, tau_init, tau_decay)` defaults per schedule and stage.
fn stage_defaults(schedule: Schedule, stage: u8) -> (usize, f64, f64, f64, f64) {
    let (epochs, lr) = match (schedule, stage) {
        (Schedule::Desk, 1) => (10, 2e-3),
        (Schedule::Desk, 2) => (10, 1e-3),
        (Schedule::Desk, 3) => (10, 1e-3),
        (Schedule::Desk, _) => (5, 5e-4),
        (Schedule::Paper, 1) => (20, 1e-5),
        (Schedule::Paper, 2) => (20, 5e-6),
        (Schedule::Paper, 3) => (20, 5e-6),
        (Schedule::Paper, _) => (10, 2e-6),
    };
    let (tau_init, tau_decay) = if stage == 4 { (1.0, 0.95) } else { (5.0, 0.9) };
    (epochs, lr, 1.5e-4, tau_init, tau_decay)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Config {
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn invalid(message: impl Into<String>) -> Error {
        Error::Config {
            line: 0,
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder().validate().map_err(|e| Self::invalid(e.to_string()))?;
        if self.model.jsc_layers == 0 {
            return Err(Self::invalid("model.jsc_layers must be at least 1"));
        }
        if self.train.snr_min > self.train.snr_max {
            return Err(Self::invalid("train.snr_min must not exceed train.snr_max"));
        }
        if self.train.batch_size == 0 {
            return Err(Self::invalid("train.batch_size must be positive"));
        }
        if self.train.stages.iter().any(|s| !(1..=4).contains(s)) || !self.train.stages.windows(2).all(|w| w[0] < w[1]) {
            return Err(Self::invalid("train.stages must be increasing values in 1..=4"));
        }
        if self.train.fixed_total_k.is_some() && self.train.stages.contains(&3) {
            return Err(Self::invalid("a fixed-rate baseline (train.fixed_total_k) has no rate predictors to train in stage 3"));
        }
        if !(self.channel.sigma_h > 0.0) {
            return Err(Self::invalid("channel.sigma_h must be positive"));
        }
        if self.data.n_train == 0 || self.data.total_frames < self.model.l_v() {
            return Err(Self::invalid("data.n_train must be positive and data.total_frames ≥ l_c·l_f"));
        }
        Ok(())
    }

    /// Fills every unset stage value from the schedule.
    pub fn resolved(mut self) -> Self {
        let schedule = self.train.schedule;
        for (i, st) in [&mut self.stage1, &mut self.stage2, &mut self.stage3, &mut self.stage4]
            .into_iter()
            .enumerate()
        {
            let (epochs, lr, lambda, tau_init, tau_decay) = stage_defaults(schedule, i as u8 + 1);
            st.epochs.get_or_insert(epochs);
            st.lr.get_or_insert(lr);
            if i >= 2 {
                st.lambda.get_or_insert(lambda);
                st.tau_init.get_or_insert(tau_init);
                st.tau_decay.get_or_insert(tau_decay);
            }
        }
        self
    }

    pub fn stage(&self, stage: u8) -> &StageConfig {
        match stage {
            1 => &self.stage1,
            2 => &self.stage2,
            3 => &self.stage3,
            _ => &self.stage4,
        }
    }

    /// TOML text that parses back to this configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.stage1.epochs, Some(10));
        assert_eq!(c.stage3.tau_init, Some(5.0));
        assert_eq!(c.stage4.tau_decay, Some(0.95));
        assert_eq!(c.stage1.lambda, None);
    }

    #[test]
    fn paper_schedule() {
        let c = ExperimentConfig::parse("[train]\nschedule = \"paper\"\n[stage2]\nepochs = 3\n").unwrap();
        assert_eq!(c.stage1.epochs, Some(20));
        assert_eq!(c.stage1.lr, Some(1e-5));
        assert_eq!(c.stage2.epochs, Some(3));
        assert_eq!(c.stage4.lr, Some(2e-6));
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let err = ExperimentConfig::parse("seed = 1\n\n[model]\nd = 32\nwidth = 3\n").unwrap_err();
        match err {
            Error::Config { line, message } => {
                assert_eq!(line, 5, "{message}");
                assert!(message.contains("width"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::parse("[model]\nd = 24\n").is_err());
        assert!(ExperimentConfig::parse("[train]\nsnr_min = 5.0\nsnr_max = 0.0\n").is_err());
        assert!(ExperimentConfig::parse("[train]\nstages = [2, 1]\n").is_err());
        assert!(ExperimentConfig::parse("[channel]\nkind = \"fiber\"\n").is_err());
    }

    #[test]
    fn echo_roundtrip() {
        let c = ExperimentConfig::parse("seed = 3\n[model]\nrate_mode = \"snr\"\n[train]\nfixed_snr = 4.0\n").unwrap();
        let again = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }
}
