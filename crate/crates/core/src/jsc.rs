//! Joint source-channel encoder and decoder built from dual-branch blocks
//! that share one learnable rate embedding, with a rate predictor after
//! every encoder block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DualBranchBlock, INIT_STD};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rate::{self, CandidateRates, GumbelSample, MaskAndSideInfo, RatePredictor};
use crate::tensor::{Tape, Tensor, Var};

/// How the encoder decides per-token bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateMode {
    /// Predictors see only the content.
    Content,
    /// Predictors additionally see the channel SNR.
    Snr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JscConfig {
    pub l_v: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub rate_mode: RateMode,
    /// SNR scalars per token when `rate_mode` is `Snr` (1, or 2 when the
    /// instantaneous fading SNR is supplied alongside the average).
    pub snr_inputs: usize,
}

impl JscConfig {
    pub fn predictor_snr_inputs(&self) -> usize {
        match self.rate_mode {
            RateMode::Content => 0,
            RateMode::Snr => self.snr_inputs,
        }
    }
}

pub struct JscCodec {
    pub cfg: JscConfig,
    pub rates: CandidateRates,
    /// `[l_v × d]`, read by both encoder and decoder.
    pub rate_embedding: ParamId,
    pub enc_blocks: Vec<DualBranchBlock>,
    pub predictors: Vec<RatePredictor>,
    pub dec_blocks: Vec<DualBranchBlock>,
    /// `[d]`
    pub compensation: ParamId,
}

/// How the encoder picks the mask.
pub enum Selection<'a> {
    /// Predictors bypassed; every channel kept.
    Full,
    /// Predictors bypassed; a given allocation.
    Fixed(&'a MaskAndSideInfo),
    /// Gumbel straight-through sampling at temperature `tau` (training).
    Sample { tau: f64, snr_db: &'a [f64] },
    /// Most likely rate per token, no noise (evaluation).
    Argmax { snr_db: &'a [f64] },
}

/// Everything the encoder computed besides its output.
#[derive(Default)]
pub struct EncodeDiagnostics {
    /// Decision scores of every layer, the final one last.
    pub scores: Vec<Var>,
    pub sample: Option<GumbelSample>,
    /// Straight-through selection (value = hard one-hot).
    pub selection: Option<Var>,
    /// `Σ selection · rates`: value `Σ k_i`, gradient of the soft surrogate.
    pub rate_term: Option<Var>,
}

pub struct EncodeOutput {
    /// `y_v^L ⊙ M`
    pub s_v: Var,
    pub side: MaskAndSideInfo,
    pub diagnostics: EncodeDiagnostics,
}

impl JscCodec {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &JscConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::input("the codec needs at least one block"));
        }
        let rates = CandidateRates::new(cfg.d)?;
        let (d, q) = (cfg.d, rates.q());
        let hidden = cfg.ffn_mult * d;
        let rate_embedding = store.add(
            "jsc.rate_embedding",
            ParamGroup::SharedRate,
            Tensor::randn(vec![cfg.l_v, d], INIT_STD, rng)?,
        )?;
        let mut enc_blocks = Vec::new();
        let mut predictors = Vec::new();
        for l in 0..cfg.layers {
            enc_blocks.push(DualBranchBlock::new(
                store,
                &format!("jsc.enc.block{l}"),
                ParamGroup::JscEncoder,
                d,
                cfg.heads,
                hidden,
                rng,
            )?);
            predictors.push(RatePredictor::new(
                store,
                &format!("jsc.enc.pred{l}"),
                d,
                q,
                l + 1 == cfg.layers,
                cfg.predictor_snr_inputs(),
                rng,
            )?);
        }
        let dec_blocks = (0..cfg.layers)
            .map(|l| DualBranchBlock::new(store, &format!("jsc.dec.block{l}"), ParamGroup::JscDecoder, d, cfg.heads, hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let compensation = store.add("jsc.dec.compensation", ParamGroup::JscDecoder, Tensor::zeros(vec![d])?)?;
        Ok(JscCodec {
            cfg: cfg.clone(),
            rates,
            rate_embedding,
            enc_blocks,
            predictors,
            dec_blocks,
            compensation,
        })
    }

    fn check_input(&self, t: &Tape<'_>, y: Var, what: &str) -> Result<()> {
        if t.shape(y) != [self.cfg.l_v, self.cfg.d] {
            return Err(Error::dim(format!(
                "{what} {:?} is not [{} × {}]",
                t.shape(y),
                self.cfg.l_v,
                self.cfg.d
            )));
        }
        Ok(())
    }

    pub fn encode<R: Rng + ?Sized>(
        &self,
        t: &mut Tape<'_>,
        y_v: Var,
        selection: Selection<'_>,
        rng: &mut R,
    ) -> Result<EncodeOutput> {
        self.check_input(t, y_v, "video semantics")?;
        if !t.value(y_v).all_finite() {
            return Err(Error::Numerical("non-finite video semantics".into()));
        }
        let predict = matches!(selection, Selection::Sample { .. } | Selection::Argmax { .. });
        let snr_db: &[f64] = match selection {
            Selection::Sample { snr_db, .. } | Selection::Argmax { snr_db } => snr_db,
            _ => &[],
        };
        let mut rate = t.param(self.rate_embedding);
        let mut feat = y_v;
        let mut diag = EncodeDiagnostics::default();
        let last = self.cfg.layers - 1;
        let mut final_scores = None;
        for (l, block) in self.enc_blocks.iter().enumerate() {
            let out = block.forward(t, rate, feat)?;
            rate = out.rate;
            feat = out.feat;
            if !predict {
                continue;
            }
            let p = &self.predictors[l];
            if l < last {
                let s = p.predict_layer(t, rate, snr_db)?;
                diag.scores.push(s);
            } else {
                let z = p.z_rate(t, rate)?;
                let s = p.aggregate_final(t, z, &diag.scores, snr_db)?;
                diag.scores.push(s);
                final_scores = Some(s);
            }
        }
        let (s_v, side) = match selection {
            Selection::Full | Selection::Fixed(_) => {
                let side = match selection {
                    Selection::Fixed(m) => {
                        if m.l_v() != self.cfg.l_v || m.d() != self.cfg.d {
                            return Err(Error::dim("fixed allocation does not match the codec"));
                        }
                        m.clone()
                    }
                    _ => MaskAndSideInfo::full(self.cfg.l_v, self.cfg.d),
                };
                let mask = t.constant(side.mask());
                (t.mul(feat, mask)?, side)
            }
            Selection::Sample { tau, .. } => {
                let scores = final_scores.expect("predictors ran");
                let sample = rate::gumbel_sample(t, scores, tau, rng)?;
                let sel = rate::straight_through_select(t, &sample)?;
                let side = MaskAndSideInfo::from_selection(&sample.hard, &self.rates)?;
                let mask = rate::mask_from_selection(t, sel, &self.rates)?;
                diag.rate_term = Some(rate::rate_surrogate(t, sel, &self.rates)?);
                diag.selection = Some(sel);
                diag.sample = Some(sample);
                (t.mul(feat, mask)?, side)
            }
            Selection::Argmax { .. } => {
                let scores = final_scores.expect("predictors ran");
                let picks: Vec<usize> = {
                    let v = t.value(scores);
                    (0..v.rows()).map(|i| rate::argmax(v.row(i))).collect()
                };
                let side = MaskAndSideInfo::from_selection(&rate::one_hot_rows(&picks, self.rates.q()), &self.rates)?;
                let mask = t.constant(side.mask());
                (t.mul(feat, mask)?, side)
            }
        };
        Ok(EncodeOutput {
            s_v,
            side,
            diagnostics: diag,
        })
    }

    /// Compensation, then the decoder blocks with the shared rate embedding
    /// as the rate-branch input; returns the feature branch.
    pub fn decode(&self, t: &mut Tape<'_>, s_hat: Var, side: &MaskAndSideInfo) -> Result<Var> {
        self.check_input(t, s_hat, "received semantics")?;
        if side.l_v() != self.cfg.l_v || side.d() != self.cfg.d {
            return Err(Error::Protocol(format!(
                "side information [{} × {}] does not match the codec",
                side.l_v(),
                side.d()
            )));
        }
        let c = t.param(self.compensation);
        let mut feat = rate::compensate(t, s_hat, side, c)?;
        let mut rate = t.param(self.rate_embedding);
        for block in &self.dec_blocks {
            let out = block.forward(t, rate, feat)?;
            rate = out.rate;
            feat = out.feat;
        }
        Ok(feat)
    }
}
