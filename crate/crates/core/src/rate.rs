//! Adaptive bandwidth allocation: rate predictors over the rate branch,
//! Gumbel sampling of one candidate rate per token, straight-through
//! selection, channel masks with their side information, and receiver-side
//! compensation of dropped channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `{2, 4, 8, …, d}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateRates {
    d: usize,
    rates: Vec<usize>,
}

impl CandidateRates {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 || !d.is_power_of_two() {
            return Err(Error::input(format!("channel dimension {d} is not a power of two ≥ 2")));
        }
        let q = d.trailing_zeros() as usize;
        Ok(CandidateRates {
            d,
            rates: (1..=q).map(|j| 1 << j).collect(),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn q(&self) -> usize {
        self.rates.len()
    }

    pub fn rates(&self) -> &[usize] {
        &self.rates
    }

    /// Rates as a `[q × 1]` column.
    pub fn column(&self) -> Tensor {
        Tensor::from_parts(vec![self.q(), 1], self.rates.iter().map(|&r| r as f64).collect())
    }

    /// `[q × d]`; row `j` holds `rates[j]` leading ones.
    pub fn prefix_table(&self) -> Tensor {
        let mut data = vec![0.0; self.q() * self.d];
        for (j, &k) in self.rates.iter().enumerate() {
            data[j * self.d..j * self.d + k].fill(1.0);
        }
        Tensor::from_parts(vec![self.q(), self.d], data)
    }
}

/// Per-token retained channel counts `k_i`, which define the mask
/// `M` (row `i` = `k_i` ones then zeros) and the side information `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskAndSideInfo {
    k: Vec<usize>,
    d: usize,
}

impl MaskAndSideInfo {
    /// Arbitrary even counts in `[2, d]`, e.g. for fixed-rate baselines.
    pub fn from_counts(k: Vec<usize>, d: usize) -> Result<Self> {
        if k.is_empty() {
            return Err(Error::input("empty allocation"));
        }
        if let Some(&bad) = k.iter().find(|&&ki| ki < 2 || ki > d || ki % 2 != 0) {
            return Err(Error::input(format!("retained count {bad} is not an even number in [2, {d}]")));
        }
        Ok(MaskAndSideInfo { k, d })
    }

    pub fn full(l_v: usize, d: usize) -> Self {
        MaskAndSideInfo { k: vec![d; l_v], d }
    }

    /// Spreads an even total as evenly as possible over `l_v` tokens, every
    /// token keeping an even count.
    pub fn uniform_total(total: usize, l_v: usize, d: usize) -> Result<Self> {
        if total % 2 != 0 || total < 2 * l_v || total > d * l_v {
            return Err(Error::input(format!(
                "total {total} cannot be split into {l_v} even counts in [2, {d}]"
            )));
        }
        let pairs = total / 2;
        let k = (0..l_v).map(|i| 2 * (pairs / l_v + usize::from(i < pairs % l_v))).collect();
        Self::from_counts(k, d)
    }

    /// Reads `k_i = rates[argmax row i]` off one-hot rows.
    pub fn from_selection(hard: &Tensor, rates: &CandidateRates) -> Result<Self> {
        if hard.ndim() != 2 || hard.cols() != rates.q() {
            return Err(Error::dim(format!("selection {:?} is not [l_v × {}]", hard.shape(), rates.q())));
        }
        let mut k = Vec::with_capacity(hard.rows());
        for i in 0..hard.rows() {
            let row = hard.row(i);
            let ones = row.iter().filter(|&&x| x == 1.0).count();
            let zeros = row.iter().filter(|&&x| x == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::contract(format!("selection row {i} is not one-hot: {row:?}")));
            }
            k.push(rates.rates()[row.iter().position(|&x| x == 1.0).unwrap()]);
        }
        Ok(MaskAndSideInfo { k, d: rates.d() })
    }

    /// Rebuilds the allocation from side information.
    pub fn from_side_info(b: &[u16], d: usize) -> Result<Self> {
        Self::from_counts(b.iter().map(|&x| x as usize).collect(), d)
    }

    pub fn counts(&self) -> &[usize] {
        &self.k
    }

    pub fn l_v(&self) -> usize {
        self.k.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `[l_v × d]` binary mask.
    pub fn mask(&self) -> Tensor {
        let mut data = vec![0.0; self.k.len() * self.d];
        for (i, &k) in self.k.iter().enumerate() {
            data[i * self.d..i * self.d + k].fill(1.0);
        }
        Tensor::from_parts(vec![self.k.len(), self.d], data)
    }

    /// Side information `b`.
    pub fn side_info(&self) -> Vec<u16> {
        self.k.iter().map(|&k| k as u16).collect()
    }

    /// `b` as sent over the lossless link: `l_v` little-endian `u16`.
    pub fn side_info_bytes(&self) -> Vec<u8> {
        self.side_info().iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn side_info_bits(&self) -> usize {
        16 * self.k.len()
    }

    /// `Σ_i Σ_j M_ij = Σ_i k_i`.
    pub fn rate_loss(&self) -> usize {
        self.k.iter().sum()
    }
}

/// One rate predictor: token-wise local projection, global mean broadcast to
/// every token, optional extra inputs, then `MLP → softmax` over `q` rates.
#[derive(Clone, Debug)]
pub struct RatePredictor {
    pub local: Linear,
    pub hidden: Linear,
    pub out: Linear,
    /// Width of the prior-decision input (`q` for the final predictor, else 0).
    pub prior_inputs: usize,
    /// Number of SNR scalars appended per token.
    pub snr_inputs: usize,
}

/// SNR values enter a predictor as their offset in dB from `SNR_INPUT_CENTER`,
/// unscaled. A unit-range feature is one input against `2d` content inputs and
/// the predictors learned allocations that ignored it.
pub const SNR_INPUT_CENTER: f64 = 5.0;

pub fn snr_feature(snr_db: f64) -> f64 {
    snr_db - SNR_INPUT_CENTER
}

impl RatePredictor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        q: usize,
        final_layer: bool,
        snr_inputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::Predictor;
        let prior_inputs = if final_layer { q } else { 0 };
        let width = 2 * d + prior_inputs + snr_inputs;
        Ok(RatePredictor {
            local: Linear::new(store, &format!("{name}.local"), g, d, d, Activation::Gelu, rng)?,
            hidden: Linear::new(store, &format!("{name}.mlp1"), g, width, d, Activation::Gelu, rng)?,
            out: Linear::new(store, &format!("{name}.mlp2"), g, d, q, Activation::None, rng)?,
            prior_inputs,
            snr_inputs,
        })
    }

    /// `Z_rate = [Z_local, mean(Z_local)]`, `[l_v × 2d]`.
    pub fn z_rate(&self, t: &mut Tape<'_>, y_rate: Var) -> Result<Var> {
        let local = self.local.forward(t, y_rate)?;
        let l_v = t.shape(local)[0];
        let global = t.mean_axis(local, 0)?;
        let global = t.broadcast_rows(global, l_v)?;
        t.concat(&[local, global], 1)
    }

    fn head(&self, t: &mut Tape<'_>, mut parts: Vec<Var>, snr_db: &[f64]) -> Result<Var> {
        if snr_db.len() != self.snr_inputs {
            return Err(Error::contract(format!(
                "predictor expects {} SNR inputs, got {}",
                self.snr_inputs,
                snr_db.len()
            )));
        }
        let l_v = t.shape(parts[0])[0];
        if !snr_db.is_empty() {
            let mut col = Vec::with_capacity(l_v * snr_db.len());
            for _ in 0..l_v {
                col.extend(snr_db.iter().map(|&s| snr_feature(s)));
            }
            parts.push(t.constant(Tensor::new(vec![l_v, snr_db.len()], col)?));
        }
        let z = if parts.len() == 1 { parts[0] } else { t.concat(&parts, 1)? };
        let h = self.hidden.forward(t, z)?;
        let logits = self.out.forward(t, h)?;
        t.softmax(logits)
    }

    /// Decision scores of an intermediate layer.
    pub fn predict_layer(&self, t: &mut Tape<'_>, y_rate: Var, snr_db: &[f64]) -> Result<Var> {
        if self.prior_inputs != 0 {
            return Err(Error::contract("final predictor used as an intermediate layer"));
        }
        let z = self.z_rate(t, y_rate)?;
        self.head(t, vec![z], snr_db)
    }

    /// Final decision from `Z_rate` of the last block plus
    /// `β = (1/L) Σ_{l<L} D_l`, where `L = priors.len() + 1`.
    ///
    /// The divisor is `L` although only `L − 1` terms are summed.
    pub fn aggregate_final(&self, t: &mut Tape<'_>, z_rate: Var, priors: &[Var], snr_db: &[f64]) -> Result<Var> {
        if self.prior_inputs == 0 {
            return Err(Error::contract("intermediate predictor used as the final layer"));
        }
        let l_v = t.shape(z_rate)[0];
        let beta = prior_mean(t, priors, l_v, self.prior_inputs)?;
        self.head(t, vec![z_rate, beta], snr_db)
    }
}

/// `β = (1/L) Σ priors` with `L = priors.len() + 1`; zeros without priors.
pub fn prior_mean(t: &mut Tape<'_>, priors: &[Var], l_v: usize, q: usize) -> Result<Var> {
    let beta = match priors.split_first() {
        None => t.constant(Tensor::zeros(vec![l_v, q])?),
        Some((&first, rest)) => {
            let mut sum = first;
            for &p in rest {
                sum = t.add(sum, p)?;
            }
            t.scale(sum, 1.0 / (priors.len() + 1) as f64)
        }
    };
    if t.shape(beta) != [l_v, q] {
        return Err(Error::dim(format!("prior decisions {:?} are not [{l_v} × {q}]", t.shape(beta))));
    }
    Ok(beta)
}

/// `G = −ln(−ln U)` with `U ~ Uniform(0, 1)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // random::<f64>() lies in [0, 1); reflect to (0, 1]
    let u = 1.0 - rng.random::<f64>();
    -(-u.ln()).ln()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws one Gumbel-Max sample from a probability row.
pub fn sample_hard<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let perturbed: Vec<f64> = probs.iter().map(|&p| p.max(PROB_FLOOR).ln() + gumbel(rng)).collect();
    argmax(&perturbed)
}

pub fn one_hot_rows(indices: &[usize], q: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * q];
    for (i, &j) in indices.iter().enumerate() {
        data[i * q + j] = 1.0;
    }
    Tensor::from_parts(vec![indices.len(), q], data)
}

/// Hard and soft samples produced by one shared noise draw.
pub struct GumbelSample {
    /// One-hot rows, no gradient.
    pub hard: Tensor,
    /// `softmax((log D + G) / τ)`, differentiable.
    pub soft: Var,
    pub noise: Tensor,
    pub tau: f64,
}

pub fn gumbel_sample<R: Rng + ?Sized>(t: &mut Tape<'_>, scores: Var, tau: f64, rng: &mut R) -> Result<GumbelSample> {
    if !(tau > 0.0) {
        return Err(Error::input(format!("temperature must be positive, got {tau}")));
    }
    let shape = t.shape(scores).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!("decision scores must be 2-D, got {shape:?}")));
    }
    let noise: Vec<f64> = (0..shape[0] * shape[1]).map(|_| gumbel(rng)).collect();
    let noise = Tensor::new(shape.clone(), noise)?;
    let clamped = t.clamp_min(scores, PROB_FLOOR);
    let logp = t.log(clamped);
    let g = t.constant(noise.clone());
    let perturbed = t.add(logp, g)?;
    let picks: Vec<usize> = {
        let v = t.value(perturbed);
        (0..shape[0]).map(|i| argmax(v.row(i))).collect()
    };
    let scaled = t.scale(perturbed, 1.0 / tau);
    let soft = t.softmax(scaled)?;
    Ok(GumbelSample {
        hard: one_hot_rows(&picks, shape[1]),
        soft,
        noise,
        tau,
    })
}

/// Forward value is the hard sample; the gradient goes to the soft sample.
pub fn straight_through_select(t: &mut Tape<'_>, sample: &GumbelSample) -> Result<Var> {
    t.straight_through(sample.hard.clone(), sample.soft)
}

/// `Σ_i selection_i · rates`; with a straight-through selection the value is
/// the hard `Σ k_i` and the gradient is that of the soft surrogate.
pub fn rate_surrogate(t: &mut Tape<'_>, selection: Var, rates: &CandidateRates) -> Result<Var> {
    let col = t.constant(rates.column());
    let per_token = t.matmul(selection, col)?;
    Ok(t.sum_all(per_token))
}

/// Differentiable mask `selection · prefix_table`. For one-hot forward values
/// this is exactly the binary mask.
pub fn mask_from_selection(t: &mut Tape<'_>, selection: Var, rates: &CandidateRates) -> Result<Var> {
    let table = t.constant(rates.prefix_table());
    t.matmul(selection, table)
}

/// `ŝ + (J − M) ⊙ c`: fills dropped channels with the learned `c`.
pub fn compensate(t: &mut Tape<'_>, s_hat: Var, side: &MaskAndSideInfo, c: Var) -> Result<Var> {
    let l_v = side.l_v();
    if t.shape(s_hat) != [l_v, side.d()] {
        return Err(Error::dim(format!(
            "received semantics {:?} do not match side information [{l_v} × {}]",
            t.shape(s_hat),
            side.d()
        )));
    }
    let holes = t.constant(side.mask().map(|m| 1.0 - m));
    let cb = t.broadcast_rows(c, l_v)?;
    let fill = t.mul(holes, cb)?;
    t.add(s_hat, fill)
}
