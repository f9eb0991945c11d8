//! Physical layer: retained channels are flattened and paired into complex
//! symbols, power-normalized, sent through an AWGN or block Rayleigh fading
//! channel, equalized with perfect channel knowledge and scattered back.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rate::MaskAndSideInfo;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn label(self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            _ => Err(Error::input(format!("unknown channel kind {s:?} (expected awgn or rayleigh)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    /// Rayleigh scale of `|h|`.
    pub sigma_h: f64,
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64) -> Self {
        ChannelConfig {
            kind: ChannelKind::Awgn,
            snr_db,
            sigma_h: 1.0,
        }
    }

    pub fn noiseless() -> Self {
        Self::awgn(f64::INFINITY)
    }
}

/// `σ² = 10^(−snr/10)` for unit signal power; zero at `+∞`.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolStream {
    pub symbols: Vec<Complex64>,
    /// The stream was divided by this before transmission.
    pub norm_factor: f64,
}

impl SymbolStream {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Mean `|s|²`.
    pub fn power(&self) -> f64 {
        mean_power(&self.symbols)
    }
}

fn mean_power(s: &[Complex64]) -> f64 {
    if s.is_empty() {
        0.0
    } else {
        s.iter().map(|z| z.norm_sqr()).sum::<f64>() / s.len() as f64
    }
}

fn check_side(s_v: &Tensor, side: &MaskAndSideInfo) -> Result<()> {
    if s_v.shape() != [side.l_v(), side.d()] {
        return Err(Error::Protocol(format!(
            "semantics {:?} do not match side information [{} × {}]",
            s_v.shape(),
            side.l_v(),
            side.d()
        )));
    }
    Ok(())
}

/// Retained reals of every token in order, paired as `r₂ₜ + i·r₂ₜ₊₁`, then
/// divided by `√max(1, power)`.
pub fn flatten_r2c(s_v: &Tensor, side: &MaskAndSideInfo) -> Result<SymbolStream> {
    check_side(s_v, side)?;
    let mut symbols = Vec::with_capacity(side.rate_loss() / 2);
    for (i, &k) in side.counts().iter().enumerate() {
        if k % 2 != 0 {
            return Err(Error::contract(format!("token {i} retains an odd count {k}")));
        }
        for pair in s_v.row(i)[..k].chunks_exact(2) {
            symbols.push(Complex64::new(pair[0], pair[1]));
        }
    }
    let norm_factor = mean_power(&symbols).max(1.0).sqrt();
    for z in &mut symbols {
        *z /= norm_factor;
    }
    Ok(SymbolStream { symbols, norm_factor })
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let std = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * std, im * std)
}

/// Draws `h` with `|h| ~ Rayleigh(σ_h)` and uniform phase.
pub fn rayleigh_gain<R: Rng + ?Sized>(sigma_h: f64, rng: &mut R) -> Complex64 {
    // circular Gaussian with per-component variance σ_h² has Rayleigh(σ_h) modulus
    complex_normal(rng, 2.0 * sigma_h * sigma_h)
}

/// `ŝ = s + n` (AWGN) or `ŝ = h·s + n` (one `h` per stream). Returns the
/// received stream and the channel gain (`1` for AWGN).
pub fn transmit<R: Rng + ?Sized>(s: &SymbolStream, cfg: &ChannelConfig, rng: &mut R) -> (SymbolStream, Complex64) {
    let h = draw_gain(cfg, rng);
    (transmit_with_gain(s, cfg, h, rng), h)
}

/// Channel gain for one block: `1` for AWGN.
pub fn draw_gain<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> Complex64 {
    match cfg.kind {
        ChannelKind::Awgn => Complex64::new(1.0, 0.0),
        ChannelKind::Rayleigh => rayleigh_gain(cfg.sigma_h, rng),
    }
}

/// `ŝ = h·s + n` for a gain drawn beforehand.
pub fn transmit_with_gain<R: Rng + ?Sized>(s: &SymbolStream, cfg: &ChannelConfig, h: Complex64, rng: &mut R) -> SymbolStream {
    let var = noise_variance(cfg.snr_db);
    let symbols = s
        .symbols
        .iter()
        .map(|&z| {
            let y = h * z;
            if var > 0.0 {
                y + complex_normal(rng, var)
            } else {
                y
            }
        })
        .collect();
    SymbolStream {
        symbols,
        norm_factor: s.norm_factor,
    }
}

/// `snr + 10·log₁₀|h|²`, the SNR seen after a fading gain.
pub fn instantaneous_snr(snr_db: f64, h: Complex64) -> f64 {
    snr_db + 10.0 * h.norm_sqr().max(1e-300).log10()
}

/// Perfect-CSI equalization `ŝ / h`.
pub fn equalize(s: &SymbolStream, h: Complex64) -> SymbolStream {
    if h == Complex64::new(1.0, 0.0) {
        return s.clone();
    }
    SymbolStream {
        symbols: s.symbols.iter().map(|&z| z / h).collect(),
        norm_factor: s.norm_factor,
    }
}

/// Undoes normalization, splits symbols into real pairs and scatters them
/// into the first `k_i` channels of each token; zeros elsewhere.
pub fn c2r_unflatten(s_hat: &SymbolStream, side: &MaskAndSideInfo, norm_factor: f64) -> Result<Tensor> {
    let expected = side.rate_loss() / 2;
    if s_hat.len() != expected {
        return Err(Error::Protocol(format!(
            "received {} symbols but side information announces {expected}",
            s_hat.len()
        )));
    }
    let d = side.d();
    let mut out = vec![0.0; side.l_v() * d];
    let mut it = s_hat.symbols.iter();
    for (i, &k) in side.counts().iter().enumerate() {
        for j in 0..k / 2 {
            let z = it.next().unwrap() * norm_factor;
            out[i * d + 2 * j] = z.re;
            out[i * d + 2 * j + 1] = z.im;
        }
    }
    Tensor::new(vec![side.l_v(), d], out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BcrReport {
    /// Complex symbols sent.
    pub n: usize,
    pub source_size: usize,
    pub bcr: f64,
    /// Bits of side information on the lossless link (not part of `bcr`).
    pub side_info_bits: usize,
}

/// `n / (l_v · 3 · x · y)` with `n = Σ k_i / 2`.
pub fn compute_bcr(side: &MaskAndSideInfo, frame: (usize, usize)) -> Result<BcrReport> {
    if frame.0 == 0 || frame.1 == 0 {
        return Err(Error::input(format!("frame geometry {frame:?} must be positive")));
    }
    let n = side.rate_loss() / 2;
    let source_size = side.l_v() * 3 * frame.0 * frame.1;
    Ok(BcrReport {
        n,
        source_size,
        bcr: n as f64 / source_size as f64,
        side_info_bits: side.side_info_bits(),
    })
}

/// What one pass through the channel looked like.
#[derive(Clone, Debug)]
pub struct ChannelTrace {
    pub sent: SymbolStream,
    pub received: SymbolStream,
    pub gain: Complex64,
}

/// Simulates the channel on the tape: the value is the reassembled receiver
/// input, the gradient passes straight through to `s_v` (the noise is a
/// constant of the graph).
pub fn pass_through<R: Rng + ?Sized>(
    t: &mut Tape<'_>,
    s_v: Var,
    side: &MaskAndSideInfo,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<(Var, ChannelTrace)> {
    let h = draw_gain(cfg, rng);
    pass_through_with_gain(t, s_v, side, cfg, h, rng)
}

/// [`pass_through`] with the block gain fixed in advance.
pub fn pass_through_with_gain<R: Rng + ?Sized>(
    t: &mut Tape<'_>,
    s_v: Var,
    side: &MaskAndSideInfo,
    cfg: &ChannelConfig,
    gain: Complex64,
    rng: &mut R,
) -> Result<(Var, ChannelTrace)> {
    let value = t.value(s_v).clone();
    let sent = flatten_r2c(&value, side)?;
    let received = transmit_with_gain(&sent, cfg, gain, rng);
    let equalized = equalize(&received, gain);
    let s_hat = c2r_unflatten(&equalized, side, sent.norm_factor)?;
    let delta: Vec<f64> = s_hat.data().iter().zip(value.data()).map(|(a, b)| a - b).collect();
    let delta = t.constant(Tensor::new(value.shape().to_vec(), delta)?);
    let out = t.add(s_v, delta)?;
    Ok((out, ChannelTrace { sent, received, gain }))
}

/// Per-symbol trace rows `(re, im, noise_re, noise_im)` for debugging.
pub fn write_trace(path: &std::path::Path, trace: &ChannelTrace) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(["re", "im", "noise_re", "noise_im"])?;
    for (s, r) in trace.sent.symbols.iter().zip(&trace.received.symbols) {
        let n = r - trace.gain * s;
        w.write_record([s.re, s.im, n.re, n.im].map(|x| x.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn flatten_example() {
        let side = MaskAndSideInfo::from_counts(vec![2], 4).unwrap();
        let s = Tensor::matrix(1, 4, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let st = flatten_r2c(&s, &side).unwrap();
        assert_eq!(st.norm_factor, 5.0);
        assert!((st.symbols[0] - Complex64::new(0.6, 0.8)).norm() < 1e-15);
    }

    #[test]
    fn zero_input_is_not_divided() {
        let side = MaskAndSideInfo::full(2, 4);
        let st = flatten_r2c(&Tensor::zeros(vec![2, 4]).unwrap(), &side).unwrap();
        assert_eq!(st.norm_factor, 1.0);
        assert!(st.symbols.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn noiseless_roundtrip_and_power() {
        let mut rng = seed::rng(1, "ch", 0);
        for trial in 0..200 {
            let k: Vec<usize> = (0..4).map(|_| 2 * rng.random_range(1..=4)).collect();
            let side = MaskAndSideInfo::from_counts(k, 8).unwrap();
            let scale = if trial % 2 == 0 { 0.1 } else { 10.0 };
            let mut s = Tensor::randn(vec![4, 8], scale, &mut rng).unwrap();
            let m = side.mask();
            s.data_mut().iter_mut().zip(m.data()).for_each(|(x, m)| *x *= m);
            let st = flatten_r2c(&s, &side).unwrap();
            assert!(st.power() <= 1.0 + 1e-9);
            assert_eq!(st.len(), side.rate_loss() / 2);
            let (rx, h) = transmit(&st, &ChannelConfig::noiseless(), &mut rng);
            assert_eq!(rx, st);
            let back = c2r_unflatten(&equalize(&rx, h), &side, st.norm_factor).unwrap();
            assert!(back.max_abs_diff(&s) < 1e-12);
        }
    }

    #[test]
    fn symbol_count_mismatch_is_protocol_error() {
        let side = MaskAndSideInfo::full(1, 4);
        let st = SymbolStream { symbols: vec![Complex64::new(1.0, 0.0)], norm_factor: 1.0 };
        assert!(matches!(c2r_unflatten(&st, &side, 1.0), Err(Error::Protocol(_))));
    }

    #[test]
    fn noise_variance_values() {
        assert_eq!(noise_variance(0.0), 1.0);
        assert!((noise_variance(10.0) - 0.1).abs() < 1e-15);
        assert_eq!(noise_variance(f64::INFINITY), 0.0);
    }

    #[test]
    fn awgn_noise_power() {
        let mut rng = seed::rng(2, "ch", 0);
        let n = 200_000;
        let st = SymbolStream { symbols: vec![Complex64::new(0.0, 0.0); n], norm_factor: 1.0 };
        let (rx, _) = transmit(&st, &ChannelConfig::awgn(0.0), &mut rng);
        let p = rx.power();
        assert!((p - 1.0).abs() < 0.02, "{p}");
    }

    #[test]
    fn bcr_examples() {
        let side = MaskAndSideInfo::from_counts(vec![4; 16], 256).unwrap();
        let r = compute_bcr(&side, (167, 167)).unwrap();
        assert_eq!(r.n, 32);
        assert!((r.bcr - 2.39e-5).abs() < 0.01e-5);
        assert_eq!(r.side_info_bits, 256);
        assert_eq!(compute_bcr(&MaskAndSideInfo::full(16, 256), (167, 167)).unwrap().n, 2048);
        let small = compute_bcr(&side, (10, 20)).unwrap();
        assert!((small.bcr * 200.0 - r.bcr * 167.0 * 167.0).abs() < 1e-15);
        assert!(compute_bcr(&side, (0, 5)).is_err());
    }

    #[test]
    fn gradient_passes_through_channel() {
        let side = MaskAndSideInfo::from_counts(vec![2, 4], 4).unwrap();
        let mut rng = seed::rng(3, "ch", 0);
        let mut s = Tensor::randn(vec![2, 4], 1.0, &mut rng).unwrap();
        s.data_mut()[2..4].fill(0.0);
        let w = Tensor::randn(vec![2, 4], 1.0, &mut rng).unwrap();
        for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh] {
            let cfg = ChannelConfig { kind, snr_db: 5.0, sigma_h: 1.0 };
            let mut t = Tape::new();
            let sv = t.leaf(s.clone());
            let (out, trace) = pass_through(&mut t, sv, &side, &cfg, &mut rng).unwrap();
            assert_eq!(trace.sent.len(), 3);
            assert_eq!(&t.value(out).data()[2..4], &[0.0, 0.0]);
            let wv = t.constant(w.clone());
            let l = t.mul(out, wv).unwrap();
            let l = t.sum_all(l);
            t.backward(l).unwrap();
            assert_eq!(t.grad(sv).unwrap(), w.data());
        }
    }

    #[test]
    fn trace_csv() {
        let dir = tempfile::tempdir().unwrap();
        let side = MaskAndSideInfo::full(1, 4);
        let s = Tensor::matrix(1, 4, vec![0.5, 0.5, -0.5, 0.1]).unwrap();
        let sent = flatten_r2c(&s, &side).unwrap();
        let (received, gain) = transmit(&sent, &ChannelConfig::awgn(10.0), &mut seed::rng(4, "ch", 0));
        let path = dir.path().join("trace.csv");
        write_trace(&path, &ChannelTrace { sent, received, gain }).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("re,im,noise_re,noise_im\n"));
    }
}
