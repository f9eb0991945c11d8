//! Synthetic text encoder and the multimodal fuser that scores candidate
//! answers against the decoded video semantics.

use rand::Rng;

use crate::data::vocab;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, TransformerBlock};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rate::argmax;
use crate::tensor::{Tape, Tensor, Var};

/// Embedding table followed by self-attention blocks.
pub struct TextEncoder {
    pub embedding: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub d: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        blocks: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::Fuser;
        let embedding = store.add("text.embedding", g, Tensor::randn(vec![vocab::size(), d], 1.0, rng)?)?;
        let blocks = (0..blocks)
            .map(|j| TransformerBlock::new(store, &format!("text.block{j}"), g, d, heads, ffn_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextEncoder { embedding, blocks, d })
    }

    /// `tokens` is `b × s`; returns `Y_q` as `[b × s × d]`.
    pub fn encode(&self, t: &mut Tape<'_>, tokens: &[Vec<u32>], pad_mask: &[Vec<bool>]) -> Result<Var> {
        let b = tokens.len();
        let s = tokens.first().map_or(0, Vec::len);
        if b == 0 || s == 0 || tokens.iter().any(|x| x.len() != s) {
            return Err(Error::dim("token sequences must be non-empty and of equal length"));
        }
        let v = vocab::size();
        let mut onehot = vec![0.0; b * s * v];
        for (i, &tok) in tokens.iter().flatten().enumerate() {
            if tok as usize >= v {
                return Err(Error::input(format!("token id {tok} outside the vocabulary")));
            }
            onehot[i * v + tok as usize] = 1.0;
        }
        let oh = t.constant(Tensor::new(vec![b * s, v], onehot)?);
        let e = t.param(self.embedding);
        let x = t.matmul(oh, e)?;
        let mut x = t.reshape(x, &[b, s, self.d])?;
        for block in &self.blocks {
            x = block.forward_masked(t, x, Some(pad_mask))?.out;
        }
        Ok(x)
    }
}

pub struct Fuser {
    pub e_v: Linear,
    pub e_q: Linear,
    pub refine: Vec<TransformerBlock>,
    pub d: usize,
}

/// Answer scores and the predicted candidate.
pub struct Prediction {
    /// `[1 × b]`, row-stochastic.
    pub scores: Var,
    pub answer: usize,
}

fn check_mask(pad_mask: &[Vec<bool>], b: usize, s: usize) -> Result<()> {
    if pad_mask.len() != b || pad_mask.iter().any(|m| m.len() != s) {
        return Err(Error::dim(format!("padding mask does not match [{b} × {s}]")));
    }
    if pad_mask.iter().any(|m| m.iter().all(|&p| p)) {
        return Err(Error::input("a candidate consists only of padding"));
    }
    Ok(())
}

impl Fuser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        refine_blocks: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::Fuser;
        Ok(Fuser {
            e_v: Linear::new(store, "fuser.e_v", g, d, d, Activation::None, rng)?,
            e_q: Linear::new(store, "fuser.e_q", g, d, d, Activation::None, rng)?,
            refine: (0..refine_blocks)
                .map(|j| TransformerBlock::new(store, &format!("fuser.refine{j}"), g, d, heads, ffn_hidden, rng))
                .collect::<Result<Vec<_>>>()?,
            d,
        })
    }

    /// `Y_qv = Ŷ_v + Σ_i γ_i Y_q,i` with `γ_i = softmax(E_v E_q,iᵀ)` over the
    /// unpadded text tokens of candidate `i`.
    pub fn fuse(&self, t: &mut Tape<'_>, y_v_hat: Var, y_q: Var, pad_mask: &[Vec<bool>]) -> Result<Var> {
        let (vs, qs) = (t.shape(y_v_hat).to_vec(), t.shape(y_q).to_vec());
        if vs.len() != 2 || vs[1] != self.d || qs.len() != 3 || qs[2] != self.d {
            return Err(Error::dim(format!("fuse expects [l_v × {0}] and [b × s × {0}], got {vs:?} and {qs:?}", self.d)));
        }
        let (l_v, b, s) = (vs[0], qs[0], qs[1]);
        check_mask(pad_mask, b, s)?;
        let ev = self.e_v.forward(t, y_v_hat)?;
        let eq = self.e_q.forward(t, y_q)?;
        let ev = t.reshape(ev, &[1, l_v, self.d])?;
        let ev = t.concat(&vec![ev; b], 0)?;
        let eqt = t.transpose(eq)?;
        let logits = t.bmm(ev, eqt)?;
        let mut add = vec![0.0; b * l_v * s];
        for (i, m) in pad_mask.iter().enumerate() {
            for r in 0..l_v {
                for (j, &pad) in m.iter().enumerate() {
                    if pad {
                        add[(i * l_v + r) * s + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let mask = t.constant(Tensor::new(vec![b, l_v, s], add)?);
        let logits = t.add(logits, mask)?;
        let gamma = t.softmax(logits)?;
        let per_candidate = t.bmm(gamma, y_q)?;
        let summed = t.sum_axis(per_candidate, 0)?;
        t.add(y_v_hat, summed)
    }

    /// Mean of each candidate's unpadded tokens, `[b × d]`.
    pub fn candidate_globals(&self, t: &mut Tape<'_>, y_q: Var, pad_mask: &[Vec<bool>]) -> Result<Var> {
        let qs = t.shape(y_q).to_vec();
        let (b, s) = (qs[0], qs[1]);
        check_mask(pad_mask, b, s)?;
        let mut w = vec![0.0; b * s];
        for (i, m) in pad_mask.iter().enumerate() {
            let n = m.iter().filter(|&&p| !p).count() as f64;
            for (j, &pad) in m.iter().enumerate() {
                if !pad {
                    w[i * s + j] = 1.0 / n;
                }
            }
        }
        let w = t.constant(Tensor::new(vec![b, 1, s], w)?);
        let g = t.bmm(w, y_q)?;
        t.reshape(g, &[b, self.d])
    }

    /// Refinement blocks, mean pooling over video tokens, then
    /// `softmax(Y_qv^global · Y_q^globalᵀ)`.
    pub fn predict(&self, t: &mut Tape<'_>, y_qv: Var, y_q: Var, pad_mask: &[Vec<bool>]) -> Result<Prediction> {
        let mut x = y_qv;
        for block in &self.refine {
            x = block.forward(t, x)?;
        }
        let v = t.mean_axis(x, 0)?;
        let v = t.reshape(v, &[self.d, 1])?;
        let q = self.candidate_globals(t, y_q, pad_mask)?;
        self.score(t, v, q)
    }

    /// `softmax` of `q · v` for globals `v` `[d × 1]` and `q` `[b × d]`.
    pub fn score(&self, t: &mut Tape<'_>, v: Var, q: Var) -> Result<Prediction> {
        let b = t.shape(q)[0];
        let dots = t.matmul(q, v)?;
        let dots = t.reshape(dots, &[1, b])?;
        let scores = t.softmax(dots)?;
        let answer = argmax(t.value(scores).data());
        Ok(Prediction { scores, answer })
    }
}

/// `−log scores[label]`.
pub fn task_loss(t: &mut Tape<'_>, scores: Var, label: usize) -> Result<Var> {
    let b = t.shape(scores)[1];
    if label >= b {
        return Err(Error::input(format!("label {label} out of range for {b} candidates")));
    }
    let p = t.slice(scores, 1, label, 1)?;
    let p = t.clamp_min(p, f64::MIN_POSITIVE);
    let lp = t.log(p);
    let lp = t.reshape(lp, &[1])?;
    Ok(t.scale(lp, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GroupSet;
    use crate::seed;
    use crate::tensor::{gradcheck, gradcheck_params};

    fn build(d: usize, s: u64) -> (ParamStore, Fuser) {
        let mut store = ParamStore::new();
        let f = Fuser::new(&mut store, d, 1, 2, 2 * d, &mut seed::rng(s, "fuser", 0)).unwrap();
        (store, f)
    }

    #[test]
    fn zero_projections_average_unpadded_tokens() {
        let (mut store, f) = build(4, 1);
        for id in [f.e_v.weight, f.e_q.weight] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = seed::rng(1, "x", 0);
        let yv = Tensor::randn(vec![2, 4], 1.0, &mut rng).unwrap();
        let yq = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng).unwrap();
        let mask = vec![vec![false, false, true], vec![false, false, false]];
        let mut t = Tape::with_params(&store, GroupSet::NONE);
        let (a, b) = (t.constant(yv.clone()), t.constant(yq.clone()));
        let out = f.fuse(&mut t, a, b, &mask).unwrap();
        for r in 0..2 {
            for j in 0..4 {
                let m0 = (yq.at(&[0, 0, j]) + yq.at(&[0, 1, j])) / 2.0;
                let m1 = (0..3).map(|k| yq.at(&[1, k, j])).sum::<f64>() / 3.0;
                let e = yv.at(&[r, j]) + m0 + m1;
                assert!((t.value(out).at(&[r, j]) - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_token_candidates_add_directly() {
        let (store, f) = build(4, 2);
        let mut rng = seed::rng(2, "x", 0);
        let yv = Tensor::randn(vec![3, 4], 1.0, &mut rng).unwrap();
        let yq = Tensor::randn(vec![2, 1, 4], 1.0, &mut rng).unwrap();
        let mask = vec![vec![false]; 2];
        let mut t = Tape::with_params(&store, GroupSet::NONE);
        let (a, b) = (t.constant(yv.clone()), t.constant(yq.clone()));
        let out = f.fuse(&mut t, a, b, &mask).unwrap();
        for r in 0..3 {
            for j in 0..4 {
                let e = yv.at(&[r, j]) + yq.at(&[0, 0, j]) + yq.at(&[1, 0, j]);
                assert!((t.value(out).at(&[r, j]) - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn fuse_gradcheck() {
        let (mut store, f) = build(4, 3);
        let mut rng = seed::rng(3, "x", 0);
        for id in [f.e_v.weight, f.e_q.weight] {
            *store.get_mut(id) = Tensor::randn(vec![4, 4], 0.7, &mut rng).unwrap();
        }
        let yv = Tensor::uniform(vec![2, 4], -2.0, 2.0, &mut rng).unwrap();
        let yq = Tensor::uniform(vec![2, 3, 4], -2.0, 2.0, &mut rng).unwrap();
        let w = Tensor::randn(vec![2, 4], 1.0, &mut rng).unwrap();
        let mask = vec![vec![false, false, true], vec![false, false, false]];
        let rep = gradcheck_params(
            &store,
            GroupSet::all(),
            |t| {
                let (a, b, wv) = (t.constant(yv.clone()), t.constant(yq.clone()), t.constant(w.clone()));
                let o = f.fuse(t, a, b, &mask)?;
                let o = t.mul(o, wv)?;
                Ok(t.sum_all(o))
            },
            1e-6,
            None,
        )
        .unwrap();
        assert!(rep.rel_error < 1e-5, "{rep:?}");
        let store = &store;
        let rep = gradcheck(
            |t, xs| {
                let ev = t.constant(store.get(f.e_v.weight).clone());
                let eq = t.constant(store.get(f.e_q.weight).clone());
                let a = t.matmul(xs[0], ev)?;
                let b = t.matmul(xs[1], eq)?;
                let a = t.reshape(a, &[1, 2, 4])?;
                let a = t.concat(&[a, a], 0)?;
                let bt = t.transpose(b)?;
                let l = t.bmm(a, bt)?;
                let m = t.constant(Tensor::new(vec![2, 2, 3], vec![0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])?);
                let l = t.add(l, m)?;
                let g = t.softmax(l)?;
                let c = t.bmm(g, xs[1])?;
                let c = t.sum_axis(c, 0)?;
                let o = t.add(xs[0], c)?;
                let wv = t.constant(w.clone());
                let o = t.mul(o, wv)?;
                Ok(t.sum_all(o))
            },
            &[yv.clone(), yq.clone()],
            1e-6,
        )
        .unwrap();
        assert!(rep.rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn identical_candidates_tie_to_zero() {
        let (store, f) = build(4, 4);
        let mut rng = seed::rng(4, "x", 0);
        let yv = Tensor::randn(vec![3, 4], 1.0, &mut rng).unwrap();
        let one = Tensor::randn(vec![1, 2, 4], 1.0, &mut rng).unwrap();
        let yq = Tensor::new(vec![5, 2, 4], one.data().repeat(5)).unwrap();
        let mask = vec![vec![false, false]; 5];
        let mut t = Tape::with_params(&store, GroupSet::NONE);
        let (a, b) = (t.constant(yv), t.constant(yq));
        let p = f.predict(&mut t, a, b, &mask).unwrap();
        assert!(t.value(p.scores).data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert_eq!(p.answer, 0);
    }

    #[test]
    fn dominant_candidate_wins() {
        let (store, f) = build(4, 5);
        let mut t = Tape::with_params(&store, GroupSet::NONE);
        let q = t.constant(Tensor::matrix(3, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let v = t.constant(Tensor::matrix(4, 1, vec![0.0, 50.0, 0.0, 0.0]).unwrap());
        let p = f.score(&mut t, v, q).unwrap();
        assert_eq!(p.answer, 1);
        assert!((t.value(p.scores).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn candidate_permutation_is_equivariant() {
        let (store, f) = build(4, 6);
        let mut rng = seed::rng(6, "x", 0);
        let yv = Tensor::randn(vec![3, 4], 1.0, &mut rng).unwrap();
        let yq = Tensor::randn(vec![3, 2, 4], 1.0, &mut rng).unwrap();
        let perm = [2, 0, 1];
        let mut pq = Vec::new();
        for &p in &perm {
            pq.extend_from_slice(&yq.data()[p * 8..(p + 1) * 8]);
        }
        let pq = Tensor::new(vec![3, 2, 4], pq).unwrap();
        let mask = vec![vec![false, false]; 3];
        let mut t = Tape::with_params(&store, GroupSet::NONE);
        let (a, b, c) = (t.constant(yv), t.constant(yq), t.constant(pq));
        let fa = f.fuse(&mut t, a, b, &mask).unwrap();
        let fb = f.fuse(&mut t, a, c, &mask).unwrap();
        let pa = f.predict(&mut t, fa, b, &mask).unwrap();
        let pb = f.predict(&mut t, fb, c, &mask).unwrap();
        let (sa, sb) = (t.value(pa.scores).data().to_vec(), t.value(pb.scores).data().to_vec());
        for (i, &p) in perm.iter().enumerate() {
            assert!((sb[i] - sa[p]).abs() < 1e-12);
        }
        assert_eq!(perm[pb.answer], pa.answer);
    }

    #[test]
    fn task_loss_values_and_gradient() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::matrix(1, 5, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let l = task_loss(&mut t, s, 2).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 0.0);
        let u = t.constant(Tensor::full(vec![1, 5], 0.2).unwrap());
        let l = task_loss(&mut t, u, 4).unwrap();
        assert!((t.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(task_loss(&mut t, u, 5).is_err());
        let mut rng = seed::rng(7, "x", 0);
        let logits = Tensor::uniform(vec![1, 5], -2.0, 2.0, &mut rng).unwrap();
        let rep = gradcheck(
            |t, xs| {
                let s = t.softmax(xs[0])?;
                task_loss(t, s, 3)
            },
            &[logits],
            1e-6,
        )
        .unwrap();
        assert!(rep.rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn text_encoder_ignores_padding_content() {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, 8, 2, 2, 16, &mut seed::rng(8, "t", 0)).unwrap();
        let toks = vec![vec![3, 4, vocab::SEP, 30, vocab::PAD]];
        let mut other = toks.clone();
        other[0][4] = 7;
        let mask = vec![vec![false, false, false, false, true]];
        let mut t = Tape::with_params(&store, GroupSet::NONE);
        let a = enc.encode(&mut t, &toks, &mask).unwrap();
        let b = enc.encode(&mut t, &other, &mask).unwrap();
        assert_eq!(t.shape(a), &[1, 5, 8]);
        let (va, vb) = (t.value(a), t.value(b));
        for r in 0..4 {
            assert_eq!(va.row(r), vb.row(r));
        }
    }
}
