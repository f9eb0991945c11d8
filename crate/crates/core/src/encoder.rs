//! Spatiotemporal semantic encoder: per-track temporal self-attention, a
//! learned-affinity graph convolution over the objects of each frame, object
//! pooling, fusion with frame features and a projection to the model width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Geometry, VideoFeatures};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, TransformerBlock, INIT_STD};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub l_c: usize,
    pub l_f: usize,
    /// Objects per frame (`r`).
    pub objects: usize,
    /// Backbone feature width (`m`).
    pub feature_dim: usize,
    /// Model width (`d`); a power of two.
    pub d: usize,
    pub heads: usize,
    pub temporal_blocks: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            l_c: 4,
            l_f: 4,
            objects: 10,
            feature_dim: 64,
            d: 32,
            heads: 4,
            temporal_blocks: 2,
            ffn_mult: 2,
        }
    }
}

impl EncoderConfig {
    pub fn l_v(&self) -> usize {
        self.l_c * self.l_f
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            l_c: self.l_c,
            l_f: self.l_f,
            objects: self.objects,
            feature_dim: self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.l_c, self.l_f, self.objects, self.feature_dim, self.heads, self.ffn_mult].contains(&0) {
            return Err(Error::input("encoder sizes must be positive"));
        }
        if !self.d.is_power_of_two() || self.d < 2 {
            return Err(Error::input(format!("model width d = {} must be a power of two ≥ 2", self.d)));
        }
        if self.feature_dim % self.heads != 0 || self.d % self.heads != 0 {
            return Err(Error::input(format!(
                "heads = {} must divide both feature_dim = {} and d = {}",
                self.heads, self.feature_dim, self.d
            )));
        }
        Ok(())
    }
}

/// `A = softmax_rows((O W_a)(O W_b)ᵀ)`, `out = GeLU(A O W_g) + O`.
#[derive(Clone, Debug)]
pub struct GraphConv {
    pub w_a: ParamId,
    pub w_b: ParamId,
    pub w_g: ParamId,
}

impl GraphConv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, m: usize, rng: &mut R) -> Result<Self> {
        let mut w = |suffix: &str| -> Result<ParamId> {
            store.add(
                format!("{name}.{suffix}"),
                ParamGroup::Semantic,
                Tensor::randn(vec![m, m], INIT_STD, rng)?,
            )
        };
        Ok(GraphConv {
            w_a: w("w_a")?,
            w_b: w("w_b")?,
            w_g: w("w_g")?,
        })
    }

    /// `o` is `[F × r × m]`, one graph per leading index.
    pub fn forward(&self, t: &mut Tape<'_>, o: Var) -> Result<Var> {
        let (wa, wb, wg) = (t.param(self.w_a), t.param(self.w_b), t.param(self.w_g));
        let a = t.matmul(o, wa)?;
        let b = t.matmul(o, wb)?;
        let bt = t.transpose(b)?;
        let logits = t.bmm(a, bt)?;
        let adj = t.softmax(logits)?;
        let mixed = t.bmm(adj, o)?;
        let h = t.matmul(mixed, wg)?;
        let h = t.gelu(h);
        t.add(h, o)
    }
}

pub struct SemanticEncoder {
    pub cfg: EncoderConfig,
    pub temporal: Vec<TransformerBlock>,
    pub graph: GraphConv,
    pub proj: Linear,
}

impl SemanticEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.feature_dim;
        let temporal = (0..cfg.temporal_blocks)
            .map(|j| {
                TransformerBlock::new(
                    store,
                    &format!("sem.temporal{j}"),
                    ParamGroup::Semantic,
                    m,
                    cfg.heads,
                    cfg.ffn_mult * m,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let graph = GraphConv::new(store, "sem.graph", m, rng)?;
        let proj = Linear::new(store, "sem.proj", ParamGroup::Semantic, 2 * m, cfg.d, Activation::None, rng)?;
        Ok(SemanticEncoder {
            cfg: cfg.clone(),
            temporal,
            graph,
            proj,
        })
    }

    fn check(&self, t: &Tape<'_>, o: Var) -> Result<[usize; 4]> {
        let s = t.shape(o);
        let c = &self.cfg;
        if s.len() != 4 || s[1] != c.l_f || s[2] != c.objects || s[3] != c.feature_dim {
            return Err(Error::dim(format!(
                "object features {s:?} do not match [clips × {} × {} × {}]",
                c.l_f, c.objects, c.feature_dim
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Self-attention across the `l_f` frames of every object track
    /// independently. `o` is `[clips × l_f × r × m]`.
    pub fn temporal_aggregate(&self, t: &mut Tape<'_>, o: Var) -> Result<Var> {
        let [c, lf, r, m] = self.check(t, o)?;
        let tracks = t.permute(o, &[0, 2, 1, 3])?;
        let mut x = t.reshape(tracks, &[c * r, lf, m])?;
        for block in &self.temporal {
            x = block.forward(t, x)?;
        }
        let x = t.reshape(x, &[c, r, lf, m])?;
        t.permute(x, &[0, 2, 1, 3])
    }

    /// Graph convolution over the objects of every frame.
    pub fn spatial_graph_conv(&self, t: &mut Tape<'_>, o: Var) -> Result<Var> {
        let [c, lf, r, m] = self.check(t, o)?;
        let x = t.reshape(o, &[c * lf, r, m])?;
        let y = self.graph.forward(t, x)?;
        t.reshape(y, &[c, lf, r, m])
    }

    /// Mean over objects, concatenation with frame features, projection:
    /// `[clips × l_f × r × m]`, `[clips × l_f × m]` → `[clips·l_f × d]`.
    pub fn pool_fuse_project(&self, t: &mut Tape<'_>, o: Var, f: Var) -> Result<Var> {
        let [c, lf, _, m] = self.check(t, o)?;
        if t.shape(f) != [c, lf, m] {
            return Err(Error::dim(format!("frame features {:?} do not match [{c} × {lf} × {m}]", t.shape(f))));
        }
        let pooled = t.mean_axis(o, 2)?;
        let fused = t.concat(&[pooled, f], 2)?;
        let flat = t.reshape(fused, &[c * lf, 2 * m])?;
        self.proj.forward(t, flat)
    }

    /// Encodes all clips (each independently) and concatenates them into the
    /// `[l_v × d]` video semantics.
    pub fn encode(&self, t: &mut Tape<'_>, video: &VideoFeatures) -> Result<Var> {
        if video.clips() != self.cfg.l_c {
            return Err(Error::input(format!(
                "provider produced {} clips, expected {}",
                video.clips(),
                self.cfg.l_c
            )));
        }
        let o = t.constant(video.objects.clone());
        let f = t.constant(video.frames.clone());
        let o = self.temporal_aggregate(t, o)?;
        let o = self.spatial_graph_conv(t, o)?;
        self.pool_fuse_project(t, o, f)
    }
}
