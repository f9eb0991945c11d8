//! Synthetic video features and multiple-choice QA tasks.
//!
//! A shared "world" fixes `r` object prototypes and, per class, a drift
//! direction for every object. A video of class `c` moves object `k` along
//! `prototype_k + offset_k + τ · drift_{c,k}` where `τ` runs from 0 to 1 over
//! the video and `offset_k` is a per-video nuisance. Frame features are the
//! mean of the frame's objects plus independent noise.
//!
//! Every task offers all classes as candidate answers in shuffled order, so
//! the text alone carries no information about the label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// `floor(k · total_frames / l_v)` for `k = 0..l_v`.
pub fn sample_keyframes(total_frames: usize, l_v: usize) -> Result<Vec<usize>> {
    if l_v == 0 || total_frames < l_v {
        return Err(Error::input(format!(
            "cannot sample {l_v} keyframes from {total_frames} frames"
        )));
    }
    Ok((0..l_v).map(|k| k * total_frames / l_v).collect())
}

/// Object and frame features of one video, already split into clips.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    /// `[l_c × l_f × r × m]`
    pub objects: Tensor,
    /// `[l_c × l_f × m]`
    pub frames: Tensor,
}

impl VideoFeatures {
    pub fn clips(&self) -> usize {
        self.objects.shape()[0]
    }
}

/// Source of per-video features.
pub trait FeatureProvider: Sync {
    fn video(&self, class: usize, seed: u64) -> Result<VideoFeatures>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub total_frames: usize,
    /// Standard deviation of each drift entry.
    pub drift_scale: f64,
    /// Standard deviation of the per-video object offsets.
    pub offset_std: f64,
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_test: 500,
            classes: 5,
            total_frames: 32,
            drift_scale: 0.2,
            offset_std: 0.4,
            noise_std: 0.1,
        }
    }
}

/// Feature geometry the provider must produce.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub l_c: usize,
    pub l_f: usize,
    pub objects: usize,
    pub feature_dim: usize,
}

impl Geometry {
    pub fn l_v(&self) -> usize {
        self.l_c * self.l_f
    }
}

pub struct SyntheticVideoProvider {
    geom: Geometry,
    cfg: DataConfig,
    /// `[r × m]`
    prototypes: Tensor,
    /// `[classes × r × m]`
    drifts: Tensor,
    keyframes: Vec<usize>,
}

impl SyntheticVideoProvider {
    pub fn new(root_seed: u64, geom: Geometry, cfg: &DataConfig) -> Result<Self> {
        if cfg.classes < 2 {
            return Err(Error::input("need at least two classes"));
        }
        let mut rng = seed::rng(root_seed, "world", 0);
        let (r, m) = (geom.objects, geom.feature_dim);
        let prototypes = Tensor::randn(vec![r, m], 1.0, &mut rng)?;
        let drifts = Tensor::randn(vec![cfg.classes, r, m], cfg.drift_scale, &mut rng)?;
        Ok(SyntheticVideoProvider {
            geom,
            cfg: cfg.clone(),
            prototypes,
            drifts,
            keyframes: sample_keyframes(cfg.total_frames, geom.l_v())?,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }
}

impl FeatureProvider for SyntheticVideoProvider {
    fn video(&self, class: usize, video_seed: u64) -> Result<VideoFeatures> {
        if class >= self.cfg.classes {
            return Err(Error::input(format!("class {class} out of range")));
        }
        let Geometry { l_c, l_f, objects: r, feature_dim: m } = self.geom;
        let mut rng = seed::rng(video_seed, "video", 0);
        let mut normal = |std: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        };
        let offsets: Vec<f64> = (0..r * m).map(|_| normal(self.cfg.offset_std)).collect();
        let span = (self.cfg.total_frames - 1).max(1) as f64;
        let drift = &self.drifts.data()[class * r * m..(class + 1) * r * m];
        let mut objects = Vec::with_capacity(l_c * l_f * r * m);
        let mut frames = Vec::with_capacity(l_c * l_f * m);
        for &f in &self.keyframes {
            let tau = f as f64 / span;
            let start = objects.len();
            for i in 0..r * m {
                objects.push(self.prototypes.data()[i] + offsets[i] + tau * drift[i] + normal(self.cfg.noise_std));
            }
            for j in 0..m {
                let mean = (0..r).map(|k| objects[start + k * m + j]).sum::<f64>() / r as f64;
                frames.push(mean + normal(self.cfg.noise_std));
            }
        }
        Ok(VideoFeatures {
            objects: Tensor::new(vec![l_c, l_f, r, m], objects)?,
            frames: Tensor::new(vec![l_c, l_f, m], frames)?,
        })
    }
}

/// Token ids of the synthetic text vocabulary.
pub mod vocab {
    pub const PAD: u32 = 0;
    pub const SEP: u32 = 1;

    pub(super) const QUESTION_WORDS: &[&str] = &[
        "what", "does", "the", "object", "do", "how", "which", "movement", "happens", "in", "this", "video",
        "clip", "scene", "thing", "move", "motion", "is", "shown", "?",
    ];

    /// Answer phrases: class `c` uses `CLASS_WORDS[c]` words, two synonyms each.
    pub(super) const CLASS_WORDS: &[[&str; 2]] = &[
        ["rise", "climb"],
        ["fall", "drop"],
        ["spin", "turn"],
        ["slide", "drift"],
        ["shrink", "fade"],
        ["grow", "swell"],
        ["shake", "wobble"],
        ["jump", "hop"],
    ];

    pub(super) const MODIFIERS: &[&str] = &["slowly", "quickly", "it", "will"];

    pub const QUESTION_BASE: u32 = 2;

    pub fn question_len() -> usize {
        QUESTION_WORDS.len()
    }

    pub fn class_base() -> u32 {
        QUESTION_BASE + QUESTION_WORDS.len() as u32
    }

    pub fn modifier_base() -> u32 {
        class_base() + 2 * CLASS_WORDS.len() as u32
    }

    pub fn size() -> usize {
        modifier_base() as usize + MODIFIERS.len()
    }

    pub fn max_classes() -> usize {
        CLASS_WORDS.len()
    }

    /// Human-readable token, for manifests and debugging.
    pub fn word(id: u32) -> &'static str {
        let cb = class_base();
        let mb = modifier_base();
        match id {
            PAD => "<pad>",
            SEP => "<sep>",
            i if i < cb => QUESTION_WORDS[(i - QUESTION_BASE) as usize],
            i if i < mb => CLASS_WORDS[((i - cb) / 2) as usize][((i - cb) % 2) as usize],
            i if (i as usize) < size() => MODIFIERS[(i - mb) as usize],
            _ => "<unk>",
        }
    }
}

/// Question length, separator, and up to two answer words.
pub const MAX_QUESTION: usize = 6;
pub const SEQ_LEN: usize = MAX_QUESTION + 1 + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One multiple-choice question about one video.
#[derive(Clone, Debug, PartialEq)]
pub struct QaTask {
    pub id: usize,
    pub split: Split,
    pub class: usize,
    /// Index of the correct candidate.
    pub label: usize,
    /// Seed of the video features.
    pub seed: u64,
    /// Class named by each candidate.
    pub candidate_classes: Vec<usize>,
    /// `candidates × SEQ_LEN` token ids, padded with `PAD`.
    pub tokens: Vec<Vec<u32>>,
    /// `true` marks padding.
    pub pad_mask: Vec<Vec<bool>>,
}

fn make_task(root: u64, split: Split, id: usize, classes: usize) -> QaTask {
    let class = id % classes;
    let video_seed = seed::derive(root, &format!("video-{}", split.label()), id as u64);
    let mut rng = seed::rng(root, &format!("task-{}", split.label()), id as u64);
    let qlen = rng.random_range(3..=MAX_QUESTION);
    let question: Vec<u32> = (0..qlen)
        .map(|_| vocab::QUESTION_BASE + rng.random_range(0..vocab::question_len()) as u32)
        .collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);
    let label = order.iter().position(|&c| c == class).unwrap();
    let mut tokens = Vec::with_capacity(classes);
    let mut pad_mask = Vec::with_capacity(classes);
    for &c in &order {
        let mut seq = question.clone();
        seq.push(vocab::SEP);
        seq.push(vocab::class_base() + 2 * c as u32 + rng.random_range(0..2u32));
        if rng.random_bool(0.5) {
            seq.push(vocab::modifier_base() + rng.random_range(0..vocab::MODIFIERS.len()) as u32);
        }
        let mut mask = vec![false; seq.len()];
        seq.resize(SEQ_LEN, vocab::PAD);
        mask.resize(SEQ_LEN, true);
        tokens.push(seq);
        pad_mask.push(mask);
    }
    QaTask {
        id,
        split,
        class,
        label,
        seed: video_seed,
        candidate_classes: order,
        tokens,
        pad_mask,
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<QaTask>,
    pub test: Vec<QaTask>,
}

impl Dataset {
    /// Classes are assigned round-robin, so each class gets an equal share up
    /// to rounding.
    pub fn generate(root: u64, cfg: &DataConfig) -> Result<Self> {
        if cfg.classes < 2 || cfg.classes > vocab::max_classes() {
            return Err(Error::input(format!(
                "classes must be in [2, {}], got {}",
                vocab::max_classes(),
                cfg.classes
            )));
        }
        Ok(Dataset {
            train: (0..cfg.n_train).map(|i| make_task(root, Split::Train, i, cfg.classes)).collect(),
            test: (0..cfg.n_test).map(|i| make_task(root, Split::Test, i, cfg.classes)).collect(),
        })
    }

    /// Manifest with one row per task.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
        w.write_record(["task_id", "split", "class", "label", "seed", "candidates"])?;
        for t in self.train.iter().chain(&self.test) {
            let cands: Vec<String> = t.candidate_classes.iter().map(usize::to_string).collect();
            w.write_record([
                t.id.to_string(),
                t.split.label().to_string(),
                t.class.to_string(),
                t.label.to_string(),
                t.seed.to_string(),
                cands.join(" "),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> Geometry {
        Geometry { l_c: 4, l_f: 4, objects: 3, feature_dim: 8 }
    }

    #[test]
    fn keyframes() {
        assert_eq!(sample_keyframes(16, 16).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(sample_keyframes(32, 16).unwrap(), (0..16).map(|k| 2 * k).collect::<Vec<_>>());
        let got = sample_keyframes(100, 16).unwrap();
        assert_eq!(got, vec![0, 6, 12, 18, 25, 31, 37, 43, 50, 56, 62, 68, 75, 81, 87, 93]);
        assert!(got.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(sample_keyframes(8, 16), Err(Error::Input(_))));
    }

    #[test]
    fn provider_is_deterministic() {
        let p = SyntheticVideoProvider::new(3, geom(), &DataConfig::default()).unwrap();
        let a = p.video(2, 99).unwrap();
        assert_eq!(a, p.video(2, 99).unwrap());
        assert_ne!(a, p.video(2, 100).unwrap());
        assert_eq!(a.objects.shape(), &[4, 4, 3, 8]);
        assert_eq!(a.frames.shape(), &[4, 4, 8]);
        assert!(p.video(5, 0).is_err());
    }

    #[test]
    fn classes_differ_in_drift() {
        let cfg = DataConfig { noise_std: 0.0, offset_std: 0.0, ..DataConfig::default() };
        let p = SyntheticVideoProvider::new(3, geom(), &cfg).unwrap();
        let a = p.video(0, 1).unwrap();
        let b = p.video(1, 1).unwrap();
        // first keyframe is at τ = 0 where every class coincides
        let n0 = 3 * 8;
        assert_eq!(a.objects.data()[..n0], b.objects.data()[..n0]);
        assert!(a.objects.max_abs_diff(&b.objects) > 0.1);
    }

    #[test]
    fn tasks_are_balanced_and_valid() {
        let cfg = DataConfig { n_train: 103, n_test: 20, ..DataConfig::default() };
        let ds = Dataset::generate(5, &cfg).unwrap();
        let mut counts = [0usize; 5];
        for t in &ds.train {
            counts[t.class] += 1;
            assert!(t.label < 5);
            assert_eq!(t.candidate_classes[t.label], t.class);
            assert_eq!(t.tokens.len(), 5);
            for (seq, mask) in t.tokens.iter().zip(&t.pad_mask) {
                assert_eq!(seq.len(), SEQ_LEN);
                for (&tok, &pad) in seq.iter().zip(mask) {
                    assert_eq!(tok == vocab::PAD, pad);
                    assert!((tok as usize) < vocab::size());
                }
            }
        }
        assert!(counts.iter().all(|&c| c == 20 || c == 21), "{counts:?}");
        let again = Dataset::generate(5, &cfg).unwrap();
        assert_eq!(again.train, ds.train);
    }

    #[test]
    fn vocab_words_roundtrip() {
        assert_eq!(vocab::word(vocab::PAD), "<pad>");
        assert_eq!(vocab::word(vocab::class_base()), "rise");
        assert_eq!(vocab::word(vocab::class_base() + 3), "drop");
        assert_eq!(vocab::word(vocab::size() as u32 - 1), "will");
    }
}
