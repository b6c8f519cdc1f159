use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Standard deviation of the per-frame noise around each class mean.
const CLASS_NOISE: f64 = 0.5;
/// Observation noise of the slow-signal task, relative to the smoothed signal's std.
const OBSERVATION_NOISE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Per-frame class-conditioned Gaussians; the label at `t` is the class of
    /// frame `min(t + d, T − 1)`, so only a model that sees `d` frames ahead
    /// can beat chance.
    #[serde(rename = "lookahead-classify")]
    LookaheadClassify,
    /// A moving-average-smoothed noise signal observed through additive noise;
    /// the label is the quantile bin of the clean channel-0 value. History
    /// alone suffices, and integrating it helps.
    #[serde(rename = "slow-signal")]
    SlowSignal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub frames: usize,
    pub features: usize,
    pub classes: usize,
    /// Lookahead `d` (lookahead-classify only).
    #[serde(default)]
    pub lookahead: Option<usize>,
    /// Smoothing window `w` (slow-signal only).
    #[serde(default)]
    pub window: Option<usize>,
    pub sequences: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn lookahead(frames: usize, features: usize, classes: usize, d: usize, sequences: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::LookaheadClassify,
            frames,
            features,
            classes,
            lookahead: Some(d),
            window: None,
            sequences,
            seed,
        }
    }

    pub fn slow_signal(frames: usize, features: usize, classes: usize, w: usize, sequences: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::SlowSignal,
            frames,
            features,
            classes,
            lookahead: None,
            window: Some(w),
            sequences,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.frames == 0 || self.features == 0 || self.sequences == 0 {
            return bad("task frames, features and sequences must be positive");
        }
        if self.classes < 2 {
            return bad("task needs at least 2 classes");
        }
        match self.kind {
            TaskKind::LookaheadClassify => match self.lookahead {
                Some(d) if d >= 1 => {}
                _ => return bad("lookahead-classify needs `lookahead` >= 1"),
            },
            TaskKind::SlowSignal => match self.window {
                Some(w) if w >= 2 => {}
                _ => return bad("slow-signal needs `window` >= 2"),
            },
        }
        Ok(())
    }
}

/// One labelled sequence: `inputs` is `[T, D]`, `labels[t]` the target class.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Class drawn for each frame (lookahead task only; empty otherwise).
    pub frame_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub frames: usize,
    pub features: usize,
    pub classes: usize,
}

/// A `[T, B, D]` minibatch with labels indexed `[t * B + b]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Splits off the last `ceil(len · fraction)` sequences for evaluation.
    pub fn split(&self, eval_fraction: f64) -> (Dataset, Dataset) {
        let n_eval = ((self.len() as f64) * eval_fraction).ceil() as usize;
        let n_eval = n_eval.min(self.len());
        let cut = self.len() - n_eval;
        let part = |seqs: &[Sequence]| Dataset {
            sequences: seqs.to_vec(),
            frames: self.frames,
            features: self.features,
            classes: self.classes,
        };
        (part(&self.sequences[..cut]), part(&self.sequences[cut..]))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (t_len, d) = (self.frames, self.features);
        let b = indices.len();
        let mut inputs = Tensor::zeros(&[t_len, b, d]);
        let mut labels = vec![0; t_len * b];
        for (slot, &i) in indices.iter().enumerate() {
            let seq = self.sequences.get(i).ok_or(Error::OutOfRange {
                what: "sequence",
                index: i,
                limit: self.len(),
            })?;
            for t in 0..t_len {
                let dst = &mut inputs.data_mut()[(t * b + slot) * d..(t * b + slot + 1) * d];
                dst.copy_from_slice(&seq.inputs.data()[t * d..(t + 1) * d]);
                labels[t * b + slot] = seq.labels[t];
            }
        }
        Ok(Batch { inputs, labels })
    }

    /// Consecutive batches of `size` sequences over the whole set; the last one
    /// may be smaller.
    pub fn batches(&self, size: usize) -> Result<Vec<Batch>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Class means of the lookahead task, drawn from the task seed.
pub fn class_means(spec: &TaskSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d65_616e_735f_7631);
    (0..spec.classes)
        .map(|_| (0..spec.features).map(|_| normal(&mut rng)).collect())
        .collect()
}

pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sequences = match spec.kind {
        TaskKind::LookaheadClassify => gen_lookahead(spec, &mut rng)?,
        TaskKind::SlowSignal => gen_slow_signal(spec, &mut rng)?,
    };
    Ok(Dataset {
        sequences,
        frames: spec.frames,
        features: spec.features,
        classes: spec.classes,
    })
}

fn gen_lookahead(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Sequence>> {
    let means = class_means(spec);
    let d = spec.lookahead.unwrap_or(1);
    let (t_len, dim) = (spec.frames, spec.features);
    (0..spec.sequences)
        .map(|_| {
            let frame_classes: Vec<usize> = (0..t_len)
                .map(|_| rng.random_range(0..spec.classes))
                .collect();
            let mut data = Vec::with_capacity(t_len * dim);
            for &c in &frame_classes {
                data.extend(means[c].iter().map(|m| m + CLASS_NOISE * normal(rng)));
            }
            let labels = (0..t_len).map(|t| frame_classes[(t + d).min(t_len - 1)]).collect();
            Ok(Sequence {
                inputs: Tensor::from_vec(&[t_len, dim], data)?,
                labels,
                frame_classes,
            })
        })
        .collect()
}

fn gen_slow_signal(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Sequence>> {
    let w = spec.window.unwrap_or(2);
    let (t_len, dim) = (spec.frames, spec.features);
    let obs_std = OBSERVATION_NOISE / (w as f64).sqrt();

    let mut clean = Vec::with_capacity(spec.sequences);
    let mut observed = Vec::with_capacity(spec.sequences);
    for _ in 0..spec.sequences {
        // w − 1 frames of pre-roll so the moving average is stationary from t = 0
        let noise: Vec<f64> = (0..(t_len + w - 1) * dim).map(|_| normal(rng)).collect();
        let mut s = vec![0.0; t_len * dim];
        for t in 0..t_len {
            for c in 0..dim {
                let acc: f64 = (t..t + w).map(|u| noise[u * dim + c]).sum();
                s[t * dim + c] = acc / w as f64;
            }
        }
        let x: Vec<f64> = s.iter().map(|v| v + obs_std * normal(rng)).collect();
        clean.push(s);
        observed.push(x);
    }

    let mut channel0: Vec<f64> = clean.iter().flat_map(|s| s.iter().step_by(dim).copied()).collect();
    channel0.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..spec.classes)
        .map(|k| channel0[(k * channel0.len() / spec.classes).min(channel0.len() - 1)])
        .collect();

    clean
        .into_iter()
        .zip(observed)
        .map(|(s, x)| {
            let labels = (0..t_len)
                .map(|t| edges.iter().filter(|&&e| s[t * dim] >= e).count())
                .collect();
            Ok(Sequence {
                inputs: Tensor::from_vec(&[t_len, dim], x)?,
                labels,
                frame_classes: Vec::new(),
            })
        })
        .collect()
}
