//! Stacked recurrent models, sequence-level forward/BPTT, latency and
//! receptive-field arithmetic, and checkpoint persistence.

mod checkpoint;
mod latency;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use latency::{model_latency_ms, receptive_field, LatencyModel, ReceptiveField};

use crate::cells::{BnConfig, Cell, MgruCell, MgruipCell, RecurrentCell, StepCache};
use crate::context::{splice, splice_backward, ContextSpec, LayerContextPlan};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, softmax_rows, BnMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    #[serde(rename = "mgru")]
    Mgru,
    #[serde(rename = "mgruip")]
    Mgruip,
    #[serde(rename = "mgruip-ctx")]
    MgruipCtx,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Mgru, CellKind::Mgruip, CellKind::MgruipCtx];

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Mgru => "mgru",
            CellKind::Mgruip => "mgruip",
            CellKind::MgruipCtx => "mgruip-ctx",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mgru" => Ok(CellKind::Mgru),
            "mgruip" => Ok(CellKind::Mgruip),
            "mgruip-ctx" => Ok(CellKind::MgruipCtx),
            _ => Err(Error::InvalidConfig(format!(
                "unknown cell kind `{s}` (expected mgru, mgruip or mgruip-ctx)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub cell_kind: CellKind,
    pub layers: usize,
    pub cells: usize,
    #[serde(default)]
    pub projection: Option<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub bn: BnConfig,
    #[serde(default)]
    pub context: LayerContextPlan,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.cells == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return bad("cells, input_dim and output_dim must be positive".into());
        }
        match (self.cell_kind, self.projection) {
            (CellKind::Mgru, Some(_)) => return bad("mgru has no input projection; remove `projection`".into()),
            (CellKind::Mgruip | CellKind::MgruipCtx, None) => {
                return bad(format!("{} needs a `projection` width", self.cell_kind))
            }
            _ => {}
        }
        if !self.context.is_empty() {
            if self.cell_kind != CellKind::MgruipCtx {
                return bad(format!("context plan given for {}; only mgruip-ctx splices", self.cell_kind));
            }
            if self.context.len() != self.layers - 1 {
                return bad(format!(
                    "context plan has {} entries but layers 2..={} need {}",
                    self.context.len(),
                    self.layers,
                    self.layers - 1
                ));
            }
        }
        if let Some(p) = self.projection {
            for l in 1..=self.layers {
                let d_in = self.layer_input_dim(l);
                if p == 0 || p >= d_in + self.cells {
                    return bad(format!(
                        "projection {p} must be in 1..{} for layer {l} (input {d_in} + cells {})",
                        d_in + self.cells,
                        self.cells
                    ));
                }
            }
        }
        Ok(())
    }

    /// Width consumed by 1-based `layer`, including any splice.
    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer <= 1 {
            self.input_dim
        } else {
            self.layer_context(layer).spliced_width(self.cells)
        }
    }

    pub fn layer_context(&self, layer: usize) -> ContextSpec {
        match self.cell_kind {
            CellKind::MgruipCtx => self.context.for_layer(layer),
            _ => ContextSpec::NONE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub cell: Cell,
    /// Splice applied to the layer below; `None` for layer 1 and non-context models.
    pub context: Option<ContextSpec>,
}

/// A stack of recurrent layers followed by an affine + softmax output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub layers: Vec<Layer>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Everything one forward pass retains for [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input_shape: Vec<usize>,
    layer_steps: Vec<Vec<StepCache>>,
    top: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl ForwardCache {
    pub fn frames(&self) -> usize {
        self.input_shape[0]
    }

    /// Update-gate activations of 1-based `layer`, one `[B, N]` tensor per frame.
    pub fn gates(&self, layer: usize) -> Result<Vec<&Tensor>> {
        let steps = layer
            .checked_sub(1)
            .and_then(|i| self.layer_steps.get(i))
            .ok_or(Error::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.layer_steps.len(),
            })?;
        Ok(steps.iter().map(StepCache::gate).collect())
    }

    pub fn steps(&self, layer: usize) -> Option<&[StepCache]> {
        layer.checked_sub(1).and_then(|i| self.layer_steps.get(i)).map(Vec::as_slice)
    }
}

/// Named parameter gradients (in [`Model::params`] order) and the input gradient.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub params: Vec<(String, Tensor)>,
    pub inputs: Tensor,
}

impl ModelGrads {
    pub fn global_norm(&self) -> f64 {
        self.params.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt()
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            let d_in = config.layer_input_dim(l);
            let cell = match config.cell_kind {
                CellKind::Mgru => Cell::Mgru(MgruCell::new(d_in, config.cells, config.bn, &mut rng)?),
                CellKind::Mgruip | CellKind::MgruipCtx => Cell::Mgruip(MgruipCell::new(
                    d_in,
                    config.cells,
                    config.projection.unwrap_or_default(),
                    config.bn,
                    &mut rng,
                )?),
            };
            let context = (config.cell_kind == CellKind::MgruipCtx && l > 1).then(|| config.layer_context(l));
            layers.push(Layer { cell, context });
        }
        let w_out = Tensor::glorot(config.cells, config.output_dim, &mut rng);
        let b_out = Tensor::zeros(&[config.output_dim]);
        Ok(Model {
            config,
            layers,
            w_out,
            b_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for layer in &mut self.layers {
            layer.cell.set_bn_mode(mode);
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.cell.params() {
                out.push((format!("layer{}.{name}", i + 1), t));
            }
        }
        out.push(("output.w".into(), &self.w_out));
        out.push(("output.b".into(), &self.b_out));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.cell.params_mut() {
                out.push((format!("layer{}.{name}", i + 1), t));
            }
        }
        out.push(("output.w".into(), &mut self.w_out));
        out.push(("output.b".into(), &mut self.b_out));
        out
    }

    /// Trainable tensors followed by every BN running statistic.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.params();
        for (i, layer) in self.layers.iter().enumerate() {
            for (site, st) in layer.cell.bn_states() {
                out.push((format!("layer{}.{site}.running_mean", i + 1), &st.running_mean));
                out.push((format!("layer{}.{site}.running_var", i + 1), &st.running_var));
            }
        }
        out
    }

    /// Visits every tensor of [`Model::named_tensors`] mutably, in the same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor) -> Result<()>) -> Result<()> {
        for (name, t) in self.params_mut() {
            f(&name, t)?;
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (site, st) in layer.cell.bn_states_mut() {
                f(&format!("layer{}.{site}.running_mean", i + 1), &mut st.running_mean)?;
                f(&format!("layer{}.{site}.running_var", i + 1), &mut st.running_var)?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Runs the whole stack over `inputs` `[T, B, D]`, returning per-frame class
    /// probabilities `[T, B, C]`.
    ///
    /// Each layer is evaluated over the full sequence before the next one,
    /// since a splice may read future frames of the layer below.
    pub fn forward(&mut self, inputs: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let cfg = &self.config;
        if inputs.rank() != 3 || inputs.cols() != cfg.input_dim || inputs.shape()[0] == 0 {
            return Err(Error::dim(
                "Model::forward",
                format!("[T >= 1, B, {}]", cfg.input_dim),
                format!("{:?}", inputs.shape()),
            ));
        }
        let (frames, batch) = (inputs.shape()[0], inputs.shape()[1]);
        let n = cfg.cells;
        let mut seq = inputs.clone();
        let mut layer_steps = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let x = match &layer.context {
                Some(spec) => splice(&seq, &seq, spec)?,
                None => seq,
            };
            let mut h = Tensor::zeros(&[batch, n]);
            let mut outs = Vec::with_capacity(frames);
            let mut caches = Vec::with_capacity(frames);
            for t in 0..frames {
                let (h_t, cache) = layer.cell.step(&x.frame(t)?, &h)?;
                outs.push(h_t.clone());
                caches.push(cache);
                h = h_t;
            }
            seq = Tensor::stack_frames(&outs)?;
            layer_steps.push(caches);
        }
        let flat = seq.clone().reshape(&[frames * batch, n])?;
        let logits = matmul(&flat, &self.w_out)?.add_row_vector(&self.b_out)?;
        let probs = softmax_rows(&logits).reshape(&[frames, batch, cfg.output_dim])?;
        let logits = logits.reshape(&[frames, batch, cfg.output_dim])?;
        Ok((
            probs.clone(),
            ForwardCache {
                input_shape: inputs.shape().to_vec(),
                layer_steps,
                top: seq,
                logits,
                probs,
            },
        ))
    }

    /// Backpropagation from a gradient on the output probabilities.
    pub fn backward(&self, cache: &ForwardCache, grad_probs: &Tensor) -> Result<ModelGrads> {
        grad_probs.expect_shape("Model::backward", cache.probs.shape())?;
        let c = self.config.output_dim;
        let mut d_logits = grad_probs.clone();
        for (g_row, p_row) in d_logits.data_mut().chunks_mut(c).zip(cache.probs.data().chunks(c)) {
            let dot: f64 = g_row.iter().zip(p_row).map(|(g, p)| g * p).sum();
            for (g, p) in g_row.iter_mut().zip(p_row) {
                *g = p * (*g - dot);
            }
        }
        self.backward_logits(cache, &d_logits)
    }

    /// Backpropagation through time from a gradient on the pre-softmax logits.
    pub fn backward_logits(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<ModelGrads> {
        grad_logits.expect_shape("Model::backward_logits", cache.logits.shape())?;
        if cache.layer_steps.len() != self.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "cache holds {} layers, model has {}",
                cache.layer_steps.len(),
                self.layers.len()
            )));
        }
        let (frames, batch) = (cache.input_shape[0], cache.input_shape[1]);
        let n = self.config.cells;
        let c = self.config.output_dim;
        let flat_g = grad_logits.clone().reshape(&[frames * batch, c])?;
        let flat_h = cache.top.clone().reshape(&[frames * batch, n])?;
        let d_w_out = matmul_tn(&flat_h, &flat_g)?;
        let d_b_out = flat_g.sum_rows();
        let mut d_seq = matmul_nt(&flat_g, &self.w_out)?.reshape(&[frames, batch, n])?;

        let mut layer_grads: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        for (layer, steps) in self.layers.iter().zip(&cache.layer_steps).rev() {
            if steps.len() != frames {
                return Err(Error::CacheMismatch("step count differs from sequence length".into()));
            }
            let d_in = layer.cell.input_dim();
            let mut acc: Vec<Tensor> = layer.cell.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            let mut d_x = Tensor::zeros(&[frames, batch, d_in]);
            let mut d_next = Tensor::zeros(&[batch, n]);
            for t in (0..frames).rev() {
                let mut d_h = d_seq.frame(t)?;
                d_h.add_assign(&d_next)?;
                let g = layer.cell.backward(&d_h, &steps[t])?;
                for (a, p) in acc.iter_mut().zip(&g.params) {
                    a.add_assign(p)?;
                }
                d_x.frame_slice_mut(t).copy_from_slice(g.x.data());
                d_next = g.h_prev;
            }
            d_seq = match &layer.context {
                Some(spec) => {
                    let below = d_in / (1 + spec.k1 + spec.k2);
                    let (d_cur, d_below) = splice_backward(&d_x, spec, below)?;
                    d_cur.add(&d_below)?
                }
                None => d_x,
            };
            layer_grads.push(acc);
        }
        layer_grads.reverse();

        let mut params = Vec::new();
        for (i, (layer, grads)) in self.layers.iter().zip(layer_grads).enumerate() {
            for ((name, _), g) in layer.cell.params().into_iter().zip(grads) {
                params.push((format!("layer{}.{name}", i + 1), g));
            }
        }
        params.push(("output.w".into(), d_w_out));
        params.push(("output.b".into(), d_b_out));
        Ok(ModelGrads {
            params,
            inputs: d_seq,
        })
    }
}

/// Mean frame-level cross-entropy and its gradient on the logits.
///
/// `labels` is indexed `[t * B + b]`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let c = probs.cols();
    let rows = probs.rows();
    if labels.len() != rows {
        return Err(Error::dim("cross_entropy", format!("{rows} labels"), labels.len()));
    }
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (row, &y) in grad.data_mut().chunks_mut(c).zip(labels) {
        if y >= c {
            return Err(Error::OutOfRange {
                what: "label",
                index: y,
                limit: c,
            });
        }
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= rows as f64);
    }
    Ok((loss / rows as f64, grad))
}

/// Fraction of frames whose arg-max class equals the label.
pub fn frame_accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let c = probs.cols();
    let hits = probs
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}
