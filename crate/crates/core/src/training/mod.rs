//! Synthetic tasks, the optimizer loop, gradient checking and the
//! update-gate activation tracer.

mod gradcheck;
mod optim;
mod task;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{
    cell_subject, grad_check, gradcheck_sweep, model_subject, relative_error, CellStepSubject,
    CtxStepSubject, GradCheckDyn, GradCheckOptions, GradCheckReport, GradCheckSubject,
    LinearQuadratic, ModelSubject, SweepFilter, SweepScope, WorstCoordinate, REL_ERR_FLOOR,
};
pub use optim::Sgd;
pub use task::{class_means, gen_task, Batch, Dataset, Sequence, TaskKind, TaskSpec};

use crate::error::{Error, Result};
use crate::network::{cross_entropy, frame_accuracy, Model};
use crate::numerics::{BnMode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global-norm clipping threshold.
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Seeds parameter initialization and minibatch shuffling.
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_clip() -> f64 {
    5.0
}

fn default_eval_fraction() -> f64 {
    0.2
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be >= 2: batch normalization in train mode estimates \
                 per-step variance over the batch (got {})",
                self.batch_size
            ));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad(format!("clip must be > 0, got {}", self.clip));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!("eval_fraction must be in (0, 1), got {}", self.eval_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// Serializes metrics as line-delimited JSON records.
pub fn metrics_to_jsonl(metrics: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// Loss and frame accuracy with BN in eval mode. Does not modify `model`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut m = model.clone();
    m.set_bn_mode(BnMode::Eval);
    let (mut loss, mut hits, mut frames) = (0.0, 0.0, 0usize);
    for batch in data.batches(batch_size)? {
        let (p, _) = m.forward(&batch.inputs)?;
        let (l, _) = cross_entropy(&p, &batch.labels)?;
        let n = batch.labels.len();
        loss += l * n as f64;
        hits += frame_accuracy(&p, &batch.labels) * n as f64;
        frames += n;
    }
    let frames = frames.max(1) as f64;
    Ok((loss / frames, hits / frames))
}

fn first_non_finite<'a>(tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> Option<String> {
    tensors.into_iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n)
}

/// Minibatch SGD with momentum and gradient clipping on frame-level
/// cross-entropy, holding out the last `eval_fraction` of `data`.
///
/// BN runs in train mode for updates; the per-epoch metrics (train and eval
/// split) are computed in eval mode. Batches with fewer than two sequences
/// are skipped. Deterministic for fixed seeds.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mc = model.config();
    if mc.input_dim != data.features || mc.output_dim != data.classes {
        return Err(Error::dim(
            "train",
            format!("model input {} / classes {}", mc.input_dim, mc.output_dim),
            format!("dataset features {} / classes {}", data.features, data.classes),
        ));
    }
    let (train_set, eval_set) = data.split(cfg.eval_fraction);
    if train_set.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "training split holds {} sequences; need at least 2",
            train_set.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368_7566);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, Some(cfg.clip));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(2 * cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        model.set_bn_mode(BnMode::Train);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train_set.batch(chunk)?;
            let (p, cache) = model.forward(&batch.inputs)?;
            let (loss, d_logits) = cross_entropy(&p, &batch.labels)?;
            if !loss.is_finite() {
                let culprit = first_non_finite(model.params())
                    .or_else(|| first_non_finite([("logits".to_string(), &cache.logits)]))
                    .unwrap_or_else(|| "loss".to_string());
                return Err(Error::NonFinite(format!("epoch {epoch}: {culprit}")));
            }
            let grads = model.backward_logits(&cache, &d_logits)?;
            if let Some(name) = first_non_finite(model.params())
                .or_else(|| first_non_finite(grads.params.iter().map(|(n, g)| (format!("grad {n}"), g))))
            {
                return Err(Error::NonFinite(format!("epoch {epoch}: {name}")));
            }
            opt.step(model.params_mut(), &grads.params)?;
        }
        model.set_bn_mode(BnMode::Eval);
        for (split, set) in [(Split::Train, &train_set), (Split::Eval, &eval_set)] {
            let (loss, accuracy) = evaluate(model, set, cfg.batch_size)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}: {split:?} loss")));
            }
            metrics.push(EpochMetrics {
                epoch,
                split,
                loss,
                accuracy,
            });
        }
    }
    Ok(metrics)
}

/// Per-frame update-gate activation averaged over cells and batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: usize,
    pub layer: usize,
    pub mean_gate: f64,
}

/// Gate trace of 1-based `layer` on `inputs` `[T, B, D]`, with BN in eval mode.
/// The model is left untouched.
pub fn trace_gate(model: &Model, inputs: &Tensor, layer: usize) -> Result<Vec<TraceRecord>> {
    let layers = model.layers.len();
    if layer == 0 || layer > layers {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: layers,
        });
    }
    let mut m = model.clone();
    m.set_bn_mode(BnMode::Eval);
    let (_, cache) = m.forward(inputs)?;
    Ok(cache
        .gates(layer)?
        .into_iter()
        .enumerate()
        .map(|(t, z)| TraceRecord {
            t,
            layer,
            mean_gate: z.mean(),
        })
        .collect())
}

/// CSV with header `t,layer,mean_gate`.
pub fn trace_to_csv(records: &[TraceRecord]) -> String {
    let mut out = String::from("t,layer,mean_gate\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.t, r.layer, r.mean_gate);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{BnConfig, CellBnMode, GateBnMode, RecurrentCell};
    use crate::context::LayerContextPlan;
    use crate::network::{CellKind, ModelConfig};

    fn small_model(bn: BnConfig) -> Model {
        let cfg = ModelConfig {
            cell_kind: CellKind::Mgruip,
            layers: 2,
            cells: 6,
            projection: Some(4),
            input_dim: 4,
            output_dim: 3,
            bn,
            context: LayerContextPlan::empty(),
        };
        Model::new(cfg, 3).unwrap()
    }

    fn train_cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            momentum: 0.9,
            batch_size: 4,
            epochs: 2,
            clip: 5.0,
            eval_fraction: 0.25,
            seed: 1,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let data = gen_task(&TaskSpec::lookahead(8, 4, 3, 1, 12, 2)).unwrap();
        let mut model = small_model(BnConfig::HYBRID);
        let before: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
        let metrics = train(&mut model, &data, &train_cfg(0.0)).unwrap();
        assert_eq!(metrics.len(), 4);
        let after: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_reproducible() {
        let data = gen_task(&TaskSpec::slow_signal(10, 3, 3, 4, 12, 5)).unwrap();
        let run = || {
            let mut m = Model::new(
                ModelConfig {
                    input_dim: 3,
                    ..small_model(BnConfig::HYBRID).config().clone()
                },
                3,
            )
            .unwrap();
            let metrics = train(&mut m, &data, &train_cfg(0.05)).unwrap();
            (metrics_to_jsonl(&metrics), m.to_checkpoint_bytes().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn width_mismatch_rejected() {
        let data = gen_task(&TaskSpec::lookahead(8, 5, 3, 1, 12, 2)).unwrap();
        let mut model = small_model(BnConfig::HYBRID);
        assert!(matches!(train(&mut model, &data, &train_cfg(0.1)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batch_size_one_rejected() {
        let mut cfg = train_cfg(0.1);
        cfg.batch_size = 1;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
    }

    #[test]
    fn divergence_is_reported() {
        let data = gen_task(&TaskSpec::lookahead(8, 4, 3, 1, 12, 2)).unwrap();
        let mut model = small_model(BnConfig::HYBRID);
        model.w_out.data_mut()[0] = f64::NAN;
        match train(&mut model, &data, &train_cfg(0.1)) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("output.w"), "{msg}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn zero_gate_weights_trace_exactly_half() {
        let mut model = small_model(BnConfig::new(GateBnMode::NoBn, CellBnMode::ItoHAndHtoH));
        for layer in &mut model.layers {
            for (name, t) in layer.cell.params_mut() {
                if name == "w_z" || name == "b_z" {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let data = gen_task(&TaskSpec::lookahead(9, 4, 3, 1, 4, 2)).unwrap();
        let batch = data.batch(&[0, 1, 2, 3]).unwrap();
        let trace = trace_gate(&model, &batch.inputs, 2).unwrap();
        assert_eq!(trace.len(), 9);
        assert!(trace.iter().all(|r| r.mean_gate == 0.5));
    }

    #[test]
    fn trace_does_not_mutate_and_checks_layer() {
        let model = small_model(BnConfig::HYBRID);
        let data = gen_task(&TaskSpec::lookahead(5, 4, 3, 1, 4, 2)).unwrap();
        let batch = data.batch(&[0, 1]).unwrap();
        let before = model.clone();
        let trace = trace_gate(&model, &batch.inputs, 1).unwrap();
        assert_eq!(model, before);
        assert!(trace.iter().all(|r| r.mean_gate > 0.0 && r.mean_gate < 1.0));
        assert!(matches!(trace_gate(&model, &batch.inputs, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(trace_gate(&model, &batch.inputs, 3), Err(Error::OutOfRange { .. })));
        let csv = trace_to_csv(&trace);
        assert!(csv.starts_with("t,layer,mean_gate\n"));
        assert_eq!(csv.lines().count(), 6);
    }
}
