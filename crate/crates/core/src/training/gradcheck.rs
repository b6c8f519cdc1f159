//! Central-difference gradient verification.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cells::{BnConfig, Cell, CellBnMode, GateBnMode, MgruCell, MgruipCell, RecurrentCell};
use crate::context::{splice, splice_backward, ContextSpec, LayerContextPlan};
use crate::error::Result;
use crate::network::{cross_entropy, CellKind, Model, ModelConfig};
use crate::numerics::{matmul, matmul_tn, Tensor};

/// Something with a scalar loss, analytic gradients and perturbable inputs.
///
/// `grads` and `params_mut` must list the same tensors in the same order.
/// `loss` must not depend on state mutated by previous evaluations.
pub trait GradCheckSubject {
    fn loss(&self) -> Result<f64>;
    fn grads(&self) -> Result<Vec<(String, Tensor)>>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Above this many coordinates a random subsample of this size is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Test hook: perturbs one analytic coordinate so the check must fail.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 10_000,
            seed: 0,
            corrupt_analytic: false,
        }
    }
}

/// Denominator floor of the relative error; gradients below it are compared
/// on an absolute scale of this size.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstCoordinate>,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<44} coords={:<5} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.label,
            self.checked,
            self.max_rel_err
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " worst={}[{}] analytic={:.6e} numeric={:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

pub fn grad_check<S: GradCheckSubject>(
    subject: &mut S,
    label: impl Into<String>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut analytic = subject.grads()?;
    if opts.corrupt_analytic {
        if let Some((_, g)) = analytic.iter_mut().find(|(_, g)| !g.is_empty()) {
            let v = &mut g.data_mut()[0];
            *v += 1e-2 * (v.abs() + 1.0);
        }
    }
    let mut coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(p, (_, g))| (0..g.len()).map(move |i| (p, i)))
        .collect();
    if coords.len() > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    for &(p, i) in &coords {
        let original = subject.params_mut()[p].1.data()[i];
        subject.params_mut()[p].1.data_mut()[i] = original + opts.step;
        let plus = subject.loss()?;
        subject.params_mut()[p].1.data_mut()[i] = original - opts.step;
        let minus = subject.loss()?;
        subject.params_mut()[p].1.data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[p].1.data()[i];
        let err = relative_error(a, numeric);
        if err > max_rel_err || err.is_nan() {
            max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            worst = Some(WorstCoordinate {
                param: analytic[p].0.clone(),
                index: i,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(GradCheckReport {
        label: label.into(),
        checked: coords.len(),
        max_rel_err,
        worst,
        tolerance: opts.tolerance,
        passed: max_rel_err <= opts.tolerance,
    })
}

/// `L = ½‖x W − y‖²` over `W`; its central difference is exact up to rounding.
#[derive(Clone, Debug)]
pub struct LinearQuadratic {
    pub x: Tensor,
    pub w: Tensor,
    pub y: Tensor,
}

impl GradCheckSubject for LinearQuadratic {
    fn loss(&self) -> Result<f64> {
        Ok(0.5 * matmul(&self.x, &self.w)?.sub(&self.y)?.sum_squares())
    }

    fn grads(&self) -> Result<Vec<(String, Tensor)>> {
        let r = matmul(&self.x, &self.w)?.sub(&self.y)?;
        Ok(vec![("w".into(), matmul_tn(&self.x, &r)?)])
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w".into(), &mut self.w)]
    }
}

/// Loss used for single-step checks: `Σ r ⊙ h_t + ½ Σ h_t²`.
fn step_loss(h: &Tensor, r: &Tensor) -> Result<(f64, Tensor)> {
    let loss = h.mul(r)?.sum() + 0.5 * h.sum_squares();
    Ok((loss, r.add(h)?))
}

/// One cell step on fixed inputs; checks parameters, `x` and `h_prev`.
#[derive(Clone, Debug)]
pub struct CellStepSubject {
    pub cell: Cell,
    pub x: Tensor,
    pub h_prev: Tensor,
    pub weights: Tensor,
}

impl GradCheckSubject for CellStepSubject {
    fn loss(&self) -> Result<f64> {
        let mut cell = self.cell.clone();
        let (h, _) = cell.step(&self.x, &self.h_prev)?;
        Ok(step_loss(&h, &self.weights)?.0)
    }

    fn grads(&self) -> Result<Vec<(String, Tensor)>> {
        let mut cell = self.cell.clone();
        let (h, cache) = cell.step(&self.x, &self.h_prev)?;
        let (_, d_h) = step_loss(&h, &self.weights)?;
        let g = self.cell.backward(&d_h, &cache)?;
        let mut out: Vec<(String, Tensor)> = self
            .cell
            .params()
            .into_iter()
            .map(|(n, _)| n)
            .zip(g.params)
            .collect();
        out.push(("x".into(), g.x));
        out.push(("h_prev".into(), g.h_prev));
        Ok(out)
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.cell.params_mut();
        out.push(("x".into(), &mut self.x));
        out.push(("h_prev".into(), &mut self.h_prev));
        out
    }
}

/// Context-cell step on frame `t` of a spliced lower-layer sequence; the
/// gradient reaches the lower layer through the splice adjoint.
#[derive(Clone, Debug)]
pub struct CtxStepSubject {
    pub cell: MgruipCell,
    pub spec: ContextSpec,
    pub h_below: Tensor,
    pub h_prev: Tensor,
    pub frame: usize,
    pub weights: Tensor,
}

impl CtxStepSubject {
    fn run(&self) -> Result<(MgruipCell, Tensor, crate::cells::StepCache)> {
        let mut cell = self.cell.clone();
        let spliced = splice(&self.h_below, &self.h_below, &self.spec)?;
        let below = self.h_below.cols();
        let (h, cache) = cell.ctx_step(&spliced.frame(self.frame)?, &self.h_prev, &self.spec, below)?;
        Ok((cell, h, cache))
    }
}

impl GradCheckSubject for CtxStepSubject {
    fn loss(&self) -> Result<f64> {
        let (_, h, _) = self.run()?;
        Ok(step_loss(&h, &self.weights)?.0)
    }

    fn grads(&self) -> Result<Vec<(String, Tensor)>> {
        let (_, h, cache) = self.run()?;
        let (_, d_h) = step_loss(&h, &self.weights)?;
        let g = self.cell.backward(&d_h, &cache)?;
        let s = self.h_below.shape();
        let width = self.spec.spliced_width(s[2]);
        let mut d_spliced = Tensor::zeros(&[s[0], s[1], width]);
        d_spliced.frame_slice_mut(self.frame).copy_from_slice(g.x.data());
        let (d_cur, d_below) = splice_backward(&d_spliced, &self.spec, s[2])?;
        let mut out: Vec<(String, Tensor)> = self
            .cell
            .params()
            .into_iter()
            .map(|(n, _)| n)
            .zip(g.params)
            .collect();
        out.push(("h_below".into(), d_cur.add(&d_below)?));
        out.push(("h_prev".into(), g.h_prev));
        Ok(out)
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.cell.params_mut();
        out.push(("h_below".into(), &mut self.h_below));
        out.push(("h_prev".into(), &mut self.h_prev));
        out
    }
}

/// Full model with frame-level cross-entropy; checks parameters and inputs.
#[derive(Clone, Debug)]
pub struct ModelSubject {
    pub model: Model,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl GradCheckSubject for ModelSubject {
    fn loss(&self) -> Result<f64> {
        let mut m = self.model.clone();
        let (p, _) = m.forward(&self.inputs)?;
        Ok(cross_entropy(&p, &self.labels)?.0)
    }

    fn grads(&self) -> Result<Vec<(String, Tensor)>> {
        let mut m = self.model.clone();
        let (p, cache) = m.forward(&self.inputs)?;
        let (_, d_logits) = cross_entropy(&p, &self.labels)?;
        let g = self.model.backward_logits(&cache, &d_logits)?;
        let mut out = g.params;
        out.push(("inputs".into(), g.inputs));
        Ok(out)
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.model.params_mut();
        out.push(("inputs".into(), &mut self.inputs));
        out
    }
}

/// Batch, cells, projection and input widths of the per-cell sweep.
pub const SWEEP_BATCH: usize = 4;
pub const SWEEP_CELLS: usize = 5;
pub const SWEEP_PROJECTION: usize = 3;
pub const SWEEP_INPUT: usize = 3;

fn randomize_bn<C: RecurrentCell>(cell: &mut C, rng: &mut ChaCha8Rng) {
    for (_, st) in cell.bn_states_mut() {
        let n = st.channels();
        st.gamma = Tensor::uniform(&[n], 0.5, rng).map(|v| v + 1.0);
        st.beta = Tensor::uniform(&[n], 0.5, rng);
    }
}

/// Single-step subject for `kind` × `cfg` at the sweep sizes.
pub fn cell_subject(kind: CellKind, cfg: BnConfig, seed: u64) -> Result<Box<dyn GradCheckDyn>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, n, p, d) = (SWEEP_BATCH, SWEEP_CELLS, SWEEP_PROJECTION, SWEEP_INPUT);
    let h_prev = Tensor::uniform(&[b, n], 1.0, &mut rng).map(f64::abs);
    let weights = Tensor::uniform(&[b, n], 1.0, &mut rng);
    Ok(match kind {
        CellKind::Mgru | CellKind::Mgruip => {
            let cell = if kind == CellKind::Mgru {
                let mut c = MgruCell::new(d, n, cfg, &mut rng)?;
                randomize_bn(&mut c, &mut rng);
                Cell::Mgru(c)
            } else {
                let mut c = MgruipCell::new(d, n, p, cfg, &mut rng)?;
                randomize_bn(&mut c, &mut rng);
                Cell::Mgruip(c)
            };
            let x = Tensor::uniform(&[b, d], 1.0, &mut rng);
            Box::new(CellStepSubject {
                cell,
                x,
                h_prev,
                weights,
            })
        }
        CellKind::MgruipCtx => {
            let spec = ContextSpec::new(1, 1, 1, 2);
            let mut cell = MgruipCell::new(spec.spliced_width(d), n, p, cfg, &mut rng)?;
            randomize_bn(&mut cell, &mut rng);
            let h_below = Tensor::uniform(&[6, b, d], 1.0, &mut rng);
            Box::new(CtxStepSubject {
                cell,
                spec,
                h_below,
                h_prev,
                frame: 4,
                weights,
            })
        }
    })
}

/// Tiny stacked model: L = 2, N = 4, P = 3, T = 6, B = 3, plan `{1×1; 1×2}`.
pub fn model_subject(kind: CellKind, cfg: BnConfig, seed: u64) -> Result<ModelSubject> {
    let config = ModelConfig {
        cell_kind: kind,
        layers: 2,
        cells: 4,
        projection: (kind != CellKind::Mgru).then_some(3),
        input_dim: 3,
        output_dim: 3,
        bn: cfg,
        context: if kind == CellKind::MgruipCtx {
            LayerContextPlan::new(vec![ContextSpec::new(1, 1, 1, 2)])
        } else {
            LayerContextPlan::empty()
        },
    };
    let mut model = Model::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for layer in &mut model.layers {
        randomize_bn(&mut layer.cell, &mut rng);
    }
    let inputs = Tensor::uniform(&[6, 3, 3], 1.0, &mut rng);
    let labels = (0..18).map(|i| (i * 7 + seed as usize) % 3).collect();
    Ok(ModelSubject {
        model,
        inputs,
        labels,
    })
}

/// Object-safe wrapper so the sweep can hold heterogeneous subjects.
pub trait GradCheckDyn {
    fn check(&mut self, label: &str, opts: &GradCheckOptions) -> Result<GradCheckReport>;
}

impl<S: GradCheckSubject> GradCheckDyn for S {
    fn check(&mut self, label: &str, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        grad_check(self, label, opts)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SweepScope {
    #[default]
    All,
    Cells,
    Model,
}

/// Restricts the sweep grid; `None` fields mean "every value".
#[derive(Clone, Copy, Debug, Default)]
pub struct SweepFilter {
    pub cell: Option<CellKind>,
    pub gate: Option<GateBnMode>,
    pub cell_bn: Option<CellBnMode>,
    pub scope: SweepScope,
}

/// Runs every selected (cell kind × gate BN × cell BN) check, single-step and/or
/// full-model.
pub fn gradcheck_sweep(filter: &SweepFilter, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (ki, kind) in CellKind::ALL.into_iter().enumerate() {
        if filter.cell.is_some_and(|c| c != kind) {
            continue;
        }
        for (ci, cfg) in BnConfig::grid().into_iter().enumerate() {
            if filter.gate.is_some_and(|g| g != cfg.gate) || filter.cell_bn.is_some_and(|c| c != cfg.cell) {
                continue;
            }
            let seed = 1000 + 10 * ki as u64 + ci as u64;
            if filter.scope != SweepScope::Model {
                let label = format!("cell {kind} gate={} cell={}", cfg.gate, cfg.cell);
                reports.push(cell_subject(kind, cfg, seed)?.check(&label, opts)?);
            }
            if filter.scope != SweepScope::Cells {
                let label = format!("model {kind} gate={} cell={}", cfg.gate, cfg.cell);
                reports.push(model_subject(kind, cfg, seed)?.check(&label, opts)?);
            }
        }
    }
    Ok(reports)
}
