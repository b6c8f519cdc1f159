//! Recurrent cells: mGRU and mGRUIP (also used, on spliced input, as the
//! context-augmented mGRUIP-Ctx cell), each with every batch-normalization
//! placement on the update gate and the ReLU candidate.

mod mgru;
mod mgruip;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use mgru::MgruCell;
pub use mgruip::MgruipCell;

use crate::error::{Error, Result};
use crate::numerics::{batch_norm, batch_norm_backward, BnCache, BnMode, BnState, Tensor};

/// Where batch normalization is applied on the update-gate pre-activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateBnMode {
    #[serde(rename = "none")]
    NoBn,
    #[serde(rename = "itoh")]
    ItoHOnly,
    #[serde(rename = "itoh-htoh")]
    ItoHAndHtoH,
}

/// Where batch normalization is applied on the ReLU candidate pre-activation.
/// There is no unnormalized variant: an unbounded ReLU without BN is unstable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellBnMode {
    #[serde(rename = "itoh")]
    ItoHOnly,
    #[serde(rename = "itoh-htoh")]
    ItoHAndHtoH,
}

impl GateBnMode {
    pub const ALL: [GateBnMode; 3] = [GateBnMode::NoBn, GateBnMode::ItoHOnly, GateBnMode::ItoHAndHtoH];

    pub fn as_str(self) -> &'static str {
        match self {
            GateBnMode::NoBn => "none",
            GateBnMode::ItoHOnly => "itoh",
            GateBnMode::ItoHAndHtoH => "itoh-htoh",
        }
    }
}

impl CellBnMode {
    pub const ALL: [CellBnMode; 2] = [CellBnMode::ItoHOnly, CellBnMode::ItoHAndHtoH];

    pub fn as_str(self) -> &'static str {
        match self {
            CellBnMode::ItoHOnly => "itoh",
            CellBnMode::ItoHAndHtoH => "itoh-htoh",
        }
    }
}

impl fmt::Display for GateBnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for CellBnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateBnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GateBnMode::NoBn),
            "itoh" => Ok(GateBnMode::ItoHOnly),
            "itoh-htoh" | "both" => Ok(GateBnMode::ItoHAndHtoH),
            _ => Err(Error::InvalidConfig(format!(
                "unknown gate BN mode `{s}` (expected none, itoh or itoh-htoh)"
            ))),
        }
    }
}

impl FromStr for CellBnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itoh" => Ok(CellBnMode::ItoHOnly),
            "itoh-htoh" | "both" => Ok(CellBnMode::ItoHAndHtoH),
            _ => Err(Error::InvalidConfig(format!(
                "unknown cell BN mode `{s}` (expected itoh or itoh-htoh)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnConfig {
    pub gate: GateBnMode,
    pub cell: CellBnMode,
}

impl BnConfig {
    pub const fn new(gate: GateBnMode, cell: CellBnMode) -> Self {
        BnConfig { gate, cell }
    }

    /// BN on the gate's ItoH path only, BN on both candidate paths.
    pub const HYBRID: BnConfig = BnConfig::new(GateBnMode::ItoHOnly, CellBnMode::ItoHAndHtoH);

    /// Every (gate, cell) combination.
    pub fn grid() -> Vec<BnConfig> {
        GateBnMode::ALL
            .iter()
            .flat_map(|&g| CellBnMode::ALL.iter().map(move |&c| BnConfig::new(g, c)))
            .collect()
    }
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig::HYBRID
    }
}

impl fmt::Display for BnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gate={} cell={}", self.gate, self.cell)
    }
}

/// Intermediates of one cell step, consumed by the matching backward call.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub(crate) cfg: BnConfig,
    pub(crate) x: Tensor,
    pub(crate) h_prev: Tensor,
    pub(crate) z: Tensor,
    pub(crate) gate_forced: bool,
    pub(crate) cand_pre: Tensor,
    pub(crate) candidate: Tensor,
    /// Input and recurrent projections (mGRUIP only).
    pub(crate) v1: Option<Tensor>,
    pub(crate) v2: Option<Tensor>,
    pub(crate) gate_bn: [Option<BnCache>; 2],
    pub(crate) cell_bn: [Option<BnCache>; 2],
}

impl StepCache {
    /// Update-gate activation `z_t`, `[B, N]`.
    pub fn gate(&self) -> &Tensor {
        &self.z
    }

    /// ReLU candidate state `h̃_t`, `[B, N]`.
    pub fn candidate(&self) -> &Tensor {
        &self.candidate
    }

    pub fn h_prev(&self) -> &Tensor {
        &self.h_prev
    }
}

/// Gradients of one step: inputs, previous state and every trainable tensor
/// in [`RecurrentCell::params`] order.
#[derive(Clone, Debug)]
pub struct StepGrads {
    pub x: Tensor,
    pub h_prev: Tensor,
    pub params: Vec<Tensor>,
}

pub trait RecurrentCell {
    fn input_dim(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn bn_config(&self) -> BnConfig;

    /// One step; `gate` overrides `z_t` with a constant when set.
    fn step_with_gate(
        &mut self,
        x: &Tensor,
        h_prev: &Tensor,
        gate: Option<f64>,
    ) -> Result<(Tensor, StepCache)>;

    fn step(&mut self, x: &Tensor, h_prev: &Tensor) -> Result<(Tensor, StepCache)> {
        self.step_with_gate(x, h_prev, None)
    }

    fn backward(&self, grad_h: &Tensor, cache: &StepCache) -> Result<StepGrads>;

    /// Trainable tensors, including BN affine parameters.
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
    fn bn_states(&self) -> Vec<(&'static str, &BnState)>;
    fn bn_states_mut(&mut self) -> Vec<(&'static str, &mut BnState)>;

    fn set_bn_mode(&mut self, mode: BnMode) {
        for (_, st) in self.bn_states_mut() {
            st.mode = mode;
        }
    }
}

/// Either cell kind behind one type, for stacking in a network.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Mgru(MgruCell),
    Mgruip(MgruipCell),
}

impl RecurrentCell for Cell {
    fn input_dim(&self) -> usize {
        match self {
            Cell::Mgru(c) => c.input_dim(),
            Cell::Mgruip(c) => c.input_dim(),
        }
    }

    fn hidden_dim(&self) -> usize {
        match self {
            Cell::Mgru(c) => c.hidden_dim(),
            Cell::Mgruip(c) => c.hidden_dim(),
        }
    }

    fn bn_config(&self) -> BnConfig {
        match self {
            Cell::Mgru(c) => c.bn_config(),
            Cell::Mgruip(c) => c.bn_config(),
        }
    }

    fn step_with_gate(
        &mut self,
        x: &Tensor,
        h_prev: &Tensor,
        gate: Option<f64>,
    ) -> Result<(Tensor, StepCache)> {
        match self {
            Cell::Mgru(c) => c.step_with_gate(x, h_prev, gate),
            Cell::Mgruip(c) => c.step_with_gate(x, h_prev, gate),
        }
    }

    fn backward(&self, grad_h: &Tensor, cache: &StepCache) -> Result<StepGrads> {
        match self {
            Cell::Mgru(c) => c.backward(grad_h, cache),
            Cell::Mgruip(c) => c.backward(grad_h, cache),
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Cell::Mgru(c) => c.params(),
            Cell::Mgruip(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Cell::Mgru(c) => c.params_mut(),
            Cell::Mgruip(c) => c.params_mut(),
        }
    }

    fn bn_states(&self) -> Vec<(&'static str, &BnState)> {
        match self {
            Cell::Mgru(c) => c.bn_states(),
            Cell::Mgruip(c) => c.bn_states(),
        }
    }

    fn bn_states_mut(&mut self) -> Vec<(&'static str, &mut BnState)> {
        match self {
            Cell::Mgru(c) => c.bn_states_mut(),
            Cell::Mgruip(c) => c.bn_states_mut(),
        }
    }
}

fn check_step_inputs(
    op: &'static str,
    x: &Tensor,
    h_prev: &Tensor,
    input_dim: usize,
    hidden: usize,
) -> Result<usize> {
    if x.rank() != 2 || x.cols() != input_dim {
        return Err(Error::dim(op, format!("x [B, {input_dim}]"), format!("{:?}", x.shape())));
    }
    let b = x.rows();
    h_prev.expect_shape(op, &[b, hidden])?;
    Ok(b)
}

fn check_cache(op: &'static str, cfg: BnConfig, grad_h: &Tensor, cache: &StepCache) -> Result<()> {
    if cache.cfg != cfg {
        return Err(Error::CacheMismatch(format!(
            "{op}: cache built with {} but cell uses {cfg}",
            cache.cfg
        )));
    }
    if grad_h.shape() != cache.h_prev.shape() {
        return Err(Error::CacheMismatch(format!(
            "{op}: upstream gradient {:?} vs cached state {:?}",
            grad_h.shape(),
            cache.h_prev.shape()
        )));
    }
    Ok(())
}

/// Normalizes through `site` when present, otherwise passes the input through.
fn maybe_bn(x: Tensor, site: Option<&mut BnState>) -> Result<(Tensor, Option<BnCache>)> {
    match site {
        Some(st) => {
            let (y, c) = batch_norm(&x, st)?;
            Ok((y, Some(c)))
        }
        None => Ok((x, None)),
    }
}

/// Backward through [`maybe_bn`]; BN affine gradients are pushed onto `out`.
fn maybe_bn_backward(
    grad: &Tensor,
    site: Option<&BnState>,
    cache: &Option<BnCache>,
    out: &mut Vec<(&'static str, Tensor, Tensor)>,
    name: &'static str,
) -> Result<Tensor> {
    match (site, cache) {
        (Some(st), Some(c)) => {
            let (dx, dg, db) = batch_norm_backward(grad, c, st)?;
            out.push((name, dg, db));
            Ok(dx)
        }
        (None, None) => Ok(grad.clone()),
        _ => Err(Error::CacheMismatch(format!("BN site {name} presence differs from cache"))),
    }
}

/// Gate and state combination shared by both cells:
/// `h_t = z ⊙ h_prev + (1 − z) ⊙ h̃`.
fn combine(z: &Tensor, h_prev: &Tensor, candidate: &Tensor) -> Tensor {
    let mut out = h_prev.clone();
    for ((o, &zv), &c) in out.data_mut().iter_mut().zip(z.data()).zip(candidate.data()) {
        let (lo, hi) = if *o <= c { (*o, c) } else { (c, *o) };
        // rounding can land one ulp outside the hull
        let v = zv * *o + (1.0 - zv) * c;
        *o = if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            v
        };
    }
    out
}

fn bn_param_names(site: &str) -> (String, String) {
    (format!("{site}.gamma"), format!("{site}.beta"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for g in GateBnMode::ALL {
            assert_eq!(g.as_str().parse::<GateBnMode>().unwrap(), g);
        }
        for c in CellBnMode::ALL {
            assert_eq!(c.as_str().parse::<CellBnMode>().unwrap(), c);
        }
        assert!("nobn".parse::<GateBnMode>().is_err());
        assert!("none".parse::<CellBnMode>().is_err());
    }

    #[test]
    fn grid_has_six_configs() {
        let grid = BnConfig::grid();
        assert_eq!(grid.len(), 6);
        assert!(grid.contains(&BnConfig::HYBRID));
    }
}
