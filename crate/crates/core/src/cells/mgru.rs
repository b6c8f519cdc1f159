use rand::Rng;

use super::{
    bn_param_names, check_cache, check_step_inputs, combine, maybe_bn, maybe_bn_backward, BnConfig,
    CellBnMode, GateBnMode, RecurrentCell, StepCache, StepGrads,
};
use crate::error::{Error, Result};
use crate::numerics::{
    matmul, matmul_nt, matmul_tn, relu, relu_backward, sigmoid, sigmoid_backward, BnState, Tensor,
};

/// Minimal gated recurrent unit: no reset gate, ReLU candidate.
///
/// ```text
/// z_t = σ(W_z x_t + U_z h_{t-1} + b_z)
/// h̃_t = ReLU(BN(W_h x_t) + BN(U_h h_{t-1}))
/// h_t = z_t ⊙ h_{t-1} + (1 − z_t) ⊙ h̃_t
/// ```
///
/// The gate may instead use `σ(BN(W_z x) + U_z h)` or `σ(BN(W_z x) + BN(U_z h))`,
/// and the candidate may drop the recurrent BN: `ReLU(BN(W_h x) + U_h h)`.
/// `b_z` only exists when the gate is unnormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct MgruCell {
    pub cfg: BnConfig,
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Option<Tensor>,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub bn_gate_x: Option<BnState>,
    pub bn_gate_h: Option<BnState>,
    pub bn_cell_x: BnState,
    pub bn_cell_h: Option<BnState>,
}

impl MgruCell {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cells: usize, cfg: BnConfig, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || cells == 0 {
            return Err(Error::InvalidConfig(format!(
                "mGRU needs positive widths, got input {input_dim}, cells {cells}"
            )));
        }
        let gate_x = cfg.gate != GateBnMode::NoBn;
        Ok(MgruCell {
            cfg,
            w_z: Tensor::glorot(input_dim, cells, rng),
            u_z: Tensor::glorot(cells, cells, rng),
            b_z: (!gate_x).then(|| Tensor::zeros(&[cells])),
            w_h: Tensor::glorot(input_dim, cells, rng),
            u_h: Tensor::glorot(cells, cells, rng),
            bn_gate_x: gate_x.then(|| BnState::new(cells)),
            bn_gate_h: (cfg.gate == GateBnMode::ItoHAndHtoH).then(|| BnState::new(cells)),
            bn_cell_x: BnState::new(cells),
            bn_cell_h: (cfg.cell == CellBnMode::ItoHAndHtoH).then(|| BnState::new(cells)),
        })
    }
}

impl RecurrentCell for MgruCell {
    fn input_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    fn hidden_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    fn bn_config(&self) -> BnConfig {
        self.cfg
    }

    fn step_with_gate(
        &mut self,
        x: &Tensor,
        h_prev: &Tensor,
        gate: Option<f64>,
    ) -> Result<(Tensor, StepCache)> {
        check_step_inputs("mgru_step", x, h_prev, self.input_dim(), self.hidden_dim())?;

        let (gx, gx_cache) = maybe_bn(matmul(x, &self.w_z)?, self.bn_gate_x.as_mut())?;
        let (gh, gh_cache) = maybe_bn(matmul(h_prev, &self.u_z)?, self.bn_gate_h.as_mut())?;
        let mut gate_pre = gx.add(&gh)?;
        if let Some(b) = &self.b_z {
            gate_pre = gate_pre.add_row_vector(b)?;
        }
        let z = match gate {
            Some(v) => Tensor::full(gate_pre.shape(), v),
            None => sigmoid(&gate_pre),
        };

        let (cx, cx_cache) = maybe_bn(matmul(x, &self.w_h)?, Some(&mut self.bn_cell_x))?;
        let (ch, ch_cache) = maybe_bn(matmul(h_prev, &self.u_h)?, self.bn_cell_h.as_mut())?;
        let cand_pre = cx.add(&ch)?;
        let candidate = relu(&cand_pre);
        let h = combine(&z, h_prev, &candidate);

        Ok((
            h,
            StepCache {
                cfg: self.cfg,
                x: x.clone(),
                h_prev: h_prev.clone(),
                z,
                gate_forced: gate.is_some(),
                cand_pre,
                candidate,
                v1: None,
                v2: None,
                gate_bn: [gx_cache, gh_cache],
                cell_bn: [cx_cache, ch_cache],
            },
        ))
    }

    fn backward(&self, grad_h: &Tensor, cache: &StepCache) -> Result<StepGrads> {
        check_cache("mgru_backward", self.cfg, grad_h, cache)?;
        if cache.v1.is_some() || cache.x.cols() != self.input_dim() {
            return Err(Error::CacheMismatch("mgru_backward: cache is not from an mGRU step".into()));
        }
        let (x, h_prev, z) = (&cache.x, &cache.h_prev, &cache.z);

        let mut d_h_prev = grad_h.mul(z)?;
        let d_cand = grad_h.zip_map(z, "mgru_backward", |g, z| g * (1.0 - z))?;
        let d_cand_pre = relu_backward(&d_cand, &cache.cand_pre)?;

        let mut bn_grads = Vec::new();
        let d_cx = maybe_bn_backward(&d_cand_pre, Some(&self.bn_cell_x), &cache.cell_bn[0], &mut bn_grads, "bn_cell_x")?;
        let d_ch = maybe_bn_backward(&d_cand_pre, self.bn_cell_h.as_ref(), &cache.cell_bn[1], &mut bn_grads, "bn_cell_h")?;
        let d_w_h = matmul_tn(x, &d_cx)?;
        let d_u_h = matmul_tn(h_prev, &d_ch)?;
        let mut d_x = matmul_nt(&d_cx, &self.w_h)?;
        d_h_prev.add_assign(&matmul_nt(&d_ch, &self.u_h)?)?;

        let hidden = self.hidden_dim();
        let (d_w_z, d_u_z, d_b_z) = if cache.gate_forced {
            (
                Tensor::zeros(self.w_z.shape()),
                Tensor::zeros(self.u_z.shape()),
                self.b_z.as_ref().map(|_| Tensor::zeros(&[hidden])),
            )
        } else {
            let d_z = grad_h.mul(&h_prev.sub(&cache.candidate)?)?;
            let d_gate_pre = sigmoid_backward(&d_z, z)?;
            let d_gx = maybe_bn_backward(&d_gate_pre, self.bn_gate_x.as_ref(), &cache.gate_bn[0], &mut bn_grads, "bn_gate_x")?;
            let d_gh = maybe_bn_backward(&d_gate_pre, self.bn_gate_h.as_ref(), &cache.gate_bn[1], &mut bn_grads, "bn_gate_h")?;
            d_x.add_assign(&matmul_nt(&d_gx, &self.w_z)?)?;
            d_h_prev.add_assign(&matmul_nt(&d_gh, &self.u_z)?)?;
            (
                matmul_tn(x, &d_gx)?,
                matmul_tn(h_prev, &d_gh)?,
                self.b_z.as_ref().map(|_| d_gate_pre.sum_rows()),
            )
        };

        let mut params = vec![d_w_z, d_u_z];
        params.extend(d_b_z);
        params.push(d_w_h);
        params.push(d_u_h);
        for (name, _) in self.bn_states() {
            match bn_grads.iter().find(|(n, _, _)| *n == name) {
                Some((_, dg, db)) => {
                    params.push(dg.clone());
                    params.push(db.clone());
                }
                // gate BN sites receive no gradient while the gate is forced
                None => {
                    params.push(Tensor::zeros(&[hidden]));
                    params.push(Tensor::zeros(&[hidden]));
                }
            }
        }
        Ok(StepGrads {
            x: d_x,
            h_prev: d_h_prev,
            params,
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_z".to_string(), &self.w_z), ("u_z".to_string(), &self.u_z)];
        if let Some(b) = &self.b_z {
            out.push(("b_z".to_string(), b));
        }
        out.push(("w_h".to_string(), &self.w_h));
        out.push(("u_h".to_string(), &self.u_h));
        for (site, st) in self.bn_states() {
            let (g, b) = bn_param_names(site);
            out.push((g, &st.gamma));
            out.push((b, &st.beta));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("w_z".to_string(), &mut self.w_z),
            ("u_z".to_string(), &mut self.u_z),
        ];
        if let Some(b) = &mut self.b_z {
            out.push(("b_z".to_string(), b));
        }
        out.push(("w_h".to_string(), &mut self.w_h));
        out.push(("u_h".to_string(), &mut self.u_h));
        let sites = [
            ("bn_gate_x", self.bn_gate_x.as_mut()),
            ("bn_gate_h", self.bn_gate_h.as_mut()),
            ("bn_cell_x", Some(&mut self.bn_cell_x)),
            ("bn_cell_h", self.bn_cell_h.as_mut()),
        ];
        for (site, st) in sites {
            if let Some(st) = st {
                let (g, b) = bn_param_names(site);
                out.push((g, &mut st.gamma));
                out.push((b, &mut st.beta));
            }
        }
        out
    }

    fn bn_states(&self) -> Vec<(&'static str, &BnState)> {
        [
            ("bn_gate_x", self.bn_gate_x.as_ref()),
            ("bn_gate_h", self.bn_gate_h.as_ref()),
            ("bn_cell_x", Some(&self.bn_cell_x)),
            ("bn_cell_h", self.bn_cell_h.as_ref()),
        ]
        .into_iter()
        .filter_map(|(n, s)| s.map(|s| (n, s)))
        .collect()
    }

    fn bn_states_mut(&mut self) -> Vec<(&'static str, &mut BnState)> {
        [
            ("bn_gate_x", self.bn_gate_x.as_mut()),
            ("bn_gate_h", self.bn_gate_h.as_mut()),
            ("bn_cell_x", Some(&mut self.bn_cell_x)),
            ("bn_cell_h", self.bn_cell_h.as_mut()),
        ]
        .into_iter()
        .filter_map(|(n, s)| s.map(|s| (n, s)))
        .collect()
    }
}
