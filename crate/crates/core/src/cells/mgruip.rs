use rand::Rng;

use super::{
    bn_param_names, check_cache, check_step_inputs, combine, maybe_bn, maybe_bn_backward, BnConfig,
    CellBnMode, GateBnMode, RecurrentCell, StepCache, StepGrads,
};
use crate::context::ContextSpec;
use crate::error::{Error, Result};
use crate::numerics::{
    matmul, matmul_nt, matmul_tn, relu, relu_backward, sigmoid, sigmoid_backward, BnState, Tensor,
};

/// mGRU with a shared linear input projection.
///
/// ```text
/// v_t = W_v1 x_t + W_v2 h_{t-1}        (v1 + v2)
/// z_t = σ(W_z v_t + b_z)
/// h̃_t = ReLU(BN(W_h v_t))
/// h_t = z_t ⊙ h_{t-1} + (1 − z_t) ⊙ h̃_t
/// ```
///
/// Gate variants: `σ(BN(W_z v1) + W_z v2)` (the same `W_z` on both halves) and
/// `σ(BN(W_z v))`. The candidate may normalize only the input half,
/// `ReLU(BN(W_h v1) + W_h v2)`. Feeding a spliced input makes this the
/// context-augmented cell; see [`MgruipCell::ctx_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct MgruipCell {
    pub cfg: BnConfig,
    pub w_v1: Tensor,
    pub w_v2: Tensor,
    pub w_z: Tensor,
    pub b_z: Option<Tensor>,
    pub w_h: Tensor,
    pub bn_gate: Option<BnState>,
    pub bn_cell: BnState,
}

impl MgruipCell {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        cells: usize,
        projection: usize,
        cfg: BnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || cells == 0 || projection == 0 {
            return Err(Error::InvalidConfig(format!(
                "mGRUIP needs positive widths, got input {input_dim}, cells {cells}, projection {projection}"
            )));
        }
        if projection >= input_dim + cells {
            return Err(Error::InvalidConfig(format!(
                "projection {projection} must be a bottleneck below input + cells = {}",
                input_dim + cells
            )));
        }
        Ok(MgruipCell {
            cfg,
            w_v1: Tensor::glorot(input_dim, projection, rng),
            w_v2: Tensor::glorot(cells, projection, rng),
            w_z: Tensor::glorot(projection, cells, rng),
            b_z: (cfg.gate == GateBnMode::NoBn).then(|| Tensor::zeros(&[cells])),
            w_h: Tensor::glorot(projection, cells, rng),
            bn_gate: (cfg.gate != GateBnMode::NoBn).then(|| BnState::new(cells)),
            bn_cell: BnState::new(cells),
        })
    }

    pub fn projection_dim(&self) -> usize {
        self.w_v1.shape()[1]
    }

    /// Step on a spliced input `[x_t; h^{l-1} at the splice frames]`.
    ///
    /// Identical to [`RecurrentCell::step`] once the width is checked against
    /// the splice layout `below_width · (1 + K1 + K2)`.
    pub fn ctx_step(
        &mut self,
        x_spliced: &Tensor,
        h_prev: &Tensor,
        spec: &ContextSpec,
        below_width: usize,
    ) -> Result<(Tensor, StepCache)> {
        let width = spec.spliced_width(below_width);
        if width != self.input_dim() || x_spliced.cols() != width {
            return Err(Error::dim(
                "mgruip_ctx_step",
                format!("spliced width {width} matching the cell input {}", self.input_dim()),
                format!("{:?}", x_spliced.shape()),
            ));
        }
        self.step(x_spliced, h_prev)
    }

    fn gate_site(&self) -> &'static str {
        match self.cfg.gate {
            GateBnMode::ItoHAndHtoH => "bn_gate",
            _ => "bn_gate_x",
        }
    }

    fn cell_site(&self) -> &'static str {
        match self.cfg.cell {
            CellBnMode::ItoHAndHtoH => "bn_cell",
            CellBnMode::ItoHOnly => "bn_cell_x",
        }
    }

    /// `W · v` with BN either on the whole projection (`both`) or only on the
    /// input half. Returns (pre-activation, BN cache).
    fn project(
        v1: &Tensor,
        v2: &Tensor,
        v: &Tensor,
        w: &Tensor,
        site: Option<&mut BnState>,
        both: bool,
    ) -> Result<(Tensor, Option<crate::numerics::BnCache>)> {
        match site {
            None => Ok((matmul(v, w)?, None)),
            Some(st) if both => maybe_bn(matmul(v, w)?, Some(st)),
            Some(st) => {
                let (a1, c) = maybe_bn(matmul(v1, w)?, Some(st))?;
                Ok((a1.add(&matmul(v2, w)?)?, c))
            }
        }
    }

    /// Backward of [`Self::project`]: returns (dW, dv1, dv2).
    #[allow(clippy::too_many_arguments)]
    fn project_backward(
        d_pre: &Tensor,
        v1: &Tensor,
        v2: &Tensor,
        w: &Tensor,
        site: Option<&BnState>,
        cache: &Option<crate::numerics::BnCache>,
        both: bool,
        bn_grads: &mut Vec<(&'static str, Tensor, Tensor)>,
        name: &'static str,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        if site.is_none() || both {
            let d_a = maybe_bn_backward(d_pre, site, cache, bn_grads, name)?;
            let v = v1.add(v2)?;
            let d_v = matmul_nt(&d_a, w)?;
            Ok((matmul_tn(&v, &d_a)?, d_v.clone(), d_v))
        } else {
            let d_a1 = maybe_bn_backward(d_pre, site, cache, bn_grads, name)?;
            let mut d_w = matmul_tn(v1, &d_a1)?;
            d_w.add_assign(&matmul_tn(v2, d_pre)?)?;
            Ok((d_w, matmul_nt(&d_a1, w)?, matmul_nt(d_pre, w)?))
        }
    }
}

impl RecurrentCell for MgruipCell {
    fn input_dim(&self) -> usize {
        self.w_v1.shape()[0]
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
        check_step_inputs("mgruip_step", x, h_prev, self.input_dim(), self.hidden_dim())?;
        let v1 = matmul(x, &self.w_v1)?;
        let v2 = matmul(h_prev, &self.w_v2)?;
        let v = v1.add(&v2)?;

        let gate_both = self.cfg.gate == GateBnMode::ItoHAndHtoH;
        let (mut gate_pre, g_cache) =
            Self::project(&v1, &v2, &v, &self.w_z, self.bn_gate.as_mut(), gate_both)?;
        if let Some(b) = &self.b_z {
            gate_pre = gate_pre.add_row_vector(b)?;
        }
        let z = match gate {
            Some(val) => Tensor::full(gate_pre.shape(), val),
            None => sigmoid(&gate_pre),
        };

        let cell_both = self.cfg.cell == CellBnMode::ItoHAndHtoH;
        let (cand_pre, c_cache) =
            Self::project(&v1, &v2, &v, &self.w_h, Some(&mut self.bn_cell), cell_both)?;
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
                v1: Some(v1),
                v2: Some(v2),
                gate_bn: [g_cache, None],
                cell_bn: [c_cache, None],
            },
        ))
    }

    fn backward(&self, grad_h: &Tensor, cache: &StepCache) -> Result<StepGrads> {
        check_cache("mgruip_backward", self.cfg, grad_h, cache)?;
        let (Some(v1), Some(v2)) = (&cache.v1, &cache.v2) else {
            return Err(Error::CacheMismatch("mgruip_backward: cache is not from an mGRUIP step".into()));
        };
        if cache.x.cols() != self.input_dim() {
            return Err(Error::CacheMismatch(format!(
                "mgruip_backward: cached input width {} vs cell input {}",
                cache.x.cols(),
                self.input_dim()
            )));
        }
        let (h_prev, z) = (&cache.h_prev, &cache.z);
        let mut bn_grads = Vec::new();

        let mut d_h_prev = grad_h.mul(z)?;
        let d_cand = grad_h.zip_map(z, "mgruip_backward", |g, z| g * (1.0 - z))?;
        let d_cand_pre = relu_backward(&d_cand, &cache.cand_pre)?;
        let (d_w_h, mut d_v1, mut d_v2) = Self::project_backward(
            &d_cand_pre,
            v1,
            v2,
            &self.w_h,
            Some(&self.bn_cell),
            &cache.cell_bn[0],
            self.cfg.cell == CellBnMode::ItoHAndHtoH,
            &mut bn_grads,
            self.cell_site(),
        )?;

        let (d_w_z, d_b_z) = if cache.gate_forced {
            (
                Tensor::zeros(self.w_z.shape()),
                self.b_z.as_ref().map(|b| Tensor::zeros(b.shape())),
            )
        } else {
            let d_z = grad_h.mul(&h_prev.sub(&cache.candidate)?)?;
            let d_gate_pre = sigmoid_backward(&d_z, z)?;
            let (d_w_z, g_v1, g_v2) = Self::project_backward(
                &d_gate_pre,
                v1,
                v2,
                &self.w_z,
                self.bn_gate.as_ref(),
                &cache.gate_bn[0],
                self.cfg.gate == GateBnMode::ItoHAndHtoH,
                &mut bn_grads,
                self.gate_site(),
            )?;
            d_v1.add_assign(&g_v1)?;
            d_v2.add_assign(&g_v2)?;
            (d_w_z, self.b_z.as_ref().map(|_| d_gate_pre.sum_rows()))
        };

        let d_w_v1 = matmul_tn(&cache.x, &d_v1)?;
        let d_w_v2 = matmul_tn(h_prev, &d_v2)?;
        let d_x = matmul_nt(&d_v1, &self.w_v1)?;
        d_h_prev.add_assign(&matmul_nt(&d_v2, &self.w_v2)?)?;

        let mut params = vec![d_w_v1, d_w_v2, d_w_z];
        params.extend(d_b_z);
        params.push(d_w_h);
        let hidden = self.hidden_dim();
        for (name, _) in self.bn_states() {
            match bn_grads.iter().find(|(n, _, _)| *n == name) {
                Some((_, dg, db)) => {
                    params.push(dg.clone());
                    params.push(db.clone());
                }
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
        let mut out = vec![
            ("w_v1".to_string(), &self.w_v1),
            ("w_v2".to_string(), &self.w_v2),
            ("w_z".to_string(), &self.w_z),
        ];
        if let Some(b) = &self.b_z {
            out.push(("b_z".to_string(), b));
        }
        out.push(("w_h".to_string(), &self.w_h));
        for (site, st) in self.bn_states() {
            let (g, b) = bn_param_names(site);
            out.push((g, &st.gamma));
            out.push((b, &st.beta));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let gate_site = self.gate_site();
        let cell_site = self.cell_site();
        let mut out = vec![
            ("w_v1".to_string(), &mut self.w_v1),
            ("w_v2".to_string(), &mut self.w_v2),
            ("w_z".to_string(), &mut self.w_z),
        ];
        if let Some(b) = &mut self.b_z {
            out.push(("b_z".to_string(), b));
        }
        out.push(("w_h".to_string(), &mut self.w_h));
        if let Some(st) = &mut self.bn_gate {
            let (g, b) = bn_param_names(gate_site);
            out.push((g, &mut st.gamma));
            out.push((b, &mut st.beta));
        }
        let (g, b) = bn_param_names(cell_site);
        out.push((g, &mut self.bn_cell.gamma));
        out.push((b, &mut self.bn_cell.beta));
        out
    }

    fn bn_states(&self) -> Vec<(&'static str, &BnState)> {
        let mut out = Vec::with_capacity(2);
        if let Some(st) = &self.bn_gate {
            out.push((self.gate_site(), st));
        }
        out.push((self.cell_site(), &self.bn_cell));
        out
    }

    fn bn_states_mut(&mut self) -> Vec<(&'static str, &mut BnState)> {
        let gate_site = self.gate_site();
        let cell_site = self.cell_site();
        let mut out = Vec::with_capacity(2);
        if let Some(st) = &mut self.bn_gate {
            out.push((gate_site, st));
        }
        out.push((cell_site, &mut self.bn_cell));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(cfg: BnConfig, seed: u64) -> (MgruipCell, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = MgruipCell::new(3, 5, 3, cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let h = Tensor::uniform(&[4, 5], 1.0, &mut rng).map(f64::abs);
        (cell, x, h)
    }

    #[test]
    fn projection_must_be_a_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MgruipCell::new(3, 5, 8, BnConfig::HYBRID, &mut rng).is_err());
        assert!(MgruipCell::new(3, 5, 7, BnConfig::HYBRID, &mut rng).is_ok());
    }

    #[test]
    fn open_gate_keeps_state() {
        for cfg in BnConfig::grid() {
            let (mut cell, x, h) = instance(cfg, 1);
            let (h1, _) = cell.step_with_gate(&x, &h, Some(1.0)).unwrap();
            assert_eq!(h1, h);
        }
    }

    /// With W_v2 = 0 the projection ignores h_prev, so two different previous
    /// states only differ through the `z ⊙ h_prev` term.
    #[test]
    fn zero_recurrent_projection_isolates_state_path() {
        let cfg = BnConfig::new(GateBnMode::NoBn, CellBnMode::ItoHAndHtoH);
        let (mut cell, x, h_a) = instance(cfg, 2);
        cell.w_v2 = Tensor::zeros(cell.w_v2.shape());
        let h_b = h_a.map(|v| 2.0 * v + 0.5);
        let (out_a, ca) = cell.step(&x, &h_a).unwrap();
        let (out_b, cb) = cell.step(&x, &h_b).unwrap();
        assert_eq!(ca.gate(), cb.gate());
        assert_eq!(ca.candidate(), cb.candidate());
        let diff = out_b.sub(&out_a).unwrap();
        let expected = ca.gate().mul(&h_b.sub(&h_a).unwrap()).unwrap();
        assert!(diff.sub(&expected).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn site_names_follow_config() {
        let (cell, _, _) = instance(BnConfig::new(GateBnMode::ItoHAndHtoH, CellBnMode::ItoHOnly), 3);
        let names: Vec<_> = cell.bn_states().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["bn_gate", "bn_cell_x"]);
        let (cell, _, _) = instance(BnConfig::HYBRID, 3);
        let names: Vec<_> = cell.bn_states().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["bn_gate_x", "bn_cell"]);
    }

    #[test]
    fn zero_upstream_gradient() {
        for cfg in BnConfig::grid() {
            let (mut cell, x, h) = instance(cfg, 4);
            let (_, cache) = cell.step(&x, &h).unwrap();
            let grads = cell.backward(&Tensor::zeros(&[4, 5]), &cache).unwrap();
            assert_eq!(grads.params.len(), cell.params().len());
            assert!(grads.params.iter().all(|p| p.max_abs() == 0.0));
        }
    }

    #[test]
    fn ctx_step_checks_spliced_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ContextSpec::new(1, 2, 1, 1);
        let mut cell = MgruipCell::new(9, 5, 3, BnConfig::HYBRID, &mut rng).unwrap();
        let h = Tensor::zeros(&[4, 5]);
        let x = Tensor::uniform(&[4, 9], 1.0, &mut rng);
        assert!(cell.ctx_step(&x, &h, &spec, 3).is_ok());
        assert!(matches!(cell.ctx_step(&x, &h, &spec, 4), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mgru_cache_rejected() {
        let (cell, _, _) = instance(BnConfig::HYBRID, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut other = super::super::MgruCell::new(3, 5, BnConfig::HYBRID, &mut rng).unwrap();
        let (_, cache) = other.step(&Tensor::zeros(&[4, 3]), &Tensor::zeros(&[4, 5])).unwrap();
        assert!(matches!(cell.backward(&Tensor::zeros(&[4, 5]), &cache), Err(Error::CacheMismatch(_))));
    }
}
