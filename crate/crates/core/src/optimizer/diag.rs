//! Elementwise (diagonal) reference optimizers.
//!
//! `x ← x - α_t m_t / (√v̂_t + ε)` with `v̂_t` per the diagonal design table.
//! With `ε = δ` these match [`BlockOptimizer`](super::BlockOptimizer) over
//! size-1 groups.

use super::{update_first_moment, Design, OptimizerState, Variant};
use crate::grouping::partition_chunk;
use crate::linalg::SymMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiagState {
    pub t: u64,
    pub m: Vec<f64>,
    /// `v̂_t`
    pub v: Vec<f64>,
    /// Plain EMA `v_t` behind the AMSGrad maximum.
    pub v_ema: Vec<f64>,
}

impl DiagState {
    pub fn new(d: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; d],
            v: vec![0.0; d],
            v_ema: vec![0.0; d],
        }
    }

    /// Same state expressed as a block state with `d` groups of size 1.
    pub fn to_block_state(&self, design: &Design) -> Result<OptimizerState> {
        let d = self.m.len();
        let partition = partition_chunk(d, 1)?;
        let mut st = OptimizerState::new(design, &partition);
        st.t = self.t;
        st.m.clone_from(&self.m);
        let acc = if design.variant == Variant::AmsGrad {
            &self.v_ema
        } else {
            &self.v
        };
        for (b, &v) in st.v.blocks_mut().iter_mut().zip(acc) {
            *b = SymMatrix::from_diag(&[v]);
        }
        if let Some(mx) = st.ams_eigmax.as_mut() {
            for (m, &v) in mx.iter_mut().zip(&self.v) {
                m[0] = v;
            }
        }
        st.refresh_spectra(design.variant)?;
        Ok(st)
    }

    pub fn from_block_state(st: &OptimizerState) -> Result<Self> {
        if st.v.partition().sizes().iter().any(|&n| n != 1) {
            return Err(Error::InvalidArgument(
                "diagonal state needs groups of size 1".into(),
            ));
        }
        let ema: Vec<f64> = st.v.blocks().iter().map(|b| b.get(0, 0)).collect();
        let v = match &st.ams_eigmax {
            Some(mx) => mx.iter().map(|m| m[0]).collect(),
            None => ema.clone(),
        };
        Ok(Self {
            t: st.t,
            m: st.m.clone(),
            v,
            v_ema: ema,
        })
    }
}

/// One elementwise step. Returns nothing; `x` and `state` are updated in place.
pub fn diag_reference_step(
    x: &mut [f64],
    state: &mut DiagState,
    g: &[f64],
    design: &Design,
    alpha_t: f64,
    eps: f64,
) -> Result<()> {
    let d = x.len();
    if g.len() != d || state.m.len() != d {
        return Err(Error::DimensionMismatch {
            context: "diagonal reference step",
            expected: d,
            actual: g.len(),
        });
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("gradient entry {i}")));
    }
    let t = state.t + 1;
    state.m = update_first_moment(&state.m, g, design.beta1_at(t));
    let tf = t as f64;
    let b2 = design.beta2;
    for i in 0..d {
        let g2 = g[i] * g[i];
        match design.variant {
            Variant::Sgd => {}
            Variant::AdaGrad | Variant::AdaFom => state.v[i] = ((tf - 1.0) * state.v[i] + g2) / tf,
            Variant::RmsProp | Variant::Adam => state.v[i] = b2 * state.v[i] + (1.0 - b2) * g2,
            Variant::AmsGrad => {
                state.v_ema[i] = b2 * state.v_ema[i] + (1.0 - b2) * g2;
                state.v[i] = state.v[i].max(state.v_ema[i]);
            }
        }
    }
    if design.variant != Variant::AmsGrad {
        state.v_ema.clone_from(&state.v);
    }
    let mut out = x.to_vec();
    for i in 0..d {
        out[i] -= match design.variant {
            Variant::Sgd => alpha_t * state.m[i],
            _ => alpha_t * state.m[i] / (state.v[i].sqrt() + eps),
        };
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            step: t,
            msg: format!("parameter {i} became non-finite"),
        });
    }
    x.copy_from_slice(&out);
    state.t = t;
    Ok(())
}

/// Owned diagonal optimizer for the training loop.
#[derive(Debug, Clone)]
pub struct DiagOptimizer {
    pub design: Design,
    pub eps: f64,
    pub state: DiagState,
}

impl DiagOptimizer {
    pub fn new(design: Design, eps: f64, d: usize) -> Result<Self> {
        design.validate()?;
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be > 0, got {eps}"
            )));
        }
        Ok(Self {
            design,
            eps,
            state: DiagState::new(d),
        })
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], alpha_t: f64) -> Result<()> {
        diag_reference_step(x, &mut self.state, g, &self.design, alpha_t, self.eps)
    }
}
