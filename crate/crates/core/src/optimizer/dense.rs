//! Dense full-matrix reference: one `d x d` accumulator, no grouping.
//! Only meant for small `d` as an oracle for the block optimizer.

use super::{running_mean_outer, update_first_moment, Design, Variant};
use crate::linalg::{self, SymMatrix, EIGH_TOL};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    pub t: u64,
    pub m: Vec<f64>,
    /// `V̂_t`, or the plain EMA for AMSGrad.
    pub v: SymMatrix,
    pub ams_max: Vec<f64>,
}

impl DenseState {
    pub fn new(d: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; d],
            v: SymMatrix::zeros(d),
            ams_max: vec![0.0; d],
        }
    }
}

pub fn dense_reference_step(
    x: &mut [f64],
    state: &mut DenseState,
    g: &[f64],
    design: &Design,
    alpha_t: f64,
) -> Result<()> {
    let d = x.len();
    if g.len() != d || state.v.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "dense reference step",
            expected: d,
            actual: g.len(),
        });
    }
    let t = state.t + 1;
    state.m = update_first_moment(&state.m, g, design.beta1_at(t));
    let dir = match design.variant {
        Variant::Sgd => state.m.clone(),
        Variant::AdaGrad | Variant::AdaFom => {
            running_mean_outer(&mut state.v, g, t);
            linalg::inv_sqrt_shift(&state.v, design.delta)?.matvec(&state.m)
        }
        Variant::RmsProp | Variant::Adam => {
            state.v.blend_outer(design.beta2, 1.0 - design.beta2, g);
            linalg::inv_sqrt_shift(&state.v, design.delta)?.matvec(&state.m)
        }
        Variant::AmsGrad => {
            state.v.blend_outer(design.beta2, 1.0 - design.beta2, g);
            let e = linalg::eigh(&state.v, EIGH_TOL)?;
            e.check_psd()?;
            let mut vhat = e.clone();
            for (mx, &l) in state.ams_max.iter_mut().zip(&e.eigvals) {
                *mx = mx.max(l);
            }
            vhat.eigvals.clone_from(&state.ams_max);
            let vhat = vhat.reconstruct();
            linalg::inv_sqrt_shift(&vhat, design.delta)?.matvec(&state.m)
        }
    };
    for (xi, di) in x.iter_mut().zip(&dir) {
        *xi -= alpha_t * di;
    }
    state.t = t;
    Ok(())
}
