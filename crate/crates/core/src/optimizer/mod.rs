//! Adaptive gradient methods with block-diagonal matrix adaptation.
//!
//! One step of [`BlockOptimizer`] is, in order:
//!
//! 1. `m_t = β_{1,t} m_{t-1} + (1 - β_{1,t}) g_t`
//! 2. every block `j` of the second-moment matrix is updated from
//!    `g_t^{(j)} g_t^{(j)ᵀ}` according to the [`Variant`]
//! 3. `x_{t+1} = x_t - α_t (V̂_t^{1/2} + δI)^{-1} m_t`, applied blockwise
//!
//! There is no bias correction. Group size 1 gives exactly the diagonal
//! methods in [`diag`], a single group gives the dense method in [`dense`].

pub mod checkpoint;
pub mod dense;
pub mod diag;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::clipping::{self, ClipSchedule};
use crate::grouping::{Partition, TensorLayout};
use crate::linalg::{self, EigDecomp, SymMatrix, EIGH_TOL};
use crate::{Error, Result};

/// Second-moment design `H_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Sgd,
    AdaGrad,
    AdaFom,
    RmsProp,
    Adam,
    AmsGrad,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Sgd,
        Variant::AdaGrad,
        Variant::AdaFom,
        Variant::RmsProp,
        Variant::Adam,
        Variant::AmsGrad,
    ];

    pub(crate) fn code(self) -> u64 {
        Variant::ALL.iter().position(|&v| v == self).unwrap() as u64
    }

    pub(crate) fn from_code(code: u64) -> Option<Self> {
        Variant::ALL.get(code as usize).copied()
    }

    /// AdaGrad and RMSprop carry no first-order momentum.
    pub fn requires_zero_beta1(self) -> bool {
        matches!(self, Variant::AdaGrad | Variant::RmsProp)
    }

    fn uses_ema(self) -> bool {
        matches!(self, Variant::RmsProp | Variant::Adam | Variant::AmsGrad)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Sgd => "sgd",
            Variant::AdaGrad => "adagrad",
            Variant::AdaFom => "adafom",
            Variant::RmsProp => "rmsprop",
            Variant::Adam => "adam",
            Variant::AmsGrad => "amsgrad",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown optimizer variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta1Decay {
    Constant,
    /// `β_{1,t} = β₁ λ^{t-1}`
    Exponential(f64),
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Design {
    pub variant: Variant,
    pub beta1: f64,
    pub beta1_decay: Beta1Decay,
    pub beta2: f64,
    pub delta: f64,
}

impl Design {
    /// Defaults: `β₁ = 0.9` where momentum applies (else 0), `β₂ = 0.999`,
    /// `δ = 1e-4`.
    pub fn new(variant: Variant) -> Self {
        let beta1 = match variant {
            Variant::Sgd | Variant::AdaGrad | Variant::RmsProp => 0.0,
            _ => 0.9,
        };
        Self {
            variant,
            beta1,
            beta1_decay: Beta1Decay::Constant,
            beta2: 0.999,
            delta: 1e-4,
        }
    }

    pub fn with_beta1(mut self, beta1: f64) -> Self {
        self.beta1 = beta1;
        self
    }

    pub fn with_beta2(mut self, beta2: f64) -> Self {
        self.beta2 = beta2;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_beta1_decay(mut self, decay: Beta1Decay) -> Self {
        self.beta1_decay = decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..1.0).contains(&self.beta1) {
            return bad(format!("beta1 must lie in [0, 1), got {}", self.beta1));
        }
        if self.variant.requires_zero_beta1() && self.beta1 != 0.0 {
            return bad(format!(
                "{} requires beta1 = 0, got {}",
                self.variant, self.beta1
            ));
        }
        if self.variant.uses_ema() && !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("beta2 must lie in [0, 1), got {}", self.beta2));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return bad(format!("delta must be > 0, got {}", self.delta));
        }
        if let Beta1Decay::Exponential(l) = self.beta1_decay {
            if !(l > 0.0 && l < 1.0) {
                return bad(format!("beta1 decay rate must lie in (0, 1), got {l}"));
            }
        }
        Ok(())
    }

    /// `β_{1,t}` for step `t ≥ 1`; non-increasing in `t`.
    pub fn beta1_at(&self, t: u64) -> f64 {
        match self.beta1_decay {
            Beta1Decay::Constant => self.beta1,
            Beta1Decay::Exponential(l) => self.beta1 * l.powf(t.saturating_sub(1) as f64),
        }
    }
}

/// `β m + (1 - β) g`
pub fn update_first_moment(m: &[f64], g: &[f64], beta1_t: f64) -> Vec<f64> {
    m.iter()
        .zip(g)
        .map(|(&m, &g)| beta1_t * m + (1.0 - beta1_t) * g)
        .collect()
}

/// `r` symmetric blocks aligned with a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagMatrix {
    partition: Partition,
    blocks: Vec<SymMatrix>,
}

impl BlockDiagMatrix {
    pub fn zeros(partition: &Partition) -> Self {
        Self {
            blocks: partition
                .sizes()
                .iter()
                .map(|&n| SymMatrix::zeros(n))
                .collect(),
            partition: partition.clone(),
        }
    }

    pub fn from_blocks(partition: &Partition, blocks: Vec<SymMatrix>) -> Result<Self> {
        if blocks.len() != partition.num_groups() {
            return Err(Error::DimensionMismatch {
                context: "block count",
                expected: partition.num_groups(),
                actual: blocks.len(),
            });
        }
        for (b, &n) in blocks.iter().zip(partition.sizes()) {
            if b.dim() != n {
                return Err(Error::DimensionMismatch {
                    context: "block size",
                    expected: n,
                    actual: b.dim(),
                });
            }
        }
        Ok(Self {
            partition: partition.clone(),
            blocks,
        })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn blocks(&self) -> &[SymMatrix] {
        &self.blocks
    }

    pub fn block(&self, j: usize) -> &SymMatrix {
        &self.blocks[j]
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [SymMatrix] {
        &mut self.blocks
    }

    /// Eigendecomposition of every block, each checked for PSD.
    pub fn spectra(&self) -> Result<Vec<EigDecomp>> {
        self.blocks
            .par_iter()
            .map(|b| {
                let e = linalg::eigh(b, EIGH_TOL)?;
                e.check_psd()?;
                Ok(e)
            })
            .collect()
    }

    /// Dense `d x d` matrix in grouped coordinates.
    pub fn to_dense(&self) -> SymMatrix {
        let d = self.partition.total();
        let mut m = SymMatrix::zeros(d);
        for (j, b) in self.blocks.iter().enumerate() {
            let off = self.partition.offsets()[j];
            for r in 0..b.dim() {
                for c in r..b.dim() {
                    m.set(off + r, off + c, b.get(r, c));
                }
            }
        }
        m
    }
}

/// Mutable optimizer state. Vectors are stored in the partition's grouped
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub(crate) t: u64,
    pub(crate) m: Vec<f64>,
    /// Second-moment accumulator. For AMSGrad this is the plain EMA and the
    /// effective `V̂_t` is rebuilt from `ams_eigmax` and the EMA's eigenbasis.
    pub(crate) v: BlockDiagMatrix,
    pub(crate) ams_eigmax: Option<Vec<Vec<f64>>>,
    /// Eigendecompositions of `V̂_t`, one per block (empty for SGD).
    pub(crate) spectra: Vec<EigDecomp>,
}

impl OptimizerState {
    pub fn new(design: &Design, partition: &Partition) -> Self {
        let v = BlockDiagMatrix::zeros(partition);
        let spectra = if design.variant == Variant::Sgd {
            Vec::new()
        } else {
            partition
                .sizes()
                .iter()
                .map(|&n| EigDecomp {
                    eigvals: vec![0.0; n],
                    eigvecs: SymMatrix::identity(n).as_slice().to_vec(),
                    scale: 0.0,
                })
                .collect()
        };
        Self {
            t: 0,
            m: vec![0.0; partition.total()],
            v,
            ams_eigmax: (design.variant == Variant::AmsGrad)
                .then(|| partition.sizes().iter().map(|&n| vec![0.0; n]).collect()),
            spectra,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// First moment in grouped order.
    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn accumulator(&self) -> &BlockDiagMatrix {
        &self.v
    }

    pub fn ams_eigmax(&self) -> Option<&[Vec<f64>]> {
        self.ams_eigmax.as_deref()
    }

    /// Eigendecompositions of the current `V̂_t` blocks.
    pub fn spectra(&self) -> &[EigDecomp] {
        &self.spectra
    }

    /// The effective second-moment matrix `V̂_t`.
    pub fn v_hat(&self) -> BlockDiagMatrix {
        match &self.ams_eigmax {
            None => self.v.clone(),
            Some(_) => BlockDiagMatrix {
                partition: self.v.partition.clone(),
                blocks: self.spectra.iter().map(|e| e.reconstruct()).collect(),
            },
        }
    }

    /// Persistent floats: `Σ n_j²` accumulator entries plus `d` for the
    /// first moment (plus `d` eigenvalue maxima for AMSGrad).
    pub fn core_len(&self) -> usize {
        self.v.partition.block_entries()
            + self.m.len()
            + self
                .ams_eigmax
                .as_ref()
                .map_or(0, |v| v.iter().map(Vec::len).sum())
    }

    /// Recomputes the cached spectra from the stored accumulator.
    pub(crate) fn refresh_spectra(&mut self, variant: Variant) -> Result<()> {
        if variant == Variant::Sgd {
            self.spectra.clear();
            return Ok(());
        }
        let mut spectra = self.v.spectra()?;
        if let Some(maxima) = &self.ams_eigmax {
            for (e, mx) in spectra.iter_mut().zip(maxima) {
                e.eigvals.clone_from(mx);
            }
        }
        self.spectra = spectra;
        Ok(())
    }
}

/// Block-diagonal adaptive optimizer over a fixed partition.
#[derive(Debug, Clone)]
pub struct BlockOptimizer {
    design: Design,
    partition: Partition,
    state: OptimizerState,
    clip: Option<ClipSchedule>,
    layout: Option<TensorLayout>,
}

impl BlockOptimizer {
    pub fn new(design: Design, partition: Partition) -> Result<Self> {
        design.validate()?;
        let state = OptimizerState::new(&design, &partition);
        Ok(Self {
            design,
            partition,
            state,
            clip: None,
            layout: None,
        })
    }

    /// Enables spectrum clipping of the preconditioner.
    pub fn with_clipping(mut self, schedule: ClipSchedule) -> Self {
        self.clip = Some(schedule);
        self
    }

    /// Lets error messages name the tensor a bad gradient entry belongs to.
    pub fn with_layout(mut self, layout: TensorLayout) -> Self {
        self.layout = Some(layout);
        self
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn clip_schedule(&self) -> Option<&ClipSchedule> {
        self.clip.as_ref()
    }

    pub fn set_state(&mut self, state: OptimizerState) -> Result<()> {
        if state.v.partition != self.partition {
            return Err(Error::InvalidArgument(
                "state partition differs from optimizer partition".into(),
            ));
        }
        self.state = state;
        Ok(())
    }

    fn check_gradient(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.partition.total() {
            return Err(Error::DimensionMismatch {
                context: "gradient length",
                expected: self.partition.total(),
                actual: g.len(),
            });
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            let location = match self.layout.as_ref().and_then(|l| l.tensor_at(i)) {
                Some(t) => format!("gradient of tensor `{}` (flat index {i})", t.name),
                None => format!("gradient entry {i}"),
            };
            return Err(Error::non_finite(location));
        }
        Ok(())
    }

    /// Advances `t`, updates the first moment and every second-moment block.
    /// `g` is in the model's flat order.
    pub fn accumulate(&mut self, g: &[f64]) -> Result<()> {
        self.check_gradient(g)?;
        let design = self.design;
        let st = &mut self.state;
        let t = st.t + 1;
        let gp = self.partition.gather(g);
        st.m = update_first_moment(&st.m, &gp, design.beta1_at(t));

        if design.variant == Variant::Sgd {
            st.t = t;
            return Ok(());
        }

        let offsets = self.partition.offsets();
        let maxima = st.ams_eigmax.as_mut();
        let blocks = st.v.blocks_mut();
        let ranges: Vec<_> = (0..blocks.len())
            .map(|j| offsets[j]..offsets[j + 1])
            .collect();

        let spectra: Result<Vec<EigDecomp>> = match maxima {
            None => blocks
                .par_iter_mut()
                .zip(ranges.par_iter())
                .map(|(block, r)| {
                    accumulate_block(block, &gp[r.clone()], &design, t);
                    let e = linalg::eigh(block, EIGH_TOL)?;
                    e.check_psd()?;
                    Ok(e)
                })
                .collect(),
            Some(maxima) => blocks
                .par_iter_mut()
                .zip(maxima.par_iter_mut())
                .zip(ranges.par_iter())
                .map(|((block, mx), r)| {
                    accumulate_block(block, &gp[r.clone()], &design, t);
                    let mut e = linalg::eigh(block, EIGH_TOL)?;
                    e.check_psd()?;
                    for (m, &l) in mx.iter_mut().zip(&e.eigvals) {
                        *m = m.max(l);
                    }
                    e.eigvals.clone_from(mx);
                    Ok(e)
                })
                .collect(),
        };
        st.spectra = spectra?;
        st.t = t;
        Ok(())
    }

    /// Preconditioned direction `(V̂_t^{1/2} + δI)^{-1} m_t` in grouped order
    /// (`m_t` itself for SGD).
    pub fn direction(&self) -> Vec<f64> {
        let st = &self.state;
        if self.design.variant == Variant::Sgd {
            return st.m.clone();
        }
        let delta = self.design.delta;
        let offsets = self.partition.offsets();
        let parts: Vec<Vec<f64>> = st
            .spectra
            .par_iter()
            .enumerate()
            .map(|(j, e)| {
                e.apply_with(&st.m[offsets[j]..offsets[j + 1]], |l| {
                    linalg::inv_sqrt_shift_scalar(l, delta)
                })
            })
            .collect();
        parts.concat()
    }

    /// `x ← x - α_t (V̂_t^{1/2} + δI)^{-1} m_t`
    pub fn apply_update(&self, x: &mut [f64], alpha_t: f64) -> Result<()> {
        let dir = self.direction();
        self.subtract_grouped(x, &dir, alpha_t)
    }

    /// `x ← x - scale · dir`, with `dir` in grouped order.
    pub(crate) fn subtract_grouped(&self, x: &mut [f64], dir: &[f64], scale: f64) -> Result<()> {
        if x.len() != self.partition.total() {
            return Err(Error::DimensionMismatch {
                context: "parameter length",
                expected: self.partition.total(),
                actual: x.len(),
            });
        }
        let mut updated = x.to_vec();
        match self.partition.order() {
            None => {
                for (xi, di) in updated.iter_mut().zip(dir) {
                    *xi -= scale * di;
                }
            }
            Some(order) => {
                for (k, &i) in order.iter().enumerate() {
                    updated[i] -= scale * dir[k];
                }
            }
        }
        if let Some(i) = updated.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: self.state.t,
                msg: format!("parameter {i} became non-finite"),
            });
        }
        x.copy_from_slice(&updated);
        Ok(())
    }

    /// One full step: moments, blocks, then the (optionally clipped) update.
    pub fn step(&mut self, x: &mut [f64], g: &[f64], alpha_t: f64) -> Result<()> {
        if !(alpha_t > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step size must be > 0, got {alpha_t}"
            )));
        }
        self.accumulate(g)?;
        match self.clip {
            None => self.apply_update(x, alpha_t),
            Some(sched) => {
                let (lo, hi) = sched.bounds(self.state.t)?;
                clipping::clipped_update(self, x, alpha_t, lo, hi).map(|_| ())
            }
        }
    }
}

fn accumulate_block(block: &mut SymMatrix, g: &[f64], design: &Design, t: u64) {
    match design.variant {
        Variant::Sgd => {}
        Variant::AdaGrad | Variant::AdaFom => running_mean_outer(block, g, t),
        Variant::RmsProp | Variant::Adam | Variant::AmsGrad => {
            block.blend_outer(design.beta2, 1.0 - design.beta2, g)
        }
    }
}

/// `V ← ((t-1) V + g gᵀ) / t`
pub(crate) fn running_mean_outer(block: &mut SymMatrix, g: &[f64], t: u64) {
    let n = block.dim();
    let tf = t as f64;
    for i in 0..n {
        for j in i..n {
            let v = ((tf - 1.0) * block.get(i, j) + g[i] * g[j]) / tf;
            block.set(i, j, v);
        }
    }
}
