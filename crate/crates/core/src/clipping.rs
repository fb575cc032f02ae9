//! Spectrum clipping toward SGD.
//!
//! The eigenvalues of each block's effective preconditioner
//! `α_t (V̂_t^{1/2} + δI)^{-1}` are clipped into `[λ_l(t), λ_u(t)]`, an
//! interval that shrinks onto the final SGD rate `α*`:
//!
//! ```text
//! λ_l(t) = (1 - 1/(γt + 1)) α*      λ_u(t) = (1 + 1/(γt)) α*
//! ```

use rayon::prelude::*;

use crate::linalg::inv_sqrt_shift_scalar;
use crate::optimizer::{BlockOptimizer, Variant};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSchedule {
    /// Clipping speed.
    pub gamma: f64,
    /// Final SGD learning rate.
    pub alpha_star: f64,
}

impl ClipSchedule {
    pub fn new(gamma: f64, alpha_star: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) || !(alpha_star > 0.0 && alpha_star.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "clip schedule needs gamma > 0 and alpha* > 0, got {gamma}, {alpha_star}"
            )));
        }
        Ok(Self { gamma, alpha_star })
    }

    /// `(λ_l(t), λ_u(t))` for `t ≥ 1`.
    pub fn bounds(&self, t: u64) -> Result<(f64, f64)> {
        clip_bounds(self, t)
    }
}

pub fn clip_bounds(sched: &ClipSchedule, t: u64) -> Result<(f64, f64)> {
    if t == 0 {
        return Err(Error::InvalidArgument(
            "clip bounds are defined for t >= 1".into(),
        ));
    }
    let gt = sched.gamma * t as f64;
    let lo = (1.0 - 1.0 / (gt + 1.0)) * sched.alpha_star;
    let hi = (1.0 + 1.0 / gt) * sched.alpha_star;
    Ok((lo, hi))
}

/// Applies `x ← x - U diag(s̃) Uᵀ m_t` per block where `s̃` is the clipped
/// effective spectrum. Returns the applied spectra, block by block.
///
/// For SGD the unclipped preconditioner is `α_t I`.
pub fn clipped_update(
    opt: &BlockOptimizer,
    x: &mut [f64],
    alpha_t: f64,
    lambda_l: f64,
    lambda_u: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(lambda_l <= lambda_u) {
        return Err(Error::InvalidArgument(format!(
            "empty clipping interval [{lambda_l}, {lambda_u}]"
        )));
    }
    let st = opt.state();
    let part = opt.partition();
    let offsets = part.offsets();
    let clip = |s: f64| s.max(lambda_l).min(lambda_u);

    let (dir, applied): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if opt.design().variant == Variant::Sgd {
        (0..part.num_groups())
            .map(|j| {
                let s = clip(alpha_t);
                let mj = &st.first_moment()[offsets[j]..offsets[j + 1]];
                (mj.iter().map(|m| s * m).collect(), vec![s; mj.len()])
            })
            .unzip()
    } else {
        let delta = opt.design().delta;
        st.spectra()
            .par_iter()
            .enumerate()
            .map(|(j, e)| {
                let spectrum: Vec<f64> = e
                    .eigvals
                    .iter()
                    .map(|&l| clip(alpha_t * inv_sqrt_shift_scalar(l, delta)))
                    .collect();
                let mj = &st.first_moment()[offsets[j]..offsets[j + 1]];
                (e.apply_spectrum(mj, &spectrum), spectrum)
            })
            .unzip()
    };
    opt.subtract_grouped(x, &dir.concat(), 1.0)?;
    Ok(applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::Partition;
    use crate::optimizer::Design;

    #[test]
    fn bounds_examples() {
        let s = ClipSchedule::new(1e-3, 0.1).unwrap();
        let (lo, hi) = s.bounds(1).unwrap();
        assert!((lo - 0.1 * (1.0 - 1.0 / 1.001)).abs() < 1e-15);
        assert!((lo - 9.99001e-5).abs() < 1e-10);
        assert!((hi - 100.1).abs() < 1e-10);
        let (lo, hi) = s.bounds(1_000_000).unwrap();
        assert!((lo - 0.1 * (1.0 - 1.0 / 1001.0)).abs() < 1e-15);
        assert!((lo - 0.0999).abs() < 1e-6 && (hi - 0.1001).abs() < 1e-6);
        let (lo, hi) = s.bounds(u64::MAX / 2).unwrap();
        assert!((lo - 0.1).abs() < 1e-12 && (hi - 0.1).abs() < 1e-12);
        assert!(s.bounds(0).is_err());
        assert!(ClipSchedule::new(0.0, 0.1).is_err());
    }

    #[test]
    fn bounds_bracket_alpha_star_and_shrink() {
        let s = ClipSchedule::new(1e-2, 0.5).unwrap();
        let mut prev = s.bounds(1).unwrap();
        for t in 2..500 {
            let (lo, hi) = s.bounds(t).unwrap();
            assert!(lo < 0.5 && 0.5 < hi);
            assert!(lo >= prev.0 && hi <= prev.1);
            prev = (lo, hi);
        }
    }

    fn one_block(variant: Variant, g: &[f64]) -> BlockOptimizer {
        let mut o = BlockOptimizer::new(
            Design::new(variant),
            Partition::from_sizes(vec![g.len()]).unwrap(),
        )
        .unwrap();
        o.accumulate(g).unwrap();
        o
    }

    #[test]
    fn zero_accumulator_clips_to_upper_bound() {
        let mut o = BlockOptimizer::new(
            Design::new(Variant::Adam),
            Partition::from_sizes(vec![2]).unwrap(),
        )
        .unwrap();
        o.accumulate(&[0.0, 0.0]).unwrap();
        let mut st = o.state().clone();
        st.m = vec![0.5, -1.0];
        o.set_state(st).unwrap();
        let mut x = [1.0, 1.0];
        // raw spectrum α/δ = 1000 on both directions
        let spectra = clipped_update(&o, &mut x, 0.1, 0.05, 0.2).unwrap();
        assert_eq!(spectra[0], vec![0.2, 0.2]);
        assert!((x[0] - (1.0 - 0.2 * 0.5)).abs() < 1e-15);
        assert!((x[1] - (1.0 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn collapsed_interval_is_sgd_with_momentum() {
        let o = one_block(Variant::Adam, &[0.3, -1.2, 2.0]);
        let m = o.state().first_moment().to_vec();
        let mut x = [0.0; 3];
        clipped_update(&o, &mut x, 0.1, 0.07, 0.07).unwrap();
        for (xi, mi) in x.iter().zip(&m) {
            assert!((xi + 0.07 * mi).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_clip_example() {
        let o = one_block(Variant::Adam, &[2.0]);
        let m = o.state().first_moment()[0];
        let raw = 0.1 / (0.004f64.sqrt() + 1e-4);
        assert!((raw - 1.57865).abs() < 1e-4);
        let mut x = [0.0];
        let spectra = clipped_update(&o, &mut x, 0.1, 0.05, 0.2).unwrap();
        assert_eq!(spectra[0], vec![0.2]);
        assert!((x[0] + 0.2 * m).abs() < 1e-15);
    }

    #[test]
    fn open_interval_matches_plain_update() {
        let o = one_block(Variant::AmsGrad, &[0.3, -1.2, 2.0, 0.01]);
        let mut a = [0.5; 4];
        let mut b = [0.5; 4];
        clipped_update(&o, &mut a, 0.1, 0.0, f64::INFINITY).unwrap();
        o.apply_update(&mut b, 0.1).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-10);
        }
    }
}
