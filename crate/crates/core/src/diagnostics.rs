//! Trajectory diagnostics and the CSV trace.
//!
//! All preconditioner quantities use `P = (V̂^{1/2} + δI)^{-1}`, evaluated
//! block by block from cached eigendecompositions.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::linalg::{inv_sqrt_shift_scalar, spectral_norm, EigDecomp};
use crate::{Error, Result};

pub const TRACE_HEADER: &str = "t,loss,grad_norm_sq,term_a,term_b,kappa_t,batch_size,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: u64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub term_a: f64,
    pub term_b: f64,
    pub kappa_t: f64,
    pub batch_size: usize,
    pub wall_ms: u64,
}

impl TraceRecord {
    pub fn check(&self) -> Result<()> {
        let fields = [
            ("loss", self.loss),
            ("grad_norm_sq", self.grad_norm_sq),
            ("term_a", self.term_a),
            ("term_b", self.term_b),
            ("kappa_t", self.kappa_t),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numerical {
                step: self.t,
                msg: format!("{name} is not finite"),
            });
        }
        if self.term_a < 0.0 || self.term_b < 0.0 || self.grad_norm_sq < 0.0 || self.kappa_t < 1.0 {
            return Err(Error::Numerical {
                step: self.t,
                msg: format!("trace invariant violated: {self:?}"),
            });
        }
        Ok(())
    }

    /// Shortest round-trip formatting, so the text parses back exactly.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{},{}",
            self.t,
            self.loss,
            self.grad_norm_sq,
            self.term_a,
            self.term_b,
            self.kappa_t,
            self.batch_size,
            self.wall_ms
        )
    }
}

pub fn write_trace(records: &[TraceRecord]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.to_csv_row());
    }
    s
}

/// Parses a trace and checks every row's invariants.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::InvalidArgument("trace header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad =
                |what: &str| Error::InvalidArgument(format!("trace row {}: bad {what}", i + 2));
            if f.len() != 8 {
                return Err(bad("column count"));
            }
            let num = |k: usize| {
                f[k].parse::<f64>()
                    .map_err(|_| bad(TRACE_HEADER.split(',').nth(k).unwrap()))
            };
            let rec = TraceRecord {
                t: f[0].parse().map_err(|_| bad("t"))?,
                loss: num(1)?,
                grad_norm_sq: num(2)?,
                term_a: num(3)?,
                term_b: num(4)?,
                kappa_t: num(5)?,
                batch_size: f[6].parse().map_err(|_| bad("batch_size"))?,
                wall_ms: f[7].parse().map_err(|_| bad("wall_ms"))?,
            };
            rec.check()?;
            Ok(rec)
        })
        .collect()
}

fn check_blocks(spectra: &[EigDecomp], g: &[f64]) -> Result<()> {
    let total: usize = spectra.iter().map(|e| e.dim()).sum();
    if total != g.len() {
        return Err(Error::DimensionMismatch {
            context: "diagnostic vector",
            expected: total,
            actual: g.len(),
        });
    }
    Ok(())
}

/// `‖α (V̂^{1/2}+δI)^{-1} g‖²` for `g` in grouped order.
pub fn term_a(alpha: f64, spectra: &[EigDecomp], delta: f64, g: &[f64]) -> Result<f64> {
    check_blocks(spectra, g)?;
    let mut off = 0;
    let mut total = 0.0;
    for e in spectra {
        let n = e.dim();
        let y = e.apply_with(&g[off..off + n], |l| {
            alpha * inv_sqrt_shift_scalar(l, delta)
        });
        total += y.iter().map(|v| v * v).sum::<f64>();
        off += n;
    }
    Ok(total)
}

/// `max_j ‖α_t P_{t,j} - α_{t-1} P_{t-1,j}‖₂`
pub fn term_b(
    alpha_t: f64,
    spectra_t: &[EigDecomp],
    alpha_prev: f64,
    spectra_prev: &[EigDecomp],
    delta: f64,
) -> Result<f64> {
    if spectra_t.len() != spectra_prev.len()
        || spectra_t
            .iter()
            .zip(spectra_prev)
            .any(|(a, b)| a.dim() != b.dim())
    {
        return Err(Error::InvalidArgument(
            "term_b needs the same partition at both steps".into(),
        ));
    }
    let norms = spectra_t
        .par_iter()
        .zip(spectra_prev)
        .map(|(now, prev)| {
            if now.dim() == 1 {
                let a = alpha_t * inv_sqrt_shift_scalar(now.eigvals[0], delta);
                let b = alpha_prev * inv_sqrt_shift_scalar(prev.eigvals[0], delta);
                return Ok((a - b).abs());
            }
            let p = now.reconstruct_with(|l| inv_sqrt_shift_scalar(l, delta));
            let q = prev.reconstruct_with(|l| inv_sqrt_shift_scalar(l, delta));
            spectral_norm(&p.lin_comb(alpha_t, &q, -alpha_prev))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}

/// `‖α_t/(√v_t+ε) - α_{t-1}/(√v_{t-1}+ε)‖₁`
pub fn diag_term_b(
    alpha_t: f64,
    v_t: &[f64],
    alpha_prev: f64,
    v_prev: &[f64],
    eps: f64,
) -> Result<f64> {
    if v_t.len() != v_prev.len() {
        return Err(Error::DimensionMismatch {
            context: "diag_term_b",
            expected: v_prev.len(),
            actual: v_t.len(),
        });
    }
    Ok(v_t
        .iter()
        .zip(v_prev)
        .map(|(&a, &b)| {
            (alpha_t * inv_sqrt_shift_scalar(a, eps) - alpha_prev * inv_sqrt_shift_scalar(b, eps))
                .abs()
        })
        .sum())
}

/// Condition number of `√β₂ V̂^{1/2} + δI` over the whole block-diagonal matrix.
pub fn kappa_t(spectra: &[EigDecomp], beta2: f64, delta: f64) -> f64 {
    let (lo, hi) = spectra
        .iter()
        .flat_map(|e| e.eigvals.iter())
        .map(|&l| beta2.sqrt() * l.max(0.0).sqrt() + delta)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), s| {
            (lo.min(s), hi.max(s))
        });
    if hi == 0.0 {
        1.0
    } else {
        hi / lo
    }
}

/// Same as [`kappa_t`] for an elementwise accumulator.
pub fn diag_kappa_t(v: &[f64], beta2: f64, eps: f64) -> f64 {
    let (lo, hi) = v
        .iter()
        .map(|&l| beta2.sqrt() * l.max(0.0).sqrt() + eps)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), s| {
            (lo.min(s), hi.max(s))
        });
    if hi == 0.0 {
        1.0
    } else {
        hi / lo
    }
}

/// Smallest eigenvalue of the effective preconditioner `α P` on this step.
pub fn min_effective_eig(alpha: f64, spectra: &[EigDecomp], delta: f64) -> f64 {
    spectra
        .iter()
        .filter_map(|e| e.eigvals.first())
        .map(|&l| alpha * inv_sqrt_shift_scalar(l, delta))
        .fold(f64::INFINITY, f64::min)
}

/// Advisory step-size conditions for the increasing-batch regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityCheck {
    /// `1 - β₂ ≤ δ² / (9 G∞² κ_max²)`
    pub beta2_ok: bool,
    /// `α ≤ 2δ / (3 L κ_max)`; `None` without a smoothness constant.
    pub alpha_ok: Option<bool>,
}

pub fn stability_conditions(
    beta2: f64,
    delta: f64,
    g_inf: f64,
    kappa_max: f64,
    alpha_max: f64,
    lipschitz: Option<f64>,
) -> StabilityCheck {
    let beta2_ok = 1.0 - beta2 <= delta * delta / (9.0 * g_inf * g_inf * kappa_max * kappa_max);
    StabilityCheck {
        beta2_ok,
        alpha_ok: lipschitz.map(|l| alpha_max <= 2.0 * delta / (3.0 * l * kappa_max)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigh, inv_sqrt_shift, SymMatrix, EIGH_TOL};
    use proptest::prelude::*;

    fn eig1(v: f64) -> EigDecomp {
        eigh(&SymMatrix::from_diag(&[v]), EIGH_TOL).unwrap()
    }

    #[test]
    fn term_a_examples() {
        assert_eq!(term_a(0.1, &[eig1(0.004)], 1e-4, &[0.0]).unwrap(), 0.0);
        let a = term_a(0.1, &[eig1(0.004)], 1e-4, &[2.0]).unwrap();
        assert!((a - 9.968452065596344).abs() < 1e-9, "{a}");
    }

    #[test]
    fn term_a_matches_dense() {
        let m = SymMatrix::from_rows(&[
            vec![2.0, 0.3, -0.1],
            vec![0.3, 1.0, 0.2],
            vec![-0.1, 0.2, 0.5],
        ])
        .unwrap();
        let g = [0.4, -1.0, 2.5];
        let e = eigh(&m, EIGH_TOL).unwrap();
        let dense = inv_sqrt_shift(&m, 1e-4).unwrap().matvec(&g);
        let want: f64 = dense.iter().map(|v| (0.05 * v).powi(2)).sum();
        assert!((term_a(0.05, &[e], 1e-4, &g).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn term_b_examples() {
        let e = [eig1(0.3), eig1(2.0)];
        assert_eq!(term_b(0.1, &e, 0.1, &e, 1e-4).unwrap(), 0.0);
        let now = [eig1(0.5), eig1(2.0)];
        let b = term_b(0.1, &now, 0.2, &e, 1e-4).unwrap();
        let want0 = (0.1 / (0.5f64.sqrt() + 1e-4) - 0.2 / (0.3f64.sqrt() + 1e-4)).abs();
        let want1 = (0.1 / (2f64.sqrt() + 1e-4) - 0.2 / (2f64.sqrt() + 1e-4)).abs();
        assert!((b - want0.max(want1)).abs() < 1e-15);
        let l1 = diag_term_b(0.1, &[0.5, 2.0], 0.2, &[0.3, 2.0], 1e-4).unwrap();
        assert!(b <= l1);
    }

    #[test]
    fn term_b_matches_dense() {
        let a = SymMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let b = SymMatrix::from_rows(&[vec![1.5, -0.2], vec![-0.2, 0.7]]).unwrap();
        let pa = inv_sqrt_shift(&a, 1e-4).unwrap();
        let pb = inv_sqrt_shift(&b, 1e-4).unwrap();
        let want = spectral_norm(&pa.lin_comb(0.1, &pb, -0.09)).unwrap();
        let ea = eigh(&a, EIGH_TOL).unwrap();
        let eb = eigh(&b, EIGH_TOL).unwrap();
        let got = term_b(0.1, &[ea], 0.09, &[eb], 1e-4).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn diag_term_b_examples() {
        assert_eq!(
            diag_term_b(0.1, &[0.2, 0.3], 0.1, &[0.2, 0.3], 1e-4).unwrap(),
            0.0
        );
        // v = 0 and ε = 1 makes each effective step equal to α
        let d = diag_term_b(0.51, &[0.0, 0.0], 0.5, &[0.0, 0.0], 1.0).unwrap();
        assert!((d - 0.02).abs() < 1e-12);
        let d = diag_term_b(0.5, &[0.0, 0.0], 0.5, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa_t(&[eig1(0.0), eig1(0.0)], 0.999, 1e-4), 1.0);
        assert_eq!(kappa_t(&[eig1(0.004)], 0.999, 1e-4), 1.0);
        let k = kappa_t(&[eig1(0.004), eig1(0.0)], 0.999, 1e-4);
        assert!((k - 633.14).abs() < 0.01, "{k}");
        assert_eq!(diag_kappa_t(&[0.004, 0.0], 0.999, 1e-4), k);
    }

    #[test]
    fn stability_flags() {
        let c = stability_conditions(0.999, 1e-4, 1.0, 1.0, 0.1, None);
        assert!(!c.beta2_ok && c.alpha_ok.is_none());
        let c = stability_conditions(1.0 - 1e-10, 1e-4, 1.0, 1.0, 1e-6, Some(10.0));
        assert!(c.beta2_ok && c.alpha_ok == Some(true));
    }

    #[test]
    fn trace_round_trip_and_validation() {
        let r = TraceRecord {
            t: 3,
            loss: 0.1 + 0.2,
            grad_norm_sq: 1e-300,
            term_a: 2.5,
            term_b: 0.0,
            kappa_t: 1.0,
            batch_size: 10,
            wall_ms: 0,
        };
        let text = write_trace(&[r, r]);
        assert!(text.starts_with("t,loss,grad_norm_sq,term_a,term_b,kappa_t,batch_size,wall_ms\n"));
        assert_eq!(parse_trace(&text).unwrap(), vec![r, r]);
        let bad = text.replace("2.5", "-2.5");
        assert!(parse_trace(&bad).is_err());
        assert!(parse_trace("t,loss\n").is_err());
    }

    proptest! {
        #[test]
        fn size_one_max_never_exceeds_l1(
            v in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..20),
            a in 0.001f64..1.0, b in 0.001f64..1.0,
        ) {
            let now: Vec<_> = v.iter().map(|p| eig1(p.0)).collect();
            let prev: Vec<_> = v.iter().map(|p| eig1(p.1)).collect();
            let vt: Vec<f64> = v.iter().map(|p| p.0).collect();
            let vp: Vec<f64> = v.iter().map(|p| p.1).collect();
            let tb = term_b(a, &now, b, &prev, 1e-4).unwrap();
            let db = diag_term_b(a, &vt, b, &vp, 1e-4).unwrap();
            prop_assert!(tb <= db);
            prop_assert!(kappa_t(&now, 0.999, 1e-4) >= 1.0);
        }
    }
}
