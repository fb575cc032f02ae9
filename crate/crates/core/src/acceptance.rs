//! Acceptance suite shared by the `selftest` subcommand and the
//! `acceptance` integration test. Each check returns one [`CriterionResult`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::clipping::{clipped_update, ClipSchedule};
use crate::config::{Length, LrSchedule, RunConfig};
use crate::data::{self, BatchSchedule, Dataset};
use crate::diagnostics;
use crate::grouping::{partition_chunk, partition_input_neuron, Strategy};
use crate::linalg::{self, SymMatrix, EIGH_TOL};
use crate::model::{self, Head, MlpSpec};
use crate::optimizer::dense::{dense_reference_step, DenseState};
use crate::optimizer::diag::DiagOptimizer;
use crate::optimizer::{BlockOptimizer, Design, Variant};
use crate::runner::{self, median, Trainer, GRADCHECK_TOL};
use crate::Result;

/// Directory holding `train-images-idx3-ubyte` and `train-labels-idx1-ubyte`.
pub const MNIST_ENV: &str = "BLKADAPT_MNIST_DIR";

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}: {} ({:.2} s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Runs `body`, turning errors into failures and enforcing the time budget.
fn criterion(
    id: &'static str,
    name: &'static str,
    budget: Duration,
    body: impl FnOnce() -> Result<(bool, String)>,
) -> CriterionResult {
    let start = Instant::now();
    let (mut passed, mut detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    if elapsed > budget {
        passed = false;
        detail.push_str(&format!("; over time budget of {} s", budget.as_secs()));
    }
    CriterionResult {
        id,
        name,
        passed,
        detail,
        elapsed,
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Block optimizer over size-1 groups against the elementwise reference.
pub fn a1_diagonal_oracle() -> CriterionResult {
    criterion(
        "A1",
        "diagonal-oracle equivalence",
        Duration::from_secs(5),
        || {
            let spec = MlpSpec::toy();
            let d = spec.param_count();
            let (ds, _) = data::gen_toy(11);
            let batch = BatchSchedule::Fixed(10);
            let mut worst = 0.0f64;
            for variant in [
                Variant::AdaGrad,
                Variant::AdaFom,
                Variant::RmsProp,
                Variant::Adam,
                Variant::AmsGrad,
            ] {
                let design = Design::new(variant);
                let mut block = BlockOptimizer::new(design, partition_chunk(d, 1)?)?;
                let mut diag = DiagOptimizer::new(design, design.delta, d)?;
                let mut xa = model::init_params(&spec, 5);
                let mut xb = xa.clone();
                for t in 1..=100 {
                    let (bx, by) = data::sample_batch(&ds, &batch, t, 11);
                    let (_, ga) = model::forward_backward(&xa, &spec, &bx, &by)?;
                    let (_, gb) = model::forward_backward(&xb, &spec, &bx, &by)?;
                    block.step(&mut xa.values, &ga, 0.05)?;
                    diag.step(&mut xb.values, &gb, 0.05)?;
                    worst = worst.max(max_abs_diff(&xa.values, &xb.values));
                }
            }
            Ok((
                worst <= 1e-9,
                format!("max per-step parameter difference {worst:.3e} (limit 1e-9)"),
            ))
        },
    )
}

/// Single full block against the dense `d x d` reference on a 10-parameter model.
pub fn a2_dense_oracle() -> CriterionResult {
    criterion(
        "A2",
        "dense-oracle equivalence",
        Duration::from_secs(5),
        || {
            let spec = MlpSpec::new(vec![1, 3, 1], Head::SigmoidBce)?;
            let d = spec.param_count();
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let x: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<usize> = x
                .iter()
                .map(|&v| usize::from(v + 0.3 * rng.sample::<f64, _>(StandardNormal) > 0.0))
                .collect();
            let ds = Dataset::new(x, 1, y, "line")?;
            let batch = BatchSchedule::Fixed(8);
            let mut worst = 0.0f64;
            for variant in [Variant::Adam, Variant::AdaGrad] {
                let design = Design::new(variant);
                let mut block = BlockOptimizer::new(design, partition_chunk(d, d)?)?;
                let mut dense = DenseState::new(d);
                let mut xa = model::init_params(&spec, 2);
                let mut xb = xa.clone();
                for t in 1..=50 {
                    let (bx, by) = data::sample_batch(&ds, &batch, t, 21);
                    let (_, ga) = model::forward_backward(&xa, &spec, &bx, &by)?;
                    let (_, gb) = model::forward_backward(&xb, &spec, &bx, &by)?;
                    block.step(&mut xa.values, &ga, 0.05)?;
                    dense_reference_step(&mut xb.values, &mut dense, &gb, &design, 0.05)?;
                    worst = worst.max(max_abs_diff(&xa.values, &xb.values));
                }
            }
            Ok((
                d == 10 && worst <= 1e-8,
                format!("d = {d}, max parameter difference {worst:.3e} (limit 1e-8)"),
            ))
        },
    )
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Result<SymMatrix> {
    let a: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>() / n as f64;
        }
        m[i * n + i] += 1e-3;
    }
    SymMatrix::from_row_major(n, &m)
}

pub fn a3_linalg() -> CriterionResult {
    criterion(
        "A3",
        "linear-algebra suite",
        Duration::from_secs(10),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let (mut rec, mut cons, mut orth) = (0.0f64, 0.0f64, 0.0f64);
            let delta = 1e-4;
            for k in 0..200 {
                let n = 1 + k % 25;
                let m = random_spd(n, &mut rng)?;
                let e = linalg::eigh(&m, EIGH_TOL)?;
                e.check_psd()?;
                rec = rec.max(max_abs_diff(e.reconstruct().as_slice(), m.as_slice()) / m.max_abs());
                for i in 0..n {
                    for j in 0..n {
                        let dot: f64 = (0..n).map(|r| e.vec_entry(r, i) * e.vec_entry(r, j)).sum();
                        orth = orth.max((dot - f64::from(u8::from(i == j))).abs());
                    }
                }
                // (M^{1/2} + δI)^{-1} (M^{1/2} + δI) = I
                let p = linalg::inv_sqrt_shift(&m, delta)?;
                let mut s = linalg::sqrt_psd(&m)?;
                for i in 0..n {
                    s.set(i, i, s.get(i, i) + delta);
                }
                let prod = p.matmul(&s);
                for i in 0..n {
                    for j in 0..n {
                        cons = cons.max((prod[i * n + j] - f64::from(u8::from(i == j))).abs());
                    }
                }
            }
            Ok((
            rec <= 1e-10 && cons <= 1e-8 && orth <= 1e-8,
            format!("reconstruction {rec:.2e}·max, inverse-root consistency {cons:.2e}, orthogonality {orth:.2e}"),
        ))
        },
    )
}

pub fn a4_gradcheck() -> CriterionResult {
    criterion("A4", "gradient checks", Duration::from_secs(30), || {
        let reports = runner::gradcheck_suite(0)?;
        let ok = reports.iter().all(|(_, r)| r.max_rel_err < GRADCHECK_TOL);
        let detail = reports
            .iter()
            .map(|(s, r)| format!("{s}: {:.2e} over {} probes", r.max_rel_err, r.probes))
            .collect::<Vec<_>>()
            .join("; ");
        Ok((ok, detail))
    })
}

fn toy_run(partition: Strategy, alpha: f64, seed: u64, steps: u64) -> Result<f64> {
    let cfg = RunConfig {
        design: Design::new(Variant::AdaGrad),
        partition,
        lr: LrSchedule::Constant(alpha),
        batch: BatchSchedule::Fixed(10),
        length: Length::Steps(steps),
        seed,
        diag_every: steps.max(1),
        ..RunConfig::default()
    };
    let ds = Arc::new(runner::load_dataset(&cfg)?);
    let mut tr = Trainer::new(cfg, ds)?;
    tr.run_to_end()?;
    tr.full_loss()
}

/// Full-matrix against diagonal AdaGrad on the toy teacher problem.
pub fn a5_toy_full_vs_diag() -> CriterionResult {
    criterion(
        "A5",
        "toy full-matrix vs diagonal AdaGrad",
        Duration::from_secs(120),
        || {
            let alphas = [0.1, 0.05, 0.01];
            let seeds = 0..5u64;
            let best = |partition: Strategy| -> Result<(f64, f64)> {
                let mut out = (f64::INFINITY, 0.0);
                for &a in &alphas {
                    let losses = seeds
                        .clone()
                        .map(|s| toy_run(partition, a, s, 500))
                        .collect::<Result<Vec<_>>>()?;
                    let med = median(&losses);
                    if med < out.0 {
                        out = (med, a);
                    }
                }
                Ok(out)
            };
            let (full, fa) = best(Strategy::Full)?;
            let (diag, da) = best(Strategy::Diag)?;
            Ok((
            full <= diag,
            format!("median final loss full {full:.5} (alpha {fa}) vs diagonal {diag:.5} (alpha {da})"),
        ))
        },
    )
}

/// Exact `term_b ≤ diag_term_b` on a size-1-group trajectory, logged every step.
fn a6_control() -> Result<(bool, String)> {
    let spec = MlpSpec::new(vec![20, 8, 3], Head::SoftmaxCe)?;
    let d = spec.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 200;
    let x: Vec<f64> = (0..n * 20).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<usize> = (0..n)
        .map(|i| usize::from(x[i * 20] > 0.0) + usize::from(x[i * 20 + 1] > 0.5))
        .collect();
    let ds = Dataset::new(x, 20, y, "synthetic")?;
    let design = Design::new(Variant::Adam);
    let mut opt = BlockOptimizer::new(design, partition_chunk(d, 1)?)?;
    let mut params = model::init_params(&spec, 6);
    let batch = BatchSchedule::Fixed(16);
    let lr = LrSchedule::InvSqrt(0.01);
    let mut violations = 0;
    let mut logged = 0;
    for t in 1..=300u64 {
        let (bx, by) = data::sample_batch(&ds, &batch, t, 6);
        let (_, g) = model::forward_backward(&params, &spec, &bx, &by)?;
        let prev = opt.state().spectra().to_vec();
        opt.step(&mut params.values, &g, lr.at(t))?;
        if t == 1 {
            continue;
        }
        let now = opt.state().spectra();
        let tb = diagnostics::term_b(lr.at(t), now, lr.at(t - 1), &prev, design.delta)?;
        let v: Vec<f64> = now.iter().map(|e| e.eigvals[0]).collect();
        let vp: Vec<f64> = prev.iter().map(|e| e.eigvals[0]).collect();
        let db = diagnostics::diag_term_b(lr.at(t), &v, lr.at(t - 1), &vp, design.delta)?;
        logged += 1;
        if tb > db {
            violations += 1;
        }
    }
    Ok((
        violations == 0,
        format!("control: {violations} violations over {logged} logged steps"),
    ))
}

fn mnist_half(dir: &Path) -> Result<(bool, String)> {
    let base = RunConfig {
        dataset: crate::config::DatasetSource::Mnist {
            images: dir.join("train-images-idx3-ubyte"),
            labels: dir.join("train-labels-idx1-ubyte"),
        },
        model: MlpSpec::new(vec![784, 100, 10], Head::SoftmaxCe)?,
        design: Design::new(Variant::Adam),
        lr: LrSchedule::Constant(1e-3),
        batch: BatchSchedule::Fixed(128),
        length: Length::Epochs(1),
        seed: 0,
        diag_every: 10,
        ..RunConfig::default()
    };
    let ds = Arc::new(runner::load_dataset(&base)?);
    let run = |partition: Strategy| -> Result<f64> {
        let mut tr = Trainer::new(
            RunConfig {
                partition,
                ..base.clone()
            },
            ds.clone(),
        )?;
        tr.run_to_end()?;
        Ok(median(
            &tr.records
                .iter()
                .filter(|r| r.t > 1)
                .map(|r| r.term_b)
                .collect::<Vec<_>>(),
        ))
    };
    let block = run(Strategy::InputNeuron(10))?;
    let diag = run(Strategy::Diag)?;
    Ok((
        block < diag,
        format!(
            "mnist ({} rows): median term_b block(10) {block:.4e} vs diagonal {diag:.4e}",
            ds.len()
        ),
    ))
}

/// Term B of a group-size-10 run against the diagonal run on MNIST, plus
/// the self-contained size-1 control.
pub fn a6_term_dynamics(mnist_dir: Option<&Path>) -> CriterionResult {
    criterion(
        "A6",
        "term-dynamics reproduction",
        Duration::from_secs(600),
        || {
            let (ctrl_ok, ctrl) = a6_control()?;
            match mnist_dir {
                Some(dir) => {
                    let (ok, detail) = mnist_half(dir)?;
                    Ok((ctrl_ok && ok, format!("{ctrl}; {detail}")))
                }
                None => Ok((
                    ctrl_ok,
                    format!("{ctrl}; mnist half SKIPPED (set {MNIST_ENV} to the IDX directory)"),
                )),
            }
        },
    )
}

/// Clipped trajectories stay inside the clipping interval.
pub fn a7_clipping() -> CriterionResult {
    criterion("A7", "clipping invariants", Duration::from_secs(10), || {
        let spec = MlpSpec::new(vec![4, 3, 2], Head::SoftmaxCe)?;
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 64;
        let x: Vec<f64> = (0..n * 4).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<usize> = (0..n)
            .map(|i| usize::from(x[i * 4] + x[i * 4 + 1] > 0.0))
            .collect();
        let ds = Dataset::new(x, 4, y, "synthetic")?;
        let batch = BatchSchedule::Fixed(8);
        let (alpha, alpha_star) = (0.01, 0.01);
        let sched = ClipSchedule::new(1e-2, alpha_star)?;

        let mut outside = 0usize;
        let mut dev_violations = 0usize;
        let mut collapsed_err = 0.0f64;
        for collapsed in [false, true] {
            let mut opt = BlockOptimizer::new(
                Design::new(Variant::Adam),
                partition_input_neuron(&layout, 2)?,
            )?;
            let mut params = model::init_params(&spec, 7);
            for t in 1..=300u64 {
                let (bx, by) = data::sample_batch(&ds, &batch, t, 7);
                let (_, g) = model::forward_backward(&params, &spec, &bx, &by)?;
                opt.accumulate(&g)?;
                let (lo, hi) = if collapsed {
                    (alpha_star, alpha_star)
                } else {
                    sched.bounds(t)?
                };
                let before = params.values.clone();
                let applied = clipped_update(&opt, &mut params.values, alpha, lo, hi)?;
                let m = opt.partition().scatter(opt.state().first_moment());
                let resid: Vec<f64> = params
                    .values
                    .iter()
                    .zip(&before)
                    .zip(&m)
                    .map(|((a, b), mi)| (a - b) + alpha_star * mi)
                    .collect();
                if collapsed {
                    collapsed_err =
                        collapsed_err.max(resid.iter().fold(0.0, |a, v| a.max(v.abs())));
                    continue;
                }
                outside += applied
                    .iter()
                    .flatten()
                    .filter(|&&s| s < lo || s > hi)
                    .count();
                let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let bound = (hi - alpha_star).max(alpha_star - lo) * norm(&m);
                if norm(&resid) > bound * (1.0 + 1e-9) + 1e-15 {
                    dev_violations += 1;
                }
            }
        }
        Ok((
            outside == 0 && dev_violations == 0 && collapsed_err <= 1e-12,
            format!(
                "{outside} eigenvalues outside the interval, {dev_violations} deviation-bound violations, \
                 collapsed-interval error {collapsed_err:.2e}"
            ),
        ))
    })
}

/// `min_t ‖∇f(x_t)‖²` for block-Adam on a noisy 20-D quadratic.
pub fn quadratic_min_grad(
    batch: BatchSchedule,
    seed: u64,
    steps: u64,
    alpha: f64,
    sigma: f64,
) -> Result<f64> {
    let d = 20;
    // fixed curvature shared by every seed
    let mut crng = ChaCha8Rng::seed_from_u64(8);
    let q = linalg::eigh(&random_spd(d, &mut crng)?, EIGH_TOL)?;
    let mut spectrum = q.clone();
    spectrum.eigvals = (0..d)
        .map(|i| 0.5 + 1.5 * i as f64 / (d - 1) as f64)
        .collect();
    let a = spectrum.reconstruct();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut opt = BlockOptimizer::new(Design::new(Variant::Adam), partition_chunk(d, 5)?)?;
    let mut best = f64::INFINITY;
    for t in 1..=steps {
        let grad = a.matvec(&x);
        best = best.min(grad.iter().map(|v| v * v).sum());
        let m = batch.size_at(t, usize::MAX);
        let scale = sigma / (m as f64).sqrt();
        let g: Vec<f64> = grad
            .iter()
            .map(|gi| gi + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        opt.step(&mut x, &g, alpha)?;
    }
    let grad = a.matvec(&x);
    Ok(best.min(grad.iter().map(|v| v * v).sum()))
}

pub const A8_ALPHA: f64 = 0.01;
pub const A8_SIGMA: f64 = 1.0;
pub const A8_RATE: f64 = 1.0;

pub fn a8_increasing_batch() -> CriterionResult {
    criterion(
        "A8",
        "increasing-minibatch sanity",
        Duration::from_secs(60),
        || {
            let runs = |b: BatchSchedule| -> Result<f64> {
                let v = (0..5)
                    .map(|s| quadratic_min_grad(b, s, 2000, A8_ALPHA, A8_SIGMA))
                    .collect::<Result<Vec<_>>>()?;
                Ok(median(&v))
            };
            let growing = runs(BatchSchedule::Linear(A8_RATE))?;
            let fixed = runs(BatchSchedule::Fixed(4))?;
            Ok((
            growing < 1e-3 && growing < fixed,
            format!("median min grad norm^2: linear batch {growing:.3e}, fixed(4) {fixed:.3e} (target < 1e-3)"),
        ))
        },
    )
}

fn scratch_dir(tag: &str) -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("blockadapt-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Byte-identical repeated runs and exact checkpoint resume.
pub fn a9_determinism() -> CriterionResult {
    criterion("A9", "determinism", Duration::from_secs(60), || {
        let dir = scratch_dir("a9")?;
        let result = (|| {
            let ck = dir.join("half.ckpt");
            let straight = RunConfig {
                design: Design::new(Variant::AmsGrad),
                partition: Strategy::InputNeuron(2),
                lr: LrSchedule::InvSqrt(0.05),
                clip: Some(ClipSchedule::new(1e-3, 0.05)?),
                batch: BatchSchedule::Linear(0.1),
                length: Length::Steps(200),
                seed: 9,
                ..RunConfig::default()
            };
            let first_half = RunConfig {
                length: Length::Steps(100),
                checkpoint: Some(ck.clone()),
                ..straight.clone()
            };
            let second_half = RunConfig {
                resume: Some(ck),
                ..straight.clone()
            };
            let (d1, d2, d3, d4) = (
                dir.join("r1"),
                dir.join("r2"),
                dir.join("h1"),
                dir.join("h2"),
            );
            let s1 = runner::cmd_run(straight.clone(), &d1)?;
            runner::cmd_run(straight, &d2)?;
            runner::cmd_run(first_half, &d3)?;
            let s2 = runner::cmd_run(second_half, &d4)?;
            let t1 = std::fs::read(d1.join("trace.csv"))?;
            let t2 = std::fs::read(d2.join("trace.csv"))?;
            let identical = t1 == t2;
            let rows = |p: &Path| -> Result<Vec<diagnostics::TraceRecord>> {
                diagnostics::parse_trace(&std::fs::read_to_string(p.join("trace.csv"))?)
            };
            let tail: Vec<_> = rows(&d1)?.into_iter().filter(|r| r.t > 100).collect();
            let resumed = rows(&d4)?;
            let exact = !tail.is_empty() && tail == resumed && s1 == s2;
            Ok((
                identical && exact,
                format!(
                    "repeat run byte-identical: {identical}; resume matches straight run exactly: {exact} ({} rows)",
                    resumed.len()
                ),
            ))
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result
    })
}

/// Every criterion in order. `mnist_dir` enables the real-data half of A6.
pub fn run_all(mnist_dir: Option<&Path>) -> Vec<CriterionResult> {
    vec![
        a1_diagonal_oracle(),
        a2_dense_oracle(),
        a3_linalg(),
        a4_gradcheck(),
        a5_toy_full_vs_diag(),
        a6_term_dynamics(mnist_dir),
        a7_clipping(),
        a8_increasing_batch(),
        a9_determinism(),
    ]
}

/// MNIST directory from the environment, if set.
pub fn mnist_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(MNIST_ENV).map(PathBuf::from)
}
