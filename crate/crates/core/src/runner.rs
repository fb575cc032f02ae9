//! Experiment driver behind the CLI subcommands.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetSource, RunConfig};
use crate::data::{self, Dataset};
use crate::diagnostics::{self, TraceRecord};
use crate::grouping::{partition_chunk, Strategy};
use crate::linalg::EigDecomp;
use crate::model::{self, GradcheckReport, Head, MlpSpec, ModelParams};
use crate::optimizer::checkpoint::{read_checkpoint, write_checkpoint};
use crate::optimizer::diag::{DiagOptimizer, DiagState};
use crate::optimizer::{BlockOptimizer, Variant};
use crate::{Error, Result};

/// Keeps the initial weights independent of the toy data drawn from the same seed.
const INIT_SALT: u64 = 0x5eed_1417_0000_0001;

/// Values stored ahead of the parameters in a checkpoint payload.
const PAYLOAD_HEADER: usize = 4;

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.dataset {
        DatasetSource::Toy => data::gen_toy(cfg.seed).0,
        DatasetSource::Mnist { images, labels } => data::load_idx(images, labels)?,
    };
    data::check_compatible(&ds, &cfg.model)?;
    Ok(ds)
}

#[derive(Debug, Clone)]
pub enum Engine {
    Block(BlockOptimizer),
    Diag(DiagOptimizer),
}

impl Engine {
    fn t(&self) -> u64 {
        match self {
            Engine::Block(o) => o.state().t(),
            Engine::Diag(o) => o.state.t,
        }
    }
}

/// Previous-step state retained for Term B.
enum Snapshot {
    Block(Vec<EigDecomp>),
    Diag(Vec<f64>),
}

/// Stepwise training loop over one configuration.
pub struct Trainer {
    pub cfg: RunConfig,
    pub dataset: Arc<Dataset>,
    pub params: ModelParams,
    pub engine: Engine,
    pub total_steps: u64,
    /// Largest `‖g‖∞` seen so far.
    pub g_inf: f64,
    pub kappa_max: f64,
    /// Smallest effective preconditioner eigenvalue seen on diagnostic steps.
    pub min_effective_eig: f64,
    pub min_grad_norm_sq: f64,
    pub last_grad_norm_sq: f64,
    pub records: Vec<TraceRecord>,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: RunConfig, dataset: Arc<Dataset>) -> Result<Self> {
        data::check_compatible(&dataset, &cfg.model)?;
        let layout = cfg.model.layout();
        let d = layout.total();
        let engine = match cfg.partition {
            Strategy::Diag => {
                if cfg.clip.is_some() {
                    return Err(Error::Config {
                        line: 0,
                        msg:
                            "clipping needs a block partition; use chunk(1) for elementwise groups"
                                .into(),
                    });
                }
                Engine::Diag(DiagOptimizer::new(cfg.design, cfg.eps, d)?)
            }
            s => {
                let mut o = BlockOptimizer::new(cfg.design, s.build(&layout)?)?.with_layout(layout);
                if let Some(c) = cfg.clip {
                    o = o.with_clipping(c);
                }
                Engine::Block(o)
            }
        };
        let total_steps = cfg.total_steps(dataset.len());
        let params = model::init_params(&cfg.model, cfg.seed ^ INIT_SALT);
        let mut tr = Self {
            cfg,
            dataset,
            params,
            engine,
            total_steps,
            g_inf: 0.0,
            kappa_max: 1.0,
            min_effective_eig: f64::INFINITY,
            min_grad_norm_sq: f64::INFINITY,
            last_grad_norm_sq: f64::NAN,
            records: Vec::new(),
            started: Instant::now(),
        };
        if let Some(path) = tr.cfg.resume.clone() {
            tr.load_checkpoint(&path)?;
        }
        Ok(tr)
    }

    pub fn t(&self) -> u64 {
        self.engine.t()
    }

    pub fn done(&self) -> bool {
        self.t() >= self.total_steps
    }

    fn is_diag_step(&self, t: u64) -> bool {
        t == 1 || t % self.cfg.diag_every == 0 || t == self.total_steps
    }

    /// One optimizer step; returns the trace row when `t` is a diagnostic step.
    pub fn step(&mut self) -> Result<Option<TraceRecord>> {
        let t = self.t() + 1;
        let alpha = self.cfg.lr.at(t);
        let (xb, yb) = data::sample_batch(&self.dataset, &self.cfg.batch, t, self.cfg.seed);
        let (loss, g) = model::forward_backward(&self.params, &self.cfg.model, &xb, &yb).map_err(
            |e| match e {
                Error::NonFinite { location } => Error::Numerical {
                    step: t,
                    msg: format!("non-finite {location}"),
                },
                e => e,
            },
        )?;
        let gn2: f64 = g.iter().map(|v| v * v).sum();
        self.g_inf = g.iter().fold(self.g_inf, |a, v| a.max(v.abs()));
        self.min_grad_norm_sq = self.min_grad_norm_sq.min(gn2);
        self.last_grad_norm_sq = gn2;

        let diag_step = self.is_diag_step(t);
        let snapshot = match (&self.engine, diag_step) {
            (_, false) => None,
            (Engine::Block(o), true) => Some(Snapshot::Block(o.state().spectra().to_vec())),
            (Engine::Diag(o), true) => Some(Snapshot::Diag(o.state.v.clone())),
        };
        match &mut self.engine {
            Engine::Block(o) => o.step(&mut self.params.values, &g, alpha)?,
            Engine::Diag(o) => o.step(&mut self.params.values, &g, alpha)?,
        }
        let Some(prev) = snapshot else {
            return Ok(None);
        };

        let alpha_prev = if t > 1 { self.cfg.lr.at(t - 1) } else { alpha };
        let design = self.cfg.design;
        let (term_a, term_b, kappa, min_eig) = if design.variant == Variant::Sgd {
            let tb = if t > 1 {
                (alpha - alpha_prev).abs()
            } else {
                0.0
            };
            (alpha * alpha * gn2, tb, 1.0, alpha)
        } else {
            match (&self.engine, prev) {
                (Engine::Block(o), Snapshot::Block(prev)) => {
                    let spectra = o.state().spectra();
                    let gp = o.partition().gather(&g);
                    let ta = diagnostics::term_a(alpha, spectra, design.delta, &gp)?;
                    let tb = if t > 1 {
                        diagnostics::term_b(alpha, spectra, alpha_prev, &prev, design.delta)?
                    } else {
                        0.0
                    };
                    (
                        ta,
                        tb,
                        diagnostics::kappa_t(spectra, design.beta2, design.delta),
                        diagnostics::min_effective_eig(alpha, spectra, design.delta),
                    )
                }
                (Engine::Diag(o), Snapshot::Diag(prev)) => {
                    let v = &o.state.v;
                    let eps = o.eps;
                    let ta = v
                        .iter()
                        .zip(&g)
                        .map(|(vi, gi)| (alpha * gi / (vi.max(0.0).sqrt() + eps)).powi(2))
                        .sum();
                    let tb = if t > 1 {
                        diagnostics::diag_term_b(alpha, v, alpha_prev, &prev, eps)?
                    } else {
                        0.0
                    };
                    let vmax = v.iter().fold(0.0f64, |a, &b| a.max(b));
                    (
                        ta,
                        tb,
                        diagnostics::diag_kappa_t(v, design.beta2, eps),
                        alpha / (vmax.sqrt() + eps),
                    )
                }
                _ => unreachable!("snapshot kind follows the engine"),
            }
        };
        self.kappa_max = self.kappa_max.max(kappa);
        self.min_effective_eig = self.min_effective_eig.min(min_eig);
        let rec = TraceRecord {
            t,
            loss,
            grad_norm_sq: gn2,
            term_a,
            term_b,
            kappa_t: kappa,
            batch_size: yb.len(),
            wall_ms: if self.cfg.wall_clock {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        rec.check()?;
        self.records.push(rec);
        Ok(Some(rec))
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn full_loss(&self) -> Result<f64> {
        model::loss(
            &self.params,
            &self.cfg.model,
            &self.dataset.x,
            &self.dataset.y,
        )
    }

    pub fn accuracy(&self) -> Result<f64> {
        model::eval_accuracy(
            &self.params,
            &self.cfg.model,
            &self.dataset.x,
            &self.dataset.y,
        )
    }

    /// Block view of the optimizer, converting the elementwise state if needed.
    fn block_view(&self) -> Result<BlockOptimizer> {
        match &self.engine {
            Engine::Block(o) => Ok(o.clone()),
            Engine::Diag(o) => {
                let mut b = BlockOptimizer::new(o.design, partition_chunk(self.params.len(), 1)?)?;
                b.set_state(o.state.to_block_state(&o.design)?)?;
                Ok(b)
            }
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let opt = self.block_view()?;
        let mut extra = vec![
            self.g_inf,
            self.kappa_max,
            self.min_effective_eig,
            self.min_grad_norm_sq,
        ];
        extra.extend_from_slice(&self.params.values);
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &opt, &extra)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let opt = self.block_view()?;
        let mut r = BufReader::new(
            File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
        );
        let (state, extra) = read_checkpoint(&mut r, opt.design(), opt.partition())?;
        if extra.len() != PAYLOAD_HEADER + self.params.len() {
            return Err(Error::Checkpoint(format!(
                "payload holds {} values, expected {}",
                extra.len(),
                PAYLOAD_HEADER + self.params.len()
            )));
        }
        match &mut self.engine {
            Engine::Block(o) => o.set_state(state)?,
            Engine::Diag(o) => o.state = DiagState::from_block_state(&state)?,
        }
        self.g_inf = extra[0];
        self.kappa_max = extra[1];
        self.min_effective_eig = extra[2];
        self.min_grad_norm_sq = extra[3];
        self.params.values.copy_from_slice(&extra[PAYLOAD_HEADER..]);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub min_grad_norm_sq: f64,
    pub accuracy: f64,
    pub min_effective_eig: f64,
    pub kappa_max: f64,
    pub g_inf: f64,
}

fn summarize(tr: &Trainer) -> Result<RunSummary> {
    Ok(RunSummary {
        steps: tr.t(),
        final_loss: tr.full_loss()?,
        min_grad_norm_sq: tr.min_grad_norm_sq,
        accuracy: tr.accuracy()?,
        min_effective_eig: tr.min_effective_eig,
        kappa_max: tr.kappa_max,
        g_inf: tr.g_inf,
    })
}

fn summary_text(tr: &Trainer, s: &RunSummary) -> String {
    let c = &tr.cfg;
    let stab = diagnostics::stability_conditions(
        c.design.beta2,
        c.design.delta,
        s.g_inf,
        s.kappa_max,
        c.lr.at(1),
        c.lipschitz,
    );
    let mut out = String::new();
    let _ = writeln!(out, "steps = {}", s.steps);
    let _ = writeln!(out, "seed = {}", c.seed);
    let _ = writeln!(out, "final_loss = {:?}", s.final_loss);
    let _ = writeln!(out, "min_grad_norm_sq = {:?}", s.min_grad_norm_sq);
    let _ = writeln!(out, "eval_accuracy = {:?}", s.accuracy);
    let _ = writeln!(out, "min_effective_eig = {:?}", s.min_effective_eig);
    let _ = writeln!(out, "kappa_max = {:?}", s.kappa_max);
    let _ = writeln!(out, "g_inf = {:?}", s.g_inf);
    let _ = writeln!(out, "beta2_condition = {}", stab.beta2_ok);
    let _ = writeln!(
        out,
        "step_size_condition = {}",
        stab.alpha_ok
            .map_or("unknown (no lipschitz)".to_string(), |b| b.to_string())
    );
    let _ = writeln!(out, "\n[config]");
    out.push_str(&c.to_text());
    out
}

/// Trains, writing `trace.csv` and `summary.txt` into `out`.
pub fn cmd_run(cfg: RunConfig, out: &Path) -> Result<RunSummary> {
    let ds = Arc::new(load_dataset(&cfg)?);
    let mut tr = Trainer::new(cfg, ds)?;
    tr.run_to_end()?;
    let summary = summarize(&tr)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("trace.csv"), diagnostics::write_trace(&tr.records))?;
    fs::write(out.join("summary.txt"), summary_text(&tr, &summary))?;
    if let Some(path) = &tr.cfg.checkpoint {
        tr.save_checkpoint(path)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSummary {
    pub final_loss_a: f64,
    pub final_loss_b: f64,
    pub median_term_b_a: f64,
    pub median_term_b_b: f64,
    pub max_param_diff: f64,
}

/// `a / b` with `0 / 0 = 1`.
pub fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const COMPARE_COLS: [&str; 7] = [
    "loss",
    "grad_norm_sq",
    "term_a",
    "term_b",
    "kappa_t",
    "batch_size",
    "wall_ms",
];

fn record_fields(r: &TraceRecord) -> [String; 7] {
    [
        format!("{:?}", r.loss),
        format!("{:?}", r.grad_norm_sq),
        format!("{:?}", r.term_a),
        format!("{:?}", r.term_b),
        format!("{:?}", r.kappa_t),
        r.batch_size.to_string(),
        r.wall_ms.to_string(),
    ]
}

/// Runs two configurations in lockstep over the same data and writes
/// `compare.csv` and `compare_summary.txt`.
pub fn cmd_compare(a: RunConfig, b: RunConfig, out: &Path) -> Result<CompareSummary> {
    let refuse = |msg: &str| {
        Err(Error::Config {
            line: 0,
            msg: msg.into(),
        })
    };
    if a.seed != b.seed {
        return refuse("compared runs must share the seed");
    }
    if a.dataset != b.dataset {
        return refuse("compared runs must share the dataset");
    }
    if a.model != b.model {
        return refuse("compared runs must share the model");
    }
    let ds = Arc::new(load_dataset(&a)?);
    let mut ta = Trainer::new(a, ds.clone())?;
    let mut tb = Trainer::new(b, ds)?;
    if ta.total_steps != tb.total_steps {
        return refuse("compared runs must have the same number of steps");
    }

    let mut header = vec!["t".to_string()];
    for c in COMPARE_COLS {
        header.push(format!("{c}_a"));
        header.push(format!("{c}_b"));
    }
    header.extend(["loss_ratio", "term_b_ratio", "param_max_diff"].map(String::from));
    let mut csv = header.join(",") + "\n";
    let mut max_diff = 0.0f64;
    while !ta.done() {
        let ra = ta.step()?;
        let rb = tb.step()?;
        let diff = ta
            .params
            .values
            .iter()
            .zip(&tb.params.values)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        max_diff = max_diff.max(diff);
        if let (Some(ra), Some(rb)) = (ra, rb) {
            let (fa, fb) = (record_fields(&ra), record_fields(&rb));
            let mut row = vec![ra.t.to_string()];
            for k in 0..COMPARE_COLS.len() {
                row.push(fa[k].clone());
                row.push(fb[k].clone());
            }
            row.push(format!("{:?}", ratio(ra.loss, rb.loss)));
            row.push(format!("{:?}", ratio(ra.term_b, rb.term_b)));
            row.push(format!("{diff:?}"));
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
    }
    let term_b = |tr: &Trainer| {
        median(
            &tr.records
                .iter()
                .filter(|r| r.t > 1)
                .map(|r| r.term_b)
                .collect::<Vec<_>>(),
        )
    };
    let summary = CompareSummary {
        final_loss_a: ta.full_loss()?,
        final_loss_b: tb.full_loss()?,
        median_term_b_a: term_b(&ta),
        median_term_b_b: term_b(&tb),
        max_param_diff: max_diff,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("compare.csv"), csv)?;
    let mut s = String::new();
    let _ = writeln!(s, "steps = {}", ta.t());
    let _ = writeln!(s, "seed = {}", ta.cfg.seed);
    let _ = writeln!(s, "final_loss_a = {:?}", summary.final_loss_a);
    let _ = writeln!(s, "final_loss_b = {:?}", summary.final_loss_b);
    let _ = writeln!(
        s,
        "final_loss_ratio = {:?}",
        ratio(summary.final_loss_a, summary.final_loss_b)
    );
    let _ = writeln!(s, "median_term_b_a = {:?}", summary.median_term_b_a);
    let _ = writeln!(s, "median_term_b_b = {:?}", summary.median_term_b_b);
    let _ = writeln!(
        s,
        "median_term_b_ratio = {:?}",
        ratio(summary.median_term_b_a, summary.median_term_b_b)
    );
    let _ = writeln!(s, "max_param_diff = {:?}", summary.max_param_diff);
    let _ = writeln!(s, "\n[config a]\n{}", ta.cfg.to_text());
    let _ = writeln!(s, "[config b]\n{}", tb.cfg.to_text());
    fs::write(out.join("compare_summary.txt"), s)?;
    Ok(summary)
}

/// Largest relative error allowed by the gradient check.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Finite-difference check of one architecture. Small models probe every
/// coordinate; larger ones probe a seeded sample from each tensor.
pub fn gradcheck_model(spec: &MlpSpec, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model::init_params(spec, seed ^ INIT_SALT);
    // nonzero biases keep ReLU inputs away from the kink at 0
    for t in spec
        .layout()
        .tensors()
        .iter()
        .filter(|t| t.name.starts_with('b'))
    {
        for v in &mut params.values[t.offset..t.offset + t.len()] {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let rows = 8;
    let p = spec.input_dim();
    // pixel-like inputs for wide models, Gaussian-ish for small ones
    let x: Vec<f64> = if p > 16 {
        (0..rows * p).map(|_| rng.random::<f64>()).collect()
    } else {
        (0..rows * p).map(|_| rng.random_range(-2.0..2.0)).collect()
    };
    let y: Vec<usize> = (0..rows)
        .map(|_| rng.random_range(0..spec.num_classes()))
        .collect();
    let d = spec.param_count();
    let probes: Vec<usize> = if d <= 200 {
        (0..d).collect()
    } else {
        spec.layout()
            .tensors()
            .iter()
            .flat_map(|t| {
                (0..8)
                    .map(|_| t.offset + rng.random_range(0..t.len()))
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    model::gradcheck(
        &params,
        spec,
        &x,
        &y,
        &probes,
        1e-5,
        model::forward_backward,
    )
}

/// The default suite: the toy network and a 784-100-10 classifier.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(MlpSpec, GradcheckReport)>> {
    let specs = [
        MlpSpec::toy(),
        MlpSpec::new(vec![784, 100, 10], Head::SoftmaxCe)?,
    ];
    specs
        .into_iter()
        .map(|s| gradcheck_model(&s, seed).map(|r| (s, r)))
        .collect()
}
