//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! ```text
//! dataset   = toy
//! widths    = 2,2,2,1
//! variant   = adagrad
//! partition = full
//! lr        = constant(0.05)
//! steps     = 500
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use crate::clipping::ClipSchedule;
use crate::data::BatchSchedule;
use crate::grouping::Strategy;
use crate::model::{Head, MlpSpec};
use crate::optimizer::{Beta1Decay, Design, Variant};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Toy,
    Mnist { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `α₀ / √t`
    InvSqrt(f64),
    /// `α₀ · factor^k` after the `k`-th milestone.
    StepDecay {
        alpha0: f64,
        factor: f64,
        milestones: Vec<u64>,
    },
}

impl LrSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match self {
            LrSchedule::Constant(a) => *a,
            LrSchedule::InvSqrt(a) => a / (t.max(1) as f64).sqrt(),
            LrSchedule::StepDecay {
                alpha0,
                factor,
                milestones,
            } => {
                let k = milestones.iter().filter(|&&m| t > m).count();
                alpha0 * factor.powi(k as i32)
            }
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let ok = match self {
            LrSchedule::Constant(a) | LrSchedule::InvSqrt(a) => *a > 0.0 && a.is_finite(),
            LrSchedule::StepDecay {
                alpha0,
                factor,
                milestones,
            } => {
                *alpha0 > 0.0
                    && *factor > 0.0
                    && alpha0.is_finite()
                    && milestones.windows(2).all(|w| w[0] < w[1])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid learning-rate schedule {self}"))
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant(a) => write!(f, "constant({a:?})"),
            LrSchedule::InvSqrt(a) => write!(f, "inv_sqrt({a:?})"),
            LrSchedule::StepDecay {
                alpha0,
                factor,
                milestones,
            } => {
                let ms: Vec<String> = milestones.iter().map(u64::to_string).collect();
                write!(f, "step_decay({alpha0:?}, {factor:?}, {})", ms.join(" "))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Length {
    Steps(u64),
    Epochs(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub model: MlpSpec,
    pub design: Design,
    /// Denominator shift of the elementwise reference optimizer.
    pub eps: f64,
    pub partition: Strategy,
    pub lr: LrSchedule,
    pub clip: Option<ClipSchedule>,
    pub batch: BatchSchedule,
    pub length: Length,
    pub seed: u64,
    pub diag_every: u64,
    /// Record real elapsed milliseconds; off keeps traces reproducible.
    pub wall_clock: bool,
    pub lipschitz: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Toy,
            model: MlpSpec::toy(),
            design: Design::new(Variant::Adam),
            eps: 1e-4,
            partition: Strategy::Diag,
            lr: LrSchedule::Constant(0.01),
            clip: None,
            batch: BatchSchedule::Fixed(10),
            length: Length::Steps(100),
            seed: 0,
            diag_every: 10,
            wall_clock: false,
            lipschitz: None,
            checkpoint: None,
            resume: None,
        }
    }
}

/// Splits `name(a, b)` into `("name", ["a", "b"])`; a bare word has no args.
fn call(v: &str) -> std::result::Result<(&str, Vec<&str>), String> {
    match v.find('(') {
        None => Ok((v, Vec::new())),
        Some(open) => {
            let inner = v[open + 1..]
                .strip_suffix(')')
                .ok_or_else(|| format!("missing `)` in `{v}`"))?;
            let args = inner
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .collect();
            Ok((v[..open].trim(), args))
        }
    }
}

fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("cannot parse `{s}` as a number"))
}

fn one_arg<T: std::str::FromStr>(name: &str, args: &[&str]) -> std::result::Result<T, String> {
    match args {
        [a] => num(a),
        _ => Err(format!("`{name}` takes one argument")),
    }
}

fn parse_strategy(v: &str) -> std::result::Result<Strategy, String> {
    let (name, args) = call(v)?;
    let s = match name {
        "diag" if args.is_empty() => Strategy::Diag,
        "full" if args.is_empty() => Strategy::Full,
        "chunk" => Strategy::Chunk(one_arg(name, &args)?),
        "input_neuron" => Strategy::InputNeuron(one_arg(name, &args)?),
        "leading_axis" => Strategy::LeadingAxis(one_arg(name, &args)?),
        _ => return Err(format!("unknown partition `{v}`")),
    };
    match s {
        Strategy::Chunk(0) | Strategy::InputNeuron(0) | Strategy::LeadingAxis(0) => {
            Err("group size must be >= 1".into())
        }
        s => Ok(s),
    }
}

fn parse_lr(v: &str) -> std::result::Result<LrSchedule, String> {
    let (name, args) = call(v)?;
    let lr = match name {
        "constant" => LrSchedule::Constant(one_arg(name, &args)?),
        "inv_sqrt" => LrSchedule::InvSqrt(one_arg(name, &args)?),
        "step_decay" => match args.as_slice() {
            [a, f, ms] => LrSchedule::StepDecay {
                alpha0: num(a)?,
                factor: num(f)?,
                milestones: ms
                    .split_whitespace()
                    .map(num)
                    .collect::<std::result::Result<_, _>>()?,
            },
            [a, f] => LrSchedule::StepDecay {
                alpha0: num(a)?,
                factor: num(f)?,
                milestones: Vec::new(),
            },
            _ => return Err("step_decay takes (alpha0, factor, milestones)".into()),
        },
        _ => return Err(format!("unknown lr schedule `{v}`")),
    };
    lr.validate()?;
    Ok(lr)
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            line: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_with_base(&text, base)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, Path::new("."))
    }

    /// Relative file paths in the config resolve against `base`.
    pub fn parse_with_base(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut widths: Option<Vec<usize>> = None;
        let mut head: Option<Head> = None;
        let mut variant = Variant::Adam;
        let mut beta1: Option<f64> = None;
        let mut beta1_decay = Beta1Decay::Constant;
        let mut beta2 = 0.999;
        let mut delta = 1e-4;
        let mut eps: Option<f64> = None;
        let mut dataset = "toy".to_string();
        let mut images: Option<PathBuf> = None;
        let mut labels: Option<PathBuf> = None;
        let mut steps: Option<u64> = None;
        let mut epochs: Option<u64> = None;
        let mut seen = std::collections::HashSet::new();
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line, msg };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            let field =
                |r: std::result::Result<(), String>| r.map_err(|m| err(format!("{key}: {m}")));
            match key {
                "dataset" => field(match value {
                    "toy" | "mnist" => {
                        dataset = value.into();
                        Ok(())
                    }
                    _ => Err(format!("unknown dataset `{value}`")),
                })?,
                "mnist_images" => images = Some(resolve(value)),
                "mnist_labels" => labels = Some(resolve(value)),
                "widths" => field(
                    value
                        .split(',')
                        .map(num)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map(|w| widths = Some(w)),
                )?,
                "head" => field(match value {
                    "sigmoid" => {
                        head = Some(Head::SigmoidBce);
                        Ok(())
                    }
                    "softmax" => {
                        head = Some(Head::SoftmaxCe);
                        Ok(())
                    }
                    _ => Err(format!("unknown head `{value}`")),
                })?,
                "variant" => variant = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "beta1" => field(num(value).map(|v| beta1 = Some(v)))?,
                "beta1_decay" => field(call(value).and_then(|(name, args)| match name {
                    "constant" if args.is_empty() => {
                        beta1_decay = Beta1Decay::Constant;
                        Ok(())
                    }
                    "exponential" => {
                        one_arg(name, &args).map(|l| beta1_decay = Beta1Decay::Exponential(l))
                    }
                    _ => Err(format!("unknown beta1 decay `{value}`")),
                }))?,
                "beta2" => field(num(value).map(|v| beta2 = v))?,
                "delta" => field(num(value).map(|v| delta = v))?,
                "eps" => field(num(value).map(|v| eps = Some(v)))?,
                "partition" => field(parse_strategy(value).map(|s| cfg.partition = s))?,
                "lr" => field(parse_lr(value).map(|l| cfg.lr = l))?,
                "clip" => field(call(value).and_then(|(name, args)| {
                    match (name, args.as_slice()) {
                        ("off", []) => {
                            cfg.clip = None;
                            Ok(())
                        }
                        ("on", [g, a]) => ClipSchedule::new(num(g)?, num(a)?)
                            .map(|c| cfg.clip = Some(c))
                            .map_err(|e| e.to_string()),
                        _ => Err(format!(
                            "expected off or on(gamma, alpha_star), got `{value}`"
                        )),
                    }
                }))?,
                "batch" => field(call(value).and_then(|(name, args)| {
                    let b = match name {
                        "fixed" => BatchSchedule::Fixed(one_arg(name, &args)?),
                        "linear" => BatchSchedule::Linear(one_arg(name, &args)?),
                        _ => return Err(format!("unknown batch schedule `{value}`")),
                    };
                    b.validate().map_err(|e| e.to_string())?;
                    cfg.batch = b;
                    Ok(())
                }))?,
                "steps" => field(num(value).map(|v| steps = Some(v)))?,
                "epochs" => field(num(value).map(|v| epochs = Some(v)))?,
                "seed" => field(num(value).map(|v| cfg.seed = v))?,
                "diag_every" => field(num(value).and_then(|v: u64| {
                    if v == 0 {
                        Err("must be >= 1".into())
                    } else {
                        cfg.diag_every = v;
                        Ok(())
                    }
                }))?,
                "wall_clock" => field(parse_bool(value).map(|v| cfg.wall_clock = v))?,
                "lipschitz" => field(num(value).and_then(|v: f64| {
                    if v > 0.0 {
                        cfg.lipschitz = Some(v);
                        Ok(())
                    } else {
                        Err("must be > 0".into())
                    }
                }))?,
                "checkpoint" => cfg.checkpoint = Some(resolve(value)),
                "resume" => cfg.resume = Some(resolve(value)),
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }

        let whole = |msg: String| Error::Config { line: 0, msg };
        cfg.dataset = match dataset.as_str() {
            "mnist" => DatasetSource::Mnist {
                images: images.ok_or_else(|| whole("mnist needs mnist_images".into()))?,
                labels: labels.ok_or_else(|| whole("mnist needs mnist_labels".into()))?,
            },
            _ => DatasetSource::Toy,
        };
        let default_widths = match cfg.dataset {
            DatasetSource::Toy => vec![2, 2, 2, 1],
            DatasetSource::Mnist { .. } => vec![784, 100, 10],
        };
        let widths = widths.unwrap_or(default_widths);
        let head = head.unwrap_or(if widths.last() == Some(&1) {
            Head::SigmoidBce
        } else {
            Head::SoftmaxCe
        });
        cfg.model = MlpSpec::new(widths, head).map_err(|e| whole(e.to_string()))?;

        let mut design = Design::new(variant)
            .with_beta2(beta2)
            .with_delta(delta)
            .with_beta1_decay(beta1_decay);
        if let Some(b) = beta1 {
            design = design.with_beta1(b);
        }
        design.validate().map_err(|e| whole(e.to_string()))?;
        cfg.design = design;
        cfg.eps = eps.unwrap_or(delta);
        if !(cfg.eps > 0.0) {
            return Err(whole("eps must be > 0".into()));
        }
        cfg.length = match (steps, epochs) {
            (Some(s), None) => Length::Steps(s),
            (None, Some(e)) => {
                if !matches!(cfg.batch, BatchSchedule::Fixed(_)) {
                    return Err(whole("epochs need a fixed batch size".into()));
                }
                Length::Epochs(e)
            }
            _ => return Err(whole("set exactly one of steps or epochs".into())),
        };
        Ok(cfg)
    }

    /// Number of optimizer steps for a dataset of `n` rows.
    pub fn total_steps(&self, n: usize) -> u64 {
        match (self.length, self.batch) {
            (Length::Steps(s), _) => s,
            (Length::Epochs(e), BatchSchedule::Fixed(m)) => e * n.div_ceil(m) as u64,
            (Length::Epochs(_), BatchSchedule::Linear(_)) => unreachable!("rejected at parse time"),
        }
    }

    /// Canonical text form; parses back to the same configuration.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        match &self.dataset {
            DatasetSource::Toy => lines.push("dataset = toy".to_string()),
            DatasetSource::Mnist { images, labels } => {
                lines.push("dataset = mnist".into());
                lines.push(format!("mnist_images = {}", images.display()));
                lines.push(format!("mnist_labels = {}", labels.display()));
            }
        }
        let w: Vec<String> = self.model.widths.iter().map(usize::to_string).collect();
        lines.push(format!("widths = {}", w.join(",")));
        lines.push(format!("head = {}", self.model.head));
        let d = &self.design;
        lines.push(format!("variant = {}", d.variant));
        lines.push(format!("beta1 = {:?}", d.beta1));
        lines.push(match d.beta1_decay {
            Beta1Decay::Constant => "beta1_decay = constant".into(),
            Beta1Decay::Exponential(l) => format!("beta1_decay = exponential({l:?})"),
        });
        lines.push(format!("beta2 = {:?}", d.beta2));
        lines.push(format!("delta = {:?}", d.delta));
        lines.push(format!("eps = {:?}", self.eps));
        lines.push(format!("partition = {}", self.partition));
        lines.push(format!("lr = {}", self.lr));
        lines.push(match self.clip {
            None => "clip = off".into(),
            Some(c) => format!("clip = on({:?}, {:?})", c.gamma, c.alpha_star),
        });
        lines.push(match self.batch {
            BatchSchedule::Fixed(m) => format!("batch = fixed({m})"),
            BatchSchedule::Linear(c) => format!("batch = linear({c:?})"),
        });
        lines.push(match self.length {
            Length::Steps(s) => format!("steps = {s}"),
            Length::Epochs(e) => format!("epochs = {e}"),
        });
        lines.push(format!("seed = {}", self.seed));
        lines.push(format!("diag_every = {}", self.diag_every));
        lines.push(format!("wall_clock = {}", self.wall_clock));
        if let Some(l) = self.lipschitz {
            lines.push(format!("lipschitz = {l:?}"));
        }
        if let Some(p) = &self.checkpoint {
            lines.push(format!("checkpoint = {}", p.display()));
        }
        if let Some(p) = &self.resume {
            lines.push(format!("resume = {}", p.display()));
        }
        lines.join("\n") + "\n"
    }
}
