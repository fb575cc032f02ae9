//! Small fully-connected network with hand-written backpropagation.
//!
//! Parameters live in one flat vector laid out as `w0, b0, w1, b1, ...`
//! where `wl` has shape `(out, in)` stored row-major and `bl` has shape
//! `(out,)`. Hidden layers use ReLU; the head is either a single sigmoid
//! unit with binary cross-entropy or a softmax with cross-entropy.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grouping::TensorLayout;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// One output unit, labels in {0, 1}.
    SigmoidBce,
    /// One output per class, labels are class indices.
    SoftmaxCe,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::SigmoidBce => "sigmoid",
            Head::SoftmaxCe => "softmax",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, head: Head) -> Result<Self> {
        let spec = Self { widths, head };
        spec.validate()?;
        Ok(spec)
    }

    /// `2-2-2-1` with a sigmoid output.
    pub fn toy() -> Self {
        Self {
            widths: vec![2, 2, 2, 1],
            head: Head::SigmoidBce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least input and output widths".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        if self.head == Head::SigmoidBce && *self.widths.last().unwrap() != 1 {
            return Err(Error::InvalidArgument(
                "sigmoid head needs output width 1".into(),
            ));
        }
        if self.head == Head::SoftmaxCe && *self.widths.last().unwrap() < 2 {
            return Err(Error::InvalidArgument(
                "softmax head needs output width >= 2".into(),
            ));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        match self.head {
            Head::SigmoidBce => 2,
            Head::SoftmaxCe => *self.widths.last().unwrap(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layout(&self) -> TensorLayout {
        let tensors = self.widths.windows(2).enumerate().flat_map(|(l, w)| {
            [
                (format!("w{l}"), vec![w[1], w[0]]),
                (format!("b{l}"), vec![w[1]]),
            ]
        });
        TensorLayout::packed(tensors).expect("valid spec gives a valid layout")
    }

    /// `(weight offset, bias offset)` of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let before: usize = self.widths[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (before, before + self.widths[l] * self.widths[l + 1])
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        write!(f, "{} ({})", w.join("-"), self.head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layout: TensorLayout,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layout: spec.layout(),
            values: vec![0.0; spec.param_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Glorot-uniform weights, zero biases, reproducible per seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(spec);
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (w, _) = spec.offsets(l);
        for v in &mut p.values[w..w + fan_in * fan_out] {
            *v = rng.random_range(-a..a);
        }
    }
    p
}

fn check_batch(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &[f64],
    y: Option<&[usize]>,
) -> Result<usize> {
    if params.values.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            context: "parameter count",
            expected: spec.param_count(),
            actual: params.values.len(),
        });
    }
    let p = spec.input_dim();
    if x.is_empty() || x.len() % p != 0 {
        return Err(Error::DimensionMismatch {
            context: "input row width",
            expected: p,
            actual: x.len(),
        });
    }
    let rows = x.len() / p;
    if let Some(y) = y {
        if y.len() != rows {
            return Err(Error::DimensionMismatch {
                context: "label count",
                expected: rows,
                actual: y.len(),
            });
        }
        let classes = spec.num_classes();
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
    }
    Ok(rows)
}

/// Pre-activations of every layer for one example.
fn forward_one(params: &[f64], spec: &MlpSpec, input: &[f64]) -> Vec<Vec<f64>> {
    let mut pre = Vec::with_capacity(spec.num_layers());
    let mut act = input.to_vec();
    for l in 0..spec.num_layers() {
        let (fi, fo) = (spec.widths[l], spec.widths[l + 1]);
        let (w, b) = spec.offsets(l);
        let z: Vec<f64> = (0..fo)
            .map(|o| {
                let row = &params[w + o * fi..w + (o + 1) * fi];
                params[b + o] + row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        act = z.iter().map(|&v| v.max(0.0)).collect();
        pre.push(z);
    }
    pre
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-example loss and `∂loss/∂logits`.
fn head_loss(spec: &MlpSpec, logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    match spec.head {
        Head::SigmoidBce => {
            let z = logits[0];
            let y = label as f64;
            // softplus(z) - y z, written to avoid overflow
            let loss = z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
            (loss, vec![sigmoid(z) - y])
        }
        Head::SoftmaxCe => {
            let lse = log_sum_exp(logits);
            let mut dz: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
            dz[label] -= 1.0;
            (lse - logits[label], dz)
        }
    }
}

/// Mean loss over the batch and its exact gradient with respect to the
/// flat parameter vector. `x` holds the batch row-major.
pub fn forward_backward(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &[f64],
    y: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let rows = check_batch(params, spec, x, Some(y))?;
    let p = spec.input_dim();
    let w = &params.values;
    let mut grad = vec![0.0; w.len()];
    let mut total = 0.0;
    let inv_n = 1.0 / rows as f64;
    for r in 0..rows {
        let input = &x[r * p..(r + 1) * p];
        let pre = forward_one(w, spec, input);
        let (loss, mut delta) = head_loss(spec, pre.last().unwrap(), y[r]);
        total += loss;
        for l in (0..spec.num_layers()).rev() {
            let (fi, fo) = (spec.widths[l], spec.widths[l + 1]);
            let (wo, bo) = spec.offsets(l);
            let act_in: Vec<f64> = if l == 0 {
                input.to_vec()
            } else {
                pre[l - 1].iter().map(|&v| v.max(0.0)).collect()
            };
            for o in 0..fo {
                let d = delta[o] * inv_n;
                grad[bo + o] += d;
                if d != 0.0 {
                    let g = &mut grad[wo + o * fi..wo + (o + 1) * fi];
                    for (gi, ai) in g.iter_mut().zip(&act_in) {
                        *gi += d * ai;
                    }
                }
            }
            if l > 0 {
                let mut next = vec![0.0; fi];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[wo + o * fi..wo + (o + 1) * fi];
                    for (n, wv) in next.iter_mut().zip(row) {
                        *n += wv * d;
                    }
                }
                // ReLU subgradient at 0 is 0
                for (n, &z) in next.iter_mut().zip(&pre[l - 1]) {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    Ok((loss, grad))
}

/// Mean loss only.
pub fn loss(params: &ModelParams, spec: &MlpSpec, x: &[f64], y: &[usize]) -> Result<f64> {
    let rows = check_batch(params, spec, x, Some(y))?;
    let p = spec.input_dim();
    let total: f64 = (0..rows)
        .map(|r| {
            let pre = forward_one(&params.values, spec, &x[r * p..(r + 1) * p]);
            head_loss(spec, pre.last().unwrap(), y[r]).0
        })
        .sum();
    let loss = total / rows as f64;
    if !loss.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    Ok(loss)
}

/// Output-layer logits for each row.
pub fn logits(params: &ModelParams, spec: &MlpSpec, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let rows = check_batch(params, spec, x, None)?;
    let p = spec.input_dim();
    Ok((0..rows)
        .map(|r| {
            forward_one(&params.values, spec, &x[r * p..(r + 1) * p])
                .pop()
                .unwrap()
        })
        .collect())
}

/// Predicted class; argmax ties and a sigmoid output of exactly 0.5 go to
/// the lower class.
pub fn predict(spec: &MlpSpec, logits: &[f64]) -> usize {
    match spec.head {
        Head::SigmoidBce => usize::from(logits[0] > 0.0),
        Head::SoftmaxCe => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
    }
}

pub fn eval_accuracy(params: &ModelParams, spec: &MlpSpec, x: &[f64], y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty batch".into()));
    }
    check_batch(params, spec, x, Some(y))?;
    let out = logits(params, spec, x)?;
    let correct = out
        .iter()
        .zip(y)
        .filter(|(z, &label)| predict(spec, z) == label)
        .count();
    Ok(correct as f64 / y.len() as f64)
}

/// Magnitude floor in the relative-error denominator of [`gradcheck`].
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub probes: usize,
}

/// Compares an analytic gradient against central differences with step `h`
/// at the given coordinates. The error per coordinate is
/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn gradcheck<F>(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &[f64],
    y: &[usize],
    probes: &[usize],
    h: f64,
    analytic: F,
) -> Result<GradcheckReport>
where
    F: Fn(&ModelParams, &MlpSpec, &[f64], &[usize]) -> Result<(f64, Vec<f64>)>,
{
    let (_, grad) = analytic(params, spec, x, y)?;
    let mut work = params.clone();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        probes: probes.len(),
    };
    for &i in probes {
        if i >= params.values.len() {
            return Err(Error::OutOfRange {
                index: i,
                len: params.values.len(),
            });
        }
        let orig = work.values[i];
        work.values[i] = orig + h;
        let fp = loss(&work, spec, x, y)?;
        work.values[i] = orig - h;
        let fm = loss(&work, spec, x, y)?;
        work.values[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random_batch(spec: &MlpSpec, rows: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..rows * spec.input_dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let y = (0..rows)
            .map(|_| rng.random_range(0..spec.num_classes()))
            .collect();
        (x, y)
    }

    #[test]
    fn toy_param_count_and_layout() {
        let spec = MlpSpec::toy();
        assert_eq!(spec.param_count(), 15);
        let names: Vec<_> = spec
            .layout()
            .tensors()
            .iter()
            .map(|t| t.name.clone())
            .collect();
        assert_eq!(names, ["w0", "b0", "w1", "b1", "w2", "b2"]);
        assert_eq!(
            MlpSpec::new(vec![784, 100, 10], Head::SoftmaxCe)
                .unwrap()
                .param_count(),
            79510
        );
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let spec = MlpSpec::new(vec![4, 3, 2], Head::SoftmaxCe).unwrap();
        let a = init_params(&spec, 3);
        assert_eq!(a, init_params(&spec, 3));
        assert_ne!(a, init_params(&spec, 4));
        for t in a.layout.tensors() {
            let vals = &a.values[t.offset..t.offset + t.len()];
            if t.name.starts_with('b') {
                assert!(vals.iter().all(|&v| v == 0.0));
            } else {
                let bound = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
                assert!(vals.iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn zero_weights_give_ln2() {
        let spec = MlpSpec::toy();
        let p = ModelParams::zeros(&spec);
        let (l, _) = forward_backward(&p, &spec, &[0.3, -2.0, 1.0, 1.0], &[1, 1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let spec = MlpSpec::new(vec![3, 4, 3], Head::SoftmaxCe).unwrap();
        let p = init_params(&spec, 1);
        let (x, y) = random_batch(&spec, 5, 2);
        let (l1, g1) = forward_backward(&p, &spec, &x, &y).unwrap();
        let x2 = [x.clone(), x.clone()].concat();
        let y2 = [y.clone(), y.clone()].concat();
        let (l2, g2) = forward_backward(&p, &spec, &x2, &y2).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn finite_differences_all_widths_and_heads() {
        for hidden in [1, 2, 5] {
            for head in [Head::SigmoidBce, Head::SoftmaxCe] {
                let out = if head == Head::SigmoidBce { 1 } else { 3 };
                let spec = MlpSpec::new(vec![2, hidden, hidden, out], head).unwrap();
                for seed in 0..10 {
                    let mut p = init_params(&spec, seed);
                    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                    for v in p.values.iter_mut() {
                        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
                    }
                    let (x, y) = random_batch(&spec, 6, seed);
                    let probes: Vec<usize> = (0..spec.param_count()).collect();
                    let r = gradcheck(&p, &spec, &x, &y, &probes, 1e-5, forward_backward).unwrap();
                    assert!(r.max_rel_err < 1e-5, "{spec} seed {seed}: {r:?}");
                }
            }
        }
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let spec = MlpSpec::toy();
        let p = init_params(&spec, 5);
        let (x, y) = random_batch(&spec, 4, 5);
        let probes: Vec<usize> = (0..15).collect();
        let r = gradcheck(&p, &spec, &x, &y, &probes, 1e-5, |p, s, x, y| {
            let (l, mut g) = forward_backward(p, s, x, y)?;
            g[14] += 0.01;
            Ok((l, g))
        })
        .unwrap();
        assert!(r.max_rel_err > 1e-5);
        assert_eq!(r.worst_index, 14);
    }

    #[test]
    fn accuracy_fixtures() {
        // perfect predictor: softmax with identity-like weights
        let spec = MlpSpec::new(vec![2, 2], Head::SoftmaxCe).unwrap();
        let mut p = ModelParams::zeros(&spec);
        p.values[..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = [3.0, 0.0, 0.0, 3.0, 1.0, 2.0];
        assert_eq!(eval_accuracy(&p, &spec, &x, &[0, 1, 1]).unwrap(), 1.0);
        // third example is misclassified on purpose
        let acc = eval_accuracy(&p, &spec, &x, &[0, 1, 0]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        // constant sigmoid predictor on balanced labels
        let toy = MlpSpec::toy();
        let z = ModelParams::zeros(&toy);
        assert_eq!(
            eval_accuracy(&z, &toy, &[0.0; 8], &[0, 1, 0, 1]).unwrap(),
            0.5
        );
        assert!(eval_accuracy(&z, &toy, &[], &[]).is_err());
    }

    #[test]
    fn softmax_tie_goes_to_lower_class() {
        let spec = MlpSpec::new(vec![1, 3], Head::SoftmaxCe).unwrap();
        assert_eq!(predict(&spec, &[1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn uniform_predictor_loss_bound() {
        let spec = MlpSpec::new(vec![3, 5], Head::SoftmaxCe).unwrap();
        let p = ModelParams::zeros(&spec);
        let (x, y) = random_batch(&spec, 7, 9);
        let l = loss(&p, &spec, &x, &y).unwrap();
        assert!(l >= 0.0 && l <= (5.0f64).ln() + 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let spec = MlpSpec::toy();
        let p = ModelParams::zeros(&spec);
        assert!(forward_backward(&p, &spec, &[1.0, 2.0, 3.0], &[1]).is_err());
        assert!(forward_backward(&p, &spec, &[1.0, 2.0], &[1, 0]).is_err());
        assert!(forward_backward(&p, &spec, &[1.0, 2.0], &[2]).is_err());
        assert!(MlpSpec::new(vec![2, 0, 1], Head::SigmoidBce).is_err());
        assert!(MlpSpec::new(vec![2, 2], Head::SigmoidBce).is_err());
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let spec = MlpSpec::new(vec![3, 4, 2], Head::SoftmaxCe).unwrap();
        let p = init_params(&spec, 8);
        let (x, y) = random_batch(&spec, 4, 3);
        let mut xr = Vec::new();
        for r in (0..4).rev() {
            xr.extend_from_slice(&x[r * 3..(r + 1) * 3]);
        }
        let yr: Vec<usize> = y.iter().rev().copied().collect();
        let a = loss(&p, &spec, &x, &y).unwrap();
        let b = loss(&p, &spec, &xr, &yr).unwrap();
        assert!((a - b).abs() < 1e-15);
    }
}
