//! Datasets, the IDX loader and the minibatch sampler.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{self, Head, MlpSpec, ModelParams};
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Rows of `x` are examples, stored row-major with `p` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub p: usize,
    pub y: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(x: Vec<f64>, p: usize, y: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if y.is_empty() || p == 0 || x.len() != y.len() * p {
            return Err(Error::DimensionMismatch {
                context: "dataset rows",
                expected: y.len() * p,
                actual: x.len(),
            });
        }
        Ok(Self {
            x,
            p,
            y,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn num_classes(&self) -> usize {
        self.y.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSchedule {
    Fixed(usize),
    /// `M_t = ceil(c t)`, capped at the dataset size.
    Linear(f64),
}

impl BatchSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BatchSchedule::Fixed(0) => Err(Error::InvalidArgument(
                "fixed batch size must be >= 1".into(),
            )),
            BatchSchedule::Linear(c) if !(c > 0.0 && c.is_finite()) => Err(Error::InvalidArgument(
                format!("linear batch rate must be > 0, got {c}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn size_at(&self, t: u64, n: usize) -> usize {
        match *self {
            BatchSchedule::Fixed(m) => m,
            BatchSchedule::Linear(c) => ((c * t as f64).ceil() as usize).clamp(1, n.max(1)),
        }
    }
}

/// Ten standard-normal points in two dimensions labelled by a random
/// `2-2-2-1` sigmoid teacher.
pub fn gen_toy(seed: u64) -> (Dataset, ModelParams) {
    let spec = MlpSpec::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher = ModelParams::zeros(&spec);
    for t in spec.layout().tensors() {
        if t.name.starts_with('w') {
            for v in &mut teacher.values[t.offset..t.offset + t.len()] {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    let n = 10;
    let x: Vec<f64> = (0..n * 2).map(|_| rng.sample(StandardNormal)).collect();
    let logits = model::logits(&teacher, &spec, &x).expect("toy shapes are consistent");
    let y = logits
        .iter()
        .map(|z| {
            let p = 1.0 / (1.0 + (-z[0]).exp());
            usize::from(rng.random::<f64>() < p)
        })
        .collect();
    (
        Dataset::new(x, 2, y, "toy").expect("toy shapes are consistent"),
        teacher,
    )
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "truncated header: expected at least {} bytes, found {}",
                at + 4,
                bytes.len()
            ),
        })
}

fn read_idx(path: &Path, magic: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let found = be_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    let dims = (0..ndims)
        .map(|k| be_u32(&bytes, 4 + 4 * k, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images, IMAGES_MAGIC, 3)?;
    let (ldims, lab) = read_idx(labels, LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            msg: format!("{} labels for {} images", ldims[0], idims[0]),
        });
    }
    let p = idims[1] * idims[2];
    if p == 0 || idims[0] == 0 {
        return Err(Error::Format {
            path: images.to_path_buf(),
            msg: "empty image set".into(),
        });
    }
    let x = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let y = lab.iter().map(|&b| usize::from(b)).collect();
    Dataset::new(x, p, y, "mnist")
}

/// Writes an IDX image/label pair. Pixels are given as raw bytes.
pub fn write_idx(
    images: &Path,
    labels: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    y: &[u8],
) -> Result<()> {
    if pixels.len() != y.len() * rows * cols {
        return Err(Error::DimensionMismatch {
            context: "idx pixel count",
            expected: y.len() * rows * cols,
            actual: pixels.len(),
        });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, y.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + y.len());
    for v in [LABELS_MAGIC, y.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(y);
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}

/// Indices of the minibatch for step `t`, drawn with replacement. The
/// generator is keyed by `(seed, t)`, so batches do not depend on history.
pub fn sample_indices(n: usize, schedule: &BatchSchedule, t: u64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    (0..schedule.size_at(t, n))
        .map(|_| rng.random_range(0..n))
        .collect()
}

pub fn sample_batch(
    ds: &Dataset,
    schedule: &BatchSchedule,
    t: u64,
    seed: u64,
) -> (Vec<f64>, Vec<usize>) {
    ds.subset(&sample_indices(ds.len(), schedule, t, seed))
}

/// The dataset must fit the model's input width and label range.
pub fn check_compatible(ds: &Dataset, spec: &MlpSpec) -> Result<()> {
    if ds.p != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "dataset features vs model input",
            expected: spec.input_dim(),
            actual: ds.p,
        });
    }
    let classes = match spec.head {
        Head::SigmoidBce => 2,
        Head::SoftmaxCe => spec.num_classes(),
    };
    if ds.num_classes() > classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has labels up to {} but the model has {classes} classes",
            ds.num_classes() - 1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_is_seeded_and_shaped() {
        let (a, ta) = gen_toy(4);
        let (b, tb) = gen_toy(4);
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!((a.len(), a.p), (10, 2));
        assert!(a.y.iter().all(|&v| v <= 1));
        assert_ne!(gen_toy(5).0, a);
    }

    #[test]
    fn toy_inputs_are_centered() {
        let pooled: Vec<f64> = (0..100).flat_map(|s| gen_toy(s).0.x).collect();
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        assert!(mean.abs() < 3.0 / 20f64.sqrt(), "mean {mean}");
        // the pooled mean of 2000 draws is much tighter than that
        assert!(mean.abs() < 3.0 / (pooled.len() as f64).sqrt());
    }

    #[test]
    fn idx_fixture_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let pixels = [0u8, 255, 51, 102, 7, 8, 9, 10];
        write_idx(&ip, &lp, 2, 2, &pixels, &[3, 9]).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.y, vec![3, 9]);
        assert_eq!((ds.len(), ds.p), (2, 4));
        let back: Vec<u8> = ds.x.iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, 2, 2, &[0; 8], &[1, 2]).unwrap();
        // labels file in the image slot
        let err = load_idx(&lp, &lp).unwrap_err();
        assert!(err.to_string().contains("0x00000801"), "{err}");
        assert_eq!(err.exit_code(), 2);
        // truncated images
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(
            err.to_string().contains("expected 24 bytes, found 23"),
            "{err}"
        );
        // count mismatch
        write_idx(&ip, &lp, 2, 2, &[0; 4], &[1]).unwrap();
        let (ip2, lp2) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx(&ip2, &lp2, 2, 2, &[0; 8], &[1, 2]).unwrap();
        assert!(load_idx(&ip, &lp2).is_err());
        assert!(load_idx(&dir.path().join("missing"), &lp).is_err());
    }

    #[test]
    fn batch_sizes() {
        let (ds, _) = gen_toy(0);
        let big = Dataset::new(vec![0.0; 1000], 1, vec![0; 1000], "z").unwrap();
        assert_eq!(
            sample_batch(&big, &BatchSchedule::Fixed(128), 3, 1).1.len(),
            128
        );
        assert_eq!(BatchSchedule::Linear(0.5).size_at(7, 100), 4);
        assert_eq!(BatchSchedule::Linear(0.5).size_at(1000, ds.len()), 10);
        assert!(BatchSchedule::Fixed(0).validate().is_err());
        assert!(BatchSchedule::Linear(-1.0).validate().is_err());
    }

    #[test]
    fn batches_are_keyed_by_seed_and_step() {
        assert_eq!(
            sample_indices(50, &BatchSchedule::Fixed(20), 9, 3),
            sample_indices(50, &BatchSchedule::Fixed(20), 9, 3)
        );
        assert_ne!(
            sample_indices(50, &BatchSchedule::Fixed(20), 9, 3),
            sample_indices(50, &BatchSchedule::Fixed(20), 10, 3)
        );
    }

    proptest! {
        #[test]
        fn indices_in_range(n in 1usize..200, t in 1u64..10_000, seed: u64, c in 0.01f64..5.0) {
            let idx = sample_indices(n, &BatchSchedule::Linear(c), t, seed);
            prop_assert!(!idx.is_empty());
            prop_assert!(idx.iter().all(|&i| i < n));
        }

        #[test]
        fn linear_schedule_monotone_and_capped(c in 0.01f64..5.0, n in 1usize..500, t in 1u64..5000) {
            let s = BatchSchedule::Linear(c);
            prop_assert!(s.size_at(t, n) <= s.size_at(t + 1, n));
            prop_assert!(s.size_at(t, n) <= n);
        }
    }
}
