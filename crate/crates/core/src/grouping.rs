//! Coordinate partitions of the flat parameter vector.
//!
//! A [`Partition`] is an ordered list of group sizes. Groups are contiguous in
//! *grouped order*; layout-aware strategies whose logical groups are not
//! contiguous in the model's row-major storage (input-neuron grouping picks
//! matrix columns) carry a permutation from grouped position to flat index.

use std::fmt;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    /// `order[k]` is the flat index stored at grouped position `k`.
    order: Option<Vec<usize>>,
}

impl Partition {
    /// Explicit partition with identity ordering.
    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        Self::with_order(sizes, None)
    }

    pub fn with_order(sizes: Vec<usize>, order: Option<Vec<usize>>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidArgument(
                "partition needs at least one group".into(),
            ));
        }
        if let Some(j) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("group {j} is empty")));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for &n in &sizes {
            offsets.push(offsets.last().unwrap() + n);
        }
        let total = *offsets.last().unwrap();
        if let Some(order) = &order {
            if order.len() != total {
                return Err(Error::DimensionMismatch {
                    context: "partition ordering",
                    expected: total,
                    actual: order.len(),
                });
            }
            let mut seen = vec![false; total];
            for &i in order {
                if i >= total || seen[i] {
                    return Err(Error::InvalidArgument(format!(
                        "partition ordering is not a permutation (index {i})"
                    )));
                }
                seen[i] = true;
            }
        }
        // an identity permutation is dropped so the fast path applies
        let order = order.filter(|o| o.iter().enumerate().any(|(k, &i)| k != i));
        Ok(Self {
            sizes,
            offsets,
            order,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn order(&self) -> Option<&[usize]> {
        self.order.as_deref()
    }

    pub fn range(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    /// `Σ n_j²`, the number of stored second-moment entries.
    pub fn block_entries(&self) -> usize {
        self.sizes.iter().map(|n| n * n).sum()
    }

    /// Reorders a flat vector into grouped order.
    pub fn gather(&self, flat: &[f64]) -> Vec<f64> {
        match &self.order {
            None => flat.to_vec(),
            Some(order) => order.iter().map(|&i| flat[i]).collect(),
        }
    }

    /// Inverse of [`gather`](Self::gather).
    pub fn scatter(&self, grouped: &[f64]) -> Vec<f64> {
        match &self.order {
            None => grouped.to_vec(),
            Some(order) => {
                let mut flat = vec![0.0; grouped.len()];
                for (k, &i) in order.iter().enumerate() {
                    flat[i] = grouped[k];
                }
                flat
            }
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} groups over {} coordinates",
            self.num_groups(),
            self.total()
        )
    }
}

/// Slice of flat vector `g` belonging to group `j` (0-based).
pub fn gather_block(g: &[f64], p: &Partition, j: usize) -> Result<Vec<f64>> {
    if g.len() != p.total() {
        return Err(Error::DimensionMismatch {
            context: "gather_block",
            expected: p.total(),
            actual: g.len(),
        });
    }
    if j >= p.num_groups() {
        return Err(Error::OutOfRange {
            index: j,
            len: p.num_groups(),
        });
    }
    Ok(match p.order() {
        None => g[p.range(j)].to_vec(),
        Some(order) => order[p.range(j)].iter().map(|&i| g[i]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors tiling `[0, d)` in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl TensorLayout {
    /// Lays the tensors out back to back.
    pub fn packed<S: Into<String>>(
        tensors: impl IntoIterator<Item = (S, Vec<usize>)>,
    ) -> Result<Self> {
        let mut offset = 0;
        let mut out = Vec::new();
        for (name, shape) in tensors {
            let spec = TensorSpec {
                name: name.into(),
                shape,
                offset,
            };
            offset += spec.len();
            out.push(spec);
        }
        Self::new(out)
    }

    pub fn new(tensors: Vec<TensorSpec>) -> Result<Self> {
        let mut sorted: Vec<&TensorSpec> = tensors.iter().collect();
        sorted.sort_by_key(|t| t.offset);
        let mut next = 0;
        for t in sorted {
            if t.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "tensor `{}` is empty",
                    t.name
                )));
            }
            if t.offset != next {
                return Err(Error::InvalidArgument(format!(
                    "tensor `{}` starts at {} but previous tensors end at {next}",
                    t.name, t.offset
                )));
            }
            next += t.len();
        }
        if next == 0 {
            return Err(Error::InvalidArgument("layout has no parameters".into()));
        }
        Ok(Self {
            tensors,
            total: next,
        })
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Name of the tensor containing flat index `i`.
    pub fn tensor_at(&self, i: usize) -> Option<&TensorSpec> {
        self.tensors
            .iter()
            .find(|t| (t.offset..t.offset + t.len()).contains(&i))
    }

    fn in_offset_order(&self) -> Vec<&TensorSpec> {
        let mut v: Vec<&TensorSpec> = self.tensors.iter().collect();
        v.sort_by_key(|t| t.offset);
        v
    }
}

fn check_block(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("group size must be >= 1".into()));
    }
    Ok(())
}

/// Pushes `indices` as consecutive groups of at most `k`.
fn push_chunked(indices: &[usize], k: usize, sizes: &mut Vec<usize>, order: &mut Vec<usize>) {
    for chunk in indices.chunks(k) {
        sizes.push(chunk.len());
        order.extend_from_slice(chunk);
    }
}

/// Consecutive groups of size `k`, the last one holding the remainder.
pub fn partition_chunk(d: usize, k: usize) -> Result<Partition> {
    check_block(k)?;
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    let mut sizes = vec![k; d / k];
    if d % k != 0 {
        sizes.push(d % k);
    }
    Partition::from_sizes(sizes)
}

/// Groups the weights sharing an input neuron (a column of an `(out, in)`
/// matrix), each column chunked to at most `max_block`. 1-D tensors are
/// chunked directly.
pub fn partition_input_neuron(layout: &TensorLayout, max_block: usize) -> Result<Partition> {
    check_block(max_block)?;
    let mut sizes = Vec::new();
    let mut order = Vec::with_capacity(layout.total());
    for t in layout.in_offset_order() {
        match t.shape.len() {
            0 | 1 => {
                let idx: Vec<usize> = (t.offset..t.offset + t.len()).collect();
                push_chunked(&idx, max_block, &mut sizes, &mut order);
            }
            2 => {
                let (rows, cols) = (t.shape[0], t.shape[1]);
                for c in 0..cols {
                    let idx: Vec<usize> = (0..rows).map(|r| t.offset + r * cols + c).collect();
                    push_chunked(&idx, max_block, &mut sizes, &mut order);
                }
            }
            rank => {
                return Err(Error::UnsupportedRank {
                    name: t.name.clone(),
                    rank,
                })
            }
        }
    }
    Partition::with_order(sizes, Some(order))
}

/// One group per leading-axis slice (a filter, or an output unit's weights),
/// chunked to at most `max_block`. 1-D tensors are chunked directly.
pub fn partition_leading_axis(layout: &TensorLayout, max_block: usize) -> Result<Partition> {
    check_block(max_block)?;
    let mut sizes = Vec::new();
    let mut order = Vec::with_capacity(layout.total());
    for t in layout.in_offset_order() {
        let idx: Vec<usize> = (t.offset..t.offset + t.len()).collect();
        if t.shape.len() <= 1 {
            push_chunked(&idx, max_block, &mut sizes, &mut order);
        } else {
            let slice = t.len() / t.shape[0];
            for s in idx.chunks(slice) {
                push_chunked(s, max_block, &mut sizes, &mut order);
            }
        }
    }
    Partition::with_order(sizes, Some(order))
}

/// Grouping strategy as selected in a run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Elementwise adaptation (the diagonal reference optimizer).
    Diag,
    Chunk(usize),
    InputNeuron(usize),
    LeadingAxis(usize),
    /// One block covering every coordinate.
    Full,
}

impl Strategy {
    pub fn build(&self, layout: &TensorLayout) -> Result<Partition> {
        let d = layout.total();
        match *self {
            Strategy::Diag => partition_chunk(d, 1),
            Strategy::Chunk(k) => partition_chunk(d, k),
            Strategy::InputNeuron(k) => partition_input_neuron(layout, k),
            Strategy::LeadingAxis(k) => partition_leading_axis(layout, k),
            Strategy::Full => partition_chunk(d, d),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Diag => write!(f, "diag"),
            Strategy::Chunk(k) => write!(f, "chunk({k})"),
            Strategy::InputNeuron(k) => write!(f, "input_neuron({k})"),
            Strategy::LeadingAxis(k) => write!(f, "leading_axis({k})"),
            Strategy::Full => write!(f, "full"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(shape: Vec<usize>) -> TensorLayout {
        TensorLayout::packed([("w", shape)]).unwrap()
    }

    #[test]
    fn chunk_sizes() {
        assert_eq!(partition_chunk(6, 2).unwrap().sizes(), &[2, 2, 2]);
        assert_eq!(partition_chunk(7, 3).unwrap().sizes(), &[3, 3, 1]);
        assert!(partition_chunk(0, 3).is_err());
        assert!(partition_chunk(5, 0).is_err());
        assert_eq!(partition_chunk(9, 1).unwrap().num_groups(), 9);
        assert_eq!(partition_chunk(9, 9).unwrap().num_groups(), 1);
    }

    #[test]
    fn explicit_partition_and_gather() {
        let p = Partition::from_sizes(vec![2, 3, 1]).unwrap();
        assert_eq!(p.total(), 6);
        assert_eq!(p.offsets(), &[0, 2, 5, 6]);
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(gather_block(&g, &p, 0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(gather_block(&g, &p, 1).unwrap(), vec![3.0, 4.0, 5.0]);
        assert_eq!(gather_block(&g, &p, 2).unwrap(), vec![6.0]);
        assert!(matches!(
            gather_block(&g, &p, 3),
            Err(Error::OutOfRange { .. })
        ));
        assert!(gather_block(&g[..5], &p, 0).is_err());
        assert!(Partition::from_sizes(vec![2, 0]).is_err());
    }

    #[test]
    fn input_neuron_groups_columns() {
        let layout = single(vec![3, 2]);
        let p = partition_input_neuron(&layout, 3).unwrap();
        assert_eq!(p.sizes(), &[3, 3]);
        // column 0 of a row-major 3x2 matrix
        let g = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(gather_block(&g, &p, 0).unwrap(), vec![0.0, 2.0, 4.0]);
        assert_eq!(gather_block(&g, &p, 1).unwrap(), vec![1.0, 3.0, 5.0]);

        let p = partition_input_neuron(&layout, 2).unwrap();
        assert_eq!(p.sizes(), &[2, 1, 2, 1]);

        let bias = single(vec![5]);
        assert_eq!(partition_input_neuron(&bias, 10).unwrap().sizes(), &[5]);

        let conv = single(vec![2, 3, 3]);
        assert!(matches!(
            partition_input_neuron(&conv, 4),
            Err(Error::UnsupportedRank { rank: 3, .. })
        ));
    }

    #[test]
    fn leading_axis_slices() {
        assert_eq!(
            partition_leading_axis(&single(vec![4, 3]), 8)
                .unwrap()
                .sizes(),
            &[3, 3, 3, 3]
        );
        assert_eq!(
            partition_leading_axis(&single(vec![2, 3, 3]), 9)
                .unwrap()
                .sizes(),
            &[9, 9]
        );
        assert_eq!(
            partition_leading_axis(&single(vec![2, 5]), 3)
                .unwrap()
                .sizes(),
            &[3, 2, 3, 2]
        );
        assert!(partition_leading_axis(&single(vec![2, 5]), 3)
            .unwrap()
            .order()
            .is_none());
    }

    #[test]
    fn groups_never_span_tensors() {
        let layout = TensorLayout::packed([
            ("w0", vec![3, 4]),
            ("b0", vec![3]),
            ("w1", vec![2, 3]),
            ("b1", vec![2]),
        ])
        .unwrap();
        for p in [
            partition_input_neuron(&layout, 2).unwrap(),
            partition_leading_axis(&layout, 2).unwrap(),
        ] {
            let order: Vec<usize> = p
                .order()
                .map(|o| o.to_vec())
                .unwrap_or_else(|| (0..p.total()).collect());
            for j in 0..p.num_groups() {
                let names: Vec<&str> = order[p.range(j)]
                    .iter()
                    .map(|&i| layout.tensor_at(i).unwrap().name.as_str())
                    .collect();
                assert!(
                    names.windows(2).all(|w| w[0] == w[1]),
                    "group {j} spans {names:?}"
                );
            }
        }
    }

    #[test]
    fn layout_validation() {
        let bad = TensorLayout::new(vec![
            TensorSpec {
                name: "a".into(),
                shape: vec![2],
                offset: 0,
            },
            TensorSpec {
                name: "b".into(),
                shape: vec![2],
                offset: 1,
            },
        ]);
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn concatenated_blocks_reproduce_gradient(
            shapes in prop::collection::vec((1usize..5, 1usize..5), 1..4),
            k in 1usize..7,
            strategy in 0usize..3,
        ) {
            let layout = TensorLayout::packed(
                shapes.iter().enumerate().map(|(i, &(a, b))| (format!("t{i}"), vec![a, b])),
            ).unwrap();
            let d = layout.total();
            let p = match strategy {
                0 => partition_chunk(d, k).unwrap(),
                1 => partition_input_neuron(&layout, k).unwrap(),
                _ => partition_leading_axis(&layout, k).unwrap(),
            };
            prop_assert_eq!(p.total(), d);
            prop_assert!(p.sizes().iter().all(|&n| n >= 1 && n <= k));
            let g: Vec<f64> = (0..d).map(|i| i as f64 * 1.5 - 3.0).collect();
            let mut cat = Vec::new();
            for j in 0..p.num_groups() {
                cat.extend(gather_block(&g, &p, j).unwrap());
            }
            prop_assert_eq!(&cat, &p.gather(&g));
            prop_assert_eq!(p.scatter(&cat), g);
        }
    }
}
