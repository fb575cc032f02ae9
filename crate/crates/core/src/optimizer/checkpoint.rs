//! Versioned binary checkpoint of an optimizer state.
//!
//! Layout (all integers `u64` little-endian, all reals `f64` little-endian):
//!
//! ```text
//! "BLKADAPT1"                  9-byte magic
//! variant code, t, d, r
//! n_1 .. n_r                   group sizes
//! has_order, [order_0 .. order_{d-1}]
//! m_0 .. m_{d-1}               first moment, grouped order
//! block 1 .. block r           row-major n_j x n_j accumulator entries
//! has_ams, [maxima, d reals]   AMSGrad eigenvalue maxima, block by block
//! extra_len, extra reals       caller payload (parameters, counters)
//! ```
//!
//! Cached eigendecompositions are not stored; they are recomputed on load,
//! which reproduces them bit for bit because the eigensolver is deterministic.

use std::io::{Read, Write};

use super::{BlockOptimizer, Design, OptimizerState, Variant};
use crate::grouping::Partition;
use crate::linalg::SymMatrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 9] = b"BLKADAPT1";

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| {
        Error::Checkpoint(format!("truncated while reading {what} ({n} reals): {e}"))
    })?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_checkpoint(w: &mut impl Write, opt: &BlockOptimizer, extra: &[f64]) -> Result<()> {
    let st = opt.state();
    let p = opt.partition();
    w.write_all(MAGIC)?;
    put_u64(w, opt.design().variant.code())?;
    put_u64(w, st.t)?;
    put_u64(w, p.total() as u64)?;
    put_u64(w, p.num_groups() as u64)?;
    for &n in p.sizes() {
        put_u64(w, n as u64)?;
    }
    match p.order() {
        None => put_u64(w, 0)?,
        Some(order) => {
            put_u64(w, 1)?;
            for &i in order {
                put_u64(w, i as u64)?;
            }
        }
    }
    put_f64s(w, &st.m)?;
    for b in st.v.blocks() {
        put_f64s(w, b.as_slice())?;
    }
    match &st.ams_eigmax {
        None => put_u64(w, 0)?,
        Some(mx) => {
            put_u64(w, 1)?;
            for m in mx {
                put_f64s(w, m)?;
            }
        }
    }
    put_u64(w, extra.len() as u64)?;
    put_f64s(w, extra)?;
    Ok(())
}

/// Reads a checkpoint written for the same design variant and partition.
/// Returns the state and the extra payload.
pub fn read_checkpoint(
    r: &mut impl Read,
    design: &Design,
    partition: &Partition,
) -> Result<(OptimizerState, Vec<f64>)> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let code = get_u64(r, "variant")?;
    let variant = Variant::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown variant code {code}")))?;
    if variant != design.variant {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {variant} state but the run uses {}",
            design.variant
        )));
    }
    let t = get_u64(r, "step counter")?;
    let d = get_u64(r, "dimension")? as usize;
    let groups = get_u64(r, "group count")? as usize;
    if d != partition.total() || groups != partition.num_groups() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has d={d}, r={groups}; run has d={}, r={}",
            partition.total(),
            partition.num_groups()
        )));
    }
    for (j, &n) in partition.sizes().iter().enumerate() {
        let stored = get_u64(r, "group size")? as usize;
        if stored != n {
            return Err(Error::Checkpoint(format!(
                "group {j} has size {stored}, run expects {n}"
            )));
        }
    }
    let order = match get_u64(r, "order flag")? {
        0 => None,
        1 => Some(
            (0..d)
                .map(|_| get_u64(r, "ordering").map(|i| i as usize))
                .collect::<Result<Vec<_>>>()?,
        ),
        f => return Err(Error::Checkpoint(format!("invalid order flag {f}"))),
    };
    if order.as_deref() != partition.order() {
        return Err(Error::Checkpoint(
            "coordinate ordering differs from the run's partition".into(),
        ));
    }

    let mut st = OptimizerState::new(design, partition);
    st.t = t;
    st.m = get_f64s(r, d, "first moment")?;
    for (j, block) in st.v.blocks_mut().iter_mut().enumerate() {
        let n = block.dim();
        let entries = get_f64s(r, n * n, "accumulator block")?;
        *block = SymMatrix::from_row_major(n, &entries)?;
        if block.as_slice() != entries.as_slice() {
            return Err(Error::Checkpoint(format!(
                "accumulator block {j} is not symmetric"
            )));
        }
    }
    let has_ams = get_u64(r, "amsgrad flag")?;
    match (has_ams, st.ams_eigmax.as_mut()) {
        (0, None) => {}
        (1, Some(mx)) => {
            for m in mx.iter_mut() {
                *m = get_f64s(r, m.len(), "amsgrad maxima")?;
            }
        }
        (f, _) => {
            return Err(Error::Checkpoint(format!(
                "amsgrad flag {f} inconsistent with {variant}"
            )))
        }
    }
    let extra_len = get_u64(r, "payload length")? as usize;
    let extra = get_f64s(r, extra_len, "payload")?;
    st.refresh_spectra(design.variant)?;
    Ok((st, extra))
}
