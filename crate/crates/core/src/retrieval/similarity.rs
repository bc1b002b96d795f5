//! Descriptor similarity and circular-shift alignment.
//!
//! Shift convention: a shift `s` relates `a` and `b` as
//! `b ~= a.shift_columns(s)`, i.e. column `j` of `a` lines up with column
//! `(j + s) mod cols` of `b`. A sensor yawed by `+2*pi*s/cols` produces a
//! descriptor shifted by `s`.

use crate::descriptor::{AlignKey, Descriptor};
use crate::error::{NddError, Result};

fn check_shapes(a: &Descriptor, b: &Descriptor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NddError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Best circular shift between two alignment keys by cosine similarity.
///
/// Returns `(shift, score)`; ties go to the smallest shift. If either key is
/// all zeros the result is `(0, 0.0)`.
pub fn best_shift(a: &AlignKey, b: &AlignKey) -> Result<(usize, f64)> {
    let (va, vb) = (&a.0, &b.0);
    if va.len() != vb.len() {
        return Err(NddError::ShapeMismatch {
            left: (1, va.len()),
            right: (1, vb.len()),
        });
    }
    let n = va.len();
    let norm =
        (va.iter().map(|v| v * v).sum::<f64>() * vb.iter().map(|v| v * v).sum::<f64>()).sqrt();
    if n == 0 || norm == 0.0 {
        return Ok((0, 0.0));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for s in 0..n {
        let (head, tail) = vb.split_at(s);
        // va[j] pairs with vb[(j + s) % n]
        let dot: f64 = va
            .iter()
            .zip(tail.iter().chain(head))
            .map(|(x, y)| x * y)
            .sum();
        let score = dot / norm;
        if score > best.1 {
            best = (s, score);
        }
    }
    Ok(best)
}

struct Centered {
    values: Vec<f64>,
    sum_sq: f64,
}

fn centered(d: &Descriptor) -> Centered {
    let data = d.as_slice();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let values: Vec<f64> = data.iter().map(|v| v - mean).collect();
    let sum_sq = values.iter().map(|v| v * v).sum();
    Centered { values, sum_sq }
}

fn shifted_dot(a: &[f64], b: &[f64], cols: usize, shift: usize) -> f64 {
    let mut dot = 0.0;
    for (ra, rb) in a.chunks_exact(cols).zip(b.chunks_exact(cols)) {
        let (head, tail) = rb.split_at(shift);
        dot += ra
            .iter()
            .zip(tail.iter().chain(head))
            .map(|(x, y)| x * y)
            .sum::<f64>();
    }
    dot
}

/// Pearson correlation over all entries of two equally shaped matrices.
///
/// Fails with [`NddError::UndefinedCorrelation`] when either matrix is
/// constant.
pub fn correlation(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    correlation_at_shift(a, b, 0)
}

/// `correlation(a.shift_columns(shift), b)` without materializing the shift.
pub fn correlation_at_shift(a: &Descriptor, b: &Descriptor, shift: usize) -> Result<f64> {
    check_shapes(a, b)?;
    let (ca, cb) = (centered(a), centered(b));
    if ca.sum_sq == 0.0 || cb.sum_sq == 0.0 {
        return Err(NddError::UndefinedCorrelation);
    }
    let cols = a.cols();
    let r =
        shifted_dot(&ca.values, &cb.values, cols, shift % cols) / (ca.sum_sq * cb.sum_sq).sqrt();
    Ok(r.clamp(-1.0, 1.0))
}

/// Column-averaged cosine similarity. All-zero columns contribute 0 but are
/// still counted.
pub fn sc_cosine(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    sc_cosine_at_shift(a, b, 0)
}

/// `sc_cosine(a.shift_columns(shift), b)`.
pub fn sc_cosine_at_shift(a: &Descriptor, b: &Descriptor, shift: usize) -> Result<f64> {
    check_shapes(a, b)?;
    let (rows, cols) = a.shape();
    let shift = shift % cols;
    let mut total = 0.0;
    for j in 0..cols {
        let jb = (j + shift) % cols;
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in 0..rows {
            let x = a.get(i, j);
            let y = b.get(i, jb);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na > 0.0 && nb > 0.0 {
            total += dot / (na * nb).sqrt();
        }
    }
    Ok(total / cols as f64)
}

/// Exhaustive column-shift search maximizing correlation. Constant
/// descriptors score `(0, 0.0)`.
pub fn full_shift_alignment(a: &Descriptor, b: &Descriptor) -> Result<(usize, f64)> {
    check_shapes(a, b)?;
    let (ca, cb) = (centered(a), centered(b));
    if ca.sum_sq == 0.0 || cb.sum_sq == 0.0 {
        return Ok((0, 0.0));
    }
    let cols = a.cols();
    let norm = (ca.sum_sq * cb.sum_sq).sqrt();
    let mut best = (0, f64::NEG_INFINITY);
    for s in 0..cols {
        let r = (shifted_dot(&ca.values, &cb.values, cols, s) / norm).clamp(-1.0, 1.0);
        if r > best.1 {
            best = (s, r);
        }
    }
    Ok(best)
}

/// Occupancy bits of a descriptor, packed per column over rows.
struct BitColumns {
    words: usize,
    bits: Vec<u64>,
}

impl BitColumns {
    fn new(d: &Descriptor) -> Self {
        let (rows, cols) = d.shape();
        let words = rows.div_ceil(64).max(1);
        let mut bits = vec![0u64; words * cols];
        for i in 0..rows {
            for j in 0..cols {
                if d.get(i, j) != 0.0 {
                    bits[j * words + i / 64] |= 1 << (i % 64);
                }
            }
        }
        BitColumns { words, bits }
    }

    fn column(&self, j: usize) -> &[u64] {
        &self.bits[j * self.words..(j + 1) * self.words]
    }
}

/// Binarizes both descriptors (non-zero -> 1) and picks the shift with the
/// highest fraction of agreeing bits (XNOR mean).
pub fn binary_xnor_alignment(a: &Descriptor, b: &Descriptor) -> Result<(usize, f64)> {
    check_shapes(a, b)?;
    let (rows, cols) = a.shape();
    let (ba, bb) = (BitColumns::new(a), BitColumns::new(b));
    let total = (rows * cols) as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for s in 0..cols {
        let mut differ = 0u32;
        for j in 0..cols {
            differ += ba
                .column(j)
                .iter()
                .zip(bb.column((j + s) % cols))
                .map(|(x, y)| (x ^ y).count_ones())
                .sum::<u32>();
        }
        let score = (rows * cols - differ as usize) as f64 / total;
        if score > best.1 {
            best = (s, score);
        }
    }
    Ok(best)
}
