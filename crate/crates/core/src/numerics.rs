//! Dense f32 kernels used by the toy decoder.
//!
//! Every reduction runs sequentially in ascending index order. Nodes of the
//! cluster recompute the same quantities independently, so results must be
//! bit-for-bit reproducible regardless of which node (or thread) runs them.

use std::ops::Index;

use crate::error::{Error, Result};

/// A dense f32 vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f32>,
}

impl Vector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::dim("vector must have at least one entry"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite entry at index {i}")));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len.max(1)],
        }
    }

    pub(crate) fn from_raw(data: Vec<f32>) -> Self {
        debug_assert!(!data.is_empty());
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "cannot add vectors of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Vector { data })
    }

    pub fn scale(&self, factor: f32) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn dot(&self, other: &Vector) -> Result<f32> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "cannot dot vectors of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        let mut acc = 0.0f32;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    /// Index of the largest entry; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// FNV-1a over the little-endian bit patterns of the entries.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }
}

impl Index<usize> for Vector {
    type Output = f32;

    fn index(&self, i: usize) -> &f32 {
        &self.data[i]
    }
}

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("matrix shape {rows}x{cols} has a zero side")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    /// Row `i` as a vector (embedding lookup).
    pub fn row_vector(&self, i: usize) -> Result<Vector> {
        if i >= self.rows {
            return Err(Error::invalid(format!("row {i} out of range for {} rows", self.rows)));
        }
        Ok(Vector::from_raw(self.row(i).to_vec()))
    }
}

/// `out[j] = sum_i x[i] * w[i, j]`, accumulated in ascending `i`.
pub fn matvec(x: &Vector, w: &Matrix) -> Result<Vector> {
    if x.len() != w.rows {
        return Err(Error::dim(format!(
            "matvec: vector of length {} against {}x{} matrix",
            x.len(),
            w.rows,
            w.cols
        )));
    }
    let mut out = vec![0.0f32; w.cols];
    for (i, xi) in x.data.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    Ok(Vector::from_raw(out))
}

pub fn silu(x: &Vector) -> Vector {
    Vector::from_raw(x.data.iter().map(|&v| v / (1.0 + (-v).exp())).collect())
}

pub fn softmax(x: &Vector) -> Vector {
    Vector::from_raw(softmax_slice(&x.data))
}

fn softmax_slice(x: &[f32]) -> Vec<f32> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = x.iter().map(|v| (v - max).exp()).collect();
    let mut sum = 0.0f32;
    for e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "elementwise product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(Vector::from_raw(
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    ))
}

/// Top-k selection over router logits.
///
/// Returns the selected indices in ascending order together with gates that
/// are the softmax of the selected logits (renormalized over the selection).
/// Ties are broken towards the lower index.
pub fn top_k(logits: &Vector, k: usize) -> Result<(Vec<usize>, Vector)> {
    if k == 0 || k > logits.len() {
        return Err(Error::invalid(format!(
            "top_k: k={k} must lie in 1..={}",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits.data[b]
            .partial_cmp(&logits.data[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    let selected: Vec<f32> = chosen.iter().map(|&i| logits.data[i]).collect();
    Ok((chosen, Vector::from_raw(softmax_slice(&selected))))
}

/// Sequential sum of equally sized vectors in the given order, starting from
/// the first element (no implicit zero).
pub fn sum_in_order<'a, I>(parts: I) -> Result<Option<Vector>>
where
    I: IntoIterator<Item = &'a Vector>,
{
    let mut iter = parts.into_iter();
    let Some(first) = iter.next() else {
        return Ok(None);
    };
    let mut acc = first.clone();
    for part in iter {
        if part.len() != acc.len() {
            return Err(Error::dim(format!(
                "sum of vectors with lengths {} and {}",
                acc.len(),
                part.len()
            )));
        }
        for (a, b) in acc.data.iter_mut().zip(&part.data) {
            *a += b;
        }
    }
    Ok(Some(acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f32]) -> Vector {
        Vector::new(data.to_vec()).unwrap()
    }

    #[test]
    fn matvec_identity_and_ones() {
        assert_eq!(matvec(&v(&[1.0, 0.0]), &Matrix::identity(2)).unwrap(), v(&[1.0, 0.0]));
        let ones = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(matvec(&v(&[1.0, 2.0]), &ones).unwrap(), v(&[3.0, 3.0]));
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let w = Matrix::new(3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(matvec(&v(&[1.0, 2.0]), &w), Err(Error::Dimension(_))));
    }

    #[test]
    fn top_k_examples() {
        let (idx, gates) = top_k(&v(&[0.0, 0.0, 0.0, 10.0]), 1).unwrap();
        assert_eq!(idx, vec![3]);
        assert_eq!(gates.as_slice(), &[1.0]);

        let (idx, gates) = top_k(&v(&[1.0, 1.0, 1.0, 1.0]), 2).unwrap();
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(gates.as_slice(), &[0.5, 0.5]);

        // softmax([3, 2]) = [e/(e+1), 1/(e+1)]
        let (idx, gates) = top_k(&v(&[3.0, 1.0, 2.0, 0.0]), 2).unwrap();
        assert_eq!(idx, vec![0, 2]);
        let e = std::f64::consts::E;
        assert!((f64::from(gates[0]) - e / (e + 1.0)).abs() < 1e-6);
        assert!((f64::from(gates[1]) - 1.0 / (e + 1.0)).abs() < 1e-6);
        assert!((gates[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn top_k_bounds() {
        assert!(top_k(&v(&[1.0, 2.0]), 3).is_err());
        assert!(top_k(&v(&[1.0, 2.0]), 0).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(silu(&v(&[0.0])).as_slice(), &[0.0]);
        assert_eq!(softmax(&v(&[0.0, 0.0])).as_slice(), &[0.5, 0.5]);
        let s = softmax(&v(&[1.0, 2.0, 3.0]));
        let total: f64 = s.as_slice().iter().map(|&x| f64::from(x)).sum();
        assert!((total - 1.0).abs() < 1e-7);
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f32::NAN]).is_err());
        assert!(Vector::new(vec![]).is_err());
        assert!(Matrix::new(1, 2, vec![f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn sum_in_order_starts_from_first() {
        let neg_zero = v(&[-0.0]);
        let s = sum_in_order([&neg_zero]).unwrap().unwrap();
        assert!(s[0].is_sign_negative());
        assert!(sum_in_order(std::iter::empty()).unwrap().is_none());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(v(&[1.0, 3.0, 3.0]).argmax(), 1);
    }
}
