//! Dense row-major tensors and the forward kernels shared by the tape and
//! by inference paths.
//!
//! Reductions that fold neighbor rows together (`mean_rows`, `max_rows`,
//! softmax denominators, weighted row sums) accumulate in a value-canonical
//! order so that permuting the input rows yields bitwise-identical results.
//! Plain dot products and matrix multiplies accumulate in index order.

use crate::error::{CdsmError, Result};
use serde::{Deserialize, Serialize};

/// Dense 64-bit tensor. Rank 0 (scalar), 1 (vector) and 2 (matrix) are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CdsmError::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar value; panics if the tensor is not rank 0 or a single element.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sum in a value-canonical order: sort by total order, then fold.
/// Any permutation of `values` produces a bitwise-identical result.
pub fn canonical_sum(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

fn expect_rank(t: &Tensor, rank: usize, op: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(CdsmError::dim(
            op,
            format!("expected rank {}, got shape {:?}", rank, t.shape),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared forward kernels
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(CdsmError::dim(
            "add",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(CdsmError::dim(
            "sub",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x * c).collect(),
    }
}

/// Matrix product `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(CdsmError::dim(
            "matmul",
            format!("inner dims {} vs {}", k, k2),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b.data[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a (m×k) · bᵀ (k×n from b: n×k)`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul_nt")?;
    expect_rank(b, 2, "matmul_nt")?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(CdsmError::dim(
            "matmul_nt",
            format!("inner dims {} vs {}", k, k2),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ (k×m from a: m×k) · b (m×n)`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul_tn")?;
    expect_rank(b, 2, "matmul_tn")?;
    let (m, k) = (a.rows(), a.cols());
    let (m2, n) = (b.rows(), b.cols());
    if m != m2 {
        return Err(CdsmError::dim(
            "matmul_tn",
            format!("inner dims {} vs {}", m, m2),
        ));
    }
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(k, n, out)
}

/// Outer product `u (m) ⊗ v (n)` → m×n.
pub fn outer(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    expect_rank(u, 1, "outer")?;
    expect_rank(v, 1, "outer")?;
    let (m, n) = (u.len(), v.len());
    let mut out = Vec::with_capacity(m * n);
    for &a in &u.data {
        out.extend(v.data.iter().map(|&b| a * b));
    }
    Tensor::matrix(m, n, out)
}

/// `w (m×n) · x (n) + b (m)`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(x, 1, "affine")?;
    expect_rank(w, 2, "affine")?;
    expect_rank(b, 1, "affine")?;
    let (m, n) = (w.rows(), w.cols());
    if n != x.len() || m != b.len() {
        return Err(CdsmError::dim(
            "affine",
            format!("w {:?}, x {:?}, b {:?}", w.shape, x.shape, b.shape),
        ));
    }
    let data = (0..m)
        .map(|i| {
            let dot: f64 = w.row(i).iter().zip(&x.data).map(|(a, b)| a * b).sum();
            dot + b.data[i]
        })
        .collect();
    Ok(Tensor::vector(data))
}

/// `m (r×c) · v (c)`.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    expect_rank(m, 2, "matvec")?;
    expect_rank(v, 1, "matvec")?;
    if m.cols() != v.len() {
        return Err(CdsmError::dim(
            "matvec",
            format!("{:?} vs {:?}", m.shape, v.shape),
        ));
    }
    let data = (0..m.rows())
        .map(|i| m.row(i).iter().zip(&v.data).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::vector(data))
}

/// Weighted sum of rows: `vᵀ (r) · m (r×c)` with canonical accumulation, so a
/// consistent permutation of (weights, rows) gives a bitwise-identical vector.
pub fn vecmat(v: &Tensor, m: &Tensor) -> Result<Tensor> {
    expect_rank(v, 1, "vecmat")?;
    expect_rank(m, 2, "vecmat")?;
    if v.len() != m.rows() {
        return Err(CdsmError::dim(
            "vecmat",
            format!("{:?} vs {:?}", v.shape, m.shape),
        ));
    }
    let c = m.cols();
    let mut out = vec![0.0; c];
    let mut terms = Vec::with_capacity(m.rows());
    for (j, o) in out.iter_mut().enumerate() {
        terms.clear();
        for (i, &w) in v.data.iter().enumerate() {
            terms.push(w * m.data[i * c + j]);
        }
        *o = canonical_sum(&mut terms);
    }
    Ok(Tensor::vector(out))
}

/// 1-d convolution over rows with zero padding, output length preserved.
/// `x` is seq×d_in, `f` maps the flattened window (window·d_in) to d_out.
pub fn conv1d_same(x: &Tensor, f: &Tensor, b: &Tensor, window: usize) -> Result<Tensor> {
    expect_rank(x, 2, "conv1d_same")?;
    expect_rank(f, 2, "conv1d_same")?;
    expect_rank(b, 1, "conv1d_same")?;
    if window % 2 == 0 || window == 0 {
        return Err(CdsmError::dim("conv1d_same", "window must be odd"));
    }
    let (s, d_in) = (x.rows(), x.cols());
    let d_out = f.rows();
    if f.cols() != window * d_in || b.len() != d_out {
        return Err(CdsmError::dim(
            "conv1d_same",
            format!(
                "filter {:?} incompatible with window {} × d_in {}",
                f.shape, window, d_in
            ),
        ));
    }
    let half = window / 2;
    let mut out = vec![0.0; s * d_out];
    for i in 0..s {
        for o in 0..d_out {
            let frow = f.row(o);
            let mut acc = b.data[o];
            for w in 0..window {
                let pos = i as isize + w as isize - half as isize;
                if pos < 0 || pos >= s as isize {
                    continue;
                }
                let xrow = x.row(pos as usize);
                let fseg = &frow[w * d_in..(w + 1) * d_in];
                acc += xrow.iter().zip(fseg).map(|(a, b)| a * b).sum::<f64>();
            }
            out[i * d_out + o] = acc;
        }
    }
    Tensor::matrix(s, d_out, out)
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
    }
}

pub fn tanh(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x.tanh()).collect(),
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
    }
}

/// log(1 + e^x), computed in the stable branch form.
pub fn softplus(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            })
            .collect(),
    }
}

/// Softmax over a vector with max-subtraction. The normalizer accumulates
/// canonically, so permuting the entries permutes the outputs exactly.
pub fn softmax_vec(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 1, "softmax")?;
    if a.is_empty() {
        return Err(CdsmError::dim("softmax", "empty input"));
    }
    let max = a.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.data.iter().map(|x| (x - max).exp()).collect();
    let mut terms = exps.clone();
    let z = canonical_sum(&mut terms);
    Ok(Tensor::vector(exps.iter().map(|e| e / z).collect()))
}

/// Row-wise softmax of a matrix (index-order accumulation; used where row
/// order is fixed, e.g. token positions).
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "softmax_rows")?;
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = a.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut z = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Index-order dot product (bitwise reproducible for a fixed argument order).
pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape || a.rank() != 1 {
        return Err(CdsmError::dim(
            "dot",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    Ok(Tensor::scalar(
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum(),
    ))
}

/// Column means over rows, canonical accumulation (row-permutation exact).
pub fn mean_rows(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "mean_pool")?;
    let (r, c) = (a.rows(), a.cols());
    if r == 0 {
        return Err(CdsmError::dim("mean_pool", "no rows"));
    }
    let mut out = vec![0.0; c];
    let mut terms = Vec::with_capacity(r);
    for (j, o) in out.iter_mut().enumerate() {
        terms.clear();
        for i in 0..r {
            terms.push(a.data[i * c + j]);
        }
        *o = canonical_sum(&mut terms) / r as f64;
    }
    Ok(Tensor::vector(out))
}

/// Column max over rows (exact under row permutation).
pub fn max_rows(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "max_pool_rows")?;
    let (r, c) = (a.rows(), a.cols());
    if r == 0 {
        return Err(CdsmError::dim("max_pool_rows", "no rows"));
    }
    let mut out = vec![f64::NEG_INFINITY; c];
    for i in 0..r {
        for (o, &x) in out.iter_mut().zip(a.row(i)) {
            if x > *o {
                *o = x;
            }
        }
    }
    Ok(Tensor::vector(out))
}

pub fn concat_vec(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 1, "concat")?;
    expect_rank(b, 1, "concat")?;
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Ok(Tensor::vector(data))
}

/// Stack equal-length vectors as matrix rows.
pub fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(CdsmError::dim("stack_rows", "no rows"));
    }
    let c = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * c);
    for r in rows {
        if r.rank() != 1 || r.len() != c {
            return Err(CdsmError::dim(
                "stack_rows",
                format!("expected vectors of length {}, got {:?}", c, r.shape),
            ));
        }
        data.extend_from_slice(&r.data);
    }
    Tensor::matrix(rows.len(), c, data)
}

/// Gather rows of `table` at `indices` (embedding lookup).
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    expect_rank(table, 2, "gather_rows")?;
    let c = table.cols();
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        if i >= table.rows() {
            return Err(CdsmError::Lookup(format!(
                "row index {} out of table with {} rows",
                i,
                table.rows()
            )));
        }
        data.extend_from_slice(table.row(i));
    }
    Tensor::matrix(indices.len(), c, data)
}

/// Per-row layer normalization with learned gain and bias.
pub fn layer_norm_rows(a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    expect_rank(a, 2, "layer_norm")?;
    let (r, c) = (a.rows(), a.cols());
    if gain.len() != c || bias.len() != c {
        return Err(CdsmError::dim(
            "layer_norm",
            format!("gain/bias length must be {}", c),
        ));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = a.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let orow = &mut out[i * c..(i + 1) * c];
        for (j, (o, &x)) in orow.iter_mut().zip(row).enumerate() {
            *o = (x - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    Tensor::matrix(r, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_manual_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = matmul_nt(&a, &b).unwrap();
        assert_eq!(c.data, vec![4.0, 2.0, 10.0, 5.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let s = softmax_vec(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data, vec![0.5, 0.5]);
    }

    #[test]
    fn conv_identity_filter_preserves_input() {
        // window 3, d=2: center block is the identity, rest zero.
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut f = vec![0.0; 2 * 6];
        f[2] = 1.0; // out 0 <- center dim 0
        f[6 + 3] = 1.0; // out 1 <- center dim 1
        let f = Tensor::matrix(2, 6, f).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        let y = conv1d_same(&x, &f, &b, 3).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn max_rows_elementwise() {
        let m = Tensor::matrix(2, 2, vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        assert_eq!(max_rows(&m).unwrap().data, vec![3.0, 4.0]);
    }

    #[test]
    fn mean_rows_permutation_exact() {
        let vals = vec![0.1, 0.7, -0.3, 0.9, 0.2, -0.5];
        let a = Tensor::matrix(3, 2, vals.clone()).unwrap();
        let b = Tensor::matrix(3, 2, vec![vals[4], vals[5], vals[0], vals[1], vals[2], vals[3]])
            .unwrap();
        assert_eq!(mean_rows(&a).unwrap().data, mean_rows(&b).unwrap().data);
    }

    #[test]
    fn shape_mismatch_reports_op() {
        let a = Tensor::vector(vec![1.0]);
        let b = Tensor::vector(vec![1.0, 2.0]);
        let err = dot(&a, &b).unwrap_err();
        assert!(err.to_string().contains("dot"));
    }
}
