//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every op records its forward value on the tape; when gradients are
//! enabled it also records the parent indices and a VJP closure. Model code
//! is written once against [`Tape`] and runs in both modes: training uses
//! [`Tape::new`], inference uses [`Tape::inference`] which skips VJP
//! bookkeeping but computes identical forward values.

use std::cell::RefCell;

use crate::error::{CdsmError, Result};
use crate::numerics::tensor::{self, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// upstream grad, parent values, own value -> grads per parent.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Gradients indexed by [`Var`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of the given shape if the leaf is
    /// unreachable from the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Tape that records forward values only. `backward` on it is an error.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: BackwardFn) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        if self.grad_enabled {
            nodes.push(Node {
                value,
                parents,
                backward: Some(backward),
            });
        } else {
            nodes.push(Node {
                value,
                parents: Vec::new(),
                backward: None,
            });
        }
        Var(idx)
    }

    /// Insert a leaf (parameter or constant input).
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(idx)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    // -- ops ----------------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_value(a, |ta| self.with_value(b, |tb| tensor::add(ta, tb)))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_value(a, |ta| self.with_value(b, |tb| tensor::sub(ta, tb)))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![g.clone(), tensor::scale(g, -1.0)]),
        ))
    }

    /// Sum of same-shape vars.
    pub fn add_n(&self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(CdsmError::dim("add_n", "no inputs"));
        }
        let mut acc = self.value(vars[0]);
        for v in &vars[1..] {
            acc = self.with_value(*v, |t| tensor::add(&acc, t))?;
        }
        let n = vars.len();
        Ok(self.push(
            acc,
            vars.iter().map(|v| v.0).collect(),
            Box::new(move |g, _, _| (0..n).map(|_| g.clone()).collect()),
        ))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.with_value(a, |t| tensor::scale(t, c));
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, _, _| vec![tensor::scale(g, c)]),
        )
    }

    /// Add a vector to every row of a matrix (bias broadcast).
    pub fn add_row_broadcast(&self, m: Var, v: Var) -> Result<Var> {
        let out = self.with_value(m, |tm| {
            self.with_value(v, |tv| {
                if tm.rank() != 2 || tv.rank() != 1 || tm.cols() != tv.len() {
                    return Err(CdsmError::dim(
                        "add_row_broadcast",
                        format!("{:?} vs {:?}", tm.shape, tv.shape),
                    ));
                }
                let c = tm.cols();
                let data = tm
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + tv.data[i % c])
                    .collect();
                Ok(Tensor {
                    shape: tm.shape.clone(),
                    data,
                })
            })
        })?;
        Ok(self.push(
            out,
            vec![m.0, v.0],
            Box::new(|g, _, _| {
                let c = g.cols();
                let mut dv = vec![0.0; c];
                for i in 0..g.rows() {
                    for (acc, &x) in dv.iter_mut().zip(g.row(i)) {
                        *acc += x;
                    }
                }
                vec![g.clone(), Tensor::vector(dv)]
            }),
        ))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_value(a, |ta| self.with_value(b, |tb| tensor::matmul(ta, tb)))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                let da = tensor::matmul_nt(g, p[1]).expect("matmul backward");
                let db = tensor::matmul_tn(p[0], g).expect("matmul backward");
                vec![da, db]
            }),
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_value(a, |ta| self.with_value(b, |tb| tensor::matmul_nt(ta, tb)))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                let da = tensor::matmul(g, p[1]).expect("matmul_nt backward");
                let db = tensor::matmul_tn(g, p[0]).expect("matmul_nt backward");
                vec![da, db]
            }),
        ))
    }

    /// `w·x + b` for vector `x`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = self.with_value(x, |tx| {
            self.with_value(w, |tw| self.with_value(b, |tb| tensor::affine(tx, tw, tb)))
        })?;
        Ok(self.push(
            v,
            vec![x.0, w.0, b.0],
            Box::new(|g, p, _| {
                let dx = tensor::vecmat(g, p[1]).expect("affine backward");
                let dw = tensor::outer(g, p[0]).expect("affine backward");
                vec![dx, dw, g.clone()]
            }),
        ))
    }

    /// `m·v`.
    pub fn matvec(&self, m: Var, v: Var) -> Result<Var> {
        let out = self.with_value(m, |tm| self.with_value(v, |tv| tensor::matvec(tm, tv)))?;
        Ok(self.push(
            out,
            vec![m.0, v.0],
            Box::new(|g, p, _| {
                let dm = tensor::outer(g, p[1]).expect("matvec backward");
                let dv = tensor::vecmat(g, p[0]).expect("matvec backward");
                vec![dm, dv]
            }),
        ))
    }

    /// Weighted sum of matrix rows: `vᵀ·m`.
    pub fn vecmat(&self, v: Var, m: Var) -> Result<Var> {
        let out = self.with_value(v, |tv| self.with_value(m, |tm| tensor::vecmat(tv, tm)))?;
        Ok(self.push(
            out,
            vec![v.0, m.0],
            Box::new(|g, p, _| {
                let dv = tensor::matvec(p[1], g).expect("vecmat backward");
                let dm = tensor::outer(p[0], g).expect("vecmat backward");
                vec![dv, dm]
            }),
        ))
    }

    pub fn conv1d_same(&self, x: Var, f: Var, b: Var, window: usize) -> Result<Var> {
        let v = self.with_value(x, |tx| {
            self.with_value(f, |tf| {
                self.with_value(b, |tb| tensor::conv1d_same(tx, tf, tb, window))
            })
        })?;
        Ok(self.push(
            v,
            vec![x.0, f.0, b.0],
            Box::new(move |g, p, _| {
                let (x, f) = (p[0], p[1]);
                let (s, d_in) = (x.rows(), x.cols());
                let d_out = f.rows();
                let half = window / 2;
                let mut dx = vec![0.0; s * d_in];
                let mut df = vec![0.0; d_out * window * d_in];
                let mut db = vec![0.0; d_out];
                for i in 0..s {
                    for o in 0..d_out {
                        let go = g.data[i * d_out + o];
                        db[o] += go;
                        for w in 0..window {
                            let pos = i as isize + w as isize - half as isize;
                            if pos < 0 || pos >= s as isize {
                                continue;
                            }
                            let pos = pos as usize;
                            for j in 0..d_in {
                                df[o * window * d_in + w * d_in + j] +=
                                    go * x.data[pos * d_in + j];
                                dx[pos * d_in + j] +=
                                    go * f.data[o * window * d_in + w * d_in + j];
                            }
                        }
                    }
                }
                vec![
                    Tensor::matrix(s, d_in, dx).unwrap(),
                    Tensor::matrix(d_out, window * d_in, df).unwrap(),
                    Tensor::vector(db),
                ]
            }),
        ))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with_value(a, tensor::relu);
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| {
                // subgradient 0 at exactly 0
                let data = g
                    .data
                    .iter()
                    .zip(&p[0].data)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Tensor {
                    shape: g.shape.clone(),
                    data,
                }]
            }),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.with_value(a, tensor::tanh);
        self.push(
            v,
            vec![a.0],
            Box::new(|g, _, y| {
                let data = g
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(&g, &y)| g * (1.0 - y * y))
                    .collect();
                vec![Tensor {
                    shape: g.shape.clone(),
                    data,
                }]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.with_value(a, tensor::sigmoid);
        self.push(
            v,
            vec![a.0],
            Box::new(|g, _, y| {
                let data = g
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(&g, &y)| g * y * (1.0 - y))
                    .collect();
                vec![Tensor {
                    shape: g.shape.clone(),
                    data,
                }]
            }),
        )
    }

    pub fn softplus(&self, a: Var) -> Var {
        let v = self.with_value(a, tensor::softplus);
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| {
                let sig = tensor::sigmoid(p[0]);
                let data = g.data.iter().zip(&sig.data).map(|(&g, &s)| g * s).collect();
                vec![Tensor {
                    shape: g.shape.clone(),
                    data,
                }]
            }),
        )
    }

    pub fn softmax_vec(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, tensor::softmax_vec)?;
        Ok(self.push(
            v,
            vec![a.0],
            Box::new(|g, _, y| {
                let gy: f64 = g.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
                let data = y
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&y, &g)| y * (g - gy))
                    .collect();
                vec![Tensor {
                    shape: g.shape.clone(),
                    data,
                }]
            }),
        ))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, tensor::softmax_rows)?;
        Ok(self.push(
            v,
            vec![a.0],
            Box::new(|g, _, y| {
                let (r, c) = (y.rows(), y.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        data[i * c + j] = yr[j] * (gr[j] - gy);
                    }
                }
                vec![Tensor::matrix(r, c, data).unwrap()]
            }),
        ))
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_value(a, |ta| self.with_value(b, |tb| tensor::dot(ta, tb)))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                let s = g.item();
                vec![tensor::scale(p[1], s), tensor::scale(p[0], s)]
            }),
        ))
    }

    pub fn mean_pool(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, tensor::mean_rows)?;
        Ok(self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| {
                let (r, c) = (p[0].rows(), p[0].cols());
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend(g.data.iter().map(|x| x / r as f64));
                }
                vec![Tensor::matrix(r, c, data).unwrap()]
            }),
        ))
    }

    pub fn max_pool_rows(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, tensor::max_rows)?;
        Ok(self.push(
            v,
            vec![a.0],
            Box::new(|g, p, y| {
                // route each column's gradient to the first row attaining the max
                let (r, c) = (p[0].rows(), p[0].cols());
                let mut data = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        if p[0].data[i * c + j] == y.data[j] {
                            data[i * c + j] = g.data[j];
                            break;
                        }
                    }
                }
                vec![Tensor::matrix(r, c, data).unwrap()]
            }),
        ))
    }

    /// Elementwise max over a set of equal-length vectors.
    pub fn max_pool_elementwise(&self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(CdsmError::dim("max_pool_elementwise", "no inputs"));
        }
        let first = self.value(vars[0]);
        if first.rank() != 1 {
            return Err(CdsmError::dim("max_pool_elementwise", "vectors only"));
        }
        let n = first.len();
        let mut out = first.data;
        for v in &vars[1..] {
            self.with_value(*v, |t| -> Result<()> {
                if t.rank() != 1 || t.len() != n {
                    return Err(CdsmError::dim(
                        "max_pool_elementwise",
                        format!("expected length {}, got {:?}", n, t.shape),
                    ));
                }
                for (o, &x) in out.iter_mut().zip(&t.data) {
                    if x > *o {
                        *o = x;
                    }
                }
                Ok(())
            })?;
        }
        let k = vars.len();
        Ok(self.push(
            Tensor::vector(out),
            vars.iter().map(|v| v.0).collect(),
            Box::new(move |g, p, y| {
                let mut grads: Vec<Tensor> =
                    (0..k).map(|i| Tensor::zeros_like(p[i])).collect();
                for j in 0..y.len() {
                    for (i, pv) in p.iter().enumerate() {
                        if pv.data[j] == y.data[j] {
                            grads[i].data[j] = g.data[j];
                            break;
                        }
                    }
                }
                grads
            }),
        ))
    }

    pub fn concat(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_value(a, |ta| self.with_value(b, |tb| tensor::concat_vec(ta, tb)))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                let na = p[0].len();
                vec![
                    Tensor::vector(g.data[..na].to_vec()),
                    Tensor::vector(g.data[na..].to_vec()),
                ]
            }),
        ))
    }

    /// Stack vectors as matrix rows.
    pub fn stack_rows(&self, vars: &[Var]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let refs: Vec<&Tensor> = vars.iter().map(|v| &nodes[v.0].value).collect();
        let v = tensor::stack_rows(&refs)?;
        drop(nodes);
        let k = vars.len();
        Ok(self.push(
            v,
            vars.iter().map(|v| v.0).collect(),
            Box::new(move |g, _, _| (0..k).map(|i| Tensor::vector(g.row(i).to_vec())).collect()),
        ))
    }

    /// Vertical concatenation of two matrices.
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_value(a, |ta| {
            self.with_value(b, |tb| -> Result<Tensor> {
                if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
                    return Err(CdsmError::dim(
                        "concat_rows",
                        format!("{:?} vs {:?}", ta.shape, tb.shape),
                    ));
                }
                let mut data = ta.data.clone();
                data.extend_from_slice(&tb.data);
                Tensor::matrix(ta.rows() + tb.rows(), ta.cols(), data)
            })
        })?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                let split = p[0].len();
                let c = p[0].cols();
                vec![
                    Tensor::matrix(p[0].rows(), c, g.data[..split].to_vec()).unwrap(),
                    Tensor::matrix(p[1].rows(), c, g.data[split..].to_vec()).unwrap(),
                ]
            }),
        ))
    }

    /// Collect scalar vars into a vector.
    pub fn stack_scalars(&self, vars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(vars.len());
        for v in vars {
            let t = self.value(*v);
            if t.len() != 1 {
                return Err(CdsmError::dim("stack_scalars", "scalars only"));
            }
            data.push(t.item());
        }
        let k = vars.len();
        Ok(self.push(
            Tensor::vector(data),
            vars.iter().map(|v| v.0).collect(),
            Box::new(move |g, _, _| (0..k).map(|i| Tensor::scalar(g.data[i])).collect()),
        ))
    }

    /// Embedding lookup: gather rows of `table` at `indices`.
    pub fn gather_rows(&self, table: Var, indices: Vec<usize>) -> Result<Var> {
        let v = self.with_value(table, |t| tensor::gather_rows(t, &indices))?;
        Ok(self.push(
            v,
            vec![table.0],
            Box::new(move |g, p, _| {
                let mut dt = Tensor::zeros_like(p[0]);
                let c = p[0].cols();
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dt.data[i * c + j] += g.data[r * c + j];
                    }
                }
                vec![dt]
            }),
        ))
    }

    /// Extract row `i` of a matrix as a vector.
    pub fn row(&self, m: Var, i: usize) -> Result<Var> {
        let v = self.with_value(m, |t| -> Result<Tensor> {
            if t.rank() != 2 || i >= t.rows() {
                return Err(CdsmError::dim(
                    "row",
                    format!("row {} of shape {:?}", i, t.shape),
                ));
            }
            Ok(Tensor::vector(t.row(i).to_vec()))
        })?;
        Ok(self.push(
            v,
            vec![m.0],
            Box::new(move |g, p, _| {
                let mut dm = Tensor::zeros_like(p[0]);
                let c = p[0].cols();
                dm.data[i * c..(i + 1) * c].copy_from_slice(&g.data);
                vec![dm]
            }),
        ))
    }

    /// Extract element `i` of a vector as a scalar.
    pub fn index_scalar(&self, v: Var, i: usize) -> Result<Var> {
        let out = self.with_value(v, |t| -> Result<Tensor> {
            if t.rank() != 1 || i >= t.len() {
                return Err(CdsmError::dim(
                    "index_scalar",
                    format!("index {} of shape {:?}", i, t.shape),
                ));
            }
            Ok(Tensor::scalar(t.data[i]))
        })?;
        Ok(self.push(
            out,
            vec![v.0],
            Box::new(move |g, p, _| {
                let mut dv = Tensor::zeros_like(p[0]);
                dv.data[i] = g.item();
                vec![dv]
            }),
        ))
    }

    /// `logsumexp(scores) − scores[target]`: the negative log-softmax
    /// probability of `target`.
    pub fn cross_entropy_with_index(&self, scores: Var, target: usize) -> Result<Var> {
        let out = self.with_value(scores, |t| -> Result<Tensor> {
            if t.rank() != 1 || target >= t.len() {
                return Err(CdsmError::dim(
                    "cross_entropy",
                    format!("target {} of shape {:?}", target, t.shape),
                ));
            }
            let max = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + t.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            Ok(Tensor::scalar(lse - t.data[target]))
        })?;
        Ok(self.push(
            out,
            vec![scores.0],
            Box::new(move |g, p, _| {
                let sm = tensor::softmax_vec(p[0]).expect("cross_entropy backward");
                let s = g.item();
                let mut data: Vec<f64> = sm.data.iter().map(|&p| p * s).collect();
                data[target] -= s;
                vec![Tensor::vector(data)]
            }),
        ))
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let v = self.with_value(x, |tx| {
            self.with_value(gain, |tg| {
                self.with_value(bias, |tb| tensor::layer_norm_rows(tx, tg, tb, EPS))
            })
        })?;
        Ok(self.push(
            v,
            vec![x.0, gain.0, bias.0],
            Box::new(|g, p, _| {
                let (x, gain) = (p[0], p[1]);
                let (r, c) = (x.rows(), x.cols());
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = x.row(i);
                    let grow = g.row(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .zip(&gain.data)
                        .map(|(&g, &w)| g * w)
                        .collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                }
                vec![
                    Tensor::matrix(r, c, dx).unwrap(),
                    Tensor::vector(dgain),
                    Tensor::vector(dbias),
                ]
            }),
        ))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// reachable from it, indexed by [`Var`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(CdsmError::Numeric(
                "backward on an inference tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(CdsmError::dim("backward", "loss must be scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            let node = &nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let contribs = backward(&g, &parent_vals, &node.value);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&p, contrib) in node.parents.iter().zip(contribs) {
                match &mut grads[p] {
                    Some(existing) => {
                        *existing = tensor::add(existing, &contrib)?;
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_gradient_closed_form() {
        // f(a) = a·a at a=[1,2] has gradient [2,4]
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let f = tape.dot(a, a).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(a).unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn chain_through_relu_and_scale() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        let w = tape.leaf(Tensor::vector(vec![3.0, 5.0]));
        let f = tape.dot(y, w).unwrap();
        assert_eq!(tape.item(f), 10.0);
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![0.0, 5.0]);
    }

    #[test]
    fn inference_tape_rejects_backward() {
        let tape = Tape::inference();
        let a = tape.leaf(Tensor::scalar(1.0));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn fanout_accumulates() {
        // f = (x·x) + (x·x); df/dx = 4x
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5]));
        let d1 = tape.dot(x, x).unwrap();
        let d2 = tape.dot(x, x).unwrap();
        let f = tape.add(d1, d2).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![6.0]);
    }

    #[test]
    fn cross_entropy_uniform_scores() {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let l = tape.cross_entropy_with_index(s, 0).unwrap();
        assert!((tape.item(l) - 0.5f64.ln().abs()).abs() < 1e-12);
    }
}
