//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep over node ids is a
//! valid topological order for the backward pass. Only nodes that (directly
//! or transitively) depend on a leaf created with `requires_grad = true`
//! receive gradients.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Which statistics a normalization node standardizes with.
#[derive(Clone, Debug)]
pub enum NormStats {
    /// Mean and biased variance of the current batch; gradients flow
    /// through both.
    Batch,
    /// Externally supplied (stored) per-channel mean and variance.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Gram(Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Relu(Var),
    SumAll(Var),
    SumAxis0(Var),
    SumAxis1(Var),
    LogSoftmax(Var),
    NormalizeCols { x: Var, inv_norm: Vec<f64> },
    NormalizeRows { x: Var, inv_norm: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    PickPerRow(Var, Vec<usize>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a batch-statistics normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every grad-requiring node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient buffer for `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A fresh constant holding the current value of `v` (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar: {:?}", t.shape());
        t.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).expect("tape op produced inconsistent shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims {m}x{k} * {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Self::make(&[m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `aᵀa` for an `m x n` matrix. Each off-diagonal entry is computed once
    /// and mirrored, so the result is exactly symmetric.
    pub fn gram(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let d = self.value(a).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for r in 0..m {
                    acc += d[r * n + i] * d[r * n + j];
                }
                out[i * n + j] = acc;
                out[j * n + i] = acc;
            }
        }
        self.push(Self::make(&[n, n], out), Op::Gram(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Self::make(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// `a[m,n] + v[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(v).len(), n, "add_row width");
        let vd = self.value(v).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + vd[idx % n])
            .collect();
        self.push(Self::make(&[m, n], data), Op::AddRow(a, v), &[a, v])
    }

    /// `a[m,n] * v[n]` broadcast over rows (scales columns).
    pub fn mul_row(&mut self, a: Var, v: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(v).len(), n, "mul_row width");
        let vd = self.value(v).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * vd[idx % n])
            .collect();
        self.push(Self::make(&[m, n], data), Op::MulRow(a, v), &[a, v])
    }

    /// `a[m,n] * v[m]` broadcast over columns (scales rows).
    pub fn mul_col(&mut self, a: Var, v: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(v).len(), m, "mul_col height");
        let vd = self.value(v).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * vd[idx / n])
            .collect();
        self.push(Self::make(&[m, n], data), Op::MulCol(a, v), &[a, v])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.value(a).map(f)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `|x|`; the gradient at exactly zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let t = self.unary(a, |x| x.powf(p));
        self.push(t, Op::Powf(a, p), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Column sums of a matrix, `[m,n] -> [n]`.
    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let d = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        self.push(Tensor::vector(out), Op::SumAxis0(a), &[a])
    }

    /// Row sums of a matrix, `[m,n] -> [m]`.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let d = self.value(a).data();
        let out = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(Tensor::vector(out), Op::SumAxis1(a), &[a])
    }

    /// Row-wise log-softmax via the max-shifted log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        self.push(Self::make(&[m, n], out), Op::LogSoftmax(a), &[a])
    }

    /// Divides each column by its Euclidean norm. Columns whose norm is at
    /// or below `tiny` map to zero and pass no gradient.
    pub fn normalize_cols(&mut self, a: Var, tiny: f64) -> Var {
        let (m, n) = self.value(a).dims2();
        let d = self.value(a).data();
        let mut inv_norm = vec![0.0; n];
        for (j, inv) in inv_norm.iter_mut().enumerate() {
            let nrm = (0..m).map(|i| d[i * n + j] * d[i * n + j]).sum::<f64>().sqrt();
            *inv = if nrm > tiny { 1.0 / nrm } else { 0.0 };
        }
        let out = d
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * inv_norm[idx % n])
            .collect();
        self.push(
            Self::make(&[m, n], out),
            Op::NormalizeCols { x: a, inv_norm },
            &[a],
        )
    }

    /// Row counterpart of [`Tape::normalize_cols`].
    pub fn normalize_rows(&mut self, a: Var, tiny: f64) -> Var {
        let (m, n) = self.value(a).dims2();
        let d = self.value(a).data();
        let inv_norm: Vec<f64> = (0..m)
            .map(|i| {
                let nrm = d[i * n..(i + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt();
                if nrm > tiny {
                    1.0 / nrm
                } else {
                    0.0
                }
            })
            .collect();
        let out = d
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * inv_norm[idx / n])
            .collect();
        self.push(
            Self::make(&[m, n], out),
            Op::NormalizeRows { x: a, inv_norm },
            &[a],
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a).select_rows(idx);
        self.push(t, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, na) = self.value(a).dims2();
        let (m2, nb) = self.value(b).dims2();
        assert_eq!(m, m2, "concat_cols row mismatch");
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        self.push(Self::make(&[m, na + nb], out), Op::ConcatCols(a, b), &[a, b])
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, _) = self.value(a).dims2();
        assert_eq!(idx.len(), m, "pick_per_row index count");
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| self.value(a).at(i, j))
            .collect();
        self.push(Tensor::vector(out), Op::PickPerRow(a, idx.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Stride-1 2-D convolution over NCHW input with symmetric zero padding.
    /// `w` is `[out_ch, in_ch, k, k]`, `b` (optional) is `[out_ch]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OIKK");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let k = ws[2];
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: k,
            padding,
            out_h: xs[2] + 2 * padding + 1 - k,
            out_w: xs[3] + 2 * padding + 1 - k,
        };
        let ckk = geom.in_ch * k * k;
        let hw = geom.out_h * geom.out_w;
        let keep_cols = self.requires_grad(w);
        let mut cols_all = if keep_cols {
            vec![0.0; geom.batch * ckk * hw]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0; ckk * hw];
        let mut out = vec![0.0; geom.batch * geom.out_ch * hw];
        let img = geom.in_ch * geom.height * geom.width;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for nidx in 0..geom.batch {
            let cols: &mut [f64] = if keep_cols {
                &mut cols_all[nidx * ckk * hw..(nidx + 1) * ckk * hw]
            } else {
                &mut scratch
            };
            im2col(&xd[nidx * img..(nidx + 1) * img], &geom, cols);
            let o = &mut out[nidx * geom.out_ch * hw..(nidx + 1) * geom.out_ch * hw];
            gemm(geom.out_ch, ckk, hw, wd, false, cols, false, o, false);
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (chunk_idx, chunk) in out.chunks_mut(hw).enumerate() {
                let bias = bd[chunk_idx % geom.out_ch];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let shape = [geom.batch, geom.out_ch, geom.out_h, geom.out_w];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Self::make(&shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: cols_all,
            },
            &inputs,
        )
    }

    /// Per-channel normalization followed by the affine `gamma * xhat + beta`.
    /// Accepts `[N, C]` or `[N, C, ...]` input. Returns the output node and,
    /// for batch statistics, the observed per-channel mean/variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats,
        eps: f64,
    ) -> (Var, Option<ObservedStats>) {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2, "batch_norm needs [N, C, ...]");
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let count = n * spatial;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(g.len(), c, "gamma width");
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        s += xd[base..base + spatial].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut v = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        v += xd[base..base + spatial]
                            .iter()
                            .map(|&t| (t - mu) * (t - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / count as f64;
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                assert_eq!(mean.len(), c, "stored mean width");
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for s in base..base + spatial {
                    let h = (xd[s] - mean[ch]) * inv_std[ch];
                    xhat[s] = h;
                    out[s] = g[ch] * h + bt[ch];
                }
            }
        }
        let observed = batch_stats.then(|| ObservedStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let v = self.push(
            Self::make(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        (v, observed)
    }

    /// 2x2 max pooling with stride 2 over NCHW (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "max_pool2 input must be NCHW");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        self.push(
            Self::make(&[n, c, oh, ow], out),
            Op::MaxPool2 { x, argmax },
            &[x],
        )
    }

    /// Mean over spatial positions, `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool input must be NCHW");
        let hw = s[2] * s[3];
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Self::make(&[s[0], s[1]], out), Op::GlobalAvgPool(x), &[x])
    }

    /// Gradients of the scalar node `root` with respect to every node that
    /// requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, self.value(*b).data(), true, ga, true);
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, self.value(*a).data(), true, g, false, gb, true);
                }
            }
            Op::Gram(a) => {
                // d(aᵀa) = a (g + gᵀ)
                let (m, n) = self.value(*a).dims2();
                let mut sym = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] = g[i * n + j] + g[j * n + i];
                    }
                }
                let ga = accumulate(&mut grads[a.0], m * n);
                gemm(m, n, n, self.value(*a).data(), false, &sym, false, ga, true);
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = accumulate(&mut grads[a.0], m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::AddRow(a, v) => {
                let n = self.value(*v).len();
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(*v) {
                    let gv = accumulate(&mut grads[v.0], n);
                    for (idx, &x) in g.iter().enumerate() {
                        gv[idx % n] += x;
                    }
                }
            }
            Op::MulRow(a, v) => {
                let n = self.value(*v).len();
                let vd = self.value(*v).data();
                let ad = self.value(*a).data();
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (idx, &x) in g.iter().enumerate() {
                        ga[idx] += x * vd[idx % n];
                    }
                }
                if self.wants(*v) {
                    let gv = accumulate(&mut grads[v.0], n);
                    for (idx, &x) in g.iter().enumerate() {
                        gv[idx % n] += x * ad[idx];
                    }
                }
            }
            Op::MulCol(a, v) => {
                let m = self.value(*v).len();
                let n = g.len() / m.max(1);
                let vd = self.value(*v).data();
                let ad = self.value(*a).data();
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (idx, &x) in g.iter().enumerate() {
                        ga[idx] += x * vd[idx / n];
                    }
                }
                if self.wants(*v) {
                    let gv = accumulate(&mut grads[v.0], m);
                    for (idx, &x) in g.iter().enumerate() {
                        gv[idx / n] += x * ad[idx];
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Abs(a) => {
                let ad = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    let sign = if ad[i] > 0.0 {
                        1.0
                    } else if ad[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] += g[i] * sign;
                }
            }
            Op::Exp(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
            Op::Log(a) => {
                let ad = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] / ad[i];
                }
            }
            Op::Powf(a, p) => {
                let ad = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * p * ad[i].powf(p - 1.0);
                }
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if ad[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::SumAll(a) => {
                let len = self.value(*a).len();
                let ga = accumulate(&mut grads[a.0], len);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::SumAxis0(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = accumulate(&mut grads[a.0], m * n);
                for (idx, x) in ga.iter_mut().enumerate() {
                    *x += g[idx % n];
                }
            }
            Op::SumAxis1(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = accumulate(&mut grads[a.0], m * n);
                for (idx, x) in ga.iter_mut().enumerate() {
                    *x += g[idx / n];
                }
            }
            Op::LogSoftmax(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = accumulate(&mut grads[a.0], m * n);
                for i in 0..m {
                    let gs: f64 = g[i * n..(i + 1) * n].iter().sum();
                    for j in 0..n {
                        let p = out[i * n + j].exp();
                        ga[i * n + j] += g[i * n + j] - p * gs;
                    }
                }
            }
            Op::NormalizeCols { x, inv_norm } => {
                let (m, n) = self.value(*x).dims2();
                let ga = accumulate(&mut grads[x.0], m * n);
                for j in 0..n {
                    if inv_norm[j] == 0.0 {
                        continue;
                    }
                    let dot: f64 = (0..m).map(|i| out[i * n + j] * g[i * n + j]).sum();
                    for i in 0..m {
                        ga[i * n + j] += (g[i * n + j] - out[i * n + j] * dot) * inv_norm[j];
                    }
                }
            }
            Op::NormalizeRows { x, inv_norm } => {
                let (m, n) = self.value(*x).dims2();
                let ga = accumulate(&mut grads[x.0], m * n);
                for i in 0..m {
                    if inv_norm[i] == 0.0 {
                        continue;
                    }
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = out[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                    for k in r {
                        ga[k] += (g[k] - out[k] * dot) * inv_norm[i];
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.value(*a).dims2();
                let ga = accumulate(&mut grads[a.0], m * n);
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[src * n + j] += g[r * n + j];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.value(*a).dims2();
                let nb = self.value(*b).dims2().1;
                let w = na + nb;
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * na);
                    for i in 0..m {
                        for j in 0..na {
                            ga[i * na + j] += g[i * w + j];
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], m * nb);
                    for i in 0..m {
                        for j in 0..nb {
                            gb[i * nb + j] += g[i * w + na + j];
                        }
                    }
                }
            }
            Op::PickPerRow(a, idx) => {
                let (m, n) = self.value(*a).dims2();
                let ga = accumulate(&mut grads[a.0], m * n);
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * n + j] += g[i];
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let ckk = geom.in_ch * geom.kernel * geom.kernel;
                let hw = geom.out_h * geom.out_w;
                let plane = geom.out_ch * hw;
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let gb = accumulate(&mut grads[b.0], geom.out_ch);
                    for (chunk_idx, chunk) in g.chunks(hw).enumerate() {
                        gb[chunk_idx % geom.out_ch] += chunk.iter().sum::<f64>();
                    }
                }
                if self.wants(*w) {
                    let gw = accumulate(&mut grads[w.0], geom.out_ch * ckk);
                    for nidx in 0..geom.batch {
                        gemm(
                            geom.out_ch,
                            hw,
                            ckk,
                            &g[nidx * plane..(nidx + 1) * plane],
                            false,
                            &cols[nidx * ckk * hw..(nidx + 1) * ckk * hw],
                            true,
                            gw,
                            true,
                        );
                    }
                }
                if self.wants(*x) {
                    let img = geom.in_ch * geom.height * geom.width;
                    let wd = self.value(*w).data();
                    let mut dcols = vec![0.0; ckk * hw];
                    let gx = accumulate(&mut grads[x.0], geom.batch * img);
                    for nidx in 0..geom.batch {
                        gemm(
                            ckk,
                            geom.out_ch,
                            hw,
                            wd,
                            true,
                            &g[nidx * plane..(nidx + 1) * plane],
                            false,
                            &mut dcols,
                            false,
                        );
                        col2im(&dcols, geom, &mut gx[nidx * img..(nidx + 1) * img]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let count = (n * spatial) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for s in base..base + spatial {
                            sum_g[ch] += g[s];
                            sum_gx[ch] += g[s] * xhat[s];
                        }
                    }
                }
                if self.wants(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], c);
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if self.wants(*beta) {
                    let gb = accumulate(&mut grads[beta.0], c);
                    gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * spatial;
                            let k = gam[ch] * inv_std[ch];
                            for s in base..base + spatial {
                                gx[s] += if *batch_stats {
                                    k * (g[s] - sum_g[ch] / count - xhat[s] * sum_gx[ch] / count)
                                } else {
                                    k * g[s]
                                };
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let len = self.value(*x).len();
                let gx = accumulate(&mut grads[x.0], len);
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let len = self.value(*x).len();
                let gx = accumulate(&mut grads[x.0], len);
                for (idx, v) in gx.iter_mut().enumerate() {
                    *v += g[idx / hw] / hw as f64;
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
}

fn im2col(x: &[f64], geom: &ConvGeom, cols: &mut [f64]) {
    let (h, w, k, p) = (geom.height, geom.width, geom.kernel, geom.padding);
    let hw = geom.out_h * geom.out_w;
    for c in 0..geom.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..geom.out_h {
                    let ih = oh + ki;
                    for ow in 0..geom.out_w {
                        let iw = ow + kj;
                        dst[oh * geom.out_w + ow] = if ih < p || iw < p || ih - p >= h || iw - p >= w {
                            0.0
                        } else {
                            x[(c * h + ih - p) * w + iw - p]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let (h, w, k, p) = (geom.height, geom.width, geom.kernel, geom.padding);
    let hw = geom.out_h * geom.out_w;
    for c in 0..geom.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..geom.out_h {
                    let ih = oh + ki;
                    if ih < p || ih - p >= h {
                        continue;
                    }
                    for ow in 0..geom.out_w {
                        let iw = ow + kj;
                        if iw < p || iw - p >= w {
                            continue;
                        }
                        dx[(c * h + ih - p) * w + iw - p] += src[oh * geom.out_w + ow];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` around `x0`, one coordinate at a time.
    fn numeric_grad(x0: &Tensor, f: &dyn Fn(&Tensor) -> f64, h: f64) -> Vec<f64> {
        (0..x0.len())
            .map(|i| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += h;
                let mut xm = x0.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / denom < tol, "coord {i}: analytic {x} vs numeric {y}");
        }
    }

    /// Builds `sum(w ⊙ build(x))` with fixed random weights so every output
    /// coordinate contributes to the scalar.
    fn check(
        x0: Tensor,
        seed: u64,
        build: impl Fn(&mut Tape, Var) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probe = Tape::new();
        let px = probe.constant(x0.clone());
        let py = build(&mut probe, px);
        let out_shape = probe.shape(py).to_vec();
        let wts = random(&out_shape, &mut rng);
        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = build(&mut t, v);
            t.value(y).data().iter().zip(wts.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut t = Tape::new();
        let xv = t.leaf(x0.clone(), true);
        let y = build(&mut t, xv);
        let wv = t.constant(wts.clone());
        let prod = t.mul(y, wv);
        let s = t.sum(prod);
        let grads = t.backward(s);
        let analytic = grads.get_or_zeros(xv, x0.len());
        let numeric = numeric_grad(&x0, &eval, 1e-5);
        assert_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn elementwise_and_matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random(&[3, 2], &mut rng);
        let row = random(&[3], &mut rng);
        let col = random(&[4], &mut rng);
        let x0 = random(&[4, 3], &mut rng);
        check(x0.clone(), 1, |t, x| {
            let bv = t.constant(b.clone());
            t.matmul(x, bv)
        });
        check(x0.clone(), 2, |t, x| {
            let xt = t.transpose(x);
            t.matmul(xt, x)
        });
        check(x0.clone(), 10, |t, x| t.gram(x));
        check(x0.clone(), 3, |t, x| {
            let r = t.constant(row.clone());
            let c = t.constant(col.clone());
            let a = t.mul_row(x, r);
            let a = t.mul_col(a, c);
            t.add_row(a, r)
        });
        check(x0.clone(), 4, |t, x| {
            let e = t.exp(x);
            let l = t.add_scalar(e, 1.0);
            t.log(l)
        });
        check(x0.clone(), 5, |t, x| t.log_softmax(x));
        check(x0.clone(), 6, |t, x| t.normalize_cols(x, 1e-12));
        check(x0.clone(), 7, |t, x| t.normalize_rows(x, 1e-12));
        check(x0.clone(), 8, |t, x| {
            let a = t.abs(x);
            let a = t.add_scalar(a, 0.5);
            t.powf(a, -0.5)
        });
        check(x0.clone(), 9, |t, x| {
            let g = t.gather_rows(x, &[2, 0, 2]);
            let s0 = t.sum_axis0(x);
            let s1 = t.sum_axis1(g);
            let c = t.concat_cols(x, x);
            let p = t.pick_per_row(c, &[0, 5, 3, 1]);
            let r = t.reshape(s0, &[1, 3]);
            let a = t.sum(p);
            let b = t.sum(s1);
            let q = t.sum(r);
            let ab = t.add(a, b);
            t.sub(ab, q)
        });
    }

    #[test]
    fn cnn_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random(&[2, 2, 5, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let bias = random(&[3], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        check(x0.clone(), 21, |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(bias.clone());
            t.conv2d(x, wv, Some(bv), 1)
        });
        check(x0.clone(), 22, |t, x| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(x, wv, None, 0);
            let gv = t.constant(gamma.clone());
            let bv = t.constant(beta.clone());
            let (y, _) = t.batch_norm(y, gv, bv, &NormStats::Batch, 1e-5);
            let y = t.relu(y);
            t.global_avg_pool(y)
        });
        check(x0.clone(), 23, |t, x| t.max_pool2(x));
        let fixed = NormStats::Fixed {
            mean: vec![0.1, -0.2],
            var: vec![0.5, 2.0],
        };
        check(x0.clone(), 24, |t, x| {
            let gv = t.constant(Tensor::vector(vec![1.5, -0.5]));
            let bv = t.constant(Tensor::vector(vec![0.0, 0.3]));
            t.batch_norm(x, gv, bv, &fixed, 1e-5).0
        });
    }

    #[test]
    fn parameter_gradients_for_conv_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 2, 4, 4], &mut rng);
        let w0 = random(&[3, 2, 3, 3], &mut rng);
        let g0 = random(&[3], &mut rng);
        let wts = random(&[2, 3], &mut rng);
        let run = |w: &Tensor, gamma: &Tensor, grad: bool| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.leaf(w.clone(), grad);
            let gv = t.leaf(gamma.clone(), grad);
            let bv = t.constant(Tensor::zeros(&[3]));
            let y = t.conv2d(xv, wv, None, 1);
            let (y, _) = t.batch_norm(y, gv, bv, &NormStats::Batch, 1e-5);
            let y = t.global_avg_pool(y);
            let c = t.constant(wts.clone());
            let y = t.mul(y, c);
            let s = t.sum(y);
            if grad {
                let g = t.backward(s);
                (t.scalar(s), Some((g.get_or_zeros(wv, w.len()), g.get_or_zeros(gv, 3))))
            } else {
                (t.scalar(s), None)
            }
        };
        let (_, grads) = run(&w0, &g0, true);
        let (gw, gg) = grads.unwrap();
        let nw = numeric_grad(&w0, &|w| run(w, &g0, false).0, 1e-5);
        let ng = numeric_grad(&g0, &|g| run(&w0, g, false).0, 1e-5);
        assert_close(&gw, &nw, 1e-5);
        assert_close(&gg, &ng, 1e-5);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 2.0, -3.0]), true);
        let a = t.abs(x);
        let s = t.sum(a);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn zero_column_normalizes_to_zero_without_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[[3.0, 0.0], [4.0, 0.0]]), true);
        let y = t.normalize_cols(x, 0.0);
        let yv = t.value(y).data();
        assert!((yv[0] - 0.6).abs() < 1e-15 && (yv[2] - 0.8).abs() < 1e-15);
        assert_eq!((yv[1], yv[3]), (0.0, 0.0));
        let s = t.sum(y);
        let g = t.backward(s);
        let gx = g.get(x).unwrap();
        assert_eq!(gx[1], 0.0);
        assert_eq!(gx[3], 0.0);
        assert!(gx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(2.0));
        let b = t.leaf(Tensor::scalar(3.0), true);
        let c = t.mul(a, b);
        let g = t.backward(c);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[2.0]);
    }
}
