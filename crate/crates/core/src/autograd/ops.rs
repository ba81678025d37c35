use std::rc::Rc;

use super::tensor::{gemm, View};
use super::{Graph, Tensor, Var};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Batch statistics produced by a training-mode normalization, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance (what running statistics track).
    pub var_unbiased: Vec<f32>,
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul {:?} x {:?}", a.shape(), b.shape());
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    gemm(
        m,
        k,
        n,
        1.0,
        View::rowmajor(a.data(), 0, k),
        View::rowmajor(b.data(), 0, n),
        0.0,
        out.data_mut(),
        0,
        n,
    );
    out
}

/// `dA = dC·Bᵀ`
fn grad_lhs(dc: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (dc.rows(), dc.cols(), b.rows());
    let mut out = Tensor::zeros(m, k);
    gemm(
        m,
        n,
        k,
        1.0,
        View::rowmajor(dc.data(), 0, n),
        View::transposed(b.data(), 0, n),
        0.0,
        out.data_mut(),
        0,
        k,
    );
    out
}

/// `dB = Aᵀ·dC`
fn grad_rhs(a: &Tensor, dc: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), dc.cols());
    let mut out = Tensor::zeros(k, n);
    gemm(
        k,
        m,
        n,
        1.0,
        View::transposed(a.data(), 0, k),
        View::rowmajor(dc.data(), 0, n),
        0.0,
        out.data_mut(),
        0,
        n,
    );
    out
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0f32; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += *v;
        }
    }
    Tensor::row_vector(out)
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let out = matmul_raw(&av, &bv);
        self.push_op(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| grad_lhs(g, &bv)),
                needs[1].then(|| grad_rhs(&av, g)),
            ]
        })
    }

    /// `x·W + b` with `W: in×out` and `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value_rc(x), self.value_rc(w));
        let mut out = matmul_raw(&xv, &wv);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols()), "bias shape");
            let bias = bv.data().to_vec();
            let cols = out.cols();
            for row in out.data_mut().chunks_exact_mut(cols) {
                for (o, bb) in row.iter_mut().zip(&bias) {
                    *o += *bb;
                }
            }
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.push_op(out, &parents, move |g, needs| {
            let mut grads = vec![
                needs[0].then(|| grad_lhs(g, &wv)),
                needs[1].then(|| grad_rhs(&xv, g)),
            ];
            if has_bias {
                grads.push(needs[2].then(|| col_sums(g)));
            }
            grads
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    /// `x + tile(y)` where `x` stacks `x.rows() / y.rows()` copies of `y`'s row space.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        assert_eq!(xv.cols(), yv.cols());
        assert!(yv.rows() > 0 && xv.rows() % yv.rows() == 0, "add_tiled shape");
        let block = yv.data().len();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_exact_mut(block) {
            for (o, v) in chunk.iter_mut().zip(yv.data()) {
                *o += *v;
            }
        }
        let (yr, yc) = yv.shape();
        self.push_op(out, &[x, y], move |g, needs| {
            let gy = needs[1].then(|| {
                let mut acc = Tensor::zeros(yr, yc);
                for chunk in g.data().chunks_exact(block) {
                    for (a, v) in acc.data_mut().iter_mut().zip(chunk) {
                        *a += *v;
                    }
                }
                acc
            });
            vec![needs[0].then(|| g.clone()), gy]
        })
    }

    /// Stacks `times` copies of `x` along rows.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut data = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            data.extend_from_slice(xv.data());
        }
        self.push_op(Tensor::new(r * times, c, data), &[x], move |g, _| {
            let mut acc = Tensor::zeros(r, c);
            for chunk in g.data().chunks_exact(r * c) {
                for (a, v) in acc.data_mut().iter_mut().zip(chunk) {
                    *a += *v;
                }
            }
            vec![Some(acc)]
        })
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = map(self.value(x), |v| v * s);
        self.push_op(out, &[x], move |g, _| vec![Some(map(g, |v| v * s))])
    }

    /// Tanh-approximated GELU, evaluated as `x·σ(2u)` with `u = c(x + 0.044715x³)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let gate: Vec<f32> = xv
            .data()
            .iter()
            .map(|&v| sigmoid(2.0 * GELU_C * (v + 0.044715 * v * v * v)))
            .collect();
        let out = Tensor::new(
            xv.rows(),
            xv.cols(),
            xv.data().iter().zip(&gate).map(|(v, s)| v * s).collect(),
        );
        self.push_op(out, &[x], move |g, _| {
            let dx: Vec<f32> = xv
                .data()
                .iter()
                .zip(&gate)
                .zip(g.data())
                .map(|((&v, &s), &gv)| {
                    let du = 2.0 * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    gv * (s + v * s * (1.0 - s) * du)
                })
                .collect();
            vec![Some(Tensor::new(g.rows(), g.cols(), dx))]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let out = map(&xv, |v| v.max(0.0));
        self.push_op(out, &[x], move |g, _| {
            vec![Some(zip_map(&xv, g, |v, gv| if v > 0.0 { gv } else { 0.0 }))]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = Rc::new(map(self.value(x), sigmoid));
        let saved = Rc::clone(&out);
        self.push_op((*out).clone(), &[x], move |g, _| {
            vec![Some(zip_map(&saved, g, |s, gv| gv * s * (1.0 - s)))]
        })
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×C`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let gv = self.value_rc(gamma);
        let bv = self.value(beta);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = vec![0.0f32; rows];
        let mut out = Tensor::zeros(rows, cols);
        for (r, rs_slot) in rstd.iter_mut().enumerate() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + eps).sqrt();
            *rs_slot = rs;
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * gv.data()[c] + bv.data()[c];
            }
        }
        self.push_op(out, &[x, gamma, beta], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(rows, cols);
                let mut dxhat = vec![0.0f32; cols];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    let mut s1 = 0.0f32;
                    let mut s2 = 0.0f32;
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gv.data()[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * xh[c];
                    }
                    let (m1, m2) = (s1 / cols as f32, s2 / cols as f32);
                    let d = dx.row_mut(r);
                    for c in 0..cols {
                        d[c] = rs * (dxhat[c] - m1 - xh[c] * m2);
                    }
                }
                dx
            });
            let dgamma = needs[1].then(|| {
                let mut acc = vec![0.0f32; cols];
                for r in 0..rows {
                    for ((a, gg), xh) in acc.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                        *a += gg * xh;
                    }
                }
                Tensor::row_vector(acc)
            });
            let dbeta = needs[2].then(|| col_sums(g));
            vec![dx, dgamma, dbeta]
        })
    }

    /// Column-wise normalization over the rows of `x` using the batch's own statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(rows >= 2, "batch_norm needs at least two rows");
        let mut mean = vec![0.0f64; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0f64; cols];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                let d = *v as f64 - m;
                *s += d * d;
            }
        }
        let var_biased: Vec<f32> = var.iter().map(|s| (s / rows as f64) as f32).collect();
        let var_unbiased: Vec<f32> = var.iter().map(|s| (s / (rows - 1) as f64) as f32).collect();
        let mean: Vec<f32> = mean.iter().map(|m| *m as f32).collect();
        let rstd: Vec<f32> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let gv = self.value_rc(gamma);
        let bv = self.value(beta);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean[c]) * rstd[c];
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * gv.data()[c] + bv.data()[c];
            }
        }
        let stats = BatchStats { mean, var_unbiased };
        let var = self.push_op(out, &[x, gamma, beta], move |g, needs| {
            let mut sum_dxhat = vec![0.0f32; cols];
            let mut sum_dxhat_xhat = vec![0.0f32; cols];
            let mut dgamma = vec![0.0f32; cols];
            for r in 0..rows {
                let gr = g.row(r);
                let xh = xhat.row(r);
                for c in 0..cols {
                    let dxh = gr[c] * gv.data()[c];
                    sum_dxhat[c] += dxh;
                    sum_dxhat_xhat[c] += dxh * xh[c];
                    dgamma[c] += gr[c] * xh[c];
                }
            }
            let dx = needs[0].then(|| {
                let n = rows as f32;
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    let d = dx.row_mut(r);
                    for c in 0..cols {
                        let dxh = gr[c] * gv.data()[c];
                        d[c] = rstd[c] / n * (n * dxh - sum_dxhat[c] - xh[c] * sum_dxhat_xhat[c]);
                    }
                }
                dx
            });
            vec![
                dx,
                needs[1].then(|| Tensor::row_vector(dgamma)),
                needs[2].then(|| col_sums(g)),
            ]
        });
        (var, stats)
    }

    /// Normalization with fixed (running) statistics: `(x − mean)/√(var+ε)·γ + β`.
    pub fn affine_norm(
        &mut self,
        x: Var,
        mean: &[f32],
        var: &[f32],
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let rstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value_rc(gamma);
        let bv = self.value(beta);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean[c]) * rstd[c];
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * gv.data()[c] + bv.data()[c];
            }
        }
        self.push_op(out, &[x, gamma, beta], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.clone();
                for r in 0..rows {
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d *= gv.data()[c] * rstd[c];
                    }
                }
                dx
            });
            let dgamma = needs[1].then(|| {
                let mut acc = vec![0.0f32; cols];
                for r in 0..rows {
                    for ((a, gg), xh) in acc.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                        *a += gg * xh;
                    }
                }
                Tensor::row_vector(acc)
            });
            vec![dx, dgamma, needs[2].then(|| col_sums(g))]
        })
    }

    /// Gathers rows `idx` of `x`.
    pub fn index_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            assert!(i < rows, "index_rows: {i} out of {rows}");
            data.extend_from_slice(xv.row(i));
        }
        self.push_op(Tensor::new(idx.len(), cols, data), &[x], move |g, _| {
            let mut acc = Tensor::zeros(rows, cols);
            for (k, &i) in idx.iter().enumerate() {
                for (a, v) in acc.row_mut(i).iter_mut().zip(g.row(k)) {
                    *a += *v;
                }
            }
            vec![Some(acc)]
        })
    }

    /// Averages rows of `x` into `groups` buckets given by `assign[row]`.
    pub fn segment_mean(&mut self, x: Var, assign: Rc<Vec<usize>>, groups: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(assign.len(), rows);
        let mut counts = vec![0usize; groups];
        let mut out = Tensor::zeros(groups, cols);
        for (r, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (o, v) in out.row_mut(a).iter_mut().zip(xv.row(r)) {
                *o += *v;
            }
        }
        for (gi, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f32;
                out.row_mut(gi).iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.push_op(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(rows, cols);
            for (r, &a) in assign.iter().enumerate() {
                let inv = 1.0 / counts[a] as f32;
                for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(a)) {
                    *d = v * inv;
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows());
        let (rows, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        self.push_op(Tensor::new(rows, ca + cb, data), &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut t = Tensor::zeros(rows, ca);
                for r in 0..rows {
                    t.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                }
                t
            });
            let gb = needs[1].then(|| {
                let mut t = Tensor::zeros(rows, cb);
                for r in 0..rows {
                    t.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                t
            });
            vec![ga, gb]
        })
    }

    /// Stacks the rows of `parts` in order; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let mut bounds = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            bounds.push((data.len() / cols.max(1), v.rows()));
            data.extend_from_slice(v.data());
        }
        let rows = bounds.iter().map(|b| b.1).sum();
        self.push_op(Tensor::new(rows, cols, data), parts, move |g, needs| {
            bounds
                .iter()
                .zip(needs)
                .map(|(&(start, len), &need)| {
                    need.then(|| {
                        Tensor::new(len, cols, g.data()[start * cols..(start + len) * cols].to_vec())
                    })
                })
                .collect()
        })
    }

    /// Per-group products `F_g · Z_gᵀ`.
    ///
    /// `z` stacks `groups` blocks of `n` rows, `f` stacks `groups` blocks of `k`
    /// rows; the result stacks `groups` blocks of `k` rows with `n` columns.
    pub fn group_dot(&mut self, z: Var, f: Var, groups: usize) -> Var {
        let (zv, fv) = (self.value_rc(z), self.value_rc(f));
        assert_eq!(zv.cols(), fv.cols());
        assert!(groups > 0 && zv.rows() % groups == 0 && fv.rows() % groups == 0);
        let d = zv.cols();
        let n = zv.rows() / groups;
        let k = fv.rows() / groups;
        let mut out = Tensor::zeros(groups * k, n);
        for gi in 0..groups {
            gemm(
                k,
                d,
                n,
                1.0,
                View::rowmajor(fv.data(), gi * k * d, d),
                View::transposed(zv.data(), gi * n * d, d),
                0.0,
                out.data_mut(),
                gi * k * n,
                n,
            );
        }
        self.push_op(out, &[z, f], move |g, needs| {
            let dz = needs[0].then(|| {
                let mut dz = Tensor::zeros(groups * n, d);
                for gi in 0..groups {
                    gemm(
                        n,
                        k,
                        d,
                        1.0,
                        View::transposed(g.data(), gi * k * n, n),
                        View::rowmajor(fv.data(), gi * k * d, d),
                        0.0,
                        dz.data_mut(),
                        gi * n * d,
                        d,
                    );
                }
                dz
            });
            let df = needs[1].then(|| {
                let mut df = Tensor::zeros(groups * k, d);
                for gi in 0..groups {
                    gemm(
                        k,
                        n,
                        d,
                        1.0,
                        View::rowmajor(g.data(), gi * k * n, n),
                        View::rowmajor(zv.data(), gi * n * d, d),
                        0.0,
                        df.data_mut(),
                        gi * k * d,
                        d,
                    );
                }
                df
            });
            vec![dz, df]
        })
    }

    /// Divides each row by its L2 norm (floored at `eps`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let norms: Vec<f32> = (0..rows)
            .map(|r| xv.row(r).iter().map(|v| v * v).sum::<f32>().sqrt().max(eps))
            .collect();
        let mut out = xv.clone();
        for (r, n) in norms.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        let y = Rc::new(out.clone());
        let raw_norms: Vec<bool> = (0..rows)
            .map(|r| xv.row(r).iter().map(|v| v * v).sum::<f32>().sqrt() > eps)
            .collect();
        self.push_op(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let yr = y.row(r);
                let gr = g.row(r);
                let d = dx.row_mut(r);
                if raw_norms[r] {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                } else {
                    for c in 0..cols {
                        d[c] = gr[c] / norms[r];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Scalar node whose gradients w.r.t. `parents` were computed eagerly.
    pub fn scalar_with_grads(&mut self, value: f32, parents: &[Var], grads: Vec<Tensor>) -> Var {
        assert_eq!(parents.len(), grads.len());
        for (p, gr) in parents.iter().zip(&grads) {
            assert_eq!(self.value(*p).shape(), gr.shape(), "eager gradient shape");
        }
        self.push_op(Tensor::scalar(value), parents, move |g, needs| {
            let s = g.item();
            grads
                .iter()
                .zip(needs)
                .map(|(gr, &need)| need.then(|| map(gr, |v| v * s)))
                .collect()
        })
    }

    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        let total: f32 = terms.iter().map(|t| self.value(*t).item()).sum();
        let n = terms.len();
        self.push_op(Tensor::scalar(total), terms, move |g, _| {
            (0..n).map(|_| Some(g.clone())).collect()
        })
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
