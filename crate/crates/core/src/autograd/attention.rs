use std::rc::Rc;

use super::tensor::{gemm, View};
use super::{Graph, Tensor, Var};

/// One independent attention problem: `q_len` query rows attend over `k_len` key rows.
///
/// Queries and keys are addressed by their starting row in the stacked `q` / `k`
/// matrices, so several tasks may share the same key (or query) rows. Outputs are
/// written contiguously in task order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnTask {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl AttnTask {
    /// `count` equally sized tasks laid out back to back in both `q` and `k`.
    pub fn blocks(count: usize, q_len: usize, k_len: usize) -> Vec<AttnTask> {
        (0..count)
            .map(|i| AttnTask { q_start: i * q_len, q_len, k_start: i * k_len, k_len })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub tasks: Rc<Vec<AttnTask>>,
    pub heads: usize,
    /// Per key row; `false` rows are excluded from every softmax.
    pub key_valid: Option<Rc<Vec<bool>>>,
}

fn softmax_rows_masked(s: &mut [f32], rows: usize, cols: usize, valid: Option<&[bool]>) {
    for r in 0..rows {
        let row = &mut s[r * cols..(r + 1) * cols];
        if let Some(valid) = valid {
            for (v, ok) in row.iter_mut().zip(valid) {
                if !ok {
                    *v = f32::NEG_INFINITY;
                }
            }
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

impl Graph {
    /// Multi-head scaled dot-product attention over a batch of [`AttnTask`]s.
    ///
    /// `q` and `k` share the projected width (split evenly across heads), `v` may
    /// have a different width. Returns `Σ q_len` rows of width `v.cols()`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value_rc(q), self.value_rc(k), self.value_rc(v));
        let heads = spec.heads;
        let dq = qv.cols();
        let dv = vv.cols();
        assert_eq!(kv.cols(), dq, "query/key width mismatch");
        assert_eq!(kv.rows(), vv.rows(), "key/value rows mismatch");
        assert!(dq % heads == 0 && dv % heads == 0, "width not divisible by heads");
        let (dh, dvh) = (dq / heads, dv / heads);
        let scale = 1.0 / (dh as f32).sqrt();
        let tasks = Rc::clone(&spec.tasks);
        let key_valid = spec.key_valid.clone();
        if let Some(kvld) = &key_valid {
            assert_eq!(kvld.len(), kv.rows());
        }

        let total_q: usize = tasks.iter().map(|t| t.q_len).sum();
        let prob_len: usize = tasks.iter().map(|t| t.q_len * t.k_len * heads).sum();
        let mut probs = vec![0.0f32; prob_len];
        let mut out = Tensor::zeros(total_q, dv);
        let mut out_starts = Vec::with_capacity(tasks.len());
        let mut prob_starts = Vec::with_capacity(tasks.len());
        let (mut out_row, mut prob_off) = (0usize, 0usize);
        for t in tasks.iter() {
            assert!(t.q_start + t.q_len <= qv.rows() && t.k_start + t.k_len <= kv.rows());
            out_starts.push(out_row);
            prob_starts.push(prob_off);
            let valid = key_valid.as_ref().map(|kv| &kv[t.k_start..t.k_start + t.k_len]);
            for h in 0..heads {
                let p = &mut probs[prob_off..prob_off + t.q_len * t.k_len];
                gemm(
                    t.q_len,
                    dh,
                    t.k_len,
                    scale,
                    View::rowmajor(qv.data(), t.q_start * dq + h * dh, dq),
                    View::transposed(kv.data(), t.k_start * dq + h * dh, dq),
                    0.0,
                    p,
                    0,
                    t.k_len,
                );
                softmax_rows_masked(p, t.q_len, t.k_len, valid);
                gemm(
                    t.q_len,
                    t.k_len,
                    dvh,
                    1.0,
                    View::rowmajor(p, 0, t.k_len),
                    View::rowmajor(vv.data(), t.k_start * dv + h * dvh, dv),
                    0.0,
                    out.data_mut(),
                    out_row * dv + h * dvh,
                    dv,
                );
                prob_off += t.q_len * t.k_len;
            }
            out_row += t.q_len;
        }

        self.push_op(out, &[q, k, v], move |g, needs| {
            let mut dq_t = needs[0].then(|| Tensor::zeros(qv.rows(), dq));
            let mut dk_t = needs[1].then(|| Tensor::zeros(kv.rows(), dq));
            let mut dv_t = needs[2].then(|| Tensor::zeros(vv.rows(), dv));
            let mut ds = Vec::new();
            for (ti, t) in tasks.iter().enumerate() {
                for h in 0..heads {
                    let off = prob_starts[ti] + h * t.q_len * t.k_len;
                    let p = &probs[off..off + t.q_len * t.k_len];
                    let g_view = View::rowmajor(g.data(), out_starts[ti] * dv + h * dvh, dv);
                    if let Some(dvt) = dv_t.as_mut() {
                        gemm(
                            t.k_len,
                            t.q_len,
                            dvh,
                            1.0,
                            View::transposed(p, 0, t.k_len),
                            g_view,
                            1.0,
                            dvt.data_mut(),
                            t.k_start * dv + h * dvh,
                            dv,
                        );
                    }
                    if dq_t.is_none() && dk_t.is_none() {
                        continue;
                    }
                    ds.clear();
                    ds.resize(t.q_len * t.k_len, 0.0);
                    gemm(
                        t.q_len,
                        dvh,
                        t.k_len,
                        1.0,
                        g_view,
                        View::transposed(vv.data(), t.k_start * dv + h * dvh, dv),
                        0.0,
                        &mut ds,
                        0,
                        t.k_len,
                    );
                    for r in 0..t.q_len {
                        let prow = &p[r * t.k_len..(r + 1) * t.k_len];
                        let drow = &mut ds[r * t.k_len..(r + 1) * t.k_len];
                        let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (d, pp) in drow.iter_mut().zip(prow) {
                            *d = pp * (*d - dot);
                        }
                    }
                    if let Some(dqt) = dq_t.as_mut() {
                        gemm(
                            t.q_len,
                            t.k_len,
                            dh,
                            scale,
                            View::rowmajor(&ds, 0, t.k_len),
                            View::rowmajor(kv.data(), t.k_start * dq + h * dh, dq),
                            1.0,
                            dqt.data_mut(),
                            t.q_start * dq + h * dh,
                            dq,
                        );
                    }
                    if let Some(dkt) = dk_t.as_mut() {
                        gemm(
                            t.k_len,
                            t.q_len,
                            dh,
                            scale,
                            View::transposed(&ds, 0, t.k_len),
                            View::rowmajor(qv.data(), t.q_start * dq + h * dh, dq),
                            1.0,
                            dkt.data_mut(),
                            t.k_start * dq + h * dh,
                            dq,
                        );
                    }
                }
            }
            vec![dq_t, dk_t, dv_t]
        })
    }
}
