//! Minimal reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass; parameters are bound as
//! shared leaves so no weight copies happen per sample. Each op caches what
//! its vector-Jacobian product needs and nothing else.

use std::sync::Arc;

use crate::ctc;
use crate::tensor::{matmul_nt_into, matmul_tn_into, softmax_row, Tensor};

/// Named parameter tensors shared between the model, the optimizer and the
/// tapes of concurrent forward passes.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Arc<Tensor>>,
    names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.tensors.push(Arc::new(tensor));
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub by_param: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn zeros(n_params: usize) -> Self {
        Self { by_param: vec![None; n_params] }
    }

    pub fn accumulate(&mut self, other: Grads) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (slot, g) in self.by_param.iter_mut().zip(other.by_param) {
            match (slot.as_mut(), g) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, Some(b)) => *slot = Some(b),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale(s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

enum Op {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[m,n] + [1,n]` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    /// Multi-head scaled dot-product attention; weights cached per head.
    /// Masked entries are zeros in the cached weights, so backward needs no
    /// causal flag.
    Attention { q: Var, k: Var, v: Var, heads: usize, weights: Vec<Tensor> },
    Embed { table: Var, ids: Vec<u32> },
    Dropout { x: Var, mask: Vec<f64> },
    /// 1D convolution over rows with symmetric zero padding (length preserved).
    Conv1d { x: Var, w: Var, b: Var, kernel: usize },
    /// Max over row pairs, stride 2; an odd tail row passes through.
    MaxPoolPairs { x: Var, arg_rows: Vec<u32> },
    /// Per-column normalization using the rows of this input (train mode).
    BatchNormCols { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    /// Per-column normalization with frozen statistics (eval mode).
    NormColsFrozen { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    /// Label-smoothed cross entropy summed over unmasked rows.
    SmoothedCe { logits: Var, targets: Vec<u32>, mask: Vec<bool>, epsilon: f64 },
    /// CTC loss `-ln p(target | softmax(scores))`.
    CtcLoss { scores: Var, target: Vec<u32> },
}

struct Node {
    value: Value,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Shared(store.arc(id)), op: Op::Leaf { param: Some(id.0) } });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1, "bias must be a single row");
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(&b.data) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..cols {
                let xh = (row[j] - mean) * istd;
                xhat.set(i, j, xh);
                out.set(i, j, g.data[j] * xh + b.data[j]);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Scaled dot-product attention over `heads` column groups. `q` is
    /// `[m, d]`, `k` and `v` are `[n, d]`; with `causal` set, query row `i`
    /// attends only to key rows `<= i` (shapes must then satisfy m == n).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert_eq!(kv.cols, d);
        assert_eq!(vv.cols, d);
        assert_eq!(kv.rows, vv.rows);
        assert_eq!(d % heads, 0, "model dim not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (m, n) = (qv.rows, kv.rows);
        let mut out = Tensor::zeros(m, d);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut w = Tensor::zeros(m, n);
            for i in 0..m {
                let qrow = &qv.row(i)[off..off + dh];
                let wrow = w.row_mut(i);
                for j in 0..n {
                    if causal && j > i {
                        wrow[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let krow = &kv.row(j)[off..off + dh];
                    let mut acc = 0.0;
                    for (a, b) in qrow.iter().zip(krow) {
                        acc += a * b;
                    }
                    wrow[j] = acc * scale;
                }
                softmax_row(w.row_mut(i));
            }
            for i in 0..m {
                for j in 0..n {
                    let wij = w.get(i, j);
                    if wij == 0.0 {
                        continue;
                    }
                    let vrow = &vv.row(j)[off..off + dh];
                    let orow = &mut out.row_mut(i)[off..off + dh];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += wij * x;
                    }
                }
            }
            weights.push(w);
        }
        self.push(out, Op::Attention { q, k, v, heads, weights })
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id as usize));
        }
        self.push(out, Op::Embed { table, ids: ids.to_vec() })
    }

    /// Element mask of zeros and `1/(1-p)` values supplied by the caller so
    /// randomness stays under the named-stream discipline.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.data.len());
        let mut out = xv.clone();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (t_len, c_in) = xv.shape();
        assert_eq!(wv.rows, kernel * c_in);
        let c_out = wv.cols;
        assert_eq!(bv.cols, c_out);
        let pad = kernel / 2;
        let mut out = Tensor::zeros(t_len, c_out);
        for t in 0..t_len {
            out.row_mut(t).copy_from_slice(bv.row(0));
            for d in 0..kernel {
                let src = t as isize + d as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xrow = xv.row(src as usize);
                for (ci, &xval) in xrow.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    let wrow = wv.row(d * c_in + ci);
                    let orow = out.row_mut(t);
                    for j in 0..c_out {
                        orow[j] += xval * wrow[j];
                    }
                }
            }
        }
        self.push(out, Op::Conv1d { x, w, b, kernel })
    }

    pub fn max_pool_pairs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (t_len, cols) = xv.shape();
        let out_rows = t_len.div_ceil(2);
        let mut out = Tensor::zeros(out_rows, cols);
        let mut arg_rows = vec![0u32; out_rows * cols];
        for v in 0..out_rows {
            let first = 2 * v;
            let second = first + 1;
            for c in 0..cols {
                let a = xv.get(first, c);
                // Ties prefer the earlier row.
                if second < t_len && xv.get(second, c) > a {
                    out.set(v, c, xv.get(second, c));
                    arg_rows[v * cols + c] = second as u32;
                } else {
                    out.set(v, c, a);
                    arg_rows[v * cols + c] = first as u32;
                }
            }
        }
        self.push(out, Op::MaxPoolPairs { x, arg_rows })
    }

    pub fn batch_norm_cols(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<f64>, Vec<f64>) {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let (rows, cols) = xv.shape();
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for i in 0..rows {
            for (c, &v) in xv.row(i).iter().enumerate() {
                mean[c] += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        for i in 0..rows {
            for (c, &v) in xv.row(i).iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            for c in 0..cols {
                let xh = (xv.get(i, c) - mean[c]) * inv_std[c];
                xhat.set(i, c, xh);
                out.set(i, c, g.data[c] * xh + b.data[c]);
            }
        }
        let node = self.push(out, Op::BatchNormCols { x, gamma, beta, xhat, inv_std });
        (node, mean, var)
    }

    pub fn norm_cols_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
    ) -> Var {
        const EPS: f64 = 1e-5;
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + EPS).sqrt()).collect();
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let (rows, cols) = xv.shape();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            for c in 0..cols {
                out.set(i, c, g.data[c] * (xv.get(i, c) - mean[c]) * inv_std[c] + b.data[c]);
            }
        }
        self.push(out, Op::NormColsFrozen { x, gamma, beta, mean, inv_std })
    }

    /// Sum of label-smoothed cross-entropy over rows where `mask` is true.
    /// Returns the scalar node and the number of counted rows; callers
    /// normalize by seeding `backward` with `1 / tokens`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
        epsilon: f64,
    ) -> (Var, usize) {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        assert_eq!(lv.rows, mask.len());
        let vocab = lv.cols as f64;
        let mut total = 0.0;
        let mut counted = 0usize;
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            counted += 1;
            let row = lv.row(i);
            let lse = crate::tensor::log_sum_exp(row);
            let mut ce = -(1.0 - epsilon) * (row[t as usize] - lse);
            if epsilon > 0.0 {
                let sum_logp: f64 = row.iter().map(|&x| x - lse).sum();
                ce -= epsilon / vocab * sum_logp;
            }
            total += ce;
        }
        let node = self.push(
            Tensor::from_vec(1, 1, vec![total]),
            Op::SmoothedCe { logits, targets: targets.to_vec(), mask: mask.to_vec(), epsilon },
        );
        (node, counted)
    }

    /// CTC negative log-likelihood of `target` under `softmax(scores)`.
    pub fn ctc_loss(&mut self, scores: Var, target: &[u32]) -> Result<Var, crate::error::CtcError> {
        let lattice = ctc::LogProbLattice::from_scores(self.value(scores));
        let log_p = ctc::ctc_log_likelihood(&lattice, target)?;
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![-log_p]),
            Op::CtcLoss { scores, target: target.to_vec() },
        ))
    }

    /// Reverse sweep from `loss` (a `[1,1]` node), seeding its gradient with
    /// `seed`. Returns gradients for every parameter leaf reached.
    pub fn backward(&mut self, loss: Var, seed: f64, n_params: usize) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        {
            let t = self.nodes[loss.0].value.tensor();
            assert_eq!(t.shape(), (1, 1), "loss must be scalar");
        }
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![seed]));

        let mut out = Grads::zeros(n_params);
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf { param } => {
                    if let Some(p) = *param {
                        match &mut out.by_param[p] {
                            Some(acc) => acc.add_assign(&grad),
                            slot => *slot = Some(grad),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.tensor();
                    let bv = self.nodes[b.0].value.tensor();
                    let mut da = Tensor::zeros(av.rows, av.cols);
                    matmul_nt_into(&grad, bv, &mut da);
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    matmul_tn_into(av, &grad, &mut db);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, grad.clone());
                    accumulate(&mut grads, b, grad);
                }
                Op::AddRow(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    let mut db = Tensor::zeros(1, grad.cols);
                    for i in 0..grad.rows {
                        for (acc, g) in db.data.iter_mut().zip(grad.row(i)) {
                            *acc += g;
                        }
                    }
                    accumulate(&mut grads, a, grad);
                    accumulate(&mut grads, bias, db);
                }
                Op::Scale(a, s) => {
                    let (a, s) = (*a, *s);
                    let mut g = grad;
                    g.scale(s);
                    accumulate(&mut grads, a, g);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let av = self.nodes[a.0].value.tensor();
                    let mut g = grad;
                    for (gv, &xv) in g.data.iter_mut().zip(&av.data) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, a, g);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let g = self.nodes[gamma.0].value.tensor().clone();
                    let (rows, cols) = xhat.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    for i in 0..rows {
                        let gr = grad.row(i);
                        let xh = xhat.row(i);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let dxh = gr[j] * g.data[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[j];
                            dgamma.data[j] += gr[j] * xh[j];
                            dbeta.data[j] += gr[j];
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        let istd = inv_std[i];
                        let dxrow = dx.row_mut(i);
                        for j in 0..cols {
                            let dxh = gr[j] * g.data[j];
                            dxrow[j] = istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, gamma, dgamma);
                    accumulate(&mut grads, beta, dbeta);
                }
                Op::Attention { q, k, v, heads, weights } => {
                    let (q, k, v, heads) = (*q, *k, *v, *heads);
                    let qv = self.nodes[q.0].value.tensor();
                    let kv = self.nodes[k.0].value.tensor();
                    let vv = self.nodes[v.0].value.tensor();
                    let d = qv.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (m, n) = (qv.rows, kv.rows);
                    let mut dq = Tensor::zeros(m, d);
                    let mut dk = Tensor::zeros(n, d);
                    let mut dv = Tensor::zeros(n, d);
                    for (h, w) in weights.iter().enumerate() {
                        let off = h * dh;
                        // dV_h += W^T dO_h ; dW = dO_h V_h^T
                        let mut dw = Tensor::zeros(m, n);
                        for i in 0..m {
                            let go = &grad.row(i)[off..off + dh];
                            for j in 0..n {
                                let wij = w.get(i, j);
                                let vrow = &vv.row(j)[off..off + dh];
                                let mut acc = 0.0;
                                for (a, b) in go.iter().zip(vrow) {
                                    acc += a * b;
                                }
                                dw.set(i, j, acc);
                                if wij != 0.0 {
                                    let dvrow = &mut dv.row_mut(j)[off..off + dh];
                                    for (o, g) in dvrow.iter_mut().zip(go) {
                                        *o += wij * g;
                                    }
                                }
                            }
                        }
                        // Softmax backward per row, then into Q and K.
                        for i in 0..m {
                            let wrow = w.row(i);
                            let dwrow = dw.row(i);
                            let dot: f64 = wrow.iter().zip(dwrow).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                let ds = wrow[j] * (dwrow[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &kv.row(j)[off..off + dh];
                                let qrow = &qv.row(i)[off..off + dh];
                                let dqrow = &mut dq.row_mut(i)[off..off + dh];
                                for (o, kx) in dqrow.iter_mut().zip(krow) {
                                    *o += ds * kx;
                                }
                                let dkrow = &mut dk.row_mut(j)[off..off + dh];
                                for (o, qx) in dkrow.iter_mut().zip(qrow) {
                                    *o += ds * qx;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, q, dq);
                    accumulate(&mut grads, k, dk);
                    accumulate(&mut grads, v, dv);
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    let tv = self.nodes[table.0].value.tensor();
                    let mut dt = Tensor::zeros(tv.rows, tv.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = dt.row_mut(id as usize);
                        for (o, g) in dst.iter_mut().zip(grad.row(i)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, table, dt);
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let mut g = grad;
                    for (gv, m) in g.data.iter_mut().zip(mask) {
                        *gv *= m;
                    }
                    accumulate(&mut grads, x, g);
                }
                Op::Conv1d { x, w, b, kernel } => {
                    let (x, w, b, kernel) = (*x, *w, *b, *kernel);
                    let xv = self.nodes[x.0].value.tensor();
                    let wv = self.nodes[w.0].value.tensor();
                    let (t_len, c_in) = xv.shape();
                    let c_out = wv.cols;
                    let pad = kernel / 2;
                    let mut dx = Tensor::zeros(t_len, c_in);
                    let mut dw = Tensor::zeros(kernel * c_in, c_out);
                    let mut db = Tensor::zeros(1, c_out);
                    for t in 0..t_len {
                        let go = grad.row(t);
                        for (acc, g) in db.data.iter_mut().zip(go) {
                            *acc += g;
                        }
                        for d in 0..kernel {
                            let src = t as isize + d as isize - pad as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            let xrow = xv.row(src);
                            for ci in 0..c_in {
                                let wrow = wv.row(d * c_in + ci);
                                let mut acc = 0.0;
                                for (g, wx) in go.iter().zip(wrow) {
                                    acc += g * wx;
                                }
                                dx.data[src * c_in + ci] += acc;
                                let xval = xrow[ci];
                                if xval != 0.0 {
                                    let dwrow = dw.row_mut(d * c_in + ci);
                                    for (o, g) in dwrow.iter_mut().zip(go) {
                                        *o += xval * g;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                    accumulate(&mut grads, b, db);
                }
                Op::MaxPoolPairs { x, arg_rows } => {
                    let x = *x;
                    let xv = self.nodes[x.0].value.tensor();
                    let cols = xv.cols;
                    let mut dx = Tensor::zeros(xv.rows, cols);
                    for v in 0..grad.rows {
                        for c in 0..cols {
                            let src = arg_rows[v * cols + c] as usize;
                            dx.data[src * cols + c] += grad.get(v, c);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::BatchNormCols { x, gamma, beta, xhat, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let g = self.nodes[gamma.0].value.tensor().clone();
                    let (rows, cols) = xhat.shape();
                    let rn = rows as f64;
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    for c in 0..cols {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..rows {
                            let dxh = grad.get(i, c) * g.data[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat.get(i, c);
                            dgamma.data[c] += grad.get(i, c) * xhat.get(i, c);
                            dbeta.data[c] += grad.get(i, c);
                        }
                        for i in 0..rows {
                            let dxh = grad.get(i, c) * g.data[c];
                            let val = inv_std[c] / rn
                                * (rn * dxh - sum_dxhat - xhat.get(i, c) * sum_dxhat_xhat);
                            dx.set(i, c, val);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, gamma, dgamma);
                    accumulate(&mut grads, beta, dbeta);
                }
                Op::NormColsFrozen { x, gamma, beta, mean, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xv = self.nodes[x.0].value.tensor();
                    let g = self.nodes[gamma.0].value.tensor().clone();
                    let (rows, cols) = grad.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    for i in 0..rows {
                        for c in 0..cols {
                            let go = grad.get(i, c);
                            dx.set(i, c, go * g.data[c] * inv_std[c]);
                            dgamma.data[c] += go * (xv.get(i, c) - mean[c]) * inv_std[c];
                            dbeta.data[c] += go;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, gamma, dgamma);
                    accumulate(&mut grads, beta, dbeta);
                }
                Op::SmoothedCe { logits, targets, mask, epsilon } => {
                    let logits = *logits;
                    let lv = self.nodes[logits.0].value.tensor();
                    let (rows, vocab) = lv.shape();
                    let seedv = grad.data[0];
                    let mut dl = Tensor::zeros(rows, vocab);
                    for i in 0..rows {
                        if !mask[i] {
                            continue;
                        }
                        let mut p: Vec<f64> = lv.row(i).to_vec();
                        softmax_row(&mut p);
                        let dst = dl.row_mut(i);
                        let uniform = epsilon / vocab as f64;
                        for j in 0..vocab {
                            let q = uniform + if j == targets[i] as usize { 1.0 - epsilon } else { 0.0 };
                            dst[j] = seedv * (p[j] - q);
                        }
                    }
                    accumulate(&mut grads, logits, dl);
                }
                Op::CtcLoss { scores, target } => {
                    let scores = *scores;
                    let sv = self.nodes[scores.0].value.tensor();
                    let lattice = ctc::LogProbLattice::from_scores(sv);
                    let mut dscores =
                        ctc::ctc_gradient(&lattice, target).expect("feasibility checked in forward");
                    dscores.scale(grad.data[0]);
                    accumulate(&mut grads, scores, dscores);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    /// Finite-difference check of `loss_fn` over every parameter in `store`.
    fn check_grads(
        store: &mut ParamStore,
        loss_fn: &dyn Fn(&ParamStore) -> f64,
        analytic: &Grads,
        tol: f64,
    ) {
        let eps = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let len = store.get(id).data.len();
            for i in 0..len {
                let orig = store.get(id).data[i];
                store.get_mut(id).data[i] = orig + eps;
                let up = loss_fn(store);
                store.get_mut(id).data[i] = orig - eps;
                let down = loss_fn(store);
                store.get_mut(id).data[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let a = analytic.by_param[id.0].as_ref().map_or(0.0, |g| g.data[i]);
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "param {} [{}]: analytic {} vs fd {}",
                    store.name(id),
                    i,
                    a,
                    fd
                );
            }
        }
    }

    fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        let mut t = Tensor::zeros(rows, cols);
        for v in &mut t.data {
            *v = rng.gen_range(-0.9..0.9);
        }
        t
    }

    #[test]
    fn composite_network_matches_finite_differences() {
        // One pass through most ops: embed -> matmul+bias -> layernorm ->
        // attention -> relu -> smoothed CE.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let d = 6;
        let vocab = 5;
        let table = store.add("table", rand_tensor(&mut rng, vocab, d));
        let wq = store.add("wq", rand_tensor(&mut rng, d, d));
        let wk = store.add("wk", rand_tensor(&mut rng, d, d));
        let wv = store.add("wv", rand_tensor(&mut rng, d, d));
        let bias = store.add("bias", rand_tensor(&mut rng, 1, d));
        let gamma = store.add("gamma", Tensor::filled(1, d, 1.0));
        let beta = store.add("beta", Tensor::zeros(1, d));
        let wout = store.add("wout", rand_tensor(&mut rng, d, vocab));

        let ids = [1u32, 3, 0, 2];
        let targets = [3u32, 0, 1, 2];
        let mask = [true, true, false, true];

        let run = |store: &ParamStore| -> (Tape, Var, usize) {
            let mut tape = Tape::new();
            let tb = tape.param(store, table);
            let x = tape.embed(tb, &ids);
            let q = {
                let w = tape.param(store, wq);
                tape.matmul(x, w)
            };
            let k = {
                let w = tape.param(store, wk);
                tape.matmul(x, w)
            };
            let v = {
                let w = tape.param(store, wv);
                tape.matmul(x, w)
            };
            let att = tape.attention(q, k, v, 2, true);
            let b = tape.param(store, bias);
            let att = tape.add_row(att, b);
            let g = tape.param(store, gamma);
            let be = tape.param(store, beta);
            let normed = tape.layer_norm(att, g, be);
            let act = tape.relu(normed);
            let w = tape.param(store, wout);
            let logits = tape.matmul(act, w);
            let (loss, n) = tape.smoothed_cross_entropy(logits, &targets, &mask, 0.1);
            (tape, loss, n)
        };

        let (mut tape, loss, n_tokens) = run(&store);
        assert_eq!(n_tokens, 3);
        let grads = tape.backward(loss, 1.0 / n_tokens as f64, store.len());

        let loss_fn = |s: &ParamStore| {
            let (tape, loss, n) = run(s);
            tape.value(loss).data[0] / n as f64
        };
        check_grads(&mut store, &loss_fn, &grads, 1e-5);
    }

    #[test]
    fn conv_pool_batchnorm_ctc_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let c_in = 3;
        let c_hidden = 4;
        let classes = 2; // plus blank
        let conv_w = store.add("conv_w", rand_tensor(&mut rng, 3 * c_in, c_hidden));
        let conv_b = store.add("conv_b", rand_tensor(&mut rng, 1, c_hidden));
        let bn_g = store.add("bn_g", Tensor::filled(1, c_hidden, 1.0));
        let bn_b = store.add("bn_b", Tensor::zeros(1, c_hidden));
        let cls_w = store.add("cls_w", rand_tensor(&mut rng, c_hidden, classes + 1));
        let cls_b = store.add("cls_b", rand_tensor(&mut rng, 1, classes + 1));

        let frames = rand_tensor(&mut rng, 7, c_in);
        let target = [0u32, 1];

        let run = |store: &ParamStore| -> (Tape, Var) {
            let mut tape = Tape::new();
            let x = tape.input(frames.clone());
            let w = tape.param(store, conv_w);
            let b = tape.param(store, conv_b);
            let conv = tape.conv1d_same(x, w, b, 3);
            let g = tape.param(store, bn_g);
            let be = tape.param(store, bn_b);
            let (bn, _, _) = tape.batch_norm_cols(conv, g, be);
            let act = tape.relu(bn);
            let pooled = tape.max_pool_pairs(act);
            let w = tape.param(store, cls_w);
            let b = tape.param(store, cls_b);
            let scores = tape.matmul(pooled, w);
            let scores = tape.add_row(scores, b);
            let loss = tape.ctc_loss(scores, &target).unwrap();
            (tape, loss)
        };

        let (mut tape, loss) = run(&store);
        let grads = tape.backward(loss, 1.0, store.len());
        let loss_fn = |s: &ParamStore| {
            let (tape, loss) = run(s);
            tape.value(loss).data[0]
        };
        // Max-pool argmax switches make FD slightly noisier.
        check_grads(&mut store, &loss_fn, &grads, 1e-4);
    }

    #[test]
    fn frozen_norm_and_dropout_backward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, 4, 4));
        let g = store.add("g", Tensor::filled(1, 4, 1.3));
        let b = store.add("b", rand_tensor(&mut rng, 1, 4));
        let x = rand_tensor(&mut rng, 3, 4);
        let mask: Vec<f64> =
            (0..12).map(|_| if rng.gen_bool(0.8) { 1.0 / 0.8 } else { 0.0 }).collect();
        let mean = vec![0.1, -0.2, 0.3, 0.0];
        let var = vec![1.0, 0.5, 2.0, 1.5];

        let run = |store: &ParamStore| -> (Tape, Var, usize) {
            let mut tape = Tape::new();
            let xin = tape.input(x.clone());
            let wv = tape.param(store, w);
            let h = tape.matmul(xin, wv);
            let gv = tape.param(store, g);
            let bv = tape.param(store, b);
            let n = tape.norm_cols_frozen(h, gv, bv, mean.clone(), var.clone());
            let dropped = tape.dropout(n, mask.clone());
            let (loss, count) = tape.smoothed_cross_entropy(dropped, &[1, 2, 0], &[true; 3], 0.0);
            (tape, loss, count)
        };
        let (mut tape, loss, count) = run(&store);
        let grads = tape.backward(loss, 1.0 / count as f64, store.len());
        let loss_fn =
            |s: &ParamStore| -> f64 { let (t, l, c) = run(s); t.value(l).data[0] / c as f64 };
        check_grads(&mut store, &loss_fn, &grads, 1e-5);
    }
}
