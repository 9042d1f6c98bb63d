use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::crf::raw as crf_raw;
use crate::error::{Error, Result};

use super::{raw, Precision, Tensor, TapeRef};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// One recorded operation. Input fields are node indices on the same tape.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRowVec { a: usize, v: usize },
    Scale { x: usize, c: f64 },
    Tanh { x: usize },
    Sigmoid { x: usize },
    SoftmaxRows { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    SumAll { x: usize },
    Rows { table: usize, indices: Vec<usize> },
    Unfold { x: usize, width: usize },
    MaxRows { x: usize },
    CrfNll {
        emissions: usize,
        transitions: usize,
        start: usize,
        end: usize,
        labels: Vec<usize>,
    },
    /// Test-only op with a deliberately wrong derivative, used as the
    /// gradient-check negative control.
    #[cfg(test)]
    BadTanh { x: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in execution order, so append order is a valid
/// topological order and the backward sweep is a single reverse pass that
/// visits each node exactly once. A tape is single-threaded and lives for
/// one forward/backward round; parameters are re-watched on the next tape.
pub struct Tape {
    id: u64,
    precision: Precision,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(precision: Precision) -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a learnable leaf. The returned tensor participates in ops on
    /// this tape and its gradient is retrievable after `backward`.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        let mut data = t.data().to_vec();
        self.precision.quantize(&mut data);
        self.push_leaf(t.shape().to_vec(), data, true)
    }

    /// Register a non-learnable leaf (gradient is not propagated into it).
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        let mut data = t.data().to_vec();
        self.precision.quantize(&mut data);
        self.push_leaf(t.shape().to_vec(), data, false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        let node = self.nodes.len();
        let value = Tensor {
            shape,
            data: Arc::new(data),
            requires_grad,
            node: Some(TapeRef { tape: self.id, node }),
        };
        self.nodes.push(Node {
            op: Op::Leaf,
            value: value.clone(),
            needs_grad: requires_grad,
        });
        value
    }

    /// Resolve a tensor to a node id, registering untracked constants on the
    /// fly. Tensors marked `requires_grad` must have been watched explicitly;
    /// silently re-registering them would split their gradient.
    fn intern(&mut self, t: &Tensor) -> Result<usize> {
        match t.node {
            Some(r) => {
                if r.tape != self.id {
                    return Err(Error::Contract(
                        "tensor belongs to a different tape".to_string(),
                    ));
                }
                Ok(r.node)
            }
            None if t.requires_grad() => Err(Error::Contract(
                "requires_grad tensor must be registered with Tape::watch before use".to_string(),
            )),
            None => Ok(self.constant(t).node.unwrap().node),
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, mut data: Vec<f64>, what: &str) -> Result<Tensor> {
        self.precision.quantize(&mut data);
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what} produced a non-finite value"
            )));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                self.needs(&[*a, *b])
            }
            Op::AddRowVec { a, v } => self.needs(&[*a, *v]),
            Op::Scale { x, .. }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::SoftmaxRows { x }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::SumAll { x }
            | Op::Unfold { x, .. }
            | Op::MaxRows { x } => self.needs(&[*x]),
            Op::Concat { xs, .. } => self.needs(xs),
            Op::Rows { table, .. } => self.needs(&[*table]),
            Op::CrfNll {
                emissions,
                transitions,
                start,
                end,
                ..
            } => self.needs(&[*emissions, *transitions, *start, *end]),
            #[cfg(test)]
            Op::BadTanh { x } => self.needs(&[*x]),
        };
        let node = self.nodes.len();
        let value = Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: Some(TapeRef { tape: self.id, node }),
        };
        self.nodes.push(Node {
            op,
            value: value.clone(),
            needs_grad,
        });
        Ok(value)
    }

    fn value(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// Matrix product of `a: m x k` and `b: k x n`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = a.dims2()?;
        let (kb, n) = b.dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let a_id = self.intern(a)?;
        let b_id = self.intern(b)?;
        let data = raw::matmul(self.value(a_id).data(), self.value(b_id).data(), m, ka, n);
        self.push(Op::Matmul { a: a_id, b: b_id }, vec![m, n], data, "matmul")
    }

    fn zip_same_shape(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        what: &str,
    ) -> Result<(usize, usize)> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let a_id = self.intern(a)?;
        let b_id = self.intern(b)?;
        Ok((a_id, b_id))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (a_id, b_id) = self.zip_same_shape(a, b, "add")?;
        let data = self
            .value(a_id)
            .data()
            .iter()
            .zip(self.value(b_id).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add { a: a_id, b: b_id }, a.shape().to_vec(), data, "add")
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (a_id, b_id) = self.zip_same_shape(a, b, "sub")?;
        let data = self
            .value(a_id)
            .data()
            .iter()
            .zip(self.value(b_id).data())
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub { a: a_id, b: b_id }, a.shape().to_vec(), data, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (a_id, b_id) = self.zip_same_shape(a, b, "mul")?;
        let data = self
            .value(a_id)
            .data()
            .iter()
            .zip(self.value(b_id).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul { a: a_id, b: b_id }, a.shape().to_vec(), data, "mul")
    }

    /// Broadcast-add a vector across the rows of a matrix: `a[i][j] + v[j]`.
    /// `v` may be rank-1 `[n]` or a single row `[1, n]`.
    pub fn add_row_vec(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        let vn = match v.shape() {
            [k] => *k,
            [1, k] => *k,
            other => {
                return Err(Error::Dimension(format!(
                    "add_row_vec needs a vector, got shape {other:?}"
                )))
            }
        };
        if vn != n {
            return Err(Error::Dimension(format!(
                "add_row_vec width mismatch: matrix {:?} vs vector {:?}",
                a.shape(),
                v.shape()
            )));
        }
        let a_id = self.intern(a)?;
        let v_id = self.intern(v)?;
        let vd = self.value(v_id).data().to_vec();
        let data = self
            .value(a_id)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vd[i % n])
            .collect();
        let _ = m;
        self.push(
            Op::AddRowVec { a: a_id, v: v_id },
            a.shape().to_vec(),
            data,
            "add_row_vec",
        )
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let x_id = self.intern(x)?;
        let data = self.value(x_id).data().iter().map(|v| v * c).collect();
        self.push(Op::Scale { x: x_id, c }, x.shape().to_vec(), data, "scale")
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let x_id = self.intern(x)?;
        let data = self.value(x_id).data().iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh { x: x_id }, x.shape().to_vec(), data, "tanh")
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let x_id = self.intern(x)?;
        let data = self
            .value(x_id)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(Op::Sigmoid { x: x_id }, x.shape().to_vec(), data, "sigmoid")
    }

    /// Row-wise softmax of a rank-2 tensor, computed with max-subtraction.
    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        let x_id = self.intern(x)?;
        let data = raw::softmax_rows(self.value(x_id).data(), r, c);
        self.push(Op::SoftmaxRows { x: x_id }, vec![r, c], data, "softmax_rows")
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(Error::Contract("concat needs at least one tensor".into()));
        }
        if axis > 1 {
            return Err(Error::Dimension(format!("concat axis must be 0 or 1, got {axis}")));
        }
        let dims: Vec<(usize, usize)> = tensors
            .iter()
            .map(|t| t.dims2())
            .collect::<Result<_>>()?;
        let fixed_axis = 1 - axis;
        let fixed = |d: &(usize, usize)| if fixed_axis == 0 { d.0 } else { d.1 };
        if dims.iter().any(|d| fixed(d) != fixed(&dims[0])) {
            let shapes: Vec<&[usize]> = tensors.iter().map(|t| t.shape()).collect();
            return Err(Error::Dimension(format!(
                "concat along axis {axis} needs equal off-axis extents, got {shapes:?}"
            )));
        }
        let ids: Vec<usize> = tensors
            .iter()
            .map(|t| self.intern(t))
            .collect::<Result<_>>()?;
        let (out_r, out_c) = if axis == 0 {
            (dims.iter().map(|d| d.0).sum(), dims[0].1)
        } else {
            (dims[0].0, dims.iter().map(|d| d.1).sum())
        };
        let mut data = vec![0.0; out_r * out_c];
        if axis == 0 {
            let mut off = 0;
            for &id in &ids {
                let v = self.value(id);
                data[off..off + v.numel()].copy_from_slice(v.data());
                off += v.numel();
            }
        } else {
            let mut col_off = 0;
            for (&id, d) in ids.iter().zip(&dims) {
                let v = self.value(id).data();
                for i in 0..out_r {
                    data[i * out_c + col_off..i * out_c + col_off + d.1]
                        .copy_from_slice(&v[i * d.1..(i + 1) * d.1]);
                }
                col_off += d.1;
            }
        }
        self.push(Op::Concat { xs: ids, axis }, vec![out_r, out_c], data, "concat")
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        let x_id = self.intern(x)?;
        let data = raw::transpose(self.value(x_id).data(), r, c);
        self.push(Op::Transpose { x: x_id }, vec![c, r], data, "transpose")
    }

    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                x.shape()
            )));
        }
        let x_id = self.intern(x)?;
        let data = self.value(x_id).data().to_vec();
        self.push(Op::Reshape { x: x_id }, shape, data, "reshape")
    }

    /// Sum of all entries, returned as a `[1]` scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let x_id = self.intern(x)?;
        let s: f64 = self.value(x_id).data().iter().sum();
        self.push(Op::SumAll { x: x_id }, vec![1], vec![s], "sum_all")
    }

    /// Gather rows of a rank-2 table. Gradient scatter-adds back into the
    /// table, so repeated indices accumulate.
    pub fn rows(&mut self, table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = table.dims2()?;
        if indices.is_empty() {
            return Err(Error::Contract("rows() needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for table with {r} rows"
            )));
        }
        let t_id = self.intern(table)?;
        let td = self.value(t_id).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        self.push(
            Op::Rows {
                table: t_id,
                indices: indices.to_vec(),
            },
            vec![indices.len(), c],
            data,
            "rows",
        )
    }

    /// Sliding windows over the rows of `x: m x d`: row `i` of the result is
    /// the concatenation of rows `i..i+width`, giving `(m-width+1) x width*d`.
    pub fn unfold(&mut self, x: &Tensor, width: usize) -> Result<Tensor> {
        let (m, d) = x.dims2()?;
        if width == 0 || width > m {
            return Err(Error::Dimension(format!(
                "unfold width {width} invalid for {m} rows"
            )));
        }
        let x_id = self.intern(x)?;
        let xd = self.value(x_id).data();
        let out_rows = m - width + 1;
        let mut data = Vec::with_capacity(out_rows * width * d);
        for i in 0..out_rows {
            data.extend_from_slice(&xd[i * d..(i + width) * d]);
        }
        self.push(
            Op::Unfold { x: x_id, width },
            vec![out_rows, width * d],
            data,
            "unfold",
        )
    }

    /// Columnwise maximum over rows: `m x n -> 1 x n`. Ties route the
    /// gradient to the lowest row index.
    pub fn max_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2()?;
        let x_id = self.intern(x)?;
        let xd = self.value(x_id).data();
        let mut data = vec![f64::NEG_INFINITY; n];
        for i in 0..m {
            for j in 0..n {
                let v = xd[i * n + j];
                if v > data[j] {
                    data[j] = v;
                }
            }
        }
        self.push(Op::MaxRows { x: x_id }, vec![1, n], data, "max_rows")
    }

    /// Negative log-likelihood of a label path under a linear-chain CRF:
    /// `logZ - score(path)`, with the partition function computed by the
    /// log-space forward algorithm. Gradients are the classic marginal
    /// minus indicator terms from the forward-backward recursion.
    pub fn crf_nll(
        &mut self,
        emissions: &Tensor,
        transitions: &Tensor,
        start: &Tensor,
        end: &Tensor,
        labels: &[usize],
    ) -> Result<Tensor> {
        let (len, n_labels) = emissions.dims2()?;
        let (tr, tc) = transitions.dims2()?;
        if tr != n_labels || tc != n_labels {
            return Err(Error::Dimension(format!(
                "transition matrix {:?} does not match {n_labels} labels",
                transitions.shape()
            )));
        }
        if start.numel() != n_labels || end.numel() != n_labels {
            return Err(Error::Dimension(
                "start/end score lengths must equal the label count".to_string(),
            ));
        }
        if labels.len() != len {
            return Err(Error::Contract(format!(
                "label path length {} does not match {len} emission rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_labels) {
            return Err(Error::Contract(format!(
                "label ordinal {bad} out of range for {n_labels} labels"
            )));
        }
        let em_id = self.intern(emissions)?;
        let tr_id = self.intern(transitions)?;
        let st_id = self.intern(start)?;
        let en_id = self.intern(end)?;
        let log_z = crf_raw::log_partition(
            self.value(em_id).data(),
            self.value(tr_id).data(),
            self.value(st_id).data(),
            self.value(en_id).data(),
            len,
            n_labels,
        );
        let score = crf_raw::path_score(
            self.value(em_id).data(),
            self.value(tr_id).data(),
            self.value(st_id).data(),
            self.value(en_id).data(),
            labels,
        );
        self.push(
            Op::CrfNll {
                emissions: em_id,
                transitions: tr_id,
                start: st_id,
                end: en_id,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![log_z - score],
            "crf_nll",
        )
    }

    /// tanh with a corrupted backward rule (test-only negative control).
    #[cfg(test)]
    pub fn bad_tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let x_id = self.intern(x)?;
        let data = self.value(x_id).data().iter().map(|v| v.tanh()).collect();
        self.push(Op::BadTanh { x: x_id }, x.shape().to_vec(), data, "bad_tanh")
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns the gradient of the loss
    /// with respect to every node; unreached leaves read back as zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_ref = loss.node.ok_or_else(|| {
            Error::Contract("loss tensor is not on a tape".to_string())
        })?;
        if loss_ref.tape != self.id {
            return Err(Error::Contract(
                "loss tensor belongs to a different tape".to_string(),
            ));
        }
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_ref.node] = Some(vec![1.0]);

        for id in (0..=loss_ref.node).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad && !matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            self.backward_node(id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }

        let gradients = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[id].value.shape().to_vec(),
                    data: Arc::new(data),
                    requires_grad: false,
                    node: None,
                })
            })
            .collect();
        Ok(Gradients {
            tape_id: self.id,
            grads: gradients,
        })
    }

    fn backward_node(
        &self,
        id: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let add_to = |grads: &mut [Option<Vec<f64>>], target: usize, contrib: &[f64]| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                None => grads[target] = Some(contrib.to_vec()),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.nodes[*a].needs_grad {
                    let bt = raw::transpose(self.value(*b).data(), k, n);
                    let da = raw::matmul(gout, &bt, m, n, k);
                    add_to(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let at = raw::transpose(self.value(*a).data(), m, k);
                    let db = raw::matmul(&at, gout, k, m, n);
                    add_to(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                add_to(grads, *a, gout);
                add_to(grads, *b, gout);
            }
            Op::Sub { a, b } => {
                add_to(grads, *a, gout);
                if self.nodes[*b].needs_grad {
                    let neg: Vec<f64> = gout.iter().map(|v| -v).collect();
                    add_to(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f64> = gout
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    add_to(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<f64> = gout
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    add_to(grads, *b, &db);
                }
            }
            Op::AddRowVec { a, v } => {
                add_to(grads, *a, gout);
                if self.nodes[*v].needs_grad {
                    let n = self.value(*v).numel();
                    let mut dv = vec![0.0; n];
                    for (i, g) in gout.iter().enumerate() {
                        dv[i % n] += g;
                    }
                    add_to(grads, *v, &dv);
                }
            }
            Op::Scale { x, c } => {
                if self.nodes[*x].needs_grad {
                    let dx: Vec<f64> = gout.iter().map(|g| g * c).collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Tanh { x } => {
                if self.nodes[*x].needs_grad {
                    let y = self.nodes[id].value.data();
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(y)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.nodes[*x].needs_grad {
                    let y = self.nodes[id].value.data();
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(y)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::SoftmaxRows { x } => {
                if self.nodes[*x].needs_grad {
                    let y = self.nodes[id].value.data();
                    let (r, c) = self.nodes[id].value.dims2()?;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &gout[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_to(grads, *x, &dx);
                }
            }
            Op::Concat { xs, axis } => {
                let (out_r, out_c) = self.nodes[id].value.dims2()?;
                if *axis == 0 {
                    let mut off = 0;
                    for &xid in xs {
                        let n = self.value(xid).numel();
                        add_to(grads, xid, &gout[off..off + n]);
                        off += n;
                    }
                    let _ = out_r;
                } else {
                    let mut col_off = 0;
                    for &xid in xs {
                        let (r, c) = self.value(xid).dims2()?;
                        if self.nodes[xid].needs_grad {
                            let mut dx = vec![0.0; r * c];
                            for i in 0..r {
                                dx[i * c..(i + 1) * c].copy_from_slice(
                                    &gout[i * out_c + col_off..i * out_c + col_off + c],
                                );
                            }
                            add_to(grads, xid, &dx);
                        }
                        col_off += c;
                    }
                }
            }
            Op::Transpose { x } => {
                if self.nodes[*x].needs_grad {
                    let (r, c) = self.nodes[id].value.dims2()?;
                    let dx = raw::transpose(gout, r, c);
                    add_to(grads, *x, &dx);
                }
            }
            Op::Reshape { x } => {
                add_to(grads, *x, gout);
            }
            Op::SumAll { x } => {
                if self.nodes[*x].needs_grad {
                    let dx = vec![gout[0]; self.value(*x).numel()];
                    add_to(grads, *x, &dx);
                }
            }
            Op::Rows { table, indices } => {
                if self.nodes[*table].needs_grad {
                    let (r, c) = self.value(*table).dims2()?;
                    let mut dt = vec![0.0; r * c];
                    for (pos, &row) in indices.iter().enumerate() {
                        for j in 0..c {
                            dt[row * c + j] += gout[pos * c + j];
                        }
                    }
                    add_to(grads, *table, &dt);
                }
            }
            Op::Unfold { x, width } => {
                if self.nodes[*x].needs_grad {
                    let (m, d) = self.value(*x).dims2()?;
                    let out_rows = m - width + 1;
                    let mut dx = vec![0.0; m * d];
                    for i in 0..out_rows {
                        for t in 0..*width {
                            for j in 0..d {
                                dx[(i + t) * d + j] += gout[i * width * d + t * d + j];
                            }
                        }
                    }
                    add_to(grads, *x, &dx);
                }
            }
            Op::MaxRows { x } => {
                if self.nodes[*x].needs_grad {
                    let (m, n) = self.value(*x).dims2()?;
                    let xd = self.value(*x).data();
                    let mut dx = vec![0.0; m * n];
                    for j in 0..n {
                        let mut best = 0;
                        for i in 1..m {
                            if xd[i * n + j] > xd[best * n + j] {
                                best = i;
                            }
                        }
                        dx[best * n + j] = gout[j];
                    }
                    add_to(grads, *x, &dx);
                }
            }
            Op::CrfNll {
                emissions,
                transitions,
                start,
                end,
                labels,
            } => {
                let (len, n_labels) = self.value(*emissions).dims2()?;
                let post = crf_raw::posteriors(
                    self.value(*emissions).data(),
                    self.value(*transitions).data(),
                    self.value(*start).data(),
                    self.value(*end).data(),
                    len,
                    n_labels,
                );
                let g = gout[0];
                if self.nodes[*emissions].needs_grad {
                    let mut dem = post.unary.clone();
                    for (t, &y) in labels.iter().enumerate() {
                        dem[t * n_labels + y] -= 1.0;
                    }
                    for v in dem.iter_mut() {
                        *v *= g;
                    }
                    add_to(grads, *emissions, &dem);
                }
                if self.nodes[*transitions].needs_grad {
                    let mut dtr = vec![0.0; n_labels * n_labels];
                    for t in 0..len.saturating_sub(1) {
                        let pw = &post.pairwise[t * n_labels * n_labels..(t + 1) * n_labels * n_labels];
                        for (d, p) in dtr.iter_mut().zip(pw) {
                            *d += p;
                        }
                        dtr[labels[t] * n_labels + labels[t + 1]] -= 1.0;
                    }
                    for v in dtr.iter_mut() {
                        *v *= g;
                    }
                    add_to(grads, *transitions, &dtr);
                }
                if self.nodes[*start].needs_grad {
                    let mut dst = post.unary[0..n_labels].to_vec();
                    dst[labels[0]] -= 1.0;
                    for v in dst.iter_mut() {
                        *v *= g;
                    }
                    add_to(grads, *start, &dst);
                }
                if self.nodes[*end].needs_grad {
                    let mut den = post.unary[(len - 1) * n_labels..len * n_labels].to_vec();
                    den[labels[len - 1]] -= 1.0;
                    for v in den.iter_mut() {
                        *v *= g;
                    }
                    add_to(grads, *end, &den);
                }
            }
            #[cfg(test)]
            Op::BadTanh { x } => {
                if self.nodes[*x].needs_grad {
                    let y = self.nodes[id].value.data();
                    // wrong on purpose: uses 1 - y instead of 1 - y^2
                    let dx: Vec<f64> = gout.iter().zip(y).map(|(g, t)| g * (1.0 - t)).collect();
                    add_to(grads, *x, &dx);
                }
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`. Leaves the loss never
    /// reached read back as zeros.
    pub fn for_tensor(&self, t: &Tensor) -> Result<Tensor> {
        let r = t
            .node
            .ok_or_else(|| Error::Contract("tensor is not on a tape".to_string()))?;
        if r.tape != self.tape_id {
            return Err(Error::Contract(
                "tensor belongs to a different tape".to_string(),
            ));
        }
        Ok(match &self.grads[r.node] {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape().to_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let mut tape = Tape::new(Precision::F64);
        let eye = t2(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let x = t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let y = tape.matmul(&eye, &x).unwrap();
        assert_eq!(y.data(), x.data());

        let a = t2(&[vec![1.0, 2.0]]);
        let b = t2(&[vec![3.0], vec![4.0]]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new(Precision::F64);
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.watch(&Tensor::scalar(0.0).unwrap().with_grad());
        let y = tape.tanh(&x).unwrap();
        assert_eq!(y.item().unwrap(), 0.0);
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap().item().unwrap(), 1.0);

        let s = tape.sigmoid(&x).unwrap();
        assert_eq!(s.item().unwrap(), 0.5);
    }

    #[test]
    fn softmax_rows_examples() {
        let mut tape = Tape::new(Precision::F64);
        let x = Tensor::row(vec![0.0, 0.0]).unwrap();
        let y = tape.softmax_rows(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let x = Tensor::row(vec![2.0f64.ln(), 0.0]).unwrap();
        let y = tape.softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = Tensor::row(vec![1000.0, 1000.0, 1000.0]).unwrap();
        let y = tape.softmax_rows(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new(Precision::F64);
        let a = t2(&[vec![1.0, 2.0]]);
        let same = tape.concat(&[&a], 1).unwrap();
        assert_eq!(same.shape(), &[1, 2]);
        assert_eq!(same.data(), a.data());

        let x = Tensor::zeros(vec![2, 3]);
        let y = Tensor::zeros(vec![2, 5]);
        let z = tape.concat(&[&x, &y], 1).unwrap();
        assert_eq!(z.shape(), &[2, 8]);

        let bad = tape.concat(&[&x, &Tensor::zeros(vec![3, 3])], 1);
        assert!(bad.is_err());
    }

    #[test]
    fn concat_gradient_is_slice_routing() {
        let mut tape = Tape::new(Precision::F64);
        let a = tape.watch(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]).with_grad());
        let b = tape.watch(&t2(&[vec![5.0], vec![6.0]]).with_grad());
        let c = tape.concat(&[&a, &b], 1).unwrap();
        let loss = tape.sum_all(&c).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.for_tensor(&a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.for_tensor(&b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.watch(&Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap().with_grad());
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.watch(&Tensor::vector(vec![1.0]).unwrap().with_grad());
        let unused = tape.watch(&Tensor::vector(vec![5.0, 5.0]).unwrap().with_grad());
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.for_tensor(&unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.watch(&Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn overflow_is_an_error_not_a_value() {
        let mut tape = Tape::new(Precision::F64);
        let big = Tensor::vector(vec![1e308]).unwrap();
        let err = tape.add(&big, &big).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let mut t1 = Tape::new(Precision::F64);
        let mut t2_ = Tape::new(Precision::F64);
        let x = t1.watch(&Tensor::scalar(1.0).unwrap().with_grad());
        assert!(matches!(t2_.tanh(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn unwatched_param_is_rejected() {
        let mut tape = Tape::new(Precision::F64);
        let p = Tensor::scalar(1.0).unwrap().with_grad();
        assert!(matches!(tape.tanh(&p), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new(Precision::F64);
            let w = tape.watch(
                &t2(&[vec![0.3, -0.7], vec![0.11, 0.52]]).with_grad(),
            );
            let x = t2(&[vec![0.9, -0.4], vec![0.1, 0.2]]);
            let h = tape.matmul(&x, &w).unwrap();
            let a = tape.tanh(&h).unwrap();
            let s = tape.softmax_rows(&a).unwrap();
            let sq = tape.mul(&s, &s).unwrap();
            let loss = tape.sum_all(&sq).unwrap();
            let grads = tape.backward(&loss).unwrap();
            grads.for_tensor(&w).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical tapes must give bitwise identical gradients");
    }

    #[test]
    fn max_rows_ties_go_to_lowest_row() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.watch(&t2(&[vec![1.0, 5.0], vec![1.0, 3.0]]).with_grad());
        let m = tape.max_rows(&x).unwrap();
        assert_eq!(m.data(), &[1.0, 5.0]);
        let loss = tape.sum_all(&m).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn f32_tape_quantizes_every_op() {
        let mut tape = Tape::new(Precision::F32);
        let x = Tensor::vector(vec![0.1, 0.7]).unwrap();
        let y = tape.tanh(&x).unwrap();
        for v in y.data() {
            assert_eq!(*v, *v as f32 as f64);
        }
    }
}
