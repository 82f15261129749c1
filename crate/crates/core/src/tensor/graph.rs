//! Tape-based computation graph: eager forward evaluation, reverse replay for
//! gradients. Nodes only ever reference earlier nodes, so walking the tape
//! backwards is a valid topological order.

use super::{numel, Scalar, TensorError};

/// Index of a tensor node on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Tanh(NodeId),
    /// Logistic gate `1 / (1 + exp(-x / T))`, stored with `1/T`.
    SigmoidT {
        input: NodeId,
        inv_temp: F,
    },
    PowI {
        input: NodeId,
        exp: u32,
    },
    Abs(NodeId),
    /// `out = input @ weight^T + bias` with `input: [B, D]`, `weight: [O, D]`,
    /// `bias: [O]`. Rank-1 input is treated as a single row.
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Valid cross-correlation: `input: [B, C, H, W]`, `weight: [C, kh, kw]`,
    /// optional scalar bias, output `[B, H-kh+1, W-kw+1]`.
    Conv2dValid {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    /// Window product: `alpha: [B, A, N, L]` with `window: [B, N, L]`
    /// replicated across the second axis (unbatched ranks 3/2 also accepted).
    Diamond {
        alpha: NodeId,
        window: NodeId,
    },
    /// Reduction removing `axes` (sorted, unique).
    SumOver {
        input: NodeId,
        axes: Vec<usize>,
    },
    MeanAll(NodeId),
    Reshape(NodeId),
    /// Column-wise concat of rank-2 inputs sharing the row count.
    ConcatCols(Vec<NodeId>),
    /// Replicate a trailing axis of size 1 out to length `len`.
    BroadcastLast {
        input: NodeId,
        len: usize,
    },
    /// Row-broadcast add: `a: [B, N] + v: [N]`.
    AddRowVec {
        a: NodeId,
        v: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// The tape. Parameters are pushed first and persist; per-step subgraphs are
/// appended after a [`Graph::mark`] and discarded with [`Graph::truncate`].
#[derive(Debug, Clone, Default)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Snapshot the tape length so later nodes can be rolled back.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node at or after `mark` (forward scratch between steps).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn values(&self, id: NodeId) -> &[F] {
        &self.nodes[id].values
    }

    /// Gradient buffer of a `requires_grad` node, populated by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id].grad.as_deref()
    }

    /// Overwrite a node's values in place (optimizer updates, checkpoint restore).
    pub fn set_values(&mut self, id: NodeId, values: &[F]) -> Result<(), TensorError> {
        let node = &mut self.nodes[id];
        if values.len() != node.values.len() {
            return Err(TensorError::NumelMismatch {
                op: "set_values",
                expected: node.values.len(),
                got: values.len(),
            });
        }
        node.values.copy_from_slice(values);
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<F>, requires_grad: bool, op: Op<F>) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    /// Insert a leaf tensor. Gradients are retained only for `requires_grad` leaves.
    pub fn leaf(
        &mut self,
        values: Vec<F>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<NodeId, TensorError> {
        if numel(&shape) != values.len() {
            return Err(TensorError::BadConstruction {
                op: "leaf",
                expected: numel(&shape),
                got: values.len(),
            });
        }
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    /// Constant leaf filled with one value.
    pub fn constant(&mut self, value: F, shape: Vec<usize>) -> NodeId {
        let n = numel(&shape);
        self.push(shape, vec![value; n], false, Op::Leaf)
    }

    fn check_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != sb.len() {
            return Err(TensorError::RankMismatch {
                op,
                expected: "operands of equal rank",
                got: sb.clone(),
            });
        }
        for (axis, (&l, &r)) in sa.iter().zip(sb.iter()).enumerate() {
            if l != r {
                return Err(TensorError::AxisMismatch {
                    op,
                    axis,
                    left: l,
                    right: r,
                });
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let values = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a].shape.clone(), values, false, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let values = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a].shape.clone(), values, false, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("hadamard", a, b)?;
        let values = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a].shape.clone(), values, false, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let values = self.nodes[a].values.iter().map(|&x| x * c).collect();
        self.push(self.nodes[a].shape.clone(), values, false, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a].values.iter().map(|&x| x.tanh()).collect();
        self.push(self.nodes[a].shape.clone(), values, false, Op::Tanh(a))
    }

    /// Temperature sigmoid `1 / (1 + exp(-x / T))`, strictly inside (0, 1)
    /// away from the overflow regime. Computed in the numerically stable
    /// branch form so large magnitudes never produce non-finite values.
    pub fn sigmoid_t(&mut self, a: NodeId, temperature: F) -> Result<NodeId, TensorError> {
        if !(temperature > F::zero()) {
            return Err(TensorError::NonPositiveTemperature {
                got: format!("{temperature}"),
            });
        }
        let inv_temp = temperature.recip();
        let values = self.nodes[a]
            .values
            .iter()
            .map(|&x| stable_sigmoid(x * inv_temp))
            .collect();
        Ok(self.push(
            self.nodes[a].shape.clone(),
            values,
            false,
            Op::SigmoidT { input: a, inv_temp },
        ))
    }

    /// Elementwise integer power. `powi(_, 1)` is returned as the input itself.
    pub fn powi(&mut self, a: NodeId, exp: u32) -> NodeId {
        if exp == 1 {
            return a;
        }
        let values = self.nodes[a]
            .values
            .iter()
            .map(|&x| x.powi(exp as i32))
            .collect();
        self.push(
            self.nodes[a].shape.clone(),
            values,
            false,
            Op::PowI { input: a, exp },
        )
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a].values.iter().map(|&x| x.abs()).collect();
        self.push(self.nodes[a].shape.clone(), values, false, Op::Abs(a))
    }

    /// Affine map `input @ weight^T + bias`. Accepts `[B, D]` or `[D]` input.
    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let in_shape = self.nodes[input].shape.clone();
        let w_shape = self.nodes[weight].shape.clone();
        let b_shape = self.nodes[bias].shape.clone();
        let (rows, d) = match in_shape.as_slice() {
            [d] => (1usize, *d),
            [b, d] => (*b, *d),
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "linear",
                    expected: "rank-1 or rank-2 input",
                    got: in_shape,
                })
            }
        };
        let (out_dim, w_in) = match w_shape.as_slice() {
            [o, k] => (*o, *k),
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "linear",
                    expected: "rank-2 weight [out, in]",
                    got: w_shape,
                })
            }
        };
        if w_in != d {
            return Err(TensorError::AxisMismatch {
                op: "linear",
                axis: 1,
                left: w_in,
                right: d,
            });
        }
        if b_shape.as_slice() != [out_dim] {
            return Err(TensorError::AxisMismatch {
                op: "linear",
                axis: 0,
                left: b_shape.first().copied().unwrap_or(0),
                right: out_dim,
            });
        }

        let mut out = vec![F::zero(); rows * out_dim];
        if d > 0 {
            let a = self.nodes[input].values.as_ptr();
            let w = self.nodes[weight].values.as_ptr();
            // out[r, o] = sum_k input[r, k] * weight[o, k]
            unsafe {
                F::gemm(
                    rows,
                    d,
                    out_dim,
                    F::one(),
                    a,
                    d as isize,
                    1,
                    w,
                    1,
                    d as isize,
                    F::zero(),
                    out.as_mut_ptr(),
                    out_dim as isize,
                    1,
                );
            }
        }
        let bias_vals = &self.nodes[bias].values;
        for r in 0..rows {
            for (o, bv) in bias_vals.iter().enumerate() {
                out[r * out_dim + o] += *bv;
            }
        }
        let out_shape = if in_shape.len() == 1 {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        Ok(self.push(out_shape, out, false, Op::Linear { input, weight, bias }))
    }

    /// Valid cross-correlation with one output map per call.
    ///
    /// `input: [B, C, H, W]`, `weight: [C, kh, kw]`, optional `[1]` bias added
    /// to every output element; output `[B, H-kh+1, W-kw+1]`.
    pub fn conv2d_valid(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let in_shape = self.nodes[input].shape.clone();
        let w_shape = self.nodes[weight].shape.clone();
        let [bsz, ch, h, w] = match in_shape.as_slice() {
            [b, c, h, w] => [*b, *c, *h, *w],
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "conv2d_valid",
                    expected: "rank-4 input [batch, channel, rows, cols]",
                    got: in_shape,
                })
            }
        };
        let [wc, kh, kw] = match w_shape.as_slice() {
            [c, kh, kw] => [*c, *kh, *kw],
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "conv2d_valid",
                    expected: "rank-3 weight [channel, kh, kw]",
                    got: w_shape,
                })
            }
        };
        if wc != ch {
            return Err(TensorError::AxisMismatch {
                op: "conv2d_valid",
                axis: 1,
                left: ch,
                right: wc,
            });
        }
        if kh > h {
            return Err(TensorError::KernelTooLarge {
                axis: 2,
                kernel: kh,
                input: h,
            });
        }
        if kw > w {
            return Err(TensorError::KernelTooLarge {
                axis: 3,
                kernel: kw,
                input: w,
            });
        }
        if let Some(b) = bias {
            if self.nodes[b].values.len() != 1 {
                return Err(TensorError::NumelMismatch {
                    op: "conv2d_valid",
                    expected: 1,
                    got: self.nodes[b].values.len(),
                });
            }
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let bias_val = bias.map_or(F::zero(), |b| self.nodes[b].values[0]);
        let x = &self.nodes[input].values;
        let k = &self.nodes[weight].values;
        let mut out = vec![F::zero(); bsz * oh * ow];
        for bi in 0..bsz {
            let x_base = bi * ch * h * w;
            let o_base = bi * oh * ow;
            for p in 0..oh {
                for q in 0..ow {
                    let mut acc = bias_val;
                    for c in 0..ch {
                        let xc = x_base + c * h * w;
                        let kc = c * kh * kw;
                        for i in 0..kh {
                            let xrow = xc + (p + i) * w + q;
                            let krow = kc + i * kw;
                            for j in 0..kw {
                                acc = acc + x[xrow + j] * k[krow + j];
                            }
                        }
                    }
                    out[o_base + p * ow + q] = acc;
                }
            }
        }
        Ok(self.push(
            vec![bsz, oh, ow],
            out,
            false,
            Op::Conv2dValid { input, weight, bias },
        ))
    }

    /// Window product: replicate `window` across the target axis of `alpha`
    /// and multiply elementwise. `alpha: [B, A, N, L]` with `window: [B, N, L]`,
    /// or unbatched `[A, N, L]` with `[N, L]`.
    pub fn diamond(&mut self, alpha: NodeId, window: NodeId) -> Result<NodeId, TensorError> {
        let a_shape = self.nodes[alpha].shape.clone();
        let w_shape = self.nodes[window].shape.clone();
        let (bsz, tdim, n, l) = match (a_shape.as_slice(), w_shape.as_slice()) {
            ([t, n, l], [wn, wl]) => {
                if wn != n {
                    return Err(TensorError::AxisMismatch {
                        op: "diamond",
                        axis: 0,
                        left: *n,
                        right: *wn,
                    });
                }
                if wl != l {
                    return Err(TensorError::AxisMismatch {
                        op: "diamond",
                        axis: 1,
                        left: *l,
                        right: *wl,
                    });
                }
                (1usize, *t, *n, *l)
            }
            ([b, t, n, l], [wb, wn, wl]) => {
                if wb != b {
                    return Err(TensorError::AxisMismatch {
                        op: "diamond",
                        axis: 0,
                        left: *b,
                        right: *wb,
                    });
                }
                if wn != n {
                    return Err(TensorError::AxisMismatch {
                        op: "diamond",
                        axis: 1,
                        left: *n,
                        right: *wn,
                    });
                }
                if wl != l {
                    return Err(TensorError::AxisMismatch {
                        op: "diamond",
                        axis: 2,
                        left: *l,
                        right: *wl,
                    });
                }
                (*b, *t, *n, *l)
            }
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "diamond",
                    expected: "alpha rank 3/4 with window rank 2/3",
                    got: a_shape,
                })
            }
        };
        let av = &self.nodes[alpha].values;
        let wv = &self.nodes[window].values;
        let plane = n * l;
        let mut out = vec![F::zero(); bsz * tdim * plane];
        for b in 0..bsz {
            let wbase = b * plane;
            for t in 0..tdim {
                let abase = (b * tdim + t) * plane;
                for i in 0..plane {
                    out[abase + i] = av[abase + i] * wv[wbase + i];
                }
            }
        }
        Ok(self.push(a_shape, out, false, Op::Diamond { alpha, window }))
    }

    /// Sum over the given axes (duplicates rejected); empty set returns the
    /// input unchanged.
    pub fn sum_over(&mut self, input: NodeId, axes: &[usize]) -> Result<NodeId, TensorError> {
        let in_shape = self.nodes[input].shape.clone();
        if axes.is_empty() {
            return Ok(input);
        }
        let rank = in_shape.len();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        for pair in sorted.windows(2) {
            if pair[0] == pair[1] {
                return Err(TensorError::InvalidAxis {
                    op: "sum_over",
                    axis: pair[0],
                    rank,
                });
            }
        }
        if let Some(&bad) = sorted.iter().find(|&&a| a >= rank) {
            return Err(TensorError::InvalidAxis {
                op: "sum_over",
                axis: bad,
                rank,
            });
        }
        let keep: Vec<usize> = (0..rank).filter(|a| !sorted.contains(a)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&a| in_shape[a]).collect()
        };
        let mut out = vec![F::zero(); numel(&out_shape)];
        reduce_sum(
            &self.nodes[input].values,
            &in_shape,
            &keep,
            |oi, v| out[oi] += v,
        );
        Ok(self.push(out_shape, out, false, Op::SumOver { input, axes: sorted }))
    }

    /// Mean over all elements, producing a `[1]` tensor (used for losses).
    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let n = self.nodes[input].values.len();
        let inv = F::from_f64(1.0 / n as f64);
        let mut acc = F::zero();
        for &v in &self.nodes[input].values {
            acc = acc + v;
        }
        self.push(vec![1], vec![acc * inv], false, Op::MeanAll(input))
    }

    /// Reinterpret the element buffer under a new shape of equal size.
    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let expected = self.nodes[input].values.len();
        if numel(&shape) != expected {
            return Err(TensorError::NumelMismatch {
                op: "reshape",
                expected,
                got: numel(&shape),
            });
        }
        let values = self.nodes[input].values.clone();
        Ok(self.push(shape, values, false, Op::Reshape(input)))
    }

    /// Concatenate rank-2 tensors along columns.
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::RankMismatch {
                op: "concat_cols",
                expected: "at least one input",
                got: vec![],
            });
        }
        let rows = match self.nodes[inputs[0]].shape.as_slice() {
            [r, _] => *r,
            other => {
                return Err(TensorError::RankMismatch {
                    op: "concat_cols",
                    expected: "rank-2 inputs",
                    got: other.to_vec(),
                })
            }
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            match self.nodes[id].shape.as_slice() {
                [r, c] if *r == rows => widths.push(*c),
                [r, _] => {
                    return Err(TensorError::AxisMismatch {
                        op: "concat_cols",
                        axis: 0,
                        left: rows,
                        right: *r,
                    })
                }
                other => {
                    return Err(TensorError::RankMismatch {
                        op: "concat_cols",
                        expected: "rank-2 inputs",
                        got: other.to_vec(),
                    })
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![F::zero(); rows * total];
        let mut col = 0;
        for (&id, &width) in inputs.iter().zip(&widths) {
            let vals = &self.nodes[id].values;
            for r in 0..rows {
                out[r * total + col..r * total + col + width]
                    .copy_from_slice(&vals[r * width..(r + 1) * width]);
            }
            col += width;
        }
        Ok(self.push(
            vec![rows, total],
            out,
            false,
            Op::ConcatCols(inputs.to_vec()),
        ))
    }

    /// Replicate a trailing axis of size 1 out to `len`.
    pub fn broadcast_last(&mut self, input: NodeId, len: usize) -> Result<NodeId, TensorError> {
        let in_shape = self.nodes[input].shape.clone();
        match in_shape.last() {
            Some(1) => {}
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "broadcast_last",
                    expected: "trailing axis of size 1",
                    got: in_shape,
                })
            }
        }
        let lead = numel(&in_shape) / 1;
        let vals = &self.nodes[input].values;
        let mut out = vec![F::zero(); lead * len];
        for (i, &v) in vals.iter().enumerate() {
            out[i * len..(i + 1) * len].fill(v);
        }
        let mut shape = in_shape;
        *shape.last_mut().expect("non-empty shape") = len;
        Ok(self.push(shape, out, false, Op::BroadcastLast { input, len }))
    }

    /// Add a length-N vector to every row of a `[B, N]` tensor.
    pub fn add_rowvec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let a_shape = self.nodes[a].shape.clone();
        let v_shape = self.nodes[v].shape.clone();
        let (rows, cols) = match a_shape.as_slice() {
            [r, c] => (*r, *c),
            other => {
                return Err(TensorError::RankMismatch {
                    op: "add_rowvec",
                    expected: "rank-2 left operand",
                    got: other.to_vec(),
                })
            }
        };
        if v_shape.as_slice() != [cols] {
            return Err(TensorError::AxisMismatch {
                op: "add_rowvec",
                axis: 1,
                left: cols,
                right: v_shape.first().copied().unwrap_or(0),
            });
        }
        let av = &self.nodes[a].values;
        let vv = &self.nodes[v].values;
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = av[r * cols + c] + vv[c];
            }
        }
        Ok(self.push(a_shape, out, false, Op::AddRowVec { a, v }))
    }

    /// Reverse-mode accumulation from a single-element loss. Gradients for
    /// every `requires_grad` node reachable from the loss are stored on the
    /// node (overwriting results of a previous call).
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss].values.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![F::one()]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if self.nodes[id].requires_grad {
                self.nodes[id].grad = Some(g);
            }
        }
        Ok(())
    }

    fn grad_buf<'a>(
        grads: &'a mut [Option<Vec<F>>],
        nodes: &[Node<F>],
        id: NodeId,
    ) -> &'a mut [F] {
        grads[id].get_or_insert_with(|| vec![F::zero(); nodes[id].values.len()])
    }

    fn propagate(&self, id: NodeId, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (dst, &gi) in Self::grad_buf(grads, nodes, *a).iter_mut().zip(g) {
                    *dst += gi;
                }
                for (dst, &gi) in Self::grad_buf(grads, nodes, *b).iter_mut().zip(g) {
                    *dst += gi;
                }
            }
            Op::Sub(a, b) => {
                for (dst, &gi) in Self::grad_buf(grads, nodes, *a).iter_mut().zip(g) {
                    *dst += gi;
                }
                for (dst, &gi) in Self::grad_buf(grads, nodes, *b).iter_mut().zip(g) {
                    *dst -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                {
                    let bv = nodes[b].values.clone();
                    let da = Self::grad_buf(grads, nodes, a);
                    for ((dst, &gi), &y) in da.iter_mut().zip(g).zip(&bv) {
                        *dst += gi * y;
                    }
                }
                let av = nodes[a].values.clone();
                let db = Self::grad_buf(grads, nodes, b);
                for ((dst, &gi), &x) in db.iter_mut().zip(g).zip(&av) {
                    *dst += gi * x;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                for (dst, &gi) in Self::grad_buf(grads, nodes, *a).iter_mut().zip(g) {
                    *dst += gi * c;
                }
            }
            Op::Tanh(a) => {
                let y = nodes[id].values.clone();
                let da = Self::grad_buf(grads, nodes, *a);
                for ((dst, &gi), &yi) in da.iter_mut().zip(g).zip(&y) {
                    *dst += gi * (F::one() - yi * yi);
                }
            }
            Op::SigmoidT { input, inv_temp } => {
                let it = *inv_temp;
                let y = nodes[id].values.clone();
                let da = Self::grad_buf(grads, nodes, *input);
                for ((dst, &gi), &yi) in da.iter_mut().zip(g).zip(&y) {
                    *dst += gi * yi * (F::one() - yi) * it;
                }
            }
            Op::PowI { input, exp } => {
                let exp = *exp;
                if exp == 0 {
                    return;
                }
                let x = nodes[*input].values.clone();
                let k = F::from_f64(exp as f64);
                let da = Self::grad_buf(grads, nodes, *input);
                for ((dst, &gi), &xi) in da.iter_mut().zip(g).zip(&x) {
                    *dst += gi * k * xi.powi(exp as i32 - 1);
                }
            }
            Op::Abs(a) => {
                let x = nodes[*a].values.clone();
                let da = Self::grad_buf(grads, nodes, *a);
                for ((dst, &gi), &xi) in da.iter_mut().zip(g).zip(&x) {
                    let s = if xi > F::zero() {
                        F::one()
                    } else if xi < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    *dst += gi * s;
                }
            }
            Op::Linear { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let in_shape = &nodes[input].shape;
                let (rows, d) = match in_shape.as_slice() {
                    [d] => (1usize, *d),
                    [b, d] => (*b, *d),
                    _ => unreachable!("validated at construction"),
                };
                let out_dim = nodes[weight].shape[0];
                if d > 0 {
                    // d_input[r, k] += g[r, o] * weight[o, k]
                    {
                        let w = nodes[weight].values.as_ptr();
                        let da = Self::grad_buf(grads, nodes, input);
                        unsafe {
                            F::gemm(
                                rows,
                                out_dim,
                                d,
                                F::one(),
                                g.as_ptr(),
                                out_dim as isize,
                                1,
                                w,
                                d as isize,
                                1,
                                F::one(),
                                da.as_mut_ptr(),
                                d as isize,
                                1,
                            );
                        }
                    }
                    // d_weight[o, k] += g[r, o]^T * input[r, k]
                    let x = nodes[input].values.as_ptr();
                    let dw = Self::grad_buf(grads, nodes, weight);
                    unsafe {
                        F::gemm(
                            out_dim,
                            rows,
                            d,
                            F::one(),
                            g.as_ptr(),
                            1,
                            out_dim as isize,
                            x,
                            d as isize,
                            1,
                            F::one(),
                            dw.as_mut_ptr(),
                            d as isize,
                            1,
                        );
                    }
                }
                let db = Self::grad_buf(grads, nodes, bias);
                for r in 0..rows {
                    for o in 0..out_dim {
                        db[o] += g[r * out_dim + o];
                    }
                }
            }
            Op::Conv2dValid { input, weight, bias } => {
                let (input, weight) = (*input, *weight);
                let bias = *bias;
                let in_shape = &nodes[input].shape;
                let (bsz, ch, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let w_shape = &nodes[weight].shape;
                let (kh, kw) = (w_shape[1], w_shape[2]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let k = nodes[weight].values.clone();
                let x = nodes[input].values.clone();
                {
                    let dx = Self::grad_buf(grads, nodes, input);
                    for bi in 0..bsz {
                        let x_base = bi * ch * h * w;
                        let o_base = bi * oh * ow;
                        for p in 0..oh {
                            for q in 0..ow {
                                let gv = g[o_base + p * ow + q];
                                for c in 0..ch {
                                    let xc = x_base + c * h * w;
                                    let kc = c * kh * kw;
                                    for i in 0..kh {
                                        let xrow = xc + (p + i) * w + q;
                                        let krow = kc + i * kw;
                                        for j in 0..kw {
                                            dx[xrow + j] += gv * k[krow + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let dw = Self::grad_buf(grads, nodes, weight);
                    for bi in 0..bsz {
                        let x_base = bi * ch * h * w;
                        let o_base = bi * oh * ow;
                        for p in 0..oh {
                            for q in 0..ow {
                                let gv = g[o_base + p * ow + q];
                                for c in 0..ch {
                                    let xc = x_base + c * h * w;
                                    let kc = c * kh * kw;
                                    for i in 0..kh {
                                        let xrow = xc + (p + i) * w + q;
                                        let krow = kc + i * kw;
                                        for j in 0..kw {
                                            dw[krow + j] += gv * x[xrow + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let db = Self::grad_buf(grads, nodes, b);
                    let mut acc = F::zero();
                    for &gi in g {
                        acc = acc + gi;
                    }
                    db[0] += acc;
                }
            }
            Op::Diamond { alpha, window } => {
                let (alpha, window) = (*alpha, *window);
                let a_shape = &nodes[alpha].shape;
                let (bsz, tdim, n, l) = match a_shape.as_slice() {
                    [t, n, l] => (1usize, *t, *n, *l),
                    [b, t, n, l] => (*b, *t, *n, *l),
                    _ => unreachable!("validated at construction"),
                };
                let plane = n * l;
                let wv = nodes[window].values.clone();
                let av = nodes[alpha].values.clone();
                {
                    let da = Self::grad_buf(grads, nodes, alpha);
                    for b in 0..bsz {
                        let wbase = b * plane;
                        for t in 0..tdim {
                            let abase = (b * tdim + t) * plane;
                            for i in 0..plane {
                                da[abase + i] += g[abase + i] * wv[wbase + i];
                            }
                        }
                    }
                }
                let dw = Self::grad_buf(grads, nodes, window);
                for b in 0..bsz {
                    let wbase = b * plane;
                    for t in 0..tdim {
                        let abase = (b * tdim + t) * plane;
                        for i in 0..plane {
                            dw[wbase + i] += g[abase + i] * av[abase + i];
                        }
                    }
                }
            }
            Op::SumOver { input, axes } => {
                let input = *input;
                let in_shape = nodes[input].shape.clone();
                let rank = in_shape.len();
                let keep: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
                let dx = Self::grad_buf(grads, nodes, input);
                reduce_sum_into_input(&in_shape, &keep, |ii, oi| dx[ii] += g[oi]);
            }
            Op::MeanAll(a) => {
                let n = nodes[*a].values.len();
                let inv = F::from_f64(1.0 / n as f64);
                let gv = g[0] * inv;
                for dst in Self::grad_buf(grads, nodes, *a).iter_mut() {
                    *dst += gv;
                }
            }
            Op::Reshape(a) => {
                for (dst, &gi) in Self::grad_buf(grads, nodes, *a).iter_mut().zip(g) {
                    *dst += gi;
                }
            }
            Op::ConcatCols(inputs) => {
                let inputs = inputs.clone();
                let rows = nodes[id].shape[0];
                let total = nodes[id].shape[1];
                let mut col = 0;
                for &src in &inputs {
                    let width = nodes[src].shape[1];
                    let dsrc = Self::grad_buf(grads, nodes, src);
                    for r in 0..rows {
                        for c in 0..width {
                            dsrc[r * width + c] += g[r * total + col + c];
                        }
                    }
                    col += width;
                }
            }
            Op::BroadcastLast { input, len } => {
                let len = *len;
                let dx = Self::grad_buf(grads, nodes, *input);
                for (i, dst) in dx.iter_mut().enumerate() {
                    let mut acc = F::zero();
                    for j in 0..len {
                        acc = acc + g[i * len + j];
                    }
                    *dst += acc;
                }
            }
            Op::AddRowVec { a, v } => {
                let (a, v) = (*a, *v);
                let cols = nodes[v].values.len();
                let rows = nodes[a].values.len() / cols;
                for (dst, &gi) in Self::grad_buf(grads, nodes, a).iter_mut().zip(g) {
                    *dst += gi;
                }
                let dv = Self::grad_buf(grads, nodes, v);
                for r in 0..rows {
                    for c in 0..cols {
                        dv[c] += g[r * cols + c];
                    }
                }
            }
        }
    }
}

fn stable_sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        let e = (-z).exp();
        F::one() / (F::one() + e)
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Walk a tensor in row-major order, handing each element's flat output index
/// (under the kept axes) to `sink`.
fn reduce_sum<F: Copy>(
    values: &[F],
    shape: &[usize],
    keep: &[usize],
    mut sink: impl FnMut(usize, F),
) {
    let rank = shape.len();
    let mut out_stride = vec![0usize; rank];
    let mut stride = 1;
    for &axis in keep.iter().rev() {
        out_stride[axis] = stride;
        stride *= shape[axis];
    }
    let mut idx = vec![0usize; rank];
    for &v in values {
        let oi: usize = idx
            .iter()
            .zip(&out_stride)
            .map(|(&i, &s)| i * s)
            .sum();
        sink(oi, v);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Same traversal as [`reduce_sum`] but hands (input index, output index) pairs.
fn reduce_sum_into_input(shape: &[usize], keep: &[usize], mut sink: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut out_stride = vec![0usize; rank];
    let mut stride = 1;
    for &axis in keep.iter().rev() {
        out_stride[axis] = stride;
        stride *= shape[axis];
    }
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    for ii in 0..total {
        let oi: usize = idx
            .iter()
            .zip(&out_stride)
            .map(|(&i, &s)| i * s)
            .sum();
        sink(ii, oi);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}
