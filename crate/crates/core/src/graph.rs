//! Static computation graph with reverse-mode automatic differentiation.
//!
//! A [`ModelGraph`] is an acyclic list of nodes in topological order, built
//! once through [`GraphBuilder`] with all shapes validated at construction.
//! Forward evaluation caches per-node activations; the backward pass walks
//! the list in reverse and accumulates gradients with respect to the input
//! batch and every unfrozen parameter. Attacks consume the input gradient,
//! training consumes the parameter gradients.
//!
//! Evaluation is generic over the scalar type (see [`crate::kernels`]):
//! the f64 instantiation backs the finite-difference oracle so the check
//! is not confounded by f32 rounding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, BnStats, ConvDims, Real};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// How `forward` presents the output node's value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OutputMode {
    Logits,
    Probabilities,
}

/// Distinguishes SGD-trainable weights from state buffers (batch-norm
/// running statistics), which never receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamRole {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    pub role: ParamRole,
}

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    /// params: weight `[out, in]`, bias `[out]`.
    Dense { out_features: usize },
    /// Stride 1; params: weight `[cout, cin, k, k]`, bias `[cout]`.
    Conv2d { out_channels: usize, kernel: usize, pad: usize },
    Relu,
    /// params: gamma, beta; buffers: running_mean, running_var (all `[C]`).
    /// With `frozen_stats` the stored statistics are used and never updated.
    BatchNorm { eps: f32, frozen_stats: bool },
    /// Elementwise sum of two equal-shape inputs (skip connections).
    Add,
    Scale { factor: f32 },
    Clamp { lo: f32, hi: f32 },
    Softmax,
    Flatten,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub params: Vec<Param>,
    /// Per-example output shape (batch dimension excluded).
    pub out_shape: Vec<usize>,
}

impl Node {
    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }
}

/// Gradients from one backward pass: input gradient plus named parameter
/// gradients. Frozen parameters and buffers are absent from the map.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub input_grad: Tensor,
    pub param_grads: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    input_shape: Vec<usize>,
    output: NodeId,
    output_mode: OutputMode,
}

// ── builder ─────────────────────────────────────────────────────────

pub struct GraphBuilder {
    nodes: Vec<Node>,
    input_shape: Vec<usize>,
    counters: BTreeMap<&'static str, usize>,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        let input = Node {
            op: Op::Input,
            inputs: vec![],
            params: vec![],
            out_shape: input_shape.clone(),
        };
        GraphBuilder { nodes: vec![input], input_shape, counters: BTreeMap::new() }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    fn next_name(&mut self, kind: &'static str) -> String {
        let c = self.counters.entry(kind).or_insert(0);
        let name = format!("{kind}{c}");
        *c += 1;
        name
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].out_shape
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn dense(&mut self, x: NodeId, weight: Tensor, bias: Tensor) -> Result<NodeId> {
        let in_shape = self.shape_of(x).to_vec();
        if in_shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "dense expects a flat input",
                expected: vec![in_shape.iter().product()],
                got: in_shape,
            });
        }
        let fin = in_shape[0];
        let fout = bias.len();
        if weight.shape() != [fout, fin] {
            return Err(Error::ShapeMismatch {
                context: "dense weight",
                expected: vec![fout, fin],
                got: weight.shape().to_vec(),
            });
        }
        let name = self.next_name("dense");
        Ok(self.push(Node {
            op: Op::Dense { out_features: fout },
            inputs: vec![x],
            params: vec![
                Param { name: format!("{name}.weight"), value: weight, frozen: false, role: ParamRole::Trainable },
                Param { name: format!("{name}.bias"), value: bias, frozen: false, role: ParamRole::Trainable },
            ],
            out_shape: vec![fout],
        }))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: usize,
        pad: usize,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<NodeId> {
        let in_shape = self.shape_of(x).to_vec();
        if in_shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                context: "conv2d expects [C, H, W] input",
                expected: vec![0, 0, 0],
                got: in_shape,
            });
        }
        let (cin, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let cout = bias.len();
        if weight.shape() != [cout, cin, kernel, kernel] {
            return Err(Error::ShapeMismatch {
                context: "conv2d weight",
                expected: vec![cout, cin, kernel, kernel],
                got: weight.shape().to_vec(),
            });
        }
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kernel} exceeds padded input {h}x{w} (pad {pad})"),
            ));
        }
        let oh = h + 2 * pad + 1 - kernel;
        let ow = w + 2 * pad + 1 - kernel;
        let name = self.next_name("conv");
        Ok(self.push(Node {
            op: Op::Conv2d { out_channels: cout, kernel, pad },
            inputs: vec![x],
            params: vec![
                Param { name: format!("{name}.weight"), value: weight, frozen: false, role: ParamRole::Trainable },
                Param { name: format!("{name}.bias"), value: bias, frozen: false, role: ParamRole::Trainable },
            ],
            out_shape: vec![cout, oh, ow],
        }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out_shape = self.shape_of(x).to_vec();
        self.push(Node { op: Op::Relu, inputs: vec![x], params: vec![], out_shape })
    }

    /// Batch norm over the channel dimension of a `[C, H, W]` input.
    /// Running statistics start at mean 0, variance 1 unless provided.
    pub fn batch_norm(&mut self, x: NodeId, eps: f32, frozen_stats: bool) -> Result<NodeId> {
        let in_shape = self.shape_of(x).to_vec();
        if in_shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                context: "batch_norm expects [C, H, W] input",
                expected: vec![0, 0, 0],
                got: in_shape,
            });
        }
        let c = in_shape[0];
        let name = self.next_name("bn");
        Ok(self.push(Node {
            op: Op::BatchNorm { eps, frozen_stats },
            inputs: vec![x],
            params: vec![
                Param { name: format!("{name}.gamma"), value: Tensor::full(vec![c], 1.0), frozen: false, role: ParamRole::Trainable },
                Param { name: format!("{name}.beta"), value: Tensor::zeros(vec![c]), frozen: false, role: ParamRole::Trainable },
                Param { name: format!("{name}.running_mean"), value: Tensor::zeros(vec![c]), frozen: true, role: ParamRole::Buffer },
                Param { name: format!("{name}.running_var"), value: Tensor::full(vec![c], 1.0), frozen: true, role: ParamRole::Buffer },
            ],
            out_shape: in_shape,
        }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa != sb {
            return Err(Error::ShapeMismatch { context: "add", expected: sa, got: sb });
        }
        Ok(self.push(Node { op: Op::Add, inputs: vec![a, b], params: vec![], out_shape: sa }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let out_shape = self.shape_of(x).to_vec();
        self.push(Node { op: Op::Scale { factor }, inputs: vec![x], params: vec![], out_shape })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        let out_shape = self.shape_of(x).to_vec();
        self.push(Node { op: Op::Clamp { lo, hi }, inputs: vec![x], params: vec![], out_shape })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let in_shape = self.shape_of(x).to_vec();
        if in_shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "softmax expects a flat input",
                expected: vec![in_shape.iter().product()],
                got: in_shape,
            });
        }
        Ok(self.push(Node { op: Op::Softmax, inputs: vec![x], params: vec![], out_shape: in_shape }))
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let numel = self.shape_of(x).iter().product();
        self.push(Node { op: Op::Flatten, inputs: vec![x], params: vec![], out_shape: vec![numel] })
    }

    pub fn finish(self, output: NodeId, output_mode: OutputMode) -> ModelGraph {
        ModelGraph { nodes: self.nodes, input_shape: self.input_shape, output, output_mode }
    }
}

// ── evaluation ──────────────────────────────────────────────────────

struct EvalTrace<F> {
    acts: Vec<Vec<F>>,
    /// Statistics actually used by each BatchNorm node (batch or running).
    bn_stats: Vec<Option<BnStats<F>>>,
}

impl ModelGraph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    pub fn set_output_mode(&mut self, mode: OutputMode) {
        self.output_mode = mode;
    }

    /// Number of classes: the flat size of the loss anchor node.
    pub fn num_classes(&self) -> usize {
        self.nodes[self.ce_anchor()].out_len()
    }

    /// Node whose value feeds the cross-entropy loss. When the graph ends
    /// in an explicit softmax the loss fuses with it and reads the
    /// pre-softmax node, keeping the log-sum-exp stabilization.
    fn ce_anchor(&self) -> NodeId {
        match self.nodes[self.output].op {
            Op::Softmax => self.nodes[self.output].inputs[0],
            _ => self.output,
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != *self.input_shape {
            return Err(Error::ShapeMismatch {
                context: "graph input",
                expected: self.input_shape.clone(),
                got: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    fn check_labels(&self, labels: &[usize], n: usize) -> Result<()> {
        let c = self.num_classes();
        if labels.len() != n {
            return Err(Error::invalid(
                "labels",
                format!("{} labels for a batch of {n}", labels.len()),
            ));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::LabelOutOfRange { index: i, label: l, num_classes: c });
            }
        }
        Ok(())
    }

    fn param_values<F: Real>(p: &Param) -> Vec<F> {
        p.value.data().iter().map(|&v| F::from_f32(v)).collect()
    }

    fn eval_in<F: Real>(&self, batch: &[F], n: usize) -> EvalTrace<F> {
        let mut acts: Vec<Vec<F>> = Vec::with_capacity(self.nodes.len());
        let mut bn_stats: Vec<Option<BnStats<F>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let mut stats_used = None;
            let out = match &node.op {
                Op::Input => batch.to_vec(),
                Op::Dense { out_features } => {
                    let x = &acts[node.inputs[0]];
                    let fin = self.nodes[node.inputs[0]].out_len();
                    let w = Self::param_values::<F>(&node.params[0]);
                    let b = Self::param_values::<F>(&node.params[1]);
                    kernels::dense_fwd(x, &w, &b, n, fin, *out_features)
                }
                Op::Conv2d { out_channels, kernel, pad } => {
                    let src = node.inputs[0];
                    let ishape = &self.nodes[src].out_shape;
                    let d = ConvDims {
                        n,
                        cin: ishape[0],
                        h: ishape[1],
                        w: ishape[2],
                        cout: *out_channels,
                        k: *kernel,
                        pad: *pad,
                    };
                    let w = Self::param_values::<F>(&node.params[0]);
                    let b = Self::param_values::<F>(&node.params[1]);
                    kernels::conv2d_fwd(&acts[src], &w, &b, d)
                }
                Op::Relu => kernels::relu_fwd(&acts[node.inputs[0]]),
                Op::BatchNorm { eps, frozen_stats } => {
                    let src = node.inputs[0];
                    let shape = &self.nodes[src].out_shape;
                    let (c, hw) = (shape[0], shape[1] * shape[2]);
                    let x = &acts[src];
                    let stats = if *frozen_stats {
                        BnStats {
                            mean: Self::param_values::<F>(&node.params[2]),
                            var: Self::param_values::<F>(&node.params[3]),
                        }
                    } else {
                        kernels::bn_batch_stats(x, n, c, hw)
                    };
                    let gamma = Self::param_values::<F>(&node.params[0]);
                    let beta = Self::param_values::<F>(&node.params[1]);
                    let y = kernels::bn_fwd(x, &gamma, &beta, &stats, F::from_f32(*eps), n, c, hw);
                    stats_used = Some(stats);
                    y
                }
                Op::Add => kernels::add_fwd(&acts[node.inputs[0]], &acts[node.inputs[1]]),
                Op::Scale { factor } => kernels::scale_fwd(&acts[node.inputs[0]], F::from_f32(*factor)),
                Op::Clamp { lo, hi } => {
                    kernels::clamp_fwd(&acts[node.inputs[0]], F::from_f32(*lo), F::from_f32(*hi))
                }
                Op::Softmax => {
                    let src = node.inputs[0];
                    let c = self.nodes[src].out_len();
                    kernels::softmax_fwd(&acts[src], n, c)
                }
                Op::Flatten => acts[node.inputs[0]].clone(),
            };
            acts.push(out);
            bn_stats.push(stats_used);
        }
        EvalTrace { acts, bn_stats }
    }

    /// Reverse pass from a seed gradient at `seed_node`, returning the input
    /// gradient and gradients for unfrozen trainable parameters.
    #[allow(clippy::type_complexity)]
    fn backprop_in<F: Real>(
        &self,
        trace: &EvalTrace<F>,
        n: usize,
        seed_node: NodeId,
        seed: Vec<F>,
    ) -> (Vec<F>, BTreeMap<String, Vec<F>>) {
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[seed_node] = Some(seed);
        let mut param_grads = BTreeMap::new();

        fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, add: Vec<F>) {
            match slot {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(add) {
                        *a += b;
                    }
                }
                None => *slot = Some(add),
            }
        }

        for id in (0..=seed_node).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {
                    grads[id] = Some(dy); // keep for the caller
                }
                Op::Dense { out_features } => {
                    let src = node.inputs[0];
                    let fin = self.nodes[src].out_len();
                    let w = Self::param_values::<F>(&node.params[0]);
                    let g = kernels::dense_bwd(&trace.acts[src], &w, &dy, n, fin, *out_features);
                    accumulate(&mut grads[src], g.dx);
                    self.record_param_grad(&mut param_grads, &node.params[0], g.dw);
                    self.record_param_grad(&mut param_grads, &node.params[1], g.db);
                }
                Op::Conv2d { out_channels, kernel, pad } => {
                    let src = node.inputs[0];
                    let ishape = &self.nodes[src].out_shape;
                    let d = ConvDims {
                        n,
                        cin: ishape[0],
                        h: ishape[1],
                        w: ishape[2],
                        cout: *out_channels,
                        k: *kernel,
                        pad: *pad,
                    };
                    let w = Self::param_values::<F>(&node.params[0]);
                    let g = kernels::conv2d_bwd(&trace.acts[src], &w, &dy, d);
                    accumulate(&mut grads[src], g.dx);
                    self.record_param_grad(&mut param_grads, &node.params[0], g.dw);
                    self.record_param_grad(&mut param_grads, &node.params[1], g.db);
                }
                Op::Relu => {
                    let src = node.inputs[0];
                    accumulate(&mut grads[src], kernels::relu_bwd(&trace.acts[src], &dy));
                }
                Op::BatchNorm { eps, frozen_stats } => {
                    let src = node.inputs[0];
                    let shape = &self.nodes[src].out_shape;
                    let (c, hw) = (shape[0], shape[1] * shape[2]);
                    let gamma = Self::param_values::<F>(&node.params[0]);
                    let stats = trace.bn_stats[id].as_ref().expect("bn stats recorded in forward");
                    let eps = F::from_f32(*eps);
                    let g = if *frozen_stats {
                        kernels::bn_bwd_frozen(&trace.acts[src], &gamma, stats, eps, &dy, n, c, hw)
                    } else {
                        kernels::bn_bwd_batch(&trace.acts[src], &gamma, stats, eps, &dy, n, c, hw)
                    };
                    accumulate(&mut grads[src], g.dx);
                    self.record_param_grad(&mut param_grads, &node.params[0], g.dgamma);
                    self.record_param_grad(&mut param_grads, &node.params[1], g.dbeta);
                }
                Op::Add => {
                    accumulate(&mut grads[node.inputs[0]], dy.clone());
                    accumulate(&mut grads[node.inputs[1]], dy);
                }
                Op::Scale { factor } => {
                    let f = F::from_f32(*factor);
                    accumulate(&mut grads[node.inputs[0]], kernels::scale_fwd(&dy, f));
                }
                Op::Clamp { lo, hi } => {
                    let src = node.inputs[0];
                    let g = kernels::clamp_bwd(
                        &trace.acts[src],
                        F::from_f32(*lo),
                        F::from_f32(*hi),
                        &dy,
                    );
                    accumulate(&mut grads[src], g);
                }
                Op::Softmax => {
                    let src = node.inputs[0];
                    let c = self.nodes[src].out_len();
                    accumulate(&mut grads[src], kernels::softmax_bwd(&trace.acts[id], &dy, n, c));
                }
                Op::Flatten => {
                    accumulate(&mut grads[node.inputs[0]], dy);
                }
            }
        }

        let input_grad = grads[0].take().unwrap_or_else(|| vec![F::ZERO; trace.acts[0].len()]);
        (input_grad, param_grads)
    }

    fn record_param_grad<F: Real>(
        &self,
        map: &mut BTreeMap<String, Vec<F>>,
        param: &Param,
        grad: Vec<F>,
    ) {
        if param.role == ParamRole::Trainable && !param.frozen {
            match map.get_mut(&param.name) {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(grad) {
                        *a += b;
                    }
                }
                None => {
                    map.insert(param.name.clone(), grad);
                }
            }
        }
    }

    fn batch_to<F: Real>(batch: &Tensor) -> Vec<F> {
        batch.data().iter().map(|&v| F::from_f32(v)).collect()
    }

    /// Raw value of the loss anchor node (pre-softmax logits).
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let trace = self.eval_in::<f32>(batch.data(), n);
        let anchor = self.ce_anchor();
        let c = self.nodes[anchor].out_len();
        Tensor::new(vec![n, c], trace.acts[anchor].clone())
    }

    /// Output per the graph's configured mode.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let trace = self.eval_in::<f32>(batch.data(), n);
        let out = &self.nodes[self.output];
        let c = out.out_len();
        let value = match (self.output_mode, &out.op) {
            (OutputMode::Probabilities, op) if !matches!(op, Op::Softmax) => {
                kernels::softmax_fwd(&trace.acts[self.output], n, c)
            }
            _ => trace.acts[self.output].clone(),
        };
        let mut shape = vec![n];
        shape.extend_from_slice(&out.out_shape);
        Tensor::new(shape, value)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }

    /// Mean cross-entropy loss, generic scalar path.
    pub fn loss_in<F: Real>(&self, batch: &[F], labels: &[usize], n: usize) -> f64 {
        let trace = self.eval_in::<F>(batch, n);
        let anchor = self.ce_anchor();
        let c = self.nodes[anchor].out_len();
        kernels::cross_entropy_fwd(&trace.acts[anchor], labels, n, c)
    }

    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let n = self.check_batch(batch)?;
        self.check_labels(labels, n)?;
        Ok(self.loss_in::<f32>(batch.data(), labels, n))
    }

    /// Loss evaluated with f64 arithmetic end to end; used by oracles.
    pub fn loss_f64(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let n = self.check_batch(batch)?;
        self.check_labels(labels, n)?;
        Ok(self.loss_in::<f64>(&Self::batch_to::<f64>(batch), labels, n))
    }

    /// Loss and gradients (input + unfrozen parameters) for a labeled batch.
    pub fn backward_ce(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, GradientBundle)> {
        let n = self.check_batch(batch)?;
        self.check_labels(labels, n)?;
        let (loss, dx, dp) = self.backward_ce_in::<f32>(batch.data(), labels, n)?;
        Ok((loss, self.bundle_from(batch, dx, dp)))
    }

    /// Generic-scalar backward; returns flat gradient buffers.
    #[allow(clippy::type_complexity)]
    pub fn backward_ce_in<F: Real>(
        &self,
        batch: &[F],
        labels: &[usize],
        n: usize,
    ) -> Result<(f64, Vec<F>, BTreeMap<String, Vec<F>>)> {
        let trace = self.eval_in::<F>(batch, n);
        let anchor = self.ce_anchor();
        let c = self.nodes[anchor].out_len();
        let loss = kernels::cross_entropy_fwd(&trace.acts[anchor], labels, n, c);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("cross-entropy loss at node {anchor}"),
            });
        }
        let seed = kernels::cross_entropy_bwd(&trace.acts[anchor], labels, n, c);
        let (dx, dp) = self.backprop_in(&trace, n, anchor, seed);
        Ok((loss, dx, dp))
    }

    /// Input gradient in f64 arithmetic; used by the gradient checker.
    pub fn input_grad_f64(&self, batch: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let n = self.check_batch(batch)?;
        self.check_labels(labels, n)?;
        let (_, dx, _) = self.backward_ce_in::<f64>(&Self::batch_to::<f64>(batch), labels, n)?;
        Ok(dx)
    }

    /// Vector-Jacobian product: backpropagates a caller-supplied gradient at
    /// the output node. Used to chain composite models.
    pub fn backward_vjp(&self, batch: &Tensor, out_grad: &Tensor) -> Result<GradientBundle> {
        let n = self.check_batch(batch)?;
        let out_len = self.nodes[self.output].out_len() * n;
        if out_grad.len() != out_len {
            return Err(Error::ShapeMismatch {
                context: "vjp seed",
                expected: vec![n, self.nodes[self.output].out_len()],
                got: out_grad.shape().to_vec(),
            });
        }
        let trace = self.eval_in::<f32>(batch.data(), n);
        let (dx, dp) = self.backprop_in(&trace, n, self.output, out_grad.data().to_vec());
        Ok(self.bundle_from(batch, dx, dp))
    }

    fn bundle_from(
        &self,
        batch: &Tensor,
        dx: Vec<f32>,
        dp: BTreeMap<String, Vec<f32>>,
    ) -> GradientBundle {
        let input_grad =
            Tensor::new(batch.shape().to_vec(), dx).expect("input grad matches batch shape");
        let mut param_grads = BTreeMap::new();
        for p in self.params() {
            if let Some(g) = dp.get(&p.name) {
                let t = Tensor::new(p.value.shape().to_vec(), g.clone())
                    .expect("param grad matches param shape");
                param_grads.insert(p.name.clone(), t);
            }
        }
        GradientBundle { input_grad, param_grads }
    }

    // ── parameter access ────────────────────────────────────────────

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.nodes.iter().flat_map(|n| n.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.nodes.iter_mut().flat_map(|n| n.params.iter_mut())
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params_mut().find(|p| p.name == name)
    }

    /// Freezes or unfreezes every trainable parameter.
    pub fn set_all_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            if p.role == ParamRole::Trainable {
                p.frozen = frozen;
            }
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params().filter(|p| p.role == ParamRole::Trainable).all(|p| p.frozen)
    }

    /// Switches every batch-norm node between frozen and batch statistics.
    pub fn set_bn_frozen_stats(&mut self, frozen: bool) {
        for node in &mut self.nodes {
            if let Op::BatchNorm { frozen_stats, .. } = &mut node.op {
                *frozen_stats = frozen;
            }
        }
    }

    pub fn bn_all_frozen_stats(&self) -> bool {
        self.nodes.iter().all(|n| match n.op {
            Op::BatchNorm { frozen_stats, .. } => frozen_stats,
            _ => true,
        })
    }

    /// Momentum update of running statistics from one batch, for batch-norm
    /// nodes in batch-statistics mode. No-op for frozen nodes.
    pub fn update_bn_running_stats(&mut self, batch: &Tensor, momentum: f32) -> Result<()> {
        let n = self.check_batch(batch)?;
        let trace = self.eval_in::<f32>(batch.data(), n);
        for id in 0..self.nodes.len() {
            let Op::BatchNorm { frozen_stats, .. } = self.nodes[id].op else { continue };
            if frozen_stats {
                continue;
            }
            let stats = trace.bn_stats[id].as_ref().expect("bn stats recorded");
            let (mean, var) = (stats.mean.clone(), stats.var.clone());
            let node = &mut self.nodes[id];
            for (slot, fresh) in [(2, mean), (3, var)] {
                let buf = node.params[slot].value.data_mut();
                for (r, b) in buf.iter_mut().zip(fresh) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
        Ok(())
    }

    /// Smallest distance of any ReLU pre-activation or clamp input to its
    /// kink, over the whole batch. Finite-difference checks resample
    /// points whose margin is below the probe step, where the one-sided
    /// derivative genuinely differs from the two-sided quotient.
    pub fn kink_margin(&self, batch: &Tensor) -> Result<f32> {
        let n = self.check_batch(batch)?;
        let trace = self.eval_in::<f32>(batch.data(), n);
        let mut margin = f32::INFINITY;
        for (id, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Relu => {
                    for &v in &trace.acts[node.inputs[0]] {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Clamp { lo, hi } => {
                    for &v in &trace.acts[node.inputs[0]] {
                        margin = margin.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                _ => {
                    let _ = id;
                }
            }
        }
        Ok(margin)
    }

    /// Raw little-endian bytes of every parameter and buffer, in graph
    /// order. Bitwise-equal byte strings mean bitwise-equal models.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_dense() -> ModelGraph {
        let mut b = GraphBuilder::new(vec![2]);
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = b.dense(b.input(), w, Tensor::zeros(vec![2])).unwrap();
        b.finish(d, OutputMode::Logits)
    }

    #[test]
    fn identity_dense_forwards_input() {
        let g = identity_dense();
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(g.forward(&x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn probability_mode_rows_sum_to_one() {
        let mut g = identity_dense();
        g.set_output_mode(OutputMode::Probabilities);
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let p = g.forward(&x).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_window_sum() {
        let mut b = GraphBuilder::new(vec![1, 3, 3]);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let c = b.conv2d(b.input(), 3, 0, w, Tensor::zeros(vec![1])).unwrap();
        let flat = b.flatten(c);
        let g = b.finish(flat, OutputMode::Logits);
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
        assert_eq!(g.forward(&x).unwrap().data(), &[9.0]);
    }

    #[test]
    fn uniform_prediction_loss_is_ln2() {
        let g = identity_dense();
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let loss = g.loss(&x, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn frozen_params_absent_from_grads() {
        let mut g = identity_dense();
        g.param_mut("dense0.weight").unwrap().frozen = true;
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let (_, grads) = g.backward_ce(&x, &[1]).unwrap();
        assert!(!grads.param_grads.contains_key("dense0.weight"));
        assert!(grads.param_grads.contains_key("dense0.bias"));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = identity_dense();
        let x = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        let err = g.forward(&x).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[1, 3]"), "{err}");
    }

    #[test]
    fn label_out_of_range_names_index() {
        let g = identity_dense();
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let err = g.loss(&x, &[5]).unwrap_err().to_string();
        assert!(err.contains("label 5 at index 0"), "{err}");
    }

    #[test]
    fn terminal_softmax_fuses_with_loss() {
        let mut b = GraphBuilder::new(vec![2]);
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = b.dense(b.input(), w, Tensor::zeros(vec![2])).unwrap();
        let s = b.softmax(d).unwrap();
        let g = b.finish(s, OutputMode::Probabilities);
        let x = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        // Loss must equal CE computed from the logits, not a double softmax.
        let expected = {
            let z = [2.0f64, -1.0];
            let lse = (z[0].exp() + z[1].exp()).ln();
            lse - z[0]
        };
        assert!((g.loss(&x, &[0]).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn forward_is_deterministic() {
        let g = identity_dense();
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        let a = g.forward(&x).unwrap();
        let b = g.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
