//! Model zoo: residual denoising front-end, small classification backbones,
//! front-end + backbone composites, and the randomized ensemble wrapper.
//!
//! Every architecture is described by a serializable [`ModelSpec`] and built
//! deterministically from a seed, so checkpoints can rebuild the graph and
//! then overwrite its parameters.

use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GradientBundle, GraphBuilder, ModelGraph, NodeId, OutputMode};
use crate::rng::{substream, tag};
use crate::tensor::Tensor;

/// Weight initialization for the front-end's convolution stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// All convolution weights and biases zero: the residual branch emits
    /// nothing and the front-end is exactly the identity map.
    Zero,
    /// Gaussian weights with a small standard deviation; the residual
    /// branch output stays far inside the 0.05 near-identity budget.
    SmallRandom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontEndConfig {
    pub channels: usize,
    pub depth: usize,
    pub skip: bool,
    pub init: Init,
    /// Standard deviation for `Init::SmallRandom`.
    pub init_std: f32,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        FrontEndConfig { channels: 16, depth: 5, skip: true, init: Init::SmallRandom, init_std: 1e-3 }
    }
}

/// Serializable architecture description; `build` is deterministic in the
/// seed, and checkpoint loading overwrites the parameters afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Mlp { input: Vec<usize>, hidden: Vec<usize>, classes: usize },
    SmallConvNet { input: Vec<usize>, features: usize, blocks: usize, classes: usize },
    FrontEnd { input: Vec<usize>, config: FrontEndConfig },
    Composite { front: Box<ModelSpec>, back: Box<ModelSpec>, back_frozen: bool },
    Ensemble { members: Vec<ModelSpec>, probs: Vec<f64>, seed: u64 },
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        match self {
            ModelSpec::Mlp { input, hidden, classes } => {
                Ok(Model::Graph(build_mlp(input, hidden, *classes, seed)?))
            }
            ModelSpec::SmallConvNet { input, features, blocks, classes } => {
                Ok(Model::Graph(build_small_convnet(input, *features, *blocks, *classes, seed)?))
            }
            ModelSpec::FrontEnd { input, config } => {
                Ok(Model::Graph(frontend_new(input, config, seed)?))
            }
            ModelSpec::Composite { front, back, back_frozen } => {
                let front = front.build(seed)?.into_graph()?;
                let back = back.build(seed ^ 0x5eed_c0de)?.into_graph()?;
                Ok(Model::Composite(CompositeModel::new(front, back, *back_frozen)?))
            }
            ModelSpec::Ensemble { members, probs, seed: draw_seed } => {
                let built: Result<Vec<Model>> = members
                    .iter()
                    .enumerate()
                    .map(|(i, spec)| spec.build(seed.wrapping_add(i as u64 + 1)))
                    .collect();
                let ensemble = RandomizedEnsemble::new(
                    built?.into_iter().map(Arc::new).collect(),
                    probs.clone(),
                    *draw_seed,
                )?;
                Ok(Model::Ensemble(ensemble))
            }
        }
    }
}

// ── initializers ────────────────────────────────────────────────────

fn he_weights<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    Tensor::randn(rng, shape, std)
}

// ── front-end ───────────────────────────────────────────────────────

/// Builds the residual denoising front-end: a channel-preserving stack of
/// convolutions (first conv+ReLU, middle conv+BN+ReLU, last conv) whose
/// output is subtracted from the input, so the stack learns the noise.
///
/// With all weights zero the subtraction is of an all-zero image and the
/// front-end is exactly the identity.
pub fn frontend_new(input: &[usize], config: &FrontEndConfig, seed: u64) -> Result<ModelGraph> {
    if config.depth < 2 {
        return Err(Error::invalid("frontend_new", format!("depth must be >= 2, got {}", config.depth)));
    }
    if input.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "frontend_new expects [C, H, W] input",
            expected: vec![0, 0, 0],
            got: input.to_vec(),
        });
    }
    let image_channels = input[0];
    let width = config.channels;
    let conv_init = |rng: &mut rand_chacha::ChaCha8Rng, cout: usize, cin: usize| -> Tensor {
        match config.init {
            Init::Zero => Tensor::zeros(vec![cout, cin, 3, 3]),
            Init::SmallRandom => Tensor::randn(rng, vec![cout, cin, 3, 3], config.init_std),
        }
    };

    let mut b = GraphBuilder::new(input.to_vec());
    let x = b.input();
    let mut rng = substream(seed, &[tag::PARAM_INIT]);

    let w0 = conv_init(&mut rng, width, image_channels);
    let mut cur = b.conv2d(x, 3, 1, w0, Tensor::zeros(vec![width]))?;
    cur = b.relu(cur);
    for _ in 0..config.depth.saturating_sub(2) {
        let w = conv_init(&mut rng, width, width);
        cur = b.conv2d(cur, 3, 1, w, Tensor::zeros(vec![width]))?;
        cur = b.batch_norm(cur, 1e-5, true)?;
        cur = b.relu(cur);
    }
    let w_last = conv_init(&mut rng, image_channels, width);
    let noise = b.conv2d(cur, 3, 1, w_last, Tensor::zeros(vec![image_channels]))?;

    let out = if config.skip {
        let neg = b.scale(noise, -1.0);
        b.add(x, neg)?
    } else {
        noise
    };
    Ok(b.finish(out, OutputMode::Logits))
}

// ── backbones ───────────────────────────────────────────────────────

pub fn build_mlp(input: &[usize], hidden: &[usize], classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(input.to_vec());
    let mut rng = substream(seed, &[tag::PARAM_INIT]);
    let mut cur = b.flatten(b.input());
    let mut fan_in: usize = input.iter().product();
    for &h in hidden {
        let w = he_weights(&mut rng, vec![h, fan_in], fan_in);
        cur = b.dense(cur, w, Tensor::zeros(vec![h]))?;
        cur = b.relu(cur);
        fan_in = h;
    }
    let w = he_weights(&mut rng, vec![classes, fan_in], fan_in);
    let out = b.dense(cur, w, Tensor::zeros(vec![classes]))?;
    Ok(b.finish(out, OutputMode::Logits))
}

/// Small convolutional backbone: a stem convolution plus `blocks` residual
/// blocks (conv+ReLU with an elementwise skip), then a dense head.
pub fn build_small_convnet(
    input: &[usize],
    features: usize,
    blocks: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if input.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "small_convnet expects [C, H, W] input",
            expected: vec![0, 0, 0],
            got: input.to_vec(),
        });
    }
    let (c, h, w) = (input[0], input[1], input[2]);
    let mut b = GraphBuilder::new(input.to_vec());
    let mut rng = substream(seed, &[tag::PARAM_INIT]);

    let stem_w = he_weights(&mut rng, vec![features, c, 3, 3], c * 9);
    let mut cur = b.conv2d(b.input(), 3, 1, stem_w, Tensor::zeros(vec![features]))?;
    cur = b.relu(cur);
    for _ in 0..blocks {
        let bw = he_weights(&mut rng, vec![features, features, 3, 3], features * 9);
        let conv = b.conv2d(cur, 3, 1, bw, Tensor::zeros(vec![features]))?;
        let act = b.relu(conv);
        cur = b.add(act, cur)?;
    }
    let flat = b.flatten(cur);
    let fan_in = features * h * w;
    let head = he_weights(&mut rng, vec![classes, fan_in], fan_in);
    let out = b.dense(flat, head, Tensor::zeros(vec![classes]))?;
    Ok(b.finish(out, OutputMode::Logits))
}

// ── composite ───────────────────────────────────────────────────────

/// Front-end + backbone composition `back(front(x))`. With the backbone
/// frozen, backward passes yield gradients only for front-end parameters.
#[derive(Debug, Clone)]
pub struct CompositeModel {
    front: ModelGraph,
    back: ModelGraph,
    back_frozen: bool,
}

impl CompositeModel {
    pub fn new(front: ModelGraph, mut back: ModelGraph, back_frozen: bool) -> Result<Self> {
        let front_out = front
            .nodes()
            .last()
            .map(|n| n.out_shape.clone())
            .unwrap_or_default();
        // The front-end preserves shape, so its input shape is what the
        // backbone must accept. Checked here so BPDA can feed raw inputs
        // to the backbone.
        if front.input_shape() != back.input_shape() || front_out != back.input_shape() {
            return Err(Error::ShapeMismatch {
                context: "composite: front-end output must match backbone input",
                expected: back.input_shape().to_vec(),
                got: front_out,
            });
        }
        if back_frozen {
            back.set_all_frozen(true);
        }
        Ok(CompositeModel { front, back, back_frozen })
    }

    pub fn front(&self) -> &ModelGraph {
        &self.front
    }

    pub fn front_mut(&mut self) -> &mut ModelGraph {
        &mut self.front
    }

    pub fn back(&self) -> &ModelGraph {
        &self.back
    }

    pub fn back_mut(&mut self) -> &mut ModelGraph {
        &mut self.back
    }

    pub fn back_frozen(&self) -> bool {
        self.back_frozen
    }

    pub fn input_shape(&self) -> &[usize] {
        self.front.input_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.back.num_classes()
    }

    /// The denoised image `front(x)`.
    pub fn preprocess(&self, batch: &Tensor) -> Result<Tensor> {
        self.front.forward(batch)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.back.logits(&self.front.forward(batch)?)
    }

    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        self.back.loss(&self.front.forward(batch)?, labels)
    }

    /// Loss and gradients through the whole composition. Backbone parameter
    /// gradients appear (prefixed `back.`) only when the backbone is
    /// unfrozen; front-end gradients are prefixed `front.`.
    pub fn backward_ce(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, GradientBundle)> {
        let z = self.front.forward(batch)?;
        let (loss, back_bundle) = self.back.backward_ce(&z, labels)?;
        let front_bundle = self.front.backward_vjp(batch, &back_bundle.input_grad)?;
        let mut param_grads = std::collections::BTreeMap::new();
        for (k, v) in front_bundle.param_grads {
            param_grads.insert(format!("front.{k}"), v);
        }
        for (k, v) in back_bundle.param_grads {
            param_grads.insert(format!("back.{k}"), v);
        }
        Ok((loss, GradientBundle { input_grad: front_bundle.input_grad, param_grads }))
    }
}

// ── randomized ensemble ─────────────────────────────────────────────

/// A set of models, one of which is drawn at random for every prediction
/// or gradient query. The draw stream is seeded and replayable; callers
/// that fan out across workers fork per-worker streams with `fork`.
#[derive(Debug)]
pub struct RandomizedEnsemble {
    members: Vec<Arc<Model>>,
    probs: Vec<f64>,
    seed: u64,
    stream: Mutex<rand_chacha::ChaCha8Rng>,
}

impl Clone for RandomizedEnsemble {
    /// Clones restart the draw sequence from the ensemble seed.
    fn clone(&self) -> Self {
        RandomizedEnsemble {
            members: self.members.clone(),
            probs: self.probs.clone(),
            seed: self.seed,
            stream: Mutex::new(substream(self.seed, &[tag::ENSEMBLE_DRAW])),
        }
    }
}

impl RandomizedEnsemble {
    pub fn new(members: Vec<Arc<Model>>, probs: Vec<f64>, seed: u64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble", "at least one member required"));
        }
        if probs.len() != members.len() {
            return Err(Error::invalid(
                "ensemble",
                format!("{} probabilities for {} members", probs.len(), members.len()),
            ));
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid("ensemble", "selection probabilities must be >= 0"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("ensemble", format!("probabilities sum to {total}, expected 1")));
        }
        if members.iter().any(|m| matches!(**m, Model::Ensemble(_))) {
            return Err(Error::invalid("ensemble", "nested ensembles are not supported"));
        }
        let shape = members[0].input_shape().to_vec();
        let classes = members[0].num_classes();
        for m in &members[1..] {
            if m.input_shape() != shape || m.num_classes() != classes {
                return Err(Error::ShapeMismatch {
                    context: "ensemble members must share input/label spaces",
                    expected: shape,
                    got: m.input_shape().to_vec(),
                });
            }
        }
        Ok(RandomizedEnsemble {
            members,
            probs,
            seed,
            stream: Mutex::new(substream(seed, &[tag::ENSEMBLE_DRAW])),
        })
    }

    pub fn uniform(members: Vec<Arc<Model>>, seed: u64) -> Result<Self> {
        let n = members.len();
        Self::new(members, vec![1.0 / n as f64; n], seed)
    }

    pub fn members(&self) -> &[Arc<Model>] {
        &self.members
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent draw stream for a worker; distinct `worker` values give
    /// unrelated sequences while staying reproducible from the seed.
    pub fn fork(&self, worker: u64) -> RandomizedEnsemble {
        RandomizedEnsemble {
            members: self.members.clone(),
            probs: self.probs.clone(),
            seed: self.seed,
            stream: Mutex::new(substream(self.seed, &[tag::ENSEMBLE_DRAW, worker])),
        }
    }

    /// Draws one member index from the shared stream.
    pub fn draw(&self) -> usize {
        let mut stream = self.stream.lock().expect("ensemble stream poisoned");
        let u: f64 = stream.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    /// Forward of exactly one member, chosen by the seeded stream.
    pub fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.members[self.draw()].logits(batch)
    }

    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        self.members[self.draw()].loss(batch, labels)
    }

    /// One member's input gradient; each call re-draws the member.
    pub fn grad_input(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        self.members[self.draw()].grad_input(batch, labels)
    }
}

// ── unified model ───────────────────────────────────────────────────

/// Any attackable model: a bare graph, a front-end composite, or a
/// randomized ensemble.
#[derive(Debug, Clone)]
pub enum Model {
    Graph(ModelGraph),
    Composite(CompositeModel),
    Ensemble(RandomizedEnsemble),
}

impl Model {
    pub fn input_shape(&self) -> &[usize] {
        match self {
            Model::Graph(g) => g.input_shape(),
            Model::Composite(c) => c.input_shape(),
            Model::Ensemble(e) => e.members[0].input_shape(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Graph(g) => g.num_classes(),
            Model::Composite(c) => c.num_classes(),
            Model::Ensemble(e) => e.members[0].num_classes(),
        }
    }

    /// Logits of the model; for ensembles, of one freshly drawn member.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        match self {
            Model::Graph(g) => g.logits(batch),
            Model::Composite(c) => c.logits(batch),
            Model::Ensemble(e) => e.predict_logits(batch),
        }
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }

    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        match self {
            Model::Graph(g) => g.loss(batch, labels),
            Model::Composite(c) => c.loss(batch, labels),
            Model::Ensemble(e) => e.loss(batch, labels),
        }
    }

    /// Cross-entropy loss and its gradient with respect to the input.
    pub fn grad_input(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        match self {
            Model::Graph(g) => {
                let (loss, b) = g.backward_ce(batch, labels)?;
                Ok((loss, b.input_grad))
            }
            Model::Composite(c) => {
                let (loss, b) = c.backward_ce(batch, labels)?;
                Ok((loss, b.input_grad))
            }
            Model::Ensemble(e) => e.grad_input(batch, labels),
        }
    }

    /// Full backward for training; ensembles are not trainable as a unit.
    pub fn backward_trainable(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, GradientBundle)> {
        match self {
            Model::Graph(g) => g.backward_ce(batch, labels),
            Model::Composite(c) => c.backward_ce(batch, labels),
            Model::Ensemble(_) => Err(Error::invalid("train", "randomized ensembles are not trained as a unit")),
        }
    }

    pub fn as_composite(&self) -> Option<&CompositeModel> {
        match self {
            Model::Composite(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_ensemble(&self) -> Option<&RandomizedEnsemble> {
        match self {
            Model::Ensemble(e) => Some(e),
            _ => None,
        }
    }

    pub fn into_graph(self) -> Result<ModelGraph> {
        match self {
            Model::Graph(g) => Ok(g),
            _ => Err(Error::invalid("model", "expected a plain graph model")),
        }
    }

    /// Concatenated parameter bytes of every contained graph.
    pub fn param_bytes(&self) -> Vec<u8> {
        match self {
            Model::Graph(g) => g.param_bytes(),
            Model::Composite(c) => {
                let mut b = c.front.param_bytes();
                b.extend(c.back.param_bytes());
                b
            }
            Model::Ensemble(e) => {
                let mut b = Vec::new();
                for m in &e.members {
                    b.extend(m.param_bytes());
                }
                b
            }
        }
    }

    /// For ensemble targets evaluated in parallel, a per-worker handle with
    /// a forked draw stream; other models are cheap clones.
    pub fn fork_for_worker(&self, worker: u64) -> Model {
        match self {
            Model::Ensemble(e) => Model::Ensemble(e.fork(worker)),
            other => other.clone(),
        }
    }
}

/// Identity check used by tests: does a zero-weight front-end composite
/// classify every input exactly like its bare backbone.
pub fn argmax_matches(a: &Tensor, b: &Tensor) -> bool {
    a.argmax_rows() == b.argmax_rows()
}

// Marker re-export so callers can name node ids without importing graph.
pub type GraphNodeId = NodeId;

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, shape: Vec<usize>) -> Tensor {
        let mut rng = substream(seed, &[99]);
        Tensor::rand_uniform(&mut rng, shape, 0.0, 1.0)
    }

    #[test]
    fn zero_init_front_end_is_exact_identity() {
        let cfg = FrontEndConfig { init: Init::Zero, ..FrontEndConfig::default() };
        let fe = frontend_new(&[1, 8, 8], &cfg, 7).unwrap();
        let x = image(1, vec![2, 1, 8, 8]);
        let y = fe.forward(&x).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn small_random_front_end_is_near_identity() {
        let cfg = FrontEndConfig::default();
        let fe = frontend_new(&[1, 8, 8], &cfg, 3).unwrap();
        for i in 0..100 {
            let x = image(i, vec![1, 1, 8, 8]);
            let y = fe.forward(&x).unwrap();
            assert!(x.max_abs_diff(&y) < 0.05, "image {i} deviates");
        }
    }

    #[test]
    fn depth_below_two_rejected() {
        let cfg = FrontEndConfig { depth: 1, ..FrontEndConfig::default() };
        assert!(frontend_new(&[1, 8, 8], &cfg, 0).is_err());
    }

    #[test]
    fn composite_equals_manual_composition() {
        let fe = frontend_new(&[1, 6, 6], &FrontEndConfig::default(), 11).unwrap();
        let bb = build_small_convnet(&[1, 6, 6], 4, 1, 3, 12).unwrap();
        let composite = CompositeModel::new(fe.clone(), bb.clone(), true).unwrap();
        let x = image(5, vec![2, 1, 6, 6]);
        let manual = bb.logits(&fe.forward(&x).unwrap()).unwrap();
        let fused = composite.logits(&x).unwrap();
        assert_eq!(manual.data(), fused.data());
    }

    #[test]
    fn frozen_backbone_gets_no_grads() {
        let fe = frontend_new(&[1, 6, 6], &FrontEndConfig::default(), 11).unwrap();
        let bb = build_small_convnet(&[1, 6, 6], 4, 1, 3, 12).unwrap();
        let composite = CompositeModel::new(fe, bb, true).unwrap();
        let x = image(5, vec![2, 1, 6, 6]);
        let (_, bundle) = composite.backward_ce(&x, &[0, 2]).unwrap();
        assert!(bundle.param_grads.keys().all(|k| k.starts_with("front.")));
        assert!(!bundle.param_grads.is_empty());
    }

    #[test]
    fn zero_front_end_preserves_backbone_decisions() {
        let cfg = FrontEndConfig { init: Init::Zero, ..FrontEndConfig::default() };
        let fe = frontend_new(&[1, 6, 6], &cfg, 1).unwrap();
        let bb = build_small_convnet(&[1, 6, 6], 4, 1, 3, 12).unwrap();
        let composite = CompositeModel::new(fe, bb.clone(), true).unwrap();
        let x = image(9, vec![8, 1, 6, 6]);
        assert!(argmax_matches(&composite.logits(&x).unwrap(), &bb.logits(&x).unwrap()));
    }

    #[test]
    fn single_member_ensemble_matches_member() {
        let g = build_mlp(&[4], &[8], 2, 3).unwrap();
        let member = Arc::new(Model::Graph(g.clone()));
        let e = RandomizedEnsemble::uniform(vec![member], 42).unwrap();
        let x = image(2, vec![3, 4]);
        assert_eq!(e.predict_logits(&x).unwrap().data(), g.logits(&x).unwrap().data());
    }

    #[test]
    fn identical_members_make_draws_invisible() {
        let g = build_mlp(&[4], &[8], 2, 3).unwrap();
        let members: Vec<_> = (0..3).map(|_| Arc::new(Model::Graph(g.clone()))).collect();
        let e = RandomizedEnsemble::uniform(members, 42).unwrap();
        let x = image(2, vec![1, 4]);
        let first = e.predict_logits(&x).unwrap();
        for _ in 0..5 {
            assert_eq!(e.predict_logits(&x).unwrap().data(), first.data());
        }
    }

    #[test]
    fn uniform_draws_are_balanced() {
        // 3000 seeded queries; binomial(3000, 1/3) is within 150 of 1000
        // except with probability well under 1e-3.
        let g = build_mlp(&[2], &[4], 2, 3).unwrap();
        let members: Vec<_> = (0..3).map(|_| Arc::new(Model::Graph(g.clone()))).collect();
        let e = RandomizedEnsemble::uniform(members, 7).unwrap();
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[e.draw()] += 1;
        }
        for c in counts {
            assert!((c as i64 - 1000).abs() <= 150, "counts {counts:?}");
        }
    }

    #[test]
    fn fixed_seed_replays_draw_sequence() {
        let g = build_mlp(&[2], &[4], 2, 3).unwrap();
        let members: Vec<_> = (0..3).map(|_| Arc::new(Model::Graph(g.clone()))).collect();
        let a = RandomizedEnsemble::uniform(members.clone(), 9).unwrap();
        let b = RandomizedEnsemble::uniform(members, 9).unwrap();
        let seq_a: Vec<_> = (0..50).map(|_| a.draw()).collect();
        let seq_b: Vec<_> = (0..50).map(|_| b.draw()).collect();
        assert_eq!(seq_a, seq_b);
    }

    #[test]
    fn empty_ensemble_rejected() {
        assert!(RandomizedEnsemble::uniform(vec![], 1).is_err());
    }

    #[test]
    fn model_spec_build_is_deterministic() {
        let spec = ModelSpec::SmallConvNet { input: vec![1, 6, 6], features: 4, blocks: 1, classes: 3 };
        let a = spec.build(5).unwrap();
        let b = spec.build(5).unwrap();
        assert_eq!(a.param_bytes(), b.param_bytes());
    }
}
