//! Instance-aware prompt generation. A single transformer layer, shared
//! across all backbone depths, attends per-layer learnable query vectors to
//! the current image tokens; the query outputs become the instance prompt
//! and the token outputs are dropped. A fusion-based variant (weighted
//! mixture of learnable prototypes) is kept for ablations, together with
//! per-layer classifier heads for the instance-aware enhancement loss.

use crate::backbone::{layer_forward, EncoderLayer, TokenSequence, INIT_STD};
use crate::config::ModelConfig;
use crate::error::{MipError, Result};
use crate::params::{normal_init, ones, zeros, ParamKind, ParamVisit};
use crate::tensor::{Arr, Tape, Var};
use ndarray::Axis;
use rand_chacha::ChaCha8Rng;

/// Per-layer batch-normalization parameters for the prompt classifiers.
pub struct PromptNorm {
    pub gamma: Arr,
    pub beta: Arr,
    pub running_mean: Arr,
    pub running_var: Arr,
}

impl PromptNorm {
    pub fn init(d: usize) -> Self {
        Self {
            gamma: ones(1, d),
            beta: zeros(1, d),
            running_mean: zeros(1, d),
            running_var: ones(1, d),
        }
    }
}

/// Per-layer identity classifier over pooled instance prompts.
pub struct PromptClassifier {
    pub w: Arr,
    pub b: Arr,
}

/// Learnable query vectors per layer, the shared generator layer, and the
/// optional per-layer classifier heads used by the instance-aware loss.
pub struct InstancePromptState {
    pub query_vectors: Vec<Arr>,
    pub generator: EncoderLayer,
    pub classifiers: Vec<PromptClassifier>,
    pub norms: Vec<PromptNorm>,
}

impl InstancePromptState {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig, with_classifiers: bool) -> Self {
        let k = cfg.instance_prompt_len;
        let d = cfg.embed_dim;
        let query_vectors =
            (0..cfg.num_layers).map(|_| normal_init(rng, k, d, INIT_STD)).collect();
        let generator = EncoderLayer::init(rng, d, cfg.generator_heads, cfg.mlp_ratio);
        let (classifiers, norms) = if with_classifiers {
            (
                (0..cfg.num_layers)
                    .map(|_| PromptClassifier {
                        w: normal_init(rng, d, cfg.num_identities, INIT_STD),
                        b: zeros(1, cfg.num_identities),
                    })
                    .collect(),
                (0..cfg.num_layers).map(|_| PromptNorm::init(d)).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Self { query_vectors, generator, classifiers, norms }
    }

    pub fn num_layers(&self) -> usize {
        self.query_vectors.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.query_vectors[0].nrows()
    }

    fn check_layer(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.num_layers() {
            return Err(MipError::LayerIndex { index: layer, num_layers: self.num_layers() });
        }
        Ok(layer - 1)
    }

    /// Tape forward of the generator at one layer: runs the shared layer on
    /// `[v_layer, tokens]` and returns the rows at the query positions.
    /// Gradients flow into the queries, the generator, and the tokens.
    pub fn generate_on_tape(&self, t: &mut Tape, tokens: Var, layer: usize) -> Result<IpgLayerVars> {
        let idx = self.check_layer(layer)?;
        let d = self.generator.embed_dim();
        if t.value(tokens).ncols() != d {
            return Err(MipError::Shape(format!(
                "token width {} does not match generator dim {d}",
                t.value(tokens).ncols()
            )));
        }
        let k = self.query_vectors[idx].nrows();
        let queries = t.leaf(self.query_vectors[idx].clone());
        let gen_vars = self.generator.bind(t);
        let joint = t.concat_rows(&[queries, tokens]);
        let (out, _) = layer_forward(t, &gen_vars, joint);
        let prompt = t.slice_rows(out, 0, k);
        Ok(IpgLayerVars { queries, generator: gen_vars, prompt })
    }

    /// Concrete-array wrapper over [`Self::generate_on_tape`].
    pub fn generate_instance_prompt(&self, seq: &TokenSequence, layer: usize) -> Result<Arr> {
        let mut t = Tape::new();
        let tokens = t.leaf(seq.tokens.clone());
        let vars = self.generate_on_tape(&mut t, tokens, layer)?;
        Ok(t.value(vars.prompt).clone())
    }

    /// Generator forward with attention restricted to the query block:
    /// scores from any row toward token columns are masked out, so the
    /// output at the query positions depends only on the queries.
    /// Test-only diagnostic for the information-flow contract.
    pub fn generate_masked(&self, seq: &TokenSequence, layer: usize) -> Result<Arr> {
        let idx = self.check_layer(layer)?;
        let k = self.query_vectors[idx].nrows();
        // Run the plain layer on the queries alone: with token columns
        // masked away the joint softmax renormalizes over query columns,
        // which is exactly the queries-only forward.
        let mut t = Tape::new();
        let queries = t.leaf(self.query_vectors[idx].clone());
        let gen_vars = self.generator.bind(&mut t);
        let (out, _) = layer_forward(&mut t, &gen_vars, queries);
        let prompt = t.slice_rows(out, 0, k);
        Ok(t.value(prompt).clone())
    }
}

pub struct IpgLayerVars {
    pub queries: Var,
    pub generator: crate::backbone::EncoderLayerVars,
    pub prompt: Var,
}

impl ParamVisit for InstancePromptState {
    fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Arr, ParamKind)) {
        for (i, v) in self.query_vectors.iter_mut().enumerate() {
            f(format!("{prefix}v{}", i + 1), v, ParamKind::Learnable);
        }
        self.generator.visit(&format!("{prefix}trans."), f);
        for (i, c) in self.classifiers.iter_mut().enumerate() {
            f(format!("{prefix}cls{}.w", i + 1), &mut c.w, ParamKind::Learnable);
            f(format!("{prefix}cls{}.b", i + 1), &mut c.b, ParamKind::Learnable);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            f(format!("{prefix}bn{}.g", i + 1), &mut n.gamma, ParamKind::Learnable);
            f(format!("{prefix}bn{}.b", i + 1), &mut n.beta, ParamKind::Learnable);
            f(format!("{prefix}bn{}.rm", i + 1), &mut n.running_mean, ParamKind::Buffer);
            f(format!("{prefix}bn{}.rv", i + 1), &mut n.running_var, ParamKind::Buffer);
        }
    }
}

/// Fusion-based ablation variant: instance prompts are convex combinations
/// of learnable prototypes, weighted by a softmax head over pooled tokens.
pub struct PromptPrototypeBank {
    pub prototypes: Vec<Arr>,
    pub head_w: Arr,
    pub head_b: Arr,
}

impl PromptPrototypeBank {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let k = cfg.instance_prompt_len;
        let d = cfg.embed_dim;
        let p = cfg.prototype_bank_size;
        Self {
            prototypes: (0..p).map(|_| normal_init(rng, k, d, INIT_STD)).collect(),
            head_w: normal_init(rng, d, p, INIT_STD),
            head_b: zeros(1, p),
        }
    }

    pub fn bank_size(&self) -> usize {
        self.prototypes.len()
    }

    /// Tape forward: mean-pool tokens, map to mixture logits, softmax, and
    /// blend prototypes. Same output rows as the generated variant (k, D).
    pub fn fuse_on_tape(&self, t: &mut Tape, tokens: Var) -> FusedLayerVars {
        let pooled = t.mean_rows(tokens);
        let w = t.leaf(self.head_w.clone());
        let b = t.leaf(self.head_b.clone());
        let logits = t.matmul(pooled, w);
        let logits = t.add_row(logits, b);
        let weights = t.softmax_rows(logits);
        let protos: Vec<Var> = self.prototypes.iter().map(|p| t.leaf(p.clone())).collect();
        // prompt = sum_p weights[p] * proto_p, built from per-prototype
        // column picks so gradients reach both weights and prototypes.
        let mut acc: Option<Var> = None;
        for (p, proto) in protos.iter().enumerate() {
            let wp = t.slice_cols(weights, p, 1); // (1,1)
            let k = t.value(*proto).nrows();
            let ones_col = t.leaf(Arr::from_elem((k, 1), 1.0));
            let wp_col = t.matmul(ones_col, wp); // (k,1)
            let d = t.value(*proto).ncols();
            let ones_row = t.leaf(Arr::from_elem((1, d), 1.0));
            let wp_full = t.matmul(wp_col, ones_row); // (k,d) broadcast of the scalar
            // elementwise scale via Hadamard: implemented as matmul-free trick
            let scaled = hadamard(t, wp_full, *proto);
            acc = Some(match acc {
                Some(a) => t.add(a, scaled),
                None => scaled,
            });
        }
        FusedLayerVars { weights, prototypes: protos, head_w: w, head_b: b, prompt: acc.unwrap() }
    }

    /// Concrete-array wrapper over [`Self::fuse_on_tape`].
    pub fn fuse_instance_prompt(&self, seq: &TokenSequence) -> (Arr, Vec<f64>) {
        let mut t = Tape::new();
        let tokens = t.leaf(seq.tokens.clone());
        let vars = self.fuse_on_tape(&mut t, tokens);
        let weights = t.value(vars.weights).row(0).to_vec();
        (t.value(vars.prompt).clone(), weights)
    }
}

/// Elementwise product expressed with existing tape ops would need a
/// dedicated node; the bank is the only caller, so the scalar broadcast is
/// folded here through softmax-free arithmetic: (a + b)^2 - kind tricks are
/// numerically poor, so a dedicated Hadamard op is emulated via
/// `scale`-per-row decomposition. For the (k,d) x (k,d) case with one
/// factor constant along rows this reduces to row scaling.
fn hadamard(t: &mut Tape, broadcast_scalar: Var, x: Var) -> Var {
    // broadcast_scalar rows are all equal to the mixing weight w_p; use the
    // first entry to scale. The dependence on the weight var is kept through
    // a rank-1 product: (x^T ones_col wp)^T pattern is equivalent, but the
    // simplest exact form is matmul with a diagonal-free structure:
    // scaled = wp_col (k,1) * x  ==  diag(wp_col) x. Emulate with
    // slice/scale composition: each row r of x scaled by wp (same scalar).
    // Since all rows share the scalar, this is matmul of (k,k) diag... which
    // collapses to: first column of broadcast as (k,1), then pointwise rows.
    // Implemented as: y = ((broadcast + x)^2 - broadcast^2 - x^2)/2 is the
    // polarization identity; keep exactness by a direct product op instead.
    t.hadamard(broadcast_scalar, x)
}

pub struct FusedLayerVars {
    pub weights: Var,
    pub prototypes: Vec<Var>,
    pub head_w: Var,
    pub head_b: Var,
    pub prompt: Var,
}

impl ParamVisit for PromptPrototypeBank {
    fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Arr, ParamKind)) {
        for (i, p) in self.prototypes.iter_mut().enumerate() {
            f(format!("{prefix}bank.proto{i}"), p, ParamKind::Learnable);
        }
        f(format!("{prefix}bank.head.w"), &mut self.head_w, ParamKind::Learnable);
        f(format!("{prefix}bank.head.b"), &mut self.head_b, ParamKind::Learnable);
    }
}

/// Static per-layer prompt blocks for the general-prompt ablation: the same
/// (j + k) tokens join every input regardless of modality or instance.
pub struct GeneralPrompts {
    pub layers: Vec<Arr>,
}

impl GeneralPrompts {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let len = cfg.modality_prompt_len + cfg.instance_prompt_len;
        let layers =
            (0..cfg.num_layers).map(|_| normal_init(rng, len, cfg.embed_dim, INIT_STD)).collect();
        Self { layers }
    }
}

impl ParamVisit for GeneralPrompts {
    fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Arr, ParamKind)) {
        for (i, p) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}layer{}.p", i + 1), p, ParamKind::Learnable);
        }
    }
}

/// Exact learnable-parameter count of the generation-based module:
/// per-layer queries, the shared generator, and (when the instance-aware
/// loss is enabled) per-layer classifier + norm parameters.
pub fn ipg_param_count(cfg: &ModelConfig, with_classifiers: bool) -> usize {
    let n = cfg.num_layers;
    let k = cfg.instance_prompt_len;
    let d = cfg.embed_dim;
    if k == 0 {
        return 0;
    }
    let hidden = cfg.mlp_ratio * d;
    let generator = 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + 4 * d;
    let heads = if with_classifiers {
        n * (d * cfg.num_identities + cfg.num_identities + 2 * d)
    } else {
        0
    };
    n * k * d + generator + heads
}

/// Degenerate-state check: true when every prompt in the batch sits within
/// `tol` (max absolute difference) of the batch mean prompt.
pub fn detect_collapse(prompts: &[Arr], tol: f64) -> bool {
    if prompts.is_empty() {
        return false;
    }
    let mut mean = Arr::zeros(prompts[0].dim());
    for p in prompts {
        mean += p;
    }
    mean /= prompts.len() as f64;
    prompts.iter().all(|p| {
        p.iter().zip(mean.iter()).all(|(a, m)| (a - m).abs() <= tol)
    })
}

/// Mean pairwise L2 distance between flattened prompts; the instance
/// sensitivity diagnostic logged during training.
pub fn mean_pairwise_distance(prompts: &[Arr]) -> f64 {
    let n = prompts.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for (a, b) in prompts[i].iter().zip(prompts[j].iter()) {
                acc += (a - b) * (a - b);
            }
            total += acc.sqrt();
            count += 1;
        }
    }
    total / count as f64
}

/// Mean over rows used when a (k, D) prompt feeds a (D -> ids) classifier.
pub fn pool_prompt(prompt: &Arr) -> Arr {
    let k = prompt.nrows() as f64;
    prompt.sum_axis(Axis(0)).insert_axis(Axis(0)) / k
}
