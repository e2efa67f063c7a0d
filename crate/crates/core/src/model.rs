//! Full network assembly.
//!
//! Input projection, `layers × blocks` of (gated TCN → parallel static and
//! dynamic heterogeneous graph convolution) with residual links, one skip tap
//! per layer, and a two-layer output head.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{average_pool, decentralization_pool, AttentionParams};
use crate::autodiff::{pad_and_transpose_inputs, Tape, Var};
use crate::data::Normalizer;
use crate::error::{HagcnError, Result};
use crate::graph::{
    init_factors_from_seed, materialize_dynamic_slot, materialize_static, DynamicFactors, FactorKind,
    Factors, SeedAdjacency, StaticFactors,
};
use crate::layers::{channel_weights, receptive_field, row_normalize, GcnParams, TcnParams};
use crate::param_tree;
use crate::params::{join, ParamTree};
use crate::tensor::Tensor;

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub disable_static: bool,
    pub disable_dynamic: bool,
    /// One generator channel broadcast over every hidden channel.
    pub homogeneous_graph: bool,
    pub disable_channel_attention: bool,
    /// Global average pooling in place of decentralization pooling.
    pub gap_pooling: bool,
}

/// Architecture hyperparameters. Every field is echoed into run configs and
/// checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub features: usize,
    pub layers: usize,
    pub blocks_per_layer: usize,
    pub dilation_pattern: Vec<usize>,
    pub kernel_size: usize,
    pub hidden_channels: usize,
    pub skip_channels: usize,
    pub end_channels: usize,
    pub tucker_rank: usize,
    pub diffusion_steps: usize,
    pub attention_reduction: usize,
    pub num_slots: usize,
    pub split_tcn: bool,
    pub normalize_adjacency: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 12,
            horizon: 12,
            features: 1,
            layers: 4,
            blocks_per_layer: 2,
            dilation_pattern: vec![1, 2],
            kernel_size: 2,
            hidden_channels: 32,
            skip_channels: 64,
            end_channels: 128,
            tucker_rank: 8,
            diffusion_steps: 2,
            attention_reduction: 4,
            num_slots: 288,
            split_tcn: false,
            normalize_adjacency: false,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("features", self.features),
            ("layers", self.layers),
            ("blocks_per_layer", self.blocks_per_layer),
            ("kernel_size", self.kernel_size),
            ("hidden_channels", self.hidden_channels),
            ("skip_channels", self.skip_channels),
            ("end_channels", self.end_channels),
            ("tucker_rank", self.tucker_rank),
            ("attention_reduction", self.attention_reduction),
            ("num_slots", self.num_slots),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(HagcnError::config(field, "must be positive"));
            }
        }
        if self.dilation_pattern.is_empty() || self.dilation_pattern.contains(&0) {
            return Err(HagcnError::config(
                "dilation_pattern",
                "must be a non-empty list of positive integers",
            ));
        }
        if self.ablation.disable_static && self.ablation.disable_dynamic {
            return Err(HagcnError::config(
                "disable_dynamic",
                "static and dynamic modules cannot both be disabled",
            ));
        }
        if self.hidden_channels % self.attention_reduction != 0 {
            return Err(HagcnError::config(
                "attention_reduction",
                format!(
                    "must divide hidden_channels ({} % {} != 0)",
                    self.hidden_channels, self.attention_reduction
                ),
            ));
        }
        Ok(())
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.layers * self.blocks_per_layer)
            .map(|k| self.dilation_pattern[k % self.dilation_pattern.len()])
            .collect()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.kernel_size, &self.dilations())
    }

    /// Temporal length after left-padding the input window.
    pub fn padded_len(&self) -> usize {
        self.input_len.max(self.receptive_field())
    }

    /// Channel count of the adjacency generators.
    pub fn generator_channels(&self) -> usize {
        if self.ablation.homogeneous_graph {
            1
        } else {
            self.hidden_channels
        }
    }

    fn uses_attention(&self) -> bool {
        !self.ablation.disable_channel_attention
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub tcn: TcnParams<T>,
    /// Separate temporal layer for the dynamic branch when `split_tcn` is set.
    pub tcn_dynamic: Option<TcnParams<T>>,
    pub static_gcn: Option<GcnParams<T>>,
    pub dynamic_gcn: Option<GcnParams<T>>,
}

impl<T> ParamTree<T> for BlockParams<T> {
    type Mapped<U> = BlockParams<U>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            tcn: self.tcn.map(&join(prefix, "tcn"), f),
            tcn_dynamic: ParamTree::map(&self.tcn_dynamic, &join(prefix, "tcn_dynamic"), f),
            static_gcn: ParamTree::map(&self.static_gcn, &join(prefix, "static_gcn"), f),
            dynamic_gcn: ParamTree::map(&self.dynamic_gcn, &join(prefix, "dynamic_gcn"), f),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.tcn.for_each_mut(&join(prefix, "tcn"), f);
        self.tcn_dynamic.for_each_mut(&join(prefix, "tcn_dynamic"), f);
        self.static_gcn.for_each_mut(&join(prefix, "static_gcn"), f);
        self.dynamic_gcn.for_each_mut(&join(prefix, "dynamic_gcn"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub blocks: Vec<BlockParams<T>>,
    pub skip_w: T,
    pub skip_b: T,
}

impl<T> ParamTree<T> for LayerParams<T> {
    type Mapped<U> = LayerParams<U>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerParams<U> {
        LayerParams {
            blocks: self.blocks.map(&join(prefix, "block"), f),
            skip_w: f(&join(prefix, "skip_w"), &self.skip_w),
            skip_b: f(&join(prefix, "skip_b"), &self.skip_b),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.blocks.for_each_mut(&join(prefix, "block"), f);
        f(&join(prefix, "skip_w"), &mut self.skip_w);
        f(&join(prefix, "skip_b"), &mut self.skip_b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = Tensor> {
    pub input_w: T,
    pub input_b: T,
    pub out1_w: T,
    pub out1_b: T,
    pub out2_w: T,
    pub out2_b: T,
}
param_tree!(HeadParams { leaves: [input_w, input_b, out1_w, out1_b, out2_w, out2_b] });

/// Every learnable tensor of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub head: HeadParams<T>,
    pub static_factors: Option<StaticFactors<T>>,
    pub dynamic_factors: Option<DynamicFactors<T>>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            head: self.head.map(prefix, f),
            static_factors: ParamTree::map(&self.static_factors, &join(prefix, "static"), f),
            dynamic_factors: ParamTree::map(&self.dynamic_factors, &join(prefix, "dynamic"), f),
            layers: self.layers.map(&join(prefix, "layer"), f),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.head.for_each_mut(prefix, f);
        self.static_factors.for_each_mut(&join(prefix, "static"), f);
        self.dynamic_factors.for_each_mut(&join(prefix, "dynamic"), f);
        self.layers.for_each_mut(&join(prefix, "layer"), f);
    }
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each("", &mut |_, t| n += t.len());
        n
    }

    pub fn num_nodes(&self) -> usize {
        if let Some(f) = &self.static_factors {
            return f.num_nodes();
        }
        self.dynamic_factors
            .as_ref()
            .map(|f| f.num_nodes())
            .expect("at least one generator")
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each("", &mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// Parameter tensor with the largest Frobenius norm, for diagnostics.
    pub fn largest_norm(&self) -> (String, f64) {
        let mut best = (String::new(), f64::NEG_INFINITY);
        self.for_each("", &mut |name, t| {
            let n = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n <= best.1) {
                best = (name.to_string(), n);
            }
        });
        best
    }
}

/// Closed-form parameter count for a configuration over `n` nodes.
pub fn param_count(config: &ModelConfig, n: usize) -> usize {
    let f = config.hidden_channels;
    let fg = config.generator_channels();
    let m = config.tucker_rank;
    let k1 = config.diffusion_steps + 1;
    let r = f / config.attention_reduction;
    let tcn = 2 * f * f * config.kernel_size;
    let gcn = k1 * f * f + if config.uses_attention() { k1 * 2 * r * f } else { 0 };
    let branches = usize::from(!config.ablation.disable_static) + usize::from(!config.ablation.disable_dynamic);
    let tcn_count = if config.split_tcn && branches == 2 { 2 } else { 1 };
    let per_block = tcn * tcn_count + gcn * branches;
    let per_layer = config.blocks_per_layer * per_block + config.skip_channels * f + config.skip_channels;
    let out_dim = config.horizon * config.features;
    let head = f * config.features
        + f
        + config.end_channels * config.layers * config.skip_channels
        + config.end_channels
        + out_dim * config.end_channels
        + out_dim;
    let generators = if config.ablation.disable_static {
        0
    } else {
        m.pow(3) + (fg + 2 * n) * m
    } + if config.ablation.disable_dynamic {
        0
    } else {
        m.pow(4) + (fg + config.num_slots + 2 * n) * m
    };
    head + config.layers * per_layer + generators
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

/// Builds parameters: Tucker factors fitted to the distance seed, all other
/// weights uniform in `±1/sqrt(fan_in)`.
pub fn build_model(config: &ModelConfig, seed: &SeedAdjacency, rng_seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let n = seed.num_nodes();
    if config.tucker_rank > n {
        return Err(HagcnError::config(
            "tucker_rank",
            format!("embedding size {} exceeds node count {n}", config.tucker_rank),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let f = config.hidden_channels;
    let k = config.kernel_size;
    let r = f / config.attention_reduction;
    let s = config.skip_channels;
    let e = config.end_channels;
    let out_dim = config.horizon * config.features;
    let abl = config.ablation;

    let head = HeadParams {
        input_w: uniform(&mut rng, &[f, config.features], config.features),
        input_b: uniform(&mut rng, &[f], config.features),
        out1_w: uniform(&mut rng, &[e, config.layers * s], config.layers * s),
        out1_b: uniform(&mut rng, &[e], config.layers * s),
        out2_w: uniform(&mut rng, &[out_dim, e], e),
        out2_b: uniform(&mut rng, &[out_dim], e),
    };

    let gcn = |rng: &mut ChaCha8Rng| GcnParams {
        theta: (0..=config.diffusion_steps).map(|_| uniform(rng, &[f, f], f)).collect(),
        attention: if config.uses_attention() {
            (0..=config.diffusion_steps)
                .map(|_| AttentionParams {
                    w1: uniform(rng, &[r, f], f),
                    w2: uniform(rng, &[f, r], r),
                })
                .collect()
        } else {
            Vec::new()
        },
    };
    let tcn = |rng: &mut ChaCha8Rng, dilation: usize| TcnParams {
        z1: uniform(rng, &[f, f, k], f * k),
        z2: uniform(rng, &[f, f, k], f * k),
        dilation,
    };

    let dilations = config.dilations();
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let mut blocks = Vec::with_capacity(config.blocks_per_layer);
        for b in 0..config.blocks_per_layer {
            let dilation = dilations[l * config.blocks_per_layer + b];
            let main = tcn(&mut rng, dilation);
            let tcn_dynamic = (config.split_tcn && !abl.disable_static && !abl.disable_dynamic)
                .then(|| tcn(&mut rng, dilation));
            let static_gcn = (!abl.disable_static).then(|| gcn(&mut rng));
            let dynamic_gcn = (!abl.disable_dynamic).then(|| gcn(&mut rng));
            blocks.push(BlockParams {
                tcn: main,
                tcn_dynamic,
                static_gcn,
                dynamic_gcn,
            });
        }
        layers.push(LayerParams {
            blocks,
            skip_w: uniform(&mut rng, &[s, f], f),
            skip_b: uniform(&mut rng, &[s], f),
        });
    }

    let fg = config.generator_channels();
    let static_factors = if abl.disable_static {
        None
    } else {
        match init_factors_from_seed(seed, fg, config.tucker_rank, 1, FactorKind::Static, rng.random())? {
            Factors::Static(sf) => Some(sf),
            Factors::Dynamic(_) => unreachable!(),
        }
    };
    let dynamic_factors = if abl.disable_dynamic {
        None
    } else {
        match init_factors_from_seed(
            seed,
            fg,
            config.tucker_rank,
            config.num_slots,
            FactorKind::Dynamic,
            rng.random(),
        )? {
            Factors::Dynamic(df) => Some(df),
            Factors::Static(_) => unreachable!(),
        }
    };

    Ok(ModelParams {
        head,
        static_factors,
        dynamic_factors,
        layers,
    })
}

/// Parameter layout for `config` with every tensor zero; used when loading
/// checkpoints.
pub fn zero_params(config: &ModelConfig, n: usize) -> Result<ModelParams> {
    config.validate()?;
    let seed = SeedAdjacency {
        weights: Array2::eye(n),
        neighbor_mask: Array2::from_elem((n, n), false),
        delta: 1.0,
    };
    let mut params = build_model(config, &seed, 0)?;
    params.for_each_mut("", &mut |_, t| t.fill(0.0));
    Ok(params)
}

/// Distinct slots in first-appearance order and the per-sample index into them.
pub fn slot_groups(slots: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut distinct = Vec::new();
    let mut index = HashMap::new();
    let map = slots
        .iter()
        .map(|&s| {
            *index.entry(s).or_insert_with(|| {
                distinct.push(s);
                distinct.len() - 1
            })
        })
        .collect();
    (distinct, map)
}

struct Branch {
    adj: Var,
    pooled: Option<Var>,
    map: Vec<usize>,
}

/// Records the forward pass on `tape` and returns the normalized prediction
/// `(B, Q, N, d)`.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ModelParams<Var>,
    config: &ModelConfig,
    x: &ArrayView4<'_, f64>,
    slots: &[usize],
) -> Result<Var> {
    let (b, p, n, d) = x.dim();
    if p != config.input_len || d != config.features {
        return Err(HagcnError::Shape(format!(
            "input window {:?} does not match P={} d={}",
            x.shape(),
            config.input_len,
            config.features
        )));
    }
    if slots.len() != b {
        return Err(HagcnError::Shape(format!("{} slots for {b} samples", slots.len())));
    }
    if let Some(&bad) = slots.iter().find(|&&s| s >= config.num_slots) {
        return Err(HagcnError::Shape(format!(
            "slot {bad} outside 0..{}",
            config.num_slots
        )));
    }
    let f = config.hidden_channels;
    let prepare = |tape: &mut Tape, adj: Var, map: Vec<usize>| {
        let mut adj = adj;
        if config.ablation.homogeneous_graph {
            adj = tape.broadcast_channels(adj, f);
        }
        if config.normalize_adjacency {
            adj = tape.row_normalize(adj);
        }
        let pooled = config.uses_attention().then(|| {
            if config.ablation.gap_pooling {
                tape.average_pool(adj)
            } else {
                tape.decentralization_pool(adj)
            }
        });
        Branch { adj, pooled, map }
    };

    let static_branch = match &vars.static_factors {
        Some(sf) => {
            let adj = tape.tucker_static(sf);
            if tape.value(adj).shape()[2] != n {
                return Err(HagcnError::Shape(format!("model has {} nodes, input has {n}", tape.value(adj).shape()[2])));
            }
            Some(prepare(tape, adj, vec![0; b]))
        }
        None => None,
    };
    let dynamic_branch = match &vars.dynamic_factors {
        Some(df) => {
            let (distinct, map) = slot_groups(slots);
            let adj = tape.tucker_dynamic(df, &distinct);
            if tape.value(adj).shape()[2] != n {
                return Err(HagcnError::Shape(format!("model has {} nodes, input has {n}", tape.value(adj).shape()[2])));
            }
            Some(prepare(tape, adj, map))
        }
        None => None,
    };

    let input = tape.leaf(pad_and_transpose_inputs(x, config.padded_len()).into_dyn());
    let mut state = tape.linear(input, vars.head.input_w, Some(vars.head.input_b));

    let run_gcn = |tape: &mut Tape, h: Var, branch: &Branch, gcn: &GcnParams<Var>| {
        let alphas: Option<Vec<Var>> = branch.pooled.map(|pooled| {
            gcn.attention
                .iter()
                .map(|att| tape.channel_attention(pooled, att))
                .collect()
        });
        tape.graph_conv(h, branch.adj, &branch.map, &gcn.theta, alphas.as_deref())
    };

    let mut skips = Vec::with_capacity(config.layers);
    for layer in &vars.layers {
        let last = layer.blocks.len() - 1;
        for (bi, block) in layer.blocks.iter().enumerate() {
            let h = tape.gated_tcn(state, &block.tcn);
            let h_dyn = match &block.tcn_dynamic {
                Some(t) => tape.gated_tcn(state, t),
                None => h,
            };
            let hs = match (&static_branch, &block.static_gcn) {
                (Some(br), Some(g)) => Some(run_gcn(tape, h, br, g)),
                _ => None,
            };
            let hd = match (&dynamic_branch, &block.dynamic_gcn) {
                (Some(br), Some(g)) => Some(run_gcn(tape, h_dyn, br, g)),
                _ => None,
            };
            let sum = match (hs, hd) {
                (Some(a), Some(c)) => tape.add(a, c),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("validated config keeps one module"),
            };
            let len = *tape.value(sum).shape().last().unwrap();
            let residual = tape.crop_time(state, len);
            state = tape.add(sum, residual);
            if bi == last {
                let tap = tape.crop_time(sum, 1);
                skips.push(tape.linear(tap, layer.skip_w, Some(layer.skip_b)));
            }
        }
    }
    let skip = tape.concat_channels(&skips);
    let skip = tape.relu(skip);
    let out = tape.linear(skip, vars.head.out1_w, Some(vars.head.out1_b));
    let out = tape.relu(out);
    let out = tape.linear(out, vars.head.out2_w, Some(vars.head.out2_b));
    Ok(tape.head_to_prediction(out, config.horizon, config.features))
}

/// Registers every parameter as a tape leaf.
pub fn register(tape: &mut Tape, params: &ModelParams) -> ModelParams<Var> {
    params.map("", &mut |_, t| tape.leaf(t.clone()))
}

/// Normalized predictions `(B, Q, N, d)` for normalized inputs `(B, P, N, d)`.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    x: &ArrayView4<'_, f64>,
    slots: &[usize],
) -> Result<Array4<f64>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params);
    let out = forward_on_tape(&mut tape, &vars, config, x, slots)?;
    Ok(tape
        .value(out)
        .clone()
        .into_dimensionality()
        .expect("prediction is 4-d"))
}

/// Mean absolute error in raw units between normalized predictions and raw targets.
pub fn l1_loss(pred_normalized: &ArrayD<f64>, target_raw: &ArrayD<f64>, normalizer: &Normalizer) -> Result<f64> {
    if pred_normalized.shape() != target_raw.shape() {
        return Err(HagcnError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred_normalized.shape(),
            target_raw.shape()
        )));
    }
    let raw = crate::data::invert_normalizer(pred_normalized, normalizer)?;
    let n = raw.len() as f64;
    Ok(raw.iter().zip(target_raw.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Module whose attention weights are exported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Static,
    Dynamic,
}

impl std::fmt::Display for Module {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Module::Static => "static",
            Module::Dynamic => "dynamic",
        })
    }
}

/// Channel attention weights of one block, module and diffusion step.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub block: usize,
    pub module: Module,
    pub step: usize,
    pub weights: Array1<f64>,
}

fn prepared_adjacency(config: &ModelConfig, weights: Array3<f64>) -> Array4<f64> {
    let (fg, n, _) = weights.dim();
    let f = config.hidden_channels;
    let mut adj = Array4::zeros((1, f, n, n));
    for c in 0..f {
        adj.index_axis_mut(ndarray::Axis(0), 0)
            .index_axis_mut(ndarray::Axis(0), c)
            .assign(&weights.index_axis(ndarray::Axis(0), if fg == 1 { 0 } else { c }));
    }
    if config.normalize_adjacency {
        adj = row_normalize(&adj.view());
    }
    adj
}

/// Attention weights for every block of the static module and the dynamic
/// module at `slot`. Empty when channel attention is disabled.
pub fn attention_weights(params: &ModelParams, config: &ModelConfig, slot: usize) -> Result<Vec<AttentionRecord>> {
    if !config.uses_attention() {
        return Ok(Vec::new());
    }
    let pool = |adj: &Array4<f64>| {
        let a = adj.index_axis(ndarray::Axis(0), 0);
        let y = if config.ablation.gap_pooling {
            average_pool(&a)
        } else {
            decentralization_pool(&a)
        };
        y.insert_axis(ndarray::Axis(0))
    };
    let static_pooled = params
        .static_factors
        .as_ref()
        .map(|sf| pool(&prepared_adjacency(config, materialize_static(sf).weights)));
    let dynamic_pooled = match &params.dynamic_factors {
        Some(df) => Some(pool(&prepared_adjacency(config, materialize_dynamic_slot(df, slot)?.weights))),
        None => None,
    };
    let mut out = Vec::new();
    let mut block_index = 0;
    for layer in &params.layers {
        for block in &layer.blocks {
            for (module, gcn, pooled) in [
                (Module::Static, &block.static_gcn, &static_pooled),
                (Module::Dynamic, &block.dynamic_gcn, &dynamic_pooled),
            ] {
                if let (Some(g), Some(y)) = (gcn, pooled) {
                    for (step, alpha) in channel_weights(&y.view(), g).into_iter().enumerate() {
                        out.push(AttentionRecord {
                            block: block_index,
                            module,
                            step,
                            weights: alpha.row(0).to_owned(),
                        });
                    }
                }
            }
            block_index += 1;
        }
    }
    Ok(out)
}
