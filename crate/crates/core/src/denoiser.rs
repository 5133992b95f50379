//! Toy DiT noise predictor over the unified sequence.
//!
//! Blocks are adaLN-modulated attention + MLP. Attention runs either as a
//! masked softmax over the full sequence or as one cross-attention per
//! query segment over only the key segments the flow table allows.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::{
    self, embed_prompt, PromptTokens, RopeConfig, RopeTables, RopeVars, SegmentLayout,
    SequenceParts, UnifiedSequence,
};
use crate::codec::LatentVideo;
use crate::error::{Error, Result};
use crate::icmask::{build_mask, FlowTable};
use crate::rng;
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: usize,
    /// Per-token channels of one latent (the network input is twice this).
    pub latent_dim: usize,
    pub vocab: usize,
    pub prompt_len: usize,
    pub concept_tokens: usize,
    pub time_features: usize,
    pub rope_base: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            blocks: 4,
            heads: 4,
            model_dim: 64,
            mlp_ratio: 4,
            latent_dim: 24,
            vocab: assembly::vocab::SIZE,
            prompt_len: assembly::PROMPT_LEN,
            concept_tokens: 8,
            time_features: 64,
            rope_base: 100.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.model_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("denoiser extents must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !self.time_features.is_multiple_of(2) || self.time_features == 0 {
            return Err(Error::Config("time_features must be even".into()));
        }
        RopeConfig::for_head_dim(self.head_dim(), self.rope_base)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Which optimiser group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Attention projections (`qkv`, `out`) of every block.
    Attention,
    /// Everything else in the network.
    Backbone,
    /// Concept tokens.
    Concept,
}

pub const CONCEPT: &str = "concept";

fn group_of(name: &str) -> ParamGroup {
    if name == CONCEPT {
        ParamGroup::Concept
    } else if name.contains(".attn.") {
        ParamGroup::Attention
    } else {
        ParamGroup::Backbone
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T> {
    pub config: DenoiserConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

enum Init {
    Zero,
    Fan(usize),
    Std(f64),
}

fn layout_of(c: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.model_dim;
    let mut v = vec![
        ("prompt.embed".to_string(), vec![c.vocab, d], Init::Std(1.0)),
        ("prompt.pos".into(), vec![c.prompt_len, d], Init::Std(0.1)),
        ("latent.in".into(), vec![2 * c.latent_dim, d], Init::Fan(2 * c.latent_dim)),
        ("latent.in_bias".into(), vec![d], Init::Zero),
        ("time.fc1".into(), vec![c.time_features, d], Init::Fan(c.time_features)),
        ("time.fc1_bias".into(), vec![d], Init::Zero),
        ("time.fc2".into(), vec![d, d], Init::Fan(d)),
        ("time.fc2_bias".into(), vec![d], Init::Zero),
        ("final.ada".into(), vec![d, 2 * d], Init::Zero),
        ("final.ada_bias".into(), vec![2 * d], Init::Zero),
        ("final.out".into(), vec![d, c.latent_dim], Init::Zero),
        ("final.out_bias".into(), vec![c.latent_dim], Init::Zero),
        (CONCEPT.into(), vec![c.concept_tokens.max(1), d], Init::Zero),
    ];
    for b in 0..c.blocks {
        let h = c.mlp_ratio * d;
        v.extend([
            (format!("block{b}.attn.qkv"), vec![d, 3 * d], Init::Fan(d)),
            (format!("block{b}.attn.qkv_bias"), vec![3 * d], Init::Zero),
            (format!("block{b}.attn.out"), vec![d, d], Init::Fan(d)),
            (format!("block{b}.attn.out_bias"), vec![d], Init::Zero),
            (format!("block{b}.mlp.fc1"), vec![d, h], Init::Fan(d)),
            (format!("block{b}.mlp.fc1_bias"), vec![h], Init::Zero),
            (format!("block{b}.mlp.fc2"), vec![h, d], Init::Fan(h)),
            (format!("block{b}.mlp.fc2_bias"), vec![d], Init::Zero),
            (format!("block{b}.ada"), vec![d, 6 * d], Init::Zero),
            (format!("block{b}.ada_bias"), vec![6 * d], Init::Zero),
        ]);
    }
    v
}

impl<T: Scalar> DenoiserParams<T> {
    /// adaLN-Zero style init: modulation and output head start at zero so
    /// every block is the identity and the prediction is zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived(seed, 0xD17);
        let tensors = layout_of(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zero => Tensor::zeros(shape),
                    Init::Fan(f) => Tensor::randn(shape, 1.0 / (f as f64).sqrt(), &mut r),
                    Init::Std(s) => Tensor::randn(shape, s, &mut r),
                };
                (name, t)
            })
            .collect();
        Ok(DenoiserParams { config, tensors })
    }

    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let tensors = layout_of(&config)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(shape)))
            .collect();
        Ok(DenoiserParams { config, tensors })
    }

    /// Every tensor drawn with `std`; used to exercise all gradient paths.
    pub fn random(config: DenoiserConfig, seed: u64, std: f64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut r = rng::rng(seed);
        for t in p.tensors.values_mut() {
            for v in t.data_mut() {
                *v = T::of(r.random_range(-std..std));
            }
        }
        Ok(p)
    }

    /// Rebuild from named tensors, checking names and shapes.
    pub fn from_tensors(config: DenoiserConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for (name, t) in tensors {
            p.set(&name, t)?;
        }
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Replace a tensor; shapes must match except for the concept tokens,
    /// whose count may change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let old = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        let ok = old.shape() == value.shape()
            || (name == CONCEPT && value.shape().len() == 2 && value.shape()[1] == self.config.model_dim);
        if !ok {
            return Err(Error::shape("set_param", &[old.shape(), value.shape()]));
        }
        if name == CONCEPT {
            self.config.concept_tokens = value.shape()[0];
        }
        self.tensors.insert(name.to_string(), value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn group(name: &str) -> ParamGroup {
        group_of(name)
    }

    pub fn scalar_count(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(n, _)| group_of(n) == group)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// SHA-256 over name, shape and little-endian bytes of each tensor in a group.
    pub fn checksum(&self, groups: &[ParamGroup]) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| groups.contains(&group_of(n))) {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            h.update(&bytes);
        }
        hex::encode(h.finalize())
    }

    /// Checksum over the network weights (everything except concept tokens).
    pub fn backbone_checksum(&self) -> String {
        self.checksum(&[ParamGroup::Attention, ParamGroup::Backbone])
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Apply `update(name, value)` to every tensor of the given groups.
    pub fn update<F>(&mut self, groups: &[ParamGroup], mut update: F)
    where
        F: FnMut(&str, &mut Tensor<T>),
    {
        for (name, t) in self.tensors.iter_mut() {
            if groups.contains(&group_of(name)) {
                update(name, t);
            }
        }
    }
}

/// Parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Register every tensor; those in `trainable` groups require gradients.
    pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &DenoiserParams<T>, trainable: &[ParamGroup]) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.clone(), trainable.contains(&group_of(name)));
                (name.to_string(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("parameter `{name}` not registered")))
    }

    /// Point a name at a different tape variable.
    pub fn replace(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Gradients for every registered tensor that received one.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| grads.take(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

/// Execution strategy for attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionPath {
    Full,
    #[default]
    Decomposed,
}

/// Single-head masked attention `softmax(q k^T / sqrt(d) + mask) v`.
/// Returns the context and the post-softmax weights.
pub fn masked_full_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Arc<Tensor<T>>>,
) -> Result<(Var, Var)> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, T::of(1.0 / (d as f64).sqrt()))?;
    let w = tape.softmax_masked(s, mask)?;
    Ok((tape.matmul(w, v)?, w))
}

/// Single-head attention computed per query segment over its allowed key
/// segments only, with results restored to sequence order.
pub fn decomposed_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    layout: &SegmentLayout,
    table: &FlowTable,
) -> Result<Var> {
    let n = layout.total_len();
    for (name, x) in [("q", q), ("k", k), ("v", v)] {
        if tape.shape(x)[0] != n {
            return Err(Error::Layout(format!(
                "{name} has {} rows but layout spans {n}",
                tape.shape(x)[0]
            )));
        }
    }
    let sizes: Vec<usize> = layout.segments().iter().map(|s| s.len).collect();
    let qs = tape.split(q, 0, &sizes)?;
    let ks = tape.split(k, 0, &sizes)?;
    let vs = tape.split(v, 0, &sizes)?;
    let mut outs = Vec::with_capacity(sizes.len());
    for (qi, seg) in layout.segments().iter().enumerate() {
        let keys: Vec<usize> = layout
            .segments()
            .iter()
            .enumerate()
            .filter(|(_, s)| table.allows(seg.kind, s.kind))
            .map(|(i, _)| i)
            .collect();
        if keys.is_empty() {
            return Err(Error::Layout(format!("segment {} has no allowed keys", seg.kind)));
        }
        let gather = |tape: &mut Tape<T>, parts: &[Var]| -> Result<Var> {
            if keys.len() == 1 {
                Ok(parts[keys[0]])
            } else {
                let sel: Vec<Var> = keys.iter().map(|&i| parts[i]).collect();
                tape.concat(&sel, 0)
            }
        };
        let kk = gather(tape, &ks)?;
        let vv = gather(tape, &vs)?;
        let (o, _) = masked_full_attention(tape, qs[qi], kk, vv, None)?;
        outs.push(o);
    }
    tape.concat(&outs, 0)
}

/// Query/key score multiply-accumulates for one head of width `dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AttentionMacs {
    pub full: u64,
    pub decomposed: u64,
}

impl AttentionMacs {
    pub fn new(layout: &SegmentLayout, table: &FlowTable, dim: usize) -> Self {
        let n = layout.total_len() as u64;
        AttentionMacs {
            full: n * n * dim as u64,
            decomposed: table.allowed_entries(layout) as u64 * dim as u64,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.decomposed as f64 / self.full as f64
    }
}

/// Sinusoidal features of a timestep, `[cos | sin]`.
pub fn timestep_features<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = T::of(a.cos());
        out[half + i] = T::of(a.sin());
    }
    Tensor::new(vec![1, dim], out).expect("sized")
}

/// Clean reference pair fed as context.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceInput<'a> {
    pub prompt: &'a PromptTokens,
    pub latent: &'a LatentVideo,
    pub first_frame: &'a LatentVideo,
}

#[derive(Clone, Copy, Debug)]
pub struct DenoiseInput<'a> {
    pub prompt: &'a PromptTokens,
    pub noisy: &'a LatentVideo,
    pub first_frame: &'a LatentVideo,
    /// `None` runs the backbone layout `[g_tgt, z_tgt]`.
    pub reference: Option<ReferenceInput<'a>>,
    pub timestep: usize,
    pub use_concept: bool,
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Output head on every token.
    pub output: Var,
    /// Noise prediction on the target video tokens.
    pub prediction: Var,
    pub layout: SegmentLayout,
    /// Post-softmax weights per block and head (full path only).
    pub attention: Vec<Vec<Var>>,
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, x: Var, w: &str) -> Result<Var> {
    let y = tape.matmul(x, p.get(w)?)?;
    tape.add_row(y, p.get(&format!("{w}_bias"))?)
}

fn project_video<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    latent: &LatentVideo,
    cond: &LatentVideo,
) -> Result<Var> {
    let x = tape.constant(latent.concat_channels(cond)?.to_tensor());
    linear(tape, p, x, "latent.in")
}

/// `ln(x) * (1 + scale) + shift`
fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var, ones: Var) -> Result<Var> {
    let h = tape.layernorm(x, T::of(1e-6))?;
    let s = tape.add(scale, ones)?;
    let h = tape.mul_row(h, s)?;
    tape.add_row(h, shift)
}

/// Record the denoiser on `tape`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DenoiserParams<T>,
    vars: &ParamVars,
    input: &DenoiseInput<'_>,
    table: &FlowTable,
    path: AttentionPath,
) -> Result<Forward> {
    let cfg = &params.config;
    if !(1..1000).contains(&input.timestep) {
        return Err(Error::OutOfRange(format!("timestep {} outside [1, 1000)", input.timestep)));
    }
    let grid = input.noisy.grid();
    if input.first_frame.grid() != grid {
        return Err(Error::Extent("first-frame condition grid differs from target".into()));
    }
    let d = cfg.model_dim;

    let table_var = vars.get("prompt.embed")?;
    let pos_var = vars.get("prompt.pos")?;
    let g_tgt = embed_prompt(tape, table_var, pos_var, input.prompt)?;
    let z_tgt = project_video(tape, vars, input.noisy, input.first_frame)?;
    let seq: UnifiedSequence = match input.reference {
        Some(r) => {
            let g_ref = embed_prompt(tape, table_var, pos_var, r.prompt)?;
            let z_ref = project_video(tape, vars, r.latent, r.first_frame)?;
            let concept = input.use_concept.then(|| vars.get(CONCEPT)).transpose()?;
            assembly::assemble(
                tape,
                &SequenceParts {
                    target_prompt: g_tgt,
                    ref_prompt: Some(g_ref),
                    target_video: z_tgt,
                    target_grid: grid,
                    ref_video: Some(z_ref),
                    ref_grid: Some(r.latent.grid()),
                    concept,
                },
            )?
        }
        None => {
            if input.use_concept {
                return Err(Error::Precondition("concept tokens need a reference context".into()));
            }
            assembly::assemble_backbone(tape, g_tgt, z_tgt, grid)?
        }
    };
    let layout = seq.layout.clone();

    let rope_cfg = RopeConfig::for_head_dim(cfg.head_dim(), cfg.rope_base)?;
    let rope = RopeVars::register(tape, &RopeTables::new(&rope_cfg, &seq.positions).tiled(cfg.heads));
    let mask = match path {
        AttentionPath::Full => Some(build_mask(&layout, table)?.additive::<T>()),
        AttentionPath::Decomposed => None,
    };

    // timestep conditioning
    let tf = tape.constant(timestep_features(input.timestep, cfg.time_features));
    let c = linear(tape, vars, tf, "time.fc1")?;
    let c = tape.silu(c)?;
    let c = linear(tape, vars, c, "time.fc2")?;
    let c = tape.silu(c)?;
    let ones = tape.constant(Tensor::full(vec![1, d], T::one()));

    let mut x = seq.tokens;
    let mut attention = Vec::new();
    let hd = cfg.head_dim();
    for b in 0..cfg.blocks {
        let m = linear(tape, vars, c, &format!("block{b}.ada"))?;
        let m = tape.split(m, 1, &[d; 6])?;
        let h = modulate(tape, x, m[0], m[1], ones)?;
        let qkv = linear(tape, vars, h, &format!("block{b}.attn.qkv"))?;
        let qkv = tape.split(qkv, 1, &[d, d, d])?;
        let q = assembly::rope_rotate(tape, qkv[0], rope)?;
        let k = assembly::rope_rotate(tape, qkv[1], rope)?;
        let qh = tape.split(q, 1, &vec![hd; cfg.heads])?;
        let kh = tape.split(k, 1, &vec![hd; cfg.heads])?;
        let vh = tape.split(qkv[2], 1, &vec![hd; cfg.heads])?;
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut weights = Vec::new();
        for i in 0..cfg.heads {
            let o = match path {
                AttentionPath::Full => {
                    let (o, w) = masked_full_attention(tape, qh[i], kh[i], vh[i], mask.as_ref())?;
                    weights.push(w);
                    o
                }
                AttentionPath::Decomposed => decomposed_attention(tape, qh[i], kh[i], vh[i], &layout, table)?,
            };
            heads.push(o);
        }
        attention.push(weights);
        let a = tape.concat(&heads, 1)?;
        let a = linear(tape, vars, a, &format!("block{b}.attn.out"))?;
        let a = tape.mul_row(a, m[2])?;
        x = tape.add(x, a)?;

        let h = modulate(tape, x, m[3], m[4], ones)?;
        let h = linear(tape, vars, h, &format!("block{b}.mlp.fc1"))?;
        let h = tape.gelu(h)?;
        let h = linear(tape, vars, h, &format!("block{b}.mlp.fc2"))?;
        let h = tape.mul_row(h, m[5])?;
        x = tape.add(x, h)?;
    }
    let m = linear(tape, vars, c, "final.ada")?;
    let m = tape.split(m, 1, &[d, d])?;
    let h = modulate(tape, x, m[0], m[1], ones)?;
    let output = linear(tape, vars, h, "final.out")?;
    let tgt = layout
        .get(assembly::SegmentKind::TargetVideo)
        .copied()
        .ok_or_else(|| Error::Layout("no target video segment".into()))?;
    let prediction = tape.slice(output, 0, tgt.offset, tgt.len)?;
    Ok(Forward {
        output,
        prediction,
        layout,
        attention,
    })
}

/// Noise prediction on the target grid without recording gradients.
pub fn denoise<T: Scalar>(
    params: &DenoiserParams<T>,
    input: &DenoiseInput<'_>,
    table: &FlowTable,
    path: AttentionPath,
) -> Result<LatentVideo> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, &[]);
    let f = forward(&mut tape, params, &vars, input, table, path)?;
    LatentVideo::from_tensor(input.noisy.grid(), tape.value(f.prediction))
}

/// Measured attention cost on the full vs decomposed paths.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub segments: Vec<(String, usize)>,
    pub total_len: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub repeats: usize,
    pub macs_full: u64,
    pub macs_decomposed: u64,
    pub mac_ratio: f64,
    pub median_full_ms: f64,
    pub median_decomposed_ms: f64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time forward+backward of multi-head attention on random inputs.
pub fn bench_attention(
    layout: &SegmentLayout,
    table: &FlowTable,
    heads: usize,
    head_dim: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    let n = layout.total_len();
    let mut r = rng::rng(seed);
    let q = Tensor::<f32>::randn(vec![n, head_dim], 1.0, &mut r);
    let k = Tensor::<f32>::randn(vec![n, head_dim], 1.0, &mut r);
    let v = Tensor::<f32>::randn(vec![n, head_dim], 1.0, &mut r);
    let mask = build_mask(layout, table)?.additive::<f32>();
    let run = |path: AttentionPath| -> Result<f64> {
        let start = Instant::now();
        let mut tape = Tape::<f32>::new();
        let qv = tape.param(q.clone());
        let kv = tape.param(k.clone());
        let vv = tape.param(v.clone());
        let mut outs = Vec::with_capacity(heads);
        for _ in 0..heads {
            let o = match path {
                AttentionPath::Full => masked_full_attention(&mut tape, qv, kv, vv, Some(&mask))?.0,
                AttentionPath::Decomposed => decomposed_attention(&mut tape, qv, kv, vv, layout, table)?,
            };
            outs.push(o);
        }
        let cat = tape.concat(&outs, 1)?;
        let loss = tape.mean(cat)?;
        tape.backward(loss)?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    let mut full = Vec::with_capacity(repeats);
    let mut dec = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        full.push(run(AttentionPath::Full)?);
        dec.push(run(AttentionPath::Decomposed)?);
    }
    let macs = AttentionMacs::new(layout, table, head_dim * heads);
    Ok(BenchReport {
        segments: layout
            .segments()
            .iter()
            .map(|s| (s.kind.short().to_string(), s.len))
            .collect(),
        total_len: n,
        head_dim,
        heads,
        repeats: repeats.max(1),
        macs_full: macs.full,
        macs_decomposed: macs.decomposed,
        mac_ratio: macs.ratio(),
        median_full_ms: median(full),
        median_decomposed_ms: median(dec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::SegmentKind;
    use crate::icmask::FlowTable;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            blocks: 2,
            heads: 2,
            model_dim: 16,
            mlp_ratio: 2,
            concept_tokens: 2,
            time_features: 8,
            ..DenoiserConfig::default()
        }
    }

    fn latent(grid: [usize; 3], seed: u64) -> LatentVideo {
        let mut r = rng::rng(seed);
        let t = Tensor::<f64>::randn(vec![grid.iter().product(), 24], 1.0, &mut r);
        LatentVideo::from_tensor(grid, &t).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let bad = DenoiserConfig { heads: 3, ..DenoiserConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig { heads: 16, ..DenoiserConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn groups() {
        assert_eq!(group_of("block0.attn.qkv"), ParamGroup::Attention);
        assert_eq!(group_of("block3.attn.out_bias"), ParamGroup::Attention);
        assert_eq!(group_of("block0.ada"), ParamGroup::Backbone);
        assert_eq!(group_of(CONCEPT), ParamGroup::Concept);
        let p = DenoiserParams::<f32>::init(DenoiserConfig::default(), 0).unwrap();
        assert_eq!(p.scalar_count(ParamGroup::Concept), 8 * 64);
        assert!(p.get(CONCEPT).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_output_with_default_shape() {
        let p = DenoiserParams::<f64>::zeros(DenoiserConfig::default()).unwrap();
        let prompt = PromptTokens::describe(0, 0, 1, 0).unwrap();
        let z = latent([4, 8, 8], 1);
        let zi = latent([4, 8, 8], 2);
        let input = DenoiseInput {
            prompt: &prompt,
            noisy: &z,
            first_frame: &zi,
            reference: Some(ReferenceInput { prompt: &prompt, latent: &z, first_frame: &zi }),
            timestep: 10,
            use_concept: false,
        };
        let out = denoise(&p, &input, &FlowTable::canonical(), AttentionPath::Decomposed).unwrap();
        assert_eq!((out.grid(), out.dim), ([4, 8, 8], 24));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paths_agree_and_are_deterministic() {
        let p = DenoiserParams::<f64>::random(tiny(), 3, 0.3).unwrap();
        let prompt = PromptTokens::describe(1, 2, 3, 1).unwrap();
        let rp = PromptTokens::describe(0, 4, 5, 1).unwrap();
        let z = latent([1, 2, 2], 4);
        let zi = latent([1, 2, 2], 5);
        let zr = latent([1, 2, 2], 6);
        let input = DenoiseInput {
            prompt: &prompt,
            noisy: &z,
            first_frame: &zi,
            reference: Some(ReferenceInput { prompt: &rp, latent: &zr, first_frame: &zi }),
            timestep: 500,
            use_concept: true,
        };
        let t = FlowTable::canonical();
        let a = denoise(&p, &input, &t, AttentionPath::Full).unwrap();
        let b = denoise(&p, &input, &t, AttentionPath::Decomposed).unwrap();
        let c = denoise(&p, &input, &t, AttentionPath::Decomposed).unwrap();
        let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
        assert_eq!(b, c);
    }

    #[test]
    fn timestep_range_checked() {
        let p = DenoiserParams::<f64>::zeros(tiny()).unwrap();
        let prompt = PromptTokens::describe(0, 0, 1, 0).unwrap();
        let z = latent([1, 2, 2], 1);
        let mut input = DenoiseInput {
            prompt: &prompt,
            noisy: &z,
            first_frame: &z,
            reference: None,
            timestep: 0,
            use_concept: false,
        };
        assert!(denoise(&p, &input, &FlowTable::canonical(), AttentionPath::Full).is_err());
        input.timestep = 1000;
        assert!(denoise(&p, &input, &FlowTable::canonical(), AttentionPath::Full).is_err());
    }

    #[test]
    fn single_allowed_key_copies_value_row() {
        let mut tape = Tape::<f64>::new();
        let mut r = rng::rng(9);
        let q = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut r));
        let k = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut r));
        let v = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut r));
        let mut m = vec![f64::NEG_INFINITY; 9];
        m[1] = 0.0;
        m[4] = 0.0;
        m[7] = 0.0;
        let mask = Arc::new(Tensor::new(vec![3, 3], m).unwrap());
        let (o, _) = masked_full_attention(&mut tape, q, k, v, Some(&mask)).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(o).row(i), tape.value(v).row(1));
        }
    }

    #[test]
    fn mac_counts() {
        let l = SegmentLayout::in_context(2, 2, 3, 3, None).unwrap();
        let m = AttentionMacs::new(&l, &FlowTable::canonical(), 4);
        assert_eq!((m.full, m.decomposed), (400, 276));
        let m = AttentionMacs::new(&l, &FlowTable::all_true(), 4);
        assert_eq!(m.full, m.decomposed);
    }

    #[test]
    fn checksum_tracks_groups() {
        let mut p = DenoiserParams::<f32>::init(tiny(), 1).unwrap();
        let before = p.backbone_checksum();
        let ce = p.checksum(&[ParamGroup::Concept]);
        p.update(&[ParamGroup::Concept], |_, t| t.data_mut()[0] = 1.0);
        assert_eq!(p.backbone_checksum(), before);
        assert_ne!(p.checksum(&[ParamGroup::Concept]), ce);
    }

    #[test]
    fn set_concept_resizes() {
        let mut p = DenoiserParams::<f32>::init(tiny(), 1).unwrap();
        p.set(CONCEPT, Tensor::zeros(vec![5, 16])).unwrap();
        assert_eq!(p.config.concept_tokens, 5);
        assert!(p.set(CONCEPT, Tensor::zeros(vec![5, 8])).is_err());
        assert!(p.set("block0.ada", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn full_path_exposes_zero_weight_to_reference_prompt() {
        let p = DenoiserParams::<f64>::random(tiny(), 3, 0.3).unwrap();
        let prompt = PromptTokens::describe(1, 2, 3, 1).unwrap();
        let z = latent([1, 2, 2], 4);
        let input = DenoiseInput {
            prompt: &prompt,
            noisy: &z,
            first_frame: &z,
            reference: Some(ReferenceInput { prompt: &prompt, latent: &z, first_frame: &z }),
            timestep: 5,
            use_concept: false,
        };
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &p, &[]);
        let f = forward(&mut tape, &p, &vars, &input, &FlowTable::canonical(), AttentionPath::Full).unwrap();
        let zt = *f.layout.get(SegmentKind::TargetVideo).unwrap();
        let gr = *f.layout.get(SegmentKind::RefPrompt).unwrap();
        let n = f.layout.total_len();
        for w in f.attention.iter().flatten() {
            let w = tape.value(*w).data();
            for i in zt.offset..zt.offset + zt.len {
                for j in gr.offset..gr.offset + gr.len {
                    assert_eq!(w[i * n + j], 0.0);
                }
            }
        }
    }
}
