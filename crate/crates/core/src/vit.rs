//! Vision Transformer with a class token and learnable register tokens.
//!
//! Sequence layout is `[CLS, R registers, patches]`. The class token and
//! patches carry positional embeddings; registers do not. Blocks are pre-norm.
//! Register outputs are discarded: they appear neither in the patch features
//! nor in the patch weights derived from class-token attention.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_axis, Tape, Var};
use crate::error::{Error, Result};
use crate::label::{Label, LIVE_INDEX};
use crate::params::{ParamGroup, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_registers: usize,
    pub num_classes: usize,
    /// Optional hidden layer in the classification head.
    pub head_hidden: Option<usize>,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: 32 px images, 8 px patches, 4 blocks of width 64.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_dim: 256,
            num_registers: 4,
            num_classes: 2,
            head_hidden: None,
            ln_eps: 1e-6,
        }
    }

    /// Smallest configuration used for full-model gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            num_heads: 2,
            mlp_dim: 64,
            num_registers: 2,
            ..Self::desk()
        }
    }

    /// ViT-B/14 with four registers at 224 px input.
    pub fn base() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 14,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_dim: 3072,
            num_registers: 4,
            num_classes: 2,
            head_hidden: None,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::Config("num_classes must be 2 (live/spoof)".into()));
        }
        if self.head_hidden == Some(0) || self.ln_eps <= 0.0 {
            return Err(Error::Config("head_hidden must be positive and ln_eps > 0".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens before the patches: CLS plus registers.
    pub fn num_prefix(&self) -> usize {
        1 + self.num_registers
    }

    pub fn seq_len(&self) -> usize {
        self.num_prefix() + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Parameter layout in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        use Init::*;
        use ParamGroup::*;
        let d = self.embed_dim;
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, group, init| {
            specs.push(ParamSpec {
                name,
                shape,
                group,
                init,
            })
        };
        add("patch_embed.weight".into(), vec![self.patch_dim(), d], Encoder, Xavier);
        add("patch_embed.bias".into(), vec![d], Encoder, Zeros);
        add("cls_token".into(), vec![1, d], Encoder, Normal(0.02));
        if self.num_registers > 0 {
            add("registers".into(), vec![self.num_registers, d], Encoder, Normal(0.02));
        }
        add(
            "pos_embed".into(),
            vec![1 + self.num_patches(), d],
            Encoder,
            Normal(0.02),
        );
        for i in 0..self.depth {
            let p = format!("blocks.{i}");
            add(format!("{p}.norm1.gain"), vec![d], Encoder, Ones);
            add(format!("{p}.norm1.bias"), vec![d], Encoder, Zeros);
            for proj in ["q", "k", "v", "proj"] {
                add(format!("{p}.attn.{proj}.weight"), vec![d, d], Encoder, Xavier);
                add(format!("{p}.attn.{proj}.bias"), vec![d], Encoder, Zeros);
            }
            add(format!("{p}.norm2.gain"), vec![d], Encoder, Ones);
            add(format!("{p}.norm2.bias"), vec![d], Encoder, Zeros);
            add(format!("{p}.mlp.fc1.weight"), vec![d, self.mlp_dim], Encoder, Xavier);
            add(format!("{p}.mlp.fc1.bias"), vec![self.mlp_dim], Encoder, Zeros);
            add(format!("{p}.mlp.fc2.weight"), vec![self.mlp_dim, d], Encoder, Xavier);
            add(format!("{p}.mlp.fc2.bias"), vec![d], Encoder, Zeros);
        }
        add("norm.gain".into(), vec![d], Encoder, Ones);
        add("norm.bias".into(), vec![d], Encoder, Zeros);
        let mut head_in = d;
        if let Some(h) = self.head_hidden {
            add("head.hidden.weight".into(), vec![d, h], Head, Xavier);
            add("head.hidden.bias".into(), vec![h], Head, Zeros);
            head_in = h;
        }
        add("head.weight".into(), vec![head_in, self.num_classes], Head, Xavier);
        add("head.bias".into(), vec![self.num_classes], Head, Zeros);
        add("patch_head.weight".into(), vec![d, self.num_classes], Head, Xavier);
        add("patch_head.bias".into(), vec![self.num_classes], Head, Zeros);
        specs
    }

    /// Parameter count without allocating any weights.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot normal from the first two dimensions.
    Xavier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

/// Everything one forward pass exposes to losses and evaluation.
pub struct VitOutput {
    /// `[batch, embed_dim]`, final-norm CLS output.
    pub cls_features: Var,
    /// `[batch, num_patches, embed_dim]`; registers excluded.
    pub patch_features: Var,
    /// `[batch, 2]`.
    pub logits: Var,
    /// Per block, the class-token attention row: `[batch, heads, seq_len]`.
    pub cls_attention: Vec<Tensor>,
    /// The same rows as tape nodes, for losses that differentiate through them.
    pub cls_attention_vars: Vec<Var>,
    /// `[batch]`, softmax probability of the live class.
    pub p_live: Tensor,
    /// CLS + registers, i.e. where patches start in the sequence.
    pub num_prefix: usize,
}

/// Handles to the patch-classifier parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PatchHeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Pluggable feature extractor usable by training and evaluation.
pub trait Backbone {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Runs `images` (`[batch, C, H, W]`) with parameters already bound via
    /// [`ParamStore::bind`].
    fn forward(&self, tape: &mut Tape, bound: &[Var], images: &Tensor) -> Result<VitOutput>;
    fn patch_head(&self, bound: &[Var]) -> PatchHeadVars;
}

struct BlockSlots {
    norm1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    proj: (usize, usize),
    norm2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

struct Layout {
    patch_embed: (usize, usize),
    cls_token: usize,
    registers: Option<usize>,
    pos_embed: usize,
    blocks: Vec<BlockSlots>,
    norm: (usize, usize),
    head_hidden: Option<(usize, usize)>,
    head: (usize, usize),
    patch_head: (usize, usize),
}

impl Layout {
    fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Self {
        let idx = |name: &str| {
            store
                .iter()
                .position(|p| p.name == name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
        };
        let pair = |prefix: &str, a: &str, b: &str| (idx(&format!("{prefix}.{a}")), idx(&format!("{prefix}.{b}")));
        let lin = |prefix: &str| pair(prefix, "weight", "bias");
        let norm = |prefix: &str| pair(prefix, "gain", "bias");
        Layout {
            patch_embed: lin("patch_embed"),
            cls_token: idx("cls_token"),
            registers: (cfg.num_registers > 0).then(|| idx("registers")),
            pos_embed: idx("pos_embed"),
            blocks: (0..cfg.depth)
                .map(|i| {
                    let p = format!("blocks.{i}");
                    BlockSlots {
                        norm1: norm(&format!("{p}.norm1")),
                        q: lin(&format!("{p}.attn.q")),
                        k: lin(&format!("{p}.attn.k")),
                        v: lin(&format!("{p}.attn.v")),
                        proj: lin(&format!("{p}.attn.proj")),
                        norm2: norm(&format!("{p}.norm2")),
                        fc1: lin(&format!("{p}.mlp.fc1")),
                        fc2: lin(&format!("{p}.mlp.fc2")),
                    }
                })
                .collect(),
            norm: norm("norm"),
            head_hidden: cfg.head_hidden.map(|_| lin("head.hidden")),
            head: lin("head"),
            patch_head: lin("patch_head"),
        }
    }
}

pub struct VitReg {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl VitReg {
    /// Freshly initialized model; weights are a function of `seed` only.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for spec in config.param_specs() {
            let mut rng = rng::keyed(seed, &["init", &spec.name]);
            let numel: usize = spec.shape.iter().product();
            let std = match spec.init {
                Init::Zeros | Init::Ones => 0.0,
                Init::Normal(s) => s,
                Init::Xavier => (2.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt(),
            };
            let value = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::Normal(_) | Init::Xavier => {
                    let normal = Normal::new(0.0, std).expect("finite std");
                    // Truncate at two standard deviations.
                    let data = (0..numel)
                        .map(|_| loop {
                            let x: f64 = normal.sample(&mut rng);
                            if x.abs() <= 2.0 * std {
                                break x;
                            }
                        })
                        .collect();
                    Tensor::new(spec.shape.clone(), data)?
                }
            };
            store.push(spec.name, spec.group, value)?;
        }
        Self::from_params(config, store)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(params.iter()) {
            if spec.name != p.name || spec.shape != p.value.shape() || spec.group != p.group {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let layout = Layout::resolve(&config, &params);
        Ok(VitReg { config, params, layout })
    }

    /// Replaces the register tokens (used to compare initializations).
    pub fn reseed_registers(&mut self, seed: u64) {
        if let Some(slot) = self.layout.registers {
            let mut rng = rng::keyed(seed, &["registers"]);
            let p = &mut self.params.iter_mut().nth(slot).unwrap().value;
            for x in p.data_mut() {
                *x = rng.gen_range(-0.05..0.05);
            }
        }
    }

    fn linear(&self, tape: &mut Tape, bound: &[Var], x: Var, slots: (usize, usize)) -> Result<Var> {
        let y = tape.matmul(x, bound[slots.0])?;
        tape.add_bcast(y, bound[slots.1])
    }

    fn attention(&self, tape: &mut Tape, bound: &[Var], x: Var, block: &BlockSlots) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = cfg.num_heads;
        let dh = d / h;
        let split = |tape: &mut Tape, v: Var, perm: &[usize], out: &[usize]| -> Result<Var> {
            let v = tape.reshape(v, &[b, t, h, dh])?;
            let v = tape.permute(v, perm)?;
            tape.reshape(v, out)
        };
        let q = self.linear(tape, bound, x, block.q)?;
        let k = self.linear(tape, bound, x, block.k)?;
        let v = self.linear(tape, bound, x, block.v)?;
        let q = split(tape, q, &[0, 2, 1, 3], &[b * h, t, dh])?;
        let kt = split(tape, k, &[0, 2, 3, 1], &[b * h, dh, t])?;
        let v = split(tape, v, &[0, 2, 1, 3], &[b * h, t, dh])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores, 2)?;

        let cls_row = tape.narrow(attn, 1, 0, 1)?;
        let cls_row = tape.reshape(cls_row, &[b, h, t])?;

        let o = tape.matmul(attn, v)?;
        let o = tape.reshape(o, &[b, h, t, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, t, d])?;
        Ok((self.linear(tape, bound, o, block.proj)?, cls_row))
    }
}

impl Backbone for VitReg {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, bound: &[Var], images: &Tensor) -> Result<VitOutput> {
        let cfg = &self.config;
        let s = cfg.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [cfg.channels, s, s] {
            return Err(Error::shape("vit forward", shape, &[0, cfg.channels, s, s]));
        }
        let b = shape[0];
        let n = cfg.num_patches();
        let d = cfg.embed_dim;
        let l = &self.layout;

        let per_image = cfg.channels * s * s;
        let mut patches = Vec::with_capacity(b * n * cfg.patch_dim());
        for img in images.data().chunks(per_image) {
            let img = Tensor::new(vec![cfg.channels, s, s], img.to_vec())?;
            patches.extend(patchify(&img, cfg.patch_size)?.into_data());
        }
        let patches = tape.constant(Tensor::new(vec![b, n, cfg.patch_dim()], patches)?);
        let tokens = self.linear(tape, bound, patches, l.patch_embed)?;

        let pos_cls = tape.narrow(bound[l.pos_embed], 0, 0, 1)?;
        let pos_patch = tape.narrow(bound[l.pos_embed], 0, 1, n)?;
        let tokens = tape.add_bcast(tokens, pos_patch)?;
        let cls = tape.add(bound[l.cls_token], pos_cls)?;
        let cls = tape.reshape(cls, &[1, 1, d])?;
        let cls = tape.repeat_batch(cls, b)?;
        let mut parts = vec![cls];
        if let Some(r) = l.registers {
            let regs = tape.reshape(bound[r], &[1, cfg.num_registers, d])?;
            parts.push(tape.repeat_batch(regs, b)?);
        }
        parts.push(tokens);
        let mut x = tape.concat(&parts, 1)?;

        let mut cls_attention_vars = Vec::with_capacity(cfg.depth);
        for block in &l.blocks {
            let h = tape.layer_norm(x, bound[block.norm1.0], bound[block.norm1.1], cfg.ln_eps)?;
            let (a, row) = self.attention(tape, bound, h, block)?;
            cls_attention_vars.push(row);
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, bound[block.norm2.0], bound[block.norm2.1], cfg.ln_eps)?;
            let h = self.linear(tape, bound, h, block.fc1)?;
            let h = tape.gelu(h);
            let h = self.linear(tape, bound, h, block.fc2)?;
            x = tape.add(x, h)?;
        }
        let x = tape.layer_norm(x, bound[l.norm.0], bound[l.norm.1], cfg.ln_eps)?;

        let cls_features = tape.narrow(x, 1, 0, 1)?;
        let cls_features = tape.reshape(cls_features, &[b, d])?;
        let patch_features = tape.narrow(x, 1, cfg.num_prefix(), n)?;

        let mut h = cls_features;
        if let Some(slots) = l.head_hidden {
            h = self.linear(tape, bound, h, slots)?;
            h = tape.gelu(h);
        }
        let logits = self.linear(tape, bound, h, l.head)?;
        let probs = softmax_axis(tape.value(logits), 1);
        let p_live = Tensor::new(
            vec![b],
            probs.data().chunks(cfg.num_classes).map(|r| r[LIVE_INDEX]).collect(),
        )?;

        Ok(VitOutput {
            cls_features,
            patch_features,
            logits,
            cls_attention: cls_attention_vars.iter().map(|&v| tape.value(v).clone()).collect(),
            cls_attention_vars,
            p_live,
            num_prefix: cfg.num_prefix(),
        })
    }

    fn patch_head(&self, bound: &[Var]) -> PatchHeadVars {
        PatchHeadVars {
            weight: bound[self.layout.patch_head.0],
            bias: bound[self.layout.patch_head.1],
        }
    }
}

/// Splits `[C, H, W]` into non-overlapping `patch × patch` tiles in row-major
/// tile order; each row holds one tile as `(channel, dy, dx)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || patch == 0 || !shape[1].is_multiple_of(patch) || !shape[2].is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image {shape:?} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + gy * patch + dy) * w + gx * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * patch * patch], out)
}

/// Inverse of [`patchify`] for a square `[C, size, size]` image.
pub fn unpatchify(patches: &Tensor, channels: usize, patch: usize) -> Result<Tensor> {
    let shape = patches.shape();
    let n = shape[0];
    let grid = (n as f64).sqrt().round() as usize;
    if shape.len() != 2 || grid * grid != n || shape[1] != channels * patch * patch {
        return Err(Error::shape("unpatchify", shape, &[channels, patch]));
    }
    let size = grid * patch;
    let mut out = vec![0.0; channels * size * size];
    let src = patches.data();
    let mut it = src.chunks(patch);
    for gy in 0..grid {
        for gx in 0..grid {
            for ch in 0..channels {
                for dy in 0..patch {
                    let row = (ch * size + gy * patch + dy) * size + gx * patch;
                    out[row..row + patch].copy_from_slice(it.next().unwrap());
                }
            }
        }
    }
    Tensor::new(vec![channels, size, size], out)
}

/// How per-head class-token attention is reduced to patch weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduction {
    Mean,
    Head(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWeightMode {
    pub heads: HeadReduction,
    /// Renormalize the patch entries to sum to 1 after dropping CLS/registers.
    pub renormalize: bool,
}

impl Default for PatchWeightMode {
    fn default() -> Self {
        PatchWeightMode {
            heads: HeadReduction::Mean,
            renormalize: true,
        }
    }
}

/// Head-averaged, renormalized patch weights from block `block_index`
/// (`None` = final block). Returns `[batch, num_patches]`.
pub fn extract_patch_weights(out: &VitOutput, block_index: Option<usize>) -> Result<Tensor> {
    extract_patch_weights_with(out, block_index, PatchWeightMode::default())
}

pub fn extract_patch_weights_with(
    out: &VitOutput,
    block_index: Option<usize>,
    mode: PatchWeightMode,
) -> Result<Tensor> {
    let depth = out.cls_attention.len();
    let block = block_index.unwrap_or(depth.saturating_sub(1));
    let rows = out
        .cls_attention
        .get(block)
        .ok_or_else(|| Error::Contract(format!("block index {block} out of range for depth {depth}")))?;
    patch_weights_from_rows(rows, out.num_prefix, mode)
}

/// Reduces `[batch, heads, seq]` attention rows to `[batch, seq - prefix]`.
pub fn patch_weights_from_rows(rows: &Tensor, prefix: usize, mode: PatchWeightMode) -> Result<Tensor> {
    let shape = rows.shape();
    if shape.len() != 3 || shape[2] <= prefix {
        return Err(Error::shape("patch weights", shape, &[prefix]));
    }
    let (b, h, t) = (shape[0], shape[1], shape[2]);
    let n = t - prefix;
    let src = rows.data();
    let mut out = Vec::with_capacity(b * n);
    for bi in 0..b {
        let mut w = vec![0.0; n];
        match mode.heads {
            HeadReduction::Mean => {
                for hi in 0..h {
                    let row = &src[(bi * h + hi) * t..(bi * h + hi + 1) * t];
                    w.iter_mut().zip(&row[prefix..]).for_each(|(a, v)| *a += v / h as f64);
                }
            }
            HeadReduction::Head(hi) => {
                if hi >= h {
                    return Err(Error::Contract(format!("head {hi} out of range for {h} heads")));
                }
                w.copy_from_slice(&src[(bi * h + hi) * t + prefix..(bi * h + hi + 1) * t]);
            }
        }
        if mode.renormalize {
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            } else {
                w.iter_mut().for_each(|v| *v = 1.0 / n as f64);
            }
        }
        out.extend(w);
    }
    Tensor::new(vec![b, n], out)
}

/// Tape version of [`extract_patch_weights_with`], differentiable with
/// respect to the attention. Returns a `[batch, num_patches]` node.
pub fn patch_weights_var(
    tape: &mut Tape,
    out: &VitOutput,
    block_index: Option<usize>,
    mode: PatchWeightMode,
) -> Result<Var> {
    let depth = out.cls_attention_vars.len();
    let block = block_index.unwrap_or(depth.saturating_sub(1));
    let rows = *out
        .cls_attention_vars
        .get(block)
        .ok_or_else(|| Error::Contract(format!("block index {block} out of range for depth {depth}")))?;
    let shape = tape.shape(rows).to_vec();
    let (b, h, t) = (shape[0], shape[1], shape[2]);
    let n = t - out.num_prefix;
    let patches = tape.narrow(rows, 2, out.num_prefix, n)?;
    let reduced = match mode.heads {
        HeadReduction::Mean => tape.mean_axis(patches, 1)?,
        HeadReduction::Head(hi) => {
            if hi >= h {
                return Err(Error::Contract(format!("head {hi} out of range for {h} heads")));
            }
            let one = tape.narrow(patches, 1, hi, 1)?;
            tape.reshape(one, &[b, n])?
        }
    };
    if mode.renormalize {
        tape.renormalize(reduced, &Tensor::full(&[b, n], 1.0))
    } else {
        Ok(reduced)
    }
}

/// "Live" iff `p_live > threshold`; ties go to "Spoof".
pub fn predict(p_live: f64, threshold: f64) -> Label {
    if p_live > threshold {
        Label::Live
    } else {
        Label::Spoof
    }
}
