//! The slice-sequence segmentation network.
//!
//! Every forward function works on graph variables so the same code path is
//! used for training (tracking graph) and inference (non-tracking graph).

mod layers;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::{Graph, LayerNorm, Linear, ParamId, ParamStore, Real, Rope, RopeTable, Tensor, TensorError, Var, ROPE_BASE};

pub use layers::{sinusoid_1d, sinusoid_2d, Attn, Block, Conv, Mlp};
use layers::{map_to_tokens, sinusoid_grid, tokens_to_map};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected a {expected}x{expected} slice, got {got:?}")]
    InputExtent { expected: usize, got: Vec<usize> },
    #[error("memory is empty")]
    EmptyMemory,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_layers: usize,
    /// Layers in both the memory and the exemplar attention stacks.
    pub attention_layers: usize,
    pub fine_channels: usize,
    pub mlp_ratio: usize,
    pub exemplar_capacity: usize,
    pub memory_capacity: usize,
    /// Route exemplars through the memory attention weights instead of a
    /// dedicated stack.
    pub shared_attention: bool,
    /// Add an encoding of the signed slice offset to exemplar keys.
    pub exemplar_slice_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            patch: 16,
            channels: 64,
            heads: 1,
            encoder_blocks: 4,
            decoder_layers: 2,
            attention_layers: 4,
            fine_channels: 16,
            mlp_ratio: 2,
            exemplar_capacity: 10,
            memory_capacity: 7,
            shared_attention: false,
            exemplar_slice_encoding: false,
        }
    }
}

impl ModelConfig {
    /// Small variant used for desk-scale training runs.
    pub fn compact() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            channels: 32,
            encoder_blocks: 2,
            decoder_layers: 2,
            attention_layers: 4,
            fine_channels: 8,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return err("image_size must be a positive multiple of patch");
        }
        if self.heads == 0 || self.channels % self.heads != 0 || (self.channels / self.heads) % 4 != 0 {
            return err("channels / heads must be a multiple of 4");
        }
        if self.encoder_blocks == 0 || self.decoder_layers == 0 || self.attention_layers == 0 {
            return err("layer counts must be positive");
        }
        if self.fine_channels == 0 || self.mlp_ratio == 0 {
            return err("fine_channels and mlp_ratio must be positive");
        }
        if self.exemplar_capacity == 0 || self.memory_capacity == 0 {
            return err("bank capacities must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    patch: Conv,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
    fine: Conv,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attn,
    ln1: LayerNorm,
    to_image: Attn,
    ln2: LayerNorm,
    mlp: Mlp,
    ln3: LayerNorm,
    to_tokens: Attn,
    ln4: LayerNorm,
}

#[derive(Debug, Clone)]
struct Decoder {
    out_tokens: ParamId,
    layers: Vec<DecoderLayer>,
    final_attn: Attn,
    final_ln: LayerNorm,
    up: Conv,
    fuse: Conv,
    hyper: Mlp,
    iou: Mlp,
    obj: Linear,
}

#[derive(Debug, Clone)]
struct PromptEncoder {
    proj: Linear,
    labels: ParamId,
}

#[derive(Debug, Clone)]
struct MemoryEncoder {
    mask_proj: Linear,
    feat_proj: Linear,
    conv: Conv,
    out: Linear,
}

#[derive(Debug, Clone)]
struct CrossLayer {
    ln1: LayerNorm,
    self_attn: Attn,
    ln2: LayerNorm,
    cross: Attn,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct AttnStack {
    layers: Vec<CrossLayer>,
    ln: LayerNorm,
}

/// Slice features: coarse tokens `[T, C]` and a full-resolution map `[U, S, S]`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub tokens: Var,
    pub fine: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    /// `[S, S]`
    pub logits: Var,
    /// `[1, 1]`, in `[0, 1]`
    pub iou: Var,
    /// `[1, 1]` logit
    pub object: Var,
    /// `[1, C]`
    pub token: Var,
}

/// One click in model pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryItem {
    pub feature: Var,
    pub pointer: Var,
    /// Slice distance to the slice being decoded.
    pub distance: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ExemplarItem {
    pub z: Var,
    pub pos: Var,
    pub pointer: Var,
    /// `d_k - d` for the slice being decoded.
    pub offset: i64,
}

pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    enc: Encoder,
    prompt: PromptEncoder,
    dec: Decoder,
    mem_enc: MemoryEncoder,
    memory_attn: AttnStack,
    exemplar_attn: AttnStack,
    no_memory: ParamId,
    no_exemplar: ParamId,
    mem_tpos: ParamId,
    pointer_proj: Linear,
    grid_rope: RopeTable<T>,
    point_rope: RopeTable<T>,
    image_pe: Tensor<T>,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            enc: self.enc.clone(),
            prompt: self.prompt.clone(),
            dec: self.dec.clone(),
            mem_enc: self.mem_enc.clone(),
            memory_attn: self.memory_attn.clone(),
            exemplar_attn: self.exemplar_attn.clone(),
            no_memory: self.no_memory,
            no_exemplar: self.no_exemplar,
            mem_tpos: self.mem_tpos,
            pointer_proj: self.pointer_proj,
            grid_rope: self.grid_rope.clone(),
            point_rope: self.point_rope.clone(),
            image_pe: self.image_pe.clone(),
        }
    }
}

fn init_stack<T: Real, R: rand::Rng>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> AttnStack {
    let c = cfg.channels;
    let layers = (0..cfg.attention_layers)
        .map(|i| {
            let n = format!("{name}.{i}");
            CrossLayer {
                ln1: LayerNorm::init(store, &format!("{n}.ln1"), c),
                self_attn: Attn::init(store, &format!("{n}.self"), c, cfg.heads, rng),
                ln2: LayerNorm::init(store, &format!("{n}.ln2"), c),
                cross: Attn::init(store, &format!("{n}.cross"), c, cfg.heads, rng),
                ln3: LayerNorm::init(store, &format!("{n}.ln3"), c),
                mlp: Mlp::init(store, &format!("{n}.mlp"), c, c * cfg.mlp_ratio, c, rng),
            }
        })
        .collect();
    AttnStack {
        layers,
        ln: LayerNorm::init(store, &format!("{name}.ln"), c),
    }
}

pub const MEMORY_PREFIX: &str = "memory_attn.";
pub const EXEMPLAR_PREFIX: &str = "exemplar_attn.";
const CHECKPOINT_KIND: &str = "mois-model";

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let (c, u, s) = (config.channels, config.fine_channels, config.image_size);
        let hidden = c * config.mlp_ratio;
        let heads = config.heads;

        let enc = Encoder {
            patch: Conv::init(&mut p, "enc.patch", 1, c, config.patch, config.patch, 0, rng),
            pos: p.normal("enc.pos", &[config.tokens(), c], 0.02, rng),
            blocks: (0..config.encoder_blocks)
                .map(|i| Block::init(&mut p, &format!("enc.block{i}"), c, heads, hidden, rng))
                .collect(),
            ln: LayerNorm::init(&mut p, "enc.ln", c),
            fine: Conv::init(&mut p, "enc.fine", 1, u, 3, 1, 1, rng),
        };
        let prompt = PromptEncoder {
            proj: Linear::init(&mut p, "prompt.proj", c, c, true, rng),
            labels: p.normal("prompt.labels", &[2, c], 0.5, rng),
        };
        let dec = Decoder {
            out_tokens: p.normal("dec.out_tokens", &[3, c], 0.5, rng),
            layers: (0..config.decoder_layers)
                .map(|i| {
                    let n = format!("dec.{i}");
                    DecoderLayer {
                        self_attn: Attn::init(&mut p, &format!("{n}.self"), c, heads, rng),
                        ln1: LayerNorm::init(&mut p, &format!("{n}.ln1"), c),
                        to_image: Attn::init(&mut p, &format!("{n}.to_image"), c, heads, rng),
                        ln2: LayerNorm::init(&mut p, &format!("{n}.ln2"), c),
                        mlp: Mlp::init(&mut p, &format!("{n}.mlp"), c, hidden, c, rng),
                        ln3: LayerNorm::init(&mut p, &format!("{n}.ln3"), c),
                        to_tokens: Attn::init(&mut p, &format!("{n}.to_tokens"), c, heads, rng),
                        ln4: LayerNorm::init(&mut p, &format!("{n}.ln4"), c),
                    }
                })
                .collect(),
            final_attn: Attn::init(&mut p, "dec.final", c, heads, rng),
            final_ln: LayerNorm::init(&mut p, "dec.final_ln", c),
            up: Conv::init(&mut p, "dec.up", c, u, 1, 1, 0, rng),
            fuse: Conv::init(&mut p, "dec.fuse", 2 * u, u, 3, 1, 1, rng),
            hyper: Mlp::init(&mut p, "dec.hyper", c, c, u, rng),
            iou: Mlp::init(&mut p, "dec.iou", c, c, 1, rng),
            obj: Linear::init(&mut p, "dec.obj", c, 1, true, rng),
        };
        let mem_enc = MemoryEncoder {
            mask_proj: Linear::init(&mut p, "mem_enc.mask", 1, c, true, rng),
            feat_proj: Linear::init(&mut p, "mem_enc.feat", c, c, true, rng),
            conv: Conv::init(&mut p, "mem_enc.conv", c, c, 3, 1, 1, rng),
            out: Linear::init(&mut p, "mem_enc.out", c, c, true, rng),
        };
        let memory_attn = init_stack(&mut p, MEMORY_PREFIX.trim_end_matches('.'), &config, rng);
        let exemplar_attn = if config.shared_attention {
            memory_attn.clone()
        } else {
            let stack = init_stack(&mut p, EXEMPLAR_PREFIX.trim_end_matches('.'), &config, rng);
            let copies: Vec<(String, Tensor<T>)> = p
                .with_prefix(MEMORY_PREFIX)
                .map(|(_, n, t)| (n.replacen(MEMORY_PREFIX, EXEMPLAR_PREFIX, 1), t.clone()))
                .collect();
            for (n, t) in copies {
                p.insert(n, t);
            }
            stack
        };
        let no_memory = p.normal("no_memory", &[1, c], 0.02, rng);
        let no_exemplar = p.normal("no_exemplar", &[1, c], 0.02, rng);
        let mem_tpos = p.normal("mem_tpos", &[config.memory_capacity, c], 0.02, rng);
        let pointer_proj = Linear::init(&mut p, "pointer_proj", c, c, true, rng);

        let hd = c / heads;
        let grid_rope = RopeTable::grid(config.grid(), hd, ROPE_BASE)?;
        let point_rope = RopeTable::new(&[[0.0, 0.0]], hd, ROPE_BASE)?;
        let image_pe = sinusoid_grid(config.grid(), c, config.patch as f64);
        debug_assert_eq!(s % config.patch, 0);
        Ok(Self {
            config,
            params: p,
            enc,
            prompt,
            dec,
            mem_enc,
            memory_attn,
            exemplar_attn,
            no_memory,
            no_exemplar,
            mem_tpos,
            pointer_proj,
            grid_rope,
            point_rope,
            image_pe,
        })
    }

    /// Parameter ids whose names start with `prefix`.
    pub fn param_ids(&self, prefix: &str) -> Vec<ParamId> {
        self.params.with_prefix(prefix).map(|(id, _, _)| id).collect()
    }

    fn manifest(&self) -> serde_json::Value {
        serde_json::json!({ "kind": CHECKPOINT_KIND, "config": self.config })
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        write_checkpoint(w, &self.manifest(), &self.params)?;
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let (manifest, store) = read_checkpoint::<T, R>(r)?;
        if manifest.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(ModelError::Checkpoint("not a model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| ModelError::Checkpoint(format!("bad manifest: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.load_params(&store)?;
        Ok(model)
    }

    /// Copies values by name; every parameter must be present with the same shape.
    pub fn load_params(&mut self, store: &ParamStore<T>) -> Result<(), ModelError> {
        let names: Vec<(ParamId, String)> = self.params.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in names {
            let src = store
                .id(&name)
                .map(|i| store.get(i))
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != self.params.get(id).shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    src.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut m = Model::<U>::new(self.config.clone(), 0).expect("validated config");
        m.params = self.params.cast();
        m
    }

    // ── forward pieces ───────────────────────────────────────────────

    /// `slice: [1, S, S]`
    pub fn encode_image(&self, g: &mut Graph<T>, slice: Var) -> Result<Embedding, ModelError> {
        let s = self.config.image_size;
        let shape = g.shape(slice).to_vec();
        if shape != [1, s, s] {
            return Err(ModelError::InputExtent { expected: s, got: shape });
        }
        let p = &self.params;
        let x = self.enc.patch.forward(g, p, slice)?;
        let x = map_to_tokens(g, x)?;
        let pos = g.param(p, self.enc.pos);
        let mut x = g.add(x, pos)?;
        for b in &self.enc.blocks {
            x = b.forward(
                g,
                p,
                x,
                Some(Rope {
                    q: &self.grid_rope,
                    k: &self.grid_rope,
                }),
            )?;
        }
        let tokens = self.enc.ln.forward(g, p, x)?;
        let f = self.enc.fine.forward(g, p, slice)?;
        let fine = g.gelu(f);
        Ok(Embedding { tokens, fine })
    }

    /// `[n, C]` prompt tokens, or `None` without clicks.
    pub fn encode_prompts(&self, g: &mut Graph<T>, clicks: &[PointPrompt]) -> Result<Option<Var>, ModelError> {
        if clicks.is_empty() {
            return Ok(None);
        }
        let c = self.config.channels;
        let mut pe = Vec::with_capacity(clicks.len() * c);
        let mut onehot = Vec::with_capacity(clicks.len() * 2);
        for k in clicks {
            pe.extend(sinusoid_2d(k.x, k.y, c, self.config.image_size as f64));
            onehot.extend(if k.positive { [0.0, 1.0] } else { [1.0, 0.0] });
        }
        let pe = g.constant(Tensor::from_f64(&[clicks.len(), c], &pe)?);
        let onehot = g.constant(Tensor::from_f64(&[clicks.len(), 2], &onehot)?);
        let proj = self.prompt.proj.forward(g, &self.params, pe)?;
        let labels = g.param(&self.params, self.prompt.labels);
        let lab = g.matmul(onehot, labels)?;
        Ok(Some(g.add(proj, lab)?))
    }

    pub fn decode(&self, g: &mut Graph<T>, tokens: Var, fine: Var, prompts: Option<Var>) -> Result<DecoderVars, ModelError> {
        let p = &self.params;
        let d = &self.dec;
        let (s, side) = (self.config.image_size, self.config.grid());
        let out = g.param(p, d.out_tokens);
        let q0 = match prompts {
            Some(pr) => g.concat(&[out, pr], 0)?,
            None => out,
        };
        let pe = g.constant(self.image_pe.clone());
        let mut q = q0;
        let mut x = tokens;
        for l in &d.layers {
            let qa = g.add(q, q0)?;
            let a = l.self_attn.forward(g, p, qa, qa, q, None)?;
            let q1 = g.add(q, a)?;
            q = l.ln1.forward(g, p, q1)?;

            let qa = g.add(q, q0)?;
            let xk = g.add(x, pe)?;
            let a = l.to_image.forward(g, p, qa, xk, x, None)?;
            let q1 = g.add(q, a)?;
            q = l.ln2.forward(g, p, q1)?;

            let m = l.mlp.forward(g, p, q)?;
            let q1 = g.add(q, m)?;
            q = l.ln3.forward(g, p, q1)?;

            let qa = g.add(q, q0)?;
            let xk = g.add(x, pe)?;
            let a = l.to_tokens.forward(g, p, xk, qa, q, None)?;
            let x1 = g.add(x, a)?;
            x = l.ln4.forward(g, p, x1)?;
        }
        let qa = g.add(q, q0)?;
        let xk = g.add(x, pe)?;
        let a = d.final_attn.forward(g, p, qa, xk, x, None)?;
        let q1 = g.add(q, a)?;
        let q = d.final_ln.forward(g, p, q1)?;

        let iou_tok = g.narrow(q, 0, 0, 1)?;
        let mask_tok = g.narrow(q, 0, 1, 1)?;
        let obj_tok = g.narrow(q, 0, 2, 1)?;

        let map = tokens_to_map(g, x, side)?;
        let up = d.up.forward(g, p, map)?;
        let up = g.resize_bilinear(up, s, s)?;
        let up = g.gelu(up);
        let cat = g.concat(&[up, fine], 0)?;
        let f = d.fuse.forward(g, p, cat)?;
        let f = g.gelu(f);
        let u = self.config.fine_channels;
        let f = g.reshape(f, &[u, s * s])?;
        let hyp = d.hyper.forward(g, p, mask_tok)?;
        let logits = g.matmul(hyp, f)?;
        let logits = g.reshape(logits, &[s, s])?;

        let iou = d.iou.forward(g, p, iou_tok)?;
        let iou = g.sigmoid(iou);
        let object = d.obj.forward(g, p, obj_tok)?;
        Ok(DecoderVars {
            logits,
            iou,
            object,
            token: mask_tok,
        })
    }

    /// Object pointer `[1, C]` from a decoder output token.
    pub fn pointer(&self, g: &mut Graph<T>, token: Var) -> Result<Var, ModelError> {
        Ok(self.pointer_proj.forward(g, &self.params, token)?)
    }

    /// Memory feature `[T, C]` from mask logits `[S, S]` and the unconditioned slice tokens.
    pub fn encode_memory(&self, g: &mut Graph<T>, logits: Var, tokens: Var) -> Result<Var, ModelError> {
        let (s, pch, side) = (self.config.image_size, self.config.patch, self.config.grid());
        let shape = g.shape(logits).to_vec();
        if shape != [s, s] {
            return Err(ModelError::InputExtent { expected: s, got: shape });
        }
        let p = &self.params;
        let m = g.sigmoid(logits);
        let m = g.reshape(m, &[1, s, s])?;
        let avg = T::from_f64c(1.0 / (pch * pch) as f64);
        let kernel = g.constant(Tensor::full(&[1, 1, pch, pch], avg));
        let pooled = g.conv2d(m, kernel, pch, 0)?;
        let pooled = g.reshape(pooled, &[side * side, 1])?;
        let a = self.mem_enc.mask_proj.forward(g, p, pooled)?;
        let b = self.mem_enc.feat_proj.forward(g, p, tokens)?;
        let sum = g.add(a, b)?;
        let map = tokens_to_map(g, sum, side)?;
        let c = self.mem_enc.conv.forward(g, p, map)?;
        let c = g.gelu(c);
        let t = map_to_tokens(g, c)?;
        Ok(self.mem_enc.out.forward(g, p, t)?)
    }

    fn run_stack(
        &self,
        g: &mut Graph<T>,
        stack: &AttnStack,
        x: Var,
        keys: Var,
        values: Var,
        key_rope: &RopeTable<T>,
    ) -> Result<Var, ModelError> {
        let p = &self.params;
        let mut x = x;
        for l in &stack.layers {
            let h = l.ln1.forward(g, p, x)?;
            let a = l.self_attn.forward(
                g,
                p,
                h,
                h,
                h,
                Some(Rope {
                    q: &self.grid_rope,
                    k: &self.grid_rope,
                }),
            )?;
            x = g.add(x, a)?;
            let h = l.ln2.forward(g, p, x)?;
            let a = l.cross.forward(
                g,
                p,
                h,
                keys,
                values,
                Some(Rope {
                    q: &self.grid_rope,
                    k: key_rope,
                }),
            )?;
            x = g.add(x, a)?;
            let h = l.ln3.forward(g, p, x)?;
            let m = l.mlp.forward(g, p, h)?;
            x = g.add(x, m)?;
        }
        Ok(stack.ln.forward(g, p, x)?)
    }

    /// Conditions slice tokens on a lesion's memory; entries pinned first.
    pub fn memory_attend(&self, g: &mut Graph<T>, x: Var, items: &[MemoryItem]) -> Result<Var, ModelError> {
        if items.is_empty() {
            return Err(ModelError::EmptyMemory);
        }
        let tpos = g.param(&self.params, self.mem_tpos);
        let last = self.config.memory_capacity - 1;
        let mut keys = Vec::with_capacity(2 * items.len());
        let mut values = Vec::with_capacity(2 * items.len());
        let mut ptr_keys = Vec::with_capacity(items.len());
        let mut ptr_values = Vec::with_capacity(items.len());
        for it in items {
            let t = g.narrow(tpos, 0, it.distance.min(last), 1)?;
            keys.push(g.add(it.feature, t)?);
            values.push(it.feature);
            ptr_keys.push(g.add(it.pointer, t)?);
            ptr_values.push(it.pointer);
        }
        keys.extend(ptr_keys);
        values.extend(ptr_values);
        let k = g.concat(&keys, 0)?;
        let v = g.concat(&values, 0)?;
        let mut parts: Vec<&RopeTable<T>> = vec![&self.grid_rope; items.len()];
        parts.extend(std::iter::repeat_n(&self.point_rope, items.len()));
        let rope = RopeTable::stack(&parts)?;
        self.run_stack(g, &self.memory_attn, x, k, v, &rope)
    }

    /// Conditioning for a prompted slice of a lesion with no memory yet.
    pub fn no_memory(&self, g: &mut Graph<T>, x: Var) -> Result<Var, ModelError> {
        let e = g.param(&self.params, self.no_memory);
        Ok(g.add(x, e)?)
    }

    /// Exemplar attention; an empty list attends to the learned no-exemplar token.
    pub fn exemplar_attend(&self, g: &mut Graph<T>, x: Var, items: &[ExemplarItem]) -> Result<Var, ModelError> {
        if items.is_empty() {
            let t = g.param(&self.params, self.no_exemplar);
            return self.run_stack(g, &self.exemplar_attn, x, t, t, &self.point_rope);
        }
        let c = self.config.channels;
        let mut keys = Vec::with_capacity(2 * items.len());
        let mut values = Vec::with_capacity(2 * items.len());
        let mut ptr_keys = Vec::with_capacity(items.len());
        let mut ptr_values = Vec::with_capacity(items.len());
        for it in items {
            let mut pos = it.pos;
            if self.config.exemplar_slice_encoding {
                let enc = g.constant(Tensor::from_f64(&[1, c], &sinusoid_1d(it.offset as f64, c))?);
                pos = g.add(pos, enc)?;
            }
            keys.push(g.add(it.z, pos)?);
            values.push(it.z);
            ptr_keys.push(g.add(it.pointer, pos)?);
            ptr_values.push(it.pointer);
        }
        keys.extend(ptr_keys);
        values.extend(ptr_values);
        let k = g.concat(&keys, 0)?;
        let v = g.concat(&values, 0)?;
        let mut parts: Vec<&RopeTable<T>> = vec![&self.grid_rope; items.len()];
        parts.extend(std::iter::repeat_n(&self.point_rope, items.len()));
        let rope = RopeTable::stack(&parts)?;
        self.run_stack(g, &self.exemplar_attn, x, k, v, &rope)
    }

    /// Fixed `[1, C]` encoding of the centroid of `logits > 0`; `None` when empty.
    pub fn exemplar_position(&self, logits: &Tensor<T>) -> Option<Tensor<T>> {
        let s = self.config.image_size;
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, v) in logits.data().iter().enumerate() {
            if *v > T::zero() {
                sx += (i % s) as f64;
                sy += (i / s) as f64;
                n += 1;
            }
        }
        (n > 0).then(|| {
            let c = self.config.channels;
            Tensor::from_f64(&[1, c], &sinusoid_2d(sx / n as f64, sy / n as f64, c, s as f64)).expect("pos shape")
        })
    }
}
