//! The hybrid noise predictor: convolutional encoder and decoder joined by
//! additive skip connections around a conditioned latent transformer.
//!
//! Conditions enter twice: as input channels next to the noised target, and
//! as a pooled embedding that (together with the timestep embedding)
//! modulates every latent block through scale/shift/gate layer norms. The
//! latent stage is a residual wrapper `z + project(blocks(patch(z)))` whose
//! output projection is zero-initialized, so a fresh model's latent stage is
//! exactly the identity; gates and final projections start at zero as well,
//! making a fresh model output identically zero.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{ConditionTensor, CONDITION_CHANNELS, TARGET_CHANNELS};
use crate::error::CoreError;
use crate::nn::{Graph, NodeId, Tensor};
use crate::rng::{truncated_normal, RngFactory, StreamDomain};
use crate::samplers::NoisePredictor;
use crate::Result;

/// Latent-stage variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    /// Modulated transformer blocks.
    Dit,
    /// Modulated transformer blocks with long skips between the first and
    /// last halves, fused by a linear over the concatenation.
    Uvit,
    /// Two residual conv blocks instead of a transformer (ablation).
    UnetMid,
    /// DiT latent with the encoder-decoder skips dropped (ablation).
    SkiplessDit,
}

impl LatentKind {
    /// Whether the encoder-decoder skip connections are used.
    pub fn uses_skips(self) -> bool {
        !matches!(self, LatentKind::SkiplessDit)
    }
}

/// Hyperparameters of the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Noised target channels + condition channels.
    pub input_channels: usize,
    /// Square grid edge length; must be divisible by 2^depth.
    pub input_size: usize,
    /// Channels at the first resolution; stage d runs at base_width * 2^d.
    pub base_width: usize,
    /// Number of downsampling stages.
    pub depth: usize,
    /// Stage indices (0 = full resolution) that get spatial self-attention.
    pub attn_levels: Vec<usize>,
    pub latent_kind: LatentKind,
    /// Transformer depth D.
    pub latent_blocks: usize,
    pub latent_heads: usize,
    /// Token embedding size M.
    pub embed_dim: usize,
    /// Latent patching factor.
    pub patch_size: usize,
    /// Sinusoidal timestep embedding size (even).
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            input_channels: CONDITION_CHANNELS + TARGET_CHANNELS,
            input_size: 32,
            base_width: 64,
            depth: 2,
            attn_levels: vec![0, 1],
            latent_kind: LatentKind::Dit,
            latent_blocks: 8,
            latent_heads: 4,
            embed_dim: 256,
            patch_size: 1,
            time_embed_dim: 256,
        }
    }
}

/// Per-stage channel layout derived from a config.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSummary {
    pub stage_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub latent_tokens: usize,
    pub token_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::config(msg));
        if self.input_channels != CONDITION_CHANNELS + TARGET_CHANNELS {
            return fail(format!(
                "input_channels must be {}, got {}",
                CONDITION_CHANNELS + TARGET_CHANNELS,
                self.input_channels
            ));
        }
        if self.depth == 0 {
            return fail("depth must be >= 1".into());
        }
        if self.base_width == 0 || self.embed_dim == 0 || self.latent_blocks == 0 {
            return fail("widths and block counts must be >= 1".into());
        }
        if self.input_size % (1 << self.depth) != 0 {
            return fail(format!(
                "input size {} not divisible by 2^{}",
                self.input_size, self.depth
            ));
        }
        let latent = self.latent_size();
        if self.patch_size == 0 || latent % self.patch_size != 0 {
            return fail(format!(
                "latent size {latent} not divisible by patch size {}",
                self.patch_size
            ));
        }
        if self.embed_dim % self.latent_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.latent_heads
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return fail(format!("time_embed_dim {} must be even", self.time_embed_dim));
        }
        for level in &self.attn_levels {
            if *level >= self.depth {
                return fail(format!("attention level {level} >= depth {}", self.depth));
            }
            if self.stage_width(*level) % self.latent_heads != 0 {
                return fail(format!(
                    "stage {level} width {} not divisible by heads {}",
                    self.stage_width(*level),
                    self.latent_heads
                ));
            }
        }
        Ok(())
    }

    pub fn stage_width(&self, d: usize) -> usize {
        self.base_width << d
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_width << self.depth
    }

    /// Spatial edge length at the bottleneck.
    pub fn latent_size(&self) -> usize {
        self.input_size >> self.depth
    }

    pub fn latent_tokens(&self) -> usize {
        let lp = self.latent_size() / self.patch_size;
        lp * lp
    }

    pub fn summary(&self) -> ConfigSummary {
        ConfigSummary {
            stage_channels: (0..self.depth).map(|d| self.stage_width(d)).collect(),
            bottleneck_channels: self.bottleneck_width(),
            latent_tokens: self.latent_tokens(),
            token_dim: self.embed_dim,
        }
    }
}

/// Largest divisor of `c` that is <= 8, used as the group-norm group count.
fn norm_groups(c: usize) -> usize {
    for g in [8usize, 4, 2] {
        if c % g == 0 {
            return g;
        }
    }
    1
}

/// Named parameter store in fixed insertion order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|i| &self.tensors[*i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// The parameterized denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserBackbone {
    config: DenoiserConfig,
    params: ParamStore,
}

/// Diagnostics captured during a traced forward pass.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    /// Latent-stage input and output (bottleneck layout).
    pub latent_in: Option<Tensor>,
    pub latent_out: Option<Tensor>,
    /// Every attention probability tensor, rows over the last axis.
    pub attention_probs: Vec<Tensor>,
}

/// What a loss pass returns to the optimizer: the scalar loss plus gradients
/// aligned with [`ParamStore`] order (`None` for parameters off the graph).
pub struct LossPass {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
}

struct Bound {
    ids: Vec<NodeId>,
}

impl DenoiserBackbone {
    /// Build a freshly initialized model. Projections and convolutions draw
    /// truncated-normal (std 0.02) weights; modulation layers, attention
    /// output projections, second residual convs, the latent output
    /// projection and the final conv start at zero; skip-fusion linears start
    /// as pass-through.
    pub fn new(config: DenoiserConfig, rng: &RngFactory) -> Result<Self> {
        config.validate()?;
        let mut stream = rng.stream(StreamDomain::Init, 0);
        let mut params = ParamStore::new();
        let m = config.embed_dim;

        let mut tn = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(truncated_normal(&mut stream, 0.02) as f32 as f64);
            }
            Tensor::from_vec(shape, data)
        };

        // embeddings
        params.insert("embed.time.w1", tn(&[config.time_embed_dim, m]));
        params.insert("embed.time.b1", Tensor::zeros(&[m]));
        params.insert("embed.time.w2", tn(&[m, m]));
        params.insert("embed.time.b2", Tensor::zeros(&[m]));
        params.insert("embed.cond.w1", tn(&[CONDITION_CHANNELS, m]));
        params.insert("embed.cond.b1", Tensor::zeros(&[m]));
        params.insert("embed.cond.w2", tn(&[m, m]));
        params.insert("embed.cond.b2", Tensor::zeros(&[m]));

        // encoder
        let bw = config.base_width;
        params.insert("encoder.conv_in.weight", tn(&[bw, config.input_channels, 3, 3]));
        params.insert("encoder.conv_in.bias", Tensor::zeros(&[bw]));
        for d in 0..config.depth {
            let c = config.stage_width(d);
            let p = format!("encoder.stage{d}");
            insert_resblock(&mut params, &p, c, m, &mut tn);
            if config.attn_levels.contains(&d) {
                let side = config.input_size >> d;
                insert_attention(&mut params, &p, c, side, &mut tn);
            }
            params.insert(&format!("{p}.down.weight"), tn(&[2 * c, c, 2, 2]));
            params.insert(&format!("{p}.down.bias"), Tensor::zeros(&[2 * c]));
        }

        // latent stage
        let cb = config.bottleneck_width();
        match config.latent_kind {
            LatentKind::UnetMid => {
                for i in 0..2 {
                    let p = format!("latent.mid{i}");
                    insert_resblock(&mut params, &p, cb, m, &mut tn);
                }
            }
            _ => {
                let token_in = cb * config.patch_size * config.patch_size;
                params.insert("latent.patch.w", tn(&[token_in, m]));
                params.insert("latent.patch.b", Tensor::zeros(&[m]));
                params.insert("latent.pos", tn(&[config.latent_tokens(), m]));
                let down = config.latent_blocks / 2;
                for i in 0..config.latent_blocks {
                    let p = format!("latent.block{i}");
                    if config.latent_kind == LatentKind::Uvit
                        && i >= config.latent_blocks - down
                    {
                        // pass-through init: identity on current tokens, zero on the skip half
                        let mut fuse = Tensor::zeros(&[2 * m, m]);
                        for j in 0..m {
                            fuse.data_mut()[j * m + j] = 1.0;
                        }
                        params.insert(&format!("{p}.fuse.w"), fuse);
                        params.insert(&format!("{p}.fuse.b"), Tensor::zeros(&[m]));
                    }
                    params.insert(&format!("{p}.mod.w"), Tensor::zeros(&[m, 6 * m]));
                    params.insert(&format!("{p}.mod.b"), Tensor::zeros(&[6 * m]));
                    params.insert(&format!("{p}.qkv.w"), tn(&[m, 3 * m]));
                    params.insert(&format!("{p}.qkv.b"), Tensor::zeros(&[3 * m]));
                    params.insert(&format!("{p}.attnproj.w"), tn(&[m, m]));
                    params.insert(&format!("{p}.attnproj.b"), Tensor::zeros(&[m]));
                    params.insert(&format!("{p}.mlp.w1"), tn(&[m, 4 * m]));
                    params.insert(&format!("{p}.mlp.b1"), Tensor::zeros(&[4 * m]));
                    params.insert(&format!("{p}.mlp.w2"), tn(&[4 * m, m]));
                    params.insert(&format!("{p}.mlp.b2"), Tensor::zeros(&[m]));
                }
                params.insert("latent.unpatch.w", Tensor::zeros(&[m, token_in]));
                params.insert("latent.unpatch.b", Tensor::zeros(&[token_in]));
            }
        }

        // decoder
        for d in (0..config.depth).rev() {
            let c = config.stage_width(d);
            let p = format!("decoder.stage{d}");
            params.insert(&format!("{p}.up.weight"), tn(&[2 * c, c, 2, 2]));
            params.insert(&format!("{p}.up.bias"), Tensor::zeros(&[c]));
            insert_resblock(&mut params, &p, c, m, &mut tn);
            if config.attn_levels.contains(&d) {
                let side = config.input_size >> d;
                insert_attention(&mut params, &p, c, side, &mut tn);
            }
        }
        params.insert("decoder.final.norm.gain", Tensor::filled(&[bw], 1.0));
        params.insert("decoder.final.norm.bias", Tensor::zeros(&[bw]));
        params.insert("decoder.final.conv.weight", Tensor::zeros(&[TARGET_CHANNELS, bw, 3, 3]));
        params.insert("decoder.final.conv.bias", Tensor::zeros(&[TARGET_CHANNELS]));

        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    fn bind(&self, g: &mut Graph, needs_grad: bool) -> Bound {
        let ids = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if needs_grad {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { ids }
    }

    fn pid(&self, b: &Bound, name: &str) -> NodeId {
        let idx = *self
            .params
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        b.ids[idx]
    }

    /// Sinusoidal timestep embedding (constant w.r.t. parameters).
    pub fn sinusoidal_embedding(&self, ts: &[usize]) -> Tensor {
        let d = self.config.time_embed_dim;
        let half = d / 2;
        let mut data = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                data.push((t as f64 * freq).sin());
            }
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                data.push((t as f64 * freq).cos());
            }
        }
        Tensor::from_vec(&[ts.len(), d], data)
    }

    // -- graph builders ----------------------------------------------------

    fn build_time_embed(&self, g: &mut Graph, b: &Bound, ts: &[usize]) -> NodeId {
        let sin = g.constant(self.sinusoidal_embedding(ts));
        let h = g.matmul(sin, self.pid(b, "embed.time.w1"));
        let h = g.add_row_bias(h, self.pid(b, "embed.time.b1"));
        let h = g.gelu(h);
        let h = g.matmul(h, self.pid(b, "embed.time.w2"));
        g.add_row_bias(h, self.pid(b, "embed.time.b2"))
    }

    fn build_cond_embed(&self, g: &mut Graph, b: &Bound, cond: NodeId) -> NodeId {
        let pooled = g.mean_spatial(cond);
        let h = g.matmul(pooled, self.pid(b, "embed.cond.w1"));
        let h = g.add_row_bias(h, self.pid(b, "embed.cond.b1"));
        let h = g.gelu(h);
        let h = g.matmul(h, self.pid(b, "embed.cond.w2"));
        g.add_row_bias(h, self.pid(b, "embed.cond.b2"))
    }

    fn build_resblock(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &str,
        x: NodeId,
        emb: NodeId,
        channels: usize,
    ) -> NodeId {
        let groups = norm_groups(channels);
        let r = g.group_norm(x, groups);
        let r = g.mul_channel(r, self.pid(b, &format!("{prefix}.res.norm1.gain")));
        let r = g.add_channel_bias(r, self.pid(b, &format!("{prefix}.res.norm1.bias")));
        let r = g.gelu(r);
        let r = g.conv2d(
            r,
            self.pid(b, &format!("{prefix}.res.conv1.weight")),
            Some(self.pid(b, &format!("{prefix}.res.conv1.bias"))),
            1,
            1,
        );
        let tb = g.matmul(emb, self.pid(b, &format!("{prefix}.res.time.w")));
        let tb = g.add_row_bias(tb, self.pid(b, &format!("{prefix}.res.time.b")));
        let r = g.add_bcast_nc(r, tb);
        let r = g.group_norm(r, groups);
        let r = g.mul_channel(r, self.pid(b, &format!("{prefix}.res.norm2.gain")));
        let r = g.add_channel_bias(r, self.pid(b, &format!("{prefix}.res.norm2.bias")));
        let r = g.gelu(r);
        let r = g.conv2d(
            r,
            self.pid(b, &format!("{prefix}.res.conv2.weight")),
            Some(self.pid(b, &format!("{prefix}.res.conv2.bias"))),
            1,
            1,
        );
        g.add(x, r)
    }

    /// Multi-head self-attention over a token sequence; returns the output
    /// tokens and the attention probabilities node.
    fn build_attention(
        &self,
        g: &mut Graph,
        tokens: NodeId,
        heads: usize,
        qkv_w: NodeId,
        qkv_b: NodeId,
        proj_w: NodeId,
        proj_b: NodeId,
    ) -> (NodeId, NodeId) {
        let shape = g.value(tokens).shape().to_vec();
        let (n, t, m) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(tokens, &[n * t, m]);
        let qkv = g.matmul(flat, qkv_w);
        let qkv = g.add_row_bias(qkv, qkv_b);
        let q = g.slice_last(qkv, 0, m);
        let k = g.slice_last(qkv, m, m);
        let v = g.slice_last(qkv, 2 * m, m);
        let q = g.reshape(q, &[n, t, m]);
        let k = g.reshape(k, &[n, t, m]);
        let v = g.reshape(v, &[n, t, m]);
        let q = g.split_heads(q, heads);
        let k = g.split_heads(k, heads);
        let v = g.split_heads(v, heads);
        let d = m / heads;
        let scores = g.bmm_nt(q, k);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let probs = g.softmax_last(scores);
        let ctx = g.bmm_nn(probs, v);
        let merged = g.merge_heads(ctx, heads);
        let flat = g.reshape(merged, &[n * t, m]);
        let out = g.matmul(flat, proj_w);
        let out = g.add_row_bias(out, proj_b);
        (g.reshape(out, &[n, t, m]), probs)
    }

    fn build_spatial_attention(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &str,
        x: NodeId,
        channels: usize,
        trace: &mut Option<&mut ForwardTrace>,
    ) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let groups = norm_groups(channels);
        let r = g.group_norm(x, groups);
        let r = g.mul_channel(r, self.pid(b, &format!("{prefix}.attn.norm.gain")));
        let r = g.add_channel_bias(r, self.pid(b, &format!("{prefix}.attn.norm.bias")));
        let r = g.add_bcast_batch(r, self.pid(b, &format!("{prefix}.attn.pos")));
        let tokens = g.patchify(r, 1);
        let (out, probs) = self.build_attention(
            g,
            tokens,
            self.config.latent_heads,
            self.pid(b, &format!("{prefix}.attn.qkv.w")),
            self.pid(b, &format!("{prefix}.attn.qkv.b")),
            self.pid(b, &format!("{prefix}.attn.proj.w")),
            self.pid(b, &format!("{prefix}.attn.proj.b")),
        );
        if let Some(tr) = trace.as_deref_mut() {
            tr.attention_probs.push(g.value(probs).clone());
        }
        let spatial = g.unpatchify(out, 1, channels, h, w);
        g.add(x, spatial)
    }

    fn build_encoder(
        &self,
        g: &mut Graph,
        b: &Bound,
        input: NodeId,
        t_vec: NodeId,
        trace: &mut Option<&mut ForwardTrace>,
    ) -> (NodeId, Vec<NodeId>) {
        let mut h = g.conv2d(
            input,
            self.pid(b, "encoder.conv_in.weight"),
            Some(self.pid(b, "encoder.conv_in.bias")),
            1,
            1,
        );
        let mut skips = Vec::with_capacity(self.config.depth);
        for d in 0..self.config.depth {
            let c = self.config.stage_width(d);
            let p = format!("encoder.stage{d}");
            h = self.build_resblock(g, b, &p, h, t_vec, c);
            if self.config.attn_levels.contains(&d) {
                h = self.build_spatial_attention(g, b, &p, h, c, trace);
            }
            skips.push(h);
            h = g.conv2d(
                h,
                self.pid(b, &format!("{p}.down.weight")),
                Some(self.pid(b, &format!("{p}.down.bias"))),
                2,
                0,
            );
        }
        (h, skips)
    }

    fn build_dit_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &str,
        x: NodeId,
        y: NodeId,
        trace: &mut Option<&mut ForwardTrace>,
    ) -> NodeId {
        let m = self.config.embed_dim;
        let modv = g.matmul(y, self.pid(b, &format!("{prefix}.mod.w")));
        let modv = g.add_row_bias(modv, self.pid(b, &format!("{prefix}.mod.b")));
        let shift1 = g.slice_last(modv, 0, m);
        let scale1 = g.slice_last(modv, m, m);
        let gate1 = g.slice_last(modv, 2 * m, m);
        let shift2 = g.slice_last(modv, 3 * m, m);
        let scale2 = g.slice_last(modv, 4 * m, m);
        let gate2 = g.slice_last(modv, 5 * m, m);

        let h = g.layer_norm(x);
        let sc = g.add_scalar(scale1, 1.0);
        let h = g.mul_bcast_nm(h, sc);
        let h = g.add_bcast_nm(h, shift1);
        let (attn, probs) = self.build_attention(
            g,
            h,
            self.config.latent_heads,
            self.pid(b, &format!("{prefix}.qkv.w")),
            self.pid(b, &format!("{prefix}.qkv.b")),
            self.pid(b, &format!("{prefix}.attnproj.w")),
            self.pid(b, &format!("{prefix}.attnproj.b")),
        );
        if let Some(tr) = trace.as_deref_mut() {
            tr.attention_probs.push(g.value(probs).clone());
        }
        let gated = g.mul_bcast_nm(attn, gate1);
        let x = g.add(x, gated);

        let h = g.layer_norm(x);
        let sc = g.add_scalar(scale2, 1.0);
        let h = g.mul_bcast_nm(h, sc);
        let h = g.add_bcast_nm(h, shift2);
        let shape = g.value(h).shape().to_vec();
        let (n, t) = (shape[0], shape[1]);
        let flat = g.reshape(h, &[n * t, m]);
        let z = g.matmul(flat, self.pid(b, &format!("{prefix}.mlp.w1")));
        let z = g.add_row_bias(z, self.pid(b, &format!("{prefix}.mlp.b1")));
        let z = g.gelu(z);
        let z = g.matmul(z, self.pid(b, &format!("{prefix}.mlp.w2")));
        let z = g.add_row_bias(z, self.pid(b, &format!("{prefix}.mlp.b2")));
        let mlp = g.reshape(z, &[n, t, m]);
        let gated = g.mul_bcast_nm(mlp, gate2);
        g.add(x, gated)
    }

    fn build_latent(
        &self,
        g: &mut Graph,
        b: &Bound,
        z: NodeId,
        y: NodeId,
        trace: &mut Option<&mut ForwardTrace>,
    ) -> NodeId {
        if self.config.latent_kind == LatentKind::UnetMid {
            let cb = self.config.bottleneck_width();
            let mut h = z;
            for i in 0..2 {
                h = self.build_resblock(g, b, &format!("latent.mid{i}"), h, y, cb);
            }
            return h;
        }
        let m = self.config.embed_dim;
        let p = self.config.patch_size;
        let cb = self.config.bottleneck_width();
        let side = self.config.latent_size();
        let tokens_n = self.config.latent_tokens();
        let token_in = cb * p * p;
        let n = g.value(z).shape()[0];

        let tok = g.patchify(z, p);
        let flat = g.reshape(tok, &[n * tokens_n, token_in]);
        let emb = g.matmul(flat, self.pid(b, "latent.patch.w"));
        let emb = g.add_row_bias(emb, self.pid(b, "latent.patch.b"));
        let mut x = g.reshape(emb, &[n, tokens_n, m]);
        x = g.add_bcast_batch(x, self.pid(b, "latent.pos"));

        let blocks = self.config.latent_blocks;
        let down = blocks / 2;
        let mut skip_stack: Vec<NodeId> = Vec::new();
        for i in 0..blocks {
            if self.config.latent_kind == LatentKind::Uvit && i >= blocks - down {
                let skip = skip_stack.pop().expect("skip stack underflow");
                let cat = g.concat_last(x, skip);
                let flat = g.reshape(cat, &[n * tokens_n, 2 * m]);
                let fused = g.matmul(flat, self.pid(b, &format!("latent.block{i}.fuse.w")));
                let fused = g.add_row_bias(fused, self.pid(b, &format!("latent.block{i}.fuse.b")));
                x = g.reshape(fused, &[n, tokens_n, m]);
            }
            x = self.build_dit_block(g, b, &format!("latent.block{i}"), x, y, trace);
            if self.config.latent_kind == LatentKind::Uvit && i < down {
                skip_stack.push(x);
            }
        }

        let flat = g.reshape(x, &[n * tokens_n, m]);
        let out = g.matmul(flat, self.pid(b, "latent.unpatch.w"));
        let out = g.add_row_bias(out, self.pid(b, "latent.unpatch.b"));
        let tok = g.reshape(out, &[n, tokens_n, token_in]);
        let delta = g.unpatchify(tok, p, cb, side, side);
        g.add(z, delta)
    }

    fn build_decoder(
        &self,
        g: &mut Graph,
        b: &Bound,
        z: NodeId,
        skips: &[NodeId],
        t_vec: NodeId,
        trace: &mut Option<&mut ForwardTrace>,
    ) -> Result<NodeId> {
        let use_skips = self.config.latent_kind.uses_skips();
        if use_skips && skips.len() != self.config.depth {
            return Err(CoreError::inference(format!(
                "expected {} skip tensors, got {}",
                self.config.depth,
                skips.len()
            )));
        }
        if !use_skips && !skips.is_empty() {
            return Err(CoreError::inference(
                "skipless variant must run with an empty skip stack",
            ));
        }
        let mut h = z;
        for d in (0..self.config.depth).rev() {
            let c = self.config.stage_width(d);
            let p = format!("decoder.stage{d}");
            h = g.conv_transpose2x2(
                h,
                self.pid(b, &format!("{p}.up.weight")),
                Some(self.pid(b, &format!("{p}.up.bias"))),
            );
            if use_skips {
                let skip = skips[d];
                let want = g.value(h).shape().to_vec();
                if g.value(skip).shape() != want.as_slice() {
                    return Err(CoreError::inference(format!(
                        "skip {d} has shape {:?}, want {:?} (misordered stack?)",
                        g.value(skip).shape(),
                        want
                    )));
                }
                h = g.add(h, skip);
            }
            h = self.build_resblock(g, b, &p, h, t_vec, c);
            if self.config.attn_levels.contains(&d) {
                h = self.build_spatial_attention(g, b, &p, h, c, trace);
            }
        }
        let groups = norm_groups(self.config.base_width);
        let r = g.group_norm(h, groups);
        let r = g.mul_channel(r, self.pid(b, "decoder.final.norm.gain"));
        let r = g.add_channel_bias(r, self.pid(b, "decoder.final.norm.bias"));
        let r = g.gelu(r);
        Ok(g.conv2d(
            r,
            self.pid(b, "decoder.final.conv.weight"),
            Some(self.pid(b, "decoder.final.conv.bias")),
            1,
            1,
        ))
    }

    fn build_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x_t: &Tensor,
        cond: &Tensor,
        ts: &[usize],
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<NodeId> {
        let n = x_t.shape()[0];
        if cond.shape()[0] != n || ts.len() != n {
            return Err(CoreError::inference(format!(
                "batch sizes disagree: x_t {n}, cond {}, ts {}",
                cond.shape()[0],
                ts.len()
            )));
        }
        let (h, w) = (x_t.shape()[2], x_t.shape()[3]);
        if h != self.config.input_size || w != self.config.input_size {
            return Err(CoreError::inference(format!(
                "grid {h}x{w} does not match configured input size {}",
                self.config.input_size
            )));
        }
        let x_id = g.constant(x_t.clone());
        let c_id = g.constant(cond.clone());
        let input = g.concat_channels(x_id, c_id);
        let t_vec = self.build_time_embed(g, b, ts);
        let c_vec = self.build_cond_embed(g, b, c_id);
        let y = g.add(t_vec, c_vec);
        let (z, skips) = self.build_encoder(g, b, input, t_vec, &mut trace);
        g.value(z).check_finite("encoder")?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.latent_in = Some(g.value(z).clone());
        }
        let z = self.build_latent(g, b, z, y, &mut trace);
        g.value(z).check_finite("latent")?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.latent_out = Some(g.value(z).clone());
        }
        let skips = if self.config.latent_kind.uses_skips() {
            skips
        } else {
            Vec::new()
        };
        let out = self.build_decoder(g, b, z, &skips, t_vec, &mut trace)?;
        g.value(out).check_finite("decoder")?;
        Ok(out)
    }

    // -- public operations ---------------------------------------------------

    /// Batched noise prediction: `x_t` [N,3,H,W], raw condition channels
    /// [N,3,H,W], one timestep per element.
    pub fn predict_noise_batch(&self, x_t: &Tensor, cond: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.build_forward(&mut g, &b, x_t, cond, ts, None)?;
        Ok(g.value(out).clone())
    }

    /// Same as [`Self::predict_noise_batch`] with diagnostics captured.
    pub fn predict_noise_traced(
        &self,
        x_t: &Tensor,
        cond: &Tensor,
        ts: &[usize],
    ) -> Result<(Tensor, ForwardTrace)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let mut trace = ForwardTrace::default();
        let out = self.build_forward(&mut g, &b, x_t, cond, ts, Some(&mut trace))?;
        Ok((g.value(out).clone(), trace))
    }

    /// Encoder alone: 6-channel input to (bottleneck, skip stack).
    pub fn encode(&self, input: &Tensor, ts: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let t_vec = self.build_time_embed(&mut g, &b, ts);
        let mut none = None;
        let (z, skips) = self.build_encoder(&mut g, &b, x, t_vec, &mut none);
        let skips = skips.into_iter().map(|s| g.value(s).clone()).collect();
        Ok((g.value(z).clone(), skips))
    }

    /// Latent stage alone on a bottleneck tensor, conditioned on raw condition
    /// channels and timesteps.
    pub fn latent_transform(&self, z: &Tensor, cond: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let z_id = g.constant(z.clone());
        let c_id = g.constant(cond.clone());
        let t_vec = self.build_time_embed(&mut g, &b, ts);
        let c_vec = self.build_cond_embed(&mut g, &b, c_id);
        let y = g.add(t_vec, c_vec);
        let mut none = None;
        let out = self.build_latent(&mut g, &b, z_id, y, &mut none);
        Ok(g.value(out).clone())
    }

    /// Decoder alone: bottleneck plus skip stack to the 3-channel output.
    pub fn decode(&self, z: &Tensor, skips: &[Tensor], ts: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let z_id = g.constant(z.clone());
        let skip_ids: Vec<NodeId> = skips.iter().map(|s| g.constant(s.clone())).collect();
        let t_vec = self.build_time_embed(&mut g, &b, ts);
        let mut none = None;
        let out = self.build_decoder(&mut g, &b, z_id, &skip_ids, t_vec, &mut none)?;
        Ok(g.value(out).clone())
    }

    /// Mean-squared noise-prediction loss with parameter gradients, for one
    /// batch. Gradients are aligned with the parameter store.
    pub fn loss_grads(
        &self,
        x_t: &Tensor,
        cond: &Tensor,
        ts: &[usize],
        target_eps: &Tensor,
    ) -> Result<LossPass> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, true);
        let out = self.build_forward(&mut g, &b, x_t, cond, ts, None)?;
        let target = g.constant(target_eps.clone());
        let loss_id = g.mse(out, target);
        let loss = g.value(loss_id).item();
        if !loss.is_finite() {
            return Err(CoreError::numerical("loss", format!("loss = {loss}")));
        }
        let grads = g.backward(loss_id);
        let out_grads = b
            .ids
            .iter()
            .map(|id| grads.get(*id).cloned())
            .collect();
        Ok(LossPass {
            loss,
            grads: out_grads,
        })
    }
}

impl NoisePredictor for DenoiserBackbone {
    fn predict_noise(&self, x_t: &Tensor, condition: &ConditionTensor, t: usize) -> Result<Tensor> {
        let s = x_t.shape();
        if s.len() != 3 || s[0] != TARGET_CHANNELS {
            return Err(CoreError::inference(format!(
                "x_t must be [3, H, W], got {s:?}"
            )));
        }
        let mut xs = vec![1usize];
        xs.extend_from_slice(s);
        let x_b = x_t.reshaped(&xs);
        let mut cs = vec![1usize];
        cs.extend_from_slice(condition.channels().shape());
        let c_b = condition.channels().reshaped(&cs);
        let out = self.predict_noise_batch(&x_b, &c_b, &[t])?;
        Ok(out.reshaped(s))
    }
}

fn insert_resblock(
    params: &mut ParamStore,
    prefix: &str,
    channels: usize,
    embed_dim: usize,
    tn: &mut impl FnMut(&[usize]) -> Tensor,
) {
    params.insert(&format!("{prefix}.res.norm1.gain"), Tensor::filled(&[channels], 1.0));
    params.insert(&format!("{prefix}.res.norm1.bias"), Tensor::zeros(&[channels]));
    params.insert(
        &format!("{prefix}.res.conv1.weight"),
        tn(&[channels, channels, 3, 3]),
    );
    params.insert(&format!("{prefix}.res.conv1.bias"), Tensor::zeros(&[channels]));
    params.insert(&format!("{prefix}.res.time.w"), tn(&[embed_dim, channels]));
    params.insert(&format!("{prefix}.res.time.b"), Tensor::zeros(&[channels]));
    params.insert(&format!("{prefix}.res.norm2.gain"), Tensor::filled(&[channels], 1.0));
    params.insert(&format!("{prefix}.res.norm2.bias"), Tensor::zeros(&[channels]));
    params.insert(
        &format!("{prefix}.res.conv2.weight"),
        Tensor::zeros(&[channels, channels, 3, 3]),
    );
    params.insert(&format!("{prefix}.res.conv2.bias"), Tensor::zeros(&[channels]));
}

fn insert_attention(
    params: &mut ParamStore,
    prefix: &str,
    channels: usize,
    side: usize,
    tn: &mut impl FnMut(&[usize]) -> Tensor,
) {
    params.insert(&format!("{prefix}.attn.norm.gain"), Tensor::filled(&[channels], 1.0));
    params.insert(&format!("{prefix}.attn.norm.bias"), Tensor::zeros(&[channels]));
    params.insert(&format!("{prefix}.attn.pos"), tn(&[channels, side, side]));
    params.insert(&format!("{prefix}.attn.qkv.w"), tn(&[channels, 3 * channels]));
    params.insert(&format!("{prefix}.attn.qkv.b"), Tensor::zeros(&[3 * channels]));
    params.insert(&format!("{prefix}.attn.proj.w"), Tensor::zeros(&[channels, channels]));
    params.insert(&format!("{prefix}.attn.proj.b"), Tensor::zeros(&[channels]));
}
