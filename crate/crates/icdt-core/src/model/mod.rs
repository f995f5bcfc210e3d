//! The diffusion-transformer denoiser: patch embedding of channel-concatenated
//! latents, timestep conditioning through adaptive layer norm, and a final
//! adaptive decoder producing the noise and variance-interpolation fields.
//!
//! Every block starts as the identity (all residual gates regressed to zero)
//! and the final decoder starts at zero, so a freshly initialized model maps
//! any input to (0, 0).

pub mod embed;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};
use embed::{sincos_pos_table_2d, timestep_frequency_embedding, TIMESTEP_EMBED_DIM};
use rand::Rng;

/// MLP expansion ratio inside transformer blocks.
const MLP_RATIO: usize = 4;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Transformer depth N.
    pub layers: usize,
    /// Hidden width d.
    pub hidden: usize,
    /// Attention heads.
    pub heads: usize,
    /// Patch side p.
    pub patch: usize,
    /// Latent side I.
    pub latent_side: usize,
    /// Latent channels C (the denoiser input carries 2C after concatenation).
    pub latent_channels: usize,
}

impl ModelConfig {
    pub fn new(layers: usize, hidden: usize, heads: usize) -> Self {
        ModelConfig {
            layers,
            hidden,
            heads,
            patch: 4,
            latent_side: 32,
            latent_channels: 4,
        }
    }

    /// Small configuration (12 layers, width 384, 6 heads).
    pub fn s() -> Self {
        Self::new(12, 384, 6)
    }

    /// Base configuration (12 layers, width 768, 12 heads).
    pub fn b() -> Self {
        Self::new(12, 768, 12)
    }

    /// Large configuration (24 layers, width 1024, 16 heads).
    pub fn l() -> Self {
        Self::new(24, 1024, 16)
    }

    /// XLarge configuration (28 layers, width 1152, 16 heads).
    pub fn xl() -> Self {
        Self::new(28, 1152, 16)
    }

    /// Desk-scale configuration used by the default profile and the smoke
    /// tests: 2 layers, width 64, 2 heads on 16x16x3 latents.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 2,
            patch: 2,
            latent_side: 16,
            latent_channels: 3,
        }
    }

    /// Looks up a named configuration (case-insensitive).
    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "s" => Ok(Self::s()),
            "b" => Ok(Self::b()),
            "l" => Ok(Self::l()),
            "xl" => Ok(Self::xl()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown model config '{other}' (expected tiny|S|B|L|XL)"
            ))),
        }
    }

    pub fn with_patch(mut self, p: usize) -> Self {
        self.patch = p;
        self
    }

    pub fn with_geometry(mut self, latent_side: usize, latent_channels: usize) -> Self {
        self.latent_side = latent_side;
        self.latent_channels = latent_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.hidden % 4 != 0 {
            return Err(Error::Config(format!(
                "hidden width {} must be divisible by 4 for the positional table",
                self.hidden
            )));
        }
        if self.patch == 0 || self.latent_side % self.patch != 0 {
            return Err(Error::Config(format!(
                "latent side {} is not divisible by patch {}",
                self.latent_side, self.patch
            )));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent needs at least one channel".into()));
        }
        Ok(())
    }

    /// Token count S = (I/p)^2.
    pub fn token_count(&self) -> usize {
        let g = self.latent_side / self.patch;
        g * g
    }

    /// Flattened patch width fed to the embedder: p*p*2C.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 2 * self.latent_channels
    }

    /// Ordered list of every parameter tensor (name, shape). Construction,
    /// counting, checkpointing, and the optimizer all share this order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let pd = self.patch_dim();
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("patch_embed.weight".into(), vec![pd, d]),
            ("patch_embed.bias".into(), vec![d]),
            ("t_embed.fc1.weight".into(), vec![TIMESTEP_EMBED_DIM, d]),
            ("t_embed.fc1.bias".into(), vec![d]),
            ("t_embed.fc2.weight".into(), vec![d, d]),
            ("t_embed.fc2.bias".into(), vec![d]),
        ];
        for i in 0..self.layers {
            out.push((format!("blocks.{i}.ada.weight"), vec![d, 6 * d]));
            out.push((format!("blocks.{i}.ada.bias"), vec![6 * d]));
            out.push((format!("blocks.{i}.attn.qkv.weight"), vec![d, 3 * d]));
            out.push((format!("blocks.{i}.attn.qkv.bias"), vec![3 * d]));
            out.push((format!("blocks.{i}.attn.proj.weight"), vec![d, d]));
            out.push((format!("blocks.{i}.attn.proj.bias"), vec![d]));
            out.push((format!("blocks.{i}.mlp.fc1.weight"), vec![d, MLP_RATIO * d]));
            out.push((format!("blocks.{i}.mlp.fc1.bias"), vec![MLP_RATIO * d]));
            out.push((format!("blocks.{i}.mlp.fc2.weight"), vec![MLP_RATIO * d, d]));
            out.push((format!("blocks.{i}.mlp.fc2.bias"), vec![d]));
        }
        out.push(("final.ada.weight".into(), vec![d, 2 * d]));
        out.push(("final.ada.bias".into(), vec![2 * d]));
        out.push(("final.linear.weight".into(), vec![d, pd]));
        out.push(("final.linear.bias".into(), vec![pd]));
        out
    }

    /// Exact parameter count of the model this config instantiates.
    pub fn count_params(&self) -> u64 {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Forward-pass cost estimate. One multiply-add counts as one FLOP,
    /// the convention common profilers use for transformer tables.
    pub fn estimate_flops(&self) -> u64 {
        let s = self.token_count() as u64;
        let d = self.hidden as u64;
        let pd = self.patch_dim() as u64;
        let embed = s * pd * d + (TIMESTEP_EMBED_DIM as u64) * d + d * d;
        let per_block = 6 * d * d            // adaLN regression
            + 4 * s * d * d                  // qkv + output projections
            + 2 * s * s * d                  // logits and weighted values
            + 2 * (MLP_RATIO as u64) * s * d * d; // pointwise MLP
        let decode = 2 * d * d + s * d * pd;
        embed + (self.layers as u64) * per_block + decode
    }
}

/// Ordered named parameter tensors. Iteration order is the construction
/// order from [`ModelConfig::param_shapes`] and is relied on by the
/// optimizer and the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<E> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> Parameters<E> {
    pub fn new(entries: Vec<(String, Tensor<E>)>) -> Self {
        Parameters { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor<E>)> {
        self.entries.iter()
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<E> {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<E> {
        &mut self.entries[idx].1
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total element count across all tensors.
    pub fn total_elements(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn cast<F: Scalar>(&self) -> Parameters<F> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

/// The instantiated denoiser: a config, its parameters, and the fixed
/// positional table.
pub struct IcdtModel<E: Scalar> {
    cfg: ModelConfig,
    params: Parameters<E>,
    pos_table: Tensor<E>,
}

fn xavier_limit(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = (shape[0] as f64, shape[1] as f64);
    (6.0 / (fan_in + fan_out)).sqrt()
}

impl<E: Scalar> IcdtModel<E> {
    /// Fresh model: Xavier-uniform linear weights, zero biases, and zeroed
    /// adaLN regressions and final decoder so the whole forward pass is the
    /// identity-to-zero map at initialization.
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut entries = Vec::new();
        for (name, shape) in cfg.param_shapes() {
            let zero_init = name.contains(".ada.")
                || name.starts_with("final.")
                || shape.len() == 1; // biases
            let t = if zero_init {
                Tensor::zeros(shape)
            } else {
                let lim = xavier_limit(&shape);
                Tensor::rand_uniform(shape, -lim, lim, rng)
            };
            entries.push((name, t));
        }
        let grid = cfg.latent_side / cfg.patch;
        let pos_table = sincos_pos_table_2d(grid, cfg.hidden);
        Ok(IcdtModel {
            cfg,
            params: Parameters::new(entries),
            pos_table,
        })
    }

    /// Rebuilds a model around existing parameters (checkpoint load, EMA
    /// evaluation, precision casts). Shapes must match the config exactly.
    pub fn from_parameters(cfg: ModelConfig, params: Parameters<E>) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.param_shapes();
        if specs.len() != params.len() {
            return Err(Error::State(format!(
                "parameter count mismatch: expected {}, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in specs.iter().enumerate() {
            if params.name(i) != name || params.tensor(i).shape() != shape.as_slice() {
                return Err(Error::State(format!(
                    "parameter {i} mismatch: expected {name} {shape:?}, got {} {:?}",
                    params.name(i),
                    params.tensor(i).shape()
                )));
            }
        }
        let grid = cfg.latent_side / cfg.patch;
        let pos_table = sincos_pos_table_2d(grid, cfg.hidden);
        Ok(IcdtModel {
            cfg,
            params,
            pos_table,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Parameters<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<E> {
        &mut self.params
    }

    /// Zeroes the positional table (ablation hook used by the equivariance
    /// checks).
    pub fn disable_positional_table(&mut self) {
        self.pos_table = Tensor::zeros(self.pos_table.shape().to_vec());
    }

    /// Inserts the given weights (own parameters by default) as graph leaves,
    /// in parameter order.
    pub fn insert_weights(
        &self,
        g: &mut Graph<E>,
        weights: Option<&Parameters<E>>,
        requires_grad: bool,
    ) -> Vec<NodeId> {
        let source = weights.unwrap_or(&self.params);
        source
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    fn check_latent(&self, t: &Tensor<E>) -> Result<()> {
        let want = [
            self.cfg.latent_side,
            self.cfg.latent_side,
            self.cfg.latent_channels,
        ];
        if t.shape() != want {
            return Err(Error::shape("model forward", t.shape(), &want));
        }
        Ok(())
    }

    /// Timestep conditioning vector `[1, d]` built from the frequency
    /// embedding and the two-layer SiLU perceptron.
    fn conditioning(&self, g: &mut Graph<E>, ids: &[NodeId], t: usize) -> Result<NodeId> {
        let freq = g.constant(timestep_frequency_embedding(t as f64, TIMESTEP_EMBED_DIM));
        let h = g.matmul(freq, ids[2])?;
        let h = g.row_add(h, ids[3])?;
        let h = g.silu(h);
        let h = g.matmul(h, ids[4])?;
        let h = g.row_add(h, ids[5])?;
        Ok(h)
    }

    /// `x * (1 + scale) + shift`, rows modulated by `[1, d]` vectors.
    fn modulate(
        &self,
        g: &mut Graph<E>,
        x: NodeId,
        shift: NodeId,
        scale: NodeId,
    ) -> Result<NodeId> {
        let one_plus = g.add_scalar(scale, 1.0);
        let scaled = g.row_mul(x, one_plus)?;
        g.row_add(scaled, shift)
    }

    /// One adaLN transformer block over `tokens` (`[S, d]`), conditioned on
    /// `cond` (`[1, d]`). `base` is the index of the block's first parameter.
    fn block_forward(
        &self,
        g: &mut Graph<E>,
        ids: &[NodeId],
        base: usize,
        tokens: NodeId,
        cond: NodeId,
    ) -> Result<NodeId> {
        let d = self.cfg.hidden;
        let (ada_w, ada_b) = (ids[base], ids[base + 1]);
        let (qkv_w, qkv_b) = (ids[base + 2], ids[base + 3]);
        let (proj_w, proj_b) = (ids[base + 4], ids[base + 5]);
        let (fc1_w, fc1_b) = (ids[base + 6], ids[base + 7]);
        let (fc2_w, fc2_b) = (ids[base + 8], ids[base + 9]);

        let cond_act = g.silu(cond);
        let regressed = g.matmul(cond_act, ada_w)?;
        let regressed = g.row_add(regressed, ada_b)?;
        let shift1 = g.slice_last(regressed, 0, d)?;
        let scale1 = g.slice_last(regressed, d, d)?;
        let gate1 = g.slice_last(regressed, 2 * d, d)?;
        let shift2 = g.slice_last(regressed, 3 * d, d)?;
        let scale2 = g.slice_last(regressed, 4 * d, d)?;
        let gate2 = g.slice_last(regressed, 5 * d, d)?;

        // attention branch
        let normed = g.layernorm(tokens, LAYERNORM_EPS)?;
        let modded = self.modulate(g, normed, shift1, scale1)?;
        let qkv = g.matmul(modded, qkv_w)?;
        let qkv = g.row_add(qkv, qkv_b)?;
        let q = g.slice_last(qkv, 0, d)?;
        let k = g.slice_last(qkv, d, d)?;
        let v = g.slice_last(qkv, 2 * d, d)?;
        let qh = g.split_heads(q, self.cfg.heads)?;
        let kh = g.split_heads(k, self.cfg.heads)?;
        let vh = g.split_heads(v, self.cfg.heads)?;
        let att = g.attention(qh, kh, vh)?;
        let merged = g.merge_heads(att)?;
        let proj = g.matmul(merged, proj_w)?;
        let proj = g.row_add(proj, proj_b)?;
        let gated = g.row_mul(proj, gate1)?;
        let tokens = g.add(tokens, gated)?;

        // pointwise MLP branch
        let normed = g.layernorm(tokens, LAYERNORM_EPS)?;
        let modded = self.modulate(g, normed, shift2, scale2)?;
        let h = g.matmul(modded, fc1_w)?;
        let h = g.row_add(h, fc1_b)?;
        let h = g.gelu(h);
        let h = g.matmul(h, fc2_w)?;
        let h = g.row_add(h, fc2_b)?;
        let gated = g.row_mul(h, gate2)?;
        g.add(tokens, gated)
    }

    /// Full forward pass inside an existing graph. `ids` must come from
    /// [`IcdtModel::insert_weights`]. Returns the noise prediction and the
    /// variance interpolant, both `[I, I, C]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<E>,
        ids: &[NodeId],
        zt: NodeId,
        zcond: NodeId,
        t: usize,
    ) -> Result<(NodeId, NodeId)> {
        if g.value(zt).shape() != g.value(zcond).shape() {
            return Err(Error::shape(
                "model forward",
                g.value(zt).shape(),
                g.value(zcond).shape(),
            ));
        }
        self.check_latent(g.value(zt))?;
        let c = self.cfg.latent_channels;

        let x = g.concat_last(zt, zcond)?;
        let tokens = g.patchify(x, self.cfg.patch)?;
        let tokens = g.matmul(tokens, ids[0])?;
        let tokens = g.row_add(tokens, ids[1])?;
        let pos = g.constant(self.pos_table.clone());
        let mut tokens = g.add(tokens, pos)?;

        let cond = self.conditioning(g, ids, t)?;

        for i in 0..self.cfg.layers {
            tokens = self.block_forward(g, ids, 6 + 10 * i, tokens, cond)?;
        }

        let base = 6 + 10 * self.cfg.layers;
        let (fin_ada_w, fin_ada_b) = (ids[base], ids[base + 1]);
        let (fin_w, fin_b) = (ids[base + 2], ids[base + 3]);
        let d = self.cfg.hidden;
        let cond_act = g.silu(cond);
        let regressed = g.matmul(cond_act, fin_ada_w)?;
        let regressed = g.row_add(regressed, fin_ada_b)?;
        let shift = g.slice_last(regressed, 0, d)?;
        let scale = g.slice_last(regressed, d, d)?;
        let normed = g.layernorm(tokens, LAYERNORM_EPS)?;
        let modded = self.modulate(g, normed, shift, scale)?;
        let decoded = g.matmul(modded, fin_w)?;
        let decoded = g.row_add(decoded, fin_b)?;
        let field = g.unpatchify(decoded, self.cfg.patch, 2 * c)?;
        let eps_pred = g.slice_last(field, 0, c)?;
        let v = g.slice_last(field, c, c)?;
        Ok((eps_pred, v))
    }

    /// Convenience forward without gradient tracking, using the model's own
    /// weights (or `weights` when given, e.g. the EMA shadow).
    pub fn forward(
        &self,
        zt: &Tensor<E>,
        zcond: &Tensor<E>,
        t: usize,
        weights: Option<&Parameters<E>>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let mut g = Graph::new();
        let ids = self.insert_weights(&mut g, weights, false);
        let zt = g.constant(zt.clone());
        let zc = g.constant(zcond.clone());
        let (e, v) = self.forward_graph(&mut g, &ids, zt, zc, t)?;
        Ok((g.value(e).clone(), g.value(v).clone()))
    }
}

/// Epsilon inside the no-affine layer norms (conventional ViT value).
pub const LAYERNORM_EPS: f64 = 1e-6;
