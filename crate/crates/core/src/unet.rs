//! Denoising U-Net with region-based cross-attention, plus the context
//! processor that turns the conditioning latent into per-level features.
//!
//! The encoder path attends to the context processor's features at the
//! configured levels. The decoder path has no text branch to attend to, so
//! its attention blocks are region-based self-attention. Attention output
//! projections start at zero, which makes every attention block the identity
//! at initialization; that is what lets the context processor be an exact
//! weight copy of the encoder path.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{region_cross_attention_tokens, AttentionWeights, RegionSpec};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, GroupNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{Graph, Param, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; the length sets the depth.
    pub channel_multipliers: Vec<usize>,
    /// Levels carrying region attention (0 = finest).
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    /// Region side length in latent tokens, shrunk to fit small levels.
    pub region_size: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Highest timestep index accepted by the embedding.
    pub max_timestep: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            latent_channels: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            time_embed_dim: 64,
            region_size: 4,
            heads: 1,
            max_timestep: 1000,
        }
    }
}

impl UNetConfig {
    pub fn depth(&self) -> usize {
        self.channel_multipliers.len()
    }

    fn level_channels(&self, l: usize) -> usize {
        self.base_channels * self.channel_multipliers[l]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() {
            return Err(Error::config("U-Net needs at least one level"));
        }
        if let Some(&bad) = self.attention_levels.iter().find(|&&l| l >= self.depth()) {
            return Err(Error::config(format!(
                "attention level {bad} exceeds depth {}",
                self.depth()
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config(
                "time embedding dimension must be even and >= 2",
            ));
        }
        if self.heads == 0 {
            return Err(Error::config("attention needs at least one head"));
        }
        for l in &self.attention_levels {
            let c = self.level_channels(*l);
            if c % self.heads != 0 {
                return Err(Error::config(format!(
                    "{} channels at level {l} not divisible into {} heads",
                    c, self.heads
                )));
            }
        }
        if self.region_size == 0 {
            return Err(Error::config("region size must be positive"));
        }
        Ok(())
    }
}

/// Interleaved sin/cos embedding of a timestep over geometrically spaced
/// frequencies: `out[2i] = sin(t * f_i)`, `out[2i+1] = cos(t * f_i)` with
/// `f_i = 10000^(-i / half)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f32>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "time embedding dimension {dim} must be even and >= 2"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = libm::exp(-(i as f64) * libm::log(10000.0) / half as f64);
        let arg = t as f64 * freq;
        out[2 * i] = libm::sin(arg) as f32;
        out[2 * i + 1] = libm::cos(arg) as f32;
    }
    Ok(out)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(rng: &mut Rng, cin: usize, cout: usize, time_dim: usize) -> ResBlock {
        ResBlock {
            norm1: GroupNorm::auto(cin),
            conv1: Conv2d::new(rng, cin, cout, 3, 1, 1),
            time_proj: Linear::new(rng, time_dim, cout),
            norm2: GroupNorm::auto(cout),
            conv2: Conv2d::new(rng, cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(rng, cin, cout, 1, 1, 0)),
        }
    }

    fn forward(&self, g: &mut Graph, x: Tensor, temb: Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, h)?;
        let tb = self.time_proj.forward(g, temb)?;
        let h = g.add_chan_bias_batch(h, tb)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let base = match &self.skip {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        g.add(base, h)
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.norm1.named_params(&format!("{prefix}.norm1"), out);
        self.conv1.named_params(&format!("{prefix}.conv1"), out);
        self.time_proj
            .named_params(&format!("{prefix}.time_proj"), out);
        self.norm2.named_params(&format!("{prefix}.norm2"), out);
        self.conv2.named_params(&format!("{prefix}.conv2"), out);
        if let Some(s) = &self.skip {
            s.named_params(&format!("{prefix}.skip"), out);
        }
    }

    fn clone_detached(&self) -> ResBlock {
        ResBlock {
            norm1: self.norm1.clone_detached(),
            conv1: self.conv1.clone_detached(),
            time_proj: self.time_proj.clone_detached(),
            norm2: self.norm2.clone_detached(),
            conv2: self.conv2.clone_detached(),
            skip: self.skip.as_ref().map(|s| s.clone_detached()),
        }
    }
}

/// Pre-norm region attention with residual add. `cond = None` gives
/// region-based self-attention. The output projection starts at zero, so a
/// freshly built block is the identity map.
struct AttentionBlock {
    norm: GroupNorm,
    heads: Vec<AttentionWeights>,
    out_proj: Linear,
    region: RegionSpec,
}

impl AttentionBlock {
    fn new(rng: &mut Rng, channels: usize, heads: usize, region: RegionSpec) -> AttentionBlock {
        let d_head = channels / heads;
        let head_weights = (0..heads)
            .map(|_| AttentionWeights::new(rng, channels, d_head))
            .collect();
        let out_proj = Linear {
            weight: Param::zeros(vec![channels, channels]),
            bias: Param::zeros(vec![channels]),
        };
        AttentionBlock {
            norm: GroupNorm::auto(channels),
            heads: head_weights,
            out_proj,
            region,
        }
    }

    fn forward(&self, g: &mut Graph, x: Tensor, cond: Option<Tensor>) -> Result<Tensor> {
        let s = g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if let Some(cd) = cond {
            if g.shape(cd) != s.as_slice() {
                return Err(Error::shape(format!(
                    "condition {:?} does not match latent {:?}",
                    g.shape(cd),
                    s
                )));
            }
        }
        let spec = self.region.fit(h, w);
        let xn = self.norm.forward(g, x)?;
        let cn = match cond {
            Some(cd) => self.norm.forward(g, cd)?,
            None => xn,
        };
        let d_head = c / self.heads.len();
        let mut update: Option<Tensor> = None;
        for b in 0..n {
            let tok_idx = token_indices(b, c, h, w);
            let zt = g.gather(xn, tok_idx.clone(), vec![h * w, c])?;
            let ct = if cond.is_some() {
                g.gather(cn, tok_idx.clone(), vec![h * w, c])?
            } else {
                zt
            };
            // concatenate per-head outputs along the feature axis
            let mut merged: Option<Tensor> = None;
            for (hi, weights) in self.heads.iter().enumerate() {
                let att = region_cross_attention_tokens(g, zt, ct, h, w, spec, weights)?;
                let cols: Vec<usize> = (0..h * w * d_head)
                    .map(|i| {
                        let (row, col) = (i / d_head, i % d_head);
                        row * c + hi * d_head + col
                    })
                    .collect();
                let placed = g.scatter(att, Rc::new(cols), vec![h * w, c])?;
                merged = Some(match merged {
                    Some(acc) => g.add(acc, placed)?,
                    None => placed,
                });
            }
            let merged = merged.expect("at least one head");
            let projected = self.out_proj.forward(g, merged)?;
            let placed = g.scatter(projected, tok_idx, vec![n, c, h, w])?;
            update = Some(match update {
                Some(acc) => g.add(acc, placed)?,
                None => placed,
            });
        }
        g.add(x, update.expect("at least one sample"))
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.norm.named_params(&format!("{prefix}.norm"), out);
        for (i, h) in self.heads.iter().enumerate() {
            h.named_params(&format!("{prefix}.head{i}"), out);
        }
        self.out_proj
            .named_params(&format!("{prefix}.out_proj"), out);
    }
}

/// Flat indices mapping sample `b` of `[n, c, h, w]` to a `[h*w, c]` token
/// matrix.
fn token_indices(b: usize, c: usize, h: usize, w: usize) -> Rc<Vec<usize>> {
    let mut idx = Vec::with_capacity(h * w * c);
    for t in 0..h * w {
        for ch in 0..c {
            idx.push((b * c + ch) * h * w + t);
        }
    }
    Rc::new(idx)
}

pub struct UNet {
    pub config: UNetConfig,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    enc_res: Vec<ResBlock>,
    enc_attn: Vec<Option<AttentionBlock>>,
    downs: Vec<Option<Conv2d>>,
    mid: ResBlock,
    dec_res: Vec<ResBlock>,
    dec_attn: Vec<Option<AttentionBlock>>,
    ups: Vec<Option<Conv2d>>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new(config: UNetConfig, rng: &mut Rng) -> Result<UNet> {
        config.validate()?;
        let depth = config.depth();
        let td = config.time_embed_dim;
        let time_in = Linear::new(rng, td, td);
        let time_out = Linear::new(rng, td, td);
        let conv_in = Conv2d::new(rng, config.latent_channels, config.level_channels(0), 3, 1, 1);
        let region = RegionSpec::square(config.region_size)?;
        let mut enc_res = Vec::new();
        let mut enc_attn = Vec::new();
        let mut downs = Vec::new();
        for l in 0..depth {
            let cin = if l == 0 {
                config.level_channels(0)
            } else {
                config.level_channels(l - 1)
            };
            let cout = config.level_channels(l);
            enc_res.push(ResBlock::new(rng, cin, cout, td));
            enc_attn.push(
                config
                    .attention_levels
                    .contains(&l)
                    .then(|| AttentionBlock::new(rng, cout, config.heads, region)),
            );
            // k=4, s=2, p=1 halves even extents exactly
            downs.push((l + 1 < depth).then(|| Conv2d::new(rng, cout, cout, 4, 2, 1)));
        }
        let top = config.level_channels(depth - 1);
        let mid = ResBlock::new(rng, top, top, td);
        let mut dec_res = Vec::new();
        let mut dec_attn = Vec::new();
        let mut ups = Vec::new();
        for l in (0..depth).rev() {
            let ch = config.level_channels(l);
            dec_res.push(ResBlock::new(rng, ch, ch, td));
            dec_attn.push(
                config
                    .attention_levels
                    .contains(&l)
                    .then(|| AttentionBlock::new(rng, ch, config.heads, region)),
            );
            ups.push((l > 0).then(|| Conv2d::new(rng, ch, config.level_channels(l - 1), 3, 1, 1)));
        }
        let out_norm = GroupNorm::auto(config.level_channels(0));
        let out_conv = Conv2d::zeroed(config.level_channels(0), config.latent_channels, 3, 1, 1);
        Ok(UNet {
            config,
            time_in,
            time_out,
            conv_in,
            enc_res,
            enc_attn,
            downs,
            mid,
            dec_res,
            dec_attn,
            ups,
            out_norm,
            out_conv,
        })
    }

    /// Embed one timestep per batch element and run the shared MLP.
    pub fn embed_timesteps(&self, g: &mut Graph, ts: &[usize]) -> Result<Tensor> {
        let dim = self.config.time_embed_dim;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            if t > self.config.max_timestep {
                return Err(Error::range(format!(
                    "timestep {t} exceeds maximum {}",
                    self.config.max_timestep
                )));
            }
            data.extend_from_slice(&time_embedding(t, dim)?);
        }
        let emb = g.leaf(data, vec![ts.len(), dim])?;
        let h = self.time_in.forward(g, emb)?;
        let h = g.silu(h);
        self.time_out.forward(g, h)
    }

    fn check_input(&self, g: &Graph, z: Tensor) -> Result<()> {
        let s = g.shape(z);
        if s.len() != 4 || s[1] != self.config.latent_channels {
            return Err(Error::shape(format!(
                "expected [n, {}, h, w] latent, found {s:?}",
                self.config.latent_channels
            )));
        }
        let f = 1 << (self.config.depth() - 1);
        if s[2] % f != 0 || s[3] % f != 0 {
            return Err(Error::shape(format!(
                "latent {}x{} not divisible by 2^(depth-1) = {f}",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Encoder-path features after the residual block of each level.
    /// Attention is skipped; while every attention block is still at its
    /// zero-projection initialization this matches the full forward exactly.
    pub fn encoder_features(&self, g: &mut Graph, z: Tensor, temb: Tensor) -> Result<Vec<Tensor>> {
        self.check_input(g, z)?;
        let mut h = self.conv_in.forward(g, z)?;
        let mut feats = Vec::with_capacity(self.config.depth());
        for l in 0..self.config.depth() {
            h = self.enc_res[l].forward(g, h, temb)?;
            feats.push(h);
            if let Some(down) = &self.downs[l] {
                h = down.forward(g, h)?;
            }
        }
        Ok(feats)
    }

    /// Full denoising pass. `cond` holds one feature map per attention
    /// level, finest level first, shaped like the encoder feature there.
    pub fn forward(
        &self,
        g: &mut Graph,
        z_t: Tensor,
        temb: Tensor,
        cond: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        self.check_input(g, z_t)?;
        let mut attn_order: Vec<usize> = self.config.attention_levels.clone();
        attn_order.sort_unstable();
        if let Some(c) = cond {
            if c.len() != attn_order.len() {
                return Err(Error::shape(format!(
                    "expected {} condition features, found {}",
                    attn_order.len(),
                    c.len()
                )));
            }
        }
        let mut h = self.conv_in.forward(g, z_t)?;
        let mut enc_feats = Vec::with_capacity(self.config.depth());
        for l in 0..self.config.depth() {
            h = self.enc_res[l].forward(g, h, temb)?;
            if let Some(attn) = &self.enc_attn[l] {
                let c = cond.and_then(|c| {
                    attn_order
                        .iter()
                        .position(|&al| al == l)
                        .map(|i| c[i])
                });
                h = attn.forward(g, h, c)?;
            }
            enc_feats.push(h);
            if let Some(down) = &self.downs[l] {
                h = down.forward(g, h)?;
            }
        }
        h = self.mid.forward(g, h, temb)?;
        for (i, l) in (0..self.config.depth()).rev().enumerate() {
            h = g.add(h, enc_feats[l])?;
            h = self.dec_res[i].forward(g, h, temb)?;
            if let Some(attn) = &self.dec_attn[i] {
                h = attn.forward(g, h, None)?;
            }
            if let Some(up) = &self.ups[i] {
                h = g.upsample2x(h)?;
                h = up.forward(g, h)?;
            }
        }
        let h = self.out_norm.forward(g, h)?;
        let h = g.silu(h);
        self.out_conv.forward(g, h)
    }

    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.time_in.named_params("time_in", &mut out);
        self.time_out.named_params("time_out", &mut out);
        self.conv_in.named_params("conv_in", &mut out);
        for l in 0..self.config.depth() {
            self.enc_res[l].named_params(&format!("enc{l}.res"), &mut out);
            if let Some(a) = &self.enc_attn[l] {
                a.named_params(&format!("enc{l}.attn"), &mut out);
            }
            if let Some(d) = &self.downs[l] {
                d.named_params(&format!("enc{l}.down"), &mut out);
            }
        }
        self.mid.named_params("mid", &mut out);
        for (i, l) in (0..self.config.depth()).rev().enumerate() {
            self.dec_res[i].named_params(&format!("dec{l}.res"), &mut out);
            if let Some(a) = &self.dec_attn[i] {
                a.named_params(&format!("dec{l}.attn"), &mut out);
            }
            if let Some(u) = &self.ups[i] {
                u.named_params(&format!("dec{l}.up"), &mut out);
            }
        }
        self.out_norm.named_params("out_norm", &mut out);
        self.out_conv.named_params("out_conv", &mut out);
        out
    }

    /// Parameters of the attention blocks only.
    pub fn attention_params(&self) -> Vec<Param> {
        let mut named = Vec::new();
        for a in self.enc_attn.iter().flatten() {
            a.named_params("a", &mut named);
        }
        for a in self.dec_attn.iter().flatten() {
            a.named_params("a", &mut named);
        }
        named.into_iter().map(|(_, p)| p).collect()
    }
}

/// Encoder-shaped network producing per-level conditioning features from
/// the noisy image's latent. Architecture and initial weights mirror the
/// U-Net encoder path; the timestep input is pinned to 0.
pub struct ContextProcessor {
    attention_levels: Vec<usize>,
    depth: usize,
    time_embed_dim: usize,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    res: Vec<ResBlock>,
    downs: Vec<Option<Conv2d>>,
}

impl ContextProcessor {
    /// Copy the encoder-path weights out of a U-Net.
    pub fn from_unet(unet: &UNet) -> ContextProcessor {
        let mut sorted = unet.config.attention_levels.clone();
        sorted.sort_unstable();
        ContextProcessor {
            attention_levels: sorted,
            depth: unet.config.depth(),
            time_embed_dim: unet.config.time_embed_dim,
            time_in: unet.time_in.clone_detached(),
            time_out: unet.time_out.clone_detached(),
            conv_in: unet.conv_in.clone_detached(),
            res: unet.enc_res.iter().map(|r| r.clone_detached()).collect(),
            downs: unet
                .downs
                .iter()
                .map(|d| d.as_ref().map(|c| c.clone_detached()))
                .collect(),
        }
    }

    /// Per-attention-level condition features `z_y^l`, finest level first.
    pub fn features(&self, g: &mut Graph, z_y: Tensor) -> Result<Vec<Tensor>> {
        let n = g.shape(z_y)[0];
        let dim = self.time_embed_dim;
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            data.extend_from_slice(&time_embedding(0, dim)?);
        }
        let emb = g.leaf(data, vec![n, dim])?;
        let temb = self.time_in.forward(g, emb)?;
        let temb = g.silu(temb);
        let temb = self.time_out.forward(g, temb)?;

        let mut h = self.conv_in.forward(g, z_y)?;
        let mut feats = Vec::new();
        for l in 0..self.depth {
            h = self.res[l].forward(g, h, temb)?;
            if self.attention_levels.contains(&l) {
                feats.push(h);
            }
            if let Some(down) = &self.downs[l] {
                h = down.forward(g, h)?;
            }
        }
        Ok(feats)
    }

    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.time_in.named_params("ctx.time_in", &mut out);
        self.time_out.named_params("ctx.time_out", &mut out);
        self.conv_in.named_params("ctx.conv_in", &mut out);
        for (l, r) in self.res.iter().enumerate() {
            r.named_params(&format!("ctx.enc{l}.res"), &mut out);
            if let Some(d) = &self.downs[l] {
                d.named_params(&format!("ctx.enc{l}.down"), &mut out);
            }
        }
        out
    }
}

/// The full noise predictor: U-Net plus context processor.
pub struct Denoiser {
    pub unet: UNet,
    pub context: ContextProcessor,
}

impl Denoiser {
    pub fn new(config: UNetConfig, rng: &mut Rng) -> Result<Denoiser> {
        let unet = UNet::new(config, rng)?;
        let context = ContextProcessor::from_unet(&unet);
        Ok(Denoiser { unet, context })
    }

    pub fn context_features(&self, g: &mut Graph, z_y: Tensor) -> Result<Vec<Tensor>> {
        self.context.features(g, z_y)
    }

    /// Predict the noise in `z_t` at per-sample timesteps `ts`.
    ///
    /// Without condition features the unconditional branch substitutes a
    /// standard-Gaussian latent (drawn from `null_seed`) through the context
    /// processor, matching how conditioning dropout trains the model.
    pub fn predict_noise(
        &self,
        g: &mut Graph,
        z_t: Tensor,
        ts: &[usize],
        cond: Option<&[Tensor]>,
        null_seed: u64,
    ) -> Result<Tensor> {
        let s = g.shape(z_t).to_vec();
        if s.len() != 4 || ts.len() != s[0] {
            return Err(Error::shape(format!(
                "need one timestep per sample: {} timesteps for {s:?}",
                ts.len()
            )));
        }
        let temb = self.unet.embed_timesteps(g, ts)?;
        let feats_storage;
        let feats: &[Tensor] = match cond {
            Some(f) => f,
            None => {
                let mut rng = Rng::new(null_seed);
                let z_null = g.randn(&mut rng, s);
                feats_storage = self.context.features(g, z_null)?;
                &feats_storage
            }
        };
        self.unet.forward(g, z_t, temb, Some(feats))
    }

    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = self.unet.named_params();
        out.extend(self.context.named_params());
        out
    }

    pub fn params(&self) -> Vec<Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    /// Parameters trained at the higher stage-2 learning rate: the context
    /// processor and the region attention blocks.
    pub fn new_module_params(&self) -> Vec<Param> {
        let mut out: Vec<Param> = self
            .context
            .named_params()
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        out.extend(self.unet.attention_params());
        out
    }

    /// Everything else: the U-Net backbone.
    pub fn backbone_params(&self) -> Vec<Param> {
        let new: alloc::collections::BTreeSet<usize> = self
            .new_module_params()
            .iter()
            .map(|p| p.data().as_ptr() as usize)
            .collect();
        self.params()
            .into_iter()
            .filter(|p| !new.contains(&(p.data().as_ptr() as usize)))
            .collect()
    }

    pub fn freeze(&self) {
        for p in self.params() {
            p.set_trainable(false);
        }
    }
}
