//! Content-preservation VAE with encoder-to-decoder residual connections.
//!
//! The encoder downsamples by 2 per block and emits, besides the latent
//! moments, the feature map of every block. The decoder can fold those
//! features back in: before running block `b` it adds `Conv_b(E_b)` to its
//! own embedding at the matching resolution, so fine detail bypasses the
//! bottleneck. With the residual convolutions zeroed the skip decode reduces
//! to the plain decode exactly.
//!
//! At full scale the residual convolutions are 3x3, stride 1, padding 1 with
//! channels 128->256, 256->512, 512->512, 512->512; this implementation keeps
//! the same layer shape rules and scales channel counts down through
//! [`VaeConfig`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::{ColorState, ImagePlane};
use crate::layers::{Conv2d, GroupNorm};
use crate::rng::Rng;
use crate::tensor::{Graph, Param, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per encoder block; the length sets the block count
    /// and the total downsampling factor (x2 per block).
    pub channel_multipliers: Vec<usize>,
    pub latent_channels: usize,
    /// Weight of the KL term in the stage-1 loss.
    pub kl_weight: f32,
    /// Decode with encoder skip features when they are provided.
    pub use_residual_skips: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            in_channels: 3,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            latent_channels: 4,
            kl_weight: 1e-4,
            use_residual_skips: true,
        }
    }
}

impl VaeConfig {
    pub fn blocks(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Total spatial reduction from image to latent.
    pub fn downsample_factor(&self) -> usize {
        1 << self.blocks()
    }

    fn block_channels(&self, b: usize) -> usize {
        self.base_channels * self.channel_multipliers[b]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() {
            return Err(Error::config("VAE needs at least one block"));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.latent_channels == 0 {
            return Err(Error::config("VAE channel counts must be positive"));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::config("kl_weight must be >= 0"));
        }
        Ok(())
    }
}

struct ConvBlock {
    norm_a: GroupNorm,
    conv_a: Conv2d,
    norm_b: GroupNorm,
    conv_b: Conv2d,
}

impl ConvBlock {
    fn new(rng: &mut Rng, cin: usize, cout: usize) -> ConvBlock {
        ConvBlock {
            norm_a: GroupNorm::auto(cin),
            conv_a: Conv2d::new(rng, cin, cout, 3, 1, 1),
            norm_b: GroupNorm::auto(cout),
            conv_b: Conv2d::new(rng, cout, cout, 3, 1, 1),
        }
    }

    fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let h = self.norm_a.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv_a.forward(g, h)?;
        let h = self.norm_b.forward(g, h)?;
        let h = g.silu(h);
        self.conv_b.forward(g, h)
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.norm_a.named_params(&format!("{prefix}.norm_a"), out);
        self.conv_a.named_params(&format!("{prefix}.conv_a"), out);
        self.norm_b.named_params(&format!("{prefix}.norm_b"), out);
        self.conv_b.named_params(&format!("{prefix}.conv_b"), out);
    }
}

/// Encoder output: latent moments plus one feature map per block.
pub struct VaeOutput {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub skip_features: Vec<Tensor>,
}

pub struct Vae {
    pub config: VaeConfig,
    stem: Conv2d,
    enc_blocks: Vec<ConvBlock>,
    downsamples: Vec<Conv2d>,
    head_mu: Conv2d,
    head_logvar: Conv2d,
    dec_in: Conv2d,
    dec_blocks: Vec<ConvBlock>,
    upsample_convs: Vec<Conv2d>,
    /// `Conv_b` of the residual path, one per encoder block.
    skip_convs: Vec<Conv2d>,
    out_norm: GroupNorm,
    pub(crate) out_conv: Conv2d,
}

impl Vae {
    pub fn new(config: VaeConfig, rng: &mut Rng) -> Result<Vae> {
        config.validate()?;
        let blocks = config.blocks();
        let stem = Conv2d::new(rng, config.in_channels, config.block_channels(0), 3, 1, 1);
        let mut enc_blocks = Vec::new();
        let mut downsamples = Vec::new();
        for b in 0..blocks {
            let cin = if b == 0 {
                config.block_channels(0)
            } else {
                config.block_channels(b - 1)
            };
            let cout = config.block_channels(b);
            enc_blocks.push(ConvBlock::new(rng, cin, cout));
            // k=4, s=2, p=1 halves even extents exactly
            downsamples.push(Conv2d::new(rng, cout, cout, 4, 2, 1));
        }
        let top = config.block_channels(blocks - 1);
        let head_mu = Conv2d::new(rng, top, config.latent_channels, 3, 1, 1);
        // Start near-deterministic: sigma ~ exp(-3) so early reconstructions
        // are not drowned in reparameterization noise.
        let head_logvar = Conv2d::zeroed(top, config.latent_channels, 3, 1, 1);
        head_logvar
            .bias
            .set_data(vec![-6.0; config.latent_channels])?;

        let dec_in = Conv2d::new(rng, config.latent_channels, top, 3, 1, 1);
        let mut dec_blocks = Vec::new();
        let mut upsample_convs = Vec::new();
        let mut skip_convs = Vec::new();
        for b in (0..blocks).rev() {
            let ch = config.block_channels(b);
            // after upsampling we arrive at block b's resolution with the
            // channel count of the level above
            let from = if b + 1 < blocks {
                config.block_channels(b + 1)
            } else {
                top
            };
            upsample_convs.push(Conv2d::new(rng, from, ch, 3, 1, 1));
            // start the residual path at zero so reconstruction establishes
            // itself through the latent before the skips grow in
            skip_convs.push(Conv2d::zeroed(ch, ch, 3, 1, 1));
            dec_blocks.push(ConvBlock::new(rng, ch, ch));
        }
        let out_norm = GroupNorm::auto(config.block_channels(0));
        let out_conv = Conv2d::zeroed(config.block_channels(0), config.in_channels, 3, 1, 1);
        Ok(Vae {
            config,
            stem,
            enc_blocks,
            downsamples,
            head_mu,
            head_logvar,
            dec_in,
            dec_blocks,
            upsample_convs,
            skip_convs,
            out_norm,
            out_conv,
        })
    }

    /// Encode `[n, in_channels, h, w]` into latent moments and per-block
    /// skip features. Extents must divide by the total downsample factor.
    pub fn encode(&self, g: &mut Graph, x: Tensor) -> Result<VaeOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "encode expects [n, {}, h, w], found {s:?}",
                self.config.in_channels
            )));
        }
        let f = self.config.downsample_factor();
        if s[2] % f != 0 || s[3] % f != 0 {
            return Err(Error::shape(format!(
                "input {}x{} not divisible by downsample factor {f}",
                s[2], s[3]
            )));
        }
        let mut h = self.stem.forward(g, x)?;
        let mut skips = Vec::with_capacity(self.enc_blocks.len());
        for (block, down) in self.enc_blocks.iter().zip(&self.downsamples) {
            h = block.forward(g, h)?;
            skips.push(h);
            h = down.forward(g, h)?;
        }
        let mu = self.head_mu.forward(g, h)?;
        let logvar = self.head_logvar.forward(g, h)?;
        Ok(VaeOutput {
            mu,
            logvar,
            skip_features: skips,
        })
    }

    /// Decode a latent back to an sRGB image in `[0, 1]`. With
    /// `skips = Some(..)` the residual path adds `Conv_b(E_b)` before each
    /// decoder block; zeroed residual convolutions reduce to the plain
    /// decode exactly.
    pub fn decode(&self, g: &mut Graph, z: Tensor, skips: Option<&[Tensor]>) -> Result<Tensor> {
        let blocks = self.config.blocks();
        if let Some(sk) = skips {
            if sk.len() != blocks {
                return Err(Error::shape(format!(
                    "expected {blocks} skip features, found {}",
                    sk.len()
                )));
            }
        }
        let mut h = self.dec_in.forward(g, z)?;
        for (i, b) in (0..blocks).rev().enumerate() {
            h = g.upsample2x(h)?;
            h = self.upsample_convs[i].forward(g, h)?;
            if let Some(sk) = skips {
                let folded = self.skip_convs[i].forward(g, sk[b])?;
                if g.shape(folded) != g.shape(h) {
                    return Err(Error::shape(format!(
                        "skip feature {b} maps to {:?}, decoder expects {:?}",
                        g.shape(folded),
                        g.shape(h)
                    )));
                }
                h = g.add(h, folded)?;
            }
            h = self.dec_blocks[i].forward(g, h)?;
        }
        let h = self.out_norm.forward(g, h)?;
        let h = g.silu(h);
        let h = self.out_conv.forward(g, h)?;
        Ok(g.clamp(h, 0.0, 1.0))
    }

    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.stem.named_params("enc.stem", &mut out);
        for (b, blk) in self.enc_blocks.iter().enumerate() {
            blk.named_params(&format!("enc.block{b}"), &mut out);
            self.downsamples[b].named_params(&format!("enc.down{b}"), &mut out);
        }
        self.head_mu.named_params("enc.head_mu", &mut out);
        self.head_logvar.named_params("enc.head_logvar", &mut out);
        self.dec_in.named_params("dec.in", &mut out);
        for (i, blk) in self.dec_blocks.iter().enumerate() {
            self.upsample_convs[i].named_params(&format!("dec.up{i}"), &mut out);
            self.skip_convs[i].named_params(&format!("dec.skip{i}"), &mut out);
            blk.named_params(&format!("dec.block{i}"), &mut out);
        }
        self.out_norm.named_params("dec.out_norm", &mut out);
        self.out_conv.named_params("dec.out_conv", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    /// Parameters of the residual convolutions `Conv_b` only.
    pub fn skip_conv_params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for (i, c) in self.skip_convs.iter().enumerate() {
            c.named_params(&alloc::format!("dec.skip{i}"), &mut out);
        }
        out.into_iter().map(|(_, p)| p).collect()
    }

    pub fn freeze(&self) {
        for p in self.params() {
            p.set_trainable(false);
        }
    }

    /// Zero every residual convolution (test hook for the zero-residual
    /// equivalence property).
    pub fn zero_skip_convs(&self) -> Result<()> {
        for c in &self.skip_convs {
            c.weight.set_data(vec![0.0; c.weight.numel()])?;
            c.bias.set_data(vec![0.0; c.bias.numel()])?;
        }
        Ok(())
    }
}

/// `z = mu + exp(logvar / 2) * n`, `n ~ N(0, I)`.
pub fn reparameterize(g: &mut Graph, mu: Tensor, logvar: Tensor, rng: &mut Rng) -> Result<Tensor> {
    if g.shape(mu) != g.shape(logvar) {
        return Err(Error::shape(format!(
            "mu {:?} and logvar {:?} differ",
            g.shape(mu),
            g.shape(logvar)
        )));
    }
    let n = g.randn(rng, g.shape(mu).to_vec());
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(sigma, n)?;
    g.add(mu, noise)
}

/// Mean over elements of `0.5 * (mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_divergence(g: &mut Graph, mu: Tensor, logvar: Tensor) -> Result<Tensor> {
    if g.shape(mu) != g.shape(logvar) {
        return Err(Error::shape(format!(
            "mu {:?} and logvar {:?} differ",
            g.shape(mu),
            g.shape(logvar)
        )));
    }
    let mu2 = g.sqr(mu)?;
    let ev = g.exp(logvar);
    let sum = g.add(mu2, ev)?;
    let lv1 = g.add_scalar(logvar, 1.0);
    let diff = g.sub(sum, lv1)?;
    let half = g.scale(diff, 0.5);
    Ok(g.mean_all(half))
}

/// Stage-1 losses, separated for logging.
pub struct Stage1Loss {
    pub total: Tensor,
    pub reconstruction: Tensor,
    pub kl: Tensor,
}

/// Reconstruction + KL for one batch of (noisy linear RGB, clean sRGB)
/// pairs: encode the noisy image, sample the latent, decode (with skips if
/// configured), and compare to the clean target.
pub fn stage1_loss(
    g: &mut Graph,
    vae: &Vae,
    noisy_lrgb: Tensor,
    clean_srgb: Tensor,
    rng: &mut Rng,
) -> Result<Stage1Loss> {
    stage1_loss_with(g, vae, noisy_lrgb, clean_srgb, rng, vae.config.use_residual_skips)
}

/// [`stage1_loss`] with an explicit skip decision, so the trainer can drop
/// the residual path on some batches and keep the latent informative.
pub fn stage1_loss_with(
    g: &mut Graph,
    vae: &Vae,
    noisy_lrgb: Tensor,
    clean_srgb: Tensor,
    rng: &mut Rng,
    use_skips: bool,
) -> Result<Stage1Loss> {
    if g.shape(noisy_lrgb) != g.shape(clean_srgb) {
        return Err(Error::shape(format!(
            "noisy {:?} and clean {:?} batches differ",
            g.shape(noisy_lrgb),
            g.shape(clean_srgb)
        )));
    }
    let enc = vae.encode(g, noisy_lrgb)?;
    let z = reparameterize(g, enc.mu, enc.logvar, rng)?;
    let skips = if use_skips {
        Some(&enc.skip_features[..])
    } else {
        None
    };
    let rec = vae.decode(g, z, skips)?;
    let diff = g.sub(rec, clean_srgb)?;
    let sq = g.sqr(diff)?;
    let l2 = g.mean_all(sq);
    let kl = kl_divergence(g, enc.mu, enc.logvar)?;
    let weighted = g.scale(kl, vae.config.kl_weight);
    let total = g.add(l2, weighted)?;
    Ok(Stage1Loss {
        total,
        reconstruction: l2,
        kl,
    })
}

/// Stack image planes into an `[n, c, h, w]` leaf.
pub fn batch_to_tensor(g: &mut Graph, images: &[&ImagePlane]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let (w, h, c) = (images[0].width, images[0].height, images[0].channels);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.width != w || img.height != h || img.channels != c {
            return Err(Error::shape("batch images must share extents"));
        }
        data.extend_from_slice(&img.data);
    }
    g.leaf(data, vec![images.len(), c, h, w])
}

/// Read one sample of a `[n, 3, h, w]` tensor back into an image plane.
pub fn tensor_to_image(g: &Graph, t: Tensor, sample: usize, state: ColorState) -> Result<ImagePlane> {
    let s = g.shape(t);
    if s.len() != 4 {
        return Err(Error::shape(format!("expected [n, c, h, w], found {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if sample >= n {
        return Err(Error::range(format!("sample {sample} out of {n}")));
    }
    let chw = c * h * w;
    let data = g.data(t)[sample * chw..(sample + 1) * chw].to_vec();
    ImagePlane::new(w, h, c, data, state)
}
