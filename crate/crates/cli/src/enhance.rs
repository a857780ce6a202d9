//! End-to-end enhancement: raw Bayer frame in, clean sRGB image out.

use std::time::Instant;

use anyhow::{bail, Result};

use darklift_core::diffusion::{ddim_sample, GuidanceConfig, NoiseSchedule};
use darklift_core::isp::{raw_to_lrgb, ColorState, ImagePlane, RawFrame};
use darklift_core::rng::Rng;
use darklift_core::tensor::Graph;
use darklift_core::train::FeatureStack;
use darklift_core::unet::Denoiser;
use darklift_core::vae::{batch_to_tensor, tensor_to_image, Vae};

/// Inference settings; everything is deterministic given `seed`.
#[derive(Debug, Clone, Copy)]
pub struct EnhanceSettings {
    pub guidance: f32,
    pub steps: usize,
    pub seed: u64,
    /// Latent standardization factor recorded in the diffusion checkpoint.
    pub latent_scale: f32,
}

pub struct EnhanceOutcome {
    pub image: ImagePlane,
    pub runtime_seconds: f64,
}

/// Run the full pipeline: develop the raw to brightened linear RGB, encode
/// it (the latent mean conditions the context processor; the encoder skip
/// features feed the decoder), sample the clean latent with guided DDIM,
/// and decode.
pub fn enhance_frame(
    vae: &Vae,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    frame: &RawFrame,
    settings: &EnhanceSettings,
) -> Result<EnhanceOutcome> {
    let start = Instant::now();
    vae.freeze();
    denoiser.freeze();

    let lrgb = raw_to_lrgb(frame).map_err(anyhow::Error::msg)?;

    // condition latent (mean, no sampling) and skip features
    let mut g = Graph::new();
    let x = batch_to_tensor(&mut g, &[&lrgb]).map_err(anyhow::Error::msg)?;
    let enc = vae.encode(&mut g, x).map_err(anyhow::Error::msg)?;
    let latent_shape = g.shape(enc.mu).to_vec();
    let z_y = g.scale(enc.mu, settings.latent_scale);
    let feats = denoiser
        .context_features(&mut g, z_y)
        .map_err(anyhow::Error::msg)?;
    let cond = FeatureStack::from_graph(&g, &feats);
    let skips = FeatureStack::from_graph(&g, &enc.skip_features);
    drop(g);

    // the unconditional branch draws its substitute latent from a stream
    // derived from the user seed
    let guidance = GuidanceConfig::new(settings.guidance, settings.seed ^ 0x9E37_79B9_7F4A_7C15)
        .map_err(anyhow::Error::msg)?;
    let mut rng = Rng::new(settings.seed);
    let sampled = ddim_sample(
        denoiser,
        &cond,
        &latent_shape,
        settings.steps,
        &guidance,
        schedule,
        &mut rng,
        false,
    )
    .map_err(anyhow::Error::msg)?;

    let mut g = Graph::new();
    let z0_scaled = g
        .leaf(sampled.latent, latent_shape)
        .map_err(anyhow::Error::msg)?;
    let z0 = g.scale(z0_scaled, 1.0 / settings.latent_scale);
    let skip_tensors = skips.bind(&mut g).map_err(anyhow::Error::msg)?;
    let use_skips = vae.config.use_residual_skips;
    let decoded = vae
        .decode(&mut g, z0, use_skips.then_some(&skip_tensors[..]))
        .map_err(anyhow::Error::msg)?;
    let image = tensor_to_image(&g, decoded, 0, ColorState::Srgb).map_err(anyhow::Error::msg)?;
    if image.data.iter().any(|v| !v.is_finite()) {
        bail!("enhancement produced non-finite pixels");
    }
    Ok(EnhanceOutcome {
        image,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}
