//! Two-stage training orchestration.
//!
//! Stage 1 fits the residual VAE on (noisy linear RGB, clean sRGB) pairs.
//! Stage 2 freezes the VAE and trains the denoising U-Net plus context
//! processor on the combined latent + decoder-space loss, with conditioning
//! dropout for classifier-free guidance. Both stages are deterministic for
//! a fixed seed: shuffles, crops, timesteps, noise, and dropout all come
//! from one SplitMix64 stream.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffusion::{combined_loss, image_loss, mse, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::isp::ImagePlane;
use crate::rng::Rng;
use crate::tensor::{AdamState, Graph, Tensor};
use crate::unet::{Denoiser, UNetConfig};
use crate::vae::{batch_to_tensor, stage1_loss_with, Vae, VaeConfig};

/// Everything a training run needs. Serializable as the JSON config file
/// consumed by the command-line trainer; omitted fields take the defaults
/// below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// 1 = VAE, 2 = diffusion.
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random square crop side; must divide by the VAE downsample factor.
    pub crop_size: usize,
    /// Learning rate for the backbone (and the whole of stage 1).
    pub lr_main: f32,
    /// Stage-2 learning rate for the context processor and region attention.
    pub lr_new: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Weight of the decoder-space loss in stage 2.
    pub lambda: f32,
    /// Probability of replacing a sample's conditioning latent with pure
    /// Gaussian noise during stage 2.
    pub cond_dropout_prob: f32,
    /// Fraction of stage-1 epochs spent training the plain VAE through its
    /// latent alone. The remaining epochs freeze everything except the
    /// residual convolutions and fit them as additive detail correctors;
    /// training the whole network with skips active lets the much wider
    /// skip path absorb the entire reconstruction and the latent goes dead.
    pub skip_warmup_frac: f32,
    /// Probability of feeding the clean image as the stage-1 input (a
    /// ratio-1 pair). Aligns the encoder's latent distribution for noisy
    /// and clean inputs, which stage 2 relies on: its diffusion target is
    /// the clean image's latent while the decoder receives the noisy
    /// image's skip features.
    pub clean_input_prob: f32,
    /// Decoder-space loss is only evaluated for samples with
    /// `t <= image_loss_max_t_frac * t_max`.
    pub image_loss_max_t_frac: f32,
    pub seed: u64,
    /// Dataset manifest path (consumed by the CLI, not the core loop).
    pub dataset_manifest: String,
    /// Stage-2 input / stage-1 output checkpoint path.
    pub vae_checkpoint: String,
    /// Where the trained checkpoint goes.
    pub output_checkpoint: String,
    pub vae: VaeConfig,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            epochs: 40,
            batch_size: 8,
            crop_size: 64,
            lr_main: 1e-3,
            lr_new: 5e-3,
            beta1: 0.5,
            beta2: 0.9,
            lambda: 1.0,
            cond_dropout_prob: 0.05,
            skip_warmup_frac: 0.6,
            clean_input_prob: 0.5,
            image_loss_max_t_frac: 0.5,
            seed: 0,
            dataset_manifest: String::new(),
            vae_checkpoint: String::new(),
            output_checkpoint: String::new(),
            vae: VaeConfig::default(),
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The published full-scale recipe, for reference and for scaling
    /// decisions: stage 1 runs 3000 epochs at lr 4e-5 with Adam betas
    /// (0.5, 0.9) on 1200x1200 crops; stage 2 runs 3000 epochs at 2.5e-4
    /// for the context processor and region attention, 5e-5 for the rest,
    /// with 5% conditioning dropout. Far beyond desk-scale budgets; the
    /// defaults above are the scaled-down counterparts.
    pub fn full_scale_reference(stage: u8) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: 3000,
            crop_size: 1200,
            lr_main: if stage == 1 { 4e-5 } else { 5e-5 },
            lr_new: 2.5e-4,
            beta1: 0.5,
            beta2: 0.9,
            cond_dropout_prob: 0.05,
            ..TrainConfig::default()
        }
    }

    fn validate(&self, dataset_len: usize) -> Result<()> {
        if dataset_len == 0 {
            return Err(Error::config("dataset is empty"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::config(format!(
                "conditioning dropout probability {} outside [0, 1]",
                self.cond_dropout_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.skip_warmup_frac) {
            return Err(Error::config(format!(
                "skip warmup fraction {} outside [0, 1]",
                self.skip_warmup_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.clean_input_prob) {
            return Err(Error::config(format!(
                "clean input probability {} outside [0, 1]",
                self.clean_input_prob
            )));
        }
        let f = self.vae.downsample_factor();
        if self.crop_size == 0 || self.crop_size % f != 0 {
            return Err(Error::config(format!(
                "crop size {} not divisible by VAE downsample factor {f}",
                self.crop_size
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be >= 0"));
        }
        Ok(())
    }
}

/// One loss-log row. For stage 1 the two partial columns hold the
/// reconstruction and weighted KL terms; for stage 2 the latent and
/// decoder-space terms.
#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_a: f32,
    pub loss_b: f32,
    pub total: f32,
}

/// Aggregate statistics of a stage-2 run.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainStats {
    pub samples: usize,
    pub dropped_conditions: usize,
    pub image_loss_samples: usize,
}

/// Everything a stage-2 run produces. `latent_scale` standardizes encoder
/// latents to roughly unit variance before diffusion (the sampler's prior
/// is a standard Gaussian); it must be applied again at inference and is
/// stored in the checkpoint.
pub struct Stage2Artifacts {
    pub denoiser: Denoiser,
    pub stats: TrainStats,
    pub latent_scale: f32,
}

/// Detached per-level feature maps, movable across graphs.
#[derive(Debug, Clone, Default)]
pub struct FeatureStack {
    feats: Vec<(Vec<f32>, Vec<usize>)>,
}

impl FeatureStack {
    pub fn empty() -> FeatureStack {
        FeatureStack::default()
    }

    /// Snapshot tensors out of a graph.
    pub fn from_graph(g: &Graph, feats: &[Tensor]) -> FeatureStack {
        FeatureStack {
            feats: feats
                .iter()
                .map(|&t| (g.to_vec(t), g.shape(t).to_vec()))
                .collect(),
        }
    }

    /// Re-leaf the features into a (new) graph.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Tensor>> {
        self.feats
            .iter()
            .map(|(data, shape)| g.leaf(data.clone(), shape.clone()))
            .collect()
    }
}

/// Per-sample conditioning dropout decisions for one batch: `true` means
/// the sample's conditioning latent is replaced with pure Gaussian noise.
pub fn cond_dropout_mask(rng: &mut Rng, n: usize, prob: f32) -> Vec<bool> {
    (0..n).map(|_| rng.next_f32() < prob).collect()
}

/// A (noisy linear RGB, clean sRGB) training pair at matching extents.
pub struct TrainPair {
    pub noisy_lrgb: ImagePlane,
    pub clean_srgb: ImagePlane,
}

fn check_pairs(pairs: &[TrainPair], crop: usize) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.noisy_lrgb.width != p.clean_srgb.width || p.noisy_lrgb.height != p.clean_srgb.height {
            return Err(Error::shape(format!("pair {i}: extents differ")));
        }
        if p.noisy_lrgb.width < crop || p.noisy_lrgb.height < crop {
            return Err(Error::config(format!(
                "pair {i}: image {}x{} smaller than crop {crop}",
                p.noisy_lrgb.width, p.noisy_lrgb.height
            )));
        }
    }
    Ok(())
}

fn crop_plane(img: &ImagePlane, x0: usize, y0: usize, side: usize) -> ImagePlane {
    let mut data = Vec::with_capacity(img.channels * side * side);
    for c in 0..img.channels {
        for y in 0..side {
            let base = (c * img.height + y0 + y) * img.width + x0;
            data.extend_from_slice(&img.data[base..base + side]);
        }
    }
    ImagePlane {
        width: side,
        height: side,
        channels: img.channels,
        data,
        color_state: img.color_state,
    }
}

fn shuffled_indices(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.next_below(i + 1);
        idx.swap(i, j);
    }
    idx
}

/// Assemble random crops of a batch of pairs into (noisy, clean) tensors.
fn crop_batch(
    g: &mut Graph,
    pairs: &[TrainPair],
    batch_idx: &[usize],
    crop: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let mut noisy = Vec::with_capacity(batch_idx.len());
    let mut clean = Vec::with_capacity(batch_idx.len());
    for &i in batch_idx {
        let p = &pairs[i];
        let max_x = p.noisy_lrgb.width - crop;
        let max_y = p.noisy_lrgb.height - crop;
        let x0 = if max_x == 0 { 0 } else { rng.next_below(max_x + 1) };
        let y0 = if max_y == 0 { 0 } else { rng.next_below(max_y + 1) };
        noisy.push(crop_plane(&p.noisy_lrgb, x0, y0, crop));
        clean.push(crop_plane(&p.clean_srgb, x0, y0, crop));
    }
    let noisy_refs: Vec<&ImagePlane> = noisy.iter().collect();
    let clean_refs: Vec<&ImagePlane> = clean.iter().collect();
    let n = batch_to_tensor(g, &noisy_refs)?;
    let c = batch_to_tensor(g, &clean_refs)?;
    Ok((n, c))
}

/// Stage-1 training: fit the residual VAE on the paired data. Emits one
/// loss record per step through `log`.
pub fn train_stage1(
    config: &TrainConfig,
    pairs: &[TrainPair],
    log: &mut dyn FnMut(LossRecord),
) -> Result<Vae> {
    config.validate(pairs.len())?;
    check_pairs(pairs, config.crop_size)?;
    let mut rng = Rng::new(config.seed);
    let vae = Vae::new(config.vae.clone(), &mut rng)?;
    let params = vae.params();
    let mut opt = AdamState::new(&params, config.lr_main, config.beta1, config.beta2)?;
    let skip_params = vae.skip_conv_params();
    let mut opt_skips = AdamState::new(&skip_params, config.lr_main, config.beta1, config.beta2)?;
    let warmup_epochs = if config.vae.use_residual_skips {
        (config.epochs as f32 * config.skip_warmup_frac) as usize
    } else {
        config.epochs
    };
    for epoch in 0..config.epochs {
        let use_skips = config.vae.use_residual_skips && epoch >= warmup_epochs;
        let order = shuffled_indices(&mut rng, pairs.len());
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut g = Graph::new();
            let (noisy, clean) = crop_batch(&mut g, pairs, chunk, config.crop_size, &mut rng)?;
            // sometimes reconstruct from the clean image itself (a ratio-1
            // exposure), keeping noisy and clean latents in one family
            let input = if rng.next_f32() < config.clean_input_prob {
                clean
            } else {
                noisy
            };
            let loss = stage1_loss_with(&mut g, &vae, input, clean, &mut rng, use_skips)?;
            for p in &params {
                p.zero_grad();
            }
            g.backward(loss.total)?;
            if use_skips {
                opt_skips.step(&skip_params)?;
            } else {
                opt.step(&params)?;
            }
            log(LossRecord {
                epoch,
                step,
                loss_a: g.scalar_value(loss.reconstruction)?,
                loss_b: g.scalar_value(loss.kl)? * config.vae.kl_weight,
                total: g.scalar_value(loss.total)?,
            });
        }
    }
    Ok(vae)
}

/// Stage-2 training: freeze the VAE, train the denoiser on the combined
/// loss. The clean image's latent mean is the diffusion target; the noisy
/// image's latent mean (or, with dropout, pure noise) conditions the
/// context processor; decoder-space supervision uses the noisy image's skip
/// features, matching inference.
pub fn train_stage2(
    config: &TrainConfig,
    pairs: &[TrainPair],
    vae: &Vae,
    log: &mut dyn FnMut(LossRecord),
) -> Result<Stage2Artifacts> {
    config.validate(pairs.len())?;
    check_pairs(pairs, config.crop_size)?;
    if config.unet.latent_channels != vae.config.latent_channels {
        return Err(Error::config(format!(
            "U-Net expects {} latent channels, VAE provides {}",
            config.unet.latent_channels, vae.config.latent_channels
        )));
    }
    vae.freeze();
    let schedule = NoiseSchedule::from_config(&config.schedule)?;
    if schedule.t_max() > config.unet.max_timestep {
        return Err(Error::config(format!(
            "schedule has {} steps but the U-Net embeds at most {}",
            schedule.t_max(),
            config.unet.max_timestep
        )));
    }
    let mut rng = Rng::new(config.seed);
    let denoiser = Denoiser::new(config.unet.clone(), &mut rng)?;
    let new_params = denoiser.new_module_params();
    let backbone_params = denoiser.backbone_params();
    let mut opt_new = AdamState::new(&new_params, config.lr_new, config.beta1, config.beta2)?;
    let mut opt_backbone =
        AdamState::new(&backbone_params, config.lr_main, config.beta1, config.beta2)?;
    let mut stats = TrainStats::default();
    let t_max = schedule.t_max();
    let image_t_cap = ((t_max as f32) * config.image_loss_max_t_frac) as usize;
    let latent_scale = estimate_latent_scale(config, pairs, vae, &mut rng)?;

    for epoch in 0..config.epochs {
        let order = shuffled_indices(&mut rng, pairs.len());
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut g = Graph::new();
            let (noisy, clean) = crop_batch(&mut g, pairs, chunk, config.crop_size, &mut rng)?;
            let n = chunk.len();
            // frozen encoder: both latents are constants in the graph,
            // standardized to the sampler's unit-variance prior
            let z0_raw = vae.encode(&mut g, clean)?.mu;
            let z0 = g.scale(z0_raw, latent_scale);
            let noisy_enc = vae.encode(&mut g, noisy)?;
            let z_y = g.scale(noisy_enc.mu, latent_scale);
            let latent_shape = g.shape(z0).to_vec();
            let per = latent_shape[1] * latent_shape[2] * latent_shape[3];

            // conditioning dropout, per sample
            let dropped = cond_dropout_mask(&mut rng, n, config.cond_dropout_prob);
            stats.samples += n;
            stats.dropped_conditions += dropped.iter().filter(|&&d| d).count();
            let mut cond_data = g.to_vec(z_y);
            for (i, &drop) in dropped.iter().enumerate() {
                if drop {
                    rng.fill_normal(&mut cond_data[i * per..(i + 1) * per]);
                }
            }
            let cond_latent = g.leaf(cond_data, latent_shape.clone())?;
            let feats = denoiser.context_features(&mut g, cond_latent)?;

            // per-sample timesteps; q_sample coefficients enter as leaves
            let ts: Vec<usize> = (0..n).map(|_| 1 + rng.next_below(t_max)).collect();
            let mut coef_signal = vec![0.0f32; g.data(z0).len()];
            let mut coef_noise = vec![0.0f32; g.data(z0).len()];
            for (i, &t) in ts.iter().enumerate() {
                let ab = schedule.alpha_bar(t);
                coef_signal[i * per..(i + 1) * per].fill(libm::sqrt(ab) as f32);
                coef_noise[i * per..(i + 1) * per].fill(libm::sqrt(1.0 - ab) as f32);
            }
            let cs = g.leaf(coef_signal, latent_shape.clone())?;
            let cn = g.leaf(coef_noise, latent_shape.clone())?;
            let noise = g.randn(&mut rng, latent_shape.clone());
            let signal_part = g.mul(z0, cs)?;
            let noise_part = g.mul(noise, cn)?;
            let z_t = g.add(signal_part, noise_part)?;

            let eps_hat = denoiser.predict_noise(&mut g, z_t, &ts, Some(&feats), rng.next_u64())?;
            let l_ldm = mse(&mut g, eps_hat, noise)?;

            // decoder-space loss over the samples with small enough t
            let picked: Vec<usize> = ts
                .iter()
                .enumerate()
                .filter(|(_, &t)| t <= image_t_cap)
                .map(|(i, _)| i)
                .collect();
            let l_image = if picked.is_empty() || config.lambda == 0.0 {
                g.scalar(0.0)
            } else {
                stats.image_loss_samples += picked.len();
                // z0_hat per sample, then select the participating rows
                let inv_cs_data: Vec<f32> = g.data(cs).iter().map(|&v| 1.0 / v).collect();
                let inv_cs = g.leaf(inv_cs_data, latent_shape.clone())?;
                let eps_scaled = g.mul(eps_hat, cn)?;
                let centered = g.sub(z_t, eps_scaled)?;
                let z0_hat_scaled = g.mul(centered, inv_cs)?;
                let z0_hat = g.scale(z0_hat_scaled, 1.0 / latent_scale);
                let sub = gather_samples(&mut g, z0_hat, &picked)?;
                let clean_sub = gather_samples(&mut g, clean, &picked)?;
                let skips_sub = noisy_enc
                    .skip_features
                    .iter()
                    .map(|&s| gather_samples(&mut g, s, &picked))
                    .collect::<Result<Vec<_>>>()?;
                let skips = vae
                    .config
                    .use_residual_skips
                    .then_some(&skips_sub[..]);
                image_loss(&mut g, vae, sub, skips, clean_sub)?
            };
            let total = combined_loss(&mut g, l_ldm, l_image, config.lambda)?;

            for p in new_params.iter().chain(&backbone_params) {
                p.zero_grad();
            }
            g.backward(total)?;
            opt_new.step(&new_params)?;
            opt_backbone.step(&backbone_params)?;
            log(LossRecord {
                epoch,
                step,
                loss_a: g.scalar_value(l_ldm)?,
                loss_b: g.scalar_value(l_image)?,
                total: g.scalar_value(total)?,
            });
        }
    }
    Ok(Stage2Artifacts {
        denoiser,
        stats,
        latent_scale,
    })
}

/// `1 / rms` of clean-image latents over a handful of crops, so scaled
/// latents have roughly unit variance.
fn estimate_latent_scale(
    config: &TrainConfig,
    pairs: &[TrainPair],
    vae: &Vae,
    rng: &mut Rng,
) -> Result<f32> {
    let sample = pairs.len().min(16);
    let idx: Vec<usize> = (0..sample).collect();
    let mut g = Graph::new();
    let (_, clean) = crop_batch(&mut g, pairs, &idx, config.crop_size, rng)?;
    let mu = vae.encode(&mut g, clean)?.mu;
    let data = g.data(mu);
    let ms = data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / data.len() as f64;
    let rms = libm::sqrt(ms).max(1e-6);
    Ok((1.0 / rms) as f32)
}

/// Select whole samples out of a `[n, ...]` tensor.
fn gather_samples(g: &mut Graph, t: Tensor, samples: &[usize]) -> Result<Tensor> {
    let shape = g.shape(t).to_vec();
    let per: usize = shape[1..].iter().product();
    let mut idx = Vec::with_capacity(samples.len() * per);
    for &s in samples {
        idx.extend(s * per..(s + 1) * per);
    }
    let mut out_shape = shape;
    out_shape[0] = samples.len();
    g.gather(t, alloc::rc::Rc::new(idx), out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isp::ColorState;

    fn toy_pairs(n: usize, side: usize, seed: u64) -> Vec<TrainPair> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let clean: Vec<f32> = (0..3 * side * side).map(|_| rng.next_f32()).collect();
                let noisy: Vec<f32> = clean
                    .iter()
                    .map(|&v| (v + 0.3 * rng.normal()).clamp(0.0, 1.0))
                    .collect();
                TrainPair {
                    noisy_lrgb: ImagePlane {
                        width: side,
                        height: side,
                        channels: 3,
                        data: noisy,
                        color_state: ColorState::LinearRgb,
                    },
                    clean_srgb: ImagePlane {
                        width: side,
                        height: side,
                        channels: 3,
                        data: clean,
                        color_state: ColorState::Srgb,
                    },
                }
            })
            .collect()
    }

    fn tiny_stage1_config() -> TrainConfig {
        TrainConfig {
            stage: 1,
            epochs: 3,
            batch_size: 4,
            crop_size: 8,
            lr_main: 2e-3,
            seed: 7,
            vae: VaeConfig {
                base_channels: 4,
                channel_multipliers: vec![1, 2],
                latent_channels: 2,
                ..VaeConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_stage2_config() -> TrainConfig {
        TrainConfig {
            stage: 2,
            epochs: 2,
            batch_size: 4,
            crop_size: 8,
            lr_main: 5e-5,
            lr_new: 2.5e-4,
            seed: 11,
            vae: VaeConfig {
                base_channels: 4,
                channel_multipliers: vec![1, 2],
                latent_channels: 2,
                ..VaeConfig::default()
            },
            unet: UNetConfig {
                latent_channels: 2,
                base_channels: 8,
                channel_multipliers: vec![1],
                attention_levels: vec![0],
                time_embed_dim: 8,
                region_size: 2,
                heads: 1,
                max_timestep: 100,
            },
            schedule: ScheduleConfig {
                t_max: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn full_scale_reference_records_published_values() {
        let s1 = TrainConfig::full_scale_reference(1);
        assert_eq!(s1.epochs, 3000);
        assert_eq!(s1.lr_main, 4e-5);
        assert_eq!(s1.beta1, 0.5);
        assert_eq!(s1.beta2, 0.9);
        assert_eq!(s1.crop_size, 1200);
        let s2 = TrainConfig::full_scale_reference(2);
        assert_eq!(s2.lr_main, 5e-5);
        assert_eq!(s2.lr_new, 2.5e-4);
        assert_eq!(s2.cond_dropout_prob, 0.05);
    }

    #[test]
    fn stage1_rejects_empty_dataset_and_bad_crop() {
        let cfg = tiny_stage1_config();
        assert!(train_stage1(&cfg, &[], &mut |_| {}).is_err());
        let mut bad = cfg.clone();
        bad.crop_size = 6; // not divisible by 4
        let pairs = toy_pairs(2, 8, 0);
        assert!(train_stage1(&bad, &pairs, &mut |_| {}).is_err());
    }

    #[test]
    fn stage1_decreases_loss_and_is_seed_deterministic() {
        let cfg = TrainConfig {
            epochs: 30,
            ..tiny_stage1_config()
        };
        let pairs = toy_pairs(4, 8, 3);
        let run = || {
            let mut records = Vec::new();
            let _ = train_stage1(&cfg, &pairs, &mut |r| records.push(r)).unwrap();
            records
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        let first = a.first().unwrap().total;
        let last = a.last().unwrap().total;
        assert!(
            last < 0.5 * first,
            "loss did not halve: {first} -> {last}"
        );
        // determinism: identical trajectories
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn dropout_mask_rate_is_calibrated() {
        let mut rng = Rng::new(123);
        let mask = cond_dropout_mask(&mut rng, 10_000, 0.05);
        let rate = mask.iter().filter(|&&d| d).count() as f64 / 10_000.0;
        assert!((rate - 0.05).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn stage2_trains_freezes_vae_and_reports_stats() {
        let cfg1 = tiny_stage1_config();
        let pairs = toy_pairs(4, 8, 5);
        let vae = train_stage1(&cfg1, &pairs, &mut |_| {}).unwrap();
        let before: Vec<Vec<f32>> = vae.params().iter().map(|p| p.to_vec()).collect();

        let cfg2 = TrainConfig {
            vae: cfg1.vae.clone(),
            ..tiny_stage2_config()
        };
        let mut records = Vec::new();
        let out = train_stage2(&cfg2, &pairs, &vae, &mut |r| records.push(r)).unwrap();
        let stats = out.stats;
        assert!(!records.is_empty());
        assert_eq!(stats.samples, 4 * cfg2.epochs);
        // frozen-VAE contract: bitwise identical parameters
        let after: Vec<Vec<f32>> = vae.params().iter().map(|p| p.to_vec()).collect();
        for (b, a) in before.iter().zip(&after) {
            let b_bits: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            let a_bits: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b_bits, a_bits);
        }
    }

    #[test]
    fn stage2_lambda_changes_final_weights() {
        let cfg1 = tiny_stage1_config();
        let pairs = toy_pairs(4, 8, 6);
        let vae = train_stage1(&cfg1, &pairs, &mut |_| {}).unwrap();
        let run = |lambda: f32| -> Vec<f32> {
            let cfg2 = TrainConfig {
                vae: cfg1.vae.clone(),
                lambda,
                ..tiny_stage2_config()
            };
            let den = train_stage2(&cfg2, &pairs, &vae, &mut |_| {}).unwrap().denoiser;
            den.params()
                .iter()
                .flat_map(|p| p.to_vec())
                .collect()
        };
        let with = run(1.0);
        let without = run(0.0);
        assert_eq!(with.len(), without.len());
        assert!(
            with.iter().zip(&without).any(|(a, b)| a != b),
            "decoder loss had no effect on the weights"
        );
    }

    #[test]
    fn stage2_learning_rate_groups_move_at_5x_ratio() {
        // equal gradients on every parameter: after one Adam step the
        // bias-corrected update magnitude is the learning rate, so the
        // context processor must move 5x as far as the backbone
        let mut rng = Rng::new(9);
        let cfg = tiny_stage2_config();
        let den = Denoiser::new(cfg.unet.clone(), &mut rng).unwrap();
        let new_params = den.new_module_params();
        let backbone = den.backbone_params();
        let mut opt_new = AdamState::new(&new_params, cfg.lr_new, cfg.beta1, cfg.beta2).unwrap();
        let mut opt_backbone =
            AdamState::new(&backbone, cfg.lr_main, cfg.beta1, cfg.beta2).unwrap();
        let before_new = new_params[0].to_vec();
        let before_bb = backbone[0].to_vec();
        for p in new_params.iter().chain(&backbone) {
            p.set_grad(vec![1.0; p.numel()]).unwrap();
        }
        opt_new.step(&new_params).unwrap();
        opt_backbone.step(&backbone).unwrap();
        let d_new = (new_params[0].to_vec()[0] - before_new[0]).abs();
        let d_bb = (backbone[0].to_vec()[0] - before_bb[0]).abs();
        let ratio = d_new / d_bb;
        assert!((ratio - 5.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn stage2_ldm_loss_decreases() {
        let cfg1 = TrainConfig {
            epochs: 10,
            ..tiny_stage1_config()
        };
        let pairs = toy_pairs(6, 16, 8);
        let vae = train_stage1(&cfg1, &pairs, &mut |_| {}).unwrap();
        let cfg2 = TrainConfig {
            vae: cfg1.vae.clone(),
            epochs: 120,
            crop_size: 16,
            lr_main: 2e-3,
            lr_new: 4e-3,
            lambda: 0.0,
            ..tiny_stage2_config()
        };
        let mut records = Vec::new();
        let _ = train_stage2(&cfg2, &pairs, &vae, &mut |r| records.push(r)).unwrap();
        let head: f32 =
            records[..20].iter().map(|r| r.loss_a).sum::<f32>() / 20.0;
        let tail: f32 = records[records.len() - 20..]
            .iter()
            .map(|r| r.loss_a)
            .sum::<f32>()
            / 20.0;
        assert!(
            tail < 0.5 * head,
            "latent loss did not halve: {head} -> {tail}"
        );
    }
}
