//! Noise schedule, forward process, training losses, classifier-free
//! guidance, and the ancestral / DDIM samplers.
//!
//! Schedule quantities are kept in f64: the `alpha_bar(t) / alpha_bar(t-1)
//! == alpha(t)` identity is checked to 1e-9, which f32 storage cannot hold.
//! Coefficients are cast to f32 at the point where they enter the graph.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};
use crate::unet::Denoiser;
use crate::vae::Vae;

/// Per-step quantities of the forward process, 1-indexed by timestep.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Construction parameters for a linear-beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linearly spaced betas; `alpha_t = 1 - beta_t`, `alpha_bar` cumulative,
/// `sigma_t = sqrt(beta_t)`.
pub fn make_linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let f = if t_max == 1 {
            0.0
        } else {
            i as f64 / (t_max - 1) as f64
        };
        betas.push(beta_start + (beta_end - beta_start) * f);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let sigmas: Vec<f64> = betas.iter().map(|&b| libm::sqrt(b)).collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
        sigmas,
    })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<NoiseSchedule> {
        make_linear_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::range(format!(
                "timestep {t} outside [1, {}]",
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise`.
pub fn q_sample(
    g: &mut Graph,
    z0: Tensor,
    t: usize,
    noise: Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if g.shape(z0) != g.shape(noise) {
        return Err(Error::shape(format!(
            "latent {:?} and noise {:?} differ",
            g.shape(z0),
            g.shape(noise)
        )));
    }
    let ab = schedule.alpha_bar(t);
    let signal = g.scale(z0, libm::sqrt(ab) as f32);
    let corrupt = g.scale(noise, libm::sqrt(1.0 - ab) as f32);
    g.add(signal, corrupt)
}

/// One-step estimate of the clean latent:
/// `z0_hat = (z_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
pub fn one_step_z0(
    g: &mut Graph,
    z_t: Tensor,
    t: usize,
    eps_hat: Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::numeric(format!(
            "alpha_bar({t}) = {ab}: one-step inversion is singular"
        )));
    }
    let scaled_eps = g.scale(eps_hat, libm::sqrt(1.0 - ab) as f32);
    let centered = g.sub(z_t, scaled_eps)?;
    Ok(g.scale(centered, (1.0 / libm::sqrt(ab)) as f32))
}

/// Mean squared error between two same-shape tensors.
pub fn mse(g: &mut Graph, a: Tensor, b: Tensor) -> Result<Tensor> {
    let d = g.sub(a, b)?;
    let sq = g.sqr(d)?;
    Ok(g.mean_all(sq))
}

/// Denoising-score-matching loss at one timestep: corrupt `z0` with fresh
/// noise, predict it, and return the mean-square error (unit weighting).
pub fn ldm_loss(
    g: &mut Graph,
    model: &Denoiser,
    z0: Tensor,
    cond: Option<&[Tensor]>,
    t: usize,
    rng: &mut Rng,
    schedule: &NoiseSchedule,
    null_seed: u64,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let n = g.randn(rng, g.shape(z0).to_vec());
    let z_t = q_sample(g, z0, t, n, schedule)?;
    let ts = vec![t; g.shape(z0)[0]];
    let eps_hat = model.predict_noise(g, z_t, &ts, cond, null_seed)?;
    mse(g, eps_hat, n)
}

/// Image-space reconstruction loss: decode the one-step latent estimate with
/// the (frozen) decoder and compare to the clean sRGB target. The gradient
/// flows through the decoder into the latent estimate.
pub fn image_loss(
    g: &mut Graph,
    decoder: &Vae,
    z_hat0: Tensor,
    skips: Option<&[Tensor]>,
    x_clean: Tensor,
) -> Result<Tensor> {
    let rec = decoder.decode(g, z_hat0, skips)?;
    if g.shape(rec) != g.shape(x_clean) {
        return Err(Error::shape(format!(
            "decoded {:?} and clean {:?} differ",
            g.shape(rec),
            g.shape(x_clean)
        )));
    }
    mse(g, rec, x_clean)
}

/// `total = ldm + lambda * image`.
pub fn combined_loss(g: &mut Graph, ldm: Tensor, image: Tensor, lambda: f32) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = g.scale(image, lambda);
    g.add(ldm, weighted)
}

/// Classifier-free guidance settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance weight; 0 = unconditional, 1 = conditional.
    pub omega: f32,
    /// Seed of the substitute Gaussian latent for the unconditional branch.
    pub null_seed: u64,
}

impl GuidanceConfig {
    pub fn new(omega: f32, null_seed: u64) -> Result<GuidanceConfig> {
        if omega < 0.0 {
            return Err(Error::config(format!(
                "guidance weight must be >= 0, got {omega}"
            )));
        }
        Ok(GuidanceConfig { omega, null_seed })
    }
}

/// Guided noise prediction
/// `eps = eps(z_t, t) + omega * (eps(z_t, c, t) - eps(z_t, t))`.
/// `omega = 1` returns the conditional branch exactly and `omega = 0` the
/// unconditional one; only other weights evaluate both.
pub fn cfg_predict(
    g: &mut Graph,
    model: &Denoiser,
    z_t: Tensor,
    ts: &[usize],
    cond: Option<&[Tensor]>,
    guidance: &GuidanceConfig,
) -> Result<Tensor> {
    if guidance.omega < 0.0 {
        return Err(Error::config(format!(
            "guidance weight must be >= 0, got {}",
            guidance.omega
        )));
    }
    if guidance.omega == 1.0 {
        return model.predict_noise(g, z_t, ts, cond, guidance.null_seed);
    }
    if guidance.omega == 0.0 {
        return model.predict_noise(g, z_t, ts, None, guidance.null_seed);
    }
    let uncond = model.predict_noise(g, z_t, ts, None, guidance.null_seed)?;
    let cond = model.predict_noise(g, z_t, ts, cond, guidance.null_seed)?;
    let delta = g.sub(cond, uncond)?;
    let scaled = g.scale(delta, guidance.omega);
    g.add(uncond, scaled)
}

/// The ancestral update as pure slice arithmetic:
/// `z_{t-1} = (z_t - ((1 - a_t) / sqrt(1 - ab_t)) eps) / sqrt(a_t) + sigma_t n`,
/// with no noise at `t = 1`.
pub fn ancestral_update(
    z_t: &[f32],
    eps: &[f32],
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&[f32]>,
) -> Result<Vec<f32>> {
    schedule.check_t(t)?;
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let coeff = ((1.0 - a) / libm::sqrt(1.0 - ab)) as f32;
    let inv_sqrt_a = (1.0 / libm::sqrt(a)) as f32;
    let sigma = schedule.sigma(t) as f32;
    let mut out = Vec::with_capacity(z_t.len());
    for i in 0..z_t.len() {
        let mut v = (z_t[i] - coeff * eps[i]) * inv_sqrt_a;
        if t > 1 {
            if let Some(n) = noise {
                v += sigma * n[i];
            }
        }
        out.push(v);
    }
    Ok(out)
}

/// One ancestral (DDPM) reverse step driven by the guided model.
#[allow(clippy::too_many_arguments)]
pub fn ancestral_step(
    model: &Denoiser,
    z_t: &[f32],
    latent_shape: &[usize],
    t: usize,
    cond: &crate::train::FeatureStack,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    schedule.check_t(t)?;
    let mut g = Graph::new();
    let z = g.leaf(z_t.to_vec(), latent_shape.to_vec())?;
    let feats = cond.bind(&mut g)?;
    let ts = vec![t; latent_shape[0]];
    let eps = cfg_predict(&mut g, model, z, &ts, Some(&feats), guidance)?;
    let noise: Option<Vec<f32>> = if t > 1 {
        let mut buf = vec![0.0f32; z_t.len()];
        rng.fill_normal(&mut buf);
        Some(buf)
    } else {
        None
    };
    ancestral_update(z_t, g.data(eps), t, schedule, noise.as_deref())
}

/// The deterministic (eta = 0) DDIM update from `t` to `t_prev`:
/// `z_prev = sqrt(ab_prev) z0_hat + sqrt(1 - ab_prev) eps`.
pub fn ddim_update(
    z_t: &[f32],
    eps: &[f32],
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let inv_sqrt_ab = 1.0 / libm::sqrt(ab);
    let c0 = (libm::sqrt(ab_prev) * inv_sqrt_ab) as f32;
    let c1 = libm::sqrt(1.0 - ab) as f32;
    let c2 = libm::sqrt(1.0 - ab_prev) as f32;
    Ok(z_t
        .iter()
        .zip(eps)
        .map(|(&z, &e)| c0 * (z - c1 * e) + c2 * e)
        .collect())
}

/// Result of a DDIM run.
pub struct DdimOutput {
    /// Final denoised latent (flat data in `latent_shape`).
    pub latent: Vec<f32>,
    /// Latents after every step, oldest first, when recording was requested.
    pub trajectory: Option<Vec<Vec<f32>>>,
}

/// Deterministic DDIM sampling with classifier-free guidance.
///
/// Runs `steps` uniformly strided steps down from `t_max`; `steps` must
/// divide `t_max`. The initial latent is drawn from `rng`; everything else
/// is a pure function of the weights, the conditioning, and that draw.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample(
    model: &Denoiser,
    cond: &crate::train::FeatureStack,
    latent_shape: &[usize],
    steps: usize,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    record_trajectory: bool,
) -> Result<DdimOutput> {
    let t_max = schedule.t_max();
    if steps == 0 || steps > t_max {
        return Err(Error::config(format!(
            "steps {steps} outside [1, {t_max}]"
        )));
    }
    if t_max % steps != 0 {
        return Err(Error::config(format!(
            "steps {steps} must divide {t_max} for a uniform stride"
        )));
    }
    let stride = t_max / steps;
    let numel: usize = latent_shape.iter().product();
    let mut z = vec![0.0f32; numel];
    rng.fill_normal(&mut z);
    let mut trajectory = record_trajectory.then(Vec::new);
    let batch = latent_shape[0];
    for i in (1..=steps).rev() {
        let t = i * stride;
        let t_prev = (i - 1) * stride;
        let mut g = Graph::new();
        let zt = g.leaf(z.clone(), latent_shape.to_vec())?;
        let feats = cond.bind(&mut g)?;
        let ts = vec![t; batch];
        let eps = cfg_predict(&mut g, model, zt, &ts, Some(&feats), guidance)?;
        z = ddim_update(&z, g.data(eps), t, t_prev, schedule)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(z.clone());
        }
    }
    Ok(DdimOutput {
        latent: z,
        trajectory,
    })
}
