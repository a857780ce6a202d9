//! Scratch harness for tuning the toy end-to-end experiment (not shipped).

use std::time::Instant;

use darklift::enhance::{enhance_frame, EnhanceSettings};
use darklift::scenes::generate_scene;
use darklift_core::diffusion::{NoiseSchedule, ScheduleConfig};
use darklift_core::isp::{color_correct, gamma_compress, raw_to_lrgb, raw_to_srgb_reference, ImagePlane, RawFrame};
use darklift_core::metrics::{psnr, ssim};
use darklift_core::rng::Rng;
use darklift_core::synth::{make_dataset, SensorNoiseParams};
use darklift_core::train::{train_stage1, train_stage2, TrainConfig, TrainPair};
use darklift_core::unet::UNetConfig;
use darklift_core::vae::VaeConfig;

fn develop_pairs(raw_pairs: &[(RawFrame, RawFrame)]) -> Vec<TrainPair> {
    raw_pairs
        .iter()
        .map(|(noisy, clean)| TrainPair {
            noisy_lrgb: raw_to_lrgb(noisy).unwrap(),
            clean_srgb: raw_to_srgb_reference(clean).unwrap(),
        })
        .collect()
}

/// Deterministic sRGB rendition of the amplified noisy input.
fn noisy_baseline(noisy: &RawFrame) -> ImagePlane {
    let lrgb = raw_to_lrgb(noisy).unwrap();
    let cc = color_correct(&lrgb, &noisy.ccm).unwrap();
    gamma_compress(&cc).unwrap()
}

#[test]
#[ignore]
fn scratch_end_to_end() {
    let t0 = Instant::now();
    let n_train: usize = std::env::var("N_TRAIN").map(|v| v.parse().unwrap()).unwrap_or(40);
    let n_test: usize = 5;
    let side = 64;
    let ratio = 100.0;
    let gain: f32 = std::env::var("GAIN").map(|v| v.parse().unwrap()).unwrap_or(8.0);
    let read_sigma: f32 = std::env::var("SIGMA").map(|v| v.parse().unwrap()).unwrap_or(12.0);
    let e1: usize = std::env::var("E1").map(|v| v.parse().unwrap()).unwrap_or(20);
    let e2: usize = std::env::var("E2").map(|v| v.parse().unwrap()).unwrap_or(20);
    let crop1: usize = std::env::var("CROP1").map(|v| v.parse().unwrap()).unwrap_or(32);
    let lr1: f32 = std::env::var("LR1").map(|v| v.parse().unwrap()).unwrap_or(1e-3);
    let warm: f32 = std::env::var("WARM").map(|v| v.parse().unwrap()).unwrap_or(0.6);

    let mut scene_rng = Rng::new(1000);
    let train_scenes: Vec<ImagePlane> = (0..n_train).map(|_| generate_scene(&mut scene_rng, side)).collect();
    let test_scenes: Vec<ImagePlane> = (0..n_test).map(|_| generate_scene(&mut scene_rng, side)).collect();

    let params = SensorNoiseParams { system_gain: gain, read_sigma, seed: 42, ..Default::default() };
    let train_raw = make_dataset(&train_scenes, &[ratio], &params).unwrap();
    let test_params = SensorNoiseParams { seed: 777, ..params };
    let test_raw = make_dataset(&test_scenes, &[ratio], &test_params).unwrap();
    let train_pairs = develop_pairs(&train_raw);
    println!("[{:>6.1}s] data ready", t0.elapsed().as_secs_f64());

    // baseline quality
    let mut base_psnr = 0.0;
    for (noisy, clean) in &test_raw {
        let b = noisy_baseline(noisy);
        let c = raw_to_srgb_reference(clean).unwrap();
        base_psnr += psnr(&b, &c, 1.0).unwrap();
    }
    base_psnr /= n_test as f64;
    println!("baseline noisy psnr = {base_psnr:.2} dB");

    let blocks: usize = std::env::var("BLOCKS").map(|v| v.parse().unwrap()).unwrap_or(3);
    let vae_cfg = VaeConfig {
        channel_multipliers: (0..blocks).map(|b| 1 << b.min(2)).collect(),
        ..VaeConfig::default()
    };
    let cfg1 = TrainConfig {
        stage: 1,
        epochs: e1,
        batch_size: 8,
        crop_size: crop1,
        lr_main: lr1,
        skip_warmup_frac: warm,
        seed: 11,
        vae: vae_cfg.clone(),
        ..TrainConfig::default()
    };
    let mut last = (0usize, 0.0f32);
    let vae = train_stage1(&cfg1, &train_pairs, &mut |r| {
        if r.epoch != last.0 && r.epoch % 5 == 0 {
            println!("[{:>6.1}s] s1 epoch {} total {:.5}", t0.elapsed().as_secs_f64(), r.epoch, r.total);
            last.0 = r.epoch;
        }
        last.1 = r.total;
    })
    .unwrap();
    println!("[{:>6.1}s] stage1 done, final loss {:.5}", t0.elapsed().as_secs_f64(), last.1);

    // VAE-only reconstruction quality on test split
    {
        use darklift_core::tensor::Graph;
        use darklift_core::vae::{batch_to_tensor, tensor_to_image};
        let mut tot = 0.0;
        let mut tot_rand = 0.0;
        let mut tot_oracle = 0.0;
        for (noisy, clean) in &test_raw {
            let nl = raw_to_lrgb(noisy).unwrap();
            let cs = raw_to_srgb_reference(clean).unwrap();
            let mut g = Graph::new();
            let x = batch_to_tensor(&mut g, &[&nl]).unwrap();
            let enc = vae.encode(&mut g, x).unwrap();
            let rec = vae.decode(&mut g, enc.mu, Some(&enc.skip_features)).unwrap();
            let img = tensor_to_image(&g, rec, 0, darklift_core::isp::ColorState::Srgb).unwrap();
            tot += psnr(&img, &cs, 1.0).unwrap();
            // control: does the latent matter at all?
            let zr = g.randn(&mut Rng::new(4242), g.shape(enc.mu).to_vec());
            let rec2 = vae.decode(&mut g, zr, Some(&enc.skip_features)).unwrap();
            let img2 = tensor_to_image(&g, rec2, 0, darklift_core::isp::ColorState::Srgb).unwrap();
            tot_rand += psnr(&img2, &cs, 1.0).unwrap();
            // oracle: the clean image's latent with the noisy skips
            let clean_lin = raw_to_srgb_reference(clean).unwrap();
            let xc = batch_to_tensor(&mut g, &[&clean_lin]).unwrap();
            let encc = vae.encode(&mut g, xc).unwrap();
            let rec3 = vae.decode(&mut g, encc.mu, Some(&enc.skip_features)).unwrap();
            let img3 = tensor_to_image(&g, rec3, 0, darklift_core::isp::ColorState::Srgb).unwrap();
            tot_oracle += psnr(&img3, &cs, 1.0).unwrap();
        }
        println!("[{:>6.1}s] VAE-only recon psnr = {:.2} dB (random-latent control {:.2} dB, clean-latent oracle {:.2} dB)", t0.elapsed().as_secs_f64(), tot / n_test as f64, tot_rand / n_test as f64, tot_oracle / n_test as f64);
    }

    let cfg2 = TrainConfig {
        stage: 2,
        epochs: e2,
        batch_size: 4,
        crop_size: 64,
        lr_main: 2e-4,
        lr_new: 1e-3,
        lambda: 1.0,
        cond_dropout_prob: 0.05,
        seed: 12,
        vae: vae_cfg.clone(),
        unet: UNetConfig::default(),
        schedule: ScheduleConfig::default(),
        ..TrainConfig::default()
    };
    let mut last2 = (usize::MAX, 0.0f32, 0.0f32);
    let art = train_stage2(&cfg2, &train_pairs, &vae, &mut |r| {
        if r.epoch != last2.0 {
            println!(
                "[{:>6.1}s] s2 epoch {} l_ldm {:.5} l_img {:.5}",
                t0.elapsed().as_secs_f64(),
                r.epoch,
                r.loss_a,
                r.loss_b
            );
            last2.0 = r.epoch;
        }
        last2.1 = r.loss_a;
        last2.2 = r.loss_b;
    })
    .unwrap();
    let (den, stats) = (art.denoiser, art.stats);
    println!(
        "[{:>6.1}s] stage2 done: l_ldm {:.5} l_img {:.5}, dropout {:.2}%, latent_scale {:.3}",
        t0.elapsed().as_secs_f64(),
        last2.1,
        last2.2,
        100.0 * stats.dropped_conditions as f64 / stats.samples as f64,
        art.latent_scale
    );

    let art_scale = art.latent_scale;
    let schedule = NoiseSchedule::from_config(&cfg2.schedule).unwrap();
    for omega in [1.0f32, 2.0, 2.5] {
        let mut tot_p = 0.0;
        let mut tot_s = 0.0;
        let mut base_s = 0.0;
        for (i, (noisy, clean)) in test_raw.iter().enumerate() {
            let settings = EnhanceSettings { guidance: omega, steps: 50, seed: 9000 + i as u64, latent_scale: art_scale };
            let out = enhance_frame(&vae, &den, &schedule, noisy, &settings).unwrap();
            let c = raw_to_srgb_reference(clean).unwrap();
            tot_p += psnr(&out.image, &c, 1.0).unwrap();
            tot_s += ssim(&out.image, &c).unwrap();
            base_s += ssim(&noisy_baseline(noisy), &c).unwrap();
        }
        println!(
            "[{:>6.1}s] omega {omega}: psnr {:.2} dB, ssim {:.4} (baseline ssim {:.4})",
            t0.elapsed().as_secs_f64(),
            tot_p / n_test as f64,
            tot_s / n_test as f64,
            base_s / n_test as f64
        );
    }
}
