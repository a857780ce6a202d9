use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use darklift::checkpoint;
use darklift::enhance::{enhance_frame, EnhanceSettings};
use darklift::images;
use darklift::manifest::{self, PairEntry};
use darklift::pgm;
use darklift::scenes;

use darklift_core::diffusion::{make_linear_schedule, NoiseSchedule};
use darklift_core::isp::{raw_to_lrgb, raw_to_srgb_reference};
use darklift_core::metrics::{psnr, ssim, EvalReport, ImageEval};
use darklift_core::rng::Rng;
use darklift_core::synth::{make_dataset, SensorNoiseParams};
use darklift_core::train::{train_stage1, train_stage2, LossRecord, TrainConfig};

#[derive(Parser)]
#[command(
    name = "darklift",
    about = "Low-light raw image enhancement: deterministic ISP preprocessing plus a conditional latent diffusion engine",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Develop a raw frame (PGM + JSON sidecar) into an image file.
    Isp(IspArgs),
    /// Synthesize a paired noisy/clean raw dataset.
    Synth(SynthArgs),
    /// Stage-1 training: fit the residual VAE.
    TrainVae(TrainVaeArgs),
    /// Stage-2 training: fit the denoising U-Net and context processor.
    TrainDiffusion(TrainDiffusionArgs),
    /// Enhance one raw frame with trained checkpoints.
    Enhance(EnhanceArgs),
    /// Compute PSNR/SSIM over an evaluation manifest.
    Eval(EvalArgs),
    /// Dump a noise schedule as CSV for cross-checking.
    ScheduleDump(ScheduleDumpArgs),
}

#[derive(Args)]
struct IspArgs {
    /// Input raw frame (.pgm with .meta.json sidecar).
    raw: PathBuf,
    /// Output image (.png or .ppm).
    #[arg(long)]
    out: PathBuf,
    /// Run the full reference pipeline (no amplification, with color
    /// correction and gamma) instead of the brightened linear-RGB pipeline.
    #[arg(long)]
    srgb_reference: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clean images (.png/.ppm) to build pairs from.
    #[arg(long, required_unless_present = "generate")]
    images: Option<PathBuf>,
    /// Generate this many procedural scenes instead of reading images.
    #[arg(long)]
    generate: Option<usize>,
    /// Side length of generated scenes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Comma-separated exposure ratios, one pair per image per ratio.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    ratios: Vec<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sensor system gain in DN per photoelectron.
    #[arg(long, default_value_t = 8.0)]
    gain: f32,
    /// Gaussian read noise in DN.
    #[arg(long, default_value_t = 12.0)]
    read_sigma: f32,
    /// Output directory (receives PGM pairs and manifest.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainVaeArgs {
    /// Training configuration (JSON serialization of TrainConfig).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    /// Training configuration (JSON serialization of TrainConfig).
    #[arg(long)]
    config: PathBuf,
    /// Stage-1 VAE checkpoint.
    #[arg(long)]
    vae: PathBuf,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Input raw frame (.pgm with .meta.json sidecar).
    raw: PathBuf,
    /// Stage-1 VAE checkpoint.
    #[arg(long)]
    vae: PathBuf,
    /// Stage-2 diffusion checkpoint.
    #[arg(long)]
    unet: PathBuf,
    /// Classifier-free guidance weight.
    #[arg(long, default_value_t = 2.0)]
    guidance: f32,
    /// DDIM sampling steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image (.png or .ppm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON list of {"test", "reference"} image pairs.
    #[arg(long)]
    pairs: PathBuf,
    /// Output report (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleDumpArgs {
    /// Number of diffusion steps.
    #[arg(long = "T", default_value_t = 1000)]
    t_max: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    beta_end: f64,
    /// Output CSV with columns t, beta, alpha, alpha_bar, sigma.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Isp(args) => run_isp(args),
        Command::Synth(args) => run_synth(args),
        Command::TrainVae(args) => run_train_vae(args),
        Command::TrainDiffusion(args) => run_train_diffusion(args),
        Command::Enhance(args) => run_enhance(args),
        Command::Eval(args) => run_eval(args),
        Command::ScheduleDump(args) => run_schedule_dump(args),
    }
}

fn run_isp(args: IspArgs) -> Result<()> {
    let frame = pgm::read_raw(&args.raw)?;
    let img = if args.srgb_reference {
        raw_to_srgb_reference(&frame).map_err(anyhow::Error::msg)?
    } else {
        // brightened linear RGB, written out as-is for inspection
        raw_to_lrgb(&frame).map_err(anyhow::Error::msg)?
    };
    images::write_srgb(&args.out, &img)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let clean_images = if let Some(n) = args.generate {
        if n == 0 {
            bail!("--generate needs at least one scene");
        }
        let mut rng = Rng::new(args.seed ^ 0x5CE0_5CE0);
        (0..n).map(|_| scenes::generate_scene(&mut rng, args.size)).collect()
    } else {
        let dir = args.images.as_ref().expect("clap enforces images|generate");
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("ppm")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no .png/.ppm images in {}", dir.display());
        }
        files
            .iter()
            .map(|p| images::read_srgb(p))
            .collect::<Result<Vec<_>>>()?
    };
    let params = SensorNoiseParams {
        system_gain: args.gain,
        read_sigma: args.read_sigma,
        seed: args.seed,
        ..SensorNoiseParams::default()
    };
    let pairs = make_dataset(&clean_images, &args.ratios, &params).map_err(anyhow::Error::msg)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, (noisy, clean)) in pairs.iter().enumerate() {
        let ratio = noisy.exposure_ratio;
        let (noisy_path, clean_path) = manifest::pair_paths(&args.out, i, ratio);
        pgm::write_raw(&noisy_path, noisy)?;
        pgm::write_raw(&clean_path, clean)?;
        entries.push(PairEntry {
            noisy: noisy_path.file_name().unwrap().to_string_lossy().into_owned(),
            clean: clean_path.file_name().unwrap().to_string_lossy().into_owned(),
        });
    }
    let manifest_path = args.out.join("manifest.json");
    manifest::write_pairs_manifest(&manifest_path, &entries)?;
    println!(
        "wrote {} pairs and {}",
        entries.len(),
        manifest_path.display()
    );
    Ok(())
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn loss_log_path(ckpt: &str) -> PathBuf {
    PathBuf::from(format!("{ckpt}.loss.csv"))
}

fn open_loss_log(path: &Path) -> Result<csv_writer::CsvLog> {
    csv_writer::CsvLog::create(path)
}

mod csv_writer {
    use super::*;
    use std::io::Write;

    pub struct CsvLog {
        file: fs::File,
    }

    impl CsvLog {
        pub fn create(path: &Path) -> Result<CsvLog> {
            let mut file =
                fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            writeln!(file, "epoch,step,l_ldm,l_image,total")?;
            Ok(CsvLog { file })
        }

        pub fn push(&mut self, r: &LossRecord) {
            let _ = writeln!(
                self.file,
                "{},{},{},{},{}",
                r.epoch, r.step, r.loss_a, r.loss_b, r.total
            );
        }
    }
}

fn run_train_vae(args: TrainVaeArgs) -> Result<()> {
    let config = read_train_config(&args.config)?;
    if config.stage != 1 {
        bail!("train-vae expects a stage-1 config, found stage {}", config.stage);
    }
    if config.output_checkpoint.is_empty() {
        bail!("config must set output_checkpoint");
    }
    let manifest_path = Path::new(&config.dataset_manifest);
    let pairs = manifest::load_training_pairs(manifest_path)?;
    let mut log = open_loss_log(&loss_log_path(&config.output_checkpoint))?;
    let started = Instant::now();
    let mut last_epoch = usize::MAX;
    let vae = train_stage1(&config, &pairs, &mut |r| {
        log.push(&r);
        if r.epoch != last_epoch {
            println!("epoch {:>4}  recon {:.5}  kl {:.6}", r.epoch, r.loss_a, r.loss_b);
            last_epoch = r.epoch;
        }
    })
    .map_err(anyhow::Error::msg)?;
    checkpoint::save_vae(Path::new(&config.output_checkpoint), &vae)?;
    println!(
        "trained stage 1 on {} pairs in {:.1}s -> {}",
        pairs.len(),
        started.elapsed().as_secs_f64(),
        config.output_checkpoint
    );
    Ok(())
}

fn run_train_diffusion(args: TrainDiffusionArgs) -> Result<()> {
    let config = read_train_config(&args.config)?;
    if config.stage != 2 {
        bail!(
            "train-diffusion expects a stage-2 config, found stage {}",
            config.stage
        );
    }
    if config.output_checkpoint.is_empty() {
        bail!("config must set output_checkpoint");
    }
    let vae = checkpoint::load_vae(&args.vae)?;
    if vae.config != config.vae {
        bail!(
            "VAE checkpoint config does not match the training config; \
             re-point vae_checkpoint or align the `vae` section"
        );
    }
    let pairs = manifest::load_training_pairs(Path::new(&config.dataset_manifest))?;
    let mut log = open_loss_log(&loss_log_path(&config.output_checkpoint))?;
    let started = Instant::now();
    let mut last_epoch = usize::MAX;
    let artifacts = train_stage2(&config, &pairs, &vae, &mut |r| {
        log.push(&r);
        if r.epoch != last_epoch {
            println!(
                "epoch {:>4}  l_ldm {:.5}  l_image {:.5}",
                r.epoch, r.loss_a, r.loss_b
            );
            last_epoch = r.epoch;
        }
    })
    .map_err(anyhow::Error::msg)?;
    let stats = artifacts.stats;
    checkpoint::save_diffusion(
        Path::new(&config.output_checkpoint),
        &artifacts.denoiser,
        &config.schedule,
        &vae.config,
        artifacts.latent_scale,
    )?;
    println!(
        "trained stage 2 on {} pairs in {:.1}s ({} samples, {:.2}% conditions dropped) -> {}",
        pairs.len(),
        started.elapsed().as_secs_f64(),
        stats.samples,
        100.0 * stats.dropped_conditions as f64 / stats.samples.max(1) as f64,
        config.output_checkpoint
    );
    Ok(())
}

fn run_enhance(args: EnhanceArgs) -> Result<()> {
    let vae = checkpoint::load_vae(&args.vae)?;
    let (denoiser, snapshot) = checkpoint::load_diffusion(&args.unet)?;
    if snapshot.vae != vae.config {
        bail!(
            "incompatible checkpoints: the diffusion model was trained against \
             a different VAE configuration"
        );
    }
    let schedule = NoiseSchedule::from_config(&snapshot.schedule).map_err(anyhow::Error::msg)?;
    let frame = pgm::read_raw(&args.raw)?;
    let outcome = enhance_frame(
        &vae,
        &denoiser,
        &schedule,
        &frame,
        &EnhanceSettings {
            guidance: args.guidance,
            steps: args.steps,
            seed: args.seed,
            latent_scale: snapshot.latent_scale,
        },
    )?;
    images::write_srgb(&args.out, &outcome.image)?;
    println!(
        "enhanced {} in {:.2}s -> {}",
        args.raw.display(),
        outcome.runtime_seconds,
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let entries = manifest::read_eval_manifest(&args.pairs)?;
    if entries.is_empty() {
        bail!("evaluation manifest lists no pairs");
    }
    let base = args.pairs.parent().unwrap_or(Path::new("."));
    let mut per_image = Vec::with_capacity(entries.len());
    for e in &entries {
        let resolve = |s: &str| {
            let p = Path::new(s);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let started = Instant::now();
        let test = images::read_srgb(&resolve(&e.test))?;
        let reference = images::read_srgb(&resolve(&e.reference))?;
        let p = psnr(&test, &reference, 1.0).map_err(anyhow::Error::msg)?;
        let s = ssim(&test, &reference).map_err(anyhow::Error::msg)?;
        per_image.push(ImageEval {
            name: e.test.clone(),
            psnr_db: p,
            ssim: s,
            runtime_seconds: started.elapsed().as_secs_f64(),
            lpips: None,
        });
        println!("{}: psnr {:.3} dB, ssim {:.4}", e.test, p, s);
    }
    let report = EvalReport::from_entries(per_image).map_err(anyhow::Error::msg)?;
    fs::write(&args.out, serde_json::to_vec_pretty(&report)?)?;
    println!(
        "mean psnr {:.3} dB, mean ssim {:.4} -> {}",
        report.mean_psnr_db,
        report.mean_ssim,
        args.out.display()
    );
    Ok(())
}

fn run_schedule_dump(args: ScheduleDumpArgs) -> Result<()> {
    let schedule = make_linear_schedule(args.t_max, args.beta_start, args.beta_end)
        .map_err(anyhow::Error::msg)?;
    let mut out = String::from("t,beta,alpha,alpha_bar,sigma\n");
    for t in 1..=args.t_max {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t,
            schedule.beta(t),
            schedule.alpha(t),
            schedule.alpha_bar(t),
            schedule.sigma(t)
        ));
    }
    fs::write(&args.out, out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
