//! Smoke tests for the command-line surface: every subcommand, exercised on
//! tiny data through real files.

use std::fs;
use std::path::Path;
use std::process::Command;

use darklift_core::diffusion::make_linear_schedule;

fn darklift() -> Command {
    Command::new(env!("CARGO_BIN_EXE_darklift"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("spawn darklift");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_isp_and_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");

    // synth with generated scenes
    run_ok(darklift().args([
        "synth",
        "--generate",
        "3",
        "--size",
        "32",
        "--ratios",
        "100,300",
        "--seed",
        "5",
        "--out",
        data.to_str().unwrap(),
    ]));
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());
    let entries: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(entries.len(), 6); // 3 scenes x 2 ratios

    // determinism: rerunning into a second directory gives identical bytes
    let data2 = dir.path().join("data2");
    run_ok(darklift().args([
        "synth",
        "--generate",
        "3",
        "--size",
        "32",
        "--ratios",
        "100,300",
        "--seed",
        "5",
        "--out",
        data2.to_str().unwrap(),
    ]));
    let first = entries[0]["noisy"].as_str().unwrap();
    assert_eq!(
        fs::read(data.join(first)).unwrap(),
        fs::read(data2.join(first)).unwrap()
    );

    // isp: both pipelines, both formats
    let noisy = data.join(first);
    let lrgb_png = dir.path().join("lrgb.png");
    run_ok(darklift().args([
        "isp",
        noisy.to_str().unwrap(),
        "--out",
        lrgb_png.to_str().unwrap(),
    ]));
    let srgb_ppm = dir.path().join("ref.ppm");
    run_ok(darklift().args([
        "isp",
        noisy.to_str().unwrap(),
        "--srgb-reference",
        "--out",
        srgb_ppm.to_str().unwrap(),
    ]));
    assert!(lrgb_png.exists() && srgb_ppm.exists());

    // eval on a pair of images
    let clean_name = entries[0]["clean"].as_str().unwrap();
    let clean_png = dir.path().join("clean.png");
    run_ok(darklift().args([
        "isp",
        data.join(clean_name).to_str().unwrap(),
        "--srgb-reference",
        "--out",
        clean_png.to_str().unwrap(),
    ]));
    let test_png = dir.path().join("test.png");
    run_ok(darklift().args([
        "isp",
        noisy.to_str().unwrap(),
        "--srgb-reference",
        "--out",
        test_png.to_str().unwrap(),
    ]));
    let eval_manifest = dir.path().join("eval.json");
    fs::write(
        &eval_manifest,
        serde_json::to_vec(&vec![serde_json::json!({
            "test": "test.png",
            "reference": "clean.png",
        })])
        .unwrap(),
    )
    .unwrap();
    let report_path = dir.path().join("report.json");
    run_ok(darklift().args([
        "eval",
        "--pairs",
        eval_manifest.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    assert!(report["mean_psnr_db"].as_f64().unwrap() > 0.0);
    assert!(report["per_image"][0]["lpips"].is_null());
}

#[test]
fn schedule_dump_matches_library_values() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("schedule.csv");
    run_ok(darklift().args([
        "schedule-dump",
        "--T",
        "100",
        "--out",
        csv.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,beta,alpha,alpha_bar,sigma");
    let schedule = make_linear_schedule(100, 1e-4, 0.02).unwrap();
    let mut rows = 0;
    for (t, line) in lines.enumerate() {
        let t = t + 1;
        let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(cols[0] as usize, t);
        assert!((cols[1] - schedule.beta(t)).abs() < 1e-15);
        assert!((cols[2] - schedule.alpha(t)).abs() < 1e-15);
        assert!((cols[3] - schedule.alpha_bar(t)).abs() < 1e-15);
        assert!((cols[4] - schedule.sigma(t)).abs() < 1e-15);
        rows += 1;
    }
    assert_eq!(rows, 100);
}

#[test]
fn train_commands_round_trip_through_configs() {
    // a deliberately tiny end-to-end config exercise of train-vae and
    // train-diffusion, including checkpoint and loss-log emission
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(darklift().args([
        "synth",
        "--generate",
        "6",
        "--size",
        "32",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]));
    let vae_ckpt = dir.path().join("vae.ckpt");
    let unet_ckpt = dir.path().join("unet.ckpt");
    let manifest = data.join("manifest.json");

    let vae_cfg = serde_json::json!({
        "in_channels": 3,
        "base_channels": 8,
        "channel_multipliers": [1, 2],
        "latent_channels": 2,
        "kl_weight": 1e-4,
        "use_residual_skips": true,
    });
    let cfg1 = serde_json::json!({
        "stage": 1,
        "epochs": 2,
        "batch_size": 4,
        "crop_size": 16,
        "lr_main": 1e-3,
        "lr_new": 1e-3,
        "beta1": 0.5,
        "beta2": 0.9,
        "lambda": 1.0,
        "cond_dropout_prob": 0.05,
        "seed": 1,
        "dataset_manifest": manifest.to_str().unwrap(),
        "vae_checkpoint": "",
        "output_checkpoint": vae_ckpt.to_str().unwrap(),
        "vae": vae_cfg,
        "unet": {
            "latent_channels": 2,
            "base_channels": 8,
            "channel_multipliers": [1],
            "attention_levels": [0],
            "time_embed_dim": 8,
            "region_size": 2,
            "heads": 1,
            "max_timestep": 50,
        },
        "schedule": { "t_max": 50, "beta_start": 1e-3, "beta_end": 0.2 },
    });
    let cfg1_path = dir.path().join("stage1.json");
    fs::write(&cfg1_path, serde_json::to_vec_pretty(&cfg1).unwrap()).unwrap();
    run_ok(darklift().args(["train-vae", "--config", cfg1_path.to_str().unwrap()]));
    assert!(vae_ckpt.exists());
    let loss_csv = Path::new(&format!("{}.loss.csv", vae_ckpt.display())).to_path_buf();
    let csv = fs::read_to_string(&loss_csv).unwrap();
    assert!(csv.starts_with("epoch,step,l_ldm,l_image,total"));
    assert!(csv.lines().count() > 2);

    let mut cfg2 = cfg1.clone();
    cfg2["stage"] = 2.into();
    cfg2["output_checkpoint"] = unet_ckpt.to_str().unwrap().into();
    let cfg2_path = dir.path().join("stage2.json");
    fs::write(&cfg2_path, serde_json::to_vec_pretty(&cfg2).unwrap()).unwrap();
    run_ok(darklift().args([
        "train-diffusion",
        "--config",
        cfg2_path.to_str().unwrap(),
        "--vae",
        vae_ckpt.to_str().unwrap(),
    ]));
    assert!(unet_ckpt.exists());

    // enhance with the trained pair; wrong-stage flags must be rejected
    let out_png = dir.path().join("enhanced.png");
    let entries: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    let raw = data.join(entries[0]["noisy"].as_str().unwrap());
    run_ok(darklift().args([
        "enhance",
        raw.to_str().unwrap(),
        "--vae",
        vae_ckpt.to_str().unwrap(),
        "--unet",
        unet_ckpt.to_str().unwrap(),
        "--guidance",
        "2.0",
        "--steps",
        "10",
        "--seed",
        "4",
        "--out",
        out_png.to_str().unwrap(),
    ]));
    assert!(out_png.exists());

    // swapped checkpoints are a distinct failure
    let out = darklift()
        .args([
            "enhance",
            raw.to_str().unwrap(),
            "--vae",
            unet_ckpt.to_str().unwrap(),
            "--unet",
            vae_ckpt.to_str().unwrap(),
            "--guidance",
            "1.0",
            "--steps",
            "10",
            "--seed",
            "4",
            "--out",
            out_png.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
