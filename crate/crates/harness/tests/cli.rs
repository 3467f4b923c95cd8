use hdrcm_core::hdrio::{read_hdr, read_pfm, read_ppm};
use hdrcm_harness::RunConfig;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "\
# tiny end-to-end run
net.base_channels = 4
net.blocks_per_stage = 1
net.time_embed_dim = 8
scene.height = 16
scene.width = 16
train.crop = 8
train.batch_size = 2
train.stage1_iters = 3
train.stage2_iters = 2
train.log_every = 1
data.train_size = 2
data.eval_size = 2
";

fn hdrcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdrcm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("toy.cfg");
    std::fs::write(&path, TOY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_config_reports_usage() {
    let out = hdrcm(&["train", "--config", "/nonexistent/run.cfg"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not found"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("o");
    let out = hdrcm(&["gen-data", "-c", &cfg, "-o", out_dir.to_str().unwrap(), "--set", "schedule.sigma_o_scal=2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn resolved_config_records_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("data");
    let out = hdrcm(&[
        "gen-data",
        "-c",
        &cfg,
        "-o",
        out_dir.to_str().unwrap(),
        "-n",
        "2",
        "--set",
        "schedule.sigma_o_scale=2.0",
    ]);
    ok(&out);
    let resolved = RunConfig::load(&out_dir.join("config.txt")).unwrap();
    assert_eq!(resolved.schedule.sigma_o_scale, 2.0);
    assert_eq!(resolved.net.base_channels, 4);
    assert_eq!(resolved.output.dir, out_dir);

    let manifest = std::fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    let hdr = read_pfm(out_dir.join("scene_0001.pfm")).unwrap();
    let ldr = read_ppm(out_dir.join("scene_0001_ldr.ppm")).unwrap();
    assert_eq!(hdr.shape(), (16, 16, 3));
    assert_eq!(ldr.shape(), (16, 16, 3));
}

#[test]
fn mask_and_traj_dump_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    ok(&hdrcm(&["gen-data", "-c", &cfg, "-o", data.to_str().unwrap(), "-n", "1"]));
    let ldr = data.join("scene_0000_ldr.ppm");
    let hdr = data.join("scene_0000.pfm");

    let masks = dir.path().join("masks");
    ok(&hdrcm(&["mask", "-c", &cfg, "-o", masks.to_str().unwrap(), "-i", ldr.to_str().unwrap()]));
    let over = read_pfm(masks.join("w_over.pfm")).unwrap();
    let under = read_pfm(masks.join("w_under.pfm")).unwrap();
    let good = read_pfm(masks.join("w_good.pfm")).unwrap();
    for i in 0..over.data().len() {
        let s = over.data()[i] + under.data()[i] + good.data()[i];
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(masks.join("masks.ppm").is_file());

    let traj = dir.path().join("traj");
    ok(&hdrcm(&[
        "traj",
        "-c",
        &cfg,
        "-o",
        traj.to_str().unwrap(),
        "--hdr",
        hdr.to_str().unwrap(),
        "--ldr",
        ldr.to_str().unwrap(),
        "--times",
        "0.002,1",
    ]));
    assert!(traj.join("traj_t0.0020.pfm").is_file());
    assert!(traj.join("traj_t1.0000.pfm").is_file());
}

#[test]
fn train_infer_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    ok(&hdrcm(&["train", "-c", &cfg, "-o", run.to_str().unwrap()]));
    let ckpt = run.join("checkpoint.ckpt");
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("1,") || l.starts_with("2,")).count(), 5);

    let data = dir.path().join("data");
    ok(&hdrcm(&["gen-data", "-c", &cfg, "-o", data.to_str().unwrap(), "-n", "1"]));
    let ldr = data.join("scene_0000_ldr.ppm");
    let infer = |name: &str, seed: &str| {
        let out = dir.path().join("pred").join(name);
        ok(&hdrcm(&[
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "-i",
            ldr.to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]));
        std::fs::read(out).unwrap()
    };
    let a = infer("a.hdr", "7");
    let b = infer("b.hdr", "7");
    assert_eq!(a, b);
    assert_eq!(read_hdr(dir.path().join("pred/a.hdr")).unwrap().shape(), (16, 16, 3));
    assert!(dir.path().join("pred/config.txt").is_file());

    let eval = dir.path().join("eval");
    let out = hdrcm(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "-o", eval.to_str().unwrap()]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("model,")));
    let csv = std::fs::read_to_string(eval.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 + 2);
}

#[test]
fn ablate_writes_one_row_per_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("abl");
    let out = hdrcm(&[
        "ablate",
        "-c",
        &cfg,
        "-o",
        out_dir.to_str().unwrap(),
        "--seeds",
        "0,1",
        "--variants",
        "baseline/no-elc,three-mask/full-elc",
        "--set",
        "train.stage1_iters=1",
        "--set",
        "train.stage2_iters=1",
    ]);
    ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let summary = std::fs::read_to_string(out_dir.join("ablation_summary.csv")).unwrap();
    assert!(summary.contains("three-mask/full-elc,"));
    assert!(!hdrcm(&["ablate", "-c", &cfg, "--variants", "four-mask/none"]).status.success());
}
