use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use smart_cli::commands::{compare_files, run_recon};
use smart_cli::config::Mode;
use smart_core::encoding::forward;
use smart_core::io;
use smart_core::metrics::MetricReport;
use smart_core::phantom::{generate_phantom, PhantomSpec};
use smart_core::solver::ReconConfig;
use smart_core::{CoilSensitivities, SamplingMask};

fn smart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smart")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = smart(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    smart(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn simulate_default_size_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--seed", "4", "--out", s(&a)]);
    ok(&["simulate", "--seed", "4", "--out", s(&b)]);
    let x = io::read_series(&a.join("phantom.c64")).unwrap();
    assert_eq!(x.data().len(), 192 * 192 * 5);
    assert_eq!(fs::metadata(a.join("phantom.c64")).unwrap().len(), 192 * 192 * 5 * 8);
    for f in ["phantom.c64", "phantom.c64.json", "truth_t1rho.f32", "truth_m0.f32", "phantom_tsl0.png"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(!a.join("truth_t1rho_short.f32").exists());
}

#[test]
fn simulate_bi_and_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 2, "phantom": {"snr": 40}}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--config", &cfg, "--model", "bi", "--out", s(&a)]);
    ok(&["simulate", "--config", &cfg, "--model", "bi", "--out", s(&b)]);
    assert!(a.join("truth_t1rho_short.f32").exists());
    assert_eq!(fs::read(a.join("phantom.c64")).unwrap(), fs::read(b.join("phantom.c64")).unwrap());
    let noisy = io::read_series(&a.join("phantom.c64")).unwrap();
    let clean = generate_phantom(&PhantomSpec::bi()).unwrap().series;
    let err = MetricReport::compare(&noisy, &clean, "clean").unwrap().aggregate.nrmse;
    assert!(err > 0.0 && err < 0.5, "{err}");
}

#[test]
fn zero_filled_full_mask_reproduces_phantom() {
    // In memory the pipeline is exact to rounding.
    let spec = PhantomSpec::mono().rescaled(smart_core::Grid::new_2d(64, 64).unwrap());
    let x = generate_phantom(&spec).unwrap().series;
    let mask = SamplingMask::full(x.grid(), x.n_tsl());
    let y = forward(&x, &CoilSensitivities::Identity, &mask).unwrap();
    let r = run_recon(&y, &CoilSensitivities::Identity, Mode::ZeroFilled, &ReconConfig::default_2d()).unwrap();
    let e = MetricReport::compare(&r.x, &x, "truth").unwrap().aggregate.nrmse;
    assert!(e < 1e-10, "{e}");

    // Through files every array passes float32 storage twice.
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, r#"{"seed": 1, "mask": {"r": 1}}"#);
    ok(&["simulate", "--config", &cfg, "--out", s(&d.join("sim"))]);
    ok(&["mask", "--config", &cfg, "--input", s(&d.join("sim/phantom.c64")), "--out", s(&d.join("k"))]);
    ok(&["recon", "--config", &cfg, "--mode", "zero-filled", "--input", s(&d.join("k/kspace.c64")), "--out", s(&d.join("zf"))]);
    let e = compare_files(&d.join("zf/recon.c64"), &d.join("sim/phantom.c64")).unwrap().aggregate.nrmse;
    assert!(e < 1e-6, "{e}");
}

#[test]
fn metrics_on_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--seed", "1", "--out", s(d)]);
    let out = ok(&["metrics", "--input", s(&d.join("phantom.c64")), "--reference", s(&d.join("phantom.c64")), "--out", s(&d.join("m"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["nrmse"], 0.0);
    assert_eq!(v["ssim"], 1.0);
    let csv = fs::read_to_string(d.join("m/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let report: MetricReport = serde_json::from_str(&fs::read_to_string(d.join("m/metrics.json")).unwrap()).unwrap();
    assert_eq!(report.per_tsl.len(), 5);

    let m = compare_files(&d.join("truth_t1rho.f32"), &d.join("truth_t1rho.f32")).unwrap();
    assert_eq!((m.aggregate.nrmse, m.aggregate.ssim, m.aggregate.hfen), (0.0, 1.0, 0.0));
    assert_eq!(code(&["metrics", "--input", s(&d.join("phantom.c64")), "--reference", s(&d.join("truth_m0.f32"))]), 3);
}

#[test]
fn end_to_end_smart_map_beats_zero_filled() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, r#"{"seed": 5, "phantom": {"grid": {"nx": 96, "ny": 96, "nz": 1}}, "mask": {"r": 4}}"#);
    ok(&["simulate", "--config", &cfg, "--out", s(&d.join("sim"))]);
    ok(&["mask", "--config", &cfg, "--input", s(&d.join("sim/phantom.c64")), "--out", s(&d.join("k"))]);
    let mut map_err = Vec::new();
    for mode in ["zero-filled", "smart"] {
        let out = d.join(mode);
        ok(&[
            "recon", "--config", &cfg, "--mode", mode, "--input", s(&d.join("k/kspace.c64")),
            "--reference", s(&d.join("sim/phantom.c64")), "--dump-patches", "--dump-tissues",
            "--amplify-error", "10", "--out", s(&out),
        ]);
        ok(&["fit", "--input", s(&out.join("recon.c64")), "--out", s(&out.join("fit"))]);
        let e = compare_files(&out.join("fit/t1rho.f32"), &d.join("sim/truth_t1rho.f32")).unwrap().aggregate.nrmse;
        map_err.push(e);
        assert!(out.join("metrics.json").exists() && out.join("error_tsl4.png").exists());
    }
    assert!(map_err[1] < map_err[0], "smart {} vs zero-filled {}", map_err[1], map_err[0]);

    let smart = d.join("smart");
    let index = io::read_patch_index(&smart.join("patches.json")).unwrap();
    assert!(!index.groups.is_empty());
    let part = io::read_partition(&smart.join("tissues.u16")).unwrap();
    assert_eq!(part.grid.nx, 96);
    assert!(!d.join("zero-filled/patches.json").exists());
    let history: serde_json::Value = serde_json::from_str(&fs::read_to_string(smart.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["iterations"].as_array().unwrap().len(), 15);
}

#[test]
fn rank_experiment_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, r#"{"seed": 9, "rank_experiment": {"snr": [30, 60], "runs": 50, "ratio": 0.01}}"#);
    ok(&["rank-experiment", "--config", &cfg, "--runs", "3", "--threads", "1", "--out", s(d)]);
    let csv = fs::read_to_string(d.join("rank.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("rank.json")).unwrap()).unwrap();
    assert!(rows.as_array().unwrap().iter().all(|r| r["runs"] == 3 && r["seed"] == 9 && r["block_rank"] == 1.0));
}

#[test]
fn mask_without_input_writes_mask_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["mask", "--seed", "3", "--out", s(d)]);
    let m = io::read_mask(&d.join("mask.u8")).unwrap();
    assert_eq!((m.n_tsl(), m.seed()), (5, 3));
    assert!((m.acceleration() - 4.0).abs() < 0.05);
    let side: serde_json::Value = io::read_json(&io::sidecar_path(&d.join("mask.u8"))).unwrap();
    assert_eq!(side["R_requested"], 4.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = s(d);
    let unknown = write_config(d, r#"{"seed": 1, "mask": {"r": 4, "acceleration": 2}}"#);
    assert_eq!(code(&["simulate", "--config", &unknown, "--out", out]), 2);
    assert_eq!(code(&["simulate", "--out", out]), 2, "seed is mandatory");
    assert_eq!(code(&["simulate", "--seed", "1", "--threads", "0", "--out", out]), 2);
    assert_eq!(code(&["recon", "--out", out]), 2, "no input");
    assert_eq!(code(&["recon", "--input", s(&d.join("missing.c64")), "--out", out]), 3);
    assert_eq!(code(&["no-such-command"]), 2);
    let infeasible = write_config(d, r#"{"seed": 1, "mask": {"r": 0.5}}"#);
    assert_eq!(code(&["mask", "--config", &infeasible, "--out", out]), 2);
    fs::write(d.join("junk.c64"), b"abc").unwrap();
    fs::write(d.join("junk.c64.json"), "not json").unwrap();
    assert_eq!(code(&["fit", "--input", s(&d.join("junk.c64")), "--out", out]), 3);
}

#[test]
fn threads_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_smart"))
        .args(["simulate", "--seed", "1", "--out", s(dir.path())])
        .env("SMART_THREADS", "1").env("RUST_LOG", "error")
        .status()
        .unwrap();
    assert!(status.success());
    let bad = Command::new(env!("CARGO_BIN_EXE_smart"))
        .args(["simulate", "--seed", "1", "--out", s(dir.path())])
        .env("SMART_THREADS", "lots").env("RUST_LOG", "error")
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
}
