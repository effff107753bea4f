//! One function per subcommand. Each reads its inputs, runs the library
//! pipeline and writes its outputs under the run's output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use smart_core::encoding::{add_noise, adjoint};
use smart_core::fitting::{fit_map, FitReport};
use smart_core::io::{self, Window};
use smart_core::metrics::{hfen, nrmse, psnr, ssim, MetricReport, MetricValues};
use smart_core::parametric::{support_mask, TissuePartition};
use smart_core::patching::PatchGroupIndex;
use smart_core::phantom::{generate_phantom, rank_experiment, rank_rows_to_csv, undersample_experiment};
use smart_core::solver::{reconstruct, IterationRecord, ReconConfig};
use smart_core::{CoilSensitivities, Error, Grid, ImageSeries, KSpaceData};

use crate::config::{Mode, RunConfig};
use crate::error::CliError;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::config(format!("missing {what}: pass --{what} PATH or set paths.{what}")))
}

fn map_png(dir: &Path, name: &str, values: &[f64], grid: Grid) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("{name}.png"));
    io::emit_png(&path, values, grid, grid.nz / 2, Window::full(values), 1.0)?;
    Ok(path)
}

/// Output of any reconstruction mode, zero-filled included.
#[derive(Clone, Debug)]
pub struct ReconOutput {
    pub x: ImageSeries,
    pub t1rho: Vec<f64>,
    pub m0: Vec<f64>,
    pub fit: Option<FitReport>,
    pub history: Vec<IterationRecord>,
    pub patches: Option<PatchGroupIndex>,
    pub partition: Option<TissuePartition>,
}

/// Runs `mode` on `y`; the solver modes override `cfg.mode`.
pub fn run_recon(y: &KSpaceData, coils: &CoilSensitivities, mode: Mode, cfg: &ReconConfig) -> Result<ReconOutput, Error> {
    match mode.solver_mode() {
        None => {
            let x = adjoint(y, coils)?;
            let maps = fit_map(&x, &support_mask(&x))?;
            Ok(ReconOutput {
                x,
                t1rho: maps.t1rho,
                m0: maps.m0,
                fit: Some(maps.report),
                history: Vec::new(),
                patches: None,
                partition: None,
            })
        }
        Some(m) => {
            let cfg = ReconConfig { mode: m, ..cfg.clone() };
            let r = reconstruct(y, coils, &cfg)?;
            Ok(ReconOutput {
                x: r.x,
                t1rho: r.t1rho,
                m0: r.m0,
                fit: None,
                history: r.history,
                patches: r.patches,
                partition: r.partition,
            })
        }
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let seed = cfg.seed()?;
    let spec = cfg.phantom.build()?;
    let phantom = generate_phantom(&spec)?;
    let series = match cfg.phantom.snr {
        Some(snr) => add_noise(&phantom.series, snr, cfg.noise_seed()?)?,
        None => phantom.series,
    };
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let truth = &phantom.truth;
    let mut written = vec![out.join("phantom.c64"), out.join("truth_t1rho.f32"), out.join("truth_m0.f32")];
    io::write_series(&written[0], &series)?;
    io::write_map(&written[1], &truth.t1rho, truth.grid, "t1rho_ms")?;
    io::write_map(&written[2], &truth.m0, truth.grid, "m0")?;
    if let Some(short) = &truth.t1rho_short {
        let p = out.join("truth_t1rho_short.f32");
        io::write_map(&p, short, truth.grid, "t1rho_short_ms")?;
        written.push(p);
    }
    let p = out.join("phantom_spec.json");
    write_json(&p, &serde_json::json!({ "seed": seed, "snr": cfg.phantom.snr, "spec": spec }))?;
    written.push(p);
    written.extend(io::emit_series_pngs(&out, "phantom", &series, 1.0)?);
    log::info!("phantom {} x {} TSLs, {} tubes -> {}", spec.grid, spec.tsl_ms.len(), spec.tubes.len(), out.display());
    Ok(written)
}

pub fn mask(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.mask.spec(cfg.seed()?);
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let mut written = Vec::new();
    let mask = match &cfg.paths.input {
        Some(input) => {
            let series = io::read_series(input)?;
            let mut y = undersample_experiment(&series, &spec)?;
            if let Some(snr) = cfg.mask.snr {
                y = add_noise(&y, snr, cfg.noise_seed()?)?;
            }
            let p = out.join("kspace.c64");
            io::write_kspace(&p, &y)?;
            written.push(io::mask_path_for(&p));
            written.push(p);
            y.mask().clone()
        }
        None => {
            let ph = cfg.phantom.build()?;
            let mask = spec.build(ph.grid, ph.tsl_ms.len())?;
            let p = out.join("mask.u8");
            io::write_mask(&p, &mask)?;
            written.push(p);
            mask
        }
    };
    let grid = mask.grid();
    let p = out.join("mask_tsl0.png");
    let first: Vec<f64> = mask.echo(0).iter().map(|&m| m as f64).collect();
    io::emit_png(&p, &first, grid, grid.nz / 2, Window { lo: 0.0, hi: 1.0 }, 1.0)?;
    written.push(p);
    log::info!("mask R requested {} achieved {:.3}", mask.r_requested(), mask.acceleration());
    Ok(written)
}

pub fn recon(cfg: &RunConfig, dump_patches: bool, dump_tissues: bool) -> Result<Vec<PathBuf>, CliError> {
    let y = io::read_kspace(required(&cfg.paths.input, "input")?)?;
    let coils = match &cfg.paths.coils {
        Some(p) => io::read_coils(p)?,
        None => CoilSensitivities::Identity,
    };
    let mode = cfg.effective_mode();
    let rc = cfg.recon_config(&y.grid());
    log::info!("recon {mode:?} on {} x {} TSLs, R {:.2}", y.grid(), y.n_tsl(), y.mask().acceleration());
    let r = run_recon(&y, &coils, mode, &rc)?;

    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let grid = y.grid();
    let mut written = vec![out.join("recon.c64"), out.join("t1rho.f32"), out.join("m0.f32"), out.join("history.json")];
    io::write_series(&written[0], &r.x)?;
    io::write_map(&written[1], &r.t1rho, grid, "t1rho_ms")?;
    io::write_map(&written[2], &r.m0, grid, "m0")?;
    write_json(&written[3], &serde_json::json!({ "mode": mode, "config": rc, "iterations": r.history }))?;
    written.extend(io::emit_series_pngs(&out, "recon", &r.x, 1.0)?);
    written.push(map_png(&out, "t1rho", &r.t1rho, grid)?);

    if dump_patches {
        match &r.patches {
            Some(index) => {
                let p = out.join("patches.json");
                io::write_patch_index(&p, index)?;
                written.push(p);
            }
            None => log::warn!("--dump-patches: mode {mode:?} builds no patch groups"),
        }
    }
    if dump_tissues {
        match &r.partition {
            Some(part) => {
                let p = out.join("tissues.u16");
                io::write_partition(&p, part)?;
                written.push(p);
            }
            None => log::warn!("--dump-tissues: mode {mode:?} builds no tissue partition"),
        }
    }
    if let Some(ref_path) = &cfg.paths.reference {
        let reference = io::read_series(ref_path)?;
        let report = MetricReport::compare(&r.x, &reference, ref_path.display().to_string())?;
        written.extend(write_report(&out, &report)?);
        written.extend(error_pngs(&out, &r.x, &reference, cfg.amplify_error)?);
        log::info!("nRMSE {:.4}  PSNR {:.2}  SSIM {:.4}", report.aggregate.nrmse, report.aggregate.psnr, report.aggregate.ssim);
    }
    Ok(written)
}

/// `|x - ref|` per echo, amplified, windowed on the reference's range.
fn error_pngs(dir: &Path, x: &ImageSeries, reference: &ImageSeries, amplify: f64) -> Result<Vec<PathBuf>, CliError> {
    let window = Window::full(&reference.data().iter().map(|z| z.norm()).collect::<Vec<_>>());
    let grid = x.grid();
    (0..x.n_tsl())
        .map(|e| {
            let err: Vec<f64> = x.echo(e).iter().zip(reference.echo(e)).map(|(a, b)| (a - b).norm()).collect();
            let p = dir.join(format!("error_tsl{e}.png"));
            io::emit_png(&p, &err, grid, grid.nz / 2, window, amplify)?;
            Ok(p)
        })
        .collect()
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<Vec<PathBuf>, CliError> {
    let (j, c) = (dir.join("metrics.json"), dir.join("metrics.csv"));
    write_json(&j, report)?;
    write_text(&c, &report.to_csv())?;
    Ok(vec![j, c])
}

pub fn fit(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let x = io::read_series(required(&cfg.paths.input, "input")?)?;
    let maps = fit_map(&x, &support_mask(&x))?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let written = vec![out.join("t1rho.f32"), out.join("m0.f32"), out.join("fit_report.json"), map_png(&out, "t1rho", &maps.t1rho, maps.grid)?];
    io::write_map(&written[0], &maps.t1rho, maps.grid, "t1rho_ms")?;
    io::write_map(&written[1], &maps.m0, maps.grid, "m0")?;
    write_json(&written[2], &maps.report)?;
    let r = &maps.report;
    log::info!("fitted {} voxels: {} non-converged, {} degenerate, {} clamped", r.fitted, r.non_converged, r.degenerate, r.clamped);
    Ok(written)
}

pub fn rank(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.phantom.build()?;
    let rc = cfg.rank_config()?;
    log::info!("rank experiment: {} SNR levels x {} runs", rc.snr.len(), rc.runs);
    let rows = rank_experiment(&spec, &rc)?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let (c, j) = (out.join("rank.csv"), out.join("rank.json"));
    write_text(&c, &rank_rows_to_csv(&rows))?;
    write_json(&j, &rows)?;
    Ok(vec![c, j])
}

fn dtype_of(path: &Path) -> Result<String, CliError> {
    let v: serde_json::Value = io::read_json(&io::sidecar_path(path))?;
    v.get("dtype")
        .and_then(|d| d.as_str())
        .map(str::to_owned)
        .ok_or_else(|| CliError::data(format!("{}: sidecar has no dtype", path.display())))
}

/// Compares two image series, or two real maps on the reference's support.
pub fn compare_files(input: &Path, reference: &Path) -> Result<MetricReport, CliError> {
    let (a, b) = (dtype_of(input)?, dtype_of(reference)?);
    if a != b {
        return Err(CliError::data(format!("cannot compare {a} data with {b} data")));
    }
    let id = reference.display().to_string();
    match a.as_str() {
        io::COMPLEX_DTYPE => Ok(MetricReport::compare(&io::read_series(input)?, &io::read_series(reference)?, id)?),
        io::MAP_DTYPE => {
            let (gx, x, _) = io::read_map(input)?;
            let (gr, r, _) = io::read_map(reference)?;
            if gx != gr {
                return Err(CliError::data(format!("map grids differ: {gx} vs {gr}")));
            }
            // Score only where the reference is defined, so background fits
            // on aliasing do not swamp the tissue error.
            let x: Vec<f64> = x.iter().zip(&r).map(|(a, b)| if *b != 0.0 { *a } else { 0.0 }).collect();
            let m = MetricValues { nrmse: nrmse(&x, &r)?, psnr: psnr(&x, &r)?, ssim: ssim(&x, &r, gx)?, hfen: hfen(&x, &r, gx)? };
            Ok(MetricReport { reference: id, aggregate: m, per_tsl: Vec::new() })
        }
        other => Err(CliError::data(format!("{}: no metrics for dtype {other}", input.display()))),
    }
}

pub fn metrics(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let report = compare_files(required(&cfg.paths.input, "input")?, required(&cfg.paths.reference, "reference")?)?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let m = &report.aggregate;
    println!("{}", serde_json::to_string(m).expect("plain floats serialize"));
    log::info!("nRMSE {:.6}  PSNR {:.3}  SSIM {:.6}  HFEN {:.6}", m.nrmse, m.psnr, m.ssim, m.hfen);
    write_report(&out, &report)
}
