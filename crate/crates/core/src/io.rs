//! On-disk formats: raw little-endian arrays with JSON sidecars, and 8-bit
//! PNG previews.
//!
//! A data file `name.ext` is described by `name.ext.json`. Complex data is
//! stored as interleaved float32 (re, im) in C order with the slowest axis
//! first, so an image series has dims `[n_tsl, nz, ny, nx]`. Values pass
//! through float32, so a write/read/write cycle is byte-identical but the
//! first write rounds f64 inputs.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoding::{CoilSensitivities, Grid, ImageSeries, KSpaceData, SamplingMask};
use crate::error::{Error, Result};
use crate::parametric::TissuePartition;
use crate::patching::PatchGroupIndex;
use crate::Complex64;

pub const COMPLEX_DTYPE: &str = "c64le";
pub const MASK_DTYPE: &str = "u8";
pub const MAP_DTYPE: &str = "f32le";
pub const LABEL_DTYPE: &str = "u16le";
const ORDER: &str = "C";

/// Sidecar path for a data file: the full file name plus `.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexKind {
    /// dims `[n_tsl, nz, ny, nx]`
    Image,
    /// dims `[n_tsl, n_coils, nz, ny, nx]`
    Kspace,
    /// dims `[n_coils, nz, ny, nx]`
    CoilMaps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexSidecar {
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tsl_ms: Option<Vec<f64>>,
    pub dtype: String,
    pub order: String,
    pub kind: ComplexKind,
    /// Mask file of a k-space dataset, relative to the data file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSidecar {
    /// `[n_tsl, nz, ny, nx]`
    pub dims: Vec<usize>,
    #[serde(rename = "R_requested")]
    pub r_requested: f64,
    #[serde(rename = "R_achieved")]
    pub r_achieved: f64,
    pub seed: u64,
    #[serde(default = "mask_dtype")]
    pub dtype: String,
}

fn mask_dtype() -> String {
    MASK_DTYPE.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSidecar {
    /// `[nz, ny, nx]`
    pub dims: Vec<usize>,
    pub dtype: String,
    pub order: String,
    pub quantity: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSidecar {
    pub dims: Vec<usize>,
    pub dtype: String,
    pub n_groups: usize,
    pub edges: Vec<f64>,
    /// Label value used for background voxels.
    pub background: u16,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

/// Parses a JSON document, reporting the offending file.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn grid_dims(g: Grid) -> [usize; 3] {
    [g.nz, g.ny, g.nx]
}

fn grid_from_tail(path: &Path, dims: &[usize]) -> Result<Grid> {
    let [nz, ny, nx] = dims[dims.len() - 3..] else { unreachable!() };
    Grid::new(nx, ny, nz).map_err(|e| Error::format(path, e.to_string()))
}

fn expect(path: &Path, what: &str, found: &str, want: &str) -> Result<()> {
    if found != want {
        return Err(Error::format(path, format!("{what} must be \"{want}\", found \"{found}\"")));
    }
    Ok(())
}

fn encode_complex(data: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 8);
    for z in data {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    out
}

fn decode_complex(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<Complex64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", expected * 8, bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect())
}

fn write_complex(path: &Path, data: &[Complex64], sidecar: &ComplexSidecar) -> Result<()> {
    write_bytes(path, &encode_complex(data))?;
    write_json(&sidecar_path(path), sidecar)
}

fn read_complex(path: &Path, kind: ComplexKind, rank: usize) -> Result<(ComplexSidecar, Vec<Complex64>)> {
    let side: ComplexSidecar = read_json(&sidecar_path(path))?;
    expect(path, "dtype", &side.dtype, COMPLEX_DTYPE)?;
    expect(path, "order", &side.order, ORDER)?;
    if side.kind != kind {
        return Err(Error::format(path, format!("expected a {kind:?} file, sidecar says {:?}", side.kind)));
    }
    if side.dims.len() != rank || side.dims.contains(&0) {
        return Err(Error::format(path, format!("expected {rank} positive dims, found {:?}", side.dims)));
    }
    let n = side.dims.iter().product();
    let data = decode_complex(path, &read_bytes(path)?, n)?;
    Ok((side, data))
}

pub fn write_series(path: &Path, x: &ImageSeries) -> Result<()> {
    let [nz, ny, nx] = grid_dims(x.grid());
    let side = ComplexSidecar {
        dims: vec![x.n_tsl(), nz, ny, nx],
        tsl_ms: Some(x.tsl_ms().to_vec()),
        dtype: COMPLEX_DTYPE.into(),
        order: ORDER.into(),
        kind: ComplexKind::Image,
        mask: None,
    };
    write_complex(path, x.data(), &side)
}

pub fn read_series(path: &Path) -> Result<ImageSeries> {
    let (side, data) = read_complex(path, ComplexKind::Image, 4)?;
    let grid = grid_from_tail(path, &side.dims)?;
    let tsl = side.tsl_ms.ok_or_else(|| Error::format(path, "image sidecar lacks tsl_ms"))?;
    if tsl.len() != side.dims[0] {
        return Err(Error::format(path, format!("{} TSLs for {} echoes", tsl.len(), side.dims[0])));
    }
    ImageSeries::new(grid, tsl, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Mask file written next to a k-space file.
pub fn mask_path_for(kspace: &Path) -> PathBuf {
    kspace.with_extension("mask")
}

pub fn write_mask(path: &Path, mask: &SamplingMask) -> Result<()> {
    let [nz, ny, nx] = grid_dims(mask.grid());
    write_bytes(path, mask.data())?;
    write_json(
        &sidecar_path(path),
        &MaskSidecar {
            dims: vec![mask.n_tsl(), nz, ny, nx],
            r_requested: mask.r_requested(),
            r_achieved: mask.acceleration(),
            seed: mask.seed(),
            dtype: MASK_DTYPE.into(),
        },
    )
}

pub fn read_mask(path: &Path) -> Result<SamplingMask> {
    let side: MaskSidecar = read_json(&sidecar_path(path))?;
    expect(path, "dtype", &side.dtype, MASK_DTYPE)?;
    if side.dims.len() != 4 || side.dims.contains(&0) {
        return Err(Error::format(path, format!("mask dims must be [n_tsl, nz, ny, nx], found {:?}", side.dims)));
    }
    let grid = grid_from_tail(path, &side.dims)?;
    let bytes = read_bytes(path)?;
    SamplingMask::new(grid, side.dims[0], bytes, side.r_requested, side.seed)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes k-space plus its mask (`mask_path_for(path)`).
pub fn write_kspace(path: &Path, y: &KSpaceData) -> Result<()> {
    let mask_path = mask_path_for(path);
    write_mask(&mask_path, y.mask())?;
    let [nz, ny, nx] = grid_dims(y.grid());
    let side = ComplexSidecar {
        dims: vec![y.n_tsl(), y.n_coils(), nz, ny, nx],
        tsl_ms: Some(y.tsl_ms().to_vec()),
        dtype: COMPLEX_DTYPE.into(),
        order: ORDER.into(),
        kind: ComplexKind::Kspace,
        mask: mask_path.file_name().map(|f| f.to_string_lossy().into_owned()),
    };
    write_complex(path, y.data(), &side)
}

pub fn read_kspace(path: &Path) -> Result<KSpaceData> {
    let (side, data) = read_complex(path, ComplexKind::Kspace, 5)?;
    let grid = grid_from_tail(path, &side.dims)?;
    let tsl = side.tsl_ms.ok_or_else(|| Error::format(path, "k-space sidecar lacks tsl_ms"))?;
    let mask_name = side.mask.ok_or_else(|| Error::format(path, "k-space sidecar lacks a mask entry"))?;
    let mask_path = path.parent().unwrap_or(Path::new("")).join(mask_name);
    let mask = read_mask(&mask_path)?;
    if mask.grid() != grid || mask.n_tsl() != side.dims[0] {
        return Err(Error::format(&mask_path, "mask dims disagree with the k-space file"));
    }
    KSpaceData::new(grid, tsl, side.dims[1], data, mask).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_coils(path: &Path, coils: &CoilSensitivities) -> Result<()> {
    let CoilSensitivities::Maps { grid, n_coils, data } = coils else {
        return Err(Error::invalid("identity coils have no maps to write"));
    };
    let [nz, ny, nx] = grid_dims(*grid);
    let side = ComplexSidecar {
        dims: vec![*n_coils, nz, ny, nx],
        tsl_ms: None,
        dtype: COMPLEX_DTYPE.into(),
        order: ORDER.into(),
        kind: ComplexKind::CoilMaps,
        mask: None,
    };
    write_complex(path, data, &side)
}

pub fn read_coils(path: &Path) -> Result<CoilSensitivities> {
    let (side, data) = read_complex(path, ComplexKind::CoilMaps, 4)?;
    let grid = grid_from_tail(path, &side.dims)?;
    CoilSensitivities::from_maps(grid, side.dims[0], data).map_err(|e| Error::format(path, e.to_string()))
}

/// Real-valued map (T1rho, M0, error image) as float32.
pub fn write_map(path: &Path, values: &[f64], grid: Grid, quantity: &str) -> Result<()> {
    if values.len() != grid.n_voxels() {
        return Err(Error::shape(format!("{} values for {grid}", values.len())));
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    write_bytes(path, &bytes)?;
    write_json(
        &sidecar_path(path),
        &MapSidecar {
            dims: grid_dims(grid).to_vec(),
            dtype: MAP_DTYPE.into(),
            order: ORDER.into(),
            quantity: quantity.into(),
        },
    )
}

pub fn read_map(path: &Path) -> Result<(Grid, Vec<f64>, String)> {
    let side: MapSidecar = read_json(&sidecar_path(path))?;
    expect(path, "dtype", &side.dtype, MAP_DTYPE)?;
    if side.dims.len() != 3 {
        return Err(Error::format(path, format!("map dims must be [nz, ny, nx], found {:?}", side.dims)));
    }
    let grid = grid_from_tail(path, &side.dims)?;
    let bytes = read_bytes(path)?;
    if bytes.len() != grid.n_voxels() * 4 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", grid.n_voxels() * 4, bytes.len())));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok((grid, values, side.quantity))
}

/// Tissue labels as uint16 (background = `u16::MAX`) plus bin edges.
pub fn write_partition(path: &Path, part: &TissuePartition) -> Result<()> {
    let bytes: Vec<u8> = part.label_image().iter().flat_map(|l| l.to_le_bytes()).collect();
    write_bytes(path, &bytes)?;
    write_json(
        &sidecar_path(path),
        &PartitionSidecar {
            dims: grid_dims(part.grid).to_vec(),
            dtype: LABEL_DTYPE.into(),
            n_groups: part.n_groups,
            edges: part.edges.clone(),
            background: u16::MAX,
        },
    )
}

pub fn read_partition(path: &Path) -> Result<TissuePartition> {
    let side: PartitionSidecar = read_json(&sidecar_path(path))?;
    expect(path, "dtype", &side.dtype, LABEL_DTYPE)?;
    if side.dims.len() != 3 {
        return Err(Error::format(path, "partition dims must be [nz, ny, nx]"));
    }
    let grid = grid_from_tail(path, &side.dims)?;
    let bytes = read_bytes(path)?;
    if bytes.len() != grid.n_voxels() * 2 {
        return Err(Error::format(path, "label file size disagrees with its dims"));
    }
    let labels = bytes
        .chunks_exact(2)
        .map(|c| match u16::from_le_bytes([c[0], c[1]]) {
            l if l == side.background => Ok(None),
            l if (l as usize) < side.n_groups => Ok(Some(l)),
            l => Err(Error::format(path, format!("label {l} outside {} groups", side.n_groups))),
        })
        .collect::<Result<_>>()?;
    Ok(TissuePartition { grid, n_groups: side.n_groups, edges: side.edges, labels })
}

pub fn write_patch_index(path: &Path, index: &PatchGroupIndex) -> Result<()> {
    write_json(path, index)
}

pub fn read_patch_index(path: &Path) -> Result<PatchGroupIndex> {
    let index: PatchGroupIndex = read_json(path)?;
    index.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(index)
}

/// Linear intensity window for PNG output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    /// `(0, max)` of the values.
    pub fn full(values: &[f64]) -> Self {
        Self { lo: 0.0, hi: values.iter().cloned().fold(0.0, f64::max) }
    }

    fn level(&self, v: f64) -> u8 {
        if !(self.hi > self.lo) {
            return if v > self.lo { 255 } else { 0 };
        }
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        if t.is_nan() {
            0
        } else {
            (t * 255.0).round() as u8
        }
    }
}

/// Grayscale 8-bit PNG of slice `z` of a real image. Intensities are
/// multiplied by `amplify` before windowing (error maps use 10).
pub fn emit_png(path: &Path, values: &[f64], grid: Grid, z: usize, window: Window, amplify: f64) -> Result<()> {
    if values.len() != grid.n_voxels() || z >= grid.nz {
        return Err(Error::shape(format!("{} values, slice {z}, for {grid}", values.len())));
    }
    let plane = grid.nx * grid.ny;
    let pixels: Vec<u8> = values[z * plane..(z + 1) * plane].iter().map(|v| window.level(v * amplify)).collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), grid.nx as u32, grid.ny as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(&pixels).map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// One PNG per echo of the magnitude images, `stem_tsl{e}.png`, shared window.
pub fn emit_series_pngs(dir: &Path, stem: &str, x: &ImageSeries, amplify: f64) -> Result<Vec<PathBuf>> {
    let mags: Vec<f64> = x.data().iter().map(|z| z.norm()).collect();
    let window = Window::full(&mags);
    let n = x.n_voxels();
    let z = x.grid().nz / 2;
    (0..x.n_tsl())
        .map(|e| {
            let path = dir.join(format!("{stem}_tsl{e}.png"));
            emit_png(&path, &mags[e * n..(e + 1) * n], x.grid(), z, window, amplify)?;
            Ok(path)
        })
        .collect()
}
