//! File formats: the binary voxel-grid container, the TOML scene spec,
//! metrics JSON/CSV and small CSV tables.

use crate::benchmark::MetricsReport;
use crate::field::{AnalyticScene, ScenePrimitive};
use crate::geometry::{CameraIntrinsics, CameraView, FrustumSpec, Vec3};
use crate::grid::{Frame, GridGeometry, VoxelGrid};
use crate::image::Rgb;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const GRID_MAGIC: &[u8; 4] = b"OGRD";
pub const GRID_VERSION: u16 = 1;
pub const GRID_HEADER_LEN: usize = 68;

#[derive(Debug, Error)]
pub enum GridFileError {
    #[error("bad magic {0:?}, expected \"OGRD\"")]
    BadMagic([u8; 4]),
    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown frame tag {0}")]
    UnknownFrame(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("boolean payload byte {value} at voxel {index} is not 0 or 1")]
    BadBool { index: usize, value: u8 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("expected a {expected} grid, file holds {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },
    #[error("invalid grid header: {0}")]
    Geometry(#[from] crate::grid::GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A grid as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum GridPayload {
    F32(VoxelGrid<f32>),
    Bool(VoxelGrid<bool>),
}

impl GridPayload {
    pub fn dtype_code(&self) -> u8 {
        match self {
            GridPayload::F32(_) => 0,
            GridPayload::Bool(_) => 1,
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            GridPayload::F32(_) => "f32",
            GridPayload::Bool(_) => "bool",
        }
    }

    fn parts(&self) -> (&GridGeometry, Frame) {
        match self {
            GridPayload::F32(g) => (&g.geometry, g.frame),
            GridPayload::Bool(g) => (&g.geometry, g.frame),
        }
    }

    pub fn into_f32(self) -> Result<VoxelGrid<f32>, GridFileError> {
        match self {
            GridPayload::F32(g) => Ok(g),
            other => Err(GridFileError::WrongDtype {
                expected: "f32",
                found: other.dtype_name(),
            }),
        }
    }

    pub fn into_bool(self) -> Result<VoxelGrid<bool>, GridFileError> {
        match self {
            GridPayload::Bool(g) => Ok(g),
            other => Err(GridFileError::WrongDtype {
                expected: "bool",
                found: other.dtype_name(),
            }),
        }
    }
}

/// Serializes a grid: 68-byte little-endian header then the payload, `x`
/// fastest.
pub fn encode_grid(grid: &GridPayload) -> Vec<u8> {
    let (g, frame) = grid.parts();
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + 4 * g.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.push(frame.tag());
    out.push(grid.dtype_code());
    for c in g.counts {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for v in g.origin.iter().chain(g.resolution.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match grid {
        GridPayload::F32(v) => {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        GridPayload::Bool(v) => out.extend(v.data.iter().map(|&b| b as u8)),
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<GridPayload, GridFileError> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(GridFileError::Truncated {
                needed: n,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != GRID_MAGIC {
        return Err(GridFileError::BadMagic(magic));
    }
    need(GRID_HEADER_LEN)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GRID_VERSION {
        return Err(GridFileError::UnsupportedVersion(version));
    }
    let frame = Frame::from_tag(bytes[6]).ok_or(GridFileError::UnknownFrame(bytes[6]))?;
    let dtype = bytes[7];
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let counts = [u32_at(8), u32_at(12), u32_at(16)];
    let origin = Vec3::new(f64_at(20), f64_at(28), f64_at(36));
    let resolution = Vec3::new(f64_at(44), f64_at(52), f64_at(60));
    let geometry = GridGeometry::new(origin, counts, resolution)?;
    let n = geometry.len();
    let width = match dtype {
        0 => 4,
        1 => 1,
        other => return Err(GridFileError::UnknownDtype(other)),
    };
    let end = GRID_HEADER_LEN + n * width;
    need(end)?;
    if bytes.len() > end {
        return Err(GridFileError::TrailingBytes(bytes.len() - end));
    }
    let body = &bytes[GRID_HEADER_LEN..end];
    Ok(match dtype {
        0 => GridPayload::F32(VoxelGrid {
            geometry,
            frame,
            data: body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        }),
        _ => {
            let mut data = Vec::with_capacity(n);
            for (index, &value) in body.iter().enumerate() {
                match value {
                    0 => data.push(false),
                    1 => data.push(true),
                    _ => return Err(GridFileError::BadBool { index, value }),
                }
            }
            GridPayload::Bool(VoxelGrid {
                geometry,
                frame,
                data,
            })
        }
    })
}

pub fn write_voxel_grid<W: Write>(mut w: W, grid: &GridPayload) -> Result<(), GridFileError> {
    w.write_all(&encode_grid(grid))?;
    Ok(())
}

/// Reads a whole grid; nothing is returned unless the payload is complete.
pub fn read_voxel_grid<R: Read>(mut r: R) -> Result<GridPayload, GridFileError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_grid(&bytes)
}

pub fn load_voxel_grid(path: &Path) -> Result<GridPayload, GridFileError> {
    decode_grid(&std::fs::read(path)?)
}

/// Writes through a temporary file in the target directory, then renames
/// it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Hex SHA-256 digest.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("scene spec syntax error: {0}")]
    Syntax(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl ToString) -> SpecError {
    SpecError::Invalid {
        path: path.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    #[serde(default)]
    background: Option<[f64; 3]>,
    #[serde(default)]
    grid: Option<GridSpec>,
    cameras: Vec<CameraSpec>,
    #[serde(default)]
    primitives: Vec<PrimitiveSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    preset: Option<String>,
    origin: Option<[f64; 3]>,
    counts: Option<[usize; 3]>,
    resolution: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraSpec {
    name: String,
    width: usize,
    height: usize,
    hfov_deg: Option<f64>,
    fx: Option<f64>,
    fy: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    position: [f64; 3],
    #[serde(default)]
    yaw: f64,
    #[serde(default)]
    pitch: f64,
    #[serde(default)]
    roll: f64,
    near: f64,
    far: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
enum PrimitiveSpec {
    Box {
        min: [f64; 3],
        max: [f64; 3],
        density: f64,
        albedo: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        density: f64,
        albedo: [f64; 3],
    },
    Ground {
        height: f64,
        density: f64,
        albedo: [f64; 3],
    },
}

/// A parsed scene: primitives, cameras (the first is the target view) and
/// the evaluation grid.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub scene: AnalyticScene,
    pub cameras: Vec<CameraView>,
    pub grid: GridGeometry,
}

fn camera(c: &CameraSpec, path: &str) -> Result<CameraView, SpecError> {
    let intr = match (c.hfov_deg, c.fx, c.fy, c.cx, c.cy) {
        (Some(fov), None, None, None, None) => {
            CameraIntrinsics::from_horizontal_fov(fov, c.width, c.height)
        }
        (None, Some(fx), Some(fy), Some(cx), Some(cy)) => {
            CameraIntrinsics::new(fx, fy, cx, cy, c.width, c.height)
        }
        _ => {
            return Err(invalid(
                path,
                "give either hfov_deg or all of fx, fy, cx, cy",
            ))
        }
    }
    .map_err(|e| invalid(path, e))?;
    let fr = FrustumSpec::new(c.near, c.far).map_err(|e| invalid(format!("{path}.far"), e))?;
    Ok(CameraView::looking(
        c.name.clone(),
        intr,
        fr,
        Vec3::from(c.position),
        c.yaw,
        c.pitch,
        c.roll,
    ))
}

fn primitive(p: &PrimitiveSpec, path: &str) -> Result<ScenePrimitive, SpecError> {
    let r = match p {
        PrimitiveSpec::Box {
            min,
            max,
            density,
            albedo,
        } => ScenePrimitive::cuboid(Vec3::from(*min), Vec3::from(*max), *density, Rgb::from(*albedo)),
        PrimitiveSpec::Sphere {
            center,
            radius,
            density,
            albedo,
        } => ScenePrimitive::sphere(Vec3::from(*center), *radius, *density, Rgb::from(*albedo)),
        PrimitiveSpec::Ground {
            height,
            density,
            albedo,
        } => ScenePrimitive::ground(*height, *density, Rgb::from(*albedo)),
    };
    r.map_err(|e| {
        let field = match e {
            crate::field::FieldError::NegativeDensity(_) => "density",
            crate::field::FieldError::BadAlbedo => "albedo",
            crate::field::FieldError::BadRadius(_) => "radius",
            crate::field::FieldError::InvertedBox => "max",
            _ => "shape",
        };
        invalid(format!("{path}.{field}"), e)
    })
}

fn grid(spec: &Option<GridSpec>) -> Result<GridGeometry, SpecError> {
    let Some(g) = spec else {
        return Ok(GridGeometry::desk());
    };
    match (&g.preset, g.origin, g.counts, g.resolution) {
        (Some(name), None, None, None) => {
            GridGeometry::preset(name).map_err(|e| invalid("grid.preset", e))
        }
        (None, Some(o), Some(c), Some(r)) => {
            GridGeometry::new(Vec3::from(o), c, Vec3::repeat(r)).map_err(|e| invalid("grid", e))
        }
        _ => Err(invalid(
            "grid",
            "give either preset or all of origin, counts, resolution",
        )),
    }
}

pub fn parse_scene_spec(text: &str) -> Result<SceneSpec, SpecError> {
    let raw: SpecFile = toml::from_str(text).map_err(|e| SpecError::Syntax(e.to_string()))?;
    if raw.cameras.is_empty() {
        return Err(invalid("cameras", "at least one camera is required"));
    }
    let cameras = raw
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| camera(c, &format!("cameras[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let primitives = raw
        .primitives
        .iter()
        .enumerate()
        .map(|(i, p)| primitive(p, &format!("primitives[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut scene = AnalyticScene::new(primitives);
    if let Some(bg) = raw.background {
        if bg.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("background", "channels must lie in [0, 1]"));
        }
        scene = scene.with_background(Rgb::from(bg));
    }
    Ok(SceneSpec {
        scene,
        cameras,
        grid: grid(&raw.grid)?,
    })
}

/// Metrics with provenance, as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub seed: u64,
    pub config_fingerprint: String,
    pub metrics: MetricValues,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    #[serde(rename = "O_Acc")]
    pub o_acc: Option<f64>,
    #[serde(rename = "O_Pre")]
    pub o_pre: Option<f64>,
    #[serde(rename = "O_Rec")]
    pub o_rec: Option<f64>,
    #[serde(rename = "IE_Acc")]
    pub ie_acc: Option<f64>,
    #[serde(rename = "IE_Pre")]
    pub ie_pre: Option<f64>,
    #[serde(rename = "IE_Rec")]
    pub ie_rec: Option<f64>,
    #[serde(rename = "IoU")]
    pub iou: Option<f64>,
    #[serde(rename = "Pre")]
    pub pre: Option<f64>,
    #[serde(rename = "Rec")]
    pub rec: Option<f64>,
}

impl MetricsFile {
    pub fn new(report: MetricsReport, seed: u64, config_fingerprint: String) -> Self {
        let v = report.values();
        Self {
            seed,
            config_fingerprint,
            metrics: MetricValues {
                o_acc: v[0],
                o_pre: v[1],
                o_rec: v[2],
                ie_acc: v[3],
                ie_pre: v[4],
                ie_rec: v[5],
                iou: v[6],
                pre: v[7],
                rec: v[8],
            },
            report,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["seed".to_string(), "config_fingerprint".to_string()];
        cols.extend(MetricsReport::NAMES.iter().map(|n| n.to_string()));
        for name in MetricsReport::NAMES {
            cols.push(format!("{name}_num"));
            cols.push(format!("{name}_den"));
        }
        for region in ["frustum", "invisible"] {
            for c in ["tp", "fp", "fn", "tn"] {
                cols.push(format!("{region}_{c}"));
            }
        }
        cols.join(",")
    }

    /// One CSV row with the same values as the JSON; undefined metrics are
    /// empty cells.
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        let mut cells = vec![self.seed.to_string(), self.config_fingerprint.clone()];
        cells.extend(r.values().iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
        for ratio in r.ratios() {
            cells.push(ratio.num.to_string());
            cells.push(ratio.den.to_string());
        }
        for c in [r.frustum, r.invisible] {
            cells.extend([c.tp, c.fp, c.fn_, c.tn].iter().map(|x| x.to_string()));
        }
        cells.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }
}

/// Renders rows of displayable cells as CSV text.
pub fn csv_table<S: AsRef<str>>(header: &[&str], rows: impl IntoIterator<Item = Vec<S>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<&str> = row.iter().map(|c| c.as_ref()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}
