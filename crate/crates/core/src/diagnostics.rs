//! Run artifacts: metrics log, run metadata, binary field dumps, slices and
//! field-comparison norms.
//!
//! Field dump layout (little-endian):
//!
//! ```text
//! offset  size  content
//!      0     8  magic "MFG3DF1\0"
//!      8     4  u32 version (1)
//!     12     4  u32 kind (0 scalar, 1 vector)
//!     16    24  u64 nx, ny, nz
//!     40    48  f64 bounds [xmin, ymin, zmin, xmax, ymax, zmax]
//!     88     -  f64 payload, x-fastest, vectors interleaved xyz per cell
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FieldKind, GridField, Units};
use crate::picard::IterationReport;
use crate::scalar::Real;

pub const DUMP_MAGIC: [u8; 8] = *b"MFG3DF1\0";
pub const DUMP_VERSION: u32 = 1;
pub const DUMP_HEADER_LEN: usize = 88;
pub const RUN_META_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("I/O failure at {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported field dump version {found}")]
    FormatVersionMismatch { path: PathBuf, found: u32 },
    #[error("{path}: malformed artifact: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::IoFailure { path: path.to_path_buf(), source }
    }

    fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        IoError::Malformed { path: path.to_path_buf(), reason: reason.into() }
    }
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub outer_iter: usize,
    pub eik_res_mean: f64,
    pub eik_res_max: f64,
    /// Final training loss; `-1` for the fast-sweeping backend.
    pub eik_loss_final: f64,
    pub fvm_iters: usize,
    pub fvm_residual_final: f64,
    pub rho_change: f64,
    pub mass_injected: f64,
    pub mass_absorbed: f64,
    pub mass_balance_rel_err: f64,
    pub wall_time_s: f64,
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "outer_iter",
    "eik_res_mean",
    "eik_res_max",
    "eik_loss_final",
    "fvm_iters",
    "fvm_residual_final",
    "rho_change",
    "mass_injected",
    "mass_absorbed",
    "mass_balance_rel_err",
    "wall_time_s",
];

impl MetricsRow {
    pub fn from_report<T: Real>(r: &IterationReport<T>, wall_time_s: f64) -> Self {
        Self {
            outer_iter: r.outer_iter,
            eik_res_mean: r.eik_res_mean.to_f64_lossy(),
            eik_res_max: r.eik_res_max.to_f64_lossy(),
            eik_loss_final: r.eik_loss_final.map(|l| l.to_f64_lossy()).unwrap_or(-1.0),
            fvm_iters: r.fvm_iters,
            fvm_residual_final: r.fvm_residual_final.to_f64_lossy(),
            rho_change: r.rho_change.to_f64_lossy(),
            mass_injected: r.mass_injected.to_f64_lossy(),
            mass_absorbed: r.mass_absorbed.to_f64_lossy(),
            mass_balance_rel_err: r.mass_balance_rel_err.to_f64_lossy(),
            wall_time_s,
        }
    }

    fn record(&self) -> [String; 11] {
        [
            self.outer_iter.to_string(),
            fmt_f64(self.eik_res_mean),
            fmt_f64(self.eik_res_max),
            fmt_f64(self.eik_loss_final),
            self.fvm_iters.to_string(),
            fmt_f64(self.fvm_residual_final),
            fmt_f64(self.rho_change),
            fmt_f64(self.mass_injected),
            fmt_f64(self.mass_absorbed),
            fmt_f64(self.mass_balance_rel_err),
            fmt_f64(self.wall_time_s),
        ]
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Streams metrics rows to CSV, flushing after every row.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        let file = File::create(path).map_err(|e| IoError::io(path, e))?;
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(METRICS_COLUMNS).map_err(|e| csv_err(path, e))?;
        inner.flush().map_err(|e| IoError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), inner })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<(), IoError> {
        self.inner.write_record(row.record()).map_err(|e| csv_err(&self.path, e))?;
        self.inner.flush().map_err(|e| IoError::io(&self.path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IoError::io(path, io),
        other => IoError::malformed(path, format!("{other:?}")),
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), IoError> {
    let mut w = MetricsWriter::create(path)?;
    rows.iter().try_for_each(|r| w.append(r))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, IoError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(METRICS_COLUMNS) {
        return Err(IoError::malformed(path, "unexpected metrics columns"));
    }
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PhaseDurationsMeta {
    pub value: f64,
    pub transport: f64,
    pub io: f64,
}

/// Contents of `run_meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub backend: String,
    pub grid_shape: [usize; 3],
    pub started_utc: String,
    pub finished_utc: String,
    pub phase_durations_s: PhaseDurationsMeta,
    pub outer_iters: usize,
    pub exit_status: String,
}

pub fn write_run_meta(path: &Path, meta: &RunMeta) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(meta).expect("run metadata serializes");
    fs::write(path, text + "\n").map_err(|e| IoError::io(path, e))
}

pub fn read_run_meta(path: &Path) -> Result<RunMeta, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::malformed(path, e.to_string()))
}

/// Hex SHA-256 of the raw config bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Decoded field dump.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDump {
    pub shape: [usize; 3],
    pub bounds: [f64; 6],
    pub kind: FieldKind,
    pub values: Vec<f64>,
}

impl FieldDump {
    pub fn into_field(self, units: Units) -> GridField<f64> {
        GridField { shape: self.shape, bounds: self.bounds, kind: self.kind, units, values: self.values }
    }

    pub fn components(&self) -> usize {
        match self.kind {
            FieldKind::Scalar => 1,
            FieldKind::Vector => 3,
        }
    }
}

pub fn encode_field_dump<T: Real>(field: &GridField<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(DUMP_HEADER_LEN + 8 * field.values.len());
    out.extend_from_slice(&DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    let kind: u32 = match field.kind {
        FieldKind::Scalar => 0,
        FieldKind::Vector => 1,
    };
    out.extend_from_slice(&kind.to_le_bytes());
    for n in field.shape {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for b in field.bounds {
        out.extend_from_slice(&b.to_le_bytes());
    }
    for v in &field.values {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    out
}

pub fn write_field_dump<T: Real>(field: &GridField<T>, path: &Path) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_field_dump(field)).map_err(|e| IoError::io(path, e))?;
    w.flush().map_err(|e| IoError::io(path, e))
}

pub fn decode_field_dump(bytes: &[u8], path: &Path) -> Result<FieldDump, IoError> {
    if bytes.len() < DUMP_HEADER_LEN {
        return Err(IoError::malformed(path, "shorter than the header"));
    }
    if bytes[..8] != DUMP_MAGIC {
        return Err(IoError::malformed(path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(8);
    if version != DUMP_VERSION {
        return Err(IoError::FormatVersionMismatch { path: path.to_path_buf(), found: version });
    }
    let kind = match u32_at(12) {
        0 => FieldKind::Scalar,
        1 => FieldKind::Vector,
        k => return Err(IoError::malformed(path, format!("unknown field kind {k}"))),
    };
    let shape = [0, 1, 2].map(|i| u64_at(16 + 8 * i) as usize);
    let bounds = [0, 1, 2, 3, 4, 5].map(|i| f64_at(40 + 8 * i));
    let comps = if kind == FieldKind::Vector { 3 } else { 1 };
    let expect = shape.iter().try_fold(comps, |acc: usize, n| acc.checked_mul(*n));
    let payload = &bytes[DUMP_HEADER_LEN..];
    match expect {
        Some(n) if n.checked_mul(8) == Some(payload.len()) => {}
        _ => return Err(IoError::malformed(path, "payload length does not match the header")),
    }
    let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(FieldDump { shape, bounds, kind, values })
}

pub fn read_field_dump(path: &Path) -> Result<FieldDump, IoError> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| IoError::io(path, e))?;
    decode_field_dump(&bytes, path)
}

/// 2D cut through a field at `index` along `axis`. Columns run along the
/// lower remaining axis, rows along the higher one (row 0 first). Vector
/// fields are reduced to their magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

pub fn extract_slice(shape: [usize; 3], kind: FieldKind, values: &[f64], axis: usize, index: usize) -> Option<Slice> {
    if axis > 2 || index >= shape[axis] {
        return None;
    }
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (width, height) = (shape[a], shape[b]);
    let mut out = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let mut c = [0usize; 3];
            c[axis] = index;
            c[a] = col;
            c[b] = row;
            let idx = c[0] + shape[0] * (c[1] + shape[1] * c[2]);
            out.push(match kind {
                FieldKind::Scalar => values[idx],
                FieldKind::Vector => {
                    let s = &values[3 * idx..3 * idx + 3];
                    (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt()
                }
            });
        }
    }
    Some(Slice { width, height, values: out })
}

/// 8-bit grey levels: min-max normalized over the finite non-sentinel
/// entries with round-half-to-even; constant slices give 128; sentinel and
/// non-finite entries give 0.
pub fn slice_to_gray(values: &[f64]) -> Vec<u8> {
    let valid = |v: &f64| v.is_finite() && !v.is_sentinel();
    let (lo, hi) = values.iter().filter(|v| valid(v)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    values
        .iter()
        .map(|v| {
            if !valid(v) {
                0
            } else if hi == lo {
                128
            } else {
                ((v - lo) / (hi - lo) * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

pub fn encode_ppm(slice: &Slice) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", slice.width, slice.height).into_bytes();
    out.extend(slice_to_gray(&slice.values));
    out
}

pub fn write_slice_image(slice: &Slice, path: &Path) -> Result<(), IoError> {
    fs::write(path, encode_ppm(slice)).map_err(|e| IoError::io(path, e))
}

pub fn write_slice_csv(slice: &Slice, path: &Path) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    for row in slice.values.chunks(slice.width.max(1)) {
        w.write_record(row.iter().map(|v| fmt_f64(*v))).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Field comparison over a cell subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorNormReport {
    pub rel_l1: f64,
    pub rel_l2: f64,
    pub rel_linf: f64,
    pub rmse: f64,
    /// `rmse / (max r - min r)`; absent for a constant reference.
    pub nrmse: Option<f64>,
    /// Sample correlation; absent for a constant reference.
    pub pearson: Option<f64>,
    pub n_points: usize,
    pub constant_reference: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NormError {
    #[error("fields differ in length ({0} vs {1})")]
    ShapeMismatch(usize, usize),
    #[error("comparison mask selects no cell")]
    EmptyMask,
}

/// Relative norms of `candidate - reference` over the cells selected by
/// `mask`. Reductions run in index order.
pub fn error_norms(candidate: &[f64], reference: &[f64], mask: &[bool]) -> Result<ErrorNormReport, NormError> {
    if candidate.len() != reference.len() || mask.len() != reference.len() {
        return Err(NormError::ShapeMismatch(candidate.len(), reference.len()));
    }
    let pairs: Vec<(f64, f64)> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| (candidate[i], reference[i])).collect();
    if pairs.is_empty() {
        return Err(NormError::EmptyMask);
    }
    let n = pairs.len() as f64;
    let (mut d1, mut d2, mut dinf, mut r1, mut r2, mut rinf) = (0.0, 0.0, 0.0_f64, 0.0, 0.0, 0.0_f64);
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut csum, mut rsum) = (0.0, 0.0);
    for &(c, r) in &pairs {
        let d = (c - r).abs();
        d1 += d;
        d2 += d * d;
        dinf = dinf.max(d);
        r1 += r.abs();
        r2 += r * r;
        rinf = rinf.max(r.abs());
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        csum += c;
        rsum += r;
    }
    let guard = |x: f64| if x > 0.0 { x } else { f64::MIN_POSITIVE };
    let rmse = (d2 / n).sqrt();
    let constant = rmax == rmin;
    let pearson = if constant {
        None
    } else {
        let (cm, rm) = (csum / n, rsum / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for &(c, r) in &pairs {
            sxy += (c - cm) * (r - rm);
            sxx += (c - cm) * (c - cm);
            syy += (r - rm) * (r - rm);
        }
        Some(if sxx == 0.0 { 0.0 } else { (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0) })
    };
    Ok(ErrorNormReport {
        rel_l1: d1 / guard(r1),
        rel_l2: d2.sqrt() / guard(r2.sqrt()),
        rel_linf: dinf / guard(rinf),
        rmse,
        nrmse: (!constant).then(|| rmse / (rmax - rmin)),
        pearson,
        n_points: pairs.len(),
        constant_reference: constant,
    })
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn run_meta(&self) -> PathBuf {
        self.root.join("run_meta.json")
    }

    pub fn fields_dir(&self) -> PathBuf {
        self.root.join("fields")
    }

    pub fn slices_dir(&self) -> PathBuf {
        self.root.join("slices")
    }

    pub fn config_snapshot(&self, ext: &str) -> PathBuf {
        self.root.join(format!("config_snapshot.{ext}"))
    }

    pub fn field(&self, name: &str, iter: usize) -> PathBuf {
        self.fields_dir().join(format!("{name}_{iter:04}.mfg"))
    }

    /// The single `config_snapshot.*` file, if present.
    pub fn find_config_snapshot(&self) -> Result<PathBuf, IoError> {
        let entries = fs::read_dir(&self.root).map_err(|e| IoError::io(&self.root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| IoError::io(&self.root, e))?;
            let name = entry.file_name();
            if name.to_string_lossy().starts_with("config_snapshot.") {
                return Ok(entry.path());
            }
        }
        Err(IoError::malformed(&self.root, "no config snapshot in run directory"))
    }

    /// Dumped iterations of field `name`, ascending.
    pub fn dumped_iterations(&self, name: &str) -> Result<Vec<usize>, IoError> {
        let dir = self.fields_dir();
        let entries = fs::read_dir(&dir).map_err(|e| IoError::io(&dir, e))?;
        let prefix = format!("{name}_");
        let mut iters = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| IoError::io(&dir, e))?;
            let file = entry.file_name().to_string_lossy().into_owned();
            if let Some(num) = file.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".mfg")) {
                if let Ok(k) = num.parse() {
                    iters.push(k);
                }
            }
        }
        iters.sort_unstable();
        Ok(iters)
    }
}
