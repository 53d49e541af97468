//! On-disk formats: frame files, solution files, per-frame diagnostics and
//! the metrics CSV.
//!
//! Lattices are stored as flat r-major arrays (`i * n_theta + j`), boolean
//! lattices as 0/1. Doubles are written in shortest round-trip form, so a
//! write/read cycle reproduces every bit.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};
use crate::field::VelocityField;
use crate::grid::{GridSpec, PolarGrid, Segmentation};
use crate::ivfm::IvfmDiagnostics;
use crate::metrics::FrameMetrics;
use crate::phantom::{DegradeSpec, DopplerFrame};
use crate::pinn::PinnDiagnostics;

pub const FORMAT_VERSION: u32 = 1;
pub const METRICS_HEADER: [&str; 5] = ["frame_id", "method", "r2_vr", "r2_vtheta", "nrmse_pct"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFields {
    pub v_d: Vec<f64>,
    pub weights: Vec<f64>,
    pub seg: Vec<u8>,
    pub valid: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_r_ref: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_theta_ref: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    /// `None` stands for noiseless data.
    pub snr_db: Option<f64>,
    /// Degradations applied so far, oldest first.
    #[serde(default)]
    pub degrade: Vec<DegradeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFile {
    pub format_version: u32,
    pub grid: GridSpec,
    pub fields: FrameFields,
    pub provenance: Provenance,
}

fn flatten<T: Copy>(a: &Array2<T>) -> Vec<T> {
    a.iter().copied().collect()
}

fn bits(a: &Array2<bool>) -> Vec<u8> {
    a.iter().map(|&b| u8::from(b)).collect()
}

fn lattice<T: Clone>(grid: &PolarGrid, v: &[T], name: &str) -> Result<Array2<T>> {
    Array2::from_shape_vec(grid.shape(), v.to_vec()).map_err(|_| {
        VfmError::ShapeMismatch(format!(
            "{name} holds {} values, grid is {}x{}",
            v.len(),
            grid.n_r(),
            grid.n_theta()
        ))
    })
}

fn bool_lattice(grid: &PolarGrid, v: &[u8], name: &str) -> Result<Array2<bool>> {
    if let Some(bad) = v.iter().find(|&&b| b > 1) {
        return Err(VfmError::Parse(format!("{name} must hold 0/1, found {bad}")));
    }
    Ok(lattice(grid, v, name)?.mapv(|b| b == 1))
}

fn check_finite(v: &[f64], name: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(k) => Err(VfmError::NonFinite(format!("{name}[{k}]"))),
        None => Ok(()),
    }
}

impl FrameFile {
    pub fn from_frame(frame: &DopplerFrame, reference: Option<&VelocityField>, provenance: Provenance) -> Result<Self> {
        let fields = FrameFields {
            v_d: flatten(frame.v_d()),
            weights: flatten(frame.weights()),
            seg: bits(frame.seg().mask()),
            valid: bits(frame.valid()),
            v_r_ref: reference.map(|f| flatten(f.v_r())),
            v_theta_ref: reference.map(|f| flatten(f.v_theta())),
        };
        if let Some(f) = reference {
            f.check_grid(frame.grid())?;
        }
        let file = Self {
            format_version: FORMAT_VERSION,
            grid: frame.grid().spec(),
            fields,
            provenance,
        };
        file.check_values()?;
        Ok(file)
    }

    fn check_values(&self) -> Result<()> {
        let f = &self.fields;
        check_finite(&f.v_d, "v_d")?;
        check_finite(&f.weights, "weights")?;
        if let Some(v) = &f.v_r_ref {
            check_finite(v, "v_r_ref")?;
        }
        if let Some(v) = &f.v_theta_ref {
            check_finite(v, "v_theta_ref")?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PolarGrid> {
        if self.format_version != FORMAT_VERSION {
            return Err(VfmError::Parse(format!(
                "unsupported frame format version {}",
                self.format_version
            )));
        }
        PolarGrid::try_from(self.grid)
    }

    pub fn segmentation(&self) -> Result<Segmentation> {
        let grid = self.grid()?;
        Segmentation::new(bool_lattice(&grid, &self.fields.seg, "seg")?)
    }

    pub fn to_frame(&self) -> Result<DopplerFrame> {
        let grid = self.grid()?;
        let f = &self.fields;
        DopplerFrame::new(
            grid,
            self.segmentation()?,
            lattice(&grid, &f.v_d, "v_d")?,
            lattice(&grid, &f.weights, "weights")?,
            bool_lattice(&grid, &f.valid, "valid")?,
        )
    }

    /// Ground-truth field, when the file carries one.
    pub fn reference(&self) -> Result<Option<VelocityField>> {
        let grid = self.grid()?;
        match (&self.fields.v_r_ref, &self.fields.v_theta_ref) {
            (Some(r), Some(t)) => Ok(Some(VelocityField::new(
                lattice(&grid, r, "v_r_ref")?,
                lattice(&grid, t, "v_theta_ref")?,
            )?)),
            (None, None) => Ok(None),
            _ => Err(VfmError::Parse("reference field needs both v_r_ref and v_theta_ref".into())),
        }
    }

    /// Same file with the frame replaced and `spec` appended to the
    /// provenance.
    pub fn degraded(&self, spec: &DegradeSpec) -> Result<Self> {
        let frame = crate::phantom::degrade(&self.to_frame()?, spec)?;
        let mut provenance = self.provenance.clone();
        provenance.degrade.push(*spec);
        Self::from_frame(&frame, self.reference()?.as_ref(), provenance)
    }
}

/// Reconstructed field of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub format_version: u32,
    pub frame_id: String,
    pub method: String,
    pub grid: GridSpec,
    pub v_r: Vec<f64>,
    pub v_theta: Vec<f64>,
    /// Set when the solver fell back to a degraded path.
    #[serde(default)]
    pub flagged: bool,
}

impl SolutionFile {
    pub fn new(frame_id: &str, method: &str, grid: &PolarGrid, field: &VelocityField, flagged: bool) -> Result<Self> {
        field.check_grid(grid)?;
        let file = Self {
            format_version: FORMAT_VERSION,
            frame_id: frame_id.to_string(),
            method: method.to_string(),
            grid: grid.spec(),
            v_r: flatten(field.v_r()),
            v_theta: flatten(field.v_theta()),
            flagged,
        };
        check_finite(&file.v_r, "v_r")?;
        check_finite(&file.v_theta, "v_theta")?;
        Ok(file)
    }

    pub fn grid(&self) -> Result<PolarGrid> {
        if self.format_version != FORMAT_VERSION {
            return Err(VfmError::Parse(format!(
                "unsupported solution format version {}",
                self.format_version
            )));
        }
        PolarGrid::try_from(self.grid)
    }

    pub fn field(&self) -> Result<VelocityField> {
        let grid = self.grid()?;
        VelocityField::new(lattice(&grid, &self.v_r, "v_r")?, lattice(&grid, &self.v_theta, "v_theta")?)
    }
}

/// Everything recorded about one reconstruction attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame_id: String,
    pub method: String,
    pub wall_clock_s: f64,
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ivfm: Option<IvfmDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinn: Option<PinnDiagnostics>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| VfmError::Parse(format!("{}: {e}", path.display())))
}

pub fn write_frame(path: &Path, frame: &FrameFile) -> Result<()> {
    write_json(path, frame)
}

pub fn read_frame(path: &Path) -> Result<FrameFile> {
    let f: FrameFile = read_json(path)?;
    f.grid()?;
    f.check_values()?;
    Ok(f)
}

/// Frame identifier of a file: its stem.
pub fn frame_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| VfmError::InvalidArgument(format!("no file stem in {}", path.display())))
}

/// `*.json` files directly inside `dir`, sorted by name.
pub fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn write_metrics_csv(path: &Path, rows: &[FrameMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(METRICS_HEADER).map_err(csv_error)?;
    for m in rows {
        w.write_record([
            m.frame_id.clone(),
            m.method.clone(),
            m.r2_vr.to_string(),
            m.r2_vtheta.to_string(),
            m.nrmse_pct.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<FrameMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = r.headers().map_err(csv_error)?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(VfmError::Parse(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

/// Generic CSV table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> VfmError {
    VfmError::Parse(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::sector_segmentation;
    use crate::phantom::{stream_function_field, synthesize_doppler, StreamFunctionSpec};

    fn sample() -> FrameFile {
        let grid = PolarGrid::sector(6, 9).unwrap();
        let seg = sector_segmentation(&grid, 1).unwrap();
        let truth = stream_function_field(&StreamFunctionSpec::single_vortex(0.013), &grid, &seg).unwrap();
        let frame = synthesize_doppler(&truth, &grid, &seg, 20.0, 9).unwrap();
        let prov = Provenance {
            generator: "test".into(),
            seed: 9,
            snr_db: Some(20.0),
            degrade: vec![],
            frame_index: Some(0),
        };
        FrameFile::from_frame(&frame, Some(&truth), prov).unwrap()
    }

    #[test]
    fn frame_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        let f = sample();
        write_frame(&path, &f).unwrap();
        let back = read_frame(&path).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.fields.v_d), bits(&f.fields.v_d));
        assert_eq!(bits(back.fields.v_r_ref.as_ref().unwrap()), bits(f.fields.v_r_ref.as_ref().unwrap()));
        assert_eq!(back, f);
        assert_eq!(back.to_frame().unwrap(), f.to_frame().unwrap());
    }

    #[test]
    fn rejects_bad_version_and_shapes() {
        let mut f = sample();
        f.format_version = 7;
        assert!(f.to_frame().is_err());
        let mut f = sample();
        f.fields.v_d.pop();
        assert!(matches!(f.to_frame(), Err(VfmError::ShapeMismatch(_))));
        let mut f = sample();
        f.fields.seg[0] = 2;
        assert!(f.to_frame().is_err());
    }

    #[test]
    fn degrade_records_provenance() {
        let f = sample();
        let d = f.degraded(&DegradeSpec::Truncate { pct: 50.0 }).unwrap();
        assert_eq!(d.provenance.degrade, vec![DegradeSpec::Truncate { pct: 50.0 }]);
        assert!(d.fields.valid.iter().filter(|&&b| b == 1).count() < f.fields.valid.iter().filter(|&&b| b == 1).count());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![FrameMetrics {
            frame_id: "frame_000".into(),
            method: "ivfm".into(),
            r2_vr: 0.123456789012345,
            r2_vtheta: 1.0,
            nrmse_pct: 3.5,
        }];
        write_metrics_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame_id,method,r2_vr,r2_vtheta,nrmse_pct\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }
}
