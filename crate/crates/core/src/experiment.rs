//! Batch workflows behind the command-line tool: cine generation, per-frame
//! reconstruction, scoring, and the comparison experiments.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_weights, MlpParams, LAYER_SIZES};
use crate::error::{Result, VfmError};
use crate::grid::{extract_boundary, sector_segmentation, PolarGrid};
use crate::io::{self, FrameDiagnostics, FrameFile, Provenance, SolutionFile};
use crate::ivfm::{ivfm_solve, DEFAULT_LAMBDA_S};
use crate::metrics::{aggregate_robust, median, score_frame, FrameMetrics, RobustSummary};
use crate::parallel::{map_items, with_jobs, ExecPolicy};
use crate::phantom::{stream_function_field, synthesize_doppler, DegradeSpec, StreamFunctionSpec, StreamTerm};
use crate::pinn::{pinn_solve_from, pretrain_reference, PinnConfig, PinnMethod, Schedule};

pub const GENERATOR: &str = "vfm stream-function cine";
pub const DEFAULT_ITERS: usize = 2500;
pub const DEFAULT_TRUNCATIONS: [f64; 5] = [20.0, 40.0, 50.0, 60.0, 70.0];

/// Reconstruction method selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ivfm,
    RbPinn,
    AlPinn,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ivfm, Method::RbPinn, Method::AlPinn];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ivfm => "ivfm",
            Method::RbPinn => "rb-pinn",
            Method::AlPinn => "al-pinn",
        }
    }

    pub fn pinn(&self) -> Option<PinnMethod> {
        match self {
            Method::Ivfm => None,
            Method::RbPinn => Some(PinnMethod::RbPinn),
            Method::AlPinn => Some(PinnMethod::AlPinn),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = VfmError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| VfmError::Config(format!("unknown method '{s}' (expected ivfm, rb-pinn or al-pinn)")))
    }
}

/// A frame file together with its identifier.
pub type NamedFrame = (String, FrameFile);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CineConfig {
    pub frames: usize,
    pub n_r: usize,
    pub n_theta: usize,
    /// Cells between the cavity and the sector edge.
    pub margin: usize,
    /// Peak stream-function amplitude of the main vortex, m^2/s.
    pub amplitude: f64,
    /// Number of periods of the amplitude modulation over the cine.
    pub cycles: f64,
    /// Peak amplitude of the (2, 1) mode relative to the main vortex.
    pub secondary: f64,
    /// `+inf` for noiseless frames.
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for CineConfig {
    fn default() -> Self {
        Self {
            frames: 10,
            n_r: 40,
            n_theta: 100,
            margin: 2,
            amplitude: 0.01,
            cycles: 0.5,
            secondary: 0.3,
            snr_db: f64::INFINITY,
            seed: 0,
        }
    }
}

impl CineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(VfmError::Config("a cine needs at least one frame".into()));
        }
        if !self.amplitude.is_finite() || !self.cycles.is_finite() || !self.secondary.is_finite() {
            return Err(VfmError::Config("cine amplitudes must be finite".into()));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(VfmError::Config(format!("snr_db = {}", self.snr_db)));
        }
        Ok(())
    }

    /// Flow of frame `k`: the main vortex modulated by
    /// `sin(2 pi (k + 1/2) / K * cycles)` plus a (2, 1) mode on a cosine.
    pub fn spec(&self, k: usize) -> StreamFunctionSpec {
        let phase = 2.0 * PI * (k as f64 + 0.5) / self.frames as f64 * self.cycles;
        let mut terms = vec![StreamTerm {
            amplitude: self.amplitude * phase.sin(),
            mode_r: 1,
            mode_theta: 1,
        }];
        if self.secondary != 0.0 {
            terms.push(StreamTerm {
                amplitude: self.secondary * self.amplitude * phase.cos(),
                mode_r: 2,
                mode_theta: 1,
            });
        }
        StreamFunctionSpec { terms }
    }

    fn noise_seed(&self, k: usize) -> u64 {
        self.seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:03}")
}

pub fn generate_cine(cfg: &CineConfig) -> Result<Vec<NamedFrame>> {
    cfg.validate()?;
    let grid = PolarGrid::sector(cfg.n_r, cfg.n_theta)?;
    let seg = sector_segmentation(&grid, cfg.margin)?;
    (0..cfg.frames)
        .map(|k| {
            let truth = stream_function_field(&cfg.spec(k), &grid, &seg)?;
            let seed = cfg.noise_seed(k);
            let frame = synthesize_doppler(&truth, &grid, &seg, cfg.snr_db, seed)?;
            let prov = Provenance {
                generator: GENERATOR.into(),
                seed,
                snr_db: cfg.snr_db.is_finite().then_some(cfg.snr_db),
                degrade: Vec::new(),
                frame_index: Some(k),
            };
            Ok((frame_name(k), FrameFile::from_frame(&frame, Some(&truth), prov)?))
        })
        .collect()
}

pub fn degrade_all(frames: &[NamedFrame], spec: &DegradeSpec) -> Result<Vec<NamedFrame>> {
    frames
        .iter()
        .map(|(id, f)| Ok((id.clone(), f.degraded(spec)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    pub method: Method,
    pub iters: usize,
    pub pretrained: Option<PathBuf>,
    pub lambda_s: f64,
    pub seed: u64,
    pub schedule: Schedule,
    /// Frames solved concurrently.
    pub jobs: usize,
}

impl ReconstructConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            iters: DEFAULT_ITERS,
            pretrained: None,
            lambda_s: DEFAULT_LAMBDA_S,
            seed: 0,
            schedule: Schedule::DualStage,
            jobs: 1,
        }
    }

    pub fn pinn_config(&self) -> PinnConfig {
        PinnConfig {
            init_weights: self.pretrained.clone(),
            seed: self.seed,
            schedule: self.schedule,
            ..PinnConfig::with_iters(self.iters)
        }
    }

    /// Checks that do not depend on any frame, including the weight file.
    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(VfmError::Config("--jobs must be at least 1".into()));
        }
        match self.method {
            Method::Ivfm => {
                if !(self.lambda_s >= 0.0) || !self.lambda_s.is_finite() {
                    return Err(VfmError::Config(format!("lambda_s = {}", self.lambda_s)));
                }
            }
            _ => {
                self.pinn_config().validate()?;
                if let Some(p) = &self.pretrained {
                    load_weights(p, &LAYER_SIZES)?;
                }
            }
        }
        Ok(())
    }
}

/// Result of one frame: a solution unless the solver failed, and the
/// diagnostics either way.
#[derive(Clone, Debug)]
pub struct FrameOutcome {
    pub solution: Option<SolutionFile>,
    pub diagnostics: FrameDiagnostics,
}

impl FrameOutcome {
    pub fn frame_id(&self) -> &str {
        &self.diagnostics.frame_id
    }
}

fn solve_frame(id: &str, file: &FrameFile, cfg: &ReconstructConfig, init: Option<&MlpParams>) -> Result<FrameOutcome> {
    let frame = file.to_frame()?;
    let grid = *frame.grid();
    let bc = extract_boundary(frame.seg(), &grid, None)?;
    let start = Instant::now();
    let mut diag = FrameDiagnostics {
        frame_id: id.to_string(),
        method: cfg.method.name().to_string(),
        wall_clock_s: 0.0,
        flagged: false,
        error: None,
        ivfm: None,
        pinn: None,
    };
    let (field, flagged) = match cfg.method.pinn() {
        None => {
            let sol = ivfm_solve(&frame, &bc, cfg.lambda_s)?;
            diag.ivfm = Some(sol.diagnostics(cfg.lambda_s));
            (sol.field, sol.flagged)
        }
        Some(m) => {
            let pcfg = cfg.pinn_config();
            let init = match init {
                Some(p) => p.clone(),
                None => pcfg.initial_params()?,
            };
            let sol = pinn_solve_from(m, &frame, &bc, &pcfg, init)?;
            diag.pinn = Some(sol.diagnostics);
            (sol.field, false)
        }
    };
    diag.wall_clock_s = start.elapsed().as_secs_f64();
    diag.flagged = flagged;
    Ok(FrameOutcome {
        solution: Some(SolutionFile::new(id, cfg.method.name(), &grid, &field, flagged)?),
        diagnostics: diag,
    })
}

/// Reconstruct one frame. Solver failures are reported in the outcome
/// rather than returned.
pub fn reconstruct_frame(id: &str, file: &FrameFile, cfg: &ReconstructConfig) -> FrameOutcome {
    reconstruct_frame_from(id, file, cfg, None)
}

/// As [`reconstruct_frame`], starting a network solve from `init` instead
/// of the configured initialization.
pub fn reconstruct_frame_from(id: &str, file: &FrameFile, cfg: &ReconstructConfig, init: Option<&MlpParams>) -> FrameOutcome {
    solve_frame(id, file, cfg, init).unwrap_or_else(|e| FrameOutcome {
        solution: None,
        diagnostics: FrameDiagnostics {
            frame_id: id.to_string(),
            method: cfg.method.name().to_string(),
            wall_clock_s: 0.0,
            flagged: true,
            error: Some(e.to_string()),
            ivfm: None,
            pinn: None,
        },
    })
}

/// Reconstruct every frame, `cfg.jobs` at a time. Outcomes come back in
/// input order and do not depend on `jobs`.
pub fn reconstruct_batch(frames: &[NamedFrame], cfg: &ReconstructConfig) -> Result<Vec<FrameOutcome>> {
    cfg.validate()?;
    let policy = ExecPolicy::from_jobs(cfg.jobs);
    Ok(with_jobs(cfg.jobs, || {
        map_items(policy, frames, |(id, f)| reconstruct_frame(id, f, cfg))
    }))
}

/// Write `<frame_id>.json` and `<frame_id>.diag.json` for each outcome.
pub fn write_outcomes(dir: &Path, outcomes: &[FrameOutcome]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for o in outcomes {
        if let Some(s) = &o.solution {
            io::write_json(&dir.join(format!("{}.json", o.frame_id())), s)?;
        }
        io::write_json_pretty(&dir.join(format!("{}.diag.json", o.frame_id())), &o.diagnostics)?;
    }
    Ok(())
}

/// Cells valid in every frame: the region left after the strongest
/// truncation when the masks are nested.
pub fn common_region(frames: &[&FrameFile]) -> Result<Array2<bool>> {
    let first = frames
        .first()
        .ok_or_else(|| VfmError::InvalidArgument("common region of no frames".into()))?;
    let mut region = first.to_frame()?.valid().clone();
    for f in &frames[1..] {
        let v = f.to_frame()?.valid().clone();
        if v.dim() != region.dim() {
            return Err(VfmError::ShapeMismatch("frames on different grids".into()));
        }
        region.zip_mut_with(&v, |a, &b| *a = *a && b);
    }
    Ok(region)
}

/// Score solutions against the reference fields of `references`, pairing
/// them by frame id. With `region`, only cells inside it count.
pub fn evaluate(
    solutions: &[SolutionFile],
    references: &[NamedFrame],
    region: Option<&BTreeMap<String, Array2<bool>>>,
) -> Result<Vec<FrameMetrics>> {
    let refs: BTreeMap<&str, &FrameFile> = references.iter().map(|(id, f)| (id.as_str(), f)).collect();
    let missing: Vec<&str> = solutions
        .iter()
        .map(|s| s.frame_id.as_str())
        .filter(|id| !refs.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(VfmError::InvalidArgument(format!(
            "no reference frame for: {}",
            missing.join(", ")
        )));
    }
    let mut rows = Vec::with_capacity(solutions.len());
    for s in solutions {
        let file = refs[s.frame_id.as_str()];
        let truth = file
            .reference()?
            .ok_or_else(|| VfmError::InvalidArgument(format!("frame {} has no reference field", s.frame_id)))?;
        let seg = file.segmentation()?;
        let mut mask = seg.mask().clone();
        if let Some(regions) = region {
            let r = regions
                .get(&s.frame_id)
                .ok_or_else(|| VfmError::InvalidArgument(format!("no evaluation region for {}", s.frame_id)))?;
            if r.dim() != mask.dim() {
                return Err(VfmError::ShapeMismatch(format!("region of {} has the wrong shape", s.frame_id)));
            }
            mask.zip_mut_with(r, |a, &b| *a = *a && b);
        }
        let flat: Vec<bool> = mask.iter().copied().collect();
        rows.push(score_frame(&s.frame_id, &s.method, &s.field()?, &truth, &flat)?);
    }
    rows.sort_by(|a, b| (&a.frame_id, &a.method).cmp(&(&b.frame_id, &b.method)));
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ablation,
    FullVsSparse,
    Truncation,
    Timing,
}

impl FromStr for ExperimentKind {
    type Err = VfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Self::Ablation),
            "full_vs_sparse" => Ok(Self::FullVsSparse),
            "truncation" => Ok(Self::Truncation),
            "timing" => Ok(Self::Timing),
            _ => Err(VfmError::Config(format!("unknown experiment '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub methods: Vec<Method>,
    pub iters: usize,
    /// Budget of the warm-start fit; defaults to `iters`.
    pub pretrain_iters: Option<usize>,
    /// Index into the cine of the frame used for the warm-start fit.
    pub pretrain_frame: usize,
    pub lambda_s: f64,
    pub seed: u64,
    pub jobs: usize,
    pub sparse: DegradeSpec,
    pub truncations: Vec<f64>,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, methods: Vec<Method>) -> Self {
        Self {
            kind,
            methods,
            iters: DEFAULT_ITERS,
            pretrain_iters: None,
            pretrain_frame: 0,
            lambda_s: DEFAULT_LAMBDA_S,
            seed: 0,
            jobs: 1,
            sparse: DegradeSpec::SparseDeterministic { m: 10, n: 9 },
            truncations: DEFAULT_TRUNCATIONS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(VfmError::Config("the experiment needs at least one method".into()));
        }
        if self.jobs == 0 {
            return Err(VfmError::Config("--jobs must be at least 1".into()));
        }
        if self.kind == ExperimentKind::Ablation && self.ablation_method().is_none() {
            return Err(VfmError::Config("the ablation needs a network method (rb-pinn or al-pinn)".into()));
        }
        if self.kind == ExperimentKind::Truncation && self.truncations.is_empty() {
            return Err(VfmError::Config("no truncation percentages".into()));
        }
        self.sparse.validate()?;
        for &p in &self.truncations {
            DegradeSpec::Truncate { pct: p }.validate()?;
        }
        Ok(())
    }

    fn ablation_method(&self) -> Option<PinnMethod> {
        self.methods.iter().find_map(|m| m.pinn())
    }

    fn reconstruct(&self, method: Method) -> ReconstructConfig {
        ReconstructConfig {
            method,
            iters: self.iters,
            pretrained: None,
            lambda_s: self.lambda_s,
            seed: self.seed,
            schedule: Schedule::DualStage,
            jobs: self.jobs,
        }
    }
}

/// Aggregated scores of one table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    /// Row key within the experiment (condition, truncation, ablation cell).
    pub condition: String,
    pub frames: usize,
    pub failed: usize,
    pub r2_vr: Option<RobustSummary>,
    pub r2_vtheta: Option<RobustSummary>,
    pub nrmse: Option<RobustSummary>,
    pub seconds: Option<RobustSummary>,
    /// Median final training objective (network methods).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_objective: Option<f64>,
    /// Median gradient evaluations per frame (network methods).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evals: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<SummaryRow>,
    pub per_frame: Vec<FrameMetrics>,
    /// Truncation only: whether the valid regions were strictly nested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nested_regions: Option<bool>,
    pub errors: Vec<String>,
}

const SUMMARY_HEADER: [&str; 13] = [
    "method",
    "condition",
    "frames",
    "failed",
    "r2_vr_median",
    "r2_vr_robust_std",
    "r2_vtheta_median",
    "r2_vtheta_robust_std",
    "nrmse_median",
    "nrmse_robust_std",
    "seconds_median",
    "final_objective_median",
    "evals_median",
];

fn summary_record(r: &SummaryRow) -> Vec<String> {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    vec![
        r.method.clone(),
        r.condition.clone(),
        r.frames.to_string(),
        r.failed.to_string(),
        opt(r.r2_vr.map(|s| s.median)),
        opt(r.r2_vr.map(|s| s.robust_std)),
        opt(r.r2_vtheta.map(|s| s.median)),
        opt(r.r2_vtheta.map(|s| s.robust_std)),
        opt(r.nrmse.map(|s| s.median)),
        opt(r.nrmse.map(|s| s.robust_std)),
        opt(r.seconds.map(|s| s.median)),
        opt(r.final_objective),
        opt(r.evals),
    ]
}

fn robust(v: &[f64]) -> Option<RobustSummary> {
    aggregate_robust(v).ok()
}

fn summarize_outcomes(
    method: &str,
    condition: &str,
    outcomes: &[FrameOutcome],
    metrics: &[FrameMetrics],
) -> SummaryRow {
    let col = |f: fn(&FrameMetrics) -> f64| metrics.iter().map(f).collect::<Vec<_>>();
    let ok: Vec<&FrameOutcome> = outcomes.iter().filter(|o| o.solution.is_some()).collect();
    let seconds: Vec<f64> = ok.iter().map(|o| o.diagnostics.wall_clock_s).collect();
    let pinn: Vec<_> = ok.iter().filter_map(|o| o.diagnostics.pinn.as_ref()).collect();
    let objective: Vec<f64> = pinn.iter().map(|d| d.final_objective).collect();
    let evals: Vec<f64> = pinn.iter().map(|d| d.evals as f64).collect();
    SummaryRow {
        method: method.to_string(),
        condition: condition.to_string(),
        frames: outcomes.len(),
        failed: outcomes.len() - ok.len(),
        r2_vr: robust(&col(|m| m.r2_vr)),
        r2_vtheta: robust(&col(|m| m.r2_vtheta)),
        nrmse: robust(&col(|m| m.nrmse_pct)),
        seconds: robust(&seconds),
        final_objective: median(&objective).ok(),
        evals: median(&evals).ok(),
    }
}

/// Experiment bookkeeping shared by the table builders. Results are
/// written as soon as each block finishes so an interrupted run keeps
/// what it has.
struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    report: ExperimentReport,
}

impl Run<'_> {
    fn add(
        &mut self,
        label: &str,
        condition: &str,
        outcomes: &[FrameOutcome],
        references: &[NamedFrame],
        region: Option<&BTreeMap<String, Array2<bool>>>,
    ) -> Result<()> {
        let dir = self.out.join("solutions").join(format!("{label}_{condition}"));
        write_outcomes(&dir, outcomes)?;
        let mut solutions = Vec::new();
        for o in outcomes {
            match &o.solution {
                Some(s) => solutions.push(SolutionFile {
                    method: label.to_string(),
                    ..s.clone()
                }),
                None => self.report.errors.push(format!(
                    "{label}/{condition}/{}: {}",
                    o.frame_id(),
                    o.diagnostics.error.as_deref().unwrap_or("failed")
                )),
            }
        }
        let metrics = evaluate(&solutions, references, region)?;
        let mut row = summarize_outcomes(label, condition, outcomes, &metrics);
        row.method = label.to_string();
        self.report.per_frame.extend(metrics.into_iter().map(|mut m| {
            m.method = format!("{label}/{condition}");
            m
        }));
        self.report.rows.push(row);
        self.flush()
    }

    fn flush(&self) -> Result<()> {
        let name = match self.cfg.kind {
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::FullVsSparse => "full_vs_sparse",
            ExperimentKind::Truncation => "truncation",
            ExperimentKind::Timing => "timing",
        };
        let rows: Vec<Vec<String>> = self.report.rows.iter().map(summary_record).collect();
        io::write_table(&self.out.join(format!("{name}.csv")), &SUMMARY_HEADER, &rows)?;
        io::write_metrics_csv(&self.out.join("metrics.csv"), &self.report.per_frame)?;
        io::write_json_pretty(&self.out.join("report.json"), &self.report)
    }
}

/// Run one experiment over `frames` (which must carry reference fields),
/// writing tables, per-frame metrics and solutions below `out`.
pub fn run_experiment(cfg: &ExperimentConfig, frames: &[NamedFrame], out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(VfmError::Config("no input frames".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut run = Run {
        cfg,
        out,
        report: ExperimentReport {
            config: cfg.clone(),
            rows: Vec::new(),
            per_frame: Vec::new(),
            nested_regions: None,
            errors: Vec::new(),
        },
    };
    match cfg.kind {
        ExperimentKind::FullVsSparse => {
            let sparse = degrade_all(frames, &cfg.sparse)?;
            for &m in &cfg.methods {
                let rc = cfg.reconstruct(m);
                let full = reconstruct_batch(frames, &rc)?;
                run.add(m.name(), "full", &full, frames, None)?;
                let sp = reconstruct_batch(&sparse, &rc)?;
                run.add(m.name(), "sparse", &sp, frames, None)?;
            }
        }
        ExperimentKind::Timing => {
            for &m in &cfg.methods {
                let outcomes = reconstruct_batch(frames, &cfg.reconstruct(m))?;
                run.add(m.name(), "full", &outcomes, frames, None)?;
            }
        }
        ExperimentKind::Truncation => {
            let mut pcts = cfg.truncations.clone();
            pcts.sort_by(f64::total_cmp);
            let variants: Vec<Vec<NamedFrame>> = pcts
                .iter()
                .map(|&pct| degrade_all(frames, &DegradeSpec::Truncate { pct }))
                .collect::<Result<_>>()?;
            let mut regions = BTreeMap::new();
            let mut nested = true;
            for (k, (id, _)) in frames.iter().enumerate() {
                let files: Vec<&FrameFile> = variants.iter().map(|v| &v[k].1).collect();
                let valid: Vec<Array2<bool>> = files
                    .iter()
                    .map(|f| f.to_frame().map(|fr| fr.valid().clone()))
                    .collect::<Result<_>>()?;
                nested &= valid.windows(2).all(|w| strictly_contains(&w[0], &w[1]));
                regions.insert(id.clone(), common_region(&files)?);
            }
            run.report.nested_regions = Some(nested);
            for &m in &cfg.methods {
                let rc = cfg.reconstruct(m);
                for (pct, variant) in pcts.iter().zip(&variants) {
                    let outcomes = reconstruct_batch(variant, &rc)?;
                    run.add(m.name(), &format!("truncate_{pct}"), &outcomes, frames, Some(&regions))?;
                }
            }
        }
        ExperimentKind::Ablation => run_ablation(&mut run, frames)?,
    }
    run.flush()?;
    Ok(run.report)
}

/// `outer` contains `inner` and has at least one cell more.
pub fn strictly_contains(outer: &Array2<bool>, inner: &Array2<bool>) -> bool {
    outer.dim() == inner.dim()
        && outer.iter().zip(inner).all(|(&o, &i)| o || !i)
        && outer.iter().filter(|&&b| b).count() > inner.iter().filter(|&&b| b).count()
}

/// The 2x2 warm-start / schedule matrix. Single-stage runs get as many
/// gradient evaluations as the dual-stage run with the same start, which
/// equalizes cost.
fn run_ablation(run: &mut Run<'_>, frames: &[NamedFrame]) -> Result<()> {
    let cfg = run.cfg;
    let method = cfg.ablation_method().expect("validated");
    let label = method.name();
    let base = cfg.reconstruct(if method == PinnMethod::RbPinn { Method::RbPinn } else { Method::AlPinn });

    let (_, ref_file) = frames
        .get(cfg.pretrain_frame)
        .ok_or_else(|| VfmError::Config(format!("pretrain frame {} out of range", cfg.pretrain_frame)))?;
    let ref_frame = ref_file.to_frame()?;
    let ref_bc = extract_boundary(ref_frame.seg(), ref_frame.grid(), None)?;
    let weights = run.out.join("pretrained.weights");
    let pre_cfg = PinnConfig {
        seed: cfg.seed,
        ..PinnConfig::with_iters(cfg.pretrain_iters.unwrap_or(cfg.iters))
    };
    let pretrained = pretrain_reference(&ref_frame, &ref_bc, &pre_cfg, &weights)?.params;
    let fresh = base.pinn_config().initial_params()?;

    for (pre, start) in [(false, &fresh), (true, &pretrained)] {
        let policy = ExecPolicy::from_jobs(cfg.jobs);
        let dual = with_jobs(cfg.jobs, || {
            map_items(policy, frames, |(id, f)| reconstruct_frame_from(id, f, &base, Some(start)))
        });
        let single: Vec<FrameOutcome> = with_jobs(cfg.jobs, || {
            map_items(policy, &dual_budgets(&dual, frames), |(k, budget)| {
                let rc = ReconstructConfig {
                    iters: *budget,
                    schedule: Schedule::AdamWOnly,
                    ..base.clone()
                };
                let (id, f) = &frames[*k];
                reconstruct_frame_from(id, f, &rc, Some(start))
            })
        });
        let tag = |dual: bool| format!("pretrained={}|dual_stage={}", u8::from(pre), u8::from(dual));
        run.add(label, &tag(false), &single, frames, None)?;
        run.add(label, &tag(true), &dual, frames, None)?;
    }
    // Table order: neither, dual only, pretrained only, both.
    let order = |c: &str| match c {
        "pretrained=0|dual_stage=0" => 0,
        "pretrained=0|dual_stage=1" => 1,
        "pretrained=1|dual_stage=0" => 2,
        _ => 3,
    };
    run.report.rows.sort_by_key(|r| order(&r.condition));
    Ok(())
}

fn dual_budgets(dual: &[FrameOutcome], frames: &[NamedFrame]) -> Vec<(usize, usize)> {
    (0..frames.len())
        .map(|k| {
            let evals = dual[k].diagnostics.pinn.as_ref().map(|d| d.evals).unwrap_or(0);
            (k, evals.max(1))
        })
        .collect()
}
