//! Mode orchestration: bundle adjustment alone, classic matching refinement
//! followed by adjustment, and the alternating unified scheme; plus accuracy
//! evaluation and window sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{default_anchor, internal_rmse, run_bias_adjustment, AdjustConfig};
use crate::error::{Error, Result};
use crate::io::format_sig;
use crate::lsm::{refine_track, refine_track_classic, LsmConfig, LsmStatus, WeightConfig};
use crate::raster::RasterSet;
use crate::rpc::{BiasCorrection, CameraSet};
use crate::synth::SynthScene;
use crate::tracks::{filter_outliers, reproj_stats, select_reference, triangulate, ObsStatus, Track};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ba,
    LsmBa,
    Unified,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ba, Mode::LsmBa, Mode::Unified];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ba => "ba",
            Mode::LsmBa => "lsm_ba",
            Mode::Unified => "unified",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ba" => Ok(Mode::Ba),
            "lsm_ba" => Ok(Mode::LsmBa),
            "unified" => Ok(Mode::Unified),
            other => Err(Error::Validation(format!("unknown mode '{other}', expected ba, lsm_ba or unified"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub window: usize,
    /// Reprojection residual above which an observation is an outlier, pixels.
    pub threshold: f64,
    pub max_outer: usize,
    /// Outer loop stops once internal RMSE changes by less than this, pixels.
    pub outer_tolerance: f64,
    pub p: f64,
    pub sigma: f64,
    pub anchor: Option<u32>,
}

impl PipelineConfig {
    pub fn new(mode: Mode, window: usize) -> Self {
        Self { mode, window, threshold: 2.0, max_outer: 5, outer_tolerance: 1e-3, p: 0.5, sigma: 2.0, anchor: None }
    }

    pub fn validate(&self) -> Result<()> {
        self.lsm().weights.validate()?;
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::Validation(format!("outlier threshold must be positive, got {}", self.threshold)));
        }
        if !(self.outer_tolerance >= 0.0) {
            return Err(Error::Validation("outer tolerance must be non-negative".into()));
        }
        Ok(())
    }

    fn lsm(&self) -> LsmConfig {
        let mut cfg = LsmConfig::new(self.window);
        cfg.weights = WeightConfig { p: self.p, sigma: self.sigma, window: self.window };
        cfg
    }
}

/// Everything a run needs: starting cameras, images, adjustment tracks and
/// optional held-out check tracks.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub cameras: CameraSet,
    pub rasters: RasterSet,
    pub tracks: Vec<Track>,
    pub check_tracks: Vec<Track>,
}

impl SceneInputs {
    /// Synthetic scene with zero starting biases.
    pub fn from_synth(scene: &SynthScene) -> Self {
        Self {
            cameras: scene.initial_cameras(),
            rasters: scene.rasters.clone(),
            tracks: scene.tracks.clone(),
            check_tracks: scene.check_tracks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub window: usize,
    pub anchor: u32,
    /// Internal RMSE after every bias adjustment.
    pub internal_rmse_history: Vec<f64>,
    pub internal_rmse_px: f64,
    pub external_rmse_px: Option<f64>,
    pub diverged: usize,
    pub outliers: usize,
    pub outer_iterations: usize,
    pub tracks_total: usize,
    pub tracks_active: usize,
    pub biases: BTreeMap<u32, BiasCorrection>,
    /// Excluded from determinism comparisons.
    pub wall_clock_s: f64,
}

/// A finished run with its final state.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub tracks: Vec<Track>,
    pub cameras: CameraSet,
}

fn triangulate_all(tracks: &mut [Track], cams: &CameraSet) {
    tracks.par_iter_mut().for_each(|t| {
        if !t.active {
            return;
        }
        if t.active_count() < 2 {
            t.active = false;
            return;
        }
        match triangulate(t, cams) {
            Ok(p) => t.ground = Some(p),
            Err(_) => t.active = false,
        }
    });
}

fn ensure_active(tracks: &[Track]) -> Result<()> {
    if tracks.iter().any(|t| t.active) {
        Ok(())
    } else {
        Err(Error::Pipeline("no active tracks remain".into()))
    }
}

fn mark_diverged(track: &mut Track) {
    track.active = false;
    for o in &mut track.observations {
        if o.is_active() {
            o.status = ObsStatus::Diverged;
        }
    }
}

fn adjust(tracks: &mut [Track], cams: &mut CameraSet, anchor: u32, history: &mut Vec<f64>) -> Result<()> {
    ensure_active(tracks)?;
    let cfg = AdjustConfig { anchor: Some(anchor), ..AdjustConfig::default() };
    let res = run_bias_adjustment(tracks, cams, &cfg)?;
    history.push(res.final_rmse_px);
    Ok(())
}

/// Adjust, gate outliers against the corrected geometry, adjust again.
fn adjust_and_filter(tracks: &mut [Track], cams: &mut CameraSet, anchor: u32, threshold: f64, history: &mut Vec<f64>) -> Result<()> {
    adjust(tracks, cams, anchor, history)?;
    filter_outliers(tracks, cams, threshold);
    adjust(tracks, cams, anchor, history)
}

/// Runs `f` with the flagged active tracks temporarily deactivated.
fn without<T>(tracks: &mut [Track], skip: &[bool], f: impl FnOnce(&mut [Track]) -> T) -> T {
    let hidden: Vec<usize> = (0..tracks.len()).filter(|&i| skip[i] && tracks[i].active).collect();
    for &i in &hidden {
        tracks[i].active = false;
    }
    let out = f(tracks);
    for &i in &hidden {
        tracks[i].active = true;
    }
    out
}

fn choose_references(tracks: &mut [Track], rasters: &RasterSet, window: usize) -> Vec<bool> {
    tracks
        .par_iter_mut()
        .map(|t| {
            if !t.active {
                return true;
            }
            if t.reference.is_some() {
                return true;
            }
            match select_reference(t, rasters, window).and_then(|b| t.set_reference(b)) {
                Ok(()) => true,
                Err(_) => false,
            }
        })
        .collect()
}

/// Runs one mode on a scene.
pub fn run(inputs: &SceneInputs, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    if inputs.cameras.len() < 2 {
        return Err(Error::Pipeline(format!("need at least two images, got {}", inputs.cameras.len())));
    }
    if inputs.tracks.is_empty() {
        return Err(Error::Pipeline("no tracks".into()));
    }
    let mut cams = inputs.cameras.clone();
    let mut tracks = inputs.tracks.clone();
    for t in &tracks {
        for o in &t.observations {
            if !cams.contains(o.image) {
                return Err(Error::Integrity { track: t.id, image: o.image });
            }
        }
    }
    let anchor = match cfg.anchor {
        Some(a) if cams.contains(a) => a,
        Some(a) => return Err(Error::ImageSetMismatch(format!("anchor image {a} has no camera"))),
        None => default_anchor(&tracks).ok_or_else(|| Error::Pipeline("no active observations".into()))?,
    };
    let mut history = Vec::new();
    let mut outer_iterations = 0;

    match cfg.mode {
        Mode::Ba => {
            triangulate_all(&mut tracks, &cams);
        }
        Mode::LsmBa => {
            let lsm = cfg.lsm();
            let ok = choose_references(&mut tracks, &inputs.rasters, cfg.window);
            let results: Vec<Option<Track>> = tracks
                .par_iter()
                .zip(ok.par_iter())
                .map(|(t, ok)| {
                    if !t.active {
                        return Some(t.clone());
                    }
                    if !ok {
                        return None;
                    }
                    match refine_track_classic(t, &inputs.rasters, &lsm) {
                        Ok(r) if r.status == LsmStatus::Converged => Some(r.track),
                        _ => None,
                    }
                })
                .collect();
            for (t, r) in tracks.iter_mut().zip(results) {
                match r {
                    Some(refined) => *t = refined,
                    None => mark_diverged(t),
                }
            }
            triangulate_all(&mut tracks, &cams);
        }
        Mode::Unified => {
            triangulate_all(&mut tracks, &cams);
            let lsm = cfg.lsm();
            let mut failed = vec![false; tracks.len()];
            let mut previous: Option<f64> = None;
            for _ in 0..cfg.max_outer {
                outer_iterations += 1;
                // tracks whose last refinement diverged sit out adjustment and gating
                without(&mut tracks, &failed, |t| adjust(t, &mut cams, anchor, &mut history))?;
                let stale: Vec<usize> = (0..tracks.len()).filter(|&i| failed[i] && tracks[i].active).collect();
                for i in stale {
                    match triangulate(&tracks[i], &cams) {
                        Ok(p) => tracks[i].ground = Some(p),
                        Err(_) => mark_diverged(&mut tracks[i]),
                    }
                }
                let rmse = *history.last().expect("adjustment recorded");
                if let Some(prev) = previous {
                    if (prev - rmse).abs() < cfg.outer_tolerance {
                        break;
                    }
                }
                previous = Some(rmse);
                let ok = choose_references(&mut tracks, &inputs.rasters, cfg.window);
                let results: Vec<(bool, Track)> = tracks
                    .par_iter()
                    .zip(ok.par_iter())
                    .map(|(t, ok)| {
                        if !t.active {
                            return (false, t.clone());
                        }
                        if !ok {
                            return (true, t.clone());
                        }
                        match refine_track(t, &cams, &inputs.rasters, &lsm) {
                            Ok(r) if r.status == LsmStatus::Converged => (false, r.track),
                            _ => (true, t.clone()),
                        }
                    })
                    .collect();
                for ((t, f), (diverged, refined)) in tracks.iter_mut().zip(failed.iter_mut()).zip(results) {
                    *f = diverged;
                    *t = refined;
                }
                without(&mut tracks, &failed, |t| filter_outliers(t, &cams, cfg.threshold));
            }
            for (t, f) in tracks.iter_mut().zip(&failed) {
                if *f && t.active {
                    mark_diverged(t);
                }
            }
            if outer_iterations > 0 {
                triangulate_all(&mut tracks, &cams);
            }
        }
    }
    adjust_and_filter(&mut tracks, &mut cams, anchor, cfg.threshold, &mut history)?;

    let internal = internal_rmse(&tracks, &cams)?;
    let external = if inputs.check_tracks.is_empty() { None } else { Some(evaluate_external(&inputs.check_tracks, &cams)?) };
    let diverged = tracks
        .iter()
        .filter(|t| !t.active && t.observations.iter().any(|o| o.status == ObsStatus::Diverged))
        .count();
    let outliers = tracks.iter().flat_map(|t| &t.observations).filter(|o| o.status == ObsStatus::Outlier).count();
    let report = RunReport {
        mode: cfg.mode,
        window: cfg.window,
        anchor,
        internal_rmse_history: history,
        internal_rmse_px: internal,
        external_rmse_px: external,
        diverged,
        outliers,
        outer_iterations,
        tracks_total: tracks.len(),
        tracks_active: tracks.iter().filter(|t| t.active).count(),
        biases: cams.biases(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { report, tracks, cameras: cams })
}

/// Mean ray-count-corrected RMSE of check tracks intersected with `cams`.
pub fn evaluate_external(check_tracks: &[Track], cams: &CameraSet) -> Result<f64> {
    if check_tracks.is_empty() {
        return Err(Error::Evaluation("no check tracks".into()));
    }
    let values = check_tracks
        .par_iter()
        .map(|t| {
            let mut t = t.clone();
            t.ground = None;
            t.ground = Some(triangulate(&t, cams)?);
            Ok(reproj_stats(&t, cams)?.rmse)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// One `(mode, window)` cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub mode: Mode,
    pub window: usize,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub internal_rmse_px: f64,
    pub external_rmse_px: Option<f64>,
    pub diverged: usize,
    pub outliers: usize,
}

impl From<&RunReport> for CellMetrics {
    fn from(r: &RunReport) -> Self {
        Self { internal_rmse_px: r.internal_rmse_px, external_rmse_px: r.external_rmse_px, diverged: r.diverged, outliers: r.outliers }
    }
}

/// Runs every `(mode, window)` cell on identical inputs. The window-independent
/// `ba` mode runs once and fills all of its rows. Failing cells are recorded,
/// never fatal.
pub fn compare_modes(inputs: &SceneInputs, windows: &[usize], modes: &[Mode], base: &PipelineConfig) -> Vec<ComparisonRow> {
    let mut rows = Vec::with_capacity(windows.len() * modes.len());
    for &mode in modes {
        let mut ba_cell: Option<std::result::Result<CellMetrics, String>> = None;
        for &window in windows {
            let cfg = PipelineConfig { mode, window, ..base.clone() };
            let outcome = if mode == Mode::Ba {
                ba_cell
                    .get_or_insert_with(|| run(inputs, &cfg).map(|o| CellMetrics::from(&o.report)).map_err(|e| e.to_string()))
                    .clone()
            } else {
                run(inputs, &cfg).map(|o| CellMetrics::from(&o.report)).map_err(|e| e.to_string())
            };
            rows.push(ComparisonRow { mode, window, outcome });
        }
    }
    rows
}

pub const CSV_HEADER: &str = "mode,window,internal_rmse_px,external_rmse_px,diverged,outliers";

/// CSV rendering with 12 significant digits; failed cells read `error`.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        match &row.outcome {
            Ok(m) => out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.mode,
                row.window,
                format_sig(m.internal_rmse_px),
                m.external_rmse_px.map(format_sig).unwrap_or_default(),
                m.diverged,
                m.outliers
            )),
            Err(_) => out.push_str(&format!("{},{},error,error,error,error\n", row.mode, row.window)),
        }
    }
    out
}
