//! Bias-compensated bundle adjustment: per-image constant offsets and ground
//! points estimated jointly by Levenberg-Marquardt on a Schur-reduced system.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rpc::{BiasCorrection, CameraSet, ImagePoint};
use crate::tracks::{condition3, from_frame, ray_rmse, to_frame, Track, ViewResidual, MAX_CONDITION};

/// Smallest acceptable singular value ratio of the bordered camera system.
const GAUGE_RATIO: f64 = 1e-14;

/// Solver settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustConfig {
    /// Image whose bias is held at its current value; defaults to the image
    /// with the most active observations.
    pub anchor: Option<u32>,
    pub max_iterations: usize,
    /// Converged once every bias update is below this, pixels.
    pub bias_tolerance: f64,
    /// Converged once every ground update is below this, ground-frame units.
    pub ground_tolerance: f64,
    pub initial_lambda: f64,
    /// Consecutive rejected steps tolerated before giving up.
    pub max_rejections: usize,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        Self {
            anchor: None,
            max_iterations: 20,
            bias_tolerance: 1e-4,
            ground_tolerance: 1e-9,
            initial_lambda: 1e-6,
            max_rejections: 3,
        }
    }
}

/// Image with the most active observations over active tracks, lowest id on ties.
pub fn default_anchor(tracks: &[Track]) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for t in tracks.iter().filter(|t| t.active) {
        for o in t.observations.iter().filter(|o| o.is_active()) {
            *counts.entry(o.image).or_default() += 1;
        }
    }
    let mut best: Option<(u32, usize)> = None;
    for (id, n) in counts {
        if best.map_or(true, |(_, m)| n > m) {
            best = Some((id, n));
        }
    }
    best.map(|(id, _)| id)
}

/// Bias direction left undetermined by anchoring a single image.
///
/// Moving every ground point along the anchor's viewing ray leaves the anchor
/// projections fixed and shifts each other image by a nearly constant amount,
/// which the biases absorb. Returns that shift per non-anchor image, scaled to
/// unit total length.
pub fn datum_direction(cams: &CameraSet, anchor: u32) -> Result<BTreeMap<u32, Vector2<f64>>> {
    let cam = cams
        .get(anchor)
        .ok_or_else(|| Error::ImageSetMismatch(format!("anchor image {anchor} has no camera")))?;
    let center = cam.model.ground.center();
    let (_, ja) = cams.project_frame(anchor, &center)?;
    let ray: Vector3<f64> = ja.row(0).transpose().cross(&ja.row(1).transpose());
    let mut dirs = BTreeMap::new();
    for id in cams.ids().filter(|&id| id != anchor) {
        let (_, j) = cams.project_frame(id, &center)?;
        dirs.insert(id, j * ray);
    }
    let norm = dirs.values().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in dirs.values_mut() {
            *v /= norm;
        }
    }
    Ok(dirs)
}

/// Per-track 3x3 block of the normal equations and its coupling to cameras.
#[derive(Debug, Clone)]
pub struct PointBlock {
    pub track: u64,
    pub v: Matrix3<f64>,
    pub rhs: Vector3<f64>,
    /// `(camera index, ∂²/∂b∂u)` for each non-anchor view.
    pub coupling: Vec<(usize, Matrix2x3<f64>)>,
}

/// Gauss-Newton normal equations `H δ = rhs` with `rhs = -Jᵀ r`, split into
/// camera and point blocks. The cameras are the non-anchor images.
#[derive(Debug, Clone)]
pub struct NormalSystem {
    pub cameras: Vec<u32>,
    pub u: Vec<Matrix2<f64>>,
    pub camera_rhs: Vec<Vector2<f64>>,
    pub points: Vec<PointBlock>,
    /// Linear constraint `dᵀ δb = datum_rhs` on the stacked camera updates.
    pub datum: Option<(DVector<f64>, f64)>,
    /// Sum of squared residuals at the linearization point.
    pub cost: f64,
}

/// Update produced by [`solve_schur`].
#[derive(Debug, Clone)]
pub struct Step {
    pub biases: Vec<Vector2<f64>>,
    pub points: Vec<Vector3<f64>>,
}

impl Step {
    fn bias_max(&self) -> f64 {
        self.biases.iter().map(|b| b.amax()).fold(0.0, f64::max)
    }

    fn point_max(&self) -> f64 {
        self.points.iter().map(|p| p.amax()).fold(0.0, f64::max)
    }
}

/// Unknowns of one adjustment problem in solver coordinates.
#[derive(Debug, Clone)]
pub struct AdjustState {
    pub anchor: u32,
    pub cameras: Vec<u32>,
    pub biases: Vec<Vector2<f64>>,
    pub grounds: Vec<Vector3<f64>>,
}

/// Tracks taking part in the adjustment with their fixed corrected rays.
struct Problem {
    ids: Vec<u64>,
    rays: Vec<Vec<(u32, ImagePoint)>>,
    index: Vec<usize>,
}

impl Problem {
    fn new(tracks: &[Track]) -> Self {
        let mut ids = Vec::new();
        let mut rays = Vec::new();
        let mut index = Vec::new();
        for (k, t) in tracks.iter().enumerate() {
            if !t.active {
                continue;
            }
            let r = t.active_points();
            if r.len() < 2 || t.ground.is_none() {
                continue;
            }
            ids.push(t.id);
            rays.push(r);
            index.push(k);
        }
        Self { ids, rays, index }
    }
}

fn apply_state(cams: &CameraSet, state: &AdjustState) -> CameraSet {
    let mut work = cams.clone();
    for (id, b) in state.cameras.iter().zip(&state.biases) {
        work.set_bias(*id, BiasCorrection::new(b[0], b[1]));
    }
    work
}

fn build(problem: &Problem, cams: &CameraSet, state: &AdjustState) -> Result<NormalSystem> {
    let work = apply_state(cams, state);
    let slot: BTreeMap<u32, usize> = state.cameras.iter().enumerate().map(|(k, id)| (*id, k)).collect();
    let blocks = problem
        .rays
        .par_iter()
        .zip(problem.ids.par_iter())
        .zip(state.grounds.par_iter())
        .map(|((rays, id), u)| {
            let p = from_frame(&work, u);
            let mut block = PointBlock {
                track: *id,
                v: Matrix3::zeros(),
                rhs: Vector3::zeros(),
                coupling: Vec::new(),
            };
            let mut cam_terms = Vec::new();
            let mut cost = 0.0;
            for (image, q) in rays {
                let (proj, j) = work.project_frame(*image, &p)?;
                // r = q - proj(u, b) with proj = f(u) - b; dr/du = -J, dr/db = +I
                let r = Vector2::new(q.x - proj.x, q.y - proj.y);
                cost += r.norm_squared();
                block.v += j.transpose() * j;
                block.rhs += j.transpose() * r;
                if let Some(&c) = slot.get(image) {
                    block.coupling.push((c, -j));
                    cam_terms.push((c, -r));
                }
            }
            Ok((block, cam_terms, cost))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = state.cameras.len();
    let mut u = vec![Matrix2::zeros(); m];
    let mut camera_rhs = vec![Vector2::zeros(); m];
    let mut points = Vec::with_capacity(blocks.len());
    let mut cost = 0.0;
    for (block, terms, c) in blocks {
        for (k, r) in terms {
            u[k] += Matrix2::identity();
            camera_rhs[k] += r;
        }
        cost += c;
        points.push(block);
    }
    Ok(NormalSystem { cameras: state.cameras.clone(), u, camera_rhs, points, datum: None, cost })
}

fn datum_row(cams: &CameraSet, state: &AdjustState) -> Result<(DVector<f64>, f64)> {
    let dirs = datum_direction(cams, state.anchor)?;
    let mut d = DVector::zeros(2 * state.cameras.len());
    for (k, id) in state.cameras.iter().enumerate() {
        if let Some(g) = dirs.get(id) {
            d[2 * k] = g[0];
            d[2 * k + 1] = g[1];
        }
    }
    let norm = d.norm();
    if norm > 0.0 {
        d /= norm;
    }
    let current: f64 = state
        .biases
        .iter()
        .enumerate()
        .map(|(k, b)| d[2 * k] * b[0] + d[2 * k + 1] * b[1])
        .sum();
    Ok((d, -current))
}

fn damp2(m: &Matrix2<f64>, lambda: f64) -> Matrix2<f64> {
    let mut out = *m;
    for k in 0..2 {
        out[(k, k)] += lambda * m[(k, k)];
    }
    out
}

fn damp3(m: &Matrix3<f64>, lambda: f64) -> Matrix3<f64> {
    let mut out = *m;
    for k in 0..3 {
        out[(k, k)] += lambda * m[(k, k)];
    }
    out
}

/// Solves the normal equations by eliminating the point blocks, solving the
/// reduced camera system (bordered by the datum constraint when present) and
/// back-substituting. `lambda` scales the Marquardt diagonal damping.
pub fn solve_schur(system: &NormalSystem, lambda: f64) -> Result<Step> {
    let m = system.cameras.len();
    let n = 2 * m;
    let mut s = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for k in 0..m {
        let uk = damp2(&system.u[k], lambda);
        s.fixed_view_mut::<2, 2>(2 * k, 2 * k).copy_from(&uk);
        rhs.fixed_rows_mut::<2>(2 * k).copy_from(&system.camera_rhs[k]);
    }
    let mut inverses = Vec::with_capacity(system.points.len());
    for block in &system.points {
        let condition = condition3(&block.v);
        if condition > MAX_CONDITION {
            return Err(Error::DegenerateGeometry { track: block.track, condition });
        }
        let vinv = damp3(&block.v, lambda)
            .try_inverse()
            .ok_or(Error::DegenerateGeometry { track: block.track, condition: f64::INFINITY })?;
        let vr = vinv * block.rhs;
        for &(a, wa) in &block.coupling {
            let wv = wa * vinv;
            let mut ra = rhs.fixed_rows_mut::<2>(2 * a);
            ra -= wv * block.rhs;
            for &(b, wb) in &block.coupling {
                let mut sab = s.fixed_view_mut::<2, 2>(2 * a, 2 * b);
                sab -= wv * wb.transpose();
            }
        }
        inverses.push((vinv, vr));
    }
    let db = if n == 0 {
        DVector::zeros(0)
    } else {
        match &system.datum {
            Some((d, c)) => {
                let mut a = DMatrix::zeros(n + 1, n + 1);
                a.view_mut((0, 0), (n, n)).copy_from(&s);
                for i in 0..n {
                    a[(i, n)] = d[i];
                    a[(n, i)] = d[i];
                }
                let mut b = DVector::zeros(n + 1);
                b.rows_mut(0, n).copy_from(&rhs);
                b[n] = *c;
                solve_checked(a, b)?.rows(0, n).into_owned()
            }
            None => solve_checked(s, rhs)?,
        }
    };
    let biases: Vec<Vector2<f64>> = (0..m).map(|k| Vector2::new(db[2 * k], db[2 * k + 1])).collect();
    let points = system
        .points
        .iter()
        .zip(&inverses)
        .map(|(block, (vinv, _))| {
            let mut r = block.rhs;
            for &(a, wa) in &block.coupling {
                r -= wa.transpose() * biases[a];
            }
            vinv * r
        })
        .collect();
    Ok(Step { biases, points })
}

fn solve_checked(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || !(min / max >= GAUGE_RATIO) {
        return Err(Error::Gauge);
    }
    a.lu().solve(&b).ok_or(Error::Gauge)
}

/// Outcome of one bias adjustment.
#[derive(Debug, Clone, Serialize)]
pub struct AdjustResult {
    pub anchor: u32,
    pub biases: BTreeMap<u32, BiasCorrection>,
    pub iterations: usize,
    pub converged: bool,
    /// Cost (sum of squared residuals) after every accepted iteration, starting
    /// with the initial state.
    pub costs: Vec<f64>,
    pub initial_rmse_px: f64,
    pub final_rmse_px: f64,
    pub tracks_used: usize,
}

/// Mean per-track ray-count-corrected RMSE over active tracks with a ground point.
pub fn internal_rmse(tracks: &[Track], cams: &CameraSet) -> Result<f64> {
    let values = tracks
        .par_iter()
        .filter(|t| t.active && t.ground.is_some() && t.active_count() >= 2)
        .map(|t| track_rmse(t, cams))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::EmptySystem);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn track_rmse(track: &Track, cams: &CameraSet) -> Result<f64> {
    let ground = track.ground.expect("filtered on ground");
    let residuals = track
        .active_points()
        .into_iter()
        .map(|(image, q)| {
            let p = cams.project(image, &ground)?;
            Ok(ViewResidual { image, dx: q.x - p.x, dy: q.y - p.y })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ray_rmse(&residuals))
}

fn cost_of(problem: &Problem, cams: &CameraSet, state: &AdjustState) -> Result<f64> {
    let work = apply_state(cams, state);
    let costs = problem
        .rays
        .par_iter()
        .zip(state.grounds.par_iter())
        .map(|(rays, u)| {
            let p = from_frame(&work, u);
            let mut c = 0.0;
            for (image, q) in rays {
                let proj = work.project(*image, &p)?;
                c += (q.x - proj.x).powi(2) + (q.y - proj.y).powi(2);
            }
            Ok(c)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(costs.iter().sum())
}

fn apply_step(state: &AdjustState, step: &Step) -> AdjustState {
    let mut next = state.clone();
    for (b, d) in next.biases.iter_mut().zip(&step.biases) {
        *b += d;
    }
    for (u, d) in next.grounds.iter_mut().zip(&step.points) {
        *u += d;
    }
    next
}

/// Builds the normal equations for the current tracks and biases, including
/// the datum constraint. Tracks need a ground point to take part.
pub fn build_system(tracks: &[Track], cams: &CameraSet, anchor: u32) -> Result<(NormalSystem, AdjustState)> {
    let problem = Problem::new(tracks);
    let state = initial_state(&problem, tracks, cams, anchor)?;
    let mut system = build(&problem, cams, &state)?;
    system.datum = Some(datum_row(cams, &state)?);
    Ok((system, state))
}

fn initial_state(problem: &Problem, tracks: &[Track], cams: &CameraSet, anchor: u32) -> Result<AdjustState> {
    if !cams.contains(anchor) {
        return Err(Error::ImageSetMismatch(format!("anchor image {anchor} has no camera")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for rays in &problem.rays {
        for (image, _) in rays {
            if !cams.contains(*image) {
                return Err(Error::ImageSetMismatch(format!("no camera for image {image}")));
            }
            if *image != anchor {
                seen.insert(*image);
            }
        }
    }
    let cameras: Vec<u32> = seen.into_iter().collect();
    let biases = cameras
        .iter()
        .map(|id| {
            let b = cams.bias(*id);
            Vector2::new(b.x0, b.y0)
        })
        .collect();
    let grounds = problem
        .index
        .iter()
        .map(|&k| to_frame(cams, tracks[k].ground.as_ref().expect("filtered on ground")))
        .collect();
    Ok(AdjustState { anchor, cameras, biases, grounds })
}

/// Estimates per-image biases and ground points jointly. Tracks that are
/// active, have at least two active rays and a ground point take part; their
/// ground points and `cams` biases are updated in place.
pub fn run_bias_adjustment(tracks: &mut [Track], cams: &mut CameraSet, config: &AdjustConfig) -> Result<AdjustResult> {
    let problem = Problem::new(tracks);
    if problem.ids.is_empty() {
        return Err(Error::EmptySystem);
    }
    let anchor = match config.anchor {
        Some(a) => a,
        None => default_anchor(tracks).ok_or(Error::EmptySystem)?,
    };
    let mut state = initial_state(&problem, tracks, cams, anchor)?;
    let initial_rmse_px = internal_rmse(tracks, cams)?;
    let mut lambda = config.initial_lambda;
    let mut system = build(&problem, cams, &state)?;
    let mut costs = vec![system.cost];
    let mut iterations = 0;
    let mut converged = false;
    let mut rejections = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        system.datum = Some(datum_row(cams, &state)?);
        let step = solve_schur(&system, lambda)?;
        let small = step.bias_max() < config.bias_tolerance && step.point_max() < config.ground_tolerance;
        let trial = apply_step(&state, &step);
        if small {
            state = trial;
            system = build(&problem, cams, &state)?;
            costs.push(system.cost);
            converged = true;
            break;
        }
        let cost = cost_of(&problem, cams, &trial).unwrap_or(f64::INFINITY);
        if cost <= system.cost * (1.0 + 1e-12) {
            let decrease = system.cost - cost;
            state = trial;
            system = build(&problem, cams, &state)?;
            costs.push(system.cost);
            lambda = (lambda * 0.1).max(1e-12);
            rejections = 0;
            if decrease <= 1e-14 * system.cost.max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        } else if (cost - system.cost).abs() <= 1e-10 * system.cost {
            // no measurable change left: the solver sits at the minimum
            converged = true;
            break;
        } else {
            lambda *= 10.0;
            rejections += 1;
            if rejections >= config.max_rejections {
                return Err(Error::AdjustmentDiverged { iteration: iterations });
            }
        }
    }
    for (id, b) in state.cameras.iter().zip(&state.biases) {
        cams.set_bias(*id, BiasCorrection::new(b[0], b[1]));
    }
    for (&k, u) in problem.index.iter().zip(&state.grounds) {
        tracks[k].ground = Some(from_frame(cams, u));
    }
    let final_rmse_px = internal_rmse(tracks, cams)?;
    Ok(AdjustResult {
        anchor,
        biases: cams.biases(),
        iterations,
        converged,
        costs,
        initial_rmse_px,
        final_rmse_px,
        tracks_used: problem.ids.len(),
    })
}
