//! Multi-view matches: image-coordinate corrections, triangulation,
//! reprojection statistics, reference-image selection and outlier gating.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{zncc, MatchWindow, RasterSet};
use crate::rpc::{CameraSet, GroundPoint, ImagePoint, NormalizedGround};

/// Largest acceptable condition number of a 3x3 ray-intersection system.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsStatus {
    Active,
    Diverged,
    Outlier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ingested,
    Synthetic,
}

/// Affine image-coordinate correction evaluated at reference-image coordinates:
/// `Δx = a0 + a1·x_b + a2·y_b`, `Δy = b0 + b1·x_b + b2·y_b`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineCorrection {
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl AffineCorrection {
    /// Starting values `{-x_b, 1, 0}` and `{-y_b, 0, 1}`: zero correction at the
    /// reference point, identity warp around it.
    pub fn initial(reference: &ImagePoint) -> Self {
        Self {
            a: [-reference.x, 1.0, 0.0],
            b: [-reference.y, 0.0, 1.0],
        }
    }

    /// `(Δx, Δy)` evaluated at reference-image coordinates `p`.
    pub fn offset_at(&self, p: &ImagePoint) -> (f64, f64) {
        (
            self.a[0] + self.a[1] * p.x + self.a[2] * p.y,
            self.b[0] + self.b[1] * p.x + self.b[2] * p.y,
        )
    }
}

/// One measurement of a track in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: u32,
    /// Measured coordinates, never modified by refinement.
    pub point: ImagePoint,
    pub affine: AffineCorrection,
    /// Radiometric offset.
    pub h0: f64,
    /// Radiometric gain.
    pub h1: f64,
    pub status: ObsStatus,
}

impl Observation {
    pub fn new(image: u32, point: ImagePoint) -> Self {
        Self {
            image,
            point,
            affine: AffineCorrection::default(),
            h0: 0.0,
            h1: 1.0,
            status: ObsStatus::Active,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == ObsStatus::Active
    }
}

/// Measured point plus its affine correction, evaluated at the reference
/// observation's coordinates. The reference observation is returned unchanged.
pub fn corrected_point(obs: &Observation, reference: &Observation) -> ImagePoint {
    if obs.image == reference.image {
        return obs.point;
    }
    let (dx, dy) = obs.affine.offset_at(&reference.point);
    ImagePoint::new(obs.point.x + dx, obs.point.y + dy)
}

/// One object point with its observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub observations: Vec<Observation>,
    /// Reference image `b`; its observation is never corrected.
    pub reference: Option<u32>,
    pub ground: Option<GroundPoint>,
    pub provenance: Provenance,
    pub active: bool,
}

impl Track {
    pub fn new(id: u64, observations: Vec<Observation>) -> Self {
        Self {
            id,
            observations,
            reference: None,
            ground: None,
            provenance: Provenance::Ingested,
            active: true,
        }
    }

    pub fn active_count(&self) -> usize {
        self.observations.iter().filter(|o| o.is_active()).count()
    }

    pub fn observation(&self, image: u32) -> Option<&Observation> {
        self.observations.iter().find(|o| o.image == image)
    }

    pub fn reference_observation(&self) -> Option<&Observation> {
        self.reference.and_then(|b| self.observation(b))
    }

    /// Sets the reference image and reinitializes every affine correction.
    pub fn set_reference(&mut self, image: u32) -> Result<()> {
        let reference = self
            .observation(image)
            .ok_or(Error::Integrity { track: self.id, image })?
            .point;
        for obs in &mut self.observations {
            obs.affine = AffineCorrection::initial(&reference);
            obs.h0 = 0.0;
            obs.h1 = 1.0;
        }
        self.reference = Some(image);
        Ok(())
    }

    /// Corrected coordinates of observation `idx`.
    pub fn corrected(&self, idx: usize) -> ImagePoint {
        let obs = &self.observations[idx];
        match self.reference_observation() {
            Some(r) => corrected_point(obs, r),
            None => obs.point,
        }
    }

    /// `(image, corrected point)` for every active observation.
    pub fn active_points(&self) -> Vec<(u32, ImagePoint)> {
        self.observations
            .iter()
            .enumerate()
            .filter(|(_, o)| o.is_active())
            .map(|(i, o)| (o.image, self.corrected(i)))
            .collect()
    }
}

/// Per-view reprojection residual, pixels (corrected point minus projection).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewResidual {
    pub image: u32,
    pub dx: f64,
    pub dy: f64,
}

impl ViewResidual {
    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Reprojection statistics of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojStats {
    pub residuals: Vec<ViewResidual>,
    /// Number of rays.
    pub n: usize,
    /// `sqrt(Σ (dx² + dy²) / (n − 1.5))`, pixels.
    pub rmse: f64,
}

/// Ray-count-corrected RMSE of a set of residuals.
pub fn ray_rmse(residuals: &[ViewResidual]) -> f64 {
    let n = residuals.len() as f64;
    let sum: f64 = residuals.iter().map(|r| r.dx * r.dx + r.dy * r.dy).sum();
    (sum / (n - 1.5)).sqrt()
}

/// Converts a ground point to ground-frame coordinates.
pub(crate) fn to_frame(cams: &CameraSet, p: &GroundPoint) -> Vector3<f64> {
    let g = cams.frame().normalize(p);
    Vector3::new(g.p, g.l, g.h)
}

pub(crate) fn from_frame(cams: &CameraSet, u: &Vector3<f64>) -> GroundPoint {
    cams.frame().denormalize(&NormalizedGround::new(u[0], u[1], u[2]))
}

/// Condition number of a symmetric positive semidefinite 3x3 matrix.
pub(crate) fn condition3(m: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Result of a triangulation with its per-iteration cost history.
#[derive(Debug, Clone)]
pub struct Triangulation {
    pub point: GroundPoint,
    pub iterations: usize,
    /// Sum of squared pixel residuals, starting with the initial guess.
    pub costs: Vec<f64>,
}

fn ray_system(
    cams: &CameraSet,
    rays: &[(u32, ImagePoint)],
    u: &Vector3<f64>,
) -> Result<(Matrix3<f64>, Vector3<f64>, f64)> {
    let p = from_frame(cams, u);
    let mut h = Matrix3::zeros();
    let mut g = Vector3::zeros();
    let mut cost = 0.0;
    for (image, q) in rays {
        let (proj, j) = cams.project_frame(*image, &p)?;
        // residual r = q - proj(u); dr/du = -J
        let r = nalgebra::Vector2::new(q.x - proj.x, q.y - proj.y);
        h += j.transpose() * j;
        g -= j.transpose() * r;
        cost += r.norm_squared();
    }
    Ok((h, g, cost))
}

fn ray_cost(cams: &CameraSet, rays: &[(u32, ImagePoint)], u: &Vector3<f64>) -> Result<f64> {
    let p = from_frame(cams, u);
    let mut cost = 0.0;
    for (image, q) in rays {
        let proj = cams.project(*image, &p)?;
        cost += (q.x - proj.x).powi(2) + (q.y - proj.y).powi(2);
    }
    Ok(cost)
}

/// Intersects rays `(image, point)` by damped Gauss-Newton in ground-frame
/// coordinates, starting from `start` or, when absent, from a backward
/// projection of the first ray at mid height.
pub fn intersect_rays(
    track_id: u64,
    cams: &CameraSet,
    rays: &[(u32, ImagePoint)],
    start: Option<GroundPoint>,
) -> Result<Triangulation> {
    const MAX_ITER: usize = 20;
    const STEP_TOL: f64 = 1e-10;

    if rays.len() < 2 {
        return Err(Error::Underdetermined { track: track_id, active: rays.len() });
    }
    let start = match start {
        Some(p) => p,
        None => {
            let (image, q) = rays[0];
            let cam = cams
                .get(image)
                .ok_or(Error::Integrity { track: track_id, image })?;
            cam.model.backward_project(&cam.bias, &q, cam.model.ground.h_off)?
        }
    };
    let mut u = to_frame(cams, &start);
    let (mut h, mut g, mut cost) = ray_system(cams, rays, &u)?;
    let condition = condition3(&h);
    if condition > MAX_CONDITION {
        return Err(Error::DegenerateGeometry { track: track_id, condition });
    }
    let mut costs = vec![cost];
    let mut lambda = 0.0;
    let mut iterations = 0;
    for _ in 0..MAX_ITER {
        iterations += 1;
        let mut accepted = None;
        for _ in 0..12 {
            let mut a = h;
            for k in 0..3 {
                a[(k, k)] += lambda * h[(k, k)];
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-g))) else {
                lambda = (lambda * 10.0).max(1e-6);
                continue;
            };
            let trial = u + step;
            match ray_cost(cams, rays, &trial) {
                Ok(c) if c <= cost => {
                    accepted = Some((trial, step, c));
                    break;
                }
                _ => lambda = (lambda * 10.0).max(1e-6),
            }
        }
        let Some((trial, step, c)) = accepted else { break };
        u = trial;
        cost = c;
        costs.push(cost);
        lambda *= 0.1;
        if step.amax() < STEP_TOL {
            break;
        }
        (h, g, _) = ray_system(cams, rays, &u)?;
    }
    let (h, _, _) = ray_system(cams, rays, &u)?;
    let condition = condition3(&h);
    if condition > MAX_CONDITION {
        return Err(Error::DegenerateGeometry { track: track_id, condition });
    }
    let point = from_frame(cams, &u);
    if !point.is_finite() {
        return Err(Error::DegenerateGeometry { track: track_id, condition: f64::INFINITY });
    }
    Ok(Triangulation { point, iterations, costs })
}

/// Intersects the corrected active observations of a track.
pub fn triangulate(track: &Track, cams: &CameraSet) -> Result<GroundPoint> {
    triangulate_detailed(track, cams).map(|t| t.point)
}

pub fn triangulate_detailed(track: &Track, cams: &CameraSet) -> Result<Triangulation> {
    intersect_rays(track.id, cams, &track.active_points(), track.ground)
}

/// Reprojection residuals of the active observations against the track's ground point.
pub fn reproj_stats(track: &Track, cams: &CameraSet) -> Result<ReprojStats> {
    let rays = track.active_points();
    if rays.len() < 2 {
        return Err(Error::Underdetermined { track: track.id, active: rays.len() });
    }
    let ground = track
        .ground
        .ok_or_else(|| Error::Validation(format!("track {} has not been triangulated", track.id)))?;
    let residuals = rays
        .iter()
        .map(|(image, q)| {
            let p = cams.project(*image, &ground)?;
            Ok(ViewResidual { image: *image, dx: q.x - p.x, dy: q.y - p.y })
        })
        .collect::<Result<Vec<_>>>()?;
    let rmse = ray_rmse(&residuals);
    Ok(ReprojStats { n: residuals.len(), residuals, rmse })
}

/// Picks the image whose windows correlate best with the rest of the track.
///
/// Every pair of active observations contributes its ZNCC to both images'
/// totals; pairs with a flat window are skipped. Ties go to the lowest id.
pub fn select_reference(track: &Track, rasters: &RasterSet, window: usize) -> Result<u32> {
    let mut obs: Vec<&Observation> = track.observations.iter().filter(|o| o.is_active()).collect();
    if obs.len() < 2 {
        return Err(Error::Underdetermined { track: track.id, active: obs.len() });
    }
    obs.sort_by_key(|o| o.image);
    let windows = obs
        .iter()
        .map(|o| {
            let raster = rasters
                .get(o.image)
                .ok_or(Error::Integrity { track: track.id, image: o.image })?;
            MatchWindow::extract(raster, o.point, window)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut totals = vec![0.0; obs.len()];
    let mut any = false;
    for i in 0..obs.len() {
        for j in (i + 1)..obs.len() {
            if let Ok(score) = zncc(&windows[i], &windows[j]) {
                totals[i] += score;
                totals[j] += score;
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::Selection { track: track.id });
    }
    let mut best = 0;
    for k in 1..obs.len() {
        if totals[k] > totals[best] {
            best = k;
        }
    }
    Ok(obs[best].image)
}

/// Flags observations whose reprojection residual exceeds `threshold` pixels.
///
/// Each track is re-intersected and its worst view above the threshold is
/// marked as an outlier, repeating until every remaining view passes. Tracks
/// left with fewer than two rays, or whose geometry degenerates, are
/// deactivated. Returns the number of flagged observations.
pub fn filter_outliers(tracks: &mut [Track], cams: &CameraSet, threshold: f64) -> usize {
    tracks
        .par_iter_mut()
        .map(|track| filter_track(track, cams, threshold))
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

fn filter_track(track: &mut Track, cams: &CameraSet, threshold: f64) -> usize {
    if !track.active {
        return 0;
    }
    let mut flagged = 0;
    loop {
        if track.active_count() < 2 {
            track.active = false;
            return flagged;
        }
        match triangulate(track, cams) {
            Ok(p) => track.ground = Some(p),
            Err(_) => {
                track.active = false;
                return flagged;
            }
        }
        let Ok(stats) = reproj_stats(track, cams) else {
            track.active = false;
            return flagged;
        };
        let worst = stats
            .residuals
            .iter()
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .copied()
            .expect("at least two residuals");
        if !(worst.norm() > threshold) {
            return flagged;
        }
        if let Some(obs) = track.observations.iter_mut().find(|o| o.image == worst.image) {
            obs.status = ObsStatus::Outlier;
        }
        flagged += 1;
    }
}
