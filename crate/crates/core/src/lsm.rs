//! Per-track least-squares matching refinement.
//!
//! Each non-reference observation carries an affine image-coordinate
//! correction and a radiometric offset/gain. The unified refinement adds
//! geometric rows tying corrected points to the projection of a free ground
//! point and a virtual ground control point holding that point near its
//! adjusted position; the classic refinement uses photo-consistency only.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, SMatrix, SVector, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::{is_flat, mean_and_std, window_offsets, zncc_samples, ImageRaster, RasterSet};
use crate::rpc::{BiasCorrection, CameraSet, GroundPoint, ImagePoint, RpcModel};
use crate::tracks::{from_frame, reproj_stats, to_frame, AffineCorrection, ObsStatus, Observation, Track};

/// Weight strategy settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct WeightConfig {
    /// Maximum-weight factor.
    pub p: f64,
    /// Reprojection-error attenuation, pixels squared.
    pub sigma: f64,
    /// Window size, odd pixels.
    pub window: usize,
}

impl WeightConfig {
    pub fn new(window: usize) -> Self {
        Self { p: 0.5, sigma: 2.0, window }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0) || !(self.sigma > 0.0) || !self.p.is_finite() || !self.sigma.is_finite() {
            return Err(Error::Validation(format!("weight factors must be positive, got P={} sigma={}", self.p, self.sigma)));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Validation(format!("window size must be odd and >= 3, got {}", self.window)));
        }
        Ok(())
    }
}

/// Weights of one track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightSet {
    pub w_max: f64,
    pub w_reproj: f64,
    pub w_vgcp: f64,
    pub epsilon: f64,
    pub n: usize,
}

/// Weights for reprojection RMSE `epsilon` over `n` rays.
pub fn weights_for(epsilon: f64, n: usize, cfg: &WeightConfig) -> WeightSet {
    let w = cfg.window as f64;
    let w_max = cfg.p * w * w * (n as f64 - 1.0) / 2.0;
    let w_reproj = w_max * (-epsilon * epsilon / cfg.sigma).exp();
    WeightSet { w_max, w_reproj, w_vgcp: w_max - w_reproj, epsilon, n }
}

pub fn compute_weights(stats: &crate::tracks::ReprojStats, cfg: &WeightConfig) -> WeightSet {
    weights_for(stats.rmse, stats.n, cfg)
}

/// Image position sampled for window offset `delta` of observation `point`:
/// `point + Δ(reference + delta)`.
pub fn warp_position(point: &ImagePoint, reference: &ImagePoint, delta: (f64, f64), affine: &AffineCorrection) -> ImagePoint {
    let (dx, dy) = affine.offset_at(&ImagePoint::new(reference.x + delta.0, reference.y + delta.1));
    ImagePoint::new(point.x + dx, point.y + dy)
}

/// Photo-consistency residual `I_b(P_b + δ) − h0 − h1·I_j(P_j + Δ(P_b + δ))`.
pub fn photometric_residual(
    reference_value: f64,
    image: &ImageRaster,
    obs: &Observation,
    reference: &ImagePoint,
    delta: (f64, f64),
) -> Result<f64> {
    let q = warp_position(&obs.point, reference, delta, &obs.affine);
    Ok(reference_value - obs.h0 - obs.h1 * image.sample_bilinear(&q)?)
}

/// Partials of [`photometric_residual`] with respect to
/// `[a0, a1, a2, b0, b1, b2, h0, h1]`.
pub fn photometric_partials(
    image: &ImageRaster,
    obs: &Observation,
    reference: &ImagePoint,
    delta: (f64, f64),
) -> Result<[f64; 8]> {
    let q = warp_position(&obs.point, reference, delta, &obs.affine);
    let (value, gx, gy) = image.sample_with_gradient(&q)?;
    let (x, y) = (reference.x + delta.0, reference.y + delta.1);
    let h1 = obs.h1;
    Ok([-h1 * gx, -h1 * gx * x, -h1 * gx * y, -h1 * gy, -h1 * gy * x, -h1 * gy * y, -1.0, -value])
}

/// Geometric residual `(x_j + Δx(P_b)) − R̄_x(ground) + x0` and its `y`
/// analogue: corrected point minus biased projection.
pub fn geometric_residual(
    model: &RpcModel,
    bias: &BiasCorrection,
    ground: &GroundPoint,
    obs: &Observation,
    reference: &ImagePoint,
) -> Result<(f64, f64)> {
    let p = model.forward_project(bias, ground)?;
    let (dx, dy) = obs.affine.offset_at(reference);
    Ok((obs.point.x + dx - p.x, obs.point.y + dy - p.y))
}

/// Partials of [`geometric_residual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricPartials {
    /// With respect to `(x0, y0)`.
    pub bias: Matrix2<f64>,
    /// With respect to `(lat, lon, h)` in degrees, degrees, metres.
    pub ground: Matrix2x3<f64>,
    /// With respect to `[a0, a1, a2, b0, b1, b2]`.
    pub affine: SMatrix<f64, 2, 6>,
}

pub fn geometric_partials(model: &RpcModel, bias: &BiasCorrection, ground: &GroundPoint, reference: &ImagePoint) -> Result<GeometricPartials> {
    let (_, j) = model.project_with_jacobian(bias, ground)?;
    let mut affine = SMatrix::<f64, 2, 6>::zeros();
    affine[(0, 0)] = 1.0;
    affine[(0, 1)] = reference.x;
    affine[(0, 2)] = reference.y;
    affine[(1, 3)] = 1.0;
    affine[(1, 4)] = reference.x;
    affine[(1, 5)] = reference.y;
    Ok(GeometricPartials { bias: Matrix2::identity(), ground: -j, affine })
}

/// Refinement settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LsmConfig {
    pub weights: WeightConfig,
    pub max_iterations: usize,
    /// Converged once every corrected point moves less than this, pixels.
    pub shift_tolerance: f64,
    /// Consecutive mean-ZNCC decreases tolerated before declaring divergence.
    pub zncc_patience: usize,
    /// Replaces the computed geometric weight.
    pub reproj_weight: Option<f64>,
    /// Holds the ground point fixed.
    pub pin_ground: bool,
}

impl LsmConfig {
    pub fn new(window: usize) -> Self {
        Self {
            weights: WeightConfig::new(window),
            max_iterations: 30,
            shift_tolerance: 0.01,
            zncc_patience: 3,
            reproj_weight: None,
            pin_ground: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LsmStatus {
    Converged,
    Diverged,
}

/// Why a refinement was abandoned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceReason {
    /// Reference window unavailable, flat or outside its raster.
    Reference,
    /// No matching window could be formed.
    NoViews,
    /// A warped sample left the raster.
    Sampling,
    /// Mean correlation decreased too many times in a row.
    Correlation,
    /// Normal matrix not positive definite.
    Singular,
    /// Travelled farther than the window size or the gain turned non-positive.
    Runaway,
    IterationCap,
    /// Fewer than two active observations remain.
    TooFewViews,
}

/// Outcome of one track refinement. A diverged result carries the input track unchanged.
#[derive(Debug, Clone)]
pub struct LsmResult {
    pub status: LsmStatus,
    pub reason: Option<DivergenceReason>,
    pub iterations: usize,
    pub track: Track,
    pub zncc_before: f64,
    pub zncc_after: f64,
    pub weights: Option<WeightSet>,
    /// Unknown vector after every iteration: per non-reference view
    /// `[cx, a1, a2, cy, b1, b2, h0, h1]` with `cx`, `cy` the correction at the
    /// reference point, followed by the ground-frame point when it is free.
    pub trajectory: Vec<Vec<f64>>,
}

impl LsmResult {
    fn diverged(reason: DivergenceReason, track: &Track, iterations: usize, zncc_before: f64, weights: Option<WeightSet>, trajectory: Vec<Vec<f64>>) -> Self {
        Self {
            status: LsmStatus::Diverged,
            reason: Some(reason),
            iterations,
            track: track.clone(),
            zncc_before,
            zncc_after: zncc_before,
            weights,
            trajectory,
        }
    }
}

const PARAMS: usize = 8;

struct View<'a> {
    obs_index: usize,
    raster: &'a ImageRaster,
    point: ImagePoint,
    mean: f64,
    std: f64,
    theta: [f64; PARAMS],
    travelled: f64,
}

impl View<'_> {
    fn position(&self, delta: (f64, f64)) -> ImagePoint {
        let t = &self.theta;
        ImagePoint::new(
            self.point.x + t[0] + t[1] * delta.0 + t[2] * delta.1,
            self.point.y + t[3] + t[4] * delta.0 + t[5] * delta.1,
        )
    }

    /// Normalized intensity and gradient at window offset `delta`.
    fn sample(&self, delta: (f64, f64)) -> Result<(f64, f64, f64)> {
        let (v, gx, gy) = self.raster.sample_with_gradient(&self.position(delta))?;
        Ok(((v - self.mean) / self.std, gx / self.std, gy / self.std))
    }
}

/// Geometry used by the unified refinement.
struct Geometry<'a> {
    cams: &'a CameraSet,
    weights: WeightSet,
    w_reproj: f64,
    target: Vector3<f64>,
    /// Pixel-equivalent scale of each ground-frame axis.
    scale: Vector3<f64>,
    /// Active reference-image ray, pinned.
    reference_image: u32,
    reference_point: ImagePoint,
}

/// Unified refinement: photo-consistency, weighted geometric rows and the
/// virtual ground control point. The track must have a reference image and a
/// ground point consistent with `cams`.
pub fn refine_track(track: &Track, cams: &CameraSet, rasters: &RasterSet, cfg: &LsmConfig) -> Result<LsmResult> {
    cfg.weights.validate()?;
    let ground = track
        .ground
        .ok_or_else(|| Error::Validation(format!("track {} has not been triangulated", track.id)))?;
    let stats = reproj_stats(track, cams)?;
    let weights = compute_weights(&stats, &cfg.weights);
    let target = to_frame(cams, &ground);
    let mut sq = Vector3::zeros();
    let rays = track.active_points();
    for (image, _) in &rays {
        let (_, j) = cams.project_frame(*image, &ground)?;
        for k in 0..3 {
            sq[k] += j[(0, k)].powi(2) + j[(1, k)].powi(2);
        }
    }
    let scale = (sq / rays.len() as f64).map(f64::sqrt);
    let reference = track
        .reference_observation()
        .ok_or_else(|| Error::Validation(format!("track {} has no reference image", track.id)))?;
    let geometry = Geometry {
        cams,
        weights,
        w_reproj: cfg.reproj_weight.unwrap_or(weights.w_reproj),
        target,
        scale,
        reference_image: reference.image,
        reference_point: reference.point,
    };
    refine(track, rasters, cfg, Some(geometry))
}

/// Classic least-squares matching: photo-consistency rows only.
pub fn refine_track_classic(track: &Track, rasters: &RasterSet, cfg: &LsmConfig) -> Result<LsmResult> {
    cfg.weights.validate()?;
    refine(track, rasters, cfg, None)
}

fn mean_zncc(values: &[Vec<f64>], reference: &[f64]) -> f64 {
    let scores: Vec<f64> = values.iter().filter_map(|v| zncc_samples(reference, v).ok()).collect();
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn refine(track: &Track, rasters: &RasterSet, cfg: &LsmConfig, geometry: Option<Geometry>) -> Result<LsmResult> {
    let b = track
        .reference
        .ok_or_else(|| Error::Validation(format!("track {} has no reference image", track.id)))?;
    let ref_obs = track.observation(b).ok_or(Error::Integrity { track: track.id, image: b })?;
    let raster_of = |image: u32| rasters.get(image).ok_or(Error::Integrity { track: track.id, image });
    let weights = geometry.as_ref().map(|g| g.weights);
    let window = cfg.weights.window;
    let offsets = window_offsets(window);
    let xb = ref_obs.point;

    if !ref_obs.is_active() {
        return Ok(LsmResult::diverged(DivergenceReason::Reference, track, 0, f64::NAN, weights, Vec::new()));
    }
    let ref_raster = raster_of(b)?;
    let ref_raw: Option<Vec<f64>> = offsets
        .iter()
        .map(|d| ref_raster.sample_bilinear(&ImagePoint::new(xb.x + d.0, xb.y + d.1)).ok())
        .collect();
    let Some(ref_raw) = ref_raw else {
        return Ok(LsmResult::diverged(DivergenceReason::Reference, track, 0, f64::NAN, weights, Vec::new()));
    };
    let (rm, rs) = mean_and_std(&ref_raw);
    if is_flat(&ref_raw, rm, rs) {
        return Ok(LsmResult::diverged(DivergenceReason::Reference, track, 0, f64::NAN, weights, Vec::new()));
    }
    let reference: Vec<f64> = ref_raw.iter().map(|v| (v - rm) / rs).collect();

    let mut dropped = Vec::new();
    let mut views = Vec::new();
    for (idx, obs) in track.observations.iter().enumerate() {
        if !obs.is_active() || obs.image == b {
            continue;
        }
        let raster = raster_of(obs.image)?;
        let a = &obs.affine;
        let theta = [
            a.a[0] + a.a[1] * xb.x + a.a[2] * xb.y,
            a.a[1],
            a.a[2],
            a.b[0] + a.b[1] * xb.x + a.b[2] * xb.y,
            a.b[1],
            a.b[2],
            0.0,
            1.0,
        ];
        let mut view = View { obs_index: idx, raster, point: obs.point, mean: 0.0, std: 1.0, theta, travelled: 0.0 };
        let raw: Option<Vec<f64>> = offsets
            .iter()
            .map(|d| raster.sample_bilinear(&view.position(*d)).ok())
            .collect();
        match raw {
            Some(raw) => {
                let (m, s) = mean_and_std(&raw);
                if is_flat(&raw, m, s) {
                    dropped.push(idx);
                } else {
                    view.mean = m;
                    view.std = s;
                    views.push(view);
                }
            }
            None => dropped.push(idx),
        }
    }
    if views.is_empty() {
        return Ok(LsmResult::diverged(DivergenceReason::NoViews, track, 0, f64::NAN, weights, Vec::new()));
    }

    let free_ground = geometry.is_some() && !cfg.pin_ground;
    let m = views.len();
    let n = PARAMS * m + if free_ground { 3 } else { 0 };
    let mut ground = geometry.as_ref().map(|g| g.target).unwrap_or_else(Vector3::zeros);
    let mut trajectory = Vec::new();
    let mut zncc_before = f64::NAN;
    let mut last_zncc = f64::NAN;
    let mut decreases = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        let mut sampled = Vec::with_capacity(m);
        let mut failed = false;
        for (k, view) in views.iter().enumerate() {
            let mut hk = SMatrix::<f64, PARAMS, PARAMS>::zeros();
            let mut gk = SVector::<f64, PARAMS>::zeros();
            let mut values = Vec::with_capacity(offsets.len());
            let (h0, h1) = (view.theta[6], view.theta[7]);
            for (d, r) in offsets.iter().zip(&reference) {
                let Ok((v, gx, gy)) = view.sample(*d) else {
                    failed = true;
                    break;
                };
                values.push(v);
                let f = r - h0 - h1 * v;
                let row = SVector::<f64, PARAMS>::from([
                    -h1 * gx,
                    -h1 * gx * d.0,
                    -h1 * gx * d.1,
                    -h1 * gy,
                    -h1 * gy * d.0,
                    -h1 * gy * d.1,
                    -1.0,
                    -v,
                ]);
                hk += row * row.transpose();
                gk += row * f;
            }
            if failed {
                break;
            }
            h.fixed_view_mut::<PARAMS, PARAMS>(PARAMS * k, PARAMS * k).copy_from(&hk);
            g.fixed_rows_mut::<PARAMS>(PARAMS * k).copy_from(&gk);
            sampled.push(values);
        }
        if failed {
            return Ok(LsmResult::diverged(DivergenceReason::Sampling, track, iterations, zncc_before, weights, trajectory));
        }
        let score = mean_zncc(&sampled, &reference);
        if iterations == 1 {
            zncc_before = score;
        } else if score < last_zncc {
            decreases += 1;
            if decreases >= cfg.zncc_patience {
                return Ok(LsmResult::diverged(DivergenceReason::Correlation, track, iterations, zncc_before, weights, trajectory));
            }
        } else {
            decreases = 0;
        }
        last_zncc = score;

        if let Some(geo) = &geometry {
            let p = from_frame(geo.cams, &ground);
            let gi = PARAMS * m;
            let mut add_ray = |image: u32, corrected: ImagePoint, slot: Option<usize>| -> Result<()> {
                let (proj, jac) = geo.cams.project_frame(image, &p)?;
                let r = [corrected.x - proj.x, corrected.y - proj.y];
                for axis in 0..2 {
                    let mut idx = Vec::with_capacity(4);
                    let mut val = Vec::with_capacity(4);
                    if let Some(k) = slot {
                        idx.push(PARAMS * k + 3 * axis);
                        val.push(1.0);
                    }
                    if free_ground {
                        for c in 0..3 {
                            idx.push(gi + c);
                            val.push(-jac[(axis, c)]);
                        }
                    }
                    for (a, &ia) in idx.iter().enumerate() {
                        g[ia] += geo.w_reproj * val[a] * r[axis];
                        for (c, &ic) in idx.iter().enumerate() {
                            h[(ia, ic)] += geo.w_reproj * val[a] * val[c];
                        }
                    }
                }
                Ok(())
            };
            add_ray(geo.reference_image, geo.reference_point, None)?;
            for (k, view) in views.iter().enumerate() {
                let image = track.observations[view.obs_index].image;
                let corrected = ImagePoint::new(view.point.x + view.theta[0], view.point.y + view.theta[3]);
                add_ray(image, corrected, Some(k))?;
            }
            if free_ground {
                for c in 0..3 {
                    let d = geo.scale[c];
                    h[(gi + c, gi + c)] += geo.weights.w_vgcp * d * d;
                    g[gi + c] += geo.weights.w_vgcp * d * d * (ground[c] - geo.target[c]);
                }
            }
        }

        let Some(chol) = h.cholesky() else {
            return Ok(LsmResult::diverged(DivergenceReason::Singular, track, iterations, zncc_before, weights, trajectory));
        };
        let step = chol.solve(&(-g));
        if step.iter().any(|v| !v.is_finite()) {
            return Ok(LsmResult::diverged(DivergenceReason::Singular, track, iterations, zncc_before, weights, trajectory));
        }
        let mut max_shift: f64 = 0.0;
        let mut state = Vec::with_capacity(n);
        for (k, view) in views.iter_mut().enumerate() {
            for p in 0..PARAMS {
                view.theta[p] += step[PARAMS * k + p];
            }
            let shift = step[PARAMS * k].hypot(step[PARAMS * k + 3]);
            view.travelled += shift;
            max_shift = max_shift.max(shift);
            state.extend_from_slice(&view.theta);
        }
        if free_ground {
            for c in 0..3 {
                ground[c] += step[PARAMS * m + c];
            }
            state.extend(ground.iter());
        }
        trajectory.push(state);
        let runaway = views.iter().any(|v| v.travelled > window as f64 || !(v.theta[7] > 0.0));
        let outside = views.iter().any(|v| !v.raster.contains(&v.position((0.0, 0.0)), 0.0));
        if runaway || outside {
            let reason = if runaway { DivergenceReason::Runaway } else { DivergenceReason::Sampling };
            return Ok(LsmResult::diverged(reason, track, iterations, zncc_before, weights, trajectory));
        }
        if max_shift < cfg.shift_tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Ok(LsmResult::diverged(DivergenceReason::IterationCap, track, iterations, zncc_before, weights, trajectory));
    }
    let finals: Option<Vec<Vec<f64>>> = views
        .iter()
        .map(|view| offsets.iter().map(|d| view.sample(*d).ok().map(|s| s.0)).collect())
        .collect();
    let Some(finals) = finals else {
        return Ok(LsmResult::diverged(DivergenceReason::Sampling, track, iterations, zncc_before, weights, trajectory));
    };
    let zncc_after = mean_zncc(&finals, &reference);

    let mut out = track.clone();
    for view in &views {
        let t = &view.theta;
        let obs = &mut out.observations[view.obs_index];
        obs.affine = AffineCorrection {
            a: [t[0] - t[1] * xb.x - t[2] * xb.y, t[1], t[2]],
            b: [t[3] - t[4] * xb.x - t[5] * xb.y, t[4], t[5]],
        };
        // radiometry is reported in raw intensity units: I_b ≈ h0 + h1·I_j
        let h1 = t[7] * rs / view.std;
        obs.h1 = h1;
        obs.h0 = rm + rs * t[6] - h1 * view.mean;
    }
    for idx in dropped {
        out.observations[idx].status = ObsStatus::Diverged;
    }
    if let (Some(geo), true) = (&geometry, free_ground) {
        out.ground = Some(from_frame(geo.cams, &ground));
    }
    if out.active_count() < 2 {
        return Ok(LsmResult::diverged(DivergenceReason::TooFewViews, track, iterations, zncc_before, weights, trajectory));
    }
    Ok(LsmResult { status: LsmStatus::Converged, reason: None, iterations, track: out, zncc_before, zncc_after, weights, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpc::{GroundNormalization, ImageNormalization};
    use crate::tracks::{triangulate, ReprojStats, ViewResidual};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(eps: f64, n: usize) -> ReprojStats {
        ReprojStats { residuals: vec![ViewResidual { image: 0, dx: 0.0, dy: 0.0 }; n], n, rmse: eps }
    }

    #[test]
    fn weight_examples() {
        let cfg = WeightConfig::new(5);
        let w = compute_weights(&stats(0.0, 3), &cfg);
        assert_eq!(w.w_max, 12.5);
        assert_eq!(w.w_reproj, 12.5);
        assert_eq!(w.w_vgcp, 0.0);
        let w = compute_weights(&stats(2.0, 3), &cfg);
        assert!((w.w_reproj - 12.5 * (-2f64).exp()).abs() < 1e-12);
        assert!((w.w_reproj - 1.6917).abs() < 1e-4);
        assert!((w.w_vgcp - 10.8083).abs() < 1e-4);
        let w = compute_weights(&stats(10.0, 3), &cfg);
        assert!(w.w_reproj < 1e-20 * w.w_max);
    }

    #[test]
    fn weight_config_validation() {
        assert!(WeightConfig::new(4).validate().is_err());
        assert!(WeightConfig { p: 0.0, ..WeightConfig::new(5) }.validate().is_err());
        assert!(WeightConfig { sigma: -1.0, ..WeightConfig::new(5) }.validate().is_err());
        assert!(WeightConfig::new(3).validate().is_ok());
    }

    /// Smooth texture in image coordinates.
    fn texture(x: f64, y: f64) -> f64 {
        100.0
            + 25.0 * (0.61 * x + 0.3).sin() * (0.47 * y - 0.2).cos()
            + 18.0 * (0.33 * x - 0.52 * y + 1.0).sin()
            + 9.0 * (0.9 * y + 0.15 * x).cos()
    }

    fn render(id: u32, size: usize, f: impl Fn(f64, f64) -> f64) -> ImageRaster {
        let data = (0..size).flat_map(|y| (0..size).map(move |x| (x as f64, y as f64))).map(|(x, y)| f(x, y)).collect();
        ImageRaster::new(id, size, size, data).unwrap()
    }

    fn off_grid(q: &ImagePoint) -> bool {
        let fx = q.x - q.x.floor();
        let fy = q.y - q.y.floor();
        fx > 1e-3 && fx < 1.0 - 1e-3 && fy > 1e-3 && fy < 1.0 - 1e-3
    }

    #[test]
    fn photometric_partials_match_finite_differences() {
        let raster = render(1, 96, texture);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let step = 1e-4;
        let mut checked = 0;
        while checked < 150 {
            let xb = ImagePoint::new(rng.gen_range(30.0..60.0), rng.gen_range(30.0..60.0));
            let mut obs = Observation::new(1, ImagePoint::new(rng.gen_range(35.0..55.0), rng.gen_range(35.0..55.0)));
            let mut aff = AffineCorrection::initial(&xb);
            for k in 0..3 {
                aff.a[k] += rng.gen_range(-0.05..0.05);
                aff.b[k] += rng.gen_range(-0.05..0.05);
            }
            obs.affine = aff;
            obs.h0 = rng.gen_range(-5.0..5.0);
            obs.h1 = rng.gen_range(0.8..1.2);
            let delta = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let q = warp_position(&obs.point, &xb, delta, &obs.affine);
            // keep every perturbed sample inside one bilinear cell
            let reach = step * (1.0 + xb.x.abs() + xb.y.abs() + 10.0);
            let near = |c: f64| {
                let f = c - c.floor();
                f < reach || f > 1.0 - reach
            };
            if !off_grid(&q) || near(q.x) || near(q.y) {
                continue;
            }
            let refv = texture(xb.x + delta.0, xb.y + delta.1);
            let analytic = photometric_partials(&raster, &obs, &xb, delta).unwrap();
            for k in 0..8 {
                let eval = |s: f64| {
                    let mut o = obs.clone();
                    match k {
                        0..=2 => o.affine.a[k] += s,
                        3..=5 => o.affine.b[k - 3] += s,
                        6 => o.h0 += s,
                        _ => o.h1 += s,
                    }
                    photometric_residual(refv, &raster, &o, &xb, delta).unwrap()
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                let scale = analytic[k].abs().max(1e-3);
                assert!((fd - analytic[k]).abs() <= 1e-3 * scale, "param {k}: {fd} vs {}", analytic[k]);
            }
            checked += 1;
        }
    }

    fn model(k: usize) -> RpcModel {
        let ground = GroundNormalization { lat_off: 34.0, lat_scale: 0.002, lon_off: -58.5, lon_scale: 0.0025, h_off: 50.0, h_scale: 60.0 };
        let image = ImageNormalization { samp_off: 100.0, samp_scale: 100.0, line_off: 100.0, line_scale: 100.0 };
        let mut m = RpcModel::constant(ground, image);
        let tilt = [-0.25, 0.2, 0.05, -0.1][k % 4];
        let along = [0.1, -0.15, 0.3, -0.2][k % 4];
        m.samp_num[1] = 0.95 + 0.01 * k as f64;
        m.samp_num[2] = 0.02 * k as f64;
        m.samp_num[3] = tilt;
        m.line_num[1] = -0.01 * k as f64;
        m.line_num[2] = -0.93;
        m.line_num[3] = along;
        m.samp_num[5] = 1e-3;
        m.line_den[8] = 5e-4;
        m
    }

    #[test]
    fn geometric_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..100 {
            let m = model(case);
            let bias = BiasCorrection::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let ground = GroundPoint::new(34.0 + rng.gen_range(-0.001..0.001), -58.5 + rng.gen_range(-0.001..0.001), rng.gen_range(0.0..100.0));
            let xb = ImagePoint::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0));
            let mut obs = Observation::new(0, ImagePoint::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0)));
            obs.affine = AffineCorrection::initial(&xb);
            obs.affine.a[0] += rng.gen_range(-1.0..1.0);
            obs.affine.b[2] += rng.gen_range(-0.01..0.01);
            let an = geometric_partials(&m, &bias, &ground, &xb).unwrap();
            let f = |b: &BiasCorrection, g: &GroundPoint, o: &Observation| geometric_residual(&m, b, g, o, &xb).unwrap();
            let check = |fd: (f64, f64), col: (f64, f64), what: &str| {
                for (a, b) in [(fd.0, col.0), (fd.1, col.1)] {
                    let scale = b.abs().max(1e-6 * 1.0f64.max(a.abs()));
                    assert!((a - b).abs() <= 1e-6 * scale.max(1e-3), "{what}: {a} vs {b}");
                }
            };
            for k in 0..2 {
                let h = 1e-3;
                let mut bp = bias;
                let mut bm = bias;
                if k == 0 { bp.x0 += h; bm.x0 -= h } else { bp.y0 += h; bm.y0 -= h }
                let (p, q) = (f(&bp, &ground, &obs), f(&bm, &ground, &obs));
                check(((p.0 - q.0) / (2.0 * h), (p.1 - q.1) / (2.0 * h)), (an.bias[(0, k)], an.bias[(1, k)]), "bias");
            }
            let steps = [1e-7, 1e-7, 1e-2];
            for k in 0..3 {
                let mut gp = ground;
                let mut gm = ground;
                match k {
                    0 => { gp.lat += steps[0]; gm.lat -= steps[0] }
                    1 => { gp.lon += steps[1]; gm.lon -= steps[1] }
                    _ => { gp.h += steps[2]; gm.h -= steps[2] }
                }
                let (p, q) = (f(&bias, &gp, &obs), f(&bias, &gm, &obs));
                let fd = ((p.0 - q.0) / (2.0 * steps[k]), (p.1 - q.1) / (2.0 * steps[k]));
                let col = (an.ground[(0, k)], an.ground[(1, k)]);
                for (a, b) in [(fd.0, col.0), (fd.1, col.1)] {
                    assert!((a - b).abs() <= 1e-6 * an.ground.amax(), "ground {k}: {a} vs {b}");
                }
            }
            for k in 0..6 {
                let h = 1e-3;
                let mut op = obs.clone();
                let mut om = obs.clone();
                if k < 3 { op.affine.a[k] += h; om.affine.a[k] -= h } else { op.affine.b[k - 3] += h; om.affine.b[k - 3] -= h }
                let (p, q) = (f(&bias, &ground, &op), f(&bias, &ground, &om));
                check(((p.0 - q.0) / (2.0 * h), (p.1 - q.1) / (2.0 * h)), (an.affine[(0, k)], an.affine[(1, k)]), "affine");
            }
        }
    }

    /// Three cameras, one ground point and rasters whose content around each
    /// projection is the same texture, so true correspondences are exact.
    struct Fixture {
        cams: CameraSet,
        rasters: RasterSet,
        truth: Vec<ImagePoint>,
        ground: GroundPoint,
    }

    fn fixture() -> Fixture {
        let mut cams = CameraSet::new((0..3u32).map(|k| (k, model(k as usize))));
        let ground = GroundPoint::new(34.0001, -58.5002, 61.0);
        // biases move every true projection onto the pixel grid, so windows
        // around them sample the texture without interpolation error
        for k in 0..3 {
            let q = cams.project(k, &ground).unwrap();
            cams.set_bias(k, BiasCorrection::new(q.x - q.x.floor(), q.y - q.y.floor()));
        }
        let truth: Vec<ImagePoint> = (0..3).map(|k| cams.project(k, &ground).unwrap()).collect();
        let rasters = RasterSet::new((0..3u32).map(|k| {
            let t = truth[k as usize];
            let gain = 1.0 + 0.2 * k as f64;
            render(k, 200, move |x, y| gain * texture(x - t.x + 100.0, y - t.y + 100.0) + 10.0 * k as f64)
        }));
        Fixture { cams, rasters, truth, ground }
    }

    fn track_from(fx: &Fixture, points: &[ImagePoint]) -> Track {
        let mut t = Track::new(5, points.iter().enumerate().map(|(k, p)| Observation::new(k as u32, *p)).collect());
        t.set_reference(0).unwrap();
        t.ground = Some(triangulate(&t, &fx.cams).unwrap());
        t
    }

    #[test]
    fn consistent_track_is_a_fixed_point() {
        let fx = fixture();
        let t = track_from(&fx, &fx.truth);
        let res = refine_track(&t, &fx.cams, &fx.rasters, &LsmConfig::new(11)).unwrap();
        assert_eq!(res.status, LsmStatus::Converged);
        assert!(res.iterations <= 2);
        let first = &res.trajectory[0];
        let initial = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        for k in 0..2 {
            for p in 0..8 {
                assert!((first[8 * k + p] - initial[p]).abs() < 1e-8, "{k} {p} {}", first[8 * k + p]);
            }
        }
    }

    #[test]
    fn subpixel_offset_is_recovered() {
        let fx = fixture();
        let mut pts = fx.truth.clone();
        pts[1].x += 0.3;
        pts[1].y -= 0.4;
        let t = track_from(&fx, &pts);
        let res = refine_track(&t, &fx.cams, &fx.rasters, &LsmConfig::new(11)).unwrap();
        assert_eq!(res.status, LsmStatus::Converged);
        let c = res.track.corrected(1);
        assert!((c.x - fx.truth[1].x).abs() < 0.05 && (c.y - fx.truth[1].y).abs() < 0.05, "{c:?} vs {:?}", fx.truth[1]);
        assert_eq!(res.track.observations[0].point, t.observations[0].point);
        let g = res.track.ground.unwrap();
        assert!((g.h - fx.ground.h).abs() < 1.0);
    }

    #[test]
    fn textureless_windows_diverge_without_changes() {
        let cams = CameraSet::new((0..2u32).map(|k| (k, model(k as usize))));
        let rasters = RasterSet::new((0..2u32).map(|k| render(k, 64, |_, _| 42.0)));
        let ground = GroundPoint::new(34.0, -58.5, 50.0);
        let mut t = Track::new(1, (0..2u32).map(|k| Observation::new(k, cams.project(k, &ground).unwrap())).collect());
        t.set_reference(0).unwrap();
        t.ground = Some(ground);
        for res in [
            refine_track(&t, &cams, &rasters, &LsmConfig::new(7)).unwrap(),
            refine_track_classic(&t, &rasters, &LsmConfig::new(7)).unwrap(),
        ] {
            assert_eq!(res.status, LsmStatus::Diverged);
            assert_eq!(res.track, t);
        }
    }

    #[test]
    fn classic_recovers_a_known_affine_warp() {
        // image 1 content at xb + δ appears at xj + M δ, with gain and offset
        let xb = ImagePoint::new(60.0, 60.0);
        let xj = ImagePoint::new(64.3, 57.8);
        let mm = nalgebra::Matrix2::new(1.04, 0.03, -0.02, 0.97);
        let inv = mm.try_inverse().unwrap();
        let r0 = render(0, 128, texture);
        let r1 = render(1, 128, move |x, y| {
            let d = inv * nalgebra::Vector2::new(x - xj.x, y - xj.y);
            1.3 * texture(xb.x + d[0], xb.y + d[1]) - 20.0
        });
        let rasters = RasterSet::new([r0, r1]);
        let mut t = Track::new(0, vec![Observation::new(0, xb), Observation::new(1, ImagePoint::new(xj.x - 0.4, xj.y + 0.3))]);
        t.set_reference(0).unwrap();
        let res = refine_track_classic(&t, &rasters, &LsmConfig::new(21)).unwrap();
        assert_eq!(res.status, LsmStatus::Converged);
        let a = res.track.observations[1].affine;
        let got = [a.a[1], a.a[2], a.b[1], a.b[2]];
        let want = [mm[(0, 0)], mm[(0, 1)], mm[(1, 0)], mm[(1, 1)]];
        for (g, w) in got.iter().zip(want) {
            // 2% of the unit warp scale
            assert!((g - w).abs() <= 0.02 * w.abs().max(1.0), "{got:?} vs {want:?}");
        }
        let c = res.track.corrected(1);
        assert!((c.x - xj.x).abs() < 0.05 && (c.y - xj.y).abs() < 0.05);
        let o = &res.track.observations[1];
        // I_b ≈ h0 + h1·I_j with I_j = 1.3·I_b − 20, up to interpolation smoothing
        assert!((o.h1 - 1.0 / 1.3).abs() < 0.1 / 1.3, "{}", o.h1);
        let mid = 1.3 * 100.0 - 20.0;
        assert!((o.h0 + o.h1 * mid - 100.0).abs() < 2.0, "{} {}", o.h0, o.h1);
    }

    #[test]
    fn zero_geometric_weight_with_pinned_ground_matches_classic() {
        let fx = fixture();
        let mut pts = fx.truth.clone();
        pts[1].x += 0.7;
        pts[2].y -= 0.5;
        let t = track_from(&fx, &pts);
        let classic = refine_track_classic(&t, &fx.rasters, &LsmConfig::new(9)).unwrap();
        let cfg = LsmConfig { reproj_weight: Some(0.0), pin_ground: true, ..LsmConfig::new(9) };
        let unified = refine_track(&t, &fx.cams, &fx.rasters, &cfg).unwrap();
        assert_eq!(classic.status, unified.status);
        assert_eq!(classic.trajectory.len(), unified.trajectory.len());
        for (a, b) in classic.trajectory.iter().zip(&unified.trajectory) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn missing_reference_is_an_error() {
        let fx = fixture();
        let mut t = track_from(&fx, &fx.truth);
        t.reference = None;
        assert!(refine_track_classic(&t, &fx.rasters, &LsmConfig::new(5)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_partition_max(eps in 0.0f64..20.0, n in 2usize..12, w in 1usize..20, p in 0.01f64..5.0, sigma in 0.1f64..10.0) {
                let cfg = WeightConfig { p, sigma, window: 2 * w + 1 };
                let s = compute_weights(&stats(eps, n), &cfg);
                prop_assert!((s.w_reproj + s.w_vgcp - s.w_max).abs() <= 1e-12 * s.w_max);
                prop_assert!(s.w_reproj >= 0.0 && s.w_vgcp >= 0.0);
                let expected = p * ((2 * w + 1) as f64).powi(2) * (n as f64 - 1.0) / 2.0;
                prop_assert!((s.w_max - expected).abs() <= 1e-12 * expected);
            }

            #[test]
            fn attenuation_is_monotone(eps in 0.0f64..4.0, d in 1e-3f64..2.0, n in 2usize..8) {
                let cfg = WeightConfig::new(9);
                let a = weights_for(eps, n, &cfg);
                let b = weights_for(eps + d, n, &cfg);
                prop_assert!(b.w_reproj < a.w_reproj);
            }

            #[test]
            fn max_weight_scales(n in 2usize..10, w in 1usize..15) {
                let cfg = WeightConfig::new(2 * w + 1);
                let base = weights_for(0.0, n, &cfg).w_max;
                let more_rays = weights_for(0.0, n + 1, &cfg).w_max;
                prop_assert!((more_rays / base - n as f64 / (n as f64 - 1.0)).abs() < 1e-12);
                let bigger = weights_for(0.0, n, &WeightConfig::new(4 * w + 2 + 1)).w_max;
                let ratio = ((4 * w + 3) as f64 / (2 * w + 1) as f64).powi(2);
                prop_assert!((bigger / base - ratio).abs() < 1e-12 * ratio);
            }
        }
    }
}
