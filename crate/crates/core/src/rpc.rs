//! Rational polynomial camera (RPC) model.
//!
//! Each image axis is a ratio of two cubic polynomials in normalized ground
//! coordinates `(P, L, H)` (latitude, longitude, height). Coefficients follow
//! the RPC00B term ordering used by NITF and vendor `_RPC.TXT` files:
//!
//! | #  | term  | #  | term  | #  | term  | #  | term |
//! |----|-------|----|-------|----|-------|----|------|
//! | 1  | 1     | 6  | L·H   | 11 | P·L·H | 16 | P³   |
//! | 2  | L     | 7  | P·H   | 12 | L³    | 17 | P·H² |
//! | 3  | P     | 8  | L²    | 13 | L·P²  | 18 | L²·H |
//! | 4  | H     | 9  | P²    | 14 | L·H²  | 19 | P²·H |
//! | 5  | L·P   | 10 | H²    | 15 | L²·P  | 20 | H³   |
//!
//! Image coordinates are columns (`x`, sample) and rows (`y`, line). A constant
//! per-image pixel bias `(x0, y0)` is subtracted after denormalization:
//! `x = S_s · R_x + O_s − x0`, `y = S_l · R_y + O_l − y0`.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of coefficients in a cubic RPC polynomial.
pub const RPC_TERMS: usize = 20;

/// Normalized coordinates beyond this magnitude are extrapolation.
pub const VALIDITY_LIMIT: f64 = 1.5;

const MIN_DENOMINATOR: f64 = 1e-10;

/// Object-space point in geodetic coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPoint {
    /// Latitude, degrees.
    pub lat: f64,
    /// Longitude, degrees.
    pub lon: f64,
    /// Height, meters.
    pub h: f64,
}

impl GroundPoint {
    pub fn new(lat: f64, lon: f64, h: f64) -> Self {
        Self { lat, lon, h }
    }

    pub fn is_finite(&self) -> bool {
        self.lat.is_finite() && self.lon.is_finite() && self.h.is_finite()
    }
}

/// Image-space point; `x` is the column, `y` the row. Not clipped to any raster.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
}

impl ImagePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ground coordinates after offset/scale normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedGround {
    pub p: f64,
    pub l: f64,
    pub h: f64,
}

impl NormalizedGround {
    pub fn new(p: f64, l: f64, h: f64) -> Self {
        Self { p, l, h }
    }

    /// True when any component lies outside the model's validity box.
    pub fn is_extrapolated(&self) -> bool {
        self.p.abs() > VALIDITY_LIMIT || self.l.abs() > VALIDITY_LIMIT || self.h.abs() > VALIDITY_LIMIT
    }
}

/// Ground offsets and scales (`LAT_OFF`, `LAT_SCALE`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundNormalization {
    pub lat_off: f64,
    pub lat_scale: f64,
    pub lon_off: f64,
    pub lon_scale: f64,
    pub h_off: f64,
    pub h_scale: f64,
}

impl GroundNormalization {
    pub fn normalize(&self, p: &GroundPoint) -> NormalizedGround {
        NormalizedGround {
            p: (p.lat - self.lat_off) / self.lat_scale,
            l: (p.lon - self.lon_off) / self.lon_scale,
            h: (p.h - self.h_off) / self.h_scale,
        }
    }

    pub fn denormalize(&self, g: &NormalizedGround) -> GroundPoint {
        GroundPoint {
            lat: g.p * self.lat_scale + self.lat_off,
            lon: g.l * self.lon_scale + self.lon_off,
            h: g.h * self.h_scale + self.h_off,
        }
    }

    /// Scale factors `(lat, lon, h)`.
    pub fn scales(&self) -> [f64; 3] {
        [self.lat_scale, self.lon_scale, self.h_scale]
    }

    /// The box center.
    pub fn center(&self) -> GroundPoint {
        GroundPoint::new(self.lat_off, self.lon_off, self.h_off)
    }
}

/// Image offsets and scales (`SAMP_OFF`, `SAMP_SCALE`, `LINE_OFF`, `LINE_SCALE`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageNormalization {
    pub samp_off: f64,
    pub samp_scale: f64,
    pub line_off: f64,
    pub line_scale: f64,
}

/// Image axis selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Column / sample direction.
    X,
    /// Row / line direction.
    Y,
}

/// Constant image-space bias, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BiasCorrection {
    pub x0: f64,
    pub y0: f64,
}

impl BiasCorrection {
    pub fn new(x0: f64, y0: f64) -> Self {
        Self { x0, y0 }
    }
}

/// Rational polynomial camera model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcModel {
    pub ground: GroundNormalization,
    pub image: ImageNormalization,
    pub samp_num: [f64; RPC_TERMS],
    pub samp_den: [f64; RPC_TERMS],
    pub line_num: [f64; RPC_TERMS],
    pub line_den: [f64; RPC_TERMS],
}

/// Monomials in RPC00B order.
pub fn terms(g: &NormalizedGround) -> [f64; RPC_TERMS] {
    let (p, l, h) = (g.p, g.l, g.h);
    [
        1.0,
        l,
        p,
        h,
        l * p,
        l * h,
        p * h,
        l * l,
        p * p,
        h * h,
        p * l * h,
        l * l * l,
        l * p * p,
        l * h * h,
        l * l * p,
        p * p * p,
        p * h * h,
        l * l * h,
        p * p * h,
        h * h * h,
    ]
}

/// Partial derivatives of each monomial with respect to `(P, L, H)`.
pub fn term_gradients(g: &NormalizedGround) -> [[f64; 3]; RPC_TERMS] {
    let (p, l, h) = (g.p, g.l, g.h);
    [
        [0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [l, p, 0.0],
        [0.0, h, l],
        [h, 0.0, p],
        [0.0, 2.0 * l, 0.0],
        [2.0 * p, 0.0, 0.0],
        [0.0, 0.0, 2.0 * h],
        [l * h, p * h, p * l],
        [0.0, 3.0 * l * l, 0.0],
        [2.0 * l * p, p * p, 0.0],
        [0.0, h * h, 2.0 * l * h],
        [l * l, 2.0 * l * p, 0.0],
        [3.0 * p * p, 0.0, 0.0],
        [h * h, 0.0, 2.0 * p * h],
        [0.0, 2.0 * l * h, l * l],
        [2.0 * p * h, 0.0, p * p],
        [0.0, 0.0, 3.0 * h * h],
    ]
}

fn dot(coeffs: &[f64; RPC_TERMS], t: &[f64; RPC_TERMS]) -> f64 {
    coeffs.iter().zip(t).map(|(c, t)| c * t).sum()
}

fn dot_grad(coeffs: &[f64; RPC_TERMS], grads: &[[f64; 3]; RPC_TERMS]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, g) in coeffs.iter().zip(grads) {
        out[0] += c * g[0];
        out[1] += c * g[1];
        out[2] += c * g[2];
    }
    out
}

/// Value and `(P, L, H)` gradient of one rational function.
fn ratio_with_gradient(
    num: &[f64; RPC_TERMS],
    den: &[f64; RPC_TERMS],
    t: &[f64; RPC_TERMS],
    grads: &[[f64; 3]; RPC_TERMS],
) -> Result<(f64, [f64; 3])> {
    let n = dot(num, t);
    let d = dot(den, t);
    if !(d.abs() >= MIN_DENOMINATOR) {
        return Err(Error::SingularEvaluation { value: d });
    }
    let dn = dot_grad(num, grads);
    let dd = dot_grad(den, grads);
    let d2 = d * d;
    let grad = [
        (dn[0] * d - n * dd[0]) / d2,
        (dn[1] * d - n * dd[1]) / d2,
        (dn[2] * d - n * dd[2]) / d2,
    ];
    Ok((n / d, grad))
}

impl RpcModel {
    /// Model whose numerators and denominators are all constant (`num = 0`, `den = 1`).
    pub fn constant(ground: GroundNormalization, image: ImageNormalization) -> Self {
        let mut den = [0.0; RPC_TERMS];
        den[0] = 1.0;
        Self {
            ground,
            image,
            samp_num: [0.0; RPC_TERMS],
            samp_den: den,
            line_num: [0.0; RPC_TERMS],
            line_den: den,
        }
    }

    fn polys(&self, axis: Axis) -> (&[f64; RPC_TERMS], &[f64; RPC_TERMS]) {
        match axis {
            Axis::X => (&self.samp_num, &self.samp_den),
            Axis::Y => (&self.line_num, &self.line_den),
        }
    }

    /// Checks the structural invariants: positive scales, unit denominator constant.
    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("LAT_SCALE", self.ground.lat_scale),
            ("LONG_SCALE", self.ground.lon_scale),
            ("HEIGHT_SCALE", self.ground.h_scale),
            ("SAMP_SCALE", self.image.samp_scale),
            ("LINE_SCALE", self.image.line_scale),
        ];
        for (name, v) in scales {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, den) in [("SAMP_DEN_COEFF_1", &self.samp_den), ("LINE_DEN_COEFF_1", &self.line_den)] {
            if (den[0] - 1.0).abs() > 1e-12 {
                return Err(Error::Validation(format!("{name} must be 1, got {}", den[0])));
            }
        }
        let all = [&self.samp_num, &self.samp_den, &self.line_num, &self.line_den];
        if all.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation("non-finite RPC coefficient".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, p: &GroundPoint) -> NormalizedGround {
        self.ground.normalize(p)
    }

    /// True when `p` falls outside the normalized validity box.
    pub fn is_extrapolated(&self, p: &GroundPoint) -> bool {
        self.normalize(p).is_extrapolated()
    }

    /// Evaluates `Num(g) / Den(g)` for one axis.
    pub fn eval_ratio(&self, axis: Axis, g: &NormalizedGround) -> Result<f64> {
        let (num, den) = self.polys(axis);
        let t = terms(g);
        let d = dot(den, &t);
        if !(d.abs() >= MIN_DENOMINATOR) {
            return Err(Error::SingularEvaluation { value: d });
        }
        Ok(dot(num, &t) / d)
    }

    /// Projects a ground point to biased pixel coordinates.
    pub fn forward_project(&self, bias: &BiasCorrection, p: &GroundPoint) -> Result<ImagePoint> {
        let g = self.normalize(p);
        let rx = self.eval_ratio(Axis::X, &g)?;
        let ry = self.eval_ratio(Axis::Y, &g)?;
        Ok(ImagePoint {
            x: self.image.samp_scale * rx + self.image.samp_off - bias.x0,
            y: self.image.line_scale * ry + self.image.line_off - bias.y0,
        })
    }

    /// Jacobian of the normalized image coordinates `(R_x, R_y)` with respect to
    /// `(lat, lon, h)` in degrees, degrees, meters.
    pub fn projection_jacobian(&self, p: &GroundPoint) -> Result<Matrix2x3<f64>> {
        let g = self.normalize(p);
        let (_, _, jn) = self.normalized_ratios(&g)?;
        let s = self.ground.scales();
        Ok(Matrix2x3::from_fn(|r, c| jn[(r, c)] / s[c]))
    }

    /// Ratios and their Jacobian with respect to normalized `(P, L, H)`.
    fn normalized_ratios(&self, g: &NormalizedGround) -> Result<(f64, f64, Matrix2x3<f64>)> {
        let t = terms(g);
        let grads = term_gradients(g);
        let (rx, gx) = ratio_with_gradient(&self.samp_num, &self.samp_den, &t, &grads)?;
        let (ry, gy) = ratio_with_gradient(&self.line_num, &self.line_den, &t, &grads)?;
        let j = Matrix2x3::new(gx[0], gx[1], gx[2], gy[0], gy[1], gy[2]);
        Ok((rx, ry, j))
    }

    /// Biased pixel projection together with its Jacobian in pixels per
    /// `(degree, degree, meter)`.
    pub fn project_with_jacobian(
        &self,
        bias: &BiasCorrection,
        p: &GroundPoint,
    ) -> Result<(ImagePoint, Matrix2x3<f64>)> {
        let g = self.normalize(p);
        let (rx, ry, jn) = self.normalized_ratios(&g)?;
        let s = self.ground.scales();
        let img = &self.image;
        let pixel_scale = [img.samp_scale, img.line_scale];
        let jac = Matrix2x3::from_fn(|r, c| pixel_scale[r] * jn[(r, c)] / s[c]);
        let q = ImagePoint {
            x: img.samp_scale * rx + img.samp_off - bias.x0,
            y: img.line_scale * ry + img.line_off - bias.y0,
        };
        Ok((q, jac))
    }

    /// Inverts the biased projection at a fixed height `h`.
    ///
    /// Damped Newton iteration on normalized `(P, L)`; the step is halved while
    /// it increases the pixel residual. Fails if the residual is still above
    /// 1e-4 px after 20 iterations.
    pub fn backward_project(&self, bias: &BiasCorrection, q: &ImagePoint, h: f64) -> Result<GroundPoint> {
        const MAX_ITER: usize = 20;
        const TOLERANCE_PX: f64 = 1e-4;

        if !(q.x.is_finite() && q.y.is_finite() && h.is_finite()) {
            return Err(Error::InverseDivergence { iterations: 0, residual_px: f64::NAN });
        }
        let hn = (h - self.ground.h_off) / self.ground.h_scale;
        let img = self.image;
        let residual = |p: f64, l: f64| -> Result<(Vector2<f64>, Matrix2<f64>)> {
            let g = NormalizedGround::new(p, l, hn);
            let (rx, ry, jn) = self.normalized_ratios(&g)?;
            let r = Vector2::new(
                img.samp_scale * rx + img.samp_off - bias.x0 - q.x,
                img.line_scale * ry + img.line_off - bias.y0 - q.y,
            );
            let j = Matrix2::new(
                img.samp_scale * jn[(0, 0)],
                img.samp_scale * jn[(0, 1)],
                img.line_scale * jn[(1, 0)],
                img.line_scale * jn[(1, 1)],
            );
            Ok((r, j))
        };

        let (mut p, mut l) = (0.0, 0.0);
        let (mut r, mut j) = residual(p, l)?;
        let mut norm = r.norm();
        for it in 0..MAX_ITER {
            if norm < 1e-10 {
                break;
            }
            let Some(step) = j.try_inverse().map(|inv| -(inv * r)) else {
                return Err(Error::InverseDivergence { iterations: it, residual_px: norm });
            };
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let (np, nl) = (p + scale * step[0], l + scale * step[1]);
                if let Ok((nr, nj)) = residual(np, nl) {
                    let nn = nr.norm();
                    if nn.is_finite() && nn < norm {
                        p = np;
                        l = nl;
                        r = nr;
                        j = nj;
                        norm = nn;
                        accepted = true;
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !accepted || (scale * step.norm()) < 1e-16 {
                break;
            }
        }
        if !(norm <= TOLERANCE_PX) {
            return Err(Error::InverseDivergence { iterations: MAX_ITER, residual_px: norm });
        }
        Ok(self.ground.denormalize(&NormalizedGround::new(p, l, hn)))
    }
}

/// A sensor model with its current bias estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub model: RpcModel,
    pub bias: BiasCorrection,
}

/// Cameras keyed by image id.
///
/// Solvers parameterize ground points in the normalized box of the lowest-id
/// model (the *ground frame*), which keeps unknowns of order one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CameraSet {
    cameras: BTreeMap<u32, Camera>,
}

impl CameraSet {
    /// Cameras with zero bias.
    pub fn new(models: impl IntoIterator<Item = (u32, RpcModel)>) -> Self {
        Self {
            cameras: models
                .into_iter()
                .map(|(id, model)| (id, Camera { model, bias: BiasCorrection::default() }))
                .collect(),
        }
    }

    pub fn get(&self, id: u32) -> Option<&Camera> {
        self.cameras.get(&id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.cameras.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.cameras.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &Camera)> {
        self.cameras.iter().map(|(k, v)| (*k, v))
    }

    pub fn bias(&self, id: u32) -> BiasCorrection {
        self.cameras.get(&id).map(|c| c.bias).unwrap_or_default()
    }

    pub fn set_bias(&mut self, id: u32, bias: BiasCorrection) {
        if let Some(c) = self.cameras.get_mut(&id) {
            c.bias = bias;
        }
    }

    pub fn biases(&self) -> BTreeMap<u32, BiasCorrection> {
        self.cameras.iter().map(|(k, c)| (*k, c.bias)).collect()
    }

    fn camera(&self, id: u32) -> Result<&Camera> {
        self.cameras
            .get(&id)
            .ok_or_else(|| Error::ImageSetMismatch(format!("no camera for image {id}")))
    }

    /// Ground frame used to parameterize object points.
    pub fn frame(&self) -> GroundNormalization {
        self.cameras
            .values()
            .next()
            .map(|c| c.model.ground)
            .expect("camera set is empty")
    }

    /// Biased projection of `p` into image `id`.
    pub fn project(&self, id: u32, p: &GroundPoint) -> Result<ImagePoint> {
        let c = self.camera(id)?;
        c.model.forward_project(&c.bias, p)
    }

    /// Biased projection with the pixel Jacobian taken with respect to
    /// ground-frame coordinates.
    pub fn project_frame(&self, id: u32, p: &GroundPoint) -> Result<(ImagePoint, Matrix2x3<f64>)> {
        let c = self.camera(id)?;
        let (q, j) = c.model.project_with_jacobian(&c.bias, p)?;
        let s = self.frame().scales();
        Ok((q, Matrix2x3::from_fn(|r, k| j[(r, k)] * s[k])))
    }
}
