//! Single-band intensity rasters, bilinear sampling and window correlation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rpc::ImagePoint;

/// Row-major single-band image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    id: u32,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageRaster {
    pub fn new(id: u32, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!("raster {id}: empty dimensions {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "raster {id}: expected {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("raster {id}: non-finite intensity")));
        }
        Ok(Self { id, width, height, data })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Stored pixel at integer coordinates.
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Whether `q` lies inside `[margin, w-1-margin] x [margin, h-1-margin]`.
    pub fn contains(&self, q: &ImagePoint, margin: f64) -> bool {
        q.x >= margin
            && q.y >= margin
            && q.x <= (self.width - 1) as f64 - margin
            && q.y <= (self.height - 1) as f64 - margin
    }

    /// Cell origin and fractional offset along one axis; the last pixel maps
    /// into the final cell with fraction 1.
    fn cell(coord: f64, len: usize) -> (usize, f64) {
        if len == 1 {
            return (0, 0.0);
        }
        let i = (coord.floor() as usize).min(len - 2);
        (i, coord - i as f64)
    }

    /// Bilinear interpolation; exact at integer coordinates.
    pub fn sample_bilinear(&self, q: &ImagePoint) -> Result<f64> {
        self.sample_with_gradient(q).map(|(v, _, _)| v)
    }

    /// Bilinear value together with the exact partial derivatives of the
    /// interpolated surface. On cell boundaries the derivative of the cell to
    /// the right / below is returned.
    pub fn sample_with_gradient(&self, q: &ImagePoint) -> Result<(f64, f64, f64)> {
        if !self.contains(q, 0.0) {
            return Err(Error::Sampling { x: q.x, y: q.y });
        }
        let (x0, fx) = Self::cell(q.x, self.width);
        let (y0, fy) = Self::cell(q.y, self.height);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let i00 = self.get(x0, y0);
        let i10 = self.get(x1, y0);
        let i01 = self.get(x0, y1);
        let i11 = self.get(x1, y1);
        let top = i00 + fx * (i10 - i00);
        let bottom = i01 + fx * (i11 - i01);
        let value = top + fy * (bottom - top);
        let gx = (1.0 - fy) * (i10 - i00) + fy * (i11 - i01);
        let gy = bottom - top;
        Ok((value, gx, gy))
    }

    /// Central-difference gradient of the bilinear surface with a 1 px step.
    pub fn gradient_at(&self, q: &ImagePoint) -> Result<(f64, f64)> {
        if !self.contains(q, 1.0) {
            return Err(Error::Sampling { x: q.x, y: q.y });
        }
        let s = |x: f64, y: f64| self.sample_bilinear(&ImagePoint::new(x, y));
        let gx = (s(q.x + 1.0, q.y)? - s(q.x - 1.0, q.y)?) / 2.0;
        let gy = (s(q.x, q.y + 1.0)? - s(q.x, q.y - 1.0)?) / 2.0;
        Ok((gx, gy))
    }
}

/// Rasters keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct RasterSet {
    rasters: BTreeMap<u32, ImageRaster>,
}

impl RasterSet {
    pub fn new(rasters: impl IntoIterator<Item = ImageRaster>) -> Self {
        Self {
            rasters: rasters.into_iter().map(|r| (r.id(), r)).collect(),
        }
    }

    pub fn get(&self, id: u32) -> Option<&ImageRaster> {
        self.rasters.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.rasters.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageRaster> {
        self.rasters.values()
    }

    pub fn len(&self) -> usize {
        self.rasters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rasters.is_empty()
    }
}

/// Square window of `size x size` samples around a center, row-major with
/// offsets `δ = (u, v)`, `u, v ∈ [-(size-1)/2, (size-1)/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchWindow {
    pub center: ImagePoint,
    pub size: usize,
    pub samples: Vec<f64>,
}

/// Offsets of a `size x size` window in sample order.
pub fn window_offsets(size: usize) -> Vec<(f64, f64)> {
    let r = (size / 2) as i64;
    let mut out = Vec::with_capacity(size * size);
    for v in -r..=r {
        for u in -r..=r {
            out.push((u as f64, v as f64));
        }
    }
    out
}

impl MatchWindow {
    /// Samples a window; fails if any sample falls outside the raster.
    pub fn extract(raster: &ImageRaster, center: ImagePoint, size: usize) -> Result<Self> {
        if size < 3 || size % 2 == 0 {
            return Err(Error::Validation(format!("window size must be odd and >= 3, got {size}")));
        }
        let samples = window_offsets(size)
            .into_iter()
            .map(|(u, v)| raster.sample_bilinear(&ImagePoint::new(center.x + u, center.y + v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { center, size, samples })
    }

    pub fn mean_and_std(&self) -> (f64, f64) {
        mean_and_std(&self.samples)
    }
}

/// Population mean and standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Relative variance floor below which a window counts as textureless.
const MIN_VARIANCE: f64 = 1e-20;

pub(crate) fn is_flat(values: &[f64], mean: f64, std: f64) -> bool {
    let scale = values.iter().map(|v| v.abs()).fold(mean.abs(), f64::max).max(1.0);
    std * std <= MIN_VARIANCE * scale * scale
}

/// Zero-mean normalized cross-correlation of two equally sized sample sets.
pub fn zncc_samples(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "zncc on windows of different size");
    let (ma, sa) = mean_and_std(a);
    let (mb, sb) = mean_and_std(b);
    if is_flat(a, ma, sa) || is_flat(b, mb, sb) {
        return Err(Error::UndefinedCorrelation);
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

/// Zero-mean normalized cross-correlation in `[-1, 1]`.
pub fn zncc(a: &MatchWindow, b: &MatchWindow) -> Result<f64> {
    if a.size != b.size {
        return Err(Error::Validation(format!("window sizes differ: {} vs {}", a.size, b.size)));
    }
    zncc_samples(&a.samples, &b.samples)
}

/// Rescales every window to zero mean and unit standard deviation.
pub fn normalize_window_set(windows: &[MatchWindow]) -> Result<Vec<MatchWindow>> {
    windows
        .iter()
        .map(|w| {
            let (mean, std) = w.mean_and_std();
            if is_flat(&w.samples, mean, std) {
                return Err(Error::UndefinedCorrelation);
            }
            Ok(MatchWindow {
                center: w.center,
                size: w.size,
                samples: w.samples.iter().map(|v| (v - mean) / std).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize, a: f64, b: f64, c: f64) -> ImageRaster {
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| a * x as f64 + b * y as f64 + c))
            .collect();
        ImageRaster::new(0, w, h, data).unwrap()
    }

    fn smooth(w: usize, h: usize) -> ImageRaster {
        let data = (0..h)
            .flat_map(|y| {
                (0..w).map(move |x| {
                    let (x, y) = (x as f64, y as f64);
                    100.0 + 30.0 * (0.21 * x + 0.4).sin() * (0.17 * y - 0.3).cos() + 10.0 * (0.05 * x + 0.13 * y).sin()
                })
            })
            .collect();
        ImageRaster::new(1, w, h, data).unwrap()
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let r = smooth(16, 12);
        for (x, y) in [(0, 0), (15, 11), (7, 3), (15, 0)] {
            let v = r.sample_bilinear(&ImagePoint::new(x as f64, y as f64)).unwrap();
            assert_eq!(v, r.get(x, y));
        }
    }

    #[test]
    fn midpoint_interpolation() {
        let r = ImageRaster::new(0, 2, 1, vec![10.0, 20.0]).unwrap();
        assert_eq!(r.sample_bilinear(&ImagePoint::new(0.5, 0.0)).unwrap(), 15.0);
    }

    #[test]
    fn ramp_reproduced_at_subpixel_points() {
        let r = ramp(20, 20, 3.0, 5.0, -7.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let q = ImagePoint::new(rng.gen_range(0.0..19.0), rng.gen_range(0.0..19.0));
            let v = r.sample_bilinear(&q).unwrap();
            assert!((v - (3.0 * q.x + 5.0 * q.y - 7.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_sampling_fails() {
        let r = ramp(8, 8, 1.0, 1.0, 0.0);
        assert!(matches!(r.sample_bilinear(&ImagePoint::new(-0.01, 3.0)), Err(Error::Sampling { .. })));
        assert!(r.sample_bilinear(&ImagePoint::new(7.0, 7.0)).is_ok());
        assert!(r.sample_bilinear(&ImagePoint::new(7.0001, 7.0)).is_err());
    }

    #[test]
    fn gradient_of_constant_and_ramp() {
        let c = ramp(10, 10, 0.0, 0.0, 42.0);
        assert_eq!(c.gradient_at(&ImagePoint::new(4.3, 5.1)).unwrap(), (0.0, 0.0));
        let r = ramp(10, 10, 3.0, 5.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q = ImagePoint::new(rng.gen_range(1.0..8.0), rng.gen_range(1.0..8.0));
            let (gx, gy) = r.gradient_at(&q).unwrap();
            assert!((gx - 3.0).abs() < 1e-12 && (gy - 5.0).abs() < 1e-12);
        }
        assert!(r.gradient_at(&ImagePoint::new(0.5, 4.0)).is_err());
    }

    #[test]
    fn gradient_tracks_local_slope_on_smooth_texture() {
        let r = smooth(64, 64);
        let truth = |x: f64, y: f64| {
            let gx = 30.0 * 0.21 * (0.21 * x + 0.4).cos() * (0.17 * y - 0.3).cos() + 10.0 * 0.05 * (0.05 * x + 0.13 * y).cos();
            let gy = -30.0 * 0.17 * (0.21 * x + 0.4).sin() * (0.17 * y - 0.3).sin() + 10.0 * 0.13 * (0.05 * x + 0.13 * y).cos();
            (gx, gy)
        };
        let mut worst: f64 = 0.0;
        for y in 2..62 {
            for x in 2..62 {
                let (gx, gy) = r.gradient_at(&ImagePoint::new(x as f64, y as f64)).unwrap();
                let (tx, ty) = truth(x as f64, y as f64);
                worst = worst.max((gx - tx).hypot(gy - ty) / 7.8);
            }
        }
        assert!(worst < 2e-2, "worst relative gradient mismatch {worst}");
    }

    #[test]
    fn exact_surface_gradient_matches_finite_differences() {
        let r = smooth(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let step = 1e-5;
        for _ in 0..100 {
            // Keep clear of cell boundaries where the bilinear surface has kinks.
            let x = rng.gen_range(1..60) as f64 + rng.gen_range(0.01..0.99);
            let y = rng.gen_range(1..60) as f64 + rng.gen_range(0.01..0.99);
            let (_, gx, gy) = r.sample_with_gradient(&ImagePoint::new(x, y)).unwrap();
            let s = |x: f64, y: f64| r.sample_bilinear(&ImagePoint::new(x, y)).unwrap();
            let fx = (s(x + step, y) - s(x - step, y)) / (2.0 * step);
            let fy = (s(x, y + step) - s(x, y - step)) / (2.0 * step);
            assert!((gx - fx).abs() < 1e-6 * gx.abs().max(1.0));
            assert!((gy - fy).abs() < 1e-6 * gy.abs().max(1.0));
        }
    }

    fn window(samples: Vec<f64>) -> MatchWindow {
        let size = (samples.len() as f64).sqrt() as usize;
        MatchWindow { center: ImagePoint::default(), size, samples }
    }

    #[test]
    fn zncc_basic_properties() {
        let r = smooth(32, 32);
        let a = MatchWindow::extract(&r, ImagePoint::new(10.3, 12.7), 7).unwrap();
        assert!((zncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let scaled = window(a.samples.iter().map(|v| 2.5 * v + 40.0).collect());
        assert!((zncc(&a, &scaled).unwrap() - 1.0).abs() < 1e-12);
        let neg = window(a.samples.iter().map(|v| -v).collect());
        assert!((zncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let b = MatchWindow::extract(&r, ImagePoint::new(20.0, 5.0), 7).unwrap();
        assert_eq!(zncc(&a, &b).unwrap(), zncc(&b, &a).unwrap());
    }

    #[test]
    fn zncc_of_flat_window_is_undefined() {
        let flat = window(vec![3.0; 9]);
        let other = window((0..9).map(|v| v as f64).collect());
        assert!(matches!(zncc(&flat, &other), Err(Error::UndefinedCorrelation)));
    }

    #[test]
    fn normalization_properties() {
        let r = smooth(32, 32);
        let a = MatchWindow::extract(&r, ImagePoint::new(15.5, 14.25), 9).unwrap();
        let b = window(a.samples.iter().map(|v| 0.4 * v - 12.0).collect());
        let n = normalize_window_set(&[a.clone(), b]).unwrap();
        let (m, s) = n[0].mean_and_std();
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        for (x, y) in n[0].samples.iter().zip(&n[1].samples) {
            assert!((x - y).abs() < 1e-10);
        }
        let again = normalize_window_set(&n[..1]).unwrap();
        for (x, y) in again[0].samples.iter().zip(&n[0].samples) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(normalize_window_set(&[window(vec![1.0; 9])]).is_err());
    }

    #[test]
    fn extraction_requires_odd_size_and_interior() {
        let r = smooth(16, 16);
        assert!(MatchWindow::extract(&r, ImagePoint::new(8.0, 8.0), 4).is_err());
        assert!(MatchWindow::extract(&r, ImagePoint::new(1.0, 8.0), 5).is_err());
        assert!(MatchWindow::extract(&r, ImagePoint::new(2.0, 8.0), 5).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn zncc_invariant_under_positive_affine_maps(
                vals in proptest::collection::vec(-100.0f64..100.0, 25),
                other in proptest::collection::vec(-100.0f64..100.0, 25),
                alpha in 0.01f64..50.0,
                beta in -1000.0f64..1000.0,
            ) {
                let a = window(vals.clone());
                let b = window(other);
                let a2 = window(vals.iter().map(|v| alpha * v + beta).collect());
                if let (Ok(z1), Ok(z2)) = (zncc(&a, &b), zncc(&a2, &b)) {
                    prop_assert!((z1 - z2).abs() < 1e-10);
                }
            }

            #[test]
            fn bilinear_reproduces_affine_fields(a in -10.0f64..10.0, b in -10.0f64..10.0, c in -100.0f64..100.0, x in 0.0f64..11.0, y in 0.0f64..7.0) {
                let r = ramp(12, 8, a, b, c);
                let v = r.sample_bilinear(&ImagePoint::new(x, y)).unwrap();
                prop_assert!((v - (a * x + b * y + c)).abs() < 1e-12 * (1.0 + c.abs() + 20.0 * (a.abs() + b.abs())));
            }

            #[test]
            fn gradient_of_affine_field_is_constant(a in -10.0f64..10.0, b in -10.0f64..10.0, x in 1.0f64..10.0, y in 1.0f64..6.0) {
                let r = ramp(12, 8, a, b, 5.0);
                let (gx, gy) = r.gradient_at(&ImagePoint::new(x, y)).unwrap();
                prop_assert!((gx - a).abs() < 1e-11 && (gy - b).abs() < 1e-11);
            }
        }
    }
}
