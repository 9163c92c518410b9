//! Synthetic scenes with known geometry: near-affine rational cameras with
//! controlled biases, a procedural ground texture draped over terrain, and
//! matches with configurable localization error.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{datum_direction, AdjustResult};
use crate::error::{Error, Result};
use crate::raster::{ImageRaster, RasterSet};
use crate::rpc::{BiasCorrection, CameraSet, GroundNormalization, GroundPoint, ImageNormalization, ImagePoint, RpcModel};
use crate::tracks::{Observation, Provenance, Track};

const CENTER_LAT: f64 = 34.0;
const CENTER_LON: f64 = -58.5;
const METRES_PER_DEGREE: f64 = 111_320.0;
const BASE_INTENSITY: f64 = 128.0;
const TEXTURE_WAVES: usize = 64;

/// Scene description; every field has a default so partial JSON is accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub images: usize,
    pub width: usize,
    pub height: usize,
    /// Adjustment tracks.
    pub points: usize,
    /// Noise-free tracks held out for external evaluation.
    pub check_points: usize,
    /// Each adjustment track is seen by a random subset of at least this many
    /// images; 0 means every image. Check tracks always see every image.
    pub min_views: usize,
    /// True biases are uniform in `[-bias_range, bias_range]` pixels.
    pub bias_range: f64,
    /// Image whose true bias is zero.
    pub anchor: u32,
    /// Standard deviation of the Gaussian match noise, pixels.
    pub match_noise: f64,
    /// Per-image systematic match displacement, uniform in `[-r, r]` per axis, pixels.
    pub match_offset: f64,
    /// Fraction of tracks with one grossly displaced observation.
    pub gross_fraction: f64,
    /// Magnitude range of gross displacements, pixels.
    pub gross_range: [f64; 2],
    pub gain_range: [f64; 2],
    pub offset_range: [f64; 2],
    /// Standard deviation of additive pixel noise, intensity units.
    pub image_noise: f64,
    /// Texture correlation length, pixels.
    pub texture_correlation: f64,
    /// Texture standard deviation, intensity units.
    pub contrast: f64,
    /// Terrain amplitude, metres.
    pub terrain_amplitude: f64,
    /// Largest normalized second-order coefficient.
    pub second_order: f64,
    /// Intensity exponent; 1 keeps radiometry exactly affine.
    pub gamma: f64,
    /// Ground sample distance, metres.
    pub gsd: f64,
    /// Tracks stay this many pixels inside every image.
    pub margin: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            images: 6,
            width: 512,
            height: 512,
            points: 300,
            check_points: 30,
            min_views: 0,
            bias_range: 5.0,
            anchor: 0,
            match_noise: 0.5,
            match_offset: 0.0,
            gross_fraction: 0.0,
            gross_range: [3.0, 8.0],
            gain_range: [0.8, 1.25],
            offset_range: [-20.0, 20.0],
            image_noise: 1.0,
            texture_correlation: 3.0,
            contrast: 40.0,
            terrain_amplitude: 10.0,
            second_order: 1e-3,
            gamma: 1.0,
            gsd: 0.5,
            margin: 32.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if !(2..=8).contains(&self.images) {
            return bad(format!("image count must be 2..=8, got {}", self.images));
        }
        if self.width < 64 || self.height < 64 {
            return bad(format!("images must be at least 64x64, got {}x{}", self.width, self.height));
        }
        if self.points == 0 {
            return bad("point count must be positive".into());
        }
        if self.min_views != 0 && !(2..=self.images).contains(&self.min_views) {
            return bad(format!("min_views must be 0 or 2..={}, got {}", self.images, self.min_views));
        }
        if self.anchor as usize >= self.images {
            return bad(format!("anchor {} outside 0..{}", self.anchor, self.images));
        }
        let values = [
            self.bias_range,
            self.match_noise,
            self.match_offset,
            self.gross_fraction,
            self.gross_range[0],
            self.gross_range[1],
            self.gain_range[0],
            self.gain_range[1],
            self.offset_range[0],
            self.offset_range[1],
            self.image_noise,
            self.texture_correlation,
            self.contrast,
            self.terrain_amplitude,
            self.second_order,
            self.gamma,
            self.gsd,
            self.margin,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return bad("scene parameters must be finite".into());
        }
        if self.bias_range < 0.0 || self.match_noise < 0.0 || self.match_offset < 0.0 || self.image_noise < 0.0 {
            return bad("ranges and noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.gross_fraction) {
            return bad(format!("gross fraction must be in [0, 1], got {}", self.gross_fraction));
        }
        if self.gross_range[0] > self.gross_range[1] || self.gain_range[0] > self.gain_range[1] || self.offset_range[0] > self.offset_range[1] {
            return bad("range bounds must be ordered".into());
        }
        if self.gain_range[0] <= 0.0 || self.gamma <= 0.0 || self.gsd <= 0.0 || self.texture_correlation <= 0.0 {
            return bad("gain, gamma, gsd and correlation length must be positive".into());
        }
        if self.second_order < 0.0 || self.second_order > 0.01 {
            return bad(format!("second-order magnitude must be in [0, 0.01], got {}", self.second_order));
        }
        if 2.0 * self.margin >= self.width.min(self.height) as f64 {
            return bad("margin leaves no room for tracks".into());
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn metres_per_degree(&self) -> (f64, f64) {
        (METRES_PER_DEGREE, METRES_PER_DEGREE * CENTER_LAT.to_radians().cos())
    }

    /// Ground box shared by all models: the imaged area plus a border.
    fn ground_normalization(&self) -> GroundNormalization {
        let (m_lat, m_lon) = self.metres_per_degree();
        let half = 0.6 * self.width.max(self.height) as f64 * self.gsd;
        GroundNormalization {
            lat_off: CENTER_LAT,
            lat_scale: half / m_lat,
            lon_off: CENTER_LON,
            lon_scale: half / m_lon,
            h_off: 0.0,
            h_scale: (1.5 * self.terrain_amplitude).max(50.0),
        }
    }
}

/// Deterministic rational model for image `index`: a metric affine view
/// (small rotation, scale jitter, off-nadir parallax) plus small second-order
/// terms.
pub fn make_rpc(spec: &SceneSpec, index: usize) -> RpcModel {
    let mut rng = spec.rng(1000 + index as u64);
    let ground = spec.ground_normalization();
    let (w, h) = (spec.width as f64, spec.height as f64);
    let image = ImageNormalization {
        samp_off: w / 2.0,
        samp_scale: w / 2.0,
        line_off: h / 2.0,
        line_scale: h / 2.0,
    };
    let (m_lat, m_lon) = spec.metres_per_degree();
    let gsd = spec.gsd * (1.0 + rng.gen_range(-0.03..0.03));
    let rot = rng.gen_range(-2.0f64..2.0).to_radians();
    let off_nadir = rng.gen_range(5.0f64..25.0).to_radians();
    let azimuth = 2.0 * PI * (index as f64 + rng.gen_range(0.0..0.6)) / spec.images as f64;
    let (te, tn) = (off_nadir.tan() * azimuth.sin(), off_nadir.tan() * azimuth.cos());
    let shift = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
    // pixel offsets from the image centre:
    // [col, row] = R · [E + h·te, -(N + h·tn)] / gsd + shift
    let r = Matrix2::new(rot.cos(), -rot.sin(), rot.sin(), rot.cos());
    let de_dl = ground.lon_scale * m_lon;
    let dn_dp = ground.lat_scale * m_lat;
    let dh = ground.h_scale;
    let col_lph = [
        r[(0, 0)] * de_dl / gsd,
        -r[(0, 1)] * dn_dp / gsd,
        (r[(0, 0)] * te - r[(0, 1)] * tn) * dh / gsd,
    ];
    let row_lph = [
        r[(1, 0)] * de_dl / gsd,
        -r[(1, 1)] * dn_dp / gsd,
        (r[(1, 0)] * te - r[(1, 1)] * tn) * dh / gsd,
    ];
    let mut model = RpcModel::constant(ground, image);
    model.samp_num[0] = shift.0 / image.samp_scale;
    model.line_num[0] = shift.1 / image.line_scale;
    for k in 0..3 {
        model.samp_num[1 + k] = col_lph[k] / image.samp_scale;
        model.line_num[1 + k] = row_lph[k] / image.line_scale;
    }
    let so = spec.second_order;
    for t in 4..10 {
        if so > 0.0 {
            model.samp_num[t] = rng.gen_range(-so..=so);
            model.line_num[t] = rng.gen_range(-so..=so);
            model.samp_den[t] = rng.gen_range(-so..=so) * 0.25;
            model.line_den[t] = rng.gen_range(-so..=so) * 0.25;
        }
    }
    model
}

/// Low-frequency height field over local metric coordinates.
#[derive(Debug, Clone)]
struct Terrain {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Terrain {
    fn new(spec: &SceneSpec) -> Self {
        let mut rng = spec.rng(1);
        let extent = spec.width.max(spec.height) as f64 * spec.gsd;
        let waves = (0..3)
            .map(|k| {
                let wavelength = extent * rng.gen_range(1.0..2.0) / (k as f64 + 1.0);
                let angle = rng.gen_range(0.0..2.0 * PI);
                let kk = 2.0 * PI / wavelength;
                let amp = spec.terrain_amplitude / (k as f64 + 1.5);
                (kk * angle.cos(), kk * angle.sin(), rng.gen_range(0.0..2.0 * PI), amp)
            })
            .collect();
        Self { waves }
    }

    fn height(&self, e: f64, n: f64) -> f64 {
        self.waves.iter().map(|(ke, kn, ph, a)| a * (ke * e + kn * n + ph).cos()).sum()
    }

    fn gradient(&self, e: f64, n: f64) -> (f64, f64) {
        self.waves.iter().fold((0.0, 0.0), |(ge, gn), (ke, kn, ph, a)| {
            let s = -a * (ke * e + kn * n + ph).sin();
            (ge + s * ke, gn + s * kn)
        })
    }
}

/// Band-limited Gaussian random field: random-phase cosines with a Gaussian
/// spectrum matching the requested correlation length.
#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<(f64, f64, f64)>,
    amplitude: f64,
}

impl Texture {
    fn new(spec: &SceneSpec) -> Self {
        let mut rng = spec.rng(2);
        let ell = spec.texture_correlation * spec.gsd;
        let normal = Normal::new(0.0, 1.0 / ell).expect("positive correlation length");
        let nyquist = 0.8 * PI / spec.gsd;
        let mut waves = Vec::with_capacity(TEXTURE_WAVES);
        while waves.len() < TEXTURE_WAVES {
            let (ke, kn) = (normal.sample(&mut rng), normal.sample(&mut rng));
            if ke.hypot(kn) < nyquist {
                waves.push((ke, kn, rng.gen_range(0.0..2.0 * PI)));
            }
        }
        Self { waves, amplitude: spec.contrast * (2.0 / TEXTURE_WAVES as f64).sqrt() }
    }

    fn value(&self, e: f64, n: f64) -> f64 {
        self.amplitude * self.waves.iter().map(|(ke, kn, ph)| (ke * e + kn * n + ph).cos()).sum::<f64>()
    }
}

/// Radiometric distortion of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Radiometry {
    pub gain: f64,
    pub offset: f64,
}

/// A rendered scene with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: SceneSpec,
    pub models: BTreeMap<u32, RpcModel>,
    pub true_biases: BTreeMap<u32, BiasCorrection>,
    pub radiometry: BTreeMap<u32, Radiometry>,
    pub rasters: RasterSet,
    /// True ground point of each adjustment track, by position.
    pub grounds: Vec<GroundPoint>,
    /// Exact projections through the biased true models.
    pub perfect_tracks: Vec<Track>,
    /// Perfect tracks plus match noise, systematic offsets and gross errors.
    pub tracks: Vec<Track>,
    pub check_tracks: Vec<Track>,
    pub check_grounds: Vec<GroundPoint>,
}

impl SynthScene {
    /// True models with their true biases.
    pub fn true_cameras(&self) -> CameraSet {
        let mut cams = self.initial_cameras();
        for (id, b) in &self.true_biases {
            cams.set_bias(*id, *b);
        }
        cams
    }

    /// True models with zero biases: the starting point of an adjustment.
    pub fn initial_cameras(&self) -> CameraSet {
        CameraSet::new(self.models.iter().map(|(k, m)| (*k, m.clone())))
    }
}

fn to_ground(spec: &SceneSpec, e: f64, n: f64, h: f64) -> GroundPoint {
    let (m_lat, m_lon) = spec.metres_per_degree();
    GroundPoint::new(CENTER_LAT + n / m_lat, CENTER_LON + e / m_lon, h)
}

fn to_metric(spec: &SceneSpec, p: &GroundPoint) -> (f64, f64) {
    let (m_lat, m_lon) = spec.metres_per_degree();
    ((p.lon - CENTER_LON) * m_lon, (p.lat - CENTER_LAT) * m_lat)
}

/// Hash of `(seed, image, x, y)` to a standard normal deviate.
fn pixel_noise(seed: u64, image: u32, x: usize, y: usize) -> f64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let a = mix(seed ^ mix(((image as u64) << 48) ^ ((y as u64) << 24) ^ x as u64));
    let b = mix(a);
    let u1 = ((a >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Ground coordinates (metric) seen by pixel `q`, honoring the terrain.
fn pixel_ground(
    spec: &SceneSpec,
    model: &RpcModel,
    bias: &BiasCorrection,
    terrain: &Terrain,
    q: &ImagePoint,
    guess: (f64, f64),
) -> Option<(f64, f64)> {
    let (m_lat, m_lon) = spec.metres_per_degree();
    let (mut e, mut n) = guess;
    for _ in 0..8 {
        let h = terrain.height(e, n);
        let (p, j) = model.project_with_jacobian(bias, &to_ground(spec, e, n, h)).ok()?;
        let r = Vector2::new(p.x - q.x, p.y - q.y);
        if r.norm() < 1e-7 {
            return Some((e, n));
        }
        let (ge, gn) = terrain.gradient(e, n);
        let jm = Matrix2::new(
            j[(0, 1)] / m_lon + j[(0, 2)] * ge,
            j[(0, 0)] / m_lat + j[(0, 2)] * gn,
            j[(1, 1)] / m_lon + j[(1, 2)] * ge,
            j[(1, 0)] / m_lat + j[(1, 2)] * gn,
        );
        let step = jm.try_inverse()? * r;
        e -= step[0];
        n -= step[1];
    }
    let h = terrain.height(e, n);
    let p = model.forward_project(bias, &to_ground(spec, e, n, h)).ok()?;
    (p.distance(q) < 1e-4).then_some((e, n))
}

fn render_image(
    spec: &SceneSpec,
    id: u32,
    model: &RpcModel,
    bias: &BiasCorrection,
    terrain: &Terrain,
    texture: &Texture,
    radiometry: Radiometry,
) -> Result<ImageRaster> {
    let (w, h) = (spec.width, spec.height);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let start = model
                .backward_project(bias, &ImagePoint::new(0.0, y as f64), 0.0)
                .map(|g| to_metric(spec, &g))
                .unwrap_or((0.0, 0.0));
            let mut guess = start;
            (0..w)
                .map(|x| {
                    let q = ImagePoint::new(x as f64, y as f64);
                    let (e, n) = pixel_ground(spec, model, bias, terrain, &q, guess)
                        .or_else(|| {
                            let g = model.backward_project(bias, &q, 0.0).ok()?;
                            pixel_ground(spec, model, bias, terrain, &q, to_metric(spec, &g))
                        })
                        .unwrap_or(guess);
                    guess = (e, n);
                    let t = ((BASE_INTENSITY + texture.value(e, n)) / 255.0).max(0.0);
                    let v = 255.0 * t.powf(spec.gamma);
                    radiometry.gain * v + radiometry.offset + spec.image_noise * pixel_noise(spec.seed, id, x, y)
                })
                .collect()
        })
        .collect();
    ImageRaster::new(id, w, h, rows.into_iter().flatten().collect())
}

/// Samples ground points whose projections stay inside every image.
fn sample_points(spec: &SceneSpec, cams: &CameraSet, terrain: &Terrain, count: usize, stream: u64) -> Vec<GroundPoint> {
    let mut rng = spec.rng(stream);
    let half = 0.5 * spec.width.max(spec.height) as f64 * spec.gsd;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count && attempts < 1000 * count.max(1) {
        attempts += 1;
        let (e, n) = (rng.gen_range(-half..half), rng.gen_range(-half..half));
        let p = to_ground(spec, e, n, terrain.height(e, n));
        let inside = cams.ids().all(|id| {
            cams.project(id, &p)
                .map(|q| q.x >= spec.margin && q.y >= spec.margin && q.x <= w - 1.0 - spec.margin && q.y <= h - 1.0 - spec.margin)
                .unwrap_or(false)
        });
        if inside {
            out.push(p);
        }
    }
    out
}

fn perfect_track(id: u64, cams: &CameraSet, p: &GroundPoint) -> Result<Track> {
    let obs = cams
        .ids()
        .map(|i| Ok(Observation::new(i, cams.project(i, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut t = Track::new(id, obs);
    t.provenance = Provenance::Synthetic;
    Ok(t)
}

/// Renders a complete scene. Fully determined by `spec`.
pub fn render_scene(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let ids: Vec<u32> = (0..spec.images as u32).collect();
    let models: BTreeMap<u32, RpcModel> = ids.iter().map(|&k| (k, make_rpc(spec, k as usize))).collect();
    let mut cams = CameraSet::new(models.iter().map(|(k, m)| (*k, m.clone())));

    let dirs = datum_direction(&cams, spec.anchor)?;
    let mut rng = spec.rng(3);
    let mut raw: BTreeMap<u32, Vector2<f64>> = BTreeMap::new();
    for &id in &ids {
        let v = Vector2::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)) * spec.bias_range;
        if id != spec.anchor {
            raw.insert(id, v);
        }
    }
    let along: f64 = raw.iter().map(|(id, v)| v.dot(&dirs[id])).sum();
    let mut true_biases = BTreeMap::new();
    for &id in &ids {
        let b = match raw.get(&id) {
            Some(v) => v - along * dirs[&id],
            None => Vector2::zeros(),
        };
        true_biases.insert(id, BiasCorrection::new(b[0], b[1]));
        cams.set_bias(id, BiasCorrection::new(b[0], b[1]));
    }

    let mut rng = spec.rng(4);
    let radiometry: BTreeMap<u32, Radiometry> = ids
        .iter()
        .map(|&id| {
            let gain = if spec.gain_range[0] < spec.gain_range[1] { rng.gen_range(spec.gain_range[0]..spec.gain_range[1]) } else { spec.gain_range[0] };
            let offset = if spec.offset_range[0] < spec.offset_range[1] { rng.gen_range(spec.offset_range[0]..spec.offset_range[1]) } else { spec.offset_range[0] };
            (id, Radiometry { gain, offset })
        })
        .collect();

    let terrain = Terrain::new(spec);
    let texture = Texture::new(spec);
    let rasters = ids
        .iter()
        .map(|&id| render_image(spec, id, &models[&id], &true_biases[&id], &terrain, &texture, radiometry[&id]))
        .collect::<Result<Vec<_>>>()?;

    let grounds = sample_points(spec, &cams, &terrain, spec.points, 5);
    let check_grounds = sample_points(spec, &cams, &terrain, spec.check_points, 6);
    let mut rng = spec.rng(8);
    let perfect_tracks = grounds
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut t = perfect_track(k as u64, &cams, p)?;
            if spec.min_views != 0 && spec.min_views < spec.images {
                let count = rng.gen_range(spec.min_views..=spec.images);
                let mut keep = rand::seq::index::sample(&mut rng, spec.images, count).into_vec();
                keep.sort_unstable();
                t.observations = keep.into_iter().map(|i| t.observations[i].clone()).collect();
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let check_tracks = check_grounds
        .iter()
        .enumerate()
        .map(|(k, p)| perfect_track((spec.points + k) as u64, &cams, p))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = spec.rng(7);
    let offsets: BTreeMap<u32, (f64, f64)> = ids
        .iter()
        .map(|&id| {
            let r = spec.match_offset;
            let o = if r > 0.0 { (rng.gen_range(-r..=r), rng.gen_range(-r..=r)) } else { (0.0, 0.0) };
            (id, o)
        })
        .collect();
    let noise = Normal::new(0.0, spec.match_noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let tracks = perfect_tracks
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for o in &mut t.observations {
                let (ox, oy) = offsets[&o.image];
                o.point.x += ox;
                o.point.y += oy;
                if spec.match_noise > 0.0 {
                    o.point.x += noise.sample(&mut rng);
                    o.point.y += noise.sample(&mut rng);
                }
            }
            if spec.gross_fraction > 0.0 && rng.gen_bool(spec.gross_fraction) {
                let k = rng.gen_range(0..t.observations.len());
                let mag = if spec.gross_range[0] < spec.gross_range[1] { rng.gen_range(spec.gross_range[0]..spec.gross_range[1]) } else { spec.gross_range[0] };
                let ang = rng.gen_range(0.0..2.0 * PI);
                t.observations[k].point.x += mag * ang.cos();
                t.observations[k].point.y += mag * ang.sin();
            }
            t
        })
        .collect();

    Ok(SynthScene {
        spec: spec.clone(),
        models,
        true_biases,
        radiometry,
        rasters: RasterSet::new(rasters),
        grounds,
        perfect_tracks,
        tracks,
        check_tracks,
        check_grounds,
    })
}

/// Anchor-relative bias error: RMSE over non-anchor images of
/// `|(b_est − b_est[anchor]) − (b_true − b_true[anchor])|`.
pub fn bias_error(
    estimated: &BTreeMap<u32, BiasCorrection>,
    truth: &BTreeMap<u32, BiasCorrection>,
    anchor: u32,
) -> Result<f64> {
    let est_ids: Vec<&u32> = estimated.keys().collect();
    let true_ids: Vec<&u32> = truth.keys().collect();
    if est_ids != true_ids {
        return Err(Error::ImageSetMismatch(format!("estimated images {est_ids:?} differ from truth {true_ids:?}")));
    }
    let (ea, ta) = match (estimated.get(&anchor), truth.get(&anchor)) {
        (Some(e), Some(t)) => (*e, *t),
        _ => return Err(Error::ImageSetMismatch(format!("anchor image {anchor} missing"))),
    };
    let mut sum = 0.0;
    let mut count = 0;
    for (id, e) in estimated {
        if *id == anchor {
            continue;
        }
        let t = truth[id];
        let dx = (e.x0 - ea.x0) - (t.x0 - ta.x0);
        let dy = (e.y0 - ea.y0) - (t.y0 - ta.y0);
        sum += dx * dx + dy * dy;
        count += 1;
    }
    if count == 0 {
        return Err(Error::ImageSetMismatch("no non-anchor images to compare".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// [`bias_error`] for an adjustment result against a scene's truth.
pub fn truth_error(result: &AdjustResult, scene: &SynthScene) -> Result<f64> {
    bias_error(&result.biases, &scene.true_biases, result.anchor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{zncc, MatchWindow};

    fn small(seed: u64) -> SceneSpec {
        SceneSpec { seed, images: 3, width: 160, height: 160, points: 40, check_points: 5, margin: 16.0, ..SceneSpec::default() }
    }

    #[test]
    fn affine_model_inverts_exactly() {
        let spec = SceneSpec { second_order: 0.0, ..small(3) };
        let m = make_rpc(&spec, 1);
        for k in 4..20 {
            assert_eq!(m.samp_num[k], 0.0);
            assert_eq!(m.line_den[k], 0.0);
        }
        let bias = BiasCorrection::default();
        let q = ImagePoint::new(37.25, 101.5);
        let h = 12.0;
        // analytic inverse of the linear part in normalized coordinates
        let hn = (h - m.ground.h_off) / m.ground.h_scale;
        let xs = (q.x - m.image.samp_off) / m.image.samp_scale - m.samp_num[0] - m.samp_num[3] * hn;
        let ys = (q.y - m.image.line_off) / m.image.line_scale - m.line_num[0] - m.line_num[3] * hn;
        let a = Matrix2::new(m.samp_num[2], m.samp_num[1], m.line_num[2], m.line_num[1]);
        let pl = a.try_inverse().unwrap() * Vector2::new(xs, ys);
        let expected = GroundPoint::new(
            pl[0] * m.ground.lat_scale + m.ground.lat_off,
            pl[1] * m.ground.lon_scale + m.ground.lon_off,
            h,
        );
        let got = m.backward_project(&bias, &q, h).unwrap();
        assert!((got.lat - expected.lat).abs() < 1e-12 && (got.lon - expected.lon).abs() < 1e-12);
    }

    #[test]
    fn denominators_stay_near_one() {
        for seed in 0..5 {
            let spec = SceneSpec { second_order: 0.01, ..small(seed) };
            for k in 0..spec.images {
                let m = make_rpc(&spec, k);
                let steps = 11;
                for i in 0..steps {
                    for j in 0..steps {
                        for l in 0..steps {
                            let c = |s: usize| -1.0 + 2.0 * s as f64 / (steps - 1) as f64;
                            let g = crate::rpc::NormalizedGround::new(c(i), c(j), c(l));
                            let t = crate::rpc::terms(&g);
                            for den in [&m.samp_den, &m.line_den] {
                                let d: f64 = den.iter().zip(&t).map(|(a, b)| a * b).sum();
                                assert!(d > 0.9);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn models_are_deterministic() {
        let spec = small(8);
        assert_eq!(make_rpc(&spec, 1), make_rpc(&spec, 1));
        assert_ne!(make_rpc(&spec, 0), make_rpc(&spec, 1));
    }

    #[test]
    fn perfect_tracks_reproject_exactly() {
        let scene = render_scene(&small(2)).unwrap();
        let cams = scene.true_cameras();
        assert_eq!(scene.tracks.len(), 40);
        for (t, p) in scene.perfect_tracks.iter().zip(&scene.grounds) {
            for o in &t.observations {
                assert!(cams.project(o.image, p).unwrap().distance(&o.point) < 1e-6);
            }
        }
        assert_eq!(scene.true_biases[&0], BiasCorrection::default());
        let dirs = datum_direction(&cams, 0).unwrap();
        let dot: f64 = dirs.iter().map(|(id, g)| g[0] * scene.true_biases[id].x0 + g[1] * scene.true_biases[id].y0).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn clean_rendering_is_self_consistent() {
        let spec = SceneSpec {
            bias_range: 0.0,
            image_noise: 0.0,
            gain_range: [1.0, 1.0],
            offset_range: [0.0, 0.0],
            texture_correlation: 4.0,
            ..small(4)
        };
        let scene = render_scene(&spec).unwrap();
        let mut scores = Vec::new();
        for t in &scene.perfect_tracks {
            let w0 = MatchWindow::extract(scene.rasters.get(0).unwrap(), t.observations[0].point, 7).unwrap();
            let w1 = MatchWindow::extract(scene.rasters.get(1).unwrap(), t.observations[1].point, 7).unwrap();
            scores.push(zncc(&w0, &w1).unwrap());
        }
        scores.sort_by(f64::total_cmp);
        let median = scores[scores.len() / 2];
        assert!(median > 0.99, "median zncc {median}");
    }

    #[test]
    fn radiometric_change_keeps_correlation() {
        let base = SceneSpec { image_noise: 0.0, gain_range: [1.0, 1.0], offset_range: [0.0, 0.0], texture_correlation: 4.0, ..small(5) };
        let plain = render_scene(&base).unwrap();
        let bright = render_scene(&SceneSpec { gain_range: [2.0, 2.0], offset_range: [50.0, 50.0], ..base }).unwrap();
        let p = plain.perfect_tracks[0].observations[1].point;
        let a = MatchWindow::extract(plain.rasters.get(1).unwrap(), p, 9).unwrap();
        let b = MatchWindow::extract(bright.rasters.get(1).unwrap(), p, 9).unwrap();
        assert!(zncc(&a, &b).unwrap() > 0.99);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((2.0 * x + 50.0 - y).abs() < 1e-9);
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = render_scene(&small(6)).unwrap();
        let b = render_scene(&small(6)).unwrap();
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.true_biases, b.true_biases);
        for (x, y) in a.rasters.iter().zip(b.rasters.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn view_subsets_respect_the_minimum() {
        let spec = SceneSpec { images: 5, min_views: 3, ..small(9) };
        let scene = render_scene(&spec).unwrap();
        let counts: Vec<usize> = scene.tracks.iter().map(|t| t.observations.len()).collect();
        assert!(counts.iter().all(|c| (3..=5).contains(c)));
        assert!(counts.iter().any(|&c| c < 5));
        assert!(scene.check_tracks.iter().all(|t| t.observations.len() == 5));
        for t in &scene.tracks {
            assert!(t.observations.windows(2).all(|w| w[0].image < w[1].image));
        }
        assert!(SceneSpec { min_views: 1, ..small(0) }.validate().is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SceneSpec { images: 1, ..small(0) }.validate().is_err());
        assert!(SceneSpec { match_noise: f64::NAN, ..small(0) }.validate().is_err());
        assert!(SceneSpec { gross_fraction: 2.0, ..small(0) }.validate().is_err());
    }

    #[test]
    fn bias_error_examples() {
        let truth: BTreeMap<u32, BiasCorrection> = [(0, (0.0, 0.0)), (1, (1.5, -2.0)), (2, (-3.0, 0.5)), (3, (0.25, 4.0))]
            .into_iter()
            .map(|(k, (x, y))| (k, BiasCorrection::new(x, y)))
            .collect();
        assert_eq!(bias_error(&truth, &truth, 0).unwrap(), 0.0);
        let shifted = truth.iter().map(|(k, b)| (*k, BiasCorrection::new(b.x0 + 0.7, b.y0 - 1.1))).collect();
        assert!(bias_error(&shifted, &truth, 0).unwrap() < 1e-12);
        let mut one = truth.clone();
        one.get_mut(&2).unwrap().x0 += 0.1;
        assert!((bias_error(&one, &truth, 0).unwrap() - 0.1 / 3f64.sqrt()).abs() < 1e-12);
        let mut missing = truth.clone();
        missing.remove(&3);
        assert!(matches!(bias_error(&missing, &truth, 0), Err(Error::ImageSetMismatch(_))));
    }
}
