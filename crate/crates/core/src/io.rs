//! File formats: RPC text, float32 / PGM rasters, JSON-lines tracks, truth and
//! report JSON. Every number written is rounded to 12 significant digits.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::pipeline::{RunReport, SceneInputs};
use crate::raster::{ImageRaster, RasterSet};
use crate::rpc::{
    BiasCorrection, CameraSet, GroundNormalization, GroundPoint, ImageNormalization, ImagePoint, RpcModel, RPC_TERMS,
};
use crate::synth::{Radiometry, SceneSpec, SynthScene};
use crate::tracks::{AffineCorrection, ObsStatus, Observation, Provenance, Track};

pub const SIGNIFICANT_DIGITS: usize = 12;
pub const F32_MAGIC: &[u8; 8] = b"SATBF32\0";
pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const TRUTH_FILE: &str = "truth.json";

/// `x` rounded to 12 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().expect("formatted float parses")
}

/// Shortest decimal text of `round_sig(x)`.
pub fn format_sig(x: f64) -> String {
    let r = round_sig(x);
    if r == 0.0 {
        return "0".into();
    }
    format!("{r}")
}

fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig(n.as_f64().expect("f64 number"));
            serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_value).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_value(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with every float rounded to 12 significant digits.
pub fn to_json_rounded<T: Serialize>(value: &T) -> Result<String> {
    let v = round_value(serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn compact_rounded<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&round_value(serde_json::to_value(value)?))?)
}

fn parse_error(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { source_name: source.to_string(), line, message: message.into() }
}

// ---------------------------------------------------------------- RPC text

const RPC_SCALARS: [&str; 10] = [
    "LINE_OFF",
    "SAMP_OFF",
    "LAT_OFF",
    "LONG_OFF",
    "HEIGHT_OFF",
    "LINE_SCALE",
    "SAMP_SCALE",
    "LAT_SCALE",
    "LONG_SCALE",
    "HEIGHT_SCALE",
];
const RPC_ARRAYS: [&str; 4] = ["LINE_NUM_COEFF", "LINE_DEN_COEFF", "SAMP_NUM_COEFF", "SAMP_DEN_COEFF"];

/// `KEY: value` text, one entry per line, coefficients numbered from 1.
pub fn rpc_to_string(model: &RpcModel) -> String {
    let g = &model.ground;
    let i = &model.image;
    let scalars = [
        i.line_off,
        i.samp_off,
        g.lat_off,
        g.lon_off,
        g.h_off,
        i.line_scale,
        i.samp_scale,
        g.lat_scale,
        g.lon_scale,
        g.h_scale,
    ];
    let mut out = String::new();
    for (k, v) in RPC_SCALARS.iter().zip(scalars) {
        out.push_str(&format!("{k}: {}\n", format_sig(v)));
    }
    let arrays = [&model.line_num, &model.line_den, &model.samp_num, &model.samp_den];
    for (k, coeffs) in RPC_ARRAYS.iter().zip(arrays) {
        for (n, v) in coeffs.iter().enumerate() {
            out.push_str(&format!("{k}_{}: {}\n", n + 1, format_sig(*v)));
        }
    }
    out
}

/// Parses RPC text. Trailing unit words after a value are ignored; unknown
/// keys are errors. The result is validated.
pub fn parse_rpc(text: &str, source: &str) -> Result<RpcModel> {
    let mut values: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line.split_once(':').ok_or_else(|| parse_error(source, line_no, "expected 'KEY: value'"))?;
        let key = key.trim().to_ascii_uppercase();
        let token = rest.split_whitespace().next().ok_or_else(|| parse_error(source, line_no, format!("{key} has no value")))?;
        let value: f64 = token.parse().map_err(|_| parse_error(source, line_no, format!("{key}: '{token}' is not a number")))?;
        if !value.is_finite() {
            return Err(parse_error(source, line_no, format!("{key} is not finite")));
        }
        let known = RPC_SCALARS.contains(&key.as_str())
            || RPC_ARRAYS.iter().any(|a| {
                key.strip_prefix(a)
                    .and_then(|s| s.strip_prefix('_'))
                    .and_then(|n| n.parse::<usize>().ok())
                    .is_some_and(|n| (1..=RPC_TERMS).contains(&n))
            });
        if !known {
            return Err(parse_error(source, line_no, format!("unknown key {key}")));
        }
        if values.insert(key.clone(), (value, line_no)).is_some() {
            return Err(parse_error(source, line_no, format!("duplicate key {key}")));
        }
    }
    let last_line = text.lines().count();
    let get = |k: &str| -> Result<f64> {
        values.get(k).map(|(v, _)| *v).ok_or_else(|| parse_error(source, last_line, format!("missing key {k}")))
    };
    let array = |prefix: &str| -> Result<[f64; RPC_TERMS]> {
        let mut c = [0.0; RPC_TERMS];
        for (n, slot) in c.iter_mut().enumerate() {
            *slot = get(&format!("{prefix}_{}", n + 1))?;
        }
        Ok(c)
    };
    let model = RpcModel {
        ground: GroundNormalization {
            lat_off: get("LAT_OFF")?,
            lat_scale: get("LAT_SCALE")?,
            lon_off: get("LONG_OFF")?,
            lon_scale: get("LONG_SCALE")?,
            h_off: get("HEIGHT_OFF")?,
            h_scale: get("HEIGHT_SCALE")?,
        },
        image: ImageNormalization {
            samp_off: get("SAMP_OFF")?,
            samp_scale: get("SAMP_SCALE")?,
            line_off: get("LINE_OFF")?,
            line_scale: get("LINE_SCALE")?,
        },
        line_num: array("LINE_NUM_COEFF")?,
        line_den: array("LINE_DEN_COEFF")?,
        samp_num: array("SAMP_NUM_COEFF")?,
        samp_den: array("SAMP_DEN_COEFF")?,
    };
    model.validate()?;
    Ok(model)
}

pub fn read_rpc(path: &Path) -> Result<RpcModel> {
    parse_rpc(&fs::read_to_string(path)?, &path.display().to_string())
}

pub fn write_rpc(path: &Path, model: &RpcModel) -> Result<()> {
    fs::write(path, rpc_to_string(model))?;
    Ok(())
}

// ----------------------------------------------------------------- rasters

/// Little-endian float32 raster: magic, width, height (u32), samples row-major.
pub fn encode_f32(raster: &ImageRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * raster.data().len());
    out.extend_from_slice(F32_MAGIC);
    out.extend_from_slice(&(raster.width() as u32).to_le_bytes());
    out.extend_from_slice(&(raster.height() as u32).to_le_bytes());
    for v in raster.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32(id: u32, bytes: &[u8], source: &str) -> Result<ImageRaster> {
    if bytes.len() < 16 || &bytes[..8] != F32_MAGIC {
        return Err(parse_error(source, 0, "missing float32 raster header"));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * width * height {
        return Err(parse_error(source, 0, format!("expected {} bytes of samples, got {}", 4 * width * height, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    ImageRaster::new(id, width, height, data)
}

/// 8-bit binary PGM with intensities clamped to `[0, 255]`.
pub fn encode_pgm(raster: &ImageRaster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", raster.width(), raster.height()).into_bytes();
    out.extend(raster.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

/// Binary PGM, 8- or 16-bit (big-endian), comments allowed in the header.
pub fn decode_pgm(id: u32, bytes: &[u8], source: &str) -> Result<ImageRaster> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_error(source, 0, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(parse_error(source, 0, format!("unsupported PGM magic '{}'", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse_error(source, 0, format!("bad PGM header field '{s}'")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(parse_error(source, 0, format!("bad PGM maxval {maxval}")));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let bpp = if maxval < 256 { 1 } else { 2 };
    if body.len() != bpp * width * height {
        return Err(parse_error(source, 0, format!("expected {} bytes of samples, got {}", bpp * width * height, body.len())));
    }
    let data = if bpp == 1 {
        body.iter().map(|v| *v as f64).collect()
    } else {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
    };
    ImageRaster::new(id, width, height, data)
}

pub fn read_raster(id: u32, path: &Path) -> Result<ImageRaster> {
    let bytes = fs::read(path)?;
    let source = path.display().to_string();
    if bytes.starts_with(F32_MAGIC) {
        decode_f32(id, &bytes, &source)
    } else {
        decode_pgm(id, &bytes, &source)
    }
}

// ------------------------------------------------------------------ tracks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationRecord {
    image: u32,
    x: f64,
    y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    affine: Option<[[f64; 3]; 2]>,
    #[serde(default)]
    h0: f64,
    #[serde(default = "one")]
    h1: f64,
    #[serde(default = "active")]
    status: ObsStatus,
}

fn one() -> f64 {
    1.0
}

fn active() -> ObsStatus {
    ObsStatus::Active
}

fn yes() -> bool {
    true
}

fn ingested() -> Provenance {
    Provenance::Ingested
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    id: u64,
    observations: Vec<ObservationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground: Option<GroundPoint>,
    #[serde(default = "ingested")]
    provenance: Provenance,
    #[serde(default = "yes")]
    active: bool,
}

impl From<&Track> for TrackRecord {
    fn from(t: &Track) -> Self {
        Self {
            id: t.id,
            observations: t
                .observations
                .iter()
                .map(|o| ObservationRecord {
                    image: o.image,
                    x: o.point.x,
                    y: o.point.y,
                    affine: t.reference.map(|_| [o.affine.a, o.affine.b]),
                    h0: o.h0,
                    h1: o.h1,
                    status: o.status,
                })
                .collect(),
            reference: t.reference,
            ground: t.ground,
            provenance: t.provenance,
            active: t.active,
        }
    }
}

impl TrackRecord {
    fn into_track(self, source: &str, line: usize) -> Result<Track> {
        let reference_point = match self.reference {
            Some(b) => Some(
                self.observations
                    .iter()
                    .find(|o| o.image == b)
                    .map(|o| ImagePoint::new(o.x, o.y))
                    .ok_or_else(|| parse_error(source, line, format!("track {}: reference image {b} has no observation", self.id)))?,
            ),
            None => None,
        };
        let mut seen = std::collections::BTreeSet::new();
        let mut observations = Vec::with_capacity(self.observations.len());
        for o in self.observations {
            if !seen.insert(o.image) {
                return Err(parse_error(source, line, format!("track {}: image {} observed twice", self.id, o.image)));
            }
            if ![o.x, o.y, o.h0, o.h1].iter().all(|v| v.is_finite()) {
                return Err(parse_error(source, line, format!("track {}: non-finite value", self.id)));
            }
            let affine = match (o.affine, reference_point) {
                (Some([a, b]), _) => AffineCorrection { a, b },
                (None, Some(r)) => AffineCorrection::initial(&r),
                (None, None) => AffineCorrection::default(),
            };
            observations.push(Observation {
                image: o.image,
                point: ImagePoint::new(o.x, o.y),
                affine,
                h0: o.h0,
                h1: o.h1,
                status: o.status,
            });
        }
        Ok(Track {
            id: self.id,
            observations,
            reference: self.reference,
            ground: self.ground,
            provenance: self.provenance,
            active: self.active,
        })
    }
}

pub fn tracks_to_jsonl(tracks: &[Track]) -> Result<String> {
    let mut out = String::new();
    for t in tracks {
        out.push_str(&compact_rounded(&TrackRecord::from(t))?);
        out.push('\n');
    }
    Ok(out)
}

/// One JSON track per line; blank lines skipped; duplicate ids rejected.
pub fn parse_tracks(text: &str, source: &str) -> Result<Vec<Track>> {
    let mut tracks = Vec::new();
    let mut ids = std::collections::BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrackRecord = serde_json::from_str(line).map_err(|e| parse_error(source, line_no, e.to_string()))?;
        let track = record.into_track(source, line_no)?;
        if !ids.insert(track.id) {
            return Err(parse_error(source, line_no, format!("duplicate track id {}", track.id)));
        }
        tracks.push(track);
    }
    Ok(tracks)
}

pub fn read_tracks(path: &Path) -> Result<Vec<Track>> {
    parse_tracks(&fs::read_to_string(path)?, &path.display().to_string())
}

pub fn write_tracks(path: &Path, tracks: &[Track]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(tracks_to_jsonl(tracks)?.as_bytes())?;
    Ok(())
}

// ------------------------------------------------------------ truth/report

/// Ground truth of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub spec: SceneSpec,
    pub anchor: u32,
    pub biases: BTreeMap<u32, BiasCorrection>,
    pub radiometry: BTreeMap<u32, Radiometry>,
    pub check_tracks: Vec<TrackRecord>,
}

impl Truth {
    pub fn from_scene(scene: &SynthScene) -> Self {
        Self {
            spec: scene.spec.clone(),
            anchor: scene.spec.anchor,
            biases: scene.true_biases.clone(),
            radiometry: scene.radiometry.clone(),
            check_tracks: scene.check_tracks.iter().map(TrackRecord::from).collect(),
        }
    }

    pub fn check_tracks(&self) -> Result<Vec<Track>> {
        self.check_tracks.iter().cloned().map(|r| r.into_track(TRUTH_FILE, 0)).collect()
    }
}

pub fn read_truth(path: &Path) -> Result<Truth> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(&path.display().to_string(), e.line(), e.to_string()))
}

pub fn write_truth(path: &Path, truth: &Truth) -> Result<()> {
    fs::write(path, to_json_rounded(truth)?)?;
    Ok(())
}

pub fn report_to_string(report: &RunReport) -> Result<String> {
    to_json_rounded(report)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(&path.display().to_string(), e.line(), e.to_string()))
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    fs::write(path, report_to_string(report)?)?;
    Ok(())
}

// ------------------------------------------------------------------ scenes

fn image_path(dir: &Path, id: u32, ext: &str) -> PathBuf {
    dir.join(format!("{id}.{ext}"))
}

/// Writes `<id>.rpc`, `<id>.f32`, `<id>.pgm`, the tracks and the truth file.
pub fn write_scene(dir: &Path, scene: &SynthScene) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, model) in &scene.models {
        write_rpc(&image_path(dir, *id, "rpc"), model)?;
    }
    for raster in scene.rasters.iter() {
        fs::write(image_path(dir, raster.id(), "f32"), encode_f32(raster))?;
        fs::write(image_path(dir, raster.id(), "pgm"), encode_pgm(raster))?;
    }
    write_tracks(&dir.join(TRACKS_FILE), &scene.tracks)?;
    write_truth(&dir.join(TRUTH_FILE), &Truth::from_scene(scene))?;
    Ok(())
}

/// Reads every `<id>.rpc` in `dir`.
pub fn load_models(dir: &Path) -> Result<BTreeMap<u32, RpcModel>> {
    let mut models = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.extension().and_then(|e| e.to_str()) != Some("rpc") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let id: u32 = stem
            .parse()
            .map_err(|_| parse_error(&path.display().to_string(), 0, "RPC file name must be a numeric image id"))?;
        models.insert(id, read_rpc(&path)?);
    }
    if models.is_empty() {
        return Err(Error::ImageSetMismatch(format!("no .rpc files in {}", dir.display())));
    }
    Ok(models)
}

/// Loads every `<id>.rpc` in `dir` with its `<id>.f32` (preferred) or
/// `<id>.pgm` raster, plus the tracks, and cross-checks them.
pub fn load_scene(dir: &Path, tracks_path: &Path) -> Result<SceneInputs> {
    let models = load_models(dir)?;
    let mut rasters = Vec::with_capacity(models.len());
    for id in models.keys() {
        let f32_path = image_path(dir, *id, "f32");
        let pgm_path = image_path(dir, *id, "pgm");
        let path = if f32_path.exists() {
            f32_path
        } else if pgm_path.exists() {
            pgm_path
        } else {
            return Err(Error::ImageSetMismatch(format!("image {id} has a model but no raster")));
        };
        rasters.push(read_raster(*id, &path)?);
    }
    let tracks = read_tracks(tracks_path)?;
    for t in &tracks {
        for o in &t.observations {
            if !models.contains_key(&o.image) {
                return Err(Error::Integrity { track: t.id, image: o.image });
            }
        }
    }
    Ok(SceneInputs {
        cameras: CameraSet::new(models),
        rasters: RasterSet::new(rasters),
        tracks,
        check_tracks: Vec::new(),
    })
}
