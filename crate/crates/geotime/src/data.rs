//! Dataset records, JSON Lines persistence, a synthetic webcam world with
//! planted geo-temporal structure, and the quality-based curation pipeline
//! that produces camera-disjoint train/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::geomath::{timestamp_to_torus, GeoCoord, Timestamp};
use crate::{Error, Result};

/// One observation: a camera frame's image feature with its location and,
/// unless it is auxiliary location-only data, its local capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub camera_id: String,
    pub coord: GeoCoord,
    pub timestamp: Option<Timestamp>,
    pub feature: Vec<f64>,
    pub quality: Option<f64>,
}

/// An immutable collection of records with a uniform feature width.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Dataset> {
        let ds = Dataset { records };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let width = match self.records.first() {
            Some(r) => r.feature.len(),
            None => return Ok(()),
        };
        for (i, r) in self.records.iter().enumerate() {
            if r.feature.len() != width {
                return Err(Error::Contract(format!(
                    "record {i} has feature width {}, expected {width}",
                    r.feature.len()
                )));
            }
            if let Some(q) = r.quality {
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::Contract(format!(
                        "record {i} has quality {q} outside [0, 1]"
                    )));
                }
            }
            if r.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!(
                    "record {i} has a non-finite feature value"
                )));
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.feature.len())
    }

    /// Camera ids in first-appearance order.
    pub fn camera_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.camera_id.clone()) {
                out.push(r.camera_id.clone());
            }
        }
        out
    }
}

/// Wire form of a record: one JSON object per line.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    camera_id: String,
    lat: f64,
    lon: f64,
    timestamp: Option<String>,
    feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quality: Option<f64>,
}

impl RecordWire {
    fn from_record(r: &Record) -> RecordWire {
        RecordWire {
            camera_id: r.camera_id.clone(),
            lat: r.coord.lat(),
            lon: r.coord.lon(),
            timestamp: r.timestamp.map(|t| t.to_iso()),
            feature: r.feature.clone(),
            quality: r.quality,
        }
    }

    fn into_record(self) -> Result<Record> {
        let coord = GeoCoord::new(self.lat, self.lon)?;
        let timestamp = self.timestamp.map(|s| Timestamp::parse_iso(&s)).transpose()?;
        if let Some(q) = self.quality {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("quality {q} outside [0, 1]")));
            }
        }
        Ok(Record {
            camera_id: self.camera_id,
            coord,
            timestamp,
            feature: self.feature,
            quality: self.quality,
        })
    }
}

pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in ds.records() {
        let wire = RecordWire::from_record(r);
        let line = serde_json::to_string(&wire)
            .map_err(|e| Error::Format(format!("serializing record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg,
        };
        let wire: RecordWire =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let record = wire.into_record().map_err(|e| parse_err(e.to_string()))?;
        match width {
            None => width = Some(record.feature.len()),
            Some(w) if w != record.feature.len() => {
                return Err(parse_err(format!(
                    "feature width {} does not match the file's width {w}",
                    record.feature.len()
                )));
            }
            Some(_) => {}
        }
        records.push(record);
    }
    Dataset::new(records)
}

/// Index file written next to a packed feature payload.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarIndex {
    rows: usize,
    cols: usize,
    dtype: String,
}

fn sidecar_index_path(bin_path: &Path) -> PathBuf {
    let mut s = bin_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Saves a dataset as JSONL with empty inline features plus a packed
/// little-endian f32 payload holding the real features row-major.
pub fn save_jsonl_packed(ds: &Dataset, jsonl_path: &Path, bin_path: &Path) -> Result<()> {
    let stripped: Vec<Record> = ds
        .records()
        .iter()
        .map(|r| Record {
            feature: Vec::new(),
            ..r.clone()
        })
        .collect();
    save_jsonl(&Dataset { records: stripped }, jsonl_path)?;

    let mut bytes = Vec::with_capacity(ds.len() * ds.feature_dim() * 4);
    for r in ds.records() {
        for &v in &r.feature {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(bin_path, &bytes)?;
    let index = SidecarIndex {
        rows: ds.len(),
        cols: ds.feature_dim(),
        dtype: "f32le".into(),
    };
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Format(format!("serializing sidecar index: {e}")))?;
    write_atomic(&sidecar_index_path(bin_path), json.as_bytes())
}

/// Loads a packed dataset, splicing sidecar features back into the records.
pub fn load_jsonl_packed(jsonl_path: &Path, bin_path: &Path) -> Result<Dataset> {
    let ds = load_jsonl(jsonl_path)?;
    if ds.feature_dim() != 0 {
        return Err(Error::Format(
            "packed dataset has inline features; expected empty feature arrays".into(),
        ));
    }
    let index_path = sidecar_index_path(bin_path);
    let index_text =
        std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: SidecarIndex = serde_json::from_str(&index_text).map_err(|e| Error::Parse {
        path: index_path.display().to_string(),
        line: 1,
        msg: e.to_string(),
    })?;
    if index.dtype != "f32le" {
        return Err(Error::Format(format!(
            "unsupported sidecar dtype {:?}",
            index.dtype
        )));
    }
    if index.rows != ds.len() {
        return Err(Error::Format(format!(
            "sidecar has {} rows for {} records",
            index.rows,
            ds.len()
        )));
    }
    let bytes = std::fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let expected = index
        .rows
        .checked_mul(index.cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("sidecar dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "sidecar payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut records = ds.records.clone();
    for (i, r) in records.iter_mut().enumerate() {
        let start = i * index.cols * 4;
        r.feature = bytes[start..start + index.cols * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
    }
    Dataset::new(records)
}

/// Parameters of the synthetic webcam world.
///
/// Every camera gets a fixed random signature vector; each frame adds a
/// seasonal component keyed to the year fraction (phase-inverted in the
/// southern hemisphere), a diurnal component keyed to the day fraction, and
/// Gaussian noise. When `quality_degrade_amp > 0`, frames also pick up a
/// degradation along a fixed direction scaled by one minus their latent
/// quality score, so a linear probe can recover quality from the feature.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldConfig {
    pub n_cameras: usize,
    pub frames_per_camera: usize,
    pub feature_dim: usize,
    pub seasonal_amp: f64,
    pub diurnal_amp: f64,
    /// Amplitude of a camera-constant location-keyed appearance component
    /// (smooth random Fourier features of the camera's position), standing in
    /// for location-dependent scenery. Zero leaves features location-blind
    /// beyond the hemispheric seasonal phase.
    pub location_amp: f64,
    /// Expected fraction of cameras placed in the northern hemisphere; 0.5
    /// keeps placement area-uniform over the whole sphere. Webcam corpora
    /// skew north, and an exactly balanced draw makes the two hemispheres'
    /// opposite seasonal phases cancel in the contrastive objective, leaving
    /// the seasonal channel untrained at small scale.
    pub north_fraction: f64,
    pub noise_sigma: f64,
    pub quality_degrade_amp: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_cameras: 200,
            frames_per_camera: 100,
            feature_dim: 64,
            seasonal_amp: 0.5,
            diurnal_amp: 0.5,
            location_amp: 0.0,
            north_fraction: 0.5,
            noise_sigma: 0.05,
            quality_degrade_amp: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras == 0 || self.frames_per_camera == 0 {
            return Err(Error::Config(
                "n_cameras and frames_per_camera must be positive".into(),
            ));
        }
        if self.feature_dim < 8 {
            return Err(Error::Config(format!(
                "feature_dim must be at least 8, got {}",
                self.feature_dim
            )));
        }
        for (name, v) in [
            ("seasonal_amp", self.seasonal_amp),
            ("diurnal_amp", self.diurnal_amp),
            ("location_amp", self.location_amp),
            ("noise_sigma", self.noise_sigma),
            ("quality_degrade_amp", self.quality_degrade_amp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.north_fraction.is_finite()
            && (0.0..=1.0).contains(&self.north_fraction))
        {
            return Err(Error::Config(format!(
                "north_fraction must be in [0, 1], got {}",
                self.north_fraction
            )));
        }
        Ok(())
    }
}

/// All frames are timestamped in this fixed non-leap year.
pub const SYNTHETIC_YEAR: i32 = 2023;

struct Camera {
    id: String,
    coord: GeoCoord,
    signature: Vec<f64>,
}

pub(crate) struct SyntheticWorld {
    cfg: SyntheticWorldConfig,
    seasonal_cos: Vec<f64>,
    seasonal_sin: Vec<f64>,
    diurnal_cos: Vec<f64>,
    diurnal_sin: Vec<f64>,
    degrade_dir: Vec<f64>,
    loc_freq: Vec<[f64; 3]>,
    loc_phase: Vec<f64>,
    cameras: Vec<Camera>,
}

/// Spatial frequency scale of the location-keyed appearance component, in
/// inverse radians over the unit sphere; 3.0 gives a correlation length of
/// roughly 2 000 km.
const LOC_FREQ_SCALE: f64 = 3.0;

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

impl SyntheticWorld {
    fn build(cfg: &SyntheticWorldConfig, rng: &mut impl Rng) -> SyntheticWorld {
        let d = cfg.feature_dim;
        let seasonal_cos = unit_vector(rng, d);
        let seasonal_sin = unit_vector(rng, d);
        let diurnal_cos = unit_vector(rng, d);
        let diurnal_sin = unit_vector(rng, d);
        let degrade_dir = unit_vector(rng, d);
        let cameras = (0..cfg.n_cameras)
            .map(|i| {
                // One uniform draw folded into a signed sine-latitude: the
                // first `north_fraction` of the unit interval maps onto the
                // northern half, the rest onto the southern, each area-uniform
                // within its hemisphere.
                let u: f64 = rng.random_range(0.0..1.0);
                let nf = cfg.north_fraction;
                let z = if u < nf { u / nf } else { -(u - nf) / (1.0 - nf) };
                let lat = z.asin().to_degrees();
                let lon = rng.random_range(-180.0..180.0);
                Camera {
                    id: format!("cam{i:05}"),
                    coord: GeoCoord::new(lat, lon).expect("sampled in range"),
                    signature: unit_vector(rng, d),
                }
            })
            .collect();
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let loc_freq = (0..d)
            .map(|_| {
                [
                    LOC_FREQ_SCALE * normal.sample(rng),
                    LOC_FREQ_SCALE * normal.sample(rng),
                    LOC_FREQ_SCALE * normal.sample(rng),
                ]
            })
            .collect();
        let loc_phase = (0..d)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        SyntheticWorld {
            cfg: cfg.clone(),
            seasonal_cos,
            seasonal_sin,
            diurnal_cos,
            diurnal_sin,
            degrade_dir,
            loc_freq,
            loc_phase,
            cameras,
        }
    }

    /// The noiseless planted feature for camera `cam` at year fraction
    /// `theta`, day fraction `phi`, and latent quality `quality`.
    fn clean_feature(&self, cam: usize, theta: f64, phi: f64, quality: f64) -> Vec<f64> {
        use std::f64::consts::TAU;
        let c = &self.cameras[cam];
        let theta_adj = if c.coord.lat() < 0.0 {
            (theta + 0.5).rem_euclid(1.0)
        } else {
            theta
        };
        let (sc, ss) = ((TAU * theta_adj).cos(), (TAU * theta_adj).sin());
        let (dc, ds) = ((TAU * phi).cos(), (TAU * phi).sin());
        let degrade = (1.0 - quality) * self.cfg.quality_degrade_amp;
        let (latr, lonr) = (c.coord.lat().to_radians(), c.coord.lon().to_radians());
        let u = [latr.cos() * lonr.cos(), latr.cos() * lonr.sin(), latr.sin()];
        (0..self.cfg.feature_dim)
            .map(|k| {
                let w = &self.loc_freq[k];
                let loc = (w[0] * u[0] + w[1] * u[1] + w[2] * u[2] + self.loc_phase[k]).cos();
                c.signature[k]
                    + self.cfg.seasonal_amp * (sc * self.seasonal_cos[k] + ss * self.seasonal_sin[k])
                    + self.cfg.diurnal_amp * (dc * self.diurnal_cos[k] + ds * self.diurnal_sin[k])
                    + self.cfg.location_amp * loc
                    + degrade * self.degrade_dir[k]
            })
            .collect()
    }

    #[cfg(test)]
    fn camera_signature(&self, cam: usize) -> &[f64] {
        &self.cameras[cam].signature
    }
}

/// Generates the full synthetic dataset for `cfg`, deterministically in
/// `cfg.seed`. Every record carries its latent quality score.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let (_, records) = generate_world(cfg, &mut rng);
    Dataset::new(records)
}

fn generate_world(
    cfg: &SyntheticWorldConfig,
    rng: &mut ChaCha20Rng,
) -> (SyntheticWorld, Vec<Record>) {
    let world = SyntheticWorld::build(cfg, rng);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut records = Vec::with_capacity(cfg.n_cameras * cfg.frames_per_camera);
    for cam in 0..cfg.n_cameras {
        for _ in 0..cfg.frames_per_camera {
            let day = rng.random_range(0..365u32);
            let second = rng.random_range(0..86400u32);
            let ts = Timestamp::from_day_and_second(SYNTHETIC_YEAR, day, second)
                .expect("day and second in range");
            let torus = timestamp_to_torus(ts);
            let quality: f64 = rng.random_range(0.0..1.0);
            let mut feature = world.clean_feature(cam, torus.theta(), torus.phi(), quality);
            for v in feature.iter_mut() {
                *v += cfg.noise_sigma * normal.sample(rng);
            }
            records.push(Record {
                camera_id: world.cameras[cam].id.clone(),
                coord: world.cameras[cam].coord,
                timestamp: Some(ts),
                feature,
                quality: Some(quality),
            });
        }
    }
    (world, records)
}

/// Linear quality scorer: `score(x) = sigmoid(w . x + b)`, always in (0, 1).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QualityProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl QualityProbe {
    pub fn score(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.weights.len() {
            return Err(Error::Contract(format!(
                "probe trained on width {}, scoring width {}",
                self.weights.len(),
                feature.len()
            )));
        }
        let z: f64 = self
            .weights
            .iter()
            .zip(feature)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias;
        Ok(sigmoid(z))
    }
}

/// Diagnostics from quality-probe training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub holdout_size: usize,
    pub holdout_accuracy: f64,
}

/// Fits a logistic regression by full-batch gradient descent, holding out
/// every fifth example to report accuracy. Stops when the gradient norm
/// drops below 1e-6 or after 10^4 iterations.
pub fn train_quality_probe(
    features: &[Vec<f64>],
    labels: &[bool],
) -> Result<(QualityProbe, ProbeReport)> {
    if features.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = match features.first() {
        Some(f) => f.len(),
        None => return Err(Error::Contract("probe training on an empty set".into())),
    };
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Contract("probe features have mixed widths".into()));
    }
    for class in [false, true] {
        if labels.iter().filter(|&&l| l == class).count() < 2 {
            return Err(Error::Contract(format!(
                "probe training needs at least 2 examples of class {class}"
            )));
        }
    }

    let holdout: Vec<usize> = (0..labels.len()).filter(|i| i % 5 == 0).collect();
    let train: Vec<usize> = (0..labels.len()).filter(|i| i % 5 != 0).collect();
    for class in [false, true] {
        if !train.iter().any(|&i| labels[i] == class) {
            return Err(Error::Contract(format!(
                "probe training split lost class {class}; shuffle the input"
            )));
        }
    }

    // 1/L step size for the logistic loss, L <= 0.25 * max ||[x, 1]||^2
    let max_sq = train
        .iter()
        .map(|&i| features[i].iter().map(|x| x * x).sum::<f64>() + 1.0)
        .fold(0.0f64, f64::max);
    let lr = 4.0 / max_sq;

    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let n = train.len() as f64;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < 10_000 {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0f64;
        for &i in &train {
            let z: f64 = w.iter().zip(&features[i]).map(|(a, x)| a * x).sum::<f64>() + b;
            let err = sigmoid(z) - if labels[i] { 1.0 } else { 0.0 };
            for (g, x) in gw.iter_mut().zip(&features[i]) {
                *g += err * x / n;
            }
            gb += err / n;
        }
        grad_norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        iterations += 1;
        if grad_norm < 1e-6 {
            break;
        }
        for (a, g) in w.iter_mut().zip(&gw) {
            *a -= lr * g;
        }
        b -= lr * gb;
    }

    let probe = QualityProbe { weights: w, bias: b };
    if probe.weights.iter().any(|v| !v.is_finite()) || !probe.bias.is_finite() {
        return Err(Error::Numeric("probe training diverged".into()));
    }
    let mut correct = 0usize;
    for &i in &holdout {
        let predicted = probe.score(&features[i])? >= 0.5;
        if predicted == labels[i] {
            correct += 1;
        }
    }
    let report = ProbeReport {
        iterations,
        final_grad_norm: grad_norm,
        holdout_size: holdout.len(),
        holdout_accuracy: if holdout.is_empty() {
            f64::NAN
        } else {
            correct as f64 / holdout.len() as f64
        },
    };
    Ok((probe, report))
}

/// Quality tier of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityLabel {
    High,
    Medium,
    Low,
}

/// Curation thresholds and split shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SplitThresholds {
    /// Score at or above this is High.
    pub t_high: f64,
    /// Score at or above this (but below `t_high`) is Medium.
    pub t_low: f64,
    /// Side length of the latitude-longitude bins used to balance test
    /// cameras geographically.
    pub bin_size_deg: f64,
    /// Minimum number of timestamped High frames for a test candidate.
    pub min_frames: usize,
    /// Distinct calendar months a test candidate's High frames must cover
    /// ("spanning a full year" means all 12).
    pub required_months: usize,
    /// Maximum number of test cameras to select.
    pub test_camera_budget: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        SplitThresholds {
            t_high: 0.7,
            t_low: 0.4,
            bin_size_deg: 10.0,
            min_frames: 500,
            required_months: 12,
            test_camera_budget: 20,
        }
    }
}

impl SplitThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_low)
            || !(0.0..=1.0).contains(&self.t_high)
            || self.t_low >= self.t_high
        {
            return Err(Error::Config(format!(
                "need 0 <= t_low < t_high <= 1, got t_low={} t_high={}",
                self.t_low, self.t_high
            )));
        }
        if !(self.bin_size_deg > 0.0 && self.bin_size_deg <= 180.0) {
            return Err(Error::Config(format!(
                "bin_size_deg must be in (0, 180], got {}",
                self.bin_size_deg
            )));
        }
        if self.min_frames == 0 || self.test_camera_budget == 0 {
            return Err(Error::Config(
                "min_frames and test_camera_budget must be positive".into(),
            ));
        }
        if !(1..=12).contains(&self.required_months) {
            return Err(Error::Config(format!(
                "required_months must be in [1, 12], got {}",
                self.required_months
            )));
        }
        Ok(())
    }
}

/// Assigns each score its quality tier: High for `s >= t_high`, Medium for
/// `t_low <= s < t_high`, Low below.
pub fn partition_quality(scores: &[f64], th: &SplitThresholds) -> Result<Vec<QualityLabel>> {
    th.validate()?;
    scores
        .iter()
        .map(|&s| {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Contract(format!("score {s} outside [0, 1]")));
            }
            Ok(if s >= th.t_high {
                QualityLabel::High
            } else if s >= th.t_low {
                QualityLabel::Medium
            } else {
                QualityLabel::Low
            })
        })
        .collect()
}

/// Summary of one curation run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub n_input: usize,
    pub n_low_dropped: usize,
    /// Medium or untimestamped frames of test cameras; dropped to keep the
    /// splits camera-disjoint while the test set stays High-only.
    pub n_test_camera_rest_dropped: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_candidates: usize,
    pub occupied_bins: usize,
    pub per_bin_cap: usize,
    pub budget_met: bool,
    pub test_cameras: Vec<String>,
}

/// Output of `curate_split`.
pub struct Curation {
    pub train: Dataset,
    pub test: Dataset,
    pub report: CurationReport,
}

/// Builds camera-disjoint train/test splits.
///
/// Low frames are dropped. Cameras whose timestamped High frames number at
/// least `min_frames` and cover `required_months` calendar months are test
/// candidates; candidates are drawn round-robin, one per occupied bin per
/// round, until the budget is met, with a per-bin cap of
/// `ceil(budget / occupied bins) + 1` so lopsided bins cannot dominate. The
/// test set keeps only the selected cameras' timestamped High frames; all
/// other cameras contribute their High and Medium frames to train. The rng
/// only shuffles candidate order within each bin.
pub fn curate_split(
    ds: &Dataset,
    labels: &[QualityLabel],
    th: &SplitThresholds,
    rng: &mut impl Rng,
) -> Result<Curation> {
    th.validate()?;
    if labels.len() != ds.len() {
        return Err(Error::Contract(format!(
            "{} labels for {} records",
            labels.len(),
            ds.len()
        )));
    }

    struct CamInfo {
        coord: GeoCoord,
        high_timestamped: usize,
        months: BTreeSet<u32>,
    }
    let mut cams: BTreeMap<&str, CamInfo> = BTreeMap::new();
    for (r, &label) in ds.records().iter().zip(labels) {
        let info = cams.entry(&r.camera_id).or_insert_with(|| CamInfo {
            coord: r.coord,
            high_timestamped: 0,
            months: BTreeSet::new(),
        });
        if label == QualityLabel::High {
            if let Some(ts) = r.timestamp {
                info.high_timestamped += 1;
                info.months.insert(ts.calendar_month());
            }
        }
    }

    let candidates: Vec<&str> = cams
        .iter()
        .filter(|(_, info)| {
            info.high_timestamped >= th.min_frames && info.months.len() >= th.required_months
        })
        .map(|(&id, _)| id)
        .collect();

    let bin_of = |c: GeoCoord| -> (i64, i64) {
        let lat_bins = (180.0 / th.bin_size_deg).ceil() as i64;
        let lon_bins = (360.0 / th.bin_size_deg).ceil() as i64;
        let i = (((c.lat() + 90.0) / th.bin_size_deg).floor() as i64).min(lat_bins - 1);
        let j = (((c.lon() + 180.0) / th.bin_size_deg).floor() as i64).min(lon_bins - 1);
        (i, j)
    };
    let mut bins: BTreeMap<(i64, i64), Vec<&str>> = BTreeMap::new();
    for &id in &candidates {
        bins.entry(bin_of(cams[id].coord)).or_default().push(id);
    }
    for members in bins.values_mut() {
        members.shuffle(rng);
    }

    let occupied = bins.len();
    let per_bin_cap = if occupied == 0 {
        0
    } else {
        th.test_camera_budget.div_ceil(occupied) + 1
    };
    let mut taken_per_bin: BTreeMap<(i64, i64), usize> =
        bins.keys().map(|&k| (k, 0)).collect();
    let mut selected: BTreeSet<&str> = BTreeSet::new();
    let mut test_cameras = Vec::new();
    'rounds: loop {
        let mut any = false;
        for (key, members) in &bins {
            if selected.len() >= th.test_camera_budget {
                break 'rounds;
            }
            let taken = taken_per_bin.get_mut(key).expect("bin key present");
            if *taken >= per_bin_cap {
                continue;
            }
            if let Some(&next) = members.get(*taken) {
                *taken += 1;
                selected.insert(next);
                test_cameras.push(next.to_string());
                any = true;
            }
        }
        if !any {
            break;
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut n_low = 0usize;
    let mut n_rest = 0usize;
    for (r, &label) in ds.records().iter().zip(labels) {
        if label == QualityLabel::Low {
            n_low += 1;
            continue;
        }
        if selected.contains(r.camera_id.as_str()) {
            if label == QualityLabel::High && r.timestamp.is_some() {
                test.push(r.clone());
            } else {
                n_rest += 1;
            }
        } else {
            train.push(r.clone());
        }
    }

    let report = CurationReport {
        n_input: ds.len(),
        n_low_dropped: n_low,
        n_test_camera_rest_dropped: n_rest,
        n_train: train.len(),
        n_test: test.len(),
        n_candidates: candidates.len(),
        occupied_bins: occupied,
        per_bin_cap,
        budget_met: selected.len() >= th.test_camera_budget,
        test_cameras,
    };
    Ok(Curation {
        train: Dataset::new(train)?,
        test: Dataset::new(test)?,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomath::torus_distance;
    use crate::geomath::TorusTime;

    fn rec(cam: &str, lat: f64, lon: f64, ts: Option<&str>, feature: Vec<f64>) -> Record {
        Record {
            camera_id: cam.into(),
            coord: GeoCoord::new(lat, lon).unwrap(),
            timestamp: ts.map(|s| Timestamp::parse_iso(s).unwrap()),
            feature,
            quality: None,
        }
    }

    #[test]
    fn jsonl_round_trip_is_value_exact() {
        let cfg = SyntheticWorldConfig {
            n_cameras: 10,
            frames_per_camera: 100,
            feature_dim: 8,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.len(), 1000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_jsonl(&ds, &path).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"camera_id":"a","lat":1.0,"lon":2.0,"timestamp":null,"feature":[0.5]}"#;
        std::fs::write(&path, format!("{good}\n{good}\nnot json\n")).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a parse error, got {other:?}"),
        }

        // width change mid-file
        let wide = r#"{"camera_id":"a","lat":1.0,"lon":2.0,"timestamp":null,"feature":[0.5,0.5]}"#;
        std::fs::write(&path, format!("{good}\n{wide}\n")).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("width"), "{msg}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }

        // unknown field
        let extra = r#"{"camera_id":"a","lat":1.0,"lon":2.0,"timestamp":null,"feature":[],"x":1}"#;
        std::fs::write(&path, format!("{extra}\n")).unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Parse { line: 1, .. })));

        // out-of-range latitude
        let badlat = r#"{"camera_id":"a","lat":91.0,"lon":2.0,"timestamp":null,"feature":[]}"#;
        std::fs::write(&path, format!("{badlat}\n")).unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Parse { line: 1, .. })));

        // quality out of range
        let badq =
            r#"{"camera_id":"a","lat":1.0,"lon":2.0,"timestamp":null,"feature":[],"quality":1.5}"#;
        std::fs::write(&path, format!("{badq}\n")).unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn null_timestamp_loads_as_auxiliary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aux.jsonl");
        let line = r#"{"camera_id":"a","lat":10.0,"lon":20.0,"timestamp":null,"feature":[1.0,2.0]}"#;
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.records()[0].timestamp.is_none());
    }

    #[test]
    fn packed_sidecar_round_trip() {
        let cfg = SyntheticWorldConfig {
            n_cameras: 4,
            frames_per_camera: 5,
            feature_dim: 16,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let jsonl = dir.path().join("packed.jsonl");
        let bin = dir.path().join("packed.f32");
        save_jsonl_packed(&ds, &jsonl, &bin).unwrap();
        let loaded = load_jsonl_packed(&jsonl, &bin).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.feature_dim(), 16);
        for (a, b) in ds.records().iter().zip(loaded.records()) {
            assert_eq!(a.camera_id, b.camera_id);
            assert_eq!(a.timestamp, b.timestamp);
            for (x, y) in a.feature.iter().zip(&b.feature) {
                // payload is f32 by format
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // truncated payload rejected
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_jsonl_packed(&jsonl, &bin).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SyntheticWorldConfig {
            n_cameras: 6,
            frames_per_camera: 7,
            feature_dim: 8,
            quality_degrade_amp: 1.0,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticWorldConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = SyntheticWorldConfig::default();
        cfg.feature_dim = 4;
        assert!(cfg.validate().is_err());
        cfg.feature_dim = 8;
        cfg.noise_sigma = -0.1;
        assert!(cfg.validate().is_err());
        cfg.noise_sigma = 0.0;
        cfg.n_cameras = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn frames_differ_only_by_noise_when_time_structure_is_flat() {
        // with both amplitudes zero every frame of a camera is the signature
        // plus noise, so pairwise distances concentrate below 6 sigma sqrt(d)
        let cfg = SyntheticWorldConfig {
            n_cameras: 3,
            frames_per_camera: 40,
            feature_dim: 32,
            seasonal_amp: 0.0,
            diurnal_amp: 0.0,
            noise_sigma: 0.05,
            quality_degrade_amp: 0.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let bound = 6.0 * cfg.noise_sigma * (cfg.feature_dim as f64).sqrt();
        let recs = ds.records();
        for i in 0..recs.len() {
            for j in (i + 1)..recs.len() {
                if recs[i].camera_id != recs[j].camera_id {
                    continue;
                }
                let dist: f64 = recs[i]
                    .feature
                    .iter()
                    .zip(&recs[j].feature)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist <= bound, "distance {dist} above {bound}");
            }
        }
    }

    #[test]
    fn hemispheres_have_opposite_seasonal_phase() {
        let cfg = SyntheticWorldConfig {
            n_cameras: 1,
            frames_per_camera: 1,
            feature_dim: 16,
            seasonal_amp: 1.0,
            diurnal_amp: 0.0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut world = SyntheticWorld::build(&cfg, &mut rng);
        world.cameras = vec![
            Camera {
                id: "north".into(),
                coord: GeoCoord::new(45.0, 10.0).unwrap(),
                signature: vec![0.0; 16],
            },
            Camera {
                id: "south".into(),
                coord: GeoCoord::new(-45.0, 10.0).unwrap(),
                signature: vec![0.0; 16],
            },
        ];
        for theta in [0.0, 0.2, 0.37, 0.5, 0.9] {
            let n = world.clean_feature(0, theta, 0.0, 1.0);
            let s = world.clean_feature(1, theta, 0.0, 1.0);
            let dot: f64 = n.iter().zip(&s).map(|(a, b)| a * b).sum();
            assert!(dot < 0.0, "theta {theta}: inner product {dot}");
        }
    }

    #[test]
    fn north_fraction_steers_camera_placement() {
        let lats = |nf: f64| -> Vec<f64> {
            let ds = generate_synthetic(&SyntheticWorldConfig {
                n_cameras: 300,
                frames_per_camera: 1,
                north_fraction: nf,
                seed: 11,
                ..Default::default()
            })
            .unwrap();
            ds.records().iter().map(|r| r.coord.lat()).collect()
        };
        assert!(lats(1.0).iter().all(|&l| l >= 0.0));
        assert!(lats(0.0).iter().all(|&l| l <= 0.0));
        let balanced = lats(0.5);
        let north = balanced.iter().filter(|&&l| l >= 0.0).count();
        // 300 draws at p = 0.5: +-4 sigma is about +-35
        assert!((115..=185).contains(&north), "north count {north}");
        assert!(SyntheticWorldConfig {
            north_fraction: 1.2,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn location_component_is_camera_constant_and_distance_sensitive() {
        let cfg = SyntheticWorldConfig {
            n_cameras: 1,
            frames_per_camera: 1,
            feature_dim: 32,
            seasonal_amp: 0.0,
            diurnal_amp: 0.0,
            location_amp: 1.0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut world = SyntheticWorld::build(&cfg, &mut rng);
        let cam = |id: &str, lat: f64, lon: f64| Camera {
            id: id.into(),
            coord: GeoCoord::new(lat, lon).unwrap(),
            signature: vec![0.0; 32],
        };
        world.cameras = vec![
            cam("here", 10.0, 20.0),
            cam("near", 10.5, 20.0),
            cam("far", -60.0, -140.0),
        ];

        // constant across capture times for one camera
        let a = world.clean_feature(0, 0.1, 0.3, 1.0);
        let b = world.clean_feature(0, 0.8, 0.9, 0.2);
        assert_eq!(a, b);

        let dist = |x: &[f64], y: &[f64]| -> f64 {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        };
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let near = world.clean_feature(1, 0.1, 0.3, 1.0);
        let far = world.clean_feature(2, 0.1, 0.3, 1.0);
        assert!(
            dist(&a, &near) < 0.2 * norm,
            "55 km apart should look alike: {} vs norm {norm}",
            dist(&a, &near)
        );
        assert!(
            dist(&a, &far) > 0.5 * norm,
            "opposite side of the globe should differ: {} vs norm {norm}",
            dist(&a, &far)
        );

        // zero amplitude removes the component entirely
        let mut flat_cfg = cfg.clone();
        flat_cfg.location_amp = 0.0;
        let mut flat = SyntheticWorld::build(&flat_cfg, &mut ChaCha20Rng::seed_from_u64(4));
        flat.cameras = vec![cam("here", 10.0, 20.0)];
        let z = flat.clean_feature(0, 0.1, 0.3, 1.0);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diurnal_component_averages_out() {
        let cfg = SyntheticWorldConfig {
            n_cameras: 1,
            frames_per_camera: 10_000,
            feature_dim: 16,
            seasonal_amp: 0.0,
            diurnal_amp: 1.0,
            noise_sigma: 0.0,
            quality_degrade_amp: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let (world, records) = generate_world(&cfg, &mut rng);
        let sig = world.camera_signature(0);
        let d = cfg.feature_dim;
        let mut mean = vec![0.0f64; d];
        for r in &records {
            for k in 0..d {
                mean[k] += (r.feature[k] - sig[k]) / records.len() as f64;
            }
        }
        let norm: f64 = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        // two cos/sin means, each with variance 0.5/n, along unit directions
        let bound = 3.0 * (1.0 / records.len() as f64).sqrt() * 1.5;
        assert!(norm < bound, "mean diurnal norm {norm} above {bound}");
    }

    #[test]
    fn synthetic_times_cover_the_torus() {
        let cfg = SyntheticWorldConfig {
            n_cameras: 2,
            frames_per_camera: 500,
            feature_dim: 8,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut months = BTreeSet::new();
        for r in ds.records() {
            let ts = r.timestamp.unwrap();
            assert_eq!(ts.year(), SYNTHETIC_YEAR);
            months.insert(ts.calendar_month());
            let t = timestamp_to_torus(ts);
            // far from any single point: spot-check spread
            assert!(torus_distance(t, TorusTime::new(0.0, 0.0).unwrap()).is_finite());
        }
        assert_eq!(months.len(), 12);
    }

    #[test]
    fn probe_separates_a_separable_toy() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..60 {
            let t = i as f64 / 10.0;
            // interleave classes so the every-fifth holdout keeps both
            if i % 2 == 0 {
                xs.push(vec![1.0 + t, 0.5]);
                ys.push(true);
            } else {
                xs.push(vec![-1.0 - t, -0.5]);
                ys.push(false);
            }
        }
        let (probe, report) = train_quality_probe(&xs, &ys).unwrap();
        assert_eq!(report.holdout_accuracy, 1.0);
        assert!(report.iterations <= 10_000);
        // monotone in the projection onto the weight vector
        let project = |x: &[f64]| -> f64 {
            probe.weights.iter().zip(x).map(|(w, v)| w * v).sum()
        };
        let mut pts: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64 - 5.0, 0.3 * i as f64])
            .collect();
        pts.sort_by(|a, b| project(a).partial_cmp(&project(b)).unwrap());
        let scores: Vec<f64> = pts.iter().map(|p| probe.score(p).unwrap()).collect();
        for w in scores.windows(2) {
            assert!(w[0] <= w[1]);
        }
        for s in scores {
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn probe_rejects_degenerate_input() {
        let xs = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert!(train_quality_probe(&xs, &[true, true, true]).is_err());
        assert!(train_quality_probe(&xs, &[true, false]).is_err());
        assert!(train_quality_probe(&[], &[]).is_err());
    }

    #[test]
    fn probe_recovers_planted_quality() {
        let cfg = SyntheticWorldConfig {
            n_cameras: 20,
            frames_per_camera: 50,
            feature_dim: 16,
            quality_degrade_amp: 2.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let xs: Vec<Vec<f64>> = ds.records().iter().map(|r| r.feature.clone()).collect();
        let ys: Vec<bool> = ds.records().iter().map(|r| r.quality.unwrap() >= 0.5).collect();
        let (_, report) = train_quality_probe(&xs, &ys).unwrap();
        assert!(
            report.holdout_accuracy >= 0.9,
            "holdout accuracy {}",
            report.holdout_accuracy
        );
    }

    #[test]
    fn quality_partition_boundaries() {
        let th = SplitThresholds::default();
        let labels = partition_quality(&[0.85, 0.70, 0.55, 0.40, 0.20, 1.0, 0.0], &th).unwrap();
        use QualityLabel::*;
        assert_eq!(labels, vec![High, High, Medium, Medium, Low, High, Low]);
        assert!(partition_quality(&[1.5], &th).is_err());
        let bad = SplitThresholds {
            t_low: 0.8,
            ..Default::default()
        };
        assert!(partition_quality(&[0.5], &bad).is_err());
    }

    /// A camera with `n` High frames spread over `months` distinct months.
    fn camera_frames(cam: &str, lat: f64, lon: f64, n: usize, months: usize) -> Vec<Record> {
        (0..n)
            .map(|i| {
                let month = (i % months) + 1;
                let ts = format!("2023-{month:02}-15T{:02}:00:00", i % 24);
                rec(cam, lat, lon, Some(&ts), vec![0.0])
            })
            .collect()
    }

    #[test]
    fn curation_enforces_candidate_rules_and_disjointness() {
        let th = SplitThresholds {
            min_frames: 500,
            ..Default::default()
        };
        let mut records = Vec::new();
        records.extend(camera_frames("good", 45.0, 10.0, 520, 12));
        records.extend(camera_frames("short", 45.0, 50.0, 499, 12));
        records.extend(camera_frames("march", 45.0, 90.0, 600, 1));
        records.extend(camera_frames("medium", 45.0, 130.0, 520, 12));
        let n_before_low = records.len();
        records.extend(camera_frames("low", 45.0, 170.0, 10, 10));

        let mut labels = vec![QualityLabel::High; n_before_low];
        // the "medium" camera's frames are all Medium
        for (i, r) in records[..n_before_low].iter().enumerate() {
            if r.camera_id == "medium" {
                labels[i] = QualityLabel::Medium;
            }
        }
        labels.extend(vec![QualityLabel::Low; 10]);

        let ds = Dataset::new(records).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let out = curate_split(&ds, &labels, &th, &mut rng).unwrap();

        assert_eq!(out.report.test_cameras, vec!["good".to_string()]);
        assert_eq!(out.report.n_candidates, 1);
        assert_eq!(out.test.len(), 520);
        assert_eq!(out.report.n_low_dropped, 10);
        assert!(!out.report.budget_met);

        let train_cams: BTreeSet<_> = out.train.records().iter().map(|r| &r.camera_id).collect();
        let test_cams: BTreeSet<_> = out.test.records().iter().map(|r| &r.camera_id).collect();
        assert!(train_cams.is_disjoint(&test_cams));
        assert!(train_cams.contains(&"short".to_string()));
        assert!(train_cams.contains(&"march".to_string()));
        assert!(train_cams.contains(&"medium".to_string()));
        assert!(!train_cams.contains(&"low".to_string()));

        // boundary: exactly min_frames qualifies
        let ds2 = Dataset::new(camera_frames("edge", 0.0, 0.0, 500, 12)).unwrap();
        let labels2 = vec![QualityLabel::High; 500];
        let out2 = curate_split(&ds2, &labels2, &th, &mut rng).unwrap();
        assert_eq!(out2.report.test_cameras, vec!["edge".to_string()]);
    }

    #[test]
    fn curation_with_no_candidates_reports_empty_test() {
        let ds = Dataset::new(camera_frames("only", 10.0, 10.0, 30, 12)).unwrap();
        let labels = vec![QualityLabel::High; 30];
        let th = SplitThresholds::default();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let out = curate_split(&ds, &labels, &th, &mut rng).unwrap();
        assert!(out.test.is_empty());
        assert_eq!(out.report.n_candidates, 0);
        assert_eq!(out.train.len(), 30);
        assert!(!out.report.budget_met);
    }

    #[test]
    fn round_robin_balances_bins_and_respects_the_cap() {
        let th = SplitThresholds {
            min_frames: 5,
            required_months: 3,
            test_camera_budget: 6,
            ..Default::default()
        };
        // bin A (lat 5) has 10 candidates, bin B (lat 25) has 1
        let mut records = Vec::new();
        for i in 0..10 {
            records.extend(camera_frames(&format!("a{i}"), 5.0, 5.0, 6, 3));
        }
        records.extend(camera_frames("b0", 25.0, 5.0, 6, 3));
        let labels = vec![QualityLabel::High; records.len()];
        let ds = Dataset::new(records).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let out = curate_split(&ds, &labels, &th, &mut rng).unwrap();

        // cap = ceil(6 / 2) + 1 = 4, so bin A contributes 4 and B its only one
        assert_eq!(out.report.per_bin_cap, 4);
        assert_eq!(out.report.occupied_bins, 2);
        let n_a = out
            .report
            .test_cameras
            .iter()
            .filter(|c| c.starts_with('a'))
            .count();
        let n_b = out.report.test_cameras.len() - n_a;
        assert_eq!(n_a, 4);
        assert_eq!(n_b, 1);
        assert!(!out.report.budget_met);

        // balanced case: three bins with members [3, 1, 1], budget 4
        let th2 = SplitThresholds {
            min_frames: 5,
            required_months: 3,
            test_camera_budget: 4,
            ..Default::default()
        };
        let mut records = Vec::new();
        for i in 0..3 {
            records.extend(camera_frames(&format!("x{i}"), 5.0, 5.0, 6, 3));
        }
        records.extend(camera_frames("y0", 25.0, 5.0, 6, 3));
        records.extend(camera_frames("z0", 45.0, 5.0, 6, 3));
        let labels = vec![QualityLabel::High; records.len()];
        let ds = Dataset::new(records).unwrap();
        let out = curate_split(&ds, &labels, &th2, &mut rng).unwrap();
        assert_eq!(out.report.test_cameras.len(), 4);
        let n_x = out
            .report
            .test_cameras
            .iter()
            .filter(|c| c.starts_with('x'))
            .count();
        assert_eq!(n_x, 2);
        assert!(out.report.budget_met);
        // per-bin count <= ceil(budget / occupied) + 1
        assert!(n_x <= th2.test_camera_budget.div_ceil(3) + 1);
    }

    #[test]
    fn dataset_validation() {
        let bad = vec![
            rec("a", 0.0, 0.0, None, vec![1.0, 2.0]),
            rec("a", 0.0, 0.0, None, vec![1.0]),
        ];
        assert!(Dataset::new(bad).is_err());
        let nan = vec![rec("a", 0.0, 0.0, None, vec![f64::NAN])];
        assert!(Dataset::new(nan).is_err());
        let mut q = rec("a", 0.0, 0.0, None, vec![1.0]);
        q.quality = Some(1.5);
        assert!(Dataset::new(vec![q]).is_err());
    }
}
