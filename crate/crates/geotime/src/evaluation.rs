//! Task metrics: circular time errors, geodesic error, recall under joint
//! geo-time thresholds, hemispheric balance, and confusion matrices, plus
//! the end-to-end evaluation driver over a trained model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::geomath::{
    haversine_km, timestamp_to_torus, torus_to_bin, GeoCoord, TorusTime, N_HOUR_BINS,
    N_MONTH_BINS,
};
use crate::model::Model;
use crate::retrieval::{
    candidate_coords, image_gallery, location_gallery, task_geolocalize, task_geotime_retrieve,
    task_time_predict, time_gallery, time_grid, RerankConfig,
};
use crate::{Error, Result};

/// Circular time-of-day error in hours: `24 * min(|dphi|, 1 - |dphi|)`.
/// Bounded by 12.
pub fn tod_error_hours(pred: TorusTime, gt: TorusTime) -> f64 {
    let d = (pred.phi() - gt.phi()).abs();
    24.0 * d.min(1.0 - d)
}

/// Circular time-of-year error in days on a 365-day circle. Bounded by 182.5.
pub fn toy_error_days(pred: TorusTime, gt: TorusTime) -> f64 {
    let d = (pred.theta() - gt.theta()).abs();
    365.0 * d.min(1.0 - d)
}

/// Geodesic prediction error in kilometers.
pub fn geoloc_error_km(pred: GeoCoord, gt: GeoCoord) -> f64 {
    haversine_km(pred, gt)
}

/// Joint spatial and temporal correctness thresholds for geo-time retrieval.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSet {
    pub t_geo_km: f64,
    pub t_toy_days: f64,
    pub t_tod_hours: f64,
}

impl Default for ThresholdSet {
    fn default() -> Self {
        ThresholdSet {
            t_geo_km: 25.0,
            t_toy_days: 30.0,
            t_tod_hours: 1.0,
        }
    }
}

impl ThresholdSet {
    /// The looser spatial radius used for cross-camera benchmarks.
    pub fn broad() -> ThresholdSet {
        ThresholdSet {
            t_geo_km: 125.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_geo_km", self.t_geo_km),
            ("t_toy_days", self.t_toy_days),
            ("t_tod_hours", self.t_tod_hours),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// The (location, target time) a geo-time query must be answered with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTimeTarget {
    pub coord: GeoCoord,
    pub time: TorusTime,
}

/// Whether a retrieved record satisfies all three thresholds jointly.
pub fn is_geotime_hit(
    target: &GeoTimeTarget,
    coord: GeoCoord,
    time: TorusTime,
    th: &ThresholdSet,
) -> bool {
    haversine_km(target.coord, coord) <= th.t_geo_km
        && toy_error_days(time, target.time) <= th.t_toy_days
        && tod_error_hours(time, target.time) <= th.t_tod_hours
}

/// Recall@k over per-query ranked result lists: a query scores when any of
/// its top-k records is a joint-threshold hit.
pub fn geotime_recall(
    results: &[(GeoTimeTarget, Vec<(GeoCoord, TorusTime)>)],
    th: &ThresholdSet,
    k: usize,
) -> Result<f64> {
    th.validate()?;
    if k == 0 {
        return Err(Error::Contract("recall needs k >= 1".into()));
    }
    if results.is_empty() {
        return Err(Error::Contract("recall over zero queries".into()));
    }
    let hits = results
        .iter()
        .filter(|(target, ranked)| {
            ranked
                .iter()
                .take(k)
                .any(|&(c, t)| is_geotime_hit(target, c, t, th))
        })
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Per-hemisphere recall and the N/S ratio. The ratio is `None` when the
/// southern recall is zero (undefined, not infinite).
#[derive(Debug, Clone, PartialEq)]
pub struct HemisphericRecall {
    pub north: f64,
    pub south: f64,
    pub ratio: Option<f64>,
}

/// Splits per-query hit flags at the equator (latitude 0 counts as northern)
/// and reports per-hemisphere recall. Errors unless both hemispheres are
/// represented among the queries.
pub fn hemispheric_ratio(hits: &[bool], lats: &[f64]) -> Result<HemisphericRecall> {
    if hits.len() != lats.len() {
        return Err(Error::Contract(format!(
            "{} hit flags but {} latitudes",
            hits.len(),
            lats.len()
        )));
    }
    let mut n = (0usize, 0usize);
    let mut s = (0usize, 0usize);
    for (&hit, &lat) in hits.iter().zip(lats) {
        let side = if lat >= 0.0 { &mut n } else { &mut s };
        side.0 += 1;
        if hit {
            side.1 += 1;
        }
    }
    if n.0 == 0 || s.0 == 0 {
        return Err(Error::Contract(
            "hemispheric ratio needs queries in both hemispheres".into(),
        ));
    }
    let north = n.1 as f64 / n.0 as f64;
    let south = s.1 as f64 / s.0 as f64;
    let ratio = if south > 0.0 { Some(north / south) } else { None };
    Ok(HemisphericRecall {
        north,
        south,
        ratio,
    })
}

/// Count matrix with ground truth on rows and predictions on columns.
pub fn confusion_matrix(gt: &[usize], pred: &[usize], n: usize) -> Result<Vec<Vec<u64>>> {
    if gt.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} ground-truth bins but {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    let mut m = vec![vec![0u64; n]; n];
    for (&g, &p) in gt.iter().zip(pred) {
        if g >= n || p >= n {
            return Err(Error::Contract(format!(
                "bin ({g}, {p}) out of range for {n} classes"
            )));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// Month (12x12) and hour (24x24) confusion matrices from torus-time pairs.
pub fn time_confusions(
    gt: &[TorusTime],
    pred: &[TorusTime],
) -> Result<(Vec<Vec<u64>>, Vec<Vec<u64>>)> {
    let gt_bins: Vec<_> = gt.iter().map(|&t| torus_to_bin(t)).collect();
    let pred_bins: Vec<_> = pred.iter().map(|&t| torus_to_bin(t)).collect();
    let months = confusion_matrix(
        &gt_bins.iter().map(|b| b.month() as usize).collect::<Vec<_>>(),
        &pred_bins.iter().map(|b| b.month() as usize).collect::<Vec<_>>(),
        N_MONTH_BINS,
    )?;
    let hours = confusion_matrix(
        &gt_bins.iter().map(|b| b.hour() as usize).collect::<Vec<_>>(),
        &pred_bins.iter().map(|b| b.hour() as usize).collect::<Vec<_>>(),
        N_HOUR_BINS,
    )?;
    Ok((months, hours))
}

/// Renders a confusion matrix as comma-separated rows.
pub fn confusion_csv(m: &[Vec<u64>]) -> String {
    let mut out = String::new();
    for row in m {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Aggregated evaluation output. Fields are `None` when the corresponding
/// task was not run (for example no timestamped queries). A present southern
/// recall with an absent ratio means the ratio is undefined (S-R = 0).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsReport {
    pub n_time_queries: usize,
    pub n_geo_queries: usize,
    pub n_retrieval_queries: usize,
    pub mean_toy_error_days: Option<f64>,
    pub mean_tod_error_hours: Option<f64>,
    pub mean_geoloc_error_km: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub recall_at_10: Option<f64>,
    pub random_baseline_recall_at_10: Option<f64>,
    pub north_recall_at_10: Option<f64>,
    pub south_recall_at_10: Option<f64>,
    pub north_south_ratio: Option<f64>,
    pub month_confusion: Option<Vec<Vec<u64>>>,
    pub hour_confusion: Option<Vec<Vec<u64>>>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("recall_at_1", self.recall_at_1),
            ("recall_at_5", self.recall_at_5),
            ("recall_at_10", self.recall_at_10),
        ] {
            if let Some(v) = r {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Contract(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        let chain = [self.recall_at_1, self.recall_at_5, self.recall_at_10];
        let present: Vec<f64> = chain.iter().flatten().copied().collect();
        if present.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Contract(format!(
                "recalls must be non-decreasing in k, got {present:?}"
            )));
        }
        for m in [&self.month_confusion, &self.hour_confusion].into_iter().flatten() {
            let n = m.len();
            if m.iter().any(|row| row.len() != n) {
                return Err(Error::Contract("confusion matrix is not square".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("metrics encoding failed: {e}")))
    }

    pub fn from_json(json: &str) -> Result<MetricsReport> {
        let report: MetricsReport = serde_json::from_str(json).map_err(|e| Error::Parse {
            path: "<metrics>".into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        report.validate()?;
        Ok(report)
    }

    /// Flat `metric,value` rows for the scalar fields that were computed.
    /// An undefined N/S ratio is written out as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push_str(&format!("{name},{v}\n"));
            }
        };
        push("n_time_queries", Some(self.n_time_queries as f64));
        push("n_geo_queries", Some(self.n_geo_queries as f64));
        push("n_retrieval_queries", Some(self.n_retrieval_queries as f64));
        push("mean_toy_error_days", self.mean_toy_error_days);
        push("mean_tod_error_hours", self.mean_tod_error_hours);
        push("mean_geoloc_error_km", self.mean_geoloc_error_km);
        push("recall_at_1", self.recall_at_1);
        push("recall_at_5", self.recall_at_5);
        push("recall_at_10", self.recall_at_10);
        push("random_baseline_recall_at_10", self.random_baseline_recall_at_10);
        push("north_recall_at_10", self.north_recall_at_10);
        push("south_recall_at_10", self.south_recall_at_10);
        push("north_south_ratio", self.north_south_ratio);
        if self.south_recall_at_10.is_some() && self.north_south_ratio.is_none() {
            out.push_str("north_south_ratio,undefined\n");
        }
        out
    }
}

/// Everything the evaluation driver needs beyond the datasets.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: ThresholdSet,
    pub rerank_geo: RerankConfig,
    pub rerank_time: RerankConfig,
    /// Use the day-by-hour time gallery instead of the 288 bin centers.
    pub fine_time_grid: bool,
    /// Condition the time-prediction query on the known query location.
    pub condition_time_on_location: bool,
    /// Optional cap on the number of evaluated queries.
    pub max_queries: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: ThresholdSet::default(),
            rerank_geo: RerankConfig::geo(),
            rerank_time: RerankConfig::time(),
            fine_time_grid: false,
            condition_time_on_location: true,
            max_queries: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.rerank_geo.validate()?;
        self.rerank_time.validate()?;
        if self.max_queries == Some(0) {
            return Err(Error::Config("max_queries must be positive".into()));
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Runs the three evaluation tasks over the timestamped test records:
/// time prediction (circular errors and confusion matrices), geo-localization
/// (mean geodesic error over the train-coordinate + cell-center candidate
/// set), and geo-time retrieval against the test-image gallery.
///
/// Each retrieval query targets the capture time of the next timestamped
/// record of the same camera, with the query's own gallery row excluded;
/// queries whose camera has no second record are skipped. The random
/// baseline recall re-scores the same queries under seeded random rankings.
pub fn evaluate(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let queries: Vec<usize> = test
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.timestamp.is_some())
        .map(|(i, _)| i)
        .take(cfg.max_queries.unwrap_or(usize::MAX))
        .collect();
    if queries.is_empty() {
        return Err(Error::Contract(
            "evaluation needs timestamped test records".into(),
        ));
    }
    let mut report = MetricsReport::default();

    // time prediction
    let t_gallery = time_gallery(model, &time_grid(cfg.fine_time_grid))?;
    let mut tod_errors = Vec::with_capacity(queries.len());
    let mut toy_errors = Vec::with_capacity(queries.len());
    let mut gt_times = Vec::with_capacity(queries.len());
    let mut pred_times = Vec::with_capacity(queries.len());
    for &qi in &queries {
        let r = &test.records()[qi];
        let gt = timestamp_to_torus(r.timestamp.expect("queries are timestamped"));
        let location = cfg.condition_time_on_location.then_some(r.coord);
        let res = task_time_predict(model, &r.feature, location, &t_gallery, &cfg.rerank_time, 1)?;
        let top = res
            .hits
            .first()
            .ok_or_else(|| Error::Contract("time gallery returned no hits".into()))?;
        let pred = t_gallery.items()[top.row]
            .time
            .ok_or_else(|| Error::Contract("time gallery row lacks a torus point".into()))?;
        tod_errors.push(tod_error_hours(pred, gt));
        toy_errors.push(toy_error_days(pred, gt));
        gt_times.push(gt);
        pred_times.push(pred);
    }
    report.n_time_queries = queries.len();
    report.mean_tod_error_hours = mean(&tod_errors);
    report.mean_toy_error_days = mean(&toy_errors);
    let (months, hours) = time_confusions(&gt_times, &pred_times)?;
    report.month_confusion = Some(months);
    report.hour_confusion = Some(hours);

    // geo-localization
    let candidates = candidate_coords(train, model.config.nside)?;
    let l_gallery = location_gallery(model, &candidates)?;
    let mut geo_errors = Vec::with_capacity(queries.len());
    for &qi in &queries {
        let r = &test.records()[qi];
        let res = task_geolocalize(model, &r.feature, None, &l_gallery, &cfg.rerank_geo, 1)?;
        let top = res
            .hits
            .first()
            .ok_or_else(|| Error::Contract("location gallery returned no hits".into()))?;
        let pred = l_gallery.items()[top.row]
            .coord
            .ok_or_else(|| Error::Contract("location gallery row lacks a coordinate".into()))?;
        geo_errors.push(geoloc_error_km(pred, r.coord));
    }
    report.n_geo_queries = queries.len();
    report.mean_geoloc_error_km = mean(&geo_errors);

    // geo-time retrieval against the full test-image gallery
    let gallery = image_gallery(model, test)?;
    let mut next_same_camera = Vec::with_capacity(queries.len());
    for &qi in &queries {
        let cam = &test.records()[qi].camera_id;
        let total = test.len();
        let target = (1..total)
            .map(|off| (qi + off) % total)
            .find(|&j| test.records()[j].camera_id == *cam && test.records()[j].timestamp.is_some());
        next_same_camera.push(target);
    }
    let mut hit_rows: Vec<(GeoTimeTarget, Vec<(GeoCoord, TorusTime)>)> = Vec::new();
    let mut lats = Vec::new();
    let mut random_hits = Vec::new();
    for (&qi, &target_row) in queries.iter().zip(&next_same_camera) {
        let Some(tj) = target_row else { continue };
        let r = &test.records()[qi];
        let target = GeoTimeTarget {
            coord: r.coord,
            time: timestamp_to_torus(
                test.records()[tj].timestamp.expect("target is timestamped"),
            ),
        };
        let res = task_geotime_retrieve(model, &r.feature, target.time, &gallery, 11)?;
        let ranked: Vec<(GeoCoord, TorusTime)> = res
            .hits
            .iter()
            .filter(|h| h.row != qi)
            .take(10)
            .filter_map(|h| {
                let item = &gallery.items()[h.row];
                Some((item.coord?, item.time?))
            })
            .collect();
        hit_rows.push((target, ranked));
        lats.push(r.coord.lat());

        // random-ranking baseline on the same gallery and exclusion rule
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(qi as u64);
        let mut rows: Vec<usize> = (0..gallery.len()).filter(|&j| j != qi).collect();
        rows.shuffle(&mut rng);
        let hit = rows.iter().take(10).any(|&j| {
            let item = &gallery.items()[j];
            match (item.coord, item.time) {
                (Some(c), Some(t)) => is_geotime_hit(&target, c, t, &cfg.thresholds),
                _ => false,
            }
        });
        random_hits.push(hit);
    }
    if !hit_rows.is_empty() {
        report.n_retrieval_queries = hit_rows.len();
        report.recall_at_1 = Some(geotime_recall(&hit_rows, &cfg.thresholds, 1)?);
        report.recall_at_5 = Some(geotime_recall(&hit_rows, &cfg.thresholds, 5)?);
        report.recall_at_10 = Some(geotime_recall(&hit_rows, &cfg.thresholds, 10)?);
        report.random_baseline_recall_at_10 = Some(
            random_hits.iter().filter(|&&h| h).count() as f64 / random_hits.len() as f64,
        );
        let hits_at_10: Vec<bool> = hit_rows
            .iter()
            .map(|(target, ranked)| {
                ranked
                    .iter()
                    .take(10)
                    .any(|&(c, t)| is_geotime_hit(target, c, t, &cfg.thresholds))
            })
            .collect();
        if let Ok(h) = hemispheric_ratio(&hits_at_10, &lats) {
            report.north_recall_at_10 = Some(h.north);
            report.south_recall_at_10 = Some(h.south);
            report.north_south_ratio = h.ratio;
        }
    }
    report.validate()?;
    Ok(report)
}
