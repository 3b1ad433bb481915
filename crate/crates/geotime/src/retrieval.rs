//! Gallery construction, exact cosine search, entropy-adaptive posterior
//! reranking, and the four retrieval task runners.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint::{self, Entry};
use crate::data::Dataset;
use crate::geomath::{
    bin_center, cell_center, geo_to_cell, n_cells, timestamp_to_torus, torus_to_bin, CellId,
    GeoCoord, TimeBinId, TorusTime, N_TIME_BINS,
};
use crate::model::{Forward, Modality, Model};
use crate::objectives::LOG_FLOOR;
use crate::{Error, Result};

const NORM_TOL: f64 = 1e-6;

/// Metadata carried alongside one gallery row.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryItem {
    pub id: String,
    pub coord: Option<GeoCoord>,
    pub time: Option<TorusTime>,
    /// Class index `b(x)` of the row in its classifier space, when the
    /// gallery participates in reranking.
    pub class: Option<usize>,
}

/// An immutable bank of unit embeddings with parallel metadata. Rows are
/// rounded through f32 at construction so the in-memory gallery equals its
/// on-disk form bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    rows: Tensor,
    items: Vec<GalleryItem>,
}

impl Gallery {
    pub fn new(rows: Tensor, items: Vec<GalleryItem>) -> Result<Gallery> {
        let rows = checkpoint::quantize(&rows);
        if rows.rows() != items.len() {
            return Err(Error::Contract(format!(
                "{} embedding rows but {} metadata items",
                rows.rows(),
                items.len()
            )));
        }
        for (i, item) in items.iter().enumerate() {
            let row = rows.row_slice(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::Contract(format!(
                    "gallery row {i} (id {:?}) has norm {norm}, not 1",
                    item.id
                )));
            }
        }
        Ok(Gallery { rows, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn items(&self) -> &[GalleryItem] {
        &self.items
    }

    /// Writes the rows in the tensor container format plus a JSON metadata
    /// sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &[Entry::new("rows", self.rows.clone())])?;
        let wires: Vec<ItemWire> = self.items.iter().map(ItemWire::from_item).collect();
        let json = serde_json::to_string(&wires)
            .map_err(|e| Error::Format(format!("gallery metadata encoding failed: {e}")))?;
        checkpoint::write_atomic(&gallery_sidecar_path(path), json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Gallery> {
        let mut entries = checkpoint::load(path)?;
        if entries.len() != 1 || entries[0].name != "rows" {
            return Err(Error::Format(
                "gallery container must hold exactly one \"rows\" entry".into(),
            ));
        }
        let rows = entries.pop().expect("checked length").tensor;
        let sidecar = gallery_sidecar_path(path);
        let json = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let wires: Vec<ItemWire> = serde_json::from_str(&json).map_err(|e| Error::Parse {
            path: sidecar.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let items = wires
            .into_iter()
            .map(ItemWire::into_item)
            .collect::<Result<Vec<_>>>()?;
        Gallery::new(rows, items)
    }
}

pub fn gallery_sidecar_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemWire {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
}

impl ItemWire {
    fn from_item(item: &GalleryItem) -> ItemWire {
        ItemWire {
            id: item.id.clone(),
            lat: item.coord.map(|c| c.lat()),
            lon: item.coord.map(|c| c.lon()),
            theta: item.time.map(|t| t.theta()),
            phi: item.time.map(|t| t.phi()),
            class: item.class,
        }
    }

    fn into_item(self) -> Result<GalleryItem> {
        let coord = match (self.lat, self.lon) {
            (Some(lat), Some(lon)) => Some(GeoCoord::new(lat, lon)?),
            (None, None) => None,
            _ => {
                return Err(Error::Format(format!(
                    "gallery item {:?} has only one of lat/lon",
                    self.id
                )))
            }
        };
        let time = match (self.theta, self.phi) {
            (Some(theta), Some(phi)) => Some(TorusTime::new(theta, phi)?),
            (None, None) => None,
            _ => {
                return Err(Error::Format(format!(
                    "gallery item {:?} has only one of theta/phi",
                    self.id
                )))
            }
        };
        Ok(GalleryItem {
            id: self.id,
            coord,
            time,
            class: self.class,
        })
    }
}

/// One ranked gallery row.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedHit {
    pub row: usize,
    pub cosine: f64,
    pub score: f64,
}

/// Ranked search output. `beta` is the applied prior weight (0 when no
/// reranking took place).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<RankedHit>,
    pub beta: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn validate_query(g: &Gallery, query: &[f64]) -> Result<()> {
    if query.len() != g.dim() {
        return Err(Error::Shape {
            op: "search".into(),
            lhs: vec![1, query.len()],
            rhs: vec![g.len(), g.dim()],
        });
    }
    let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOL {
        return Err(Error::Contract(format!("query has norm {norm}, not 1")));
    }
    Ok(())
}

/// Heap entry ordered so the worst hit (lowest score, then largest row) is
/// at the top and can be evicted.
struct Worst {
    score: f64,
    cosine: f64,
    row: usize,
}

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .expect("scores are finite")
            .then(self.row.cmp(&other.row))
    }
}

/// Exact top-k selection with the deterministic tie-break (equal scores
/// ordered by ascending row). Single bounded-heap scan, no full sort.
fn rank_hits(cosines: &[f64], scores: &[f64], k: usize) -> Vec<RankedHit> {
    let k = k.min(scores.len());
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
    for (row, (&score, &cosine)) in scores.iter().zip(cosines).enumerate() {
        heap.push(Worst { score, cosine, row });
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut hits: Vec<RankedHit> = heap
        .into_iter()
        .map(|w| RankedHit {
            row: w.row,
            cosine: w.cosine,
            score: w.score,
        })
        .collect();
    hits.sort_unstable_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.row.cmp(&b.row))
    });
    hits
}

/// Exact top-k cosine search by brute-force scan. `k` is clipped to the
/// gallery size; an empty gallery yields an empty result.
pub fn search(g: &Gallery, query: &[f64], k: usize) -> Result<QueryResult> {
    if k == 0 {
        return Err(Error::Contract("search needs k >= 1".into()));
    }
    if g.is_empty() {
        return Ok(QueryResult {
            hits: Vec::new(),
            beta: 0.0,
        });
    }
    validate_query(g, query)?;
    let cosines: Vec<f64> = (0..g.len()).map(|i| dot(query, g.rows.row_slice(i))).collect();
    Ok(QueryResult {
        hits: rank_hits(&cosines, &cosines, k),
        beta: 0.0,
    })
}

/// Similarity temperature and maximum prior weight for posterior reranking.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    pub psi: f64,
    pub beta_max: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig::geo()
    }
}

impl RerankConfig {
    pub fn geo() -> RerankConfig {
        RerankConfig {
            psi: 0.07,
            beta_max: 1.0,
        }
    }

    pub fn time() -> RerankConfig {
        RerankConfig {
            psi: 0.07,
            beta_max: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.psi > 0.0 && self.psi.is_finite()) {
            return Err(Error::Config(format!(
                "rerank psi must be positive, got {}",
                self.psi
            )));
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "rerank beta_max must be >= 0, got {}",
                self.beta_max
            )));
        }
        Ok(())
    }
}

fn validate_probs(probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::Contract(format!(
            "classifier output over {} classes cannot weight a prior",
            probs.len()
        )));
    }
    let mut sum = 0.0;
    for &p in probs {
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::Contract(format!("invalid probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Query-adaptive prior weight `beta_max * (1 - H(probs) / ln B)`, clamped
/// to `[0, beta_max]`. Confident classifiers (low entropy) push it toward
/// `beta_max`; uniform output turns the prior off.
pub fn entropy_beta(probs: &[f64], beta_max: f64) -> Result<f64> {
    validate_probs(probs)?;
    if !(beta_max >= 0.0 && beta_max.is_finite()) {
        return Err(Error::Config(format!(
            "beta_max must be >= 0, got {beta_max}"
        )));
    }
    let h: f64 = probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum();
    let beta = beta_max * (1.0 - h / (probs.len() as f64).ln());
    Ok(beta.clamp(0.0, beta_max))
}

/// Posterior-like scores `sims_i / psi + beta * ln(max(probs[bins_i], 1e-12))`
/// with `beta` from `entropy_beta`. Returns the scores and the applied beta.
pub fn rerank(
    sims: &[f64],
    probs: &[f64],
    bins: &[usize],
    cfg: &RerankConfig,
) -> Result<(Vec<f64>, f64)> {
    cfg.validate()?;
    if sims.len() != bins.len() {
        return Err(Error::Contract(format!(
            "{} similarities but {} bin indices",
            sims.len(),
            bins.len()
        )));
    }
    let beta = entropy_beta(probs, cfg.beta_max)?;
    let mut scores = Vec::with_capacity(sims.len());
    for (&s, &b) in sims.iter().zip(bins) {
        if b >= probs.len() {
            return Err(Error::Contract(format!(
                "bin index {b} out of range for {} classes",
                probs.len()
            )));
        }
        if !s.is_finite() {
            return Err(Error::Numeric(format!("non-finite similarity {s}")));
        }
        scores.push(s / cfg.psi + beta * probs[b].max(LOG_FLOOR).ln());
    }
    Ok((scores, beta))
}

fn search_reranked(
    g: &Gallery,
    query: &[f64],
    probs: &[f64],
    cfg: &RerankConfig,
    k: usize,
) -> Result<QueryResult> {
    if k == 0 {
        return Err(Error::Contract("search needs k >= 1".into()));
    }
    if g.is_empty() {
        return Ok(QueryResult {
            hits: Vec::new(),
            beta: 0.0,
        });
    }
    validate_query(g, query)?;
    let cosines: Vec<f64> = (0..g.len()).map(|i| dot(query, g.rows.row_slice(i))).collect();
    let bins = g
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            item.class.ok_or_else(|| {
                Error::Contract(format!("gallery row {i} has no class index for reranking"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (scores, beta) = rerank(&cosines, probs, &bins, cfg)?;
    Ok(QueryResult {
        hits: rank_hits(&cosines, &scores, k),
        beta,
    })
}

/// Unimodal image embeddings, one unit row per feature vector.
pub fn embed_images(model: &Model, feats: &[Vec<f64>]) -> Result<Tensor> {
    if feats.is_empty() {
        return Err(Error::Contract("embedding an empty batch".into()));
    }
    let mut fwd = Forward::new(model);
    let toks = fwd.adapt_images(feats)?;
    let mut rows = Vec::with_capacity(feats.len());
    for &tok in &toks {
        rows.push(fwd.fuse(&[(Modality::V, tok)])?.constituents[0].1);
    }
    let stacked = fwd.tape.concat_rows(&rows)?;
    Ok(fwd.tape.value(stacked).clone())
}

/// Unimodal location embeddings.
pub fn embed_locations(model: &Model, coords: &[GeoCoord]) -> Result<Tensor> {
    if coords.is_empty() {
        return Err(Error::Contract("embedding an empty batch".into()));
    }
    let mut fwd = Forward::new(model);
    let toks = fwd.encode_locations(coords)?;
    let mut rows = Vec::with_capacity(coords.len());
    for &tok in &toks {
        rows.push(fwd.fuse(&[(Modality::L, tok)])?.constituents[0].1);
    }
    let stacked = fwd.tape.concat_rows(&rows)?;
    Ok(fwd.tape.value(stacked).clone())
}

/// Unimodal time embeddings.
pub fn embed_times(model: &Model, times: &[TorusTime]) -> Result<Tensor> {
    if times.is_empty() {
        return Err(Error::Contract("embedding an empty batch".into()));
    }
    let mut fwd = Forward::new(model);
    let toks = fwd.encode_times(times)?;
    let mut rows = Vec::with_capacity(times.len());
    for &tok in &toks {
        rows.push(fwd.fuse(&[(Modality::T, tok)])?.constituents[0].1);
    }
    let stacked = fwd.tape.concat_rows(&rows)?;
    Ok(fwd.tape.value(stacked).clone())
}

/// Fused image+time embeddings, pairing `feats[i]` with `times[i]`.
pub fn embed_image_time(
    model: &Model,
    feats: &[Vec<f64>],
    times: &[TorusTime],
) -> Result<Tensor> {
    if feats.len() != times.len() {
        return Err(Error::Contract(format!(
            "{} features but {} times",
            feats.len(),
            times.len()
        )));
    }
    if feats.is_empty() {
        return Err(Error::Contract("embedding an empty batch".into()));
    }
    let mut fwd = Forward::new(model);
    let v = fwd.adapt_images(feats)?;
    let t = fwd.encode_times(times)?;
    let mut rows = Vec::with_capacity(feats.len());
    for i in 0..feats.len() {
        let out = fwd.fuse(&[(Modality::V, v[i]), (Modality::T, t[i])])?;
        rows.push(out.fused.expect("bimodal fuse produces a fused embedding"));
    }
    let stacked = fwd.tape.concat_rows(&rows)?;
    Ok(fwd.tape.value(stacked).clone())
}

/// Fused image+location embeddings.
pub fn embed_image_location(
    model: &Model,
    feats: &[Vec<f64>],
    coords: &[GeoCoord],
) -> Result<Tensor> {
    if feats.len() != coords.len() {
        return Err(Error::Contract(format!(
            "{} features but {} coordinates",
            feats.len(),
            coords.len()
        )));
    }
    if feats.is_empty() {
        return Err(Error::Contract("embedding an empty batch".into()));
    }
    let mut fwd = Forward::new(model);
    let v = fwd.adapt_images(feats)?;
    let l = fwd.encode_locations(coords)?;
    let mut rows = Vec::with_capacity(feats.len());
    for i in 0..feats.len() {
        let out = fwd.fuse(&[(Modality::V, v[i]), (Modality::L, l[i])])?;
        rows.push(out.fused.expect("bimodal fuse produces a fused embedding"));
    }
    let stacked = fwd.tape.concat_rows(&rows)?;
    Ok(fwd.tape.value(stacked).clone())
}

/// Fused location+time embeddings.
pub fn embed_location_time(
    model: &Model,
    coords: &[GeoCoord],
    times: &[TorusTime],
) -> Result<Tensor> {
    if coords.len() != times.len() {
        return Err(Error::Contract(format!(
            "{} coordinates but {} times",
            coords.len(),
            times.len()
        )));
    }
    if coords.is_empty() {
        return Err(Error::Contract("embedding an empty batch".into()));
    }
    let mut fwd = Forward::new(model);
    let l = fwd.encode_locations(coords)?;
    let t = fwd.encode_times(times)?;
    let mut rows = Vec::with_capacity(coords.len());
    for i in 0..coords.len() {
        let out = fwd.fuse(&[(Modality::L, l[i]), (Modality::T, t[i])])?;
        rows.push(out.fused.expect("bimodal fuse produces a fused embedding"));
    }
    let stacked = fwd.tape.concat_rows(&rows)?;
    Ok(fwd.tape.value(stacked).clone())
}

/// Geo-class probabilities for one image, from the classifier head over its
/// unimodal embedding.
pub fn classify_geo_probs(model: &Model, image_feat: &[f64]) -> Result<Vec<f64>> {
    let mut fwd = Forward::new(model);
    let toks = fwd.adapt_images(std::slice::from_ref(&image_feat.to_vec()))?;
    let v = fwd.fuse(&[(Modality::V, toks[0])])?.constituents[0].1;
    let probs = fwd.classify_geo(v)?;
    Ok(fwd.tape.value(probs).row_slice(0).to_vec())
}

/// Time-bin probabilities for one image.
pub fn classify_time_probs(model: &Model, image_feat: &[f64]) -> Result<Vec<f64>> {
    let mut fwd = Forward::new(model);
    let toks = fwd.adapt_images(std::slice::from_ref(&image_feat.to_vec()))?;
    let v = fwd.fuse(&[(Modality::V, toks[0])])?.constituents[0].1;
    let probs = fwd.classify_time(v)?;
    Ok(fwd.tape.value(probs).row_slice(0).to_vec())
}

/// Default geo-localization candidate set: unique training coordinates (in
/// first-appearance order) followed by every cell center at `nside` not
/// already present.
pub fn candidate_coords(train: &Dataset, nside: u32) -> Result<Vec<GeoCoord>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    let mut push_unique = |c: GeoCoord, out: &mut Vec<GeoCoord>| {
        if seen.insert((c.lat().to_bits(), c.lon().to_bits())) {
            out.push(c);
        }
    };
    for r in train.records() {
        push_unique(r.coord, &mut out);
    }
    for i in 0..n_cells(nside) {
        push_unique(cell_center(CellId::new(nside, i)?), &mut out);
    }
    Ok(out)
}

/// The time-prediction gallery grid: the 288 month-hour bin centers, or a
/// finer day-by-hour grid over the full year.
pub fn time_grid(fine: bool) -> Vec<TorusTime> {
    if fine {
        let mut grid = Vec::with_capacity(365 * 24);
        for day in 0..365 {
            for hour in 0..24 {
                let theta = (day as f64 + 0.5) / 365.0;
                let phi = (hour as f64 + 0.5) / 24.0;
                grid.push(TorusTime::new(theta, phi).expect("grid point on the torus"));
            }
        }
        grid
    } else {
        (0..N_TIME_BINS)
            .map(|i| bin_center(TimeBinId::from_flat(i).expect("index in range")))
            .collect()
    }
}

/// Builds the location gallery over `candidates` for the model's cell grid.
pub fn location_gallery(model: &Model, candidates: &[GeoCoord]) -> Result<Gallery> {
    if candidates.is_empty() {
        return Err(Error::Contract("geo-localization needs candidates".into()));
    }
    let rows = embed_locations(model, candidates)?;
    let items = candidates
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            Ok(GalleryItem {
                id: format!("loc{i:06}"),
                coord: Some(c),
                time: None,
                class: Some(geo_to_cell(c, model.config.nside)?.index() as usize),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Gallery::new(rows, items)
}

/// Builds the time gallery over a grid of torus points.
pub fn time_gallery(model: &Model, grid: &[TorusTime]) -> Result<Gallery> {
    if grid.is_empty() {
        return Err(Error::Contract("time prediction needs a grid".into()));
    }
    let rows = embed_times(model, grid)?;
    let items = grid
        .iter()
        .enumerate()
        .map(|(i, &t)| GalleryItem {
            id: format!("time{i:06}"),
            coord: None,
            time: Some(t),
            class: Some(torus_to_bin(t).flat()),
        })
        .collect();
    Gallery::new(rows, items)
}

/// Builds an image gallery over a dataset's records, preserving row order.
pub fn image_gallery(model: &Model, ds: &Dataset) -> Result<Gallery> {
    if ds.is_empty() {
        return Gallery::new(Tensor::zeros(0, model.config.d), Vec::new());
    }
    let feats: Vec<Vec<f64>> = ds.records().iter().map(|r| r.feature.clone()).collect();
    let rows = embed_images(model, &feats)?;
    let items = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| GalleryItem {
            id: format!("{}#{i}", r.camera_id),
            coord: Some(r.coord),
            time: r.timestamp.map(timestamp_to_torus),
            class: None,
        })
        .collect();
    Gallery::new(rows, items)
}

/// Image-to-location retrieval with posterior reranking. The query is the
/// image embedding (or the fused image+time embedding when `query_time` is
/// given); the prior always comes from the geo head over the image alone.
pub fn task_geolocalize(
    model: &Model,
    image_feat: &[f64],
    query_time: Option<TorusTime>,
    gallery: &Gallery,
    cfg: &RerankConfig,
    k: usize,
) -> Result<QueryResult> {
    if gallery.is_empty() {
        return Err(Error::Contract("geo-localization needs candidates".into()));
    }
    let query = match query_time {
        None => embed_images(model, std::slice::from_ref(&image_feat.to_vec()))?,
        Some(t) => embed_image_time(model, std::slice::from_ref(&image_feat.to_vec()), &[t])?,
    };
    let probs = classify_geo_probs(model, image_feat)?;
    search_reranked(gallery, query.row_slice(0), &probs, cfg, k)
}

/// Image-to-time prediction with posterior reranking over a time gallery.
/// A known query location conditions the query embedding only; the gallery
/// and the prior are unchanged.
pub fn task_time_predict(
    model: &Model,
    image_feat: &[f64],
    location: Option<GeoCoord>,
    gallery: &Gallery,
    cfg: &RerankConfig,
    k: usize,
) -> Result<QueryResult> {
    if gallery.is_empty() {
        return Err(Error::Contract("time prediction needs a gallery".into()));
    }
    let query = match location {
        None => embed_images(model, std::slice::from_ref(&image_feat.to_vec()))?,
        Some(c) => {
            embed_image_location(model, std::slice::from_ref(&image_feat.to_vec()), &[c])?
        }
    };
    let probs = classify_time_probs(model, image_feat)?;
    search_reranked(gallery, query.row_slice(0), &probs, cfg, k)
}

/// Geo-time aware retrieval: the fused image+time query against an image
/// gallery, ranked by plain cosine (no classifier rerank).
pub fn task_geotime_retrieve(
    model: &Model,
    image_feat: &[f64],
    target_time: TorusTime,
    gallery: &Gallery,
    k: usize,
) -> Result<QueryResult> {
    if gallery.is_empty() {
        return Ok(QueryResult {
            hits: Vec::new(),
            beta: 0.0,
        });
    }
    let query =
        embed_image_time(model, std::slice::from_ref(&image_feat.to_vec()), &[target_time])?;
    search(gallery, query.row_slice(0), k)
}

/// Compositional retrieval: a fused location+time query against an image
/// gallery, ranked by plain cosine.
pub fn task_compositional(
    model: &Model,
    location: GeoCoord,
    target_time: TorusTime,
    gallery: &Gallery,
    k: usize,
) -> Result<QueryResult> {
    if gallery.is_empty() {
        return Ok(QueryResult {
            hits: Vec::new(),
            beta: 0.0,
        });
    }
    let query = embed_location_time(model, &[location], &[target_time])?;
    search(gallery, query.row_slice(0), k)
}
