//! Training objectives: symmetrized InfoNCE over five modality pairs, and
//! metric-aware classification with soft targets from class-center affinity
//! kernels.
//!
//! The five contrastive pairs are (v,l), (v,t), (v,lt), (l,vt), (t,vl); the
//! direct location-time pair is deliberately absent so those modalities stay
//! uncorrelated except through images.

use std::path::Path;

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{self, Entry};
use crate::geomath::{
    bin_center, cell_center, haversine_km, n_cells, torus_distance, CellId, TimeBinId, N_TIME_BINS,
};
use crate::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// InfoNCE with in-batch negatives, symmetrized over the two retrieval
/// directions: `0.5 * (nce(X to Y) + nce(Y to X))` where
/// `nce = mean_i -log softmax_j(x_i . y_j / tau)[i]`.
///
/// Rows of `x` and `y` must be matched positives, unit-norm, one row per
/// sample.
pub fn info_nce(tape: &mut Tape, x: Var, y: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (nx, dx) = tape.value(x).shape();
    let (ny, dy) = tape.value(y).shape();
    if nx == 0 {
        return Err(Error::Contract("info_nce on an empty batch".into()));
    }
    if nx != ny || dx != dy {
        return Err(Error::Shape {
            op: "info_nce".into(),
            lhs: vec![nx, dx],
            rhs: vec![ny, dy],
        });
    }
    let yt = tape.transpose(y);
    let sims = tape.matmul(x, yt)?;
    let scores = tape.scale(sims, 1.0 / tau);
    let diag = tape.take_diag(scores)?;

    let lse_rows = tape.log_sum_exp_rows(scores);
    let row_losses = tape.sub(lse_rows, diag)?;
    let forward = tape.mean_all(row_losses);

    let scores_t = tape.transpose(scores);
    let lse_cols = tape.log_sum_exp_rows(scores_t);
    let col_losses = tape.sub(lse_cols, diag)?;
    let backward = tape.mean_all(col_losses);

    let sum = tape.add(forward, backward)?;
    Ok(tape.scale(sum, 0.5))
}

/// The six per-batch embedding matrices (one unit row per sample).
#[derive(Debug, Clone, Copy)]
pub struct BatchEmbeddings {
    pub v: Var,
    pub l: Var,
    pub t: Var,
    pub vl: Var,
    pub vt: Var,
    pub lt: Var,
}

/// The five contrastive pair losses.
#[derive(Debug, Clone, Copy)]
pub struct PairLosses {
    pub v_l: Var,
    pub v_t: Var,
    pub v_lt: Var,
    pub l_vt: Var,
    pub t_vl: Var,
}

impl PairLosses {
    pub fn sum(&self, tape: &mut Tape) -> Result<Var> {
        let a = tape.add(self.v_l, self.v_t)?;
        let b = tape.add(a, self.v_lt)?;
        let c = tape.add(b, self.l_vt)?;
        tape.add(c, self.t_vl)
    }
}

/// Sum of the five pairwise InfoNCE terms.
pub fn total_contrastive(tape: &mut Tape, e: &BatchEmbeddings, tau: f64) -> Result<PairLosses> {
    let n = tape.value(e.v).rows();
    for (name, var) in [
        ("l", e.l),
        ("t", e.t),
        ("vl", e.vl),
        ("vt", e.vt),
        ("lt", e.lt),
    ] {
        let rows = tape.value(var).rows();
        if rows != n {
            return Err(Error::Contract(format!(
                "embedding batch {name} has {rows} rows, expected {n}"
            )));
        }
    }
    Ok(PairLosses {
        v_l: info_nce(tape, e.v, e.l, tau)?,
        v_t: info_nce(tape, e.v, e.t, tau)?,
        v_lt: info_nce(tape, e.v, e.lt, tau)?,
        l_vt: info_nce(tape, e.l, e.vt, tau)?,
        t_vl: info_nce(tape, e.t, e.vl, tau)?,
    })
}

/// Which distance generated an affinity table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    HaversineKm,
    Torus,
}

impl MetricKind {
    fn code(self) -> f64 {
        match self {
            MetricKind::HaversineKm => 0.0,
            MetricKind::Torus => 1.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c {
            0.0 => Ok(MetricKind::HaversineKm),
            1.0 => Ok(MetricKind::Torus),
            _ => Err(Error::Format(format!("unknown affinity metric code {c}"))),
        }
    }
}

/// Row-stochastic class-center affinity kernel:
/// `K[i][j] = exp(-dist(C_i, C_j) / gamma) / Z_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityTable {
    table: Tensor,
    gamma: f64,
    metric: MetricKind,
}

impl AffinityTable {
    /// Builds from a pairwise distance function over `n` class centers.
    pub fn from_distances(
        n: usize,
        gamma: f64,
        metric: MetricKind,
        dist: impl Fn(usize, usize) -> f64,
    ) -> Result<AffinityTable> {
        if gamma <= 0.0 {
            return Err(Error::Config(format!(
                "affinity gamma must be positive, got {gamma}"
            )));
        }
        if n == 0 {
            return Err(Error::Contract("affinity table over zero classes".into()));
        }
        let mut table = Tensor::zeros(n, n);
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let d = dist(i, j);
                if !(d.is_finite() && d >= 0.0) || (i == j && d != 0.0) {
                    return Err(Error::Numeric(format!(
                        "invalid class distance dist({i},{j}) = {d}"
                    )));
                }
                let a = (-d / gamma).exp();
                table.set(i, j, a);
                sum += a;
            }
            for j in 0..n {
                let v = table.get(i, j) / sum;
                table.set(i, j, v);
            }
        }
        let t = AffinityTable {
            table,
            gamma,
            metric,
        };
        t.validate()?;
        Ok(t)
    }

    /// Geo table over all cells at `nside` with Haversine distance;
    /// `gamma` in kilometers (250 by default in training).
    pub fn geo(nside: u32, gamma: f64) -> Result<AffinityTable> {
        let n = n_cells(nside) as usize;
        let centers: Vec<_> = (0..n)
            .map(|i| cell_center(CellId::new(nside, i as u64).expect("index in range")))
            .collect();
        AffinityTable::from_distances(n, gamma, MetricKind::HaversineKm, |i, j| {
            haversine_km(centers[i], centers[j])
        })
    }

    /// Time table over the 288 bin centers with the torus geodesic;
    /// `gamma` is unitless (1 by default in training).
    pub fn time(gamma: f64) -> Result<AffinityTable> {
        let centers: Vec<_> = (0..N_TIME_BINS)
            .map(|i| bin_center(TimeBinId::from_flat(i).expect("index in range")))
            .collect();
        AffinityTable::from_distances(N_TIME_BINS, gamma, MetricKind::Torus, |i, j| {
            torus_distance(centers[i], centers[j])
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.table.rows();
        for i in 0..n {
            let row = self.table.row_slice(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "affinity row {i} sums to {sum}, not 1"
                )));
            }
            let diag = row[i];
            for (j, &v) in row.iter().enumerate() {
                if !(v > 0.0) {
                    return Err(Error::Numeric(format!(
                        "affinity entry ({i},{j}) = {v} is not positive"
                    )));
                }
                if v > diag {
                    return Err(Error::Numeric(format!(
                        "affinity row {i} is maximized off-diagonal at {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.table.rows()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    /// Row `class` of the kernel, re-normalized to sum to exactly 1: the soft
    /// target distribution for that class.
    pub fn soft_target(&self, class: usize) -> Result<Vec<f64>> {
        if class >= self.table.rows() {
            return Err(Error::Contract(format!(
                "class {class} out of range for {} classes",
                self.table.rows()
            )));
        }
        let row = self.table.row_slice(class);
        let sum: f64 = row.iter().sum();
        Ok(row.iter().map(|&v| v / sum).collect())
    }

    /// Stacks soft targets for a batch of class indices into an N x B matrix.
    pub fn soft_target_batch(&self, classes: &[usize]) -> Result<Tensor> {
        let b = self.n_classes();
        let mut data = Vec::with_capacity(classes.len() * b);
        for &c in classes {
            data.extend(self.soft_target(c)?);
        }
        Tensor::from_vec(classes.len(), b, data)
    }

    /// Caches the table in the tensor container format. Values round to f32;
    /// rows are re-normalized on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = vec![
            Entry::new("table", self.table.clone()),
            Entry::new("meta", Tensor::row(vec![self.gamma, self.metric.code()])),
        ];
        checkpoint::save(path, &entries)
    }

    pub fn load(path: &Path) -> Result<AffinityTable> {
        let entries = checkpoint::load(path)?;
        let table = entries
            .iter()
            .find(|e| e.name == "table")
            .ok_or_else(|| Error::Format("affinity cache has no \"table\" tensor".into()))?
            .tensor
            .clone();
        let meta = &entries
            .iter()
            .find(|e| e.name == "meta")
            .ok_or_else(|| Error::Format("affinity cache has no \"meta\" tensor".into()))?
            .tensor;
        if table.rows() != table.cols() || table.rows() == 0 {
            return Err(Error::Format(format!(
                "affinity table must be square and nonempty, got {:?}",
                table.shape()
            )));
        }
        if meta.shape() != (1, 2) {
            return Err(Error::Format("affinity meta must be a 1x2 tensor".into()));
        }
        let gamma = meta.get(0, 0);
        if !(gamma > 0.0) {
            return Err(Error::Format(format!("invalid cached gamma {gamma}")));
        }
        let metric = MetricKind::from_code(meta.get(0, 1))?;
        let mut renormed = table;
        for i in 0..renormed.rows() {
            let sum: f64 = renormed.row_slice(i).iter().sum();
            if !(sum > 0.0) {
                return Err(Error::Format(format!("affinity row {i} sums to {sum}")));
            }
            for j in 0..renormed.cols() {
                let v = renormed.get(i, j) / sum;
                renormed.set(i, j, v);
            }
        }
        let t = AffinityTable {
            table: renormed,
            gamma,
            metric,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Plain (non-differentiating) soft cross-entropy
/// `-sum_i target_i ln(max(pred_i, 1e-12))`.
pub fn soft_cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Contract(format!(
            "cross-entropy over mismatched lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| -t * p.max(LOG_FLOOR).ln())
        .sum())
}

/// Mean over batch rows of the soft cross-entropy between predicted
/// probability rows and constant target rows.
pub fn soft_cross_entropy_rows(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    let shape = tape.value(probs).shape();
    if shape != targets.shape() {
        return Err(Error::Shape {
            op: "soft_cross_entropy_rows".into(),
            lhs: vec![shape.0, shape.1],
            rhs: vec![targets.rows(), targets.cols()],
        });
    }
    let t = tape.leaf(targets.clone());
    let logs = tape.log(probs, LOG_FLOOR);
    let weighted = tape.mul(logs, t)?;
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, -1.0 / shape.0 as f64))
}

/// One classification head's contribution: predicted probability rows and
/// their soft target rows.
pub struct HeadTerm<'a> {
    pub probs: Var,
    pub targets: &'a Tensor,
}

/// All loss terms of one batch as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub pairs: PairLosses,
    pub geo: Option<Var>,
    pub time: Option<Var>,
    pub total: Var,
}

/// Loss values extracted from a tape, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub v_l: f64,
    pub v_t: f64,
    pub v_lt: f64,
    pub l_vt: f64,
    pub t_vl: f64,
    pub geo: f64,
    pub time: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn contrastive_sum(&self) -> f64 {
        self.v_l + self.v_t + self.v_lt + self.l_vt + self.t_vl
    }
}

/// Combines the five contrastive terms with the weighted head terms:
/// `total = sum(pairs) + lambda_geo * geo + lambda_time * time`.
pub fn total_loss(
    tape: &mut Tape,
    e: &BatchEmbeddings,
    tau: f64,
    geo: Option<HeadTerm>,
    time: Option<HeadTerm>,
    lambda_geo: f64,
    lambda_time: f64,
) -> Result<LossVars> {
    let pairs = total_contrastive(tape, e, tau)?;
    let mut total = pairs.sum(tape)?;
    let geo_var = match geo {
        Some(term) => {
            let ce = soft_cross_entropy_rows(tape, term.probs, term.targets)?;
            let weighted = tape.scale(ce, lambda_geo);
            total = tape.add(total, weighted)?;
            Some(ce)
        }
        None => None,
    };
    let time_var = match time {
        Some(term) => {
            let ce = soft_cross_entropy_rows(tape, term.probs, term.targets)?;
            let weighted = tape.scale(ce, lambda_time);
            total = tape.add(total, weighted)?;
            Some(ce)
        }
        None => None,
    };
    Ok(LossVars {
        pairs,
        geo: geo_var,
        time: time_var,
        total,
    })
}

impl LossVars {
    /// Reads the term values off the tape, rejecting non-finite losses.
    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        let get = |v: Var| tape.value(v).item();
        let b = LossBreakdown {
            v_l: get(self.pairs.v_l)?,
            v_t: get(self.pairs.v_t)?,
            v_lt: get(self.pairs.v_lt)?,
            l_vt: get(self.pairs.l_vt)?,
            t_vl: get(self.pairs.t_vl)?,
            geo: self.geo.map(get).transpose()?.unwrap_or(0.0),
            time: self.time.map(get).transpose()?.unwrap_or(0.0),
            total: get(self.total)?,
        };
        if !b.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", b.total)));
        }
        Ok(b)
    }
}
