//! The embedding network: Fourier-feature encoders for location and time, an
//! adapter for precomputed image features, one shared transformer block, and
//! per-modality projections into the shared space, plus the geo and time
//! classification heads.
//!
//! Training runs six fusion configurations per batch: three unimodal passes
//! producing v, l, t and three bimodal passes producing vl, vt, lt (each
//! bimodal pass also yields its constituents' embeddings). All embeddings are
//! L2-normalized rows of width `d`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{linear, transformer_block, BlockVars, Tape, Tensor, Var};
use crate::checkpoint::{self, Entry};
use crate::geomath::{n_cells, GeoCoord, TorusTime, N_TIME_BINS};
use crate::{Error, Result};

/// Architecture hyperparameters. Serialized as JSON next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Fourier frequency count; frequencies are 2^0 .. 2^(n_freq-1).
    pub n_freq: usize,
    /// Tokens per modality entering the fusion block.
    pub n_tokens_v: usize,
    pub n_tokens_l: usize,
    pub n_tokens_t: usize,
    /// Width of the precomputed image feature vectors.
    pub img_feat_dim: usize,
    /// Sphere resolution; the geo head has 12 * nside^2 classes.
    pub nside: u32,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            n_freq: 10,
            n_tokens_v: 1,
            n_tokens_l: 1,
            n_tokens_t: 1,
            img_feat_dim: 64,
            nside: 8,
            tau: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.n_freq == 0 {
            return Err(Error::Config("n_freq must be positive".into()));
        }
        if self.n_tokens_v == 0 || self.n_tokens_l == 0 || self.n_tokens_t == 0 {
            return Err(Error::Config("token counts must be positive".into()));
        }
        if self.img_feat_dim == 0 {
            return Err(Error::Config("img_feat_dim must be positive".into()));
        }
        if !self.nside.is_power_of_two() || self.nside > 64 {
            return Err(Error::Config(format!(
                "nside must be a power of two in [1, 64], got {}",
                self.nside
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn n_geo_classes(&self) -> usize {
        n_cells(self.nside) as usize
    }

    pub fn n_time_classes(&self) -> usize {
        N_TIME_BINS
    }

    pub fn rff_dim(&self) -> usize {
        4 * self.n_freq
    }
}

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .1
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        assert_eq!(slot.1.shape(), t.shape(), "parameter {name:?} shape change");
        slot.1 = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rounds every tensor through f32, the checkpoint storage precision.
    pub fn quantize_in_place(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            *t = checkpoint::quantize(t);
        }
    }
}

/// Expected (name, rows, cols) for every parameter under a config. This is
/// the authoritative parameter list; init, binding, and checkpoint validation
/// all derive from it.
fn param_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d;
    let rff = cfg.rff_dim();
    let mut shapes = Vec::new();
    for enc in ["loc_enc", "time_enc"] {
        shapes.push((format!("{enc}.w1"), rff, d));
        shapes.push((format!("{enc}.b1"), 1, d));
        shapes.push((format!("{enc}.w2"), d, d));
        shapes.push((format!("{enc}.b2"), 1, d));
    }
    shapes.push(("img_adapter.w".into(), cfg.img_feat_dim, cfg.n_tokens_v * d));
    for ln in ["fusion.ln1_g", "fusion.ln1_b"] {
        shapes.push((ln.into(), 1, d));
    }
    for w in ["fusion.wq", "fusion.wk", "fusion.wv", "fusion.wo"] {
        shapes.push((w.into(), d, d));
    }
    for b in ["fusion.bq", "fusion.bk", "fusion.bv", "fusion.bo"] {
        shapes.push((b.into(), 1, d));
    }
    for ln in ["fusion.ln2_g", "fusion.ln2_b"] {
        shapes.push((ln.into(), 1, d));
    }
    shapes.push(("fusion.w1".into(), d, 4 * d));
    shapes.push(("fusion.b1".into(), 1, 4 * d));
    shapes.push(("fusion.w2".into(), 4 * d, d));
    shapes.push(("fusion.b2".into(), 1, d));
    for proj in ["proj_v", "proj_l", "proj_t"] {
        shapes.push((format!("{proj}.w"), d, d));
        shapes.push((format!("{proj}.b"), 1, d));
    }
    shapes.push(("geo_head.w1".into(), d, d));
    shapes.push(("geo_head.b1".into(), 1, d));
    shapes.push(("geo_head.w2".into(), d, cfg.n_geo_classes()));
    shapes.push(("geo_head.b2".into(), 1, cfg.n_geo_classes()));
    shapes.push(("time_head.w1".into(), d, d));
    shapes.push(("time_head.b1".into(), 1, d));
    shapes.push(("time_head.w2".into(), d, cfg.n_time_classes()));
    shapes.push(("time_head.b2".into(), 1, cfg.n_time_classes()));
    shapes
}

/// A configured network with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Random initialization: He scaling before relu layers, 1/fan_in
    /// elsewhere, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, rows, cols) in param_shapes(&config) {
            let t = if name.ends_with("_g") {
                Tensor::row(vec![1.0; cols])
            } else if name.ends_with("_b") || name.contains(".b") {
                Tensor::zeros(rows, cols)
            } else {
                let gain = if name.ends_with("enc.w1") || name == "fusion.w1" || name.ends_with("head.w1") {
                    2.0
                } else {
                    1.0
                };
                let normal = Normal::new(0.0, (gain / rows as f64).sqrt())
                    .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
                let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
                Tensor::from_vec(rows, cols, data)?
            };
            entries.push((name, t));
        }
        Ok(Model {
            config,
            params: Params { entries },
        })
    }

    /// Config JSON path convention: the checkpoint path with ".json" appended.
    pub fn config_path(ckpt: &Path) -> PathBuf {
        let mut os = ckpt.as_os_str().to_owned();
        os.push(".json");
        PathBuf::from(os)
    }

    /// Writes the checkpoint and its config sidecar atomically.
    pub fn save(&self, ckpt: &Path) -> Result<()> {
        let entries: Vec<Entry> = self
            .params
            .iter()
            .map(|(n, t)| Entry::new(n, t.clone()))
            .collect();
        checkpoint::save(ckpt, &entries)?;
        let json = serde_json::to_vec_pretty(&self.config)
            .map_err(|e| Error::Config(format!("serializing model config: {e}")))?;
        checkpoint::write_atomic(&Model::config_path(ckpt), &json)
    }

    /// Loads a checkpoint and its config sidecar, validating the parameter
    /// set against the config.
    pub fn load(ckpt: &Path) -> Result<Model> {
        let cfg_path = Model::config_path(ckpt);
        let cfg_bytes = std::fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
        config.validate()?;
        let loaded = checkpoint::load(ckpt)?;
        Model::from_entries(config, loaded)
    }

    /// Validates and adopts a decoded tensor set.
    pub fn from_entries(config: ModelConfig, loaded: Vec<Entry>) -> Result<Model> {
        config.validate()?;
        let expected = param_shapes(&config);
        let mut by_name: HashMap<String, Tensor> = HashMap::new();
        for e in loaded {
            if by_name.insert(e.name.clone(), e.tensor).is_some() {
                return Err(Error::Format(format!("duplicate parameter {:?}", e.name)));
            }
        }
        let mut entries = Vec::new();
        for (name, rows, cols) in &expected {
            let t = by_name.remove(name).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing parameter {name:?}"))
            })?;
            if t.shape() != (*rows, *cols) {
                return Err(Error::Format(format!(
                    "parameter {name:?} has shape {:?}, expected [{rows}, {cols}]",
                    t.shape()
                )));
            }
            entries.push((name.clone(), t));
        }
        if let Some(name) = by_name.into_keys().next() {
            return Err(Error::Format(format!(
                "checkpoint has unexpected parameter {name:?}"
            )));
        }
        Ok(Model {
            config,
            params: Params { entries },
        })
    }
}

/// Fourier features of a 2-vector: for each frequency f in 2^0..2^(n_freq-1),
/// the block [sin(f a), cos(f a), sin(f b), cos(f b)]. Length 4 * n_freq.
pub fn rff_features(a: f64, b: f64, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * n_freq);
    for k in 0..n_freq {
        let f = (1u64 << k) as f64;
        out.push((f * a).sin());
        out.push((f * a).cos());
        out.push((f * b).sin());
        out.push((f * b).cos());
    }
    out
}

/// Which encoder produced a token segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    V,
    L,
    T,
}

/// Result of one fusion pass: the per-constituent unit embeddings in input
/// order, and the averaged embedding when two modalities were fused.
#[derive(Debug, Clone)]
pub struct FusionOut {
    pub constituents: Vec<(Modality, Var)>,
    pub fused: Option<Var>,
}

/// One forward graph over a model's parameters. Binds every parameter as a
/// tape leaf on construction; gradients are read back per parameter name.
pub struct Forward {
    pub tape: Tape,
    config: ModelConfig,
    vars: Vec<(String, Var)>,
}

impl Forward {
    pub fn new(model: &Model) -> Forward {
        let mut tape = Tape::new();
        let vars = model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), tape.leaf(t.clone())))
            .collect();
        Forward {
            tape,
            config: model.config.clone(),
            vars,
        }
    }

    /// Tape handle of a parameter.
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .1
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    fn block_vars(&self) -> BlockVars {
        BlockVars {
            ln1_gain: self.var("fusion.ln1_g"),
            ln1_bias: self.var("fusion.ln1_b"),
            wq: self.var("fusion.wq"),
            bq: self.var("fusion.bq"),
            wk: self.var("fusion.wk"),
            bk: self.var("fusion.bk"),
            wv: self.var("fusion.wv"),
            bv: self.var("fusion.bv"),
            wo: self.var("fusion.wo"),
            bo: self.var("fusion.bo"),
            ln2_gain: self.var("fusion.ln2_g"),
            ln2_bias: self.var("fusion.ln2_b"),
            w1: self.var("fusion.w1"),
            b1: self.var("fusion.b1"),
            w2: self.var("fusion.w2"),
            b2: self.var("fusion.b2"),
        }
    }

    /// Shared two-layer relu MLP + layer norm over a batch of feature rows,
    /// then replication of each row into `n_tokens` identical tokens.
    fn encode_rows(
        &mut self,
        prefix: &str,
        feats: Tensor,
        n_tokens: usize,
    ) -> Result<Vec<Var>> {
        let (w1, b1) = (self.var(&format!("{prefix}.w1")), self.var(&format!("{prefix}.b1")));
        let (w2, b2) = (self.var(&format!("{prefix}.w2")), self.var(&format!("{prefix}.b2")));
        let n = feats.rows();
        let x = self.tape.leaf(feats);
        let h = linear(&mut self.tape, x, w1, b1)?;
        let h = self.tape.relu(h);
        let out = linear(&mut self.tape, h, w2, b2)?;
        let normed = self.tape.layer_norm_rows(out);
        let mut tokens = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.tape.slice_rows(normed, i, 1)?;
            tokens.push(if n_tokens == 1 {
                row
            } else {
                self.tape.concat_rows(&vec![row; n_tokens])?
            });
        }
        Ok(tokens)
    }

    /// Location tokens for a batch of coordinates, one token matrix per
    /// coordinate. Inputs are latitude/longitude in radians.
    pub fn encode_locations(&mut self, coords: &[GeoCoord]) -> Result<Vec<Var>> {
        let nf = self.config.n_freq;
        let mut data = Vec::with_capacity(coords.len() * 4 * nf);
        for c in coords {
            data.extend(rff_features(c.lat().to_radians(), c.lon().to_radians(), nf));
        }
        let feats = Tensor::from_vec(coords.len(), 4 * nf, data)?;
        let n_tokens = self.config.n_tokens_l;
        self.encode_rows("loc_enc", feats, n_tokens)
    }

    /// Time tokens for a batch of torus points; inputs are scaled by 2 pi so
    /// integer frequencies are exactly periodic.
    pub fn encode_times(&mut self, times: &[TorusTime]) -> Result<Vec<Var>> {
        let nf = self.config.n_freq;
        let mut data = Vec::with_capacity(times.len() * 4 * nf);
        for t in times {
            data.extend(rff_features(
                std::f64::consts::TAU * t.theta(),
                std::f64::consts::TAU * t.phi(),
                nf,
            ));
        }
        let feats = Tensor::from_vec(times.len(), 4 * nf, data)?;
        let n_tokens = self.config.n_tokens_t;
        self.encode_rows("time_enc", feats, n_tokens)
    }

    /// Image tokens for a batch of precomputed feature vectors: a bias-free
    /// linear map to `n_tokens_v` tokens, each layer-normalized. Bias-free so
    /// positive rescaling of a feature vector leaves tokens unchanged.
    pub fn adapt_images(&mut self, feats: &[Vec<f64>]) -> Result<Vec<Var>> {
        let dim = self.config.img_feat_dim;
        for (i, f) in feats.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::Shape {
                    op: format!("adapt_image (row {i})"),
                    lhs: vec![1, f.len()],
                    rhs: vec![1, dim],
                });
            }
        }
        let n = feats.len();
        let data = feats.iter().flatten().copied().collect();
        let x = self.tape.leaf(Tensor::from_vec(n, dim, data)?);
        let projected = self.tape.matmul(x, self.var("img_adapter.w"))?;
        let d = self.config.d;
        let n_tokens = self.config.n_tokens_v;
        let mut tokens = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.tape.slice_rows(projected, i, 1)?;
            // unstack the n_tokens * d row into an n_tokens x d matrix
            let mut parts = Vec::with_capacity(n_tokens);
            for t in 0..n_tokens {
                parts.push(self.tape.slice_cols(row, t * d, d)?);
            }
            let stacked = if n_tokens == 1 {
                parts[0]
            } else {
                self.tape.concat_rows(&parts)?
            };
            tokens.push(self.tape.layer_norm_rows(stacked));
        }
        Ok(tokens)
    }

    fn projection(&self, m: Modality) -> (Var, Var) {
        let prefix = match m {
            Modality::V => "proj_v",
            Modality::L => "proj_l",
            Modality::T => "proj_t",
        };
        (self.var(&format!("{prefix}.w")), self.var(&format!("{prefix}.b")))
    }

    /// Runs one fusion configuration: concatenates the token matrices, applies
    /// the shared block, pools and projects each constituent's token segment
    /// to a unit embedding, and averages the two constituents when bimodal.
    pub fn fuse(&mut self, parts: &[(Modality, Var)]) -> Result<FusionOut> {
        if parts.is_empty() || parts.len() > 2 {
            return Err(Error::Contract(format!(
                "fuse expects one or two modalities, got {}",
                parts.len()
            )));
        }
        if parts.len() == 2 && parts[0].0 == parts[1].0 {
            return Err(Error::Contract("fuse of a modality with itself".into()));
        }
        let tokens: Vec<Var> = parts.iter().map(|&(_, v)| v).collect();
        let x = if tokens.len() == 1 {
            tokens[0]
        } else {
            self.tape.concat_rows(&tokens)?
        };
        let block = self.block_vars();
        let fused_tokens = transformer_block(&mut self.tape, x, &block, self.config.heads)?;

        let mut constituents = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for &(m, v) in parts {
            let len = self.tape.value(v).rows();
            let segment = self.tape.slice_rows(fused_tokens, offset, len)?;
            offset += len;
            let pooled = self.tape.mean_rows(segment);
            let (w, b) = self.projection(m);
            let projected = linear(&mut self.tape, pooled, w, b)?;
            let unit = self.tape.l2_normalize_rows(projected)?;
            constituents.push((m, unit));
        }

        let fused = if constituents.len() == 2 {
            Some(combine_pair(
                &mut self.tape,
                constituents[0].1,
                constituents[1].1,
            )?)
        } else {
            None
        };
        Ok(FusionOut { constituents, fused })
    }

    fn head(&mut self, prefix: &str, embeddings: Var) -> Result<Var> {
        let (w1, b1) = (self.var(&format!("{prefix}.w1")), self.var(&format!("{prefix}.b1")));
        let (w2, b2) = (self.var(&format!("{prefix}.w2")), self.var(&format!("{prefix}.b2")));
        let h = linear(&mut self.tape, embeddings, w1, b1)?;
        let h = self.tape.relu(h);
        let logits = linear(&mut self.tape, h, w2, b2)?;
        Ok(self.tape.softmax_rows(logits))
    }

    /// Cell probabilities for a batch of unit embeddings (rows).
    pub fn classify_geo(&mut self, embeddings: Var) -> Result<Var> {
        self.head("geo_head", embeddings)
    }

    /// Time-bin probabilities for a batch of unit embeddings (rows).
    pub fn classify_time(&mut self, embeddings: Var) -> Result<Var> {
        self.head("time_head", embeddings)
    }
}

/// Average of two unit rows, renormalized. Errors when they are antipodal and
/// the sum has no direction.
pub(crate) fn combine_pair(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let sum = tape.add(a, b)?;
    let norm = tape
        .value(sum)
        .data()
        .iter()
        .map(|&x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm < 1e-12 {
        return Err(Error::Numeric(
            "degenerate fusion: constituent embeddings are antipodal".into(),
        ));
    }
    tape.l2_normalize_rows(sum)
}
