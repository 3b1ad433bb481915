//! Command-line front end: generation, curation, training, indexing,
//! querying, and evaluation as reproducible sequential pipelines.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use geotime::checkpoint::write_atomic;
use geotime::config::{load_run_config, RunConfig};
use geotime::data::{
    curate_split, generate_synthetic, load_jsonl, partition_quality, save_jsonl, train_quality_probe,
    CurationReport, Dataset, ProbeReport, QualityLabel, SplitThresholds,
};
use geotime::evaluation::evaluate;
use geotime::geomath::{timestamp_to_torus, GeoCoord, Timestamp, TorusTime};
use geotime::model::Model;
use geotime::retrieval::{
    candidate_coords, embed_images, image_gallery, location_gallery, task_compositional,
    task_geolocalize, task_geotime_retrieve, task_time_predict, time_gallery, time_grid, Gallery,
    QueryResult,
};
use geotime::trainer::{
    checkpoint_path, final_checkpoint_path, optimizer_path, run_training, OptimizerState,
};
use geotime::{Error, Result};

#[derive(Parser)]
#[command(name = "geotime", version, about = "Geo-temporal embedding toolkit")]
struct Cli {
    /// Run config JSON; defaults apply for anything omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides every seed the config would supply.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic camera-frame dataset as JSONL.
    Generate {
        #[arg(long, value_name = "JSONL")]
        out: PathBuf,
    },
    /// Score frames, drop low quality, and split camera-disjoint train/test.
    Curate {
        #[arg(long = "in", value_name = "JSONL")]
        input: PathBuf,
        #[arg(long, value_name = "JSONL")]
        out_train: PathBuf,
        #[arg(long, value_name = "JSONL")]
        out_test: PathBuf,
        /// Report JSON destination; printed to stdout when omitted.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        /// Probe training data: JSONL lines {"feature": [...], "label": bool}.
        /// Without it, records must carry inline quality scores.
        #[arg(long, value_name = "JSONL")]
        probe: Option<PathBuf>,
        #[arg(long)]
        t_high: Option<f64>,
        #[arg(long)]
        t_low: Option<f64>,
        #[arg(long)]
        min_frames: Option<usize>,
        #[arg(long)]
        required_months: Option<usize>,
        #[arg(long)]
        test_budget: Option<usize>,
        #[arg(long)]
        bin_size_deg: Option<f64>,
    },
    /// Train a model, writing checkpoints and the loss log.
    Train {
        #[arg(long, value_name = "JSONL")]
        data: PathBuf,
        /// Output directory; defaults to paths.out_dir from the config.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Resume from the checkpoint written at this iteration.
        #[arg(long, value_name = "ITER")]
        resume_from: Option<u64>,
    },
    /// Build a searchable gallery from a checkpoint.
    Index {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: IndexKind,
        /// Records to embed (image) or to draw candidate coordinates from
        /// (location); unused for time.
        #[arg(long, value_name = "JSONL")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Day-by-hour time grid instead of the 288 bin centers.
        #[arg(long)]
        fine_grid: bool,
    },
    /// Run one retrieval query and print ranked results as JSON.
    Query {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        gallery: PathBuf,
        #[arg(long, value_enum)]
        task: TaskKind,
        /// Query JSON file; `-` reads stdin.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Result destination; printed to stdout when omitted.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a held-out split.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Training split supplying geo-localization candidates.
        #[arg(long, value_name = "JSONL")]
        train: Option<PathBuf>,
        #[arg(long, value_name = "JSONL")]
        test: PathBuf,
        /// Report JSON destination; printed to stdout when omitted.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Write pooled image embeddings with record metadata as CSV.
    DumpEmbeddings {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "JSONL")]
        data: PathBuf,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexKind {
    Image,
    Location,
    Time,
}

/// Prints a line, shrugging off a closed stdout (for example `| head`) so
/// pipelines never abort half way through their file writes.
fn print_line(s: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{s}");
}

macro_rules! say {
    ($($arg:tt)*) => { print_line(&format!($($arg)*)) };
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKind {
    Geoloc,
    Time,
    Geotime,
    Compose,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 2,
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.trainer.seed = s;
        cfg.data.synthetic.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed)?;
    match cli.cmd {
        Cmd::Generate { out } => cmd_generate(&cfg, &out),
        Cmd::Curate {
            input,
            out_train,
            out_test,
            report,
            probe,
            t_high,
            t_low,
            min_frames,
            required_months,
            test_budget,
            bin_size_deg,
        } => {
            let mut th = cfg.data.curation.clone();
            if let Some(v) = t_high {
                th.t_high = v;
            }
            if let Some(v) = t_low {
                th.t_low = v;
            }
            if let Some(v) = min_frames {
                th.min_frames = v;
            }
            if let Some(v) = required_months {
                th.required_months = v;
            }
            if let Some(v) = test_budget {
                th.test_camera_budget = v;
            }
            if let Some(v) = bin_size_deg {
                th.bin_size_deg = v;
            }
            cmd_curate(
                &cfg,
                &th,
                &input,
                &out_train,
                &out_test,
                report.as_deref(),
                probe.as_deref(),
            )
        }
        Cmd::Train {
            data,
            out,
            resume_from,
        } => {
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.out_dir));
            cmd_train(&cfg, &data, &out, resume_from)
        }
        Cmd::Index {
            checkpoint,
            kind,
            data,
            out,
            fine_grid,
        } => cmd_index(&cfg, &checkpoint, kind, data.as_deref(), &out, fine_grid),
        Cmd::Query {
            checkpoint,
            gallery,
            task,
            input,
            k,
            out,
        } => cmd_query(
            &cfg,
            &checkpoint,
            &gallery,
            task,
            &input,
            k.unwrap_or(cfg.retrieval.k),
            out.as_deref(),
        ),
        Cmd::Eval {
            checkpoint,
            train,
            test,
            report,
        } => cmd_eval(&cfg, &checkpoint, train.as_deref(), &test, report.as_deref()),
        Cmd::DumpEmbeddings {
            checkpoint,
            data,
            out,
        } => cmd_dump_embeddings(&checkpoint, &data, &out),
    }
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate_synthetic(&cfg.data.synthetic)?;
    save_jsonl(&ds, out)?;
    say!(
        "wrote {} records ({} cameras, feature dim {}) to {}",
        ds.len(),
        cfg.data.synthetic.n_cameras,
        ds.feature_dim(),
        out.display()
    );
    Ok(())
}

/// One probe-training example on the wire.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeLine {
    feature: Vec<f64>,
    label: bool,
}

fn load_probe_file(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ProbeLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        features.push(parsed.feature);
        labels.push(parsed.label);
    }
    Ok((features, labels))
}

#[derive(Serialize)]
struct QualityCounts {
    high: usize,
    medium: usize,
    low: usize,
}

#[derive(Serialize)]
struct BinCounts {
    cameras: usize,
    test_cameras: usize,
}

#[derive(Serialize)]
struct CurateCliReport {
    quality_counts: QualityCounts,
    camera_disjoint: bool,
    shared_cameras: usize,
    /// Camera counts per latitude-longitude bin, keyed "latIdx,lonIdx".
    per_bin: BTreeMap<String, BinCounts>,
    split: CurationReport,
    probe: Option<ProbeReport>,
}

fn cmd_curate(
    cfg: &RunConfig,
    th: &SplitThresholds,
    input: &Path,
    out_train: &Path,
    out_test: &Path,
    report_path: Option<&Path>,
    probe_path: Option<&Path>,
) -> Result<()> {
    let ds = load_jsonl(input)?;
    let (scores, probe_report) = match probe_path {
        Some(p) => {
            let (features, labels) = load_probe_file(p)?;
            let (probe, report) = train_quality_probe(&features, &labels)?;
            let scores = ds
                .records()
                .iter()
                .map(|r| probe.score(&r.feature))
                .collect::<Result<Vec<f64>>>()?;
            (scores, Some(report))
        }
        None => {
            let scores = ds
                .records()
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r.quality.ok_or_else(|| {
                        Error::Contract(format!(
                            "record {i} has no quality score; pass --probe to fit one"
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            (scores, None)
        }
    };

    let labels = partition_quality(&scores, th)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let curation = curate_split(&ds, &labels, th, &mut rng)?;

    let train_cams: BTreeSet<&str> = curation
        .train
        .records()
        .iter()
        .map(|r| r.camera_id.as_str())
        .collect();
    let test_cams: BTreeSet<&str> = curation
        .test
        .records()
        .iter()
        .map(|r| r.camera_id.as_str())
        .collect();
    let shared = train_cams.intersection(&test_cams).count();
    say!(
        "camera-disjoint: {} ({} shared of {} train / {} test cameras)",
        if shared == 0 { "ok" } else { "VIOLATED" },
        shared,
        train_cams.len(),
        test_cams.len()
    );
    if shared > 0 {
        return Err(Error::Contract(format!(
            "{shared} cameras appear in both splits"
        )));
    }

    let mut per_bin: BTreeMap<String, BinCounts> = BTreeMap::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let selected: BTreeSet<&str> = curation
        .report
        .test_cameras
        .iter()
        .map(String::as_str)
        .collect();
    for r in ds.records() {
        if !seen.insert(&r.camera_id) {
            continue;
        }
        let i = ((r.coord.lat() + 90.0) / th.bin_size_deg).floor() as i64;
        let j = ((r.coord.lon() + 180.0) / th.bin_size_deg).floor() as i64;
        let entry = per_bin.entry(format!("{i},{j}")).or_insert(BinCounts {
            cameras: 0,
            test_cameras: 0,
        });
        entry.cameras += 1;
        if selected.contains(r.camera_id.as_str()) {
            entry.test_cameras += 1;
        }
    }

    let counts = QualityCounts {
        high: labels.iter().filter(|&&l| l == QualityLabel::High).count(),
        medium: labels
            .iter()
            .filter(|&&l| l == QualityLabel::Medium)
            .count(),
        low: labels.iter().filter(|&&l| l == QualityLabel::Low).count(),
    };
    say!(
        "quality: {} high, {} medium, {} low of {} records",
        counts.high,
        counts.medium,
        counts.low,
        ds.len()
    );

    save_jsonl(&curation.train, out_train)?;
    save_jsonl(&curation.test, out_test)?;
    say!(
        "wrote {} train records to {} and {} test records to {}",
        curation.train.len(),
        out_train.display(),
        curation.test.len(),
        out_test.display()
    );

    let cli_report = CurateCliReport {
        quality_counts: counts,
        camera_disjoint: shared == 0,
        shared_cameras: shared,
        per_bin,
        split: curation.report,
        probe: probe_report,
    };
    let json = serde_json::to_string_pretty(&cli_report)
        .map_err(|e| Error::Format(format!("report encoding failed: {e}")))?;
    match report_path {
        Some(p) => {
            write_atomic(p, json.as_bytes())?;
            say!("report written to {}", p.display());
        }
        None => say!("{json}"),
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume_from: Option<u64>) -> Result<()> {
    let ds = load_jsonl(data)?;
    if ds.feature_dim() != cfg.model.img_feat_dim {
        return Err(Error::Config(format!(
            "dataset feature dim {} does not match model.img_feat_dim {}",
            ds.feature_dim(),
            cfg.model.img_feat_dim
        )));
    }
    let (mut model, mut opt, start_iter) = match resume_from {
        Some(iter) => {
            let model = Model::load(&checkpoint_path(out, iter))?;
            let opt = OptimizerState::load(&optimizer_path(out, iter), &model.params)?;
            say!("resuming from iteration {iter}");
            (model, opt, iter)
        }
        None => {
            let model = Model::init(cfg.model.clone(), cfg.seed)?;
            let opt = OptimizerState::new(&model.params);
            (model, opt, 0)
        }
    };
    let rows = run_training(&mut model, &mut opt, &ds, &cfg.trainer, start_iter, out)?;
    let last = rows
        .last()
        .ok_or_else(|| Error::Contract("training produced no iterations".into()))?;
    say!(
        "trained to iteration {} (total loss {:.6}); final checkpoint {}",
        last.iter,
        last.losses.total,
        final_checkpoint_path(out).display()
    );
    Ok(())
}

fn cmd_index(
    cfg: &RunConfig,
    checkpoint: &Path,
    kind: IndexKind,
    data: Option<&Path>,
    out: &Path,
    fine_grid: bool,
) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let need_data = |what: &str| -> Result<Dataset> {
        let path = data.ok_or_else(|| {
            Error::Config(format!("--data is required for an {what} index"))
        })?;
        load_jsonl(path)
    };
    let gallery = match kind {
        IndexKind::Image => image_gallery(&model, &need_data("image")?)?,
        IndexKind::Location => {
            let train = need_data("location")?;
            let candidates = candidate_coords(&train, model.config.nside)?;
            location_gallery(&model, &candidates)?
        }
        IndexKind::Time => {
            let fine = fine_grid || cfg.retrieval.fine_time_grid;
            time_gallery(&model, &time_grid(fine))?
        }
    };
    gallery.save(out)?;
    say!(
        "indexed {} rows (dim {}) into {}",
        gallery.len(),
        gallery.dim(),
        out.display()
    );
    Ok(())
}

/// Time given either as a civil timestamp or as raw torus coordinates.
#[derive(Deserialize)]
#[serde(untagged)]
enum TimeSpec {
    Iso(String),
    Torus { theta: f64, phi: f64 },
}

impl TimeSpec {
    fn to_torus(&self) -> Result<TorusTime> {
        match self {
            TimeSpec::Iso(s) => Ok(timestamp_to_torus(Timestamp::parse_iso(s)?)),
            TimeSpec::Torus { theta, phi } => TorusTime::new(*theta, *phi),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LatLon {
    lat: f64,
    lon: f64,
}

/// Query payload; which fields are required depends on the task.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryFile {
    feature: Option<Vec<f64>>,
    location: Option<LatLon>,
    time: Option<TimeSpec>,
}

#[derive(Serialize)]
struct HitOut {
    rank: usize,
    id: String,
    cosine: f64,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phi: Option<f64>,
}

#[derive(Serialize)]
struct QueryOut {
    task: String,
    k: usize,
    beta: f64,
    hits: Vec<HitOut>,
}

fn render_result(task: &str, k: usize, gallery: &Gallery, res: &QueryResult) -> QueryOut {
    let hits = res
        .hits
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let item = &gallery.items()[h.row];
            HitOut {
                rank: i + 1,
                id: item.id.clone(),
                cosine: h.cosine,
                score: h.score,
                lat: item.coord.map(|c| c.lat()),
                lon: item.coord.map(|c| c.lon()),
                theta: item.time.map(|t| t.theta()),
                phi: item.time.map(|t| t.phi()),
            }
        })
        .collect();
    QueryOut {
        task: task.to_string(),
        k,
        beta: res.beta,
        hits,
    }
}

fn read_query_file(path: &Path) -> Result<QueryFile> {
    let text = if path.as_os_str() == "-" {
        let mut buf = String::new();
        std::io::stdin()
            .read_to_string(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        buf
    } else {
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    };
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn cmd_query(
    cfg: &RunConfig,
    checkpoint: &Path,
    gallery_path: &Path,
    task: TaskKind,
    input: &Path,
    k: usize,
    out: Option<&Path>,
) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let gallery = Gallery::load(gallery_path)?;
    let q = read_query_file(input)?;

    let feature = |q: &QueryFile| -> Result<Vec<f64>> {
        q.feature
            .clone()
            .ok_or_else(|| Error::Config("this task needs a \"feature\" field".into()))
    };
    let coord = |l: &LatLon| GeoCoord::new(l.lat, l.lon);
    let need_time = |q: &QueryFile| -> Result<TorusTime> {
        q.time
            .as_ref()
            .ok_or_else(|| Error::Config("this task needs a \"time\" field".into()))?
            .to_torus()
    };

    let (name, res) = match task {
        TaskKind::Geoloc => {
            let time = q.time.as_ref().map(|t| t.to_torus()).transpose()?;
            let res = task_geolocalize(
                &model,
                &feature(&q)?,
                time,
                &gallery,
                &cfg.retrieval.rerank_geo,
                k,
            )?;
            ("geoloc", res)
        }
        TaskKind::Time => {
            let location = q.location.as_ref().map(coord).transpose()?;
            let res = task_time_predict(
                &model,
                &feature(&q)?,
                location,
                &gallery,
                &cfg.retrieval.rerank_time,
                k,
            )?;
            ("time", res)
        }
        TaskKind::Geotime => {
            let res =
                task_geotime_retrieve(&model, &feature(&q)?, need_time(&q)?, &gallery, k)?;
            ("geotime", res)
        }
        TaskKind::Compose => {
            let location = q
                .location
                .as_ref()
                .ok_or_else(|| Error::Config("this task needs a \"location\" field".into()))?;
            let res =
                task_compositional(&model, coord(location)?, need_time(&q)?, &gallery, k)?;
            ("compose", res)
        }
    };

    let rendered = render_result(name, k, &gallery, &res);
    let json = serde_json::to_string_pretty(&rendered)
        .map_err(|e| Error::Format(format!("result encoding failed: {e}")))?;
    match out {
        Some(p) => {
            write_atomic(p, json.as_bytes())?;
            say!("result written to {}", p.display());
        }
        None => say!("{json}"),
    }
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    train: Option<&Path>,
    test: &Path,
    report_path: Option<&Path>,
) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let train_ds = match train {
        Some(p) => load_jsonl(p)?,
        None => Dataset::default(),
    };
    let test_ds = load_jsonl(test)?;
    let report = evaluate(&model, &train_ds, &test_ds, &cfg.evaluation, cfg.seed)?;
    let json = report.to_json()?;
    match report_path {
        Some(p) => {
            write_atomic(p, json.as_bytes())?;
            for line in report.to_csv().lines().skip(1) {
                say!("{}", line.replace(',', " = "));
            }
            say!("report written to {}", p.display());
        }
        None => say!("{json}"),
    }
    Ok(())
}

fn cmd_dump_embeddings(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let ds = load_jsonl(data)?;
    if ds.is_empty() {
        return Err(Error::Contract("nothing to embed: dataset is empty".into()));
    }
    let feats: Vec<Vec<f64>> = ds.records().iter().map(|r| r.feature.clone()).collect();
    let emb = embed_images(&model, &feats)?;

    let mut csv = String::from("row,camera_id,lat,lon,theta,phi");
    for j in 0..model.config.d {
        csv.push_str(&format!(",e{j}"));
    }
    csv.push('\n');
    for (i, r) in ds.records().iter().enumerate() {
        let t = r.timestamp.map(timestamp_to_torus);
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        csv.push_str(&format!(
            "{i},{},{},{},{},{}",
            r.camera_id,
            r.coord.lat(),
            r.coord.lon(),
            fmt(t.map(|t| t.theta())),
            fmt(t.map(|t| t.phi()))
        ));
        for &v in emb.row_slice(i) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_atomic(out, csv.as_bytes())?;
    say!(
        "wrote {} embedding rows (dim {}) to {}",
        ds.len(),
        model.config.d,
        out.display()
    );
    Ok(())
}
