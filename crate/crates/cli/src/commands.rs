use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lambda_core::aligneval::{align, detection_prf, evaluate, write_json, write_pairs_csv, Metric, MetricReport, Prf};
use lambda_core::ipule::{run_ipule, train_alignment, write_history_csv, IpuleConfig};
use lambda_core::keesa::{encode_graph, read_checkpoint, write_checkpoint, EdgeList, EmbeddingTable, EncoderParams};
use lambda_core::kgdata::{gen_synthetic_pair, load_kg_pair, save_kg_pair, split_anchors, AnchorSplit, KgPair};
use lambda_core::oracles::{run_suite, Suite};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const DETECTION: &str = "detection.json";
pub const HISTORY: &str = "history.csv";
pub const PAIRS: &str = "pairs.csv";
pub const METRICS: &str = "metrics.json";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const ALIGN_CHECKPOINT: &str = "align_checkpoint.bin";
pub const VERIFY: &str = "verify.json";

/// Process exit status by outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failed,
    NotConverged,
    NotAlignable,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Failed => 1,
            Outcome::NotConverged => 2,
            Outcome::NotAlignable => 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub platform: String,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Versions {
    pub lambda: String,
    pub lambda_core: String,
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig, outputs: &[&str]) -> Result<()> {
    let m = Manifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        versions: Versions {
            lambda: env!("CARGO_PKG_VERSION").into(),
            lambda_core: lambda_core::VERSION.into(),
        },
        platform: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config: cfg.clone(),
    };
    write_json(&m, &out.join(MANIFEST))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    let Some(dir) = flag.or_else(|| cfg.out.clone()) else {
        bail!("no output directory: pass --out or set `out` in the config");
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_pair(cfg: &ExperimentConfig) -> Result<KgPair> {
    let Some(dir) = &cfg.data.dir else {
        bail!("data.dir is not set");
    };
    load_kg_pair(dir).with_context(|| format!("loading pair from {}", dir.display()))
}

fn make_split(pair: &KgPair, cfg: &ExperimentConfig) -> Result<AnchorSplit> {
    if cfg.data.train_ratio >= 1.0 {
        return Ok(AnchorSplit::all_train(pair));
    }
    Ok(split_anchors(pair, cfg.data.train_ratio, cfg.seed)?)
}

fn embed(pair: &KgPair, params: &EncoderParams, model: &IpuleConfig) -> Result<EmbeddingTable> {
    let g = EdgeList::from_pair(pair, model.encoder.bidirectional);
    Ok(encode_graph(&g, params, model.encoder.depth, false)?)
}

/// What `detect` records and `align`/`eval` read back.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionReport {
    pub pi_p: f64,
    pub pi_p_u: f64,
    pub pi_p_tr: f64,
    pub em_iters: usize,
    pub converged: bool,
    pub alignable: bool,
    /// Dangling-positive scores over the unlabeled entities.
    pub detection: Prf,
    pub split: AnchorSplit,
    pub unlabeled: Vec<usize>,
    /// Per joint entity id.
    pub prob_matchable: Vec<f64>,
    pub matchable: Vec<bool>,
}

pub fn synth(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<Outcome> {
    let out = out_dir(cfg, out)?;
    let pair = gen_synthetic_pair(&cfg.synth)?;
    save_kg_pair(&pair, &out)?;
    write_manifest(&out, "synth", cfg, &[MANIFEST])?;
    println!(
        "wrote {} + {} entities, {} anchors to {}",
        pair.source.n_entities(),
        pair.target.n_entities(),
        pair.anchors.len(),
        out.display()
    );
    Ok(Outcome::Success)
}

pub fn detect(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<Outcome> {
    let out = out_dir(cfg, out)?;
    let pair = load_pair(cfg)?;
    let split = make_split(&pair, cfg)?;
    let det = run_ipule(&pair, &split, &cfg.model)?;
    let truth = pair.dangling_mask();
    let pick = |m: &[bool]| det.unlabeled.iter().map(|&e| m[e]).collect::<Vec<_>>();
    let report = DetectionReport {
        pi_p: det.priors.pi_p,
        pi_p_u: det.priors.pi_p_u,
        pi_p_tr: det.priors.pi_p_tr,
        em_iters: det.em_iters,
        converged: det.converged,
        alignable: det.alignable,
        detection: detection_prf(&pick(&det.predicted_dangling()), &pick(&truth))?,
        split,
        unlabeled: det.unlabeled.clone(),
        prob_matchable: det.prob_matchable.clone(),
        matchable: det.matchable.clone(),
    };
    write_json(&report, &out.join(DETECTION))?;
    write_history_csv(&det.history, &out.join(HISTORY))?;
    write_checkpoint(&det.params, &out.join(CHECKPOINT))?;
    write_manifest(&out, "detect", cfg, &[DETECTION, HISTORY, CHECKPOINT, MANIFEST])?;
    println!(
        "pi_p_u {:.4} after {} EM iterations (converged {}), alignable {}",
        report.pi_p_u, report.em_iters, report.converged, report.alignable
    );
    Ok(if !report.alignable {
        Outcome::NotAlignable
    } else if !report.converged {
        Outcome::NotConverged
    } else {
        Outcome::Success
    })
}

pub fn align_cmd(
    cfg: &ExperimentConfig,
    out: Option<PathBuf>,
    detection: Option<PathBuf>,
    force: bool,
) -> Result<Outcome> {
    let out = out_dir(cfg, out)?;
    let det_path = detection.unwrap_or_else(|| out.join(DETECTION));
    let report: DetectionReport = read_json(&det_path)?;
    if !report.alignable && !force {
        eprintln!("the detection report marks this pair as not alignable; pass --force to align anyway");
        return Ok(Outcome::NotAlignable);
    }
    let pair = load_pair(cfg)?;
    if report.matchable.len() != pair.n_total_entities() {
        bail!("{} does not cover the configured pair", det_path.display());
    }
    let ckpt = det_path.with_file_name(CHECKPOINT);
    let init = if ckpt.exists() { Some(read_checkpoint(&ckpt)?) } else { None };
    let (params, _, _) = train_alignment(&pair, &report.split, &cfg.model, init)?;
    let ckpt_out = out.join(ALIGN_CHECKPOINT);
    write_checkpoint(&params, &ckpt_out)?;
    // Score the stored parameters so that `eval` reproduces these numbers.
    let emb = embed(&pair, &read_checkpoint(&ckpt_out)?, &cfg.model)?;
    let metric = Metric::Csls { k: cfg.eval.csls_k };
    let result = align(&emb, &pair, &report.matchable, metric, cfg.eval.rank_depth)?;
    write_pairs_csv(&result.pairs, &out.join(PAIRS))?;
    let metrics = evaluate(&emb, &pair, &report.split.test, &report.unlabeled, &report.matchable, metric)?;
    write_json(&metrics, &out.join(METRICS))?;
    write_manifest(&out, "align", cfg, &[PAIRS, METRICS, ALIGN_CHECKPOINT, MANIFEST])?;
    println!(
        "{} pairs; relaxed Hits@1 {:.4}, consolidated F1 {:.4}",
        result.pairs.len(),
        metrics.alignment_relaxed.hits1,
        metrics.alignment_consolidated.f1
    );
    Ok(Outcome::Success)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Setting {
    Relaxed,
    Consolidated,
}

/// Recomputes the metric report of an `align` run against a dataset.
pub fn eval(run: &Path, truth: &Path, setting: Setting, out: Option<PathBuf>) -> Result<Outcome> {
    let manifest: Manifest = read_json(&run.join(MANIFEST))?;
    let report: DetectionReport = read_json(&run.join(DETECTION))?;
    let params = read_checkpoint(&run.join(ALIGN_CHECKPOINT))?;
    let pair = load_kg_pair(truth).with_context(|| format!("loading pair from {}", truth.display()))?;
    if report.matchable.len() != pair.n_total_entities() {
        bail!("run {} does not match the pair at {}", run.display(), truth.display());
    }
    let cfg = &manifest.config;
    let emb = embed(&pair, &params, &cfg.model)?;
    let metrics: MetricReport = evaluate(
        &emb,
        &pair,
        &report.split.test,
        &report.unlabeled,
        &report.matchable,
        Metric::Csls { k: cfg.eval.csls_k },
    )?;
    let view = match setting {
        Setting::Relaxed => serde_json::json!({
            "setting": "relaxed",
            "alignment_relaxed": metrics.alignment_relaxed,
        }),
        Setting::Consolidated => serde_json::json!({
            "setting": "consolidated",
            "detection": metrics.detection,
            "alignment_consolidated": metrics.alignment_consolidated,
        }),
    };
    println!("{}", serde_json::to_string_pretty(&view)?);
    if let Some(dir) = out {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&metrics, &dir.join(METRICS))?;
    }
    Ok(Outcome::Success)
}

pub fn verify(suite: Suite, out: Option<PathBuf>) -> Result<Outcome> {
    let checks = run_suite(suite)?;
    for c in &checks {
        println!("{c}");
    }
    if let Some(dir) = out {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&checks, &dir.join(VERIFY))?;
    }
    Ok(if checks.iter().all(|c| c.pass) {
        Outcome::Success
    } else {
        Outcome::Failed
    })
}
