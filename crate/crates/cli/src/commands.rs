use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmgru_core::checkpoint::{encode_checkpoint, load_checkpoint};
use mmgru_core::data::{read_caption_file, CaptionDataset, CaptionEntry, FeatureMap};
use mmgru_core::decoder::{generate, DecodeConfig, DEFAULT_MAX_LEN};
use mmgru_core::gru::{param_count, Unit};
use mmgru_core::metrics::{bleu, cider, corpus_meteor};
use mmgru_core::model::{train as fit, ModelParams, TrainConfig};
use mmgru_core::retrieval::{median_rank, recall_at_k, Direction, MedianMode, ScoreMatrix, ScoreMode};
use mmgru_core::vocab::{normalize_text, Vocabulary, DEFAULT_MIN_COUNT};
use mmgru_core::{load_features, Error, StackKind};
use rayon::prelude::*;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{ConfigFile, List};
use crate::{CaptionArgs, CliError, EvalArgs, ParamsArgs, RetrieveArgs, TrainArgs};

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_record(path: &Path) -> Result<Value, CliError> {
    Ok(json!({
        "path": path.display().to_string(),
        "sha256": sha256_hex(&fs::read(path)?),
    }))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn print_json(value: &Value) {
    println!("{value}");
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Resolves the (layers, stack) pair; a contradiction is a usage error.
fn resolve_stack(layers: Option<usize>, stack: Option<StackKind>) -> Result<StackKind, CliError> {
    match (layers, stack) {
        (None, None) | (Some(1), None) => Ok(StackKind::Single),
        (Some(2), None) => Ok(StackKind::Feedback),
        (None, Some(s)) => Ok(s),
        (Some(n), Some(s)) if s.layer_count() == n => Ok(s),
        (Some(n), Some(s)) if n == 1 || n == 2 => Err(CliError::Usage(format!(
            "--stack {s} needs {} layer(s), but --layers {n} was given",
            s.layer_count()
        ))),
        (Some(n), _) => Err(CliError::Usage(format!("--layers must be 1 or 2, got {n}"))),
    }
}

const TRAIN_KEYS: &[&str] = &[
    "features", "captions", "out", "hidden", "layers", "stack", "epochs", "lr", "lambda", "seed", "min-count",
    "max-grad-norm", "init-scale",
];

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(a.config.as_deref(), TRAIN_KEYS)?;
    let features_path: PathBuf = cfg.required(a.features, "features")?;
    let captions_path: PathBuf = cfg.required(a.captions, "captions")?;
    let out: PathBuf = cfg.required(a.out, "out")?;
    let defaults = TrainConfig::default();
    let stack = resolve_stack(cfg.get(a.layers, "layers")?, cfg.get(a.stack, "stack")?)?;
    let min_count = cfg.or(a.min_count, "min-count", DEFAULT_MIN_COUNT)?;
    let config = TrainConfig {
        learning_rate: cfg.or(a.lr, "lr", defaults.learning_rate)?,
        l2_lambda: cfg.or(a.lambda, "lambda", defaults.l2_lambda)?,
        epochs: cfg.or(a.epochs, "epochs", defaults.epochs)?,
        seed: cfg.or(a.seed, "seed", defaults.seed)?,
        max_grad_norm: cfg.get(a.max_grad_norm, "max-grad-norm")?,
        hidden_size: cfg.or(a.hidden, "hidden", defaults.hidden_size)?,
        stack,
        init_scale: cfg.or(a.init_scale, "init-scale", defaults.init_scale)?,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if min_count == 0 {
        return Err(CliError::Usage("--min-count must be at least 1".into()));
    }

    let started = Instant::now();
    let features = load_features(&features_path)?;
    let entries = read_caption_file(&captions_path)?;
    let corpus: Vec<Vec<String>> = entries
        .iter()
        .flat_map(|e| e.captions.iter().map(|c| normalize_text(c)))
        .collect();
    let vocab = Vocabulary::build(&corpus, min_count)?;
    let dataset = CaptionDataset::from_entries(&entries, &vocab, &features)?;

    let stdout = io::stdout();
    let mut log = stdout.lock();
    let (params, losses) = fit(&dataset, &config, |epoch, loss| {
        let _ = writeln!(log, "{}", json!({ "epoch": epoch, "mean_loss": loss }));
        let _ = log.flush();
    })?;
    let bytes = encode_checkpoint(&params, &vocab)?;
    fs::write(&out, &bytes)?;

    let manifest = json!({
        "command": "train",
        "config": {
            "features": features_path.display().to_string(),
            "captions": captions_path.display().to_string(),
            "out": out.display().to_string(),
            "hidden": config.hidden_size,
            "layers": stack.layer_count(),
            "stack": stack.name(),
            "epochs": config.epochs,
            "lr": config.learning_rate,
            "lambda": config.l2_lambda,
            "seed": config.seed,
            "min-count": min_count,
            "max-grad-norm": config.max_grad_norm,
            "init-scale": config.init_scale,
        },
        "inputs": {
            "features": file_record(&features_path)?,
            "captions": file_record(&captions_path)?,
        },
        "seed": config.seed,
        "vocab_size": vocab.len(),
        "pairs": dataset.pair_count(),
        "parameters": params.param_count(),
        "checkpoint_sha256": sha256_hex(&bytes),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "final_metrics": { "mean_loss": losses.last() },
        "epoch_losses": losses,
    });
    write_json(&manifest_path(&out), &manifest)
}

fn decode_config(cfg: &ConfigFile, max_len: Option<usize>, allow_unk: bool) -> Result<DecodeConfig, CliError> {
    let max_len = cfg.or(max_len, "max-len", DEFAULT_MAX_LEN)?;
    if max_len == 0 {
        return Err(CliError::Usage("--max-len must be at least 1".into()));
    }
    let allow_unk = cfg.or(allow_unk.then_some(true), "allow-unk", false)?;
    Ok(DecodeConfig {
        max_len,
        forbid_unk: !allow_unk,
    })
}

fn check_dim(params: &ModelParams, features: &FeatureMap) -> Result<(), CliError> {
    let want = params.dims().feature_dim;
    if !features.is_empty() && features.dim != want {
        return Err(Error::Format(format!(
            "feature file has dimension {} but the checkpoint expects {want}",
            features.dim
        ))
        .into());
    }
    Ok(())
}

/// Captions for `ids` (in order), generated in parallel.
fn caption_all(
    params: &ModelParams,
    vocab: &Vocabulary,
    features: &FeatureMap,
    ids: &[&str],
    dc: DecodeConfig,
) -> Result<Vec<Vec<String>>, CliError> {
    ids.par_iter()
        .map(|id| {
            let f = features
                .get(id)
                .ok_or_else(|| Error::Data(format!("no image feature for id {id:?}")))?;
            generate(params, vocab, f, dc)
        })
        .collect::<mmgru_core::Result<Vec<_>>>()
        .map_err(CliError::from)
}

const CAPTION_KEYS: &[&str] = &["ckpt", "features", "max-len", "allow-unk"];

pub fn caption(a: CaptionArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(a.config.as_deref(), CAPTION_KEYS)?;
    let ckpt: PathBuf = cfg.required(a.ckpt, "ckpt")?;
    let features_path: PathBuf = cfg.required(a.features, "features")?;
    let dc = decode_config(&cfg, a.max_len, a.allow_unk)?;

    let (params, vocab) = load_checkpoint(&ckpt)?;
    let features = load_features(&features_path)?;
    check_dim(&params, &features)?;
    let ids: Vec<&str> = features.features.keys().map(String::as_str).collect();
    let captions = caption_all(&params, &vocab, &features, &ids, dc)?;

    let mut out = BufWriter::new(io::stdout().lock());
    for (id, c) in ids.iter().zip(captions) {
        writeln!(out, "{}", json!({ "id": id, "caption": c.join(" ") }))?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint, features and caption file, checking their agreement.
fn load_eval_inputs(
    ckpt: &Path,
    features_path: &Path,
    captions_path: &Path,
) -> Result<(ModelParams, Vocabulary, FeatureMap, Vec<CaptionEntry>), CliError> {
    let (params, vocab) = load_checkpoint(ckpt)?;
    let features = load_features(features_path)?;
    check_dim(&params, &features)?;
    let entries = read_caption_file(captions_path)?;
    if entries.is_empty() {
        return Err(Error::Data(format!("{} has no caption records", captions_path.display())).into());
    }
    Ok((params, vocab, features, entries))
}

const EVAL_KEYS: &[&str] = &["ckpt", "features", "captions", "metrics", "max-len", "allow-unk", "manifest"];

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(a.config.as_deref(), EVAL_KEYS)?;
    let ckpt: PathBuf = cfg.required(a.ckpt, "ckpt")?;
    let features_path: PathBuf = cfg.required(a.features, "features")?;
    let captions_path: PathBuf = cfg.required(a.captions, "captions")?;
    let dc = decode_config(&cfg, a.max_len, a.allow_unk)?;
    let List(metrics) = cfg.or(a.metrics, "metrics", List(vec!["bleu".into(), "meteor".into(), "cider".into()]))?;
    if let Some(m) = metrics.iter().find(|m| !["bleu", "meteor", "cider"].contains(&m.as_str())) {
        return Err(CliError::Usage(format!("unknown metric {m:?}; expected bleu, meteor or cider")));
    }
    let manifest: Option<PathBuf> = cfg.get(a.manifest, "manifest")?;
    let started = Instant::now();

    let (params, vocab, features, entries) = load_eval_inputs(&ckpt, &features_path, &captions_path)?;
    let ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
    let hyps = caption_all(&params, &vocab, &features, &ids, dc)?;
    let refs: Vec<Vec<Vec<String>>> = entries
        .iter()
        .map(|e| e.captions.iter().map(|c| normalize_text(c)).collect())
        .collect();

    let mut report = Map::new();
    let wants = |m: &str| metrics.iter().any(|x| x == m);
    if wants("bleu") {
        for n in 1..=4 {
            report.insert(format!("B-{n}"), json!(bleu(&hyps, &refs, n)?.score));
        }
    }
    if wants("meteor") {
        let (m, per) = corpus_meteor(&hyps, &refs)?;
        report.insert("METEOR".into(), json!(m));
        report.insert("METEOR-exhaustive".into(), json!(per.iter().all(|s| s.exhaustive)));
    }
    if wants("cider") {
        // Document frequencies need at least two images.
        let c = if hyps.len() >= 2 { Some(cider(&hyps, &refs)?.score) } else { None };
        report.insert("CIDEr".into(), json!(c));
    }
    let report = Value::Object(report);
    print_json(&report);

    if let Some(path) = manifest {
        let m = json!({
            "command": "eval",
            "config": {
                "ckpt": ckpt.display().to_string(),
                "features": features_path.display().to_string(),
                "captions": captions_path.display().to_string(),
                "metrics": metrics,
                "max-len": dc.max_len,
                "allow-unk": !dc.forbid_unk,
            },
            "inputs": {
                "ckpt": file_record(&ckpt)?,
                "features": file_record(&features_path)?,
                "captions": file_record(&captions_path)?,
            },
            "wall_clock_seconds": started.elapsed().as_secs_f64(),
            "final_metrics": report,
        });
        write_json(&path, &m)?;
    }
    Ok(())
}

const RETRIEVE_KEYS: &[&str] = &[
    "ckpt", "features", "captions", "k", "direction", "medr-mode", "score", "table", "manifest",
];

fn direction_block(matrix: &ScoreMatrix, dir: Direction, ks: &[usize], mode: MedianMode) -> Result<Value, CliError> {
    let results = matrix.rank(dir);
    let mut block = Map::new();
    for &k in ks {
        block.insert(format!("R@{k}"), json!(recall_at_k(&results, k)?));
    }
    block.insert("Med-r".into(), json!(median_rank(&results, mode)?));
    block.insert("queries".into(), json!(results.len()));
    Ok(Value::Object(block))
}

pub fn retrieve(a: RetrieveArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(a.config.as_deref(), RETRIEVE_KEYS)?;
    let ckpt: PathBuf = cfg.required(a.ckpt, "ckpt")?;
    let features_path: PathBuf = cfg.required(a.features, "features")?;
    let captions_path: PathBuf = cfg.required(a.captions, "captions")?;
    let List(ks) = cfg.or(a.k, "k", List(vec![1, 5, 10]))?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Usage("--k values must be positive".into()));
    }
    let direction: String = cfg.or(a.direction, "direction", "both".into())?;
    let (i2s, s2i) = match direction.as_str() {
        "both" => (true, true),
        "i2s" => (true, false),
        "s2i" => (false, true),
        other => return Err(CliError::Usage(format!("unknown direction {other:?}; expected both, i2s or s2i"))),
    };
    let medr_mode = cfg.or(a.medr_mode, "medr-mode", MedianMode::default())?;
    let score_mode = cfg.or(a.score, "score", ScoreMode::default())?;
    let table = cfg.or(a.table.then_some(true), "table", false)?;
    let manifest: Option<PathBuf> = cfg.get(a.manifest, "manifest")?;
    let started = Instant::now();

    let (params, vocab, features, entries) = load_eval_inputs(&ckpt, &features_path, &captions_path)?;
    let dataset = CaptionDataset::from_entries(&entries, &vocab, &features)?;
    let matrix = ScoreMatrix::compute(&params, &dataset, score_mode)?;

    let mut report = Map::new();
    if i2s {
        report.insert("sentence_retrieval".into(), direction_block(&matrix, Direction::ImageToSentence, &ks, medr_mode)?);
    }
    if s2i {
        report.insert("image_retrieval".into(), direction_block(&matrix, Direction::SentenceToImage, &ks, medr_mode)?);
    }
    report.insert("medr_mode".into(), json!(medr_mode.name()));
    report.insert("score_mode".into(), json!(score_mode));
    let report = Value::Object(report);

    if table {
        print!("{}", retrieval_table(&report, &ks));
    } else {
        print_json(&report);
    }
    if let Some(path) = manifest {
        let m = json!({
            "command": "retrieve",
            "config": {
                "ckpt": ckpt.display().to_string(),
                "features": features_path.display().to_string(),
                "captions": captions_path.display().to_string(),
                "k": ks,
                "direction": direction,
                "medr-mode": medr_mode.name(),
                "score": score_mode,
            },
            "inputs": {
                "ckpt": file_record(&ckpt)?,
                "features": file_record(&features_path)?,
                "captions": file_record(&captions_path)?,
            },
            "wall_clock_seconds": started.elapsed().as_secs_f64(),
            "final_metrics": report,
        });
        write_json(&path, &m)?;
    }
    Ok(())
}

fn retrieval_table(report: &Value, ks: &[usize]) -> String {
    let mut cols: Vec<String> = ks.iter().map(|k| format!("R@{k}")).collect();
    cols.push("Med-r".into());
    let mut header = String::from("direction         ");
    let mut out = String::new();
    for c in &cols {
        header.push_str(&format!("{c:>8}"));
    }
    out.push_str(&header);
    out.push('\n');
    for (key, label) in [("sentence_retrieval", "sentence (i2s)"), ("image_retrieval", "image (s2i)")] {
        if let Some(block) = report.get(key) {
            let mut line = format!("{label:<18}");
            for c in &cols {
                let v = block[c.as_str()].as_f64().unwrap_or(f64::NAN);
                if c == "Med-r" {
                    line.push_str(&format!("{v:>8.2}"));
                } else {
                    line.push_str(&format!("{:>8.1}", 100.0 * v));
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
    }
    out.push_str(&format!("(R@K in percent; Med-r mode: {})\n", report["medr_mode"].as_str().unwrap_or("?")));
    out
}

const PARAMS_KEYS: &[&str] = &["hidden", "input-dim", "table"];

pub fn params(a: ParamsArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(a.config.as_deref(), PARAMS_KEYS)?;
    let List(hidden) = cfg.or(a.hidden, "hidden", List(vec![256, 512, 1024]))?;
    let input_dim: Option<usize> = cfg.get(a.input_dim, "input-dim")?;
    let table = cfg.or(a.table.then_some(true), "table", false)?;
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(CliError::Usage("--hidden values must be positive".into()));
    }

    let rows: Vec<Value> = hidden
        .iter()
        .map(|&h| {
            let d = input_dim.unwrap_or(h);
            let gru = param_count(Unit::Gru, d, h, StackKind::Single);
            let lstm = param_count(Unit::Lstm, d, h, StackKind::Single);
            let conventional = param_count(Unit::Gru, d, h, StackKind::Conventional);
            let feedback = param_count(Unit::Gru, d, h, StackKind::Feedback);
            json!({
                "hidden": h,
                "input_dim": d,
                "gru": gru,
                "lstm": lstm,
                "lstm_over_gru": lstm as f64 / gru as f64,
                "conventional_2layer": conventional,
                "feedback_2layer": feedback,
                "feedback_over_conventional": feedback as f64 / conventional as f64,
            })
        })
        .collect();

    if table {
        println!(
            "{:>8} {:>12} {:>12} {:>16} {:>16} {:>8}",
            "hidden", "GRU", "LSTM", "2-layer conv.", "2-layer feedb.", "fb/conv"
        );
        for r in &rows {
            println!(
                "{:>8} {:>12} {:>12} {:>16} {:>16} {:>8.3}",
                r["hidden"], r["gru"], r["lstm"], r["conventional_2layer"], r["feedback_2layer"],
                r["feedback_over_conventional"].as_f64().unwrap_or(f64::NAN)
            );
        }
    } else {
        print_json(&json!({ "rows": rows }));
    }
    Ok(())
}
