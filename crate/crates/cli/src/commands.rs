use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use log::{info, warn};
use serde::Serialize;

use tlg_core::analysis::{analyze as run_analysis, reports_to_text, MarkerLexicon};
use tlg_core::embedding::{EmbedRequest, EmbeddingClient, EndpointConfig, MockEmbedder};
use tlg_core::evaluator::{cross_validate, transfer_eval};
use tlg_core::interchange::{
    build_manifest, load_facts, save_embeddings, write_atomic, Dataset, DatasetManifest,
    EmbeddingBlock, EMBEDDING_EXT,
};
use tlg_core::pooling::{forward, load_params, rank_by_logit, save_params};
use tlg_core::synthetic::{generate, SyntheticConfig};
use tlg_core::trainer::{history_to_csv, train as fit};
use tlg_core::Error;

use crate::{AnalyzeArgs, CrossvalArgs, EmbedArgs, RankArgs, SynthArgs, TrainArgs, TransferArgs};

const MANIFEST_NAME: &str = "manifest.json";

/// Bad flags or inputs rejected before any work starts.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 1 for usage and input validation failures, 2 for everything that went
/// wrong while doing the work (I/O, network, numerics).
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io { .. }
                | Error::Timeout { .. }
                | Error::Transport { .. }
                | Error::Http { .. }
                | Error::MalformedResponse(_)
                | Error::InvalidPayload(_)
                | Error::NonFinite(_)
                | Error::NonFiniteGradient(_)
                | Error::ZeroWeightSum
                | Error::NegativeWeight => 2,
                _ => 1,
            };
        }
    }
    2
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn load_dataset(path: &Path, what: &str) -> Result<Dataset<f64>> {
    require_file(path, what)?;
    let m = DatasetManifest::load(path).with_context(|| format!("loading {what} {}", path.display()))?;
    m.load_dataset()
        .with_context(|| format!("loading embeddings for {}", path.display()))
}

fn embedding_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.{EMBEDDING_EXT}"))
}

/// Refuses to clobber earlier output unless `force`; with `force` the old
/// manifest is removed first so a failed rerun never leaves a stale one.
fn guard_outputs(dir: &Path, ids: &[&str], force: bool) -> Result<()> {
    let manifest = dir.join(MANIFEST_NAME);
    let existing = ids.iter().filter(|id| embedding_path(dir, id).exists()).count()
        + manifest.exists() as usize;
    if existing > 0 && !force {
        return Err(usage(format!(
            "{existing} output file(s) already exist in {}; pass --force to overwrite",
            dir.display()
        )));
    }
    if manifest.exists() {
        fs::remove_file(&manifest).with_context(|| format!("removing {}", manifest.display()))?;
    }
    Ok(())
}

fn write_manifest(facts: &Path, dir: &Path) -> Result<PathBuf> {
    let built = build_manifest(facts, dir).context("building manifest")?;
    for w in &built.warnings {
        warn!("{w}");
    }
    let path = dir.join(MANIFEST_NAME);
    built.manifest.save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    require_file(&a.facts, "facts file")?;
    if !a.mock && a.endpoint.is_none() {
        return Err(usage("either --mock or --endpoint (or TLG_ENDPOINT) is required"));
    }
    if a.mock && (a.dim == 0 || a.max_tokens == 0) {
        return Err(usage("--dim and --max-tokens must be positive"));
    }
    if !(a.timeout_secs > 0.0 && a.timeout_secs.is_finite()) {
        return Err(usage("--timeout-secs must be positive"));
    }
    let sets = load_facts(&a.facts).with_context(|| format!("reading {}", a.facts.display()))?;
    ensure_dir(&a.out)?;
    let ids: Vec<&str> = sets.iter().map(|s| s.image_id.as_str()).collect();
    guard_outputs(&a.out, &ids, a.force)?;

    let requests: Vec<EmbedRequest> = sets
        .iter()
        .map(|s| EmbedRequest::new(s.image_id.clone(), s.facts.clone()))
        .collect();
    let blocks: Vec<tlg_core::Result<EmbeddingBlock<f64>>> = if a.mock {
        let mut m = MockEmbedder::new(a.dim, a.max_tokens);
        if let Some(tok) = &a.marker_token {
            m = m.with_marker(tok.clone(), a.marker_offset);
        }
        requests.iter().map(|r| Ok(m.embed(r))).collect()
    } else {
        let mut cfg = EndpointConfig::new(a.endpoint.clone().unwrap());
        cfg.timeout = Duration::from_secs_f64(a.timeout_secs);
        cfg.max_in_flight = a.max_in_flight;
        cfg.retry.max_retries = a.retries;
        let client = EmbeddingClient::new(cfg).map_err(|e| usage(e.to_string()))?;
        client.fetch_all(&requests)
    };

    let mut failures = Vec::new();
    for (req, block) in requests.iter().zip(blocks) {
        let path = embedding_path(&a.out, &req.image_id);
        match block.and_then(|b| save_embeddings(&b, &path)) {
            Ok(()) => info!("wrote {}", path.display()),
            Err(e) => failures.push((req.image_id.clone(), e)),
        }
    }
    if !failures.is_empty() {
        for (id, e) in &failures {
            eprintln!("failed: {id}: {e}");
        }
        let (_, first) = failures.swap_remove(0);
        return Err(anyhow::Error::new(first).context(format!(
            "{} of {} fact sets could not be embedded; no manifest written",
            failures.len() + 1,
            requests.len()
        )));
    }
    let m = write_manifest(&a.facts, &a.out)?;
    println!("embedded {} fact sets; manifest {}", requests.len(), m.display());
    Ok(())
}

pub fn crossval(a: CrossvalArgs) -> Result<()> {
    let cfg = a.train.config();
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = load_dataset(&a.manifest, "manifest")?;
    let report = cross_validate(&ds, a.k as usize, &cfg, a.train.seed).context("cross-validation")?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("crossval.json"), &report)?;
    let text = report.to_text();
    write_text(&a.out.join("crossval.txt"), &text)?;
    write_text(&a.out.join("crossval.csv"), &report.to_csv())?;
    print!("{text}");
    Ok(())
}

pub fn transfer(a: TransferArgs) -> Result<()> {
    let cfg = a.train.config();
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    require_file(&a.test_manifest, "test manifest")?;
    let train_set = load_dataset(&a.train_manifest, "train manifest")?;
    let test_set = load_dataset(&a.test_manifest, "test manifest")?;
    let (report, params) = transfer_eval(&train_set, &test_set, &cfg).context("transfer evaluation")?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("transfer.json"), &report)?;
    let text = report.to_text();
    write_text(&a.out.join("transfer.txt"), &text)?;
    save_params(&params, cfg.epsilon, a.out.join("params.json")).context("writing params")?;
    write_text(&a.out.join("history.csv"), &history_to_csv(&report.history))?;
    print!("{text}");
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.train.config();
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = load_dataset(&a.manifest, "manifest")?;
    let trained = fit(&ds, &cfg).context("training")?;
    ensure_dir(&a.out)?;
    save_params(&trained.params, cfg.epsilon, a.out.join("params.json")).context("writing params")?;
    write_text(&a.out.join("history.csv"), &history_to_csv(&trained.history))?;
    if let Some(last) = trained.history.last() {
        println!(
            "epoch {}: mean loss {:.6}, train accuracy {:.4}",
            last.epoch, last.mean_loss, last.train_accuracy
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RankRow<'a> {
    rank: usize,
    fact_index: usize,
    attention_logit: f64,
    fact: &'a str,
}

#[derive(Serialize)]
struct RankOutput<'a> {
    image_id: &'a str,
    label: tlg_core::Label,
    prob: f64,
    facts: Vec<RankRow<'a>>,
}

pub fn rank_facts(a: RankArgs) -> Result<()> {
    require_file(&a.params, "params file")?;
    let (params, eps) = load_params::<f64>(&a.params).with_context(|| format!("reading {}", a.params.display()))?;
    let ds = load_dataset(&a.manifest, "manifest")?;
    let sample = ds
        .find(&a.image_id)
        .ok_or_else(|| Error::UnknownImageId(a.image_id.clone()))?;
    let trace = forward(&sample.block, &params, eps).context("forward pass")?;
    let ranked = rank_by_logit(&trace.attention_logits);
    let rows: Vec<RankRow> = ranked
        .iter()
        .enumerate()
        .map(|(i, r)| RankRow {
            rank: i + 1,
            fact_index: r.fact_index,
            attention_logit: r.attention_logit,
            fact: &sample.facts.facts[r.fact_index],
        })
        .collect();

    println!("{} (label {}, p(weird) = {:.4})", a.image_id, sample.facts.label, trace.prob);
    println!("{:>4} {:>6} {:>10}  fact", "rank", "index", "logit");
    for r in &rows {
        println!("{:>4} {:>6} {:>10.4}  {}", r.rank, r.fact_index, r.attention_logit, r.fact);
    }
    let out = RankOutput {
        image_id: &a.image_id,
        label: sample.facts.label,
        prob: trace.prob,
        facts: rows,
    };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_json(&a.out, &out)
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    if !(a.epsilon > 0.0 && a.epsilon.is_finite()) {
        return Err(usage("--epsilon must be positive"));
    }
    let lexicon = match &a.lexicon {
        Some(p) => {
            require_file(p, "lexicon")?;
            MarkerLexicon::load(p).with_context(|| format!("reading lexicon {}", p.display()))?
        }
        None => MarkerLexicon::default(),
    };
    let ds = load_dataset(&a.manifest, "manifest")?;
    let reports = run_analysis(&ds, &lexicon, a.split_by_label, a.epsilon).context("analysis")?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("analysis.json"), &reports)?;
    let text = reports_to_text(&reports);
    write_text(&a.out.join("analysis.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_per_class: a.n_per_class,
        n_facts: a.n_facts,
        dim: a.dim,
        max_tokens: a.max_tokens,
        marker_offset: a.marker_offset,
        domain_shift: a.domain_shift,
        paired: a.paired,
        dataset_tag: a.tag.clone(),
        seed: a.seed,
        ..Default::default()
    };
    if cfg.n_per_class == 0 || cfg.n_facts == 0 || cfg.dim == 0 || cfg.max_tokens == 0 {
        return Err(usage("--n-per-class, --n-facts, --dim and --max-tokens must be positive"));
    }
    let set = generate(&cfg).context("generating synthetic data")?;
    ensure_dir(&a.out)?;
    let ids: Vec<&str> = set.dataset.samples().iter().map(|s| s.facts.image_id.as_str()).collect();
    let facts_path = a.out.join("facts.jsonl");
    if facts_path.exists() && !a.force {
        return Err(usage(format!("{} exists; pass --force to overwrite", facts_path.display())));
    }
    guard_outputs(&a.out, &ids, a.force)?;

    let mut lines = String::new();
    for s in set.dataset.samples() {
        lines.push_str(&serde_json::to_string(&s.facts)?);
        lines.push('\n');
        save_embeddings(&s.block, embedding_path(&a.out, &s.facts.image_id))
            .with_context(|| format!("writing embeddings for {}", s.facts.image_id))?;
    }
    write_text(&facts_path, &lines)?;
    let m = write_manifest(&facts_path, &a.out)?;
    println!("wrote {} synthetic fact sets; manifest {}", set.dataset.len(), m.display());
    Ok(())
}
