use std::path::{Path, PathBuf};

use mpath_core::checkpoint::{load_checkpoint, save_checkpoint};
use mpath_core::metrics::{EmbBackend, KeywordLexicon, PairInput, Scorer};
use mpath_core::model::{generate_ids, init_backbone_pretrain, Decoding, ModelConfig, ModelState};
use mpath_core::reports::{read_corpus, synthesize_corpus, write_corpus, PairedSample};
use mpath_core::rng::{shuffle, substream};
use mpath_core::tokenizer::Vocab;
use mpath_core::training::{cross_validate, evaluate, train_fold, write_history, EpochRecord, FoldOutcome};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{log, CliError, CliResult};

fn out_dir(c: &RunConfig) -> CliResult<PathBuf> {
    let dir = c
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("--out-dir is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_jsonl<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> CliResult<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r).map_err(|e| CliError::Data(e.to_string()))?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

fn samples(c: &RunConfig) -> CliResult<Vec<PairedSample>> {
    let s = match &c.paths.corpus {
        Some(p) => read_corpus(p, &c.corpus.taxonomy)?,
        None => synthesize_corpus(&c.corpus)?,
    };
    if s.is_empty() {
        return Err(mpath_core::Error::EmptyCorpus.into());
    }
    let d_v = s[0].features.len();
    if let Some(bad) = s.iter().find(|x| x.features.len() != d_v) {
        return Err(CliError::Data(format!(
            "sample `{}` has {} features, expected {d_v}",
            bad.id,
            bad.features.len()
        )));
    }
    Ok(s)
}

/// Model config with the data-dependent sizes filled in.
fn model_config(c: &RunConfig, samples: &[PairedSample], vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_v: samples[0].features.len(),
        vocab_size,
        n_sample_types: c.corpus.taxonomy.sample_types().len(),
        n_findings: c.corpus.taxonomy.findings().len(),
        ..c.model.clone()
    }
}

fn texts(samples: &[PairedSample]) -> Vec<String> {
    samples.iter().map(|s| s.report_text.clone()).collect()
}

fn build_vocab(c: &RunConfig, samples: &[PairedSample]) -> CliResult<Vocab> {
    let mut t = texts(samples);
    t.push(c.model.prompt_text.clone());
    Ok(Vocab::build(&t, 1)?)
}

/// Freshly initialized model with a pretrained, frozen backbone.
fn pretrained(c: &RunConfig, samples: &[PairedSample]) -> CliResult<(ModelState, Vec<f64>)> {
    let vocab = build_vocab(c, samples)?;
    let cfg = model_config(c, samples, vocab.len());
    let mut state = ModelState::init(cfg, vocab, c.seed)?;
    let report = init_backbone_pretrain(&mut state, &texts(samples), &c.pretrain, |step, loss| {
        if step % 100 == 0 {
            log::info("pretrain_step", json!({ "step": step, "loss": loss }));
        }
    })?;
    Ok((state, report.losses))
}

/// Starting point for `train` and `cv`: the backbone of `paths.checkpoint`
/// when given, otherwise an inline pretraining run.
fn base_state(c: &RunConfig, samples: &[PairedSample]) -> CliResult<ModelState> {
    match &c.paths.checkpoint {
        Some(p) => {
            let src = load_checkpoint(p)?;
            let cfg = model_config(c, samples, src.vocab.len());
            Ok(ModelState::with_backbone_from(cfg, &src, c.seed)?)
        }
        None => Ok(pretrained(c, samples)?.0),
    }
}

fn scorer(c: &RunConfig, model: Option<&ModelState>) -> CliResult<Scorer> {
    let lexicon = match &c.paths.lexicon {
        Some(p) => KeywordLexicon::load(p)?,
        None => KeywordLexicon::default(),
    };
    let table = model.map(|m| {
        let embed = m.tensor("backbone.embed").expect("every model has an embedding table");
        (m.vocab.clone(), embed.clone())
    });
    let backend = EmbBackend::from_id(&c.eval.emb_backend, table)?;
    Ok(Scorer { lexicon, backend })
}

pub fn gen_data(c: &RunConfig) -> CliResult<()> {
    let dir = out_dir(c)?;
    let s = synthesize_corpus(&c.corpus)?;
    write_corpus(&dir.join("corpus.jsonl"), &s, &c.corpus.taxonomy)?;
    write_file(&dir.join("taxonomy.json"), c.corpus.taxonomy.to_json()?.as_bytes())?;
    log::info("gen_data", json!({ "n_samples": s.len(), "out_dir": dir }));
    Ok(())
}

pub fn pretrain(c: &RunConfig) -> CliResult<()> {
    let dir = out_dir(c)?;
    let s = samples(c)?;
    let (state, losses) = pretrained(c, &s)?;
    save_checkpoint(&dir.join("backbone.ckpt"), &state)?;
    write_jsonl(
        &dir.join("pretrain_losses.jsonl"),
        losses.iter().enumerate().map(|(i, l)| json!({ "step": i + 1, "loss": l })),
    )?;
    log::info("pretrain_done", json!({ "steps": losses.len(), "final_loss": losses.last() }));
    Ok(())
}

/// Seeded held-out split: `(train, val)` index lists, each sorted.
fn holdout(n: usize, fraction: f64, seed: u64) -> CliResult<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Usage(format!("split.val_fraction must be in (0, 1), got {fraction}")));
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(CliError::Data("need at least 2 samples for a held-out split".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut substream(seed, "holdout"), &mut order);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

fn log_epoch(fold: Option<usize>, r: &EpochRecord) {
    let mut v = serde_json::to_value(r).unwrap_or(Value::Null);
    if let (Some(f), Value::Object(m)) = (fold, &mut v) {
        m.insert("fold".into(), f.into());
    }
    log::info("epoch", v);
}

fn best_record(o: &FoldOutcome) -> &EpochRecord {
    &o.history[o.best_epoch - 1]
}

pub fn train(c: &RunConfig) -> CliResult<()> {
    let dir = out_dir(c)?;
    let s = samples(c)?;
    let (train_ix, val_ix) = holdout(s.len(), c.split.val_fraction, c.seed)?;
    let base = base_state(c, &s)?;
    let sc = scorer(c, Some(&base))?;
    let train: Vec<&PairedSample> = train_ix.iter().map(|&i| &s[i]).collect();
    let val: Vec<&PairedSample> = val_ix.iter().map(|&i| &s[i]).collect();
    let out = train_fold(&train, &val, base, &c.train, &sc, |r| log_epoch(None, r))?;
    save_checkpoint(&dir.join("model.ckpt"), &out.state)?;
    write_history(&dir.join("history.jsonl"), &out.history)?;
    let eval = evaluate(&out.state, &val, &sc, Decoding::from_width(out.state.config.beam_width))?;
    let report = json!({
        "n_train": train.len(),
        "n_val": val.len(),
        "best_epoch": out.best_epoch,
        "best_score": out.best_score,
        "epochs_run": out.epochs_run,
        "truncated_targets": out.truncated,
        "val": eval.mean,
        "val_organ_accuracy": eval.organ_accuracy,
        "val_exact_match": eval.exact_match,
    });
    write_json(&dir.join("train_report.json"), &report)?;
    log::info("train_done", json!({ "best_epoch": out.best_epoch, "best_score": out.best_score }));
    Ok(())
}

/// Mean and sample standard deviation.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn cv(c: &RunConfig) -> CliResult<()> {
    let dir = out_dir(c)?;
    let s = samples(c)?;
    let base = base_state(c, &s)?;
    let sc = scorer(c, Some(&base))?;
    let folds = cross_validate(
        &s,
        &base,
        &c.train,
        &sc,
        |fold, o| {
            save_checkpoint(&dir.join(format!("fold_{fold}.ckpt")), &o.state)?;
            write_history(&dir.join(format!("fold_{fold}_history.jsonl")), &o.history)?;
            log::info("fold_done", json!({ "fold": fold, "best_epoch": o.best_epoch, "best_score": o.best_score }));
            Ok(())
        },
        |fold, r| log_epoch(Some(fold), r),
    )?;
    let per_fold: Vec<Value> = folds
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let r = best_record(o);
            json!({
                "fold": i,
                "best_epoch": o.best_epoch,
                "epochs_run": o.epochs_run,
                "bleu4": r.val_bleu,
                "rouge_l_f1": r.val_rouge,
                "key": r.val_key,
                "emb": r.val_emb,
                "composite": r.val_composite,
            })
        })
        .collect();
    let mut summary = serde_json::Map::new();
    let metrics: [(&str, fn(&EpochRecord) -> f64); 5] = [
        ("bleu4", |r| r.val_bleu),
        ("rouge_l_f1", |r| r.val_rouge),
        ("key", |r| r.val_key),
        ("emb", |r| r.val_emb),
        ("composite", |r| r.val_composite),
    ];
    for (name, get) in metrics {
        let xs: Vec<f64> = folds.iter().map(|o| get(best_record(o))).collect();
        let (mean, sd) = mean_sd(&xs);
        summary.insert(name.into(), json!({ "mean": mean, "sd": sd }));
    }
    write_json(
        &dir.join("cv_report.json"),
        &json!({ "n_folds": folds.len(), "n_samples": s.len(), "folds": per_fold, "summary": summary }),
    )?;
    Ok(())
}

fn require_checkpoint(c: &RunConfig) -> CliResult<ModelState> {
    let p = c
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    Ok(load_checkpoint(p)?)
}

pub fn generate(c: &RunConfig) -> CliResult<()> {
    let dir = out_dir(c)?;
    let state = require_checkpoint(c)?;
    let s = samples(c)?;
    let decoding = Decoding::from_width(c.model.beam_width);
    let prompt = state.config.prompt_text.as_str();
    let rows = s
        .par_iter()
        .map(|x| {
            let ids = generate_ids(&state, &x.features, prompt, decoding, state.config.max_len)?;
            Ok(PairInput {
                id: x.id.clone(),
                generated: state.vocab.decode(&ids)?,
                reference: x.report_text.clone(),
            })
        })
        .collect::<mpath_core::Result<Vec<_>>>()?;
    write_jsonl(&dir.join("generations.jsonl"), &rows)?;
    log::info("generate_done", json!({ "n": rows.len() }));
    Ok(())
}

pub fn evaluate_pairs(c: &RunConfig) -> CliResult<()> {
    let p = c
        .paths
        .pairs
        .as_ref()
        .ok_or_else(|| CliError::Usage("--pairs is required".into()))?;
    let pairs = mpath_core::metrics::read_pairs(p)?;
    let model = match (&c.eval.emb_backend[..], &c.paths.checkpoint) {
        ("model", Some(_)) => Some(require_checkpoint(c)?),
        _ => None,
    };
    let result = scorer(c, model.as_ref())?.score_corpus(&pairs);
    if c.paths.out_dir.is_some() {
        write_json(&out_dir(c)?.join("metrics.json"), &result)?;
    }
    println!("{}", serde_json::to_string(&result.mean).map_err(|e| CliError::Data(e.to_string()))?);
    Ok(())
}

pub fn score(c: &RunConfig, generated: &str, reference: &str) -> CliResult<()> {
    let model = match (&c.eval.emb_backend[..], &c.paths.checkpoint) {
        ("model", Some(_)) => Some(require_checkpoint(c)?),
        _ => None,
    };
    let b = scorer(c, model.as_ref())?.score(generated, reference);
    println!("{}", serde_json::to_string(&b).map_err(|e| CliError::Data(e.to_string()))?);
    Ok(())
}
