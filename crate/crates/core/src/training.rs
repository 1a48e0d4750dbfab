//! Prefix-encoder training: AdamW over the trainable subset with linear
//! warmup, epoch loop with early stopping on the validation composite score,
//! and k-fold cross-validation.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_breakdown, ScoreBreakdown, Scorer};
use crate::model::{forward_loss, generate_ids, Decoding, ModelConfig, ModelState, SampleInput, TruncationCounter};
use crate::optim::{AdamConfig, AdamW};
use crate::reports::{Organ, PairedSample};
use crate::rng::{seeded, shuffle, stream, Rng64};

pub use crate::optim::AdamW as OptState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub n_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            warmup_steps: 500,
            batch_size: 8,
            max_epochs: 100,
            patience: 20,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            n_folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be at least 2".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `lr·min(1, t/warmup_steps)`, constant after warmup. `t` counts from 1.
pub fn lr_at_step(t: u64, cfg: &TrainConfig) -> f64 {
    crate::optim::lr_at_step(t, cfg.lr, cfg.warmup_steps)
}

/// One AdamW update of the trainable parameters from their accumulated
/// gradients.
pub fn adamw_step(state: &mut ModelState, opt: &mut OptState, lr: f64) -> Result<()> {
    let names: Vec<String> = state.layout().specs().iter().map(|s| s.name.clone()).collect();
    opt.step(state.tensors_mut(), lr, |i| names[i].clone())
}

/// `""` with probability `prompt_dropout`, otherwise the configured prompt.
pub fn sample_prompt<'c>(rng: &mut Rng64, cfg: &'c ModelConfig) -> &'c str {
    if rng.random::<f64>() < cfg.prompt_dropout {
        ""
    } else {
        &cfg.prompt_text
    }
}

/// Seeded permutation of `0..n` cut into `n_folds` contiguous chunks; fold
/// `i` validates on chunk `i` and trains on the rest. Index lists are sorted.
pub fn kfold_split(n: usize, n_folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if n_folds < 2 {
        return Err(Error::Config("n_folds must be at least 2".into()));
    }
    if n < n_folds {
        return Err(Error::InvalidInput(format!("{n} samples cannot fill {n_folds} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    shuffle(&mut seeded(seed), &mut perm);
    let (base, extra) = (n / n_folds, n % n_folds);
    let mut chunks = Vec::with_capacity(n_folds);
    let mut start = 0;
    for i in 0..n_folds {
        let len = base + usize::from(i < extra);
        chunks.push(&perm[start..start + len]);
        start += len;
    }
    Ok((0..n_folds)
        .map(|i| {
            let mut val = chunks[i].to_vec();
            val.sort_unstable();
            let mut train: Vec<usize> = chunks
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, c)| c.iter().copied())
                .collect();
            train.sort_unstable();
            (train, val)
        })
        .collect())
}

/// Tracks the best score and the number of epochs since it.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since: 0,
        }
    }

    /// Records the score of `epoch` (1-based). Only a strict improvement
    /// resets the counter.
    pub fn observe(&mut self, epoch: usize, score: f64) -> Observation {
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.since = 0;
        } else {
            self.since += 1;
        }
        Observation {
            improved,
            stop: self.since >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Outcome of an early-stopped epoch loop.
#[derive(Clone, Debug)]
pub struct Selected<S> {
    pub best: S,
    pub best_epoch: usize,
    pub best_score: f64,
    pub epochs_run: usize,
}

/// Runs `epoch(e)` for e = 1, 2, … until `patience` epochs pass without a
/// strict improvement or `max_epochs` is reached. `epoch` returns the
/// validation score and a snapshot; the snapshot of the best epoch is kept.
pub fn run_early_stopping<S>(
    max_epochs: usize,
    patience: usize,
    mut epoch: impl FnMut(usize) -> Result<(f64, S)>,
) -> Result<Selected<S>> {
    let mut stopper = EarlyStopping::new(patience);
    let mut best: Option<S> = None;
    let mut epochs_run = 0;
    for e in 1..=max_epochs {
        let (score, snapshot) = epoch(e)?;
        epochs_run = e;
        let obs = stopper.observe(e, score);
        if obs.improved {
            best = Some(snapshot);
        }
        if obs.stop {
            break;
        }
    }
    let (best_epoch, best_score) = stopper
        .best()
        .ok_or_else(|| Error::Config("max_epochs must be positive".into()))?;
    Ok(Selected {
        best: best.expect("set together with the best score"),
        best_epoch,
        best_score,
        epochs_run,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bleu: f64,
    pub val_rouge: f64,
    pub val_key: f64,
    pub val_emb: f64,
    pub val_composite: f64,
    pub lr: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Validation result for one model on a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: ScoreBreakdown,
    /// Fraction of generations whose header names the reference organ.
    pub organ_accuracy: f64,
    /// Fraction of generations equal to the reference after normalization.
    pub exact_match: f64,
    pub generations: Vec<String>,
}

/// Generates for every sample (in parallel, order preserved) with the
/// configured prompt and scores against the reference reports.
pub fn evaluate(
    state: &ModelState,
    samples: &[&PairedSample],
    scorer: &Scorer,
    decoding: Decoding,
) -> Result<Evaluation> {
    let prompt = state.config.prompt_text.as_str();
    let generations = samples
        .par_iter()
        .map(|s| {
            let ids = generate_ids(state, &s.features, prompt, decoding, state.config.max_len)?;
            state.vocab.decode(&ids)
        })
        .collect::<Result<Vec<String>>>()?;
    Ok(score_generations(samples, generations, scorer))
}

pub fn score_generations(samples: &[&PairedSample], generations: Vec<String>, scorer: &Scorer) -> Evaluation {
    let scores: Vec<ScoreBreakdown> = samples
        .par_iter()
        .zip(generations.par_iter())
        .map(|(s, g)| scorer.score(g, &s.report_text))
        .collect();
    let n = samples.len().max(1) as f64;
    let organ_hits = samples
        .iter()
        .zip(&generations)
        .filter(|(s, g)| Organ::detect(g) == Some(s.labels.organ))
        .count();
    let exact = samples
        .iter()
        .zip(&generations)
        .filter(|(s, g)| crate::tokenizer::normalize(g) == crate::tokenizer::normalize(&s.report_text))
        .count();
    Evaluation {
        mean: mean_breakdown(&scores),
        organ_accuracy: organ_hits as f64 / n,
        exact_match: exact as f64 / n,
        generations,
    }
}

fn sample_input<'s>(s: &'s PairedSample, prompt: &'s str) -> SampleInput<'s> {
    SampleInput {
        features: &s.features,
        prompt,
        report: &s.report_text,
        organ: s.labels.organ.index(),
        sample_type: s.labels.sample_type,
        findings: &s.labels.findings,
    }
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub epochs_run: usize,
    /// Targets cut at `max_len` during training.
    pub truncated: usize,
}

/// Trains the prompt encoder and heads of `state` on `train`, selecting the
/// epoch with the best validation composite. `on_epoch` sees each record as
/// it is produced.
pub fn train_fold(
    train: &[&PairedSample],
    val: &[&PairedSample],
    mut state: ModelState,
    cfg: &TrainConfig,
    scorer: &Scorer,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = AdamW::new(cfg.adam(), state.tensors().len());
    let mut rng = seeded(cfg.seed);
    let trunc = TruncationCounter::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let model_cfg = state.config.clone();
    state.zero_grad();

    let selected = run_early_stopping(cfg.max_epochs, cfg.patience, |epoch| {
        shuffle(&mut rng, &mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SampleInput> = chunk
                .iter()
                .map(|&i| sample_input(train[i], sample_prompt(&mut rng, &model_cfg)))
                .collect();
            let loss = forward_loss(&mut state, &batch, true, &trunc)?;
            lr = lr_at_step(opt.steps() + 1, cfg);
            adamw_step(&mut state, &mut opt, lr)?;
            loss_sum += loss.total * chunk.len() as f64;
        }
        let eval = evaluate(&state, val, scorer, Decoding::Greedy)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_bleu: eval.mean.bleu4,
            val_rouge: eval.mean.rouge_l_f1,
            val_key: eval.mean.key,
            val_emb: eval.mean.emb,
            val_composite: eval.mean.composite,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
        Ok((eval.mean.composite, state.clone()))
    })?;

    Ok(FoldOutcome {
        state: selected.best,
        history,
        best_epoch: selected.best_epoch,
        best_score: selected.best_score,
        epochs_run: selected.epochs_run,
        truncated: trunc.get(),
    })
}

/// k-fold cross-validation, every fold starting from `base`. Fold `i`
/// trains with seed stream `i` of `cfg.seed`.
pub fn cross_validate(
    samples: &[PairedSample],
    base: &ModelState,
    cfg: &TrainConfig,
    scorer: &Scorer,
    mut on_fold: impl FnMut(usize, &FoldOutcome) -> Result<()>,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    let splits = kfold_split(samples.len(), cfg.n_folds, cfg.seed)?;
    let mut out = Vec::with_capacity(splits.len());
    for (fold, (train_ix, val_ix)) in splits.iter().enumerate() {
        let train: Vec<&PairedSample> = train_ix.iter().map(|&i| &samples[i]).collect();
        let val: Vec<&PairedSample> = val_ix.iter().map(|&i| &samples[i]).collect();
        let fold_cfg = TrainConfig {
            seed: rand::Rng::random(&mut stream(cfg.seed, fold as u64)),
            ..cfg.clone()
        };
        let outcome = train_fold(&train, &val, base.clone(), &fold_cfg, scorer, |r| on_epoch(fold, r))?;
        on_fold(fold, &outcome)?;
        out.push(outcome);
    }
    Ok(out)
}
