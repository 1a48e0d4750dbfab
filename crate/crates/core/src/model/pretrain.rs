use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::{teacher_forcing, Bound, TruncationCounter};
use super::{ModelState, ParamGroup};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{lr_at_step, AdamConfig, AdamW};
use crate::rng::{seeded, Rng64};
use crate::tensor::{Real, Tensor};

/// Denoising pretraining of the backbone on report text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub adam: AdamConfig,
    /// Each report token survives corruption with probability drawn from
    /// `U(keep_min, keep_max)` per report.
    pub keep_min: f64,
    pub keep_max: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch_size: 16,
            lr: 1e-3,
            warmup: 100,
            adam: AdamConfig::default(),
            keep_min: 0.1,
            keep_max: 0.6,
            seed: 11,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        if !(0.0 <= self.keep_min && self.keep_min <= self.keep_max && self.keep_max <= 1.0) {
            return Err(Error::Config(format!(
                "keep range [{}, {}] is not inside [0, 1]",
                self.keep_min, self.keep_max
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("pretrain lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Token-weighted batch cross-entropy per step.
    pub losses: Vec<f64>,
    pub truncated: usize,
}

impl PretrainReport {
    /// Mean of the first `k` step losses.
    pub fn head_mean(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[..k].iter().sum::<f64>() / k as f64
    }

    /// Mean of the last `k` step losses.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

/// Keeps each token with probability `keep`, preserving order.
pub fn corrupt_tokens(ids: &[usize], keep: f64, rng: &mut Rng64) -> Vec<usize> {
    ids.iter().copied().filter(|_| rng.random::<f64>() < keep).collect()
}

/// Pretrains every backbone parameter as a denoising autoencoder: the model
/// reconstructs a report from a random subset of its tokens. The first
/// `prefix_len` surviving tokens occupy the prefix slots (zero rows when
/// fewer survive) and the rest follow the prompt, so the backbone learns to
/// read content from the prefix positions. On return the backbone is frozen
/// and the prompt encoder and heads are trainable.
pub fn init_backbone_pretrain<T: Real>(
    state: &mut ModelState<T>,
    texts: &[String],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    cfg.validate()?;
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    state.set_trainable(|g| g == ParamGroup::Backbone);
    let mut opt = AdamW::new(cfg.adam.clone(), state.tensors().len());
    let mut rng = seeded(cfg.seed);
    let trunc = TruncationCounter::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<DenoiseItem> = (0..cfg.batch_size)
            .map(|_| {
                let text = &texts[rng.random_range(0..texts.len())];
                let ids = state.vocab.encode(text, true);
                let keep = rng.random_range(cfg.keep_min..=cfg.keep_max);
                let kept = corrupt_tokens(&ids[1..ids.len() - 1], keep, &mut rng);
                let prompt = if rng.random::<f64>() < state.config.prompt_dropout {
                    ""
                } else {
                    state.config.prompt_text.as_str()
                };
                DenoiseItem {
                    prompt: state.vocab.encode(prompt, false),
                    kept,
                    ids,
                }
            })
            .collect();
        let loss = denoise_step(state, &batch, &trunc)?;
        let lr = lr_at_step(step as u64, cfg.lr, cfg.warmup);
        let names: Vec<String> = state.layout().specs().iter().map(|s| s.name.clone()).collect();
        opt.step(state.tensors_mut(), lr, |i| names[i].clone())?;
        losses.push(loss);
        progress(step, loss);
    }
    state.freeze_backbone();
    state.zero_grad();
    Ok(PretrainReport {
        losses,
        truncated: trunc.get(),
    })
}

struct DenoiseItem {
    prompt: Vec<usize>,
    kept: Vec<usize>,
    /// `<bos> y <eos>`
    ids: Vec<usize>,
}

/// Forward and backward for one denoising batch; returns the loss.
fn denoise_step<T: Real>(
    state: &mut ModelState<T>,
    batch: &[DenoiseItem],
    trunc: &TruncationCounter,
) -> Result<f64> {
    let (loss, grads) = {
        let st: &ModelState<T> = state;
        let cfg = &st.config;
        let mut g = Graph::new();
        let net = Bound::bind(&mut g, st);
        let embed = net.vars()[st.layout().embed];
        let mut parts: Vec<(Var, usize)> = Vec::with_capacity(batch.len());
        for DenoiseItem { prompt, kept, ids } in batch {
            let n_slot = kept.len().min(cfg.prefix_len);
            let mut rows = Vec::with_capacity(2);
            if n_slot > 0 {
                rows.push(g.embedding(embed, &kept[..n_slot])?);
            }
            if n_slot < cfg.prefix_len {
                rows.push(g.constant(Tensor::zeros(&[cfg.prefix_len - n_slot, cfg.d_model])));
            }
            let prefix = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
            let mut enc_ids = prompt.to_vec();
            enc_ids.extend_from_slice(&kept[n_slot..]);
            let (dec_in, targets) = teacher_forcing(ids, cfg.max_len, trunc);
            let logits = net.run(&mut g, prefix, &enc_ids, &dec_in)?;
            let mut tgt: Vec<Option<usize>> = Vec::new();
            if cfg.prefix_side == super::PrefixSide::Decoder {
                tgt.extend(std::iter::repeat_n(None, cfg.prefix_len));
            }
            tgt.extend(targets.iter().map(|&t| Some(t)));
            parts.push((g.cross_entropy(logits, &tgt)?, targets.len()));
        }
        let n_tok: usize = parts.iter().map(|p| p.1).sum();
        let mut total: Option<Var> = None;
        let mut loss = 0.0;
        for &(ce, n) in &parts {
            let share = n as f64 / n_tok as f64;
            loss += g.scalar(ce).to_f64().unwrap_or(f64::NAN) * share;
            let t = g.scale(ce, share)?;
            total = Some(match total {
                None => t,
                Some(a) => g.add(a, t)?,
            });
        }
        let total = total.ok_or(Error::EmptyCorpus)?;
        let mut grads = g.backward(total)?;
        let vars = net.vars();
        (loss, vars.iter().map(|&v| grads.take(v)).collect::<Vec<_>>())
    };
    for (t, gr) in state.tensors_mut().iter_mut().zip(grads) {
        if let Some(gr) = gr {
            t.accumulate_grad(&gr);
        }
    }
    Ok(loss)
}
