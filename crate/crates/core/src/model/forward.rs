use std::sync::atomic::{AtomicUsize, Ordering};

use super::state::{AttnIx, Layout, LinearIx, NormIx};
use super::{ModelConfig, ModelState, PrefixSide};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{BOS, EOS};

/// Counts decoder targets cut off at `max_len`.
#[derive(Debug, Default)]
pub struct TruncationCounter(AtomicUsize);

impl TruncationCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// One training example with its prompt already chosen.
#[derive(Clone, Copy, Debug)]
pub struct SampleInput<'s> {
    pub features: &'s [f32],
    pub prompt: &'s str,
    pub report: &'s str,
    pub organ: usize,
    pub sample_type: usize,
    pub findings: &'s [usize],
}

/// Model parameters bound into a graph, addressed through the layout.
pub struct Bound<'c> {
    cfg: &'c ModelConfig,
    layout: &'c Layout,
    vars: Vec<Var>,
}

impl<'c> Bound<'c> {
    pub fn bind<'a: 'c, T: Real>(g: &mut Graph<'a, T>, state: &'a ModelState<T>) -> Bound<'c> {
        let vars = state.tensors().iter().map(|t| g.param(t)).collect();
        Bound {
            cfg: &state.config,
            layout: state.layout(),
            vars,
        }
    }

    /// Wraps vars that were bound elsewhere, in layout order.
    pub fn from_vars(cfg: &'c ModelConfig, layout: &'c Layout, vars: &[Var]) -> Result<Bound<'c>> {
        if vars.len() != layout.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameter vars, got {}",
                layout.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            cfg,
            layout,
            vars: vars.to_vec(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Parameter vars in layout order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn linear<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, l: LinearIx) -> Result<Var> {
        g.linear(x, self.v(l.w), self.v(l.b))
    }

    fn norm<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, n: NormIx) -> Result<Var> {
        g.layer_norm(x, self.v(n.g), self.v(n.b))
    }

    fn ffn<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, up: LinearIx, down: LinearIx) -> Result<Var> {
        let h = self.linear(g, x, up)?;
        let h = g.relu(h)?;
        self.linear(g, h, down)
    }

    fn attention<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        a: &AttnIx,
        xq: Var,
        xkv: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / heads;
        let q = self.linear(g, xq, a.q)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt())?;
        let k = self.linear(g, xkv, a.k)?;
        let v = self.linear(g, xkv, a.v)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
            };
            let mut s = g.matmul_bt(qh, kh)?;
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let p = g.softmax(s)?;
            outs.push(g.matmul(p, vh)?);
        }
        let ctx = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.linear(g, ctx, a.o)
    }

    /// `(p, h)`: prefix rows `(prefix_len, d_model)` and the hidden vector
    /// `(1, hidden)` for a `(1, d_v)` feature row.
    pub fn prefix<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<(Var, Var)> {
        let h = self.linear(g, features, self.layout.prompt_hidden)?;
        let h = g.relu(h)?;
        let p = self.linear(g, h, self.layout.prompt_out)?;
        let p = g.reshape(p, &[self.cfg.prefix_len, self.cfg.d_model])?;
        Ok((p, h))
    }

    /// Concatenates optional prefix rows with embedded `ids`.
    fn rows<T: Real>(&self, g: &mut Graph<'_, T>, prefix: Option<Var>, ids: &[usize]) -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        parts.extend(prefix);
        if !ids.is_empty() {
            parts.push(g.embedding(self.v(self.layout.embed), ids)?);
        }
        match parts.len() {
            0 => Err(Error::InvalidInput("empty input sequence".into())),
            1 => Ok(parts[0]),
            _ => g.concat_rows(&parts),
        }
    }

    pub fn encoder<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut x = add_positions(g, x, 0)?;
        for l in &self.layout.enc {
            let a = self.norm(g, x, l.ln1)?;
            let a = self.attention(g, &l.attn, a, a, None)?;
            x = g.add(x, a)?;
            let a = self.norm(g, x, l.ln2)?;
            let a = self.ffn(g, a, l.up, l.down)?;
            x = g.add(x, a)?;
        }
        self.norm(g, x, self.layout.enc_norm)
    }

    /// Teacher-forced decoder logits for `[prelude rows] ++ embed(ids)`.
    pub fn decoder<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        prelude: Option<Var>,
        ids: &[usize],
        memory: Var,
    ) -> Result<Var> {
        let x = self.rows(g, prelude, ids)?;
        let n = g.shape(x)[0];
        let mut x = add_positions(g, x, 0)?;
        let mask = g.constant(causal_mask(n));
        for l in &self.layout.dec {
            let a = self.norm(g, x, l.ln1)?;
            let a = self.attention(g, &l.self_attn, a, a, Some(mask))?;
            x = g.add(x, a)?;
            let a = self.norm(g, x, l.ln2)?;
            let a = self.attention(g, &l.cross, a, memory, None)?;
            x = g.add(x, a)?;
            let a = self.norm(g, x, l.ln3)?;
            let a = self.ffn(g, a, l.up, l.down)?;
            x = g.add(x, a)?;
        }
        let x = self.norm(g, x, self.layout.dec_norm)?;
        self.linear(g, x, self.layout.lm_head)
    }

    /// Encoder input for one sample plus its attention mask (all ones for a
    /// single unpadded sequence). With the prefix on the decoder side the
    /// encoder sees `<bos> prompt <eos>` only.
    pub fn encoder_input<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        prefix: Var,
        prompt_ids: &[usize],
    ) -> Result<(Var, Vec<bool>)> {
        let x = match self.cfg.prefix_side {
            PrefixSide::Encoder => self.rows(g, Some(prefix), prompt_ids)?,
            PrefixSide::Decoder => {
                let mut ids = Vec::with_capacity(prompt_ids.len() + 2);
                ids.push(BOS);
                ids.extend_from_slice(prompt_ids);
                ids.push(EOS);
                self.rows(g, None, &ids)?
            }
        };
        let n = g.shape(x)[0];
        Ok((x, vec![true; n]))
    }

    /// Encoder memory and decoder logits for `[<bos>, y₁, …]`, with the
    /// logits of prelude rows (decoder-side prefix) still included.
    pub fn run<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        prefix: Var,
        encoder_ids: &[usize],
        decoder_ids: &[usize],
    ) -> Result<Var> {
        let (x, _) = self.encoder_input(g, prefix, encoder_ids)?;
        let memory = self.encoder(g, x)?;
        let prelude = (self.cfg.prefix_side == PrefixSide::Decoder).then_some(prefix);
        self.decoder(g, prelude, decoder_ids, memory)
    }
}

/// Loss terms for one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// `gen + λ_o·organ + λ_s·sample + λ_f·finding`.
    pub total: Var,
    pub gen: Var,
    pub organ: Var,
    pub sample: Var,
    pub finding: Var,
    /// Weighted auxiliary sum, absent when every weight is zero.
    pub aux: Option<Var>,
    /// Number of scored target tokens.
    pub n_targets: usize,
}

/// Splits `<bos> y <eos>` into decoder inputs and targets, truncated to
/// `max_len` positions.
pub(crate) fn teacher_forcing(ids: &[usize], max_len: usize, trunc: &TruncationCounter) -> (Vec<usize>, Vec<usize>) {
    let mut input = ids[..ids.len() - 1].to_vec();
    let mut target = ids[1..].to_vec();
    if input.len() > max_len {
        input.truncate(max_len);
        target.truncate(max_len);
        trunc.bump();
    }
    (input, target)
}

pub(crate) fn feature_row<T: Real>(cfg: &ModelConfig, features: &[f32]) -> Result<Tensor<T>> {
    if features.len() != cfg.d_v {
        return Err(Error::InvalidInput(format!(
            "feature vector has {} entries, expected {}",
            features.len(),
            cfg.d_v
        )));
    }
    Tensor::new(vec![1, cfg.d_v], features.iter().map(|&v| T::lit(v as f64)).collect())
}

pub(crate) fn multi_hot(n: usize, ids: &[usize]) -> Result<Vec<f64>> {
    let mut t = vec![0.0; n];
    for &i in ids {
        *t.get_mut(i)
            .ok_or_else(|| Error::InvalidInput(format!("finding id {i} out of range for {n} findings")))? = 1.0;
    }
    Ok(t)
}

/// Builds all loss terms for one sample on an existing graph.
pub fn sample_loss<T: Real>(
    g: &mut Graph<'_, T>,
    net: &Bound<'_>,
    vocab: &crate::tokenizer::Vocab,
    s: &SampleInput<'_>,
    trunc: &TruncationCounter,
) -> Result<LossParts> {
    let cfg = net.cfg;
    let f = g.constant(feature_row(cfg, s.features)?);
    let (p, h) = net.prefix(g, f)?;
    let prompt_ids = vocab.encode(s.prompt, false);
    let (dec_in, targets) = teacher_forcing(&vocab.encode(s.report, true), cfg.max_len, trunc);
    let logits = net.run(g, p, &prompt_ids, &dec_in)?;
    let mut tgt: Vec<Option<usize>> = Vec::with_capacity(g.shape(logits)[0]);
    if cfg.prefix_side == PrefixSide::Decoder {
        tgt.extend(std::iter::repeat_n(None, cfg.prefix_len));
    }
    tgt.extend(targets.iter().map(|&t| Some(t)));
    let gen = g.cross_entropy(logits, &tgt)?;

    let lo = net.linear(g, h, net.layout.aux_organ)?;
    let organ = g.cross_entropy(lo, &[Some(s.organ)])?;
    let ls = net.linear(g, h, net.layout.aux_sample)?;
    let sample = g.cross_entropy(ls, &[Some(s.sample_type)])?;
    let lf = net.linear(g, h, net.layout.aux_finding)?;
    let finding = g.bce_with_logits(lf, &multi_hot(cfg.n_findings, s.findings)?)?;

    let w = &cfg.aux_weights;
    let mut aux: Option<Var> = None;
    for (term, weight) in [(organ, w.organ), (sample, w.sample), (finding, w.finding)] {
        if weight != 0.0 {
            let t = g.scale(term, weight)?;
            aux = Some(match aux {
                None => t,
                Some(a) => g.add(a, t)?,
            });
        }
    }
    let total = match aux {
        None => gen,
        Some(a) => g.add(gen, a)?,
    };
    Ok(LossParts {
        total,
        gen,
        organ,
        sample,
        finding,
        aux,
        n_targets: targets.len(),
    })
}

/// Batch loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    /// Token-weighted mean cross-entropy over the batch.
    pub gen: f64,
    pub organ: f64,
    pub sample: f64,
    pub finding: f64,
}

/// Batch objective: generation cross-entropy averaged over all target
/// tokens in the batch plus the weighted auxiliary losses averaged over
/// samples. With `backward`, gradients are accumulated into every
/// grad-requiring tensor of `state`.
pub fn forward_loss<T: Real>(
    state: &mut ModelState<T>,
    batch: &[SampleInput<'_>],
    backward: bool,
    trunc: &TruncationCounter,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let (out, grads) = {
        let st: &ModelState<T> = state;
        let mut g = if backward { Graph::new() } else { Graph::inference() };
        let net = Bound::bind(&mut g, st);
        let parts = batch
            .iter()
            .map(|s| sample_loss(&mut g, &net, &st.vocab, s, trunc))
            .collect::<Result<Vec<_>>>()?;
        let n_tok: usize = parts.iter().map(|p| p.n_targets).sum();
        let b = batch.len() as f64;
        let w = &st.config.aux_weights;
        let mut out = BatchLoss::default();
        let mut total: Option<Var> = None;
        for p in &parts {
            let share = p.n_targets as f64 / n_tok as f64;
            out.gen += g.scalar(p.gen).to_f64().unwrap_or(f64::NAN) * share;
            out.organ += g.scalar(p.organ).to_f64().unwrap_or(f64::NAN) / b;
            out.sample += g.scalar(p.sample).to_f64().unwrap_or(f64::NAN) / b;
            out.finding += g.scalar(p.finding).to_f64().unwrap_or(f64::NAN) / b;
            let mut t = g.scale(p.gen, share)?;
            if let Some(aux) = p.aux {
                let aux = g.scale(aux, 1.0 / b)?;
                t = g.add(t, aux)?;
            }
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
        let total = total.expect("non-empty batch");
        out.total = out.gen + w.organ * out.organ + w.sample * out.sample + w.finding * out.finding;
        let grads = if backward && g.requires_grad(total) {
            let mut grads = g.backward(total)?;
            Some((0..net.vars.len()).map(|i| grads.take(net.vars[i])).collect::<Vec<_>>())
        } else {
            None
        };
        (out, grads)
    };
    if let Some(grads) = grads {
        for (t, gr) in state.tensors_mut().iter_mut().zip(grads) {
            if let Some(gr) = gr {
                t.accumulate_grad(&gr);
            }
        }
    }
    Ok(out)
}

/// Prefix rows and hidden vector for one feature vector (no tape).
pub fn encode_visual_prefix<T: Real>(state: &ModelState<T>, features: &[f32]) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::inference();
    let net = Bound::bind(&mut g, state);
    let f = g.constant(feature_row(&state.config, features)?);
    let (p, h) = net.prefix(&mut g, f)?;
    Ok((
        Tensor::new(g.shape(p).to_vec(), g.value(p).to_vec())?,
        Tensor::new(g.shape(h).to_vec(), g.value(h).to_vec())?,
    ))
}

/// Encoder input rows for a prefix and prompt, returned as a tensor with
/// its attention mask.
pub fn build_encoder_input<T: Real>(
    state: &ModelState<T>,
    prefix: &Tensor<T>,
    prompt_ids: &[usize],
) -> Result<(Tensor<T>, Vec<bool>)> {
    let mut g = Graph::inference();
    let net = Bound::bind(&mut g, state);
    let p = g.constant(prefix.clone());
    let (x, mask) = net.encoder_input(&mut g, p, prompt_ids)?;
    Ok((Tensor::new(g.shape(x).to_vec(), g.value(x).to_vec())?, mask))
}

/// Sinusoidal position code for rows `offset..offset + n`.
pub(crate) fn positional<T: Real>(n: usize, d: usize, offset: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * d);
    for pos in offset..offset + n {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            out.push(T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

fn add_positions<T: Real>(g: &mut Graph<'_, T>, x: Var, offset: usize) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let pe = g.constant(Tensor::new(vec![n, d], positional(n, d, offset))?);
    g.add(x, pe)
}

pub(crate) const MASKED: f64 = -1e9;

fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = T::lit(MASKED);
        }
    }
    Tensor::new(vec![n, n], m).expect("n > 0")
}
