use super::forward::{feature_row, positional, Bound};
use super::state::{AttnIx, LinearIx, NormIx};
use super::{ModelState, PrefixSide};
use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::kernels;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{BOS, EOS, N_SPECIAL};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    /// Beam search of the given width, ranked by summed log-probability.
    Beam(usize),
}

impl Decoding {
    pub fn from_width(width: usize) -> Decoding {
        if width <= 1 {
            Decoding::Greedy
        } else {
            Decoding::Beam(width)
        }
    }
}

/// Self-attention keys and values seen so far, one buffer per layer.
#[derive(Clone)]
struct Cache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

/// Tape-free incremental decoder over a fixed encoder memory.
struct Stepper<'s, T: Real> {
    s: &'s ModelState<T>,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
    n_mem: usize,
}

impl<'s, T: Real> Stepper<'s, T> {
    fn new(s: &'s ModelState<T>, memory: &[T]) -> Self {
        let d = s.config.d_model;
        let n_mem = memory.len() / d;
        let (mut cross_k, mut cross_v) = (Vec::new(), Vec::new());
        for l in &s.layout().dec {
            cross_k.push(Self::lin(s, memory, l.cross.k, n_mem, d, d));
            cross_v.push(Self::lin(s, memory, l.cross.v, n_mem, d, d));
        }
        Stepper {
            s,
            cross_k,
            cross_v,
            n_mem,
        }
    }

    fn lin(s: &ModelState<T>, x: &[T], l: LinearIx, m: usize, k: usize, n: usize) -> Vec<T> {
        kernels::linear(x, s.t(l.w), s.t(l.b), m, k, n)
    }

    fn norm(&self, x: &[T], n: NormIx) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        kernels::layer_norm_rows(x, self.s.t(n.g), self.s.t(n.b), &mut out, x.len(), None);
        out
    }

    fn empty_cache(&self) -> Cache<T> {
        let layers = self.s.layout().dec.len();
        Cache {
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Attention of one query row over `n` cached key/value rows.
    fn attend(&self, q: &[T], keys: &[T], values: &[T], n: usize) -> Vec<T> {
        let d = self.s.config.d_model;
        let heads = self.s.config.n_heads;
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); d];
        let mut scores = vec![T::zero(); n];
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = kernels::dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            }
            kernels::softmax_rows(&mut scores, n);
            let oh = &mut out[h * dh..(h + 1) * dh];
            for (j, &p) in scores.iter().enumerate() {
                kernels::axpy(p, &values[j * d + h * dh..j * d + (h + 1) * dh], oh);
            }
        }
        out
    }

    fn attn_out(&self, ctx: &[T], a: &AttnIx) -> Vec<T> {
        let d = self.s.config.d_model;
        Self::lin(self.s, ctx, a.o, 1, d, d)
    }

    /// Feeds one embedded row at position `cache.len`, returns the final
    /// hidden state for it.
    fn step(&self, cache: &mut Cache<T>, emb: &[T]) -> Vec<T> {
        let s = self.s;
        let d = s.config.d_model;
        let f = s.config.ffn_dim;
        let pe: Vec<T> = positional(1, d, cache.len);
        let mut x: Vec<T> = emb.iter().zip(&pe).map(|(&a, &b)| a + b).collect();
        let n = cache.len + 1;
        for (li, l) in s.layout().dec.iter().enumerate() {
            let a = self.norm(&x, l.ln1);
            let q = Self::lin(s, &a, l.self_attn.q, 1, d, d);
            cache.k[li].extend(Self::lin(s, &a, l.self_attn.k, 1, d, d));
            cache.v[li].extend(Self::lin(s, &a, l.self_attn.v, 1, d, d));
            let ctx = self.attend(&q, &cache.k[li], &cache.v[li], n);
            add_into(&mut x, &self.attn_out(&ctx, &l.self_attn));

            let a = self.norm(&x, l.ln2);
            let q = Self::lin(s, &a, l.cross.q, 1, d, d);
            let ctx = self.attend(&q, &self.cross_k[li], &self.cross_v[li], self.n_mem);
            add_into(&mut x, &self.attn_out(&ctx, &l.cross));

            let a = self.norm(&x, l.ln3);
            let mut h = Self::lin(s, &a, l.up, 1, d, f);
            kernels::relu(&mut h);
            add_into(&mut x, &Self::lin(s, &h, l.down, 1, f, d));
        }
        cache.len = n;
        self.norm(&x, s.layout().dec_norm)
    }

    fn logits(&self, hidden: &[T]) -> Vec<T> {
        let c = &self.s.config;
        let mut z = Self::lin(self.s, hidden, self.s.layout().lm_head, 1, c.d_model, c.vocab_size);
        // Never emit padding, a second <bos>, or <unk>.
        for (id, v) in z.iter_mut().enumerate().take(N_SPECIAL) {
            if id != EOS {
                *v = T::neg_infinity();
            }
        }
        z
    }

    fn token_embedding(&self, id: usize) -> &[T] {
        let d = self.s.config.d_model;
        &self.s.t(self.s.layout().embed)[id * d..(id + 1) * d]
    }
}

fn add_into<T: Real>(x: &mut [T], y: &[T]) {
    x.iter_mut().zip(y).for_each(|(a, &b)| *a = *a + b);
}

fn log_softmax<T: Real>(z: &[T]) -> Vec<f64> {
    let z: Vec<f64> = z.iter().map(|v| v.to_f64().unwrap_or(f64::NEG_INFINITY)).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|&v| v - lse).collect()
}

/// Generated token ids (without `<bos>`/`<eos>`), at most `max_len` of them.
pub fn generate_ids<T: Real>(
    state: &ModelState<T>,
    features: &[f32],
    prompt: &str,
    decoding: Decoding,
    max_len: usize,
) -> Result<Vec<usize>> {
    let prefix = {
        let mut g = Graph::inference();
        let net = Bound::bind(&mut g, state);
        let f = g.constant(feature_row(&state.config, features)?);
        let (p, _) = net.prefix(&mut g, f)?;
        g.value(p).to_vec()
    };
    generate_from_prefix(state, &prefix, prompt, decoding, max_len)
}

/// Like [`generate_ids`] with the prefix rows given directly (row-major
/// `prefix_len × d_model`), e.g. all zeros for an ablation.
pub fn generate_from_prefix<T: Real>(
    state: &ModelState<T>,
    prefix: &[T],
    prompt: &str,
    decoding: Decoding,
    max_len: usize,
) -> Result<Vec<usize>> {
    let cfg = &state.config;
    let memory = {
        let mut g = Graph::inference();
        let net = Bound::bind(&mut g, state);
        let p = g.constant(Tensor::new(vec![cfg.prefix_len, cfg.d_model], prefix.to_vec())?);
        let prompt_ids = state.vocab.encode(prompt, false);
        let (x, _) = net.encoder_input(&mut g, p, &prompt_ids)?;
        let m = net.encoder(&mut g, x)?;
        g.value(m).to_vec()
    };
    let stepper = Stepper::new(state, &memory);
    let mut cache = stepper.empty_cache();
    if cfg.prefix_side == PrefixSide::Decoder {
        for row in prefix.chunks(cfg.d_model) {
            stepper.step(&mut cache, row);
        }
    }
    let hidden = stepper.step(&mut cache, stepper.token_embedding(BOS));
    let first = stepper.logits(&hidden);
    match decoding {
        Decoding::Greedy => Ok(greedy(&stepper, cache, first, max_len)),
        Decoding::Beam(w) => Ok(beam(&stepper, cache, first, max_len, w.max(1))),
    }
}

fn greedy<T: Real>(st: &Stepper<'_, T>, mut cache: Cache<T>, mut logits: Vec<T>, max_len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let next = kernels::argmax(&logits);
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() == max_len {
            break;
        }
        let h = st.step(&mut cache, st.token_embedding(next));
        logits = st.logits(&h);
    }
    out
}

struct Hyp<T> {
    tokens: Vec<usize>,
    score: f64,
    cache: Cache<T>,
    logits: Vec<T>,
    done: bool,
}

fn beam<T: Real>(st: &Stepper<'_, T>, cache: Cache<T>, logits: Vec<T>, max_len: usize, width: usize) -> Vec<usize> {
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        cache,
        logits,
        done: false,
    }];
    loop {
        if beams.iter().all(|b| b.done) {
            break;
        }
        // (beam index, token or None for "keep finished", score)
        let mut cands: Vec<(usize, Option<usize>, f64)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.done {
                cands.push((bi, None, b.score));
                continue;
            }
            let lp = log_softmax(&b.logits);
            let mut ids: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
            ids.sort_by(|&a, &c| lp[c].total_cmp(&lp[a]).then(a.cmp(&c)));
            for &id in ids.iter().take(width) {
                cands.push((bi, Some(id), b.score + lp[id]));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (bi, tok, score) in cands {
            let b = &beams[bi];
            match tok {
                None => next.push(Hyp {
                    tokens: b.tokens.clone(),
                    score,
                    cache: b.cache.clone(),
                    logits: Vec::new(),
                    done: true,
                }),
                Some(EOS) => next.push(Hyp {
                    tokens: b.tokens.clone(),
                    score,
                    cache: b.cache.clone(),
                    logits: Vec::new(),
                    done: true,
                }),
                Some(id) => {
                    let mut tokens = b.tokens.clone();
                    tokens.push(id);
                    let mut cache = b.cache.clone();
                    let done = tokens.len() >= max_len;
                    let logits = if done {
                        Vec::new()
                    } else {
                        let h = st.step(&mut cache, st.token_embedding(id));
                        st.logits(&h)
                    };
                    next.push(Hyp {
                        tokens,
                        score,
                        cache,
                        logits,
                        done,
                    });
                }
            }
        }
        beams = next;
    }
    beams
        .into_iter()
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .map(|b| b.tokens)
        .unwrap_or_default()
}

/// Decoded report text for one feature vector, using the configured
/// decoding mode and `max_len`.
pub fn generate<T: Real>(state: &ModelState<T>, features: &[f32], prompt: &str) -> Result<String> {
    let ids = generate_ids(
        state,
        features,
        prompt,
        Decoding::from_width(state.config.beam_width),
        state.config.max_len,
    )?;
    state.vocab.decode(&ids)
}
