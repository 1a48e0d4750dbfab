use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{normal, substream};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::Vocab;

/// Whether a parameter belongs to the frozen backbone or to the trainable
/// prompt encoder and auxiliary heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Prompt,
    Aux,
    Backbone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIx {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIx {
    pub q: LinearIx,
    pub k: LinearIx,
    pub v: LinearIx,
    pub o: LinearIx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayerIx {
    pub ln1: NormIx,
    pub attn: AttnIx,
    pub ln2: NormIx,
    pub up: LinearIx,
    pub down: LinearIx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayerIx {
    pub ln1: NormIx,
    pub self_attn: AttnIx,
    pub ln2: NormIx,
    pub cross: AttnIx,
    pub ln3: NormIx,
    pub up: LinearIx,
    pub down: LinearIx,
}

/// Canonical parameter order plus typed indices into it.
#[derive(Clone, Debug)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    pub(crate) prompt_hidden: LinearIx,
    pub(crate) prompt_out: LinearIx,
    pub(crate) aux_organ: LinearIx,
    pub(crate) aux_sample: LinearIx,
    pub(crate) aux_finding: LinearIx,
    pub(crate) embed: usize,
    pub(crate) enc: Vec<EncLayerIx>,
    pub(crate) enc_norm: NormIx,
    pub(crate) dec: Vec<DecLayerIx>,
    pub(crate) dec_norm: NormIx,
    pub(crate) lm_head: LinearIx,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, group: ParamGroup, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            group,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, group: ParamGroup, std: f64) -> LinearIx {
        LinearIx {
            w: self.add(format!("{name}.weight"), vec![out, inp], group, Init::Normal(std)),
            b: self.add(format!("{name}.bias"), vec![out], group, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIx {
        NormIx {
            g: self.add(format!("{name}.gamma"), vec![d], ParamGroup::Backbone, Init::Ones),
            b: self.add(format!("{name}.beta"), vec![d], ParamGroup::Backbone, Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIx {
        let std = 1.0 / (d as f64).sqrt();
        let bb = ParamGroup::Backbone;
        AttnIx {
            q: self.linear(&format!("{name}.q"), d, d, bb, std),
            k: self.linear(&format!("{name}.k"), d, d, bb, std),
            v: self.linear(&format!("{name}.v"), d, d, bb, std),
            o: self.linear(&format!("{name}.o"), d, d, bb, std),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut b = Builder { specs: Vec::new() };
        let (d, h, f) = (cfg.d_model, cfg.hidden, cfg.ffn_dim);
        let bb = ParamGroup::Backbone;

        // Features are unit-norm, so a unit-variance W₁ keeps W₁·f at unit scale.
        let prompt_hidden = b.linear("prompt.hidden", h, cfg.d_v, ParamGroup::Prompt, 1.0);
        let prompt_out = b.linear(
            "prompt.out",
            cfg.prefix_len * d,
            h,
            ParamGroup::Prompt,
            1.0 / (h as f64).sqrt(),
        );
        let aux_std = 1.0 / (h as f64).sqrt();
        let aux_organ = b.linear("aux.organ", cfg.n_organs, h, ParamGroup::Aux, aux_std);
        let aux_sample = b.linear("aux.sample", cfg.n_sample_types, h, ParamGroup::Aux, aux_std);
        let aux_finding = b.linear("aux.finding", cfg.n_findings, h, ParamGroup::Aux, aux_std);

        let embed = b.add("backbone.embed".into(), vec![cfg.vocab_size, d], bb, Init::Normal(1.0));
        let up_std = 1.0 / (d as f64).sqrt();
        let down_std = 1.0 / (f as f64).sqrt();
        let enc = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("backbone.enc.{i}");
                EncLayerIx {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    up: b.linear(&format!("{p}.ffn.up"), f, d, bb, up_std),
                    down: b.linear(&format!("{p}.ffn.down"), d, f, bb, down_std),
                }
            })
            .collect();
        let enc_norm = b.norm("backbone.enc.norm", d);
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("backbone.dec.{i}");
                DecLayerIx {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    self_attn: b.attn(&format!("{p}.self"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    cross: b.attn(&format!("{p}.cross"), d),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                    up: b.linear(&format!("{p}.ffn.up"), f, d, bb, up_std),
                    down: b.linear(&format!("{p}.ffn.down"), d, f, bb, down_std),
                }
            })
            .collect();
        let dec_norm = b.norm("backbone.dec.norm", d);
        // Small output weights keep the untrained next-token distribution
        // close to uniform.
        let lm_head = b.linear("backbone.lm_head", cfg.vocab_size, d, bb, 0.02);

        Layout {
            specs: b.specs,
            prompt_hidden,
            prompt_out,
            aux_organ,
            aux_sample,
            aux_finding,
            embed,
            enc,
            enc_norm,
            dec,
            dec_norm,
            lm_head,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }
}

/// All model parameters in layout order, together with the configuration
/// and vocabulary they belong to.
#[derive(Clone, Debug)]
pub struct ModelState<T: Real = f32> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    layout: Layout,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelState<T> {
    /// Fresh seeded initialization. The backbone starts frozen; the prompt
    /// encoder and auxiliary heads are trainable.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        config.validate()?;
        let layout = Layout::new(&config);
        let tensors = layout
            .specs
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data: Vec<T> = match spec.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal(std) => {
                        let mut rng = substream(seed, &spec.name);
                        (0..n).map(|_| T::lit(normal(&mut rng) * std)).collect()
                    }
                };
                Tensor::new(spec.shape.clone(), data)
                    .map(|t| t.with_requires_grad(spec.group != ParamGroup::Backbone))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelState {
            config,
            vocab,
            layout,
            tensors,
        })
    }

    /// Rebuilds a state from tensors in layout order (e.g. from a checkpoint).
    pub fn from_tensors(config: ModelConfig, vocab: Vocab, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config("vocab_size does not match vocabulary".into()));
        }
        let layout = Layout::new(&config);
        if tensors.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.specs.iter().zip(&tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(ModelState {
            config,
            vocab,
            layout,
            tensors,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.index_of(name).map(|i| &self.tensors[i])
    }

    pub(crate) fn t(&self, i: usize) -> &[T] {
        self.tensors[i].data()
    }

    /// Names, groups and tensors in layout order.
    pub fn named(&self) -> impl Iterator<Item = (&ParamSpec, &Tensor<T>)> {
        self.layout.specs.iter().zip(&self.tensors)
    }

    /// Sets `requires_grad` per group.
    pub fn set_trainable(&mut self, f: impl Fn(ParamGroup) -> bool) {
        for (spec, t) in self.layout.specs.iter().zip(self.tensors.iter_mut()) {
            t.set_requires_grad(f(spec.group));
        }
    }

    /// Standard prefix-tuning split: backbone frozen, everything else trainable.
    pub fn freeze_backbone(&mut self) {
        self.set_trainable(|g| g != ParamGroup::Backbone);
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(|t| t.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.tensors.iter().filter(|t| !t.requires_grad()).map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Fresh prompt encoder and heads (seeded as in [`ModelState::init`]) on
    /// top of the backbone of `source`. `config` may change anything that
    /// does not shape the backbone; the vocabulary comes from `source`.
    pub fn with_backbone_from(mut config: ModelConfig, source: &ModelState<T>, seed: u64) -> Result<Self> {
        let s = &source.config;
        for (name, a, b) in [
            ("d_model", config.d_model, s.d_model),
            ("enc_layers", config.enc_layers, s.enc_layers),
            ("dec_layers", config.dec_layers, s.dec_layers),
            ("n_heads", config.n_heads, s.n_heads),
            ("ffn_dim", config.ffn_dim, s.ffn_dim),
        ] {
            if a != b {
                return Err(Error::Config(format!("{name} is {a} but the backbone has {b}")));
            }
        }
        config.vocab_size = source.vocab.len();
        let mut out = ModelState::init(config, source.vocab.clone(), seed)?;
        for (spec, dst) in out.layout.specs.iter().zip(out.tensors.iter_mut()) {
            if spec.group != ParamGroup::Backbone {
                continue;
            }
            let src = source
                .tensor(&spec.name)
                .ok_or_else(|| Error::Config(format!("backbone tensor `{}` missing", spec.name)))?;
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(out)
    }

    /// Copies parameter values (not flags or grads) from `other`.
    pub fn copy_values_from(&mut self, other: &ModelState<T>) {
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::tiny_state;

    #[test]
    fn names_are_unique_and_groups_partition() {
        let s: ModelState = tiny_state(1);
        let mut names: Vec<&str> = s.layout().specs().iter().map(|p| p.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
        let total: usize = s.tensors().iter().map(|t| t.numel()).sum();
        assert_eq!(s.trainable_count() + s.frozen_count(), total);
        for (spec, t) in s.named() {
            assert_eq!(t.requires_grad(), spec.group != ParamGroup::Backbone, "{}", spec.name);
        }
    }

    #[test]
    fn init_is_seeded() {
        let a: ModelState = tiny_state(3);
        let b: ModelState = tiny_state(3);
        let c: ModelState = tiny_state(4);
        assert_eq!(a.tensors(), b.tensors());
        assert_ne!(a.tensors(), c.tensors());
    }

    #[test]
    fn rebase_keeps_backbone_and_reinitializes_the_rest() {
        let src: ModelState = tiny_state(3);
        let cfg = ModelConfig {
            prefix_len: 3,
            hidden: 7,
            ..src.config.clone()
        };
        let out = ModelState::with_backbone_from(cfg, &src, 9).unwrap();
        assert_eq!(out.config.prefix_len, 3);
        for (spec, t) in out.named() {
            if spec.group == ParamGroup::Backbone {
                assert_eq!(t.data(), src.tensor(&spec.name).unwrap().data(), "{}", spec.name);
                assert!(!t.requires_grad());
            } else {
                assert!(t.requires_grad());
            }
        }
        let wider = ModelConfig {
            d_model: 16,
            ..src.config.clone()
        };
        assert!(ModelState::with_backbone_from(wider, &src, 9).is_err());
    }
}
