//! Seeded finite-difference suite over every primitive and the full model.

use rand::Rng;

use super::grad_check_sampled;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{sample_loss, AuxWeights, Bound, ModelConfig, ModelState, PrefixSide, SampleInput, TruncationCounter};
use crate::rng::{normal, seeded, Rng64};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

/// Ids of every primitive the graph records.
pub const PRIMITIVE_IDS: [&str; 18] = [
    "matmul",
    "matmul_bt",
    "add",
    "add_row",
    "mul",
    "scale",
    "relu",
    "softmax",
    "layer_norm",
    "embedding",
    "reshape",
    "concat_rows",
    "slice_cols",
    "concat_cols",
    "mean",
    "sum",
    "cross_entropy",
    "bce_with_logits",
];

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub seed: u64,
    /// Largest per-tensor relative error in the case.
    pub max_rel_err: f64,
    pub passed: bool,
}

type LossFn = Box<dyn for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<Tensor<f64>>,
    f: LossFn,
    probes: usize,
}

fn randn(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng)).collect()).expect("shape matches data")
}

/// Values bounded away from zero, for inputs to kinked functions.
fn away_from_zero(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Scalar `Σ y ⊙ w` for a fixed random `w`, so every output element
/// carries its own weight.
fn project(g: &mut Graph<'_, f64>, y: Var, w: &[f64]) -> Result<Var> {
    let c = g.constant(Tensor::new(g.shape(y).to_vec(), w.to_vec())?);
    let m = g.mul(y, c)?;
    g.sum(m)
}

fn weights(rng: &mut Rng64, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn dim(rng: &mut Rng64) -> usize {
    rng.random_range(2..=4)
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = seeded(seed);
    let r = &mut rng;
    let mut out: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, $params:expr, $f:expr) => {
            out.push(Case {
                name: $name,
                params: $params,
                f: Box::new($f),
                probes: usize::MAX,
            })
        };
    }

    let (m, k, n) = (dim(r), dim(r), dim(r));
    let w = weights(r, m * n);
    case!("matmul", vec![randn(r, &[m, k]), randn(r, &[k, n])], move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, &w)
    });

    let (m, k, n) = (dim(r), dim(r), dim(r));
    let w = weights(r, m * n);
    case!("matmul_bt", vec![randn(r, &[m, k]), randn(r, &[n, k])], move |g, v| {
        let y = g.matmul_bt(v[0], v[1])?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r));
    let w = weights(r, m * n);
    case!("add", vec![randn(r, &[m, n]), randn(r, &[m, n])], move |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r));
    let w = weights(r, m * n);
    case!("add_row", vec![randn(r, &[m, n]), randn(r, &[n])], move |g, v| {
        let y = g.add_row(v[0], v[1])?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r));
    let w = weights(r, m * n);
    case!("mul", vec![randn(r, &[m, n]), randn(r, &[m, n])], move |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r));
    let w = weights(r, m * n);
    let c = normal(r);
    case!("scale", vec![randn(r, &[m, n])], move |g, v| {
        let y = g.scale(v[0], c)?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r));
    let w = weights(r, m * n);
    case!("relu", vec![away_from_zero(r, &[m, n])], move |g, v| {
        let y = g.relu(v[0])?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r) + 1);
    let w = weights(r, m * n);
    case!("softmax", vec![randn(r, &[m, n])], move |g, v| {
        let y = g.softmax(v[0])?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r) + 2);
    let w = weights(r, m * n);
    case!(
        "layer_norm",
        vec![randn(r, &[m, n]), randn(r, &[n]), randn(r, &[n])],
        move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, &w)
        }
    );

    let (vocab, d) = (5, dim(r));
    let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..vocab)).collect();
    let w = weights(r, ids.len() * d);
    case!("embedding", vec![randn(r, &[vocab, d])], move |g, v| {
        let y = g.embedding(v[0], &ids)?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r));
    let w = weights(r, m * n);
    case!("reshape", vec![randn(r, &[m, n])], move |g, v| {
        let y = g.reshape(v[0], &[n, m])?;
        project(g, y, &w)
    });

    let (m1, m2, n) = (dim(r), dim(r), dim(r));
    let w = weights(r, (m1 + m2) * n);
    case!("concat_rows", vec![randn(r, &[m1, n]), randn(r, &[m2, n])], move |g, v| {
        let y = g.concat_rows(&[v[0], v[1]])?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r) + 2);
    let w = weights(r, m * (n - 2));
    case!("slice_cols", vec![randn(r, &[m, n])], move |g, v| {
        let y = g.slice_cols(v[0], 1, n - 2)?;
        project(g, y, &w)
    });

    let (m, n1, n2) = (dim(r), dim(r), dim(r));
    let w = weights(r, m * (n1 + n2));
    case!("concat_cols", vec![randn(r, &[m, n1]), randn(r, &[m, n2])], move |g, v| {
        let y = g.concat_cols(&[v[0], v[1]])?;
        project(g, y, &w)
    });

    let (m, n) = (dim(r), dim(r));
    let w2 = weights(r, m * n);
    case!("mean", vec![randn(r, &[m, n])], move |g, v| {
        // Square first so the gradient depends on the input.
        let sq = g.mul(v[0], v[0])?;
        let c = g.constant(Tensor::new(vec![m, n], w2.clone())?);
        let y = g.mul(sq, c)?;
        g.mean(y)
    });

    let (m, n) = (dim(r), dim(r));
    let w = weights(r, m * n);
    case!("sum", vec![randn(r, &[m, n])], move |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let c = g.constant(Tensor::new(vec![m, n], w.clone())?);
        let y = g.mul(sq, c)?;
        g.sum(y)
    });

    let (m, classes) = (dim(r) + 1, dim(r) + 1);
    let mut targets: Vec<Option<usize>> = (0..m).map(|_| Some(r.random_range(0..classes))).collect();
    targets[r.random_range(0..m)] = None;
    case!("cross_entropy", vec![randn(r, &[m, classes])], move |g, v| {
        g.cross_entropy(v[0], &targets)
    });

    let (m, n) = (dim(r), dim(r));
    let targets: Vec<f64> = (0..m * n).map(|_| r.random::<f64>()).collect();
    case!("bce_with_logits", vec![randn(r, &[m, n])], move |g, v| {
        g.bce_with_logits(v[0], &targets)
    });

    let (m, k, n) = (dim(r), dim(r), dim(r));
    let w = weights(r, m * n);
    case!(
        "linear",
        vec![randn(r, &[m, k]), randn(r, &[n, k]), randn(r, &[n])],
        move |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, &w)
        }
    );

    out
}

const MODEL_TEXTS: [&str; 4] = [
    "Lung, biopsy; Adenocarcinoma",
    "Colon, biopsy; Tubular adenoma",
    "Prostate, needle biopsy; Acinar adenocarcinoma, Gleason score 7",
    "Stomach, biopsy; Chronic gastritis",
];

/// Prompt encoder, auxiliary heads and backbone together on one sample.
fn model_case(seed: u64, side: PrefixSide) -> Result<Case> {
    let mut texts: Vec<&str> = MODEL_TEXTS.to_vec();
    texts.push("Pathology report:");
    let vocab = Vocab::build(&texts, 1)?;
    let cfg = ModelConfig {
        d_v: 6,
        hidden: 5,
        prefix_len: 2,
        d_model: 8,
        enc_layers: 1,
        dec_layers: 1,
        n_heads: 2,
        ffn_dim: 12,
        vocab_size: vocab.len(),
        max_len: 16,
        prompt_dropout: 0.0,
        n_sample_types: 3,
        n_findings: 4,
        prefix_side: side,
        aux_weights: AuxWeights {
            organ: 0.3,
            sample: 0.2,
            finding: 0.5,
        },
        ..ModelConfig::default()
    };
    let state: ModelState<f64> = ModelState::init(cfg, vocab, seed)?;
    let mut rng = seeded(seed ^ 0x5eed);
    let raw: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let features: Vec<f32> = raw.iter().map(|x| (x / norm) as f32).collect();
    let report = MODEL_TEXTS[rng.random_range(0..MODEL_TEXTS.len())];
    let organ = rng.random_range(0..7);
    let sample_type = rng.random_range(0..3);
    let findings = vec![rng.random_range(0..4)];
    let cfg = state.config.clone();
    let layout = state.layout().clone();
    let vocab = state.vocab.clone();
    Ok(Case {
        name: match side {
            PrefixSide::Encoder => "model_encoder_prefix",
            PrefixSide::Decoder => "model_decoder_prefix",
        },
        params: state.tensors().to_vec(),
        probes: 6,
        f: Box::new(move |g, vars| {
            let net = Bound::from_vars(&cfg, &layout, vars)?;
            let input = SampleInput {
                features: &features,
                prompt: "Pathology report:",
                report,
                organ,
                sample_type,
                findings: &findings,
            };
            Ok(sample_loss(g, &net, &vocab, &input, &TruncationCounter::default())?.total)
        }),
    })
}

/// Runs every case once per seed with central differences (`eps`) and the
/// given relative tolerance. Primitive cases probe every element; model
/// cases probe a seeded sample of elements in every tensor.
pub fn gradient_suite(seeds: &[u64], eps: f64, tol: f64) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut cases = primitive_cases(seed);
        cases.push(model_case(seed, PrefixSide::Encoder)?);
        cases.push(model_case(seed, PrefixSide::Decoder)?);
        for c in cases {
            let report = grad_check_sampled(&c.params, eps, tol, c.probes, seed, &c.f)?;
            out.push(SuiteCase {
                name: c.name.to_string(),
                seed,
                max_rel_err: report.max_rel_err(),
                passed: report.passed(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_primitive_and_passes() {
        let names: Vec<&str> = primitive_cases(0).iter().map(|c| c.name).collect();
        for id in PRIMITIVE_IDS {
            assert!(names.contains(&id), "no case for {id}");
        }
        for c in gradient_suite(&[1], 1e-6, 1e-4).unwrap() {
            assert!(c.passed, "{} rel err {:.3e}", c.name, c.max_rel_err);
        }
    }
}
