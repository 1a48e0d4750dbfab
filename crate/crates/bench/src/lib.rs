//! Shared fixtures for the criterion benches.

use mpath_core::model::{ModelConfig, ModelState, SampleInput};
use mpath_core::reports::{synthesize_corpus, CorpusConfig, PairedSample};
use mpath_core::tokenizer::Vocab;

/// A default-sized model over a seeded synthetic corpus of `n` samples.
pub fn default_model(n: usize) -> (ModelState, Vec<PairedSample>) {
    let corpus = CorpusConfig {
        n_samples: n,
        seed: 1,
        ..CorpusConfig::default()
    };
    let samples = synthesize_corpus(&corpus).expect("valid corpus config");
    let mut texts: Vec<&str> = samples.iter().map(|s| s.report_text.as_str()).collect();
    texts.push("Pathology report:");
    let vocab = Vocab::build(&texts, 1).expect("non-empty corpus");
    let cfg = ModelConfig {
        d_v: corpus.d_v,
        vocab_size: vocab.len(),
        n_sample_types: corpus.taxonomy.sample_types().len(),
        n_findings: corpus.taxonomy.findings().len(),
        ..ModelConfig::default()
    };
    let state = ModelState::init(cfg, vocab, 1).expect("valid model config");
    (state, samples)
}

pub fn inputs<'s>(samples: &'s [PairedSample], prompt: &'s str) -> Vec<SampleInput<'s>> {
    samples
        .iter()
        .map(|s| SampleInput {
            features: &s.features,
            prompt,
            report: &s.report_text,
            organ: s.labels.organ.index(),
            sample_type: s.labels.sample_type,
            findings: &s.labels.findings,
        })
        .collect()
}
