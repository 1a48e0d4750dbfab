//! Synthetic paired (feature vector, report) corpora.
//!
//! Features are a fixed seeded random projection of the concatenated label
//! code (organ one-hot ⊕ sample-type one-hot ⊕ finding multi-hot), plus
//! optional Gaussian noise, L2-normalized. A prefix encoder can therefore
//! recover the labels from the features.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{render_report, Organ, StructuredReport, Taxonomy};
use crate::error::{Error, Result};
use crate::rng::{normal, stream, substream, Rng64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_samples: usize,
    pub d_v: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(skip)]
    pub taxonomy: Taxonomy,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_samples: 7385,
            d_v: 768,
            noise_sigma: 0.1,
            seed: 7,
            taxonomy: Taxonomy::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 10 {
            return Err(Error::Config(format!("n_samples must be at least 10, got {}", self.n_samples)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if self.d_v == 0 {
            return Err(Error::Config("d_v must be positive".into()));
        }
        Ok(())
    }
}

/// Supervision attached to each sample; findings are sorted global ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Labels {
    pub organ: Organ,
    pub sample_type: usize,
    pub findings: Vec<usize>,
}

impl Labels {
    pub fn to_report(&self, taxonomy: &Taxonomy) -> StructuredReport {
        StructuredReport {
            organ: self.organ,
            sample_type: taxonomy.sample_types()[self.sample_type].clone(),
            findings: self.findings.iter().map(|&f| taxonomy.findings()[f].clone()).collect(),
            note: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub features: Vec<f32>,
    pub report_text: String,
    pub labels: Labels,
    pub note: Option<String>,
}

/// The seeded label → feature map.
#[derive(Clone, Debug)]
pub struct FeatureProjector {
    d_v: usize,
    width: usize,
    n_samples_types: usize,
    // d_v × width, row-major
    matrix: Vec<f64>,
    noise_sigma: f64,
}

impl FeatureProjector {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let width = cfg.taxonomy.label_width();
        let mut rng = substream(cfg.seed, "feature-projection");
        let matrix = (0..cfg.d_v * width).map(|_| normal(&mut rng)).collect();
        FeatureProjector {
            d_v: cfg.d_v,
            width,
            n_samples_types: cfg.taxonomy.sample_types().len(),
            matrix,
            noise_sigma: cfg.noise_sigma,
        }
    }

    pub fn label_code(&self, labels: &Labels) -> Vec<f64> {
        let n_org = Organ::ALL.len();
        let mut code = vec![0.0; self.width];
        code[labels.organ.index()] = 1.0;
        code[n_org + labels.sample_type] = 1.0;
        for &f in &labels.findings {
            code[n_org + self.n_samples_types + f] = 1.0;
        }
        code
    }

    /// Noiseless, unnormalized image of a label code.
    pub fn prototype(&self, code: &[f64]) -> Vec<f64> {
        (0..self.d_v)
            .map(|r| {
                let row = &self.matrix[r * self.width..(r + 1) * self.width];
                row.iter().zip(code).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// Projects labels to a unit-norm feature vector; `noise` supplies the
    /// Gaussian draws when `noise_sigma > 0`.
    pub fn features(&self, labels: &Labels, noise: &mut Rng64) -> Vec<f32> {
        let mut v = self.prototype(&self.label_code(labels));
        if self.noise_sigma > 0.0 {
            for x in &mut v {
                *x += self.noise_sigma * normal(noise);
            }
        }
        l2_normalize(&v)
    }
}

fn l2_normalize(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Generates `cfg.n_samples` paired samples. Sample `i` depends only on
/// `(cfg, i)`.
pub fn synthesize_corpus(cfg: &CorpusConfig) -> Result<Vec<PairedSample>> {
    cfg.validate()?;
    let tax = &cfg.taxonomy;
    let projector = FeatureProjector::new(cfg);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut rng = stream(cfg.seed, i as u64);
        let organ = Organ::ALL[rng.random_range(0..Organ::ALL.len())];
        let entry = tax.entry(organ);
        let sample_name = &entry.sample_types[rng.random_range(0..entry.sample_types.len())];
        let k = rng.random_range(1..=entry.findings.len().min(3));
        let mut findings: Vec<usize> = sample(&mut rng, entry.findings.len(), k)
            .into_iter()
            .map(|j| tax.finding_id(&entry.findings[j]).expect("organ finding is in taxonomy"))
            .collect();
        findings.sort_unstable();
        let labels = Labels {
            organ,
            sample_type: tax.sample_type_id(sample_name).expect("organ sample type is in taxonomy"),
            findings,
        };
        let report_text = render_report(&labels.to_report(tax));
        let features = projector.features(&labels, &mut rng);
        out.push(PairedSample {
            id: format!("synth-{i:06}"),
            features,
            report_text,
            labels,
            note: None,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    id: String,
    features: Vec<f32>,
    report: String,
    organ: Organ,
    sample_type: String,
    findings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

pub fn write_corpus(path: &Path, samples: &[PairedSample], taxonomy: &Taxonomy) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let rec = CorpusRecord {
            id: s.id.clone(),
            features: s.features.clone(),
            report: s.report_text.clone(),
            organ: s.labels.organ,
            sample_type: taxonomy.sample_types()[s.labels.sample_type].clone(),
            findings: s.labels.findings.iter().map(|&f| taxonomy.findings()[f].clone()).collect(),
            note: s.note.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<PairedSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::InvalidInput(format!("{}:{}: {msg}", path.display(), lineno + 1));
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let sample_type = taxonomy
            .sample_type_id(&rec.sample_type)
            .ok_or_else(|| at(format!("unknown sample type `{}`", rec.sample_type)))?;
        let mut findings = rec
            .findings
            .iter()
            .map(|f| taxonomy.finding_id(f).ok_or_else(|| at(format!("unknown finding `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        findings.sort_unstable();
        out.push(PairedSample {
            id: rec.id,
            features: rec.features,
            report_text: rec.report,
            labels: Labels {
                organ: rec.organ,
                sample_type,
                findings,
            },
            note: rec.note,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reports::parse_report;

    fn small(n: usize, sigma: f64) -> CorpusConfig {
        CorpusConfig {
            n_samples: n,
            d_v: 768,
            noise_sigma: sigma,
            seed: 7,
            taxonomy: Taxonomy::default(),
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize_corpus(&small(50, 0.1)).unwrap();
        let b = synthesize_corpus(&small(50, 0.1)).unwrap();
        assert_eq!(a, b);
        let mut other = small(50, 0.1);
        other.seed = 8;
        assert_ne!(a, synthesize_corpus(&other).unwrap());
    }

    #[test]
    fn default_sized_corpus() {
        let mut cfg = small(7385, 0.1);
        cfg.d_v = 16;
        let corpus = synthesize_corpus(&cfg).unwrap();
        assert_eq!(corpus.len(), 7385);
        let mut counts = [0usize; 7];
        for s in &corpus {
            counts[s.labels.organ.index()] += 1;
        }
        for c in counts {
            let frac = c as f64 / corpus.len() as f64;
            assert!((frac - 1.0 / 7.0).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn zero_noise_matches_prototype() {
        let corpus = synthesize_corpus(&small(200, 0.0)).unwrap();
        for a in &corpus {
            for b in &corpus {
                if a.labels == b.labels {
                    assert_eq!(a.features, b.features);
                }
            }
        }
    }

    #[test]
    fn features_are_unit_norm() {
        for s in synthesize_corpus(&small(30, 0.1)).unwrap() {
            assert_eq!(s.features.len(), 768);
            let n: f64 = s.features.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{n}");
        }
    }

    #[test]
    fn organ_prototypes_are_distinct() {
        let cfg = small(10, 0.0);
        let p = FeatureProjector::new(&cfg);
        let protos: Vec<Vec<f64>> = Organ::ALL
            .iter()
            .map(|&o| {
                let mut code = vec![0.0; cfg.taxonomy.label_width()];
                code[o.index()] = 1.0;
                p.prototype(&code)
            })
            .collect();
        for i in 0..7 {
            for j in i + 1..7 {
                let dot: f64 = protos[i].iter().zip(&protos[j]).map(|(a, b)| a * b).sum();
                let na: f64 = protos[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = protos[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(dot / (na * nb) < 0.99);
            }
        }
    }

    #[test]
    fn report_text_is_canonical() {
        for s in synthesize_corpus(&small(100, 0.1)).unwrap() {
            let parsed = parse_report(&s.report_text).unwrap();
            assert_eq!(render_report(&parsed), s.report_text);
            assert_eq!(parsed.organ, s.labels.organ);
            assert!((1..=3).contains(&parsed.findings.len()));
        }
    }

    #[test]
    fn rejects_small_corpus() {
        assert!(synthesize_corpus(&small(5, 0.1)).is_err());
        assert!(synthesize_corpus(&small(50, -1.0)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = small(12, 0.1);
        let corpus = synthesize_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &corpus, &cfg.taxonomy).unwrap();
        let back = read_corpus(&path, &cfg.taxonomy).unwrap();
        assert_eq!(back, corpus);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), 12);
    }
}
