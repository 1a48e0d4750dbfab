use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Organ;
use crate::error::{Error, Result};

const DEFAULT_TAXONOMY: &str = include_str!("../../data/taxonomy.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganEntry {
    pub organ: Organ,
    pub sample_types: Vec<String>,
    pub findings: Vec<String>,
}

/// Organ, sample-type and finding vocabularies for corpus synthesis and the
/// auxiliary label heads. Sample types and findings get global ids in order
/// of first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    organs: Vec<OrganEntry>,
    sample_types: Vec<String>,
    findings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    organs: Vec<OrganEntry>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Taxonomy::from_json(DEFAULT_TAXONOMY).expect("shipped taxonomy is valid")
    }
}

impl Taxonomy {
    pub fn new(organs: Vec<OrganEntry>) -> Result<Self> {
        for organ in Organ::ALL {
            let entry = organs
                .iter()
                .find(|e| e.organ == organ)
                .ok_or_else(|| Error::Taxonomy(format!("no entry for organ `{organ}`")))?;
            if entry.sample_types.is_empty() {
                return Err(Error::Taxonomy(format!("organ `{organ}` has no sample types")));
            }
            if entry.findings.is_empty() {
                return Err(Error::Taxonomy(format!("organ `{organ}` has no findings")));
            }
        }
        if organs.len() != Organ::ALL.len() {
            return Err(Error::Taxonomy("each organ must appear exactly once".into()));
        }
        let mut organs = organs;
        organs.sort_by_key(|e| e.organ);
        let mut sample_types: Vec<String> = Vec::new();
        let mut findings: Vec<String> = Vec::new();
        for e in &organs {
            for s in &e.sample_types {
                if !sample_types.contains(s) {
                    sample_types.push(s.clone());
                }
            }
            for f in &e.findings {
                if !findings.contains(f) {
                    findings.push(f.clone());
                }
            }
        }
        Ok(Taxonomy {
            organs,
            sample_types,
            findings,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: TaxonomyFile = serde_json::from_str(s)?;
        Taxonomy::new(f.organs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Taxonomy::from_json(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TaxonomyFile {
            organs: self.organs.clone(),
        })?)
    }

    pub fn entry(&self, organ: Organ) -> &OrganEntry {
        &self.organs[organ.index()]
    }

    pub fn organs(&self) -> &[OrganEntry] {
        &self.organs
    }

    pub fn sample_types(&self) -> &[String] {
        &self.sample_types
    }

    pub fn findings(&self) -> &[String] {
        &self.findings
    }

    pub fn sample_type_id(&self, s: &str) -> Option<usize> {
        self.sample_types.iter().position(|x| x.eq_ignore_ascii_case(s))
    }

    pub fn finding_id(&self, f: &str) -> Option<usize> {
        self.findings.iter().position(|x| x.eq_ignore_ascii_case(f))
    }

    /// Size of the concatenated organ ⊕ sample-type ⊕ finding label code.
    pub fn label_width(&self) -> usize {
        Organ::ALL.len() + self.sample_types.len() + self.findings.len()
    }
}
