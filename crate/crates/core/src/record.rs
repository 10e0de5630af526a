//! Patient records and in-memory datasets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One subject: `K` modality feature vectors plus a binary outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub modalities: Vec<Vec<f64>>,
    pub label: u8,
}

impl PatientRecord {
    pub fn modality_sizes(&self) -> Vec<usize> {
        self.modalities.iter().map(Vec::len).collect()
    }

    pub fn node_count(&self) -> usize {
        self.modalities.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub modality_names: Vec<String>,
    pub records: Vec<PatientRecord>,
    /// Digest of the manifest (or generator spec) the records came from.
    pub source_digest: String,
}

impl Dataset {
    /// Builds a dataset and checks the record invariants.
    pub fn new(
        name: impl Into<String>,
        modality_names: Vec<String>,
        records: Vec<PatientRecord>,
        source_digest: impl Into<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            modality_names,
            records,
            source_digest: source_digest.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn modality_sizes(&self) -> Vec<usize> {
        self.records.first().map(PatientRecord::modality_sizes).unwrap_or_default()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.records.first() else {
            return Ok(());
        };
        let sizes = first.modality_sizes();
        if sizes.is_empty() {
            return Err(Error::Dataset(format!("record {} has no modalities", first.id)));
        }
        if !self.modality_names.is_empty() && self.modality_names.len() != sizes.len() {
            return Err(Error::Dataset(format!(
                "{} modality names for {} modalities",
                self.modality_names.len(),
                sizes.len()
            )));
        }
        for r in &self.records {
            if r.modality_sizes() != sizes {
                return Err(Error::Dataset(format!(
                    "record {} has modality sizes {:?}, expected {:?}",
                    r.id,
                    r.modality_sizes(),
                    sizes
                )));
            }
            if r.label > 1 {
                return Err(Error::Dataset(format!("record {} has label {}", r.id, r.label)));
            }
            if let Some(v) = r.modalities.iter().flatten().find(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!("record {} has non-finite value {v}", r.id)));
            }
        }
        Ok(())
    }

    /// Content hash over names, ids, labels and exact value bits.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for n in &self.modality_names {
            h.update(n.as_bytes());
            h.update([0]);
        }
        for r in &self.records {
            h.update(r.id.as_bytes());
            h.update([0, r.label]);
            for m in &r.modalities {
                h.update((m.len() as u64).to_le_bytes());
                for v in m {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}
