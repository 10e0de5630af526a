use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{Dataset, PatientRecord};

/// Features whose training-split standard deviation falls below this are mapped to 0.
pub const MIN_STD: f64 = 1e-12;

/// Per-feature z-score statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl Standardizer {
    /// Population mean and standard deviation of every feature over `train`.
    pub fn fit(records: &[PatientRecord], train: &[usize]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::contract("standardize: empty training split"));
        }
        let sizes = records[train[0]].modality_sizes();
        let n = train.len() as f64;
        let mut mean: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut std = mean.clone();
        for &i in train {
            let r = records
                .get(i)
                .ok_or_else(|| Error::contract(format!("standardize: index {i} out of range")))?;
            for (acc, m) in mean.iter_mut().zip(&r.modalities) {
                for (a, v) in acc.iter_mut().zip(m) {
                    *a += v;
                }
            }
        }
        mean.iter_mut().flatten().for_each(|a| *a /= n);
        for &i in train {
            for ((acc, mu), m) in std.iter_mut().zip(&mean).zip(&records[i].modalities) {
                for ((a, u), v) in acc.iter_mut().zip(mu).zip(m) {
                    *a += (v - u) * (v - u);
                }
            }
        }
        std.iter_mut().flatten().for_each(|a| *a = (*a / n).sqrt());
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, record: &PatientRecord) -> PatientRecord {
        let modalities = record
            .modalities
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(m, (mu, sd))| {
                m.iter()
                    .zip(mu.iter().zip(sd))
                    .map(|(&v, (&u, &s))| if s < MIN_STD { 0.0 } else { (v - u) / s })
                    .collect()
            })
            .collect();
        PatientRecord {
            id: record.id.clone(),
            modalities,
            label: record.label,
        }
    }
}

/// Z-scores every record with statistics from `train` only.
pub fn standardize(dataset: &Dataset, train: &[usize]) -> Result<(Dataset, Standardizer)> {
    let st = Standardizer::fit(&dataset.records, train)?;
    let records = dataset.records.iter().map(|r| st.apply(r)).collect();
    let out = Dataset {
        name: dataset.name.clone(),
        modality_names: dataset.modality_names.clone(),
        records,
        source_digest: dataset.source_digest.clone(),
    };
    Ok((out, st))
}
