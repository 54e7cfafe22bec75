//! JSON artifacts: prepared datasets, fold files and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use atdkt_core::data::{FilterStats, FoldAssignment, InteractionSequence, Vocab};
use atdkt_core::model::{AtDkt, ModelConfig, Weights};
use atdkt_core::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const DATASET_FILE: &str = "dataset.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

/// Pretty JSON with a trailing newline. Identical values give identical
/// bytes.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).with_context(|| format!("cannot write {}", path.display()))
}

/// Output of `prepare`: KC-level chunks ready for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedData {
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: Vocab,
    pub raw_interactions: usize,
    pub students: usize,
    pub avg_kcs_per_question: Option<f64>,
    pub stats: FilterStats,
    pub sequences: Vec<InteractionSequence>,
}

impl PreparedData {
    pub fn expanded_steps(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

/// Fold files map the fold index to its student ids.
pub fn folds_to_json(folds: &FoldAssignment) -> BTreeMap<String, Vec<String>> {
    folds
        .folds
        .iter()
        .enumerate()
        .map(|(i, ids)| (i.to_string(), ids.clone()))
        .collect()
}

pub fn folds_from_json(map: BTreeMap<String, Vec<String>>) -> Result<FoldAssignment> {
    let mut indexed = Vec::with_capacity(map.len());
    for (k, ids) in map {
        let i: usize = k
            .parse()
            .with_context(|| format!("fold key `{k}` is not an index"))?;
        indexed.push((i, ids));
    }
    indexed.sort_by_key(|(i, _)| *i);
    for (want, (got, _)) in indexed.iter().enumerate() {
        if want != *got {
            bail!("fold indices must be 0..k, missing {want}");
        }
    }
    Ok(FoldAssignment {
        folds: indexed.into_iter().map(|(_, ids)| ids).collect(),
    })
}

pub fn save_folds(path: &Path, folds: &FoldAssignment) -> Result<()> {
    write_json(path, &folds_to_json(folds))
}

pub fn load_folds(path: &Path) -> Result<FoldAssignment> {
    folds_from_json(read_json(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    params: Vec<NamedArray>,
}

pub fn checkpoint_json(model: &AtDkt) -> Result<String> {
    let params = model
        .params
        .entries()
        .into_iter()
        .map(|(name, t)| NamedArray {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    to_json(&Checkpoint {
        config: model.config.clone(),
        params,
    })
}

pub fn save_checkpoint(path: &Path, model: &AtDkt) -> Result<()> {
    fs::write(path, checkpoint_json(model)?)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Loads a checkpoint, rejecting arrays whose names or shapes disagree
/// with the stored configuration.
pub fn load_checkpoint(path: &Path) -> Result<AtDkt> {
    let ck: Checkpoint = read_json(path)?;
    let named = ck
        .params
        .into_iter()
        .map(|a| Ok((a.name, Tensor::new(&a.shape, a.data)?)))
        .collect::<Result<Vec<_>>>()?;
    let params = Weights::from_named(&ck.config, named)?;
    Ok(AtDkt::from_parts(ck.config, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut c = ModelConfig::new(8, 3, 5);
        c.heads = 2;
        let m = AtDkt::new(c, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        save_checkpoint(&p, &m).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let mut c = ModelConfig::new(8, 3, 5);
        c.heads = 2;
        let m = AtDkt::new(c, 4).unwrap();
        let text = checkpoint_json(&m).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["config"]["num_kcs"] = 4.into();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        fs::write(&p, v.to_string()).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn fold_file_round_trip() {
        let folds = FoldAssignment {
            folds: (0..12).map(|i| vec![format!("s{i}")]).collect(),
        };
        let map = folds_to_json(&folds);
        assert_eq!(folds_from_json(map.clone()).unwrap(), folds);
        let mut gap = map;
        gap.remove("3");
        assert!(folds_from_json(gap).is_err());
    }
}
