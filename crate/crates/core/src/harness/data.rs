use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedders;
use crate::error::{Error, Result};
use crate::text::{EmbeddedPost, TokenizedPost};

/// One JSONL line: `{"id": ..., "text": ..., "label": ...}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: Option<usize>,
}

pub fn parse_dataset(text: &str, origin: &Path, classes: usize) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if let Some(l) = rec.label {
            if l >= classes {
                return Err(Error::Validation(format!(
                    "{}:{}: label {l} is outside 0..{classes}",
                    origin.display(),
                    i + 1
                )));
            }
        }
        if rec.text.trim().is_empty() {
            return Err(err("empty text".into()));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, classes: usize) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    parse_dataset(&text, path, classes)
}

/// Record indices per partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const SPLIT_RATIOS: (f64, f64) = (0.70, 0.15);

/// Per-label seeded shuffle, then 70/15/15 within each label. Unlabelled
/// records form their own stratum. Each partition is returned in ascending
/// index order.
pub fn stratified_split(records: &[DatasetRecord], seed: u64) -> Split {
    let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(r.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut idx) in strata {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((n as f64 * SPLIT_RATIOS.0).round() as usize).clamp(1, n);
        let n_val = ((n as f64 * SPLIT_RATIOS.1).round() as usize).min(n - n_train);
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Tokenizes and embeds every record.
pub fn embed_records(
    records: &[DatasetRecord],
    embedders: &Embedders,
    max_sentences: usize,
    max_tokens: usize,
) -> Result<Vec<EmbeddedPost>> {
    records
        .iter()
        .map(|r| {
            let t = TokenizedPost::new(r.id.clone(), &r.text, r.label, max_sentences, max_tokens)?;
            EmbeddedPost::from_tokenized(&t, embedders)
        })
        .collect()
}
