//! Retrieval-augmented instruction corpora: loading, validation, domain
//! mixing, retrieval selection, and optimizer splits.
//!
//! The on-disk format is one JSON object per line (UTF-8, LF), schema
//! version `"1"`:
//!
//! ```json
//! {"id": "q1", "dataset": "nq", "domain": "open_qa",
//!  "instruction": "...", "gold_response": "...",
//!  "retrievals": [{"doc_id": "d1", "text": "...", "source": "wiki", "score": 1.25}]}
//! ```
//!
//! Unknown fields are preserved opaquely and round-trip through
//! [`write_corpus`] unchanged.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeds;

/// Schema version understood by [`load_corpus`].
pub const SCHEMA_VERSION: &str = "1";

/// One retrieved passage attached to an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub doc_id: String,
    pub text: String,
    #[serde(rename = "source")]
    pub source_tag: String,
    /// Retriever relevance score; higher is more relevant. Finite by
    /// construction (validated at load).
    #[serde(rename = "score")]
    pub retriever_score: f64,
}

/// Task domain of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Dialogue,
    OpenQa,
    ReadingComprehension,
    Summarization,
    Reasoning,
}

/// One instruction with its gold response and attached retrievals.
///
/// `retrievals` may be empty: non-RAG instances are accepted and flow
/// through no-retrieval candidate generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    #[serde(rename = "dataset")]
    pub dataset_tag: String,
    #[serde(rename = "domain")]
    pub domain_tag: Domain,
    pub instruction: String,
    pub gold_response: String,
    #[serde(default)]
    pub retrievals: Vec<Retrieval>,
    /// Fields outside the documented schema, preserved as-is.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Where a corpus came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub schema_version: String,
}

/// An ordered collection of instances with pairwise-distinct ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Instances indexed by id.
    pub fn by_id(&self) -> BTreeMap<&str, &Instance> {
        self.instances.iter().map(|i| (i.id.as_str(), i)).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported schema version {requested:?} (supported: {SCHEMA_VERSION:?})")]
    UnsupportedSchema { requested: String },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid record: {message}")]
    Invalid { line: usize, message: String },
    #[error("line {line}: duplicate instance id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("{pool} pool has {available} instances but {needed} are required")]
    Capacity {
        pool: String,
        needed: usize,
        available: usize,
    },
    #[error("dialogue_fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
}

fn validate_instance(inst: &Instance, line: usize) -> Result<(), CorpusError> {
    let invalid = |message: String| CorpusError::Invalid { line, message };
    if inst.id.is_empty() {
        return Err(invalid("empty id".into()));
    }
    if inst.instruction.is_empty() {
        return Err(invalid("empty instruction".into()));
    }
    if inst.gold_response.is_empty() {
        return Err(invalid("empty gold_response".into()));
    }
    for (k, r) in inst.retrievals.iter().enumerate() {
        if r.text.is_empty() {
            return Err(invalid(format!("retrieval {k} has empty text")));
        }
        if !r.retriever_score.is_finite() {
            return Err(invalid(format!(
                "retrieval {k} has non-finite score {}",
                r.retriever_score
            )));
        }
    }
    Ok(())
}

/// Load and validate a JSON-lines corpus, preserving file order.
pub fn load_corpus(path: &Path, schema_version: &str) -> Result<Corpus, CorpusError> {
    if schema_version != SCHEMA_VERSION {
        return Err(CorpusError::UnsupportedSchema {
            requested: schema_version.to_string(),
        });
    }
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);

    let mut instances = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        let inst: Instance = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_instance(&inst, line_no)?;
        if !seen.insert(inst.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: inst.id,
            });
        }
        instances.push(inst);
    }
    Ok(Corpus {
        instances,
        provenance: Provenance {
            source: path.display().to_string(),
            schema_version: schema_version.to_string(),
        },
    })
}

/// Serialize a corpus back to the JSON-lines format read by [`load_corpus`].
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for inst in &corpus.instances {
        serde_json::to_writer(&mut out, inst).expect("instance serialization is infallible");
        out.push(b'\n');
    }
    let mut file = File::create(path).map_err(io_err)?;
    file.write_all(&out).map_err(io_err)
}

/// Draw `k` indices from `0..pool_len` without replacement (partial
/// Fisher-Yates; deterministic for a fixed RNG state).
fn sample_indices<R: Rng>(rng: &mut R, pool_len: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= pool_len);
    let mut idx: Vec<usize> = (0..pool_len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..pool_len);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Number of dialogue instances in a mixed corpus of `total`: round-half-up
/// of `dialogue_fraction * total`.
pub fn dialogue_count(dialogue_fraction: f64, total: usize) -> usize {
    (dialogue_fraction * total as f64 + 0.5).floor() as usize
}

/// Compose a corpus of exactly `total` instances: a dialogue share sampled
/// without replacement from dialogue instances, the remainder sampled
/// uniformly without replacement from all other domains. Deterministic for
/// a fixed seed.
pub fn mix_domains(
    corpus: &Corpus,
    dialogue_fraction: f64,
    total: usize,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if !(0.0..=1.0).contains(&dialogue_fraction) || dialogue_fraction.is_nan() {
        return Err(CorpusError::InvalidFraction(dialogue_fraction));
    }
    let n_dialogue = dialogue_count(dialogue_fraction, total);
    let n_other = total - n_dialogue.min(total);

    let dialogue_pool: Vec<usize> = (0..corpus.instances.len())
        .filter(|&i| corpus.instances[i].domain_tag == Domain::Dialogue)
        .collect();
    let other_pool: Vec<usize> = (0..corpus.instances.len())
        .filter(|&i| corpus.instances[i].domain_tag != Domain::Dialogue)
        .collect();

    if dialogue_pool.len() < n_dialogue {
        return Err(CorpusError::Capacity {
            pool: "dialogue".into(),
            needed: n_dialogue,
            available: dialogue_pool.len(),
        });
    }
    if other_pool.len() < n_other {
        return Err(CorpusError::Capacity {
            pool: "non-dialogue".into(),
            needed: n_other,
            available: other_pool.len(),
        });
    }

    let mut rng_d = seeds::channel_rng(seed, "mix:dialogue");
    let mut rng_o = seeds::channel_rng(seed, "mix:other");
    let mut picked: Vec<usize> = sample_indices(&mut rng_d, dialogue_pool.len(), n_dialogue)
        .into_iter()
        .map(|i| dialogue_pool[i])
        .collect();
    picked.extend(
        sample_indices(&mut rng_o, other_pool.len(), n_other)
            .into_iter()
            .map(|i| other_pool[i]),
    );

    Ok(Corpus {
        instances: picked
            .into_iter()
            .map(|i| corpus.instances[i].clone())
            .collect(),
        provenance: Provenance {
            source: format!(
                "mix(source={}, dialogue_fraction={dialogue_fraction}, total={total}, seed={seed})",
                corpus.provenance.source
            ),
            schema_version: corpus.provenance.schema_version.clone(),
        },
    })
}

/// The `min(n, available)` retrievals with the highest scores, sorted by
/// score descending; ties broken by original list position (earlier wins).
///
/// The result for `n` is always a prefix of the result for any `n' >= n`.
pub fn select_top_retrievals(instance: &Instance, n: usize) -> Vec<&Retrieval> {
    let mut order: Vec<usize> = (0..instance.retrievals.len()).collect();
    order.sort_by(|&a, &b| {
        instance.retrievals[b]
            .retriever_score
            .total_cmp(&instance.retrievals[a].retriever_score)
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(n)
        .map(|i| &instance.retrievals[i])
        .collect()
}

/// Disjoint deterministic train/validation slices for the prompt optimizer.
pub fn split_for_optimizer(
    corpus: &Corpus,
    train_size: usize,
    validation_size: usize,
    seed: u64,
) -> Result<(Vec<Instance>, Vec<Instance>), CorpusError> {
    let needed = train_size + validation_size;
    if needed > corpus.instances.len() {
        return Err(CorpusError::Capacity {
            pool: "corpus".into(),
            needed,
            available: corpus.instances.len(),
        });
    }
    let mut rng = seeds::channel_rng(seed, "split");
    let picked = sample_indices(&mut rng, corpus.instances.len(), needed);
    let train = picked[..train_size]
        .iter()
        .map(|&i| corpus.instances[i].clone())
        .collect();
    let validation = picked[train_size..]
        .iter()
        .map(|&i| corpus.instances[i].clone())
        .collect();
    Ok((train, validation))
}
