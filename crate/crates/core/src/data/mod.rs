//! Corpora, vocabularies, the synthetic 1-to-n corpus and checkpoints.

use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod corpus;
pub mod synthetic;
pub mod vocab;

pub use checkpoint::{Checkpoint, CheckpointError, OptimizerState, FORMAT_VERSION};
pub use corpus::{check_disjoint, load_corpus, parse_corpus, tokenize, Corpus, LoadSummary, Pair};
pub use synthetic::{gen_synthetic, SyntheticSplits, TOPICS};
pub use vocab::{Vocab, BOS, EOS, NUM_SPECIALS, PAD, UNK};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Contract(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
