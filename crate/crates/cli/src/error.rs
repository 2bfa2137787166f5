use std::path::{Path, PathBuf};

use bvv_core::binfmt::FormatError;
use bvv_core::embedmat::EmbedError;
use bvv_core::fontstore::FontError;
use bvv_core::glyphrender::RenderError;
use bvv_core::nanoformer::NanoError;
use bvv_core::pca::PcaError;
use bvv_core::univoc::VocabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("font: {0}")]
    Font(#[from] FontError),
    #[error("vocabulary: {0}")]
    Vocab(#[from] VocabError),
    #[error("render: {0}")]
    Render(#[from] RenderError),
    #[error("pca: {0}")]
    Pca(#[from] PcaError),
    #[error("embeddings: {0}")]
    Embed(#[from] EmbedError),
    #[error("model: {0}")]
    Model(#[from] NanoError),
    #[error("{0}")]
    Format(#[from] FormatError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("self-check failed: {0}")]
    SelfCheck(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code. File-format failures keep their format codes.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::SelfCheck(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Font(_) => 4,
            CliError::Vocab(_) => 5,
            CliError::Render(_) | CliError::Pca(_) => 6,
            CliError::Embed(EmbedError::Format(f)) => f.code(),
            CliError::Embed(_) => 6,
            CliError::Model(NanoError::Format(f)) => f.code(),
            CliError::Model(_) => 7,
            CliError::Format(f) => f.code(),
            CliError::Io { .. } | CliError::Csv(_) => 10,
        }
    }
}
