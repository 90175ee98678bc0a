use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A dataset file that could not be paired with its counterpart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnpairedFile {
    pub path: PathBuf,
    pub missing: &'static str,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("no samples: {0}")]
    NoSamples(String),

    #[error("empty region: {0}")]
    EmptyRegion(&'static str),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("unpaired dataset files: {}", fmt_unpaired(.0))]
    Unpaired(Vec<UnpairedFile>),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("I/O error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

fn fmt_unpaired(files: &[UnpairedFile]) -> String {
    files
        .iter()
        .map(|f| format!("{} (missing {})", f.path.display(), f.missing))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::NoSamples(_)
            | Error::EmptyRegion(_)
            | Error::UnknownStrategy { .. }
            | Error::Unpaired(_)
            | Error::Config(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Archive(_) => 3,
            Error::NonFiniteLoss { .. } => 4,
            Error::Tensor(_) => 1,
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}
