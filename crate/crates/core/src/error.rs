use thiserror::Error;

/// Errors raised anywhere in the engine, grouped so the CLI can map them to
/// exit codes (config 2, data 3, numeric 4).
#[derive(Debug, Error)]
pub enum MuseError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("concat along axis {axis}: tensor {index} has shape {shape:?}, expected {expected:?} off-axis")]
    ConcatShape {
        axis: usize,
        index: usize,
        shape: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("registry error: unknown {kind} operator `{name}`")]
    Registry { kind: &'static str, name: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<MuseError>,
    },
}

pub type Result<T> = std::result::Result<T, MuseError>;

impl MuseError {
    pub fn exit_code(&self) -> i32 {
        match self {
            MuseError::Config(_) | MuseError::Registry { .. } => 2,
            MuseError::Data(_) | MuseError::Parse { .. } | MuseError::Io(_) => 3,
            MuseError::Shape { .. }
            | MuseError::ConcatShape { .. }
            | MuseError::Domain(_)
            | MuseError::Contract(_)
            | MuseError::Numeric(_) => 4,
            MuseError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn at_stage(self, stage: &'static str) -> MuseError {
        MuseError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
