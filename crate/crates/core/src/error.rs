//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("unknown {kind} id {id}")]
    Lookup { kind: &'static str, id: u32 },

    /// Raster degeneracy: a pixel whose 8-neighborhood carries four or more
    /// distinct grain indices (a quadruple junction).
    #[error("degeneracy error: pixel ({row}, {col}) has {count} distinct neighbor indices")]
    Degeneracy { row: u32, col: u32, count: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("reconstruction error: grain {grain}: {reason}")]
    Reconstruction { grain: u32, reason: String },

    /// A standalone edge flip would reduce a 3-junction grain to two sides.
    /// Such flips are only legal inside an elimination cascade.
    #[error("guarded-flip error: losing grain {grain} has 3 junctions; flip ({j1}, {j2}) must run inside its elimination cascade")]
    GuardedFlip { grain: u32, j1: u32, j2: u32 },

    #[error("precondition error: {0}")]
    Precondition(String),

    #[error("namespace error: {0}")]
    Namespace(String),

    #[error("shape error: tensor {name}: expected {expected:?}, got {got:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("load error: {0}")]
    Load(String),

    #[error("tag error: expected a {expected} bundle, got {got}")]
    Tag { expected: String, got: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate-collapse error: {0}")]
    DegenerateCollapse(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
