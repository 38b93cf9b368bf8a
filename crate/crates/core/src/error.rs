use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{op}: input has {input_channels} channels but kernel expects {kernel_channels} (kernel shape {kernel_shape})")]
    ChannelMismatch {
        op: &'static str,
        input_channels: usize,
        kernel_channels: usize,
        kernel_shape: String,
    },

    #[error("tensor data length {got} does not match shape {shape} (expected {expected})")]
    DataLength {
        shape: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {what}")]
    InvalidArgument { op: &'static str, what: String },

    #[error("batch norm: per-channel vector length {got} does not match {channels} channels")]
    BatchNormChannels { channels: usize, got: usize },

    #[error("batch norm: training statistics are undefined for a single element per channel (N*H*W = 1)")]
    BatchNormDegenerate,

    #[error("model input {shape}: spatial dims must be multiples of 8 and at least 16")]
    BadInputSize { shape: String },

    #[error("no retained forward pass: run a training-mode forward before backward")]
    NoRetainedForward,

    #[error("missing parameter `{0}` in store")]
    MissingParam(String),

    #[error("missing gradient for learnable parameter `{0}`")]
    MissingGradient(String),

    #[error("checkpoint {path}: bad magic bytes (not a checkpoint file)")]
    CheckpointBadMagic { path: PathBuf },

    #[error("checkpoint {path}: unsupported schema version {version}")]
    CheckpointVersion { path: PathBuf, version: u32 },

    #[error("checkpoint {path}: truncated or corrupt ({detail})")]
    CheckpointTruncated { path: PathBuf, detail: String },

    #[error("checkpoint does not match the model graph: {detail}")]
    CheckpointGraphMismatch { detail: String },

    #[error("{path}: failed to decode image: {detail}")]
    ImageDecode { path: PathBuf, detail: String },

    #[error("{path}: unsupported bit depth (expected 8-bit samples, got {format})")]
    ImageBitDepth { path: PathBuf, format: String },

    #[error("image {image_dims} and mask {mask_dims} disagree on dimensions ({image} / {mask})")]
    ImageMaskDims {
        image: PathBuf,
        mask: PathBuf,
        image_dims: String,
        mask_dims: String,
    },

    #[error("source image `{source_id}` is {width}x{height}, smaller than the {tile} tile size")]
    ImageTooSmall {
        source_id: String,
        width: usize,
        height: usize,
        tile: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("manifest {path} line {line}: expected `image<TAB>mask`, got `{content}`")]
    BadManifestLine {
        path: PathBuf,
        line: usize,
        content: String,
    },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}: training diverged")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("tile grid expects {expected} tiles, got {got}")]
    TileCountMismatch { expected: usize, got: usize },

    #[error("image {height}x{width} is smaller than the {tile} tile size")]
    ImageSmallerThanTile {
        height: usize,
        width: usize,
        tile: usize,
    },

    #[error("PR curve has no points")]
    EmptyCurve,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
