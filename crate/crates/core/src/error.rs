use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty shape")]
    EmptyShape,
    #[error("tensors must have 1 to 3 axes, got {0}")]
    Rank(usize),
    #[error("data length {len} does not match shape product {expected}")]
    DataLength { len: usize, expected: usize },
    #[error("scale must be positive and finite, got {0}")]
    NonPositiveScale(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dtype mismatch: {0}")]
    DTypeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("head count not divisible: {heads} heads over {workers} workers")]
    HeadsNotDivisible { heads: usize, workers: usize },
    #[error("expected {expected} chunks, got {got}")]
    ChunkCount { expected: usize, got: usize },
    #[error("no such worker {0}")]
    NoSuchWorker(usize),
    #[error("timed out waiting for worker {src} (tag {tag})")]
    Timeout { src: usize, tag: u64 },
    #[error("cluster shut down while waiting for worker {src}")]
    Shutdown { src: usize },
    #[error("inconsistent shard metadata: {0}")]
    ShardMetadata(String),

    #[error("missing saved activation {tensor} for layer {layer}")]
    MissingActivation { layer: usize, tensor: &'static str },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
