use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid ring: {0}")]
    Ring(String),

    #[error("descriptor cookie must be 16 bytes, got {0}")]
    CookieLength(usize),

    #[error("message {m} is not below the group order")]
    MessageRange { m: u64 },

    #[error("no discrete log of target within bound {bound}")]
    DlogNotFound { bound: u64 },

    #[error("invalid group parameters: {0}")]
    Group(String),

    #[error("commitment mismatch for party {party}")]
    CommitmentMismatch { party: u32 },

    #[error("shuffle proof rejected at round {round}: {reason}")]
    ShuffleRejected { round: usize, reason: String },

    #[error("malformed shuffle transcript: {0}")]
    MalformedTranscript(String),

    #[error("bulletin board chain broken at seq {seq}: {reason}")]
    ChainBroken { seq: u64, reason: String },

    #[error("protocol abort in phase {phase}: {reason}")]
    Abort { phase: String, reason: String },

    #[error("message for phase {got} arrived during phase {expected}")]
    OutOfPhase { expected: String, got: String },

    #[error("audit input invalid: {0}")]
    Audit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
