use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal has {len} samples but one frame needs {frame_len}")]
    SignalTooShort { len: usize, frame_len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("frequency {hz} Hz is above the Nyquist frequency {nyquist} Hz")]
    FrequencyOutOfRange { hz: f64, nyquist: f64 },

    #[error("singular system in {stage} update at frequency bin {freq}{}", slot_suffix(*.slot))]
    Singular {
        stage: &'static str,
        freq: usize,
        slot: Option<usize>,
    },

    #[error("nn-guided mode requires prior spectra")]
    MissingPrior,

    #[error("prior spectra contain a negative value at index {0}")]
    NegativePrior(usize),

    #[error("malformed prior file: {0}")]
    PriorFormat(String),

    #[error("reference signal is all zero")]
    ZeroReference,

    #[error("unsupported wav format: {0}")]
    UnsupportedWav(String),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn slot_suffix(slot: Option<usize>) -> String {
    match slot {
        Some(j) => format!(", source {j}"),
        None => String::new(),
    }
}
