use thiserror::Error;

/// Errors raised by the signal-extraction and evaluation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid band ({low} Hz, {high} Hz) for sampling rate {fs} Hz")]
    InvalidBand { low: f64, high: f64, fs: f64 },
    #[error("filter design failed: {0}")]
    DesignFailure(String),
    #[error("insufficient samples: need more than {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("invalid nfft {nfft} for signal of length {len}")]
    InvalidNfft { nfft: usize, len: usize },
    #[error("invalid time series: {0}")]
    InvalidSeries(String),
    #[error("bounding box of {area} px is too small for {k_target} superpixels")]
    RegionTooSmall { area: usize, k_target: usize },
    #[error("region {0} has an empty mask")]
    DegenerateRegion(usize),
    #[error("degenerate trace: {0}")]
    DegenerateTrace(String),
    #[error("degenerate colour subspace at frame {frame}")]
    DegenerateSubspace { frame: usize },
    #[error("no dominant frequency in the physiological band")]
    NoDominantFrequency,
    #[error("fundamental {0} Hz outside [0.7, 3.0] Hz")]
    InvalidFundamental(f64),
    #[error("sweep has no valid segments")]
    EmptySweep,
    #[error("no region with a usable segment")]
    NoRegion,
    #[error("insufficient peaks: need {needed}, found {found}")]
    InsufficientPeaks { needed: usize, found: usize },
    #[error("fewer than two reference R-peaks, no intervals to match")]
    NoIntervals,
    #[error("paired samples differ in length ({0} vs {1}) or are too short")]
    PairingError(usize, usize),
    #[error("sample size {0} unsupported (3..=5000)")]
    UnsupportedN(usize),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty report: {0}")]
    EmptyReport(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Io(e.to_string())
    }
}
