use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("power iteration did not converge after {iters} iterations (best sigma {best_sigma:.6e}, residual {residual:.3e})")]
    NonConvergence {
        iters: usize,
        best_sigma: f64,
        residual: f64,
    },

    #[error("SVD did not converge after {sweeps} Jacobi sweeps (off-norm {off_norm:.3e})")]
    SvdNonConvergence { sweeps: usize, off_norm: f64 },

    #[error("covariance matrix is indefinite (min eigenvalue {min_eig:.3e})")]
    IndefiniteCovariance { min_eig: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("truncated IDX file {path}: need {need} bytes, have {have}")]
    IdxTruncated {
        path: String,
        need: usize,
        have: usize,
    },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("threshold {target_pct}% not bracketed by sweep (range {min_pct:.2}%..{max_pct:.2}%)")]
    ThresholdNotBracketed {
        target_pct: f64,
        min_pct: f64,
        max_pct: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
