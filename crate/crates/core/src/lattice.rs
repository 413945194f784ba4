//! Per-mode output distributions of the joiner.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Hat,
    Aed,
    Ctc,
    Lm,
    Twa,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Hat, Mode::Aed, Mode::Ctc, Mode::Lm, Mode::Twa];

    /// Whether the mode emits the factored `K+1` vector with blank at index 0.
    pub fn has_blank(self) -> bool {
        matches!(self, Mode::Hat | Mode::Ctc | Mode::Twa)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Hat => "hat",
            Mode::Aed => "aed",
            Mode::Ctc => "ctc",
            Mode::Lm => "lm",
            Mode::Twa => "twa",
        };
        f.write_str(s)
    }
}

/// Log-probabilities produced by one joiner mode.
///
/// Shapes: HAT/TwA `[T′, U+1, K+1]`, AED/LM `[U+1, K]`, CTC `[T′, K+1]`.
/// Along every `K+1` axis the blank sits at index 0 and label `k` at `k+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorLattice {
    mode: Mode,
    log_probs: Tensor,
}

impl PosteriorLattice {
    pub fn from_log_probs(mode: Mode, log_probs: Tensor) -> Result<Self> {
        let rank = log_probs.dims().len();
        let expected = match mode {
            Mode::Hat | Mode::Twa => 3,
            _ => 2,
        };
        if rank != expected {
            return Err(Error::Shape(format!(
                "{mode} lattice needs rank {expected}, got {:?}",
                log_probs.dims()
            )));
        }
        if log_probs.data().iter().any(|v| v.is_nan() || *v > 0.0) {
            return Err(Error::InvalidInput(format!("{mode} lattice holds invalid log-probabilities")));
        }
        Ok(Self { mode, log_probs })
    }

    pub fn from_probs(mode: Mode, probs: &Tensor) -> Result<Self> {
        if probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("probabilities outside [0, 1]".into()));
        }
        Self::from_log_probs(mode, probs.map(f64::ln))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dims(&self) -> &[usize] {
        self.log_probs.dims()
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn probs(&self) -> Tensor {
        self.log_probs.map(f64::exp)
    }

    /// Length of the distribution axis.
    pub fn width(&self) -> usize {
        *self.dims().last().expect("non-empty dims")
    }

    /// Distribution at a lattice cell: `(t, u)` for HAT/TwA, `(t)` for CTC and
    /// `(u)` for AED/LM.
    pub fn slice(&self, idx: &[usize]) -> &[f64] {
        let w = self.width();
        let dims = self.dims();
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            off = off * dims[i] + x;
        }
        &self.log_probs.data()[off * w..(off + 1) * w]
    }
}
