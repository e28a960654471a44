//! Double-precision tensor engine: forward kernels, reverse-mode gradients
//! and the Adam optimizer.

mod adam;
mod gradcheck;
pub mod kernels;
mod packed;
pub mod par;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_STEP};
pub use packed::{gemm_packed, PackedMatrix};
pub use params::{Gradients, Init, Param, ParamId, ParamStore};
pub use tape::{BatchMoments, NormStats, RevinStats, Tape, Var};
pub use tensor::Tensor;

/// Element-wise activation used by the two branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> crate::Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    pub fn scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Whether a forward pass is training (batch statistics, dropout) or
/// evaluation (running statistics, no dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
