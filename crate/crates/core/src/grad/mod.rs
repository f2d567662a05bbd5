//! Reverse-mode differentiation over matrix operations, the recorded MTSA
//! classifier graph, and finite-difference checking.

mod check;
mod model;
mod tape;

pub use check::{
    compare_gradients, finite_diff, grad_check, relative_error, GradCheckConfig, GradCheckReport,
};
pub use model::{record_mtsa, record_tsa_head, register_mtsa, MtsaVars, Recorded, SequenceClassifier};
pub use tape::{GradientSet, ParamMap, Tape, Var};
pub(crate) use tape::cross_entropy;
