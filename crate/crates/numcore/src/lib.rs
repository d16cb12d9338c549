//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Values are always `f64`. A [`Graph`] records one forward computation as a
//! tape of nodes; [`Graph::backward`] fills gradients for every leaf created
//! with [`Graph::param`]. Broadcasting is limited to adding a bias along the
//! trailing axis.

mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{
    check_decomposed_gradients, check_gradients, reduce_terms, relative_error, GradCheckEntry,
    GradCheckReport, LossTerm, TermKind,
};
pub use graph::{gelu, normal_cdf, sigmoid, Graph, Var};
pub use tensor::Tensor;
