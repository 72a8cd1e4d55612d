//! Feedback integrators for mechanical systems with first integrals.
//!
//! The integrated vector field is `X - grad V`, where `V` measures the
//! deviation of the first integrals from their initial values. Any standard
//! one-step scheme applied to the modified field keeps the trajectory near
//! the invariant set.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod feedback;
pub mod integrators;
pub mod kepler;
pub mod numerics;
pub mod perturbed_kepler;
pub mod rigid_body;

pub use error::{DomainError, ParamError};
pub use feedback::{FeedbackSpec, FeedbackSystem, FirstIntegralMap};
pub use integrators::{IntegrationError, StepError};
