use thiserror::Error;

/// A state lies outside the domain on which a system's functions are defined.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("state has a non-finite component")]
    NonFinite,
    #[error("position radius {radius:e} is inside the origin guard")]
    NearOrigin { radius: f64 },
    #[error("rotation matrix determinant {det:e} is not positive")]
    NonPositiveDeterminant { det: f64 },
    #[error("expected a vector of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// A parameter record violates its construction invariants.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid parameter `{name}`: {reason}")]
pub struct ParamError {
    pub name: &'static str,
    pub reason: String,
}

impl ParamError {
    pub fn new(name: &'static str, reason: impl Into<String>) -> Self {
        Self {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64]) -> Result<(), DomainError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DomainError::NonFinite)
    }
}

pub(crate) fn ensure_len(values: &[f64], expected: usize) -> Result<(), DomainError> {
    if values.len() == expected {
        Ok(())
    } else {
        Err(DomainError::Dimension {
            expected,
            got: values.len(),
        })
    }
}
