use crate::error::{Error, Result};

/// Style conditioning vector. The null embedding is all zeros and flagged,
/// and is what classifier-free guidance uses as its unconditional branch.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding {
    values: Vec<f64>,
    null: bool,
}

impl StyleEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty style embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("style embedding".into()));
        }
        Ok(Self { values, null: false })
    }

    pub fn null(dim: usize) -> Self {
        Self { values: vec![0.0; dim], null: true }
    }

    pub fn is_null(&self) -> bool {
        self.null
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
