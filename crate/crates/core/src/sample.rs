use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major real matrix. Region-by-time for samples.
pub type Mat = Array2<f64>;

/// A multivariate time series: `regions x timepoints` activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: Option<usize>,
    pub values: Mat,
}

impl Sample {
    pub fn new(id: impl Into<String>, label: Option<usize>, values: Mat) -> Result<Self> {
        let sample = Sample {
            id: id.into(),
            label,
            values,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let (r, l) = self.values.dim();
        if r == 0 || l == 0 {
            return Err(Error::InvalidArgument(format!(
                "sample {} has empty shape {r}x{l}",
                self.id
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {}", self.id)));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.values.nrows()
    }

    pub fn timepoints(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

pub(crate) fn check_same_shape(expected: &Mat, actual: &Mat) -> Result<()> {
    if expected.dim() != actual.dim() {
        return Err(Error::shape(
            format!("{:?}", expected.dim()),
            format!("{:?}", actual.dim()),
        ));
    }
    Ok(())
}

pub(crate) fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Standard normal matrix drawn from `rng` in row-major order.
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(Sample::new("a", None, Array2::zeros((0, 3))).is_err());
        let mut m = Array2::zeros((2, 2));
        m[[1, 0]] = f64::NAN;
        assert!(matches!(
            Sample::new("b", Some(0), m),
            Err(Error::NonFinite(_))
        ));
        assert!(Sample::new("c", Some(1), Array2::ones((2, 5))).is_ok());
    }
}
