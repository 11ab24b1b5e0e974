use crate::error::{Error, Result};

/// Sampled spectrum: detunings in MHz with one value per point.
///
/// Values are counts per second for intensity spectra and dimensionless for
/// visibility spectra. `sigma`, when present, holds per-point standard
/// deviations in the same unit as `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    detunings: Vec<f64>,
    values: Vec<f64>,
    sigma: Option<Vec<f64>>,
}

impl Spectrum {
    pub fn new(detunings: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        validate_grid(&detunings)?;
        if values.len() != detunings.len() {
            return Err(Error::argument(format!(
                "{} values for {} detunings",
                values.len(),
                detunings.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("spectrum contains non-finite values"));
        }
        Ok(Self {
            detunings,
            values,
            sigma: None,
        })
    }

    pub fn with_sigma(mut self, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != self.values.len() {
            return Err(Error::argument(format!(
                "{} sigmas for {} values",
                sigma.len(),
                self.values.len()
            )));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::argument("sigma must be finite and non-negative"));
        }
        self.sigma = Some(sigma);
        Ok(self)
    }

    pub fn detunings(&self) -> &[f64] {
        &self.detunings
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.detunings.iter().copied().zip(self.values.iter().copied())
    }

    /// Checks the count-rate invariant (no negative intensities).
    pub fn ensure_counts(&self) -> Result<()> {
        match self.values.iter().position(|v| *v < 0.0) {
            Some(i) => Err(Error::domain(format!(
                "negative intensity {} at detuning {}",
                self.values[i], self.detunings[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Spectrum {
        Spectrum {
            detunings: self.detunings.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            sigma: None,
        }
    }

    /// Shifts the detuning axis (e.g. to re-reference it to a fitted ν₂₁).
    pub fn shifted(&self, offset: f64) -> Spectrum {
        Spectrum {
            detunings: self.detunings.iter().map(|d| d - offset).collect(),
            values: self.values.clone(),
            sigma: self.sigma.clone(),
        }
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
        (self.detunings, self.values, self.sigma)
    }
}

pub(crate) fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::argument("empty detuning grid"));
    }
    if grid.iter().any(|d| !d.is_finite()) {
        return Err(Error::argument("detuning grid contains non-finite values"));
    }
    if let Some(w) = grid.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::argument(format!(
            "detunings must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// `n` evenly spaced points from `start` to `stop` inclusive.
pub fn uniform_grid(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (stop - start) / (n - 1) as f64;
            (0..n).map(|i| start + step * i as f64).collect()
        }
    }
}

/// `n` evenly spaced points on `[-half_span, half_span]`.
pub fn symmetric_grid(half_span: f64, n: usize) -> Vec<f64> {
    uniform_grid(-half_span, half_span, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unordered_and_mismatched() {
        assert!(Spectrum::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(Spectrum::new(vec![1.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(Spectrum::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(Spectrum::new(vec![], vec![]).is_err());
        let s = Spectrum::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        assert!(s.clone().with_sigma(vec![1.0]).is_err());
        assert!(s.with_sigma(vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn grids() {
        let g = symmetric_grid(10.0, 5);
        assert_eq!(g, vec![-10.0, -5.0, 0.0, 5.0, 10.0]);
        assert_eq!(uniform_grid(1.0, 2.0, 1), vec![1.0]);
        assert!(uniform_grid(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn count_invariant() {
        let s = Spectrum::new(vec![0.0, 1.0], vec![1.0, -2.0]).unwrap();
        assert!(matches!(s.ensure_counts(), Err(Error::Domain(_))));
    }
}
