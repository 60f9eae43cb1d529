//! Seed aggregation and the two-proportion Z-test.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProportionSample {
    pub successes: u64,
    pub trials: u64,
}

impl ProportionSample {
    pub fn new(successes: u64, trials: u64) -> Result<Self> {
        if trials == 0 || successes > trials {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= successes <= trials and trials >= 1, got {successes}/{trials}"
            )));
        }
        Ok(ProportionSample { successes, trials })
    }

    pub fn proportion(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p_two_sided: f64,
    /// Pooled proportion was 0 or 1, so the test is undefined; reported as
    /// `z = 0, p = 1`.
    pub degenerate: bool,
}

/// Pooled two-proportion Z-test with a two-sided p-value.
pub fn two_proportion_z(a: ProportionSample, b: ProportionSample) -> Result<ZTest> {
    let a = ProportionSample::new(a.successes, a.trials)?;
    let b = ProportionSample::new(b.successes, b.trials)?;
    let (na, nb) = (a.trials as f64, b.trials as f64);
    let pooled = (a.successes + b.successes) as f64 / (na + nb);
    let var = pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb);
    if var <= 0.0 {
        return Ok(ZTest {
            z: 0.0,
            p_two_sided: 1.0,
            degenerate: true,
        });
    }
    let z = (a.proportion() - b.proportion()) / var.sqrt();
    // 2 (1 - Phi(|z|)) = erfc(|z| / sqrt 2), accurate far into the tail
    let p = erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
    Ok(ZTest {
        z,
        p_two_sided: p,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let s = ProportionSample::new(30, 100).unwrap();
        let t = two_proportion_z(s, s).unwrap();
        assert_eq!(t.z, 0.0);
        assert_eq!(t.p_two_sided, 1.0);
    }

    #[test]
    fn degenerate_pool() {
        let s = ProportionSample::new(10, 10).unwrap();
        let t = two_proportion_z(s, s).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.p_two_sided, 1.0);
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(
            mean_std(&[0.8, 0.8]).unwrap(),
            MeanStd {
                mean: 0.8,
                std: 0.0
            }
        );
        let m = mean_std(&[0.0, 1.0]).unwrap();
        assert_eq!(m.mean, 0.5);
        assert!((m.std - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[3.0]).unwrap().std, 0.0);
        assert!(mean_std(&[]).is_err());
    }

    #[test]
    fn invalid_counts() {
        assert!(ProportionSample::new(5, 4).is_err());
        assert!(ProportionSample::new(0, 0).is_err());
    }
}
