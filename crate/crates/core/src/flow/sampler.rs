use crate::error::{domain, shape, Error, Result};

use super::codec::ToyLatentCodec;
use super::model::VectorField;

/// `n` explicit Euler steps of size `1/n` from t = 0 to t = 1.
pub fn euler_sample(field: &dyn VectorField, z0: &[f64], cond: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return domain("number of steps must be >= 1");
    }
    let dt = 1.0 / n as f64;
    let mut z = z0.to_vec();
    for k in 0..n {
        let v = field.velocity(&z, k as f64 * dt, cond)?;
        if v.len() != z.len() {
            return shape(format!("field returned {} values for a {}-dim latent", v.len(), z.len()));
        }
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi += dt * vi;
        }
        if let Some(&value) = z.iter().find(|x| !x.is_finite()) {
            return Err(Error::Blowup {
                step: k + 1,
                coordinate: "z",
                value,
            });
        }
    }
    Ok(z)
}

/// Terminal latent after `k` Euler steps, and its decoding.
pub fn terminal_estimate(
    field: &dyn VectorField,
    codec: &ToyLatentCodec,
    z0: &[f64],
    cond: &[f64],
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = euler_sample(field, z0, cond, k)?;
    let x = codec.decode(&z)?;
    Ok((z, x))
}

/// `E[z1 - z0 | z_t = z]` for `z0 ~ N(0, I)` and independent
/// `z1 ~ N(mean, diag(var))`, per coordinate.
pub fn gaussian_oracle_velocity(z: &[f64], t: f64, mean: &[f64], var: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&t) {
        return domain(format!("oracle velocity needs t in [0, 1), got {t}"));
    }
    if z.len() != mean.len() || z.len() != var.len() {
        return shape("oracle dimensions disagree");
    }
    if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return domain("target variance must be > 0");
    }
    Ok(z.iter()
        .zip(mean.iter().zip(var))
        .map(|(&z, (&m, &s2))| {
            let cov = t * s2 - (1.0 - t);
            let v = (1.0 - t).powi(2) + t * t * s2;
            m + cov / v * (z - t * m)
        })
        .collect())
}

/// The oracle field for a fixed target Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl VectorField for GaussianOracle {
    fn velocity(&self, z: &[f64], t: f64, _cond: &[f64]) -> Result<Vec<f64>> {
        gaussian_oracle_velocity(z, t, &self.mean, &self.var)
    }
}

/// Per-pair exact rectified velocity `ze - z0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairVelocity {
    pub z0: Vec<f64>,
    pub ze: Vec<f64>,
}

impl VectorField for PairVelocity {
    fn velocity(&self, _z: &[f64], _t: f64, _cond: &[f64]) -> Result<Vec<f64>> {
        Ok(self.ze.iter().zip(&self.z0).map(|(e, o)| e - o).collect())
    }
}
