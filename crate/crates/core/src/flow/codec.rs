use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};

/// Stand-in latent codec: block mean pooling and piecewise-linear decoding.
///
/// The decoded signal is linear between block centers (and extrapolated
/// linearly past the outer centers), with knot values chosen so that the
/// block means of the decoded signal equal the latent. `encode(decode(z)) ==
/// z`, so `decode . encode` is a projection onto the piecewise-linear
/// signals with knots at the coarse grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLatentCodec {
    pub down_factor: usize,
}

impl Default for ToyLatentCodec {
    fn default() -> Self {
        Self { down_factor: 20 }
    }
}

impl ToyLatentCodec {
    pub fn new(down_factor: usize) -> Result<Self> {
        if down_factor == 0 {
            return domain("down_factor must be >= 1");
        }
        Ok(Self { down_factor })
    }

    pub fn latent_len(&self, native_len: usize) -> Result<usize> {
        let d = self.down_factor;
        if native_len == 0 || !native_len.is_multiple_of(d) {
            return shape(format!("length {native_len} is not a positive multiple of {d}"));
        }
        Ok(native_len / d)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.latent_len(x.len())?;
        let d = self.down_factor;
        Ok(x.chunks(d).map(|c| c.iter().sum::<f64>() / d as f64).collect())
    }

    /// Linear interpolation of `knots` placed at block centers.
    fn interpolate(&self, knots: &[f64]) -> Vec<f64> {
        let d = self.down_factor;
        let n = knots.len();
        if n == 1 {
            return vec![knots[0]; d];
        }
        let half = (d as f64 - 1.0) / 2.0;
        (0..n * d)
            .map(|i| {
                let u = (i as f64 - half) / d as f64;
                let k = (u.floor().max(0.0) as usize).min(n - 2);
                let f = u - k as f64;
                knots[k] + f * (knots[k + 1] - knots[k])
            })
            .collect()
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let n = z.len();
        if n == 0 {
            return shape("cannot decode an empty latent");
        }
        if self.down_factor == 1 || n == 1 {
            return Ok(self.interpolate(z));
        }
        // block means of each hat basis function
        let mut m = DMatrix::zeros(n, n);
        let mut basis = vec![0.0; n];
        for k in 0..n {
            basis[k] = 1.0;
            let col = self.encode(&self.interpolate(&basis))?;
            m.set_column(k, &DVector::from_vec(col));
            basis[k] = 0.0;
        }
        let knots = m
            .lu()
            .solve(&DVector::from_column_slice(z))
            .ok_or_else(|| Error::Singular("codec knot system".into()))?;
        Ok(self.interpolate(knots.as_slice()))
    }

    pub fn round_trip(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shapes() {
        let c = ToyLatentCodec::default();
        let x: Vec<f64> = (0..1200).map(|i| (i as f64 * 0.01).sin()).collect();
        let z = c.encode(&x).unwrap();
        assert_eq!(z.len(), 60);
        assert_eq!(c.decode(&z).unwrap().len(), 1200);
        assert!(c.encode(&x[..1199]).is_err());
        assert!(ToyLatentCodec::new(0).is_err());
        assert!(c.decode(&[]).is_err());
    }

    #[test]
    fn unit_factor_is_identity() {
        let c = ToyLatentCodec::new(1).unwrap();
        let x = vec![0.3, -1.0, 2.5, 7.0];
        assert_eq!(c.round_trip(&x).unwrap(), x);
    }

    #[test]
    fn affine_signals_survive() {
        for d in [2, 3, 5, 20] {
            let c = ToyLatentCodec::new(d).unwrap();
            let x: Vec<f64> = (0..d * 7).map(|i| 0.5 - 0.03 * i as f64).collect();
            let y = c.round_trip(&x).unwrap();
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12, "d={d}");
            }
        }
    }

    #[test]
    fn block_means_by_hand() {
        let c = ToyLatentCodec::new(2).unwrap();
        assert_eq!(c.encode(&[1.0, 3.0, -2.0, 0.0]).unwrap(), vec![2.0, -1.0]);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(z in prop::collection::vec(-5.0..5.0f64, 1..30), d in 1usize..25) {
            let c = ToyLatentCodec::new(d).unwrap();
            let back = c.encode(&c.decode(&z).unwrap()).unwrap();
            for (a, b) in z.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn round_trip_is_idempotent(x in prop::collection::vec(-5.0..5.0f64, 40), d in prop::sample::select(vec![1usize, 2, 4, 5, 8, 10, 20])) {
            let c = ToyLatentCodec::new(d).unwrap();
            let once = c.round_trip(&x).unwrap();
            let twice = c.round_trip(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
