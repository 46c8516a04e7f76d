use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};

/// Feature families for the linear vector field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// `[1, z, t, c]`
    Affine,
    /// Affine plus `t*z`, `t*c`, `t^2`, `z_i^2`, `c_i^2`.
    Quadratic,
    /// Affine features followed by `[1, z, c] / (1 - t)`.
    InverseTime,
    /// Scalar `z` only: `z^a * t^b` for `a <= z_degree`, `b <= t_degree`.
    Polynomial { z_degree: usize, t_degree: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    #[serde(flatten)]
    pub kind: FeatureKind,
    pub z_dim: usize,
    pub cond_dim: usize,
}

impl FeatureMapSpec {
    pub fn new(kind: FeatureKind, z_dim: usize, cond_dim: usize) -> Result<Self> {
        if z_dim == 0 {
            return domain("z_dim must be >= 1");
        }
        if let FeatureKind::Polynomial { .. } = kind {
            if z_dim != 1 || cond_dim != 0 {
                return domain("polynomial features need z_dim = 1 and no conditioning");
            }
        }
        Ok(Self { kind, z_dim, cond_dim })
    }

    pub fn dim(&self) -> usize {
        let affine = 2 + self.z_dim + self.cond_dim;
        match self.kind {
            FeatureKind::Affine => affine,
            FeatureKind::Quadratic => affine + 2 * (self.z_dim + self.cond_dim) + 1,
            FeatureKind::InverseTime => affine + 1 + self.z_dim + self.cond_dim,
            FeatureKind::Polynomial { z_degree, t_degree } => (z_degree + 1) * (t_degree + 1),
        }
    }

    pub fn features(&self, z: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.z_dim || cond.len() != self.cond_dim {
            return shape(format!(
                "features expect z {} / cond {}, got {} / {}",
                self.z_dim,
                self.cond_dim,
                z.len(),
                cond.len()
            ));
        }
        let mut f = Vec::with_capacity(self.dim());
        if let FeatureKind::Polynomial { z_degree, t_degree } = self.kind {
            for a in 0..=z_degree {
                for b in 0..=t_degree {
                    f.push(z[0].powi(a as i32) * t.powi(b as i32));
                }
            }
            return Ok(f);
        }
        f.push(1.0);
        f.extend_from_slice(z);
        f.push(t);
        f.extend_from_slice(cond);
        match self.kind {
            FeatureKind::Affine => {}
            FeatureKind::Quadratic => {
                f.extend(z.iter().chain(cond).map(|v| t * v));
                f.push(t * t);
                f.extend(z.iter().chain(cond).map(|v| v * v));
            }
            FeatureKind::InverseTime => {
                if t >= 1.0 {
                    return domain(format!("inverse-time features need t < 1, got {t}"));
                }
                let s = 1.0 / (1.0 - t);
                f.push(s);
                f.extend(z.iter().chain(cond).map(|v| v * s));
            }
            FeatureKind::Polynomial { .. } => unreachable!(),
        }
        Ok(f)
    }
}

/// `(1 - t) z0 + t ze`
pub fn interp_path(z0: &[f64], ze: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return domain(format!("t must lie in [0, 1], got {t}"));
    }
    if z0.len() != ze.len() {
        return shape(format!("path endpoints differ in length: {} vs {}", z0.len(), ze.len()));
    }
    Ok(z0.iter().zip(ze).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// A velocity field `v(z, t, cond)`.
pub trait VectorField {
    fn velocity(&self, z: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>>;
}

impl<F> VectorField for F
where
    F: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
{
    fn velocity(&self, z: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        Ok(self(z, t, cond))
    }
}

/// Training triple: source sample, target sample, conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPair {
    pub z0: Vec<f64>,
    pub ze: Vec<f64>,
    pub cond: Vec<f64>,
}

/// A pair evaluated at a specific time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub pair: FlowPair,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    /// `per_pair` uniform draws from [0, 1) per pair.
    Random { per_pair: usize, seed: u64 },
    /// Every pair at every listed time.
    Grid(Vec<f64>),
}

impl Default for TimeSampling {
    fn default() -> Self {
        TimeSampling::Random { per_pair: 4, seed: 0 }
    }
}

impl TimeSampling {
    pub fn expand(&self, pairs: &[FlowPair]) -> Result<Vec<FlowSample>> {
        match self {
            TimeSampling::Random { per_pair, seed } => {
                if *per_pair == 0 {
                    return domain("time samples per pair must be >= 1");
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(pairs
                    .iter()
                    .flat_map(|p| {
                        (0..*per_pair)
                            .map(|_| FlowSample {
                                pair: p.clone(),
                                t: rng.random::<f64>(),
                            })
                            .collect::<Vec<_>>()
                    })
                    .collect())
            }
            TimeSampling::Grid(ts) => {
                if ts.is_empty() || ts.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return domain("time grid must be non-empty and inside [0, 1]");
                }
                Ok(pairs
                    .iter()
                    .flat_map(|p| ts.iter().map(|&t| FlowSample { pair: p.clone(), t }))
                    .collect())
            }
        }
    }
}

/// Velocity linear in a fixed feature map: `v = W phi(z, t, cond)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFlowModel {
    pub spec: FeatureMapSpec,
    pub ridge: f64,
    rows: usize,
    cols: usize,
    /// Row-major `z_dim x feature_dim`.
    weights: Vec<f64>,
}

impl LinearFlowModel {
    pub fn zeros(spec: FeatureMapSpec) -> Self {
        Self::from_matrix(spec, 0.0, DMatrix::zeros(spec.z_dim, spec.dim())).expect("shape matches spec")
    }

    pub fn from_matrix(spec: FeatureMapSpec, ridge: f64, w: DMatrix<f64>) -> Result<Self> {
        if w.shape() != (spec.z_dim, spec.dim()) {
            return shape(format!("weights {:?} do not match spec ({}, {})", w.shape(), spec.z_dim, spec.dim()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return domain("non-finite flow weights");
        }
        let weights = (0..w.nrows()).flat_map(|r| w.row(r).iter().copied().collect::<Vec<_>>()).collect();
        Ok(Self {
            spec,
            ridge,
            rows: w.nrows(),
            cols: w.ncols(),
            weights,
        })
    }

    pub fn weights(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.weights)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        Self::from_matrix(m.spec, m.ridge, m.weights())
    }
}

impl VectorField for LinearFlowModel {
    fn velocity(&self, z: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        let phi = self.spec.features(z, t, cond)?;
        Ok((0..self.rows)
            .map(|r| {
                self.weights[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(&phi)
                    .map(|(w, f)| w * f)
                    .sum()
            })
            .collect())
    }
}

/// Mean squared gap between the field and `ze - z0` along the path.
pub fn rf_loss(field: &dyn VectorField, batch: &[FlowSample]) -> Result<f64> {
    if batch.is_empty() {
        return shape("rf_loss of an empty batch");
    }
    let mut total = 0.0;
    for s in batch {
        let zt = interp_path(&s.pair.z0, &s.pair.ze, s.t)?;
        let v = field.velocity(&zt, s.t, &s.pair.cond)?;
        if v.len() != zt.len() {
            return shape(format!("field returned {} values for a {}-dim latent", v.len(), zt.len()));
        }
        total += v
            .iter()
            .zip(s.pair.ze.iter().zip(&s.pair.z0))
            .map(|(v, (e, o))| (v - (e - o)).powi(2))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Ridge regression of `ze - z0` on the features at the sampled path points.
pub fn fit_flow_ridge(pairs: &[FlowPair], spec: FeatureMapSpec, ridge: f64, times: &TimeSampling) -> Result<LinearFlowModel> {
    if pairs.is_empty() {
        return shape("flow dataset is empty");
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return domain(format!("ridge must be >= 0, got {ridge}"));
    }
    let samples = times.expand(pairs)?;
    let n = samples.len();
    let p = spec.dim();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DMatrix::zeros(n, spec.z_dim);
    for (i, s) in samples.iter().enumerate() {
        if s.pair.z0.len() != spec.z_dim || s.pair.ze.len() != spec.z_dim {
            return shape(format!("pair {} does not match z_dim {}", i, spec.z_dim));
        }
        let zt = interp_path(&s.pair.z0, &s.pair.ze, s.t)?;
        let phi = spec.features(&zt, s.t, &s.pair.cond)?;
        x.row_mut(i).copy_from_slice(&phi);
        for j in 0..spec.z_dim {
            y[(i, j)] = s.pair.ze[j] - s.pair.z0[j];
        }
    }
    let w = ridge_solve(&x, &y, ridge)?;
    LinearFlowModel::from_matrix(spec, ridge, w.transpose())
}

/// `argmin_B ||X B - Y||^2 + ridge ||B||^2` via the SVD of `X`.
pub(crate) fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let svd = x.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Singular("SVD failed".into())),
    };
    let s = svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let rank_deficient = s.len() < x.ncols() || s.iter().any(|&v| v <= smax * 1e-12);
    if ridge == 0.0 && (smax == 0.0 || rank_deficient) {
        return Err(Error::Singular(
            "normal equations are singular with ridge = 0; use ridge > 0".into(),
        ));
    }
    let filt = DVector::from_iterator(s.len(), s.iter().map(|&v| if v > 0.0 { v / (v * v + ridge) } else { 0.0 }));
    let uty = u.transpose() * y;
    let scaled = DMatrix::from_fn(uty.nrows(), uty.ncols(), |i, j| filt[i] * uty[(i, j)]);
    Ok(vt.transpose() * scaled)
}
