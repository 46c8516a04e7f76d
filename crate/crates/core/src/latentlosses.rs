//! Loss terms of the paired autoencoder, without the networks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::signal::Waveform;
use crate::simcore::{circ_sq_dist, wrap_pi};

/// Diagonal Gaussian posterior over a C x T latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mu: DMatrix<f64>,
    logvar: DMatrix<f64>,
}

impl DiagGaussian {
    pub fn new(mu: DMatrix<f64>, logvar: DMatrix<f64>) -> Result<Self> {
        if mu.shape() != logvar.shape() {
            return shape(format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()));
        }
        if mu.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
            return domain("posterior has non-finite entries");
        }
        Ok(Self { mu, logvar })
    }

    pub fn standard(c: usize, t: usize) -> Self {
        Self {
            mu: DMatrix::zeros(c, t),
            logvar: DMatrix::zeros(c, t),
        }
    }

    pub fn mu(&self) -> &DMatrix<f64> {
        &self.mu
    }

    pub fn logvar(&self) -> &DMatrix<f64> {
        &self.logvar
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mu.shape()
    }
}

/// B latents of shape C x T.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    values: Vec<DMatrix<f64>>,
}

impl LatentBatch {
    pub fn new(values: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = values.first() else {
            return shape("latent batch must be non-empty");
        };
        let s = first.shape();
        if values.iter().any(|v| v.shape() != s) {
            return shape("latent batch entries differ in shape");
        }
        if values.iter().flat_map(|v| v.iter()).any(|x| !x.is_finite()) {
            return domain("latent batch has non-finite entries");
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return shape(format!("{what}: {a} vs {b}"));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len(), "mse length mismatch")?;
    if a.is_empty() {
        return shape("mse of empty input");
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// KL(q || N(0, I)) summed over all elements.
pub fn kl_to_standard(q: &DiagGaussian) -> f64 {
    q.mu
        .iter()
        .zip(q.logvar.iter())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Mean over the batch of [`kl_to_standard`].
pub fn kl_to_standard_batch(qs: &[DiagGaussian]) -> Result<f64> {
    if qs.is_empty() {
        return shape("empty posterior batch");
    }
    Ok(qs.iter().map(kl_to_standard).sum::<f64>() / qs.len() as f64)
}

/// KL(q1 || q2) between diagonal Gaussians, summed over elements.
pub fn kl_between(q1: &DiagGaussian, q2: &DiagGaussian) -> Result<f64> {
    if q1.shape() != q2.shape() {
        return shape(format!("kl_between: {:?} vs {:?}", q1.shape(), q2.shape()));
    }
    let mut s = 0.0;
    for i in 0..q1.mu.len() {
        let (m1, l1, m2, l2) = (q1.mu[i], q1.logvar[i], q2.mu[i], q2.logvar[i]);
        let d = m1 - m2;
        s += 0.5 * (l2 - l1 + (l1.exp() + d * d) / l2.exp() - 1.0);
    }
    Ok(s)
}

/// Squared mean gap plus the symmetrized KL.
pub fn gpa_loss(qe: &DiagGaussian, qp: &DiagGaussian) -> Result<f64> {
    let fwd = kl_between(qe, qp)?;
    let bwd = kl_between(qp, qe)?;
    let gap = (&qe.mu - &qp.mu).norm_squared();
    Ok(gap + 0.5 * (fwd + bwd))
}

/// Temporal mean pool followed by L2 normalization; one row per batch entry.
pub fn pool_normalize(batch: &LatentBatch) -> Result<DMatrix<f64>> {
    let c = batch.values[0].nrows();
    let mut out = DMatrix::zeros(batch.len(), c);
    for (b, z) in batch.values.iter().enumerate() {
        let pooled: DVector<f64> = z.column_mean();
        let n = pooled.norm();
        if n == 0.0 {
            return domain(format!("pooled latent {b} has zero norm"));
        }
        out.row_mut(b).copy_from(&(pooled / n).transpose());
    }
    Ok(out)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE with matched rows as positives.
pub fn infonce_bidirectional(zp: &DMatrix<f64>, ze: &DMatrix<f64>, tau: f64) -> Result<f64> {
    if !(tau.is_finite() && tau > 0.0) {
        return domain(format!("temperature must be > 0, got {tau}"));
    }
    if zp.shape() != ze.shape() {
        return shape(format!("infonce: {:?} vs {:?}", zp.shape(), ze.shape()));
    }
    let b = zp.nrows();
    if b == 0 {
        return shape("infonce needs at least one row");
    }
    for (name, m) in [("zp", zp), ("ze", ze)] {
        if let Some(i) = (0..b).find(|&i| m.row(i).norm() == 0.0) {
            return domain(format!("{name} row {i} has zero norm"));
        }
    }
    let s = zp * ze.transpose() / tau;
    let mut total = 0.0;
    for i in 0..b {
        let row = log_sum_exp((0..b).map(|j| s[(i, j)]));
        let col = log_sum_exp((0..b).map(|j| s[(j, i)]));
        total += (s[(i, i)] - row) + (s[(i, i)] - col);
    }
    Ok(-total / (2.0 * b as f64))
}

/// Soft-argmax time `sum t_i softmax(w_i / temperature)` mapped to a phase.
pub fn phase_estimate(w: &Waveform, omega: f64, temperature: f64) -> Result<f64> {
    if !(omega.is_finite() && omega > 0.0) {
        return domain(format!("omega must be > 0, got {omega}"));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return domain(format!("temperature must be > 0, got {temperature}"));
    }
    let n = w.len();
    let t_star = if temperature.is_infinite() {
        (n - 1) as f64 * w.dt() / 2.0
    } else {
        let m = w.samples.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let weights: Vec<f64> = w.samples.iter().map(|&x| ((x - m) / temperature).exp()).collect();
        let z: f64 = weights.iter().sum();
        weights.iter().enumerate().map(|(i, p)| i as f64 * w.dt() * p).sum::<f64>() / z
    };
    wrap_pi(omega * t_star)
}

/// Mean circular squared distance between the estimated PPG-minus-ECG phase
/// gap and each sample's `delta_pat`.
pub fn pat_loss(
    xe: &[Waveform],
    xp: &[Waveform],
    delta_pat: &[f64],
    omega: &[f64],
    temperature: f64,
) -> Result<f64> {
    let b = xe.len();
    same_len(b, xp.len(), "pat_loss batch mismatch")?;
    same_len(b, delta_pat.len(), "pat_loss delta_pat length")?;
    same_len(b, omega.len(), "pat_loss omega length")?;
    if b == 0 {
        return shape("pat_loss of empty batch");
    }
    let mut total = 0.0;
    for i in 0..b {
        let gap = wrap_pi(phase_estimate(&xp[i], omega[i], temperature)? - phase_estimate(&xe[i], omega[i], temperature)?)?;
        total += circ_sq_dist(gap, delta_pat[i])?;
    }
    Ok(total / b as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaeWeights {
    pub w_pat: f64,
    pub w_kl: f64,
    pub w_gpa: f64,
    pub w_lid: f64,
    pub w_csd: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Soft phase estimator temperature.
    pub phase_temperature: f64,
}

impl Default for PaeWeights {
    fn default() -> Self {
        Self {
            w_pat: 1e-2,
            w_kl: 5e-5,
            w_gpa: 5e-5,
            w_lid: 1e-3,
            w_csd: 5e-4,
            tau: 0.1,
            phase_temperature: 0.05,
        }
    }
}

impl PaeWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_pat, self.w_kl, self.w_gpa, self.w_lid, self.w_csd];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return domain("PAE weights must be finite and >= 0");
        }
        if !(self.tau > 0.0 && self.phase_temperature > 0.0) {
            return domain("temperatures must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PaeTerms {
    pub pat: f64,
    pub rec: f64,
    pub kl: f64,
    pub gpa: f64,
    pub lid: f64,
    pub csd: f64,
}

pub fn pae_total(t: &PaeTerms, w: &PaeWeights) -> Result<f64> {
    let vals = [t.pat, t.rec, t.kl, t.gpa, t.lid, t.csd];
    if vals.iter().any(|v| !v.is_finite()) {
        return domain("non-finite PAE term");
    }
    Ok(w.w_pat * t.pat + t.rec + w.w_kl * t.kl + w.w_gpa * t.gpa + w.w_lid * t.lid + w.w_csd * t.csd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn dg(mu: &[f64], lv: &[f64]) -> DiagGaussian {
        DiagGaussian::new(
            DMatrix::from_row_slice(1, mu.len(), mu),
            DMatrix::from_row_slice(1, lv.len(), lv),
        )
        .unwrap()
    }

    fn pulse(n: usize, fs: f64, at: f64, width: f64) -> Waveform {
        let s = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                (-(t - at).powi(2) / (2.0 * width * width)).exp()
            })
            .collect();
        Waveform::new(s, fs).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5);
        assert!((mse(&[1.0], &[1.25]).unwrap() - 0.0625).abs() < 1e-15);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_standard(&DiagGaussian::standard(3, 4)), 0.0);
        assert!((kl_to_standard(&dg(&[1.0], &[0.0])) - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((kl_to_standard(&dg(&[0.0], &[1.0])) - 0.5 * (e - 2.0)).abs() < 1e-15);
        let q = dg(&[1.0], &[0.0]);
        let r = dg(&[0.0], &[4f64.ln()]);
        let expected = 2f64.ln() + 2.0 / 8.0 - 0.5;
        assert!((kl_between(&q, &r).unwrap() - expected).abs() < 1e-14);
        assert!((kl_between(&q, &r).unwrap() - 0.4431).abs() < 1e-4);
        // asymmetry witness
        assert!((kl_between(&r, &q).unwrap() - kl_between(&q, &r).unwrap()).abs() > 0.1);
        assert!(kl_between(&q, &DiagGaussian::standard(2, 1)).is_err());
        let batch = [dg(&[1.0], &[0.0]), DiagGaussian::standard(1, 1)];
        assert!((kl_to_standard_batch(&batch).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gpa_examples() {
        let q = dg(&[0.3, -1.0], &[0.2, 0.1]);
        assert_eq!(gpa_loss(&q, &q).unwrap(), 0.0);
        let n = 5;
        let d = 0.7;
        let a = dg(&vec![0.0; n], &vec![0.0; n]);
        let b = dg(&vec![d; n], &vec![0.0; n]);
        let nd2 = n as f64 * d * d;
        assert!((gpa_loss(&a, &b).unwrap() - 1.5 * nd2).abs() < 1e-12);
    }

    #[test]
    fn infonce_examples() {
        let one = DMatrix::from_row_slice(1, 2, &[0.6, 0.8]);
        let other = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(infonce_bidirectional(&one, &other, 0.1).unwrap(), 0.0);
        let eye = DMatrix::<f64>::identity(2, 2);
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((infonce_bidirectional(&eye, &eye, 1.0).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.3133).abs() < 1e-4);
        let zero = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(infonce_bidirectional(&zero, &eye, 1.0).is_err());
        assert!(infonce_bidirectional(&eye, &eye, 0.0).is_err());
    }

    #[test]
    fn pool_normalize_rows_are_unit() {
        let z = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 3.0]);
        let b = LatentBatch::new(vec![z.clone(), z * -2.0]).unwrap();
        let rows = pool_normalize(&b).unwrap();
        for r in 0..2 {
            assert!((rows.row(r).norm() - 1.0).abs() < 1e-15);
        }
        assert!((rows[(0, 0)] - 2.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!((rows[(1, 0)] + 2.0 / 5f64.sqrt()).abs() < 1e-15);
        let zero = LatentBatch::new(vec![DMatrix::zeros(2, 3)]).unwrap();
        assert!(pool_normalize(&zero).is_err());
    }

    #[test]
    fn phase_estimate_examples() {
        let fs = 100.0;
        let mut x = vec![0.0; 200];
        x[50] = 1.0;
        let w = Waveform::new(x, fs).unwrap();
        assert!((phase_estimate(&w, PI, 1e-3).unwrap() - PI / 2.0).abs() < 1e-12);
        let mut y = vec![0.0; 201];
        y[40] = 1.0;
        y[160] = 1.0;
        let w2 = Waveform::new(y, fs).unwrap();
        assert!((phase_estimate(&w2, 1.0, 1e-3).unwrap() - 1.0).abs() < 1e-12);
        let mid = phase_estimate(&w, 1.0, f64::INFINITY).unwrap();
        assert!((mid - 0.995).abs() < 1e-12);
        let big = phase_estimate(&w, 1.0, 1e12).unwrap();
        assert!((big - 0.995).abs() < 1e-9);
        assert!(phase_estimate(&w, 0.0, 1.0).is_err());
    }

    #[test]
    fn pat_loss_examples() {
        let fs = 120.0;
        let omega = 2.0 * PI;
        // shift of exactly 23 samples so the peak lands on the grid
        let shift = 23.0 / fs;
        let delta = omega * shift;
        let xe = pulse(400, fs, 1.0, 0.02);
        let xp = pulse(400, fs, 1.0 + shift, 0.02);
        let l = pat_loss(&[xe.clone()], &[xp], &[delta], &[omega], 1e-3).unwrap();
        assert!(l < 1e-12, "{l}");
        assert_eq!(pat_loss(&[xe.clone()], &[xe.clone()], &[0.0], &[omega], 0.05).unwrap(), 0.0);
        let xo = pulse(400, fs, 1.5, 0.02);
        let l = pat_loss(&[xe.clone()], &[xo], &[0.0], &[omega], 1e-3).unwrap();
        assert!((l - PI * PI).abs() < 1e-6, "{l}");
        assert!(pat_loss(&[xe.clone()], &[], &[0.0], &[omega], 0.05).is_err());
    }

    #[test]
    fn pat_loss_shift_invariant() {
        let fs = 120.0;
        let omega = 7.0;
        let a = pat_loss(&[pulse(400, fs, 1.0, 0.03)], &[pulse(400, fs, 1.2, 0.03)], &[0.9], &[omega], 1e-3).unwrap();
        let b = pat_loss(&[pulse(400, fs, 1.5, 0.03)], &[pulse(400, fs, 1.7, 0.03)], &[0.9], &[omega], 1e-3).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} {b}");
    }

    #[test]
    fn pae_total_examples() {
        let w = PaeWeights::default();
        assert_eq!(pae_total(&PaeTerms::default(), &w).unwrap(), 0.0);
        let unit = PaeTerms {
            pat: 1.0,
            rec: 1.0,
            kl: 1.0,
            gpa: 1.0,
            lid: 1.0,
            csd: 1.0,
        };
        assert!((pae_total(&unit, &w).unwrap() - 1.0116).abs() < 1e-12);
        assert_eq!((w.w_kl, w.w_gpa, w.w_lid, w.w_csd), (5e-5, 5e-5, 1e-3, 5e-4));
        let bad = PaeTerms { rec: f64::NAN, ..unit };
        assert!(pae_total(&bad, &w).is_err());
    }

    fn gaussian(len: usize) -> impl Strategy<Value = DiagGaussian> {
        (
            prop::collection::vec(-3.0..3.0f64, len),
            prop::collection::vec(-2.0..2.0f64, len),
        )
            .prop_map(move |(m, l)| dg(&m, &l))
    }

    proptest! {
        #[test]
        fn kl_nonnegative(q in gaussian(6)) {
            prop_assert!(kl_to_standard(&q) >= 0.0);
            prop_assert_eq!(kl_between(&q, &q).unwrap(), 0.0);
        }

        #[test]
        fn kl_between_standard_matches(q in gaussian(6)) {
            let s = DiagGaussian::standard(1, 6);
            prop_assert!((kl_between(&q, &s).unwrap() - kl_to_standard(&q)).abs() < 1e-12);
        }

        #[test]
        fn gpa_symmetric((a, b) in (gaussian(5), gaussian(5))) {
            prop_assert_eq!(gpa_loss(&a, &b).unwrap(), gpa_loss(&b, &a).unwrap());
        }

        #[test]
        fn infonce_relabeling(v in prop::collection::vec(-1.0..1.0f64, 12), tau in 0.05..2.0f64) {
            let raw = DMatrix::from_row_slice(3, 4, &v);
            prop_assume!((0..3).all(|i| raw.row(i).norm() > 1e-3));
            let mut zp = raw.clone();
            for i in 0..3 { let n = raw.row(i).norm(); zp.row_mut(i).scale_mut(1.0 / n); }
            let mut ze = zp.clone();
            ze.swap_columns(0, 1);
            let base = infonce_bidirectional(&zp, &ze, tau).unwrap();
            let mut pp = zp.clone(); pp.swap_rows(0, 2);
            let mut pe = ze.clone(); pe.swap_rows(0, 2);
            prop_assert!((infonce_bidirectional(&pp, &pe, tau).unwrap() - base).abs() < 1e-12);
            prop_assert_eq!(infonce_bidirectional(&zp.rows(0, 1).into(), &ze.rows(0, 1).into(), tau).unwrap(), 0.0);
        }

        #[test]
        fn infonce_nonnegative_when_positives_dominate(tau in 0.05..2.0f64) {
            let eye = DMatrix::<f64>::identity(3, 3);
            prop_assert!(infonce_bidirectional(&eye, &eye, tau).unwrap() >= 0.0);
        }

        #[test]
        fn phase_estimate_affine_coscaled(
            v in prop::collection::vec(-2.0..2.0f64, 30),
            a in 0.1..10.0f64,
            b in -5.0..5.0f64,
            temp in 0.05..2.0f64,
        ) {
            let w = Waveform::new(v.clone(), 20.0).unwrap();
            let w2 = Waveform::new(v.iter().map(|x| a * x + b).collect(), 20.0).unwrap();
            let p1 = phase_estimate(&w, 1.3, temp).unwrap();
            let p2 = phase_estimate(&w2, 1.3, a * temp).unwrap();
            prop_assert!((p1 - p2).abs() < 1e-9);
        }
    }
}
