use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::fit::{detect_events, Polarity};
use crate::integrate::{euler_residual, integrate_readout, simulate_pair, Modality, ECG_FS, PPG_FS, WARMUP_S};
use crate::signal::{mean, std_dev, Waveform};
use crate::simcore::{PhaseState, SimParams};

/// A beat-aligned slice of a waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub samples: Vec<f64>,
    /// Index in the source of `samples[0]`; negative when left-padded.
    pub start: isize,
    /// Number of real (unpadded) samples at the front and back that were
    /// replaced by zeros.
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Crop {
    pub fn padded(&self) -> bool {
        self.pad_left + self.pad_right > 0
    }

    /// The part of the crop backed by source samples.
    pub fn real(&self) -> &[f64] {
        &self.samples[self.pad_left..self.samples.len() - self.pad_right]
    }
}

/// `[anchor - pre*fs, anchor + post*fs]`, zero-padded past the ends.
pub fn crop_beat(w: &Waveform, anchor: usize, pre: f64, post: f64) -> Result<Crop> {
    if anchor >= w.len() {
        return domain(format!("anchor {anchor} outside a {}-sample waveform", w.len()));
    }
    if !(pre >= 0.0 && post >= 0.0 && pre.is_finite() && post.is_finite()) {
        return domain("crop extents must be >= 0");
    }
    let before = (pre * w.fs).round() as isize;
    let after = (post * w.fs).round() as isize;
    let start = anchor as isize - before;
    let end = anchor as isize + after;
    let n = (end - start + 1) as usize;
    if n == 0 {
        return shape("empty crop");
    }
    let len = w.len() as isize;
    let samples = (start..=end)
        .map(|i| if (0..len).contains(&i) { w.samples[i as usize] } else { 0.0 })
        .collect();
    Ok(Crop {
        samples,
        start,
        pad_left: (-start).max(0) as usize,
        pad_right: (end - (len - 1)).max(0) as usize,
    })
}

/// Phases `theta_r + omega (t0 + l dt - anchor_time)` on the unit cycle.
pub fn reference_track(params: &SimParams, anchor_time: f64, t0: f64, dt: f64, n: usize) -> Vec<PhaseState> {
    (0..n)
        .map(|l| PhaseState::on_cycle(params.theta_r() + params.omega() * (t0 + l as f64 * dt - anchor_time)))
        .collect()
}

/// Where a PPG crop lives: its phase track and time axis.
#[derive(Debug, Clone)]
pub struct CropContext<'a> {
    pub params: &'a SimParams,
    pub track: &'a [PhaseState],
    /// Absolute time of the first crop sample.
    pub t0: f64,
    pub dt: f64,
}

/// Maps a rate-matched ECG crop to the PPG crop on the same time grid.
pub trait ForwardMap {
    fn map(&self, ecg: &[f64], ctx: &CropContext) -> Result<Vec<f64>>;
}

/// The simulator's own PPG readout integrated along the crop's phase track.
/// Ignores the ECG; used as the reference mapper.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimulatorPpgBranch {
    /// Initial PPG value; the baseline when `None`.
    pub p0: Option<f64>,
}

impl ForwardMap for SimulatorPpgBranch {
    fn map(&self, _ecg: &[f64], ctx: &CropContext) -> Result<Vec<f64>> {
        let p0 = self.p0.unwrap_or(ctx.params.ppg.baseline);
        Ok(integrate_readout(Modality::Ppg, ctx.params, ctx.track, p0, ctx.dt, ctx.t0))
    }
}

/// Linear ECG-to-PPG crop map with intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeMapper {
    pub in_dim: usize,
    pub out_dim: usize,
    pub ridge: f64,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn first_difference(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n.saturating_sub(1), n, |i, j| {
        if j == i + 1 {
            1.0
        } else if j == i {
            -1.0
        } else {
            0.0
        }
    })
}

/// Fits `ppg ~ W ecg + b` minimising squared waveform error plus squared
/// first-difference error, with `ridge * ||W||^2`.
pub fn mapper_fit(ecg: &[Vec<f64>], ppg: &[Vec<f64>], ridge: f64) -> Result<RidgeMapper> {
    if ecg.is_empty() || ecg.len() != ppg.len() {
        return shape(format!("mapper needs matching non-empty crop sets ({} vs {})", ecg.len(), ppg.len()));
    }
    if !(ridge.is_finite() && ridge > 0.0) {
        return domain(format!("mapper ridge must be > 0, got {ridge}"));
    }
    let (di, dout) = (ecg[0].len(), ppg[0].len());
    if di == 0 || dout == 0 || ecg.iter().any(|v| v.len() != di) || ppg.iter().any(|v| v.len() != dout) {
        return shape("mapper crops must share one non-zero length per modality");
    }
    let n = ecg.len();
    let x = DMatrix::from_fn(n, di, |r, c| ecg[r][c]);
    let y = DMatrix::from_fn(n, dout, |r, c| ppg[r][c]);
    let xm = x.row_mean();
    let ym = y.row_mean();
    let xc = DMatrix::from_fn(n, di, |r, c| x[(r, c)] - xm[c]);
    let yc = DMatrix::from_fn(n, dout, |r, c| y[(r, c)] - ym[c]);

    // decouple the outputs in the eigenbasis of I + D^T D
    let d = first_difference(dout);
    let m = DMatrix::identity(dout, dout) + d.transpose() * d;
    let eig = SymmetricEigen::new(m);
    let q = eig.eigenvectors;
    let yq = &yc * &q;

    let svd = xc.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Singular("mapper SVD failed; increase the ridge".into())),
    };
    let s = svd.singular_values;
    let uty = u.transpose() * yq;
    let mut wq = DMatrix::zeros(di, dout);
    for k in 0..dout {
        let lam = ridge / eig.eigenvalues[k];
        let filtered = DVector::from_fn(s.len(), |i, _| s[i] / (s[i] * s[i] + lam) * uty[(i, k)]);
        wq.set_column(k, &(vt.transpose() * filtered));
    }
    let w = (wq * q.transpose()).transpose();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("mapper fit is ill-conditioned; increase the ridge".into()));
    }
    let bias: Vec<f64> = (0..dout).map(|o| ym[o] - (0..di).map(|i| w[(o, i)] * xm[i]).sum::<f64>()).collect();
    Ok(RidgeMapper {
        in_dim: di,
        out_dim: dout,
        ridge,
        weights: (0..dout).flat_map(|o| (0..di).map(move |i| (o, i))).map(|(o, i)| w[(o, i)]).collect(),
        bias,
    })
}

impl RidgeMapper {
    pub fn apply(&self, ecg: &[f64]) -> Result<Vec<f64>> {
        if ecg.len() != self.in_dim {
            return shape(format!("mapper expects {} inputs, got {}", self.in_dim, ecg.len()));
        }
        Ok((0..self.out_dim)
            .map(|o| {
                self.bias[o]
                    + self.weights[o * self.in_dim..(o + 1) * self.in_dim]
                        .iter()
                        .zip(ecg)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect())
    }
}

impl ForwardMap for RidgeMapper {
    fn map(&self, ecg: &[f64], _ctx: &CropContext) -> Result<Vec<f64>> {
        self.apply(ecg)
    }
}

/// Every `stride`-th sample.
pub fn rate_match(x: &[f64], stride: usize) -> Vec<f64> {
    x.iter().step_by(stride.max(1)).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub crop_pre: f64,
    pub crop_post: f64,
    pub peak_min_distance: f64,
    pub peak_rel_height: f64,
    /// Absolute time of the first window sample.
    pub window_t0: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            crop_pre: 0.20,
            crop_post: 0.60,
            peak_min_distance: 0.3,
            peak_rel_height: 0.5,
            window_t0: WARMUP_S,
        }
    }
}

/// Mean and standard deviation of a group's own simulated window, used to
/// bring z-scored signals back to simulator units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub ecg_mean: f64,
    pub ecg_std: f64,
    pub ppg_mean: f64,
    pub ppg_std: f64,
}

impl ReferenceStats {
    pub fn from_params(params: &SimParams, duration: f64) -> Result<Self> {
        let (e, p) = simulate_pair(params, duration)?;
        Ok(Self {
            ecg_mean: mean(&e.samples),
            ecg_std: std_dev(&e.samples),
            ppg_mean: mean(&p.samples),
            ppg_std: std_dev(&p.samples),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimGuidedLosses {
    pub l_sim_e: f64,
    pub l_sim_p: f64,
    pub anchor: usize,
    /// No R-peak was found; the window center was used.
    pub degraded: bool,
    pub padded: bool,
}

/// Samples by which the simulator's own ECG peak precedes the R phase on a
/// grid at `fs`, from a few beats integrated along an exact rotation.
pub fn readout_peak_lag(params: &SimParams, fs: f64) -> isize {
    let dt = 1.0 / fs;
    let period = (std::f64::consts::TAU / params.omega() * fs).round() as usize;
    let r_sample = 3 * period;
    let n = r_sample + period / 2;
    let track = reference_track(params, r_sample as f64 * dt, 0.0, dt, n);
    let e = integrate_readout(Modality::Ecg, params, &track, params.ecg.baseline, dt, 0.0);
    let half = period / 4;
    let peak = (r_sample - half..n)
        .max_by(|&i, &j| e[i].total_cmp(&e[j]).then(j.cmp(&i)))
        .unwrap_or(r_sample);
    r_sample as isize - peak as isize
}

fn pick_anchor(xe: &Waveform, cfg: &GuidanceConfig) -> Result<(usize, bool)> {
    let peaks = detect_events(xe, cfg.peak_min_distance, Polarity::Max, Some(cfg.peak_rel_height))?;
    let before = (cfg.crop_pre * xe.fs).round() as usize;
    let after = (cfg.crop_post * xe.fs).round() as usize;
    let fits = |a: &usize| *a >= before && a + after < xe.len();
    let best = |cands: &mut dyn Iterator<Item = usize>| {
        cands.fold(None::<usize>, |acc, a| match acc {
            Some(b) if xe.samples[b] >= xe.samples[a] => Some(b),
            _ => Some(a),
        })
    };
    if let Some(a) = best(&mut peaks.iter().copied().filter(fits)) {
        return Ok((a, false));
    }
    if let Some(a) = best(&mut peaks.iter().copied()) {
        return Ok((a, false));
    }
    Ok((xe.len() / 2, true))
}

/// Simulator residual losses of a generated ECG window (120 Hz) and the PPG
/// crop the mapper induces from it. With `stats`, the input is taken as
/// z-scored and mapped back to simulator units before the residuals.
pub fn sim_guided_losses(
    xe: &Waveform,
    params: &SimParams,
    mapper: &dyn ForwardMap,
    stats: Option<&ReferenceStats>,
    cfg: &GuidanceConfig,
) -> Result<SimGuidedLosses> {
    if (xe.fs - ECG_FS).abs() > 1e-9 {
        return domain(format!("generated ECG must be at {ECG_FS} Hz, got {}", xe.fs));
    }
    let stride = (ECG_FS / PPG_FS).round() as usize;
    let (anchor, degraded) = pick_anchor(xe, cfg)?;
    let crop = crop_beat(xe, anchor, cfg.crop_pre, cfg.crop_post)?;
    let dt_e = 1.0 / ECG_FS;
    let lag = if degraded { 0 } else { readout_peak_lag(params, ECG_FS) };
    let anchor_time = cfg.window_t0 + (anchor as isize + lag) as f64 * dt_e;

    let (e_scale, e_shift, p_scale, p_shift) = match stats {
        Some(s) => (s.ecg_std, s.ecg_mean, s.ppg_std, s.ppg_mean),
        None => (1.0, 0.0, 1.0, 0.0),
    };

    let real_start = crop.start + crop.pad_left as isize;
    let h: Vec<f64> = crop.real().iter().map(|v| v * e_scale + e_shift).collect();
    let t0_e = cfg.window_t0 + real_start as f64 * dt_e;
    let track_e = reference_track(params, anchor_time, t0_e, dt_e, h.len());
    let l_sim_e = euler_residual(&h, &track_e, Modality::Ecg, params, dt_e, t0_e)?.mean_square();

    let ecg_in = rate_match(&crop.samples, stride);
    let dt_p = 1.0 / PPG_FS;
    let t0_p = cfg.window_t0 + crop.start as f64 * dt_e;
    let track_p = reference_track(params, anchor_time, t0_p, dt_p, ecg_in.len());
    let ctx = CropContext {
        params,
        track: &track_p,
        t0: t0_p,
        dt: dt_p,
    };
    let xp: Vec<f64> = mapper.map(&ecg_in, &ctx)?.iter().map(|v| v * p_scale + p_shift).collect();
    if xp.len() != track_p.len() {
        return shape(format!("mapper produced {} samples, expected {}", xp.len(), track_p.len()));
    }
    let l_sim_p = euler_residual(&xp, &track_p, Modality::Ppg, params, dt_p, t0_p)?.mean_square();

    Ok(SimGuidedLosses {
        l_sim_e,
        l_sim_p,
        anchor,
        degraded,
        padded: crop.padded(),
    })
}

/// ECG and PPG training crops for the mapper, one pair per R-peak whose
/// crop fits in the window. The PPG crop is read on the rate-matched ECG
/// crop's time grid.
pub fn mapper_crops(ecg: &Waveform, ppg: &Waveform, cfg: &GuidanceConfig) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let stride = (ecg.fs / ppg.fs).round() as usize;
    let peaks = detect_events(ecg, cfg.peak_min_distance, Polarity::Max, Some(cfg.peak_rel_height))?;
    let mut out = Vec::new();
    for a in peaks {
        let crop = crop_beat(ecg, a, cfg.crop_pre, cfg.crop_post)?;
        if crop.padded() {
            continue;
        }
        let e = rate_match(&crop.samples, stride);
        let times: Vec<f64> = (0..e.len()).map(|m| (crop.start as usize + m * stride) as f64 / ecg.fs).collect();
        if times.last().is_some_and(|&t| t > (ppg.len() - 1) as f64 / ppg.fs) {
            continue;
        }
        let p = times
            .iter()
            .map(|&t| {
                let u = t * ppg.fs;
                let i = (u.floor() as usize).min(ppg.len() - 2);
                let f = u - i as f64;
                ppg.samples[i] * (1.0 - f) + ppg.samples[i + 1] * f
            })
            .collect();
        out.push((e, p));
    }
    Ok(out)
}

/// `L_RF + lambda_e L_sim_e + lambda_p L_sim_p`
pub fn flow_total(l_rf: f64, l_sim_e: f64, l_sim_p: f64, lambda_e: f64, lambda_p: f64) -> Result<f64> {
    if [l_rf, l_sim_e, l_sim_p].iter().any(|v| !v.is_finite()) {
        return domain("non-finite flow loss term");
    }
    if !(lambda_e >= 0.0 && lambda_p >= 0.0 && lambda_e.is_finite() && lambda_p.is_finite()) {
        return domain("guidance weights must be >= 0");
    }
    Ok(l_rf + lambda_e * l_sim_e + lambda_p * l_sim_p)
}
