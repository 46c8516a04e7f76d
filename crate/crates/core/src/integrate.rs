//! Fixed-step explicit Euler integration of the coupled oscillator/readout
//! system, modality-rate sampling, the finite-difference residual interface
//! and the discrete Gronwall deviation bound.

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::signal::Waveform;
use crate::simcore::{ecg_velocity, phase_velocity, ppg_velocity, PhaseState, SimParams};

/// Default fine integration rate (Hz); divisible by both readout rates.
pub const FINE_FS: f64 = 480.0;
pub const ECG_FS: f64 = 120.0;
pub const PPG_FS: f64 = 40.0;
pub const MIN_FINE_FS: f64 = 240.0;
/// Discarded warm-up before emitted windows (s).
pub const WARMUP_S: f64 = 2.0;
const BLOWUP_LIMIT: f64 = 1e6;

/// Coupled simulator state `(x, y, e, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub phase: PhaseState,
    pub e: f64,
    pub p: f64,
}

impl State {
    /// `(1, 0)` on the cycle with both readouts at their baselines.
    pub fn initial(params: &SimParams) -> Self {
        Self {
            phase: PhaseState::new(1.0, 0.0),
            e: params.ecg.baseline_at(0.0),
            p: params.ppg.baseline_at(0.0),
        }
    }

    fn check(&self, step: usize) -> Result<()> {
        let coords = [
            ("x", self.phase.x),
            ("y", self.phase.y),
            ("e", self.e),
            ("p", self.p),
        ];
        for (name, v) in coords {
            if !v.is_finite() || v.abs() > BLOWUP_LIMIT {
                return Err(Error::Blowup {
                    step,
                    coordinate: name,
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// Readout selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[serde(alias = "e")]
    Ecg,
    #[serde(alias = "p")]
    Ppg,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e" | "ecg" => Ok(Modality::Ecg),
            "p" | "ppg" => Ok(Modality::Ppg),
            other => domain(format!("unknown modality {other:?} (expected e|p)")),
        }
    }
}

/// Readout vector field `f_m(s, h, t)`.
#[inline]
pub fn readout_field(modality: Modality, params: &SimParams, s: PhaseState, h: f64, t: f64) -> f64 {
    match modality {
        Modality::Ecg => ecg_velocity(s, h, t, &params.ecg),
        Modality::Ppg => ppg_velocity(s, h, t, &params.ppg, params.theta_r()),
    }
}

/// One fully explicit Euler step; every field is evaluated at the pre-step
/// state.
pub fn euler_step(state: State, params: &SimParams, t: f64, dt: f64) -> Result<State> {
    if !(dt.is_finite() && dt > 0.0) {
        return domain(format!("dt must be > 0, got {dt}"));
    }
    state.check(0)?;
    let next = step_unchecked(state, params, t, dt);
    next.check(1)?;
    Ok(next)
}

#[inline]
fn step_unchecked(s: State, params: &SimParams, t: f64, dt: f64) -> State {
    let (dx, dy) = phase_velocity(s.phase, params.omega());
    let de = ecg_velocity(s.phase, s.e, t, &params.ecg);
    let dp = ppg_velocity(s.phase, s.p, t, &params.ppg, params.theta_r());
    State {
        phase: PhaseState::new(s.phase.x + dt * dx, s.phase.y + dt * dy),
        e: s.e + dt * de,
        p: s.p + dt * dp,
    }
}

/// Uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dt: f64,
    pub n: usize,
}

impl Grid {
    pub fn duration(&self) -> f64 {
        self.dt * (self.n - 1) as f64
    }

    pub fn fs(&self) -> f64 {
        1.0 / self.dt
    }
}

/// Integrated states on the fine grid; `t0` is the time of the first sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub phase: Vec<PhaseState>,
    pub e: Vec<f64>,
    pub p: Vec<f64>,
    pub grid: Grid,
    pub t0: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    pub fn readout(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Ecg => &self.e,
            Modality::Ppg => &self.p,
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.grid.dt
    }

    /// Drops the first `k` samples, shifting `t0`.
    pub fn drop_front(mut self, k: usize) -> Self {
        self.phase.drain(..k);
        self.e.drain(..k);
        self.p.drain(..k);
        self.t0 += k as f64 * self.grid.dt;
        self.grid.n -= k;
        self
    }
}

/// Integrates `duration` seconds at `fine_fs` from `init` at `t = 0`,
/// producing `round(duration * fine_fs) + 1` samples.
pub fn simulate(params: &SimParams, duration: f64, fine_fs: f64, init: State) -> Result<Trajectory> {
    if !(duration.is_finite() && duration > 0.0) {
        return domain(format!("duration must be > 0, got {duration}"));
    }
    if !(fine_fs.is_finite() && fine_fs >= MIN_FINE_FS) {
        return domain(format!("fine_fs must be >= {MIN_FINE_FS}, got {fine_fs}"));
    }
    init.check(0)?;
    let dt = 1.0 / fine_fs;
    let n = (duration * fine_fs).round() as usize + 1;
    let mut phase = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut s = init;
    for i in 0..n {
        phase.push(s.phase);
        e.push(s.e);
        p.push(s.p);
        if i + 1 < n {
            s = step_unchecked(s, params, i as f64 * dt, dt);
            s.check(i + 1)?;
        }
    }
    Ok(Trajectory {
        phase,
        e,
        p,
        grid: Grid { dt, n },
        t0: 0.0,
    })
}

/// Simulates `warmup + duration` from the default initial state and discards
/// the warm-up samples.
pub fn simulate_window(params: &SimParams, duration: f64, fine_fs: f64, warmup: f64) -> Result<Trajectory> {
    simulate_window_from(params, duration, fine_fs, warmup, State::initial(params))
}

pub fn simulate_window_from(
    params: &SimParams,
    duration: f64,
    fine_fs: f64,
    warmup: f64,
    init: State,
) -> Result<Trajectory> {
    if !(warmup.is_finite() && warmup >= 0.0) {
        return domain(format!("warmup must be >= 0, got {warmup}"));
    }
    if !(duration.is_finite() && duration > 0.0) {
        return domain(format!("duration must be > 0, got {duration}"));
    }
    let traj = simulate(params, duration + warmup, fine_fs, init)?;
    let skip = (warmup * fine_fs).round() as usize;
    Ok(traj.drop_front(skip))
}

fn stride_for(fine_fs: f64, target: f64) -> Result<usize> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::Config(format!("target rate must be > 0, got {target}")));
    }
    let ratio = fine_fs / target;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
        return Err(Error::Config(format!(
            "fine rate {fine_fs} Hz is not an integer multiple of {target} Hz"
        )));
    }
    Ok(stride as usize)
}

/// Strided subsampling of one readout over the half-open window
/// `[t0, t0 + duration)`: the closing fine-grid sample belongs to the next
/// window and is not emitted.
pub fn sample_readout(traj: &Trajectory, modality: Modality, fs: f64) -> Result<Waveform> {
    let stride = stride_for(traj.grid.fs(), fs)?;
    let h = traj.readout(modality);
    let count = (h.len() - 1) / stride;
    let samples: Vec<f64> = (0..count).map(|k| h[k * stride]).collect();
    Waveform::new(samples, fs)
}

/// ECG and PPG readouts at their modality rates.
pub fn sample_modalities(traj: &Trajectory, ecg_fs: f64, ppg_fs: f64) -> Result<(Waveform, Waveform)> {
    Ok((
        sample_readout(traj, Modality::Ecg, ecg_fs)?,
        sample_readout(traj, Modality::Ppg, ppg_fs)?,
    ))
}

/// Simulated ECG/PPG window at the standard 120/40 Hz rates.
pub fn simulate_pair(params: &SimParams, duration: f64) -> Result<(Waveform, Waveform)> {
    let traj = simulate_window(params, duration, FINE_FS, WARMUP_S)?;
    sample_modalities(&traj, ECG_FS, PPG_FS)
}

/// Per-step finite-difference residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub values: Vec<f64>,
    pub dt: f64,
}

impl ResidualSeries {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean_square(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }

    pub fn sum_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }
}

/// `r_l = (h_{l+1} - h_l)/dt - f_m(s_l, h_l, t_l)` for `l = 0..L-2`, with
/// `t_l = t0 + l dt`.
pub fn euler_residual(
    h: &[f64],
    phase_refs: &[PhaseState],
    modality: Modality,
    params: &SimParams,
    dt: f64,
    t0: f64,
) -> Result<ResidualSeries> {
    if h.len() != phase_refs.len() {
        return shape(format!(
            "signal length {} does not match phase track length {}",
            h.len(),
            phase_refs.len()
        ));
    }
    if h.len() < 2 {
        return shape("residual needs at least 2 samples");
    }
    if !(dt.is_finite() && dt > 0.0) {
        return domain(format!("dt must be > 0, got {dt}"));
    }
    let values: Vec<f64> = (0..h.len() - 1)
        .map(|l| {
            let t = t0 + l as f64 * dt;
            (h[l + 1] - h[l]) / dt - readout_field(modality, params, phase_refs[l], h[l], t)
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return domain("non-finite residual");
    }
    Ok(ResidualSeries { values, dt })
}

/// Euler-integrates a single readout along a prescribed phase track.
pub fn integrate_readout(
    modality: Modality,
    params: &SimParams,
    phase_refs: &[PhaseState],
    h0: f64,
    dt: f64,
    t0: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase_refs.len());
    let mut h = h0;
    for (l, s) in phase_refs.iter().enumerate() {
        out.push(h);
        h += dt * readout_field(modality, params, *s, h, t0 + l as f64 * dt);
    }
    out
}

/// Lipschitz constant of the readout field in its waveform state.
pub fn field_lipschitz(params: &SimParams, modality: Modality) -> f64 {
    match modality {
        Modality::Ecg => 1.0,
        Modality::Ppg => params.ppg.lambda_p(),
    }
}

/// `dt * exp(K T) * sum |r|`.
pub fn gronwall_bound_value(dt: f64, lipschitz: f64, duration: f64, sum_abs_residual: f64) -> f64 {
    dt * (lipschitz * duration).exp() * sum_abs_residual
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub bound: f64,
    pub max_observed_deviation: f64,
}

impl GronwallReport {
    /// Deviation over bound; 0 when both vanish.
    pub fn ratio(&self) -> f64 {
        if self.bound == 0.0 {
            if self.max_observed_deviation == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.max_observed_deviation / self.bound
        }
    }

    pub fn holds(&self) -> bool {
        self.max_observed_deviation <= self.bound
    }
}

/// Compares a generated readout against the simulator trajectory started
/// from its first sample along the same phase track.
pub fn gronwall_bound(
    res: &ResidualSeries,
    lipschitz: f64,
    h_generated: &[f64],
    params: &SimParams,
    phase_refs: &[PhaseState],
    modality: Modality,
    t0: f64,
) -> Result<GronwallReport> {
    if h_generated.len() != phase_refs.len() || res.values.len() + 1 != h_generated.len() {
        return shape(format!(
            "inconsistent lengths: residuals {}, signal {}, phase track {}",
            res.values.len(),
            h_generated.len(),
            phase_refs.len()
        ));
    }
    let duration = (h_generated.len() - 1) as f64 * res.dt;
    let bound = gronwall_bound_value(res.dt, lipschitz, duration, res.sum_abs());
    let reference = integrate_readout(modality, params, phase_refs, h_generated[0], res.dt, t0);
    let max_observed_deviation = h_generated
        .iter()
        .zip(&reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(GronwallReport {
        bound,
        max_observed_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::{GaussianComponent, ParamRanges};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn silent(mut p: SimParams) -> SimParams {
        for c in p.ecg.components_mut() {
            *c = GaussianComponent::new(c.center(), 0.0, c.width()).unwrap();
        }
        for c in p.ppg.components_mut() {
            *c = GaussianComponent::new(c.center(), 0.0, c.width()).unwrap();
        }
        p
    }

    // classical RK4 on the coupled system, test-only reference
    fn rk4(params: &SimParams, duration: f64, fs: f64, init: State) -> Vec<State> {
        let f = |s: State, t: f64| {
            let (dx, dy) = phase_velocity(s.phase, params.omega());
            [
                dx,
                dy,
                ecg_velocity(s.phase, s.e, t, &params.ecg),
                ppg_velocity(s.phase, s.p, t, &params.ppg, params.theta_r()),
            ]
        };
        let add = |s: State, k: [f64; 4], h: f64| State {
            phase: PhaseState::new(s.phase.x + h * k[0], s.phase.y + h * k[1]),
            e: s.e + h * k[2],
            p: s.p + h * k[3],
        };
        let dt = 1.0 / fs;
        let n = (duration * fs).round() as usize + 1;
        let mut out = vec![init];
        let mut s = init;
        for i in 0..n - 1 {
            let t = i as f64 * dt;
            let k1 = f(s, t);
            let k2 = f(add(s, k1, dt / 2.0), t + dt / 2.0);
            let k3 = f(add(s, k2, dt / 2.0), t + dt / 2.0);
            let k4 = f(add(s, k3, dt), t + dt);
            let k: [f64; 4] = std::array::from_fn(|j| (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]) / 6.0);
            s = add(s, k, dt);
            out.push(s);
        }
        out
    }

    #[test]
    fn euler_step_examples() {
        let p = silent(SimParams::default());
        let origin = State {
            phase: PhaseState::new(0.0, 0.0),
            e: 0.0,
            p: 0.0,
        };
        assert_eq!(euler_step(origin, &p, 0.0, 0.01).unwrap(), origin);

        let p = SimParams::default().with_heart_rate(60.0).unwrap();
        let s = State::initial(&p);
        let next = euler_step(s, &p, 0.0, 0.01).unwrap();
        assert!((next.phase.x - 1.0).abs() < 1e-15);
        assert!((next.phase.y - 0.01 * TAU).abs() < 1e-15);
        assert!((next.phase.y - 0.0628).abs() < 1e-4);
        assert!(euler_step(s, &p, 0.0, 0.0).is_err());
    }

    #[test]
    fn euler_local_error_is_second_order() {
        let p = SimParams::default();
        let s = State {
            phase: PhaseState::on_cycle(2.0),
            e: 0.01,
            p: -0.02,
        };
        let gap = |dt: f64| {
            let full = euler_step(s, &p, 0.0, dt).unwrap();
            let half = euler_step(euler_step(s, &p, 0.0, dt / 2.0).unwrap(), &p, dt / 2.0, dt / 2.0).unwrap();
            (full.e - half.e).abs() + (full.p - half.p).abs() + (full.phase.y - half.phase.y).abs()
        };
        let ratio = gap(1e-3) / gap(5e-4);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn blowup_is_reported() {
        let s = State {
            phase: PhaseState::new(1.0, 0.0),
            e: 2e6,
            p: 0.0,
        };
        match euler_step(s, &SimParams::default(), 0.0, 0.01) {
            Err(Error::Blowup { coordinate, .. }) => assert_eq!(coordinate, "e"),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn silent_params_hold_baselines() {
        let mut p = silent(SimParams::default());
        p.ecg.baseline = 0.4;
        p.ppg.baseline = -1.5;
        let traj = simulate(&p, 3.0, 480.0, State::initial(&p)).unwrap();
        assert!(traj.e.iter().all(|&v| v == 0.4));
        assert!(traj.p.iter().all(|&v| v == -1.5));
        assert_eq!(traj.len(), 1441);
    }

    #[test]
    fn simulate_rejects_coarse_grid() {
        let p = SimParams::default();
        assert!(simulate(&p, 1.0, 120.0, State::initial(&p)).is_err());
        assert!(simulate(&p, 0.0, 480.0, State::initial(&p)).is_err());
    }

    #[test]
    fn limit_cycle_attraction() {
        // The Euler map settles on a circle of radius r* solving
        // (1 + dt (1 - r))^2 (1 + dt^2 w^2) = 1, which tends to 1 as dt -> 0.
        let p = SimParams::default();
        let w = p.omega();
        for fs in [480.0, 4800.0, 48000.0] {
            let dt = 1.0 / fs;
            let r_star = 1.0 - (1.0 / (1.0 + dt * dt * w * w).sqrt() - 1.0) / dt;
            for r0 in [0.1, 0.5, 1.5, 2.0] {
                let init = State {
                    phase: PhaseState::new(r0, 0.0),
                    e: 0.0,
                    p: 0.0,
                };
                let traj = simulate(&p, 10.0, fs, init).unwrap();
                let r = traj.phase.last().unwrap().radius();
                assert!((r - r_star).abs() < 1e-3, "fs {fs} r0 {r0} -> {r} vs {r_star}");
            }
            assert!((r_star - 1.0 - 0.5 * w * w * dt).abs() < 0.5 * w * w * dt * 0.05);
        }
    }

    #[test]
    fn one_dominant_peak_per_cycle() {
        let p = SimParams::default();
        let duration = 10.0;
        let traj = simulate(&p, duration, 480.0, State::initial(&p)).unwrap();
        let e = &traj.e;
        let max = e.iter().cloned().fold(f64::MIN, f64::max);
        // strict local maxima above half the global maximum
        let peaks = (1..e.len() - 1)
            .filter(|&i| e[i] > e[i - 1] && e[i] > e[i + 1] && e[i] > 0.5 * max)
            .count();
        let expected = (duration * p.omega() / TAU).round() as i64;
        assert!((peaks as i64 - expected).abs() <= 1, "{peaks} vs {expected}");
    }

    #[test]
    fn window_geometry() {
        let p = SimParams::default();
        let traj = simulate_window(&p, 10.0, 480.0, 2.0).unwrap();
        assert_eq!(traj.len(), 4801);
        assert!((traj.t0 - 2.0).abs() < 1e-12);
        let (ecg, ppg) = sample_modalities(&traj, 120.0, 40.0).unwrap();
        assert_eq!(ecg.len(), 1200);
        assert_eq!(ppg.len(), 400);
        for (k, v) in ecg.samples.iter().enumerate() {
            assert_eq!(*v, traj.e[4 * k]);
        }
        for (k, v) in ppg.samples.iter().enumerate() {
            assert_eq!(*v, traj.p[12 * k]);
        }
        assert!(matches!(sample_modalities(&traj, 70.0, 40.0), Err(Error::Config(_))));
    }

    #[test]
    fn stride_one_is_identity_over_window() {
        let p = SimParams::default();
        let traj = simulate(&p, 1.0, 480.0, State::initial(&p)).unwrap();
        let w = sample_readout(&traj, Modality::Ecg, 480.0).unwrap();
        assert_eq!(w.samples, traj.e[..traj.len() - 1].to_vec());
    }

    #[test]
    fn first_order_global_convergence() {
        // smooth segment: T wave region, no QRS inside the horizon
        let p = SimParams::default();
        let init = State {
            phase: PhaseState::on_cycle(0.8),
            e: 0.0,
            p: 0.0,
        };
        let horizon = 0.25;
        let reference = rk4(&p, horizon, 480.0 * 8.0, init);
        let r_end = reference.last().unwrap();
        let err = |fs: f64| {
            let traj = simulate(&p, horizon, fs, init).unwrap();
            (traj.e.last().unwrap() - r_end.e).abs()
        };
        let coarse = err(480.0);
        let fine = err(960.0);
        let ratio = coarse / fine;
        assert!(ratio > 1.7 && ratio < 2.3, "ratio {ratio}");
    }

    #[test]
    fn residual_zero_closure_on_fine_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let p = SimParams::sample(&mut rng, &ParamRanges::default());
            let traj = simulate_window(&p, 4.0, 480.0, 1.0).unwrap();
            for m in [Modality::Ecg, Modality::Ppg] {
                let r = euler_residual(traj.readout(m), &traj.phase, m, &p, traj.grid.dt, traj.t0).unwrap();
                assert!(r.max_abs() <= 1e-9, "{m:?}: {}", r.max_abs());
            }
        }
    }

    #[test]
    fn residual_perturbation_touches_two_steps() {
        let p = SimParams::default();
        let traj = simulate(&p, 1.0, 480.0, State::initial(&p)).unwrap();
        let dt = traj.grid.dt;
        let k = 100;
        let eps = 1e-3;
        let mut h = traj.e.clone();
        h[k] += eps;
        let r = euler_residual(&h, &traj.phase, Modality::Ecg, &p, dt, 0.0).unwrap();
        for (l, v) in r.values.iter().enumerate() {
            if l == k - 1 {
                assert!((v - eps / dt).abs() < 1e-6);
            } else if l == k {
                // -eps/dt from the stencil, +eps from the unit relaxation slope
                assert!((v - (-eps / dt + eps)).abs() < 1e-6);
            } else {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn residual_shape_and_constant_cases() {
        let p = silent(SimParams::default());
        let track = vec![PhaseState::on_cycle(0.0); 5];
        let r = euler_residual(&[0.0; 5], &track, Modality::Ppg, &p, 0.01, 0.0).unwrap();
        assert!(r.values.iter().all(|v| *v == 0.0));
        assert!(matches!(
            euler_residual(&[0.0; 4], &track, Modality::Ecg, &p, 0.01, 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn lipschitz_constants() {
        let mut p = SimParams::default();
        assert_eq!(field_lipschitz(&p, Modality::Ecg), 1.0);
        p.ppg.set_lambda_p(0.5).unwrap();
        assert_eq!(field_lipschitz(&p, Modality::Ppg), 0.5);
        p.ppg.set_lambda_p(2.0).unwrap();
        assert_eq!(field_lipschitz(&p, Modality::Ppg), 2.0);
    }

    #[test]
    fn gronwall_value_by_hand() {
        let b = gronwall_bound_value(0.01, 1.0, 1.0, 1.0);
        assert!((b - 0.01 * std::f64::consts::E).abs() < 1e-15);
        assert!((b - 0.02718).abs() < 1e-5);
    }

    #[test]
    fn gronwall_zero_residual_and_perturbations() {
        let p = SimParams::default();
        let traj = simulate(&p, 1.0, 480.0, State::initial(&p)).unwrap();
        let dt = traj.grid.dt;
        for m in [Modality::Ecg, Modality::Ppg] {
            let h = traj.readout(m);
            let res = euler_residual(h, &traj.phase, m, &p, dt, 0.0).unwrap();
            let rep = gronwall_bound(&res, field_lipschitz(&p, m), h, &p, &traj.phase, m, 0.0).unwrap();
            assert!(rep.bound < 1e-9 && rep.max_observed_deviation < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..20 {
            let h: Vec<f64> = traj.e.iter().map(|v| v + rng.random_range(-1e-3..1e-3)).collect();
            let res = euler_residual(&h, &traj.phase, Modality::Ecg, &p, dt, 0.0).unwrap();
            let rep = gronwall_bound(&res, 1.0, &h, &p, &traj.phase, Modality::Ecg, 0.0).unwrap();
            assert!(rep.holds() && rep.ratio() > 0.0 && rep.ratio() <= 1.0);
        }
    }

    #[test]
    fn modality_parse() {
        assert_eq!("e".parse::<Modality>().unwrap(), Modality::Ecg);
        assert_eq!("ppg".parse::<Modality>().unwrap(), Modality::Ppg);
        assert!("x".parse::<Modality>().is_err());
    }
}
