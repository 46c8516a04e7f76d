//! Four-term composite fitting objective.

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::integrate::{sample_modalities, simulate_window_from, State, ECG_FS, PPG_FS};
use crate::signal::{diff, zscore, Waveform};
use crate::simcore::{PhaseState, SimParams};

use super::peaks::{detect_events, Polarity};

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitWeights {
    pub w_ecg: f64,
    pub w_ppg: f64,
    pub w_deriv: f64,
    pub w_peak: f64,
}

impl Default for FitWeights {
    fn default() -> Self {
        Self {
            w_ecg: 5.0,
            w_ppg: 0.25,
            w_deriv: 3.0,
            w_peak: 12.0,
        }
    }
}

/// Simulator-fitting configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub weights: FitWeights,
    /// Fraction of iterations spent on the ECG-only objective.
    pub rho_ecg: f64,
    /// Event window before each detected peak (s).
    pub peak_pre: f64,
    /// Event window after each detected peak (s).
    pub peak_post: f64,
    pub max_iters: usize,
    /// Adam learning rate in transformed coordinates.
    pub step_size: f64,
    /// Relative central-difference step.
    pub fd_eps: f64,
    /// z-score simulated and target waveforms before comparing.
    pub zscore: bool,
    /// Initialize heart rate and phase offset from detected target R-peaks.
    pub event_init: bool,
    /// Minimum spacing between detected events (s).
    pub event_min_distance: f64,
    /// Event height threshold relative to the tallest event.
    pub event_rel_height: f64,
    pub fine_fs: f64,
    pub warmup: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            weights: FitWeights::default(),
            rho_ecg: 0.5,
            peak_pre: 0.20,
            peak_post: 0.60,
            max_iters: 200,
            step_size: 0.01,
            fd_eps: 1e-4,
            zscore: true,
            event_init: true,
            event_min_distance: 0.3,
            event_rel_height: 0.5,
            fine_fs: 480.0,
            warmup: 2.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.w_ecg, w.w_ppg, w.w_deriv, w.w_peak]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return domain("fit weights must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.rho_ecg) {
            return domain(format!("rho_ecg must lie in [0, 1], got {}", self.rho_ecg));
        }
        if !(self.peak_pre >= 0.0 && self.peak_post >= 0.0) {
            return domain("peak windows must be >= 0");
        }
        if !(self.step_size > 0.0 && self.fd_eps > 0.0) {
            return domain("step_size and fd_eps must be > 0");
        }
        Ok(())
    }

    /// Number of ECG-only iterations, `ceil(rho_ecg * max_iters)`.
    pub fn warmup_iters(&self) -> usize {
        (self.rho_ecg * self.max_iters as f64).ceil() as usize
    }
}

/// Paired target window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPair {
    pub ecg: Waveform,
    pub ppg: Waveform,
    pub group_id: String,
}

impl TargetPair {
    pub fn new(ecg: Waveform, ppg: Waveform, group_id: impl Into<String>) -> Result<Self> {
        let period = (1.0 / ecg.fs).max(1.0 / ppg.fs);
        if (ecg.duration() - ppg.duration()).abs() > period + 1e-12 {
            return domain(format!(
                "ecg ({} s) and ppg ({} s) durations differ by more than one sample period",
                ecg.duration(),
                ppg.duration()
            ));
        }
        Ok(Self {
            ecg,
            ppg,
            group_id: group_id.into(),
        })
    }

    pub fn duration(&self) -> f64 {
        self.ecg.duration()
    }
}

/// Objective stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Full,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Full => "full",
        })
    }
}

/// Loss components with their ECG/PPG sub-parts kept apart.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitComponents {
    pub ecg: f64,
    pub ppg: f64,
    pub deriv_ecg: f64,
    pub deriv_ppg: f64,
    pub peak_ecg: f64,
    pub peak_ppg: f64,
    /// Set when no events were detected in one modality and the peak term
    /// fell back to whole-window MSE.
    pub peak_fallback: bool,
}

impl FitComponents {
    pub fn deriv(&self) -> f64 {
        self.deriv_ecg + self.deriv_ppg
    }

    pub fn peak(&self) -> f64 {
        self.peak_ecg + self.peak_ppg
    }

    pub fn is_finite(&self) -> bool {
        [
            self.ecg,
            self.ppg,
            self.deriv_ecg,
            self.deriv_ppg,
            self.peak_ecg,
            self.peak_ppg,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Weighted objective. The warm-up stage keeps only ECG terms.
pub fn total_fit_loss(c: &FitComponents, w: &FitWeights, stage: Stage) -> f64 {
    match stage {
        Stage::Full => w.w_ecg * c.ecg + w.w_ppg * c.ppg + w.w_deriv * c.deriv() + w.w_peak * c.peak(),
        Stage::Warmup => w.w_ecg * c.ecg + w.w_deriv * c.deriv_ecg + w.w_peak * c.peak_ecg,
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Target with normalization and event windows resolved once.
#[derive(Debug, Clone)]
pub struct PreparedTarget {
    pub ecg: Vec<f64>,
    pub ppg: Vec<f64>,
    pub r_events: Vec<usize>,
    pub s_events: Vec<usize>,
    ecg_windows: Vec<(usize, usize)>,
    ppg_windows: Vec<(usize, usize)>,
    pub duration: f64,
}

fn event_windows(events: &[usize], len: usize, fs: f64, pre: f64, post: f64) -> Vec<(usize, usize)> {
    let pre = (pre * fs).round() as usize;
    let post = (post * fs).round() as usize;
    events
        .iter()
        .map(|&t| (t.saturating_sub(pre), (t + post).min(len - 1)))
        .collect()
}

impl PreparedTarget {
    pub fn new(target: &TargetPair, cfg: &FitConfig) -> Result<Self> {
        if (target.ecg.fs - ECG_FS).abs() > 1e-9 || (target.ppg.fs - PPG_FS).abs() > 1e-9 {
            return domain(format!(
                "targets must be sampled at {ECG_FS}/{PPG_FS} Hz, got {}/{}",
                target.ecg.fs, target.ppg.fs
            ));
        }
        let norm = |x: &[f64]| if cfg.zscore { zscore(x) } else { x.to_vec() };
        let ecg = norm(&target.ecg.samples);
        let ppg = norm(&target.ppg.samples);
        let r_events = detect_events(
            &Waveform::new(ecg.clone(), ECG_FS)?,
            cfg.event_min_distance,
            Polarity::Max,
            Some(cfg.event_rel_height),
        )?;
        let s_events = detect_events(
            &Waveform::new(ppg.clone(), PPG_FS)?,
            cfg.event_min_distance,
            Polarity::Max,
            Some(cfg.event_rel_height),
        )?;
        Ok(Self {
            ecg_windows: event_windows(&r_events, ecg.len(), ECG_FS, cfg.peak_pre, cfg.peak_post),
            ppg_windows: event_windows(&s_events, ppg.len(), PPG_FS, cfg.peak_pre, cfg.peak_post),
            duration: target.ecg.duration(),
            ecg,
            ppg,
            r_events,
            s_events,
        })
    }
}

/// Simulated window used by the objective; `phase0` is the initial
/// oscillator angle before warm-up.
pub fn simulate_for_fit(params: &SimParams, phase0: f64, duration: f64, cfg: &FitConfig) -> Result<(Waveform, Waveform)> {
    let init = State {
        phase: PhaseState::on_cycle(phase0),
        e: params.ecg.baseline_at(0.0),
        p: params.ppg.baseline_at(0.0),
    };
    let traj = simulate_window_from(params, duration, cfg.fine_fs, cfg.warmup, init)?;
    sample_modalities(&traj, ECG_FS, PPG_FS)
}

fn peak_term(sim: &[f64], target: &[f64], windows: &[(usize, usize)]) -> (f64, bool) {
    if windows.is_empty() {
        return (mse(sim, target), true);
    }
    let total: f64 = windows
        .iter()
        .map(|&(a, b)| mse(&sim[a..=b], &target[a..=b]))
        .sum();
    (total / windows.len() as f64, false)
}

/// Components for already simulated waveforms.
pub fn components_from_sim(sim_ecg: &[f64], sim_ppg: &[f64], target: &PreparedTarget, cfg: &FitConfig) -> Result<FitComponents> {
    if sim_ecg.len() != target.ecg.len() || sim_ppg.len() != target.ppg.len() {
        return shape(format!(
            "simulated lengths {}/{} do not match target {}/{}",
            sim_ecg.len(),
            sim_ppg.len(),
            target.ecg.len(),
            target.ppg.len()
        ));
    }
    let (se, sp) = if cfg.zscore {
        (zscore(sim_ecg), zscore(sim_ppg))
    } else {
        (sim_ecg.to_vec(), sim_ppg.to_vec())
    };
    let (peak_ecg, fe) = peak_term(&se, &target.ecg, &target.ecg_windows);
    let (peak_ppg, fp) = peak_term(&sp, &target.ppg, &target.ppg_windows);
    Ok(FitComponents {
        ecg: mse(&se, &target.ecg),
        ppg: mse(&sp, &target.ppg),
        deriv_ecg: mse(&diff(&se), &diff(&target.ecg)),
        deriv_ppg: mse(&diff(&sp), &diff(&target.ppg)),
        peak_ecg,
        peak_ppg,
        peak_fallback: fe || fp,
    })
}

pub fn components_at(params: &SimParams, phase0: f64, target: &PreparedTarget, cfg: &FitConfig) -> Result<FitComponents> {
    let (e, p) = simulate_for_fit(params, phase0, target.duration, cfg)?;
    components_from_sim(&e.samples, &p.samples, target, cfg)
}

/// Loss components of `params` against `target`, simulating from the default
/// initial state.
pub fn fit_loss_components(params: &SimParams, target: &TargetPair, cfg: &FitConfig) -> Result<FitComponents> {
    let prepared = PreparedTarget::new(target, cfg)?;
    components_at(params, 0.0, &prepared, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::simulate_pair;

    fn self_target(p: &SimParams) -> TargetPair {
        let (e, g) = simulate_pair(p, 10.0).unwrap();
        TargetPair::new(e, g, "g").unwrap()
    }

    #[test]
    fn exact_params_give_zero_loss() {
        let p = SimParams::default();
        let c = fit_loss_components(&p, &self_target(&p), &FitConfig::default()).unwrap();
        for v in [c.ecg, c.ppg, c.deriv(), c.peak()] {
            assert!(v <= 1e-8, "{c:?}");
        }
        assert!(!c.peak_fallback);
    }

    #[test]
    fn constant_offset_on_ecg() {
        let p = SimParams::default();
        let mut t = self_target(&p);
        let c_off = 0.3;
        for v in &mut t.ecg.samples {
            *v += c_off;
        }
        let cfg = FitConfig {
            zscore: false,
            ..FitConfig::default()
        };
        let c = fit_loss_components(&p, &t, &cfg).unwrap();
        assert!((c.ecg - c_off * c_off).abs() < 1e-12);
        assert!(c.deriv_ecg < 1e-20);
        assert!((c.peak_ecg - c_off * c_off).abs() < 1e-12);
    }

    #[test]
    fn weighted_totals() {
        let w = FitWeights::default();
        let ones = FitComponents {
            ecg: 1.0,
            ppg: 1.0,
            deriv_ecg: 0.5,
            deriv_ppg: 0.5,
            peak_ecg: 0.5,
            peak_ppg: 0.5,
            peak_fallback: false,
        };
        assert!((total_fit_loss(&ones, &w, Stage::Full) - 20.25).abs() < 1e-12);
        assert!((total_fit_loss(&ones, &w, Stage::Warmup) - 12.5).abs() < 1e-12);
        assert_eq!(total_fit_loss(&FitComponents::default(), &w, Stage::Full), 0.0);
    }

    #[test]
    fn total_is_linear_in_components() {
        let w = FitWeights::default();
        let unit = |k: usize| {
            let mut c = FitComponents::default();
            match k {
                0 => c.ecg = 1.0,
                1 => c.ppg = 1.0,
                2 => c.deriv_ecg = 1.0,
                3 => c.deriv_ppg = 1.0,
                4 => c.peak_ecg = 1.0,
                _ => c.peak_ppg = 1.0,
            }
            c
        };
        let full = [5.0, 0.25, 3.0, 3.0, 12.0, 12.0];
        let warm = [5.0, 0.0, 3.0, 0.0, 12.0, 0.0];
        for k in 0..6 {
            assert_eq!(total_fit_loss(&unit(k), &w, Stage::Full), full[k]);
            assert_eq!(total_fit_loss(&unit(k), &w, Stage::Warmup), warm[k]);
        }
    }

    #[test]
    fn flat_target_falls_back() {
        let p = SimParams::default();
        let e = Waveform::new(vec![0.0; 1200], 120.0).unwrap();
        let g = Waveform::new(vec![0.0; 400], 40.0).unwrap();
        let t = TargetPair::new(e, g, "flat").unwrap();
        let c = fit_loss_components(&p, &t, &FitConfig::default()).unwrap();
        assert!(c.peak_fallback);
        assert!((c.peak_ecg - c.ecg).abs() < 1e-12);
    }

    #[test]
    fn target_rates_are_checked() {
        let e = Waveform::new(vec![0.0; 1000], 100.0).unwrap();
        let g = Waveform::new(vec![0.0; 400], 40.0).unwrap();
        assert!(TargetPair::new(e.clone(), g.clone(), "x").is_ok());
        let t = TargetPair::new(e, g, "x").unwrap();
        assert!(PreparedTarget::new(&t, &FitConfig::default()).is_err());
        let short = Waveform::new(vec![0.0; 200], 40.0).unwrap();
        let e = Waveform::new(vec![0.0; 1200], 120.0).unwrap();
        assert!(TargetPair::new(e, short, "x").is_err());
    }

    #[test]
    fn warmup_ignores_ppg_parameters() {
        let p = SimParams::default();
        let target = self_target(&SimParams::default().with_heart_rate(66.0).unwrap());
        let cfg = FitConfig::default();
        let prepared = PreparedTarget::new(&target, &cfg).unwrap();
        let base = total_fit_loss(&components_at(&p, 0.0, &prepared, &cfg).unwrap(), &cfg.weights, Stage::Warmup);
        let mut q = p.clone();
        q.ppg.set_delta_pat(0.3).unwrap();
        q.ppg.set_lambda_p(3.0).unwrap();
        q.ppg.sys = crate::simcore::GaussianComponent::new(0.4, -3.0, 0.2).unwrap();
        let moved = total_fit_loss(&components_at(&q, 0.0, &prepared, &cfg).unwrap(), &cfg.weights, Stage::Warmup);
        assert_eq!(base, moved);
    }
}
