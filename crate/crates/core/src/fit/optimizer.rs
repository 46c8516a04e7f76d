//! Staged Adam fitting over numeric gradients in transformed coordinates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::integrate::ECG_FS;
use crate::signal::Waveform;
use crate::simcore::{wrap_pi_unchecked, GaussianComponent, SimParams};

use super::objective::{
    components_at, simulate_for_fit, total_fit_loss, FitComponents, FitConfig, PreparedTarget, Stage, TargetPair,
};
use super::peaks::{detect_events, Polarity};

/// Layout of the optimized vector:
/// `[ln omega, (center, amplitude, ln width) x 5 ECG, (center, amplitude,
/// ln width) x 4 PPG, delta_pat, ln lambda_p, phase0]`.
/// Baselines are held fixed.
pub const N_COORDS: usize = 1 + 15 + 12 + 2 + 1;
const ECG_COORDS: std::ops::Range<usize> = 0..16;
const PHASE0: usize = N_COORDS - 1;

pub fn coordinate_name(i: usize) -> String {
    match i {
        0 => "ln_omega".into(),
        1..=15 => {
            let k = (i - 1) / 3;
            let f = ["center", "amplitude", "ln_width"][(i - 1) % 3];
            format!("ecg.{}.{}", crate::simcore::EcgParams::NAMES[k], f)
        }
        16..=27 => {
            let k = (i - 16) / 3;
            let f = ["center", "amplitude", "ln_width"][(i - 16) % 3];
            format!("ppg.{}.{}", crate::simcore::PpgParams::NAMES[k], f)
        }
        28 => "ppg.delta_pat".into(),
        29 => "ln_lambda_p".into(),
        30 => "phase0".into(),
        _ => format!("coord{i}"),
    }
}

/// Maps parameters (plus the initial phase) to the unconstrained vector.
pub fn to_vector(p: &SimParams, phase0: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(N_COORDS);
    v.push(p.omega().ln());
    for c in p.ecg.components() {
        v.extend([c.center(), c.amplitude(), c.width().ln()]);
    }
    for c in p.ppg.components() {
        v.extend([c.center(), c.amplitude(), c.width().ln()]);
    }
    v.push(p.ppg.delta_pat());
    v.push(p.ppg.lambda_p().ln());
    v.push(phase0);
    v
}

/// Inverse of [`to_vector`]; `template` supplies the fixed baselines.
/// Positivity holds for every finite input. ECG center ordering is not
/// enforced here.
pub fn from_vector(v: &[f64], template: &SimParams) -> Result<(SimParams, f64)> {
    if v.len() != N_COORDS {
        return domain(format!("parameter vector must have {N_COORDS} entries, got {}", v.len()));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return domain(format!("non-finite coordinate {}", coordinate_name(i)));
    }
    let mut p = template.clone();
    p.set_omega(v[0].exp())?;
    for (k, c) in p.ecg.components_mut().into_iter().enumerate() {
        let b = 1 + 3 * k;
        *c = GaussianComponent::new(v[b], v[b + 1], v[b + 2].exp())?;
    }
    for (k, c) in p.ppg.components_mut().into_iter().enumerate() {
        let b = 16 + 3 * k;
        *c = GaussianComponent::new(v[b], v[b + 1], v[b + 2].exp())?;
    }
    p.ppg.set_delta_pat(v[28])?;
    p.ppg.set_lambda_p(v[29].exp())?;
    Ok((p, wrap_pi_unchecked(v[PHASE0])))
}

/// Central differences with per-coordinate step `fd_eps * max(1, |x_i|)`,
/// evaluated in parallel. Coordinates outside `coords` get zero gradient.
pub fn numeric_gradient<F>(f: F, x: &[f64], fd_eps: f64, coords: Option<&[usize]>) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(fd_eps.is_finite() && fd_eps > 0.0) {
        return domain(format!("fd_eps must be > 0, got {fd_eps}"));
    }
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    let partials: Vec<Result<(usize, f64)>> = coords
        .par_iter()
        .map(|&i| {
            let h = fd_eps * x[i].abs().max(1.0);
            let mut probe = x.to_vec();
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            if !(up.is_finite() && down.is_finite()) {
                return domain(format!("non-finite loss probing coordinate {i}"));
            }
            Ok((i, (up - down) / (2.0 * h)))
        })
        .collect();
    let mut g = vec![0.0; x.len()];
    for r in partials {
        let (i, d) = r?;
        g[i] = d;
    }
    Ok(g)
}

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub stage: Stage,
    pub l_ecg: f64,
    pub l_ppg: f64,
    pub l_deriv: f64,
    pub l_peak: f64,
    /// Objective of the active stage.
    pub total: f64,
}

impl TraceRow {
    fn new(iter: usize, stage: Stage, c: &FitComponents, total: f64) -> Self {
        Self {
            iter,
            stage,
            l_ecg: c.ecg,
            l_ppg: c.ppg,
            l_deriv: c.deriv(),
            l_peak: c.peak(),
            total,
        }
    }
}

/// CSV with header `iter,stage,L_ecg,L_ppg,L_deriv,L_peak,total`.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iter,stage,L_ecg,L_ppg,L_deriv,L_peak,total\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            r.iter, r.stage, r.l_ecg, r.l_ppg, r.l_deriv, r.l_peak, r.total
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: SimParams,
    /// Initial oscillator angle aligning the simulation with the target.
    pub phase0: f64,
    /// Components of the returned iterate.
    pub components: FitComponents,
    /// Full-objective value of the returned iterate.
    pub loss: f64,
    pub trace: Vec<TraceRow>,
    pub warmup_iters: usize,
}

impl FitResult {
    /// Simulated ECG/PPG window of the fitted parameters.
    pub fn simulate(&self, duration: f64, cfg: &FitConfig) -> Result<(Waveform, Waveform)> {
        simulate_for_fit(&self.params, self.phase0, duration, cfg)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn mean_rr_samples(events: &[usize]) -> Option<f64> {
    (events.len() >= 2).then(|| (events[events.len() - 1] - events[0]) as f64 / (events.len() - 1) as f64)
}

/// Heart rate from target R-peak spacing, then the initial phase from the
/// median offset between simulated and target R-peaks.
fn event_initialize(params: &mut SimParams, target: &PreparedTarget, cfg: &FitConfig) -> Result<f64> {
    if let Some(rr) = mean_rr_samples(&target.r_events) {
        params.set_omega(std::f64::consts::TAU * ECG_FS / rr)?;
    } else {
        return Ok(0.0);
    }
    let (sim, _) = simulate_for_fit(params, 0.0, target.duration, cfg)?;
    let sim = sim.zscored();
    let sim_events = detect_events(&sim, cfg.event_min_distance, Polarity::Max, Some(cfg.event_rel_height))?;
    if sim_events.is_empty() {
        return Ok(0.0);
    }
    let mut offsets: Vec<f64> = target
        .r_events
        .iter()
        .map(|&t| {
            let nearest = sim_events
                .iter()
                .min_by_key(|&&s| s.abs_diff(t))
                .copied()
                .unwrap_or(t);
            nearest as f64 - t as f64
        })
        .collect();
    offsets.sort_by(f64::total_cmp);
    let median = offsets[offsets.len() / 2];
    Ok(wrap_pi_unchecked(params.omega() * median / ECG_FS))
}

/// Staged fit: `ceil(rho_ecg * max_iters)` Adam iterations on the ECG-only
/// objective, the rest on the full objective. Returns the iterate with the
/// lowest full objective.
pub fn fit_simulator(target: &TargetPair, init: &SimParams, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if cfg.max_iters == 0 {
        return domain("max_iters must be >= 1");
    }
    let prepared = PreparedTarget::new(target, cfg)?;
    let mut start = init.clone();
    let phase0 = if cfg.event_init {
        event_initialize(&mut start, &prepared, cfg)?
    } else {
        0.0
    };

    let eval = |x: &[f64]| -> Result<FitComponents> {
        let (p, ph) = from_vector(x, init)?;
        components_at(&p, ph, &prepared, cfg)
    };

    let warmup_iters = cfg.warmup_iters();
    let ecg_coords: Vec<usize> = ECG_COORDS.chain(std::iter::once(PHASE0)).collect();
    let mut x = to_vector(&start, phase0);
    let mut adam = Adam::new(N_COORDS, cfg.step_size);
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut best: Option<(f64, Vec<f64>, FitComponents)> = None;

    for iter in 0..cfg.max_iters {
        let stage = if iter < warmup_iters { Stage::Warmup } else { Stage::Full };
        if iter == warmup_iters {
            // fresh moments for the new objective
            adam = Adam::new(N_COORDS, cfg.step_size);
        }
        let comps = match eval(&x) {
            Ok(c) if c.is_finite() => c,
            Ok(_) => {
                return Err(Error::Diverged {
                    iters: iter,
                    reason: "non-finite loss".into(),
                    trace,
                })
            }
            Err(e) => {
                return Err(Error::Diverged {
                    iters: iter,
                    reason: e.to_string(),
                    trace,
                })
            }
        };
        let total = total_fit_loss(&comps, &cfg.weights, stage);
        trace.push(TraceRow::new(iter, stage, &comps, total));
        let full = total_fit_loss(&comps, &cfg.weights, Stage::Full);
        if best.as_ref().is_none_or(|(b, _, _)| full < *b) {
            best = Some((full, x.clone(), comps));
        }
        if iter + 1 == cfg.max_iters {
            break;
        }
        let objective = |probe: &[f64]| -> f64 {
            match eval(probe) {
                Ok(c) => total_fit_loss(&c, &cfg.weights, stage),
                Err(_) => f64::NAN,
            }
        };
        let coords = match stage {
            Stage::Warmup => Some(ecg_coords.as_slice()),
            Stage::Full => None,
        };
        let g = numeric_gradient(objective, &x, cfg.fd_eps, coords).map_err(|e| Error::Diverged {
            iters: iter,
            reason: e.to_string(),
            trace: trace.clone(),
        })?;
        let previous = x.clone();
        adam.step(&mut x, &g);
        // keep P < Q < R < S < T; a crossing step leaves the centers unchanged
        if let Ok((p, _)) = from_vector(&x, init) {
            if !p.ecg.ordered() {
                for k in 0..5 {
                    x[1 + 3 * k] = previous[1 + 3 * k];
                }
            }
        }
    }

    let (loss, xb, components) = best.expect("at least one iteration");
    let (params, phase0) = from_vector(&xb, init)?;
    Ok(FitResult {
        params,
        phase0,
        components,
        loss,
        trace,
        warmup_iters: warmup_iters.min(cfg.max_iters),
    })
}

/// Mean absolute R-peak timing error (ms) between two ECG windows; peaks are
/// matched to their nearest counterpart.
pub fn r_peak_timing_error_ms(a: &Waveform, b: &Waveform, cfg: &FitConfig) -> Result<Option<f64>> {
    let pa = detect_events(&a.zscored(), cfg.event_min_distance, Polarity::Max, Some(cfg.event_rel_height))?;
    let pb = detect_events(&b.zscored(), cfg.event_min_distance, Polarity::Max, Some(cfg.event_rel_height))?;
    if pa.is_empty() || pb.is_empty() {
        return Ok(None);
    }
    let total: f64 = pb
        .iter()
        .map(|&t| pa.iter().map(|&s| s.abs_diff(t)).min().unwrap() as f64)
        .sum();
    Ok(Some(1000.0 * total / pb.len() as f64 / a.fs))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::objective::fit_loss_components;
    use crate::integrate::simulate_pair;
    use crate::simcore::ParamRanges;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vector_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SimParams::sample(&mut rng, &ParamRanges::default());
        let v = to_vector(&p, 0.7);
        let (q, ph) = from_vector(&v, &p).unwrap();
        assert!((ph - 0.7).abs() < 1e-15);
        let w = to_vector(&q, ph);
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(coordinate_name(0), "ln_omega");
        assert_eq!(coordinate_name(8), "ecg.R.amplitude");
        assert_eq!(coordinate_name(30), "phase0");
    }

    #[test]
    fn from_vector_keeps_positivity() {
        let p = SimParams::default();
        let mut v = to_vector(&p, 0.0);
        v[0] = -40.0;
        v[3] = -50.0;
        v[29] = 30.0;
        let (q, _) = from_vector(&v, &p).unwrap();
        assert!(q.omega() > 0.0 && q.ecg.p.width() > 0.0 && q.ppg.lambda_p() > 0.0);
        v[5] = f64::NAN;
        let err = from_vector(&v, &p).unwrap_err().to_string();
        assert!(err.contains("ecg.Q.amplitude"), "{err}");
    }

    #[test]
    fn gradient_of_quadratic_and_constant() {
        let g = numeric_gradient(|x| x[0] * x[0], &[3.0], 1e-4, None).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = numeric_gradient(|_| 4.2, &[1.0, -2.0, 7.0], 1e-4, None).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = numeric_gradient(|x| x[0] + 10.0 * x[1], &[1.0, 1.0], 1e-4, Some(&[1])).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 10.0).abs() < 1e-8);
        assert!(numeric_gradient(|x| 1.0 / x[0], &[0.0], 1e-4, None).is_ok());
        assert!(numeric_gradient(|_| f64::NAN, &[0.0], 1e-4, None).is_err());
        assert!(numeric_gradient(|x| x[0], &[0.0], 0.0, None).is_err());
    }

    #[test]
    fn r_amplitude_gradient_matches_sweep() {
        let truth = SimParams::default();
        let (e, g) = simulate_pair(&truth, 10.0).unwrap();
        let target = TargetPair::new(e, g, "g").unwrap();
        let cfg = FitConfig::default();
        let mut p = truth.clone();
        p.ecg.r = GaussianComponent::new(0.0, 36.0, 0.1).unwrap();
        let l_ecg = |a: f64| {
            let mut q = p.clone();
            q.ecg.r = GaussianComponent::new(0.0, a, 0.1).unwrap();
            fit_loss_components(&q, &target, &cfg).unwrap().ecg
        };
        let x = to_vector(&p, 0.0);
        let g = numeric_gradient(
            |v| {
                let (q, _) = from_vector(v, &p).unwrap();
                fit_loss_components(&q, &target, &cfg).unwrap().ecg
            },
            &x,
            1e-4,
            Some(&[8]),
        )
        .unwrap();
        // dense sweep: least-squares slope over a symmetric stencil
        let a0 = 36.0;
        let hs: Vec<f64> = (1..=8).map(|k| k as f64 * 5e-4).collect();
        let num: f64 = hs.iter().map(|h| h * (l_ecg(a0 + h) - l_ecg(a0 - h))).sum();
        let den: f64 = hs.iter().map(|h| 2.0 * h * h).sum();
        let sweep = num / den;
        assert!(((g[8] - sweep) / sweep).abs() < 1e-4, "{} vs {}", g[8], sweep);
    }

    #[test]
    fn self_generated_target_stays_put() {
        let p = SimParams::default();
        let (e, g) = simulate_pair(&p, 10.0).unwrap();
        let target = TargetPair::new(e, g, "g").unwrap();
        let cfg = FitConfig {
            max_iters: 6,
            event_init: false,
            ..FitConfig::default()
        };
        let r = fit_simulator(&target, &p, &cfg).unwrap();
        assert!(r.loss <= 1e-6, "{}", r.loss);
        assert_eq!(r.trace.len(), 6);
        assert_eq!(r.warmup_iters, 3);
        assert!((r.params.omega() - p.omega()).abs() < 1e-9);
    }

    #[test]
    fn staged_iteration_counts() {
        let p = SimParams::default();
        let (e, g) = simulate_pair(&p, 4.0).unwrap();
        let target = TargetPair::new(e, g, "g").unwrap();
        let cfg = FitConfig {
            max_iters: 7,
            ..FitConfig::default()
        };
        let r = fit_simulator(&target, &p, &cfg).unwrap();
        let warm = r.trace.iter().filter(|t| t.stage == Stage::Warmup).count();
        assert_eq!(warm, 4);
        assert_eq!(r.trace.len(), 7);
        let csv = trace_to_csv(&r.trace);
        assert!(csv.starts_with("iter,stage,L_ecg,L_ppg,L_deriv,L_peak,total\n"));
        assert_eq!(csv.lines().count(), 8);
        let cfg0 = FitConfig {
            max_iters: 0,
            ..FitConfig::default()
        };
        assert!(fit_simulator(&target, &p, &cfg0).is_err());
    }
}
