//! Electro-hemodynamic vector fields.
//!
//! A limit-cycle oscillator on the plane supplies a shared cardiac phase
//! `theta = atan2(y, x)`. The ECG readout is driven by five phase-locked
//! Gaussian components (P, Q, R, S, T) and relaxes to its baseline with unit
//! rate; the PPG readout is driven by four components (foot, systolic peak,
//! dicrotic notch, diastolic wave) placed relative to the R-peak phase plus a
//! pulse-arrival delay, and relaxes with rate `lambda_p`.
//!
//! Phase offsets are wrapped into `[-pi, pi)` so every component is
//! symmetric about its center.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_pi(angle: f64) -> Result<f64> {
    if !angle.is_finite() {
        return domain(format!("wrap_pi: non-finite angle {angle}"));
    }
    Ok(wrap_pi_unchecked(angle))
}

#[inline]
pub(crate) fn wrap_pi_unchecked(angle: f64) -> f64 {
    if (-PI..PI).contains(&angle) {
        return angle;
    }
    let w = (angle + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Squared circular distance `[atan2(sin(a-b), cos(a-b))]^2`, in `[0, pi^2]`.
pub fn circ_sq_dist(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return domain(format!("circ_sq_dist: non-finite input ({a}, {b})"));
    }
    let d = (a - b).sin().atan2((a - b).cos());
    Ok(d * d)
}

/// A point of the phase oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x: f64,
    pub y: f64,
}

impl PhaseState {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Point on the unit circle at the given angle.
    pub fn on_cycle(theta: f64) -> Self {
        Self {
            x: theta.cos(),
            y: theta.sin(),
        }
    }

    pub fn radius(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Raw angle; `atan2(0, 0) = 0` at the origin.
    #[inline]
    pub(crate) fn angle(&self) -> f64 {
        self.y.atan2(self.x)
    }
}

/// Cardiac phase `atan2(y, x)` in `[-pi, pi]`. Undefined at the origin.
pub fn phase(state: PhaseState) -> Result<f64> {
    if !state.is_finite() {
        return domain("phase: non-finite state");
    }
    if state.x == 0.0 && state.y == 0.0 {
        return domain("phase: undefined at the origin");
    }
    Ok(state.angle())
}

/// Oscillator field `(alpha x - omega y, alpha y + omega x)` with
/// `alpha = 1 - r`.
#[inline]
pub fn phase_velocity(state: PhaseState, omega: f64) -> (f64, f64) {
    let alpha = 1.0 - state.radius();
    (
        alpha * state.x - omega * state.y,
        alpha * state.y + omega * state.x,
    )
}

/// One Gaussian drive component: center (rad), amplitude, width (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawComponent")]
pub struct GaussianComponent {
    center: f64,
    amplitude: f64,
    width: f64,
}

#[derive(Deserialize)]
struct RawComponent {
    center: f64,
    amplitude: f64,
    width: f64,
}

impl TryFrom<RawComponent> for GaussianComponent {
    type Error = Error;

    fn try_from(raw: RawComponent) -> Result<Self> {
        GaussianComponent::new(raw.center, raw.amplitude, raw.width)
    }
}

impl GaussianComponent {
    /// Builds a component; the center is wrapped into `[-pi, pi)`.
    pub fn new(center: f64, amplitude: f64, width: f64) -> Result<Self> {
        if !amplitude.is_finite() {
            return domain(format!("component amplitude must be finite, got {amplitude}"));
        }
        if !(width.is_finite() && width > 0.0) {
            return domain(format!("component width must be > 0, got {width}"));
        }
        Ok(Self {
            center: wrap_pi(center)?,
            amplitude,
            width,
        })
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// `a * d * exp(-d^2 / (2 b^2))` for a wrapped offset `d`.
    #[inline]
    pub fn drive(&self, offset: f64) -> f64 {
        let z = offset / self.width;
        self.amplitude * offset * (-0.5 * z * z).exp()
    }
}

/// Optional slow sinusoidal wander added to a constant baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wander {
    pub amplitude: f64,
    pub frequency: f64,
}

#[inline]
fn baseline_at(level: f64, wander: &Option<Wander>, t: f64) -> f64 {
    match wander {
        Some(w) => level + w.amplitude * (TAU * w.frequency * t).sin(),
        None => level,
    }
}

/// ECG morphology: five components and the baseline `e0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEcg")]
pub struct EcgParams {
    #[serde(rename = "P")]
    pub p: GaussianComponent,
    #[serde(rename = "Q")]
    pub q: GaussianComponent,
    #[serde(rename = "R")]
    pub r: GaussianComponent,
    #[serde(rename = "S")]
    pub s: GaussianComponent,
    #[serde(rename = "T")]
    pub t: GaussianComponent,
    pub baseline: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_wander: Option<Wander>,
}

#[derive(Deserialize)]
struct RawEcg {
    #[serde(rename = "P")]
    p: GaussianComponent,
    #[serde(rename = "Q")]
    q: GaussianComponent,
    #[serde(rename = "R")]
    r: GaussianComponent,
    #[serde(rename = "S")]
    s: GaussianComponent,
    #[serde(rename = "T")]
    t: GaussianComponent,
    baseline: f64,
    #[serde(default)]
    baseline_wander: Option<Wander>,
}

impl TryFrom<RawEcg> for EcgParams {
    type Error = Error;

    fn try_from(raw: RawEcg) -> Result<Self> {
        let params = EcgParams {
            p: raw.p,
            q: raw.q,
            r: raw.r,
            s: raw.s,
            t: raw.t,
            baseline: raw.baseline,
            baseline_wander: raw.baseline_wander,
        };
        params.validate()?;
        Ok(params)
    }
}

impl EcgParams {
    pub const NAMES: [&'static str; 5] = ["P", "Q", "R", "S", "T"];

    pub fn components(&self) -> [&GaussianComponent; 5] {
        [&self.p, &self.q, &self.r, &self.s, &self.t]
    }

    pub fn components_mut(&mut self) -> [&mut GaussianComponent; 5] {
        [&mut self.p, &mut self.q, &mut self.r, &mut self.s, &mut self.t]
    }

    /// Component centers unwrapped relative to R.
    pub fn relative_centers(&self) -> [f64; 5] {
        let r = self.r.center;
        self.components().map(|c| wrap_pi_unchecked(c.center - r))
    }

    /// Checks finiteness and the P < Q < R < S < T ordering.
    pub fn validate(&self) -> Result<()> {
        if !self.baseline.is_finite() {
            return domain("ecg baseline must be finite");
        }
        if !self.ordered() {
            return domain(format!(
                "ecg component centers must be ordered P < Q < R < S < T relative to R, got {:?}",
                self.relative_centers()
            ));
        }
        Ok(())
    }

    pub(crate) fn ordered(&self) -> bool {
        self.relative_centers().windows(2).all(|w| w[0] < w[1])
    }

    pub fn baseline_at(&self, t: f64) -> f64 {
        baseline_at(self.baseline, &self.baseline_wander, t)
    }

    #[inline]
    pub(crate) fn drive_at(&self, theta: f64) -> f64 {
        self.components()
            .iter()
            .map(|c| c.drive(wrap_pi_unchecked(theta - c.center)))
            .sum()
    }
}

impl Default for EcgParams {
    /// Morphology of the classic dynamical ECG model.
    fn default() -> Self {
        let c = |center, amplitude, width| GaussianComponent {
            center,
            amplitude,
            width,
        };
        Self {
            p: c(-PI / 3.0, 1.2, 0.25),
            q: c(-PI / 12.0, -5.0, 0.1),
            r: c(0.0, 30.0, 0.1),
            s: c(PI / 12.0, -7.5, 0.1),
            t: c(PI / 2.0, 0.75, 0.4),
            baseline: 0.0,
            baseline_wander: None,
        }
    }
}

/// PPG morphology: four components, pulse-arrival delay, relaxation rate
/// and baseline `p0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPpg")]
pub struct PpgParams {
    pub foot: GaussianComponent,
    pub sys: GaussianComponent,
    pub notch: GaussianComponent,
    pub dia: GaussianComponent,
    delta_pat: f64,
    lambda_p: f64,
    pub baseline: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_wander: Option<Wander>,
}

#[derive(Deserialize)]
struct RawPpg {
    foot: GaussianComponent,
    sys: GaussianComponent,
    notch: GaussianComponent,
    dia: GaussianComponent,
    delta_pat: f64,
    lambda_p: f64,
    baseline: f64,
    #[serde(default)]
    baseline_wander: Option<Wander>,
}

impl TryFrom<RawPpg> for PpgParams {
    type Error = Error;

    fn try_from(raw: RawPpg) -> Result<Self> {
        let mut p = PpgParams::new(
            [raw.foot, raw.sys, raw.notch, raw.dia],
            raw.delta_pat,
            raw.lambda_p,
            raw.baseline,
        )?;
        p.baseline_wander = raw.baseline_wander;
        Ok(p)
    }
}

impl PpgParams {
    pub const NAMES: [&'static str; 4] = ["foot", "sys", "notch", "dia"];

    /// `delta_pat` is wrapped into `[0, 2pi)`; `lambda_p` must be positive.
    pub fn new(
        components: [GaussianComponent; 4],
        delta_pat: f64,
        lambda_p: f64,
        baseline: f64,
    ) -> Result<Self> {
        if !delta_pat.is_finite() {
            return domain(format!("delta_pat must be finite, got {delta_pat}"));
        }
        if !(lambda_p.is_finite() && lambda_p > 0.0) {
            return domain(format!("lambda_p must be > 0, got {lambda_p}"));
        }
        if !baseline.is_finite() {
            return domain("ppg baseline must be finite");
        }
        let [foot, sys, notch, dia] = components;
        Ok(Self {
            foot,
            sys,
            notch,
            dia,
            delta_pat: delta_pat.rem_euclid(TAU) % TAU,
            lambda_p,
            baseline,
            baseline_wander: None,
        })
    }

    pub fn delta_pat(&self) -> f64 {
        self.delta_pat
    }

    pub fn lambda_p(&self) -> f64 {
        self.lambda_p
    }

    pub fn set_delta_pat(&mut self, delta_pat: f64) -> Result<()> {
        if !delta_pat.is_finite() {
            return domain("delta_pat must be finite");
        }
        self.delta_pat = delta_pat.rem_euclid(TAU) % TAU;
        Ok(())
    }

    pub fn set_lambda_p(&mut self, lambda_p: f64) -> Result<()> {
        if !(lambda_p.is_finite() && lambda_p > 0.0) {
            return domain(format!("lambda_p must be > 0, got {lambda_p}"));
        }
        self.lambda_p = lambda_p;
        Ok(())
    }

    pub fn components(&self) -> [&GaussianComponent; 4] {
        [&self.foot, &self.sys, &self.notch, &self.dia]
    }

    pub fn components_mut(&mut self) -> [&mut GaussianComponent; 4] {
        [&mut self.foot, &mut self.sys, &mut self.notch, &mut self.dia]
    }

    pub fn baseline_at(&self, t: f64) -> f64 {
        baseline_at(self.baseline, &self.baseline_wander, t)
    }

    #[inline]
    pub(crate) fn drive_at(&self, theta: f64, theta_r: f64) -> f64 {
        let shifted = theta - theta_r - self.delta_pat;
        self.components()
            .iter()
            .map(|c| c.drive(wrap_pi_unchecked(shifted - c.center)))
            .sum()
    }
}

impl Default for PpgParams {
    fn default() -> Self {
        let c = |center, amplitude, width| GaussianComponent {
            center,
            amplitude,
            width,
        };
        Self {
            foot: c(-0.9, 2.0, 0.25),
            sys: c(0.0, -10.0, 0.35),
            notch: c(1.1, 3.0, 0.12),
            dia: c(1.5, -4.0, 0.3),
            delta_pat: 1.6,
            lambda_p: 1.0,
            baseline: 0.0,
            baseline_wander: None,
        }
    }
}

/// Full simulator parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSim")]
pub struct SimParams {
    omega: f64,
    pub ecg: EcgParams,
    pub ppg: PpgParams,
}

#[derive(Deserialize)]
struct RawSim {
    omega: f64,
    ecg: EcgParams,
    ppg: PpgParams,
}

impl TryFrom<RawSim> for SimParams {
    type Error = Error;

    fn try_from(raw: RawSim) -> Result<Self> {
        SimParams::new(raw.omega, raw.ecg, raw.ppg)
    }
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            omega: TAU * 72.0 / 60.0,
            ecg: EcgParams::default(),
            ppg: PpgParams::default(),
        }
    }
}

impl SimParams {
    pub fn new(omega: f64, ecg: EcgParams, ppg: PpgParams) -> Result<Self> {
        if !(omega.is_finite() && omega > 0.0) {
            return domain(format!("omega must be > 0, got {omega}"));
        }
        ecg.validate()?;
        Ok(Self { omega, ecg, ppg })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn set_omega(&mut self, omega: f64) -> Result<()> {
        if !(omega.is_finite() && omega > 0.0) {
            return domain(format!("omega must be > 0, got {omega}"));
        }
        self.omega = omega;
        Ok(())
    }

    /// Heart rate in beats per minute, `60 omega / 2pi`.
    pub fn heart_rate_bpm(&self) -> f64 {
        60.0 * self.omega / TAU
    }

    pub fn with_heart_rate(mut self, bpm: f64) -> Result<Self> {
        self.set_omega(TAU * bpm / 60.0)?;
        Ok(self)
    }

    /// R-peak phase used as the PPG reference.
    pub fn theta_r(&self) -> f64 {
        self.ecg.r.center
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Random draw around the default morphology.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, ranges: &ParamRanges) -> Self {
        let mut p = SimParams::default();
        let hr = rng.random_range(ranges.heart_rate_bpm.0..=ranges.heart_rate_bpm.1);
        p.omega = TAU * hr / 60.0;
        let jitter = |c: &mut GaussianComponent, rng: &mut R, shift_center: bool| {
            if shift_center && ranges.center_jitter > 0.0 {
                c.center = wrap_pi_unchecked(
                    c.center + rng.random_range(-ranges.center_jitter..=ranges.center_jitter),
                );
            }
            c.amplitude *= rng.random_range(ranges.amplitude_scale.0..=ranges.amplitude_scale.1);
            c.width *= rng.random_range(ranges.width_scale.0..=ranges.width_scale.1);
        };
        for (i, c) in p.ecg.components_mut().into_iter().enumerate() {
            // R stays the phase reference
            jitter(c, rng, i != 2);
        }
        for c in p.ppg.components_mut() {
            jitter(c, rng, true);
        }
        p.ppg.delta_pat = rng.random_range(ranges.delta_pat.0..=ranges.delta_pat.1);
        p.ppg.lambda_p = rng.random_range(ranges.lambda_p.0..=ranges.lambda_p.1);
        p
    }
}

/// Documented sampling ranges for random parameter draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub heart_rate_bpm: (f64, f64),
    /// Symmetric jitter added to each non-R center (rad).
    pub center_jitter: f64,
    pub amplitude_scale: (f64, f64),
    pub width_scale: (f64, f64),
    pub delta_pat: (f64, f64),
    pub lambda_p: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            heart_rate_bpm: (55.0, 95.0),
            center_jitter: 0.05,
            amplitude_scale: (0.8, 1.25),
            width_scale: (0.85, 1.2),
            delta_pat: (1.0, 2.0),
            lambda_p: (0.5, 2.0),
        }
    }
}

/// `de/dt = -sum_b a_b d_b exp(-d_b^2 / 2 b_b^2) - (e - e0(t))`.
pub fn ecg_velocity(state: PhaseState, e: f64, t: f64, params: &EcgParams) -> f64 {
    -params.drive_at(state.angle()) - (e - params.baseline_at(t))
}

/// `dp/dt = +sum_g a_g d_g exp(-d_g^2 / 2 b_g^2) - lambda_p (p - p0(t))` with
/// `d_g = wrap(theta - theta_r - delta_pat - theta_g)`.
pub fn ppg_velocity(state: PhaseState, p: f64, t: f64, params: &PpgParams, theta_r: f64) -> f64 {
    params.drive_at(state.angle(), theta_r) - params.lambda_p * (p - params.baseline_at(t))
}
