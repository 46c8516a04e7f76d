//! Waveform fidelity and ECG fiducial metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::fit::{detect_events, Polarity};
use crate::integrate::{sample_readout, simulate_window, Modality, ECG_FS, FINE_FS, WARMUP_S};
use crate::simcore::{wrap_pi, SimParams};
use crate::signal::{mean, std_dev, Waveform};

fn paired<'a>(a: &'a Waveform, b: &'a Waveform) -> Result<(&'a [f64], &'a [f64])> {
    if a.len() != b.len() {
        return shape(format!("waveform lengths differ: {} vs {}", a.len(), b.len()));
    }
    if (a.fs - b.fs).abs() > 1e-9 {
        return shape(format!("sample rates differ: {} vs {}", a.fs, b.fs));
    }
    Ok((&a.samples, &b.samples))
}

pub fn mae(a: &Waveform, b: &Waveform) -> Result<f64> {
    let (x, y) = paired(a, b)?;
    Ok(x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64)
}

pub fn rmse(a: &Waveform, b: &Waveform) -> Result<f64> {
    let (x, y) = paired(a, b)?;
    Ok((x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64).sqrt())
}

/// Beats per minute from the mean R-R interval; `None` with fewer than two
/// peaks.
pub fn hr_from_peaks(peaks: &[usize], fs: f64) -> Option<f64> {
    if peaks.len() < 2 || !(fs.is_finite() && fs > 0.0) {
        return None;
    }
    let span = (peaks[peaks.len() - 1] - peaks[0]) as f64 / fs;
    (span > 0.0).then(|| 60.0 * (peaks.len() - 1) as f64 / span)
}

/// Mean `|gen - ref|` over segments where both rates are defined, and the
/// fraction of such segments.
pub fn hr_mae(gen: &[Option<f64>], reference: &[Option<f64>]) -> Result<(Option<f64>, f64)> {
    if gen.len() != reference.len() {
        return shape("heart-rate lists differ in length");
    }
    let diffs: Vec<f64> = gen
        .iter()
        .zip(reference)
        .filter_map(|(g, r)| Some((g.as_ref()? - r.as_ref()?).abs()))
        .collect();
    let coverage = if gen.is_empty() { 0.0 } else { diffs.len() as f64 / gen.len() as f64 };
    Ok(((!diffs.is_empty()).then(|| mean(&diffs)), coverage))
}

/// Discrete Fréchet distance with pointwise distance `|a_i - b_j|`.
pub fn frechet_curve_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return shape("Fréchet distance of an empty curve");
    }
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, &ai) in a.iter().enumerate() {
        for j in 0..m {
            let d = (ai - b[j]).abs();
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Fréchet distance between Gaussians fitted to the two sample sets:
/// `(mu_a - mu_b)^2 + (sigma_a - sigma_b)^2`.
pub fn frechet_gaussian(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return shape("Fréchet distance of an empty sample");
    }
    Ok((mean(a) - mean(b)).powi(2) + (std_dev(a) - std_dev(b)).powi(2))
}

/// Landmark sample indices of one beat.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fiducials {
    pub p_on: Option<usize>,
    pub p_off: Option<usize>,
    pub qrs_on: Option<usize>,
    pub r: Option<usize>,
    pub qrs_off: Option<usize>,
    pub t_on: Option<usize>,
    pub t_off: Option<usize>,
}

impl Fiducials {
    pub const NAMES: [&'static str; 7] = ["P_on", "P_off", "QRS_on", "R", "QRS_off", "T_on", "T_off"];

    pub fn as_array(&self) -> [Option<usize>; 7] {
        [self.p_on, self.p_off, self.qrs_on, self.r, self.qrs_off, self.t_on, self.t_off]
    }

    /// `P_on < P_off <= QRS_on < R < QRS_off <= T_on < T_off` over the
    /// present landmarks.
    pub fn is_ordered(&self) -> bool {
        let a = self.as_array();
        // strict between these neighbours, non-strict at P_off/QRS_on and QRS_off/T_on
        let strict = [true, false, true, true, false, true];
        let present: Vec<(usize, usize)> = a.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
        present.windows(2).all(|w| {
            let ((i, x), (j, y)) = (w[0], w[1]);
            let needs_strict = (i..j).any(|k| strict[k]);
            if needs_strict {
                x < y
            } else {
                x <= y
            }
        })
    }
}

/// Delineation thresholds and search windows (seconds unless noted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelineationConfig {
    pub r_min_distance: f64,
    pub r_rel_height: f64,
    /// Candidate R-peaks whose steepest nearby slope is below this fraction of
    /// the steepest candidate's are dropped (tall T waves).
    pub r_slope_fraction: f64,
    /// Fraction of the QRS peak slope marking QRS onset/offset.
    pub qrs_slope_fraction: f64,
    /// Longest sub-threshold run bridged while walking out of the QRS.
    pub qrs_gap: f64,
    pub qrs_slope_window: f64,
    /// Fraction of P/T height above baseline marking wave limits.
    pub wave_fraction: f64,
    /// P peak search window `[R - p_search_start, R - p_search_end]`.
    pub p_search_start: f64,
    pub p_search_end: f64,
    /// T peak search window `[R + t_search_start, R + min(t_search_end, t_search_rr * RR)]`.
    pub t_search_start: f64,
    pub t_search_end: f64,
    pub t_search_rr: f64,
    pub baseline_window: f64,
}

impl Default for DelineationConfig {
    fn default() -> Self {
        Self {
            r_min_distance: 0.25,
            r_rel_height: 0.5,
            r_slope_fraction: 0.3,
            qrs_slope_fraction: 0.05,
            qrs_gap: 0.02,
            qrs_slope_window: 0.1,
            wave_fraction: 0.10,
            p_search_start: 0.30,
            p_search_end: 0.05,
            t_search_start: 0.08,
            t_search_end: 0.55,
            t_search_rr: 0.6,
            baseline_window: 0.2,
        }
    }
}

/// Whether the dominant deflection is negative.
pub fn qrs_polarity(x: &[f64]) -> Polarity {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2];
    let hi = sorted[sorted.len() - 1] - med;
    let lo = med - sorted[0];
    if lo > hi {
        Polarity::Min
    } else {
        Polarity::Max
    }
}

fn central_slope(x: &[f64], fs: f64) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (x[hi] - x[lo]) * fs / (hi - lo) as f64
        })
        .collect()
}

fn interp(x: &[f64], pos: f64) -> Option<f64> {
    if !(pos >= 0.0 && pos <= (x.len() - 1) as f64) {
        return None;
    }
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    Some(if i + 1 < x.len() { x[i] + f * (x[i + 1] - x[i]) } else { x[i] })
}

/// Vertex of the parabola through a local maximum and its neighbours.
fn refine_peak(x: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= x.len() {
        return i as f64;
    }
    let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
    let den = a - 2.0 * b + c;
    if den < 0.0 {
        i as f64 + 0.5 * (a - c) / den
    } else {
        i as f64
    }
}

/// Walks from `start` in `dir` while |slope| stays above `thr`, bridging
/// sub-threshold runs of at most `gap` samples. Returns the last sample
/// above threshold.
fn walk_slope(slope: &[f64], start: usize, dir: isize, thr: f64, gap: usize, limit: usize) -> Option<usize> {
    let n = slope.len() as isize;
    let mut last = start as isize;
    let mut i = start as isize;
    for _ in 0..limit {
        i += dir;
        if i < 0 || i >= n {
            return None;
        }
        if slope[i as usize].abs() >= thr {
            last = i;
        } else if (i - last).abs() > gap as isize {
            return Some(last as usize);
        }
    }
    None
}

/// Fractional position where `x - base` first falls to `level`, walking
/// from `peak` in `dir`.
fn level_crossing(x: &[f64], peak: usize, dir: isize, base: f64, level: f64, limit: usize) -> Option<f64> {
    let n = x.len() as isize;
    let mut i = peak as isize;
    for _ in 0..limit {
        let j = i + dir;
        if j < 0 || j >= n {
            return None;
        }
        let (a, b) = (x[i as usize] - base, x[j as usize] - base);
        if b <= level {
            let f = if a > b { (a - level) / (a - b) } else { 0.0 };
            return Some(i as f64 + dir as f64 * f);
        }
        i = j;
    }
    None
}

fn largest_local_max(x: &[f64], lo: usize, hi: usize) -> Option<usize> {
    let hi = hi.min(x.len().saturating_sub(2));
    (lo.max(1)..=hi)
        .filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1])
        .max_by(|&i, &j| x[i].total_cmp(&x[j]).then(j.cmp(&i)))
}

fn min_over(x: &[f64], lo: usize, hi: usize) -> f64 {
    x[lo..=hi.min(x.len() - 1)].iter().cloned().fold(f64::INFINITY, f64::min)
}

fn secs(s: f64, fs: f64) -> usize {
    (s * fs).round() as usize
}

fn to_index(pos: f64, n: usize) -> Option<usize> {
    let i = pos.round();
    (i >= 0.0 && i < n as f64).then_some(i as usize)
}

/// A P or T wave as fractional peak and limits.
#[derive(Debug, Clone, Copy)]
struct Wave {
    peak: f64,
    on: f64,
    off: f64,
}

/// Distance from the peak of a Gaussian bump to its `frac` level, in units of
/// the distance to its half-height level.
fn flank_ratio(frac: f64) -> f64 {
    (frac.ln() / 0.5f64.ln()).sqrt()
}

/// P wave: onset from the clean left flank, offset mirrored about the peak.
fn p_wave(x: &[f64], r: usize, fs: f64, cfg: &DelineationConfig) -> Option<Wave> {
    let lo = r.saturating_sub(secs(cfg.p_search_start, fs));
    let pk = largest_local_max(x, lo, r.checked_sub(secs(cfg.p_search_end, fs))?)?;
    let reach = secs(cfg.baseline_window, fs);
    let base = min_over(x, pk.saturating_sub(reach), pk);
    let height = x[pk] - base;
    if height <= 0.0 {
        return None;
    }
    let peak = refine_peak(x, pk);
    let half = level_crossing(x, pk, -1, base, 0.5 * height, reach)?;
    let on = peak - flank_ratio(cfg.wave_fraction) * (peak - half);
    Some(Wave { peak, on, off: 2.0 * peak - on })
}

/// T wave: offset from the clean right flank, onset mirrored about the peak.
fn t_wave(x: &[f64], r: usize, rr: Option<f64>, fs: f64, cfg: &DelineationConfig) -> Option<Wave> {
    let span = rr.map_or(cfg.t_search_end, |rr| cfg.t_search_end.min(cfg.t_search_rr * rr));
    let pk = largest_local_max(x, r + secs(cfg.t_search_start, fs), r + secs(span, fs))?;
    let reach = secs(cfg.baseline_window, fs);
    let base = min_over(x, pk, pk + reach);
    let height = x[pk] - base;
    if height <= 0.0 {
        return None;
    }
    let peak = refine_peak(x, pk);
    let half = level_crossing(x, pk, 1, base, 0.5 * height, 2 * reach)?;
    let off = peak + flank_ratio(cfg.wave_fraction) * (half - peak);
    Some(Wave { peak, on: 2.0 * peak - off, off })
}

/// Slope with the far flank of each neighbouring wave removed, using the
/// wave's mirror image about its peak.
fn deflated_slope(slope: &[f64], p: Option<Wave>, t: Option<Wave>) -> Vec<f64> {
    let mut out = slope.to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let fi = i as f64;
        if let Some(p) = p {
            if fi > p.peak && fi <= p.off + 2.0 {
                *v += interp(slope, 2.0 * p.peak - fi).unwrap_or(0.0);
            }
        }
        if let Some(t) = t {
            if fi < t.peak && fi >= t.on - 2.0 {
                *v += interp(slope, 2.0 * t.peak - fi).unwrap_or(0.0);
            }
        }
    }
    out
}

/// Drops landmarks until the ordering invariant holds, outermost waves first.
fn enforce_order(mut f: Fiducials) -> Fiducials {
    if f.is_ordered() {
        return f;
    }
    f.p_on = None;
    f.p_off = None;
    if f.is_ordered() {
        return f;
    }
    f.t_on = None;
    f.t_off = None;
    if f.is_ordered() {
        return f;
    }
    Fiducials { r: f.r, ..Default::default() }
}

pub fn delineate(ecg: &Waveform) -> Result<Vec<Fiducials>> {
    delineate_with(ecg, &DelineationConfig::default())
}

/// Per-beat landmarks. R-peaks come from event detection on the dominant
/// polarity; P and T peaks are the tallest local maxima in their search
/// windows with limits at `wave_fraction` of their height; the QRS extends
/// while the slope, with P and T flanks removed, stays above
/// `qrs_slope_fraction` of its peak.
pub fn delineate_with(ecg: &Waveform, cfg: &DelineationConfig) -> Result<Vec<Fiducials>> {
    let fs = ecg.fs;
    if ecg.len() < 3 || std_dev(&ecg.samples) == 0.0 {
        return Ok(Vec::new());
    }
    let polarity = qrs_polarity(&ecg.samples);
    let candidates = detect_events(ecg, cfg.r_min_distance, polarity, Some(cfg.r_rel_height))?;
    // inverted leads are delineated on the flipped trace
    let flipped: Vec<f64>;
    let x: &[f64] = match polarity {
        Polarity::Max => &ecg.samples,
        Polarity::Min => {
            flipped = ecg.samples.iter().map(|v| -v).collect();
            &flipped
        }
    };
    let slope = central_slope(x, fs);
    let n = x.len();
    let gap = secs(cfg.qrs_gap, fs);
    let sw = secs(cfg.qrs_slope_window, fs);
    let steepest = |r: usize| {
        let k = sw / 2;
        slope[r.saturating_sub(k)..=(r + k).min(n - 1)].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let top = candidates.iter().map(|&r| steepest(r)).fold(0.0, f64::max);
    let peaks: Vec<usize> = candidates.into_iter().filter(|&r| steepest(r) >= cfg.r_slope_fraction * top).collect();
    let mut out = Vec::with_capacity(peaks.len());
    for (k, &r) in peaks.iter().enumerate() {
        let rr = match (k.checked_sub(1).map(|j| peaks[j]), peaks.get(k + 1)) {
            (_, Some(&next)) => Some((next - r) as f64 / fs),
            (Some(prev), None) => Some((r - prev) as f64 / fs),
            _ => None,
        };
        let p = p_wave(x, r, fs, cfg);
        let t = t_wave(x, r, rr, fs, cfg);
        let ys = deflated_slope(&slope, p, t);
        let lo = r.saturating_sub(sw);
        let hi = (r + sw).min(n - 1);
        let peak_slope = ys[lo..=hi].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let thr = cfg.qrs_slope_fraction * peak_slope;
        let (qrs_on, qrs_off) = if peak_slope > 0.0 {
            (walk_slope(&ys, r, -1, thr, gap, 2 * sw), walk_slope(&ys, r, 1, thr, gap, 2 * sw))
        } else {
            (None, None)
        };
        let mut f = Fiducials {
            r: Some(r),
            qrs_on,
            qrs_off,
            ..Default::default()
        };
        if let (Some(p), Some(on)) = (p, qrs_on) {
            f.p_on = to_index(p.on, n);
            // a wave ends where the QRS starts
            f.p_off = to_index(p.off, n).map(|o| o.min(on));
        }
        if let (Some(t), Some(off)) = (t, qrs_off) {
            f.t_on = to_index(t.on, n).map(|o| o.max(off));
            f.t_off = to_index(t.off, n);
        }
        out.push(enforce_order(f));
    }
    Ok(out)
}

/// Clinical intervals (ms) and ST deviation of one beat.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FiducialMeasurements {
    pub pr_ms: Option<f64>,
    pub qrs_ms: Option<f64>,
    pub qt_ms: Option<f64>,
    pub qtcf_ms: Option<f64>,
    pub st_j60: Option<f64>,
    pub p_dur_ms: Option<f64>,
    pub t_dur_ms: Option<f64>,
}

impl FiducialMeasurements {
    pub const NAMES: [&'static str; 7] = ["PR", "QRS", "QT", "QTcF", "ST-J60", "P dur.", "T dur."];

    pub fn as_array(&self) -> [Option<f64>; 7] {
        [
            self.pr_ms,
            self.qrs_ms,
            self.qt_ms,
            self.qtcf_ms,
            self.st_j60,
            self.p_dur_ms,
            self.t_dur_ms,
        ]
    }

    fn from_array(a: [Option<f64>; 7]) -> Self {
        Self {
            pr_ms: a[0],
            qrs_ms: a[1],
            qt_ms: a[2],
            qtcf_ms: a[3],
            st_j60: a[4],
            p_dur_ms: a[5],
            t_dur_ms: a[6],
        }
    }
}

/// Fridericia-corrected QT.
pub fn qtcf(qt_ms: f64, rr_s: f64) -> Result<f64> {
    if !(rr_s.is_finite() && rr_s > 0.0) {
        return domain(format!("RR must be > 0 s, got {rr_s}"));
    }
    Ok(qt_ms / rr_s.cbrt())
}

pub fn intervals(f: &Fiducials, fs: f64, rr_s: f64) -> Result<FiducialMeasurements> {
    if !(rr_s.is_finite() && rr_s > 0.0) {
        return domain(format!("RR must be > 0 s, got {rr_s}"));
    }
    let ms = |a: Option<usize>, b: Option<usize>| Some((b? as f64 - a? as f64) / fs * 1000.0);
    let qt = ms(f.qrs_on, f.t_off);
    Ok(FiducialMeasurements {
        pr_ms: ms(f.p_on, f.qrs_on),
        qrs_ms: ms(f.qrs_on, f.qrs_off),
        qt_ms: qt,
        qtcf_ms: qt.map(|q| qtcf(q, rr_s)).transpose()?,
        st_j60: None,
        p_dur_ms: ms(f.p_on, f.p_off),
        t_dur_ms: ms(f.t_on, f.t_off),
    })
}

/// Amplitude 60 ms after QRS offset minus the PR-segment mean (the 80 ms
/// before QRS onset when P offset is missing).
pub fn st_j60(ecg: &Waveform, f: &Fiducials) -> Option<f64> {
    let x = &ecg.samples;
    let j = f.qrs_off? + secs(0.06, ecg.fs);
    if j >= x.len() {
        return None;
    }
    let on = f.qrs_on?;
    let base = match f.p_off {
        Some(p) if p <= on => mean(&x[p..=on]),
        _ => {
            let lo = on.checked_sub(secs(0.08, ecg.fs))?;
            if lo == on {
                x[on]
            } else {
                mean(&x[lo..on])
            }
        }
    };
    Some(x[j] - base)
}

/// Per-beat measurements of a window; RR of each beat is the following
/// interval (the preceding one for the last beat).
pub fn beat_measurements(ecg: &Waveform, beats: &[Fiducials]) -> Result<Vec<FiducialMeasurements>> {
    let rs: Vec<usize> = beats.iter().filter_map(|b| b.r).collect();
    if rs.len() < 2 {
        return Ok(Vec::new());
    }
    beats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let rr = if i + 1 < rs.len() { rs[i + 1] - rs[i] } else { rs[i] - rs[i - 1] };
            let mut m = intervals(f, ecg.fs, rr as f64 / ecg.fs)?;
            m.st_j60 = st_j60(ecg, f);
            Ok(m)
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median of each measurement over the beats where it is present.
pub fn segment_measurements(ecg: &Waveform) -> Result<FiducialMeasurements> {
    let beats = delineate(ecg)?;
    let per_beat = beat_measurements(ecg, &beats)?;
    let mut a = [None; 7];
    for (k, slot) in a.iter_mut().enumerate() {
        *slot = median(per_beat.iter().filter_map(|m| m.as_array()[k]).collect());
    }
    Ok(FiducialMeasurements::from_array(a))
}

/// Landmarks implied by the component geometry of a noiseless simulated
/// window, for checking [`delineate`].
///
/// Each landmark is the ECG sample nearest to the unwrapped phase at which it
/// occurs: R at the R center, P and T limits at `center -+ b sqrt(2 ln 10)`
/// (10% of a Gaussian bump), and the QRS limits at the outermost samples
/// around R where the summed Q+R+S drive is at least 5% of its peak. Beats
/// whose P onset or T offset fall outside the window are dropped. P offset
/// and T onset are clipped to the QRS limits when the waves overlap.
pub fn simulator_landmarks(params: &SimParams, duration: f64) -> Result<(Waveform, Vec<Fiducials>)> {
    let traj = simulate_window(params, duration, FINE_FS, WARMUP_S)?;
    let ecg = sample_readout(&traj, Modality::Ecg, ECG_FS)?;
    let stride = (FINE_FS / ECG_FS).round() as usize;
    let mut unwrapped = Vec::with_capacity(ecg.len());
    for k in 0..ecg.len() {
        let th = traj.phase[k * stride].angle();
        let v = match unwrapped.last() {
            None => th,
            Some(&prev) => prev + wrap_pi(th - prev)?,
        };
        unwrapped.push(v);
    }
    let nearest = |target: f64| -> Option<usize> {
        let i = unwrapped.partition_point(|&v| v < target);
        if i == 0 || i >= unwrapped.len() {
            return None;
        }
        Some(if target - unwrapped[i - 1] < unwrapped[i] - target { i - 1 } else { i })
    };
    let e = &params.ecg;
    let theta_r = params.theta_r();
    let ten = (2.0 * 10f64.ln()).sqrt();
    let rel = |c: f64| wrap_pi(c - theta_r);
    let (p_on, p_off) = (rel(e.p.center() - ten * e.p.width())?, rel(e.p.center() + ten * e.p.width())?);
    let (t_on, t_off) = (rel(e.t.center() - ten * e.t.width())?, rel(e.t.center() + ten * e.t.width())?);
    let qrs_drive = |th: f64| -> Result<f64> {
        let mut s = 0.0;
        for c in [&e.q, &e.r, &e.s] {
            s += c.drive(wrap_pi(th - c.center())?);
        }
        Ok(s.abs())
    };

    let first = ((unwrapped[0] - theta_r) / std::f64::consts::TAU).floor() as i64;
    let last = ((unwrapped[unwrapped.len() - 1] - theta_r) / std::f64::consts::TAU).ceil() as i64;
    let mut beats = Vec::new();
    for k in first..=last {
        let base = theta_r + std::f64::consts::TAU * k as f64;
        let Some(r) = nearest(base) else { continue };
        if nearest(base + p_on).is_none() || nearest(base + t_off).is_none() {
            continue;
        }
        let half = (0.15 * ECG_FS) as usize;
        let lo = r.saturating_sub(half);
        let hi = (r + half).min(ecg.len() - 1);
        let drive: Vec<f64> = (lo..=hi).map(|i| qrs_drive(unwrapped[i])).collect::<Result<_>>()?;
        let peak = drive.iter().cloned().fold(0.0, f64::max);
        let above = |i: usize| drive[i - lo] >= 0.05 * peak;
        let qrs_on = (lo..=r).find(|&i| above(i));
        let qrs_off = (r..=hi).rev().find(|&i| above(i));
        // overlapping waves end where the QRS starts, as in delineation
        beats.push(Fiducials {
            p_on: nearest(base + p_on),
            p_off: nearest(base + p_off).zip(qrs_on).map(|(a, b)| a.min(b)),
            qrs_on,
            r: Some(r),
            qrs_off,
            t_on: nearest(base + t_on).zip(qrs_off).map(|(a, b)| a.max(b)),
            t_off: nearest(base + t_off),
        });
    }
    Ok((ecg, beats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeEntry {
    pub mae: Option<f64>,
    pub coverage: f64,
}

/// Per-measurement MAE over pairs where both sides are present.
pub fn fiducial_mae(gen: &[FiducialMeasurements], reference: &[FiducialMeasurements]) -> Result<BTreeMap<String, MaeEntry>> {
    if gen.len() != reference.len() {
        return shape("measurement lists differ in length");
    }
    let mut out = BTreeMap::new();
    for (k, name) in FiducialMeasurements::NAMES.iter().enumerate() {
        let diffs: Vec<f64> = gen
            .iter()
            .zip(reference)
            .filter_map(|(g, r)| Some((g.as_array()[k]? - r.as_array()[k]?).abs()))
            .collect();
        let coverage = if gen.is_empty() { 0.0 } else { diffs.len() as f64 / gen.len() as f64 };
        out.insert(
            name.to_string(),
            MaeEntry {
                mae: (!diffs.is_empty()).then(|| mean(&diffs)),
                coverage,
            },
        );
    }
    Ok(out)
}
