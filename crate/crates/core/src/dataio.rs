//! Paired synthetic dataset generation, the JSON-lines record format and the
//! combined configuration document.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fit::{FitConfig, TargetPair};
use crate::flow::{FlowConfig, FlowRecord};
use crate::integrate::{sample_modalities, simulate_window_from, State, ECG_FS, FINE_FS, PPG_FS, WARMUP_S};
use crate::latentlosses::PaeWeights;
use crate::signal::{fmt_f64, mean, std_dev, zscore, Waveform};
use crate::simcore::{GaussianComponent, ParamRanges, PhaseState, SimParams};

pub const WINDOW_S: f64 = 10.0;
pub const ECG_LEN: usize = 1200;
pub const PPG_LEN: usize = 400;
pub const RECORDS_FILE: &str = "records.jsonl";
pub const META_FILE: &str = "meta.json";
const FORMAT: &str = "ehsim-dataset";
const VERSION: u32 = 1;

/// One z-scored, synchronized 10 s ECG/PPG window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub group_id: String,
    pub seed: u64,
    pub ppg: Vec<f64>,
    pub ecg: Vec<f64>,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.ecg.len() != ECG_LEN || self.ppg.len() != PPG_LEN {
            return Err(Error::Shape(format!(
                "record needs {ECG_LEN} ECG and {PPG_LEN} PPG samples, got {} and {}",
                self.ecg.len(),
                self.ppg.len()
            )));
        }
        for (name, x) in [("ecg", &self.ecg), ("ppg", &self.ppg)] {
            if x.iter().any(|v| !v.is_finite()) {
                return domain(format!("{name} has non-finite samples"));
            }
            let (m, s) = (mean(x), std_dev(x));
            if m.abs() > 1e-6 || (s - 1.0).abs() > 1e-6 {
                return domain(format!("{name} is not z-scored (mean {m}, sd {s})"));
            }
        }
        Ok(())
    }

    pub fn ecg_waveform(&self) -> Result<Waveform> {
        Waveform::new(self.ecg.clone(), ECG_FS)
    }

    pub fn ppg_waveform(&self) -> Result<Waveform> {
        Waveform::new(self.ppg.clone(), PPG_FS)
    }

    pub fn target_pair(&self) -> Result<TargetPair> {
        TargetPair::new(self.ecg_waveform()?, self.ppg_waveform()?, self.group_id.clone())
    }

    pub fn flow_record(&self) -> FlowRecord {
        FlowRecord {
            group_id: self.group_id.clone(),
            ecg: self.ecg.clone(),
            ppg: self.ppg.clone(),
        }
    }

    fn to_line(&self) -> Result<String> {
        let list = |x: &[f64]| x.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",");
        Ok(format!(
            "{{\"group_id\":{},\"seed\":{},\"ppg\":[{}],\"ecg\":[{}]}}",
            serde_json::to_string(&self.group_id)?,
            self.seed,
            list(&self.ppg),
            list(&self.ecg)
        ))
    }
}

/// Measurement artefacts applied per record. Noise and wander amplitudes are
/// relative to the clean signal's standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub ecg_white_sd: f64,
    pub ppg_white_sd: f64,
    pub wander_amplitude: f64,
    /// Hz.
    pub wander_frequency: f64,
    /// Multiplicative jitter on every component amplitude.
    pub amplitude_jitter_sd: f64,
    /// Start each record at a uniformly random oscillator phase.
    pub random_phase: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            ecg_white_sd: 0.05,
            ppg_white_sd: 0.05,
            wander_amplitude: 0.1,
            wander_frequency: 0.25,
            amplitude_jitter_sd: 0.05,
            random_phase: true,
        }
    }
}

impl NoiseConfig {
    /// Noiseless records starting from the default initial state.
    pub fn none() -> Self {
        Self {
            ecg_white_sd: 0.0,
            ppg_white_sd: 0.0,
            wander_amplitude: 0.0,
            wander_frequency: 0.0,
            amplitude_jitter_sd: 0.0,
            random_phase: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ecg_white_sd,
            self.ppg_white_sd,
            self.wander_amplitude,
            self.wander_frequency,
            self.amplitude_jitter_sd,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return domain("noise settings must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub group_id: String,
    pub index: usize,
    pub reason: String,
}

/// Generation settings and outcome, stored next to the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub ecg_fs: f64,
    pub ppg_fs: f64,
    pub duration: f64,
    pub warmup: f64,
    pub fine_fs: f64,
    pub master_seed: u64,
    pub n_per_group: usize,
    pub noise: NoiseConfig,
    pub groups: BTreeMap<String, SimParams>,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn target_pairs(&self) -> Result<Vec<TargetPair>> {
        self.records.iter().map(DatasetRecord::target_pair).collect()
    }

    pub fn flow_records(&self) -> Vec<FlowRecord> {
        self.records.iter().map(DatasetRecord::flow_record).collect()
    }
}

/// Seed of record `index` in the `group`-th group.
pub fn record_seed(master_seed: u64, group: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(group as u64);
    // each u64 draw consumes two 32-bit words
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// `n` group parameter sets drawn from `ranges`, named `g0`, `g1`, ...
pub fn sample_groups(n: usize, ranges: &ParamRanges, seed: u64) -> BTreeMap<String, SimParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| (format!("g{i}"), SimParams::sample(&mut rng, ranges))).collect()
}

fn jitter_amplitudes(params: &mut SimParams, sd: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let scale = |c: &mut GaussianComponent, rng: &mut ChaCha8Rng| -> Result<()> {
        let z: f64 = StandardNormal.sample(rng);
        *c = GaussianComponent::new(c.center(), c.amplitude() * (1.0 + sd * z), c.width())?;
        Ok(())
    };
    for c in params.ecg.components_mut() {
        scale(c, rng)?;
    }
    for c in params.ppg.components_mut() {
        scale(c, rng)?;
    }
    Ok(())
}

fn corrupt(x: &[f64], fs: f64, white: f64, noise: &NoiseConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sd = std_dev(x);
    let phase = rng.random_range(0.0..TAU);
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let t = i as f64 / fs;
            let z: f64 = StandardNormal.sample(rng);
            v + sd * (white * z + noise.wander_amplitude * (TAU * noise.wander_frequency * t + phase).sin())
        })
        .collect()
}

/// One record: simulate 12 s, drop the warm-up, sample, corrupt, z-score.
pub fn generate_record(group_id: &str, params: &SimParams, seed: u64, noise: &NoiseConfig) -> Result<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.clone();
    if noise.amplitude_jitter_sd > 0.0 {
        jitter_amplitudes(&mut p, noise.amplitude_jitter_sd, &mut rng)?;
    }
    let mut init = State::initial(&p);
    if noise.random_phase {
        init.phase = PhaseState::on_cycle(rng.random_range(-PI..PI));
    }
    let traj = simulate_window_from(&p, WINDOW_S, FINE_FS, WARMUP_S, init)?;
    let (ecg, ppg) = sample_modalities(&traj, ECG_FS, PPG_FS)?;
    let ecg = corrupt(&ecg.samples, ECG_FS, noise.ecg_white_sd, noise, &mut rng);
    let ppg = corrupt(&ppg.samples, PPG_FS, noise.ppg_white_sd, noise, &mut rng);
    let rec = DatasetRecord {
        group_id: group_id.to_string(),
        seed,
        ppg: zscore(&ppg),
        ecg: zscore(&ecg),
    };
    rec.validate()?;
    Ok(rec)
}

/// Records ordered by group id then index; failed records are skipped and
/// listed in the metadata.
pub fn gen_dataset(
    groups: &BTreeMap<String, SimParams>,
    n_per_group: usize,
    noise: &NoiseConfig,
    master_seed: u64,
) -> Result<Dataset> {
    if groups.is_empty() {
        return domain("at least one group is required");
    }
    if n_per_group == 0 {
        return domain("n_per_group must be >= 1");
    }
    noise.validate()?;
    let jobs: Vec<(usize, &String, &SimParams, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, (id, p))| (0..n_per_group).map(move |i| (g, id, p, i)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(g, id, p, i)| generate_record(id, p, record_seed(master_seed, g, i), noise))
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for (&(_, id, _, i), r) in jobs.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("skipping record {i} of group {id}: {e}");
                skipped.push(SkippedRecord {
                    group_id: id.clone(),
                    index: i,
                    reason: e.to_string(),
                });
            }
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} record(s) skipped", skipped.len());
    }
    Ok(Dataset {
        meta: DatasetMeta {
            ecg_fs: ECG_FS,
            ppg_fs: PPG_FS,
            duration: WINDOW_S,
            warmup: WARMUP_S,
            fine_fs: FINE_FS,
            master_seed,
            n_per_group,
            noise: *noise,
            groups: groups.clone(),
            skipped,
        },
        records,
    })
}

/// Writes `records.jsonl` (a header line, then one record per line) and
/// `meta.json` into `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join(RECORDS_FILE))?);
    let header = serde_json::json!({
        "format": FORMAT,
        "version": VERSION,
        "ecg_fs": ds.meta.ecg_fs,
        "ppg_fs": ds.meta.ppg_fs,
        "count": ds.records.len(),
    });
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for r in &ds.records {
        writeln!(out, "{}", r.to_line()?)?;
    }
    out.flush()?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&ds.meta)? + "\n")?;
    Ok(())
}

fn parse_err(record: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        record,
        message: message.into(),
    }
}

/// Reads and validates a dataset directory written by [`save_dataset`].
/// Parse errors carry the 1-based record number (0 for the header).
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(RECORDS_FILE))?;
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| parse_err(0, "empty file"))?)
        .map_err(|e| parse_err(0, e.to_string()))?;
    if header["format"] != FORMAT {
        return Err(parse_err(0, "not a dataset file"));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        rec.validate().map_err(|e| parse_err(i + 1, e.to_string()))?;
        records.push(rec);
    }
    if let Some(n) = header["count"].as_u64() {
        if n as usize != records.len() {
            return Err(parse_err(
                records.len() + 1,
                format!("header announces {n} records, found {}", records.len()),
            ));
        }
    }
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
    Ok(Dataset { meta, records })
}

/// Simulator section of the configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub params: SimParams,
    pub fine_fs: f64,
    pub ecg_fs: f64,
    pub ppg_fs: f64,
    pub duration: f64,
    pub warmup: f64,
    pub ecg_len: usize,
    pub ppg_len: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            params: SimParams::default(),
            fine_fs: FINE_FS,
            ecg_fs: ECG_FS,
            ppg_fs: PPG_FS,
            duration: WINDOW_S,
            warmup: WARMUP_S,
            ecg_len: ECG_LEN,
            ppg_len: PPG_LEN,
        }
    }
}

/// The single JSON configuration document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimConfig,
    pub fit: FitConfig,
    pub pae_weights: PaeWeights,
    pub flow: FlowConfig,
    pub noise: NoiseConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&PathBuf>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), |p| Self::load(p))
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.pae_weights.validate()?;
        self.flow.validate()?;
        self.noise.validate()?;
        let s = &self.sim;
        let geometry = (s.ecg_fs, s.ppg_fs, s.duration, s.ecg_len, s.ppg_len);
        if geometry != (ECG_FS, PPG_FS, WINDOW_S, ECG_LEN, PPG_LEN) {
            return Err(Error::Config("segment geometry is fixed at 10 s, 1200 @ 120 Hz, 400 @ 40 Hz".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{detect_events, Polarity};
    use crate::integrate::simulate_pair;

    fn one_group() -> BTreeMap<String, SimParams> {
        BTreeMap::from([("a".to_string(), SimParams::default())])
    }

    #[test]
    fn noiseless_record_is_the_zscored_simulation() {
        let ds = gen_dataset(&one_group(), 1, &NoiseConfig::none(), 5).unwrap();
        let (e, p) = simulate_pair(&SimParams::default(), WINDOW_S).unwrap();
        assert_eq!(ds.records[0].ecg, e.zscored().samples);
        assert_eq!(ds.records[0].ppg, p.zscored().samples);
    }

    #[test]
    fn records_are_valid_and_seeded() {
        let ds = gen_dataset(&sample_groups(2, &ParamRanges::default(), 1), 3, &NoiseConfig::default(), 11).unwrap();
        assert_eq!(ds.records.len(), 6);
        assert!(ds.meta.skipped.is_empty());
        for r in &ds.records {
            r.validate().unwrap();
        }
        assert_eq!(ds.records[0].group_id, "g0");
        assert_eq!(ds.records[5].group_id, "g1");
        let seeds: std::collections::BTreeSet<u64> = ds.records.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 6);
        assert_eq!(ds.records[4].seed, record_seed(11, 1, 1));
        assert_ne!(ds.records[0].ecg, ds.records[1].ecg);
    }

    #[test]
    fn same_seed_same_bytes() {
        let groups = sample_groups(2, &ParamRanges::default(), 3);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&a, &b] {
            let ds = gen_dataset(&groups, 2, &NoiseConfig::default(), 42).unwrap();
            save_dataset(d.path(), &ds).unwrap();
        }
        for f in [RECORDS_FILE, META_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn heart_rate_ratio_follows_omega() {
        let slow = SimParams::default().with_heart_rate(60.0).unwrap();
        let fast = SimParams::default().with_heart_rate(90.0).unwrap();
        let groups = BTreeMap::from([("slow".to_string(), slow), ("fast".to_string(), fast)]);
        let ds = gen_dataset(&groups, 4, &NoiseConfig::default(), 8).unwrap();
        let mean_hr = |g: &str| {
            let hrs: Vec<f64> = ds
                .records
                .iter()
                .filter(|r| r.group_id == g)
                .map(|r| {
                    let pk = detect_events(&r.ecg_waveform().unwrap(), 0.3, Polarity::Max, Some(0.5)).unwrap();
                    crate::metrics::hr_from_peaks(&pk, ECG_FS).unwrap()
                })
                .collect();
            mean(&hrs)
        };
        let ratio = mean_hr("fast") / mean_hr("slow");
        assert!((ratio / 1.5 - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&one_group(), 2, &NoiseConfig::default(), 1).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.records.len(), 2);
        for (a, b) in back.records.iter().zip(&ds.records) {
            assert_eq!((&a.group_id, a.seed), (&b.group_id, b.seed));
            for (x, y) in a.ecg.iter().zip(&b.ecg).chain(a.ppg.iter().zip(&b.ppg)) {
                assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0));
            }
        }
        // a second save of the loaded data reproduces the bytes
        let again = tempfile::tempdir().unwrap();
        save_dataset(again.path(), &back).unwrap();
        assert_eq!(
            fs::read(dir.path().join(RECORDS_FILE)).unwrap(),
            fs::read(again.path().join(RECORDS_FILE)).unwrap()
        );
    }

    #[test]
    fn truncated_file_reports_record() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&one_group(), 3, &NoiseConfig::none(), 1).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join(RECORDS_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let cut = text.len() - text.lines().last().unwrap().len() / 2;
        fs::write(&path, &text[..cut]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = gen_dataset(&one_group(), 1, &NoiseConfig::none(), 1).unwrap();
        ds.records.clear();
        save_dataset(dir.path(), &ds).unwrap();
        let text = fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(load_dataset(dir.path()).unwrap().records.is_empty());
    }

    #[test]
    fn bad_inputs() {
        assert!(gen_dataset(&BTreeMap::new(), 1, &NoiseConfig::none(), 0).is_err());
        assert!(gen_dataset(&one_group(), 0, &NoiseConfig::none(), 0).is_err());
        let neg = NoiseConfig {
            ecg_white_sd: -1.0,
            ..NoiseConfig::none()
        };
        assert!(gen_dataset(&one_group(), 1, &neg, 0).is_err());
        let short = DatasetRecord {
            group_id: "a".into(),
            seed: 0,
            ppg: vec![0.0; 10],
            ecg: vec![0.0; 10],
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn config_round_trip_lists_every_section() {
        let cfg = Config::default();
        let text = cfg.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for k in ["sim", "fit", "pae_weights", "flow", "noise"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: Config = serde_json::from_str(r#"{"noise": {"ecg_white_sd": 0.0}}"#).unwrap();
        assert_eq!(partial.noise.ecg_white_sd, 0.0);
        assert_eq!(partial.fit, FitConfig::default());
        assert!(serde_json::from_str::<Config>(r#"{"bogus": 1}"#).is_err());
        let mut wrong = Config::default();
        wrong.sim.ecg_len = 1000;
        assert!(wrong.validate().is_err());
    }
}
