//! Latent rectified flow from PPG to ECG with a linear vector field.

pub mod codec;
pub mod guidance;
pub mod model;
pub mod sampler;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::integrate::ECG_FS;
use crate::signal::Waveform;
use crate::simcore::SimParams;

pub use codec::ToyLatentCodec;
pub use guidance::{
    crop_beat, flow_total, mapper_crops, mapper_fit, rate_match, reference_track, sim_guided_losses, Crop, CropContext,
    ForwardMap, GuidanceConfig, ReferenceStats, RidgeMapper, SimGuidedLosses, SimulatorPpgBranch,
};
pub use model::{
    fit_flow_ridge, interp_path, rf_loss, FeatureKind, FeatureMapSpec, FlowPair, FlowSample, LinearFlowModel,
    TimeSampling, VectorField,
};
pub use sampler::{euler_sample, gaussian_oracle_velocity, terminal_estimate, GaussianOracle, PairVelocity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub down_factor: usize,
    pub features: FeatureKind,
    pub ridge: f64,
    pub time_samples: usize,
    pub seed: u64,
    /// Euler steps for the terminal estimate fed to the simulator terms.
    pub terminal_steps: usize,
    /// Euler steps at inference.
    pub sample_steps: usize,
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub mapper_ridge: f64,
    pub guidance: GuidanceConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            down_factor: 20,
            features: FeatureKind::Affine,
            ridge: 1e-6,
            time_samples: 4,
            seed: 0,
            terminal_steps: 8,
            sample_steps: 8,
            lambda_e: 0.1,
            lambda_p: 0.1,
            mapper_ridge: 1e-3,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.down_factor == 0 || self.time_samples == 0 || self.terminal_steps == 0 || self.sample_steps == 0 {
            return domain("down_factor, time_samples and step counts must be >= 1");
        }
        if !(self.ridge >= 0.0 && self.mapper_ridge > 0.0) {
            return domain("ridge must be >= 0 and mapper_ridge > 0");
        }
        flow_total(0.0, 0.0, 0.0, self.lambda_e, self.lambda_p)?;
        Ok(())
    }

    pub fn codec(&self) -> ToyLatentCodec {
        ToyLatentCodec {
            down_factor: self.down_factor,
        }
    }
}

/// A z-scored ECG/PPG record as consumed by the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub group_id: String,
    pub ecg: Vec<f64>,
    pub ppg: Vec<f64>,
}

/// Standard-normal source sample for record `index`.
pub fn source_noise(seed: u64, index: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn build_pairs(records: &[FlowRecord], cfg: &FlowConfig) -> Result<Vec<FlowPair>> {
    let codec = cfg.codec();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let ze = codec.encode(&r.ecg)?;
            let cond = codec.encode(&r.ppg)?;
            Ok(FlowPair {
                z0: source_noise(cfg.seed, i, ze.len()),
                ze,
                cond,
            })
        })
        .collect()
}

/// Trained flow plus the frozen forward mapper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBundle {
    pub config: FlowConfig,
    pub model: LinearFlowModel,
    pub mapper: RidgeMapper,
}

impl FlowBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s)?;
        // re-validate weights
        let model = LinearFlowModel::from_json(&serde_json::to_string(&b.model)?)?;
        Ok(Self { model, ..b })
    }

    /// Decoded ECG for a z-scored PPG record.
    pub fn generate(&self, ppg: &[f64], index: usize) -> Result<Vec<f64>> {
        let codec = self.config.codec();
        let cond = codec.encode(ppg)?;
        let z0 = source_noise(self.config.seed, index, self.model.spec.z_dim);
        let z = euler_sample(&self.model, &z0, &cond, self.config.sample_steps)?;
        codec.decode(&z)
    }
}

/// Fits the flow field and the forward mapper on z-scored records.
pub fn train(records: &[FlowRecord], cfg: &FlowConfig) -> Result<FlowBundle> {
    cfg.validate()?;
    if records.is_empty() {
        return shape("no records to train on");
    }
    let pairs = build_pairs(records, cfg)?;
    let spec = FeatureMapSpec::new(cfg.features, pairs[0].ze.len(), pairs[0].cond.len())?;
    let times = TimeSampling::Random {
        per_pair: cfg.time_samples,
        seed: cfg.seed,
    };
    let model = fit_flow_ridge(&pairs, spec, cfg.ridge, &times)?;

    let mut ecg_crops = Vec::new();
    let mut ppg_crops = Vec::new();
    for r in records {
        let e = Waveform::new(r.ecg.clone(), ECG_FS)?;
        let p = Waveform::new(r.ppg.clone(), crate::integrate::PPG_FS)?;
        for (a, b) in mapper_crops(&e, &p, &cfg.guidance)? {
            ecg_crops.push(a);
            ppg_crops.push(b);
        }
    }
    if ecg_crops.is_empty() {
        return domain("no beat crops found for the forward mapper");
    }
    let mapper = mapper_fit(&ecg_crops, &ppg_crops, cfg.mapper_ridge)?;
    Ok(FlowBundle {
        config: cfg.clone(),
        model,
        mapper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowLosses {
    #[serde(rename = "L_RF")]
    pub l_rf: f64,
    #[serde(rename = "L_sim_e")]
    pub l_sim_e: f64,
    #[serde(rename = "L_sim_p")]
    pub l_sim_p: f64,
    #[serde(rename = "L_Flow")]
    pub l_flow: f64,
    /// Records whose terminal estimate had no detectable R-peak.
    pub degraded: usize,
}

/// Flow objective on `records`; simulator terms use each record's group
/// parameters and undo the z-scoring with that group's reference stats.
pub fn evaluate(bundle: &FlowBundle, records: &[FlowRecord], groups: &BTreeMap<String, SimParams>) -> Result<FlowLosses> {
    if records.is_empty() {
        return shape("no records to evaluate");
    }
    let cfg = &bundle.config;
    let pairs = build_pairs(records, cfg)?;
    let times = TimeSampling::Random {
        per_pair: cfg.time_samples,
        seed: cfg.seed.wrapping_add(1),
    };
    let l_rf = rf_loss(&bundle.model, &times.expand(&pairs)?)?;

    let duration = records[0].ecg.len() as f64 / ECG_FS;
    let stats: BTreeMap<&String, ReferenceStats> = groups
        .iter()
        .map(|(k, p)| Ok((k, ReferenceStats::from_params(p, duration)?)))
        .collect::<Result<_>>()?;
    let codec = cfg.codec();
    let sims: Vec<SimGuidedLosses> = records
        .par_iter()
        .zip(pairs.par_iter())
        .map(|(r, pair)| {
            let params = groups
                .get(&r.group_id)
                .ok_or_else(|| crate::Error::Config(format!("no parameters for group {}", r.group_id)))?;
            let (_, xe) = terminal_estimate(&bundle.model, &codec, &pair.z0, &pair.cond, cfg.terminal_steps)?;
            let xe = Waveform::new(xe, ECG_FS)?;
            sim_guided_losses(&xe, params, &bundle.mapper, Some(&stats[&r.group_id]), &cfg.guidance)
        })
        .collect::<Result<_>>()?;
    let n = sims.len() as f64;
    let l_sim_e = sims.iter().map(|s| s.l_sim_e).sum::<f64>() / n;
    let l_sim_p = sims.iter().map(|s| s.l_sim_p).sum::<f64>() / n;
    Ok(FlowLosses {
        l_rf,
        l_sim_e,
        l_sim_p,
        l_flow: flow_total(l_rf, l_sim_e, l_sim_p, cfg.lambda_e, cfg.lambda_p)?,
        degraded: sims.iter().filter(|s| s.degraded).count(),
    })
}
