use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::simcore::SimParams;

use super::objective::{FitConfig, TargetPair};
use super::optimizer::{fit_simulator, FitResult};

/// Index of the element with the smallest summed ECG MSE to the rest of the
/// group. Ties go to the earliest index.
pub fn medoid(group: &[&TargetPair]) -> Result<usize> {
    if group.is_empty() {
        return domain("medoid of an empty group");
    }
    let n = group.len();
    let len = group[0].ecg.len();
    if group.iter().any(|t| t.ecg.len() != len) {
        return domain("medoid needs equal-length ECG windows");
    }
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / len as f64;
    let totals: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| mse(&group[i].ecg.samples, &group[j].ecg.samples)).sum())
        .collect();
    let mut best = 0;
    for (i, &t) in totals.iter().enumerate() {
        if t < totals[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWarning {
    pub group_id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct GroupFit {
    pub medoid_index: usize,
    pub result: FitResult,
}

#[derive(Debug, Clone, Default)]
pub struct GroupFits {
    pub fits: BTreeMap<String, GroupFit>,
    pub warnings: Vec<GroupWarning>,
}

impl GroupFits {
    pub fn params(&self) -> BTreeMap<String, SimParams> {
        self.fits
            .iter()
            .map(|(k, v)| (k.clone(), v.result.params.clone()))
            .collect()
    }

    /// JSON object `group_id -> SimParams`.
    pub fn params_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.params())?)
    }
}

pub fn params_map_from_json(s: &str) -> Result<BTreeMap<String, SimParams>> {
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(s)?;
    raw.into_iter()
        .map(|(k, v)| Ok((k, SimParams::from_json(&v.to_string())?)))
        .collect()
}

/// Fits one parameter set per group against the group's medoid pair,
/// starting every fit from `init`. Groups are fitted concurrently. A group
/// whose fit fails is skipped and reported in `warnings`.
pub fn fit_groups(dataset: &[TargetPair], init: &SimParams, cfg: &FitConfig) -> Result<GroupFits> {
    let mut groups: BTreeMap<&str, Vec<&TargetPair>> = BTreeMap::new();
    for t in dataset {
        groups.entry(t.group_id.as_str()).or_default().push(t);
    }
    let outcomes: Vec<(String, Result<GroupFit>)> = groups
        .into_par_iter()
        .map(|(id, members)| {
            let fit = medoid(&members).and_then(|m| {
                Ok(GroupFit {
                    medoid_index: m,
                    result: fit_simulator(members[m], init, cfg)?,
                })
            });
            (id.to_string(), fit)
        })
        .collect();
    let mut out = GroupFits::default();
    for (id, r) in outcomes {
        match r {
            Ok(f) => {
                out.fits.insert(id, f);
            }
            Err(e) => {
                log::warn!("group {id} skipped: {e}");
                out.warnings.push(GroupWarning {
                    group_id: id,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::simulate_pair;

    fn pair(hr: f64, id: &str) -> TargetPair {
        let p = SimParams::default().with_heart_rate(hr).unwrap();
        let (e, g) = simulate_pair(&p, 10.0).unwrap();
        TargetPair::new(e, g, id).unwrap()
    }

    #[test]
    fn medoid_picks_center_and_first_on_ties() {
        let a = pair(60.0, "g");
        let b = pair(70.0, "g");
        let c = pair(64.0, "g");
        let idx = medoid(&[&a, &b, &c]).unwrap();
        assert!(idx < 3);
        assert_eq!(medoid(&[&a, &a, &a]).unwrap(), 0);
        assert!(medoid(&[]).is_err());
    }

    #[test]
    fn single_pair_group_matches_direct_fit() {
        let cfg = FitConfig {
            max_iters: 4,
            ..FitConfig::default()
        };
        let t = pair(72.0, "only");
        let init = SimParams::default();
        let g = fit_groups(std::slice::from_ref(&t), &init, &cfg).unwrap();
        let direct = fit_simulator(&t, &init, &cfg).unwrap();
        assert_eq!(g.fits["only"].result.params, direct.params);
        assert_eq!(g.fits["only"].result.loss, direct.loss);
    }

    #[test]
    fn group_heart_rates_keep_order() {
        let cfg = FitConfig {
            max_iters: 4,
            ..FitConfig::default()
        };
        let data = vec![pair(60.0, "slow"), pair(90.0, "fast")];
        let g = fit_groups(&data, &SimParams::default(), &cfg).unwrap();
        let p = g.params();
        assert!(p["fast"].omega() > p["slow"].omega());
        let back = params_map_from_json(&g.params_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
