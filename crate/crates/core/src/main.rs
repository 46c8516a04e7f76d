use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde_json::json;

use ehsim::dataio::{self, Config, Dataset, DatasetRecord};
use ehsim::fit::{self, TargetPair};
use ehsim::flow::{self, FlowBundle, ToyLatentCodec};
use ehsim::integrate::{self, Modality};
use ehsim::latentlosses::{self as ll, DiagGaussian, LatentBatch, PaeTerms};
use ehsim::metrics::{self, FiducialMeasurements, Fiducials};
use ehsim::signal::{fmt_f64, zscore, Waveform};
use ehsim::simcore::{ParamRanges, SimParams};
use ehsim::{Error, Result};

#[derive(Parser)]
#[command(name = "ehsim", version, about = "ECG/PPG simulator, fitting, latent flow and evaluation")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// JSON config with sections sim, fit, pae_weights, flow, noise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Ecg,
    Ppg,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Ecg => Modality::Ecg,
            ModalityArg::Ppg => Modality::Ppg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FdKind {
    Curve,
    Gaussian,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate ECG/PPG from parameters and write CSVs.
    Simulate {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long)]
        heart_rate: Option<f64>,
        /// Write both readouts on the fine integration grid.
        #[arg(long)]
        fine: bool,
        #[arg(long)]
        out_ecg: PathBuf,
        #[arg(long)]
        out_ppg: PathBuf,
    },
    /// Fit simulator parameters to one ECG/PPG pair.
    Fit {
        #[arg(long)]
        ecg: PathBuf,
        #[arg(long)]
        ppg: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out_params: PathBuf,
        #[arg(long)]
        out_trace: Option<PathBuf>,
    },
    /// Fit one parameter set per group to the group medoid.
    FitGroups {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a paired synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        groups: usize,
        #[arg(long, default_value_t = 50)]
        per_group: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON map group id -> parameters; groups are sampled otherwise.
        #[arg(long)]
        group_params: Option<PathBuf>,
    },
    /// Euler residual and Gronwall report of a waveform against parameters.
    ResidualCheck {
        #[arg(long)]
        signal: PathBuf,
        #[arg(long, value_enum, default_value = "ecg")]
        modality: ModalityArg,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Warm-up preceding the waveform (s).
        #[arg(long)]
        warmup: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the latent flow and forward mapper on a dataset.
    FlowTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate ECG from PPG with a trained flow.
    FlowSample {
        #[arg(long)]
        bundle: PathBuf,
        /// Dataset whose PPG conditions generation; writes a dataset to --out.
        #[arg(long, conflicts_with = "ppg", required_unless_present = "ppg")]
        data: Option<PathBuf>,
        /// Single PPG CSV; writes an ECG CSV to --out.
        #[arg(long)]
        ppg: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow objective terms on a dataset.
    FlowEval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Group parameter map; the dataset's generating parameters otherwise.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Waveform and fiducial metrics of generated against reference ECG.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-beat fiducial CSV.
        #[arg(long)]
        beats: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "curve")]
        fd: FdKind,
    },
    /// PAE loss terms on codec latents of a dataset.
    Losses {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_params(path: Option<&PathBuf>, fallback: &SimParams) -> Result<SimParams> {
    match path {
        Some(p) => SimParams::from_json(&fs::read_to_string(p)?),
        None => Ok(fallback.clone()),
    }
}

fn read_groups(path: Option<&PathBuf>, ds: &Dataset) -> Result<BTreeMap<String, SimParams>> {
    match path {
        Some(p) => fit::params_map_from_json(&fs::read_to_string(p)?),
        None => Ok(ds.meta.groups.clone()),
    }
}

fn emit(value: &serde_json::Value, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn simulate(cfg: &Config, params: Option<&PathBuf>, duration: f64, hr: Option<f64>, fine: bool, out_ecg: &Path, out_ppg: &Path) -> Result<()> {
    let mut p = read_params(params, &cfg.sim.params)?;
    if let Some(bpm) = hr {
        p = p.with_heart_rate(bpm)?;
    }
    let traj = integrate::simulate_window(&p, duration, cfg.sim.fine_fs, cfg.sim.warmup)?;
    let (e, g) = if fine {
        let fs = traj.grid.fs();
        let n = traj.len() - 1;
        (Waveform::new(traj.e[..n].to_vec(), fs)?, Waveform::new(traj.p[..n].to_vec(), fs)?)
    } else {
        integrate::sample_modalities(&traj, cfg.sim.ecg_fs, cfg.sim.ppg_fs)?
    };
    e.write_csv(out_ecg)?;
    g.write_csv(out_ppg)?;
    log::info!("wrote {} ECG and {} PPG samples", e.len(), g.len());
    Ok(())
}

fn fit_one(cfg: &Config, ecg: &Path, ppg: &Path, init: Option<&PathBuf>, out: &Path, trace: Option<&PathBuf>) -> Result<()> {
    let target = TargetPair::new(Waveform::read_csv(ecg, None)?, Waveform::read_csv(ppg, None)?, "target")?;
    let init = read_params(init, &cfg.sim.params)?;
    let res = fit::fit_simulator(&target, &init, &cfg.fit)?;
    fs::write(out, res.params.to_json()? + "\n")?;
    if let Some(t) = trace {
        fs::write(t, fit::trace_to_csv(&res.trace))?;
    }
    log::info!("fit loss {} after {} iterations", res.loss, res.trace.len());
    Ok(())
}

fn fit_groups(cfg: &Config, data: &Path, init: Option<&PathBuf>, out: &Path) -> Result<()> {
    let ds = dataio::load_dataset(data)?;
    let init = read_params(init, &cfg.sim.params)?;
    let fits = fit::fit_groups(&ds.target_pairs()?, &init, &cfg.fit)?;
    for w in &fits.warnings {
        log::warn!("group {}: {}", w.group_id, w.message);
    }
    if fits.fits.is_empty() {
        return Err(Error::Domain("no group could be fitted".into()));
    }
    fs::write(out, fits.params_json()? + "\n")?;
    Ok(())
}

fn gen_data(cfg: &Config, out: &Path, groups: usize, per_group: usize, seed: u64, map: Option<&PathBuf>) -> Result<()> {
    let groups = match map {
        Some(p) => fit::params_map_from_json(&fs::read_to_string(p)?)?,
        None => dataio::sample_groups(groups, &ParamRanges::default(), seed),
    };
    let ds = dataio::gen_dataset(&groups, per_group, &cfg.noise, seed)?;
    dataio::save_dataset(out, &ds)?;
    log::info!("wrote {} records ({} skipped)", ds.records.len(), ds.meta.skipped.len());
    Ok(())
}

fn residual_check(cfg: &Config, signal: &Path, modality: Modality, params: Option<&PathBuf>, warmup: Option<f64>, out: Option<&PathBuf>) -> Result<()> {
    let w = Waveform::read_csv(signal, None)?;
    let p = read_params(params, &cfg.sim.params)?;
    let warmup = warmup.unwrap_or(cfg.sim.warmup);
    // phase track on the fine grid, strided to the waveform's rate
    let ratio = cfg.sim.fine_fs / w.fs;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
        return Err(Error::Config(format!("{} Hz does not divide the fine rate {}", w.fs, cfg.sim.fine_fs)));
    }
    let stride = stride as usize;
    let traj = integrate::simulate_window(&p, w.duration(), cfg.sim.fine_fs, warmup)?;
    let refs: Vec<_> = (0..w.len()).map(|k| traj.phase[k * stride]).collect();
    let res = integrate::euler_residual(&w.samples, &refs, modality, &p, w.dt(), traj.t0)?;
    let k = integrate::field_lipschitz(&p, modality);
    let g = integrate::gronwall_bound(&res, k, &w.samples, &p, &refs, modality, traj.t0)?;
    emit(
        &json!({
            "samples": w.len(),
            "fs": w.fs,
            "residual": {
                "max_abs": res.max_abs(),
                "mean_square": res.mean_square(),
                "sum_abs": res.sum_abs(),
            },
            "gronwall": {
                "lipschitz": k,
                "bound": g.bound,
                "max_observed_deviation": g.max_observed_deviation,
                "ratio": g.ratio(),
                "holds": g.holds(),
            },
        }),
        out,
    )
}

fn flow_train(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let ds = dataio::load_dataset(data)?;
    let bundle = flow::train(&ds.flow_records(), &cfg.flow)?;
    fs::write(out, bundle.to_json()? + "\n")?;
    Ok(())
}

fn flow_sample(bundle: &Path, data: Option<&PathBuf>, ppg: Option<&PathBuf>, index: usize, out: &Path) -> Result<()> {
    let b = FlowBundle::from_json(&fs::read_to_string(bundle)?)?;
    if let Some(p) = ppg {
        let w = Waveform::read_csv(p, None)?;
        let ecg = b.generate(&zscore(&w.samples), index)?;
        return Waveform::new(ecg, integrate::ECG_FS)?.write_csv(out);
    }
    let Some(data) = data else {
        return Err(Error::Config("either --data or --ppg is required".into()));
    };
    let mut ds = dataio::load_dataset(data)?;
    let generated: Vec<DatasetRecord> = ds
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let ecg = zscore(&b.generate(&r.ppg, i)?);
            let rec = DatasetRecord { ecg, ..r.clone() };
            rec.validate()?;
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    ds.records = generated;
    dataio::save_dataset(out, &ds)
}

fn flow_eval(bundle: &Path, data: &Path, groups: Option<&PathBuf>, out: Option<&PathBuf>) -> Result<()> {
    let b = FlowBundle::from_json(&fs::read_to_string(bundle)?)?;
    let ds = dataio::load_dataset(data)?;
    let groups = read_groups(groups, &ds)?;
    let l = flow::evaluate(&b, &ds.flow_records(), &groups)?;
    emit(&serde_json::to_value(l)?, out)
}

struct RecordEval {
    mae: f64,
    rmse: f64,
    fd: f64,
    hr: (Option<f64>, Option<f64>),
    fid: (FiducialMeasurements, FiducialMeasurements),
    beats: (Vec<Fiducials>, Vec<Fiducials>, Vec<FiducialMeasurements>, Vec<FiducialMeasurements>),
}

fn heart_rate(beats: &[Fiducials], fs: f64) -> Option<f64> {
    let rs: Vec<usize> = beats.iter().filter_map(|b| b.r).collect();
    metrics::hr_from_peaks(&rs, fs)
}

fn median_measurements(per_beat: &[FiducialMeasurements]) -> FiducialMeasurements {
    let mut a = [None; 7];
    for (k, slot) in a.iter_mut().enumerate() {
        let mut v: Vec<f64> = per_beat.iter().filter_map(|m| m.as_array()[k]).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        *slot = Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) });
    }
    FiducialMeasurements {
        pr_ms: a[0],
        qrs_ms: a[1],
        qt_ms: a[2],
        qtcf_ms: a[3],
        st_j60: a[4],
        p_dur_ms: a[5],
        t_dur_ms: a[6],
    }
}

fn eval_record(r: &DatasetRecord, g: &DatasetRecord, fd: FdKind) -> Result<RecordEval> {
    let (re, ge) = (r.ecg_waveform()?, g.ecg_waveform()?);
    let rb = metrics::delineate(&re)?;
    let gb = metrics::delineate(&ge)?;
    let rm = metrics::beat_measurements(&re, &rb)?;
    let gm = metrics::beat_measurements(&ge, &gb)?;
    Ok(RecordEval {
        mae: metrics::mae(&ge, &re)?,
        rmse: metrics::rmse(&ge, &re)?,
        fd: match fd {
            FdKind::Curve => metrics::frechet_curve_distance(&ge.samples, &re.samples)?,
            FdKind::Gaussian => metrics::frechet_gaussian(&ge.samples, &re.samples)?,
        },
        hr: (heart_rate(&gb, ge.fs), heart_rate(&rb, re.fs)),
        fid: (median_measurements(&gm), median_measurements(&rm)),
        beats: (rb, gb, rm, gm),
    })
}

fn beats_csv(evals: &[RecordEval]) -> String {
    let mut out = String::from("record,source,beat");
    for n in Fiducials::NAMES {
        out.push(',');
        out.push_str(n);
    }
    for n in FiducialMeasurements::NAMES {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (i, e) in evals.iter().enumerate() {
        for (source, beats, ms) in [("reference", &e.beats.0, &e.beats.2), ("generated", &e.beats.1, &e.beats.3)] {
            for (k, b) in beats.iter().enumerate() {
                out.push_str(&format!("{i},{source},{k}"));
                for v in b.as_array() {
                    out.push(',');
                    if let Some(v) = v {
                        out.push_str(&v.to_string());
                    }
                }
                let m = ms.get(k).copied().unwrap_or_default();
                for v in m.as_array() {
                    out.push(',');
                    if let Some(v) = v {
                        out.push_str(&fmt_f64(v));
                    }
                }
                out.push('\n');
            }
        }
    }
    out
}

fn eval(reference: &Path, generated: &Path, out: &Path, beats: Option<&PathBuf>, fd: FdKind) -> Result<()> {
    let r = dataio::load_dataset(reference)?;
    let g = dataio::load_dataset(generated)?;
    if r.records.len() != g.records.len() || r.records.is_empty() {
        return Err(Error::Shape(format!(
            "reference has {} records, generated has {}",
            r.records.len(),
            g.records.len()
        )));
    }
    let evals: Vec<RecordEval> = r
        .records
        .par_iter()
        .zip(g.records.par_iter())
        .map(|(a, b)| eval_record(a, b, fd))
        .collect::<Result<_>>()?;
    let n = evals.len() as f64;
    let avg = |f: fn(&RecordEval) -> f64| evals.iter().map(f).sum::<f64>() / n;
    let (hr_gen, hr_ref): (Vec<_>, Vec<_>) = evals.iter().map(|e| e.hr).unzip();
    let (hr_mae, hr_cov) = metrics::hr_mae(&hr_gen, &hr_ref)?;
    let (fg, fr): (Vec<_>, Vec<_>) = evals.iter().map(|e| e.fid).unzip();
    let table2 = metrics::fiducial_mae(&fg, &fr)?;
    let report = json!({
        "records": evals.len(),
        "fd_variant": match fd { FdKind::Curve => "curve", FdKind::Gaussian => "gaussian" },
        "table1": {
            "MAE": avg(|e| e.mae),
            "RMSE": avg(|e| e.rmse),
            "FD": avg(|e| e.fd),
            "HR MAE": hr_mae,
            "HR coverage": hr_cov,
        },
        "table2": table2,
    });
    emit(&report, Some(&out.to_path_buf()))?;
    if let Some(b) = beats {
        fs::write(b, beats_csv(&evals))?;
    }
    Ok(())
}

/// Block-mean posterior of a signal: means per block and log block
/// variances, as a `(blocks x 1)` latent.
fn block_posterior(x: &[f64], codec: &ToyLatentCodec) -> Result<DiagGaussian> {
    let mu = codec.encode(x)?;
    let f = codec.down_factor;
    let lv: Vec<f64> = x
        .chunks(f)
        .zip(&mu)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / f as f64 + 1e-6).ln())
        .collect();
    DiagGaussian::new(DMatrix::from_column_slice(mu.len(), 1, &mu), DMatrix::from_column_slice(lv.len(), 1, &lv))
}

fn losses(cfg: &Config, data: &Path, groups: Option<&PathBuf>, out: Option<&PathBuf>) -> Result<()> {
    let ds = dataio::load_dataset(data)?;
    if ds.records.is_empty() {
        return Err(Error::Shape("dataset has no records".into()));
    }
    let groups = read_groups(groups, &ds)?;
    let w = &cfg.pae_weights;
    // both modalities share 20 half-second blocks
    let blocks = 20;
    let ce = ToyLatentCodec::new(dataio::ECG_LEN / blocks)?;
    let cp = ToyLatentCodec::new(dataio::PPG_LEN / blocks)?;
    let mut xe = Vec::new();
    let mut xp = Vec::new();
    let mut delta = Vec::new();
    let mut omega = Vec::new();
    let mut qe = Vec::new();
    let mut qp = Vec::new();
    let (mut rec, mut csd, mut gpa) = (0.0, 0.0, 0.0);
    for r in &ds.records {
        let p = groups
            .get(&r.group_id)
            .ok_or_else(|| Error::Config(format!("no parameters for group {}", r.group_id)))?;
        xe.push(r.ecg_waveform()?);
        xp.push(r.ppg_waveform()?);
        delta.push(p.ppg.delta_pat());
        omega.push(p.omega());
        let (a, b) = (block_posterior(&r.ecg, &ce)?, block_posterior(&r.ppg, &cp)?);
        rec += ll::mse(&ce.decode(&ce.encode(&r.ecg)?)?, &r.ecg)? + ll::mse(&cp.decode(&cp.encode(&r.ppg)?)?, &r.ppg)?;
        // cross-modal decodability: each signal from the other modality's latent
        csd += ll::mse(&ce.decode(&cp.encode(&r.ppg)?)?, &r.ecg)? + ll::mse(&cp.decode(&ce.encode(&r.ecg)?)?, &r.ppg)?;
        gpa += ll::gpa_loss(&a, &b)?;
        qe.push(a);
        qp.push(b);
    }
    let n = ds.records.len() as f64;
    let pool = |qs: &[DiagGaussian]| ll::pool_normalize(&LatentBatch::new(qs.iter().map(|q| q.mu().clone()).collect())?);
    let terms = PaeTerms {
        pat: ll::pat_loss(&xe, &xp, &delta, &omega, w.phase_temperature)?,
        rec: rec / n,
        kl: 0.5 * (ll::kl_to_standard_batch(&qe)? + ll::kl_to_standard_batch(&qp)?),
        gpa: gpa / n,
        lid: ll::infonce_bidirectional(&pool(&qp)?, &pool(&qe)?, w.tau)?,
        csd: csd / n,
    };
    let total = ll::pae_total(&terms, w)?;
    emit(&json!({ "terms": terms, "weights": w, "total": total }), out)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load_or_default(cli.config.as_ref())?;
    match cli.cmd {
        Cmd::Simulate {
            params,
            duration,
            heart_rate,
            fine,
            out_ecg,
            out_ppg,
        } => simulate(&cfg, params.as_ref(), duration, heart_rate, fine, &out_ecg, &out_ppg),
        Cmd::Fit {
            ecg,
            ppg,
            init,
            out_params,
            out_trace,
        } => fit_one(&cfg, &ecg, &ppg, init.as_ref(), &out_params, out_trace.as_ref()),
        Cmd::FitGroups { data, init, out } => fit_groups(&cfg, &data, init.as_ref(), &out),
        Cmd::GenData {
            out,
            groups,
            per_group,
            seed,
            group_params,
        } => gen_data(&cfg, &out, groups, per_group, seed, group_params.as_ref()),
        Cmd::ResidualCheck {
            signal,
            modality,
            params,
            warmup,
            out,
        } => residual_check(&cfg, &signal, modality.into(), params.as_ref(), warmup, out.as_ref()),
        Cmd::FlowTrain { data, out } => flow_train(&cfg, &data, &out),
        Cmd::FlowSample {
            bundle,
            data,
            ppg,
            index,
            out,
        } => flow_sample(&bundle, data.as_ref(), ppg.as_ref(), index, &out),
        Cmd::FlowEval {
            bundle,
            data,
            groups,
            out,
        } => flow_eval(&bundle, &data, groups.as_ref(), out.as_ref()),
        Cmd::Eval {
            reference,
            generated,
            out,
            beats,
            fd,
        } => eval(&reference, &generated, &out, beats.as_ref(), fd),
        Cmd::Losses { data, groups, out } => losses(&cfg, &data, groups.as_ref(), out.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
