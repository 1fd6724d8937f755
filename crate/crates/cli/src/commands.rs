use std::path::{Path, PathBuf};

use gridflow_core::datagen::{generate_dataset, Dataset, GenOptions};
use gridflow_core::diffusion::{sample_guided, train_decoupled, Checkpoint, GuidanceConfig};
use gridflow_core::evaluate::{
    downstream_warmstart, histogram, mismatch_report, mismatch_samples, wasserstein1,
    DownstreamResult,
};
use gridflow_core::grid::{parse_case, GridCase};
use log::info;
use rayon::prelude::*;

use crate::config::{default_lambda, RunConfig};
use crate::error::{CliError, ErrorKind};
use crate::manifest::{read_input, write_manifest, Manifest, Staged};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Sample,
    Eval,
    Downstream,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Downstream => "downstream",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Command::GenData,
            Command::Train,
            Command::Sample,
            Command::Eval,
            Command::Downstream,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }

    fn default_out(self) -> Option<&'static str> {
        match self {
            Command::GenData => Some("data.csv"),
            Command::Train => Some("model.ckpt"),
            Command::Sample => Some("samples.csv"),
            Command::Eval | Command::Downstream => None,
        }
    }
}

/// Where the manifest of a run goes, relative to `out_dir`.
pub fn manifest_name(cmd: Command, cfg: &RunConfig) -> PathBuf {
    match &cfg.out {
        Some(out) if cmd.default_out().is_some() => {
            let mut s = out.clone().into_os_string();
            s.push(".manifest.toml");
            PathBuf::from(s)
        }
        _ => PathBuf::from(format!("{}.manifest.toml", cmd.name())),
    }
}

/// Runs `cmd`, writes its outputs and manifest, and returns the manifest. On a
/// numerical abort the manifest is still written with status `aborted`.
pub fn execute(cmd: Command, mut cfg: RunConfig) -> Result<Manifest, CliError> {
    if let Some(def) = cmd.default_out() {
        cfg.out.get_or_insert_with(|| PathBuf::from(def));
    }
    let mut m = Manifest::new(cmd.name(), &cfg);
    let staged = match cmd {
        Command::GenData => gen_data(&mut cfg, &mut m),
        Command::Train => train(&mut cfg, &mut m),
        Command::Sample => sample(&mut cfg, &mut m),
        Command::Eval => eval(&mut cfg, &mut m),
        Command::Downstream => downstream(&mut cfg, &mut m),
    };
    m.config = cfg.clone();
    let manifest_path = cfg.out_dir.join(manifest_name(cmd, &cfg));
    match staged {
        Ok(staged) => {
            staged.commit(&cfg.out_dir, &mut m)?;
            write_manifest(&manifest_path, &m)?;
            Ok(m)
        }
        Err(e) if e.kind == ErrorKind::Numerical => {
            m.status = "aborted".into();
            if let Some(step) = e.step {
                m.report("abort_step", step as i64);
            }
            m.report("abort_message", e.message.clone());
            write_manifest(&manifest_path, &m)?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::usage(format!("missing required {flag}")))
}

fn seed_of(cfg: &RunConfig) -> u64 {
    cfg.seed.unwrap_or(0)
}

fn load_case(path: &Path, m: &mut Manifest) -> Result<GridCase, CliError> {
    let bytes = read_input(path, m)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::file(path, e))?;
    parse_case(&text).map_err(|e| CliError::from(e).at(path))
}

fn load_dataset(path: &Path, name: &str, m: &mut Manifest) -> Result<Dataset, CliError> {
    let bytes = read_input(path, m)?;
    Dataset::read_csv(&bytes[..], name).map_err(|e| CliError::from(e).at(path))
}

fn check_width(d: &Dataset, case: &GridCase, path: &Path) -> Result<(), CliError> {
    if d.n_bus() != case.n_bus() {
        return Err(CliError::file(
            path,
            format!(
                "dataset has {} columns, case {} needs {}",
                d.width(),
                case.name,
                4 * case.n_bus()
            ),
        ));
    }
    Ok(())
}

fn csv_bytes(d: &Dataset) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    d.write_csv(&mut buf)?;
    Ok(buf)
}

fn gen_data(cfg: &mut RunConfig, m: &mut Manifest) -> Result<Staged, CliError> {
    let case_path = require(&cfg.case, "--case")?.to_path_buf();
    let case = load_case(&case_path, m)?;
    if cfg.n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let (d, rep) = generate_dataset(&case, cfg.n, seed_of(cfg), &GenOptions::default())?;
    info!(
        "generated {} records for {} ({} attempts, {} diverged, {} rejected)",
        d.len(),
        case.name,
        rep.attempts,
        rep.diverged,
        rep.rejected
    );
    m.report("case_name", case.name.clone());
    m.report("attempts", rep.attempts as i64);
    m.report("diverged", rep.diverged as i64);
    m.report("rejected", rep.rejected as i64);
    m.report("q_limited", rep.q_limited as i64);
    let mut s = Staged::default();
    s.add(cfg.out.clone().expect("default set"), csv_bytes(&d)?);
    Ok(s)
}

fn train(cfg: &mut RunConfig, m: &mut Manifest) -> Result<Staged, CliError> {
    let case_path = require(&cfg.case, "--case")?.to_path_buf();
    let data_path = require(&cfg.data, "--data")?.to_path_buf();
    let case = load_case(&case_path, m)?;
    let d = load_dataset(&data_path, &case.name, m)?;
    check_width(&d, &case, &data_path)?;
    let seed = seed_of(cfg);
    let (model, rep) = train_decoupled(&d, &cfg.train, seed)?;
    let ck = Checkpoint::new(&model, &case, &cfg.train, seed);
    let w = 100.min(rep.loss_trace.len()).max(1);
    m.report("case_name", case.name.clone());
    m.report("records", d.len() as i64);
    m.report("steps", rep.loss_trace.len() as i64);
    if !rep.loss_trace.is_empty() {
        m.report("loss_first_window", rep.window_mean(0, w));
        m.report("loss_last_window", rep.window_mean(rep.loss_trace.len() - w, w));
    }
    let mut s = Staged::default();
    s.add(cfg.out.clone().expect("default set"), ck.to_json().into_bytes());
    Ok(s)
}

fn sample(cfg: &mut RunConfig, m: &mut Manifest) -> Result<Staged, CliError> {
    let ck_path = require(&cfg.checkpoint, "--checkpoint")?.to_path_buf();
    let bytes = read_input(&ck_path, m)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::file(&ck_path, e))?;
    let ck = Checkpoint::from_json(&text).map_err(|e| CliError::from(e).at(&ck_path))?;
    let case = ck.case().map_err(|e| CliError::from(e).at(&ck_path))?;
    let model = ck.model().map_err(|e| CliError::from(e).at(&ck_path))?;
    let lambda = cfg.guidance.lambda.unwrap_or_else(|| default_lambda(&case));
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(CliError::usage(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if cfg.n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    cfg.guidance.lambda = Some(lambda);
    let gc = GuidanceConfig {
        lambda,
        mode: cfg.guidance.mode,
        include_inequalities: cfg.guidance.include_inequalities,
    };
    m.report("case_name", case.name.clone());
    m.report("lambda", lambda);
    m.report("mode", gc.mode.to_string());
    m.report("include_inequalities", gc.include_inequalities);
    m.report("t_max", ck.schedule.t_max as i64);
    m.report("beta_1", ck.schedule.beta_1);
    m.report("beta_t", ck.schedule.beta_t);
    m.report("train_seed", ck.train_seed as i64);
    info!("sampling {} records from {} (lambda {lambda})", cfg.n, case.name);
    let d = sample_guided(&model, &case, cfg.n, seed_of(cfg), &gc)?;
    let mut s = Staged::default();
    s.add(cfg.out.clone().expect("default set"), csv_bytes(&d)?);
    Ok(s)
}

fn eval(cfg: &mut RunConfig, m: &mut Manifest) -> Result<Staged, CliError> {
    let real_path = require(&cfg.real, "--real")?.to_path_buf();
    let syn_path = require(&cfg.syn, "--syn")?.to_path_buf();
    if cfg.bins == 0 {
        return Err(CliError::usage("--bins must be positive"));
    }
    let real = load_dataset(&real_path, "real", m)?;
    let syn = load_dataset(&syn_path, "syn", m)?;
    let (w1, _) = wasserstein1(&real, &syn).map_err(|e| CliError::from(e).at(&syn_path))?;
    let mut s = Staged::default();
    let w1_text = format!(
        "{w1:.17e}\n# exact W1 over flattened (p, q, v, theta) records in p.u. and radians\nreal = {}\nsyn = {}\nn = {}\nwidth = {}\n",
        real_path.display(),
        syn_path.display(),
        real.len(),
        real.width()
    );
    s.add("w1.txt", w1_text.into_bytes());
    m.report("w1", w1);
    if let Some(case_path) = cfg.case.clone() {
        let case = load_case(&case_path, m)?;
        check_width(&syn, &case, &syn_path)?;
        let rep = mismatch_report(&syn, &case)?;
        let mut buf = Vec::new();
        rep.write_csv(&mut buf)?;
        s.add(format!("mismatch_{}.csv", case.name), buf);
        let samples = mismatch_samples(&syn, &case)?;
        for b in 0..case.n_bus() {
            for (kind, vals) in [("dp", &samples.dp[b]), ("dq", &samples.dq[b])] {
                let h = histogram(vals, cfg.bins).map_err(|e| CliError::from(e).at(&syn_path))?;
                let mut buf = Vec::new();
                h.write_csv(&mut buf)?;
                s.add(format!("hist_{}_{kind}.csv", b + 1), buf);
            }
        }
    }
    Ok(s)
}

fn downstream(cfg: &mut RunConfig, m: &mut Manifest) -> Result<Staged, CliError> {
    let case_path = require(&cfg.case, "--case")?.to_path_buf();
    let test_path = require(&cfg.test, "--test")?.to_path_buf();
    if cfg.train_sets.is_empty() {
        return Err(CliError::usage("at least one --train NAME=PATH is required"));
    }
    let case = load_case(&case_path, m)?;
    let test = load_dataset(&test_path, &case.name, m)?;
    check_width(&test, &case, &test_path)?;
    let mut sources = Vec::new();
    for src in &cfg.train_sets {
        let d = load_dataset(&src.path, &src.name, m)?;
        check_width(&d, &case, &src.path)?;
        sources.push((src.name.clone(), d));
    }
    let seed = seed_of(cfg);
    let results: Vec<Result<DownstreamResult, CliError>> = sources
        .par_iter()
        .map(|(_, d)| downstream_warmstart(d, &test, &case, seed, &cfg.predictor).map_err(CliError::from))
        .collect();
    let mut w = csv_writer();
    w.write_record([
        "source",
        "n_train",
        "n_test",
        "mean_dp",
        "std_dp",
        "mean_dq",
        "std_dq",
        "mean_dp_mw",
        "std_dp_mw",
        "mean_dq_mvar",
        "std_dq_mvar",
    ])
    .map_err(io_err)?;
    let base = case.base_mva;
    for ((name, d), r) in sources.iter().zip(results) {
        let r = r?;
        let mut row = vec![name.clone(), d.len().to_string(), r.n_test.to_string()];
        for v in [r.mean_dp, r.std_dp, r.mean_dq, r.std_dq] {
            row.push(format!("{v:.16e}"));
        }
        for v in [r.mean_dp, r.std_dp, r.mean_dq, r.std_dq] {
            row.push(format!("{:.16e}", v * base));
        }
        w.write_record(&row).map_err(io_err)?;
        m.report(&format!("mean_dp_{name}"), r.mean_dp);
        m.report(&format!("mean_dq_{name}"), r.mean_dq);
    }
    let buf = w.into_inner().map_err(|e| CliError::new(ErrorKind::File, e.to_string()))?;
    let mut s = Staged::default();
    s.add("downstream.csv", buf);
    Ok(s)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn io_err(e: csv::Error) -> CliError {
    CliError::new(ErrorKind::File, e.to_string())
}
