//! Experiment dispatch and artifact emission.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use nonlocal_core::attractor::{absorbing_trajectory, assess_continuity};
use nonlocal_core::integrator::random_initial_fields;
use nonlocal_core::{
    integrate, sample_attractor, ContinuityParams, DerivedConstants, Error, ModelSpec, Result,
    SamplingParams, StateField,
};

use crate::config::{ExperimentName, RunConfig};
use crate::exit_code;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub threads: usize,
}

/// What a successful run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub config_hash: String,
    /// File names relative to the output directory, in emission order.
    pub files: Vec<String>,
    pub summary: String,
}

/// Hex SHA-256 of the canonical serialized configuration.
pub fn config_hash(config: &RunConfig) -> String {
    hex::encode(Sha256::digest(config.to_toml().as_bytes()))
}

struct Outputs {
    dir: PathBuf,
    prefix: String,
    files: Vec<String>,
    summary: String,
}

impl Outputs {
    fn create(&mut self, name: String) -> Result<BufWriter<File>> {
        let file = File::create(self.dir.join(&name))?;
        self.files.push(name);
        Ok(BufWriter::new(file))
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut w = self.create(name.to_string())?;
        serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn csv(
        &mut self,
        suffix: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<()> {
        let mut w = self.create(format!("{}_{suffix}.csv", self.prefix))?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn line(&mut self, text: impl AsRef<str>) {
        self.summary.push_str(text.as_ref());
        self.summary.push('\n');
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Runs the configured experiment, writing results, CSVs, a summary and a
/// manifest into `options.out_dir`. The manifest is written even when the
/// experiment fails.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<RunSummary> {
    let started = Instant::now();
    fs::create_dir_all(&options.out_dir)?;
    let hash = config_hash(config);
    let mut out = Outputs {
        dir: options.out_dir.clone(),
        prefix: format!("{}_{}", config.experiment.name.as_str(), &hash[..8]),
        files: Vec::new(),
        summary: String::new(),
    };
    out.line(format!("experiment: {}", config.experiment.name.as_str()));
    out.line(format!("config hash: {hash}"));
    out.line(format!("seed: {}", config.seed));

    let result = dispatch(config, &mut out);
    match &result {
        Ok(()) => out.line("status: ok"),
        Err(e) => out.line(format!("status: failed (exit {}): {e}", exit_code(e))),
    }
    let summary = out.summary.clone();
    let mut w = out.create("summary.txt".into())?;
    w.write_all(summary.as_bytes())?;
    w.flush()?;

    out.files.push("manifest.json".into());
    let manifest = json!({
        "config_hash": hash,
        "experiment": config.experiment.name.as_str(),
        "seed": config.seed,
        "threads": options.threads,
        "versions": {
            "nonlocal-cli": env!("CARGO_PKG_VERSION"),
            "nonlocal-core": nonlocal_core::VERSION,
        },
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "status": if result.is_ok() { "ok" } else { "failed" },
        "exit_code": result.as_ref().map_or_else(exit_code, |_| 0),
        "error": result.as_ref().err().map(ToString::to_string),
        "config": config,
        "files": out.files,
    });
    let mut w = BufWriter::new(File::create(options.out_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;

    result.map(|()| RunSummary {
        config_hash: hash,
        files: out.files,
        summary,
    })
}

fn dispatch(config: &RunConfig, out: &mut Outputs) -> Result<()> {
    let model = config.build_model()?;
    if config.experiment.name == ExperimentName::Validate {
        return validate(config, &model, out);
    }
    let constants = model.validate()?;
    out.line(format!("r_delta: {}", constants.r_delta));
    out.line(format!("norm decay rate: {}", constants.norm_decay_rate));
    match config.experiment.name {
        ExperimentName::Validate => unreachable!("handled above"),
        ExperimentName::Simulate => simulate(config, &model, &constants, out),
        ExperimentName::Absorb => absorb(config, &model, &constants, out),
        ExperimentName::Attractor => attractor(config, &model, &constants, out),
        ExperimentName::Continuity => continuity(config, &model, &constants, out),
    }
}

fn validate(config: &RunConfig, model: &ModelSpec, out: &mut Outputs) -> Result<()> {
    let report = model.assess();
    out.json(
        "results.json",
        &json!({
            "experiment": "validate",
            "passed": report.passed(),
            "report": report,
            "kernel": {
                "label": model.kernel.label(),
                "norm_1": model.kernel.p_norm(1.0),
                "norm_conjugate": model.kernel.p_norm(model.space.conjugate()),
            },
            "domain_measure": model.grid().measure(),
            "p": config.model.p,
        }),
    )?;
    for check in &report.checks {
        out.line(format!(
            "[{}] {} (slack {})",
            if check.holds { "ok" } else { "FAIL" },
            check.name,
            check.slack
        ));
    }
    if let Some(c) = &report.constants {
        out.line(format!("r_delta: {}", c.r_delta));
        out.line(format!("norm decay rate: {}", c.norm_decay_rate));
        if let Some(g) = &c.gradient {
            out.line(format!("gradient decay rate: {}", g.grad_decay_rate));
        }
    }
    model.validate().map(|_| ())
}

fn initial_fields(
    config: &RunConfig,
    model: &ModelSpec,
    constants: &DerivedConstants,
) -> Result<Vec<StateField>> {
    let e = &config.experiment;
    let smoothing = e.smooth_initial.then_some(model.kernel.as_ref());
    random_initial_fields(
        model,
        config.seed,
        e.ensemble_size,
        e.initial_radius * constants.r_delta,
        smoothing,
    )
}

fn simulate(
    config: &RunConfig,
    model: &ModelSpec,
    constants: &DerivedConstants,
    out: &mut Outputs,
) -> Result<()> {
    let fields = initial_fields(config, model, constants)?;
    let ic = config.integrator_config();
    let records = fields
        .par_iter()
        .map(|u0| integrate(model, u0, &ic))
        .collect::<Result<Vec<_>>>()?;
    let mut members = Vec::new();
    for (m, r) in records.iter().enumerate() {
        out.csv(&format!("traj{m:03}"), |w| r.write_csv(w))?;
        members.push(json!({
            "member": m,
            "initial_norms": r.lp_norms[0],
            "final_norms": r.lp_norms.last(),
            "final_sup_norm": r.sup_norms.last(),
            "records": r.len(),
        }));
    }
    out.json(
        "results.json",
        &json!({
            "experiment": "simulate",
            "constants": constants,
            "p": config.model.p,
            "t_end": ic.t_end,
            "members": members,
        }),
    )?;
    let worst = records.iter().map(|r| r.final_norm(0)).fold(0.0, f64::max);
    out.line(format!("members: {}", records.len()));
    out.line(format!("largest final norm: {worst}"));
    Ok(())
}

fn absorb(
    config: &RunConfig,
    model: &ModelSpec,
    constants: &DerivedConstants,
    out: &mut Outputs,
) -> Result<()> {
    let fields = initial_fields(config, model, constants)?;
    let ic = config.integrator_config();
    let runs = fields
        .par_iter()
        .map(|u0| absorbing_trajectory(model, u0, &ic))
        .collect::<Result<Vec<_>>>()?;
    for (m, (_, r)) in runs.iter().enumerate() {
        out.csv(&format!("traj{m:03}"), |w| r.write_csv(w))?;
    }
    out.csv("absorption", |w| {
        writeln!(
            w,
            "member,initial_norm,measured_entry_time,analytic_bound,within_bound"
        )?;
        for (m, (a, _)) in runs.iter().enumerate() {
            writeln!(
                w,
                "{m},{},{},{},{}",
                num(a.initial_norm),
                num(a.measured_entry_time),
                num(a.analytic_bound),
                a.within_bound
            )?;
        }
        Ok(())
    })?;
    let absorptions: Vec<_> = runs.iter().map(|(a, _)| a).collect();
    out.json(
        "results.json",
        &json!({
            "experiment": "absorb",
            "constants": constants,
            "members": absorptions,
        }),
    )?;
    let late = absorptions.iter().filter(|a| !a.within_bound).count();
    let slowest = absorptions
        .iter()
        .map(|a| a.measured_entry_time)
        .fold(0.0, f64::max);
    out.line(format!("slowest entry: {slowest}"));
    out.line(format!("analytic bound: {}", absorptions[0].analytic_bound));
    if late > 0 {
        return Err(Error::Diagnostic(format!(
            "{late} of {} members entered the ball later than the bound plus one record interval",
            absorptions.len()
        )));
    }
    Ok(())
}

fn sampling_params(config: &RunConfig, constants: &DerivedConstants) -> SamplingParams {
    let e = &config.experiment;
    let initial_radius = e.initial_radius * constants.r_delta;
    SamplingParams {
        ensemble_size: e.ensemble_size,
        initial_radius,
        burn_in: e.burn_in.unwrap_or_else(|| {
            2.0 * constants.absorbing_time_bound(initial_radius) + 10.0 / constants.epsilon
        }),
        spacing: e.spacing,
        snapshots_per_member: e.snapshots_per_member,
        seed: config.seed,
        dt: config.integrator.dt,
        scheme: config.integrator.scheme,
    }
}

fn attractor(
    config: &RunConfig,
    model: &ModelSpec,
    constants: &DerivedConstants,
    out: &mut Outputs,
) -> Result<()> {
    let params = sampling_params(config, constants);
    let sample = sample_attractor(model, &params)?;
    let per = params.snapshots_per_member;
    out.csv("snapshots", |w| {
        write!(w, "member,index")?;
        for p in &config.model.p {
            write!(w, ",norm_p{p}")?;
        }
        writeln!(w, ",sup_norm")?;
        for (k, s) in sample.states.iter().enumerate() {
            write!(w, "{},{}", k / per, k % per)?;
            for &p in &config.model.p {
                write!(w, ",{}", num(s.lp_norm(nonlocal_core::LpSpace::new(p)?)))?;
            }
            writeln!(w, ",{}", num(s.sup_norm()))?;
        }
        Ok(())
    })?;
    out.csv("states", |w| write_states(w, &sample.states, per))?;
    let max_norm = sample.max_norm(model.space);
    out.json(
        "results.json",
        &json!({
            "experiment": "attractor",
            "constants": constants,
            "kernel_id": sample.kernel_id,
            "sampling": params,
            "sample_size": sample.len(),
            "max_norm": max_norm,
        }),
    )?;
    out.line(format!("sample size: {}", sample.len()));
    out.line(format!("largest retained norm: {max_norm}"));
    Ok(())
}

fn write_states(w: &mut impl Write, states: &[StateField], per: usize) -> Result<()> {
    let n = states.first().map_or(0, StateField::len);
    let mut header = String::from("member,index");
    for i in 0..n {
        write!(header, ",u{i}").expect("writing to a String");
    }
    writeln!(w, "{header}")?;
    for (k, s) in states.iter().enumerate() {
        write!(w, "{},{}", k / per, k % per)?;
        for &v in s.values() {
            write!(w, ",{}", num(v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn continuity(
    config: &RunConfig,
    model: &ModelSpec,
    constants: &DerivedConstants,
    out: &mut Outputs,
) -> Result<()> {
    let e = &config.experiment;
    let params = ContinuityParams {
        sampling: sampling_params(config, constants),
        deviation: config.integrator_config(),
        tolerance: e.tolerance.map(|t| t * constants.r_delta),
        final_threshold: e.final_threshold.map(|t| t * constants.r_delta),
        assembly: config.assembly_options(),
    };
    let report = assess_continuity(
        model,
        &config.kernel_spec(),
        &e.perturbation,
        &e.levels,
        &params,
    )?;
    out.csv("continuity", |w| {
        writeln!(w, "level,perturbation_size,semidistance,deviation_ratio")?;
        for k in 0..report.levels.len() {
            writeln!(
                w,
                "{},{},{},{}",
                num(report.levels[k]),
                num(report.perturbation_sizes[k]),
                num(report.semidistances[k]),
                num(report.deviation_ratios[k])
            )?;
        }
        Ok(())
    })?;
    out.csv("envelope", |w| {
        writeln!(w, "t,envelope")?;
        for (t, v) in report.times.iter().zip(&report.gronwall_envelope) {
            writeln!(w, "{},{}", num(*t), num(*v))?;
        }
        Ok(())
    })?;
    out.json(
        "results.json",
        &json!({
            "experiment": "continuity",
            "constants": constants,
            "perturbation": e.perturbation,
            "report": report,
        }),
    )?;
    for (l, d) in report.levels.iter().zip(&report.semidistances) {
        out.line(format!("level {l}: semidistance {d}"));
    }
    out.line(format!(
        "envelope violations: {}",
        report.envelope_violations
    ));
    report.check_contract()
}

/// Reads a configuration file and applies command-line overrides.
pub fn load_config(
    path: &Path,
    experiment: ExperimentName,
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let mut config = crate::config::parse_config(&text)?;
    config.experiment.name = experiment;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(dir) = out_dir {
        config.output_dir = dir.to_path_buf();
    }
    config.check()?;
    Ok(config)
}
