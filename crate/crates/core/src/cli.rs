//! Command-line front end and experiment presets.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::control::optimal_control;
use crate::drift::{
    averaged_drift, averaged_drift_monte_carlo, averaged_drift_numeric, AveragedDrift, SolverError,
    SolverOptions,
};
use crate::fluid::{
    fluid_trajectory, growth_rates, is_stable, stability_threshold, FluidTrajectory, Sweep,
};
use crate::model::{
    load_config, mu_from_rates, RateParams, SystemConfig, CDMA_MEAN_SIZE, CDMA_RATES,
    CDMA_SLOT_LENGTH,
};
use crate::output::{fmt_f64, fmt_set, manifest, Table};
use crate::policy::{parse_custom_table, IndexRule, Policy, PolicySpec, TieBreak};
use crate::row;
use crate::simulator::{
    estimate_mean_cost, run_trajectory, stream_rng, CostEstimate, CostOptions, SimTrajectory,
    DEFAULT_SAMPLE_DT,
};
use crate::Error;

pub const THREADS_ENV: &str = "OPPSCHED_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "oppsched",
    version,
    about = "Opportunistic multiclass scheduling: simulation, drifts, fluid limits, stability and control"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a configuration file and list every violation.
    Validate { config: PathBuf },
    /// Simulate a fluid-scaled trajectory, or steady-state cost with --steady-state.
    Simulate(SimulateArgs),
    /// Averaged drift with the listed classes saturated.
    Drift(DriftArgs),
    /// Piecewise-linear fluid limit.
    Fluid(FluidArgs),
    /// Stability verdict, optionally with a threshold sweep.
    Stability(StabilityArgs),
    /// Optimal fluid control.
    Control(ControlArgs),
    /// Reproduce a numerical experiment.
    Preset(PresetArgs),
}

#[derive(Debug, Args, Clone)]
pub struct PolicyArgs {
    /// sb, pi, pb, rb, cmu, weight:<w1,..> or custom:<file>
    #[arg(long)]
    pub policy: String,
    /// myopic, random:<w1,..> or priority:<1-based permutation>
    #[arg(long)]
    pub tie: Option<String>,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Write CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub config: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Fluid scale.
    #[arg(long, default_value_t = 1000.0)]
    pub r: f64,
    /// Fluid-time horizon.
    #[arg(long, default_value_t = 90.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_DT)]
    pub dt: f64,
    /// Fluid initial state (default all ones).
    #[arg(long, value_delimiter = ',')]
    pub x0: Option<Vec<f64>>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Estimate long-run mean cost instead of a trajectory.
    #[arg(long)]
    pub steady_state: bool,
    #[arg(long, default_value_t = 5_000_000)]
    pub slots: u64,
    #[arg(long, default_value_t = 1_000_000)]
    pub warmup: u64,
    #[arg(long, default_value_t = 10)]
    pub replications: usize,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DriftMethodArg {
    Auto,
    Numeric,
    MonteCarlo,
}

#[derive(Debug, Args)]
pub struct DriftArgs {
    pub config: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Saturated classes, 1-based (`all`, `none`, or a list such as `2` or `1,3`).
    #[arg(long, default_value = "all")]
    pub sat: String,
    #[arg(long, value_enum, default_value_t = DriftMethodArg::Auto)]
    pub method: DriftMethodArg,
    /// Slots for the Monte Carlo method.
    #[arg(long, default_value_t = 10_000_000)]
    pub mc_slots: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct FluidArgs {
    pub config: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, value_delimiter = ',')]
    pub x0: Option<Vec<f64>>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    pub config: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// `lambda<k>:<lo>:<hi>`, e.g. `lambda1:0.004:0.196`.
    #[arg(long)]
    pub sweep: Option<String>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub x0: Option<Vec<f64>>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetName {
    Fig2,
    Fig3a,
    Fig3b,
    Fig3c,
    Table2,
    Table3,
    Table1Check,
}

impl PresetName {
    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::Fig2 => "fig2",
            PresetName::Fig3a => "fig3a",
            PresetName::Fig3b => "fig3b",
            PresetName::Fig3c => "fig3c",
            PresetName::Table2 => "table2",
            PresetName::Table3 => "table3",
            PresetName::Table1Check => "table1_check",
        }
    }
}

/// Knobs a preset run may change; everything else is fixed.
#[derive(Debug, Args, Clone, Default, serde::Serialize)]
pub struct PresetOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fluid scale for trajectory presets.
    #[arg(long)]
    pub r: Option<f64>,
    /// Fluid-time horizon for trajectory presets.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Slots per replication for steady-state presets.
    #[arg(long)]
    pub slots: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Number of load points in the fig3a sweep.
    #[arg(long)]
    pub grid_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PresetArgs {
    #[arg(value_enum)]
    pub name: PresetName,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub overrides: PresetOverrides,
}

/// Parses `args`, runs the command, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Caps the global thread pool at `OPPSCHED_THREADS` when set.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

pub fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!(
                "valid: {} classes, rho = {}",
                cfg.num_classes(),
                fmt_f64(cfg.rho())
            );
            Ok(())
        }
        Command::Simulate(a) => {
            let cfg = load(&a.config, a.seed)?;
            let spec = resolve_policy(&a.policy, &cfg)?;
            let t = if a.steady_state {
                let opts = CostOptions {
                    horizon: a.slots,
                    warmup: a.warmup,
                    replications: a.replications,
                    ..Default::default()
                };
                check_cost_opts(&opts)?;
                let p = Policy::new(spec.clone(), &cfg)?;
                let est = estimate_mean_cost(&cfg, &p, &opts);
                let m = manifest(
                    "simulate",
                    Some(&cfg),
                    json!({
                        "policy": spec.index_rule.to_string(), "tie": spec.tie_break.to_string(),
                        "steady_state": true, "slots": a.slots, "warmup": a.warmup,
                        "replications": a.replications,
                    }),
                );
                let mut t = Table::new(m, COST_HEADER);
                push_cost(&mut t, &cfg, &spec, &est);
                t
            } else {
                let x0 = initial(a.x0, &cfg)?;
                if !(a.r >= 1.0) || !(a.horizon >= 0.0) || !(a.dt > 0.0) {
                    return Err(Error::Usage("need r >= 1, horizon >= 0, dt > 0".into()));
                }
                let p = Policy::new(spec.clone(), &cfg)?;
                let tr =
                    run_trajectory(&cfg, &p, a.r, &x0, a.horizon, a.dt, stream_rng(cfg.seed, 0));
                let m = manifest(
                    "simulate",
                    Some(&cfg),
                    json!({
                        "policy": spec.index_rule.to_string(), "tie": spec.tie_break.to_string(),
                        "r": a.r, "horizon": a.horizon, "dt": a.dt, "x0": x0,
                    }),
                );
                trajectory_table(m, &tr)
            };
            emit(&t, a.out.out.as_deref())
        }
        Command::Drift(a) => {
            let cfg = load_config(&a.config)?;
            let spec = resolve_policy(&a.policy, &cfg)?;
            let p = Policy::new(spec.clone(), &cfg)?;
            let u = parse_sat(&a.sat, cfg.num_classes())?;
            let o = SolverOptions::default();
            let d = match a.method {
                DriftMethodArg::Auto => averaged_drift(&p, &cfg, &u, &o)?,
                DriftMethodArg::Numeric => averaged_drift_numeric(&p, &cfg, &u, &o)?,
                DriftMethodArg::MonteCarlo => averaged_drift_monte_carlo(&p, &cfg, &u, a.mc_slots),
            };
            let m = manifest(
                "drift",
                Some(&cfg),
                json!({
                    "policy": spec.index_rule.to_string(), "tie": spec.tie_break.to_string(),
                    "sat": a.sat, "method": format!("{:?}", a.method),
                }),
            );
            let mut t = Table::new(m, DRIFT_HEADER);
            push_drift(&mut t, &spec, &Ok(d), &u, cfg.num_classes());
            emit(&t, a.out.out.as_deref())
        }
        Command::Fluid(a) => {
            let cfg = load_config(&a.config)?;
            let spec = resolve_policy(&a.policy, &cfg)?;
            let p = Policy::new(spec.clone(), &cfg)?;
            let x0 = initial(a.x0, &cfg)?;
            let tr = fluid_trajectory(&p, &cfg, &x0, &SolverOptions::default())?;
            for w in &tr.warnings {
                eprintln!("warning: {w}");
            }
            let m = manifest(
                "fluid",
                Some(&cfg),
                json!({
                    "policy": spec.index_rule.to_string(), "tie": spec.tie_break.to_string(), "x0": x0,
                }),
            );
            emit(&fluid_table(m, &tr), a.out.out.as_deref())
        }
        Command::Stability(a) => {
            let cfg = load_config(&a.config)?;
            let spec = resolve_policy(&a.policy, &cfg)?;
            let p = Policy::new(spec.clone(), &cfg)?;
            let o = SolverOptions::default();
            let rep = is_stable(&p, &cfg, &o)?;
            let rho_star = match &a.sweep {
                Some(s) => {
                    stability_threshold(&spec, &cfg, parse_sweep(s, cfg.num_classes())?, &o)?
                        .rho_star
                }
                None if p.is_best_rate(&cfg) => 1.0,
                None => f64::NAN,
            };
            let m = manifest(
                "stability",
                Some(&cfg),
                json!({
                    "policy": spec.index_rule.to_string(), "tie": spec.tie_break.to_string(),
                    "sweep": a.sweep,
                }),
            );
            let mut t = Table::new(m, STABILITY_HEADER);
            t.push(row![
                spec.index_rule.to_string(),
                spec.tie_break.to_string(),
                rep.rho,
                rep.max_stable,
                rep.policy_stable,
                rho_star
            ]);
            emit(&t, a.out.out.as_deref())
        }
        Command::Control(a) => {
            let cfg = load_config(&a.config)?;
            let x0 = initial(a.x0, &cfg)?;
            let oc = optimal_control(&cfg, &x0)?;
            let m = manifest("control", Some(&cfg), json!({ "x0": x0 }));
            let mut t = Table::new(m, CONTROL_HEADER);
            for (l, s) in oc.segments.iter().enumerate() {
                for k in 0..cfg.num_classes() {
                    t.push(row![
                        l,
                        s.t_start,
                        s.t_end,
                        k + 1,
                        s.u_star[k],
                        s.x_start[k]
                    ]);
                }
            }
            emit(&t, a.out.out.as_deref())
        }
        Command::Preset(a) => {
            let files = run_preset(a.name, &a.overrides)?;
            fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
            for (name, t) in files {
                let path = a.out_dir.join(name);
                emit(&t, Some(&path))?;
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn emit(t: &Table, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| io_err(p, e))?;
            t.write_to(std::io::BufWriter::new(f))
                .map_err(|e| io_err(p, e))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            t.write_to(&mut lock)
                .and_then(|_| lock.flush())
                .map_err(|e| io_err(Path::new("<stdout>"), e))
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<SystemConfig, Error> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn initial(x0: Option<Vec<f64>>, cfg: &SystemConfig) -> Result<Vec<f64>, Error> {
    let x0 = x0.unwrap_or_else(|| vec![1.0; cfg.num_classes()]);
    if x0.len() != cfg.num_classes() || x0.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Usage(format!(
            "--x0 needs {} nonnegative values",
            cfg.num_classes()
        )));
    }
    Ok(x0)
}

fn check_cost_opts(o: &CostOptions) -> Result<(), Error> {
    if o.horizon <= o.warmup || o.replications == 0 {
        return Err(Error::Usage(
            "need slots > warmup and at least one replication".into(),
        ));
    }
    Ok(())
}

/// Builds a policy from CLI strings; `custom:<file>` reads a JSON table.
pub fn resolve_policy(a: &PolicyArgs, cfg: &SystemConfig) -> Result<PolicySpec, Error> {
    let rule = match a.policy.strip_prefix("custom:") {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(Path::new(path), e))?;
            parse_custom_table(&text)?
        }
        None => a.policy.parse::<IndexRule>()?,
    };
    let spec = match &a.tie {
        Some(t) => PolicySpec::new(rule, t.parse::<TieBreak>()?),
        None => PolicySpec::with_default_tie(rule, cfg.num_classes()),
    };
    Policy::new(spec.clone(), cfg)?;
    Ok(spec)
}

/// Saturated classes (1-based list) to the 0-based emptied set.
pub fn parse_sat(s: &str, k: usize) -> Result<Vec<usize>, Error> {
    let sat: Vec<usize> = match s.trim() {
        "all" => (0..k).collect(),
        "none" | "" => Vec::new(),
        list => list
            .split(',')
            .map(|t| match t.trim().parse::<usize>() {
                Ok(c) if (1..=k).contains(&c) => Ok(c - 1),
                _ => Err(Error::Usage(format!("bad class `{t}` in --sat (1..={k})"))),
            })
            .collect::<Result<_, _>>()?,
    };
    Ok((0..k).filter(|c| !sat.contains(c)).collect())
}

pub fn parse_sweep(s: &str, k: usize) -> Result<Sweep, Error> {
    let bad = || Error::Usage(format!("bad sweep `{s}`; expected lambda<k>:<lo>:<hi>"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let class: usize = parts[0]
        .strip_prefix("lambda")
        .and_then(|c| c.parse().ok())
        .filter(|c| (1..=k).contains(c))
        .ok_or_else(bad)?;
    let lo: f64 = parts[1].parse().map_err(|_| bad())?;
    let hi: f64 = parts[2].parse().map_err(|_| bad())?;
    Ok(Sweep {
        class: class - 1,
        lo,
        hi,
    })
}

pub const TRAJECTORY_HEADER: &[&str] = &["t", "class", "Y", "tau_best", "tau_nonbest"];
pub const COST_HEADER: &[&str] = &[
    "rho",
    "policy",
    "tie",
    "mean_cost",
    "ci_half",
    "replications",
    "unstable_replications",
];
pub const DRIFT_HEADER: &[&str] = &[
    "policy",
    "tie",
    "U",
    "class",
    "delta_tilde",
    "method",
    "tolerance",
];
pub const FLUID_HEADER: &[&str] = &[
    "segment", "T_start", "T_end", "U", "class", "drift", "y_start",
];
pub const STABILITY_HEADER: &[&str] = &[
    "policy",
    "tie",
    "rho",
    "max_stable",
    "policy_stable",
    "rho_star",
];
pub const CONTROL_HEADER: &[&str] = &["segment", "t_start", "t_end", "class", "u_star", "x_star"];

pub fn trajectory_table(m: Value, tr: &SimTrajectory) -> Table {
    let mut t = Table::new(m, TRAJECTORY_HEADER);
    for i in 0..tr.times.len() {
        for k in 0..tr.y[i].len() {
            t.push(row![
                tr.times[i],
                k + 1,
                tr.y[i][k],
                tr.tau_best(i, k),
                tr.tau_nonbest(i, k)
            ]);
        }
    }
    t
}

pub fn fluid_table(m: Value, tr: &FluidTrajectory) -> Table {
    let mut t = Table::new(m, FLUID_HEADER);
    for (l, s) in tr.segments.iter().enumerate() {
        for k in 0..s.drift.len() {
            t.push(row![
                l,
                s.t_start,
                s.t_end,
                fmt_set(&s.set),
                k + 1,
                s.drift[k],
                s.y_start[k]
            ]);
        }
    }
    t
}

fn push_cost(t: &mut Table, cfg: &SystemConfig, spec: &PolicySpec, e: &CostEstimate) {
    t.push(row![
        cfg.rho(),
        spec.index_rule.to_string(),
        spec.tie_break.to_string(),
        e.mean_cost,
        e.ci_half,
        e.replication_means.len(),
        e.unstable_replications
    ]);
}

fn push_drift(
    t: &mut Table,
    spec: &PolicySpec,
    d: &Result<AveragedDrift, SolverError>,
    u: &[usize],
    kc: usize,
) {
    for k in 0..kc {
        let (v, method, tol) = match d {
            Ok(d) => (d.drift[k], d.method.to_string(), d.tolerance),
            Err(SolverError::NotErgodic(_)) => (f64::NAN, "not_ergodic".to_string(), f64::NAN),
            Err(_) => (f64::NAN, "solver_error".to_string(), f64::NAN),
        };
        t.push(row![
            spec.index_rule.to_string(),
            spec.tie_break.to_string(),
            fmt_set(u),
            k + 1,
            v,
            method,
            tol
        ]);
    }
}

/// The five policies compared throughout the experiments.
pub fn named_policies(k: usize) -> Vec<(&'static str, PolicySpec)> {
    vec![
        ("pi", PolicySpec::pi(k)),
        ("sb", PolicySpec::sb(k)),
        ("pb", PolicySpec::pb(k)),
        ("rb", PolicySpec::rb(k)),
        ("cmu", PolicySpec::cmu(k)),
    ]
}

pub const TABLE2_LAMBDA1: f64 = 0.14;
pub const OVERLOAD_LAMBDA1: f64 = 0.24;
pub const SWEEP_LO: f64 = 0.004;
pub const SWEEP_HI: f64 = 0.196;

/// `lambda_1` giving load `rho` on the two-class system.
pub fn lambda1_for_rho(rho: f64) -> f64 {
    let c = SystemConfig::cdma_table1(0.0);
    (rho - c.rho()) * c.classes[0].best_mu()
}

fn with_seed(mut cfg: SystemConfig, o: &PresetOverrides) -> SystemConfig {
    cfg.seed = o.seed.unwrap_or(1);
    cfg
}

fn preset_manifest(
    name: PresetName,
    cfg: &SystemConfig,
    o: &PresetOverrides,
    extra: Value,
) -> Value {
    manifest(
        &format!("preset {}", name.as_str()),
        Some(cfg),
        json!({ "overrides": o, "resolved": extra }),
    )
}

fn cost_options(o: &PresetOverrides) -> Result<CostOptions, Error> {
    let c = CostOptions {
        horizon: o.slots.unwrap_or(5_000_000),
        warmup: o.warmup.unwrap_or(1_000_000),
        replications: o.replications.unwrap_or(10),
        ..Default::default()
    };
    check_cost_opts(&c)?;
    Ok(c)
}

/// Files (name, table) produced by a preset.
pub fn run_preset(name: PresetName, o: &PresetOverrides) -> Result<Vec<(String, Table)>, Error> {
    let k = 2;
    let solver = SolverOptions::default();
    let mut files = Vec::new();
    match name {
        PresetName::Table1Check => {
            let cfg = SystemConfig::cdma_table1(TABLE2_LAMBDA1);
            let mu = mu_from_rates(&RateParams {
                rates: CDMA_RATES.to_vec(),
                slot_length: CDMA_SLOT_LENGTH,
                mean_size: CDMA_MEAN_SIZE,
            })?;
            let m = preset_manifest(
                name,
                &cfg,
                o,
                json!({
                    "slot_length": CDMA_SLOT_LENGTH, "mean_size": CDMA_MEAN_SIZE,
                }),
            );
            let mut t = Table::new(
                m,
                &["class", "state", "rate_kbps", "mu_derived", "mu_table", "q"],
            );
            for (c, class) in cfg.classes.iter().enumerate() {
                for n in 0..class.num_states() {
                    t.push(row![
                        c + 1,
                        n + 1,
                        CDMA_RATES[n],
                        mu[n],
                        class.mu[n],
                        class.q[n]
                    ]);
                }
            }
            files.push(("table1_check.csv".to_string(), t));
        }
        PresetName::Table2 | PresetName::Table3 => {
            let l1 = if name == PresetName::Table2 {
                TABLE2_LAMBDA1
            } else {
                OVERLOAD_LAMBDA1
            };
            let cfg = SystemConfig::cdma_table1(l1);
            let m = preset_manifest(
                name,
                &cfg,
                o,
                json!({ "lambda1": l1, "sets": ["{}", "{1}"] }),
            );
            let mut t = Table::new(m, DRIFT_HEADER);
            for (_, spec) in named_policies(k) {
                let p = Policy::new(spec.clone(), &cfg)?;
                for u in [vec![], vec![0]] {
                    let d = averaged_drift(&p, &cfg, &u, &solver);
                    push_drift(&mut t, &spec, &d, &u, k);
                }
            }
            files.push((format!("{}.csv", name.as_str()), t));
        }
        PresetName::Fig2 | PresetName::Fig3c => {
            let (l1, r_def, h_def) = if name == PresetName::Fig2 {
                (TABLE2_LAMBDA1, 10_000.0, 90.0)
            } else {
                (OVERLOAD_LAMBDA1, 100.0, 200.0)
            };
            let cfg = with_seed(SystemConfig::cdma_table1(l1), o);
            let r = o.r.unwrap_or(r_def);
            let horizon = o.horizon.unwrap_or(h_def);
            if !(r >= 1.0) || !(horizon >= 0.0) {
                return Err(Error::Usage("need r >= 1 and horizon >= 0".into()));
            }
            let x0 = vec![1.0; k];
            let extra = json!({ "lambda1": l1, "r": r, "horizon": horizon, "dt": DEFAULT_SAMPLE_DT, "x0": x0 });
            let runs: Vec<Result<(String, Table, Table), Error>> = named_policies(k)
                .into_par_iter()
                .enumerate()
                .map(|(i, (tag, spec))| {
                    let p = Policy::new(spec.clone(), &cfg)?;
                    let tr = run_trajectory(
                        &cfg,
                        &p,
                        r,
                        &x0,
                        horizon,
                        DEFAULT_SAMPLE_DT,
                        stream_rng(cfg.seed, i as u64),
                    );
                    let fl = fluid_trajectory(&p, &cfg, &x0, &solver)?;
                    let mut ex = extra.clone();
                    ex["policy"] = json!(spec.index_rule.to_string());
                    ex["tie"] = json!(spec.tie_break.to_string());
                    ex["stream"] = json!(i);
                    let m = preset_manifest(name, &cfg, o, ex);
                    Ok((
                        tag.to_string(),
                        trajectory_table(m.clone(), &tr),
                        fluid_table(m, &fl),
                    ))
                })
                .collect();
            let mut growth = Table::new(
                preset_manifest(name, &cfg, o, extra.clone()),
                &["policy", "tie", "class", "growth_rate"],
            );
            for (run, (_, spec)) in runs.into_iter().zip(named_policies(k)) {
                let (tag, tt, ft) = run?;
                files.push((format!("{}_trajectory_{tag}.csv", name.as_str()), tt));
                files.push((format!("{}_fluid_{tag}.csv", name.as_str()), ft));
                let p = Policy::new(spec.clone(), &cfg)?;
                let g = growth_rates(&p, &cfg, &solver)?;
                for (c, v) in g.iter().enumerate() {
                    growth.push(row![
                        spec.index_rule.to_string(),
                        spec.tie_break.to_string(),
                        c + 1,
                        *v
                    ]);
                }
            }
            files.push((format!("{}_growth.csv", name.as_str()), growth));
        }
        PresetName::Fig3a => {
            let opts = cost_options(o)?;
            let points = o.grid_points.unwrap_or(16);
            if points < 2 {
                return Err(Error::Usage("grid_points must be at least 2".into()));
            }
            let grid: Vec<f64> = (0..points)
                .map(|i| SWEEP_LO + (SWEEP_HI - SWEEP_LO) * i as f64 / (points - 1) as f64)
                .collect();
            let base = with_seed(SystemConfig::cdma_table1(TABLE2_LAMBDA1), o);
            let extra = json!({ "lambda1_grid": grid, "slots": opts.horizon, "warmup": opts.warmup, "replications": opts.replications });
            let jobs: Vec<(usize, usize)> = (0..5)
                .flat_map(|p| (0..points).map(move |g| (p, g)))
                .collect();
            let policies = named_policies(k);
            let results: Vec<Result<(SystemConfig, CostEstimate), Error>> = jobs
                .par_iter()
                .map(|&(pi, gi)| {
                    let cfg = base.clone().with_lambda(0, grid[gi]);
                    let p = Policy::new(policies[pi].1.clone(), &cfg)?;
                    let e = estimate_mean_cost(&cfg, &p, &opts);
                    Ok((cfg, e))
                })
                .collect();
            let mut cost = Table::new(preset_manifest(name, &base, o, extra.clone()), COST_HEADER);
            for (res, &(pi, _)) in results.into_iter().zip(&jobs) {
                let (cfg, e) = res?;
                push_cost(&mut cost, &cfg, &policies[pi].1, &e);
            }
            let mut stab = Table::new(preset_manifest(name, &base, o, extra), STABILITY_HEADER);
            let sweep = Sweep {
                class: 0,
                lo: SWEEP_LO,
                hi: SWEEP_HI,
            };
            for (_, spec) in &policies {
                let rho_star = stability_threshold(spec, &base, sweep, &solver)?.rho_star;
                for &l in &grid {
                    let cfg = base.clone().with_lambda(0, l);
                    let p = Policy::new(spec.clone(), &cfg)?;
                    let rep = is_stable(&p, &cfg, &solver)?;
                    stab.push(row![
                        spec.index_rule.to_string(),
                        spec.tie_break.to_string(),
                        rep.rho,
                        rep.max_stable,
                        rep.policy_stable,
                        rho_star
                    ]);
                }
            }
            files.push(("fig3a_cost.csv".to_string(), cost));
            files.push(("fig3a_stability.csv".to_string(), stab));
        }
        PresetName::Fig3b => {
            let opts = cost_options(o)?;
            let rhos = [0.6, 0.7, 0.8, 0.9];
            let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
            let base = with_seed(SystemConfig::cdma_table1(TABLE2_LAMBDA1), o);
            let jobs: Vec<(f64, f64)> = rhos
                .iter()
                .flat_map(|&r| alphas.iter().map(move |&a| (r, a)))
                .collect();
            let results: Vec<Result<CostEstimate, Error>> = jobs
                .par_iter()
                .map(|&(rho, a)| {
                    let cfg = base.clone().with_lambda(0, lambda1_for_rho(rho));
                    let p = Policy::new(pi_with_alpha(a), &cfg)?;
                    Ok(estimate_mean_cost(&cfg, &p, &opts))
                })
                .collect();
            let results: Vec<CostEstimate> = results.into_iter().collect::<Result<_, _>>()?;
            let extra = json!({ "rho": rhos, "alpha": alphas, "slots": opts.horizon, "warmup": opts.warmup, "replications": opts.replications });
            let mut t = Table::new(
                preset_manifest(name, &base, o, extra),
                &[
                    "rho",
                    "alpha",
                    "mean_cost",
                    "ci_half",
                    "degradation_pct",
                    "unstable_replications",
                ],
            );
            for (ri, &rho) in rhos.iter().enumerate() {
                let row_of = |ai: usize| &results[ri * alphas.len() + ai];
                let reference = row_of(alphas.len() - 1).mean_cost;
                for (ai, &a) in alphas.iter().enumerate() {
                    let e = row_of(ai);
                    t.push(row![
                        rho,
                        a,
                        e.mean_cost,
                        e.ci_half,
                        degradation_pct(e.mean_cost, reference),
                        e.unstable_replications
                    ]);
                }
            }
            files.push(("fig3b.csv".to_string(), t));
        }
    }
    Ok(files)
}

/// PI with class 1 favoured with probability `alpha` on ties.
pub fn pi_with_alpha(alpha: f64) -> PolicySpec {
    PolicySpec::pi(2).with_tie(TieBreak::RandomWeights(vec![alpha, 1.0 - alpha]))
}

pub fn degradation_pct(cost: f64, reference: f64) -> f64 {
    (cost / reference - 1.0) * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sat_lists() {
        assert_eq!(parse_sat("all", 2).unwrap(), Vec::<usize>::new());
        assert_eq!(parse_sat("none", 2).unwrap(), vec![0, 1]);
        assert_eq!(parse_sat("2", 2).unwrap(), vec![0]);
        assert!(parse_sat("3", 2).is_err());
    }

    #[test]
    fn sweep_strings() {
        let s = parse_sweep("lambda1:0.004:0.196", 2).unwrap();
        assert_eq!((s.class, s.lo, s.hi), (0, 0.004, 0.196));
        assert!(parse_sweep("lambda3:0:1", 2).is_err());
        assert!(parse_sweep("mu1:0:1", 2).is_err());
    }

    #[test]
    fn rho_to_lambda() {
        assert!((lambda1_for_rho(0.85) - 0.14).abs() < 1e-12);
        assert!((lambda1_for_rho(1.1) - 0.24).abs() < 1e-12);
    }

    #[test]
    fn table2_preset_has_all_rows() {
        let f = run_preset(PresetName::Table2, &PresetOverrides::default()).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].1.rows.len(), 5 * 2 * 2);
    }

    #[test]
    fn table1_check_rows() {
        let f = run_preset(PresetName::Table1Check, &PresetOverrides::default()).unwrap();
        for r in &f[0].1.rows {
            let (a, b): (f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap());
            let q: f64 = r[5].parse().unwrap();
            if q > 0.0 {
                assert!((a - b).abs() <= 1e-3);
            }
        }
    }
}
