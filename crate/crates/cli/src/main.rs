//! `qebm`: build states, sample POVM outcomes, learn energy-based models,
//! sample them and estimate quantum quantities.

mod artifacts;
mod config;
mod error;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qebm::ebm::Symmetry;
use qebm::screen::{FamilyKind, OptimizerKind};
use serde::de::DeserializeOwned;

use config::{FidelityTarget, PipelineConfig, StateSpec};
use error::CliError;
use pipeline::{Context, Requests};

#[derive(Parser)]
#[command(name = "qebm", version, about = "Learn energy-based models of quantum states from POVM data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured state(s) and write exact reference values.
    State(Opts),
    /// Draw POVM measurement samples from the configured state(s).
    Sample(Opts),
    /// Fit an energy-based model to measurement samples.
    Learn(Opts),
    /// Draw Gibbs samples from a model file.
    Gibbs(Opts),
    /// Estimate observables and reduced states from samples.
    Estimate(Opts),
    /// Order strengths of a polynomial model file.
    Orders(Opts),
    /// Fidelity with a pure target estimated from samples.
    Fidelity(Opts),
    /// Total variation distance of samples to the exact outcome table.
    Tvd(Opts),
    /// Full pipeline: sample, learn, Gibbs-sample and estimate.
    Run(Opts),
}

/// Flags override the config file, which overrides defaults.
#[derive(clap::Args)]
struct Opts {
    /// TOML or JSON pipeline config.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Model file (gibbs, orders).
    #[arg(long)]
    model: Option<PathBuf>,

    /// computational, tetrahedral or rotated-tetrahedral.
    #[arg(long)]
    povm: Option<String>,
    #[arg(long)]
    povm_seed: Option<u64>,
    /// Inverse temperature of a thermal state.
    #[arg(long)]
    beta: Option<f64>,

    /// Number of measurement rows to draw.
    #[arg(short, long)]
    m: Option<usize>,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// External sample file (replaces sampling.m).
    #[arg(long)]
    samples: Option<PathBuf>,

    #[arg(long, value_parser = parse_kebab::<FamilyKind>)]
    family: Option<FamilyKind>,
    #[arg(long)]
    max_order: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_parser = parse_kebab::<OptimizerKind>)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    l1_radius: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    spin_flip: bool,
    #[arg(long)]
    fit_seed: Option<u64>,
    #[arg(long, value_parser = parse_kebab::<Symmetry>)]
    symmetry: Option<Symmetry>,

    /// Gibbs rows to draw from the learned model.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    gibbs_seed: Option<u64>,

    /// Pauli string to estimate (repeatable).
    #[arg(long = "observable")]
    observables: Vec<String>,
    #[arg(long, value_enum)]
    fidelity: Option<FidelityTarget>,
    /// Sites of a reduced state, e.g. `0,1` (repeatable).
    #[arg(long, value_parser = parse_sites)]
    reduced: Vec<Vec<usize>>,
    #[arg(long)]
    tvd: bool,
    #[arg(long)]
    orders: bool,
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_sites(s: &str) -> Result<Vec<usize>, String> {
    s.split(',').map(|t| t.trim().parse().map_err(|_| format!("invalid site {t:?}"))).collect()
}

impl Opts {
    fn config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(kind) = &self.povm {
            cfg.povm.kind = kind.clone();
        }
        if self.povm_seed.is_some() {
            cfg.povm.seed = self.povm_seed;
        }
        if let Some(b) = self.beta {
            match &mut cfg.state {
                Some(StateSpec::Thermal { beta, .. }) => *beta = b,
                _ => return Err(CliError::Config("--beta needs a thermal [state] section".into())),
            }
        }
        if let Some(m) = self.m {
            cfg.sampling.m = Some(m);
            cfg.sampling.file = None;
        }
        if let Some(path) = &self.samples {
            cfg.sampling.file = Some(path.clone());
            cfg.sampling.m = None;
        }
        set(&mut cfg.sampling.seed, self.seed);

        let fit = &mut cfg.fit;
        set(&mut fit.family, self.family);
        set(&mut fit.max_order, self.max_order);
        set(&mut fit.depth, self.depth);
        set(&mut fit.width, self.width);
        if self.optimizer.is_some() {
            fit.optimizer = self.optimizer;
        }
        set(&mut fit.learning_rate, self.learning_rate);
        set(&mut fit.max_epochs, self.max_epochs);
        set(&mut fit.tol, self.tol);
        if self.l1_radius.is_some() {
            fit.l1_radius = self.l1_radius;
        }
        set(&mut fit.validation_fraction, self.validation_fraction);
        fit.spin_flip |= self.spin_flip;
        set(&mut fit.seed, self.fit_seed);
        set(&mut cfg.symmetry, self.symmetry);

        let g = &mut cfg.gibbs;
        set(&mut g.draws, self.draws);
        set(&mut g.chains, self.chains);
        if self.burn_in.is_some() {
            g.burn_in = self.burn_in;
        }
        if self.thin.is_some() {
            g.thin = self.thin;
        }
        set(&mut g.seed, self.gibbs_seed);

        let est = &mut cfg.estimate;
        if !self.observables.is_empty() {
            est.observables = self.observables.clone();
        }
        if self.fidelity.is_some() {
            est.fidelity = self.fidelity;
        }
        if !self.reduced.is_empty() {
            est.reduced = self.reduced.clone();
        }
        est.tvd |= self.tvd;
        est.orders |= self.orders;
        Ok(cfg)
    }

    fn model(&self) -> Result<&PathBuf, CliError> {
        self.model.as_ref().ok_or_else(|| CliError::Config("--model is required for this command".into()))
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("QEBM_THREADS") else { return Ok(()) };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Config(format!("QEBM_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("QEBM_THREADS: {e}")))
}

fn dispatch(command: &Command) -> Result<Vec<PathBuf>, CliError> {
    configure_threads()?;
    let (opts, run): (&Opts, fn(&Opts, &Context) -> Result<Vec<PathBuf>, CliError>) = match command {
        Command::State(o) => (o, |_, c| pipeline::state(c)),
        Command::Sample(o) => (o, |_, c| pipeline::sample(c)),
        Command::Learn(o) => (o, |_, c| pipeline::learn(c)),
        Command::Gibbs(o) => (o, |o, c| pipeline::gibbs(c, o.model()?)),
        Command::Orders(o) => (o, |o, c| pipeline::orders(c, o.model()?)),
        Command::Estimate(o) => (o, |_, c| {
            let want = Requests { fidelity: false, tvd: false, ..Requests::ALL };
            pipeline::estimate(c, want, "estimates.jsonl")
        }),
        Command::Fidelity(o) => (o, |_, c| {
            if c.cfg.estimate.fidelity.is_none() {
                return Err(CliError::Config("estimate.fidelity: set a target (--fidelity)".into()));
            }
            let want = Requests { observables: false, fidelity: true, reduced: false, tvd: false };
            pipeline::estimate(c, want, "fidelity.jsonl")
        }),
        Command::Tvd(o) => (o, |_, c| {
            let want = Requests { observables: false, fidelity: false, reduced: false, tvd: true };
            pipeline::estimate(c, want, "tvd.jsonl")
        }),
        Command::Run(o) => (o, |_, c| pipeline::run(c)),
    };
    let mut cfg = opts.config()?;
    if matches!(command, Command::Tvd(_)) {
        cfg.estimate.tvd = true;
    }
    let ctx = Context::new(cfg)?;
    run(opts, &ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qebm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
