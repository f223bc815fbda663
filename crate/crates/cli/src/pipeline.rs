use std::path::Path;

use qebm::ebm::{gibbs_sample, EnergyModel};
use qebm::estimate::{
    estimate_fidelity, estimate_observable, estimate_reduced_state, format_order_strength, order_strength,
    trace_distance, tvd_with_floor, ObservableSpec, SPAN_TOL,
};
use qebm::families::Family;
use qebm::povm::{build_povm, dual_operators, outcome_distribution, sample_state, DualSet, Povm, SampleSet, DEFAULT_TABLE_CAP};
use qebm::qsim::{ghz_family, pauli_expectation_exact, GhzVariant, QuantumState};
use qebm::screen::{fit_model, FitData, FitReport};
use serde::Serialize;
use serde_json::{json, Value};

use crate::artifacts::{staged, ArtifactSet, Provenance, Seeds};
use crate::config::{FidelityTarget, PipelineConfig, Stage};
use crate::error::CliError;

pub struct Context {
    pub cfg: PipelineConfig,
    pub provenance: Provenance,
    pub povm: Povm,
    pub duals: DualSet,
}

impl Context {
    pub fn new(cfg: PipelineConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let povm = build_povm(cfg.povm.kind()?);
        let duals = dual_operators(&povm)?;
        let provenance = Provenance {
            config_hash: cfg.hash(),
            seeds: Seeds {
                sampling: cfg.sampling.seed,
                fit: cfg.fit.seed,
                gibbs: cfg.gibbs.seed,
                povm: cfg.povm.seed,
            },
            version: env!("CARGO_PKG_VERSION"),
        };
        Ok(Context { cfg, provenance, povm, duals })
    }

    fn artifacts(&self) -> Result<ArtifactSet, CliError> {
        ArtifactSet::new(&self.cfg.output)
    }

    fn stages(&self) -> Result<Vec<Stage>, CliError> {
        self.cfg.require_state()?.stages()
    }

    /// States to run on: the configured stages, or a single state-less stage
    /// when samples come from a file.
    fn sample_stages(&self) -> Result<Vec<Option<Stage>>, CliError> {
        self.cfg.require_sample_source()?;
        if self.cfg.sampling.file.is_some() {
            let stage = match &self.cfg.state {
                Some(spec) => {
                    let mut stages = spec.stages()?;
                    if stages.len() != 1 {
                        return Err(CliError::Config(
                            "sampling.file: an external sample file needs a single-state [state] section".into(),
                        ));
                    }
                    stages.pop()
                }
                None => None,
            };
            Ok(vec![stage])
        } else {
            Ok(self.stages()?.into_iter().map(Some).collect())
        }
    }

    /// External samples are checked against the POVM and the state.
    fn samples_for(&self, stage: Option<&Stage>) -> Result<SampleSet, CliError> {
        if let Some(path) = &self.cfg.sampling.file {
            let s = SampleSet::load(path)?;
            if s.q != self.povm.q() {
                return Err(CliError::Config(format!(
                    "field `q`: sample file {} has q={} but povm.kind {} has {} outcomes",
                    path.display(),
                    s.q,
                    self.povm.kind,
                    self.povm.q()
                )));
            }
            if let Some(stage) = stage {
                if s.n != stage.state.n() {
                    return Err(CliError::Config(format!(
                        "field `n`: sample file {} has n={} but the state has {} qubits",
                        path.display(),
                        s.n,
                        stage.state.n()
                    )));
                }
            }
            return Ok(s);
        }
        let stage = stage.expect("generated samples come from a state");
        let m = self.cfg.sampling.m.expect("sample source checked");
        let mut s = sample_state(&stage.state, &self.povm, m, self.cfg.sampling.seed, DEFAULT_TABLE_CAP)?;
        s.provenance = self.provenance.line();
        Ok(s)
    }

    /// Span and completeness problems surface before any work is done.
    fn check_requests(&self, n: usize, want: Requests) -> Result<(), CliError> {
        let est = &self.cfg.estimate;
        let observables: &[String] = if want.observables { &est.observables } else { &[] };
        for label in observables {
            let obs = ObservableSpec::Pauli(label.clone());
            let factors = obs.factors(n).map_err(|e| CliError::Config(format!("estimate.observables: {e}")))?;
            for (i, f) in factors.iter().enumerate() {
                if let Some(o) = f {
                    let r = self.duals.span_residual(o);
                    if r > SPAN_TOL {
                        return Err(qebm::Error::Span(format!(
                            "{label}: factor on site {i} is outside the span of povm {} (residual {r:.3e})",
                            self.povm.kind
                        ))
                        .into());
                    }
                }
            }
        }
        let needs_ic = (want.fidelity && est.fidelity.is_some()) || (want.reduced && !est.reduced.is_empty());
        if needs_ic && !self.duals.informationally_complete {
            return Err(qebm::Error::NotInformationallyComplete(format!(
                "fidelity and reduced-state estimates need an informationally complete POVM, povm {} is not",
                self.povm.kind
            ))
            .into());
        }
        if let Some(bad) = est.reduced.iter().flatten().find(|&&s| s >= n) {
            return Err(CliError::Config(format!("estimate.reduced: site {bad} is out of range for n={n}")));
        }
        Ok(())
    }

    fn stamp(&self, mut v: Value) -> Value {
        v["provenance"] = serde_json::to_value(&self.provenance).expect("provenance serializes");
        v
    }

    fn model_json(&self, model: &EnergyModel) -> String {
        serde_json::to_string_pretty(&self.stamp(model.to_json())).expect("model serializes") + "\n"
    }

    fn report_lines(&self, label: &str, report: &FitReport) -> String {
        report
            .spins
            .iter()
            .map(|s| {
                let mut v = serde_json::to_value(s).expect("report serializes");
                if !label.is_empty() {
                    v["stage"] = json!(label);
                }
                v["symmetry"] = json!(report.symmetry);
                self.stamp(v).to_string() + "\n"
            })
            .collect()
    }

    fn samples_text(&self, s: &SampleSet) -> Result<Vec<u8>, CliError> {
        let mut buf = Vec::new();
        s.write_to(&mut buf)?;
        Ok(buf)
    }
}

/// One estimate line.
#[derive(Serialize)]
struct Record<'a> {
    #[serde(skip_serializing_if = "str::is_empty")]
    stage: &'a str,
    source: &'a str,
    observable: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stderr: Option<f64>,
    #[serde(rename = "N")]
    count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    floor: Option<f64>,
    /// Entries `[re, im]` of an estimated density matrix, row-major.
    #[serde(skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<[f64; 2]>>,
    provenance: &'a Provenance,
}

#[derive(Clone, Copy, PartialEq)]
pub struct Requests {
    pub observables: bool,
    pub fidelity: bool,
    pub reduced: bool,
    pub tvd: bool,
}

impl Requests {
    pub const ALL: Requests = Requests { observables: true, fidelity: true, reduced: true, tvd: true };
}

fn estimate_lines(
    ctx: &Context,
    label: &str,
    state: Option<&QuantumState>,
    samples: &SampleSet,
    source: &str,
    want: Requests,
) -> Result<String, CliError> {
    let est = &ctx.cfg.estimate;
    let n = samples.n;
    let mut out = String::new();
    let mut push = |r: Record| out.push_str(&(serde_json::to_string(&r).expect("record serializes") + "\n"));
    let record = |observable: String, mean: Option<f64>| Record {
        stage: label,
        source,
        observable,
        mean,
        stderr: None,
        count: samples.m(),
        exact: None,
        floor: None,
        matrix: None,
        provenance: &ctx.provenance,
    };

    if want.observables {
        for label in &est.observables {
            let r = estimate_observable(samples, &ctx.duals, &ObservableSpec::Pauli(label.clone()))?;
            let exact = state.map(|s| pauli_expectation_exact(s, label)).transpose()?;
            push(Record { stderr: Some(r.stderr), exact, ..record(label.clone(), Some(r.mean)) });
        }
    }
    if want.fidelity {
        if let Some(target) = est.fidelity {
            let psi = match (target, state) {
                (FidelityTarget::GhzPlus, _) | (FidelityTarget::GhzMinus, _) => {
                    let variant = if target == FidelityTarget::GhzPlus { GhzVariant::Plus } else { GhzVariant::Minus };
                    match ghz_family(n, variant)? {
                        QuantumState::Pure(p) => p,
                        QuantumState::Mixed(_) => unreachable!("GHZ+- are pure"),
                    }
                }
                (FidelityTarget::State, Some(QuantumState::Pure(p))) => p.clone(),
                (FidelityTarget::State, _) => {
                    return Err(CliError::Config(
                        "estimate.fidelity: target `state` needs a pure configured state".into(),
                    ))
                }
            };
            let r = estimate_fidelity(samples, &ctx.duals, &psi)?;
            let name = serde_json::to_value(target).expect("target serializes");
            push(Record {
                stderr: Some(r.stderr),
                ..record(format!("fidelity[{}]", name.as_str().unwrap_or_default()), Some(r.mean))
            });
        }
    }
    if want.reduced {
        for sites in &est.reduced {
            let rho = estimate_reduced_state(samples, &ctx.duals, sites)?;
            match state {
                Some(s) => {
                    let d = trace_distance(&rho, &s.reduced(sites)?)?;
                    push(record(format!("trace-distance{sites:?}"), Some(d)));
                }
                None => {
                    // column-major storage, transposed to row-major
                    let entries = rho.transpose().iter().map(|z| [z.re, z.im]).collect();
                    push(Record { matrix: Some(entries), ..record(format!("reduced{sites:?}"), None) });
                }
            }
        }
    }
    if want.tvd && est.tvd {
        let state = state.ok_or_else(|| CliError::Config("estimate.tvd: needs a [state] section".into()))?;
        let table = outcome_distribution(state, &ctx.povm, DEFAULT_TABLE_CAP)?;
        let (t, floor) = tvd_with_floor(samples, &table, ctx.cfg.sampling.seed.wrapping_add(1))?;
        push(Record { floor: Some(floor), ..record("tvd".into(), Some(t)) });
    }
    Ok(out)
}

fn orders_text(ctx: &Context, model: &EnergyModel) -> Result<Option<String>, CliError> {
    if !model.blocks().iter().all(|b| matches!(b.family, Family::Poly(_))) {
        return Ok(None);
    }
    let strengths = order_strength(model)?;
    Ok(Some(format!("# {}\n{}", ctx.provenance.line(), format_order_strength(&strengths))))
}

pub fn state(ctx: &Context) -> Result<Vec<std::path::PathBuf>, CliError> {
    let stages = ctx.stages()?;
    let mut docs = Vec::new();
    for stage in &stages {
        let exact = ctx
            .cfg
            .estimate
            .observables
            .iter()
            .map(|o| Ok(json!({"observable": o, "value": pauli_expectation_exact(&stage.state, o)?})))
            .collect::<Result<Vec<_>, qebm::Error>>()?;
        let kind = match stage.state {
            QuantumState::Pure(_) => "pure",
            QuantumState::Mixed(_) => "mixed",
        };
        docs.push(json!({"stage": stage.label, "n": stage.state.n(), "kind": kind, "exact": exact}));
    }
    let doc = ctx.stamp(json!({ "states": docs }));
    let mut art = ctx.artifacts()?;
    art.write("state.json", (serde_json::to_string_pretty(&doc).expect("serializes") + "\n").as_bytes())?;
    Ok(art.commit())
}

pub fn sample(ctx: &Context) -> Result<Vec<std::path::PathBuf>, CliError> {
    if ctx.cfg.sampling.file.is_some() {
        return Err(CliError::Config("sampling.file: `sample` draws from a state, set sampling.m instead".into()));
    }
    ctx.cfg.require_sample_source()?;
    let stages = ctx.stages()?;
    let mut art = ctx.artifacts()?;
    for stage in &stages {
        let s = ctx.samples_for(Some(stage))?;
        art.write(&staged("samples", &stage.label, "txt"), &ctx.samples_text(&s)?)?;
    }
    Ok(art.commit())
}

pub fn learn(ctx: &Context) -> Result<Vec<std::path::PathBuf>, CliError> {
    let stages = ctx.sample_stages()?;
    let mut art = ctx.artifacts()?;
    for stage in &stages {
        let label = stage.as_ref().map_or("", |s| s.label.as_str());
        let s = ctx.samples_for(stage.as_ref())?;
        if ctx.cfg.sampling.file.is_none() {
            art.write(&staged("samples", label, "txt"), &ctx.samples_text(&s)?)?;
        }
        let (model, report) = fit_model(FitData::Samples(&s), &ctx.cfg.fit, ctx.cfg.symmetry)?;
        art.write(&staged("model", label, "json"), ctx.model_json(&model).as_bytes())?;
        art.write(&staged("fit", label, "jsonl"), ctx.report_lines(label, &report).as_bytes())?;
    }
    Ok(art.commit())
}

pub fn gibbs(ctx: &Context, model_path: &Path) -> Result<Vec<std::path::PathBuf>, CliError> {
    if ctx.cfg.gibbs.draws == 0 {
        return Err(CliError::Config("gibbs.draws must be positive".into()));
    }
    let model = EnergyModel::load(model_path)?;
    let mut draws = gibbs_sample(&model, &ctx.cfg.gibbs.config())?;
    draws.provenance = ctx.provenance.line();
    let mut art = ctx.artifacts()?;
    art.write("gibbs.txt", &ctx.samples_text(&draws)?)?;
    Ok(art.commit())
}

pub fn orders(ctx: &Context, model_path: &Path) -> Result<Vec<std::path::PathBuf>, CliError> {
    let model = EnergyModel::load(model_path)?;
    let text = orders_text(ctx, &model)?
        .ok_or_else(|| CliError::Config("model: order strengths need a polynomial model".into()))?;
    let mut art = ctx.artifacts()?;
    art.write("orders.txt", text.as_bytes())?;
    Ok(art.commit())
}

/// Estimates straight from the measurement data.
pub fn estimate(ctx: &Context, want: Requests, file: &str) -> Result<Vec<std::path::PathBuf>, CliError> {
    let stages = ctx.sample_stages()?;
    let n = match (&ctx.cfg.state, &ctx.cfg.sampling.file) {
        (Some(spec), _) => spec.n(),
        (None, Some(path)) => SampleSet::load(path)?.n,
        (None, None) => unreachable!("sample source checked"),
    };
    ctx.check_requests(n, want)?;
    let mut lines = String::new();
    for stage in &stages {
        let label = stage.as_ref().map_or("", |s| s.label.as_str());
        let s = ctx.samples_for(stage.as_ref())?;
        lines.push_str(&estimate_lines(ctx, label, stage.as_ref().map(|s| &s.state), &s, "data", want)?);
    }
    let mut art = ctx.artifacts()?;
    art.write(file, lines.as_bytes())?;
    Ok(art.commit())
}

/// Full pipeline: samples, fit, Gibbs draws, estimates and order strengths.
pub fn run(ctx: &Context) -> Result<Vec<std::path::PathBuf>, CliError> {
    let stages = ctx.sample_stages()?;
    let n = match (&ctx.cfg.state, &ctx.cfg.sampling.file) {
        (Some(spec), _) => spec.n(),
        (None, Some(path)) => SampleSet::load(path)?.n,
        (None, None) => unreachable!("sample source checked"),
    };
    ctx.check_requests(n, Requests::ALL)?;
    let mut art = ctx.artifacts()?;
    let config_doc = ctx.stamp(serde_json::to_value(&ctx.cfg).expect("config serializes"));
    art.write("provenance.json", (serde_json::to_string_pretty(&config_doc).expect("serializes") + "\n").as_bytes())?;
    let mut estimates = String::new();
    for stage in &stages {
        let label = stage.as_ref().map_or("", |s| s.label.as_str());
        let state = stage.as_ref().map(|s| &s.state);
        let s = ctx.samples_for(stage.as_ref())?;
        if ctx.cfg.sampling.file.is_none() {
            art.write(&staged("samples", label, "txt"), &ctx.samples_text(&s)?)?;
        }
        let (model, report) = fit_model(FitData::Samples(&s), &ctx.cfg.fit, ctx.cfg.symmetry)?;
        art.write(&staged("model", label, "json"), ctx.model_json(&model).as_bytes())?;
        art.write(&staged("fit", label, "jsonl"), ctx.report_lines(label, &report).as_bytes())?;
        if ctx.cfg.estimate.orders {
            if let Some(text) = orders_text(ctx, &model)? {
                art.write(&staged("orders", label, "txt"), text.as_bytes())?;
            }
        }
        if ctx.cfg.gibbs.draws > 0 {
            let mut draws = gibbs_sample(&model, &ctx.cfg.gibbs.config())?;
            draws.provenance = ctx.provenance.line();
            art.write(&staged("gibbs", label, "txt"), &ctx.samples_text(&draws)?)?;
            estimates.push_str(&estimate_lines(ctx, label, state, &draws, "model", Requests::ALL)?);
        } else {
            estimates.push_str(&estimate_lines(ctx, label, state, &s, "data", Requests::ALL)?);
        }
    }
    art.write("estimates.jsonl", estimates.as_bytes())?;
    Ok(art.commit())
}
