use std::path::{Path, PathBuf};

use qebm::ebm::{GibbsConfig, Symmetry};
use qebm::povm::{parse_povm_kind, PovmKind};
use qebm::qsim::{ghz_family, GhzVariant, HamiltonianSpec, QuantumState};
use qebm::screen::FitConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Everything a pipeline run needs. Missing sections take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub state: Option<StateSpec>,
    pub povm: PovmSpec,
    pub sampling: SamplingSpec,
    pub fit: FitConfig,
    pub symmetry: Symmetry,
    pub gibbs: GibbsSpec,
    pub estimate: EstimateSpec,
    /// Output directory; not part of the config hash.
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            state: None,
            povm: PovmSpec::default(),
            sampling: SamplingSpec::default(),
            fit: FitConfig::default(),
            symmetry: Symmetry::None,
            gibbs: GibbsSpec::default(),
            estimate: EstimateSpec::default(),
            output: PathBuf::from("qebm-out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateSpec {
    Thermal { hamiltonian: HamiltonianInput, beta: f64 },
    Ground {
        hamiltonian: HamiltonianInput,
        #[serde(default = "default_degeneracy_tol")]
        degeneracy_tol: f64,
    },
    /// GHZ+ (or GHZ- with `minus`); a non-empty `mixtures` list runs one
    /// stage per weight `p` of `(1-p) GHZ+ + p GHZ-`.
    Ghz {
        n: usize,
        #[serde(default)]
        minus: bool,
        #[serde(default)]
        mixtures: Vec<f64>,
    },
}

fn default_degeneracy_tol() -> f64 {
    1e-9
}

/// A uniform TIM chain or a full Hamiltonian document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HamiltonianInput {
    Chain { chain: ChainSpec },
    Full(HamiltonianSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub n: usize,
    pub j: f64,
    pub g: f64,
    #[serde(default)]
    pub periodic: bool,
}

impl HamiltonianInput {
    pub fn spec(&self) -> HamiltonianSpec {
        match self {
            HamiltonianInput::Chain { chain } => HamiltonianSpec::tim_chain(chain.n, chain.j, chain.g, chain.periodic),
            HamiltonianInput::Full(spec) => spec.clone(),
        }
    }
}

/// One quantum state to run the pipeline on.
pub struct Stage {
    /// Empty for a single-state run, otherwise a file-name-safe tag.
    pub label: String,
    pub state: QuantumState,
}

impl StateSpec {
    pub fn n(&self) -> usize {
        match self {
            StateSpec::Thermal { hamiltonian, .. } | StateSpec::Ground { hamiltonian, .. } => hamiltonian.spec().n,
            StateSpec::Ghz { n, .. } => *n,
        }
    }

    pub fn stages(&self) -> Result<Vec<Stage>, CliError> {
        use qebm::qsim::{build_hamiltonian, ground_state, thermal_state};
        let single = |state| Ok(vec![Stage { label: String::new(), state }]);
        match self {
            StateSpec::Thermal { hamiltonian, beta } => {
                let h = build_hamiltonian(&hamiltonian.spec())?;
                single(QuantumState::Mixed(thermal_state(&h, *beta)?))
            }
            StateSpec::Ground { hamiltonian, degeneracy_tol } => {
                let h = build_hamiltonian(&hamiltonian.spec())?;
                single(QuantumState::Pure(ground_state(&h, *degeneracy_tol)?))
            }
            StateSpec::Ghz { n, minus, mixtures } if mixtures.is_empty() => {
                single(ghz_family(*n, if *minus { GhzVariant::Minus } else { GhzVariant::Plus })?)
            }
            StateSpec::Ghz { n, mixtures, .. } => mixtures
                .iter()
                .map(|&p| Ok(Stage { label: format!("p{p}"), state: ghz_family(*n, GhzVariant::Mixture(p))? }))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PovmSpec {
    pub kind: String,
    /// Rotation seed for `rotated-tetrahedral`.
    pub seed: Option<u64>,
}

impl Default for PovmSpec {
    fn default() -> Self {
        PovmSpec { kind: "tetrahedral".into(), seed: None }
    }
}

impl PovmSpec {
    pub fn kind(&self) -> Result<PovmKind, CliError> {
        parse_povm_kind(&self.kind, self.seed).map_err(|e| CliError::Config(format!("povm.kind: {e}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSpec {
    /// Number of measurement rows drawn from the state.
    pub m: Option<usize>,
    pub seed: u64,
    /// Externally generated samples in the text sample format.
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsSpec {
    /// Rows drawn from the learned model; 0 skips Gibbs sampling and
    /// estimates from the measurement data instead.
    pub draws: usize,
    pub chains: usize,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub seed: u64,
}

impl Default for GibbsSpec {
    fn default() -> Self {
        GibbsSpec { draws: 0, chains: 4, burn_in: None, thin: None, seed: 0 }
    }
}

impl GibbsSpec {
    pub fn config(&self) -> GibbsConfig {
        GibbsConfig {
            chains: self.chains,
            burn_in: self.burn_in,
            thin: self.thin,
            total: self.draws,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FidelityTarget {
    GhzPlus,
    GhzMinus,
    /// The configured state itself (must be pure).
    State,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSpec {
    /// Pauli strings, letter k acting on qubit k.
    pub observables: Vec<String>,
    pub fidelity: Option<FidelityTarget>,
    /// One- and two-site reduced states, compared with the exact state.
    pub reduced: Vec<Vec<usize>>,
    /// TVD of the estimate source against the exact outcome table.
    pub tvd: bool,
    /// Order strengths of a polynomial model.
    pub orders: bool,
}

impl PipelineConfig {
    /// Parse TOML or JSON, chosen by extension (`.json` is JSON, anything
    /// else is TOML).
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed = if is_json {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Hex SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let canonical = PipelineConfig { output: PathBuf::new(), ..self.clone() };
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.povm.kind()?;
        self.fit.validate().map_err(|e| CliError::Config(format!("fit: {e}")))?;
        if self.sampling.m == Some(0) {
            return Err(CliError::Config("sampling.m must be positive".into()));
        }
        if self.gibbs.chains == 0 {
            return Err(CliError::Config("gibbs.chains must be positive".into()));
        }
        if let Some(StateSpec::Ghz { mixtures, .. }) = &self.state {
            if let Some(p) = mixtures.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(CliError::Config(format!("state.mixtures: weight {p} is outside [0, 1]")));
            }
        }
        if let Some(bad) = self.estimate.reduced.iter().find(|s| s.is_empty() || s.len() > 2) {
            return Err(CliError::Config(format!("estimate.reduced: {bad:?} must list one or two sites")));
        }
        Ok(())
    }

    /// Exactly one sample source must be configured.
    pub fn require_sample_source(&self) -> Result<(), CliError> {
        match (&self.sampling.file, self.sampling.m, &self.state) {
            (Some(_), Some(_), _) => Err(CliError::Config(
                "sampling: give either sampling.file or sampling.m, not both".into(),
            )),
            (Some(_), None, _) => Ok(()),
            (None, Some(_), Some(_)) => Ok(()),
            (None, Some(_), None) => Err(CliError::Config("sampling.m needs a [state] section".into())),
            (None, None, _) => Err(CliError::Config("sampling: set sampling.m or sampling.file".into())),
        }
    }

    pub fn require_state(&self) -> Result<&StateSpec, CliError> {
        self.state
            .as_ref()
            .ok_or_else(|| CliError::Config("state: this command needs a [state] section".into()))
    }
}
