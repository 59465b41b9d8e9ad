use thiserror::Error;
use umbrella_core::environment::EnvError;
use umbrella_core::field::FieldError;
use umbrella_core::forest::ForestError;
use umbrella_core::lattice::LatticeError;
use umbrella_core::mixing::MixingError;
use umbrella_core::oracle::OracleError;
use umbrella_core::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{artifact} not found in the output directory; run `umbrella {command}` first")]
    MissingStage { artifact: String, command: &'static str },
    #[error("checksum mismatch for {artifact}: manifest {expected}, file {found}")]
    Checksum { artifact: String, expected: String, found: String },
    #[error("output directory holds artifacts of config {found}, current config is {expected}; use a fresh --out")]
    ConfigMismatch { expected: String, found: String },
    #[error("{0}")]
    Inconsistent(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Mixing(#[from] MixingError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Report(#[from] umbrella_core::report::ReportError),
    #[error(transparent)]
    Stats(#[from] umbrella_core::stats::StatsError),
}

fn lattice_budget(e: &LatticeError) -> bool {
    matches!(e, LatticeError::Capacity { .. })
}

fn field_budget(e: &FieldError) -> bool {
    matches!(e, FieldError::Lattice(l) if lattice_budget(l))
}

fn forest_budget(e: &ForestError) -> bool {
    match e {
        ForestError::Lattice(l) => lattice_budget(l),
        ForestError::Field(f) => field_budget(f),
        _ => false,
    }
}

fn pipeline_budget(e: &PipelineError) -> bool {
    match e {
        PipelineError::Lattice(l) => lattice_budget(l),
        PipelineError::Field(f) => field_budget(f),
        PipelineError::Forest(f) => forest_budget(f),
        PipelineError::Env(EnvError::StateBudget { .. }) => true,
        _ => false,
    }
}

impl CliError {
    /// 1 computation or invariant failure, 2 usage/config/input error, 3 resource budget.
    pub fn exit_code(&self) -> u8 {
        let budget = match self {
            CliError::Lattice(e) => lattice_budget(e),
            CliError::Field(e) => field_budget(e),
            CliError::Forest(e) => forest_budget(e),
            CliError::Pipeline(e) => pipeline_budget(e),
            CliError::Mixing(MixingError::Pipeline(e)) => pipeline_budget(e),
            _ => false,
        };
        if budget {
            return 3;
        }
        match self {
            CliError::Config(_) | CliError::MissingStage { .. } | CliError::Checksum { .. } | CliError::ConfigMismatch { .. } | CliError::Io(_) | CliError::Json(_) => 2,
            CliError::Mixing(MixingError::ShiftTooLarge { .. }) => 2,
            _ => 1,
        }
    }
}
