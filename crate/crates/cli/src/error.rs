use xplain_core::dataset::DatasetError;
use xplain_core::evalbench::EvalError;
use xplain_core::explain::ExplainError;
use xplain_core::gateway::GatewayError;
use xplain_core::imaging::ImagingError;
use xplain_core::nnet::NnetError;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;
pub const EXIT_NO_GRADIENTS: u8 = 5;

pub const GRADIENT_REMEDIATION: &str =
    "Grad-CAM needs layer activations and gradients, which only a native \
     checkpoint provides; pass --model native:<checkpoint> or choose --method lime or shap";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    pub fn no_gradients() -> Self {
        Self {
            code: EXIT_NO_GRADIENTS,
            message: format!("gradients unavailable for a remote model. {GRADIENT_REMEDIATION}"),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(format!("I/O error: {e}"))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidBatchSize => CliError::config(e.to_string()),
            DatasetError::Io(_) => CliError::runtime(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<ImagingError> for CliError {
    fn from(e: ImagingError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<NnetError> for CliError {
    fn from(e: NnetError) -> Self {
        match e {
            NnetError::InvalidSpec(_)
            | NnetError::UnknownVersion(_)
            | NnetError::UnknownLayerName(_) => CliError::config(e.to_string()),
            NnetError::Data(_) | NnetError::Checkpoint(_) => CliError::data(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::GradientsUnavailable => CliError::no_gradients(),
            GatewayError::Config(_) => CliError::config(e.to_string()),
            GatewayError::Nnet(n) => n.into(),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => CliError::config(e.to_string()),
            EvalError::Data(_) | EvalError::EmptyMatrix => CliError::data(e.to_string()),
            EvalError::Dataset(d) => d.into(),
            EvalError::Imaging(i) => i.into(),
            EvalError::Nnet(n) => n.into(),
            EvalError::Gateway(g) => g.into(),
            EvalError::Io(io) => io.into(),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::GradientsUnavailable => CliError::no_gradients(),
            ExplainError::UnknownLayerName(_)
            | ExplainError::InvalidConfig(_)
            | ExplainError::TooManyFeatures { .. }
            | ExplainError::StyleMismatch { .. } => CliError::config(e.to_string()),
            ExplainError::Gateway(g) => g.into(),
            ExplainError::Nnet(n) => n.into(),
            ExplainError::Imaging(i) => i.into(),
            ExplainError::Io(io) => io.into(),
            ExplainError::DegenerateDesign(_) => CliError::runtime(e.to_string()),
        }
    }
}
