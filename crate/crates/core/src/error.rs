use thiserror::Error;

use crate::extract::PipelineFunction;
use crate::graph::EntityKey;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("dialogue {dialogue_id}: {detail}")]
    TurnPairing { dialogue_id: String, detail: String },
    #[error("dataset contains no dialogues")]
    Empty,
    #[error("duplicate dialogue id {0}")]
    DuplicateDialogue(String),
    #[error("unknown dataset format {0:?} (expected coqa or generic)")]
    UnknownFormat(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown perturbation kind {0:?}")]
    UnknownPerturbation(String),
    #[error("ratio {0} must lie strictly between 0 and 1")]
    Ratio(f64),
    #[error("unknown mock profile {0:?}")]
    UnknownProfile(String),
    #[error("unknown history policy {0:?}")]
    UnknownHistoryPolicy(String),
    #[error("template {template}: placeholder {{{placeholder}}} is not bound")]
    UnboundPlaceholder { template: String, placeholder: String },
    #[error("template {template}: unbalanced brace at byte {offset}")]
    TemplateSyntax { template: String, offset: usize },
    #[error("missing template for {0}")]
    MissingTemplate(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("relation endpoint {0} is not an entity of the graph")]
    DanglingEndpoint(EntityKey),
    #[error("entity name is empty")]
    EmptyName,
}

/// Failure talking to a chat, embedding or coreference endpoint.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("http: {0}")]
    Http(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no mock response for {function} request")]
    NoFixture { function: String },
}

impl From<reqwest::Error> for TransportError {
    fn from(e: reqwest::Error) -> Self {
        TransportError::Http(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("{function}: {source}")]
    Transport {
        function: PipelineFunction,
        #[source]
        source: TransportError,
    },
    /// Output failed validation after the repair retry.
    #[error("{function}: extraction misaligned: {detail}")]
    Misaligned { function: PipelineFunction, detail: String },
    #[error("{function}: {detail}")]
    Precondition { function: PipelineFunction, detail: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("dialogue {dialogue_id}: no verdict for round {new_index}")]
    MissingVerdict { dialogue_id: String, new_index: usize },
    #[error("dialogue {dialogue_id}: origin round {origin_index} does not exist")]
    UnknownOrigin { dialogue_id: String, origin_index: usize },
    #[error("no extraction analysis for dialogue {0}")]
    MissingAnalysis(String),
}

#[derive(Debug, Error)]
pub enum SutError {
    #[error("mock profile oracle needs the expected answer")]
    OracleWithoutExpected,
    #[error("round {new_index}: {source}")]
    Transport {
        new_index: usize,
        #[source]
        source: TransportError,
    },
}
