//! Choice prediction: the prompted language-model path with chain-of-thought
//! sub-questions, and from-scratch tree ensembles as baselines.

mod mock;
mod prompt;
mod runner;
pub mod trees;

pub use mock::MockBackend;
pub use prompt::{build_prompt, PromptBundle, PromptCase, PromptError, PromptTemplate};
pub use runner::{parse_reply, predict_llm, run_llm_predictor, BatchError, LlmRunOutput, RunParams};
pub use trees::{
    fit_tree_ensemble, predict_with_model, EnsembleParams, ForestParams, GbtParams, MajorityClassifier, ModelKind,
    TrainError, TreeEnsembleModel,
};

use serde::{Deserialize, Serialize};

use crate::choice::{ChoiceLabel, RecordKey};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub card_id: String,
    pub event_id: u32,
    /// `None` marks an unresolved prediction.
    pub label: Option<ChoiceLabel>,
    pub backend: String,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub retry_count: u32,
}

impl Prediction {
    pub fn key(&self) -> RecordKey {
        (self.card_id.clone(), self.event_id)
    }

    pub fn is_resolved(&self) -> bool {
        self.label.is_some()
    }

    pub fn unresolved(key: &RecordKey, backend: &str, retry_count: u32, why: &str) -> Prediction {
        Prediction {
            card_id: key.0.clone(),
            event_id: key.1,
            label: None,
            backend: backend.to_string(),
            rationale: why.to_string(),
            retry_count,
        }
    }
}
