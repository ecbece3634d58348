//! Closed-form concept erasure for text-conditioned diffusion models.
//!
//! The crate edits the cross-attention key/value projections of a U-Net so
//! that erased concepts project like harmless ones, then repeatedly derives
//! the embeddings that still regenerate the erased concept inside the edited
//! model and erases those as well. Every closed form has an iterative oracle
//! in [`oracle`] and a randomized certification suite in [`certify`].

pub mod bounds;
pub mod certify;
pub mod checkpoint;
pub mod derivation;
pub mod driver;
pub mod edit;
pub mod error;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod synthetic;

pub use bounds::{bound_chain, bound_chain_set, BoundReport};
pub use checkpoint::{
    embeddings_file, layers_file, merge_back, model_stats, read_embeddings, read_tensor_file, select_cross_attention,
    write_tensor_file, Dtype, ModelStats, SelectionPattern, TensorFile, TensorInfo,
};
pub use derivation::{derivation_gradient, derivation_objective, derive_embedding, DerivationResult, Deriver};
pub use driver::{
    erasure_residual, fidelity_report, rece_erase, rece_erase_with, EpochReport, EraseOutput, EraseRun, EraseSpec,
    FidelityReport, TaskRecord,
};
pub use edit::{drift, edit_layer_set, project_kv, set_drift, uce_edit, uce_objective, EditCoefficients};
pub use error::{Error, ErrorClass, Result};
pub use model::{AttentionLayerSet, ConceptTask, EditConfig, Embedding, ProjectionKind, ProjectionMatrix, Storage};
pub use oracle::{compare, oracle_derive, oracle_uce_edit, Comparison, OracleOutcome};
