//! Instrumented GPT-2 inference and vocabulary-space analysis.
//!
//! * [`weights`] loads a checkpoint directory into an immutable [`ModelBundle`].
//! * [`tokenizer`] is a byte-level BPE compatible with the GPT-2 vocabulary.
//! * [`trace`] runs the forward pass and keeps every intermediate vector.
//! * [`lens`] projects vectors to the vocabulary (logit lens, OV, QK).
//! * [`metrics`] computes intersection scores and corpus-level reports.
//! * [`graph`] compiles a trace into a pruned, labelled flow graph.

pub mod corpus;
pub mod dump;
pub mod error;
pub mod graph;
pub mod lens;
pub mod metrics;
pub mod ops;
pub mod tensor;
pub mod tokenizer;
pub mod toy;
pub mod trace;
pub mod weights;

pub use error::{Error, Result};
pub use graph::{build_graph, describe_node, serialize_graph, FlowEdge, FlowGraph, FlowNode, PruneConfig};
pub use lens::{logit_lens, ov_project, qk_project, Lens, LensMode, LensProjection, QkSide};
pub use tokenizer::Tokenizer;
pub use trace::{forward, forward_at, verify_trace, LayerTrace, Trace};
pub use weights::{load_model_bundle, validate_bundle, ModelBundle, ModelConfig};
