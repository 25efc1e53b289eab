//! Request handling shared by the CLI and the HTTP service, so both emit the
//! same bytes for the same inputs.

use std::ops::Range;

use lensflow_core::graph::{build_graph, node_vector, serialize_graph, NodeKind, PruneConfig};
use lensflow_core::{Lens, LensProjection, ModelBundle, Trace};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Clone, PartialEq)]
pub enum RequestError {
    /// Malformed or inconsistent input.
    BadRequest(String),
    /// Well-formed prompt that does not fit the context window.
    TooLong(String),
    Internal(String),
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BadRequest(m) | Self::TooLong(m) | Self::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for RequestError {}

pub type RequestResult<T> = std::result::Result<T, RequestError>;

impl From<lensflow_core::Error> for RequestError {
    fn from(e: lensflow_core::Error) -> Self {
        use lensflow_core::Error as E;
        match e {
            E::InputTooLong { .. } => Self::TooLong(e.to_string()),
            E::EmptyInput | E::TokenOutOfRange { .. } | E::IndexOutOfRange { .. } | E::InvalidArgument(_) => {
                Self::BadRequest(e.to_string())
            }
            other => Self::Internal(other.to_string()),
        }
    }
}

/// Either `"A..B"` / `"A"` or `[A, B]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LayerSpec {
    Text(String),
    Pair([usize; 2]),
}

impl LayerSpec {
    pub fn range(&self) -> RequestResult<Range<usize>> {
        match self {
            Self::Text(s) => parse_layers(s),
            Self::Pair([a, b]) => Ok(*a..*b),
        }
    }
}

pub fn parse_layers(s: &str) -> RequestResult<Range<usize>> {
    let bad = || RequestError::BadRequest(format!("layer range {s:?} is not of the form A..B"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once("..") {
        Some((a, b)) => Ok(num(a)?..num(b)?),
        None => {
            let a = num(s)?;
            Ok(a..a + 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRequest {
    pub prompt: String,
    #[serde(default)]
    pub layers: Option<LayerSpec>,
    #[serde(default)]
    pub target: Option<String>,
    /// Partial prune settings laid over the service defaults.
    #[serde(default)]
    pub prune: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensRequest {
    pub prompt: String,
    pub layer: usize,
    pub node_kind: String,
    #[serde(default)]
    pub indices: Vec<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub naive_qk: bool,
}

fn default_k() -> usize {
    10
}

pub fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> RequestResult<T> {
    serde_json::from_slice(body).map_err(|e| RequestError::BadRequest(format!("malformed request body: {e}")))
}

/// Token ids of a prompt, checked against the context window.
pub fn encode_prompt(bundle: &ModelBundle, prompt: &str) -> RequestResult<Vec<u32>> {
    let ids = bundle.tokenizer().encode(prompt);
    if ids.is_empty() {
        return Err(RequestError::BadRequest("prompt is empty".into()));
    }
    let max = bundle.config().max_positions;
    if ids.len() > max {
        return Err(RequestError::TooLong(format!(
            "prompt has {} tokens but the model supports at most {max}",
            ids.len()
        )));
    }
    Ok(ids)
}

/// A target string must be exactly one token.
pub fn resolve_target(bundle: &ModelBundle, target: &str) -> RequestResult<u32> {
    match bundle.tokenizer().encode(target).as_slice() {
        [id] => Ok(*id),
        [] => Err(RequestError::BadRequest("target is empty".into())),
        ids => Err(RequestError::BadRequest(format!(
            "target {target:?} is {} tokens; it must be a single token",
            ids.len()
        ))),
    }
}

/// Lays the keys of `patch` over `base`; unknown keys are rejected.
pub fn merge_prune(base: &PruneConfig, patch: Option<&Value>) -> RequestResult<PruneConfig> {
    let Some(patch) = patch else {
        return Ok(base.clone());
    };
    let Value::Object(fields) = patch else {
        return Err(RequestError::BadRequest("prune must be an object".into()));
    };
    let mut merged = serde_json::to_value(base).map_err(|e| RequestError::Internal(e.to_string()))?;
    let known = merged.as_object_mut().expect("PruneConfig serializes to an object");
    for (k, v) in fields {
        if !known.contains_key(k) {
            return Err(RequestError::BadRequest(format!("unknown prune field {k:?}")));
        }
        known.insert(k.clone(), v.clone());
    }
    serde_json::from_value(merged).map_err(|e| RequestError::BadRequest(format!("invalid prune settings: {e}")))
}

/// Graph settings resolved from a request before the forward pass runs.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPlan {
    pub ids: Vec<u32>,
    pub prune: PruneConfig,
    pub target: Option<u32>,
}

pub fn plan_graph(bundle: &ModelBundle, req: &GraphRequest, defaults: &PruneConfig) -> RequestResult<GraphPlan> {
    let ids = encode_prompt(bundle, &req.prompt)?;
    let mut prune = merge_prune(defaults, req.prune.as_ref())?;
    if let Some(layers) = &req.layers {
        prune.layer_range = Some(layers.range()?);
    }
    let target = req.target.as_deref().map(|t| resolve_target(bundle, t)).transpose()?;
    Ok(GraphPlan { ids, prune, target })
}

pub fn render_graph(bundle: &ModelBundle, trace: &Trace, plan: &GraphPlan) -> RequestResult<String> {
    let graph = build_graph(trace, bundle, &plan.prune, plan.target)?;
    Ok(serialize_graph(&graph))
}

pub fn lens_projection(bundle: &ModelBundle, trace: &Trace, req: &LensRequest) -> RequestResult<LensProjection> {
    if req.k == 0 {
        return Err(RequestError::BadRequest("k must be positive".into()));
    }
    let kind = NodeKind::parse(&req.node_kind)
        .ok_or_else(|| RequestError::BadRequest(format!("unknown node kind {:?}", req.node_kind)))?;
    let target = req.target.as_deref().map(|t| resolve_target(bundle, t)).transpose()?;
    let vector = node_vector(bundle, trace, req.layer, kind, &req.indices, req.naive_qk)?;
    Ok(Lens::new(bundle).project(&vector, req.k, target)?)
}
