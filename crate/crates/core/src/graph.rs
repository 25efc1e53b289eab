//! Flow graphs: one forward pass as a pruned, labelled node/edge graph.
//!
//! Per layer the graph follows the computation at the analysed position:
//!
//! ```text
//! block_input ─normalize→ attn_ln ─project→ qkv_joint ─split→ head_query_j
//! head_query_j ─attention→ memory_key_ji ─recall→ memory_value_ji
//! memory_value_ji ─weighted_sum→ head_output_j ─concat→ attn_concat
//! attn_concat ─coefficient→ wo_neuron_n ─sum→ attn_out ─sum→ residual_after_attn
//! block_input ─residual→ residual_after_attn ─normalize→ mlp_ln
//! mlp_ln ─coefficient→ ff1_neuron_n ─activation→ ff2_neuron_n ─sum→ mlp_out
//! mlp_out ─sum→ residual_after_mlp ←residual─ residual_after_attn
//! residual_after_mlp(l) ─inter_block→ block_input(l+1)
//! ```
//!
//! With default pruning a layer has
//! `9 + h·(2 + 2·min(kv, t)) + min(wo, d) + 2·min(mlp, N)` nodes, where `t`
//! is the number of visible positions.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{embed_head, ov_project, qk_project, Lens, LensProjection, QkSide};
use crate::metrics::argsort_desc;
use crate::tensor::l2_norm;
use crate::trace::Trace;
use crate::weights::ModelBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    BlockInput,
    AttnLn,
    QkvJoint,
    HeadQuery,
    MemoryKey,
    MemoryValue,
    HeadOutput,
    AttnConcat,
    WoNeuron,
    AttnOut,
    ResidualAfterAttn,
    MlpLn,
    Ff1Neuron,
    Ff2Neuron,
    MlpOut,
    ResidualAfterMlp,
}

impl NodeKind {
    pub const ALL: [NodeKind; 16] = [
        NodeKind::BlockInput,
        NodeKind::AttnLn,
        NodeKind::QkvJoint,
        NodeKind::HeadQuery,
        NodeKind::MemoryKey,
        NodeKind::MemoryValue,
        NodeKind::HeadOutput,
        NodeKind::AttnConcat,
        NodeKind::WoNeuron,
        NodeKind::AttnOut,
        NodeKind::ResidualAfterAttn,
        NodeKind::MlpLn,
        NodeKind::Ff1Neuron,
        NodeKind::Ff2Neuron,
        NodeKind::MlpOut,
        NodeKind::ResidualAfterMlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::BlockInput => "block_input",
            NodeKind::AttnLn => "attn_ln",
            NodeKind::QkvJoint => "qkv_joint",
            NodeKind::HeadQuery => "head_query",
            NodeKind::MemoryKey => "memory_key",
            NodeKind::MemoryValue => "memory_value",
            NodeKind::HeadOutput => "head_output",
            NodeKind::AttnConcat => "attn_concat",
            NodeKind::WoNeuron => "wo_neuron",
            NodeKind::AttnOut => "attn_out",
            NodeKind::ResidualAfterAttn => "residual_after_attn",
            NodeKind::MlpLn => "mlp_ln",
            NodeKind::Ff1Neuron => "ff1_neuron",
            NodeKind::Ff2Neuron => "ff2_neuron",
            NodeKind::MlpOut => "mlp_out",
            NodeKind::ResidualAfterMlp => "residual_after_mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Text shown after the layer number in hover records.
    pub fn hover_text(self) -> &'static str {
        match self {
            NodeKind::BlockInput => "attn-input",
            NodeKind::AttnLn => "attn-ln",
            NodeKind::QkvJoint => "attn-qkv",
            NodeKind::HeadQuery => "attn-query",
            NodeKind::MemoryKey => "attn-key",
            NodeKind::MemoryValue => "attn-value",
            NodeKind::HeadOutput => "attn-head",
            NodeKind::AttnConcat => "attn-concat",
            NodeKind::WoNeuron => "attn-W_O neuron",
            NodeKind::AttnOut => "attn-output",
            NodeKind::ResidualAfterAttn => "attn-residual",
            NodeKind::MlpLn => "mlp-ln",
            NodeKind::Ff1Neuron => "mlp-FF1 neuron",
            NodeKind::Ff2Neuron => "mlp-FF2 neuron",
            NodeKind::MlpOut => "mlp-output",
            NodeKind::ResidualAfterMlp => "mlp-residual",
        }
    }

    /// Position in the computation order within a layer.
    pub fn stage(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    /// Number of indices the kind is addressed by.
    pub fn arity(self) -> usize {
        match self {
            NodeKind::MemoryKey | NodeKind::MemoryValue => 2,
            NodeKind::HeadQuery | NodeKind::HeadOutput | NodeKind::WoNeuron | NodeKind::Ff1Neuron | NodeKind::Ff2Neuron => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Normalize,
    Project,
    Split,
    Attention,
    Recall,
    WeightedSum,
    Concat,
    Coefficient,
    Sum,
    Residual,
    Activation,
    InterBlock,
}

impl EdgeKind {
    /// Accumulation edges carry an entropy shade.
    pub fn is_accumulation(self) -> bool {
        matches!(self, EdgeKind::Sum | EdgeKind::Residual | EdgeKind::InterBlock)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEcho {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEcho {
    pub id: u32,
    pub string: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNode {
    pub id: String,
    pub kind: NodeKind,
    pub layer: usize,
    pub head: Option<usize>,
    pub position: Option<usize>,
    pub neuron: Option<usize>,
    pub label: String,
    pub top_tokens: Vec<(String, f64)>,
    pub target_rank: Option<usize>,
    pub target_prob: Option<f64>,
    pub color_bin: u8,
    pub source_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub src: String,
    pub dst: String,
    pub kind: EdgeKind,
    pub score: f64,
    pub width: f64,
    pub shade: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub model: ModelEcho,
    pub prompt: String,
    pub tokens: Vec<String>,
    pub target: Option<TargetEcho>,
    pub nodes: Vec<FlowNode>,
    pub edges: Vec<FlowEdge>,
}

impl FlowGraph {
    pub fn node(&self, id: &str) -> Option<&FlowNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn nodes_of(&self, kind: NodeKind) -> impl Iterator<Item = &FlowNode> {
        self.nodes.iter().filter(move |n| n.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub keep_kv_per_head: usize,
    pub keep_wo_neurons: usize,
    /// Split between the highest (rounded up) and lowest signed activations.
    pub keep_mlp_neurons: usize,
    /// Layers to include; all layers when `None`.
    pub layer_range: Option<Range<usize>>,
    pub top_k_label_tokens: usize,
    /// Attention edges go straight from queries to values; no key nodes.
    pub merge_qk: bool,
    /// Project queries and keys without the QK circuit.
    pub naive_qk: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            keep_kv_per_head: 2,
            keep_wo_neurons: 10,
            keep_mlp_neurons: 10,
            layer_range: None,
            top_k_label_tokens: 10,
            merge_qk: false,
            naive_qk: false,
        }
    }
}

/// Rank thresholds separating the six colour bins; bin 0 is rank 0 and
/// bin 5 (also used without a target) is rank 5000 and beyond.
pub const COLOR_BIN_EDGES: [usize; 5] = [1, 5, 50, 500, 5000];
pub const WORST_COLOR_BIN: u8 = 5;

pub fn color_bin(rank: Option<usize>) -> u8 {
    match rank {
        Some(r) => COLOR_BIN_EDGES.iter().filter(|&&e| r >= e).count() as u8,
        None => WORST_COLOR_BIN,
    }
}

pub const MIN_WIDTH: f64 = 0.5;
pub const MAX_WIDTH: f64 = 8.0;

/// `{layer}:{kind}` followed by `:{i}` or `:{head}.{position}`.
pub fn node_id(layer: usize, kind: NodeKind, indices: &[usize]) -> String {
    let mut id = format!("{layer}:{kind}");
    if !indices.is_empty() {
        let parts: Vec<String> = indices.iter().map(usize::to_string).collect();
        id.push(':');
        id.push_str(&parts.join("."));
    }
    id
}

/// Inverse of [`node_id`].
pub fn parse_node_id(id: &str) -> Option<(usize, NodeKind, Vec<usize>)> {
    let mut parts = id.splitn(3, ':');
    let layer = parts.next()?.parse().ok()?;
    let kind = NodeKind::parse(parts.next()?)?;
    let indices = match parts.next() {
        Some(s) => s.split('.').map(|p| p.parse().ok()).collect::<Option<Vec<_>>>()?,
        None => Vec::new(),
    };
    (indices.len() == kind.arity()).then_some((layer, kind, indices))
}

/// Rounds to six significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// The `d`-vector a node is projected from.
///
/// Residual-stream kinds use the vector itself; head outputs and memory
/// values go through `W_O`; queries and keys through the QK circuit (or
/// zero-padded when `naive_qk`); `attn_concat` through `W_O` without bias;
/// neurons use their weight vectors (`W_O` row, `FF1` column, `FF2` row).
pub fn node_vector(
    bundle: &ModelBundle,
    trace: &Trace,
    layer: usize,
    kind: NodeKind,
    indices: &[usize],
    naive_qk: bool,
) -> Result<Vec<f32>> {
    let cfg = bundle.config();
    if layer >= trace.n_layers() {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: trace.n_layers(),
        });
    }
    if indices.len() != kind.arity() {
        return Err(Error::InvalidArgument(format!(
            "{kind} nodes take {} indices, got {}",
            kind.arity(),
            indices.len()
        )));
    }
    let check = |what: &'static str, index: usize, limit: usize| {
        if index >= limit {
            Err(Error::IndexOutOfRange { what, index, limit })
        } else {
            Ok(())
        }
    };
    let lt = &trace.layers[layer];
    let lw = bundle.layer(layer);
    let pos = trace.analyzed_position;
    match kind {
        NodeKind::HeadQuery | NodeKind::HeadOutput | NodeKind::MemoryKey | NodeKind::MemoryValue => {
            check("head", indices[0], cfg.n_heads)?;
        }
        NodeKind::WoNeuron => check("neuron", indices[0], cfg.d_model)?,
        NodeKind::Ff1Neuron | NodeKind::Ff2Neuron => check("neuron", indices[0], cfg.d_mlp)?,
        _ => {}
    }
    if kind.arity() == 2 {
        check("position", indices[1], pos + 1)?;
    }
    Ok(match kind {
        NodeKind::BlockInput => lt.block_input.row(pos).to_vec(),
        NodeKind::AttnLn => lt.ln1_out.row(pos).to_vec(),
        NodeKind::QkvJoint => lt.queries.row(pos).to_vec(),
        NodeKind::HeadQuery => {
            let q = lt.query(pos, indices[0]);
            if naive_qk {
                embed_head(bundle, indices[0], q)
            } else {
                qk_project(bundle, layer, indices[0], q, QkSide::Query)?
            }
        }
        NodeKind::MemoryKey => {
            let k = lt.key(indices[1], indices[0]);
            if naive_qk {
                embed_head(bundle, indices[0], k)
            } else {
                qk_project(bundle, layer, indices[0], k, QkSide::Key)?
            }
        }
        NodeKind::MemoryValue => ov_project(bundle, layer, indices[0], lt.value(indices[1], indices[0]))?,
        NodeKind::HeadOutput => ov_project(bundle, layer, indices[0], lt.head_output(pos, indices[0]))?,
        NodeKind::AttnConcat => crate::tensor::vec_mat(lt.head_outputs.row(pos), &lw.w_o),
        NodeKind::WoNeuron => lw.w_o.row(indices[0]).to_vec(),
        NodeKind::AttnOut => lt.attn_out.row(pos).to_vec(),
        NodeKind::ResidualAfterAttn => lt.residual_mid.row(pos).to_vec(),
        NodeKind::MlpLn => lt.ln2_out.row(pos).to_vec(),
        NodeKind::Ff1Neuron => lw.ff1.column(indices[0]),
        NodeKind::Ff2Neuron => lw.ff2.row(indices[0]).to_vec(),
        NodeKind::MlpOut => lt.mlp_out.row(pos).to_vec(),
        NodeKind::ResidualAfterMlp => lt.block_output.row(pos).to_vec(),
    })
}

/// MLP neurons kept by pruning: the `ceil(k/2)` highest and `floor(k/2)`
/// lowest signed activations, highest first, without duplicates.
pub fn select_mlp_neurons(activations: &[f32], keep: usize) -> Vec<usize> {
    let values: Vec<f64> = activations.iter().map(|&m| m as f64).collect();
    let order = argsort_desc(&values);
    let high = keep.div_ceil(2).min(order.len());
    let low = (keep / 2).min(order.len());
    let mut picked: Vec<usize> = order[..high].to_vec();
    for &n in order.iter().rev().take(low) {
        if !picked.contains(&n) {
            picked.push(n);
        }
    }
    picked
}

struct Pending {
    layer: usize,
    kind: NodeKind,
    indices: Vec<usize>,
}

struct Builder {
    nodes: Vec<Pending>,
    index: HashMap<String, usize>,
    edges: Vec<FlowEdge>,
}

impl Builder {
    fn node(&mut self, layer: usize, kind: NodeKind, indices: &[usize]) -> String {
        let id = node_id(layer, kind, indices);
        if !self.index.contains_key(&id) {
            self.index.insert(id.clone(), self.nodes.len());
            self.nodes.push(Pending {
                layer,
                kind,
                indices: indices.to_vec(),
            });
        }
        id
    }

    fn edge(&mut self, src: &str, dst: &str, kind: EdgeKind, score: f64) {
        self.edges.push(FlowEdge {
            src: src.to_string(),
            dst: dst.to_string(),
            kind,
            score,
            width: MIN_WIDTH,
            shade: None,
        });
    }
}

/// Compiles a trace into a flow graph.
pub fn build_graph(trace: &Trace, bundle: &ModelBundle, prune: &PruneConfig, target: Option<u32>) -> Result<FlowGraph> {
    let cfg = bundle.config();
    let n_layers = trace.n_layers();
    let range = prune.layer_range.clone().unwrap_or(0..n_layers);
    if range.is_empty() {
        return Err(Error::InvalidArgument("layer range is empty".into()));
    }
    if range.end > n_layers {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: range.end - 1,
            limit: n_layers,
        });
    }
    if let Some(id) = target {
        if id as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    let tokenizer = bundle.tokenizer();
    let pos = trace.analyzed_position;
    let h = cfg.n_heads;
    let mut b = Builder {
        nodes: Vec::new(),
        index: HashMap::new(),
        edges: Vec::new(),
    };

    let mut previous_output: Option<String> = None;
    for l in range.clone() {
        let lt = &trace.layers[l];
        let lw = bundle.layer(l);
        let input = b.node(l, NodeKind::BlockInput, &[]);
        if let Some(prev) = previous_output.take() {
            b.edge(&prev, &input, EdgeKind::InterBlock, l2_norm(lt.block_input.row(pos)));
        }
        let ln1 = b.node(l, NodeKind::AttnLn, &[]);
        b.edge(&input, &ln1, EdgeKind::Normalize, l2_norm(lt.ln1_out.row(pos)));
        let qkv = b.node(l, NodeKind::QkvJoint, &[]);
        b.edge(&ln1, &qkv, EdgeKind::Project, l2_norm(lt.queries.row(pos)));
        let mut head_nodes = Vec::with_capacity(h);
        for j in 0..h {
            let query = b.node(l, NodeKind::HeadQuery, &[j]);
            b.edge(&qkv, &query, EdgeKind::Split, l2_norm(lt.query(pos, j)));
            let row = lt.attention_row(j, pos);
            let ranked: Vec<usize> = argsort_desc(&row.iter().map(|&a| a as f64).collect::<Vec<_>>())
                .into_iter()
                .take(prune.keep_kv_per_head)
                .collect();
            let mut value_edges = Vec::new();
            for &i in &ranked {
                let a = row[i] as f64;
                let value = b.node(l, NodeKind::MemoryValue, &[j, i]);
                if prune.merge_qk {
                    b.edge(&query, &value, EdgeKind::Attention, a);
                } else {
                    let key = b.node(l, NodeKind::MemoryKey, &[j, i]);
                    b.edge(&query, &key, EdgeKind::Attention, a);
                    b.edge(&key, &value, EdgeKind::Recall, a);
                }
                value_edges.push((value, a * l2_norm(lt.value(i, j))));
            }
            let head = b.node(l, NodeKind::HeadOutput, &[j]);
            for (value, score) in value_edges {
                b.edge(&value, &head, EdgeKind::WeightedSum, score);
            }
            head_nodes.push(head);
        }
        let concat = b.node(l, NodeKind::AttnConcat, &[]);
        for (j, head) in head_nodes.iter().enumerate() {
            let ov = ov_project(bundle, l, j, lt.head_output(pos, j))?;
            b.edge(head, &concat, EdgeKind::Concat, l2_norm(&ov));
        }
        let a_concat = lt.head_outputs.row(pos);
        let mags: Vec<f64> = a_concat.iter().map(|c| c.abs() as f64).collect();
        let wo_selected: Vec<usize> = argsort_desc(&mags).into_iter().take(prune.keep_wo_neurons).collect();
        let mut wo_nodes = Vec::new();
        for &n in &wo_selected {
            let c = a_concat[n] as f64;
            let neuron = b.node(l, NodeKind::WoNeuron, &[n]);
            b.edge(&concat, &neuron, EdgeKind::Coefficient, c);
            wo_nodes.push((neuron, c.abs() * l2_norm(lw.w_o.row(n))));
        }
        let attn_out = b.node(l, NodeKind::AttnOut, &[]);
        for (neuron, score) in wo_nodes {
            b.edge(&neuron, &attn_out, EdgeKind::Sum, score);
        }
        let mid = b.node(l, NodeKind::ResidualAfterAttn, &[]);
        b.edge(&attn_out, &mid, EdgeKind::Sum, l2_norm(lt.attn_out.row(pos)));
        b.edge(&input, &mid, EdgeKind::Residual, l2_norm(lt.block_input.row(pos)));

        let ln2 = b.node(l, NodeKind::MlpLn, &[]);
        b.edge(&mid, &ln2, EdgeKind::Normalize, l2_norm(lt.ln2_out.row(pos)));
        let m = lt.mlp_activations.row(pos);
        let pre = lt.mlp_pre_activations.row(pos);
        let mlp_selected = select_mlp_neurons(m, prune.keep_mlp_neurons);
        let mut ff2_nodes = Vec::new();
        for &n in &mlp_selected {
            let ff1 = b.node(l, NodeKind::Ff1Neuron, &[n]);
            b.edge(&ln2, &ff1, EdgeKind::Coefficient, pre[n] as f64);
            ff2_nodes.push((ff1, n));
        }
        let mut ff2_out = Vec::new();
        for (ff1, n) in ff2_nodes {
            let ff2 = b.node(l, NodeKind::Ff2Neuron, &[n]);
            b.edge(&ff1, &ff2, EdgeKind::Activation, m[n] as f64);
            ff2_out.push((ff2, (m[n] as f64).abs() * l2_norm(lw.ff2.row(n))));
        }
        let mlp_out = b.node(l, NodeKind::MlpOut, &[]);
        for (ff2, score) in ff2_out {
            b.edge(&ff2, &mlp_out, EdgeKind::Sum, score);
        }
        let out = b.node(l, NodeKind::ResidualAfterMlp, &[]);
        b.edge(&mlp_out, &out, EdgeKind::Sum, l2_norm(lt.mlp_out.row(pos)));
        b.edge(&mid, &out, EdgeKind::Residual, l2_norm(lt.residual_mid.row(pos)));
        previous_output = Some(out);
    }

    // Drop nodes that ended up without edges.
    let mut touched = vec![false; b.nodes.len()];
    for e in &b.edges {
        touched[b.index[&e.src]] = true;
        touched[b.index[&e.dst]] = true;
    }
    let pending: Vec<Pending> = b
        .nodes
        .into_iter()
        .zip(touched)
        .filter_map(|(p, t)| t.then_some(p))
        .collect();

    let lens = Lens::new(bundle);
    let vectors = pending
        .iter()
        .map(|p| node_vector(bundle, trace, p.layer, p.kind, &p.indices, prune.naive_qk))
        .collect::<Result<Vec<_>>>()?;
    let mut projections = Vec::with_capacity(vectors.len());
    for chunk in vectors.chunks(64) {
        let logits = lens.logits_batch(chunk)?;
        for i in 0..chunk.len() {
            projections.push(LensProjection::from_logits(logits.row(i), prune.top_k_label_tokens, target)?);
        }
    }

    let mut nodes = Vec::with_capacity(pending.len());
    let mut entropy_by_id = HashMap::new();
    for (p, proj) in pending.iter().zip(&projections) {
        let id = node_id(p.layer, p.kind, &p.indices);
        entropy_by_id.insert(id.clone(), proj.entropy_nats);
        let top_tokens = proj
            .top_k
            .iter()
            .map(|t| Ok((tokenizer.render_token(t.id)?, round6(t.prob as f64))))
            .collect::<Result<Vec<_>>>()?;
        let label = match proj.top1() {
            Some(id) => tokenizer.render_token(id)?,
            None => String::new(),
        };
        let (head, position, neuron) = match p.kind.arity() {
            2 => (Some(p.indices[0]), Some(p.indices[1]), None),
            1 if matches!(p.kind, NodeKind::HeadQuery | NodeKind::HeadOutput) => (Some(p.indices[0]), None, None),
            1 => (None, None, Some(p.indices[0])),
            _ => (None, None, None),
        };
        let source_token = match position {
            Some(i) => Some(tokenizer.render_token(trace.token_ids[i])?),
            None => None,
        };
        let target_rank = proj.target.map(|t| t.rank);
        nodes.push(FlowNode {
            id,
            kind: p.kind,
            layer: p.layer,
            head,
            position,
            neuron,
            label,
            top_tokens,
            target_rank,
            target_prob: proj.target.map(|t| round6(t.prob as f64)),
            color_bin: color_bin(target_rank),
            source_token,
        });
    }

    let mut edges = b.edges;
    let mut group_max: HashMap<(EdgeKind, String), f64> = HashMap::new();
    for e in &edges {
        let m = group_max.entry((e.kind, e.dst.clone())).or_insert(0.0);
        *m = m.max(e.score.abs());
    }
    let max_entropy = (cfg.vocab_size as f64).ln();
    for e in &mut edges {
        let m = group_max[&(e.kind, e.dst.clone())];
        let w = if m > 0.0 {
            MIN_WIDTH + (MAX_WIDTH - MIN_WIDTH) * e.score.abs() / m
        } else {
            MIN_WIDTH
        };
        e.width = round6(w.clamp(MIN_WIDTH, MAX_WIDTH));
        if e.kind.is_accumulation() {
            let shade = 1.0 - entropy_by_id[&e.src] / max_entropy;
            e.shade = Some(round6(shade.clamp(0.0, 1.0)));
        }
        e.score = round6(e.score);
    }

    let target = match target {
        Some(id) => Some(TargetEcho {
            id,
            string: tokenizer.decode(&[id])?,
        }),
        None => None,
    };
    Ok(FlowGraph {
        model: ModelEcho {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_model: cfg.d_model,
            d_mlp: cfg.d_mlp,
            vocab_size: cfg.vocab_size,
            max_positions: cfg.max_positions,
        },
        prompt: tokenizer.decode(&trace.token_ids)?,
        tokens: trace
            .token_ids
            .iter()
            .map(|&id| tokenizer.render_token(id))
            .collect::<Result<_>>()?,
        target,
        nodes,
        edges,
    })
}

/// Pretty-printed JSON with the documented field order.
pub fn serialize_graph(graph: &FlowGraph) -> String {
    serde_json::to_string_pretty(graph).expect("graphs contain only finite numbers and strings")
}

pub fn parse_graph(json: &str) -> Result<FlowGraph> {
    Ok(serde_json::from_str(json)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLine {
    pub token: String,
    pub rank: usize,
    pub prob: f64,
}

/// What the viewer shows when hovering a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescription {
    pub id: String,
    pub layer: usize,
    /// For example `"10) attn-input"`.
    pub kind_text: String,
    pub top_tokens: Vec<(String, f64)>,
    pub target: Option<TargetLine>,
    pub source_token: Option<String>,
    /// Signed coefficient of a neuron node.
    pub coefficient: Option<f64>,
    /// Set for neurons with a negative coefficient: their projection is
    /// subtracted from the stream.
    pub suppressed_meaning: bool,
}

pub fn describe_node(graph: &FlowGraph, id: &str) -> Result<NodeDescription> {
    let node = graph
        .node(id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown node id {id:?}")))?;
    let coefficient = match node.kind {
        NodeKind::WoNeuron => graph
            .edges
            .iter()
            .find(|e| e.dst == node.id && e.kind == EdgeKind::Coefficient)
            .map(|e| e.score),
        NodeKind::Ff2Neuron => graph
            .edges
            .iter()
            .find(|e| e.dst == node.id && e.kind == EdgeKind::Activation)
            .map(|e| e.score),
        _ => None,
    };
    let target = match (&graph.target, node.target_rank, node.target_prob) {
        (Some(t), Some(rank), Some(prob)) => Some(TargetLine {
            token: t.string.clone(),
            rank,
            prob,
        }),
        _ => None,
    };
    Ok(NodeDescription {
        id: node.id.clone(),
        layer: node.layer,
        kind_text: format!("{}) {}", node.layer, node.kind.hover_text()),
        top_tokens: node.top_tokens.clone(),
        target,
        source_token: node.source_token.clone(),
        coefficient,
        suppressed_meaning: coefficient.is_some_and(|c| c < 0.0),
    })
}
