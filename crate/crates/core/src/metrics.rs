//! Corpus-level analyses over traces: intersection scores, head and memory
//! rankings, layer-norm effects, regularization neurons, prediction curves.
//!
//! Every routine that walks a corpus runs prompts in parallel but folds the
//! per-prompt samples back in prompt order, so results do not depend on
//! scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::PromptRecord;
use crate::error::{Error, Result};
use crate::lens::{embed_head, entropy_f64, ov_project, qk_project, top_k_indices, Lens, LensMode, QkSide};
use crate::ops::softmax_f64;
use crate::tensor::l2_norm;
use crate::trace::{forward, LayerTrace, Trace};
use crate::weights::ModelBundle;

/// How a vector is lifted to the residual space before the logit lens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Circuit {
    /// A `d`-vector, projected as is.
    Residual,
    /// A head vector zero-padded into its slot of a `d`-vector.
    Naive,
    Ov,
    QkQuery,
    QkKey,
}

/// A vector together with the rule that projects it.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub vector: &'a [f32],
    pub circuit: Circuit,
    pub layer: usize,
    pub head: usize,
}

impl<'a> Probe<'a> {
    pub fn residual(vector: &'a [f32]) -> Self {
        Self {
            vector,
            circuit: Circuit::Residual,
            layer: 0,
            head: 0,
        }
    }

    pub fn head(vector: &'a [f32], circuit: Circuit, layer: usize, head: usize) -> Self {
        Self {
            vector,
            circuit,
            layer,
            head,
        }
    }

    /// The `d`-vector handed to the logit lens.
    pub fn resolve(&self, bundle: &ModelBundle) -> Result<Vec<f32>> {
        match self.circuit {
            Circuit::Residual => Ok(self.vector.to_vec()),
            Circuit::Naive => {
                let cfg = bundle.config();
                if self.head >= cfg.n_heads || self.vector.len() != cfg.head_dim() {
                    return Err(Error::InvalidArgument(format!(
                        "head probe needs head < {} and length {}",
                        cfg.n_heads,
                        cfg.head_dim()
                    )));
                }
                Ok(embed_head(bundle, self.head, self.vector))
            }
            Circuit::Ov => ov_project(bundle, self.layer, self.head, self.vector),
            Circuit::QkQuery => qk_project(bundle, self.layer, self.head, self.vector, QkSide::Query),
            Circuit::QkKey => qk_project(bundle, self.layer, self.head, self.vector, QkSide::Key),
        }
    }
}

/// `|top_k(a) ∩ top_k(b)| / k` for two precomputed top-k lists.
pub fn overlap(a: &[u32], b: &[u32], k: usize) -> f64 {
    let mut sorted = b.to_vec();
    sorted.sort_unstable();
    let shared = a.iter().filter(|id| sorted.binary_search(id).is_ok()).count();
    shared as f64 / k as f64
}

/// The intersection score `I_k` of two probes.
pub fn intersection_score(bundle: &ModelBundle, a: Probe<'_>, b: Probe<'_>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let lens = Lens::new(bundle);
    let tops = lens.top_k_batch(&[a.resolve(bundle)?, b.resolve(bundle)?], k)?;
    Ok(overlap(&tops[0], &tops[1], k))
}

/// Indices sorted by descending value, ties by ascending index.
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// `‖A_j · W_O^{(j)}‖₂` for every head at position `pos`.
pub fn head_ov_norms(bundle: &ModelBundle, layer_trace: &LayerTrace, layer: usize, pos: usize) -> Result<Vec<f64>> {
    (0..layer_trace.n_heads)
        .map(|j| Ok(l2_norm(&ov_project(bundle, layer, j, layer_trace.head_output(pos, j))?)))
        .collect()
}

pub fn rank_heads_by_norm(bundle: &ModelBundle, layer_trace: &LayerTrace, layer: usize, pos: usize) -> Result<Vec<usize>> {
    Ok(argsort_desc(&head_ov_norms(bundle, layer_trace, layer, pos)?))
}

/// Memory positions `0..=pos` of head `head`, most attended first.
pub fn rank_memory_values(layer_trace: &LayerTrace, head: usize, pos: usize) -> Vec<usize> {
    let row: Vec<f64> = layer_trace.attention_row(head, pos).iter().map(|&a| a as f64).collect();
    argsort_desc(&row)
}

/// Runs `f` over the corpus on a few worker threads, returning results in
/// corpus order.
fn map_prompts<T, F>(records: &[PromptRecord], f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(&PromptRecord) -> Result<T> + Sync,
{
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(records.len().max(1));
    if workers <= 1 {
        return records.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..records.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= records.len() {
                    break;
                }
                let r = f(&records[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn encode_prompt(bundle: &ModelBundle, record: &PromptRecord) -> Result<Vec<u32>> {
    let ids = bundle.tokenizer().encode(&record.prompt);
    if ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(ids)
}

/// Whether the model's one-token continuation begins the expected answer.
pub fn answers_correctly(bundle: &ModelBundle, trace: &Trace, expected: &str) -> Result<bool> {
    let predicted = bundle.tokenizer().decode(&[trace.predicted_token()])?;
    let predicted = predicted.trim();
    Ok(!predicted.is_empty() && expected.trim().starts_with(predicted))
}

/// Traces of the prompts kept by the correctness filter, in corpus order.
fn corpus_traces(bundle: &ModelBundle, corpus: &[PromptRecord], filter_correct: bool) -> Result<Vec<(usize, Trace)>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    if filter_correct {
        if let Some(r) = corpus.iter().find(|r| r.expected_answer.is_none()) {
            return Err(Error::InvalidArgument(format!(
                "filtering by correctness needs an answer for every prompt (missing for {:?})",
                r.prompt
            )));
        }
    }
    let traces = map_prompts(corpus, |r| forward(bundle, &encode_prompt(bundle, r)?));
    let mut kept = Vec::new();
    for (i, (record, trace)) in corpus.iter().zip(traces).enumerate() {
        let trace = trace?;
        let keep = match (&record.expected_answer, filter_correct) {
            (Some(answer), true) => answers_correctly(bundle, &trace, answer)?,
            _ => true,
        };
        if keep {
            kept.push((i, trace));
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no prompt left after filtering: the model answered 0 of {} prompts correctly",
            corpus.len()
        )));
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub k: usize,
    pub top_n_heads: usize,
    pub top_m_values: usize,
    pub filter_correct: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k: 50,
            top_n_heads: 3,
            top_m_values: 3,
            filter_correct: false,
        }
    }
}

/// One named per-layer curve. `mean[l]` is `None` when layer `l` had no
/// samples (for example rank-3 memory values on two-token prompts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub mean: Vec<Option<f64>>,
    pub samples: Vec<usize>,
}

impl Series {
    pub fn max(&self) -> Option<f64> {
        self.mean.iter().flatten().copied().reduce(f64::max)
    }

    /// Layer of the largest mean (first on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (l, m) in self.mean.iter().enumerate() {
            if let Some(m) = *m {
                if best.is_none_or(|(_, b)| m > b) {
                    best = Some((l, m));
                }
            }
        }
        best.map(|(l, _)| l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub n_layers: usize,
    pub prompts_total: usize,
    pub prompts_used: usize,
    pub series: Vec<Series>,
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

impl ExperimentReport {
    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name)
    }

    /// `layer,series,mean,samples`, one row per layer per series.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,series,mean,samples\n");
        for s in &self.series {
            for (l, (m, n)) in s.mean.iter().zip(&s.samples).enumerate() {
                let m = m.map(|m| format!("{m:.6}")).unwrap_or_default();
                let _ = writeln!(out, "{l},{},{m},{n}", s.name);
            }
        }
        out
    }

    /// Writes [`REPORT_JSON`] and [`REPORT_CSV`] into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join(REPORT_CSV), self.to_csv())?;
        Ok(())
    }
}

/// Sample buckets: series name → layer → values.
struct Samples {
    n_layers: usize,
    buckets: BTreeMap<String, Vec<Vec<f64>>>,
    order: Vec<String>,
}

impl Samples {
    fn new(n_layers: usize) -> Self {
        Self {
            n_layers,
            buckets: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, layer: usize, value: f64) {
        if !self.buckets.contains_key(name) {
            self.order.push(name.to_string());
            self.buckets.insert(name.to_string(), vec![Vec::new(); self.n_layers]);
        }
        self.buckets.get_mut(name).expect("inserted")[layer].push(value);
    }

    fn declare(&mut self, name: &str) {
        if !self.buckets.contains_key(name) {
            self.order.push(name.to_string());
            self.buckets.insert(name.to_string(), vec![Vec::new(); self.n_layers]);
        }
    }

    fn absorb(&mut self, other: Samples) {
        let Samples { mut buckets, order, .. } = other;
        for name in order {
            let layers = buckets.remove(&name).expect("ordered names are present");
            self.declare(&name);
            for (dst, src) in self.buckets.get_mut(&name).expect("declared").iter_mut().zip(layers) {
                dst.extend(src);
            }
        }
    }

    fn into_series(mut self) -> Vec<Series> {
        self.order
            .iter()
            .map(|name| {
                let layers = self.buckets.remove(name).expect("ordered names are present");
                Series {
                    name: name.clone(),
                    mean: layers
                        .iter()
                        .map(|v| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
                        .collect(),
                    samples: layers.iter().map(Vec::len).collect(),
                }
            })
            .collect()
    }
}

/// Names of the series produced by [`run_alignment_experiment`].
pub mod series {
    pub const HEADS_NAIVE_VS_ATTN_OUT: &str = "heads_naive_vs_attn_out";
    pub const HEADS_NAIVE_VS_BLOCK_OUT: &str = "heads_naive_vs_block_out";
    pub const HEADS_NAIVE_VS_FINAL: &str = "heads_naive_vs_final";
    pub const HEADS_OV_VS_ATTN_OUT: &str = "heads_ov_vs_attn_out";
    pub const HEADS_OV_VS_BLOCK_OUT: &str = "heads_ov_vs_block_out";
    pub const HEADS_OV_VS_FINAL: &str = "heads_ov_vs_final";
    pub const TOP_N_HEADS_OV_VS_ATTN_OUT: &str = "top_n_heads_ov_vs_attn_out";
    pub const TOP_N_HEADS_OV_VS_BLOCK_OUT: &str = "top_n_heads_ov_vs_block_out";
    pub const TOP_N_HEADS_OV_VS_FINAL: &str = "top_n_heads_ov_vs_final";
    pub const TOP1_HEAD_OV_VS_ATTN_OUT: &str = "top1_head_ov_vs_attn_out";
    pub const ATTN_OUT_VS_RESIDUAL_IN: &str = "attn_out_vs_residual_in";
    pub const ATTN_OUT_VS_RESIDUAL_MID: &str = "attn_out_vs_residual_mid";
    pub const HEAD_UNIFORMITY: &str = "head_uniformity";
    pub const QK_QUERY_VS_KEY: &str = "qk_query_vs_top_key";

    /// Memory values at attention rank `rank` (1-based) against their head.
    pub fn memory_value_rank(rank: usize) -> String {
        format!("memory_value_rank{rank}_vs_head")
    }
}

fn prompt_samples(bundle: &ModelBundle, trace: &Trace, cfg: &ExperimentConfig) -> Result<Samples> {
    use series::*;
    let lens = Lens::new(bundle);
    let k = cfg.k;
    let h = bundle.config().n_heads;
    let pos = trace.analyzed_position;
    let mut out = Samples::new(trace.n_layers());
    let final_top = lens.top_k(trace.final_hidden(), k)?;

    for (l, lt) in trace.layers.iter().enumerate() {
        // Batch layout: attn_out, block_out, residual_in, residual_mid,
        // heads naive (h), heads ov (h), values by rank (h * m), qk q/k (2h).
        let mut batch: Vec<Vec<f32>> = vec![
            lt.attn_out.row(pos).to_vec(),
            lt.block_output.row(pos).to_vec(),
            lt.block_input.row(pos).to_vec(),
            lt.residual_mid.row(pos).to_vec(),
        ];
        let mut norms = Vec::with_capacity(h);
        for j in 0..h {
            batch.push(embed_head(bundle, j, lt.head_output(pos, j)));
        }
        for j in 0..h {
            let ov = ov_project(bundle, l, j, lt.head_output(pos, j))?;
            norms.push(l2_norm(&ov));
            batch.push(ov);
        }
        let mut value_slots = Vec::new();
        for j in 0..h {
            for (r, &i) in rank_memory_values(lt, j, pos).iter().take(cfg.top_m_values).enumerate() {
                value_slots.push((j, r + 1, batch.len()));
                batch.push(ov_project(bundle, l, j, lt.value(i, j))?);
            }
        }
        let qk_base = batch.len();
        for j in 0..h {
            let top_key = rank_memory_values(lt, j, pos)[0];
            batch.push(qk_project(bundle, l, j, lt.query(pos, j), QkSide::Query)?);
            batch.push(qk_project(bundle, l, j, lt.key(top_key, j), QkSide::Key)?);
        }
        let tops = lens.top_k_batch(&batch, k)?;
        let (attn_top, block_top, res_in_top, res_mid_top) = (&tops[0], &tops[1], &tops[2], &tops[3]);
        let naive = &tops[4..4 + h];
        let ov = &tops[4 + h..4 + 2 * h];

        for j in 0..h {
            out.push(HEADS_NAIVE_VS_ATTN_OUT, l, overlap(&naive[j], attn_top, k));
            out.push(HEADS_NAIVE_VS_BLOCK_OUT, l, overlap(&naive[j], block_top, k));
            out.push(HEADS_NAIVE_VS_FINAL, l, overlap(&naive[j], &final_top, k));
        }
        for j in 0..h {
            out.push(HEADS_OV_VS_ATTN_OUT, l, overlap(&ov[j], attn_top, k));
            out.push(HEADS_OV_VS_BLOCK_OUT, l, overlap(&ov[j], block_top, k));
            out.push(HEADS_OV_VS_FINAL, l, overlap(&ov[j], &final_top, k));
        }
        let ranked = argsort_desc(&norms);
        for &j in ranked.iter().take(cfg.top_n_heads) {
            out.push(TOP_N_HEADS_OV_VS_ATTN_OUT, l, overlap(&ov[j], attn_top, k));
            out.push(TOP_N_HEADS_OV_VS_BLOCK_OUT, l, overlap(&ov[j], block_top, k));
            out.push(TOP_N_HEADS_OV_VS_FINAL, l, overlap(&ov[j], &final_top, k));
        }
        out.push(TOP1_HEAD_OV_VS_ATTN_OUT, l, overlap(&ov[ranked[0]], attn_top, k));
        for r in 1..=cfg.top_m_values {
            out.declare(&memory_value_rank(r));
        }
        for &(j, rank, slot) in &value_slots {
            out.push(&memory_value_rank(rank), l, overlap(&tops[slot], &ov[j], k));
        }
        out.push(ATTN_OUT_VS_RESIDUAL_IN, l, overlap(attn_top, res_in_top, k));
        out.push(ATTN_OUT_VS_RESIDUAL_MID, l, overlap(attn_top, res_mid_top, k));
        for a in 0..h {
            for b in a + 1..h {
                out.push(HEAD_UNIFORMITY, l, overlap(&ov[a], &ov[b], k));
            }
        }
        for j in 0..h {
            let q = &tops[qk_base + 2 * j];
            let key = &tops[qk_base + 2 * j + 1];
            out.push(QK_QUERY_VS_KEY, l, overlap(q, key, k));
        }
    }
    Ok(out)
}

/// Per-layer mean `I_k` curves over a corpus. Samples are pooled per layer
/// across prompts (and heads, where a series has several per prompt).
pub fn run_alignment_experiment(
    bundle: &ModelBundle,
    corpus: &[PromptRecord],
    config: ExperimentConfig,
) -> Result<ExperimentReport> {
    if config.k == 0 || config.k > bundle.config().vocab_size {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={}, got {}",
            bundle.config().vocab_size,
            config.k
        )));
    }
    let traces = corpus_traces(bundle, corpus, config.filter_correct)?;
    let per_prompt = map_traces(&traces, |t| prompt_samples(bundle, t, &config));
    let mut all = Samples::new(bundle.config().n_layers);
    for s in per_prompt {
        all.absorb(s?);
    }
    Ok(ExperimentReport {
        config,
        n_layers: bundle.config().n_layers,
        prompts_total: corpus.len(),
        prompts_used: traces.len(),
        series: all.into_series(),
    })
}

fn map_traces<T, F>(traces: &[(usize, Trace)], f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(&Trace) -> Result<T> + Sync,
{
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(traces.len().max(1));
    let chunk = traces.len().div_ceil(workers.max(1)).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = traces
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(|(_, t)| f(t)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Mean pairwise `I_k` between logit-lens projections of `n` random unit
/// vectors.
pub fn random_baseline(bundle: &ModelBundle, n: usize, k: usize, seed: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two vectors".into()));
    }
    let d = bundle.config().d_model;
    let mut rng = StdRng::seed_from_u64(seed);
    let vectors: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = l2_norm(&v) as f32;
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let tops = Lens::new(bundle).top_k_batch(&vectors, k)?;
    let sorted: Vec<Vec<u32>> = tops
        .into_iter()
        .map(|mut t| {
            t.sort_unstable();
            t
        })
        .collect();
    let (mut total, mut pairs) = (0.0f64, 0usize);
    for a in 0..n {
        for b in a + 1..n {
            let shared = sorted[a].iter().filter(|id| sorted[b].binary_search(id).is_ok()).count();
            total += shared as f64 / k as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhichLn {
    Ln1,
    Ln2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LnReportConfig {
    pub layer: usize,
    pub which: WhichLn,
    /// `false` projects without `ln_f` (diagnostic).
    pub use_final_ln: bool,
    /// Project the mean vectors instead of averaging per-prompt deltas.
    pub mean_vector: bool,
    pub top: usize,
}

impl LnReportConfig {
    pub fn new(layer: usize, which: WhichLn) -> Self {
        Self {
            layer,
            which,
            use_final_ln: true,
            mean_vector: false,
            top: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDelta {
    pub id: u32,
    pub token: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnReport {
    pub config: LnReportConfig,
    pub prompts: usize,
    /// Sum of the mean deltas over the vocabulary (≈ 0).
    pub delta_sum: f64,
    pub top_gainers: Vec<TokenDelta>,
    pub top_losers: Vec<TokenDelta>,
    #[serde(skip)]
    pub mean_delta: Vec<f64>,
}

/// `LL(after) − LL(before)` per token.
pub fn ln_delta(lens: &Lens<'_>, before: &[f32], after: &[f32]) -> Result<Vec<f64>> {
    let logits = lens.logits_batch(&[before.to_vec(), after.to_vec()])?;
    let p0 = softmax_f64(logits.row(0));
    let p1 = softmax_f64(logits.row(1));
    Ok(p1.iter().zip(&p0).map(|(a, b)| a - b).collect())
}

/// Probability shift caused by one layer norm, averaged over a corpus.
pub fn ln_effect_report(bundle: &ModelBundle, corpus: &[PromptRecord], config: LnReportConfig) -> Result<LnReport> {
    let cfg = bundle.config();
    if config.layer >= cfg.n_layers {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: config.layer,
            limit: cfg.n_layers,
        });
    }
    let traces = corpus_traces(bundle, corpus, false)?;
    let mode = if config.use_final_ln {
        LensMode::FinalNorm
    } else {
        LensMode::NoFinalNorm
    };
    let lens = Lens::with_mode(bundle, mode);
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = traces
        .iter()
        .map(|(_, t)| {
            let lt = &t.layers[config.layer];
            let pos = t.analyzed_position;
            match config.which {
                WhichLn::Ln1 => (lt.block_input.row(pos).to_vec(), lt.ln1_out.row(pos).to_vec()),
                WhichLn::Ln2 => (lt.residual_mid.row(pos).to_vec(), lt.ln2_out.row(pos).to_vec()),
            }
        })
        .collect();
    let n = pairs.len();
    let mean_delta = if config.mean_vector {
        let mean = |pick: fn(&(Vec<f32>, Vec<f32>)) -> &Vec<f32>| -> Vec<f32> {
            let mut acc = vec![0.0f64; cfg.d_model];
            for p in &pairs {
                for (a, &x) in acc.iter_mut().zip(pick(p)) {
                    *a += x as f64;
                }
            }
            acc.iter().map(|a| (a / n as f64) as f32).collect()
        };
        ln_delta(&lens, &mean(|p| &p.0), &mean(|p| &p.1))?
    } else {
        let mut acc = vec![0.0f64; cfg.vocab_size];
        for (before, after) in &pairs {
            for (a, d) in acc.iter_mut().zip(ln_delta(&lens, before, after)?) {
                *a += d;
            }
        }
        acc.iter().map(|a| a / n as f64).collect()
    };
    let as_f32: Vec<f32> = mean_delta.iter().map(|&d| d as f32).collect();
    let negated: Vec<f32> = as_f32.iter().map(|d| -d).collect();
    let describe = |ids: Vec<u32>| -> Result<Vec<TokenDelta>> {
        ids.into_iter()
            .map(|id| {
                Ok(TokenDelta {
                    id,
                    token: bundle.tokenizer().decode(&[id])?,
                    delta: mean_delta[id as usize],
                })
            })
            .collect()
    };
    Ok(LnReport {
        config,
        prompts: n,
        delta_sum: mean_delta.iter().sum(),
        top_gainers: describe(top_k_indices(&as_f32, config.top))?,
        top_losers: describe(top_k_indices(&negated, config.top))?,
        mean_delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegNeuronConfig {
    pub top_pool: usize,
    pub freq_threshold: f64,
    /// Defaults to every layer when `None`.
    pub layers: Option<Range<usize>>,
    pub top_tokens: usize,
}

impl Default for RegNeuronConfig {
    fn default() -> Self {
        Self {
            top_pool: 100,
            freq_threshold: 0.85,
            layers: None,
            top_tokens: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegNeuron {
    pub layer: usize,
    pub neuron: usize,
    /// Fraction of prompts in which the neuron was in the top pool.
    pub frequency: f64,
    pub ff2_norm: f64,
    pub entropy_nats: f64,
    pub top_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNeuronStats {
    pub layer: usize,
    /// Mean `‖FF2 row‖` over all neurons of the layer.
    pub mean_ff2_norm: f64,
    /// Mean projection entropy over every (prompt, top-pool neuron) pair.
    pub mean_pool_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegNeuronReport {
    pub config: RegNeuronConfig,
    pub prompts: usize,
    pub layers: Vec<LayerNeuronStats>,
    pub neurons: Vec<RegNeuron>,
}

impl RegNeuronReport {
    pub fn layer_stats(&self, layer: usize) -> Option<&LayerNeuronStats> {
        self.layers.iter().find(|s| s.layer == layer)
    }
}

/// Neurons of `FF2` that sit in the per-prompt top pool of `|m_i|` more
/// often than the threshold.
pub fn detect_regularization_neurons(
    bundle: &ModelBundle,
    corpus: &[PromptRecord],
    config: RegNeuronConfig,
) -> Result<RegNeuronReport> {
    let cfg = bundle.config();
    let layers = config.layers.clone().unwrap_or(0..cfg.n_layers);
    if layers.end > cfg.n_layers || layers.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "layer range {layers:?} is not within 0..{}",
            cfg.n_layers
        )));
    }
    let traces = corpus_traces(bundle, corpus, false)?;
    let lens = Lens::new(bundle);
    let n_prompts = traces.len();
    let mut stats = Vec::new();
    let mut neurons = Vec::new();
    for l in layers {
        let ff2 = &bundle.layer(l).ff2;
        let norms: Vec<f64> = (0..cfg.d_mlp).map(|n| l2_norm(ff2.row(n))).collect();
        let mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let mut pools = Vec::with_capacity(n_prompts);
        for (_, t) in &traces {
            let m: Vec<f64> = t.layers[l]
                .mlp_activations
                .row(t.analyzed_position)
                .iter()
                .map(|x| x.abs() as f64)
                .collect();
            let pool: Vec<usize> = argsort_desc(&m).into_iter().take(config.top_pool).collect();
            for &n in &pool {
                *counts.entry(n).or_default() += 1;
            }
            pools.push(pool);
        }
        let mut members: Vec<usize> = counts.keys().copied().collect();
        members.sort_unstable();
        let rows: Vec<Vec<f32>> = members.iter().map(|&n| ff2.row(n).to_vec()).collect();
        let mut entropy = HashMap::new();
        let mut tops = HashMap::new();
        for (chunk_ids, chunk) in members.chunks(64).zip(rows.chunks(64)) {
            let logits = lens.logits_batch(chunk)?;
            for (i, &n) in chunk_ids.iter().enumerate() {
                entropy.insert(n, entropy_f64(&softmax_f64(logits.row(i))));
                tops.insert(n, top_k_indices(logits.row(i), config.top_tokens));
            }
        }
        let occurrences: usize = pools.iter().map(Vec::len).sum();
        let pool_entropy = pools.iter().flatten().map(|n| entropy[n]).sum::<f64>() / occurrences.max(1) as f64;
        stats.push(LayerNeuronStats {
            layer: l,
            mean_ff2_norm: mean_norm,
            mean_pool_entropy: pool_entropy,
        });
        for &n in &members {
            let frequency = counts[&n] as f64 / n_prompts as f64;
            if frequency > config.freq_threshold {
                let top_tokens = tops[&n]
                    .iter()
                    .map(|&id| bundle.tokenizer().render_token(id))
                    .collect::<Result<_>>()?;
                neurons.push(RegNeuron {
                    layer: l,
                    neuron: n,
                    frequency,
                    ff2_norm: norms[n],
                    entropy_nats: entropy[&n],
                    top_tokens,
                });
            }
        }
    }
    Ok(RegNeuronReport {
        config,
        prompts: n_prompts,
        layers: stats,
        neurons,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub layer: usize,
    pub neuron: usize,
    /// `|w|` sorted descending, paired with the dimension index.
    pub magnitudes: Vec<(usize, f32)>,
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
    /// Dimensions whose magnitude exceeds `mean + 6·std`, ascending.
    pub outliers: Vec<usize>,
}

pub const OUTLIER_SIGMAS: f64 = 6.0;

/// Dimensions of `row` whose magnitude exceeds mean + 6σ of the magnitudes.
/// A constant row has no outliers.
pub fn outlier_dimensions(row: &[f32]) -> (f64, f64, Vec<usize>) {
    let n = row.len() as f64;
    let mags: Vec<f64> = row.iter().map(|w| w.abs() as f64).collect();
    let mean = mags.iter().sum::<f64>() / n;
    let std = (mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return (mean, std, Vec::new());
    }
    let threshold = mean + OUTLIER_SIGMAS * std;
    let outliers = mags
        .iter()
        .enumerate()
        .filter(|&(_, &m)| m > threshold)
        .map(|(i, _)| i)
        .collect();
    (mean, std, outliers)
}

pub fn neuron_weight_profile(bundle: &ModelBundle, layer: usize, neuron: usize) -> Result<WeightProfile> {
    let cfg = bundle.config();
    if layer >= cfg.n_layers {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: cfg.n_layers,
        });
    }
    if neuron >= cfg.d_mlp {
        return Err(Error::IndexOutOfRange {
            what: "neuron",
            index: neuron,
            limit: cfg.d_mlp,
        });
    }
    let row = bundle.layer(layer).ff2.row(neuron);
    let (mean, std, outliers) = outlier_dimensions(row);
    let mut magnitudes: Vec<(usize, f32)> = row.iter().map(|w| w.abs()).enumerate().collect();
    magnitudes.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(WeightProfile {
        layer,
        neuron,
        magnitudes,
        mean,
        std,
        threshold: mean + OUTLIER_SIGMAS * std,
        outliers,
    })
}

/// Probability of the model's final prediction in `LL(hs^l)` for
/// `l = 0..=L`; the last entry is the model's own output probability.
pub fn prediction_probability_curve(trace: &Trace, bundle: &ModelBundle) -> Result<Vec<f64>> {
    let predicted = trace.predicted_token() as usize;
    let lens = Lens::new(bundle);
    let hidden: Vec<Vec<f32>> = (0..trace.n_layers()).map(|l| trace.residual(l).to_vec()).collect();
    let logits = lens.logits_batch(&hidden)?;
    let mut curve: Vec<f64> = (0..hidden.len())
        .map(|i| softmax_f64(logits.row(i))[predicted])
        .collect();
    curve.push(trace.next_token_distribution[predicted] as f64);
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub prompts: usize,
    pub mean: Vec<f64>,
    /// `l` such that `mean[l + 1] − mean[l]` is largest.
    pub steepest_step: usize,
}

/// Mean prediction-probability curve over a corpus.
pub fn mean_prediction_curve(bundle: &ModelBundle, corpus: &[PromptRecord], filter_correct: bool) -> Result<CurveReport> {
    let traces = corpus_traces(bundle, corpus, filter_correct)?;
    let curves = map_traces(&traces, |t| prediction_probability_curve(t, bundle));
    let mut mean = vec![0.0; bundle.config().n_layers + 1];
    for c in curves {
        for (m, v) in mean.iter_mut().zip(c?) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= traces.len() as f64;
    }
    let steps: Vec<f64> = mean.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(CurveReport {
        prompts: traces.len(),
        steepest_step: argsort_desc(&steps)[0],
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityReport {
    pub prompts: usize,
    pub mean: Vec<f64>,
    pub samples: Vec<usize>,
}

/// Per layer, the mean of `LL(ov(v_{ji}))[token_i]` over heads `j` and
/// memory positions `i` of the analysed position.
pub fn input_token_affinity(bundle: &ModelBundle, corpus: &[PromptRecord]) -> Result<AffinityReport> {
    let traces = corpus_traces(bundle, corpus, false)?;
    let lens = Lens::new(bundle);
    let n_layers = bundle.config().n_layers;
    let per_prompt = map_traces(&traces, |t| -> Result<Vec<Vec<f64>>> {
        let pos = t.analyzed_position;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, lt) in t.layers.iter().enumerate() {
            let mut vecs = Vec::new();
            let mut tokens = Vec::new();
            for j in 0..lt.n_heads {
                for i in 0..=pos {
                    vecs.push(ov_project(bundle, l, j, lt.value(i, j))?);
                    tokens.push(t.token_ids[i] as usize);
                }
            }
            let logits = lens.logits_batch(&vecs)?;
            layers.push(
                tokens
                    .iter()
                    .enumerate()
                    .map(|(r, &tok)| softmax_f64(logits.row(r))[tok])
                    .collect(),
            );
        }
        Ok(layers)
    });
    let mut sums = vec![0.0f64; n_layers];
    let mut counts = vec![0usize; n_layers];
    for p in per_prompt {
        for (l, samples) in p?.into_iter().enumerate() {
            for s in samples {
                sums[l] += s;
                counts[l] += 1;
            }
        }
    }
    Ok(AffinityReport {
        prompts: traces.len(),
        mean: sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(),
        samples: counts,
    })
}

/// Spearman rank correlation of two equally long series (mean ranks on ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
