use std::io::Write;
use std::path::Path;

use anyhow::Context;
use lensflow_core::corpus::{load_corpus, PromptRecord};
use lensflow_core::metrics::{
    detect_regularization_neurons, ln_effect_report, run_alignment_experiment, ExperimentConfig, LnReportConfig,
    RegNeuronConfig, WhichLn, REPORT_CSV, REPORT_JSON,
};
use lensflow_core::trace::dump_trace;
use lensflow_core::{forward_at, validate_bundle, verify_trace, LensProjection, ModelBundle};
use serde_json::json;

use crate::args::{ExperimentArgs, GraphArgs, LnReportArgs, PruneArgs, RegNeuronArgs, TraceArgs};
use crate::config::ServiceConfig;
use crate::request::{encode_prompt, parse_layers, plan_graph, render_graph, GraphRequest, LayerSpec};

pub fn load_bundle(config: &ServiceConfig) -> anyhow::Result<ModelBundle> {
    lensflow_core::load_model_bundle(&config.model).with_context(|| format!("loading {}", config.model.display()))
}

fn corpus(name: Option<&str>, config: &ServiceConfig) -> anyhow::Result<Vec<PromptRecord>> {
    let name = name.unwrap_or(&config.corpus);
    Ok(load_corpus(Path::new(name))?)
}

fn print_json(out: &mut dyn Write, value: &impl serde::Serialize) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn info(bundle: &ModelBundle, out: &mut dyn Write) -> anyhow::Result<()> {
    let report = validate_bundle(bundle);
    print_json(
        out,
        &json!({
            "source": bundle.source(),
            "config": bundle.config(),
            "parameter_count": bundle.parameter_count(),
            "validation": report,
        }),
    )
}

pub fn trace(bundle: &ModelBundle, args: &TraceArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ids = encode_prompt(bundle, &args.prompt)?;
    let position = args.position.unwrap_or(ids.len() - 1);
    let trace = forward_at(bundle, &ids, position)?;
    if let Some(dir) = &args.dump {
        dump_trace(&trace, dir)?;
    }
    let tok = bundle.tokenizer();
    let tokens = ids.iter().map(|&id| tok.render_token(id)).collect::<Result<Vec<_>, _>>()?;
    let next = LensProjection::from_logits(&trace.logits, args.top.min(trace.logits.len()), None)?;
    let top: Vec<_> = next
        .top_k
        .iter()
        .map(|t| Ok(json!({"id": t.id, "token": tok.render_token(t.id)?, "prob": t.prob})))
        .collect::<lensflow_core::Result<_>>()?;
    print_json(
        out,
        &json!({
            "prompt": args.prompt,
            "ids": ids,
            "tokens": tokens,
            "analyzed_position": trace.analyzed_position,
            "next_tokens": top,
            "entropy_nats": next.entropy_nats,
            "violations": verify_trace(&trace),
        }),
    )
}

pub fn graph_request(args: &GraphArgs) -> GraphRequest {
    GraphRequest {
        prompt: args.prompt.clone(),
        layers: args.layers.clone().map(LayerSpec::Text),
        target: args.target.clone(),
        prune: prune_patch(&args.prune),
    }
}

fn prune_patch(p: &PruneArgs) -> Option<serde_json::Value> {
    let mut patch = serde_json::Map::new();
    let mut set = |k: &str, v: serde_json::Value| {
        patch.insert(k.to_string(), v);
    };
    if let Some(v) = p.keep_kv {
        set("keep_kv_per_head", v.into());
    }
    if let Some(v) = p.keep_wo {
        set("keep_wo_neurons", v.into());
    }
    if let Some(v) = p.keep_mlp {
        set("keep_mlp_neurons", v.into());
    }
    if let Some(v) = p.label_tokens {
        set("top_k_label_tokens", v.into());
    }
    if p.merge_qk {
        set("merge_qk", true.into());
    }
    if p.naive_qk {
        set("naive_qk", true.into());
    }
    (!patch.is_empty()).then_some(serde_json::Value::Object(patch))
}

pub fn graph(bundle: &ModelBundle, config: &ServiceConfig, args: &GraphArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let plan = plan_graph(bundle, &graph_request(args), &config.prune)?;
    let trace = lensflow_core::forward(bundle, &plan.ids)?;
    let json = render_graph(bundle, &trace, &plan)?;
    match &args.out {
        Some(path) => std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?,
        None => writeln!(out, "{json}")?,
    }
    Ok(())
}

pub fn experiment(
    bundle: &ModelBundle,
    config: &ServiceConfig,
    args: &ExperimentArgs,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let prompts = corpus(args.corpus.as_deref(), config)?;
    let cfg = ExperimentConfig {
        k: args.k,
        top_n_heads: args.top_heads,
        top_m_values: args.top_values,
        filter_correct: args.filter_correct,
    };
    let report = run_alignment_experiment(bundle, &prompts, cfg)?;
    report.write(&args.out)?;
    writeln!(
        out,
        "wrote {} and {} ({} of {} prompts, {} series)",
        args.out.join(REPORT_JSON).display(),
        args.out.join(REPORT_CSV).display(),
        report.prompts_used,
        report.prompts_total,
        report.series.len()
    )?;
    Ok(())
}

pub fn ln_report(bundle: &ModelBundle, config: &ServiceConfig, args: &LnReportArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let prompts = corpus(args.corpus.as_deref(), config)?;
    let which = if args.ln == 1 { WhichLn::Ln1 } else { WhichLn::Ln2 };
    let cfg = LnReportConfig {
        use_final_ln: !args.no_final_ln,
        mean_vector: args.mean_vector,
        top: args.top,
        ..LnReportConfig::new(args.layer, which)
    };
    print_json(out, &ln_effect_report(bundle, &prompts, cfg)?)
}

pub fn reg_neurons(
    bundle: &ModelBundle,
    config: &ServiceConfig,
    args: &RegNeuronArgs,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let prompts = corpus(args.corpus.as_deref(), config)?;
    let cfg = RegNeuronConfig {
        top_pool: args.pool,
        freq_threshold: args.threshold,
        layers: args.layers.as_deref().map(parse_layers).transpose()?,
        ..RegNeuronConfig::default()
    };
    print_json(out, &detect_regularization_neurons(bundle, &prompts, cfg)?)
}
