//! Declarative run configuration: one `key = value` per line, `#` comments.
//!
//! Unset keys keep their desk-scale defaults. Keys:
//!
//! ```text
//! model.vocab model.d model.heads model.d_h model.d_ff model.layers model.layout
//! model.chunk model.window model.grid_h model.grid_w model.kernel (kt,kh,kw)
//! model.conv_mode model.rope_theta model.norm_eps model.detach_updates
//! model.lr_fast model.momentum_beta model.ns_iterations model.loss_kind model.update_rule
//! tasks.frames tasks.num_objects tasks.exceedance tasks.max_per_frame
//! tasks.count_min tasks.count_max tasks.order_len tasks.order_choice
//! train.lr_backbone train.lr_ttt_params train.optimizer train.momentum
//! train.warmup_steps train.batch_size train.stage1_steps train.stage2_steps
//! train.w_max train.grad_clip train.threads train.seed train.ablation
//! train.stage2_tasks train.eval_samples
//! ```
//!
//! The task vocabulary, grid and window follow the model's.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fast_weights::{LossKind, UpdateRule};
use crate::model::StackLayout;
use crate::spatial::ConvMode;
use crate::tasks::TaskKind;
use crate::train::{Ablation, OptimizerKind, RunConfig};

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse { line, msg: format!("`{key}`: cannot parse `{v}`") })
}

fn flag(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse { line, msg: format!("`{key}`: expected true/false, got `{v}`") }),
    }
}

fn named<T>(line: usize, key: &str, v: &str, parsed: Option<T>) -> Result<T> {
    parsed.ok_or_else(|| Error::Parse { line, msg: format!("`{key}`: unknown value `{v}`") })
}

/// Reads `key = value` lines into a map of `(line number, value)`.
fn entries(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got `{body}`") })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Parse { line, msg: "empty key".into() });
        }
        if let Some((first, _)) = out.insert(k.clone(), (line, v)) {
            return Err(Error::Parse { line, msg: format!("`{k}` already set on line {first}") });
        }
    }
    Ok(out)
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut rc = RunConfig::desk();
    let mut map = entries(text)?;
    let layers = match map.remove("model.layers") {
        Some((line, v)) => num(line, "model.layers", &v)?,
        None => rc.model.layout.len(),
    };
    rc.model.layout = StackLayout::hybrid(layers);
    for (key, (line, v)) in map {
        let (m, t, tr) = (&mut rc.model, &mut rc.tasks, &mut rc.train);
        let k = key.as_str();
        match k {
            "model.vocab" => m.vocab = num(line, k, &v)?,
            "model.d" => m.d = num(line, k, &v)?,
            "model.heads" => m.heads = num(line, k, &v)?,
            "model.d_h" => m.d_h = num(line, k, &v)?,
            "model.d_ff" => m.d_ff = num(line, k, &v)?,
            "model.layout" => m.layout = named(line, k, &v, StackLayout::parse(&v, layers))?,
            "model.chunk" => m.chunk = num(line, k, &v)?,
            "model.window" => m.window = num(line, k, &v)?,
            "model.grid_h" => m.grid_h = num(line, k, &v)?,
            "model.grid_w" => m.grid_w = num(line, k, &v)?,
            "model.kernel" => {
                let parts: Vec<usize> = v.split(',').map(|p| num(line, k, p.trim())).collect::<Result<_>>()?;
                m.kernel = parts.try_into().map_err(|_| Error::Parse { line, msg: "`model.kernel` needs three extents".into() })?;
            }
            "model.conv_mode" => m.conv_mode = named(line, k, &v, ConvMode::parse(&v))?,
            "model.rope_theta" => m.rope_theta = num(line, k, &v)?,
            "model.norm_eps" => m.norm_eps = num(line, k, &v)?,
            "model.detach_updates" => m.detach_updates = flag(line, k, &v)?,
            "model.lr_fast" => m.update.lr_fast = num(line, k, &v)?,
            "model.momentum_beta" => m.update.momentum_beta = num(line, k, &v)?,
            "model.ns_iterations" => m.update.ns_iterations = num(line, k, &v)?,
            "model.loss_kind" => m.update.loss_kind = named(line, k, &v, LossKind::parse(&v))?,
            "model.update_rule" => m.update.update_rule = named(line, k, &v, UpdateRule::parse(&v))?,
            "tasks.frames" => t.frames = num(line, k, &v)?,
            "tasks.num_objects" => t.num_objects = num(line, k, &v)?,
            "tasks.exceedance" => t.exceedance = num(line, k, &v)?,
            "tasks.max_per_frame" => t.max_per_frame = num(line, k, &v)?,
            "tasks.count_min" => t.count_min = num(line, k, &v)?,
            "tasks.count_max" => t.count_max = num(line, k, &v)?,
            "tasks.order_len" => t.order_len = num(line, k, &v)?,
            "tasks.order_choice" => t.order_choice = flag(line, k, &v)?,
            "train.lr_backbone" => tr.lr_backbone = num(line, k, &v)?,
            "train.lr_ttt_params" => tr.lr_ttt_params = num(line, k, &v)?,
            "train.optimizer" => tr.optimizer = named(line, k, &v, OptimizerKind::parse(&v))?,
            "train.momentum" => tr.momentum = num(line, k, &v)?,
            "train.warmup_steps" => tr.warmup_steps = num(line, k, &v)?,
            "train.batch_size" => tr.batch_size = num(line, k, &v)?,
            "train.stage1_steps" => tr.stage1_steps = num(line, k, &v)?,
            "train.stage2_steps" => tr.stage2_steps = num(line, k, &v)?,
            "train.w_max" => tr.w_max = num(line, k, &v)?,
            "train.grad_clip" => tr.grad_clip = num(line, k, &v)?,
            "train.threads" => tr.threads = num(line, k, &v)?,
            "train.seed" => tr.seed = num(line, k, &v)?,
            "train.ablation" => tr.ablation = Ablation::parse(&v).map_err(|e| Error::Parse { line, msg: e.to_string() })?,
            "train.stage2_tasks" => {
                tr.stage2_tasks = v.split(',').map(|p| named(line, k, p.trim(), TaskKind::parse(p.trim()))).collect::<Result<_>>()?
            }
            "train.eval_samples" => tr.eval_samples = num(line, k, &v)?,
            _ => return Err(Error::Parse { line, msg: format!("unknown key `{k}`") }),
        }
    }
    rc.tasks.vocab = rc.model.vocab;
    rc.tasks.grid_h = rc.model.grid_h;
    rc.tasks.grid_w = rc.model.grid_w;
    rc.tasks.window = rc.model.window;
    Ok(rc)
}

/// Every key, in a form [`parse_run_config`] reads back to the same value.
pub fn render_run_config(rc: &RunConfig) -> String {
    let (m, t, tr) = (&rc.model, &rc.tasks, &rc.train);
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("model.vocab", m.vocab.to_string());
    kv("model.d", m.d.to_string());
    kv("model.heads", m.heads.to_string());
    kv("model.d_h", m.d_h.to_string());
    kv("model.d_ff", m.d_ff.to_string());
    kv("model.layers", m.layout.len().to_string());
    kv("model.layout", m.layout.describe());
    kv("model.chunk", m.chunk.to_string());
    kv("model.window", m.window.to_string());
    kv("model.grid_h", m.grid_h.to_string());
    kv("model.grid_w", m.grid_w.to_string());
    kv("model.kernel", m.kernel.map(|x| x.to_string()).join(","));
    kv("model.conv_mode", m.conv_mode.name().into());
    kv("model.rope_theta", format!("{:?}", m.rope_theta));
    kv("model.norm_eps", format!("{:?}", m.norm_eps));
    kv("model.detach_updates", m.detach_updates.to_string());
    kv("model.lr_fast", format!("{:?}", m.update.lr_fast));
    kv("model.momentum_beta", format!("{:?}", m.update.momentum_beta));
    kv("model.ns_iterations", m.update.ns_iterations.to_string());
    kv("model.loss_kind", m.update.loss_kind.name().into());
    kv("model.update_rule", m.update.update_rule.name().into());
    kv("tasks.frames", t.frames.to_string());
    kv("tasks.num_objects", t.num_objects.to_string());
    kv("tasks.exceedance", t.exceedance.to_string());
    kv("tasks.max_per_frame", t.max_per_frame.to_string());
    kv("tasks.count_min", t.count_min.to_string());
    kv("tasks.count_max", t.count_max.to_string());
    kv("tasks.order_len", t.order_len.to_string());
    kv("tasks.order_choice", t.order_choice.to_string());
    kv("train.lr_backbone", format!("{:?}", tr.lr_backbone));
    kv("train.lr_ttt_params", format!("{:?}", tr.lr_ttt_params));
    kv("train.optimizer", tr.optimizer.name().into());
    kv("train.momentum", format!("{:?}", tr.momentum));
    kv("train.warmup_steps", tr.warmup_steps.to_string());
    kv("train.batch_size", tr.batch_size.to_string());
    kv("train.stage1_steps", tr.stage1_steps.to_string());
    kv("train.stage2_steps", tr.stage2_steps.to_string());
    kv("train.w_max", tr.w_max.to_string());
    kv("train.grad_clip", format!("{:?}", tr.grad_clip));
    kv("train.threads", tr.threads.to_string());
    kv("train.seed", tr.seed.to_string());
    kv("train.ablation", tr.ablation.describe());
    kv("train.stage2_tasks", tr.stage2_tasks.iter().map(|k| k.name()).collect::<Vec<_>>().join(","));
    kv("train.eval_samples", tr.eval_samples.to_string());
    s
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path)?)
}
