//! Entry points behind the command-line tool: training, evaluation, the
//! length sweep and the streaming trace.

pub mod checkpoint;
pub mod config;
pub mod scaling;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flops::{FlopCategory, FlopCounter};
use crate::model::{HybridConfig, LayerKind, ModelParams};
use crate::scalar::Scalar;
use crate::streaming::{stream_init, stream_step, Occupancy, SegmentKind, StreamModel};
use crate::tasks::{oracle_answer, read_jsonl, TaskKind, TaskSample};
use crate::tensor::Tensor;
use crate::train::{held_out, par_map, predict, run_two_stage, score, TaskScore};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{load_run_config, parse_run_config, render_run_config};
pub use scaling::{run_scaling, scaling_config, ScalingTable};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlopReport {
    pub by_category: BTreeMap<String, u64>,
    pub total: u64,
}

impl From<&FlopCounter> for FlopReport {
    fn from(c: &FlopCounter) -> Self {
        Self { by_category: FlopCategory::ALL.iter().map(|k| (k.name().to_string(), c.get(*k))).collect(), total: c.total() }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunReport {
    pub command: String,
    pub precision: String,
    pub scores: Vec<TaskScore>,
    pub flops: FlopReport,
    /// Largest cache (rows) reached by any layer of each kind.
    pub peak_cache: BTreeMap<String, usize>,
    pub wall_clock: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render(&self) -> String {
        let mut s = format!("{} ({})\n", self.command, self.precision);
        for sc in &self.scores {
            s += &format!("  {:<18} acc {:.3}", sc.task.name(), sc.acc);
            if let Some(m) = sc.mra {
                s += &format!("  mra {m:.3}");
            }
            s += &format!("  (n = {})\n", sc.samples);
        }
        s += &format!("  flops total {}\n", self.flops.total);
        for (k, v) in &self.flops.by_category {
            s += &format!("    {k:<12} {v}\n");
        }
        for (k, v) in &self.peak_cache {
            s += &format!("  peak cache {k:<8} {v}\n");
        }
        for (k, v) in &self.wall_clock {
            s += &format!("  time {k:<10} {v:.2}s\n");
        }
        s
    }
}

fn peak_of(peaks: &mut BTreeMap<String, usize>, occ: &[Occupancy]) {
    for o in occ {
        let rows = match o.kind {
            LayerKind::Anchor => o.full,
            _ => o.window + o.pending,
        };
        let e = peaks.entry(o.kind.name().to_string()).or_insert(0);
        *e = (*e).max(rows);
    }
}

/// Prompt FLOPs and peak cache rows from prefilling and streaming one sample.
pub fn profile_sample<F: Scalar>(params: &ModelParams<Tensor<F>>, cfg: &HybridConfig, s: &TaskSample) -> Result<(FlopCounter, BTreeMap<String, usize>)> {
    let ids = s.prompt();
    let flops = scaling::measure_prefill(params, cfg, &ids, &s.grid(ids.len()))?;
    let mut peaks = BTreeMap::new();
    let model = StreamModel::new(params, cfg)?;
    let mut st = stream_init(&model)?;
    for (seg, kind) in segments(s) {
        stream_step(&model, &mut st, seg, kind)?;
        peak_of(&mut peaks, &st.occupancy());
    }
    Ok((flops, peaks))
}

/// A sample's prompt as streaming segments: whole frames, then one text token at a time.
pub fn segments(s: &TaskSample) -> Vec<(&[usize], SegmentKind)> {
    let cells = s.grid_h * s.grid_w;
    let mut out: Vec<(&[usize], SegmentKind)> = s.stream.chunks(cells).map(|f| (f, SegmentKind::Frame)).collect();
    out.extend(s.query.chunks(1).map(|t| (t, SegmentKind::Text)));
    out
}

/// Scores `samples` per task kind with model or oracle predictions.
pub fn evaluate_samples<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    cfg: &HybridConfig,
    samples: &[TaskSample],
    threads: usize,
    oracle: bool,
) -> Result<(Vec<TaskScore>, FlopCounter)> {
    let mut by_kind: BTreeMap<TaskKind, Vec<TaskSample>> = BTreeMap::new();
    for s in samples {
        by_kind.entry(s.task_kind).or_default().push(s.clone());
    }
    let mut scores = Vec::new();
    let mut flops = FlopCounter::new();
    for (kind, group) in by_kind {
        let preds: Vec<Result<(Vec<usize>, FlopCounter)>> = par_map(&group, threads, |s| {
            let ids = s.prompt();
            let f = scaling::measure_prefill(params, cfg, &ids, &s.grid(ids.len()))?;
            let p = if oracle { oracle_answer(s)? } else { predict(params, cfg, s)? };
            Ok((p, f))
        });
        let mut pv = Vec::with_capacity(group.len());
        for r in preds {
            let (p, f) = r?;
            flops.merge(&f);
            pv.push(p);
        }
        scores.push(score(kind, &pv, &group)?);
    }
    Ok((scores, flops))
}

#[derive(Clone, Debug)]
pub struct Options {
    pub seed: Option<u64>,
    pub threads: usize,
    pub out: PathBuf,
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Reads the config, runs both stages, writes `checkpoint.sttt`,
/// `trace.jsonl` and `report.json` under `out`.
pub fn cmd_train<F: Scalar>(config: &Path, opts: &Options) -> Result<RunReport> {
    let mut rc = load_run_config(config)?;
    if let Some(s) = opts.seed {
        rc.train.seed = s;
    }
    rc.train.threads = opts.threads;
    let started = Instant::now();
    let outcome = run_two_stage::<F>(&rc, |r| log::info!("stage {} step {} window {} loss {:.4}", r.stage, r.step, r.window, r.loss))?;
    std::fs::create_dir_all(&opts.out)?;
    save_checkpoint(&opts.out.join("checkpoint.sttt"), &rc, &outcome.params)?;
    let mut trace = Vec::new();
    for r in &outcome.trace {
        serde_json::to_writer(&mut trace, r)?;
        trace.push(b'\n');
    }
    std::fs::write(opts.out.join("trace.jsonl"), trace)?;

    let sample = held_out(rc.train.stage2_tasks[0], &rc.tasks, 1)?.remove(0);
    let eval_cfg = HybridConfig { window: outcome.model.chunk, ..outcome.model.clone() };
    let (flops, peak_cache) = profile_sample(&outcome.params, &eval_cfg, &sample)?;
    let mut wall_clock = BTreeMap::new();
    for (k, v) in ["stage1", "stage2", "eval"].iter().zip(outcome.stage_seconds) {
        wall_clock.insert(k.to_string(), v);
    }
    wall_clock.insert("total".into(), started.elapsed().as_secs_f64());
    let report = RunReport {
        command: "train".into(),
        precision: F::NAME.into(),
        scores: outcome.scores,
        flops: FlopReport::from(&flops),
        peak_cache,
        wall_clock,
    };
    write_file(&opts.out.join("report.json"), &report.to_json())?;
    Ok(report)
}

/// Held-out evaluation of a checkpoint. `samples` overrides the generated
/// held-out set; `oracle` replaces model predictions with oracle answers.
pub fn cmd_eval<F: Scalar>(
    checkpoint: &Path,
    tasks: &[TaskKind],
    count: usize,
    samples: Option<&Path>,
    oracle: bool,
    opts: &Options,
) -> Result<RunReport> {
    let started = Instant::now();
    let (rc, params) = load_checkpoint::<F>(checkpoint)?;
    let model = rc.effective_model();
    let cfg = HybridConfig { window: model.chunk, ..model };
    let set: Vec<TaskSample> = match samples {
        Some(p) => read_jsonl(std::io::BufReader::new(std::fs::File::open(p)?))?,
        None => {
            let mut v = Vec::new();
            for &k in tasks {
                v.extend(held_out(k, &rc.tasks, count)?);
            }
            v
        }
    };
    if set.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    for s in &set {
        if (s.grid_h, s.grid_w) != (cfg.grid_h, cfg.grid_w) || s.stream.iter().chain(&s.query).any(|&t| t >= cfg.vocab) {
            return Err(Error::Config(format!("sample {} does not fit the checkpoint's grid or vocabulary", s.seed)));
        }
    }
    let (scores, flops) = evaluate_samples(&params, &cfg, &set, opts.threads, oracle)?;
    let (_, peak_cache) = profile_sample(&params, &cfg, &set[0])?;
    let report = RunReport {
        command: "eval".into(),
        precision: F::NAME.into(),
        scores,
        flops: FlopReport::from(&flops),
        peak_cache,
        wall_clock: BTreeMap::from([("total".to_string(), started.elapsed().as_secs_f64())]),
    };
    write_file(&opts.out.join("report.json"), &report.to_json())?;
    Ok(report)
}

/// Length sweep of the checkpoint's model (or the dedicated scaling
/// configuration when no checkpoint is given) against an all-anchor stack.
pub fn cmd_scaling<F: Scalar>(checkpoint: Option<&Path>, lengths: &[usize], opts: &Options) -> Result<ScalingTable> {
    use rand::SeedableRng;
    let seed = opts.seed.unwrap_or(0);
    let (cfg, params) = match checkpoint {
        Some(p) => {
            let (rc, params) = load_checkpoint::<F>(p)?;
            (rc.effective_model(), params)
        }
        None => {
            let cfg = scaling_config(64);
            let params = ModelParams::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))?;
            (cfg, params)
        }
    };
    let cfg = HybridConfig { window: cfg.chunk, ..cfg };
    let full_cfg = scaling::full_attention(&cfg);
    let full = ModelParams::init(&full_cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))?;
    let table = run_scaling(&params, &full, &cfg, lengths)?;
    write_file(&opts.out.join("scaling.json"), &serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEvent {
    pub sample: usize,
    pub step: usize,
    pub kind: &'static str,
    pub position: usize,
    /// Greedy next token after the segment.
    pub output_id: usize,
    pub output_logit: f64,
    pub occupancy: Vec<Occupancy>,
    /// Layers whose pending buffer was folded into the fast weights.
    pub flushes: usize,
}

/// Streams every sample of the file and emits one record per segment.
pub fn cmd_stream_demo<F: Scalar>(checkpoint: &Path, stream_file: &Path, mut sink: impl Write) -> Result<Vec<TraceEvent>> {
    let (rc, params) = load_checkpoint::<F>(checkpoint)?;
    let model_cfg = rc.effective_model();
    let cfg = HybridConfig { window: model_cfg.chunk, ..model_cfg };
    let samples = read_jsonl(std::io::BufReader::new(std::fs::File::open(stream_file)?))?;
    let model = StreamModel::new(&params, &cfg)?;
    let mut events = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if (s.grid_h, s.grid_w) != (cfg.grid_h, cfg.grid_w) {
            return Err(Error::Config(format!("sample {i} grid {}×{} differs from the model's", s.grid_h, s.grid_w)));
        }
        let mut st = stream_init(&model)?;
        for (step, (seg, kind)) in segments(s).into_iter().enumerate() {
            let out = stream_step(&model, &mut st, seg, kind)?;
            let last = out.hidden.slice_rows(out.hidden.rows() - 1, 1);
            let logits = model.logits(&last)?;
            let row = logits.row(0);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let ev = TraceEvent {
                sample: i,
                step,
                kind: if kind == SegmentKind::Frame { "frame" } else { "text" },
                position: st.position,
                output_id: best,
                output_logit: row[best].to_f64().unwrap(),
                occupancy: st.occupancy(),
                flushes: out.flushes,
            };
            serde_json::to_writer(&mut sink, &ev)?;
            sink.write_all(b"\n")?;
            events.push(ev);
        }
    }
    Ok(events)
}
