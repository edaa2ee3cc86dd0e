//! Two-stage progressive training and the ablation harness.
//!
//! Stage 1 fits dense scene descriptions while the attention window anneals
//! from `w_max` down to the chunk size. Stage 2 fits sparse QA with the
//! window pinned to the chunk size. Gradients flow through every fast-weight
//! update, so the slow weights learn how the memory should be written.

use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{is_ttt_param, logits_var, stack_forward_var, HybridConfig, LayerKind, ModelParams, StackLayout};
use crate::scalar::Scalar;
use crate::tasks::{decode_number, eval_acc, eval_mra, generate, TaskConfig, TaskKind, TaskSample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AnnealSchedule {
    pub w_max: usize,
    pub w_min: usize,
    pub total_steps: usize,
    /// Emitted windows are multiples of this (tokens per frame).
    pub align: usize,
}

impl AnnealSchedule {
    pub fn new(w_max: usize, w_min: usize, total_steps: usize, align: usize) -> Result<Self> {
        let s = Self { w_max, w_min, total_steps, align };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.w_min == 0 || self.align == 0 || self.w_max < self.w_min {
            return Err(Error::Config(format!("anneal schedule needs w_max ≥ w_min ≥ 1, got {} → {}", self.w_max, self.w_min)));
        }
        if self.w_min % self.align != 0 {
            return Err(Error::Config(format!("w_min {} is not a multiple of {}", self.w_min, self.align)));
        }
        Ok(())
    }
}

/// Linear from `w_max` to `w_min` over `total_steps`, rounded to the nearest
/// multiple of `align`, then held at `w_min`.
pub fn anneal_window(step: usize, s: &AnnealSchedule) -> Result<usize> {
    s.validate()?;
    if step >= s.total_steps {
        return Ok(s.w_min);
    }
    let frac = step as f64 / s.total_steps as f64;
    let w = s.w_max as f64 - (s.w_max - s.w_min) as f64 * frac;
    let aligned = (w / s.align as f64).round() as usize * s.align;
    Ok(aligned.clamp(s.w_min, s.w_max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum WindowPlan {
    Fixed(usize),
    Anneal(AnnealSchedule),
}

impl WindowPlan {
    pub fn at(&self, step: usize) -> Result<usize> {
        match self {
            WindowPlan::Fixed(w) => Ok(*w),
            WindowPlan::Anneal(s) => anneal_window(step, s),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Ablation {
    /// Convolution kernels stay at their Dirac initialization.
    pub no_sp_mechanism: bool,
    /// Stage 1 is skipped.
    pub no_dense_stage: bool,
    /// Anchor layers become TTT layers.
    pub no_hybrid: bool,
    /// Every layer is plain sliding-window attention.
    pub swa_only: bool,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        let mut a = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            match part {
                "no_sp_mechanism" => a.no_sp_mechanism = true,
                "no_dense_stage" => a.no_dense_stage = true,
                "no_hybrid" => a.no_hybrid = true,
                "swa_only" => a.swa_only = true,
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(a)
    }

    pub fn describe(&self) -> String {
        let mut v = Vec::new();
        for (on, name) in [
            (self.no_sp_mechanism, "no_sp_mechanism"),
            (self.no_dense_stage, "no_dense_stage"),
            (self.no_hybrid, "no_hybrid"),
            (self.swa_only, "swa_only"),
        ] {
            if on {
                v.push(name);
            }
        }
        if v.is_empty() {
            "none".into()
        } else {
            v.join(",")
        }
    }

    /// Layout after the layout-changing flags.
    pub fn layout(&self, base: &StackLayout) -> StackLayout {
        if self.swa_only {
            StackLayout::uniform(base.len(), LayerKind::Window)
        } else if self.no_hybrid {
            StackLayout::uniform(base.len(), LayerKind::Ttt)
        } else {
            base.clone()
        }
    }

    pub fn trainable(&self, name: &str) -> bool {
        !(self.no_sp_mechanism && name.contains(".ttt.conv_"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OptimizerKind {
    Momentum,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "momentum" => Some(Self::Momentum),
            "adam" => Some(Self::Adam),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Momentum => "momentum",
            Self::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_ttt_params: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub w_max: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub threads: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub stage2_tasks: Vec<TaskKind>,
    pub eval_samples: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr_backbone: 3e-3,
            lr_ttt_params: 1e-2,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            warmup_steps: 50,
            batch_size: 8,
            stage1_steps: 500,
            stage2_steps: 1000,
            w_max: 128,
            grad_clip: 1.0,
            threads: 1,
            seed: 0,
            ablation: Ablation::default(),
            stage2_tasks: vec![TaskKind::Recall, TaskKind::Count, TaskKind::Order],
            eval_samples: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_backbone > 0.0 && self.lr_ttt_params > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("batch_size and threads must be at least 1".into()));
        }
        if self.stage2_tasks.is_empty() || self.stage2_tasks.contains(&TaskKind::DenseDescription) {
            return Err(Error::Config("stage 2 needs at least one QA task and no dense descriptions".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be nonnegative".into()));
        }
        Ok(())
    }

    /// Multiplier on both learning rates: linear warmup, then cosine to 0.
    pub fn lr_factor(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Maps `items` to results on up to `threads` scoped threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(per).map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Answer-token cross-entropy of one sample and its gradient for every
/// parameter (zeros for frozen ones), in [`ModelParams::named`] order.
pub fn sample_loss_grad<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    cfg: &HybridConfig,
    sample: &TaskSample,
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(f64, Vec<Tensor<F>>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, trainable);
    let (ids, rows) = sample.teacher_forced();
    let out = stack_forward_var(&tape, &bound, &ids, &sample.grid(ids.len()), cfg)?;
    let logits = logits_var(&tape, &bound, &out.hidden, &rows, cfg.norm_eps)?;
    let loss = tape.cross_entropy(&logits, &sample.answer)?;
    let grads = tape.backward(&loss)?;
    Ok((loss.item().to_f64().unwrap(), bound.named().into_iter().map(|(_, v)| grads.get(v)).collect()))
}

/// Mean loss and mean gradient over a batch. Per-sample gradients are
/// summed in sample order, so the result does not depend on `threads`.
pub fn batch_loss_grad<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    cfg: &HybridConfig,
    batch: &[TaskSample],
    trainable: &(dyn Fn(&str) -> bool + Sync),
    threads: usize,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let results = par_map(batch, threads, |s| sample_loss_grad(params, cfg, s, trainable));
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<F>>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let inv = F::one() / F::of_usize(batch.len());
    let grads = total.unwrap_or_default().into_iter().map(|g| g.scale(inv)).collect();
    Ok((loss / batch.len() as f64, grads))
}

/// Slow-weight optimizer over parameters in [`ModelParams::named`] order.
pub struct Optimizer<F> {
    kind: OptimizerKind,
    momentum: f64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
    steps: usize,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, momentum: f64, params: &ModelParams<Tensor<F>>) -> Self {
        let zeros: Vec<Tensor<F>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let second = if kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() };
        Self { kind, momentum, first: zeros, second, steps: 0 }
    }

    /// `lrs[i]` is the learning rate for parameter `i`; zero leaves it untouched.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lrs: &[f64]) {
        self.steps += 1;
        let beta = F::of(self.momentum);
        for i in 0..params.len() {
            if lrs[i] == 0.0 {
                continue;
            }
            let lr = F::of(lrs[i]);
            let (g, m) = (grads[i].data(), self.first[i].data_mut());
            match self.kind {
                OptimizerKind::Momentum => {
                    let p = params[i].data_mut();
                    for j in 0..p.len() {
                        m[j] = beta * m[j] + g[j];
                        p[j] = p[j] - lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    let b2 = F::of(0.999);
                    let eps = F::of(1e-8);
                    let c1 = F::one() - beta.powi(self.steps as i32);
                    let c2 = F::one() - b2.powi(self.steps as i32);
                    let v = self.second[i].data_mut();
                    let p = params[i].data_mut();
                    for j in 0..p.len() {
                        m[j] = beta * m[j] + (F::one() - beta) * g[j];
                        v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                        p[j] = p[j] - lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn global_norm<F: Scalar>(grads: &[Tensor<F>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt()
}

fn into_vec<F: Scalar>(params: ModelParams<Tensor<F>>) -> (Vec<Tensor<F>>, ModelParams<Tensor<F>>) {
    let flat = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    (flat, params)
}

fn from_vec<F: Scalar>(template: &ModelParams<Tensor<F>>, flat: &[Tensor<F>]) -> ModelParams<Tensor<F>> {
    let mut i = 0;
    template.map(|_, _| {
        i += 1;
        flat[i - 1].clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub stage: usize,
    pub step: usize,
    pub window: usize,
    pub lr_factor: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Runs `steps` optimizer steps over `data`, cycling through it in order.
/// Step `s` uses samples `s·B .. (s+1)·B` (mod the dataset length).
#[allow(clippy::too_many_arguments)]
pub fn train_stage<F: Scalar>(
    params: ModelParams<Tensor<F>>,
    cfg: &HybridConfig,
    data: &[TaskSample],
    tcfg: &TrainConfig,
    plan: &WindowPlan,
    steps: usize,
    stage: usize,
    mut on_step: impl FnMut(&TraceRecord),
) -> Result<(ModelParams<Tensor<F>>, Vec<TraceRecord>)> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if steps == 0 {
        return Ok((params, Vec::new()));
    }
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let ablation = tcfg.ablation;
    let trainable = move |n: &str| ablation.trainable(n);
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.momentum, &params);
    let (mut flat, template) = into_vec(params);
    let mut trace = Vec::with_capacity(steps);
    let b = tcfg.batch_size;
    for step in 0..steps {
        let window = plan.at(step)?;
        let step_cfg = HybridConfig { window, ..cfg.clone() };
        let batch: Vec<TaskSample> = (0..b).map(|j| data[(step * b + j) % data.len()].clone()).collect();
        let current = from_vec(&template, &flat);
        let (loss, mut grads) = batch_loss_grad(&current, &step_cfg, &batch, &trainable, tcfg.threads).map_err(|e| {
            if e.is_numeric() {
                Error::Divergence { step, detail: e.to_string() }
            } else {
                e
            }
        })?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss {loss}") });
        }
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::Divergence { step, detail: format!("gradient norm {norm}") });
        }
        if tcfg.grad_clip > 0.0 && norm > tcfg.grad_clip {
            let s = F::of(tcfg.grad_clip / norm);
            grads.iter_mut().for_each(|g| *g = g.scale(s));
        }
        let factor = tcfg.lr_factor(step, steps);
        let lrs: Vec<f64> = names
            .iter()
            .map(|n| {
                if !trainable(n) {
                    0.0
                } else if is_ttt_param(n) {
                    tcfg.lr_ttt_params * factor
                } else {
                    tcfg.lr_backbone * factor
                }
            })
            .collect();
        opt.step(&mut flat, &grads, &lrs);
        let rec = TraceRecord { stage, step, window, lr_factor: factor, loss, grad_norm: norm };
        on_step(&rec);
        trace.push(rec);
    }
    Ok((from_vec(&template, &flat), trace))
}

/// Greedy decoding of `len` tokens after the sample's prompt.
pub fn greedy_decode<F: Scalar>(params: &ModelParams<Tensor<F>>, cfg: &HybridConfig, sample: &TaskSample, len: usize) -> Result<Vec<usize>> {
    let mut ids = sample.prompt();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let tape = Tape::no_grad();
        let bound = params.bind(&tape, |_| false);
        let h = stack_forward_var(&tape, &bound, &ids, &sample.grid(ids.len()), cfg)?;
        let logits = logits_var(&tape, &bound, &h.hidden, &[ids.len() - 1], cfg.norm_eps)?;
        let row = logits.value().row(0);
        let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        out.push(best);
        ids.push(best);
    }
    Ok(out)
}

/// Choice questions are answered by the best of the four letters; every
/// other question by greedy decoding.
pub fn predict<F: Scalar>(params: &ModelParams<Tensor<F>>, cfg: &HybridConfig, sample: &TaskSample) -> Result<Vec<usize>> {
    use crate::tasks::vocab::{CHOICE, NUM_CHOICES, Q_CHOICE};
    if sample.query.first() != Some(&Q_CHOICE) {
        return greedy_decode(params, cfg, sample, sample.answer.len());
    }
    let ids = sample.prompt();
    let tape = Tape::no_grad();
    let bound = params.bind(&tape, |_| false);
    let h = stack_forward_var(&tape, &bound, &ids, &sample.grid(ids.len()), cfg)?;
    let logits = logits_var(&tape, &bound, &h.hidden, &[ids.len() - 1], cfg.norm_eps)?;
    let row = logits.value().row(0);
    let best = (0..NUM_CHOICES).fold(0, |b, j| if row[CHOICE + j] > row[CHOICE + b] { j } else { b });
    Ok(vec![CHOICE + best])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: TaskKind,
    pub samples: usize,
    pub acc: f64,
    /// Count task only.
    pub mra: Option<f64>,
}

/// Scores already decoded predictions.
pub fn score(kind: TaskKind, predictions: &[Vec<usize>], samples: &[TaskSample]) -> Result<TaskScore> {
    let answers: Vec<Vec<usize>> = samples.iter().map(|s| s.answer.clone()).collect();
    let acc = eval_acc(predictions, &answers)?;
    let mra = if kind == TaskKind::Count {
        let pred: Vec<f64> = predictions.iter().map(|p| decode_number(p).unwrap_or(0) as f64).collect();
        let truth: Vec<f64> = samples.iter().map(|s| s.answer_number().unwrap_or(0) as f64).collect();
        Some(eval_mra(&pred, &truth)?)
    } else {
        None
    };
    Ok(TaskScore { task: kind, samples: samples.len(), acc, mra })
}

pub fn evaluate<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    cfg: &HybridConfig,
    samples: &[TaskSample],
    threads: usize,
) -> Result<TaskScore> {
    let kind = samples.first().map(|s| s.task_kind).ok_or_else(|| Error::Config("nothing to evaluate".into()))?;
    let preds: Result<Vec<Vec<usize>>> = par_map(samples, threads, |s| predict(params, cfg, s)).into_iter().collect();
    score(kind, &preds?, samples)
}

/// Disjoint seed ranges for training stages and held-out evaluation.
pub fn train_seed(run_seed: u64, stage: u64, i: u64) -> u64 {
    (run_seed << 34) | (stage << 32) | i
}

pub fn eval_seed(i: u64) -> u64 {
    (1 << 63) | i
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub model: HybridConfig,
    pub tasks: TaskConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        let tasks = TaskConfig::desk();
        Self { model: HybridConfig::desk(tasks.vocab), tasks, train: TrainConfig::desk() }
    }

    /// The model configuration after the layout-changing ablation flags.
    pub fn effective_model(&self) -> HybridConfig {
        HybridConfig { layout: self.train.ablation.layout(&self.model.layout), ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tasks.validate()?;
        self.train.validate()?;
        if self.tasks.vocab > self.model.vocab {
            return Err(Error::Config(format!("task vocab {} exceeds model vocab {}", self.tasks.vocab, self.model.vocab)));
        }
        if (self.tasks.grid_h, self.tasks.grid_w) != (self.model.grid_h, self.model.grid_w) {
            return Err(Error::Config("task grid and model grid differ".into()));
        }
        if self.model.chunk % self.tasks.cells() != 0 {
            return Err(Error::Config(format!("chunk {} does not hold whole frames of {}", self.model.chunk, self.tasks.cells())));
        }
        if self.model.window != self.model.chunk {
            return Err(Error::Config("stage 2 runs with window = chunk; set them equal".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct RunOutcome<F: Scalar> {
    #[serde(skip)]
    pub params: ModelParams<Tensor<F>>,
    #[serde(skip)]
    pub model: HybridConfig,
    pub trace: Vec<TraceRecord>,
    pub scores: Vec<TaskScore>,
    pub stage_seconds: [f64; 3],
}

impl<F: Scalar> RunOutcome<F> {
    pub fn score(&self, kind: TaskKind) -> Option<&TaskScore> {
        self.scores.iter().find(|s| s.task == kind)
    }
}

pub fn held_out(kind: TaskKind, tasks: &TaskConfig, n: usize) -> Result<Vec<TaskSample>> {
    (0..n as u64).map(|i| generate(kind, tasks, eval_seed(i))).collect()
}

/// Stage 1 on dense descriptions with window annealing (unless ablated),
/// stage 2 on the QA mixture with `w = b`, then held-out evaluation.
pub fn run_two_stage<F: Scalar>(rc: &RunConfig, mut on_step: impl FnMut(&TraceRecord)) -> Result<RunOutcome<F>> {
    use rand::SeedableRng;
    rc.validate()?;
    let t = &rc.train;
    let model = rc.effective_model();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(t.seed);
    let mut params = ModelParams::<Tensor<F>>::init(&model, &mut rng)?;
    let mut trace = Vec::new();
    let mut secs = [0.0; 3];
    let clock = std::time::Instant::now();

    if !t.ablation.no_dense_stage && t.stage1_steps > 0 {
        let n = t.stage1_steps * t.batch_size;
        let data: Result<Vec<_>> =
            (0..n as u64).map(|i| generate(TaskKind::DenseDescription, &rc.tasks, train_seed(t.seed, 1, i))).collect();
        let schedule = AnnealSchedule::new(t.w_max.max(model.chunk), model.chunk, t.stage1_steps, rc.tasks.cells())?;
        let (p, tr) = train_stage(params, &model, &data?, t, &WindowPlan::Anneal(schedule), t.stage1_steps, 1, &mut on_step)?;
        params = p;
        trace.extend(tr);
    }
    secs[0] = clock.elapsed().as_secs_f64();

    if t.stage2_steps > 0 {
        let n = t.stage2_steps * t.batch_size;
        let k = t.stage2_tasks.len();
        let data: Result<Vec<_>> =
            (0..n).map(|i| generate(t.stage2_tasks[i % k], &rc.tasks, train_seed(t.seed, 2, i as u64))).collect();
        let (p, tr) = train_stage(params, &model, &data?, t, &WindowPlan::Fixed(model.chunk), t.stage2_steps, 2, &mut on_step)?;
        params = p;
        trace.extend(tr);
    }
    secs[1] = clock.elapsed().as_secs_f64() - secs[0];

    let mut scores = Vec::new();
    let eval_cfg = HybridConfig { window: model.chunk, ..model.clone() };
    for &kind in &t.stage2_tasks {
        let samples = held_out(kind, &rc.tasks, t.eval_samples)?;
        scores.push(evaluate(&params, &eval_cfg, &samples, t.threads)?);
    }
    secs[2] = clock.elapsed().as_secs_f64() - secs[0] - secs[1];
    Ok(RunOutcome { params, model, trace, scores, stage_seconds: secs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::stack_forward;
    use crate::tasks::gen_recall_stream;

    fn init(cfg: &HybridConfig, seed: u64) -> ModelParams<Tensor<f64>> {
        use rand::SeedableRng;
        ModelParams::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn tiny_run() -> RunConfig {
        let tasks = TaskConfig {
            vocab: 56,
            grid_h: 2,
            grid_w: 2,
            frames: 6,
            num_objects: 4,
            exceedance: 1,
            window: 4,
            max_per_frame: 1,
            count_min: 1,
            count_max: 2,
            order_len: 2,
            order_choice: false,
        };
        let mut model = HybridConfig::tiny(56, 8, 2, 4);
        model.layout = StackLayout::parse("ttt,anchor", 2).unwrap();
        let train = TrainConfig {
            stage1_steps: 3,
            stage2_steps: 3,
            batch_size: 2,
            warmup_steps: 1,
            w_max: 8,
            eval_samples: 4,
            ..TrainConfig::desk()
        };
        RunConfig { model, tasks, train }
    }

    #[test]
    fn reference_schedule_endpoints() {
        let s = AnnealSchedule::new(5600, 2648, 1000, 8).unwrap();
        assert_eq!(anneal_window(0, &s).unwrap(), 5600);
        assert_eq!(anneal_window(1000, &s).unwrap(), 2648);
        assert_eq!(anneal_window(5000, &s).unwrap(), 2648);
    }

    #[test]
    fn midpoint_and_monotone() {
        let s = AnnealSchedule::new(64, 32, 10, 16).unwrap();
        assert_eq!(anneal_window(5, &s).unwrap(), 48);
        let ws: Vec<usize> = (0..15).map(|i| anneal_window(i, &s).unwrap()).collect();
        assert!(ws.windows(2).all(|p| p[1] <= p[0]));
        assert!(ws.iter().all(|w| w % 16 == 0 && *w >= 32));
        assert!(AnnealSchedule::new(16, 32, 10, 16).is_err());
    }

    #[test]
    fn warmup_then_cosine() {
        let t = TrainConfig { warmup_steps: 10, ..TrainConfig::desk() };
        assert!((t.lr_factor(0, 100) - 0.1).abs() < 1e-12);
        assert!((t.lr_factor(9, 100) - 1.0).abs() < 1e-12);
        assert!((t.lr_factor(10, 100) - 1.0).abs() < 1e-12);
        assert!(t.lr_factor(100, 100).abs() < 1e-12);
        assert!(t.lr_factor(55, 100) < t.lr_factor(30, 100));
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let rc = tiny_run();
        let m = rc.effective_model();
        let p = init(&m, 0);
        let data = vec![gen_recall_stream(&rc.tasks, 0).unwrap()];
        let (q, tr) = train_stage(p.clone(), &m, &data, &rc.train, &WindowPlan::Fixed(4), 0, 2, |_| {}).unwrap();
        assert!(tr.is_empty());
        assert_eq!(p, q);
    }

    #[test]
    fn batch_gradient_independent_of_threads() {
        let rc = tiny_run();
        let m = rc.effective_model();
        let p = init(&m, 1);
        let batch = crate::tasks::generate_many(TaskKind::Recall, &rc.tasks, 0..5).unwrap();
        let (l1, g1) = batch_loss_grad(&p, &m, &batch, &|_| true, 1).unwrap();
        let (l3, g3) = batch_loss_grad(&p, &m, &batch, &|_| true, 3).unwrap();
        assert_eq!(l1, l3);
        assert_eq!(g1, g3);
    }

    #[test]
    fn frozen_kernels_get_no_update() {
        let mut rc = tiny_run();
        rc.train.ablation.no_sp_mechanism = true;
        rc.train.ablation.no_dense_stage = true;
        let out = run_two_stage::<f64>(&rc, |_| {}).unwrap();
        let init = init(&rc.effective_model(), 0);
        let (a, b) = (out.params.named(), init.named());
        let mut moved = false;
        for ((n, x), (_, y)) in a.iter().zip(&b) {
            if n.contains(".ttt.conv_") {
                assert_eq!(x, y, "{n}");
            } else if x != y {
                moved = true;
            }
        }
        assert!(moved);
        assert!(out.trace.iter().all(|r| r.stage == 2));
    }

    #[test]
    fn windows_anneal_in_stage1_and_stay_at_b() {
        let out = run_two_stage::<f64>(&tiny_run(), |_| {}).unwrap();
        let s1: Vec<usize> = out.trace.iter().filter(|r| r.stage == 1).map(|r| r.window).collect();
        assert_eq!(s1.len(), 3);
        assert_eq!(s1[0], 8);
        assert!(s1.windows(2).all(|p| p[1] <= p[0]));
        assert!(out.trace.iter().filter(|r| r.stage == 2).all(|r| r.window == 4));
        assert_eq!(out.scores.len(), 3);
    }

    #[test]
    fn ablation_layouts_and_isolation() {
        let rc = tiny_run();
        let base = init(&rc.model, 0);
        let mut nh = rc.clone();
        nh.train.ablation.no_hybrid = true;
        let m = nh.effective_model();
        assert_eq!(m.layout.count(LayerKind::Anchor), 0);
        let p = init(&m, 0);
        // Only the anchor layer changed: it gained TTT parameters.
        assert_eq!(p.layers[0], base.layers[0]);
        assert_eq!(p.layers[1].wqkv, base.layers[1].wqkv);
        assert!(p.num_scalars() > base.num_scalars());
        // At init the zero gate hides the new TTT branch.
        let s = gen_recall_stream(&rc.tasks, 3).unwrap();
        let (ids, _) = s.teacher_forced();
        let (h0, _) = stack_forward(&base, &ids, &s.grid(ids.len()), &rc.model).unwrap();
        let (h1, _) = stack_forward(&p, &ids, &s.grid(ids.len()), &m).unwrap();
        assert!(h0.max_abs_diff(&h1) > 0.0, "anchor → TTT changes attention from full to windowed");

        let mut swa = rc.clone();
        swa.train.ablation.swa_only = true;
        let ms = swa.effective_model();
        let ps = init(&ms, 0);
        assert!(ps.layers.iter().all(|l| l.ttt.is_none()));
        assert_eq!(ps.tok_emb, base.tok_emb);

        let mut nsp = rc.clone();
        nsp.train.ablation.no_sp_mechanism = true;
        let pn = init(&nsp.effective_model(), 0);
        assert_eq!(pn, base);
        assert!(!nsp.train.ablation.trainable("layers.0.ttt.conv_q"));
        assert!(nsp.train.ablation.trainable("layers.0.ttt.gate"));
    }

    #[test]
    fn eval_is_repeatable() {
        let rc = tiny_run();
        let p = init(&rc.model, 0);
        let s = gen_recall_stream(&rc.tasks, 5).unwrap();
        let a = greedy_decode(&p, &rc.model, &s, 2).unwrap();
        let b = greedy_decode(&p, &rc.model, &s, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_reduces_loss() {
        let mut rc = tiny_run();
        rc.train.ablation.no_dense_stage = true;
        rc.train.stage2_steps = 40;
        rc.train.batch_size = 4;
        rc.train.stage2_tasks = vec![TaskKind::Recall];
        let out = run_two_stage::<f64>(&rc, |_| {}).unwrap();
        let first: f64 = out.trace[..5].iter().map(|r| r.loss).sum();
        let last: f64 = out.trace[35..].iter().map(|r| r.loss).sum();
        assert!(last < first, "{first} → {last}");
    }

    #[test]
    fn ablation_parse_round_trip() {
        let a = Ablation::parse("no_hybrid, no_dense_stage").unwrap();
        assert!(a.no_hybrid && a.no_dense_stage && !a.swa_only);
        assert_eq!(Ablation::parse(&a.describe()).unwrap(), a);
        assert_eq!(Ablation::parse("none").unwrap(), Ablation::default());
        assert!(Ablation::parse("bogus").is_err());
    }
}
