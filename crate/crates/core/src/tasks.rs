//! Synthetic spatial-stream tasks and their metrics.
//!
//! A stream is `frames` frames of `H·W` cell tokens in raster order. Empty
//! cells carry the scene's background token; occupied cells carry an object
//! token. Streams start at a frame boundary, so with `H·W` dividing the chunk
//! size every chunk holds whole frames. The query and answer follow the
//! last frame.
//!
//! Every generator keeps the positions of the tokens that determine its
//! answer. [`oracle_answer`] recomputes answers from the stream and query
//! alone and shares no code with the generators.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::SpatialGrid;

/// Token ids.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const SEP: usize = 1;
    pub const Q_RECALL: usize = 2;
    pub const Q_COUNT: usize = 3;
    pub const Q_ORDER: usize = 4;
    pub const Q_CHOICE: usize = 5;
    pub const Q_DESCRIBE: usize = 6;
    pub const END: usize = 7;
    pub const REL_LEFT: usize = 8;
    pub const REL_RIGHT: usize = 9;
    pub const REL_ABOVE: usize = 10;
    pub const CHOICE: usize = 11;
    pub const DIGIT: usize = 15;
    pub const SCENE: usize = 25;
    pub const BG: usize = 29;
    pub const CELL: usize = 33;
    pub const OBJ: usize = 49;

    pub const NUM_CHOICES: usize = 4;
    pub const NUM_SCENES: usize = 4;
    pub const MAX_CELLS: usize = 16;

    pub fn min_size(num_objects: usize) -> usize {
        OBJ + num_objects
    }

    pub fn is_object(t: usize) -> bool {
        t >= OBJ
    }
}

use vocab::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Recall,
    Count,
    Order,
    DenseDescription,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Recall, TaskKind::Count, TaskKind::Order, TaskKind::DenseDescription];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Recall => "recall",
            TaskKind::Count => "count",
            TaskKind::Order => "order",
            TaskKind::DenseDescription => "dense_description",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub vocab: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: usize,
    pub num_objects: usize,
    /// Evidence lies more than `exceedance · window` tokens before the query.
    pub exceedance: usize,
    pub window: usize,
    /// Distractor objects per frame are drawn uniformly from `0..=max_per_frame`.
    pub max_per_frame: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub order_len: usize,
    /// Multiple-choice variant of the order task.
    pub order_choice: bool,
}

impl TaskConfig {
    /// 4×4 grid, 12 frames, evidence beyond 4 windows of 32 tokens.
    pub fn desk() -> Self {
        Self {
            vocab: 64,
            grid_h: 4,
            grid_w: 4,
            frames: 12,
            num_objects: 12,
            exceedance: 4,
            window: 32,
            max_per_frame: 2,
            count_min: 1,
            count_max: 4,
            order_len: 3,
            order_choice: false,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn stream_len(&self) -> usize {
        self.frames * self.cells()
    }

    /// Frames whose every token lies more than `exceedance · window` before
    /// the query.
    pub fn eligible_frames(&self) -> usize {
        let gap = self.exceedance * self.window;
        let n = self.stream_len();
        (0..self.frames).filter(|&t| n - ((t + 1) * self.cells() - 1) > gap).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Task(m));
        if self.grid_h == 0 || self.grid_w == 0 || self.cells() > MAX_CELLS {
            return bad(format!("grid {}×{} must have 1..={MAX_CELLS} cells", self.grid_h, self.grid_w));
        }
        if self.frames == 0 || self.num_objects == 0 {
            return bad("need at least one frame and one object symbol".into());
        }
        if self.vocab < min_size(self.num_objects) {
            return bad(format!("vocab {} too small for {} objects (need {})", self.vocab, self.num_objects, min_size(self.num_objects)));
        }
        if self.stream_len() < self.exceedance * self.window {
            return bad(format!(
                "{} frames of {} tokens cannot exceed {} windows of {}",
                self.frames,
                self.cells(),
                self.exceedance,
                self.window
            ));
        }
        if self.eligible_frames() == 0 {
            return bad("no frame lies far enough before the query".into());
        }
        if self.max_per_frame + 1 > self.cells() {
            return bad(format!("{} objects per frame do not fit {} cells", self.max_per_frame + 1, self.cells()));
        }
        if self.count_min > self.count_max {
            return bad("count_min > count_max".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub seed: u64,
    pub task_kind: TaskKind,
    pub grid_h: usize,
    pub grid_w: usize,
    pub stream: Vec<usize>,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    /// Stream positions of the answer-determining tokens.
    #[serde(default)]
    pub evidence: Vec<usize>,
}

impl TaskSample {
    pub fn frames(&self) -> usize {
        self.stream.len() / (self.grid_h * self.grid_w)
    }

    /// Grid for the first `n ≥ stream.len()` tokens of any continuation.
    pub fn grid(&self, n: usize) -> SpatialGrid {
        SpatialGrid::contiguous(n, 0, self.frames(), self.grid_h, self.grid_w).expect("stream is whole frames")
    }

    /// `stream ++ query`.
    pub fn prompt(&self) -> Vec<usize> {
        let mut p = self.stream.clone();
        p.extend_from_slice(&self.query);
        p
    }

    /// Teacher-forced input and the answer targets: the model reads
    /// `stream ++ query ++ answer[..k−1]` and the last `k` rows predict the answer.
    pub fn teacher_forced(&self) -> (Vec<usize>, Vec<usize>) {
        let mut ids = self.prompt();
        ids.extend_from_slice(&self.answer[..self.answer.len() - 1]);
        let first = self.stream.len() + self.query.len() - 1;
        (ids, (first..first + self.answer.len()).collect())
    }

    /// For count samples, the number the answer encodes.
    pub fn answer_number(&self) -> Option<usize> {
        decode_number(&self.answer)
    }
}

pub fn encode_number(k: usize) -> Vec<usize> {
    k.to_string().bytes().map(|b| DIGIT + (b - b'0') as usize).collect()
}

/// Reads leading digit tokens; `None` without any.
pub fn decode_number(tokens: &[usize]) -> Option<usize> {
    let digits: Vec<usize> = tokens.iter().take_while(|&&t| (DIGIT..DIGIT + 10).contains(&t)).map(|t| t - DIGIT).collect();
    if digits.is_empty() {
        return None;
    }
    Some(digits.iter().fold(0usize, |acc, &d| acc.saturating_mul(10).saturating_add(d)))
}

struct Canvas {
    tokens: Vec<usize>,
    cells: usize,
}

impl Canvas {
    fn new(cfg: &TaskConfig, scene: usize) -> Self {
        Self { tokens: vec![BG + scene; cfg.stream_len()], cells: cfg.cells() }
    }

    fn free_cells(&self, frame: usize) -> Vec<usize> {
        (0..self.cells).filter(|&c| !is_object(self.tokens[frame * self.cells + c])).collect()
    }

    fn place(&mut self, frame: usize, cell: usize, obj: usize) -> usize {
        let pos = frame * self.cells + cell;
        self.tokens[pos] = OBJ + obj;
        pos
    }
}

/// Plants `(frame, object)` pairs at random free cells, then scatters
/// distractors from `pool` into every frame. Returns the planted positions.
fn paint(rng: &mut ChaCha8Rng, cfg: &TaskConfig, canvas: &mut Canvas, plants: &[(usize, usize)], pool: &[usize]) -> Result<Vec<usize>> {
    let mut planted = Vec::with_capacity(plants.len());
    for &(frame, obj) in plants {
        let free = canvas.free_cells(frame);
        let &cell = free.as_slice().choose(rng).ok_or_else(|| Error::Task(format!("frame {frame} is full")))?;
        planted.push(canvas.place(frame, cell, obj));
    }
    for frame in 0..cfg.frames {
        let k = rng.random_range(0..=cfg.max_per_frame);
        if k == 0 {
            continue;
        }
        if pool.is_empty() {
            return Err(Error::Task("no object symbols left for distractors".into()));
        }
        let mut free = canvas.free_cells(frame);
        free.shuffle(rng);
        for &cell in free.iter().take(k) {
            let obj = pool[rng.random_range(0..pool.len())];
            canvas.place(frame, cell, obj);
        }
    }
    Ok(planted)
}

fn pool_without(cfg: &TaskConfig, reserved: &[usize]) -> Vec<usize> {
    (0..cfg.num_objects).filter(|o| !reserved.contains(o)).collect()
}

fn sample(cfg: &TaskConfig, seed: u64, kind: TaskKind, stream: Vec<usize>, query: Vec<usize>, answer: Vec<usize>, evidence: Vec<usize>) -> TaskSample {
    TaskSample { seed, task_kind: kind, grid_h: cfg.grid_h, grid_w: cfg.grid_w, stream, query, answer, evidence }
}

/// The query names one object that appears exactly once; the answer is its cell.
pub fn gen_recall_stream(cfg: &TaskConfig, seed: u64) -> Result<TaskSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = rng.random_range(0..NUM_SCENES);
    let target = rng.random_range(0..cfg.num_objects);
    let frame = rng.random_range(0..cfg.eligible_frames());
    let mut canvas = Canvas::new(cfg, scene);
    let evidence = paint(&mut rng, cfg, &mut canvas, &[(frame, target)], &pool_without(cfg, &[target]))?;
    let cell = evidence[0] % cfg.cells();
    Ok(sample(cfg, seed, TaskKind::Recall, canvas.tokens, vec![Q_RECALL, OBJ + target], vec![CELL + cell], evidence))
}

/// The queried object appears in `k` distinct early frames; the answer is `k`.
pub fn gen_count_stream(cfg: &TaskConfig, seed: u64) -> Result<TaskSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = rng.random_range(0..NUM_SCENES);
    let target = rng.random_range(0..cfg.num_objects);
    let eligible = cfg.eligible_frames();
    if cfg.count_min > eligible {
        return Err(Error::Task(format!("count {} exceeds {eligible} eligible frames", cfg.count_min)));
    }
    let k = rng.random_range(cfg.count_min..=cfg.count_max.min(eligible));
    let mut frames: Vec<usize> = (0..eligible).collect();
    frames.shuffle(&mut rng);
    frames.truncate(k);
    frames.sort_unstable();
    let plants: Vec<(usize, usize)> = frames.iter().map(|&f| (f, target)).collect();
    let mut canvas = Canvas::new(cfg, scene);
    let evidence = paint(&mut rng, cfg, &mut canvas, &plants, &pool_without(cfg, &[target]))?;
    Ok(sample(cfg, seed, TaskKind::Count, canvas.tokens, vec![Q_COUNT, OBJ + target], encode_number(k), evidence))
}

/// `order_len` marked objects appear once each at distinct early frames.
/// The query lists them in id order; the answer is their order of
/// appearance, or in the choice variant the letter of the correct one of
/// four listed orderings.
pub fn gen_order_stream(cfg: &TaskConfig, seed: u64) -> Result<TaskSample> {
    cfg.validate()?;
    let m = cfg.order_len;
    let eligible = cfg.eligible_frames();
    if m == 0 || m > eligible || m > cfg.num_objects {
        return Err(Error::Task(format!("cannot order {m} objects over {eligible} eligible frames")));
    }
    if cfg.order_choice && m < 3 {
        return Err(Error::Task("four distinct orderings need at least 3 objects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = rng.random_range(0..NUM_SCENES);
    let mut objs: Vec<usize> = (0..cfg.num_objects).collect();
    objs.shuffle(&mut rng);
    objs.truncate(m);
    let mut frames: Vec<usize> = (0..eligible).collect();
    frames.shuffle(&mut rng);
    frames.truncate(m);
    frames.sort_unstable();
    let plants: Vec<(usize, usize)> = frames.iter().copied().zip(objs.iter().copied()).collect();
    let mut canvas = Canvas::new(cfg, scene);
    let evidence = paint(&mut rng, cfg, &mut canvas, &plants, &pool_without(cfg, &objs))?;
    let truth: Vec<usize> = objs.iter().map(|o| OBJ + o).collect();
    let mut listed = truth.clone();
    listed.sort_unstable();
    let (query, answer) = if cfg.order_choice {
        let mut cands = vec![truth.clone()];
        while cands.len() < NUM_CHOICES {
            let mut c = truth.clone();
            c.shuffle(&mut rng);
            if !cands.contains(&c) {
                cands.push(c);
            }
        }
        cands.shuffle(&mut rng);
        let correct = cands.iter().position(|c| *c == truth).expect("truth is a candidate");
        let mut q = vec![Q_CHOICE];
        for (i, c) in cands.iter().enumerate() {
            if i > 0 {
                q.push(SEP);
            }
            q.extend_from_slice(c);
        }
        (q, vec![CHOICE + correct])
    } else {
        let mut q = vec![Q_ORDER];
        q.extend_from_slice(&listed);
        (q, truth)
    };
    Ok(sample(cfg, seed, TaskKind::Order, canvas.tokens, query, answer, evidence))
}

/// Relation token of cell `a` to a later cell `b` in the same frame.
pub fn relation(a: usize, b: usize, grid_w: usize) -> usize {
    match (a % grid_w).cmp(&(b % grid_w)) {
        std::cmp::Ordering::Less => REL_LEFT,
        std::cmp::Ordering::Greater => REL_RIGHT,
        std::cmp::Ordering::Equal => REL_ABOVE,
    }
}

/// Scene token, `(object, count)` clauses in id order, `SEP`, then one
/// `(a, rel, b)` clause per pair of objects sharing a frame (raster order
/// within each frame), then `END`.
pub fn gen_dense_description(cfg: &TaskConfig, seed: u64) -> Result<TaskSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = rng.random_range(0..NUM_SCENES);
    let mut canvas = Canvas::new(cfg, scene);
    paint(&mut rng, cfg, &mut canvas, &[], &pool_without(cfg, &[]))?;
    let stream = canvas.tokens;
    let mut counts = vec![0usize; cfg.num_objects];
    let mut answer = vec![SCENE + scene];
    let mut relations = Vec::new();
    let mut evidence = Vec::new();
    for f in 0..cfg.frames {
        let present: Vec<usize> = (0..cfg.cells()).filter(|&c| is_object(stream[f * cfg.cells() + c])).collect();
        for (i, &a) in present.iter().enumerate() {
            counts[stream[f * cfg.cells() + a] - OBJ] += 1;
            evidence.push(f * cfg.cells() + a);
            for &b in &present[i + 1..] {
                relations.extend([stream[f * cfg.cells() + a], relation(a, b, cfg.grid_w), stream[f * cfg.cells() + b]]);
            }
        }
    }
    for (o, &c) in counts.iter().enumerate() {
        if c > 0 {
            answer.push(OBJ + o);
            answer.extend(encode_number(c));
        }
    }
    answer.push(SEP);
    answer.extend(relations);
    answer.push(END);
    Ok(sample(cfg, seed, TaskKind::DenseDescription, stream, vec![Q_DESCRIBE], answer, evidence))
}

pub fn generate(kind: TaskKind, cfg: &TaskConfig, seed: u64) -> Result<TaskSample> {
    match kind {
        TaskKind::Recall => gen_recall_stream(cfg, seed),
        TaskKind::Count => gen_count_stream(cfg, seed),
        TaskKind::Order => gen_order_stream(cfg, seed),
        TaskKind::DenseDescription => gen_dense_description(cfg, seed),
    }
}

pub fn generate_many(kind: TaskKind, cfg: &TaskConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<TaskSample>> {
    seeds.into_iter().map(|s| generate(kind, cfg, s)).collect()
}

/// Parsed dense-description answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Summary {
    pub scene: usize,
    pub counts: BTreeMap<usize, usize>,
    pub relations: Vec<(usize, usize, usize)>,
}

pub fn parse_summary(answer: &[usize]) -> Result<Summary> {
    let err = |m: &str| Error::Task(format!("malformed summary: {m}"));
    let (&scene, mut rest) = answer.split_first().ok_or_else(|| err("empty"))?;
    if !(SCENE..SCENE + NUM_SCENES).contains(&scene) {
        return Err(err("no scene token"));
    }
    let mut counts = BTreeMap::new();
    while let Some((&t, tail)) = rest.split_first() {
        if t == SEP {
            rest = tail;
            break;
        }
        if !is_object(t) {
            return Err(err("count clause without object"));
        }
        let k = decode_number(tail).ok_or_else(|| err("count clause without digits"))?;
        let width = tail.iter().take_while(|&&d| (DIGIT..DIGIT + 10).contains(&d)).count();
        if counts.insert(t, k).is_some() {
            return Err(err("repeated category"));
        }
        rest = &tail[width..];
    }
    let mut relations = Vec::new();
    loop {
        match rest {
            [END] => break,
            [a, r, b, tail @ ..] if is_object(*a) && is_object(*b) && (REL_LEFT..=REL_ABOVE).contains(r) => {
                relations.push((*a, *r, *b));
                rest = tail;
            }
            _ => return Err(err("bad relation clause or missing END")),
        }
    }
    Ok(Summary { scene: scene - SCENE, counts, relations })
}

/// Recomputes the answer by scanning the stream and query.
pub fn oracle_answer(s: &TaskSample) -> Result<Vec<usize>> {
    let cells = s.grid_h * s.grid_w;
    let fail = |m: &str| Error::Task(format!("oracle: {m}"));
    match s.task_kind {
        TaskKind::Recall => {
            let obj = *s.query.get(1).ok_or_else(|| fail("short query"))?;
            let hits: Vec<usize> = (0..s.stream.len()).filter(|&p| s.stream[p] == obj).collect();
            match hits.as_slice() {
                [p] => Ok(vec![CELL + p % cells]),
                _ => Err(fail(&format!("object appears {} times", hits.len()))),
            }
        }
        TaskKind::Count => {
            let obj = *s.query.get(1).ok_or_else(|| fail("short query"))?;
            Ok(encode_number(s.stream.iter().filter(|&&t| t == obj).count()))
        }
        TaskKind::Order => {
            let first_seen = |o: usize| s.stream.iter().position(|&t| t == o);
            let order_of = |set: &[usize]| -> Result<Vec<usize>> {
                let mut seen: Vec<(usize, usize)> = Vec::new();
                for &o in set {
                    let p = first_seen(o).ok_or_else(|| fail("listed object never appears"))?;
                    if s.stream.iter().filter(|&&t| t == o).count() != 1 {
                        return Err(fail("marked object appears more than once"));
                    }
                    seen.push((p, o));
                }
                seen.sort_unstable();
                Ok(seen.into_iter().map(|(_, o)| o).collect())
            };
            match s.query.first() {
                Some(&Q_ORDER) => order_of(&s.query[1..]),
                Some(&Q_CHOICE) => {
                    let cands: Vec<&[usize]> = s.query[1..].split(|&t| t == SEP).collect();
                    let truth = order_of(cands.first().ok_or_else(|| fail("no candidates"))?)?;
                    let hits: Vec<usize> = (0..cands.len()).filter(|&i| cands[i] == truth.as_slice()).collect();
                    match hits.as_slice() {
                        [i] => Ok(vec![CHOICE + i]),
                        _ => Err(fail("not exactly one correct candidate")),
                    }
                }
                _ => Err(fail("unknown order query")),
            }
        }
        TaskKind::DenseDescription => {
            let bgs: BTreeSet<usize> = s.stream.iter().copied().filter(|t| (BG..BG + NUM_SCENES).contains(t)).collect();
            let scene = match bgs.len() {
                1 => *bgs.iter().next().unwrap() - BG,
                // A stream with every cell occupied shows no background.
                _ => return Err(fail("scene is not identifiable")),
            };
            let mut out = vec![SCENE + scene];
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &t in s.stream.iter().filter(|&&t| is_object(t)) {
                *counts.entry(t).or_default() += 1;
            }
            for (o, c) in counts {
                out.push(o);
                out.extend(encode_number(c));
            }
            out.push(SEP);
            for frame in s.stream.chunks(cells) {
                let objs: Vec<(usize, usize)> = frame.iter().enumerate().filter(|(_, &t)| is_object(t)).map(|(c, &t)| (c, t)).collect();
                for i in 0..objs.len() {
                    for j in i + 1..objs.len() {
                        let (ca, cb) = (objs[i].0, objs[j].0);
                        let (xa, xb) = (ca % s.grid_w, cb % s.grid_w);
                        let rel = if xa < xb {
                            REL_LEFT
                        } else if xa > xb {
                            REL_RIGHT
                        } else {
                            REL_ABOVE
                        };
                        out.extend([objs[i].1, rel, objs[j].1]);
                    }
                }
            }
            out.push(END);
            Ok(out)
        }
    }
}

/// Exact-match fraction.
pub fn eval_acc(predictions: &[Vec<usize>], answers: &[Vec<usize>]) -> Result<f64> {
    if predictions.len() != answers.len() {
        return Err(Error::shape("eval_acc", format!("{} predictions, {} answers", predictions.len(), answers.len())));
    }
    if answers.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(answers).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / answers.len() as f64)
}

/// Mean relative accuracy over thresholds θ ∈ {0.50, 0.55, …, 0.95}: the
/// fraction of θ with `|ŷ − y| / y < 1 − θ`, averaged over samples.
pub fn eval_mra(predictions: &[f64], answers: &[f64]) -> Result<f64> {
    if predictions.len() != answers.len() {
        return Err(Error::shape("eval_mra", format!("{} predictions, {} answers", predictions.len(), answers.len())));
    }
    if let Some(bad) = answers.iter().find(|&&y| !(y > 0.0)) {
        return Err(Error::Task(format!("MRA needs positive ground truth, got {bad}")));
    }
    if answers.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&p, &y) in predictions.iter().zip(answers) {
        let rel = (p - y).abs() / y;
        // 1 − θ for θ = 0.50 + 0.05 i is (10 − i) / 20.
        let passed = (0..10).filter(|&i| rel < (10 - i) as f64 / 20.0).count();
        total += passed as f64 / 10.0;
    }
    Ok(total / answers.len() as f64)
}

pub fn write_jsonl<W: Write>(mut out: W, samples: &[TaskSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses one sample per nonblank line; errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TaskSample = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if s.grid_h == 0 || s.grid_w == 0 || s.stream.len() % (s.grid_h * s.grid_w) != 0 || s.answer.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "stream is not whole frames or answer is empty".into() });
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TaskConfig {
        TaskConfig {
            vocab: 64,
            grid_h: 2,
            grid_w: 2,
            frames: 8,
            num_objects: 6,
            exceedance: 2,
            window: 8,
            max_per_frame: 2,
            count_min: 0,
            count_max: 3,
            order_len: 3,
            order_choice: false,
        }
    }

    #[test]
    fn desk_config_is_valid() {
        let c = TaskConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.eligible_frames(), 4);
        assert!(c.vocab >= min_size(c.num_objects));
    }

    #[test]
    fn single_object_single_frame() {
        let c = TaskConfig { frames: 1, num_objects: 1, exceedance: 0, max_per_frame: 0, ..tiny() };
        for seed in 0..10 {
            let s = gen_recall_stream(&c, seed).unwrap();
            let cell = s.stream.iter().position(|&t| t == OBJ).unwrap();
            assert_eq!(s.answer, vec![CELL + cell]);
        }
    }

    #[test]
    fn same_seed_same_sample() {
        for kind in TaskKind::ALL {
            assert_eq!(generate(kind, &tiny(), 9).unwrap(), generate(kind, &tiny(), 9).unwrap());
            assert_ne!(generate(kind, &tiny(), 9).unwrap().stream, generate(kind, &tiny(), 10).unwrap().stream);
        }
    }

    #[test]
    fn oracle_agrees_and_evidence_is_far() {
        let mut choice = tiny();
        choice.order_choice = true;
        for cfg in [tiny(), choice, TaskConfig::desk()] {
            for kind in TaskKind::ALL {
                for seed in 0..300 {
                    let s = generate(kind, &cfg, seed).unwrap();
                    assert_eq!(oracle_answer(&s).unwrap(), s.answer, "{kind:?} seed {seed}");
                    if kind != TaskKind::DenseDescription {
                        for &p in &s.evidence {
                            assert!(s.stream.len() - p > cfg.exceedance * cfg.window);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_count_answers_zero() {
        let c = TaskConfig { count_min: 0, count_max: 0, ..tiny() };
        let s = gen_count_stream(&c, 3).unwrap();
        assert_eq!(s.answer, vec![DIGIT]);
        assert!(!s.stream.contains(&s.query[1]));
    }

    #[test]
    fn count_spreads_over_distinct_frames() {
        let c = TaskConfig { count_min: 3, count_max: 3, ..TaskConfig::desk() };
        let s = gen_count_stream(&c, 1).unwrap();
        assert_eq!(s.answer_number(), Some(3));
        let frames: BTreeSet<usize> = s.evidence.iter().map(|p| p / c.cells()).collect();
        assert_eq!(frames.len(), 3);
    }

    #[test]
    fn two_categories_counted_independently() {
        let s = gen_dense_description(&tiny(), 4).unwrap();
        let sum = parse_summary(&s.answer).unwrap();
        for (&o, &k) in &sum.counts {
            assert_eq!(s.stream.iter().filter(|&&t| t == o).count(), k);
        }
    }

    #[test]
    fn order_follows_schedule() {
        let s = gen_order_stream(&tiny(), 5).unwrap();
        let mut ev = s.evidence.clone();
        ev.sort_unstable();
        assert_eq!(ev, s.evidence);
        let by_pos: Vec<usize> = s.evidence.iter().map(|&p| s.stream[p]).collect();
        assert_eq!(by_pos, s.answer);
        let one = gen_order_stream(&TaskConfig { order_len: 1, ..tiny() }, 5).unwrap();
        assert_eq!(one.answer.len(), 1);
        assert!(gen_order_stream(&TaskConfig { order_len: 9, ..tiny() }, 5).is_err());
    }

    #[test]
    fn choice_has_one_correct_candidate() {
        let c = TaskConfig { order_choice: true, ..tiny() };
        for seed in 0..50 {
            let s = gen_order_stream(&c, seed).unwrap();
            let cands: Vec<&[usize]> = s.query[1..].split(|&t| t == SEP).collect();
            assert_eq!(cands.len(), 4);
            let truth = gen_order_stream(&TaskConfig { order_choice: false, ..c.clone() }, seed).unwrap().answer;
            assert_eq!(cands.iter().filter(|c| **c == truth.as_slice()).count(), 1);
            assert_eq!(s.answer, vec![CHOICE + cands.iter().position(|c| *c == truth.as_slice()).unwrap()]);
        }
    }

    #[test]
    fn empty_scene_lists_nothing() {
        let c = TaskConfig { max_per_frame: 0, ..tiny() };
        let s = gen_dense_description(&c, 1).unwrap();
        let sum = parse_summary(&s.answer).unwrap();
        assert!(sum.counts.is_empty() && sum.relations.is_empty());
        assert_eq!(s.answer.len(), 3);
    }

    #[test]
    fn relation_clauses_count_co_visible_pairs() {
        for seed in 0..50 {
            let s = gen_dense_description(&tiny(), seed).unwrap();
            let pairs: usize = s
                .stream
                .chunks(4)
                .map(|f| {
                    let k = f.iter().filter(|&&t| is_object(t)).count();
                    k * k.saturating_sub(1) / 2
                })
                .sum();
            assert_eq!(parse_summary(&s.answer).unwrap().relations.len(), pairs);
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        assert!(TaskConfig { max_per_frame: 4, ..tiny() }.validate().is_err());
        assert!(TaskConfig { frames: 3, ..tiny() }.validate().is_err());
        assert!(TaskConfig { vocab: 50, ..tiny() }.validate().is_err());
        assert!(TaskConfig { grid_h: 5, grid_w: 4, ..tiny() }.validate().is_err());
    }

    #[test]
    fn acc_examples() {
        let a = vec![vec![1], vec![2], vec![3], vec![4]];
        assert_eq!(eval_acc(&a, &a).unwrap(), 1.0);
        let none = vec![vec![9]; 4];
        assert_eq!(eval_acc(&none, &a).unwrap(), 0.0);
        let three = vec![vec![1], vec![2], vec![3], vec![0]];
        assert_eq!(eval_acc(&three, &a).unwrap(), 0.75);
        assert!(eval_acc(&three[..2], &a).is_err());
    }

    #[test]
    fn mra_examples() {
        assert_eq!(eval_mra(&[3.0], &[3.0]).unwrap(), 1.0);
        assert_eq!(eval_mra(&[0.0], &[4.0]).unwrap(), 0.0);
        assert!((eval_mra(&[4.0], &[5.0]).unwrap() - 0.6).abs() < 1e-15);
        assert!((eval_mra(&[6.0], &[5.0]).unwrap() - 0.6).abs() < 1e-15);
        assert!(eval_mra(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn numbers_round_trip() {
        for k in [0, 7, 10, 42, 907] {
            assert_eq!(decode_number(&encode_number(k)), Some(k));
        }
        assert_eq!(decode_number(&[OBJ]), None);
    }

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let samples = generate_many(TaskKind::Order, &tiny(), 0..5).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &samples).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), samples);
        let mut bad = buf.clone();
        bad.extend_from_slice(b"{\"seed\": 1}\n");
        match read_jsonl(bad.as_slice()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn teacher_forcing_targets_answer_rows() {
        let s = gen_order_stream(&tiny(), 2).unwrap();
        let (ids, rows) = s.teacher_forced();
        assert_eq!(ids.len(), s.stream.len() + s.query.len() + s.answer.len() - 1);
        assert_eq!(rows.len(), s.answer.len());
        assert_eq!(*rows.last().unwrap(), ids.len() - 1);
        assert_eq!(s.grid(ids.len()).num_visual(), s.stream.len());
    }
}
