//! Prefill cost against input length, measured and closed-form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::sliding_window_macs;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flops::{FlopCategory, FlopCounter};
use crate::model::{logits_var, stack_forward_var, HybridConfig, LayerKind, ModelParams, StackLayout};
use crate::scalar::Scalar;
use crate::spatial::{geometry, SpatialGrid};
use crate::streaming::{stream_init, stream_step, SegmentKind, StreamModel};
use crate::tensor::Tensor;

/// The length sweep configuration: d = 32, 4 heads, b = w = 128.
pub fn scaling_config(vocab: usize) -> HybridConfig {
    HybridConfig { d: 32, heads: 4, d_h: 64, d_ff: 64, chunk: 128, window: 128, ..HybridConfig::desk(vocab) }
}

/// Closed-form MACs of one prefill over `n` tokens of which the first
/// `frames` whole frames are visual, with logits for the last row.
pub fn model_flops(cfg: &HybridConfig, n: usize, frames: usize) -> FlopCounter {
    let (d, dh, dff) = (cfg.d as u64, cfg.d_h as u64, cfg.d_ff as u64);
    let nn = n as u64;
    let mut c = FlopCounter::new();
    for &kind in &cfg.layout.pattern {
        c.add(FlopCategory::Projection, nn * d * 3 * d + nn * d * d + 3 * nn * d * dff);
        match kind {
            LayerKind::Anchor => c.add(FlopCategory::Attention, 2 * nn * nn * d),
            LayerKind::Window => c.add(FlopCategory::Attention, sliding_window_macs(n, cfg.window, cfg.d)),
            LayerKind::Ttt => {
                c.add(FlopCategory::Attention, sliding_window_macs(n, cfg.window, cfg.d));
                c.add(FlopCategory::TttApply, 3 * nn * d * dh);
                let chunks = (n / cfg.chunk) as u64;
                let b = cfg.chunk as u64;
                let (r, s) = (dh.max(d), dh.min(d));
                let ns = 3 * cfg.update.ns_iterations as u64 * (2 * r * s * s + s * s * s);
                c.add(FlopCategory::TttUpdate, chunks * (7 * b * d * dh + ns));
                if frames > 0 {
                    let [kt, kh, kw] = cfg.kernel;
                    let g = geometry(kt, kh, kw, cfg.conv_mode, frames, cfg.grid_h, cfg.grid_w);
                    c.add(FlopCategory::Conv, 3 * g.macs(cfg.d) as u64);
                }
            }
        }
    }
    c.add(FlopCategory::Projection, d * cfg.vocab as u64);
    c
}

/// Scalars of streaming state after `n` tokens: TTT caches, conv tail and
/// fast weights, plus anchor and window caches.
pub fn model_state_scalars(cfg: &HybridConfig, n: usize) -> u64 {
    let (d, dh) = (cfg.d as u64, cfg.d_h as u64);
    let [kt, _, _] = cfg.kernel;
    let tail = (kt as u64 - 1) * cfg.cells() as u64 * 3 * d;
    let rows = (cfg.d_h + cfg.d + cfg.d_h) as u64;
    let fw = 2 * 3 * d * dh + rows;
    cfg.layout
        .pattern
        .iter()
        .map(|k| match k {
            LayerKind::Ttt => 2 * cfg.window as u64 * d + 2 * cfg.chunk as u64 * d + tail + fw,
            LayerKind::Window => 2 * cfg.window as u64 * d,
            LayerKind::Anchor => 2 * n as u64 * d,
        })
        .sum()
}

/// Random video stream of `n` tokens (whole frames), seeded.
pub fn probe_stream(cfg: &HybridConfig, n: usize, seed: u64) -> Result<(Vec<usize>, SpatialGrid)> {
    if n % cfg.cells() != 0 {
        return Err(Error::Config(format!("length {n} is not a whole number of {}-token frames", cfg.cells())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect();
    Ok((ids, SpatialGrid::contiguous(n, 0, n / cfg.cells(), cfg.grid_h, cfg.grid_w)?))
}

/// FLOPs of one prefill (plus last-row logits), as booked by the tape.
pub fn measure_prefill<F: Scalar>(params: &ModelParams<Tensor<F>>, cfg: &HybridConfig, ids: &[usize], grid: &SpatialGrid) -> Result<FlopCounter> {
    let tape = Tape::no_grad();
    let bound = params.bind(&tape, |_| false);
    let out = stack_forward_var(&tape, &bound, ids, grid, cfg)?;
    logits_var(&tape, &bound, &out.hidden, &[ids.len() - 1], cfg.norm_eps)?;
    Ok(tape.flops())
}

/// Streams `ids` frame by frame; returns the state size at the end.
pub fn measure_state<F: Scalar>(params: &ModelParams<Tensor<F>>, cfg: &HybridConfig, ids: &[usize]) -> Result<u64> {
    let model = StreamModel::new(params, cfg)?;
    let mut st = stream_init(&model)?;
    for frame in ids.chunks(cfg.cells()) {
        stream_step(&model, &mut st, frame, SegmentKind::Frame)?;
    }
    Ok(st.total_state_scalars() as u64)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub hybrid: FlopCounter,
    pub hybrid_model: FlopCounter,
    pub full: FlopCounter,
    pub full_model: FlopCounter,
    pub hybrid_state: u64,
    pub full_state: u64,
    pub hybrid_state_model: u64,
    pub full_state_model: u64,
}

impl ScalingRow {
    pub fn ttt(&self) -> u64 {
        self.hybrid.get(FlopCategory::TttApply) + self.hybrid.get(FlopCategory::TttUpdate)
    }

    /// Largest relative gap between measured and closed-form counts.
    pub fn model_error(&self) -> f64 {
        let rel = |a: u64, b: u64| if a == b { 0.0 } else { (a as f64 - b as f64).abs() / b.max(1) as f64 };
        let mut e: f64 = 0.0;
        for cat in FlopCategory::ALL {
            e = e.max(rel(self.hybrid.get(cat), self.hybrid_model.get(cat)));
            e = e.max(rel(self.full.get(cat), self.full_model.get(cat)));
        }
        e.max(rel(self.hybrid_state, self.hybrid_state_model)).max(rel(self.full_state, self.full_state_model))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
}

impl ScalingTable {
    /// Ratios between consecutive rows: (ttt, full attention, hybrid total).
    pub fn growth(&self) -> Vec<(f64, f64, f64)> {
        self.rows
            .windows(2)
            .map(|p| {
                let r = |a: u64, b: u64| b as f64 / a as f64;
                (
                    r(p[0].ttt(), p[1].ttt()),
                    r(p[0].full.get(FlopCategory::Attention), p[1].full.get(FlopCategory::Attention)),
                    r(p[0].hybrid.total(), p[1].hybrid.total()),
                )
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:>6} {:>14} {:>14} {:>14} {:>14} {:>7} {:>12} {:>12} {:>9}\n",
            "n", "hybrid_total", "ttt", "full_total", "full_attn", "ratio", "hyb_state", "full_state", "model_err"
        );
        for r in &self.rows {
            s += &format!(
                "{:>6} {:>14} {:>14} {:>14} {:>14} {:>7.3} {:>12} {:>12} {:>9.2e}\n",
                r.n,
                r.hybrid.total(),
                r.ttt(),
                r.full.total(),
                r.full.get(FlopCategory::Attention),
                r.hybrid.total() as f64 / r.full.total() as f64,
                r.hybrid_state,
                r.full_state,
                r.model_error()
            );
        }
        s
    }
}

/// Sweeps `lengths` for the given hybrid and its all-anchor counterpart.
pub fn run_scaling<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    full_params: &ModelParams<Tensor<F>>,
    cfg: &HybridConfig,
    lengths: &[usize],
) -> Result<ScalingTable> {
    if lengths.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Config("lengths must be increasing".into()));
    }
    let full_cfg = full_attention(cfg);
    let mut rows = Vec::new();
    for &n in lengths {
        if n < cfg.chunk {
            return Err(Error::Config(format!("length {n} is below one chunk of {}", cfg.chunk)));
        }
        let (ids, grid) = probe_stream(cfg, n, n as u64)?;
        let frames = n / cfg.cells();
        rows.push(ScalingRow {
            n,
            hybrid: measure_prefill(params, cfg, &ids, &grid)?,
            hybrid_model: model_flops(cfg, n, frames),
            full: measure_prefill(full_params, &full_cfg, &ids, &grid)?,
            full_model: model_flops(&full_cfg, n, frames),
            hybrid_state: measure_state(params, cfg, &ids)?,
            full_state: measure_state(full_params, &full_cfg, &ids)?,
            hybrid_state_model: model_state_scalars(cfg, n),
            full_state_model: model_state_scalars(&full_cfg, n),
        });
    }
    Ok(ScalingTable { rows })
}

/// Every layer an anchor.
pub fn full_attention(cfg: &HybridConfig) -> HybridConfig {
    HybridConfig { layout: StackLayout::uniform(cfg.layout.len(), LayerKind::Anchor), ..cfg.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn init(cfg: &HybridConfig) -> ModelParams<Tensor<f32>> {
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn closed_form_matches_counter() {
        let mut cfg = HybridConfig::tiny(40, 8, 4, 8);
        cfg.layout = StackLayout::parse("ttt,window,ttt,anchor", 4).unwrap();
        let p = init(&cfg);
        for n in [8, 20, 32, 44] {
            let (ids, grid) = probe_stream(&cfg, n, 1).unwrap();
            let measured = measure_prefill(&p, &cfg, &ids, &grid).unwrap();
            assert_eq!(measured, model_flops(&cfg, n, n / 4), "n = {n}");
            assert_eq!(measure_state(&p, &cfg, &ids).unwrap(), model_state_scalars(&cfg, n), "n = {n}");
        }
    }

    #[test]
    fn mixed_stream_conv_counts_visual_frames_only() {
        let cfg = HybridConfig::tiny(40, 8, 1, 8);
        let p = init(&cfg);
        let (mut ids, _) = probe_stream(&cfg, 16, 2).unwrap();
        ids.extend([1, 2, 3]);
        let grid = SpatialGrid::contiguous(19, 0, 4, 2, 2).unwrap();
        assert_eq!(measure_prefill(&p, &cfg, &ids, &grid).unwrap(), model_flops(&cfg, 19, 4));
    }

    #[test]
    fn short_lengths_rejected() {
        let cfg = HybridConfig::tiny(40, 8, 2, 8);
        let p = init(&cfg);
        let f = init(&full_attention(&cfg));
        assert!(run_scaling(&p, &f, &cfg, &[4]).is_err());
        assert!(run_scaling(&p, &f, &cfg, &[16, 8]).is_err());
    }
}
