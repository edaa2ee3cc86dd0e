//! Spatiotemporal packing of visual tokens and the depthwise 3-D
//! convolution applied to the TTT branch's queries, keys and values.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bijection between grid voxels `(t, h, w)` and stream positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialGrid {
    t: usize,
    h: usize,
    w: usize,
    /// Stream position of each voxel, voxels in raster `(t, h, w)` order.
    positions: Vec<usize>,
    /// Per stream position: `Some(voxel)` for visual tokens.
    voxel_at: Vec<Option<usize>>,
}

impl SpatialGrid {
    /// Builds a grid from an explicit voxel → position table.
    pub fn new(n: usize, t: usize, h: usize, w: usize, positions: Vec<usize>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Grid(format!("frame extents must be positive, got {h}x{w}")));
        }
        if positions.len() != t * h * w {
            return Err(Error::Grid(format!(
                "{} positions for a {t}x{h}x{w} grid",
                positions.len()
            )));
        }
        let mut voxel_at = vec![None; n];
        for (v, &p) in positions.iter().enumerate() {
            if p >= n {
                return Err(Error::Grid(format!("position {p} outside stream of {n}")));
            }
            if voxel_at[p].replace(v).is_some() {
                return Err(Error::Grid(format!("position {p} mapped twice")));
            }
        }
        let per_frame = h * w;
        for f in 1..t {
            let prev_max = positions[(f - 1) * per_frame..f * per_frame].iter().max();
            let cur_min = positions[f * per_frame..(f + 1) * per_frame].iter().min();
            if prev_max >= cur_min {
                return Err(Error::Grid(format!("frame {f} starts before frame {} ends", f - 1)));
            }
        }
        Ok(Self { t, h, w, positions, voxel_at })
    }

    /// Visual tokens occupy `start..start + t·h·w` in raster order.
    pub fn contiguous(n: usize, start: usize, t: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(n, t, h, w, (start..start + t * h * w).collect())
    }

    /// Visual tokens are the `true` entries of `mask`, in raster order.
    pub fn from_mask(mask: &[bool], t: usize, h: usize, w: usize) -> Result<Self> {
        let positions: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        Self::new(mask.len(), t, h, w, positions)
    }

    /// A stream with no visual tokens.
    pub fn text_only(n: usize, h: usize, w: usize) -> Self {
        Self { t: 0, h, w, positions: Vec::new(), voxel_at: vec![None; n] }
    }

    /// Same grid over a longer stream (extra positions are text).
    pub fn extended(&self, n: usize) -> Result<Self> {
        if n < self.voxel_at.len() {
            return Err(Error::Grid(format!("cannot shrink grid from {} to {n}", self.voxel_at.len())));
        }
        let mut g = self.clone();
        g.voxel_at.resize(n, None);
        Ok(g)
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.h * self.w
    }

    pub fn stream_len(&self) -> usize {
        self.voxel_at.len()
    }

    pub fn num_visual(&self) -> usize {
        self.positions.len()
    }

    /// Stream positions of the voxels in raster order.
    pub fn visual_positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn is_visual(&self, pos: usize) -> bool {
        self.voxel_at.get(pos).is_some_and(Option::is_some)
    }

    pub fn video_mask(&self) -> Vec<bool> {
        self.voxel_at.iter().map(Option::is_some).collect()
    }

    pub fn voxel_of(&self, pos: usize) -> Option<(usize, usize, usize)> {
        let v = (*self.voxel_at.get(pos)?)?;
        let per = self.h * self.w;
        Some((v / per, (v % per) / self.w, v % self.w))
    }

    pub fn position_of(&self, t: usize, h: usize, w: usize) -> Option<usize> {
        if t >= self.t || h >= self.h || w >= self.w {
            return None;
        }
        Some(self.positions[(t * self.h + h) * self.w + w])
    }

    /// Cell index `h·W + w` of a visual token.
    pub fn cell_of(&self, pos: usize) -> Option<usize> {
        self.voxel_of(pos).map(|(_, h, w)| h * self.w + w)
    }

    /// Sub-grid covering stream positions `start..end`, re-based to 0.
    /// Must contain whole frames only.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        let per = self.h * self.w;
        let mut positions = Vec::new();
        let mut frames = 0;
        for f in 0..self.t {
            let frame = &self.positions[f * per..(f + 1) * per];
            let inside = frame.iter().filter(|&&p| p >= start && p < end).count();
            if inside == per {
                frames += 1;
                positions.extend(frame.iter().map(|p| p - start));
            } else if inside != 0 {
                return Err(Error::Grid(format!("frame {f} straddles the range {start}..{end}")));
            }
        }
        Self::new(end - start, frames, self.h, self.w, positions)
    }

    /// Index of the first frame intersecting `start..`, if any.
    pub fn first_frame_at_or_after(&self, start: usize) -> Option<usize> {
        let per = self.h * self.w;
        (0..self.t).find(|&f| self.positions[f * per] >= start)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvMode {
    /// Taps cover `−⌊κ/2⌋..=⌊κ/2⌋` on every axis.
    Centered,
    /// Temporal taps cover `−(κ_t − 1)..=0`; spatial taps stay centered.
    CausalTemporal,
}

impl ConvMode {
    pub fn name(self) -> &'static str {
        match self {
            ConvMode::Centered => "centered",
            ConvMode::CausalTemporal => "causal_temporal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "centered" => Some(ConvMode::Centered),
            "causal_temporal" | "causal" => Some(ConvMode::CausalTemporal),
            _ => None,
        }
    }
}

/// Everything the raw convolution kernels need to know about shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub offset_t: isize,
    pub offset_h: isize,
    pub offset_w: isize,
    /// Outputs are produced for frames `out_t0..t` only.
    pub out_t0: usize,
}

impl ConvGeometry {
    pub fn taps(&self) -> usize {
        self.kt * self.kh * self.kw
    }

    pub fn out_voxels(&self) -> usize {
        (self.t - self.out_t0) * self.h * self.w
    }

    pub fn macs(&self, channels: usize) -> usize {
        self.out_voxels() * channels * self.taps()
    }
}

/// Depthwise kernel: one weight per tap per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<F> {
    /// Shape `[κ_t, κ_h, κ_w, d]`.
    pub weights: Tensor<F>,
    pub mode: ConvMode,
}

impl<F: Scalar> ConvKernel<F> {
    pub fn new(weights: Tensor<F>, mode: ConvMode) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::shape("conv_kernel", format!("expected rank 4, got {:?}", weights.shape())));
        }
        let s = weights.shape();
        check_extents(s[0], s[1], s[2], mode)?;
        Ok(Self { weights, mode })
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.weights.shape();
        (s[0], s[1], s[2])
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[3]
    }

    /// Weights viewed as a `taps × d` matrix (tap-major, raster order).
    pub fn tap_matrix(&self) -> Tensor<F> {
        self.weights.as_matrix().reshape(&[self.taps(), self.channels()]).expect("tap view")
    }

    pub fn taps(&self) -> usize {
        let (a, b, c) = self.extents();
        a * b * c
    }

    pub fn geometry(&self, t: usize, h: usize, w: usize) -> ConvGeometry {
        let (kt, kh, kw) = self.extents();
        geometry(kt, kh, kw, self.mode, t, h, w)
    }
}

fn check_extents(kt: usize, kh: usize, kw: usize, mode: ConvMode) -> Result<()> {
    if kt == 0 || kh == 0 || kw == 0 {
        return Err(Error::Config("kernel extents must be positive".into()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!("spatial kernel extents must be odd, got {kh}x{kw}")));
    }
    if mode == ConvMode::Centered && kt % 2 == 0 {
        return Err(Error::Config(format!("centered temporal extent must be odd, got {kt}")));
    }
    Ok(())
}

pub fn geometry(kt: usize, kh: usize, kw: usize, mode: ConvMode, t: usize, h: usize, w: usize) -> ConvGeometry {
    let offset_t = match mode {
        ConvMode::Centered => -((kt / 2) as isize),
        ConvMode::CausalTemporal => -((kt - 1) as isize),
    };
    ConvGeometry {
        t,
        h,
        w,
        kt,
        kh,
        kw,
        offset_t,
        offset_h: -((kh / 2) as isize),
        offset_w: -((kw / 2) as isize),
        out_t0: 0,
    }
}

/// Kernel whose only nonzero tap (weight 1 per channel) sits at temporal
/// offset 0 and the spatial center: the identity map.
pub fn dirac_init<F: Scalar>(kt: usize, kh: usize, kw: usize, d: usize, mode: ConvMode) -> Result<ConvKernel<F>> {
    check_extents(kt, kh, kw, mode)?;
    let mut weights = Tensor::zeros(&[kt, kh, kw, d]);
    let it = match mode {
        ConvMode::Centered => kt / 2,
        ConvMode::CausalTemporal => kt - 1,
    };
    let tap = (it * kh + kh / 2) * kw + kw / 2;
    for c in 0..d {
        weights.data_mut()[tap * d + c] = F::one();
    }
    ConvKernel::new(weights, mode)
}

/// Visits `(output row, source row, tap)` triples in a fixed order.
#[inline]
fn for_each_tap(geom: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let (t, h, w) = (geom.t as isize, geom.h as isize, geom.w as isize);
    for to in geom.out_t0..geom.t {
        for ho in 0..geom.h {
            for wo in 0..geom.w {
                let out_row = ((to - geom.out_t0) * geom.h + ho) * geom.w + wo;
                for i in 0..geom.kt {
                    let ts = to as isize + geom.offset_t + i as isize;
                    if ts < 0 || ts >= t {
                        continue;
                    }
                    for j in 0..geom.kh {
                        let hs = ho as isize + geom.offset_h + j as isize;
                        if hs < 0 || hs >= h {
                            continue;
                        }
                        for k in 0..geom.kw {
                            let ws = wo as isize + geom.offset_w + k as isize;
                            if ws < 0 || ws >= w {
                                continue;
                            }
                            let src = ((ts * h + hs) * w + ws) as usize;
                            f(out_row, src, (i * geom.kh + j) * geom.kw + k);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<F: Scalar>(vol: &Tensor<F>, kernel: &Tensor<F>, geom: &ConvGeometry) -> Result<Tensor<F>> {
    let d = vol.cols();
    if vol.rows() != geom.t * geom.h * geom.w || kernel.rows() != geom.taps() || kernel.cols() != d {
        return Err(Error::shape(
            "dwconv3d",
            format!("volume {:?} / kernel {:?} vs geometry {geom:?}", vol.shape(), kernel.shape()),
        ));
    }
    let mut out = vec![F::zero(); geom.out_voxels() * d];
    let (vd, kd) = (vol.data(), kernel.data());
    for_each_tap(geom, |o, s, tap| {
        let (o, s, tap) = (o * d, s * d, tap * d);
        for c in 0..d {
            out[o + c] = out[o + c] + kd[tap + c] * vd[s + c];
        }
    });
    Tensor::new(&[geom.out_voxels(), d], out)
}

pub(crate) fn conv3d_backward<F: Scalar>(
    vol: &Tensor<F>,
    kernel: &Tensor<F>,
    g: &Tensor<F>,
    geom: &ConvGeometry,
) -> (Tensor<F>, Tensor<F>) {
    let d = vol.cols();
    let mut dv = Tensor::zeros(vol.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    let (vd, kd, gd) = (vol.data(), kernel.data(), g.data());
    {
        let dvd = dv.data_mut();
        for_each_tap(geom, |o, s, tap| {
            let (o, s, tap) = (o * d, s * d, tap * d);
            for c in 0..d {
                dvd[s + c] = dvd[s + c] + gd[o + c] * kd[tap + c];
            }
        });
    }
    {
        let dkd = dk.data_mut();
        for_each_tap(geom, |o, s, tap| {
            let (o, s, tap) = (o * d, s * d, tap * d);
            for c in 0..d {
                dkd[tap + c] = dkd[tap + c] + gd[o + c] * vd[s + c];
            }
        });
    }
    (dv, dk)
}

/// Places visual rows of `tokens` at their grid coordinates: `[T, H, W, d]`.
pub fn pack_to_volume<F: Scalar>(tokens: &Tensor<F>, grid: &SpatialGrid) -> Result<Tensor<F>> {
    if tokens.rows() != grid.stream_len() {
        return Err(Error::Grid(format!("{} tokens for a grid over {}", tokens.rows(), grid.stream_len())));
    }
    let d = tokens.cols();
    tokens.gather_rows(grid.visual_positions())?.reshape(&[grid.frames(), grid.height(), grid.width(), d])
}

/// Inverse of [`pack_to_volume`]; text rows come from `original` unchanged.
pub fn scatter_to_tokens<F: Scalar>(volume: &Tensor<F>, grid: &SpatialGrid, original: &Tensor<F>) -> Result<Tensor<F>> {
    if original.rows() != grid.stream_len() || volume.len() != grid.num_visual() * original.cols() {
        return Err(Error::shape(
            "scatter_to_tokens",
            format!("volume {:?}, tokens {:?}", volume.shape(), original.shape()),
        ));
    }
    let tape = Tape::no_grad();
    let base = tape.constant(original.as_matrix());
    let rows = tape.constant(volume.as_matrix().reshape(&[grid.num_visual(), original.cols()])?);
    Ok(tape.scatter_rows(&base, &rows, grid.visual_positions())?.value().clone())
}

/// Depthwise convolution of a `[T, H, W, d]` volume with zero padding.
pub fn dwconv3d<F: Scalar>(volume: &Tensor<F>, kernel: &ConvKernel<F>) -> Result<Tensor<F>> {
    if volume.rank() != 4 || volume.shape()[3] != kernel.channels() {
        return Err(Error::shape("dwconv3d", format!("volume {:?} vs {} channels", volume.shape(), kernel.channels())));
    }
    let s = volume.shape();
    let geom = kernel.geometry(s[0], s[1], s[2]);
    let flat = volume.as_matrix().reshape(&[s[0] * s[1] * s[2], s[3]])?;
    conv3d_forward(&flat, &kernel.tap_matrix(), &geom)?.reshape(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_frame_pack_is_grid_order() {
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng(1));
        let g = SpatialGrid::contiguous(4, 0, 1, 2, 2).unwrap();
        let v = pack_to_volume(&x, &g).unwrap();
        assert_eq!(v.shape(), &[1, 2, 2, 3]);
        assert_eq!(v.data(), x.data());
    }

    #[test]
    fn interleaved_round_trip() {
        // text, frame0 (2x2), text, frame1 (2x2), text
        let mask = [false, true, true, true, true, false, true, true, true, true, false];
        let g = SpatialGrid::from_mask(&mask, 2, 2, 2).unwrap();
        let x = Tensor::<f64>::randn(&[11, 3], 1.0, &mut rng(2));
        let v = pack_to_volume(&x, &g).unwrap();
        assert_eq!(scatter_to_tokens(&v, &g, &x).unwrap(), x);
        let scrambled = Tensor::<f64>::randn(&[11, 3], 1.0, &mut rng(3));
        let back = scatter_to_tokens(&v, &g, &scrambled).unwrap();
        for i in 0..11 {
            let want = if mask[i] { x.row(i) } else { scrambled.row(i) };
            assert_eq!(back.row(i), want);
        }
    }

    #[test]
    fn shuffled_bijection_positions() {
        // Frame 0 occupies positions 0..4 in a scrambled cell order, frame 1 5..9.
        let positions = vec![2, 0, 3, 1, 8, 5, 6, 7];
        let g = SpatialGrid::new(9, 2, 2, 2, positions.clone()).unwrap();
        let table = [
            ((0, 0, 0), 2),
            ((0, 0, 1), 0),
            ((0, 1, 0), 3),
            ((0, 1, 1), 1),
            ((1, 0, 0), 8),
            ((1, 0, 1), 5),
            ((1, 1, 0), 6),
            ((1, 1, 1), 7),
        ];
        for ((t, h, w), p) in table {
            assert_eq!(g.position_of(t, h, w), Some(p));
            assert_eq!(g.voxel_of(p), Some((t, h, w)));
        }
        assert!(!g.is_visual(4));
        let x = Tensor::<f64>::randn(&[9, 2], 1.0, &mut rng(4));
        let v = pack_to_volume(&x, &g).unwrap();
        for (k, &p) in positions.iter().enumerate() {
            assert_eq!(&v.data()[k * 2..k * 2 + 2], x.row(p));
        }
    }

    #[test]
    fn grid_validation() {
        assert!(SpatialGrid::new(4, 1, 2, 2, vec![0, 1, 2]).is_err());
        assert!(SpatialGrid::new(4, 1, 2, 2, vec![0, 1, 2, 2]).is_err());
        assert!(SpatialGrid::new(4, 1, 2, 2, vec![0, 1, 2, 9]).is_err());
        // frame 1 interleaves with frame 0
        assert!(SpatialGrid::new(8, 2, 1, 2, vec![0, 2, 1, 3]).is_err());
        let x = Tensor::<f64>::zeros(&[5, 2]);
        let g = SpatialGrid::contiguous(4, 0, 1, 2, 2).unwrap();
        assert!(pack_to_volume(&x, &g).is_err());
    }

    #[test]
    fn text_only_scatter_is_identity() {
        let g = SpatialGrid::text_only(5, 2, 2);
        let x = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng(5));
        let v = pack_to_volume(&x, &g).unwrap();
        assert_eq!(v.len(), 0);
        assert_eq!(scatter_to_tokens(&v, &g, &x).unwrap(), x);
    }

    #[test]
    fn dirac_kernels() {
        let k = dirac_init::<f64>(3, 3, 3, 4, ConvMode::Centered).unwrap();
        let w = &k.weights;
        for c in 0..4 {
            assert_eq!(w.data()[((1 * 3 + 1) * 3 + 1) * 4 + c], 1.0);
        }
        assert_eq!(w.data().iter().filter(|&&x| x == 0.0).count(), 26 * 4);

        let k = dirac_init::<f64>(3, 3, 3, 2, ConvMode::CausalTemporal).unwrap();
        // temporal tap index 2 is offset 0
        assert_eq!(k.weights.data()[((2 * 3 + 1) * 3 + 1) * 2], 1.0);
        assert_eq!(k.weights.sum(), 2.0);

        assert!(dirac_init::<f64>(3, 2, 3, 2, ConvMode::Centered).is_err());
        assert!(dirac_init::<f64>(2, 3, 3, 2, ConvMode::Centered).is_err());
        assert!(dirac_init::<f64>(2, 3, 3, 2, ConvMode::CausalTemporal).is_ok());
    }

    #[test]
    fn dirac_is_exact_identity() {
        let vol = Tensor::<f64>::randn(&[3, 4, 4, 5], 1.0, &mut rng(6));
        for mode in [ConvMode::Centered, ConvMode::CausalTemporal] {
            let k = dirac_init(3, 3, 3, 5, mode).unwrap();
            assert_eq!(dwconv3d(&vol, &k).unwrap(), vol);
        }
    }

    #[test]
    fn mixed_stream_dirac_round_trip_is_bitwise() {
        let mask = [false, true, true, true, true, false, true, true, true, true, false];
        let g = SpatialGrid::from_mask(&mask, 2, 2, 2).unwrap();
        let x = Tensor::<f64>::randn(&[11, 3], 1.0, &mut rng(7));
        let k = dirac_init(3, 3, 3, 3, ConvMode::CausalTemporal).unwrap();
        let v = dwconv3d(&pack_to_volume(&x, &g).unwrap(), &k).unwrap();
        assert_eq!(scatter_to_tokens(&v, &g, &x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let vol = Tensor::<f64>::randn(&[3, 3, 3, 2], 1.0, &mut rng(8));
        let k = ConvKernel::new(Tensor::full(&[3, 3, 3, 2], 1.0), ConvMode::Centered).unwrap();
        let out = dwconv3d(&vol, &k).unwrap();
        for c in 0..2 {
            let mut brute = 0.0;
            for t in 0..3 {
                for h in 0..3 {
                    for w in 0..3 {
                        brute += vol.data()[((t * 3 + h) * 3 + w) * 2 + c];
                    }
                }
            }
            let centre = out.data()[((1 * 3 + 1) * 3 + 1) * 2 + c];
            assert!((centre - brute).abs() <= 1e-12);
        }
        let zero = ConvKernel::new(Tensor::zeros(&[3, 3, 3, 2]), ConvMode::Centered).unwrap();
        assert!(dwconv3d(&vol, &zero).unwrap().data().iter().all(|&x| x == 0.0));
    }

    fn random_kernel(mode: ConvMode, d: usize, seed: u64) -> ConvKernel<f64> {
        ConvKernel::new(Tensor::randn(&[3, 3, 3, d], 1.0, &mut rng(seed)), mode).unwrap()
    }

    #[test]
    fn locality_and_depthwise_structure() {
        let vol = Tensor::<f64>::randn(&[3, 4, 4, 2], 1.0, &mut rng(9));
        let k = random_kernel(ConvMode::Centered, 2, 10);
        let base = dwconv3d(&vol, &k).unwrap();
        for t in 0..3 {
            for h in 0..4 {
                for w in 0..4 {
                    let mut p = vol.clone();
                    p.data_mut()[((t * 4 + h) * 4 + w) * 2] += 1.0;
                    let out = dwconv3d(&p, &k).unwrap();
                    for to in 0..3usize {
                        for ho in 0..4usize {
                            for wo in 0..4usize {
                                let k0 = ((to * 4 + ho) * 4 + wo) * 2;
                                let near = to.abs_diff(t) <= 1 && ho.abs_diff(h) <= 1 && wo.abs_diff(w) <= 1;
                                if !near {
                                    assert_eq!(out.data()[k0], base.data()[k0]);
                                }
                                // channel 1 never changes
                                assert_eq!(out.data()[k0 + 1], base.data()[k0 + 1]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn causal_mode_ignores_future_frames() {
        let vol = Tensor::<f64>::randn(&[4, 3, 3, 2], 1.0, &mut rng(11));
        let k = random_kernel(ConvMode::CausalTemporal, 2, 12);
        let base = dwconv3d(&vol, &k).unwrap();
        let per = 3 * 3 * 2;
        for t in 0..4 {
            let mut p = vol.clone();
            for v in &mut p.data_mut()[(t + 1).min(4) * per..] {
                *v = 100.0;
            }
            let out = dwconv3d(&p, &k).unwrap();
            assert_eq!(&out.data()[..(t + 1) * per], &base.data()[..(t + 1) * per]);
        }
    }

    #[test]
    fn partial_output_range_matches_full_conv() {
        let vol = Tensor::<f64>::randn(&[4, 2, 3, 2], 1.0, &mut rng(13));
        let k = random_kernel(ConvMode::CausalTemporal, 2, 14);
        let full = dwconv3d(&vol, &k).unwrap();
        let mut geom = k.geometry(4, 2, 3);
        geom.out_t0 = 3;
        let flat = vol.as_matrix().reshape(&[24, 2]).unwrap();
        let last = conv3d_forward(&flat, &k.tap_matrix(), &geom).unwrap();
        assert_eq!(last.data(), &full.data()[3 * 12..]);
    }
}
