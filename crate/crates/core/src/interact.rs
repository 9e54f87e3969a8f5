//! Context spanning and the four pair-wise arithmetic operations between
//! frame features.
//!
//! Frames are indexed from 0. Operations accept any tensor whose trailing
//! three axes are channel, height and width, so a whole stack of frame pairs
//! is processed in one call.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{check_same_shape, Tensor};

/// Pair-wise operation ψ(anchor, context).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithOp {
    #[serde(alias = "+")]
    Add,
    #[serde(alias = "-")]
    Sub,
    #[serde(alias = "x", alias = "*")]
    Mul,
    #[serde(alias = "/")]
    Div,
}

impl ArithOp {
    pub const ALL: [ArithOp; 4] = [ArithOp::Add, ArithOp::Sub, ArithOp::Mul, ArithOp::Div];

    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "x",
            ArithOp::Div => "/",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArithOp::Add => "add",
            ArithOp::Sub => "sub",
            ArithOp::Mul => "mul",
            ArithOp::Div => "div",
        }
    }

    /// Output channels for an input with `channels` channels.
    pub fn out_channels(self, channels: usize, mul: &MulParams) -> usize {
        match self {
            ArithOp::Mul => mul.offsets(),
            _ => channels,
        }
    }
}

impl fmt::Display for ArithOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Out-of-range context frames are clamped to the first/last frame.
    #[default]
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub z_range: usize,
    #[serde(default)]
    pub boundary: Boundary,
}

impl Default for ContextSpec {
    fn default() -> Self {
        Self { z_range: 4, boundary: Boundary::Clamp }
    }
}

impl ContextSpec {
    pub fn new(z_range: usize) -> Result<Self> {
        let spec = Self { z_range, boundary: Boundary::Clamp };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_range == 0 || (self.z_range > 1 && self.z_range % 2 == 1) {
            return Err(Error::Config(format!("context range must be 1 or even, got {}", self.z_range)));
        }
        Ok(())
    }
}

/// Ordered context frames of anchor `t` in a clip of `frames` frames.
///
/// Z = 1 pairs the anchor with the next frame; even Z takes the previous Z/2
/// then the next Z/2 frames. Indices are clamped into the clip.
pub fn context_indices(t: usize, frames: usize, spec: &ContextSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    if t >= frames {
        return Err(Error::InvalidArgument(format!("anchor {t} outside a clip of {frames} frames")));
    }
    let last = frames as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    let t = t as isize;
    let z = spec.z_range as isize;
    Ok(if z == 1 {
        vec![clamp(t + 1)]
    } else {
        (1..=z / 2).rev().map(|d| clamp(t - d)).chain((1..=z / 2).map(|d| clamp(t + d))).collect()
    })
}

/// Neighbourhood of the local multiplication: P×P offsets, P odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MulParams {
    pub neighborhood: usize,
}

impl Default for MulParams {
    fn default() -> Self {
        Self { neighborhood: 9 }
    }
}

impl MulParams {
    pub fn new(neighborhood: usize) -> Result<Self> {
        let p = Self { neighborhood };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighborhood.is_multiple_of(2) {
            return Err(Error::Config(format!("neighbourhood must be odd, got {}", self.neighborhood)));
        }
        Ok(())
    }

    pub fn max_offset(&self) -> usize {
        (self.neighborhood - 1) / 2
    }

    pub fn offsets(&self) -> usize {
        self.neighborhood * self.neighborhood
    }

    /// Offsets (i, j) in output-channel order: row-major over {-k..k}².
    pub fn offset_list(&self) -> Vec<(isize, isize)> {
        let k = self.max_offset() as isize;
        (-k..=k).flat_map(|i| (-k..=k).map(move |j| (i, j))).collect()
    }
}

/// Feature stack of one or more clips: `[B·T, C, H, W]`, clips contiguous.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    pub data: Tensor,
    pub frames: usize,
}

impl ClipFeatures {
    pub fn new(data: Tensor, frames: usize) -> Result<Self> {
        if data.ndim() != 4 {
            return shape_err(format!("clip features must be [B·T, C, H, W], got {:?}", data.shape()));
        }
        if frames == 0 || !data.shape()[0].is_multiple_of(frames) {
            return shape_err(format!("{} rows do not split into clips of {frames} frames", data.shape()[0]));
        }
        Ok(Self { data, frames })
    }

    /// A single clip of shape `[T, C, H, W]`.
    pub fn single(data: Tensor) -> Result<Self> {
        let t = data.shape().first().copied().unwrap_or(0);
        Self::new(data, t)
    }

    pub fn clips(&self) -> usize {
        self.data.shape()[0] / self.frames
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[2], self.data.shape()[3])
    }
}

/// Pair-wise interactions `[B·T, Z, C', H, W]` produced by one operation.
#[derive(Debug, Clone)]
pub struct InteractionTensor {
    pub data: Tensor,
    pub frames: usize,
    pub op: ArithOp,
}

impl InteractionTensor {
    pub fn new(data: Tensor, frames: usize, op: ArithOp) -> Result<Self> {
        if data.ndim() != 5 || frames == 0 || !data.shape()[0].is_multiple_of(frames) {
            return shape_err(format!("interaction tensor {:?} with {frames} frames", data.shape()));
        }
        Ok(Self { data, frames, op })
    }

    pub fn z_range(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[3], self.data.shape()[4])
    }

    /// `[B·T·Z, C', H, W]`: every (t, z) slice as a batch element.
    pub fn as_batch(&self) -> Result<Tensor> {
        let s = self.data.shape();
        self.data.reshape(&[s[0] * s[1], s[2], s[3], s[4]])
    }
}

fn check_frames(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    check_same_shape(a, b, what)?;
    if a.ndim() < 3 {
        return shape_err(format!("{what} needs [.., C, H, W], got {:?}", a.shape()));
    }
    Ok(())
}

/// Accumulated signal: A + B.
pub fn op_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_frames(a, b, "op_add")?;
    a.add(b)
}

/// Feature change: A − B.
pub fn op_sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_frames(a, b, "op_sub")?;
    a.sub(b)
}

/// Log-ratio log(A + ε) − log(B + ε).
pub fn op_div_log(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    check_frames(a, b, "op_div_log")?;
    a.add_scalar(eps).log()?.sub(&b.add_scalar(eps).log()?)
}

/// Local correlation: for each offset (i, j) of the P×P neighbourhood,
/// `out[o, h, w] = Σ_c A[c, h, w] · B[c, h + i, w + j]`, zero outside B.
pub fn op_mul_local(a: &Tensor, b: &Tensor, mul: &MulParams) -> Result<Tensor> {
    check_frames(a, b, "op_mul_local")?;
    mul.validate()?;
    let s = a.shape();
    let r = s.len();
    let (c, h, w) = (s[r - 3], s[r - 2], s[r - 1]);
    let n = a.numel() / (c * h * w);
    let offsets = mul.offset_list();
    let o_n = offsets.len();
    let plane = h * w;

    // valid output rows/cols for an offset
    let span = |d: isize, len: usize| -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d.max(0)).max(lo as isize) as usize;
        (lo, hi.min(len))
    };

    let mut out = vec![0.0; n * o_n * plane];
    for ni in 0..n {
        let a_n = &a.data()[ni * c * plane..(ni + 1) * c * plane];
        let b_n = &b.data()[ni * c * plane..(ni + 1) * c * plane];
        for (oi, &(di, dj)) in offsets.iter().enumerate() {
            let (y0, y1) = span(di, h);
            let (x0, x1) = span(dj, w);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            let dst = &mut out[(ni * o_n + oi) * plane..(ni * o_n + oi + 1) * plane];
            for ci in 0..c {
                let ap = &a_n[ci * plane..(ci + 1) * plane];
                let bp = &b_n[ci * plane..(ci + 1) * plane];
                for y in y0..y1 {
                    let by = (y as isize + di) as usize;
                    let bx0 = (x0 as isize + dj) as usize;
                    let d_row = &mut dst[y * w + x0..y * w + x1];
                    let a_row = &ap[y * w + x0..y * w + x1];
                    let b_row = &bp[by * w + bx0..by * w + bx0 + (x1 - x0)];
                    for ((d, &av), &bv) in d_row.iter_mut().zip(a_row).zip(b_row) {
                        *d += av * bv;
                    }
                }
            }
        }
    }

    let mut shape = s[..r - 3].to_vec();
    shape.extend([o_n, h, w]);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let mut ga = needs[0].then(|| vec![0.0; n * c * plane]);
            let mut gb = needs[1].then(|| vec![0.0; n * c * plane]);
            for ni in 0..n {
                let base = ni * c * plane;
                for (oi, &(di, dj)) in offsets.iter().enumerate() {
                    let (y0, y1) = span(di, h);
                    let (x0, x1) = span(dj, w);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let go = &g[(ni * o_n + oi) * plane..(ni * o_n + oi + 1) * plane];
                    for ci in 0..c {
                        let off = base + ci * plane;
                        for y in y0..y1 {
                            let by = (y as isize + di) as usize;
                            let bx0 = (x0 as isize + dj) as usize;
                            let len = x1 - x0;
                            let g_row = &go[y * w + x0..y * w + x1];
                            if let Some(ga) = ga.as_mut() {
                                let b_row = &bc.data()[off + by * w + bx0..][..len];
                                let dst = &mut ga[off + y * w + x0..][..len];
                                for ((d, &gv), &bv) in dst.iter_mut().zip(g_row).zip(b_row) {
                                    *d += gv * bv;
                                }
                            }
                            if let Some(gb) = gb.as_mut() {
                                let a_row = &ac.data()[off + y * w + x0..][..len];
                                let dst = &mut gb[off + by * w + bx0..][..len];
                                for ((d, &gv), &av) in dst.iter_mut().zip(g_row).zip(a_row) {
                                    *d += gv * av;
                                }
                            }
                        }
                    }
                }
            }
            vec![ga, gb]
        }),
    ))
}

/// Applies ψ to matching stacks of anchor and context frames.
pub fn apply_op(op: ArithOp, anchor: &Tensor, context: &Tensor, mul: &MulParams, eps: f64) -> Result<Tensor> {
    match op {
        ArithOp::Add => op_add(anchor, context),
        ArithOp::Sub => op_sub(anchor, context),
        ArithOp::Mul => op_mul_local(anchor, context, mul),
        ArithOp::Div => op_div_log(anchor, context, eps),
    }
}

/// Row indices `(anchor, context)` pairing every frame of every clip with
/// its Z context frames, in (clip, t, z) order.
pub fn pair_indices(clips: usize, frames: usize, spec: &ContextSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut anchors = Vec::with_capacity(clips * frames * spec.z_range);
    let mut contexts = Vec::with_capacity(anchors.capacity());
    for b in 0..clips {
        for t in 0..frames {
            for z in context_indices(t, frames, spec)? {
                anchors.push(b * frames + t);
                contexts.push(b * frames + z);
            }
        }
    }
    Ok((anchors, contexts))
}

/// ψ(X_t, X_z) for every anchor t and context z, stacked to `[B·T, Z, C', H, W]`.
/// The anchor is always the first operand.
pub fn span_and_interact(
    x: &ClipFeatures,
    spec: &ContextSpec,
    op: ArithOp,
    mul: &MulParams,
    eps: f64,
) -> Result<InteractionTensor> {
    let (anchors, contexts) = pair_indices(x.clips(), x.frames, spec)?;
    let a = x.data.index_select(&anchors)?;
    let b = x.data.index_select(&contexts)?;
    let y = apply_op(op, &a, &b, mul, eps)?;
    let s = y.shape();
    let rows = x.data.shape()[0];
    let data = y.reshape(&[rows, spec.z_range, s[1], s[2], s[3]])?;
    InteractionTensor::new(data, x.frames, op)
}
