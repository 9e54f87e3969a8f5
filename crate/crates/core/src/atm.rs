//! The arithmetic temporal module: interaction, clue extraction, domain
//! transformation back onto the per-frame stem, and the multi-operation
//! combination styles. Also hosts the depthwise temporal convolution.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::interact::{span_and_interact, ArithOp, ClipFeatures, ContextSpec, InteractionTensor, MulParams};
use crate::nn::{Conv2d, Init, ParamId, ParamStore};
use crate::tensor::{avg_pool2, conv2d, upsample2, ConvParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// One fully-connected layer per spatial position.
    Fc,
    /// Three fully-connected layers per spatial position.
    Mlp,
    /// Two 3×3 convolutions.
    #[default]
    ConvStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineStyle {
    #[default]
    Single,
    Cascade,
    Parallel,
    AtmStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtmConfig {
    pub ops: Vec<ArithOp>,
    pub context: ContextSpec,
    pub mul: MulParams,
    pub eps: f64,
    pub extractor: ExtractorKind,
    /// 2× pool before the interaction, 2× upsample before the transform.
    pub reduce_spatial: bool,
    pub combine: CombineStyle,
    /// Extractor output width; defaults to the host channel count.
    pub clue_channels: Option<usize>,
    /// Biases in the extractor and projection layers.
    pub branch_bias: bool,
    /// Shift division inputs by their per-clip minimum so the log argument stays ≥ ε.
    pub shift_div_inputs: bool,
}

impl Default for AtmConfig {
    fn default() -> Self {
        Self {
            ops: vec![ArithOp::Sub],
            context: ContextSpec::default(),
            mul: MulParams::default(),
            eps: 1.0,
            extractor: ExtractorKind::ConvStack,
            reduce_spatial: true,
            combine: CombineStyle::Single,
            clue_channels: None,
            branch_bias: false,
            shift_div_inputs: false,
        }
    }
}

impl AtmConfig {
    pub fn single(op: ArithOp) -> Self {
        Self { ops: vec![op], ..Self::default() }
    }

    pub fn combined(ops: &[ArithOp], combine: CombineStyle) -> Self {
        Self { ops: ops.to_vec(), combine, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::Config("ATM needs at least one operation".into()));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if self.ops[..i].contains(op) {
                return Err(Error::Config(format!("operation {op} listed twice")));
            }
        }
        self.validate_style()?;
        self.context.validate()?;
        self.mul.validate()?;
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.clue_channels == Some(0) {
            return Err(Error::Config("clue_channels must be positive".into()));
        }
        Ok(())
    }

    fn validate_style(&self) -> Result<()> {
        match (self.combine, self.ops.len()) {
            (CombineStyle::Single, 1) => Ok(()),
            (CombineStyle::Single, n) => Err(Error::Config(format!("single style takes one operation, got {n}"))),
            (style, n) if n < 2 => {
                Err(Error::Config(format!("{style:?} style needs at least two operations, got {n}")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        let ops: String = self.ops.iter().map(|o| o.name()).collect::<Vec<_>>().join("+");
        format!("{ops}/z{}/{:?}/{:?}", self.context.z_range, self.extractor, self.combine).to_lowercase()
    }
}

/// Per-position or spatial clue extractor applied to every (t, z) slice.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub kind: ExtractorKind,
    layers: Vec<Conv2d>,
}

impl Extractor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: ExtractorKind,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Self {
        let plan: &[(usize, usize, usize)] = match kind {
            ExtractorKind::Fc => &[(c_in, c_out, 1)],
            ExtractorKind::Mlp => &[(c_in, c_out, 1), (c_out, c_out, 1), (c_out, c_out, 1)],
            ExtractorKind::ConvStack => &[(c_in, c_out, 3), (c_out, c_out, 3)],
        };
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(a, b, k))| Conv2d::new(store, rng, &format!("{name}.{i}"), a, b, k, 1, bias, Init::Uniform))
            .collect();
        Self { kind, layers }
    }

    /// `[N, C_in, H, W]` to `[N, C_out, H, W]`, rectifier between layers.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.relu();
            }
            h = layer.forward(store, &h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| std::iter::once(l.weight).chain(l.bias)).collect()
    }
}

/// Runs `extractor` over every (t, z) slice, keeping the T×Z structure.
pub fn feature_extract(store: &ParamStore, extractor: &Extractor, y: &InteractionTensor) -> Result<InteractionTensor> {
    let s = y.data.shape().to_vec();
    let out = extractor.forward(store, &y.as_batch()?)?;
    let data = out.reshape(&[s[0], s[1], out.shape()[1], s[3], s[4]])?;
    InteractionTensor::new(data, y.frames, y.op)
}

/// Regroups `[B·T, Z, C_e, H, W]` clues to `[B·T, Z·C_e, H, W]`, projects to
/// the stem width with a 1×1 convolution and adds the result to `x`.
pub fn domain_transform(clues: &Tensor, x: &ClipFeatures, projection: &ConvParams) -> Result<ClipFeatures> {
    let s = clues.shape();
    let xs = x.data.shape();
    if s.len() != 5 || s[0] != xs[0] || s[3] != xs[2] || s[4] != xs[3] {
        return shape_err(format!("domain_transform: clues {s:?} for features {xs:?}"));
    }
    let ws = projection.weight.shape();
    if ws[0] != xs[1] || ws[1] != s[1] * s[2] || ws[2] != 1 || ws[3] != 1 {
        return shape_err(format!(
            "domain_transform: projection {ws:?} for {} clue and {} stem channels",
            s[1] * s[2],
            xs[1]
        ));
    }
    let grouped = clues.reshape(&[s[0], s[1] * s[2], s[3], s[4]])?;
    let delta = conv2d(&grouped, projection)?;
    ClipFeatures::new(x.data.add(&delta)?, x.frames)
}

#[derive(Debug, Clone)]
struct Branch {
    op: ArithOp,
    extractor: Extractor,
}

/// A configured ATM whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AtmBlock {
    cfg: AtmConfig,
    channels: usize,
    clue_channels: usize,
    branches: Vec<Branch>,
    projection: Conv2d,
}

impl AtmBlock {
    /// Projection weights start at zero, so a new block is the identity.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &AtmConfig,
        channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let ce = cfg.clue_channels.unwrap_or(channels);
        let z = cfg.context.z_range;
        let branches = cfg
            .ops
            .iter()
            .enumerate()
            .map(|(i, &op)| {
                let c_in = branch_input_channels(cfg, i, channels, ce);
                let c_prime = op.out_channels(c_in, &cfg.mul);
                let extractor = Extractor::new(
                    store,
                    rng,
                    &format!("{name}.{}", op.name()),
                    cfg.extractor,
                    c_prime,
                    ce,
                    cfg.branch_bias,
                );
                Branch { op, extractor }
            })
            .collect();
        let proj_in = z * ce * if cfg.combine == CombineStyle::AtmStyle { cfg.ops.len() } else { 1 };
        let projection =
            Conv2d::new(store, rng, &format!("{name}.proj"), proj_in, channels, 1, 1, cfg.branch_bias, Init::Zeros);
        Ok(Self { cfg: cfg.clone(), channels, clue_channels: ce, branches, projection })
    }

    pub fn config(&self) -> &AtmConfig {
        &self.cfg
    }

    pub fn projection(&self) -> &Conv2d {
        &self.projection
    }

    fn interact(&self, x: &ClipFeatures, op: ArithOp) -> Result<InteractionTensor> {
        let src = if op == ArithOp::Div && self.cfg.shift_div_inputs {
            ClipFeatures::new(x.data.shift_by_group_min(x.clips())?, x.frames)?
        } else {
            x.clone()
        };
        span_and_interact(&src, &self.cfg.context, op, &self.cfg.mul, self.cfg.eps)
    }

    fn branch_clues(&self, store: &ParamStore, x: &ClipFeatures, branch: &Branch) -> Result<Tensor> {
        let y = self.interact(x, branch.op)?;
        Ok(feature_extract(store, &branch.extractor, &y)?.data)
    }

    /// Extracted clues `[B·T, Z, C_e·k, h, w]` before the domain transform,
    /// computed at the working resolution of `work`.
    pub fn clues(&self, store: &ParamStore, work: &ClipFeatures) -> Result<Tensor> {
        if work.channels() != self.channels {
            return shape_err(format!("ATM built for {} channels, got {}", self.channels, work.channels()));
        }
        match self.cfg.combine {
            CombineStyle::Single => self.branch_clues(store, work, &self.branches[0]),
            CombineStyle::Parallel => {
                let mut acc = self.branch_clues(store, work, &self.branches[0])?;
                for b in &self.branches[1..] {
                    acc = acc.add(&self.branch_clues(store, work, b)?)?;
                }
                Ok(acc)
            }
            CombineStyle::AtmStyle => {
                let parts =
                    self.branches.iter().map(|b| self.branch_clues(store, work, b)).collect::<Result<Vec<_>>>()?;
                Tensor::concat(&parts, 2)
            }
            CombineStyle::Cascade => {
                let mut clues = self.branch_clues(store, work, &self.branches[0])?;
                for b in &self.branches[1..] {
                    let s = clues.shape().to_vec();
                    let stage = ClipFeatures::new(clues.reshape(&[s[0], s[1] * s[2], s[3], s[4]])?, work.frames)?;
                    clues = self.branch_clues(store, &stage, b)?;
                }
                Ok(clues)
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &ClipFeatures) -> Result<ClipFeatures> {
        let work = if self.cfg.reduce_spatial { ClipFeatures::new(avg_pool2(&x.data)?, x.frames)? } else { x.clone() };
        let mut clues = self.clues(store, &work)?;
        if self.cfg.reduce_spatial {
            clues = upsample2(&clues)?;
        }
        domain_transform(&clues, x, &self.projection.params(store)?)
    }

    pub fn clue_channels(&self) -> usize {
        self.clue_channels
    }
}

fn branch_input_channels(cfg: &AtmConfig, index: usize, channels: usize, ce: usize) -> usize {
    if cfg.combine == CombineStyle::Cascade && index > 0 {
        cfg.context.z_range * ce
    } else {
        channels
    }
}

/// One ATM with a single operation.
pub fn atm_forward(store: &ParamStore, block: &AtmBlock, x: &ClipFeatures) -> Result<ClipFeatures> {
    if block.cfg.combine != CombineStyle::Single {
        return Err(Error::Config(format!("atm_forward expects the single style, got {:?}", block.cfg.combine)));
    }
    block.forward(store, x)
}

/// An ATM combining several operations per its [`CombineStyle`].
pub fn combine_atms(store: &ParamStore, block: &AtmBlock, x: &ClipFeatures) -> Result<ClipFeatures> {
    block.cfg.validate_style()?;
    block.forward(store, x)
}

/// Depthwise length-3 temporal kernel per channel, `[C, 3]`.
#[derive(Debug, Clone)]
pub struct TConvParams {
    pub weight: Tensor,
}

impl TConvParams {
    /// Centre tap 1, side taps 0.
    pub fn identity(channels: usize) -> Self {
        Self { weight: Tensor::from_fn(&[channels, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 }) }
    }
}

/// Depthwise temporal convolution of `[B·T, C, ..]` with a `[C, 3]` kernel,
/// zero-padded at clip ends. Taps are applied to frames t−1, t, t+1 in order.
pub fn tconv(x: &Tensor, frames: usize, weight: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 || frames == 0 || !s[0].is_multiple_of(frames) {
        return shape_err(format!("tconv: input {s:?} with {frames} frames"));
    }
    let c = s[1];
    if weight.shape() != [c, 3] {
        return shape_err(format!("tconv: kernel {:?} for {c} channels", weight.shape()));
    }
    let rows = s[0];
    let inner = x.numel() / (rows * c);
    let row_len = c * inner;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let t = r % frames;
        let dst = &mut out[r * row_len..(r + 1) * row_len];
        for k in 0..3 {
            let src_t = t as isize + k as isize - 1;
            if src_t < 0 || src_t >= frames as isize {
                continue;
            }
            let src_r = (r as isize + k as isize - 1) as usize;
            let src = &x.data()[src_r * row_len..(src_r + 1) * row_len];
            for ch in 0..c {
                let wv = weight.data()[ch * 3 + k];
                let d = &mut dst[ch * inner..(ch + 1) * inner];
                for (o, &v) in d.iter_mut().zip(&src[ch * inner..(ch + 1) * inner]) {
                    *o += wv * v;
                }
            }
        }
    }
    let (xc, wc) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        s.to_vec(),
        out,
        vec![x.clone(), weight.clone()],
        Box::new(move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; rows * row_len]);
            let mut gw = needs[1].then(|| vec![0.0; c * 3]);
            for r in 0..rows {
                let t = r % frames;
                let go = &g[r * row_len..(r + 1) * row_len];
                for k in 0..3 {
                    let src_t = t as isize + k as isize - 1;
                    if src_t < 0 || src_t >= frames as isize {
                        continue;
                    }
                    let src_r = (r as isize + k as isize - 1) as usize;
                    for ch in 0..c {
                        let gseg = &go[ch * inner..(ch + 1) * inner];
                        let off = src_r * row_len + ch * inner;
                        if let Some(gx) = gx.as_mut() {
                            let wv = wc.data()[ch * 3 + k];
                            for (d, &gv) in gx[off..off + inner].iter_mut().zip(gseg) {
                                *d += wv * gv;
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xs = &xc.data()[off..off + inner];
                            gw[ch * 3 + k] += gseg.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            vec![gx, gw]
        }),
    ))
}

/// Trainable temporal convolution layer, identity at initialization.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub weight: ParamId,
}

impl TemporalConv {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self { weight: store.add(format!("{name}.weight"), TConvParams::identity(channels).weight) }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, frames: usize) -> Result<Tensor> {
        tconv(x, frames, store.get(self.weight))
    }
}

/// Multiply-accumulate counts of one ATM, split by stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MacCount {
    pub interaction: u64,
    pub extractor: u64,
    pub transform: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.interaction + self.extractor + self.transform
    }
}

fn extractor_macs(kind: ExtractorKind, c_in: u64, c_out: u64) -> u64 {
    match kind {
        ExtractorKind::Fc => c_in * c_out,
        ExtractorKind::Mlp => c_in * c_out + 2 * c_out * c_out,
        ExtractorKind::ConvStack => 9 * (c_in * c_out + c_out * c_out),
    }
}

/// Closed-form MAC count for an ATM inserted on a `[T, C, H, W]` stem stage.
///
/// Element-wise operations count one MAC per output value; the local
/// multiplication counts P² · C per position. The transform runs at full
/// resolution.
pub fn estimate_flops(cfg: &AtmConfig, stem_shape: [usize; 4]) -> Result<MacCount> {
    cfg.validate()?;
    let [t, c, h, w] = stem_shape;
    if cfg.reduce_spatial && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::Config(format!("spatial reduction needs even dims, got {h}×{w}")));
    }
    let (hw, ww) = if cfg.reduce_spatial { (h / 2, w / 2) } else { (h, w) };
    let ce = cfg.clue_channels.unwrap_or(c);
    let z = cfg.context.z_range;
    let positions = (t * z * hw * ww) as u64;
    let mut count = MacCount::default();
    for (i, &op) in cfg.ops.iter().enumerate() {
        let c_in = branch_input_channels(cfg, i, c, ce) as u64;
        count.interaction += positions
            * match op {
                ArithOp::Mul => cfg.mul.offsets() as u64 * c_in,
                _ => c_in,
            };
        let c_prime = op.out_channels(c_in as usize, &cfg.mul) as u64;
        count.extractor += positions * extractor_macs(cfg.extractor, c_prime, ce as u64);
    }
    let groups = if cfg.combine == CombineStyle::AtmStyle { cfg.ops.len() } else { 1 };
    count.transform = (t * h * w * z * ce * groups * c) as u64;
    Ok(count)
}
