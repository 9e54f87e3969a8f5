//! Miniature per-frame stems that host the ATM, plus the mean-pool baseline.
//!
//! Both stems process frames independently and only mix time through the ATM,
//! the optional temporal convolution, and the final temporal mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atm::{estimate_flops, AtmBlock, AtmConfig, CombineStyle, MacCount, TemporalConv};
use crate::error::{shape_err, Error, Result};
use crate::interact::{ArithOp, ClipFeatures};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{global_avg_pool, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    #[default]
    Cnn,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StemConfig {
    pub kind: StemKind,
    /// CNN channel width per stage; stride 2 between stages.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    /// CNN: the ATM follows this stage. Attention: it follows this layer's attention.
    pub atm_site: usize,
    pub use_tconv: bool,
    pub num_classes: usize,
    pub frames: usize,
    pub image_size: usize,
    pub in_channels: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            kind: StemKind::Cnn,
            widths: vec![8, 16, 32],
            blocks_per_stage: 2,
            layers: 4,
            width: 32,
            heads: 4,
            patch: 4,
            mlp_ratio: 4,
            atm_site: 1,
            use_tconv: false,
            num_classes: 2,
            frames: 8,
            image_size: 28,
            in_channels: 1,
        }
    }
}

impl StemConfig {
    pub fn attention() -> Self {
        Self { kind: StemKind::Attention, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("frames", self.frames),
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        match self.kind {
            StemKind::Cnn => {
                if self.widths.is_empty() || self.widths.contains(&0) || self.blocks_per_stage == 0 {
                    return Err(Error::Config(format!(
                        "cnn plan needs positive widths and blocks, got {:?} × {}",
                        self.widths, self.blocks_per_stage
                    )));
                }
                if self.atm_site >= self.widths.len() {
                    return Err(Error::Config(format!(
                        "atm_site {} outside {} stages",
                        self.atm_site,
                        self.widths.len()
                    )));
                }
            }
            StemKind::Attention => {
                if self.layers == 0 || self.width == 0 || self.heads == 0 || self.patch == 0 || self.mlp_ratio == 0 {
                    return Err(Error::Config("attention plan sizes must be positive".into()));
                }
                if !self.width.is_multiple_of(self.heads) {
                    return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
                }
                if !self.image_size.is_multiple_of(self.patch) {
                    return Err(Error::Config(format!(
                        "image size {} not divisible by patch {}",
                        self.image_size, self.patch
                    )));
                }
                if self.atm_site >= self.layers {
                    return Err(Error::Config(format!("atm_site {} outside {} layers", self.atm_site, self.layers)));
                }
            }
        }
        Ok(())
    }

    /// `[T, C, H, W]` of the features the ATM sees.
    pub fn atm_site_shape(&self) -> [usize; 4] {
        match self.kind {
            StemKind::Cnn => {
                let mut size = self.image_size;
                for _ in 0..self.atm_site {
                    size = (size - 1) / 2 + 1;
                }
                [self.frames, self.widths[self.atm_site], size, size]
            }
            StemKind::Attention => {
                let g = self.image_size / self.patch;
                [self.frames, self.width, g, g]
            }
        }
    }
}

/// A batch of clips `[B, T, C, H, W]` with pixels in [0, 1].
#[derive(Debug, Clone)]
pub struct ClipBatch {
    pub clips: Tensor,
    pub labels: Vec<usize>,
}

impl ClipBatch {
    pub fn new(clips: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = clips.shape();
        if s.len() != 5 || s[0] != labels.len() {
            return shape_err(format!("clip batch {s:?} with {} labels", labels.len()));
        }
        if let Some((i, &v)) = clips.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::PixelRange { index: i, value: v as f32 });
        }
        Ok(Self { clips, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.clips.shape()[1]
    }

    /// Frames flattened into the batch axis, `[B·T, C, H, W]`.
    pub fn frame_batch(&self) -> Result<Tensor> {
        let s = self.clips.shape();
        self.clips.reshape(&[s[0] * s[1], s[2], s[3], s[4]])
    }
}

#[derive(Debug, Clone)]
struct CnnStage {
    blocks: Vec<Conv2d>,
    tconv: Vec<TemporalConv>,
}

#[derive(Debug, Clone)]
struct CnnStem {
    stages: Vec<CnnStage>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct AttentionLayer {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    tconv: Option<TemporalConv>,
}

#[derive(Debug, Clone)]
struct AttentionStem {
    embed: Linear,
    cls: crate::nn::ParamId,
    pos: crate::nn::ParamId,
    layers: Vec<AttentionLayer>,
    norm: LayerNorm,
    head: Linear,
}

#[derive(Debug, Clone)]
enum Stem {
    Cnn(CnnStem),
    Attention(AttentionStem),
}

/// A stem with an optional ATM and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub stem_cfg: StemConfig,
    pub atm_cfg: Option<AtmConfig>,
    pub store: ParamStore,
    stem: Stem,
    atm: Option<AtmBlock>,
}

/// Anything that maps a clip batch to `[B, K]` logits under given parameters.
pub trait Classifier {
    fn params(&self) -> &ParamStore;
    fn logits_with(&self, store: &ParamStore, batch: &ClipBatch) -> Result<Tensor>;
    fn num_classes(&self) -> usize;

    fn logits(&self, batch: &ClipBatch) -> Result<Tensor> {
        self.logits_with(self.params(), batch)
    }
}

impl Model {
    /// Stem weights depend only on `seed` and the stem config, so the same seed
    /// gives the same stem with or without an ATM.
    pub fn new(stem_cfg: &StemConfig, atm_cfg: Option<&AtmConfig>, seed: u64) -> Result<Self> {
        stem_cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = match stem_cfg.kind {
            StemKind::Cnn => Stem::Cnn(build_cnn(&mut store, &mut rng, stem_cfg)),
            StemKind::Attention => Stem::Attention(build_attention(&mut store, &mut rng, stem_cfg)),
        };
        let atm_cfg = atm_cfg.map(|a| adapt_atm(a, stem_cfg));
        let atm = match &atm_cfg {
            Some(a) => {
                estimate_flops(a, stem_cfg.atm_site_shape())?;
                let mut atm_rng = ChaCha8Rng::seed_from_u64(seed);
                atm_rng.set_stream(1);
                Some(AtmBlock::new(&mut store, &mut atm_rng, "atm", a, stem_cfg.atm_site_shape()[1])?)
            }
            None => None,
        };
        Ok(Self { stem_cfg: stem_cfg.clone(), atm_cfg, store, stem, atm })
    }

    /// The ATM-free, temporal-convolution-free variant of `stem_cfg`.
    pub fn baseline(stem_cfg: &StemConfig, seed: u64) -> Result<Self> {
        Self::new(&StemConfig { use_tconv: false, ..stem_cfg.clone() }, None, seed)
    }

    /// MACs of the inserted ATM per clip; zero without one.
    pub fn atm_macs(&self) -> Result<MacCount> {
        match &self.atm_cfg {
            Some(a) => estimate_flops(a, self.stem_cfg.atm_site_shape()),
            None => Ok(MacCount::default()),
        }
    }

    fn check_batch(&self, batch: &ClipBatch) -> Result<()> {
        let s = batch.clips.shape();
        let c = &self.stem_cfg;
        if s[1] != c.frames || s[2] != c.in_channels || s[3] != c.image_size || s[4] != c.image_size {
            return Err(Error::Config(format!(
                "batch {s:?} does not match stem (T={}, C={}, {}×{})",
                c.frames, c.in_channels, c.image_size, c.image_size
            )));
        }
        Ok(())
    }

    fn apply_atm(&self, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        match &self.atm {
            Some(block) => Ok(block.forward(store, &ClipFeatures::new(x, self.stem_cfg.frames)?)?.data),
            None => Ok(x),
        }
    }

    fn cnn_forward(&self, stem: &CnnStem, store: &ParamStore, batch: &ClipBatch) -> Result<Tensor> {
        let frames = self.stem_cfg.frames;
        let mut h = batch.frame_batch()?;
        for (s, stage) in stem.stages.iter().enumerate() {
            for (b, conv) in stage.blocks.iter().enumerate() {
                if let Some(tc) = stage.tconv.get(b) {
                    h = tc.forward(store, &h, frames)?;
                }
                h = conv.forward(store, &h)?.relu();
            }
            if s == self.stem_cfg.atm_site {
                h = self.apply_atm(store, h)?;
            }
        }
        stem.head.forward(store, &global_avg_pool(&h)?.frame_mean(frames)?)
    }

    fn attention_forward(&self, stem: &AttentionStem, store: &ParamStore, batch: &ClipBatch) -> Result<Tensor> {
        let c = &self.stem_cfg;
        let g = c.image_size / c.patch;
        let n = g * g;
        let bt = batch.len() * c.frames;
        let patches = patchify(&batch.frame_batch()?, c.patch)?;
        let tokens = stem.embed.forward(store, &patches)?;
        let cls = Tensor::zeros(&[bt, 1, c.width]).add_broadcast(store.get(stem.cls))?;
        let mut x = Tensor::concat(&[cls, tokens], 1)?.add_broadcast(store.get(stem.pos))?;
        for (i, layer) in stem.layers.iter().enumerate() {
            if let Some(tc) = &layer.tconv {
                let cls = tc.forward(store, &x.narrow(1, 0, 1)?.reshape(&[bt, c.width])?, c.frames)?;
                x = Tensor::concat(&[cls.reshape(&[bt, 1, c.width])?, x.narrow(1, 1, n)?], 1)?;
            }
            let a = attention(store, layer, &layer.ln1.forward(store, &x)?, c.heads)?;
            x = x.add(&a)?;
            if i == c.atm_site && self.atm.is_some() {
                let grid = tokens_to_grid(&x.narrow(1, 1, n)?, (g, g))?;
                let spatial = grid_to_tokens(&self.apply_atm(store, grid)?)?;
                x = Tensor::concat(&[x.narrow(1, 0, 1)?, spatial], 1)?;
            }
            let h = layer.fc1.forward(store, &layer.ln2.forward(store, &x)?)?.gelu();
            x = x.add(&layer.fc2.forward(store, &h)?)?;
        }
        let cls = stem.norm.forward(store, &x.narrow(1, 0, 1)?.reshape(&[bt, c.width])?)?;
        stem.head.forward(store, &cls.frame_mean(c.frames)?)
    }
}

impl Classifier for Model {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn num_classes(&self) -> usize {
        self.stem_cfg.num_classes
    }

    fn logits_with(&self, store: &ParamStore, batch: &ClipBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        match &self.stem {
            Stem::Cnn(s) => self.cnn_forward(s, store, batch),
            Stem::Attention(s) => self.attention_forward(s, store, batch),
        }
    }
}

/// Division on features that may be negative needs the per-clip shift.
fn adapt_atm(cfg: &AtmConfig, stem: &StemConfig) -> AtmConfig {
    let mut cfg = cfg.clone();
    let div_pos = cfg.ops.iter().position(|&o| o == ArithOp::Div);
    let signed_input = match div_pos {
        Some(p) => stem.kind == StemKind::Attention || (cfg.combine == CombineStyle::Cascade && p > 0),
        None => false,
    };
    cfg.shift_div_inputs |= signed_input;
    cfg
}

fn build_cnn(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &StemConfig) -> CnnStem {
    let mut c_in = cfg.in_channels;
    let stages = cfg
        .widths
        .iter()
        .enumerate()
        .map(|(s, &w)| {
            let mut blocks = Vec::new();
            let mut tconv = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                if cfg.use_tconv && s > cfg.atm_site {
                    tconv.push(TemporalConv::new(store, &format!("stage{s}.block{b}.tconv"), c_in));
                }
                blocks.push(Conv2d::new(
                    store,
                    rng,
                    &format!("stage{s}.block{b}"),
                    c_in,
                    w,
                    3,
                    stride,
                    true,
                    Init::Uniform,
                ));
                c_in = w;
            }
            CnnStage { blocks, tconv }
        })
        .collect();
    let head = Linear::new(store, rng, "head", c_in, cfg.num_classes, true);
    CnnStem { stages, head }
}

fn build_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &StemConfig) -> AttentionStem {
    let d = cfg.width;
    let n = (cfg.image_size / cfg.patch).pow(2);
    let embed = Linear::new(store, rng, "embed", cfg.in_channels * cfg.patch * cfg.patch, d, true);
    let cls = store.add("cls", crate::nn::init_uniform(rng, &[1, d], d));
    let pos = store.add("pos", crate::nn::init_uniform(rng, &[n + 1, d], d));
    let layers = (0..cfg.layers)
        .map(|i| {
            let p = format!("layer{i}");
            AttentionLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                qkv: Linear::new(store, rng, &format!("{p}.qkv"), d, 3 * d, true),
                proj: Linear::new(store, rng, &format!("{p}.proj"), d, d, true),
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                fc1: Linear::new(store, rng, &format!("{p}.fc1"), d, d * cfg.mlp_ratio, true),
                fc2: Linear::new(store, rng, &format!("{p}.fc2"), d * cfg.mlp_ratio, d, true),
                tconv: cfg.use_tconv.then(|| TemporalConv::new(store, &format!("{p}.tconv"), d)),
            }
        })
        .collect();
    let norm = LayerNorm::new(store, "norm", d);
    let head = Linear::new(store, rng, "head", d, cfg.num_classes, true);
    AttentionStem { embed, cls, pos, layers, norm, head }
}

/// `[N, C, H, W]` to non-overlapping `p×p` patches `[N, (H/p)·(W/p), C·p·p]`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
        return shape_err(format!("patchify: {s:?} with patch {p}"));
    }
    let (n, c, gh, gw) = (s[0], s[1], s[2] / p, s[3] / p);
    x.reshape(&[n, c, gh, p, gw, p])?.permute(&[0, 2, 4, 1, 3, 5])?.reshape(&[n, gh * gw, c * p * p])
}

/// Spatial tokens `[N, h·w, D]` to a feature map `[N, D, h, w]`.
pub fn tokens_to_grid(tokens: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != h * w {
        return shape_err(format!("tokens_to_grid: {s:?} onto {h}×{w}"));
    }
    tokens.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(grid: &Tensor) -> Result<Tensor> {
    let s = grid.shape();
    if s.len() != 4 {
        return shape_err(format!("grid_to_tokens: {s:?}"));
    }
    grid.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// Multi-head self-attention over `[N, L, D]`.
fn attention(store: &ParamStore, layer: &AttentionLayer, x: &Tensor, heads: usize) -> Result<Tensor> {
    let s = x.shape();
    let (n, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let qkv = layer.qkv.forward(store, x)?.reshape(&[n, l, 3, heads, dh])?.permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[n * heads, l, dh]);
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(1.0 / (dh as f64).sqrt()).softmax_last();
    let ctx = scores.matmul(&v)?.reshape(&[n, heads, l, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n, l, d])?;
    layer.proj.forward(store, &ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interact::ContextSpec;
    use crate::interact::MulParams;
    use crate::tensor::finite_diff_check_many;
    use rand::Rng;

    fn tiny(kind: StemKind) -> StemConfig {
        StemConfig {
            kind,
            widths: vec![2, 3, 4],
            blocks_per_stage: 1,
            layers: 2,
            width: 4,
            heads: 2,
            patch: 2,
            mlp_ratio: 2,
            atm_site: 1,
            num_classes: 3,
            frames: 3,
            image_size: 8,
            ..StemConfig::default()
        }
    }

    fn tiny_atm() -> AtmConfig {
        AtmConfig {
            context: ContextSpec::new(2).unwrap(),
            mul: MulParams::new(3).unwrap(),
            clue_channels: Some(2),
            reduce_spatial: false,
            ..AtmConfig::single(ArithOp::Sub)
        }
    }

    fn batch(cfg: &StemConfig, b: usize, seed: u64) -> ClipBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [b, cfg.frames, cfg.in_channels, cfg.image_size, cfg.image_size];
        let clips = Tensor::from_fn(&shape, |_| rng.gen_range(0.0..1.0));
        ClipBatch::new(clips, (0..b).map(|i| i % cfg.num_classes).collect()).unwrap()
    }

    fn permute_frames(batch: &ClipBatch, order: &[usize]) -> ClipBatch {
        let s = batch.clips.shape().to_vec();
        let t = s[1];
        let rows: Vec<usize> = (0..s[0]).flat_map(|b| order.iter().map(move |&o| b * t + o)).collect();
        let flat = batch.frame_batch().unwrap().index_select(&rows).unwrap();
        ClipBatch::new(flat.reshape(&s).unwrap(), batch.labels.clone()).unwrap()
    }

    fn randomize(store: &ParamStore, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = store.values().iter().map(|v| Tensor::from_fn(v.shape(), |_| rng.gen_range(-0.5..0.5))).collect();
        store.with_values(vals).unwrap()
    }

    #[test]
    fn validation() {
        assert!(StemConfig::default().validate().is_ok());
        assert!(StemConfig::attention().validate().is_ok());
        assert!(StemConfig { atm_site: 3, ..StemConfig::default() }.validate().is_err());
        assert!(StemConfig { width: 30, ..StemConfig::attention() }.validate().is_err());
        assert!(StemConfig { image_size: 30, ..StemConfig::attention() }.validate().is_err());
        assert!(StemConfig { num_classes: 0, ..StemConfig::default() }.validate().is_err());
        assert_eq!(StemConfig::default().atm_site_shape(), [8, 16, 14, 14]);
        assert_eq!(StemConfig::attention().atm_site_shape(), [8, 32, 7, 7]);
        // a 7×7 site cannot be pooled by 2
        assert!(Model::new(&StemConfig::attention(), Some(&AtmConfig::default()), 0).is_err());
    }

    #[test]
    fn logits_shape_and_batch_checks() {
        let cfg = StemConfig { num_classes: 4, ..tiny(StemKind::Cnn) };
        let m = Model::new(&cfg, None, 0).unwrap();
        assert_eq!(m.logits(&batch(&cfg, 2, 1)).unwrap().shape(), &[2, 4]);
        let other = StemConfig { frames: 4, ..cfg.clone() };
        assert!(m.logits(&batch(&other, 2, 1)).is_err());
        let bad = Tensor::full(&[1, 3, 1, 8, 8], 1.5);
        assert!(matches!(ClipBatch::new(bad, vec![0]), Err(Error::PixelRange { .. })));
    }

    #[test]
    fn token_grid_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::from_fn(&[3, 12, 5], |_| rng.gen());
        let g = tokens_to_grid(&t, (3, 4)).unwrap();
        assert_eq!(g.shape(), &[3, 5, 3, 4]);
        assert_eq!(grid_to_tokens(&g).unwrap().data(), t.data());
        // token (row 1, col 2) of channel 4
        assert_eq!(g.data()[(4 * 3 + 1) * 4 + 2], t.data()[(4 + 2) * 5 + 4]);
        assert!(tokens_to_grid(&t, (3, 3)).is_err());
    }

    #[test]
    fn blind_models_are_frame_permutation_invariant() {
        for kind in [StemKind::Cnn, StemKind::Attention] {
            let cfg = StemConfig { frames: 4, ..tiny(kind) };
            let m = Model::baseline(&cfg, 3).unwrap();
            let b = batch(&cfg, 2, 4);
            let base = m.logits(&b).unwrap();
            for order in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
                assert_eq!(m.logits(&permute_frames(&b, &order)).unwrap().data(), base.data(), "{kind:?}");
            }
        }
    }

    #[test]
    fn fresh_atm_and_tconv_do_not_change_logits() {
        for kind in [StemKind::Cnn, StemKind::Attention] {
            let cfg = tiny(kind);
            let base = Model::baseline(&cfg, 9).unwrap();
            let b = batch(&cfg, 2, 5);
            let want = base.logits(&b).unwrap();
            for tconv in [false, true] {
                let c = StemConfig { use_tconv: tconv, ..cfg.clone() };
                for op in ArithOp::ALL {
                    let m = Model::new(&c, Some(&AtmConfig { ops: vec![op], ..tiny_atm() }), 9).unwrap();
                    assert_eq!(m.logits(&b).unwrap().data(), want.data(), "{kind:?} {op:?} tconv={tconv}");
                }
            }
        }
    }

    #[test]
    fn trained_atm_breaks_reversal_symmetry() {
        let cfg = tiny(StemKind::Cnn);
        let m = Model::new(&cfg, Some(&tiny_atm()), 1).unwrap();
        let store = randomize(&m.store, 2);
        let b = batch(&cfg, 1, 3);
        let fwd = m.logits_with(&store, &b).unwrap();
        let rev = m.logits_with(&store, &permute_frames(&b, &[2, 1, 0])).unwrap();
        assert_ne!(fwd.data(), rev.data());
    }

    #[test]
    fn attention_div_gets_shifted_inputs() {
        let cfg = tiny(StemKind::Attention);
        let m = Model::new(&cfg, Some(&AtmConfig { ops: vec![ArithOp::Div], ..tiny_atm() }), 0).unwrap();
        assert!(m.atm_cfg.as_ref().unwrap().shift_div_inputs);
        let store = randomize(&m.store, 1);
        assert!(m.logits_with(&store, &batch(&cfg, 2, 2)).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn end_to_end_gradients() {
        for kind in [StemKind::Cnn, StemKind::Attention] {
            for (atm, tconv) in [(None, false), (Some(tiny_atm()), true)] {
                let cfg = StemConfig { use_tconv: tconv, ..tiny(kind) };
                let m = Model::new(&cfg, atm.as_ref(), 4).unwrap();
                let store = randomize(&m.store, 5);
                let b = batch(&cfg, 2, 6);
                let mut inputs = vec![b.clips.clone()];
                inputs.extend(store.values().iter().cloned());
                let r = finite_diff_check_many(
                    |t| {
                        let ps = store.with_values(t[1..].to_vec())?;
                        m.logits_with(&ps, &ClipBatch { clips: t[0].clone(), labels: b.labels.clone() })?
                            .cross_entropy(&b.labels)
                    },
                    &inputs,
                    1e-4,
                )
                .unwrap();
                assert!(r.max_rel_error < 1e-3, "{kind:?} tconv={tconv}: {r:?}");
            }
        }
    }
}
