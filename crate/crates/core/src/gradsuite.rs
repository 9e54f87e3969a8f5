//! Seeded finite-difference checks over every differentiable ATM operation and
//! both stems. Shared by the `gradcheck` command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atm::{
    atm_forward, combine_atms, domain_transform, feature_extract, tconv, AtmBlock, AtmConfig, CombineStyle, Extractor,
    ExtractorKind,
};
use crate::backbone::{Classifier, ClipBatch, Model, StemConfig, StemKind};
use crate::error::Result;
use crate::interact::{
    op_add, op_div_log, op_mul_local, op_sub, span_and_interact, ArithOp, ClipFeatures, ContextSpec, InteractionTensor,
    MulParams,
};
use crate::nn::ParamStore;
use crate::tensor::{finite_diff_check_many, ConvParams, GradCheckReport, Tensor};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const STEM_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Scalar probe `Σ y ⊙ m` with a fixed random `m`.
fn probe(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    y.mul(&uniform(&mut rng, y.shape(), -1.0, 1.0)).map(|t| t.sum())
}

fn randomized(store: &ParamStore, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let vals = store.values().iter().map(|v| uniform(rng, v.shape(), -0.5, 0.5)).collect();
    store.with_values(vals)
}

type Instance = Box<dyn Fn(u64) -> Result<GradCheckReport>>;

fn binary_op(f: impl Fn(&Tensor, &Tensor, &mut ChaCha8Rng) -> Result<Tensor> + 'static) -> Instance {
    Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..5));
        let a = uniform(&mut rng, &[n, c, h, w], 0.0, 1.0);
        let b = uniform(&mut rng, &[n, c, h, w], 0.0, 1.0);
        let op_seed = rng.gen();
        finite_diff_check_many(
            |t| {
                let mut r = ChaCha8Rng::seed_from_u64(op_seed);
                probe(&f(&t[0], &t[1], &mut r)?, seed)
            },
            &[a, b],
            STEP,
        )
    })
}

fn small_mul(rng: &mut ChaCha8Rng) -> MulParams {
    MulParams::new(if rng.gen() { 1 } else { 3 }).expect("odd neighbourhood")
}

fn span_check(op: ArithOp) -> Instance {
    Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = [1, 2, 4][rng.gen_range(0..3)];
        let frames = rng.gen_range(2..5);
        let shape = [rng.gen_range(1..3) * frames, rng.gen_range(1..3), 3, 3];
        let x = uniform(&mut rng, &shape, 0.0, 1.0);
        let mul = small_mul(&mut rng);
        let spec = ContextSpec::new(z)?;
        finite_diff_check_many(
            |t| probe(&span_and_interact(&ClipFeatures::new(t[0].clone(), frames)?, &spec, op, &mul, 1.0)?.data, seed),
            &[x],
            STEP,
        )
    })
}

fn small_atm(rng: &mut ChaCha8Rng, ops: Vec<ArithOp>, combine: CombineStyle) -> AtmConfig {
    let kinds = [ExtractorKind::Fc, ExtractorKind::Mlp, ExtractorKind::ConvStack];
    AtmConfig {
        ops,
        combine,
        context: ContextSpec::new([1, 2][rng.gen_range(0..2)]).expect("valid z"),
        mul: small_mul(rng),
        extractor: kinds[rng.gen_range(0..3)],
        reduce_spatial: rng.gen(),
        clue_channels: Some(rng.gen_range(1..3)),
        branch_bias: rng.gen(),
        shift_div_inputs: true,
        ..AtmConfig::default()
    }
}

/// Gradient through a randomly initialized block w.r.t. input and weights.
fn block_check(cfg_of: impl Fn(&mut ChaCha8Rng) -> AtmConfig + 'static) -> Instance {
    Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = cfg_of(&mut rng);
        let channels = rng.gen_range(1..3);
        let frames = 3;
        let mut store = ParamStore::new();
        let block = AtmBlock::new(&mut store, &mut rng, "atm", &cfg, channels)?;
        let store = randomized(&store, &mut rng)?;
        let x = uniform(&mut rng, &[frames, channels, 4, 4], 0.0, 1.0);
        let mut inputs = vec![x];
        inputs.extend(store.values().iter().cloned());
        finite_diff_check_many(
            |t| {
                let ps = store.with_values(t[1..].to_vec())?;
                let feats = ClipFeatures::new(t[0].clone(), frames)?;
                let y = match cfg.combine {
                    CombineStyle::Single => atm_forward(&ps, &block, &feats)?,
                    _ => combine_atms(&ps, &block, &feats)?,
                };
                probe(&y.data, seed)
            },
            &inputs,
            STEP,
        )
    })
}

fn extractor_check(kind: ExtractorKind) -> Instance {
    Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_in, c_out) = (rng.gen_range(1..4), rng.gen_range(1..3));
        let mut store = ParamStore::new();
        let ex = Extractor::new(&mut store, &mut rng, "e", kind, c_in, c_out, true);
        let store = randomized(&store, &mut rng)?;
        let y = uniform(&mut rng, &[2, 2, c_in, 4, 4], -1.0, 1.0);
        let mut inputs = vec![y];
        inputs.extend(store.values().iter().cloned());
        finite_diff_check_many(
            |t| {
                let ps = store.with_values(t[1..].to_vec())?;
                let y = InteractionTensor::new(t[0].clone(), 2, ArithOp::Sub)?;
                probe(&feature_extract(&ps, &ex, &y)?.data, seed)
            },
            &inputs,
            STEP,
        )
    })
}

fn stem_check(kind: StemKind) -> Instance {
    Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = StemConfig {
            kind,
            widths: vec![2, 3, 3],
            blocks_per_stage: 1,
            layers: 2,
            width: 4,
            heads: 2,
            patch: 2,
            mlp_ratio: 2,
            atm_site: rng.gen_range(0..2),
            use_tconv: rng.gen(),
            num_classes: 3,
            frames: 3,
            image_size: 8,
            in_channels: 1,
        };
        let op = ArithOp::ALL[rng.gen_range(0..4)];
        let atm = rng.gen_bool(0.75).then(|| AtmConfig {
            reduce_spatial: kind == StemKind::Cnn,
            extractor: ExtractorKind::Fc,
            ..small_atm(&mut rng, vec![op], CombineStyle::Single)
        });
        let model = Model::new(&stem, atm.as_ref(), seed)?;
        let store = randomized(&model.store, &mut rng)?;
        let clips = uniform(&mut rng, &[2, 3, 1, 8, 8], 0.0, 1.0);
        let labels = vec![rng.gen_range(0..3), rng.gen_range(0..3)];
        let mut inputs = vec![clips];
        inputs.extend(store.values().iter().cloned());
        finite_diff_check_many(
            |t| {
                let ps = store.with_values(t[1..].to_vec())?;
                model
                    .logits_with(&ps, &ClipBatch { clips: t[0].clone(), labels: labels.clone() })?
                    .cross_entropy(&labels)
            },
            &inputs,
            STEP,
        )
    })
}

/// Every check as (name, tolerance, instance builder).
fn checks() -> Vec<(String, f64, Instance)> {
    let mut out: Vec<(String, f64, Instance)> = vec![
        ("op_add".into(), OP_TOLERANCE, binary_op(|a, b, _| op_add(a, b))),
        ("op_sub".into(), OP_TOLERANCE, binary_op(|a, b, _| op_sub(a, b))),
        ("op_div_log".into(), OP_TOLERANCE, binary_op(|a, b, _| op_div_log(a, b, 1.0))),
        ("op_mul_local".into(), OP_TOLERANCE, binary_op(|a, b, r| op_mul_local(a, b, &small_mul(r)))),
    ];
    for op in ArithOp::ALL {
        out.push((format!("span_and_interact[{}]", op.name()), OP_TOLERANCE, span_check(op)));
    }
    for kind in [ExtractorKind::Fc, ExtractorKind::Mlp, ExtractorKind::ConvStack] {
        out.push((format!("feature_extract[{kind:?}]").to_lowercase(), OP_TOLERANCE, extractor_check(kind)));
    }
    out.push((
        "domain_transform".into(),
        OP_TOLERANCE,
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (z, ce, c) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4));
            let y = uniform(&mut rng, &[3, z, ce, 3, 3], -1.0, 1.0);
            let x = uniform(&mut rng, &[3, c, 3, 3], -1.0, 1.0);
            let w = uniform(&mut rng, &[c, z * ce, 1, 1], -1.0, 1.0);
            finite_diff_check_many(
                |t| {
                    let p = ConvParams::new(t[2].clone(), None, 1, 0)?;
                    probe(&domain_transform(&t[0], &ClipFeatures::single(t[1].clone())?, &p)?.data, seed)
                },
                &[y, x, w],
                STEP,
            )
        }),
    ));
    for op in ArithOp::ALL {
        out.push((
            format!("atm_forward[{}]", op.name()),
            OP_TOLERANCE,
            block_check(move |r| small_atm(r, vec![op], CombineStyle::Single)),
        ));
    }
    for style in [CombineStyle::Cascade, CombineStyle::Parallel, CombineStyle::AtmStyle] {
        out.push((
            format!("combine_atms[{style:?}]").to_lowercase(),
            OP_TOLERANCE,
            block_check(move |r| {
                let mut ops = ArithOp::ALL.to_vec();
                ops.rotate_left(r.gen_range(0..4));
                ops.truncate(r.gen_range(2..4));
                small_atm(r, ops, style)
            }),
        ));
    }
    out.push((
        "tconv".into(),
        OP_TOLERANCE,
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (frames, c) = (rng.gen_range(1..5), rng.gen_range(1..4));
            let x = uniform(&mut rng, &[2 * frames, c, 3], -1.0, 1.0);
            let w = uniform(&mut rng, &[c, 3], -1.0, 1.0);
            finite_diff_check_many(|t| probe(&tconv(&t[0], frames, &t[1])?, seed), &[x, w], STEP)
        }),
    ));
    out.push(("cnn_stem".into(), STEM_TOLERANCE, stem_check(StemKind::Cnn)));
    out.push(("attention_stem".into(), STEM_TOLERANCE, stem_check(StemKind::Attention)));
    out
}

/// Runs every check on `instances` seeds starting at `seed`.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    checks()
        .into_iter()
        .map(|(name, tolerance, f)| {
            let mut res = CheckResult { name, instances, max_rel_error: 0.0, checked: 0, skipped: 0, tolerance };
            for i in 0..instances as u64 {
                let r = f(seed + i)?;
                res.max_rel_error = res.max_rel_error.max(r.max_rel_error);
                res.checked += r.checked;
                res.skipped += r.skipped;
            }
            Ok(res)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_instances() {
        let res = run_suite(2, 100).unwrap();
        assert!(res.len() >= 20);
        for r in &res {
            assert!(r.passed(), "{r:?}");
        }
    }
}
