//! End-to-end acceptance criteria. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atm_core::atm::{atm_forward, combine_atms, estimate_flops, tconv, AtmBlock, AtmConfig, CombineStyle, MacCount};
use atm_core::backbone::{Classifier, ClipBatch, Model, StemConfig, StemKind};
use atm_core::gradsuite::run_suite;
use atm_core::harness::{train, AblationGrid, TrainConfig};
use atm_core::interact::{
    op_add, op_div_log, op_mul_local, op_sub, span_and_interact, ArithOp, ClipFeatures, ContextSpec, MulParams,
};
use atm_core::nn::ParamStore;
use atm_core::synth::{
    decode_clip, encode_clip, gen_clip, op_maps, read_clip, write_clip, DatasetSpec, Pgm, SynthClipSpec, Task,
};
use atm_core::tensor::{conv2d, ConvParams};
use atm_core::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = run_suite(20, 7).map_err(err)?;
    let elapsed = start.elapsed();
    let failed: Vec<_> =
        results.iter().filter(|r| !r.passed()).map(|r| format!("{} {:.2e}", r.name, r.max_rel_error)).collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    ensure(results.iter().all(|r| r.instances >= 20), || "fewer than 20 instances".into())?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {:.1} s", elapsed.as_secs_f64()))?;
    let worst = results.iter().map(|r| r.max_rel_error / r.tolerance).fold(0.0, f64::max);
    Ok(format!("{} checks x 20 instances, worst err/tol {worst:.2e}, {:.1} s", results.len(), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- oracles

fn oracle_elementwise(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..a.len() {
        out[i] = f(a[i], b[i]);
    }
    out
}

/// `[T, C, H, W]` pair to `[T, P², H, W]`, offsets row-major from (−k, −k).
fn oracle_mul(a: &[f64], b: &[f64], dims: [usize; 4], p: usize) -> Vec<f64> {
    let [t, c, h, w] = dims;
    let k = (p / 2) as isize;
    let mut out = vec![0.0; t * p * p * h * w];
    for ti in 0..t {
        for di in -k..=k {
            for dj in -k..=k {
                let o = ((di + k) as usize) * p + (dj + k) as usize;
                for y in 0..h {
                    for x in 0..w {
                        let (by, bx) = (y as isize + di, x as isize + dj);
                        let mut acc = 0.0;
                        for ci in 0..c {
                            if by < 0 || bx < 0 || by >= h as isize || bx >= w as isize {
                                continue;
                            }
                            let ai = ((ti * c + ci) * h + y) * w + x;
                            let bi = ((ti * c + ci) * h + by as usize) * w + bx as usize;
                            acc += a[ai] * b[bi];
                        }
                        out[((ti * p * p + o) * h + y) * w + x] = acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn oracle_conv(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    [co, kh, kw]: [usize; 3],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for ni in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * c + ci) * kh + ky) * kw + kx]
                                    * x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[o];
                    }
                    out[((ni * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

fn oracle_tconv(x: &[f64], [t, c, hw]: [usize; 3], wt: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; t * c * hw];
    for ti in 0..t {
        for ci in 0..c {
            for s in 0..hw {
                let mut acc = 0.0;
                for k in 0..3 {
                    let src = ti as isize + k as isize - 1;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    acc += wt[ci * 3 + k] * x[(src as usize * c + ci) * hw + s];
                }
                out[(ti * c + ci) * hw + s] = acc;
            }
        }
    }
    out
}

fn oracle_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for t in 1..=4 {
        for _ in 0..5 {
            let dims = [t, 3, 8, 8];
            let a = rand_tensor(&mut rng, &dims, 0.0, 1.0);
            let b = rand_tensor(&mut rng, &dims, 0.0, 1.0);
            let (ad, bd) = (a.data(), b.data());
            let check = |name: &str, got: &Tensor, want: &[f64]| {
                ensure(bits_equal(got.data(), want), || format!("{name} differs at T={t}"))
            };
            check("op_add", &op_add(&a, &b).map_err(err)?, &oracle_elementwise(ad, bd, |x, y| x + y))?;
            check("op_sub", &op_sub(&a, &b).map_err(err)?, &oracle_elementwise(ad, bd, |x, y| x - y))?;
            let div = oracle_elementwise(ad, bd, |x, y| (x + 1.0).ln() - (y + 1.0).ln());
            check("op_div_log", &op_div_log(&a, &b, 1.0).map_err(err)?, &div)?;
            for p in [1, 3] {
                let got = op_mul_local(&a, &b, &MulParams::new(p).map_err(err)?).map_err(err)?;
                check("op_mul_local", &got, &oracle_mul(ad, bd, dims, p))?;
            }
            for (k, stride, pad, with_bias) in [(3, 1, 1, true), (3, 2, 1, false), (1, 1, 0, true), (3, 1, 0, false)] {
                let co = 4;
                let wt = rand_tensor(&mut rng, &[co, 3, k, k], -1.0, 1.0);
                let bias = with_bias.then(|| rand_tensor(&mut rng, &[co], -1.0, 1.0));
                let params = ConvParams::new(wt.clone(), bias.clone(), stride, pad).map_err(err)?;
                let got = conv2d(&a, &params).map_err(err)?;
                let (want, ho, wo) =
                    oracle_conv(ad, dims, wt.data(), [co, k, k], bias.as_ref().map(|b| b.data()), stride, pad);
                ensure(got.shape() == [t, co, ho, wo], || format!("conv2d shape {:?}", got.shape()))?;
                check("conv2d", &got, &want)?;
            }
            let kernel = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
            check("tconv", &tconv(&a, t, &kernel).map_err(err)?, &oracle_tconv(ad, [t, 3, 64], kernel.data()))?;
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {:.1} s", elapsed.as_secs_f64()))?;
    Ok(format!("{cases} random cases, T 1..=4, C 3, 8x8, P 1 and 3, all bit-equal, {:.2} s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- shapes

fn shape_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, c, h, w) = (8, 3, 6, 5);
    let x = ClipFeatures::single(rand_tensor(&mut rng, &[t, c, h, w], 0.0, 1.0)).map_err(err)?;
    let mul = MulParams::new(3).map_err(err)?;
    let mut checked = 0;
    for z in [1, 2, 4, 6] {
        let spec = ContextSpec::new(z).map_err(err)?;
        for op in ArithOp::ALL {
            let y = span_and_interact(&x, &spec, op, &mul, 1.0).map_err(err)?;
            let c_prime = if op == ArithOp::Mul { 9 } else { c };
            ensure(y.data.shape() == [t, z, c_prime, h, w], || format!("{op} Z={z}: {:?}", y.data.shape()))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (Z, op) pairs give T x Z x C' x H x W"))
}

// ---------------------------------------------------------------- identity

fn identity_at_init() -> Outcome {
    let styles: Vec<AtmConfig> = vec![
        AtmConfig::single(ArithOp::Add),
        AtmConfig::single(ArithOp::Sub),
        AtmConfig::single(ArithOp::Mul),
        AtmConfig::single(ArithOp::Div),
        AtmConfig::combined(&[ArithOp::Sub, ArithOp::Mul], CombineStyle::Cascade),
        AtmConfig::combined(&[ArithOp::Mul, ArithOp::Div], CombineStyle::Cascade),
        AtmConfig::combined(&[ArithOp::Sub, ArithOp::Mul], CombineStyle::Parallel),
        AtmConfig::combined(&[ArithOp::Sub, ArithOp::Mul], CombineStyle::AtmStyle),
        AtmConfig::combined(&ArithOp::ALL, CombineStyle::AtmStyle),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for stem in [StemConfig::default(), StemConfig::attention()] {
        let dims = [2, stem.frames, 1, stem.image_size, stem.image_size];
        let batch = ClipBatch::new(rand_tensor(&mut rng, &dims, 0.0, 1.0), vec![0, 1]).map_err(err)?;
        let plain = Model::new(&stem, None, 9).map_err(err)?.logits(&batch).map_err(err)?;
        for cfg in &styles {
            // the attention site is an odd 7×7 token grid
            let cfg = &AtmConfig { reduce_spatial: stem.kind == StemKind::Cnn, ..cfg.clone() };
            let model = Model::new(&stem, Some(cfg), 9).map_err(err)?;
            let logits = model.logits(&batch).map_err(err)?;
            ensure(bits_equal(logits.data(), plain.data()), || format!("{:?} stem, {}", stem.kind, cfg.label()))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (stem, ATM) pairs bit-identical to the ATM-free model"))
}

// ---------------------------------------------------------------- experiments

fn blind_baseline() -> Outcome {
    let start = Instant::now();
    let grid = AblationGrid {
        base: TrainConfig { seed: 0, ..TrainConfig::default() },
        baseline: true,
        op_sets: ArithOp::ALL.iter().map(|&op| vec![op]).collect(),
        z_ranges: vec![4],
        extractors: vec![Default::default()],
        styles: vec![CombineStyle::Single],
    };
    let mut scores = Vec::new();
    for (name, cfg) in grid.cells().map_err(err)? {
        ensure(cfg.dataset.clip.task == Task::Direction2, || "grid is not direction2".into())?;
        ensure(cfg.dataset.train_size == 400 && cfg.dataset.test_size == 200, || "split sizes".into())?;
        scores.push((name, train(&cfg).map_err(err)?.report.test_top1));
    }
    let elapsed = start.elapsed();
    let summary = scores.iter().map(|(n, s)| format!("{n} {:.1}%", s * 100.0)).collect::<Vec<_>>().join(", ");
    let base = scores[0].1;
    ensure((base - 0.5).abs() <= 0.10, || format!("baseline off chance: {summary}"))?;
    for (name, s) in &scores[1..] {
        ensure(*s >= 0.90, || format!("{name} below 90%: {summary}"))?;
        ensure(*s >= base + 0.30, || format!("{name} within 30 points of baseline: {summary}"))?;
    }
    ensure(elapsed < Duration::from_secs(15 * 60), || format!("grid took {:.1} min", minutes(elapsed)))?;
    Ok(format!("{summary}; {:.1} min", minutes(elapsed)))
}

fn fusion_trend() -> Outcome {
    let start = Instant::now();
    let mut base = TrainConfig::default();
    base.dataset.clip.task = Task::Direction4;
    base.stem.num_classes = 4;
    ensure(base.dataset.clip.noise > 0.0, || "fusion data must be noisy".into())?;
    let variants = [
        ("sub", AtmConfig::single(ArithOp::Sub)),
        ("mul", AtmConfig::single(ArithOp::Mul)),
        ("sub+mul", AtmConfig::combined(&[ArithOp::Sub, ArithOp::Mul], CombineStyle::AtmStyle)),
    ];
    let mut acc = [[0.0; 3]; 3];
    for (si, seed) in [0u64, 1, 2].into_iter().enumerate() {
        for (vi, (_, atm)) in variants.iter().enumerate() {
            let mut cfg = TrainConfig { seed, atm: Some(atm.clone()), ..base.clone() };
            cfg.dataset.seed = seed;
            acc[vi][si] = train(&cfg).map_err(err)?.report.test_top1;
        }
    }
    let median = |v: [f64; 3]| {
        let mut v = v;
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let [sub, mul, fused] = [median(acc[0]), median(acc[1]), median(acc[2])];
    let detail = format!(
        "median over 3 seeds: sub {:.1}%, mul {:.1}%, sub+mul atm-style {:.1}% (runs {acc:?}); {:.1} min",
        sub * 100.0,
        mul * 100.0,
        fused * 100.0,
        minutes(start.elapsed())
    );
    ensure(fused >= sub.max(mul) - 0.02, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- costs

fn cost_law() -> Outcome {
    let site = StemConfig::default().atm_site_shape();
    for op in ArithOp::ALL {
        let totals = [1, 2, 4, 6]
            .into_iter()
            .map(|z| {
                let cfg =
                    AtmConfig { context: ContextSpec { z_range: z, ..Default::default() }, ..AtmConfig::single(op) };
                estimate_flops(&cfg, site).map(|m| m.total())
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        ensure(totals.windows(2).all(|p| p[0] < p[1]), || format!("{op}: {totals:?} not increasing"))?;
    }
    // Subtraction, Z = 4, conv stack, on the [8, 16, 14, 14] site reduced to
    // 7×7: 8·4·49 = 1568 positions.
    //   interaction 1568 · 16                  = 25 088
    //   extractor   1568 · 9 · (16·16 + 16·16) = 7 225 344
    //   transform   8 · 14·14 · (4·16) · 16    = 1 605 632
    let got = estimate_flops(&AtmConfig::single(ArithOp::Sub), site).map_err(err)?;
    let want = MacCount { interaction: 25_088, extractor: 7_225_344, transform: 1_605_632 };
    ensure(got == want, || format!("closed form mismatch: {got:?}"))?;
    Ok(format!("strictly increasing over Z for all ops; sub/Z4 = {} MACs matches hand count", got.total()))
}

// ---------------------------------------------------------------- division

fn division_stability() -> Outcome {
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for nonzero in [false, true] {
        let dims = [4, 3, 6, 6];
        let raw = if nonzero { rand_tensor(&mut rng, &dims, 0.0, 5.0) } else { Tensor::zeros(&dims) };
        let x = raw.requires_grad();
        let clip = ClipFeatures::single(x.clone()).map_err(err)?;
        for z in [1, 2, 4, 6] {
            let y =
                span_and_interact(&clip, &ContextSpec::new(z).map_err(err)?, ArithOp::Div, &MulParams::default(), 1.0)
                    .map_err(err)?;
            x.zero_grad();
            y.data.sum().backward().map_err(err)?;
            ensure(y.data.data().iter().all(|v| v.is_finite()), || format!("non-finite forward, Z={z}"))?;
            ensure(x.grad().is_some_and(|g| g.iter().all(|v| v.is_finite())), || format!("non-finite grad, Z={z}"))?;
            checked += 1;
        }
        // A trained-looking block: random weights everywhere, projection included.
        for combine in [CombineStyle::Single, CombineStyle::AtmStyle] {
            let cfg = match combine {
                CombineStyle::Single => AtmConfig::single(ArithOp::Div),
                _ => AtmConfig::combined(&[ArithOp::Div, ArithOp::Sub], combine),
            };
            let mut store = ParamStore::new();
            let block = AtmBlock::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), "atm", &cfg, 3).map_err(err)?;
            let vals = store.values().iter().map(|v| rand_tensor(&mut rng, v.shape(), -0.5, 0.5)).collect();
            let store = store.with_values(vals).map_err(err)?.tracked();
            x.zero_grad();
            let out = match combine {
                CombineStyle::Single => atm_forward(&store, &block, &clip),
                _ => combine_atms(&store, &block, &clip),
            }
            .map_err(err)?;
            out.data.sum().backward().map_err(err)?;
            let finite = |t: &Tensor| t.grad().is_some_and(|g| g.iter().all(|v| v.is_finite()));
            ensure(out.data.data().iter().all(|v| v.is_finite()), || format!("{} forward", cfg.label()))?;
            ensure(finite(&x) && store.values().iter().all(finite), || format!("{} backward", cfg.label()))?;
            checked += 1;
        }
    }
    // All-black clips through a full model with a division ATM.
    let stem = StemConfig::default();
    let mut model = Model::new(&stem, Some(&AtmConfig::single(ArithOp::Div)), 0).map_err(err)?;
    let vals = model.store.values().iter().map(|v| rand_tensor(&mut rng, v.shape(), -0.3, 0.3)).collect();
    model.store = model.store.with_values(vals).map_err(err)?;
    let batch = ClipBatch::new(Tensor::zeros(&[2, 8, 1, 28, 28]), vec![0, 1]).map_err(err)?;
    let tracked = model.store.tracked();
    let loss = model.logits_with(&tracked, &batch).and_then(|l| l.cross_entropy(&batch.labels)).map_err(err)?;
    loss.backward().map_err(err)?;
    ensure(loss.item().is_finite(), || "model loss".into())?;
    ensure(tracked.values().iter().all(|t| t.grad().is_some_and(|g| g.iter().all(|v| v.is_finite()))), || {
        "model gradient".into()
    })?;
    Ok(format!("{} block checks plus a full model on all-zero frames, eps 1: all finite", checked))
}

// ---------------------------------------------------------------- format

fn format_and_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut clips = 0;
    for task in [Task::Direction2, Task::Direction4, Task::Speed2] {
        for label in 0..task.num_classes() {
            let clip =
                gen_clip(&SynthClipSpec { task, label, seed: 40 + label as u64, ..Default::default() }).map_err(err)?;
            let bytes = encode_clip(&clip);
            let back = decode_clip(&bytes).map_err(err)?;
            ensure(back == clip && encode_clip(&back) == bytes, || format!("{task:?}/{label} round trip"))?;
            let path = dir.path().join(format!("{clips}.atmc"));
            write_clip(&path, &clip).map_err(err)?;
            ensure(fs::read(&path).map_err(err)? == bytes, || "file bytes".into())?;
            ensure(read_clip(&path).map_err(err)? == clip, || "file round trip".into())?;
            clips += 1;
        }
    }

    let mut cfg = TrainConfig {
        epochs: 2,
        seed: 13,
        atm: Some(AtmConfig::single(ArithOp::Sub)),
        dataset: DatasetSpec { train_size: 32, test_size: 16, seed: 13, ..Default::default() },
        ..TrainConfig::default()
    };
    cfg.stem.widths = vec![4, 8, 8];
    let a = train(&cfg).map_err(err)?.report;
    let b = train(&cfg).map_err(err)?.report;
    ensure(a.same_outcome(&b), || "reports differ between identical runs".into())?;

    let status =
        Command::new(env!("CARGO_BIN_EXE_atm")).args(["gradcheck", "--instances", "20"]).output().map_err(err)?;
    ensure(status.status.success(), || format!("gradcheck exited {:?}", status.status.code()))?;
    Ok(format!("{clips} clips byte-identical, repeated run reports identical, `atm gradcheck` exit 0"))
}

// ---------------------------------------------------------------- viz

fn visualization() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let out = Command::new(env!("CARGO_BIN_EXE_atm")).arg("viz").arg("--out").arg(dir.path()).output().map_err(err)?;
    ensure(out.status.success(), || format!("viz exited {:?}", out.status.code()))?;
    for name in ["add", "sub", "mul", "div"] {
        let bytes = fs::read(dir.path().join(format!("{name}.pgm"))).map_err(err)?;
        let img = Pgm::parse(&bytes).map_err(err)?;
        ensure(img.width == 28 && img.height == 28, || format!("{name}.pgm is {}x{}", img.width, img.height))?;
        ensure(img.pixels.iter().any(|&p| p > 0), || format!("{name}.pgm is blank for a moving blob"))?;
    }
    let clip = gen_clip(&SynthClipSpec { noise: 0.0, ..Default::default() }).map_err(err)?;
    let frame = Tensor::new(&[28, 28], clip.frame(0).iter().map(|&v| v as f64).collect()).map_err(err)?;
    let maps = op_maps(&frame, &frame, &MulParams::default(), 1.0).map_err(err)?;
    let (_, sub) = &maps[1];
    ensure(sub.data().iter().all(|&v| v == 0.0), || "sub map of identical frames is not zero".into())?;
    let pgm = Pgm::normalized(28, 28, sub.data());
    ensure(pgm.pixels.iter().all(|&p| p == 0), || "sub image of identical frames is not constant".into())?;
    Ok("four valid 28x28 PGMs; identical frames give a constant zero sub map".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("oracle suite", oracle_suite),
        ("shape law", shape_law),
        ("identity at init", identity_at_init),
        ("cost law", cost_law),
        ("division stability", division_stability),
        ("format and determinism", format_and_determinism),
        ("visualization", visualization),
        ("blind baseline", blind_baseline),
        ("fusion trend", fusion_trend),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let line = match run() {
            Ok(detail) => format!("PASS  {name:<24} {detail}"),
            Err(detail) => {
                failed += 1;
                format!("FAIL  {name:<24} {detail}")
            }
        };
        println!("{line}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
