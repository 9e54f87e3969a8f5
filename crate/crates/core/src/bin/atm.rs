use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use atm_core::atm::{estimate_flops, AtmConfig};
use atm_core::backbone::Classifier;
use atm_core::gradsuite::run_suite;
use atm_core::harness::{evaluate, train, AblationGrid, TrainConfig};
use atm_core::interact::{ContextSpec, MulParams};
use atm_core::synth::{gen_clip, read_split, visualize_ops, write_split, Split, SynthClipSpec};
use atm_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "atm", version, about = "Arithmetic temporal module experiments on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test splits as .atmc files.
    Gen(Common),
    /// Train, then write report.json and weights.json.
    Train(Common),
    /// Evaluate weights.json from --out on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Read the test split from a `gen` directory instead of regenerating it.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the finite-difference suite; exits nonzero on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// MAC table of the configured ATM over Z in {1, 2, 4, 6}.
    Flops(Common),
    /// Four-operation maps between two consecutive frames of a moving blob.
    Viz(Common),
    /// Train every cell of an ablation grid.
    Ablate(Common),
}

/// Errors the user caused (exit 2) versus everything else (exit 1).
enum Failure {
    Usage(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn train_config(c: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Internal(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))
}

fn json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Internal(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen(c) => {
            let mut cfg = train_config(&c)?;
            if let Some(s) = c.seed {
                cfg.dataset.seed = s;
            }
            for split in [Split::Train, Split::Test] {
                let samples = cfg.dataset.generate(split)?;
                write_split(&c.out, split, &samples)?;
                println!("{}: {} clips", split.name(), samples.len());
            }
        }
        Command::Train(c) => {
            let cfg = train_config(&c)?;
            let outcome = train(&cfg)?;
            for e in &outcome.report.epochs {
                println!("epoch {:>3}  loss {:.4}", e.epoch, e.train_loss);
            }
            println!("test top-1 {:.4}  ({} ms)", outcome.report.test_top1, outcome.report.wall_ms);
            write(&c.out.join("report.json"), json(&outcome.report)?)?;
            write(&c.out.join("weights.json"), outcome.model.store.to_json()?)?;
        }
        Command::Eval { common, data } => {
            let cfg = train_config(&common)?;
            let mut model = cfg.build_model()?;
            let weights = common.out.join("weights.json");
            let text =
                fs::read_to_string(&weights).map_err(|e| Failure::Usage(format!("{}: {e}", weights.display())))?;
            model.store = model.params().load_json(&text)?;
            let test = match data {
                Some(dir) => read_split(&dir, Split::Test)?,
                None => cfg.dataset.generate(Split::Test)?,
            };
            let top1 = evaluate(&model, &test)?;
            println!("{}", serde_json::json!({ "test_top1": top1, "clips": test.len() }));
        }
        Command::Gradcheck { instances, seed } => {
            let results = run_suite(instances, seed)?;
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{verdict:>4}  {:<32} max rel err {:.2e} < {:.0e}  ({} coords, {} kinks skipped, {} instances)",
                    r.name, r.max_rel_error, r.tolerance, r.checked, r.skipped, r.instances
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Failure::Internal(format!("{failed} gradient checks failed")));
            }
        }
        Command::Flops(c) => {
            let cfg = train_config(&c)?;
            let atm = cfg.atm.clone().unwrap_or_default();
            let shape = cfg.stem.atm_site_shape();
            println!("ATM {} at [T, C, H, W] = {shape:?}", atm.label());
            println!("{:>3} {:>14} {:>14} {:>14} {:>14}", "Z", "interaction", "extractor", "transform", "total");
            for z in [1, 2, 4, 6] {
                let m = estimate_flops(
                    &AtmConfig { context: ContextSpec { z_range: z, ..atm.context }, ..atm.clone() },
                    shape,
                )?;
                println!("{z:>3} {:>14} {:>14} {:>14} {:>14}", m.interaction, m.extractor, m.transform, m.total());
            }
        }
        Command::Viz(c) => {
            let mut spec: SynthClipSpec = match &c.config {
                Some(_) => train_config(&c)?.dataset.clip,
                None => SynthClipSpec::default(),
            };
            spec.noise = 0.0;
            spec.seed = c.seed.unwrap_or(spec.seed);
            let clip = gen_clip(&spec)?;
            let [h, w] = [clip.dims[2], clip.dims[3]];
            let frame = |t: usize| Tensor::new(&[h, w], clip.frame(t).iter().map(|&v| v as f64).collect());
            let mul = MulParams::new(3)?;
            for (op, img) in visualize_ops(&frame(0)?, &frame(1)?, &mul, 1.0)? {
                let path = c.out.join(format!("{}.pgm", op.name()));
                write(&path, img.to_bytes())?;
                println!("{op} -> {}", path.display());
            }
        }
        Command::Ablate(c) => {
            let mut grid: AblationGrid = load(c.config.as_deref())?;
            if let Some(s) = c.seed {
                grid.base.seed = s;
            }
            let cells = grid.cells()?;
            for (name, cfg) in cells {
                let report = train(&cfg)?.report;
                println!(
                    "{name:<36} top-1 {:.4}  macs {:>12}  {} ms",
                    report.test_top1,
                    report.macs.total(),
                    report.wall_ms
                );
                write(&c.out.join(format!("{name}.json")), json(&report)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
