//! Training and evaluation loop, run reports and ablation grids.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atm::{AtmConfig, CombineStyle, ExtractorKind, MacCount};
use crate::backbone::{Classifier, Model, StemConfig};
use crate::error::{Error, Result};
use crate::interact::{ArithOp, ContextSpec};
use crate::nn::ParamStore;
use crate::synth::{to_batch, DatasetSpec, Sample, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub stem: StemConfig,
    pub atm: Option<AtmConfig>,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
            seed: 0,
            stem: StemConfig::default(),
            atm: None,
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) || !finite_nonneg(self.weight_decay) {
            return Err(Error::Config("learning_rate and weight_decay must be finite and non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.stem.validate()?;
        self.dataset.validate()?;
        if let Some(a) = &self.atm {
            a.validate()?;
        }
        let clip = &self.dataset.clip;
        let k = clip.task.num_classes();
        if self.stem.num_classes != k || self.stem.frames != clip.frames || self.stem.image_size != clip.image_size {
            return Err(Error::Config(format!(
                "stem expects {} classes, T={}, {} px; dataset gives {k}, T={}, {} px",
                self.stem.num_classes, self.stem.frames, self.stem.image_size, clip.frames, clip.image_size
            )));
        }
        if self.stem.in_channels != 1 {
            return Err(Error::Config("synthetic clips have one channel".into()));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(&self.stem, self.atm.as_ref(), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochStats>,
    pub test_top1: f64,
    pub macs: MacCount,
    pub wall_ms: u64,
    pub config: TrainConfig,
}

impl RunReport {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        RunReport { wall_ms: 0, ..self.clone() } == RunReport { wall_ms: 0, ..other.clone() }
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
}

/// Momentum SGD: `v ← μ·v + g + λ·w`, `w ← w − η·v`.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    grad_clip: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        Self {
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            velocity: params.values().iter().map(|v| vec![0.0; v.numel()]).collect(),
        }
    }

    /// New values from the gradients held by `tracked`.
    pub fn step(&mut self, params: &ParamStore, tracked: &ParamStore) -> Result<ParamStore> {
        let grads: Vec<Vec<f64>> = params
            .values()
            .iter()
            .zip(tracked.values())
            .map(|(w, t)| t.grad().unwrap_or_else(|| vec![0.0; w.numel()]))
            .collect();
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let values = params
            .values()
            .iter()
            .zip(&grads)
            .zip(&mut self.velocity)
            .map(|((w, g), v)| {
                let data = w
                    .data()
                    .iter()
                    .zip(g.iter().map(|g| g * scale))
                    .zip(v.iter_mut())
                    .map(|((&wi, gi), vi)| {
                        *vi = self.momentum * *vi + gi + self.weight_decay * wi;
                        wi - self.lr * *vi
                    })
                    .collect();
                Tensor::new(w.shape(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        params.with_values(values)
    }
}

/// Trains on the generated train split and evaluates on the test split.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = cfg.dataset.generate(Split::Train)?;
    let test_set = cfg.dataset.generate(Split::Test)?;
    train_on(cfg, &train_set, &test_set)
}

pub fn train_on(cfg: &TrainConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit);
    }
    let start = Instant::now();
    let mut model = cfg.build_model()?;
    let mut sgd = Sgd::new(cfg, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let clips: Vec<_> = idx.iter().map(|&i| &train_set[i].clip).collect();
            let batch = to_batch(&clips)?;
            let tracked = model.store.tracked();
            let loss = model.logits_with(&tracked, &batch)?.cross_entropy(&batch.labels)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss: value });
            }
            loss.backward()?;
            model.store = sgd.step(&model.store, &tracked)?;
            total += value * idx.len() as f64;
        }
        epochs.push(EpochStats { epoch, train_loss: total / train_set.len() as f64 });
    }
    let test_top1 = evaluate(&model, test_set)?;
    let report = RunReport {
        epochs,
        test_top1,
        macs: model.atm_macs()?,
        wall_ms: start.elapsed().as_millis() as u64,
        config: cfg.clone(),
    };
    Ok(TrainOutcome { report, model })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 50;

pub fn predict(model: &impl Classifier, samples: &[Sample]) -> Result<Vec<usize>> {
    let k = model.num_classes();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let clips: Vec<_> = chunk.iter().map(|s| &s.clip).collect();
        let logits = model.logits(&to_batch(&clips)?)?;
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(model: &impl Classifier, samples: &[Sample]) -> Result<Vec<Vec<usize>>> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let k = model.num_classes();
    let mut m = vec![vec![0; k]; k];
    for (s, p) in samples.iter().zip(predict(model, samples)?) {
        if s.clip.label >= k {
            return Err(Error::InvalidArgument(format!("label {} for {k} classes", s.clip.label)));
        }
        m[s.clip.label][p] += 1;
    }
    Ok(m)
}

/// Single-view top-1 accuracy.
pub fn evaluate(model: &impl Classifier, samples: &[Sample]) -> Result<f64> {
    let m = confusion_matrix(model, samples)?;
    let correct: usize = (0..m.len()).map(|i| m[i][i]).sum();
    Ok(correct as f64 / samples.len() as f64)
}

/// Axes of an ablation sweep around a base run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub base: TrainConfig,
    /// Include the ATM-free model.
    pub baseline: bool,
    pub op_sets: Vec<Vec<ArithOp>>,
    pub z_ranges: Vec<usize>,
    pub extractors: Vec<ExtractorKind>,
    pub styles: Vec<CombineStyle>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            baseline: true,
            op_sets: ArithOp::ALL.iter().map(|&o| vec![o]).collect(),
            z_ranges: vec![4],
            extractors: vec![ExtractorKind::ConvStack],
            styles: vec![CombineStyle::Single],
        }
    }
}

impl AblationGrid {
    /// Named configs for every valid cell; styles that do not fit an op set
    /// are skipped.
    pub fn cells(&self) -> Result<Vec<(String, TrainConfig)>> {
        let mut out = Vec::new();
        if self.baseline {
            out.push(("baseline".to_string(), TrainConfig { atm: None, ..self.base.clone() }));
        }
        let template = self.base.atm.clone().unwrap_or_default();
        for ops in &self.op_sets {
            for &z in &self.z_ranges {
                for &extractor in &self.extractors {
                    for &combine in &self.styles {
                        let atm = AtmConfig {
                            ops: ops.clone(),
                            context: ContextSpec { z_range: z, ..template.context },
                            extractor,
                            combine,
                            ..template.clone()
                        };
                        let fits = (combine == CombineStyle::Single) == (ops.len() == 1);
                        if !fits {
                            continue;
                        }
                        atm.validate()?;
                        out.push((atm.label().replace('/', "_"), TrainConfig { atm: Some(atm), ..self.base.clone() }));
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("ablation grid has no cells".into()));
        }
        Ok(out)
    }
}
