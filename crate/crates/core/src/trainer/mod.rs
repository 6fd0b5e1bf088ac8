//! The training loop: batch sampling, augmentation, SSL + DC3 loss
//! composition, momentum SGD, periodic evaluation and run artifacts.
//!
//! Randomness is split into independent ChaCha streams derived from the run
//! seed (batch order, augmentation, negative partners, training labels), so
//! enabling or disabling one consumer never shifts another's draws.

pub mod augment;
mod config;
mod export;
mod suite;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_manifest, split_dataset, DatasetManifest, GrayImage, LabelMode, Split, FUZZY_TOL};
use crate::error::{Error, Result};
use crate::losses::{self, Detached, LossBreakdown, LossGradients, LossInputs, LossWeights, SslContribution};
use crate::metrics::{compute_metrics, records_from_outputs, EvalMode, RunMetrics};
use crate::model::{Checkpoint, Dc3Model, HeadConfig, ModelOutputs};
use crate::ssl::{self, SslName};

pub use config::{AugmentConfig, HeadSettings, Method, OptimizerConfig, OptimizerName, RunConfig};
pub use export::{evaluate_checkpoint, export_embeddings, write_embeddings};
pub use suite::{format_summary, run_suite, summarize, MeanStd, SuiteRun, SuiteSummary};

const STREAM_BATCHES: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_PARTNERS: u64 = 3;
const STREAM_LABELS: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Loss values logged at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub metrics: RunMetrics,
}

/// What a run leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_dir: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub loss_history: Vec<StepLoss>,
    pub metrics_history: Vec<EvalPoint>,
    pub final_metrics: RunMetrics,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: Dc3Model,
    pub artifacts: RunArtifacts,
}

/// Images and training pools for one run.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub manifest: DatasetManifest,
    /// Aligned with `manifest.items`.
    pub images: Vec<GrayImage>,
    /// `(item index, training class)`.
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
}

impl TrainingData {
    /// Loads the manifest named by the config, re-splitting it when the
    /// config asks for a supervised fraction.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let mut manifest = load_manifest(&config.manifest)?;
        if let Some(sup) = config.supervised_fraction {
            manifest = split_dataset(&manifest, sup, config.val_fraction, config.split_seed)?;
        }
        let images = manifest.load_images()?;
        Self::prepare(manifest, images, config)
    }

    /// Applies the label mode and builds the pools. `certain_only` drops
    /// fuzzy items from both training pools.
    pub fn prepare(manifest: DatasetManifest, images: Vec<GrayImage>, config: &RunConfig) -> Result<Self> {
        if images.len() != manifest.items.len() {
            return Err(Error::LengthMismatch {
                expected: manifest.items.len(),
                actual: images.len(),
            });
        }
        let side = config.backbone.image_size;
        if let Some(img) = images.iter().find(|i| i.width != side || i.height != side) {
            return Err(Error::InvalidConfig(format!(
                "backbone.image_size is {side} but the dataset has {}x{} images",
                img.width, img.height
            )));
        }
        let mode = config.label_mode.unwrap_or(manifest.label_mode);
        let mut rng = stream(config.seed, STREAM_LABELS);
        let (mut labeled, mut unlabeled, mut validation) = (Vec::new(), Vec::new(), Vec::new());
        for (i, item) in manifest.items.iter().enumerate() {
            let fuzzy = item.gt_soft.as_ref().is_some_and(|g| g.is_fuzzy(FUZZY_TOL));
            match item.split {
                Split::Labeled => {
                    if let Some(c) = item.training_label(mode, &mut rng) {
                        labeled.push((i, c));
                    }
                }
                Split::Unlabeled => {
                    if !(mode == LabelMode::CertainOnly && fuzzy) {
                        unlabeled.push(i);
                    }
                }
                Split::Validation => {
                    if item.gt_soft.is_some() {
                        validation.push(i);
                    }
                }
            }
        }
        if labeled.is_empty() {
            return Err(Error::NoLabeledData);
        }
        if unlabeled.is_empty() {
            return Err(Error::EmptySplit("unlabeled"));
        }
        if validation.is_empty() {
            return Err(Error::EmptySplit("validation"));
        }
        Ok(TrainingData {
            manifest,
            images,
            labeled,
            unlabeled,
            validation,
        })
    }

    pub fn head(&self, config: &RunConfig) -> HeadConfig {
        config.head.resolve(self.manifest.num_classes)
    }
}

/// Cycles through a pool, reshuffling at every epoch boundary.
#[derive(Debug, Clone)]
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// The plain SSL objective: supervised mean plus unlabeled mean.
///
/// Floating-point operations mirror the zero-weight path of
/// [`losses::evaluate`] so both produce identical bits.
fn vanilla_loss(head: &HeadConfig, inputs: LossInputs<'_>, ssl: &SslContribution) -> Result<(LossBreakdown, LossGradients)> {
    let bl = inputs.labeled.len();
    let bu = inputs.unlabeled.len();
    if bu == 0 {
        return Err(Error::EmptyBatch("unlabeled"));
    }
    let raw = head.raw_len();
    let mut g_l = vec![vec![0.0; raw]; bl];
    let mut g_u = vec![vec![0.0; raw]; bu];
    let mut g_u2 = inputs.unlabeled_aug.map(|_| vec![vec![0.0; raw]; bu]);

    let mut supervised_term = 0.0;
    if bl > 0 {
        let s = 1.0 / bl as f64;
        supervised_term = ssl.supervised.iter().sum::<f64>() / bl as f64;
        if let Some(gs) = &ssl.grad_supervised {
            for (g, d) in g_l.iter_mut().zip(gs) {
                for c in 0..head.k {
                    g[c] += d[c] * s;
                }
            }
        }
    }
    let ssl_term = ssl.per_sample.iter().sum::<f64>() / bu as f64;
    let s = 1.0 / bu as f64;
    for i in 0..bu {
        if let Some(gu) = &ssl.grad_unlabeled {
            for c in 0..head.k {
                g_u[i][c] += gu[i][c] * s;
            }
        }
        if let (Some(gu2), Some(dst)) = (&ssl.grad_unlabeled_aug, g_u2.as_mut()) {
            for c in 0..head.k {
                dst[i][c] += gu2[i][c] * s;
            }
        }
    }
    let breakdown = LossBreakdown {
        total: supervised_term + ssl_term,
        supervised_term,
        ssl_term,
        ce_inv_labeled: 0.0,
        ce_inv_unlabeled: 0.0,
        ambiguity_term: 0.0,
        similarity_term: 0.0,
        fraction_predicted_fuzzy: 0.0,
        weights: None,
    };
    Ok((
        breakdown,
        LossGradients {
            labeled: g_l,
            unlabeled: g_u,
            unlabeled_aug: g_u2,
        },
    ))
}

/// Owns the model and optimizer state of one run.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    config: RunConfig,
    data: &'a TrainingData,
    model: Dc3Model,
    weights: LossWeights,
    velocity: Vec<f64>,
    teacher: Option<Vec<f64>>,
    step: usize,
    batch_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    partner_rng: ChaCha8Rng,
    labeled_sampler: Sampler,
    unlabeled_sampler: Sampler,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &RunConfig, data: &'a TrainingData) -> Result<Self> {
        config.validate()?;
        let head = data.head(config);
        let model = Dc3Model::new(config.backbone.clone(), head, config.seed)?;
        let teacher = (config.ssl.name == SslName::MeanTeacher).then(|| model.net.params.clone());
        Ok(Trainer {
            weights: config.effective_weights(),
            velocity: vec![0.0; model.net.num_params()],
            teacher,
            step: 0,
            batch_rng: stream(config.seed, STREAM_BATCHES),
            augment_rng: stream(config.seed, STREAM_AUGMENT),
            partner_rng: stream(config.seed, STREAM_PARTNERS),
            labeled_sampler: Sampler::new(data.labeled.len()),
            unlabeled_sampler: Sampler::new(data.unlabeled.len()),
            config: config.clone(),
            data,
            model,
        })
    }

    pub fn model(&self) -> &Dc3Model {
        &self.model
    }

    /// Mean-teacher parameters, when that algorithm is selected.
    pub fn teacher_params(&self) -> Option<&[f64]> {
        self.teacher.as_deref()
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Samples one labeled and one unlabeled batch and applies one update.
    pub fn step(&mut self) -> Result<StepLoss> {
        let b = self.config.batch_size;
        let data = self.data;
        let head = self.model.head;
        let labeled: Vec<(usize, usize)> = (0..b)
            .map(|_| data.labeled[self.labeled_sampler.next(&mut self.batch_rng)])
            .collect();
        let unlabeled: Vec<usize> = (0..b)
            .map(|_| data.unlabeled[self.unlabeled_sampler.next(&mut self.batch_rng)])
            .collect();
        let labels: Vec<usize> = labeled.iter().map(|&(_, c)| c).collect();

        let aug = self.config.augment;
        let mut views: Vec<Vec<f64>> = Vec::with_capacity(3 * b);
        for &(i, _) in &labeled {
            views.push(augment::augment(&data.images[i], &aug, &mut self.augment_rng));
        }
        for &i in &unlabeled {
            views.push(augment::augment(&data.images[i], &aug, &mut self.augment_rng));
        }
        let second_view = self.config.ssl.uses_second_view();
        if second_view {
            for &i in &unlabeled {
                views.push(augment::augment(&data.images[i], &aug, &mut self.augment_rng));
            }
        }

        let inputs: Vec<&[f64]> = views.iter().map(Vec::as_slice).collect();
        let traces = self.model.net.forward_batch(&inputs);
        let outputs: Vec<ModelOutputs> = traces.iter().map(|t| self.model.outputs_from_trace(t)).collect();
        let (ol, rest) = outputs.split_at(b);
        let (ou, ou2) = rest.split_at(b);
        let ou2 = second_view.then_some(ou2);

        let teacher_out: Option<Vec<ModelOutputs>> = self.teacher.as_ref().map(|tp| {
            self.model
                .net
                .forward_batch_with(tp, &inputs[2 * b..])
                .iter()
                .map(|t| self.model.outputs_from_trace(t))
                .collect()
        });

        let weight = self.config.ssl.unlabeled_weight(self.step, self.config.steps);
        let contribution = ssl::contribution(&self.config.ssl, ol, &labels, ou, ou2, teacher_out.as_deref(), weight)?;
        let loss_inputs = LossInputs {
            labeled: ol,
            labels: &labels,
            unlabeled: ou,
            unlabeled_aug: ou2,
        };
        let (breakdown, grads) = match self.config.method {
            Method::Vanilla => vanilla_loss(&head, loss_inputs, &contribution)?,
            Method::Dc3 => {
                let detached = Detached::compute(ol, &labels, ou, &self.weights, &mut self.partner_rng);
                losses::evaluate(&head, loss_inputs, &contribution, &detached, &self.weights)?
            }
        };
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                breakdown: breakdown.to_string(),
            });
        }

        let mut d_outputs: Vec<Option<Vec<f64>>> = Vec::with_capacity(views.len());
        d_outputs.extend(grads.labeled.into_iter().map(Some));
        d_outputs.extend(grads.unlabeled.into_iter().map(Some));
        if second_view {
            let g2 = grads.unlabeled_aug.unwrap_or_else(|| vec![vec![0.0; head.raw_len()]; b]);
            d_outputs.extend(g2.into_iter().map(Some));
        }
        let mut grad = vec![0.0; self.model.net.num_params()];
        self.model.net.backward_batch(&traces, &d_outputs, &mut grad);

        if let Some(max_norm) = self.config.optimizer.max_grad_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = self.config.optimizer.lr_at(self.step, self.config.steps);
        let (mu, wd) = (self.config.optimizer.momentum, self.config.optimizer.weight_decay);
        for ((p, v), g) in self.model.net.params.iter_mut().zip(&mut self.velocity).zip(&grad) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
        if let Some(teacher) = self.teacher.as_mut() {
            ssl::ema_update(teacher, &self.model.net.params, self.config.ssl.mean_teacher.ema_decay)?;
        }

        self.step += 1;
        Ok(StepLoss {
            step: self.step,
            lr,
            loss: breakdown,
        })
    }

    pub fn eval_mode(&self) -> EvalMode {
        match self.config.method {
            Method::Vanilla => EvalMode::AllCertain,
            Method::Dc3 => EvalMode::Routed,
        }
    }

    /// Metrics of the current parameters on the validation split.
    pub fn evaluate(&self) -> Result<RunMetrics> {
        evaluate_model(&self.model, self.data, self.eval_mode())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step, self.config.method == Method::Dc3)
    }

    pub fn into_model(self) -> Dc3Model {
        self.model
    }
}

/// Routes the validation split through `model` and scores it.
pub fn evaluate_model(model: &Dc3Model, data: &TrainingData, mode: EvalMode) -> Result<RunMetrics> {
    let items = &data.manifest.items;
    let inputs: Vec<&[f64]> = data
        .validation
        .iter()
        .map(|&i| data.images[i].pixels.as_slice())
        .collect();
    let outputs = model.predict(&inputs);
    let ids: Vec<String> = data.validation.iter().map(|&i| items[i].image_id.clone()).collect();
    let gt: Vec<_> = data
        .validation
        .iter()
        .map(|&i| items[i].gt_soft.clone().expect("validation items carry gt_soft"))
        .collect();
    compute_metrics(&records_from_outputs(&ids, &outputs, &gt, mode), mode)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains one run. With `out_dir`, writes the config, checkpoints, loss and
/// metric histories and an embedding export there.
pub fn train(config: &RunConfig, data: &TrainingData, out_dir: Option<&Path>) -> Result<TrainedRun> {
    let mut trainer = Trainer::new(config, data)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        config.save(&dir.join("config.json"))?;
    }
    let mut loss_history = Vec::new();
    let mut metrics_history = Vec::new();
    let mut checkpoints = Vec::new();
    let save_checkpoint = |trainer: &Trainer, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = out_dir {
            let path = dir.join("checkpoints").join(format!("step_{:06}.json", trainer.steps_done()));
            trainer.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
        Ok(())
    };
    for _ in 0..config.steps {
        let record = trainer.step()?;
        let step = record.step;
        let last = step == config.steps;
        if step % config.log_every == 0 || last {
            loss_history.push(record);
        }
        if !last && config.eval_every > 0 && step % config.eval_every == 0 {
            metrics_history.push(EvalPoint {
                step,
                metrics: trainer.evaluate()?,
            });
        }
        if !last && config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            save_checkpoint(&trainer, &mut checkpoints)?;
        }
    }
    let final_metrics = trainer.evaluate()?;
    metrics_history.push(EvalPoint {
        step: config.steps,
        metrics: final_metrics.clone(),
    });
    save_checkpoint(&trainer, &mut checkpoints)?;

    let mut embeddings = None;
    if let Some(dir) = out_dir {
        write_json(&dir.join("loss_history.json"), &loss_history)?;
        write_json(&dir.join("metrics_history.json"), &metrics_history)?;
        write_json(&dir.join("metrics.json"), &final_metrics)?;
        let path = dir.join("embeddings.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_embeddings(trainer.model(), &data.manifest, &data.images, trainer.eval_mode(), file)?;
        embeddings = Some(path);
    }
    let artifacts = RunArtifacts {
        run_dir: out_dir.map(Path::to_path_buf),
        checkpoints,
        loss_history,
        metrics_history,
        final_metrics,
        embeddings,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("run.json"), &artifacts)?;
    }
    Ok(TrainedRun {
        model: trainer.into_model(),
        artifacts,
    })
}
