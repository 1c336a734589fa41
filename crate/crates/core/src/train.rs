//! Training, evaluation and the metrics log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.ranc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

const LOG_FLOOR: f64 = 1e-12;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub map: f64,
    pub seconds: f64,
}

impl EpochRecord {
    fn new(epoch: u64, split: Split, report: &MetricsReport, seconds: f64) -> Self {
        Self {
            epoch,
            split: split.name().to_string(),
            loss: report.loss,
            acc: report.accuracy,
            map: report.map,
            seconds,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

/// Shuffle and augmentation stream for one epoch.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Forward pass over `samples`; never touches the parameters.
pub fn evaluate(model: &Model, samples: &[Sample], pool: Option<&rayon::ThreadPool>) -> Result<MetricsReport> {
    use rayon::prelude::*;
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let classes = model.config().num_classes;
    let run = |s: &Sample| -> Result<Vec<f64>> {
        let img = augment::center_crop(&s.image, model.config().image_size)?;
        Ok(model.forward(&img)?.probs.into_data())
    };
    let probs: Vec<Result<Vec<f64>>> = match pool {
        Some(p) => p.install(|| samples.par_iter().map(run).collect()),
        None => samples.iter().map(run).collect(),
    };
    let mut scores = Vec::with_capacity(samples.len() * classes);
    let mut loss = 0.0;
    for (p, s) in probs.into_iter().zip(samples) {
        let p = p?;
        if s.label >= classes {
            return Err(Error::Dataset(format!("{}: label {} out of range", s.id, s.label)));
        }
        loss -= p[s.label].max(LOG_FLOOR).ln();
        scores.extend(p);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    MetricsReport::from_scores(&scores, classes, &labels, loss / samples.len() as f64)
}

/// Mini-batch Adam training state.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: u64,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.train.validate()?;
        let model = Model::init(config.model.clone())?;
        let optimizer = Adam::new(AdamConfig::with_lr(config.train.learning_rate), model.params())?;
        let pool = thread_pool(config.train.threads)?;
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: 0,
            pool,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let pool = thread_pool(ck.config.train.threads)?;
        Ok(Self {
            config: ck.config,
            model,
            optimizer: ck.optimizer,
            epoch: ck.epoch,
            pool,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.config.clone(), &self.model, self.optimizer.clone(), self.epoch)
    }

    pub fn pool(&self) -> Option<&rayon::ThreadPool> {
        self.pool.as_ref()
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<MetricsReport> {
        evaluate(&self.model, samples, self.pool.as_ref())
    }

    /// Runs one epoch over `train` and returns the report built from the
    /// predictions made during the epoch.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<MetricsReport> {
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let settings = self.config.train.clone();
        let target = self.config.model.image_size;
        let mut rng = epoch_rng(self.config.model.seed, self.epoch + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let aug = AugmentConfig {
            target,
            rotation_deg: settings.rotation_deg,
            zoom: settings.zoom,
        };

        let classes = self.config.model.num_classes;
        let mut scores = Vec::with_capacity(train.len() * classes);
        let mut labels = Vec::with_capacity(train.len());
        let mut loss_sum = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let images: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    if settings.augment {
                        augment::augment(&train[i].image, &mut rng, &aug)
                    } else {
                        augment::center_crop(&train[i].image, target)
                    }
                })
                .collect::<Result<_>>()?;
            let batch: Vec<(&Tensor, usize)> = images.iter().zip(chunk).map(|(x, &i)| (x, train[i].label)).collect();
            let result = self.model.batch_gradients(&batch, self.pool.as_ref())?;
            if !result.loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            self.optimizer.step(self.model.params_mut(), &result.grads)?;
            loss_sum += result.loss * chunk.len() as f64;
            scores.extend(result.probs.into_iter().flatten());
            labels.extend(chunk.iter().map(|&i| train[i].label));
        }
        self.epoch += 1;
        MetricsReport::from_scores(&scores, classes, &labels, loss_sum / train.len() as f64)
    }
}

/// Paths written by [`train`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join(CHECKPOINT_FILE),
            metrics: dir.join(METRICS_FILE),
            config: dir.join(CONFIG_FILE),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub final_test: MetricsReport,
    pub checkpoint: Checkpoint,
}

fn check_classes(config: &RunConfig, data: &Dataset) -> Result<()> {
    if config.model.num_classes != data.num_classes() {
        return Err(Error::Config(format!(
            "num_classes = {} but the dataset has {} classes",
            config.model.num_classes,
            data.num_classes()
        )));
    }
    Ok(())
}

/// Trains from scratch on `data_dir` and writes the checkpoint, the metrics
/// log and the resolved config into `out_dir`. Every record is also passed to
/// `on_record` as it is produced.
pub fn train(
    config: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    on_record: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let data = Dataset::open(data_dir)?;
    check_classes(config, &data)?;
    let trainer = Trainer::new(config.clone())?;
    run(trainer, &data, out_dir, false, on_record)
}

/// Continues a run from the checkpoint in `out_dir`, appending to its log.
pub fn resume(data_dir: &Path, out_dir: &Path, on_record: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let files = RunFiles::in_dir(out_dir);
    let ck = Checkpoint::load(&files.checkpoint)?;
    let data = Dataset::open(data_dir)?;
    check_classes(&ck.config, &data)?;
    run(Trainer::from_checkpoint(ck)?, &data, out_dir, true, on_record)
}

fn run(
    mut trainer: Trainer,
    data: &Dataset,
    out_dir: &Path,
    append: bool,
    on_record: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let files = RunFiles::in_dir(out_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(&files.config, trainer.config.echo()).map_err(|e| Error::io(&files.config, e))?;
    let train_set = data.load_split(Split::Train)?;
    let test_set = data.load_split(Split::Test)?;

    let log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&files.metrics)
        .map_err(|e| Error::io(&files.metrics, e))?;
    let mut log = BufWriter::new(log);
    let wall = trainer.config.train.log_wall_time;
    let mut records = Vec::new();
    let mut emit = |r: EpochRecord, log: &mut BufWriter<File>| -> Result<()> {
        writeln!(log, "{}", r.to_json()).and_then(|_| log.flush()).map_err(|e| Error::io(&files.metrics, e))?;
        on_record(&r);
        records.push(r);
        Ok(())
    };

    let mut final_test = None;
    if trainer.epoch == 0 {
        let started = Instant::now();
        let report = trainer.evaluate(&test_set)?;
        let secs = if wall { started.elapsed().as_secs_f64() } else { 0.0 };
        emit(EpochRecord::new(0, Split::Test, &report, secs), &mut log)?;
        final_test = Some(report);
    }
    while trainer.epoch < trainer.config.train.epochs as u64 {
        let started = Instant::now();
        let train_report = trainer.train_epoch(&train_set)?;
        let train_secs = started.elapsed().as_secs_f64();
        let test_report = trainer.evaluate(&test_set)?;
        let total = started.elapsed().as_secs_f64();
        let epoch = trainer.epoch;
        emit(
            EpochRecord::new(epoch, Split::Train, &train_report, if wall { train_secs } else { 0.0 }),
            &mut log,
        )?;
        emit(
            EpochRecord::new(epoch, Split::Test, &test_report, if wall { total - train_secs } else { 0.0 }),
            &mut log,
        )?;
        trainer.checkpoint().save(&files.checkpoint)?;
        final_test = Some(test_report);
    }
    let final_test = match final_test {
        Some(r) => r,
        None => trainer.evaluate(&test_set)?,
    };
    let checkpoint = trainer.checkpoint();
    checkpoint.save(&files.checkpoint)?;
    Ok(TrainOutcome {
        records,
        final_test,
        checkpoint,
    })
}

/// Loads a checkpoint and evaluates it on one split of a dataset.
pub fn evaluate_checkpoint(ckpt: &Path, data_dir: &Path, split: Split, threads: usize) -> Result<MetricsReport> {
    let ck = Checkpoint::load(ckpt)?;
    let data = Dataset::open(data_dir)?;
    check_classes(&ck.config, &data)?;
    let model = ck.model()?;
    let samples = data.load_split(split)?;
    let pool = thread_pool(threads)?;
    evaluate(&model, &samples, pool.as_ref())
}
