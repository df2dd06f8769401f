//! Training loop, evaluation and experiment bookkeeping.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_indices, InputLayout, MnistDataset};
use crate::embedding::{CompressedEmbedding, LabelEmbedding};
use crate::error::{Error, Result};
use crate::formats;
use crate::model::{predict, DualHeadModel, ModelConfig};
use crate::objective::{baseline_objective, compute_objective, pretrained_objective, LossBreakdown, ObjectiveConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Prediction head with one-hot cross entropy only.
    Baseline,
    /// Full objective with a learned m×m embedding.
    LabelEmb,
    /// Full objective with a learned low-rank embedding.
    LabelEmbCompressed,
    /// Prediction head trained against a fixed embedding loaded from disk.
    Pretrained,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "labelemb" => Ok(Mode::LabelEmb),
            "labelemb-compressed" | "labelemb_compressed" => Ok(Mode::LabelEmbCompressed),
            "pretrained" => Ok(Mode::Pretrained),
            _ => Err(Error::Usage(format!("unknown mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Mode::Baseline => "baseline",
            Mode::LabelEmb => "labelemb",
            Mode::LabelEmbCompressed => "labelemb-compressed",
            Mode::Pretrained => "pretrained",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub adam: AdamConfig,
    /// Compressed dimension `h` for [`Mode::LabelEmbCompressed`].
    pub compressed_dim: Option<usize>,
    /// Fixed embedding for [`Mode::Pretrained`].
    pub emb_path: Option<PathBuf>,
    /// Train on only the first `n` training examples.
    pub train_limit: Option<usize>,
    /// Where to write `record.csv`, `model.lmdl` and `embedding.lemb`.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(mode: Mode, model: ModelConfig) -> Self {
        TrainConfig {
            mode,
            model,
            epochs: 20,
            batch_size: 100,
            seed: 0,
            objective: ObjectiveConfig::default(),
            adam: AdamConfig::default(),
            compressed_dim: None,
            emb_path: None,
            train_limit: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        match self.mode {
            Mode::Pretrained if self.emb_path.is_none() => {
                Err(Error::Usage("pretrained mode needs an embedding file".into()))
            }
            Mode::LabelEmbCompressed if !matches!(self.compressed_dim, Some(h) if h >= 1) => {
                Err(Error::Usage("compressed mode needs a compressed dimension h ≥ 1".into()))
            }
            Mode::Baseline | Mode::LabelEmb if self.compressed_dim.is_some() => {
                Err(Error::Usage(format!("a compressed dimension only applies to compressed mode, not {}", self.mode)))
            }
            m if m != Mode::Pretrained && self.emb_path.is_some() => {
                Err(Error::Usage(format!("an embedding file only applies to pretrained mode, not {m}")))
            }
            _ => Ok(()),
        }
    }

    fn layout(&self) -> InputLayout {
        match self.model {
            ModelConfig::Mlp(_) => InputLayout::Flat,
            ModelConfig::Cnn(_) => InputLayout::Image,
        }
    }
}

/// Model, embedding and optimizer state for one run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar = f32> {
    cfg: TrainConfig,
    model: DualHeadModel<T>,
    embedding: Option<LabelEmbedding<T>>,
    model_opt: AdamState<T>,
    emb_opt: AdamState<T>,
    shuffle_rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    /// Initializes the model and, depending on the mode, the embedding
    /// (identity, random factors, or the file named in the config).
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DualHeadModel::init(cfg.model.clone(), cfg.seed)?;
        let m = cfg.model.labels();
        let embedding = match cfg.mode {
            Mode::Baseline => None,
            Mode::LabelEmb => Some(LabelEmbedding::identity(m)),
            Mode::LabelEmbCompressed => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(1);
                let h = cfg.compressed_dim.expect("validated");
                Some(CompressedEmbedding::random(m, h, &mut rng)?.into())
            }
            Mode::Pretrained => {
                let path = cfg.emb_path.as_ref().expect("validated");
                Some(formats::load_embedding(path)?.cast())
            }
        };
        Self::with_parts(cfg, model, embedding)
    }

    /// Uses an existing model and embedding. A pretrained-mode embedding is
    /// frozen; other modes train it.
    pub fn with_parts(cfg: TrainConfig, model: DualHeadModel<T>, embedding: Option<LabelEmbedding<T>>) -> Result<Self> {
        cfg.validate()?;
        let mut embedding = embedding;
        match (&mut embedding, cfg.mode) {
            (None, Mode::Baseline) => {}
            (Some(e), mode) if mode != Mode::Baseline => {
                if e.labels() != model.labels() {
                    return Err(Error::Dimension(format!(
                        "embedding has {} labels but the model predicts {}",
                        e.labels(),
                        model.labels()
                    )));
                }
                e.set_trainable(mode != Mode::Pretrained);
            }
            _ => return Err(Error::Usage(format!("{} mode given the wrong embedding", cfg.mode))),
        }
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(2);
        Ok(Trainer {
            model_opt: AdamState::new(cfg.adam),
            emb_opt: AdamState::new(cfg.adam),
            cfg,
            model,
            embedding,
            shuffle_rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DualHeadModel<T> {
        &self.model
    }

    pub fn embedding(&self) -> Option<&LabelEmbedding<T>> {
        self.embedding.as_ref()
    }

    /// Optimizer updates applied so far, one per batch.
    pub fn steps(&self) -> u64 {
        self.model_opt.steps()
    }

    /// Forward, backward and one Adam update on a single batch.
    pub fn step(&mut self, inputs: crate::tensor::Tensor<T>, targets: &[usize]) -> Result<LossBreakdown> {
        self.model.zero_grad();
        if let Some(e) = self.embedding.as_mut().filter(|e| e.is_trainable()) {
            e.params_mut().into_iter().for_each(|p| p.zero_grad());
        }
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let x = tape.constant(inputs);
        let teacher = matches!(self.cfg.mode, Mode::LabelEmb | Mode::LabelEmbCompressed);
        let out = self.model.forward(&mut tape, &bound, x, teacher)?;
        let bound_emb = self.embedding.as_ref().map(|e| e.bind(&mut tape));
        let objective = match (self.cfg.mode, &bound_emb) {
            (Mode::Baseline, _) => baseline_objective(&mut tape, out.z1, targets)?,
            (Mode::Pretrained, Some(e)) => pretrained_objective(&mut tape, out.z1, targets, e)?,
            (_, Some(e)) => {
                compute_objective(&mut tape, out.z1, out.z2.expect("teacher head"), targets, e, &self.cfg.objective)?
            }
            (_, None) => unreachable!("embedding presence checked at construction"),
        };
        tape.backward(objective.total)?;
        self.model.accumulate_grads(&tape, &bound)?;
        self.model_opt.step(self.model.params_mut())?;
        if let (Some(e), Some(b)) = (self.embedding.as_mut(), bound_emb) {
            if e.is_trainable() {
                e.accumulate_grads(&tape, &b)?;
                self.emb_opt.step(e.params_mut())?;
            }
        }
        Ok(objective.breakdown)
    }

    /// One shuffled pass over `data`; returns the mean of the batch losses.
    pub fn train_epoch(&mut self, data: &MnistDataset) -> Result<LossBreakdown> {
        let groups = batch_indices(data.len(), self.cfg.batch_size, self.shuffle_rng.next_u64(), true)?;
        let layout = self.cfg.layout();
        let mut sum = LossBreakdown::default();
        for idx in &groups {
            let batch = data.batch::<T>(idx, layout);
            sum = sum + self.step(batch.inputs, &batch.targets)?;
        }
        Ok(sum / groups.len().max(1) as f64)
    }

    pub fn into_parts(self) -> (DualHeadModel<T>, Option<LabelEmbedding<T>>) {
        (self.model, self.embedding)
    }
}

const EVAL_BATCH: usize = 500;

/// Percentage of examples whose predicted label differs from the truth.
pub fn evaluate<T: Scalar>(model: &DualHeadModel<T>, data: &MnistDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let layout = match model.config() {
        ModelConfig::Mlp(_) => InputLayout::Flat,
        ModelConfig::Cnn(_) => InputLayout::Image,
    };
    let mut wrong = 0usize;
    for idx in batch_indices(data.len(), EVAL_BATCH, 0, false)? {
        let batch = data.batch::<T>(&idx, layout);
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let x = tape.constant(batch.inputs);
        let out = model.forward(&mut tape, &bound, x, false)?;
        wrong += predict(tape.value(out.z1)).iter().zip(&batch.targets).filter(|(p, t)| p != t).count();
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub dev_err: f64,
    pub test_err: f64,
    pub seconds: f64,
}

pub const RECORD_HEADER: &str = "epoch,pred_ce,emb_target_ce,teacher_ce,hinge,emb_learn_ce,total,dev_err,test_err,seconds";

/// Per-epoch metrics of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentRecord {
    pub rows: Vec<EpochRow>,
}

impl ExperimentRecord {
    /// The row with the lowest dev error, earliest on ties.
    pub fn best(&self) -> Option<&EpochRow> {
        self.rows.iter().fold(None, |best: Option<&EpochRow>, r| match best {
            Some(b) if b.dev_err <= r.dev_err => Some(b),
            _ => Some(r),
        })
    }

    /// Test error at the best-dev epoch.
    pub fn headline(&self) -> Option<f64> {
        self.best().map(|r| r.test_err)
    }

    /// First epoch whose dev error is at or below `threshold`.
    pub fn first_epoch_at_or_below(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.dev_err <= threshold).map(|r| r.epoch)
    }

    /// Equality of everything except wall-clock time.
    pub fn same_metrics(&self, other: &ExperimentRecord) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.epoch == b.epoch && a.loss == b.loss && a.dev_err == b.dev_err && a.test_err == b.test_err
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RECORD_HEADER);
        s.push('\n');
        for r in &self.rows {
            let l = r.loss;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{:.3}",
                r.epoch, l.pred_ce, l.emb_target_ce, l.teacher_ce, l.hinge, l.emb_learn_ce, l.total, r.dev_err, r.test_err, r.seconds
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RECORD_HEADER) {
            return Err(Error::Format("record does not start with the expected header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("record row {}: {e}", i + 1)))?;
            if f.len() != 10 {
                return Err(Error::Format(format!("record row {} has {} fields", i + 1, f.len())));
            }
            rows.push(EpochRow {
                epoch: f[0] as usize,
                loss: LossBreakdown {
                    pred_ce: f[1],
                    emb_target_ce: f[2],
                    teacher_ce: f[3],
                    hinge: f[4],
                    emb_learn_ce: f[5],
                    total: f[6],
                },
                dev_err: f[7],
                test_err: f[8],
                seconds: f[9],
            });
        }
        Ok(ExperimentRecord { rows })
    }
}

/// Train, dev and test sets for a run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: MnistDataset,
    pub dev: MnistDataset,
    pub test: MnistDataset,
}

impl Splits {
    /// Loads a directory holding the four standard MNIST files and carves
    /// the dev set from the front of the training file.
    pub fn load(dir: &Path) -> Result<Self> {
        let (full, test) = crate::data::load_mnist_dir(dir)?;
        let (train, dev) = crate::data::split_train_dev(&full)?;
        Ok(Splits { train, dev, test })
    }
}

/// What a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct Experiment<T: Scalar = f32> {
    pub record: ExperimentRecord,
    pub model: DualHeadModel<T>,
    pub embedding: Option<LabelEmbedding<T>>,
}

pub const RECORD_FILE: &str = "record.csv";
pub const CHECKPOINT_FILE: &str = "model.lmdl";
pub const EMBEDDING_FILE: &str = "embedding.lemb";

/// Trains for `cfg.epochs`, evaluating dev and test error after each epoch.
/// `on_epoch` sees every row as it is produced. When `cfg.out_dir` is set
/// the record, the final model and (for the learning modes) the final
/// embedding are written there.
pub fn run_experiment<T: Scalar>(
    cfg: &TrainConfig,
    splits: &Splits,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<Experiment<T>> {
    let mut trainer = Trainer::<T>::new(cfg.clone())?;
    let train = match cfg.train_limit {
        Some(n) => splits.train.take(n),
        None => splits.train.clone(),
    };
    let mut record = ExperimentRecord::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let loss = trainer.train_epoch(&train)?;
        let seconds = start.elapsed().as_secs_f64();
        let row = EpochRow {
            epoch,
            loss,
            dev_err: evaluate(trainer.model(), &splits.dev)?,
            test_err: evaluate(trainer.model(), &splits.test)?,
            seconds,
        };
        on_epoch(&row);
        record.rows.push(row);
    }
    let (model, embedding) = trainer.into_parts();
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RECORD_FILE);
        fs::write(&path, record.to_csv()).map_err(|e| Error::io(&path, e))?;
        formats::save_checkpoint(&dir.join(CHECKPOINT_FILE), &model)?;
        if let (Some(e), true) = (&embedding, cfg.mode != Mode::Pretrained) {
            formats::save_embedding(&dir.join(EMBEDDING_FILE), e)?;
        }
    }
    Ok(Experiment { record, model, embedding })
}
