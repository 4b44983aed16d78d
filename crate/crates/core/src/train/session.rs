//! Epoch loops for teacher training and student distillation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::history::{EpochRecord, TrainHistory};
use super::optim::Adam;
use super::schedule::{PlateauScheduler, DEFAULT_MIN_LR};
use crate::arch::ArchSpec;
use crate::autograd::Var;
use crate::data::{augment, ClassLabel, SampleSource, SegBatch, SegSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, weight_balance_loss, LossWeights, PredictionBundle};
use crate::metrics::{image_metrics, MetricsReport};
use crate::models::{Network, NetworkHandle, Role};
use crate::ops::sigmoid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Teachers only provide soft maps.
    #[default]
    Frozen,
    /// Teachers also step on their own hard loss over same-class batch items.
    Cofinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub seed: u64,
    pub teacher_mode: TeacherMode,
    /// Apply the default flip/rotation/brightness augmentation to every
    /// training sample.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            batch_size: 8,
            epochs: 20,
            plateau_patience: 3,
            plateau_factor: 0.1,
            min_lr: DEFAULT_MIN_LR,
            seed: 0,
            teacher_mode: TeacherMode::Frozen,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if !(self.min_lr >= 0.0) {
            return bad(format!("min_lr must be nonnegative, got {}", self.min_lr));
        }
        Ok(())
    }
}

/// An index view onto another source.
pub struct Subset<'a> {
    source: &'a dyn SampleSource,
    indices: Vec<usize>,
}

impl<'a> Subset<'a> {
    pub fn new(source: &'a dyn SampleSource, indices: Vec<usize>) -> Self {
        Subset { source, indices }
    }

    pub fn of_class(source: &'a dyn SampleSource, class: ClassLabel) -> Self {
        let indices = (0..source.len()).filter(|&i| source.class_label(i) == class).collect();
        Subset { source, indices }
    }
}

impl SampleSource for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn class_label(&self, index: usize) -> ClassLabel {
        self.source.class_label(self.indices[index])
    }

    fn sample(&self, index: usize) -> Result<SegSample> {
        self.source.sample(self.indices[index])
    }
}

#[derive(Clone, Debug, Default)]
pub struct Teachers {
    pub benign: Option<NetworkHandle>,
    pub malignant: Option<NetworkHandle>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_finite(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} loss became {value}")))
    }
}

/// One optimizer step on `L_WB` alone.
fn hard_step(net: &mut NetworkHandle, opt: &mut Adam, batch: &SegBatch) -> Result<f64> {
    let params = net.bind(true);
    let logits = net.forward_train(&params, &Var::constant(batch.images.clone()))?;
    let loss = weight_balance_loss(&sigmoid(&logits), &batch.masks)?;
    let value = loss.value().data()[0] as f64;
    check_finite(value, "hard")?;
    loss.backward()?;
    let grads: Vec<_> = params.iter().map(Var::grad).collect();
    drop((loss, logits, params));
    opt.step(net.params_mut(), &grads)?;
    Ok(value)
}

/// Stateful trainer for one network, optionally guided by teachers.
pub struct TrainSession {
    net: NetworkHandle,
    opt: Adam,
    scheduler: PlateauScheduler,
    teachers: Teachers,
    teacher_opts: [Option<Adam>; 2],
    weights: LossWeights,
    temperature: f64,
    cfg: TrainConfig,
    history: TrainHistory,
}

impl TrainSession {
    /// Plain training on `L_WB`.
    pub fn supervised(net: NetworkHandle, cfg: &TrainConfig) -> Result<Self> {
        Self::distill(net, Teachers::default(), LossWeights::supervised(), 1.0, cfg)
    }

    pub fn distill(
        net: NetworkHandle,
        teachers: Teachers,
        weights: LossWeights,
        temperature: f64,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if weights.benign > 0.0 && teachers.benign.is_none() {
            return Err(Error::Config("benign teacher weight is positive but no benign teacher was given".into()));
        }
        if weights.malignant > 0.0 && teachers.malignant.is_none() {
            return Err(Error::Config(
                "malignant teacher weight is positive but no malignant teacher was given".into(),
            ));
        }
        let opt = Adam::new(net.params(), net.decay_mask(), cfg.lr, cfg.weight_decay);
        let teacher_opt = |t: &Option<NetworkHandle>| match (cfg.teacher_mode, t) {
            (TeacherMode::Cofinetune, Some(t)) => Some(Adam::new(t.params(), t.decay_mask(), cfg.lr, cfg.weight_decay)),
            _ => None,
        };
        let teacher_opts = [teacher_opt(&teachers.benign), teacher_opt(&teachers.malignant)];
        Ok(TrainSession {
            net,
            opt,
            scheduler: PlateauScheduler::new(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr),
            teachers,
            teacher_opts,
            weights,
            temperature,
            cfg: cfg.clone(),
            history: TrainHistory::default(),
        })
    }

    pub fn network(&self) -> &NetworkHandle {
        &self.net
    }

    pub fn teachers(&self) -> &Teachers {
        &self.teachers
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr
    }

    pub fn into_parts(self) -> (NetworkHandle, Teachers, TrainHistory) {
        (self.net, self.teachers, self.history)
    }

    /// One optimizer step on a batch; returns `[total, wb, kl_benign, kl_malignant]`.
    pub fn step(&mut self, samples: &[SegSample]) -> Result<[f64; 4]> {
        let batch = SegBatch::from_samples(samples)?;
        let soft = |t: &Option<NetworkHandle>, w: f64| -> Result<_> {
            match t {
                Some(t) if w > 0.0 => Ok(Some(t.predict_probs(&batch.images)?)),
                _ => Ok(None),
            }
        };
        let pb = soft(&self.teachers.benign, self.weights.benign)?;
        let pm = soft(&self.teachers.malignant, self.weights.malignant)?;

        let params = self.net.bind(true);
        let logits = self.net.forward_train(&params, &Var::constant(batch.images.clone()))?;
        let q = sigmoid(&logits);
        let bundle = PredictionBundle { student: &q, benign: pb.as_ref(), malignant: pm.as_ref(), target: &batch.masks };
        let parts = total_loss(&bundle, &self.weights, self.temperature)?;
        let total = parts.total.value().data()[0] as f64;
        check_finite(total, "total")?;
        parts.total.backward()?;
        let grads: Vec<_> = params.iter().map(Var::grad).collect();
        let out = [total, parts.wb, parts.kl_benign, parts.kl_malignant];
        drop((parts, q, logits, params));
        self.opt.step(self.net.params_mut(), &grads)?;

        let classes = [ClassLabel::Benign, ClassLabel::Malignant];
        let nets = [&mut self.teachers.benign, &mut self.teachers.malignant];
        for ((net, opt), class) in nets.into_iter().zip(&mut self.teacher_opts).zip(classes) {
            if let (Some(net), Some(opt)) = (net, opt) {
                let own: Vec<SegSample> = samples.iter().filter(|s| s.class_label == class).cloned().collect();
                if !own.is_empty() {
                    hard_step(net, opt, &SegBatch::from_samples(&own)?)?;
                }
            }
        }
        Ok(out)
    }

    /// One pass over `train` in a seed-determined order, then validation and
    /// the plateau update.
    pub fn run_epoch(&mut self, train: &dyn SampleSource, val: Option<&dyn SampleSource>) -> Result<&EpochRecord> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let epoch = self.history.epochs.len() + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let lr = self.opt.lr;
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = train.sample(i)?;
                samples.push(if self.cfg.augment { augment(&s, mix(self.cfg.seed, epoch as u64, i as u64)) } else { s });
            }
            let losses = self.step(&samples)?;
            for (acc, v) in sums.iter_mut().zip(losses) {
                *acc += v;
            }
            steps += 1;
        }
        let [total, wb, kl_benign, kl_malignant] = sums.map(|s| s / steps as f64);
        let val = match val {
            Some(v) => Some(evaluate(&self.net, v, self.cfg.batch_size)?),
            None => None,
        };
        self.history.push(EpochRecord { epoch, total, wb, kl_benign, kl_malignant, lr, val })?;
        let next = self.scheduler.observe(total);
        self.opt.lr = next;
        for opt in self.teacher_opts.iter_mut().flatten() {
            opt.lr = next;
        }
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn run(&mut self, train: &dyn SampleSource, val: Option<&dyn SampleSource>) -> Result<()> {
        for _ in 0..self.cfg.epochs {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }
}

fn teacher_class(role: Role) -> Result<ClassLabel> {
    match role {
        Role::BenignTeacher => Ok(ClassLabel::Benign),
        Role::MalignantTeacher => Ok(ClassLabel::Malignant),
        Role::Student => Err(Error::Config("train_teacher needs a teacher role".into())),
    }
}

/// Trains a teacher from scratch on the items of its own class.
pub fn train_teacher(
    spec: &ArchSpec,
    role: Role,
    train: &dyn SampleSource,
    val: Option<&dyn SampleSource>,
    cfg: &TrainConfig,
) -> Result<(NetworkHandle, TrainHistory)> {
    let class = teacher_class(role)?;
    let own = Subset::of_class(train, class);
    if own.is_empty() {
        return Err(Error::Config(format!("no {class} training samples for the {role}")));
    }
    let net = Network::new(spec.clone(), role, cfg.seed)?;
    let mut session = TrainSession::supervised(net, cfg)?;
    session.run(&own, val)?;
    let (net, _, history) = session.into_parts();
    Ok((net, history))
}

pub struct DistillOutcome {
    pub student: NetworkHandle,
    pub teachers: Teachers,
    pub history: TrainHistory,
}

/// Trains `student` on all of `train` against ground truth and teacher maps.
pub fn distill_student(
    student: NetworkHandle,
    teachers: Teachers,
    train: &dyn SampleSource,
    val: Option<&dyn SampleSource>,
    weights: LossWeights,
    temperature: f64,
    cfg: &TrainConfig,
) -> Result<DistillOutcome> {
    let mut session = TrainSession::distill(student, teachers, weights, temperature, cfg)?;
    session.run(train, val)?;
    let (student, teachers, history) = session.into_parts();
    Ok(DistillOutcome { student, teachers, history })
}

/// Inference-mode per-image metrics averaged over the source.
pub fn evaluate(net: &NetworkHandle, source: &dyn SampleSource, batch_size: usize) -> Result<MetricsReport> {
    if source.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let mut reports = Vec::with_capacity(source.len());
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = chunk.iter().map(|&i| source.sample(i)).collect::<Result<Vec<_>>>()?;
        let batch = SegBatch::from_samples(&samples)?;
        let probs = net.predict_probs(&batch.images)?;
        let per = probs.len() / samples.len();
        for (k, s) in samples.iter().enumerate() {
            reports.push(image_metrics(&probs.data()[k * per..(k + 1) * per], s.mask.data())?);
        }
    }
    MetricsReport::mean(&reports)
}
