//! Training, evaluation, expert-usage accounting and ablation runs.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::dbi::Interaction;
use crate::error::{Error, Result};
use crate::feature_io::{Dataset, FeatureSequence};
use crate::hmoe::Combination;
use crate::model::{Aggregation, Model, ModelConfig};
use crate::nn::Linear;
use crate::objectives::{self, LossBreakdown, LossTerms, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::params::{rng_stream, streams, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Seed of minibatch shuffling.
    pub seed: u64,
    /// Evaluate on the held-out set every `eval_every` epochs and after the
    /// last one.
    pub eval_every: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            seed: 0,
            eval_every: 1,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        self.adam().validate()?;
        self.loss.validate()
    }
}

/// Loss, logits and readout mass of one minibatch.
pub struct BatchOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub logits: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

/// Builds the forward graph and every loss term for `clips`.
pub fn batch_forward(g: &mut Graph, model: &Model, clips: &[&FeatureSequence], w: &LossWeights) -> Result<BatchOutput> {
    if clips.is_empty() {
        return Err(Error::contract("empty minibatch"));
    }
    let mut logits = Vec::with_capacity(clips.len());
    let mut weights = Vec::with_capacity(clips.len());
    let mut experts = Vec::with_capacity(clips.len());
    let mut s_pred = Vec::new();
    let mut s_tgt = Vec::new();
    for clip in clips {
        let out = model.forward(g, &clip.frames)?;
        logits.push(out.logits);
        weights.push(out.weights);
        experts.push(out.expert_outputs);
        for (sp, trace) in out.s_pred.into_iter().zip(&out.traces) {
            s_pred.push(sp);
            s_tgt.push(g.constant(Tensor::from_vec(trace.s_tgt.clone())));
        }
    }
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let logit_mat = g.concat(&logits, 0)?;
    let w_mat = g.concat(&weights, 0)?;
    let terms = LossTerms {
        cls: objectives::loss_cls(g, logit_mat, &labels)?,
        rank: if s_pred.is_empty() {
            g.scalar(0.0)
        } else {
            objectives::loss_rank(g, &s_pred, &s_tgt, w.rank_temperature)?
        },
        div: objectives::loss_div(g, &experts)?,
        gate: objectives::loss_gate(g, w_mat)?,
    };
    let (loss, breakdown) = objectives::loss_total(g, terms, w)?;
    Ok(BatchOutput {
        loss,
        breakdown,
        logits: g
            .value(logit_mat)
            .data()
            .chunks(model.config.num_classes)
            .map(<[f64]>::to_vec)
            .collect(),
        weights: g
            .value(w_mat)
            .data()
            .chunks(model.num_experts())
            .map(<[f64]>::to_vec)
            .collect(),
    })
}

fn argmax(x: &[f64]) -> usize {
    crate::rgsta::argmax(x)
}

/// Predictions of a model over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean over fixed, unshuffled minibatches.
    pub loss: LossBreakdown,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Readout mass per clip.
    pub weights: Vec<Vec<f64>>,
}

/// Top-1 accuracy, loss and readout mass over `ds` in dataset order.
pub fn evaluate(model: &Model, ds: &Dataset, w: &LossWeights, batch_size: usize) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let mut losses = Vec::new();
    let mut predictions = Vec::with_capacity(ds.len());
    let mut weights = Vec::with_capacity(ds.len());
    for chunk in ds.clips.chunks(batch_size.max(1)) {
        let refs: Vec<&FeatureSequence> = chunk.iter().collect();
        let mut g = Graph::new();
        let out = batch_forward(&mut g, model, &refs, w)?;
        losses.push(out.breakdown);
        predictions.extend(out.logits.iter().map(|l| argmax(l)));
        weights.extend(out.weights);
    }
    let labels: Vec<usize> = ds.clips.iter().map(|c| c.label).collect();
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        loss: LossBreakdown::mean(&losses),
        labels,
        predictions,
        weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Train,
    TestCorrect,
    TestWrong,
}

impl Cohort {
    pub fn name(self) -> &'static str {
        match self {
            Cohort::Train => "train",
            Cohort::TestCorrect => "test_correct",
            Cohort::TestWrong => "test_wrong",
        }
    }
}

/// Mean readout mass of one class within one cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageRow {
    pub class: usize,
    pub cohort: Cohort,
    pub count: usize,
    pub weights: Vec<f64>,
}

/// Per-class mean readout mass, split by cohort. Only `(class, cohort)`
/// pairs with at least one clip get a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertUsage {
    pub num_experts: usize,
    pub rows: Vec<UsageRow>,
}

impl ExpertUsage {
    pub fn cohort(&self, cohort: Cohort) -> impl Iterator<Item = &UsageRow> {
        self.rows.iter().filter(move |r| r.cohort == cohort)
    }

    /// Mean Shannon entropy (nats) of the rows of `cohort`.
    pub fn mean_entropy(&self, cohort: Cohort) -> Option<f64> {
        let rows: Vec<&UsageRow> = self.cohort(cohort).collect();
        if rows.is_empty() {
            return None;
        }
        let h: f64 = rows
            .iter()
            .map(|r| -r.weights.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
            .sum();
        Some(h / rows.len() as f64)
    }
}

/// Builds the usage matrices from a training-set and a test-set evaluation.
pub fn expert_usage(train: &Evaluation, test: &Evaluation, num_classes: usize) -> ExpertUsage {
    let n = train.weights.first().or(test.weights.first()).map_or(0, Vec::len);
    let mut sums = std::collections::BTreeMap::<(Cohort, usize), (usize, Vec<f64>)>::new();
    let mut add = |cohort: Cohort, class: usize, w: &[f64]| {
        let e = sums.entry((cohort, class)).or_insert_with(|| (0, vec![0.0; n]));
        e.0 += 1;
        for (a, b) in e.1.iter_mut().zip(w) {
            *a += b;
        }
    };
    for (l, w) in train.labels.iter().zip(&train.weights) {
        add(Cohort::Train, *l, w);
    }
    for ((l, p), w) in test.labels.iter().zip(&test.predictions).zip(&test.weights) {
        let cohort = if l == p { Cohort::TestCorrect } else { Cohort::TestWrong };
        add(cohort, *l, w);
    }
    let rows = sums
        .into_iter()
        .filter(|((_, class), _)| *class < num_classes)
        .map(|((cohort, class), (count, total))| UsageRow {
            class,
            cohort,
            count,
            weights: total.iter().map(|s| s / count as f64).collect(),
        })
        .collect();
    ExpertUsage { num_experts: n, rows }
}

/// Stratified split: from each class, `round(eval_fraction · n_c)` clips go
/// to the held-out set (at least one when the class has two or more).
/// Both halves keep dataset order.
pub fn split_dataset(ds: &Dataset, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::config(format!("eval_fraction {eval_fraction} outside [0, 1)")));
    }
    let mut rng = rng_stream(seed, streams::SPLIT);
    let mut held = vec![false; ds.len()];
    for class in 0..ds.num_classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.clips[i].label == class).collect();
        idx.shuffle(&mut rng);
        let mut k = (eval_fraction * idx.len() as f64).round() as usize;
        if eval_fraction > 0.0 && idx.len() >= 2 {
            k = k.clamp(1, idx.len() - 1);
        }
        for &i in &idx[..k] {
            held[i] = true;
        }
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&i| !held[i]).collect();
    let eval: Vec<usize> = (0..ds.len()).filter(|&i| held[i]).collect();
    Ok((ds.subset(&train), ds.subset(&eval)))
}

/// One optimisation step's loss terms, as written to the step log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub cls: f64,
    pub rank: f64,
    pub div: f64,
    pub gate: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Accuracy of the training minibatches, measured before each update.
    pub train_accuracy: f64,
    pub train_loss: LossBreakdown,
    pub eval_accuracy: Option<f64>,
    pub eval_loss: Option<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub initial_eval_accuracy: f64,
    pub initial_eval_loss: LossBreakdown,
    pub epochs: Vec<EpochReport>,
    pub final_train_accuracy: f64,
    pub final_eval_accuracy: f64,
    pub usage: ExpertUsage,
}

/// Side outputs of a training run.
#[derive(Default)]
pub struct TrainSinks<'a> {
    /// Receives one JSON object per optimisation step.
    pub step_log: Option<&'a mut dyn Write>,
    /// Overwritten with the latest finite parameters after every epoch.
    pub checkpoint: Option<PathBuf>,
}

/// Trains `model` in place on `train_set` and evaluates on `eval_set`.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
    sinks: &mut TrainSinks<'_>,
) -> Result<RunReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    for ds in [train_set, eval_set] {
        if let Some(t) = ds
            .clips
            .iter()
            .map(|c| c.len())
            .find(|&t| model.config.check_len(t).is_err())
        {
            model.config.check_len(t)?;
        }
        if ds.dim != model.config.dim && !ds.is_empty() {
            return Err(Error::shape(format!(
                "dataset D={} but model D={}",
                ds.dim, model.config.dim
            )));
        }
    }
    let save = |model: &Model, epoch: usize, path: &Option<PathBuf>| -> Result<()> {
        match path {
            Some(p) => Checkpoint::of(model, epoch).save(p),
            None => Ok(()),
        }
    };
    save(model, 0, &sinks.checkpoint)?;

    let eval_or_train = if eval_set.is_empty() { train_set } else { eval_set };
    let initial = evaluate(model, eval_or_train, &cfg.loss, cfg.batch_size)?;
    let mut opt = Adam::new(cfg.adam(), &model.params)?;
    let mut rng = rng_stream(cfg.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let clips: Vec<&FeatureSequence> = batch.iter().map(|&i| &train_set.clips[i]).collect();
            let mut g = Graph::new();
            let out = batch_forward(&mut g, model, &clips, &cfg.loss)?;
            let step = opt.steps() + 1;
            if !out.breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    checkpoint: sinks.checkpoint.clone(),
                });
            }
            correct += out
                .logits
                .iter()
                .zip(&clips)
                .filter(|(l, c)| argmax(l) == c.label)
                .count();
            model.params.zero_grad();
            g.backward_into(out.loss, &mut model.params)?;
            if model.params.iter().any(|p| !p.grad.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    checkpoint: sinks.checkpoint.clone(),
                });
            }
            opt.step(&mut model.params);
            let b = out.breakdown;
            if let Some(log) = sinks.step_log.as_deref_mut() {
                let rec = StepRecord {
                    step,
                    cls: b.cls,
                    rank: b.rank,
                    div: b.div,
                    gate: b.gate,
                    total: b.total,
                };
                serde_json::to_writer(&mut *log, &rec)?;
                log.write_all(b"\n")?;
            }
            losses.push(b);
        }
        let finite = model.params.iter().all(|p| p.value.is_finite());
        if !finite {
            return Err(Error::Diverged {
                step: opt.steps(),
                checkpoint: sinks.checkpoint.clone(),
            });
        }
        save(model, epoch, &sinks.checkpoint)?;
        let (eval_accuracy, eval_loss) = if !eval_set.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)
        {
            let e = evaluate(model, eval_set, &cfg.loss, cfg.batch_size)?;
            (Some(e.accuracy), Some(e.loss))
        } else {
            (None, None)
        };
        epochs.push(EpochReport {
            epoch,
            train_accuracy: correct as f64 / train_set.len() as f64,
            train_loss: LossBreakdown::mean(&losses),
            eval_accuracy,
            eval_loss,
        });
    }

    let train_eval = evaluate(model, train_set, &cfg.loss, cfg.batch_size)?;
    let test_eval = if eval_set.is_empty() {
        None
    } else {
        Some(evaluate(model, eval_set, &cfg.loss, cfg.batch_size)?)
    };
    let empty = Evaluation {
        accuracy: 0.0,
        loss: LossBreakdown::default(),
        labels: vec![],
        predictions: vec![],
        weights: vec![],
    };
    let usage = expert_usage(
        &train_eval,
        test_eval.as_ref().unwrap_or(&empty),
        model.config.num_classes,
    );
    Ok(RunReport {
        model: model.config.clone(),
        train: cfg.clone(),
        train_clips: train_set.len(),
        eval_clips: eval_set.len(),
        initial_eval_accuracy: initial.accuracy,
        initial_eval_loss: initial.loss,
        epochs,
        final_train_accuracy: train_eval.accuracy,
        final_eval_accuracy: test_eval.map_or(train_eval.accuracy, |e| e.accuracy),
        usage,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

fn frame_means(ds: &Dataset) -> Tensor {
    let mut data = Vec::with_capacity(ds.len() * ds.dim);
    for clip in &ds.clips {
        let t = clip.len() as f64;
        for c in 0..ds.dim {
            data.push((0..clip.len()).map(|i| clip.frames.get2(i, c)).sum::<f64>() / t);
        }
    }
    Tensor::new(&[ds.len(), ds.dim], data).expect("consistent shape")
}

/// Multinomial logistic regression on time-averaged frames, trained
/// full-batch with Adam.
pub fn linear_probe(
    train_set: &Dataset,
    eval_set: &Dataset,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut store = ParamStore::new(seed);
    let lin = Linear::new(&mut store, "probe", train_set.dim, train_set.num_classes);
    let x = frame_means(train_set);
    let labels: Vec<usize> = train_set.clips.iter().map(|c| c.label).collect();
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        },
        &store,
    )?;
    for _ in 0..steps {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let logits = lin.forward(&mut g, &store, xv)?;
        let loss = objectives::loss_cls(&mut g, logits, &labels)?;
        store.zero_grad();
        g.backward_into(loss, &mut store)?;
        opt.step(&mut store);
    }
    let accuracy = |ds: &Dataset| -> Result<f64> {
        if ds.is_empty() {
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let xv = g.constant(frame_means(ds));
        let logits = lin.forward(&mut g, &store, xv)?;
        let c = ds.num_classes.max(train_set.num_classes);
        let hits = g
            .value(logits)
            .data()
            .chunks(c)
            .zip(&ds.clips)
            .filter(|(l, clip)| argmax(l) == clip.label)
            .count();
        Ok(hits as f64 / ds.len() as f64)
    };
    Ok(ProbeReport {
        train_accuracy: accuracy(train_set)?,
        eval_accuracy: accuracy(eval_set)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Aggregation,
    Interaction,
    Combination,
    ExpertGrid,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Aggregation,
        AblationAxis::Interaction,
        AblationAxis::Combination,
        AblationAxis::ExpertGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Aggregation => "aggregation",
            AblationAxis::Interaction => "interaction",
            AblationAxis::Combination => "combination",
            AblationAxis::ExpertGrid => "expert_grid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Rate sets of the expert-count grid, single experts first.
pub const EXPERT_GRID: [&[usize]; 14] = [
    &[2],
    &[4],
    &[8],
    &[16],
    &[2, 4],
    &[4, 8],
    &[8, 16],
    &[2, 8],
    &[4, 16],
    &[2, 16],
    &[2, 4, 8],
    &[4, 8, 16],
    &[2, 4, 16],
    &[2, 4, 8, 16],
];

fn interaction_name(i: Interaction) -> &'static str {
    match i {
        Interaction::None => "none",
        Interaction::SlowToFast => "slow2fast",
        Interaction::FastToSlow => "fast2slow",
        Interaction::Bidirectional => "bidirectional",
    }
}

/// Named model variants along `axis`; everything else is taken from `base`.
pub fn ablation_variants(axis: AblationAxis, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Aggregation => Aggregation::ALL
            .iter()
            .map(|&a| (a.name().to_string(), with(&|c| c.aggregation = a)))
            .collect(),
        AblationAxis::Interaction => [
            Interaction::None,
            Interaction::SlowToFast,
            Interaction::FastToSlow,
            Interaction::Bidirectional,
        ]
        .iter()
        .map(|&i| (interaction_name(i).to_string(), with(&|c| c.dbi.interaction = i)))
        .collect(),
        AblationAxis::Combination => Combination::ALL
            .iter()
            .map(|&k| (k.name().to_string(), with(&|c| c.combination = k)))
            .collect(),
        AblationAxis::ExpertGrid => EXPERT_GRID
            .iter()
            .map(|rates| {
                let name = rates.iter().map(usize::to_string).collect::<Vec<_>>().join("_");
                (name, with(&|c| c.rates = rates.to_vec()))
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    /// Mean training loss of the last epoch.
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

/// Trains every variant of `axis` from the same seeds and data.
pub fn run_ablation(
    axis: AblationAxis,
    base: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (variant, mc) in ablation_variants(axis, base) {
        let mut model = Model::new(mc)?;
        let report = train(&mut model, train_set, eval_set, cfg, &mut TrainSinks::default())?;
        rows.push(AblationRow {
            variant,
            train_accuracy: report.final_train_accuracy,
            eval_accuracy: report.final_eval_accuracy,
            loss: report.epochs.last().map_or(report.initial_eval_loss, |e| e.train_loss),
        });
    }
    Ok(AblationTable { axis, rows })
}
