//! Teacher-forced training with set loss, AdamW and best-dev checkpointing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ProblemInstance;
use crate::equation::{ConstantTable, Triple};
use crate::labels::{compile_label_sets, LabelSet};
use crate::matching::{assign, loss_targets, LossPolicy, Matching};
use crate::metrics::{evaluate_model, EvalReport};
use crate::model::{kv_get, LayerOutput, Model, ModelConfig, ModelError, Vocab};
use crate::numeric::{grad_check, GradCheckReport, Grads, NumericError, ParamStore, Tape, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("instance {id}: {reason}")]
    LabelCompileError { id: String, reason: String },
    #[error("{0}")]
    EmptyData(&'static str),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub policy: LossPolicy,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// One run per seed; each seeds parameters, shuffling and random matching.
    pub seeds: Vec<u64>,
    pub weight_decay: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup: f64,
    pub clip_norm: f64,
    /// Stop after this many epochs without dev improvement (0 = never).
    pub patience: usize,
    /// Stop once dev accuracy reaches this value.
    pub target_dev_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            policy: LossPolicy::default(),
            lr: 3e-4,
            batch_size: 16,
            epochs: 30,
            seeds: vec![0],
            weight_decay: 0.01,
            warmup: 0.05,
            clip_norm: 1.0,
            patience: 0,
            target_dev_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "lr",
        "batch_size",
        "epochs",
        "seeds",
        "weight_decay",
        "warmup",
        "clip_norm",
        "patience",
        "target_dev_accuracy",
        "matching",
        "operand_none_loss",
        "operator_none_loss",
        "seed",
    ];

    /// Model keys and training keys from one key-value map. A single `seed`
    /// key also fills `seeds` when the latter is absent.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self, TrainError> {
        let model = ModelConfig::from_kv(map)?;
        let mut c = TrainConfig {
            seeds: vec![model.seed],
            model,
            ..TrainConfig::default()
        };
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = kv_get(map, stringify!($f))? {
                    c.$f = v;
                }
            )*};
        }
        take!(lr, batch_size, epochs, weight_decay, warmup, clip_norm, patience);
        c.target_dev_accuracy = kv_get(map, "target_dev_accuracy")?;
        if let Some(s) = map.get("seeds") {
            c.seeds = s
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| TrainError::Config(format!("bad seeds: {s}")))?;
        }
        if let Some(m) = map.get("matching") {
            c.policy.matching = Matching::from_name(m).ok_or_else(|| TrainError::Config(format!("unknown matching {m}")))?;
        }
        if let Some(v) = kv_get(map, "operand_none_loss")? {
            c.policy.operand_none_loss = v;
        }
        if let Some(v) = kv_get(map, "operator_none_loss")? {
            c.policy.operator_none_loss = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("batch_size and lr must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad("warmup must be in [0, 1)");
        }
        Ok(())
    }
}

/// Gold label sets per instance, with a trailing all-`None` set that teaches
/// the decoder to stop.
#[derive(Clone, Debug)]
pub struct PreparedInstance {
    pub index: usize,
    pub labels: Vec<LabelSet>,
}

/// Compiles training labels, growing `constants` with any new equation
/// constants. Instances needing more than `max_layers` layers are skipped.
pub fn prepare(
    data: &[ProblemInstance],
    constants: &mut ConstantTable,
    config: &ModelConfig,
) -> Result<Vec<PreparedInstance>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for (index, inst) in data.iter().enumerate() {
        let compile_err = |reason: String| TrainError::LabelCompileError {
            id: inst.id.clone(),
            reason,
        };
        let tree = inst.tree(constants).map_err(|e| compile_err(e.to_string()))?;
        let compiled = compile_label_sets(&tree, config.k).map_err(|e| compile_err(e.to_string()))?;
        let mut labels = compiled.layers;
        if labels.is_empty() {
            return Err(compile_err("equation has no operator".into()));
        }
        if labels.len() > config.max_layers {
            skipped += 1;
            continue;
        }
        if labels.len() < config.max_layers {
            labels.push(LabelSet {
                layer_index: labels.len(),
                triples: vec![Triple::PAD; config.k],
            });
        }
        out.push(PreparedInstance { index, labels });
    }
    if skipped > 0 {
        warn!("skipped {skipped} instances deeper than max_layers={}", config.max_layers);
    }
    Ok(out)
}

/// Summed set loss over layers as a tape scalar, plus per-layer values.
pub fn instance_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    outputs: &[LayerOutput],
    labels: &[LabelSet],
    policy: &LossPolicy,
    rng: &mut R,
) -> Result<(Var, Vec<f64>), ModelError> {
    let mut terms = Vec::new();
    let mut per_layer = Vec::with_capacity(outputs.len());
    for (out, set) in outputs.iter().zip(labels) {
        let preds = out.predictions(tape);
        let beta = assign(set, &preds, &out.space, policy.matching, rng)?;
        let targets = loss_targets(set, &beta, &out.space, policy)?;
        per_layer.push(targets.value(&preds));
        for (v, entries) in [(out.log_op, &targets.op), (out.log_left, &targets.left), (out.log_right, &targets.right)] {
            if !entries.is_empty() {
                terms.push(tape.pick_sum(v, entries));
            }
        }
    }
    let loss = if terms.is_empty() {
        tape.input(1, 1, vec![0.0])
    } else {
        tape.sum(&terms)
    };
    Ok((loss, per_layer))
}

/// Decoupled-weight-decay Adam.
pub struct AdamW {
    m: Grads,
    v: Grads,
    decay: Vec<bool>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    /// Biases, norms gains and offsets are not decayed.
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let decay = params
            .iter()
            .map(|(_, name, _)| !(name.ends_with(".b") || name.ends_with(".g")))
            .collect();
        AdamW {
            m: Grads::zeros_like(params),
            v: Grads::zeros_like(params),
            decay,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let decay = self.decay[idx];
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(id);
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(id), self.v.get(id));
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                if decay {
                    p[i] -= lr * self.weight_decay * p[i];
                }
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Linear warmup then linear decay to zero.
pub fn lr_at(base: f64, step: usize, total: usize, warmup: f64) -> f64 {
    let warm = ((warmup * total as f64).round() as usize).max(1);
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        let rest = total.saturating_sub(warm).max(1);
        base * (1.0 - (step - warm) as f64 / rest as f64).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub best_dev: EvalReport,
    pub history: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub runs: Vec<SeedRun>,
    pub dev_accuracy_mean: f64,
    /// Population std; zero for one seed.
    pub dev_accuracy_std: f64,
    /// Histogram of gold layer counts in the training set.
    pub gold_layer_histogram: BTreeMap<usize, usize>,
    pub skipped_instances: usize,
}

pub struct Trained {
    /// Best-dev model of the best seed.
    pub model: Model,
    pub report: RunReport,
}

fn training_vocab(data: &[ProblemInstance]) -> Vocab {
    Vocab::build(data.iter().map(|d| d.text.as_slice()))
}

/// Trains one model per seed and keeps the best dev checkpoint of each; the
/// returned model is the best across seeds (first on ties).
pub fn train(config: &TrainConfig, train_set: &[ProblemInstance], dev_set: &[ProblemInstance]) -> Result<Trained, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyData("training set is empty"));
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptyData("dev set is empty"));
    }
    let mut model_config = config.model.clone();
    model_config.operand_pad = config.policy.operand_none_loss;
    let mut constants = ConstantTable::default();
    let prepared = prepare(train_set, &mut constants, &model_config)?;
    if prepared.is_empty() {
        return Err(TrainError::EmptyData("no trainable instances"));
    }
    let mut histogram = BTreeMap::new();
    for p in &prepared {
        let real = p.labels.iter().filter(|l| l.valid_count() > 0).count();
        *histogram.entry(real).or_insert(0) += 1;
    }
    let vocab = training_vocab(train_set);

    let mut best: Option<(f64, Model)> = None;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let mc = ModelConfig {
            seed,
            ..model_config.clone()
        };
        let model = Model::new(mc, vocab.clone(), constants.clone())?;
        let (model, run) = train_seed(config, model, seed, train_set, &prepared, dev_set)?;
        if best.as_ref().is_none_or(|(acc, _)| run.best_dev_accuracy > *acc) {
            best = Some((run.best_dev_accuracy, model));
        }
        runs.push(run);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.best_dev_accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
    Ok(Trained {
        model: best.expect("at least one seed").1,
        report: RunReport {
            runs,
            dev_accuracy_mean: mean,
            dev_accuracy_std: std,
            gold_layer_histogram: histogram,
            skipped_instances: train_set.len() - prepared.len(),
        },
    })
}

fn train_seed(
    config: &TrainConfig,
    mut model: Model,
    seed: u64,
    data: &[ProblemInstance],
    prepared: &[PreparedInstance],
    dev: &[ProblemInstance],
) -> Result<(Model, SeedRun), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1e);
    let mut opt = AdamW::new(&model.params, config.weight_decay);
    let steps_per_epoch = prepared.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;
    let mut best_params = model.params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_dev = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let started = std::time::Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Grads::zeros_like(&model.params);
            for &i in batch {
                let p = &prepared[i];
                let mut tape = Tape::new(&model.params);
                let outputs = model.forward_train(&mut tape, &data[p.index], &p.labels)?;
                let (loss, _) = instance_loss(&mut tape, &outputs, &p.labels, &config.policy, &mut rng)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(TrainError::DivergedLoss { epoch, step });
                }
                loss_sum += value;
                grads.add_assign(&tape.backward(loss));
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, step });
            }
            if config.clip_norm > 0.0 && norm > config.clip_norm {
                grads.scale(config.clip_norm / norm);
            }
            opt.step(&mut model.params, &grads, lr_at(config.lr, step, total_steps, config.warmup));
            step += 1;
        }
        let report = evaluate_model(&model, dev);
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / prepared.len() as f64,
            dev_accuracy: report.answer_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "seed={seed} epoch={epoch} train_loss={:.4} dev_accuracy={:.4} seconds={:.1}",
            stats.train_loss, stats.dev_accuracy, stats.seconds
        );
        history.push(stats);
        if report.answer_accuracy > best_acc {
            best_acc = report.answer_accuracy;
            best_epoch = epoch;
            best_params = model.params.clone();
            best_dev = Some(report);
            stale = 0;
        } else {
            stale += 1;
        }
        if config.target_dev_accuracy.is_some_and(|t| best_acc >= t) || (config.patience > 0 && stale >= config.patience) {
            break;
        }
    }
    model.params = best_params;
    Ok((
        model,
        SeedRun {
            seed,
            best_epoch,
            best_dev_accuracy: best_acc,
            best_dev: best_dev.expect("at least one epoch"),
            history,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub dev_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// One training run per query count with the first seed; failures are
/// recorded and the sweep continues.
pub fn sweep_queries(base: &TrainConfig, ks: &[usize], train_set: &[ProblemInstance], dev_set: &[ProblemInstance]) -> Vec<SweepRow> {
    ks.iter()
        .map(|&k| {
            let mut c = base.clone();
            c.model.k = k;
            c.seeds.truncate(1);
            match train(&c, train_set, dev_set) {
                Ok(t) => SweepRow {
                    k,
                    dev_accuracy: Some(t.report.dev_accuracy_mean),
                    error: None,
                },
                Err(e) => SweepRow {
                    k,
                    dev_accuracy: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k,dev_accuracy,error\n");
    for r in rows {
        let acc = r.dev_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
        let _ = writeln!(s, "{},{acc},{err}", r.k);
    }
    s
}

/// Finite-difference check of the full teacher-forced loss of one instance
/// with respect to every model parameter.
///
/// Matchings are fixed from the unperturbed parameters so that the checked
/// function is smooth; `eps`-sized perturbations would otherwise be able to
/// flip a near-tied assignment.
pub fn gradient_check(model: &Model, inst: &ProblemInstance, policy: &LossPolicy, eps: f64) -> Result<GradCheckReport, TrainError> {
    let mut constants = model.constants.clone();
    let prepared = prepare(std::slice::from_ref(inst), &mut constants, &model.config)?;
    let labels = match prepared.into_iter().next() {
        Some(p) => p.labels,
        None => return Err(TrainError::EmptyData("instance is deeper than max_layers")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let targets = {
        let mut tape = Tape::new(&model.params);
        let outputs = model.forward_train(&mut tape, inst, &labels)?;
        let mut targets = Vec::with_capacity(outputs.len());
        for (out, set) in outputs.iter().zip(&labels) {
            let preds = out.predictions(&tape);
            let beta = assign(set, &preds, &out.space, policy.matching, &mut rng).map_err(ModelError::from)?;
            targets.push(loss_targets(set, &beta, &out.space, policy).map_err(ModelError::from)?);
        }
        targets
    };
    let report = grad_check(&model.params, eps, |tape| {
        let outputs = model.forward_train(tape, inst, &labels).map_err(|e| match e {
            ModelError::Numeric(n) => n,
            other => NumericError::ShapeMismatch(other.to_string()),
        })?;
        let mut terms = Vec::new();
        for (out, t) in outputs.iter().zip(&targets) {
            for (v, entries) in [(out.log_op, &t.op), (out.log_left, &t.left), (out.log_right, &t.right)] {
                if !entries.is_empty() {
                    terms.push(tape.pick_sum(v, entries));
                }
            }
        }
        Ok(tape.sum(&terms))
    })
    .map_err(ModelError::from)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::model::parse_kv;

    fn small() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d: 16,
                n_heads: 2,
                encoder_depth: 1,
                max_layers: 5,
                ..ModelConfig::default()
            },
            lr: 3e-3,
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    fn corpus(n: usize, seed: u64) -> Vec<ProblemInstance> {
        synth_generate(&SynthSpec {
            n_instances: n,
            seed,
            max_internal_nodes: 3,
            ..SynthSpec::default()
        })
    }

    #[test]
    fn lr_schedule_shape() {
        assert!((lr_at(1.0, 0, 100, 0.05) - 0.2).abs() < 1e-12);
        assert!((lr_at(1.0, 4, 100, 0.05) - 1.0).abs() < 1e-12);
        assert!(lr_at(1.0, 50, 100, 0.05) < 1.0);
        assert!(lr_at(1.0, 99, 100, 0.05) > 0.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamStore::new(0);
        let id = p.zeros("x.w", &[1, 2]);
        let mut g = Grads::zeros_like(&p);
        g.get_mut(id).copy_from_slice(&[2.0, -0.5]);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 0.1);
        let v = p.get(id).data();
        assert!((v[0] + 0.1).abs() < 1e-6 && (v[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn config_from_key_values() {
        let map = parse_kv("d = 32\nn_heads = 4\nlr = 0.001\nseeds = 1, 2,3\nmatching = sequence\nepochs = 5").unwrap();
        let c = TrainConfig::from_kv(&map).unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.policy.matching, Matching::Sequence);
        assert_eq!((c.lr, c.epochs), (0.001, 5));
        assert!(TrainConfig::from_kv(&parse_kv("epochs = 0").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&parse_kv("matching = greedy").unwrap()).is_err());
    }

    #[test]
    fn prepared_labels_end_with_stop_layer() {
        let data = corpus(30, 1);
        let mut c = ConstantTable::default();
        let prepared = prepare(&data, &mut c, &small().model).unwrap();
        for p in &prepared {
            assert_eq!(p.labels.last().unwrap().valid_count(), 0);
            assert!(p.labels[..p.labels.len() - 1].iter().all(|l| l.valid_count() > 0));
        }
    }

    #[test]
    fn smoke_run_emits_checkpoint() {
        let data = corpus(10, 2);
        let trained = train(&small(), &data, &data[..4]).unwrap();
        assert_eq!(trained.report.runs.len(), 1);
        assert_eq!(trained.report.runs[0].history.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        trained.model.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(evaluate_model(&back, &data), evaluate_model(&trained.model, &data));
    }

    #[test]
    fn loss_decreases() {
        let data = corpus(40, 3);
        let mut c = small();
        c.epochs = 5;
        let t = train(&c, &data, &data[..8]).unwrap();
        let h = &t.report.runs[0].history;
        assert!(h[4].train_loss < h[0].train_loss, "{h:?}");
    }

    #[test]
    fn sweep_has_one_row_per_k() {
        let data = corpus(8, 4);
        let rows = sweep_queries(&small(), &[1, 2], &data, &data[..4]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].k, 1);
        assert!(rows.iter().all(|r| r.dev_accuracy.is_some()));
        assert_eq!(sweep_csv(&rows).lines().count(), 3);
    }

    #[test]
    fn leaf_only_equation_is_rejected() {
        let mut data = corpus(3, 5);
        data[1].equation = "N0".into();
        data[1].answer = data[1].numbers[0];
        let err = train(&small(), &data, &data).err().unwrap();
        assert!(matches!(err, TrainError::LabelCompileError { .. }));
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        let inst = ProblemInstance::toy();
        let config = ModelConfig {
            d: 8,
            k: 3,
            max_layers: 3,
            n_heads: 2,
            encoder_depth: 1,
            seed: 5,
            ..ModelConfig::default()
        };
        let model = Model::new(config, Vocab::build([inst.text.as_slice()]), ConstantTable::default()).unwrap();
        let report = gradient_check(&model, &inst, &LossPolicy::default(), 1e-5).unwrap();
        assert_eq!(report.checked, model.numel());
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
