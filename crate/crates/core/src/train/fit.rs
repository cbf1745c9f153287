use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::{ann_backward, apply_ste, qstdb_backward, SnnGrads};
use super::optim::{LrSchedule, OptimizerKind, OptimizerState};
use super::{softmax_xent, DEFAULT_GAMMA};
use crate::data::PatchSet;
use crate::error::{config, input, Error, Result};
use crate::metrics::{argmax, Metrics};
use crate::network::{
    ann_forward_traced, prepare_inference_weights, prepare_weights, Mode, Model, QuantSetting, Simulator, SnnOptions,
};
use crate::neuron::{LifParams, SpikeTrace, MIN_THRESHOLD};
use crate::tensor::Tensor;
use crate::quant::QuantScheme;

/// Samples processed together before their gradients are reduced; bounds
/// peak memory without affecting results.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
    /// SNN only: unrolled steps.
    pub timesteps: usize,
    /// SNN only: affine fake-quantization width for weights and input.
    pub bits: Option<u32>,
    pub gamma: f64,
    /// SNN only: update thresholds and leaks along with the weights.
    pub learn_lif: bool,
    /// Evaluate the test split after every epoch (needed to pick the best
    /// checkpoint); otherwise only after the last.
    pub eval_each_epoch: bool,
}

impl TrainConfig {
    pub fn ann_default() -> Self {
        Self {
            schedule: LrSchedule::ann_default(),
            optimizer: OptimizerKind::sgd(),
            batch_size: 50,
            seed: 0,
            timesteps: 5,
            bits: None,
            gamma: DEFAULT_GAMMA,
            learn_lif: false,
            eval_each_epoch: true,
        }
    }

    pub fn snn_default() -> Self {
        Self {
            schedule: LrSchedule::snn_default(),
            optimizer: OptimizerKind::adam(),
            bits: Some(6),
            learn_lif: true,
            ..Self::ann_default()
        }
    }

    fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return config("batch size must be positive");
        }
        if self.timesteps == 0 {
            return config("number of timesteps must be at least 1");
        }
        super::SurrogateConfig::new(self.gamma)?;
        Ok(())
    }
}

/// Settings for SNN evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub timesteps: usize,
    /// Weight width; affine-trained weights are exported to scale quantization.
    pub weight_bits: Option<u32>,
    /// Input-frame scale quantization width.
    pub input_bits: Option<u32>,
    pub potential_bits: Option<u32>,
    pub quantize_output: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            timesteps: 5,
            weight_bits: Some(6),
            input_bits: Some(6),
            potential_bits: Some(6),
            quantize_output: false,
        }
    }
}

impl InferenceConfig {
    pub fn full_precision(timesteps: usize) -> Self {
        Self {
            timesteps,
            weight_bits: None,
            input_bits: None,
            potential_bits: None,
            quantize_output: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Running accuracy over the epoch's training forward passes.
    pub train_oa: f64,
    pub test_oa: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best test OA (the last one when not evaluated).
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn stream_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(epoch as u64)) ^ index as u64))
}

fn check_set(model: &Model, set: &PatchSet, what: &str) -> Result<()> {
    if set.is_empty() {
        return input(format!("{what} set is empty"));
    }
    let expected = model.spec.input_shape();
    if set.patches[0].shape() != expected.as_slice() {
        return input(format!(
            "{what} patches have shape {:?}, network expects {expected:?}",
            set.patches[0].shape()
        ));
    }
    if set.labels.iter().any(|&l| l >= model.spec.num_classes) {
        return input(format!("{what} labels exceed the classifier width"));
    }
    Ok(())
}

fn run_err(epoch: usize, e: Error) -> Error {
    match e {
        Error::Run { .. } => e,
        other => Error::Run {
            epoch,
            message: other.to_string(),
        },
    }
}

struct Sample<G> {
    loss: f64,
    correct: bool,
    grads: G,
}

/// Runs `f` over a batch in parallel chunks and feeds results to `acc` in
/// batch order, so the reduction is independent of scheduling.
fn for_each_ordered<G, F, A>(batch: &[usize], f: F, mut acc: A) -> Result<(f64, usize)>
where
    G: Send,
    F: Fn(usize) -> Result<Sample<G>> + Sync,
    A: FnMut(G),
{
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in batch.chunks(CHUNK) {
        let out = chunk.par_iter().map(|&i| f(i)).collect::<Result<Vec<_>>>()?;
        for s in out {
            loss += s.loss;
            correct += s.correct as usize;
            acc(s.grads);
        }
    }
    Ok((loss, correct))
}

/// One pass over the shuffled training set; returns mean loss and running
/// accuracy.
fn run_epoch<F>(n: usize, cfg: &TrainConfig, epoch: usize, mut batch_step: F) -> Result<(f64, f64)>
where
    F: FnMut(&[usize]) -> Result<(f64, usize)>,
{
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(cfg.seed, epoch, usize::MAX));
    let (mut loss, mut correct) = (0.0, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        let (l, c) = batch_step(batch).map_err(|e| run_err(epoch, e))?;
        if !l.is_finite() {
            return Err(Error::Run {
                epoch,
                message: "loss is not finite".into(),
            });
        }
        loss += l;
        correct += c;
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Predicted classes of an ANN on every patch.
pub fn evaluate_ann(model: &Model, set: &PatchSet) -> Result<Metrics> {
    check_set(model, set, "evaluation")?;
    let preds = set
        .patches
        .par_iter()
        .map(|p| model.ann_logits(p).map(|l| argmax(l.data())))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_predictions(&set.labels, &preds, model.spec.num_classes)
}

/// Metrics and spiking activity of an SNN evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnEvaluation {
    pub metrics: Metrics,
    /// Spikes per spiking layer summed over all samples and steps.
    pub spike_totals: Vec<f64>,
    /// Nonzero input-frame entries summed over samples and steps.
    pub input_nonzeros: f64,
    pub samples: usize,
    pub timesteps: usize,
}

fn inference_setup(model: &Model, cfg: &InferenceConfig) -> Result<(Vec<Tensor>, SnnOptions)> {
    let prepared = match cfg.weight_bits {
        Some(b) => prepare_inference_weights(&model.weights, b)?.effective,
        None => model.weights.clone(),
    };
    let opts = SnnOptions {
        timesteps: cfg.timesteps,
        input_quant: cfg.input_bits.map(|bits| QuantSetting {
            scheme: QuantScheme::Scale,
            bits,
        }),
        potential_bits: cfg.potential_bits,
        quantize_output: cfg.quantize_output,
        ..SnnOptions::default()
    };
    Ok((prepared, opts))
}

/// Binary output of every spiking layer on one patch, under the same
/// settings as [`evaluate_snn`].
pub fn spike_traces(model: &Model, patch: &Tensor, cfg: &InferenceConfig) -> Result<Vec<SpikeTrace>> {
    let lif = model.lif_params()?;
    let spec = model.spec.clone().with_mode(Mode::Snn);
    let (prepared, mut opts) = inference_setup(model, cfg)?;
    opts.record = true;
    let out = Simulator::new::<ChaCha8Rng>(&spec, &prepared, lif, &opts, patch, None)?.run()?;
    let rec = out.record.ok_or_else(|| Error::Internal("simulator kept no record".into()))?;
    spec.spiking_layers()
        .iter()
        .zip(&rec.o)
        .map(|(&i, steps)| SpikeTrace::from_steps(spec.layers[i].name.clone(), steps))
        .collect()
}

pub fn evaluate_snn(model: &Model, set: &PatchSet, cfg: &InferenceConfig) -> Result<SnnEvaluation> {
    check_set(model, set, "evaluation")?;
    let lif = model.lif_params()?;
    let spec = model.spec.clone().with_mode(Mode::Snn);
    let (prepared, opts) = inference_setup(model, cfg)?;
    let runs = set
        .patches
        .par_iter()
        .map(|p| Simulator::new::<ChaCha8Rng>(&spec, &prepared, lif, &opts, p, None)?.run())
        .collect::<Result<Vec<_>>>()?;
    let mut spike_totals = vec![0.0; spec.spiking_layers().len()];
    let mut input_nonzeros = 0.0;
    let mut preds = Vec::with_capacity(runs.len());
    for r in &runs {
        spike_totals.iter_mut().zip(&r.spike_totals).for_each(|(a, b)| *a += b);
        input_nonzeros += r.input_nonzeros;
        preds.push(argmax(r.potentials.data()));
    }
    Ok(SnnEvaluation {
        metrics: Metrics::from_predictions(&set.labels, &preds, spec.num_classes)?,
        spike_totals,
        input_nonzeros,
        samples: set.len(),
        timesteps: cfg.timesteps,
    })
}

fn finish_epoch(
    log: &mut Vec<EpochLog>,
    entry: EpochLog,
    model: &Model,
    best: &mut Option<(f64, usize, Model)>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) {
    on_epoch(&entry);
    if let Some(oa) = entry.test_oa {
        if best.as_ref().is_none_or(|(b, _, _)| oa > *b) {
            *best = Some((oa, entry.epoch, model.clone()));
        }
    }
    log.push(entry);
}

/// Mini-batch SGD on the ReLU network; the mean of per-sample gradients
/// drives each update.
pub fn train_ann(
    mut model: Model,
    train: &PatchSet,
    test: &PatchSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.spec = model.spec.clone().with_mode(Mode::Ann);
    check_set(&model, train, "training")?;
    check_set(&model, test, "test")?;
    let sizes: Vec<usize> = model.weights.iter().map(|w| w.len()).collect();
    let mut opt = OptimizerState::new(cfg.optimizer, &sizes);
    let mut log = Vec::new();
    let mut best = None;
    for epoch in 1..=cfg.schedule.epochs {
        let start = Instant::now();
        let lr = cfg.schedule.rate(epoch);
        let (loss, train_oa) = run_epoch(train.len(), cfg, epoch, |batch| {
            let mut total: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let (spec, weights) = (&model.spec, &model.weights);
            let stats = for_each_ordered(
                batch,
                |i| {
                    let mut rng = stream_rng(cfg.seed, epoch, i);
                    let tr = ann_forward_traced(spec, weights, train.patches[i].data(), Some(&mut rng))?;
                    let (loss, g) = softmax_xent(tr.logits(), train.labels[i])?;
                    Ok(Sample {
                        loss,
                        correct: argmax(tr.logits()) == train.labels[i],
                        grads: ann_backward(spec, weights, &tr, &g)?,
                    })
                },
                |g| {
                    for (t, g) in total.iter_mut().zip(g) {
                        t.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                },
            )?;
            let inv = 1.0 / batch.len() as f64;
            total.iter_mut().for_each(|t| t.iter_mut().for_each(|a| *a *= inv));
            let mut params: Vec<&mut [f64]> = model.weights.iter_mut().map(|w| w.data_mut()).collect();
            opt.update(&mut params, &total, lr)?;
            Ok(stats)
        })?;
        let test_oa = if cfg.eval_each_epoch || epoch == cfg.schedule.epochs {
            Some(evaluate_ann(&model, test)?.oa)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            lr,
            loss,
            train_oa,
            test_oa,
            wall_ms: start.elapsed().as_millis(),
        };
        log::info!("ann epoch {epoch}: loss {loss:.4} train {train_oa:.4} test {test_oa:?}");
        finish_epoch(&mut log, entry, &model, &mut best, on_epoch);
    }
    Ok(outcome(model, best, log))
}

fn outcome(model: Model, best: Option<(f64, usize, Model)>, log: Vec<EpochLog>) -> TrainOutcome {
    let last_epoch = log.len();
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (last_epoch, model.clone()),
    };
    TrainOutcome {
        best,
        last: model,
        best_epoch,
        log,
    }
}

/// Q-STDB fine-tuning of a converted network: BPTT through `timesteps`
/// steps with affine fake-quantized weights (recalibrated every mini-batch),
/// surrogate spike gradients and joint threshold/leak updates.
pub fn train_snn(
    mut model: Model,
    train: &PatchSet,
    test: &PatchSet,
    cfg: &TrainConfig,
    eval: &InferenceConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.spec = model.spec.clone().with_mode(Mode::Snn);
    model.lif_params()?;
    check_set(&model, train, "training")?;
    check_set(&model, test, "test")?;
    let quant = cfg.bits.map(|bits| QuantSetting {
        scheme: QuantScheme::Affine,
        bits,
    });
    let opts = SnnOptions {
        timesteps: cfg.timesteps,
        input_quant: quant,
        record: true,
        ..SnnOptions::default()
    };
    let k = model.spec.spiking_layers().len();
    let mut sizes: Vec<usize> = model.weights.iter().map(|w| w.len()).collect();
    sizes.extend([k, k]);
    let mut opt = OptimizerState::new(cfg.optimizer, &sizes);
    let mut log = Vec::new();
    let mut best = None;
    for epoch in 1..=cfg.schedule.epochs {
        let start = Instant::now();
        let lr = cfg.schedule.rate(epoch);
        let (loss, train_oa) = run_epoch(train.len(), cfg, epoch, |batch| {
            // quantization ranges follow the master weights batch by batch
            let prepared = prepare_weights(&model.weights, quant)?;
            let mut total = SnnGrads::zeros_like(&model.weights, k);
            let (spec, lif) = (&model.spec, model.lif_params()?);
            let stats = for_each_ordered(
                batch,
                |i| {
                    let mut rng = stream_rng(cfg.seed, epoch, i);
                    let out = Simulator::new(spec, &prepared.effective, lif, &opts, &train.patches[i], Some(&mut rng))?
                        .run()?;
                    let (loss, g) = softmax_xent(out.potentials.data(), train.labels[i])?;
                    let rec = out.record.as_ref().expect("recording enabled");
                    Ok(Sample {
                        loss,
                        correct: argmax(out.potentials.data()) == train.labels[i],
                        grads: qstdb_backward(spec, &prepared.effective, lif, rec, &g, cfg.gamma)?,
                    })
                },
                |g| total.add_assign(&g),
            )?;
            total.scale(1.0 / batch.len() as f64);
            apply_ste(&mut total, &model.weights, &prepared.params);
            if !cfg.learn_lif {
                total.thresholds.iter_mut().for_each(|g| *g = 0.0);
                total.leaks.iter_mut().for_each(|g| *g = 0.0);
            }
            let lif = model.lif.as_mut().expect("checked above");
            let mut thresholds: Vec<f64> = lif.iter().map(|p| p.threshold).collect();
            let mut leaks: Vec<f64> = lif.iter().map(|p| p.leak).collect();
            let mut groups = total.weights;
            groups.push(total.thresholds);
            groups.push(total.leaks);
            let mut params: Vec<&mut [f64]> = model.weights.iter_mut().map(|w| w.data_mut()).collect();
            params.push(&mut thresholds);
            params.push(&mut leaks);
            opt.update(&mut params, &groups, lr)?;
            for ((p, v), l) in lif.iter_mut().zip(thresholds).zip(leaks) {
                *p = LifParams {
                    threshold: v.max(MIN_THRESHOLD),
                    leak: l.clamp(0.0, 1.0),
                };
            }
            Ok(stats)
        })?;
        let test_oa = if cfg.eval_each_epoch || epoch == cfg.schedule.epochs {
            Some(evaluate_snn(&model, test, eval)?.metrics.oa)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            lr,
            loss,
            train_oa,
            test_oa,
            wall_ms: start.elapsed().as_millis(),
        };
        log::info!("snn epoch {epoch}: loss {loss:.4} train {train_oa:.4} test {test_oa:?}");
        finish_epoch(&mut log, entry, &model, &mut best, on_epoch);
    }
    Ok(outcome(model, best, log))
}
