//! Minibatch training with one joint Adam step per batch, plus the frozen
//! linear probes used to measure what a latent channel encodes.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Dataset, PreferenceTriplet, Split};
use crate::losses::{self, bt_grad, LossBreakdown, LossError, LossWeights};
use crate::model::{
    encode, forward_triplet, init_params, AblationConfig, Checkpoint, Dims, ForwardTrace, ModelError, ModelParams,
    Noise, TripletNoise, Variant,
};
use crate::numkernel::{
    dot, finite_diff_check_parts, AdamState, GradCheckReport, Matrix, NumError, ParamSet, Rng, TensorSet,
};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs the train split, got {0}")]
    WrongSplit(Split),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset embeddings have dimension {data} but the model expects {model}")]
    DimMismatch { data: usize, model: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFiniteLoss { step: u64, breakdown: LossBreakdown },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub ablation: AblationConfig,
    pub dims: Dims,
    pub seed: u64,
    /// Snapshot every this many steps; 0 keeps only the final model.
    pub checkpoint_interval: u64,
    /// Log every this many steps; the first and last steps are always logged.
    pub log_interval: u64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Fill the `ms` log column with wall-clock time. Off by default so
    /// logs stay byte-identical across runs.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            weights: LossWeights::default(),
            ablation: AblationConfig::FULL,
            dims: Dims::default(),
            seed: 1,
            checkpoint_interval: 0,
            log_interval: 50,
            clip_norm: Some(10.0),
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(TrainError::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.weights.validate().map_err(TrainError::Config)?;
        self.ablation.validate()?;
        Ok(())
    }

    /// This config with the switches and latent sizes of `v`.
    pub fn for_variant(&self, v: Variant) -> TrainConfig {
        TrainConfig { ablation: v.ablation(), dims: v.dims(self.dims), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Pairwise accuracy of the sampled training rewards since the previous row.
    pub train_acc: f64,
    /// Same for the adversary head; 0.5 when the model has none.
    pub adv_acc: f64,
    pub ms: u64,
}

pub const LOG_HEADER: &str = "step,l_pref,l_kl_c,l_adv,l_kl_nc,l_rec,total,train_acc,adv_acc,ms";

impl TrainLogRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, l.l_pref, l.l_kl_c, l.l_adv, l.l_kl_nc, l.l_rec, l.total, self.train_acc, self.adv_acc, self.ms
        )
    }
}

pub fn write_log_csv(rows: &[TrainLogRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogRow>,
    /// Periodic snapshots in step order; the last one is the final model.
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("training always records the final model")
    }
}

fn check_data(ds: &Dataset, cfg: &TrainConfig) -> Result<(), TrainError> {
    if ds.split != Split::Train {
        return Err(TrainError::WrongSplit(ds.split));
    }
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if ds.embed_dim != cfg.dims.embed {
        return Err(TrainError::DimMismatch { data: ds.embed_dim, model: cfg.dims.embed });
    }
    Ok(())
}

/// Pairwise indicator with exact ties scored 0.5.
pub(crate) fn pair_score(r_w: f64, r_l: f64) -> f64 {
    if r_w > r_l {
        1.0
    } else if r_w == r_l {
        0.5
    } else {
        0.0
    }
}

fn clip(grads: &mut ModelParams, max_norm: f64) {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, m) in grads.tensors_mut() {
            m.scale(s);
        }
    }
}

struct Batcher {
    order: Vec<usize>,
    shuffle: Rng,
}

impl Batcher {
    fn epoch(&mut self) -> &[usize] {
        self.shuffle.shuffle(&mut self.order);
        &self.order
    }
}

/// Initial parameters for `cfg`, exactly as `train` creates them.
pub fn initial_params(cfg: &TrainConfig) -> Result<ModelParams, TrainError> {
    let mut rng = Rng::new(cfg.seed).derive(STREAM_INIT);
    Ok(init_params(cfg.dims, &cfg.ablation, &mut rng)?)
}

/// Runs training. Everything is determined by `(ds, cfg)`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_data(ds, cfg)?;
    let ab = cfg.ablation;
    let root = Rng::new(cfg.seed);
    let mut params = initial_params(cfg)?;
    let mut noise_rng = root.derive(STREAM_NOISE);
    let mut batcher = Batcher { order: (0..ds.len()).collect(), shuffle: root.derive(STREAM_SHUFFLE) };
    let mut adam = AdamState::new(cfg.lr);
    let steps_per_epoch = ds.len().div_ceil(cfg.batch_size) as u64;
    let last_step = steps_per_epoch * cfg.epochs as u64;

    let started = Instant::now();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let snapshot = |params: &ModelParams, step: u64| Checkpoint {
        params: params.clone(),
        ablation: ab,
        weights: cfg.weights,
        seed: cfg.seed,
        step,
    };
    let (mut acc_sum, mut adv_sum, mut acc_n) = (0.0, 0.0, 0usize);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let order = batcher.epoch().to_vec();
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&PreferenceTriplet> = chunk.iter().map(|&i| &ds.triplets[i]).collect();
            let traces = batch
                .iter()
                .map(|t| forward_triplet(&params, t, &ab, Noise::Sample(&mut noise_rng)))
                .collect::<Result<Vec<_>, _>>()?;
            let loss = losses::total_loss(&traces, &batch, &cfg.weights, &ab)?;
            if !loss.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, breakdown: loss });
            }
            for tr in &traces {
                acc_sum += pair_score(tr.winner.reward, tr.loser.reward);
                adv_sum += match (tr.winner.adv, tr.loser.adv) {
                    (Some(w), Some(l)) => pair_score(w, l),
                    _ => 0.5,
                };
            }
            acc_n += traces.len();

            let mut grads = losses::backward(&params, &traces, &batch, &cfg.weights, &ab)?;
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            adam.step(&mut params, &grads)?;

            if step == 1 || step == last_step || (cfg.log_interval > 0 && step.is_multiple_of(cfg.log_interval)) {
                let ms = if cfg.timing { started.elapsed().as_millis() as u64 } else { 0 };
                log.push(TrainLogRow {
                    step,
                    loss,
                    train_acc: acc_sum / acc_n as f64,
                    adv_acc: adv_sum / acc_n as f64,
                    ms,
                });
                (acc_sum, adv_sum, acc_n) = (0.0, 0.0, 0);
            }
            if cfg.checkpoint_interval > 0 && step.is_multiple_of(cfg.checkpoint_interval) && step != last_step {
                checkpoints.push(snapshot(&params, step));
            }
        }
    }
    checkpoints.push(snapshot(&params, step));
    Ok(TrainOutcome { params, log, checkpoints })
}

/// The first training batch of `cfg` with the noise `train` would draw for it.
pub fn first_batch(
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<PreferenceTriplet>, Vec<TripletNoise>), TrainError> {
    cfg.validate()?;
    check_data(ds, cfg)?;
    let root = Rng::new(cfg.seed);
    let params = initial_params(cfg)?;
    let mut batcher = Batcher { order: (0..ds.len()).collect(), shuffle: root.derive(STREAM_SHUFFLE) };
    let mut noise_rng = root.derive(STREAM_NOISE);
    let batch: Vec<PreferenceTriplet> =
        batcher.epoch().iter().take(cfg.batch_size).map(|&i| ds.triplets[i].clone()).collect();
    let noise = batch
        .iter()
        .map(|t| forward_triplet(&params, t, &cfg.ablation, Noise::Sample(&mut noise_rng)).map(|tr| tr.noise()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((params, batch, noise))
}

/// Checks the analytic gradient of the full objective (reversal included)
/// on the first batch at initialization, with the noise frozen and no
/// clipping.
pub fn grad_check(ds: &Dataset, cfg: &TrainConfig, epsilon: f64) -> Result<GradCheckReport, TrainError> {
    let (params, batch, noise) = first_batch(ds, cfg)?;
    grad_check_at(&params, &batch, &noise, &cfg.weights, &cfg.ablation, epsilon)
}

/// Gradient check at an arbitrary point and frozen noise.
pub fn grad_check_at(
    params: &ModelParams,
    batch: &[PreferenceTriplet],
    noise: &[TripletNoise],
    w: &LossWeights,
    ab: &AblationConfig,
    epsilon: f64,
) -> Result<GradCheckReport, TrainError> {
    let refs: Vec<&PreferenceTriplet> = batch.iter().collect();
    let traces: Vec<ForwardTrace> = refs
        .iter()
        .zip(noise)
        .map(|(t, n)| forward_triplet(params, t, ab, Noise::Replay(n)))
        .collect::<Result<_, _>>()?;
    let analytic = losses::backward(params, &traces, &refs, w, ab)?;
    let mut failure = None;
    let report = finite_diff_check_parts(
        params,
        &analytic,
        |probe| match losses::reversal_surrogate(probe, params, &refs, noise, w, ab) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                [f64::NAN; 3]
            }
        },
        epsilon,
    );
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(report?)
}

/// Which latent a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Causal,
    NonCausal,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channel::Causal => "causal",
            Channel::NonCausal => "noncausal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 200, lr: 1e-2, train_fraction: 0.8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub channel: Channel,
    /// learned no-bias head, one weight per latent coordinate
    pub head: Vec<f64>,
    /// held-out pairwise accuracy
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Trains a fresh no-bias linear head on the frozen mean latent of one
/// channel with the preference loss alone (full-batch Adam) and reports
/// its accuracy on the held-out pairs.
pub fn train_probe(
    ds: &Dataset,
    frozen: &ModelParams,
    channel: Channel,
    cfg: &ProbeConfig,
) -> Result<ProbeResult, TrainError> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(TrainError::Config(format!("probe train_fraction must lie in (0,1), got {}", cfg.train_fraction)));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(TrainError::Config(format!("probe lr must be finite and non-negative, got {}", cfg.lr)));
    }
    if ds.len() < 2 {
        return Err(TrainError::EmptyDataset);
    }
    if ds.embed_dim != frozen.dims.embed {
        return Err(TrainError::DimMismatch { data: ds.embed_dim, model: frozen.dims.embed });
    }

    // Pairwise feature: difference of winner and loser mean latents.
    let diffs: Vec<Vec<f64>> = ds
        .triplets
        .iter()
        .map(|t| {
            let (cw, nw) = encode(frozen, &t.winner.h)?;
            let (cl, nl) = encode(frozen, &t.loser.h)?;
            let (w, l) = match channel {
                Channel::Causal => (cw.mu, cl.mu),
                Channel::NonCausal => (nw.mu, nl.mu),
            };
            Ok(w.iter().zip(l.iter()).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_, ModelError>>()?;
    let dim = diffs[0].len();

    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    let n_train = ((ds.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, ds.len() - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    let init: Vec<f64> = rng.gaussian_vec(dim).into_iter().map(|x| x / (dim as f64).sqrt()).collect();
    let mut head = TensorSet::new(vec![("head".into(), Matrix::row(init))]);
    let mut adam = AdamState::new(cfg.lr);
    let inv_n = 1.0 / train_idx.len() as f64;
    for _ in 0..cfg.steps {
        let v = head.get("head").expect("probe head").as_slice().to_vec();
        let mut g = vec![0.0; dim];
        for &i in train_idx {
            let margin = dot(&v, &diffs[i])?;
            let d = bt_grad(margin, 0.0) * inv_n;
            for (gj, xj) in g.iter_mut().zip(&diffs[i]) {
                *gj += d * xj;
            }
        }
        let grads = TensorSet::new(vec![("head".into(), Matrix::row(g))]);
        adam.step(&mut head, &grads)?;
    }
    let head = head.get("head").expect("probe head").as_slice().to_vec();
    let mut correct = 0.0;
    for &i in test_idx {
        correct += pair_score(dot(&head, &diffs[i])?, 0.0);
    }
    Ok(ProbeResult { channel, head, accuracy: correct / test_idx.len() as f64, n_train, n_test: test_idx.len() })
}

/// Mean preference loss of a probe head on the given pairs; used by tests.
#[cfg(test)]
fn probe_loss(head: &[f64], diffs: &[Vec<f64>]) -> f64 {
    diffs.iter().map(|d| losses::bt_loss(dot(head, d).unwrap(), 0.0)).sum::<f64>() / diffs.len() as f64
}
