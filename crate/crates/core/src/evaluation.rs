//! Diagnostics for trained reward models: pairwise accuracy, length
//! sensitivity, non-causal leakage, sycophancy robustness, reward/gold
//! divergence across checkpoints, and the ablation matrix.
//!
//! Rewards are min-max normalized over the evaluated set wherever a
//! normalized reward is reported. The divergence diagnostic tracks the
//! reward model across its own training checkpoints; no policy is
//! optimized against it.

use std::fmt::Write as _;
use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DataError, Dataset, EmbeddingRecord, GenConfig, Generator, Split};
use crate::model::{reward_eval, Checkpoint, ModelError, ModelParams, Variant};
use crate::training::{pair_score, train, train_probe, Channel, ProbeConfig, TrainConfig, TrainError};

pub const NORMALIZATION: &str = "min-max";
pub const DEFAULT_BUCKETS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("{records} records cannot fill {buckets} buckets")]
    TooFewRecords { records: usize, buckets: usize },
    #[error("need at least {min} {what}, got {got}")]
    TooFew { what: &'static str, min: usize, got: usize },
    #[error("leakage probe needs a factorized model")]
    NotFactorized,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Anything that scores a single response.
pub trait RewardModel: Sync {
    fn score(&self, r: &EmbeddingRecord) -> Result<f64, EvalError>;
}

impl RewardModel for ModelParams {
    fn score(&self, r: &EmbeddingRecord) -> Result<f64, EvalError> {
        Ok(reward_eval(self, &r.h)?)
    }
}

impl RewardModel for Checkpoint {
    fn score(&self, r: &EmbeddingRecord) -> Result<f64, EvalError> {
        self.params.score(r)
    }
}

/// Scores by the hidden gold quality.
pub struct GoldOracle;

impl RewardModel for GoldOracle {
    fn score(&self, r: &EmbeddingRecord) -> Result<f64, EvalError> {
        Ok(r.s)
    }
}

/// Scores by the hidden spurious attribute.
pub struct SpuriousOracle;

impl RewardModel for SpuriousOracle {
    fn score(&self, r: &EmbeddingRecord) -> Result<f64, EvalError> {
        Ok(r.a)
    }
}

pub struct ConstantModel(pub f64);

impl RewardModel for ConstantModel {
    fn score(&self, _: &EmbeddingRecord) -> Result<f64, EvalError> {
        Ok(self.0)
    }
}

/// Fraction of pairs ranked correctly, exact ties counting one half.
pub fn pairwise_accuracy(m: &dyn RewardModel, ds: &Dataset) -> Result<f64, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut sum = 0.0;
    for t in &ds.triplets {
        sum += pair_score(m.score(&t.winner)?, m.score(&t.loser)?);
    }
    Ok(sum / ds.len() as f64)
}

/// Maps values onto [0, 1]; a constant input maps to all zeros.
pub fn min_max_normalize(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - lo) / span).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthCurve {
    /// mean spurious attribute of the records in each bucket
    pub centers: Vec<f64>,
    /// mean normalized reward per bucket
    pub means: Vec<f64>,
    pub sigma_len: f64,
}

impl LengthCurve {
    pub fn write_csv(&self, out: impl io::Write) -> Result<(), EvalError> {
        #[derive(Serialize)]
        struct Row {
            bucket_center: f64,
            mean_reward: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for (c, m) in self.centers.iter().zip(&self.means) {
            w.serialize(Row { bucket_center: *c, mean_reward: *m })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Winner rewards, min-max normalized, averaged within equal-count
/// quantile buckets of the spurious attribute (ties keep record order);
/// `sigma_len` is the population std of the bucket means.
pub fn length_sensitivity(m: &dyn RewardModel, ds: &Dataset, buckets: usize) -> Result<LengthCurve, EvalError> {
    if buckets < 2 {
        return Err(EvalError::TooFew { what: "buckets", min: 2, got: buckets });
    }
    if ds.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n = ds.len();
    if n < buckets {
        return Err(EvalError::TooFewRecords { records: n, buckets });
    }
    let rewards = ds.triplets.iter().map(|t| m.score(&t.winner)).collect::<Result<Vec<_>, _>>()?;
    let norm = min_max_normalize(&rewards);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| ds.triplets[i].winner.a.total_cmp(&ds.triplets[j].winner.a));

    let mut centers = Vec::with_capacity(buckets);
    let mut means = Vec::with_capacity(buckets);
    for b in 0..buckets {
        let idx = &order[b * n / buckets..(b + 1) * n / buckets];
        centers.push(idx.iter().map(|&i| ds.triplets[i].winner.a).sum::<f64>() / idx.len() as f64);
        means.push(idx.iter().map(|&i| norm[i]).sum::<f64>() / idx.len() as f64);
    }
    let sigma_len = population_std(&means);
    Ok(LengthCurve { centers, means, sigma_len })
}

/// Held-out accuracy of a fresh linear probe on the non-causal mean latent.
/// 0.5 means no preference signal is recoverable from that channel.
pub fn leakage_probe(model: &Checkpoint, ds: &Dataset, cfg: &ProbeConfig) -> Result<f64, EvalError> {
    if !model.ablation.factorized {
        return Err(EvalError::NotFactorized);
    }
    Ok(train_probe(ds, &model.params, Channel::NonCausal, cfg)?.accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub step: u64,
    /// mean min-max normalized reward over winners
    pub mean_reward: f64,
    /// mean gold quality over winners
    pub mean_gold: f64,
    /// Pearson(reward, gold) over winners; `None` when undefined
    pub correlation: Option<f64>,
}

/// Reward/gold statistics of one model on the winners of `ds`.
pub fn divergence_point(m: &dyn RewardModel, step: u64, ds: &Dataset) -> Result<DivergencePoint, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let rewards = ds.triplets.iter().map(|t| m.score(&t.winner)).collect::<Result<Vec<_>, _>>()?;
    let gold: Vec<f64> = ds.triplets.iter().map(|t| t.winner.s).collect();
    Ok(DivergencePoint {
        step,
        mean_reward: mean(&min_max_normalize(&rewards)),
        mean_gold: mean(&gold),
        correlation: pearson(&rewards, &gold),
    })
}

/// Reward-model drift across training checkpoints.
pub fn gold_divergence(checkpoints: &[Checkpoint], ds: &Dataset) -> Result<Vec<DivergencePoint>, EvalError> {
    if checkpoints.len() < 2 {
        return Err(EvalError::TooFew { what: "checkpoints", min: 2, got: checkpoints.len() });
    }
    checkpoints.iter().map(|c| divergence_point(c, c.step, ds)).collect()
}

/// Scalar metrics of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: Split,
    pub seed: u64,
    pub n: usize,
    pub accuracy: f64,
    pub sigma_len: f64,
    /// `None` for models without a non-causal channel
    pub leakage: Option<f64>,
    /// Pearson(reward, gold) over both sides of every pair
    pub gold_corr: Option<f64>,
    pub normalization: String,
    #[serde(skip)]
    pub curve: LengthCurve,
}

impl EvalReport {
    /// `<model>_<split>_seed<seed>`, shared by every file of this report.
    pub fn file_stem(&self) -> String {
        format!("{}_{}_seed{}", self.model, self.split, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub buckets: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { buckets: DEFAULT_BUCKETS, probe: ProbeConfig::default() }
    }
}

pub fn evaluate(model: &str, ck: &Checkpoint, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let accuracy = pairwise_accuracy(ck, ds)?;
    let curve = length_sensitivity(ck, ds, opts.buckets)?;
    let leakage = match leakage_probe(ck, ds, &opts.probe) {
        Ok(l) => Some(l),
        Err(EvalError::NotFactorized) => None,
        Err(e) => return Err(e),
    };
    let mut rewards = Vec::with_capacity(2 * ds.len());
    let mut gold = Vec::with_capacity(2 * ds.len());
    for t in &ds.triplets {
        for r in [&t.winner, &t.loser] {
            rewards.push(ck.score(r)?);
            gold.push(r.s);
        }
    }
    Ok(EvalReport {
        model: model.to_string(),
        split: ds.split,
        seed: ck.seed,
        n: ds.len(),
        accuracy,
        sigma_len: curve.sigma_len,
        leakage,
        gold_corr: pearson(&rewards, &gold),
        normalization: NORMALIZATION.to_string(),
        curve,
    })
}

/// One CSV row per report, header included.
pub fn write_reports_csv(reports: &[EvalReport], out: impl io::Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_reports_csv`]; curves are not part of
/// the scalar file and come back empty.
pub fn read_reports_csv(input: impl io::Read) -> Result<Vec<EvalReport>, EvalError> {
    let mut rd = csv::Reader::from_reader(input);
    Ok(rd.deserialize().collect::<Result<Vec<EvalReport>, _>>()?)
}

/// A complete desk experiment: data, training, probe and bucketing
/// settings, and the seeds it is repeated over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub buckets: usize,
    pub seeds: Vec<u64>,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            buckets: DEFAULT_BUCKETS,
            seeds: vec![1],
        }
    }
}

impl Experiment {
    /// The desk-scale grid: default data and training sizes, seeds 1 to 3,
    /// with reconstruction and reversal strengths retuned for small latents.
    pub fn paper_desk() -> Experiment {
        let mut e = Experiment { seeds: vec![1, 2, 3], ..Experiment::default() };
        e.train.weights.rec = 0.01;
        e.train.weights.grl = 0.3;
        e
    }

    /// Configs for one seed: data, trainer and probe all take the seed.
    pub fn with_seed(&self, seed: u64) -> Experiment {
        let mut e = self.clone();
        e.gen.seed = seed;
        e.train.seed = seed;
        e.probe.seed = seed;
        e.seeds = vec![seed];
        e
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { buckets: self.buckets, probe: self.probe }
    }
}

/// Data of one seed, generated once and shared by every model.
pub struct SplitSet {
    pub train: Dataset,
    pub hacked_train: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
    pub hacked_test: Dataset,
}

impl SplitSet {
    pub fn generate(gen: &GenConfig) -> Result<SplitSet, EvalError> {
        let g = Generator::new(gen)?;
        Ok(SplitSet {
            train: g.generate_split(Split::Train),
            hacked_train: g.generate_hacked_train(),
            id_test: g.generate_split(Split::IdTest),
            ood_test: g.generate_split(Split::OodTest),
            hacked_test: g.generate_split(Split::HackedTest),
        })
    }
}

/// Trains `v` on `data` and evaluates it on the ID and OOD test splits.
pub fn train_and_evaluate(
    v: Variant,
    data: &SplitSet,
    exp: &Experiment,
) -> Result<(Checkpoint, Vec<EvalReport>), EvalError> {
    let out = train(&data.train, &exp.train.for_variant(v))?;
    let ck = out.final_checkpoint().clone();
    let opts = exp.eval_options();
    let reports = [&data.id_test, &data.ood_test]
        .into_iter()
        .map(|ds| evaluate(v.name(), &ck, ds, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((ck, reports))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// ID then OOD; empty if the variant failed
    pub reports: Vec<EvalReport>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn report(&self, split: Split) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationMatrix {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

/// Trains the seven ablation variants on shared data and seed. Variants
/// run in parallel; rows come back in fixed order. A failing variant is
/// recorded and the rest still run.
pub fn run_ablations(
    gen: &GenConfig,
    train_cfg: &TrainConfig,
    opts: &EvalOptions,
) -> Result<AblationMatrix, EvalError> {
    let data = SplitSet::generate(gen)?;
    let exp = Experiment {
        gen: gen.clone(),
        train: train_cfg.clone(),
        probe: opts.probe,
        buckets: opts.buckets,
        seeds: vec![train_cfg.seed],
    };
    let rows = Variant::ABLATIONS
        .par_iter()
        .map(|&v| match train_and_evaluate(v, &data, &exp) {
            Ok((_, reports)) => AblationRow { variant: v, reports, error: None },
            Err(e) => AblationRow { variant: v, reports: vec![], error: Some(e.to_string()) },
        })
        .collect();
    Ok(AblationMatrix { seed: train_cfg.seed, rows })
}

impl AblationMatrix {
    /// Header plus exactly one row per variant, ID and OOD side by side.
    /// A failed variant keeps its row with empty metrics and the error.
    pub fn write_csv(&self, out: impl io::Write) -> Result<(), EvalError> {
        #[derive(Serialize)]
        struct Row<'a> {
            variant: &'a str,
            seed: u64,
            id_accuracy: Option<f64>,
            ood_accuracy: Option<f64>,
            id_sigma_len: Option<f64>,
            ood_sigma_len: Option<f64>,
            leakage: Option<f64>,
            id_gold_corr: Option<f64>,
            ood_gold_corr: Option<f64>,
            error: Option<&'a str>,
        }
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            let (id, ood) = (row.report(Split::IdTest), row.report(Split::OodTest));
            w.serialize(Row {
                variant: row.variant.name(),
                seed: self.seed,
                id_accuracy: id.map(|r| r.accuracy),
                ood_accuracy: ood.map(|r| r.accuracy),
                id_sigma_len: id.map(|r| r.sigma_len),
                ood_sigma_len: ood.map(|r| r.sigma_len),
                leakage: id.and_then(|r| r.leakage),
                id_gold_corr: id.and_then(|r| r.gold_corr),
                ood_gold_corr: ood.and_then(|r| r.gold_corr),
                error: row.error.as_deref(),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Every successful report in the matrix, row order preserved.
    pub fn reports(&self) -> impl Iterator<Item = &EvalReport> {
        self.rows.iter().flat_map(|r| &r.reports)
    }
}

/// Mean and standard error of the mean (sample std / sqrt(n)).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, (var / xs.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SycophancyRow {
    pub model: String,
    pub seed: u64,
    /// clean-trained model on the clean ID test split
    pub clean_on_clean: f64,
    /// clean-trained model on the hacked test split
    pub clean_on_hacked: f64,
    /// prefix-trained model on the hacked test split
    pub hacked_on_hacked: f64,
    /// `hacked_on_hacked - clean_on_clean`
    pub delta: f64,
}

/// Trains every variant on clean and on prefix-perturbed training data and
/// scores both on the hacked test split, against the clean model on the
/// clean ID split.
pub fn sycophancy_protocol(
    gen: &GenConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<SycophancyRow>, EvalError> {
    let data = SplitSet::generate(gen)?;
    variants
        .par_iter()
        .map(|&v| {
            let cfg = train_cfg.for_variant(v);
            let clean = train(&data.train, &cfg)?;
            let hacked = train(&data.hacked_train, &cfg)?;
            let clean_on_clean = pairwise_accuracy(&clean.params, &data.id_test)?;
            let hacked_on_hacked = pairwise_accuracy(&hacked.params, &data.hacked_test)?;
            Ok(SycophancyRow {
                model: v.name().to_string(),
                seed: train_cfg.seed,
                clean_on_clean,
                clean_on_hacked: pairwise_accuracy(&clean.params, &data.hacked_test)?,
                hacked_on_hacked,
                delta: hacked_on_hacked - clean_on_clean,
            })
        })
        .collect()
}

pub fn write_sycophancy_csv(rows: &[SycophancyRow], out: impl io::Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sycophancy_csv(input: impl io::Read) -> Result<Vec<SycophancyRow>, EvalError> {
    let mut rd = csv::Reader::from_reader(input);
    Ok(rd.deserialize().collect::<Result<Vec<SycophancyRow>, _>>()?)
}

/// Plain-text table of reports, grouped by split, models as rows.
pub fn render_summary(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let mut splits: Vec<Split> = reports.iter().map(|r| r.split).collect();
    splits.sort_by_key(|s| s.as_str());
    splits.dedup();
    let fmt_opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for split in splits {
        let _ = writeln!(s, "split: {split}");
        let _ = writeln!(
            s,
            "  {:<20} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "model", "seeds", "accuracy", "+-se", "sigma_len", "leakage", "gold_corr"
        );
        let mut models: Vec<&str> = reports.iter().filter(|r| r.split == split).map(|r| r.model.as_str()).collect();
        models.sort_unstable();
        models.dedup();
        for m in models {
            let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.split == split && r.model == m).collect();
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let (am, ase) = mean_and_se(&acc);
            let sig = mean(&rs.iter().map(|r| r.sigma_len).collect::<Vec<_>>());
            let leak: Vec<f64> = rs.iter().filter_map(|r| r.leakage).collect();
            let gc: Vec<f64> = rs.iter().filter_map(|r| r.gold_corr).collect();
            let _ = writeln!(
                s,
                "  {:<20} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>9} {:>9}",
                m,
                rs.len(),
                am,
                ase,
                sig,
                fmt_opt((!leak.is_empty()).then(|| mean(&leak))),
                fmt_opt((!gc.is_empty()).then(|| mean(&gc)))
            );
        }
    }
    let _ = writeln!(s, "rewards normalized by {NORMALIZATION} over each evaluated set");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, AblationConfig, Dims};
    use crate::numkernel::Rng;
    use crate::training::TrainConfig;
    use proptest::prelude::*;

    fn gen(h: usize) -> GenConfig {
        GenConfig { embed_dim: h, n_train: 300, n_test: 400, ..GenConfig::default() }
    }

    fn split(cfg: &GenConfig, s: Split) -> Dataset {
        Generator::new(cfg).unwrap().generate_split(s)
    }

    fn ck(p: ModelParams, ablation: AblationConfig) -> Checkpoint {
        Checkpoint { params: p, ablation, weights: Default::default(), seed: 0, step: 0 }
    }

    #[test]
    fn oracle_is_perfect_on_hard_labels() {
        let cfg = GenConfig { beta: f64::INFINITY, rho: 0.0, ..gen(16) };
        assert_eq!(pairwise_accuracy(&GoldOracle, &split(&cfg, Split::IdTest)).unwrap(), 1.0);
    }

    #[test]
    fn zero_params_score_chance_by_ties() {
        let ds = split(&gen(16), Split::IdTest);
        assert_eq!(pairwise_accuracy(&ModelParams::zeros(Dims::new(16, 2, 2)), &ds).unwrap(), 0.5);
        assert_eq!(pairwise_accuracy(&ConstantModel(3.0), &ds).unwrap(), 0.5);
    }

    #[test]
    fn random_head_is_near_chance() {
        let cfg = GenConfig { n_test: 10_000, ..gen(16) };
        let ds = split(&cfg, Split::IdTest);
        let mut total = 0.0;
        for seed in 0..5 {
            let p = init_params(Dims::new(16, 4, 4), &AblationConfig::FULL, &mut Rng::new(seed)).unwrap();
            total += pairwise_accuracy(&p, &ds).unwrap();
        }
        let mean = total / 5.0;
        assert!((mean - 0.5).abs() < 0.1, "{mean}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut ds = split(&gen(16), Split::IdTest);
        ds.triplets.clear();
        assert!(matches!(pairwise_accuracy(&GoldOracle, &ds), Err(EvalError::EmptyDataset)));
        assert!(matches!(length_sensitivity(&GoldOracle, &ds, 10), Err(EvalError::EmptyDataset)));
    }

    #[test]
    fn constant_model_has_zero_sigma() {
        let ds = split(&gen(16), Split::IdTest);
        let c = length_sensitivity(&ConstantModel(-1.5), &ds, 10).unwrap();
        assert_eq!(c.sigma_len, 0.0);
        assert!(c.means.iter().all(|&m| m == c.means[0]));
        assert_eq!(c.centers.len(), 10);
    }

    #[test]
    fn bucketing_matches_brute_force() {
        // reward = a: independent oracle sorts a copy, slices it by hand
        let ds = split(&gen(16), Split::IdTest);
        let c = length_sensitivity(&SpuriousOracle, &ds, 10).unwrap();
        let mut a: Vec<f64> = ds.triplets.iter().map(|t| t.winner.a).collect();
        a.sort_by(f64::total_cmp);
        let (lo, hi) = (a[0], a[a.len() - 1]);
        let per = a.len() / 10;
        let means: Vec<f64> =
            a.chunks(per).map(|ch| ch.iter().map(|x| (x - lo) / (hi - lo)).sum::<f64>() / ch.len() as f64).collect();
        let m = means.iter().sum::<f64>() / 10.0;
        let sd = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 10.0).sqrt();
        for (x, y) in c.means.iter().zip(&means) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((c.sigma_len - sd).abs() < 1e-12);
    }

    #[test]
    fn too_few_records_or_buckets() {
        let cfg = GenConfig { n_test: 5, ..gen(16) };
        let ds = split(&cfg, Split::IdTest);
        assert!(matches!(length_sensitivity(&GoldOracle, &ds, 10), Err(EvalError::TooFewRecords { .. })));
        assert!(length_sensitivity(&GoldOracle, &ds, 1).is_err());
    }

    #[test]
    fn leakage_requires_factorization() {
        let ds = split(&gen(16), Split::IdTest);
        let ab = Variant::WoFactorization.ablation();
        let c = ck(ModelParams::zeros(Dims::new(16, 2, 2)), ab);
        assert!(matches!(leakage_probe(&c, &ds, &ProbeConfig::default()), Err(EvalError::NotFactorized)));
        let c = ck(ModelParams::zeros(Dims::new(16, 2, 2)), AblationConfig::FULL);
        assert_eq!(leakage_probe(&c, &ds, &ProbeConfig::default()).unwrap(), 0.5);
    }

    #[test]
    fn oracle_correlation_is_one_and_constant_is_null() {
        for s in [Split::IdTest, Split::OodTest] {
            let ds = split(&gen(16), s);
            let p = divergence_point(&GoldOracle, 0, &ds).unwrap();
            assert!((p.correlation.unwrap() - 1.0).abs() < 1e-12);
        }
        let ds = split(&gen(16), Split::IdTest);
        let p = divergence_point(&ConstantModel(1.0), 0, &ds).unwrap();
        assert_eq!(p.correlation, None);
        assert_eq!(p.mean_reward, 0.0);
    }

    #[test]
    fn divergence_needs_two_checkpoints() {
        let ds = split(&gen(16), Split::IdTest);
        let c = ck(ModelParams::zeros(Dims::new(16, 2, 2)), AblationConfig::FULL);
        assert!(gold_divergence(std::slice::from_ref(&c), &ds).is_err());
        let pts = gold_divergence(&[c.clone(), Checkpoint { step: 9, ..c }], &ds).unwrap();
        assert_eq!(pts.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 9]);
        assert!(pts.iter().all(|p| p.correlation.is_none()));
    }

    #[test]
    fn reports_round_trip_through_csv() {
        let cfg = gen(16);
        let tcfg = TrainConfig { epochs: 1, dims: Dims::new(16, 2, 3), ..TrainConfig::default() };
        let out = train(&split(&cfg, Split::Train), &tcfg).unwrap();
        let ds = split(&cfg, Split::OodTest);
        let r = evaluate("full", out.final_checkpoint(), &ds, &EvalOptions::default()).unwrap();
        let std_ck = ck(ModelParams::zeros(Dims::new(16, 16, 3)), Variant::StandardRm.ablation());
        let r2 = evaluate("standard", &std_ck, &ds, &EvalOptions::default()).unwrap();
        assert_eq!(r2.leakage, None);
        let mut buf = Vec::new();
        write_reports_csv(&[r.clone(), r2.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("model,split,seed,n,accuracy,sigma_len,leakage,gold_corr,normalization\n"), "{text}");
        let back = read_reports_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!((back[0].accuracy, back[0].leakage, back[0].split), (r.accuracy, r.leakage, Split::OodTest));
        assert_eq!(back[1].leakage, None);
        assert_eq!(r.file_stem(), "full_ood_test_seed1");
        let mut curve = Vec::new();
        r.curve.write_csv(&mut curve).unwrap();
        let curve = String::from_utf8(curve).unwrap();
        assert_eq!(curve.lines().next().unwrap(), "bucket_center,mean_reward");
        assert_eq!(curve.lines().count(), 11);
    }

    #[test]
    fn ablation_matrix_has_seven_rows() {
        let cfg = GenConfig { n_train: 64, n_test: 40, ..gen(12) };
        let tcfg = TrainConfig { epochs: 1, batch_size: 32, dims: Dims::new(12, 2, 3), ..TrainConfig::default() };
        let m = run_ablations(&cfg, &tcfg, &EvalOptions::default()).unwrap();
        let names: Vec<&str> = m.rows.iter().map(|r| r.variant.name()).collect();
        assert_eq!(
            names,
            ["full", "wo_factorization", "wo_reconstruction", "wo_grl", "wo_kl_c", "wo_kl_nc", "wo_kl_both"]
        );
        assert!(m.rows.iter().all(|r| r.error.is_none() && r.reports.len() == 2));
        let again = run_ablations(&cfg, &tcfg, &EvalOptions::default()).unwrap();
        assert_eq!(m, again);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].starts_with("variant,seed,id_accuracy,ood_accuracy"));
        assert_eq!(m.reports().count(), 14);
    }

    #[test]
    fn failing_variant_is_recorded() {
        // embed_dim mismatch makes every variant fail, but the matrix is still complete
        let cfg = GenConfig { n_train: 32, n_test: 20, ..gen(12) };
        let tcfg = TrainConfig { epochs: 1, dims: Dims::new(10, 2, 3), ..TrainConfig::default() };
        let m = run_ablations(&cfg, &tcfg, &EvalOptions::default()).unwrap();
        assert_eq!(m.rows.len(), 7);
        assert!(m.rows.iter().all(|r| r.error.as_deref().unwrap().contains("dimension")));
    }

    #[test]
    fn zero_prefix_gives_zero_hacked_shift() {
        let cfg = GenConfig { prefix_magnitude: Some(0.0), n_train: 200, n_test: 200, ..gen(12) };
        let tcfg = TrainConfig { epochs: 2, dims: Dims::new(12, 2, 3), ..TrainConfig::default() };
        let rows = sycophancy_protocol(&cfg, &tcfg, &[Variant::StandardRm, Variant::Full]).unwrap();
        for r in &rows {
            // identical embeddings, so training and scoring are unchanged
            assert_eq!(r.delta, 0.0, "{r:?}");
            assert_eq!(r.clean_on_hacked, r.clean_on_clean);
        }
        let mut buf = Vec::new();
        write_sycophancy_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_sycophancy_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn summary_lists_each_model_once_per_split() {
        let mk = |m: &str, s: Split, seed: u64, acc: f64| EvalReport {
            model: m.into(),
            split: s,
            seed,
            n: 10,
            accuracy: acc,
            sigma_len: 0.1,
            leakage: None,
            gold_corr: Some(0.5),
            normalization: NORMALIZATION.into(),
            curve: LengthCurve::default(),
        };
        let text = render_summary(&[
            mk("full", Split::IdTest, 1, 0.8),
            mk("full", Split::IdTest, 2, 0.9),
            mk("standard", Split::OodTest, 1, 0.7),
        ]);
        assert_eq!(text.matches("full").count(), 1);
        assert!(text.contains("0.8500"), "{text}");
    }

    #[test]
    fn mean_and_se_oracle() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn accuracy_is_rank_invariant(scale in 0.01f64..100.0, shift in -50.0f64..50.0, seed in 0u64..50) {
            let cfg = GenConfig { n_test: 50, seed, ..gen(8) };
            let ds = split(&cfg, Split::IdTest);
            struct Mono<F: Fn(f64) -> f64 + Sync>(F);
            impl<F: Fn(f64) -> f64 + Sync> RewardModel for Mono<F> {
                fn score(&self, r: &EmbeddingRecord) -> Result<f64, EvalError> { Ok((self.0)(r.s + 0.3 * r.a)) }
            }
            let base = pairwise_accuracy(&Mono(|x| x), &ds).unwrap();
            let t = pairwise_accuracy(&Mono(move |x| scale * x + shift), &ds).unwrap();
            let e = pairwise_accuracy(&Mono(|x: f64| x.exp()), &ds).unwrap();
            prop_assert_eq!(base, t);
            prop_assert_eq!(base, e);
        }
    }
}
