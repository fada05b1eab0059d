//! Synthetic stand-in for a frozen LLM backbone.
//!
//! Each record carries an embedding `h` mixed from hidden causal latents
//! `u_c` and spurious latents `u_nc`, plus the ground-truth scalars derived
//! from them: the gold quality `s = w_c . u_c` and the length-like spurious
//! attribute `a = w_nc . u_nc`. Inside a record the two are independent;
//! correlation between preference and `a` is introduced only when records
//! are paired.
//!
//! The sycophancy artifact is modelled as a fixed rank-one offset along a
//! seed-determined unit direction. That is a modelling assumption of this
//! crate: a constant textual prefix is taken to shift embeddings by a
//! constant vector.

mod io;

pub(crate) use io::fmt_f64;
pub use io::{read_dataset, read_dataset_checked, write_dataset};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numkernel::{Matrix, NumError, Rng, Vector};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("dataset has already been prefix-perturbed")]
    AlreadyPerturbed,
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    Linear,
    Tanh,
}

/// How preference correlates with the spurious attribute when pairing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpuriousShift {
    /// winner has the larger `a` with frequency `rho`
    Correlated,
    /// no constraint
    Independent,
    /// winner has the larger `a` with frequency `1 - rho`
    AntiCorrelated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdTest,
    OodTest,
    HackedTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IdTest => "id_test",
            Split::OodTest => "ood_test",
            Split::HackedTest => "hacked_test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "id_test" => Some(Split::IdTest),
            "ood_test" => Some(Split::OodTest),
            "hacked_test" => Some(Split::HackedTest),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbMode {
    /// winner with `p_chosen`, loser with `p_rejected`
    Train,
    /// each side independently with `p_test`
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub embed_dim: usize,
    pub causal_dim: usize,
    pub spurious_dim: usize,
    pub mixing: Mixing,
    /// Bradley-Terry label temperature; `inf` gives hard labels.
    pub beta: f64,
    pub rho: f64,
    /// Shift used for the out-of-distribution split.
    pub ood_shift: SpuriousShift,
    pub p_chosen: f64,
    pub p_rejected: f64,
    pub p_test: f64,
    pub noise_scale: f64,
    /// Length of the sycophancy offset; `None` means twice the noise scale.
    pub prefix_magnitude: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            embed_dim: 64,
            causal_dim: 4,
            spurious_dim: 4,
            mixing: Mixing::Linear,
            beta: 4.0,
            rho: 0.9,
            ood_shift: SpuriousShift::AntiCorrelated,
            p_chosen: 0.8,
            p_rejected: 0.2,
            p_test: 0.3,
            noise_scale: 0.1,
            prefix_magnitude: None,
            n_train: 4000,
            n_test: 1000,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.embed_dim == 0 || self.causal_dim == 0 || self.spurious_dim == 0 {
            return bad("embed_dim, causal_dim and spurious_dim must be positive".into());
        }
        if self.causal_dim + self.spurious_dim > self.embed_dim {
            return bad(format!(
                "causal_dim + spurious_dim ({} + {}) exceeds embed_dim {}",
                self.causal_dim, self.spurious_dim, self.embed_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0,1], got {}", self.rho));
        }
        for (name, p) in [("p_chosen", self.p_chosen), ("p_rejected", self.p_rejected), ("p_test", self.p_test)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be a non-negative number, got {}", self.noise_scale));
        }
        if let Some(m) = self.prefix_magnitude {
            if !(m >= 0.0 && m.is_finite()) {
                return bad(format!("prefix_magnitude must be a non-negative number, got {m}"));
            }
        }
        Ok(())
    }

    pub fn prefix_magnitude(&self) -> f64 {
        self.prefix_magnitude.unwrap_or(2.0 * self.noise_scale)
    }

    /// Short content hash identifying this configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Shift mode that governs pairing for `split`.
    pub fn shift_for(&self, split: Split) -> SpuriousShift {
        match split {
            Split::Train | Split::IdTest | Split::HackedTest => SpuriousShift::Correlated,
            Split::OodTest => self.ood_shift,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub h: Vector,
    /// hidden gold quality
    pub s: f64,
    /// hidden spurious (length-like) attribute
    pub a: f64,
    pub prefix_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub pair_id: u64,
    pub winner: EmbeddingRecord,
    pub loser: EmbeddingRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub fingerprint: String,
    pub embed_dim: usize,
    pub perturbed: bool,
    pub triplets: Vec<PreferenceTriplet>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Fraction of triplets whose winner has the strictly larger spurious attribute.
    pub fn winner_larger_a_fraction(&self) -> f64 {
        if self.triplets.is_empty() {
            return f64::NAN;
        }
        let n = self.triplets.iter().filter(|t| t.winner.a > t.loser.a).count();
        n as f64 / self.triplets.len() as f64
    }

    /// Warning text when the dataset was not produced by `cfg`.
    pub fn fingerprint_warning(&self, cfg: &GenConfig) -> Option<String> {
        let want = cfg.fingerprint();
        (self.fingerprint != want)
            .then(|| format!("dataset fingerprint {} does not match config fingerprint {}", self.fingerprint, want))
    }
}

// Stream identifiers for Rng::derive.
const STREAM_STRUCTURE: u64 = 0x5354_5255;
const STREAM_PERTURB: u64 = 0x5045_5254;

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::IdTest => 2,
        Split::OodTest => 3,
        Split::HackedTest => 4,
    }
}

/// Fixed per-config structure: mixing matrix, ground-truth directions and
/// the prefix direction, all drawn once from the config seed.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GenConfig,
    mixing: Matrix,
    w_c: Vec<f64>,
    w_nc: Vec<f64>,
    prefix_dir: Vec<f64>,
}

/// Rejections before the anchoring record of a pair is also redrawn.
const MAX_LOSER_RESAMPLES: usize = 1000;

impl Generator {
    pub fn new(cfg: &GenConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        let k = cfg.causal_dim + cfg.spurious_dim;
        let mut rng = Rng::new(cfg.seed).derive(STREAM_STRUCTURE);
        let scale = 1.0 / (k as f64).sqrt();
        let data = rng.gaussian_vec(cfg.embed_dim * k).into_iter().map(|x| x * scale).collect();
        let mixing = Matrix::from_vec(cfg.embed_dim, k, data)?;
        let w_c = rng.unit_vector(cfg.causal_dim);
        let w_nc = rng.unit_vector(cfg.spurious_dim);
        let prefix_dir = rng.unit_vector(cfg.embed_dim);
        Ok(Generator { cfg: cfg.clone(), mixing, w_c, w_nc, prefix_dir })
    }

    /// Replaces the random mixing matrix, e.g. with `[I; 0]`.
    pub fn with_mixing_matrix(mut self, mixing: Matrix) -> Result<Self, DataError> {
        let want = (self.cfg.embed_dim, self.cfg.causal_dim + self.cfg.spurious_dim);
        if mixing.shape() != want {
            return Err(NumError::Shape {
                op: "with_mixing_matrix",
                expected: format!("{}x{}", want.0, want.1),
                found: format!("{}x{}", mixing.rows(), mixing.cols()),
            }
            .into());
        }
        self.mixing = mixing;
        Ok(self)
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn causal_direction(&self) -> &[f64] {
        &self.w_c
    }

    pub fn spurious_direction(&self) -> &[f64] {
        &self.w_nc
    }

    pub fn prefix_direction(&self) -> &[f64] {
        &self.prefix_dir
    }

    pub fn generate_record(&self, rng: &mut Rng) -> EmbeddingRecord {
        let u_c = rng.gaussian_vec(self.cfg.causal_dim);
        let u_nc = rng.gaussian_vec(self.cfg.spurious_dim);
        let s: f64 = self.w_c.iter().zip(&u_c).map(|(w, u)| w * u).sum();
        let a: f64 = self.w_nc.iter().zip(&u_nc).map(|(w, u)| w * u).sum();
        let mut latent = u_c;
        latent.extend_from_slice(&u_nc);
        let mut h = self.mixing.matvec(&latent).expect("mixing shape fixed at construction");
        if self.cfg.mixing == Mixing::Tanh {
            h.iter_mut().for_each(|x| *x = x.tanh());
        }
        if self.cfg.noise_scale > 0.0 {
            for x in h.iter_mut() {
                *x += self.cfg.noise_scale * rng.gaussian();
            }
        }
        EmbeddingRecord { h, s, a, prefix_flag: false }
    }

    /// Pairs two records into a triplet.
    ///
    /// The winner is drawn from `sigmoid(beta * (s1 - s2))`. Under a
    /// correlated (anti-correlated) shift a target orientation is chosen
    /// first: with probability `rho` (`1 - rho`) the winner must have the
    /// larger `a`, otherwise the smaller one. Candidate losers (`r2`) are
    /// redrawn, together with a fresh label, until the orientation holds.
    pub fn make_pair(
        &self,
        pair_id: u64,
        r1: EmbeddingRecord,
        r2: EmbeddingRecord,
        shift: SpuriousShift,
        rng: &mut Rng,
    ) -> PreferenceTriplet {
        let want_larger = match shift {
            SpuriousShift::Independent => None,
            SpuriousShift::Correlated => Some(rng.bernoulli(self.cfg.rho)),
            SpuriousShift::AntiCorrelated => Some(!rng.bernoulli(self.cfg.rho)),
        };
        let (mut r1, mut r2) = (r1, r2);
        let mut rejections = 0;
        loop {
            let first_wins = rng.bernoulli(win_probability(self.cfg.beta, r1.s - r2.s));
            let (w, l) = if first_wins { (&r1, &r2) } else { (&r2, &r1) };
            let accepted = match want_larger {
                None => true,
                Some(true) => w.a > l.a,
                Some(false) => w.a < l.a,
            };
            if accepted {
                return if first_wins {
                    PreferenceTriplet { pair_id, winner: r1, loser: r2 }
                } else {
                    PreferenceTriplet { pair_id, winner: r2, loser: r1 }
                };
            }
            rejections += 1;
            if rejections % MAX_LOSER_RESAMPLES == 0 {
                r1 = self.generate_record(rng);
            }
            r2 = self.generate_record(rng);
        }
    }

    pub fn generate_triplets(&self, n: usize, shift: SpuriousShift, rng: &mut Rng) -> Vec<PreferenceTriplet> {
        (0..n)
            .map(|i| {
                let r1 = self.generate_record(rng);
                let r2 = self.generate_record(rng);
                self.make_pair(i as u64, r1, r2, shift, rng)
            })
            .collect()
    }

    /// Builds a split from its own derived stream, so splits do not depend
    /// on the order in which they are generated.
    pub fn generate_split(&self, split: Split) -> Dataset {
        let n = match split {
            Split::Train => self.cfg.n_train,
            _ => self.cfg.n_test,
        };
        // the hacked split perturbs the very pairs of the ID split
        let base = if split == Split::HackedTest { Split::IdTest } else { split };
        let mut rng = Rng::new(self.cfg.seed).derive(split_stream(base));
        let triplets = self.generate_triplets(n, self.cfg.shift_for(split), &mut rng);
        let ds = Dataset {
            split,
            fingerprint: self.cfg.fingerprint(),
            embed_dim: self.cfg.embed_dim,
            perturbed: false,
            triplets,
        };
        if split == Split::HackedTest {
            let mut prng = Rng::new(self.cfg.seed).derive(STREAM_PERTURB ^ split_stream(split));
            return self
                .apply_prefix_perturbation(&ds, PerturbMode::Test, &mut prng)
                .expect("fresh split is unperturbed");
        }
        ds
    }

    /// Training split with the sycophancy prefix injected (winner `p_chosen`,
    /// loser `p_rejected`).
    pub fn generate_hacked_train(&self) -> Dataset {
        let clean = self.generate_split(Split::Train);
        let mut prng = Rng::new(self.cfg.seed).derive(STREAM_PERTURB ^ split_stream(Split::Train));
        self.apply_prefix_perturbation(&clean, PerturbMode::Train, &mut prng).expect("fresh split is unperturbed")
    }

    /// Adds the prefix offset to selected records and flags them. Gold
    /// quality and the spurious attribute are left untouched. Test mode
    /// relabels the result as the hacked test split.
    pub fn apply_prefix_perturbation(
        &self,
        ds: &Dataset,
        mode: PerturbMode,
        rng: &mut Rng,
    ) -> Result<Dataset, DataError> {
        if ds.perturbed || ds.triplets.iter().any(|t| t.winner.prefix_flag || t.loser.prefix_flag) {
            return Err(DataError::AlreadyPerturbed);
        }
        let (pw, pl) = match mode {
            PerturbMode::Train => (self.cfg.p_chosen, self.cfg.p_rejected),
            PerturbMode::Test => (self.cfg.p_test, self.cfg.p_test),
        };
        let mag = self.cfg.prefix_magnitude();
        let mut out = ds.clone();
        out.perturbed = true;
        if mode == PerturbMode::Test {
            out.split = Split::HackedTest;
        }
        for t in &mut out.triplets {
            for (rec, p) in [(&mut t.winner, pw), (&mut t.loser, pl)] {
                if rng.bernoulli(p) {
                    rec.prefix_flag = true;
                    for (x, d) in rec.h.iter_mut().zip(&self.prefix_dir) {
                        *x += mag * d;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `sigmoid(beta * diff)`, with the hard-label limit handled for infinite beta.
pub fn win_probability(beta: f64, diff: f64) -> f64 {
    if beta.is_infinite() {
        return if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            0.0
        } else {
            0.5
        };
    }
    crate::losses::sigmoid(beta * diff)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig { embed_dim: 16, causal_dim: 3, spurious_dim: 2, n_train: 200, n_test: 100, ..GenConfig::default() }
    }

    #[test]
    fn identity_mixing_reproduces_latents() {
        let cfg = GenConfig { noise_scale: 0.0, ..small_cfg() };
        let mut a = Matrix::zeros(16, 5);
        for i in 0..5 {
            a.set(i, i, 1.0);
        }
        let gen = Generator::new(&cfg).unwrap().with_mixing_matrix(a).unwrap();
        let mut rng = Rng::new(4);
        let rec = gen.generate_record(&mut rng);
        let mut replay = Rng::new(4);
        let u = replay.gaussian_vec(5);
        assert_eq!(&rec.h[..5], &u[..]);
        assert!(rec.h[5..].iter().all(|&x| x == 0.0));
        let s: f64 = gen.causal_direction().iter().zip(&u[..3]).map(|(w, x)| w * x).sum();
        assert_eq!(rec.s, s);
        assert!(!rec.prefix_flag);
    }

    #[test]
    fn records_are_deterministic_per_seed() {
        let gen = Generator::new(&small_cfg()).unwrap();
        let xs: Vec<_> = {
            let mut r = Rng::new(8);
            (0..5).map(|_| gen.generate_record(&mut r)).collect()
        };
        let ys: Vec<_> = {
            let mut r = Rng::new(8);
            (0..5).map(|_| gen.generate_record(&mut r)).collect()
        };
        assert_eq!(xs, ys);
    }

    #[test]
    fn config_validation_names_the_field() {
        let err = GenConfig { rho: 1.5, ..GenConfig::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("rho must lie in [0,1]"));
        let err = GenConfig { causal_dim: 40, spurious_dim: 30, ..GenConfig::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("exceeds embed_dim"));
        assert!(GenConfig { p_test: -0.1, ..GenConfig::default() }.validate().is_err());
        assert!(Generator::new(&GenConfig { causal_dim: 64, ..GenConfig::default() }).is_err());
    }

    #[test]
    fn hard_labels_follow_gold_quality() {
        let cfg = GenConfig { beta: f64::INFINITY, ..small_cfg() };
        let gen = Generator::new(&cfg).unwrap();
        let mut rng = Rng::new(2);
        for i in 0..200 {
            let r1 = gen.generate_record(&mut rng);
            let mut r2 = gen.generate_record(&mut rng);
            if r2.s > r1.s {
                r2.s = r1.s - 1.0;
            }
            let t = gen.make_pair(i, r1.clone(), r2, SpuriousShift::Independent, &mut rng);
            assert_eq!(t.winner, r1);
        }
    }

    #[test]
    fn rho_one_forces_winner_to_have_larger_a() {
        let cfg = GenConfig { rho: 1.0, ..small_cfg() };
        let gen = Generator::new(&cfg).unwrap();
        let ds = gen.generate_split(Split::Train);
        assert!(ds.triplets.iter().all(|t| t.winner.a > t.loser.a));
    }

    #[test]
    fn label_fidelity_with_hard_labels_and_no_correlation() {
        let cfg = GenConfig { beta: f64::INFINITY, rho: 0.0, ..small_cfg() };
        let gen = Generator::new(&cfg).unwrap();
        for split in [Split::Train, Split::OodTest] {
            let ds = gen.generate_split(split);
            assert!(ds.triplets.iter().all(|t| t.winner.s > t.loser.s));
        }
    }

    #[test]
    fn zero_magnitude_perturbation_only_sets_flags() {
        let cfg = GenConfig { prefix_magnitude: Some(0.0), ..small_cfg() };
        let gen = Generator::new(&cfg).unwrap();
        let ds = gen.generate_split(Split::IdTest);
        let hacked = gen.apply_prefix_perturbation(&ds, PerturbMode::Train, &mut Rng::new(1)).unwrap();
        assert!(hacked.perturbed);
        let mut flagged = 0;
        for (a, b) in ds.triplets.iter().zip(&hacked.triplets) {
            assert_eq!(a.winner.h, b.winner.h);
            assert_eq!(a.loser.h, b.loser.h);
            flagged += b.winner.prefix_flag as usize + b.loser.prefix_flag as usize;
        }
        assert!(flagged > 0);
    }

    #[test]
    fn perturbation_preserves_ground_truth_and_shifts_h() {
        let gen = Generator::new(&small_cfg()).unwrap();
        let ds = gen.generate_split(Split::IdTest);
        let hacked = gen.apply_prefix_perturbation(&ds, PerturbMode::Test, &mut Rng::new(3)).unwrap();
        assert_eq!(hacked.split, Split::HackedTest);
        let mag = gen.config().prefix_magnitude();
        for (a, b) in ds.triplets.iter().zip(&hacked.triplets) {
            for (ra, rb) in [(&a.winner, &b.winner), (&a.loser, &b.loser)] {
                assert_eq!((ra.s, ra.a), (rb.s, rb.a));
                let shift: f64 =
                    rb.h.iter().zip(ra.h.iter()).zip(gen.prefix_direction()).map(|((x, y), d)| (x - y) * d).sum();
                let want = if rb.prefix_flag { mag } else { 0.0 };
                assert!((shift - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn double_perturbation_rejected() {
        let gen = Generator::new(&small_cfg()).unwrap();
        let ds = gen.generate_hacked_train();
        let err = gen.apply_prefix_perturbation(&ds, PerturbMode::Test, &mut Rng::new(1)).unwrap_err();
        assert!(matches!(err, DataError::AlreadyPerturbed));
    }

    #[test]
    fn perturbation_probabilities_default_to_protocol_values() {
        let cfg = GenConfig::default();
        assert_eq!((cfg.p_chosen, cfg.p_rejected, cfg.p_test), (0.8, 0.2, 0.3));
        assert!((cfg.prefix_magnitude() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = GenConfig::default();
        let b = GenConfig { rho: 0.8, ..GenConfig::default() };
        assert_eq!(a.fingerprint(), GenConfig::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        let ds = Generator::new(&a).unwrap().generate_split(Split::IdTest);
        assert!(ds.fingerprint_warning(&a).is_none());
        assert!(ds.fingerprint_warning(&b).is_some());
    }
}
