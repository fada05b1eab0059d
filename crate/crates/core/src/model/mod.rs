//! The factored causal reward head.
//!
//! `h` is mapped by two linear variational encoders to diagonal Gaussian
//! posteriors over a causal latent `z_c` and a non-causal latent `z_nc`.
//! The reward is a bias-free linear function of `z_c` only; an adversary
//! (also bias-free) reads `z_nc` through a gradient reversal layer, and a
//! linear decoder reconstructs `h` from `[z_c; z_nc]`.
//!
//! The plain Bradley-Terry reward model is expressed in the same parameter
//! layout: an identity, noise-free encoder (`d_c = H`) feeding the reward
//! head, with everything else switched off.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::PreferenceTriplet;
use crate::numkernel::{dot, Matrix, NumError, ParamSet, Rng, Vector};

/// Bounds applied to every encoder log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Scale applied at init to log-variance projections and the two scalar heads.
const SMALL_INIT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("trace was produced under a different ablation config")]
    TraceMismatch,
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub embed: usize,
    pub d_c: usize,
    pub d_nc: usize,
}

impl Dims {
    pub fn new(embed: usize, d_c: usize, d_nc: usize) -> Self {
        Dims { embed, d_c, d_nc }
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims { embed: 64, d_c: 8, d_nc: 16 }
    }
}

/// Switches that remove individual mechanisms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub factorized: bool,
    pub use_reconstruction: bool,
    pub use_adversary: bool,
    pub use_kl_c: bool,
    pub use_kl_nc: bool,
    /// Frozen identity encoder without sampling noise: the plain reward model.
    pub identity_encoder: bool,
}

impl AblationConfig {
    pub const FULL: AblationConfig = AblationConfig {
        factorized: true,
        use_reconstruction: true,
        use_adversary: true,
        use_kl_c: true,
        use_kl_nc: true,
        identity_encoder: false,
    };

    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.factorized && (self.use_adversary || self.use_reconstruction || self.use_kl_nc) {
            return Err(ModelError::Config(
                "a non-factorized model has no non-causal channel: adversary, reconstruction and KL on z_nc must be off".into(),
            ));
        }
        if self.identity_encoder && (self.factorized || self.use_kl_c) {
            return Err(ModelError::Config(
                "the identity encoder is only valid for the unfactorized, KL-free baseline".into(),
            ));
        }
        Ok(())
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig::FULL
    }
}

/// Named training configurations: the baseline, the full model and the six
/// single-mechanism ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    StandardRm,
    Full,
    WoFactorization,
    WoReconstruction,
    WoGrl,
    WoKlC,
    WoKlNc,
    WoKlBoth,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::StandardRm,
        Variant::Full,
        Variant::WoFactorization,
        Variant::WoReconstruction,
        Variant::WoGrl,
        Variant::WoKlC,
        Variant::WoKlNc,
        Variant::WoKlBoth,
    ];

    /// The seven rows of the ablation matrix.
    pub const ABLATIONS: [Variant; 7] = [
        Variant::Full,
        Variant::WoFactorization,
        Variant::WoReconstruction,
        Variant::WoGrl,
        Variant::WoKlC,
        Variant::WoKlNc,
        Variant::WoKlBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::StandardRm => "standard",
            Variant::Full => "full",
            Variant::WoFactorization => "wo_factorization",
            Variant::WoReconstruction => "wo_reconstruction",
            Variant::WoGrl => "wo_grl",
            Variant::WoKlC => "wo_kl_c",
            Variant::WoKlNc => "wo_kl_nc",
            Variant::WoKlBoth => "wo_kl_both",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn valid_names() -> String {
        Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
    }

    pub fn ablation(self) -> AblationConfig {
        let full = AblationConfig::FULL;
        match self {
            Variant::StandardRm => AblationConfig {
                factorized: false,
                use_reconstruction: false,
                use_adversary: false,
                use_kl_c: false,
                use_kl_nc: false,
                identity_encoder: true,
            },
            Variant::Full => full,
            Variant::WoFactorization => AblationConfig {
                factorized: false,
                use_reconstruction: false,
                use_adversary: false,
                use_kl_nc: false,
                ..full
            },
            Variant::WoReconstruction => AblationConfig { use_reconstruction: false, ..full },
            Variant::WoGrl => AblationConfig { use_adversary: false, ..full },
            Variant::WoKlC => AblationConfig { use_kl_c: false, ..full },
            Variant::WoKlNc => AblationConfig { use_kl_nc: false, ..full },
            Variant::WoKlBoth => AblationConfig { use_kl_c: false, use_kl_nc: false, ..full },
        }
    }

    /// Model dims for this variant given the latent sizes of the full model.
    pub fn dims(self, base: Dims) -> Dims {
        match self {
            Variant::StandardRm => Dims { d_c: base.embed, ..base },
            _ => base,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Diagonal Gaussian `N(mu, diag(exp(logvar)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vector,
    pub logvar: Vector,
}

impl GaussianPosterior {
    pub fn standard(n: usize) -> Self {
        GaussianPosterior { mu: Vector::zeros(n), logvar: Vector::zeros(n) }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vector {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// All trainable tensors. Biases are `n x 1`, scalar heads `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub w_mu_c: Matrix,
    pub b_mu_c: Matrix,
    pub w_lv_c: Matrix,
    pub b_lv_c: Matrix,
    pub w_mu_nc: Matrix,
    pub b_mu_nc: Matrix,
    pub w_lv_nc: Matrix,
    pub b_lv_nc: Matrix,
    pub w_reward: Matrix,
    pub w_adv: Matrix,
    pub w_dec: Matrix,
    pub b_dec: Matrix,
}

pub const PARAM_NAMES: [&str; 12] = [
    "w_mu_c", "b_mu_c", "w_lv_c", "b_lv_c", "w_mu_nc", "b_mu_nc", "w_lv_nc", "b_lv_nc", "w_reward", "w_adv", "w_dec",
    "b_dec",
];

/// Tensors that make up the variational encoder.
pub const ENCODER_PARAMS: [&str; 8] =
    ["w_mu_c", "b_mu_c", "w_lv_c", "b_lv_c", "w_mu_nc", "b_mu_nc", "w_lv_nc", "b_lv_nc"];

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        let Dims { embed: h, d_c, d_nc } = dims;
        ModelParams {
            dims,
            w_mu_c: Matrix::zeros(d_c, h),
            b_mu_c: Matrix::zeros(d_c, 1),
            w_lv_c: Matrix::zeros(d_c, h),
            b_lv_c: Matrix::zeros(d_c, 1),
            w_mu_nc: Matrix::zeros(d_nc, h),
            b_mu_nc: Matrix::zeros(d_nc, 1),
            w_lv_nc: Matrix::zeros(d_nc, h),
            b_lv_nc: Matrix::zeros(d_nc, 1),
            w_reward: Matrix::zeros(1, d_c),
            w_adv: Matrix::zeros(1, d_nc),
            w_dec: Matrix::zeros(h, d_c + d_nc),
            b_dec: Matrix::zeros(h, 1),
        }
    }

    /// Checks every tensor against `dims`.
    pub fn validate(&self) -> Result<(), ModelError> {
        let want = ModelParams::zeros(self.dims);
        for ((name, got), (_, exp)) in self.tensors().into_iter().zip(want.tensors()) {
            if got.shape() != exp.shape() {
                return Err(NumError::Shape {
                    op: "ModelParams::validate",
                    expected: format!("{name}: {}x{}", exp.rows(), exp.cols()),
                    found: format!("{}x{}", got.rows(), got.cols()),
                }
                .into());
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors_mut().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        let t = [
            &self.w_mu_c,
            &self.b_mu_c,
            &self.w_lv_c,
            &self.b_lv_c,
            &self.w_mu_nc,
            &self.b_mu_nc,
            &self.w_lv_nc,
            &self.b_lv_nc,
            &self.w_reward,
            &self.w_adv,
            &self.w_dec,
            &self.b_dec,
        ];
        PARAM_NAMES.iter().copied().zip(t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        let t = [
            &mut self.w_mu_c,
            &mut self.b_mu_c,
            &mut self.w_lv_c,
            &mut self.b_lv_c,
            &mut self.w_mu_nc,
            &mut self.b_mu_nc,
            &mut self.w_lv_nc,
            &mut self.b_lv_nc,
            &mut self.w_reward,
            &mut self.w_adv,
            &mut self.w_dec,
            &mut self.b_dec,
        ];
        PARAM_NAMES.iter().copied().zip(t).collect()
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let data = rng.gaussian_vec(rows * cols).into_iter().map(|x| x * std).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// Weights `N(0, 1/fan_in)`, biases zero. Log-variance projections and the
/// reward/adversary heads are further scaled by 0.01, so posteriors start
/// nearly deterministic and initial rewards are near zero. With
/// `identity_encoder` the causal mean projection is the identity.
pub fn init_params(dims: Dims, ab: &AblationConfig, rng: &mut Rng) -> Result<ModelParams, ModelError> {
    ab.validate()?;
    let Dims { embed: h, d_c, d_nc } = dims;
    if h == 0 || d_c == 0 || d_nc == 0 {
        return Err(ModelError::Config(format!("all dims must be positive, got {dims:?}")));
    }
    if ab.identity_encoder && d_c != h {
        return Err(ModelError::Config(format!("identity encoder needs d_c = H, got d_c={d_c}, H={h}")));
    }
    let enc_std = 1.0 / (h as f64).sqrt();
    let mut p = ModelParams::zeros(dims);
    p.w_mu_c = if ab.identity_encoder { Matrix::identity(h) } else { gaussian_matrix(d_c, h, enc_std, rng) };
    p.w_lv_c =
        if ab.identity_encoder { Matrix::zeros(d_c, h) } else { gaussian_matrix(d_c, h, enc_std * SMALL_INIT, rng) };
    p.w_mu_nc = gaussian_matrix(d_nc, h, enc_std, rng);
    p.w_lv_nc = gaussian_matrix(d_nc, h, enc_std * SMALL_INIT, rng);
    p.w_reward = gaussian_matrix(1, d_c, SMALL_INIT / (d_c as f64).sqrt(), rng);
    p.w_adv = gaussian_matrix(1, d_nc, SMALL_INIT / (d_nc as f64).sqrt(), rng);
    p.w_dec = gaussian_matrix(h, d_c + d_nc, 1.0 / ((d_c + d_nc) as f64).sqrt(), rng);
    Ok(p)
}

fn affine(w: &Matrix, b: &Matrix, x: &[f64]) -> Result<Vector, NumError> {
    let mut y = w.matvec(x)?;
    for (yi, bi) in y.iter_mut().zip(b.as_slice()) {
        *yi += bi;
    }
    Ok(y)
}

fn clamp_logvar(raw: &Vector) -> Vector {
    raw.iter().map(|x| x.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect()
}

/// Pre-clamp encoder outputs, kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEncoding {
    pub mu_c: Vector,
    pub lv_c: Vector,
    pub mu_nc: Vector,
    pub lv_nc: Vector,
}

pub fn encode_raw(p: &ModelParams, h: &[f64]) -> Result<RawEncoding, ModelError> {
    Ok(RawEncoding {
        mu_c: affine(&p.w_mu_c, &p.b_mu_c, h)?,
        lv_c: affine(&p.w_lv_c, &p.b_lv_c, h)?,
        mu_nc: affine(&p.w_mu_nc, &p.b_mu_nc, h)?,
        lv_nc: affine(&p.w_lv_nc, &p.b_lv_nc, h)?,
    })
}

/// Causal and non-causal posteriors for `h`, log-variances clamped.
pub fn encode(p: &ModelParams, h: &[f64]) -> Result<(GaussianPosterior, GaussianPosterior), ModelError> {
    let raw = encode_raw(p, h)?;
    Ok((
        GaussianPosterior { logvar: clamp_logvar(&raw.lv_c), mu: raw.mu_c },
        GaussianPosterior { logvar: clamp_logvar(&raw.lv_nc), mu: raw.mu_nc },
    ))
}

/// `z = mu + exp(logvar / 2) * eps` for a given `eps`.
pub fn reparameterize_with(q: &GaussianPosterior, eps: &[f64]) -> Result<Vector, ModelError> {
    if eps.len() != q.dim() {
        return Err(NumError::Shape {
            op: "reparameterize",
            expected: format!("noise of length {}", q.dim()),
            found: format!("length {}", eps.len()),
        }
        .into());
    }
    Ok(q.mu.iter().zip(q.logvar.iter()).zip(eps).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect())
}

/// Draws `eps ~ N(0, I)` and returns `(z, eps)`.
pub fn reparameterize(q: &GaussianPosterior, rng: &mut Rng) -> (Vector, Vector) {
    let eps = Vector::from(rng.gaussian_vec(q.dim()));
    let z = reparameterize_with(q, &eps).expect("noise sized to posterior");
    (z, eps)
}

pub fn reward(p: &ModelParams, z_c: &[f64]) -> Result<f64, ModelError> {
    Ok(dot(p.w_reward.as_slice(), z_c)?)
}

pub fn adversary(p: &ModelParams, z_nc: &[f64]) -> Result<f64, ModelError> {
    Ok(dot(p.w_adv.as_slice(), z_nc)?)
}

/// `h_hat = W_dec [z_c; z_nc] + b_dec`.
pub fn reconstruct(p: &ModelParams, z_c: &[f64], z_nc: &[f64]) -> Result<Vector, ModelError> {
    if z_c.len() != p.dims.d_c || z_nc.len() != p.dims.d_nc {
        return Err(NumError::Shape {
            op: "reconstruct",
            expected: format!("latents of length {} and {}", p.dims.d_c, p.dims.d_nc),
            found: format!("{} and {}", z_c.len(), z_nc.len()),
        }
        .into());
    }
    let mut cat = Vec::with_capacity(z_c.len() + z_nc.len());
    cat.extend_from_slice(z_c);
    cat.extend_from_slice(z_nc);
    Ok(affine(&p.w_dec, &p.b_dec, &cat)?)
}

/// Deterministic inference-time reward: the reward head applied to the
/// causal posterior mean. Only the causal encoder rows are evaluated.
pub fn reward_eval(p: &ModelParams, h: &[f64]) -> Result<f64, ModelError> {
    let mu_c = affine(&p.w_mu_c, &p.b_mu_c, h)?;
    reward(p, &mu_c)
}

/// Gradient reversal: identity forward, `-lambda * g` backward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReversal {
    backward_scale: f64,
}

impl GradientReversal {
    pub fn new(lambda_grl: f64) -> Self {
        assert!(lambda_grl >= 0.0, "lambda_grl must be non-negative");
        GradientReversal { backward_scale: -lambda_grl }
    }

    /// Plain pass-through, for comparing against the reversed composition.
    pub fn pass_through() -> Self {
        GradientReversal { backward_scale: 1.0 }
    }

    pub fn forward(&self, x: f64) -> f64 {
        x
    }

    pub fn backward(&self, upstream: f64) -> f64 {
        self.backward_scale * upstream
    }
}

/// Noise for one side of a triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct SideNoise {
    pub c: Vector,
    pub nc: Option<Vector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletNoise {
    pub winner: SideNoise,
    pub loser: SideNoise,
}

/// Where the reparameterization noise comes from.
pub enum Noise<'a> {
    /// mean substitution, `eps = 0`
    Eval,
    Sample(&'a mut Rng),
    Replay(&'a TripletNoise),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SideTrace {
    pub post_c: GaussianPosterior,
    pub raw_lv_c: Vector,
    pub post_nc: Option<GaussianPosterior>,
    pub raw_lv_nc: Option<Vector>,
    pub eps_c: Vector,
    pub eps_nc: Option<Vector>,
    pub z_c: Vector,
    pub z_nc: Option<Vector>,
    pub reward: f64,
    pub adv: Option<f64>,
    pub h_hat: Option<Vector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub ablation: AblationConfig,
    pub winner: SideTrace,
    pub loser: SideTrace,
}

impl ForwardTrace {
    /// The noise realization, for exact replay.
    pub fn noise(&self) -> TripletNoise {
        let side = |s: &SideTrace| SideNoise { c: s.eps_c.clone(), nc: s.eps_nc.clone() };
        TripletNoise { winner: side(&self.winner), loser: side(&self.loser) }
    }
}

fn forward_side(
    p: &ModelParams,
    h: &[f64],
    ab: &AblationConfig,
    noise: &mut Noise<'_>,
    replay: Option<&SideNoise>,
) -> Result<SideTrace, ModelError> {
    let raw = encode_raw(p, h)?;
    let post_c = GaussianPosterior { mu: raw.mu_c.clone(), logvar: clamp_logvar(&raw.lv_c) };
    let draw = |n: usize, noise: &mut Noise<'_>, replayed: Option<&Vector>| -> Result<Vector, ModelError> {
        if ab.identity_encoder {
            return Ok(Vector::zeros(n));
        }
        match noise {
            Noise::Eval => Ok(Vector::zeros(n)),
            Noise::Sample(rng) => Ok(Vector::from(rng.gaussian_vec(n))),
            Noise::Replay(_) => {
                let v = replayed.ok_or_else(|| ModelError::Config("replay noise missing a channel".into()))?;
                if v.len() != n {
                    return Err(NumError::Shape {
                        op: "replay noise",
                        expected: format!("length {n}"),
                        found: format!("length {}", v.len()),
                    }
                    .into());
                }
                Ok(v.clone())
            }
        }
    };
    let eps_c = draw(p.dims.d_c, noise, replay.map(|r| &r.c))?;
    let z_c = reparameterize_with(&post_c, &eps_c)?;
    let reward = reward(p, &z_c)?;

    let mut side = SideTrace {
        post_c,
        raw_lv_c: raw.lv_c,
        post_nc: None,
        raw_lv_nc: None,
        eps_c,
        eps_nc: None,
        z_c,
        z_nc: None,
        reward,
        adv: None,
        h_hat: None,
    };
    if ab.factorized {
        let post_nc = GaussianPosterior { mu: raw.mu_nc, logvar: clamp_logvar(&raw.lv_nc) };
        let eps_nc = draw(p.dims.d_nc, noise, replay.and_then(|r| r.nc.as_ref()))?;
        let z_nc = reparameterize_with(&post_nc, &eps_nc)?;
        if ab.use_adversary {
            side.adv = Some(adversary(p, &z_nc)?);
        }
        if ab.use_reconstruction {
            side.h_hat = Some(reconstruct(p, &side.z_c, &z_nc)?);
        }
        side.post_nc = Some(post_nc);
        side.raw_lv_nc = Some(raw.lv_nc);
        side.eps_nc = Some(eps_nc);
        side.z_nc = Some(z_nc);
    }
    Ok(side)
}

/// Runs the model on both sides of a triplet. Under `Noise::Eval` every
/// latent is its posterior mean; otherwise noise is sampled (and recorded)
/// or replayed from an earlier trace.
pub fn forward_triplet(
    p: &ModelParams,
    t: &PreferenceTriplet,
    ab: &AblationConfig,
    mut noise: Noise<'_>,
) -> Result<ForwardTrace, ModelError> {
    ab.validate()?;
    let mode = if matches!(noise, Noise::Eval) { Mode::Eval } else { Mode::Train };
    let (rw, rl) = match &noise {
        Noise::Replay(n) => (Some(n.winner.clone()), Some(n.loser.clone())),
        _ => (None, None),
    };
    let winner = forward_side(p, &t.winner.h, ab, &mut noise, rw.as_ref())?;
    let loser = forward_side(p, &t.loser.h, ab, &mut noise, rl.as_ref())?;
    Ok(ForwardTrace { mode, ablation: *ab, winner, loser })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{GenConfig, Generator, SpuriousShift};

    fn triplet(h: usize, seed: u64) -> PreferenceTriplet {
        let cfg = GenConfig { embed_dim: h, causal_dim: 2, spurious_dim: 2, ..GenConfig::default() };
        let gen = Generator::new(&cfg).unwrap();
        let mut rng = Rng::new(seed);
        gen.generate_triplets(1, SpuriousShift::Correlated, &mut rng).remove(0)
    }

    #[test]
    fn parameter_count_from_shapes() {
        let p = init_params(Dims::new(64, 8, 16), &AblationConfig::FULL, &mut Rng::new(1)).unwrap();
        let want = 2 * (64 * 8 + 8) + 2 * (64 * 16 + 16) + 8 + 16 + (24 * 64 + 64);
        assert_eq!(p.num_scalars(), want);
        p.validate().unwrap();
    }

    #[test]
    fn init_is_deterministic_and_near_deterministic_posteriors() {
        let dims = Dims::new(64, 8, 16);
        let a = init_params(dims, &AblationConfig::FULL, &mut Rng::new(3)).unwrap();
        let b = init_params(dims, &AblationConfig::FULL, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.b_mu_c.as_slice().iter().all(|&x| x == 0.0));
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let h = rng.gaussian_vec(64);
            let (c, nc) = encode(&a, &h).unwrap();
            assert!(c.logvar.iter().chain(nc.logvar.iter()).all(|lv| lv.abs() < 1.0));
        }
    }

    #[test]
    fn paper_scale_dims_are_accepted() {
        let p = init_params(Dims::new(256, 128, 512), &AblationConfig::FULL, &mut Rng::new(0)).unwrap();
        let (c, nc) = encode(&p, &vec![0.5; 256]).unwrap();
        assert_eq!((c.dim(), nc.dim()), (128, 512));
    }

    #[test]
    fn zero_params_give_standard_normal_posteriors() {
        let p = ModelParams::zeros(Dims::new(6, 2, 3));
        let (c, nc) = encode(&p, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(c, GaussianPosterior::standard(2));
        assert_eq!(nc, GaussianPosterior::standard(3));
        assert_eq!(reward_eval(&p, &[1.0; 6]).unwrap(), 0.0);
    }

    #[test]
    fn encoder_mean_matches_matvec_oracle() {
        let mut rng = Rng::new(17);
        let p = init_params(Dims::new(10, 3, 4), &AblationConfig::FULL, &mut rng).unwrap();
        let mut p = p;
        p.b_mu_c = Matrix::column(rng.gaussian_vec(3));
        let h = rng.gaussian_vec(10);
        let (c, _) = encode(&p, &h).unwrap();
        for i in 0..3 {
            let mut want = p.b_mu_c.get(i, 0);
            for (j, hj) in h.iter().enumerate() {
                want += p.w_mu_c.get(i, j) * hj;
            }
            assert!((c.mu[i] - want).abs() < 1e-12);
        }
        assert!(encode(&p, &h[..9]).is_err());
    }

    #[test]
    fn logvar_is_clamped() {
        let mut p = ModelParams::zeros(Dims::new(2, 1, 1));
        p.b_lv_c = Matrix::column(vec![50.0]);
        p.b_lv_nc = Matrix::column(vec![-50.0]);
        let (c, nc) = encode(&p, &[0.0, 0.0]).unwrap();
        assert_eq!(c.logvar[0], LOGVAR_MAX);
        assert_eq!(nc.logvar[0], LOGVAR_MIN);
        let s = c.std()[0];
        assert!(s <= 5f64.exp() && s.is_finite());
    }

    #[test]
    fn reparameterize_special_cases() {
        let q = GaussianPosterior { mu: Vector::from(vec![1.0, -2.0]), logvar: Vector::from(vec![0.7, -0.3]) };
        assert_eq!(reparameterize_with(&q, &[0.0, 0.0]).unwrap(), q.mu);
        let unit = GaussianPosterior { mu: q.mu.clone(), logvar: Vector::zeros(2) };
        let z = reparameterize_with(&unit, &[0.5, -1.5]).unwrap();
        assert_eq!(z.as_slice(), &[1.5, -3.5]);
    }

    #[test]
    fn reparameterized_samples_have_posterior_moments() {
        let q = GaussianPosterior { mu: Vector::from(vec![0.8, -1.1]), logvar: Vector::from(vec![0.4, -0.9]) };
        let mut rng = Rng::new(21);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let (z, _) = reparameterize(&q, &mut rng);
            for i in 0..2 {
                sum[i] += z[i];
                sq[i] += z[i] * z[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!((mean - q.mu[i]).abs() < 0.02, "mean {mean}");
            assert!((var - q.logvar[i].exp()).abs() < 0.02, "var {var}");
        }
    }

    #[test]
    fn heads_are_bias_free_dot_products() {
        let mut rng = Rng::new(2);
        let mut p = ModelParams::zeros(Dims::new(4, 3, 2));
        assert_eq!(reward(&p, &[0.0; 3]).unwrap(), 0.0);
        p.w_reward = Matrix::row(vec![1.0, 0.0, 0.0]);
        assert_eq!(reward(&p, &[2.5, 7.0, -1.0]).unwrap(), 2.5);
        p.w_adv = Matrix::row(vec![1.0, 0.0]);
        assert_eq!(adversary(&p, &[-4.0, 3.0]).unwrap(), -4.0);
        assert_eq!(adversary(&p, &[0.0, 0.0]).unwrap(), 0.0);

        let w = rng.gaussian_vec(3);
        let z = rng.gaussian_vec(3);
        p.w_reward = Matrix::row(w.clone());
        let want: f64 = w.iter().zip(&z).map(|(a, b)| a * b).sum();
        assert!((reward(&p, &z).unwrap() - want).abs() < 1e-12);
        assert!(reward(&p, &z[..2]).is_err());
        let wa = rng.gaussian_vec(2);
        let za = rng.gaussian_vec(2);
        p.w_adv = Matrix::row(wa.clone());
        assert!((adversary(&p, &za).unwrap() - (wa[0] * za[0] + wa[1] * za[1])).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_is_causal_first_affine_map() {
        let mut rng = Rng::new(6);
        let mut p = ModelParams::zeros(Dims::new(3, 1, 2));
        p.b_dec = Matrix::column(vec![0.1, 0.2, 0.3]);
        assert_eq!(reconstruct(&p, &[5.0], &[6.0, 7.0]).unwrap().as_slice(), &[0.1, 0.2, 0.3]);

        p.w_dec = Matrix::from_vec(3, 3, rng.gaussian_vec(9)).unwrap();
        let zc = [0.7];
        let znc = [-0.2, 1.3];
        let got = reconstruct(&p, &zc, &znc).unwrap();
        let cat = [0.7, -0.2, 1.3];
        for r in 0..3 {
            let want = p.b_dec.get(r, 0) + (0..3).map(|c| p.w_dec.get(r, c) * cat[c]).sum::<f64>();
            assert!((got[r] - want).abs() < 1e-12);
        }
        // column 0 of the decoder belongs to z_c
        p.w_dec = Matrix::zeros(3, 3);
        p.b_dec = Matrix::zeros(3, 1);
        p.w_dec.set(0, 0, 1.0);
        assert_eq!(reconstruct(&p, &[9.0], &[1.0, 1.0]).unwrap()[0], 9.0);
        assert!(reconstruct(&p, &[9.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn grl_is_identity_forward_and_scaled_backward() {
        let g = GradientReversal::new(1.0);
        for x in [0.0, -3.5, 1e300, f64::MIN_POSITIVE] {
            assert_eq!(g.forward(x).to_bits(), x.to_bits());
        }
        assert_eq!(g.backward(2.0), -2.0);
        assert_eq!(GradientReversal::new(0.5).backward(2.0), -1.0);
        assert_eq!(GradientReversal::new(0.0).backward(3.0), 0.0);
        assert_eq!(GradientReversal::pass_through().backward(3.0), 3.0);
    }

    #[test]
    fn reward_eval_is_deterministic_and_matches_zero_noise_train_path() {
        let mut rng = Rng::new(8);
        let p = init_params(Dims::new(12, 3, 4), &AblationConfig::FULL, &mut rng).unwrap();
        let t = triplet(12, 1);
        let a = reward_eval(&p, &t.winner.h).unwrap();
        let b = reward_eval(&p, &t.winner.h).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());

        let zero = TripletNoise {
            winner: SideNoise { c: Vector::zeros(3), nc: Some(Vector::zeros(4)) },
            loser: SideNoise { c: Vector::zeros(3), nc: Some(Vector::zeros(4)) },
        };
        let tr = forward_triplet(&p, &t, &AblationConfig::FULL, Noise::Replay(&zero)).unwrap();
        assert_eq!(tr.winner.reward.to_bits(), a.to_bits());
    }

    #[test]
    fn reward_ignores_the_non_causal_channel() {
        let mut rng = Rng::new(12);
        let p = init_params(Dims::new(12, 3, 4), &AblationConfig::FULL, &mut rng).unwrap();
        let h = rng.gaussian_vec(12);
        let base = reward_eval(&p, &h).unwrap();
        let mut q = p.clone();
        for m in [&mut q.w_mu_nc, &mut q.b_mu_nc, &mut q.w_lv_nc, &mut q.b_lv_nc, &mut q.w_adv] {
            for x in m.as_mut_slice() {
                *x += rng.gaussian();
            }
        }
        assert_eq!(reward_eval(&q, &h).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn eval_trace_uses_means() {
        let mut rng = Rng::new(5);
        let p = init_params(Dims::new(12, 3, 4), &AblationConfig::FULL, &mut rng).unwrap();
        let t = triplet(12, 2);
        let tr = forward_triplet(&p, &t, &AblationConfig::FULL, Noise::Eval).unwrap();
        assert_eq!(tr.mode, Mode::Eval);
        for s in [&tr.winner, &tr.loser] {
            assert!(s.eps_c.iter().all(|&e| e == 0.0));
            assert!(s.eps_nc.as_ref().unwrap().iter().all(|&e| e == 0.0));
            assert_eq!(s.z_c, s.post_c.mu);
            assert_eq!(s.z_nc.as_ref(), Some(&s.post_nc.as_ref().unwrap().mu));
        }
    }

    #[test]
    fn disabled_adversary_leaves_no_outputs() {
        let mut rng = Rng::new(5);
        let ab = Variant::WoGrl.ablation();
        let p = init_params(Dims::new(12, 3, 4), &ab, &mut rng).unwrap();
        let tr = forward_triplet(&p, &triplet(12, 3), &ab, Noise::Sample(&mut rng)).unwrap();
        assert!(tr.winner.adv.is_none() && tr.loser.adv.is_none());
        assert!(tr.winner.h_hat.is_some());
    }

    #[test]
    fn replay_reproduces_train_trace() {
        let mut rng = Rng::new(9);
        let p = init_params(Dims::new(12, 3, 4), &AblationConfig::FULL, &mut rng).unwrap();
        let t = triplet(12, 4);
        let tr = forward_triplet(&p, &t, &AblationConfig::FULL, Noise::Sample(&mut rng)).unwrap();
        assert!(tr.winner.eps_c.iter().any(|&e| e != 0.0));
        let noise = tr.noise();
        let again = forward_triplet(&p, &t, &AblationConfig::FULL, Noise::Replay(&noise)).unwrap();
        assert_eq!(tr, again);
    }

    #[test]
    fn unfactorized_trace_has_only_causal_channel() {
        let ab = Variant::WoFactorization.ablation();
        let mut rng = Rng::new(1);
        let p = init_params(Dims::new(12, 3, 4), &ab, &mut rng).unwrap();
        let tr = forward_triplet(&p, &triplet(12, 5), &ab, Noise::Sample(&mut rng)).unwrap();
        assert_eq!(tr.winner.z_c.len(), 3);
        assert!(tr.winner.z_nc.is_none() && tr.winner.adv.is_none() && tr.winner.h_hat.is_none());
    }

    #[test]
    fn standard_rm_is_a_linear_head_on_h() {
        let ab = Variant::StandardRm.ablation();
        let dims = Variant::StandardRm.dims(Dims::new(12, 3, 4));
        let mut rng = Rng::new(1);
        let p = init_params(dims, &ab, &mut rng).unwrap();
        let t = triplet(12, 6);
        let tr = forward_triplet(&p, &t, &ab, Noise::Sample(&mut rng)).unwrap();
        let direct: f64 = p.w_reward.as_slice().iter().zip(t.winner.h.iter()).map(|(w, x)| w * x).sum();
        assert!((tr.winner.reward - direct).abs() < 1e-12);
        assert!(tr.winner.eps_c.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn ablation_invariants_enforced() {
        let bad = AblationConfig { factorized: false, ..AblationConfig::FULL };
        assert!(bad.validate().is_err());
        for v in Variant::ALL {
            v.ablation().validate().unwrap();
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::ABLATIONS.len(), 7);
        assert!(Variant::parse("wo_gr").is_none());
    }
}
