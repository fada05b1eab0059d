//! Loss terms of the training objective and their analytic gradients.
//!
//! ```text
//! total = pred * L_pref + kl_c * L_KL^c + rec * L_rec + kl_nc * L_KL^nc + adv * L_adv
//! ```
//!
//! The adversarial term enters the forward scalar with a plus sign. The
//! minimax is realized in `backward`: the adversary head descends on
//! `L_adv`, while the encoder receives the adversarial gradient through a
//! gradient reversal layer and therefore ascends on it.
//!
//! Batch reduction: every term is a mean over triplets. Both KL terms sum
//! the winner and loser KLs of a triplet; the reconstruction term averages
//! the two sides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::PreferenceTriplet;
use crate::model::{
    forward_triplet, AblationConfig, ForwardTrace, GaussianPosterior, GradientReversal, ModelError, ModelParams, Noise,
    SideTrace, TripletNoise, LOGVAR_MAX, LOGVAR_MIN,
};
use crate::numkernel::{NumError, ParamSet};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("batch has {traces} traces but {triplets} triplets")]
    BatchMismatch { traces: usize, triplets: usize },
    #[error("non-finite gradient from term {term} in parameter {param}")]
    NonFinite { term: Term, param: String },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Pref,
    KlC,
    Adv,
    KlNc,
    Rec,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Pref, Term::KlC, Term::Adv, Term::KlNc, Term::Rec];
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Term::Pref => "l_pref",
            Term::KlC => "l_kl_c",
            Term::Adv => "l_adv",
            Term::KlNc => "l_kl_nc",
            Term::Rec => "l_rec",
        })
    }
}

/// Coefficients of the objective. Defaults are the reference training values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pred: f64,
    pub kl_c: f64,
    pub kl_nc: f64,
    pub adv: f64,
    pub rec: f64,
    pub grl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pred: 1.0, kl_c: 0.001, kl_nc: 0.001, adv: 0.05, rec: 0.001, grl: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("pred", self.pred),
            ("kl_c", self.kl_c),
            ("kl_nc", self.kl_nc),
            ("adv", self.adv),
            ("rec", self.rec),
            ("grl", self.grl),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("loss weight {name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Only `term` weighted (by 1 unless it already had a weight); every
    /// other coefficient zero. `grl` is kept.
    pub fn isolate(&self, term: Term) -> LossWeights {
        let mut w = LossWeights { pred: 0.0, kl_c: 0.0, kl_nc: 0.0, adv: 0.0, rec: 0.0, grl: self.grl };
        let pick = |v: f64| if v > 0.0 { v } else { 1.0 };
        match term {
            Term::Pref => w.pred = pick(self.pred),
            Term::KlC => w.kl_c = pick(self.kl_c),
            Term::Adv => w.adv = pick(self.adv),
            Term::KlNc => w.kl_nc = pick(self.kl_nc),
            Term::Rec => w.rec = pick(self.rec),
        }
        w
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pref: f64,
    pub l_kl_c: f64,
    pub l_adv: f64,
    pub l_kl_nc: f64,
    pub l_rec: f64,
    pub total: f64,
    pub batch: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-log sigmoid(r_w - r_l)`.
pub fn bt_loss(r_w: f64, r_l: f64) -> f64 {
    softplus(-(r_w - r_l))
}

/// Derivative of [`bt_loss`] with respect to `r_w` (the `r_l` derivative is its negation).
pub fn bt_grad(r_w: f64, r_l: f64) -> f64 {
    -sigmoid(-(r_w - r_l))
}

/// Adversarial preference loss: the same form as [`bt_loss`] on adversary outputs.
pub fn adv_loss(a_w: f64, a_l: f64) -> f64 {
    bt_loss(a_w, a_l)
}

/// `KL(q || N(0, I)) = 0.5 * sum(mu^2 + exp(logvar) - logvar - 1)`.
pub fn kl_standard_normal(q: &GaussianPosterior) -> f64 {
    0.5 * q.mu.iter().zip(q.logvar.iter()).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>()
}

/// Squared Euclidean distance.
pub fn rec_loss(h: &[f64], h_hat: &[f64]) -> Result<f64, NumError> {
    if h.len() != h_hat.len() {
        return Err(NumError::Shape {
            op: "rec_loss",
            expected: format!("length {}", h.len()),
            found: format!("length {}", h_hat.len()),
        });
    }
    Ok(h.iter().zip(h_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Unweighted per-triplet terms; disabled terms are exactly zero.
pub fn triplet_terms(
    trace: &ForwardTrace,
    t: &PreferenceTriplet,
    ab: &AblationConfig,
) -> Result<LossBreakdown, LossError> {
    if trace.ablation != *ab {
        return Err(ModelError::TraceMismatch.into());
    }
    let (w, l) = (&trace.winner, &trace.loser);
    let mut out = LossBreakdown { batch: 1, ..LossBreakdown::default() };
    out.l_pref = bt_loss(w.reward, l.reward);
    if ab.use_kl_c {
        out.l_kl_c = kl_standard_normal(&w.post_c) + kl_standard_normal(&l.post_c);
    }
    if ab.factorized {
        if ab.use_kl_nc {
            out.l_kl_nc = kl_nc_of(w)? + kl_nc_of(l)?;
        }
        if ab.use_adversary {
            out.l_adv = adv_loss(adv_of(w)?, adv_of(l)?);
        }
        if ab.use_reconstruction {
            out.l_rec = 0.5 * (rec_loss(&t.winner.h, h_hat_of(w)?)? + rec_loss(&t.loser.h, h_hat_of(l)?)?);
        }
    }
    Ok(out)
}

fn missing(what: &str) -> LossError {
    ModelError::Config(format!("trace is missing {what}")).into()
}

fn kl_nc_of(s: &SideTrace) -> Result<f64, LossError> {
    s.post_nc.as_ref().map(kl_standard_normal).ok_or_else(|| missing("the non-causal posterior"))
}

fn adv_of(s: &SideTrace) -> Result<f64, LossError> {
    s.adv.ok_or_else(|| missing("adversary outputs"))
}

fn h_hat_of(s: &SideTrace) -> Result<&[f64], LossError> {
    s.h_hat.as_deref().ok_or_else(|| missing("the reconstruction"))
}

fn check_batch(traces: &[ForwardTrace], triplets: &[&PreferenceTriplet]) -> Result<(), LossError> {
    if traces.len() != triplets.len() {
        return Err(LossError::BatchMismatch { traces: traces.len(), triplets: triplets.len() });
    }
    if traces.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(())
}

/// Batch-mean terms and the weighted total.
pub fn total_loss(
    traces: &[ForwardTrace],
    triplets: &[&PreferenceTriplet],
    w: &LossWeights,
    ab: &AblationConfig,
) -> Result<LossBreakdown, LossError> {
    check_batch(traces, triplets)?;
    let n = traces.len() as f64;
    let mut out = LossBreakdown { batch: traces.len(), ..LossBreakdown::default() };
    for (tr, t) in traces.iter().zip(triplets) {
        let terms = triplet_terms(tr, t, ab)?;
        out.l_pref += terms.l_pref / n;
        out.l_kl_c += terms.l_kl_c / n;
        out.l_adv += terms.l_adv / n;
        out.l_kl_nc += terms.l_kl_nc / n;
        out.l_rec += terms.l_rec / n;
    }
    out.total =
        w.pred * out.l_pref + w.kl_c * out.l_kl_c + w.rec * out.l_rec + w.kl_nc * out.l_kl_nc + w.adv * out.l_adv;
    Ok(out)
}

/// Gradients of the objective with gradient reversal of strength `w.grl`
/// on the adversarial branch.
pub fn backward(
    params: &ModelParams,
    traces: &[ForwardTrace],
    triplets: &[&PreferenceTriplet],
    w: &LossWeights,
    ab: &AblationConfig,
) -> Result<ModelParams, LossError> {
    backward_with(params, traces, triplets, w, ab, GradientReversal::new(w.grl))
}

/// As [`backward`], with an explicit reversal layer (use
/// [`GradientReversal::pass_through`] for the plain composition).
pub fn backward_with(
    params: &ModelParams,
    traces: &[ForwardTrace],
    triplets: &[&PreferenceTriplet],
    w: &LossWeights,
    ab: &AblationConfig,
    grl: GradientReversal,
) -> Result<ModelParams, LossError> {
    let grads = accumulate(params, traces, triplets, w, ab, grl, &Term::ALL)?;
    if let Some((param, _)) = grads.first_non_finite() {
        for term in Term::ALL {
            let g = accumulate(params, traces, triplets, w, ab, grl, &[term])?;
            if let Some((param, _)) = g.first_non_finite() {
                return Err(LossError::NonFinite { term, param });
            }
        }
        return Err(LossError::NonFinite { term: Term::Pref, param });
    }
    Ok(grads)
}

/// Gradients restricted to a subset of terms.
pub fn backward_terms(
    params: &ModelParams,
    traces: &[ForwardTrace],
    triplets: &[&PreferenceTriplet],
    w: &LossWeights,
    ab: &AblationConfig,
    grl: GradientReversal,
    terms: &[Term],
) -> Result<ModelParams, LossError> {
    accumulate(params, traces, triplets, w, ab, grl, terms)
}

/// Gradients with respect to the (pre-clamp) encoder outputs of one side.
struct SideGrad {
    mu_c: Vec<f64>,
    lv_c: Vec<f64>,
    mu_nc: Vec<f64>,
    lv_nc: Vec<f64>,
}

impl SideGrad {
    fn new(d_c: usize, d_nc: usize) -> Self {
        SideGrad { mu_c: vec![0.0; d_c], lv_c: vec![0.0; d_c], mu_nc: vec![0.0; d_nc], lv_nc: vec![0.0; d_nc] }
    }
}

fn accumulate(
    params: &ModelParams,
    traces: &[ForwardTrace],
    triplets: &[&PreferenceTriplet],
    w: &LossWeights,
    ab: &AblationConfig,
    grl: GradientReversal,
    terms: &[Term],
) -> Result<ModelParams, LossError> {
    check_batch(traces, triplets)?;
    let on = |t: Term| terms.contains(&t);
    let inv_n = 1.0 / traces.len() as f64;
    let dims = params.dims;
    let mut g = params.zeros_like();

    for (tr, t) in traces.iter().zip(triplets) {
        if tr.ablation != *ab {
            return Err(ModelError::TraceMismatch.into());
        }
        let sides = [(&tr.winner, &t.winner.h), (&tr.loser, &t.loser.h)];
        let mut sg = [SideGrad::new(dims.d_c, dims.d_nc), SideGrad::new(dims.d_c, dims.d_nc)];
        // d z_c and d z_nc per side
        let mut dz_c = [vec![0.0; dims.d_c], vec![0.0; dims.d_c]];
        let mut dz_nc = [vec![0.0; dims.d_nc], vec![0.0; dims.d_nc]];

        if on(Term::Pref) && w.pred != 0.0 {
            let d = w.pred * bt_grad(tr.winner.reward, tr.loser.reward) * inv_n;
            for (i, (s, dr)) in [(&tr.winner, d), (&tr.loser, -d)].into_iter().enumerate() {
                g.w_reward.add_vec(&s.z_c, dr)?;
                for (dz, wr) in dz_c[i].iter_mut().zip(params.w_reward.as_slice()) {
                    *dz += dr * wr;
                }
            }
        }

        if ab.factorized && ab.use_adversary && on(Term::Adv) && w.adv != 0.0 {
            let (aw, al) = (adv_of(&tr.winner)?, adv_of(&tr.loser)?);
            let d = w.adv * bt_grad(aw, al) * inv_n;
            for (i, (s, da)) in [(&tr.winner, d), (&tr.loser, -d)].into_iter().enumerate() {
                let z_nc = s.z_nc.as_ref().ok_or_else(|| missing("z_nc"))?;
                // the head itself descends on L_adv
                g.w_adv.add_vec(z_nc, da)?;
                for (dz, wa) in dz_nc[i].iter_mut().zip(params.w_adv.as_slice()) {
                    *dz += grl.backward(da * wa);
                }
            }
        }

        if ab.factorized && ab.use_reconstruction && on(Term::Rec) && w.rec != 0.0 {
            for (i, (s, h)) in sides.iter().enumerate() {
                let h_hat = h_hat_of(s)?;
                let z_nc = s.z_nc.as_ref().ok_or_else(|| missing("z_nc"))?;
                // d/d h_hat of rec * 0.5 * |h - h_hat|^2 / n
                let dh: Vec<f64> = h_hat.iter().zip(h.iter()).map(|(a, b)| w.rec * (a - b) * inv_n).collect();
                let cat = s.z_c.concat(z_nc);
                g.w_dec.add_outer(&dh, &cat, 1.0)?;
                g.b_dec.add_vec(&dh, 1.0)?;
                let dcat = params.w_dec.matvec_t(&dh)?;
                for (a, b) in dz_c[i].iter_mut().zip(&dcat[..dims.d_c]) {
                    *a += b;
                }
                for (a, b) in dz_nc[i].iter_mut().zip(&dcat[dims.d_c..]) {
                    *a += b;
                }
            }
        }

        if ab.identity_encoder {
            continue;
        }

        for (i, (s, _)) in sides.iter().enumerate() {
            // reparameterization: z = mu + exp(lv / 2) * eps
            push_reparam(&s.post_c, &s.eps_c, &dz_c[i], &mut sg[i].mu_c, &mut sg[i].lv_c);
            if let (Some(post), Some(eps)) = (&s.post_nc, &s.eps_nc) {
                push_reparam(post, eps, &dz_nc[i], &mut sg[i].mu_nc, &mut sg[i].lv_nc);
            }
            if ab.use_kl_c && on(Term::KlC) && w.kl_c != 0.0 {
                push_kl(&s.post_c, w.kl_c * inv_n, &mut sg[i].mu_c, &mut sg[i].lv_c);
            }
            if ab.factorized && ab.use_kl_nc && on(Term::KlNc) && w.kl_nc != 0.0 {
                let post = s.post_nc.as_ref().ok_or_else(|| missing("the non-causal posterior"))?;
                push_kl(post, w.kl_nc * inv_n, &mut sg[i].mu_nc, &mut sg[i].lv_nc);
            }
            mask_clamped(&s.raw_lv_c, &mut sg[i].lv_c);
            if let Some(raw) = &s.raw_lv_nc {
                mask_clamped(raw, &mut sg[i].lv_nc);
            }
        }

        for (i, (_, h)) in sides.iter().enumerate() {
            g.w_mu_c.add_outer(&sg[i].mu_c, h, 1.0)?;
            g.b_mu_c.add_vec(&sg[i].mu_c, 1.0)?;
            g.w_lv_c.add_outer(&sg[i].lv_c, h, 1.0)?;
            g.b_lv_c.add_vec(&sg[i].lv_c, 1.0)?;
            if ab.factorized {
                g.w_mu_nc.add_outer(&sg[i].mu_nc, h, 1.0)?;
                g.b_mu_nc.add_vec(&sg[i].mu_nc, 1.0)?;
                g.w_lv_nc.add_outer(&sg[i].lv_nc, h, 1.0)?;
                g.b_lv_nc.add_vec(&sg[i].lv_nc, 1.0)?;
            }
        }
    }
    Ok(g)
}

fn push_reparam(q: &GaussianPosterior, eps: &[f64], dz: &[f64], d_mu: &mut [f64], d_lv: &mut [f64]) {
    for j in 0..dz.len() {
        d_mu[j] += dz[j];
        d_lv[j] += dz[j] * eps[j] * 0.5 * (0.5 * q.logvar[j]).exp();
    }
}

fn push_kl(q: &GaussianPosterior, scale: f64, d_mu: &mut [f64], d_lv: &mut [f64]) {
    for j in 0..q.dim() {
        d_mu[j] += scale * q.mu[j];
        d_lv[j] += scale * 0.5 * (q.logvar[j].exp() - 1.0);
    }
}

fn mask_clamped(raw: &[f64], d_lv: &mut [f64]) {
    for (d, r) in d_lv.iter_mut().zip(raw) {
        if *r < LOGVAR_MIN || *r > LOGVAR_MAX {
            *d = 0.0;
        }
    }
}

/// Batch objective at `probe` under frozen noise, without gradient reversal.
pub fn replay_loss(
    probe: &ModelParams,
    triplets: &[&PreferenceTriplet],
    noise: &[TripletNoise],
    w: &LossWeights,
    ab: &AblationConfig,
) -> Result<LossBreakdown, LossError> {
    let traces = triplets
        .iter()
        .zip(noise)
        .map(|(t, n)| forward_triplet(probe, t, ab, Noise::Replay(n)))
        .collect::<Result<Vec<_>, _>>()?;
    total_loss(&traces, triplets, w, ab)
}

/// A scalar whose ordinary gradient at `probe == base` equals what
/// [`backward`] computes: the adversary head sees `+adv * L_adv`, the
/// encoder sees `-grl * adv * L_adv`. The stop-gradient split is realized
/// by evaluating `L_adv` once with the encoder frozen at `base` and once
/// with the head frozen at `base`.
///
/// Returned as additive parts (rest of the objective, head side, encoder
/// side); the surrogate is their sum.
pub fn reversal_surrogate(
    probe: &ModelParams,
    base: &ModelParams,
    triplets: &[&PreferenceTriplet],
    noise: &[TripletNoise],
    w: &LossWeights,
    ab: &AblationConfig,
) -> Result<[f64; 3], LossError> {
    let rest = replay_loss(probe, triplets, noise, &LossWeights { adv: 0.0, ..*w }, ab)?.total;
    if !(ab.factorized && ab.use_adversary) || w.adv == 0.0 {
        return Ok([rest, 0.0, 0.0]);
    }
    let mut head_only = base.clone();
    head_only.w_adv = probe.w_adv.clone();
    let mut encoder_only = probe.clone();
    encoder_only.w_adv = base.w_adv.clone();
    let l_head = replay_loss(&head_only, triplets, noise, w, ab)?.l_adv;
    let l_enc = replay_loss(&encoder_only, triplets, noise, w, ab)?.l_adv;
    Ok([rest, w.adv * l_head, -w.adv * w.grl * l_enc])
}
