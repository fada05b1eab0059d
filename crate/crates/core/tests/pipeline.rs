use causalrm::datagen::{read_dataset, write_dataset, GenConfig, Generator, PreferenceTriplet, Split};
use causalrm::evaluation::{evaluate, EvalOptions};
use causalrm::losses::{backward_terms, kl_standard_normal, LossWeights, Term};
use causalrm::model::{
    forward_triplet, init_params, read_checkpoint, reward_eval, write_checkpoint, AblationConfig, Dims,
    GaussianPosterior, GradientReversal, Noise, ENCODER_PARAMS,
};
use causalrm::numkernel::{Rng, Vector};
use causalrm::training::{first_batch, train, TrainConfig};
use proptest::prelude::*;

fn small_gen(seed: u64) -> GenConfig {
    GenConfig { embed_dim: 16, n_train: 120, n_test: 60, seed, ..GenConfig::default() }
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig { dims: Dims::new(16, 3, 4), epochs: 2, batch_size: 16, seed, ..TrainConfig::default() }
}

#[test]
fn checkpoint_on_disk_scores_like_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let g = Generator::new(&small_gen(3)).unwrap();
    let data_path = dir.path().join("train.jsonl");
    write_dataset(&g.generate_split(Split::Train), &data_path).unwrap();
    let ds = read_dataset(&data_path).unwrap();
    let out = train(&ds, &small_train(3)).unwrap();

    let ck_path = dir.path().join("m.ckpt");
    write_checkpoint(out.final_checkpoint(), &ck_path).unwrap();
    let loaded = read_checkpoint(&ck_path).unwrap();
    let test = g.generate_split(Split::OodTest);
    let opts = EvalOptions::default();
    assert_eq!(
        evaluate("m", &loaded, &test, &opts).unwrap(),
        evaluate("m", out.final_checkpoint(), &test, &opts).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_the_prior(
        mu in prop::collection::vec(-5.0f64..5.0, 1..6),
        lv_seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(lv_seed);
        let lv: Vec<f64> = mu.iter().map(|_| 6.0 * rng.uniform() - 3.0).collect();
        let off_prior = mu.iter().zip(&lv).any(|(m, l)| *m != 0.0 || *l != 0.0);
        let kl = kl_standard_normal(&GaussianPosterior { mu: Vector::from(mu), logvar: Vector::from(lv) });
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl > 0.0, off_prior);
    }

    #[test]
    fn reward_never_reads_the_non_causal_encoder(seed in any::<u64>(), scale in 0.1f64..100.0) {
        let dims = Dims::new(12, 3, 5);
        let p = init_params(dims, &AblationConfig::FULL, &mut Rng::new(seed)).unwrap();
        let mut q = p.clone();
        let mut rng = Rng::new(seed ^ 0x5eed);
        for name in ["w_mu_nc", "b_mu_nc", "w_lv_nc", "b_lv_nc", "w_adv", "w_dec", "b_dec"] {
            for x in q.tensor_mut(name).unwrap().as_mut_slice() {
                *x = scale * rng.gaussian();
            }
        }
        let h = rng.gaussian_vec(12);
        prop_assert_eq!(reward_eval(&p, &h).unwrap().to_bits(), reward_eval(&q, &h).unwrap().to_bits());
    }

    #[test]
    fn reversal_scales_only_the_encoder_branch(seed in 0u64..1000, lambda in 0.0f64..5.0) {
        let ds = Generator::new(&small_gen(seed)).unwrap().generate_split(Split::Train);
        let (params, batch, noise) = first_batch(&ds, &small_train(seed)).unwrap();
        let ab = AblationConfig::FULL;
        let refs: Vec<&PreferenceTriplet> = batch.iter().collect();
        let traces: Vec<_> = refs.iter().zip(&noise).map(|(t, n)| forward_triplet(&params, t, &ab, Noise::Replay(n)).unwrap()).collect();
        let w = LossWeights::default();
        let rev = backward_terms(&params, &traces, &refs, &w, &ab, GradientReversal::new(lambda), &[Term::Adv]).unwrap();
        let plain = backward_terms(&params, &traces, &refs, &w, &ab, GradientReversal::pass_through(), &[Term::Adv]).unwrap();
        prop_assert_eq!(&rev.w_adv, &plain.w_adv);
        for name in ENCODER_PARAMS {
            for (a, b) in rev.tensor(name).unwrap().as_slice().iter().zip(plain.tensor(name).unwrap().as_slice()) {
                prop_assert!((a + lambda * b).abs() <= 1e-12 * (lambda * b).abs().max(1e-300), "{name}: {a} vs {}", -lambda * b);
            }
        }
    }

    #[test]
    fn datasets_round_trip_through_files(seed in any::<u64>(), split_idx in 0usize..4) {
        let split = [Split::Train, Split::IdTest, Split::OodTest, Split::HackedTest][split_idx];
        let ds = Generator::new(&GenConfig { n_train: 20, n_test: 20, ..small_gen(seed) }).unwrap().generate_split(split);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&ds, &path).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), ds);
    }
}
