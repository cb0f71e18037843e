use liftlab::backbone::BackboneSpec;
use liftlab::data::Image;
use liftlab::head::HeadKind;
use liftlab::numerics::grad_check;
use liftlab::objective::estimate_prior;
use liftlab::peft::{FineTunePolicy, ScaleMode};
use liftlab::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> BackboneSpec {
    BackboneSpec::new(2, 16, 2, 2, 4, 3).unwrap()
}

fn policies() -> Vec<FineTunePolicy> {
    vec![
        FineTunePolicy::Frozen,
        FineTunePolicy::ClassifierOnly,
        FineTunePolicy::Full,
        FineTunePolicy::Partial { k: 1 },
        FineTunePolicy::Mask { alpha: 0.1, seed: 3 },
        FineTunePolicy::BitFit,
        FineTunePolicy::Vpt { prompts: 2 },
        FineTunePolicy::Adapter { r: Some(2) },
        FineTunePolicy::Lora { r: Some(2) },
        FineTunePolicy::AdaptFormer { r: Some(2), scale: ScaleMode::Learnable },
    ]
}

fn images(seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3).map(|_| Image::new(4, 4, 3, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).collect()
}

#[test]
fn every_policy_matches_finite_differences() {
    let prior = estimate_prior(&[6, 3, 1]).unwrap();
    let offsets = prior.log_prior();
    for (i, policy) in policies().into_iter().enumerate() {
        for head in [HeadKind::cosine(), HeadKind::Linear] {
            let ims = images(i as u64);
            let refs: Vec<&Image> = ims.iter().collect();
            let labels = [0, 1, 2];
            let base = Model::<f64>::new(spec(), head, 3, policy, 11 + i as u64).unwrap();
            let mut model = (0..10_000u64)
                .map(|s| {
                    let mut m = base.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    for (_, p) in m.store.iter_mut() {
                        for v in p.value.data_mut() {
                            *v += rng.random_range(-0.3..0.3);
                        }
                    }
                    m
                })
                .find(|m| {
                    let mut g = liftlab::numerics::Graph::no_grad(&m.store);
                    m.loss_var(&mut g, &refs, &labels, &offsets).unwrap();
                    g.relu_margin().is_none_or(|d| d >= 1e-3)
                })
                .expect("a point away from every ReLU kink");
            let m = model.clone();
            let report = grad_check(&mut model.store, |g| m.loss_var(g, &refs, &labels, &offsets), 1e-4, 1e-4).unwrap();
            println!("{policy} {head}: max rel err {:.3e} over {} entries", report.max_rel_error, report.checked_entries);
            assert!(report.pass, "{policy} {head}: {:?}", report.per_param.iter().filter(|(_, e)| *e > 1e-4).collect::<Vec<_>>());
        }
    }
}
