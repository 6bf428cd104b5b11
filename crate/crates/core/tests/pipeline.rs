//! Training, attack and corruption behaviour on a small trained model.

use std::sync::OnceLock;

use epcache::attacks::{attack_dataset, within_ball};
use epcache::math::{self, Matrix};
use epcache::pipeline::{cache_for, Recipe};
use epcache::{
    eval, evaluate_corruption_robustness, generate_dataset, run_threat_scenario, train,
    AttackConfig, Backbone, Cache, CorruptionSuite, Dataset, EmbeddingLayerId, Error, GenConfig,
    RetrievalMethod, Split, ThreatModel, TrainConfig, DEFAULT_EPSILONS,
};

struct Fixture {
    train: Dataset,
    eval: Dataset,
    model: Backbone,
    cache: Cache,
}

fn small_recipe() -> Recipe {
    Recipe {
        data: GenConfig {
            per_class: 300,
            fractions: [0.6, 0.2, 0.2],
            ..GenConfig::default()
        },
        hidden: 32,
        epochs: 20,
        ..Recipe::default()
    }
}

fn concat(a: &Dataset, b: &Dataset) -> Dataset {
    let rows: Vec<&[f64]> = a
        .images()
        .iter_rows()
        .chain(b.images().iter_rows())
        .collect();
    let labels = a.labels().iter().chain(b.labels()).copied().collect();
    Dataset::new(
        Matrix::from_rows(&rows).unwrap(),
        labels,
        a.width(),
        a.classes(),
        Split::Test,
    )
    .unwrap()
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let recipe = small_recipe();
        let (train, val, test) = generate_dataset(&recipe.data).unwrap();
        let model = recipe.standard(&train).unwrap();
        let cache = cache_for(&model, &train, EmbeddingLayerId::HiddenRelu, 50.0).unwrap();
        Fixture {
            eval: concat(&val, &test),
            train,
            model,
            cache,
        }
    })
}

#[test]
fn training_lowers_loss_and_is_deterministic() {
    let recipe = small_recipe();
    let (train_set, _, _) = generate_dataset(&GenConfig {
        per_class: 40,
        ..recipe.data
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        ..recipe.train_config(Some(CorruptionSuite::default()))
    };
    let init = Backbone::init(train_set.input_dim(), 16, train_set.classes(), 4).unwrap();
    let a = train(init.clone(), &train_set, &cfg).unwrap();
    let b = train(init, &train_set, &cfg).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert!(a.final_loss <= a.initial_loss);
    assert_eq!(a.epoch_losses.len(), 5);
}

#[test]
fn single_class_training_converges() {
    let n = 16;
    let images =
        Matrix::from_vec(n, 16, (0..n * 16).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
    let data = Dataset::new(images, vec![1; n], 4, 3, Split::Train).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 0.5,
        batch_size: 4,
        seed: 0,
        augmentation: None,
    };
    let out = train(Backbone::init(16, 8, 3, 0).unwrap(), &data, &cfg).unwrap();
    for i in 0..n {
        assert!(out.model.predict_proba(data.image(i)).unwrap()[1] > 0.99);
    }
}

#[test]
fn every_attack_respects_the_budget() {
    let f = fixture();
    assert!(f.eval.len() >= 1000, "{}", f.eval.len());
    for &eps in &DEFAULT_EPSILONS {
        let cfg = AttackConfig::new(eps, 17).unwrap();
        let outcomes = attack_dataset(&f.model, &f.eval, &cfg).unwrap();
        for (i, o) in outcomes.iter().enumerate() {
            let x = f.eval.image(i);
            assert!(within_ball(x, &o.x_adv, eps), "sample {i} eps {eps}");
            assert_ne!(o.target, f.eval.label(i));
            if !o.success {
                assert_eq!(
                    o.x_adv.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}

#[test]
fn attacked_accuracy_does_not_grow_with_epsilon() {
    let f = fixture();
    let base = AttackConfig::new(0.01, 23).unwrap();
    let table = run_threat_scenario(
        ThreatModel::WhiteBox,
        &f.model,
        None,
        RetrievalMethod::Continuous,
        &f.eval,
        &DEFAULT_EPSILONS,
        &base,
    )
    .unwrap();
    let accs: Vec<f64> = table.rows.iter().map(|r| r.top1).collect();
    assert_eq!(accs[0], eval::accuracy(&f.model, &f.eval).unwrap());
    for w in accs.windows(2) {
        assert!(w[1] <= w[0] + 0.01, "{accs:?}");
    }
}

#[test]
fn gray_box_inputs_are_the_white_box_backbone_inputs() {
    let f = fixture();
    let data = f.eval.head(200);
    let cfg = AttackConfig::new(0.06, 31).unwrap();
    let first = attack_dataset(&f.model, &data, &cfg).unwrap();
    let again = attack_dataset(&f.model, &data, &cfg).unwrap();
    assert_eq!(first, again);

    let gray = run_threat_scenario(
        ThreatModel::GrayBox,
        &f.model,
        Some(&f.cache),
        RetrievalMethod::Continuous,
        &data,
        &[0.06],
        &cfg,
    )
    .unwrap();
    let cm = epcache::CacheModel::new(&f.model, &f.cache, RetrievalMethod::Continuous).unwrap();
    let inputs: Vec<Vec<f64>> = first.into_iter().map(|o| o.x_adv).collect();
    let expected = eval::accuracy_on(&cm, &inputs, data.labels()).unwrap();
    assert_eq!(gray.get("cache", "gray", 0.06), Some(expected));
    assert_eq!(
        gray.get("cache", "gray", 0.0),
        Some(eval::accuracy(&cm, &data).unwrap())
    );
}

#[test]
fn scenario_preconditions() {
    let f = fixture();
    let data = f.eval.head(10);
    let cfg = AttackConfig::new(0.06, 1).unwrap();
    let gray = run_threat_scenario(
        ThreatModel::GrayBox,
        &f.model,
        None,
        RetrievalMethod::Continuous,
        &data,
        &[0.06],
        &cfg,
    );
    assert!(matches!(gray, Err(Error::Config(_))));
    let black = run_threat_scenario(
        ThreatModel::BlackBox(&f.model),
        &f.model,
        Some(&f.cache),
        RetrievalMethod::Continuous,
        &data,
        &[0.06],
        &cfg,
    );
    assert!(matches!(black, Err(Error::Config(_))));
    let empty = run_threat_scenario(
        ThreatModel::WhiteBox,
        &f.model,
        None,
        RetrievalMethod::Continuous,
        &data,
        &[],
        &cfg,
    );
    assert!(empty.is_err());
}

#[test]
fn black_box_scores_both_models() {
    let f = fixture();
    let data = f.eval.head(100);
    let recipe = small_recipe();
    let surrogate = train(
        Backbone::init(f.train.input_dim(), 16, f.train.classes(), 99).unwrap(),
        &f.train.head(500),
        &TrainConfig {
            epochs: 3,
            seed: 99,
            ..recipe.train_config(None)
        },
    )
    .unwrap()
    .model;
    let table = run_threat_scenario(
        ThreatModel::BlackBox(&surrogate),
        &f.model,
        Some(&f.cache),
        RetrievalMethod::Knn(50),
        &data,
        &[0.02, 0.06],
        &AttackConfig::new(0.06, 2).unwrap(),
    )
    .unwrap();
    assert_eq!(table.rows.len(), 6);
    assert!(table.get("backbone", "black", 0.06).is_some());
    assert!(table.get("cache", "black", 0.06).is_some());
}

#[test]
fn reference_against_itself_has_unit_mce() {
    let f = fixture();
    let data = f.eval.head(150);
    let suite = CorruptionSuite::default();
    let report = evaluate_corruption_robustness(&f.model, &f.model, &suite, &data).unwrap();
    assert_eq!(report.mce, 1.0);
    assert!(report.ce_per_corruption.iter().all(|e| e.ce == 1.0));
}

#[test]
fn weakest_corruptions_exceed_the_largest_adversarial_budget() {
    let f = fixture();
    let data = f.eval.head(200);
    let suite = CorruptionSuite::default();
    let mut total = 0.0;
    let mut count = 0;
    for which in 0..suite.len() {
        let corrupted = suite.corrupt_dataset(which, 1, &data).unwrap();
        for (i, img) in corrupted.iter().enumerate() {
            let x = data.image(i);
            total += math::linf_dist(img, x) / math::linf_norm(x);
            count += 1;
        }
    }
    let mean = total / count as f64;
    println!("mean normalized l-inf size of severity-1 corruptions: {mean:.3}");
    assert!(mean > 0.1, "{mean}");
}
