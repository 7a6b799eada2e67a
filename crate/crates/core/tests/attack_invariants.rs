use proptest::prelude::*;
use robustlab::attacks::*;
use robustlab::datasets::mini_images_n;
use robustlab::spatial::ThreatBudget;
use robustlab::{Architecture, Image, ImageShape, Model, RngStream};

fn setup(seed: u64) -> (Model, Image, usize) {
    let data = mini_images_n(ImageShape::new(1, 10, 10), 10, seed);
    let model = Model::new(Architecture::Mlp, data.shape(), 10, &mut RngStream::new(seed, 7)).unwrap();
    let i = (seed % 10) as usize;
    (model, data.image(i), data.label(i))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_output_is_contained(seed in 0u64..1000, eps in 0.0f64..0.4, theta in 0.0f64..40.0, shift in 0.0f64..4.0, start in any::<bool>()) {
        let (model, img, label) = setup(seed);
        let budget = ThreatBudget::new(eps, theta, shift, shift).unwrap();
        let cfg = PgdConfig { random_start: start, ..PgdConfig::new(3) };
        let target = LossTarget::CrossEntropy { label };
        let res = worst_on_worst(&model, &img, &target, &budget, RtSearch::WorstOfK(3), &cfg, &mut RngStream::new(seed, 0)).unwrap();
        prop_assert!(res.is_contained(&img, &budget).unwrap());
        let res = union_max(&model, &img, &target, &budget, &cfg, RtSearch::WorstOfK(3), &mut RngStream::new(seed, 0)).unwrap();
        prop_assert!(res.is_contained(&img, &budget).unwrap());
    }

    #[test]
    fn pgd_never_decreases_below_anchor_loss_without_restart(seed in 0u64..1000) {
        let (model, img, label) = setup(seed);
        let target = LossTarget::CrossEntropy { label };
        let clean = evaluate_loss(&model, &img, &target).unwrap().0;
        let res = pgd(&model, &img, &target, 0.2, &PgdConfig::new(5), &mut RngStream::new(seed, 0)).unwrap();
        prop_assert!(res.image.linf_distance(&img) <= 0.2 + CONTAINMENT_TOL);
        prop_assert!(res.loss >= clean - 1e-3);
    }
}

#[test]
fn evaluation_is_deterministic_and_ordered() {
    let data = mini_images_n(ImageShape::new(1, 10, 10), 12, 1);
    let model = Model::new(Architecture::Linear, data.shape(), 10, &mut RngStream::new(0, 0)).unwrap();
    let spec = AttackSpec::Composition {
        budget: ThreatBudget::mnist(),
        pgd: PgdConfig::new(3),
        search: RtSearch::WorstOfK(4),
    };
    let a = evaluate_robust_accuracy(&model, &data, &spec, 5).unwrap();
    let b = evaluate_robust_accuracy(&model, &data, &spec, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.attack_name, "PGD∘RT");
    assert!(a.records.iter().enumerate().all(|(i, r)| r.example_id == i));
    let nat = evaluate_robust_accuracy(&model, &data, &AttackSpec::Natural, 5).unwrap();
    assert!(a.accuracy <= nat.accuracy);
}

#[test]
fn suite_names_follow_table_columns() {
    let names: Vec<String> = AttackSpec::full_suite(ThreatBudget::mnist(), PgdConfig::mnist()).iter().map(|a| a.name()).collect();
    assert_eq!(names, ["PGD∘RT", "PGD∪RT", "PGD", "RT"]);
    let names: Vec<String> = AttackSpec::full_suite(ThreatBudget::mnist(), PgdConfig::mnist().with_restarts(5)).iter().map(|a| a.name()).collect();
    assert_eq!(names, ["PGD-R∘RT", "PGD-R∪RT", "PGD-R", "RT"]);
}
