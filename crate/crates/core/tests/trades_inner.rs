use robustlab::attacks::{evaluate_loss, LossTarget};
use robustlab::datasets::mini_images_n;
use robustlab::models::kl_divergence;
use robustlab::trades::{inner_maximize, trades_loss, InnerConfig, OptimizerConfig, TradesConfig, Variant};
use robustlab::{Architecture, ImageShape, Model, RngStream, ThreatBudget};

fn config(variant: Variant) -> TradesConfig {
    TradesConfig {
        variant,
        beta: 6.0,
        budget: ThreatBudget::mnist(),
        inner: InnerConfig::default(),
        optimizer: OptimizerConfig::default(),
        seed: 0,
    }
}

#[test]
fn inner_solutions_stay_in_budget_and_raise_kl() {
    let data = mini_images_n(ImageShape::new(1, 14, 14), 60, 3);
    let model = Model::new(Architecture::Mlp, data.shape(), 10, &mut RngStream::new(3, 0)).unwrap();
    let mut composition_beats_rt = 0;
    for i in 0..data.len() {
        let img = data.image(i);
        let natural = model.forward_image(&img).unwrap();
        let target = LossTarget::Kl { natural: natural.clone() };
        let mut kls = Vec::new();
        for v in [Variant::Linf, Variant::Rt, Variant::Union, Variant::Composition] {
            let cfg = config(v);
            let adv = inner_maximize(&model, &img, &natural, v, &cfg, &mut RngStream::new(i as u64, 1)).unwrap();
            assert!(adv.data().iter().all(|p| (0.0..=1.0).contains(p)));
            let kl = evaluate_loss(&model, &adv, &target).unwrap().0;
            assert!(kl >= -1e-6, "{v:?}: {kl}");
            kls.push(kl);
        }
        if kls[3] >= kls[1] {
            composition_beats_rt += 1;
        }
        // The union's ℓ∞ arm replays the same stream as the plain ℓ∞ run.
        assert!(kls[2] >= kls[0], "{kls:?}");
    }
    assert!(composition_beats_rt * 10 >= data.len() * 9, "{composition_beats_rt}");
}

#[test]
fn loss_decomposes_into_natural_plus_weighted_kl() {
    let data = mini_images_n(ImageShape::new(1, 14, 14), 8, 4);
    let model = Model::new(Architecture::Linear, data.shape(), 10, &mut RngStream::new(4, 0)).unwrap();
    let images: Vec<_> = (0..data.len()).map(|i| data.image(i)).collect();
    for v in [Variant::Natural, Variant::Linf, Variant::Rt, Variant::All] {
        let cfg = config(v);
        let out = trades_loss(&model, &images, data.labels(), &cfg, &RngStream::new(9, 0)).unwrap();
        let expected = out.natural_loss + if v == Variant::Natural { 0.0 } else { cfg.beta * out.robust_loss };
        assert!((out.loss - expected).abs() <= 1e-4 * expected.abs().max(1.0), "{v:?}");
        assert!(out.robust_loss >= -1e-6);
        let counted: usize = out.variant_counts.iter().sum();
        match v {
            Variant::Natural => assert_eq!(counted, 0),
            _ => assert_eq!(counted, images.len()),
        }
    }
    let nat = model.forward_image(&images[0]).unwrap();
    assert_eq!(kl_divergence(&nat, &nat), 0.0);
}
