mod common;

use dpte_autograd::{Binding, Mode, Tensor, Var};
use dptenet::losses::*;
use dptenet::priors::{make_loss_weight, HazeMap};
use dptenet::{Error, Map2};

use common::{gradcheck, random_tensor, Composite};

fn weights() -> LossWeights {
    LossWeights::default()
}

#[test]
fn tabulated_scalar_examples_hold_exactly() {
    let w = weights();
    assert_eq!(adversarial_loss(5.0).unwrap(), -5.0);
    let ones = LossParts { adversarial: 1.0, perceptual: 1.0, transmission: 1.0, hint: 1.0 };
    assert_eq!(integral_loss(&ones, &w, 1.0).unwrap(), 400.0);
    assert_eq!(integral_loss(&ones, &w, 0.0).unwrap(), 300.0);
    assert_eq!(integral_loss(&ones, &w, 0.5).unwrap(), 350.0);
    assert_eq!(critic_loss(2.0, 5.0, &w, 10.0, 0.0).unwrap(), -3.0);
    assert_eq!(critic_loss(3.0, 3.0, &w, 10.0, 0.0).unwrap(), 0.0);
}

#[test]
fn identical_images_give_zero_reconstruction_terms() {
    let clean = random_tensor(&[2, 3, 8, 8], 1).map(|v| v.abs());
    let fake = Var::constant(clean.clone());
    let tau = Tensor::full(vec![2, 1, 8, 8], 0.5);
    for norm in [Norm::MeanAbsolute, Norm::MeanSquare] {
        assert_eq!(perceptual_term(&fake, &clean, &Extractor::Identity, norm).unwrap().item(), 0.0);
        assert_eq!(transmission_term(&fake, &clean, &tau, norm).unwrap().item(), 0.0);
    }
}

#[test]
fn stub_extractor_perceptual_term_has_closed_form() {
    let clean = random_tensor(&[2, 3, 6, 5], 2);
    let d = random_tensor(&[2, 3, 6, 5], 3);
    for eps in [1e-3, 0.1, 2.0] {
        let fake = Var::constant(clean.zip_map(&d, |c, d| c + eps * d));
        let got = perceptual_term(&fake, &clean, &Extractor::Identity, Norm::MeanSquare).unwrap().item();
        let want = eps * eps * d.data().iter().map(|v| v * v).sum::<f64>() / d.numel() as f64;
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn haze_free_map_reduces_transmission_term_to_scaled_mae() {
    let (h, w, w_min) = (7, 9, 0.1f32);
    let hm = HazeMap { map: Map2::filled(h, w, 0.0), patch_size: 15, smooth_radius: 20, smooth_eps: 1e-3 };
    let tau = make_loss_weight(&hm, w_min).unwrap().to_tensor::<f64>();
    let clean = random_tensor(&[1, 3, h, w], 4);
    let fake = random_tensor(&[1, 3, h, w], 5);
    let got = transmission_term(&Var::constant(fake.clone()), &clean, &tau, Norm::MeanAbsolute).unwrap().item();
    let mae = fake.data().iter().zip(clean.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / fake.numel() as f64;
    let want = w_min as f64 * mae;
    assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
}

#[test]
fn shape_mismatches_are_rejected() {
    let clean = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
    let fake = Var::constant(Tensor::<f64>::zeros(vec![1, 3, 4, 5]));
    assert!(matches!(perceptual_term(&fake, &clean, &Extractor::Identity, Norm::MeanSquare), Err(Error::Shape(_))));
    let ok = Var::constant(clean.clone());
    assert!(matches!(
        transmission_term(&ok, &clean, &Tensor::zeros(vec![1, 3, 4, 4]), Norm::MeanAbsolute),
        Err(Error::Shape(_))
    ));
    assert!(hint_term(&ok, &Tensor::zeros(vec![1, 2, 4, 4]), Norm::MeanSquare).is_err());
}

#[test]
fn non_finite_part_is_named_in_the_graph_objective() {
    let nan = Var::constant(Tensor::scalar(f64::NAN));
    let zero = || Var::constant(Tensor::scalar(0.0));
    let terms = LossTerms { adversarial: zero(), perceptual: zero(), transmission: nan, hint: None };
    match integral_term(&terms, &weights(), 1.0) {
        Err(Error::Numeric { component }) => assert_eq!(component, "transmission"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("NaN accepted"),
    }
}

#[test]
fn composite_objective_passes_gradient_check() {
    let c = Composite::new();
    let fake = random_tensor(&[2, 3, 4, 4], 10);
    let err = gradcheck(&c.store, Mode::TRAIN, &fake, |b, x| integral_term(&c.terms(b, x), &weights(), 0.7).unwrap());
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn hint_path_gets_exactly_zero_gradient_at_zero_lambda() {
    let c = Composite::new();
    let fake = Var::leaf(random_tensor(&[2, 3, 4, 4], 11));
    let b = Binding::new(&c.store, Mode::TRAIN);
    let total = integral_term(&c.terms(&b, &fake), &weights(), 0.0).unwrap();
    let grads = total.backward();
    let pg = b.param_grads(&grads);
    let adapt_ids: Vec<_> = c
        .store
        .learnable_ids()
        .into_iter()
        .filter(|id| c.store.entry(*id).name.starts_with("adapt."))
        .collect();
    assert!(!adapt_ids.is_empty());
    for id in adapt_ids {
        if let Some((_, g)) = pg.iter().find(|(pid, _)| *pid == id) {
            assert!(g.data().iter().all(|v| *v == 0.0), "{}", c.store.entry(id).name);
        }
    }
    // the value equals the objective without a hint part at all
    let no_hint = LossTerms { hint: None, ..c.terms(&b, &fake) };
    assert_eq!(total.item(), integral_term(&no_hint, &weights(), 0.0).unwrap().item());
}
