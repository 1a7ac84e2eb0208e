use approx::assert_relative_eq;
use num_rational::Ratio;
use proptest::prelude::*;

use dta_core::adversarial::*;
use dta_core::masking::*;
use dta_core::networks::{ArchitectureId, InsertionPoint, Model, Network};
use dta_core::oracle::{adversarial_effectiveness, masks_within, random_input};
use dta_core::prob::{log_softmax, softmax};
use dta_core::rng::{self, stream};
use dta_core::tensor::Tensor;

fn tiny_net(seed: u64) -> Network<f64> {
    Network::build(&ArchitectureId::tiny(), seed).unwrap()
}

fn tiny_input(batch: usize, seed: u64) -> Tensor<f64> {
    random_input(&[batch, 1, 6, 6], &mut stream(seed, "input", &[]))
}

fn kl_rows(p: &Tensor<f64>, logits: &Tensor<f64>) -> Vec<f64> {
    let lq = log_softmax(logits);
    p.rows()
        .zip(lq.rows())
        .map(|(pr, qr)| pr.iter().zip(qr).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p.ln() - q)).sum())
        .collect()
}

fn element(bits: &[u8]) -> Mask {
    Mask::from(ElementMask::from_binary(bits).unwrap())
}

fn impact(values: Vec<f64>, at: &Mask) -> ImpactVector<f64> {
    ImpactVector::new(values, at.clone()).unwrap()
}

#[test]
fn zero_classifier_weights_give_zero_impact() {
    let mut net = tiny_net(1);
    let start = net.classifier()[0].params.start;
    for p in &mut net.params_mut()[start..] {
        *p = 0.0;
    }
    let x = tiny_input(3, 2);
    let mut r = rng::rng_from(3);
    for point in [InsertionPoint::Feature, InsertionPoint::Classifier] {
        let probe = DivergenceProbe::clean(&net, point, &x).unwrap();
        let masks: Vec<Mask> = (0..3)
            .map(|_| match point {
                InsertionPoint::Feature => sample_channel_mask(4, (3, 3), 0.5, &mut r).unwrap().into(),
                InsertionPoint::Classifier => sample_element_mask(8, 0.5, &mut r).unwrap().into(),
            })
            .collect();
        for iv in compute_impact(&probe, &masks).unwrap() {
            assert!(iv.values().iter().all(|&v| v == 0.0), "{point}: {:?}", iv.values());
        }
    }
}

#[test]
fn site_jacobian_matches_relaxed_mask_finite_differences() {
    let net = tiny_net(5);
    let x = tiny_input(2, 6);
    let mut r = rng::rng_from(7);
    for point in [InsertionPoint::Feature, InsertionPoint::Classifier] {
        let probe = DivergenceProbe::clean(&net, point, &x).unwrap();
        let masks: Vec<Mask> = (0..2)
            .map(|_| match point {
                InsertionPoint::Feature => sample_channel_mask(4, (3, 3), 0.5, &mut r).unwrap().into(),
                InsertionPoint::Classifier => sample_element_mask(8, 0.5, &mut r).unwrap().into(),
            })
            .collect();
        let jac = probe.site_jacobian(&masks).unwrap();
        let base: Vec<f64> = masks.iter().flat_map(|m| m.multiplier::<f64>()).collect();
        let h = 1e-5;
        let site = jac.sample_len();
        let mut checked = 0;
        for b in 0..2 {
            for j in 0..site {
                let idx = b * site + j;
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    kl_rows(probe.reference(), &probe.logits_with_multiplier(&v).unwrap())[b]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = jac.sample(b)[j];
                if analytic.abs().max(numeric.abs()) < 1e-7 {
                    assert!((analytic - numeric).abs() < 1e-8);
                    continue;
                }
                assert_relative_eq!(analytic, numeric, max_relative = 1e-3);
                checked += 1;
            }
        }
        assert!(checked > site / 2, "{point}: only {checked} informative entries");
    }
}

#[test]
fn channel_impact_sign_predicts_linear_change() {
    let net = tiny_net(11);
    let x = tiny_input(1, 12);
    let probe = DivergenceProbe::clean(&net, InsertionPoint::Feature, &x).unwrap();
    let m = Mask::from(ChannelMask::from_binary(&[1, 0, 1, 0], (3, 3)).unwrap());
    let s = compute_impact(&probe, std::slice::from_ref(&m)).unwrap().remove(0);
    let j = probe.site_jacobian(std::slice::from_ref(&m)).unwrap();
    let linear = |mask: &Mask| -> f64 {
        mask.multiplier::<f64>().iter().zip(j.sample(0)).map(|(v, g)| v * g).sum()
    };
    let base = linear(&m);
    for f in 0..4 {
        let mut bits = m.bits().to_vec();
        bits[f] = !bits[f];
        let flipped = m.with_bits(bits);
        let change = linear(&flipped) - base;
        let predicted = if m.bits()[f] { -s.values()[f] } else { s.values()[f] };
        assert_relative_eq!(change, predicted, epsilon = 1e-12, max_relative = 1e-9);
        assert_eq!(change > 0.0, predicted > 0.0);
    }
}

#[test]
fn solve_flips_examples() {
    let m = element(&[0, 1, 1]);
    let out = solve_flips(&m, &impact(vec![3.0, -2.0, 1.0], &m), &MaskBudget::with_flips(MaskKind::Element, 1, 3)).unwrap();
    assert_eq!(out, element(&[1, 1, 1]));

    let out = solve_flips(&m, &impact(vec![3.0, -2.0, 1.0], &m), &MaskBudget::with_flips(MaskKind::Element, 0, 3)).unwrap();
    assert_eq!(out, m);

    let m = element(&[0, 0]);
    let out = solve_flips(&m, &impact(vec![-4.0, 2.0], &m), &MaskBudget::with_flips(MaskKind::Element, 2, 2)).unwrap();
    assert_eq!(out, element(&[0, 1]));
}

#[test]
fn solve_flips_rejects_mismatched_kinds() {
    let m = element(&[1, 1]);
    let budget = MaskBudget::with_flips(MaskKind::Channel, 1, 2);
    assert!(solve_flips(&m, &impact(vec![1.0, 1.0], &m), &budget).is_err());
    let c = Mask::from(ChannelMask::ones(2, (1, 1)));
    let budget = MaskBudget::with_flips(MaskKind::Element, 1, 2);
    assert!(solve_flips(&m, &impact(vec![1.0, 1.0], &c), &budget).is_err());
}

#[test]
fn ties_break_by_ascending_index() {
    let m = element(&[1, 1, 1]);
    let out = solve_flips(&m, &impact(vec![-1.0, -1.0, -1.0], &m), &MaskBudget::with_flips(MaskKind::Element, 2, 3)).unwrap();
    assert_eq!(out, element(&[0, 0, 1]));
}

#[test]
fn sixty_four_channels_at_five_percent_flip_at_most_three() {
    let budget = MaskBudget::channel(0.05, 64).unwrap();
    assert_eq!(budget.max_flips(), 3);
    let mut r = rng::rng_from(99);
    let m = Mask::from(sample_channel_mask(64, (2, 2), 0.5, &mut r).unwrap());
    let values: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 + i as f64 } else { -(i as f64) }).collect();
    let out = solve_flips(&m, &impact(values, &m), &budget).unwrap();
    assert!(mask_distance(&out, &m).unwrap() <= 3);
}

#[test]
fn zero_magnitude_returns_stochastic_masks() {
    let net = tiny_net(21);
    let x = tiny_input(2, 22);
    let mut r = rng::rng_from(23);
    let probe = DivergenceProbe::clean(&net, InsertionPoint::Classifier, &x).unwrap();
    let ms: Vec<ElementMask> = (0..2).map(|_| sample_element_mask(8, 0.5, &mut r).unwrap()).collect();
    for lin in [Linearization::StochasticReference, Linearization::CleanReference] {
        assert_eq!(element_adversarial_mask(&probe, &ms, 0.0, lin).unwrap(), ms);
    }
    let probe = DivergenceProbe::clean(&net, InsertionPoint::Feature, &x).unwrap();
    let ms: Vec<ChannelMask> = (0..2).map(|_| sample_channel_mask(4, (3, 3), 0.5, &mut r).unwrap()).collect();
    assert_eq!(channel_adversarial_mask(&probe, &ms, 0.0, Linearization::default()).unwrap(), ms);
}

#[test]
fn six_channel_solver_reaches_linear_optimum_exactly() {
    let arch = ArchitectureId::tiny_with(6, 8);
    for seed in 0..10 {
        let net: Network<f64> = Network::build(&arch, seed).unwrap();
        let x = tiny_input(1, 100 + seed);
        let mut r = rng::rng_from(200 + seed);
        let probe = DivergenceProbe::clean(&net, InsertionPoint::Feature, &x).unwrap();
        let m = Mask::from(sample_channel_mask(6, (3, 3), 0.5, &mut r).unwrap());
        let budget = MaskBudget::new(MaskKind::Channel, Ratio::new(1, 3), 6).unwrap();
        assert_eq!(budget.max_flips(), 2);
        for lin in [Linearization::StochasticReference, Linearization::CleanReference] {
            let (adv, impacts) = adversarial_masks(&probe, std::slice::from_ref(&m), &budget, lin).unwrap();
            let s = &impacts[0];
            let best = masks_within(&m, 2)
                .iter()
                .map(|c| linear_proxy(c, s))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(linear_proxy(&adv[0], s), best, "seed {seed} {lin}");
        }
    }
}

#[test]
fn element_adversary_increases_true_divergence() {
    for seed in 0..20 {
        let net = tiny_net(300 + seed);
        let x = tiny_input(1, 400 + seed);
        let mut r = rng::rng_from(500 + seed);
        let ms = vec![sample_element_mask(8, 0.5, &mut r).unwrap()];
        let probe = DivergenceProbe::clean(&net, InsertionPoint::Classifier, &x).unwrap();
        let m = Mask::from(ms[0].clone());
        let target = probe.with_reference(probe.predict(std::slice::from_ref(&m)).unwrap()).unwrap();
        let adv = element_adversarial_mask(&probe, &ms, 0.25, Linearization::StochasticReference).unwrap();
        assert!(mask_distance(&Mask::from(adv[0].clone()), &m).unwrap() <= 2);
        let d_adv = target.divergence(&[adv[0].clone().into()]).unwrap()[0];
        let d_sto = target.divergence(&[m]).unwrap()[0];
        assert!(d_adv >= d_sto);
    }
}

#[test]
fn adversarial_masks_beat_random_same_budget_masks() {
    for kind in [MaskKind::Element, MaskKind::Channel] {
        let r = adversarial_effectiveness(kind, 100, 0.5, Linearization::default(), 2024).unwrap();
        assert!(r.beats_random >= 70, "{r:?}");
        assert_eq!(r.beats_stochastic, 100, "{r:?}");
    }
}

#[test]
fn solver_is_deterministic() {
    let net = tiny_net(31);
    let x = tiny_input(4, 32);
    let probe = DivergenceProbe::clean(&net, InsertionPoint::Feature, &x).unwrap();
    let mut r = rng::rng_from(33);
    let ms: Vec<Mask> = (0..4).map(|_| sample_channel_mask(4, (3, 3), 0.5, &mut r).unwrap().into()).collect();
    let budget = MaskBudget::channel(0.5, 4).unwrap();
    let a = adversarial_masks(&probe, &ms, &budget, Linearization::default()).unwrap();
    let b = adversarial_masks(&probe, &ms, &budget, Linearization::default()).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn probe_rejects_non_simplex_reference_and_wrong_masks() {
    let net = tiny_net(41);
    let x = tiny_input(2, 42);
    let bad = Tensor::from_vec(&[2, 3], vec![0.5, 0.6, 0.0, 0.2, 0.2, 0.6]).unwrap();
    assert!(DivergenceProbe::new(&net, InsertionPoint::Feature, &x, bad).is_err());
    let probe = DivergenceProbe::clean(&net, InsertionPoint::Feature, &x).unwrap();
    let wrong: Vec<Mask> = vec![ElementMask::ones(36).into(), ElementMask::ones(36).into()];
    assert!(compute_impact(&probe, &wrong).is_err());
    assert!(compute_impact(&probe, &wrong[..1]).is_err());
}

// ---------------------------------------------------------------------------
// VAT

/// Two-class logistic model with logits `[0, w·x]`.
struct Logistic {
    w: Vec<f64>,
}

impl Model<f64> for Logistic {
    fn logits(&self, x: &Tensor<f64>) -> dta_core::Result<Tensor<f64>> {
        let rows: Vec<Vec<f64>> = x
            .rows()
            .map(|r| vec![0.0, r.iter().zip(&self.w).map(|(a, b)| a * b).sum()])
            .collect();
        Tensor::from_rows(&rows)
    }

    fn input_vjp(&self, x: &Tensor<f64>, g: &Tensor<f64>) -> dta_core::Result<Tensor<f64>> {
        let data = g.rows().flat_map(|gr| self.w.iter().map(move |w| gr[1] * w)).collect();
        Tensor::from_vec(x.shape(), data)
    }
}

fn kl_at(model: &Logistic, x: &Tensor<f64>, r: &Tensor<f64>) -> Vec<f64> {
    let p = softmax(&model.logits(x).unwrap());
    let mut xr = x.clone();
    xr.add_assign(r);
    kl_rows(&p, &model.logits(&xr).unwrap())
}

#[test]
fn vat_zero_radius_is_exactly_zero() {
    let net = tiny_net(51);
    let x = tiny_input(3, 52);
    let r = vat_perturbation(&net, &x, &VatSettings::new(0.0), &mut rng::rng_from(1)).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0));
}

#[test]
fn vat_norm_equals_radius() {
    let net = tiny_net(53);
    let x = tiny_input(5, 54);
    let r = vat_perturbation(&net, &x, &VatSettings::new(3.5), &mut rng::rng_from(2)).unwrap();
    for b in 0..5 {
        let n: f64 = r.sample(b).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 3.5).abs() < 1e-5, "norm {n}");
    }
    let net32: Network<f32> = Network::build(&ArchitectureId::tiny(), 53).unwrap();
    let x32 = x.cast::<f32>();
    let r = vat_perturbation(&net32, &x32, &VatSettings::for_scalar::<f32>(3.5), &mut rng::rng_from(2)).unwrap();
    for b in 0..5 {
        let n: f32 = r.sample(b).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 3.5).abs() < 1e-4, "f32 norm {n}");
    }
}

#[test]
fn vat_rejects_negative_radius() {
    let net = tiny_net(55);
    let x = tiny_input(1, 56);
    assert!(vat_perturbation(&net, &x, &VatSettings::new(-1.0), &mut rng::rng_from(3)).is_err());
}

#[test]
fn vat_sign_matches_two_point_search_in_one_dimension() {
    let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut checked = 0;
    for (k, w) in [0.3, 0.7, 1.0, 2.0, -1.5].into_iter().enumerate() {
        let model = Logistic { w: vec![w] };
        for i in -12..=12 {
            let x0 = i as f64 / 4.0;
            for eps in [0.1, 0.5, 1.0, 3.5] {
                let x = Tensor::from_vec(&[1, 1], vec![x0]).unwrap();
                let r = vat_perturbation(&model, &x, &VatSettings::new(eps), &mut stream(9, "vat1d", &[k as u64, (i + 12) as u64])).unwrap();
                let p = sigma(w * x0);
                let up = (sigma(w * (x0 + eps)) - p).abs();
                let down = (sigma(w * (x0 - eps)) - p).abs();
                if (up - down).abs() < 1e-9 {
                    continue;
                }
                assert_eq!(r.data()[0] > 0.0, up > down, "w {w} x {x0} ε {eps}");
                assert!((r.data()[0].abs() - eps).abs() < 1e-12);
                checked += 1;
            }
        }
    }
    assert!(checked > 400);
}

#[test]
fn vat_beats_random_direction_of_equal_norm() {
    let dim = 8;
    let mut wins = 0;
    for t in 0..100u64 {
        let mut g = stream(77, "vat-toy", &[t]);
        let w: Vec<f64> = random_input(&[dim], &mut g).into_data();
        let model = Logistic { w };
        let x = random_input(&[1, dim], &mut g);
        let r = vat_perturbation(&model, &x, &VatSettings::new(1.0), &mut g).unwrap();
        let mut d = random_input(&[1, dim], &mut g);
        let n: f64 = d.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        d.data_mut().iter_mut().for_each(|v| *v /= n);
        wins += usize::from(kl_at(&model, &x, &r)[0] >= kl_at(&model, &x, &d)[0]);
    }
    assert!(wins >= 70, "{wins}/100");
}

// ---------------------------------------------------------------------------
// properties

fn bits_and_values(max: usize) -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(prop_oneof![-5.0..5.0f64, Just(0.0), Just(1.5), Just(-1.5)], n),
        )
    })
}

proptest! {
    #[test]
    fn greedy_is_exactly_optimal_for_element_masks((bits, values) in bits_and_values(12), k in 0usize..13) {
        let m = Mask::from(ElementMask::from_bits(bits));
        let k = k.min(m.units());
        let iv = impact(values, &m);
        let out = solve_flips(&m, &iv, &MaskBudget::with_flips(MaskKind::Element, k, m.units())).unwrap();
        prop_assert!(mask_distance(&out, &m).unwrap() <= k);
        let best = masks_within(&m, k).iter().map(|c| linear_proxy(c, &iv)).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((linear_proxy(&out, &iv) - best).abs() <= 1e-9 * best.abs().max(1.0));
    }

    #[test]
    fn greedy_is_exactly_optimal_for_channel_masks(
        (bits, values) in bits_and_values(8),
        k in 0usize..9,
        h in 1usize..4,
        w in 1usize..4,
    ) {
        let m = Mask::from(ChannelMask::from_bits(bits, (h, w)));
        let k = k.min(m.units());
        let iv = impact(values, &m);
        let out = solve_flips(&m, &iv, &MaskBudget::with_flips(MaskKind::Channel, k, m.units())).unwrap();
        prop_assert!(mask_distance(&out, &m).unwrap() <= k);
        let best = masks_within(&m, k).iter().map(|c| linear_proxy(c, &iv)).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((linear_proxy(&out, &iv) - best).abs() <= 1e-9 * best.abs().max(1.0));
        // every plane of the expanded multiplier stays uniform
        let plane = h * w;
        for chunk in out.multiplier::<f64>().chunks(plane) {
            prop_assert!(chunk.iter().all(|&v| v == chunk[0]));
        }
    }

    #[test]
    fn linear_proxy_is_monotone_in_budget((bits, values) in bits_and_values(16)) {
        let m = Mask::from(ElementMask::from_bits(bits));
        let iv = impact(values, &m);
        let mut last = f64::NEG_INFINITY;
        for k in 0..=m.units() {
            let out = solve_flips(&m, &iv, &MaskBudget::with_flips(MaskKind::Element, k, m.units())).unwrap();
            let v = linear_proxy(&out, &iv);
            prop_assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn vat_norm_is_zero_or_radius(eps in 0.0..5.0f64, seed in any::<u64>()) {
        let model = Logistic { w: vec![0.5, -1.0, 2.0] };
        let x = random_input(&[3, 3], &mut rng::rng_from(seed));
        let r = vat_perturbation(&model, &x, &VatSettings::new(eps), &mut rng::rng_from(seed ^ 1)).unwrap();
        for b in 0..3 {
            let n: f64 = r.sample(b).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - eps).abs() < 1e-9);
        }
    }
}

#[test]
fn exhaustive_oracle_agrees_with_solver() {
    use dta_core::oracle::solver_exactness;
    let e = solver_exactness(MaskKind::Element, 100, 12, None, 21).unwrap();
    let c = solver_exactness(MaskKind::Channel, 100, 8, None, 22).unwrap();
    assert_eq!((e.exact, c.exact), (100, 100));
    let z = solver_exactness(MaskKind::Channel, 50, 8, Some(0), 23).unwrap();
    assert_eq!((z.exact, z.unchanged), (50, 50));
}
