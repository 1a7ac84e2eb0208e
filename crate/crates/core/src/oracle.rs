//! Brute-force reference checks used by the `oracle` command and the
//! acceptance suite: solver optimality on the linear proxy, adversarial-mask
//! effectiveness against exhaustive search and random baselines, and a
//! finite-difference gradient check.

use num_rational::Ratio;
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::adversarial::{adversarial_masks, linear_proxy, solve_flips, DivergenceProbe, ImpactVector, Linearization, VatSettings};
use crate::error::Result;
use crate::masking::{
    mask_distance, sample_channel_mask, sample_element_mask, ChannelMask, ElementMask, Mask, MaskBudget, MaskKind,
};
use crate::networks::{ArchitectureId, InsertionPoint, Mode, Network};
use crate::objectives::{evaluate_plan, plan_step, Labeled, LossSettings, LossWeights};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub fn random_input(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .expect("shape and data agree")
}

/// All masks within `max_flips` bit flips of `base`.
pub fn masks_within(base: &Mask, max_flips: usize) -> Vec<Mask> {
    fn rec(bits: &mut Vec<bool>, from: usize, left: usize, base: &Mask, out: &mut Vec<Mask>) {
        out.push(base.with_bits(bits.clone()));
        if left == 0 {
            return;
        }
        for i in from..bits.len() {
            bits[i] = !bits[i];
            rec(bits, i + 1, left - 1, base, out);
            bits[i] = !bits[i];
        }
    }
    let mut out = Vec::new();
    rec(&mut base.bits().to_vec(), 0, max_flips, base, &mut out);
    out
}

/// `base` with exactly `k` distinct random units flipped.
pub fn random_flips(base: &Mask, k: usize, rng: &mut Rng) -> Mask {
    let mut bits = base.bits().to_vec();
    for i in sample_indices(rng, bits.len(), k.min(bits.len())).into_iter() {
        bits[i] = !bits[i];
    }
    base.with_bits(bits)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ExactnessReport {
    pub kind: String,
    pub trials: usize,
    pub max_units: usize,
    /// Trials where the solver's proxy value equals the exhaustive maximum and
    /// the mask stays within budget.
    pub exact: usize,
    /// Trials where the solver returned the stochastic mask unchanged.
    pub unchanged: usize,
}

/// Random masks, impacts and budgets with `1..=max_units` units, each solved
/// greedily and compared with exhaustive enumeration of the linear proxy.
///
/// `budget` pins the flip budget; otherwise it is drawn from `0..=units`.
/// Half of the trials quantize impacts to produce ties.
pub fn solver_exactness(
    kind: MaskKind,
    trials: usize,
    max_units: usize,
    budget: Option<usize>,
    seed: u64,
) -> Result<ExactnessReport> {
    let mut report = ExactnessReport {
        kind: format!("{kind:?}").to_lowercase(),
        trials,
        max_units,
        ..Default::default()
    };
    for t in 0..trials as u64 {
        let mut rng = rng::stream(seed, "oracle-exactness", &[t]);
        let units = rng.random_range(1..=max_units.max(1));
        let bits: Vec<bool> = (0..units).map(|_| rng.random_bool(0.7)).collect();
        let (stochastic, ones) = match kind {
            MaskKind::Element => (Mask::from(ElementMask::from_bits(bits)), Mask::from(ElementMask::ones(units))),
            MaskKind::Channel => {
                let spatial = (rng.random_range(1..=3), rng.random_range(1..=3));
                (
                    Mask::from(ChannelMask::from_bits(bits, spatial)),
                    Mask::from(ChannelMask::ones(units, spatial)),
                )
            }
        };
        let quantize = t % 2 == 1;
        let values: Vec<f64> = (0..units)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                if quantize {
                    (v * 2.0).round() / 2.0
                } else {
                    v
                }
            })
            .collect();
        let impact = ImpactVector::new(values, ones)?;
        let k = budget.unwrap_or_else(|| rng.random_range(0..=units));
        let solved = solve_flips(&stochastic, &impact, &MaskBudget::with_flips(kind, k, units))?;
        let best = masks_within(&stochastic, k)
            .iter()
            .map(|m| linear_proxy(m, &impact))
            .fold(f64::NEG_INFINITY, f64::max);
        let got = linear_proxy(&solved, &impact);
        let within = mask_distance(&solved, &stochastic)? <= k;
        report.exact += usize::from(within && (got - best).abs() <= 1e-12 * best.abs().max(1.0));
        report.unchanged += usize::from(solved == stochastic);
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EffectivenessReport {
    pub kind: String,
    pub trials: usize,
    /// Trials where the adversarial divergence ≥ the random same-budget divergence.
    pub beats_random: usize,
    /// Trials reaching ≥ 90% of the exhaustive maximum.
    pub near_optimal: usize,
    /// Trials where the adversarial divergence ≥ the divergence at `m^s`.
    pub beats_stochastic: usize,
    pub mean_ratio_to_optimum: f64,
}

/// Tiny-network trials of the adversarial solver at one insertion point.
///
/// Element kind: `L = 8`, two flips. Channel kind: `C = 4`, one flip.
pub fn adversarial_effectiveness(
    kind: MaskKind,
    trials: usize,
    drop_rate: f64,
    linearization: Linearization,
    seed: u64,
) -> Result<EffectivenessReport> {
    let arch = ArchitectureId::tiny();
    let mut report = EffectivenessReport {
        kind: format!("{kind:?}").to_lowercase(),
        trials,
        ..Default::default()
    };
    let mut ratio_sum = 0.0;
    for t in 0..trials as u64 {
        let mut rng = rng::stream(seed, "oracle-effectiveness", &[t]);
        let net: Network<f64> = Network::build(&arch, rng::derive(seed, "oracle-net", &[t]))?;
        let [c, h, w] = arch.input_shape;
        let x = random_input(&[1, c, h, w], &mut rng);
        let (point, stochastic, budget) = match kind {
            MaskKind::Element => {
                let len = net.classifier_site_len();
                let m = Mask::from(sample_element_mask(len, drop_rate, &mut rng)?);
                (InsertionPoint::Classifier, m, MaskBudget::new(kind, Ratio::new(1, 4), len)?)
            }
            MaskKind::Channel => {
                let (ch, spatial) = net.feature_site_dims();
                let m = Mask::from(sample_channel_mask(ch, spatial, drop_rate, &mut rng)?);
                (InsertionPoint::Feature, m, MaskBudget::new(kind, Ratio::new(1, 4), ch)?)
            }
        };
        let probe = DivergenceProbe::clean(&net, point, &x)?;
        let one = std::slice::from_ref(&stochastic);
        let (adv, _) = adversarial_masks(&probe, one, &budget, linearization)?;
        // the divergence the solver is trying to increase
        let target = match linearization {
            Linearization::CleanReference => probe,
            Linearization::StochasticReference => probe.with_reference(probe.predict(one)?)?,
        };
        let d_adv = target.divergence(&adv)?[0];
        let d_rand = target.divergence(&[random_flips(&stochastic, budget.max_flips(), &mut rng)])?[0];
        let d_sto = target.divergence(one)?[0];
        let best = masks_within(&stochastic, budget.max_flips())
            .into_iter()
            .map(|m| target.divergence(&[m]).map(|d| d[0]))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        report.beats_random += usize::from(d_adv >= d_rand);
        report.beats_stochastic += usize::from(d_adv >= d_sto);
        let ratio = if best > 0.0 { d_adv / best } else { 1.0 };
        report.near_optimal += usize::from(ratio >= 0.9);
        ratio_sum += ratio;
    }
    report.mean_ratio_to_optimum = ratio_sum / trials.max(1) as f64;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientCheckReport {
    pub params: usize,
    pub within_tolerance: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradientCheckReport {
    pub fn fraction(&self) -> f64 {
        self.within_tolerance as f64 / self.params.max(1) as f64
    }
}

/// Settings with every adaptation term active, used by the gradient check.
pub fn all_terms_settings() -> LossSettings {
    LossSettings {
        weights: LossWeights {
            lambda1: 2.0,
            lambda2: 0.5,
            lambda3: 0.3,
        },
        delta_e: Ratio::new(1, 4),
        delta_c: Ratio::new(1, 4),
        vat: VatSettings::for_scalar::<f64>(0.5),
        linearization: Linearization::default(),
        stochastic_drop_rate: 0.25,
        use_fdta: true,
        use_cdta: true,
        use_entropy: true,
        use_vat: true,
    }
}

/// Central finite differences of the total loss against the analytic gradient
/// on the tiny network in `f64`, with masks and VAT direction frozen.
///
/// Parameters are jittered off their initialization first: biases start at
/// exactly zero, so a sample whose feature channels are all dropped would
/// put every hidden ReLU exactly on its kink.
pub fn gradient_check(seed: u64, tolerance: f64) -> Result<GradientCheckReport> {
    let arch = ArchitectureId::tiny();
    let mut net: Network<f64> = Network::build(&arch, rng::derive(seed, "gradcheck-net", &[]))?;
    let mut rng = rng::stream(seed, "gradcheck-data", &[]);
    for p in net.params_mut() {
        let jitter: f64 = StandardNormal.sample(&mut rng);
        *p += 0.05 * jitter;
    }
    let [c, h, w] = arch.input_shape;
    let xs = random_input(&[4, c, h, w], &mut rng);
    let xt = random_input(&[4, c, h, w], &mut rng);
    let labels = [0, 1, 2, 1];
    let settings = all_terms_settings();
    let plan = plan_step(&net, &xt, &settings, seed)?;
    let total = |net: &Network<f64>| -> Result<(f64, Vec<f64>)> {
        let (b, g) = evaluate_plan(
            net,
            Labeled {
                images: &xs,
                labels: &labels,
            },
            Some(&xt),
            &plan,
            &settings,
            Mode::Eval,
        )?;
        Ok((b.total, g))
    };
    let (_, analytic) = total(&net)?;
    let step = 1e-5;
    let mut within = 0;
    let mut max_err: f64 = 0.0;
    for i in 0..net.num_params() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + step;
        let (up, _) = total(&net)?;
        net.params_mut()[i] = orig - step;
        let (down, _) = total(&net)?;
        net.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        max_err = max_err.max(err);

        within += usize::from(err < tolerance);
    }
    Ok(GradientCheckReport {
        params: net.num_params(),
        within_tolerance: within,
        max_relative_error: max_err,
        tolerance,
    })
}
