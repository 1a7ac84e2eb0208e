//! Adversarial dropout and input perturbations.
//!
//! Impact values come from a first-order expansion of a divergence between a
//! fixed (detached) reference prediction and the masked prediction `h(x; v)`.
//! Two arrangements are supported, see [`Linearization`]. With unit cost per
//! flip, the budgeted 0/1 knapsack over flips reduces to taking the largest
//! beneficial `|impact|` values, which is exactly optimal for the linear proxy
//! `vᵀJ`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DtaError, Result};
use crate::masking::{ChannelMask, ElementMask, Mask, MaskBudget, MaskKind};
use crate::networks::{apply_multiplier, InsertionPoint, Mode, Model, Network};
use crate::prob::{log_softmax, softmax};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SIMPLEX_TOL: f64 = 1e-6;

/// Where the divergence is linearized and what it is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linearization {
    /// `J = ∇_v KL(h(x; m^s) ‖ h(x; v))` at `v = 1`: the divergence the
    /// consistency loss actually uses, expanded around the unmasked network.
    #[default]
    StochasticReference,
    /// `J = ∇_v KL(h(x) ‖ h(x; v))` at `v = m^s`: clean reference, expanded
    /// around the stochastic mask.
    CleanReference,
}

impl std::fmt::Display for Linearization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Linearization::StochasticReference => "stochastic-reference",
            Linearization::CleanReference => "clean-reference",
        })
    }
}

impl std::str::FromStr for Linearization {
    type Err = DtaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic-reference" => Ok(Linearization::StochasticReference),
            "clean-reference" => Ok(Linearization::CleanReference),
            other => Err(DtaError::invalid(format!(
                "unknown linearization {other:?} (stochastic-reference | clean-reference)"
            ))),
        }
    }
}

/// Linearized divergence sensitivities for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpactVector<T> {
    kind: MaskKind,
    values: Vec<T>,
    linearization_point: Mask,
}

impl<T: Scalar> ImpactVector<T> {
    pub fn new(values: Vec<T>, linearization_point: Mask) -> Result<Self> {
        if values.len() != linearization_point.units() {
            return Err(DtaError::invalid(format!(
                "{} impact values for a mask with {} units",
                values.len(),
                linearization_point.units()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DtaError::numerical("impact values are not finite"));
        }
        Ok(ImpactVector {
            kind: linearization_point.kind(),
            values,
            linearization_point,
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn linearization_point(&self) -> &Mask {
        &self.linearization_point
    }
}

/// A batch of inputs, an insertion point and fixed reference predictions.
pub struct DivergenceProbe<'a, T> {
    net: &'a Network<T>,
    point: InsertionPoint,
    /// `h_l(x)` at the insertion point.
    lower: Tensor<T>,
    reference: Tensor<T>,
}

impl<'a, T: Scalar> DivergenceProbe<'a, T> {
    /// Probe with explicit reference distributions (one row per input).
    pub fn new(
        net: &'a Network<T>,
        point: InsertionPoint,
        input: &Tensor<T>,
        reference: Tensor<T>,
    ) -> Result<Self> {
        net.check_input(input)?;
        if reference.shape() != [input.batch(), net.num_classes()] {
            return Err(DtaError::invalid(format!(
                "reference has shape {:?}, expected [{}, {}]",
                reference.shape(),
                input.batch(),
                net.num_classes()
            )));
        }
        check_simplex(&reference)?;
        let lower = net.split_at(point).0.forward(input, Mode::Eval)?;
        Ok(DivergenceProbe {
            net,
            point,
            lower,
            reference,
        })
    }

    /// Probe whose reference is the clean (unmasked) prediction.
    pub fn clean(net: &'a Network<T>, point: InsertionPoint, input: &Tensor<T>) -> Result<Self> {
        let reference = net.forward(input, None, None, Mode::Eval)?;
        Self::new(net, point, input, reference)
    }

    /// Probe from an already computed site activation (no input re-evaluation).
    pub(crate) fn from_site(
        net: &'a Network<T>,
        point: InsertionPoint,
        lower: Tensor<T>,
        reference: Tensor<T>,
    ) -> Self {
        DivergenceProbe {
            net,
            point,
            lower,
            reference,
        }
    }

    /// Same site activation, different reference predictions.
    pub fn with_reference(&self, reference: Tensor<T>) -> Result<Self> {
        if reference.shape() != self.reference.shape() {
            return Err(DtaError::invalid(format!(
                "reference has shape {:?}, expected {:?}",
                reference.shape(),
                self.reference.shape()
            )));
        }
        check_simplex(&reference)?;
        Ok(DivergenceProbe {
            net: self.net,
            point: self.point,
            lower: self.lower.clone(),
            reference,
        })
    }

    /// Predictions `h(x; m)` for one mask per sample.
    pub fn predict(&self, masks: &[Mask]) -> Result<Tensor<T>> {
        let dense = self.check_masks(masks)?;
        Ok(softmax(&self.logits_with_multiplier(&dense)?))
    }

    pub fn point(&self) -> InsertionPoint {
        self.point
    }

    pub fn batch(&self) -> usize {
        self.lower.batch()
    }

    pub fn reference(&self) -> &Tensor<T> {
        &self.reference
    }

    /// Site activation `h_l(x)`.
    pub fn site_activation(&self) -> &Tensor<T> {
        &self.lower
    }

    fn upper_start(&self) -> usize {
        match self.point {
            InsertionPoint::Feature => self.net.middle_range().start,
            InsertionPoint::Classifier => self.net.upper_range().start,
        }
    }

    fn check_masks(&self, masks: &[Mask]) -> Result<Vec<T>> {
        if masks.len() != self.batch() {
            return Err(DtaError::invalid(format!(
                "{} masks for a probe batch of {}",
                masks.len(),
                self.batch()
            )));
        }
        let expected = match self.point {
            InsertionPoint::Feature => MaskKind::Channel,
            InsertionPoint::Classifier => MaskKind::Element,
        };
        let site_len = self.lower.sample_len();
        let mut dense = Vec::with_capacity(site_len * masks.len());
        for m in masks {
            if m.kind() != expected || m.activation_len() != site_len {
                return Err(DtaError::invalid(format!(
                    "{} site needs {expected:?} masks covering {site_len} units",
                    self.point
                )));
            }
            if let Mask::Channel(c) = m {
                let (ch, spatial) = self.net.feature_site_dims();
                if c.channels() != ch || c.spatial() != spatial {
                    return Err(DtaError::invalid("channel mask does not match the feature site"));
                }
            }
            dense.extend(m.multiplier::<T>());
        }
        Ok(dense)
    }

    /// Logits of `h_u(multiplier ⊙ h_l(x))` for a dense (possibly relaxed) multiplier.
    pub fn logits_with_multiplier(&self, multiplier: &[T]) -> Result<Tensor<T>> {
        if multiplier.len() != self.lower.data().len() {
            return Err(DtaError::invalid("multiplier does not cover the probe batch"));
        }
        let mut a = self.lower.clone();
        apply_multiplier(&mut a, multiplier);
        let end = self.net.layers().len();
        Ok(self.net.eval_range(self.upper_start()..end, a, Mode::Eval))
    }

    /// Per-sample `KL(reference ‖ h(x; m))` for the given masks.
    pub fn divergence(&self, masks: &[Mask]) -> Result<Vec<T>> {
        let dense = self.check_masks(masks)?;
        let logits = self.logits_with_multiplier(&dense)?;
        Ok(per_sample_kl_from_logits(&self.reference, &logits))
    }

    /// Per-sample divergence between two mask choices, `KL(h(x; a) ‖ h(x; b))`.
    pub fn divergence_between(&self, a: &[Mask], b: &[Mask]) -> Result<Vec<T>> {
        let pa = softmax(&self.logits_with_multiplier(&self.check_masks(a)?)?);
        let lb = self.logits_with_multiplier(&self.check_masks(b)?)?;
        Ok(per_sample_kl_from_logits(&pa, &lb))
    }

    /// Element-level Jacobian of `KL(reference ‖ h(x; v))` with respect to the
    /// flattened site mask `v`, evaluated at `v = masks` (one row per sample).
    pub fn site_jacobian(&self, masks: &[Mask]) -> Result<Tensor<T>> {
        let dense = self.check_masks(masks)?;
        let mut a = self.lower.clone();
        apply_multiplier(&mut a, &dense);
        let end = self.net.layers().len();
        let (logits, trace) = self.net.run(self.upper_start()..end, a, Mode::Eval);
        let q = softmax(&logits);
        let mut g = q;
        for (gv, &pv) in g.data_mut().iter_mut().zip(self.reference.data()) {
            *gv -= pv;
        }
        let mut scratch = vec![T::zero(); self.net.num_params()];
        let mut jac = self
            .net
            .backprop(&trace, g, &mut scratch, true)
            .expect("input gradient requested");
        // ∂D/∂v_j = ∂D/∂(v ⊙ a)_j · a_j
        for (j, &a) in jac.data_mut().iter_mut().zip(self.lower.data()) {
            *j *= a;
        }
        if !jac.all_finite() {
            return Err(DtaError::numerical("non-finite gradient at the insertion point"));
        }
        Ok(jac)
    }
}

/// Impact values of `KL(reference ‖ h(x; v))` at `v = linearization_point`:
/// the raw Jacobian for element masks, per-channel sums `s_i = 1ᵀ J[π_i]`
/// for channel masks.
pub fn compute_impact<T: Scalar>(
    probe: &DivergenceProbe<'_, T>,
    linearization_point: &[Mask],
) -> Result<Vec<ImpactVector<T>>> {
    let jac = probe.site_jacobian(linearization_point)?;
    linearization_point
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let row = jac.sample(b);
            let values = match m {
                Mask::Element(_) => row.to_vec(),
                Mask::Channel(c) => row
                    .chunks(c.plane_len())
                    .map(|plane| plane.iter().copied().sum())
                    .collect(),
            };
            ImpactVector::new(values, m.clone())
        })
        .collect()
}

/// Linear proxy `Σ_j v_j J_j` of a mask under an impact vector.
pub fn linear_proxy<T: Scalar>(mask: &Mask, impact: &ImpactVector<T>) -> T {
    mask.bits()
        .iter()
        .zip(impact.values())
        .filter(|(&b, _)| b)
        .map(|(_, &v)| v)
        .sum()
}

/// Greedy budgeted flip selection.
///
/// Units are visited by descending `|impact|` (ties by ascending index). A
/// dropped unit with positive impact is restored, a kept unit with negative
/// impact is dropped, anything else is skipped, until `max_flips` flips.
pub fn solve_flips<T: Scalar>(
    stochastic: &Mask,
    impact: &ImpactVector<T>,
    budget: &MaskBudget,
) -> Result<Mask> {
    if impact.kind() != stochastic.kind()
        || budget.kind() != stochastic.kind()
        || impact.linearization_point().activation_len() != stochastic.activation_len()
    {
        return Err(DtaError::invalid(format!(
            "mask kind {:?}, impact kind {:?} and budget kind {:?} must agree",
            stochastic.kind(),
            impact.kind(),
            budget.kind()
        )));
    }
    if impact.values().len() != stochastic.units() {
        return Err(DtaError::invalid(format!(
            "{} impact values for a mask with {} units",
            impact.values().len(),
            stochastic.units()
        )));
    }
    let mut order: Vec<usize> = (0..stochastic.units()).collect();
    let vals = impact.values();
    // stable sort keeps ascending index among equal magnitudes
    order.sort_by(|&i, &j| vals[j].abs().partial_cmp(&vals[i].abs()).expect("finite impacts"));
    let mut bits = stochastic.bits().to_vec();
    let mut flips = 0;
    for i in order {
        if flips >= budget.max_flips() {
            break;
        }
        let v = vals[i];
        if (v > T::zero() && !bits[i]) || (v < T::zero() && bits[i]) {
            bits[i] = !bits[i];
            flips += 1;
        }
    }
    Ok(stochastic.with_bits(bits))
}

/// Impact computation followed by flip selection for a batch of masks.
///
/// `probe` carries the clean reference; for
/// [`Linearization::StochasticReference`] it is replaced by `h(x; m^s)`.
pub fn adversarial_masks<T: Scalar>(
    probe: &DivergenceProbe<'_, T>,
    stochastic: &[Mask],
    budget: &MaskBudget,
    linearization: Linearization,
) -> Result<(Vec<Mask>, Vec<ImpactVector<T>>)> {
    if budget.max_flips() == 0 {
        probe.check_masks(stochastic)?;
        return Ok((stochastic.to_vec(), Vec::new()));
    }
    let impacts = match linearization {
        Linearization::CleanReference => compute_impact(probe, stochastic)?,
        Linearization::StochasticReference => {
            let shifted = probe.with_reference(probe.predict(stochastic)?)?;
            let ones: Vec<Mask> = stochastic
                .iter()
                .map(|m| m.with_bits(vec![true; m.units()]))
                .collect();
            compute_impact(&shifted, &ones)?
        }
    };
    let masks = stochastic
        .iter()
        .zip(&impacts)
        .map(|(m, imp)| solve_flips(m, imp, budget))
        .collect::<Result<Vec<_>>>()?;
    Ok((masks, impacts))
}

/// Element-wise adversarial dropout within `floor(δ_e·L)` flips of each stochastic mask.
pub fn element_adversarial_mask<T: Scalar>(
    probe: &DivergenceProbe<'_, T>,
    stochastic: &[ElementMask],
    delta_e: f64,
    linearization: Linearization,
) -> Result<Vec<ElementMask>> {
    let len = stochastic.first().map_or(0, ElementMask::len);
    let budget = MaskBudget::element(delta_e, len)?;
    let masks: Vec<Mask> = stochastic.iter().cloned().map(Mask::from).collect();
    let (adv, _) = adversarial_masks(probe, &masks, &budget, linearization)?;
    Ok(adv
        .into_iter()
        .map(|m| match m {
            Mask::Element(e) => e,
            Mask::Channel(_) => unreachable!("solver preserves mask kind"),
        })
        .collect())
}

/// Channel-wise adversarial dropout within `floor(δ_c·C)` flipped channels.
pub fn channel_adversarial_mask<T: Scalar>(
    probe: &DivergenceProbe<'_, T>,
    stochastic: &[ChannelMask],
    delta_c: f64,
    linearization: Linearization,
) -> Result<Vec<ChannelMask>> {
    let channels = stochastic.first().map_or(0, ChannelMask::channels);
    let budget = MaskBudget::channel(delta_c, channels)?;
    let masks: Vec<Mask> = stochastic.iter().cloned().map(Mask::from).collect();
    let (adv, _) = adversarial_masks(probe, &masks, &budget, linearization)?;
    Ok(adv
        .into_iter()
        .map(|m| match m {
            Mask::Channel(c) => c,
            Mask::Element(_) => unreachable!("solver preserves mask kind"),
        })
        .collect())
}

/// Settings of the virtual adversarial perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VatSettings {
    pub epsilon: f64,
    pub xi: f64,
    pub power_iters: usize,
}

impl VatSettings {
    pub fn new(epsilon: f64) -> Self {
        VatSettings {
            epsilon,
            xi: 1e-6,
            power_iters: 1,
        }
    }

    /// Like [`VatSettings::new`] with the finite-difference step suited to `T`.
    pub fn for_scalar<T: Scalar>(epsilon: f64) -> Self {
        VatSettings {
            xi: T::DEFAULT_VAT_XI,
            ..Self::new(epsilon)
        }
    }
}

/// Input perturbation with per-sample `‖r‖₂ = ε` approximating
/// `argmax_{‖r‖≤ε} KL(h(x) ‖ h(x + r))`.
///
/// Power iteration from a random unit direction gives the dominant direction
/// up to sign; the sign is then chosen per sample by evaluating the
/// divergence at `x ± r`.
pub fn vat_perturbation<T: Scalar, M: Model<T>>(
    model: &M,
    x: &Tensor<T>,
    settings: &VatSettings,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let clean = softmax(&model.logits(x)?);
    vat_perturbation_with_reference(model, x, &clean, settings, rng)
}

pub(crate) fn vat_perturbation_with_reference<T: Scalar, M: Model<T>>(
    model: &M,
    x: &Tensor<T>,
    clean: &Tensor<T>,
    settings: &VatSettings,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if !(settings.epsilon >= 0.0) || !settings.epsilon.is_finite() {
        return Err(DtaError::invalid(format!("VAT radius {} must be ≥ 0", settings.epsilon)));
    }
    if settings.power_iters == 0 || !(settings.xi > 0.0) {
        return Err(DtaError::invalid("VAT needs ξ > 0 and at least one power iteration"));
    }
    if settings.epsilon == 0.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let mut d = Tensor::from_vec(
        x.shape(),
        (0..x.data().len())
            .map(|_| T::of(StandardNormal.sample(rng)))
            .collect(),
    )?;
    normalize_rows(&mut d, None)?;
    let xi = T::of(settings.xi);
    for _ in 0..settings.power_iters {
        let mut probe = x.clone();
        for (p, &dv) in probe.data_mut().iter_mut().zip(d.data()) {
            *p += xi * dv;
        }
        let q = softmax(&model.logits(&probe)?);
        let mut g = q;
        for (gv, &pv) in g.data_mut().iter_mut().zip(clean.data()) {
            *gv -= pv;
        }
        let grad = model.input_vjp(&probe, &g)?;
        if !grad.all_finite() {
            return Err(DtaError::numerical("non-finite VAT gradient"));
        }
        let previous = d.clone();
        d = grad;
        normalize_rows(&mut d, Some(&previous))?;
    }
    let eps = T::of(settings.epsilon);
    for v in d.data_mut() {
        *v *= eps;
    }
    // sign disambiguation per sample
    let mut plus = x.clone();
    plus.add_assign(&d);
    let mut minus = x.clone();
    for (m, &r) in minus.data_mut().iter_mut().zip(d.data()) {
        *m -= r;
    }
    let kl_plus = per_sample_kl_from_logits(clean, &model.logits(&plus)?);
    let kl_minus = per_sample_kl_from_logits(clean, &model.logits(&minus)?);
    for b in 0..x.batch() {
        if kl_minus[b] > kl_plus[b] {
            for v in d.sample_mut(b) {
                *v = -*v;
            }
        }
    }
    Ok(d)
}

/// Scales every sample to unit L2 norm; a zero row falls back to `fallback`.
fn normalize_rows<T: Scalar>(t: &mut Tensor<T>, fallback: Option<&Tensor<T>>) -> Result<()> {
    for b in 0..t.batch() {
        let norm = t.sample(b).iter().map(|&v| v * v).sum::<T>().sqrt();
        if !norm.is_finite() {
            return Err(DtaError::numerical("non-finite VAT direction"));
        }
        if norm > T::zero() {
            for v in t.sample_mut(b) {
                *v /= norm;
            }
        } else if let Some(prev) = fallback {
            t.sample_mut(b).copy_from_slice(prev.sample(b));
        } else {
            return Err(DtaError::numerical("degenerate VAT direction"));
        }
    }
    Ok(())
}

/// Per-sample `KL(p ‖ softmax(logits))` computed in log space.
pub(crate) fn per_sample_kl_from_logits<T: Scalar>(p: &Tensor<T>, logits: &Tensor<T>) -> Vec<T> {
    let logq = log_softmax(logits);
    let floor = T::of(crate::objectives::PROB_FLOOR);
    p.rows()
        .zip(logq.rows())
        .map(|(pr, lq)| {
            pr.iter()
                .zip(lq)
                .filter(|(&pv, _)| pv > T::zero())
                .map(|(&pv, &l)| pv * (pv.max(floor).ln() - l))
                .sum()
        })
        .collect()
}

pub(crate) fn check_simplex<T: Scalar>(p: &Tensor<T>) -> Result<()> {
    for (i, row) in p.rows().enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if row.iter().any(|&v| !(v.as_f64() >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(DtaError::invalid(format!(
                "row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}
