//! Loss terms of the adaptation objective and their composition.
//!
//! `total = task + λ1·(fdta + cdta) + λ2·entropy + λ3·vat`
//!
//! The first argument of every KL consistency term is a fixed target: the
//! reference predictions are computed once per step and stored in a
//! [`StepPlan`] together with the masks and the VAT perturbation. Evaluating a
//! plan is then a deterministic function of the parameters, which is what the
//! gradient check differentiates.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    adversarial_masks, check_simplex, vat_perturbation_with_reference, DivergenceProbe,
    ImpactVector, Linearization, VatSettings,
};
use crate::error::{DtaError, Result};
use crate::masking::{sample_channel_mask, sample_element_mask, Mask, MaskBudget, MaskKind};
use crate::networks::{apply_multiplier, InsertionPoint, Mode, Network};
use crate::prob::log_softmax;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of `fdta + cdta`.
    pub lambda1: f64,
    /// Weight of target entropy.
    pub lambda2: f64,
    /// Weight of VAT.
    pub lambda3: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = LossWeights {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn zero() -> Self {
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DtaError::invalid(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub fdta: f64,
    pub cdta: f64,
    pub entropy: f64,
    pub vat: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(task: f64, fdta: f64, cdta: f64, entropy: f64, vat: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            task,
            fdta,
            cdta,
            entropy,
            vat,
            total: task + w.lambda1 * (fdta + cdta) + w.lambda2 * entropy + w.lambda3 * vat,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.task, self.fdta, self.cdta, self.entropy, self.vat, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Probability-vector losses

fn check_pair<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(DtaError::invalid(format!(
            "distribution shapes differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    check_simplex(p)?;
    check_simplex(q)
}

#[inline]
fn clamped_ln<T: Scalar>(v: T) -> T {
    v.max(T::of(PROB_FLOOR)).min(T::one()).ln()
}

/// Batch mean of `Σ_i p_i log(p_i / q_i)`.
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    check_pair(p, q)?;
    let total: T = p
        .rows()
        .zip(q.rows())
        .map(|(pr, qr)| {
            pr.iter()
                .zip(qr)
                .filter(|(&pv, _)| pv > T::zero())
                .map(|(&pv, &qv)| pv * (clamped_ln(pv) - clamped_ln(qv)))
                .sum::<T>()
        })
        .sum();
    Ok((total / T::of(p.batch() as f64)).max(T::zero()))
}

/// Mean cross entropy `−log p_y` over the batch.
pub fn task_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    check_simplex(probs)?;
    check_labels(labels, probs.batch(), probs.sample_len())?;
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -clamped_ln(probs.sample(b)[y]))
        .sum();
    Ok(total / T::of(labels.len() as f64))
}

/// Mean Shannon entropy of the rows.
pub fn entropy_loss<T: Scalar>(probs: &Tensor<T>) -> Result<T> {
    check_simplex(probs)?;
    let total: T = probs
        .rows()
        .map(|r| {
            -r.iter()
                .filter(|&&v| v > T::zero())
                .map(|&v| v * clamped_ln(v))
                .sum::<T>()
        })
        .sum();
    Ok(total / T::of(probs.batch() as f64))
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(DtaError::invalid(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(DtaError::invalid(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Logit-space losses with gradients (batch mean, gradient scaled by `weight / B`)

pub(crate) fn cross_entropy_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize], weight: T) -> (T, Tensor<T>) {
    let logp = log_softmax(logits);
    let b = T::of(logits.batch() as f64);
    let mut grad = logp.clone();
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp.sample(i)[y];
        let row = grad.sample_mut(i);
        for v in row.iter_mut() {
            *v = v.exp();
        }
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v *= weight / b;
        }
    }
    (loss / b, grad)
}

/// `KL(exp(ref_logp) ‖ softmax(logits))`; exactly zero when the logits match the reference.
pub(crate) fn kl_grad<T: Scalar>(ref_logp: &Tensor<T>, logits: &Tensor<T>, weight: T) -> (T, Tensor<T>) {
    let logq = log_softmax(logits);
    let b = T::of(logits.batch() as f64);
    let mut loss = T::zero();
    let mut grad = logq.clone();
    for ((g, &lq), &lp) in grad.data_mut().iter_mut().zip(logq.data()).zip(ref_logp.data()) {
        let p = lp.exp();
        loss += p * (lp - lq);
        *g = (lq.exp() - p) * weight / b;
    }
    (loss / b, grad)
}

pub(crate) fn entropy_grad<T: Scalar>(logits: &Tensor<T>, weight: T) -> (T, Tensor<T>) {
    let logp = log_softmax(logits);
    let b = T::of(logits.batch() as f64);
    let mut grad = logp.clone();
    let mut loss = T::zero();
    for (lp_row, g_row) in logp.rows().zip(grad.data_mut().chunks_mut(logits.sample_len())) {
        let h: T = -lp_row.iter().map(|&l| l.exp() * l).sum::<T>();
        loss += h;
        for (g, &l) in g_row.iter_mut().zip(lp_row) {
            *g = -l.exp() * (l + h) * weight / b;
        }
    }
    (loss / b, grad)
}

// ---------------------------------------------------------------------------
// Step planning

/// Which terms are active and at what strength for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    /// Current element-wise magnitude `δ_e(t)`.
    pub delta_e: Ratio<i64>,
    /// Current channel-wise magnitude `δ_c(t)`.
    pub delta_c: Ratio<i64>,
    pub vat: VatSettings,
    pub linearization: Linearization,
    /// Drop rate `ρ_s` of the stochastic masks.
    pub stochastic_drop_rate: f64,
    pub use_fdta: bool,
    pub use_cdta: bool,
    pub use_entropy: bool,
    pub use_vat: bool,
}

impl LossSettings {
    pub fn fdta_active(&self) -> bool {
        self.use_fdta && self.weights.lambda1 > 0.0
    }

    pub fn cdta_active(&self) -> bool {
        self.use_cdta && self.weights.lambda1 > 0.0
    }

    pub fn entropy_active(&self) -> bool {
        self.use_entropy && self.weights.lambda2 > 0.0
    }

    pub fn vat_active(&self) -> bool {
        self.use_vat && self.weights.lambda3 > 0.0
    }

    pub fn needs_target(&self) -> bool {
        self.fdta_active() || self.cdta_active() || self.entropy_active() || self.vat_active()
    }
}

/// Masks and fixed reference predictions for one insertion point.
#[derive(Clone, Debug)]
pub struct SitePlan<T> {
    pub stochastic: Vec<Mask>,
    pub adversarial: Vec<Mask>,
    /// `log h(x; m^s)`, treated as a constant.
    pub reference_logp: Tensor<T>,
    pub impacts: Vec<ImpactVector<T>>,
}

#[derive(Clone, Debug)]
pub struct VatPlan<T> {
    pub perturbation: Tensor<T>,
    /// `log h(x)`, treated as a constant.
    pub reference_logp: Tensor<T>,
}

/// Everything random or detached in one step, frozen before differentiation.
#[derive(Clone, Debug, Default)]
pub struct StepPlan<T> {
    pub feature: Option<SitePlan<T>>,
    pub classifier: Option<SitePlan<T>>,
    pub vat: Option<VatPlan<T>>,
}

fn plan_site<T: Scalar>(
    probe: &DivergenceProbe<'_, T>,
    stochastic: Vec<Mask>,
    budget: &MaskBudget,
    linearization: Linearization,
) -> Result<SitePlan<T>> {
    let (adversarial, impacts) = adversarial_masks(probe, &stochastic, budget, linearization)?;
    let dense: Vec<T> = stochastic.iter().flat_map(Mask::multiplier::<T>).collect();
    let reference_logp = log_softmax(&probe.logits_with_multiplier(&dense)?);
    Ok(SitePlan {
        stochastic,
        adversarial,
        reference_logp,
        impacts,
    })
}

/// Samples stochastic masks, solves the adversarial masks and the VAT
/// perturbation, and records the detached references.
pub fn plan_step<T: Scalar>(
    net: &Network<T>,
    target: &Tensor<T>,
    settings: &LossSettings,
    seed: u64,
) -> Result<StepPlan<T>> {
    let mut plan = StepPlan {
        feature: None,
        classifier: None,
        vat: None,
    };
    if !(settings.fdta_active() || settings.cdta_active() || settings.vat_active()) {
        return Ok(plan);
    }
    net.check_input(target)?;
    let batch = target.batch();
    let lower = net.eval_range(net.lower_range(), target.clone(), Mode::Eval);
    let mid = net.eval_range(net.middle_range(), lower.clone(), Mode::Eval);
    let clean_logits = net.eval_range(net.upper_range(), mid.clone(), Mode::Eval);
    let clean_logp = log_softmax(&clean_logits);
    let clean = {
        let mut p = clean_logp.clone();
        for v in p.data_mut() {
            *v = v.exp();
        }
        p
    };

    if settings.fdta_active() {
        let (c, spatial) = net.feature_site_dims();
        let mut rng = rng::stream(seed, "fdta-mask", &[]);
        let stochastic = (0..batch)
            .map(|_| sample_channel_mask(c, spatial, settings.stochastic_drop_rate, &mut rng).map(Mask::from))
            .collect::<Result<Vec<_>>>()?;
        let budget = MaskBudget::new(MaskKind::Channel, settings.delta_c, c)?;
        let probe = DivergenceProbe::from_site(net, InsertionPoint::Feature, lower, clean.clone());
        plan.feature = Some(plan_site(&probe, stochastic, &budget, settings.linearization)?);
    }
    if settings.cdta_active() {
        let len = net.classifier_site_len();
        let mut rng = rng::stream(seed, "cdta-mask", &[]);
        let stochastic = (0..batch)
            .map(|_| sample_element_mask(len, settings.stochastic_drop_rate, &mut rng).map(Mask::from))
            .collect::<Result<Vec<_>>>()?;
        let budget = MaskBudget::new(MaskKind::Element, settings.delta_e, len)?;
        let probe = DivergenceProbe::from_site(net, InsertionPoint::Classifier, mid, clean.clone());
        plan.classifier = Some(plan_site(&probe, stochastic, &budget, settings.linearization)?);
    }
    if settings.vat_active() {
        let mut rng = rng::stream(seed, "vat", &[]);
        let perturbation = vat_perturbation_with_reference(net, target, &clean, &settings.vat, &mut rng)?;
        plan.vat = Some(VatPlan {
            perturbation,
            reference_logp: clean_logp,
        });
    }
    Ok(plan)
}

/// Source batch with labels.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a, T> {
    pub images: &'a Tensor<T>,
    pub labels: &'a [usize],
}

/// Evaluates all active terms under a frozen plan; returns the breakdown and
/// the gradient of `total` with respect to the parameter vector.
pub fn evaluate_plan<T: Scalar>(
    net: &Network<T>,
    source: Labeled<'_, T>,
    target: Option<&Tensor<T>>,
    plan: &StepPlan<T>,
    settings: &LossSettings,
    mode: Mode,
) -> Result<(LossBreakdown, Vec<T>)> {
    settings.weights.validate()?;
    net.check_input(source.images)?;
    check_labels(source.labels, source.images.batch(), net.num_classes())?;
    let w = &settings.weights;
    let mut grad = vec![T::zero(); net.num_params()];
    let all = 0..net.layers().len();

    let (logits, trace) = net.run(all.clone(), source.images.clone(), mode);
    let (task, g) = cross_entropy_grad(&logits, source.labels, T::one());
    net.backprop(&trace, g, &mut grad, false);

    let (mut fdta, mut cdta, mut entropy, mut vat) = (T::zero(), T::zero(), T::zero(), T::zero());
    let lambda1 = T::of(w.lambda1);
    let want_features = settings.fdta_active() || settings.cdta_active() || settings.entropy_active();
    if settings.needs_target() {
        let x = target.ok_or_else(|| DtaError::invalid("target batch required by active adaptation terms"))?;
        net.check_input(x)?;
        if want_features {
            let (a_f, tr_lower) = net.run(net.lower_range(), x.clone(), Mode::Eval);
            let (a_c, tr_mid) = net.run(net.middle_range(), a_f.clone(), Mode::Eval);
            let mut g_ac = Tensor::zeros(a_c.shape());
            let mut g_af = Tensor::zeros(a_f.shape());

            if settings.entropy_active() {
                let (logits, tr_up) = net.run(net.upper_range(), a_c.clone(), Mode::Eval);
                let (h, g) = entropy_grad(&logits, T::of(w.lambda2));
                entropy = h;
                g_ac.add_assign(&net.backprop(&tr_up, g, &mut grad, true).expect("site gradient"));
            }
            if settings.fdta_active() {
                let site = plan
                    .feature
                    .as_ref()
                    .ok_or_else(|| DtaError::invalid("plan lacks feature-site masks"))?;
                let mult = net.channel_multiplier(&as_channel(&site.adversarial)?, x.batch())?;
                let mut masked = a_f.clone();
                apply_multiplier(&mut masked, &mult);
                let (m2, tr_m2) = net.run(net.middle_range(), masked, Mode::Eval);
                let (logits, tr_u2) = net.run(net.upper_range(), m2, Mode::Eval);
                let (kl, g) = kl_grad(&site.reference_logp, &logits, lambda1);
                fdta = kl;
                let g = net.backprop(&tr_u2, g, &mut grad, true).expect("site gradient");
                let mut g = net.backprop(&tr_m2, g, &mut grad, true).expect("site gradient");
                apply_multiplier(&mut g, &mult);
                g_af.add_assign(&g);
            }
            if settings.cdta_active() {
                let site = plan
                    .classifier
                    .as_ref()
                    .ok_or_else(|| DtaError::invalid("plan lacks classifier-site masks"))?;
                let mult = net.element_multiplier(&as_element(&site.adversarial)?, x.batch())?;
                let mut masked = a_c.clone();
                apply_multiplier(&mut masked, &mult);
                let (logits, tr_u3) = net.run(net.upper_range(), masked, Mode::Eval);
                let (kl, g) = kl_grad(&site.reference_logp, &logits, lambda1);
                cdta = kl;
                let mut g = net.backprop(&tr_u3, g, &mut grad, true).expect("site gradient");
                apply_multiplier(&mut g, &mult);
                g_ac.add_assign(&g);
            }
            g_af.add_assign(&net.backprop(&tr_mid, g_ac, &mut grad, true).expect("site gradient"));
            net.backprop(&tr_lower, g_af, &mut grad, false);
        }
        if settings.vat_active() {
            let v = plan
                .vat
                .as_ref()
                .ok_or_else(|| DtaError::invalid("plan lacks a VAT perturbation"))?;
            let mut xr = x.clone();
            xr.add_assign(&v.perturbation);
            let (logits, tr) = net.run(all, xr, Mode::Eval);
            let (kl, g) = kl_grad(&v.reference_logp, &logits, T::of(w.lambda3));
            vat = kl;
            net.backprop(&tr, g, &mut grad, false);
        }
    }

    let breakdown = LossBreakdown::compose(
        task.as_f64(),
        fdta.as_f64(),
        cdta.as_f64(),
        entropy.as_f64(),
        vat.as_f64(),
        w,
    );
    if !breakdown.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(DtaError::numerical(format!("non-finite loss or gradient: {breakdown:?}")));
    }
    Ok((breakdown, grad))
}

fn as_channel(masks: &[Mask]) -> Result<Vec<crate::masking::ChannelMask>> {
    masks
        .iter()
        .map(|m| match m {
            Mask::Channel(c) => Ok(c.clone()),
            Mask::Element(_) => Err(DtaError::invalid("feature site needs channel masks")),
        })
        .collect()
}

fn as_element(masks: &[Mask]) -> Result<Vec<crate::masking::ElementMask>> {
    masks
        .iter()
        .map(|m| match m {
            Mask::Element(e) => Ok(e.clone()),
            Mask::Channel(_) => Err(DtaError::invalid("classifier site needs element masks")),
        })
        .collect()
}

/// Plans and evaluates one step: loss breakdown plus parameter gradient.
pub fn total_loss<T: Scalar>(
    net: &Network<T>,
    source: Labeled<'_, T>,
    target: Option<&Tensor<T>>,
    settings: &LossSettings,
    seed: u64,
    mode: Mode,
) -> Result<(LossBreakdown, Vec<T>, StepPlan<T>)> {
    if settings.needs_target() && target.is_none_or(|t| t.batch() == 0) {
        return Err(DtaError::invalid("target batch required when any adaptation weight is non-zero"));
    }
    if source.images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(DtaError::invalid("empty source batch"));
    }
    let plan = match target {
        Some(t) if settings.needs_target() => plan_step(net, t, settings, seed)?,
        _ => StepPlan::default(),
    };
    let (breakdown, grad) = evaluate_plan(net, source, target, &plan, settings, mode)?;
    Ok((breakdown, grad, plan))
}

fn single_term<T: Scalar>(
    net: &Network<T>,
    target: &Tensor<T>,
    settings: LossSettings,
    seed: u64,
) -> Result<LossBreakdown> {
    let plan = plan_step(net, target, &settings, seed)?;
    // The task term needs a labelled batch; a one-sample dummy is cheap and ignored.
    let dummy = target.select(&[0]);
    let labels = [0usize];
    let (b, _) = evaluate_plan(
        net,
        Labeled {
            images: &dummy,
            labels: &labels,
        },
        Some(target),
        &plan,
        &settings,
        Mode::Eval,
    )?;
    Ok(b)
}

fn only(weights: LossWeights, delta_e: Ratio<i64>, delta_c: Ratio<i64>, vat: VatSettings, rho: f64) -> LossSettings {
    LossSettings {
        weights,
        delta_e,
        delta_c,
        vat,
        linearization: Linearization::default(),
        stochastic_drop_rate: rho,
        use_fdta: false,
        use_cdta: false,
        use_entropy: false,
        use_vat: false,
    }
}

/// Feature-site consistency `KL(h(x; m^s_f) ‖ h(x; m^adv_f))` with channel masks.
pub fn fdta_loss<T: Scalar>(
    net: &Network<T>,
    target: &Tensor<T>,
    delta_c: f64,
    stochastic_drop_rate: f64,
    seed: u64,
) -> Result<T> {
    let mut s = only(
        LossWeights::new(1.0, 0.0, 0.0)?,
        Ratio::from_integer(0),
        crate::masking::ratio_from_f64(delta_c)?,
        VatSettings::new(0.0),
        stochastic_drop_rate,
    );
    s.use_fdta = true;
    Ok(T::of(single_term(net, target, s, seed)?.fdta))
}

/// Classifier-site consistency `KL(h(x; m^s_c) ‖ h(x; m^adv_c))` with element masks.
pub fn cdta_loss<T: Scalar>(
    net: &Network<T>,
    target: &Tensor<T>,
    delta_e: f64,
    stochastic_drop_rate: f64,
    seed: u64,
) -> Result<T> {
    let mut s = only(
        LossWeights::new(1.0, 0.0, 0.0)?,
        crate::masking::ratio_from_f64(delta_e)?,
        Ratio::from_integer(0),
        VatSettings::new(0.0),
        stochastic_drop_rate,
    );
    s.use_cdta = true;
    Ok(T::of(single_term(net, target, s, seed)?.cdta))
}

/// `KL(h(x) ‖ h(x + r))` with the virtual adversarial perturbation `r`.
pub fn vat_loss<T: Scalar>(net: &Network<T>, target: &Tensor<T>, vat: VatSettings, seed: u64) -> Result<T> {
    let mut s = only(
        LossWeights::new(0.0, 0.0, 1.0)?,
        Ratio::from_integer(0),
        Ratio::from_integer(0),
        vat,
        0.0,
    );
    s.use_vat = true;
    Ok(T::of(single_term(net, target, s, seed)?.vat))
}

/// Plain supervised cross entropy and its parameter gradient.
pub fn cross_entropy_gradient<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
) -> Result<(T, Vec<T>)> {
    net.check_input(images)?;
    check_labels(labels, images.batch(), net.num_classes())?;
    let mut grad = vec![T::zero(); net.num_params()];
    let (logits, trace) = net.run(0..net.layers().len(), images.clone(), mode);
    let (loss, g) = cross_entropy_grad(&logits, labels, T::one());
    net.backprop(&trace, g, &mut grad, false);
    Ok((loss, grad))
}
