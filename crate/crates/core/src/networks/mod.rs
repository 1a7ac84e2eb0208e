//! Reference networks with named mask insertion points.
//!
//! A network `h = c ∘ f` is a flat list of layers over one parameter vector.
//! Masks are applied to the outputs of two layers: the feature site (channel
//! mask, inside `f`) and the classifier site (element mask, inside `c`). Each
//! site splits the network into a lower part `h_l` and an upper part `h_u`
//! with `h(x; m) = h_u(m ⊙ h_l(x))`.

mod arch;
pub mod checkpoint;
mod layers;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use arch::{ArchName, ArchitectureId};
pub use layers::{Layer, Op};

pub(crate) use layers::Cache;

use crate::error::{DtaError, Result};
use crate::masking::{ChannelMask, ElementMask};
use crate::prob::softmax;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertionPoint {
    /// Channel-mask site after the last convolutional block.
    Feature,
    /// Element-mask site on the input of the final fully connected layer.
    Classifier,
}

impl fmt::Display for InsertionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InsertionPoint::Feature => "feature",
            InsertionPoint::Classifier => "classifier",
        })
    }
}

impl FromStr for InsertionPoint {
    type Err = DtaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(InsertionPoint::Feature),
            "classifier" => Ok(InsertionPoint::Classifier),
            other => Err(DtaError::invalid(format!("unknown insertion point `{other}`"))),
        }
    }
}

/// Whether architectural dropout layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Per-layer caches of a partial forward pass, consumed by [`Network::backprop`].
pub(crate) struct Trace<T> {
    start: usize,
    caches: Vec<Cache<T>>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    arch: ArchitectureId,
    layers: Vec<Layer>,
    feature_site: usize,
    classifier_start: usize,
    classifier_site: usize,
    params: Vec<T>,
}

/// Builds and initializes a reference network. Identical seeds give identical parameters.
pub fn build_network<T: Scalar>(arch: &ArchitectureId, seed: u64) -> Result<Network<T>> {
    Network::build(arch, seed)
}

impl<T: Scalar> Network<T> {
    pub fn build(arch: &ArchitectureId, seed: u64) -> Result<Self> {
        let mut net = Self::skeleton(arch)?;
        let mut rng = rng::stream(seed, "init", &[]);
        for layer in &net.layers {
            layer.init(&mut net.params, &mut rng);
        }
        Ok(net)
    }

    /// Network with the given parameter vector (e.g. restored from a checkpoint).
    pub fn from_params(arch: &ArchitectureId, params: Vec<T>) -> Result<Self> {
        let mut net = Self::skeleton(arch)?;
        if params.len() != net.params.len() {
            return Err(DtaError::invalid(format!(
                "architecture {} has {} parameters, got {}",
                arch.name,
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    fn skeleton(arch: &ArchitectureId) -> Result<Self> {
        let bp = arch::blueprint(arch)?;
        let mut layers = Vec::with_capacity(bp.ops.len());
        let mut shape = arch.input_shape.to_vec();
        let mut offset = 0;
        for op in bp.ops {
            let layer = Layer::new(op, &shape, offset);
            if layer.out_shape.contains(&0) {
                return Err(DtaError::invalid(format!(
                    "input shape {:?} collapses to zero inside {}",
                    arch.input_shape, arch.name
                )));
            }
            offset = layer.params.end;
            shape.clone_from(&layer.out_shape);
            layers.push(layer);
        }
        Ok(Network {
            arch: arch.clone(),
            layers,
            feature_site: bp.feature_site,
            classifier_start: bp.classifier_start,
            classifier_site: bp.classifier_site,
            params: vec![T::zero(); offset],
        })
    }

    pub fn arch(&self) -> &ArchitectureId {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Layers of the feature extractor `f` and the classifier `c`.
    pub fn feature_extractor(&self) -> &[Layer] {
        &self.layers[..self.classifier_start]
    }

    pub fn classifier(&self) -> &[Layer] {
        &self.layers[self.classifier_start..]
    }

    fn site_index(&self, point: InsertionPoint) -> usize {
        match point {
            InsertionPoint::Feature => self.feature_site,
            InsertionPoint::Classifier => self.classifier_site,
        }
    }

    /// Per-sample activation shape at an insertion point.
    pub fn site_shape(&self, point: InsertionPoint) -> &[usize] {
        &self.layers[self.site_index(point)].out_shape
    }

    /// `(C, (H, W))` at the feature site.
    pub fn feature_site_dims(&self) -> (usize, (usize, usize)) {
        let s = self.site_shape(InsertionPoint::Feature);
        (s[0], (s[1], s[2]))
    }

    /// `L` at the classifier site.
    pub fn classifier_site_len(&self) -> usize {
        self.site_shape(InsertionPoint::Classifier).iter().product()
    }

    pub(crate) fn lower_range(&self) -> Range<usize> {
        0..self.feature_site + 1
    }

    pub(crate) fn middle_range(&self) -> Range<usize> {
        self.feature_site + 1..self.classifier_site + 1
    }

    pub(crate) fn upper_range(&self) -> Range<usize> {
        self.classifier_site + 1..self.layers.len()
    }

    pub(crate) fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 4 || x.sample_shape() != self.arch.input_shape {
            return Err(DtaError::invalid(format!(
                "{} expects inputs of shape [B, {:?}], got {:?}",
                self.arch.name,
                self.arch.input_shape,
                x.shape()
            )));
        }
        if x.batch() == 0 {
            return Err(DtaError::invalid("empty input batch"));
        }
        Ok(())
    }

    /// Runs `range` of layers, caching what backprop needs.
    pub(crate) fn run(&self, range: Range<usize>, x: Tensor<T>, mode: Mode) -> (Tensor<T>, Trace<T>) {
        let start = range.start;
        let mut caches = Vec::with_capacity(range.len());
        let mut act = x;
        for i in range {
            let layer = &self.layers[i];
            let mut drop_rng = match (mode, &layer.op) {
                (Mode::Train { seed }, Op::Dropout { .. }) => {
                    Some(rng::stream(seed, "arch-dropout", &[i as u64]))
                }
                _ => None,
            };
            let (out, cache) = layer.forward(&self.params, act, drop_rng.as_mut());
            caches.push(cache);
            act = out;
        }
        (act, Trace { start, caches })
    }

    /// Forward without caches.
    pub(crate) fn eval_range(&self, range: Range<usize>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        self.run(range, x, mode).0
    }

    /// Backpropagates through the layers recorded in `trace`.
    pub(crate) fn backprop(
        &self,
        trace: &Trace<T>,
        grad: Tensor<T>,
        pgrad: &mut [T],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let mut g = grad;
        let n = trace.caches.len();
        for (j, cache) in trace.caches.iter().enumerate().rev() {
            let layer = &self.layers[trace.start + j];
            let want = need_input || j > 0;
            match layer.backward(&self.params, cache, g, pgrad, want) {
                Some(next) => g = next,
                None => {
                    debug_assert_eq!(j, 0, "gradient chain cut at layer {} of {n}", j);
                    return None;
                }
            }
        }
        Some(g)
    }

    /// Pre-softmax outputs. Absent masks are all-ones.
    pub fn logits(
        &self,
        x: &Tensor<T>,
        feature_mask: Option<&[ChannelMask]>,
        classifier_mask: Option<&[ElementMask]>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let batch = x.batch();
        let fm = feature_mask
            .map(|m| self.channel_multiplier(m, batch))
            .transpose()?;
        let cm = classifier_mask
            .map(|m| self.element_multiplier(m, batch))
            .transpose()?;
        let mut a = self.eval_range(self.lower_range(), x.clone(), mode);
        if let Some(fm) = &fm {
            apply_multiplier(&mut a, fm);
        }
        let mut a = self.eval_range(self.middle_range(), a, mode);
        if let Some(cm) = &cm {
            apply_multiplier(&mut a, cm);
        }
        Ok(self.eval_range(self.upper_range(), a, mode))
    }

    /// Class probabilities `h(x; m_f, m_c) = c(f(x; m_f); m_c)`.
    ///
    /// Mask slices hold either one mask (shared by the batch) or one per sample.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        feature_mask: Option<&[ChannelMask]>,
        classifier_mask: Option<&[ElementMask]>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        Ok(softmax(&self.logits(x, feature_mask, classifier_mask, mode)?))
    }

    /// Splits the network at an insertion point into `(h_l, h_u)`.
    pub fn split_at(&self, point: InsertionPoint) -> (LowerNet<'_, T>, UpperNet<'_, T>) {
        (LowerNet { net: self, point }, UpperNet { net: self, point })
    }

    /// Dense multiplier for a batch of channel masks (length `B·C·H·W`).
    pub(crate) fn channel_multiplier(&self, masks: &[ChannelMask], batch: usize) -> Result<Vec<T>> {
        let (c, spatial) = self.feature_site_dims();
        for m in masks {
            if m.channels() != c || m.spatial() != spatial {
                return Err(DtaError::invalid(format!(
                    "feature site expects a {c}×{spatial:?} channel mask, got {}×{:?}",
                    m.channels(),
                    m.spatial()
                )));
            }
        }
        broadcast(masks.iter().map(ChannelMask::multiplier::<T>), masks.len(), batch)
    }

    pub(crate) fn element_multiplier(&self, masks: &[ElementMask], batch: usize) -> Result<Vec<T>> {
        let len = self.classifier_site_len();
        for m in masks {
            if m.len() != len {
                return Err(DtaError::invalid(format!(
                    "classifier site expects an element mask of length {len}, got {}",
                    m.len()
                )));
            }
        }
        broadcast(masks.iter().map(ElementMask::multiplier::<T>), masks.len(), batch)
    }
}

fn broadcast<T: Scalar>(
    rows: impl Iterator<Item = Vec<T>>,
    count: usize,
    batch: usize,
) -> Result<Vec<T>> {
    let rows: Vec<Vec<T>> = rows.collect();
    match count {
        1 => Ok(rows[0].repeat(batch)),
        n if n == batch => Ok(rows.concat()),
        n => Err(DtaError::invalid(format!(
            "got {n} masks for a batch of {batch}; pass one shared mask or one per sample"
        ))),
    }
}

/// In-place `activation ⊙ multiplier` (multiplier already expanded to the batch).
pub(crate) fn apply_multiplier<T: Scalar>(act: &mut Tensor<T>, mult: &[T]) {
    debug_assert_eq!(act.data().len(), mult.len());
    for (v, &m) in act.data_mut().iter_mut().zip(mult) {
        *v *= m;
    }
}

/// `h_l`: the layers up to and including an insertion point.
pub struct LowerNet<'a, T> {
    net: &'a Network<T>,
    point: InsertionPoint,
}

/// `h_u`: the layers above an insertion point; the other site's mask is all-ones.
pub struct UpperNet<'a, T> {
    net: &'a Network<T>,
    point: InsertionPoint,
}

impl<T: Scalar> LowerNet<'_, T> {
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.net.check_input(x)?;
        let end = self.net.site_index(self.point) + 1;
        Ok(self.net.eval_range(0..end, x.clone(), mode))
    }
}

impl<T: Scalar> UpperNet<'_, T> {
    /// Class probabilities from an (already masked) site activation.
    pub fn forward(&self, site_activation: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let start = self.net.site_index(self.point) + 1;
        if site_activation.sample_shape() != self.net.site_shape(self.point) {
            return Err(DtaError::invalid(format!(
                "{} site expects activations of shape {:?}, got {:?}",
                self.point,
                self.net.site_shape(self.point),
                site_activation.sample_shape()
            )));
        }
        let end = self.net.layers.len();
        Ok(softmax(&self.net.eval_range(start..end, site_activation.clone(), mode)))
    }
}

/// Minimal differentiable classifier interface used by the VAT perturbation.
pub trait Model<T: Scalar> {
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Vector-Jacobian product of the logits with respect to the input.
    fn input_vjp(&self, x: &Tensor<T>, grad_logits: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Model<T> for Network<T> {
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Network::logits(self, x, None, None, Mode::Eval)
    }

    fn input_vjp(&self, x: &Tensor<T>, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (_, trace) = self.run(0..self.layers.len(), x.clone(), Mode::Eval);
        let mut scratch = vec![T::zero(); self.params.len()];
        Ok(self
            .backprop(&trace, grad_logits.clone(), &mut scratch, true)
            .expect("input gradient requested"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_channel_mask, sample_element_mask};
    use crate::rng::rng_from;
    use rand_distr::{Distribution, StandardNormal};

    fn random_input(arch: &ArchitectureId, batch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        let [c, h, w] = arch.input_shape;
        let data = (0..batch * c * h * w)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::from_vec(&[batch, c, h, w], data).unwrap()
    }

    #[test]
    fn tiny_parameter_count_matches_layer_arithmetic() {
        let net: Network<f64> = build_network(&ArchitectureId::tiny(), 0).unwrap();
        // conv 1→2 (3×3): 2·9+2; conv 2→4: 4·18+4; fc 36→8: 36·8+8; fc 8→3: 8·3+3
        assert_eq!(net.num_params(), 20 + 76 + 296 + 27);
        assert_eq!(net.feature_site_dims(), (4, (3, 3)));
        assert_eq!(net.classifier_site_len(), 8);
    }

    #[test]
    fn small_architectures_have_documented_sites() {
        let net: Network<f32> =
            build_network(&ArchitectureId::parse("small-3conv-2fc", [1, 28, 28], 10).unwrap(), 0).unwrap();
        assert_eq!(net.feature_site_dims(), (64, (3, 3)));
        assert_eq!(net.classifier_site_len(), 128);
        let net: Network<f32> =
            build_network(&ArchitectureId::parse("small-9conv-1fc", [3, 32, 32], 10).unwrap(), 0).unwrap();
        assert_eq!(net.feature_site_dims(), (128, (6, 6)));
        assert_eq!(net.classifier_site_len(), 128);
        assert!(ArchitectureId::parse("vgg", [3, 32, 32], 10).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: Network<f64> = build_network(&ArchitectureId::tiny(), 5).unwrap();
        let b: Network<f64> = build_network(&ArchitectureId::tiny(), 5).unwrap();
        let c: Network<f64> = build_network(&ArchitectureId::tiny(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn outputs_are_probabilities_and_ones_masks_are_identity() {
        let arch = ArchitectureId::tiny();
        let net: Network<f64> = build_network(&arch, 1).unwrap();
        let x = random_input(&arch, 5, 2);
        let p = net.forward(&x, None, None, Mode::Eval).unwrap();
        for row in p.rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let fm = [ChannelMask::ones(4, (3, 3))];
        let cm = [ElementMask::ones(8)];
        let q = net.forward(&x, Some(&fm), Some(&cm), Mode::Eval).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn mask_shape_mismatch_is_rejected() {
        let arch = ArchitectureId::tiny();
        let net: Network<f64> = build_network(&arch, 1).unwrap();
        let x = random_input(&arch, 2, 2);
        let bad = [ChannelMask::ones(5, (3, 3))];
        assert!(net.forward(&x, Some(&bad), None, Mode::Eval).is_err());
        let three = vec![ElementMask::ones(8); 3];
        assert!(net.forward(&x, None, Some(&three), Mode::Eval).is_err());
        let wrong_input = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(net.forward(&wrong_input, None, None, Mode::Eval).is_err());
    }

    #[test]
    fn dropping_a_channel_changes_the_output() {
        let arch = ArchitectureId::tiny();
        let net: Network<f64> = build_network(&arch, 3).unwrap();
        let x = random_input(&arch, 1, 4);
        let base = net.forward(&x, None, None, Mode::Eval).unwrap();
        // pick the channel with the largest activation mass
        let a = net.split_at(InsertionPoint::Feature).0.forward(&x, Mode::Eval).unwrap();
        let mass: Vec<f64> = a.data().chunks(9).map(|p| p.iter().sum()).collect();
        let top = (0..4).max_by(|&i, &j| mass[i].total_cmp(&mass[j])).unwrap();
        let mut bits = vec![true; 4];
        bits[top] = false;
        let m = [ChannelMask::from_bits(bits, (3, 3))];
        let dropped = net.forward(&x, Some(&m), None, Mode::Eval).unwrap();
        let l1: f64 = base.data().iter().zip(dropped.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 > 1e-6, "L1 change {l1}");
    }

    #[test]
    fn split_composition_is_bitwise_exact() {
        let arch = ArchitectureId::tiny();
        let net: Network<f64> = build_network(&arch, 11).unwrap();
        let mut rng = rng_from(12);
        for trial in 0..100 {
            let x = random_input(&arch, 1, 100 + trial);
            let fm = sample_channel_mask(4, (3, 3), 0.5, &mut rng).unwrap();
            let em = sample_element_mask(8, 0.5, &mut rng).unwrap();

            let (lower, upper) = net.split_at(InsertionPoint::Feature);
            let mut a = lower.forward(&x, Mode::Eval).unwrap();
            apply_multiplier(&mut a, &fm.multiplier());
            let composed = upper.forward(&a, Mode::Eval).unwrap();
            let direct = net.forward(&x, Some(std::slice::from_ref(&fm)), None, Mode::Eval).unwrap();
            assert_eq!(composed, direct);

            let (lower, upper) = net.split_at(InsertionPoint::Classifier);
            let mut a = lower.forward(&x, Mode::Eval).unwrap();
            apply_multiplier(&mut a, &em.multiplier());
            let composed = upper.forward(&a, Mode::Eval).unwrap();
            let direct = net.forward(&x, None, Some(std::slice::from_ref(&em)), Mode::Eval).unwrap();
            assert_eq!(composed, direct);
        }
    }

    #[test]
    fn identity_and_zero_masks_through_split() {
        let arch = ArchitectureId::tiny();
        let net: Network<f64> = build_network(&arch, 21).unwrap();
        let (lower, upper) = net.split_at(InsertionPoint::Classifier);
        let x1 = random_input(&arch, 1, 1);
        let x2 = random_input(&arch, 1, 2);
        let plain = net.forward(&x1, None, None, Mode::Eval).unwrap();
        assert_eq!(upper.forward(&lower.forward(&x1, Mode::Eval).unwrap(), Mode::Eval).unwrap(), plain);
        let zero = Tensor::zeros(&[1, 8]);
        let z1 = upper.forward(&zero, Mode::Eval).unwrap();
        let mut a2 = lower.forward(&x2, Mode::Eval).unwrap();
        apply_multiplier(&mut a2, &[0.0; 8]);
        assert_eq!(upper.forward(&a2, Mode::Eval).unwrap(), z1);
    }

    #[test]
    fn train_mode_dropout_is_seeded_and_eval_is_deterministic() {
        let arch = ArchitectureId::parse("small-9conv-1fc", [3, 12, 12], 4).unwrap();
        let net: Network<f64> = build_network(&arch, 0).unwrap();
        let x = random_input(&arch, 2, 3);
        let e1 = net.forward(&x, None, None, Mode::Eval).unwrap();
        let e2 = net.forward(&x, None, None, Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        let t1 = net.forward(&x, None, None, Mode::Train { seed: 9 }).unwrap();
        let t2 = net.forward(&x, None, None, Mode::Train { seed: 9 }).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, e1);
    }
}
