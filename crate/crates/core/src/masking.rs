//! Binary dropout masks used at the two insertion points.
//!
//! Element masks hold one bit per activation unit. Channel masks hold one bit
//! per feature map and expand to uniform all-zero or all-one planes, so the
//! plane-uniformity constraint holds by construction. Masks are applied
//! without inverted-dropout rescaling.

use num_rational::Ratio;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DtaError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Element,
    Channel,
}

mod bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        bits.iter()
            .map(|&b| u8::from(b))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!(
                    "mask entries must be 0 or 1, found {other}"
                ))),
            })
            .collect()
    }
}

/// One bit per activation unit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElementMask {
    #[serde(with = "bits")]
    bits: Vec<bool>,
}

impl ElementMask {
    pub fn ones(len: usize) -> Self {
        ElementMask {
            bits: vec![true; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        ElementMask { bits }
    }

    /// Builds a mask from 0/1 integers, rejecting anything else.
    pub fn from_binary(values: &[u8]) -> Result<Self> {
        Ok(ElementMask {
            bits: parse_binary(values)?,
        })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_binary(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    pub fn keep_fraction(&self) -> Ratio<usize> {
        keep_fraction(&self.bits)
    }

    pub fn multiplier<T: Scalar>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| bit_value(b)).collect()
    }
}

/// One bit per feature map, broadcast over an `height × width` plane.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelMask {
    #[serde(with = "bits")]
    bits: Vec<bool>,
    height: usize,
    width: usize,
}

impl ChannelMask {
    pub fn ones(channels: usize, spatial: (usize, usize)) -> Self {
        ChannelMask {
            bits: vec![true; channels],
            height: spatial.0,
            width: spatial.1,
        }
    }

    pub fn from_bits(bits: Vec<bool>, spatial: (usize, usize)) -> Self {
        ChannelMask {
            bits,
            height: spatial.0,
            width: spatial.1,
        }
    }

    pub fn from_binary(values: &[u8], spatial: (usize, usize)) -> Result<Self> {
        Ok(Self::from_bits(parse_binary(values)?, spatial))
    }

    pub fn channels(&self) -> usize {
        self.bits.len()
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_binary(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    pub fn keep_fraction(&self) -> Ratio<usize> {
        keep_fraction(&self.bits)
    }

    /// Expands to the flattened `C·H·W` element mask.
    pub fn expand(&self) -> ElementMask {
        let plane = self.plane_len();
        ElementMask {
            bits: self
                .bits
                .iter()
                .flat_map(|&b| std::iter::repeat_n(b, plane))
                .collect(),
        }
    }

    pub fn multiplier<T: Scalar>(&self) -> Vec<T> {
        let plane = self.plane_len();
        self.bits
            .iter()
            .flat_map(|&b| std::iter::repeat_n(bit_value::<T>(b), plane))
            .collect()
    }
}

/// Either mask flavour, for operations that accept both.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mask {
    Element(ElementMask),
    Channel(ChannelMask),
}

impl Mask {
    pub fn kind(&self) -> MaskKind {
        match self {
            Mask::Element(_) => MaskKind::Element,
            Mask::Channel(_) => MaskKind::Channel,
        }
    }

    /// Number of selectable units: entries for element masks, channels for channel masks.
    pub fn units(&self) -> usize {
        self.bits().len()
    }

    pub fn bits(&self) -> &[bool] {
        match self {
            Mask::Element(m) => m.bits(),
            Mask::Channel(m) => m.bits(),
        }
    }

    /// Length of the activation the mask covers.
    pub fn activation_len(&self) -> usize {
        match self {
            Mask::Element(m) => m.len(),
            Mask::Channel(m) => m.channels() * m.plane_len(),
        }
    }

    pub fn multiplier<T: Scalar>(&self) -> Vec<T> {
        match self {
            Mask::Element(m) => m.multiplier(),
            Mask::Channel(m) => m.multiplier(),
        }
    }

    /// Same kind and shape, with replaced unit bits.
    pub fn with_bits(&self, bits: Vec<bool>) -> Mask {
        assert_eq!(bits.len(), self.units(), "bit count must match the mask");
        match self {
            Mask::Element(_) => Mask::Element(ElementMask::from_bits(bits)),
            Mask::Channel(m) => Mask::Channel(ChannelMask::from_bits(bits, m.spatial())),
        }
    }
}

impl From<ElementMask> for Mask {
    fn from(m: ElementMask) -> Self {
        Mask::Element(m)
    }
}

impl From<ChannelMask> for Mask {
    fn from(m: ChannelMask) -> Self {
        Mask::Channel(m)
    }
}

/// Flip budget derived from a perturbation magnitude.
///
/// The magnitude is held as an exact ratio so that `max_flips = floor(δ·units)`
/// never suffers from binary rounding (`0.05 · 64` floors to 3, `0.29 · 100` to 29).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskBudget {
    kind: MaskKind,
    magnitude: Ratio<i64>,
    units: usize,
    max_flips: usize,
}

impl MaskBudget {
    pub fn new(kind: MaskKind, magnitude: Ratio<i64>, units: usize) -> Result<Self> {
        if magnitude < Ratio::from_integer(0) || magnitude > Ratio::from_integer(1) {
            return Err(DtaError::invalid(format!(
                "perturbation magnitude {magnitude} outside [0, 1]"
            )));
        }
        let units_i = i64::try_from(units).map_err(|_| DtaError::invalid("too many units"))?;
        let max_flips = (magnitude * units_i).floor().to_integer() as usize;
        Ok(MaskBudget {
            kind,
            magnitude,
            units,
            max_flips,
        })
    }

    /// Budget from a decimal magnitude, converted to the closest small ratio.
    pub fn from_f64(kind: MaskKind, magnitude: f64, units: usize) -> Result<Self> {
        Self::new(kind, ratio_from_f64(magnitude)?, units)
    }

    /// Element budget: `floor(δ_e · L)` flipped entries.
    pub fn element(magnitude: f64, length: usize) -> Result<Self> {
        Self::from_f64(MaskKind::Element, magnitude, length)
    }

    /// Channel budget: `floor(δ_c · C)` flipped channels (each worth `H·W` raw entries).
    pub fn channel(magnitude: f64, channels: usize) -> Result<Self> {
        Self::from_f64(MaskKind::Channel, magnitude, channels)
    }

    /// Budget with an explicit flip count (used by oracles and ablations).
    pub fn with_flips(kind: MaskKind, max_flips: usize, units: usize) -> Self {
        let max_flips = max_flips.min(units);
        MaskBudget {
            kind,
            magnitude: if units == 0 {
                Ratio::from_integer(0)
            } else {
                Ratio::new(max_flips as i64, units as i64)
            },
            units,
            max_flips,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn magnitude(&self) -> Ratio<i64> {
        self.magnitude
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn max_flips(&self) -> usize {
        self.max_flips
    }
}

/// Closest ratio with a denominator up to 10^6.
pub fn ratio_from_f64(x: f64) -> Result<Ratio<i64>> {
    if !x.is_finite() {
        return Err(DtaError::invalid(format!("magnitude {x} is not finite")));
    }
    const DENOM: i64 = 1_000_000;
    let scaled = (x * DENOM as f64).round() as i64;
    Ok(Ratio::new(scaled, DENOM))
}

fn check_rate(drop_rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&drop_rate) {
        return Err(DtaError::invalid(format!(
            "drop rate {drop_rate} outside [0, 1]"
        )));
    }
    Ok(())
}

fn draw_bits(n: usize, drop_rate: f64, rng: &mut Rng) -> Vec<bool> {
    // `random::<f64>()` is in [0, 1): rate 0 never drops, rate 1 always drops.
    (0..n).map(|_| rng.random::<f64>() >= drop_rate).collect()
}

/// Standard stochastic dropout mask: each entry dropped independently with `drop_rate`.
pub fn sample_element_mask(length: usize, drop_rate: f64, rng: &mut Rng) -> Result<ElementMask> {
    if length == 0 {
        return Err(DtaError::invalid("mask length must be at least 1"));
    }
    check_rate(drop_rate)?;
    Ok(ElementMask {
        bits: draw_bits(length, drop_rate, rng),
    })
}

/// Spatial dropout mask: each feature map dropped independently with `drop_rate`.
pub fn sample_channel_mask(
    channels: usize,
    spatial: (usize, usize),
    drop_rate: f64,
    rng: &mut Rng,
) -> Result<ChannelMask> {
    if channels == 0 {
        return Err(DtaError::invalid("channel count must be at least 1"));
    }
    check_rate(drop_rate)?;
    Ok(ChannelMask {
        bits: draw_bits(channels, drop_rate, rng),
        height: spatial.0,
        width: spatial.1,
    })
}

/// `mask ⊙ activation`, broadcasting one mask over every sample of the batch.
pub fn apply_mask<T: Scalar>(activation: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    if let Mask::Channel(m) = mask {
        let expected = [m.channels(), m.height, m.width];
        if activation.sample_shape() != expected {
            return Err(DtaError::invalid(format!(
                "channel mask expects samples of shape {expected:?}, got {:?}",
                activation.sample_shape()
            )));
        }
    }
    if activation.sample_len() != mask.activation_len() {
        return Err(DtaError::invalid(format!(
            "mask covers {} units but activation samples have {}",
            mask.activation_len(),
            activation.sample_len()
        )));
    }
    let mult = mask.multiplier::<T>();
    let mut out = activation.clone();
    let n = mult.len();
    for row in out.data_mut().chunks_mut(n) {
        for (v, &m) in row.iter_mut().zip(&mult) {
            *v *= m;
        }
    }
    Ok(out)
}

/// Hamming distance: differing entries for element masks, differing channel
/// bits for channel masks.
pub fn mask_distance(a: &Mask, b: &Mask) -> Result<usize> {
    match (a, b) {
        (Mask::Element(x), Mask::Element(y)) if x.len() == y.len() => {
            Ok(hamming(x.bits(), y.bits()))
        }
        (Mask::Channel(x), Mask::Channel(y))
            if x.channels() == y.channels() && x.spatial() == y.spatial() =>
        {
            Ok(hamming(x.bits(), y.bits()))
        }
        _ => Err(DtaError::invalid(format!(
            "cannot compare {:?} mask of {} units with {:?} mask of {} units",
            a.kind(),
            a.activation_len(),
            b.kind(),
            b.activation_len()
        ))),
    }
}

pub(crate) fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn keep_fraction(bits: &[bool]) -> Ratio<usize> {
    let kept = bits.iter().filter(|&&b| b).count();
    Ratio::new(kept, bits.len().max(1))
}

fn parse_binary(values: &[u8]) -> Result<Vec<bool>> {
    values
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(DtaError::invalid(format!(
                "mask entries must be 0 or 1, found {other}"
            ))),
        })
        .collect()
}

#[inline]
fn bit_value<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}
