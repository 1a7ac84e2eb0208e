//! Reference architectures and their insertion points.
//!
//! | id | layers |
//! |----|--------|
//! | `tiny-test` | conv3×3(1→2,p1) relu maxpool2 · conv3×3(2→C,p1) relu **[feature site]** · flatten fc(9C→L) relu **[classifier site]** fc(L→K) |
//! | `small-3conv-2fc` | conv5×5(c→32,p2) relu maxpool2 · conv3×3(32→64,p1) relu maxpool2 · conv3×3(64→64,p1) relu maxpool2 **[feature site]** · flatten fc(→128) relu **[classifier site]** fc(128→K) |
//! | `small-9conv-1fc` | 3×[conv3×3(→128,p1) relu] maxpool2 dropout(0.5) · 3×[conv3×3(→256,p1) relu] maxpool2 dropout(0.5) · conv3×3(256→512) relu conv1×1(512→256) relu conv1×1(256→128) relu **[feature site]** · global-avg-pool **[classifier site]** fc(128→K) |
//!
//! The feature site sits after the last convolutional block (channel masks);
//! the classifier site sits on the input of the final fully connected layer
//! (element masks). For `small-9conv-1fc` the classifier is the pooling layer
//! plus the single FC layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::Op;
use crate::error::{DtaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum ArchName {
    Small9Conv1Fc,
    Small3Conv2Fc,
    /// Small test network; `channels` is C at the feature site, `hidden` is L at the classifier site.
    TinyTest { channels: usize, hidden: usize },
}

impl ArchName {
    pub const TINY_DEFAULT: ArchName = ArchName::TinyTest {
        channels: 4,
        hidden: 8,
    };
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ArchName::Small9Conv1Fc => f.write_str("small-9conv-1fc"),
            ArchName::Small3Conv2Fc => f.write_str("small-3conv-2fc"),
            ArchName::TinyTest { channels, hidden } => {
                if (channels, hidden) == (4, 8) {
                    f.write_str("tiny-test")
                } else {
                    write!(f, "tiny-test-c{channels}-h{hidden}")
                }
            }
        }
    }
}

impl FromStr for ArchName {
    type Err = DtaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-9conv-1fc" => Ok(ArchName::Small9Conv1Fc),
            "small-3conv-2fc" => Ok(ArchName::Small3Conv2Fc),
            "tiny-test" => Ok(ArchName::TINY_DEFAULT),
            other => {
                let parsed = other.strip_prefix("tiny-test-c").and_then(|rest| {
                    let (c, h) = rest.split_once("-h")?;
                    Some(ArchName::TinyTest {
                        channels: c.parse().ok()?,
                        hidden: h.parse().ok()?,
                    })
                });
                parsed.ok_or_else(|| DtaError::invalid(format!("unknown architecture `{other}`")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureId {
    pub name: ArchName,
    /// `(channels, height, width)` of one input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ArchitectureId {
    pub fn new(name: ArchName, input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchitectureId {
            name,
            input_shape,
            num_classes,
        }
    }

    /// `tiny-test` with its documented defaults: 1×6×6 input, C=4, L=8, 3 classes.
    pub fn tiny() -> Self {
        Self::new(ArchName::TINY_DEFAULT, [1, 6, 6], 3)
    }

    pub fn tiny_with(channels: usize, hidden: usize) -> Self {
        Self::new(ArchName::TinyTest { channels, hidden }, [1, 6, 6], 3)
    }

    pub fn parse(name: &str, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        Ok(Self::new(name.parse()?, input_shape, num_classes))
    }
}

/// Layer list plus the layer indices whose outputs carry the masks.
pub(crate) struct Blueprint {
    pub ops: Vec<Op>,
    pub feature_site: usize,
    pub classifier_start: usize,
    pub classifier_site: usize,
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Op {
    Op::Conv2d {
        in_channels,
        out_channels,
        kernel,
        padding,
    }
}

pub(crate) fn blueprint(arch: &ArchitectureId) -> Result<Blueprint> {
    let [c, h, w] = arch.input_shape;
    let k = arch.num_classes;
    if c == 0 || k < 2 {
        return Err(DtaError::invalid(format!(
            "architecture {} needs at least one input channel and two classes",
            arch.name
        )));
    }
    let pool = Op::MaxPool2d { size: 2 };
    match arch.name {
        ArchName::TinyTest { channels, hidden } => {
            if h < 2 || w < 2 || channels == 0 || hidden == 0 {
                return Err(DtaError::invalid("tiny-test needs H,W ≥ 2 and non-zero widths"));
            }
            let flat = channels * (h / 2) * (w / 2);
            Ok(Blueprint {
                ops: vec![
                    conv(c, 2, 3, 1),
                    Op::Relu,
                    pool,
                    conv(2, channels, 3, 1),
                    Op::Relu,
                    Op::Flatten,
                    Op::Linear {
                        inputs: flat,
                        outputs: hidden,
                    },
                    Op::Relu,
                    Op::Linear {
                        inputs: hidden,
                        outputs: k,
                    },
                ],
                feature_site: 4,
                classifier_start: 5,
                classifier_site: 7,
            })
        }
        ArchName::Small3Conv2Fc => {
            if h < 8 || w < 8 {
                return Err(DtaError::invalid("small-3conv-2fc needs inputs of at least 8×8"));
            }
            let flat = 64 * (h / 8) * (w / 8);
            Ok(Blueprint {
                ops: vec![
                    conv(c, 32, 5, 2),
                    Op::Relu,
                    pool.clone(),
                    conv(32, 64, 3, 1),
                    Op::Relu,
                    pool.clone(),
                    conv(64, 64, 3, 1),
                    Op::Relu,
                    pool,
                    Op::Flatten,
                    Op::Linear {
                        inputs: flat,
                        outputs: 128,
                    },
                    Op::Relu,
                    Op::Linear {
                        inputs: 128,
                        outputs: k,
                    },
                ],
                feature_site: 8,
                classifier_start: 9,
                classifier_site: 11,
            })
        }
        ArchName::Small9Conv1Fc => {
            if h < 12 || w < 12 {
                return Err(DtaError::invalid("small-9conv-1fc needs inputs of at least 12×12"));
            }
            let mut ops = Vec::new();
            let mut prev = c;
            for width in [128, 256] {
                for _ in 0..3 {
                    ops.push(conv(prev, width, 3, 1));
                    ops.push(Op::Relu);
                    prev = width;
                }
                ops.push(pool.clone());
                ops.push(Op::Dropout { rate: 0.5 });
            }
            ops.extend([
                conv(256, 512, 3, 0),
                Op::Relu,
                conv(512, 256, 1, 0),
                Op::Relu,
                conv(256, 128, 1, 0),
                Op::Relu,
            ]);
            let feature_site = ops.len() - 1;
            ops.push(Op::GlobalAvgPool);
            let classifier_site = ops.len() - 1;
            ops.push(Op::Linear {
                inputs: 128,
                outputs: k,
            });
            Ok(Blueprint {
                ops,
                feature_site,
                classifier_start: classifier_site,
                classifier_site,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for name in [
            ArchName::Small9Conv1Fc,
            ArchName::Small3Conv2Fc,
            ArchName::TINY_DEFAULT,
            ArchName::TinyTest {
                channels: 6,
                hidden: 8,
            },
        ] {
            assert_eq!(name.to_string().parse::<ArchName>().unwrap(), name);
        }
        assert!("resnet-50".parse::<ArchName>().is_err());
    }
}
