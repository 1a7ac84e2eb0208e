//! Domain pairs for the five small-dataset configurations.
//!
//! Raw downloads live under a data root (default `./data`, or `DATA_ROOT`):
//!
//! ```text
//! <root>/mnist/train-images-idx3-ubyte.gz
//! <root>/mnist/train-labels-idx1-ubyte.gz
//! <root>/mnist/t10k-images-idx3-ubyte.gz
//! <root>/mnist/t10k-labels-idx1-ubyte.gz
//! <root>/usps/usps.bz2
//! <root>/usps/usps.t.bz2
//! <root>/svhn/train_32x32.mat
//! <root>/svhn/test_32x32.mat
//! <root>/cifar10/cifar-10-binary.tar.gz
//! <root>/stl10/stl10_binary.tar.gz
//! ```
//!
//! Preprocessing per pair:
//!
//! | pair          | input   | conversion                                  | normalization (per channel) |
//! |---------------|---------|---------------------------------------------|-----------------------------|
//! | svhn→mnist    | 3×32×32 | MNIST 28→32 bilinear, gray replicated to RGB | mean 0.5, std 0.5           |
//! | mnist↔usps    | 1×28×28 | USPS 16→28 bilinear                         | mean 0.5, std 0.5           |
//! | cifar↔stl     | 3×32×32 | STL 96→32 3×3 block average; 9 shared classes | CIFAR-10 mean/std           |
//!
//! Random horizontal flips are applied to CIFAR/STL training batches only.

pub mod fixtures;
pub mod formats;
pub mod image;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use image::ImageSet;

use crate::error::{DtaError, Result};
use crate::networks::{ArchName, ArchitectureId};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairName {
    #[serde(rename = "svhn2mnist")]
    SvhnToMnist,
    #[serde(rename = "mnist2usps")]
    MnistToUsps,
    #[serde(rename = "usps2mnist")]
    UspsToMnist,
    #[serde(rename = "cifar2stl")]
    CifarToStl,
    #[serde(rename = "stl2cifar")]
    StlToCifar,
}

impl PairName {
    pub const ALL: [PairName; 5] = [
        PairName::SvhnToMnist,
        PairName::MnistToUsps,
        PairName::UspsToMnist,
        PairName::CifarToStl,
        PairName::StlToCifar,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PairName::SvhnToMnist => "svhn2mnist",
            PairName::MnistToUsps => "mnist2usps",
            PairName::UspsToMnist => "usps2mnist",
            PairName::CifarToStl => "cifar2stl",
            PairName::StlToCifar => "stl2cifar",
        }
    }

    pub fn domains(&self) -> (Dataset, Dataset) {
        use Dataset::*;
        match self {
            PairName::SvhnToMnist => (Svhn, Mnist),
            PairName::MnistToUsps => (Mnist, Usps),
            PairName::UspsToMnist => (Usps, Mnist),
            PairName::CifarToStl => (Cifar10, Stl10),
            PairName::StlToCifar => (Stl10, Cifar10),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            PairName::MnistToUsps | PairName::UspsToMnist => [1, 28, 28],
            _ => [3, 32, 32],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            PairName::CifarToStl | PairName::StlToCifar => 9,
            _ => 10,
        }
    }

    /// Backbone used for this pair in the hyperparameter table.
    pub fn default_arch(&self) -> ArchName {
        match self {
            PairName::MnistToUsps | PairName::UspsToMnist => ArchName::Small3Conv2Fc,
            _ => ArchName::Small9Conv1Fc,
        }
    }

    pub fn architecture(&self) -> ArchitectureId {
        ArchitectureId::new(self.default_arch(), self.input_shape(), self.num_classes())
    }

    pub fn normalization(&self) -> Normalization {
        match self {
            PairName::CifarToStl | PairName::StlToCifar => Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
            _ => Normalization {
                mean: vec![0.5; self.input_shape()[0]],
                std: vec![0.5; self.input_shape()[0]],
            },
        }
    }

    pub fn flip_augment(&self) -> bool {
        matches!(self, PairName::CifarToStl | PairName::StlToCifar)
    }
}

impl fmt::Display for PairName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairName {
    type Err = DtaError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace("->", "2").replace('→', "2").replace(['_', '-'], "2");
        PairName::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| {
                DtaError::invalid(format!(
                    "unknown configuration {s:?} (svhn2mnist, mnist2usps, usps2mnist, cifar2stl, stl2cifar)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Mnist,
    Usps,
    Svhn,
    Cifar10,
    Stl10,
}

impl Dataset {
    pub const ALL: [Dataset; 5] = [Dataset::Mnist, Dataset::Usps, Dataset::Svhn, Dataset::Cifar10, Dataset::Stl10];

    pub fn as_str(&self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Usps => "usps",
            Dataset::Svhn => "svhn",
            Dataset::Cifar10 => "cifar10",
            Dataset::Stl10 => "stl10",
        }
    }

    /// Files expected under `<root>/<name>/`.
    pub fn files(&self) -> &'static [&'static str] {
        match self {
            Dataset::Mnist => &[
                "train-images-idx3-ubyte.gz",
                "train-labels-idx1-ubyte.gz",
                "t10k-images-idx3-ubyte.gz",
                "t10k-labels-idx1-ubyte.gz",
            ],
            Dataset::Usps => &["usps.bz2", "usps.t.bz2"],
            Dataset::Svhn => &["train_32x32.mat", "test_32x32.mat"],
            Dataset::Cifar10 => &["cifar-10-binary.tar.gz"],
            Dataset::Stl10 => &["stl10_binary.tar.gz"],
        }
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.as_str())
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = DtaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let s = match s.as_str() {
            "cifar" => "cifar10",
            "stl" => "stl10",
            other => other,
        };
        Dataset::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| DtaError::invalid(format!("unknown dataset {s:?} (mnist, usps, svhn, cifar10, stl10)")))
    }
}

/// Per-channel standardization applied to `pixel / 255`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    images: ImageSet,
    labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: ImageSet, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DtaError::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(LabeledImages { images, labels })
    }

    pub fn images(&self) -> &ImageSet {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Self {
        LabeledImages {
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn map_images(self, f: impl FnOnce(ImageSet) -> Result<ImageSet>) -> Result<Self> {
        Ok(LabeledImages {
            images: f(self.images)?,
            labels: self.labels,
        })
    }

    /// Keeps classes with a `Some` entry in `map`, relabelled.
    fn remap(&self, map: &[Option<usize>]) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| map[self.labels[i]].is_some()).collect();
        let mut out = self.select(&keep);
        for l in &mut out.labels {
            *l = map[*l].expect("filtered");
        }
        out
    }
}

/// Target-domain training images. There is deliberately no way to attach or
/// read labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledImages {
    images: ImageSet,
}

impl UnlabeledImages {
    pub fn new(images: ImageSet) -> Self {
        UnlabeledImages { images }
    }

    pub fn images(&self) -> &ImageSet {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Optional per-split caps; subsets are drawn without replacement from the seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsample {
    pub source: Option<usize>,
    pub target: Option<usize>,
    pub test: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct DomainPair {
    name: PairName,
    source_train: LabeledImages,
    target_train: UnlabeledImages,
    target_test: LabeledImages,
}

impl DomainPair {
    /// Assembles a pair from preprocessed splits (shapes must agree).
    pub fn from_parts(
        name: PairName,
        source_train: LabeledImages,
        target_train: UnlabeledImages,
        target_test: LabeledImages,
    ) -> Result<Self> {
        let shape = name.input_shape();
        for (split, s) in [
            ("source_train", source_train.images.shape()),
            ("target_train", target_train.images.shape()),
            ("target_test", target_test.images.shape()),
        ] {
            if s != shape {
                return Err(DtaError::invalid(format!("{split} has shape {s:?}, {name} needs {shape:?}")));
            }
        }
        let k = name.num_classes();
        if let Some(&bad) = source_train.labels.iter().chain(&target_test.labels).find(|&&l| l >= k) {
            return Err(DtaError::invalid(format!("label {bad} outside [0, {k})")));
        }
        if source_train.is_empty() || target_train.is_empty() || target_test.is_empty() {
            return Err(DtaError::invalid("every split of a domain pair must be non-empty"));
        }
        Ok(DomainPair {
            name,
            source_train,
            target_train,
            target_test,
        })
    }

    pub fn name(&self) -> PairName {
        self.name
    }

    pub fn num_classes(&self) -> usize {
        self.name.num_classes()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.name.input_shape()
    }

    pub fn normalization(&self) -> Normalization {
        self.name.normalization()
    }

    pub fn source_train(&self) -> &LabeledImages {
        &self.source_train
    }

    pub fn target_train(&self) -> &UnlabeledImages {
        &self.target_train
    }

    /// Held-out target split, used only by evaluation.
    pub fn target_test(&self) -> &LabeledImages {
        &self.target_test
    }

    /// Caps split sizes; the kept indices are a seeded draw, in original order.
    pub fn subsample(self, caps: &Subsample, seed: u64) -> Self {
        let pick = |n: usize, cap: Option<usize>, label: &str| -> Option<Vec<usize>> {
            let cap = cap?;
            if cap >= n {
                return None;
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::stream(seed, label, &[]));
            idx.truncate(cap.max(1));
            idx.sort_unstable();
            Some(idx)
        };
        let DomainPair {
            name,
            mut source_train,
            mut target_train,
            mut target_test,
        } = self;
        if let Some(i) = pick(source_train.len(), caps.source, "subsample-source") {
            source_train = source_train.select(&i);
        }
        if let Some(i) = pick(target_train.len(), caps.target, "subsample-target") {
            target_train = UnlabeledImages::new(target_train.images.select(&i));
        }
        if let Some(i) = pick(target_test.len(), caps.test, "subsample-test") {
            target_test = target_test.select(&i);
        }
        DomainPair {
            name,
            source_train,
            target_train,
            target_test,
        }
    }
}

// ---------------------------------------------------------------------------
// loading

struct Splits {
    train: LabeledImages,
    test: LabeledImages,
}

fn need(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(DtaError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file missing (run `dta fetch`)"),
        ))
    }
}

fn load_dataset(ds: Dataset, root: &Path) -> Result<Splits> {
    let dir = ds.dir(root);
    let f = |name: &str| need(dir.join(name));
    match ds {
        Dataset::Mnist => Ok(Splits {
            train: LabeledImages::new(
                formats::read_idx_images(&f("train-images-idx3-ubyte.gz")?)?,
                formats::read_idx_labels(&f("train-labels-idx1-ubyte.gz")?)?,
            )?,
            test: LabeledImages::new(
                formats::read_idx_images(&f("t10k-images-idx3-ubyte.gz")?)?,
                formats::read_idx_labels(&f("t10k-labels-idx1-ubyte.gz")?)?,
            )?,
        }),
        Dataset::Usps => {
            let (a, b) = formats::read_usps(&f("usps.bz2")?)?;
            let (c, d) = formats::read_usps(&f("usps.t.bz2")?)?;
            Ok(Splits {
                train: LabeledImages::new(a, b)?,
                test: LabeledImages::new(c, d)?,
            })
        }
        Dataset::Svhn => {
            let (a, b) = formats::read_svhn(&f("train_32x32.mat")?)?;
            let (c, d) = formats::read_svhn(&f("test_32x32.mat")?)?;
            Ok(Splits {
                train: LabeledImages::new(a, b)?,
                test: LabeledImages::new(c, d)?,
            })
        }
        Dataset::Cifar10 => {
            let ((a, b), (c, d)) = formats::read_cifar10(&f("cifar-10-binary.tar.gz")?)?;
            Ok(Splits {
                train: LabeledImages::new(a, b)?,
                test: LabeledImages::new(c, d)?,
            })
        }
        Dataset::Stl10 => {
            let ((a, b), (c, d)) = formats::read_stl10(&f("stl10_binary.tar.gz")?)?;
            Ok(Splits {
                train: LabeledImages::new(a, b)?,
                test: LabeledImages::new(c, d)?,
            })
        }
    }
}

/// CIFAR-10 label → shared 9-class label (frog dropped).
pub const CIFAR_SHARED: [Option<usize>; 10] =
    [Some(0), Some(1), Some(2), Some(3), Some(4), Some(5), None, Some(6), Some(7), Some(8)];
/// STL-10 label (0-based) → shared 9-class label (monkey dropped).
pub const STL_SHARED: [Option<usize>; 10] =
    [Some(0), Some(2), Some(1), Some(3), Some(4), Some(5), Some(6), None, Some(7), Some(8)];

/// Brings one dataset split into the input space of `pair`.
pub fn preprocess(pair: PairName, ds: Dataset, set: LabeledImages) -> Result<LabeledImages> {
    let [c, h, w] = pair.input_shape();
    let set = match ds {
        Dataset::Cifar10 => set.remap(&CIFAR_SHARED),
        Dataset::Stl10 => set.remap(&STL_SHARED),
        _ => set,
    };
    set.map_images(|img| {
        let mut img = if ds == Dataset::Stl10 && img.shape()[1] == 3 * h {
            img.downscale(3)?
        } else {
            img.resize(h, w)
        };
        if img.shape()[0] == 1 && c > 1 {
            img = img.replicate_channels(c)?;
        }
        if img.shape() != [c, h, w] {
            return Err(DtaError::invalid(format!("{ds} images of shape {:?} do not fit {pair}", img.shape())));
        }
        Ok(img)
    })
}

/// Loads, preprocesses and optionally subsamples a configuration's domains.
pub fn load_pair(pair: PairName, data_root: &Path, subsample: &Subsample, seed: u64) -> Result<DomainPair> {
    let (src, tgt) = pair.domains();
    let source = load_dataset(src, data_root)?;
    let target = load_dataset(tgt, data_root)?;
    let source_train = preprocess(pair, src, source.train)?;
    let target_train = UnlabeledImages::new(preprocess(pair, tgt, target.train)?.images);
    let target_test = preprocess(pair, tgt, target.test)?;
    Ok(DomainPair::from_parts(pair, source_train, target_train, target_test)?.subsample(subsample, seed))
}

/// Normalized tensor of the selected images.
pub fn to_tensor<T: Scalar>(images: &ImageSet, indices: &[usize], norm: &Normalization, flips: Option<&[bool]>) -> Tensor<T> {
    let [c, h, w] = images.shape();
    let scale: Vec<(f64, f64)> = (0..c)
        .map(|ch| (norm.mean[ch % norm.mean.len()], norm.std[ch % norm.std.len()]))
        .collect();
    let mut data = Vec::with_capacity(indices.len() * c * h * w);
    for (k, &i) in indices.iter().enumerate() {
        let img = images.image(i);
        let flip = flips.is_some_and(|f| f[k]);
        for ch in 0..c {
            let (m, s) = scale[ch];
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    let p = f64::from(img[ch * h * w + y * w + sx]) / 255.0;
                    data.push(T::of((p - m) / s));
                }
            }
        }
    }
    Tensor::from_vec(&[indices.len(), c, h, w], data).expect("shape matches data")
}

// ---------------------------------------------------------------------------
// batches

/// One training step's inputs.
#[derive(Clone, Debug)]
pub struct StepBatch<T> {
    pub source: Tensor<T>,
    pub labels: Vec<usize>,
    pub target: Tensor<T>,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

/// Deterministic per-epoch batch schedule. Each domain is shuffled
/// independently every epoch; an epoch lasts `ceil(max(|S|, |T|) / B)` steps
/// and both domains wrap around their permutation, so every batch is full.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    pair: &'a DomainPair,
    batch_size: usize,
    seed: u64,
    augment: bool,
}

impl<'a> BatchStream<'a> {
    pub fn new(pair: &'a DomainPair, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(DtaError::invalid("batch size must be ≥ 1"));
        }
        Ok(BatchStream {
            pair,
            batch_size,
            seed,
            augment: pair.name.flip_augment(),
        })
    }

    pub fn with_augmentation(mut self, on: bool) -> Self {
        self.augment = on;
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.pair.source_train.len().max(self.pair.target_train.len());
        n.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> EpochBatches<'a> {
        let perm = |n: usize, label: &str| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng::stream(self.seed, label, &[epoch]));
            p
        };
        EpochBatches {
            stream: self.clone(),
            epoch,
            source_order: perm(self.pair.source_train.len(), "source-order"),
            target_order: perm(self.pair.target_train.len(), "target-order"),
            steps: self.steps_per_epoch(),
        }
    }
}

pub struct EpochBatches<'a> {
    stream: BatchStream<'a>,
    epoch: u64,
    source_order: Vec<usize>,
    target_order: Vec<usize>,
    steps: usize,
}

impl EpochBatches<'_> {
    /// Batch number `step` of this epoch.
    pub fn batch<T: Scalar>(&self, step: usize) -> StepBatch<T> {
        let b = self.stream.batch_size;
        let pick = |order: &[usize]| -> Vec<usize> { (0..b).map(|i| order[(step * b + i) % order.len()]).collect() };
        let source_indices = pick(&self.source_order);
        let target_indices = pick(&self.target_order);
        let pair = self.stream.pair;
        let norm = pair.normalization();
        let flips = |label: &str| -> Option<Vec<bool>> {
            self.stream.augment.then(|| {
                let mut r = rng::stream(self.stream.seed, label, &[self.epoch, step as u64]);
                (0..b).map(|_| r.random_bool(0.5)).collect()
            })
        };
        let sf = flips("flip-source");
        let tf = flips("flip-target");
        StepBatch {
            source: to_tensor(pair.source_train.images(), &source_indices, &norm, sf.as_deref()),
            labels: source_indices.iter().map(|&i| pair.source_train.labels[i]).collect(),
            target: to_tensor(pair.target_train.images(), &target_indices, &norm, tf.as_deref()),
            source_indices,
            target_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }
}
