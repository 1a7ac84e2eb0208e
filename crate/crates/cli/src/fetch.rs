//! Dataset download with MD5 verification into the documented cache layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use md5::{Digest, Md5};

use dta_core::datasets::Dataset;

/// `(file, url, md5)` for every file of a dataset.
pub fn sources(ds: Dataset) -> &'static [(&'static str, &'static str, &'static str)] {
    match ds {
        Dataset::Mnist => &[
            (
                "train-images-idx3-ubyte.gz",
                "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
                "f68b3c2dcbeaaa9fbdd348bbdeb94873",
            ),
            (
                "train-labels-idx1-ubyte.gz",
                "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
                "d53e105ee54ea40749a09fcbcd1e9432",
            ),
            (
                "t10k-images-idx3-ubyte.gz",
                "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
                "9fb629c4189551a2d022fa330f9573f3",
            ),
            (
                "t10k-labels-idx1-ubyte.gz",
                "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
                "ec29112dd5afa0611ce80d1b7f02629c",
            ),
        ],
        Dataset::Usps => &[
            (
                "usps.bz2",
                "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/multiclass/usps.bz2",
                "ec16c51db3855ca6c91edd34d0e9b197",
            ),
            (
                "usps.t.bz2",
                "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/multiclass/usps.t.bz2",
                "8ea070ee2aca1ac39742fdd1ef5ed118",
            ),
        ],
        Dataset::Svhn => &[
            (
                "train_32x32.mat",
                "http://ufldl.stanford.edu/housenumbers/train_32x32.mat",
                "e26dedcc434d2e4c54c9b2d4a06d8373",
            ),
            (
                "test_32x32.mat",
                "http://ufldl.stanford.edu/housenumbers/test_32x32.mat",
                "eb5a983be6a315427106f1b164d9cef3",
            ),
        ],
        Dataset::Cifar10 => &[(
            "cifar-10-binary.tar.gz",
            "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
            "c32a1d4ab5d03f1284b67883e8d87530",
        )],
        Dataset::Stl10 => &[(
            "stl10_binary.tar.gz",
            "http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz",
            "91f7769df0f17e558f3565bffb0c7dfb",
        )],
    }
}

#[derive(Clone, Debug, Default)]
pub struct FetchOptions {
    /// Replaces each URL with `<mirror>/<dataset>/<file>`.
    pub mirror: Option<String>,
    /// Per-file checksum overrides, keyed by `<dataset>/<file>`.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Cached,
    Downloaded,
}

pub fn md5_file(path: &Path) -> io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut hasher = Md5::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Fetches one dataset; files already present with the right checksum are kept.
pub fn fetch_dataset(ds: Dataset, root: &Path, opts: &FetchOptions) -> Result<Vec<(PathBuf, Outcome)>> {
    let dir = ds.dir(root);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut out = Vec::new();
    for &(file, url, md5) in sources(ds) {
        let key = format!("{ds}/{file}");
        let expected = opts.checksums.get(&key).map_or(md5, String::as_str);
        let path = dir.join(file);
        if path.exists() {
            if md5_file(&path)? == expected {
                out.push((path, Outcome::Cached));
                continue;
            }
            fs::remove_file(&path)?;
        }
        let url = match &opts.mirror {
            Some(m) => format!("{}/{key}", m.trim_end_matches('/')),
            None => url.to_string(),
        };
        download(&url, &path, expected)?;
        out.push((path, Outcome::Downloaded));
    }
    Ok(out)
}

/// Streams `url` into `<dest>.part`, verifies, then renames. The partial file
/// is removed on any failure.
fn download(url: &str, dest: &Path, expected_md5: &str) -> Result<()> {
    let part = dest.with_extension("part");
    let result = (|| -> Result<String> {
        let response = ureq::get(url).call().with_context(|| format!("GET {url}"))?;
        let mut reader = response.into_body().into_reader();
        let mut file = fs::File::create(&part).with_context(|| format!("creating {}", part.display()))?;
        let mut hasher = Md5::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = reader.read(&mut buf).with_context(|| format!("reading {url}"))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            file.write_all(&buf[..n])?;
        }
        file.sync_all()?;
        Ok(format!("{:x}", hasher.finalize()))
    })();
    match result {
        Ok(actual) if actual == expected_md5 => {
            fs::rename(&part, dest).with_context(|| format!("moving into {}", dest.display()))?;
            Ok(())
        }
        Ok(actual) => {
            let _ = fs::remove_file(&part);
            bail!("checksum mismatch for {}: expected {expected_md5}, got {actual}", dest.display())
        }
        Err(e) => {
            let _ = fs::remove_file(&part);
            Err(e)
        }
    }
}
