//! Small synthetic stand-ins written in the real on-disk formats, for tests
//! and smoke runs without the public datasets. Each class draws a bright
//! block at a class-specific grid cell over low-amplitude noise.

use std::fs;
use std::io::Write;
use std::path::Path;

use bzip2::write::BzEncoder;
use flate2::write::{GzEncoder, ZlibEncoder};
use flate2::Compression;
use rand::Rng as _;

use super::Dataset;
use crate::error::{DtaError, Result};
use crate::rng::{self, Rng};

/// Images per split written by [`write_synthetic_root`].
#[derive(Clone, Copy, Debug)]
pub struct FixtureSize {
    pub train: usize,
    pub test: usize,
}

/// `h×w` grayscale image of `class` (0-based) with `classes` grid cells.
pub fn pattern(class: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<u8> {
    let (cy, cx) = (class / 4, class % 4);
    let (bh, bw) = (h / 3, w / 4);
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let inside = y / bh.max(1) == cy && x / bw.max(1) == cx;
            let noise: u8 = rng.random_range(0..40);
            if inside {
                215 + noise
            } else {
                noise
            }
        })
        .collect()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DtaError + '_ {
    move |e| DtaError::io(path, e)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::fast());
    e.write_all(bytes).expect("in-memory write");
    e.finish().expect("in-memory write")
}

fn idx(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn samples(n: usize, classes: usize, h: usize, w: usize, rng: &mut Rng) -> (Vec<Vec<u8>>, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let imgs = labels.iter().map(|&c| pattern(c, h, w, rng)).collect();
    (imgs, labels)
}

pub fn write_mnist(dir: &Path, size: FixtureSize, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, "fixture-mnist", &[]);
    for (prefix, n) in [("train", size.train), ("t10k", size.test)] {
        let (imgs, labels) = samples(n, 10, 28, 28, &mut rng);
        let pixels: Vec<u8> = imgs.concat();
        write_file(&dir.join(format!("{prefix}-images-idx3-ubyte.gz")), &gzip(&idx(&[n as u32, 28, 28], &pixels)))?;
        let labels: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
        write_file(&dir.join(format!("{prefix}-labels-idx1-ubyte.gz")), &gzip(&idx(&[n as u32], &labels)))?;
    }
    Ok(())
}

pub fn write_usps(dir: &Path, size: FixtureSize, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, "fixture-usps", &[]);
    for (name, n) in [("usps.bz2", size.train), ("usps.t.bz2", size.test)] {
        let (imgs, labels) = samples(n, 10, 16, 16, &mut rng);
        let mut text = String::new();
        for (img, l) in imgs.iter().zip(&labels) {
            text.push_str(&(l + 1).to_string());
            for (j, &p) in img.iter().enumerate() {
                text.push_str(&format!(" {}:{:.6}", j + 1, f64::from(p) / 127.5 - 1.0));
            }
            text.push('\n');
        }
        let mut e = BzEncoder::new(Vec::new(), bzip2::Compression::fast());
        e.write_all(text.as_bytes()).expect("in-memory write");
        write_file(&dir.join(name), &e.finish().expect("in-memory write"))?;
    }
    Ok(())
}

fn mat_element(ty: u32, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&ty.to_le_bytes());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
    out.resize(out.len() + (8 - data.len() % 8) % 8, 0);
    out
}

/// A `miMATRIX` element for a real numeric array (`class` 6 = double, 9 = uint8).
pub fn mat_matrix(name: &str, dims: &[usize], class: u8, ty: u32, data: &[u8]) -> Vec<u8> {
    let mut body = mat_element(6, &[class, 0, 0, 0, 0, 0, 0, 0]);
    let dims: Vec<u8> = dims.iter().flat_map(|&d| (d as i32).to_le_bytes()).collect();
    body.extend(mat_element(5, &dims));
    body.extend(mat_element(1, name.as_bytes()));
    body.extend(mat_element(ty, data));
    mat_element(14, &body)
}

/// A level-5 MAT file; each matrix is stored inside a `miCOMPRESSED` element.
pub fn mat_file(matrices: &[Vec<u8>]) -> Vec<u8> {
    let mut out = vec![b' '; 116];
    out[..18].copy_from_slice(b"MATLAB 5.0 MAT-fil");
    out.extend_from_slice(&[0; 8]);
    out.extend_from_slice(&[0x00, 0x01]);
    out.extend_from_slice(b"IM");
    for m in matrices {
        let mut z = ZlibEncoder::new(Vec::new(), Compression::fast());
        z.write_all(m).expect("in-memory write");
        let z = z.finish().expect("in-memory write");
        out.extend_from_slice(&15u32.to_le_bytes());
        out.extend_from_slice(&(z.len() as u32).to_le_bytes());
        out.extend_from_slice(&z);
    }
    out
}

pub fn write_svhn(dir: &Path, size: FixtureSize, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, "fixture-svhn", &[]);
    for (name, n) in [("train_32x32.mat", size.train), ("test_32x32.mat", size.test)] {
        let (imgs, labels) = samples(n, 10, 32, 32, &mut rng);
        // column-major 32×32×3×N, the gray pattern tinted per channel
        let mut x = vec![0u8; 32 * 32 * 3 * n];
        for (k, img) in imgs.iter().enumerate() {
            for ch in 0..3 {
                for r in 0..32 {
                    for c in 0..32 {
                        let v = img[r * 32 + c] as u16 * (3 + ch as u16) / 5;
                        x[r + 32 * (c + 32 * (ch + 3 * k))] = v as u8;
                    }
                }
            }
        }
        let y: Vec<u8> = labels
            .iter()
            .flat_map(|&l| (if l == 0 { 10.0f64 } else { l as f64 }).to_le_bytes())
            .collect();
        let bytes = mat_file(&[mat_matrix("X", &[32, 32, 3, n], 9, 2, &x), mat_matrix("y", &[n, 1], 6, 9, &y)]);
        write_file(&dir.join(name), &bytes)?;
    }
    Ok(())
}

fn tar_gz(entries: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut builder = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::fast()));
    for (name, data) in entries {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        builder.append_data(&mut header, name, data.as_slice()).expect("in-memory tar");
    }
    builder.into_inner().expect("in-memory tar").finish().expect("in-memory gzip")
}

fn rgb(img: &[u8], ch: usize) -> impl Iterator<Item = u8> + '_ {
    img.iter().map(move |&p| (p as u16 * (5 - ch as u16) / 5) as u8)
}

pub fn write_cifar10(dir: &Path, size: FixtureSize, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, "fixture-cifar", &[]);
    let mut entries = Vec::new();
    let per_batch = size.train.div_ceil(5);
    for (name, n) in (1..=5)
        .map(|i| (format!("data_batch_{i}.bin"), per_batch))
        .chain([("test_batch.bin".to_string(), size.test)])
    {
        let (imgs, labels) = samples(n, 10, 32, 32, &mut rng);
        let mut bytes = Vec::new();
        for (img, &l) in imgs.iter().zip(&labels) {
            bytes.push(l as u8);
            for ch in 0..3 {
                bytes.extend(rgb(img, ch));
            }
        }
        entries.push((format!("cifar-10-batches-bin/{name}"), bytes));
    }
    write_file(&dir.join("cifar-10-binary.tar.gz"), &tar_gz(&entries))
}

pub fn write_stl10(dir: &Path, size: FixtureSize, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, "fixture-stl", &[]);
    let mut entries = Vec::new();
    for (split, n) in [("train", size.train), ("test", size.test)] {
        let (imgs, labels) = samples(n, 10, 96, 96, &mut rng);
        let mut x = Vec::with_capacity(n * 3 * 96 * 96);
        for img in &imgs {
            for ch in 0..3 {
                let plane: Vec<u8> = rgb(img, ch).collect();
                for c in 0..96 {
                    for r in 0..96 {
                        x.push(plane[r * 96 + c]);
                    }
                }
            }
        }
        entries.push((format!("stl10_binary/{split}_X.bin"), x));
        entries.push((format!("stl10_binary/{split}_y.bin"), labels.iter().map(|&l| l as u8 + 1).collect()));
    }
    write_file(&dir.join("stl10_binary.tar.gz"), &tar_gz(&entries))
}

/// Writes every dataset under `root` in the documented cache layout.
pub fn write_synthetic_root(root: &Path, size: FixtureSize, seed: u64) -> Result<()> {
    for ds in Dataset::ALL {
        write_dataset(ds, root, size, seed)?;
    }
    Ok(())
}

pub fn write_dataset(ds: Dataset, root: &Path, size: FixtureSize, seed: u64) -> Result<()> {
    let dir = ds.dir(root);
    match ds {
        Dataset::Mnist => write_mnist(&dir, size, seed),
        Dataset::Usps => write_usps(&dir, size, seed),
        Dataset::Svhn => write_svhn(&dir, size, seed),
        Dataset::Cifar10 => write_cifar10(&dir, size, seed),
        Dataset::Stl10 => write_stl10(&dir, size, seed),
    }
}
