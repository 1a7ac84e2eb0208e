//! Parsers for the raw distribution formats of the five datasets.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use bzip2::read::BzDecoder;
use flate2::read::{GzDecoder, ZlibDecoder};

use super::image::ImageSet;
use crate::error::{DtaError, Result};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| DtaError::io(path, e))
}

fn read_all(path: &Path, reader: &mut dyn Read) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf).map_err(|e| DtaError::io(path, e))?;
    Ok(buf)
}

/// Reads a file, transparently gunzipping `*.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        read_all(path, &mut GzDecoder::new(file))
    } else {
        read_all(path, &mut BufReader::new(file))
    }
}

// ---------------------------------------------------------------------------
// IDX (MNIST)

/// Parses an IDX file of unsigned bytes; returns dimensions and payload.
pub fn parse_idx(bytes: &[u8], origin: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bad = |m: &str| DtaError::format(origin, m);
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned-byte IDX payloads are supported"));
    }
    let ndims = usize::from(bytes[3]);
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(bad("truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(bad(&format!("IDX payload has {} bytes, header says {n}", bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

pub fn read_idx_images(path: &Path) -> Result<ImageSet> {
    let (dims, data) = parse_idx(&read_maybe_gz(path)?, path)?;
    if dims.len() != 3 {
        return Err(DtaError::format(path, format!("expected 3 image dimensions, got {dims:?}")));
    }
    ImageSet::new([1, dims[1], dims[2]], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (dims, data) = parse_idx(&read_maybe_gz(path)?, path)?;
    if dims.len() != 1 {
        return Err(DtaError::format(path, format!("expected 1 label dimension, got {dims:?}")));
    }
    Ok(data.into_iter().map(usize::from).collect())
}

// ---------------------------------------------------------------------------
// libsvm text (USPS): "label idx:value ...", labels 1..=10, values in [-1, 1]

pub fn parse_usps(reader: impl BufRead, origin: &Path) -> Result<(ImageSet, Vec<usize>)> {
    const SIDE: usize = 16;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DtaError::io(origin, e))?;
        let mut fields = line.split_whitespace();
        let Some(label) = fields.next() else { continue };
        let bad = |m: String| DtaError::format(origin, format!("line {}: {m}", ln + 1));
        let label: f64 = label.parse().map_err(|_| bad(format!("bad label {label:?}")))?;
        if !(1.0..=10.0).contains(&label) || label.fract() != 0.0 {
            return Err(bad(format!("label {label} outside 1..=10")));
        }
        labels.push(label as usize - 1);
        let mut img = [0u8; SIDE * SIDE];
        for f in fields {
            let (idx, val) = f.split_once(':').ok_or_else(|| bad(format!("bad feature {f:?}")))?;
            let idx: usize = idx.parse().map_err(|_| bad(format!("bad index {idx:?}")))?;
            let val: f64 = val.parse().map_err(|_| bad(format!("bad value {val:?}")))?;
            if idx == 0 || idx > SIDE * SIDE {
                return Err(bad(format!("feature index {idx} outside 1..=256")));
            }
            img[idx - 1] = ((val.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        }
        pixels.extend_from_slice(&img);
    }
    Ok((ImageSet::new([1, SIDE, SIDE], pixels)?, labels))
}

pub fn read_usps(path: &Path) -> Result<(ImageSet, Vec<usize>)> {
    let file = open(path)?;
    if path.extension().is_some_and(|e| e == "bz2") {
        parse_usps(BufReader::new(BzDecoder::new(file)), path)
    } else {
        parse_usps(BufReader::new(file), path)
    }
}

// ---------------------------------------------------------------------------
// MATLAB level-5 MAT files (SVHN cropped digits)

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

/// A numeric MAT variable; `data` is column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MatArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: MatData,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl MatData {
    pub fn len(&self) -> usize {
        match self {
            MatData::U8(v) => v.len(),
            MatData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            MatData::U8(v) => f64::from(v[i]),
            MatData::F64(v) => v[i],
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, m: &str) -> DtaError {
        DtaError::format(self.origin, format!("MAT file at byte {}: {m}", self.pos))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    /// Next data element: (type, payload). Handles the small-element form and padding.
    fn element(&mut self) -> Result<(u32, &'a [u8])> {
        let tag = self.u32()?;
        if tag >> 16 != 0 {
            let n = (tag >> 16) as usize;
            let data = self.take(4)?;
            if n > 4 {
                return Err(self.err("small element longer than 4 bytes"));
            }
            return Ok((tag & 0xffff, &data[..n]));
        }
        let n = self.u32()? as usize;
        let data = self.take(n)?;
        if tag != MI_COMPRESSED {
            let pad = (8 - n % 8) % 8;
            self.take(pad.min(self.bytes.len() - self.pos))?;
        }
        Ok((tag, data))
    }
}

fn numeric(ty: u32, data: &[u8], origin: &Path) -> Result<MatData> {
    macro_rules! conv {
        ($t:ty, $n:expr) => {
            data.chunks_exact($n)
                .map(|c| <$t>::from_le_bytes(c.try_into().expect("chunk size")) as f64)
                .collect()
        };
    }
    Ok(match ty {
        MI_UINT8 => MatData::U8(data.to_vec()),
        MI_INT8 => MatData::F64(data.iter().map(|&b| f64::from(b as i8)).collect()),
        MI_INT16 => MatData::F64(conv!(i16, 2)),
        MI_UINT16 => MatData::F64(conv!(u16, 2)),
        MI_INT32 => MatData::F64(conv!(i32, 4)),
        MI_UINT32 => MatData::F64(conv!(u32, 4)),
        MI_SINGLE => MatData::F64(conv!(f32, 4)),
        MI_DOUBLE => MatData::F64(conv!(f64, 8)),
        MI_INT64 => MatData::F64(conv!(i64, 8)),
        MI_UINT64 => MatData::F64(conv!(u64, 8)),
        other => return Err(DtaError::format(origin, format!("unsupported MAT numeric type {other}"))),
    })
}

fn parse_matrix(payload: &[u8], origin: &Path) -> Result<Option<MatArray>> {
    let mut c = Cursor {
        bytes: payload,
        pos: 0,
        origin,
    };
    let (_, flags) = c.element()?;
    if flags.len() < 4 {
        return Err(c.err("short array flags"));
    }
    let class = flags[0];
    let complex = flags[1] & 0x08 != 0;
    // numeric classes are 6 (double) through 15 (uint64)
    if !(6..=15).contains(&class) || complex {
        return Ok(None);
    }
    let (_, dims) = c.element()?;
    let dims: Vec<usize> = dims
        .chunks_exact(4)
        .map(|d| i32::from_le_bytes([d[0], d[1], d[2], d[3]]) as usize)
        .collect();
    let (_, name) = c.element()?;
    let name = String::from_utf8_lossy(name).into_owned();
    let (ty, real) = c.element()?;
    let data = numeric(ty, real, origin)?;
    if data.len() != dims.iter().product::<usize>() {
        return Err(c.err(&format!("variable {name} has {} values for dims {dims:?}", data.len())));
    }
    Ok(Some(MatArray { name, dims, data }))
}

/// All numeric (real, non-sparse) variables of a level-5 MAT file.
pub fn parse_mat(bytes: &[u8], origin: &Path) -> Result<Vec<MatArray>> {
    if bytes.len() < 128 {
        return Err(DtaError::format(origin, "shorter than a MAT header"));
    }
    if &bytes[126..128] != b"IM" {
        return Err(DtaError::format(origin, "not a little-endian level-5 MAT file"));
    }
    let mut c = Cursor {
        bytes: &bytes[128..],
        pos: 0,
        origin,
    };
    let mut out = Vec::new();
    while !c.done() {
        let (ty, payload) = c.element()?;
        match ty {
            MI_MATRIX => out.extend(parse_matrix(payload, origin)?),
            MI_COMPRESSED => {
                let inflated = read_all(origin, &mut ZlibDecoder::new(payload))?;
                let mut inner = Cursor {
                    bytes: &inflated,
                    pos: 0,
                    origin,
                };
                while !inner.done() {
                    let (ty, payload) = inner.element()?;
                    if ty == MI_MATRIX {
                        out.extend(parse_matrix(payload, origin)?);
                    }
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// SVHN `X` (32×32×3×N, column-major) and `y` (labels 1..=10, 10 meaning digit 0).
pub fn read_svhn(path: &Path) -> Result<(ImageSet, Vec<usize>)> {
    let bytes = read_all(path, &mut BufReader::new(open(path)?))?;
    let vars = parse_mat(&bytes, path)?;
    let find = |n: &str| {
        vars.iter()
            .find(|v| v.name == n)
            .ok_or_else(|| DtaError::format(path, format!("variable {n} not found")))
    };
    let x = find("X")?;
    let y = find("y")?;
    let [h, w, c, n] = x.dims[..] else {
        return Err(DtaError::format(path, format!("X has dims {:?}, expected 4", x.dims)));
    };
    if y.data.len() != n {
        return Err(DtaError::format(path, format!("{} labels for {n} images", y.data.len())));
    }
    let mut pixels = Vec::with_capacity(n * c * h * w);
    for img in 0..n {
        for ch in 0..c {
            for row in 0..h {
                for col in 0..w {
                    let v = x.data.get(row + h * (col + w * (ch + c * img)));
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    let labels = (0..n)
        .map(|i| {
            let v = y.data.get(i);
            match v as usize {
                10 => Ok(0),
                d @ 0..=9 if v.fract() == 0.0 => Ok(d),
                _ => Err(DtaError::format(path, format!("label {v} outside 1..=10"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ImageSet::new([c, h, w], pixels)?, labels))
}

// ---------------------------------------------------------------------------
// Tarballs (CIFAR-10 and STL-10 binary versions)

/// Calls `visit(file name, contents)` for every regular file in a `.tar.gz`
/// whose name passes `wanted`.
pub fn scan_tar_gz(
    path: &Path,
    wanted: impl Fn(&str) -> bool,
    mut visit: impl FnMut(&str, Vec<u8>) -> Result<()>,
) -> Result<()> {
    let mut archive = tar::Archive::new(GzDecoder::new(BufReader::new(open(path)?)));
    let entries = archive.entries().map_err(|e| DtaError::io(path, e))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| DtaError::io(path, e))?;
        let name = entry
            .path()
            .map_err(|e| DtaError::io(path, e))?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if entry.header().entry_type().is_file() && wanted(&name) {
            let data = read_all(path, &mut entry)?;
            visit(&name, data)?;
        }
    }
    Ok(())
}

/// CIFAR-10 binary records: 1 label byte then 3 row-major 32×32 planes.
pub fn parse_cifar_records(bytes: &[u8], origin: &Path) -> Result<(ImageSet, Vec<usize>)> {
    const REC: usize = 1 + 3 * 1024;
    if !bytes.len().is_multiple_of(REC) {
        return Err(DtaError::format(origin, "CIFAR batch is not a whole number of records"));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / REC * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / REC);
    for rec in bytes.chunks(REC) {
        if rec[0] > 9 {
            return Err(DtaError::format(origin, format!("CIFAR label {} outside 0..=9", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((ImageSet::new([3, 32, 32], pixels)?, labels))
}

/// Images with their labels.
pub type LabeledSplit = (ImageSet, Vec<usize>);

/// `(train, test)` from `cifar-10-binary.tar.gz`.
pub fn read_cifar10(path: &Path) -> Result<(LabeledSplit, LabeledSplit)> {
    let mut train: Vec<(String, Vec<u8>)> = Vec::new();
    let mut test = None;
    scan_tar_gz(
        path,
        |n| n.starts_with("data_batch_") || n == "test_batch.bin",
        |name, data| {
            if name == "test_batch.bin" {
                test = Some(data);
            } else {
                train.push((name.to_string(), data));
            }
            Ok(())
        },
    )?;
    train.sort_by(|a, b| a.0.cmp(&b.0));
    if train.len() != 5 {
        return Err(DtaError::format(path, format!("found {} of 5 training batches", train.len())));
    }
    let test = test.ok_or_else(|| DtaError::format(path, "test_batch.bin not found"))?;
    let all: Vec<u8> = train.into_iter().flat_map(|(_, d)| d).collect();
    Ok((parse_cifar_records(&all, path)?, parse_cifar_records(&test, path)?))
}

/// STL-10 `*_X.bin`: 3×96×96 per image, each plane column-major.
pub fn parse_stl_images(bytes: &[u8], origin: &Path) -> Result<ImageSet> {
    const SIDE: usize = 96;
    const IMG: usize = 3 * SIDE * SIDE;
    if !bytes.len().is_multiple_of(IMG) {
        return Err(DtaError::format(origin, "STL image file is not a whole number of images"));
    }
    let mut pixels = vec![0u8; bytes.len()];
    for (src, dst) in bytes.chunks(SIDE * SIDE).zip(pixels.chunks_mut(SIDE * SIDE)) {
        for col in 0..SIDE {
            for row in 0..SIDE {
                dst[row * SIDE + col] = src[col * SIDE + row];
            }
        }
    }
    ImageSet::new([3, SIDE, SIDE], pixels)
}

/// STL-10 `*_y.bin`: labels 1..=10.
pub fn parse_stl_labels(bytes: &[u8], origin: &Path) -> Result<Vec<usize>> {
    bytes
        .iter()
        .map(|&b| match b {
            1..=10 => Ok(usize::from(b) - 1),
            _ => Err(DtaError::format(origin, format!("STL label {b} outside 1..=10"))),
        })
        .collect()
}

/// `(train, test)` from `stl10_binary.tar.gz`; the unlabeled split is skipped.
pub fn read_stl10(path: &Path) -> Result<(LabeledSplit, LabeledSplit)> {
    let names = ["train_X.bin", "train_y.bin", "test_X.bin", "test_y.bin"];
    let mut found: [Option<Vec<u8>>; 4] = Default::default();
    scan_tar_gz(
        path,
        |n| names.contains(&n),
        |name, data| {
            let i = names.iter().position(|&n| n == name).expect("filtered");
            found[i] = Some(data);
            Ok(())
        },
    )?;
    let [Some(trx), Some(try_), Some(tex), Some(tey)] = found else {
        return Err(DtaError::format(path, "STL-10 archive lacks train/test files"));
    };
    let train = (parse_stl_images(&trx, path)?, parse_stl_labels(&try_, path)?);
    let test = (parse_stl_images(&tex, path)?, parse_stl_labels(&tey, path)?);
    for (imgs, labels) in [&train, &test] {
        if imgs.len() != labels.len() {
            return Err(DtaError::format(path, "STL image and label counts differ"));
        }
    }
    Ok((train, test))
}
