//! Paired low/normal-light datasets.
//!
//! Two directory layouts are recognised:
//!
//! * flat: `<root>/low/<stem>.<ext>` and `<root>/high/<stem>.<ext>`;
//! * split: `<root>/<train>/{low,high}` and `<root>/<test>/{low,high}`,
//!   where `<train>` is `train` or `our485` and `<test>` is `test` or
//!   `eval15`. `normal` is accepted for `high`. Directory names are matched
//!   case-insensitively.
//!
//! A flat layout for a named dataset is split by sorted stem, the first
//! `train` pairs going to training. A flat `custom` dataset holds out the
//! last `ceil(n / 10)` pairs (at least one when `n >= 2`) for testing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::image_io::{self, Image};
use crate::tensor::Tensor;

pub const TRAIN_SIZE: usize = 224;

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    LolV1,
    LolV2Real,
    LolV2Syn,
    Sid,
    Custom,
}

impl DatasetName {
    pub const ALL: [DatasetName; 5] =
        [DatasetName::LolV1, DatasetName::LolV2Real, DatasetName::LolV2Syn, DatasetName::Sid, DatasetName::Custom];

    pub fn name(self) -> &'static str {
        match self {
            DatasetName::LolV1 => "lol-v1",
            DatasetName::LolV2Real => "lol-v2-real",
            DatasetName::LolV2Syn => "lol-v2-syn",
            DatasetName::Sid => "sid",
            DatasetName::Custom => "custom",
        }
    }

    /// Published `(train, test)` pair counts.
    pub fn split_sizes(self) -> Option<(usize, usize)> {
        match self {
            DatasetName::LolV1 => Some((485, 15)),
            DatasetName::LolV2Real => Some((689, 100)),
            DatasetName::LolV2Syn => Some((900, 100)),
            DatasetName::Sid => Some((2564, 133)),
            DatasetName::Custom => None,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetName::ALL.into_iter().find(|d| d.name() == s).ok_or_else(|| {
            let names: Vec<&str> = DatasetName::ALL.iter().map(|d| d.name()).collect();
            config_err!("unknown dataset `{s}`; expected one of {}", names.join(", "))
        })
    }
}

/// A low/high pair. Test samples are reflection-padded to network-friendly
/// dimensions; `valid` is the `(height, width)` of the original content in
/// the top-left corner.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub low: Image<f32>,
    pub high: Image<f32>,
    pub valid: (usize, usize),
}

impl PairedSample {
    /// Both tensors must already be valid network inputs of equal shape.
    pub fn new(id: impl Into<String>, low: Tensor<f32>, high: Tensor<f32>) -> Result<Self> {
        if low.shape() != high.shape() {
            return Err(shape_err!("low {} and high {} differ", low.shape(), high.shape()));
        }
        let valid = (low.shape().h, low.shape().w);
        Ok(PairedSample { id: id.into(), low: Image::new(low)?, high: Image::new(high)?, valid })
    }

    /// Pads an arbitrary-size pair for evaluation.
    pub fn padded(id: impl Into<String>, low: &Tensor<f32>, high: &Tensor<f32>) -> Result<Self> {
        if low.shape() != high.shape() {
            return Err(shape_err!("low {} and high {} differ", low.shape(), high.shape()));
        }
        let valid = (low.shape().h, low.shape().w);
        let pad = |t| image_io::pad_reflect(t, 4, 8);
        Ok(PairedSample { id: id.into(), low: Image::new(pad(low))?, high: Image::new(pad(high))?, valid })
    }

    /// Crops a same-size tensor back to the unpadded region.
    pub fn crop_valid(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        image_io::crop(t, self.valid.0, self.valid.1)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: DatasetName,
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    /// Stems that were excluded, with the reason.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    /// Side length training pairs are resized to.
    pub train_size: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { train_size: TRAIN_SIZE }
    }
}

/// Stem-matched file pairs, sorted by stem.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<(String, PathBuf, PathBuf)>,
    pub warnings: Vec<String>,
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Dataset(format!(
                "stem `{stem}` appears twice in {}: {} and {}",
                dir.display(),
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn pair_by_stem(low_dir: &Path, high_dir: &Path) -> Result<Pairing> {
    let low = image_files(low_dir)?;
    let mut high = image_files(high_dir)?;
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (stem, lp) in low {
        match high.remove(&stem) {
            Some(hp) => pairs.push((stem, lp, hp)),
            None => warnings.push(format!("`{stem}` has no match in {}; skipped", high_dir.display())),
        }
    }
    for stem in high.keys() {
        warnings.push(format!("`{stem}` has no match in {}; skipped", low_dir.display()));
    }
    warnings.sort();
    Ok(Pairing { pairs, warnings })
}

fn subdir(parent: &Path, names: &[&str]) -> Option<PathBuf> {
    let rd = fs::read_dir(parent).ok()?;
    let mut found: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter(|p| {
            let n = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
            names.contains(&n.as_str())
        })
        .collect();
    found.sort();
    found.into_iter().next()
}

fn low_high(dir: &Path) -> Option<(PathBuf, PathBuf)> {
    Some((subdir(dir, &["low"])?, subdir(dir, &["high", "normal"])?))
}

/// Test pairs held out of a flat custom dataset of `n` pairs.
pub fn custom_holdout(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        n.div_ceil(10)
    }
}

fn read_pair(low: &Path, high: &Path) -> Result<(image::RgbImage, image::RgbImage)> {
    Ok((image_io::read_rgb(low)?, image_io::read_rgb(high)?))
}

fn load_train(id: &str, low: &Path, high: &Path, size: usize) -> Result<std::result::Result<PairedSample, String>> {
    let (l, h) = read_pair(low, high)?;
    if l.dimensions() != h.dimensions() {
        return Ok(Err(format!("`{id}`: low is {:?} but high is {:?}; skipped", l.dimensions(), h.dimensions())));
    }
    let resize = |img: &image::RgbImage| imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
    let s = PairedSample::new(id, image_io::rgb_to_tensor(&resize(&l)), image_io::rgb_to_tensor(&resize(&h)))?;
    Ok(Ok(s))
}

fn load_test(id: &str, low: &Path, high: &Path) -> Result<std::result::Result<PairedSample, String>> {
    let (l, h) = read_pair(low, high)?;
    if l.dimensions() != h.dimensions() {
        return Ok(Err(format!("`{id}`: low is {:?} but high is {:?}; skipped", l.dimensions(), h.dimensions())));
    }
    Ok(Ok(PairedSample::padded(id, &image_io::rgb_to_tensor(&l), &image_io::rgb_to_tensor(&h))?))
}

type Loader = fn(&str, &Path, &Path, usize) -> Result<std::result::Result<PairedSample, String>>;

fn load_all(pairs: &[(String, PathBuf, PathBuf)], f: Loader, size: usize, warnings: &mut Vec<String>) -> Result<Vec<PairedSample>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (id, l, h) in pairs {
        match f(id, l, h, size)? {
            Ok(s) => out.push(s),
            Err(w) => warnings.push(w),
        }
    }
    Ok(out)
}

pub fn load_dataset(root: &Path, name: DatasetName, opts: &LoadOptions) -> Result<DatasetSplit> {
    if opts.train_size < 8 || opts.train_size % 4 != 0 {
        return Err(config_err!("dataset.train_size must be a multiple of 4 and at least 8, got {}", opts.train_size));
    }
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset directory {} does not exist", root.display())));
    }
    let split_dirs = subdir(root, &["train", "our485"])
        .zip(subdir(root, &["test", "eval15"]))
        .and_then(|(tr, te)| Some((low_high(&tr)?, low_high(&te)?)));
    let (train_pairs, test_pairs, mut warnings) = if let Some(((trl, trh), (tel, teh))) = split_dirs {
        let tr = pair_by_stem(&trl, &trh)?;
        let te = pair_by_stem(&tel, &teh)?;
        let overlap: Vec<&str> = tr
            .pairs
            .iter()
            .filter(|(s, ..)| te.pairs.iter().any(|(t, ..)| t == s))
            .map(|(s, ..)| s.as_str())
            .collect();
        if !overlap.is_empty() {
            return Err(Error::Dataset(format!("stems in both train and test: {}", overlap.join(", "))));
        }
        let mut w = tr.warnings;
        w.extend(te.warnings);
        (tr.pairs, te.pairs, w)
    } else if let Some((low, high)) = low_high(root) {
        let mut p = pair_by_stem(&low, &high)?;
        let n = p.pairs.len();
        let n_test = match name.split_sizes() {
            Some((tr, te)) if tr + te == n => te,
            Some((tr, te)) => {
                return Err(Error::Dataset(format!(
                    "{name} expects {} pairs ({tr} train, {te} test) in {}, found {n}",
                    tr + te,
                    root.display()
                )))
            }
            None => custom_holdout(n),
        };
        let test = p.pairs.split_off(n - n_test);
        (p.pairs, test, p.warnings)
    } else {
        return Err(Error::Dataset(format!(
            "{} has neither low/ and high/ nor train/ and test/ subdirectories",
            root.display()
        )));
    };
    if train_pairs.is_empty() && test_pairs.is_empty() {
        return Err(Error::Dataset(format!("no matched low/high pairs under {}", root.display())));
    }
    if let Some((tr, te)) = name.split_sizes() {
        if (train_pairs.len(), test_pairs.len()) != (tr, te) {
            return Err(Error::Dataset(format!(
                "{name} expects {tr} train and {te} test pairs, found {} and {}",
                train_pairs.len(),
                test_pairs.len()
            )));
        }
    }
    let train = load_all(&train_pairs, load_train, opts.train_size, &mut warnings)?;
    let test = load_all(&test_pairs, |id, l, h, _| load_test(id, l, h), 0, &mut warnings)?;
    if train.is_empty() && test.is_empty() {
        return Err(Error::Dataset(format!("no usable low/high pairs under {}", root.display())));
    }
    Ok(DatasetSplit { name, train, test, warnings })
}
