//! Manifest loading, dataset repartitions, image normalization, and
//! deterministic batch iteration.
//!
//! A manifest is a UTF-8 CSV with header `id,path,label,split` where
//! `label ∈ {normal, abnormal}` and `split ∈ {normal_train, unlabeled_pool,
//! test}`. From those pools a [`DatasetRepartition`] draws the normal
//! training set, the unlabeled training set at a requested anomaly ratio,
//! and the labeled test set. Records landing in the unlabeled set have their
//! label replaced by `unknown`; the true label is kept aside for auditing
//! only and never reaches training.

use std::collections::HashMap;
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest line {line}: {msg}")]
    MalformedRow { line: u64, msg: String },
    #[error("manifest line {line}: unknown label '{token}'")]
    UnknownLabel { line: u64, token: String },
    #[error("manifest line {line}: unknown split '{token}'")]
    UnknownSplit { line: u64, token: String },
    #[error("manifest line {line}: duplicate id '{id}'")]
    DuplicateId { line: u64, id: String },
    #[error("manifest line {line}: split normal_train requires label normal (id '{id}')")]
    LabelSplitConflict { line: u64, id: String },
    #[error("anomaly ratio {0} outside [0, 1]")]
    InvalidAnomalyRatio(f64),
    #[error("not enough {what} records: requested {requested}, pool has {available}")]
    Insufficient {
        what: String,
        requested: usize,
        available: usize,
    },
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("cannot decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("image {path} has a zero dimension")]
    ZeroDimension { path: PathBuf },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    BadChannels(usize),
    #[error("record '{0}' not loaded in the image store")]
    NotLoaded(String),
    #[error("repartition parse error at {path}: {source}")]
    RepartitionParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
    Unknown,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Normal => write!(f, "normal"),
            Label::Abnormal => write!(f, "abnormal"),
            Label::Unknown => write!(f, "unknown"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    NormalTrain,
    UnlabeledTrain,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::NormalTrain => write!(f, "normal_train"),
            Split::UnlabeledTrain => write!(f, "unlabeled_train"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
    /// True label of an unlabeled-pool record. Audit only; training code
    /// must go through `label`, which reads `unknown` for these records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_label: Option<Label>,
}

impl ImageRecord {
    /// The ground-truth label, looking through the unlabeled veil. For
    /// anomaly-ratio audits and dataset construction only.
    pub fn audit_label(&self) -> Label {
        self.hidden_label.unwrap_or(self.label)
    }

    /// Ad-hoc record for a file outside any manifest (e.g. one-off heatmap
    /// exports).
    pub fn adhoc(id: impl Into<String>, path: PathBuf) -> Self {
        Self {
            id: id.into(),
            path,
            label: Label::Unknown,
            split: Split::Test,
            hidden_label: None,
        }
    }
}

/// Parse a manifest CSV into records. Paths are resolved relative to the
/// manifest's directory. Duplicate ids and label/split contradictions are
/// rejected with their line number.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);

    let headers = reader.headers()?.clone();
    let expect = ["id", "path", "label", "split"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expect {
        return Err(DataError::MalformedRow {
            line: 1,
            msg: format!("header must be id,path,label,split, found {}", got.join(",")),
        });
    }

    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 4 {
            return Err(DataError::MalformedRow {
                line,
                msg: format!("expected 4 fields, found {}", row.len()),
            });
        }
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(DataError::MalformedRow {
                line,
                msg: "empty id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId { line, id });
        }
        let file_label = match &row[2] {
            "normal" => Label::Normal,
            "abnormal" => Label::Abnormal,
            other => {
                return Err(DataError::UnknownLabel {
                    line,
                    token: other.to_string(),
                })
            }
        };
        let raw_path = PathBuf::from(&row[1]);
        let path = if raw_path.is_absolute() {
            raw_path
        } else {
            base.join(raw_path)
        };
        let (split, label, hidden_label) = match &row[3] {
            "normal_train" => {
                if file_label != Label::Normal {
                    return Err(DataError::LabelSplitConflict { line, id });
                }
                (Split::NormalTrain, Label::Normal, None)
            }
            "unlabeled_pool" => (Split::UnlabeledTrain, Label::Unknown, Some(file_label)),
            "test" => (Split::Test, file_label, None),
            other => {
                return Err(DataError::UnknownSplit {
                    line,
                    token: other.to_string(),
                })
            }
        };
        records.push(ImageRecord {
            id,
            path,
            label,
            split,
            hidden_label,
        });
    }
    Ok(records)
}

/// Requested sizes for the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub normal_train: usize,
    pub unlabeled: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRepartition {
    pub normal_train: Vec<ImageRecord>,
    pub unlabeled_train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub anomaly_ratio: f64,
    pub seed: u64,
}

impl DatasetRepartition {
    pub fn split(&self, split: Split) -> &[ImageRecord] {
        match split {
            Split::NormalTrain => &self.normal_train,
            Split::UnlabeledTrain => &self.unlabeled_train,
            Split::Test => &self.test,
        }
    }

    /// Number of unlabeled records whose hidden label is abnormal.
    pub fn hidden_abnormal_count(&self) -> usize {
        self.unlabeled_train
            .iter()
            .filter(|r| r.audit_label() == Label::Abnormal)
            .count()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let body = serde_json::to_string_pretty(self).expect("repartition serializes");
        std::fs::write(path, body).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let body = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&body).map_err(|source| DataError::RepartitionParse {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn take_sample(
    pool: &[&ImageRecord],
    count: usize,
    what: &str,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<ImageRecord>, DataError> {
    if pool.len() < count {
        return Err(DataError::Insufficient {
            what: what.to_string(),
            requested: count,
            available: pool.len(),
        });
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    Ok(idx[..count].iter().map(|&i| pool[i].clone()).collect())
}

/// Draw the three splits from manifest pools. The unlabeled set contains
/// exactly `floor(anomaly_ratio * unlabeled)` hidden-abnormal records; the
/// draw is a pure function of `seed`.
pub fn build_repartition(
    records: &[ImageRecord],
    anomaly_ratio: f64,
    sizes: &SplitSizes,
    seed: u64,
) -> Result<DatasetRepartition, DataError> {
    if !(0.0..=1.0).contains(&anomaly_ratio) || !anomaly_ratio.is_finite() {
        return Err(DataError::InvalidAnomalyRatio(anomaly_ratio));
    }

    let normal_pool: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.split == Split::NormalTrain)
        .collect();
    let unlabeled_normal: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.split == Split::UnlabeledTrain && r.audit_label() == Label::Normal)
        .collect();
    let unlabeled_abnormal: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.split == Split::UnlabeledTrain && r.audit_label() == Label::Abnormal)
        .collect();
    let test_normal: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.split == Split::Test && r.label == Label::Normal)
        .collect();
    let test_abnormal: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.split == Split::Test && r.label == Label::Abnormal)
        .collect();

    let abnormal_in_u = (anomaly_ratio * sizes.unlabeled as f64).floor() as usize;
    let normal_in_u = sizes.unlabeled - abnormal_in_u;

    let normal_train = take_sample(
        &normal_pool,
        sizes.normal_train,
        "normal_train pool",
        &mut derive_rng(seed, "repartition", &[0]),
    )?;
    let mut unlabeled_train = take_sample(
        &unlabeled_abnormal,
        abnormal_in_u,
        "unlabeled-pool abnormal",
        &mut derive_rng(seed, "repartition", &[1]),
    )?;
    unlabeled_train.extend(take_sample(
        &unlabeled_normal,
        normal_in_u,
        "unlabeled-pool normal",
        &mut derive_rng(seed, "repartition", &[2]),
    )?);
    // Mix abnormal and normal members so batch prefixes are unbiased.
    unlabeled_train.shuffle(&mut derive_rng(seed, "repartition", &[3]));
    let mut test = take_sample(
        &test_normal,
        sizes.test_normal,
        "test normal",
        &mut derive_rng(seed, "repartition", &[4]),
    )?;
    test.extend(take_sample(
        &test_abnormal,
        sizes.test_abnormal,
        "test abnormal",
        &mut derive_rng(seed, "repartition", &[5]),
    )?);

    Ok(DatasetRepartition {
        normal_train,
        unlabeled_train,
        test,
        anomaly_ratio,
        seed,
    })
}

/// Map a unit-interval intensity to the model's [-1, 1] range.
pub fn normalize_intensity(v: f64) -> f64 {
    2.0 * v - 1.0
}

/// Inverse of [`normalize_intensity`].
pub fn denormalize_intensity(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

/// An image in model space: `[channels, height, width]`, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub data: Array3<f64>,
}

impl ImageArray {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Decode, resize (bilinear) and normalize an image file.
///
/// Intensities are mapped linearly from [0, 255] to [-1, 1]; RGB inputs are
/// reduced to luminance when `channels == 1`.
pub fn load_image(record: &ImageRecord, size: usize, channels: usize) -> Result<ImageArray, DataError> {
    if channels != 1 && channels != 3 {
        return Err(DataError::BadChannels(channels));
    }
    let img = image::open(&record.path).map_err(|source| DataError::ImageDecode {
        path: record.path.clone(),
        source,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(DataError::ZeroDimension {
            path: record.path.clone(),
        });
    }
    let resized = img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle);
    let data = match channels {
        1 => {
            let gray = resized.to_luma8();
            Array3::from_shape_fn((1, size, size), |(_, y, x)| {
                normalize_intensity(gray.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
            })
        }
        _ => {
            let rgb = resized.to_rgb8();
            Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                normalize_intensity(rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
            })
        }
    };
    Ok(ImageArray { data })
}

/// Deterministic permutation of `0..n` for a split pass.
pub fn epoch_order(n: usize, seed: u64, split: Split, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let tag = match split {
            Split::NormalTrain => 0u64,
            Split::UnlabeledTrain => 1,
            Split::Test => 2,
        };
        order.shuffle(&mut derive_rng(seed, "epoch_order", &[tag, epoch]));
    }
    order
}

/// Batches of records for one pass over a split. Order is a pure function of
/// `(seed, epoch)`; every record appears exactly once; the final batch may be
/// partial.
pub fn batch_iter<'a>(
    rep: &'a DatasetRepartition,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<Vec<&'a ImageRecord>>, DataError> {
    let records = rep.split(split);
    if records.is_empty() {
        return Err(DataError::EmptySplit(split));
    }
    assert!(batch_size > 0, "batch_size must be positive");
    let order = epoch_order(records.len(), seed, split, epoch, shuffle);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| &records[i]).collect())
        .collect())
}

/// In-memory cache of decoded, normalized images keyed by record id.
pub struct ImageStore {
    pub size: usize,
    pub channels: usize,
    images: HashMap<String, Array3<f64>>,
}

impl ImageStore {
    pub fn new(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            images: HashMap::new(),
        }
    }

    pub fn preload(&mut self, records: &[ImageRecord]) -> Result<(), DataError> {
        for r in records {
            if !self.images.contains_key(&r.id) {
                let img = load_image(r, self.size, self.channels)?;
                self.images.insert(r.id.clone(), img.data);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Array3<f64>, DataError> {
        self.images.get(id).ok_or_else(|| DataError::NotLoaded(id.to_string()))
    }

    /// Stack a batch of records into `[B, C, H, W]`.
    pub fn batch(&self, records: &[&ImageRecord]) -> Result<Array4<f64>, DataError> {
        assert!(!records.is_empty(), "empty batch");
        let mut out = Array4::zeros((records.len(), self.channels, self.size, self.size));
        for (bi, r) in records.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), bi).assign(self.get(&r.id)?);
        }
        Ok(out)
    }
}
