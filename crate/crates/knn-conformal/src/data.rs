//! Core records, dataset ingestion, and small preprocessing utilities.
//!
//! A [`DatasetBundle`] holds three aligned splits of [`Instance`] records:
//! a training set (the exemplar support for nearest-neighbor search), a
//! labeled calibration set, and a test set. Bundles are immutable after
//! load and safe to share read-only across threads.
//!
//! Two interchange formats are supported:
//!
//! * JSONL (canonical): one record per line,
//!   `{"id": str, "split": "train"|"calibration"|"test", "label": int|null,
//!   "logits": [float]|null, "exemplar": [float]}`.
//! * A packed little-endian binary format for large bundles; see
//!   [`save_bundle`] and the README for the layout. Floats round-trip
//!   bit-exactly.
//!
//! Labels are dense integer indices in `[0, C)`. String labels are accepted
//! in JSONL input and mapped to indices through a vocabulary (sorted unique
//! strings) that is persisted next to the input file.
//!
//! Logits are required on train and calibration instances (the fitting
//! target and neighbor features come from them). Test instances may omit
//! logits: once the nearest-neighbor approximations replace the underlying
//! model, only the exemplar vector is needed at test time.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which split an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }
}

/// Activation applied to neighbor logits inside the KNN approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation `{other}` (expected `tanh` or `identity`)"
            ))),
        }
    }
}

/// One example: an exemplar vector plus the classifier outputs for it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub split: Split,
    /// Class index in `[0, C)`. Required on train/calibration instances.
    pub label: Option<usize>,
    /// Classifier logits, length `C`. Required on train/calibration
    /// instances; optional at test time.
    pub logits: Option<Vec<f64>>,
    /// Dense exemplar vector, length `D`.
    pub exemplar: Vec<f64>,
}

impl Instance {
    /// The classifier's predicted class (argmax of logits).
    ///
    /// Panics if the instance has no logits; callers must only use this on
    /// train/calibration instances, where logits are validated present.
    pub fn model_pred(&self) -> usize {
        argmax(self.logits.as_ref().expect("instance has no logits"))
    }
}

/// Aligned train/calibration/test collections plus dimensionality metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub num_classes: usize,
    pub dim: usize,
    pub train: Vec<Instance>,
    pub calibration: Vec<Instance>,
    pub test: Vec<Instance>,
    /// Original string labels when the input used them, indexed by class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<Vec<String>>,
}

/// Interchange format for [`load_bundle`] / [`save_bundle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BundleFormat {
    Jsonl,
    Binary,
}

impl std::str::FromStr for BundleFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(BundleFormat::Jsonl),
            "binary" => Ok(BundleFormat::Binary),
            other => Err(Error::InvalidConfig(format!(
                "unknown bundle format `{other}` (expected `jsonl` or `binary`)"
            ))),
        }
    }
}

/// Run parameters shared across the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Miscoverage rate; target coverage is `1 - alpha`.
    pub alpha: f64,
    /// Band radius multiplier: `omega = delta * s_hat`.
    pub delta: f64,
    /// Minimum per-label band size before sets revert to full cardinality.
    pub kappa: usize,
    /// Neighbors used by the training-set approximation.
    pub k_neighbors: usize,
    /// Points taken per admitted test point when re-sampling. No default;
    /// re-sampled runs must set it explicitly.
    pub k_sample: Option<usize>,
    /// Gate set membership on the prediction-match heuristic.
    pub use_h_guard: bool,
    /// Re-sample the calibration set toward the test distribution.
    pub resample: bool,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 0.1,
            delta: 1.0,
            kappa: 1000,
            k_neighbors: 25,
            k_sample: None,
            use_h_guard: true,
            resample: false,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "delta must be a positive finite float, got {}",
                self.delta
            )));
        }
        if self.kappa == 0 {
            return Err(Error::InvalidConfig("kappa must be >= 1".into()));
        }
        if self.k_neighbors == 0 {
            return Err(Error::InvalidConfig("k_neighbors must be >= 1".into()));
        }
        if let Some(ks) = self.k_sample {
            if ks == 0 {
                return Err(Error::InvalidConfig("k_sample must be >= 1".into()));
            }
        }
        if self.resample && self.k_sample.is_none() {
            return Err(Error::InvalidConfig(
                "re-sampled runs require k_sample".into(),
            ));
        }
        Ok(())
    }
}

/// Index of the largest entry; first index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max subtraction). Output entries are
/// positive and sum to 1 within 1e-12.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidData("softmax of empty input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

/// Rescale per-class L2 match distances into `[-1, 1]` so the argmax of the
/// output is the argmin of the input: `clamp(1 - g / (m/2), -1, 1)`, with
/// `m` the largest match distance observed on the calibration set.
pub fn rescale_l2_logits(match_distances: &[f64], m: f64) -> Result<Vec<f64>> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidData(format!(
            "rescale_l2_logits requires m > 0, got {m}"
        )));
    }
    let half = m / 2.0;
    Ok(match_distances
        .iter()
        .map(|&g| (1.0 - g / half).clamp(-1.0, 1.0))
        .collect())
}

/// SHA-256 of a file's raw bytes, hex-encoded. Used to key caches and to
/// record input identity in run manifests.
pub fn hash_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(to_hex(&hasher.finalize()))
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// JSONL ingestion
// ---------------------------------------------------------------------------

/// Raw JSONL record; `label` may be an integer, a string (mapped through a
/// vocabulary), or null.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    split: Split,
    #[serde(default)]
    label: Option<RawLabel>,
    #[serde(default)]
    logits: Option<Vec<f64>>,
    exemplar: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Index(usize),
    Name(String),
}

/// Load and validate a bundle from disk.
pub fn load_bundle(path: &Path, format: BundleFormat) -> Result<DatasetBundle> {
    let bundle = match format {
        BundleFormat::Jsonl => load_jsonl(path)?,
        BundleFormat::Binary => load_binary(path)?,
    };
    validate_bundle(&bundle)?;
    Ok(bundle)
}

/// Write a bundle to disk. JSONL always stores integer labels.
pub fn save_bundle(bundle: &DatasetBundle, path: &Path, format: BundleFormat) -> Result<()> {
    match format {
        BundleFormat::Jsonl => save_jsonl(bundle, path),
        BundleFormat::Binary => save_binary(bundle, path),
    }
}

fn load_jsonl(path: &Path) -> Result<DatasetBundle> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut raws = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        raws.push(raw);
    }
    if raws.is_empty() {
        return Err(Error::InvalidData(format!(
            "{}: no records",
            path.display()
        )));
    }

    // String labels are mapped through a sorted vocabulary; mixing string
    // and integer labels in one file is rejected.
    let mut names = BTreeSet::new();
    let mut saw_index = false;
    for raw in &raws {
        match &raw.label {
            Some(RawLabel::Name(n)) => {
                names.insert(n.clone());
            }
            Some(RawLabel::Index(_)) => saw_index = true,
            None => {}
        }
    }
    let label_names: Option<Vec<String>> = if names.is_empty() {
        None
    } else if saw_index {
        return Err(Error::InvalidData(format!(
            "{}: mixed string and integer labels",
            path.display()
        )));
    } else {
        Some(names.into_iter().collect())
    };

    let to_index = |raw: Option<RawLabel>| -> Option<usize> {
        match raw {
            None => None,
            Some(RawLabel::Index(i)) => Some(i),
            Some(RawLabel::Name(n)) => {
                let vocab = label_names.as_ref().expect("vocab built above");
                Some(vocab.binary_search(&n).expect("name collected above"))
            }
        }
    };

    let mut train = Vec::new();
    let mut calibration = Vec::new();
    let mut test = Vec::new();
    let mut num_classes = 0usize;
    let mut dim = 0usize;
    for raw in raws {
        if let Some(l) = &raw.logits {
            num_classes = num_classes.max(l.len());
        }
        dim = dim.max(raw.exemplar.len());
        let inst = Instance {
            id: raw.id,
            split: raw.split,
            label: to_index(raw.label),
            logits: raw.logits,
            exemplar: raw.exemplar,
        };
        match inst.split {
            Split::Train => train.push(inst),
            Split::Calibration => calibration.push(inst),
            Split::Test => test.push(inst),
        }
    }
    if let Some(vocab) = &label_names {
        num_classes = num_classes.max(vocab.len());
        persist_vocab(path, vocab)?;
    }

    Ok(DatasetBundle {
        num_classes,
        dim,
        train,
        calibration,
        test,
        label_names,
    })
}

fn persist_vocab(bundle_path: &Path, vocab: &[String]) -> Result<()> {
    let vocab_path = bundle_path.with_extension("vocab.json");
    let json = serde_json::to_string_pretty(vocab).expect("vocab serializes");
    std::fs::write(&vocab_path, json)
        .map_err(|e| Error::io(vocab_path.display().to_string(), e))
}

fn save_jsonl(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for inst in bundle
        .train
        .iter()
        .chain(&bundle.calibration)
        .chain(&bundle.test)
    {
        let raw = RawRecord {
            id: inst.id.clone(),
            split: inst.split,
            label: inst.label.map(RawLabel::Index),
            logits: inst.logits.clone(),
            exemplar: inst.exemplar.clone(),
        };
        let line = serde_json::to_string(&raw).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Packed binary format
// ---------------------------------------------------------------------------
//
// Little-endian layout, fixed-width records:
//   magic   4 bytes  "KCPB"
//   version u8       (currently 1)
//   C       u32
//   D       u32
//   n_train u64, n_cal u64, n_test u64
//   id_w    u32      (byte width reserved per id)
// then for each record (train, calibration, test in order):
//   id_len  u16, id bytes, zero padding to id_w
//   split   u8       (0 train, 1 calibration, 2 test)
//   label   u8 flag + u32 value
//   logits  u8 flag + C * f64 (zeros when absent)
//   exemplar D * f64

const BINARY_MAGIC: &[u8; 4] = b"KCPB";
const BINARY_VERSION: u8 = 1;

fn save_binary(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let ioerr = |e| Error::io(path.display().to_string(), e);
    let file = File::create(path).map_err(ioerr)?;
    let mut w = BufWriter::new(file);

    let all = || {
        bundle
            .train
            .iter()
            .chain(&bundle.calibration)
            .chain(&bundle.test)
    };
    let id_w = all().map(|i| i.id.len()).max().unwrap_or(0) as u32;

    w.write_all(BINARY_MAGIC).map_err(ioerr)?;
    w.write_all(&[BINARY_VERSION]).map_err(ioerr)?;
    w.write_all(&(bundle.num_classes as u32).to_le_bytes())
        .map_err(ioerr)?;
    w.write_all(&(bundle.dim as u32).to_le_bytes()).map_err(ioerr)?;
    for n in [bundle.train.len(), bundle.calibration.len(), bundle.test.len()] {
        w.write_all(&(n as u64).to_le_bytes()).map_err(ioerr)?;
    }
    w.write_all(&id_w.to_le_bytes()).map_err(ioerr)?;

    for inst in all() {
        let id_bytes = inst.id.as_bytes();
        w.write_all(&(id_bytes.len() as u16).to_le_bytes()).map_err(ioerr)?;
        w.write_all(id_bytes).map_err(ioerr)?;
        for _ in id_bytes.len()..id_w as usize {
            w.write_all(&[0u8]).map_err(ioerr)?;
        }
        let split = match inst.split {
            Split::Train => 0u8,
            Split::Calibration => 1,
            Split::Test => 2,
        };
        w.write_all(&[split]).map_err(ioerr)?;
        match inst.label {
            Some(l) => {
                w.write_all(&[1u8]).map_err(ioerr)?;
                w.write_all(&(l as u32).to_le_bytes()).map_err(ioerr)?;
            }
            None => {
                w.write_all(&[0u8]).map_err(ioerr)?;
                w.write_all(&0u32.to_le_bytes()).map_err(ioerr)?;
            }
        }
        match &inst.logits {
            Some(logits) => {
                w.write_all(&[1u8]).map_err(ioerr)?;
                for &x in logits {
                    w.write_all(&x.to_le_bytes()).map_err(ioerr)?;
                }
            }
            None => {
                w.write_all(&[0u8]).map_err(ioerr)?;
                for _ in 0..bundle.num_classes {
                    w.write_all(&0f64.to_le_bytes()).map_err(ioerr)?;
                }
            }
        }
        for &x in &inst.exemplar {
            w.write_all(&x.to_le_bytes()).map_err(ioerr)?;
        }
    }
    w.flush().map_err(ioerr)
}

struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> BinReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::InvalidData(format!(
                "{}: truncated binary bundle",
                self.path
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn load_binary(path: &Path) -> Result<DatasetBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BinReader {
        buf: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(4)? != BINARY_MAGIC {
        return Err(Error::InvalidData(format!(
            "{}: not a binary bundle (bad magic)",
            path.display()
        )));
    }
    let version = r.u8()?;
    if version != BINARY_VERSION {
        return Err(Error::InvalidData(format!(
            "{}: unsupported binary bundle version {version}",
            path.display()
        )));
    }
    let num_classes = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let n_train = r.u64()? as usize;
    let n_cal = r.u64()? as usize;
    let n_test = r.u64()? as usize;
    let id_w = r.u32()? as usize;

    let mut splits: [Vec<Instance>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..n_train + n_cal + n_test {
        let id_len = r.u16()? as usize;
        let id_field = r.take(id_w)?;
        if id_len > id_w {
            return Err(Error::InvalidData(format!(
                "{}: id length exceeds reserved width",
                path.display()
            )));
        }
        let id = String::from_utf8(id_field[..id_len].to_vec())
            .map_err(|_| Error::InvalidData(format!("{}: id is not utf-8", path.display())))?;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Calibration,
            2 => Split::Test,
            other => {
                return Err(Error::InvalidData(format!(
                    "{}: bad split tag {other}",
                    path.display()
                )))
            }
        };
        let has_label = r.u8()? != 0;
        let label_val = r.u32()? as usize;
        let label = has_label.then_some(label_val);
        let has_logits = r.u8()? != 0;
        let logits_vals = r.f64s(num_classes)?;
        let logits = has_logits.then_some(logits_vals);
        let exemplar = r.f64s(dim)?;
        let inst = Instance {
            id,
            split,
            label,
            logits,
            exemplar,
        };
        match split {
            Split::Train => splits[0].push(inst),
            Split::Calibration => splits[1].push(inst),
            Split::Test => splits[2].push(inst),
        }
    }
    let [train, calibration, test] = splits;
    if train.len() != n_train || calibration.len() != n_cal || test.len() != n_test {
        return Err(Error::InvalidData(format!(
            "{}: split counts disagree with header",
            path.display()
        )));
    }
    Ok(DatasetBundle {
        num_classes,
        dim,
        train,
        calibration,
        test,
        label_names: None,
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

pub fn validate_bundle(bundle: &DatasetBundle) -> Result<()> {
    if bundle.num_classes < 2 {
        return Err(Error::InvalidData(format!(
            "bundle must have at least 2 classes, got {}",
            bundle.num_classes
        )));
    }
    if bundle.dim == 0 {
        return Err(Error::InvalidData("exemplar dimension must be >= 1".into()));
    }
    if bundle.train.is_empty() {
        return Err(Error::InvalidData("train split is empty".into()));
    }
    if bundle.calibration.is_empty() {
        return Err(Error::InvalidData("calibration split is empty".into()));
    }

    let mut ids = BTreeSet::new();
    for inst in bundle
        .train
        .iter()
        .chain(&bundle.calibration)
        .chain(&bundle.test)
    {
        if !ids.insert(inst.id.as_str()) {
            return Err(Error::DuplicateId(inst.id.clone()));
        }
        if inst.exemplar.len() != bundle.dim {
            return Err(Error::DimensionMismatch(format!(
                "instance `{}`: exemplar length {} != D={}",
                inst.id,
                inst.exemplar.len(),
                bundle.dim
            )));
        }
        if inst.exemplar.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData(format!(
                "instance `{}`: non-finite exemplar entry",
                inst.id
            )));
        }
        if let Some(logits) = &inst.logits {
            if logits.len() != bundle.num_classes {
                return Err(Error::DimensionMismatch(format!(
                    "instance `{}`: logits length {} != C={}",
                    inst.id,
                    logits.len(),
                    bundle.num_classes
                )));
            }
            if logits.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "instance `{}`: non-finite logit",
                    inst.id
                )));
            }
        }
        if let Some(label) = inst.label {
            if label >= bundle.num_classes {
                return Err(Error::InvalidData(format!(
                    "instance `{}`: label {} out of range [0, {})",
                    inst.id, label, bundle.num_classes
                )));
            }
        }
        // Labels and logits are mandatory wherever fitting or calibration
        // reads them; test instances may omit both.
        if inst.split != Split::Test {
            if inst.label.is_none() {
                return Err(Error::MissingLabel {
                    id: inst.id.clone(),
                    split: inst.split.as_str(),
                });
            }
            if inst.logits.is_none() {
                return Err(Error::MissingLogits {
                    id: inst.id.clone(),
                    split: inst.split.as_str(),
                });
            }
        }
    }
    Ok(())
}
