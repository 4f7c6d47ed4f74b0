//! On-disk tensor bundles.
//!
//! A bundle is a directory with a `manifest.json` at its root, tensor files
//! under `tensors/` and optional source images under `images/`.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   "SCDT"
//! version  u32       1
//! ndim     u32
//! dims     ndim * u32
//! data     prod(dims) * f32, row-major
//! ```
//!
//! Head weights for `analytic_head` bundles are a tensor of shape
//! `[num_classes, K + 1]`; the last column holds the bias.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::FeatureMaps;

pub const TENSOR_MAGIC: &[u8; 4] = b"SCDT";
pub const TENSOR_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Writes `data` with shape `dims` in the SCDT format.
pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(dims, data)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if dims.is_empty() {
        return Err(Error::Validation("tensor must have at least one dimension".into()));
    }
    if let Some(d) = dims.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::Validation(format!("invalid tensor dimension {d}")));
    }
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(Error::Validation(format!(
            "shape {dims:?} holds {numel} values but {} were given",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * numel);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Reads an SCDT tensor, returning its shape and row-major values.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::io(path, e),
    })?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic = cursor.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = cursor.u32()?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let ndim = cursor.u32()? as usize;
    if ndim == 0 {
        return Err(Error::Format("tensor has zero dimensions".into()));
    }
    let mut dims = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        let d = cursor.u32()? as usize;
        if d == 0 {
            return Err(Error::Format("tensor has a zero-length dimension".into()));
        }
        dims.push(d);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let payload_len = numel
        .checked_mul(4)
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let payload = cursor.take(payload_len)?;
    if cursor.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - cursor.pos
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite value {} at index {i}",
            data[i]
        )));
    }
    Ok((dims, data))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Precomputed,
    AnalyticHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub num_classes: usize,
    pub channels: usize,
    pub map_height: usize,
    pub map_width: usize,
    pub gradient_mode: GradientMode,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_weights_path: Option<String>,
    /// `[height, width]` of the classifier input, used as the overlay size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_image_size: Option<[usize; 2]>,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub activation_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub split: Split,
}

impl ImageEntry {
    pub fn is_correct(&self) -> bool {
        self.true_label == self.predicted_label
    }
}

/// Final linear layer of a global-average-pool classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    num_classes: usize,
    channels: usize,
    /// Row-major `num_classes x channels`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl HeadWeights {
    pub fn new(num_classes: usize, channels: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if num_classes == 0 || channels == 0 {
            return Err(Error::Validation("head must have at least one class and channel".into()));
        }
        if weights.len() != num_classes * channels {
            return Err(Error::Validation(format!(
                "head weight matrix has {} values, expected {num_classes}x{channels}",
                weights.len()
            )));
        }
        if bias.len() != num_classes {
            return Err(Error::Validation(format!(
                "head bias has {} values, expected {num_classes}",
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("head weights contain NaN or Inf".into()));
        }
        Ok(Self {
            num_classes,
            channels,
            weights,
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.channels..(class + 1) * self.channels]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (dims, data) = read_tensor(path.as_ref())?;
        if dims.len() != 2 || dims[1] < 2 {
            return Err(Error::Validation(format!(
                "head weights must have shape [classes, K+1], got {dims:?}"
            )));
        }
        let (rows, cols) = (dims[0], dims[1]);
        let channels = cols - 1;
        let mut weights = Vec::with_capacity(rows * channels);
        let mut bias = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            weights.extend(row[..channels].iter().map(|&v| v as f64));
            bias.push(row[channels] as f64);
        }
        Self::new(rows, channels, weights, bias)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let cols = self.channels + 1;
        let mut data = Vec::with_capacity(self.num_classes * cols);
        for c in 0..self.num_classes {
            data.extend(self.row(c).iter().map(|&v| v as f32));
            data.push(self.bias[c] as f32);
        }
        write_tensor(path, &[self.num_classes, cols], &data)
    }
}

/// A validated bundle. Tensor shapes are checked when a tensor is first read.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBundle {
    root: PathBuf,
    manifest: Manifest,
    head: Option<HeadWeights>,
}

impl TensorBundle {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.manifest.images
    }

    pub fn head(&self) -> Option<&HeadWeights> {
        self.head.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn channels(&self) -> usize {
        self.manifest.channels
    }

    pub fn map_shape(&self) -> (usize, usize) {
        (self.manifest.map_height, self.manifest.map_width)
    }

    pub fn entry(&self, id: &str) -> Option<&ImageEntry> {
        self.manifest.images.iter().find(|e| e.id == id)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn activations(&self, entry: &ImageEntry) -> Result<FeatureMaps> {
        self.read_maps(entry, &entry.activation_path, "activation")
    }

    /// Precomputed gradient tensor, if the entry carries one.
    pub fn gradients(&self, entry: &ImageEntry) -> Result<Option<FeatureMaps>> {
        match &entry.gradient_path {
            Some(p) => self.read_maps(entry, p, "gradient").map(Some),
            None => Ok(None),
        }
    }

    fn read_maps(&self, entry: &ImageEntry, rel: &str, what: &str) -> Result<FeatureMaps> {
        let (dims, data) = read_tensor(self.resolve(rel)).map_err(|e| e.for_instance(&entry.id))?;
        let expected = [self.manifest.channels, self.manifest.map_height, self.manifest.map_width];
        if dims != expected {
            return Err(Error::Validation(format!(
                "instance {}: {what} tensor has shape {dims:?}, manifest declares {expected:?}",
                entry.id
            )));
        }
        FeatureMaps::new(
            expected[0],
            expected[1],
            expected[2],
            data.into_iter().map(f64::from).collect(),
        )
    }

    /// SHA-256 of the manifest bytes, used to identify a bundle in run reports.
    pub fn manifest_digest(&self) -> Result<String> {
        use sha2::Digest;
        let path = self.root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(hex::encode(sha2::Sha256::digest(&bytes)))
    }
}

pub fn load_bundle(root: impl AsRef<Path>) -> Result<TensorBundle> {
    let root = root.as_ref().to_path_buf();
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::NotFound(format!("manifest {}", manifest_path.display()))
        }
        _ => Error::io(&manifest_path, e),
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    validate_manifest(&manifest)?;
    let head = match (&manifest.gradient_mode, &manifest.head_weights_path) {
        (GradientMode::AnalyticHead, Some(p)) => {
            let head = HeadWeights::read(root.join(p))?;
            if head.num_classes() != manifest.num_classes || head.channels() != manifest.channels {
                return Err(Error::Validation(format!(
                    "head weights are {}x{}, manifest declares {}x{}",
                    head.num_classes(),
                    head.channels(),
                    manifest.num_classes,
                    manifest.channels
                )));
            }
            Some(head)
        }
        _ => None,
    };
    Ok(TensorBundle { root, manifest, head })
}

pub fn validate_manifest(m: &Manifest) -> Result<()> {
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Validation(format!(
            "unsupported manifest format_version {}",
            m.format_version
        )));
    }
    if m.num_classes < 2 {
        return Err(Error::Validation(format!(
            "num_classes must be at least 2, got {}",
            m.num_classes
        )));
    }
    if m.channels == 0 || m.map_height == 0 || m.map_width == 0 {
        return Err(Error::Validation("channels, map_height and map_width must be >= 1".into()));
    }
    if !m.class_names.is_empty() && m.class_names.len() != m.num_classes {
        return Err(Error::Validation(format!(
            "{} class names for {} classes",
            m.class_names.len(),
            m.num_classes
        )));
    }
    if let Some([h, w]) = m.input_image_size {
        if h < m.map_height || w < m.map_width {
            return Err(Error::Validation(
                "input_image_size must be at least the feature-map size".into(),
            ));
        }
    }
    if m.gradient_mode == GradientMode::AnalyticHead && m.head_weights_path.is_none() {
        return Err(Error::Validation(
            "gradient_mode analytic_head requires head_weights_path".into(),
        ));
    }
    let mut seen = HashSet::with_capacity(m.images.len());
    for e in &m.images {
        if e.id.is_empty() {
            return Err(Error::Validation("image entry with empty id".into()));
        }
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Validation(format!("duplicate image id {}", e.id)));
        }
        if e.true_label >= m.num_classes {
            return Err(Error::Validation(format!(
                "instance {}: true_label {} out of range",
                e.id, e.true_label
            )));
        }
        if e.predicted_label >= m.num_classes {
            return Err(Error::Validation(format!(
                "instance {}: predicted_label {} out of range",
                e.id, e.predicted_label
            )));
        }
        if m.gradient_mode == GradientMode::Precomputed && e.gradient_path.is_none() {
            return Err(Error::Validation(format!(
                "instance {}: precomputed gradient mode requires gradient_path",
                e.id
            )));
        }
    }
    Ok(())
}

pub fn write_manifest(root: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let root = root.as_ref();
    validate_manifest(manifest)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
