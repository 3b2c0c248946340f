//! Binary map formats and model files.
//!
//! Every grid file is little-endian and starts with a four byte magic tag and a
//! `u8` format version, followed by `u32` dimensions and the payload:
//!
//! | tag    | dimensions  | payload                          |
//! |--------|-------------|----------------------------------|
//! | `FMAP` | H, W, d     | H·W·d `f32`, pixel-major         |
//! | `LMAP` | H, W        | H·W `i32`, `-1` = ignore         |
//! | `PMAP` | H, W, C     | H·W·C `f32`, pixel-major         |
//! | `WMAP` | H, W        | H·W `f32`                        |
//!
//! Models are written either as a JSON document carrying `schema_version` and
//! `kind`, or as a `MODL` binary envelope. Both reproduce every `f64` exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

pub const FORMAT_VERSION: u8 = 1;
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Label value marking a pixel that carries no class.
pub const IGNORE: i32 = -1;

const MODEL_MAGIC: &[u8; 4] = b"MODL";

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOL: f64 = 1e-6;

fn grid_bytes(magic: &[u8; 4], dims: &[usize], payload: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(5 + 4 * dims.len() + payload.len());
    buf.extend_from_slice(magic);
    buf.push(FORMAT_VERSION);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(payload);
    Ok(buf)
}

fn write_grid(path: &Path, magic: &[u8; 4], dims: &[usize], payload: &[u8]) -> Result<()> {
    let buf = grid_bytes(magic, dims, payload)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Parses the header of a grid file and checks the payload length exactly.
fn read_grid<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    n_dims: usize,
    elem_size: usize,
) -> Result<(Vec<usize>, &'a [u8])> {
    let header_len = 5 + 4 * n_dims;
    if bytes.len() < 5 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "missing {} magic header",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {} version {}",
            String::from_utf8_lossy(magic),
            bytes[4]
        )));
    }
    if bytes.len() < header_len {
        return Err(Error::Format("truncated header".into()));
    }
    let dims: Vec<usize> = bytes[5..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(elem_size, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let payload = &bytes[header_len..];
    if payload.len() != expected {
        return Err(Error::Length {
            expected,
            found: payload.len(),
        });
    }
    Ok((dims, payload))
}

fn f32_payload(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn parse_f32(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Interpolator used when a feature map must be brought to label resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// An H×W grid of d-dimensional feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("feature dimension must be at least 1"));
        }
        if data.len() != height * width * dim {
            return Err(Error::shape(format!(
                "feature data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                dim
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The feature at pixel `i`, widened to `f64`.
    pub fn pixel_f64(&self, i: usize) -> Vec<f64> {
        self.pixel(i).iter().map(|&v| v as f64).collect()
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Resamples to `height`×`width` using half-pixel centres.
    pub fn resize(&self, height: usize, width: usize, interp: Interpolation) -> FeatureMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = FeatureMap::zeros(height, width, self.dim);
        if self.num_pixels() == 0 {
            return out;
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let dst = out.pixel_mut(y * width + x);
                match interp {
                    Interpolation::Nearest => {
                        let src = fy.round() as usize * self.width + fx.round() as usize;
                        dst.copy_from_slice(&self.data[src * self.dim..(src + 1) * self.dim]);
                    }
                    Interpolation::Bilinear => {
                        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
                        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                        let taps = [
                            (y0 * self.width + x0, (1.0 - ty) * (1.0 - tx)),
                            (y0 * self.width + x1, (1.0 - ty) * tx),
                            (y1 * self.width + x0, ty * (1.0 - tx)),
                            (y1 * self.width + x1, ty * tx),
                        ];
                        for (c, v) in dst.iter_mut().enumerate() {
                            let acc: f64 = taps
                                .iter()
                                .map(|&(p, w)| w * self.data[p * self.dim + c] as f64)
                                .sum();
                            *v = acc as f32;
                        }
                    }
                }
            }
        }
        out
    }

    /// Brings the map to the resolution of `labels`, if it differs.
    pub fn align_to(&self, labels: &LabelMap, interp: Interpolation) -> FeatureMap {
        self.resize(labels.height(), labels.width(), interp)
    }

    /// The complete FMAP file image, header included.
    pub fn to_file_bytes(&self) -> Result<Vec<u8>> {
        grid_bytes(
            b"FMAP",
            &[self.height, self.width, self.dim],
            &f32_payload(self.data.iter().copied()),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_bytes()?)?;
        Ok(())
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = read_grid(bytes, b"FMAP", 3, 4)?;
        FeatureMap::new(dims[0], dims[1], dims[2], parse_f32(payload))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_bytes(&fs::read(path)?)
    }
}

/// Per-pixel class ids; [`IGNORE`] marks pixels without a label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<i32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label data has {} values, expected {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < IGNORE) {
            return Err(Error::validation(format!("invalid label {bad}")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: i32) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [i32] {
        &mut self.labels
    }

    /// The class at pixel `i`, or `None` when ignored.
    pub fn get(&self, i: usize) -> Option<usize> {
        let l = self.labels[i];
        (l != IGNORE).then_some(l as usize)
    }

    /// Checks that every non-ignore label lies in `[0, classes)`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
            Some(&l) => Err(Error::validation(format!(
                "label {l} outside [0, {classes})"
            ))),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let payload: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        write_grid(path.as_ref(), b"LMAP", &[self.height, self.width], &payload)
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = read_grid(bytes, b"LMAP", 2, 4)?;
        let labels = payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        LabelMap::new(dims[0], dims[1], labels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_bytes(&fs::read(path)?)
    }
}

/// Per-pixel class probabilities, held in `f64`. The PMAP file stores `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::validation("a probability map needs at least one class"));
        }
        if probs.len() != height * width * classes {
            return Err(Error::shape(format!(
                "probability data has {} values, expected {}x{}x{}",
                probs.len(),
                height,
                width,
                classes
            )));
        }
        for (i, row) in probs.chunks_exact(classes).enumerate() {
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::validation(format!(
                    "pixel {i} has a negative or non-finite probability"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::validation(format!(
                    "pixel {i} probabilities sum to {s}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            probs,
        })
    }

    /// Row-wise softmax of pixel-major logits.
    pub fn from_logits(height: usize, width: usize, classes: usize, mut logits: Vec<f64>) -> Result<Self> {
        if classes == 0 || logits.len() != height * width * classes {
            return Err(Error::shape("logit buffer does not match the map shape"));
        }
        for row in logits.chunks_exact_mut(classes) {
            math::softmax_in_place(row);
        }
        Ok(Self {
            height,
            width,
            classes,
            probs: logits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn argmax(&self, i: usize) -> usize {
        math::argmax(self.pixel(i))
    }

    /// Arg-max class per pixel as a label map.
    pub fn argmax_map(&self) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            labels: (0..self.num_pixels()).map(|i| self.argmax(i) as i32).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_grid(
            path.as_ref(),
            b"PMAP",
            &[self.height, self.width, self.classes],
            &f32_payload(self.probs.iter().map(|&p| p as f32)),
        )
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = read_grid(bytes, b"PMAP", 3, 4)?;
        let probs = parse_f32(payload).into_iter().map(f64::from).collect();
        ProbMap::new(dims[0], dims[1], dims[2], probs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_bytes(&fs::read(path)?)
    }
}

/// A flat collection of d-vectors in double precision.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::shape(format!(
                "{} values cannot be split into vectors of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut set = FeatureSet::new(dim);
        for r in rows {
            set.push(r.as_ref())?;
        }
        Ok(set)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::shape(format!(
                "vector of dimension {} pushed into a set of dimension {}",
                row.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub(crate) fn push_f32(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend(row.iter().map(|&v| v as f64));
    }

    pub fn extend(&mut self, other: &FeatureSet) -> Result<()> {
        if other.dim != self.dim && !other.is_empty() {
            return Err(Error::shape("feature sets differ in dimension"));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// The rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        let mut out = FeatureSet::new(self.dim);
        out.data.reserve(indices.len() * self.dim);
        for &i in indices {
            out.data.extend_from_slice(self.row(i));
        }
        out
    }

    /// All pixel features of a map.
    pub fn from_map(map: &FeatureMap) -> Self {
        Self {
            dim: map.dim(),
            data: map.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Writes a single-channel weight grid (`WMAP`).
pub fn save_weight_grid(path: impl AsRef<Path>, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("weight grid size does not match its dimensions"));
    }
    write_grid(
        path.as_ref(),
        b"WMAP",
        &[height, width],
        &f32_payload(values.iter().map(|&v| v as f32)),
    )
}

/// Reads a `WMAP` grid as `(height, width, values)`.
pub fn load_weight_grid(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let (dims, payload) = read_grid(&bytes, b"WMAP", 2, 4)?;
    let values: Vec<f64> = parse_f32(payload).into_iter().map(f64::from).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite weight"));
    }
    Ok((dims[0], dims[1], values))
}

/// A model that can be written with [`save_model`].
pub trait ModelFile: Serialize + DeserializeOwned {
    /// Tag stored in the file so a model of the wrong type is rejected on load.
    const KIND: &'static str;

    fn validate(&self) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// Pretty JSON; floats printed with enough digits to round-trip.
    #[default]
    Text,
    /// `MODL` magic, `u32` schema version, then a bincode body.
    Binary,
}

#[derive(Serialize)]
struct TextEnvelopeRef<'a, M> {
    schema_version: u32,
    kind: &'a str,
    model: &'a M,
}

#[derive(Deserialize)]
struct TextEnvelopeHead {
    schema_version: Option<u32>,
    kind: Option<String>,
}

pub fn encode_model<M: ModelFile>(model: &M, encoding: Encoding) -> Result<Vec<u8>> {
    model.validate()?;
    match encoding {
        Encoding::Text => {
            let env = TextEnvelopeRef {
                schema_version: MODEL_SCHEMA_VERSION,
                kind: M::KIND,
                model,
            };
            let mut s = serde_json::to_string_pretty(&env)
                .map_err(|e| Error::Format(format!("model encoding failed: {e}")))?;
            s.push('\n');
            Ok(s.into_bytes())
        }
        Encoding::Binary => {
            let mut buf = MODEL_MAGIC.to_vec();
            buf.extend_from_slice(&MODEL_SCHEMA_VERSION.to_le_bytes());
            let body = bincode::serialize(&(M::KIND, model))
                .map_err(|e| Error::Format(format!("model encoding failed: {e}")))?;
            buf.extend_from_slice(&body);
            Ok(buf)
        }
    }
}

pub fn decode_model<M: ModelFile>(bytes: &[u8]) -> Result<M> {
    let model: M = if bytes.starts_with(MODEL_MAGIC) {
        if bytes.len() < 8 {
            return Err(Error::Format("truncated model header".into()));
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != MODEL_SCHEMA_VERSION {
            return Err(Error::Version {
                expected: MODEL_SCHEMA_VERSION,
                found: version,
            });
        }
        let (kind, model): (String, M) = bincode::deserialize(&bytes[8..])
            .map_err(|e| Error::Format(format!("malformed binary model: {e}")))?;
        if kind != M::KIND {
            return Err(Error::Format(format!(
                "model file holds a '{kind}', expected '{}'",
                M::KIND
            )));
        }
        model
    } else {
        let value: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::Format(format!("malformed model file: {e}")))?;
        let head: TextEnvelopeHead = serde_json::from_value(value.clone())
            .map_err(|e| Error::Format(format!("malformed model header: {e}")))?;
        let version = head
            .schema_version
            .ok_or_else(|| Error::Format("model file lacks schema_version".into()))?;
        if version != MODEL_SCHEMA_VERSION {
            return Err(Error::Version {
                expected: MODEL_SCHEMA_VERSION,
                found: version,
            });
        }
        match head.kind.as_deref() {
            Some(k) if k == M::KIND => {}
            other => {
                return Err(Error::Format(format!(
                    "model file holds a '{}', expected '{}'",
                    other.unwrap_or("<missing>"),
                    M::KIND
                )))
            }
        }
        let body = value
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Format("model file lacks a model body".into()))?;
        serde_json::from_value(body).map_err(|e| Error::Format(format!("malformed model body: {e}")))?
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model<M: ModelFile>(model: &M, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    fs::write(path, encode_model(model, encoding)?)?;
    Ok(())
}

/// Loads a model, detecting the encoding from the leading bytes.
pub fn load_model<M: ModelFile>(path: impl AsRef<Path>) -> Result<M> {
    decode_model(&fs::read(path)?)
}
