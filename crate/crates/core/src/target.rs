//! Reference-encoding index and near-miss counterfactual targets: the
//! target is the predicted class of the closest reference sample whose
//! predicted class differs from the query's.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{write_atomic, TensorArchive};
use crate::attribution::lrp_attribute;
use crate::classifier::ClassifierModel;
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    /// Layer activation.
    Activation,
    /// Intermediate relevance of the model's own prediction at the layer.
    Attribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Spatial mean per channel.
    Mean,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    /// `1 - cos`; a zero vector is at distance 1 from everything.
    Cosine,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingMode {
    pub kind: EncodingKind,
    pub layer: String,
    pub pooling: Pooling,
}

impl EncodingMode {
    pub fn activation(layer: &str) -> Self {
        Self {
            kind: EncodingKind::Activation,
            layer: layer.into(),
            pooling: Pooling::Mean,
        }
    }

    pub fn attribution(layer: &str) -> Self {
        Self {
            kind: EncodingKind::Attribution,
            layer: layer.into(),
            pooling: Pooling::Mean,
        }
    }

    /// The encoding of one image.
    pub fn encode(&self, model: &ClassifierModel, x: &ndarray::Array3<f64>) -> Result<Array1<f64>> {
        let t = match self.kind {
            EncodingKind::Activation => model.tap(x, &self.layer)?.activation,
            EncodingKind::Attribution => {
                let pred = model.predict_one(x)?.class;
                lrp_attribute(model, x, pred, Some(&self.layer))?.relevance
            }
        };
        self.pool(&t)
    }

    fn pool(&self, t: &ArrayD<f64>) -> Result<Array1<f64>> {
        Ok(match (self.pooling, t.ndim()) {
            (Pooling::Flatten, _) | (Pooling::Mean, 1) => t.iter().copied().collect(),
            (Pooling::Mean, 3) => t
                .axis_iter(Axis(0))
                .map(|c| c.mean().unwrap_or(0.0))
                .collect(),
            _ => return Err(Error::InvalidConceptLayer(self.layer.clone())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearMiss {
    pub target: usize,
    pub sample_id: String,
    pub row: usize,
    pub distance: f64,
}

/// Encodings and model predictions for a reference set. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceIndex {
    mode: EncodingMode,
    distance: Distance,
    encodings: Array2<f64>,
    labels: Vec<usize>,
    ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub version: u32,
    pub mode: EncodingMode,
    pub distance: Distance,
    pub rows: usize,
    pub dim: usize,
    pub ids: Vec<String>,
    /// Model predictions, one per row.
    pub labels: Vec<usize>,
    /// SHA-256 of the encodings archive.
    pub archive_sha256: String,
}

pub const INDEX_VERSION: u32 = 1;
pub const INDEX_ARCHIVE: &str = "index.ccft";
pub const INDEX_MANIFEST: &str = "index.json";

impl IndexManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: IndexManifest = serde_json::from_slice(bytes)?;
        if m.version != INDEX_VERSION {
            return Err(Error::FormatVersion {
                found: m.version,
                supported: INDEX_VERSION,
            });
        }
        if m.ids.len() != m.rows || m.labels.len() != m.rows {
            return Err(Error::Format("index manifest row counts disagree".into()));
        }
        Ok(m)
    }
}

impl ReferenceIndex {
    /// Encode every sample; labels are the model's predictions.
    pub fn build(model: &ClassifierModel, data: &Dataset, mode: EncodingMode, distance: Distance) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let labels: Vec<usize> = model.predict_all(&data.images)?.into_iter().map(|p| p.class).collect();
        let rows: Vec<Array1<f64>> = data
            .images
            .iter()
            .map(|x| mode.encode(model, x))
            .collect::<Result<_>>()?;
        let dim = rows[0].len();
        let mut encodings = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            encodings.row_mut(i).assign(r);
        }
        Self::from_parts(mode, distance, encodings, labels, data.ids.clone())
    }

    pub fn from_parts(
        mode: EncodingMode,
        distance: Distance,
        encodings: Array2<f64>,
        labels: Vec<usize>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let n = encodings.nrows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != n || ids.len() != n {
            return Err(Error::InvalidArgument("index rows, labels and ids must have equal length".into()));
        }
        if encodings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reference encodings".into()));
        }
        Ok(Self {
            mode,
            distance,
            encodings,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mode(&self) -> &EncodingMode {
        &self.mode
    }

    pub fn distance(&self) -> Distance {
        self.distance
    }

    pub fn encodings(&self) -> &Array2<f64> {
        &self.encodings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Closest row whose label differs from `class`; ties go to the lower row.
    pub fn nearest_differing(&self, encoding: &[f64], class: usize) -> Result<NearMiss> {
        if encoding.len() != self.encodings.ncols() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.encodings.ncols()],
                got: vec![encoding.len()],
            });
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in self.encodings.rows().into_iter().enumerate() {
            if self.labels[i] == class {
                continue;
            }
            let d = self.distance.eval(row.as_slice().unwrap(), encoding);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        let (row, distance) = best.ok_or(Error::NoTarget(class))?;
        Ok(NearMiss {
            target: self.labels[row],
            sample_id: self.ids[row].clone(),
            row,
            distance,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<IndexManifest> {
        std::fs::create_dir_all(dir)?;
        let mut a = TensorArchive::new();
        a.set_meta("kind", &"reference_index")?;
        a.insert("encodings", self.encodings.clone().into_dyn());
        let bytes = a.encode();
        let manifest = IndexManifest {
            version: INDEX_VERSION,
            mode: self.mode.clone(),
            distance: self.distance,
            rows: self.len(),
            dim: self.encodings.ncols(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            archive_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        write_atomic(&dir.join(INDEX_ARCHIVE), &bytes)?;
        write_atomic(&dir.join(INDEX_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(INDEX_MANIFEST);
        let apath = dir.join(INDEX_ARCHIVE);
        for p in [&mpath, &apath] {
            if !p.exists() {
                return Err(Error::MissingPath(p.to_path_buf()));
            }
        }
        let manifest = IndexManifest::from_json(&std::fs::read(mpath)?)?;
        let bytes = std::fs::read(apath)?;
        if hex::encode(Sha256::digest(&bytes)) != manifest.archive_sha256 {
            return Err(Error::Integrity("index archive does not match its manifest".into()));
        }
        let a = TensorArchive::decode(&bytes)?;
        let enc = a
            .get("encodings")
            .ok_or_else(|| Error::Format("index archive has no `encodings`".into()))?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Format("encodings must be 2-D".into()))?;
        let enc: Array2<f64> = enc;
        if enc.dim() != (manifest.rows, manifest.dim) {
            return Err(Error::Format("encodings shape disagrees with manifest".into()));
        }
        Self::from_parts(manifest.mode, manifest.distance, enc, manifest.labels, manifest.ids)
    }
}

/// Target for `x`: the near miss with respect to the model's prediction.
pub fn near_miss_target(index: &ReferenceIndex, x: &ndarray::Array3<f64>, model: &ClassifierModel) -> Result<NearMiss> {
    let pred = model.predict_one(x)?.class;
    let enc = index.mode.encode(model, x)?;
    index.nearest_differing(enc.as_slice().unwrap(), pred)
}
