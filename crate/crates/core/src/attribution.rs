//! Relevance propagation (epsilon rule), channel-conditioned relevance,
//! relevance-maximization reference patches and localization maps.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Stabilizer of the epsilon rule used on every layer.
pub const LRP_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    Full,
    ChannelConditioned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// Layer the relevance lives at (`input` for input attributions).
    pub layer: String,
    /// Relevance without batch axis, channel first.
    pub relevance: ArrayD<f64>,
    pub target: usize,
    /// Pre-softmax score of the target, i.e. the relevance injected at the output.
    pub target_score: f64,
    pub mode: AttributionMode,
    pub channels: Option<Vec<usize>>,
    /// Relevance at the conditioning layer after masking (conditioned mode only).
    pub conditioning: Option<ArrayD<f64>>,
    /// The conditioned channel set was empty; the map is all zeros.
    pub empty: bool,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.relevance.sum()
    }

    /// Per-channel relevance summed over the spatial axes.
    pub fn pooled(&self) -> Vec<f64> {
        channel_sums(&self.relevance)
    }
}

pub(crate) fn channel_sums(t: &ArrayD<f64>) -> Vec<f64> {
    if t.ndim() <= 1 {
        return t.iter().copied().collect();
    }
    t.axis_iter(Axis(0)).map(|c| c.sum()).collect()
}

fn check_target(model: &ClassifierModel, target: usize) -> Result<()> {
    if target >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            class: target,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

fn relevance_pass(
    model: &ClassifierModel,
    x: &Array3<f64>,
    target: usize,
    stop_at: Option<usize>,
    hook: Option<(usize, &dyn Fn(&mut ArrayD<f64>))>,
) -> Result<(Vec<Option<ArrayD<f64>>>, f64)> {
    check_target(model, target)?;
    let acts = model.forward_acts(x)?;
    let out = acts.last().unwrap();
    let score = out[[0, target]];
    let mut r = ArrayD::zeros(out.raw_dim());
    r[[0, target]] = score;
    let rel = model.graph().lrp(&acts, r, LRP_EPSILON, stop_at, hook)?;
    Ok((rel, score))
}

fn unbatch(r: &Option<ArrayD<f64>>, shape: &[usize]) -> ArrayD<f64> {
    match r {
        Some(r) => r.index_axis(Axis(0), 0).to_owned(),
        None => ArrayD::zeros(IxDyn(&shape[1..])),
    }
}

/// Relevance of `target` at the input, or at `until_layer` when given.
pub fn lrp_attribute(
    model: &ClassifierModel,
    x: &Array3<f64>,
    target: usize,
    until_layer: Option<&str>,
) -> Result<AttributionMap> {
    let idx = match until_layer {
        Some(l) => model.layer_index(l)?,
        None => 0,
    };
    let (rel, score) = relevance_pass(model, x, target, until_layer.map(|_| idx), None)?;
    let shape = layer_batch_shape(model, idx)?;
    Ok(AttributionMap {
        layer: model.graph().nodes()[idx].name.clone(),
        relevance: unbatch(&rel[idx], &shape),
        target,
        target_score: score,
        mode: AttributionMode::Full,
        channels: None,
        conditioning: None,
        empty: false,
    })
}

fn layer_batch_shape(model: &ClassifierModel, idx: usize) -> Result<Vec<usize>> {
    let name = &model.graph().nodes()[idx].name;
    let mut s = vec![1];
    s.extend(model.layer_shape(name)?);
    Ok(s)
}

/// Input relevance of `target` restricted to `channels` at `layer`.
pub fn crp_attribute(
    model: &ClassifierModel,
    x: &Array3<f64>,
    target: usize,
    layer: &str,
    channels: &[usize],
) -> Result<AttributionMap> {
    let idx = model.layer_index(layer)?;
    let shape = layer_batch_shape(model, idx)?;
    if shape.len() < 3 {
        return Err(Error::InvalidConceptLayer(layer.to_string()));
    }
    let k = shape[1];
    if let Some(&c) = channels.iter().find(|&&c| c >= k) {
        return Err(Error::ChannelOutOfRange { channel: c, channels: k });
    }
    let mut keep = vec![false; k];
    for &c in channels {
        keep[c] = true;
    }
    let mask = |r: &mut ArrayD<f64>| {
        for (c, mut ch) in r.axis_iter_mut(Axis(1)).enumerate() {
            if !keep[c] {
                ch.fill(0.0);
            }
        }
    };
    let (rel, score) = relevance_pass(model, x, target, None, Some((idx, &mask)))?;
    let input_shape = layer_batch_shape(model, 0)?;
    let empty = channels.is_empty();
    let relevance = if empty {
        ArrayD::zeros(IxDyn(&input_shape[1..]))
    } else {
        unbatch(&rel[0], &input_shape)
    };
    if empty {
        log::warn!("channel-conditioned attribution with an empty channel set");
    }
    Ok(AttributionMap {
        layer: "input".into(),
        relevance,
        target,
        target_score: score,
        mode: AttributionMode::ChannelConditioned,
        channels: Some(channels.to_vec()),
        conditioning: Some(unbatch(&rel[idx], &shape)),
        empty,
    })
}

/// Crop rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePatch {
    pub sample_id: String,
    pub sample_index: usize,
    pub rect: CropRect,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReference {
    pub layer: String,
    pub channel: usize,
    /// Sorted by score, descending.
    pub references: Vec<ReferencePatch>,
    /// Every sample scored zero for this channel.
    pub zero_relevance: bool,
}

/// Rank samples by the relevance of one channel at `layer` (each sample
/// explained for its own predicted class) and crop each around the most
/// relevant position using the layer's receptive field.
pub fn relevance_maximization(
    model: &ClassifierModel,
    data: &Dataset,
    layer: &str,
    channel: usize,
    n_refs: usize,
) -> Result<ConceptReference> {
    Ok(relevance_maximization_many(model, data, layer, &[channel], n_refs)?.remove(0))
}

/// [`relevance_maximization`] for several channels with one attribution
/// pass per sample.
pub fn relevance_maximization_many(
    model: &ClassifierModel,
    data: &Dataset,
    layer: &str,
    channels: &[usize],
    n_refs: usize,
) -> Result<Vec<ConceptReference>> {
    if n_refs == 0 {
        return Err(Error::InvalidArgument("n_refs must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx = model.layer_index(layer)?;
    let shape = model.layer_shape(layer)?;
    if shape.len() != 3 {
        return Err(Error::InvalidConceptLayer(layer.to_string()));
    }
    if let Some(&channel) = channels.iter().find(|&&c| c >= shape[0]) {
        return Err(Error::ChannelOutOfRange {
            channel,
            channels: shape[0],
        });
    }
    let rf = model.graph().receptive_field(idx);
    let [_, ih, iw] = model.input_shape();
    let mut scored: Vec<Vec<ReferencePatch>> = vec![Vec::with_capacity(data.len()); channels.len()];
    for (i, x) in data.images.iter().enumerate() {
        let pred = model.predict_one(x)?.class;
        let map = lrp_attribute(model, x, pred, Some(layer))?;
        for (slot, &channel) in scored.iter_mut().zip(channels) {
            let ch = map.relevance.index_axis(Axis(0), channel);
            let mut best = (0, 0, f64::NEG_INFINITY);
            for ((y, xx), &v) in ch.indexed_iter().map(|(d, v)| ((d[0], d[1]), v)) {
                if v > best.2 {
                    best = (y, xx, v);
                }
            }
            let rect = if rf.global {
                CropRect {
                    top: 0,
                    left: 0,
                    height: ih,
                    width: iw,
                }
            } else {
                crop_around(rf.start + rf.jump * best.0 as f64, rf.start + rf.jump * best.1 as f64, rf.size, ih, iw)
            };
            slot.push(ReferencePatch {
                sample_id: data.ids[i].clone(),
                sample_index: i,
                rect,
                score: ch.sum(),
            });
        }
    }
    Ok(scored
        .into_iter()
        .zip(channels)
        .map(|(mut patches, &channel)| {
            patches.sort_by(|a, b| b.score.total_cmp(&a.score));
            let zero_relevance = patches.iter().all(|p| p.score == 0.0);
            if zero_relevance {
                log::warn!("channel {channel} at `{layer}` has zero relevance on every sample");
            }
            patches.truncate(n_refs);
            ConceptReference {
                layer: layer.to_string(),
                channel,
                references: patches,
                zero_relevance,
            }
        })
        .collect())
}

/// Square window of side `size` centered at pixel-center coordinates
/// `(cy, cx)`, clipped to the image.
fn crop_around(cy: f64, cx: f64, size: f64, h: usize, w: usize) -> CropRect {
    let span = |c: f64, n: usize| {
        let lo = (c - size / 2.0).round().max(0.0) as usize;
        let hi = ((c + size / 2.0).round().max(0.0) as usize).min(n);
        let lo = lo.min(n.saturating_sub(1));
        (lo, hi.max(lo + 1))
    };
    let (top, bottom) = span(cy, h);
    let (left, right) = span(cx, w);
    CropRect {
        top,
        left,
        height: bottom - top,
        width: right - left,
    }
}

/// Spatial threshold, either on absolute magnitude or as a per-map quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SpatialThreshold {
    Absolute(f64),
    Quantile(f64),
}

impl SpatialThreshold {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SpatialThreshold::Absolute(t) if !(t >= 0.0 && t.is_finite()) => {
                Err(Error::InvalidArgument(format!("spatial threshold {t} must be finite and >= 0")))
            }
            SpatialThreshold::Quantile(q) if !(0.0..=1.0).contains(&q) => {
                Err(Error::InvalidArgument(format!("spatial quantile {q} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Binary support of `magnitude >= threshold`. For quantile `q` over `n`
/// cells the cut is the value of rank `ceil(q n)` (0-based, ascending). The
/// argmax cell (first on ties) is always kept.
pub fn spatial_support(magnitude: &Array2<f64>, threshold: SpatialThreshold) -> Result<Array2<bool>> {
    threshold.validate()?;
    if magnitude.is_empty() {
        return Err(Error::InvalidArgument("empty spatial map".into()));
    }
    let cut = match threshold {
        SpatialThreshold::Absolute(t) => t,
        SpatialThreshold::Quantile(q) => {
            let mut v: Vec<f64> = magnitude.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            v[((q * n as f64).ceil() as usize).min(n - 1)]
        }
    };
    let mut mask = magnitude.mapv(|m| m >= cut);
    let mut best = (0, 0);
    for ((y, x), &m) in magnitude.indexed_iter() {
        if m > magnitude[best] {
            best = (y, x);
        }
    }
    mask[best] = true;
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub channel: usize,
    /// Values in `[0, 1]` at input resolution.
    pub map: Array2<f64>,
    /// The binary mask at layer resolution it was rendered from.
    pub support: Array2<bool>,
}

/// Threshold one channel's magnitude and upscale it to `(height, width)`.
pub fn localization_map(
    tensor: &ArrayD<f64>,
    channel: usize,
    input_hw: (usize, usize),
    threshold: SpatialThreshold,
) -> Result<LocalizationMap> {
    if tensor.ndim() != 3 {
        return Err(Error::InvalidArgument(format!(
            "localization needs a (C, H, W) tensor, got {} axes",
            tensor.ndim()
        )));
    }
    let k = tensor.shape()[0];
    if channel >= k {
        return Err(Error::ChannelOutOfRange { channel, channels: k });
    }
    let mag = tensor
        .index_axis(Axis(0), channel)
        .mapv(f64::abs)
        .into_dimensionality()
        .unwrap();
    let support = spatial_support(&mag, threshold)?;
    Ok(LocalizationMap {
        channel,
        map: upscale_support(&support, input_hw),
        support,
    })
}

/// Bilinear upscaling of a binary mask, gated by nearest-neighbor upscaling
/// so that every active output pixel lies inside an active cell.
pub fn upscale_support(mask: &Array2<bool>, (oh, ow): (usize, usize)) -> Array2<f64> {
    let (h, w) = mask.dim();
    let m = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    let src = |d: usize, n: usize, on: usize| ((d as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let ny = (y * h / oh).min(h - 1);
        let nx = (x * w / ow).min(w - 1);
        if !mask[[ny, nx]] {
            return 0.0;
        }
        let (sy, sx) = (src(y, h, oh), src(x, w, ow));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = m[[y0, x0]] * (1.0 - fx) + m[[y0, x1]] * fx;
        let bottom = m[[y1, x0]] * (1.0 - fx) + m[[y1, x1]] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub path: String,
    pub sample_id: String,
    pub score: f64,
    pub rect: CropRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPatches {
    pub channel: usize,
    pub zero_relevance: bool,
    pub patches: Vec<PatchEntry>,
}

/// Index of exported reference patches; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub version: u32,
    pub layer: String,
    pub channels: Vec<ChannelPatches>,
}

pub const PATCH_MANIFEST_VERSION: u32 = 1;
pub const PATCH_MANIFEST_FILE: &str = "patches.json";

impl PatchManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: PatchManifest = serde_json::from_slice(bytes)?;
        if m.version != PATCH_MANIFEST_VERSION {
            return Err(Error::FormatVersion {
                found: m.version,
                supported: PATCH_MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PATCH_MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingPath(path));
        }
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn channel(&self, channel: usize) -> Option<&ChannelPatches> {
        self.channels.iter().find(|c| c.channel == channel)
    }
}

/// Write each reference crop as a PNG under `dir` plus a manifest.
pub fn export_references(refs: &[ConceptReference], data: &Dataset, dir: &Path) -> Result<PatchManifest> {
    std::fs::create_dir_all(dir)?;
    let layer = refs.first().map(|r| r.layer.clone()).unwrap_or_default();
    let mut channels = Vec::with_capacity(refs.len());
    for r in refs {
        let mut patches = Vec::with_capacity(r.references.len());
        for (rank, p) in r.references.iter().enumerate() {
            let img = data
                .images
                .get(p.sample_index)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {} not in dataset", p.sample_index)))?;
            let c = p.rect;
            let crop = img
                .slice(ndarray::s![.., c.top..c.top + c.height, c.left..c.left + c.width])
                .to_owned();
            let name = format!("ch{:03}_{rank:02}.png", r.channel);
            crate::data::save_png(&dir.join(&name), &crop)?;
            patches.push(PatchEntry {
                path: name,
                sample_id: p.sample_id.clone(),
                score: p.score,
                rect: c,
            });
        }
        channels.push(ChannelPatches {
            channel: r.channel,
            zero_relevance: r.zero_relevance,
            patches,
        });
    }
    let manifest = PatchManifest {
        version: PATCH_MANIFEST_VERSION,
        layer,
        channels,
    };
    crate::archive::write_atomic(&dir.join(PATCH_MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
