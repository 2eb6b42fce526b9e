//! Concept-restricted counterfactual generation.
//!
//! The classifier gradient towards the target is masked at a concept layer
//! (selected channels, optionally restricted spatially), pulled back to the
//! diffusion state and added to the noise estimate of every reverse step.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{localization_map, spatial_support, upscale_support, LocalizationMap, SpatialThreshold};
use crate::classifier::{ClassifierModel, Objective, Prediction};
use crate::data::{load_png, quantize, save_map_png, save_png};
use crate::diffusion::{estimate_x0, forward_diffuse, sample_from, Denoiser, LatentCodec, NoiseSchedule, StepNoise};
use crate::error::{check_shape, Error, Result};
use crate::metrics::lp_distance;
use crate::target::{near_miss_target, NearMiss, ReferenceIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSelection {
    pub layer: String,
    /// Selected channels, most important first.
    pub channels: Vec<usize>,
    /// `|sum over space of the layer gradient|` per selected channel.
    pub scores: Vec<f64>,
    /// Channel count of the layer.
    pub total_channels: usize,
}

impl ConceptSelection {
    pub fn k(&self) -> usize {
        self.channels.len()
    }
}

/// Top `k` entries of `|summed|`; ties go to the lower index.
pub fn top_k_channels(summed: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > summed.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            summed.len()
        )));
    }
    let mut v: Vec<(usize, f64)> = summed.iter().map(|s| s.abs()).enumerate().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    Ok(v)
}

/// Gradient of `log p(target | x)` at `layer`, without batch axis.
pub fn layer_gradient(model: &ClassifierModel, x: &Array3<f64>, target: usize, layer: &str) -> Result<ArrayD<f64>> {
    model.concept_layer_index(layer)?;
    let pass = model.gradient(x, &Objective::LogProb(target), Some((layer, &|_| {})))?;
    Ok(pass.layer.unwrap())
}

/// Rank channels at `layer` by the absolute spatial sum of the gradient of
/// `log p(target | x)` and keep the top `k`.
pub fn select_concepts(
    model: &ClassifierModel,
    x: &Array3<f64>,
    target: usize,
    layer: &str,
    k: usize,
) -> Result<ConceptSelection> {
    let g = layer_gradient(model, x, target, layer)?;
    selection_from_gradient(layer, &g, k)
}

pub fn selection_from_gradient(layer: &str, grad: &ArrayD<f64>, k: usize) -> Result<ConceptSelection> {
    let summed = crate::attribution::channel_sums(grad);
    let top = top_k_channels(&summed, k)?;
    Ok(ConceptSelection {
        layer: layer.to_string(),
        channels: top.iter().map(|t| t.0).collect(),
        scores: top.iter().map(|t| t.1).collect(),
        total_channels: summed.len(),
    })
}

/// Binary channel mask at a layer with optional per-concept spatial masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMask {
    pub layer: String,
    pub channels: Vec<bool>,
    /// `(channel, mask)` pairs at layer resolution.
    pub spatial: Vec<(usize, Array2<bool>)>,
    pub threshold: Option<SpatialThreshold>,
}

impl ConceptMask {
    pub fn full(layer: &str, channels: usize) -> Self {
        Self::from_channels(layer, channels, &(0..channels).collect::<Vec<_>>())
    }

    pub fn empty(layer: &str, channels: usize) -> Self {
        Self::from_channels(layer, channels, &[])
    }

    pub fn from_channels(layer: &str, channels: usize, selected: &[usize]) -> Self {
        let mut m = vec![false; channels];
        for &c in selected {
            if c < channels {
                m[c] = true;
            }
        }
        Self {
            layer: layer.to_string(),
            channels: m,
            spatial: vec![],
            threshold: None,
        }
    }

    pub fn from_selection(selection: &ConceptSelection) -> Self {
        Self::from_channels(&selection.layer, selection.total_channels, &selection.channels)
    }

    pub fn k(&self) -> usize {
        self.channels.iter().filter(|&&b| b).count()
    }

    /// Every channel selected and no spatial restriction.
    pub fn is_full(&self) -> bool {
        self.channels.iter().all(|&b| b) && self.spatial.iter().all(|(_, m)| m.iter().all(|&b| b))
    }

    /// Zero a `(N, K, H, W)` (or `(N, K)`) gradient outside the mask.
    pub fn apply(&self, g: &mut ArrayD<f64>) -> Result<()> {
        if g.ndim() < 2 || g.shape()[1] != self.channels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.channels.len()],
                got: g.shape().get(1).copied().into_iter().collect(),
            });
        }
        for (c, mut ch) in g.axis_iter_mut(Axis(1)).enumerate() {
            if !self.channels[c] {
                ch.fill(0.0);
            }
        }
        for (c, sm) in &self.spatial {
            for mut sample in g.axis_iter_mut(Axis(0)) {
                let mut plane = sample.index_axis_mut(Axis(0), *c);
                check_shape(sm.shape(), plane.shape())?;
                ndarray::Zip::from(&mut plane).and(sm.view().into_dyn()).for_each(|v, &keep| {
                    if !keep {
                        *v = 0.0
                    }
                });
            }
        }
        Ok(())
    }
}

/// Per-concept binary spatial masks where `|layer gradient|` clears the threshold.
pub fn spatial_constrain(
    selection: &ConceptSelection,
    layer_gradient: &ArrayD<f64>,
    threshold: SpatialThreshold,
) -> Result<ConceptMask> {
    if layer_gradient.ndim() != 3 || layer_gradient.shape()[0] != selection.total_channels {
        return Err(Error::ShapeMismatch {
            expected: vec![selection.total_channels, 0, 0],
            got: layer_gradient.shape().to_vec(),
        });
    }
    let mut mask = ConceptMask::from_selection(selection);
    for &c in &selection.channels {
        let mag = layer_gradient
            .index_axis(Axis(0), c)
            .mapv(f64::abs)
            .into_dimensionality()
            .unwrap();
        mask.spatial.push((c, spatial_support(&mag, threshold)?));
    }
    mask.threshold = Some(threshold);
    Ok(mask)
}

/// Input and layer gradients of `objective` with `mask` applied at its layer.
#[derive(Debug, Clone)]
pub struct MaskedGradient {
    pub input: Array3<f64>,
    pub layer: ArrayD<f64>,
}

pub fn masked_gradient_for(
    model: &ClassifierModel,
    x: &Array3<f64>,
    objective: &Objective,
    mask: &ConceptMask,
) -> Result<MaskedGradient> {
    model.concept_layer_index(&mask.layer)?;
    let shape = model.layer_shape(&mask.layer)?;
    if shape[0] != mask.channels.len() {
        return Err(Error::ShapeMismatch {
            expected: shape,
            got: vec![mask.channels.len()],
        });
    }
    let failed = std::cell::Cell::new(false);
    let hook = |g: &mut ArrayD<f64>| {
        if mask.apply(g).is_err() {
            failed.set(true);
        }
    };
    let pass = model.gradient(x, objective, Some((&mask.layer, &hook)))?;
    if failed.get() {
        return Err(Error::InvalidArgument("spatial mask does not match the layer".into()));
    }
    Ok(MaskedGradient {
        input: pass.input,
        layer: pass.layer.unwrap(),
    })
}

/// Masked gradient of `log p(target | x)`; the mask must sit at the selection's layer.
pub fn masked_gradient(
    model: &ClassifierModel,
    x: &Array3<f64>,
    target: usize,
    selection: &ConceptSelection,
    mask: &ConceptMask,
) -> Result<MaskedGradient> {
    if selection.layer != mask.layer {
        return Err(Error::InvalidArgument(format!(
            "mask layer `{}` differs from selection layer `{}`",
            mask.layer, selection.layer
        )));
    }
    masked_gradient_for(model, x, &Objective::LogProb(target), mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consensus {
    None,
    /// Drop the classifier score when its cosine to the implicit score is
    /// below the threshold.
    CosineFilter,
    /// Remove the component of the classifier score that opposes the implicit score.
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub consensus: Consensus,
    pub consensus_threshold: f64,
    pub lp_weight: f64,
    /// 1 or 2.
    pub lp_order: u32,
    /// Steps `t <= suspension_steps` use the unmasked gradient.
    pub suspension_steps: usize,
    /// Class condition of the implicit score; defaults to the target.
    pub class_condition: Option<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 1.5,
            consensus: Consensus::CosineFilter,
            consensus_threshold: 0.0,
            lp_weight: 0.01,
            lp_order: 1,
            suspension_steps: 10,
            class_condition: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale {} must be finite and >= 0", self.scale)));
        }
        if !(self.lp_weight >= 0.0 && self.lp_weight.is_finite()) {
            return Err(Error::Config(format!("lp weight {} must be finite and >= 0", self.lp_weight)));
        }
        if self.lp_order != 1 && self.lp_order != 2 {
            return Err(Error::Config(format!("lp order {} must be 1 or 2", self.lp_order)));
        }
        if !(-1.0..=1.0).contains(&self.consensus_threshold) {
            return Err(Error::Config("consensus threshold must lie in [-1, 1]".into()));
        }
        if self.suspension_steps >= steps.max(1) {
            return Err(Error::Config(format!(
                "suspension steps {} must be smaller than T = {steps}",
                self.suspension_steps
            )));
        }
        Ok(())
    }
}

/// Everything the score computation needs that stays fixed over a trajectory.
pub struct GuidanceContext<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a LatentCodec,
    pub model: &'a ClassifierModel,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a GuidanceConfig,
    pub target: usize,
    pub mask: &'a ConceptMask,
    /// Original image for the distance term.
    pub original: &'a Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceStep {
    pub score: Array1<f64>,
    /// Concept masking was in effect.
    pub masked: bool,
    /// Cosine between the classifier and implicit scores (0 if undefined).
    pub cosine: f64,
    /// Non-finite gradient, score replaced by zero.
    pub skipped: bool,
    /// Consensus removed (part of) the classifier score.
    pub filtered: bool,
}

/// Classifier score in noise space for state `z_t`, where `eps_hat` is the
/// noise estimate used for the clean-state prediction.
pub fn guidance_score(ctx: &GuidanceContext<'_>, z_t: &Array1<f64>, t: usize, eps_hat: &Array1<f64>) -> Result<GuidanceStep> {
    let cfg = ctx.config;
    let dim = z_t.len();
    let zero = |masked| GuidanceStep {
        score: Array1::zeros(dim),
        masked,
        cosine: 0.0,
        skipped: false,
        filtered: false,
    };
    let masked = t > cfg.suspension_steps && !ctx.mask.is_full();
    if cfg.scale == 0.0 {
        return Ok(zero(masked));
    }
    let ab = ctx.schedule.alpha_bar(t);
    let x0 = estimate_x0(z_t, t, eps_hat, ctx.schedule)?;
    let img = ctx.codec.decode(&x0)?;
    let objective = Objective::CrossEntropy(ctx.target);
    let mut g_img = if masked {
        masked_gradient_for(ctx.model, &img, &objective, ctx.mask)?.input
    } else {
        ctx.model.input_gradient(&img, &objective)?
    };
    if cfg.lp_weight > 0.0 {
        g_img += &lp_gradient(&img, ctx.original, cfg.lp_order).mapv(|v| v * cfg.lp_weight);
    }
    let g_z = ctx.codec.decode_vjp(&x0, &g_img)? / ab.sqrt();
    let mut score = g_z * (cfg.scale * (1.0 - ab).sqrt());
    if score.iter().any(|v| !v.is_finite()) {
        log::warn!("non-finite guidance at t = {t}; step left unguided");
        return Ok(GuidanceStep {
            skipped: true,
            ..zero(masked)
        });
    }
    let mut cosine = 0.0;
    let mut filtered = false;
    if cfg.consensus != Consensus::None {
        let c = cfg.class_condition.unwrap_or(ctx.target);
        let zb = ndarray::stack(Axis(0), &[z_t.view(), z_t.view()]).unwrap();
        let eps = ctx.denoiser.predict_batch(zb.view(), &[t, t], &[Some(c), None]);
        let implicit = &eps.row(0) - &eps.row(1);
        let dot = score.dot(&implicit);
        let denom = score.dot(&score).sqrt() * implicit.dot(&implicit).sqrt();
        cosine = if denom > 0.0 { dot / denom } else { 0.0 };
        match cfg.consensus {
            Consensus::CosineFilter if cosine < cfg.consensus_threshold => {
                score.fill(0.0);
                filtered = true;
            }
            Consensus::Projection if dot < 0.0 => {
                let nn = implicit.dot(&implicit);
                if nn > 0.0 {
                    score.scaled_add(-dot / nn, &implicit);
                    filtered = true;
                }
            }
            _ => {}
        }
    }
    Ok(GuidanceStep {
        score,
        masked,
        cosine,
        skipped: false,
        filtered,
    })
}

fn lp_gradient(x: &Array3<f64>, reference: &Array3<f64>, p: u32) -> Array3<f64> {
    let d = x - reference;
    if p == 1 {
        return d.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
    }
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        d / n
    } else {
        d
    }
}

/// Where the counterfactual class comes from.
#[derive(Debug, Clone, Copy)]
pub enum TargetSource<'a> {
    NearMiss(&'a ReferenceIndex),
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualConfig {
    pub guidance: GuidanceConfig,
    /// Number of concepts; `None` (`"all"` in files) selects every channel.
    #[serde(with = "concept_count")]
    pub k: Option<usize>,
    /// Concept layer; defaults to the model's last whitelisted layer.
    pub layer: Option<String>,
    /// Spatial conditioning threshold; `None` disables spatial masks.
    pub spatial: Option<SpatialThreshold>,
    /// Threshold for localization maps when spatial masks are off.
    pub localization: SpatialThreshold,
    /// Starting noise level as a fraction of T.
    pub t_start: f64,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            k: Some(10),
            layer: None,
            spatial: None,
            localization: SpatialThreshold::Quantile(0.75),
            t_start: 0.5,
        }
    }
}

mod concept_count {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Count(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(k: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match k {
            Some(k) => Repr::Count(*k),
            None => Repr::Word("all".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Count(k) => Ok(Some(k)),
            Repr::Word(w) if w == "all" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("k must be a count or \"all\", got \"{w}\""))),
        }
    }
}

impl CounterfactualConfig {
    pub fn start_step(&self, steps: usize) -> usize {
        ((self.t_start * steps as f64).round() as usize).min(steps)
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        self.guidance.validate(steps)?;
        if !(0.0..=1.0).contains(&self.t_start) {
            return Err(Error::Config(format!("t_start {} outside [0, 1]", self.t_start)));
        }
        if self.k == Some(0) {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if let Some(s) = self.spatial {
            s.validate()?;
        }
        self.localization.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub flipped: bool,
    pub counterfactual_class: usize,
    /// Confidence of the counterfactual in the target class.
    pub target_confidence: f64,
    pub l1: f64,
    pub l2: f64,
}

impl SampleMetrics {
    pub fn compute(model: &ClassifierModel, original: &Array3<f64>, cf: &Array3<f64>, target: usize) -> Result<Self> {
        let p = model.predict_one(cf)?;
        Ok(Self {
            flipped: p.class == target,
            counterfactual_class: p.class,
            target_confidence: p.confidences[target],
            l1: lp_distance(original, cf, 1)?,
            l2: lp_distance(original, cf, 2)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub seed: u64,
    pub config_hash: String,
    pub t_start: usize,
    pub guided_steps: usize,
    pub masked_steps: usize,
    pub filtered_steps: usize,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult {
    pub sample_id: String,
    pub original: Array3<f64>,
    pub counterfactual: Array3<f64>,
    pub original_prediction: Prediction,
    pub target: usize,
    pub near_miss: Option<NearMiss>,
    pub selection: ConceptSelection,
    pub mask: ConceptMask,
    pub localization: Vec<LocalizationMap>,
    pub metrics: SampleMetrics,
    pub trace: GenerationTrace,
}

/// Components shared by every generation in a run.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub model: &'a ClassifierModel,
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a LatentCodec,
    pub schedule: &'a NoiseSchedule,
}

impl Generator<'_> {
    /// Full generation for one image: target, concept selection, fixed
    /// masks, guided reverse diffusion from the noised original, decoding.
    pub fn generate(
        &self,
        sample_id: &str,
        x: &Array3<f64>,
        target: TargetSource<'_>,
        config: &CounterfactualConfig,
        seed: u64,
        config_hash: &str,
    ) -> Result<CounterfactualResult> {
        config.validate(self.schedule.steps())?;
        let x = quantize(x);
        let model = self.model;
        let original_prediction = model.predict_one(&x)?;
        let (target, near_miss) = match target {
            TargetSource::NearMiss(index) => {
                let nm = near_miss_target(index, &x, model)?;
                (nm.target, Some(nm))
            }
            TargetSource::Fixed(c) => {
                if c >= model.num_classes() {
                    return Err(Error::ClassOutOfRange {
                        class: c,
                        classes: model.num_classes(),
                    });
                }
                (c, None)
            }
        };
        let layer = match &config.layer {
            Some(l) => l.clone(),
            None => model
                .default_concept_layer()
                .ok_or_else(|| Error::InvalidArgument("model has no concept layers".into()))?
                .to_string(),
        };
        let grad = layer_gradient(model, &x, target, &layer)?;
        let k = config.k.unwrap_or(grad.shape()[0]);
        let selection = selection_from_gradient(&layer, &grad, k)?;
        let mask = match config.spatial {
            Some(thr) => spatial_constrain(&selection, &grad, thr)?,
            None => ConceptMask::from_selection(&selection),
        };
        let [_, h, w] = model.input_shape();
        let loc_threshold = config.spatial.unwrap_or(config.localization);
        let localization = selection
            .channels
            .iter()
            .map(|&c| localization_map(&grad, c, (h, w), loc_threshold))
            .collect::<Result<Vec<_>>>()?;

        let noise = StepNoise::new(seed);
        let z0 = self.codec.encode(&x)?;
        let t_start = config.start_step(self.schedule.steps());
        let z_start = if t_start > 0 {
            let eps = noise.start(z0.len());
            forward_diffuse(&z0, t_start, self.schedule, Some(&eps), &mut ChaCha8Rng::seed_from_u64(seed))?.xt
        } else {
            z0
        };
        let ctx = GuidanceContext {
            denoiser: self.denoiser,
            codec: self.codec,
            model,
            schedule: self.schedule,
            config: &config.guidance,
            target,
            mask: &mask,
            original: &x,
        };
        let mut trace = GenerationTrace {
            seed,
            config_hash: config_hash.to_string(),
            t_start,
            guided_steps: 0,
            masked_steps: 0,
            filtered_steps: 0,
            skipped_steps: 0,
        };
        let mut hook = |z: &Array1<f64>, t: usize, eps: &Array1<f64>| -> Result<Array1<f64>> {
            let step = guidance_score(&ctx, z, t, eps)?;
            trace.guided_steps += 1;
            trace.masked_steps += step.masked as usize;
            trace.filtered_steps += step.filtered as usize;
            trace.skipped_steps += step.skipped as usize;
            Ok(step.score)
        };
        let z = sample_from(
            self.denoiser,
            self.schedule,
            z_start,
            t_start,
            None,
            Some(&mut hook),
            &noise,
            self.codec.x0_bound(),
            None,
        )?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "generation for `{sample_id}` diverged (seed {seed}, t_start {t_start})"
            )));
        }
        let counterfactual = quantize(&self.codec.decode(&z)?);
        let metrics = SampleMetrics::compute(model, &x, &counterfactual, target)?;
        Ok(CounterfactualResult {
            sample_id: sample_id.to_string(),
            original: x,
            counterfactual,
            original_prediction,
            target,
            near_miss,
            selection,
            mask,
            localization,
            metrics,
            trace,
        })
    }
}

pub const RECORD_FILE: &str = "record.json";
pub const CONCEPTS_FILE: &str = "concepts.json";
pub const ORIGINAL_FILE: &str = "original.png";
pub const COUNTERFACTUAL_FILE: &str = "counterfactual.png";
pub const RESULT_VERSION: u32 = 1;

/// Concept manifest of a result directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptManifest {
    pub selection: ConceptSelection,
    pub mask: ConceptMask,
    /// Localization map files, one per selected concept, in selection order.
    pub localization_files: Vec<String>,
    /// Binary supports the maps were rendered from.
    pub localization_support: Vec<Array2<bool>>,
}

/// Flat record of a result directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub version: u32,
    pub sample_id: String,
    pub original_class: usize,
    pub original_confidences: Vec<f64>,
    pub target: usize,
    pub near_miss: Option<NearMiss>,
    pub metrics: SampleMetrics,
    pub trace: GenerationTrace,
}

impl ResultRecord {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let r: ResultRecord = serde_json::from_slice(bytes)?;
        if r.version != RESULT_VERSION {
            return Err(Error::FormatVersion {
                found: r.version,
                supported: RESULT_VERSION,
            });
        }
        Ok(r)
    }
}

impl ConceptManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: ConceptManifest = serde_json::from_slice(bytes)?;
        if m.localization_files.len() != m.selection.k() || m.localization_support.len() != m.selection.k() {
            return Err(Error::Format("one localization map per concept expected".into()));
        }
        if m.selection.channels.iter().any(|&c| c >= m.selection.total_channels) {
            return Err(Error::Format("selected channel out of range".into()));
        }
        Ok(m)
    }
}

impl CounterfactualResult {
    pub fn record(&self) -> ResultRecord {
        ResultRecord {
            version: RESULT_VERSION,
            sample_id: self.sample_id.clone(),
            original_class: self.original_prediction.class,
            original_confidences: self.original_prediction.confidences.clone(),
            target: self.target,
            near_miss: self.near_miss.clone(),
            metrics: self.metrics.clone(),
            trace: self.trace.clone(),
        }
    }

    /// Write the result directory. The record is written last, so its
    /// presence marks a complete result.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_png(&dir.join(ORIGINAL_FILE), &self.original)?;
        save_png(&dir.join(COUNTERFACTUAL_FILE), &self.counterfactual)?;
        let mut files = Vec::with_capacity(self.localization.len());
        for (i, l) in self.localization.iter().enumerate() {
            let name = format!("loc_{i:02}_ch{:03}.png", l.channel);
            save_map_png(&dir.join(&name), &l.map)?;
            files.push(name);
        }
        let manifest = ConceptManifest {
            selection: self.selection.clone(),
            mask: self.mask.clone(),
            localization_files: files,
            localization_support: self.localization.iter().map(|l| l.support.clone()).collect(),
        };
        crate::archive::write_atomic(&dir.join(CONCEPTS_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
        crate::archive::write_atomic(&dir.join(RECORD_FILE), &serde_json::to_vec_pretty(&self.record())?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::MissingPath(p));
            }
            Ok(std::fs::read(p)?)
        };
        let record = ResultRecord::from_json(&read(RECORD_FILE)?)?;
        let manifest = ConceptManifest::from_json(&read(CONCEPTS_FILE)?)?;
        let original = load_png(&dir.join(ORIGINAL_FILE))?;
        let counterfactual = load_png(&dir.join(COUNTERFACTUAL_FILE))?;
        let (_, h, w) = original.dim();
        let localization = manifest
            .selection
            .channels
            .iter()
            .zip(&manifest.localization_support)
            .map(|(&channel, support)| LocalizationMap {
                channel,
                map: upscale_support(support, (h, w)),
                support: support.clone(),
            })
            .collect();
        Ok(Self {
            sample_id: record.sample_id,
            original,
            counterfactual,
            original_prediction: Prediction {
                class: record.original_class,
                confidences: record.original_confidences,
            },
            target: record.target,
            near_miss: record.near_miss,
            selection: manifest.selection,
            mask: manifest.mask,
            localization,
            metrics: record.metrics,
            trace: record.trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ArchSpec, Architecture};
    use crate::diffusion::{build_schedule, MlpDenoiser, MlpDenoiserConfig, ScheduleKind};
    use rand::Rng;

    fn model() -> ClassifierModel {
        let spec = ArchSpec {
            arch: Architecture::ConvNet,
            input_shape: [3, 8, 8],
            width: 4,
        };
        let names = (0..3).map(|i| format!("c{i}")).collect();
        ClassifierModel::new(spec, names, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn image(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-1.0..1.0))
    }

    fn denoiser() -> MlpDenoiser {
        let cfg = MlpDenoiserConfig {
            dim: 192,
            hidden: 32,
            blocks: 1,
            num_classes: 3,
            time_freqs: 4,
        };
        MlpDenoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(5))
    }

    fn max_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn top_k_by_magnitude_with_low_index_ties() {
        let top = top_k_channels(&[3.0, -5.0, 1.0], 2).unwrap();
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![1, 0]);
        let tie = top_k_channels(&[2.0, -2.0, 2.0], 2).unwrap();
        assert_eq!(tie.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(top_k_channels(&[1.0], 0).is_err());
        assert!(top_k_channels(&[1.0], 2).is_err());
    }

    #[test]
    fn masking_full_empty_and_off_mask() {
        let m = model();
        let x = image(1);
        let layer = m.default_concept_layer().unwrap().to_string();
        let k = m.layer_shape(&layer).unwrap()[0];
        let sel = select_concepts(&m, &x, 2, &layer, 2).unwrap();
        let plain = m.input_gradient(&x, &Objective::LogProb(2)).unwrap();
        let full = masked_gradient(&m, &x, 2, &sel, &ConceptMask::full(&layer, k)).unwrap();
        assert!(max_diff(&full.input, &plain) <= 1e-6);
        let empty = masked_gradient(&m, &x, 2, &sel, &ConceptMask::empty(&layer, k)).unwrap();
        assert!(empty.input.iter().all(|&v| v == 0.0));
        let mask = ConceptMask::from_selection(&sel);
        let g = masked_gradient(&m, &x, 2, &sel, &mask).unwrap();
        for (c, ch) in g.layer.axis_iter(Axis(0)).enumerate() {
            if !mask.channels[c] {
                assert!(ch.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn removing_channels_never_grows_the_layer_gradient() {
        let m = model();
        let x = image(2);
        let layer = m.default_concept_layer().unwrap().to_string();
        let k = m.layer_shape(&layer).unwrap()[0];
        let sel = select_concepts(&m, &x, 0, &layer, k).unwrap();
        let mut prev = f64::INFINITY;
        for n in (0..=k).rev() {
            let mask = ConceptMask::from_channels(&layer, k, &sel.channels[..n]);
            let g = masked_gradient(&m, &x, 0, &sel, &mask).unwrap();
            let norm = g.layer.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= prev);
            prev = norm;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn selection_is_deterministic() {
        let m = model();
        let x = image(3);
        let layer = m.default_concept_layer().unwrap().to_string();
        let a = select_concepts(&m, &x, 1, &layer, 3).unwrap();
        let b = select_concepts(&m, &x, 1, &layer, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn spatial_masks() {
        let sel = ConceptSelection {
            layer: "l".into(),
            channels: vec![0],
            scores: vec![1.0],
            total_channels: 1,
        };
        let g = ArrayD::from_shape_vec(vec![1, 4, 4], (0..16).map(|v| v as f64 - 7.0).collect()).unwrap();
        let all = spatial_constrain(&sel, &g, SpatialThreshold::Absolute(0.0)).unwrap();
        assert!(all.spatial[0].1.iter().all(|&b| b));
        let one = spatial_constrain(&sel, &g, SpatialThreshold::Absolute(100.0)).unwrap();
        assert_eq!(one.spatial[0].1.iter().filter(|&&b| b).count(), 1);
        assert!(one.spatial[0].1[[3, 3]]);
        let g = ArrayD::from_shape_vec(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let q = spatial_constrain(&sel, &g, SpatialThreshold::Quantile(0.75)).unwrap();
        assert_eq!(q.spatial[0].1.iter().filter(|&&b| b).count(), 4);
    }

    struct Fixture {
        model: ClassifierModel,
        den: MlpDenoiser,
        codec: LatentCodec,
        schedule: NoiseSchedule,
    }

    fn fixture() -> Fixture {
        Fixture {
            model: model(),
            den: denoiser(),
            codec: LatentCodec::identity([3, 8, 8]),
            schedule: build_schedule(20, ScheduleKind::Cosine, 0.0).unwrap(),
        }
    }

    #[test]
    fn zero_scale_gives_zero_score() {
        let f = fixture();
        let x = image(4);
        let layer = f.model.default_concept_layer().unwrap().to_string();
        let mask = ConceptMask::from_channels(&layer, 8, &[1]);
        let config = GuidanceConfig {
            scale: 0.0,
            suspension_steps: 2,
            ..Default::default()
        };
        let ctx = GuidanceContext {
            denoiser: &f.den,
            codec: &f.codec,
            model: &f.model,
            schedule: &f.schedule,
            config: &config,
            target: 1,
            mask: &mask,
            original: &x,
        };
        let z = f.codec.encode(&image(5)).unwrap();
        let eps = f.den.predict(&z, 10, None);
        let s = guidance_score(&ctx, &z, 10, &eps).unwrap();
        assert!(s.score.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn suspended_steps_match_the_full_mask() {
        let f = fixture();
        let x = image(6);
        let layer = f.model.default_concept_layer().unwrap().to_string();
        let k = f.model.layer_shape(&layer).unwrap()[0];
        let partial = ConceptMask::from_channels(&layer, k, &[0, 2]);
        let full = ConceptMask::full(&layer, k);
        let config = GuidanceConfig {
            scale: 3.0,
            suspension_steps: 8,
            consensus: Consensus::Projection,
            ..Default::default()
        };
        let ctx = |mask| GuidanceContext {
            denoiser: &f.den,
            codec: &f.codec,
            model: &f.model,
            schedule: &f.schedule,
            config: &config,
            target: 2,
            mask,
            original: &x,
        };
        let z = f.codec.encode(&image(7)).unwrap();
        for t in 1..=8 {
            let eps = f.den.predict(&z, t, None);
            let a = guidance_score(&ctx(&partial), &z, t, &eps).unwrap();
            let b = guidance_score(&ctx(&full), &z, t, &eps).unwrap();
            assert_eq!(a, b);
            assert!(!a.masked);
        }
        let eps = f.den.predict(&z, 9, None);
        assert!(guidance_score(&ctx(&partial), &z, 9, &eps).unwrap().masked);
    }

    #[test]
    fn zero_scale_no_noise_is_a_codec_round_trip() {
        let f = fixture();
        let gen = Generator {
            model: &f.model,
            denoiser: &f.den,
            codec: &f.codec,
            schedule: &f.schedule,
        };
        let mut cfg = CounterfactualConfig {
            k: Some(2),
            t_start: 0.0,
            ..Default::default()
        };
        cfg.guidance.scale = 0.0;
        cfg.guidance.suspension_steps = 2;
        let x = image(8);
        let r = gen.generate("s", &x, TargetSource::Fixed(1), &cfg, 0, "h").unwrap();
        assert_eq!(r.counterfactual, quantize(&x));
        assert_eq!(r.trace.guided_steps, 0);
        assert_eq!(r.metrics.l1, 0.0);
        assert_eq!(r.metrics.flipped, r.original_prediction.class == 1);
    }

    #[test]
    fn generation_is_deterministic_and_round_trips_to_disk() {
        let f = fixture();
        let gen = Generator {
            model: &f.model,
            denoiser: &f.den,
            codec: &f.codec,
            schedule: &f.schedule,
        };
        let mut cfg = CounterfactualConfig {
            k: Some(3),
            spatial: Some(SpatialThreshold::Quantile(0.5)),
            ..Default::default()
        };
        cfg.guidance.suspension_steps = 3;
        let x = image(9);
        let a = gen.generate("s", &x, TargetSource::Fixed(0), &cfg, 11, "h").unwrap();
        let b = gen.generate("s", &x, TargetSource::Fixed(0), &cfg, 11, "h").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.guided_steps, 10);
        assert_eq!(a.localization.len(), 3);
        let c = gen.generate("s", &x, TargetSource::Fixed(0), &cfg, 12, "h").unwrap();
        assert_ne!(a.counterfactual, c.counterfactual);

        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = CounterfactualResult::load(dir.path()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn bad_inputs() {
        let f = fixture();
        let gen = Generator {
            model: &f.model,
            denoiser: &f.den,
            codec: &f.codec,
            schedule: &f.schedule,
        };
        let cfg = CounterfactualConfig::default();
        let bad = CounterfactualConfig { t_start: 1.5, ..cfg.clone() };
        assert!(gen.generate("s", &image(1), TargetSource::Fixed(0), &bad, 0, "h").is_err());
        assert!(matches!(
            gen.generate("s", &image(1), TargetSource::Fixed(9), &cfg, 0, "h"),
            Err(Error::ClassOutOfRange { .. })
        ));
        let bad = CounterfactualConfig { k: Some(0), ..cfg };
        assert!(bad.validate(20).is_err());
    }
}
