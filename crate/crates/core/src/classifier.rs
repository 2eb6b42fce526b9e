//! Classifiers under explanation: two small architectures, layer taps, the
//! split view `f(x) = h(g(x))` at a concept layer, and toy-scale training.
//!
//! Both architectures are bias-free, which keeps epsilon-rule relevance
//! propagation conservative up to the stabilizer.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointKind};
use crate::data::Dataset;
use crate::error::{check_shape, Error, Result};
use crate::nn::{softmax_rows, Adam, Conv2d, Graph, Linear, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// conv -> strided conv -> conv -> global pool -> linear.
    ConvNet,
    /// Stem plus two residual blocks separated by a strided conv.
    ResNet,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet" | "conv_net" => Ok(Architecture::ConvNet),
            "resnet" | "res_net" => Ok(Architecture::ResNet),
            _ => Err(Error::Config(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel statistics over a set of images; std is floored at 1e-3.
    pub fn fit(images: &[Array3<f64>]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let c = first.dim().0;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0.0;
        for x in images {
            check_shape(first.shape(), x.shape())?;
            for (ch, plane) in x.axis_iter(Axis(0)).enumerate() {
                mean[ch] += plane.sum();
                sq[ch] += plane.iter().map(|v| v * v).sum::<f64>();
            }
            count += (x.len() / c) as f64;
        }
        let mut std = vec![0.0; c];
        for ch in 0..c {
            mean[ch] /= count;
            std[ch] = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0).sqrt().max(1e-3);
        }
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: Architecture,
    pub input_shape: [usize; 3],
    /// Channel count of the first stage; later stages use twice this.
    pub width: usize,
}

/// Scalar objective of the class scores, differentiated by
/// [`ClassifierModel::input_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Pre-softmax score of a class.
    Logit(usize),
    /// `log p(c | x)`.
    LogProb(usize),
    /// `-log p(c | x)`.
    CrossEntropy(usize),
    /// `w . logits`.
    Weighted(Vec<f64>),
    Constant(f64),
    /// Indicator that the prediction equals the class. Not differentiable.
    Correct(usize),
}

impl Objective {
    /// Value and gradient with respect to one row of logits.
    pub fn evaluate(&self, logits: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
        let n = logits.len();
        let check = |c: usize| {
            if c < n {
                Ok(())
            } else {
                Err(Error::ClassOutOfRange { class: c, classes: n })
            }
        };
        let probs = || {
            let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e = logits.mapv(|v| (v - m).exp());
            let s = e.sum();
            (e / s, m + s.ln())
        };
        Ok(match self {
            Objective::Logit(c) => {
                check(*c)?;
                let mut g = Array1::zeros(n);
                g[*c] = 1.0;
                (logits[*c], g)
            }
            Objective::LogProb(c) | Objective::CrossEntropy(c) => {
                check(*c)?;
                let (p, lse) = probs();
                let mut g = -p;
                g[*c] += 1.0;
                let v = logits[*c] - lse;
                if matches!(self, Objective::CrossEntropy(_)) {
                    (-v, -g)
                } else {
                    (v, g)
                }
            }
            Objective::Weighted(w) => {
                check_shape(&[n], &[w.len()])?;
                let w = Array1::from(w.clone());
                (w.dot(logits), w)
            }
            Objective::Constant(v) => (*v, Array1::zeros(n)),
            Objective::Correct(_) => {
                return Err(Error::InvalidArgument(
                    "objective `correct` is piecewise constant and has no useful gradient".into(),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub confidences: Vec<f64>,
}

impl Prediction {
    fn from_logits(logits: &Array1<f64>) -> Self {
        let p = softmax_rows(&logits.view().insert_axis(Axis(0)).to_owned());
        let confidences = p.row(0).to_vec();
        Self {
            class: argmax(&confidences),
            confidences,
        }
    }

    pub fn confidence(&self) -> f64 {
        self.confidences[self.class]
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Activation captured at a named layer for a single image (no batch axis).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTap {
    pub layer: String,
    pub activation: ArrayD<f64>,
    /// Filled by [`ClassifierModel::backward_tap`].
    pub gradient: Option<ArrayD<f64>>,
    pub channels: usize,
}

/// Result of one backward pass for a single image.
#[derive(Debug, Clone)]
pub struct GradientPass {
    pub logits: Array1<f64>,
    pub value: f64,
    pub input: Array3<f64>,
    /// Gradient at the hooked layer after the hook ran.
    pub layer: Option<ArrayD<f64>>,
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    spec: Option<ArchSpec>,
    graph: Graph,
    class_names: Vec<String>,
    input_shape: [usize; 3],
    normalization: Normalization,
    concept_layers: Vec<String>,
    feature_layer: String,
}

impl ClassifierModel {
    pub fn new(spec: ArchSpec, class_names: Vec<String>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::InvalidArgument("a classifier needs at least two classes".into()));
        }
        if spec.width == 0 {
            return Err(Error::InvalidArgument("width must be positive".into()));
        }
        let [c, h, w] = spec.input_shape;
        if h < 4 || w < 4 {
            return Err(Error::InvalidArgument("input must be at least 4x4".into()));
        }
        let norm = Normalization::identity(c);
        let (graph, concept_layers) = match spec.arch {
            Architecture::ConvNet => convnet(c, spec.width, class_names.len(), &norm, rng),
            Architecture::ResNet => resnet(c, spec.width, class_names.len(), &norm, rng),
        };
        Ok(Self {
            spec: Some(spec),
            graph,
            class_names,
            input_shape: spec.input_shape,
            normalization: norm,
            concept_layers,
            feature_layer: "pool".into(),
        })
    }

    /// Wrap an arbitrary graph. Concept layers must be 4-D cut nodes.
    pub fn from_graph(
        graph: Graph,
        input_shape: [usize; 3],
        class_names: Vec<String>,
        concept_layers: Vec<String>,
        feature_layer: &str,
    ) -> Result<Self> {
        let model = Self {
            spec: None,
            graph,
            class_names,
            input_shape,
            normalization: Normalization::identity(input_shape[0]),
            concept_layers: vec![],
            feature_layer: feature_layer.to_string(),
        };
        model.graph.index_of(feature_layer)?;
        let acts = model.forward_acts(&Array3::zeros(input_shape))?;
        for name in &concept_layers {
            let idx = model.graph.index_of(name)?;
            if acts[idx].ndim() != 4 || !model.graph.is_cut(idx) {
                return Err(Error::InvalidConceptLayer(name.clone()));
            }
        }
        Ok(Self { concept_layers, ..model })
    }

    pub fn spec(&self) -> Option<ArchSpec> {
        self.spec
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Layers that may be used for concept conditioning.
    pub fn concept_layers(&self) -> &[String] {
        &self.concept_layers
    }

    /// The last whitelisted layer.
    pub fn default_concept_layer(&self) -> Option<&str> {
        self.concept_layers.last().map(String::as_str)
    }

    pub fn feature_layer(&self) -> &str {
        &self.feature_layer
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        check_shape(&[self.input_shape[0]], &[norm.mean.len()])?;
        check_shape(&[self.input_shape[0]], &[norm.std.len()])?;
        for node in self.graph_nodes_mut() {
            if let Op::Normalize { mean, std } = &mut node.op {
                *mean = norm.mean.clone();
                *std = norm.std.clone();
            }
        }
        self.normalization = norm;
        Ok(())
    }

    fn graph_nodes_mut(&mut self) -> impl Iterator<Item = &mut crate::nn::Node> {
        self.graph.nodes_mut().iter_mut()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.graph.index_of(name)
    }

    /// Resolve a concept layer name, rejecting layers outside the whitelist.
    pub fn concept_layer_index(&self, name: &str) -> Result<usize> {
        let idx = self.graph.index_of(name)?;
        if !self.concept_layers.iter().any(|l| l == name) {
            return Err(Error::InvalidConceptLayer(name.to_string()));
        }
        Ok(idx)
    }

    /// Output shape of a layer for one image, without the batch axis.
    pub fn layer_shape(&self, name: &str) -> Result<Vec<usize>> {
        let idx = self.graph.index_of(name)?;
        let acts = self.forward_acts(&Array3::zeros(self.input_shape))?;
        Ok(acts[idx].shape()[1..].to_vec())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        check_shape(&self.input_shape, shape)
    }

    /// All node activations for a single image, each with a batch axis of 1.
    pub fn forward_acts(&self, x: &Array3<f64>) -> Result<Vec<ArrayD<f64>>> {
        self.check_input(x.shape())?;
        Ok(self.graph.forward(x.clone().insert_axis(Axis(0)).into_dyn()))
    }

    pub fn logits(&self, batch: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch.shape()[1..])?;
        let out = self.graph.forward(batch.clone().into_dyn()).pop().unwrap();
        out.into_dimensionality()
            .map_err(|_| Error::InvalidArgument("network output is not (N, classes)".into()))
    }

    pub fn predict(&self, batch: &Array4<f64>) -> Result<Vec<Prediction>> {
        let logits = self.logits(batch)?;
        Ok(logits.rows().into_iter().map(|r| Prediction::from_logits(&r.to_owned())).collect())
    }

    pub fn predict_one(&self, x: &Array3<f64>) -> Result<Prediction> {
        Ok(Prediction::from_logits(&self.logits_one(x)?))
    }

    pub fn logits_one(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        let acts = self.forward_acts(x)?;
        Ok(row0(acts.last().unwrap()))
    }

    /// Predictions for many images, in chunks.
    pub fn predict_all(&self, images: &[Array3<f64>]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            out.extend(self.predict(&crate::data::stack(chunk))?);
        }
        Ok(out)
    }

    /// Rows of the feature layer, flattened.
    pub fn features(&self, images: &[Array3<f64>]) -> Result<Array2<f64>> {
        let idx = self.graph.index_of(&self.feature_layer)?;
        let mut rows: Vec<Array1<f64>> = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let batch = crate::data::stack(chunk);
            self.check_input(&batch.shape()[1..])?;
            let acts = self.graph.forward(batch.into_dyn());
            let a = &acts[idx];
            let n = a.shape()[0];
            let flat = a.as_standard_layout().into_owned().into_shape_with_order((n, a.len() / n.max(1))).unwrap();
            rows.extend(flat.rows().into_iter().map(|r| r.to_owned()));
        }
        let dim = rows.first().map_or(0, |r| r.len());
        let mut out = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        Ok(out)
    }

    pub fn tap(&self, x: &Array3<f64>, layer: &str) -> Result<LayerTap> {
        let idx = self.graph.index_of(layer)?;
        let acts = self.forward_acts(x)?;
        let activation = acts[idx].index_axis(Axis(0), 0).to_owned();
        let channels = activation.shape().first().copied().unwrap_or(1);
        Ok(LayerTap {
            layer: layer.to_string(),
            activation,
            gradient: None,
            channels,
        })
    }

    /// Fill `tap.gradient` with the objective's gradient at the tapped layer.
    pub fn backward_tap(&self, tap: &mut LayerTap, x: &Array3<f64>, objective: &Objective) -> Result<()> {
        let pass = self.gradient(x, objective, Some((&tap.layer, &|_| {})))?;
        tap.gradient = pass.layer;
        Ok(())
    }

    /// The part `h` of the split view: class scores from a cut-layer activation
    /// given without the batch axis.
    pub fn head(&self, layer: &str, activation: &ArrayD<f64>) -> Result<Array1<f64>> {
        let idx = self.graph.index_of(layer)?;
        let out = self
            .graph
            .forward_from(idx, activation.clone().insert_axis(Axis(0)))?;
        Ok(row0(&out))
    }

    /// Backward pass of `objective(f(x))`. The hook sees (and may modify) the
    /// batch-shaped gradient at `layer` before it propagates further.
    pub fn gradient(
        &self,
        x: &Array3<f64>,
        objective: &Objective,
        hook: Option<(&str, &dyn Fn(&mut ArrayD<f64>))>,
    ) -> Result<GradientPass> {
        let acts = self.forward_acts(x)?;
        let logits = row0(acts.last().unwrap());
        let (value, g) = objective.evaluate(&logits)?;
        let hook_idx = match hook {
            Some((name, f)) => Some((self.graph.index_of(name)?, f)),
            None => None,
        };
        let back = self.graph.backward(&acts, g.insert_axis(Axis(0)).into_dyn(), hook_idx, false);
        let input = match &back.grads[0] {
            Some(g) => g.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap(),
            None => Array3::zeros(self.input_shape),
        };
        let layer = hook_idx.map(|(i, _)| {
            back.grads[i]
                .as_ref()
                .map(|g| g.index_axis(Axis(0), 0).to_owned())
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(&acts[i].shape()[1..])))
        });
        Ok(GradientPass {
            logits,
            value,
            input,
            layer,
        })
    }

    pub fn input_gradient(&self, x: &Array3<f64>, objective: &Objective) -> Result<Array3<f64>> {
        Ok(self.gradient(x, objective, None)?.input)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let spec = self
            .spec
            .ok_or_else(|| Error::InvalidArgument("only built-in architectures can be saved".into()))?;
        let mut a = checkpoint::new_archive(CheckpointKind::Classifier)?;
        a.set_meta("arch", &spec)?;
        a.set_meta("class_names", &self.class_names)?;
        a.set_meta("normalization", &self.normalization)?;
        a.extend(self.graph.state());
        a.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = checkpoint::open_archive(path, CheckpointKind::Classifier)?;
        let spec: ArchSpec = a.meta("arch")?;
        let mut model = Self::new(spec, a.meta("class_names")?, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.set_normalization(a.meta("normalization")?)?;
        model.graph.load_state(&checkpoint::lookup(&a))?;
        Ok(model)
    }
}

fn row0(a: &ArrayD<f64>) -> Array1<f64> {
    a.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap()
}

fn conv(i: usize, o: usize, stride: usize, rng: &mut ChaCha8Rng) -> Op {
    Op::Conv(Conv2d::new(i, o, 3, stride, 1, false, rng))
}

fn convnet(c: usize, w: usize, classes: usize, norm: &Normalization, rng: &mut ChaCha8Rng) -> (Graph, Vec<String>) {
    let mut g = Graph::new();
    g.chain("normalize", Op::Normalize { mean: norm.mean.clone(), std: norm.std.clone() });
    g.chain("conv1", conv(c, w, 1, rng));
    g.chain("relu1", Op::Relu);
    g.chain("conv2", conv(w, 2 * w, 2, rng));
    g.chain("relu2", Op::Relu);
    g.chain("conv3", conv(2 * w, 2 * w, 1, rng));
    g.chain("relu3", Op::Relu);
    g.chain("pool", Op::GlobalAvgPool);
    g.chain("fc", Op::Linear(Linear::with_gain(2 * w, classes, false, 1.0, rng)));
    (g, vec!["relu2".into(), "relu3".into()])
}

fn resnet(c: usize, w: usize, classes: usize, norm: &Normalization, rng: &mut ChaCha8Rng) -> (Graph, Vec<String>) {
    let mut g = Graph::new();
    g.chain("normalize", Op::Normalize { mean: norm.mean.clone(), std: norm.std.clone() });
    g.chain("stem", conv(c, w, 1, rng));
    let mut skip = g.chain("stem.relu", Op::Relu);
    for (b, (ci, co, stride)) in [(w, w, 1), (2 * w, 2 * w, 1)].into_iter().enumerate() {
        let name = format!("block{}", b + 1);
        if b == 1 {
            g.chain("down", conv(w, ci, 2, rng));
            skip = g.chain("down.relu", Op::Relu);
        }
        g.chain(format!("{name}.conv1"), conv(ci, co, stride, rng));
        g.chain(format!("{name}.relu1"), Op::Relu);
        // Small init on the residual branch keeps early training close to identity.
        let mut c2 = Conv2d::new(co, co, 3, 1, 1, false, rng);
        c2.weight.value.mapv_inplace(|v| v * 0.5);
        let branch = g.chain(format!("{name}.conv2"), Op::Conv(c2));
        g.push(format!("{name}.add"), Op::Add, &[branch, skip]);
        g.chain(format!("{name}.out"), Op::Relu);
    }
    g.chain("pool", Op::GlobalAvgPool);
    g.chain("fc", Op::Linear(Linear::with_gain(2 * w, classes, false, 1.0, rng)));
    (g, vec!["block1.out".into(), "down.relu".into(), "block2.out".into()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub arch: Architecture,
    pub width: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of the training data held out for the accuracy report.
    pub holdout: f64,
    pub seed: u64,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::ConvNet,
            width: 16,
            epochs: 6,
            batch: 32,
            lr: 2e-3,
            holdout: 0.15,
            seed: 0,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub epochs: usize,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub heldout_samples: usize,
    pub heldout_accuracy: f64,
    /// Majority-class rate on the held-out split.
    pub chance_accuracy: f64,
    /// Held-out accuracy is within three standard errors of chance.
    pub near_chance: bool,
    /// Ids of the held-out samples.
    pub heldout_ids: Vec<String>,
}

/// Accuracy of `model` on a dataset.
pub fn accuracy(model: &ClassifierModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = model.predict_all(&data.images)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, &l)| p.class == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Train with Adam on cross-entropy. Passing `init` continues from an
/// existing model; zero epochs evaluate it unchanged and write nothing.
pub fn train_classifier(
    data: &Dataset,
    config: &ClassifierTrainConfig,
    init: Option<ClassifierModel>,
) -> Result<(ClassifierModel, ClassifierTrainReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut present: Vec<usize> = data.labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InvalidArgument("training data contains a single class".into()));
    }
    let (heldout, train) = data.split(config.holdout, config.seed);
    if train.is_empty() {
        return Err(Error::InvalidArgument("holdout leaves no training data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = match init {
        Some(m) => m,
        None => {
            let [c, h, w] = data.image_shape().unwrap();
            let spec = ArchSpec {
                arch: config.arch,
                input_shape: [c, h, w],
                width: config.width,
            };
            let mut m = ClassifierModel::new(spec, data.class_names.clone(), &mut rng)?;
            m.set_normalization(Normalization::fit(&train.images)?)?;
            m
        }
    };
    let mut opt = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let batch = config.batch.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let x = train.batch(idx);
            let acts = model.graph.forward(x.into_dyn());
            let logits: Array2<f64> = acts.last().unwrap().clone().into_dimensionality().unwrap();
            let mut g = softmax_rows(&logits);
            let n = idx.len() as f64;
            for (r, &i) in idx.iter().enumerate() {
                let l = train.labels[i];
                total -= g[[r, l]].max(1e-300).ln();
                g[[r, l]] -= 1.0;
            }
            g.mapv_inplace(|v| v / n);
            let back = model.graph.backward(&acts, g.into_dyn(), None, true);
            model.graph.accumulate_param_grads(&back.params);
            opt.step(model.graph.params_mut());
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss in epoch {epoch}")));
        }
        log::info!("classifier epoch {} loss {:.4}", epoch + 1, mean);
        epoch_loss.push(mean);
    }
    let eval = if heldout.is_empty() { &train } else { &heldout };
    let heldout_accuracy = accuracy(&model, eval)?;
    let mut counts = vec![0usize; data.num_classes().max(1)];
    for &l in &eval.labels {
        counts[l] += 1;
    }
    let chance = *counts.iter().max().unwrap() as f64 / eval.len() as f64;
    let se = (chance * (1.0 - chance) / eval.len() as f64).sqrt();
    let report = ClassifierTrainReport {
        epochs: config.epochs,
        epoch_loss,
        heldout_samples: heldout.len(),
        heldout_accuracy,
        chance_accuracy: chance,
        near_chance: heldout_accuracy <= chance + 3.0 * se,
        heldout_ids: heldout.ids.clone(),
    };
    if report.near_chance {
        log::warn!("held-out accuracy {heldout_accuracy:.3} is indistinguishable from chance {chance:.3}");
    }
    if let (Some(path), true) = (&config.checkpoint, config.epochs > 0) {
        model.save(path)?;
    }
    Ok((model, report))
}
