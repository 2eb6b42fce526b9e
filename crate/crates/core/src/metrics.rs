//! Evaluation: distances, flip ratio, confidence, Frechet distance on
//! classifier features, and the concept validity ratio.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::attribution::lrp_attribute;
use crate::classifier::ClassifierModel;
use crate::error::{check_shape, Error, Result};
use crate::guidance::{ConceptSelection, CounterfactualResult};

/// Vector p-norm of `x - y`, for `p` in {1, 2}.
pub fn lp_distance(x: &Array3<f64>, y: &Array3<f64>, p: u32) -> Result<f64> {
    check_shape(x.shape(), y.shape())?;
    match p {
        1 => Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()),
        2 => Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()),
        _ => Err(Error::InvalidArgument(format!("unsupported norm order {p}"))),
    }
}

/// Ridge added to both covariances before the matrix square root.
pub const FID_RIDGE: f64 = 1e-6;

fn mean_cov(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let m = DMatrix::from_row_slice(n, d, x.as_standard_layout().as_slice().unwrap());
    let mean = m.row_mean().transpose();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / ((n - 1) as f64);
    cov += DMatrix::identity(d, d) * FID_RIDGE;
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` via the symmetric form `A^{1/2} B A^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = sqrt_psd(a);
    let inner = &sa * b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Frechet distance between Gaussian fits of two feature sets (rows are samples).
pub fn fid(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.ncols()],
            got: vec![b.ncols()],
        });
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidArgument("FID needs at least two samples per set".into()));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let dm = (&ma - &mb).norm_squared();
    // Both orders agree mathematically; averaging makes the result exactly symmetric.
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb) + trace_sqrt_product(&cb, &ca));
    let v = dm + (ca.trace() + cb.trace()) - 2.0 * cross;
    if !v.is_finite() {
        return Err(Error::NonFinite("FID".into()));
    }
    Ok(v.max(0.0))
}

pub fn flip_ratio(results: &[CounterfactualResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(results.iter().filter(|r| r.metrics.flipped).count() as f64 / results.len() as f64)
}

/// Sum of `diff` over `selected` divided by the sum of the `|selected|`
/// largest entries. `None` when that denominator is zero.
pub fn ratio_from_differences(diff: &[f64], selected: &[usize]) -> Option<f64> {
    let k = selected.len();
    if k == 0 {
        return None;
    }
    let mut sorted = diff.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let best: f64 = sorted.iter().take(k).sum();
    if best <= 0.0 {
        return None;
    }
    Some(selected.iter().map(|&c| diff[c]).sum::<f64>() / best)
}

/// Per-channel `|pooled attribution(cf) - pooled attribution(original)|` at
/// `layer`, each image explained for its own predicted class.
pub fn attribution_difference(
    model: &ClassifierModel,
    original: &Array3<f64>,
    counterfactual: &Array3<f64>,
    layer: &str,
) -> Result<Vec<f64>> {
    let pooled = |x: &Array3<f64>| -> Result<Vec<f64>> {
        let pred = model.predict_one(x)?.class;
        let a = lrp_attribute(model, x, pred, Some(layer))?;
        let area = (a.relevance.len() / a.relevance.shape()[0].max(1)) as f64;
        Ok(a.pooled().into_iter().map(|v| v / area).collect())
    };
    let (a, b) = (pooled(original)?, pooled(counterfactual)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (y - x).abs()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityRatio {
    pub selected: Option<f64>,
    /// Mean over random draws of `k` channels.
    pub random: Option<f64>,
}

/// Validity of the selected concepts plus a random-`k` baseline averaged
/// over `draws` seeded draws.
pub fn validity_ratio(
    model: &ClassifierModel,
    original: &Array3<f64>,
    counterfactual: &Array3<f64>,
    selection: &ConceptSelection,
    draws: usize,
    seed: u64,
) -> Result<ValidityRatio> {
    let diff = attribution_difference(model, original, counterfactual, &selection.layer)?;
    if selection.channels.iter().any(|&c| c >= diff.len()) {
        return Err(Error::ChannelOutOfRange {
            channel: *selection.channels.iter().max().unwrap(),
            channels: diff.len(),
        });
    }
    let selected = ratio_from_differences(&diff, &selection.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut count = 0;
    for _ in 0..draws.max(1) {
        let pick = sample_indices(&mut rng, diff.len(), selection.k()).into_vec();
        if let Some(r) = ratio_from_differences(&diff, &pick) {
            acc += r;
            count += 1;
        }
    }
    Ok(ValidityRatio {
        selected,
        random: (count > 0).then(|| acc / count as f64),
    })
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 || wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    b.sf(wins as u64 - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValiditySummary {
    pub mean_selected: Option<f64>,
    pub mean_random: Option<f64>,
    pub per_sample: Vec<Option<f64>>,
    pub per_sample_random: Vec<Option<f64>>,
    /// Samples where the selected ratio beats the baseline.
    pub wins: usize,
    pub losses: usize,
    pub sign_test_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub samples: usize,
    pub k: usize,
    pub total_channels: usize,
    pub layer: String,
    pub spatial: bool,
    pub fid: f64,
    /// Mean per-sample L1 distance.
    pub l1: f64,
    /// Mean per-sample L2 distance.
    pub l2: f64,
    pub flipped: usize,
    pub flip_ratio: f64,
    /// Mean target-class confidence over all samples.
    pub mean_confidence: f64,
    /// Mean target-class confidence over flipped samples only.
    pub mean_confidence_flipped: Option<f64>,
    pub validity: Option<ValiditySummary>,
    pub config_hash: String,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub validity: bool,
    pub random_draws: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            validity: true,
            random_draws: 16,
            seed: 0,
        }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregate a run. FID compares classifier features (the model's feature
/// layer) of the originals with those of the counterfactuals.
pub fn evaluate_run(results: &[CounterfactualResult], model: &ClassifierModel, options: &EvalOptions) -> Result<MetricReport> {
    let first = results.first().ok_or(Error::EmptyDataset)?;
    let hash = &first.trace.config_hash;
    let originals: Vec<Array3<f64>> = results.iter().map(|r| r.original.clone()).collect();
    let cfs: Vec<Array3<f64>> = results.iter().map(|r| r.counterfactual.clone()).collect();
    let fid = if results.len() >= 2 {
        fid(&model.features(&originals)?, &model.features(&cfs)?)?
    } else {
        0.0
    };
    let flipped = results.iter().filter(|r| r.metrics.flipped).count();
    let n = results.len() as f64;
    let validity = if options.validity {
        let mut per_sample = Vec::with_capacity(results.len());
        let mut per_sample_random = Vec::with_capacity(results.len());
        let (mut wins, mut losses) = (0, 0);
        for (i, r) in results.iter().enumerate() {
            let v = validity_ratio(
                model,
                &r.original,
                &r.counterfactual,
                &r.selection,
                options.random_draws,
                options.seed.wrapping_add(i as u64),
            )?;
            if let (Some(s), Some(b)) = (v.selected, v.random) {
                if s > b {
                    wins += 1;
                } else if s < b {
                    losses += 1;
                }
            }
            per_sample.push(v.selected);
            per_sample_random.push(v.random);
        }
        Some(ValiditySummary {
            mean_selected: mean(per_sample.iter().flatten().copied()),
            mean_random: mean(per_sample_random.iter().flatten().copied()),
            per_sample,
            per_sample_random,
            wins,
            losses,
            sign_test_p: sign_test(wins, losses),
        })
    } else {
        None
    };
    let report = MetricReport {
        version: REPORT_VERSION,
        samples: results.len(),
        k: first.selection.k(),
        total_channels: first.selection.total_channels,
        layer: first.selection.layer.clone(),
        spatial: !first.mask.spatial.is_empty(),
        fid,
        l1: results.iter().map(|r| r.metrics.l1).sum::<f64>() / n,
        l2: results.iter().map(|r| r.metrics.l2).sum::<f64>() / n,
        flipped,
        flip_ratio: flipped as f64 / n,
        mean_confidence: results.iter().map(|r| r.metrics.target_confidence).sum::<f64>() / n,
        mean_confidence_flipped: mean(results.iter().filter(|r| r.metrics.flipped).map(|r| r.metrics.target_confidence)),
        validity,
        config_hash: hash.clone(),
    };
    report.check_finite()?;
    Ok(report)
}

impl MetricReport {
    fn check_finite(&self) -> Result<()> {
        let mut vals = vec![self.fid, self.l1, self.l2, self.flip_ratio, self.mean_confidence];
        vals.extend(self.mean_confidence_flipped);
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric report".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let r: MetricReport = serde_json::from_slice(bytes)?;
        if r.version != REPORT_VERSION {
            return Err(Error::FormatVersion {
                found: r.version,
                supported: REPORT_VERSION,
            });
        }
        if !(0.0..=1.0).contains(&r.flip_ratio) || r.flipped > r.samples {
            return Err(Error::Format("flip ratio out of range".into()));
        }
        r.check_finite()?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::archive::write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read(path)?)
    }
}

/// Plain-text table of several runs, sorted by k.
pub fn comparison_table(reports: &[MetricReport]) -> String {
    let mut rows: Vec<&MetricReport> = reports.iter().collect();
    rows.sort_by_key(|r| (r.k, r.spatial));
    let mut out = String::from("| k | spatial | n | flip ratio | confidence | L1 | L2 | FID | validity | random |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    for r in rows {
        let (vs, vr) = r
            .validity
            .as_ref()
            .map_or((None, None), |v| (v.mean_selected, v.mean_random));
        out.push_str(&format!(
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.4} | {} | {} |\n",
            r.k,
            if r.spatial { "yes" } else { "no" },
            r.samples,
            r.flip_ratio,
            r.mean_confidence,
            r.l1,
            r.l2,
            r.fid,
            fmt(vs),
            fmt(vr)
        ));
    }
    out
}
