//! Static explanation panels: original image, one row per selected concept
//! (reference patches and localization overlay), counterfactual.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};

use crate::archive::write_atomic;
use crate::attribution::{PatchManifest, PATCH_MANIFEST_FILE};
use crate::data::{load_png, save_png};
use crate::error::{Error, Result};
use crate::guidance::{ConceptManifest, ResultRecord, CONCEPTS_FILE, COUNTERFACTUAL_FILE, ORIGINAL_FILE, RECORD_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptRow {
    pub channel: usize,
    pub score: f64,
    /// `(path, caption)` of each reference patch, relative to the panel.
    pub patches: Vec<(String, String)>,
    pub localization: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationPanel {
    pub sample_id: String,
    pub layer: String,
    pub original: String,
    pub counterfactual: String,
    pub original_class: String,
    pub target_class: String,
    pub counterfactual_class: String,
    pub target_confidence: f64,
    pub flipped: bool,
    pub rows: Vec<ConceptRow>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const STYLE: &str = "body{font-family:sans-serif}\
img{image-rendering:pixelated;width:96px;height:96px}\
img.patch{width:48px;height:48px;margin:1px}\
td,th{padding:4px;text-align:center;vertical-align:middle}\
caption{caption-side:top;padding:6px;font-weight:bold}\
.notflipped{color:#b00}";

impl ExplanationPanel {
    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn caption(&self) -> String {
        let mut c = format!(
            "{}: {} \u{2192} {} | counterfactual classified as {} (target confidence {:.3}) | k = {} at {}",
            self.sample_id,
            self.original_class,
            self.target_class,
            self.counterfactual_class,
            self.target_confidence,
            self.k(),
            self.layer
        );
        if !self.flipped {
            c.push_str(" | not flipped");
        }
        c
    }

    pub fn to_html(&self) -> String {
        let mut h = String::new();
        let k = self.k().max(1);
        let _ = write!(
            h,
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title><style>{STYLE}</style></head><body>\n",
            escape(&self.sample_id)
        );
        let class = if self.flipped { "" } else { " class=\"notflipped\"" };
        let _ = writeln!(h, "<table class=\"panel\"><caption{class}>{}</caption>", escape(&self.caption()));
        h.push_str("<tr><th>original</th><th>concept</th><th>reference patches</th><th>localization</th><th>counterfactual</th></tr>\n");
        let orig = format!(
            "<td rowspan=\"{k}\"><img src=\"{}\" alt=\"original\"><br>{}</td>",
            escape(&self.original),
            escape(&self.original_class)
        );
        let cf = format!(
            "<td rowspan=\"{k}\"><img src=\"{}\" alt=\"counterfactual\"><br>{}</td>",
            escape(&self.counterfactual),
            escape(&self.counterfactual_class)
        );
        if self.rows.is_empty() {
            let _ = writeln!(h, "<tr>{orig}<td colspan=\"3\">no concepts</td>{cf}</tr>");
        }
        for (i, r) in self.rows.iter().enumerate() {
            h.push_str("<tr class=\"concept\">");
            if i == 0 {
                h.push_str(&orig);
            }
            let _ = write!(h, "<td>channel {}<br>{:.4}</td><td>", r.channel, r.score);
            for (p, cap) in &r.patches {
                let _ = write!(h, "<img class=\"patch\" src=\"{}\" title=\"{}\">", escape(p), escape(cap));
            }
            let _ = write!(h, "</td><td><img src=\"{}\" alt=\"localization\"></td>", escape(&r.localization));
            if i == 0 {
                h.push_str(&cf);
            }
            h.push_str("</tr>\n");
        }
        h.push_str("</table></body></html>\n");
        h
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportSummary {
    /// Panel files relative to the report directory.
    pub panels: Vec<String>,
    /// Missing artifacts, as `sample: path`.
    pub missing: Vec<String>,
}

/// Original image dimmed outside a `[0, 1]` localization map.
fn overlay(original: &Array3<f64>, map: &Array2<f64>) -> Array3<f64> {
    let mut out = original.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ndarray::Zip::from(&mut ch).and(map).for_each(|v, &m| {
            let dim = 0.25 * *v - 0.75;
            *v = dim + (*v - dim) * m;
        });
    }
    out
}

fn class_name(names: &[String], c: usize) -> String {
    names.get(c).cloned().unwrap_or_else(|| format!("class {c}"))
}

struct Loaded {
    record: ResultRecord,
    concepts: ConceptManifest,
}

fn load_sample(dir: &Path, missing: &mut Vec<String>, name: &str) -> Option<Loaded> {
    let mut read = |file: &str| -> Option<Vec<u8>> {
        match std::fs::read(dir.join(file)) {
            Ok(b) => Some(b),
            Err(_) => {
                missing.push(format!("{name}: {file}"));
                None
            }
        }
    };
    let record = read(RECORD_FILE);
    let concepts = read(CONCEPTS_FILE);
    let record = ResultRecord::from_json(&record?)
        .map_err(|e| missing.push(format!("{name}: {RECORD_FILE} ({e})")))
        .ok()?;
    let concepts = ConceptManifest::from_json(&concepts?)
        .map_err(|e| missing.push(format!("{name}: {CONCEPTS_FILE} ({e})")))
        .ok()?;
    Some(Loaded { record, concepts })
}

/// Write one panel per result directory under `results` plus `index.html`
/// into `out`. Samples with missing artifacts are listed and skipped.
pub fn emit_report(results: &Path, patches: &Path, class_names: &[String], out: &Path) -> Result<ReportSummary> {
    if !results.is_dir() {
        return Err(Error::MissingPath(results.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(results)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut summary = ReportSummary::default();
    let manifest = match PatchManifest::load(patches) {
        Ok(m) => Some(m),
        Err(e) => {
            summary.missing.push(format!("reference patches: {} ({e})", patches.join(PATCH_MANIFEST_FILE).display()));
            None
        }
    };
    std::fs::create_dir_all(out.join("samples"))?;
    std::fs::create_dir_all(out.join("patches"))?;
    let mut index_rows = String::new();
    for dir in &dirs {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let Some(Loaded { record, concepts }) = load_sample(dir, &mut summary.missing, &name) else {
            continue;
        };
        let before = summary.missing.len();
        let mut need = vec![dir.join(ORIGINAL_FILE), dir.join(COUNTERFACTUAL_FILE)];
        need.extend(concepts.localization_files.iter().map(|f| dir.join(f)));
        let mut patch_files = Vec::new();
        for &c in &concepts.selection.channels {
            let entries = match &manifest {
                Some(m) if m.layer == concepts.selection.layer => match m.channel(c) {
                    Some(p) => p.patches.clone(),
                    None => {
                        summary.missing.push(format!("{name}: reference patches for channel {c}"));
                        vec![]
                    }
                },
                Some(m) => {
                    summary.missing.push(format!(
                        "{name}: reference patches are for layer {}, not {}",
                        m.layer, concepts.selection.layer
                    ));
                    vec![]
                }
                None => vec![],
            };
            need.extend(entries.iter().map(|e| patches.join(&e.path)));
            patch_files.push(entries);
        }
        for p in &need {
            if !p.exists() {
                summary.missing.push(format!("{name}: {}", p.display()));
            }
        }
        if summary.missing.len() > before {
            continue;
        }

        let sample_dir = out.join("samples").join(&name);
        std::fs::create_dir_all(&sample_dir)?;
        let original = load_png(&dir.join(ORIGINAL_FILE))?;
        std::fs::copy(dir.join(ORIGINAL_FILE), sample_dir.join(ORIGINAL_FILE))?;
        std::fs::copy(dir.join(COUNTERFACTUAL_FILE), sample_dir.join(COUNTERFACTUAL_FILE))?;
        let mut rows = Vec::with_capacity(concepts.selection.k());
        for (i, (&channel, score)) in concepts.selection.channels.iter().zip(&concepts.selection.scores).enumerate() {
            let map = load_png(&dir.join(&concepts.localization_files[i]))?
                .index_axis(Axis(0), 0)
                .mapv(|v| (v + 1.0) / 2.0);
            let file = format!("overlay_{i:02}_ch{channel:03}.png");
            save_png(&sample_dir.join(&file), &overlay(&original, &map))?;
            let mut row_patches = Vec::new();
            for e in &patch_files[i] {
                let dest = out.join("patches").join(&e.path);
                if !dest.exists() {
                    std::fs::copy(patches.join(&e.path), &dest)?;
                }
                row_patches.push((format!("patches/{}", e.path), format!("{} ({:.4})", e.sample_id, e.score)));
            }
            rows.push(ConceptRow {
                channel,
                score: *score,
                patches: row_patches,
                localization: format!("samples/{name}/{file}"),
            });
        }
        let panel = ExplanationPanel {
            sample_id: record.sample_id.clone(),
            layer: concepts.selection.layer.clone(),
            original: format!("samples/{name}/{ORIGINAL_FILE}"),
            counterfactual: format!("samples/{name}/{COUNTERFACTUAL_FILE}"),
            original_class: class_name(class_names, record.original_class),
            target_class: class_name(class_names, record.target),
            counterfactual_class: class_name(class_names, record.metrics.counterfactual_class),
            target_confidence: record.metrics.target_confidence,
            flipped: record.metrics.flipped,
            rows,
        };
        let file = format!("{name}.html");
        write_atomic(&out.join(&file), panel.to_html().as_bytes())?;
        let _ = writeln!(
            index_rows,
            "<tr><td><a href=\"{}\">{}</a></td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{:.3}</td></tr>",
            escape(&file),
            escape(&panel.sample_id),
            escape(&panel.original_class),
            escape(&panel.target_class),
            panel.k(),
            if panel.flipped { "yes" } else { "not flipped" },
            record.metrics.l1
        );
        summary.panels.push(file);
    }
    let mut index = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Counterfactual explanations</title><style>{STYLE}</style></head><body>\n<h1>Counterfactual explanations</h1>\n<p>{} panels</p>\n<table><tr><th>sample</th><th>class</th><th>target</th><th>k</th><th>flipped</th><th>L1</th></tr>\n{index_rows}</table>\n",
        summary.panels.len()
    );
    if !summary.missing.is_empty() {
        index.push_str("<h2>Missing artifacts</h2>\n<ul>\n");
        for m in &summary.missing {
            let _ = writeln!(index, "<li>{}</li>", escape(m));
        }
        index.push_str("</ul>\n");
    }
    index.push_str("</body></html>\n");
    write_atomic(&out.join("index.html"), index.as_bytes())?;
    for m in &summary.missing {
        log::warn!("missing artifact: {m}");
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(k: usize, flipped: bool) -> ExplanationPanel {
        ExplanationPanel {
            sample_id: "s<1>".into(),
            layer: "relu3".into(),
            original: "o.png".into(),
            counterfactual: "c.png".into(),
            original_class: "red".into(),
            target_class: "blue".into(),
            counterfactual_class: "blue".into(),
            target_confidence: 0.9,
            flipped,
            rows: (0..k)
                .map(|c| ConceptRow {
                    channel: c,
                    score: 1.0,
                    patches: vec![("p.png".into(), "x".into())],
                    localization: "l.png".into(),
                })
                .collect(),
        }
    }

    #[test]
    fn one_row_per_concept() {
        let html = panel(3, true).to_html();
        assert_eq!(html.matches("<tr class=\"concept\">").count(), 3);
        assert!(html.contains("s&lt;1&gt;"));
        assert!(!html.contains("not flipped"));
    }

    #[test]
    fn unflipped_caption() {
        let p = panel(1, false);
        assert!(p.caption().ends_with("not flipped"));
        assert!(p.to_html().contains("not flipped"));
    }

    #[test]
    fn overlay_keeps_active_pixels() {
        let x = Array3::from_elem((3, 2, 2), 0.5);
        let m = ndarray::arr2(&[[1.0, 0.0], [0.5, 1.0]]);
        let o = overlay(&x, &m);
        assert_eq!(o[[0, 0, 0]], 0.5);
        assert!(o[[1, 0, 1]] < 0.5);
    }
}
