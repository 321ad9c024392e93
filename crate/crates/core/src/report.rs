//! Report emission: CSV tables, SVG figures, and provenance manifests.
//!
//! Everything here renders to strings deterministically (no timestamps, no
//! locale formatting) so byte-identical configs yield byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result, XfddError};
use crate::train::{EpochRecord, MetricsReport};
use crate::xai::{ImportanceReport, InteractionMatrix, TimingTable};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

// ---- CSV tables ----

/// RFC 4180 CSV from string rows; commas and quotes in cells get quoted.
pub fn csv_from_rows(records: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rec in records {
        w.write_record(rec).map_err(|e| XfddError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| XfddError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| XfddError::Format(e.to_string()))
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

/// Global feature importance as (feature, score, rank) rows in rank order.
pub fn importance_csv(rep: &ImportanceReport) -> Result<String> {
    let mut rows = vec![vec!["feature".to_string(), "score".to_string(), "rank".to_string()]];
    for (rank, &ch) in rep.ranking.iter().enumerate() {
        rows.push(vec![rep.channel_names[ch].clone(), f(rep.gfi[ch]), (rank + 1).to_string()]);
    }
    csv_from_rows(&rows)
}

/// Per-class importance rows; classes absent from the sample set are skipped
/// entirely rather than zero-filled.
pub fn per_class_importance_csv(rep: &ImportanceReport, class_names: &[String]) -> Result<String> {
    if class_names.len() != rep.pcfi.len() {
        return invalid(format!(
            "{} class names for {} per-class rows",
            class_names.len(),
            rep.pcfi.len()
        ));
    }
    let mut rows = vec![vec![
        "class".to_string(),
        "feature".to_string(),
        "score".to_string(),
        "rank".to_string(),
    ]];
    for (c, scores) in rep.pcfi.iter().enumerate() {
        let (Some(scores), Some(ranking)) = (scores, &rep.pcfi_rankings[c]) else { continue };
        for (rank, &ch) in ranking.iter().enumerate() {
            rows.push(vec![
                class_names[c].clone(),
                rep.channel_names[ch].clone(),
                f(scores[ch]),
                (rank + 1).to_string(),
            ]);
        }
    }
    csv_from_rows(&rows)
}

/// Square normalized-interaction matrix with name headers on both axes.
pub fn interaction_csv(m: &InteractionMatrix) -> Result<String> {
    let c = m.channels;
    let mut rows = Vec::with_capacity(c + 1);
    let mut header = vec![String::new()];
    header.extend(m.channel_names.iter().cloned());
    rows.push(header);
    for i in 0..c {
        let mut row = vec![m.channel_names[i].clone()];
        row.extend((0..c).map(|j| f(m.normalized[i * c + j])));
        rows.push(row);
    }
    csv_from_rows(&rows)
}

/// Per-epoch training history.
pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let mut rows = vec![vec![
        "epoch".to_string(),
        "lr".to_string(),
        "train_loss".to_string(),
        "train_acc".to_string(),
        "val_loss".to_string(),
        "val_acc".to_string(),
    ]];
    for e in history {
        rows.push(vec![
            e.epoch.to_string(),
            f(e.lr),
            f(e.train_loss),
            f(e.train_acc),
            f(e.val_loss),
            f(e.val_acc),
        ]);
    }
    csv_from_rows(&rows)
}

/// Metric-per-row comparison table: one column per named model, rows
/// Accuracy / Precision / Recall / F1-Score (percent) then train/test wall
/// time in seconds.
pub fn metrics_table(named: &[(&str, &MetricsReport)]) -> Result<String> {
    if named.is_empty() {
        return invalid("metrics table needs at least one model");
    }
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    let mut rows = Vec::with_capacity(7);
    let mut header = vec!["Metric".to_string()];
    header.extend(named.iter().map(|(n, _)| n.to_string()));
    rows.push(header);
    let metric_rows: [(&str, fn(&MetricsReport) -> f64); 4] = [
        ("Accuracy", |r| r.accuracy),
        ("Precision", |r| r.macro_precision),
        ("Recall", |r| r.macro_recall),
        ("F1-Score", |r| r.macro_f1),
    ];
    for (name, get) in metric_rows {
        let mut row = vec![name.to_string()];
        row.extend(named.iter().map(|(_, r)| pct(get(r))));
        rows.push(row);
    }
    let mut row = vec!["Train Time (s)".to_string()];
    row.extend(named.iter().map(|(_, r)| format!("{:.2}", r.train_time_s)));
    rows.push(row);
    let mut row = vec!["Test Time (s)".to_string()];
    row.extend(named.iter().map(|(_, r)| format!("{:.2}", r.test_time_s)));
    rows.push(row);
    csv_from_rows(&rows)
}

/// Model-per-row timing comparison with the fixed method column order.
pub fn timing_csv(named: &[(&str, &TimingTable)]) -> Result<String> {
    if named.is_empty() {
        return invalid("timing table needs at least one model");
    }
    let mut header = vec!["Model".to_string()];
    header.extend(named[0].1.columns.iter().cloned());
    let mut rows = vec![header];
    for (name, t) in named {
        let mut row = vec![name.to_string()];
        row.extend(t.total_s.iter().map(|&s| format!("{s:.2}")));
        rows.push(row);
    }
    csv_from_rows(&rows)
}

// ---- SVG figures ----

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn of(values: impl Iterator<Item = f64>) -> Axis {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            // Flat series still needs a visible band.
            return Axis { lo: lo - 0.5, hi: hi + 0.5 };
        }
        let pad = (hi - lo) * 0.05;
        Axis { lo: lo - pad, hi: hi + pad }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn polyline(points: &[(f64, f64)], color: &str, dashed: bool) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dashed { " stroke-dasharray=\"6 3\"" } else { "" };
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Training and validation loss/accuracy over epochs as a two-panel figure.
pub fn svg_curves(history: &[EpochRecord]) -> Result<String> {
    if history.is_empty() {
        return invalid("cannot plot an empty history");
    }
    let (pw, ph, ml, mt) = (360.0, 240.0, 52.0, 24.0);
    let gap = 48.0;
    let width = ml + pw + gap + pw + 24.0;
    let height = mt + ph + 64.0;
    let n = history.len();
    let xf = |i: usize, x0: f64| {
        if n == 1 {
            x0 + pw / 2.0
        } else {
            x0 + pw * i as f64 / (n - 1) as f64
        }
    };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );

    let panels: [(&str, f64, Box<dyn Fn(&EpochRecord) -> (f64, f64)>); 2] = [
        ("Loss", ml, Box::new(|e: &EpochRecord| (e.train_loss, e.val_loss))),
        ("Accuracy", ml + pw + gap, Box::new(|e: &EpochRecord| (e.train_acc, e.val_acc))),
    ];
    for (title, x0, get) in &panels {
        let axis = Axis::of(history.iter().flat_map(|e| {
            let (a, b) = get(e);
            [a, b]
        }));
        let yf = |v: f64| mt + ph * (1.0 - axis.frac(v));
        svg.push_str(&format!(
            "<rect x=\"{x0:.1}\" y=\"{mt:.1}\" width=\"{pw:.1}\" height=\"{ph:.1}\" \
             fill=\"none\" stroke=\"#444\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
            x0 + pw / 2.0,
            mt - 8.0
        ));
        for t in 0..=4 {
            let v = axis.lo + (axis.hi - axis.lo) * t as f64 / 4.0;
            let y = yf(v);
            svg.push_str(&format!(
                "<line x1=\"{x0:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
                 stroke=\"#ddd\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>\n",
                x0 + pw,
                x0 - 6.0,
                y + 4.0
            ));
        }
        let ticks = if n <= 6 { n } else { 6 };
        for t in 0..ticks {
            let i = if ticks == 1 { 0 } else { t * (n - 1) / (ticks - 1) };
            let x = xf(i, *x0);
            svg.push_str(&format!(
                "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                mt + ph + 16.0,
                history[i].epoch
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">epoch</text>\n",
            x0 + pw / 2.0,
            mt + ph + 34.0
        ));
        let train: Vec<(f64, f64)> =
            history.iter().enumerate().map(|(i, e)| (xf(i, *x0), yf(get(e).0))).collect();
        let val: Vec<(f64, f64)> =
            history.iter().enumerate().map(|(i, e)| (xf(i, *x0), yf(get(e).1))).collect();
        svg.push_str(&polyline(&train, "#1f77b4", false));
        svg.push_str(&polyline(&val, "#d62728", true));
    }
    let ly = mt + ph + 52.0;
    svg.push_str(&format!(
        "<line x1=\"{ml:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"#1f77b4\" \
         stroke-width=\"1.5\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">train</text>\n\
         <line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"#d62728\" \
         stroke-width=\"1.5\" stroke-dasharray=\"6 3\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">validation</text>\n",
        ml + 28.0,
        ml + 34.0,
        ly + 4.0,
        ml + 100.0,
        ml + 128.0,
        ml + 134.0,
        ly + 4.0
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn diverging_color(v: f64) -> String {
    // Blue at -1 through white at 0 to red at +1.
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v < 0.0 {
        let t = -v;
        (
            (255.0 + (59.0 - 255.0) * t) as u8,
            (255.0 + (76.0 - 255.0) * t) as u8,
            (255.0 + (192.0 - 255.0) * t) as u8,
        )
    } else {
        (
            (255.0 + (180.0 - 255.0) * v) as u8,
            (255.0 + (4.0 - 255.0) * v) as u8,
            (255.0 + (38.0 - 255.0) * v) as u8,
        )
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Normalized channel-interaction heatmap with a diverging blue/white/red
/// scale over [-1, 1].
pub fn svg_heatmap(m: &InteractionMatrix) -> Result<String> {
    let c = m.channels;
    if c == 0 {
        return invalid("cannot plot an empty interaction matrix");
    }
    let cell = 22.0;
    let (ml, mt) = (170.0, 150.0);
    let width = ml + cell * c as f64 + 40.0;
    let height = mt + cell * c as f64 + 20.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"10\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for i in 0..c {
        let y = mt + cell * i as f64;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ml - 6.0,
            y + cell * 0.7,
            xml_escape(&m.channel_names[i])
        ));
        let x = ml + cell * i as f64 + cell * 0.7;
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"start\" \
             transform=\"rotate(-60 {x:.1} {:.1})\">{}</text>\n",
            mt - 6.0,
            mt - 6.0,
            xml_escape(&m.channel_names[i])
        ));
        for j in 0..c {
            let v = m.normalized[i * c + j];
            let x = ml + cell * j as f64;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell:.1}\" height=\"{cell:.1}\" \
                 fill=\"{}\" stroke=\"#ccc\" stroke-width=\"0.5\"><title>{} / {}: {v:.6}</title></rect>\n",
                diverging_color(v),
                xml_escape(&m.channel_names[i]),
                xml_escape(&m.channel_names[j]),
            ));
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

// ---- provenance manifests ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Provenance record written next to every output batch: hash of the exact
/// config that produced the files, the seeds involved, and a content hash
/// per file. No timestamps, so equal configs produce equal manifests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_sha256: String,
    pub root_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: Vec<OutputRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(config_text: &str, root_seed: u64) -> Manifest {
        Manifest {
            schema_version: REPORT_SCHEMA_VERSION,
            config_sha256: sha256_hex(config_text.as_bytes()),
            root_seed,
            seeds: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Writes `content` under `dir/name` and records its hash.
    pub fn write_file(&mut self, dir: &Path, name: &str, content: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, content)?;
        self.outputs.push(OutputRecord {
            file: name.to_string(),
            sha256: sha256_hex(content),
            bytes: content.len(),
        });
        Ok(path)
    }

    /// Records an already-written file by re-reading it.
    pub fn record_existing(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes =
            fs::read(dir.join(name))?;
        self.outputs.push(OutputRecord {
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| XfddError::Format(e.to_string()))?;
        text.push('\n');
        Ok(fs::write(path, text)?)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| XfddError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConfusionMatrix;

    fn history() -> Vec<EpochRecord> {
        (1..=3)
            .map(|i| EpochRecord {
                epoch: i,
                lr: 0.01 / i as f64,
                train_loss: 1.0 / i as f64,
                train_acc: 0.5 + 0.1 * i as f64,
                val_loss: 1.2 / i as f64,
                val_acc: 0.4 + 0.1 * i as f64,
            })
            .collect()
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let text = history_csv(&history()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "epoch,lr,train_loss,train_acc,val_loss,val_acc");
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn importance_csv_orders_by_rank_and_quotes_commas() {
        let rep = ImportanceReport {
            method: "ig".into(),
            baseline: "zero".into(),
            channel_names: vec!["plain".into(), "with, comma".into()],
            gfi: vec![0.25, 0.75],
            ranking: vec![1, 0],
            pcfi: vec![],
            pcfi_rankings: vec![],
        };
        let text = importance_csv(&rep).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "feature,score,rank");
        assert_eq!(lines[1], "\"with, comma\",0.750000,1");
        assert_eq!(lines[2], "plain,0.250000,2");
    }

    #[test]
    fn per_class_csv_skips_absent_classes() {
        let rep = ImportanceReport {
            method: "ig".into(),
            baseline: "zero".into(),
            channel_names: vec!["a".into(), "b".into()],
            gfi: vec![0.1, 0.2],
            ranking: vec![1, 0],
            pcfi: vec![Some(vec![0.3, 0.1]), None],
            pcfi_rankings: vec![Some(vec![0, 1]), None],
        };
        let text = per_class_importance_csv(&rep, &["c0".into(), "c1".into()]).unwrap();
        assert!(text.contains("c0,a,0.300000,1"));
        assert!(!text.contains("c1"));
        assert!(per_class_importance_csv(&rep, &["only".into()]).is_err());
    }

    #[test]
    fn metrics_table_layout_is_metric_rows_by_model_columns() {
        let cm = ConfusionMatrix::from_pairs(2, &[0, 1, 1], &[0, 1, 0]).unwrap();
        let report = MetricsReport {
            accuracy: cm.accuracy(),
            macro_precision: cm.macro_precision(),
            macro_recall: cm.macro_recall(),
            macro_f1: cm.macro_f1(),
            per_class: cm.per_class(),
            confusion: cm,
            roc_auc: vec![None, None],
            pr_auc: vec![None, None],
            train_time_s: 12.5,
            test_time_s: 0.25,
        };
        let text = metrics_table(&[("gru", &report), ("hybrid", &report)]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Metric,gru,hybrid");
        assert!(lines[1].starts_with("Accuracy,66.67,"));
        assert_eq!(lines[5], "Train Time (s),12.50,12.50");
        assert_eq!(lines[6], "Test Time (s),0.25,0.25");
        assert!(metrics_table(&[]).is_err());
    }

    #[test]
    fn timing_csv_keeps_method_column_order() {
        let t = TimingTable {
            columns: crate::xai::ATTRIBUTION_COLUMNS.iter().map(|s| s.to_string()).collect(),
            total_s: [1.0, 0.5, 2.0, 4.0],
            per_window_s: [0.1, 0.05, 0.2, 0.4],
            single_gradient_s: 0.01,
            single_deeplift_s: 0.05,
            windows: 10,
            ig_steps: 50,
            gs_samples: 20,
            dlshap_baselines: 10,
        };
        let text = timing_csv(&[("desk", &t)]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Model,IGs,DeepLIFT,Gradient SHAP,DeepLIFT SHAP");
        assert_eq!(lines[1], "desk,1.00,0.50,2.00,4.00");
    }

    #[test]
    fn svg_curves_render_both_panels() {
        let svg = svg_curves(&history()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(">Loss<"));
        assert!(svg.contains(">Accuracy<"));
        assert!(svg.contains("polyline"));
        assert!(svg_curves(&[]).is_err());
        // Deterministic text.
        assert_eq!(svg, svg_curves(&history()).unwrap());
    }

    #[test]
    fn svg_heatmap_renders_each_cell_and_escapes_names() {
        let m = InteractionMatrix {
            channels: 2,
            channel_names: vec!["a<b".into(), "c".into()],
            normalized: vec![1.0, -0.5, -0.5, 1.0],
            raw: vec![0.2, -0.1, -0.1, 0.3],
            flagged: vec![],
        };
        let svg = svg_heatmap(&m).unwrap();
        assert_eq!(svg.matches("<rect x=").count(), 4);
        assert!(svg.contains("a&lt;b"));
        let empty = InteractionMatrix {
            channels: 0,
            channel_names: vec![],
            normalized: vec![],
            raw: vec![],
            flagged: vec![],
        };
        assert!(svg_heatmap(&empty).is_err());
    }

    #[test]
    fn diverging_scale_hits_anchor_colors() {
        assert_eq!(diverging_color(0.0), "#ffffff");
        assert_eq!(diverging_color(1.0), "#b40426");
        assert_eq!(diverging_color(-1.0), "#3b4cc0");
        assert_eq!(diverging_color(2.0), diverging_color(1.0));
    }

    #[test]
    fn manifest_roundtrip_and_hashing() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("{\"seed\":7}", 7);
        m.seed("model", 9);
        m.write_file(dir.path(), "out.csv", b"a,b\n1,2\n").unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.config_sha256, m.config_sha256);
        assert_eq!(back.outputs.len(), 1);
        assert_eq!(back.outputs[0].bytes, 8);
        assert_eq!(back.outputs[0].sha256, sha256_hex(b"a,b\n1,2\n"));
        assert_eq!(back.seeds["model"], 9);

        // Identical configs hash identically; different ones do not.
        assert_eq!(Manifest::new("{\"seed\":7}", 7).config_sha256, m.config_sha256);
        assert_ne!(Manifest::new("{\"seed\":8}", 8).config_sha256, m.config_sha256);
    }
}
