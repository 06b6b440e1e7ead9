//! Gold-set evaluation: confusion metrics, ROC/AUC, the Youden operating
//! point, precision-recall curves and majority-vote ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary diagnostic outcome. Abnormal is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Normal,
    Abnormal,
}

/// One scored test example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    /// Abnormal probability in [0, 1].
    pub score: f64,
    pub truth: Outcome,
}

/// Confusion-derived metrics at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1_weighted: f64,
    pub accuracy: f64,
}

/// One point of the ROC sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Full ROC sweep with the Youden operating point and its metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocReport {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub youden_threshold: f64,
    pub metrics_at_threshold: Metrics,
}

/// Per-example modal class over an odd number (>= 3) of raters.
pub fn majority_vote(raters: &[Vec<Outcome>]) -> Result<Vec<Outcome>> {
    if raters.len() < 3 || raters.len().is_multiple_of(2) {
        return Err(Error::Domain(format!(
            "majority vote needs an odd rater count >= 3, got {}",
            raters.len()
        )));
    }
    let n = raters[0].len();
    if raters.iter().any(|r| r.len() != n) {
        return Err(Error::Domain("rater label lists differ in length".into()));
    }
    Ok((0..n)
        .map(|i| {
            let abnormal = raters.iter().filter(|r| r[i] == Outcome::Abnormal).count();
            if abnormal * 2 > raters.len() {
                Outcome::Abnormal
            } else {
                Outcome::Normal
            }
        })
        .collect())
}

fn confusion(examples: &[ScoredExample], threshold: f64) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fne) = (0, 0, 0, 0);
    for e in examples {
        let predicted_abnormal = e.score >= threshold;
        match (predicted_abnormal, e.truth) {
            (true, Outcome::Abnormal) => tp += 1,
            (true, Outcome::Normal) => fp += 1,
            (false, Outcome::Normal) => tn += 1,
            (false, Outcome::Abnormal) => fne += 1,
        }
    }
    (tp, fp, tn, fne)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall, accuracy (Abnormal positive) and support-weighted F1
/// with predictions made by `score >= threshold`.
pub fn classification_metrics(examples: &[ScoredExample], threshold: f64) -> Metrics {
    let (tp, fp, tn, fne) = confusion(examples, threshold);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1_abnormal = f1(precision, recall);
    // Normal treated as positive for its own per-class F1
    let precision_n = ratio(tn, tn + fne);
    let recall_n = ratio(tn, tn + fp);
    let f1_normal = f1(precision_n, recall_n);
    let support_abnormal = tp + fne;
    let support_normal = tn + fp;
    let total = support_abnormal + support_normal;
    let f1_weighted = if total == 0 {
        0.0
    } else {
        (support_abnormal as f64 * f1_abnormal + support_normal as f64 * f1_normal) / total as f64
    };
    Metrics {
        precision,
        recall,
        f1_weighted,
        accuracy: ratio(tp + tn, total),
    }
}

/// Threshold sweep over the unique scores (plus a +inf sentinel), trapezoidal
/// AUC, and the Youden threshold (max TPR - FPR, ties resolved toward the
/// lower threshold to favor sensitivity).
pub fn roc_curve(examples: &[ScoredExample]) -> Result<RocReport> {
    let positives = examples.iter().filter(|e| e.truth == Outcome::Abnormal).count();
    let negatives = examples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate(
            "ROC needs both classes present".into(),
        ));
    }
    let mut thresholds: Vec<f64> = examples.iter().map(|e| e.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    for &t in &thresholds {
        let (tp, fp, _, _) = confusion(examples, t);
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold: t,
        });
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }

    let mut youden_threshold = points[1].threshold;
    let mut best_j = f64::NEG_INFINITY;
    for p in points.iter().skip(1) {
        let j = p.tpr - p.fpr;
        if j >= best_j {
            best_j = j;
            youden_threshold = p.threshold;
        }
    }

    let metrics_at_threshold = classification_metrics(examples, youden_threshold);
    Ok(RocReport {
        points,
        auc,
        youden_threshold,
        metrics_at_threshold,
    })
}

/// Precision-recall sweep over the same thresholds as the ROC curve.
/// Points are (recall, precision, threshold).
pub fn pr_curve(examples: &[ScoredExample]) -> Result<Vec<(f64, f64, f64)>> {
    let positives = examples.iter().filter(|e| e.truth == Outcome::Abnormal).count();
    if positives == 0 || positives == examples.len() {
        return Err(Error::Degenerate("PR curve needs both classes present".into()));
    }
    let mut thresholds: Vec<f64> = examples.iter().map(|e| e.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (tp, fp, _, fne) = confusion(examples, t);
            (ratio(tp, tp + fne), ratio(tp, tp + fp), t)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Comparison table
// ---------------------------------------------------------------------------

const TABLE_ROWS: [&str; 4] = ["F1", "Precision", "Recall", "Accuracy"];

fn metric_by_name(m: &Metrics, name: &str) -> f64 {
    match name {
        "F1" => m.f1_weighted,
        "Precision" => m.precision,
        "Recall" => m.recall,
        "Accuracy" => m.accuracy,
        _ => unreachable!(),
    }
}

/// Render the model-vs-raters table. Values print as percentages with two
/// decimals; there is no ranking logic, only display.
pub fn compare_raters(model: &Metrics, raters: &[(String, Metrics)]) -> String {
    let mut headers = vec!["Metric".to_string(), "Model".to_string()];
    headers.extend(raters.iter().map(|(name, _)| name.clone()));
    let mut rows: Vec<Vec<String>> = Vec::new();
    for name in TABLE_ROWS {
        let mut row = vec![name.to_string()];
        row.push(format!("{:.2}%", metric_by_name(model, name) * 100.0));
        for (_, m) in raters {
            row.push(format!("{:.2}%", metric_by_name(m, name) * 100.0));
        }
        rows.push(row);
    }
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let render_row = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:<w$}", c, w = widths[i]))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = String::new();
    out.push_str(&render_row(&headers));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    out.push('\n');
    for row in rows {
        out.push_str(&render_row(&row));
        out.push('\n');
    }
    out
}

/// Parse a table produced by [`compare_raters`] back into per-column metrics.
/// Returns (column name, metrics) pairs, the model first.
pub fn parse_comparison_table(table: &str) -> Result<Vec<(String, Metrics)>> {
    let lines: Vec<&str> = table.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() < 6 {
        return Err(Error::Format("comparison table is truncated".into()));
    }
    let headers: Vec<String> = lines[0].split('|').map(|c| c.trim().to_string()).collect();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); headers.len() - 1];
    for line in &lines[2..6] {
        let cells: Vec<&str> = line.split('|').map(|c| c.trim()).collect();
        for (i, cell) in cells.iter().skip(1).enumerate() {
            let v = cell
                .strip_suffix('%')
                .ok_or_else(|| Error::Format(format!("cell {cell} lacks % suffix")))?
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad metric cell: {cell}")))?;
            values[i].push(v / 100.0);
        }
    }
    Ok(headers
        .iter()
        .skip(1)
        .zip(values)
        .map(|(name, v)| {
            (
                name.clone(),
                Metrics {
                    f1_weighted: v[0],
                    precision: v[1],
                    recall: v[2],
                    accuracy: v[3],
                },
            )
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Curve exports
// ---------------------------------------------------------------------------

/// CSV point list: `fpr,tpr,threshold` per line.
pub fn roc_to_csv(report: &RocReport) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &report.points {
        out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    out
}

/// CSV point list: `recall,precision,threshold` per line.
pub fn pr_to_csv(points: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("recall,precision,threshold\n");
    for (r, p, t) in points {
        out.push_str(&format!("{r},{p},{t}\n"));
    }
    out
}

fn svg_line_plot(points: &[(f64, f64)], x_label: &str, y_label: &str, title: &str) -> String {
    let (w, h, margin) = (520.0, 520.0, 50.0);
    let plot = w - 2.0 * margin;
    let px = |x: f64| margin + x * plot;
    let py = |y: f64| h - margin - y * plot;
    let path: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
            "<line x1=\"{m}\" y1=\"{ym}\" x2=\"{xm}\" y2=\"{ym}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ym}\" stroke=\"black\"/>\n",
            "<text x=\"{tx}\" y=\"{h2}\" text-anchor=\"middle\" font-size=\"12\">{xl}</text>\n",
            "<text x=\"14\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\" ",
            "transform=\"rotate(-90 14 {ty})\">{yl}</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = margin,
        xm = w - margin,
        ym = h - margin,
        tx = w / 2.0,
        ty = h / 2.0,
        h2 = h - 12.0,
        title = title,
        xl = x_label,
        yl = y_label,
        pts = path.join(" ")
    )
}

pub fn roc_to_svg(report: &RocReport) -> String {
    let pts: Vec<(f64, f64)> = report.points.iter().map(|p| (p.fpr, p.tpr)).collect();
    svg_line_plot(
        &pts,
        "false positive rate",
        "true positive rate",
        &format!("ROC (AUC = {:.4})", report.auc),
    )
}

pub fn pr_to_svg(points: &[(f64, f64, f64)]) -> String {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(r, p, _)| (r, p)).collect();
    svg_line_plot(&pts, "recall", "precision", "Precision-Recall")
}
