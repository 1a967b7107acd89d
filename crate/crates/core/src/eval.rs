//! Evaluation: reports, the order-invariant mean-pool baseline, late fusion
//! of two streams, and sampling-density sweeps.

use std::fmt::Write as _;

use crate::error::{Result, TsmError};
use crate::model::HeadModel;
use crate::tensor::ops::softmax;
use crate::train::argmax;
use crate::tsm::{resample_temporal, VideoMap};

/// Anything that maps a VideoMap to one score per class.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn scores(&self, map: &VideoMap) -> Result<Vec<f64>>;
}

impl Classifier for HeadModel {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    /// Resamples `map` to the trained height before the forward pass.
    fn scores(&self, map: &VideoMap) -> Result<Vec<f64>> {
        self.head_forward(&resample_temporal(map, self.config().t_fixed)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportMeta {
    /// Test-time sampling density, when the report comes from one.
    pub t_test: Option<usize>,
    pub model_id: String,
    pub dataset_id: String,
    pub config_hash: String,
}

/// Per-item scores and the statistics derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `NaN` for classes with no test items.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn from_scores(
        ids: Vec<String>,
        labels: Vec<usize>,
        scores: Vec<Vec<f64>>,
        num_classes: usize,
        meta: ReportMeta,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(TsmError::Argument("cannot report on an empty dataset".into()));
        }
        if ids.len() != labels.len() || ids.len() != scores.len() {
            return Err(TsmError::Argument("ids, labels and scores differ in length".into()));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        let mut predictions = Vec::with_capacity(scores.len());
        for (i, (s, &y)) in scores.iter().zip(&labels).enumerate() {
            if s.len() != num_classes {
                return Err(TsmError::dim(
                    "report",
                    format!("item {i} has {} scores, expected {num_classes}", s.len()),
                ));
            }
            if y >= num_classes {
                return Err(TsmError::Index {
                    context: format!("label of item {i}"),
                    index: y,
                    size: num_classes,
                });
            }
            let p = argmax(s);
            confusion[y][p] += 1;
            predictions.push(p);
        }
        let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    f64::NAN
                } else {
                    row[k] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            accuracy: correct as f64 / ids.len() as f64,
            per_class_accuracy,
            confusion,
            ids,
            labels,
            predictions,
            scores,
            meta,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Confusion matrix as whitespace-separated integer rows.
    pub fn confusion_text(&self) -> String {
        let mut out = String::new();
        for row in &self.confusion {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let m = &self.meta;
        writeln!(out, "accuracy={}", self.accuracy).unwrap();
        writeln!(out, "items={}", self.len()).unwrap();
        if let Some(t) = m.t_test {
            writeln!(out, "t_test={t}").unwrap();
        }
        writeln!(out, "model={}", m.model_id).unwrap();
        writeln!(out, "dataset={}", m.dataset_id).unwrap();
        writeln!(out, "config_hash={}", m.config_hash).unwrap();
        let per: Vec<String> = self.per_class_accuracy.iter().map(|a| a.to_string()).collect();
        writeln!(out, "per_class_accuracy={}", per.join(",")).unwrap();
        out
    }

    /// `id,label,prediction,score_0,…` with round-trip float formatting.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("id,label,prediction");
        for k in 0..self.num_classes() {
            write!(out, ",score_{k}").unwrap();
        }
        out.push('\n');
        for i in 0..self.len() {
            write!(out, "{},{},{}", self.ids[i], self.labels[i], self.predictions[i]).unwrap();
            for s in &self.scores[i] {
                write!(out, ",{s}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_scores_csv(text: &str, meta: ReportMeta) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| TsmError::format(0, "empty scores file"))?;
        let k = header.split(',').count().saturating_sub(3);
        if !header.starts_with("id,label,prediction") || k == 0 {
            return Err(TsmError::format(
                0,
                "scores file header must be id,label,prediction,score_0,...",
            ));
        }
        let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let bad = |what: &str| TsmError::format(0, format!("scores line {}: {what}", n + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != k + 3 {
                return Err(bad("wrong field count"));
            }
            ids.push(fields[0].to_string());
            labels.push(fields[1].parse().map_err(|_| bad("bad label"))?);
            scores.push(
                fields[3..]
                    .iter()
                    .map(|f| f.parse::<f64>().map_err(|_| bad("bad score")))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::from_scores(ids, labels, scores, k, meta)
    }
}

/// Score `dataset` after subsampling every map to `t_test` frames.
pub fn evaluate_with<C: Classifier + ?Sized>(
    classifier: &C,
    dataset: &[VideoMap],
    t_test: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(TsmError::Argument("cannot evaluate an empty dataset".into()));
    }
    let mut scores = Vec::with_capacity(dataset.len());
    for map in dataset {
        scores.push(classifier.scores(&resample_temporal(map, t_test)?)?);
    }
    EvalReport::from_scores(
        dataset.iter().map(|m| m.source_id.clone()).collect(),
        dataset.iter().map(|m| m.label).collect(),
        scores,
        classifier.num_classes(),
        ReportMeta {
            t_test: Some(t_test),
            ..ReportMeta::default()
        },
    )
}

/// Evaluate a head model at test-time density `t_test`: each map is
/// subsampled to `t_test` frames, then resampled to the trained height.
pub fn evaluate(model: &HeadModel, dataset: &[VideoMap], t_test: usize) -> Result<EvalReport> {
    evaluate_with(model, dataset, t_test)
}

/// Settings for fitting [`MeanPoolBaseline`].
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Order-invariant baseline: a linear scorer applied to the time average of
/// the frame features, which equals averaging per-frame linear scores.
///
/// Column sums are taken over sorted values, so permuting frames leaves the
/// pooled vector, and with it every score, bitwise unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPoolBaseline {
    feature_dim: usize,
    num_classes: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// `feature_dim × num_classes`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Time average of each feature column, independent of row order.
pub fn mean_pool(map: &VideoMap) -> Vec<f64> {
    let mut column = Vec::with_capacity(map.height());
    (0..map.width())
        .map(|j| {
            column.clear();
            column.extend(map.rows().map(|r| r[j]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / map.height() as f64
        })
        .collect()
}

impl MeanPoolBaseline {
    /// Full-batch softmax regression on standardized pooled features.
    pub fn fit(train: &[VideoMap], num_classes: usize, cfg: &BaselineConfig) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| TsmError::Argument("baseline needs training data".into()))?;
        let l = first.width();
        if let Some(bad) = train.iter().find(|m| m.width() != l) {
            return Err(TsmError::dim(
                "baseline",
                format!("{} has width {}, expected {l}", bad.source_id, bad.width()),
            ));
        }
        if let Some(bad) = train.iter().find(|m| m.label >= num_classes) {
            return Err(TsmError::Index {
                context: format!("label of {}", bad.source_id),
                index: bad.label,
                size: num_classes,
            });
        }
        let pooled: Vec<Vec<f64>> = train.iter().map(mean_pool).collect();
        let n = pooled.len() as f64;
        let center: Vec<f64> = (0..l).map(|j| pooled.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..l)
            .map(|j| {
                let var = pooled.iter().map(|p| (p[j] - center[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut model = Self {
            feature_dim: l,
            num_classes,
            center,
            scale,
            weights: vec![0.0; l * num_classes],
            bias: vec![0.0; num_classes],
        };
        let xs: Vec<Vec<f64>> = pooled.iter().map(|p| model.standardize(p)).collect();
        for _ in 0..cfg.iterations {
            let mut gw = vec![0.0; model.weights.len()];
            let mut gb = vec![0.0; num_classes];
            for (x, map) in xs.iter().zip(train) {
                let mut probs = softmax(&model.linear(x));
                probs[map.label] -= 1.0;
                for (j, &xj) in x.iter().enumerate() {
                    for (k, &pk) in probs.iter().enumerate() {
                        gw[j * num_classes + k] += xj * pk;
                    }
                }
                for (g, p) in gb.iter_mut().zip(&probs) {
                    *g += p;
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * (g / n + cfg.l2 * *w);
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= cfg.lr * g / n;
            }
        }
        Ok(model)
    }

    fn standardize(&self, pooled: &[f64]) -> Vec<f64> {
        pooled
            .iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    fn linear(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (j, &xj) in x.iter().enumerate() {
            for (k, o) in out.iter_mut().enumerate() {
                *o += xj * self.weights[j * self.num_classes + k];
            }
        }
        out
    }
}

impl Classifier for MeanPoolBaseline {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn scores(&self, map: &VideoMap) -> Result<Vec<f64>> {
        if map.width() != self.feature_dim {
            return Err(TsmError::dim(
                "baseline",
                format!("map width {} vs trained width {}", map.width(), self.feature_dim),
            ));
        }
        Ok(self.linear(&self.standardize(&mean_pool(map))))
    }
}

/// Fit the mean-pool baseline on `train` and report on `test` at native density.
pub fn mean_pool_baseline(train: &[VideoMap], test: &[VideoMap], num_classes: usize) -> Result<EvalReport> {
    let baseline = MeanPoolBaseline::fit(train, num_classes, &BaselineConfig::default())?;
    let mut scores = Vec::with_capacity(test.len());
    for map in test {
        scores.push(baseline.scores(map)?);
    }
    EvalReport::from_scores(
        test.iter().map(|m| m.source_id.clone()).collect(),
        test.iter().map(|m| m.label).collect(),
        scores,
        num_classes,
        ReportMeta {
            model_id: "mean-pool-baseline".into(),
            ..ReportMeta::default()
        },
    )
}

/// Late fusion: `w_a·softmax(a) + w_b·softmax(b)` per item, then argmax.
pub fn fuse_streams(a: &EvalReport, b: &EvalReport, weights: (f64, f64)) -> Result<EvalReport> {
    if a.len() != b.len() || a.ids != b.ids || a.labels != b.labels {
        return Err(TsmError::Argument(
            "streams do not cover the same items in the same order".into(),
        ));
    }
    if a.num_classes() != b.num_classes() {
        return Err(TsmError::Argument(format!(
            "streams have {} and {} classes",
            a.num_classes(),
            b.num_classes()
        )));
    }
    let (wa, wb) = weights;
    if !(wa >= 0.0 && wb >= 0.0 && wa + wb > 0.0) {
        return Err(TsmError::Argument(
            "fusion weights must be non-negative and not both zero".into(),
        ));
    }
    let scores = a
        .scores
        .iter()
        .zip(&b.scores)
        .map(|(sa, sb)| {
            softmax(sa)
                .into_iter()
                .zip(softmax(sb))
                .map(|(pa, pb)| wa * pa + wb * pb)
                .collect()
        })
        .collect();
    EvalReport::from_scores(
        a.ids.clone(),
        a.labels.clone(),
        scores,
        a.num_classes(),
        ReportMeta {
            t_test: a.meta.t_test,
            model_id: format!("fused({},{})", a.meta.model_id, b.meta.model_id),
            dataset_id: a.meta.dataset_id.clone(),
            config_hash: a.meta.config_hash.clone(),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub t_test: usize,
    pub accuracy: f64,
}

/// One evaluation per test-time density.
pub fn density_sweep_with<C: Classifier + ?Sized>(
    classifier: &C,
    dataset: &[VideoMap],
    t_list: &[usize],
) -> Result<Vec<SweepRow>> {
    if t_list.is_empty() {
        return Err(TsmError::Argument("density sweep needs at least one T".into()));
    }
    t_list
        .iter()
        .map(|&t| {
            Ok(SweepRow {
                t_test: t,
                accuracy: evaluate_with(classifier, dataset, t)?.accuracy,
            })
        })
        .collect()
}

pub fn density_sweep(model: &HeadModel, dataset: &[VideoMap], t_list: &[usize]) -> Result<Vec<SweepRow>> {
    density_sweep_with(model, dataset, t_list)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("t_test,accuracy\n");
    for r in rows {
        writeln!(out, "{},{}", r.t_test, r.accuracy).unwrap();
    }
    out
}

/// Accuracy-versus-density line chart as a standalone SVG document.
pub fn sweep_svg(series: &[(&str, &[SweepRow])]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let ts: Vec<f64> = series
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.t_test as f64))
        .collect();
    let (lo, hi) = ts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| {
        (a.min(t.ln()), b.max(t.ln()))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |t: usize| PAD + ((t as f64).ln() - lo) / span * (W - 2.0 * PAD);
    let y = |acc: f64| H - PAD - acc.clamp(0.0, 1.0) * (H - 2.0 * PAD);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    )
    .unwrap();
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#,
            PAD - 6.0,
            y(tick) + 4.0
        )
        .unwrap();
    }
    let mut seen = Vec::new();
    for &t in ts.iter() {
        let t = t as usize;
        if !seen.contains(&t) {
            seen.push(t);
            writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#,
                x(t),
                H - PAD + 16.0
            )
            .unwrap();
        }
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">frames per video</text>"#,
        W / 2.0,
        H - 8.0
    )
    .unwrap();
    for (i, (name, rows)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.1},{:.1}", x(r.t_test), y(r.accuracy)))
            .collect();
        writeln!(
            svg,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            points.join(" ")
        )
        .unwrap();
        for r in rows.iter() {
            writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x(r.t_test),
                y(r.accuracy)
            )
            .unwrap();
        }
        writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - PAD - 110.0,
            PAD + 14.0 * i as f64
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mean `a0` over relevant frames minus the mean over the rest, for maps
/// carrying a relevance mask with both kinds of frame.
pub fn attention_contrast(model: &HeadModel, map: &VideoMap) -> Result<Option<f64>> {
    let fixed = resample_temporal(map, model.config().t_fixed)?;
    let a0 = model.attention_vector(&fixed)?;
    Ok(fixed.relevance.as_deref().and_then(|mask| mask_contrast(&a0, mask)))
}

/// Mean of `values` where `mask` is set minus the mean where it is not.
pub fn mask_contrast(values: &[f64], mask: &[bool]) -> Option<f64> {
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in values.iter().zip(mask) {
        if m {
            on += v;
            n_on += 1;
        } else {
            off += v;
            n_off += 1;
        }
    }
    (n_on > 0 && n_off > 0).then(|| on / n_on as f64 - off / n_off as f64)
}
