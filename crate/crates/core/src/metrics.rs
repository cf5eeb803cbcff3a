//! Evaluation metrics and annotation-agreement statistics: macro
//! precision/recall/F1 over confusion counts, Cohen's kappa, box IoU with
//! greedy matching, and per-round agreement reports.
//!
//! Scoring conventions: the scoring unit is a (sample, aspect) decision over
//! the four sentiment classes including `none`; divisions with zero
//! denominator yield 0 and the affected classes are flagged; macro averages
//! run per aspect over classes first, then over aspects (a flat variant over
//! all decisions at once is available too).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::datamodel::types::{AspectCategory, MultimodalSample, SentimentLabel};
use crate::error::{Error, Result};

/// Confusion counts and derived scores for one class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Gold occurrences of this class.
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class scores plus their unweighted macro average.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrfReport {
    pub classes: Vec<ClassScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Classes that never occur in gold or predictions (their 0/0 scores
    /// were defined as 0).
    pub zero_support: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 with unweighted macro averages over the
/// `n_classes` label set. Labels are class indices; 0/0 divisions yield 0.
pub fn macro_prf1(gold: &[usize], pred: &[usize], n_classes: usize) -> Result<PrfReport> {
    if gold.len() != pred.len() {
        return Err(Error::data(format!(
            "gold and prediction lists differ in length: {} vs {}",
            gold.len(),
            pred.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::data("class set is empty"));
    }
    if let Some(&bad) = gold.iter().chain(pred).find(|&&c| c >= n_classes) {
        return Err(Error::data(format!("label {bad} outside the {n_classes}-class set")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let total = gold.len();
    let mut classes = Vec::with_capacity(n_classes);
    let mut zero_support = Vec::new();
    for c in 0..n_classes {
        let support = tp[c] + fn_[c];
        if support == 0 && fp[c] == 0 {
            zero_support.push(c);
        }
        classes.push(ClassScore {
            tp: tp[c],
            fp: fp[c],
            fn_: fn_[c],
            tn: total - tp[c] - fp[c] - fn_[c],
            support,
            precision: ratio(tp[c], tp[c] + fp[c]),
            recall: ratio(tp[c], support),
            f1: ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn_[c]),
        });
    }
    let n = n_classes as f64;
    Ok(PrfReport {
        macro_precision: classes.iter().map(|c| c.precision).sum::<f64>() / n,
        macro_recall: classes.iter().map(|c| c.recall).sum::<f64>() / n,
        macro_f1: classes.iter().map(|c| c.f1).sum::<f64>() / n,
        classes,
        zero_support,
    })
}

impl PrfReport {
    /// Macro (precision, recall, F1) with one class left out of the average.
    pub fn macro_excluding(&self, class: usize) -> (f64, f64, f64) {
        let rest: Vec<&ClassScore> = self
            .classes
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != class)
            .map(|(_, c)| c)
            .collect();
        let n = rest.len() as f64;
        (
            rest.iter().map(|c| c.precision).sum::<f64>() / n,
            rest.iter().map(|c| c.recall).sum::<f64>() / n,
            rest.iter().map(|c| c.f1).sum::<f64>() / n,
        )
    }
}

/// Options for [`evaluate_aspects`].
#[derive(Debug, Clone, Copy, Default)]
pub struct AspectEvalOptions {
    /// Leave the `none` class out of every macro average.
    pub exclude_none: bool,
    /// Average over all (sample, aspect) decisions at once instead of per
    /// aspect first.
    pub flat: bool,
}

/// Aspect-level evaluation over (aspect, gold, predicted) decisions.
#[derive(Debug, Clone, Serialize)]
pub struct AspectReport {
    /// Full four-class report per aspect, in canonical aspect order.
    pub per_aspect: Vec<(AspectCategory, PrfReport)>,
    /// One four-class report over all decisions pooled together.
    pub flat: PrfReport,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Scores sentiment decisions grouped by aspect. The headline macro numbers
/// average per-aspect class averages (or the pooled report, per options).
pub fn evaluate_aspects(
    decisions: &[(AspectCategory, SentimentLabel, SentimentLabel)],
    options: AspectEvalOptions,
) -> Result<AspectReport> {
    let n_classes = SentimentLabel::ALL.len();
    let mut by_aspect: BTreeMap<AspectCategory, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let mut gold_all = Vec::with_capacity(decisions.len());
    let mut pred_all = Vec::with_capacity(decisions.len());
    for &(aspect, gold, pred) in decisions {
        let entry = by_aspect.entry(aspect).or_default();
        entry.0.push(gold.index());
        entry.1.push(pred.index());
        gold_all.push(gold.index());
        pred_all.push(pred.index());
    }
    let mut per_aspect = Vec::new();
    for (aspect, (gold, pred)) in by_aspect {
        per_aspect.push((aspect, macro_prf1(&gold, &pred, n_classes)?));
    }
    let flat = macro_prf1(&gold_all, &pred_all, n_classes)?;
    let none = SentimentLabel::None.index();
    let summarize = |r: &PrfReport| -> (f64, f64, f64) {
        if options.exclude_none {
            r.macro_excluding(none)
        } else {
            (r.macro_precision, r.macro_recall, r.macro_f1)
        }
    };
    let (macro_precision, macro_recall, macro_f1) = if options.flat {
        summarize(&flat)
    } else if per_aspect.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let n = per_aspect.len() as f64;
        let sums = per_aspect.iter().map(|(_, r)| summarize(r)).fold(
            (0.0, 0.0, 0.0),
            |acc, v| (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2),
        );
        (sums.0 / n, sums.1 / n, sums.2 / n)
    };
    Ok(AspectReport {
        per_aspect,
        flat,
        macro_precision,
        macro_recall,
        macro_f1,
    })
}

/// Writes an aspect report as CSV: `aspect,class,precision,recall,f1` rows,
/// a macro row per aspect, and a final overall macro row.
pub fn write_eval_csv(report: &AspectReport, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut row = |fields: [&str; 5]| -> Result<()> {
        writer
            .write_record(fields)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    };
    row(["aspect", "class", "precision", "recall", "f1"])?;
    for (aspect, prf) in &report.per_aspect {
        for (label, score) in SentimentLabel::ALL.iter().zip(&prf.classes) {
            row([
                aspect.name(),
                label.name(),
                &score.precision.to_string(),
                &score.recall.to_string(),
                &score.f1.to_string(),
            ])?;
        }
        row([
            aspect.name(),
            "macro",
            &prf.macro_precision.to_string(),
            &prf.macro_recall.to_string(),
            &prf.macro_f1.to_string(),
        ])?;
    }
    row([
        "all",
        "macro",
        &report.macro_precision.to_string(),
        &report.macro_recall.to_string(),
        &report.macro_f1.to_string(),
    ])?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Cohen's kappa between two aligned label sequences. Uses the integer-count
/// form `(n·agree − Σ_c rowₐ(c)·row_b(c)) / (n² − Σ_c rowₐ(c)·row_b(c))`;
/// when chance agreement is total (denominator 0), kappa is defined as 1 for
/// perfect agreement and 0 otherwise.
pub fn cohen_kappa(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::data("kappa needs at least one paired label"));
    }
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "annotator label lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n_classes = a.iter().chain(b).max().unwrap() + 1;
    let mut marg_a = vec![0u64; n_classes];
    let mut marg_b = vec![0u64; n_classes];
    let mut agree = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        marg_a[x] += 1;
        marg_b[y] += 1;
        if x == y {
            agree += 1;
        }
    }
    let n = a.len() as u64;
    let chance: u64 = marg_a.iter().zip(&marg_b).map(|(&x, &y)| x * y).sum();
    let denominator = n * n - chance;
    if denominator == 0 {
        return Ok(if agree == n { 1.0 } else { 0.0 });
    }
    // Single division of exact integer counts keeps rational kappas exact.
    let numerator = (n * agree) as i128 - chance as i128;
    Ok(numerator as f64 / denominator as f64)
}

/// Intersection-over-union of two `(x, y, w, h)` boxes. Boxes must have
/// positive extent; disjoint boxes score 0.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[2] > 0.0 && bx[3] > 0.0) {
            return Err(Error::data(format!("box {bx:?} has nonpositive extent")));
        }
    }
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return Ok(0.0);
    }
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    // Rounding in the overlap arithmetic can nudge identical boxes a few
    // ulps above 1; the true ratio never exceeds it.
    Ok((inter / union).min(1.0))
}

/// Mean IoU under greedy highest-first matching between two box sets.
/// Unmatched boxes score 0; the mean is over `max(|a|, |b|)` slots, and two
/// empty sets agree perfectly.
pub fn greedy_mean_iou(a: &[[f64; 4]], b: &[[f64; 4]]) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Ok(1.0);
    }
    let slots = a.len().max(b.len());
    let mut pairs = Vec::with_capacity(a.len() * b.len());
    for (i, &ba) in a.iter().enumerate() {
        for (j, &bb) in b.iter().enumerate() {
            pairs.push((iou(ba, bb)?, i, j));
        }
    }
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut total = 0.0;
    for (score, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            total += score;
        }
    }
    Ok(total / slots as f64)
}

/// Agreement numbers for one annotation round.
#[derive(Debug, Clone, Serialize)]
pub struct RoundAgreement {
    pub round: usize,
    /// Kappa over binary per-(sample, aspect) presence decisions.
    pub kappa_aspect: f64,
    /// Kappa over the four-way sentiment label per (sample, aspect).
    pub kappa_sentiment: f64,
    /// Mean greedy-matched IoU over paired images.
    pub mean_iou: f64,
    /// True when any statistic fell below the threshold.
    pub flagged: bool,
}

/// Computes per-round agreement between two annotators. Rounds pair two
/// annotation files sharing sample ids; images are paired by position.
pub fn agreement_report(
    rounds: &[(Vec<MultimodalSample>, Vec<MultimodalSample>)],
    threshold: f64,
) -> Result<Vec<RoundAgreement>> {
    let mut out = Vec::with_capacity(rounds.len());
    for (round, (ann_a, ann_b)) in rounds.iter().enumerate() {
        if ann_a.len() != ann_b.len() {
            return Err(Error::data(format!(
                "round {}: annotators cover {} vs {} samples",
                round + 1,
                ann_a.len(),
                ann_b.len()
            )));
        }
        let mut by_id: BTreeMap<&str, &MultimodalSample> =
            ann_b.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut presence_a = Vec::new();
        let mut presence_b = Vec::new();
        let mut label_a = Vec::new();
        let mut label_b = Vec::new();
        let mut ious = Vec::new();
        for sa in ann_a {
            let sb = by_id.remove(sa.id.as_str()).ok_or_else(|| {
                Error::data(format!(
                    "round {}: sample {} is missing from the second annotator",
                    round + 1,
                    sa.id
                ))
            })?;
            for aspect in AspectCategory::ALL {
                let la = sa.label(aspect);
                let lb = sb.label(aspect);
                presence_a.push(usize::from(la != SentimentLabel::None));
                presence_b.push(usize::from(lb != SentimentLabel::None));
                label_a.push(la.index());
                label_b.push(lb.index());
            }
            if sa.images.len() != sb.images.len() {
                return Err(Error::data(format!(
                    "round {}: sample {} has {} vs {} images",
                    round + 1,
                    sa.id,
                    sa.images.len(),
                    sb.images.len()
                )));
            }
            for (ia, ib) in sa.images.iter().zip(&sb.images) {
                let boxes_a: Vec<[f64; 4]> = ia.rois.iter().map(|r| r.bbox).collect();
                let boxes_b: Vec<[f64; 4]> = ib.rois.iter().map(|r| r.bbox).collect();
                ious.push(greedy_mean_iou(&boxes_a, &boxes_b)?);
            }
        }
        let mean_iou = if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        };
        let kappa_aspect = cohen_kappa(&presence_a, &presence_b)?;
        let kappa_sentiment = cohen_kappa(&label_a, &label_b)?;
        out.push(RoundAgreement {
            round: round + 1,
            kappa_aspect,
            kappa_sentiment,
            mean_iou,
            flagged: kappa_aspect < threshold
                || kappa_sentiment < threshold
                || mean_iou < threshold,
        });
    }
    Ok(out)
}
