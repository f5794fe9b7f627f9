//! Localization metrics (AP@IoU, AR@n) and detection metrics (AUC, AP,
//! accuracy).
//!
//! Matching is geometric within a record; the modality a proposal or ground
//! truth carries is ignored here. [`modality_view`] and [`joint_view`] build
//! the per-modality and cross-modality record sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervals::{by_confidence_desc, iou_1d, merge_proposals, union_intervals, Interval, Modality, Proposal};

/// IoU thresholds recall is averaged over.
pub const AR_IOU_GRID: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// IoU for merging visual and audio proposals in the joint view.
pub const JOINT_NMS_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    /// Descending confidence.
    pub proposals: Vec<Proposal>,
    pub gt: Vec<Interval>,
    pub video_score: f64,
    pub video_label: bool,
}

impl EvalRecord {
    /// Sorts the proposals (stably) by descending confidence.
    pub fn new(id: impl Into<String>, mut proposals: Vec<Proposal>, gt: Vec<Interval>, video_score: f64, video_label: bool) -> Self {
        proposals.sort_by(by_confidence_desc);
        Self { id: id.into(), proposals, gt, video_score, video_label }
    }
}

/// How AP treats multiple records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApPooling {
    /// One ranked list over all records.
    #[default]
    Global,
    /// AP per record with ground truth, then the mean.
    PerVideo,
}

/// Area under the precision envelope given TP flags in rank order.
fn envelope_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut prec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    tp.iter().zip(&prec).filter(|(t, _)| **t).map(|(_, p)| p).fold(0.0, |a, b| a + b) / n_gt as f64
}

/// Greedy matching of ranked `(record, proposal)` pairs: each proposal takes
/// the unmatched ground truth of its record with the highest IoU ≥ `thr`.
fn greedy_tp(records: &[EvalRecord], ranked: &[(usize, usize)], thr: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.gt.len()]).collect();
    ranked
        .iter()
        .map(|&(ri, pi)| {
            let rec = &records[ri];
            let prop = &rec.proposals[pi].interval;
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in rec.gt.iter().enumerate() {
                if used[ri][gi] {
                    continue;
                }
                let iou = iou_1d(prop, g);
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                used[ri][gi] = true;
            }
            best.is_some()
        })
        .collect()
}

fn check_iou_threshold(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("IoU threshold {p} outside (0, 1]")));
    }
    Ok(())
}

fn ap_global(records: &[EvalRecord], p: f64) -> Option<f64> {
    let n_gt: usize = records.iter().map(|r| r.gt.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize)> =
        records.iter().enumerate().flat_map(|(ri, r)| (0..r.proposals.len()).map(move |pi| (ri, pi))).collect();
    ranked.sort_by(|a, b| by_confidence_desc(&records[a.0].proposals[a.1], &records[b.0].proposals[b.1]));
    Some(envelope_ap(&greedy_tp(records, &ranked, p), n_gt))
}

/// Average precision at IoU threshold `p`, pooling proposals over records.
pub fn ap_at_iou(records: &[EvalRecord], p: f64) -> Result<f64> {
    ap_at_iou_pooled(records, p, ApPooling::Global)
}

pub fn ap_at_iou_pooled(records: &[EvalRecord], p: f64, pooling: ApPooling) -> Result<f64> {
    check_iou_threshold(p)?;
    let na = Error::NotApplicable("AP is undefined without ground-truth intervals");
    match pooling {
        ApPooling::Global => ap_global(records, p).ok_or(na),
        ApPooling::PerVideo => {
            let aps: Vec<f64> = records.iter().filter_map(|r| ap_global(std::slice::from_ref(r), p)).collect();
            if aps.is_empty() {
                return Err(na);
            }
            Ok(aps.iter().sum::<f64>() / aps.len() as f64)
        }
    }
}

/// Recall with at most `n` proposals per record, averaged over
/// [`AR_IOU_GRID`] and then over records with ground truth. A ground truth
/// counts as recalled when any kept proposal reaches the threshold.
pub fn ar_at_n(records: &[EvalRecord], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("AR proposal budget must be at least 1".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in records.iter().filter(|r| !r.gt.is_empty()) {
        let best: Vec<f64> = r
            .gt
            .iter()
            .map(|g| r.proposals.iter().take(n).map(|p| iou_1d(&p.interval, g)).fold(0.0, f64::max))
            .collect();
        let recall: f64 = AR_IOU_GRID
            .iter()
            .map(|&t| best.iter().filter(|&&b| b >= t).count() as f64 / best.len() as f64)
            .sum::<f64>()
            / AR_IOU_GRID.len() as f64;
        sum += recall;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NotApplicable("AR is undefined without ground-truth intervals"));
    }
    Ok(sum / count as f64)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    Ok(())
}

/// Area under the ROC curve via average ranks; ties count one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::NotApplicable("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision of a score ranking: area under the precision envelope,
/// with tied scores entering as one operating point.
pub fn binary_ap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::NotApplicable("AP needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // (recall, precision) after each tie group
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        points.push((tp as f64 / pos as f64, tp as f64 / seen as f64));
        i = j + 1;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[k].0 - prev_recall) * envelope;
        prev_recall = points[k].0;
    }
    Ok(ap)
}

/// Fraction of samples whose thresholded score (`score ≥ threshold` means
/// fake) matches the label.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_scores(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::NotApplicable("accuracy of an empty set"));
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s >= threshold) == l).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Restricts each record to one modality's proposals and ground truth.
pub fn modality_view(records: &[EvalRecord], m: Modality) -> Vec<EvalRecord> {
    records
        .iter()
        .map(|r| {
            let proposals: Vec<Proposal> = r.proposals.iter().filter(|p| p.interval.modality() == m).copied().collect();
            let gt: Vec<Interval> = r.gt.iter().filter(|g| g.modality() == m).copied().collect();
            let score = proposals.first().map_or(0.0, |p| p.confidence);
            EvalRecord::new(r.id.clone(), proposals, gt.clone(), score, !gt.is_empty())
        })
        .collect()
}

/// Cross-modality view: ground truth is the union of both modalities'
/// intervals, and the pooled proposals go through one more suppression pass.
pub fn joint_view(records: &[EvalRecord]) -> Vec<EvalRecord> {
    records
        .iter()
        .map(|r| {
            let gt = union_intervals(&r.gt, Modality::Visual);
            let proposals: Vec<Proposal> = merge_proposals(&r.proposals, JOINT_NMS_IOU)
                .into_iter()
                .map(|p| Proposal { interval: p.interval.with_modality(Modality::Visual), ..p })
                .collect();
            EvalRecord::new(r.id.clone(), proposals, gt, r.video_score, r.video_label)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// `(IoU threshold, AP)`; `None` when not applicable.
    pub ap: Vec<(f64, Option<f64>)>,
    /// `(budget, AR)`.
    pub ar: Vec<(usize, Option<f64>)>,
}

pub const AP_THRESHOLDS: [f64; 3] = [0.5, 0.75, 0.95];
pub const AR_BUDGETS: [usize; 4] = [100, 50, 20, 10];

impl LocalizationReport {
    pub fn compute(records: &[EvalRecord], pooling: ApPooling) -> Self {
        Self {
            ap: AP_THRESHOLDS.iter().map(|&p| (p, ap_at_iou_pooled(records, p, pooling).ok())).collect(),
            ar: AR_BUDGETS.iter().map(|&n| (n, ar_at_n(records, n).ok())).collect(),
        }
    }

    pub fn ap(&self, p: f64) -> Option<f64> {
        self.ap.iter().find(|(t, _)| (t - p).abs() < 1e-12).and_then(|x| x.1)
    }

    pub fn ar(&self, n: usize) -> Option<f64> {
        self.ar.iter().find(|(b, _)| *b == n).and_then(|x| x.1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub acc: Option<f64>,
}

impl DetectionReport {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Self {
        Self {
            auc: roc_auc(scores, labels).ok(),
            ap: binary_ap(scores, labels).ok(),
            acc: accuracy(scores, labels, 0.5).ok(),
        }
    }
}
