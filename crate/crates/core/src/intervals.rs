//! One-dimensional interval algebra over frame indices: overlap geometry,
//! per-frame regression targets and their inverse, and proposal suppression.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Audio];

    pub fn index(self) -> usize {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" | "v" => Ok(Modality::Visual),
            "audio" | "a" => Ok(Modality::Audio),
            other => Err(Error::InvalidInput(format!("unknown modality {other:?}"))),
        }
    }
}

/// Half-open fake segment `[onset, offset)` in frame units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInterval")]
pub struct Interval {
    modality: Modality,
    onset: f64,
    offset: f64,
}

#[derive(Deserialize)]
struct RawInterval {
    modality: Modality,
    onset: f64,
    offset: f64,
}

impl TryFrom<RawInterval> for Interval {
    type Error = Error;

    fn try_from(raw: RawInterval) -> Result<Self> {
        Interval::new(raw.onset, raw.offset, raw.modality)
    }
}

impl Interval {
    pub fn new(onset: f64, offset: f64, modality: Modality) -> Result<Self> {
        if !(onset.is_finite() && offset.is_finite()) || onset < 0.0 || offset <= onset {
            return Err(Error::InvalidInterval { onset, offset });
        }
        Ok(Self { modality, onset, offset })
    }

    pub fn onset(&self) -> f64 {
        self.onset
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> f64 {
        self.offset - self.onset
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.onset + self.offset)
    }

    pub fn with_modality(self, modality: Modality) -> Self {
        Self { modality, ..self }
    }

    pub fn contains_frame(&self, j: f64) -> bool {
        self.onset <= j && j < self.offset
    }

    pub fn intersection_len(&self, other: &Interval) -> f64 {
        (self.offset.min(other.offset) - self.onset.max(other.onset)).max(0.0)
    }
}

/// Intersection over union of two intervals; modality is ignored.
pub fn iou_1d(a: &Interval, b: &Interval) -> f64 {
    let inter = a.intersection_len(b);
    inter / (a.len() + b.len() - inter)
}

/// Squared center distance over the squared length of the smallest
/// enclosing interval.
pub fn diou_penalty(a: &Interval, b: &Interval) -> f64 {
    let rho = a.center() - b.center();
    let kappa = a.offset.max(b.offset) - a.onset.min(b.onset);
    rho * rho / (kappa * kappa)
}

/// Per-frame localization target.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTarget {
    pub fake: bool,
    /// `j - onset`, non-negative on fake frames.
    pub d_start: f64,
    /// `j - offset`, non-positive on fake frames.
    pub d_end: f64,
}

impl FrameTarget {
    /// Interval this target encodes at frame `j`, if the frame is fake.
    pub fn interval_at(&self, j: usize) -> Option<(f64, f64)> {
        self.fake.then(|| (j as f64 - self.d_start, j as f64 - self.d_end))
    }
}

/// Per-modality target sequences, indexed by [`Modality::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    pub frames: usize,
    pub per_modality: [Vec<FrameTarget>; 2],
}

impl FrameTargets {
    pub fn modality(&self, m: Modality) -> &[FrameTarget] {
        &self.per_modality[m.index()]
    }

    /// Number of fake frames across both modalities.
    pub fn fake_count(&self) -> usize {
        self.per_modality.iter().flatten().filter(|t| t.fake).count()
    }
}

/// Checks that same-modality intervals are pairwise disjoint and lie inside
/// `[0, frames)`.
pub fn validate_interval_set(intervals: &[Interval], frames: usize) -> Result<()> {
    for m in Modality::ALL {
        let mut spans: Vec<&Interval> = intervals.iter().filter(|iv| iv.modality == m).collect();
        spans.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        for iv in &spans {
            if iv.offset > frames as f64 {
                return Err(Error::InvalidInput(format!(
                    "{m} interval [{}, {}) exceeds {frames} frames",
                    iv.onset, iv.offset
                )));
            }
        }
        for pair in spans.windows(2) {
            if pair[1].onset < pair[0].offset {
                return Err(Error::InvalidInput(format!(
                    "overlapping {m} intervals [{}, {}) and [{}, {})",
                    pair[0].onset, pair[0].offset, pair[1].onset, pair[1].offset
                )));
            }
        }
    }
    Ok(())
}

pub fn encode_frame_targets(intervals: &[Interval], frames: usize) -> Result<FrameTargets> {
    validate_interval_set(intervals, frames)?;
    let mut per_modality = [vec![FrameTarget::default(); frames], vec![FrameTarget::default(); frames]];
    for iv in intervals {
        let seq = &mut per_modality[iv.modality.index()];
        for (j, t) in seq.iter_mut().enumerate() {
            let jf = j as f64;
            if iv.contains_frame(jf) {
                *t = FrameTarget { fake: true, d_start: jf - iv.onset, d_end: jf - iv.offset };
            }
        }
    }
    Ok(FrameTargets { frames, per_modality })
}

/// Outcome of decoding a single frame prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrameDecode {
    BelowThreshold,
    /// Fake probability above threshold but decoded onset ≥ offset.
    Degenerate,
    Interval(Interval),
}

/// Decodes one frame: emits `[j - d_start, j - d_end)` when the fake
/// probability exceeds `threshold`. The onset is clamped at frame 0.
pub fn decode_frame(
    j: usize,
    a_hat: f64,
    d_start: f64,
    d_end: f64,
    threshold: f64,
    modality: Modality,
) -> FrameDecode {
    if !(a_hat > threshold) {
        return FrameDecode::BelowThreshold;
    }
    let onset = (j as f64 - d_start).max(0.0);
    let offset = j as f64 - d_end;
    match Interval::new(onset, offset, modality) {
        Ok(iv) => FrameDecode::Interval(iv),
        Err(_) => FrameDecode::Degenerate,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub above_threshold: usize,
    pub degenerate: usize,
}

/// Decodes a whole frame sequence into frame-level proposals, with the
/// offset additionally clamped to the sequence length.
pub fn decode_sequence(
    probs: &[f64],
    d_start: &[f64],
    d_end: &[f64],
    threshold: f64,
    modality: Modality,
) -> (Vec<Proposal>, DecodeStats) {
    let frames = probs.len();
    let mut stats = DecodeStats::default();
    let mut out = Vec::new();
    for j in 0..frames {
        match decode_frame(j, probs[j], d_start[j], d_end[j].max(j as f64 - frames as f64), threshold, modality) {
            FrameDecode::BelowThreshold => {}
            FrameDecode::Degenerate => {
                stats.above_threshold += 1;
                stats.degenerate += 1;
            }
            FrameDecode::Interval(iv) => {
                stats.above_threshold += 1;
                out.push(Proposal { interval: iv, confidence: probs[j].clamp(0.0, 1.0) });
            }
        }
    }
    (out, stats)
}

/// A scored candidate interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub interval: Interval,
    pub confidence: f64,
}

impl Proposal {
    pub fn new(interval: Interval, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidInput(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self { interval, confidence })
    }
}

/// Orders by descending confidence; ties keep their input order when used
/// with a stable sort.
pub fn by_confidence_desc(a: &Proposal, b: &Proposal) -> Ordering {
    b.confidence.total_cmp(&a.confidence)
}

/// Greedy non-maximum suppression. Geometry only: callers that want
/// per-modality suppression group proposals first.
pub fn merge_proposals(proposals: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(by_confidence_desc);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept.iter().all(|k| iou_1d(&k.interval, &p.interval) < iou_threshold) {
            kept.push(p);
        }
    }
    kept
}

/// Union of overlapping or touching intervals, ignoring modality. The merged
/// intervals carry `label`.
pub fn union_intervals(intervals: &[Interval], label: Modality) -> Vec<Interval> {
    let mut spans: Vec<(f64, f64)> = intervals.iter().map(|iv| (iv.onset, iv.offset)).collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
        .into_iter()
        .map(|(s, e)| Interval { modality: label, onset: s, offset: e })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(s: f64, e: f64) -> Interval {
        Interval::new(s, e, Modality::Visual).unwrap()
    }

    #[test]
    fn rejects_invalid_intervals() {
        assert!(Interval::new(5.0, 5.0, Modality::Audio).is_err());
        assert!(Interval::new(5.0, 4.0, Modality::Audio).is_err());
        assert!(Interval::new(-1.0, 4.0, Modality::Audio).is_err());
        assert!(serde_json::from_str::<Interval>(r#"{"modality":"audio","onset":3,"offset":1}"#).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou_1d(&v(0.0, 10.0), &v(0.0, 10.0)), 1.0);
        assert_eq!(iou_1d(&v(0.0, 10.0), &v(10.0, 20.0)), 0.0);
        assert!((iou_1d(&v(0.0, 10.0), &v(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn diou_examples() {
        assert_eq!(diou_penalty(&v(0.0, 10.0), &v(0.0, 10.0)), 0.0);
        // centers 1 and 9, enclosing length 10
        assert!((diou_penalty(&v(0.0, 2.0), &v(8.0, 10.0)) - 0.64).abs() < 1e-15);
        // centers 2 and 4, enclosing length 6
        assert!((diou_penalty(&v(0.0, 4.0), &v(2.0, 6.0)) - 4.0 / 36.0).abs() < 1e-15);
    }

    #[test]
    fn encode_examples() {
        let t = encode_frame_targets(&[v(7.0, 15.0)], 20).unwrap();
        assert_eq!(t.modality(Modality::Visual)[10], FrameTarget { fake: true, d_start: 3.0, d_end: -5.0 });
        assert!(t.modality(Modality::Audio).iter().all(|x| *x == FrameTarget::default()));
        assert_eq!(t.modality(Modality::Visual)[15], FrameTarget::default());
        assert_eq!(t.fake_count(), 8);

        let empty = encode_frame_targets(&[], 5).unwrap();
        assert!(empty.per_modality.iter().flatten().all(|x| *x == FrameTarget::default()));

        let f = 12;
        let full = encode_frame_targets(&[v(0.0, f as f64)], f).unwrap();
        assert_eq!(full.modality(Modality::Visual)[0], FrameTarget { fake: true, d_start: 0.0, d_end: -(f as f64) });
    }

    #[test]
    fn encode_rejects_overlap_and_out_of_range() {
        assert!(encode_frame_targets(&[v(0.0, 5.0), v(4.0, 8.0)], 10).is_err());
        assert!(encode_frame_targets(&[v(5.0, 11.0)], 10).is_err());
        // same span in different modalities is fine
        let a = Interval::new(0.0, 5.0, Modality::Audio).unwrap();
        assert!(encode_frame_targets(&[v(0.0, 5.0), a], 10).is_ok());
        // adjacency is not overlap under half-open semantics
        assert!(encode_frame_targets(&[v(0.0, 5.0), v(5.0, 8.0)], 10).is_ok());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_frame(10, 0.6, 3.0, -5.0, 0.5, Modality::Visual), FrameDecode::Interval(v(7.0, 15.0)));
        assert_eq!(decode_frame(10, 0.4, 3.0, -5.0, 0.5, Modality::Visual), FrameDecode::BelowThreshold);
        assert_eq!(decode_frame(10, 0.5, 3.0, -5.0, 0.5, Modality::Visual), FrameDecode::BelowThreshold);
        assert_eq!(decode_frame(10, 0.9, -2.0, 3.0, 0.5, Modality::Visual), FrameDecode::Degenerate);
    }

    #[test]
    fn decode_sequence_counts_degenerate() {
        let (props, stats) =
            decode_sequence(&[0.9, 0.2, 0.8], &[0.0, 0.0, 5.0], &[-2.0, -1.0, 4.0], 0.5, Modality::Audio);
        assert_eq!(props.len(), 1);
        assert_eq!(stats, DecodeStats { above_threshold: 2, degenerate: 1 });
        // offset clamped to sequence length
        let (props, _) = decode_sequence(&[0.9, 0.9], &[0.0, 1.0], &[-10.0, -10.0], 0.5, Modality::Audio);
        assert!(props.iter().all(|p| p.interval.offset() == 2.0));
    }

    #[test]
    fn nms_examples() {
        let p = |s, e, c| Proposal::new(v(s, e), c).unwrap();
        let kept = merge_proposals(&[p(0.0, 10.0, 0.8), p(0.0, 10.0, 0.9)], 0.5);
        assert_eq!(kept, vec![p(0.0, 10.0, 0.9)]);
        let kept = merge_proposals(&[p(0.0, 10.0, 0.8), p(20.0, 30.0, 0.9)], 0.5);
        assert_eq!(kept, vec![p(20.0, 30.0, 0.9), p(0.0, 10.0, 0.8)]);
        assert!(merge_proposals(&[], 0.5).is_empty());
        assert!(Proposal::new(v(0.0, 1.0), 1.5).is_err());
    }

    /// Reference suppression: a proposal survives iff no higher-ranked
    /// survivor overlaps it, evaluated by recursion over rank prefixes.
    fn nms_reference(props: &[Proposal], thr: f64) -> Vec<Proposal> {
        let mut order: Vec<usize> = (0..props.len()).collect();
        order.sort_by(|&a, &b| props[b].confidence.total_cmp(&props[a].confidence).then(a.cmp(&b)));
        let mut alive = vec![false; props.len()];
        for (rank, &i) in order.iter().enumerate() {
            let suppressed = order[..rank]
                .iter()
                .any(|&k| alive[k] && iou_1d(&props[k].interval, &props[i].interval) >= thr);
            alive[i] = !suppressed;
        }
        order.into_iter().filter(|&i| alive[i]).map(|i| props[i]).collect()
    }

    #[test]
    fn union_merges_touching() {
        let a = Interval::new(3.0, 6.0, Modality::Audio).unwrap();
        let merged = union_intervals(&[v(0.0, 4.0), a, v(6.0, 7.0), v(9.0, 10.0)], Modality::Visual);
        assert_eq!(merged, vec![v(0.0, 7.0), v(9.0, 10.0)]);
    }

    fn arb_interval() -> impl Strategy<Value = Interval> {
        (0u32..50, 1u32..30).prop_map(|(s, l)| v(s as f64, (s + l) as f64))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_interval(), b in arb_interval()) {
            let x = iou_1d(&a, &b);
            prop_assert_eq!(x, iou_1d(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x == 1.0, a == b);
        }

        #[test]
        fn diou_symmetric_bounded(a in arb_interval(), b in arb_interval()) {
            let x = diou_penalty(&a, &b);
            prop_assert_eq!(x, diou_penalty(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x == 0.0, a.center() == b.center());
        }

        #[test]
        fn nms_matches_reference(
            raw in proptest::collection::vec((arb_interval(), 0u32..=100), 0..12),
            thr in 0.1f64..=1.0,
        ) {
            let props: Vec<Proposal> = raw.into_iter().map(|(iv, c)| Proposal::new(iv, c as f64 / 100.0).unwrap()).collect();
            let kept = merge_proposals(&props, thr);
            prop_assert_eq!(&kept, &nms_reference(&props, thr));
            for w in kept.windows(2) {
                prop_assert!(w[0].confidence >= w[1].confidence);
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(iou_1d(&a.interval, &b.interval) < thr);
                }
            }
        }
    }
}
