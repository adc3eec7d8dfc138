//! Detection scoring: one-to-one matching against the ground truth, PCK,
//! per-class precision / recall / F1, micro AP and PCK curves.
//!
//! Ratios are computed exactly on integer counts and converted to `f64` at
//! the end; empty denominators give 0.

use std::ops::AddAssign;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::anatomy::{Branch, ExamAnnotation, KeypointAnnotation, Label};
use crate::decode::{to_millimeters, DetectedKeypoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl AddAssign for ClassCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

/// Counts of one branch. The top-level counts follow the detection view
/// (a matched pair with the wrong label is a false positive); `per_class`
/// holds the per-label confusion used by the macro scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BranchCounts {
    #[serde(flatten)]
    pub overall: ClassCounts,
    pub normal: ClassCounts,
    pub degenerative: ClassCounts,
}

impl BranchCounts {
    pub fn class(&self, label: Label) -> &ClassCounts {
        match label {
            Label::Normal => &self.normal,
            Label::Degenerative => &self.degenerative,
        }
    }

    fn class_mut(&mut self, label: Label) -> &mut ClassCounts {
        match label {
            Label::Normal => &mut self.normal,
            Label::Degenerative => &mut self.degenerative,
        }
    }
}

impl AddAssign for BranchCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.overall += rhs.overall;
        self.normal += rhs.normal;
        self.degenerative += rhs.degenerative;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub ground_truth: KeypointAnnotation,
    pub detection: DetectedKeypoint,
    pub distance_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gt: Vec<KeypointAnnotation>,
    pub disc: BranchCounts,
    pub vertebra: BranchCounts,
}

impl MatchResult {
    pub fn counts(&self, branch: Branch) -> &BranchCounts {
        match branch {
            Branch::Disc => &self.disc,
            Branch::Vertebra => &self.vertebra,
        }
    }

    fn counts_mut(&mut self, branch: Branch) -> &mut BranchCounts {
        match branch {
            Branch::Disc => &mut self.disc,
            Branch::Vertebra => &mut self.vertebra,
        }
    }

    /// Counts of both branches added together.
    pub fn combined(&self) -> BranchCounts {
        let mut c = self.disc;
        c += self.vertebra;
        c
    }
}

/// Greedy nearest-first one-to-one matching within each branch. Distances
/// are measured in millimetres (`spacing` mm/px); pairs farther than
/// `threshold_mm` are never matched. Unmatched detections are not counted.
pub fn match_detections(
    detections: &[DetectedKeypoint],
    ground_truth: &ExamAnnotation,
    spacing: f64,
    threshold_mm: f64,
) -> MatchResult {
    let mut result = MatchResult::default();
    for branch in Branch::ALL {
        let gts: Vec<&KeypointAnnotation> = ground_truth.branch(branch).collect();
        let dets: Vec<&DetectedKeypoint> = detections.iter().filter(|d| d.branch == branch).collect();
        let mut candidates = Vec::new();
        for (gi, g) in gts.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                let dist = to_millimeters(g.position.distance(d.position), spacing);
                if dist <= threshold_mm {
                    candidates.push((dist, gi, di));
                }
            }
        }
        // Stable: equal distances resolve by ground-truth then detection order.
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut gt_used = vec![false; gts.len()];
        let mut det_used = vec![false; dets.len()];
        for (dist, gi, di) in candidates {
            if gt_used[gi] || det_used[di] {
                continue;
            }
            gt_used[gi] = true;
            det_used[di] = true;
            let (g, d) = (gts[gi], dets[di]);
            let counts = result.counts_mut(branch);
            if g.label == d.label {
                counts.overall.tp += 1;
                counts.class_mut(g.label).tp += 1;
            } else {
                counts.overall.fp += 1;
                counts.class_mut(d.label).fp += 1;
                counts.class_mut(g.label).fn_ += 1;
            }
            result.pairs.push(MatchedPair {
                ground_truth: *g,
                detection: *d,
                distance_mm: dist,
            });
        }
        for (gi, g) in gts.iter().enumerate() {
            if !gt_used[gi] {
                let counts = result.counts_mut(branch);
                counts.overall.fn_ += 1;
                counts.class_mut(g.label).fn_ += 1;
                result.unmatched_gt.push(**g);
            }
        }
    }
    result
}

fn ratio(num: u64, den: u64) -> Ratio<u64> {
    if den == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(num, den)
    }
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `(TP + FP) / (TP + FP + FN)`: the fraction of ground truths with a
/// detection within the threshold, regardless of label.
pub fn pck(counts: &ClassCounts) -> f64 {
    to_f64(ratio(counts.tp + counts.fp, counts.tp + counts.fp + counts.fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn precision_ratio(c: &ClassCounts) -> Ratio<u64> {
    ratio(c.tp, c.tp + c.fp)
}

fn recall_ratio(c: &ClassCounts) -> Ratio<u64> {
    ratio(c.tp, c.tp + c.fn_)
}

fn f1_ratio(c: &ClassCounts) -> Ratio<u64> {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

fn mean2(a: Ratio<u64>, b: Ratio<u64>) -> Ratio<u64> {
    (a + b) / 2
}

impl ClassMetrics {
    pub fn from_counts(c: &ClassCounts) -> Self {
        ClassMetrics {
            precision: to_f64(precision_ratio(c)),
            recall: to_f64(recall_ratio(c)),
            f1: to_f64(f1_ratio(c)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub normal: ClassMetrics,
    pub degenerative: ClassMetrics,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn macro_f1_ratio(counts: &BranchCounts) -> Ratio<u64> {
    mean2(f1_ratio(&counts.normal), f1_ratio(&counts.degenerative))
}

/// Per-label scores and their unweighted means, averaged exactly before
/// rounding.
pub fn classification_metrics(counts: &BranchCounts) -> ClassificationMetrics {
    let (n, d) = (&counts.normal, &counts.degenerative);
    ClassificationMetrics {
        normal: ClassMetrics::from_counts(n),
        degenerative: ClassMetrics::from_counts(d),
        macro_precision: to_f64(mean2(precision_ratio(n), precision_ratio(d))),
        macro_recall: to_f64(mean2(recall_ratio(n), recall_ratio(d))),
        macro_f1: to_f64(macro_f1_ratio(counts)),
    }
}

/// `sum TP / (sum TP + sum FP)` over all given counts.
pub fn micro_ap_score<'a>(counts: impl IntoIterator<Item = &'a ClassCounts>) -> f64 {
    let (tp, fp) = counts.into_iter().fold((0, 0), |(tp, fp), c| (tp + c.tp, fp + c.fp));
    to_f64(ratio(tp, tp + fp))
}

/// Detections of one exam together with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamDetections {
    pub exam_id: String,
    pub detections: Vec<DetectedKeypoint>,
    pub ground_truth: ExamAnnotation,
    /// mm per pixel of the grid the positions live on.
    pub spacing: f64,
}

/// Counts of every exam matched at one threshold, summed.
pub fn aggregate_matches(exams: &[ExamDetections], threshold_mm: f64) -> MatchResult {
    let mut total = MatchResult::default();
    for e in exams {
        let m = match_detections(&e.detections, &e.ground_truth, e.spacing, threshold_mm);
        total.disc += m.disc;
        total.vertebra += m.vertebra;
        total.pairs.extend(m.pairs);
        total.unmatched_gt.extend(m.unmatched_gt);
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckPoint {
    pub threshold_mm: f64,
    pub disc: f64,
    pub vertebra: f64,
    pub overall: f64,
}

pub fn pck_curve(exams: &[ExamDetections], thresholds_mm: &[f64]) -> Vec<PckPoint> {
    thresholds_mm
        .iter()
        .map(|&t| {
            let m = aggregate_matches(exams, t);
            PckPoint {
                threshold_mm: t,
                disc: pck(&m.disc.overall),
                vertebra: pck(&m.vertebra.overall),
                overall: pck(&m.combined().overall),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub counts: BranchCounts,
    pub pck: f64,
    pub classification: ClassificationMetrics,
}

impl BranchReport {
    fn new(counts: BranchCounts) -> Self {
        BranchReport {
            counts,
            pck: pck(&counts.overall),
            classification: classification_metrics(&counts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_exams: usize,
    pub threshold_mm: f64,
    pub disc: BranchReport,
    pub vertebra: BranchReport,
    /// PCK over all ten keypoints.
    pub overall_pck: f64,
    /// Mean of the disc and vertebra macro F1.
    pub overall_macro_f1: f64,
    pub micro_ap: f64,
    pub pck_curve: Vec<PckPoint>,
}

/// Thresholds 1, 2, ..., 10 mm.
pub fn default_curve_thresholds() -> Vec<f64> {
    (1..=10).map(f64::from).collect()
}

impl MetricsReport {
    pub fn from_exams(exams: &[ExamDetections], threshold_mm: f64, curve_thresholds: &[f64]) -> Self {
        let m = aggregate_matches(exams, threshold_mm);
        let disc = BranchReport::new(m.disc);
        let vertebra = BranchReport::new(m.vertebra);
        MetricsReport {
            n_exams: exams.len(),
            threshold_mm,
            overall_pck: pck(&m.combined().overall),
            overall_macro_f1: to_f64(mean2(macro_f1_ratio(&m.disc), macro_f1_ratio(&m.vertebra))),
            micro_ap: micro_ap_score([&m.disc.overall, &m.vertebra.overall]),
            disc,
            vertebra,
            pck_curve: pck_curve(exams, curve_thresholds),
        }
    }

    pub fn branch(&self, branch: Branch) -> &BranchReport {
        match branch {
            Branch::Disc => &self.disc,
            Branch::Vertebra => &self.vertebra,
        }
    }

    /// Flat `metric,value` rows for CSV output.
    pub fn csv_rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("n_exams".to_owned(), self.n_exams as f64),
            ("threshold_mm".to_owned(), self.threshold_mm),
            ("overall_pck".to_owned(), self.overall_pck),
            ("overall_macro_f1".to_owned(), self.overall_macro_f1),
            ("micro_ap".to_owned(), self.micro_ap),
        ];
        for b in Branch::ALL {
            let r = self.branch(b);
            let n = b.name();
            rows.push((format!("{n}_pck"), r.pck));
            for (label, m) in [
                (Label::Normal, r.classification.normal),
                (Label::Degenerative, r.classification.degenerative),
            ] {
                let l = label.name();
                rows.push((format!("{n}_{l}_precision"), m.precision));
                rows.push((format!("{n}_{l}_recall"), m.recall));
                rows.push((format!("{n}_{l}_f1"), m.f1));
            }
            rows.push((format!("{n}_macro_precision"), r.classification.macro_precision));
            rows.push((format!("{n}_macro_recall"), r.classification.macro_recall));
            rows.push((format!("{n}_macro_f1"), r.classification.macro_f1));
        }
        for p in &self.pck_curve {
            rows.push((format!("pck_{}mm", p.threshold_mm), p.overall));
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{Point, Structure};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gt(structure: Structure, row: f64, col: f64, label: Label) -> KeypointAnnotation {
        KeypointAnnotation::new(structure, Point::new(row, col), label)
    }

    fn det(branch: Branch, row: f64, col: f64, label: Label) -> DetectedKeypoint {
        DetectedKeypoint {
            branch,
            position: Point::new(row, col),
            label,
            score: 1.0,
        }
    }

    fn ann(keypoints: Vec<KeypointAnnotation>) -> ExamAnnotation {
        ExamAnnotation {
            exam_id: String::new(),
            keypoints,
        }
    }

    #[test]
    fn exact_detection_is_tp() {
        let a = ann(vec![gt(Structure::D1, 10.0, 10.0, Label::Normal)]);
        let m = match_detections(&[det(Branch::Disc, 10.0, 10.0, Label::Normal)], &a, 1.0, 6.0);
        assert_eq!(m.disc.overall, ClassCounts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(m.pairs[0].distance_mm, 0.0);
    }

    #[test]
    fn beyond_threshold_is_fn() {
        let a = ann(vec![gt(Structure::V2, 10.0, 10.0, Label::Normal)]);
        let m = match_detections(&[det(Branch::Vertebra, 17.0, 10.0, Label::Normal)], &a, 1.0, 6.0);
        assert!(m.pairs.is_empty());
        assert_eq!(m.vertebra.overall, ClassCounts { tp: 0, fp: 0, fn_: 1 });
    }

    #[test]
    fn nearest_detection_wins() {
        let a = ann(vec![gt(Structure::D1, 10.0, 10.0, Label::Normal)]);
        let dets = [
            det(Branch::Disc, 13.0, 10.0, Label::Degenerative),
            det(Branch::Disc, 11.0, 10.0, Label::Normal),
        ];
        let m = match_detections(&dets, &a, 1.0, 6.0);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].detection.position, Point::new(11.0, 10.0));
        assert_eq!(m.disc.overall.tp, 1);
    }

    #[test]
    fn branches_do_not_cross_match() {
        let a = ann(vec![gt(Structure::D1, 10.0, 10.0, Label::Normal)]);
        let m = match_detections(&[det(Branch::Vertebra, 10.0, 10.0, Label::Normal)], &a, 1.0, 6.0);
        assert_eq!(m.disc.overall.fn_, 1);
        assert_eq!(m.vertebra.overall, ClassCounts::default());
    }

    #[test]
    fn misclassified_pair_counts() {
        let a = ann(vec![gt(Structure::D1, 10.0, 10.0, Label::Normal)]);
        let m = match_detections(&[det(Branch::Disc, 10.0, 10.0, Label::Degenerative)], &a, 1.0, 6.0);
        assert_eq!(m.disc.overall, ClassCounts { tp: 0, fp: 1, fn_: 0 });
        assert_eq!(m.disc.normal, ClassCounts { tp: 0, fp: 0, fn_: 1 });
        assert_eq!(m.disc.degenerative, ClassCounts { tp: 0, fp: 1, fn_: 0 });
        assert_eq!(pck(&m.disc.overall), 1.0);
    }

    #[test]
    fn spacing_scales_distance() {
        let a = ann(vec![gt(Structure::D1, 10.0, 10.0, Label::Normal)]);
        let d = [det(Branch::Disc, 10.0, 23.714, Label::Normal)];
        assert_eq!(match_detections(&d, &a, 0.4375, 6.0).disc.overall.tp, 1);
        assert_eq!(match_detections(&d, &a, 0.5, 6.0).disc.overall.tp, 0);
    }

    #[test]
    fn pck_values() {
        assert_relative_eq!(pck(&ClassCounts { tp: 8, fp: 1, fn_: 1 }), 0.9);
        assert_eq!(pck(&ClassCounts { tp: 9, fp: 1, fn_: 0 }), 1.0);
        assert_eq!(pck(&ClassCounts::default()), 0.0);
    }

    #[test]
    fn macro_f1_hand_example() {
        let counts = BranchCounts {
            overall: ClassCounts::default(),
            normal: ClassCounts { tp: 3, fp: 1, fn_: 1 },
            degenerative: ClassCounts { tp: 4, fp: 0, fn_: 1 },
        };
        let m = classification_metrics(&counts);
        assert_relative_eq!(m.normal.f1, 0.75, epsilon = 1e-15);
        assert_relative_eq!(m.degenerative.f1, 8.0 / 9.0, epsilon = 1e-15);
        assert_relative_eq!(m.macro_f1, (0.75 + 8.0 / 9.0) / 2.0, epsilon = 1e-15);
        assert!((m.macro_f1 - 0.8194).abs() < 1e-4);
    }

    #[test]
    fn zero_detections_give_zero_metrics() {
        let a = ann((0..5).map(|l| gt(Structure::of(Branch::Disc, l), 10.0 * l as f64, 0.0, Label::Normal)).collect());
        let m = match_detections(&[], &a, 1.0, 6.0);
        let c = classification_metrics(&m.disc);
        assert_eq!(c.normal, ClassMetrics::default());
        assert_eq!(c.macro_f1, 0.0);
        assert_eq!(m.disc.overall.fn_, 5);
    }

    #[test]
    fn micro_ap_value() {
        let a = ClassCounts { tp: 4, fp: 1, fn_: 3 };
        let b = ClassCounts { tp: 3, fp: 2, fn_: 0 };
        assert_relative_eq!(micro_ap_score([&a, &b]), 0.7);
        assert_eq!(micro_ap_score([&ClassCounts { tp: 5, fp: 0, fn_: 0 }]), 1.0);
    }

    fn full_exam(offset_px: f64) -> ExamDetections {
        let keypoints: Vec<_> = Structure::ALL
            .iter()
            .enumerate()
            .map(|(i, &s)| gt(s, 20.0 * i as f64, 50.0, if i % 3 == 0 { Label::Degenerative } else { Label::Normal }))
            .collect();
        let detections = keypoints
            .iter()
            .map(|k| det(k.structure.branch(), k.position.row, k.position.col + offset_px, k.label))
            .collect();
        ExamDetections {
            exam_id: "x".into(),
            detections,
            ground_truth: ann(keypoints),
            spacing: 1.0,
        }
    }

    #[test]
    fn perfect_report() {
        let r = MetricsReport::from_exams(&[full_exam(0.0)], 6.0, &default_curve_thresholds());
        assert_eq!(r.overall_pck, 1.0);
        assert_eq!(r.overall_macro_f1, 1.0);
        assert_eq!(r.micro_ap, 1.0);
        assert_eq!(r.disc.classification.normal, ClassMetrics { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert!(r.pck_curve.iter().all(|p| p.overall == 1.0));
        assert_eq!(r.csv_rows().len(), 5 + 2 * 10 + 10);
    }

    #[test]
    fn curve_steps_at_offset() {
        let curve = pck_curve(&[full_exam(5.0)], &default_curve_thresholds());
        for p in curve {
            assert_eq!(p.overall, if p.threshold_mm < 5.0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn report_serializes_fn_field() {
        let r = MetricsReport::from_exams(&[full_exam(0.0)], 6.0, &[6.0]);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["disc"]["counts"]["fn"], 0);
        assert_eq!(json["disc"]["counts"]["tp"], 5);
        assert_eq!(json["vertebra"]["counts"]["normal"]["tp"], 3);
    }

    fn arb_exam() -> impl Strategy<Value = ExamDetections> {
        (
            proptest::collection::vec((-12.0f64..12.0, -12.0f64..12.0, any::<bool>(), any::<bool>()), 10),
            0usize..=5,
            0usize..=5,
        )
            .prop_map(|(jitter, nd, nv)| {
                let mut e = full_exam(0.0);
                for (i, k) in e.ground_truth.keypoints.iter_mut().enumerate() {
                    k.label = if jitter[i].2 { Label::Degenerative } else { Label::Normal };
                }
                let mut kept = [0, 0];
                e.detections = e
                    .detections
                    .iter()
                    .enumerate()
                    .filter_map(|(i, d)| {
                        let b = d.branch as usize;
                        kept[b] += 1;
                        let limit = if d.branch == Branch::Disc { nd } else { nv };
                        (kept[b] <= limit).then(|| DetectedKeypoint {
                            position: Point::new(d.position.row + jitter[i].0, d.position.col + jitter[i].1),
                            label: if jitter[i].3 { Label::Degenerative } else { Label::Normal },
                            ..*d
                        })
                    })
                    .collect();
                e
            })
    }

    proptest! {
        #[test]
        fn curve_is_monotone(exams in proptest::collection::vec(arb_exam(), 1..4)) {
            let curve = pck_curve(&exams, &default_curve_thresholds());
            for w in curve.windows(2) {
                prop_assert!(w[1].overall >= w[0].overall);
                prop_assert!(w[1].disc >= w[0].disc && w[1].vertebra >= w[0].vertebra);
            }
        }

        #[test]
        fn count_algebra(e in arb_exam(), threshold in 0.5f64..15.0) {
            let m = match_detections(&e.detections, &e.ground_truth, e.spacing, threshold);
            for b in Branch::ALL {
                let c = m.counts(b);
                prop_assert_eq!(c.overall.tp + c.overall.fp + c.overall.fn_, 5);
                let n_pairs = m.pairs.iter().filter(|p| p.ground_truth.structure.branch() == b).count() as u64;
                prop_assert_eq!(c.overall.tp + c.overall.fp, n_pairs);
                prop_assert_eq!(pck(&c.overall) == 1.0, c.overall.fn_ == 0);
                // Every ground truth lands in exactly one per-class bucket.
                prop_assert_eq!(c.normal.tp + c.normal.fn_ + c.degenerative.tp + c.degenerative.fn_, 5);
                let r = classification_metrics(c);
                for cm in [r.normal, r.degenerative] {
                    prop_assert!((0.0..=1.0).contains(&cm.f1));
                    if cm.precision + cm.recall > 0.0 {
                        let h = 2.0 * cm.precision * cm.recall / (cm.precision + cm.recall);
                        prop_assert!((h - cm.f1).abs() < 1e-12);
                    }
                }
            }
            // One-to-one.
            let mut seen = std::collections::HashSet::new();
            for p in &m.pairs {
                prop_assert!(seen.insert(p.ground_truth.structure));
            }
        }
    }
}
