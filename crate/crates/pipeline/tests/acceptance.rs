//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a gating criterion fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 1 4 7`.
//! Criteria 8 to 10 train the desk profile several times and take over an
//! hour on one CPU core.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array3, Array4, Axis};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spine_core::decode::{decode_outputs, hough_vote};
use spine_core::encoding::{encode_exam_targets, encode_targets, EncodingSpec, HeatmapTarget, TargetMaps};
use spine_core::ingest::{phantom_annotation, PhantomSpec};
use spine_core::metrics::{match_detections, ExamDetections, MetricsReport};
use spine_core::objectives::{
    branch_loss, focal_loss, focal_loss_grad, oa_weight_map, offset_l1_grad, total_loss_grad, BranchPrediction,
    EpochState, LossConfig, OASpec,
};
use spine_core::{Branch, ExamAnnotation, KeypointAnnotation, Label, ModelOutputs, Point, Structure};
use spine_core::decode::DetectedKeypoint;
use spine_net::{ChannelAttention, PositionAttention};
use spine_pipeline::commands::{cmd_eval, cmd_phantom, cmd_train};
use spine_pipeline::train::TrainOptions;
use spine_pipeline::RunConfig;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(started: Instant, limit_s: f64) -> std::result::Result<f64, String> {
    let s = started.elapsed().as_secs_f64();
    ensure(s < limit_s, || format!("took {s:.2} s, limit {limit_s} s"))?;
    Ok(s)
}

// ---------------------------------------------------------------------------
// 1. Encoding exactness

fn criterion_1() -> Check {
    let started = Instant::now();
    let spec = EncodingSpec::new(6.0, (640, 640));
    let centers = [(320.0, 320.0), (6.0, 633.0), (101.0, 517.0), (450.0, 12.0)];
    for (i, &(row, col)) in centers.iter().enumerate() {
        let label = if i % 2 == 0 { Label::Normal } else { Label::Degenerative };
        let y = Point::new(row, col);
        let t = encode_targets(&[(y, label)], &spec).map_err(|e| e.to_string())?;
        let ch = label.channel();
        let mut lattice = 0usize;
        for r in 0..640usize {
            for c in 0..640usize {
                let (dr, dc) = (r as f64 - row, c as f64 - col);
                let inside = dr * dr + dc * dc <= 36.0;
                lattice += inside as usize;
                ensure(t.offset.mask[[ch, r, c]] == inside, || format!("mask differs at ({r}, {c})"))?;
                ensure(t.heatmap.values[[ch, r, c]] == inside as u8 as f32, || format!("heatmap differs at ({r}, {c})"))?;
                ensure(!t.offset.mask[[1 - ch, r, c]] && t.heatmap.values[[1 - ch, r, c]] == 0.0, || {
                    "other channel not empty".into()
                })?;
                let (oy, ox) = (t.offset.values[[2 * ch, r, c]], t.offset.values[[2 * ch + 1, r, c]]);
                if inside {
                    ensure(oy == (row - r as f64) as f32 && ox == (col - c as f64) as f32, || {
                        format!("offset at ({r}, {c}) is ({oy}, {ox})")
                    })?;
                } else {
                    ensure(oy == 0.0 && ox == 0.0, || format!("offset outside the disk at ({r}, {c})"))?;
                }
            }
        }
        ensure(lattice == 113 && t.positives() == 113, || {
            format!("{} positives, lattice count {lattice}, expected 113", t.positives())
        })?;
    }
    let s = within_time(started, 1.0)?;
    Ok(format!("113 positives and exact offsets at {} centers [{s:.3} s]", centers.len()))
}

// ---------------------------------------------------------------------------
// 2. Hough oracle equivalence

/// Score at every grid position `y`: sum over pixels `x` of
/// `p(x) / (pi R^2) * B(y - (x + S(x)))` with the bilinear kernel `B`.
fn hough_literal(heat: &Array3<f32>, off: &Array3<f32>, radius: f64) -> Array3<f64> {
    let (c, h, w) = heat.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for yr in 0..h {
            for yc in 0..w {
                let mut s = 0.0;
                for r in 0..h {
                    for k in 0..w {
                        let tr = r as f64 + off[[2 * ch, r, k]] as f64;
                        let tc = k as f64 + off[[2 * ch + 1, r, k]] as f64;
                        let b = (1.0 - (yr as f64 - tr).abs()).max(0.0) * (1.0 - (yc as f64 - tc).abs()).max(0.0);
                        s += heat[[ch, r, k]] as f64 / (PI * radius * radius) * b;
                    }
                }
                out[[ch, yr, yc]] = s;
            }
        }
    }
    out
}

fn criterion_2() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let radius = rng.random_range(1.0..8.0);
        let heat = Array3::from_shape_fn((2, 32, 32), |_| rng.random::<f32>());
        let off = Array3::from_shape_fn((4, 32, 32), |_| rng.random_range(-6.0f32..6.0));
        let fast = hough_vote(heat.view(), off.view(), radius).map_err(|e| e.to_string())?;
        let slow = hough_literal(&heat, &off, radius);
        for (a, b) in fast.scores.iter().zip(slow.iter()) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("max |delta| = {worst:e}"))?;
    let s = within_time(started, 30.0)?;
    Ok(format!("100 map pairs, max |delta| = {worst:.2e} [{s:.2} s]"))
}

// ---------------------------------------------------------------------------
// 3. Round-trip recovery

fn criterion_3() -> Check {
    let started = Instant::now();
    let phantom = PhantomSpec {
        count: 200,
        rng_seed: 3,
        ..PhantomSpec::default()
    };
    let size = phantom.image_size;
    let spec = EncodingSpec::new(6.0, (size, size));
    let mut worst = 0.0f64;
    for i in 0..phantom.count {
        let truth = phantom_annotation(&phantom, i);
        let (disc, vert) = encode_exam_targets(&truth, &spec).map_err(|e| e.to_string())?;
        let outputs = ModelOutputs {
            disc_heatmap: disc.heatmap.values,
            disc_offset: disc.offset.values,
            vert_heatmap: vert.heatmap.values,
            vert_offset: vert.offset.values,
        };
        let found = decode_outputs(&outputs, 6.0, 5, 12.0).map_err(|e| e.to_string())?;
        for branch in Branch::ALL {
            let dets: Vec<&DetectedKeypoint> = found.iter().filter(|d| d.branch == branch).collect();
            ensure(dets.len() == 5, || format!("exam {i}: {} {} detections", dets.len(), branch.name()))?;
            let mut used = [false; 5];
            for kp in truth.branch(branch) {
                let (j, d) = dets
                    .iter()
                    .enumerate()
                    .map(|(j, d)| (j, d.position.distance(kp.position)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("five detections");
                worst = worst.max(d);
                ensure(d <= 1.0 && !used[j], || format!("exam {i}: {:?} recovered {d:.3} px away", kp.structure))?;
                ensure(dets[j].label == kp.label, || format!("exam {i}: {:?} has the wrong label", kp.structure))?;
                used[j] = true;
            }
        }
    }
    let s = within_time(started, 120.0)?;
    Ok(format!("200/200 exams recovered, worst error {worst:.2e} px [{s:.1} s]"))
}

// ---------------------------------------------------------------------------
// 4. Loss correctness

fn random_case(rng: &mut ChaCha8Rng) -> (Array3<f64>, HeatmapTarget) {
    let pred = Array3::from_shape_fn((2, 8, 8), |_| rng.random_range(0.02..0.98));
    let values = Array3::from_shape_fn((2, 8, 8), |_| if rng.random::<f64>() < 0.2 { 1.0f32 } else { 0.0 });
    (pred, HeatmapTarget { values })
}

fn focal_direct(pred: &Array3<f64>, target: &HeatmapTarget, gamma: f64) -> f64 {
    let mut sum = 0.0;
    let mut positives = 0usize;
    for (&p, &y) in pred.iter().zip(target.values.iter()) {
        if y == 1.0 {
            positives += 1;
            sum -= (1.0 - p).powf(gamma) * p.ln();
        } else {
            sum -= p.powf(gamma) * (1.0 - p).ln();
        }
    }
    sum / positives.max(1) as f64
}

fn cross_entropy(pred: &Array3<f64>, target: &HeatmapTarget) -> f64 {
    let positives = target.values.iter().filter(|&&y| y == 1.0).count().max(1);
    let sum: f64 = pred
        .iter()
        .zip(target.values.iter())
        .map(|(&p, &y)| if y == 1.0 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    sum / positives as f64
}

/// `|a - b| / max(|a|, |b|)` over whole tensors. Entries below about 1e-6
/// are dominated by rounding in the differences, so they are not compared
/// one by one.
fn relative_error(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let norm = |x: &Array3<f64>| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    norm(&(a - b)) / norm(a).max(norm(b)).max(1e-300)
}

/// Central differences of `f` with respect to every entry of `x`.
fn central_differences(x: &Array3<f64>, h: f64, f: impl Fn(&Array3<f64>) -> f64) -> Array3<f64> {
    let mut out = Array3::zeros(x.raw_dim());
    for (idx, o) in out.indexed_iter_mut() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[idx] += h;
        minus[idx] -= h;
        *o = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut value_err, mut ce_err, mut grad_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (pred, target) = random_case(&mut rng);
        let gamma = rng.random_range(0.0..4.0);
        let l = focal_loss(pred.view(), &target, gamma).map_err(|e| e.to_string())?;
        value_err = value_err.max((l - focal_direct(&pred, &target, gamma)).abs());
        let l0 = focal_loss(pred.view(), &target, 0.0).map_err(|e| e.to_string())?;
        ce_err = ce_err.max((l0 - cross_entropy(&pred, &target)).abs());
    }
    ensure(value_err <= 1e-6, || format!("focal vs direct formula: {value_err:e}"))?;
    ensure(ce_err <= 1e-6, || format!("gamma 0 vs cross-entropy: {ce_err:e}"))?;

    let h = 1e-6;
    for _ in 0..20 {
        let (pred, target) = random_case(&mut rng);
        let gamma = rng.random_range(0.0..4.0);
        let (_, grad) = focal_loss_grad(pred.view(), &target, gamma).map_err(|e| e.to_string())?;
        let fd = central_differences(&pred, h, |p| focal_loss(p.view(), &target, gamma).unwrap());
        grad_err = grad_err.max(relative_error(&grad, &fd));

        // Offset L1 with a fixed weight, away from its kinks.
        let keypoints = [(Point::new(3.3, 2.6), Label::Normal), (Point::new(4.1, 5.2), Label::Degenerative)];
        let maps = encode_targets(&keypoints, &EncodingSpec::new(2.0, (8, 8))).map_err(|e| e.to_string())?;
        let weight = Array3::from_shape_fn((4, 8, 8), |_| rng.random_range(1.0..2.0));
        let mut off = Array3::from_shape_fn((4, 8, 8), |_| rng.random_range(-3.0..3.0));
        for ((j, r, c), v) in off.indexed_iter_mut() {
            let t = maps.offset.values[[j, r, c]] as f64;
            if (weight[[j, r, c]] * *v - t).abs() < 1e-3 {
                *v += 0.01;
            }
        }
        let (_, g) = offset_l1_grad(off.view(), &maps.offset, Some(weight.view())).map_err(|e| e.to_string())?;
        let fd = central_differences(&off, h, |o| {
            offset_l1_grad(o.view(), &maps.offset, Some(weight.view())).unwrap().0
        });
        grad_err = grad_err.max(relative_error(&g, &fd));
    }
    ensure(grad_err <= 1e-4, || format!("gradient relative error {grad_err:e}"))?;
    Ok(format!(
        "value {value_err:.1e}, cross-entropy {ce_err:.1e}, gradient relative error {grad_err:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 5. Objective association contract

fn toy_targets() -> (TargetMaps, TargetMaps) {
    let spec = EncodingSpec::new(2.0, (12, 12));
    let disc = encode_targets(
        &[(Point::new(3.0, 4.0), Label::Normal), (Point::new(8.0, 7.5), Label::Degenerative)],
        &spec,
    )
    .unwrap();
    let vert = encode_targets(&[(Point::new(6.2, 3.7), Label::Normal)], &spec).unwrap();
    (disc, vert)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (disc_t, vert_t) = toy_targets();
    let active = EpochState {
        epoch: 99,
        total_epochs: 100,
    };
    let on = LossConfig {
        gamma: 2.0,
        oa: Some(OASpec::default()),
    };
    let off = LossConfig { gamma: 2.0, oa: None };

    // Saturated, correct heatmaps have a zero focal gradient.
    let mut noop_diff = 0.0f64;
    for _ in 0..50 {
        let dh = disc_t.heatmap.values.mapv(f64::from);
        let vh = vert_t.heatmap.values.mapv(f64::from);
        let d_o = Array3::from_shape_fn((4, 12, 12), |_| rng.random_range(-3.0..3.0));
        let vo = Array3::from_shape_fn((4, 12, 12), |_| rng.random_range(-3.0..3.0));
        let eval = |cfg: &LossConfig| {
            total_loss_grad(
                BranchPrediction {
                    heatmap: dh.view(),
                    offset: d_o.view(),
                },
                BranchPrediction {
                    heatmap: vh.view(),
                    offset: vo.view(),
                },
                (&disc_t, &vert_t),
                active,
                cfg,
            )
            .unwrap()
        };
        let ((a, ga), (b, gb)) = (eval(&on), eval(&off));
        ensure(a.oa_active && !b.oa_active, || "association flag not honoured".into())?;
        ensure(ga[0].heatmap.iter().all(|&g| g == 0.0), || "saturated heatmap has a gradient".into())?;
        noop_diff = noop_diff.max((a.total - b.total).abs());
        for (x, y) in ga.iter().zip(gb.iter()) {
            for (p, q) in x.offset.iter().zip(y.offset.iter()) {
                noop_diff = noop_diff.max((p - q).abs());
            }
        }
    }
    ensure(noop_diff <= 1e-7, || format!("zero heatmap gradient changes the loss by {noop_diff:e}"))?;

    // Weight range over random gradients, including clipped and constant maps.
    let spec = OASpec::default();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..1000 {
        let scale = 10f64.powf(rng.random_range(-3.0..4.0));
        let g = if i % 50 == 0 {
            Array3::from_elem((2, 6, 6), rng.random_range(-1.0..1.0) * scale)
        } else {
            Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(-1.0..1.0) * scale)
        };
        for &w in oa_weight_map(g.view(), &spec).iter() {
            lo = lo.min(w);
            hi = hi.max(w);
        }
    }
    ensure((1.0..=2.0).contains(&lo) && (1.0..=2.0).contains(&hi), || format!("weights span [{lo}, {hi}]"))?;

    // Heatmap-logit gradient with the weight held constant: central
    // differences of focal(sigmoid(z)) + L1(w * o) with w frozen.
    let mut logit_err = 0.0f64;
    let h = 1e-6;
    for _ in 0..5 {
        let z = Array3::from_shape_fn((2, 12, 12), |_| rng.random_range(-3.0..3.0));
        let o = Array3::from_shape_fn((4, 12, 12), |_| rng.random_range(-3.0..3.0));
        let p = z.mapv(sigmoid);
        let pred = BranchPrediction {
            heatmap: p.view(),
            offset: o.view(),
        };
        let (_, _, with_oa) = branch_loss(pred, &disc_t, 2.0, Some(&spec)).unwrap();
        let (_, _, without) = branch_loss(pred, &disc_t, 2.0, None).unwrap();
        let (_, focal_grad) = focal_loss_grad(p.view(), &disc_t.heatmap, 2.0).unwrap();
        let frozen = oa_weight_map(focal_grad.view(), &spec);
        let objective = |z: &Array3<f64>| {
            let p = z.mapv(sigmoid);
            focal_loss(p.view(), &disc_t.heatmap, 2.0).unwrap()
                + offset_l1_grad(o.view(), &disc_t.offset, Some(frozen.view())).unwrap().0
        };
        for idx in 0..z.len() {
            let analytic = {
                let g = with_oa.heatmap.as_slice().unwrap()[idx];
                let q = p.as_slice().unwrap()[idx];
                g * q * (1.0 - q)
            };
            let plain = without.heatmap.as_slice().unwrap()[idx] * {
                let q = p.as_slice().unwrap()[idx];
                q * (1.0 - q)
            };
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            logit_err = logit_err.max((analytic - fd).abs()).max((analytic - plain).abs());
        }
    }
    ensure(logit_err <= 1e-6, || format!("heatmap-logit gradient differs by {logit_err:e}"))?;
    Ok(format!(
        "no-op difference {noop_diff:.1e}, weights in [{lo:.3}, {hi:.3}], logit gradient error {logit_err:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 6. Attention invariants

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Array4::from_shape_fn((2, 16, 12, 10), |_| rng.random_range(-2.0f32..2.0));
    let mut pam = PositionAttention::new(16, 8, 0.0, &mut rng);
    let mut row_err = 0.0f64;
    for b in 0..2 {
        for a in [pam.affinity(&x, b), ChannelAttention::affinity(&x, b)] {
            for row in a.axis_iter(Axis(0)) {
                ensure(row.iter().all(|&v| v >= 0.0), || "negative affinity".into())?;
                row_err = row_err.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(row_err <= 1e-5, || format!("affinity row sums off by {row_err:e}"))?;

    let mut cam = ChannelAttention::new(0.0);
    ensure(pam.forward(&x, false) == x, || "position attention is not the identity at scale 0".into())?;
    ensure(cam.forward(&x, false) == x, || "channel attention is not the identity at scale 0".into())?;

    let mut cam = ChannelAttention::new(0.7);
    let mut perm: Vec<usize> = (0..16).collect();
    let mut equi_err = 0.0f64;
    for _ in 0..10 {
        perm.shuffle(&mut rng);
        let y = cam.forward(&x, false);
        let px = x.select(Axis(1), &perm);
        let ypx = cam.forward(&px, false);
        let py = y.select(Axis(1), &perm);
        for (a, b) in ypx.iter().zip(py.iter()) {
            equi_err = equi_err.max((a - b).abs() as f64);
        }
    }
    ensure(equi_err <= 1e-5, || format!("channel permutation changes the output by {equi_err:e}"))?;
    Ok(format!(
        "row sums within {row_err:.1e}, identities exact, permutation error {equi_err:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 7. Metrics exactness

/// Counts per class as `[tp, fp, fn]`.
#[derive(Clone, Copy)]
struct Expected {
    normal: [u64; 3],
    degenerative: [u64; 3],
    /// Detection view of the branch: correct pairs, mislabelled pairs and
    /// missed keypoints.
    overall: [u64; 3],
}

struct Scenario {
    name: &'static str,
    /// Labels of levels 1 to 5 ('N' or 'D') for discs and vertebrae.
    truth: [&'static str; 2],
    /// (branch, level, row shift px, col shift px, label)
    detections: Vec<(Branch, usize, f64, f64, char)>,
    disc: Expected,
    vertebra: Expected,
}

const SPACING: f64 = 0.5;
const THRESHOLD_MM: f64 = 6.0;

fn gt_position(branch: Branch, level: usize) -> Point {
    let row = 40.0 + 80.0 * level as f64 + if branch == Branch::Vertebra { 40.0 } else { 0.0 };
    Point::new(row, 100.0)
}

fn label_of(c: char) -> Label {
    if c == 'D' {
        Label::Degenerative
    } else {
        Label::Normal
    }
}

fn e(normal: [u64; 3], degenerative: [u64; 3], overall: [u64; 3]) -> Expected {
    Expected {
        normal,
        degenerative,
        overall,
    }
}

/// Every detection of a branch at its ground truth with the given labels.
fn all_at(branch: Branch, labels: &str) -> Vec<(Branch, usize, f64, f64, char)> {
    labels.chars().enumerate().map(|(l, c)| (branch, l, 0.0, 0.0, c)).collect()
}

fn scenarios() -> Vec<Scenario> {
    use Branch::{Disc, Vertebra};
    let both = |d: &str, v: &str| {
        let mut x = all_at(Disc, d);
        x.extend(all_at(Vertebra, v));
        x
    };
    vec![
        Scenario {
            name: "perfect",
            truth: ["NNDNN", "NDNNN"],
            detections: both("NNDNN", "NDNNN"),
            disc: e([4, 0, 0], [1, 0, 0], [5, 0, 0]),
            vertebra: e([4, 0, 0], [1, 0, 0], [5, 0, 0]),
        },
        Scenario {
            name: "no detections",
            truth: ["NNDNN", "NDNNN"],
            detections: vec![],
            disc: e([0, 0, 4], [0, 0, 1], [0, 0, 5]),
            vertebra: e([0, 0, 4], [0, 0, 1], [0, 0, 5]),
        },
        Scenario {
            name: "all normal, all correct",
            truth: ["NNNNN", "NNNNN"],
            detections: both("NNNNN", "NNNNN"),
            disc: e([5, 0, 0], [0, 0, 0], [5, 0, 0]),
            vertebra: e([5, 0, 0], [0, 0, 0], [5, 0, 0]),
        },
        Scenario {
            name: "every label flipped",
            truth: ["NNDNN", "DDDDD"],
            detections: both("DDNDD", "NNNNN"),
            disc: e([0, 1, 4], [0, 4, 1], [0, 5, 0]),
            vertebra: e([0, 5, 0], [0, 0, 5], [0, 5, 0]),
        },
        Scenario {
            name: "one disc label flipped",
            truth: ["NNDNN", "NNNNN"],
            detections: both("NNNNN", "NNNNN"),
            disc: e([4, 1, 0], [0, 0, 1], [4, 1, 0]),
            vertebra: e([5, 0, 0], [0, 0, 0], [5, 0, 0]),
        },
        Scenario {
            name: "exactly at the threshold",
            truth: ["NNNNN", "NNNNN"],
            detections: vec![(Disc, 0, 12.0, 0.0, 'N'), (Vertebra, 4, 0.0, -12.0, 'N')],
            disc: e([1, 0, 4], [0, 0, 0], [1, 0, 4]),
            vertebra: e([1, 0, 4], [0, 0, 0], [1, 0, 4]),
        },
        Scenario {
            name: "just beyond the threshold",
            truth: ["NNNNN", "NNNNN"],
            detections: vec![(Disc, 0, 12.02, 0.0, 'N'), (Vertebra, 2, 9.0, 8.0, 'N')],
            disc: e([0, 0, 5], [0, 0, 0], [0, 0, 5]),
            vertebra: e([0, 0, 5], [0, 0, 0], [0, 0, 5]),
        },
        Scenario {
            name: "diagonal within the threshold",
            truth: ["DNNNN", "NNNNN"],
            detections: vec![(Disc, 0, 7.0, 9.0, 'D')],
            disc: e([0, 0, 4], [1, 0, 0], [1, 0, 4]),
            vertebra: e([0, 0, 5], [0, 0, 0], [0, 0, 5]),
        },
        Scenario {
            name: "nearer duplicate wins",
            truth: ["NNNNN", "NNNNN"],
            detections: vec![(Disc, 1, 5.0, 0.0, 'D'), (Disc, 1, 1.0, 0.0, 'N')],
            disc: e([1, 0, 4], [0, 0, 0], [1, 0, 4]),
            vertebra: e([0, 0, 5], [0, 0, 0], [0, 0, 5]),
        },
        Scenario {
            name: "nearer mislabelled duplicate wins",
            truth: ["NNNNN", "NNNNN"],
            detections: vec![(Disc, 1, 1.0, 0.0, 'D'), (Disc, 1, 5.0, 0.0, 'N')],
            disc: e([0, 0, 5], [0, 1, 0], [0, 1, 4]),
            vertebra: e([0, 0, 5], [0, 0, 0], [0, 0, 5]),
        },
        Scenario {
            name: "detection in the wrong branch",
            truth: ["NNNNN", "NNNNN"],
            detections: vec![(Vertebra, 0, -40.0, 0.0, 'N')],
            disc: e([0, 0, 5], [0, 0, 0], [0, 0, 5]),
            vertebra: e([0, 0, 5], [0, 0, 0], [0, 0, 5]),
        },
        Scenario {
            name: "far distractors only",
            truth: ["NDNDN", "NNNND"],
            detections: vec![(Disc, 0, -30.0, 0.0, 'N'), (Vertebra, 4, 30.0, 50.0, 'D')],
            disc: e([0, 0, 3], [0, 0, 2], [0, 0, 5]),
            vertebra: e([0, 0, 4], [0, 0, 1], [0, 0, 5]),
        },
        Scenario {
            name: "perfect discs, missing vertebrae",
            truth: ["NDDNN", "NNNNN"],
            detections: all_at(Disc, "NDDNN"),
            disc: e([3, 0, 0], [2, 0, 0], [5, 0, 0]),
            vertebra: e([0, 0, 5], [0, 0, 0], [0, 0, 5]),
        },
        Scenario {
            name: "degenerative never predicted",
            truth: ["DDNNN", "NNNND"],
            detections: both("NNNNN", "NNNNN"),
            disc: e([3, 2, 0], [0, 0, 2], [3, 2, 0]),
            vertebra: e([4, 1, 0], [0, 0, 1], [4, 1, 0]),
        },
        Scenario {
            name: "degenerative over-predicted",
            truth: ["NNNNN", "NNNNN"],
            detections: both("DDNNN", "NNNND"),
            disc: e([3, 0, 2], [0, 2, 0], [3, 2, 0]),
            vertebra: e([4, 0, 1], [0, 1, 0], [4, 1, 0]),
        },
        Scenario {
            name: "mixed errors",
            truth: ["NDNDN", "DNNDN"],
            detections: vec![
                (Disc, 0, 1.0, 1.0, 'N'),
                (Disc, 1, 2.0, 0.0, 'N'),
                (Disc, 3, 0.0, 3.0, 'D'),
                (Vertebra, 0, 0.0, 0.0, 'D'),
                (Vertebra, 1, 4.0, 4.0, 'D'),
                (Vertebra, 2, 20.0, 0.0, 'N'),
                (Vertebra, 3, 0.0, 0.0, 'N'),
            ],
            disc: e([1, 1, 2], [1, 0, 1], [2, 1, 2]),
            vertebra: e([0, 1, 3], [1, 1, 1], [1, 2, 2]),
        },
        Scenario {
            name: "second detection on a claimed keypoint",
            truth: ["NNNNN", "NNNNN"],
            detections: vec![(Disc, 2, 0.0, 0.0, 'N'), (Vertebra, 1, 0.0, 0.0, 'N'), (Disc, 2, 10.0, 0.0, 'D')],
            disc: e([1, 0, 4], [0, 0, 0], [1, 0, 4]),
            vertebra: e([1, 0, 4], [0, 0, 0], [1, 0, 4]),
        },
        Scenario {
            name: "vertebrae only, one miss",
            truth: ["NNNNN", "DNDNN"],
            detections: vec![
                (Vertebra, 0, 0.5, 0.5, 'D'),
                (Vertebra, 1, -3.0, 0.0, 'N'),
                (Vertebra, 2, 0.0, 11.0, 'D'),
                (Vertebra, 3, 0.0, 0.0, 'N'),
            ],
            disc: e([0, 0, 5], [0, 0, 0], [0, 0, 5]),
            vertebra: e([2, 0, 1], [2, 0, 0], [4, 0, 1]),
        },
        Scenario {
            name: "all degenerative, all found",
            truth: ["DDDDD", "DDDDD"],
            detections: both("DDDDD", "DDDDD"),
            disc: e([0, 0, 0], [5, 0, 0], [5, 0, 0]),
            vertebra: e([0, 0, 0], [5, 0, 0], [5, 0, 0]),
        },
        Scenario {
            name: "all degenerative, predicted normal",
            truth: ["DDDDD", "NNNNN"],
            detections: both("NNNNN", "NNNNN"),
            disc: e([0, 5, 0], [0, 0, 5], [0, 5, 0]),
            vertebra: e([5, 0, 0], [0, 0, 0], [5, 0, 0]),
        },
    ]
}

fn frac(n: u64, d: u64) -> Ratio<u64> {
    if d == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(n, d)
    }
}

fn exact(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn f1(c: [u64; 3]) -> Ratio<u64> {
    frac(2 * c[0], 2 * c[0] + c[1] + c[2])
}

fn criterion_7() -> Check {
    let list = scenarios();
    for s in &list {
        let mut keypoints = Vec::new();
        for (bi, branch) in Branch::ALL.into_iter().enumerate() {
            for (level, c) in s.truth[bi].chars().enumerate() {
                keypoints.push(KeypointAnnotation::new(
                    Structure::of(branch, level),
                    gt_position(branch, level),
                    label_of(c),
                ));
            }
        }
        let truth = ExamAnnotation {
            exam_id: s.name.into(),
            keypoints,
        };
        let detections: Vec<DetectedKeypoint> = s
            .detections
            .iter()
            .map(|&(branch, level, dr, dc, c)| {
                let p = gt_position(branch, level);
                DetectedKeypoint {
                    branch,
                    position: Point::new(p.row + dr, p.col + dc),
                    label: label_of(c),
                    score: 1.0,
                }
            })
            .collect();
        let m = match_detections(&detections, &truth, SPACING, THRESHOLD_MM);
        let report = MetricsReport::from_exams(
            &[ExamDetections {
                exam_id: s.name.into(),
                detections,
                ground_truth: truth,
                spacing: SPACING,
            }],
            THRESHOLD_MM,
            &[],
        );
        let mut macro_f1 = Vec::new();
        let (mut all_tp, mut all_fp, mut all_fn) = (0, 0, 0);
        for (branch, want) in [(Branch::Disc, s.disc), (Branch::Vertebra, s.vertebra)] {
            let got = m.counts(branch);
            let as_arr = |c: &spine_core::metrics::ClassCounts| [c.tp, c.fp, c.fn_];
            ensure(
                as_arr(&got.normal) == want.normal
                    && as_arr(&got.degenerative) == want.degenerative
                    && as_arr(&got.overall) == want.overall,
                || format!("{}: {} counts {:?}", s.name, branch.name(), got),
            )?;
            let [tp, fp, fn_] = want.overall;
            all_tp += tp;
            all_fp += fp;
            all_fn += fn_;
            let r = report.branch(branch);
            let cls = &r.classification;
            let mut checks = vec![("pck", r.pck, frac(tp + fp, tp + fp + fn_))];
            for (got, c) in [(cls.normal, want.normal), (cls.degenerative, want.degenerative)] {
                checks.push(("precision", got.precision, frac(c[0], c[0] + c[1])));
                checks.push(("recall", got.recall, frac(c[0], c[0] + c[2])));
                checks.push(("f1", got.f1, f1(c)));
            }
            let half = Ratio::new(1, 2);
            let (n, d) = (want.normal, want.degenerative);
            checks.push(("macro precision", cls.macro_precision, (frac(n[0], n[0] + n[1]) + frac(d[0], d[0] + d[1])) * half));
            checks.push(("macro recall", cls.macro_recall, (frac(n[0], n[0] + n[2]) + frac(d[0], d[0] + d[2])) * half));
            let mf = (f1(n) + f1(d)) * half;
            checks.push(("macro f1", cls.macro_f1, mf));
            macro_f1.push(mf);
            for (what, got, want) in checks {
                ensure(got == exact(want), || {
                    format!("{}: {} {what} = {got}, expected {want}", s.name, branch.name())
                })?;
            }
        }
        let half = Ratio::new(1, 2);
        for (what, got, want) in [
            ("overall pck", report.overall_pck, frac(all_tp + all_fp, all_tp + all_fp + all_fn)),
            ("overall macro f1", report.overall_macro_f1, (macro_f1[0] + macro_f1[1]) * half),
            ("micro ap", report.micro_ap, frac(all_tp, all_tp + all_fp)),
        ] {
            ensure(got == exact(want), || format!("{}: {what} = {got}, expected {want}", s.name))?;
        }
    }
    Ok(format!("{} matching scenarios agree exactly", list.len()))
}

// ---------------------------------------------------------------------------
// 8 to 10. Desk-scale training runs

const RUN_LIMIT_S: f64 = 20.0 * 60.0;
const SEEDS: [u64; 3] = [0, 1, 2];

struct RunResult {
    label: String,
    train_s: f64,
    best_epoch: usize,
    best: MetricsReport,
    last: MetricsReport,
    report_dir: PathBuf,
}

struct Workspace {
    root: PathBuf,
    train: PathBuf,
    test: PathBuf,
}

fn workspace() -> std::result::Result<Workspace, String> {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if root.exists() {
        std::fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
    }
    let (train, test) = (root.join("train"), root.join("test"));
    let base = PhantomSpec {
        image_size: 160,
        pixel_spacing: 1.3125,
        ..PhantomSpec::default()
    };
    cmd_phantom(
        &PhantomSpec {
            count: 200,
            rng_seed: 7,
            ..base.clone()
        },
        &train,
    )
    .map_err(|e| e.to_string())?;
    cmd_phantom(
        &PhantomSpec {
            count: 50,
            rng_seed: 1007,
            ..base
        },
        &test,
    )
    .map_err(|e| e.to_string())?;
    Ok(Workspace { root, train, test })
}

fn desk_run(ws: &Workspace, seed: u64, oa: bool, tag: &str) -> std::result::Result<RunResult, String> {
    let label = format!("seed {seed}, OA {}{tag}", if oa { "on" } else { "off" });
    let out = ws.root.join(format!("run_s{seed}_oa{}{}", oa as u8, tag.replace(' ', "_")));
    let config = RunConfig {
        train_dir: ws.train.clone(),
        test_dir: Some(ws.test.clone()),
        out_dir: out.clone(),
        seed,
        oa_enabled: oa,
        ..RunConfig::desk()
    };
    let started = Instant::now();
    let outcome = cmd_train(
        &config,
        TrainOptions::default(),
    )
    .map_err(|e| format!("{label}: {e}"))?;
    let train_s = started.elapsed().as_secs_f64();
    let report_dir = out.join("eval_best");
    let best = cmd_eval(&outcome.best_path, &ws.test, Some(&config), None, &report_dir).map_err(|e| e.to_string())?;
    let last = cmd_eval(&outcome.last_path, &ws.test, Some(&config), None, &out.join("eval_last")).map_err(|e| e.to_string())?;
    let result = RunResult {
        label,
        train_s,
        best_epoch: outcome.best.epoch,
        best,
        last,
        report_dir,
    };
    println!(
        "      {}: trained in {:.0} s, best epoch {}; best PCK {:.3} F1 {:.3}, last PCK {:.3} F1 {:.3}",
        result.label,
        result.train_s,
        result.best_epoch,
        result.best.overall_pck,
        result.best.overall_macro_f1,
        result.last.overall_pck,
        result.last.overall_macro_f1
    );
    Ok(result)
}

fn criterion_8(runs: &[RunResult]) -> Check {
    let mut failures = Vec::new();
    for r in runs {
        if r.train_s > RUN_LIMIT_S {
            failures.push(format!("{}: {:.0} s > {RUN_LIMIT_S} s", r.label, r.train_s));
        }
        if r.best.overall_pck < 0.90 {
            failures.push(format!("{}: PCK {:.3} < 0.90", r.label, r.best.overall_pck));
        }
        if r.best.overall_macro_f1 < 0.75 {
            failures.push(format!("{}: macro F1 {:.3} < 0.75", r.label, r.best.overall_macro_f1));
        }
    }
    let summary = runs
        .iter()
        .map(|r| {
            format!(
                "[{:.0} s, PCK {:.3}, F1 {:.3}]",
                r.train_s, r.best.overall_pck, r.best.overall_macro_f1
            )
        })
        .collect::<Vec<_>>()
        .join(" ");
    if failures.is_empty() {
        Ok(format!("{}/3 seeds pass at 6 mm: {summary}", runs.len()))
    } else {
        Err(failures.join("; "))
    }
}

fn mean_f1(runs: &[RunResult]) -> f64 {
    runs.iter().map(|r| r.best.overall_macro_f1).sum::<f64>() / runs.len() as f64
}

fn criterion_9(with_oa: &[RunResult], without: &[RunResult]) -> Check {
    let (on, off) = (mean_f1(with_oa), mean_f1(without));
    let msg = format!("mean macro F1 with OA {on:.4}, without {off:.4}, difference {:+.4}", on - off);
    if on >= off - 0.01 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_10(a: &RunResult, b: &RunResult) -> Check {
    for name in ["report.json", "report.csv", "pck_curve.csv"] {
        let x = std::fs::read(a.report_dir.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.report_dir.join(name)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{name} differs between identical runs"))?;
    }
    Ok("report.json, report.csv and pck_curve.csv are byte-identical".into())
}

// ---------------------------------------------------------------------------

struct Tally {
    failed_gating: Vec<u32>,
}

impl Tally {
    fn record(&mut self, id: u32, name: &str, gating: bool, result: Check) {
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        let note = if gating { "" } else { " (non-gating)" };
        println!("{tag} criterion {id:>2} {name}{note}: {detail}");
        if result.is_err() && gating {
            self.failed_gating.push(id);
        }
    }
}

fn guarded<T>(f: impl FnOnce() -> std::result::Result<T, String>) -> std::result::Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| selected.is_empty() || selected.contains(&id);
    let mut tally = Tally {
        failed_gating: Vec::new(),
    };

    let quick: [(u32, &str, fn() -> Check); 7] = [
        (1, "encoding exactness", criterion_1),
        (2, "Hough oracle equivalence", criterion_2),
        (3, "round-trip recovery", criterion_3),
        (4, "loss correctness", criterion_4),
        (5, "association contract", criterion_5),
        (6, "attention invariants", criterion_6),
        (7, "metrics exactness", criterion_7),
    ];
    for (id, name, f) in quick {
        if wanted(id) {
            tally.record(id, name, true, guarded(f));
        }
    }

    if wanted(8) || wanted(9) || wanted(10) {
        println!("      desk-scale runs: 200 training and 50 held-out phantoms, 160 x 160");
        let outcome = guarded(|| {
            let ws = workspace()?;
            let mut errors = Vec::new();
            let mut run = |seed, oa, tag: &str| match desk_run(&ws, seed, oa, tag) {
                Ok(r) => Some(r),
                Err(e) => {
                    errors.push(e);
                    None
                }
            };
            let with_oa: Vec<RunResult> = SEEDS.iter().filter_map(|&s| run(s, true, "")).collect();
            let without: Vec<RunResult> = if wanted(9) {
                SEEDS.iter().filter_map(|&s| run(s, false, "")).collect()
            } else {
                Vec::new()
            };
            let repeat = if wanted(10) { run(SEEDS[0], true, " repeat") } else { None };
            Ok::<_, String>(((with_oa, without, repeat), errors))
        });
        match outcome {
            Ok(((with_oa, without, repeat), errors)) => {
                let err = |what: &str| Err(format!("{what}; errors: {}", errors.join("; ")));
                if wanted(8) {
                    let r = if with_oa.len() == SEEDS.len() {
                        criterion_8(&with_oa)
                    } else {
                        err("training failed")
                    };
                    tally.record(8, "desk-scale end-to-end", true, r);
                }
                if wanted(9) {
                    let r = if with_oa.len() == SEEDS.len() && without.len() == SEEDS.len() {
                        criterion_9(&with_oa, &without)
                    } else {
                        err("training failed")
                    };
                    tally.record(9, "association observational check", false, r);
                }
                if wanted(10) {
                    let first = with_oa.iter().find(|r| r.label.starts_with(&format!("seed {},", SEEDS[0])));
                    let r = match (first, &repeat) {
                        (Some(a), Some(b)) => criterion_10(a, b),
                        _ => err("training failed"),
                    };
                    tally.record(10, "determinism", true, r);
                }
            }
            Err(e) => {
                for (id, name, gating) in [
                    (8, "desk-scale end-to-end", true),
                    (9, "association observational check", false),
                    (10, "determinism", true),
                ] {
                    if wanted(id) {
                        tally.record(id, name, gating, Err(e.clone()));
                    }
                }
            }
        }
    }

    if tally.failed_gating.is_empty() {
        println!("acceptance: all gating criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: gating criteria failed: {:?}", tally.failed_gating);
        ExitCode::FAILURE
    }
}
