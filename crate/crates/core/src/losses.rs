//! Training objectives with analytic gradients with respect to the network
//! outputs, and a finite-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::intervals::{FrameTargets, Modality};
use crate::model::LevelPrediction;
use crate::nn::sigmoid;
use crate::params::ParamStore;
use crate::tensor::{Mat, Real};

/// Probability floor inside every logarithm.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { alpha: 0.98, gamma: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub diou: f64,
    pub smooth_l1: f64,
    pub total: f64,
    /// Fake frames across both modalities.
    pub p: usize,
}

/// `-log(max(x, EPS))` and its derivative in `x`.
fn neg_log(x: f64) -> (f64, f64) {
    if x > EPS {
        (-x.ln(), -1.0 / x)
    } else {
        (-EPS.ln(), 0.0)
    }
}

/// Mean binary cross-entropy over layers and modalities of `l × 2` logits,
/// with the gradient in logit space.
pub fn dfd_bce_with_grad<T: Real>(logits: &Mat<T>, labels: [bool; 2]) -> (f64, Mat<T>) {
    let n = (logits.rows * 2) as f64;
    let mut grad = Mat::zeros(logits.rows, 2);
    let mut total = 0.0;
    for r in 0..logits.rows {
        for (m, &y) in labels.iter().enumerate() {
            let z = logits.get(r, m).to_f64().unwrap();
            let p = sigmoid(z);
            let q = sigmoid(-z);
            let (value, dz) = if y {
                let (v, d) = neg_log(p);
                (v, d * p * q)
            } else {
                let (v, d) = neg_log(q);
                (v, -d * p * q)
            };
            total += value;
            grad.set(r, m, T::lit(dz / n));
        }
    }
    (total / n, grad)
}

pub fn loss_dfd_bce<T: Real>(logits: &Mat<T>, labels: [bool; 2]) -> f64 {
    dfd_bce_with_grad(logits, labels).0
}

/// Summed focal loss over frames and its gradient in `a_hat`.
pub fn focal_with_grad(a_hat: &[f64], fake: &[bool], cfg: FocalConfig) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let grad = a_hat
        .iter()
        .zip(fake)
        .map(|(&a, &y)| {
            let (pt, at, sign) = if y { (a, cfg.alpha, 1.0) } else { (1.0 - a, 1.0 - cfg.alpha, -1.0) };
            let rest = 1.0 - pt;
            let (nl, dnl) = neg_log(pt);
            let w = rest.powf(cfg.gamma);
            total += at * w * nl;
            let dw = if cfg.gamma == 0.0 || rest <= 0.0 { 0.0 } else { -cfg.gamma * rest.powf(cfg.gamma - 1.0) };
            sign * at * (dw * nl + w * dnl)
        })
        .collect();
    (total, grad)
}

pub fn loss_focal(a_hat: &[f64], fake: &[bool], cfg: FocalConfig) -> f64 {
    focal_with_grad(a_hat, fake, cfg).0
}

/// `1 - IoU + ρ²/κ²` for one predicted `(onset, offset)` against a ground
/// truth, with the gradient in the predicted onset and offset. A degenerate
/// prediction has IoU 0.
pub fn frame_diou(pred: (f64, f64), gt: (f64, f64)) -> (f64, f64, f64) {
    let (ps, pe) = pred;
    let (gs, ge) = gt;
    let mut value = 1.0;
    let (mut ds, mut de) = (0.0, 0.0);
    if pe > ps {
        let lo = ps.max(gs);
        let hi = pe.min(ge);
        let inter = (hi - lo).max(0.0);
        let union = (pe - ps) + (ge - gs) - inter;
        let (di_s, di_e) = if inter > 0.0 {
            (if ps > gs { -1.0 } else { 0.0 }, if pe < ge { 1.0 } else { 0.0 })
        } else {
            (0.0, 0.0)
        };
        let (du_s, du_e) = (-1.0 - di_s, 1.0 - di_e);
        value -= inter / union;
        ds -= (di_s * union - inter * du_s) / (union * union);
        de -= (di_e * union - inter * du_e) / (union * union);
    }
    let rho = 0.5 * (ps + pe) - 0.5 * (gs + ge);
    let kappa = pe.max(ge) - ps.min(gs);
    if kappa > 0.0 {
        let k2 = kappa * kappa;
        value += rho * rho / k2;
        let dk_s = if ps < gs { -1.0 } else { 0.0 };
        let dk_e = if pe > ge { 1.0 } else { 0.0 };
        ds += rho / k2 - 2.0 * rho * rho / (k2 * kappa) * dk_s;
        de += rho / k2 - 2.0 * rho * rho / (k2 * kappa) * dk_e;
    }
    (value, ds, de)
}

/// Sum of [`frame_diou`] over fake frames; returns gradients in the predicted
/// onsets and offsets.
pub fn diou_with_grad(pred: &[(f64, f64)], gt: &[(f64, f64)], fake: &[bool]) -> (f64, Vec<(f64, f64)>) {
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .zip(fake)
        .map(|((&p, &g), &y)| {
            if !y {
                return (0.0, 0.0);
            }
            let (v, ds, de) = frame_diou(p, g);
            total += v;
            (ds, de)
        })
        .collect();
    (total, grad)
}

pub fn loss_diou(pred: &[(f64, f64)], gt: &[(f64, f64)], fake: &[bool]) -> f64 {
    diou_with_grad(pred, gt, fake).0
}

/// `0.5x²` below 1 in magnitude, `|x| - 0.5` above.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub fn smooth_l1_with_grad(pred: &[(f64, f64)], gt: &[(f64, f64)], fake: &[bool]) -> (f64, Vec<(f64, f64)>) {
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .zip(fake)
        .map(|((&(ps, pe), &(gs, ge)), &y)| {
            if !y {
                return (0.0, 0.0);
            }
            let (xs, xe) = (gs - ps, ge - pe);
            total += 0.5 * (smooth_l1(xs) + smooth_l1(xe));
            (-0.5 * smooth_l1_grad(xs), -0.5 * smooth_l1_grad(xe))
        })
        .collect();
    (total, grad)
}

pub fn loss_smooth_l1(pred: &[(f64, f64)], gt: &[(f64, f64)], fake: &[bool]) -> f64 {
    smooth_l1_with_grad(pred, gt, fake).0
}

/// Localization loss over all pyramid levels: each component is averaged
/// over levels and the sum divided by the fake-frame count (at least 1).
pub fn tfl_composite_with_grad<T: Real>(
    levels: &[LevelPrediction<T>],
    targets: &FrameTargets,
    cfg: FocalConfig,
) -> (LossBreakdown, Vec<LevelPrediction<T>>) {
    let f = targets.frames;
    let l = levels.len() as f64;
    let p = targets.fake_count();
    let scale = 1.0 / (l * p.max(1) as f64);
    let mut out = LossBreakdown { p, ..Default::default() };
    let mut grads = Vec::with_capacity(levels.len());
    for lv in levels {
        let mut g = LevelPrediction::zeros(f);
        for m in Modality::ALL {
            let mi = m.index();
            let tg = targets.modality(m);
            let fake: Vec<bool> = tg.iter().map(|t| t.fake).collect();
            let to64 = |v: &[T]| -> Vec<f64> { v.iter().map(|x| x.to_f64().unwrap()).collect() };
            let (prob, ds, de) = (to64(&lv.prob[mi]), to64(&lv.d_start[mi]), to64(&lv.d_end[mi]));
            let pred: Vec<(f64, f64)> = (0..f).map(|j| (j as f64 - ds[j], j as f64 - de[j])).collect();
            let gt: Vec<(f64, f64)> = (0..f).map(|j| tg[j].interval_at(j).unwrap_or((0.0, 1.0))).collect();

            let (fv, fg) = focal_with_grad(&prob, &fake, cfg);
            let (dv, dg) = diou_with_grad(&pred, &gt, &fake);
            let (sv, sg) = smooth_l1_with_grad(&pred, &gt, &fake);
            out.focal += fv / l;
            out.diou += dv / l;
            out.smooth_l1 += sv / l;
            for j in 0..f {
                g.prob[mi][j] = T::lit(fg[j] * scale);
                // onset = j - d_start, offset = j - d_end
                g.d_start[mi][j] = T::lit(-(dg[j].0 + sg[j].0) * scale);
                g.d_end[mi][j] = T::lit(-(dg[j].1 + sg[j].1) * scale);
            }
        }
        grads.push(g);
    }
    out.total = (out.focal + out.diou + out.smooth_l1) / p.max(1) as f64;
    (out, grads)
}

pub fn loss_tfl_composite<T: Real>(
    levels: &[LevelPrediction<T>],
    targets: &FrameTargets,
    cfg: FocalConfig,
) -> LossBreakdown {
    tfl_composite_with_grad(levels, targets, cfg).0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Check at most this many scalars per parameter (evenly strided).
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-6, max_per_param: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter holding the largest error.
    pub worst: Option<String>,
    /// Parameters with at least one scalar above tolerance or non-finite.
    pub failing: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Compares an analytic gradient with central finite differences of `loss`.
pub fn check_gradients(
    loss: impl Fn(&ParamStore<f64>) -> f64,
    params: &ParamStore<f64>,
    analytic: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for e in 0..params.len() {
        let name = params.entries()[e].name.clone();
        let n = params.entries()[e].value.len();
        let stride = opts.max_per_param.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut failed = false;
        for k in (0..n).step_by(stride) {
            let orig = probe.entries()[e].value[k];
            probe.entries_mut()[e].value[k] = orig + opts.step;
            let up = loss(&probe);
            probe.entries_mut()[e].value[k] = orig - opts.step;
            let dn = loss(&probe);
            probe.entries_mut()[e].value[k] = orig;
            let num = (up - dn) / (2.0 * opts.step);
            let ana = analytic.entries()[e].value[k];
            let err = if num.is_finite() && ana.is_finite() {
                (ana - num).abs() / ana.abs().max(num.abs()).max(opts.floor)
            } else {
                f64::INFINITY
            };
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some(name.clone());
                }
            }
            failed |= !(err <= opts.tolerance);
        }
        if failed {
            report.failing.push(name);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervals::{encode_frame_targets, iou_1d, diou_penalty, Interval};
    use crate::model::{Model, ModelConfig, Prediction, Task};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    // Scalar references written straight from the case definitions.

    fn ref_bce(logits: &Mat<f64>, y: [bool; 2]) -> f64 {
        let mut s = 0.0;
        for r in 0..logits.rows {
            for m in 0..2 {
                let p = 1.0 / (1.0 + (-logits.get(r, m)).exp());
                let yy = if y[m] { 1.0 } else { 0.0 };
                s += yy * p.max(EPS).ln() + (1.0 - yy) * (1.0 - p).max(EPS).ln();
            }
        }
        -s / (2.0 * logits.rows as f64)
    }

    fn ref_focal(a_hat: &[f64], a: &[bool], alpha: f64, gamma: f64) -> f64 {
        let mut s = 0.0;
        for (&p, &y) in a_hat.iter().zip(a) {
            let pt = if y { p } else { 1.0 - p };
            let at = if y { alpha } else { 1.0 - alpha };
            s -= at * (1.0 - pt).powf(gamma) * pt.max(EPS).ln();
        }
        s
    }

    fn ref_diou(p: (f64, f64), g: (f64, f64)) -> f64 {
        let inter = (p.1.min(g.1) - p.0.max(g.0)).max(0.0);
        let iou = if p.1 > p.0 { inter / ((p.1 - p.0) + (g.1 - g.0) - inter) } else { 0.0 };
        let rho = (p.0 + p.1) / 2.0 - (g.0 + g.1) / 2.0;
        let kappa = p.1.max(g.1) - p.0.min(g.0);
        1.0 - iou + rho * rho / (kappa * kappa)
    }

    fn ref_composite(levels: &[LevelPrediction<f64>], t: &FrameTargets, cfg: FocalConfig) -> f64 {
        let mut sum = 0.0;
        for lv in levels {
            for m in 0..2 {
                for j in 0..t.frames {
                    let tg = &t.per_modality[m][j];
                    sum += ref_focal(&[lv.prob[m][j]], &[tg.fake], cfg.alpha, cfg.gamma);
                    if tg.fake {
                        let (s, e) = (j as f64 - tg.d_start, j as f64 - tg.d_end);
                        let (ps, pe) = (j as f64 - lv.d_start[m][j], j as f64 - lv.d_end[m][j]);
                        sum += ref_diou((ps, pe), (s, e));
                        sum += 0.5 * (smooth_l1(s - ps) + smooth_l1(e - pe));
                    }
                }
            }
        }
        sum / levels.len() as f64 / t.fake_count().max(1) as f64
    }

    fn random_levels(rng: &mut ChaCha8Rng, l: usize, f: usize) -> Vec<LevelPrediction<f64>> {
        (0..l)
            .map(|_| {
                let mut lv = LevelPrediction::zeros(f);
                for m in 0..2 {
                    for j in 0..f {
                        lv.prob[m][j] = rng.random_range(0.01..0.99);
                        lv.d_start[m][j] = rng.random_range(0.05..6.0);
                        lv.d_end[m][j] = -rng.random_range(0.05..6.0);
                    }
                }
                lv
            })
            .collect()
    }

    fn sample_targets() -> FrameTargets {
        let iv = vec![
            Interval::new(2.0, 7.0, Modality::Visual).unwrap(),
            Interval::new(9.0, 12.0, Modality::Audio).unwrap(),
        ];
        encode_frame_targets(&iv, 14).unwrap()
    }

    #[test]
    fn bce_examples() {
        let zeros = Mat::<f64>::zeros(3, 2);
        for y in [[true, false], [false, false], [true, true]] {
            assert!((loss_dfd_bce(&zeros, y) - LN2).abs() < 1e-12);
        }
        let sure = Mat::from_vec(1, 2, vec![60.0, -60.0]);
        assert!(loss_dfd_bce(&sure, [true, false]).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z = Mat::from_fn(4, 2, |_, _| rng.random_range(-8.0..8.0));
            let y = [rng.random(), rng.random()];
            assert!((loss_dfd_bce(&z, y) - ref_bce(&z, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_gradient_matches_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Mat::from_fn(3, 2, |_, _| rng.random_range(-4.0..4.0));
        let y = [true, false];
        let (_, g) = dfd_bce_with_grad(&z, y);
        for k in 0..6 {
            let mut up = z.clone();
            up.data[k] += 1e-6;
            let mut dn = z.clone();
            dn.data[k] -= 1e-6;
            let num = (loss_dfd_bce(&up, y) - loss_dfd_bce(&dn, y)) / 2e-6;
            assert!((num - g.data[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn focal_examples() {
        let cfg = FocalConfig::default();
        assert_eq!(loss_focal(&[1.0, 0.0], &[true, false], cfg), 0.0);
        assert!((loss_focal(&[0.5], &[true], cfg) - 0.98 * 0.25 * LN2).abs() < 1e-12);
        assert!((loss_focal(&[0.5], &[true], cfg) - 0.16986).abs() < 1e-4);
        assert!((loss_focal(&[0.5], &[false], cfg) - 0.003466).abs() < 1e-6);
    }

    #[test]
    fn focal_half_alpha_zero_gamma_is_half_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Mat::from_fn(10, 2, |_, _| rng.random_range(-5.0..5.0));
        let y = [true, false];
        let a_hat: Vec<f64> = z.data.iter().map(|&v| sigmoid(v)).collect();
        let flags: Vec<bool> = (0..20).map(|k| y[k % 2]).collect();
        let focal = loss_focal(&a_hat, &flags, FocalConfig { alpha: 0.5, gamma: 0.0 });
        let bce_sum = loss_dfd_bce(&z, y) * 20.0;
        assert!((focal - 0.5 * bce_sum).abs() < 1e-10);
    }

    #[test]
    fn focal_matches_reference_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for gamma in [0.0, 0.5, 2.0] {
            let cfg = FocalConfig { alpha: 0.7, gamma };
            let a: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..0.99)).collect();
            let y: Vec<bool> = (0..12).map(|_| rng.random()).collect();
            let (v, g) = focal_with_grad(&a, &y, cfg);
            assert!((v - ref_focal(&a, &y, 0.7, gamma)).abs() < 1e-12);
            for k in 0..12 {
                let mut up = a.clone();
                up[k] += 1e-6;
                let mut dn = a.clone();
                dn[k] -= 1e-6;
                let num = (loss_focal(&up, &y, cfg) - loss_focal(&dn, &y, cfg)) / 2e-6;
                assert!((num - g[k]).abs() < 1e-6 * (1.0 + num.abs()));
            }
        }
    }

    #[test]
    fn diou_examples() {
        assert_eq!(loss_diou(&[(2.0, 5.0)], &[(2.0, 5.0)], &[true]), 0.0);
        assert_eq!(loss_diou(&[(0.0, 9.0)], &[(2.0, 5.0)], &[false]), 0.0);
        assert!((loss_diou(&[(0.0, 2.0)], &[(8.0, 10.0)], &[true]) - 1.64).abs() < 1e-12);
        // degenerate prediction: IoU 0, point-centre penalty
        let (v, _, _) = frame_diou((4.0, 4.0), (2.0, 8.0));
        assert!((v - (1.0 + 1.0 / 36.0)).abs() < 1e-12);
    }

    #[test]
    fn diou_gradient_matches_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let gs = rng.random_range(0.0..10.0);
            let g = (gs, gs + rng.random_range(1.0..8.0));
            let ps = rng.random_range(-3.0..12.0);
            let p = (ps, ps + rng.random_range(0.1..8.0));
            let (_, ds, de) = frame_diou(p, g);
            let h = 1e-7;
            let ns = (frame_diou((p.0 + h, p.1), g).0 - frame_diou((p.0 - h, p.1), g).0) / (2.0 * h);
            let ne = (frame_diou((p.0, p.1 + h), g).0 - frame_diou((p.0, p.1 - h), g).0) / (2.0 * h);
            assert!((ns - ds).abs() < 1e-5, "{p:?} {g:?}: {ns} vs {ds}");
            assert!((ne - de).abs() < 1e-5, "{p:?} {g:?}: {ne} vs {de}");
            assert!((frame_diou(p, g).0 - ref_diou(p, g)).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(loss_smooth_l1(&[(3.0, 7.0)], &[(3.0, 7.0)], &[true]), 0.0);
        assert!((loss_smooth_l1(&[(2.5, 9.0)], &[(3.0, 7.0)], &[true]) - 0.8125).abs() < 1e-12);
        assert_eq!(loss_smooth_l1(&[(2.5, 9.0)], &[(3.0, 7.0)], &[false]), 0.0);
    }

    #[test]
    fn composite_examples() {
        let real = encode_frame_targets(&[], 6).unwrap();
        let mut perfect = LevelPrediction::<f64>::zeros(6);
        let b = loss_tfl_composite(&[perfect.clone()], &real, FocalConfig::default());
        assert_eq!((b.total, b.p), (0.0, 0));

        perfect.prob[0][2] = 0.4;
        perfect.d_start[1][3] = 5.0;
        let b = loss_tfl_composite(&[perfect], &real, FocalConfig::default());
        assert_eq!((b.diou, b.smooth_l1), (0.0, 0.0));
        assert!(b.focal > 0.0);
        assert_eq!(b.total, b.focal);
    }

    #[test]
    fn composite_matches_reference() {
        let t = sample_targets();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for l in [1, 3] {
            let levels = random_levels(&mut rng, l, 14);
            let cfg = FocalConfig::default();
            let b = loss_tfl_composite(&levels, &t, cfg);
            assert_eq!(b.p, 8);
            assert!((b.total - ref_composite(&levels, &t, cfg)).abs() < 1e-10);
            assert!((b.total - (b.focal + b.diou + b.smooth_l1) / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_gradient_matches_difference() {
        let t = sample_targets();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let levels = random_levels(&mut rng, 2, 14);
        let cfg = FocalConfig::default();
        let (_, g) = tfl_composite_with_grad(&levels, &t, cfg);
        let h = 1e-6;
        type Pick = fn(&mut LevelPrediction<f64>) -> &mut [Vec<f64>; 2];
        let picks: [(Pick, Pick); 3] = [
            (|l| &mut l.prob, |l| &mut l.prob),
            (|l| &mut l.d_start, |l| &mut l.d_start),
            (|l| &mut l.d_end, |l| &mut l.d_end),
        ];
        for (pick, gpick) in picks {
            for lv in 0..2 {
                for m in 0..2 {
                    for j in 0..14 {
                        let mut up = levels.clone();
                        pick(&mut up[lv])[m][j] += h;
                        let mut dn = levels.clone();
                        pick(&mut dn[lv])[m][j] -= h;
                        let num = (loss_tfl_composite(&up, &t, cfg).total - loss_tfl_composite(&dn, &t, cfg).total)
                            / (2.0 * h);
                        let mut gl = g[lv].clone();
                        let ana = gpick(&mut gl)[m][j];
                        assert!((num - ana).abs() < 1e-6, "{lv} {m} {j}: {num} vs {ana}");
                    }
                }
            }
        }
    }

    #[test]
    fn quadratic_gradient_check() {
        let mut p = ParamStore::new();
        p.push("w", vec![3], vec![0.5, -1.5, 2.0]);
        let loss = |p: &ParamStore<f64>| p.entries()[0].value.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x * x).sum();
        let mut g = p.zeros_like();
        for (i, (gv, x)) in g.entries_mut()[0].value.iter_mut().zip(&p.entries()[0].value).enumerate() {
            *gv = 2.0 * (i + 1) as f64 * x;
        }
        let r = check_gradients(loss, &p, &g, GradCheckOptions::default());
        assert!(r.passed() && r.max_rel_error < 1e-8, "{r:?}");

        g.entries_mut()[0].value[1] += 0.1;
        let r = check_gradients(loss, &p, &g, GradCheckOptions::default());
        assert_eq!(r.failing, vec!["w".to_string()]);

        g.entries_mut()[0].value[1] = f64::NAN;
        assert!(!check_gradients(loss, &p, &g, GradCheckOptions::default()).passed());
    }

    fn model_loss(model: &Model, p: &ParamStore<f64>, v: &Mat<f64>, a: &Mat<f64>, t: &FrameTargets) -> (f64, ParamStore<f64>) {
        let (pred, cache) = model.forward(p, v, a, t.frames).unwrap();
        let Prediction::Tfl(levels) = pred else { unreachable!() };
        let (b, dl) = tfl_composite_with_grad(&levels, t, FocalConfig::default());
        let mut g = p.zeros_like();
        model.backward(p, &cache, &Prediction::Tfl(dl), &mut g);
        (b.total, g)
    }

    #[test]
    fn full_tfl_loss_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = ModelConfig { d: 8, heads: 2, mlp_ratio: 2, layers: 1, window: 5, f_max: 14, d0: 4, task: Task::Tfl, strict_residual: false };
        let (model, mut p) = Model::new::<f64, _>(cfg, &mut rng).unwrap();
        for e in p.entries_mut() {
            for x in &mut e.value {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let v = Mat::from_fn(14, 4, |_, _| rng.random_range(-1.0..1.0));
        let a = Mat::from_fn(14, 4, |_, _| rng.random_range(-1.0..1.0));
        let t = sample_targets();
        let (_, g) = model_loss(&model, &p, &v, &a, &t);
        let r = check_gradients(|p| model_loss(&model, p, &v, &a, &t).0, &p, &g, GradCheckOptions::default());
        assert!(r.passed() && r.max_rel_error < 1e-4, "{r:?}");

        let mut bad = g.clone();
        bad.entries_mut()[3].value[0] += 1.0;
        let r = check_gradients(|p| model_loss(&model, p, &v, &a, &t).0, &p, &bad, GradCheckOptions::default());
        assert!(!r.passed());
    }

    #[test]
    fn full_dfd_loss_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for strict in [false, true] {
            let cfg = ModelConfig { d: 8, heads: 2, mlp_ratio: 1, layers: 2, window: 0, f_max: 10, d0: 4, task: Task::Dfd, strict_residual: strict };
            let (model, mut p) = Model::new::<f64, _>(cfg, &mut rng).unwrap();
            for e in p.entries_mut() {
                for x in &mut e.value {
                    *x += rng.random_range(-0.3..0.3);
                }
            }
            let v = Mat::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
            let a = Mat::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
            let loss = |p: &ParamStore<f64>| -> (f64, ParamStore<f64>) {
                let (pred, cache) = model.forward(p, &v, &a, 7).unwrap();
                let Prediction::Dfd(z) = pred else { unreachable!() };
                let (val, dz) = dfd_bce_with_grad(&z, [true, false]);
                let mut g = p.zeros_like();
                model.backward(p, &cache, &Prediction::Dfd(dz), &mut g);
                (val, g)
            };
            let (_, g) = loss(&p);
            let r = check_gradients(|p| loss(p).0, &p, &g, GradCheckOptions::default());
            assert!(r.passed(), "strict={strict} {r:?}");
        }
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_finite(seed in 0u64..500, l in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let levels = random_levels(&mut rng, l, 14);
            let b = loss_tfl_composite(&levels, &sample_targets(), FocalConfig::default());
            prop_assert!(b.total.is_finite() && b.focal >= 0.0 && b.diou >= 0.0 && b.smooth_l1 >= 0.0);
            let z = Mat::from_fn(l, 2, |_, _| rng.random_range(-50.0..50.0));
            let v = loss_dfd_bce(&z, [rng.random(), rng.random()]);
            prop_assert!(v.is_finite() && v >= 0.0);
        }

        #[test]
        fn composite_permutation_invariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let levels = random_levels(&mut rng, 3, 14);
            let t = sample_targets();
            let cfg = FocalConfig::default();
            let base = loss_tfl_composite(&levels, &t, cfg).total;
            let rev: Vec<_> = levels.iter().rev().cloned().collect();
            prop_assert!((loss_tfl_composite(&rev, &t, cfg).total - base).abs() < 1e-12);
            // swapping the modalities together with their targets
            let swapped: Vec<_> = levels.iter().map(|lv| {
                let mut s = lv.clone();
                s.prob.swap(0, 1);
                s.d_start.swap(0, 1);
                s.d_end.swap(0, 1);
                s
            }).collect();
            let mut ts = t.clone();
            ts.per_modality.swap(0, 1);
            prop_assert!((loss_tfl_composite(&swapped, &ts, cfg).total - base).abs() < 1e-12);
        }

        #[test]
        fn diou_zero_only_at_match(s in 0.0f64..10.0, len in 1.0f64..8.0, shift in 0.01f64..3.0) {
            let g = (s, s + len);
            prop_assert!(frame_diou(g, g).0.abs() < 1e-12);
            prop_assert!(frame_diou((s + shift, s + len + shift), g).0 > 0.0);
            let p = Interval::new(s + shift, s + len, Modality::Audio);
            if let Ok(p) = p {
                let gi = Interval::new(g.0, g.1, Modality::Audio).unwrap();
                let want = 1.0 - iou_1d(&p, &gi) + diou_penalty(&p, &gi);
                prop_assert!((frame_diou((p.onset(), p.offset()), g).0 - want).abs() < 1e-12);
            }
        }
    }
}
