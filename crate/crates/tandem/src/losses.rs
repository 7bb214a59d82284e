//! The five training loss terms and their weighted total.
//!
//! Each loss exists in two forms: a graph builder that participates in
//! backpropagation, and a value-level wrapper that evaluates the same
//! builder on constants. The wrappers delegate to the builders, so there
//! is a single source of truth for each formula.
//!
//! Detachment contract: the peer map in cross-supervision and soft
//! consistency, and the teacher map in consistency regularization, are
//! targets. The builders read their numeric values and embed them as
//! constants, so no gradient can reach them by construction.

use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Smoothing added to both sides of the Dice ratio; keeps empty classes
/// finite and their loss term near zero.
pub const DICE_EPSILON: f64 = 1e-5;
/// Probability floor inside the cross-entropy logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Per-pixel class distribution over a `[C, H, W]` grid.
#[derive(Debug, Clone)]
pub struct ProbMap(Tensor);

impl ProbMap {
    /// Validates non-negativity and per-pixel normalization (sum 1 ± 1e-5).
    pub fn new(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "probability map must be [C, H, W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        let data = tensor.data();
        for i in 0..hw {
            let mut sum = 0.0;
            for ch in 0..c {
                let v = data[ch * hw + i];
                if !(v >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "probability map has negative or NaN entry {v} at pixel {i}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!(
                    "probability map pixel {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(ProbMap(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Sharpened per-channel target in [0, 1]; channels need not sum to 1.
#[derive(Debug, Clone)]
pub struct SoftPseudoLabel(Tensor);

impl SoftPseudoLabel {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if let Some(&v) = tensor
            .data()
            .iter()
            .find(|&&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::InvalidArgument(format!(
                "soft pseudo label entry {v} outside [0, 1]"
            )));
        }
        Ok(SoftPseudoLabel(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Trade-off weights for the total loss plus the sharpening temperature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    /// Operating point used for the main comparisons.
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 1.0,
            gamma: 3.0,
            mu: 0.1,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    /// Low-weight setting used when toggling terms in the ablation study.
    pub fn ablation() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.01,
            mu: 0.1,
            tau: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu", self.mu),
        ] {
            if !(value >= 0.0) {
                return Err(Error::NegativeWeight { name, value });
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTau(self.tau));
        }
        Ok(())
    }
}

/// One student's loss components for one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub sup: f64,
    pub h: f64,
    pub s: f64,
    pub cdd: f64,
    pub cr: f64,
    pub total: f64,
}

/// Weighted total: sup + alpha*h + beta*s + gamma*cdd + mu*cr.
pub fn total_loss(
    sup: f64,
    h: f64,
    s: f64,
    cdd: f64,
    cr: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let total = sup + weights.alpha * h + weights.beta * s + weights.gamma * cdd + weights.mu * cr;
    Ok(LossBreakdown {
        sup,
        h,
        s,
        cdd,
        cr,
        total,
    })
}

fn check_pred_shape(g: &Graph, pred: Var, c: usize, h: usize, w: usize) -> Result<()> {
    let shape = g.value(pred).shape();
    if shape != [c, h, w] {
        return Err(Error::ShapeMismatch {
            context: "loss prediction vs target",
            lhs: shape.to_vec(),
            rhs: vec![c, h, w],
        });
    }
    Ok(())
}

fn check_same_shape(g: &Graph, a: Var, b: Var, context: &'static str) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            context,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// Soft Dice loss: mean over classes of 1 - (2*intersection + eps) /
/// (pred mass + target mass + eps).
pub fn dice_loss_graph(g: &mut Graph, pred: Var, target: &LabelMask) -> Result<Var> {
    let (c, h, w) = (target.num_classes, target.height, target.width);
    check_pred_shape(g, pred, c, h, w)?;
    let t = g.constant(target.one_hot());
    let prod = g.mul(pred, t);
    let inter = g.sum_channels(prod);
    let pred_mass = g.sum_channels(pred);
    let target_mass = g.sum_channels(t);
    let twice_inter = g.scale(inter, 2.0);
    let numer = g.add_const(twice_inter, DICE_EPSILON);
    let mass = g.add(pred_mass, target_mass);
    let denom = g.add_const(mass, DICE_EPSILON);
    let ratio = g.div(numer, denom);
    let mean_ratio = g.mean(ratio);
    let neg = g.scale(mean_ratio, -1.0);
    Ok(g.add_const(neg, 1.0))
}

/// Pixel-mean cross entropy with the prediction clamped at `LOG_FLOOR`.
pub fn cross_entropy_graph(g: &mut Graph, pred: Var, target: &LabelMask) -> Result<Var> {
    let (c, h, w) = (target.num_classes, target.height, target.width);
    check_pred_shape(g, pred, c, h, w)?;
    let t = g.constant(target.one_hot());
    let logp = g.log_clamped(pred, LOG_FLOOR);
    let picked = g.mul(t, logp);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / (h * w) as f64))
}

/// Supervised loss: the even mix of cross entropy and Dice.
pub fn supervised_loss_graph(g: &mut Graph, pred: Var, target: &LabelMask) -> Result<Var> {
    let ce = cross_entropy_graph(g, pred, target)?;
    let dice = dice_loss_graph(g, pred, target)?;
    let sum = g.add(ce, dice);
    Ok(g.scale(sum, 0.5))
}

/// Per-pixel argmax of a `[C, H, W]` tensor; ties go to the lowest class.
fn hard_pseudo_tensor(probs: &Tensor) -> LabelMask {
    let shape = probs.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let data = probs.data();
    let mut labels = vec![0u8; hw];
    for i in 0..hw {
        let mut best = 0usize;
        let mut best_v = data[i];
        for ch in 1..c {
            let v = data[ch * hw + i];
            if v > best_v {
                best_v = v;
                best = ch;
            }
        }
        labels[i] = best as u8;
    }
    LabelMask::new(h, w, c, labels).expect("argmax labels are in range")
}

/// Hard pseudo labels from a probability map; the result carries no
/// gradient history.
pub fn hard_pseudo(prob: &ProbMap) -> LabelMask {
    hard_pseudo_tensor(prob.tensor())
}

/// Cross-supervision loss: Dice against the peer's hard pseudo labels.
/// The peer is read by value, so it receives no gradient.
pub fn cross_supervision_graph(g: &mut Graph, pred: Var, peer: Var) -> Result<Var> {
    check_same_shape(g, pred, peer, "cross supervision pred vs peer")?;
    let pseudo = hard_pseudo_tensor(g.value(peer));
    dice_loss_graph(g, pred, &pseudo)
}

/// Per-channel binary sharpening: p^(1/tau) / (p^(1/tau) + (1-p)^(1/tau)).
/// Channels are NOT renormalized afterward; the output is only ever an
/// MSE target.
fn sharpen_tensor(probs: &Tensor, tau: f64) -> Tensor {
    let e = 1.0 / tau;
    probs.map(|p| {
        let a = p.powf(e);
        let b = (1.0 - p).powf(e);
        // Both powers underflow to zero near p = 0.5 for tiny tau; the
        // sharpened value is 0.5 by symmetry there.
        if a + b == 0.0 {
            0.5
        } else {
            a / (a + b)
        }
    })
}

/// Sharpen a probability map into a soft pseudo-label target.
pub fn sharpen(prob: &ProbMap, tau: f64) -> Result<SoftPseudoLabel> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    SoftPseudoLabel::new(sharpen_tensor(prob.tensor(), tau))
}

fn mse_graph(g: &mut Graph, pred: Var, target: Tensor) -> Var {
    let n = target.numel() as f64;
    let t = g.constant(target);
    let diff = g.sub(pred, t);
    let sq = g.mul(diff, diff);
    let total = g.sum(sq);
    g.scale(total, 1.0 / n)
}

/// Soft consistency loss: MSE against the sharpened peer map. The peer is
/// read by value, so it receives no gradient.
pub fn soft_consistency_graph(g: &mut Graph, pred: Var, peer: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    check_same_shape(g, pred, peer, "soft consistency pred vs peer")?;
    let target = sharpen_tensor(g.value(peer), tau);
    Ok(mse_graph(g, pred, target))
}

/// Classifier determinacy discrepancy: mean over pixels of one minus the
/// inner product of the two class distributions. Equals the off-diagonal
/// mass of the per-pixel outer product when both inputs are normalized.
/// Gradient flows into BOTH inputs.
pub fn cdd_graph(g: &mut Graph, p1: Var, p2: Var) -> Result<Var> {
    check_same_shape(g, p1, p2, "determinacy discrepancy inputs")?;
    let shape = g.value(p1).shape();
    let hw = (shape[1] * shape[2]) as f64;
    let prod = g.mul(p1, p2);
    let total = g.sum(prod);
    let neg = g.scale(total, -1.0 / hw);
    Ok(g.add_const(neg, 1.0))
}

/// Consistency regularization: MSE against the teacher's output, which is
/// passed by value and therefore receives no gradient.
pub fn consistency_graph(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    let s_shape = g.value(student).shape();
    if s_shape != teacher.shape() {
        return Err(Error::ShapeMismatch {
            context: "consistency student vs teacher",
            lhs: s_shape.to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    Ok(mse_graph(g, student, teacher.clone()))
}

fn eval_on_constant(
    pred: &ProbMap,
    build: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.tensor().clone());
    let loss = build(&mut g, p)?;
    Ok(g.value(loss).item())
}

/// Value-level Dice loss.
pub fn dice_loss(pred: &ProbMap, target: &LabelMask) -> Result<f64> {
    eval_on_constant(pred, |g, p| dice_loss_graph(g, p, target))
}

/// Value-level cross entropy.
pub fn cross_entropy_loss(pred: &ProbMap, target: &LabelMask) -> Result<f64> {
    eval_on_constant(pred, |g, p| cross_entropy_graph(g, p, target))
}

/// Value-level supervised loss.
pub fn supervised_loss(pred: &ProbMap, target: &LabelMask) -> Result<f64> {
    eval_on_constant(pred, |g, p| supervised_loss_graph(g, p, target))
}

/// Value-level cross-supervision loss.
pub fn cross_supervision_loss(pred: &ProbMap, peer: &ProbMap) -> Result<f64> {
    eval_on_constant(pred, |g, p| {
        let q = g.constant(peer.tensor().clone());
        cross_supervision_graph(g, p, q)
    })
}

/// Value-level soft consistency loss.
pub fn soft_consistency_loss(pred: &ProbMap, peer: &ProbMap, tau: f64) -> Result<f64> {
    eval_on_constant(pred, |g, p| {
        let q = g.constant(peer.tensor().clone());
        soft_consistency_graph(g, p, q, tau)
    })
}

/// Value-level determinacy discrepancy.
pub fn cdd_loss(p1: &ProbMap, p2: &ProbMap) -> Result<f64> {
    eval_on_constant(p1, |g, a| {
        let b = g.constant(p2.tensor().clone());
        cdd_graph(g, a, b)
    })
}

/// Value-level consistency regularization.
pub fn consistency_regularization_loss(student: &ProbMap, teacher: &ProbMap) -> Result<f64> {
    eval_on_constant(student, |g, s| consistency_graph(g, s, teacher.tensor()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck;
    use crate::rng::rng_from;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn prob_map(c: usize, h: usize, w: usize, seed: u64) -> ProbMap {
        let mut rng = rng_from(seed);
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for i in 0..hw {
            let mut sum = 0.0;
            for ch in 0..c {
                let v: f64 = rng.random_range(0.05..1.0);
                data[ch * hw + i] = v;
                sum += v;
            }
            for ch in 0..c {
                data[ch * hw + i] /= sum;
            }
        }
        ProbMap::new(Tensor::new(vec![c, h, w], data)).unwrap()
    }

    fn one_hot_map(mask: &LabelMask) -> ProbMap {
        ProbMap::new(mask.one_hot()).unwrap()
    }

    fn mask_from(labels: &[u8], h: usize, w: usize, c: usize) -> LabelMask {
        LabelMask::new(h, w, c, labels.to_vec()).unwrap()
    }

    #[test]
    fn prob_map_validation() {
        let bad_sum = Tensor::new(vec![2, 1, 1], vec![0.6, 0.6]);
        assert!(ProbMap::new(bad_sum).is_err());
        let negative = Tensor::new(vec![2, 1, 1], vec![1.2, -0.2]);
        assert!(ProbMap::new(negative).is_err());
        let fine = Tensor::new(vec![2, 1, 1], vec![0.3, 0.7]);
        assert!(ProbMap::new(fine).is_ok());
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let mask = mask_from(&[0, 1, 2, 1], 2, 2, 3);
        let perfect = one_hot_map(&mask);
        assert!(dice_loss(&perfect, &mask).unwrap() < 1e-4);

        // Prediction puts all mass on class 0 while the target is all
        // class 1: both foreground terms and the background term are
        // fully disjoint.
        let mask1 = mask_from(&[1, 1, 1, 1], 2, 2, 3);
        let pred0 = one_hot_map(&mask_from(&[0, 0, 0, 0], 2, 2, 3));
        let loss = dice_loss(&pred0, &mask1).unwrap();
        // Classes 0 and 1 each contribute ~1, class 2 is empty on both
        // sides and contributes ~0; mean ~2/3.
        assert_abs_diff_eq!(loss, 2.0 / 3.0, epsilon = 1e-4);
    }

    #[test]
    fn dice_half_overlap_hand_count() {
        // 2x2 binary case: pred marks pixels {0, 1} as class 1, target
        // marks {1, 2}. Intersection 1, masses 2 and 2.
        let pred = one_hot_map(&mask_from(&[1, 1, 0, 0], 2, 2, 2));
        let target = mask_from(&[0, 1, 1, 0], 2, 2, 2);
        // class-1 term: 1 - 2*1/(2+2) = 0.5; class-0 term identical by
        // complement. Mean = 0.5.
        let loss = dice_loss(&pred, &target).unwrap();
        assert_abs_diff_eq!(loss, 0.5, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_known_values() {
        let mask = mask_from(&[0, 1, 2, 0], 2, 2, 3);
        let perfect = one_hot_map(&mask);
        assert!(cross_entropy_loss(&perfect, &mask).unwrap() <= 1e-10);

        let uniform =
            ProbMap::new(Tensor::full(vec![3, 2, 2], 1.0 / 3.0)).unwrap();
        assert_abs_diff_eq!(
            cross_entropy_loss(&uniform, &mask).unwrap(),
            3f64.ln(),
            epsilon = 1e-12
        );

        // 0.5 on the target class everywhere, remainder split evenly.
        let mut data = vec![0.25; 3 * 4];
        for (i, &lbl) in mask.labels.iter().enumerate() {
            data[lbl as usize * 4 + i] = 0.5;
        }
        let half = ProbMap::new(Tensor::new(vec![3, 2, 2], data)).unwrap();
        assert_abs_diff_eq!(
            cross_entropy_loss(&half, &mask).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn supervised_combines_halves() {
        let mask = mask_from(&[0, 1, 1, 0], 2, 2, 2);
        let pred = prob_map(2, 2, 2, 3);
        let ce = cross_entropy_loss(&pred, &mask).unwrap();
        let dice = dice_loss(&pred, &mask).unwrap();
        let sup = supervised_loss(&pred, &mask).unwrap();
        assert_abs_diff_eq!(sup, 0.5 * (ce + dice), epsilon = 1e-12);
        assert!(sup >= 0.0);
    }

    #[test]
    fn hard_pseudo_argmax_and_ties() {
        let t = Tensor::new(
            vec![3, 1, 2],
            // pixel 0: (0.2, 0.5, 0.3) -> class 1
            // pixel 1: (0.4, 0.4, 0.2) -> tie between 0 and 1 -> class 0
            vec![0.2, 0.4, 0.5, 0.4, 0.3, 0.2],
        );
        let mask = hard_pseudo(&ProbMap::new(t).unwrap());
        assert_eq!(mask.labels, vec![1, 0]);

        let oh = mask_from(&[2, 0, 1, 2], 2, 2, 3);
        assert_eq!(hard_pseudo(&one_hot_map(&oh)).labels, oh.labels);
    }

    #[test]
    fn cross_supervision_agrees_with_dice_on_pseudo() {
        let pred = prob_map(3, 4, 4, 1);
        let peer = prob_map(3, 4, 4, 2);
        let direct = cross_supervision_loss(&pred, &peer).unwrap();
        let via_pseudo = dice_loss(&pred, &hard_pseudo(&peer)).unwrap();
        assert_abs_diff_eq!(direct, via_pseudo, epsilon = 1e-12);

        // Prediction equal to the one-hot of the peer's argmax is a
        // near-zero loss.
        let aligned = one_hot_map(&hard_pseudo(&peer));
        assert!(cross_supervision_loss(&aligned, &peer).unwrap() < 1e-4);
    }

    #[test]
    fn sharpen_fixed_points_and_example() {
        let half = ProbMap::new(Tensor::full(vec![2, 1, 1], 0.5)).unwrap();
        for tau in [0.05, 0.1, 1.0, 3.0] {
            let s = sharpen(&half, tau).unwrap();
            assert!(s.tensor().data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        }

        // tau = 1 is the identity.
        let p = prob_map(3, 2, 2, 5);
        let s = sharpen(&p, 1.0).unwrap();
        for (&a, &b) in p.tensor().data().iter().zip(s.tensor().data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        // Direct evaluation of the formula at p = 0.9, tau = 0.1.
        let nine = ProbMap::new(Tensor::new(vec![2, 1, 1], vec![0.9, 0.1])).unwrap();
        let s = sharpen(&nine, 0.1).unwrap();
        let expected = 0.9f64.powi(10) / (0.9f64.powi(10) + 0.1f64.powi(10));
        assert_abs_diff_eq!(s.tensor().data()[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(s.tensor().data()[0], 0.999_999_999_71, epsilon = 1e-10);

        assert!(matches!(
            sharpen(&nine, 0.0),
            Err(Error::NonPositiveTau(_))
        ));
    }

    #[test]
    fn sharpen_monotone_and_complementary() {
        let tau = 0.3;
        let e = 1.0 / tau;
        let mut prev = 0.0;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let v = p.powf(e) / (p.powf(e) + (1.0 - p).powf(e));
            assert!(v > prev, "sharpen not increasing at p = {p}");
            assert!((0.0..=1.0).contains(&v));
            let w = (1.0 - p).powf(e) / ((1.0 - p).powf(e) + p.powf(e));
            assert_abs_diff_eq!(v + w, 1.0, epsilon = 1e-12);
            prev = v;
        }
    }

    #[test]
    fn soft_consistency_known_values() {
        let peer = prob_map(3, 4, 4, 7);
        let sharpened = sharpen(&peer, 0.1).unwrap();
        // Prediction equal to the sharpened target is exactly zero. The
        // sharpened map is not a valid ProbMap (channels need not sum to
        // 1), so drive the graph builder directly.
        let mut g = Graph::new();
        let p = g.constant(sharpened.tensor().clone());
        let q = g.constant(peer.tensor().clone());
        let loss = soft_consistency_graph(&mut g, p, q, 0.1).unwrap();
        assert_abs_diff_eq!(g.value(loss).item(), 0.0, epsilon = 1e-15);

        // Peer at 0.5 everywhere sharpens to 0.5; MSE against a constant
        // offset of 0.1 is 0.01.
        let half = ProbMap::new(Tensor::full(vec![2, 2, 2], 0.5)).unwrap();
        let shifted = Tensor::full(vec![2, 2, 2], 0.6);
        let mut g = Graph::new();
        let p = g.constant(shifted);
        let q = g.constant(half.tensor().clone());
        let loss = soft_consistency_graph(&mut g, p, q, 0.1).unwrap();
        assert_abs_diff_eq!(g.value(loss).item(), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn cdd_known_values() {
        let same = one_hot_map(&mask_from(&[1, 2, 0, 1], 2, 2, 3));
        assert_abs_diff_eq!(cdd_loss(&same, &same).unwrap(), 0.0, epsilon = 1e-12);

        let a = one_hot_map(&mask_from(&[0, 0, 0, 0], 2, 2, 3));
        let b = one_hot_map(&mask_from(&[1, 1, 1, 1], 2, 2, 3));
        assert_abs_diff_eq!(cdd_loss(&a, &b).unwrap(), 1.0, epsilon = 1e-12);

        let u = ProbMap::new(Tensor::full(vec![3, 2, 2], 1.0 / 3.0)).unwrap();
        assert_abs_diff_eq!(cdd_loss(&u, &u).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn cdd_matches_outer_product_off_diagonal() {
        // Brute-force the C x C outer product per pixel and sum the
        // off-diagonal mass; compare with the closed form.
        for seed in 0..5 {
            let p1 = prob_map(3, 4, 4, 100 + seed);
            let p2 = prob_map(3, 4, 4, 200 + seed);
            let hw = 16;
            let (d1, d2) = (p1.tensor().data(), p2.tensor().data());
            let mut acc = 0.0;
            for i in 0..hw {
                for m in 0..3 {
                    for n in 0..3 {
                        if m != n {
                            acc += d1[m * hw + i] * d2[n * hw + i];
                        }
                    }
                }
            }
            let brute = acc / hw as f64;
            assert_abs_diff_eq!(cdd_loss(&p1, &p2).unwrap(), brute, epsilon = 1e-10);
        }
    }

    #[test]
    fn consistency_known_values() {
        let t = prob_map(3, 4, 4, 9);
        assert_abs_diff_eq!(
            consistency_regularization_loss(&t, &t).unwrap(),
            0.0,
            epsilon = 1e-15
        );

        // Uniform student vs one-hot teacher on a single pixel.
        let student = ProbMap::new(Tensor::full(vec![3, 1, 1], 1.0 / 3.0)).unwrap();
        let teacher = one_hot_map(&mask_from(&[0], 1, 1, 3));
        assert_abs_diff_eq!(
            consistency_regularization_loss(&student, &teacher).unwrap(),
            2.0 / 9.0,
            epsilon = 1e-12
        );
        // Value symmetry.
        assert_abs_diff_eq!(
            consistency_regularization_loss(&teacher, &student).unwrap(),
            2.0 / 9.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        let b = total_loss(0.5, 0.2, 0.1, 0.3, 0.4, &w).unwrap();
        assert_abs_diff_eq!(b.total, 1.64, epsilon = 1e-12);

        let zero = total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w).unwrap();
        assert_abs_diff_eq!(zero.total, 0.0, epsilon = 1e-15);

        let off = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            mu: 0.0,
            tau: 0.1,
        };
        let only_sup = total_loss(0.7, 9.0, 9.0, 9.0, 9.0, &off).unwrap();
        assert_abs_diff_eq!(only_sup.total, 0.7, epsilon = 1e-12);

        let bad = LossWeights {
            alpha: -0.1,
            ..LossWeights::default()
        };
        assert!(matches!(
            total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &bad),
            Err(Error::NegativeWeight { name: "alpha", .. })
        ));
    }

    #[test]
    fn detached_targets_receive_no_gradient() {
        let pred = prob_map(3, 4, 4, 21).into_tensor();
        let peer = prob_map(3, 4, 4, 22).into_tensor();

        // Both maps enter the graph as parameters; the builders must
        // still leave the peer gradient-free.
        let mut g = Graph::new();
        let p = g.param(pred.clone());
        let q = g.param(peer.clone());
        let h = cross_supervision_graph(&mut g, p, q).unwrap();
        let s = soft_consistency_graph(&mut g, p, q, 0.1).unwrap();
        let hs = g.add(h, s);
        let grads = g.backward(hs);
        assert!(grads.get(p).is_some(), "prediction must receive gradient");
        assert!(
            grads.get(q).map(|t| t.norm()).unwrap_or(0.0) == 0.0,
            "peer target must receive zero gradient"
        );

        // The peer still influences the VALUE: flipping its argmax at one
        // pixel changes the cross-supervision loss.
        let mut flipped = peer.clone();
        let hw = 16;
        {
            let d = flipped.data_mut();
            let argmax = (0..3)
                .max_by(|&a, &b| d[a * hw].partial_cmp(&d[b * hw]).unwrap())
                .unwrap();
            let other = (argmax + 1) % 3;
            for c in 0..3 {
                d[c * hw] = 0.0;
            }
            d[other * hw] = 1.0;
        }
        let v1 = {
            let mut g = Graph::new();
            let p = g.constant(pred.clone());
            let q = g.constant(peer.clone());
            let l = cross_supervision_graph(&mut g, p, q).unwrap();
            g.value(l).item()
        };
        let v2 = {
            let mut g = Graph::new();
            let p = g.constant(pred);
            let q = g.constant(flipped);
            let l = cross_supervision_graph(&mut g, p, q).unwrap();
            g.value(l).item()
        };
        assert!((v1 - v2).abs() > 1e-9, "peer value must affect the loss");
    }

    #[test]
    fn cdd_gradient_reaches_both_inputs() {
        let p1 = prob_map(3, 4, 4, 31).into_tensor();
        let p2 = prob_map(3, 4, 4, 32).into_tensor();
        let mut g = Graph::new();
        let a = g.param(p1);
        let b = g.param(p2);
        let loss = cdd_graph(&mut g, a, b).unwrap();
        let grads = g.backward(loss);
        assert!(grads.get(a).map(|t| t.norm()).unwrap_or(0.0) > 0.0);
        assert!(grads.get(b).map(|t| t.norm()).unwrap_or(0.0) > 0.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = prob_map(3, 4, 4, 41);
        let b = prob_map(3, 2, 2, 42);
        let mask = mask_from(&[0, 1], 1, 2, 3);
        assert!(matches!(
            dice_loss(&a, &mask),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            cdd_loss(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            soft_consistency_loss(&a, &b, 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            consistency_regularization_loss(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pred = prob_map(3, 4, 4, 51).into_tensor();
        let peer = prob_map(3, 4, 4, 52).into_tensor();
        let mask_labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let mask = mask_from(&mask_labels, 4, 4, 3);

        gradcheck(&[pred.clone()], 1e-3, |g, vars| {
            dice_loss_graph(g, vars[0], &mask).unwrap()
        });
        gradcheck(&[pred.clone()], 1e-3, |g, vars| {
            cross_entropy_graph(g, vars[0], &mask).unwrap()
        });
        gradcheck(&[pred.clone()], 1e-3, |g, vars| {
            supervised_loss_graph(g, vars[0], &mask).unwrap()
        });
        let peer_h = peer.clone();
        gradcheck(&[pred.clone()], 1e-3, move |g, vars| {
            let q = g.constant(peer_h.clone());
            cross_supervision_graph(g, vars[0], q).unwrap()
        });
        let peer_s = peer.clone();
        gradcheck(&[pred.clone()], 1e-3, move |g, vars| {
            let q = g.constant(peer_s.clone());
            soft_consistency_graph(g, vars[0], q, 0.1).unwrap()
        });
        gradcheck(&[pred.clone(), peer.clone()], 1e-3, |g, vars| {
            cdd_graph(g, vars[0], vars[1]).unwrap()
        });
        let teacher = peer;
        gradcheck(&[pred], 1e-3, move |g, vars| {
            consistency_graph(g, vars[0], &teacher).unwrap()
        });
    }

    fn permute_map(p: &ProbMap, perm: &[usize; 3]) -> ProbMap {
        let t = p.tensor();
        let hw = t.shape()[1] * t.shape()[2];
        let mut data = vec![0.0; t.numel()];
        for c in 0..3 {
            let dst = perm[c];
            data[dst * hw..(dst + 1) * hw].copy_from_slice(&t.data()[c * hw..(c + 1) * hw]);
        }
        ProbMap::new(Tensor::new(t.shape().to_vec(), data)).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_are_permutation_equivariant(
            seed1 in 0u64..1000,
            seed2 in 1000u64..2000,
            labels in proptest::collection::vec(0u8..3, 16),
            perm_idx in 0usize..6,
        ) {
            const PERMS: [[usize; 3]; 6] = [
                [0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
            ];
            let perm = PERMS[perm_idx];
            let p1 = prob_map(3, 4, 4, seed1);
            let p2 = prob_map(3, 4, 4, seed2);
            let mask = mask_from(&labels, 4, 4, 3);

            let q1 = permute_map(&p1, &perm);
            let q2 = permute_map(&p2, &perm);
            let relabeled: Vec<u8> = labels.iter().map(|&l| perm[l as usize] as u8).collect();
            let rmask = mask_from(&relabeled, 4, 4, 3);

            let close = |a: f64, b: f64| (a - b).abs() < 1e-10;
            prop_assert!(close(
                dice_loss(&p1, &mask).unwrap(),
                dice_loss(&q1, &rmask).unwrap()
            ));
            prop_assert!(close(
                cross_entropy_loss(&p1, &mask).unwrap(),
                cross_entropy_loss(&q1, &rmask).unwrap()
            ));
            prop_assert!(close(
                cross_supervision_loss(&p1, &p2).unwrap(),
                cross_supervision_loss(&q1, &q2).unwrap()
            ));
            prop_assert!(close(
                soft_consistency_loss(&p1, &p2, 0.1).unwrap(),
                soft_consistency_loss(&q1, &q2, 0.1).unwrap()
            ));
            prop_assert!(close(
                cdd_loss(&p1, &p2).unwrap(),
                cdd_loss(&q1, &q2).unwrap()
            ));
            prop_assert!(close(
                consistency_regularization_loss(&p1, &p2).unwrap(),
                consistency_regularization_loss(&q1, &q2).unwrap()
            ));
        }

        #[test]
        fn losses_stay_in_range(seed1 in 0u64..500, seed2 in 500u64..1000) {
            let p1 = prob_map(3, 4, 4, seed1);
            let p2 = prob_map(3, 4, 4, seed2);
            let labels: Vec<u8> = (0..16).map(|i| ((seed1 as usize + i) % 3) as u8).collect();
            let mask = mask_from(&labels, 4, 4, 3);

            let dice = dice_loss(&p1, &mask).unwrap();
            prop_assert!((0.0..=1.0).contains(&dice));
            let cdd = cdd_loss(&p1, &p2).unwrap();
            prop_assert!((0.0..=1.0).contains(&cdd));
            let ce = cross_entropy_loss(&p1, &mask).unwrap();
            prop_assert!(ce >= 0.0 && ce <= -(LOG_FLOOR.ln()));
            prop_assert!(cross_supervision_loss(&p1, &p2).unwrap() >= 0.0);
            prop_assert!(soft_consistency_loss(&p1, &p2, 0.1).unwrap() >= 0.0);
            prop_assert!(consistency_regularization_loss(&p1, &p2).unwrap() >= 0.0);
        }
    }
}
