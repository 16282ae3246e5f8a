//! Training objectives: Dice+CE segmentation loss, the generator's
//! adversarial term, uncertainty-masked CE, the critic's BCE and the weighted
//! total.
//!
//! Every loss is evaluated in `f64`. The [`grad`] functions return the value
//! together with its derivative with respect to each input; the [`tape`]
//! functions wrap them as graph ops that take logits, fusing the sigmoid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, ProbGrid};

/// Probabilities are clamped to `[P_MIN, 1 - P_MIN]` before any log.
pub const P_MIN: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_u: f64,
    /// Confidence threshold for the uncertainty mask.
    pub threshold: f64,
    /// Dice smoothing.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 0.01, lambda_u: 0.1, threshold: 0.3, epsilon: 1e-5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_c >= 0.0
            && self.lambda_u >= 0.0
            && (0.0..=1.0).contains(&self.threshold)
            && self.epsilon > 0.0
            && [self.lambda_c, self.lambda_u, self.epsilon].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_dice: f64,
    pub l_ce: f64,
    pub l_c: f64,
    pub l_u: f64,
    pub l_total: f64,
    pub l_critic: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_s, self.l_dice, self.l_ce, self.l_c, self.l_u, self.l_total, self.l_critic].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean; the total is recomputed from the averaged parts
    /// only implicitly, since averaging preserves the linear identity.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.l_s += r.l_s / n;
            m.l_dice += r.l_dice / n;
            m.l_ce += r.l_ce / n;
            m.l_c += r.l_c / n;
            m.l_u += r.l_u / n;
            m.l_total += r.l_total / n;
            m.l_critic += r.l_critic / n;
        }
        m
    }
}

/// Dice and cross-entropy parts of the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLoss {
    pub dice: f64,
    pub ce: f64,
}

impl SegLoss {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

fn check_dims(a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("grid {a:?} vs {b:?}")))
    }
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn mask64(m: &BinaryMask) -> Vec<f64> {
    m.data().iter().map(|&x| x as f64).collect()
}

/// Squared-prediction soft Dice loss plus voxel-mean binary cross-entropy.
pub fn dice_ce_loss(prob: &ProbGrid, gt: &BinaryMask, epsilon: f64) -> Result<SegLoss> {
    check_dims(prob.dims(), gt.dims())?;
    let (p, g) = (f64s(prob.data()), mask64(gt));
    Ok(SegLoss { dice: grad::dice(&p, &g, epsilon).value, ce: grad::bce(&p, &g).value })
}

/// `-mean log c`: small when the critic scores the prediction as real.
pub fn generator_adv_loss(critic: &ProbGrid) -> f64 {
    grad::neg_log(&f64s(critic.data())).value
}

/// `-mean_{c > T} g log p`, zero when no voxel passes the threshold.
pub fn uncertainty_masked_ce(prob: &ProbGrid, gt: &BinaryMask, critic: &ProbGrid, threshold: f64) -> Result<f64> {
    check_dims(prob.dims(), gt.dims())?;
    check_dims(prob.dims(), critic.dims())?;
    Ok(grad::masked_ce(&f64s(prob.data()), &mask64(gt), &indicator(critic.data(), threshold)).value)
}

/// Voxels whose confidence exceeds `t`, compared at the map's own precision.
pub fn indicator(critic: &[f32], t: f64) -> Vec<bool> {
    let t = t as f32;
    critic.iter().map(|&c| c > t).collect()
}

/// Critic BCE: ground-truth masks are real, predictions are fake.
pub fn critic_loss(on_gt: &ProbGrid, on_pred: &ProbGrid) -> Result<f64> {
    check_dims(on_gt.dims(), on_pred.dims())?;
    let (real, fake) = grad::critic(&f64s(on_gt.data()), &f64s(on_pred.data()));
    Ok(real.value + fake.value)
}

pub fn total_generator_loss(seg: SegLoss, l_c: f64, l_u: f64, w: &LossWeights) -> LossReport {
    let l_s = seg.total();
    LossReport { l_s, l_dice: seg.dice, l_ce: seg.ce, l_c, l_u, l_total: l_s + w.lambda_c * l_c + w.lambda_u * l_u, l_critic: 0.0 }
}

/// Loss values with their derivatives, in `f64`.
pub mod grad {
    use super::P_MIN;

    /// A scalar and its gradient with respect to one input grid.
    #[derive(Clone, Debug, PartialEq)]
    pub struct Terms {
        pub value: f64,
        pub grad: Vec<f64>,
    }

    /// Clamp with a straight-through derivative.
    #[inline]
    pub fn clamp(p: f64) -> f64 {
        p.clamp(P_MIN, 1.0 - P_MIN)
    }

    pub fn dice(p: &[f64], g: &[f64], eps: f64) -> Terms {
        let (mut inter, mut den) = (0.0, 0.0);
        for (&p, &g) in p.iter().zip(g) {
            inter += p * g;
            den += p * p + g * g;
        }
        let num = 2.0 * inter + eps;
        let den = den + eps;
        let grad = p.iter().zip(g).map(|(&p, &g)| -(2.0 * g * den - num * 2.0 * p) / (den * den)).collect();
        Terms { value: 1.0 - num / den, grad }
    }

    pub fn bce(p: &[f64], g: &[f64]) -> Terms {
        let n = p.len() as f64;
        let mut value = 0.0;
        let grad = p
            .iter()
            .zip(g)
            .map(|(&p, &g)| {
                let q = clamp(p);
                value -= g * q.ln() + (1.0 - g) * (1.0 - q).ln();
                (-g / q + (1.0 - g) / (1.0 - q)) / n
            })
            .collect();
        Terms { value: value / n, grad }
    }

    /// `-mean log c`.
    pub fn neg_log(c: &[f64]) -> Terms {
        let n = c.len() as f64;
        let mut value = 0.0;
        let grad = c
            .iter()
            .map(|&c| {
                let q = clamp(c);
                value -= q.ln();
                -1.0 / (q * n)
            })
            .collect();
        Terms { value: value / n, grad }
    }

    /// `-mean log (1 - c)`.
    pub fn neg_log_complement(c: &[f64]) -> Terms {
        let n = c.len() as f64;
        let mut value = 0.0;
        let grad = c
            .iter()
            .map(|&c| {
                let q = clamp(c);
                value -= (1.0 - q).ln();
                1.0 / ((1.0 - q) * n)
            })
            .collect();
        Terms { value: value / n, grad }
    }

    /// Masked CE; the gradient is with respect to `p` only, the indicator
    /// carries none.
    pub fn masked_ce(p: &[f64], g: &[f64], mask: &[bool]) -> Terms {
        let m = mask.iter().filter(|&&b| b).count();
        let mut grad = vec![0.0; p.len()];
        if m == 0 {
            return Terms { value: 0.0, grad };
        }
        let m = m as f64;
        let mut value = 0.0;
        for i in 0..p.len() {
            if mask[i] {
                let q = clamp(p[i]);
                value -= g[i] * q.ln();
                grad[i] = -g[i] / (q * m);
            }
        }
        Terms { value: value / m, grad }
    }

    /// Real and fake halves of the critic BCE, each with its own gradient.
    pub fn critic(on_gt: &[f64], on_pred: &[f64]) -> (Terms, Terms) {
        (neg_log(on_gt), neg_log_complement(on_pred))
    }

    /// Chain a probability gradient through `p = sigmoid(z)`.
    pub fn through_sigmoid(grad_p: &mut [f64], p: &[f64]) {
        for (g, &p) in grad_p.iter_mut().zip(p) {
            *g *= p * (1.0 - p);
        }
    }

    pub fn sigmoid(z: f64) -> f64 {
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    }
}

/// Losses as graph ops on logits.
pub mod tape {
    use std::sync::Arc;

    use sat3d_tensor::{BackCtx, Tensor, Var};

    use super::grad::{self, Terms};
    use super::SegLoss;

    fn probs(logits: &Tensor) -> Vec<f64> {
        logits.data().iter().map(|&z| grad::sigmoid(z as f64)).collect()
    }

    /// Scalar op whose backward scales a precomputed gradient.
    fn scalar_op<'g>(x: &Var<'g>, value: f64, grad_z: Vec<f64>) -> Var<'g> {
        let shape = x.shape().to_vec();
        let g = Arc::new(Tensor::new(shape, grad_z.into_iter().map(|v| v as f32).collect()));
        x.graph().op(&[x], Tensor::scalar(value as f32), move |c: &BackCtx| {
            let s = c.grad.item();
            vec![Some(g.map(|v| v * s))]
        })
    }

    fn logit_grad(t: Terms, p: &[f64]) -> (f64, Vec<f64>) {
        let mut g = t.grad;
        grad::through_sigmoid(&mut g, p);
        (t.value, g)
    }

    /// Dice+CE on `sigmoid(logits)` against a `{0,1}` target of the same shape.
    pub fn seg_loss<'g>(logits: &Var<'g>, gt: &[f32], eps: f64) -> (Var<'g>, SegLoss) {
        let p = probs(logits.value());
        let g: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
        let d = grad::dice(&p, &g, eps);
        let ce = grad::bce(&p, &g);
        let parts = SegLoss { dice: d.value, ce: ce.value };
        let grad_p: Vec<f64> = d.grad.iter().zip(&ce.grad).map(|(a, b)| a + b).collect();
        let (_, gz) = logit_grad(Terms { value: 0.0, grad: grad_p }, &p);
        (scalar_op(logits, parts.total(), gz), parts)
    }

    /// `-mean log sigmoid(critic_logits)`.
    pub fn adv_loss<'g>(critic_logits: &Var<'g>) -> (Var<'g>, f64) {
        let c = probs(critic_logits.value());
        let (v, gz) = logit_grad(grad::neg_log(&c), &c);
        (scalar_op(critic_logits, v, gz), v)
    }

    /// Masked CE on `sigmoid(logits)`; `critic` is a constant probability map.
    pub fn masked_ce<'g>(logits: &Var<'g>, gt: &[f32], critic: &[f32], t: f64) -> (Var<'g>, f64) {
        let p = probs(logits.value());
        let g: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
        let (v, gz) = logit_grad(grad::masked_ce(&p, &g, &super::indicator(critic, t)), &p);
        (scalar_op(logits, v, gz), v)
    }

    /// Critic BCE from the critic's logits on a real and a fake mask.
    pub fn critic_loss<'g>(on_gt_logits: &Var<'g>, on_pred_logits: &Var<'g>) -> (Var<'g>, f64) {
        let (cg, cp) = (probs(on_gt_logits.value()), probs(on_pred_logits.value()));
        let (real, fake) = grad::critic(&cg, &cp);
        let (vr, gr) = logit_grad(real, &cg);
        let (vf, gf) = logit_grad(fake, &cp);
        let a = scalar_op(on_gt_logits, vr, gr);
        let b = scalar_op(on_pred_logits, vf, gf);
        (a.add(&b), vr + vf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Spacing;

    const LN2: f64 = std::f64::consts::LN_2;

    fn grid(v: f32) -> ProbGrid {
        ProbGrid::full([4, 4, 4], v)
    }

    fn half_mask() -> BinaryMask {
        BinaryMask::from_fn([4, 4, 4], Spacing::ISO, |i, _, _| i < 2)
    }

    #[test]
    fn seg_loss_closed_forms() {
        let gt = half_mask();
        let perfect = ProbGrid::new([4, 4, 4], gt.to_f32()).unwrap();
        let l = dice_ce_loss(&perfect, &gt, 1e-5).unwrap();
        assert!(l.dice.abs() < 1e-6 && l.ce < 1e-6, "{l:?}");
        let miss = ProbGrid::new([4, 4, 4], gt.to_f32().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!((dice_ce_loss(&miss, &gt, 1e-5).unwrap().dice - 1.0).abs() < 1e-6);
        assert!((dice_ce_loss(&grid(0.5), &gt, 1e-5).unwrap().ce - LN2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_closed_forms() {
        assert!(generator_adv_loss(&grid(1.0)) < 1e-6);
        assert!((generator_adv_loss(&grid((-1f32).exp())) - 1.0).abs() < 1e-6);
        assert!((generator_adv_loss(&grid(0.5)) - LN2).abs() < 1e-12);
        assert!(critic_loss(&grid(1.0), &grid(0.0)).unwrap() < 1e-6);
        assert!((critic_loss(&grid(0.5), &grid(0.5)).unwrap() - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn masked_ce_closed_forms() {
        let ones = BinaryMask::from_fn([4, 4, 4], Spacing::ISO, |_, _, _| true);
        assert_eq!(uncertainty_masked_ce(&grid(0.2), &ones, &grid(0.3), 0.3).unwrap(), 0.0);
        assert!(uncertainty_masked_ce(&grid(1.0), &ones, &grid(1.0), 0.3).unwrap() < 1e-6);
        assert!((uncertainty_masked_ce(&grid(0.5), &ones, &grid(1.0), 0.3).unwrap() - LN2).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        let r = total_generator_loss(SegLoss { dice: 0.2, ce: 0.3 }, 2.0, 1.0, &w);
        assert!((r.l_total - 0.62).abs() < 1e-15);
        let r = total_generator_loss(SegLoss { dice: 1.0, ce: 0.0 }, 0.0, 0.0, &w);
        assert_eq!(r.l_total, 1.0);
        let zero = LossWeights { lambda_c: 0.0, lambda_u: 0.0, ..w };
        assert_eq!(total_generator_loss(SegLoss { dice: 0.4, ce: 0.1 }, 5.0, 7.0, &zero).l_total, 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let gt = BinaryMask::zeros([2, 2, 2], Spacing::ISO);
        assert!(matches!(dice_ce_loss(&grid(0.5), &gt, 1e-5), Err(Error::Shape(_))));
    }
}
