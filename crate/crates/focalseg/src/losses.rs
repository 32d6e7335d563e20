//! Training objectives, all built on the tape so they differentiate: overlap
//! (dice) and pixel-wise cross-entropy for the mask head, a regression
//! penalty for the boundary head, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;
pub const CE_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.5, lambda2: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Parameter("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// How the boundary head's output is penalized against its target map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RegForm {
    /// Mean squared error per image (the training criterion).
    #[default]
    Mse,
    /// Per-image Euclidean norm of the residual, unsquared.
    Norm,
}

/// [K, H, W] one-hot planes from a label mask (values < num_classes).
pub fn one_hot<S: Scalar>(mask: &[u8], num_classes: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    if mask.len() != h * w {
        return Err(Error::dim("one_hot", format!("mask len {} vs {}x{}", mask.len(), h, w)));
    }
    let mut data = vec![S::ZERO; num_classes * h * w];
    for (i, &m) in mask.iter().enumerate() {
        let k = m as usize;
        if k >= num_classes {
            return Err(Error::Parameter(format!("label {k} >= num_classes {num_classes}")));
        }
        data[k * h * w + i] = S::ONE;
    }
    Tensor::new(&[num_classes, h, w], data)
}

fn check_same_3d<S: Scalar>(tp: &Tape<S>, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
    let sa = tp.value(a).shape().to_vec();
    let sb = tp.value(b).shape();
    if sa != sb || sa.len() != 3 {
        return Err(Error::dim(op, format!("{:?} vs {:?}", sa, sb)));
    }
    Ok((sa[0], sa[1] * sa[2]))
}

/// Soft overlap loss, averaged over the foreground classes only:
/// mean_k>0 [ 1 − (2 Σ p_k g_k + ε) / (Σ p_k + Σ g_k + ε) ].
pub fn dice_loss<S: Scalar>(tp: &mut Tape<S>, probs: Var, onehot: Var) -> Result<Var> {
    let (k, _) = check_same_3d(tp, "dice_loss", probs, onehot)?;
    if k < 2 {
        return Err(Error::dim("dice_loss", "needs at least 2 class planes"));
    }
    let eps = S::from_f64(DICE_EPS);
    let pg = tp.mul(probs, onehot)?;
    let mut acc: Option<Var> = None;
    for cls in 1..k {
        let inter = tp.slice0(pg, cls, 1)?;
        let inter = tp.sum_all(inter)?;
        let p = tp.slice0(probs, cls, 1)?;
        let p = tp.sum_all(p)?;
        let g = tp.slice0(onehot, cls, 1)?;
        let g = tp.sum_all(g)?;
        let num = tp.affine(inter, S::from_f64(2.0), eps)?;
        let den = tp.add(p, g)?;
        let den = tp.affine(den, S::ONE, eps)?;
        let frac = tp.div(num, den)?;
        let one_minus = tp.affine(frac, S::from_f64(-1.0), S::ONE)?;
        acc = Some(match acc {
            Some(a) => tp.add(a, one_minus)?,
            None => one_minus,
        });
    }
    tp.scale(acc.unwrap(), S::from_f64(1.0 / (k - 1) as f64))
}

/// Mean over pixels of −log p(true class), probabilities clipped away from 0.
pub fn ce_loss<S: Scalar>(tp: &mut Tape<S>, probs: Var, onehot: Var) -> Result<Var> {
    let (_, px) = check_same_3d(tp, "ce_loss", probs, onehot)?;
    let clipped = tp.clip(probs, S::from_f64(CE_CLIP), S::from_f64(1.0 - CE_CLIP))?;
    let lp = tp.log(clipped)?;
    let picked = tp.mul(lp, onehot)?;
    let total = tp.sum_all(picked)?;
    tp.scale(total, S::from_f64(-1.0 / px as f64))
}

/// Mask-head objective: dice + cross-entropy.
pub fn seg_loss<S: Scalar>(tp: &mut Tape<S>, probs: Var, onehot: Var) -> Result<Var> {
    let d = dice_loss(tp, probs, onehot)?;
    let c = ce_loss(tp, probs, onehot)?;
    tp.add(d, c)
}

/// Boundary-head objective averaged over a batch of (prediction, target)
/// pairs of identical shape.
pub fn reg_loss<S: Scalar>(
    tp: &mut Tape<S>,
    pairs: &[(Var, Var)],
    form: RegForm,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Parameter("reg_loss needs at least one pair".into()));
    }
    let mut acc: Option<Var> = None;
    for &(pred, target) in pairs {
        if tp.value(pred).shape() != tp.value(target).shape() {
            return Err(Error::dim(
                "reg_loss",
                format!("{:?} vs {:?}", tp.value(pred).shape(), tp.value(target).shape()),
            ));
        }
        let diff = tp.sub(pred, target)?;
        let sq = tp.mul(diff, diff)?;
        let per_image = match form {
            RegForm::Mse => tp.mean_all(sq)?,
            RegForm::Norm => {
                let s = tp.sum_all(sq)?;
                tp.sqrt(s)?
            }
        };
        acc = Some(match acc {
            Some(a) => tp.add(a, per_image)?,
            None => per_image,
        });
    }
    tp.scale(acc.unwrap(), S::from_f64(1.0 / pairs.len() as f64))
}

/// λ₁·seg + λ₂·reg; with no regression term only the first product remains.
pub fn total_loss<S: Scalar>(
    tp: &mut Tape<S>,
    seg: Var,
    reg: Option<Var>,
    weights: LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let a = tp.scale(seg, S::from_f64(weights.lambda1))?;
    match reg {
        Some(r) => {
            let b = tp.scale(r, S::from_f64(weights.lambda2))?;
            tp.add(a, b)
        }
        None => Ok(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn scalar(tp: &Tape<f64>, v: Var) -> f64 {
        tp.value(v).item()
    }

    #[test]
    fn one_hot_places_single_one_per_pixel() {
        let t = one_hot::<f64>(&[0, 1, 1, 0], 2, 2, 2).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data(), &[1., 0., 0., 1., 0., 1., 1., 0.]);
        assert!(one_hot::<f64>(&[2, 0, 0, 0], 2, 2, 2).is_err());
    }

    #[test]
    fn dice_zero_on_perfect_one_on_disjoint() {
        let mut tp = Tape::<f64>::new();
        let g = tp.constant(one_hot(&[0, 1, 1, 0], 2, 2, 2).unwrap());
        let d = dice_loss(&mut tp, g, g).unwrap();
        assert!(scalar(&tp, d) < 1e-5);

        // confident and fully wrong
        let mut tp = Tape::<f64>::new();
        let p = tp.constant(one_hot(&[1, 0, 0, 1], 2, 2, 2).unwrap());
        let g = tp.constant(one_hot(&[0, 1, 1, 0], 2, 2, 2).unwrap());
        let d = dice_loss(&mut tp, p, g).unwrap();
        assert!((scalar(&tp, d) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn dice_uniform_probs_pixel_count_form() {
        // 0.5 everywhere on a 3x3, 4 foreground pixels
        let mask = [0, 1, 1, 0, 1, 0, 0, 1, 0];
        let n = 9.0;
        let sg = 4.0;
        let mut tp = Tape::<f64>::new();
        let p = tp.constant(Tensor::full(&[2, 3, 3], 0.5));
        let g = tp.constant(one_hot(&mask, 2, 3, 3).unwrap());
        let d = dice_loss(&mut tp, p, g).unwrap();
        let want = 1.0 - (sg + DICE_EPS) / (0.5 * n + sg + DICE_EPS);
        assert!((scalar(&tp, d) - want).abs() < 1e-12);
    }

    #[test]
    fn ce_reference_points() {
        let mask = [0, 1, 1, 0];
        let mut tp = Tape::<f64>::new();
        let g = tp.constant(one_hot(&mask, 2, 2, 2).unwrap());
        let c = ce_loss(&mut tp, g, g).unwrap();
        // log(1-1e-7) per pixel
        assert!(scalar(&tp, c).abs() < 1e-6);

        let mut tp = Tape::<f64>::new();
        let p = tp.constant(Tensor::full(&[2, 2, 2], 0.5));
        let g = tp.constant(one_hot(&mask, 2, 2, 2).unwrap());
        let c = ce_loss(&mut tp, p, g).unwrap();
        assert!((scalar(&tp, c) - 2f64.ln()).abs() < 1e-12);

        // fully wrong and confident: clipped ceiling
        let mut tp = Tape::<f64>::new();
        let p = tp.constant(one_hot(&[1, 0, 0, 1], 2, 2, 2).unwrap());
        let g = tp.constant(one_hot(&mask, 2, 2, 2).unwrap());
        let c = ce_loss(&mut tp, p, g).unwrap();
        assert!((scalar(&tp, c) - (-(CE_CLIP.ln()))).abs() < 1e-6);
    }

    #[test]
    fn reg_constant_offset_and_batch_invariance() {
        let mut tp = Tape::<f64>::new();
        let t = tp.constant(Tensor::full(&[1, 4, 4], 0.3));
        let p = tp.constant(Tensor::full(&[1, 4, 4], 0.4));
        let one = reg_loss(&mut tp, &[(p, t)], RegForm::Mse).unwrap();
        assert!((scalar(&tp, one) - 0.01).abs() < 1e-12);
        let three = reg_loss(&mut tp, &[(p, t), (p, t), (p, t)], RegForm::Mse).unwrap();
        assert!((scalar(&tp, three) - 0.01).abs() < 1e-12);
        let zero = reg_loss(&mut tp, &[(t, t)], RegForm::Mse).unwrap();
        assert_eq!(scalar(&tp, zero), 0.0);
    }

    #[test]
    fn reg_norm_form_is_unsquared() {
        let mut tp = Tape::<f64>::new();
        let t = tp.constant(Tensor::zeros(&[1, 2, 2]));
        let p = tp.constant(Tensor::full(&[1, 2, 2], 0.5));
        let n = reg_loss(&mut tp, &[(p, t)], RegForm::Norm).unwrap();
        // sqrt(4 * 0.25) = 1
        assert!((scalar(&tp, n) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_is_exact_weighted_sum() {
        let mut tp = Tape::<f64>::new();
        let seg = tp.constant(Tensor::full(&[1], 1.0));
        let reg = tp.constant(Tensor::full(&[1], 0.5));
        let t = total_loss(&mut tp, seg, Some(reg), LossWeights::default()).unwrap();
        assert!((scalar(&tp, t) - 0.75).abs() < 1e-15);
        let t0 = total_loss(&mut tp, seg, Some(reg), LossWeights { lambda1: 0.5, lambda2: 0.0 })
            .unwrap();
        assert!((scalar(&tp, t0) - 0.5).abs() < 1e-15);
        let none = total_loss(&mut tp, seg, None, LossWeights::default()).unwrap();
        assert!((scalar(&tp, none) - 0.5).abs() < 1e-15);
        assert!(total_loss(&mut tp, seg, None, LossWeights { lambda1: -1.0, lambda2: 0.5 })
            .is_err());
    }

    #[test]
    fn losses_differentiate_through_softmax() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let logits = gradcheck::signed(&[2, 4, 4], &mut rng);
        let onehot = one_hot::<f64>(
            &[0, 1, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 1, 0, 1],
            2,
            4,
            4,
        )
        .unwrap();
        let report = gradcheck::check(
            &[logits],
            move |tp, vars| {
                let g = tp.constant(onehot.clone());
                let probs = tp.softmax(vars[0], 0)?;
                seg_loss(tp, probs, g)
            },
            None,
            0,
        )
        .unwrap();
        assert!(report.ok(1e-4), "max_rel {:.3e}", report.max_rel);

        let pred = uniform(&[1, 3, 3], 0.0, 1.0, &mut rng);
        let target = uniform(&[1, 3, 3], 0.0, 1.0, &mut rng);
        for form in [RegForm::Mse, RegForm::Norm] {
            let t2 = target.clone();
            let report = gradcheck::check(
                &[pred.clone()],
                move |tp, vars| {
                    let t = tp.constant(t2.clone());
                    reg_loss(tp, &[(vars[0], t)], form)
                },
                None,
                1,
            )
            .unwrap();
            assert!(report.ok(1e-4), "{form:?} max_rel {:.3e}", report.max_rel);
        }
    }

    #[test]
    fn dice_rejects_mismatched_shapes() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(&[2, 2, 2]));
        let b = tp.constant(Tensor::zeros(&[2, 2, 3]));
        assert!(dice_loss(&mut tp, a, b).is_err());
        assert!(ce_loss(&mut tp, a, b).is_err());
    }
}
