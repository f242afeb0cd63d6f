//! Dice + cross-entropy segmentation loss with per-voxel provenance weights.
//!
//! Targets are per-class weight maps `[B, K, spatial...]`: one-hot for hard
//! labels, soft for Mixup. Weight maps are `[B or 1, 1, spatial...]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::maskgen::Mask;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Probabilities are clamped from below before the log.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of voxels supervised by pseudo-labels.
    pub alpha: f64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            dice_weight: 0.5,
            ce_weight: 0.5,
            dice_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0)
            || self.dice_weight < 0.0
            || self.ce_weight < 0.0
            || self.dice_weight + self.ce_weight <= 0.0
            || !(self.dice_eps > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "loss config needs alpha > 0, non-negative weights not both zero, eps > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_in: f64,
    pub l_out: f64,
    pub l_all: f64,
    pub dice_in: f64,
    pub ce_in: f64,
    pub dice_out: f64,
    pub ce_out: f64,
    /// Set when some weight map was identically zero.
    pub empty_weight: bool,
}

/// One weighted segmentation loss and its parts.
#[derive(Clone, Debug)]
pub struct SegLoss<N> {
    pub total: N,
    pub dice: N,
    pub ce: N,
    pub empty_weight: bool,
}

/// Per-voxel cross-entropy `−Σ_c t_c · log max(q_c, CE_FLOOR)`, shaped `[B, 1, ...]`.
pub fn per_voxel_ce<T: Scalar, G: Graph<T>>(g: &mut G, q: &G::Node, target: &G::Node) -> Result<G::Node> {
    let (qs, ts) = (g.value(q).shape(), g.value(target).shape());
    if qs != ts {
        return Err(Error::shape("per_voxel_ce", qs, ts));
    }
    let logq = g.log_clamped(q, T::of(CE_FLOOR));
    let prod = g.mul(target, &logq)?;
    let s = g.sum_channels(&prod)?;
    Ok(g.scale(&s, -T::one()))
}

/// Soft Dice with voxel weights, averaged over the foreground classes `1..K`:
/// `1 − (2 Σ w q_c t_c + ε) / (Σ w q_c + Σ w t_c + ε)`.
pub fn weighted_dice<T: Scalar, G: Graph<T>>(
    g: &mut G,
    q: &G::Node,
    target: &G::Node,
    w: Option<&G::Node>,
    eps: f64,
) -> Result<G::Node> {
    let qshape = g.value(q).shape().to_vec();
    if qshape.len() < 2 || qshape[1] < 2 {
        return Err(Error::InvalidShape {
            op: "weighted_dice",
            detail: format!("expected [B, K>=2, ...], got {qshape:?}"),
        });
    }
    let k = qshape[1];
    let (qw, tw) = match w {
        Some(w) => (g.mul(q, w)?, g.mul(target, w)?),
        None => (q.clone(), target.clone()),
    };
    let inter = {
        let p = g.mul(&qw, target)?;
        g.channel_sums(&p)?
    };
    let qsum = g.channel_sums(&qw)?;
    let tsum = g.channel_sums(&tw)?;
    let eps = T::of(eps);
    let num = {
        let x = g.scale(&inter, T::of(2.0));
        g.add_scalar(&x, eps)
    };
    let den = {
        let x = g.add(&qsum, &tsum)?;
        g.add_scalar(&x, eps)
    };
    let ratio = g.div(&num, &den)?;
    let fg_sel = g.constant(Tensor::from_fn(&[k], |c| if c == 0 { T::zero() } else { T::one() }));
    let picked = g.mul(&ratio, &fg_sel)?;
    let total = g.reduce_sum(&picked);
    let mean = g.scale(&total, -T::one() / T::of((k - 1) as f64));
    Ok(g.add_scalar(&mean, T::one()))
}

/// `ce_weight · mean(w · ce) / mean(w) + dice_weight · weighted_dice`.
///
/// With `w = None` the plain unweighted loss is computed. An all-zero weight
/// map contributes exactly zero and sets `empty_weight`.
pub fn seg_loss<T: Scalar, G: Graph<T>>(
    g: &mut G,
    q: &G::Node,
    target: &G::Node,
    w: Option<&Tensor<T>>,
    cfg: &LossConfig,
) -> Result<SegLoss<G::Node>> {
    let ce_map = per_voxel_ce(g, q, target)?;
    let empty = w.is_some_and(|w| w.data().iter().all(|&v| v == T::zero()));
    if empty {
        let zero = g.constant(Tensor::scalar(T::zero()));
        return Ok(SegLoss {
            total: zero.clone(),
            dice: zero.clone(),
            ce: zero,
            empty_weight: true,
        });
    }
    let wn = w.map(|w| g.constant(w.clone()));
    let ce = match (&wn, w) {
        (Some(wn), Some(wt)) => {
            let weighted = g.mul(wn, &ce_map)?;
            // mean of w broadcast to the loss-map shape
            let reps = g.value(&ce_map).len() / wt.len();
            let wmean = wt.data().iter().copied().sum::<T>() * T::of(reps as f64)
                / T::of(g.value(&ce_map).len() as f64);
            let m = g.reduce_mean(&weighted);
            g.scale(&m, T::one() / wmean)
        }
        _ => g.reduce_mean(&ce_map),
    };
    let dice = weighted_dice(g, q, target, wn.as_ref(), cfg.dice_eps)?;
    let a = g.scale(&ce, T::of(cfg.ce_weight));
    let b = g.scale(&dice, T::of(cfg.dice_weight));
    let total = g.add(&a, &b)?;
    Ok(SegLoss {
        total,
        dice,
        ce,
        empty_weight: false,
    })
}

/// Weight maps for the two mixing directions: inward images keep labeled
/// voxels where `M = 1`, outward images where `M = 0`; pseudo-labelled voxels
/// get `alpha`.
pub fn bcp_weights<T: Scalar>(masks: &[Mask], alpha: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let a = T::of(alpha);
    let stack = |f: &dyn Fn(&Mask) -> Tensor<T>| -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = masks.iter().map(f).collect();
        let t = Tensor::stack(&parts)?;
        // [n, 1, 1, spatial...] -> [n, 1, spatial...]
        let mut shape = t.shape().to_vec();
        shape.remove(1);
        t.reshape(shape)
    };
    Ok((
        stack(&|m| m.weights(T::one(), a))?,
        stack(&|m| m.weights(a, T::one()))?,
    ))
}

/// The two directional losses and their sum.
pub struct BcpLoss<N> {
    pub l_in: N,
    pub l_out: N,
    pub l_all: N,
    pub report: LossReport,
}

/// Bidirectional loss with one mask shared by every pair in the batch.
pub fn bcp_loss<T: Scalar, G: Graph<T>>(
    g: &mut G,
    q_in: &G::Node,
    q_out: &G::Node,
    y_in: &[LabelMap],
    y_out: &[LabelMap],
    mask: &Mask,
    cfg: &LossConfig,
) -> Result<BcpLoss<G::Node>> {
    bcp_loss_per_pair(g, q_in, q_out, y_in, y_out, std::slice::from_ref(mask), cfg)
}

/// Bidirectional loss; `masks` holds either one shared mask or one per pair.
pub fn bcp_loss_per_pair<T: Scalar, G: Graph<T>>(
    g: &mut G,
    q_in: &G::Node,
    q_out: &G::Node,
    y_in: &[LabelMap],
    y_out: &[LabelMap],
    masks: &[Mask],
    cfg: &LossConfig,
) -> Result<BcpLoss<G::Node>> {
    cfg.validate()?;
    if masks.len() != 1 && (masks.len() != y_in.len() || masks.len() != y_out.len()) {
        return Err(Error::InvalidArgument(format!(
            "need 1 or {} masks, got {}",
            y_in.len(),
            masks.len()
        )));
    }
    for m in masks {
        for y in y_in.iter().chain(y_out) {
            if y.shape() != m.shape() {
                return Err(Error::shape("bcp_loss", y.shape(), m.shape()));
            }
        }
    }
    let (w_in, w_out) = bcp_weights::<T>(masks, cfg.alpha)?;
    let t_in = g.constant(LabelMap::stack_one_hot(y_in)?);
    let t_out = g.constant(LabelMap::stack_one_hot(y_out)?);
    let lin = seg_loss(g, q_in, &t_in, Some(&w_in), cfg)?;
    let lout = seg_loss(g, q_out, &t_out, Some(&w_out), cfg)?;
    let l_all = g.add(&lin.total, &lout.total)?;
    let report = LossReport {
        l_in: g.scalar_value(&lin.total).as_f64(),
        l_out: g.scalar_value(&lout.total).as_f64(),
        l_all: g.scalar_value(&l_all).as_f64(),
        dice_in: g.scalar_value(&lin.dice).as_f64(),
        ce_in: g.scalar_value(&lin.ce).as_f64(),
        dice_out: g.scalar_value(&lout.dice).as_f64(),
        ce_out: g.scalar_value(&lout.ce).as_f64(),
        empty_weight: lin.empty_weight || lout.empty_weight,
    };
    Ok(BcpLoss {
        l_in: lin.total,
        l_out: lout.total,
        l_all,
        report,
    })
}
