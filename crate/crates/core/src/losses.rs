//! Loss functions of the objective, all built from differentiable graph ops.
//!
//! Every log-of-sum is evaluated with the row maximum subtracted first. The
//! maximum enters the graph as a constant; the shift cancels analytically so
//! gradients are unchanged.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn;

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Adversarial,
    SupContrastive,
    CrossDomainContrastive,
}

/// A scalar loss node attached to the step graph.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub node: NodeId,
    pub kind: LossKind,
    pub value: f64,
}

impl LossValue {
    fn new(g: &Graph, node: NodeId, kind: LossKind) -> Self {
        let value = g.value(node).item().expect("loss nodes are scalar");
        LossValue { node, kind, value }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")))
    }
}

fn check_rows(op: &'static str, g: &Graph, x: NodeId, n: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[0] != n {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![n],
        });
    }
    Ok(())
}

/// Row max of a rank-2 value as a `[rows × 1]` constant.
fn row_max_constant(g: &mut Graph, x: NodeId) -> NodeId {
    let v = g.value(x);
    let maxes: Vec<f64> = (0..v.rows())
        .map(|r| v.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let n = maxes.len();
    g.constant(Tensor::raw(vec![n, 1], maxes))
}

fn one_hot(rows: usize, cols: usize, hot: impl Fn(usize) -> usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        data[r * cols + hot(r)] = 1.0;
    }
    Tensor::raw(vec![rows, cols], data)
}

/// Mean over rows of `logsumexp(row) - row[target]`.
fn softmax_xent_rows(g: &mut Graph, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    let (rows, cols) = (g.value(logits).rows(), g.value(logits).cols());
    let m = row_max_constant(g, logits);
    let shifted = g.sub(logits, m)?;
    let e = g.exp(shifted);
    let s = g.sum_axis_keep(e, 1)?;
    let lse = g.log(s);
    let mask = g.constant(one_hot(rows, cols, |r| targets[r]));
    let picked = g.mul(shifted, mask)?;
    let picked = g.sum_axis_keep(picked, 1)?;
    let per_row = g.sub(lse, picked)?;
    g.mean(per_row)
}

/// Mean multiclass cross-entropy of raw `logits` `[B × N]` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<LossValue> {
    check_rows("cross_entropy", g, logits, labels.len())?;
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cross_entropy on an empty batch".into()));
    }
    let n = g.value(logits).cols();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            num_classes: n,
        });
    }
    let node = softmax_xent_rows(g, logits, labels)?;
    Ok(LossValue::new(g, node, LossKind::CrossEntropy))
}

/// `mean(log d_tgt) + mean(log(1 - d_src))` on domain probabilities, where a
/// probability is the discriminator's belief that a sample is from the target
/// domain. The discriminator maximizes this value, the generator minimizes it.
pub fn adversarial_loss(g: &mut Graph, d_src: NodeId, d_tgt: NodeId) -> Result<LossValue> {
    for p in [d_src, d_tgt] {
        let v = g.value(p);
        if v.numel() == 0 {
            return Err(Error::InvalidArgument("adversarial loss on an empty batch".into()));
        }
        if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, &x)| !(x > 0.0 && x < 1.0)) {
            return Err(Error::ProbabilityOutOfRange { index, value });
        }
    }
    let log_t = g.log(d_tgt);
    let term_t = g.mean(log_t)?;
    let neg_s = g.neg(d_src);
    let one_minus_s = g.add_scalar(neg_s, 1.0);
    let log_s = g.log(one_minus_s);
    let term_s = g.mean(log_s)?;
    let node = g.add(term_t, term_s)?;
    Ok(LossValue::new(g, node, LossKind::Adversarial))
}

/// Same value as [`adversarial_loss`] on `sigmoid` of the logits, computed with
/// `log σ(x)` and `log(1 − σ(x)) = log σ(−x)` so it never saturates to `-inf`.
pub fn adversarial_loss_from_logits(g: &mut Graph, src_logits: NodeId, tgt_logits: NodeId) -> Result<LossValue> {
    if g.value(src_logits).numel() == 0 || g.value(tgt_logits).numel() == 0 {
        return Err(Error::InvalidArgument("adversarial loss on an empty batch".into()));
    }
    let log_t = g.log_sigmoid(tgt_logits);
    let term_t = g.mean(log_t)?;
    let neg = g.neg(src_logits);
    let log_s = g.log_sigmoid(neg);
    let term_s = g.mean(log_s)?;
    let node = g.add(term_t, term_s)?;
    Ok(LossValue::new(g, node, LossKind::Adversarial))
}

/// Supervised contrastive loss over unit-norm rows `z` `[B × d]`.
///
/// Every ordered pair `(a, p)`, `a != p`, with equal labels contributes
/// `-log(exp(s_ap) / (exp(s_ap) + Σ_n exp(s_an)))` with `s = zᵀz / τ` and `n`
/// ranging over samples whose label differs from the anchor's. Other positives
/// are not in the denominator. Returns the mean over pairs.
pub fn sup_contrastive(g: &mut Graph, z: NodeId, labels: &[usize], tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    check_rows("sup_contrastive", g, z, labels.len())?;
    let b = labels.len();
    let mut pos = vec![0.0; b * b];
    let mut neg = vec![0.0; b * b];
    let mut pairs = 0usize;
    for a in 0..b {
        for o in 0..b {
            if labels[a] != labels[o] {
                neg[a * b + o] = 1.0;
            } else if a != o {
                pos[a * b + o] = 1.0;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::DegenerateBatch);
    }

    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / tau);
    let m = row_max_constant(g, sim);
    let shifted = g.sub(sim, m)?;
    let e = g.exp(shifted);
    let neg_mask = g.constant(Tensor::raw(vec![b, b], neg));
    let neg_e = g.mul(e, neg_mask)?;
    let neg_sum = g.sum_axis_keep(neg_e, 1)?;
    let denom = g.add(e, neg_sum)?;
    let log_denom = g.log(denom);
    let per_pair = g.sub(log_denom, shifted)?;
    let pos_mask = g.constant(Tensor::raw(vec![b, b], pos));
    let masked = g.mul(per_pair, pos_mask)?;
    let total = g.sum(masked);
    let node = g.scale(total, 1.0 / pairs as f64);
    Ok(LossValue::new(g, node, LossKind::SupContrastive))
}

fn present_classes(labels: &[usize]) -> Vec<usize> {
    let mut c = labels.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

/// Normalized per-class batch centroids of `z`, one row per entry of `classes`.
fn class_centroids(g: &mut Graph, z: NodeId, labels: &[usize], classes: &[usize]) -> Result<NodeId> {
    let b = labels.len();
    let k = classes.len();
    let mut member = vec![0.0; k * b];
    for (ci, &c) in classes.iter().enumerate() {
        let count = labels.iter().filter(|&&l| l == c).count() as f64;
        for (j, &l) in labels.iter().enumerate() {
            if l == c {
                member[ci * b + j] = 1.0 / count;
            }
        }
    }
    let m = g.constant(Tensor::raw(vec![k, b], member));
    let mean = g.matmul(m, z)?;
    let v = g.value(mean);
    for (ci, &c) in classes.iter().enumerate() {
        let norm = v.row(ci).iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "NaN centroid: class {c} has centroid norm {norm:e}"
            )));
        }
    }
    nn::l2_normalize(g, mean)
}

/// Cross-domain contrastive loss on per-class batch centroids.
///
/// Centroids `c_s^i`, `c_t^k` are the normalized means of the unit rows of each
/// domain carrying label `i` (pseudo-label `k` on the target side). Every class
/// present in both batches contributes
/// `-log(exp(c_s^iᵀc_t^i/τ) / (exp(c_s^iᵀc_t^i/τ) + Σ_{k≠i} exp(c_s^iᵀc_t^k/τ)))`
/// where `k` ranges over classes present in the target batch. Returns the mean
/// over contributing classes.
pub fn cross_domain_contrastive(
    g: &mut Graph,
    z_s: NodeId,
    y_s: &[usize],
    z_t: NodeId,
    y_t: &[usize],
    tau: f64,
) -> Result<LossValue> {
    check_tau(tau)?;
    check_rows("cross_domain_contrastive", g, z_s, y_s.len())?;
    check_rows("cross_domain_contrastive", g, z_t, y_t.len())?;
    let src_classes = present_classes(y_s);
    let tgt_classes = present_classes(y_t);
    let shared: Vec<usize> = src_classes
        .iter()
        .copied()
        .filter(|c| tgt_classes.binary_search(c).is_ok())
        .collect();
    if shared.is_empty() {
        return Err(Error::NoCrossDomainAnchors);
    }

    let cs = class_centroids(g, z_s, y_s, &src_classes)?;
    let ct = class_centroids(g, z_t, y_t, &tgt_classes)?;
    let select = one_hot(shared.len(), src_classes.len(), |r| {
        src_classes.binary_search(&shared[r]).unwrap()
    });
    let select = g.constant(select);
    let anchors = g.matmul(select, cs)?;
    let ctt = g.transpose(ct)?;
    let logits = g.matmul(anchors, ctt)?;
    let logits = g.scale(logits, 1.0 / tau);
    let targets: Vec<usize> = shared
        .iter()
        .map(|c| tgt_classes.binary_search(c).unwrap())
        .collect();
    let node = softmax_xent_rows(g, logits, &targets)?;
    Ok(LossValue::new(g, node, LossKind::CrossDomainContrastive))
}
