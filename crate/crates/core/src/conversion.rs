//! Probability conversion from atoms to dataset labels, the cross-entropy
//! family of losses, the closed-form logit gradient and hierarchical decoding.
//!
//! A dataset label's probability is the sum of the softmax probabilities of
//! the atoms in its group. For a pixel whose ground-truth label has atom
//! group `G`, the loss is `-log Σ_{a∈G} σ_a` and its gradient with respect to
//! logit `m` is `σ_m - [m ∈ G]`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::raster_io::{ClassRaster, ProbRaster};
use crate::taxonomy::{HierarchyNode, LabelSpace};

/// Lower bound applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;

/// A loss value plus whether the log floor had to be applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Loss {
    pub value: f64,
    pub clamped: bool,
}

fn guarded_ln(p: f64, clamped: &mut bool) -> f64 {
    if p < LOG_FLOOR {
        *clamped = true;
        LOG_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Sums atom probabilities into the label probabilities of `space`.
pub fn group_sum(sigma: &[f64], space: &LabelSpace) -> Result<Vec<f64>> {
    if sigma.len() != space.atom_count() {
        return Err(invalid(format!(
            "probability vector has {} entries, label space covers {} atoms",
            sigma.len(),
            space.atom_count()
        )));
    }
    Ok(space
        .groups()
        .iter()
        .map(|g| g.iter().map(|&a| sigma[a]).sum())
        .collect())
}

/// Applies [`group_sum`] at every pixel of an atom probability raster.
pub fn group_sum_raster(sigma: &ProbRaster, space: &LabelSpace) -> Result<ProbRaster> {
    let mut data = Vec::with_capacity(sigma.pixel_count() * space.label_count());
    for px in sigma.pixels() {
        data.extend(group_sum(px, space)?);
    }
    ProbRaster::new_unchecked(sigma.width(), sigma.height(), space.label_count(), data)
}

/// Mean over non-ignored pixels of `-log s_{p, y_p}` where `s` is the
/// group-summed label distribution. Zero when every pixel is ignored.
pub fn loss_per_image(
    labels: &ClassRaster,
    sigma: &ProbRaster,
    space: &LabelSpace,
    ignore: &BTreeSet<u16>,
) -> Result<Loss> {
    if labels.width() != sigma.width() || labels.height() != sigma.height() {
        return Err(invalid(
            "label raster and probability raster differ in size",
        ));
    }
    if sigma.channels() != space.atom_count() {
        return Err(invalid(format!(
            "probability raster has {} channels, label space covers {} atoms",
            sigma.channels(),
            space.atom_count()
        )));
    }
    let mut clamped = false;
    let mut total = 0.0;
    let mut count = 0usize;
    for (&label, px) in labels.data().iter().zip(sigma.pixels()) {
        if ignore.contains(&label) {
            continue;
        }
        let group = space.groups().get(label as usize).ok_or_else(|| {
            invalid(format!(
                "label {label} out of range for {} labels",
                space.label_count()
            ))
        })?;
        let s: f64 = group.iter().map(|&a| px[a]).sum();
        total -= guarded_ln(s, &mut clamped);
        count += 1;
    }
    let value = if count == 0 {
        0.0
    } else {
        total / count as f64
    };
    Ok(Loss { value, clamped })
}

fn check_group(len: usize, gt_group: &[usize]) -> Result<()> {
    if gt_group.is_empty() {
        return Err(invalid("ground-truth atom group is empty"));
    }
    match gt_group.iter().find(|&&a| a >= len) {
        Some(a) => Err(invalid(format!("atom {a} out of range for {len} atoms"))),
        None => Ok(()),
    }
}

/// Gradient of `-log Σ_{a∈group} σ_a` with respect to the logits:
/// `g_m = σ_m - [m ∈ group]·σ_m / Σ_{a∈group} σ_a`.
///
/// For a singleton group this is `σ_m - [m ∈ group]`, the flat softmax
/// cross-entropy gradient. If the group mass underflows to zero the
/// in-group share is taken as uniform.
pub fn grad_logits(sigma: &[f64], gt_group: &[usize]) -> Result<Vec<f64>> {
    check_group(sigma.len(), gt_group)?;
    let mut g = sigma.to_vec();
    if let [a] = gt_group {
        g[*a] -= 1.0;
        return Ok(g);
    }
    let mass: f64 = gt_group.iter().map(|&a| sigma[a]).sum();
    for &a in gt_group {
        g[a] -= if mass > 0.0 {
            sigma[a] / mass
        } else {
            1.0 / gt_group.len() as f64
        };
    }
    Ok(g)
}

/// `g_m = σ_m - [m ∈ group]`, the closed form that treats every in-group
/// atom as the target. It agrees with [`grad_logits`] only for singleton
/// groups; its entries sum to `1 - |group|`.
pub fn iverson_grad_logits(sigma: &[f64], gt_group: &[usize]) -> Result<Vec<f64>> {
    check_group(sigma.len(), gt_group)?;
    let mut g = sigma.to_vec();
    for &a in gt_group {
        g[a] -= 1.0;
    }
    Ok(g)
}

/// `-log Σ_{a∈group} softmax(logits)_a`, evaluated in log-space.
pub fn group_nll(logits: &[f64], group: &[usize]) -> f64 {
    log_sum_exp(logits.iter().copied()) - log_sum_exp(group.iter().map(|&a| logits[a]))
}

/// Largest absolute difference between [`grad_logits`] and central finite
/// differences of [`group_nll`] with step `epsilon`.
pub fn finite_diff_check(logits: &[f64], gt_group: &[usize], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(invalid("logits must be finite"));
    }
    let analytic = grad_logits(&softmax(logits), gt_group)?;
    let mut probe = logits.to_vec();
    let mut worst = 0.0f64;
    for (m, &a) in analytic.iter().enumerate() {
        let orig = probe[m];
        probe[m] = orig + epsilon;
        let up = group_nll(&probe, gt_group);
        probe[m] = orig - epsilon;
        let down = group_nll(&probe, gt_group);
        probe[m] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max((numeric - a).abs());
    }
    Ok(worst)
}

/// Summary of [`random_gradcheck`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub trials: usize,
    pub max_deviation: f64,
    /// Atom count and group of the worst trial.
    pub worst_atoms: usize,
    pub worst_group: Vec<usize>,
}

/// Runs [`finite_diff_check`] on `trials` random cases. Each case draws an
/// atom count in `2..=max_atoms`, logits uniform in `[-5, 5)` and a random
/// non-empty group.
pub fn random_gradcheck(
    max_atoms: usize,
    trials: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradcheckSummary> {
    if max_atoms < 2 {
        return Err(invalid("at least two atoms are needed"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradcheckSummary {
        trials,
        max_deviation: 0.0,
        worst_atoms: 0,
        worst_group: Vec::new(),
    };
    for _ in 0..trials {
        let a = rng.random_range(2..=max_atoms);
        let logits: Vec<f64> = (0..a).map(|_| rng.random_range(-5.0..5.0)).collect();
        let size = rng.random_range(1..=a);
        let mut group = index::sample(&mut rng, a, size).into_vec();
        group.sort_unstable();
        let dev = finite_diff_check(&logits, &group, epsilon)?;
        if dev > summary.max_deviation || summary.worst_group.is_empty() {
            summary.max_deviation = summary.max_deviation.max(dev);
            summary.worst_atoms = a;
            summary.worst_group = group;
        }
    }
    Ok(summary)
}

/// `-Σ_i p_i log s_i`; entries with `p_i = 0` contribute nothing.
pub fn dense_cce(target: &[f64], sigma: &[f64]) -> Result<Loss> {
    if target.len() != sigma.len() {
        return Err(invalid(format!(
            "target has {} entries, prediction has {}",
            target.len(),
            sigma.len()
        )));
    }
    let mut clamped = false;
    let mut value = 0.0;
    for (&p, &s) in target.iter().zip(sigma) {
        if p != 0.0 {
            value -= p * guarded_ln(s, &mut clamped);
        }
    }
    Ok(Loss { value, clamped })
}

/// [`dense_cce`] with a one-hot target at `label`.
pub fn sparse_cce(label: usize, sigma: &[f64]) -> Result<Loss> {
    if label >= sigma.len() {
        return Err(invalid(format!(
            "label {label} out of range for {} classes",
            sigma.len()
        )));
    }
    let mut target = vec![0.0; sigma.len()];
    target[label] = 1.0;
    dense_cce(&target, sigma)
}

/// Lowest index of the maximum entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel hierarchical decision: take the root classifier's argmax and
/// descend while the chosen class has a child classifier. Output ids index
/// [`HierarchyNode::leaf_labels`].
pub fn hierarchical_decode(
    tree: &HierarchyNode,
    probs: &BTreeMap<String, ProbRaster>,
) -> Result<ClassRaster> {
    let leaves = tree.leaf_labels();
    let leaf_id: BTreeMap<&str, u16> = leaves
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i as u16))
        .collect();
    if leaves.len() > u16::MAX as usize + 1 {
        return Err(invalid("too many leaf classes for a 16-bit raster"));
    }
    let root = probs.get(&tree.name).ok_or_else(|| {
        invalid(format!(
            "missing probabilities for classifier `{}`",
            tree.name
        ))
    })?;
    let (width, height) = (root.width(), root.height());
    for node in tree.nodes() {
        let raster = probs.get(&node.name).ok_or_else(|| {
            invalid(format!(
                "missing probabilities for classifier `{}`",
                node.name
            ))
        })?;
        if raster.width() != width || raster.height() != height {
            return Err(invalid(format!(
                "classifier `{}` raster size differs from the root",
                node.name
            )));
        }
        if raster.channels() != node.classes.len() {
            return Err(invalid(format!(
                "classifier `{}` has {} classes but {} channels",
                node.name,
                node.classes.len(),
                raster.channels()
            )));
        }
    }
    let mut out = Vec::with_capacity(width * height);
    for p in 0..width * height {
        let mut node = tree;
        loop {
            let class = &node.classes[argmax(probs[&node.name].pixel(p))];
            match node.children.get(class) {
                Some(child) => node = child,
                None => {
                    out.push(leaf_id[class.as_str()]);
                    break;
                }
            }
        }
    }
    ClassRaster::new(width, height, out)
}

/// One-level parent-to-child replacement: pixels predicted as `parent` take
/// the child classifier's argmax (mapped through `child_ids`) when its
/// probability reaches `min_confidence`; otherwise they keep `parent`.
pub fn replace_parent_cue(
    pred: &ClassRaster,
    parent: u16,
    child_probs: &ProbRaster,
    child_ids: &[u16],
    min_confidence: f64,
) -> Result<ClassRaster> {
    if pred.width() != child_probs.width() || pred.height() != child_probs.height() {
        return Err(invalid("prediction and child probabilities differ in size"));
    }
    if child_ids.len() != child_probs.channels() {
        return Err(invalid("child id map does not match child channels"));
    }
    let data = pred
        .data()
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            if c != parent {
                return c;
            }
            let px = child_probs.pixel(p);
            let k = argmax(px);
            if px[k] >= min_confidence {
                child_ids[k]
            } else {
                parent
            }
        })
        .collect();
    ClassRaster::new(pred.width(), pred.height(), data)
}

/// Per-classifier losses, their weights and the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

/// `total = Σ_j weight_j · loss_j`.
pub fn hierarchical_loss(per_classifier: &[(f64, f64)]) -> Result<LossBreakdown> {
    if let Some((_, w)) = per_classifier.iter().find(|(_, w)| !(*w >= 0.0)) {
        return Err(invalid(format!("classifier weight {w} is negative")));
    }
    let losses: Vec<f64> = per_classifier.iter().map(|&(l, _)| l).collect();
    let weights: Vec<f64> = per_classifier.iter().map(|&(_, w)| w).collect();
    let total = per_classifier.iter().map(|&(l, w)| l * w).sum();
    Ok(LossBreakdown {
        losses,
        weights,
        total,
    })
}
