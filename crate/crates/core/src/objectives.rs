//! Graph-based losses: class centers, the representation-level contrastive
//! loss, the prediction-level loss and their weighted combination.
//!
//! All losses are sums over samples, not means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Vectors with a Euclidean norm below this are treated as degenerate:
/// their cosine similarity is undefined and the sample is skipped.
pub const COSINE_TINY: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCenters {
    /// `C x d`; rows of invalid classes are zero.
    pub centers: Tensor,
    pub valid: Vec<bool>,
    pub counts: Vec<usize>,
}

impl ClassCenters {
    pub fn num_classes(&self) -> usize {
        self.valid.len()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Indices of valid classes whose center is not degenerate.
    pub fn usable(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&j| self.valid[j] && norm(self.centers.row(j)) >= COSINE_TINY)
            .collect()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-class means of the rows of `z` listed in `selected`, grouped by the
/// argmax of the matching rows of `p`.
pub fn class_centers(z: &Tensor, p: &Tensor, selected: &[usize]) -> Result<ClassCenters> {
    if selected.is_empty() {
        return Err(Error::EmptySelection("no samples selected for class centers".into()));
    }
    if z.rows() != p.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings vs {} logit rows",
            z.rows(),
            p.rows()
        )));
    }
    let (c, d) = (p.cols(), z.cols());
    let labels = p.argmax_rows();
    let mut sums = Tensor::zeros(&[c, d]);
    let mut counts = vec![0usize; c];
    for &i in selected {
        if i >= z.rows() {
            return Err(Error::InvalidArgument(format!("selected index {i} out of range")));
        }
        let j = labels[i];
        counts[j] += 1;
        for (k, v) in z.row(i).iter().enumerate() {
            sums.data_mut()[j * d + k] += v;
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            for v in &mut sums.data_mut()[j * d..(j + 1) * d] {
                *v /= n as f64;
            }
        }
    }
    Ok(ClassCenters {
        centers: sums,
        valid: counts.iter().map(|&n| n > 0).collect(),
        counts,
    })
}

/// Result of [`contrastive_loss`].
#[derive(Clone, Debug)]
pub struct Contrastive {
    /// Scalar loss summed over the used samples (a zero constant if none).
    pub loss: Var,
    /// Row indices (into the inputs) that contributed.
    pub used: Vec<usize>,
    /// Row indices skipped because a compared vector was degenerate or
    /// their assigned center is unusable.
    pub skipped: Vec<usize>,
}

/// `-Σ_i log[ e^{s(a_i, c_o)} / (Σ_j e^{s(a_i, c_j)} + e^{s(a_i, r_i)}) ]`
/// with cosine similarity `s`, `j` over usable centers and `o = assign[i]`.
/// Centers enter as constants.
pub fn contrastive_loss(
    tape: &mut Tape,
    r_a: Var,
    r_r: Var,
    centers: &ClassCenters,
    assign: &[usize],
) -> Result<Contrastive> {
    let (n, d) = tape.value(r_a).dims2();
    if tape.value(r_r).dims2() != (n, d) || assign.len() != n || centers.centers.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "R_A {:?}, R_R {:?}, {} assignments, centers {:?}",
            tape.shape(r_a),
            tape.shape(r_r),
            assign.len(),
            centers.centers.shape()
        )));
    }
    if !tape.value(r_a).all_finite() || !tape.value(r_r).all_finite() {
        return Err(Error::NonFiniteLoss("contrastive inputs"));
    }
    let usable = centers.usable();
    let mut slot = vec![usize::MAX; centers.num_classes()];
    for (k, &j) in usable.iter().enumerate() {
        slot[j] = k;
    }
    let (mut used, mut skipped) = (Vec::new(), Vec::new());
    for i in 0..n {
        let ok = assign[i] < slot.len()
            && slot[assign[i]] != usize::MAX
            && norm(tape.value(r_a).row(i)) >= COSINE_TINY
            && norm(tape.value(r_r).row(i)) >= COSINE_TINY;
        if ok {
            used.push(i);
        } else {
            skipped.push(i);
        }
    }
    if used.is_empty() {
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(Contrastive { loss, used, skipped });
    }

    // Unit-norm center rows, transposed to `d x k`.
    let k = usable.len();
    let mut ct = Tensor::zeros(&[d, k]);
    for (col, &j) in usable.iter().enumerate() {
        let row = centers.centers.row(j);
        let inv = 1.0 / norm(row);
        for (r, v) in row.iter().enumerate() {
            ct.set(r, col, v * inv);
        }
    }
    let ct = tape.constant(ct);

    let a = tape.gather_rows(r_a, &used);
    let r = tape.gather_rows(r_r, &used);
    let a = tape.normalize_rows(a, 0.0);
    let r = tape.normalize_rows(r, 0.0);
    let sims = tape.matmul(a, ct);
    let self_sim = tape.mul(a, r);
    let self_sim = tape.sum_axis1(self_sim);
    let self_sim = tape.reshape(self_sim, &[used.len(), 1]);
    let all = tape.concat_cols(sims, self_sim);
    let log_p = tape.log_softmax(all);
    let targets: Vec<usize> = used.iter().map(|&i| slot[assign[i]]).collect();
    let picked = tape.pick_per_row(log_p, &targets);
    let total = tape.sum(picked);
    let loss = tape.neg(total);
    Ok(Contrastive { loss, used, skipped })
}

/// Returns `(entropy, negative)`:
/// `-Σ_i Σ_c σ(a_i)_c log σ(a_i)_c` and `-Σ_i Σ_c σ(r_i)_c log σ(1 - a_i)_c`,
/// where `σ` is the softmax over classes and `1 - a_i` the elementwise
/// complement of the logits.
pub fn prediction_loss(tape: &mut Tape, p_a: Var, p_r: Var) -> Result<(Var, Var)> {
    if tape.shape(p_a) != tape.shape(p_r) || tape.value(p_a).rows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "P_A {:?} vs P_R {:?}",
            tape.shape(p_a),
            tape.shape(p_r)
        )));
    }
    if !tape.value(p_a).all_finite() || !tape.value(p_r).all_finite() {
        return Err(Error::NonFiniteLoss("prediction logits"));
    }
    let entropy = softmax_entropy(tape, p_a);

    let complement = tape.neg(p_a);
    let complement = tape.add_scalar(complement, 1.0);
    let log_c = tape.log_softmax(complement);
    let log_r = tape.log_softmax(p_r);
    let prob_r = tape.exp(log_r);
    let cross = tape.mul(prob_r, log_c);
    let cross = tape.sum(cross);
    let negative = tape.neg(cross);
    Ok((entropy, negative))
}

/// Summed Shannon entropy of the row softmaxes of `logits`.
pub(crate) fn softmax_entropy(tape: &mut Tape, logits: Var) -> Var {
    let log_p = tape.log_softmax(logits);
    let p = tape.exp(log_p);
    let plogp = tape.mul(p, log_p);
    let s = tape.sum(plogp);
    tape.neg(s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_p_entropy: f64,
    pub l_p_negative: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn compose(l_r: f64, l_p_entropy: f64, l_p_negative: f64, lambda: f64) -> Self {
        LossBreakdown {
            l_r,
            l_p_entropy,
            l_p_negative,
            total: l_r + lambda * (l_p_entropy + l_p_negative),
            lambda,
        }
    }

    pub fn l_p(&self) -> f64 {
        self.l_p_entropy + self.l_p_negative
    }
}

/// The four propagated branches of one (possibly filtered) batch.
#[derive(Clone, Copy, Debug)]
pub struct Branches {
    pub r_a: Var,
    pub r_r: Var,
    pub p_a: Var,
    pub p_r: Var,
}

#[derive(Clone, Debug)]
pub struct GfretLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Rows skipped by the contrastive term.
    pub skipped: Vec<usize>,
}

/// `L_R + λ·L_P` as a differentiable scalar plus its numeric breakdown.
pub fn gfret_loss(
    tape: &mut Tape,
    branches: &Branches,
    centers: &ClassCenters,
    assign: &[usize],
    lambda: f64,
) -> Result<GfretLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let c = contrastive_loss(tape, branches.r_a, branches.r_r, centers, assign)?;
    let (ent, neg) = prediction_loss(tape, branches.p_a, branches.p_r)?;
    let l_p = tape.add(ent, neg);
    let weighted = tape.scale(l_p, lambda);
    let total = tape.add(c.loss, weighted);
    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        ..LossBreakdown::compose(tape.scalar(c.loss), tape.scalar(ent), tape.scalar(neg), lambda)
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss("G-FRET total"));
    }
    Ok(GfretLoss {
        total,
        breakdown,
        skipped: c.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centers(rows: &[[f64; 2]], valid: &[bool]) -> ClassCenters {
        ClassCenters {
            centers: Tensor::from_rows(rows),
            valid: valid.to_vec(),
            counts: valid.iter().map(|&v| v as usize).collect(),
        }
    }

    fn contrastive_value(a: &[[f64; 2]], r: &[[f64; 2]], c: &ClassCenters, assign: &[usize]) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(a));
        let r = t.constant(Tensor::from_rows(r));
        let out = contrastive_loss(&mut t, a, r, c, assign).unwrap();
        t.scalar(out.loss)
    }

    #[test]
    fn centers_are_class_means() {
        let z = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let p = Tensor::from_rows(&[[5.0, 0.0, 0.0], [2.0, 1.0, 0.0]]);
        let c = class_centers(&z, &p, &[0, 1]).unwrap();
        assert_eq!(c.centers.row(0), &[0.5, 0.5]);
        assert_eq!(c.valid, vec![true, false, false]);
        assert_eq!(c.counts, vec![2, 0, 0]);
        assert!(matches!(class_centers(&z, &p, &[]), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn contrastive_examples() {
        let c = centers(&[[1.0, 0.0]], &[true]);
        let v = contrastive_value(&[[1.0, 0.0]], &[[-1.0, 0.0]], &c, &[0]);
        assert!((v - 0.126_928_011).abs() < 1e-8, "{v}");
        let v = contrastive_value(&[[0.0, 1.0]], &[[0.0, 1.0]], &c, &[0]);
        assert!((v - 1.313_261_687).abs() < 1e-8, "{v}");
    }

    #[test]
    fn invalid_centers_leave_the_denominator() {
        let with = centers(&[[1.0, 0.0], [0.0, 1.0]], &[true, false]);
        let without = centers(&[[1.0, 0.0]], &[true]);
        let a = [[0.6, 0.8]];
        let r = [[0.8, -0.6]];
        assert_eq!(
            contrastive_value(&a, &r, &with, &[0]),
            contrastive_value(&a, &r, &without, &[0])
        );
    }

    #[test]
    fn degenerate_rows_are_skipped() {
        let c = centers(&[[1.0, 0.0]], &[true]);
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]));
        let r = t.constant(Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]));
        let out = contrastive_loss(&mut t, a, r, &c, &[0, 0]).unwrap();
        assert_eq!((out.used, out.skipped), (vec![1], vec![0]));
        assert!((t.scalar(out.loss) - 0.126_928_011).abs() < 1e-8);
    }

    #[test]
    fn prediction_loss_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[0.3; 4]]));
        let (e, _) = prediction_loss(&mut t, a, a).unwrap();
        assert!((t.scalar(e) - 4f64.ln()).abs() < 1e-12);

        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[10.0, -10.0]]));
        let r = t.constant(Tensor::from_rows(&[[0.0, 0.0]]));
        let (_, n) = prediction_loss(&mut t, a, r).unwrap();
        assert!((t.scalar(n) - 10.0).abs() < 1e-6, "{}", t.scalar(n));
    }

    #[test]
    fn prediction_loss_rejects_non_finite() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[f64::INFINITY, 0.0]]));
        assert!(matches!(prediction_loss(&mut t, a, a), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn lambda_zero_total_is_contrastive() {
        let c = centers(&[[1.0, 0.0], [0.0, 1.0]], &[true, true]);
        let mut t = Tape::new();
        let r_a = t.constant(Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.7]]));
        let r_r = t.constant(Tensor::from_rows(&[[0.1, 0.9], [0.5, -0.1]]));
        let p_a = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]));
        let p_r = t.constant(Tensor::from_rows(&[[0.3, 0.1], [0.2, 0.0]]));
        let b = Branches { r_a, r_r, p_a, p_r };
        let l = gfret_loss(&mut t, &b, &c, &[0, 1], 0.0).unwrap();
        assert_eq!(l.breakdown.total, l.breakdown.l_r);
        assert!(gfret_loss(&mut t, &b, &c, &[0, 1], -1.0).is_err());
    }

    #[test]
    fn compose_arithmetic() {
        let b = LossBreakdown::compose(1.0, 1.5, 0.5, 0.5);
        assert_eq!(b.total, 2.0);
    }
}
