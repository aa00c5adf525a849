//! Second-order feature relation graph, its mask decomposition into
//! attention and redundancy parts, and one-layer graph propagation.
//!
//! For embeddings `Z` (`n x d`) the relation graph is `G_F = ZᵀZ`. A
//! symmetric mask `M` splits it into `G_A = G_F ⊙ M` and `G_R = G_F - G_A`.
//! Each part is degree-normalized as `D^{-1/2} G D^{-1/2}` and applied to the
//! embeddings: `R = Z · norm(G)`, `P = R θ^h (+ b)`.
//!
//! Degrees are `D_ii = Σ_j |G_ij| + ε`. The redundancy graph carries signed
//! off-diagonal entries (and a zero diagonal under the identity mask), so
//! plain row sums can be zero or negative; absolute row sums keep every
//! degree positive.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Added to every degree before the inverse square root.
pub const DEGREE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphRole {
    Feature,
    Attention,
    Redundancy,
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGraph {
    pub matrix: Tensor,
    pub role: GraphRole,
}

impl FeatureGraph {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| (self.matrix.at(i, j) - self.matrix.at(j, i)).abs() <= tol))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Identity,
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    matrix: Tensor,
    kind: MaskKind,
}

impl MaskMatrix {
    pub fn identity(d: usize) -> Self {
        MaskMatrix {
            matrix: Tensor::identity(d),
            kind: MaskKind::Identity,
        }
    }

    /// A custom mask; must be square and exactly symmetric.
    pub fn custom(matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != matrix.cols() {
            return Err(Error::ShapeMismatch(format!(
                "mask must be square, got {:?}",
                matrix.shape()
            )));
        }
        let d = matrix.rows();
        for i in 0..d {
            for j in (i + 1)..d {
                if matrix.at(i, j) != matrix.at(j, i) {
                    return Err(Error::InvalidArgument(format!(
                        "mask not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(MaskMatrix {
            matrix,
            kind: MaskKind::Custom,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphPair {
    pub attention: FeatureGraph,
    pub redundancy: FeatureGraph,
    pub source: FeatureGraph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagatedBatch {
    pub r_a: Tensor,
    pub p_a: Tensor,
    pub r_r: Tensor,
    pub p_r: Tensor,
}

/// Tape nodes of one propagation.
#[derive(Clone, Copy, Debug)]
pub struct PropagatedVars {
    pub g_f: Var,
    pub g_a: Var,
    pub g_r: Var,
    pub r_a: Var,
    pub p_a: Var,
    pub r_r: Var,
    pub p_r: Var,
}

pub fn feature_graph(z: &Tensor) -> Result<FeatureGraph> {
    if z.shape().len() != 2 || z.rows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding batch must be a non-empty matrix, got {:?}",
            z.shape()
        )));
    }
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let g = tape.gram(v);
    Ok(FeatureGraph {
        matrix: tape.value(g).clone(),
        role: GraphRole::Feature,
    })
}

fn mask_split(g: &Tensor, m: &Tensor) -> (Tensor, Tensor) {
    let ga: Vec<f64> = g.data().iter().zip(m.data()).map(|(x, y)| x * y).collect();
    let gr: Vec<f64> = g.data().iter().zip(&ga).map(|(x, y)| x - y).collect();
    let shape = g.shape().to_vec();
    (
        Tensor::new(shape.clone(), ga).expect("same shape"),
        Tensor::new(shape, gr).expect("same shape"),
    )
}

pub fn decompose(g_f: &FeatureGraph, mask: &MaskMatrix) -> Result<GraphPair> {
    if g_f.matrix.shape() != mask.matrix.shape() {
        return Err(Error::ShapeMismatch(format!(
            "graph {:?} vs mask {:?}",
            g_f.matrix.shape(),
            mask.matrix.shape()
        )));
    }
    let (ga, gr) = mask_split(&g_f.matrix, &mask.matrix);
    Ok(GraphPair {
        attention: FeatureGraph {
            matrix: ga,
            role: GraphRole::Attention,
        },
        redundancy: FeatureGraph {
            matrix: gr,
            role: GraphRole::Redundancy,
        },
        source: g_f.clone(),
    })
}

/// `D^{-1/2} G D^{-1/2}` with `D_ii = Σ_j |G_ij| + ε`.
pub fn normalize_graph(g: &FeatureGraph) -> FeatureGraph {
    let mut tape = Tape::new();
    let v = tape.constant(g.matrix.clone());
    let n = normalize_on_tape(&mut tape, v);
    FeatureGraph {
        matrix: tape.value(n).clone(),
        role: GraphRole::Normalized,
    }
}

/// Differentiable [`normalize_graph`].
pub fn normalize_on_tape(tape: &mut Tape, g: Var) -> Var {
    let a = tape.abs(g);
    let deg = tape.sum_axis1(a);
    let deg = tape.add_scalar(deg, DEGREE_EPS);
    let s = tape.powf(deg, -0.5);
    let left = tape.mul_col(g, s);
    tape.mul_row(left, s)
}

/// Builds `G_F`, splits it with `mask` and propagates `z` through both
/// normalized parts and the head. With `attach_graph = false` the graphs
/// are built from a detached copy of `z`, so gradients reach `z` only
/// through the left factor of `Z · norm(G)`.
pub fn propagate_on_tape(
    tape: &mut Tape,
    z: Var,
    mask: &MaskMatrix,
    head_weight: Var,
    head_bias: Option<Var>,
    attach_graph: bool,
) -> Result<PropagatedVars> {
    let d = tape.shape(z)[1];
    if mask.dim() != d || tape.shape(head_weight)[0] != d {
        return Err(Error::ShapeMismatch(format!(
            "embedding width {d}, mask {}, head input {}",
            mask.dim(),
            tape.shape(head_weight)[0]
        )));
    }
    let src = if attach_graph { z } else { tape.detach(z) };
    let g_f = tape.gram(src);
    let m = tape.constant(mask.matrix.clone());
    let g_a = tape.mul(g_f, m);
    let g_r = tape.sub(g_f, g_a);
    let n_a = normalize_on_tape(tape, g_a);
    let n_r = normalize_on_tape(tape, g_r);
    let r_a = tape.matmul(z, n_a);
    let r_r = tape.matmul(z, n_r);
    let head = |tape: &mut Tape, r: Var| {
        let y = tape.matmul(r, head_weight);
        match head_bias {
            Some(b) => tape.add_row(y, b),
            None => y,
        }
    };
    let p_a = head(tape, r_a);
    let p_r = head(tape, r_r);
    Ok(PropagatedVars {
        g_f,
        g_a,
        g_r,
        r_a,
        p_a,
        r_r,
        p_r,
    })
}

/// Value-level propagation through an already decomposed pair.
pub fn propagate(
    z: &Tensor,
    pair: &GraphPair,
    head_weight: &Tensor,
    head_bias: Option<&Tensor>,
) -> Result<PropagatedBatch> {
    let d = z.cols();
    if pair.source.dim() != d || head_weight.rows() != d {
        return Err(Error::ShapeMismatch(format!(
            "embedding width {d}, graph {}, head input {}",
            pair.source.dim(),
            head_weight.rows()
        )));
    }
    let project = |g: &FeatureGraph| -> Result<(Tensor, Tensor)> {
        let r = z.matmul(&normalize_graph(g).matrix)?;
        let mut p = r.matmul(head_weight)?;
        if let Some(b) = head_bias {
            let c = p.cols();
            for (idx, v) in p.data_mut().iter_mut().enumerate() {
                *v += b.data()[idx % c];
            }
        }
        Ok((r, p))
    };
    let (r_a, p_a) = project(&pair.attention)?;
    let (r_r, p_r) = project(&pair.redundancy)?;
    Ok(PropagatedBatch { r_a, p_a, r_r, p_r })
}

/// Writes each graph as a little-endian `f64` array (`<name>.f64`, row-major
/// `d x d`) plus an absolute-value heatmap PNG (`<name>.png`).
pub fn dump_graphs(pair: &GraphPair, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, g) in [
        ("g_f", &pair.source),
        ("g_a", &pair.attention),
        ("g_r", &pair.redundancy),
    ] {
        let bytes: Vec<u8> = g.matrix.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = dir.join(format!("{name}.f64"));
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("{name}.png"));
        crate::raster::write_abs_heatmap(&g.matrix, &p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn feature_graph_examples() {
        assert_eq!(feature_graph(&Tensor::identity(2)).unwrap().matrix, Tensor::identity(2));
        assert_eq!(
            feature_graph(&t(&[[1.0, 1.0], [0.0, 1.0]])).unwrap().matrix,
            t(&[[1.0, 1.0], [1.0, 2.0]])
        );
        assert_eq!(
            feature_graph(&Tensor::zeros(&[3, 2])).unwrap().matrix,
            Tensor::zeros(&[2, 2])
        );
    }

    #[test]
    fn decompose_examples() {
        let gf = FeatureGraph {
            matrix: t(&[[1.0, 1.0], [1.0, 2.0]]),
            role: GraphRole::Feature,
        };
        let p = decompose(&gf, &MaskMatrix::identity(2)).unwrap();
        assert_eq!(p.attention.matrix, t(&[[1.0, 0.0], [0.0, 2.0]]));
        assert_eq!(p.redundancy.matrix, t(&[[0.0, 1.0], [1.0, 0.0]]));
        let ones = MaskMatrix::custom(Tensor::full(&[2, 2], 1.0)).unwrap();
        let p = decompose(&gf, &ones).unwrap();
        assert_eq!(p.attention.matrix, gf.matrix);
        assert_eq!(p.redundancy.matrix, Tensor::zeros(&[2, 2]));
        let zeros = MaskMatrix::custom(Tensor::zeros(&[2, 2])).unwrap();
        let p = decompose(&gf, &zeros).unwrap();
        assert_eq!(p.attention.matrix, Tensor::zeros(&[2, 2]));
        assert_eq!(p.redundancy.matrix, gf.matrix);
        assert!(matches!(
            decompose(&gf, &MaskMatrix::identity(3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn asymmetric_mask_rejected() {
        assert!(MaskMatrix::custom(t(&[[1.0, 0.0], [1.0, 1.0]])).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_graph(&FeatureGraph {
            matrix: t(&[[1.0, 0.0], [0.0, 2.0]]),
            role: GraphRole::Attention,
        });
        assert!(n.matrix.max_abs_diff(&Tensor::identity(2)) < 1e-6);
        let off = t(&[[0.0, 1.0], [1.0, 0.0]]);
        let n = normalize_graph(&FeatureGraph {
            matrix: off.clone(),
            role: GraphRole::Redundancy,
        });
        assert!(n.matrix.max_abs_diff(&off) < 1e-7);
        let n = normalize_graph(&FeatureGraph {
            matrix: Tensor::zeros(&[2, 2]),
            role: GraphRole::Redundancy,
        });
        assert_eq!(n.matrix, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn propagate_examples() {
        let z = t(&[[1.0, 1.0], [0.0, 1.0]]);
        let pair = decompose(&feature_graph(&z).unwrap(), &MaskMatrix::identity(2)).unwrap();
        let w = Tensor::identity(2);
        let out = propagate(&z, &pair, &w, None).unwrap();
        assert!(out.r_a.max_abs_diff(&z) < 1e-5);
        assert!(out.r_r.max_abs_diff(&t(&[[1.0, 1.0], [1.0, 0.0]])) < 1e-7);
        assert_eq!(out.p_a, out.r_a);
        let zero = Tensor::zeros(&[2, 2]);
        let pair = decompose(&feature_graph(&zero).unwrap(), &MaskMatrix::identity(2)).unwrap();
        let b = Tensor::vector(vec![0.5, -1.0]);
        let out = propagate(&zero, &pair, &w, Some(&b)).unwrap();
        assert_eq!(out.r_a, zero);
        assert_eq!(out.r_r, zero);
        assert_eq!(out.p_a, t(&[[0.5, -1.0], [0.5, -1.0]]));
        assert_eq!(out.p_r, out.p_a);
    }

    #[test]
    fn tape_and_value_paths_agree() {
        let z = t(&[[1.0, 2.0], [-0.5, 1.0], [3.0, 0.25]]);
        let w = t(&[[1.0, -1.0], [0.5, 2.0]]);
        let b = Tensor::vector(vec![0.1, 0.2]);
        let pair = decompose(&feature_graph(&z).unwrap(), &MaskMatrix::identity(2)).unwrap();
        let v = propagate(&z, &pair, &w, Some(&b)).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let wv = tape.constant(w);
        let bv = tape.constant(b);
        let pv = propagate_on_tape(&mut tape, zv, &MaskMatrix::identity(2), wv, Some(bv), true)
            .unwrap();
        assert!(tape.value(pv.r_a).max_abs_diff(&v.r_a) < 1e-12);
        assert!(tape.value(pv.p_r).max_abs_diff(&v.p_r) < 1e-12);
        assert_eq!(tape.value(pv.g_f), &pair.source.matrix);
    }
}
