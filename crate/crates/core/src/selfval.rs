//! Parameterless self-validation between the global class estimate and the
//! per-anchor attention.
//!
//! Two routes compute the same thing: plain functions over slices (used at
//! test time and as an oracle), and [`build_self_validation`], which appends
//! the same chain to a [`Graph`] so gradients flow through it in training.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::{self, argmax};
use crate::diffcore::{CustomOp, DiffError, Graph, NodeId, Tensor};
use crate::netmodel::ModelOutputs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationKind {
    /// what->where, then soft-argmax where->what.
    FullSoft,
    /// what->where, then hard-argmax where->what. Not differentiable.
    FullHard,
    /// what->where only.
    Half,
    /// Raw heads pass through unchanged.
    None,
    /// Softmax of the validation scores multiplies the attention, then soft where->what.
    SoftAttn,
}

impl ValidationKind {
    pub const ALL: [ValidationKind; 5] = [Self::FullSoft, Self::FullHard, Self::Half, Self::None, Self::SoftAttn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FullSoft => "full-soft",
            Self::FullHard => "full-hard",
            Self::Half => "half",
            Self::None => "none",
            Self::SoftAttn => "soft-attn",
        }
    }

    pub fn is_differentiable(self) -> bool {
        self != Self::FullHard
    }
}

impl fmt::Display for ValidationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValidationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown validation mode `{s}` (expected one of full-soft, full-hard, half, none, soft-attn)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationMode {
    pub kind: ValidationKind,
    pub stack_depth: usize,
}

impl ValidationMode {
    pub fn new(kind: ValidationKind) -> Self {
        Self { kind, stack_depth: 1 }
    }

    pub fn stacked(kind: ValidationKind, stack_depth: usize) -> Self {
        Self { kind, stack_depth: stack_depth.max(1) }
    }

    fn passes(&self) -> usize {
        match self.kind {
            ValidationKind::FullSoft | ValidationKind::FullHard | ValidationKind::SoftAttn => self.stack_depth.max(1),
            ValidationKind::Half | ValidationKind::None => 1,
        }
    }
}

impl From<ValidationKind> for ValidationMode {
    fn from(kind: ValidationKind) -> Self {
        Self::new(kind)
    }
}

/// Outputs of the validation chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedOutputs {
    /// Attention validation scores (last pass); absent in mode `none`.
    pub v_attn: Option<Vec<f64>>,
    pub a_prime: Vec<f64>,
    /// Softmax of `a_prime`.
    pub a_tilde: Vec<f64>,
    /// Class validation vector (soft or hard); absent in `half` / `none`.
    pub v_class: Option<Vec<f64>>,
    pub c_global_prime: Vec<f64>,
    /// Attended anchor: first argmax of `a_prime`.
    pub m: usize,
}

/// Cosine similarity of the global class row with each anchor's class row.
pub fn attention_validation(c_global: &[f64], c_box: &Tensor) -> Vec<f64> {
    kernels::cosine_rows(c_box.data(), c_global)
}

pub fn rescale(v: &[f64]) -> Vec<f64> {
    kernels::rescale(v)
}

/// `R(A) + V_attn`.
pub fn update_attention(a: &[f64], v_attn: &[f64]) -> Vec<f64> {
    rescale(a).iter().zip(v_attn).map(|(r, v)| r + v).collect()
}

/// Returns `(softmax(A'), sum_i softmax(A')_i C_box[i])`.
pub fn class_validation_soft(a_prime: &[f64], c_box: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let w = kernels::softmax(a_prime);
    let c = c_box.cols();
    let mut v = vec![0.0; c];
    for (i, wi) in w.iter().enumerate() {
        for (acc, x) in v.iter_mut().zip(c_box.row(i)) {
            *acc += wi * x;
        }
    }
    (w, v)
}

/// Returns `(m, C_box[m])` with `m` the first argmax of `A'`.
pub fn class_validation_hard(a_prime: &[f64], c_box: &Tensor) -> (usize, Vec<f64>) {
    let m = argmax(a_prime);
    (m, c_box.row(m).to_vec())
}

/// `R(C_global) + R(V_class)`.
pub fn update_global_class(c_global: &[f64], v_class: &[f64]) -> Vec<f64> {
    rescale(c_global).iter().zip(rescale(v_class)).map(|(a, b)| a + b).collect()
}

/// `A_i * softmax(V_attn)_i`.
pub fn soft_attention_update(a: &[f64], v_attn: &[f64]) -> Vec<f64> {
    a.iter().zip(kernels::softmax(v_attn)).map(|(x, w)| x * w).collect()
}

/// Runs the validation chain on raw head outputs.
pub fn self_validate(raw: &ModelOutputs, mode: ValidationMode) -> ValidatedOutputs {
    let mut a = raw.attention.data().to_vec();
    let mut cg = raw.c_global.data().to_vec();
    let c_box = &raw.c_box;
    if mode.kind == ValidationKind::None {
        let a_tilde = kernels::softmax(&a);
        return ValidatedOutputs { v_attn: None, m: argmax(&a), a_prime: a, a_tilde, v_class: None, c_global_prime: cg };
    }
    let mut v_attn = Vec::new();
    let mut v_class = None;
    for _ in 0..mode.passes() {
        v_attn = attention_validation(&cg, c_box);
        a = match mode.kind {
            ValidationKind::SoftAttn => soft_attention_update(&a, &v_attn),
            _ => update_attention(&a, &v_attn),
        };
        match mode.kind {
            ValidationKind::Half => {}
            ValidationKind::FullHard => {
                let (_, v) = class_validation_hard(&a, c_box);
                cg = update_global_class(&cg, &v);
                v_class = Some(v);
            }
            _ => {
                let (_, v) = class_validation_soft(&a, c_box);
                cg = update_global_class(&cg, &v);
                v_class = Some(v);
            }
        }
    }
    let a_tilde = kernels::softmax(&a);
    ValidatedOutputs { v_attn: Some(v_attn), m: argmax(&a), a_prime: a, a_tilde, v_class, c_global_prime: cg }
}

/// Raw head nodes as the validation chain consumes them.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    /// `[a, 4]`
    pub offsets: NodeId,
    /// `[a, c]`
    pub c_box: NodeId,
    /// `[c]`
    pub c_global: NodeId,
    /// `[a]`
    pub attention: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct ValidatedNodes {
    pub v_attn: Option<NodeId>,
    /// `[a]`
    pub a_prime: NodeId,
    pub v_class: Option<NodeId>,
    /// `[c]`
    pub c_global_prime: NodeId,
}

/// Appends the validation chain for `mode` to `g`.
pub fn build_self_validation(g: &mut Graph, heads: HeadNodes, mode: ValidationMode) -> Result<ValidatedNodes, DiffError> {
    let mut a = heads.attention;
    let mut cg = heads.c_global;
    if mode.kind == ValidationKind::None {
        return Ok(ValidatedNodes { v_attn: None, a_prime: a, v_class: None, c_global_prime: cg });
    }
    let n_anchor = g.shape(a)[0];
    let mut v_attn = None;
    let mut v_class = None;
    for _ in 0..mode.passes() {
        let va = g.cosine_rows(heads.c_box, cg)?;
        v_attn = Some(va);
        a = match mode.kind {
            ValidationKind::SoftAttn => {
                let w = g.softmax(va, 0)?;
                g.mul(a, w)?
            }
            _ => {
                let ra = g.rescale(a);
                g.add(ra, va)?
            }
        };
        let vc = match mode.kind {
            ValidationKind::Half => continue,
            ValidationKind::FullHard => g.custom(Arc::new(ArgmaxRowSelect { strict: true }), &[a, heads.c_box])?,
            _ => {
                let w = g.softmax(a, 0)?;
                let w = g.reshape(w, &[1, n_anchor])?;
                let v = g.matmul(w, heads.c_box)?;
                let c = g.shape(v)[1];
                g.reshape(v, &[c])?
            }
        };
        let r1 = g.rescale(cg);
        let r2 = g.rescale(vc);
        cg = g.add(r1, r2)?;
        v_class = Some(vc);
    }
    Ok(ValidatedNodes { v_attn, a_prime: a, v_class, c_global_prime: cg })
}

/// Selects the row of `rows` (`[a, c]`) at the first argmax of `score` (`[a]`).
///
/// With `strict` set, back-propagating through this node is an error.
/// Otherwise the gradient flows into the selected row only.
#[derive(Debug, Clone, Copy)]
pub struct ArgmaxRowSelect {
    pub strict: bool,
}

impl CustomOp for ArgmaxRowSelect {
    fn name(&self) -> &str {
        if self.strict {
            "hard_argmax_select"
        } else {
            "argmax_select"
        }
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        match inputs {
            [s, r] if r.len() == 2 && s.iter().product::<usize>() == r[0] => Ok(vec![r[1]]),
            other => Err(format!("expected score [a] and rows [a, c], got {other:?}")),
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
        let m = argmax(inputs[0].data());
        Ok(Tensor::vector(inputs[1].row(m).to_vec()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>, DiffError> {
        if self.strict {
            return Err(DiffError::NotDifferentiable {
                node: self.name().into(),
                reason: "hard argmax is not differentiable".into(),
            });
        }
        let m = argmax(inputs[0].data());
        let rows = inputs[1];
        let c = rows.cols();
        let mut gr = Tensor::zeros(rows.shape());
        gr.data_mut()[m * c..(m + 1) * c].copy_from_slice(grad.data());
        Ok(vec![None, Some(gr)])
    }

    fn kink_margin(&self, inputs: &[&Tensor], _output: &Tensor) -> f64 {
        crate::diffcore::top_gap(inputs[0].data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn attention_validation_examples() {
        assert_eq!(attention_validation(&[1.0, 0.0], &rows(&[&[1.0, 0.0], &[0.0, 1.0]])), vec![1.0, 0.0]);
        assert_eq!(attention_validation(&[1.0, 0.0], &rows(&[&[-1.0, 0.0]])), vec![-1.0]);
        assert!(close(&attention_validation(&[3.0, 4.0], &rows(&[&[4.0, 3.0]])), &[0.96], 1e-15));
        assert_eq!(attention_validation(&[3.0, 4.0], &rows(&[&[0.0, 0.0]])), vec![0.0]);
    }

    #[test]
    fn update_attention_examples() {
        let a = [0.3, -1.0, 2.5];
        assert_eq!(update_attention(&a, &[0.0; 3]), rescale(&a));
        assert_eq!(update_attention(&[4.0; 3], &[0.1, -0.2, 0.3]), vec![0.1, -0.2, 0.3]);
        assert_eq!(update_attention(&[0.0, 1.0, 2.0], &[1.0, 0.0, -1.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn soft_class_validation_examples() {
        let c_box = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        let (_, v) = class_validation_soft(&[0.7; 3], &c_box);
        assert!(close(&v, &[0.5, 0.5], 1e-15));

        let c2 = rows(&[&[0.3, -2.0], &[1.5, 4.0]]);
        let (_, v) = class_validation_soft(&[50.0, -50.0], &c2);
        assert!(close(&v, c2.row(0), 1e-10));

        let (w, v) = class_validation_soft(&[3f64.ln(), 0.0], &rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!(close(&w, &[0.75, 0.25], 1e-15));
        assert!(close(&v, &[0.75, 0.25], 1e-15));
    }

    #[test]
    fn hard_class_validation_examples() {
        let c_box = rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0], &[9.0, 1.0], &[2.0, 3.0]]);
        assert_eq!(class_validation_hard(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &c_box), (3, vec![7.0, 8.0]));
        assert_eq!(class_validation_hard(&[0.0, 0.0, 2.0, 0.0, 0.0, 2.0], &c_box).0, 2);
    }

    #[test]
    fn update_global_class_examples() {
        let cg = [0.2, 0.9, 0.4];
        let out = update_global_class(&cg, &cg);
        assert!(close(&out, &rescale(&cg).iter().map(|x| 2.0 * x).collect::<Vec<_>>(), 0.0));
        assert_eq!(argmax(&out), argmax(&cg));
        assert_eq!(update_global_class(&[0.6, 0.4], &[0.9, 0.1]), vec![2.0, -2.0]);
        assert_eq!(update_global_class(&cg, &[0.3; 3]), rescale(&cg));
    }

    #[test]
    fn soft_attention_update_examples() {
        assert!(close(&soft_attention_update(&[2.0, 4.0, 6.0, 8.0], &[0.5; 4]), &[0.5, 1.0, 1.5, 2.0], 1e-15));
        assert!(close(&soft_attention_update(&[1.0, 1.0], &[3f64.ln(), 0.0]), &[0.75, 0.25], 1e-15));
        assert_eq!(soft_attention_update(&[0.0, 0.0], &[0.3, 0.1]), vec![0.0, 0.0]);
    }

    fn raw(a: &[f64], cg: &[f64], c_box: Tensor) -> ModelOutputs {
        let n = a.len();
        ModelOutputs {
            offsets: Tensor::zeros(&[n, 4]),
            c_global: Tensor::new(vec![1, cg.len()], cg.to_vec()).unwrap(),
            attention: Tensor::new(vec![n, 1], a.to_vec()).unwrap(),
            c_box,
        }
    }

    #[test]
    fn mode_none_passes_through() {
        let r = raw(&[0.1, 0.9, 0.3], &[0.2, 0.5], rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]));
        let v = self_validate(&r, ValidationKind::None.into());
        assert_eq!(v.a_prime, vec![0.1, 0.9, 0.3]);
        assert_eq!(v.c_global_prime, vec![0.2, 0.5]);
        assert_eq!(v.m, 1);
    }

    #[test]
    fn full_soft_with_aligned_rows() {
        let cg = [0.2, 0.5, 0.1];
        let c_box = rows(&[&cg, &cg, &cg, &cg]);
        let a = [0.4, -0.3, 1.2, 0.0];
        let v = self_validate(&raw(&a, &cg, c_box), ValidationKind::FullSoft.into());
        assert!(close(v.v_attn.as_ref().unwrap(), &[1.0; 4], 1e-15));
        let expect: Vec<f64> = rescale(&a).iter().map(|x| x + 1.0).collect();
        assert!(close(&v.a_prime, &expect, 1e-15));
        assert_eq!(v.m, argmax(&a));
    }

    #[test]
    fn stacking_equals_repeated_application() {
        let c_box = rows(&[&[0.3, -0.2, 0.9], &[1.1, 0.4, -0.5], &[0.0, 0.8, 0.2], &[-0.6, 0.1, 0.7]]);
        let r = raw(&[0.5, -0.1, 0.9, 0.2], &[0.4, 0.1, -0.3], c_box.clone());
        let twice = self_validate(&r, ValidationMode::stacked(ValidationKind::FullSoft, 2));
        let once = self_validate(&r, ValidationKind::FullSoft.into());
        let r2 = ModelOutputs {
            attention: Tensor::new(vec![4, 1], once.a_prime.clone()).unwrap(),
            c_global: Tensor::new(vec![1, 3], once.c_global_prime.clone()).unwrap(),
            ..r
        };
        let manual = self_validate(&r2, ValidationKind::FullSoft.into());
        assert_eq!(twice, manual);
    }

    #[test]
    fn mode_parsing_roundtrip() {
        for k in ValidationKind::ALL {
            assert_eq!(k.as_str().parse::<ValidationKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ValidationKind>().is_err());
    }
}
