//! Loss terms as graph builders. Every term is a scalar [`Var`].

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::brdf::{chromaticity, CHROMA_DELTA};
use crate::scalar::Scalar;

/// `mean_r |a_r - b_r|^2` over rows of two `[B, 3]` colors.
pub fn squared_error<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, AutodiffError> {
    let d = g.sub(a, b)?;
    let n = g.row_dot(d, d)?;
    g.mean(n)
}

/// Row-wise chromaticity `(c + delta/3) / (R + G + B + delta)` inside the
/// graph; matches [`chromaticity`] to rounding.
pub fn chroma<T: Scalar>(g: &mut Graph<T>, c: Var) -> Result<Var, AutodiffError> {
    let delta = T::lit(CHROMA_DELTA);
    let s = g.row_sum(c)?;
    let s = g.add_scalar(s, delta)?;
    let inv = g.recip(s)?;
    let num = g.add_scalar(c, delta / T::lit(3.0))?;
    g.mul_col(num, inv)
}

/// Chromaticity of constant `[B, 3]` colors.
pub fn chroma_rows<T: Scalar>(c: &Tensor<T>) -> Tensor<T> {
    let mut out = c.clone();
    for i in 0..c.rows() {
        let row = c.row(i);
        let ch = chromaticity(&[row[0], row[1], row[2]]).unwrap_or([T::lit(1.0 / 3.0); 3]);
        out.row_mut(i).copy_from_slice(&ch);
    }
    out
}

/// Per-row weight `2 sg(k_r) - 1` above roughness 0.5, else zero.
pub fn lambertian_weight<T: Scalar>(k_r: T) -> T {
    if k_r > T::lit(0.5) {
        T::lit(2.0) * k_r - T::one()
    } else {
        T::zero()
    }
}

/// `mean_r w_r mean_c k_s` with `w_r` computed from `sg(k_r)`, so no
/// gradient reaches roughness.
pub fn lambertian<T: Scalar>(g: &mut Graph<T>, k_s: Var, k_r: Var) -> Result<Var, AutodiffError> {
    let k_r = g.stop_gradient(k_r)?;
    let r = g.value(k_r);
    let w = Tensor::new(r.rows(), 1, r.data().iter().map(|&r| lambertian_weight(r)).collect())?;
    let w = g.constant(w);
    let weighted = g.mul_col(k_s, w)?;
    g.mean(weighted)
}

/// Pair weight `exp(-alpha e)`, where `e` is the squared chromaticity
/// distance of the ground-truth colors, clipped to zero when `<= beta`.
pub fn smooth_weight(chr_i: &[f64; 3], chr_j: &[f64; 3], alpha: f64, beta: f64) -> f64 {
    let e: f64 = (0..3).map(|k| (chr_i[k] - chr_j[k]).powi(2)).sum();
    let e = if e > beta { e } else { 0.0 };
    (-alpha * e).exp()
}

/// `mean_p w_p (1 - z_i . z_j)` over paired rows of two `[P, D]` latents.
pub fn smooth<T: Scalar>(g: &mut Graph<T>, z_i: Var, z_j: Var, weights: &[T]) -> Result<Var, AutodiffError> {
    let dot = g.row_dot(z_i, z_j)?;
    let gap = g.rsub_scalar(T::one(), dot)?;
    let w = g.constant(Tensor::new(weights.len(), 1, weights.to_vec())?);
    let weighted = g.mul(w, gap)?;
    g.mean(weighted)
}

/// Scalar values of every term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub rec_c: f64,
    pub rec_d: f64,
    pub chr: f64,
    pub vq: f64,
    pub lam: f64,
    pub sm: f64,
}

/// Loss weights and the commitment factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub w6: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.w1 * self.rec_c + w.w2 * self.rec_d + w.w3 * self.chr + w.w4 * self.vq + w.w5 * self.lam + w.w6 * self.sm
    }

    /// First non-finite term, by log name.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("L_rec_c", self.rec_c),
            ("L_rec_d", self.rec_d),
            ("L_chr", self.chr),
            ("L_vq", self.vq),
            ("L_lam", self.lam),
            ("L_sm", self.sm),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `sum_k w_k term_k` inside the graph, skipping absent terms.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &[(f64, Option<Var>)]) -> Result<Var, AutodiffError> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let Some(v) = v else { continue };
        let s = g.scale(v, T::lit(w))?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}
