use std::sync::{Arc, Mutex};

use crate::autodiff::{AutodiffError, CustomOp, Tensor};
use crate::brdf::{accumulate, dot3, lobe, texel_geometry, Quadrature, TexelGeom};
use crate::scalar::Scalar;

/// Roughness-independent texel terms of a batch of surface samples, shared
/// by every shading op over the same geometry.
#[derive(Debug)]
pub struct ShadeGeometry<T> {
    nv: Vec<T>,
    offsets: Vec<usize>,
    entries: Vec<TexelGeom<T>>,
    texels: usize,
}

impl<T: Scalar> ShadeGeometry<T> {
    pub fn new(normals: &[[T; 3]], views: &[[T; 3]], quad: &Quadrature<T>) -> Self {
        assert_eq!(normals.len(), views.len(), "one view direction per normal");
        let mut nvs = Vec::with_capacity(normals.len());
        let mut offsets = Vec::with_capacity(normals.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for (n, wo) in normals.iter().zip(views) {
            let nv = dot3(n, wo);
            nvs.push(nv);
            if nv > T::zero() {
                for (i, (wi, &dw)) in quad.dirs.iter().zip(&quad.weights).enumerate() {
                    entries.extend(texel_geometry(n, wo, wi, dw, i));
                }
            }
            offsets.push(entries.len());
        }
        ShadeGeometry {
            nv: nvs,
            offsets,
            entries,
            texels: quad.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.nv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nv.is_empty()
    }

    fn sample(&self, b: usize) -> &[TexelGeom<T>] {
        &self.entries[self.offsets[b]..self.offsets[b + 1]]
    }
}

/// Lobe values `(g, dg)` per geometry entry for one roughness input.
type LobeCache<T> = (Vec<T>, Vec<(T, T)>);

/// Differentiable environment shading of a batch of surface samples.
///
/// Inputs: diffuse `[B, 3]`, specular `[B, 3]`, roughness `[B, 1]` and
/// radiance `[E, 3]`; output `[B, 3]`. Geometry is fixed per op. Forward
/// keeps the lobe values for the matching backward call.
pub struct ShadeOp<T> {
    geom: Arc<ShadeGeometry<T>>,
    cache: Mutex<Option<LobeCache<T>>>,
}

impl<T: Scalar> ShadeOp<T> {
    pub fn new(normals: Vec<[T; 3]>, views: Vec<[T; 3]>, quad: Arc<Quadrature<T>>) -> Self {
        Self::with_geometry(Arc::new(ShadeGeometry::new(&normals, &views, &quad)))
    }

    pub fn with_geometry(geom: Arc<ShadeGeometry<T>>) -> Self {
        ShadeOp {
            geom,
            cache: Mutex::new(None),
        }
    }

    fn check(&self, inputs: &[&Tensor<T>]) -> Result<(), AutodiffError> {
        let b = self.geom.len();
        let expect = [[b, 3], [b, 3], [b, 1], [self.geom.texels, 3]];
        if inputs.len() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                node: None,
                op: "shade",
                lhs: vec![inputs.len()],
                rhs: vec![4],
            });
        }
        for (t, e) in inputs.iter().zip(expect) {
            if t.shape() != e {
                return Err(AutodiffError::ShapeMismatch {
                    node: None,
                    op: "shade",
                    lhs: t.shape().to_vec(),
                    rhs: e.to_vec(),
                });
            }
        }
        Ok(())
    }

    fn lobes(&self, kr: &Tensor<T>) -> Vec<(T, T)> {
        let mut out = Vec::with_capacity(self.geom.entries.len());
        for b in 0..self.geom.len() {
            let r = kr.row(b)[0];
            let nv = self.geom.nv[b];
            out.extend(self.geom.sample(b).iter().map(|t| lobe(t, nv, r * r, true)));
        }
        out
    }
}

fn rgb<T: Scalar>(row: &[T]) -> [T; 3] {
    [row[0], row[1], row[2]]
}

impl<T: Scalar> CustomOp<T> for ShadeOp<T> {
    fn name(&self) -> &'static str {
        "shade"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError> {
        self.check(inputs)?;
        let (ka, ks, kr, rad) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let lobes = self.lobes(kr);
        let mut out = Vec::with_capacity(self.geom.len() * 3);
        for b in 0..self.geom.len() {
            let mut c = [T::zero(); 3];
            let (lo, hi) = (self.geom.offsets[b], self.geom.offsets[b + 1]);
            for (t, &(g, _)) in self.geom.entries[lo..hi].iter().zip(&lobes[lo..hi]) {
                let i = t.texel as usize;
                accumulate(&mut c, &rgb(ka.row(b)), &rgb(ks.row(b)), t, g, &rad.data()[3 * i..3 * i + 3]);
            }
            out.extend_from_slice(&c);
        }
        *self.cache.lock().unwrap() = Some((kr.data().to_vec(), lobes));
        Tensor::new(self.geom.len(), 3, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (ka, ks, kr, rad) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let bsz = self.geom.len();
        let cached = self.cache.lock().unwrap().take().filter(|(r, _)| r.as_slice() == kr.data());
        let lobes = match cached {
            Some((_, l)) => l,
            None => self.lobes(kr),
        };
        let mut g_ka = vec![T::zero(); bsz * 3];
        let mut g_ks = vec![T::zero(); bsz * 3];
        let mut g_kr = vec![T::zero(); bsz];
        let mut g_rad = vec![T::zero(); rad.len()];
        let want_rad = needs_grad[3];
        let want_kr = needs_grad[2];
        let inv_pi = T::FRAC_1_PI();
        let two = T::lit(2.0);
        for b in 0..bsz {
            let go = rgb(grad_output.row(b));
            let a = rgb(ka.row(b));
            let s = rgb(ks.row(b));
            let mut acc_ka = [T::zero(); 3];
            let mut acc_ks = [T::zero(); 3];
            let mut acc_alpha = T::zero();
            let (lo, hi) = (self.geom.offsets[b], self.geom.offsets[b + 1]);
            for (t, &(g, dg)) in self.geom.entries[lo..hi].iter().zip(&lobes[lo..hi]) {
                let i = t.texel as usize;
                let l = &rad.data()[3 * i..3 * i + 3];
                for c in 0..3 {
                    let gl = go[c] * l[c];
                    let fres = s[c] + (T::one() - s[c]) * t.w;
                    acc_ka[c] += gl * t.cos;
                    acc_ks[c] += gl * g * (T::one() - t.w);
                    acc_alpha += gl * dg * fres;
                    if want_rad {
                        g_rad[3 * i + c] += go[c] * (a[c] * inv_pi * t.cos + g * fres);
                    }
                }
            }
            for c in 0..3 {
                g_ka[3 * b + c] = acc_ka[c] * inv_pi;
                g_ks[3 * b + c] = acc_ks[c];
            }
            g_kr[b] = acc_alpha * two * kr.row(b)[0];
        }
        let wrap = |want: bool, rows: usize, cols: usize, data: Vec<T>| {
            want.then(|| Tensor::new(rows, cols, data).expect("gradient shape"))
        };
        vec![
            wrap(needs_grad[0], bsz, 3, g_ka),
            wrap(needs_grad[1], bsz, 3, g_ks),
            wrap(want_kr, bsz, 1, g_kr),
            wrap(want_rad, rad.rows(), 3, g_rad),
        ]
    }
}
