//! Microfacet shading: basecolor/metallic/roughness attributes, a
//! Cook-Torrance BRDF (GGX, height-correlated Smith, Schlick), lat-long
//! environment lighting and the chromaticity transform.

mod env;
mod shade;

pub use env::{EnvironmentMap, Quadrature};
pub use shade::{ShadeGeometry, ShadeOp};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Rgb<T> = [T; 3];

/// Offset in the chromaticity denominator.
pub const CHROMA_DELTA: f64 = 1e-6;
/// Floor for grazing-angle and NDF denominators.
pub const GRAZING_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BrdfAttributes<T> {
    pub k_d: Rgb<T>,
    pub k_m: T,
    pub k_r: T,
}

impl<T: Scalar> BrdfAttributes<T> {
    /// Validated constructor; every component must lie in `[0, 1]`.
    pub fn new(k_d: Rgb<T>, k_m: T, k_r: T) -> Result<Self> {
        let ok = |x: T| x >= T::zero() && x <= T::one();
        if !(k_d.iter().all(|&c| ok(c)) && ok(k_m) && ok(k_r)) {
            return Err(Error::invalid(
                "brdf attributes",
                format!("components must lie in [0,1], got k_d={k_d:?} k_m={k_m} k_r={k_r}"),
            ));
        }
        Ok(BrdfAttributes { k_d, k_m, k_r })
    }

    /// Diffuse `k_d (1 - k_m)`, evaluated as `k_d - k_s` so the split into
    /// diffuse and specular loses at most one rounding.
    pub fn diffuse(&self) -> Rgb<T> {
        let ks = self.specular();
        std::array::from_fn(|c| self.k_d[c] - ks[c])
    }

    /// Specular `k_d k_m`.
    pub fn specular(&self) -> Rgb<T> {
        self.k_d.map(|c| c * self.k_m)
    }

    pub fn cast<U: Scalar>(&self) -> BrdfAttributes<U> {
        BrdfAttributes {
            k_d: self.k_d.map(|c| U::lit(c.as_f64())),
            k_m: U::lit(self.k_m.as_f64()),
            k_r: U::lit(self.k_r.as_f64()),
        }
    }
}

/// Splits basecolor into diffuse and specular parts by metallic.
pub fn convert_attributes<T: Scalar>(k_d: Rgb<T>, k_m: T) -> Result<(Rgb<T>, Rgb<T>)> {
    let a = BrdfAttributes::new(k_d, k_m, T::zero())?;
    Ok((a.diffuse(), a.specular()))
}

/// Surface sample to shade.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadePoint<T> {
    pub p: [T; 3],
    pub normal: [T; 3],
    /// Unit direction from the surface toward the camera.
    pub view: [T; 3],
}

pub(crate) fn dot3<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn normalize3<T: Scalar>(a: [T; 3]) -> [T; 3] {
    let n = dot3(&a, &a).sqrt();
    if n > T::zero() {
        a.map(|x| x / n)
    } else {
        a
    }
}

/// GGX normal distribution for `alpha = k_r^2`, with its derivative in
/// `alpha`.
pub fn ggx_d<T: Scalar>(n_dot_h: T, alpha: T) -> (T, T) {
    let pi = T::PI();
    let a2 = alpha * alpha;
    let nh2 = n_dot_h * n_dot_h;
    let raw = nh2 * (a2 - T::one()) + T::one();
    let floor = T::lit(GRAZING_FLOOR);
    let (q, dq) = if raw > floor {
        (raw, T::lit(2.0) * alpha * nh2)
    } else {
        (floor, T::zero())
    };
    let d = a2 / (pi * q * q);
    let dd = T::lit(2.0) * alpha / (pi * q * q) - T::lit(2.0) * a2 * dq / (pi * q * q * q);
    (d, dd)
}

/// Height-correlated Smith visibility `G / (4 n.l n.v)` and its derivative in
/// `alpha`.
pub fn smith_v<T: Scalar>(n_dot_l: T, n_dot_v: T, alpha: T) -> (T, T) {
    let floor = T::lit(GRAZING_FLOOR);
    let nl = n_dot_l.max(floor);
    let nv = n_dot_v.max(floor);
    let a2 = alpha * alpha;
    let s1 = (nv * nv * (T::one() - a2) + a2).sqrt();
    let s2 = (nl * nl * (T::one() - a2) + a2).sqrt();
    let den = nl * s1 + nv * s2;
    let half = T::lit(0.5);
    let v = half / den;
    let ds1 = alpha * (T::one() - nv * nv) / s1;
    let ds2 = alpha * (T::one() - nl * nl) / s2;
    let dv = -half / (den * den) * (nl * ds1 + nv * ds2);
    (v, dv)
}

/// Schlick weight `(1 - v.h)^5`; Fresnel is `f0 + (1 - f0) w`.
pub fn schlick_weight<T: Scalar>(v_dot_h: T) -> T {
    let m = (T::one() - v_dot_h).max(T::zero()).min(T::one());
    let m2 = m * m;
    m2 * m2 * m
}

/// Reflectance `f_R(w_i, w_o)`; zero when either direction is below the
/// surface.
pub fn eval_brdf<T: Scalar>(attrs: &BrdfAttributes<T>, n: &[T; 3], wi: &[T; 3], wo: &[T; 3]) -> Rgb<T> {
    let nl = dot3(n, wi);
    let nv = dot3(n, wo);
    if nl <= T::zero() || nv <= T::zero() {
        return [T::zero(); 3];
    }
    let h = normalize3([wi[0] + wo[0], wi[1] + wo[1], wi[2] + wo[2]]);
    let alpha = attrs.k_r * attrs.k_r;
    let (d, _) = ggx_d(dot3(n, &h), alpha);
    let (v, _) = smith_v(nl, nv, alpha);
    let w = schlick_weight(dot3(wo, &h));
    let kd = attrs.diffuse();
    let ks = attrs.specular();
    let inv_pi = T::FRAC_1_PI();
    std::array::from_fn(|c| kd[c] * inv_pi + d * v * (ks[c] + (T::one() - ks[c]) * w))
}

/// Roughness-independent terms of one texel that lies above the surface.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TexelGeom<T> {
    pub texel: u32,
    pub nl: T,
    pub nh: T,
    /// `n.w_i dw`.
    pub cos: T,
    /// Schlick weight.
    pub w: T,
}

#[inline]
pub(crate) fn texel_geometry<T: Scalar>(n: &[T; 3], wo: &[T; 3], wi: &[T; 3], dw: T, texel: usize) -> Option<TexelGeom<T>> {
    let nl = dot3(n, wi);
    if nl <= T::zero() {
        return None;
    }
    let h = normalize3([wi[0] + wo[0], wi[1] + wo[1], wi[2] + wo[2]]);
    Some(TexelGeom {
        texel: texel as u32,
        nl,
        nh: dot3(n, &h),
        cos: nl * dw,
        w: schlick_weight(dot3(wo, &h)),
    })
}

/// `(g, dg/dalpha)` with `g = D V cos`.
#[inline]
pub(crate) fn lobe<T: Scalar>(t: &TexelGeom<T>, nv: T, alpha: T, with_derivative: bool) -> (T, T) {
    let (d, dd) = ggx_d(t.nh, alpha);
    let (v, dv) = smith_v(t.nl, nv, alpha);
    let dg = if with_derivative {
        (dd * v + d * dv) * t.cos
    } else {
        T::zero()
    };
    (d * v * t.cos, dg)
}

/// Shades a surface point by Riemann quadrature over every environment
/// texel. Visibility and indirect light are not modeled.
pub fn render_point<T: Scalar>(attrs: &BrdfAttributes<T>, point: &ShadePoint<T>, env: &EnvironmentMap<T>) -> Rgb<T> {
    shade_attrs(
        &attrs.diffuse(),
        &attrs.specular(),
        attrs.k_r,
        &point.normal,
        &point.view,
        env.quadrature(),
        env.radiance(),
    )
}

/// Shading from diffuse/specular/roughness directly; shared by
/// [`render_point`] and [`ShadeOp`] so both agree bit for bit.
pub(crate) fn shade_attrs<T: Scalar>(
    k_alpha: &Rgb<T>,
    k_s: &Rgb<T>,
    k_r: T,
    n: &[T; 3],
    wo: &[T; 3],
    quad: &Quadrature<T>,
    radiance: &[T],
) -> Rgb<T> {
    let nv = dot3(n, wo);
    let mut out = [T::zero(); 3];
    if nv <= T::zero() {
        return out;
    }
    let alpha = k_r * k_r;
    for (i, (wi, &dw)) in quad.dirs.iter().zip(&quad.weights).enumerate() {
        if let Some(t) = texel_geometry(n, wo, wi, dw, i) {
            let (g, _) = lobe(&t, nv, alpha, false);
            accumulate(&mut out, k_alpha, k_s, &t, g, &radiance[3 * i..3 * i + 3]);
        }
    }
    out
}

#[inline]
pub(crate) fn accumulate<T: Scalar>(out: &mut Rgb<T>, k_alpha: &Rgb<T>, k_s: &Rgb<T>, t: &TexelGeom<T>, g: T, l: &[T]) {
    let inv_pi = T::FRAC_1_PI();
    for c in 0..3 {
        let f = k_alpha[c] * inv_pi * t.cos + g * (k_s[c] + (T::one() - k_s[c]) * t.w);
        out[c] += l[c] * f;
    }
}

/// Sum-normalized color, `(c + delta/3) / (R + G + B + delta)`. Components
/// always sum to one and black maps to `(1/3, 1/3, 1/3)`.
pub fn chromaticity<T: Scalar>(c: &Rgb<T>) -> Result<Rgb<T>> {
    if c.iter().any(|&x| x < T::zero() || !x.is_finite()) {
        return Err(Error::invalid("color", format!("chromaticity needs finite nonnegative input, got {c:?}")));
    }
    let delta = T::lit(CHROMA_DELTA);
    let denom = c[0] + c[1] + c[2] + delta;
    let third = delta / T::lit(3.0);
    Ok(c.map(|x| (x + third) / denom))
}
