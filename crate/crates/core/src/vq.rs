//! Codebook quantization with straight-through gradients, EMA codebook
//! updates, per-codeword dropout and codebook-length selection.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::brdf::BrdfAttributes;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Label stored for pixels outside the foreground mask.
pub const BACKGROUND: u16 = u16::MAX;
/// Dropout rate of the last codeword.
pub const MAX_DROPOUT: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    /// `[M0, D]`, unit rows.
    codewords: Tensor<T>,
    rates: Vec<f64>,
    /// EMA cluster sizes `N_i`.
    ema_size: Vec<T>,
    /// EMA cluster sums `m_i`, `[M0, D]`.
    ema_sum: Tensor<T>,
    pub decay: f64,
    pub smoothing: f64,
}

fn normalize_row<T: Scalar>(row: &mut [T]) -> bool {
    // Dividing by the largest magnitude first keeps the squares out of the
    // subnormal range, where an idle codeword's decayed EMA sum ends up.
    let max = row.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    if !(max > T::lit(1e-30) && max.is_finite()) {
        return false;
    }
    row.iter_mut().for_each(|x| *x /= max);
    let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
    row.iter_mut().for_each(|x| *x /= n);
    true
}

/// Linearly spaced rates from 0 for the first codeword to [`MAX_DROPOUT`]
/// for the last.
pub fn dropout_rates(m0: usize) -> Vec<f64> {
    if m0 <= 1 {
        return vec![0.0; m0];
    }
    (0..m0).map(|i| MAX_DROPOUT * i as f64 / (m0 - 1) as f64).collect()
}

impl<T: Scalar> Codebook<T> {
    /// Codewords from unit rows, with zeroed cluster sizes and cluster sums
    /// equal to the codewords.
    pub fn from_codewords(mut codewords: Tensor<T>, decay: f64, smoothing: f64) -> Result<Self> {
        if codewords.rows() == 0 || codewords.cols() == 0 {
            return Err(Error::invalid("codebook", "empty codebook"));
        }
        if !(0.0..1.0).contains(&decay) || smoothing <= 0.0 {
            return Err(Error::invalid("codebook", format!("decay {decay} must be in [0,1), smoothing {smoothing} > 0")));
        }
        for i in 0..codewords.rows() {
            if !normalize_row(codewords.row_mut(i)) {
                return Err(Error::invalid("codebook", format!("codeword {i} has zero norm")));
            }
        }
        let m0 = codewords.rows();
        Ok(Codebook {
            ema_sum: codewords.clone(),
            ema_size: vec![T::zero(); m0],
            rates: dropout_rates(m0),
            codewords,
            decay,
            smoothing,
        })
    }

    /// `m0` codewords drawn uniformly on the unit sphere.
    pub fn random(m0: usize, dim: usize, decay: f64, smoothing: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut data = Vec::with_capacity(m0 * dim);
        for _ in 0..m0 * dim {
            // Box-Muller normal samples give an isotropic direction.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            data.push(T::lit((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()));
        }
        Self::from_codewords(Tensor::new(m0, dim, data)?, decay, smoothing)
    }

    /// Restores a codebook including its EMA state. Codewords are kept
    /// bit for bit and must already be unit length.
    pub fn from_parts(codewords: Tensor<T>, ema_size: Vec<T>, ema_sum: Tensor<T>, decay: f64, smoothing: f64) -> Result<Self> {
        let mut cb = Self::from_codewords(codewords.clone(), decay, smoothing)?;
        if ema_size.len() != cb.len() || ema_sum.shape() != cb.codewords.shape() {
            return Err(Error::invalid("codebook", "EMA state does not match the codewords"));
        }
        for i in 0..codewords.rows() {
            let n = codewords.row(i).iter().map(|&x| x * x).sum::<T>().sqrt().as_f64();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::invalid("codebook", format!("codeword {i} has norm {n}")));
            }
        }
        cb.codewords = codewords;
        cb.ema_size = ema_size;
        cb.ema_sum = ema_sum;
        Ok(cb)
    }

    pub fn len(&self) -> usize {
        self.codewords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.codewords.cols()
    }

    pub fn codewords(&self) -> &Tensor<T> {
        &self.codewords
    }

    pub fn codeword(&self, i: usize) -> &[T] {
        self.codewords.row(i)
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn ema_size(&self) -> &[T] {
        &self.ema_size
    }

    pub fn ema_sum(&self) -> &Tensor<T> {
        &self.ema_sum
    }

    /// Replaces codeword `i` (renormalized) and resets its EMA sum to it.
    pub fn set_codeword(&mut self, i: usize, v: &[T]) {
        let row = self.codewords.row_mut(i);
        row.copy_from_slice(v);
        if !normalize_row(row) {
            row.iter_mut().for_each(|x| *x = T::zero());
            row[0] = T::one();
        }
        let c = self.codewords.row(i).to_vec();
        self.ema_sum.row_mut(i).copy_from_slice(&c);
        self.ema_size[i] = T::zero();
    }

    /// Independent Bernoulli keep flags with probability `1 - r_i`; the
    /// first codeword is always kept.
    pub fn sample_dropout(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        self.rates
            .iter()
            .enumerate()
            .map(|(i, &r)| i == 0 || rng.gen::<f64>() >= r)
            .collect()
    }

    /// Nearest kept codeword among the first `limit` for every row of `z`.
    /// Ties go to the lowest index.
    pub fn quantize(&self, z: &Tensor<T>, keep: Option<&[bool]>, limit: usize) -> Result<Vec<usize>> {
        if self.is_empty() || limit == 0 {
            return Err(Error::invalid("codebook", "no codewords to match"));
        }
        if z.cols() != self.dim() {
            return Err(Error::invalid("latents", format!("dimension {} vs codebook {}", z.cols(), self.dim())));
        }
        let limit = limit.min(self.len());
        let allowed: Vec<usize> = (0..limit).filter(|&i| keep.is_none_or(|k| k[i])).collect();
        if allowed.is_empty() {
            return Err(Error::invalid("dropout mask", "every codeword dropped"));
        }
        let norms: Vec<T> = allowed
            .iter()
            .map(|&i| self.codewords.row(i).iter().map(|&x| x * x).sum())
            .collect();
        let mut out = Vec::with_capacity(z.rows());
        for r in 0..z.rows() {
            let zr = z.row(r);
            let zz: T = zr.iter().map(|&x| x * x).sum();
            let mut best = (T::infinity(), allowed[0]);
            for (k, &i) in allowed.iter().enumerate() {
                let e = self.codewords.row(i);
                let dot: T = e.iter().zip(zr).map(|(&a, &b)| a * b).sum();
                let d = norms[k] - (dot + dot) + zz;
                if d < best.0 {
                    best = (d, i);
                }
            }
            out.push(best.1);
        }
        Ok(out)
    }

    /// Rows `e_{u_b}` gathered into a `[B, D]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.codewords.row(i));
        }
        Tensor::new(indices.len(), self.dim(), data).expect("gather shape")
    }

    /// One EMA step from this batch's assignments:
    /// `N <- g N + (1-g) n`, `m <- g m + (1-g) sum z`, codeword =
    /// `m / N'` renormalized, with Laplace-smoothed `N'`. Returns the batch
    /// counts `n`.
    pub fn ema_update(&mut self, z: &Tensor<T>, assign: &[usize]) -> Result<Vec<usize>> {
        if z.rows() != assign.len() || z.cols() != self.dim() {
            return Err(Error::invalid("ema update", "latents and assignments disagree"));
        }
        let k = self.len();
        let mut counts = vec![0usize; k];
        let mut sums = Tensor::zeros(k, self.dim());
        for (r, &u) in assign.iter().enumerate() {
            if u >= k {
                return Err(Error::invalid("ema update", format!("assignment {u} out of range")));
            }
            counts[u] += 1;
            sums.row_mut(u).iter_mut().zip(z.row(r)).for_each(|(s, &x)| *s += x);
        }
        let g = T::lit(self.decay);
        let one_g = T::one() - g;
        for i in 0..k {
            self.ema_size[i] = g * self.ema_size[i] + one_g * T::lit(counts[i] as f64);
            let (m, s) = (self.ema_sum.row_mut(i), sums.row(i));
            m.iter_mut().zip(s).for_each(|(m, &s)| *m = g * *m + one_g * s);
        }
        let total: T = self.ema_size.iter().copied().sum();
        let eps = T::lit(self.smoothing);
        let kt = T::lit(k as f64);
        for i in 0..k {
            let smoothed = (self.ema_size[i] + eps) / (total + kt * eps) * total.max(eps);
            let mut row: Vec<T> = self.ema_sum.row(i).iter().map(|&m| m / smoothed).collect();
            if normalize_row(&mut row) {
                self.codewords.row_mut(i).copy_from_slice(&row);
            }
        }
        Ok(counts)
    }

    pub fn cast<U: Scalar>(&self) -> Codebook<U> {
        Codebook {
            codewords: self.codewords.cast(),
            rates: self.rates.clone(),
            ema_size: self.ema_size.iter().map(|x| U::lit(x.as_f64())).collect(),
            ema_sum: self.ema_sum.cast(),
            decay: self.decay,
            smoothing: self.smoothing,
        }
    }
}

/// `sg(e_u - z) + z`: forward value `e_u`, gradient passed to `z`
/// unchanged.
pub fn straight_through<T: Scalar>(g: &mut Graph<T>, z: Var, e_u: Var) -> Result<Var, AutodiffError> {
    let diff = g.sub(e_u, z)?;
    let frozen = g.stop_gradient(diff)?;
    g.add(frozen, z)
}

/// Terms of the quantization loss, each averaged over the batch.
#[derive(Clone, Copy, Debug)]
pub struct VqLossVars {
    /// `|e_u - sg(z)|^2`: moves codewords; logged only when the codebook is
    /// updated by EMA.
    pub codebook: Var,
    /// `|z - sg(e_u)|^2`.
    pub commitment: Var,
}

pub fn vq_loss<T: Scalar>(g: &mut Graph<T>, z: Var, e_u: Var) -> Result<VqLossVars, AutodiffError> {
    let z_sg = g.stop_gradient(z)?;
    let e_sg = g.stop_gradient(e_u)?;
    let d1 = g.sub(e_u, z_sg)?;
    let n1 = g.row_dot(d1, d1)?;
    let codebook = g.mean(n1)?;
    let d2 = g.sub(z, e_sg)?;
    let n2 = g.row_dot(d2, d2)?;
    let commitment = g.mean(n2)?;
    Ok(VqLossVars { codebook, commitment })
}

/// Smallest `M` (1-based) with `|err_M - err_i| <= eps` for every `i > M`.
pub fn select_length(errors: &[f64], eps: f64) -> Result<usize> {
    if errors.is_empty() {
        return Err(Error::invalid("ranking curve", "no errors"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("ranking curve", format!("eps must be positive, got {eps}")));
    }
    for k in 0..errors.len() {
        if errors[k + 1..].iter().all(|e| (errors[k] - e).abs() <= eps) {
            return Ok(k + 1);
        }
    }
    Ok(errors.len())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankingCurve {
    /// `err_k` for `k = 1..=M0`.
    pub errors: Vec<f64>,
    pub eps: f64,
    pub selected: usize,
}

impl RankingCurve {
    pub fn new(errors: Vec<f64>, eps: f64) -> Result<Self> {
        let selected = select_length(&errors, eps)?;
        Ok(RankingCurve { errors, eps, selected })
    }
}

/// Per-pixel codeword indices for one view; [`BACKGROUND`] outside the mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

impl SegmentationMap {
    pub fn get(&self, x: usize, y: usize) -> Option<u16> {
        (x < self.width && y < self.height).then(|| self.labels[y * self.width + x])
    }

    /// Pixel count per label, background excluded.
    pub fn histogram(&self, labels: usize) -> Vec<usize> {
        let mut h = vec![0; labels];
        for &l in &self.labels {
            if l != BACKGROUND && (l as usize) < labels {
                h[l as usize] += 1;
            }
        }
        h
    }

    /// Palette-indexed PNG; background uses the last palette entry.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut palette = Vec::with_capacity(3 * 256);
        for i in 0..255 {
            palette.extend_from_slice(&display_color(i));
        }
        palette.extend_from_slice(&[0, 0, 0]);
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(palette);
            let mut w = enc.write_header().map_err(|e| Error::invalid("png", e.to_string()))?;
            let data: Vec<u8> = self
                .labels
                .iter()
                .map(|&l| if l == BACKGROUND { 255 } else { l.min(254) as u8 })
                .collect();
            w.write_image_data(&data).map_err(|e| Error::invalid("png", e.to_string()))?;
        }
        Ok(out)
    }
}

/// Deterministic, well-separated display color for label `i`.
pub fn display_color(i: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [170, 110, 40],
    ];
    let b = BASE[i % BASE.len()];
    let shade = (i / BASE.len()) as u8;
    b.map(|c| c.saturating_sub(shade.saturating_mul(40)))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaterialEntry {
    pub index: usize,
    pub k_d: [f64; 3],
    pub k_m: f64,
    pub k_r: f64,
    pub display_color: [u8; 3],
}

impl MaterialEntry {
    pub fn new<T: Scalar>(index: usize, a: &BrdfAttributes<T>) -> Self {
        MaterialEntry {
            index,
            k_d: a.k_d.map(|c| c.as_f64()),
            k_m: a.k_m.as_f64(),
            k_r: a.k_r.as_f64(),
            display_color: display_color(index),
        }
    }
}

/// Writes `stem.png` and `stem.json` (label to attributes and color).
pub fn export_segmentation(map: &SegmentationMap, materials: &[MaterialEntry], stem: &Path) -> Result<()> {
    let png_path = stem.with_extension("png");
    std::fs::write(&png_path, map.to_png()?).map_err(|e| Error::io(&png_path, e))?;
    let json_path = stem.with_extension("json");
    let body = serde_json::to_vec_pretty(&serde_json::json!({
        "width": map.width,
        "height": map.height,
        "background": BACKGROUND,
        "materials": materials,
    }))?;
    std::fs::write(&json_path, body).map_err(|e| Error::io(&json_path, e))
}
