//! Inference over a trained model: per-view latents, codeword assignment,
//! codebook ranking, segmentation maps and branch renders.

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::brdf::{render_point, BrdfAttributes, EnvironmentMap, ShadePoint};
use crate::error::{Error, Result};
use crate::field::Branch;
use crate::metrics::{meanshift, MeanshiftConfig};
use crate::model::Model;
use crate::scene::{GBuffer, View};
use crate::vq::{RankingCurve, SegmentationMap, BACKGROUND};

/// Foreground pixels of one view with their latents.
#[derive(Clone, Debug)]
pub struct ViewLatents {
    /// Pixel indices in scan order.
    pub pixels: Vec<usize>,
    /// `[pixels, D]` unit latents.
    pub z: Tensor<f32>,
}

impl ViewLatents {
    pub fn new(model: &Model<f32>, gbuffer: &GBuffer) -> Result<Self> {
        let pixels = gbuffer.foreground();
        let points: Vec<[f32; 3]> = pixels.iter().map(|&i| gbuffer.points[i]).collect();
        let z = model.latents(&points)?;
        Ok(ViewLatents { pixels, z })
    }

    /// Nearest codeword among the first `m`, without dropout.
    pub fn assign(&self, model: &Model<f32>, m: usize) -> Result<Vec<usize>> {
        if self.pixels.is_empty() {
            return Ok(Vec::new());
        }
        model.codebook.quantize(&self.z, None, m)
    }
}

pub(crate) fn shade_point(g: &GBuffer, i: usize) -> ShadePoint<f32> {
    ShadePoint {
        p: g.points[i],
        normal: g.normals[i],
        view: g.views[i],
    }
}

/// Shades the listed pixels, one attribute set each; every other pixel is
/// black.
pub fn render_pixels(gbuffer: &GBuffer, pixels: &[usize], attrs: &[BrdfAttributes<f32>], env: &EnvironmentMap<f32>) -> Result<Vec<f32>> {
    if pixels.len() != attrs.len() {
        return Err(Error::invalid("render", format!("{} pixels vs {} attribute sets", pixels.len(), attrs.len())));
    }
    let colors: Vec<[f32; 3]> = pixels
        .par_iter()
        .zip(attrs.par_iter())
        .map(|(&i, a)| render_point(a, &shade_point(gbuffer, i), env))
        .collect();
    let mut img = vec![0.0f32; gbuffer.len() * 3];
    for (&i, c) in pixels.iter().zip(&colors) {
        img[3 * i..3 * i + 3].copy_from_slice(c);
    }
    Ok(img)
}

/// Per-pixel attributes of one branch. The discrete branch decodes the
/// nearest of the first `m` codewords.
pub fn branch_attributes(model: &Model<f32>, latents: &ViewLatents, branch: Branch, m: usize) -> Result<Vec<BrdfAttributes<f32>>> {
    match branch {
        Branch::Continuous => model.attributes(Branch::Continuous, &latents.z),
        Branch::Discrete => {
            let table = model.codeword_attributes()?;
            Ok(latents.assign(model, m)?.into_iter().map(|u| table[u]).collect())
        }
    }
}

/// Renders one view from one branch under `env`.
pub fn render_branch(model: &Model<f32>, gbuffer: &GBuffer, branch: Branch, m: usize, env: &EnvironmentMap<f32>) -> Result<Vec<f32>> {
    let latents = ViewLatents::new(model, gbuffer)?;
    let attrs = branch_attributes(model, &latents, branch, m)?;
    render_pixels(gbuffer, &latents.pixels, &attrs, env)
}

/// Codeword index per pixel using the first `m` codewords; background
/// pixels get [`BACKGROUND`].
pub fn build_segmentation(model: &Model<f32>, gbuffer: &GBuffer, m: usize) -> Result<SegmentationMap> {
    if m == 0 || m > model.codebook.len() {
        return Err(Error::invalid("codebook length", format!("{m} outside 1..={}", model.codebook.len())));
    }
    let latents = ViewLatents::new(model, gbuffer)?;
    let mut labels = vec![BACKGROUND; gbuffer.len()];
    for (&i, u) in latents.pixels.iter().zip(latents.assign(model, m)?) {
        labels[i] = u as u16;
    }
    Ok(SegmentationMap {
        width: gbuffer.width,
        height: gbuffer.height,
        labels,
    })
}

/// `err_k` for `k = 1..=M0`: RGB mean squared error over the foreground
/// pixels of `views` when the discrete branch may only use the first `k`
/// codewords. Then selects `M` by the flattening rule with threshold `eps`.
pub fn rank_and_select(model: &Model<f32>, views: &[View], eps: f64) -> Result<RankingCurve> {
    if views.is_empty() {
        return Err(Error::invalid("ranking", "no evaluation views"));
    }
    let m0 = model.codebook.len();
    let table = model.codeword_attributes()?;
    let env = model.environment()?;
    let mut sums = vec![0.0f64; m0];
    let mut count = 0usize;
    for view in views {
        let latents = ViewLatents::new(model, &view.gbuffer)?;
        let assign: Vec<Vec<usize>> = (1..=m0).map(|k| latents.assign(model, k)).collect::<Result<_>>()?;
        count += latents.pixels.len();
        let per_pixel: Vec<Vec<f64>> = latents
            .pixels
            .par_iter()
            .enumerate()
            .map(|(r, &i)| {
                let point = shade_point(&view.gbuffer, i);
                let gt = &view.image[3 * i..3 * i + 3];
                let mut errs = Vec::with_capacity(m0);
                let mut cached: Option<(usize, f64)> = None;
                for a in &assign {
                    let u = a[r];
                    let e = match cached {
                        Some((cu, e)) if cu == u => e,
                        _ => {
                            let c = render_point(&table[u], &point, &env);
                            (0..3).map(|k| (c[k] as f64 - gt[k] as f64).powi(2)).sum::<f64>() / 3.0
                        }
                    };
                    cached = Some((u, e));
                    errs.push(e);
                }
                errs
            })
            .collect();
        for errs in per_pixel {
            for (s, e) in sums.iter_mut().zip(errs) {
                *s += e;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("ranking", "evaluation views have no foreground"));
    }
    RankingCurve::new(sums.into_iter().map(|s| s / count as f64).collect(), eps)
}

/// Per-pixel features the meanshift baseline clusters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSpace {
    /// Continuous-branch `(k_d, k_m, k_r)`.
    Attributes,
    /// Continuous-branch attributes concatenated with the latent `z`.
    AttributesLatent,
}

impl std::str::FromStr for FeatureSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attributes" => Ok(FeatureSpace::Attributes),
            "attributes-latent" => Ok(FeatureSpace::AttributesLatent),
            _ => Err(Error::invalid("feature space", format!("unknown `{s}`; expected attributes or attributes-latent"))),
        }
    }
}

fn pixel_features(model: &Model<f32>, latents: &ViewLatents, space: FeatureSpace) -> Result<Vec<Vec<f64>>> {
    let attrs = model.attributes(Branch::Continuous, &latents.z)?;
    Ok(attrs
        .iter()
        .enumerate()
        .map(|(r, a)| {
            let mut f: Vec<f64> = a.k_d.iter().map(|&x| x as f64).collect();
            f.push(a.k_m as f64);
            f.push(a.k_r as f64);
            if space == FeatureSpace::AttributesLatent {
                f.extend(latents.z.row(r).iter().map(|&x| x as f64));
            }
            f
        })
        .collect())
}

/// Meanshift segmentation of every view: modes are found on an evenly
/// strided sample of at most `max_seeds` foreground pixels pooled over all
/// views, then every pixel takes its nearest mode.
pub fn meanshift_segmentation(
    model: &Model<f32>,
    views: &[View],
    space: FeatureSpace,
    cfg: &MeanshiftConfig,
    max_seeds: usize,
) -> Result<Vec<SegmentationMap>> {
    let mut per_view = Vec::with_capacity(views.len());
    for v in views {
        let latents = ViewLatents::new(model, &v.gbuffer)?;
        let feats = pixel_features(model, &latents, space)?;
        per_view.push((latents.pixels, feats));
    }
    let total: usize = per_view.iter().map(|(p, _)| p.len()).sum();
    if total == 0 {
        return Err(Error::invalid("meanshift segmentation", "no foreground pixels"));
    }
    let stride = total.div_ceil(max_seeds.max(1));
    let sample: Vec<Vec<f64>> = per_view.iter().flat_map(|(_, f)| f.iter()).step_by(stride).cloned().collect();
    let clustering = meanshift(&sample, cfg)?;
    if clustering.centers.len() >= BACKGROUND as usize {
        return Err(Error::invalid("meanshift segmentation", format!("{} clusters exceed the label range", clustering.centers.len())));
    }
    Ok(views
        .iter()
        .zip(per_view)
        .map(|(v, (pixels, feats))| {
            let g = &v.gbuffer;
            let mut labels = vec![BACKGROUND; g.width * g.height];
            for (&i, f) in pixels.iter().zip(&feats) {
                labels[i] = clustering.predict(f) as u16;
            }
            SegmentationMap {
                width: g.width,
                height: g.height,
                labels,
            }
        })
        .collect())
}
