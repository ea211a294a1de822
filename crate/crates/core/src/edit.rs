//! Material selection, editing and relighting over a frozen model.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use crate::brdf::{BrdfAttributes, EnvironmentMap};
use crate::decompose::{render_pixels, ViewLatents};
use crate::error::Error;
use crate::field::Branch;
use crate::model::Model;
use crate::scene::{Camera, EnvPreset, GBuffer, SceneBundle, View};
use crate::vq::{display_color, SegmentationMap, BACKGROUND};

/// Attribute distance under which an edit counts as the identity.
pub const IDENTITY_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum EditError {
    #[error("unknown view {view}; the scene has {views}")]
    UnknownView { view: usize, views: usize },
    #[error("pixel ({x}, {y}) outside the {width}x{height} image")]
    OutOfBounds { x: usize, y: usize, width: usize, height: usize },
    #[error("no material at ({x}, {y}): background pixel")]
    Background { x: usize, y: usize },
    #[error("codeword {index} outside the {m} selected materials")]
    UnknownMaterial { index: usize, m: usize },
    #[error("invalid {field}: {detail}")]
    InvalidRequest { field: &'static str, detail: String },
    #[error(transparent)]
    Core(#[from] Error),
}

impl EditError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            EditError::UnknownView { .. } => "unknown_view",
            EditError::OutOfBounds { .. } => "out_of_bounds",
            EditError::Background { .. } => "no_material",
            EditError::UnknownMaterial { .. } => "unknown_material",
            EditError::InvalidRequest { .. } => "invalid_request",
            EditError::Core(_) => "internal",
        }
    }
}

pub type EditResult<T> = std::result::Result<T, EditError>;

fn invalid(field: &'static str, detail: impl Into<String>) -> EditError {
    EditError::InvalidRequest {
        field,
        detail: detail.into(),
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)` in one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub view: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, view: usize, x: usize, y: usize) -> bool {
        view == self.view && (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub index: usize,
    pub k_d: [f64; 3],
    pub k_m: f64,
    pub k_r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl EditRequest {
    fn attributes(&self) -> EditResult<BrdfAttributes<f32>> {
        let vals = [self.k_d[0], self.k_d[1], self.k_d[2], self.k_m, self.k_r];
        if let Some(v) = vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid("attributes", format!("{v} outside [0, 1]")));
        }
        Ok(BrdfAttributes {
            k_d: self.k_d.map(|c| c as f32),
            k_m: self.k_m as f32,
            k_r: self.k_r as f32,
        })
    }
}

/// Lighting to render under.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Lighting {
    /// The environment learned with the model.
    Original,
    /// A named analytic environment sampled on the model's grid.
    Preset { name: String },
    /// An explicit map.
    Map { rows: usize, cols: usize, radiance: Vec<f32> },
}

/// A journaled session mutation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum EditOp {
    Edit(EditRequest),
    Relight {
        lighting: Lighting,
        #[serde(default = "one")]
        intensity: f64,
    },
    Reset,
}

fn one() -> f64 {
    1.0
}

/// Which attributes a render uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Continuous,
    Discrete,
    /// Overridden pixels from their override attributes, every other pixel
    /// from the continuous branch.
    Edited,
}

impl std::str::FromStr for RenderMode {
    type Err = EditError;

    fn from_str(s: &str) -> EditResult<Self> {
        match s {
            "continuous" => Ok(RenderMode::Continuous),
            "discrete" => Ok(RenderMode::Discrete),
            "edited" => Ok(RenderMode::Edited),
            _ => Err(invalid("branch", format!("unknown `{s}`; expected continuous, discrete or edited"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaterialInfo {
    pub index: usize,
    pub k_d: [f64; 3],
    pub k_m: f64,
    pub k_r: f64,
    pub display_color: [u8; 3],
    pub overridden: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Override {
    attrs: BrdfAttributes<f32>,
    bbox: Option<BBox>,
}

/// Per-view inference that never changes while the model is frozen.
#[derive(Debug)]
struct ViewCache {
    pixels: Vec<usize>,
    assign: Vec<usize>,
    continuous: Vec<BrdfAttributes<f32>>,
}

impl ViewCache {
    fn new(model: &Model<f32>, gbuffer: &GBuffer, m: usize) -> crate::Result<Self> {
        let latents = ViewLatents::new(model, gbuffer)?;
        let assign = latents.assign(model, m)?;
        let continuous = model.attributes(Branch::Continuous, &latents.z)?;
        Ok(ViewCache {
            pixels: latents.pixels,
            assign,
            continuous,
        })
    }
}

/// A frozen model with a codebook length, an override table and an active
/// environment. Edits never touch model parameters.
#[derive(Debug)]
pub struct EditSession {
    model: Arc<Model<f32>>,
    model_hash: String,
    bundle: Arc<SceneBundle>,
    m: usize,
    table: Vec<BrdfAttributes<f32>>,
    learned_env: EnvironmentMap<f32>,
    env: EnvironmentMap<f32>,
    overrides: BTreeMap<usize, Override>,
    cache: Vec<OnceLock<ViewCache>>,
}

impl EditSession {
    pub fn new(model: Arc<Model<f32>>, bundle: Arc<SceneBundle>, m: usize) -> EditResult<Self> {
        if m == 0 || m > model.codebook.len() {
            return Err(invalid("codebook length", format!("{m} outside 1..={}", model.codebook.len())));
        }
        let table = model.codeword_attributes()?;
        let learned_env = model.environment()?;
        Ok(EditSession {
            model_hash: model.hash(),
            cache: (0..bundle.views.len()).map(|_| OnceLock::new()).collect(),
            model,
            bundle,
            m,
            table,
            env: learned_env.clone(),
            learned_env,
            overrides: BTreeMap::new(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn bundle(&self) -> &SceneBundle {
        &self.bundle
    }

    /// Selected codebook length.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Checkpoint hash taken when the session opened.
    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    /// True while the model still hashes to [`Self::model_hash`].
    pub fn verify_frozen(&self) -> bool {
        self.model.hash() == self.model_hash
    }

    pub fn environment(&self) -> &EnvironmentMap<f32> {
        &self.env
    }

    pub fn view(&self, view: usize) -> EditResult<&View> {
        self.bundle.views.get(view).ok_or(EditError::UnknownView {
            view,
            views: self.bundle.views.len(),
        })
    }

    fn cached(&self, view: usize) -> EditResult<&ViewCache> {
        let gbuffer = &self.view(view)?.gbuffer;
        if let Some(c) = self.cache[view].get() {
            return Ok(c);
        }
        let c = ViewCache::new(&self.model, gbuffer, self.m)?;
        Ok(self.cache[view].get_or_init(|| c))
    }

    /// Codeword index per pixel, [`BACKGROUND`] outside the mask.
    pub fn segmentation(&self, view: usize) -> EditResult<SegmentationMap> {
        let g = &self.view(view)?.gbuffer;
        let c = self.cached(view)?;
        let mut labels = vec![BACKGROUND; g.len()];
        for (&i, &u) in c.pixels.iter().zip(&c.assign) {
            labels[i] = u as u16;
        }
        Ok(SegmentationMap {
            width: g.width,
            height: g.height,
            labels,
        })
    }

    pub fn select_material(&self, view: usize, x: usize, y: usize) -> EditResult<usize> {
        let g = &self.view(view)?.gbuffer;
        if x >= g.width || y >= g.height {
            return Err(EditError::OutOfBounds {
                x,
                y,
                width: g.width,
                height: g.height,
            });
        }
        match self.segmentation(view)?.labels[y * g.width + x] {
            BACKGROUND => Err(EditError::Background { x, y }),
            u => Ok(u as usize),
        }
    }

    /// Decoded attributes of the first `M` codewords with override state.
    pub fn materials(&self) -> Vec<MaterialInfo> {
        (0..self.m)
            .map(|i| {
                let o = self.overrides.get(&i);
                let a = o.map_or(self.table[i], |o| o.attrs);
                MaterialInfo {
                    index: i,
                    k_d: a.k_d.map(f64::from),
                    k_m: a.k_m as f64,
                    k_r: a.k_r as f64,
                    display_color: display_color(i),
                    overridden: o.is_some(),
                }
            })
            .collect()
    }

    /// Validates a request; `None` when it matches the codeword's decoded
    /// attributes within [`IDENTITY_TOL`].
    fn check_edit(&self, req: &EditRequest) -> EditResult<Option<Override>> {
        if req.index >= self.m {
            return Err(EditError::UnknownMaterial {
                index: req.index,
                m: self.m,
            });
        }
        let attrs = req.attributes()?;
        if let Some(b) = &req.bbox {
            let g = &self.view(b.view)?.gbuffer;
            if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > g.width || b.y1 > g.height {
                return Err(invalid("bbox", format!("{b:?} is empty or exceeds {}x{}", g.width, g.height)));
            }
        }
        let own = &self.table[req.index];
        let own_vals = [own.k_d[0], own.k_d[1], own.k_d[2], own.k_m, own.k_r];
        let req_vals = [req.k_d[0], req.k_d[1], req.k_d[2], req.k_m, req.k_r];
        if own_vals.iter().zip(req_vals).all(|(&a, b)| (a as f64 - b).abs() <= IDENTITY_TOL) {
            return Ok(None);
        }
        Ok(Some(Override { attrs, bbox: req.bbox }))
    }

    /// Records an override for one codeword, replacing any earlier one. An
    /// identity request clears the override, so it leaves renders untouched.
    pub fn apply_edit(&mut self, req: &EditRequest) -> EditResult<()> {
        match self.check_edit(req)? {
            Some(o) => self.overrides.insert(req.index, o),
            None => self.overrides.remove(&req.index),
        };
        Ok(())
    }

    pub fn relight(&mut self, env: EnvironmentMap<f32>) {
        self.env = env;
    }

    /// Resolves a lighting description; presets use the learned grid.
    pub fn lighting(&self, lighting: &Lighting, intensity: f64) -> EditResult<EnvironmentMap<f32>> {
        if !(intensity >= 0.0 && intensity.is_finite()) {
            return Err(invalid("intensity", format!("{intensity} must be finite and >= 0")));
        }
        let env = match lighting {
            Lighting::Original => self.learned_env.clone(),
            Lighting::Preset { name } => EnvPreset::parse(name)
                .and_then(|p| p.build(self.learned_env.rows(), self.learned_env.cols()))
                .map_err(|e| invalid("lighting", e.to_string()))?,
            Lighting::Map { rows, cols, radiance } => {
                EnvironmentMap::new(*rows, *cols, radiance.clone()).map_err(|e| invalid("lighting", e.to_string()))?
            }
        };
        if intensity == 1.0 {
            return Ok(env);
        }
        Ok(env.scaled(intensity as f32)?)
    }

    /// Drops every override and restores the learned environment.
    pub fn reset(&mut self) {
        self.overrides.clear();
        self.env = self.learned_env.clone();
    }

    /// Checks that `op` would apply, without changing the session.
    pub fn validate(&self, op: &EditOp) -> EditResult<()> {
        match op {
            EditOp::Edit(req) => self.check_edit(req).map(drop),
            EditOp::Relight { lighting, intensity } => self.lighting(lighting, *intensity).map(drop),
            EditOp::Reset => Ok(()),
        }
    }

    /// Applies `op`; a failing op leaves the session unchanged.
    pub fn apply(&mut self, op: &EditOp) -> EditResult<()> {
        match op {
            EditOp::Edit(req) => self.apply_edit(req),
            EditOp::Relight { lighting, intensity } => {
                let env = self.lighting(lighting, *intensity)?;
                self.relight(env);
                Ok(())
            }
            EditOp::Reset => {
                self.reset();
                Ok(())
            }
        }
    }

    fn pixel_attributes(&self, view: usize, g: &GBuffer, c: &ViewCache, mode: RenderMode) -> Vec<BrdfAttributes<f32>> {
        c.pixels
            .iter()
            .zip(&c.assign)
            .zip(&c.continuous)
            .map(|((&i, &u), cont)| match mode {
                RenderMode::Continuous => *cont,
                RenderMode::Discrete => self.table[u],
                RenderMode::Edited => match self.overrides.get(&u) {
                    Some(o) if o.bbox.is_none_or(|b| b.contains(view, i % g.width, i / g.width)) => o.attrs,
                    _ => *cont,
                },
            })
            .collect()
    }

    /// Linear RGB render of a stored view under the active environment.
    pub fn render(&self, view: usize, mode: RenderMode) -> EditResult<Vec<f32>> {
        let g = &self.view(view)?.gbuffer;
        let c = self.cached(view)?;
        let attrs = self.pixel_attributes(view, g, c, mode);
        Ok(render_pixels(g, &c.pixels, &attrs, &self.env)?)
    }

    /// Ray-casts the scene geometry from a new camera and renders it.
    /// Bounding-box overrides apply to stored views only.
    pub fn render_camera(&self, camera: &Camera, width: usize, height: usize, mode: RenderMode) -> EditResult<Vec<f32>> {
        let (g, _) = self.bundle.spec.gbuffer(camera, width, height)?;
        let c = ViewCache::new(&self.model, &g, self.m)?;
        let attrs = self.pixel_attributes(usize::MAX, &g, &c, mode);
        Ok(render_pixels(&g, &c.pixels, &attrs, &self.env)?)
    }
}

#[cfg(test)]
mod tests;
