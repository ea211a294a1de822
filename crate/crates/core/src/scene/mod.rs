//! Procedural desk-scale scenes with known materials, ray-cast G-buffers,
//! oracle renders and the on-disk bundle format.

mod bundle;

pub use bundle::{read_bundle, write_bundle, Manifest, ViewEntry};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::brdf::{dot3, normalize3, render_point, BrdfAttributes, EnvironmentMap, ShadePoint};
use crate::error::{Error, Result};
use crate::vq::BACKGROUND;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, material: u16 },
    /// Axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3], material: u16 },
    /// Square patch of the plane `z = height`, facing `+z`.
    Floor { height: f64, half_extent: f64, material: u16 },
}

impl Primitive {
    pub fn material(&self) -> u16 {
        match *self {
            Primitive::Sphere { material, .. } | Primitive::Cuboid { material, .. } | Primitive::Floor { material, .. } => material,
        }
    }

    /// Nearest hit `(t, normal)` with `t > 1e-9` along `o + t d`.
    fn intersect(&self, o: &[f64; 3], d: &[f64; 3]) -> Option<(f64, [f64; 3])> {
        const T_MIN: f64 = 1e-9;
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = sub(o, &center);
                let b = dot3(&oc, d);
                let c = dot3(&oc, &oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > T_MIN { -b - s } else { -b + s };
                if t <= T_MIN {
                    return None;
                }
                let p = along(o, d, t);
                Some((t, normalize3(sub(&p, &center))))
            }
            Primitive::Floor { height, half_extent, .. } => {
                if d[2].abs() < 1e-12 {
                    return None;
                }
                let t = (height - o[2]) / d[2];
                if t <= T_MIN {
                    return None;
                }
                let p = along(o, d, t);
                (p[0].abs() <= half_extent && p[1].abs() <= half_extent).then_some((t, [0.0, 0.0, 1.0]))
            }
            Primitive::Cuboid { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis0, mut axis1) = (0, 0);
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis0 = a;
                    }
                    if tb < t1 {
                        t1 = tb;
                        axis1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, a) = if t0 > T_MIN { (t0, axis0) } else { (t1, axis1) };
                if t <= T_MIN {
                    return None;
                }
                let p = along(o, d, t);
                let mut n = [0.0; 3];
                let mid = 0.5 * (min[a] + max[a]);
                n[a] = if p[a] > mid { 1.0 } else { -1.0 };
                Some((t, n))
            }
        }
    }

    fn contains(&self, p: &[f64; 3]) -> bool {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let v = sub(p, &center);
                dot3(&v, &v) < radius * radius
            }
            Primitive::Cuboid { min, max, .. } => (0..3).all(|a| p[a] > min[a] && p[a] < max[a]),
            Primitive::Floor { .. } => false,
        }
    }
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn along(o: &[f64; 3], d: &[f64; 3], t: f64) -> [f64; 3] {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Pinhole camera with `+z` up.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub fov_deg: f64,
}

impl Camera {
    /// Unit ray direction through the center of pixel `(x, y)`.
    pub fn ray(&self, x: usize, y: usize, width: usize, height: usize) -> [f64; 3] {
        let fwd = normalize3(sub(&self.target, &self.eye));
        let right = normalize3(cross(&fwd, &[0.0, 0.0, 1.0]));
        let up = cross(&right, &fwd);
        let tan = (self.fov_deg.to_radians() * 0.5).tan();
        let aspect = width as f64 / height as f64;
        let u = (2.0 * (x as f64 + 0.5) / width as f64 - 1.0) * tan * aspect;
        let v = (1.0 - 2.0 * (y as f64 + 0.5) / height as f64) * tan;
        normalize3([
            fwd[0] + u * right[0] + v * up[0],
            fwd[1] + u * right[1] + v * up[1],
            fwd[2] + u * right[2] + v * up[2],
        ])
    }
}

/// Cameras evenly spaced on a horizontal circle, all looking at `target`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraRing {
    pub views: usize,
    pub radius: f64,
    pub height: f64,
    pub target: [f64; 3],
    pub fov_deg: f64,
    pub width: usize,
    pub image_height: usize,
}

impl CameraRing {
    /// The seed rotates the whole ring by up to half a view spacing.
    pub fn cameras(&self, seed: u64) -> Vec<Camera> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = 2.0 * std::f64::consts::PI / self.views as f64;
        let phase = rng.gen_range(-0.5..0.5) * step;
        (0..self.views)
            .map(|i| {
                let a = phase + step * i as f64;
                Camera {
                    eye: [self.radius * a.cos(), self.radius * a.sin(), self.height],
                    target: self.target,
                    fov_deg: self.fov_deg,
                }
            })
            .collect()
    }
}

/// Named analytic environments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvPreset {
    /// Warm key lobe, cool fill lobe, soft sky gradient.
    TwoLobe,
    /// Low orange sun from the opposite side plus a dim blue sky; used as
    /// held-out lighting.
    Dusk,
    /// Constant white radiance.
    Uniform,
}

impl EnvPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "two-lobe" => Ok(EnvPreset::TwoLobe),
            "dusk" => Ok(EnvPreset::Dusk),
            "uniform" => Ok(EnvPreset::Uniform),
            _ => Err(Error::invalid("environment preset", format!("unknown `{name}`; expected two-lobe, dusk or uniform"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvPreset::TwoLobe => "two-lobe",
            EnvPreset::Dusk => "dusk",
            EnvPreset::Uniform => "uniform",
        }
    }

    pub fn radiance(self, d: [f64; 3]) -> [f64; 3] {
        let lobe = |axis: [f64; 3], sharp: f64| {
            let a = normalize3(axis);
            (sharp * (dot3(&a, &d) - 1.0)).exp()
        };
        let sky = 0.5 + 0.5 * d[2];
        match self {
            EnvPreset::TwoLobe => {
                let key = lobe([0.6, 0.3, 0.75], 6.0);
                let fill = lobe([-0.7, -0.4, 0.4], 4.0);
                [
                    0.25 + 0.15 * sky + 1.6 * key + 0.25 * fill,
                    0.25 + 0.17 * sky + 1.4 * key + 0.35 * fill,
                    0.25 + 0.22 * sky + 1.1 * key + 0.55 * fill,
                ]
            }
            EnvPreset::Dusk => {
                let sun = lobe([-0.5, 0.7, 0.25], 5.0);
                [0.12 + 0.1 * sky + 1.8 * sun, 0.14 + 0.14 * sky + 1.0 * sun, 0.2 + 0.3 * sky + 0.4 * sun]
            }
            EnvPreset::Uniform => [1.0; 3],
        }
    }

    /// Sampled at texel centers and rounded to `f32`.
    pub fn build(self, rows: usize, cols: usize) -> Result<EnvironmentMap<f32>> {
        EnvironmentMap::from_fn(rows, cols, |d| self.radiance(d))
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub materials: Vec<BrdfAttributes<f64>>,
    pub material_names: Vec<String>,
    pub env: EnvPreset,
    pub env_rows: usize,
    pub env_cols: usize,
    pub cameras: CameraRing,
    pub seed: u64,
}

impl SceneSpec {
    /// Three spheres on a floor. The floor and one sphere share the rough
    /// red material; the others are rough gold metal and glossy white.
    pub fn balls3() -> Self {
        let m = |k_d, k_m, k_r| BrdfAttributes::new(k_d, k_m, k_r).expect("preset attributes");
        SceneSpec {
            name: "balls3".into(),
            primitives: vec![
                Primitive::Floor {
                    height: 0.0,
                    half_extent: 1.6,
                    material: 0,
                },
                Primitive::Sphere {
                    center: [-0.65, -0.35, 0.42],
                    radius: 0.42,
                    material: 0,
                },
                Primitive::Sphere {
                    center: [0.6, -0.3, 0.45],
                    radius: 0.45,
                    material: 1,
                },
                Primitive::Sphere {
                    center: [0.0, 0.62, 0.4],
                    radius: 0.4,
                    material: 2,
                },
            ],
            materials: vec![m([0.75, 0.12, 0.1], 0.05, 0.9), m([0.95, 0.72, 0.3], 0.9, 0.3), m([0.9, 0.9, 0.88], 0.5, 0.15)],
            material_names: vec!["diffuse red".into(), "metallic gold".into(), "glossy white".into()],
            env: EnvPreset::TwoLobe,
            env_rows: 16,
            env_cols: 32,
            cameras: CameraRing {
                views: 16,
                radius: 3.2,
                height: 2.0,
                target: [0.0, 0.0, 0.25],
                fov_deg: 42.0,
                width: 64,
                image_height: 64,
            },
            seed: 0,
        }
    }

    /// A rough diffuse floor and one glossy sphere.
    pub fn duo() -> Self {
        let m = |k_d, k_m, k_r| BrdfAttributes::new(k_d, k_m, k_r).expect("preset attributes");
        SceneSpec {
            name: "duo".into(),
            primitives: vec![
                Primitive::Floor {
                    height: 0.0,
                    half_extent: 1.4,
                    material: 0,
                },
                Primitive::Sphere {
                    center: [0.0, 0.0, 0.6],
                    radius: 0.6,
                    material: 1,
                },
            ],
            materials: vec![m([0.3, 0.55, 0.8], 0.0, 0.95), m([0.85, 0.8, 0.75], 0.7, 0.25)],
            material_names: vec!["rough blue".into(), "glossy metal".into()],
            ..Self::balls3()
        }
    }

    /// One sphere and its floor, both of one material.
    pub fn single() -> Self {
        let m = BrdfAttributes::new([0.6, 0.45, 0.3], 0.2, 0.6).expect("preset attributes");
        SceneSpec {
            name: "single".into(),
            primitives: vec![
                Primitive::Floor {
                    height: 0.0,
                    half_extent: 1.2,
                    material: 0,
                },
                Primitive::Sphere {
                    center: [0.0, 0.0, 0.5],
                    radius: 0.5,
                    material: 0,
                },
            ],
            materials: vec![m],
            material_names: vec!["clay".into()],
            ..Self::balls3()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "balls3" => Ok(Self::balls3()),
            "duo" => Ok(Self::duo()),
            "single" => Ok(Self::single()),
            _ => Err(Error::invalid("scene preset", format!("unknown `{name}`; expected balls3, duo or single"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.materials.is_empty() {
            return Err(Error::invalid("scene", "at least one material is required"));
        }
        if self.materials.len() >= BACKGROUND as usize {
            return Err(Error::invalid("scene", "too many materials"));
        }
        if let Some(p) = self.primitives.iter().find(|p| p.material() as usize >= self.materials.len()) {
            return Err(Error::invalid("scene", format!("primitive uses unknown material {}", p.material())));
        }
        let c = &self.cameras;
        if c.views == 0 || c.width == 0 || c.image_height == 0 || !(c.fov_deg > 0.0 && c.fov_deg < 180.0) {
            return Err(Error::invalid("scene", "camera ring needs views, a resolution and a fov in (0, 180)"));
        }
        Ok(())
    }

    /// First surface hit along a ray: `(point, normal, material)`.
    pub fn cast(&self, o: &[f64; 3], d: &[f64; 3]) -> Option<([f64; 3], [f64; 3], u16)> {
        let mut best: Option<(f64, [f64; 3], u16)> = None;
        for p in &self.primitives {
            if let Some((t, n)) = p.intersect(o, d) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, n, p.material()));
                }
            }
        }
        best.map(|(t, n, m)| (along(o, d, t), n, m))
    }

    /// Ray-casts one camera into a G-buffer and label map.
    pub fn gbuffer(&self, cam: &Camera, width: usize, height: usize) -> Result<(GBuffer, Vec<u16>)> {
        if let Some(p) = self.primitives.iter().find(|p| p.contains(&cam.eye)) {
            return Err(Error::invalid("camera", format!("eye {:?} lies inside {:?}", cam.eye, p)));
        }
        let mut g = GBuffer::empty(width, height);
        let mut labels = vec![BACKGROUND; width * height];
        for y in 0..height {
            for x in 0..width {
                let d = cam.ray(x, y, width, height);
                if let Some((p, n, m)) = self.cast(&cam.eye, &d) {
                    let i = y * width + x;
                    // The G-buffer is stored in f32; round before anything
                    // is shaded from it.
                    g.points[i] = p.map(|v| v as f32);
                    g.normals[i] = n.map(|v| v as f32);
                    g.views[i] = d.map(|v| -v as f32);
                    g.mask[i] = true;
                    labels[i] = m;
                }
            }
        }
        Ok((g, labels))
    }
}

/// Per-pixel geometry of one view. Background pixels hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f32; 3]>,
    pub normals: Vec<[f32; 3]>,
    /// Unit directions from the surface toward the camera.
    pub views: Vec<[f32; 3]>,
    pub mask: Vec<bool>,
}

impl GBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        GBuffer {
            width,
            height,
            points: vec![[0.0; 3]; n],
            normals: vec![[0.0; 3]; n],
            views: vec![[0.0; 3]; n],
            mask: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Indices of foreground pixels in scan order.
    pub fn foreground(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn shade_point(&self, i: usize) -> ShadePoint<f64> {
        ShadePoint {
            p: self.points[i].map(f64::from),
            normal: self.normals[i].map(f64::from),
            view: self.views[i].map(f64::from),
        }
    }
}

/// One rendered view of a bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub gbuffer: GBuffer,
    /// Linear RGB, row-major, three values per pixel.
    pub image: Vec<f32>,
    pub labels: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub env: EnvironmentMap<f32>,
    pub views: Vec<View>,
}

impl SceneBundle {
    pub fn width(&self) -> usize {
        self.spec.cameras.width
    }

    pub fn height(&self) -> usize {
        self.spec.cameras.image_height
    }

    pub fn true_attributes(&self, label: u16) -> Option<&BrdfAttributes<f64>> {
        self.spec.materials.get(label as usize)
    }
}

/// Shades every foreground pixel of `gbuffer` with per-label attributes.
pub fn shade_gbuffer(gbuffer: &GBuffer, labels: &[u16], materials: &[BrdfAttributes<f64>], env: &EnvironmentMap<f64>) -> Vec<f32> {
    let mut img = vec![0.0f32; gbuffer.len() * 3];
    for i in gbuffer.foreground() {
        let c = render_point(&materials[labels[i] as usize], &gbuffer.shade_point(i), env);
        for k in 0..3 {
            img[3 * i + k] = c[k] as f32;
        }
    }
    img
}

/// Ray-casts and shades every camera of the spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let env = spec.env.build(spec.env_rows, spec.env_cols)?;
    let env64 = env.cast::<f64>();
    let (w, h) = (spec.cameras.width, spec.cameras.image_height);
    let views = spec
        .cameras
        .cameras(spec.seed)
        .into_iter()
        .map(|camera| {
            let (gbuffer, labels) = spec.gbuffer(&camera, w, h)?;
            let image = shade_gbuffer(&gbuffer, &labels, &spec.materials, &env64);
            Ok(View {
                camera,
                gbuffer,
                image,
                labels,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SceneBundle {
        spec: spec.clone(),
        env,
        views,
    })
}
