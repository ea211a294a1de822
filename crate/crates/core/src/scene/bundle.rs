use std::path::{Path, PathBuf};

use crate::brdf::EnvironmentMap;
use crate::error::{Error, Result};
use crate::scene::{Camera, GBuffer, SceneBundle, SceneSpec, View};

const VERSION: u32 = 1;
const FORMAT: &str = "vqnerf-bundle";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewEntry {
    pub id: usize,
    pub camera: Camera,
    pub image: String,
    pub gbuffer: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub width: usize,
    pub height: usize,
    /// Number of ground-truth materials.
    pub materials: usize,
    pub env: String,
    pub spec: SceneSpec,
    pub views: Vec<ViewEntry>,
}

fn header(magic: &[u8; 4], w: usize, h: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out
}

fn push_f32s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sequential reader that names the section being read when data runs out.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                section: section.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &'static str, w: usize, h: usize) -> Result<()> {
        let m = self.take(4, "header")?;
        if m != magic.as_bytes() {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected: magic,
            });
        }
        let version = self.u32("header")?;
        if version != VERSION {
            return Err(Error::BadVersion {
                path: self.path.to_path_buf(),
                version,
            });
        }
        let (fw, fh) = (self.u32("header")? as usize, self.u32("header")? as usize);
        if (fw, fh) != (w, h) {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                detail: format!("dimensions {fw}x{fh}, manifest says {w}x{h}"),
            });
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize, section: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, section)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn vec3s(&mut self, n: usize, section: &str) -> Result<Vec<[f32; 3]>> {
        Ok(self.f32s(3 * n, section)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, `env.envm` and three binary files per view.
pub fn write_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (bundle.width(), bundle.height());
    let mut entries = Vec::with_capacity(bundle.views.len());
    for (id, v) in bundle.views.iter().enumerate() {
        let entry = ViewEntry {
            id,
            camera: v.camera,
            image: format!("view_{id:04}.img"),
            gbuffer: format!("view_{id:04}.gbuf"),
            labels: format!("view_{id:04}.lbl"),
        };
        let mut img = header(b"VIMG", w, h);
        push_f32s(&mut img, &v.image);
        write(&dir.join(&entry.image), &img)?;

        let g = &v.gbuffer;
        let mut gb = header(b"GBUF", w, h);
        push_f32s(&mut gb, g.points.iter().flatten());
        push_f32s(&mut gb, g.normals.iter().flatten());
        push_f32s(&mut gb, g.views.iter().flatten());
        gb.extend(g.mask.iter().map(|&m| m as u8));
        write(&dir.join(&entry.gbuffer), &gb)?;

        let mut lb = header(b"VLBL", w, h);
        for l in &v.labels {
            lb.extend_from_slice(&l.to_le_bytes());
        }
        write(&dir.join(&entry.labels), &lb)?;
        entries.push(entry);
    }
    bundle.env.save(&dir.join("env.envm"))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        width: w,
        height: h,
        materials: bundle.spec.materials.len(),
        env: "env.envm".into(),
        spec: bundle.spec.clone(),
        views: entries,
    };
    write(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = serde_json::from_slice(&read(&path)?).map_err(|e| Error::Malformed {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if m.format != FORMAT {
        return Err(Error::BadMagic {
            path,
            expected: FORMAT,
        });
    }
    if m.version != VERSION {
        return Err(Error::BadVersion { path, version: m.version });
    }
    Ok(m)
}

pub fn read_bundle(dir: &Path) -> Result<SceneBundle> {
    let m = read_manifest(dir)?;
    let (w, h) = (m.width, m.height);
    let n = w * h;
    let mut views = Vec::with_capacity(m.views.len());
    for e in &m.views {
        let path: PathBuf = dir.join(&e.image);
        let bytes = read(&path)?;
        let mut r = Reader { bytes: &bytes, pos: 0, path: &path };
        r.header("VIMG", w, h)?;
        let image = r.f32s(3 * n, "pixels")?;
        r.finish()?;

        let path = dir.join(&e.gbuffer);
        let bytes = read(&path)?;
        let mut r = Reader { bytes: &bytes, pos: 0, path: &path };
        r.header("GBUF", w, h)?;
        let points = r.vec3s(n, "points")?;
        let normals = r.vec3s(n, "normals")?;
        let dirs = r.vec3s(n, "view directions")?;
        let mask = r.take(n, "mask")?.iter().map(|&b| b != 0).collect();
        r.finish()?;

        let path = dir.join(&e.labels);
        let bytes = read(&path)?;
        let mut r = Reader { bytes: &bytes, pos: 0, path: &path };
        r.header("VLBL", w, h)?;
        let labels = r
            .take(2 * n, "labels")?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        r.finish()?;

        views.push(View {
            camera: e.camera,
            gbuffer: GBuffer {
                width: w,
                height: h,
                points,
                normals,
                views: dirs,
                mask,
            },
            image,
            labels,
        });
    }
    let env = EnvironmentMap::load(&dir.join(&m.env))?;
    Ok(SceneBundle { spec: m.spec, env, views })
}
