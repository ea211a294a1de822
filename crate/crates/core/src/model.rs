//! Trained model state and its checkpoint file.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::brdf::{BrdfAttributes, EnvironmentMap, Quadrature};
use crate::error::{Error, Result};
use crate::field::{Branch, Field, FieldConfig};
use crate::scalar::Scalar;
use crate::scene::SceneBundle;
use crate::vq::Codebook;

const MAGIC: &[u8; 4] = b"VQNF";
const VERSION: u32 = 1;
/// Latents are computed in chunks of this many points outside training.
const CHUNK: usize = 4096;
pub const ENV_PARAM: &str = "env.log_radiance";

/// Affine map from scene coordinates to the unit cube.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoordNorm {
    pub center: [f64; 3],
    pub scale: f64,
}

impl CoordNorm {
    /// Uniform scaling of the foreground bounding box of every view into
    /// `[-1, 1]^3`.
    pub fn from_bundle(bundle: &SceneBundle) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &bundle.views {
            for i in v.gbuffer.foreground() {
                for k in 0..3 {
                    let x = v.gbuffer.points[i][k] as f64;
                    lo[k] = lo[k].min(x);
                    hi[k] = hi[k].max(x);
                }
            }
        }
        if lo[0] > hi[0] {
            return Err(Error::invalid("scene bundle", "no foreground pixels"));
        }
        let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max);
        Ok(CoordNorm {
            center,
            scale: if half > 0.0 { half } else { 1.0 },
        })
    }

    pub fn apply<T: Scalar>(&self, p: &[f32; 3]) -> [T; 3] {
        [0, 1, 2].map(|k| T::lit((p[k] as f64 - self.center[k]) / self.scale))
    }
}

/// Encoder, both decoders, learnable environment and codebook.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub field: Field,
    pub params: ParamStore<T>,
    /// Log radiance `[texels, 3]`; radiance is its exponential.
    pub env: ParamId,
    pub env_rows: usize,
    pub env_cols: usize,
    pub quad: Arc<Quadrature<T>>,
    pub codebook: Codebook<T>,
    pub norm: CoordNorm,
}

/// Codebook and environment settings for a fresh model.
#[derive(Clone, Copy, Debug)]
pub struct ModelInit {
    pub field: FieldConfig,
    pub m0: usize,
    pub ema_decay: f64,
    pub ema_smoothing: f64,
    pub env_rows: usize,
    pub env_cols: usize,
    pub env_radiance: f64,
    pub seed: u64,
}

impl<T: Scalar> Model<T> {
    pub fn init(init: &ModelInit, norm: CoordNorm) -> Result<Self> {
        if init.env_rows == 0 || init.env_cols == 0 || !(init.env_radiance > 0.0) {
            return Err(Error::invalid("environment", "needs positive size and radiance"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut params = ParamStore::new();
        let field = Field::init(init.field, &mut params, &mut rng)?;
        let texels = init.env_rows * init.env_cols;
        let env = params.add(ENV_PARAM, Tensor::full(texels, 3, T::lit(init.env_radiance.ln())));
        let codebook = Codebook::random(init.m0, init.field.latent_dim, init.ema_decay, init.ema_smoothing, &mut rng)?;
        Ok(Model {
            field,
            params,
            env,
            env_rows: init.env_rows,
            env_cols: init.env_cols,
            quad: Arc::new(Quadrature::lat_long(init.env_rows, init.env_cols)),
            codebook,
            norm,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            field: self.field.clone(),
            params: self.params.cast(),
            env: self.env,
            env_rows: self.env_rows,
            env_cols: self.env_cols,
            quad: Arc::new(Quadrature::lat_long(self.env_rows, self.env_cols)),
            codebook: self.codebook.cast(),
            norm: self.norm,
        }
    }

    /// The learned environment, `exp` of the log-radiance parameter.
    pub fn environment(&self) -> Result<EnvironmentMap<T>> {
        let rad = self.params.get(self.env).data().iter().map(|x| x.exp()).collect();
        EnvironmentMap::new(self.env_rows, self.env_cols, rad)
    }

    pub fn normalized(&self, points: &[[f32; 3]]) -> Vec<[T; 3]> {
        points.iter().map(|p| self.norm.apply(p)).collect()
    }

    /// Unit latents for scene-space points.
    pub fn latents(&self, points: &[[f32; 3]]) -> Result<Tensor<T>> {
        let dim = self.field.cfg.latent_dim;
        let mut data = Vec::with_capacity(points.len() * dim);
        for chunk in points.chunks(CHUNK) {
            let z = self.field.latents(&self.params, &self.normalized(chunk))?;
            data.extend_from_slice(z.data());
        }
        Ok(Tensor::new(points.len(), dim, data)?)
    }

    pub fn attributes(&self, branch: Branch, z: &Tensor<T>) -> Result<Vec<BrdfAttributes<T>>> {
        let mut out = Vec::with_capacity(z.rows());
        for start in (0..z.rows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(z.rows());
            let chunk = Tensor::new(end - start, z.cols(), z.data()[start * z.cols()..end * z.cols()].to_vec())?;
            out.extend(self.field.attributes(&self.params, branch, &chunk)?);
        }
        Ok(out)
    }

    /// Discrete-branch attributes of every codeword. Each pixel quantized to
    /// codeword `i` receives entry `i` of this table.
    pub fn codeword_attributes(&self) -> Result<Vec<BrdfAttributes<T>>> {
        self.field.attributes(&self.params, Branch::Discrete, self.codebook.codewords())
    }

    fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let c = &self.field.cfg;
        let cb = &self.codebook;
        let m0 = cb.len();
        let mut out: Vec<(String, Tensor<f32>)> = self.params.iter().map(|(_, n, t)| (n.to_string(), t.cast())).collect();
        let meta = |vals: &[f64]| Tensor::new(1, vals.len(), vals.iter().map(|&v| v as f32).collect()).unwrap();
        out.push(("codebook.codewords".into(), cb.codewords().cast()));
        out.push(("codebook.ema_size".into(), Tensor::new(1, m0, cb.ema_size().iter().map(|x| x.as_f64() as f32).collect()).unwrap()));
        out.push(("codebook.ema_sum".into(), cb.ema_sum().cast()));
        out.push(("meta.codebook".into(), meta(&[cb.decay, cb.smoothing])));
        out.push((
            "meta.field".into(),
            meta(&[c.pe_freqs, c.enc_width, c.enc_layers, c.enc_skip, c.latent_dim, c.dec_width].map(|x| x as f64)),
        ));
        out.push(("meta.env".into(), meta(&[self.env_rows as f64, self.env_cols as f64])));
        let n = &self.norm;
        out.push(("meta.norm".into(), meta(&[n.center[0], n.center[1], n.center[2], n.scale])));
        out
    }

    /// Checkpoint bytes: magic, version, tensor count, then per tensor a
    /// name (u32 length + UTF-8), rows, cols and little-endian f32 data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Hex SHA-256 of the checkpoint bytes.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let tensors = parse(bytes, path)?;
        let malformed = |detail: String| Error::Malformed {
            path: path.to_path_buf(),
            detail,
        };
        let mut params = ParamStore::<T>::new();
        let mut meta = std::collections::HashMap::new();
        for (name, t) in tensors {
            if name.starts_with("meta.") || name.starts_with("codebook.") {
                meta.insert(name, t);
            } else {
                params.add(name, t.cast());
            }
        }
        let mut take = |name: &str| meta.remove(name).ok_or_else(|| malformed(format!("missing tensor `{name}`")));
        let f = take("meta.field")?;
        let f: Vec<usize> = f.data().iter().map(|&x| x as usize).collect();
        if f.len() != 6 {
            return Err(malformed("meta.field needs 6 entries".into()));
        }
        let cfg = FieldConfig {
            pe_freqs: f[0],
            enc_width: f[1],
            enc_layers: f[2],
            enc_skip: f[3],
            latent_dim: f[4],
            dec_width: f[5],
        };
        let field = Field::find(cfg, &params)?;
        let env_meta = take("meta.env")?;
        let norm = take("meta.norm")?;
        let cb_meta = take("meta.codebook")?;
        if env_meta.len() != 2 || norm.len() != 4 || cb_meta.len() != 2 {
            return Err(malformed("bad metadata length".into()));
        }
        let (env_rows, env_cols) = (env_meta.data()[0] as usize, env_meta.data()[1] as usize);
        let env = params.find(ENV_PARAM).ok_or_else(|| malformed(format!("missing tensor `{ENV_PARAM}`")))?;
        if params.get(env).shape() != [env_rows * env_cols, 3] {
            return Err(malformed("environment shape disagrees with meta.env".into()));
        }
        let n = norm.data();
        let norm = CoordNorm {
            center: [n[0] as f64, n[1] as f64, n[2] as f64],
            scale: n[3] as f64,
        };
        let codewords = take("codebook.codewords")?;
        let size = take("codebook.ema_size")?;
        let sum = take("codebook.ema_sum")?;
        let codebook = Codebook::from_parts(
            codewords.cast(),
            size.data().iter().map(|&x| T::lit(x as f64)).collect(),
            sum.cast(),
            cb_meta.data()[0] as f64,
            cb_meta.data()[1] as f64,
        )?;
        if codebook.dim() != cfg.latent_dim {
            return Err(malformed("codeword dimension disagrees with the latent size".into()));
        }
        Ok(Model {
            field,
            params,
            env,
            env_rows,
            env_cols,
            quad: Arc::new(Quadrature::lat_long(env_rows, env_cols)),
            codebook,
            norm,
        })
    }
}

fn parse(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut pos = 0;
    let mut take = |n: usize, section: &str| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                section: section.to_string(),
            });
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    if take(4, "header")? != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "VQNF",
        });
    }
    let version = u32_at(take(4, "header")?);
    if version != VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = u32_at(take(4, "header")?) as usize;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let len = u32_at(take(4, &format!("tensor {k} name"))?) as usize;
        let name = String::from_utf8(take(len, &format!("tensor {k} name"))?.to_vec()).map_err(|_| Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("tensor {k} name is not UTF-8"),
        })?;
        let rows = u32_at(take(4, &format!("tensor `{name}` shape"))?) as usize;
        let cols = u32_at(take(4, &format!("tensor `{name}` shape"))?) as usize;
        let raw = take(4 * rows * cols, &format!("tensor `{name}` data"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(rows, cols, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(out)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
