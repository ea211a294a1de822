//! Positional encoding, the latent encoder `z = f_e(p)` and the two
//! attribute decoders.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FieldConfig {
    /// Frequency bands of the positional encoding.
    pub pe_freqs: usize,
    pub enc_width: usize,
    /// Fully-connected layers in the encoder, output layer included.
    pub enc_layers: usize,
    /// The encoded input is concatenated to the output of this layer.
    pub enc_skip: usize,
    pub latent_dim: usize,
    pub dec_width: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            pe_freqs: 6,
            enc_width: 128,
            enc_layers: 7,
            enc_skip: 3,
            latent_dim: 64,
            dec_width: 64,
        }
    }
}

impl FieldConfig {
    pub fn pe_dim(&self) -> usize {
        3 + 6 * self.pe_freqs
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_layers < 2 || self.enc_skip == 0 || self.enc_skip >= self.enc_layers {
            return Err(Error::invalid("field config", "encoder skip must fall between the first and last layer"));
        }
        if self.enc_width == 0 || self.latent_dim == 0 || self.dec_width == 0 {
            return Err(Error::invalid("field config", "widths must be positive"));
        }
        Ok(())
    }
}

/// `[p, sin(2^k pi p), cos(2^k pi p)]` for `k < freqs`.
pub fn positional_encoding<T: Scalar>(p: &[T; 3], freqs: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(3 + 6 * freqs);
    out.extend_from_slice(p);
    let mut scale = T::PI();
    for _ in 0..freqs {
        out.extend(p.iter().map(|&x| (x * scale).sin()));
        out.extend(p.iter().map(|&x| (x * scale).cos()));
        scale = scale + scale;
    }
    out
}

/// Encodes a batch of points into a `[B, 3 + 6 freqs]` tensor.
pub fn encode_positions<T: Scalar>(points: &[[T; 3]], freqs: usize) -> Tensor<T> {
    let dim = 3 + 6 * freqs;
    let data = points.iter().flat_map(|p| positional_encoding(p, freqs)).collect();
    Tensor::new(points.len(), dim, data).expect("encoding width")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        // Kaiming-uniform for ReLU inputs; biases start at zero.
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
        let w = store.add(format!("{name}.w"), Tensor::new(fan_in, fan_out, data).expect("weight shape"));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Linear { w, b }
    }

    fn find<T: Scalar>(store: &ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let get = |suffix: &str, shape: [usize; 2]| {
            let full = format!("{name}.{suffix}");
            let id = store
                .find(&full)
                .ok_or_else(|| Error::invalid("parameters", format!("missing `{full}`")))?;
            if store.get(id).shape() != shape {
                return Err(Error::invalid(
                    "parameters",
                    format!("`{full}` has shape {:?}, expected {shape:?}", store.get(id).shape()),
                ));
            }
            Ok(id)
        };
        Ok(Linear {
            w: get("w", [fan_in, fan_out])?,
            b: get("b", [1, fan_out])?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

/// Which decoder to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Continuous,
    Discrete,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Continuous => "dec_c",
            Branch::Discrete => "dec_d",
        }
    }
}

/// Three-layer MLP with the input concatenated to the second hidden
/// output and a sigmoid head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeMlp {
    layers: [Linear; 3],
}

impl AttributeMlp {
    fn shapes(cfg: &FieldConfig, channels: usize) -> [(usize, usize); 3] {
        let (z, w) = (cfg.latent_dim, cfg.dec_width);
        [(z, w), (w, w), (w + z, channels)]
    }

    fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &FieldConfig, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = Self::shapes(cfg, channels);
        AttributeMlp {
            layers: std::array::from_fn(|i| Linear::init(store, &format!("{name}.l{i}"), s[i].0, s[i].1, rng)),
        }
    }

    fn find<T: Scalar>(store: &ParamStore<T>, cfg: &FieldConfig, name: &str, channels: usize) -> Result<Self> {
        let s = Self::shapes(cfg, channels);
        Ok(AttributeMlp {
            layers: [
                Linear::find(store, &format!("{name}.l0"), s[0].0, s[0].1)?,
                Linear::find(store, &format!("{name}.l1"), s[1].0, s[1].1)?,
                Linear::find(store, &format!("{name}.l2"), s[2].0, s[2].1)?,
            ],
        })
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var, AutodiffError> {
        let h = self.layers[0].apply(g, store, z)?;
        let h = g.relu(h)?;
        let h = self.layers[1].apply(g, store, h)?;
        let h = g.relu(h)?;
        let h = g.concat_cols(h, z)?;
        let h = self.layers[2].apply(g, store, h)?;
        g.sigmoid(h)
    }

    fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.w, l.b])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoder {
    pub basecolor: AttributeMlp,
    pub metallic: AttributeMlp,
    pub roughness: AttributeMlp,
}

/// Decoded attribute nodes: `k_d [B,3]`, `k_m [B,1]`, `k_r [B,1]`.
#[derive(Clone, Copy, Debug)]
pub struct DecodedVars {
    pub k_d: Var,
    pub k_m: Var,
    pub k_r: Var,
}

impl DecodedVars {
    /// Diffuse `k_d - k_d k_m` and specular `k_d k_m` nodes.
    pub fn split<T: Scalar>(&self, g: &mut Graph<T>) -> Result<(Var, Var), AutodiffError> {
        let k_s = g.mul_col(self.k_d, self.k_m)?;
        let k_alpha = g.sub(self.k_d, k_s)?;
        Ok((k_alpha, k_s))
    }
}

impl Decoder {
    fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &FieldConfig, branch: Branch, rng: &mut ChaCha8Rng) -> Self {
        let p = branch.prefix();
        Decoder {
            basecolor: AttributeMlp::init(store, cfg, &format!("{p}.basecolor"), 3, rng),
            metallic: AttributeMlp::init(store, cfg, &format!("{p}.metallic"), 1, rng),
            roughness: AttributeMlp::init(store, cfg, &format!("{p}.roughness"), 1, rng),
        }
    }

    fn find<T: Scalar>(store: &ParamStore<T>, cfg: &FieldConfig, branch: Branch) -> Result<Self> {
        let p = branch.prefix();
        Ok(Decoder {
            basecolor: AttributeMlp::find(store, cfg, &format!("{p}.basecolor"), 3)?,
            metallic: AttributeMlp::find(store, cfg, &format!("{p}.metallic"), 1)?,
            roughness: AttributeMlp::find(store, cfg, &format!("{p}.roughness"), 1)?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<DecodedVars, AutodiffError> {
        Ok(DecodedVars {
            k_d: self.basecolor.apply(g, store, z)?,
            k_m: self.metallic.apply(g, store, z)?,
            k_r: self.roughness.apply(g, store, z)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.basecolor
            .params()
            .chain(self.metallic.params())
            .chain(self.roughness.params())
            .collect()
    }
}

/// Parameter layout of the encoder and both decoders inside a
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Field {
    pub cfg: FieldConfig,
    pub encoder: Vec<Linear>,
    pub continuous: Decoder,
    pub discrete: Decoder,
}

impl Field {
    fn encoder_shapes(cfg: &FieldConfig) -> Vec<(usize, usize)> {
        (0..cfg.enc_layers)
            .map(|i| {
                let fan_in = match i {
                    0 => cfg.pe_dim(),
                    _ if i == cfg.enc_skip => cfg.enc_width + cfg.pe_dim(),
                    _ => cfg.enc_width,
                };
                let fan_out = if i + 1 == cfg.enc_layers { cfg.latent_dim } else { cfg.enc_width };
                (fan_in, fan_out)
            })
            .collect()
    }

    /// Adds freshly initialized parameters to `store`.
    pub fn init<T: Scalar>(cfg: FieldConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Self::encoder_shapes(&cfg)
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| Linear::init(store, &format!("enc.l{i}"), a, b, rng))
            .collect();
        let continuous = Decoder::init(store, &cfg, Branch::Continuous, rng);
        let discrete = Decoder::init(store, &cfg, Branch::Discrete, rng);
        Ok(Field {
            cfg,
            encoder,
            continuous,
            discrete,
        })
    }

    /// Locates an existing layout by parameter name, checking shapes.
    pub fn find<T: Scalar>(cfg: FieldConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let encoder = Self::encoder_shapes(&cfg)
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| Linear::find(store, &format!("enc.l{i}"), a, b))
            .collect::<Result<_>>()?;
        Ok(Field {
            cfg,
            encoder,
            continuous: Decoder::find(store, &cfg, Branch::Continuous)?,
            discrete: Decoder::find(store, &cfg, Branch::Discrete)?,
        })
    }

    pub fn decoder(&self, branch: Branch) -> &Decoder {
        match branch {
            Branch::Continuous => &self.continuous,
            Branch::Discrete => &self.discrete,
        }
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Unit-norm latent `z` for encoded positions `pe` (`[B, pe_dim]`).
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pe: Var) -> Result<Var, AutodiffError> {
        let last = self.encoder.len() - 1;
        let mut h = pe;
        for (i, layer) in self.encoder.iter().enumerate() {
            if i == self.cfg.enc_skip {
                h = g.concat_cols(h, pe)?;
            }
            h = layer.apply(g, store, h)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        g.normalize_rows(h)
    }

    /// Latents for a batch of points, outside any training graph.
    pub fn latents<T: Scalar>(&self, store: &ParamStore<T>, points: &[[T; 3]]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pe = g.constant(encode_positions(points, self.cfg.pe_freqs));
        let z = self.encode(&mut g, store, pe)?;
        Ok(g.value(z).clone())
    }

    /// Decoded `(k_d, k_m, k_r)` rows for latents `z` (`[B, latent_dim]`).
    pub fn attributes<T: Scalar>(&self, store: &ParamStore<T>, branch: Branch, z: &Tensor<T>) -> Result<Vec<crate::brdf::BrdfAttributes<T>>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let d = self.decoder(branch).apply(&mut g, store, zv)?;
        let (kd, km, kr) = (g.value(d.k_d), g.value(d.k_m), g.value(d.k_r));
        Ok((0..z.rows())
            .map(|i| crate::brdf::BrdfAttributes {
                k_d: [kd.row(i)[0], kd.row(i)[1], kd.row(i)[2]],
                k_m: km.row(i)[0],
                k_r: kr.row(i)[0],
            })
            .collect())
    }
}
