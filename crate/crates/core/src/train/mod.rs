//! Joint two-branch optimization and the separate-training ablation.

mod loss;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use loss::{
    chroma, chroma_rows, lambertian, lambertian_weight, smooth, smooth_weight, squared_error, weighted_sum, LossTerms,
    LossWeights,
};

use crate::autodiff::{Adam, AdamConfig, AutodiffError, Graph, ParamId, Tensor, Var};
use crate::brdf::{chromaticity, ShadeGeometry, ShadeOp};
use crate::error::{Error, Result};
use crate::field::{encode_positions, Branch, FieldConfig};
use crate::model::{CoordNorm, Model, ModelInit};
use crate::scalar::Scalar;
use crate::scene::{SceneBundle, View};
use crate::vq::{straight_through, vq_loss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Both branches share every step.
    Joint,
    /// Continuous branch for the first half of the steps, then the discrete
    /// branch on frozen latents.
    Separate,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "separate" => Ok(TrainMode::Separate),
            _ => Err(Error::invalid("mode", format!("unknown `{s}`; expected joint or separate"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub w6: f64,
    /// Commitment weight inside the quantization loss.
    pub lambda: f64,
    /// Smooth-loss chromaticity scale.
    pub alpha: f64,
    /// Smooth-loss chromaticity threshold.
    pub beta: f64,
    /// Ranking flatness tolerance.
    pub eps: f64,
    pub m0: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule.
    pub lr_min: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub ema_decay: f64,
    pub ema_smoothing: f64,
    /// Initial radiance of every environment texel.
    pub env_init: f64,
    /// Ranked codeword dropout; off trains an unordered codebook.
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w1: 0.2,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            w5: 0.001,
            w6: 0.05,
            lambda: 0.1,
            alpha: 60.0,
            beta: 0.1,
            eps: 0.002,
            m0: 8,
            steps: 20_000,
            batch: 1024,
            lr: 1e-3,
            lr_min: 1e-4,
            seed: 0,
            mode: TrainMode::Joint,
            ema_decay: 0.99,
            ema_smoothing: 1e-5,
            env_init: 0.5,
            dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("w1", self.w1),
            ("w2", self.w2),
            ("w3", self.w3),
            ("w4", self.w4),
            ("w5", self.w5),
            ("w6", self.w6),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("training config", format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("training config", format!("eps must be > 0, got {}", self.eps)));
        }
        if self.m0 == 0 || self.m0 > u16::MAX as usize {
            return Err(Error::invalid("training config", format!("m0 must be in 1..65535, got {}", self.m0)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("training config", "batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return Err(Error::invalid("training config", format!("need 0 < lr_min <= lr, got {} and {}", self.lr_min, self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.ema_smoothing > 0.0) {
            return Err(Error::invalid("training config", "ema_decay must be in [0,1) and ema_smoothing > 0"));
        }
        if !(self.env_init > 0.0 && self.env_init.is_finite()) {
            return Err(Error::invalid("training config", "env_init must be positive"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w1: self.w1,
            w2: self.w2,
            w3: self.w3,
            w4: self.w4,
            w5: self.w5,
            w6: self.w6,
        }
    }

    /// Cosine decay from `lr` to `lr_min` over `total` steps.
    pub fn learning_rate(&self, step: usize, total: usize) -> f64 {
        let t = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

/// Which parts of the model a step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Joint,
    /// Encoder, continuous decoder and environment only.
    Continuous,
    /// Discrete decoder and codebook on frozen latents.
    Discrete,
}

/// Sampled pixels with their neighbor pairs. Points are in normalized
/// coordinates.
#[derive(Clone, Debug)]
pub struct TrainBatch<T: Scalar> {
    pub points: Vec<[T; 3]>,
    pub normals: Vec<[T; 3]>,
    pub views: Vec<[T; 3]>,
    /// Ground-truth colors `[B, 3]`.
    pub colors: Tensor<T>,
    /// Batch row of each pair's first pixel.
    pub pair_anchor: Vec<usize>,
    /// Position of each pair's second pixel.
    pub pair_points: Vec<[T; 3]>,
    /// Smooth-loss weight of each pair.
    pub pair_weights: Vec<T>,
}

/// One requested sample: view, pixel index, and the neighbor direction to
/// pair it with (`Some(true)` right, `Some(false)` down).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pick {
    pub view: usize,
    pub pixel: usize,
    pub neighbor: Option<bool>,
}

/// Foreground pixels of every view, ready for sampling.
#[derive(Clone, Debug)]
pub struct PixelPool {
    views: Vec<View>,
    samples: Vec<(u32, u32)>,
    norm: CoordNorm,
    alpha: f64,
    beta: f64,
}

impl PixelPool {
    pub fn new(bundle: &SceneBundle, norm: CoordNorm, alpha: f64, beta: f64) -> Result<Self> {
        let mut samples = Vec::new();
        for (v, view) in bundle.views.iter().enumerate() {
            samples.extend(view.gbuffer.foreground().into_iter().map(|i| (v as u32, i as u32)));
        }
        if samples.is_empty() {
            return Err(Error::invalid("scene bundle", "no foreground pixels"));
        }
        Ok(PixelPool {
            views: bundle.views.clone(),
            samples,
            norm,
            alpha,
            beta,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `n` uniform foreground pixels, each offered a right or down neighbor.
    pub fn sample_picks(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Pick> {
        (0..n)
            .map(|_| {
                let (view, pixel) = self.samples[rng.gen_range(0..self.samples.len())];
                Pick {
                    view: view as usize,
                    pixel: pixel as usize,
                    neighbor: Some(rng.gen()),
                }
            })
            .collect()
    }

    fn color(view: &View, i: usize) -> [f32; 3] {
        [view.image[3 * i], view.image[3 * i + 1], view.image[3 * i + 2]]
    }

    fn chroma(c: [f32; 3]) -> [f64; 3] {
        chromaticity(&c.map(f64::from)).unwrap_or([1.0 / 3.0; 3])
    }

    /// Builds a batch; a pair is kept only when the neighbor exists and is
    /// foreground.
    pub fn batch<T: Scalar>(&self, picks: &[Pick]) -> Result<TrainBatch<T>> {
        let mut b = TrainBatch {
            points: Vec::with_capacity(picks.len()),
            normals: Vec::with_capacity(picks.len()),
            views: Vec::with_capacity(picks.len()),
            colors: Tensor::zeros(picks.len(), 3),
            pair_anchor: Vec::new(),
            pair_points: Vec::new(),
            pair_weights: Vec::new(),
        };
        for (r, p) in picks.iter().enumerate() {
            let view = self.views.get(p.view).ok_or_else(|| Error::invalid("pick", format!("no view {}", p.view)))?;
            let gb = &view.gbuffer;
            if p.pixel >= gb.len() || !gb.mask[p.pixel] {
                return Err(Error::invalid("pick", format!("pixel {} of view {} is not foreground", p.pixel, p.view)));
            }
            let i = p.pixel;
            b.points.push(self.norm.apply(&gb.points[i]));
            b.normals.push(gb.normals[i].map(|x| T::lit(x as f64)));
            b.views.push(gb.views[i].map(|x| T::lit(x as f64)));
            let c = Self::color(view, i);
            b.colors.row_mut(r).copy_from_slice(&c.map(|x| T::lit(x as f64)));
            let (x, y) = (i % gb.width, i / gb.width);
            let j = match p.neighbor {
                Some(true) if x + 1 < gb.width => Some(i + 1),
                Some(false) if y + 1 < gb.height => Some(i + gb.width),
                _ => None,
            };
            if let Some(j) = j.filter(|&j| gb.mask[j]) {
                let w = smooth_weight(&Self::chroma(c), &Self::chroma(Self::color(view, j)), self.alpha, self.beta);
                b.pair_anchor.push(r);
                b.pair_points.push(self.norm.apply(&gb.points[j]));
                b.pair_weights.push(T::lit(w));
            }
        }
        Ok(b)
    }
}

/// Graph handles of one step.
pub struct StepGraph {
    pub total: Var,
    pub rec_c: Option<Var>,
    pub rec_d: Option<Var>,
    pub chr: Option<Var>,
    /// Codebook plus `lambda` times commitment.
    pub vq: Option<Var>,
    pub lam: Option<Var>,
    pub sm: Option<Var>,
    /// Latents of the batch rows.
    pub z: Var,
    /// Codeword of each batch row (empty in the continuous phase).
    pub assign: Vec<usize>,
}

impl StepGraph {
    pub fn terms<T: Scalar>(&self, g: &Graph<T>) -> LossTerms {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item().as_f64());
        LossTerms {
            rec_c: v(self.rec_c),
            rec_d: v(self.rec_d),
            chr: v(self.chr),
            vq: v(self.vq),
            lam: v(self.lam),
            sm: v(self.sm),
        }
    }
}

/// Records the full objective of one step on `g`. `keep` is the dropout
/// mask applied during quantization.
pub fn build_step<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    batch: &TrainBatch<T>,
    keep: Option<&[bool]>,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<StepGraph> {
    let freqs = model.field.cfg.pe_freqs;
    let store = &model.params;
    let z = if phase == Phase::Discrete {
        g.constant(model.field.latents(store, &batch.points)?)
    } else {
        let pe = g.constant(encode_positions(&batch.points, freqs));
        model.field.encode(g, store, pe)?
    };
    let geom = Arc::new(ShadeGeometry::new(&batch.normals, &batch.views, &model.quad));
    let gt = g.constant(batch.colors.clone());
    let mut out = StepGraph {
        total: z,
        rec_c: None,
        rec_d: None,
        chr: None,
        vq: None,
        lam: None,
        sm: None,
        z,
        assign: Vec::new(),
    };
    let theta = g.param(store, model.env);
    let radiance = if phase == Phase::Discrete {
        let frozen = g.stop_gradient(theta)?;
        g.exp(frozen)?
    } else {
        g.exp(theta)?
    };

    if phase != Phase::Discrete {
        let d = model.field.decoder(Branch::Continuous).apply(g, store, z)?;
        let (ka, ks) = d.split(g)?;
        let c = g.custom(Arc::new(ShadeOp::with_geometry(geom.clone())), &[ka, ks, d.k_r, radiance])?;
        out.rec_c = Some(squared_error(g, c, gt)?);
        out.lam = Some(lambertian(g, ks, d.k_r)?);
    }

    if phase != Phase::Continuous {
        let m0 = model.codebook.len();
        out.assign = model.codebook.quantize(g.value(z), keep, m0)?;
        let e_u = g.constant(model.codebook.gather(&out.assign));
        let z_vq = straight_through(g, z, e_u)?;
        let d = model.field.decoder(Branch::Discrete).apply(g, store, z_vq)?;
        let (ka, ks) = d.split(g)?;
        let c = g.custom(Arc::new(ShadeOp::with_geometry(geom)), &[ka, ks, d.k_r, radiance])?;
        out.rec_d = Some(squared_error(g, c, gt)?);
        let chr_pred = chroma(g, c)?;
        let chr_gt = g.constant(chroma_rows(&batch.colors));
        out.chr = Some(squared_error(g, chr_pred, chr_gt)?);
        let vq = vq_loss(g, z, e_u)?;
        let commit = g.scale(vq.commitment, T::lit(cfg.lambda))?;
        out.vq = Some(g.add(vq.codebook, commit)?);

        if !batch.pair_anchor.is_empty() {
            let z_n = if phase == Phase::Discrete {
                g.constant(model.field.latents(store, &batch.pair_points)?)
            } else {
                let pe = g.constant(encode_positions(&batch.pair_points, freqs));
                model.field.encode(g, store, pe)?
            };
            let assign_n = model.codebook.quantize(g.value(z_n), keep, m0)?;
            let e_n = g.constant(model.codebook.gather(&assign_n));
            let zvq_n = straight_through(g, z_n, e_n)?;
            let zvq_i = g.gather_rows(z_vq, &batch.pair_anchor)?;
            out.sm = Some(smooth(g, zvq_i, zvq_n, &batch.pair_weights)?);
        }
    }

    out.total = weighted_sum(
        g,
        &[
            (cfg.w1, out.rec_c),
            (cfg.w2, out.rec_d),
            (cfg.w3, out.chr),
            (cfg.w4, out.vq),
            (cfg.w5, out.lam),
            (cfg.w6, out.sm),
        ],
    )?;
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_rec_c")]
    pub rec_c: f64,
    #[serde(rename = "L_rec_d")]
    pub rec_d: f64,
    #[serde(rename = "L_chr")]
    pub chr: f64,
    #[serde(rename = "L_vq")]
    pub vq: f64,
    #[serde(rename = "L_lam")]
    pub lam: f64,
    #[serde(rename = "L_sm")]
    pub sm: f64,
    #[serde(rename = "L_all")]
    pub all: f64,
    pub codeword_usage_histogram: Vec<usize>,
    pub lr: f64,
}

fn diverged(step: usize, e: AutodiffError) -> Error {
    match e {
        AutodiffError::NonFinite { op, .. } => Error::Diverged {
            step,
            term: format!("value in `{op}`"),
        },
        AutodiffError::NonFiniteGradient { name } => Error::Diverged {
            step,
            term: format!("gradient of `{name}`"),
        },
        other => other.into(),
    }
}

/// Owns the model and optimizer state across steps.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pool: PixelPool,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(bundle: &SceneBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let norm = CoordNorm::from_bundle(bundle)?;
        let init = ModelInit {
            field: FieldConfig::default(),
            m0: cfg.m0,
            ema_decay: cfg.ema_decay,
            ema_smoothing: cfg.ema_smoothing,
            env_rows: bundle.env.rows(),
            env_cols: bundle.env.cols(),
            env_radiance: cfg.env_init,
            seed: cfg.seed,
        };
        let model = Model::init(&init, norm)?;
        let pool = PixelPool::new(bundle, norm, cfg.alpha, cfg.beta)?;
        // Offset so sampling does not reuse the initialization stream.
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
        Ok(Trainer {
            cfg,
            model,
            pool,
            adam: Adam::new(AdamConfig::default()),
            rng,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// Phase, step within the phase, and phase length.
    fn phase(&self) -> (Phase, usize, usize) {
        let n = self.cfg.steps;
        match self.cfg.mode {
            TrainMode::Joint => (Phase::Joint, self.step, n),
            TrainMode::Separate => {
                let first = n / 2;
                if self.step < first {
                    (Phase::Continuous, self.step, first)
                } else {
                    (Phase::Discrete, self.step - first, n - first)
                }
            }
        }
    }

    fn frozen(&self, phase: Phase) -> Vec<ParamId> {
        let f = &self.model.field;
        match phase {
            Phase::Joint => Vec::new(),
            Phase::Continuous => f.discrete.params(),
            Phase::Discrete => {
                let mut v = f.encoder_params();
                v.extend(f.continuous.params());
                v.push(self.model.env);
                v
            }
        }
    }

    /// Runs one optimization step. On error the model is left as it was
    /// after the last finite step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let (phase, local, len) = self.phase();
        if phase == Phase::Discrete && local == 0 {
            self.adam = Adam::new(AdamConfig::default());
        }
        let lr = self.cfg.learning_rate(local, len);
        let picks = self.pool.sample_picks(self.cfg.batch, &mut self.rng);
        let batch = self.pool.batch::<f32>(&picks)?;
        let keep = (self.cfg.dropout && phase != Phase::Continuous).then(|| self.model.codebook.sample_dropout(&mut self.rng));

        let step = self.step;
        let mut g = Graph::new();
        let sg = build_step(&mut g, &self.model, &batch, keep.as_deref(), &self.cfg, phase).map_err(|e| match e {
            Error::Autodiff(a) => diverged(step, a),
            other => other,
        })?;
        let terms = sg.terms(&g);
        if let Some(term) = terms.non_finite() {
            return Err(Error::Diverged {
                step,
                term: term.to_string(),
            });
        }
        let grads = g.backward(sg.total).map_err(|e| diverged(step, e))?;
        let frozen = self.frozen(phase);
        for (id, t) in grads.params() {
            if !frozen.contains(&id) && !t.is_finite() {
                return Err(diverged(
                    step,
                    AutodiffError::NonFiniteGradient {
                        name: self.model.params.name(id).to_string(),
                    },
                ));
            }
        }
        self.adam.step(&mut self.model.params, &grads, lr, &frozen).map_err(|e| diverged(step, e))?;

        let mut hist = vec![0; self.model.codebook.len()];
        if phase != Phase::Continuous {
            hist = self.model.codebook.ema_update(g.value(sg.z), &sg.assign)?;
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            rec_c: terms.rec_c,
            rec_d: terms.rec_d,
            chr: terms.chr,
            vq: terms.vq,
            lam: terms.lam,
            sm: terms.sm,
            all: terms.total(&self.cfg.weights()),
            codeword_usage_histogram: hist,
            lr,
        })
    }

    /// Steps until the configured count, reporting each record.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let rec = self.step()?;
            on_step(&rec)?;
        }
        Ok(())
    }
}

/// Trains a fresh model on `bundle`.
pub fn train(bundle: &SceneBundle, cfg: TrainConfig, on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<Model<f32>> {
    let mut t = Trainer::new(bundle, cfg)?;
    t.run(on_step)?;
    Ok(t.model)
}

#[cfg(test)]
mod tests;
