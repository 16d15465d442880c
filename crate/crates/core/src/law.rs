//! Learnable adaptive loss weighting for mask-conditioned denoising.
//!
//! The pipeline turns a conditioning mask and the student's noise prediction
//! into a per-pixel weight map: a fixed ratio prior balancing lesion vs
//! background coverage, modulated by a learned delta map, then mean-normalized
//! and clamped for stability. The weighted student loss is combined with a
//! teacher loss, a distillation term, and a Dice regularizer that ties the
//! delta map to the mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::optim::{Adam, AdamConfig};
use crate::param::ParamStore;
use crate::rng::{normal_vec, substream};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// Cumulative signal-retention sequence for the forward diffusion process.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule; alpha_bar is the running product of (1 - beta).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArg("schedule needs at least one step".into()));
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::InvalidArg("empty schedule".into()));
        }
        let mut prev = 1.0f64;
        for (i, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidArg(format!("alpha_bar[{i}] = {a} outside (0,1]")));
            }
            if a > prev + 1e-12 {
                return Err(Error::InvalidArg(format!("alpha_bar increases at step {i}")));
            }
            prev = a;
        }
        Ok(Self { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArg(format!("timestep {t} outside [0, {})", self.alpha_bar.len())))
    }

    pub fn default_desk() -> Self {
        Self::linear(100, 1e-4, 2e-2).expect("valid defaults")
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LawToggles {
    pub use_ratio: bool,
    pub use_delta: bool,
    pub use_norm: bool,
    pub use_min_clamp: bool,
    pub use_max_clamp: bool,
    pub use_dice: bool,
}

impl Default for LawToggles {
    fn default() -> Self {
        Self {
            use_ratio: true,
            use_delta: true,
            use_norm: true,
            use_min_clamp: true,
            use_max_clamp: true,
            use_dice: true,
        }
    }
}

impl LawToggles {
    pub fn all_off() -> Self {
        Self {
            use_ratio: false,
            use_delta: false,
            use_norm: false,
            use_min_clamp: false,
            use_max_clamp: false,
            use_dice: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LawConfig {
    pub gamma: f64,
    pub tau: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub lambda_dice: f64,
    pub beta_t: f64,
    pub beta_d: f64,
    pub eps_s: f64,
    pub toggles: LawToggles,
    /// Let the student loss backpropagate into the weight map (and hence
    /// into the delta network). Off by default: weights act as constants.
    pub grad_through_weights: bool,
    /// Normalize weights over the whole batch instead of per sample.
    pub per_batch_norm: bool,
}

impl Default for LawConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            tau: 3.0,
            w_min: 1e-3,
            w_max: 2.0,
            lambda_dice: 1.0,
            beta_t: 0.05,
            beta_d: 0.05,
            eps_s: 1e-6,
            toggles: LawToggles::default(),
            grad_through_weights: false,
            per_batch_norm: false,
        }
    }
}

impl LawConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArg(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidArg(format!("tau {} must be positive", self.tau)));
        }
        if !(self.w_min > 0.0 && self.w_min <= self.w_max) {
            return Err(Error::InvalidArg(format!(
                "weight bounds ({}, {}) must satisfy 0 < min <= max",
                self.w_min, self.w_max
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

/// 3-layer conv network producing a 1-channel logit map from the
/// channel-concatenated (student prediction, mask).
pub struct DeltaNet {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl DeltaNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, hidden: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), 2, hidden, 3, 1, 1),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), hidden, hidden, 3, 1, 1),
            // near-zero head so the delta map starts flat at 0.5
            conv3: Conv2d::new_small(store, rng, &format!("{name}.conv3"), hidden, 1, 3, 1, 1, 1e-3),
        }
    }

    /// Raw logits, same spatial shape as the mask.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f_t: VarId, m: VarId) -> Result<VarId> {
        let (_, _, fh, fw) = tape.value(f_t).dims4()?;
        let (_, _, mh, mw) = tape.value(m).dims4()?;
        if (fh, fw) != (mh, mw) {
            return Err(Error::ShapeMismatch(format!(
                "delta net: features {fh}x{fw} vs mask {mh}x{mw}"
            )));
        }
        let x = tape.concat_channels(&[f_t, m])?;
        let h1 = self.conv1.forward(tape, store, x)?;
        let h1 = tape.relu(h1)?;
        let h2 = self.conv2.forward(tape, store, h1)?;
        let h2 = tape.relu(h2)?;
        self.conv3.forward(tape, store, h2)
    }
}

/// Small conditional denoiser: (z_t, timestep channel, mask) -> noise estimate.
pub struct SurrogateDenoiser {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl SurrogateDenoiser {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, hidden: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), 3, hidden, 3, 1, 1),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), hidden, hidden, 3, 1, 1),
            conv3: Conv2d::new(store, rng, &format!("{name}.conv3"), hidden, 1, 3, 1, 1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z_t: VarId, temb: VarId, m: VarId) -> Result<VarId> {
        let x = tape.concat_channels(&[z_t, temb, m])?;
        let h1 = self.conv1.forward(tape, store, x)?;
        let h1 = tape.relu(h1)?;
        let h2 = self.conv2.forward(tape, store, h1)?;
        let h2 = tape.relu(h2)?;
        self.conv3.forward(tape, store, h2)
    }
}

pub struct LawModels {
    pub student: SurrogateDenoiser,
    pub teacher: SurrogateDenoiser,
    pub phi: DeltaNet,
}

impl LawModels {
    pub fn new(store: &mut ParamStore, seed: u64, student_hidden: usize, phi_hidden: usize) -> Self {
        let mut rng = substream(seed, "init");
        Self {
            student: SurrogateDenoiser::new(store, &mut rng, "student", student_hidden),
            // teacher gets twice the student's hidden width
            teacher: SurrogateDenoiser::new(store, &mut rng, "teacher", student_hidden * 2),
            phi: DeltaNet::new(store, &mut rng, "phi", phi_hidden),
        }
    }
}

// ---------------------------------------------------------------------------
// Pipeline operations
// ---------------------------------------------------------------------------

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_diffuse(
    tape: &mut Tape,
    z0: VarId,
    t: usize,
    eps: VarId,
    sched: &NoiseSchedule,
) -> Result<VarId> {
    let ab = sched.alpha_bar(t)?;
    if tape.value(z0).shape() != tape.value(eps).shape() {
        return Err(Error::ShapeMismatch(format!(
            "forward_diffuse: z0 {:?} vs eps {:?}",
            tape.value(z0).shape(),
            tape.value(eps).shape()
        )));
    }
    let signal = tape.mul_scalar(z0, ab.sqrt())?;
    let noise = tape.mul_scalar(eps, (1.0 - ab).sqrt())?;
    tape.add(signal, noise)
}

/// Ratio-based weight prior: w = m (1 - r) + (1 - m) r with r the lesion-area
/// ratio per sample. Degenerate masks (r = 0 or 1) fall back to uniform 1.
pub fn ratio_prior(m: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = m.dims4()?;
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("ratio_prior: mask must have 1 channel, got {c}")));
    }
    if m.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArg("ratio_prior: mask values outside [0,1]".into()));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    for ni in 0..n {
        let md = &m.data()[ni * hw..(ni + 1) * hw];
        let r = md.iter().sum::<f64>() / hw as f64;
        let slot = &mut out[ni * hw..(ni + 1) * hw];
        if r == 0.0 || r == 1.0 {
            slot.fill(1.0);
        } else {
            for (o, &mv) in slot.iter_mut().zip(md) {
                *o = mv * (1.0 - r) + (1.0 - mv) * r;
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// delta = sigmoid(phi(f_t, m) / tau), values strictly in (0,1).
pub fn delta_map(
    tape: &mut Tape,
    store: &ParamStore,
    phi: &DeltaNet,
    f_t: VarId,
    m: VarId,
    tau: f64,
) -> Result<VarId> {
    let logits = phi.forward(tape, store, f_t, m)?;
    let scaled = tape.mul_scalar(logits, 1.0 / tau)?;
    tape.sigmoid(scaled)
}

/// mu = 1 + gamma (2 delta - 1), confined to [1 - gamma, 1 + gamma].
pub fn modulate(tape: &mut Tape, delta: VarId, gamma: f64) -> Result<VarId> {
    let two = tape.mul_scalar(delta, 2.0 * gamma)?;
    tape.add_scalar(two, 1.0 - gamma)
}

#[derive(Debug)]
pub struct FinalWeights {
    pub w_final: VarId,
    /// Normalized-but-unclamped map (equal to `w_final` when clamps are off).
    pub pre_clamp: VarId,
}

/// w_adapt = w_ratio * mu, mean-normalized then clamped to [w_min, w_max].
/// Toggles skip individual stages for ablations.
pub fn finalize_weights(
    tape: &mut Tape,
    w_ratio: VarId,
    mu: VarId,
    cfg: &LawConfig,
) -> Result<FinalWeights> {
    cfg.validate()?;
    let w_adapt = tape.mul(w_ratio, mu)?;
    let normalized = if cfg.toggles.use_norm {
        let shape = tape.value(w_adapt).shape().to_vec();
        let (work, undo): (VarId, Option<Vec<usize>>) = if cfg.per_batch_norm {
            let numel = tape.value(w_adapt).numel();
            (tape.reshape(w_adapt, vec![1, numel])?, Some(shape))
        } else {
            (w_adapt, None)
        };
        let means = tape.mean_per_item(work)?;
        if tape.value(means).data().iter().any(|&m| m <= 0.0) {
            return Err(Error::DegenerateWeights(
                "adaptive weight map has non-positive mean".into(),
            ));
        }
        let divided = tape.div_by_item(work, means)?;
        match undo {
            Some(shape) => tape.reshape(divided, shape)?,
            None => divided,
        }
    } else {
        w_adapt
    };
    let lo = if cfg.toggles.use_min_clamp { cfg.w_min } else { f64::NEG_INFINITY };
    let hi = if cfg.toggles.use_max_clamp { cfg.w_max } else { f64::INFINITY };
    let w_final = if lo.is_finite() || hi.is_finite() {
        tape.clamp(normalized, lo, hi)?
    } else {
        normalized
    };
    Ok(FinalWeights { w_final, pre_clamp: normalized })
}

/// mean over all elements of w * (pred - target)^2, w broadcast over channels.
pub fn weighted_mse(tape: &mut Tape, pred: VarId, target: VarId, w: VarId) -> Result<VarId> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul_broadcast_channel(sq, w)?;
    tape.mean_all(weighted)
}

/// 1 - (2 sum(delta m) + eps) / (sum(delta) + sum(m) + eps).
pub fn dice_regularizer(tape: &mut Tape, delta: VarId, m: VarId, eps_s: f64) -> Result<VarId> {
    if tape.value(delta).shape() != tape.value(m).shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice: {:?} vs {:?}",
            tape.value(delta).shape(),
            tape.value(m).shape()
        )));
    }
    let inter = tape.mul(delta, m)?;
    let inter_sum = tape.sum_all(inter)?;
    let num = tape.mul_scalar(inter_sum, 2.0)?;
    let num = tape.add_scalar(num, eps_s)?;
    let ds = tape.sum_all(delta)?;
    let ms = tape.sum_all(m)?;
    let den = tape.add(ds, ms)?;
    let den = tape.add_scalar(den, eps_s)?;
    let frac = tape.div(num, den)?;
    let neg = tape.mul_scalar(frac, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_s: f64,
    pub l_t: f64,
    pub l_dist: f64,
    pub l_dice: f64,
    pub total: f64,
}

pub struct LawLossOutput {
    pub total: VarId,
    pub components: LossComponents,
    pub w_final: Tensor,
    pub delta: Option<Tensor>,
}

/// One batch of the full training objective:
/// L_S + beta_T L_T + beta_D L_{S<-T} + lambda_dice L_dice.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    models: &LawModels,
    z0: &Tensor,
    mask: &Tensor,
    t: usize,
    eps: &Tensor,
    cfg: &LawConfig,
    sched: &NoiseSchedule,
) -> Result<LawLossOutput> {
    cfg.validate()?;
    let z0v = tape.constant(z0.clone())?;
    let epsv = tape.constant(eps.clone())?;
    let maskv = tape.constant(mask.clone())?;
    let z_t = forward_diffuse(tape, z0v, t, epsv, sched)?;
    let temb = tape.constant(timestep_embedding(t, sched.len(), z0.shape())?)?;

    let student_pred = models.student.forward(tape, store, z_t, temb, maskv)?;
    let teacher_pred = models.teacher.forward(tape, store, z_t, temb, maskv)?;

    // Weight map.
    let w_ratio_t = if cfg.toggles.use_ratio {
        ratio_prior(mask)?
    } else {
        Tensor::full(mask.shape(), 1.0)
    };
    let w_ratio = tape.constant(w_ratio_t)?;
    let (delta, mu) = if cfg.toggles.use_delta {
        let f_t = tape.detach(student_pred)?;
        let d = delta_map(tape, store, &models.phi, f_t, maskv, cfg.tau)?;
        let mu = modulate(tape, d, cfg.gamma)?;
        (Some(d), mu)
    } else {
        let ones = tape.constant(Tensor::full(mask.shape(), 1.0))?;
        (None, ones)
    };
    let weights = finalize_weights(tape, w_ratio, mu, cfg)?;
    let w_used = if cfg.grad_through_weights {
        weights.w_final
    } else {
        tape.detach(weights.w_final)?
    };

    let l_s = weighted_mse(tape, student_pred, epsv, w_used)?;
    let teacher_diff = tape.sub(teacher_pred, epsv)?;
    let teacher_sq = tape.mul(teacher_diff, teacher_diff)?;
    let l_t = tape.mean_all(teacher_sq)?;
    let teacher_target = tape.detach(teacher_pred)?;
    let l_dist = weighted_mse(tape, student_pred, teacher_target, w_used)?;

    let mut total = l_s;
    let bt = tape.mul_scalar(l_t, cfg.beta_t)?;
    total = tape.add(total, bt)?;
    let bd = tape.mul_scalar(l_dist, cfg.beta_d)?;
    total = tape.add(total, bd)?;
    let l_dice = match (&delta, cfg.toggles.use_dice) {
        (Some(d), true) => {
            let ld = dice_regularizer(tape, *d, maskv, cfg.eps_s)?;
            let scaled = tape.mul_scalar(ld, cfg.lambda_dice)?;
            total = tape.add(total, scaled)?;
            Some(ld)
        }
        _ => None,
    };

    let components = LossComponents {
        l_s: tape.value(l_s).item()?,
        l_t: tape.value(l_t).item()?,
        l_dist: tape.value(l_dist).item()?,
        l_dice: l_dice.map(|d| tape.value(d).item().unwrap()).unwrap_or(0.0),
        total: tape.value(total).item()?,
    };
    Ok(LawLossOutput {
        total,
        components,
        w_final: tape.value(weights.w_final).clone(),
        delta: delta.map(|d| tape.value(d).clone()),
    })
}

/// One broadcast channel encoding the timestep sinusoidally.
pub fn timestep_embedding(t: usize, steps: usize, latent_shape: &[usize]) -> Result<Tensor> {
    let frac = if steps <= 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
    let value = (std::f64::consts::FRAC_PI_2 * frac).sin();
    Ok(Tensor::full(latent_shape, value))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LawTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub student_hidden: usize,
    pub phi_hidden: usize,
    /// Number of evenly spaced delta-map snapshots (first and last included).
    pub snapshot_count: usize,
}

impl Default for LawTrainConfig {
    fn default() -> Self {
        Self { steps: 200, batch_size: 4, lr: 1e-3, student_hidden: 8, phi_hidden: 32, snapshot_count: 3 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WeightStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl WeightStats {
    fn of(t: &Tensor) -> Self {
        let d = t.data();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        Self { min, max, mean }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LawStepRecord {
    pub step: usize,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    #[serde(rename = "L_T")]
    pub l_t: f64,
    #[serde(rename = "L_dist")]
    pub l_dist: f64,
    #[serde(rename = "L_dice")]
    pub l_dice: f64,
    pub total: f64,
    pub w_stats: WeightStats,
}

#[derive(Clone, Debug)]
pub struct DeltaSnapshot {
    pub step: usize,
    /// Delta maps for the probe batch, [N,1,H,W].
    pub delta: Tensor,
    /// Conditioning masks of the probe batch.
    pub masks: Tensor,
    /// Dice between the thresholded delta map and the mask.
    pub alignment_dice: f64,
}

pub struct LawRunResult {
    pub store: ParamStore,
    pub models: LawModels,
    pub log: Vec<LawStepRecord>,
    pub snapshots: Vec<DeltaSnapshot>,
    /// Set when training hit a non-finite loss; the log holds the prefix.
    pub diverged: Option<String>,
}

fn stack_batch(samples: &[&SamplePair]) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = samples[0].image.dims3()?;
    let n = samples.len();
    let mut z0 = Vec::with_capacity(n * c * h * w);
    let mut m = Vec::with_capacity(n * h * w);
    for s in samples {
        // images in [0,1] become zero-centered latents in [-1,1]
        z0.extend(s.image.data().iter().map(|v| 2.0 * v - 1.0));
        m.extend_from_slice(s.mask.data());
    }
    Ok((Tensor::new(vec![n, c, h, w], z0)?, Tensor::new(vec![n, 1, h, w], m)?))
}

fn snapshot_steps(total: usize, count: usize) -> Vec<usize> {
    if total == 0 || count == 0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![0];
    }
    let last = total - 1;
    let mut steps: Vec<usize> = (0..count).map(|i| i * last / (count - 1)).collect();
    steps.dedup();
    steps
}

/// Dice between the delta map thresholded at 0.5 and the binary mask.
pub fn delta_alignment_dice(delta: &Tensor, mask: &Tensor) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&d, &m) in delta.data().iter().zip(mask.data()) {
        let p = if d > 0.5 { 1.0 } else { 0.0 };
        inter += p * m;
        psum += p;
        gsum += m;
    }
    if psum + gsum == 0.0 {
        1.0
    } else {
        2.0 * inter / (psum + gsum)
    }
}

/// Train student/teacher/delta networks with the configured loss pipeline.
/// Deterministic given (seed, configs); divergence stops the loop and is
/// reported in the result instead of discarding the log.
pub fn train_law(
    dataset: &[SamplePair],
    cfg: &LawConfig,
    train: &LawTrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<LawRunResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArg("train_law: empty dataset".into()));
    }
    let mut store = ParamStore::new();
    let models = LawModels::new(&mut store, seed, train.student_hidden, train.phi_hidden);
    let mut adam = Adam::new(AdamConfig { lr: train.lr, ..Default::default() }, &store);
    let mut data_rng = substream(seed, "law/batches");
    let mut noise_rng = substream(seed, "law/noise");

    let snaps = snapshot_steps(train.steps, train.snapshot_count);
    let mut log = Vec::with_capacity(train.steps);
    let mut snapshots = Vec::new();
    let mut diverged = None;

    // Fixed probe batch for comparable delta-map snapshots across steps.
    let probe_n = train.batch_size.min(dataset.len());
    let probe: Vec<&SamplePair> = dataset.iter().take(probe_n).collect();
    let (probe_z0, probe_m) = stack_batch(&probe)?;
    let probe_t = sched.len() / 2;
    let mut probe_rng = substream(seed, "law/probe");
    let probe_eps = Tensor::new(probe_z0.shape().to_vec(), normal_vec(&mut probe_rng, probe_z0.numel()))?;

    for step in 0..train.steps {
        if snaps.contains(&step) {
            snapshots.push(take_snapshot(step, &store, &models, &probe_z0, &probe_m, probe_t, &probe_eps, cfg, sched)?);
        }
        let batch: Vec<&SamplePair> = (0..train.batch_size)
            .map(|_| &dataset[data_rng.gen_range(0..dataset.len())])
            .collect();
        let (z0, mask) = stack_batch(&batch)?;
        let t = noise_rng.gen_range(0..sched.len());
        let eps = Tensor::new(z0.shape().to_vec(), normal_vec(&mut noise_rng, z0.numel()))?;

        let mut tape = Tape::new();
        let out = match total_loss(&mut tape, &store, &models, &z0, &mask, t, &eps, cfg, sched) {
            Ok(out) => out,
            Err(Error::NonFinite(what)) => {
                diverged = Some(format!("non-finite forward value in {what} at step {step}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if !out.components.total.is_finite() {
            diverged = Some(format!("non-finite loss {} at step {step}", out.components.total));
            break;
        }
        tape.backward(out.total)?;
        let grads = tape.param_grads();
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            diverged = Some(format!("non-finite gradient at step {step}"));
            break;
        }
        adam.step(&mut store, &grads);
        log.push(LawStepRecord {
            step,
            l_s: out.components.l_s,
            l_t: out.components.l_t,
            l_dist: out.components.l_dist,
            l_dice: out.components.l_dice,
            total: out.components.total,
            w_stats: WeightStats::of(&out.w_final),
        });
    }
    if diverged.is_none() && snaps.contains(&train.steps.saturating_sub(1)) && train.steps > 1 {
        // last snapshot reflects the final parameters
        if let Some(last) = snapshots.last_mut() {
            if last.step != train.steps - 1 {
                snapshots.push(take_snapshot(
                    train.steps - 1,
                    &store,
                    &models,
                    &probe_z0,
                    &probe_m,
                    probe_t,
                    &probe_eps,
                    cfg,
                    sched,
                )?);
            } else {
                *last = take_snapshot(
                    train.steps - 1,
                    &store,
                    &models,
                    &probe_z0,
                    &probe_m,
                    probe_t,
                    &probe_eps,
                    cfg,
                    sched,
                )?;
            }
        }
    }
    Ok(LawRunResult { store, models, log, snapshots, diverged })
}

#[allow(clippy::too_many_arguments)]
fn take_snapshot(
    step: usize,
    store: &ParamStore,
    models: &LawModels,
    z0: &Tensor,
    mask: &Tensor,
    t: usize,
    eps: &Tensor,
    cfg: &LawConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaSnapshot> {
    let mut tape = Tape::new();
    let z0v = tape.constant(z0.clone())?;
    let epsv = tape.constant(eps.clone())?;
    let maskv = tape.constant(mask.clone())?;
    let z_t = forward_diffuse(&mut tape, z0v, t, epsv, sched)?;
    let temb = tape.constant(timestep_embedding(t, sched.len(), z0.shape())?)?;
    let pred = models.student.forward(&mut tape, store, z_t, temb, maskv)?;
    let d = delta_map(&mut tape, store, &models.phi, pred, maskv, cfg.tau)?;
    let delta = tape.value(d).clone();
    let alignment_dice = delta_alignment_dice(&delta, mask);
    Ok(DeltaSnapshot { step, delta, masks: mask.clone(), alignment_dice })
}

/// Mean squared noise-prediction error restricted to lesion pixels, over a
/// fixed evaluation set with deterministic noise draws.
pub fn lesion_region_mse(
    store: &ParamStore,
    models: &LawModels,
    eval_set: &[SamplePair],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = substream(seed, "law/eval-noise");
    let mut sum = 0.0;
    let mut count = 0.0;
    for pair in eval_set {
        let (z0, mask) = stack_batch(&[pair])?;
        let t = rng.gen_range(0..sched.len());
        let eps = Tensor::new(z0.shape().to_vec(), normal_vec(&mut rng, z0.numel()))?;
        let mut tape = Tape::new();
        let z0v = tape.constant(z0.clone())?;
        let epsv = tape.constant(eps.clone())?;
        let maskv = tape.constant(mask.clone())?;
        let z_t = forward_diffuse(&mut tape, z0v, t, epsv, sched)?;
        let temb = tape.constant(timestep_embedding(t, sched.len(), z0.shape())?)?;
        let pred = models.student.forward(&mut tape, store, z_t, temb, maskv)?;
        let pd = tape.value(pred).data();
        for ((&p, &e), &m) in pd.iter().zip(eps.data()).zip(mask.data()) {
            if m > 0.5 {
                sum += (p - e) * (p - e);
                count += 1.0;
            }
        }
    }
    if count == 0.0 {
        return Err(Error::InvalidArg("lesion_region_mse: no lesion pixels in eval set".into()));
    }
    Ok(sum / count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_mask_4x4() -> Tensor {
        // 4 lesion pixels out of 16 -> r = 0.25
        let mut d = vec![0.0; 16];
        for i in [5, 6, 9, 10] {
            d[i] = 1.0;
        }
        Tensor::new(vec![1, 1, 4, 4], d).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default_desk();
        assert_eq!(s.len(), 100);
        assert!(s.alpha_bar(0).unwrap() > 0.999);
        let mut prev = 1.0;
        for t in 0..s.len() {
            let a = s.alpha_bar(t).unwrap();
            assert!(a > 0.0 && a <= prev);
            prev = a;
        }
        assert!(s.alpha_bar(100).is_err());
    }

    #[test]
    fn diffuse_no_noise_limit() {
        let sched = NoiseSchedule::from_alpha_bar(vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let z0 = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
        let eps = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![9.0, 9.0, 9.0, 9.0]).unwrap()).unwrap();
        let zt = forward_diffuse(&mut tape, z0, 0, eps, &sched).unwrap();
        assert_eq!(tape.value(zt).data(), tape.value(z0).data());
    }

    #[test]
    fn diffuse_pure_noise_limit() {
        let sched = NoiseSchedule::from_alpha_bar(vec![1e-300]).unwrap();
        let mut tape = Tape::new();
        let z0 = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![5.0, -5.0]).unwrap()).unwrap();
        let eps = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let zt = forward_diffuse(&mut tape, z0, 0, eps, &sched).unwrap();
        for (a, b) in tape.value(zt).data().iter().zip([1.0, 2.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn diffuse_rejects_out_of_range_t() {
        let sched = NoiseSchedule::default_desk();
        let mut tape = Tape::new();
        let z0 = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let eps = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert!(forward_diffuse(&mut tape, z0, 100, eps, &sched).is_err());
    }

    #[test]
    fn ratio_prior_quarter_mask() {
        let w = ratio_prior(&unit_mask_4x4()).unwrap();
        for (&m, &wv) in unit_mask_4x4().data().iter().zip(w.data()) {
            let expect = if m > 0.5 { 0.75 } else { 0.25 };
            assert!((wv - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn ratio_prior_half_mask_symmetry() {
        let mut d = vec![0.0; 16];
        for v in d.iter_mut().take(8) {
            *v = 1.0;
        }
        let m = Tensor::new(vec![1, 1, 4, 4], d).unwrap();
        let w = ratio_prior(&m).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn ratio_prior_degenerate_fallback() {
        let m = Tensor::zeros(&[1, 1, 4, 4]);
        let w = ratio_prior(&m).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        let m1 = Tensor::full(&[1, 1, 4, 4], 1.0);
        assert!(ratio_prior(&m1).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ratio_prior_rejects_out_of_range() {
        let m = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 1.5]).unwrap();
        assert!(ratio_prior(&m).is_err());
    }

    #[test]
    fn modulate_examples() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::new(vec![3], vec![0.5, 1.0, 0.0]).unwrap()).unwrap();
        let mu = modulate(&mut tape, d, 0.2).unwrap();
        let got = tape.value(mu).data();
        assert!((got[0] - 1.0).abs() < 1e-15);
        assert!((got[1] - 1.2).abs() < 1e-15);
        assert!((got[2] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn finalize_constant_map_normalizes_to_one() {
        let cfg = LawConfig::default();
        let mut tape = Tape::new();
        let wr = tape.constant(Tensor::full(&[2, 1, 4, 4], 0.3)).unwrap();
        let mu = tape.constant(Tensor::full(&[2, 1, 4, 4], 1.0)).unwrap();
        let fw = finalize_weights(&mut tape, wr, mu, &cfg).unwrap();
        assert!(tape.value(fw.w_final).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn finalize_clamps_to_w_max() {
        let cfg = LawConfig { toggles: LawToggles { use_norm: false, ..Default::default() }, ..Default::default() };
        let mut tape = Tape::new();
        let wr = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![5.0, 0.5]).unwrap()).unwrap();
        let mu = tape.constant(Tensor::full(&[1, 1, 1, 2], 1.0)).unwrap();
        let fw = finalize_weights(&mut tape, wr, mu, &cfg).unwrap();
        assert_eq!(tape.value(fw.w_final).data(), &[2.0, 0.5]);
    }

    #[test]
    fn finalize_rejects_zero_mean() {
        let cfg = LawConfig::default();
        let mut tape = Tape::new();
        let wr = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let mu = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        match finalize_weights(&mut tape, wr, mu, &cfg) {
            Err(Error::DegenerateWeights(_)) => {}
            other => panic!("expected degenerate-weights error, got {other:?}"),
        }
    }

    #[test]
    fn weighted_mse_matches_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let t = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 1, 2], 1.0)).unwrap();
        let l = weighted_mse(&mut tape, p, t, w).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        // uniform weights reduce to plain mse
        let p2 = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![3.0, 0.0]).unwrap()).unwrap();
        let l2 = weighted_mse(&mut tape, p2, t, w).unwrap();
        assert!((tape.value(l2).item().unwrap() - ((2.0f64 * 2.0 + 2.0 * 2.0) / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn dice_hand_case() {
        // 2x2, one lesion pixel, delta = 0.5 everywhere -> 1 - 1/3
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.5)).unwrap();
        let mut md = vec![0.0; 4];
        md[0] = 1.0;
        let m = tape.constant(Tensor::new(vec![1, 1, 2, 2], md).unwrap()).unwrap();
        let l = dice_regularizer(&mut tape, d, m, 1e-6).unwrap();
        assert!((tape.value(l).item().unwrap() - (1.0 - 1.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let mut tape = Tape::new();
        let mut md = vec![0.0; 4];
        md[1] = 1.0;
        let m = tape.constant(Tensor::new(vec![1, 1, 2, 2], md.clone()).unwrap()).unwrap();
        let same = tape.constant(Tensor::new(vec![1, 1, 2, 2], md.clone()).unwrap()).unwrap();
        let l = dice_regularizer(&mut tape, same, m, 1e-6).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-3);

        let inv: Vec<f64> = md.iter().map(|v| 1.0 - v).collect();
        let d = tape.constant(Tensor::new(vec![1, 1, 2, 2], inv).unwrap()).unwrap();
        let l2 = dice_regularizer(&mut tape, d, m, 1e-6).unwrap();
        assert!(tape.value(l2).item().unwrap() > 0.999);
    }

    #[test]
    fn snapshot_step_layout() {
        assert_eq!(snapshot_steps(200, 3), vec![0, 99, 199]);
        assert_eq!(snapshot_steps(1, 3), vec![0]);
        assert!(snapshot_steps(0, 3).is_empty());
    }

    #[test]
    fn zero_steps_leaves_parameters_unchanged() {
        let spec = crate::data::SynthSpec { size: 16, ratio_range: (0.05, 0.2), ..Default::default() };
        let data = crate::data::gen_dataset(&spec, 4).unwrap();
        let sched = NoiseSchedule::default_desk();
        let train = LawTrainConfig { steps: 0, ..Default::default() };
        let run = train_law(&data, &LawConfig::default(), &train, &sched, 7).unwrap();
        let mut fresh = ParamStore::new();
        let _ = LawModels::new(&mut fresh, 7, train.student_hidden, train.phi_hidden);
        for ((_, a), (_, b)) in run.store.iter().zip(fresh.iter()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.name, b.name);
        }
        assert!(run.log.is_empty());
    }
}
