//! MK-UNet segmentation backbone with selective bidirectional skip attention.
//!
//! The encoder/decoder both use multi-kernel inverted-residual blocks (MKIR):
//! a 1x1 expansion, parallel depthwise convolutions with kernels 1/3/5, and a
//! 1x1 projection wrapped in a residual add. Selected stages refine the
//! decoder/skip pair with one shared-score bidirectional attention unit: the
//! decoder queries the encoder and both directions reuse the same score
//! matrix (transposed for the reverse direction), gated by a per-sample
//! scalar before the residual add.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, DwConv2d};
use crate::optim::{Adam, AdamConfig};
use crate::param::{ParamId, ParamStore};
use crate::rng::substream;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const STAGES: usize = 5;

// ---------------------------------------------------------------------------
// MKIR block
// ---------------------------------------------------------------------------

pub struct MkirBlock {
    pub expand: Conv2d,
    pub dw1: DwConv2d,
    pub dw3: DwConv2d,
    pub dw5: DwConv2d,
    pub proj: Conv2d,
    pub channels: usize,
}

impl MkirBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        let e = 2 * c;
        Self {
            expand: Conv2d::new(store, rng, &format!("{name}.expand"), c, e, 1, 1, 0),
            dw1: DwConv2d::new(store, rng, &format!("{name}.dw1"), e, 1),
            dw3: DwConv2d::new(store, rng, &format!("{name}.dw3"), e, 3),
            dw5: DwConv2d::new(store, rng, &format!("{name}.dw5"), e, 5),
            proj: Conv2d::new(store, rng, &format!("{name}.proj"), e, c, 1, 1, 0),
            channels: c,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let ex = self.expand.forward(tape, store, x)?;
        let ex = tape.relu(ex)?;
        let b1 = self.dw1.forward(tape, store, ex)?;
        let b3 = self.dw3.forward(tape, store, ex)?;
        let b5 = self.dw5.forward(tape, store, ex)?;
        let s = tape.add(b1, b3)?;
        let s = tape.add(s, b5)?;
        let p = self.proj.forward(tape, store, s)?;
        tape.add(x, p)
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count()
            + self.dw1.param_count()
            + self.dw3.param_count()
            + self.dw5.param_count()
            + self.proj.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.expand.macs(h, w)
            + self.dw1.macs(h, w)
            + self.dw3.macs(h, w)
            + self.dw5.macs(h, w)
            + self.proj.macs(h, w)
    }
}

// ---------------------------------------------------------------------------
// Bidirectional attention unit
// ---------------------------------------------------------------------------

pub struct BiAttnOut {
    pub d_out: VarId,
    pub e_out: VarId,
    /// Shared pre-softmax score matrix [N, T, T].
    pub scores: VarId,
    /// Per-sample gate values [N].
    pub gate: VarId,
}

pub struct BiAttnUnit {
    pub embed_d: Conv2d,
    pub embed_e: Conv2d,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v_d: Conv2d,
    pub v_e: Conv2d,
    pub out_d: Conv2d,
    pub out_e: Conv2d,
    /// Gate weight [1, 2C+1, 1]; the last row is the bias (applied to an
    /// appended constant-one feature).
    pub gate_w: ParamId,
    pub channels: usize,
    pub dim: usize,
    pub pool: usize,
}

impl BiAttnUnit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        dim: usize,
        pool: usize,
    ) -> Self {
        let gate_w = store.register(
            format!("{name}.gate.w"),
            crate::param::init_small(rng, &[1, 2 * c + 1, 1], 1e-2),
        );
        Self {
            embed_d: Conv2d::new(store, rng, &format!("{name}.embed_d"), c, dim, 1, 1, 0),
            embed_e: Conv2d::new(store, rng, &format!("{name}.embed_e"), c, dim, 1, 1, 0),
            q: Conv2d::new(store, rng, &format!("{name}.q"), dim, dim, 1, 1, 0),
            k: Conv2d::new(store, rng, &format!("{name}.k"), dim, dim, 1, 1, 0),
            v_d: Conv2d::new(store, rng, &format!("{name}.v_d"), dim, dim, 1, 1, 0),
            v_e: Conv2d::new(store, rng, &format!("{name}.v_e"), dim, dim, 1, 1, 0),
            // near-zero output projections: the unit starts as an identity
            // residual and only contributes once trained
            out_d: Conv2d::new_small(store, rng, &format!("{name}.out_d"), dim, c, 1, 1, 0, 1e-2),
            out_e: Conv2d::new_small(store, rng, &format!("{name}.out_e"), dim, c, 1, 1, 0, 1e-2),
            gate_w,
            channels: c,
            dim,
            pool,
        }
    }

    /// `gate_override` replaces the learned gate with a fixed value in [0,1].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d_in: VarId,
        e_in: VarId,
        gate_override: Option<f64>,
    ) -> Result<BiAttnOut> {
        let (n, c, h, w) = tape.value(d_in).dims4()?;
        if tape.value(e_in).shape() != [n, c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "attention: decoder {:?} vs encoder {:?}",
                tape.value(d_in).shape(),
                tape.value(e_in).shape()
            )));
        }
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "attention: expected {} channels, got {c}",
                self.channels
            )));
        }
        if h % self.pool != 0 || w % self.pool != 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention: {h}x{w} not divisible by token pool {}",
                self.pool
            )));
        }

        let ed = self.embed_d.forward(tape, store, d_in)?;
        let ee = self.embed_e.forward(tape, store, e_in)?;
        let pd = tape.avgpool(ed, self.pool)?;
        let pe = tape.avgpool(ee, self.pool)?;
        let (th, tw) = (h / self.pool, w / self.pool);

        let qm = self.q.forward(tape, store, pd)?;
        let km = self.k.forward(tape, store, pe)?;
        let vdm = self.v_d.forward(tape, store, pd)?;
        let vem = self.v_e.forward(tape, store, pe)?;
        let qt = tape.nchw_to_tokens(qm)?;
        let kt = tape.nchw_to_tokens(km)?;
        let vdt = tape.nchw_to_tokens(vdm)?;
        let vet = tape.nchw_to_tokens(vem)?;

        let ktr = tape.transpose_last2(kt)?;
        let raw = tape.matmul(qt, ktr)?;
        let scores = tape.mul_scalar(raw, 1.0 / (self.dim as f64).sqrt())?;

        let attn_d = tape.softmax_lastdim(scores)?;
        let delta_d_tok = tape.matmul(attn_d, vet)?;
        let scores_t = tape.transpose_last2(scores)?;
        let attn_e = tape.softmax_lastdim(scores_t)?;
        let delta_e_tok = tape.matmul(attn_e, vdt)?;

        let dd = tape.tokens_to_nchw(delta_d_tok, th, tw)?;
        let dd = tape.upsample_nearest(dd, self.pool)?;
        let delta_d = self.out_d.forward(tape, store, dd)?;
        let de = tape.tokens_to_nchw(delta_e_tok, th, tw)?;
        let de = tape.upsample_nearest(de, self.pool)?;
        let delta_e = self.out_e.forward(tape, store, de)?;

        let gate = match gate_override {
            Some(v) => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArg(format!("gate override {v} outside [0,1]")));
                }
                tape.constant(Tensor::full(&[n], v))?
            }
            None => {
                let cat = tape.concat_channels(&[d_in, e_in])?;
                let gap = tape.global_avg_pool(cat)?;
                let gap = tape.reshape(gap, vec![n, 2 * c, 1, 1])?;
                let ones = tape.constant(Tensor::full(&[n, 1, 1, 1], 1.0))?;
                let feat = tape.concat_channels(&[gap, ones])?;
                let feat = tape.reshape(feat, vec![1, n, 2 * c + 1])?;
                let w = tape.param(store, self.gate_w)?;
                let lin = tape.matmul(feat, w)?;
                let lin = tape.reshape(lin, vec![n])?;
                tape.sigmoid(lin)?
            }
        };
        let gd = tape.mul_by_item(delta_d, gate)?;
        let d_out = tape.add(d_in, gd)?;
        let ge = tape.mul_by_item(delta_e, gate)?;
        let e_out = tape.add(e_in, ge)?;
        Ok(BiAttnOut { d_out, e_out, scores, gate })
    }

    pub fn param_count(&self) -> usize {
        self.embed_d.param_count()
            + self.embed_e.param_count()
            + self.q.param_count()
            + self.k.param_count()
            + self.v_d.param_count()
            + self.v_e.param_count()
            + self.out_d.param_count()
            + self.out_e.param_count()
            + (2 * self.channels + 1)
    }

    /// Multiply-accumulates for an (h, w) stage resolution.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = (h * w) as u64;
        let t = hw / (self.pool * self.pool) as u64;
        let d = self.dim as u64;
        let c = self.channels as u64;
        let embeds = 2 * hw * c * d;
        let qkv = 4 * t * d * d;
        let attn = 3 * t * t * d; // scores + two attended value products
        let outs = 2 * hw * d * c;
        let gate = hw * 2 * c + (2 * c + 1);
        embeds + qkv + attn + outs + gate
    }

    /// Elements passed through a softmax (two row-normalizations of T x T).
    pub fn softmax_elems(&self, h: usize, w: usize) -> u64 {
        let t = (h * w / (self.pool * self.pool)) as u64;
        2 * t * t
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderConfig {
    pub channels: [usize; STAGES],
    /// Stages carrying a bidirectional attention unit; 0 is the
    /// highest-resolution decoder stage.
    pub attn_stages: Vec<usize>,
    pub attn_dim: [usize; STAGES],
    /// Token pooling factor per stage (stage map side / token grid side).
    pub attn_pool: [usize; STAGES],
    /// Fixed gate value instead of the learned per-sample gate.
    pub gate_override: Option<f64>,
}

impl Default for OrderConfig {
    fn default() -> Self {
        Self {
            channels: [4, 8, 16, 24, 32],
            attn_stages: vec![0, 1],
            attn_dim: [40, 40, 16, 16, 16],
            attn_pool: [8, 4, 2, 1, 1],
            gate_override: None,
        }
    }
}

impl OrderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArg("order: zero channel width".into()));
        }
        if self.attn_dim.iter().any(|&d| d == 0) || self.attn_pool.iter().any(|&p| p == 0) {
            return Err(Error::InvalidArg("order: zero attention dim or pool".into()));
        }
        for &s in &self.attn_stages {
            if s >= STAGES {
                return Err(Error::InvalidArg(format!("order: attention stage {s} outside 0..{STAGES}")));
            }
        }
        let mut seen = [false; STAGES];
        for &s in &self.attn_stages {
            if seen[s] {
                return Err(Error::InvalidArg(format!("order: duplicate attention stage {s}")));
            }
            seen[s] = true;
        }
        if let Some(g) = self.gate_override {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidArg(format!("order: gate override {g} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn base() -> Self {
        Self { attn_stages: vec![], ..Default::default() }
    }

    pub fn all_stages() -> Self {
        Self { attn_stages: vec![0, 1, 2, 3, 4], ..Default::default() }
    }
}

pub struct OrderForward {
    pub prob: VarId,
    /// Shared score matrices of the active attention units, by stage.
    pub scores: Vec<(usize, VarId)>,
    /// Gate vectors of the active attention units, by stage.
    pub gates: Vec<(usize, VarId)>,
}

pub struct OrderNetwork {
    pub cfg: OrderConfig,
    pub stem: Conv2d,
    pub enc: Vec<MkirBlock>,
    pub down: Vec<Conv2d>,
    pub up: Vec<Conv2d>,
    pub dec: Vec<MkirBlock>,
    pub attn: Vec<Option<BiAttnUnit>>,
    pub head: Conv2d,
}

impl OrderNetwork {
    pub fn new(store: &mut ParamStore, cfg: OrderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "order/init");
        let ch = cfg.channels;
        let stem = Conv2d::new(store, &mut rng, "net.stem", 1, ch[0], 3, 1, 1);
        let enc: Vec<MkirBlock> = (0..STAGES)
            .map(|i| MkirBlock::new(store, &mut rng, &format!("net.enc{i}"), ch[i]))
            .collect();
        let down: Vec<Conv2d> = (0..STAGES - 1)
            .map(|i| Conv2d::new(store, &mut rng, &format!("net.down{i}"), ch[i], ch[i + 1], 1, 1, 0))
            .collect();
        let up: Vec<Conv2d> = (0..STAGES - 1)
            .map(|i| Conv2d::new(store, &mut rng, &format!("net.up{i}"), ch[i + 1], ch[i], 1, 1, 0))
            .collect();
        let dec: Vec<MkirBlock> = (0..STAGES - 1)
            .map(|i| MkirBlock::new(store, &mut rng, &format!("net.dec{i}"), ch[i]))
            .collect();
        let attn: Vec<Option<BiAttnUnit>> = (0..STAGES)
            .map(|i| {
                cfg.attn_stages.contains(&i).then(|| {
                    BiAttnUnit::new(
                        store,
                        &mut rng,
                        &format!("net.attn{i}"),
                        ch[i],
                        cfg.attn_dim[i],
                        cfg.attn_pool[i],
                    )
                })
            })
            .collect();
        let head = Conv2d::new(store, &mut rng, "net.head", ch[0], 1, 1, 1, 0);
        Ok(Self { cfg, stem, enc, down, up, dec, attn, head })
    }

    /// `x` is [N, 1, H, W] with H, W divisible by 16.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<OrderForward> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("order: expected 1 input channel, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::ShapeMismatch(format!("order: {h}x{w} not divisible by 16")));
        }

        let mut skips = Vec::with_capacity(STAGES);
        let mut cur = self.stem.forward(tape, store, x)?;
        for i in 0..STAGES {
            let e = self.enc[i].forward(tape, store, cur)?;
            skips.push(e);
            if i + 1 < STAGES {
                let p = tape.maxpool2(e)?;
                cur = self.down[i].forward(tape, store, p)?;
            }
        }

        let mut scores = Vec::new();
        let mut gates = Vec::new();
        // top of the decoder; stage 4 attends over (e4, e4)
        let mut d = skips[STAGES - 1];
        if let Some(unit) = &self.attn[STAGES - 1] {
            let out = unit.forward(tape, store, d, skips[STAGES - 1], self.cfg.gate_override)?;
            scores.push((STAGES - 1, out.scores));
            gates.push((STAGES - 1, out.gate));
            d = out.d_out;
        }
        for i in (0..STAGES - 1).rev() {
            let u = tape.upsample_nearest(d, 2)?;
            let mut u = self.up[i].forward(tape, store, u)?;
            let mut e = skips[i];
            if let Some(unit) = &self.attn[i] {
                let out = unit.forward(tape, store, u, e, self.cfg.gate_override)?;
                scores.push((i, out.scores));
                gates.push((i, out.gate));
                u = out.d_out;
                e = out.e_out;
            }
            let fused = tape.add(u, e)?;
            d = self.dec[i].forward(tape, store, fused)?;
        }
        let logits = self.head.forward(tape, store, d)?;
        let prob = tape.sigmoid(logits)?;
        scores.reverse();
        gates.reverse();
        Ok(OrderForward { prob, scores, gates })
    }
}

// ---------------------------------------------------------------------------
// Loss and metrics
// ---------------------------------------------------------------------------

pub struct SegLoss {
    pub total: VarId,
    pub bce: f64,
    pub dice: f64,
}

/// BCE (on clamped probabilities) plus soft Dice.
pub fn seg_loss(tape: &mut Tape, prob: VarId, target: VarId) -> Result<SegLoss> {
    if tape.value(prob).shape() != tape.value(target).shape() {
        return Err(Error::ShapeMismatch(format!(
            "seg_loss: {:?} vs {:?}",
            tape.value(prob).shape(),
            tape.value(target).shape()
        )));
    }
    let p = tape.clamp(prob, 1e-7, 1.0 - 1e-7)?;
    let lp = tape.ln(p)?;
    let pos = tape.mul(target, lp)?;
    let one_m_p = tape.one_minus(p)?;
    let lq = tape.ln(one_m_p)?;
    let one_m_t = tape.one_minus(target)?;
    let neg = tape.mul(one_m_t, lq)?;
    let s = tape.add(pos, neg)?;
    let m = tape.mean_all(s)?;
    let bce = tape.mul_scalar(m, -1.0)?;

    let eps = 1e-6;
    let inter = tape.mul(prob, target)?;
    let inter = tape.sum_all(inter)?;
    let num = tape.mul_scalar(inter, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let ps = tape.sum_all(prob)?;
    let ts = tape.sum_all(target)?;
    let den = tape.add(ps, ts)?;
    let den = tape.add_scalar(den, eps)?;
    let frac = tape.div(num, den)?;
    let nf = tape.mul_scalar(frac, -1.0)?;
    let dice = tape.add_scalar(nf, 1.0)?;

    let total = tape.add(bce, dice)?;
    Ok(SegLoss {
        total,
        bce: tape.value(bce).item()?,
        dice: tape.value(dice).item()?,
    })
}

/// Dice on thresholded predictions; two empty maps count as a perfect 1.0.
pub fn dice_score(prob: &Tensor, target: &Tensor, threshold: f64) -> Result<f64> {
    if prob.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!("dice_score: {:?} vs {:?}", prob.shape(), target.shape())));
    }
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&p, &g) in prob.data().iter().zip(target.data()) {
        let pb = if p > threshold { 1.0 } else { 0.0 };
        let gb = if g > threshold { 1.0 } else { 0.0 };
        inter += pb * gb;
        psum += pb;
        gsum += gb;
    }
    Ok(if psum + gsum == 0.0 { 1.0 } else { 2.0 * inter / (psum + gsum) })
}

/// Intersection over union on thresholded predictions; empty/empty is 1.0.
pub fn iou_score(prob: &Tensor, target: &Tensor, threshold: f64) -> Result<f64> {
    if prob.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!("iou_score: {:?} vs {:?}", prob.shape(), target.shape())));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&p, &g) in prob.data().iter().zip(target.data()) {
        let pb = p > threshold;
        let gb = g > threshold;
        if pb && gb {
            inter += 1.0;
        }
        if pb || gb {
            union += 1.0;
        }
    }
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 4, lr: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SegEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
}

pub struct SegRunResult {
    pub store: ParamStore,
    pub network: OrderNetwork,
    pub log: Vec<SegEpochRecord>,
}

fn stack_images(samples: &[&SamplePair]) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = samples[0].image.dims3()?;
    let n = samples.len();
    let mut xs = Vec::with_capacity(n * c * h * w);
    let mut ms = Vec::with_capacity(n * h * w);
    for s in samples {
        xs.extend_from_slice(s.image.data());
        ms.extend_from_slice(s.mask.data());
    }
    Ok((Tensor::new(vec![n, c, h, w], xs)?, Tensor::new(vec![n, 1, h, w], ms)?))
}

/// Mean Dice/IoU of the network over a sample set, one item at a time.
pub fn eval_seg(
    store: &ParamStore,
    network: &OrderNetwork,
    set: &[SamplePair],
    threshold: f64,
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::InvalidArg("eval_seg: empty set".into()));
    }
    let mut dsum = 0.0;
    let mut isum = 0.0;
    for pair in set {
        let (x, m) = stack_images(&[pair])?;
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let out = network.forward(&mut tape, store, xv)?;
        let prob = tape.value(out.prob);
        dsum += dice_score(prob, &m, threshold)?;
        isum += iou_score(prob, &m, threshold)?;
    }
    let n = set.len() as f64;
    Ok((dsum / n, isum / n))
}

/// Adam training with per-epoch validation metrics. Deterministic given
/// (seed, configs, data).
pub fn train_seg(
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    cfg: OrderConfig,
    tcfg: &SegTrainConfig,
    seed: u64,
) -> Result<SegRunResult> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArg("train_seg: empty train or val set".into()));
    }
    let mut store = ParamStore::new();
    let network = OrderNetwork::new(&mut store, cfg, seed)?;
    let mut adam = Adam::new(AdamConfig { lr: tcfg.lr, ..Default::default() }, &store);
    let mut shuffle_rng = substream(seed, "seg/shuffle");

    let mut log = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(tcfg.batch_size.max(1)) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (x, m) = stack_images(&batch)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x)?;
            let mv = tape.constant(m)?;
            let out = network.forward(&mut tape, &store, xv)?;
            let loss = seg_loss(&mut tape, out.prob, mv)?;
            let lval = tape.value(loss.total).item()?;
            if !lval.is_finite() {
                return Err(Error::Diverged { step: epoch, detail: format!("seg loss {lval}") });
            }
            tape.backward(loss.total)?;
            adam.step(&mut store, &tape.param_grads());
            loss_sum += lval;
            batches += 1.0;
        }
        let (val_dice, val_iou) = eval_seg(&store, &network, val_set, 0.5)?;
        log.push(SegEpochRecord { epoch, train_loss: loss_sum / batches, val_dice, val_iou });
    }
    Ok(SegRunResult { store, network, log })
}

/// Per-sample predicted probability map for export.
pub fn predict(store: &ParamStore, network: &OrderNetwork, image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let x = image.clone().reshaped(vec![1, c, h, w])?;
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let out = network.forward(&mut tape, store, xv)?;
    tape.value(out.prob).clone().reshaped(vec![1, h, w])
}

// keep Rng in the prelude for gen_range-based helpers in tests
#[allow(unused)]
fn _rng_assert(r: &mut ChaCha8Rng) -> usize {
    r.gen_range(0..2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_input(n: usize, s: usize) -> Tensor {
        let mut v = Vec::with_capacity(n * s * s);
        for i in 0..n * s * s {
            v.push(((i * 37 % 101) as f64) / 101.0);
        }
        Tensor::new(vec![n, 1, s, s], v).unwrap()
    }

    #[test]
    fn mkir_identity_when_branch_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = substream(1, "t");
        let block = MkirBlock::new(&mut store, &mut rng, "b", 4);
        // zero projection weights -> pure residual
        store.value_mut(block.proj.w).data_mut().fill(0.0);
        store.value_mut(block.proj.b).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let x = tape.constant(toy_input(1, 8).clone().reshaped(vec![1, 1, 8, 8]).unwrap()).unwrap();
        // widen to 4 channels by concat
        let x4 = tape.concat_channels(&[x, x, x, x]).unwrap();
        let y = block.forward(&mut tape, &store, x4).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x4).data());
    }

    #[test]
    fn mkir_param_count_formula() {
        let mut store = ParamStore::new();
        let mut rng = substream(1, "t");
        for c in [4usize, 8, 16, 24, 32] {
            let b = MkirBlock::new(&mut store, &mut rng, &format!("b{c}"), c);
            assert_eq!(b.param_count(), 4 * c * c + 73 * c);
        }
    }

    #[test]
    fn attn_unit_param_counts_match_design() {
        let mut store = ParamStore::new();
        let mut rng = substream(1, "t");
        let cases = [(4usize, 40usize, 7297usize), (8, 40, 7953), (16, 16, 2209), (24, 16, 2753), (32, 16, 3297)];
        for (c, d, expect) in cases {
            let u = BiAttnUnit::new(&mut store, &mut rng, &format!("u{c}"), c, d, 1);
            assert_eq!(u.param_count(), expect, "c={c} d={d}");
            assert_eq!(store.count_scalars(&format!("u{c}.")), expect);
        }
    }

    #[test]
    fn gate_zero_passes_inputs_through() {
        let mut store = ParamStore::new();
        let mut rng = substream(2, "t");
        let u = BiAttnUnit::new(&mut store, &mut rng, "u", 4, 8, 2);
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, off: f64| {
            let mut v = Vec::new();
            for i in 0..2 * 4 * 8 * 8 {
                v.push(off + (i % 13) as f64 * 0.01);
            }
            tape.constant(Tensor::new(vec![2, 4, 8, 8], v).unwrap()).unwrap()
        };
        let d = mk(&mut tape, 0.1);
        let e = mk(&mut tape, -0.2);
        let out = u.forward(&mut tape, &store, d, e, Some(0.0)).unwrap();
        assert_eq!(tape.value(out.d_out).data(), tape.value(d).data());
        assert_eq!(tape.value(out.e_out).data(), tape.value(e).data());
        // gate 1 applies the full delta
        let out1 = u.forward(&mut tape, &store, d, e, Some(1.0)).unwrap();
        assert_ne!(tape.value(out1.d_out).data(), tape.value(d).data());
    }

    #[test]
    fn attn_scores_shape_and_row_sums() {
        let mut store = ParamStore::new();
        let mut rng = substream(3, "t");
        let u = BiAttnUnit::new(&mut store, &mut rng, "u", 4, 8, 2);
        let mut tape = Tape::new();
        let d = tape.constant(toy_input(1, 8).clone().reshaped(vec![1, 1, 8, 8]).unwrap()).unwrap();
        let d4 = tape.concat_channels(&[d, d, d, d]).unwrap();
        let out = u.forward(&mut tape, &store, d4, d4, None).unwrap();
        // 8x8 pooled by 2 -> 16 tokens
        assert_eq!(tape.value(out.scores).shape(), &[1, 16, 16]);
        let sm = tape.softmax_lastdim(out.scores).unwrap();
        for row in tape.value(sm).data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes_and_range() {
        let mut store = ParamStore::new();
        let net = OrderNetwork::new(&mut store, OrderConfig::default(), 5).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(toy_input(2, 32)).unwrap();
        let out = net.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(out.prob).shape(), &[2, 1, 32, 32]);
        assert!(tape.value(out.prob).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(out.scores.len(), 2);
    }

    #[test]
    fn forward_rejects_bad_size() {
        let mut store = ParamStore::new();
        let net = OrderNetwork::new(&mut store, OrderConfig::base(), 5).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(toy_input(1, 24)).unwrap();
        assert!(net.forward(&mut tape, &store, x).is_err());
    }

    #[test]
    fn base_param_count_in_band() {
        let mut store = ParamStore::new();
        let _ = OrderNetwork::new(&mut store, OrderConfig::base(), 5).unwrap();
        let n = store.count_scalars("net.");
        assert!((22950..=31050).contains(&n), "base params {n}");
    }

    #[test]
    fn attention_param_increments() {
        let mut s1 = ParamStore::new();
        let _ = OrderNetwork::new(&mut s1, OrderConfig::base(), 5).unwrap();
        let base = s1.count_scalars("net.");
        let mut s2 = ParamStore::new();
        let _ = OrderNetwork::new(&mut s2, OrderConfig::default(), 5).unwrap();
        let order01 = s2.count_scalars("net.");
        assert_eq!(order01 - base, 7297 + 7953);
        assert_eq!(s2.count_scalars("net.attn0."), 7297);
        assert_eq!(s2.count_scalars("net.attn1."), 7953);
    }

    #[test]
    fn seg_loss_perfect_prediction_is_small() {
        let mut tape = Tape::new();
        let mut md = vec![0.0; 16];
        md[3] = 1.0;
        md[7] = 1.0;
        let m = tape.constant(Tensor::new(vec![1, 1, 4, 4], md.clone()).unwrap()).unwrap();
        let p = tape.constant(Tensor::new(vec![1, 1, 4, 4], md).unwrap()).unwrap();
        let l = seg_loss(&mut tape, p, m).unwrap();
        assert!(tape.value(l.total).item().unwrap() < 1e-3);
    }

    #[test]
    fn metric_identities() {
        let p = Tensor::new(vec![1, 1, 2, 2], vec![0.9, 0.8, 0.1, 0.2]).unwrap();
        let g = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = dice_score(&p, &g, 0.5).unwrap();
        let i = iou_score(&p, &g, 0.5).unwrap();
        assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        // empty vs empty
        let z = Tensor::zeros(&[1, 1, 2, 2]);
        assert_eq!(dice_score(&z, &z, 0.5).unwrap(), 1.0);
        assert_eq!(iou_score(&z, &z, 0.5).unwrap(), 1.0);
    }
}
