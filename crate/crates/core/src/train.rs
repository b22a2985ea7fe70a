//! Joint optimization of the scene generator, payload injector and recovery
//! decoder: photometric loss against the clean scene, positive/negative
//! decode losses, gradient-conflict masking, AdamW updates, metrics logging,
//! checkpointing and post-training evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{self, DecodeConfig};
use crate::embed::{self, EmbedConfig, EncoderMode, HiddenEncoder, Payload};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::io::{save_checkpoint, scene_hash, Checkpoint, MetricsLog, MetricsRow};
use crate::metrics;
use crate::num::{subseed, Scalar};
use crate::perturb::{self, PerturbKind, PerturbSpec, SweepRow};
use crate::render::{
    render_on_tape, scene_from_tensors, tile_render, CameraRig, GaussianPrim, GaussianScene,
    RenderOptions,
};
use crate::tensor::{AdamWConfig, ParamStore, Role, Tape, Tensor};

// ---------------------------------------------------------------------------
// Loss weights
// ---------------------------------------------------------------------------

/// Weights of the three training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Recovering the payload from the checking-view render.
    pub dec_pos: f64,
    /// Decoding the clean render to the null image (false-positive control).
    pub dec_neg: f64,
    /// Photometric closeness to the clean scene on training views.
    pub rgb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dec_pos: 0.3, dec_neg: 1.0, rgb: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dec_pos", self.dec_pos),
            ("dec_neg", self.dec_neg),
            ("rgb", self.rgb),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.dec_pos == 0.0 && self.dec_neg == 0.0 && self.rgb == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted sum of the three loss terms.
pub fn total_loss(dec_pos: f64, dec_neg: f64, rgb: f64, w: &LossWeights) -> f64 {
    w.dec_pos * dec_pos + w.dec_neg * dec_neg + w.rgb * rgb
}

// ---------------------------------------------------------------------------
// Gradient-conflict masks
// ---------------------------------------------------------------------------

/// Resolution at which update masking is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// One keep/drop decision per parameter tensor (cosine of whole-group
    /// gradients).
    Group,
    /// Independent per-scalar decisions (cosine degenerates to sign
    /// agreement).
    Element,
}

/// Which parameter roles the masking applies to. The decoder always receives
/// plain unmasked gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmonizeScope {
    Generator,
    GeneratorAndInjector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonizeConfig {
    pub enabled: bool,
    pub granularity: MaskGranularity,
    pub scope: HarmonizeScope,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        HarmonizeConfig {
            enabled: true,
            granularity: MaskGranularity::Group,
            scope: HarmonizeScope::GeneratorAndInjector,
        }
    }
}

impl HarmonizeConfig {
    pub fn roles(&self) -> &'static [Role] {
        match self.scope {
            HarmonizeScope::Generator => &[Role::Theta],
            HarmonizeScope::GeneratorAndInjector => &[Role::Theta, Role::Phi],
        }
    }
}

/// Builds binary keep-masks from the photometric and hiding gradients of the
/// same forward pass, plus the kept fraction of scalars.
///
/// Group mode keeps a tensor when the cosine of its two gradient vectors is
/// strictly positive; element mode keeps a scalar when the two partial
/// derivatives agree in sign. A zero gradient on either side carries no
/// conflict evidence and keeps the coordinate: the photometric gradient is
/// exactly zero at the identity start, and dropping those coordinates would
/// freeze the generator permanently.
pub fn harmonize_masks<T: Scalar>(
    g_rgb: &[Tensor<T>],
    g_dec: &[Tensor<T>],
    granularity: MaskGranularity,
) -> Result<(Vec<Tensor<T>>, f64)> {
    if g_rgb.len() != g_dec.len() {
        return Err(Error::Shape(format!(
            "gradient sets have {} vs {} groups",
            g_rgb.len(),
            g_dec.len()
        )));
    }
    let mut masks = Vec::with_capacity(g_rgb.len());
    let mut kept = 0.0f64;
    let mut count = 0.0f64;
    for (a, b) in g_rgb.iter().zip(g_dec) {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "gradient shapes {:?} vs {:?} in one group",
                a.shape(),
                b.shape()
            )));
        }
        count += a.len() as f64;
        match granularity {
            MaskGranularity::Group => {
                let mut dot = 0.0f64;
                let mut na = 0.0f64;
                let mut nb = 0.0f64;
                for (x, y) in a.data().iter().zip(b.data()) {
                    let (x, y) = (x.widen(), y.widen());
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                let keep = na == 0.0 || nb == 0.0 || dot > 0.0;
                if keep {
                    kept += a.len() as f64;
                }
                masks.push(Tensor::full(a.shape(), if keep { T::one() } else { T::zero() }));
            }
            MaskGranularity::Element => {
                let m: Vec<T> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| {
                        if *x * *y < T::zero() {
                            T::zero()
                        } else {
                            kept += 1.0;
                            T::one()
                        }
                    })
                    .collect();
                masks.push(Tensor::from_vec(a.shape(), m)?);
            }
        }
    }
    let frac = if count == 0.0 { 1.0 } else { kept / count };
    Ok((masks, frac))
}

// ---------------------------------------------------------------------------
// Divergence guard
// ---------------------------------------------------------------------------

/// Aborts training when the total loss stays far above its running median.
/// Out-of-range losses only bump the counter and are excluded from the
/// median, so a runaway cannot drag the reference level up with it.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    history: Vec<f64>,
    consecutive: usize,
    warmup: usize,
    factor: f64,
    limit: usize,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl DivergenceGuard {
    pub fn new() -> Self {
        DivergenceGuard {
            history: Vec::new(),
            consecutive: 0,
            warmup: 20,
            factor: 10.0,
            limit: 50,
        }
    }

    /// True when the most recent loss was within range.
    pub fn is_calm(&self) -> bool {
        self.consecutive == 0
    }

    pub fn observe(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        if self.history.len() >= self.warmup {
            let med = self.median();
            if loss > self.factor * med {
                self.consecutive += 1;
                if self.consecutive >= self.limit {
                    return Err(Error::Diverged(format!(
                        "loss {loss:.6e} above {}x running median {med:.6e} for {} consecutive steps",
                        self.factor, self.limit
                    )));
                }
                return Ok(());
            }
        }
        self.consecutive = 0;
        self.history.push(loss);
        Ok(())
    }

    fn median(&self) -> f64 {
        let mut v = self.history.clone();
        v.sort_by(|a, b| a.partial_cmp(b).expect("guard history is finite"));
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

/// Optional render perturbation applied to both decoder inputs during
/// training (the hiding branch and the false-positive branch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Off,
    Blur,
    /// Quantization round-trip with a straight-through gradient.
    JpegApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Training poses drawn per step (checking and held-out views excluded).
    pub views_per_step: usize,
    /// Side length of all training renders; rig cameras must match.
    pub render_res: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    /// Constant gray level of the null image the decoder must produce on
    /// clean renders.
    pub null_value: f64,
    pub seed: u64,
    pub harmonization: HarmonizeConfig,
    pub augmentation: Augmentation,
    pub augment_blur_sigma: f64,
    pub augment_jpeg_quality: u32,
    /// Number of rig views (taken from the tail) reserved for evaluation.
    pub holdout_views: usize,
    /// Overwrite the checkpoint every this many steps; 0 = only at the end.
    pub checkpoint_every: usize,
    pub threads: usize,
    pub tile_size: usize,
    pub embed: EmbedConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            views_per_step: 4,
            render_res: 128,
            lr: 1e-3,
            weight_decay: 0.0,
            loss: LossWeights::default(),
            null_value: 0.5,
            seed: 7,
            harmonization: HarmonizeConfig::default(),
            augmentation: Augmentation::Off,
            augment_blur_sigma: 0.5,
            augment_jpeg_quality: 70,
            holdout_views: 8,
            checkpoint_every: 0,
            threads: 1,
            tile_size: 16,
            embed: EmbedConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.views_per_step == 0 {
            return Err(Error::Config("views_per_step must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.null_value) {
            return Err(Error::Config(format!(
                "null image value must be in [0,1], got {}",
                self.null_value
            )));
        }
        if !self.augment_blur_sigma.is_finite() || self.augment_blur_sigma < 0.0 {
            return Err(Error::Config(format!(
                "augmentation blur sigma must be non-negative, got {}",
                self.augment_blur_sigma
            )));
        }
        if self.augment_jpeg_quality == 0 || self.augment_jpeg_quality > 100 {
            return Err(Error::Config(format!(
                "augmentation quality must be in [1,100], got {}",
                self.augment_jpeg_quality
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !matches!(self.tile_size, 8 | 16 | 32) {
            return Err(Error::Config(format!("tile size must be 8, 16 or 32, got {}", self.tile_size)));
        }
        self.loss.validate()?;
        self.embed.validate()?;
        self.decode_cfg().validate()
    }

    pub fn decode_cfg(&self) -> DecodeConfig {
        DecodeConfig {
            render_res: self.render_res,
            hidden_res: self.embed.hidden_res,
            max_bits: self.embed.max_bits,
        }
    }

    pub fn render_options<T: Scalar>(&self) -> RenderOptions<T> {
        RenderOptions {
            tile_size: self.tile_size,
            threads: self.threads,
            ..RenderOptions::default()
        }
    }

    pub fn adam<T: Scalar>(&self) -> AdamWConfig<T> {
        AdamWConfig {
            weight_decay: T::of(self.weight_decay),
            ..AdamWConfig::with_lr(T::of(self.lr))
        }
    }
}

// ---------------------------------------------------------------------------
// Scene <-> flat tensor (for checkpoint extras)
// ---------------------------------------------------------------------------

const PRIM_WIDTH: usize = 14;

/// Flattens a scene to a `[n, 14]` attribute tensor plus `[3]` background.
pub fn scene_to_flat<T: Scalar>(scene: &GaussianScene<T>) -> (Tensor<T>, Tensor<T>) {
    let mut data = Vec::with_capacity(scene.len() * PRIM_WIDTH);
    for p in &scene.prims {
        data.extend_from_slice(&p.center);
        data.extend_from_slice(&p.log_scale);
        data.extend_from_slice(&p.rotation);
        data.push(p.opacity_logit);
        data.extend_from_slice(&p.color);
    }
    let flat = Tensor::from_vec(&[scene.len(), PRIM_WIDTH], data).expect("sized above");
    let bg = Tensor::from_vec(&[3], scene.background.to_vec()).expect("sized above");
    (flat, bg)
}

pub fn scene_from_flat<T: Scalar>(flat: &Tensor<T>, background: &Tensor<T>) -> Result<GaussianScene<T>> {
    let s = flat.shape();
    if s.len() != 2 || s[1] != PRIM_WIDTH {
        return Err(Error::Shape(format!("flat scene must be [n,{PRIM_WIDTH}], got {s:?}")));
    }
    if background.shape() != [3] {
        return Err(Error::Shape(format!(
            "background must be [3], got {:?}",
            background.shape()
        )));
    }
    let d = flat.data();
    let prims = (0..s[0])
        .map(|i| {
            let r = &d[i * PRIM_WIDTH..(i + 1) * PRIM_WIDTH];
            GaussianPrim {
                center: [r[0], r[1], r[2]],
                log_scale: [r[3], r[4], r[5]],
                rotation: [r[6], r[7], r[8], r[9]],
                opacity_logit: r[10],
                color: [r[11], r[12], r[13]],
            }
        })
        .collect();
    let bg = background.data();
    let scene = GaussianScene::new(prims, [bg[0], bg[1], bg[2]]);
    scene.validate()?;
    Ok(scene)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Checkpoint extra-tensor names.
const EXTRA_TOKENS: &str = "hidden_tokens";
const EXTRA_PAYLOAD_IMAGE: &str = "payload_image";
const EXTRA_PAYLOAD_BITS: &str = "payload_bits";
const EXTRA_CLEAN_CHECK: &str = "clean_checking_render";
const EXTRA_SCENE: &str = "stego_scene";
const EXTRA_BACKGROUND: &str = "stego_background";
const EXTRA_BASE: &str = "base_scene";

/// Everything one optimization step computes before parameters move.
struct StepEval<T: Scalar> {
    loss_rgb: f64,
    loss_dec_pos: f64,
    loss_dec_neg: f64,
    /// Per-group gradients of the photometric loss (None = unreached).
    g_rgb: Vec<Option<Tensor<T>>>,
    /// Per-group gradients of the weighted hiding + null losses.
    g_dec: Vec<Option<Tensor<T>>>,
    /// Checking-view render `[3,H,W]` before any augmentation.
    check_render: Tensor<T>,
    /// Decoded hidden image `[3,h,h]` (image payloads).
    decoded: Option<Tensor<T>>,
    /// Payload bit logits `[1,L]` (bit payloads).
    logits: Option<Tensor<T>>,
}

pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    rig: CameraRig<T>,
    checking_index: usize,
    base: GaussianScene<T>,
    base_hash: [u8; 32],
    payload: Payload<T>,
    store: ParamStore<T>,
    /// Frozen payload tokens `[k, d_model]`.
    f_h: Tensor<T>,
    /// Frozen per-primitive base features.
    feat_in: Tensor<T>,
    /// Clean base-scene renders per rig index, `[3,H,W]`, filled lazily.
    clean_chw: Vec<Option<Tensor<T>>>,
    /// Payload image resized to the hidden resolution (image payloads).
    hidden_target: Option<ImageBuf<T>>,
    hidden_target_chw: Option<Tensor<T>>,
    /// Payload bits as a `[1,L]` target row (bit payloads).
    bit_target: Option<Tensor<T>>,
    null_chw: Tensor<T>,
    guard: DivergenceGuard,
    /// Rig indices eligible as training poses.
    train_views: Vec<usize>,
    /// Rig indices reserved for evaluation.
    holdout: Vec<usize>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        cfg: TrainConfig,
        rig: CameraRig<T>,
        checking_index: usize,
        base: GaussianScene<T>,
        payload: Payload<T>,
        imported_tokens: Option<Tensor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        base.validate()?;
        payload.validate(&cfg.embed)?;
        let mode = match imported_tokens {
            Some(t) => EncoderMode::FileImport(t),
            None => EncoderMode::BuiltinRandom,
        };
        let encoder = HiddenEncoder::new(&cfg.embed, cfg.seed, mode)?;
        let f_h = encoder.extract(&payload)?;
        let mut store = ParamStore::new();
        embed::init_embed_params(&mut store, &cfg.embed, cfg.seed)?;
        decode::init_decoder_params(&mut store, &cfg.decode_cfg(), cfg.seed)?;
        Self::assemble(cfg, rig, checking_index, base, payload, store, f_h)
    }

    /// Rebuilds a trainer around checkpointed parameters so optimization can
    /// resume. The caller supplies the base scene; it must hash to the value
    /// recorded at save time.
    pub fn from_checkpoint(ck: &Checkpoint<T>, base: GaussianScene<T>) -> Result<Self> {
        if scene_hash(&base.cast::<f32>()) != ck.base_scene_hash {
            return Err(Error::Validation(
                "base scene does not match the checkpoint's recorded scene hash".into(),
            ));
        }
        let cfg: TrainConfig = serde_json::from_value(ck.config.clone())?;
        cfg.validate()?;
        let payload = payload_from_extras(ck)?;
        let f_h = ck
            .extra(EXTRA_TOKENS)
            .cloned()
            .ok_or_else(|| Error::Validation("checkpoint carries no payload token record".into()))?;
        Self::assemble(
            cfg,
            ck.rig.clone(),
            ck.checking_index,
            base,
            payload,
            ck.store.clone(),
            f_h,
        )
    }

    fn assemble(
        cfg: TrainConfig,
        rig: CameraRig<T>,
        checking_index: usize,
        base: GaussianScene<T>,
        payload: Payload<T>,
        store: ParamStore<T>,
        f_h: Tensor<T>,
    ) -> Result<Self> {
        if rig.len() < 2 {
            return Err(Error::Validation(format!(
                "training rig needs at least 2 cameras, got {}",
                rig.len()
            )));
        }
        if checking_index >= rig.len() {
            return Err(Error::Validation(format!(
                "checking view {checking_index} outside a rig of {}",
                rig.len()
            )));
        }
        for (i, cam) in rig.cameras.iter().enumerate() {
            if cam.width != cfg.render_res || cam.height != cfg.render_res {
                return Err(Error::Validation(format!(
                    "camera {i} renders {}x{}, training expects {}x{}",
                    cam.width, cam.height, cfg.render_res, cfg.render_res
                )));
            }
        }
        if cfg.holdout_views + 1 > rig.len() {
            return Err(Error::Validation(format!(
                "{} held-out views leave no training pose in a rig of {}",
                cfg.holdout_views,
                rig.len()
            )));
        }
        let holdout: Vec<usize> = (rig.len() - cfg.holdout_views..rig.len()).collect();
        if holdout.contains(&checking_index) {
            return Err(Error::Validation(
                "the checking view cannot also be held out".into(),
            ));
        }
        let train_views: Vec<usize> = (0..rig.len())
            .filter(|i| *i != checking_index && !holdout.contains(i))
            .collect();
        if train_views.len() < cfg.views_per_step {
            return Err(Error::Validation(format!(
                "{} training poses available, {} requested per step",
                train_views.len(),
                cfg.views_per_step
            )));
        }
        let h = cfg.embed.hidden_res;
        let (hidden_target, hidden_target_chw, bit_target) = match &payload {
            Payload::Image(img) => {
                let resized = img.resize_bilinear(h, h);
                let chw = resized.to_chw();
                (Some(resized), Some(chw), None)
            }
            Payload::Bits(bits) => {
                let row: Vec<T> = bits.iter().map(|b| T::of(*b as f64)).collect();
                let t = Tensor::from_vec(&[1, bits.len()], row)?;
                (None, None, Some(t))
            }
        };
        let null_chw = ImageBuf::filled(h, h, 3, T::of(cfg.null_value)).to_chw();
        let base_hash = scene_hash(&base.cast::<f32>());
        let clean_chw = vec![None; rig.len()];
        Ok(Trainer {
            cfg,
            rig,
            checking_index,
            base,
            base_hash,
            payload,
            store,
            f_h,
            feat_in: Tensor::zeros(&[0]),
            clean_chw,
            hidden_target,
            hidden_target_chw,
            bit_target,
            null_chw,
            guard: DivergenceGuard::new(),
            train_views,
            holdout,
        })
        .and_then(|mut t| {
            t.feat_in = embed::base_features(&t.base, &t.cfg.embed)?;
            Ok(t)
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn holdout_views(&self) -> &[usize] {
        &self.holdout
    }

    pub fn checking_index(&self) -> usize {
        self.checking_index
    }

    /// Runs the generator with the frozen payload tokens and current
    /// parameters, yielding the current steganographic scene.
    pub fn generate_scene(&self) -> Result<GaussianScene<T>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let params = self.store.bound(&vars);
        let feat = tape.constant(self.feat_in.clone());
        let fh = tape.constant(self.f_h.clone());
        let sv = embed::generate_on_tape(&mut tape, &params, &self.base, feat, fh, &self.cfg.embed)?;
        scene_from_tensors(
            tape.value(sv.centers),
            tape.value(sv.log_scales),
            tape.value(sv.rotations),
            tape.value(sv.opacity_logits),
            tape.value(sv.colors),
            self.base.background,
        )
    }

    /// One optimization step: sample poses, render, measure the three
    /// losses, back-propagate the hiding and photometric objectives
    /// separately, mask conflicting coordinates, and apply AdamW.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let step_index = self.store.step_count;
        let mut rng =
            ChaCha8Rng::seed_from_u64(subseed(self.cfg.seed, "train_step").wrapping_add(step_index));
        let poses = self.sample_poses(&mut rng);
        self.ensure_clean(&poses)?;
        self.ensure_clean(&[self.checking_index])?;
        let eval = self.evaluate_step(&poses)?;

        let w = self.cfg.loss;
        let loss_total = total_loss(eval.loss_dec_pos, eval.loss_dec_neg, eval.loss_rgb, &w);
        // The guard aborts before the bad update lands on the parameters.
        self.guard.observe(loss_total)?;

        let n = self.store.len();
        let zeros_like = |g: &Option<Tensor<T>>, shape: &[usize]| -> Tensor<T> {
            match g {
                Some(t) => t.clone(),
                None => Tensor::zeros(shape),
            }
        };
        let mut totals = Vec::with_capacity(n);
        let mut scope_idx = Vec::new();
        let mut scope_rgb = Vec::new();
        let mut scope_dec = Vec::new();
        let harm = self.cfg.harmonization;
        for i in 0..n {
            let shape: Vec<usize> = self.store.group(i).value.shape().to_vec();
            let gr = zeros_like(&eval.g_rgb[i], &shape);
            let gd = zeros_like(&eval.g_dec[i], &shape);
            if harm.enabled && harm.roles().contains(&self.store.group(i).role) {
                scope_idx.push(i);
                scope_rgb.push(gr.clone());
                scope_dec.push(gd.clone());
            }
            let mut total = gd;
            total.axpy(T::of(w.rgb), &gr)?;
            totals.push(total);
        }
        let mask_keep_frac = if harm.enabled {
            let (masks, frac) = harmonize_masks(&scope_rgb, &scope_dec, harm.granularity)?;
            for (k, &i) in scope_idx.iter().enumerate() {
                let t = totals[i].data_mut();
                for (v, m) in t.iter_mut().zip(masks[k].data()) {
                    *v = *v * *m;
                }
            }
            frac
        } else {
            1.0
        };
        for (i, g) in totals.into_iter().enumerate() {
            self.store.set_grad(i, g)?;
        }
        self.store.adamw_step(&self.cfg.adam::<T>(), None)?;

        self.metrics_row(step_index, &eval, loss_total, mask_keep_frac)
    }

    /// Full training loop with optional CSV metrics and checkpoint output.
    /// On divergence the last in-range parameter state is checkpointed
    /// before the error is returned.
    pub fn run(&mut self, metrics_path: Option<&Path>, checkpoint_path: Option<&Path>) -> Result<()> {
        let mut log = match metrics_path {
            Some(p) => Some(MetricsLog::create(p)?),
            None => None,
        };
        let mut last_good: Option<ParamStore<T>> = None;
        for s in 0..self.cfg.steps {
            match self.step() {
                Ok(row) => {
                    if let Some(log) = &mut log {
                        log.append(&row)?;
                    }
                    if self.guard.is_calm() {
                        last_good = Some(self.store.clone());
                    }
                    if let Some(path) = checkpoint_path {
                        let every = self.cfg.checkpoint_every;
                        if every > 0 && (s + 1) % every == 0 {
                            let ck = self.checkpoint()?;
                            save_checkpoint(&ck, path)?;
                        }
                    }
                }
                Err(e) => {
                    if let (Some(path), Some(good)) = (checkpoint_path, last_good.take()) {
                        self.store = good;
                        let ck = self.checkpoint()?;
                        save_checkpoint(&ck, path)?;
                    }
                    return Err(e);
                }
            }
        }
        if let Some(log) = &mut log {
            log.flush()?;
        }
        if let Some(path) = checkpoint_path {
            let ck = self.checkpoint()?;
            save_checkpoint(&ck, path)?;
        }
        Ok(())
    }

    /// Snapshot of everything needed to resume training or recover the
    /// payload later: parameters with optimizer state, the rig, payload
    /// record, frozen tokens, the clean checking render and the current
    /// steganographic scene.
    pub fn checkpoint(&mut self) -> Result<Checkpoint<T>> {
        self.ensure_clean(&[self.checking_index])?;
        let mut extras = vec![(EXTRA_TOKENS.to_string(), self.f_h.clone())];
        match &self.payload {
            Payload::Image(_) => {
                let chw = self.hidden_target_chw.clone().expect("image payload target");
                extras.push((EXTRA_PAYLOAD_IMAGE.to_string(), chw));
            }
            Payload::Bits(bits) => {
                let row: Vec<T> = bits.iter().map(|b| T::of(*b as f64)).collect();
                extras.push((
                    EXTRA_PAYLOAD_BITS.to_string(),
                    Tensor::from_vec(&[bits.len()], row)?,
                ));
            }
        }
        extras.push((
            EXTRA_CLEAN_CHECK.to_string(),
            self.clean_chw[self.checking_index].clone().expect("cached above"),
        ));
        let scene = self.generate_scene()?;
        let (flat, bg) = scene_to_flat(&scene);
        extras.push((EXTRA_SCENE.to_string(), flat));
        extras.push((EXTRA_BACKGROUND.to_string(), bg));
        let (base_flat, _) = scene_to_flat(&self.base);
        extras.push((EXTRA_BASE.to_string(), base_flat));
        Ok(Checkpoint {
            base_scene_hash: self.base_hash,
            seed: self.cfg.seed,
            rig: self.rig.clone(),
            checking_index: self.checking_index,
            config: serde_json::to_value(&self.cfg)?,
            extras,
            store: self.store.clone(),
        })
    }

    /// Post-training report: rendering fidelity on held-out views and the
    /// checking view, plus payload recovery from the current scene.
    pub fn evaluate(&mut self) -> Result<EvalReport<T>> {
        let scene = self.generate_scene()?;
        let opts = self.cfg.render_options::<T>();
        let mut per_view = Vec::with_capacity(self.holdout.len());
        let indices: Vec<usize> = self.holdout.clone();
        self.ensure_clean(&indices)?;
        for &i in &indices {
            let stego = tile_render(&scene, &self.rig.cameras[i], &opts)?;
            let stego_img = rendered_to_image(&stego);
            let clean_img = ImageBuf::from_chw(self.clean_chw[i].as_ref().expect("cached above"))?;
            per_view.push((i, metrics::psnr(&stego_img, &clean_img)?));
        }
        let mean = if per_view.is_empty() {
            None
        } else {
            Some(per_view.iter().map(|(_, p)| p).sum::<f64>() / per_view.len() as f64)
        };
        self.ensure_clean(&[self.checking_index])?;
        let check = tile_render(&scene, &self.rig.cameras[self.checking_index], &opts)?;
        let check_img = rendered_to_image(&check);
        let clean_check =
            ImageBuf::from_chw(self.clean_chw[self.checking_index].as_ref().expect("cached above"))?;
        let render_psnr_checking = metrics::psnr(&check_img, &clean_check)?;
        let ck = self.checkpoint()?;
        let recovery = recover(&ck, &scene)?;
        Ok(EvalReport {
            render_psnr_holdout: per_view,
            render_psnr_holdout_mean: mean,
            render_psnr_checking,
            recovery,
        })
    }

    // -- internals ---------------------------------------------------------

    fn sample_poses(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut pool = self.train_views.clone();
        let k = self.cfg.views_per_step;
        for i in 0..k {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    fn ensure_clean(&mut self, indices: &[usize]) -> Result<()> {
        let opts = self.cfg.render_options::<T>();
        for &i in indices {
            if self.clean_chw[i].is_none() {
                let img = tile_render(&self.base, &self.rig.cameras[i], &opts)?;
                self.clean_chw[i] = Some(rendered_to_chw(&img));
            }
        }
        Ok(())
    }

    fn clean(&self, idx: usize) -> Result<&Tensor<T>> {
        self.clean_chw[idx]
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("clean render cache missing view {idx}")))
    }

    /// Renders, decodes and back-propagates once for each objective; no
    /// parameter moves here.
    fn evaluate_step(&self, poses: &[usize]) -> Result<StepEval<T>> {
        let opts = self.cfg.render_options::<T>();
        let dcfg = self.cfg.decode_cfg();
        let w = self.cfg.loss;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let params = self.store.bound(&vars);
        let feat = tape.constant(self.feat_in.clone());
        let fh = tape.constant(self.f_h.clone());
        let sv = embed::generate_on_tape(&mut tape, &params, &self.base, feat, fh, &self.cfg.embed)?;

        let mut rgb_node = None;
        for &p in poses {
            let r = render_on_tape(&mut tape, &sv, &self.rig.cameras[p], &opts, self.base.background)?;
            let clean = tape.constant(self.clean(p)?.clone());
            let d = tape.mean_abs_diff(r, clean)?;
            rgb_node = Some(match rgb_node {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        let rgb_node = tape.scale(rgb_node.expect("views_per_step >= 1"), T::of(1.0 / poses.len() as f64))?;

        let check = render_on_tape(
            &mut tape,
            &sv,
            &self.rig.cameras[self.checking_index],
            &opts,
            self.base.background,
        )?;
        let clean_check = tape.constant(self.clean(self.checking_index)?.clone());
        // The same corruption is applied to both decoder branches so the
        // null objective stays consistent with the recovery objective.
        let (dec_in_pos, dec_in_neg) = match self.cfg.augmentation {
            Augmentation::Off => (check, clean_check),
            Augmentation::Blur => (
                perturb::blur_on_tape(&mut tape, check, self.cfg.augment_blur_sigma)?,
                perturb::blur_on_tape(&mut tape, clean_check, self.cfg.augment_blur_sigma)?,
            ),
            Augmentation::JpegApprox => (
                perturb::jpeg_on_tape(&mut tape, check, self.cfg.augment_jpeg_quality)?,
                perturb::jpeg_on_tape(&mut tape, clean_check, self.cfg.augment_jpeg_quality)?,
            ),
        };

        let (pos_node, decoded, logits) = match &self.payload {
            Payload::Image(_) => {
                let dec = decode::decode_image_on_tape(&mut tape, &params, dec_in_pos, &dcfg)?;
                let target = tape.constant(self.hidden_target_chw.clone().expect("image payload target"));
                let loss = tape.mean_abs_diff(dec, target)?;
                (loss, Some(tape.value(dec).clone()), None)
            }
            Payload::Bits(bits) => {
                let lg = decode::decode_bits_on_tape(&mut tape, &params, dec_in_pos, &dcfg)?;
                let sliced = tape.slice_cols(lg, 0, bits.len())?;
                let target = tape.constant(self.bit_target.clone().expect("bit payload target"));
                let loss = tape.bce_with_logits(sliced, target)?;
                (loss, None, Some(tape.value(sliced).clone()))
            }
        };

        let dec_neg_img = decode::decode_image_on_tape(&mut tape, &params, dec_in_neg, &dcfg)?;
        let null = tape.constant(self.null_chw.clone());
        let neg_node = tape.mean_abs_diff(dec_neg_img, null)?;

        let pos_w = tape.scale(pos_node, T::of(w.dec_pos))?;
        let neg_w = tape.scale(neg_node, T::of(w.dec_neg))?;
        let dec_node = tape.add(pos_w, neg_w)?;

        let mut dec_grads = tape.backward(dec_node)?;
        let mut rgb_grads = tape.backward(rgb_node)?;
        let n = self.store.len();
        let mut g_rgb = Vec::with_capacity(n);
        let mut g_dec = Vec::with_capacity(n);
        for &v in vars.iter().take(n) {
            g_rgb.push(rgb_grads.take(v));
            g_dec.push(dec_grads.take(v));
        }
        Ok(StepEval {
            loss_rgb: tape.value(rgb_node).item()?.widen(),
            loss_dec_pos: tape.value(pos_node).item()?.widen(),
            loss_dec_neg: tape.value(neg_node).item()?.widen(),
            g_rgb,
            g_dec,
            check_render: tape.value(check).clone(),
            decoded,
            logits,
        })
    }

    fn metrics_row(
        &self,
        step: u64,
        eval: &StepEval<T>,
        loss_total: f64,
        mask_keep_frac: f64,
    ) -> Result<MetricsRow> {
        let check_img = ImageBuf::from_chw(&eval.check_render)?;
        let clean_img = ImageBuf::from_chw(self.clean(self.checking_index)?)?;
        let psnr_render = metrics::psnr(&check_img, &clean_img)?;
        let (mut psnr_hidden, mut ssim_hidden, mut bit_acc) = (None, None, None);
        if let (Some(dec), Some(target)) = (&eval.decoded, &self.hidden_target) {
            let dec_img = ImageBuf::from_chw(dec)?;
            psnr_hidden = Some(metrics::psnr(&dec_img, target)?);
            // Structural similarity needs an 11-pixel window; tiny hidden
            // images simply skip the column.
            ssim_hidden = metrics::ssim(&dec_img, target).ok();
        }
        if let (Some(logits), Payload::Bits(bits)) = (&eval.logits, &self.payload) {
            let probs: Vec<T> = logits.data().iter().map(|&x| crate::tensor::sigmoid(x)).collect();
            let got: Vec<bool> = decode::bits_from_probs(&probs).iter().map(|b| *b == 1).collect();
            let want: Vec<bool> = bits.iter().map(|b| *b == 1).collect();
            bit_acc = Some(metrics::bit_accuracy(&got, &want)?);
        }
        Ok(MetricsRow {
            step,
            loss_total,
            loss_rgb: eval.loss_rgb,
            loss_dec_pos: eval.loss_dec_pos,
            loss_dec_neg: eval.loss_dec_neg,
            psnr_render: Some(psnr_render),
            psnr_hidden,
            ssim_hidden,
            bit_acc,
            mask_keep_frac: Some(mask_keep_frac),
        })
    }
}

// ---------------------------------------------------------------------------
// Recovery and evaluation reports
// ---------------------------------------------------------------------------

/// Output of decoding a scene's checking-view render with a trained
/// checkpoint, with quality metrics against the recorded payload and the
/// false-positive control on the recorded clean render.
#[derive(Debug, Clone)]
pub struct Recovery<T: Scalar> {
    /// Decoded hidden image (image payloads).
    pub hidden: Option<ImageBuf<T>>,
    /// Thresholded payload bits (bit payloads).
    pub bits: Option<Vec<u8>>,
    pub probs: Option<Vec<T>>,
    pub psnr_hidden: Option<f64>,
    pub ssim_hidden: Option<f64>,
    pub bit_acc: Option<f64>,
    /// Decode of the recorded clean checking render.
    pub negative_hidden: Option<ImageBuf<T>>,
    /// Mean absolute distance of the negative decode from the null image.
    pub negative_l1_null: Option<f64>,
    /// Similarity of the negative decode to the hidden target (low is good).
    pub negative_ssim_hidden: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport<T: Scalar> {
    /// (rig index, PSNR against the clean render) per held-out view.
    pub render_psnr_holdout: Vec<(usize, f64)>,
    pub render_psnr_holdout_mean: Option<f64>,
    pub render_psnr_checking: f64,
    pub recovery: Recovery<T>,
}

fn payload_from_extras<T: Scalar>(ck: &Checkpoint<T>) -> Result<Payload<T>> {
    if let Some(img) = ck.extra(EXTRA_PAYLOAD_IMAGE) {
        return Ok(Payload::Image(ImageBuf::from_chw(img)?));
    }
    if let Some(bits) = ck.extra(EXTRA_PAYLOAD_BITS) {
        let v: Vec<u8> = bits
            .data()
            .iter()
            .map(|b| if b.widen() > 0.5 { 1u8 } else { 0u8 })
            .collect();
        return Ok(Payload::Bits(v));
    }
    Err(Error::Validation("checkpoint carries no payload record".into()))
}

/// Renders `scene` at the checkpoint's checking view and decodes it. Also
/// runs the decoder on the recorded clean render as a negative control.
/// Rebuilds the clean base scene recorded in the checkpoint, so evaluation
/// needs no companion files. The background is shared with the stego record.
pub fn base_scene_of<T: Scalar>(ck: &Checkpoint<T>) -> Result<GaussianScene<T>> {
    let flat = ck
        .extra(EXTRA_BASE)
        .ok_or_else(|| Error::Validation("checkpoint carries no base scene record".into()))?;
    let bg = ck
        .extra(EXTRA_BACKGROUND)
        .ok_or_else(|| Error::Validation("checkpoint carries no background record".into()))?;
    scene_from_flat(flat, bg)
}

pub fn recover<T: Scalar>(ck: &Checkpoint<T>, scene: &GaussianScene<T>) -> Result<Recovery<T>> {
    let cam = ck.checking_camera()?;
    let cfg: TrainConfig = serde_json::from_value(ck.config.clone())?;
    cfg.validate()?;
    scene.validate()?;
    let dcfg = cfg.decode_cfg();
    let payload = payload_from_extras(ck)?;
    let rendered = tile_render(scene, cam, &cfg.render_options::<T>())?;
    let render_img = rendered_to_image(&rendered);

    let mut out = Recovery {
        hidden: None,
        bits: None,
        probs: None,
        psnr_hidden: None,
        ssim_hidden: None,
        bit_acc: None,
        negative_hidden: None,
        negative_l1_null: None,
        negative_ssim_hidden: None,
    };
    let hidden_target = match &payload {
        Payload::Image(img) => Some(img.resize_bilinear(dcfg.hidden_res, dcfg.hidden_res)),
        Payload::Bits(_) => None,
    };
    match &payload {
        Payload::Image(_) => {
            let dec = decode::decode_image(&ck.store, &render_img, &dcfg)?;
            let target = hidden_target.as_ref().expect("image payload");
            out.psnr_hidden = Some(metrics::psnr(&dec, target)?);
            out.ssim_hidden = metrics::ssim(&dec, target).ok();
            out.hidden = Some(dec);
        }
        Payload::Bits(bits) => {
            let probs = decode::decode_bits(&ck.store, &render_img, &dcfg, bits.len())?;
            let got = decode::bits_from_probs(&probs);
            let got_b: Vec<bool> = got.iter().map(|b| *b == 1).collect();
            let want_b: Vec<bool> = bits.iter().map(|b| *b == 1).collect();
            out.bit_acc = Some(metrics::bit_accuracy(&got_b, &want_b)?);
            out.bits = Some(got);
            out.probs = Some(probs);
        }
    }
    if let Some(clean) = ck.extra(EXTRA_CLEAN_CHECK) {
        let clean_img = ImageBuf::from_chw(clean)?;
        let neg = decode::decode_image(&ck.store, &clean_img, &dcfg)?;
        let null = ImageBuf::filled(dcfg.hidden_res, dcfg.hidden_res, 3, T::of(cfg.null_value));
        let l1 = neg
            .data()
            .iter()
            .zip(null.data())
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .sum::<f64>()
            / neg.data().len() as f64;
        out.negative_l1_null = Some(l1);
        if let Some(target) = &hidden_target {
            out.negative_ssim_hidden = metrics::ssim(&neg, target).ok();
        }
        out.negative_hidden = Some(neg);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Robustness sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub kind: PerturbKind,
    pub rows: Vec<SweepRow>,
    /// False when the checkpoint has taken no optimization steps; the sweep
    /// still runs but its numbers only describe the untrained decoder.
    pub trained: bool,
}

/// Perturbs the checkpointed scene's checking-view render along one sweep
/// and measures recovery quality at each level. `noise_seed` only matters
/// for the additive-noise family.
pub fn robustness_sweep<T: Scalar>(
    ck: &Checkpoint<T>,
    spec: &PerturbSpec,
    noise_seed: u64,
) -> Result<SweepReport> {
    spec.validate()?;
    let cam = ck.checking_camera()?;
    let cfg: TrainConfig = serde_json::from_value(ck.config.clone())?;
    cfg.validate()?;
    let dcfg = cfg.decode_cfg();
    let payload = payload_from_extras(ck)?;
    let flat = ck
        .extra(EXTRA_SCENE)
        .ok_or_else(|| Error::Validation("checkpoint carries no scene record".into()))?;
    let bg = ck
        .extra(EXTRA_BACKGROUND)
        .ok_or_else(|| Error::Validation("checkpoint carries no background record".into()))?;
    let scene = scene_from_flat(flat, bg)?;
    let rendered = tile_render(&scene, cam, &cfg.render_options::<T>())?;
    let clean_render = rendered_to_image(&rendered);
    let hidden_target = match &payload {
        Payload::Image(img) => Some(img.resize_bilinear(dcfg.hidden_res, dcfg.hidden_res)),
        Payload::Bits(_) => None,
    };
    let mut rows = Vec::with_capacity(spec.values.len());
    for (i, &v) in spec.values.iter().enumerate() {
        let perturbed = perturb::apply(
            &clean_render,
            spec.kind,
            v,
            subseed(noise_seed, "sweep").wrapping_add(i as u64),
        )?;
        let ssim_render = metrics::ssim(&perturbed, &clean_render)?;
        let (mut ssim_hidden, mut psnr_hidden, mut bit_acc) = (None, None, None);
        match &payload {
            Payload::Image(_) => {
                let dec = decode::decode_image(&ck.store, &perturbed, &dcfg)?;
                let target = hidden_target.as_ref().expect("image payload");
                psnr_hidden = Some(metrics::psnr(&dec, target)?);
                ssim_hidden = metrics::ssim(&dec, target).ok();
            }
            Payload::Bits(bits) => {
                let probs = decode::decode_bits(&ck.store, &perturbed, &dcfg, bits.len())?;
                let got: Vec<bool> =
                    decode::bits_from_probs(&probs).iter().map(|b| *b == 1).collect();
                let want: Vec<bool> = bits.iter().map(|b| *b == 1).collect();
                bit_acc = Some(metrics::bit_accuracy(&got, &want)?);
            }
        }
        rows.push(SweepRow { param: v, ssim_render, ssim_hidden, psnr_hidden, bit_acc });
    }
    Ok(SweepReport { kind: spec.kind, rows, trained: ck.store.step_count > 0 })
}

// ---------------------------------------------------------------------------
// Render plumbing
// ---------------------------------------------------------------------------

fn rendered_to_chw<T: Scalar>(img: &crate::render::RenderedImage<T>) -> Tensor<T> {
    let (h, w) = (img.height, img.width);
    let mut chw = vec![T::zero(); 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            chw[c * h * w + i] = img.pixels[i * 3 + c];
        }
    }
    Tensor::from_vec(&[3, h, w], chw).expect("sized above")
}

fn rendered_to_image<T: Scalar>(img: &crate::render::RenderedImage<T>) -> ImageBuf<T> {
    ImageBuf::from_vec(img.width, img.height, 3, img.pixels.clone()).expect("renderer output is dense RGB")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::load_checkpoint;
    use crate::metrics::PSNR_IDENTICAL_DB;

    fn tiny_scene(n: usize, seed: u64) -> GaussianScene<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prims = (0..n)
            .map(|_| GaussianPrim {
                center: [
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                ],
                log_scale: [0.0f32; 3].map(|_| rng.gen_range(-2.2..-1.2)),
                rotation: [1.0, rng.gen_range(-0.3..0.3), 0.1, -0.2],
                opacity_logit: rng.gen_range(-0.5..1.5),
                color: [rng.gen(), rng.gen(), rng.gen()],
            })
            .collect();
        GaussianScene::new(prims, [0.2, 0.25, 0.3])
    }

    fn tiny_rig(count: usize, res: usize) -> CameraRig<f32> {
        CameraRig::orbit(count, 3.0, 35.0, res, res, 45.0).unwrap()
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            views_per_step: 2,
            render_res: 16,
            holdout_views: 1,
            seed: 11,
            tile_size: 8,
            embed: EmbedConfig {
                d_model: 8,
                heads: 1,
                hidden_res: 8,
                patch_size: 4,
                max_bits: 8,
                pe_freqs: 2,
                feat_hidden: 8,
                delta_hidden: 8,
                ..EmbedConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn image_payload(seed: u64) -> Payload<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..8 * 8 * 3).map(|_| rng.gen()).collect();
        Payload::Image(ImageBuf::from_vec(8, 8, 3, data).unwrap())
    }

    fn make_trainer(cfg: TrainConfig, payload: Payload<f32>) -> Trainer<f32> {
        Trainer::new(cfg, tiny_rig(6, 16), 0, tiny_scene(20, 5), payload, None).unwrap()
    }

    #[test]
    fn loss_weights_defaults_and_total() {
        let w = LossWeights::default();
        assert_eq!((w.dec_pos, w.dec_neg, w.rgb), (0.3, 1.0, 0.1));
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 2.6).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        let proj = LossWeights { dec_pos: 1.0, dec_neg: 0.0, rgb: 0.0 };
        assert_eq!(total_loss(0.7, 5.0, 9.0, &proj), 0.7);
    }

    #[test]
    fn loss_weights_reject_invalid() {
        assert!(LossWeights { dec_pos: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights { dec_pos: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(LossWeights { dec_pos: 0.0, dec_neg: 0.0, rgb: 0.0 }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn group_mask_parallel_anti_orthogonal() {
        let t = |v: &[f64]| Tensor::from_vec(&[v.len()], v.to_vec()).unwrap();
        let (m, frac) =
            harmonize_masks(&[t(&[1.0, 2.0])], &[t(&[2.0, 4.0])], MaskGranularity::Group).unwrap();
        assert_eq!(m[0].data(), &[1.0, 1.0]);
        assert_eq!(frac, 1.0);
        let (m, frac) =
            harmonize_masks(&[t(&[1.0, 0.0])], &[t(&[-1.0, 0.0])], MaskGranularity::Group).unwrap();
        assert_eq!(m[0].data(), &[0.0, 0.0]);
        assert_eq!(frac, 0.0);
        let (m, _) =
            harmonize_masks(&[t(&[1.0, 0.0])], &[t(&[0.0, 1.0])], MaskGranularity::Group).unwrap();
        assert_eq!(m[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn element_mask_is_sign_agreement() {
        let t = |v: &[f64]| Tensor::from_vec(&[v.len()], v.to_vec()).unwrap();
        let (m, frac) =
            harmonize_masks(&[t(&[1.0, -1.0])], &[t(&[1.0, 1.0])], MaskGranularity::Element)
                .unwrap();
        assert_eq!(m[0].data(), &[1.0, 0.0]);
        assert_eq!(frac, 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let a: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (m, _) = harmonize_masks(
                &[Tensor::from_vec(&[17], a.clone()).unwrap()],
                &[Tensor::from_vec(&[17], b.clone()).unwrap()],
                MaskGranularity::Element,
            )
            .unwrap();
            for i in 0..17 {
                let want = if a[i] * b[i] > 0.0 { 1.0 } else { 0.0 };
                assert_eq!(m[0].data()[i], want, "element {i}: {} vs {}", a[i], b[i]);
            }
        }
    }

    #[test]
    fn masks_are_invariant_to_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ta = Tensor::from_vec(&[9], a.clone()).unwrap();
            let tb = Tensor::from_vec(&[9], b.clone()).unwrap();
            for granularity in [MaskGranularity::Group, MaskGranularity::Element] {
                let (base, base_frac) =
                    harmonize_masks(&[ta.clone()], &[tb.clone()], granularity).unwrap();
                for (sa, sb) in [(0.5, 3.0), (1e3, 1e-3), (7.0, 7.0)] {
                    let sa_t = ta.map(|v| v * sa);
                    let sb_t = tb.map(|v| v * sb);
                    let (m, frac) = harmonize_masks(&[sa_t], &[sb_t], granularity).unwrap();
                    assert_eq!(m[0].data(), base[0].data());
                    assert_eq!(frac, base_frac);
                }
            }
        }
    }

    #[test]
    fn zero_gradients_keep_coordinates() {
        let zero = Tensor::<f64>::zeros(&[4]);
        let live = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        for granularity in [MaskGranularity::Group, MaskGranularity::Element] {
            let (m, frac) =
                harmonize_masks(&[zero.clone()], &[live.clone()], granularity).unwrap();
            assert_eq!(m[0].data(), &[1.0; 4], "{granularity:?}");
            assert_eq!(frac, 1.0);
        }
    }

    #[test]
    fn mask_shape_mismatch_is_error() {
        let a = Tensor::<f64>::zeros(&[3]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(matches!(
            harmonize_masks(&[a.clone()], &[b], MaskGranularity::Group),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            harmonize_masks(&[a], &[], MaskGranularity::Group),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn guard_trips_after_sustained_blowup() {
        let mut g = DivergenceGuard::new();
        for _ in 0..30 {
            g.observe(1.0).unwrap();
        }
        for i in 0..49 {
            g.observe(1000.0).unwrap_or_else(|e| panic!("tripped early at {i}: {e}"));
            assert!(!g.is_calm());
        }
        let err = g.observe(1000.0).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn guard_resets_when_loss_returns_to_range() {
        let mut g = DivergenceGuard::new();
        for _ in 0..30 {
            g.observe(1.0).unwrap();
        }
        for _ in 0..49 {
            g.observe(1000.0).unwrap();
        }
        g.observe(1.0).unwrap();
        assert!(g.is_calm());
        for _ in 0..49 {
            g.observe(1000.0).unwrap();
        }
    }

    #[test]
    fn guard_rejects_non_finite_loss() {
        let mut g = DivergenceGuard::new();
        assert!(matches!(g.observe(f64::NAN), Err(Error::NonFinite(_))));
        assert!(matches!(g.observe(f64::INFINITY), Err(Error::NonFinite(_))));
    }

    #[test]
    fn scene_flat_round_trip() {
        let scene = tiny_scene(7, 3);
        let (flat, bg) = scene_to_flat(&scene);
        assert_eq!(flat.shape(), &[7, 14]);
        let back = scene_from_flat(&flat, &bg).unwrap();
        assert_eq!(scene, back);
        assert!(scene_from_flat(&Tensor::<f32>::zeros(&[7, 13]), &bg).is_err());
    }

    #[test]
    fn first_step_photometric_loss_is_exactly_zero() {
        let mut tr = make_trainer(tiny_cfg(1), image_payload(9));
        let row = tr.step().unwrap();
        assert_eq!(row.step, 0);
        assert_eq!(row.loss_rgb, 0.0);
        assert_eq!(row.psnr_render, Some(PSNR_IDENTICAL_DB));
        let keep = row.mask_keep_frac.unwrap();
        assert!((0.0..=1.0).contains(&keep));
        assert!(row.loss_total.is_finite() && row.loss_total > 0.0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let mut a = make_trainer(tiny_cfg(3), image_payload(9));
        let mut b = make_trainer(tiny_cfg(3), image_payload(9));
        for _ in 0..3 {
            let ra = a.step().unwrap();
            let rb = b.step().unwrap();
            assert_eq!(ra.to_line(), rb.to_line());
        }
    }

    #[test]
    fn masking_is_inert_at_the_identity_start() {
        // The photometric gradient is exactly zero at step 0, so every
        // group is kept and the masked update must equal the unmasked one.
        let mut on = make_trainer(tiny_cfg(1), image_payload(9));
        let mut off_cfg = tiny_cfg(1);
        off_cfg.harmonization.enabled = false;
        let mut off = make_trainer(off_cfg, image_payload(9));
        let row_on = on.step().unwrap();
        let row_off = off.step().unwrap();
        assert_eq!(row_on.mask_keep_frac, Some(1.0));
        assert_eq!(row_on.to_line(), row_off.to_line());
        for (ga, gb) in on.store.groups().iter().zip(off.store.groups()) {
            assert_eq!(ga.name, gb.name);
            let same = ga
                .value
                .data()
                .iter()
                .zip(gb.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "group {} drifted between mask-on and mask-off", ga.name);
        }
    }

    #[test]
    fn doubling_the_hiding_weight_doubles_its_gradient() {
        let mut cfg_a = tiny_cfg(1);
        cfg_a.loss = LossWeights { dec_pos: 0.3, dec_neg: 0.0, rgb: 0.0 };
        let mut cfg_b = tiny_cfg(1);
        cfg_b.loss = LossWeights { dec_pos: 0.6, dec_neg: 0.0, rgb: 0.0 };
        let mut a = make_trainer(cfg_a, image_payload(9));
        let mut b = make_trainer(cfg_b, image_payload(9));
        a.ensure_clean(&[0, 1]).unwrap();
        b.ensure_clean(&[0, 1]).unwrap();
        let ea = a.evaluate_step(&[1]).unwrap();
        let eb = b.evaluate_step(&[1]).unwrap();
        let mut checked = 0usize;
        for i in 0..a.store.len() {
            if let (Some(ga), Some(gb)) = (&ea.g_dec[i], &eb.g_dec[i]) {
                for (x, y) in ga.data().iter().zip(gb.data()) {
                    let denom = x.abs().max(1e-12);
                    assert!(
                        ((2.0 * x - y).abs() / denom) < 1e-5,
                        "group {} not doubled: {x} vs {y}",
                        a.store.group(i).name
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100, "too few gradient entries compared: {checked}");
    }

    #[test]
    fn bit_payload_reports_accuracy_not_image_metrics() {
        let mut tr = make_trainer(tiny_cfg(1), Payload::Bits(vec![1, 0, 1, 1, 0, 1, 0, 0]));
        let row = tr.step().unwrap();
        let acc = row.bit_acc.expect("bit accuracy column");
        assert!((0.0..=1.0).contains(&acc));
        assert!(row.psnr_hidden.is_none());
        assert!(row.ssim_hidden.is_none());
        assert!(row.loss_dec_pos > 0.0);
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let mut a = make_trainer(tiny_cfg(4), image_payload(9));
        let mut rows_a = Vec::new();
        for _ in 0..4 {
            rows_a.push(a.step().unwrap().to_line());
        }

        let mut b = make_trainer(tiny_cfg(4), image_payload(9));
        b.step().unwrap();
        b.step().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&b.checkpoint().unwrap(), &path).unwrap();
        let ck = load_checkpoint::<f32>(&path).unwrap();
        // The recorded base scene reconstructs bit-exactly, so resuming and
        // evaluation need no companion files.
        assert_eq!(base_scene_of(&ck).unwrap(), tiny_scene(20, 5));
        let mut resumed = Trainer::from_checkpoint(&ck, base_scene_of(&ck).unwrap()).unwrap();
        assert_eq!(resumed.store.step_count, 2);
        assert_eq!(resumed.step().unwrap().to_line(), rows_a[2]);
        assert_eq!(resumed.step().unwrap().to_line(), rows_a[3]);
    }

    #[test]
    fn from_checkpoint_rejects_wrong_base_scene() {
        let mut tr = make_trainer(tiny_cfg(1), image_payload(9));
        let ck = tr.checkpoint().unwrap();
        let err = match Trainer::from_checkpoint(&ck, tiny_scene(20, 6)) {
            Ok(_) => panic!("mismatched base scene accepted"),
            Err(e) => e,
        };
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn recover_reports_positive_and_negative_metrics() {
        let mut tr = make_trainer(tiny_cfg(2), image_payload(9));
        tr.step().unwrap();
        tr.step().unwrap();
        let ck = tr.checkpoint().unwrap();
        let scene = tr.generate_scene().unwrap();
        let rec = recover(&ck, &scene).unwrap();
        assert!(rec.hidden.is_some());
        assert!(rec.psnr_hidden.unwrap().is_finite());
        assert!(rec.negative_l1_null.unwrap() >= 0.0);
        assert!(rec.bits.is_none());
        // 8x8 hidden images are below the structural-similarity window.
        assert!(rec.ssim_hidden.is_none());
    }

    #[test]
    fn recover_requires_a_checking_camera() {
        let mut tr = make_trainer(tiny_cfg(1), image_payload(9));
        let mut ck = tr.checkpoint().unwrap();
        ck.checking_index = 99;
        let scene = tr.generate_scene().unwrap();
        assert!(matches!(recover(&ck, &scene), Err(Error::Validation(_))));
    }

    #[test]
    fn robustness_sweep_runs_over_blur_levels() {
        let mut tr = make_trainer(tiny_cfg(1), image_payload(9));
        tr.step().unwrap();
        let ck = tr.checkpoint().unwrap();
        let spec = PerturbSpec { kind: PerturbKind::Blur, values: vec![0.0, 1.0] };
        let report = robustness_sweep(&ck, &spec, 123).unwrap();
        assert!(report.trained);
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].param, 0.0);
        assert!((report.rows[0].ssim_render - 1.0).abs() < 1e-9);
        assert!(report.rows[1].ssim_render < 1.0);
        assert!(report.rows.iter().all(|r| r.psnr_hidden.unwrap().is_finite()));
    }

    #[test]
    fn construction_rejects_inconsistent_setups() {
        let cfg = tiny_cfg(1);
        let scene = tiny_scene(20, 5);
        let bad_check = Trainer::new(cfg.clone(), tiny_rig(6, 16), 9, scene.clone(), image_payload(9), None);
        assert!(matches!(bad_check, Err(Error::Validation(_))));

        // Checking view inside the held-out tail.
        let held_out_check =
            Trainer::new(cfg.clone(), tiny_rig(6, 16), 5, scene.clone(), image_payload(9), None);
        assert!(matches!(held_out_check, Err(Error::Validation(_))));

        let mut greedy = cfg.clone();
        greedy.views_per_step = 10;
        let too_many =
            Trainer::new(greedy, tiny_rig(6, 16), 0, scene.clone(), image_payload(9), None);
        assert!(matches!(too_many, Err(Error::Validation(_))));

        // Rig rendering at a different resolution than the config.
        let wrong_res = Trainer::new(cfg, tiny_rig(6, 32), 0, scene, image_payload(9), None);
        assert!(matches!(wrong_res, Err(Error::Validation(_))));
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(TrainConfig { steps: 0, ..tiny_cfg(1) }.validate().is_err());
        assert!(TrainConfig { views_per_step: 0, ..tiny_cfg(1) }.validate().is_err());
        assert!(TrainConfig { null_value: 1.5, ..tiny_cfg(1) }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..tiny_cfg(1) }.validate().is_err());
        assert!(TrainConfig { tile_size: 10, ..tiny_cfg(1) }.validate().is_err());
        // Hidden resolution must divide half the render resolution.
        let mut bad = tiny_cfg(1);
        bad.render_res = 24;
        assert!(bad.validate().is_err());
        assert!(tiny_cfg(1).validate().is_ok());
    }

    #[test]
    fn augmentation_modes_run_a_step() {
        for aug in [Augmentation::Blur, Augmentation::JpegApprox] {
            let mut cfg = tiny_cfg(1);
            cfg.augmentation = aug;
            let mut tr = make_trainer(cfg, image_payload(9));
            let row = tr.step().unwrap();
            assert!(row.loss_total.is_finite(), "{aug:?}");
        }
    }

    #[test]
    fn run_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("metrics.csv");
        let ckpt = dir.path().join("run.ckpt");
        let mut tr = make_trainer(tiny_cfg(2), image_payload(9));
        tr.run(Some(&csv), Some(&ckpt)).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], crate::io::CSV_HEADER);
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("1,"));
        let ck = load_checkpoint::<f32>(&ckpt).unwrap();
        assert_eq!(ck.store.step_count, 2);
        assert!(ck.extra(EXTRA_SCENE).is_some());
        assert!(ck.extra(EXTRA_CLEAN_CHECK).is_some());
    }
}
