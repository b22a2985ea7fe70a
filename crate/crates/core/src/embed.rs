//! Payload embedding: encodes the hidden payload into feature tokens,
//! injects them into per-primitive features via cross-attention, and decodes
//! the result into bounded attribute deltas applied to a fixed base scene.
//!
//! Both networks start as an exact identity: the injector's output projection
//! and the delta head's final layer are zero-initialized, so the generated
//! scene equals the base scene bit-for-bit until training moves the weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::num::{subseed, Scalar};
use crate::render::{GaussianScene, SceneVars, LOG_SCALE_MAX, LOG_SCALE_MIN};
use crate::tensor::{
    conv2d_shape, cross_attention, im2col, matmul, transpose, AttentionConfig, Bound,
    ParamStore, Role, Tape, Tensor, Var,
};

/// What gets hidden in the scene.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload<T> {
    /// An RGB image; resized to the configured hidden resolution.
    Image(ImageBuf<T>),
    /// A bit string (entries 0/1), at most `max_bits` long.
    Bits(Vec<u8>),
}

impl<T: Scalar> Payload<T> {
    pub fn validate(&self, cfg: &EmbedConfig) -> Result<()> {
        match self {
            Payload::Image(img) => {
                if img.width() == 0 || img.height() == 0 {
                    return Err(Error::Validation("empty payload image".into()));
                }
                if img.channels() != 3 {
                    return Err(Error::Validation(format!(
                        "payload image must be RGB, got {} channels",
                        img.channels()
                    )));
                }
            }
            Payload::Bits(bits) => {
                if bits.is_empty() {
                    return Err(Error::Validation("empty bit payload".into()));
                }
                if bits.len() > cfg.max_bits {
                    return Err(Error::Validation(format!(
                        "{} bits exceed the configured maximum {}",
                        bits.len(),
                        cfg.max_bits
                    )));
                }
                if bits.iter().any(|b| *b > 1) {
                    return Err(Error::Validation("bit payload entries must be 0 or 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// How payload tokens are merged into the per-primitive features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    CrossAttention,
    ConcatMlp,
}

/// Sizes and switches for the embedding networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Token width shared by payload and primitive features.
    pub d_model: usize,
    pub heads: usize,
    /// Payload image side length after resizing.
    pub hidden_res: usize,
    /// Patch side for the payload token grid.
    pub patch_size: usize,
    /// Bit-head capacity; bit payloads may be shorter.
    pub max_bits: usize,
    /// Sinusoidal position-encoding frequencies on primitive centers.
    pub pe_freqs: usize,
    /// Hidden width of the per-primitive feature encoder.
    pub feat_hidden: usize,
    /// Hidden width of the delta head.
    pub delta_hidden: usize,
    pub injection: Injection,
    /// Which attribute deltas the generator may emit.
    pub delta_color: bool,
    pub delta_opacity: bool,
    pub delta_scale: bool,
    pub delta_center: bool,
    /// Per-field delta bounds (applied through tanh).
    pub cap_color: f64,
    pub cap_opacity: f64,
    pub cap_scale: f64,
    /// Center cap as a fraction of scene diameter.
    pub cap_center_frac: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            d_model: 32,
            heads: 1,
            hidden_res: 64,
            patch_size: 8,
            max_bits: 128,
            pe_freqs: 4,
            feat_hidden: 64,
            delta_hidden: 64,
            injection: Injection::CrossAttention,
            delta_color: true,
            delta_opacity: true,
            delta_scale: false,
            delta_center: false,
            cap_color: 0.2,
            cap_opacity: 1.0,
            cap_scale: 0.1,
            cap_center_frac: 0.01,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.patch_size == 0 || self.hidden_res % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "hidden resolution {} must be a multiple of patch size {}",
                self.hidden_res, self.patch_size
            )));
        }
        if self.max_bits == 0 {
            return Err(Error::Config("max_bits must be positive".into()));
        }
        if !(self.delta_color || self.delta_opacity || self.delta_scale || self.delta_center) {
            return Err(Error::Config("at least one delta channel must be enabled".into()));
        }
        for (cap, what) in [
            (self.cap_color, "cap_color"),
            (self.cap_opacity, "cap_opacity"),
            (self.cap_scale, "cap_scale"),
            (self.cap_center_frac, "cap_center_frac"),
        ] {
            if !(cap > 0.0) || !cap.is_finite() {
                return Err(Error::Config(format!("{what} must be positive, got {cap}")));
            }
        }
        Ok(())
    }

    /// Number of payload tokens for an image payload.
    pub fn image_tokens(&self) -> usize {
        let side = self.hidden_res / self.patch_size;
        side * side
    }

    /// Per-primitive raw feature width fed to the feature encoder.
    pub fn feat_in_width(&self) -> usize {
        // 14 raw attributes + sin/cos position encoding on the 3 center axes.
        14 + 6 * self.pe_freqs
    }

    /// Delta-head output width given the enabled channels.
    pub fn delta_width(&self) -> usize {
        let mut w = 0;
        if self.delta_color {
            w += 3;
        }
        if self.delta_opacity {
            w += 1;
        }
        if self.delta_scale {
            w += 3;
        }
        if self.delta_center {
            w += 3;
        }
        w
    }
}

/// Where payload tokens come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderMode<T> {
    /// Frozen random patch embedder seeded at construction.
    BuiltinRandom,
    /// Tokens imported from a feature file (e.g. a real vision backbone).
    FileImport(Tensor<T>),
}

/// Frozen payload tokenizer. Never trained; not part of any `ParamStore`.
#[derive(Debug, Clone)]
pub struct HiddenEncoder<T> {
    cfg: EmbedConfig,
    mode: EncoderMode<T>,
    /// Patch embedding `[d, 3*patch*patch]`.
    patch_w: Tensor<T>,
    /// Patch bias `[1, d]`.
    patch_b: Tensor<T>,
    /// Bit-token lift `[max_bits, d]`.
    bit_lift: Tensor<T>,
}

impl<T: Scalar> HiddenEncoder<T> {
    pub fn new(cfg: &EmbedConfig, seed: u64, mode: EncoderMode<T>) -> Result<Self> {
        cfg.validate()?;
        if let EncoderMode::FileImport(tokens) = &mode {
            if tokens.shape().len() != 2 || tokens.shape()[1] != cfg.d_model {
                return Err(Error::Shape(format!(
                    "imported tokens {:?} do not match d_model {}",
                    tokens.shape(),
                    cfg.d_model
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "hidden_encoder"));
        let k = 3 * cfg.patch_size * cfg.patch_size;
        let lim = 1.0 / (k as f64).sqrt();
        let patch_w = Tensor::uniform(&[cfg.d_model, k], &mut rng, -lim, lim);
        let patch_b = Tensor::zeros(&[1, cfg.d_model]);
        let lim_b = 1.0 / (cfg.max_bits as f64).sqrt();
        let bit_lift = Tensor::uniform(&[cfg.max_bits, cfg.d_model], &mut rng, -lim_b, lim_b);
        Ok(HiddenEncoder { cfg: cfg.clone(), mode, patch_w, patch_b, bit_lift })
    }

    /// Payload to feature tokens `[tokens, d]`. Deterministic; computed off
    /// the tape because the encoder is frozen.
    pub fn extract(&self, payload: &Payload<T>) -> Result<Tensor<T>> {
        payload.validate(&self.cfg)?;
        if let EncoderMode::FileImport(tokens) = &self.mode {
            return Ok(tokens.clone());
        }
        match payload {
            Payload::Image(img) => {
                let res = self.cfg.hidden_res;
                let p = self.cfg.patch_size;
                let chw = img.resize_bilinear(res, res).to_chw();
                // Non-overlapping patch embedding = conv with kernel=stride=p.
                let cols = im2col(chw.data(), 3, res, res, p, p, p, 0);
                let (oh, ow) = conv2d_shape(res, res, p, p, p, 0);
                let toks = matmul(
                    self.patch_w.data(),
                    &cols,
                    self.cfg.d_model,
                    3 * p * p,
                    oh * ow,
                );
                let mut out = transpose(&toks, self.cfg.d_model, oh * ow);
                for row in out.chunks_exact_mut(self.cfg.d_model) {
                    for (v, b) in row.iter_mut().zip(self.patch_b.data()) {
                        *v += *b;
                    }
                }
                let t = Tensor::from_vec(&[oh * ow, self.cfg.d_model], out)?;
                t.ensure_finite("payload tokens")?;
                Ok(t)
            }
            Payload::Bits(bits) => {
                // Signed bit row (+1/-1, zero padding) lifted to one token.
                let mut row = vec![T::zero(); self.cfg.max_bits];
                for (i, b) in bits.iter().enumerate() {
                    row[i] = if *b == 1 { T::one() } else { -T::one() };
                }
                let tok = matmul(&row, self.bit_lift.data(), 1, self.cfg.max_bits, self.cfg.d_model);
                let t = Tensor::from_vec(&[1, self.cfg.d_model], tok)?;
                t.ensure_finite("payload tokens")?;
                Ok(t)
            }
        }
    }
}

/// Registers the injector (`phi.*`) and generator (`theta.*`) parameter
/// groups. The zero-initialized groups make generation an exact identity.
pub fn init_embed_params<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "embed_params"));
    let mut uni = |shape: &[usize], fan_in: usize| {
        let lim = 1.0 / (fan_in as f64).sqrt();
        Tensor::uniform(shape, &mut rng, -lim, lim)
    };

    match cfg.injection {
        Injection::CrossAttention => {
            store.add("phi.w_q", Role::Phi, uni(&[d, d], d))?;
            store.add("phi.w_k", Role::Phi, uni(&[d, d], d))?;
            store.add("phi.w_v", Role::Phi, uni(&[d, d], d))?;
            store.add("phi.w_out", Role::Phi, Tensor::zeros(&[d, d]))?;
        }
        Injection::ConcatMlp => {
            store.add("phi.mlp_w1", Role::Phi, uni(&[2 * d, d], 2 * d))?;
            store.add("phi.mlp_b1", Role::Phi, Tensor::zeros(&[d]))?;
            store.add("phi.w_out", Role::Phi, Tensor::zeros(&[d, d]))?;
        }
    }

    let fin = cfg.feat_in_width();
    store.add("theta.enc_w1", Role::Theta, uni(&[fin, cfg.feat_hidden], fin))?;
    store.add("theta.enc_b1", Role::Theta, Tensor::zeros(&[cfg.feat_hidden]))?;
    store.add("theta.enc_gamma", Role::Theta, Tensor::full(&[cfg.feat_hidden], T::one()))?;
    store.add("theta.enc_beta", Role::Theta, Tensor::zeros(&[cfg.feat_hidden]))?;
    store.add("theta.enc_w2", Role::Theta, uni(&[cfg.feat_hidden, d], cfg.feat_hidden))?;
    store.add("theta.head_w1", Role::Theta, uni(&[d, cfg.delta_hidden], d))?;
    store.add("theta.head_b1", Role::Theta, Tensor::zeros(&[cfg.delta_hidden]))?;
    store.add(
        "theta.head_w2",
        Role::Theta,
        Tensor::zeros(&[cfg.delta_hidden, cfg.delta_width()]),
    )?;
    store.add("theta.head_b2", Role::Theta, Tensor::zeros(&[cfg.delta_width()]))?;
    Ok(())
}

/// Raw per-primitive features: attributes plus sinusoidal encoding of the
/// center. Constant during training (the base scene is fixed).
pub fn base_features<T: Scalar>(base: &GaussianScene<T>, cfg: &EmbedConfig) -> Result<Tensor<T>> {
    if base.is_empty() {
        return Err(Error::Validation("base scene has no primitives".into()));
    }
    let n = base.len();
    let width = cfg.feat_in_width();
    let mut data = Vec::with_capacity(n * width);
    for p in &base.prims {
        data.extend_from_slice(&p.center);
        data.extend_from_slice(&p.log_scale);
        data.extend_from_slice(&p.rotation);
        data.push(p.opacity_logit);
        data.extend_from_slice(&p.color);
        for f in 0..cfg.pe_freqs {
            let w = T::of((1 << f) as f64);
            for axis in 0..3 {
                let x = p.center[axis] * w;
                data.push(x.sin());
                data.push(x.cos());
            }
        }
    }
    let t = Tensor::from_vec(&[n, width], data)?;
    t.ensure_finite("base features")?;
    Ok(t)
}

/// Per-primitive feature tokens `f_I` from the raw base features.
fn encode_features<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound<T>,
    feat_in: Var,
) -> Result<Var> {
    let h = tape.matmul(feat_in, params.var("theta.enc_w1")?)?;
    let h = tape.add_bias_row(h, params.var("theta.enc_b1")?)?;
    let h = tape.layer_norm(
        h,
        params.var("theta.enc_gamma")?,
        params.var("theta.enc_beta")?,
        T::of(1e-5),
    )?;
    let h = tape.relu(h)?;
    tape.matmul(h, params.var("theta.enc_w2")?)
}

/// Residual payload injection: `f_I + W_out * merge(f_I, f_H)`.
pub fn inject<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound<T>,
    f_i: Var,
    f_h: Var,
    cfg: &EmbedConfig,
) -> Result<Var> {
    let delta = match cfg.injection {
        Injection::CrossAttention => {
            let att = cross_attention(
                tape,
                f_i,
                f_h,
                params.var("phi.w_q")?,
                params.var("phi.w_k")?,
                params.var("phi.w_v")?,
                &AttentionConfig { d_model: cfg.d_model, heads: cfg.heads },
            )?;
            tape.matmul(att, params.var("phi.w_out")?)?
        }
        Injection::ConcatMlp => {
            // Mean payload token broadcast to every primitive row.
            let t = tape.shape(f_h)[0];
            let n = tape.shape(f_i)[0];
            let pool = tape.constant(Tensor::full(&[1, t], T::one() / T::of(t as f64)));
            let mean_tok = tape.matmul(pool, f_h)?;
            let ones = tape.constant(Tensor::full(&[n, 1], T::one()));
            let spread = tape.matmul(ones, mean_tok)?;
            let cat = tape.concat(f_i, spread, 1)?;
            let h = tape.matmul(cat, params.var("phi.mlp_w1")?)?;
            let h = tape.add_bias_row(h, params.var("phi.mlp_b1")?)?;
            let h = tape.relu(h)?;
            tape.matmul(h, params.var("phi.w_out")?)?
        }
    };
    tape.add(f_i, delta)
}

/// Builds the steganographic scene on the tape: base attributes plus bounded
/// deltas predicted from the injected features. Returns the attribute vars;
/// disabled channels pass the base constants through untouched.
pub fn generate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound<T>,
    base: &GaussianScene<T>,
    feat_in: Var,
    f_h: Var,
    cfg: &EmbedConfig,
) -> Result<SceneVars> {
    cfg.validate()?;
    let base_vars = SceneVars::constants(tape, base);
    let f_i = encode_features(tape, params, feat_in)?;
    let f_mod = inject(tape, params, f_i, f_h, cfg)?;
    let h = tape.matmul(f_mod, params.var("theta.head_w1")?)?;
    let h = tape.add_bias_row(h, params.var("theta.head_b1")?)?;
    let h = tape.relu(h)?;
    let raw = tape.matmul(h, params.var("theta.head_w2")?)?;
    let raw = tape.add_bias_row(raw, params.var("theta.head_b2")?)?;

    let mut col = 0;
    let mut take = |tape: &mut Tape<T>, width: usize| -> Result<Var> {
        let v = tape.slice_cols(raw, col, width)?;
        col += width;
        Ok(v)
    };

    let mut out = base_vars;
    if cfg.delta_color {
        let d = take(tape, 3)?;
        let d = tape.tanh(d)?;
        let d = tape.scale(d, T::of(cfg.cap_color))?;
        let c = tape.add(base_vars.colors, d)?;
        out.colors = tape.clamp(c, T::zero(), T::one())?;
    }
    if cfg.delta_opacity {
        let d = take(tape, 1)?;
        let d = tape.tanh(d)?;
        let d = tape.scale(d, T::of(cfg.cap_opacity))?;
        out.opacity_logits = tape.add(base_vars.opacity_logits, d)?;
    }
    if cfg.delta_scale {
        let d = take(tape, 3)?;
        let d = tape.tanh(d)?;
        let d = tape.scale(d, T::of(cfg.cap_scale))?;
        let s = tape.add(base_vars.log_scales, d)?;
        out.log_scales = tape.clamp(s, T::of(LOG_SCALE_MIN), T::of(LOG_SCALE_MAX))?;
    }
    if cfg.delta_center {
        let cap = T::of(cfg.cap_center_frac) * base.diameter();
        let d = take(tape, 3)?;
        let d = tape.tanh(d)?;
        let d = tape.scale(d, cap)?;
        out.centers = tape.add(base_vars.centers, d)?;
    }
    Ok(out)
}

/// Convenience wrapper: run generation off-tape and materialize the scene.
pub fn generate<T: Scalar>(
    store: &ParamStore<T>,
    base: &GaussianScene<T>,
    encoder: &HiddenEncoder<T>,
    payload: &Payload<T>,
    cfg: &EmbedConfig,
) -> Result<GaussianScene<T>> {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let params = store.bound(&vars);
    let feat = tape.constant(base_features(base, cfg)?);
    let f_h = tape.constant(encoder.extract(payload)?);
    let out = generate_on_tape(&mut tape, &params, base, feat, f_h, cfg)?;
    crate::render::scene_from_tensors(
        tape.value(out.centers),
        tape.value(out.log_scales),
        tape.value(out.rotations),
        tape.value(out.opacity_logits),
        tape.value(out.colors),
        base.background,
    )
}
