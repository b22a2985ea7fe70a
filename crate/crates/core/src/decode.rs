//! Recovery decoder: a small U-Net that maps a rendered checking-view image
//! to the reconstructed hidden image, plus a pooled head emitting bit-payload
//! logits. All weights live in a `ParamStore` under the `Psi` role.
//!
//! Layout: three stride-2 conv stages (widths 16/32/64), then a mirrored
//! decoder with skip connections back up to half the render resolution,
//! where the sigmoid image head emits the hidden-resolution output. The bit
//! head global-average-pools the bottleneck.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::num::{subseed, Scalar};
use crate::tensor::{Bound, ParamStore, Role, Tape, Tensor, Var};

/// Channel widths of the three encoder stages.
const W1: usize = 16;
const W2: usize = 32;
const W3: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Expected input render side length.
    pub render_res: usize,
    /// Output side length of the reconstructed hidden image.
    pub hidden_res: usize,
    /// Width of the bit head.
    pub max_bits: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { render_res: 128, hidden_res: 64, max_bits: 128 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.render_res == 0 || self.render_res % 8 != 0 {
            return Err(Error::Config(format!(
                "render resolution must be a positive multiple of 8, got {}",
                self.render_res
            )));
        }
        let half = self.render_res / 2;
        if self.hidden_res == 0 || half % self.hidden_res != 0 {
            return Err(Error::Config(format!(
                "hidden resolution {} must divide half the render resolution {half}",
                self.hidden_res
            )));
        }
        if self.max_bits == 0 {
            return Err(Error::Config("max_bits must be positive".into()));
        }
        Ok(())
    }

    /// Stride of the image head (from half render resolution down to hidden).
    fn head_stride(&self) -> usize {
        (self.render_res / 2) / self.hidden_res
    }
}

/// Registers the decoder parameter groups (`psi.*`).
pub fn init_decoder_params<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "decoder"));
    let mut uni = |shape: &[usize], fan_in: usize| {
        let lim = 1.0 / (fan_in as f64).sqrt();
        Tensor::uniform(shape, &mut rng, -lim, lim)
    };
    store.add("psi.down1_w", Role::Psi, uni(&[W1, 3, 3, 3], 3 * 9))?;
    store.add("psi.down1_b", Role::Psi, Tensor::zeros(&[W1]))?;
    store.add("psi.down2_w", Role::Psi, uni(&[W2, W1, 3, 3], W1 * 9))?;
    store.add("psi.down2_b", Role::Psi, Tensor::zeros(&[W2]))?;
    store.add("psi.down3_w", Role::Psi, uni(&[W3, W2, 3, 3], W2 * 9))?;
    store.add("psi.down3_b", Role::Psi, Tensor::zeros(&[W3]))?;
    store.add("psi.up1_w", Role::Psi, uni(&[W3, W2, 4, 4], W3 * 16))?;
    store.add("psi.up1_b", Role::Psi, Tensor::zeros(&[W2]))?;
    store.add("psi.fuse1_w", Role::Psi, uni(&[W2, 2 * W2, 3, 3], 2 * W2 * 9))?;
    store.add("psi.fuse1_b", Role::Psi, Tensor::zeros(&[W2]))?;
    store.add("psi.up2_w", Role::Psi, uni(&[W2, W1, 4, 4], W2 * 16))?;
    store.add("psi.up2_b", Role::Psi, Tensor::zeros(&[W1]))?;
    store.add("psi.fuse2_w", Role::Psi, uni(&[W1, 2 * W1, 3, 3], 2 * W1 * 9))?;
    store.add("psi.fuse2_b", Role::Psi, Tensor::zeros(&[W1]))?;
    store.add("psi.img_w", Role::Psi, uni(&[3, W1, 3, 3], W1 * 9))?;
    store.add("psi.img_b", Role::Psi, Tensor::zeros(&[3]))?;
    store.add("psi.bit_w", Role::Psi, uni(&[W3, cfg.max_bits], W3))?;
    store.add("psi.bit_b", Role::Psi, Tensor::zeros(&[cfg.max_bits]))?;
    Ok(())
}

fn conv_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound<T>,
    x: Var,
    w: &str,
    b: &str,
    stride: usize,
) -> Result<Var> {
    let y = tape.conv2d(x, params.var(w)?, stride, 1)?;
    let y = tape.add_bias_chan(y, params.var(b)?)?;
    tape.relu(y)
}

/// Shared trunk. Returns `(skip1, skip2, bottleneck)`:
/// skip1 `[16, r/2, r/2]`, skip2 `[32, r/4, r/4]`, bottleneck `[64, r/8, r/8]`.
fn encode_trunk<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound<T>,
    render: Var,
    cfg: &DecodeConfig,
) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(render).to_vec();
    if shape != [3, cfg.render_res, cfg.render_res] {
        return Err(Error::Shape(format!(
            "decoder expects [3, {r}, {r}], got {shape:?}",
            r = cfg.render_res
        )));
    }
    let e1 = conv_block(tape, params, render, "psi.down1_w", "psi.down1_b", 2)?;
    let e2 = conv_block(tape, params, e1, "psi.down2_w", "psi.down2_b", 2)?;
    let e3 = conv_block(tape, params, e2, "psi.down3_w", "psi.down3_b", 2)?;
    Ok((e1, e2, e3))
}

/// Decoded hidden image on the tape: `[3, hidden, hidden]`, values in (0,1).
pub fn decode_image_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound<T>,
    render: Var,
    cfg: &DecodeConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (e1, e2, e3) = encode_trunk(tape, params, render, cfg)?;
    let u1 = tape.conv2d_transpose(e3, params.var("psi.up1_w")?, 2, 1)?;
    let u1 = tape.add_bias_chan(u1, params.var("psi.up1_b")?)?;
    let u1 = tape.relu(u1)?;
    let c1 = tape.concat(u1, e2, 0)?;
    let d1 = conv_block(tape, params, c1, "psi.fuse1_w", "psi.fuse1_b", 1)?;
    let u2 = tape.conv2d_transpose(d1, params.var("psi.up2_w")?, 2, 1)?;
    let u2 = tape.add_bias_chan(u2, params.var("psi.up2_b")?)?;
    let u2 = tape.relu(u2)?;
    let c2 = tape.concat(u2, e1, 0)?;
    let d2 = conv_block(tape, params, c2, "psi.fuse2_w", "psi.fuse2_b", 1)?;
    let img = tape.conv2d(d2, params.var("psi.img_w")?, cfg.head_stride(), 1)?;
    let img = tape.add_bias_chan(img, params.var("psi.img_b")?)?;
    tape.sigmoid(img)
}

/// Bit-payload logits on the tape: `[1, max_bits]`.
pub fn decode_bits_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound<T>,
    render: Var,
    cfg: &DecodeConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (_, _, e3) = encode_trunk(tape, params, render, cfg)?;
    let pooled = tape.global_avg_pool(e3)?;
    let logits = tape.matmul(pooled, params.var("psi.bit_w")?)?;
    tape.add_bias_row(logits, params.var("psi.bit_b")?)
}

/// Off-tape image decode.
pub fn decode_image<T: Scalar>(
    store: &ParamStore<T>,
    render: &ImageBuf<T>,
    cfg: &DecodeConfig,
) -> Result<ImageBuf<T>> {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let params = store.bound(&vars);
    let x = tape.constant(render.to_chw());
    let out = decode_image_on_tape(&mut tape, &params, x, cfg)?;
    ImageBuf::from_chw(tape.value(out))
}

/// Off-tape bit decode: probabilities for the first `len` bits.
pub fn decode_bits<T: Scalar>(
    store: &ParamStore<T>,
    render: &ImageBuf<T>,
    cfg: &DecodeConfig,
    len: usize,
) -> Result<Vec<T>> {
    if len == 0 || len > cfg.max_bits {
        return Err(Error::Validation(format!(
            "requested {len} bits, head width is {}",
            cfg.max_bits
        )));
    }
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let params = store.bound(&vars);
    let x = tape.constant(render.to_chw());
    let logits = decode_bits_on_tape(&mut tape, &params, x, cfg)?;
    Ok(tape.value(logits).data()[..len]
        .iter()
        .map(|&z| crate::tensor::sigmoid(z))
        .collect())
}

/// Probability threshold: strictly above 0.5 reads as 1, a tie reads as 0.
pub fn bits_from_probs<T: Scalar>(probs: &[T]) -> Vec<u8> {
    probs
        .iter()
        .map(|p| if *p > T::of(0.5) { 1 } else { 0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn store128() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_decoder_params(&mut s, &DecodeConfig::default(), 77).unwrap();
        s
    }

    fn random_render(seed: u64, res: usize) -> ImageBuf<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuf::new(res, res, 3);
        for v in img.data_mut() {
            *v = rng.gen();
        }
        img
    }

    #[test]
    fn image_decode_shape_and_range() {
        let store = store128();
        let cfg = DecodeConfig::default();
        let out = decode_image(&store, &random_render(1, 128), &cfg).unwrap();
        assert_eq!((out.width(), out.height(), out.channels()), (64, 64, 3));
        for &v in out.data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid output {v}");
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let store = store128();
        let cfg = DecodeConfig::default();
        let a = decode_image(&store, &random_render(2, 128), &cfg).unwrap();
        let b = decode_image(&store, &random_render(2, 128), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_resolution_rejected() {
        let store = store128();
        let cfg = DecodeConfig::default();
        assert!(decode_image(&store, &random_render(1, 64), &cfg).is_err());
    }

    #[test]
    fn untrained_bit_probabilities_hover_near_half() {
        let store = store128();
        let cfg = DecodeConfig::default();
        let mut sum = 0.0;
        let mut count = 0;
        for seed in 0..4 {
            let probs = decode_bits(&store, &random_render(seed, 128), &cfg, 128).unwrap();
            for p in probs {
                assert!(p > 0.0 && p < 1.0);
                sum += p;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!((mean - 0.5).abs() < 0.2, "mean probability {mean}");
    }

    #[test]
    fn bit_request_beyond_head_width_rejected() {
        let store = store128();
        let cfg = DecodeConfig::default();
        assert!(decode_bits(&store, &random_render(1, 128), &cfg, 129).is_err());
    }

    #[test]
    fn threshold_tie_reads_zero() {
        assert_eq!(bits_from_probs(&[0.5f64, 0.500001, 0.499999, 1.0, 0.0]), vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(DecodeConfig { render_res: 100, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig { hidden_res: 48, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig { max_bits: 0, ..Default::default() }.validate().is_err());
    }

    /// Gradient of an image-reconstruction loss wrt the input render, checked
    /// against central finite differences. This is the pathway that carries
    /// hiding pressure back into the scene.
    #[test]
    fn render_gradient_matches_finite_differences() {
        let cfg = DecodeConfig { render_res: 16, hidden_res: 8, max_bits: 16 };
        let mut store = ParamStore::<f64>::new();
        init_decoder_params(&mut store, &cfg, 5).unwrap();
        let render = random_render(3, 16);
        let target = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut t = ImageBuf::<f64>::new(8, 8, 3);
            for v in t.data_mut() {
                *v = rng.gen();
            }
            t
        };

        let loss_of = |render: &ImageBuf<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let params = store.bound(&vars);
            let x = tape.constant(render.to_chw());
            let out = decode_image_on_tape(&mut tape, &params, x, &cfg).unwrap();
            let t = tape.constant(target.to_chw());
            let l = tape.mean_abs_diff(out, t).unwrap();
            tape.value(l).item().unwrap()
        };

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let params = store.bound(&vars);
        let x = tape.leaf(render.to_chw());
        let out = decode_image_on_tape(&mut tape, &params, x, &cfg).unwrap();
        let t = tape.constant(target.to_chw());
        let l = tape.mean_abs_diff(out, t).unwrap();
        let grads = tape.backward(l).unwrap();
        let gx = grads.get(x).unwrap();

        let h = 1e-6;
        for probe in [0usize, 100, 400, 767] {
            let mut hi = render.clone();
            hi.data_mut()[probe] += h;
            let mut lo = render.clone();
            lo.data_mut()[probe] -= h;
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
            // CHW index for the HWC probe.
            let (px, c) = (probe / 3, probe % 3);
            let a = gx.data()[c * 256 + px];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
            assert!(rel < 1e-4, "render[{probe}]: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn bit_logits_gradcheck_through_trunk() {
        let cfg = DecodeConfig { render_res: 16, hidden_res: 8, max_bits: 8 };
        let mut store = ParamStore::<f64>::new();
        init_decoder_params(&mut store, &cfg, 6).unwrap();
        let render = random_render(4, 16);
        let targets = Tensor::from_vec(&[1, 8], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
            .unwrap();

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let params = store.bound(&vars);
            let x = tape.constant(render.to_chw());
            let logits = decode_bits_on_tape(&mut tape, &params, x, &cfg).unwrap();
            let t = tape.constant(targets.clone());
            let l = tape.bce_with_logits(logits, t).unwrap();
            tape.value(l).item().unwrap()
        };

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let params = store.bound(&vars);
        let x = tape.constant(render.to_chw());
        let logits = decode_bits_on_tape(&mut tape, &params, x, &cfg).unwrap();
        let t = tape.constant(targets.clone());
        let l = tape.bce_with_logits(logits, t).unwrap();
        let grads = tape.backward(l).unwrap();

        let h = 1e-6;
        for name in ["psi.down1_w", "psi.down3_b", "psi.bit_w", "psi.bit_b"] {
            let idx = store.index_of(name).unwrap();
            let g = grads.get(vars[idx]).unwrap();
            let probe = g.len() / 2;
            let mut hi = store.clone();
            hi.group_mut(idx).value.data_mut()[probe] += h;
            let mut lo = store.clone();
            lo.group_mut(idx).value.data_mut()[probe] -= h;
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
            let a = g.data()[probe];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
            assert!(rel < 1e-4, "{name}[{probe}]: analytic {a} vs fd {fd}");
        }
    }
}
