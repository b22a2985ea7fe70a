//! Hooks the splat renderer into the autodiff tape as a custom operation.

use std::rc::Rc;

use super::{tile_render, Camera, GaussianPrim, GaussianScene, RenderOptions};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::{Tape, TapeOp, Tensor, Var};

/// Tape variables holding the scene attributes as dense tensors:
/// centers `[n,3]`, log-scales `[n,3]`, rotations `[n,4]`,
/// opacity logits `[n,1]`, colors `[n,3]`.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    pub centers: Var,
    pub log_scales: Var,
    pub rotations: Var,
    pub opacity_logits: Var,
    pub colors: Var,
}

impl SceneVars {
    /// Registers every attribute tensor of `scene` as a trainable leaf.
    pub fn leaves<T: Scalar>(tape: &mut Tape<T>, scene: &GaussianScene<T>) -> Self {
        let (c, s, r, o, col) = scene_to_tensors(scene);
        SceneVars {
            centers: tape.leaf(c),
            log_scales: tape.leaf(s),
            rotations: tape.leaf(r),
            opacity_logits: tape.leaf(o),
            colors: tape.leaf(col),
        }
    }

    /// Registers the scene attributes as non-trainable constants.
    pub fn constants<T: Scalar>(tape: &mut Tape<T>, scene: &GaussianScene<T>) -> Self {
        let (c, s, r, o, col) = scene_to_tensors(scene);
        SceneVars {
            centers: tape.constant(c),
            log_scales: tape.constant(s),
            rotations: tape.constant(r),
            opacity_logits: tape.constant(o),
            colors: tape.constant(col),
        }
    }

    pub fn all(&self) -> [Var; 5] {
        [
            self.centers,
            self.log_scales,
            self.rotations,
            self.opacity_logits,
            self.colors,
        ]
    }
}

/// Splits a scene into per-attribute tensors.
pub fn scene_to_tensors<T: Scalar>(
    scene: &GaussianScene<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = scene.prims.len();
    let mut c = Vec::with_capacity(n * 3);
    let mut s = Vec::with_capacity(n * 3);
    let mut r = Vec::with_capacity(n * 4);
    let mut o = Vec::with_capacity(n);
    let mut col = Vec::with_capacity(n * 3);
    for p in &scene.prims {
        c.extend_from_slice(&p.center);
        s.extend_from_slice(&p.log_scale);
        r.extend_from_slice(&p.rotation);
        o.push(p.opacity_logit);
        col.extend_from_slice(&p.color);
    }
    (
        Tensor::from_vec(&[n, 3], c).unwrap(),
        Tensor::from_vec(&[n, 3], s).unwrap(),
        Tensor::from_vec(&[n, 4], r).unwrap(),
        Tensor::from_vec(&[n, 1], o).unwrap(),
        Tensor::from_vec(&[n, 3], col).unwrap(),
    )
}

/// Rebuilds a scene from per-attribute tensors.
pub fn scene_from_tensors<T: Scalar>(
    centers: &Tensor<T>,
    log_scales: &Tensor<T>,
    rotations: &Tensor<T>,
    opacity_logits: &Tensor<T>,
    colors: &Tensor<T>,
    background: [T; 3],
) -> Result<GaussianScene<T>> {
    let n = match centers.shape() {
        [n, 3] => *n,
        s => return Err(Error::Shape(format!("centers must be [n,3], got {s:?}"))),
    };
    let expect = |t: &Tensor<T>, cols: usize, what: &str| -> Result<()> {
        if t.shape() != [n, cols] {
            return Err(Error::Shape(format!(
                "{what} must be [{n},{cols}], got {:?}",
                t.shape()
            )));
        }
        Ok(())
    };
    expect(log_scales, 3, "log scales")?;
    expect(rotations, 4, "rotations")?;
    expect(opacity_logits, 1, "opacity logits")?;
    expect(colors, 3, "colors")?;
    let (c, s, r, o, col) = (
        centers.data(),
        log_scales.data(),
        rotations.data(),
        opacity_logits.data(),
        colors.data(),
    );
    let prims = (0..n)
        .map(|i| GaussianPrim {
            center: [c[i * 3], c[i * 3 + 1], c[i * 3 + 2]],
            log_scale: [s[i * 3], s[i * 3 + 1], s[i * 3 + 2]],
            rotation: [r[i * 4], r[i * 4 + 1], r[i * 4 + 2], r[i * 4 + 3]],
            opacity_logit: o[i],
            color: [col[i * 3], col[i * 3 + 1], col[i * 3 + 2]],
        })
        .collect();
    Ok(GaussianScene { prims, background })
}

struct RenderOp<T> {
    camera: Camera<T>,
    opts: RenderOptions<T>,
    background: [T; 3],
}

impl<T: Scalar> TapeOp<T> for RenderOp<T> {
    fn name(&self) -> &'static str {
        "splat_render"
    }

    fn backward(
        &self,
        upstream: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let scene = scene_from_tensors(
            inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], self.background,
        )?;
        let (h, w) = (self.camera.height, self.camera.width);
        // Upstream arrives planar [3,h,w]; the rasterizer wants interleaved.
        let up = upstream.data();
        let mut hwc = vec![T::zero(); h * w * 3];
        for ch in 0..3 {
            for i in 0..h * w {
                hwc[i * 3 + ch] = up[ch * h * w + i];
            }
        }
        let g = super::render_backward(&scene, &self.camera, &self.opts, &hwc)?;
        let n = scene.prims.len();
        let flat3 = |v: &[[T; 3]]| {
            Tensor::from_vec(&[n, 3], v.iter().flatten().copied().collect()).unwrap()
        };
        let rots =
            Tensor::from_vec(&[n, 4], g.rotations.iter().flatten().copied().collect()).unwrap();
        let ops = Tensor::from_vec(&[n, 1], g.opacity_logits.clone()).unwrap();
        Ok(vec![
            Some(flat3(&g.centers)),
            Some(flat3(&g.log_scales)),
            Some(rots),
            Some(ops),
            Some(flat3(&g.colors)),
        ])
    }
}

/// Renders the scene held in `vars` and records the operation on the tape.
/// Output is planar RGB `[3, height, width]`.
pub fn render_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &SceneVars,
    camera: &Camera<T>,
    opts: &RenderOptions<T>,
    background: [T; 3],
) -> Result<Var> {
    let scene = scene_from_tensors(
        tape.value(vars.centers),
        tape.value(vars.log_scales),
        tape.value(vars.rotations),
        tape.value(vars.opacity_logits),
        tape.value(vars.colors),
        background,
    )?;
    let img = tile_render(&scene, camera, opts)?;
    let (h, w) = (img.height, img.width);
    let mut chw = vec![T::zero(); 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            chw[ch * h * w + i] = img.pixels[i * 3 + ch];
        }
    }
    let out = Tensor::from_vec(&[3, h, w], chw)?;
    let op = Rc::new(RenderOp {
        camera: camera.clone(),
        opts: opts.clone(),
        background,
    });
    tape.custom(&vars.all(), out, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_scene() -> GaussianScene<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let prims = (0..4)
            .map(|_| GaussianPrim {
                center: [
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                ],
                log_scale: [rng.gen_range(-2.5..-1.0); 3],
                rotation: [1.0, rng.gen_range(-0.3..0.3), 0.1, -0.2],
                opacity_logit: rng.gen_range(-1.0..2.0),
                color: [rng.gen(), rng.gen(), rng.gen()],
            })
            .collect();
        GaussianScene::new(prims, [0.05, 0.1, 0.15])
    }

    #[test]
    fn scene_tensor_round_trip() {
        let scene = small_scene();
        let (c, s, r, o, col) = scene_to_tensors(&scene);
        let back = scene_from_tensors(&c, &s, &r, &o, &col, scene.background).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn tape_render_matches_direct_render() {
        let scene = small_scene();
        let cam = Camera::<f64>::look_at(
            [0.0, 0.0, -4.0],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            16,
            16,
            60.0,
        )
        .unwrap();
        let opts = RenderOptions::default();
        let mut tape = Tape::new();
        let vars = SceneVars::leaves(&mut tape, &scene);
        let out = render_on_tape(&mut tape, &vars, &cam, &opts, scene.background).unwrap();
        let direct = tile_render(&scene, &cam, &opts).unwrap();
        let got = tape.value(out);
        assert_eq!(got.shape(), &[3, 16, 16]);
        for i in 0..16 * 16 {
            for ch in 0..3 {
                assert_eq!(got.data()[ch * 256 + i], direct.pixels[i * 3 + ch]);
            }
        }
    }

    /// End-to-end: mean of rendered pixels differentiated through the tape
    /// against finite differences on the scene attributes.
    #[test]
    fn tape_gradients_match_finite_differences() {
        let scene = small_scene();
        let cam = Camera::<f64>::look_at(
            [0.2, -0.1, -4.0],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            10,
            10,
            60.0,
        )
        .unwrap();
        let opts = RenderOptions::<f64> {
            cutoff_sq: None,
            alpha_clamp: None,
            tile_size: 8,
            ..Default::default()
        };

        let loss_of = |scene: &GaussianScene<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars = SceneVars::leaves(&mut tape, scene);
            let img = render_on_tape(&mut tape, &vars, &cam, &opts, scene.background).unwrap();
            let l = tape.mean(img).unwrap();
            tape.value(l).item().unwrap()
        };

        let mut tape = Tape::new();
        let vars = SceneVars::leaves(&mut tape, &scene);
        let img = render_on_tape(&mut tape, &vars, &cam, &opts, scene.background).unwrap();
        let l = tape.mean(img).unwrap();
        let grads = tape.backward(l).unwrap();
        let gc = grads.get(vars.centers).unwrap().clone();
        let go = grads.get(vars.opacity_logits).unwrap().clone();

        let h = 1e-6;
        for i in 0..scene.prims.len() {
            for k in 0..3 {
                let mut hi = scene.clone();
                hi.prims[i].center[k] += h;
                let mut lo = scene.clone();
                lo.prims[i].center[k] -= h;
                let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
                let a = gc.data()[i * 3 + k];
                assert!(
                    (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-5,
                    "center {i}.{k}: {a} vs {fd}"
                );
            }
            let mut hi = scene.clone();
            hi.prims[i].opacity_logit += h;
            let mut lo = scene.clone();
            lo.prims[i].opacity_logit -= h;
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
            let a = go.data()[i];
            assert!(
                (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-5,
                "opacity {i}: {a} vs {fd}"
            );
        }
    }
}
