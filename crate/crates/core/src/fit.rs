//! Fits a fixed-count Gaussian scene to posed RGB images by L1 photometric
//! descent through the differentiable renderer. Initialization rejection-
//! samples a visual hull: candidate points must sit inside every camera
//! frustum and project onto non-background pixels in every view. No
//! primitives are added or removed during descent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::num::{subseed, Scalar};
use crate::render::{
    render_on_tape, scene_from_tensors, scene_to_tensors, Camera, CameraRig, GaussianPrim,
    GaussianScene, RenderOptions, SceneVars,
};
use crate::tensor::{AdamWConfig, ParamStore, Role, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub prim_count: usize,
    /// Zero steps returns the raw initialization.
    pub steps: usize,
    pub views_per_step: usize,
    pub lr: f64,
    pub seed: u64,
    /// Composited behind the fitted scene; must match the capture setup.
    pub background: [f64; 3],
    pub tile_size: usize,
    pub threads: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            prim_count: 300,
            steps: 500,
            views_per_step: 4,
            lr: 1e-2,
            seed: 7,
            background: [1.0, 1.0, 1.0],
            tile_size: 16,
            threads: 1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prim_count == 0 {
            return Err(Error::Validation("prim_count must be at least 1".into()));
        }
        if self.views_per_step == 0 {
            return Err(Error::Validation("views_per_step must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !matches!(self.tile_size, 8 | 16 | 32) {
            return Err(Error::Validation(format!(
                "tile size must be 8, 16 or 32, got {}",
                self.tile_size
            )));
        }
        if self.threads == 0 {
            return Err(Error::Validation("threads must be at least 1".into()));
        }
        for b in self.background {
            if !b.is_finite() || !(0.0..=1.0).contains(&b) {
                return Err(Error::Validation("background color outside [0,1]".into()));
            }
        }
        Ok(())
    }
}

/// True when `p` projects inside the image bounds of `cam`, in front of the
/// near plane and short of the far plane.
fn in_frustum<T: Scalar>(cam: &Camera<T>, p: [f64; 3]) -> bool {
    let pc = cam.to_camera([T::of(p[0]), T::of(p[1]), T::of(p[2])]);
    let (x, y, z) = (pc[0].widen(), pc[1].widen(), pc[2].widen());
    if z <= cam.near.widen() || z >= cam.far.widen() {
        return false;
    }
    let px = cam.fx.widen() * x / z + cam.cx.widen();
    let py = cam.fy.widen() * y / z + cam.cy.widen();
    px >= 0.0 && px < cam.width as f64 && py >= 0.0 && py < cam.height as f64
}

/// True when the pixel `p` projects to differs from the background, i.e.
/// the point lies inside the object's silhouette from this view. Assumes
/// `in_frustum` already holds.
fn hits_silhouette<T: Scalar>(
    cam: &Camera<T>,
    img: &ImageBuf<T>,
    background: [f64; 3],
    p: [f64; 3],
) -> bool {
    let pc = cam.to_camera([T::of(p[0]), T::of(p[1]), T::of(p[2])]);
    let (x, y, z) = (pc[0].widen(), pc[1].widen(), pc[2].widen());
    let px = (cam.fx.widen() * x / z + cam.cx.widen()).clamp(0.0, (img.width() - 1) as f64);
    let py = (cam.fy.widen() * y / z + cam.cy.widen()).clamp(0.0, (img.height() - 1) as f64);
    let (px, py) = (px as usize, py as usize);
    (0..3).any(|c| (img.get(px, py, c).widen() - background[c]).abs() > 0.02)
}

/// Samples `count` points visible in every camera whose projections land on
/// non-background pixels in every view (a sampled visual hull). The search
/// cube spans the nearest camera distance, so inward-looking rigs keep their
/// shared volume. When the silhouette test starves the sampler — e.g. the
/// object's colors match the background — it degrades to frustum-only.
fn sample_hull<T: Scalar>(
    rig: &CameraRig<T>,
    images: &[ImageBuf<T>],
    background: [f64; 3],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f64; 3]>> {
    let r = rig
        .cameras
        .iter()
        .map(|c| c.eye().iter().map(|v| v.widen() * v.widen()).sum::<f64>().sqrt())
        .fold(f64::MAX, f64::min);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let budget = 10_000 * count.max(10);
    let mut carve = true;
    while out.len() < count {
        attempts += 1;
        if attempts > budget {
            if carve {
                carve = false;
                attempts = 0;
                continue;
            }
            return Err(Error::Validation(
                "camera frustums share too little volume to place the requested primitives".into(),
            ));
        }
        let p = [
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
        ];
        if !rig.cameras.iter().all(|c| in_frustum(c, p)) {
            continue;
        }
        if carve
            && !rig
                .cameras
                .iter()
                .zip(images)
                .all(|(c, img)| hits_silhouette(c, img, background, p))
        {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

/// Reads the pixel the point projects to in `img`/`cam`, as an initial color.
fn probe_color<T: Scalar>(cam: &Camera<T>, img: &ImageBuf<T>, p: [f64; 3]) -> [T; 3] {
    let pc = cam.to_camera([T::of(p[0]), T::of(p[1]), T::of(p[2])]);
    let (x, y, z) = (pc[0].widen(), pc[1].widen(), pc[2].widen());
    let px = (cam.fx.widen() * x / z + cam.cx.widen()).clamp(0.0, (img.width() - 1) as f64) as usize;
    let py = (cam.fy.widen() * y / z + cam.cy.widen()).clamp(0.0, (img.height() - 1) as f64) as usize;
    [img.get(px, py, 0), img.get(px, py, 1), img.get(px, py, 2)]
}

fn initial_scene<T: Scalar>(
    images: &[ImageBuf<T>],
    rig: &CameraRig<T>,
    cfg: &FitConfig,
) -> Result<GaussianScene<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "fit_init"));
    let points = sample_hull(rig, images, cfg.background, cfg.prim_count, &mut rng)?;
    let extent = points
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-3);
    // Spacing heuristic: blobs big enough to overlap at the initial density.
    let sigma = (2.0 * extent / (cfg.prim_count as f64).cbrt()).max(1e-3);
    let prims = points
        .into_iter()
        .map(|p| {
            let view = rng.gen_range(0..rig.len());
            GaussianPrim {
                center: p.map(T::of),
                log_scale: [T::of(sigma.ln()); 3],
                rotation: [T::one(), T::zero(), T::zero(), T::zero()],
                opacity_logit: T::zero(),
                color: probe_color(&rig.cameras[view], &images[view], p),
            }
        })
        .collect();
    Ok(GaussianScene::new(prims, cfg.background.map(T::of)))
}

/// Fits `cfg.prim_count` Gaussians to the posed images and returns the
/// refined scene. Deterministic for a fixed config and thread count.
pub fn fit_scene<T: Scalar>(
    images: &[ImageBuf<T>],
    rig: &CameraRig<T>,
    cfg: &FitConfig,
) -> Result<GaussianScene<T>> {
    cfg.validate()?;
    if images.len() != rig.len() {
        return Err(Error::Validation(format!(
            "{} images for {} cameras",
            images.len(),
            rig.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Validation("fitting needs at least one view".into()));
    }
    for (i, (img, cam)) in images.iter().zip(&rig.cameras).enumerate() {
        if img.channels() != 3 {
            return Err(Error::Validation(format!("view {i} is not RGB")));
        }
        if img.width() != cam.width || img.height() != cam.height {
            return Err(Error::Validation(format!(
                "view {i} is {}x{}, its camera expects {}x{}",
                img.width(),
                img.height(),
                cam.width,
                cam.height
            )));
        }
    }
    let init = initial_scene(images, rig, cfg)?;
    if cfg.steps == 0 {
        return Ok(init);
    }
    let mut store = ParamStore::new();
    let (c, s, r, o, col) = scene_to_tensors(&init);
    store.add("fit.centers", Role::Theta, c)?;
    store.add("fit.log_scales", Role::Theta, s)?;
    store.add("fit.rotations", Role::Theta, r)?;
    store.add("fit.opacity_logits", Role::Theta, o)?;
    store.add("fit.colors", Role::Theta, col)?;
    let adam = AdamWConfig::with_lr(T::of(cfg.lr));
    let opts = RenderOptions {
        tile_size: cfg.tile_size,
        threads: cfg.threads,
        ..RenderOptions::default()
    };
    let background = cfg.background.map(T::of);
    let targets: Vec<_> = images.iter().map(|img| img.to_chw()).collect();
    let k = cfg.views_per_step.min(images.len());
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "fit_step").wrapping_add(step as u64));
        let mut pool: Vec<usize> = (0..images.len()).collect();
        for i in 0..k {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let sv = SceneVars {
            centers: vars[0],
            log_scales: vars[1],
            rotations: vars[2],
            opacity_logits: vars[3],
            colors: vars[4],
        };
        let mut loss = None;
        for &v in pool.iter().take(k) {
            let rendered = render_on_tape(&mut tape, &sv, &rig.cameras[v], &opts, background)?;
            let target = tape.constant(targets[v].clone());
            let d = tape.mean_abs_diff(rendered, target)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        let loss = tape.scale(loss.expect("k >= 1"), T::of(1.0 / k as f64))?;
        let mut grads = tape.backward(loss)?;
        drop(tape);
        for i in 0..store.len() {
            let g = grads
                .take(vars[i])
                .unwrap_or_else(|| crate::tensor::Tensor::zeros(store.group(i).value.shape()));
            store.set_grad(i, g)?;
        }
        store.adamw_step(&adam, None)?;
        // Rendering rejects out-of-gamut colors, so the step projects them
        // back instead of letting the next iteration fail.
        for c in store.group_mut(4).value.data_mut() {
            *c = c.max(T::zero()).min(T::one());
        }
    }
    let fitted = scene_from_tensors(
        &store.group(0).value,
        &store.group(1).value,
        &store.group(2).value,
        &store.group(3).value,
        &store.group(4).value,
        background,
    )?;
    fitted.validate()?;
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::render::tile_render;
    use crate::synth::{synthesize, SynthConfig, SynthShape};

    fn render_views(
        scene: &GaussianScene<f32>,
        rig: &CameraRig<f32>,
        opts: &RenderOptions<f32>,
    ) -> Vec<ImageBuf<f32>> {
        rig.cameras
            .iter()
            .map(|cam| {
                let r = tile_render(scene, cam, opts).unwrap();
                ImageBuf::from_vec(r.width, r.height, 3, r.pixels).unwrap()
            })
            .collect()
    }

    #[test]
    fn mismatched_image_and_camera_counts_error() {
        let rig = CameraRig::orbit(4, 3.0, 30.0, 16, 16, 45.0).unwrap();
        let images = vec![ImageBuf::<f32>::filled(16, 16, 3, 0.5); 3];
        let err = fit_scene(&images, &rig, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn wrong_view_resolution_errors() {
        let rig = CameraRig::orbit(2, 3.0, 30.0, 16, 16, 45.0).unwrap();
        let images = vec![ImageBuf::<f32>::filled(8, 8, 3, 0.5); 2];
        assert!(fit_scene(&images, &rig, &FitConfig::default()).is_err());
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let rig = CameraRig::orbit(4, 3.0, 30.0, 24, 24, 45.0).unwrap();
        let scene: GaussianScene<f32> =
            synthesize(&SynthConfig { prim_count: 50, ..SynthConfig::default() }).unwrap();
        let opts = RenderOptions { tile_size: 8, ..RenderOptions::default() };
        let images = render_views(&scene, &rig, &opts);
        let cfg = FitConfig { prim_count: 40, steps: 0, tile_size: 8, ..FitConfig::default() };
        let a = fit_scene(&images, &rig, &cfg).unwrap();
        let b = fit_scene(&images, &rig, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        // All initial points are visible in every view.
        for p in &a.prims {
            let pos = [p.center[0] as f64, p.center[1] as f64, p.center[2] as f64];
            assert!(rig.cameras.iter().all(|c| in_frustum(c, pos)));
        }
    }

    #[test]
    fn self_reconstruction_reaches_holdout_psnr() {
        let scene: GaussianScene<f32> = synthesize(&SynthConfig {
            shape: SynthShape::Sphere,
            prim_count: 160,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let rig = CameraRig::orbit(24, 3.0, 40.0, 48, 48, 45.0).unwrap();
        let opts = RenderOptions { tile_size: 16, ..RenderOptions::default() };
        let images = render_views(&scene, &rig, &opts);
        // Interior holdout: the remaining poses bracket the held-out ones,
        // which tests interpolation rather than extrapolating past the rig.
        let holdout = [7usize, 15];
        let mut train_cams = Vec::new();
        let mut train_imgs = Vec::new();
        for i in 0..rig.len() {
            if !holdout.contains(&i) {
                train_cams.push(rig.cameras[i].clone());
                train_imgs.push(images[i].clone());
            }
        }
        let train_rig = CameraRig { cameras: train_cams };
        let cfg = FitConfig {
            prim_count: 140,
            steps: 500,
            views_per_step: 4,
            seed: 5,
            lr: 3e-2,
            ..FitConfig::default()
        };
        let fitted = fit_scene(&train_imgs, &train_rig, &cfg).unwrap();
        let mut worst = f64::MAX;
        for i in holdout {
            let got = tile_render(&fitted, &rig.cameras[i], &opts).unwrap();
            let got = ImageBuf::from_vec(got.width, got.height, 3, got.pixels).unwrap();
            let p = psnr(&got, &images[i]).unwrap();
            worst = worst.min(p);
        }
        assert!(worst >= 22.0, "held-out PSNR {worst:.2} below 22 dB");
    }
}
