//! Forward rasterization (reference and tiled) and the compositing backward.

use super::project::{project_backward, project_gaussian, SplatGrads};
use super::{
    Camera, GaussianScene, ProjectedSplat, RenderOptions, RenderedImage, SceneGrads,
};
use crate::error::{Error, Result};
use crate::num::Scalar;

pub(crate) struct Prepared<T> {
    /// Visible splats sorted front to back; depth ties keep input order.
    pub splats: Vec<ProjectedSplat<T>>,
    /// Original primitive index of each sorted splat.
    pub prim_idx: Vec<u32>,
}

pub(crate) fn prepare<T: Scalar>(
    scene: &GaussianScene<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
) -> Result<Prepared<T>> {
    scene.validate()?;
    opts.validate()?;
    let mut pairs: Vec<(ProjectedSplat<T>, u32)> = Vec::with_capacity(scene.prims.len());
    for (i, prim) in scene.prims.iter().enumerate() {
        if let Some(s) = project_gaussian(prim, cam, opts) {
            pairs.push((s, i as u32));
        }
    }
    pairs.sort_by(|a, b| {
        a.0.depth
            .partial_cmp(&b.0.depth)
            .expect("depths are finite")
            .then(a.1.cmp(&b.1))
    });
    let mut splats = Vec::with_capacity(pairs.len());
    let mut prim_idx = Vec::with_capacity(pairs.len());
    for (s, i) in pairs {
        splats.push(s);
        prim_idx.push(i);
    }
    Ok(Prepared { splats, prim_idx })
}

/// Composites the given candidates (already front to back) over one pixel.
/// Returns `(rgb, weight_sum, bg_weight)`.
#[inline]
fn shade<T: Scalar>(
    splats: &[ProjectedSplat<T>],
    cand: &[u32],
    px: T,
    py: T,
    opts: &RenderOptions<T>,
    bg: [T; 3],
) -> ([T; 3], T, T) {
    let mut t_rem = T::one();
    let mut s_acc = T::zero();
    let mut rgb = [T::zero(); 3];
    for &ci in cand {
        let sp = &splats[ci as usize];
        let dx = px - sp.mean[0];
        let dy = py - sp.mean[1];
        let sig2 = sp.conic[0] * dx * dx
            + T::of(2.0) * sp.conic[1] * dx * dy
            + sp.conic[2] * dy * dy;
        if let Some(cut) = opts.cutoff_sq {
            if sig2 > cut {
                continue;
            }
        }
        let g = (-T::of(0.5) * sig2).exp();
        let mut a = sp.alpha * g;
        if let Some(cl) = opts.alpha_clamp {
            if a > cl {
                a = cl;
            }
        }
        let w = a * t_rem;
        rgb[0] += sp.color[0] * w;
        rgb[1] += sp.color[1] * w;
        rgb[2] += sp.color[2] * w;
        s_acc += w;
        t_rem -= w;
    }
    let s_acc = s_acc.min(T::one());
    let w_bg = (T::one() - s_acc).max(T::zero());
    rgb[0] += bg[0] * w_bg;
    rgb[1] += bg[1] * w_bg;
    rgb[2] += bg[2] * w_bg;
    (rgb, s_acc, w_bg)
}

/// Reference renderer: every pixel walks the full sorted splat list.
pub fn render<T: Scalar>(
    scene: &GaussianScene<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
) -> Result<RenderedImage<T>> {
    let prep = prepare(scene, cam, opts)?;
    let all: Vec<u32> = (0..prep.splats.len() as u32).collect();
    let (w, h) = (cam.width, cam.height);
    let mut pixels = vec![T::zero(); w * h * 3];
    let mut alpha = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let px = T::of(x as f64) + T::of(0.5);
            let py = T::of(y as f64) + T::of(0.5);
            let (rgb, s, _) = shade(&prep.splats, &all, px, py, opts, scene.background);
            let o = (y * w + x) * 3;
            pixels[o] = rgb[0];
            pixels[o + 1] = rgb[1];
            pixels[o + 2] = rgb[2];
            alpha[y * w + x] = s;
        }
    }
    Ok(RenderedImage { width: w, height: h, pixels, alpha })
}

/// Candidate splat lists per tile, row major. Lists keep global depth order.
/// Without a cutoff every splat is a candidate for every tile, because far
/// tails then still contribute.
fn build_tile_lists<T: Scalar>(
    splats: &[ProjectedSplat<T>],
    width: usize,
    height: usize,
    opts: &RenderOptions<T>,
) -> Vec<Vec<u32>> {
    let ts = opts.tile_size;
    let ntx = width.div_ceil(ts);
    let nty = height.div_ceil(ts);
    let mut lists = vec![Vec::new(); ntx * nty];
    if opts.cutoff_sq.is_none() {
        let all: Vec<u32> = (0..splats.len() as u32).collect();
        for l in &mut lists {
            *l = all.clone();
        }
        return lists;
    }
    for (i, sp) in splats.iter().enumerate() {
        let mu = [sp.mean[0].widen(), sp.mean[1].widen()];
        let r = sp.radius.widen();
        let ts_f = ts as f64;
        let tx0 = ((mu[0] - r) / ts_f).floor() as i64;
        let tx1 = ((mu[0] + r) / ts_f).floor() as i64;
        let ty0 = ((mu[1] - r) / ts_f).floor() as i64;
        let ty1 = ((mu[1] + r) / ts_f).floor() as i64;
        if tx1 < 0 || ty1 < 0 || tx0 >= ntx as i64 || ty0 >= nty as i64 {
            continue;
        }
        let x0 = tx0.max(0) as usize;
        let x1 = (tx1.min(ntx as i64 - 1)) as usize;
        let y0 = ty0.max(0) as usize;
        let y1 = (ty1.min(nty as i64 - 1)) as usize;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                lists[ty * ntx + tx].push(i as u32);
            }
        }
    }
    lists
}

fn shade_tile_rows<T: Scalar>(
    splats: &[ProjectedSplat<T>],
    lists: &[Vec<u32>],
    opts: &RenderOptions<T>,
    bg: [T; 3],
    width: usize,
    height: usize,
    ty_range: std::ops::Range<usize>,
    pixels: &mut [T],
    alpha: &mut [T],
) {
    let ts = opts.tile_size;
    let ntx = width.div_ceil(ts);
    let row0 = ty_range.start * ts;
    for ty in ty_range {
        for tx in 0..ntx {
            let cand = &lists[ty * ntx + tx];
            let y_end = ((ty + 1) * ts).min(height);
            let x_end = ((tx + 1) * ts).min(width);
            for y in ty * ts..y_end {
                for x in tx * ts..x_end {
                    let px = T::of(x as f64) + T::of(0.5);
                    let py = T::of(y as f64) + T::of(0.5);
                    let (rgb, s, _) = shade(splats, cand, px, py, opts, bg);
                    let o = ((y - row0) * width + x) * 3;
                    pixels[o] = rgb[0];
                    pixels[o + 1] = rgb[1];
                    pixels[o + 2] = rgb[2];
                    alpha[(y - row0) * width + x] = s;
                }
            }
        }
    }
}

/// Tiled renderer. Produces bit-identical output to [`render`] for any tile
/// size and thread count, but only evaluates splats near each tile.
pub fn tile_render<T: Scalar>(
    scene: &GaussianScene<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
) -> Result<RenderedImage<T>> {
    let prep = prepare(scene, cam, opts)?;
    let (w, h) = (cam.width, cam.height);
    let lists = build_tile_lists(&prep.splats, w, h, opts);
    let ts = opts.tile_size;
    let nty = h.div_ceil(ts);
    let mut pixels = vec![T::zero(); w * h * 3];
    let mut alpha = vec![T::zero(); w * h];

    let threads = opts.threads.min(nty.max(1));
    if threads <= 1 {
        shade_tile_rows(
            &prep.splats,
            &lists,
            opts,
            scene.background,
            w,
            h,
            0..nty,
            &mut pixels,
            &mut alpha,
        );
    } else {
        // Split the image into contiguous bands of tile rows; each band owns
        // a disjoint slice of the output, so banding cannot change results.
        let per = nty.div_ceil(threads);
        let mut jobs = Vec::new();
        let mut px_rest: &mut [T] = &mut pixels;
        let mut al_rest: &mut [T] = &mut alpha;
        let mut ty = 0;
        while ty < nty {
            let ty_end = (ty + per).min(nty);
            let rows = (ty_end * ts).min(h) - ty * ts;
            let (px_band, px_next) = px_rest.split_at_mut(rows * w * 3);
            let (al_band, al_next) = al_rest.split_at_mut(rows * w);
            px_rest = px_next;
            al_rest = al_next;
            jobs.push((ty..ty_end, px_band, al_band));
            ty = ty_end;
        }
        std::thread::scope(|scope| {
            for (range, px_band, al_band) in jobs {
                let splats = &prep.splats;
                let lists = &lists;
                let bg = scene.background;
                scope.spawn(move || {
                    shade_tile_rows(splats, lists, opts, bg, w, h, range, px_band, al_band);
                });
            }
        });
    }
    Ok(RenderedImage { width: w, height: h, pixels, alpha })
}

/// Full compositing record for one pixel, for conservation checks.
#[derive(Debug, Clone)]
pub struct PixelBreakdown<T> {
    /// `(primitive index, weight)` per contribution, front to back.
    pub weights: Vec<(usize, T)>,
    /// Accumulated splat weight (clamped to 1).
    pub weight_sum: T,
    /// Background weight `1 - weight_sum` (clamped to 0).
    pub bg_weight: T,
    pub color: [T; 3],
}

/// Renders a single pixel and reports every compositing weight.
pub fn render_detailed<T: Scalar>(
    scene: &GaussianScene<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
    x: usize,
    y: usize,
) -> Result<PixelBreakdown<T>> {
    if x >= cam.width || y >= cam.height {
        return Err(Error::Validation(format!(
            "pixel ({x}, {y}) outside {}x{}",
            cam.width, cam.height
        )));
    }
    let prep = prepare(scene, cam, opts)?;
    let px = T::of(x as f64) + T::of(0.5);
    let py = T::of(y as f64) + T::of(0.5);
    let mut t_rem = T::one();
    let mut s_acc = T::zero();
    let mut rgb = [T::zero(); 3];
    let mut weights = Vec::new();
    for (ci, sp) in prep.splats.iter().enumerate() {
        let dx = px - sp.mean[0];
        let dy = py - sp.mean[1];
        let sig2 = sp.conic[0] * dx * dx
            + T::of(2.0) * sp.conic[1] * dx * dy
            + sp.conic[2] * dy * dy;
        if let Some(cut) = opts.cutoff_sq {
            if sig2 > cut {
                continue;
            }
        }
        let g = (-T::of(0.5) * sig2).exp();
        let mut a = sp.alpha * g;
        if let Some(cl) = opts.alpha_clamp {
            if a > cl {
                a = cl;
            }
        }
        let w = a * t_rem;
        for k in 0..3 {
            rgb[k] += sp.color[k] * w;
        }
        s_acc += w;
        t_rem -= w;
        weights.push((prep.prim_idx[ci] as usize, w));
    }
    let s_acc = s_acc.min(T::one());
    let bg_weight = (T::one() - s_acc).max(T::zero());
    for k in 0..3 {
        rgb[k] += scene.background[k] * bg_weight;
    }
    Ok(PixelBreakdown { weights, weight_sum: s_acc, bg_weight, color: rgb })
}

/// Backward pass: gradient of a scalar loss wrt every Gaussian attribute,
/// given the loss gradient wrt rendered pixels (row-major RGB).
pub fn render_backward<T: Scalar>(
    scene: &GaussianScene<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
    d_pixels: &[T],
) -> Result<SceneGrads<T>> {
    let (w, h) = (cam.width, cam.height);
    if d_pixels.len() != w * h * 3 {
        return Err(Error::Shape(format!(
            "pixel gradient has {} values, expected {}",
            d_pixels.len(),
            w * h * 3
        )));
    }
    let prep = prepare(scene, cam, opts)?;
    let lists = build_tile_lists(&prep.splats, w, h, opts);
    let ts = opts.tile_size;
    let ntx = w.div_ceil(ts);
    let nty = h.div_ceil(ts);

    // Accumulators in sorted-splat order; mapped back at the end.
    let n = prep.splats.len();
    let mut d_mean = vec![[T::zero(); 2]; n];
    let mut d_cov = vec![[T::zero(); 3]; n];
    let mut d_alpha = vec![T::zero(); n];
    let mut d_color = vec![[T::zero(); 3]; n];

    for ty in 0..nty {
        for tx in 0..ntx {
            let cand = &lists[ty * ntx + tx];
            if cand.is_empty() {
                continue;
            }
            let y_end = ((ty + 1) * ts).min(h);
            let x_end = ((tx + 1) * ts).min(w);
            for y in ty * ts..y_end {
                for x in tx * ts..x_end {
                    let px = T::of(x as f64) + T::of(0.5);
                    let py = T::of(y as f64) + T::of(0.5);
                    let (total, _, _) =
                        shade(&prep.splats, cand, px, py, opts, scene.background);
                    let o = (y * w + x) * 3;
                    let up = [d_pixels[o], d_pixels[o + 1], d_pixels[o + 2]];
                    if up[0] == T::zero() && up[1] == T::zero() && up[2] == T::zero() {
                        continue;
                    }
                    // Replay front to back. `behind` is the composited color
                    // strictly behind the current splat (background included):
                    // scaling the remaining transmittance by (1 - a) scales
                    // exactly that part of the pixel.
                    let mut t_rem = T::one();
                    let mut prefix = [T::zero(); 3];
                    for &ci in cand {
                        let sp = &prep.splats[ci as usize];
                        let dx = px - sp.mean[0];
                        let dy = py - sp.mean[1];
                        let sig2 = sp.conic[0] * dx * dx
                            + T::of(2.0) * sp.conic[1] * dx * dy
                            + sp.conic[2] * dy * dy;
                        if let Some(cut) = opts.cutoff_sq {
                            if sig2 > cut {
                                continue;
                            }
                        }
                        let g = (-T::of(0.5) * sig2).exp();
                        let raw_a = sp.alpha * g;
                        let (a, clamped) = match opts.alpha_clamp {
                            Some(cl) if raw_a > cl => (cl, true),
                            _ => (raw_a, false),
                        };
                        let wgt = a * t_rem;
                        for k in 0..3 {
                            prefix[k] += sp.color[k] * wgt;
                        }
                        let ci = ci as usize;
                        let up_dot_c = up[0] * sp.color[0]
                            + up[1] * sp.color[1]
                            + up[2] * sp.color[2];
                        for k in 0..3 {
                            d_color[ci][k] += up[k] * wgt;
                        }
                        if !clamped {
                            let behind = [
                                total[0] - prefix[0],
                                total[1] - prefix[1],
                                total[2] - prefix[2],
                            ];
                            let up_dot_b =
                                up[0] * behind[0] + up[1] * behind[1] + up[2] * behind[2];
                            let denom = T::one() - a;
                            let da = if denom > T::zero() {
                                up_dot_c * t_rem - up_dot_b / denom
                            } else {
                                up_dot_c * t_rem
                            };
                            d_alpha[ci] += g * da;
                            let dg = sp.alpha * da;
                            let dsig2 = -T::of(0.5) * g * dg;
                            let two = T::of(2.0);
                            let ddx = dsig2
                                * (two * sp.conic[0] * dx + two * sp.conic[1] * dy);
                            let ddy = dsig2
                                * (two * sp.conic[1] * dx + two * sp.conic[2] * dy);
                            d_mean[ci][0] -= ddx;
                            d_mean[ci][1] -= ddy;
                            // Conic gradient mapped to covariance gradient via
                            // d(C^-1) = -C^-1 dC C^-1.
                            let dl = [dsig2 * dx * dx, dsig2 * two * dx * dy, dsig2 * dy * dy];
                            let [ia, ib, ic] = sp.conic;
                            // -Lambda * dLambda_sym * Lambda, with the shared
                            // off-diagonal slot already doubled in dl[1].
                            let m00 = dl[0];
                            let m01 = T::of(0.5) * dl[1];
                            let m11 = dl[2];
                            let p00 = ia * m00 + ib * m01;
                            let p01 = ia * m01 + ib * m11;
                            let p10 = ib * m00 + ic * m01;
                            let p11 = ib * m01 + ic * m11;
                            let dca = -(p00 * ia + p01 * ib);
                            let dcb = -(p00 * ib + p01 * ic) - (p10 * ia + p11 * ib);
                            let dcc = -(p10 * ib + p11 * ic);
                            d_cov[ci][0] += dca;
                            d_cov[ci][1] += dcb;
                            d_cov[ci][2] += dcc;
                        }
                        t_rem -= wgt;
                    }
                }
            }
        }
    }

    // Projection backward per visible splat, scattered to primitive order.
    let mut grads = SceneGrads::zeros(scene.prims.len());
    for ci in 0..n {
        let pi = prep.prim_idx[ci] as usize;
        let g = SplatGrads {
            d_mean: d_mean[ci],
            d_cov: d_cov[ci],
            d_alpha: d_alpha[ci],
            d_color: d_color[ci],
        };
        let Some(pg) = project_backward(&scene.prims[pi], cam, opts, &g) else {
            continue;
        };
        for k in 0..3 {
            grads.centers[pi][k] += pg.d_center[k];
            grads.log_scales[pi][k] += pg.d_log_scale[k];
            grads.colors[pi][k] += pg.d_color[k];
        }
        for k in 0..4 {
            grads.rotations[pi][k] += pg.d_rotation[k];
        }
        grads.opacity_logits[pi] += pg.d_opacity_logit;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::GaussianPrim;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam64(res: usize) -> Camera<f64> {
        Camera::look_at(
            [0.0, 0.5, -4.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            res,
            res,
            60.0,
        )
        .unwrap()
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene<f32> {
        let prims = (0..n)
            .map(|_| GaussianPrim {
                center: [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
                log_scale: [
                    rng.gen_range(-3.0..-1.0),
                    rng.gen_range(-3.0..-1.0),
                    rng.gen_range(-3.0..-1.0),
                ],
                rotation: [
                    rng.gen_range(-1.0..1.0f32),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
                opacity_logit: rng.gen_range(-2.0..3.0),
                color: [rng.gen(), rng.gen(), rng.gen()],
            })
            .map(|mut p| {
                if p.rotation.iter().map(|v| v * v).sum::<f32>() < 1e-3 {
                    p.rotation = [1.0, 0.0, 0.0, 0.0];
                }
                p
            })
            .collect();
        GaussianScene::new(prims, [0.1, 0.2, 0.3])
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = GaussianScene::<f32>::new(vec![], [0.25, 0.5, 0.75]);
        let cam = cam64(16).cast::<f32>();
        let img = render(&scene, &cam, &RenderOptions::default()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(img.pixel(x, y), [0.25, 0.5, 0.75]);
                assert_eq!(img.alpha[y * 16 + x], 0.0);
            }
        }
    }

    #[test]
    fn centered_gaussian_covers_center_not_corner() {
        let prim = GaussianPrim {
            center: [0.0, 0.0, 0.0],
            log_scale: [-1.5; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 4.0,
            color: [1.0, 0.0, 0.0],
        };
        let scene = GaussianScene::new(vec![prim], [0.0, 0.0, 1.0]);
        let cam = Camera::<f64>::look_at(
            [0.0, 0.0, -4.0],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            33,
            33,
            60.0,
        )
        .unwrap();
        let img = render(&scene, &cam, &RenderOptions::default()).unwrap();
        let center = img.pixel(16, 16);
        let corner = img.pixel(0, 0);
        assert!(center[0] > 0.9, "center red {}", center[0]);
        assert!(corner[2] > 0.9, "corner blue {}", corner[2]);
    }

    #[test]
    fn tile_matches_naive_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = cam64(48).cast::<f32>();
        for round in 0..5 {
            let scene = random_scene(&mut rng, 1 + round * 9);
            let naive = render(&scene, &cam, &RenderOptions::default()).unwrap();
            for ts in [8usize, 16, 32] {
                for threads in [1usize, 3] {
                    let opts = RenderOptions { tile_size: ts, threads, ..Default::default() };
                    let tiled = tile_render(&scene, &cam, &opts).unwrap();
                    assert_eq!(naive.pixels.len(), tiled.pixels.len());
                    for (i, (a, b)) in
                        naive.pixels.iter().zip(tiled.pixels.iter()).enumerate()
                    {
                        assert!(
                            a.to_bits() == b.to_bits(),
                            "ts {ts} threads {threads} pixel value {i}: {a} vs {b}"
                        );
                    }
                    for (a, b) in naive.alpha.iter().zip(tiled.alpha.iter()) {
                        assert!(a.to_bits() == b.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn weights_conserve_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = cam64(24).cast::<f32>();
        let opts = RenderOptions::default();
        for n in [1usize, 5, 40] {
            let scene = random_scene(&mut rng, n);
            for (x, y) in [(0, 0), (12, 12), (5, 17), (23, 23)] {
                let b = render_detailed(&scene, &cam, &opts, x, y).unwrap();
                assert!(b.weight_sum >= 0.0 && b.weight_sum <= 1.0);
                assert!(b.bg_weight >= 0.0);
                for &(_, w) in &b.weights {
                    assert!(w >= 0.0, "negative weight {w}");
                }
                let one = b.weight_sum + b.bg_weight;
                assert_eq!(one.to_bits(), 1.0f32.to_bits(), "sum {one}");
            }
        }
    }

    #[test]
    fn closer_opaque_splat_occludes() {
        let mk = |z: f64, color: [f64; 3]| GaussianPrim {
            center: [0.0, 0.0, z],
            log_scale: [-1.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 8.0,
            color,
        };
        // Camera sits at -4 looking toward +z, so z = -1 is nearer than z = 1.
        let scene = GaussianScene::new(
            vec![mk(1.0, [0.0, 1.0, 0.0]), mk(-1.0, [1.0, 0.0, 0.0])],
            [0.0; 3],
        );
        let cam = cam64(17);
        let img = render(&scene, &cam, &RenderOptions::default()).unwrap();
        let c = img.pixel(8, 9);
        assert!(c[0] > 0.95 && c[1] < 0.05, "front splat should win: {c:?}");
    }

    #[test]
    fn alpha_clamp_limits_single_contribution() {
        let prim = GaussianPrim {
            center: [0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 30.0,
            color: [1.0, 1.0, 1.0],
        };
        let scene = GaussianScene::new(vec![prim], [0.0; 3]);
        let cam = cam64(17);
        let b = render_detailed(&scene, &cam, &RenderOptions::default(), 8, 8).unwrap();
        assert_eq!(b.weights.len(), 1);
        assert!(b.weights[0].1 <= 0.99 + 1e-12, "weight {}", b.weights[0].1);
        assert!((b.bg_weight - 0.01).abs() < 1e-9);
    }

    #[test]
    fn cutoff_leaves_far_pixels_untouched() {
        let prim = GaussianPrim {
            center: [0.0, 0.0, 0.0],
            log_scale: [-3.0; 3], // tiny: covers only the middle
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 5.0,
            color: [1.0, 1.0, 1.0],
        };
        let scene = GaussianScene::new(vec![prim], [0.2, 0.2, 0.2]);
        let cam = cam64(33);
        let img = render(&scene, &cam, &RenderOptions::default()).unwrap();
        assert_eq!(img.pixel(0, 0), [0.2, 0.2, 0.2]);
        assert_eq!(img.alpha[0], 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene64: GaussianScene<f64> = random_scene(&mut rng, 3).cast();
        let cam = cam64(12);
        let opts = RenderOptions::<f64> {
            dilation: 0.3,
            cutoff_sq: None,
            alpha_clamp: None,
            tile_size: 8,
            threads: 1,
        };
        // Loss: fixed random projection of the image.
        let wsize = 12 * 12 * 3;
        let lw: Vec<f64> = (0..wsize).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |s: &GaussianScene<f64>| -> f64 {
            let img = render(s, &cam, &opts).unwrap();
            img.pixels.iter().zip(lw.iter()).map(|(p, w)| p * w).sum()
        };
        let grads = render_backward(&scene64, &cam, &opts, &lw).unwrap();

        let h = 1e-6;
        let mut worst = 0.0f64;
        let mut check = |set: &dyn Fn(&mut GaussianScene<f64>, f64), a: f64, what: &str| {
            let mut hi = scene64.clone();
            set(&mut hi, h);
            let mut lo = scene64.clone();
            set(&mut lo, -h);
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * h);
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4);
            if rel > worst {
                worst = rel;
            }
            assert!(rel < 1e-5, "{what}: analytic {a} vs fd {fd} (rel {rel})");
        };
        for i in 0..scene64.prims.len() {
            for k in 0..3 {
                check(&|s, d| s.prims[i].center[k] += d, grads.centers[i][k], "center");
                check(
                    &|s, d| s.prims[i].log_scale[k] += d,
                    grads.log_scales[i][k],
                    "log_scale",
                );
                check(&|s, d| s.prims[i].color[k] += d, grads.colors[i][k], "color");
            }
            for k in 0..4 {
                check(
                    &|s, d| s.prims[i].rotation[k] += d,
                    grads.rotations[i][k],
                    "rotation",
                );
            }
            check(
                &|s, d| s.prims[i].opacity_logit += d,
                grads.opacity_logits[i],
                "opacity",
            );
        }
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn backward_rejects_wrong_gradient_shape() {
        let scene = GaussianScene::<f64>::new(vec![], [0.0; 3]);
        let cam = cam64(8);
        let err = render_backward(&scene, &cam, &RenderOptions::default(), &[0.0; 10]);
        assert!(err.is_err());
    }
}
