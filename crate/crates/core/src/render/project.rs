//! 3D Gaussian to 2D splat projection and its analytic backward pass.

use super::{Camera, GaussianPrim, RenderOptions, LOG_SCALE_MAX, LOG_SCALE_MIN};
use crate::num::Scalar;

/// A Gaussian projected into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat<T> {
    /// Pixel-space mean.
    pub mean: [T; 2],
    /// Dilated 2x2 pixel-space covariance `[[a, b], [b, c]]` stored as `(a, b, c)`.
    pub cov: [T; 3],
    /// Inverse covariance `(a, b, c)` layout as above.
    pub conic: [T; 3],
    /// Camera-space depth, used for sorting.
    pub depth: T,
    /// Post-sigmoid opacity.
    pub alpha: T,
    pub color: [T; 3],
    /// Conservative pixel radius covering the 3-sigma ellipse.
    pub radius: T,
}

#[inline]
fn quat_to_rot<T: Scalar>(q: [T; 4]) -> [[T; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::of(2.0);
    [
        [
            T::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            T::one() - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            T::one() - two * (x * x + y * y),
        ],
    ]
}

#[inline]
fn clamped_scale<T: Scalar>(s: T) -> T {
    s.max(T::of(LOG_SCALE_MIN)).min(T::of(LOG_SCALE_MAX))
}

/// Everything the backward pass needs to avoid re-deriving the forward state.
struct ProjCache<T> {
    t: [T; 3],
    w_rot: [[T; 3]; 3],
    r: [[T; 3]; 3],
    q_norm: [T; 4],
    q_len: T,
    diag: [T; 3],
    scale_clamped: [bool; 3],
    sigma: [[T; 3]; 3],
    m: [[T; 3]; 3], // J*W with a zero third row (J is 2x3)
}

fn project_impl<T: Scalar>(
    prim: &GaussianPrim<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
) -> Option<(ProjectedSplat<T>, ProjCache<T>)> {
    let t = cam.to_camera(prim.center);
    if t[2] <= cam.near || t[2] >= cam.far {
        return None;
    }
    let inv_z = T::one() / t[2];
    let mean = [cam.fx * t[0] * inv_z + cam.cx, cam.fy * t[1] * inv_z + cam.cy];

    // Rotation from the (renormalized) quaternion.
    let q_raw = prim.rotation;
    let q_len = q_raw.iter().map(|v| *v * *v).fold(T::zero(), |a, b| a + b).sqrt();
    if q_len < T::of(1e-9) {
        return None;
    }
    let q_norm = q_raw.map(|v| v / q_len);
    let r = quat_to_rot(q_norm);

    // World covariance Sigma = R * diag(exp(2s)) * R^T.
    let mut diag = [T::zero(); 3];
    let mut scale_clamped = [false; 3];
    for k in 0..3 {
        let s = clamped_scale(prim.log_scale[k]);
        scale_clamped[k] = s != prim.log_scale[k];
        diag[k] = (T::of(2.0) * s).exp();
    }
    let mut sigma = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += r[i][k] * diag[k] * r[j][k];
            }
            sigma[i][j] = acc;
        }
    }

    // Affine approximation of the projection: J (2x3) then M = J * W.
    let j00 = cam.fx * inv_z;
    let j02 = -cam.fx * t[0] * inv_z * inv_z;
    let j11 = cam.fy * inv_z;
    let j12 = -cam.fy * t[1] * inv_z * inv_z;
    let w_rot = cam.rot;
    let mut m = [[T::zero(); 3]; 3];
    for c in 0..3 {
        m[0][c] = j00 * w_rot[0][c] + j02 * w_rot[2][c];
        m[1][c] = j11 * w_rot[1][c] + j12 * w_rot[2][c];
    }

    // 2D covariance C = M Sigma M^T + dilation * I.
    let mut ms = [[T::zero(); 3]; 2];
    for i in 0..2 {
        for c in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += m[i][k] * sigma[k][c];
            }
            ms[i][c] = acc;
        }
    }
    let quad = |i: usize, j: usize| -> T {
        let mut acc = T::zero();
        for k in 0..3 {
            acc += ms[i][k] * m[j][k];
        }
        acc
    };
    let ca = quad(0, 0) + opts.dilation;
    let cb = quad(0, 1);
    let cc = quad(1, 1) + opts.dilation;

    let det = ca * cc - cb * cb;
    if det <= T::of(1e-12) || !det.is_finite() {
        return None;
    }
    let inv_det = T::one() / det;
    let conic = [cc * inv_det, -cb * inv_det, ca * inv_det];

    // 3-sigma radius from the larger covariance eigenvalue.
    let mid = T::of(0.5) * (ca + cc);
    let disc = (mid * mid - det).max(T::zero()).sqrt();
    let lam_max = mid + disc;
    let radius = T::of(3.0) * lam_max.max(T::zero()).sqrt();

    let alpha = crate::tensor::sigmoid(prim.opacity_logit);
    let splat = ProjectedSplat {
        mean,
        cov: [ca, cb, cc],
        conic,
        depth: t[2],
        alpha,
        color: prim.color,
        radius,
    };
    let cache = ProjCache {
        t,
        w_rot,
        r,
        q_norm,
        q_len,
        diag,
        scale_clamped,
        sigma,
        m,
    };
    Some((splat, cache))
}

/// Projects one Gaussian. Returns `None` when the center is outside the
/// depth range or the projected covariance degenerates.
pub fn project_gaussian<T: Scalar>(
    prim: &GaussianPrim<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
) -> Option<ProjectedSplat<T>> {
    project_impl(prim, cam, opts).map(|(s, _)| s)
}

/// Gradients flowing back out of the 2D splat.
#[derive(Debug, Clone, Copy)]
pub struct SplatGrads<T> {
    pub d_mean: [T; 2],
    /// Gradient wrt the dilated covariance `(a, b, c)`; the `b` slot already
    /// contains the sum over both off-diagonal entries.
    pub d_cov: [T; 3],
    pub d_alpha: T,
    pub d_color: [T; 3],
}

/// Per-primitive gradient contributions from one camera.
#[derive(Debug, Clone, Copy)]
pub struct PrimGrads<T> {
    pub d_center: [T; 3],
    pub d_log_scale: [T; 3],
    pub d_rotation: [T; 4],
    pub d_opacity_logit: T,
    pub d_color: [T; 3],
}

/// Backward through the projection: pixel-space splat gradients to Gaussian
/// attribute gradients. Recomputes the forward cache internally; returns
/// `None` exactly when the forward projection returned `None`.
pub fn project_backward<T: Scalar>(
    prim: &GaussianPrim<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
    g: &SplatGrads<T>,
) -> Option<PrimGrads<T>> {
    let (splat, cache) = project_impl(prim, cam, opts)?;
    let two = T::of(2.0);
    let half = T::of(0.5);

    // Symmetrize the covariance gradient: d_cov.b covers both off-diagonals.
    let dc = [[g.d_cov[0], half * g.d_cov[1]], [half * g.d_cov[1], g.d_cov[2]]];

    // dM = 2 * dC * (M Sigma)  (dC symmetric, Sigma symmetric).
    let mut msig = [[T::zero(); 3]; 2];
    for i in 0..2 {
        for c in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += cache.m[i][k] * cache.sigma[k][c];
            }
            msig[i][c] = acc;
        }
    }
    let mut dm = [[T::zero(); 3]; 2];
    for i in 0..2 {
        for c in 0..3 {
            dm[i][c] = two * (dc[i][0] * msig[0][c] + dc[i][1] * msig[1][c]);
        }
    }

    // dSigma = M^T dC M (symmetric).
    let mut dsig = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = T::zero();
            for i in 0..2 {
                for j in 0..2 {
                    acc += cache.m[i][a] * dc[i][j] * cache.m[j][b];
                }
            }
            dsig[a][b] = acc;
        }
    }

    // Scales: dD_kk = (R^T dSigma R)_kk, ds_k = dD_kk * 2 exp(2 s_k).
    let mut d_log_scale = [T::zero(); 3];
    for k in 0..3 {
        if cache.scale_clamped[k] {
            continue;
        }
        let mut dd = T::zero();
        for a in 0..3 {
            for b in 0..3 {
                dd += cache.r[a][k] * dsig[a][b] * cache.r[b][k];
            }
        }
        d_log_scale[k] = dd * two * cache.diag[k];
    }

    // Rotation matrix gradient: dR = 2 * dSigma * R * D (dSigma symmetric).
    let mut rd = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for k in 0..3 {
            rd[a][k] = cache.r[a][k] * cache.diag[k];
        }
    }
    let mut dr = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for k in 0..3 {
            let mut acc = T::zero();
            for b in 0..3 {
                acc += dsig[a][b] * rd[b][k];
            }
            dr[a][k] = two * acc;
        }
    }

    // Quaternion gradient through R(q_norm), then through the normalization.
    let (w, x, y, z) = (
        cache.q_norm[0],
        cache.q_norm[1],
        cache.q_norm[2],
        cache.q_norm[3],
    );
    let zer = T::zero();
    let drdw = [[zer, -z, y], [z, zer, -x], [-y, x, zer]];
    let drdx = [[zer, y, z], [y, -two * x, -w], [z, w, -two * x]];
    let drdy = [[-two * y, x, w], [x, zer, z], [-w, z, -two * y]];
    let drdz = [[-two * z, -w, x], [w, -two * z, y], [x, y, zer]];
    let contract = |d: &[[T; 3]; 3]| -> T {
        let mut acc = T::zero();
        for a in 0..3 {
            for b in 0..3 {
                acc += dr[a][b] * two * d[a][b];
            }
        }
        acc
    };
    let dqn = [contract(&drdw), contract(&drdx), contract(&drdy), contract(&drdz)];
    let dot = dqn[0] * w + dqn[1] * x + dqn[2] * y + dqn[3] * z;
    let inv_len = T::one() / cache.q_len;
    let d_rotation = [
        (dqn[0] - w * dot) * inv_len,
        (dqn[1] - x * dot) * inv_len,
        (dqn[2] - y * dot) * inv_len,
        (dqn[3] - z * dot) * inv_len,
    ];

    // Jacobian entries: dJ = dM * W^T restricted to the four nonzeros.
    let wr = &cache.w_rot;
    let dj00 = dm[0][0] * wr[0][0] + dm[0][1] * wr[0][1] + dm[0][2] * wr[0][2];
    let dj02 = dm[0][0] * wr[2][0] + dm[0][1] * wr[2][1] + dm[0][2] * wr[2][2];
    let dj11 = dm[1][0] * wr[1][0] + dm[1][1] * wr[1][1] + dm[1][2] * wr[1][2];
    let dj12 = dm[1][0] * wr[2][0] + dm[1][1] * wr[2][1] + dm[1][2] * wr[2][2];

    // Camera-space position gradient from the mean and from J(t).
    let t = cache.t;
    let inv_z = T::one() / t[2];
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    let (fx, fy) = (cam.fx, cam.fy);
    let du = g.d_mean[0];
    let dv = g.d_mean[1];
    let mut dt = [T::zero(); 3];
    dt[0] = du * fx * inv_z - dj02 * fx * inv_z2;
    dt[1] = dv * fy * inv_z - dj12 * fy * inv_z2;
    dt[2] = -du * fx * t[0] * inv_z2 - dv * fy * t[1] * inv_z2
        - dj00 * fx * inv_z2
        - dj11 * fy * inv_z2
        + dj02 * two * fx * t[0] * inv_z3
        + dj12 * two * fy * t[1] * inv_z3;

    // World position gradient: t = W x + trans, so dx = W^T dt.
    let mut d_center = [T::zero(); 3];
    for c in 0..3 {
        d_center[c] = wr[0][c] * dt[0] + wr[1][c] * dt[1] + wr[2][c] * dt[2];
    }

    let a = splat.alpha;
    let d_opacity_logit = g.d_alpha * a * (T::one() - a);

    Some(PrimGrads {
        d_center,
        d_log_scale,
        d_rotation,
        d_opacity_logit,
        d_color: g.d_color,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{GaussianScene, RenderOptions};

    fn test_cam() -> Camera<f64> {
        Camera::look_at(
            [0.3, -0.2, -4.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            64,
            64,
            60.0,
        )
        .unwrap()
    }

    fn test_prim() -> GaussianPrim<f64> {
        GaussianPrim {
            center: [0.1, 0.2, -0.1],
            log_scale: [-1.0, -1.4, -0.7],
            rotation: [0.9, 0.1, -0.3, 0.2],
            opacity_logit: 0.4,
            color: [0.8, 0.3, 0.5],
        }
    }

    #[test]
    fn on_axis_point_projects_to_center() {
        let cam = Camera::<f64>::look_at(
            [0.0, 0.0, -5.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            64,
            64,
            60.0,
        )
        .unwrap();
        let mut prim = test_prim();
        prim.center = [0.0, 0.0, 0.0];
        let opts = RenderOptions::default();
        let s = project_gaussian(&prim, &cam, &opts).unwrap();
        assert!((s.mean[0] - 32.0).abs() < 1e-9, "u {}", s.mean[0]);
        assert!((s.mean[1] - 32.0).abs() < 1e-9, "v {}", s.mean[1]);
        assert!((s.depth - 5.0).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = test_cam();
        let mut prim = test_prim();
        prim.center = [0.3, -0.2, -9.0]; // behind the eye along the view axis
        let opts = RenderOptions::default();
        assert!(project_gaussian(&prim, &cam, &opts).is_none());
    }

    #[test]
    fn dilation_adds_to_diagonal() {
        let cam = test_cam();
        let prim = test_prim();
        let mut opts = RenderOptions::<f64>::default();
        opts.dilation = 0.0;
        let s0 = project_gaussian(&prim, &cam, &opts).unwrap();
        opts.dilation = 0.3;
        let s1 = project_gaussian(&prim, &cam, &opts).unwrap();
        assert!((s1.cov[0] - s0.cov[0] - 0.3).abs() < 1e-12);
        assert!((s1.cov[1] - s0.cov[1]).abs() < 1e-12);
        assert!((s1.cov[2] - s0.cov[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn conic_inverts_covariance() {
        let cam = test_cam();
        let prim = test_prim();
        let opts = RenderOptions::default();
        let s = project_gaussian(&prim, &cam, &opts).unwrap();
        let [a, b, c] = s.cov;
        let [ia, ib, ic] = s.conic;
        assert!((a * ia + b * ib - 1.0).abs() < 1e-10);
        assert!((a * ib + b * ic).abs() < 1e-10);
        assert!((b * ib + c * ic - 1.0).abs() < 1e-10);
    }

    #[test]
    fn isotropic_covariance_ignores_rotation() {
        let cam = test_cam();
        let mut p1 = test_prim();
        p1.log_scale = [-1.0; 3];
        let mut p2 = p1.clone();
        p2.rotation = [0.3, -0.8, 0.1, 0.5];
        let opts = RenderOptions::default();
        let s1 = project_gaussian(&p1, &cam, &opts).unwrap();
        let s2 = project_gaussian(&p2, &cam, &opts).unwrap();
        for k in 0..3 {
            assert!((s1.cov[k] - s2.cov[k]).abs() < 1e-12);
        }
    }

    /// Central finite differences over every attribute of the projection.
    #[test]
    fn projection_backward_matches_finite_differences() {
        let cam = test_cam();
        let opts = RenderOptions {
            dilation: 0.3,
            cutoff_sq: None,
            alpha_clamp: None,
            tile_size: 16,
            threads: 1,
        };
        let prim = test_prim();

        // Scalar readout: fixed random weights over (mean, cov, alpha).
        let wts = [0.7, -0.4, 0.9, 0.25, -0.6, 0.35];
        let readout = |p: &GaussianPrim<f64>| -> f64 {
            let s = project_gaussian(p, &cam, &opts).unwrap();
            wts[0] * s.mean[0]
                + wts[1] * s.mean[1]
                + wts[2] * s.cov[0]
                + wts[3] * s.cov[1]
                + wts[4] * s.cov[2]
                + wts[5] * s.alpha
        };

        let g = SplatGrads {
            d_mean: [wts[0], wts[1]],
            d_cov: [wts[2], wts[3], wts[4]],
            d_alpha: wts[5],
            d_color: [0.0; 3],
        };
        let pg = project_backward(&prim, &cam, &opts, &g).unwrap();

        let mut analytic = Vec::new();
        analytic.extend_from_slice(&pg.d_center);
        analytic.extend_from_slice(&pg.d_log_scale);
        analytic.extend_from_slice(&pg.d_rotation);
        analytic.push(pg.d_opacity_logit);

        let h = 1e-6;
        let mut idx = 0;
        let mut check = |set: &dyn Fn(&mut GaussianPrim<f64>, f64)| {
            let mut hi = prim.clone();
            set(&mut hi, h);
            let mut lo = prim.clone();
            set(&mut lo, -h);
            let fd = (readout(&hi) - readout(&lo)) / (2.0 * h);
            let a = analytic[idx];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(rel < 1e-5, "param {idx}: analytic {a} vs fd {fd}");
            idx += 1;
        };
        for k in 0..3 {
            check(&|p, d| p.center[k] += d);
        }
        for k in 0..3 {
            check(&|p, d| p.log_scale[k] += d);
        }
        for k in 0..4 {
            check(&|p, d| p.rotation[k] += d);
        }
        check(&|p, d| p.opacity_logit += d);
    }

    #[test]
    fn scene_validate_rejects_bad_values() {
        let mut scene = GaussianScene::new(vec![test_prim()], [0.0, 0.0, 0.0]);
        assert!(scene.validate().is_ok());
        scene.prims[0].color[1] = 1.5;
        assert!(scene.validate().is_err());
        scene.prims[0].color[1] = 0.5;
        scene.prims[0].rotation = [0.0; 4];
        assert!(scene.validate().is_err());
        scene.prims[0].rotation = [1.0, 0.0, 0.0, 0.0];
        scene.prims[0].center[0] = f64::NAN;
        assert!(scene.validate().is_err());
    }
}
