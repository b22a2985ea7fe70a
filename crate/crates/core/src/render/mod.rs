//! Differentiable 3D Gaussian splat renderer.
//!
//! Scenes are unordered sets of anisotropic 3D Gaussians. Rendering projects
//! each Gaussian to a 2D splat, sorts splats front to back by view depth and
//! alpha-composites them over a constant background. Both a per-pixel
//! reference rasterizer and a tiled rasterizer are provided; they produce
//! identical images, and the analytic backward pass propagates pixel
//! gradients to every Gaussian attribute.

mod camera;
mod project;
mod raster;
mod tape_op;

pub use camera::{Camera, CameraRig};
pub use project::{project_gaussian, ProjectedSplat};
pub use raster::{render, render_backward, render_detailed, tile_render, PixelBreakdown};
pub use tape_op::{render_on_tape, scene_from_tensors, scene_to_tensors, SceneVars};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Log-scales are clamped to this range when a covariance is built, keeping
/// `exp(2s)` comfortably inside normal floating-point range.
pub const LOG_SCALE_MIN: f64 = -13.815510557964274; // ln(1e-6)
pub const LOG_SCALE_MAX: f64 = 6.907755278982137; // ln(1e3)

/// One anisotropic 3D Gaussian primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrim<T> {
    pub center: [T; 3],
    /// Per-axis log standard deviations.
    pub log_scale: [T; 3],
    /// Rotation quaternion `(w, x, y, z)`; renormalized whenever used.
    pub rotation: [T; 4],
    /// Opacity before the sigmoid.
    pub opacity_logit: T,
    /// RGB in `[0, 1]`.
    pub color: [T; 3],
}

/// A set of Gaussians plus the constant background they are composited over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene<T> {
    pub prims: Vec<GaussianPrim<T>>,
    pub background: [T; 3],
}

impl<T: Scalar> GaussianScene<T> {
    pub fn new(prims: Vec<GaussianPrim<T>>, background: [T; 3]) -> Self {
        GaussianScene { prims, background }
    }

    pub fn len(&self) -> usize {
        self.prims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prims.is_empty()
    }

    /// Checks every attribute is finite, colors are inside `[0, 1]` and no
    /// rotation quaternion is numerically zero.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.prims.iter().enumerate() {
            let fields = p
                .center
                .iter()
                .chain(p.log_scale.iter())
                .chain(p.rotation.iter())
                .chain(p.color.iter())
                .chain(std::iter::once(&p.opacity_logit));
            for v in fields {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("gaussian {i} has a non-finite field")));
                }
            }
            for c in p.color {
                if c < T::zero() || c > T::one() {
                    return Err(Error::Validation(format!(
                        "gaussian {i} color outside [0,1]"
                    )));
                }
            }
            let qn = p.rotation.iter().map(|v| *v * *v).fold(T::zero(), |a, b| a + b);
            if qn < T::of(1e-12) {
                return Err(Error::Validation(format!("gaussian {i} has a zero quaternion")));
            }
        }
        for b in self.background {
            if !b.is_finite() || b < T::zero() || b > T::one() {
                return Err(Error::Validation("background color outside [0,1]".into()));
            }
        }
        Ok(())
    }

    /// Scene diameter estimate: twice the max center distance from the
    /// centroid. Returns zero for empty scenes.
    pub fn diameter(&self) -> T {
        if self.prims.is_empty() {
            return T::zero();
        }
        let n = T::of(self.prims.len() as f64);
        let mut c = [T::zero(); 3];
        for p in &self.prims {
            for k in 0..3 {
                c[k] += p.center[k];
            }
        }
        for v in &mut c {
            *v /= n;
        }
        let mut best = T::zero();
        for p in &self.prims {
            let mut d2 = T::zero();
            for k in 0..3 {
                let d = p.center[k] - c[k];
                d2 += d * d;
            }
            if d2 > best {
                best = d2;
            }
        }
        T::of(2.0) * best.sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> GaussianScene<U> {
        let c = |v: T| U::of(v.widen());
        GaussianScene {
            prims: self
                .prims
                .iter()
                .map(|p| GaussianPrim {
                    center: p.center.map(c),
                    log_scale: p.log_scale.map(c),
                    rotation: p.rotation.map(c),
                    opacity_logit: c(p.opacity_logit),
                    color: p.color.map(c),
                })
                .collect(),
            background: self.background.map(c),
        }
    }
}

/// Rasterizer knobs. The defaults are the training configuration; the
/// `Option` fields exist so finite-difference tests can disable the
/// non-smooth pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions<T> {
    /// Isotropic blur added to every projected covariance (pixels^2).
    pub dilation: T,
    /// Skip contributions with squared Mahalanobis distance above this.
    pub cutoff_sq: Option<T>,
    /// Upper clamp on per-splat effective alpha.
    pub alpha_clamp: Option<T>,
    /// Side length of rasterizer tiles; must be 8, 16 or 32.
    pub tile_size: usize,
    /// Worker threads for the tiled rasterizer (1 = serial). Output is
    /// identical for any value.
    pub threads: usize,
}

impl<T: Scalar> Default for RenderOptions<T> {
    fn default() -> Self {
        RenderOptions {
            dilation: T::of(0.3),
            cutoff_sq: Some(T::of(9.0)),
            alpha_clamp: Some(T::of(0.99)),
            tile_size: 16,
            threads: 1,
        }
    }
}

impl<T: Scalar> RenderOptions<T> {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.tile_size, 8 | 16 | 32) {
            return Err(Error::Validation(format!(
                "tile size must be 8, 16 or 32, got {}",
                self.tile_size
            )));
        }
        if self.threads == 0 {
            return Err(Error::Validation("thread count must be at least 1".into()));
        }
        if self.dilation < T::zero() {
            return Err(Error::Validation("dilation must be non-negative".into()));
        }
        Ok(())
    }
}

/// A rendered RGB image plus per-pixel accumulated opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, `height * width * 3`.
    pub pixels: Vec<T>,
    /// Row-major accumulated splat weight (before background), `height * width`.
    pub alpha: Vec<T>,
}

impl<T: Scalar> RenderedImage<T> {
    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Gradients of a scalar loss with respect to every Gaussian attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads<T> {
    pub centers: Vec<[T; 3]>,
    pub log_scales: Vec<[T; 3]>,
    pub rotations: Vec<[T; 4]>,
    pub opacity_logits: Vec<T>,
    pub colors: Vec<[T; 3]>,
}

impl<T: Scalar> SceneGrads<T> {
    pub fn zeros(n: usize) -> Self {
        SceneGrads {
            centers: vec![[T::zero(); 3]; n],
            log_scales: vec![[T::zero(); 3]; n],
            rotations: vec![[T::zero(); 4]; n],
            opacity_logits: vec![T::zero(); n],
            colors: vec![[T::zero(); 3]; n],
        }
    }
}
