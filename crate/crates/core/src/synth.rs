//! Procedural base scenes: Gaussians sampled on a sphere, torus or box
//! surface, oriented as surface-aligned disks and colored by a seeded
//! sinusoid texture field. Stands in for captured objects so every pipeline
//! stage has a deterministic input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{subseed, Scalar};
use crate::render::{GaussianPrim, GaussianScene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthShape {
    Sphere,
    Torus,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub shape: SynthShape,
    pub prim_count: usize,
    pub seed: u64,
    /// Overall object scale (sphere radius, torus major radius, box half
    /// diagonal scale).
    pub size: f64,
    pub background: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            shape: SynthShape::Sphere,
            prim_count: 2000,
            seed: 7,
            size: 1.0,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prim_count == 0 {
            return Err(Error::Validation("prim_count must be at least 1".into()));
        }
        if !self.size.is_finite() || self.size <= 0.0 {
            return Err(Error::Validation(format!("size must be positive, got {}", self.size)));
        }
        for b in self.background {
            if !b.is_finite() || !(0.0..=1.0).contains(&b) {
                return Err(Error::Validation("background color outside [0,1]".into()));
            }
        }
        Ok(())
    }
}

/// Shortest-arc quaternion `(w,x,y,z)` rotating +z onto `n` (unit length).
pub fn quat_z_to(n: [f64; 3]) -> [f64; 4] {
    let d = n[2];
    if d < -1.0 + 1e-9 {
        // Antipodal: any 180-degree flip through an equatorial axis works.
        return [0.0, 1.0, 0.0, 0.0];
    }
    // axis = e_z x n, w = 1 + e_z . n, then normalize.
    let q = [1.0 + d, -n[1], n[0], 0.0];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]
}

/// Applies quaternion `q = (w,x,y,z)` to vector `v`.
pub fn quat_rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    // t = 2 q_vec x v; v' = v + w t + q_vec x t
    let t = [
        2.0 * (y * v[2] - z * v[1]),
        2.0 * (z * v[0] - x * v[2]),
        2.0 * (x * v[1] - y * v[0]),
    ];
    [
        v[0] + w * t[0] + (y * t[2] - z * t[1]),
        v[1] + w * t[1] + (z * t[0] - x * t[2]),
        v[2] + w * t[2] + (x * t[1] - y * t[0]),
    ]
}

/// Smooth seeded RGB field over 3D position: two sinusoid harmonics per
/// channel, bounded away from 0 and 1.
struct TextureField {
    freq1: [[f64; 3]; 3],
    phase1: [f64; 3],
    freq2: [[f64; 3]; 3],
    phase2: [f64; 3],
}

impl TextureField {
    fn new(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let mut freq = |lo: f64, hi: f64| -> [[f64; 3]; 3] {
            [[0.0; 3]; 3].map(|_| [0.0; 3].map(|_| rng.gen_range(lo..hi) / size))
        };
        let freq1 = freq(1.5, 4.5);
        let freq2 = freq(4.0, 9.0);
        let mut phase = || [0.0; 3].map(|_| rng.gen_range(0.0..std::f64::consts::TAU));
        TextureField { freq1, phase1: phase(), freq2, phase2: phase() }
    }

    fn color(&self, p: [f64; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for ch in 0..3 {
            let a1: f64 = (0..3).map(|i| self.freq1[ch][i] * p[i]).sum();
            let a2: f64 = (0..3).map(|i| self.freq2[ch][i] * p[i]).sum();
            c[ch] = 0.5 + 0.25 * (a1 + self.phase1[ch]).sin() + 0.15 * (a2 + self.phase2[ch]).sin();
        }
        c
    }
}

struct SurfaceSample {
    point: [f64; 3],
    normal: [f64; 3],
}

fn sample_surface(shape: SynthShape, i: usize, n: usize, size: f64, rng: &mut ChaCha8Rng) -> SurfaceSample {
    match shape {
        SynthShape::Sphere => {
            // Fibonacci spiral: even coverage without RNG.
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let az = golden * i as f64;
            let normal = [r * az.cos(), z, r * az.sin()];
            SurfaceSample { point: normal.map(|v| v * size), normal }
        }
        SynthShape::Torus => {
            let major = size;
            let minor = 0.35 * size;
            let u = rng.gen_range(0.0..std::f64::consts::TAU);
            // Uniform area needs density proportional to the local ring
            // radius; rejection against the outermost ring provides it.
            let v = loop {
                let v = rng.gen_range(0.0..std::f64::consts::TAU);
                let accept = (major + minor * v.cos()) / (major + minor);
                if rng.gen_range(0.0..1.0) < accept {
                    break v;
                }
            };
            let ring = major + minor * v.cos();
            SurfaceSample {
                point: [ring * u.cos(), minor * v.sin(), ring * u.sin()],
                normal: [v.cos() * u.cos(), v.sin(), v.cos() * u.sin()],
            }
        }
        SynthShape::Box => {
            let h = 0.7 * size;
            let axis = rng.gen_range(0..3usize);
            let side = if rng.gen_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            let a = rng.gen_range(-h..h);
            let b = rng.gen_range(-h..h);
            let mut point = [0.0; 3];
            let mut normal = [0.0; 3];
            point[axis] = side * h;
            normal[axis] = side;
            point[(axis + 1) % 3] = a;
            point[(axis + 2) % 3] = b;
            SurfaceSample { point, normal }
        }
    }
}

fn surface_area(shape: SynthShape, size: f64) -> f64 {
    match shape {
        SynthShape::Sphere => 4.0 * std::f64::consts::PI * size * size,
        SynthShape::Torus => {
            4.0 * std::f64::consts::PI * std::f64::consts::PI * size * (0.35 * size)
        }
        SynthShape::Box => 24.0 * (0.7 * size) * (0.7 * size),
    }
}

/// Builds a deterministic procedural scene: `prim_count` surface-aligned
/// Gaussian disks sized so the surface is covered, textured by a seeded
/// smooth color field.
pub fn synthesize<T: Scalar>(cfg: &SynthConfig) -> Result<GaussianScene<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "synth"));
    let texture = TextureField::new(&mut rng, cfg.size);
    let n = cfg.prim_count;
    // Tangent radius from the per-primitive area share, padded for overlap.
    let sigma_t = (surface_area(cfg.shape, cfg.size) / n as f64 / std::f64::consts::PI).sqrt() * 0.9;
    let sigma_n = sigma_t * 0.25;
    let mut prims = Vec::with_capacity(n);
    for i in 0..n {
        let s = sample_surface(cfg.shape, i, n, cfg.size, &mut rng);
        let jitter = rng.gen_range(0.7..1.3);
        let q = quat_z_to(s.normal);
        let color = texture.color(s.point);
        let opacity = rng.gen_range(1.0..2.0);
        prims.push(GaussianPrim {
            center: s.point.map(T::of),
            log_scale: [
                T::of((sigma_t * jitter).ln()),
                T::of((sigma_t * jitter).ln()),
                T::of(sigma_n.ln()),
            ],
            rotation: q.map(T::of),
            opacity_logit: T::of(opacity),
            color: color.map(|c| T::of(c.clamp(0.0, 1.0))),
        });
    }
    let scene = GaussianScene::new(prims, cfg.background.map(T::of));
    scene.validate()?;
    Ok(scene)
}
