//! Versioned binary training checkpoints.
//!
//! A checkpoint is everything recovery and resumption need: the optimizer
//! state (all parameter groups with Adam moments), the camera rig including
//! which camera is the checking view, a content hash of the base scene the
//! run started from, the run seed, a JSON snapshot of the run configuration,
//! and named auxiliary tensors (payload data, cached renders).
//!
//! Layout, all little endian: magic `GSTG`, u32 version, 32-byte base scene
//! hash, u64 seed, camera rig, u32 checking index, length-prefixed config
//! JSON, named f64 tensor extras, parameter groups, and a trailing SHA-256
//! over everything before it. Floats are stored as f64, which is exact for
//! both supported scalar types.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::num::Scalar;
use crate::render::{Camera, CameraRig, GaussianScene};
use crate::tensor::{ParamStore, Role, Tensor};

const MAGIC: &[u8; 4] = b"GSTG";
const VERSION: u32 = 1;
/// Element-count cap per tensor, guarding allocations against corrupt sizes.
const MAX_ELEMS: usize = 1 << 27;

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    /// Content hash of the base scene this run embeds into.
    pub base_scene_hash: [u8; 32],
    /// Run seed; all stream seeds derive from it.
    pub seed: u64,
    pub rig: CameraRig<T>,
    /// Index of the checking view inside `rig`.
    pub checking_index: usize,
    /// Run configuration snapshot, kept as raw JSON.
    pub config: serde_json::Value,
    /// Named auxiliary tensors: payload image or bits, cached clean renders.
    pub extras: Vec<(String, Tensor<T>)>,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    /// The checking camera. Recovery is undefined without one, so absence is
    /// an error rather than an option.
    pub fn checking_camera(&self) -> Result<&Camera<T>> {
        self.rig
            .cameras
            .get(self.checking_index)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "checkpoint has no checking camera: index {} in a rig of {}",
                    self.checking_index,
                    self.rig.len()
                ))
            })
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<T>> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Content hash of a scene: SHA-256 over the primitive fields and background
/// in storage order, little-endian f32.
pub fn scene_hash(scene: &GaussianScene<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((scene.len() as u64).to_le_bytes());
    for p in &scene.prims {
        let fields = p
            .center
            .iter()
            .chain(p.log_scale.iter())
            .chain(p.rotation.iter())
            .chain(std::iter::once(&p.opacity_logit))
            .chain(p.color.iter());
        for v in fields {
            h.update(v.to_le_bytes());
        }
    }
    for b in scene.background {
        h.update(b.to_le_bytes());
    }
    h.finalize().into()
}

fn role_tag(role: Role) -> u8 {
    match role {
        Role::Theta => 0,
        Role::Phi => 1,
        Role::Psi => 2,
    }
}

fn role_from_tag(tag: u8) -> Result<Role> {
    match tag {
        0 => Ok(Role::Theta),
        1 => Ok(Role::Phi),
        2 => Ok(Role::Psi),
        other => Err(Error::Format(format!("unknown parameter role tag {other}"))),
    }
}

fn write_tensor<T: Scalar>(w: &mut ByteWriter, t: &Tensor<T>) {
    w.u32(t.shape().len() as u32);
    for d in t.shape() {
        w.u64(*d as u64);
    }
    for v in t.data() {
        w.f64(v.widen());
    }
}

fn read_tensor<T: Scalar>(r: &mut ByteReader) -> Result<Tensor<T>> {
    let ndim = r.u32()? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("tensor rank {ndim} is implausible")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut elems = 1usize;
    for _ in 0..ndim {
        let d = r.u64()? as usize;
        elems = elems
            .checked_mul(d)
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(elems);
    for _ in 0..elems {
        data.push(T::of(r.f64()?));
    }
    Tensor::from_vec(&shape, data)
}

fn write_camera<T: Scalar>(w: &mut ByteWriter, c: &Camera<T>) {
    w.u32(c.width as u32);
    w.u32(c.height as u32);
    for v in [c.fx, c.fy, c.cx, c.cy] {
        w.f64(v.widen());
    }
    for row in &c.rot {
        for v in row {
            w.f64(v.widen());
        }
    }
    for v in &c.trans {
        w.f64(v.widen());
    }
    w.f64(c.near.widen());
    w.f64(c.far.widen());
}

fn read_camera<T: Scalar>(r: &mut ByteReader) -> Result<Camera<T>> {
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let mut scalars = [0.0f64; 4 + 9 + 3 + 2];
    for v in &mut scalars {
        *v = r.f64()?;
    }
    let s = |i: usize| T::of(scalars[i]);
    Ok(Camera {
        width,
        height,
        fx: s(0),
        fy: s(1),
        cx: s(2),
        cy: s(3),
        rot: [
            [s(4), s(5), s(6)],
            [s(7), s(8), s(9)],
            [s(10), s(11), s(12)],
        ],
        trans: [s(13), s(14), s(15)],
        near: s(16),
        far: s(17),
    })
}

pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    ck.checking_camera()?;
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.bytes(&ck.base_scene_hash);
    w.u64(ck.seed);
    w.u32(ck.rig.len() as u32);
    w.u32(ck.checking_index as u32);
    for cam in &ck.rig.cameras {
        write_camera(&mut w, cam);
    }
    let config = serde_json::to_vec(&ck.config)?;
    w.u64(config.len() as u64);
    w.bytes(&config);
    w.u32(ck.extras.len() as u32);
    for (name, t) in &ck.extras {
        w.string(name);
        write_tensor(&mut w, t);
    }
    w.u64(ck.store.step_count);
    w.u32(ck.store.len() as u32);
    for g in ck.store.groups() {
        w.string(&g.name);
        w.u8(role_tag(g.role));
        write_tensor(&mut w, &g.value);
        write_tensor(&mut w, &g.m);
        write_tensor(&mut w, &g.v);
    }
    let digest: [u8; 32] = Sha256::digest(&w.buf).into();
    w.bytes(&digest);
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    if bytes.len() < 40 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest != trailer {
        return Err(Error::Format("checkpoint integrity check failed".into()));
    }

    let mut r = ByteReader::new(&body[4..]);
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let mut base_scene_hash = [0u8; 32];
    base_scene_hash.copy_from_slice(r.bytes(32)?);
    let seed = r.u64()?;
    let rig_len = r.u32()? as usize;
    let checking_index = r.u32()? as usize;
    if rig_len > 100_000 {
        return Err(Error::Format("implausible rig size".into()));
    }
    let mut cameras = Vec::with_capacity(rig_len);
    for _ in 0..rig_len {
        cameras.push(read_camera(&mut r)?);
    }
    let config_len = r.u64()? as usize;
    let config: serde_json::Value = serde_json::from_slice(r.bytes(config_len)?)?;
    let n_extras = r.u32()? as usize;
    let mut extras = Vec::with_capacity(n_extras.min(1024));
    for _ in 0..n_extras {
        let name = r.string()?;
        extras.push((name, read_tensor(&mut r)?));
    }
    let step_count = r.u64()?;
    let n_groups = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_groups {
        let name = r.string()?;
        let role = role_from_tag(r.u8()?)?;
        let value = read_tensor(&mut r)?;
        let m = read_tensor(&mut r)?;
        let v = read_tensor(&mut r)?;
        let idx = store.add(&name, role, value)?;
        store.group_mut(idx).m = m;
        store.group_mut(idx).v = v;
    }
    store.step_count = step_count;
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "checkpoint has {} unexpected trailing bytes",
            r.remaining()
        )));
    }

    let ck = Checkpoint {
        base_scene_hash,
        seed,
        rig: CameraRig { cameras },
        checking_index,
        config,
        extras,
        store,
    };
    ck.checking_camera()?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        store
            .add("theta.w", Role::Theta, Tensor::uniform(&[3, 4], &mut rng, -1.0, 1.0))
            .unwrap();
        store
            .add("psi.k", Role::Psi, Tensor::uniform(&[2, 2, 3, 3], &mut rng, -1.0, 1.0))
            .unwrap();
        let idx = store.index_of("theta.w").unwrap();
        store.group_mut(idx).m = Tensor::uniform(&[3, 4], &mut rng, -0.1, 0.1);
        store.group_mut(idx).v = Tensor::uniform(&[3, 4], &mut rng, 0.0, 0.1);
        store.step_count = 42;

        let rig = CameraRig::orbit(5, 3.0, 30.0, 64, 64, 50.0).unwrap();
        Checkpoint {
            base_scene_hash: [7u8; 32],
            seed: 1234,
            rig,
            checking_index: 2,
            config: serde_json::json!({"steps": 100, "lr": 1e-4, "tag": "unit"}),
            extras: vec![
                ("payload".into(), Tensor::uniform(&[3, 8, 8], &mut rng, 0.0, 1.0)),
                ("clean".into(), Tensor::uniform(&[3, 8, 8], &mut rng, 0.0, 1.0)),
            ],
            store,
        }
    }

    fn assert_field_identical(a: &Checkpoint<f32>, b: &Checkpoint<f32>) {
        assert_eq!(a.base_scene_hash, b.base_scene_hash);
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.checking_index, b.checking_index);
        assert_eq!(a.config, b.config);
        assert_eq!(a.rig.cameras, b.rig.cameras);
        assert_eq!(a.extras.len(), b.extras.len());
        for ((na, ta), (nb, tb)) in a.extras.iter().zip(&b.extras) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        assert_eq!(a.store.step_count, b.store.step_count);
        assert_eq!(a.store.len(), b.store.len());
        for (ga, gb) in a.store.groups().iter().zip(b.store.groups()) {
            assert_eq!(ga.name, gb.name);
            assert_eq!(ga.role, gb.role);
            assert_eq!(ga.value, gb.value);
            assert_eq!(ga.m, gb.m);
            assert_eq!(ga.v, gb.v);
        }
    }

    #[test]
    fn round_trip_is_field_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let ck = sample_checkpoint();
        save_checkpoint(&ck, &path).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_field_identical(&ck, &back);
    }

    #[test]
    fn checking_camera_must_exist() {
        let mut ck = sample_checkpoint();
        ck.checking_index = 99;
        let dir = tempfile::tempdir().unwrap();
        let err = save_checkpoint(&ck, &dir.path().join("x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("checking camera"), "error was: {err}");

        ck.rig = CameraRig { cameras: vec![] };
        ck.checking_index = 0;
        assert!(ck.checking_camera().is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("integrity"), "error was: {err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOPEnope").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn scene_hash_tracks_content() {
        use crate::render::GaussianPrim;
        let prim = GaussianPrim {
            center: [0.0f32, 0.0, 0.0],
            log_scale: [-1.0, -1.0, -1.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color: [0.5, 0.5, 0.5],
        };
        let a = GaussianScene::new(vec![prim.clone()], [0.0, 0.0, 0.0]);
        let mut b = a.clone();
        assert_eq!(scene_hash(&a), scene_hash(&b));
        b.prims[0].color[0] = 0.5000001;
        assert_ne!(scene_hash(&a), scene_hash(&b));
    }
}
