//! Named parameter groups with role tags and the AdamW optimizer state.
//!
//! Groups live in insertion order (never a hash map), so iteration order — and
//! therefore every floating-point reduction that walks the store — is
//! deterministic across runs.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::num::Scalar;

/// Which model a parameter group belongs to: the scene delta generator
/// (theta), the payload injector (phi), or the decoder (psi). Harmonization
/// scopes and selective optimizer steps filter on this tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Theta,
    Phi,
    Psi,
}

impl Role {
    pub fn as_u8(self) -> u8 {
        match self {
            Role::Theta => 0,
            Role::Phi => 1,
            Role::Psi => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Role> {
        match v {
            0 => Ok(Role::Theta),
            1 => Ok(Role::Phi),
            2 => Ok(Role::Psi),
            _ => Err(Error::Format(format!("unknown role tag {v}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGroup<T: Scalar> {
    pub name: String,
    pub role: Role,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// AdamW hyperparameters. Weight decay is decoupled (applied directly to the
/// parameter, not through the moment estimates).
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Scalar> AdamWConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        AdamWConfig {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay: T::zero(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    groups: Vec<ParamGroup<T>>,
    /// Number of optimizer steps taken (the bias-correction t).
    pub step_count: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            groups: Vec::new(),
            step_count: 0,
        }
    }

    /// Adds a group and returns its stable index. Names must be unique.
    pub fn add(&mut self, name: &str, role: Role, value: Tensor<T>) -> Result<usize> {
        if self.groups.iter().any(|g| g.name == name) {
            return Err(Error::Validation(format!("duplicate parameter group {name}")));
        }
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.groups.push(ParamGroup {
            name: name.to_string(),
            role,
            value,
            grad: None,
            m,
            v,
        });
        Ok(self.groups.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, idx: usize) -> &ParamGroup<T> {
        &self.groups[idx]
    }

    pub fn group_mut(&mut self, idx: usize) -> &mut ParamGroup<T> {
        &mut self.groups[idx]
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Registers every group as a trainable leaf on a fresh tape, in store
    /// order. The returned vars are index-aligned with the groups.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.groups
            .iter()
            .map(|g| tape.leaf(g.value.clone()))
            .collect()
    }

    /// Pairs the store with the vars produced by [`ParamStore::bind`] so
    /// model code can fetch parameters by name.
    pub fn bound<'a>(&'a self, vars: &'a [Var]) -> Bound<'a, T> {
        Bound { store: self, vars }
    }

    /// Installs the per-group gradient for this step (replaces any previous).
    pub fn set_grad(&mut self, idx: usize, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.groups[idx].value.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} vs parameter {:?} for group {}",
                grad.shape(),
                self.groups[idx].value.shape(),
                self.groups[idx].name
            )));
        }
        self.groups[idx].grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.groups {
            g.grad = None;
        }
    }

    /// One AdamW step over the groups whose role passes `filter` (None = all).
    /// Erroring on a selected group without a gradient catches wiring bugs
    /// where a model was never reached by backward.
    pub fn adamw_step(&mut self, cfg: &AdamWConfig<T>, filter: Option<&[Role]>) -> Result<()> {
        for g in &self.groups {
            let selected = filter.map_or(true, |roles| roles.contains(&g.role));
            if selected && g.grad.is_none() {
                return Err(Error::Validation(format!(
                    "adamw step on group {} with no accumulated gradient",
                    g.name
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = T::one() - cfg.beta1.powi(t as i32);
        let bc2 = T::one() - cfg.beta2.powi(t as i32);
        for g in &mut self.groups {
            let selected = filter.map_or(true, |roles| roles.contains(&g.role));
            if !selected {
                continue;
            }
            let grad = g.grad.as_ref().expect("checked above");
            let gm = g.m.data_mut();
            let gv = g.v.data_mut();
            let gp = g.value.data_mut();
            for ((p, (m, v)), &gr) in gp
                .iter_mut()
                .zip(gm.iter_mut().zip(gv.iter_mut()))
                .zip(grad.data())
            {
                *m = cfg.beta1 * *m + (T::one() - cfg.beta1) * gr;
                *v = cfg.beta2 * *v + (T::one() - cfg.beta2) * gr * gr;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
            }
            g.value.ensure_finite(&format!("adamw step on {}", g.name))?;
        }
        self.clear_grads();
        Ok(())
    }
}

/// Name-based view over a store and its bound tape vars.
#[derive(Clone, Copy)]
pub struct Bound<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
    pub vars: &'a [Var],
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter group '{name}'")))
    }
}
