//! Adam with decoupled weight decay and an explicit bias-correction switch,
//! the warmup-linear learning-rate schedule, and global-norm clipping.
//!
//! Bias correction is applied as a multiplicative factor on the step size,
//! `alpha_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t)`, with the raw (biased)
//! moments in the update `theta -= alpha_t * m / (sqrt(v) + eps)`. With the
//! switch off the factor is exactly 1.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::params::{CheckpointFile, ParamStore};
use crate::tensor::{Real, Tensor};

/// Reserved tensor-name prefix for optimizer state in checkpoint files.
pub const STATE_PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay_lambda: f64,
    pub bias_correction: bool,
    pub clip_norm: Option<f64>,
    /// Glob patterns (`*` wildcard) for parameters exempt from weight decay.
    pub decay_exempt: Vec<String>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        let (cfg, _) = preset("bert-like").expect("built-in preset");
        cfg
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(LabError::invalid(format!(
                "betas must lie in [0, 1): beta1={}, beta2={}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(LabError::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0) {
            return Err(LabError::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.weight_decay_lambda >= 0.0) {
            return Err(LabError::invalid("weight_decay_lambda must be >= 0"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(LabError::invalid(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn decays(&self, name: &str) -> bool {
        self.weight_decay_lambda > 0.0 && !self.decay_exempt.iter().any(|p| glob_match(p, name))
    }
}

pub fn default_decay_exempt() -> Vec<String> {
    vec!["*.bias".into(), "*.gain".into(), "*.offset".into()]
}

/// Extra facts from the hyperparameter table that are not optimizer fields.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetNotes {
    pub dropout: Option<f64>,
    pub note: &'static str,
}

/// Named hyperparameter presets. `alpha` defaults to 2e-5 and
/// `bias_correction` to false; callers choose both.
pub fn preset(name: &str) -> Result<(AdamConfig, PresetNotes)> {
    let base = AdamConfig {
        alpha: 2e-5,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-6,
        weight_decay_lambda: 0.01,
        bias_correction: false,
        clip_norm: Some(1.0),
        decay_exempt: default_decay_exempt(),
    };
    match name {
        "bert-like" => Ok((
            base,
            PresetNotes {
                dropout: Some(0.1),
                note: "dropout 0.1; weight decay 0.01; clip 1.0",
            },
        )),
        "roberta-like" => Ok((
            AdamConfig {
                beta2: 0.98,
                weight_decay_lambda: 0.1,
                clip_norm: None,
                ..base
            },
            PresetNotes {
                dropout: Some(0.1),
                note: "dropout 0.1; weight decay 0.1; no clipping",
            },
        )),
        "albert-like" => Ok((
            AdamConfig {
                weight_decay_lambda: 0.0,
                ..base
            },
            PresetNotes {
                dropout: None,
                note: "no dropout; no weight decay; clip 1.0",
            },
        )),
        other => Err(LabError::invalid(format!(
            "unknown preset `{other}` (expected bert-like, roberta-like or albert-like)"
        ))),
    }
}

/// `sqrt(1 - beta2^t) / (1 - beta1^t)`. Undefined before the first update.
pub fn bias_correction_factor(t: u64, beta1: f64, beta2: f64) -> Result<f64> {
    if t == 0 {
        return Err(LabError::invalid("bias correction factor undefined at t = 0"));
    }
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    Ok((1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t)))
}

/// First and second moments (64-bit) plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore<f64>,
    pub v: ParamStore<f64>,
}

impl AdamState {
    pub fn new<T: Real>(params: &ParamStore<T>) -> Self {
        let zeros = params.cast::<f64>().zeros_like();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moments stored as f32 tensors under `optim.m.*` / `optim.v.*`, step in
    /// the header under `optim.step`.
    pub fn append_to(&self, file: &mut CheckpointFile) -> Result<()> {
        file.header.insert(format!("{STATE_PREFIX}step"), self.step.to_string());
        for (prefix, store) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in store.iter() {
                file.tensors
                    .insert(format!("{STATE_PREFIX}{prefix}.{name}"), t.cast::<f32>())?;
            }
        }
        Ok(())
    }

    pub fn from_file(file: &CheckpointFile) -> Result<Option<Self>> {
        let Some(step) = file.header.get(&format!("{STATE_PREFIX}step")) else {
            return Ok(None);
        };
        let step = step
            .parse()
            .map_err(|_| LabError::Format(format!("bad optimizer step `{step}`")))?;
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, t) in file.tensors.iter() {
            if let Some(rest) = name.strip_prefix(STATE_PREFIX) {
                if let Some(p) = rest.strip_prefix("m.") {
                    m.insert(p.to_string(), t.cast::<f64>());
                } else if let Some(p) = rest.strip_prefix("v.") {
                    v.insert(p.to_string(), t.cast::<f64>());
                }
            }
        }
        Ok(Some(Self {
            step,
            m: ParamStore::from_map(m),
            v: ParamStore::from_map(v),
        }))
    }
}

/// What one update did, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub scheduled_lr: f64,
    /// Bias-correction factor actually applied (1 when disabled).
    pub factor: f64,
    pub effective_lr: f64,
}

/// One Adam step. On a non-finite gradient nothing is modified.
pub fn adam_update<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState,
    config: &AdamConfig,
    scheduled_lr: f64,
) -> Result<StepInfo> {
    if !(scheduled_lr >= 0.0) {
        return Err(LabError::invalid(format!("scheduled lr {scheduled_lr} < 0")));
    }
    if !params.same_layout_as(grads) {
        return Err(LabError::shape("adam_update", "gradients do not match parameters"));
    }
    if !state.m.same_layout_as(params) || !state.v.same_layout_as(params) {
        return Err(LabError::shape("adam_update", "optimizer state does not match parameters"));
    }
    if !grads.all_finite() {
        return Err(LabError::NonFinite { op: "adam_update" });
    }
    let step = state.step + 1;
    let factor = if config.bias_correction {
        bias_correction_factor(step, config.beta1, config.beta2)?
    } else {
        1.0
    };
    let effective_lr = scheduled_lr * factor;
    let (b1, b2, eps) = (config.beta1, config.beta2, config.epsilon);
    let decay = scheduled_lr * config.weight_decay_lambda;

    for (((name, p), (_, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let decays = config.decays(name);
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = gd[i].as_f64();
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let theta = pd[i].as_f64();
            let mut next = theta - effective_lr * md[i] / (vd[i].sqrt() + eps);
            if decays {
                next -= decay * theta;
            }
            pd[i] = T::from_f64(next);
        }
    }
    state.step = step;
    Ok(StepInfo {
        step,
        scheduled_lr,
        factor,
        effective_lr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    WarmupLinear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_ratio: f64,
    pub base_lr: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl ScheduleConfig {
    pub fn warmup_linear(total_steps: u64, warmup_ratio: f64, base_lr: f64) -> Self {
        Self {
            total_steps,
            warmup_ratio,
            base_lr,
            kind: ScheduleKind::WarmupLinear,
        }
    }

    /// `round(warmup_ratio * total_steps)`.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(LabError::invalid("schedule total_steps must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(LabError::invalid(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if self.warmup_steps() >= self.total_steps {
            return Err(LabError::invalid("warmup steps must be < total steps"));
        }
        if !(self.base_lr >= 0.0) {
            return Err(LabError::invalid("base_lr must be >= 0"));
        }
        Ok(())
    }
}

/// Linear rise from 0 at `t = 0` to `base_lr` at `t = W`, then linear decay
/// to 0 at `t = T`.
pub fn warmup_linear_lr(t: u64, schedule: &ScheduleConfig) -> Result<f64> {
    schedule.validate()?;
    let total = schedule.total_steps;
    if t > total {
        return Err(LabError::invalid(format!("step {t} beyond schedule end {total}")));
    }
    if schedule.kind == ScheduleKind::Constant {
        return Ok(schedule.base_lr);
    }
    let w = schedule.warmup_steps();
    let base = schedule.base_lr;
    Ok(if w > 0 && t <= w {
        base * t as f64 / w as f64
    } else {
        base * (total - t) as f64 / (total - w) as f64
    })
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(LabError::invalid(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(LabError::NonFinite { op: "clip_global_norm" });
    }
    if norm > max_norm {
        let mut scale = max_norm / norm;
        // Rounding in low precision can leave the result a hair above the
        // bound; shrink until it holds.
        for _ in 0..16 {
            scale_all(grads, scale);
            let after = grads.global_norm();
            if after <= max_norm + 1e-9 {
                break;
            }
            scale = (max_norm / after) * (1.0 - 1e-7);
        }
    }
    Ok(norm)
}

fn scale_all<T: Real>(grads: &mut ParamStore<T>, scale: f64) {
    for (_, t) in grads.iter_mut() {
        for x in t.data_mut() {
            *x = T::from_f64(x.as_f64() * scale);
        }
    }
}

/// Glob match where `*` matches any (possibly empty) substring.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// Single-tensor store, handy for scalar traces.
pub fn scalar_store<T: Real>(name: &str, value: T) -> ParamStore<T> {
    let mut p = ParamStore::new();
    p.insert(name, Tensor::from_slice(&[1], &[value]))
        .expect("fresh store");
    p
}
