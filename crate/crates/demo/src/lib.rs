//! WebAssembly bindings for the static demo page.

use ftlab::metrics::levene_test;
use ftlab::optim::{
    adam_update, bias_correction_factor, scalar_store, warmup_linear_lr, AdamConfig, AdamState, ScheduleConfig,
};
use wasm_bindgen::prelude::*;

fn js(e: ftlab::LabError) -> JsError {
    JsError::new(&e.to_string())
}

/// Effective step size `lr(t) * factor(t)` for `t = 1..=steps` under a
/// warmup-linear schedule. With `bias_correction` off the factor is 1.
#[wasm_bindgen]
pub fn effective_lr_curve(
    base_lr: f64,
    steps: u32,
    warmup_ratio: f64,
    beta1: f64,
    beta2: f64,
    bias_correction: bool,
) -> Result<Vec<f64>, JsError> {
    let s = ScheduleConfig::warmup_linear(u64::from(steps), warmup_ratio, base_lr);
    (1..=u64::from(steps))
        .map(|t| {
            let factor = if bias_correction { bias_correction_factor(t, beta1, beta2)? } else { 1.0 };
            Ok(warmup_linear_lr(t, &s)? * factor)
        })
        .collect::<ftlab::Result<_>>()
        .map_err(js)
}

/// The bias-correction factor for `t = 1..=steps`.
#[wasm_bindgen]
pub fn correction_factors(steps: u32, beta1: f64, beta2: f64) -> Result<Vec<f64>, JsError> {
    (1..=u64::from(steps))
        .map(|t| bias_correction_factor(t, beta1, beta2))
        .collect::<ftlab::Result<_>>()
        .map_err(js)
}

/// Parameter values of one scalar under Adam with a constant gradient,
/// starting at `theta`; entry `i` is the value after `i` steps.
#[wasm_bindgen]
pub fn adam_scalar_trace(theta: f64, grad: f64, lr: f64, steps: u32, bias_correction: bool) -> Result<Vec<f64>, JsError> {
    let cfg = AdamConfig { alpha: lr, epsilon: 0.0, weight_decay_lambda: 0.0, bias_correction, ..AdamConfig::default() };
    let mut p = scalar_store("theta", theta);
    let g = scalar_store("theta", grad);
    let mut state = AdamState::new(&p);
    let mut out = vec![theta];
    for _ in 0..steps {
        adam_update(&mut p, &g, &mut state, &cfg, lr).map_err(js)?;
        out.push(p.require("theta").map_err(js)?.item());
    }
    Ok(out)
}

fn parse_group(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect()
}

/// Levene's test on two groups given as comma- or space-separated numbers;
/// returns `[W, p]`.
#[wasm_bindgen]
pub fn levene(a: &str, b: &str) -> Result<Vec<f64>, JsError> {
    let groups = [parse_group(a), parse_group(b)]
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| JsError::new(&e))?;
    let r = levene_test(&groups).map_err(js)?;
    Ok(vec![r.w, r.p])
}
