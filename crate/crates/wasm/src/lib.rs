//! Browser bindings for three small interactive views:
//!
//! - a CTC explorer: loss, exhaustive check, greedy output and per-frame
//!   label occupancy for a hand-edited logit matrix
//! - a span-mask simulator for masked unit prediction
//! - top-2 expert routing of router logits
//!
//! Each entry point takes and returns JSON strings. The `*_json` functions
//! are plain Rust and are what the tests exercise; the `#[wasm_bindgen]`
//! wrappers only convert errors.

use lupet_core::ctc::{collapse, ctc_greedy_decode, ctc_loss, ctc_loss_bruteforce, CtcInput, BRUTEFORCE_MAX_PATHS};
use lupet_core::moe::route_logits;
use lupet_core::numerics::{Graph, Tensor};
use lupet_core::quantizer::{apply_mask, MaskSpec, STACK};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

type Res<T> = std::result::Result<T, String>;

fn matrix(rows: &[Vec<f64>]) -> Res<Tensor> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err("matrix must be non-empty".into());
    }
    Tensor::from_rows(rows).map_err(|e| e.to_string())
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[derive(Deserialize)]
pub struct CtcRequest {
    /// Unnormalised scores `[frames][labels]`; label 0 is the blank.
    pub logits: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CtcResponse {
    pub loss: f64,
    /// Sum over all paths, when there are few enough of them.
    pub bruteforce: Option<f64>,
    pub greedy: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    /// Posterior probability that frame `t` emits label `k` on a path
    /// that collapses to the targets.
    pub occupancy: Vec<Vec<f64>>,
}

pub fn ctc_explore_json(request: &str) -> Res<String> {
    let req: CtcRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let logits = matrix(&req.logits)?;
    let g = Graph::new();
    let z = g.leaf(logits);
    let lp = g.log_softmax(z, 1).map_err(|e| e.to_string())?;
    let loss = ctc_loss(&g, lp, &req.targets).map_err(|e| e.to_string())?;
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let lp_t = (*g.value(lp)).clone();
    let probs: Vec<Vec<f64>> = to_rows(&lp_t)
        .into_iter()
        .map(|r| r.into_iter().map(f64::exp).collect())
        .collect();
    // d loss / d logits = softmax - occupancy.
    let grad = grads.get(z).ok_or("no gradient")?;
    let occupancy = probs
        .iter()
        .enumerate()
        .map(|(t, p)| p.iter().zip(grad.row(t)).map(|(p, g)| p - g).collect())
        .collect();
    let (t, a) = (lp_t.rows(), lp_t.last_dim());
    let small = (a as u128).checked_pow(t as u32).is_some_and(|n| n <= BRUTEFORCE_MAX_PATHS / 100);
    let bruteforce = if small {
        let input = CtcInput::new(lp_t.clone(), req.targets.clone()).map_err(|e| e.to_string())?;
        Some(ctc_loss_bruteforce(&input).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let resp = CtcResponse {
        loss: g.value(loss).item(),
        bruteforce,
        greedy: ctc_greedy_decode(&lp_t),
        probs,
        occupancy,
    };
    serde_json::to_string(&resp).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
pub struct MaskRequest {
    pub frames: usize,
    pub start_prob: f64,
    pub span: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskResponse {
    pub masked: Vec<usize>,
    pub fraction: f64,
    pub expected: f64,
    /// Subsampled positions (groups of four frames) touching a mask.
    pub masked_groups: Vec<usize>,
}

pub fn simulate_mask_json(request: &str) -> Res<String> {
    let req: MaskRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if req.frames == 0 || req.frames > 1_000_000 {
        return Err("frames must be in 1..=1000000".into());
    }
    let spec = MaskSpec {
        start_prob: req.start_prob,
        span: req.span,
        noise_std: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let (_, masked) = apply_mask(&Tensor::zeros(&[req.frames, 1]), &spec, &mut rng).map_err(|e| e.to_string())?;
    let mut groups: Vec<usize> = masked.iter().map(|f| f / STACK).collect();
    groups.dedup();
    let resp = MaskResponse {
        fraction: masked.len() as f64 / req.frames as f64,
        expected: spec.expected_fraction(),
        masked,
        masked_groups: groups,
    };
    serde_json::to_string(&resp).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
pub struct RouteRequest {
    /// Router scores `[frames][experts]`.
    pub logits: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RouteResponse {
    pub experts: Vec<[usize; 2]>,
    pub weights: Vec<[f64; 2]>,
    pub probs: Vec<Vec<f64>>,
    /// Share of expert slots taken by each expert.
    pub load: Vec<f64>,
}

pub fn route_json(request: &str) -> Res<String> {
    let req: RouteRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let r = route_logits(&matrix(&req.logits)?).map_err(|e| e.to_string())?;
    let mut load = vec![0.0; r.n_experts()];
    for pair in &r.experts {
        for &e in pair {
            load[e] += 1.0;
        }
    }
    let slots = 2.0 * r.frames() as f64;
    load.iter_mut().for_each(|l| *l /= slots);
    let resp = RouteResponse {
        experts: r.experts.clone(),
        weights: r.weights.clone(),
        probs: to_rows(&r.probs),
        load,
    };
    serde_json::to_string(&resp).map_err(|e| e.to_string())
}

/// Labels of a path after merging repeats and dropping blanks.
pub fn collapse_json(path: &str) -> Res<String> {
    let p: Vec<usize> = serde_json::from_str(path).map_err(|e| e.to_string())?;
    serde_json::to_string(&collapse(&p)).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn ctc_explore(request: &str) -> std::result::Result<String, JsValue> {
    ctc_explore_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn simulate_mask(request: &str) -> std::result::Result<String, JsValue> {
    simulate_mask_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn route(request: &str) -> std::result::Result<String, JsValue> {
    route_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn collapse_path(path: &str) -> std::result::Result<String, JsValue> {
    collapse_json(path).map_err(|e| JsValue::from_str(&e))
}
