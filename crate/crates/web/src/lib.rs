//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function takes and returns JSON strings; the `*_json` functions hold the
//! logic and are plain Rust so they can be tested natively.

use dualnorm::attacks::{pgd_on, AttackConfig, LossSurface};
use dualnorm::normcore::{self, BranchLayout, BranchTag, NormCall, NormConfig, NormKind, NormLayerState, NormMode};
use dualnorm::probe::wasserstein_1d;
use dualnorm::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

type Outcome = Result<String, String>;

fn parse<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("bad request: {e}"))
}

fn reply<T: Serialize>(value: &T) -> Outcome {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
pub struct NormalizeRequest {
    pub kind: NormKind,
    pub mode: NormMode,
    /// `[batch][channels]` activations.
    pub rows: Vec<Vec<f64>>,
    /// Leading rows tagged clean; the rest adversarial.
    pub clean_rows: usize,
    /// Affine set of the adversarial branch (the clean one stays at gamma 1, beta 0).
    pub adv_gamma: f64,
    pub adv_beta: f64,
    pub groups: Option<usize>,
}

#[derive(Serialize)]
pub struct BranchRoute {
    pub branch: &'static str,
    pub stats_set: usize,
    pub affine_set: usize,
}

#[derive(Serialize)]
pub struct NormalizeReply {
    pub routes: Vec<BranchRoute>,
    pub output: Vec<Vec<f64>>,
    /// `(set, mean per channel, variance per channel)` captured for running statistics.
    pub moments: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Training-mode normalization of a small batch split into clean and adversarial rows.
pub fn normalize_json(request: &str) -> Outcome {
    let req: NormalizeRequest = parse(request)?;
    let n = req.rows.len();
    let c = req.rows.first().map_or(0, Vec::len);
    if n == 0 || c == 0 || req.rows.iter().any(|r| r.len() != c) {
        return Err("rows must form a non-empty rectangle".into());
    }
    if req.clean_rows > n {
        return Err(format!("{} clean rows in a batch of {n}", req.clean_rows));
    }
    let mut config = NormConfig::new(req.kind, req.mode);
    if let Some(g) = req.groups {
        config = config.with_groups(g);
    }
    let mut state = NormLayerState::<f64>::new(c, config).map_err(|e| e.to_string())?;
    if let Some(adv) = state.affine.get_mut(1) {
        adv.gamma.iter_mut().for_each(|g| *g = req.adv_gamma);
        adv.beta.iter_mut().for_each(|b| *b = req.adv_beta);
    }
    let routes = BranchTag::ALL
        .iter()
        .map(|&b| {
            state.select_params(b).map(|r| BranchRoute {
                branch: b.name(),
                stats_set: r.stats,
                affine_set: r.affine,
            })
        })
        .collect::<dualnorm::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let x = Tensor::from_vec(&[n, c], req.rows.concat()).map_err(|e| e.to_string())?;
    let call = NormCall {
        train: true,
        stats_override: None,
        explicit: None,
    };
    let (y, cache) = normcore::forward(&x, BranchLayout::Split { clean: req.clean_rows }, call, &state)
        .map_err(|e| e.to_string())?;
    reply(&NormalizeReply {
        routes,
        output: y.data().chunks(c).map(<[f64]>::to_vec).collect(),
        moments: cache
            .batch_moments
            .iter()
            .map(|m| (m.set, m.mean.clone(), m.var.clone()))
            .collect(),
    })
}

fn numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|ch: char| ch == ',' || ch.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: `{t}`")))
        .collect()
}

/// 1-Wasserstein distance between two comma- or space-separated samples of equal size.
pub fn wasserstein_text(a: &str, b: &str) -> Result<f64, String> {
    wasserstein_1d(&numbers(a)?, &numbers(b)?).map_err(|e| e.to_string())
}

/// Binary logistic model `p(y = 1 | x) = sigmoid(w.x + b)`.
#[derive(Clone, Debug, Deserialize)]
pub struct LogisticModel {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LogisticModel {
    fn prob(&self, x: &[f64]) -> f64 {
        let z: f64 = x.iter().zip(&self.w).map(|(a, w)| a * w).sum::<f64>() + self.b;
        1.0 / (1.0 + (-z).exp())
    }
}

impl LossSurface<f64> for LogisticModel {
    fn loss_and_grad(&self, x: &Tensor<f64>, labels: &[usize]) -> dualnorm::Result<(Vec<f64>, Tensor<f64>)> {
        let n = x.batch();
        let mut losses = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(x.len());
        for (i, &y) in labels.iter().enumerate() {
            let p = self.prob(x.sample(i));
            losses.push(if y == 1 { -p.ln() } else { -(1.0 - p).ln() });
            grad.extend(self.w.iter().map(|w| (p - y as f64) * w / n as f64));
        }
        Ok((losses, Tensor::from_vec(x.shape(), grad)?))
    }
}

#[derive(Deserialize)]
pub struct AttackRequest {
    pub model: LogisticModel,
    pub x: Vec<f64>,
    pub label: usize,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default)]
    pub random_init: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize)]
pub struct AttackStep {
    pub step: usize,
    pub loss: f64,
    pub prob_label: f64,
    pub x: Vec<f64>,
}

/// PGD on a logistic model, reporting the iterate after every step count `0..=steps`.
pub fn pgd_linear_json(request: &str) -> Outcome {
    let req: AttackRequest = parse(request)?;
    if req.x.len() != req.model.w.len() || req.label > 1 {
        return Err("x must match w in length and label must be 0 or 1".into());
    }
    let x = Tensor::from_vec(&[1, req.x.len()], req.x.clone()).map_err(|e| e.to_string())?;
    let labels = [req.label];
    let trajectory = (0..=req.steps)
        .map(|k| {
            let cfg = AttackConfig::pgd(req.epsilon, req.step_size, k).with_random_init(req.random_init);
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
            let adv = pgd_on(&req.model, &x, &labels, &cfg, &mut rng)?;
            let loss = req.model.per_sample_loss(&adv, &labels)?[0];
            let p1 = req.model.prob(adv.data());
            Ok(AttackStep {
                step: k,
                loss,
                prob_label: if req.label == 1 { p1 } else { 1.0 - p1 },
                x: adv.into_vec(),
            })
        })
        .collect::<dualnorm::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    reply(&trajectory)
}

fn js(r: Outcome) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn normalize(request: &str) -> Result<String, JsValue> {
    js(normalize_json(request))
}

#[wasm_bindgen]
pub fn wasserstein(a: &str, b: &str) -> Result<f64, JsValue> {
    wasserstein_text(a, b).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn pgd_linear(request: &str) -> Result<String, JsValue> {
    js(pgd_linear_json(request))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn normalize_value(mode: &str, clean_rows: usize) -> Value {
        let req = format!(
            r#"{{"kind":"batch","mode":"{mode}","rows":[[1,10],[3,14],[5,0],[7,4]],"clean_rows":{clean_rows},"adv_gamma":2,"adv_beta":0.5}}"#
        );
        serde_json::from_str(&normalize_json(&req).unwrap()).unwrap()
    }

    #[test]
    fn dual_mode_normalizes_each_branch_on_its_own() {
        let v = normalize_value("dual", 2);
        let out = &v["output"];
        // clean rows [1, 3]: mean 2, var 1 -> -1, +1 (gamma 1)
        assert!((out[0][0].as_f64().unwrap() + 1.0).abs() < 1e-4);
        // adv rows [5, 7] -> -1, +1, then gamma 2, beta 0.5
        assert!((out[2][0].as_f64().unwrap() - (-2.0 + 0.5)).abs() < 1e-4);
        assert_eq!(v["routes"][1]["stats_set"], 1);
        assert_eq!(v["moments"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn single_mode_uses_the_mixture() {
        let v = normalize_value("single", 2);
        let m = &v["moments"][0];
        assert_eq!(m[1][0].as_f64().unwrap(), 4.0);
        assert_eq!(v["routes"][1]["affine_set"], 0);
    }

    #[test]
    fn cross_mode_borrows_the_other_branch_statistics() {
        let v = normalize_value("cross", 2);
        assert_eq!(v["routes"][0]["stats_set"], 1);
        assert_eq!(v["routes"][1]["stats_set"], 0);
    }

    #[test]
    fn bad_requests_are_errors() {
        assert!(normalize_json("{}").is_err());
        assert!(normalize_json(
            r#"{"kind":"batch","mode":"dual","rows":[[1],[2,3]],"clean_rows":1,"adv_gamma":1,"adv_beta":0}"#
        )
        .is_err());
        // Cross-routed adversarial rows have no clean rows to borrow statistics from.
        assert!(normalize_json(
            r#"{"kind":"batch","mode":"cross","rows":[[1],[2]],"clean_rows":0,"adv_gamma":1,"adv_beta":0}"#
        )
        .is_err());
    }

    #[test]
    fn wasserstein_parses_lists() {
        assert_eq!(wasserstein_text("0, 1", "1 2").unwrap(), 1.0);
        assert!(wasserstein_text("1,2", "1").is_err());
        assert!(wasserstein_text("a", "1").is_err());
    }

    #[test]
    fn pgd_trajectory_raises_loss_within_budget() {
        let req = r#"{"model":{"w":[1.0,-2.0,0.5],"b":0.0},"x":[0.5,0.5,0.5],"label":1,"epsilon":0.1,"step_size":0.04,"steps":4}"#;
        let steps: Vec<Value> = serde_json::from_str(&pgd_linear_json(req).unwrap()).unwrap();
        assert_eq!(steps.len(), 5);
        let losses: Vec<f64> = steps.iter().map(|s| s["loss"].as_f64().unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        let last: Vec<f64> = steps[4]["x"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        // Budget exhausted along -sign(w) for label 1.
        let want = [0.4, 0.6, 0.4];
        for (a, b) in last.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
