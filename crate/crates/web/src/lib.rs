//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each export takes a JSON request and returns a JSON response, so the page
//! needs no generated bindings beyond plain strings. The same functions are
//! available natively for testing.

use std::collections::BTreeMap;

use openset_core::eval::{auroc_from_scores, Method};
use openset_core::gmm::{fit_all, EmConfig};
use openset_core::toy::{fit_and_evaluate, train_and_export, FitSettings, ToyScenario};
use openset_core::trainer::ToyHeadConfig;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct DensityRequest {
    pub n_components: usize,
    pub seed: u64,
    /// Grid cells per side.
    pub resolution: usize,
}

impl Default for DensityRequest {
    fn default() -> Self {
        DensityRequest {
            n_components: 3,
            seed: 1,
            resolution: 80,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct DensityField {
    /// `[x, y, class]`; held-out samples carry class -1.
    pub points: Vec<(f64, f64, i64)>,
    pub bounds: [f64; 4],
    pub resolution: usize,
    /// Row-major max class log-likelihood, first row at `bounds[1]`.
    pub values: Vec<f64>,
    /// Known test samples vs held-out samples, scored by max log-likelihood.
    pub auroc: f64,
}

/// A two-dimensional toy scenario: two multi-modal known classes and one
/// held-out class.
fn plane_scenario(seed: u64) -> ToyScenario {
    ToyScenario {
        n_known: 2,
        n_unknown: 1,
        input_dim: 2,
        modes_per_class: 3,
        train_per_class: 150,
        val_per_class: 0,
        test_per_class: 60,
        class_spread: 3.0,
        unknown_spread: 3.0,
        mode_spread: 1.6,
        noise: 0.45,
        seed,
    }
}

pub fn density_field(req: &DensityRequest) -> Result<DensityField, String> {
    if !(1..=8).contains(&req.n_components) || !(8..=256).contains(&req.resolution) {
        return Err("n_components must be 1..=8 and resolution 8..=256".into());
    }
    let data = plane_scenario(req.seed).generate().map_err(|e| e.to_string())?;
    let mut sets: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (x, y) in &data.train {
        sets.entry(*y).or_default().push(x.clone());
    }
    let em = EmConfig {
        seed: req.seed,
        ..Default::default()
    };
    let model = fit_all(&sets, req.n_components, &em).map_err(|e| e.to_string())?;
    let score = |x: &[f64]| model.max_log_likelihood(x).map_err(|e| e.to_string());

    let mut points: Vec<(f64, f64, i64)> = data.train.iter().map(|(x, y)| (x[0], x[1], *y as i64)).collect();
    points.extend(data.test_unknown.iter().map(|(x, _)| (x[0], x[1], -1)));
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y, _) in &points {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    let pad = 0.1 * (x1 - x0).max(y1 - y0);
    let bounds = [x0 - pad, y0 - pad, x1 + pad, y1 + pad];
    let n = req.resolution;
    let mut values = Vec::with_capacity(n * n);
    for r in 0..n {
        let y = bounds[1] + (r as f64 + 0.5) / n as f64 * (bounds[3] - bounds[1]);
        for c in 0..n {
            let x = bounds[0] + (c as f64 + 0.5) / n as f64 * (bounds[2] - bounds[0]);
            values.push(score(&[x, y])?);
        }
    }
    let known: Vec<f64> = data.test_known.iter().map(|(x, _)| score(x)).collect::<Result<_, _>>()?;
    let unknown: Vec<f64> = data.test_unknown.iter().map(|(x, _)| score(x)).collect::<Result<_, _>>()?;
    let auroc = auroc_from_scores(&known, &unknown).map_err(|e| e.to_string())?;
    Ok(DensityField {
        points,
        bounds,
        resolution: n,
        values,
        auroc,
    })
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct ToyRequest {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ToyRequest {
    fn default() -> Self {
        ToyRequest {
            lambda: 0.1,
            epochs: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct MethodCurve {
    pub method: &'static str,
    pub auroc: f64,
    /// `(osr, tpr)` in ascending OSR.
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
pub struct ToyResult {
    pub anchor_loss: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub selected_components: usize,
    pub auroc_by_components: BTreeMap<usize, f64>,
    pub methods: Vec<MethodCurve>,
}

/// A reduced version of the default toy scenario, sized for the browser.
fn browser_scenario(seed: u64) -> ToyScenario {
    ToyScenario {
        train_per_class: 100,
        val_per_class: 40,
        test_per_class: 40,
        seed,
        ..Default::default()
    }
}

pub fn toy_comparison(req: &ToyRequest) -> Result<ToyResult, String> {
    if !(1..=200).contains(&req.epochs) {
        return Err("epochs must be 1..=200".into());
    }
    let scenario = browser_scenario(req.seed);
    let head = ToyHeadConfig {
        lambda: req.lambda,
        epochs: req.epochs,
        seed: req.seed,
        n_classes: scenario.n_known,
        input_dim: scenario.input_dim,
        ..Default::default()
    };
    let err = |e: openset_core::Error| e.to_string();
    let data = scenario.generate().map_err(err)?;
    let run = train_and_export(&data, &head).map_err(err)?;
    let settings = FitSettings {
        candidates: (1..=4).collect(),
        ..Default::default()
    };
    let result = fit_and_evaluate(&run, &settings, scenario.n_known).map_err(err)?;
    let methods = [Method::Gmm, Method::Score, Method::Entropy]
        .iter()
        .filter_map(|&m| result.report.method(m))
        .map(|r| {
            let mut roc: Vec<(f64, f64)> = r.curve.points.iter().map(|p| (p.osr, p.tpr)).collect();
            roc.reverse();
            roc.dedup();
            MethodCurve {
                method: r.method.name(),
                auroc: r.auroc,
                roc,
            }
        })
        .collect();
    let history = &run.training.history;
    Ok(ToyResult {
        anchor_loss: history.iter().map(|e| e.mean_anchor_loss).collect(),
        accuracy: history.iter().map(|e| e.accuracy).collect(),
        selected_components: result.selection.selected,
        auroc_by_components: result.test_auroc_by_count,
        methods,
    })
}

fn respond<Req, Res>(json: &str, f: impl FnOnce(&Req) -> Result<Res, String>) -> Result<String, JsValue>
where
    Req: for<'de> Deserialize<'de>,
    Res: Serialize,
{
    let req: Req = serde_json::from_str(json).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let res = f(&req).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&res).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// `{"n_components", "seed", "resolution"}` → density field JSON.
#[wasm_bindgen(js_name = densityField)]
pub fn density_field_js(request: &str) -> Result<String, JsValue> {
    respond(request, density_field)
}

/// `{"lambda", "epochs", "seed"}` → loss curve and ROC comparison JSON.
#[wasm_bindgen(js_name = toyComparison)]
pub fn toy_comparison_js(request: &str) -> Result<String, JsValue> {
    respond(request, toy_comparison)
}
