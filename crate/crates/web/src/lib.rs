//! wasm-bindgen surface for the static demo page in `www/`.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(r: demo::DemoResult<String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scheduleCurves)]
pub fn schedule_curves(steps: usize, kind: &str) -> Result<String, JsError> {
    js(demo::schedule_curves(steps, kind))
}

#[wasm_bindgen(js_name = callBudget)]
pub fn call_budget(steps: usize, fractions: usize, phases: u32, delta_t: usize) -> Result<String, JsError> {
    js(demo::call_budget(steps, fractions, phases, delta_t))
}

#[wasm_bindgen]
pub struct Demo(demo::DemoModel);

#[wasm_bindgen]
impl Demo {
    /// Trains the demo model; blocks the page for a few seconds.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, epochs: usize) -> Result<Demo, JsError> {
        let cfg = demo::DemoConfig { seed, epochs, ..Default::default() };
        demo::DemoModel::train(&cfg).map(Demo).map_err(|e| JsError::new(&e))
    }

    pub fn summary(&self) -> String {
        self.0.summary()
    }

    pub fn explain(&self, index: usize, scale: f64, delta_t: usize, mode: &str, seed: u64) -> Result<String, JsError> {
        js(self.0.explain(index, scale, delta_t, mode, seed))
    }
}
