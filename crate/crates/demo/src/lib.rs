//! WebAssembly bindings for the browser demo in `www/`.

mod session;

pub use session::{lr_curve as lr_curve_values, Session, DEMO_STEPS};
use wasm_bindgen::prelude::*;

fn js_err(e: ccl_core::CclError) -> JsError {
    JsError::new(&e.to_string())
}

/// One training run on 2-D blobs, driven step by step from the page.
#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, spread: f64, mode: &str) -> Result<Demo, JsError> {
        Session::new(u64::from(seed), spread, mode)
            .map(|inner| Demo { inner })
            .map_err(js_err)
    }

    pub fn train(&mut self, steps: u32) -> Result<f64, JsError> {
        self.inner.train(steps as usize).map_err(js_err)
    }

    pub fn step(&self) -> u32 {
        self.inner.step() as u32
    }

    pub fn finished(&self) -> bool {
        self.inner.finished()
    }

    pub fn bounds(&self) -> Vec<f64> {
        self.inner.bounds().to_vec()
    }

    pub fn points(&self) -> Vec<f64> {
        self.inner.points()
    }

    pub fn boundary(&self, res: u32) -> Result<Vec<u8>, JsError> {
        self.inner.boundary(res as usize).map_err(js_err)
    }

    pub fn trace(&self) -> Vec<f64> {
        self.inner.trace()
    }

    /// JSON report of tiers, complementary sets and the pair matrix.
    pub fn pairs(&self, tau: f64, k: u32) -> Result<String, JsError> {
        self.inner
            .pairs(tau, k as usize)
            .map(|v| v.to_string())
            .map_err(js_err)
    }
}

#[wasm_bindgen]
pub fn total_steps() -> u32 {
    DEMO_STEPS as u32
}

#[wasm_bindgen]
pub fn lr_curve(total: u32, eta0: f64, points: u32) -> Result<Vec<f64>, JsError> {
    session::lr_curve(total as usize, eta0, points as usize).map_err(js_err)
}
