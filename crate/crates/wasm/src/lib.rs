//! Browser bindings for three interactive views: the per-token style mass
//! map, sharpness-versus-temperature curves, and the Gaussian high-pass mask.

use mast_core::lama::{apply_lama, LogitGroups, MassTargets};
use mast_core::pipeline::{generate_fixture, run_step, PipelineConfig, TauMode, TauPolicy};
use mast_core::sts::{mean_sharpness, sharpness_gap, solve_temperature, TemperatureModel};
use mast_core::ddi::{gaussian_highpass_mask, HighPassSpec};
use mast_core::lqa::{anchor_queries, QueryPair};
use mast_core::Result;
use wasm_bindgen::prelude::*;

pub const DEMO_GRID: usize = 24;

fn demo_config(pi_star: f64, sigma: f64, n_styles: usize, seed: u64) -> PipelineConfig {
    PipelineConfig {
        pi_star,
        mask_sigma: sigma,
        n_styles,
        seed,
        token_grid: [DEMO_GRID, DEMO_GRID],
        d: 16,
        d_v: 4,
        n_heads: 1,
        channels: 1,
        tau_mode: TauMode::Fixed(1.0),
        ..Default::default()
    }
}

/// Row-major `[style][y][x]` attention mass on each style at `τ = 1`.
pub fn style_mass_map(pi_star: f64, sigma: f64, n_styles: usize, seed: u64) -> Result<Vec<f32>> {
    let cfg = demo_config(pi_star, sigma, n_styles, seed);
    let scene = generate_fixture(&cfg)?;
    let (_, tensors) = run_step(&scene, &cfg, &TauPolicy::Fixed(1.0))?;
    let t = DEMO_GRID * DEMO_GRID;
    let masses = tensors.group_masses.data();
    Ok((0..n_styles)
        .flat_map(|i| (0..t).map(move |q| masses[q * (n_styles + 1) + i]))
        .collect())
}

/// Samples of `τ` on `[0.5, 8]` followed by the content-only sharpness, the
/// biased concat sharpness at each `τ`, then `[Δ, τ_poly(Δ), τ*]`.
pub fn sharpness_curves(pi_star: f64, lambda: f64, seed: u64, samples: usize) -> Result<Vec<f64>> {
    let mut cfg = demo_config(pi_star, 2.0, 2, seed);
    cfg.lambda = lambda;
    let scene = generate_fixture(&cfg)?;
    let h = &scene.heads[0];
    let q = anchor_queries(&QueryPair { q_c: h.q_c.clone(), q_cs: h.q_cs.clone(), lambda })?;
    let groups = LogitGroups::from_projections(&q, &h.style_keys, &h.k_c)?;
    let biased = apply_lama(&groups, &MassTargets::from_masks(&scene.masks, pi_star)?)?;
    let gap = sharpness_gap(&groups, &biased);
    let n = samples.max(2);
    let taus: Vec<f64> = (0..n).map(|i| 0.5 + 7.5 * i as f64 / (n - 1) as f64).collect();
    let mut out = taus.clone();
    out.extend(taus.iter().map(|&t| mean_sharpness(groups.content(), t)));
    out.extend(taus.iter().map(|&t| mean_sharpness(&biased.logits, t)));
    let oracle = solve_temperature(&biased.logits, gap.content_sharpness)?;
    out.extend([gap.delta, TemperatureModel::default().predict(gap.delta), oracle.tau]);
    Ok(out)
}

/// Centred high-pass gain on an `h × w` spectrum.
pub fn highpass_mask(h: usize, w: usize, r: f64) -> Result<Vec<f32>> {
    let spec = HighPassSpec::new(r, HighPassSpec::default().epsilon)?;
    Ok(gaussian_highpass_mask(h, w, &spec)?.into_data())
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(start)]
pub fn start() {
    console_error_panic_hook::set_once();
}

#[wasm_bindgen(js_name = demoGrid)]
pub fn demo_grid() -> usize {
    DEMO_GRID
}

#[wasm_bindgen(js_name = styleMassMap)]
pub fn style_mass_map_js(pi_star: f64, sigma: f64, n_styles: usize, seed: u32) -> std::result::Result<Vec<f32>, JsError> {
    js(style_mass_map(pi_star, sigma, n_styles, u64::from(seed)))
}

#[wasm_bindgen(js_name = sharpnessCurves)]
pub fn sharpness_curves_js(pi_star: f64, lambda: f64, seed: u32, samples: usize) -> std::result::Result<Vec<f64>, JsError> {
    js(sharpness_curves(pi_star, lambda, u64::from(seed), samples))
}

#[wasm_bindgen(js_name = highpassMask)]
pub fn highpass_mask_js(h: usize, w: usize, r: f64) -> std::result::Result<Vec<f32>, JsError> {
    js(highpass_mask(h, w, r))
}
