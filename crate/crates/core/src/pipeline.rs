//! One attention-control step on synthetic features:
//! anchoring → logits → mass allocation → temperature → attention → detail
//! injection, plus the region-wise AdaIN latent initialization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adain::region_adain_init;
use crate::ddi::{inject_details, inject_with_weight, extract_high_freq, HighPassSpec, ResidualFeatures};
use crate::diagnostics::attention_entropy_profile;
use crate::error::{invalid, MastError, Result};
use crate::lama::{apply_lama, attention_output, concat_values, effective_pi_star, LogitGroups, MassTargets, MASS_EPSILON};
use crate::lqa::{anchor_queries, QueryPair};
use crate::masks::{smooth_mask, validate_feasibility, MaskSet};
use crate::rng::FixtureRng;
use crate::sts::{apply_sts, mean_sharpness, sharpness_gap, solve_temperature, TemperatureModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauMode {
    DefaultPoly,
    Fit,
    Fixed(f64),
    Oracle,
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauMode::DefaultPoly => write!(f, "paper-poly"),
            TauMode::Fit => write!(f, "fit"),
            TauMode::Fixed(v) => write!(f, "fixed:{v}"),
            TauMode::Oracle => write!(f, "oracle"),
        }
    }
}

impl FromStr for TauMode {
    type Err = MastError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-poly" => Ok(TauMode::DefaultPoly),
            "fit" => Ok(TauMode::Fit),
            "oracle" => Ok(TauMode::Oracle),
            _ => {
                let v = s
                    .strip_prefix("fixed:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| invalid(format!("unknown tau mode {s:?}")))?;
                if !(v.is_finite() && v > 0.0) {
                    return Err(invalid(format!("fixed temperature must be positive, got {v}")));
                }
                Ok(TauMode::Fixed(v))
            }
        }
    }
}

impl Serialize for TauMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TauMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every tunable of a run. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub lambda: f64,
    pub pi_star: f64,
    pub r: f64,
    pub epsilon_hp: f64,
    pub mask_sigma: f64,
    pub tau_mode: TauMode,
    pub seed: u64,
    pub token_grid: [usize; 2],
    pub d: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub n_styles: usize,
    /// Channels of the synthetic latents and residual features.
    pub channels: usize,
    pub ddi_enabled: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lambda: crate::lqa::DEFAULT_LAMBDA,
            pi_star: crate::lama::DEFAULT_PI_STAR,
            r: crate::ddi::DEFAULT_RADIUS,
            epsilon_hp: crate::ddi::DEFAULT_EPSILON,
            mask_sigma: 2.0,
            tau_mode: TauMode::DefaultPoly,
            seed: 0,
            token_grid: [16, 16],
            d: 32,
            d_v: 32,
            n_heads: 4,
            n_styles: 2,
            channels: 4,
            ddi_enabled: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.pi_star > 0.0 && self.pi_star <= 1.0) {
            return Err(invalid(format!("pi_star must lie in (0, 1], got {}", self.pi_star)));
        }
        HighPassSpec::new(self.r, self.epsilon_hp)?;
        if self.mask_sigma.is_nan() || self.mask_sigma < 0.0 {
            return Err(invalid("mask_sigma must be non-negative"));
        }
        let dims = [self.token_grid[0], self.token_grid[1], self.d, self.d_v, self.n_heads, self.n_styles, self.channels];
        if dims.contains(&0) {
            return Err(invalid("token_grid, d, d_v, n_heads, n_styles and channels must be positive"));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.token_grid[0] * self.token_grid[1]
    }

    pub fn highpass(&self) -> HighPassSpec {
        HighPassSpec { r: self.r, epsilon: self.epsilon_hp }
    }
}

/// How the temperature of each head is chosen once `tau_mode` is resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum TauPolicy {
    Model(TemperatureModel),
    Fixed(f64),
    Oracle,
}

impl TauPolicy {
    /// `fitted` supplies the model for [`TauMode::Fit`].
    pub fn resolve(mode: TauMode, fitted: Option<TemperatureModel>) -> Result<Self> {
        match mode {
            TauMode::DefaultPoly => Ok(TauPolicy::Model(TemperatureModel::default())),
            TauMode::Fit => fitted
                .map(TauPolicy::Model)
                .ok_or_else(|| invalid("tau mode `fit` needs a coefficient file")),
            TauMode::Fixed(v) => Ok(TauPolicy::Fixed(v)),
            TauMode::Oracle => Ok(TauPolicy::Oracle),
        }
    }
}

/// Scales of the synthetic attention features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScales {
    pub content: f32,
    pub style: f32,
    /// How far the stylization query drifts from the content query.
    pub drift: f32,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self { content: 1.0, style: 1.0, drift: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadFeatures {
    pub q_c: Tensor,
    pub q_cs: Tensor,
    pub style_keys: Vec<Tensor>,
    pub style_values: Vec<Tensor>,
    pub k_c: Tensor,
    pub v_c: Tensor,
}

impl HeadFeatures {
    /// Content keys sit near their own content queries, so content attention
    /// is peaked; style keys are unrelated to the queries.
    pub fn generate(rng: &mut FixtureRng, t: usize, d: usize, d_v: usize, n_styles: usize, s: FeatureScales) -> Self {
        let q_c = rng.bell_tensor(vec![t, d], s.content);
        let k_c = q_c.zip_map(&rng.bell_tensor(vec![t, d], 0.5 * s.content), |a, b| a + b).unwrap();
        let q_cs = q_c
            .zip_map(&rng.bell_tensor(vec![t, d], s.drift * s.content), |a, b| 0.6 * a + b)
            .unwrap();
        let v_c = rng.bell_tensor(vec![t, d_v], 1.0);
        let mut style_keys = Vec::with_capacity(n_styles);
        let mut style_values = Vec::with_capacity(n_styles);
        for i in 0..n_styles {
            style_keys.push(rng.bell_tensor(vec![t, d], s.style));
            let offset = 1.0 + i as f32;
            style_values.push(rng.bell_tensor(vec![t, d_v], 0.5).map(|v| v + offset));
        }
        Self { q_c, q_cs, style_keys, style_values, k_c, v_c }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub heads: Vec<HeadFeatures>,
    pub phi_c: Tensor,
    pub phi_cs: Tensor,
    pub delta_phi_cs: Tensor,
    pub z_c: Tensor,
    pub z_s: Vec<Tensor>,
    pub masks: MaskSet,
}

// Stream ids for the fixture generator.
const STREAM_HEADS: u64 = 1 << 32;
const STREAM_FEATURES: u64 = 2 << 32;
const STREAM_LATENTS: u64 = 3 << 32;

/// `n` equal vertical stripes covering the grid, smoothed by `sigma`.
pub fn stripe_masks(grid: (usize, usize), n: usize, sigma: f64) -> Result<MaskSet> {
    let (h, w) = grid;
    let masks = (0..n)
        .map(|i| {
            let m = Tensor::from_fn2(h, w, |_, x| ((x * n / w) == i) as u8 as f32)?;
            smooth_mask(&m, sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    MaskSet::new(masks, grid)
}

pub fn generate_fixture(cfg: &PipelineConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let grid = (cfg.token_grid[0], cfg.token_grid[1]);
    let masks = stripe_masks(grid, cfg.n_styles, cfg.mask_sigma)?;
    generate_fixture_with_masks(cfg, masks)
}

/// Builds a scene around caller-supplied masks; the style count follows the
/// mask count.
pub fn generate_fixture_with_masks(cfg: &PipelineConfig, masks: MaskSet) -> Result<SyntheticScene> {
    generate_scene(cfg, masks, FeatureScales::default())
}

pub fn generate_scene(cfg: &PipelineConfig, masks: MaskSet, scales: FeatureScales) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (h, w) = (cfg.token_grid[0], cfg.token_grid[1]);
    if masks.grid() != (h, w) {
        return Err(invalid(format!("masks are {:?}, token grid is {:?}", masks.grid(), (h, w))));
    }
    let t = h * w;
    let n_styles = masks.n_styles();
    let heads = (0..cfg.n_heads)
        .map(|k| {
            let mut rng = FixtureRng::new(cfg.seed, STREAM_HEADS + k as u64);
            HeadFeatures::generate(&mut rng, t, cfg.d, cfg.d_v, n_styles, scales)
        })
        .collect();

    let c = cfg.channels;
    let mut rng = FixtureRng::new(cfg.seed, STREAM_FEATURES);
    // Content residual: low-frequency layout plus fine detail.
    let detail = rng.bell_tensor(vec![c, h, w], 0.3);
    let phases: Vec<f32> = (0..c).map(|_| rng.range(0.0, std::f32::consts::TAU)).collect();
    let phi_c = Tensor::new(
        vec![c, h, w],
        (0..c * h * w)
            .map(|i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                let u = std::f32::consts::TAU * (x as f32 / w as f32 + 0.5 * y as f32 / h as f32);
                (u + phases[ch]).sin() + detail.data()[i]
            })
            .collect(),
    )?;
    let phi_cs = phi_c.zip_map(&rng.bell_tensor(vec![c, h, w], 0.8), |a, b| 0.6 * a + b)?;
    let delta_phi_cs = rng.bell_tensor(vec![c, h, w], 0.1);

    let mut rng = FixtureRng::new(cfg.seed, STREAM_LATENTS);
    let z_c = rng.bell_tensor(vec![c, h, w], 1.0);
    let z_s = (0..n_styles)
        .map(|i| {
            let (mean, std) = (i as f32 - 0.5, 0.5 + 0.5 * i as f32);
            rng.bell_tensor(vec![c, h, w], std).map(|v| v + mean)
        })
        .collect();
    Ok(SyntheticScene { heads, phi_c, phi_cs, delta_phi_cs, z_c, z_s, masks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: usize,
    pub tau: f64,
    pub tau_residual: Option<f64>,
    pub tau_at_boundary: bool,
    pub delta: f64,
    pub content_sharpness: f64,
    pub concat_sharpness: f64,
    pub scaled_sharpness: f64,
    /// Mean over queries, per style group, at `τ = 1`.
    pub target_style_mass: Vec<f64>,
    pub achieved_style_mass: Vec<f64>,
    pub target_content_mass: f64,
    pub achieved_content_mass: f64,
    /// Max over queries and groups of `|achieved − target|` at `τ = 1`.
    pub max_mass_error: f64,
    /// Max over queries of mass on any style whose target is zero there.
    pub max_excluded_style_mass: f64,
    /// Max over queries of `|Σ masses − 1|`.
    pub max_conservation_error: f64,
    pub mean_entropy_unit: f64,
    pub mean_entropy_scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub config: PipelineConfig,
    pub effective_pi_star: f64,
    pub n_styles: usize,
    pub heads: Vec<HeadReport>,
    pub omega: f64,
    pub checksums: BTreeMap<String, String>,
}

/// Tensor outputs of a step, keyed by the names used for checksums.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTensors {
    pub anchored_queries: Tensor,
    pub biased_logits: Tensor,
    pub group_masses: Tensor,
    pub attention_output: Tensor,
    pub ddi_output: Tensor,
    pub latent_init: Tensor,
}

impl StepTensors {
    pub fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("anchored_queries", &self.anchored_queries),
            ("biased_logits", &self.biased_logits),
            ("group_masses", &self.group_masses),
            ("attention_output", &self.attention_output),
            ("ddi_output", &self.ddi_output),
            ("latent_init", &self.latent_init),
        ]
    }
}

struct HeadResult {
    report: HeadReport,
    anchored: Tensor,
    biased: Tensor,
    masses: Vec<f32>,
    output: Tensor,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn run_head(k: usize, head: &HeadFeatures, cfg: &PipelineConfig, targets: &MassTargets, policy: &TauPolicy) -> Result<HeadResult> {
    let anchored = anchor_queries(&QueryPair { q_c: head.q_c.clone(), q_cs: head.q_cs.clone(), lambda: cfg.lambda })?;
    let groups = LogitGroups::from_projections(&anchored, &head.style_keys, &head.k_c)?;
    let biased = apply_lama(&groups, targets)?;
    let n_styles = groups.n_styles();
    let t_q = groups.n_queries();

    let masses = biased.group_masses(1.0);
    let mut achieved = vec![0.0f64; n_styles + 1];
    let (mut max_err, mut max_excluded, mut max_cons) = (0.0f64, 0.0f64, 0.0f64);
    for (q, row) in masses.iter().enumerate() {
        for (i, &m) in row.iter().enumerate() {
            let target = if i < n_styles { targets.style()[i][q] } else { targets.content()[q] };
            max_err = max_err.max((m - target).abs());
            if i < n_styles && target < MASS_EPSILON {
                max_excluded = max_excluded.max(m);
            }
            achieved[i] += m / t_q as f64;
        }
        max_cons = max_cons.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    let target_style_mass = targets.style().iter().map(|s| s.iter().sum::<f64>() / t_q as f64).collect();
    let target_content_mass = targets.content().iter().sum::<f64>() / t_q as f64;

    let gap = sharpness_gap(&groups, &biased);
    let (tau, tau_residual, tau_at_boundary) = match policy {
        TauPolicy::Model(m) => (m.predict(gap.delta), None, false),
        TauPolicy::Fixed(v) => (*v, None, false),
        TauPolicy::Oracle => {
            let sol = solve_temperature(&biased.logits, gap.content_sharpness)?;
            (sol.tau, Some(sol.residual), sol.at_boundary)
        }
    };
    let unit = attention_entropy_profile(&apply_sts(&biased.logits, 1.0)?)?;
    let scaled = attention_entropy_profile(&apply_sts(&biased.logits, tau)?)?;
    let v_concat = concat_values(&head.style_values, &head.v_c)?;
    let output = attention_output(&biased.logits, &v_concat, tau)?;

    let report = HeadReport {
        head: k,
        tau,
        tau_residual,
        tau_at_boundary,
        delta: gap.delta,
        content_sharpness: gap.content_sharpness,
        concat_sharpness: gap.concat_sharpness,
        scaled_sharpness: mean_sharpness(&biased.logits, tau),
        target_style_mass,
        achieved_style_mass: achieved[..n_styles].to_vec(),
        target_content_mass,
        achieved_content_mass: achieved[n_styles],
        max_mass_error: max_err,
        max_excluded_style_mass: max_excluded,
        max_conservation_error: max_cons,
        mean_entropy_unit: unit.mean_entropy,
        mean_entropy_scaled: scaled.mean_entropy,
    };
    Ok(HeadResult {
        report,
        anchored,
        biased: biased.logits.to_tensor(),
        masses: masses.iter().flatten().map(|&m| m as f32).collect(),
        output,
    })
}

pub fn run_step(scene: &SyntheticScene, cfg: &PipelineConfig, policy: &TauPolicy) -> Result<(StepReport, StepTensors)> {
    cfg.validate()?;
    let masks = validate_feasibility(scene.masks.clone(), cfg.pi_star)?;
    let targets = MassTargets::from_masks(&masks, cfg.pi_star)?;
    let n_styles = masks.n_styles();
    for (k, h) in scene.heads.iter().enumerate() {
        if h.style_keys.len() != n_styles {
            return Err(invalid(format!("head {k} has {} style key sets for {n_styles} masks", h.style_keys.len())));
        }
    }

    #[cfg(feature = "parallel")]
    let heads = scene.heads.par_iter().enumerate();
    #[cfg(not(feature = "parallel"))]
    let heads = scene.heads.iter().enumerate();
    let results = heads
        .map(|(k, h)| run_head(k, h, cfg, &targets, policy))
        .collect::<Result<Vec<_>>>()?;

    let features = ResidualFeatures {
        phi_c: scene.phi_c.clone(),
        phi_cs: scene.phi_cs.clone(),
        delta_phi_cs: scene.delta_phi_cs.clone(),
    };
    let spec = cfg.highpass();
    let (ddi_output, omega) = if cfg.ddi_enabled {
        let inj = inject_details(&features, &spec)?;
        (inj.output, inj.omega)
    } else {
        let high = extract_high_freq(&features.phi_c, &spec)?;
        (inject_with_weight(&features, &high, 0.0)?, 0.0)
    };
    let latent_init = region_adain_init(&scene.z_c, &scene.z_s, &masks)?;

    let t = cfg.n_tokens();
    let tensors = StepTensors {
        anchored_queries: stack(&results.iter().map(|r| &r.anchored).collect::<Vec<_>>())?,
        biased_logits: stack(&results.iter().map(|r| &r.biased).collect::<Vec<_>>())?,
        group_masses: Tensor::new(
            vec![results.len(), t, n_styles + 1],
            results.iter().flat_map(|r| r.masses.iter().copied()).collect(),
        )?,
        attention_output: stack(&results.iter().map(|r| &r.output).collect::<Vec<_>>())?,
        ddi_output,
        latent_init,
    };
    let checksums = tensors
        .named()
        .iter()
        .map(|(name, t)| (name.to_string(), t.checksum()))
        .collect();
    let report = StepReport {
        config: cfg.clone(),
        effective_pi_star: effective_pi_star(cfg.pi_star),
        n_styles,
        heads: results.into_iter().map(|r| r.report).collect(),
        omega,
        checksums,
    };
    Ok((report, tensors))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pi_star: f64,
    pub effective_pi_star: f64,
    /// Mean over heads and queries of the total style mass at `τ = 1`.
    pub mean_style_mass: f64,
    /// `effective π* · mean_q Σ_i M_i(q)`.
    pub expected_style_mass: f64,
    pub mean_entropy: f64,
}

/// Style mass and entropy at `τ = 1` for each `π*`. Values at or above 1 are
/// capped at [`crate::lama::MAX_PI_STAR`].
pub fn sweep_pi_star(scene: &SyntheticScene, cfg: &PipelineConfig, values: &[f64]) -> Result<Vec<SweepRow>> {
    let coverage = scene.masks.coverage();
    let mean_cov = coverage.iter().sum::<f64>() / coverage.len() as f64;
    values
        .iter()
        .map(|&pi| {
            if !(pi > 0.0 && pi.is_finite()) {
                return Err(invalid(format!("pi_star values must be positive, got {pi}")));
            }
            if pi >= 1.0 {
                log::warn!("pi_star {pi} capped at {}", crate::lama::MAX_PI_STAR);
            }
            let mut c = cfg.clone();
            c.pi_star = pi.min(1.0);
            c.tau_mode = TauMode::Fixed(1.0);
            let (report, _) = run_step(scene, &c, &TauPolicy::Fixed(1.0))?;
            let n = report.heads.len() as f64;
            let mean_style_mass = report
                .heads
                .iter()
                .map(|h| h.achieved_style_mass.iter().sum::<f64>())
                .sum::<f64>()
                / n;
            let mean_entropy = report.heads.iter().map(|h| h.mean_entropy_unit).sum::<f64>() / n;
            Ok(SweepRow {
                pi_star: pi,
                effective_pi_star: report.effective_pi_star,
                mean_style_mass,
                expected_style_mass: report.effective_pi_star * mean_cov,
                mean_entropy,
            })
        })
        .collect()
}
