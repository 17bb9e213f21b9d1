//! Experiment configuration: TOML schema, defaults, validation, and
//! construction of the core scenario types.
//!
//! Every field has a documented default, so an empty file (or no file) is a
//! valid configuration. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use holopos_core::channel::{
    BandPlan, ChannelModel, EnvironmentProfile, GainPattern, PowerAngleProfile, RoiBox,
    SystemGeometry, SPEED_OF_LIGHT,
};
use holopos_core::estimator::MlpArchitecture;
use holopos_core::federated::ClipMode;
use holopos_core::{BeamformingConfig64, ChannelModel64};

use crate::CliError;

fn deg_to_rad(x: f64) -> f64 {
    x * std::f64::consts::PI / 180.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; deterministically split into named streams.
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub bands: BandsConfig,
    pub roi: RoiConfig,
    pub environment: EnvironmentPair,
    pub optimizer: OptimizerSection,
    pub estimator: EstimatorSection,
    pub federated: FederatedSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            geometry: GeometryConfig::default(),
            bands: BandsConfig::default(),
            roi: RoiConfig::default(),
            environment: EnvironmentPair::default(),
            optimizer: OptimizerSection::default(),
            estimator: EstimatorSection::default(),
            federated: FederatedSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Element grid (rows, cols) in the y-z plane.
    pub element_grid: [usize; 2],
    /// Element spacing as a fraction of the mean-band-center wavelength.
    pub element_spacing_wavelengths: f64,
    /// Feed plane offset behind the board, m.
    pub feed_offset_m: f64,
    /// Feeds sit at +-(this fraction) of the aperture half-width.
    pub feed_span_fraction: f64,
    pub refractive_index: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            element_grid: [8, 8],
            element_spacing_wavelengths: 0.3,
            feed_offset_m: 0.02,
            feed_span_fraction: 0.5,
            refractive_index: 2.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandsConfig {
    pub count: usize,
    /// Band centers are `first_center_hz + i * center_step_hz`.
    pub first_center_hz: f64,
    pub center_step_hz: f64,
    pub subbands: usize,
    pub subband_bandwidth_hz: f64,
    pub num_frames: usize,
    pub frame_duration_s: f64,
    pub noise_psd_w_per_hz: f64,
    pub max_power_w: f64,
}

impl Default for BandsConfig {
    fn default() -> Self {
        Self {
            count: 2,
            first_center_hz: 2.5e9,
            center_step_hz: 0.5e9,
            subbands: 4,
            subband_bandwidth_hz: 1e7,
            num_frames: 8,
            frame_duration_s: 1e-3,
            noise_psd_w_per_hz: 1e-15,
            max_power_w: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    pub center_m: [f64; 3],
    pub extents_m: [f64; 3],
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            center_m: [10.0, 0.0, 0.0],
            extents_m: [10.0, 10.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentPair {
    pub source: EnvironmentSection,
    pub target: EnvironmentSection,
}

impl Default for EnvironmentPair {
    fn default() -> Self {
        Self {
            source: EnvironmentSection::default(),
            target: EnvironmentSection {
                element_gain_exponent: 0.1,
                pap_mean_deg: [10.0, 10.0],
                pap_spread_deg: [15.0, 15.0],
                ..EnvironmentSection::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentSection {
    /// `cos^rho` element pattern exponent; 0 is a unit pattern.
    pub element_gain_exponent: f64,
    pub feed_gain_exponent: f64,
    pub user_gain: f64,
    /// Power-angle profile mean (azimuth, elevation), degrees.
    pub pap_mean_deg: [f64; 2],
    pub pap_spread_deg: [f64; 2],
    /// Total multipath power relative to the mean LoS power over the ROI.
    pub pap_scale: f64,
    pub rms_delay_spread_s: f64,
    pub max_speed_mps: f64,
    /// Angular quadrature resolution (azimuth, elevation).
    pub quadrature: [usize; 2],
}

impl Default for EnvironmentSection {
    fn default() -> Self {
        Self {
            element_gain_exponent: 0.0,
            feed_gain_exponent: 0.0,
            user_gain: 1.0,
            pap_mean_deg: [0.0, 0.0],
            pap_spread_deg: [10.0, 10.0],
            pap_scale: 1.0,
            rms_delay_spread_s: 2e-9,
            max_speed_mps: 1.0,
            quadrature: [64, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub gamma: f64,
    /// Step size; omit (null) to select from {1e-3, 1e-2, 1e-1} on the first
    /// outer iteration.
    pub beta: Option<f64>,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub outer_batch: usize,
    pub inner_batch: usize,
    pub num_samples: usize,
    /// "alternating" or "joint".
    pub mode: String,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            beta: None,
            outer_iters: 30,
            inner_iters: 5,
            outer_batch: 16,
            inner_batch: 4,
            num_samples: 64,
            mode: "alternating".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub hidden: Vec<usize>,
    pub source_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64, 32],
            source_samples: 5000,
            epochs: 100,
            batch_size: 64,
            holdout_fraction: 0.1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederatedSection {
    pub users: usize,
    pub samples_per_user: usize,
    pub anchors: usize,
    pub anchor_radius_m: f64,
    pub rounds: usize,
    pub eta_feat: f64,
    pub eta_reg: f64,
    pub clip_norm: f64,
    /// "rescale" (to exactly the clip norm) or "cap".
    pub clip_mode: String,
    /// Per-user privacy budgets; a single entry is broadcast to all users.
    pub epsilon: Vec<f64>,
    pub delta: f64,
    pub payload_bits_per_param: f64,
    pub rate_range_mbit: [f64; 2],
    pub eval_samples: usize,
}

impl Default for FederatedSection {
    fn default() -> Self {
        Self {
            users: 2,
            samples_per_user: 200,
            anchors: 10,
            anchor_radius_m: 0.25,
            rounds: 200,
            eta_feat: 1e-3,
            eta_reg: 1e-3,
            clip_norm: 2.0,
            clip_mode: "rescale".into(),
            epsilon: vec![200.0],
            delta: 0.01,
            payload_bits_per_param: 32.0,
            rate_range_mbit: [1.0, 100.0],
            eval_samples: 500,
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate a TOML config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| CliError::Validation(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks beyond what building the core types would catch.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |field: &str, msg: String| {
            Err(CliError::Validation(format!("{field}: {msg}")))
        };
        if self.geometry.element_grid.iter().any(|&g| g == 0) {
            return fail("geometry.element_grid", "must be positive".into());
        }
        if self.bands.count == 0 || self.bands.subbands == 0 || self.bands.num_frames == 0 {
            return fail("bands", "counts must be positive".into());
        }
        match self.optimizer.mode.as_str() {
            "alternating" | "joint" => {}
            other => return fail("optimizer.mode", format!("unknown mode {other:?}")),
        }
        match self.federated.clip_mode.as_str() {
            "rescale" | "cap" => {}
            other => return fail("federated.clip_mode", format!("unknown clip mode {other:?}")),
        }
        if self.federated.users == 0 {
            return fail("federated.users", "need at least one user".into());
        }
        if self.federated.epsilon.len() != 1
            && self.federated.epsilon.len() != self.federated.users
        {
            return fail(
                "federated.epsilon",
                format!(
                    "need 1 or {} entries, got {}",
                    self.federated.users,
                    self.federated.epsilon.len()
                ),
            );
        }
        if !(self.federated.rate_range_mbit[0] > 0.0
            && self.federated.rate_range_mbit[1] >= self.federated.rate_range_mbit[0])
        {
            return fail("federated.rate_range_mbit", "must be a positive range".into());
        }
        Ok(())
    }

    fn band_centers(&self) -> Vec<f64> {
        (0..self.bands.count)
            .map(|i| self.bands.first_center_hz + i as f64 * self.bands.center_step_hz)
            .collect()
    }

    pub fn geometry(&self) -> Result<SystemGeometry<f64>, CliError> {
        let centers = self.band_centers();
        let mean_center = centers.iter().sum::<f64>() / centers.len() as f64;
        let spacing =
            self.geometry.element_spacing_wavelengths * SPEED_OF_LIGHT / mean_center;
        let [rows, cols] = self.geometry.element_grid;
        let elements = SystemGeometry::element_grid(rows, cols, spacing);
        let half_aperture = spacing * (rows.max(cols) as f64 - 1.0) / 2.0;
        let span = self.geometry.feed_span_fraction * half_aperture;
        let x = -self.geometry.feed_offset_m;
        let feeds = vec![
            [x, -span, -span],
            [x, span, -span],
            [x, -span, span],
            [x, span, span],
        ];
        SystemGeometry::new(feeds, elements, self.geometry.refractive_index)
            .map_err(CliError::from_validation)
    }

    pub fn band_plan(&self) -> Result<BandPlan<f64>, CliError> {
        let centers = self.band_centers();
        let j = self.bands.subbands;
        let w = self.bands.subband_bandwidth_hz;
        let subbands = centers
            .iter()
            .map(|&fc| {
                (0..j)
                    .map(|k| fc + (k as f64 - (j as f64 - 1.0) / 2.0) * w)
                    .collect()
            })
            .collect();
        BandPlan::new(
            centers,
            subbands,
            w,
            self.bands.noise_psd_w_per_hz,
            self.bands.num_frames,
            self.bands.frame_duration_s,
            self.bands.max_power_w,
        )
        .map_err(CliError::from_validation)
    }

    fn environment(&self, section: &EnvironmentSection) -> EnvironmentProfile<f64> {
        let pattern = |rho: f64| {
            if rho == 0.0 {
                GainPattern::Unit
            } else {
                GainPattern::CosPow { exponent: rho }
            }
        };
        EnvironmentProfile {
            feed_gain: pattern(section.feed_gain_exponent),
            element_gain: pattern(section.element_gain_exponent),
            user_gain: section.user_gain,
            pap: PowerAngleProfile {
                mean_azimuth: deg_to_rad(section.pap_mean_deg[0]),
                mean_elevation: deg_to_rad(section.pap_mean_deg[1]),
                spread_azimuth: deg_to_rad(section.pap_spread_deg[0]),
                spread_elevation: deg_to_rad(section.pap_spread_deg[1]),
                scale: section.pap_scale,
            },
            rms_delay_spread: vec![section.rms_delay_spread_s; self.bands.count],
            max_speed: section.max_speed_mps,
            quadrature: (section.quadrature[0], section.quadrature[1]),
        }
    }

    pub fn roi(&self) -> Result<RoiBox<f64>, CliError> {
        RoiBox::new(self.roi.center_m, self.roi.extents_m).map_err(CliError::from_validation)
    }

    /// Build the source-domain scenario.
    pub fn source_model(&self) -> Result<ChannelModel64, CliError> {
        ChannelModel::new(
            self.geometry()?,
            self.band_plan()?,
            self.environment(&self.environment.source),
            self.roi()?,
        )
        .map_err(CliError::from_validation)
    }

    /// Build the target-domain scenario.
    pub fn target_model(&self) -> Result<ChannelModel64, CliError> {
        ChannelModel::new(
            self.geometry()?,
            self.band_plan()?,
            self.environment(&self.environment.target),
            self.roi()?,
        )
        .map_err(CliError::from_validation)
    }

    pub fn optimizer_config(&self, seed: u64) -> Result<holopos_core::OptimizerConfig64, CliError> {
        let mode = match self.optimizer.mode.as_str() {
            "alternating" => holopos_core::beamforming::OptimizerMode::Alternating,
            _ => holopos_core::beamforming::OptimizerMode::Joint,
        };
        let cfg = holopos_core::beamforming::OptimizerConfig {
            gamma: self.optimizer.gamma,
            beta: self.optimizer.beta,
            outer_iters: self.optimizer.outer_iters,
            inner_iters: self.optimizer.inner_iters,
            outer_batch: self.optimizer.outer_batch,
            inner_batch: self.optimizer.inner_batch,
            num_samples: self.optimizer.num_samples,
            seed,
            mode,
        };
        cfg.validate().map_err(CliError::from_validation)?;
        Ok(cfg)
    }

    pub fn mlp_architecture(&self, model: &ChannelModel64) -> Result<MlpArchitecture, CliError> {
        MlpArchitecture::new(
            holopos_core::estimator::feature_dim(model),
            self.estimator.hidden.clone(),
        )
        .map_err(CliError::from_validation)
    }

    pub fn train_config(&self) -> holopos_core::TrainConfig64 {
        holopos_core::estimator::TrainConfig {
            adam: holopos_core::estimator::AdamConfig {
                learning_rate: self.estimator.learning_rate,
                beta1: self.estimator.adam_beta1,
                beta2: self.estimator.adam_beta2,
                epsilon: self.estimator.adam_epsilon,
            },
            epochs: self.estimator.epochs,
            batch_size: self.estimator.batch_size,
            holdout_fraction: self.estimator.holdout_fraction,
        }
    }

    pub fn dp_config(&self) -> holopos_core::DpConfig64 {
        holopos_core::federated::DpConfig {
            clip_norm: self.federated.clip_norm,
            delta: self.federated.delta,
            mode: match self.federated.clip_mode.as_str() {
                "cap" => ClipMode::Cap,
                _ => ClipMode::Rescale,
            },
        }
    }

    pub fn user_epsilon(&self, n: usize) -> f64 {
        if self.federated.epsilon.len() == 1 {
            self.federated.epsilon[0]
        } else {
            self.federated.epsilon[n]
        }
    }

    pub fn fl_run_config(&self, seed: u64, param_count: usize) -> holopos_core::FlRunConfig64 {
        holopos_core::federated::FlRunConfig {
            rounds: self.federated.rounds,
            eta_feat: self.federated.eta_feat,
            eta_reg: self.federated.eta_reg,
            payload_bits: self.federated.payload_bits_per_param * param_count as f64,
            rate_range_mbit: (
                self.federated.rate_range_mbit[0],
                self.federated.rate_range_mbit[1],
            ),
            xi_floor: 1e-6,
            capacity_floor: 1e-9,
            seed,
        }
    }

    /// Seeded random beamforming used when no optimized configuration has
    /// been produced yet.
    pub fn fallback_beamforming(&self, seed: u64) -> Result<BeamformingConfig64, CliError> {
        let plan = self.band_plan()?;
        let geometry = self.geometry()?;
        let mut rng = holopos_core::rng::named_stream(seed, "beamforming/init");
        Ok(holopos_core::beamforming::random_config(
            &plan,
            geometry.num_feeds(),
            geometry.num_elements(),
            &mut rng,
        ))
    }
}
