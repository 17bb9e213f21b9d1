//! Shared scenario fixtures for tests and benchmarks.
//!
//! These are deliberately small instances with the same structure as the
//! full desk-scale defaults; keeping them here lets unit, integration, and
//! downstream tests agree on one construction.

use crate::beamforming::random_config;
use crate::channel::{
    BandPlan, BeamformingConfig, ChannelModel, EnvironmentProfile, GainPattern,
    PowerAngleProfile, RoiBox, SystemGeometry,
};
use crate::rng::named_stream;

fn deg(x: f64) -> f64 {
    x * std::f64::consts::PI / 180.0
}

/// Unit-gain environment with the default multipath statistics.
pub fn unit_env(num_bands: usize) -> EnvironmentProfile<f64> {
    EnvironmentProfile {
        feed_gain: GainPattern::Unit,
        element_gain: GainPattern::Unit,
        user_gain: 1.0,
        pap: PowerAngleProfile {
            mean_azimuth: 0.0,
            mean_elevation: 0.0,
            spread_azimuth: deg(10.0),
            spread_elevation: deg(10.0),
            scale: 1.0,
        },
        rms_delay_spread: vec![50e-9; num_bands],
        max_speed: 1.0,
        quadrature: (64, 32),
    }
}

/// Shaped-pattern environment with shifted, wider multipath.
pub fn shifted_env(num_bands: usize) -> EnvironmentProfile<f64> {
    let mut env = unit_env(num_bands);
    env.element_gain = GainPattern::CosPow { exponent: 0.1 };
    env.pap.mean_azimuth = deg(10.0);
    env.pap.mean_elevation = deg(10.0);
    env.pap.spread_azimuth = deg(15.0);
    env.pap.spread_elevation = deg(15.0);
    env
}

fn band_plan(num_bands: usize, num_subbands: usize, num_frames: usize) -> BandPlan<f64> {
    let band_centers: Vec<f64> = (1..=num_bands).map(|i| (2.0 + 0.5 * i as f64) * 1e9).collect();
    let width = 1e7;
    let subband_centers = band_centers
        .iter()
        .map(|&fc| {
            (0..num_subbands)
                .map(|j| fc + (j as f64 - (num_subbands as f64 - 1.0) / 2.0) * width)
                .collect()
        })
        .collect();
    BandPlan::new(band_centers, subband_centers, width, 1e-13, num_frames, 1e-3, 1.0).unwrap()
}

fn grid_geometry(rows: usize, cols: usize) -> SystemGeometry<f64> {
    let mean_center = 2.75e9;
    let spacing = 0.3 * crate::channel::SPEED_OF_LIGHT / mean_center;
    let elements = SystemGeometry::element_grid(rows, cols, spacing);
    let span = spacing * (cols.max(rows) as f64 - 1.0) / 4.0;
    let feeds = vec![
        [-0.02, -span, -span],
        [-0.02, span, -span],
        [-0.02, -span, span],
        [-0.02, span, span],
    ];
    SystemGeometry::new(feeds, elements, 2.1).unwrap()
}

fn model_of(
    rows: usize,
    cols: usize,
    num_bands: usize,
    num_subbands: usize,
    num_frames: usize,
    quadrature: (usize, usize),
    seed: u64,
) -> (ChannelModel<f64>, BeamformingConfig<f64>) {
    let geometry = grid_geometry(rows, cols);
    let plan = band_plan(num_bands, num_subbands, num_frames);
    let mut env = unit_env(num_bands);
    env.quadrature = quadrature;
    let roi = RoiBox::new([10.0, 0.0, 0.0], [10.0, 10.0, 2.0]).unwrap();
    let k = geometry.num_feeds();
    let m = geometry.num_elements();
    let model = ChannelModel::new(geometry, plan, env, roi).unwrap();
    let bf = random_config(model.plan(), k, m, &mut named_stream(seed, "testutil/init"));
    (model, bf)
}

/// Small instance: B=2, J=2, N_F=2, K=4, M=6. Fast enough for tight loops.
pub fn small_model() -> (ChannelModel<f64>, BeamformingConfig<f64>) {
    model_of(2, 3, 2, 2, 2, (32, 16), 7)
}

/// Gradient-validation instance: B=2, J=4, N_F=4, K=4, M=16.
pub fn validation_model() -> (ChannelModel<f64>, BeamformingConfig<f64>) {
    model_of(4, 4, 2, 4, 4, (32, 16), 11)
}

/// Desk-scale default instance: B=2, J=4, N_F=8, K=4, M=64.
pub fn desk_model() -> (ChannelModel<f64>, BeamformingConfig<f64>) {
    model_of(8, 8, 2, 4, 8, (64, 32), 13)
}
