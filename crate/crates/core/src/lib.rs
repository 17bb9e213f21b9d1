//! Desk-scale simulator and library for positioning with a multi-band
//! reconfigurable holographic surface.
//!
//! The pipeline has four parts:
//!
//! * [`channel`] — the multi-band surface channel: on-board feed-to-element
//!   propagation, spherical-wave line-of-sight gains with analytic position
//!   derivatives, angular-quadrature multipath covariance, and
//!   frequency/time coherence, plus received-signal synthesis.
//! * [`crlb`] — the positioning error bound: received covariance, Fisher
//!   information, `tr(J^{-1})`, and closed-form gradients w.r.t. the digital
//!   and analog beamforming variables, cross-validated by central finite
//!   differences.
//! * [`beamforming`] — proximal operators for the power/box constraints and
//!   the alternating variance-reduced proximal stochastic descent loop that
//!   minimizes the mean bound over sampled region-of-interest positions.
//! * [`estimator`] and [`federated`] — the MLP position estimator with Adam
//!   pretraining on the simulated source domain, and the federated
//!   adaptation harness with differentially private clipped updates, convex
//!   user scheduling, and convergence diagnostics.
//!
//! All numeric code is generic over the [`scalar::Real`] scalar (`f32` or
//! `f64`); the `*64` aliases below pin the common `f64` instantiation.

pub mod beamforming;
pub mod bessel;
pub mod channel;
pub mod crlb;
pub mod error;
pub mod estimator;
pub mod federated;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod testutil;

pub use error::{Error, Result};

pub type SystemGeometry64 = channel::SystemGeometry<f64>;
pub type BandPlan64 = channel::BandPlan<f64>;
pub type EnvironmentProfile64 = channel::EnvironmentProfile<f64>;
pub type RoiBox64 = channel::RoiBox<f64>;
pub type BeamformingConfig64 = channel::BeamformingConfig<f64>;
pub type ChannelModel64 = channel::ChannelModel<f64>;
pub type GainPattern64 = channel::GainPattern<f64>;
pub type PowerAngleProfile64 = channel::PowerAngleProfile<f64>;

pub type FisherMatrix64 = crlb::FisherMatrix<f64>;
pub type CrlbReport64 = crlb::CrlbReport<f64>;

pub type OptimizerConfig64 = beamforming::OptimizerConfig<f64>;
pub type OptimizeOutcome64 = beamforming::OptimizeOutcome<f64>;

pub type MlpParams64 = estimator::MlpParams<f64>;
pub type LabeledDataset64 = estimator::LabeledDataset<f64>;
pub type Featurizer64 = estimator::Featurizer<f64>;
pub type TrainConfig64 = estimator::TrainConfig<f64>;

pub type DpConfig64 = federated::DpConfig<f64>;
pub type UserState64 = federated::UserState<f64>;
pub type FlRunConfig64 = federated::FlRunConfig<f64>;
pub type ScheduleVector64 = federated::ScheduleVector<f64>;
