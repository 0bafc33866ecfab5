//! Discrete-event simulator for radio sensor networks deployed underwater.
//!
//! Layers, bottom up: [`engine`] (event queue, drifting clocks, seeded RNG
//! streams), [`channel`] (path loss, fading, model fitting), [`radio`] (FSK
//! bit-error chain and the shared medium), [`mac`], [`routing_ctp`],
//! [`network`] (wires one trial together), [`scenarios`] and [`cli`].
//!
//! Channel and radio math is generic over [`num::Real`]; the aliases below fix
//! the scalar to `f64`, which is what the simulator itself uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cli;
pub mod engine;
pub mod mac;
pub mod network;
pub mod num;
pub mod radio;
pub mod routing_ctp;
pub mod scenarios;

pub type Position = channel::Position<f64>;
pub type LinearPathLoss = channel::LinearPathLoss<f64>;
pub type FreeSpacePathLoss = channel::FreeSpacePathLoss<f64>;
pub type PathLossModel = channel::PathLossModel<f64>;
pub type FadingModel = channel::FadingModel<f64>;
pub type MeasurementSet = channel::MeasurementSet<f64>;
pub type AffineFit = channel::AffineFit<f64>;
pub type FadingEstimate = channel::FadingEstimate<f64>;
pub type RadioParams = radio::RadioParams<f64>;
