//! Software twin of a transmon-qudit microwave field sensor: exact charge
//! basis spectra, time-domain Ramsey pipelines under an unknown field tone,
//! damped-sine fitting, shift lookup tables and their inversion back to the
//! field amplitude and frequency.
//!
//! The numerical core is generic over the scalar type through [`real::Real`]
//! (`f32` or `f64`); the `*64` aliases below are the working precision of
//! the sensing pipeline.

pub mod analysis;
pub mod dynamics;
pub mod fitting;
pub mod io;
pub mod linalg;
pub mod lookup;
pub mod real;
pub mod transmon;

pub type TransmonParams64 = transmon::TransmonParams<f64>;
pub type Spectrum64 = transmon::Spectrum<f64>;
pub type CouplingOperator64 = transmon::CouplingOperator<f64>;
pub type DriveTone64 = dynamics::DriveTone<f64>;
pub type Sequence64 = dynamics::Sequence<f64>;
pub type QuditState64 = dynamics::QuditState<f64>;
pub type QuditOperators64 = dynamics::QuditOperators<f64>;
pub type RamseyConfig64 = dynamics::RamseyConfig<f64>;
pub type RamseyTrace64 = fitting::RamseyTrace<f64>;
pub type DampedSineFit64 = fitting::DampedSineFit<f64>;
pub type ShiftMeasurement64 = fitting::ShiftMeasurement<f64>;
pub type SensingProtocol64 = lookup::SensingProtocol<f64>;
pub type GridSpec64 = lookup::GridSpec<f64>;
pub type LookupGrid64 = lookup::LookupGrid<f64>;
pub type SensorLimits64 = lookup::SensorLimits<f64>;
pub type SenseResult64 = lookup::SenseResult<f64>;
pub type Device64 = lookup::Device<f64>;
