//! Traffic pattern mining for cellular towers.
//!
//! The pipeline runs in stages, each a module: [`ingest`] bins session logs
//! into 10-minute slots, [`vectorize`] z-scores them, [`cluster`] groups towers
//! by average-linkage HAC with a Davies-Bouldin cut, [`timefeat`] and
//! [`spectrum`] characterise each pattern, [`decompose`] writes towers as
//! convex mixtures of four primary patterns and [`poi`] checks the result
//! against nearby points of interest. [`synth`] generates cities with planted
//! ground truth and [`pipeline`] ties the stages together through files.

pub mod cluster;
pub mod decompose;
pub mod ingest;
pub mod pipeline;
pub mod poi;
pub mod scalar;
pub mod spectrum;
pub mod synth;
pub mod timefeat;
pub mod vectorize;

mod error;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Seconds per traffic slot.
pub const SLOT_SECONDS: i64 = 600;
/// Slots per day.
pub const SLOTS_PER_DAY: usize = 144;
/// Slots per week.
pub const SLOTS_PER_WEEK: usize = 1008;

pub type TrafficVector64 = vectorize::TrafficVector<f64>;
pub type TrafficVector32 = vectorize::TrafficVector<f32>;
pub type Dendrogram64 = cluster::Dendrogram<f64>;
pub type Dendrogram32 = cluster::Dendrogram<f32>;
pub type ClusterModel64 = cluster::ClusterModel<f64>;
pub type ClusterModel32 = cluster::ClusterModel<f32>;
pub type Spectrum64 = spectrum::Spectrum<f64>;
pub type Spectrum32 = spectrum::Spectrum<f32>;
pub type SpectralFeature64 = spectrum::SpectralFeature<f64>;
pub type SpectralFeature32 = spectrum::SpectralFeature<f32>;
pub type FeaturePoint64 = decompose::FeaturePoint<f64>;
pub type FeaturePoint32 = decompose::FeaturePoint<f32>;
pub type PolygonModel64 = decompose::PolygonModel<f64>;
pub type PolygonModel32 = decompose::PolygonModel<f32>;
pub type MixtureCoefficients64 = decompose::MixtureCoefficients<f64>;
pub type MixtureCoefficients32 = decompose::MixtureCoefficients<f32>;
