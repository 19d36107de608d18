//! Geospatial tabular regression with Gaussian-biased Cartesian-product
//! attention, plus the supporting pieces needed to exercise it end to end:
//! synthetic spatial data generators, radius-based neighborhood queries,
//! a geographically weighted regression baseline, a training loop, and
//! analytic parameter/FLOP accounting.

pub mod autodiff;
pub mod dgp;
pub mod seeding;
pub mod spatial;
pub mod table;
