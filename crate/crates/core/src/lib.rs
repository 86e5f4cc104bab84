//! Certified robustness analysis for small neural ODEs.
//!
//! The engine integrates learned dynamics with a controlled adaptive
//! Runge-Kutta solver whose step sizes live on an exponentially spaced
//! grid, builds the graph of all solver trajectories reachable from an
//! input region, propagates interval and linear bounds through that graph,
//! and decides robustness properties for classification and regression
//! heads.

pub mod bench;
pub mod domains;
pub mod error;
pub mod graph;
pub mod lcap;
pub mod math;
pub mod model;
pub mod solver;
mod tableau;
pub mod training;
pub mod verifier;

pub use error::{Error, Result};

#[cfg(test)]
mod concurrency {
    // the core value types are immutable data, shareable across threads;
    // finished graphs and loaded models likewise
    fn assert_send_sync<T: Send + Sync>() {}

    #[test]
    fn shared_types_are_send_and_sync() {
        assert_send_sync::<crate::math::Vector>();
        assert_send_sync::<crate::math::Matrix>();
        assert_send_sync::<crate::math::IntervalBox>();
        assert_send_sync::<crate::math::AffineMap>();
        assert_send_sync::<crate::domains::LinearBounds>();
        assert_send_sync::<crate::model::ModelSpec>();
        assert_send_sync::<crate::solver::StepKey>();
        assert_send_sync::<crate::graph::TrajectoryGraph>();
        assert_send_sync::<crate::verifier::Verdict>();
    }
}
