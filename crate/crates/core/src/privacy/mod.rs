//! Rényi-DP accountant for subsampled Gaussian aggregation.
//!
//! [`rdp`] holds the per-round bounds (closed forms with their side
//! conditions, and the integer-order binomial bounds they are derived from);
//! [`calibrate`] turns a target `(ε, δ)` into a noise level and back.

pub mod calibrate;
pub mod rdp;

pub use calibrate::{
    budget_from_noise, calibrate_noise, calibrate_noise_on, lambda_grid, max_rounds, Mechanism,
    NoiseBudget, NoiseCalibration, RoundsBound, Subsampling, DEFAULT_LAMBDA_GRID,
    EPSILON_SEARCH_RANGE,
};
pub use rdp::{
    compose, order_condition_holds, rdp_gaussian, rdp_poisson_closed, rdp_poisson_numeric,
    rdp_to_dp, rdp_uniform_closed, rdp_uniform_numeric, RdpCurve,
};

/// `δ = 1/N^{1.1}` for `N` clients.
pub fn default_delta(n_clients: usize) -> f64 {
    (n_clients as f64).powf(-1.1)
}
