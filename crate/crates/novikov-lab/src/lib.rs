pub mod novikov_ring;
pub mod model_manifold;
pub mod ode;
pub mod gradient_flow;
pub mod novikov_complex;
pub mod witten_spectral;
pub mod integration_bridge;
pub mod cli_runner;
