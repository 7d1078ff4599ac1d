pub mod dgp;
pub mod far;
pub mod monte_carlo;
