//! Sequence-level alignment: cosine costs, attention-entropy banding,
//! Soft-DTW with its analytic gradient, and the debiased divergence.

mod band;
mod cost;
mod divergence;
mod recursion;

pub use band::{apply_band, build_band, BandParams, BandSpec, STOCHASTIC_TOL};
pub use cost::{cosine_cost, cosine_cost_backward, COSINE_EPS};
pub use divergence::{dtw_loss, dtw_loss_with_band, ndtw, DtwLoss, Ndtw};
pub use recursion::{hard_dtw, soft_dtw, SoftDtwResult, BOUNDARY};
