//! Diagnostics over frozen artifacts.

pub mod ablation;
pub mod film;
pub mod metrics;
pub mod pca;
pub mod sweep;

pub use ablation::{embedding_pca, gain_drop, noise_floor, step_transfer, EmbeddingPca, GainDropResult, TransferResult};
pub use film::{film_capacity, film_probe, FilmFit, FilmProbeRow, FilmSummary, FitConfig};
pub use metrics::{energy_distance, sliced_wasserstein, EnergyReference};
pub use pca::{pca, PcaResult};
pub use sweep::{feature_trajectory_pca, layer_time_sweep, sweep_grid, time_sweep, SweepResult};
