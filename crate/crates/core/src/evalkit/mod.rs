//! Image-quality metrics, evaluation reports and latent diagnostics.

pub mod diagnostics;
pub mod metrics;
pub mod pca;
pub mod report;

pub use diagnostics::{
    latent_symmetry_report, project_pair_latents, symmetry_rows, write_projection, write_symmetry_report,
    ProjectedLatent, SymmetryReport, SymmetryRow,
};
pub use metrics::{mean_std, mse, neumaier_sum, psnr, ssim, SsimParams, PSNR_CAP_DB, SIGNED_UNIT_RANGE};
pub use pca::{project_latents_2d, Projection};
pub use report::{evaluate, summarize, write_report, EvalReport, Metric, ReportRow, SampleScores};
