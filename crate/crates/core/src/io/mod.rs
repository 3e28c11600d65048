//! On-disk formats: grayscale images, binary containers for trajectories,
//! checkpoints and null schedules, run manifests, and CSV exports.

pub mod container;
pub mod csv;
pub mod manifest;
pub mod pgm;

pub use container::{
    load_checkpoint, load_null_schedule, load_trajectory, save_checkpoint, save_null_schedule,
    save_trajectory,
};
pub use csv::{write_deviation_csv, write_loss_csv, write_norms_csv, write_recon_report_csv};
pub use manifest::{read_manifest, validate_manifest, write_manifest, RunManifest, SPEC_VERSION};
pub use pgm::{read_image, write_image, ImageFormat};
