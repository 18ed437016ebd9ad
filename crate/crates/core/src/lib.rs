pub mod error;
pub mod kfda;
pub mod mixture;
pub mod nifti;
pub mod partition;
pub mod phantom;
pub mod pipeline;
pub mod quality;
pub mod stitch;
pub mod volume;
