//! Evaluation: tiling-based video denoising, metrics, heat-maps and the benchmark.

pub mod bench;
pub mod heatmap;
pub mod metrics;
pub mod video;

pub use bench::{bench, generate_suite, tune_threshold, BenchReport, BenchSpec, EvalReport, Tuning};
pub use heatmap::{emit_heatmap, heatmap_image};
pub use metrics::{pearson, psnr, ssim};
pub use video::{denoise_video, trace_video, DenoiseOptions, DenoiseReport, PatchRecord, VideoTrace};
