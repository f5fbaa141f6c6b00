use std::f64::consts::PI;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use semsplat_core::detect::DetectParams;
use semsplat_core::gaussian::{DEFAULT_R_MAX, DEFAULT_STRIDE};
use semsplat_core::refine::OptimizeParams;
use semsplat_core::render::DEFAULT_RESOLUTION;

use crate::demo::NUM_CATEGORIES;
use crate::features::DEFAULT_FEATURE_DIM;

#[derive(Parser, Debug)]
#[command(
    name = "semsplat",
    version,
    about = "Panoramic semantic Gaussians: lift, refine, render, detect, evaluate"
)]
pub struct Cli {
    /// key=value file of subcommand flags; command-line flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads, 0 = one per core; results do not depend on it
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Lift an ERP depth map to semantic Gaussians
    Lift(LiftArgs),
    /// Run the stacked refinement blocks over a Gaussian set
    Optimize(OptimizeArgs),
    /// Render a Gaussian set to six semantic cube faces
    Render(RenderArgs),
    /// Decode 3D boxes from foreground Gaussians
    Detect(DetectArgs),
    /// Score detections against ground truth (AP@25 / AP@50)
    Eval(EvalArgs),
    /// FPS and voxel downsampling study of a depth point cloud
    Sample(SampleArgs),
    /// Finite-difference check of the rendering gradient
    Gradcheck(GradcheckArgs),
    /// Write a synthetic room bundle
    Demo(DemoArgs),
}

#[derive(Args, Debug, Clone)]
pub struct LiftArgs {
    /// f32 [H, W] depth map (KTSR)
    #[arg(long)]
    pub depth: PathBuf,
    /// f32 [H, W, F] features (KTSR); positional-encoding stub when absent
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Weight archive (KTAR)
    #[arg(long)]
    pub weights: PathBuf,
    /// Output Gaussian archive (KTAR)
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    pub stride: usize,
    #[arg(long, default_value_t = DEFAULT_R_MAX)]
    pub r_max: f64,
    /// Category count K, background is K-1
    #[arg(long, default_value_t = NUM_CATEGORIES)]
    pub num_categories: usize,
    /// Width of the feature stub
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    pub feature_dim: usize,
}

#[derive(Args, Debug, Clone)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub gaussians: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stacked sub-module count
    #[arg(long, default_value_t = OptimizeParams::default().n)]
    pub blocks: usize,
    /// Meters
    #[arg(long, default_value_t = OptimizeParams::default().voxel_size)]
    pub voxel_size: f64,
    /// Largest center step S, meters
    #[arg(long, default_value_t = OptimizeParams::default().max_step)]
    pub max_step: f64,
    /// Scale-offset range, meters
    #[arg(long, default_value_t = OptimizeParams::default().beta)]
    pub beta: f64,
    /// Rotation-offset range, radians
    #[arg(long, default_value_t = PI / 4.0)]
    pub eta_rot: f64,
}

#[derive(Args, Debug, Clone)]
pub struct RenderArgs {
    #[arg(long)]
    pub gaussians: PathBuf,
    /// Output cube map archive (KTAR)
    #[arg(long)]
    pub out: PathBuf,
    /// Face resolution, pixels
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: usize,
    /// Write one argmax PNG per face here
    #[arg(long)]
    pub png_dir: Option<PathBuf>,
    /// u8 [H, W] ERP mask; prints the semantic loss against it
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DetectArgs {
    #[arg(long)]
    pub gaussians: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Detections in annotation text with a confidence field
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DetectParams::new(2).iou_threshold)]
    pub iou: f64,
    /// Boxes kept per category
    #[arg(long, default_value_t = DetectParams::new(2).max_keep)]
    pub max_keep: usize,
    /// Comma-separated foreground ids [default: all but K-1]
    #[arg(long)]
    pub foreground: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Prediction file per scene (8 or 9 fields per line), repeatable
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Ground-truth file per scene, paired with --pred in order
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    #[arg(long, default_value_t = NUM_CATEGORIES)]
    pub num_categories: usize,
    /// Also write the table here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub depth: PathBuf,
    /// Pixel stride when unprojecting
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    /// Comma-separated FPS sample counts
    #[arg(long, default_value = "1024,4096")]
    pub fps: String,
    /// Comma-separated voxel sizes, meters
    #[arg(long, default_value = "0.05,0.1")]
    pub voxel: String,
    /// Write original and downsampled clouds as ASCII PLY here
    #[arg(long)]
    pub ply_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 8)]
    pub resolution: usize,
    #[arg(long, default_value_t = 3)]
    pub num_categories: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Fail when the max relative error reaches this
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
}

#[derive(Args, Debug, Clone)]
pub struct DemoArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    /// Object count, 0 = random 1-3
    #[arg(long, default_value_t = 0)]
    pub objects: usize,
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    pub feature_dim: usize,
    /// MLP hidden width of the generated weights
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// MLP depth of the generated weights
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Refinement blocks in the generated weights
    #[arg(long, default_value_t = OptimizeParams::default().n)]
    pub blocks: usize,
    /// 0 writes zero weights, otherwise uniform in (-s, s)
    #[arg(long, default_value_t = 0.0)]
    pub init_scale: f64,
}
