use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use semsplat_core::detect::{detect, format_detections, Box3D, DetectParams};
use semsplat_core::eval::{category_names, map_report, Scene, THRESHOLDS};
use semsplat_core::gaussian::{lift, GaussianSet, LiftParams};
use semsplat_core::geometry::{panorama_to_cubemap, unproject_depth_map, Face};
use semsplat_core::nn::WeightSet;
use semsplat_core::refine::{optimize, OptimizeParams};
use semsplat_core::render::{
    gradient_check, render_cubemap, semantic_loss, GtCubeMap, RenderConfig,
};
use semsplat_core::sampling::{
    format_report, fps, sampling_report, voxel_downsample, write_ply, Pt,
};
use semsplat_core::scenes::random_scene;
use semsplat_core::tensorio::{
    format_box_record, load_annotations, load_depth_map, load_semantic_mask, parse_box_records,
    read_archive, read_tensor, write_archive, write_tensor, AnnotationError, BoxAnnotation, Tensor,
    TensorArchive,
};

use crate::args::*;
use crate::demo::{self, DemoParams, WeightParams};
use crate::features::feature_stub;
use crate::png::write_label_png;

/// A check ran and failed; exit code 3.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub const CONFIG_ENTRY: &str = "config";

/// `command=...` followed by `key=value` lines.
fn echo(command: &str, pairs: &[(&str, String)]) -> String {
    let mut s = format!("command={command}\n");
    for (k, v) in pairs {
        s += &format!("{k}={v}\n");
    }
    s
}

fn load_weights(path: &Path) -> Result<WeightSet> {
    let a = read_archive(path).with_context(|| format!("reading weights {}", path.display()))?;
    WeightSet::from_archive(&a).with_context(|| format!("decoding weights {}", path.display()))
}

fn load_gaussians(path: &Path) -> Result<(GaussianSet, String)> {
    let a = read_archive(path).with_context(|| format!("reading gaussians {}", path.display()))?;
    let gs = GaussianSet::from_archive(&a)
        .with_context(|| format!("decoding gaussians {}", path.display()))?;
    let history = a
        .get(CONFIG_ENTRY)
        .and_then(|t| t.as_text())
        .unwrap_or_default();
    Ok((gs, history))
}

fn save_with_config(mut a: TensorArchive, config: &str, path: &Path) -> Result<()> {
    a.insert(CONFIG_ENTRY, Tensor::from_text(config))?;
    write_archive(&a, path).with_context(|| format!("writing {}", path.display()))
}

fn save_gaussians(gs: &GaussianSet, config: &str, path: &Path) -> Result<()> {
    save_with_config(gs.to_archive()?, config, path)
}

pub fn cmd_lift(a: &LiftArgs) -> Result<()> {
    let depth =
        load_depth_map(&a.depth).with_context(|| format!("reading depth {}", a.depth.display()))?;
    let (features, source) = match &a.features {
        Some(p) => (
            read_tensor(p).with_context(|| format!("reading features {}", p.display()))?,
            "file",
        ),
        None => (feature_stub(&depth, a.feature_dim)?, "stub"),
    };
    let feature_dim = match features.shape() {
        &[_, _, f] => f,
        s => bail!("features must be [H, W, F], got {s:?}"),
    };
    let w = load_weights(&a.weights)?;
    let p = LiftParams {
        r_max: a.r_max,
        stride: a.stride,
        num_categories: a.num_categories,
        feature_dim,
    };
    let gs = lift(&depth, &features, &w, &p)?;
    info!("lifted {} gaussians", gs.len());
    let cfg = echo(
        "lift",
        &[
            ("stride", a.stride.to_string()),
            ("r-max", format!("{:?}", a.r_max)),
            ("num-categories", a.num_categories.to_string()),
            ("feature-dim", feature_dim.to_string()),
            ("features", source.to_string()),
        ],
    );
    save_gaussians(&gs, &cfg, &a.out)?;
    println!("lifted {} gaussians", gs.len());
    Ok(())
}

pub fn cmd_optimize(a: &OptimizeArgs) -> Result<()> {
    let (gs, history) = load_gaussians(&a.gaussians)?;
    let w = load_weights(&a.weights)?;
    let p = OptimizeParams {
        n: a.blocks,
        voxel_size: a.voxel_size,
        max_step: a.max_step,
        beta: a.beta,
        eta_rot: a.eta_rot,
    };
    let out = optimize(&gs, &w, &p)?;
    let cfg = history
        + &echo(
            "optimize",
            &[
                ("blocks", p.n.to_string()),
                ("voxel-size", format!("{:?}", p.voxel_size)),
                ("max-step", format!("{:?}", p.max_step)),
                ("beta", format!("{:?}", p.beta)),
                ("eta-rot", format!("{:?}", p.eta_rot)),
            ],
        );
    save_gaussians(&out, &cfg, &a.out)?;
    println!("refined {} gaussians with {} blocks", out.len(), p.n);
    Ok(())
}

pub fn cmd_render(a: &RenderArgs) -> Result<()> {
    let (gs, history) = load_gaussians(&a.gaussians)?;
    let rc = RenderConfig::default();
    let map = render_cubemap(&gs, a.resolution, &rc)?;
    let cfg = history + &echo("render", &[("resolution", a.resolution.to_string())]);
    save_with_config(map.to_archive()?, &cfg, &a.out)?;
    if let Some(dir) = &a.png_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for face in Face::ALL {
            let labels = map.argmax_labels(face);
            write_label_png(
                &labels,
                a.resolution,
                a.resolution,
                &dir.join(format!("{}.png", face.name())),
            )?;
        }
    }
    if let Some(mask_path) = &a.mask {
        let mask = load_semantic_mask(mask_path, gs.num_categories)
            .with_context(|| format!("reading mask {}", mask_path.display()))?;
        let faces = panorama_to_cubemap(&mask, a.resolution)?;
        let gt = GtCubeMap::from_faces(&faces, gs.num_categories)?;
        println!("L_sem = {:.6}", semantic_loss(&map, &gt)?);
    }
    println!(
        "rendered {} gaussians at {}x{} per face",
        gs.len(),
        a.resolution,
        a.resolution
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|_| anyhow::anyhow!("bad {what} entry {x:?}"))
        })
        .collect()
}

pub fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let (gs, history) = load_gaussians(&a.gaussians)?;
    let w = load_weights(&a.weights)?;
    let mut p = DetectParams::new(gs.num_categories);
    p.iou_threshold = a.iou;
    p.max_keep = a.max_keep;
    if let Some(list) = &a.foreground {
        p.foreground = parse_list(list, "foreground id")?;
    }
    let boxes = detect(&gs, &w, &p)?;
    let fg: Vec<String> = p.foreground.iter().map(|x| x.to_string()).collect();
    let cfg = history
        + &echo(
            "detect",
            &[
                ("iou", format!("{:?}", p.iou_threshold)),
                ("max-keep", p.max_keep.to_string()),
                ("foreground", fg.join(",")),
            ],
        );
    let header: String = cfg.lines().map(|l| format!("# {l}\n")).collect();
    fs::write(&a.out, header + &format_detections(&boxes))
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} boxes", boxes.len());
    Ok(())
}

/// Prediction files may omit the confidence field; such boxes score 1.
fn load_predictions(path: &Path, k: usize) -> Result<Vec<Box3D>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = match parse_box_records(&text, k, true) {
        Err(AnnotationError::FieldCount { found: 8, .. }) => parse_box_records(&text, k, false),
        r => r,
    }
    .with_context(|| format!("parsing {}", path.display()))?;
    Ok(records
        .into_iter()
        .map(|(b, c)| Box3D::from_annotation(&b, c.unwrap_or(1.0)))
        .collect())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.pred.len() != a.gt.len() {
        bail!(
            "{} --pred files but {} --gt files",
            a.pred.len(),
            a.gt.len()
        );
    }
    if a.num_categories < 2 {
        bail!("need at least 2 categories");
    }
    let k = a.num_categories;
    let mut scenes: Vec<Scene> = Vec::new();
    for (p, g) in a.pred.iter().zip(&a.gt) {
        let preds = load_predictions(p, k)?;
        let gts = load_annotations(g, k).with_context(|| format!("reading {}", g.display()))?;
        scenes.push((preds, gts));
    }
    let background = k - 1;
    let foreground = |b: &BoxAnnotation| b.category_id != background;
    for (preds, gts) in &mut scenes {
        preds.retain(|b| b.category_id != background);
        gts.retain(foreground);
    }
    let report = map_report(&scenes, &category_names(k - 1), &THRESHOLDS)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &a.out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let depth =
        load_depth_map(&a.depth).with_context(|| format!("reading depth {}", a.depth.display()))?;
    let (_, pts) = unproject_depth_map(&depth, a.stride)?;
    let points: Vec<Pt> = pts
        .iter()
        .map(|p| [p.point[0], p.point[1], p.point[2]])
        .collect();
    let counts: Vec<usize> = parse_list(&a.fps, "fps count")?;
    let sizes: Vec<f64> = parse_list(&a.voxel, "voxel size")?;
    let rows = sampling_report(&points, &counts, &sizes)?;
    print!("{}", format_report(&rows));
    if let Some(dir) = &a.ply_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_ply(&points, dir.join("original.ply"))?;
        for &k in &counts {
            let ids = fps(&points, k.min(points.len()), 0)?;
            let sub: Vec<Pt> = ids.iter().map(|&i| points[i]).collect();
            write_ply(&sub, dir.join(format!("fps_{k}.ply")))?;
        }
        for &v in &sizes {
            write_ply(
                &voxel_downsample(&points, v)?,
                dir.join(format!("voxel_{v}.ply")),
            )?;
        }
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let (gs, gt) = random_scene(a.seed, a.gaussians, a.resolution, a.num_categories)?;
    let check = gradient_check(&gs, &gt, &RenderConfig::default(), a.eps)?;
    println!(
        "max rel err = {:.3e} over {} params (worst index {}: analytic {:.6e}, numeric {:.6e})",
        check.max_rel_err, check.num_params, check.worst, check.analytic, check.numeric
    );
    if check.max_rel_err < a.threshold {
        println!("max rel err < {:e}", a.threshold);
        Ok(())
    } else {
        Err(CheckFailed(format!(
            "max rel err {:.3e} >= {:e}",
            check.max_rel_err, a.threshold
        ))
        .into())
    }
}

pub fn cmd_demo(a: &DemoArgs) -> Result<()> {
    let scene = demo::generate(&DemoParams {
        seed: a.seed,
        height: a.height,
        width: a.width,
        num_objects: a.objects,
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (h, w) = (scene.height, scene.width);
    write_tensor(
        &Tensor::from_f32(vec![h, w], scene.depth.clone())?,
        a.out.join("depth.ktsr"),
    )?;
    write_tensor(
        &Tensor::from_u8(vec![h, w], scene.mask.clone())?,
        a.out.join("mask.ktsr"),
    )?;
    let boxes: String = scene
        .boxes
        .iter()
        .map(|b| format_box_record(b, None) + "\n")
        .collect();
    fs::write(a.out.join("boxes.txt"), boxes)?;
    let wp = WeightParams {
        feature_dim: a.feature_dim,
        hidden: a.hidden,
        layers: a.layers,
        blocks: a.blocks,
        init_scale: a.init_scale,
        seed: a.seed,
    };
    write_archive(
        &demo::init_weights(&wp).to_archive()?,
        a.out.join("weights.ktar"),
    )?;
    let fmt3 = |v: [f64; 3]| format!("{:?},{:?},{:?}", v[0], v[1], v[2]);
    let meta = echo(
        "demo",
        &[
            ("seed", a.seed.to_string()),
            ("height", h.to_string()),
            ("width", w.to_string()),
            ("objects", scene.boxes.len().to_string()),
            ("feature-dim", a.feature_dim.to_string()),
            ("hidden", a.hidden.to_string()),
            ("layers", a.layers.to_string()),
            ("blocks", a.blocks.to_string()),
            ("init-scale", format!("{:?}", a.init_scale)),
            ("room-lo", fmt3(scene.room.lo)),
            ("room-hi", fmt3(scene.room.hi)),
        ],
    );
    fs::write(a.out.join("meta.txt"), meta)?;
    println!(
        "demo room, objects: {}, written to {}",
        scene.boxes.len(),
        a.out.display()
    );
    Ok(())
}
