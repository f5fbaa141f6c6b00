use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semsplat_core::gaussian::GaussianSet;
use semsplat_core::geometry::{erp_direction, ErpGrid};
use semsplat_core::tensorio::{read_archive, read_tensor};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semsplat"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn demo(dir: &Path, extra: &[&str]) {
    let mut args = vec!["demo", "--out", "scene"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn read(p: PathBuf) -> Vec<u8> {
    fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn meta(dir: &Path) -> Vec<(String, String)> {
    fs::read_to_string(dir.join("scene/meta.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| {
            l.split_once('=')
                .map(|(a, b)| (a.to_string(), b.to_string()))
        })
        .collect()
}

#[test]
fn demo_is_seeded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    demo(a.path(), &["--height", "64", "--width", "128"]);
    demo(b.path(), &["--height", "64", "--width", "128"]);
    for f in [
        "depth.ktsr",
        "mask.ktsr",
        "boxes.txt",
        "weights.ktar",
        "meta.txt",
    ] {
        assert_eq!(
            read(a.path().join("scene").join(f)),
            read(b.path().join("scene").join(f)),
            "{f}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    demo(
        c.path(),
        &["--height", "64", "--width", "128", "--seed", "1"],
    );
    assert_ne!(
        read(a.path().join("scene/depth.ktsr")),
        read(c.path().join("scene/depth.ktsr"))
    );
}

#[test]
fn demo_depth_matches_ray_cast_at_wall_pixels() {
    let d = tempfile::tempdir().unwrap();
    demo(
        d.path(),
        &["--height", "64", "--width", "128", "--seed", "4"],
    );
    let m = meta(d.path());
    let get = |k: &str| -> Vec<f64> {
        let v = &m.iter().find(|(a, _)| a == k).unwrap().1;
        v.split(',').map(|x| x.parse().unwrap()).collect()
    };
    let (lo, hi) = (get("room-lo"), get("room-hi"));
    let depth = read_tensor(d.path().join("scene/depth.ktsr")).unwrap();
    let mask = read_tensor(d.path().join("scene/mask.ktsr")).unwrap();
    let (depth, mask) = (depth.as_f32().unwrap(), mask.as_u8().unwrap());
    assert!(mask.iter().all(|&c| c < 12));
    let grid = ErpGrid::new(64, 128).unwrap();
    let mut walls = 0;
    for r in 0..64 {
        for c in 0..128 {
            if mask[r * 128 + c] != 11 {
                continue;
            }
            let dir = erp_direction(r as f64 + 0.5, c as f64 + 0.5, grid);
            // Nearest of the six planes hit at positive distance.
            let mut t = f64::INFINITY;
            for i in 0..3 {
                for plane in [lo[i], hi[i]] {
                    let s = plane / dir[i];
                    if s > 0.0 {
                        t = t.min(s);
                    }
                }
            }
            let got = depth[r * 128 + c] as f64;
            assert!(
                (got - t).abs() <= 1e-6 * t,
                "pixel ({r}, {c}): {got} vs {t}"
            );
            walls += 1;
        }
    }
    assert!(walls > 64 * 128 / 2);
}

#[test]
fn lift_counts_and_zero_weight_radii() {
    let d = tempfile::tempdir().unwrap();
    demo(d.path(), &["--height", "64", "--width", "128"]);
    ok(
        d.path(),
        &[
            "lift",
            "--depth",
            "scene/depth.ktsr",
            "--weights",
            "scene/weights.ktar",
            "--out",
            "g.ktar",
            "--stride",
            "8",
        ],
    );
    let gs = GaussianSet::from_archive(&read_archive(d.path().join("g.ktar")).unwrap()).unwrap();
    assert_eq!(gs.len(), 128);
    assert!(gs.gaussians.iter().all(|g| g.radii == [0.25; 3]));
    let cfg = read_archive(d.path().join("g.ktar"))
        .unwrap()
        .get("config")
        .unwrap()
        .as_text()
        .unwrap();
    assert!(cfg.contains("stride=8\n") && cfg.contains("features=stub\n"));
}

#[test]
fn missing_weights_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    demo(d.path(), &["--height", "16", "--width", "32"]);
    let out = run(
        d.path(),
        &[
            "lift",
            "--depth",
            "scene/depth.ktsr",
            "--weights",
            "nope.ktar",
            "--out",
            "g.ktar",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ktar"));
}

#[test]
fn usage_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["lift"]).status.code(), Some(1));
    assert_eq!(run(d.path(), &["bogus"]).status.code(), Some(1));
    assert_eq!(
        run(d.path(), &["demo", "--out", "x", "--seed", "-3"])
            .status
            .code(),
        Some(1)
    );
    let help = ok(d.path(), &["lift", "--help"]);
    for flag in ["--stride", "--r-max", "--num-categories", "--feature-dim"] {
        assert!(help.contains(flag), "{flag}");
    }
    assert!(
        help.contains("[default: 4]")
            && help.contains("[default: 0.5]")
            && help.contains("[default: 12]")
    );
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    demo(
        d.path(),
        &["--height", "16", "--width", "32", "--objects", "3"],
    );
    let out = ok(
        d.path(),
        &[
            "eval",
            "--pred",
            "scene/boxes.txt",
            "--gt",
            "scene/boxes.txt",
        ],
    );
    assert!(
        out.contains("mAP@25 = 1.0000") && out.contains("mAP@50 = 1.0000"),
        "{out}"
    );
    for line in out.lines().filter(|l| l.trim_start().starts_with("AP@")) {
        for cell in line.split_whitespace().skip(1) {
            assert!(cell == "-" || cell == "1.0000", "{line}");
        }
    }
}

#[test]
fn gradcheck_passes_and_can_fail() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["gradcheck"]);
    assert!(out.contains("max rel err < 1e-3"), "{out}");
    let strict = run(d.path(), &["gradcheck", "--threshold", "1e-30"]);
    assert_eq!(strict.status.code(), Some(3));
}

fn pipeline(dir: &Path, threads: &str) {
    let t = ["--threads", threads];
    let step = |args: &[&str]| {
        let mut a = args.to_vec();
        a.extend_from_slice(&t);
        ok(dir, &a)
    };
    step(&[
        "demo",
        "--out",
        "scene",
        "--height",
        "64",
        "--width",
        "128",
        "--init-scale",
        "0.1",
    ]);
    step(&[
        "lift",
        "--depth",
        "scene/depth.ktsr",
        "--weights",
        "scene/weights.ktar",
        "--out",
        "g.ktar",
        "--stride",
        "4",
    ]);
    step(&[
        "optimize",
        "--gaussians",
        "g.ktar",
        "--weights",
        "scene/weights.ktar",
        "--out",
        "o.ktar",
    ]);
    step(&[
        "render",
        "--gaussians",
        "o.ktar",
        "--out",
        "c.ktar",
        "--resolution",
        "16",
        "--png-dir",
        "png",
        "--mask",
        "scene/mask.ktsr",
    ]);
    step(&[
        "detect",
        "--gaussians",
        "o.ktar",
        "--weights",
        "scene/weights.ktar",
        "--out",
        "det.txt",
    ]);
    step(&[
        "eval",
        "--pred",
        "det.txt",
        "--gt",
        "scene/boxes.txt",
        "--out",
        "table.txt",
    ]);
    step(&[
        "sample",
        "--depth",
        "scene/depth.ktsr",
        "--fps",
        "64,256",
        "--ply-dir",
        "ply",
    ]);
}

const OUTPUTS: [&str; 10] = [
    "g.ktar",
    "o.ktar",
    "c.ktar",
    "png/front.png",
    "png/down.png",
    "det.txt",
    "table.txt",
    "ply/original.ply",
    "ply/fps_64.ply",
    "ply/voxel_0.1.ply",
];

#[test]
fn pipeline_is_idempotent_and_thread_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "1");
    pipeline(b.path(), "4");
    for f in OUTPUTS {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
    pipeline(a.path(), "2");
    for f in OUTPUTS {
        assert_eq!(
            read(a.path().join(f)),
            read(b.path().join(f)),
            "{f} after rerun"
        );
    }
}

#[test]
fn config_file_feeds_flags() {
    let d = tempfile::tempdir().unwrap();
    demo(d.path(), &["--height", "64", "--width", "128"]);
    fs::write(
        d.path().join("run.cfg"),
        "# lift settings\nstride = 8\nr_max = 0.2\n",
    )
    .unwrap();
    let lift = [
        "--config",
        "run.cfg",
        "lift",
        "--depth",
        "scene/depth.ktsr",
        "--weights",
        "scene/weights.ktar",
        "--out",
        "g.ktar",
    ];
    ok(d.path(), &lift);
    let gs = GaussianSet::from_archive(&read_archive(d.path().join("g.ktar")).unwrap()).unwrap();
    assert_eq!(gs.len(), 128);
    assert!(gs
        .gaussians
        .iter()
        .all(|g| (g.radii[0] - 0.1).abs() < 1e-15));
    let mut flagged = lift.to_vec();
    flagged.extend(["--stride", "16"]);
    ok(d.path(), &flagged);
    let gs = GaussianSet::from_archive(&read_archive(d.path().join("g.ktar")).unwrap()).unwrap();
    assert_eq!(gs.len(), 32);
}

#[test]
fn sample_reports_the_declared_grid() {
    let d = tempfile::tempdir().unwrap();
    demo(d.path(), &["--height", "64", "--width", "128"]);
    let out = ok(
        d.path(),
        &["sample", "--depth", "scene/depth.ktsr", "--stride", "1"],
    );
    for m in [
        "original",
        "fps k=1024",
        "fps k=4096",
        "voxel 0.05 m",
        "voxel 0.1 m",
    ] {
        assert!(out.contains(m), "{out}");
    }
}
