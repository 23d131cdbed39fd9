use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvs_dcw::eval3d::PointCloud;
use mvs_dcw::io::{pgm, ply, rmvt, scene};
use mvs_dcw::synthetic;
use mvs_dcw::tensor::Tensor;

fn mvsdcw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvsdcw"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cloud(dir: &Path, name: &str, points: Vec<[f64; 3]>) -> PathBuf {
    let p = dir.join(name);
    ply::write_cloud(
        &p,
        &PointCloud::new(points).unwrap(),
        ply::Encoding::BinaryLittleEndian,
    )
    .unwrap();
    p
}

fn grid() -> Vec<[f64; 3]> {
    (0..50)
        .map(|i| [(i % 10) as f64, (i / 10) as f64, 0.5 * i as f64])
        .collect()
}

#[test]
fn eval_identical_clouds_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let g = cloud(dir.path(), "g.ply", grid());
    let json = dir.path().join("r.json");
    let out = mvsdcw(&[
        "eval",
        "--gt",
        s(&g),
        "--recon",
        s(&g),
        "--threshold",
        "1",
        "--json",
        s(&json),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["fscore"], 100.0);
    assert_eq!(v["precision"], 100.0);
    assert_eq!(v["recall"], 100.0);
    assert_eq!(v["metric"], "euclidean");
    assert!(v.get("dtu").is_none());
    assert!(String::from_utf8_lossy(&out.stdout).contains("fscore"));
}

#[test]
fn eval_dtu_mode_and_squared_metric() {
    let dir = tempfile::tempdir().unwrap();
    let g = cloud(dir.path(), "g.ply", vec![[0.0; 3]]);
    let r = cloud(dir.path(), "r.ply", vec![[2.0, 0.0, 0.0]]);
    let json = dir.path().join("r.json");
    let args = [
        "eval",
        "--gt",
        s(&g),
        "--recon",
        s(&r),
        "--threshold",
        "3",
        "--mode",
        "dtu",
        "--json",
        s(&json),
    ];
    assert_eq!(code(&mvsdcw(&args)), 0);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["fscore"], 100.0);
    assert_eq!(v["dtu"]["overall"], 2.0);

    let mut args = args.to_vec();
    args.extend(["--metric", "squared"]);
    assert_eq!(code(&mvsdcw(&args)), 0);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["fscore"], 0.0);
    assert_eq!(v["d_g2r"], 4.0);
}

#[test]
fn cluster_with_one_cluster_labels_every_valid_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let views = synthetic::two_view_scene(3, 2, 12, 16);
    scene::save_scene(dir.path(), &views).unwrap();
    let p = |sub: &str, name: &str| dir.path().join(sub).join(name);
    let prefix = dir.path().join("out");
    let out = mvsdcw(&[
        "cluster",
        "--ref-depth",
        s(&p("depths", "00000000.pfm")),
        "--ref-cam",
        s(&p("cams", "00000000_cam.txt")),
        "--src-depth",
        s(&p("depths", "00000001.pfm")),
        "--src-cam",
        s(&p("cams", "00000001_cam.txt")),
        "-k",
        "1",
        "--seed",
        "4",
        "--out-prefix",
        s(&prefix),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for (i, v) in views.iter().enumerate() {
        let bytes = std::fs::read(dir.path().join(format!("out_view{i}.pgm"))).unwrap();
        // Raw stored values: 16-bit big-endian after the header.
        let payload = &bytes[bytes.len() - 2 * 12 * 16..];
        for (px, valid) in v.depth.valid_mask().iter().enumerate() {
            let stored = u16::from_be_bytes([payload[2 * px], payload[2 * px + 1]]);
            assert_eq!(stored, u16::from(*valid), "view {i} pixel {px}");
        }
        let map = pgm::parse(&bytes).unwrap();
        assert_eq!(map.count(0), v.depth.valid_count());
    }
    let csv = std::fs::read_to_string(dir.path().join("out_centroids.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("cluster,x,y,z\n"));
}

#[test]
fn cluster_rejects_unpaired_sources() {
    let out = mvsdcw(&[
        "cluster",
        "--ref-depth",
        "a.pfm",
        "--ref-cam",
        "a.txt",
        "--src-depth",
        "b.pfm",
        "--out-prefix",
        "x",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_is_deterministic() {
    let a = mvsdcw(&["gradcheck", "--seed", "7"]);
    let b = mvsdcw(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn dcw_writes_one_row_per_term() {
    let dir = tempfile::tempdir().unwrap();
    scene::save_scene(
        dir.path().join("scene"),
        &synthetic::rig_scene(2, 3, 4, 12, 12),
    )
    .unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "k_clusters = 2\nlayers = 1\nseed = 9\n").unwrap();
    let terms = dir.path().join("terms.csv");
    let scene_dir = dir.path().join("scene");
    let pred = scene_dir.join("depths/00000000.pfm");
    let args = [
        "dcw",
        "--config",
        s(&cfg),
        "--scene",
        s(&scene_dir),
        "--out",
        s(&terms),
        "--pred-depth",
        s(&pred),
    ];
    let out = mvsdcw(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&terms).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "n,l,k,direction_count,valid_count,loss,valid_r2s,valid_s2r,tau,selected"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 2 pairs x 1 layer x 2 clusters.
    assert_eq!(rows.len(), 4);
    assert_eq!((rows[0][0], rows[0][1], rows[0][2]), ("1", "1", "0"));
    assert_eq!((rows[3][0], rows[3][1], rows[3][2]), ("2", "1", "1"));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("dcw_weighted "));
    assert!(stdout.contains("depth_loss 0\n"), "{stdout}");

    let first = std::fs::read(&terms).unwrap();
    assert_eq!(code(&mvsdcw(&args)), 0);
    assert_eq!(std::fs::read(&terms).unwrap(), first);
}

#[test]
fn dcw_rejects_bad_config_and_non_finite_feature_files() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    scene::save_scene(&scene_dir, &synthetic::two_view_scene(1, 2, 8, 8)).unwrap();
    let cfg = dir.path().join("cfg.toml");
    let terms = dir.path().join("terms.csv");
    let run = || {
        mvsdcw(&[
            "dcw",
            "--config",
            s(&cfg),
            "--scene",
            s(&scene_dir),
            "--out",
            s(&terms),
        ])
    };

    std::fs::write(&cfg, "k_clusterz = 2\n").unwrap();
    let out = run();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cfg.toml"));

    std::fs::write(&cfg, "k_clusters = 2\nlayers = 1\n").unwrap();
    // The writer refuses NaN, so patch element 5 after the 20-byte rank-3 header.
    let feat = scene_dir.join("feats_layer1/00000001.rmvt");
    let mut bytes = std::fs::read(&feat).unwrap();
    bytes[40..44].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&feat, bytes).unwrap();
    let out = run();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 40"));
    assert!(!terms.exists());
}

#[test]
fn fuse_with_one_view_minimum_is_a_union() {
    let dir = tempfile::tempdir().unwrap();
    let views = synthetic::two_view_scene(5, 1, 10, 10);
    scene::save_scene(dir.path(), &views).unwrap();
    let out_ply = dir.path().join("cloud.ply");
    let out = mvsdcw(&[
        "fuse",
        "--scene",
        s(dir.path()),
        "--min-views",
        "1",
        "--out",
        s(&out_ply),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let total: usize = views.iter().map(|v| v.depth.valid_count()).sum();
    assert_eq!(ply::read(&out_ply).unwrap().vertices.len(), total);

    let out = mvsdcw(&[
        "fuse",
        "--scene",
        s(dir.path()),
        "--min-views",
        "2",
        "--out",
        s(&out_ply),
    ]);
    assert_eq!(code(&out), 0);
    let fused = ply::read(&out_ply).unwrap().vertices.len();
    assert!(fused > 0 && fused < total, "{fused} of {total}");
}

#[test]
fn sample_mesh_writes_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("m.ply");
    std::fs::write(
        &mesh,
        "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n\
         element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n",
    )
    .unwrap();
    let pts = dir.path().join("p.ply");
    let args = [
        "sample-mesh",
        "--mesh",
        s(&mesh),
        "--n",
        "500",
        "--seed",
        "1",
        "--out",
        s(&pts),
        "--encoding",
        "ascii",
    ];
    assert_eq!(code(&mvsdcw(&args)), 0);
    let v = ply::read(&pts).unwrap().vertices;
    assert_eq!(v.len(), 500);
    assert!(v
        .iter()
        .all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]) && p[2] == 0.0));
    let first = std::fs::read(&pts).unwrap();
    assert_eq!(code(&mvsdcw(&args)), 0);
    assert_eq!(std::fs::read(&pts).unwrap(), first);
}

#[test]
fn mmd_prints_a_scalar() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.rmvt");
    let y = dir.path().join("y.rmvt");
    rmvt::write(
        &x,
        &Tensor::from_fn(&[20, 3], |i| ((i * 7) % 11) as f64 / 11.0),
    )
    .unwrap();
    rmvt::write(
        &y,
        &Tensor::from_fn(&[30, 3], |i| 4.0 + ((i * 5) % 13) as f64 / 13.0),
    )
    .unwrap();
    let out = mvsdcw(&["mmd", "--x", s(&x), "--y", s(&y)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: f64 = String::from_utf8(out.stdout)
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(v > 0.1, "{v}");

    let out = mvsdcw(&["mmd", "--x", s(&x), "--y", s(&y), "--bandwidth", "0.5"]);
    assert_eq!(code(&out), 0);

    rmvt::write(&y, &Tensor::from_fn(&[2, 3, 1], |_| 0.0)).unwrap();
    assert_eq!(code(&mvsdcw(&["mmd", "--x", s(&x), "--y", s(&y)])), 1);
}

#[test]
fn degenerate_bandwidth_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.rmvt");
    rmvt::write(&x, &Tensor::full(&[5, 2], 1.5)).unwrap();
    let out = mvsdcw(&["mmd", "--x", s(&x), "--y", s(&x)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bandwidth"));
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&mvsdcw(&[])), 1);
    assert_eq!(code(&mvsdcw(&["eval", "--gt", "a.ply"])), 1);
    assert_eq!(
        code(&mvsdcw(&[
            "eval",
            "--gt",
            "a",
            "--recon",
            "b",
            "--threshold",
            "x"
        ])),
        1
    );
    assert_eq!(
        code(&mvsdcw(&[
            "eval",
            "--gt",
            "/nonexistent/a.ply",
            "--recon",
            "b",
            "--threshold",
            "1"
        ])),
        1
    );
    let help = mvsdcw(&["eval", "--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("default is `euclidean`"));
    assert_eq!(code(&mvsdcw(&["--version"])), 0);
}

#[test]
fn malformed_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ply");
    std::fs::write(&bad, "ply\nformat binary_big_endian 1.0\nend_header\n").unwrap();
    let out = mvsdcw(&[
        "eval",
        "--gt",
        s(&bad),
        "--recon",
        s(&bad),
        "--threshold",
        "1",
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.ply"));

    let empty = cloud(dir.path(), "empty.ply", vec![]);
    assert_eq!(
        code(&mvsdcw(&[
            "eval",
            "--gt",
            s(&empty),
            "--recon",
            s(&empty),
            "--threshold",
            "1"
        ])),
        1
    );
}
