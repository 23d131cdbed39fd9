//! Checked-in fixtures and on-disk round trips for every file format.

use std::path::PathBuf;

use mvs_dcw::clustering::ClusterMap;
use mvs_dcw::dcw::DcwConfig;
use mvs_dcw::eval3d::{PointCloud, TriangleMesh};
use mvs_dcw::geometry::{Camera, DepthMap};
use mvs_dcw::io::{cam, config, pfm, pgm, ply, ppm, rmvt};
use mvs_dcw::tensor::Tensor;
use mvs_dcw::Error;
use nalgebra::{Matrix4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> Vec<u8> {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", name]
        .iter()
        .collect();
    std::fs::read(p).unwrap()
}

fn f32_value(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    f64::from(rng.random_range(lo..hi) as f32)
}

#[test]
fn fixtures_parse() {
    let d = pfm::parse(&fixture("depth_be.pfm")).unwrap();
    assert_eq!(d.dims(), (3, 2));
    assert_eq!(d.get(0, 0), Some(1.0));
    assert_eq!(d.get(2, 0), Some(3.0));
    assert_eq!((d.get(1, 1), d.get(2, 1)), (None, None));
    assert_eq!(
        pfm::parse(&fixture("depth_1x1.pfm")).unwrap().get(0, 0),
        Some(2.5)
    );

    let a = ply::parse(&fixture("normals_colors.ply")).unwrap();
    let b = ply::parse(&fixture("binary_doubles.ply")).unwrap();
    assert_eq!(
        a.vertices,
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.5]]
    );
    assert_eq!(a.vertices, b.vertices);
    assert_eq!(a.faces, vec![vec![0, 1, 2]]);

    let c = cam::parse(&fixture("identity_cam.txt")).unwrap();
    assert_eq!(c.camera.extrinsic(), &Matrix4::identity());
    assert_eq!((c.depth_num, c.depth_max), (Some(192.0), Some(935.0)));

    let t = rmvt::parse(&fixture("small.rmvt")).unwrap();
    assert_eq!(t.shape(), &[2, 3]);
    assert_eq!(t.data()[4], 3.25);

    let m = pgm::parse(&fixture("clusters_8bit.pgm")).unwrap();
    assert_eq!(m.labels(), &[-1, 0, 1, 2, 2, 1, 0, -1]);

    let img = ppm::parse(&fixture("tiny.ppm")).unwrap();
    assert_eq!((img.channels(), img.height(), img.width()), (3, 2, 2));
    assert_eq!(img.get(0, 0, 0), 1.0);
    assert_eq!((img.get(0, 1, 0), img.get(2, 1, 0)), (0.0, 1.0));

    let cfg = config::parse(&fixture("defaults.toml")).unwrap();
    assert_eq!(cfg, DcwConfig::default());
}

#[test]
fn fixtures_survive_byte_rewrite() {
    let d = pfm::parse(&fixture("depth_be.pfm")).unwrap();
    assert_eq!(pfm::parse(&pfm::to_bytes(&d)).unwrap(), d);
    let c = cam::parse(&fixture("identity_cam.txt")).unwrap();
    assert_eq!(cam::to_text(&c).as_bytes(), fixture("identity_cam.txt"));
    let t = rmvt::parse(&fixture("small.rmvt")).unwrap();
    assert_eq!(rmvt::to_bytes(&t).unwrap(), fixture("small.rmvt"));
    let m = pgm::parse(&fixture("clusters_8bit.pgm")).unwrap();
    assert_eq!(pgm::parse(&pgm::to_bytes(&m).unwrap()).unwrap(), m);
}

#[test]
fn seeded_disk_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..30));

        let depth: Vec<f64> = (0..w * h)
            .map(|_| {
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    f32_value(&mut rng, 0.1, 1000.0)
                }
            })
            .collect();
        let d = DepthMap::new(w, h, depth).unwrap();
        pfm::write(p("d.pfm"), &d).unwrap();
        let back = pfm::read(p("d.pfm")).unwrap();
        assert_eq!(back, d);
        assert_eq!(pfm::to_bytes(&back), std::fs::read(p("d.pfm")).unwrap());

        let pts: Vec<[f64; 3]> = (0..rng.random_range(0..200))
            .map(|_| [0; 3].map(|_| f32_value(&mut rng, -50.0, 50.0)))
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        for enc in [ply::Encoding::Ascii, ply::Encoding::BinaryLittleEndian] {
            ply::write_cloud(p("c.ply"), &cloud, enc).unwrap();
            assert_eq!(ply::read(p("c.ply")).unwrap().vertices, pts);
        }
        if pts.len() >= 3 {
            let tris: Vec<[usize; 3]> = (0..10)
                .map(|_| [0; 3].map(|_| rng.random_range(0..pts.len())))
                .collect();
            let mesh = TriangleMesh::new(pts.clone(), tris.clone()).unwrap();
            ply::write_mesh(p("m.ply"), &mesh, ply::Encoding::BinaryLittleEndian).unwrap();
            let back = ply::read(p("m.ply")).unwrap().into_mesh().unwrap();
            assert_eq!(
                (back.vertices(), back.triangles()),
                (pts.as_slice(), tris.as_slice())
            );
        }

        let r = Rotation3::from_euler_angles(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            0.4,
        );
        let t = Vector3::new(
            rng.random_range(-9.0..9.0),
            rng.random_range(-9.0..9.0),
            rng.random_range(-9.0..9.0),
        );
        let camera = Camera::from_pose(
            rng.random_range(100.0..2000.0),
            31.7,
            22.1,
            r.into_inner(),
            t,
        )
        .unwrap();
        let cf = cam::CamFile {
            camera,
            depth_num: Some(192.0),
            depth_max: Some(rng.random_range(500.0..900.0)),
        };
        cam::write(p("c.txt"), &cf).unwrap();
        assert_eq!(cam::read(p("c.txt")).unwrap(), cf);

        let shape = [
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        ];
        let tensor = Tensor::from_fn(&shape, |_| f32_value(&mut rng, -1e3, 1e3));
        rmvt::write(p("t.rmvt"), &tensor).unwrap();
        assert_eq!(rmvt::read(p("t.rmvt")).unwrap(), tensor);

        let labels: Vec<i32> = (0..w * h).map(|_| rng.random_range(-1..300)).collect();
        let map = ClusterMap::new(w, h, labels).unwrap();
        pgm::write(p("m.pgm"), &map).unwrap();
        assert_eq!(pgm::read(p("m.pgm")).unwrap(), map);

        let cfg = DcwConfig {
            k_clusters: rng.random_range(1..20),
            epsilon: rng.random_range(0.0..0.5),
            seed: rng.random(),
            ..DcwConfig::default()
        };
        std::fs::write(p("c.toml"), config::to_text(&cfg)).unwrap();
        assert_eq!(config::read(p("c.toml")).unwrap(), cfg);
    }
}

/// Every strict prefix of a fixture is rejected with an in-range offset.
#[test]
fn truncations_are_rejected() {
    type Parser = fn(&[u8]) -> Result<(), Error>;
    let cases: [(&str, Parser); 6] = [
        ("depth_be.pfm", |d| pfm::parse(d).map(drop)),
        ("binary_doubles.ply", |d| ply::parse(d).map(drop)),
        ("identity_cam.txt", |d| cam::parse(d).map(drop)),
        ("small.rmvt", |d| rmvt::parse(d).map(drop)),
        ("clusters_8bit.pgm", |d| pgm::parse(d).map(drop)),
        ("tiny.ppm", |d| ppm::parse(d).map(drop)),
    ];
    for (name, parse) in cases {
        let data = fixture(name);
        assert!(parse(&data).is_ok(), "{name}");
        // A cam.txt prefix ending inside the depth line can be a valid file
        // ("425 2" is a depth_min and an interval), so stop before it.
        let end = if name.ends_with(".txt") {
            data.windows(6).position(|w| w == b"425 2.").unwrap() + 4
        } else {
            data.len()
        };
        for n in 0..end {
            match parse(&data[..n]) {
                Err(Error::Parse { offset, .. }) => {
                    assert!(offset <= n, "{name}[..{n}]: offset {offset}")
                }
                Err(Error::Validation(_)) if name.ends_with(".txt") => {}
                other => panic!("{name}[..{n}]: {other:?}"),
            }
        }
    }
}

#[test]
fn errors_name_positions() {
    let mut bad = fixture("binary_doubles.ply");
    bad.truncate(bad.len() - 3);
    match ply::parse(&bad) {
        Err(Error::Parse { offset, .. }) => assert!(offset > 100),
        other => panic!("{other:?}"),
    }
    let text = String::from_utf8(fixture("normals_colors.ply"))
        .unwrap()
        .replace("1 0 0 0 0 1", "1 0 zero 0 0 1");
    match ply::parse(text.as_bytes()) {
        Err(Error::Parse { offset, .. }) => assert_eq!(&text[offset..offset + 4], "zero"),
        other => panic!("{other:?}"),
    }
    match config::parse(b"k_clusters = 8\nepsilon = [1]\n") {
        Err(Error::Parse { offset, .. }) => assert!((15..=30).contains(&offset), "{offset}"),
        other => panic!("{other:?}"),
    }
}
