//! `mvsdcw`: DCW loss evaluation, depth clustering, fusion and reconstruction
//! scoring from the command line.
//!
//! Exit codes: 0 success, 1 bad arguments or input, 2 numerical failure,
//! 3 gradient check failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mvs_dcw::clustering::{cluster_views, ViewRef};
use mvs_dcw::dcw::{
    compute_dcw_pipeline, overall_loss, smooth_huber_depth_loss, StoredFeatures,
    DEFAULT_HUBER_DELTA,
};
use mvs_dcw::eval3d::{
    dtu_scores, fuse_depthmaps, mmd_rbf, precision_recall_fscore, sample_mesh, Bandwidth,
    FusionParams, Metric, ScoreReport, DEFAULT_DTU_MAX_DIST,
};
use mvs_dcw::io::{atomic_write, cam, config, pfm, pgm, ply, rmvt, scene};
use mvs_dcw::{gradcheck, Error};

#[derive(Parser)]
#[command(
    name = "mvsdcw",
    version,
    about = "Depth-clustering-guided whitening and MVS evaluation tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Precision, recall and F-score only.
    Tt,
    /// Also report DTU accuracy, completeness and overall.
    Dtu,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlyEncoding {
    Ascii,
    Binary,
}

impl From<PlyEncoding> for ply::Encoding {
    fn from(e: PlyEncoding) -> Self {
        match e {
            PlyEncoding::Ascii => ply::Encoding::Ascii,
            PlyEncoding::Binary => ply::Encoding::BinaryLittleEndian,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Score a reconstruction against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        /// Distance threshold d, in the units of the clouds. Required.
        #[arg(long)]
        threshold: f64,
        /// NOTE: the default is `euclidean`, i.e. a point counts when its
        /// nearest-neighbour distance is < d. `squared` compares the squared
        /// distance against d instead, which is the literal reading of the
        /// squared-norm formulas but not what the standard benchmark tools do.
        #[arg(long, default_value = "euclidean", verbatim_doc_comment)]
        metric: Metric,
        #[arg(long, value_enum, default_value = "tt")]
        mode: Mode,
        /// Distance cap for DTU accuracy and completeness.
        #[arg(long, default_value_t = DEFAULT_DTU_MAX_DIST)]
        max_dist: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fuse reference and source depth maps, cluster with K-Means and write
    /// one 16-bit PGM per view (stored value = cluster + 1, 0 = none) plus the
    /// centroids as CSV.
    Cluster {
        #[arg(long)]
        ref_depth: PathBuf,
        #[arg(long)]
        ref_cam: PathBuf,
        /// Repeat once per source view, paired in order with --src-cam.
        #[arg(long)]
        src_depth: Vec<PathBuf>,
        #[arg(long)]
        src_cam: Vec<PathBuf>,
        #[arg(short, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes `<prefix>_view<i>.pgm` and `<prefix>_centroids.csv`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Evaluate the DCW loss on a scene directory and write the per-term table.
    ///
    /// Scene layout: cams/<id>_cam.txt, depths/<id>.pfm,
    /// feats_layer<l>/<id>.rmvt (C x H x W) for l = 1..layers, and optionally
    /// images/<id>.rmvt or images/<id>.ppm. Ids are 8-digit view numbers;
    /// the first is the reference view.
    #[command(verbatim_doc_comment)]
    Dcw {
        /// Flat TOML config; missing keys take the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Predicted reference depth; adds the smooth-L1 depth loss and the
        /// overall loss to the totals.
        #[arg(long)]
        pred_depth: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_HUBER_DELTA)]
        huber_delta: f64,
    },
    /// Fuse the depth maps of a scene directory into a point cloud.
    Fuse {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = FusionParams::default().min_views)]
        min_views: usize,
        #[arg(long, default_value_t = FusionParams::default().px_thresh)]
        px_thresh: f64,
        #[arg(long, default_value_t = FusionParams::default().depth_thresh)]
        depth_thresh: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        encoding: PlyEncoding,
    },
    /// Sample points uniformly by area from a triangle mesh.
    SampleMesh {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        encoding: PlyEncoding,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Unbiased RBF-kernel MMD^2 between two sample sets (rank-2 RMVT,
    /// one sample per row).
    Mmd {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        /// `auto` (median heuristic) or a positive number.
        #[arg(long, default_value = "auto")]
        bandwidth: Bandwidth,
    },
}

enum Failure {
    Lib(Error),
    Usage(String),
    GradCheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = Result<(), Failure>;

fn in_file(path: &Path, e: Error) -> Failure {
    match e {
        Error::Io(io) => Failure::Usage(format!("{}: {io}", path.display())),
        Error::Numerical(_) => Failure::Lib(e),
        other => Failure::Usage(format!("{}: {other}", path.display())),
    }
}

fn load<'a, T>(
    path: &'a Path,
    f: impl FnOnce(&'a Path) -> mvs_dcw::Result<T>,
) -> Result<T, Failure> {
    f(path).map_err(|e| in_file(path, e))
}

fn report_text(r: &ScoreReport) -> String {
    let mut rows = vec![
        ("threshold", r.threshold),
        ("precision", r.precision),
        ("recall", r.recall),
        ("fscore", r.fscore),
        ("d_g2r", r.d_g2r),
        ("d_r2g", r.d_r2g),
    ];
    if let Some(d) = &r.dtu {
        rows.extend([("acc", d.acc), ("comp", d.comp), ("overall", d.overall)]);
    }
    let mut s = format!("{:<10} {}\n", "metric", r.metric);
    for (name, v) in rows {
        let _ = writeln!(s, "{name:<10} {v:.6}");
    }
    s
}

fn eval(
    gt: &Path,
    recon: &Path,
    threshold: f64,
    metric: Metric,
    mode: Mode,
    max_dist: f64,
    json: Option<&Path>,
) -> CliResult {
    let g = load(gt, |p| ply::read(p)?.into_cloud())?;
    let r = load(recon, |p| ply::read(p)?.into_cloud())?;
    let mut report = precision_recall_fscore(&g, &r, threshold, metric)?;
    if let Mode::Dtu = mode {
        report.dtu = Some(dtu_scores(&g, &r, max_dist)?);
    }
    if let Some(path) = json {
        let mut bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
        bytes.push(b'\n');
        atomic_write(path, &bytes)?;
    }
    print!("{}", report_text(&report));
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cluster(
    ref_depth: &Path,
    ref_cam: &Path,
    src_depth: &[PathBuf],
    src_cam: &[PathBuf],
    k: usize,
    seed: u64,
    out_prefix: &Path,
) -> CliResult {
    if src_depth.len() != src_cam.len() {
        return Err(Failure::Usage(format!(
            "{} --src-depth but {} --src-cam arguments",
            src_depth.len(),
            src_cam.len()
        )));
    }
    let mut depths = vec![load(ref_depth, pfm::read)?];
    let mut cams = vec![load(ref_cam, cam::read)?.camera];
    for (d, c) in src_depth.iter().zip(src_cam) {
        depths.push(load(d, pfm::read)?);
        cams.push(load(c, cam::read)?.camera);
    }
    let views: Vec<ViewRef<'_>> = depths
        .iter()
        .zip(&cams)
        .map(|(depth, camera)| ViewRef { depth, camera })
        .collect();
    let (maps, centroids) = cluster_views(&views, k, seed)?;
    for (i, m) in maps.iter().enumerate() {
        pgm::write(with_suffix(out_prefix, &format!("_view{i}.pgm")), m)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cluster", "x", "y", "z"])
        .expect("in-memory csv");
    for (i, c) in centroids.iter().enumerate() {
        w.write_record([
            i.to_string(),
            c[0].to_string(),
            c[1].to_string(),
            c[2].to_string(),
        ])
        .expect("in-memory csv");
    }
    atomic_write(
        with_suffix(out_prefix, "_centroids.csv"),
        &w.into_inner().expect("in-memory csv"),
    )?;
    println!("{} views, {} clusters", maps.len(), centroids.len());
    Ok(())
}

fn dcw(
    config_path: Option<&Path>,
    scene_dir: &Path,
    out: &Path,
    pred_depth: Option<&Path>,
    huber_delta: f64,
) -> CliResult {
    let cfg = match config_path {
        Some(p) => load(p, config::read)?,
        None => Default::default(),
    };
    let views = scene::load_scene(scene_dir, cfg.num_layers).map_err(|e| in_file(scene_dir, e))?;
    let outcome = compute_dcw_pipeline(&views, &StoredFeatures, &cfg)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "n",
        "l",
        "k",
        "direction_count",
        "valid_count",
        "loss",
        "valid_r2s",
        "valid_s2r",
        "tau",
        "selected",
    ])
    .expect("in-memory csv");
    for t in &outcome.terms {
        w.write_record([
            t.pair.to_string(),
            t.layer.to_string(),
            t.cluster.to_string(),
            t.direction_count().to_string(),
            (t.valid_r2s + t.valid_s2r).to_string(),
            t.loss.to_string(),
            t.valid_r2s.to_string(),
            t.valid_s2r.to_string(),
            t.tau.map_or_else(String::new, |v| v.to_string()),
            t.selected.to_string(),
        ])
        .expect("in-memory csv");
    }
    atomic_write(out, &w.into_inner().expect("in-memory csv"))?;

    println!("terms {}", outcome.terms.len());
    println!("dcw_sum {}", outcome.sum);
    println!("dcw_weighted {}", outcome.weighted);
    if let Some(p) = pred_depth {
        let pred = load(p, pfm::read)?;
        let depth_loss = smooth_huber_depth_loss(&pred, &views[0].depth, huber_delta)?;
        let losses: Vec<f64> = outcome.terms.iter().map(|t| t.loss).collect();
        let total = overall_loss(depth_loss, &losses, views.len() - 1, &cfg)?;
        println!("depth_loss {depth_loss}");
        println!("overall {total}");
    }
    Ok(())
}

fn fuse(scene_dir: &Path, params: FusionParams, out: &Path, encoding: PlyEncoding) -> CliResult {
    let views = scene::load_scene(scene_dir, 0).map_err(|e| in_file(scene_dir, e))?;
    let refs: Vec<ViewRef<'_>> = views
        .iter()
        .map(|v| ViewRef {
            depth: &v.depth,
            camera: &v.camera,
        })
        .collect();
    let cloud = fuse_depthmaps(&refs, &params)?;
    ply::write_cloud(out, &cloud, encoding.into())?;
    println!("{} points", cloud.len());
    Ok(())
}

fn sample(mesh: &Path, n: usize, seed: u64, out: &Path, encoding: PlyEncoding) -> CliResult {
    let mesh = load(mesh, |p| ply::read(p)?.into_mesh())?;
    let cloud = sample_mesh(&mesh, n, seed)?;
    ply::write_cloud(out, &cloud, encoding.into())?;
    println!("{} points", cloud.len());
    Ok(())
}

fn samples(path: &Path) -> Result<nalgebra::DMatrix<f64>, Failure> {
    let t = load(path, rmvt::read)?;
    match t.shape() {
        &[rows, cols] => Ok(nalgebra::DMatrix::from_row_slice(rows, cols, t.data())),
        s => Err(Failure::Usage(format!(
            "{}: expected a rank-2 tensor, got shape {s:?}",
            path.display()
        ))),
    }
}

fn mmd(x: &Path, y: &Path, bandwidth: Bandwidth) -> CliResult {
    let value = mmd_rbf(&samples(x)?, &samples(y)?, bandwidth)?;
    println!("{value}");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Eval {
            gt,
            recon,
            threshold,
            metric,
            mode,
            max_dist,
            json,
        } => eval(
            &gt,
            &recon,
            threshold,
            metric,
            mode,
            max_dist,
            json.as_deref(),
        ),
        Command::Cluster {
            ref_depth,
            ref_cam,
            src_depth,
            src_cam,
            k,
            seed,
            out_prefix,
        } => cluster(
            &ref_depth,
            &ref_cam,
            &src_depth,
            &src_cam,
            k,
            seed,
            &out_prefix,
        ),
        Command::Dcw {
            config,
            scene,
            out,
            pred_depth,
            huber_delta,
        } => dcw(
            config.as_deref(),
            &scene,
            &out,
            pred_depth.as_deref(),
            huber_delta,
        ),
        Command::Fuse {
            scene,
            min_views,
            px_thresh,
            depth_thresh,
            out,
            encoding,
        } => fuse(
            &scene,
            FusionParams {
                px_thresh,
                depth_thresh,
                min_views,
            },
            &out,
            encoding,
        ),
        Command::SampleMesh {
            mesh,
            n,
            seed,
            out,
            encoding,
        } => sample(&mesh, n, seed, &out, encoding),
        Command::Gradcheck { seed } => {
            let cases = gradcheck::run_suite(seed)?;
            print!("{}", gradcheck::format_report(&cases));
            if cases.iter().all(|c| c.report.pass) {
                Ok(())
            } else {
                Err(Failure::GradCheck)
            }
        }
        Command::Mmd { x, y, bandwidth } => mmd(&x, &y, bandwidth),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::GradCheck) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(3)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Numerical(_)) {
                2
            } else {
                1
            })
        }
    }
}
