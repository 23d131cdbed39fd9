//! Finite-difference checks of every differentiable path, on seeded inputs.

use std::fmt::Write;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dcw::{
    adaptive_threshold, cross_view_covariance_on_tape, dcw_loss_on_tape, record_dcw,
    selection_mask, variance_matrix, DcwConfig, DcwLayout, PairFeatures,
};
use crate::geometry::bilinear_taps;
use crate::synthetic;
use crate::tensor::{finite_diff_check, ColumnMix, GradCheckReport, Tensor};
use crate::whitening::{instance_standardize, whitening_loss_on_tape};
use crate::Result;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

pub struct GradCheckCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn matrix(t: &Tensor) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

/// Whitening loss, bilinear sampling, one-direction cross-view covariance,
/// the DCW loss, and the whole DCW term with respect to reference and
/// source features of a 2-view 8x16x16 scene.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    // Standardized features pulled off unit variance so no diagonal entry of
    // the covariance sits on the |x - 1| kink.
    let raw = crate::geometry::FeatureMap::new(
        8,
        8,
        8,
        (0..512).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let std = instance_standardize(&raw).features;
    let f = Tensor::from_fn(&[8, 64], |i| {
        std.values()[i] * (0.7 + 0.07 * (i / 64) as f64)
    });
    cases.push(GradCheckCase {
        name: "whitening_loss",
        report: finite_diff_check(whitening_loss_on_tape, &f, STEP, TOLERANCE),
    });

    let (w, h) = (6, 5);
    let mut mix = ColumnMix::new(w * h);
    for _ in 0..20 {
        let (u, v) = (
            rng.random_range(0.0..(w - 1) as f64),
            rng.random_range(0.0..(h - 1) as f64),
        );
        mix.push_column(&bilinear_taps(w, h, u, v).expect("inside the image"));
    }
    let mix = Rc::new(mix);
    let weights = random(&[4, 20], &mut rng);
    let feat = random(&[4, w * h], &mut rng);
    cases.push(GradCheckCase {
        name: "bilinear_sample",
        report: finite_diff_check(
            |tape, x| {
                x.mix_columns(mix.clone())?
                    .mul(tape.constant(weights.clone()))
                    .map(|v| v.sum_all())
            },
            &feat,
            STEP,
            TOLERANCE,
        ),
    });

    let views = synthetic::two_view_scene(seed, 8, 16, 16);
    let cfg = DcwConfig {
        k_clusters: 2,
        num_layers: 1,
        seed,
        ..DcwConfig::default()
    };
    let layout = DcwLayout::new(&views, &[(16, 16)], &cfg)?;
    let fr = views[0].features[0].to_matrix_tensor();
    let fs = views[1].features[0].to_matrix_tensor();
    let cw = random(&[8, 8], &mut rng);
    let warp = layout.warps(0, 1).0.clone();
    cases.push(GradCheckCase {
        name: "cross_view_covariance",
        report: finite_diff_check(
            |tape, x| {
                let src = tape.constant(fs.clone());
                let mut total = tape.constant(Tensor::scalar(0.0));
                for k in 0..2 {
                    let (gram, _) = cross_view_covariance_on_tape(
                        tape,
                        src,
                        x,
                        layout.layer_clusters(0, 1),
                        layout.layer_clusters(0, 0),
                        &warp,
                        k,
                        true,
                    )?;
                    if let Some(g) = gram {
                        total = total.add(g.mul(tape.constant(cw.clone()))?.sum_all())?;
                    }
                }
                Ok(total)
            },
            &fr,
            STEP,
            TOLERANCE,
        ),
    });

    let a = random(&[8, 8], &mut rng);
    let b = random(&[8, 8], &mut rng);
    let v = variance_matrix(&matrix(&a), &matrix(&b))?;
    let mask = selection_mask(&v, adaptive_threshold(&v)?);
    cases.push(GradCheckCase {
        name: "dcw_loss",
        report: finite_diff_check(
            |tape, x| {
                let other = tape.constant(b.clone());
                dcw_loss_on_tape(tape, x, other, &mask, cfg.epsilon)
            },
            &a,
            STEP,
            TOLERANCE,
        ),
    });

    for (name, vary_ref) in [
        ("dcw_pipeline_reference", true),
        ("dcw_pipeline_source", false),
    ] {
        let (x, fixed) = if vary_ref { (&fr, &fs) } else { (&fs, &fr) };
        cases.push(GradCheckCase {
            name,
            report: finite_diff_check(
                |tape, x| {
                    let c = tape.constant(fixed.clone());
                    let (r, s) = if vary_ref { (x, c) } else { (c, x) };
                    let pairs = [PairFeatures {
                        reference: vec![r],
                        source: vec![s],
                        reference_alt: None,
                        source_alt: None,
                    }];
                    Ok(record_dcw(tape, &layout, &pairs, &cfg)?.weighted)
                },
                x,
                STEP,
                TOLERANCE,
            ),
        });
    }
    Ok(cases)
}

/// One line per case; stable across runs for a fixed seed.
pub fn format_report(cases: &[GradCheckCase]) -> String {
    let mut s = String::new();
    for c in cases {
        let status = if c.report.pass { "PASS" } else { "FAIL" };
        let _ = write!(
            s,
            "{status} {:<24} max_rel_err={:.6e} worst_index={}",
            c.name, c.report.max_rel_err, c.report.worst_index
        );
        if let Some(e) = &c.report.error {
            let _ = write!(s, " error={e}");
        }
        s.push('\n');
    }
    s
}
