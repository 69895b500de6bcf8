use burstsr::io::{read_fixture, write_fixture};
use burstsr::metrics::evaluate;
use burstsr::registration::geometric_error;
use burstsr::solver::{baseline_bicubic, coarse_to_fine_run, hqs_run};
use burstsr::synth::{dead_leaves, synthesize, NoiseModel, SynthBurst, SynthConfig};
use burstsr::{AffineMotion, HqsConfig, PlanarImage};

fn noiseless(side: usize, k: usize, scale: usize, mosaic: bool, seed: u64) -> SynthBurst {
    let cfg = SynthConfig {
        k,
        scale,
        mosaic,
        noise: NoiseModel::off(),
        seed,
        ..SynthConfig::default()
    };
    synthesize(&dead_leaves(side, side, 50 + seed, side * 2), &cfg).unwrap()
}

fn psnr(x: &PlanarImage, b: &SynthBurst) -> f64 {
    let lr = (b.frames[0].width(), b.frames[0].height());
    evaluate(x, &b.hr, b.config.scale, None, lr).unwrap().psnr
}

fn mean_geom(p: &[AffineMotion], b: &SynthBurst) -> f64 {
    let (w, h) = (b.frames[0].width(), b.frames[0].height());
    p.iter()
        .zip(&b.motions)
        .map(|(a, t)| geometric_error(a, t, w, h))
        .sum::<f64>()
        / p.len() as f64
}

#[test]
fn known_motion_beats_bicubic() {
    for seed in 0..3 {
        let b = noiseless(96, 8, 2, true, seed);
        let cfg = HqsConfig {
            refine_motion: false,
            lambda: 2e-4,
            ..HqsConfig::raw(2)
        };
        let out = hqs_run(&b.frames, &b.motions, &cfg, None).unwrap();
        let (sr, bic) = (
            psnr(&out.x, &b),
            psnr(&baseline_bicubic(&b.frames[0], 2), &b),
        );
        assert!(sr >= bic + 1.0, "seed {seed}: {sr:.2} vs bicubic {bic:.2}");
    }
}

#[test]
fn refinement_improves_perturbed_motions() {
    for seed in 0..3 {
        let b = noiseless(96, 8, 2, true, seed);
        let half = b.frames[0].width() as f64 / 2.0;
        let p0: Vec<AffineMotion> = b
            .motions
            .iter()
            .enumerate()
            .map(|(k, m)| {
                if k == 0 {
                    *m
                } else {
                    // 0.3 LR px along a frame-dependent direction
                    let a = k as f64;
                    AffineMotion::translation(0.3 * a.cos() / half, 0.3 * a.sin() / half).compose(m)
                }
            })
            .collect();
        let out = hqs_run(&b.frames, &p0, &HqsConfig::raw(2), Some(&b.motions)).unwrap();
        let (before, after) = (mean_geom(&p0, &b), mean_geom(&out.motions, &b));
        assert!(after < before, "seed {seed}: {after} vs {before}");
    }
}

#[test]
fn two_stage_chain_tracks_direct_run() {
    for seed in 0..2 {
        let b = noiseless(96, 8, 4, false, seed);
        let direct = hqs_run(&b.frames, &b.motions, &HqsConfig::rgb(4), None).unwrap();
        let chain =
            coarse_to_fine_run(&b.frames, &b.motions, &[HqsConfig::rgb(2); 2], None).unwrap();
        let (d, c) = (psnr(&direct.x, &b), psnr(&chain.x, &b));
        assert!(
            (d - c).abs() <= 1.0,
            "seed {seed}: direct {d:.2}, chain {c:.2}"
        );
    }
}

#[test]
fn fixture_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        k: 1,
        scale: 1,
        mosaic: false,
        noise: NoiseModel::off(),
        ..SynthConfig::default()
    };
    let b = synthesize(&dead_leaves(32, 32, 1, 30), &cfg).unwrap();
    write_fixture(dir.path(), &b).unwrap();
    let f = read_fixture(dir.path()).unwrap();
    assert_eq!(f.frames.len(), 1);
    let hr = f.hr.unwrap();
    let frame = f.frames[0].to_color();
    let report = evaluate(
        &frame,
        &hr,
        1,
        Some((&b.motions, &f.motions.unwrap())),
        (32, 32),
    )
    .unwrap();
    assert_eq!(report.psnr, f64::INFINITY);
    assert_eq!(report.ssim, 1.0);
    assert_eq!(report.geom_error_px, Some(0.0));
}
