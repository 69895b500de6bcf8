use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use burstsr::config::{apply_override, format_config, parse_config};
use burstsr::io::{
    read_bsr, read_fixture, read_motions, read_netpbm, write_bsr, write_fixture, write_motions,
    write_netpbm, Fixture,
};
use burstsr::metrics::{evaluate, EvalReport};
use burstsr::motion::format_records;
use burstsr::registration::{coarse_align_burst, FrameAlignment, LkOptions, MotionModel};
use burstsr::solver::{coarse_to_fine_run, hqs_run, HqsOutput};
use burstsr::synth::{
    dead_leaves, srgb_to_linear, synthesize, Downsample, NoiseModel, SynthConfig, SynthMotion,
};
use burstsr::{AffineMotion, HqsConfig, Observation, PlanarImage};

use crate::args::{AlignArgs, BenchArgs, EvalArgs, LkArgs, SolverArgs, SrArgs, SynthArgs};
use crate::error::{CliError, CliResult};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Synthesis parameters stored with a fixture, if any.
fn fixture_meta(fixture: &Fixture) -> CliResult<Option<SynthConfig>> {
    Ok(fixture.config.as_deref().map(str::parse).transpose()?)
}

fn lk_options(args: &LkArgs) -> CliResult<LkOptions> {
    let opts = LkOptions {
        motion_model: args.model.parse::<MotionModel>()?,
        pyramid_levels: args.levels,
        max_iters_per_level: args.max_iters,
        ..LkOptions::default()
    };
    opts.validate()?;
    Ok(opts)
}

/// Defaults follow the fixture (frame kind and, when recorded, scale);
/// then the config file and the overrides apply.
fn solver_config(fixture: &Fixture, args: &SolverArgs) -> CliResult<HqsConfig> {
    let meta = fixture_meta(fixture)?;
    let mut cfg = HqsConfig {
        mosaic: fixture.frames[0].is_raw(),
        scale: meta.map_or(2, |m| m.scale),
        ..HqsConfig::default()
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg = parse_config(&text, cfg)?;
    }
    for o in &args.overrides {
        apply_override(&mut cfg, o)?;
    }
    if args.no_refine {
        cfg.refine_motion = false;
    }
    cfg.validate()?;
    if cfg.mosaic != fixture.frames[0].is_raw() {
        return Err(usage(format!(
            "mode={} does not match the fixture's {} frames",
            if cfg.mosaic { "raw" } else { "rgb" },
            if fixture.frames[0].is_raw() {
                "raw"
            } else {
                "full-color"
            }
        )));
    }
    if let Some(m) = meta {
        if m.scale != cfg.scale {
            return Err(usage(format!(
                "scale {} disagrees with the fixture's scale {}",
                cfg.scale, m.scale
            )));
        }
    }
    Ok(cfg)
}

fn load_fixture(dir: &Path) -> CliResult<Fixture> {
    Ok(read_fixture(dir)?)
}

fn read_image(path: &Path) -> CliResult<PlanarImage> {
    let is_bsr = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("bsr"));
    Ok(if is_bsr {
        read_bsr(path)?
    } else {
        read_netpbm(path)?.0
    })
}

pub fn synth(args: &SynthArgs, seed: u64) -> CliResult<()> {
    let hr = match &args.hr {
        Some(path) => {
            let (img, white) = read_netpbm(path)?;
            if img.channels() != 3 {
                return Err(usage(format!("{} is not an RGB image", path.display())));
            }
            let unit = img.map(|v| v / white);
            if args.linear {
                unit
            } else {
                srgb_to_linear(&unit)
            }
        }
        None => dead_leaves(args.size, args.size, seed, args.shapes),
    };
    let motion_model = match args.motion.as_str() {
        "euclidean" => SynthMotion::Euclidean,
        "affine" => SynthMotion::Affine,
        other => return Err(usage(format!("unknown motion model {other:?}"))),
    };
    let cfg = SynthConfig {
        k: args.k,
        motion_model,
        max_translation: args.max_translation,
        max_rotation: args.max_rotation,
        max_affine_perturb: args.max_affine,
        scale: args.scale,
        mosaic: !args.rgb,
        downsample: if args.bilinear_downsample {
            Downsample::Bilinear
        } else {
            Downsample::BlockMean
        },
        noise: NoiseModel {
            shot_gain: args.shot_gain,
            read_variance: args.read_variance,
            enabled: !args.no_noise,
        },
        white_level: 1.0,
        seed,
    };
    let burst = synthesize(&hr, &cfg)?;
    write_fixture(&args.out, &burst)?;
    let f = &burst.frames[0];
    println!(
        "{} {} frames of {}x{} at scale {} from a {}x{} scene in {}",
        cfg.k,
        if cfg.mosaic { "raw" } else { "rgb" },
        f.width(),
        f.height(),
        cfg.scale,
        hr.width(),
        hr.height(),
        args.out.display()
    );
    Ok(())
}

fn print_alignment(
    alignments: &[FrameAlignment],
    truth: Option<&[AffineMotion]>,
    lr: (usize, usize),
) {
    println!("frame\tresidual_rms\titers\tgeom_px\tstatus");
    for (k, a) in alignments.iter().enumerate() {
        let geom = truth.map_or("NA".to_string(), |t| {
            burstsr::registration::geometric_error(&a.motion, &t[k], lr.0, lr.1).to_string()
        });
        let status = a.failure.as_deref().unwrap_or("ok");
        println!(
            "{k}\t{}\t{}\t{geom}\t{status}",
            a.residual_rms, a.iterations
        );
    }
}

pub fn align(args: &AlignArgs) -> CliResult<()> {
    let fixture = load_fixture(&args.fixture)?;
    let alignments = coarse_align_burst(&fixture.frames, &lk_options(&args.lk)?)?;
    let motions: Vec<AffineMotion> = alignments.iter().map(|a| a.motion).collect();
    match &args.out {
        Some(path) => {
            write_motions(path, &motions)?;
            let lr = (fixture.frames[0].width(), fixture.frames[0].height());
            print_alignment(&alignments, fixture.motions.as_deref(), lr);
        }
        None => print!("{}", format_records(&motions)),
    }
    Ok(())
}

/// Initial motions and which frames take part in the solve.
fn initial_motions(args: &SrArgs, fixture: &Fixture) -> CliResult<(Vec<AffineMotion>, Vec<bool>)> {
    let k = fixture.frames.len();
    let given = if args.use_gt_motions {
        Some(
            fixture
                .motions
                .clone()
                .ok_or_else(|| usage("the fixture has no ground-truth motions"))?,
        )
    } else if let Some(path) = &args.motions {
        Some(read_motions(path)?)
    } else {
        None
    };
    match given {
        Some(m) if m.len() != k => Err(usage(format!("{} motions for {k} frames", m.len()))),
        Some(m) => Ok((m, vec![true; k])),
        None => {
            let alignments = coarse_align_burst(&fixture.frames, &lk_options(&args.lk)?)?;
            for (i, a) in alignments.iter().enumerate() {
                if let Some(msg) = &a.failure {
                    eprintln!("frame {i} left out: {msg}");
                }
            }
            Ok((
                alignments.iter().map(|a| a.motion).collect(),
                alignments.iter().map(FrameAlignment::ok).collect(),
            ))
        }
    }
}

fn solve(
    frames: &[Observation],
    p0: &[AffineMotion],
    cfg: &HqsConfig,
    chain: &[usize],
    truth: Option<&[AffineMotion]>,
) -> CliResult<HqsOutput> {
    if chain.is_empty() {
        return Ok(hqs_run(frames, p0, cfg, truth)?);
    }
    if chain.iter().product::<usize>() != cfg.scale {
        return Err(usage(format!(
            "chain {chain:?} does not multiply to scale {}",
            cfg.scale
        )));
    }
    let stages: Vec<HqsConfig> = chain
        .iter()
        .map(|&s| HqsConfig { scale: s, ..*cfg })
        .collect();
    Ok(coarse_to_fine_run(frames, p0, &stages, truth)?)
}

pub fn sr(args: &SrArgs) -> CliResult<()> {
    let fixture = load_fixture(&args.fixture)?;
    let cfg = solver_config(&fixture, &args.solver)?;
    let (p0, active) = initial_motions(args, &fixture)?;
    let keep: Vec<usize> = (0..active.len()).filter(|&k| active[k]).collect();
    let frames: Vec<Observation> = keep.iter().map(|&k| fixture.frames[k].clone()).collect();
    let p_active: Vec<AffineMotion> = keep.iter().map(|&k| p0[k]).collect();
    let truth: Option<Vec<AffineMotion>> = fixture
        .motions
        .as_ref()
        .filter(|m| m.len() == active.len())
        .map(|m| keep.iter().map(|&k| m[k]).collect());
    let out = solve(&frames, &p_active, &cfg, &args.chain, truth.as_deref())?;

    let mut motions = p0;
    for (i, &k) in keep.iter().enumerate() {
        motions[k] = out.motions[i];
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    write_netpbm(&args.out.join("result.ppm"), &out.x, fixture.white)?;
    write_bsr(&args.out.join("result.bsr"), &out.x)?;
    write_motions(&args.out.join("motions.json-lines"), &motions)?;
    let trace_path = args.out.join("trace.tsv");
    fs::write(&trace_path, out.trace.to_tsv()).map_err(|e| CliError::io(&trace_path, e))?;
    let cfg_path = args.out.join("config.txt");
    fs::write(&cfg_path, format_config(&cfg)).map_err(|e| CliError::io(&cfg_path, e))?;

    println!(
        "{}x{} result from {} of {} frames in {}",
        out.x.width(),
        out.x.height(),
        keep.len(),
        active.len(),
        args.out.display()
    );
    if let Some(hr) = &fixture.hr {
        let lr = (fixture.frames[0].width(), fixture.frames[0].height());
        let pairs = fixture
            .motions
            .as_deref()
            .map(|gt| (motions.as_slice(), gt));
        println!("{}", evaluate(&out.x, hr, cfg.scale, pairs, lr)?.to_line());
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let fixture = args.fixture.as_deref().map(load_fixture).transpose()?;
    let truth = match (&args.truth, &fixture) {
        (Some(path), _) => read_image(path)?,
        (None, Some(f)) => {
            f.hr.clone()
                .ok_or_else(|| usage("the fixture has no hr.ppm"))?
        }
        (None, None) => return Err(usage("--truth or --fixture is required")),
    };
    let meta = fixture.as_ref().map(fixture_meta).transpose()?.flatten();
    let scale = args
        .scale
        .or(meta.map(|m| m.scale))
        .ok_or_else(|| usage("--scale is required without fixture metadata"))?;
    let estimate = read_image(&args.estimate)?;
    let gt = match (&args.gt_motions, &fixture) {
        (Some(path), _) => Some(read_motions(path)?),
        (None, Some(f)) => f.motions.clone(),
        (None, None) => None,
    };
    let est = args.motions.as_deref().map(read_motions).transpose()?;
    let pairs = match (&est, &gt) {
        (Some(e), Some(g)) => Some((e.as_slice(), g.as_slice())),
        _ => None,
    };
    if scale == 0 || truth.width() % scale != 0 || truth.height() % scale != 0 {
        return Err(usage(format!(
            "scale {scale} does not divide the {}x{} truth",
            truth.width(),
            truth.height()
        )));
    }
    let lr = (truth.width() / scale, truth.height() / scale);
    let report: EvalReport = evaluate(&estimate, &truth, scale, pairs, lr)?;
    println!(
        "{}",
        if args.json {
            report.to_json()
        } else {
            report.to_line()
        }
    );
    Ok(())
}

pub fn bench(args: &BenchArgs, seed: u64) -> CliResult<()> {
    let fixture = match &args.fixture {
        Some(dir) => load_fixture(dir)?,
        None => {
            let cfg = SynthConfig {
                k: args.k,
                scale: 4,
                seed,
                ..SynthConfig::default()
            };
            let b = synthesize(&dead_leaves(128, 128, seed, 300), &cfg)?;
            Fixture {
                frames: b.frames,
                white: 1.0,
                hr: Some(b.hr),
                motions: Some(b.motions),
                noise: cfg.noise.params(),
                config: Some(cfg.to_kv()),
            }
        }
    };
    let mut cfg = solver_config(&fixture, &args.solver)?;
    cfg.iters = args.iters;

    let clock = Instant::now();
    let lk = LkOptions {
        pyramid_levels: 2,
        ..LkOptions::default()
    };
    let p0: Vec<AffineMotion> = coarse_align_burst(&fixture.frames, &lk)?
        .iter()
        .map(|a| a.motion)
        .collect();
    let align_time = clock.elapsed();
    let clock = Instant::now();
    let out = hqs_run(&fixture.frames, &p0, &cfg, None)?;
    let solve_time = clock.elapsed();

    let sum = |f: fn(&burstsr::solver::PhaseTimes) -> Duration| -> f64 {
        out.trace
            .records
            .iter()
            .map(|r| f(&r.timing).as_secs_f64())
            .sum()
    };
    let z = sum(|t| t.z_step);
    let refine = sum(|t| t.refine);
    let prox = sum(|t| t.prox);
    let other = sum(|t| t.bookkeeping);
    let total = (z + refine + prox + other).max(f64::MIN_POSITIVE);
    let iters = cfg.iters.max(1) as f64;
    let x = &out.x;
    println!("frames\t{}", fixture.frames.len());
    println!("hr\t{}x{}x{}", x.width(), x.height(), x.channels());
    println!("iters\t{}", cfg.iters);
    println!("align_s\t{:.6}", align_time.as_secs_f64());
    println!("solve_s\t{:.6}", solve_time.as_secs_f64());
    println!("per_iter_ms\t{:.4}", 1e3 * solve_time.as_secs_f64() / iters);
    println!("z_step_ms_per_iter\t{:.4}", 1e3 * z / iters);
    println!("z_step_pct\t{:.2}", 100.0 * z / total);
    println!("refine_pct\t{:.2}", 100.0 * refine / total);
    println!("prox_pct\t{:.2}", 100.0 * prox / total);
    println!("other_pct\t{:.2}", 100.0 * other / total);
    Ok(())
}
