//! Half-quadratic splitting for burst super-resolution.
//!
//! The energy is
//!
//! ```text
//! ½ Σ_k ‖M_k (U_k z − y_k)‖² + (μ/2) ‖z − x‖² + λ TV(x)
//! ```
//!
//! and each outer iteration takes one gradient step in `z`, optionally one
//! Gauss-Newton step per frame motion, then the TV proximal step in `x`,
//! with `μ` growing geometrically.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{DegradeConfig, FrameOperator, Observation};
use crate::image::{resize_bilinear, PlanarImage};
use crate::motion::AffineMotion;
use crate::registration::{geometric_error, gn_refine, DEFAULT_REFINE_DAMPING};
use crate::tv::{prox_tv, tv_value};

/// Iterations of the power method used by [`estimate_step_size`].
pub const POWER_ITERATIONS: usize = 20;

/// Power steps after a motion update, restarted from the previous
/// eigenvector, which small motion changes barely move.
pub const WARM_POWER_ITERATIONS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    /// `1 / L` with `L` estimated by power iteration whenever motions change.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HqsConfig {
    pub scale: usize,
    /// Raw (mosaicked) observations rather than full-color ones.
    pub mosaic: bool,
    pub iters: usize,
    pub mu0: f64,
    pub rho: f64,
    pub lambda: f64,
    pub tv_inner_iters: usize,
    pub refine_motion: bool,
    pub refine_damping: f64,
    pub eta: StepSize,
}

impl Default for HqsConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            mosaic: true,
            iters: 40,
            mu0: 0.05,
            rho: 1.1,
            lambda: 0.002,
            tv_inner_iters: 30,
            refine_motion: true,
            refine_damping: DEFAULT_REFINE_DAMPING,
            eta: StepSize::Auto,
        }
    }
}

impl HqsConfig {
    pub fn raw(scale: usize) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }

    pub fn rgb(scale: usize) -> Self {
        Self {
            scale,
            mosaic: false,
            ..Self::default()
        }
    }

    /// `μ_t = μ_0 ρ^t`.
    pub fn mu(&self, t: usize) -> f64 {
        self.mu0 * self.rho.powi(t as i32)
    }

    pub fn degrade(&self) -> DegradeConfig {
        if self.mosaic {
            DegradeConfig::raw(self.scale)
        } else {
            DegradeConfig::rgb(self.scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.scale == 0 {
            return bad("scale must be at least 1");
        }
        if !(self.mu0 > 0.0) || !self.mu0.is_finite() {
            return bad("mu0 must be positive");
        }
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return bad("rho must be at least 1");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be non-negative");
        }
        if !(self.refine_damping >= 0.0) {
            return bad("refine damping must be non-negative");
        }
        if let StepSize::Fixed(eta) = self.eta {
            if !(eta > 0.0) || !eta.is_finite() {
                return bad("eta must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub x: PlanarImage,
    pub z: PlanarImage,
    pub p: Vec<AffineMotion>,
    /// Frames that take part in the data term.
    pub active: Vec<bool>,
    pub t: usize,
}

/// Diagnostics for one outer iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationRecord {
    pub mu: f64,
    pub step: f64,
    /// Data plus coupling energy at fixed `x`, `p`, `μ`, around the z step.
    pub energy_before_z: f64,
    pub energy_after_z: f64,
    /// `½ Σ ‖M(U z − y)‖²` at the end of the iteration.
    pub data: f64,
    /// `(μ/2) ‖z − x‖²` at the end of the iteration.
    pub coupling: f64,
    pub tv: f64,
    /// Masked SSD before and after each frame's refinement step.
    pub refine_ssd: Vec<(f64, f64)>,
    pub geom_errors: Option<Vec<f64>>,
    pub timing: PhaseTimes,
}

/// Wall time of one outer iteration, split by phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    /// Step size estimation and the z step.
    pub z_step: Duration,
    /// Motion refinement and operator rebuilds.
    pub refine: Duration,
    pub prox: Duration,
    /// Energies and diagnostics recorded in the trace.
    pub bookkeeping: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.z_step + self.refine + self.prox + self.bookkeeping
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolverTrace {
    pub records: Vec<IterationRecord>,
}

impl SolverTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One tab-separated line per iteration.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("iter\tmu\tstep\tdata\tcoupling\ttv\tgeom_px\n");
        for (t, r) in self.records.iter().enumerate() {
            let geom = match &r.geom_errors {
                Some(g) if !g.is_empty() => {
                    format!("{:.6e}", g.iter().sum::<f64>() / g.len() as f64)
                }
                _ => "NA".to_string(),
            };
            out.push_str(&format!(
                "{t}\t{:.6e}\t{:.6e}\t{:.9e}\t{:.9e}\t{:.9e}\t{geom}\n",
                r.mu, r.step, r.data, r.coupling, r.tv
            ));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct HqsOutput {
    pub x: PlanarImage,
    pub z: PlanarImage,
    pub motions: Vec<AffineMotion>,
    pub trace: SolverTrace,
}

fn check_burst(burst: &[Observation], p: &[AffineMotion], cfg: &HqsConfig) -> Result<()> {
    let Some(first) = burst.first() else {
        return Err(Error::EmptyBurst);
    };
    if p.len() != burst.len() {
        return Err(Error::dims(format!(
            "{} motions for {} frames",
            p.len(),
            burst.len()
        )));
    }
    for f in burst {
        if (f.width(), f.height(), f.is_raw()) != (first.width(), first.height(), first.is_raw()) {
            return Err(Error::dims("burst frames differ in size or kind"));
        }
    }
    if first.is_raw() != cfg.mosaic {
        return Err(Error::Config(if cfg.mosaic {
            "configured for raw frames but the burst is full-color".into()
        } else {
            "configured for full-color frames but the burst is raw".into()
        }));
    }
    Ok(())
}

/// HR size and channel count for a burst at `scale`.
fn hr_shape(burst: &[Observation], scale: usize) -> (usize, usize, usize) {
    let first = &burst[0];
    let channels = match first {
        Observation::Raw(_) => 3,
        Observation::Rgb(img) => img.channels(),
    };
    (first.width() * scale, first.height() * scale, channels)
}

/// `x⁰ = z⁰ =` the reference frame, demosaicked and bilinearly upsampled.
pub fn init_state(
    burst: &[Observation],
    p_init: &[AffineMotion],
    cfg: &HqsConfig,
) -> Result<SolverState> {
    cfg.validate()?;
    check_burst(burst, p_init, cfg)?;
    let (w, h, _) = hr_shape(burst, cfg.scale);
    let z = resize_bilinear(&burst[0].to_color(), w, h);
    Ok(SolverState {
        x: z.clone(),
        z,
        p: p_init.to_vec(),
        active: vec![true; burst.len()],
        t: 0,
    })
}

fn build_operators(state: &SolverState, cfg: &DegradeConfig) -> Result<Vec<FrameOperator>> {
    state
        .p
        .par_iter()
        .map(|p| FrameOperator::for_image(&state.z, p, cfg))
        .collect()
}

/// `Σ_k U_kᵀ M_k (U_k z − y_k)` and `½ Σ_k ‖M_k (U_k z − y_k)‖²`.
fn data_gradient(
    z: &PlanarImage,
    ops: &[FrameOperator],
    burst: &[Observation],
    active: &[bool],
) -> Result<(PlanarImage, f64)> {
    let parts: Vec<(PlanarImage, f64)> = (0..ops.len())
        .into_par_iter()
        .filter(|&k| active[k])
        .map(|k| {
            let (r, ssd) = ops[k].masked_residual(z, burst[k].data())?;
            Ok((ops[k].adjoint_flat(&r, None)?, ssd))
        })
        .collect::<Result<_>>()?;
    let mut grad = PlanarImage::zeros(z.width(), z.height(), z.channels());
    let mut ssd = 0.0;
    // fixed summation order keeps the result independent of thread count
    for (g, s) in &parts {
        for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        ssd += s;
    }
    Ok((grad, 0.5 * ssd))
}

fn data_term(
    z: &PlanarImage,
    ops: &[FrameOperator],
    burst: &[Observation],
    active: &[bool],
) -> Result<f64> {
    let ssd: Vec<f64> = (0..ops.len())
        .into_par_iter()
        .filter(|&k| active[k])
        .map(|k| ops[k].masked_residual(z, burst[k].data()).map(|(_, s)| s))
        .collect::<Result<_>>()?;
    Ok(0.5 * ssd.iter().sum::<f64>())
}

fn sq_dist(a: &PlanarImage, b: &PlanarImage) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// `1 / (λ_max(Σ_k U_kᵀ M_k U_k) + μ)`, with the largest eigenvalue taken
/// from [`POWER_ITERATIONS`] steps of the power method started at the
/// all-ones image.
pub fn estimate_step_size(
    p: &[AffineMotion],
    cfg: &DegradeConfig,
    dims: (usize, usize, usize),
    mu: f64,
) -> Result<f64> {
    let ops = p
        .iter()
        .map(|m| FrameOperator::new(dims.0, dims.1, dims.2, m, cfg))
        .collect::<Result<Vec<_>>>()?;
    let active = vec![true; ops.len()];
    let (lambda, _) = largest_eigenvalue(&ops, &active, dims, None, POWER_ITERATIONS)?;
    Ok(1.0 / (lambda + mu))
}

/// Largest eigenvalue of `Σ_k U_kᵀ M_k U_k` by `iters` power steps from
/// `start` (the all-ones image when `None`); also returns the final iterate
/// for warm starts.
fn largest_eigenvalue(
    ops: &[FrameOperator],
    active: &[bool],
    dims: (usize, usize, usize),
    start: Option<&PlanarImage>,
    iters: usize,
) -> Result<(f64, PlanarImage)> {
    let mut v = match start {
        Some(v) => v.clone(),
        None => PlanarImage::filled(dims.0, dims.1, dims.2, 1.0),
    };
    let mut lambda = 0.0;
    for _ in 0..iters {
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok((0.0, v));
        }
        let unit = v.map(|x| x / norm);
        let parts: Vec<PlanarImage> = (0..ops.len())
            .into_par_iter()
            .filter(|&k| active[k])
            .map(|k| ops[k].adjoint_flat(&ops[k].apply_flat(&unit)?, None))
            .collect::<Result<_>>()?;
        let mut next = PlanarImage::zeros(dims.0, dims.1, dims.2);
        for part in &parts {
            for (a, b) in next.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
        lambda = next
            .data()
            .iter()
            .zip(unit.data())
            .map(|(a, b)| a * b)
            .sum();
        v = next;
    }
    if !lambda.is_finite() {
        return Err(Error::NonFinite("power iteration"));
    }
    Ok((lambda, v))
}

/// Result of one z step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZStepInfo {
    pub step: f64,
    pub energy_before: f64,
    pub energy_after: f64,
}

/// One gradient step on `½ Σ ‖M(U z − y)‖² + (μ/2)‖z − x‖²`. `eta = None`
/// takes the automatic step.
pub fn z_step(
    state: &mut SolverState,
    burst: &[Observation],
    cfg: &HqsConfig,
    mu: f64,
    eta: Option<f64>,
) -> Result<ZStepInfo> {
    let degrade = cfg.degrade();
    let ops = build_operators(state, &degrade)?;
    z_step_with(state, &ops, burst, mu, eta)
}

fn z_step_with(
    state: &mut SolverState,
    ops: &[FrameOperator],
    burst: &[Observation],
    mu: f64,
    eta: Option<f64>,
) -> Result<ZStepInfo> {
    let dims = (state.z.width(), state.z.height(), state.z.channels());
    let step = match eta {
        Some(e) => e,
        None => {
            1.0 / (largest_eigenvalue(ops, &state.active, dims, None, POWER_ITERATIONS)?.0 + mu)
        }
    };
    let (mut grad, data) = data_gradient(&state.z, ops, burst, &state.active)?;
    let before = data + 0.5 * mu * sq_dist(&state.z, &state.x);
    for (g, (z, x)) in grad
        .data_mut()
        .iter_mut()
        .zip(state.z.data().iter().zip(state.x.data()))
    {
        *g += mu * (z - x);
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("z gradient"));
    }
    for (z, g) in state.z.data_mut().iter_mut().zip(grad.data()) {
        *z -= step * g;
    }
    let after =
        data_term(&state.z, ops, burst, &state.active)? + 0.5 * mu * sq_dist(&state.z, &state.x);
    Ok(ZStepInfo {
        step,
        energy_before: before,
        energy_after: after,
    })
}

/// Runs the solver from [`init_state`].
pub fn hqs_run(
    burst: &[Observation],
    p_init: &[AffineMotion],
    cfg: &HqsConfig,
    ground_truth: Option<&[AffineMotion]>,
) -> Result<HqsOutput> {
    let state = init_state(burst, p_init, cfg)?;
    hqs_run_from(state, burst, cfg, ground_truth)
}

/// Runs `cfg.iters` outer iterations from an explicit state. Inactive
/// frames are left out of the data term and their motions are not refined.
pub fn hqs_run_from(
    mut state: SolverState,
    burst: &[Observation],
    cfg: &HqsConfig,
    ground_truth: Option<&[AffineMotion]>,
) -> Result<HqsOutput> {
    cfg.validate()?;
    check_burst(burst, &state.p, cfg)?;
    let (w, h, c) = hr_shape(burst, cfg.scale);
    if (state.z.width(), state.z.height(), state.z.channels()) != (w, h, c)
        || !state.x.same_shape(&state.z)
    {
        return Err(Error::dims(
            "solver state does not match the burst and scale",
        ));
    }
    if state.active.len() != burst.len() {
        return Err(Error::dims("activity flags do not match the burst"));
    }
    if let Some(gt) = ground_truth {
        if gt.len() != burst.len() {
            return Err(Error::dims("ground-truth motions do not match the burst"));
        }
    }
    let degrade = cfg.degrade();
    let (lr_w, lr_h) = (burst[0].width(), burst[0].height());
    let dims = (w, h, c);
    let mut ops = build_operators(&state, &degrade)?;
    // largest eigenvalue of the data term and its eigenvector
    let mut spectrum: Option<(f64, PlanarImage)> = None;
    let mut stale = true;
    let mut trace = SolverTrace::default();

    for _ in 0..cfg.iters {
        let mut timing = PhaseTimes::default();
        let clock = Instant::now();
        let mu = cfg.mu(state.t);
        let eta = match cfg.eta {
            StepSize::Fixed(e) => e,
            StepSize::Auto => {
                if stale {
                    let (start, iters) = match &spectrum {
                        Some((_, v)) => (Some(v), WARM_POWER_ITERATIONS),
                        None => (None, POWER_ITERATIONS),
                    };
                    spectrum = Some(largest_eigenvalue(&ops, &state.active, dims, start, iters)?);
                    stale = false;
                }
                1.0 / (spectrum.as_ref().expect("computed above").0 + mu)
            }
        };
        let info = z_step_with(&mut state, &ops, burst, mu, Some(eta))?;
        timing.z_step = clock.elapsed();
        let clock = Instant::now();

        let mut refine_ssd = Vec::new();
        if cfg.refine_motion {
            let z = &state.z;
            let results: Vec<Option<(AffineMotion, f64, f64)>> = (0..burst.len())
                .into_par_iter()
                .map(|k| {
                    // frame 0 is the reference and stays put
                    if k == 0 || !state.active[k] {
                        return Ok(None);
                    }
                    match gn_refine(z, &burst[k], &state.p[k], &degrade, cfg.refine_damping) {
                        Ok(r) => Ok(Some((r.motion, r.mse_before, r.mse_after))),
                        Err(Error::Singular(_)) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<_>>()?;
            let mut changed = false;
            for (k, r) in results.into_iter().enumerate() {
                if let Some((m, before, after)) = r {
                    changed |= m != state.p[k];
                    state.p[k] = m;
                    refine_ssd.push((before, after));
                }
            }
            if changed {
                ops = build_operators(&state, &degrade)?;
                stale = true;
            }
        }

        timing.refine = clock.elapsed();
        let clock = Instant::now();
        state.x = prox_tv(&state.z, cfg.lambda / mu, cfg.tv_inner_iters);
        timing.prox = clock.elapsed();
        let clock = Instant::now();
        let data = data_term(&state.z, &ops, burst, &state.active)?;
        if !data.is_finite() || !state.x.is_finite() {
            return Err(Error::NonFinite("solver iterate"));
        }
        let geom_errors = ground_truth.map(|gt| {
            state
                .p
                .iter()
                .zip(gt)
                .map(|(p, q)| geometric_error(p, q, lr_w, lr_h))
                .collect()
        });
        let mut record = IterationRecord {
            mu,
            step: info.step,
            energy_before_z: info.energy_before,
            energy_after_z: info.energy_after,
            data,
            coupling: 0.5 * mu * sq_dist(&state.z, &state.x),
            tv: tv_value(&state.x),
            refine_ssd,
            geom_errors,
            timing,
        };
        record.timing.bookkeeping = clock.elapsed();
        trace.records.push(record);
        state.t += 1;
    }

    Ok(HqsOutput {
        x: state.x,
        z: state.z,
        motions: state.p,
        trace,
    })
}

/// Solves at a chain of increasing factors. Stage `i` works at the product
/// of the first `i + 1` stage scales and starts from the previous stage's
/// estimate, bilinearly upsampled; motions carry over unchanged since they
/// live in normalized coordinates.
pub fn coarse_to_fine_run(
    burst: &[Observation],
    p_init: &[AffineMotion],
    chain: &[HqsConfig],
    ground_truth: Option<&[AffineMotion]>,
) -> Result<HqsOutput> {
    let Some(first) = chain.first() else {
        return Err(Error::Config("coarse-to-fine chain is empty".into()));
    };
    if chain.iter().any(|c| c.mosaic != first.mosaic) {
        return Err(Error::Config(
            "coarse-to-fine stages disagree on raw mode".into(),
        ));
    }
    let mut total = 1;
    let mut motions = p_init.to_vec();
    let mut previous: Option<(PlanarImage, Vec<bool>)> = None;
    let mut out = None;
    for stage in chain {
        total *= stage.scale;
        let cfg = HqsConfig {
            scale: total,
            ..*stage
        };
        let mut state = init_state(burst, &motions, &cfg)?;
        if let Some((x, active)) = previous.take() {
            let z = resize_bilinear(&x, state.z.width(), state.z.height());
            state.x = z.clone();
            state.z = z;
            state.active = active;
        }
        let active = state.active.clone();
        let result = hqs_run_from(state, burst, &cfg, ground_truth)?;
        motions = result.motions.clone();
        previous = Some((result.x.clone(), active));
        out = Some(result);
    }
    Ok(out.expect("chain is non-empty"))
}

/// Catmull-Rom weights for taps at offsets −1, 0, 1, 2 from `floor(x)`.
fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Separable Catmull-Rom upsampling by an integer factor, pixel-center
/// aligned, with replicated borders.
pub fn upsample_bicubic(img: &PlanarImage, s: usize) -> PlanarImage {
    let (w, h) = (img.width(), img.height());
    let taps = |n: usize, out: usize| -> Vec<([usize; 4], [f64; 4])> {
        (0..out)
            .map(|i| {
                let x = (i as f64 + 0.5) / s as f64 - 0.5;
                let x0 = x.floor();
                let wts = catmull_rom(x - x0);
                let idx =
                    [-1.0, 0.0, 1.0, 2.0].map(|d| (x0 + d).clamp(0.0, (n - 1) as f64) as usize);
                (idx, wts)
            })
            .collect()
    };
    let tx = taps(w, w * s);
    let ty = taps(h, h * s);
    let mut rows = PlanarImage::zeros(w * s, h, img.channels());
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = rows.plane_mut(c);
        for v in 0..h {
            for (u, (idx, wts)) in tx.iter().enumerate() {
                dst[v * w * s + u] = (0..4).map(|j| wts[j] * src[v * w + idx[j]]).sum();
            }
        }
    }
    let mut out = PlanarImage::zeros(w * s, h * s, img.channels());
    for c in 0..img.channels() {
        let src = rows.plane(c);
        let dst = out.plane_mut(c);
        for (v, (idx, wts)) in ty.iter().enumerate() {
            for u in 0..w * s {
                dst[v * w * s + u] = (0..4).map(|j| wts[j] * src[idx[j] * w * s + u]).sum();
            }
        }
    }
    out
}

/// Single-frame baseline: demosaic, then Catmull-Rom upsampling by `s`.
pub fn baseline_bicubic(frame: &Observation, s: usize) -> PlanarImage {
    upsample_bicubic(&frame.to_color(), s)
}
