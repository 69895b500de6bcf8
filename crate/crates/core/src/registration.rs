//! Motion estimation.
//!
//! Two Gauss-Newton solvers share the same machinery: [`lk_align`] registers
//! two grayscale frames of the same resolution (forward-additive
//! Lucas-Kanade, coarse to fine), and [`gn_refine`] takes one step on the
//! motion of a raw frame against the current high-resolution estimate,
//! through the full degradation operator.
//!
//! Both minimize `Σ |warp(reference, p)(u) − observed(u)|²` over valid
//! pixels, so the returned motion satisfies `observed ≈ U_p reference`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{DegradeConfig, FrameOperator, Jacobian, Observation};
use crate::image::{build_pyramid, to_grayscale, PlanarImage};
use crate::motion::{normalized_center, AffineMotion};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MotionModel {
    Translation,
    #[default]
    Euclidean,
    Affine,
}

impl MotionModel {
    pub fn dof(self) -> usize {
        match self {
            MotionModel::Translation => 2,
            MotionModel::Euclidean => 3,
            MotionModel::Affine => 6,
        }
    }
}

impl std::str::FromStr for MotionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "translation" => Ok(MotionModel::Translation),
            "euclidean" | "rigid" => Ok(MotionModel::Euclidean),
            "affine" => Ok(MotionModel::Affine),
            other => Err(Error::Config(format!("unknown motion model {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LkOptions {
    pub pyramid_levels: usize,
    pub max_iters_per_level: usize,
    /// Stop a level once `‖Δp‖` (normalized units) drops below this.
    pub step_tolerance: f64,
    /// Initial Levenberg factor, applied as `H + damping · diag(H)`.
    pub damping: f64,
    pub motion_model: MotionModel,
    /// Pixels this close to either image border are left out of the energy.
    pub border_margin: f64,
}

impl Default for LkOptions {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            max_iters_per_level: 50,
            step_tolerance: 1e-7,
            damping: 1e-4,
            motion_model: MotionModel::Euclidean,
            border_margin: 2.0,
        }
    }
}

impl LkOptions {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 || self.max_iters_per_level == 0 {
            return Err(Error::Config(
                "LK needs at least one level and one iteration".into(),
            ));
        }
        if !(self.damping >= 0.0) || !(self.step_tolerance >= 0.0) || !(self.border_margin >= 0.0) {
            return Err(Error::Config(
                "LK damping, tolerance and margin must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Motion parameters restricted to a model, with the map back to the full
/// six affine parameters.
#[derive(Clone, Copy, Debug)]
struct ModelState {
    model: MotionModel,
    /// Fixed linear part for the translation model.
    base: AffineMotion,
    q: [f64; 6],
}

impl ModelState {
    fn new(model: MotionModel, p0: &AffineMotion) -> Self {
        let p = p0.params();
        let q = match model {
            MotionModel::Translation => [p[4], p[5], 0.0, 0.0, 0.0, 0.0],
            MotionModel::Euclidean => [p0.rotation_angle(), p[4], p[5], 0.0, 0.0, 0.0],
            MotionModel::Affine => p,
        };
        Self {
            model,
            base: *p0,
            q,
        }
    }

    fn motion(&self) -> AffineMotion {
        let q = &self.q;
        match self.model {
            MotionModel::Translation => {
                let mut p = self.base.params();
                p[4] = q[0];
                p[5] = q[1];
                AffineMotion::from_params(p)
            }
            MotionModel::Euclidean => AffineMotion::euclidean(q[0], q[1], q[2]),
            MotionModel::Affine => AffineMotion::from_params(*q),
        }
    }

    /// `∂p/∂q`, a 6 × dof matrix.
    fn tangent(&self) -> DMatrix<f64> {
        let m = self.model.dof();
        let mut t = DMatrix::zeros(6, m);
        match self.model {
            MotionModel::Translation => {
                t[(4, 0)] = 1.0;
                t[(5, 1)] = 1.0;
            }
            MotionModel::Euclidean => {
                let (s, c) = self.q[0].sin_cos();
                t[(0, 0)] = -s;
                t[(1, 0)] = -c;
                t[(2, 0)] = c;
                t[(3, 0)] = -s;
                t[(4, 1)] = 1.0;
                t[(5, 2)] = 1.0;
            }
            MotionModel::Affine => t.fill_with_identity(),
        }
        t
    }

    fn stepped(&self, delta: &DVector<f64>) -> Self {
        let mut next = *self;
        for (i, d) in delta.iter().enumerate() {
            next.q[i] += d;
        }
        next
    }
}

/// Solves `(H + λ·diag(H)) Δ = −g` in the model's parameters.
fn damped_step(
    h6: &[[f64; 6]; 6],
    g6: &[f64; 6],
    tangent: &DMatrix<f64>,
    damping: f64,
) -> Result<DVector<f64>> {
    let h = DMatrix::from_fn(6, 6, |i, j| h6[i][j]);
    let g = DVector::from_column_slice(g6);
    let mut hq = tangent.transpose() * &h * tangent;
    let gq = tangent.transpose() * g;
    let max_diag = (0..hq.nrows()).map(|i| hq[(i, i)]).fold(0.0, f64::max);
    if !max_diag.is_finite() {
        return Err(Error::NonFinite("normal equations"));
    }
    if max_diag <= 0.0 || (0..hq.nrows()).any(|i| hq[(i, i)] <= 1e-14 * max_diag) {
        return Err(Error::Singular(
            "no image gradient along some motion parameter",
        ));
    }
    for i in 0..hq.nrows() {
        hq[(i, i)] *= 1.0 + damping;
    }
    let chol = hq.cholesky().ok_or(Error::Singular(
        "damped normal matrix is not positive definite",
    ))?;
    Ok(-chol.solve(&gq))
}

/// Operator warping a single-plane reference onto its own grid, with the
/// border margin removed from its mask.
fn lk_operator(reference: &PlanarImage, p: &AffineMotion, margin: f64) -> Result<FrameOperator> {
    let op = FrameOperator::for_image(reference, p, &DegradeConfig::rgb(1))?;
    Ok(op.restrict_to_interior(margin))
}

/// Mean squared masked residual and the residual itself.
fn evaluate(
    op: &FrameOperator,
    reference: &PlanarImage,
    observed: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let (r, ssd) = op.masked_residual(reference, observed)?;
    if !ssd.is_finite() {
        return Err(Error::NonFinite("residual"));
    }
    let n = op.mask().count_valid();
    if n == 0 {
        return Err(Error::Singular("no overlap between frames"));
    }
    Ok((r, ssd / n as f64))
}

/// Per-level trace of an alignment run.
#[derive(Clone, Debug, Default)]
pub struct LkReport {
    pub iterations: usize,
    /// Root-mean-square residual at the finest level, at the returned motion.
    pub residual_rms: f64,
}

/// Forward-additive Lucas-Kanade registration of two same-size grayscale
/// images: returns `p` with `moving ≈ warp_affine(template, p)`.
pub fn lk_align(
    template: &PlanarImage,
    moving: &PlanarImage,
    p0: &AffineMotion,
    opts: &LkOptions,
) -> Result<AffineMotion> {
    lk_align_report(template, moving, p0, opts).map(|(p, _)| p)
}

pub fn lk_align_report(
    template: &PlanarImage,
    moving: &PlanarImage,
    p0: &AffineMotion,
    opts: &LkOptions,
) -> Result<(AffineMotion, LkReport)> {
    opts.validate()?;
    if template.channels() != 1 || moving.channels() != 1 {
        return Err(Error::dims(
            "LK registration works on single-channel images",
        ));
    }
    if (template.width(), template.height()) != (moving.width(), moving.height()) {
        return Err(Error::dims("LK registration needs images of equal size"));
    }
    let tpl = build_pyramid(template, opts.pyramid_levels)?;
    let mov = build_pyramid(moving, opts.pyramid_levels)?;

    let mut state = ModelState::new(opts.motion_model, p0);
    let mut report = LkReport::default();
    for level in (0..opts.pyramid_levels).rev() {
        let t = &tpl.levels()[level];
        let m = mov.levels()[level].data();
        let mut damping = opts.damping;
        let mut op = lk_operator(t, &state.motion(), opts.border_margin)?;
        let (mut r, mut mse) = evaluate(&op, t, m)?;
        for _ in 0..opts.max_iters_per_level {
            report.iterations += 1;
            let jac = op.jacobian(t)?;
            let delta = damped_step(
                &jac.normal_matrix(),
                &jac.transpose_times(&r),
                &state.tangent(),
                damping,
            )?;
            let candidate = state.stepped(&delta);
            let accepted = match lk_operator(t, &candidate.motion(), opts.border_margin) {
                Ok(cop) => match evaluate(&cop, t, m) {
                    Ok((cr, cmse)) if cmse <= mse => Some((cop, cr, cmse)),
                    _ => None,
                },
                Err(Error::DegenerateWarp { .. }) => None,
                Err(e) => return Err(e),
            };
            match accepted {
                Some((cop, cr, cmse)) => {
                    state = candidate;
                    op = cop;
                    r = cr;
                    mse = cmse;
                    damping = (damping * 0.1).max(opts.damping);
                    if delta.norm() < opts.step_tolerance {
                        break;
                    }
                }
                None => {
                    damping = if damping > 0.0 { damping * 10.0 } else { 1e-6 };
                    if damping > 1e8 {
                        break;
                    }
                }
            }
        }
        report.residual_rms = mse.sqrt();
    }
    Ok((state.motion(), report))
}

/// Per-frame outcome of [`coarse_align_burst`].
#[derive(Clone, Debug)]
pub struct FrameAlignment {
    pub motion: AffineMotion,
    pub residual_rms: f64,
    pub iterations: usize,
    /// Set when registration failed; the frame should be left out of the solve.
    pub failure: Option<String>,
}

impl FrameAlignment {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Grayscale view used for coarse registration.
pub fn grayscale_of(obs: &Observation) -> Result<PlanarImage> {
    let color = obs.to_color();
    match color.channels() {
        1 => Ok(color),
        3 => to_grayscale(&color),
        c => Err(Error::dims(format!("cannot convert {c} channels to gray"))),
    }
}

/// Registers every frame of a burst to the first one.
pub fn coarse_align_burst(burst: &[Observation], opts: &LkOptions) -> Result<Vec<FrameAlignment>> {
    let Some(first) = burst.first() else {
        return Err(Error::EmptyBurst);
    };
    let reference = grayscale_of(first)?;
    let grays = burst.iter().map(grayscale_of).collect::<Result<Vec<_>>>()?;
    let mut out: Vec<FrameAlignment> = grays[1..]
        .par_iter()
        .map(
            |g| match lk_align_report(&reference, g, &AffineMotion::identity(), opts) {
                Ok((motion, report)) => FrameAlignment {
                    motion,
                    residual_rms: report.residual_rms,
                    iterations: report.iterations,
                    failure: None,
                },
                Err(e) => FrameAlignment {
                    motion: AffineMotion::identity(),
                    residual_rms: f64::NAN,
                    iterations: 0,
                    failure: Some(e.to_string()),
                },
            },
        )
        .collect();
    out.insert(
        0,
        FrameAlignment {
            motion: AffineMotion::identity(),
            residual_rms: 0.0,
            iterations: 0,
            failure: None,
        },
    );
    Ok(out)
}

/// Result of one refinement step.
#[derive(Clone, Copy, Debug)]
pub struct RefineStep {
    pub motion: AffineMotion,
    pub accepted: bool,
    /// Mean squared masked residual before and after (equal when rejected).
    pub mse_before: f64,
    pub mse_after: f64,
}

/// Default Levenberg factor for [`gn_refine`].
pub const DEFAULT_REFINE_DAMPING: f64 = 1e-4;

/// One damped Gauss-Newton step on the affine motion of frame `y` against
/// the HR estimate `z`. A step that raises the mean squared masked residual
/// is rejected and `p` is returned unchanged.
pub fn gn_refine(
    z: &PlanarImage,
    y: &Observation,
    p: &AffineMotion,
    cfg: &DegradeConfig,
    damping: f64,
) -> Result<RefineStep> {
    gn_refine_model(z, y, p, cfg, damping, MotionModel::Affine)
}

pub fn gn_refine_model(
    z: &PlanarImage,
    y: &Observation,
    p: &AffineMotion,
    cfg: &DegradeConfig,
    damping: f64,
    model: MotionModel,
) -> Result<RefineStep> {
    let op = FrameOperator::for_image(z, p, cfg)?;
    let (r, mse) = evaluate(&op, z, y.data())?;
    let jac: Jacobian = op.jacobian(z)?;
    let state = ModelState::new(model, p);
    let delta = damped_step(
        &jac.normal_matrix(),
        &jac.transpose_times(&r),
        &state.tangent(),
        damping,
    )?;
    let candidate = if model == MotionModel::Affine {
        // Additive update on the raw parameters keeps a zero step exact.
        let mut q = p.params();
        for (qi, d) in q.iter_mut().zip(delta.iter()) {
            *qi += d;
        }
        AffineMotion::from_params(q)
    } else {
        state.stepped(&delta).motion()
    };
    let rejected = RefineStep {
        motion: *p,
        accepted: false,
        mse_before: mse,
        mse_after: mse,
    };
    let cop = match FrameOperator::for_image(z, &candidate, cfg) {
        Ok(op) => op,
        Err(Error::DegenerateWarp { .. }) => return Ok(rejected),
        Err(e) => return Err(e),
    };
    match evaluate(&cop, z, y.data()) {
        Ok((_, after)) if after <= mse => Ok(RefineStep {
            motion: candidate,
            accepted: true,
            mse_before: mse,
            mse_after: after,
        }),
        Ok(_) | Err(Error::Singular(_)) => Ok(rejected),
        Err(e) => Err(e),
    }
}

/// Mean distance, in pixels of a `width × height` grid, between where two
/// motions send each pixel center.
pub fn geometric_error(
    p_est: &AffineMotion,
    p_true: &AffineMotion,
    width: usize,
    height: usize,
) -> f64 {
    let half = width.max(height) as f64 / 2.0;
    let mut total = 0.0;
    for v in 0..height {
        for u in 0..width {
            let n = normalized_center(u, v, width, height);
            let a = p_est.apply(n);
            let b = p_true.apply(n);
            total += (a[0] - b[0]).hypot(a[1] - b[1]);
        }
    }
    total * half / (width * height) as f64
}
