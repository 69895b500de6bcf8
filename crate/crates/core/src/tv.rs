//! Isotropic total variation and its proximal operator.
//!
//! Discretization: forward differences, Neumann boundary (the difference
//! across the last column or row is zero), channels independent.

use crate::image::PlanarImage;

/// Dual step of the fixed-point iteration; 1/8 is the largest step for
/// which convergence is guaranteed.
const DUAL_STEP: f64 = 0.125;

fn grad(x: &[f64], w: usize, h: usize, gx: &mut [f64], gy: &mut [f64]) {
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            gx[i] = if u + 1 < w { x[i + 1] - x[i] } else { 0.0 };
            gy[i] = if v + 1 < h { x[i + w] - x[i] } else { 0.0 };
        }
    }
}

/// `div = −∇ᵀ` for the forward-difference gradient above.
fn div(px: &[f64], py: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let mut d = 0.0;
            if u + 1 < w {
                d += px[i];
            }
            if u > 0 {
                d -= px[i - 1];
            }
            if v + 1 < h {
                d += py[i];
            }
            if v > 0 {
                d -= py[i - w];
            }
            out[i] = d;
        }
    }
}

/// Sum over pixels and channels of `|∇x|`.
pub fn tv_value(x: &PlanarImage) -> f64 {
    let (w, h) = (x.width(), x.height());
    let n = w * h;
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut total = 0.0;
    for c in 0..x.channels() {
        grad(x.plane(c), w, h, &mut gx, &mut gy);
        total += gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum::<f64>();
    }
    total
}

/// `argmin_x ½‖x − v‖² + tau·TV(x)` by Chambolle's dual fixed-point
/// iteration, run for `inner_iters` steps from a zero dual.
pub fn prox_tv(v: &PlanarImage, tau: f64, inner_iters: usize) -> PlanarImage {
    if tau <= 0.0 || inner_iters == 0 {
        return v.clone();
    }
    let (w, h) = (v.width(), v.height());
    let n = w * h;
    let mut out = v.clone();
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    for c in 0..v.channels() {
        let src = v.plane(c);
        px.fill(0.0);
        py.fill(0.0);
        for _ in 0..inner_iters {
            div(&px, &py, w, h, &mut d);
            for (di, si) in d.iter_mut().zip(src) {
                *di -= si / tau;
            }
            grad(&d, w, h, &mut gx, &mut gy);
            for i in 0..n {
                let norm = 1.0 + DUAL_STEP * (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
                px[i] = (px[i] + DUAL_STEP * gx[i]) / norm;
                py[i] = (py[i] + DUAL_STEP * gy[i]) / norm;
            }
        }
        div(&px, &py, w, h, &mut d);
        for (o, (si, di)) in out.plane_mut(c).iter_mut().zip(src.iter().zip(&d)) {
            *o = si - tau * di;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, c: usize, seed: u64) -> PlanarImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PlanarImage::from_fn(w, h, c, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let (w, h) = (7, 5);
        let x = random(w, h, 1, 1);
        let q = random(w, h, 2, 2);
        let mut gx = vec![0.0; w * h];
        let mut gy = vec![0.0; w * h];
        grad(x.data(), w, h, &mut gx, &mut gy);
        let mut d = vec![0.0; w * h];
        div(q.plane(0), q.plane(1), w, h, &mut d);
        let lhs: f64 = gx
            .iter()
            .zip(q.plane(0))
            .chain(gy.iter().zip(q.plane(1)))
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = -x.data().iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zero_tau_and_constants_are_fixed() {
        let v = random(6, 4, 3, 3);
        assert_eq!(prox_tv(&v, 0.0, 30), v);
        let c = PlanarImage::filled(6, 4, 3, 0.4);
        assert_eq!(prox_tv(&c, 0.5, 30), c);
    }

    #[test]
    fn tv_value_of_step_edge() {
        let img = PlanarImage::from_fn(4, 3, 1, |_, u, _| if u < 2 { 0.0 } else { 1.0 });
        assert_eq!(tv_value(&img), 3.0);
    }

    #[test]
    fn prox_reduces_tv_and_is_nonexpansive() {
        for seed in 0..10 {
            let a = random(9, 7, 1, seed);
            let b = random(9, 7, 1, seed + 100);
            let pa = prox_tv(&a, 0.1, 200);
            let pb = prox_tv(&b, 0.1, 200);
            assert!(tv_value(&pa) <= tv_value(&a));
            let d_in: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            let d_out: f64 = pa
                .data()
                .iter()
                .zip(pb.data())
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            assert!(d_out.sqrt() <= d_in.sqrt() + 1e-6);
        }
    }

    #[test]
    fn large_tau_flattens_to_mean() {
        let v = random(5, 5, 1, 9);
        let mean = v.data().iter().sum::<f64>() / 25.0;
        let x = prox_tv(&v, 100.0, 5000);
        for &xi in x.data() {
            assert!((xi - mean).abs() < 1e-3, "{xi} vs {mean}");
        }
    }
}
