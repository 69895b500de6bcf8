//! Six-parameter affine motion in normalized image coordinates.
//!
//! Normalized coordinates put the origin at the image center and map the
//! longer side onto `[-1, 1]`, so a motion means the same thing at every
//! resolution of the same field of view. A motion maps a point `n` of the
//! observed frame to `A n + t` in the reference frame.

use std::fmt;

use crate::error::{Error, Result};

/// Warps with `det(A)` at or below this are rejected.
pub const MIN_DETERMINANT: f64 = 0.1;

/// Affine motion stored additively around the identity as
/// `[a11 - 1, a12, a21, a22 - 1, t1, t2]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AffineMotion {
    params: [f64; 6],
}

impl AffineMotion {
    pub const IDENTITY: AffineMotion = AffineMotion { params: [0.0; 6] };

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn from_params(params: [f64; 6]) -> Self {
        Self { params }
    }

    pub fn from_matrix(a: [[f64; 2]; 2], t: [f64; 2]) -> Self {
        Self {
            params: [a[0][0] - 1.0, a[0][1], a[1][0], a[1][1] - 1.0, t[0], t[1]],
        }
    }

    pub fn translation(t1: f64, t2: f64) -> Self {
        Self {
            params: [0.0, 0.0, 0.0, 0.0, t1, t2],
        }
    }

    /// Rotation by `theta` radians about the image center, then translation.
    pub fn euclidean(theta: f64, t1: f64, t2: f64) -> Self {
        if theta == 0.0 {
            return Self::translation(t1, t2);
        }
        let (s, c) = theta.sin_cos();
        Self::from_matrix([[c, -s], [s, c]], [t1, t2])
    }

    pub fn params(&self) -> [f64; 6] {
        self.params
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let p = &self.params;
        [[1.0 + p[0], p[1]], [p[2], 1.0 + p[3]]]
    }

    pub fn shift(&self) -> [f64; 2] {
        [self.params[4], self.params[5]]
    }

    pub fn det(&self) -> f64 {
        let a = self.matrix();
        a[0][0] * a[1][1] - a[0][1] * a[1][0]
    }

    pub fn is_identity(&self) -> bool {
        self.params == [0.0; 6]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        let det = self.det();
        if !self.is_finite() || !(det > MIN_DETERMINANT) {
            return Err(Error::DegenerateWarp { det });
        }
        Ok(())
    }

    /// Maps a normalized point.
    #[inline]
    pub fn apply(&self, n: [f64; 2]) -> [f64; 2] {
        let p = &self.params;
        [
            (1.0 + p[0]) * n[0] + p[1] * n[1] + p[4],
            p[2] * n[0] + (1.0 + p[3]) * n[1] + p[5],
        ]
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &AffineMotion) -> AffineMotion {
        // Work on the offsets from identity so composing with the identity
        // is exact: (I + P)(I + Q) = I + P + Q + PQ.
        let p = &self.params;
        let q = &inner.params;
        let pq = [
            p[0] * q[0] + p[1] * q[2],
            p[0] * q[1] + p[1] * q[3],
            p[2] * q[0] + p[3] * q[2],
            p[2] * q[1] + p[3] * q[3],
        ];
        let s = inner.shift();
        AffineMotion::from_params([
            p[0] + q[0] + pq[0],
            p[1] + q[1] + pq[1],
            p[2] + q[2] + pq[2],
            p[3] + q[3] + pq[3],
            s[0] + (p[0] * s[0] + p[1] * s[1]) + p[4],
            s[1] + (p[2] * s[0] + p[3] * s[1]) + p[5],
        ])
    }

    pub fn inverse(&self) -> Result<AffineMotion> {
        let det = self.det();
        if !det.is_finite() || det.abs() < f64::EPSILON {
            return Err(Error::DegenerateWarp { det });
        }
        let a = self.matrix();
        let inv = [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ];
        let t = self.shift();
        let shift = [
            -(inv[0][0] * t[0] + inv[0][1] * t[1]),
            -(inv[1][0] * t[0] + inv[1][1] * t[1]),
        ];
        Ok(AffineMotion::from_matrix(inv, shift))
    }

    /// Rotation angle of the closest similarity, in radians.
    pub fn rotation_angle(&self) -> f64 {
        let a = self.matrix();
        (a[1][0] - a[0][1]).atan2(a[0][0] + a[1][1])
    }

    /// The translation part expressed in pixels of a `width × height` grid.
    pub fn shift_pixels(&self, width: usize, height: usize) -> [f64; 2] {
        let half = width.max(height) as f64 / 2.0;
        [self.params[4] * half, self.params[5] * half]
    }

    /// One `[da11,da12,da21,da22,t1,t2]` record.
    pub fn to_record(&self) -> String {
        serde_json::to_string(&self.params).expect("finite floats serialize")
    }

    pub fn from_record(line: &str) -> Result<Self> {
        let values: Vec<f64> = serde_json::from_str(line.trim())
            .map_err(|e| Error::format("motion record", e.to_string()))?;
        let params: [f64; 6] = values.try_into().map_err(|v: Vec<f64>| {
            Error::format(
                "motion record",
                format!("expected 6 values, got {}", v.len()),
            )
        })?;
        Ok(Self { params })
    }
}

impl fmt::Display for AffineMotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_record())
    }
}

/// Normalized coordinate of the center of pixel `(u, v)` in a `width × height` grid.
#[inline]
pub fn normalized_center(u: usize, v: usize, width: usize, height: usize) -> [f64; 2] {
    let half = width.max(height) as f64 / 2.0;
    [
        (u as f64 + 0.5 - width as f64 / 2.0) / half,
        (v as f64 + 0.5 - height as f64 / 2.0) / half,
    ]
}

/// Parses a whole json-lines motion file (blank lines ignored).
pub fn parse_records(text: &str) -> Result<Vec<AffineMotion>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(AffineMotion::from_record)
        .collect()
}

pub fn format_records(motions: &[AffineMotion]) -> String {
    let mut out = String::new();
    for m in motions {
        out.push_str(&m.to_record());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &AffineMotion, b: &AffineMotion, tol: f64) -> bool {
        a.params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| (x - y).abs() <= tol)
    }

    fn motion() -> impl Strategy<Value = AffineMotion> {
        (
            -0.3..0.3f64,
            -0.3..0.3f64,
            -0.3..0.3f64,
            -0.3..0.3f64,
            -0.5..0.5f64,
            -0.5..0.5f64,
        )
            .prop_map(|(a, b, c, d, e, f)| AffineMotion::from_params([a, b, c, d, e, f]))
    }

    proptest! {
        #[test]
        fn group_laws(p in motion(), q in motion()) {
            let id = AffineMotion::identity();
            prop_assert!(close(&id.compose(&p), &p, 0.0));
            prop_assert!(close(&p.compose(&id), &p, 0.0));
            prop_assert!(close(&p.compose(&p.inverse().unwrap()), &id, 1e-10));
            prop_assert!(close(&p.inverse().unwrap().compose(&p), &id, 1e-10));
            // composition acts pointwise
            let n = [0.3, -0.7];
            let lhs = p.compose(&q).apply(n);
            let rhs = p.apply(q.apply(n));
            prop_assert!((lhs[0] - rhs[0]).abs() < 1e-12 && (lhs[1] - rhs[1]).abs() < 1e-12);
        }

        #[test]
        fn record_round_trip(p in motion()) {
            prop_assert_eq!(AffineMotion::from_record(&p.to_record()).unwrap(), p);
        }
    }

    #[test]
    fn degenerate_warps_rejected() {
        assert!(AffineMotion::identity().validate().is_ok());
        let squash = AffineMotion::from_matrix([[1.0, 0.0], [0.0, 0.05]], [0.0, 0.0]);
        assert!(squash.validate().is_err());
        let flip = AffineMotion::from_matrix([[-1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]);
        assert!(flip.validate().is_err());
        let nan = AffineMotion::from_params([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(nan.validate().is_err());
    }

    #[test]
    fn euclidean_angle_round_trip() {
        let m = AffineMotion::euclidean(0.03, 0.1, -0.2);
        assert!((m.rotation_angle() - 0.03).abs() < 1e-15);
        assert!((m.det() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalized_grid_spans_unit_interval() {
        let first = normalized_center(0, 0, 8, 4);
        let last = normalized_center(7, 3, 8, 4);
        assert_eq!(first, [-0.875, -0.375]);
        assert_eq!(last, [0.875, 0.375]);
    }

    #[test]
    fn record_parsing_errors() {
        assert!(AffineMotion::from_record("[1,2,3]").is_err());
        assert!(AffineMotion::from_record("nope").is_err());
        let text = "[0,0,0,0,0.5,0]\n\n[0,0,0,0,0,0]\n";
        let ms = parse_records(text).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(
            format_records(&ms),
            "[0.0,0.0,0.0,0.0,0.5,0.0]\n[0.0,0.0,0.0,0.0,0.0,0.0]\n"
        );
    }
}
