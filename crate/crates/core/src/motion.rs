//! Region motion representation: heatmap moments, covariance/affine views,
//! the Cholesky factor that is stored canonically, and relative-motion
//! differencing/integration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

/// Diagonal floor applied to factor diagonals.
pub const DIAGONAL_EPS: f64 = 1e-5;
/// Ridge added to degenerate (point-mass) covariances before factorization.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
/// Tolerance on heatmap mass before it is rejected.
pub const HEATMAP_MASS_TOL: f64 = 1e-4;
pub const MOTION_FORMAT_VERSION: u32 = 1;

/// Nonnegative, unit-mass map over an `h x w` pixel grid. Pixel `(row, col)`
/// sits at `z = (col / (w - 1), row / (h - 1))` in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

fn grid_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        i as f64 / (n - 1) as f64
    }
}

impl Heatmap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || values.len() != h * w {
            return Err(Error::Validation(format!("heatmap needs {h}x{w} values, got {}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!("heatmap entry {v} is negative or non-finite")));
        }
        let mass: f64 = values.iter().sum();
        if (mass - 1.0).abs() > HEATMAP_MASS_TOL {
            return Err(Error::Validation(format!("heatmap mass {mass} is not 1")));
        }
        Ok(Self { h, w, values })
    }

    /// Softmax-normalizes raw logits into a heatmap.
    pub fn from_logits(h: usize, w: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != h * w {
            return Err(Error::Validation(format!("heatmap needs {h}x{w} logits, got {}", logits.len())));
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        Self::new(h, w, exps.into_iter().map(|v| v / s).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates `(z, mass)` over every pixel.
    pub fn points(&self) -> impl Iterator<Item = (Vec2, f64)> + '_ {
        self.values.iter().enumerate().map(move |(i, &v)| {
            let (r, c) = (i / self.w, i % self.w);
            ([grid_coord(c, self.w), grid_coord(r, self.h)], v)
        })
    }
}

/// First and second central moments of a heatmap: `(mu, C)`.
pub fn heatmap_moments(h: &Heatmap) -> (Vec2, Mat2) {
    let mut mu = [0.0; 2];
    for (z, v) in h.points() {
        mu[0] += v * z[0];
        mu[1] += v * z[1];
    }
    let mut c = [[0.0; 2]; 2];
    for (z, v) in h.points() {
        let d = [z[0] - mu[0], z[1] - mu[1]];
        c[0][0] += v * d[0] * d[0];
        c[0][1] += v * d[0] * d[1];
        c[1][1] += v * d[1] * d[1];
    }
    c[1][0] = c[0][1];
    (mu, c)
}

/// Adds `COVARIANCE_RIDGE * I` so point masses stay factorizable.
pub fn regularize_covariance(c: Mat2) -> Mat2 {
    [[c[0][0] + COVARIANCE_RIDGE, c[0][1]], [c[1][0], c[1][1] + COVARIANCE_RIDGE]]
}

fn check_symmetric(c: &Mat2) -> Result<()> {
    let scale = c[0][0].abs().max(c[1][1].abs()).max(1e-300);
    if !c.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::NotSpd(format!("non-finite entry in {c:?}")));
    }
    if (c[0][1] - c[1][0]).abs() > 1e-12 * scale.max(1.0) {
        return Err(Error::NotSpd(format!("asymmetric off-diagonal {} vs {}", c[0][1], c[1][0])));
    }
    Ok(())
}

/// Eigenvalues (descending) of a symmetric 2x2 matrix.
pub fn symmetric_eigenvalues(c: &Mat2) -> (f64, f64) {
    let (a, b, d) = (c[0][0], 0.5 * (c[0][1] + c[1][0]), c[1][1]);
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let hi = mean + r;
    if hi > 0.0 {
        // Product form avoids cancellation in the small eigenvalue.
        (hi, (a * d - b * b) / hi)
    } else {
        (hi, mean - r)
    }
}

/// True if the symmetric part of `c` is positive definite and `c` is symmetric
/// to working precision.
pub fn is_spd(c: &Mat2) -> bool {
    check_symmetric(c).is_ok() && symmetric_eigenvalues(c).1 > 0.0
}

fn canonical_sign(v: Vec2) -> Vec2 {
    let first = if v[0] != 0.0 { v[0] } else { v[1] };
    if first < 0.0 {
        [-v[0], -v[1]]
    } else {
        v
    }
}

/// Orthonormal eigenvectors (columns of `U`) and descending eigenvalues. Each
/// column's first nonzero entry is positive.
pub fn symmetric_eigen(c: &Mat2) -> (Mat2, Vec2) {
    let (l1, l2) = symmetric_eigenvalues(c);
    let (a, b, d) = (c[0][0], 0.5 * (c[0][1] + c[1][0]), c[1][1]);
    let u1 = if b == 0.0 {
        if a >= d {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        }
    } else {
        let p = [l1 - d, b];
        let q = [b, l1 - a];
        let (np, nq) = (p[0].hypot(p[1]), q[0].hypot(q[1]));
        if np >= nq {
            [p[0] / np, p[1] / np]
        } else {
            [q[0] / nq, q[1] / nq]
        }
    };
    let u1 = canonical_sign(u1);
    let u2 = canonical_sign([-u1[1], u1[0]]);
    ([[u1[0], u2[0]], [u1[1], u2[1]]], [l1, l2])
}

/// `A = U * Sigma^(1/2)` from the SVD of an SPD covariance, using the sign
/// convention of [`symmetric_eigen`].
pub fn affine_from_covariance(c: &Mat2) -> Result<Mat2> {
    check_symmetric(c)?;
    let (u, s) = symmetric_eigen(c);
    if s[1] <= 0.0 {
        return Err(Error::NotSpd(format!("eigenvalue {} <= 0", s[1])));
    }
    let (r1, r2) = (s[0].sqrt(), s[1].sqrt());
    Ok([[u[0][0] * r1, u[0][1] * r2], [u[1][0] * r1, u[1][1] * r2]])
}

/// Lower-triangular factor `L = [[l1, 0], [l2, l3]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CholeskyFactor {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl CholeskyFactor {
    pub const IDENTITY: CholeskyFactor = CholeskyFactor { l1: 1.0, l2: 0.0, l3: 1.0 };

    pub fn new(l1: f64, l2: f64, l3: f64) -> Self {
        Self { l1, l2, l3 }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self { l1: v[0], l2: v[1], l3: v[2] }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.l1, self.l2, self.l3]
    }

    pub fn matrix(self) -> Mat2 {
        [[self.l1, 0.0], [self.l2, self.l3]]
    }

    /// `C = L L^T`.
    pub fn covariance(self) -> Mat2 {
        let off = self.l1 * self.l2;
        [[self.l1 * self.l1, off], [off, self.l2 * self.l2 + self.l3 * self.l3]]
    }

    pub fn is_valid(self) -> bool {
        self.l1.is_finite() && self.l2.is_finite() && self.l3.is_finite() && self.l1 > 0.0 && self.l3 > 0.0
    }
}

/// Closed-form 2x2 Cholesky factorization.
pub fn cholesky_decompose(c: &Mat2) -> Result<CholeskyFactor> {
    check_symmetric(c)?;
    if c[0][0] <= 0.0 {
        return Err(Error::NotSpd(format!("c11 = {} <= 0", c[0][0])));
    }
    let l1 = c[0][0].sqrt();
    let l2 = c[1][0] / l1;
    let rem = c[1][1] - l2 * l2;
    if rem <= 0.0 {
        return Err(Error::NotSpd(format!("c22 - l2^2 = {rem} <= 0")));
    }
    Ok(CholeskyFactor { l1, l2, l3: rem.sqrt() })
}

/// `l1, l3 <- max(l, 0) + eps`; accepts arbitrary decoder output.
pub fn project_positive_diagonal(l: CholeskyFactor) -> CholeskyFactor {
    CholeskyFactor { l1: l.l1.max(0.0) + DIAGONAL_EPS, l2: l.l2, l3: l.l3.max(0.0) + DIAGONAL_EPS }
}

/// Projection applied after integration or residual composition: diagonals
/// already at or above `eps` pass through unchanged, smaller ones are
/// projected with [`project_positive_diagonal`]'s rule. Idempotent.
pub fn floor_positive_diagonal(l: CholeskyFactor) -> CholeskyFactor {
    let fix = |v: f64| if v >= DIAGONAL_EPS { v } else { v.max(0.0) + DIAGONAL_EPS };
    CholeskyFactor { l1: fix(l.l1), l2: l.l2, l3: fix(l.l3) }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMotionFrame {
    pub mu: Vec2,
    pub l: CholeskyFactor,
}

impl RegionMotionFrame {
    pub fn new(mu: Vec2, l: CholeskyFactor) -> Self {
        Self { mu, l }
    }

    /// Builds a frame from heatmap moments, regularizing degenerate covariance.
    pub fn from_heatmap(h: &Heatmap) -> Result<Self> {
        let (mu, c) = heatmap_moments(h);
        let l = cholesky_decompose(&regularize_covariance(c))?;
        Ok(Self { mu, l })
    }

    pub fn covariance(&self) -> Mat2 {
        self.l.covariance()
    }

    pub fn affine(&self) -> Result<Mat2> {
        affine_from_covariance(&self.covariance())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!("non-finite mu {:?}", self.mu)));
        }
        if !self.l.is_valid() {
            return Err(Error::Validation(format!("factor {:?} lacks a positive diagonal", self.l)));
        }
        let (_, lo) = symmetric_eigenvalues(&self.covariance());
        if lo <= 0.0 {
            return Err(Error::Validation(format!("covariance eigenvalue {lo} <= 0")));
        }
        Ok(())
    }

    /// The ten-value `[mu; C; A]` layout (row-major `C` and `A`).
    pub fn ten_value_layout(&self) -> Result<[f64; 10]> {
        let c = self.covariance();
        let a = self.affine()?;
        Ok([self.mu[0], self.mu[1], c[0][0], c[0][1], c[1][0], c[1][1], a[0][0], a[0][1], a[1][0], a[1][1]])
    }
}

/// `T` frames of `K` regions, stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    k: usize,
    fps: f64,
    frames: Vec<RegionMotionFrame>,
}

impl MotionSequence {
    pub fn new(k: usize, fps: f64, frames: Vec<RegionMotionFrame>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation("region count must be positive".into()));
        }
        if !frames.len().is_multiple_of(k) {
            return Err(Error::Validation(format!("{} region frames is not a multiple of K = {k}", frames.len())));
        }
        if !(fps > 0.0) {
            return Err(Error::Validation(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { k, fps, frames })
    }

    pub fn from_frames(fps: f64, frames: Vec<Vec<RegionMotionFrame>>) -> Result<Self> {
        let k = frames.first().map(|f| f.len()).unwrap_or(0);
        if frames.iter().any(|f| f.len() != k) {
            return Err(Error::Validation("frames disagree on region count".into()));
        }
        Self::new(k, fps, frames.into_iter().flatten().collect())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[RegionMotionFrame] {
        &self.frames[t * self.k..(t + 1) * self.k]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[RegionMotionFrame]> {
        self.frames.chunks(self.k)
    }

    pub fn region_frames(&self) -> &[RegionMotionFrame] {
        &self.frames
    }

    pub fn region_frames_mut(&mut self) -> &mut [RegionMotionFrame] {
        &mut self.frames
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            f.validate()
                .map_err(|e| Error::Validation(format!("frame {} region {}: {e}", i / self.k, i % self.k)))?;
        }
        Ok(())
    }

    /// Translates every `mu` by `v`.
    pub fn shifted(&self, v: Vec2) -> Self {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.mu[0] += v[0];
            f.mu[1] += v[1];
        }
        out
    }

    /// Frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Argument(format!("slice {start}..{} beyond {} frames", start + len, self.len())));
        }
        Self::new(self.k, self.fps, self.frames[start * self.k..(start + len) * self.k].to_vec())
    }

    /// Windows of `len` frames every `stride` frames.
    pub fn windows(&self, len: usize, stride: usize) -> Vec<Self> {
        if self.len() < len || stride == 0 {
            return Vec::new();
        }
        (0..=self.len() - len)
            .step_by(stride)
            .map(|s| self.slice(s, len).expect("window in range"))
            .collect()
    }

    /// Per-frame flattened `[mu (K x 2), L (K x 3)]` rows.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.frames()
            .map(|f| {
                let mut r = Vec::with_capacity(self.k * 5);
                f.iter().for_each(|x| r.extend_from_slice(&x.mu));
                f.iter().for_each(|x| r.extend_from_slice(&x.l.to_array()));
                r
            })
            .collect()
    }

    pub fn from_rows(k: usize, fps: f64, rows: &[Vec<f64>]) -> Result<Self> {
        let mut frames = Vec::with_capacity(rows.len() * k);
        for r in rows {
            if r.len() != 5 * k {
                return Err(Error::Shape(format!("row of {} values, expected {}", r.len(), 5 * k)));
            }
            for j in 0..k {
                frames.push(RegionMotionFrame {
                    mu: [r[2 * j], r[2 * j + 1]],
                    l: CholeskyFactor::new(r[2 * k + 3 * j], r[2 * k + 3 * j + 1], r[2 * k + 3 * j + 2]),
                });
            }
        }
        Self::new(k, fps, frames)
    }
}

/// Adjacent-frame differences of `mu` and of the factor entries.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeMotionSequence {
    k: usize,
    pub d_mu: Vec<Vec2>,
    pub d_l: Vec<[f64; 3]>,
}

impl RelativeMotionSequence {
    pub fn new(k: usize, d_mu: Vec<Vec2>, d_l: Vec<[f64; 3]>) -> Result<Self> {
        if k == 0 || d_mu.len() != d_l.len() || !d_mu.len().is_multiple_of(k) {
            return Err(Error::Shape(format!(
                "relative sequence with K = {k}: {} mu deltas vs {} L deltas",
                d_mu.len(),
                d_l.len()
            )));
        }
        Ok(Self { k, d_mu, d_l })
    }

    pub fn zeros(k: usize, steps: usize) -> Self {
        Self { k, d_mu: vec![[0.0; 2]; k * steps], d_l: vec![[0.0; 3]; k * steps] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of difference steps (`T - 1`).
    pub fn len(&self) -> usize {
        self.d_mu.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.d_mu.is_empty()
    }
}

pub fn to_relative(seq: &MotionSequence) -> Result<RelativeMotionSequence> {
    if seq.len() < 2 {
        return Err(Error::SequenceTooShort { needed: 2, got: seq.len() });
    }
    let k = seq.k();
    let n = (seq.len() - 1) * k;
    let mut d_mu = Vec::with_capacity(n);
    let mut d_l = Vec::with_capacity(n);
    for t in 1..seq.len() {
        for (cur, prev) in seq.frame(t).iter().zip(seq.frame(t - 1)) {
            d_mu.push([cur.mu[0] - prev.mu[0], cur.mu[1] - prev.mu[1]]);
            d_l.push([cur.l.l1 - prev.l.l1, cur.l.l2 - prev.l.l2, cur.l.l3 - prev.l.l3]);
        }
    }
    Ok(RelativeMotionSequence { k, d_mu, d_l })
}

/// Running sums of the deltas from `init`, with each integrated factor passed
/// through [`floor_positive_diagonal`].
pub fn integrate(init: &[RegionMotionFrame], rel: &RelativeMotionSequence, fps: f64) -> Result<MotionSequence> {
    let k = init.len();
    if k != rel.k() {
        return Err(Error::Shape(format!("init has {k} regions, deltas have {}", rel.k())));
    }
    let mut frames = Vec::with_capacity((rel.len() + 1) * k);
    let mut mu: Vec<Vec2> = init.iter().map(|f| f.mu).collect();
    let mut l: Vec<[f64; 3]> = init.iter().map(|f| f.l.to_array()).collect();
    frames.extend(init.iter().map(|f| RegionMotionFrame { mu: f.mu, l: floor_positive_diagonal(f.l) }));
    for t in 0..rel.len() {
        for j in 0..k {
            let dm = rel.d_mu[t * k + j];
            let dl = rel.d_l[t * k + j];
            mu[j][0] += dm[0];
            mu[j][1] += dm[1];
            for c in 0..3 {
                l[j][c] += dl[c];
            }
            frames.push(RegionMotionFrame { mu: mu[j], l: floor_positive_diagonal(CholeskyFactor::from_array(l[j])) });
        }
    }
    MotionSequence::new(k, fps, frames)
}

/// Serializes a sequence into the motion text format: a header line
/// `angie-motion version=1 K=.. fps=.. T=..` followed by one
/// `frame region mu_x mu_y l1 l2 l3` record per region frame.
pub fn motion_to_text(seq: &MotionSequence) -> String {
    let mut s = String::with_capacity(seq.region_frames().len() * 120 + 64);
    let _ = writeln!(
        s,
        "angie-motion version={MOTION_FORMAT_VERSION} K={} fps={} T={}",
        seq.k(),
        fmt_real(seq.fps()),
        seq.len()
    );
    for t in 0..seq.len() {
        for (j, f) in seq.frame(t).iter().enumerate() {
            let _ = writeln!(
                s,
                "{t} {j} {} {} {} {} {}",
                fmt_real(f.mu[0]),
                fmt_real(f.mu[1]),
                fmt_real(f.l.l1),
                fmt_real(f.l.l2),
                fmt_real(f.l.l3)
            );
        }
    }
    s
}

/// 17 significant digits: exact `f64` round trip.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn header_field<T: std::str::FromStr>(fields: &[&str], key: &str) -> Result<T> {
    let prefix = format!("{key}=");
    let raw = fields
        .iter()
        .find_map(|f| f.strip_prefix(&prefix))
        .ok_or_else(|| Error::Parse { line: 1, msg: format!("header lacks {key}") })?;
    raw.parse().map_err(|_| Error::Parse { line: 1, msg: format!("bad {key} value {raw:?}") })
}

pub fn motion_from_text(text: &str) -> Result<MotionSequence> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty motion file".into() })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&"angie-motion") {
        return Err(Error::Parse { line: 1, msg: "missing angie-motion header".into() });
    }
    let version: u32 = header_field(&fields, "version")?;
    if version != MOTION_FORMAT_VERSION {
        return Err(Error::Parse { line: 1, msg: format!("unsupported version {version}") });
    }
    let k: usize = header_field(&fields, "K")?;
    let fps: f64 = header_field(&fields, "fps")?;
    let t: usize = header_field(&fields, "T")?;
    let mut frames = vec![None; t * k];
    let mut count = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(Error::Parse { line: lineno, msg: format!("expected 7 fields, got {}", parts.len()) });
        }
        let fi: usize = parts[0].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad frame index".into() })?;
        let ri: usize = parts[1].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad region id".into() })?;
        if fi >= t || ri >= k {
            return Err(Error::Parse { line: lineno, msg: format!("record ({fi}, {ri}) outside T={t}, K={k}") });
        }
        let mut v = [0.0; 5];
        for (slot, p) in v.iter_mut().zip(&parts[2..]) {
            *slot = p.parse().map_err(|_| Error::Parse { line: lineno, msg: format!("bad real {p:?}") })?;
        }
        let slot = &mut frames[fi * k + ri];
        if slot.is_some() {
            return Err(Error::Parse { line: lineno, msg: format!("duplicate record ({fi}, {ri})") });
        }
        *slot = Some(RegionMotionFrame { mu: [v[0], v[1]], l: CholeskyFactor::new(v[2], v[3], v[4]) });
        count += 1;
    }
    if count != t * k {
        return Err(Error::Parse { line: 0, msg: format!("expected {} records, found {count}", t * k) });
    }
    MotionSequence::new(k, fps, frames.into_iter().map(|f| f.expect("counted")).collect())
}

pub fn write_motion_file(path: &Path, seq: &MotionSequence) -> Result<()> {
    std::fs::write(path, motion_to_text(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_motion_file(path: &Path) -> Result<MotionSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    motion_from_text(&text).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}
