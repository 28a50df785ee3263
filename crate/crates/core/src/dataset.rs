//! Synthetic fracture-and-assembly dataset.
//!
//! Samples are built from analytic solid primitives: the whole surface is
//! point-sampled uniformly by area, partitioned into fragments by recursive
//! planar cuts (or by semantic part for composite shapes), and each fragment
//! is moved into its own randomly rotated, centroid-centered frame. The
//! ground-truth pose of a fragment maps its stored points back onto the
//! canonical whole surface exactly.
//!
//! A sample also carries signed-distance supervision (near-surface and
//! uniform query points with analytic values) and a binary orthographic
//! silhouette of the whole shape along a randomly chosen axis, which serves
//! as the conditioning image for generation.
//!
//! Datasets are persisted in a versioned, checksummed binary archive that
//! supports random access without materializing every sample.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::manifold::{sample_uniform_rotation, PoseState, Rotation};

/// Smallest fragment the pipeline accepts, in surface points.
pub const MIN_FRAGMENT_POINTS: usize = 16;

/// Coverage radius for the fragment/whole consistency invariant.
pub const COVERAGE_EPS: f64 = 0.02;

const ARCHIVE_MAGIC: &[u8; 4] = b"RFDS";
const ARCHIVE_VERSION: u32 = 1;

/// Errors produced by dataset generation and archive I/O.
#[derive(Debug, Error)]
pub enum DatasetError {
    /// No admissible planar cut was found within the retry budget, or the
    /// requested part count cannot be met at the given point budget.
    #[error("fracture failed: {0}")]
    FractureFailed(String),
    /// Masking the requested fraction would leave fewer than two fragments.
    #[error("cannot drop parts: only {remaining} fragment(s) would remain")]
    TooFewParts {
        /// Fragments that would remain observed after the drop.
        remaining: usize,
    },
    /// Invalid generation parameters.
    #[error("bad dataset config: {0}")]
    BadConfig(String),
    /// Archive failed validation (magic, version, checksum, or layout).
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    /// Underlying file I/O failure.
    #[error("archive i/o: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Primitive solids
// ---------------------------------------------------------------------------

/// Shape family a sample is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Composite shapes whose fragments are semantic parts (e.g. table legs).
    Parts,
    /// Single primitives fractured by recursive planar cuts.
    Fracture,
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parts" => Ok(Family::Parts),
            "fracture" => Ok(Family::Fracture),
            other => Err(format!("unknown family '{other}' (expected parts|fracture)")),
        }
    }
}

/// Primitive solid kinds available to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Axis-aligned box with randomized half-extents.
    Box,
    /// Sphere of radius 0.4.
    Sphere,
    /// Capped cylinder with randomized radius and height.
    Cylinder,
    /// Two-arm L bracket (union of two boxes), the only kind with a trivial
    /// symmetry group.
    LBracket,
    /// Table-like composite: a top slab on four legs (five semantic parts).
    Table,
}

impl ShapeKind {
    /// Stable identifier used as the sample category label.
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::LBracket => "l_bracket",
            ShapeKind::Table => "table",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name {
            "box" => Some(ShapeKind::Box),
            "sphere" => Some(ShapeKind::Sphere),
            "cylinder" => Some(ShapeKind::Cylinder),
            "l_bracket" => Some(ShapeKind::LBracket),
            "table" => Some(ShapeKind::Table),
            _ => None,
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeKind::from_name(s).ok_or_else(|| {
            format!("unknown shape kind '{s}' (expected box|sphere|cylinder|l_bracket|table)")
        })
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One convex building block of a shape; shapes are unions of these.
#[derive(Debug, Clone)]
enum Prim {
    Cuboid { center: Vector3<f64>, half: Vector3<f64> },
    Ball { radius: f64 },
    Tube { radius: f64, half_height: f64 },
}

impl Prim {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Prim::Cuboid { center, half } => {
                let q = Vector3::new(
                    (p.x - center.x).abs() - half.x,
                    (p.y - center.y).abs() - half.y,
                    (p.z - center.z).abs() - half.z,
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
                outside.norm() + q.x.max(q.y).max(q.z).min(0.0)
            }
            Prim::Ball { radius } => p.norm() - radius,
            Prim::Tube { radius, half_height } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dr.max(dz).min(0.0)
            }
        }
    }

    fn area(&self) -> f64 {
        match self {
            Prim::Cuboid { half, .. } => {
                8.0 * (half.x * half.y + half.y * half.z + half.z * half.x)
            }
            Prim::Ball { radius } => 4.0 * std::f64::consts::PI * radius * radius,
            Prim::Tube { radius, half_height } => {
                let side = 4.0 * std::f64::consts::PI * radius * half_height;
                let caps = 2.0 * std::f64::consts::PI * radius * radius;
                side + caps
            }
        }
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        match self {
            Prim::Cuboid { center, half } => {
                // Pick one of the six faces, weighted by its area.
                let areas = [
                    half.y * half.z, // +x / -x
                    half.y * half.z,
                    half.x * half.z, // +y / -y
                    half.x * half.z,
                    half.x * half.y, // +z / -z
                    half.x * half.y,
                ];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut face = 5;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let u = rng.gen::<f64>() * 2.0 - 1.0;
                let v = rng.gen::<f64>() * 2.0 - 1.0;
                let local = match face {
                    0 => Vector3::new(half.x, u * half.y, v * half.z),
                    1 => Vector3::new(-half.x, u * half.y, v * half.z),
                    2 => Vector3::new(u * half.x, half.y, v * half.z),
                    3 => Vector3::new(u * half.x, -half.y, v * half.z),
                    4 => Vector3::new(u * half.x, v * half.y, half.z),
                    _ => Vector3::new(u * half.x, v * half.y, -half.z),
                };
                center + local
            }
            Prim::Ball { radius } => {
                let mut v = Vector3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                while v.norm() < 1e-9 {
                    v = Vector3::new(
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    );
                }
                v.normalize() * *radius
            }
            Prim::Tube { radius, half_height } => {
                let side = 4.0 * std::f64::consts::PI * radius * half_height;
                let caps = 2.0 * std::f64::consts::PI * radius * radius;
                let theta = rng.gen::<f64>() * std::f64::consts::TAU;
                if rng.gen::<f64>() * (side + caps) < side {
                    let z = (rng.gen::<f64>() * 2.0 - 1.0) * half_height;
                    Vector3::new(radius * theta.cos(), radius * theta.sin(), z)
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if rng.gen::<f64>() < 0.5 { *half_height } else { -half_height };
                    Vector3::new(r * theta.cos(), r * theta.sin(), z)
                }
            }
        }
    }
}

/// An analytic solid: a union of primitives, normalized to fit inside the
/// unit cube `[-1, 1]^3` and centered at the origin.
#[derive(Debug, Clone)]
pub struct Shape {
    kind: ShapeKind,
    prims: Vec<Prim>,
}

impl Shape {
    /// Which primitive family this shape belongs to.
    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    /// Number of semantic parts (one per primitive).
    pub fn num_parts(&self) -> usize {
        self.prims.len()
    }

    /// Signed distance to the union surface (negative inside).
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.prims
            .iter()
            .map(|prim| prim.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Sum of primitive areas (an upper bound on the union's surface area).
    pub fn gross_area(&self) -> f64 {
        self.prims.iter().map(Prim::area).sum()
    }

    /// Draw `n` points uniformly by area on the union surface.
    ///
    /// Candidates are drawn per primitive (weighted by primitive area) and
    /// rejected when they fall strictly inside another primitive, so the
    /// result is uniform on the exterior surface. Returns the points and an
    /// acceptance-based estimate of the exterior surface area.
    pub fn sample_surface(
        &self,
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> Result<(Array2<f64>, f64), DatasetError> {
        let weights: Vec<f64> = self.prims.iter().map(Prim::area).collect();
        self.sample_rejection(rng, n, &weights)
    }

    /// Draw `n` points uniformly on the exterior surface of part `idx`.
    pub fn sample_part_surface(
        &self,
        rng: &mut ChaCha8Rng,
        idx: usize,
        n: usize,
    ) -> Result<(Array2<f64>, f64), DatasetError> {
        let weights: Vec<f64> = (0..self.prims.len())
            .map(|i| if i == idx { self.prims[i].area() } else { 0.0 })
            .collect();
        self.sample_rejection(rng, n, &weights)
    }

    fn sample_rejection(
        &self,
        rng: &mut ChaCha8Rng,
        n: usize,
        weights: &[f64],
    ) -> Result<(Array2<f64>, f64), DatasetError> {
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(DatasetError::BadConfig("empty surface sampling weights".into()));
        }
        let last_positive = weights
            .iter()
            .rposition(|w| *w > 0.0)
            .expect("positive total weight implies a positive entry");
        let mut points = Array2::zeros((n, 3));
        let mut accepted = 0usize;
        let mut drawn = 0usize;
        let max_draws = 64 * n + 1024;
        while accepted < n {
            if drawn > max_draws {
                return Err(DatasetError::BadConfig(
                    "surface sampling stalled; primitives overlap too much".into(),
                ));
            }
            drawn += 1;
            let mut pick = rng.gen::<f64>() * total_weight;
            let mut which = last_positive;
            for (i, w) in weights.iter().enumerate() {
                if pick < *w {
                    which = i;
                    break;
                }
                pick -= w;
            }
            let p = self.prims[which].sample_surface(rng);
            let hidden = self
                .prims
                .iter()
                .enumerate()
                .any(|(j, other)| j != which && other.sdf(&p) < -1e-9);
            if hidden {
                continue;
            }
            points[[accepted, 0]] = p.x;
            points[[accepted, 1]] = p.y;
            points[[accepted, 2]] = p.z;
            accepted += 1;
        }
        let area = total_weight * (n as f64) / (drawn as f64);
        Ok((points, area))
    }

    fn recenter(&mut self) {
        let mut lo = Vector3::from_element(f64::INFINITY);
        let mut hi = Vector3::from_element(f64::NEG_INFINITY);
        for prim in &self.prims {
            let (c, h) = match prim {
                Prim::Cuboid { center, half } => (*center, *half),
                Prim::Ball { radius } => (Vector3::zeros(), Vector3::from_element(*radius)),
                Prim::Tube { radius, half_height } => {
                    (Vector3::zeros(), Vector3::new(*radius, *radius, *half_height))
                }
            };
            lo = lo.inf(&(c - h));
            hi = hi.sup(&(c + h));
        }
        let shift = (lo + hi) / 2.0;
        for prim in &mut self.prims {
            if let Prim::Cuboid { center, .. } = prim {
                *center -= shift;
            }
        }
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Construct a randomized instance of the given primitive kind, normalized
/// to lie within `[-1, 1]^3` and centered at the origin.
pub fn make_shape(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Shape {
    let mut shape = match kind {
        ShapeKind::Box => Shape {
            kind,
            prims: vec![Prim::Cuboid {
                center: Vector3::zeros(),
                half: Vector3::new(
                    uniform_in(rng, 0.25, 0.55),
                    uniform_in(rng, 0.25, 0.55),
                    uniform_in(rng, 0.25, 0.55),
                ),
            }],
        },
        ShapeKind::Sphere => Shape {
            kind,
            prims: vec![Prim::Ball { radius: 0.4 }],
        },
        ShapeKind::Cylinder => Shape {
            kind,
            prims: vec![Prim::Tube {
                radius: uniform_in(rng, 0.2, 0.4),
                half_height: uniform_in(rng, 0.3, 0.5),
            }],
        },
        ShapeKind::LBracket => {
            // Two arms joined at a corner anchored at (-0.6, *, -0.6); the
            // asymmetric arm lengths make the shape free of rotational
            // symmetry, so ground-truth poses are unambiguous.
            let thickness = uniform_in(rng, 0.25, 0.35);
            let len_up = uniform_in(rng, 0.8, 1.2);
            let len_along = uniform_in(rng, 0.8, 1.2) * 0.75;
            let width = uniform_in(rng, 0.15, 0.25);
            let corner = -0.6;
            let vertical = Prim::Cuboid {
                center: Vector3::new(corner + thickness / 2.0, 0.0, corner + len_up / 2.0),
                half: Vector3::new(thickness / 2.0, width, len_up / 2.0),
            };
            let horizontal = Prim::Cuboid {
                center: Vector3::new(corner + len_along / 2.0, 0.0, corner + thickness / 2.0),
                half: Vector3::new(len_along / 2.0, width, thickness / 2.0),
            };
            let mut s = Shape { kind, prims: vec![vertical, horizontal] };
            s.recenter();
            s
        }
        ShapeKind::Table => {
            let top_half_x = uniform_in(rng, 0.4, 0.55);
            let top_half_y = uniform_in(rng, 0.4, 0.55);
            let top_thick = uniform_in(rng, 0.04, 0.07);
            let leg_half = uniform_in(rng, 0.04, 0.07);
            let leg_len = uniform_in(rng, 0.35, 0.5);
            let top_z = 0.35;
            // Legs are embedded 0.02 into the underside of the top so the
            // contact patches are strictly interior and never sampled.
            let embed = 0.02;
            let leg_top = top_z - top_thick + embed;
            let leg_center_z = leg_top - leg_len / 2.0;
            let leg_x = top_half_x - leg_half - 0.03;
            let leg_y = top_half_y - leg_half - 0.03;
            let mut prims = vec![Prim::Cuboid {
                center: Vector3::new(0.0, 0.0, top_z),
                half: Vector3::new(top_half_x, top_half_y, top_thick),
            }];
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                prims.push(Prim::Cuboid {
                    center: Vector3::new(sx * leg_x, sy * leg_y, leg_center_z),
                    half: Vector3::new(leg_half, leg_half, leg_len / 2.0),
                });
            }
            let mut s = Shape { kind, prims };
            s.recenter();
            s
        }
    };
    shape.recenter();
    shape
}

// ---------------------------------------------------------------------------
// Fracture: partitioning the whole surface into fragments
// ---------------------------------------------------------------------------

/// Median nearest-neighbor spacing of the point set, estimated on an evenly
/// strided subset. Used to scale the fragment connectivity radius.
fn median_nn_distance(points: &Array2<f64>) -> f64 {
    let n = points.nrows();
    if n < 2 {
        return 0.0;
    }
    let probe = n.min(256);
    let mut dists = Vec::with_capacity(probe);
    for k in 0..probe {
        let i = k * n / probe;
        let pi = Vector3::new(points[[i, 0]], points[[i, 1]], points[[i, 2]]);
        let mut best = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = (Vector3::new(points[[j, 0]], points[[j, 1]], points[[j, 2]]) - pi)
                .norm_squared();
            if d < best {
                best = d;
            }
        }
        dists.push(best.sqrt());
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

/// True when the selected points form one connected component under an
/// epsilon-radius neighbor graph. Uses a uniform cell hash so the check is
/// near-linear in the subset size.
fn connected(points: &Array2<f64>, idxs: &[usize], eps: f64) -> bool {
    if idxs.len() <= 1 {
        return true;
    }
    let cell = |v: f64| (v / eps).floor() as i64;
    let mut grid: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (local, &i) in idxs.iter().enumerate() {
        let key = (cell(points[[i, 0]]), cell(points[[i, 1]]), cell(points[[i, 2]]));
        grid.entry(key).or_default().push(local);
    }
    let eps2 = eps * eps;
    let mut visited = vec![false; idxs.len()];
    let mut stack = vec![0usize];
    visited[0] = true;
    let mut seen = 1usize;
    while let Some(local) = stack.pop() {
        let i = idxs[local];
        let p = Vector3::new(points[[i, 0]], points[[i, 1]], points[[i, 2]]);
        let base = (cell(p.x), cell(p.y), cell(p.z));
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(base.0 + dx, base.1 + dy, base.2 + dz)) else {
                        continue;
                    };
                    for &other in bucket {
                        if visited[other] {
                            continue;
                        }
                        let j = idxs[other];
                        let q = Vector3::new(points[[j, 0]], points[[j, 1]], points[[j, 2]]);
                        if (q - p).norm_squared() <= eps2 {
                            visited[other] = true;
                            seen += 1;
                            stack.push(other);
                        }
                    }
                }
            }
        }
    }
    seen == idxs.len()
}

/// Partition the rows of `points` into `num_parts` fragments by recursive
/// planar cuts.
///
/// Each cut passes through the midpoint of two randomly chosen points of the
/// fragment being split, with a uniformly random normal. A cut is accepted
/// only when both sides keep at least [`MIN_FRAGMENT_POINTS`] points and
/// remain connected under an epsilon-radius neighbor graph; after 20 rejected
/// attempts for one split the whole fracture fails.
pub fn fracture_indices(
    points: &Array2<f64>,
    num_parts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    let n = points.nrows();
    if num_parts < 2 {
        return Err(DatasetError::FractureFailed(format!(
            "part count must be at least 2, got {num_parts}"
        )));
    }
    if num_parts * MIN_FRAGMENT_POINTS > n {
        return Err(DatasetError::FractureFailed(format!(
            "{num_parts} parts of >= {MIN_FRAGMENT_POINTS} points exceed {n} available points"
        )));
    }
    // Neighbor radius for the connectivity check, grown until the input set
    // itself is connected so the baseline is self-consistent at any sampling
    // density.
    let mut eps = 4.0 * median_nn_distance(points);
    let all: Vec<usize> = (0..n).collect();
    let mut growths = 0;
    while !connected(points, &all, eps) {
        eps *= 2.0;
        growths += 1;
        if growths > 8 {
            return Err(DatasetError::FractureFailed(
                "input surface points are not a connected set".into(),
            ));
        }
    }
    let mut parts: Vec<Vec<usize>> = vec![all];
    while parts.len() < num_parts {
        let pos = parts
            .iter()
            .enumerate()
            .max_by_key(|(_, p)| p.len())
            .map(|(i, _)| i)
            .expect("at least one part");
        let target = parts[pos].clone();
        let mut split = None;
        for _ in 0..20 {
            let a = target[rng.gen_range(0..target.len())];
            let b = target[rng.gen_range(0..target.len())];
            let anchor = Vector3::new(
                (points[[a, 0]] + points[[b, 0]]) / 2.0,
                (points[[a, 1]] + points[[b, 1]]) / 2.0,
                (points[[a, 2]] + points[[b, 2]]) / 2.0,
            );
            let mut normal = Vector3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            );
            if normal.norm() < 1e-9 {
                continue;
            }
            normal = normal.normalize();
            let mut left = Vec::new();
            let mut right = Vec::new();
            for &i in &target {
                let p = Vector3::new(points[[i, 0]], points[[i, 1]], points[[i, 2]]);
                if (p - anchor).dot(&normal) >= 0.0 {
                    left.push(i);
                } else {
                    right.push(i);
                }
            }
            if left.len() >= MIN_FRAGMENT_POINTS
                && right.len() >= MIN_FRAGMENT_POINTS
                && connected(points, &left, eps)
                && connected(points, &right, eps)
            {
                split = Some((left, right));
                break;
            }
        }
        match split {
            Some((left, right)) => {
                parts[pos] = left;
                parts.push(right);
            }
            None => {
                return Err(DatasetError::FractureFailed(format!(
                    "no admissible cut for a {}-point fragment after 20 attempts",
                    target.len()
                )));
            }
        }
    }
    Ok(parts)
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// One rigid piece of a sample, stored in its own noised frame.
#[derive(Debug, Clone)]
pub struct Fragment {
    /// Stable index of the fragment within its sample.
    pub id: usize,
    /// Surface points in the fragment's stored frame, shape `(m_i, 3)`.
    pub points: Array2<f64>,
    /// Estimated exterior surface area of the fragment.
    pub area: f64,
}

/// A complete training/evaluation sample.
///
/// Fragment points live in per-fragment frames; applying `gt_poses[i]` to
/// `fragments[i].points` reproduces the corresponding subset of
/// `whole_points` (the canonical assembled surface) to within round-off.
#[derive(Debug, Clone)]
pub struct AssemblySample {
    /// Shape category label (primitive kind name).
    pub category: String,
    /// Rigid pieces in their stored frames.
    pub fragments: Vec<Fragment>,
    /// Per-fragment rigid maps from stored frame to canonical frame.
    pub gt_poses: Vec<PoseState<f64>>,
    /// Which fragments are withheld from the model input.
    pub missing: Vec<bool>,
    /// Canonical whole-surface points, shape `(m, 3)`.
    pub whole_points: Array2<f64>,
    /// Query subset of the whole surface used by the shape encoder, `(m', 3)`.
    pub whole_queries: Array2<f64>,
    /// Signed-distance query points, `(q, 3)`.
    pub sdf_points: Array2<f64>,
    /// Analytic signed distances at `sdf_points`, `(q, 1)`.
    pub sdf_values: Array2<f64>,
    /// Binary orthographic silhouette, row-major `(1, image_size^2)`.
    pub silhouette: Array2<f64>,
    /// Projection axis of the silhouette (0 = x, 1 = y, 2 = z).
    pub silhouette_axis: u8,
    /// Silhouette edge resolution in pixels.
    pub image_size: usize,
}

impl AssemblySample {
    /// Number of fragments, observed or not.
    pub fn num_parts(&self) -> usize {
        self.fragments.len()
    }

    /// Indices of fragments visible to the model.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.fragments.len()).filter(|&i| !self.missing[i]).collect()
    }

    /// Fragment points mapped to the canonical frame by the ground-truth pose.
    pub fn canonical_fragment(&self, i: usize) -> Array2<f64> {
        let pose = &self.gt_poses[i];
        let pts = &self.fragments[i].points;
        let mut out = Array2::zeros(pts.raw_dim());
        for r in 0..pts.nrows() {
            let p = Vector3::new(pts[[r, 0]], pts[[r, 1]], pts[[r, 2]]);
            let q = pose.apply(&p);
            out[[r, 0]] = q.x;
            out[[r, 1]] = q.y;
            out[[r, 2]] = q.z;
        }
        out
    }

    /// Per-fragment point budgets, proportional to fragment area with a
    /// floor of [`MIN_FRAGMENT_POINTS`], summing to `total` up to the slack
    /// introduced by floors and per-fragment caps.
    pub fn budget_allocation(&self, total: usize) -> Vec<usize> {
        let weights: Vec<f64> = self.fragments.iter().map(|f| f.area).collect();
        let alloc = allocate_budget(&weights, total, MIN_FRAGMENT_POINTS);
        alloc
            .into_iter()
            .zip(&self.fragments)
            .map(|(m, f)| m.min(f.points.nrows()))
            .collect()
    }

    /// Evenly strided `m`-point subset of fragment `i`'s stored points.
    pub fn budgeted_points(&self, i: usize, m: usize) -> Array2<f64> {
        let pts = &self.fragments[i].points;
        let n = pts.nrows();
        let m = m.min(n).max(1);
        let mut out = Array2::zeros((m, 3));
        for k in 0..m {
            let src = k * n / m;
            for c in 0..3 {
                out[[k, c]] = pts[[src, c]];
            }
        }
        out
    }
}

/// Split `total` into one bucket per weight, proportionally, with every
/// bucket at least `floor`. Uses largest-remainder rounding so the result
/// sums to `total` exactly whenever `floor * weights.len() <= total`.
pub fn allocate_budget(weights: &[f64], total: usize, floor: usize) -> Vec<usize> {
    assert!(!weights.is_empty(), "allocate_budget needs at least one weight");
    let k = weights.len();
    if floor * k >= total {
        return vec![floor; k];
    }
    let sum: f64 = weights.iter().sum();
    assert!(sum > 0.0, "allocate_budget needs positive total weight");
    let raw: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut alloc: Vec<usize> = raw.iter().map(|r| (r.floor() as usize).max(floor)).collect();
    let mut diff = alloc.iter().sum::<usize>() as i64 - total as i64;
    while diff > 0 {
        // Shrink the entry sitting farthest above its ideal share.
        let mut best = None;
        for (i, a) in alloc.iter().enumerate() {
            if *a > floor {
                let slack = *a as f64 - raw[i];
                if best.map_or(true, |(_, s)| slack > s) {
                    best = Some((i, slack));
                }
            }
        }
        let (i, _) = best.expect("some bucket above floor");
        alloc[i] -= 1;
        diff -= 1;
    }
    while diff < 0 {
        // Grow the entry sitting farthest below its ideal share.
        let mut best = None;
        for (i, a) in alloc.iter().enumerate() {
            let deficit = raw[i] - *a as f64;
            if best.map_or(true, |(_, d)| deficit > d) {
                best = Some((i, deficit));
            }
        }
        let (i, _) = best.expect("nonempty weights");
        alloc[i] += 1;
        diff += 1;
    }
    alloc
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------

/// Parameters controlling synthetic sample generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Whether fragments are semantic parts or planar-fracture pieces.
    pub family: Family,
    /// Primitive kinds eligible for the fracture family.
    pub kinds: Vec<ShapeKind>,
    /// Inclusive fragment-count range for the fracture family.
    pub parts_min: usize,
    /// Inclusive upper bound of the fragment-count range.
    pub parts_max: usize,
    /// Points sampled on the whole assembled surface.
    pub whole_points: usize,
    /// Query subset of the whole surface stored for the shape encoder.
    pub whole_queries: usize,
    /// Near-surface signed-distance supervision points.
    pub sdf_near: usize,
    /// Uniform-in-cube signed-distance supervision points.
    pub sdf_uniform: usize,
    /// Standard deviation of the near-surface offset.
    pub near_sigma: f64,
    /// Silhouette resolution (pixels per edge).
    pub image_size: usize,
    /// Keep fragments in the canonical frame with identity ground-truth
    /// poses (debug/oracle fixtures).
    pub identity_poses: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            family: Family::Fracture,
            kinds: vec![
                ShapeKind::Box,
                ShapeKind::Sphere,
                ShapeKind::Cylinder,
                ShapeKind::LBracket,
            ],
            parts_min: 2,
            parts_max: 4,
            whole_points: 2048,
            whole_queries: 512,
            sdf_near: 2048,
            sdf_uniform: 1024,
            near_sigma: 0.02,
            image_size: 64,
            identity_poses: false,
        }
    }
}

impl DataConfig {
    /// Check internal consistency.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.parts_min < 2 || self.parts_max < self.parts_min {
            return Err(DatasetError::BadConfig(format!(
                "parts range [{}, {}] is invalid",
                self.parts_min, self.parts_max
            )));
        }
        if self.parts_max * MIN_FRAGMENT_POINTS > self.whole_points {
            return Err(DatasetError::BadConfig(format!(
                "{} parts need more than {} whole points",
                self.parts_max, self.whole_points
            )));
        }
        if self.whole_queries > self.whole_points {
            return Err(DatasetError::BadConfig(
                "whole_queries cannot exceed whole_points".into(),
            ));
        }
        if self.family == Family::Fracture && self.kinds.is_empty() {
            return Err(DatasetError::BadConfig("fracture family needs kinds".into()));
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(DatasetError::BadConfig(
                "image_size must be a positive multiple of 16".into(),
            ));
        }
        Ok(())
    }
}

fn strided_rows(points: &Array2<f64>, m: usize) -> Array2<f64> {
    let n = points.nrows();
    let m = m.min(n);
    let mut out = Array2::zeros((m, 3));
    for k in 0..m {
        let src = k * n / m;
        for c in 0..3 {
            out[[k, c]] = points[[src, c]];
        }
    }
    out
}

/// Rasterize a binary orthographic silhouette of the shape along `axis`.
///
/// A pixel is set when any of `depth` sample points along the viewing ray
/// through the pixel center lies inside the shape.
fn rasterize_silhouette(shape: &Shape, axis: u8, img: usize) -> Array2<f64> {
    let (ua, va) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let depth = img;
    let mut out = Array2::zeros((1, img * img));
    for j in 0..img {
        let v = -1.0 + 2.0 * (j as f64 + 0.5) / img as f64;
        for i in 0..img {
            let u = -1.0 + 2.0 * (i as f64 + 0.5) / img as f64;
            let mut hit = false;
            for k in 0..depth {
                let w = -1.0 + 2.0 * (k as f64 + 0.5) / depth as f64;
                let mut p = Vector3::zeros();
                p[axis as usize] = w;
                p[ua] = u;
                p[va] = v;
                if shape.sdf(&p) <= 0.0 {
                    hit = true;
                    break;
                }
            }
            if hit {
                out[[0, j * img + i]] = 1.0;
            }
        }
    }
    out
}

/// Generate the `index`-th sample of the dataset identified by `seed`.
///
/// Deterministic: the pair `(seed, index)` fully determines the sample, and
/// samples for different indices come from independent generator streams.
/// A fracture that finds no admissible cuts is retried on up to 16
/// index-specific substreams before the failure is surfaced, so occasional
/// hard-to-cut geometry does not abort dataset generation.
pub fn generate_sample(
    cfg: &DataConfig,
    seed: u64,
    index: u64,
) -> Result<AssemblySample, DatasetError> {
    cfg.validate()?;
    let mut last = None;
    for attempt in 0..16u64 {
        let stream = index.wrapping_mul(16).wrapping_add(attempt).wrapping_add(1);
        match generate_sample_stream(cfg, seed, stream) {
            Ok(sample) => return Ok(sample),
            Err(err @ DatasetError::FractureFailed(_)) => last = Some(err),
            Err(err) => return Err(err),
        }
    }
    Err(last.expect("every failed attempt records an error"))
}

fn generate_sample_stream(
    cfg: &DataConfig,
    seed: u64,
    stream: u64,
) -> Result<AssemblySample, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);

    // 1. Shape and canonical whole-surface points, fragment index partition.
    let (shape, whole, partition, areas) = match cfg.family {
        Family::Fracture => {
            let kind = cfg.kinds[rng.gen_range(0..cfg.kinds.len())];
            let shape = make_shape(kind, &mut rng);
            let (whole, area) = shape.sample_surface(&mut rng, cfg.whole_points)?;
            let num_parts = rng.gen_range(cfg.parts_min..=cfg.parts_max);
            let partition = fracture_indices(&whole, num_parts, &mut rng)?;
            let areas: Vec<f64> = partition
                .iter()
                .map(|idxs| area * idxs.len() as f64 / whole.nrows() as f64)
                .collect();
            (shape, whole, partition, areas)
        }
        Family::Parts => {
            let shape = make_shape(ShapeKind::Table, &mut rng);
            let weights: Vec<f64> = (0..shape.num_parts()).map(|i| shape.prims[i].area()).collect();
            let counts = allocate_budget(&weights, cfg.whole_points, MIN_FRAGMENT_POINTS);
            let mut whole = Array2::zeros((counts.iter().sum::<usize>(), 3));
            let mut partition = Vec::with_capacity(counts.len());
            let mut areas = Vec::with_capacity(counts.len());
            let mut row = 0usize;
            for (part, &count) in counts.iter().enumerate() {
                let (pts, area) = shape.sample_part_surface(&mut rng, part, count)?;
                let idxs: Vec<usize> = (row..row + count).collect();
                for r in 0..count {
                    for c in 0..3 {
                        whole[[row + r, c]] = pts[[r, c]];
                    }
                }
                row += count;
                partition.push(idxs);
                areas.push(area);
            }
            (shape, whole, partition, areas)
        }
    };

    // 2. Signed-distance supervision.
    let total_q = cfg.sdf_near + cfg.sdf_uniform;
    let mut sdf_points = Array2::zeros((total_q, 3));
    let mut sdf_values = Array2::zeros((total_q, 1));
    for q in 0..cfg.sdf_near {
        let src = rng.gen_range(0..whole.nrows());
        let mut p = Vector3::new(whole[[src, 0]], whole[[src, 1]], whole[[src, 2]]);
        for c in 0..3 {
            let off: f64 = StandardNormal.sample(&mut rng);
            p[c] += cfg.near_sigma * off;
        }
        sdf_points[[q, 0]] = p.x;
        sdf_points[[q, 1]] = p.y;
        sdf_points[[q, 2]] = p.z;
        sdf_values[[q, 0]] = shape.sdf(&p);
    }
    for q in 0..cfg.sdf_uniform {
        let p = Vector3::new(
            uniform_in(&mut rng, -1.0, 1.0),
            uniform_in(&mut rng, -1.0, 1.0),
            uniform_in(&mut rng, -1.0, 1.0),
        );
        let row = cfg.sdf_near + q;
        sdf_points[[row, 0]] = p.x;
        sdf_points[[row, 1]] = p.y;
        sdf_points[[row, 2]] = p.z;
        sdf_values[[row, 0]] = shape.sdf(&p);
    }

    // 3. Conditioning silhouette.
    let axis = rng.gen_range(0u8..3u8);
    let silhouette = rasterize_silhouette(&shape, axis, cfg.image_size);

    // 4. Fragment frames and ground-truth poses. Stored fragment points are
    //    centroid-centered: the random rigid move is a rotation about the
    //    fragment centroid, under which any translation offset cancels after
    //    centering, and the ground-truth pose becomes (R^T, centroid).
    let mut fragments = Vec::with_capacity(partition.len());
    let mut gt_poses = Vec::with_capacity(partition.len());
    for (id, idxs) in partition.iter().enumerate() {
        let mut centroid = Vector3::zeros();
        for &i in idxs {
            centroid += Vector3::new(whole[[i, 0]], whole[[i, 1]], whole[[i, 2]]);
        }
        centroid /= idxs.len() as f64;
        let (points, pose) = if cfg.identity_poses {
            let mut pts = Array2::zeros((idxs.len(), 3));
            for (r, &i) in idxs.iter().enumerate() {
                for c in 0..3 {
                    pts[[r, c]] = whole[[i, c]];
                }
            }
            (pts, PoseState::identity())
        } else {
            let rot: Rotation<f64> = sample_uniform_rotation(&mut rng);
            let mut pts = Array2::zeros((idxs.len(), 3));
            for (r, &i) in idxs.iter().enumerate() {
                let q = Vector3::new(whole[[i, 0]], whole[[i, 1]], whole[[i, 2]]);
                let moved = rot.apply(&(q - centroid));
                pts[[r, 0]] = moved.x;
                pts[[r, 1]] = moved.y;
                pts[[r, 2]] = moved.z;
            }
            (pts, PoseState::new(rot.transpose(), centroid))
        };
        fragments.push(Fragment { id, points, area: areas[id] });
        gt_poses.push(pose);
    }

    let whole_queries = strided_rows(&whole, cfg.whole_queries);
    let missing = vec![false; fragments.len()];
    Ok(AssemblySample {
        category: shape.kind().name().to_string(),
        fragments,
        gt_poses,
        missing,
        whole_points: whole,
        whole_queries,
        sdf_points,
        sdf_values,
        silhouette,
        silhouette_axis: axis,
        image_size: cfg.image_size,
    })
}

/// Mark `ceil(fraction * num_parts)` randomly chosen fragments as missing.
///
/// Fails with [`DatasetError::TooFewParts`] when fewer than two fragments
/// would remain observed. `fraction == 0` leaves the sample unchanged.
pub fn drop_parts(
    sample: &mut AssemblySample,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize, DatasetError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DatasetError::BadConfig(format!(
            "drop fraction {fraction} outside [0, 1]"
        )));
    }
    let to_drop = (fraction * sample.num_parts() as f64).ceil() as usize;
    drop_exact(sample, to_drop, rng)
}

/// Mark exactly `to_drop` randomly chosen observed fragments as missing.
///
/// Fails with [`DatasetError::TooFewParts`] when fewer than two fragments
/// would remain observed. `to_drop == 0` leaves the sample unchanged.
pub fn drop_exact(
    sample: &mut AssemblySample,
    to_drop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize, DatasetError> {
    if to_drop == 0 {
        return Ok(0);
    }
    let observed = sample.observed_indices();
    if observed.len() < to_drop + 2 {
        return Err(DatasetError::TooFewParts {
            remaining: observed.len().saturating_sub(to_drop),
        });
    }
    let mut pool = observed;
    for _ in 0..to_drop {
        let pick = rng.gen_range(0..pool.len());
        let idx = pool.swap_remove(pick);
        sample.missing[idx] = true;
    }
    Ok(to_drop)
}

// ---------------------------------------------------------------------------
// Archive
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    category: String,
    axis: u8,
    image_size: usize,
    missing: Vec<bool>,
    poses: Vec<[f64; 12]>,
    areas: Vec<f64>,
    frag_rows: Vec<usize>,
    whole_rows: usize,
    query_rows: usize,
    sdf_rows: usize,
}

fn write_array(buf: &mut Vec<u8>, a: &Array2<f64>) {
    for v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_array(bytes: &[u8], pos: &mut usize, rows: usize, cols: usize) -> Result<Array2<f64>, DatasetError> {
    let need = rows * cols * 8;
    if *pos + need > bytes.len() {
        return Err(DatasetError::CorruptArchive("record blob truncated".into()));
    }
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let at = *pos + (r * cols + c) * 8;
            out[[r, c]] = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        }
    }
    *pos += need;
    Ok(out)
}

fn encode_record(sample: &AssemblySample) -> Result<Vec<u8>, DatasetError> {
    let header = RecordHeader {
        category: sample.category.clone(),
        axis: sample.silhouette_axis,
        image_size: sample.image_size,
        missing: sample.missing.clone(),
        poses: sample.gt_poses.iter().map(PoseState::to_row12).collect(),
        areas: sample.fragments.iter().map(|f| f.area).collect(),
        frag_rows: sample.fragments.iter().map(|f| f.points.nrows()).collect(),
        whole_rows: sample.whole_points.nrows(),
        query_rows: sample.whole_queries.nrows(),
        sdf_rows: sample.sdf_points.nrows(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| DatasetError::CorruptArchive(format!("header encode: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for frag in &sample.fragments {
        write_array(&mut buf, &frag.points);
    }
    write_array(&mut buf, &sample.whole_points);
    write_array(&mut buf, &sample.whole_queries);
    write_array(&mut buf, &sample.sdf_points);
    write_array(&mut buf, &sample.sdf_values);
    write_array(&mut buf, &sample.silhouette);
    Ok(buf)
}

fn decode_record(bytes: &[u8]) -> Result<AssemblySample, DatasetError> {
    if bytes.len() < 4 {
        return Err(DatasetError::CorruptArchive("record too short".into()));
    }
    let jlen = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if 4 + jlen > bytes.len() {
        return Err(DatasetError::CorruptArchive("record header truncated".into()));
    }
    let header: RecordHeader = serde_json::from_slice(&bytes[4..4 + jlen])
        .map_err(|e| DatasetError::CorruptArchive(format!("header decode: {e}")))?;
    let n_frag = header.frag_rows.len();
    if header.poses.len() != n_frag || header.missing.len() != n_frag || header.areas.len() != n_frag
    {
        return Err(DatasetError::CorruptArchive(
            "fragment metadata lengths disagree".into(),
        ));
    }
    let mut pos = 4 + jlen;
    let mut fragments = Vec::with_capacity(n_frag);
    for (id, &rows) in header.frag_rows.iter().enumerate() {
        let points = read_array(bytes, &mut pos, rows, 3)?;
        fragments.push(Fragment { id, points, area: header.areas[id] });
    }
    let whole_points = read_array(bytes, &mut pos, header.whole_rows, 3)?;
    let whole_queries = read_array(bytes, &mut pos, header.query_rows, 3)?;
    let sdf_points = read_array(bytes, &mut pos, header.sdf_rows, 3)?;
    let sdf_values = read_array(bytes, &mut pos, header.sdf_rows, 1)?;
    let silhouette = read_array(bytes, &mut pos, 1, header.image_size * header.image_size)?;
    if pos != bytes.len() {
        return Err(DatasetError::CorruptArchive("trailing bytes in record".into()));
    }
    let gt_poses = header
        .poses
        .iter()
        .map(|row| PoseState::<f64>::from_row12(row))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| DatasetError::CorruptArchive("bad pose row".into()))?;
    Ok(AssemblySample {
        category: header.category,
        fragments,
        gt_poses,
        missing: header.missing,
        whole_points,
        whole_queries,
        sdf_points,
        sdf_values,
        silhouette,
        silhouette_axis: header.axis,
        image_size: header.image_size,
    })
}

/// Write samples to a checksummed random-access archive.
///
/// Layout: magic, version, sample count, length-prefixed records, an offset
/// index, the index position, and a SHA-256 digest of everything preceding
/// it. The write goes through a temporary file and an atomic rename.
pub fn write_archive(path: &Path, samples: &[AssemblySample]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    let mut hasher = Sha256::new();
    let mut written: u64 = 0;
    {
        let file = File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        let emit = |w: &mut BufWriter<File>,
                        hasher: &mut Sha256,
                        written: &mut u64,
                        bytes: &[u8]|
         -> Result<(), DatasetError> {
            w.write_all(bytes)?;
            hasher.update(bytes);
            *written += bytes.len() as u64;
            Ok(())
        };
        emit(&mut w, &mut hasher, &mut written, ARCHIVE_MAGIC)?;
        emit(&mut w, &mut hasher, &mut written, &ARCHIVE_VERSION.to_le_bytes())?;
        emit(&mut w, &mut hasher, &mut written, &(samples.len() as u64).to_le_bytes())?;
        let mut offsets = Vec::with_capacity(samples.len());
        for sample in samples {
            let record = encode_record(sample)?;
            offsets.push(written);
            emit(&mut w, &mut hasher, &mut written, &(record.len() as u64).to_le_bytes())?;
            emit(&mut w, &mut hasher, &mut written, &record)?;
        }
        let index_pos = written;
        for off in &offsets {
            emit(&mut w, &mut hasher, &mut written, &off.to_le_bytes())?;
        }
        emit(&mut w, &mut hasher, &mut written, &index_pos.to_le_bytes())?;
        let digest = hasher.finalize();
        w.write_all(&digest)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Random-access reader over an archive written by [`write_archive`].
///
/// Opening verifies the checksum by streaming the file once; individual
/// samples are decoded on demand.
pub struct ArchiveReader {
    file: File,
    offsets: Vec<u64>,
}

impl ArchiveReader {
    /// Open and validate an archive.
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let mut file = File::open(path)?;
        let total = file.metadata()?.len();
        if total < (4 + 4 + 8 + 8 + 32) as u64 {
            return Err(DatasetError::CorruptArchive("file too short".into()));
        }
        let body_len = total - 32;

        // Stream-hash the body without materializing it.
        let mut hasher = Sha256::new();
        {
            let mut reader = BufReader::new(&mut file);
            let mut remaining = body_len;
            let mut chunk = vec![0u8; 1 << 16];
            while remaining > 0 {
                let take = chunk.len().min(remaining as usize);
                reader.read_exact(&mut chunk[..take])?;
                hasher.update(&chunk[..take]);
                remaining -= take as u64;
            }
            let mut stored = [0u8; 32];
            reader.read_exact(&mut stored)?;
            let digest = hasher.finalize();
            if digest.as_slice() != stored {
                return Err(DatasetError::CorruptArchive("checksum mismatch".into()));
            }
        }

        let mut magic = [0u8; 4];
        file.seek(SeekFrom::Start(0))?;
        file.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(DatasetError::CorruptArchive("bad magic".into()));
        }
        let mut buf4 = [0u8; 4];
        file.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != ARCHIVE_VERSION {
            return Err(DatasetError::CorruptArchive(format!(
                "unsupported version {version}"
            )));
        }
        let mut buf8 = [0u8; 8];
        file.read_exact(&mut buf8)?;
        let count = u64::from_le_bytes(buf8) as usize;

        file.seek(SeekFrom::Start(body_len - 8))?;
        file.read_exact(&mut buf8)?;
        let index_pos = u64::from_le_bytes(buf8);
        let index_len = (count as u64) * 8;
        if index_pos + index_len + 8 != body_len {
            return Err(DatasetError::CorruptArchive("index position inconsistent".into()));
        }
        file.seek(SeekFrom::Start(index_pos))?;
        let mut offsets = Vec::with_capacity(count);
        for _ in 0..count {
            file.read_exact(&mut buf8)?;
            let off = u64::from_le_bytes(buf8);
            if off >= index_pos {
                return Err(DatasetError::CorruptArchive("record offset out of range".into()));
            }
            offsets.push(off);
        }
        Ok(ArchiveReader { file, offsets })
    }

    /// Number of samples in the archive.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    /// True when the archive holds no samples.
    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Decode the `i`-th sample.
    pub fn get(&mut self, i: usize) -> Result<AssemblySample, DatasetError> {
        let off = *self
            .offsets
            .get(i)
            .ok_or_else(|| DatasetError::CorruptArchive(format!("index {i} out of range")))?;
        self.file.seek(SeekFrom::Start(off))?;
        let mut buf8 = [0u8; 8];
        self.file.read_exact(&mut buf8)?;
        let len = u64::from_le_bytes(buf8) as usize;
        let mut record = vec![0u8; len];
        self.file.read_exact(&mut record)?;
        decode_record(&record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sphere_sdf_is_origin_distance_minus_radius() {
        let shape = make_shape(ShapeKind::Sphere, &mut rng(1));
        assert_eq!(shape.sdf(&Vector3::zeros()), -0.4);
        assert!((shape.sdf(&Vector3::new(1.0, 0.0, 0.0)) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn shapes_fit_unit_cube_and_points_lie_on_surface() {
        for kind in [
            ShapeKind::Box,
            ShapeKind::Sphere,
            ShapeKind::Cylinder,
            ShapeKind::LBracket,
            ShapeKind::Table,
        ] {
            let mut r = rng(7);
            let shape = make_shape(kind, &mut r);
            let (pts, area) = shape.sample_surface(&mut r, 256).unwrap();
            assert!(area > 0.0);
            for i in 0..pts.nrows() {
                let p = Vector3::new(pts[[i, 0]], pts[[i, 1]], pts[[i, 2]]);
                assert!(
                    p.amax() <= 1.0,
                    "{kind} point {p:?} escapes the unit cube"
                );
                assert!(
                    shape.sdf(&p).abs() < 1e-7,
                    "{kind} sample off the surface: sdf = {}",
                    shape.sdf(&p)
                );
            }
        }
    }

    #[test]
    fn budget_allocation_follows_area_ratio_exactly() {
        assert_eq!(allocate_budget(&[1.0, 3.0], 512, MIN_FRAGMENT_POINTS), vec![128, 384]);
        // Floors hold even for tiny weights, and the total stays exact while
        // some bucket sits above its floor.
        let alloc = allocate_budget(&[1000.0, 1.0], 64, 16);
        assert_eq!(alloc.iter().sum::<usize>(), 64);
        assert_eq!(alloc[1], 16);
        // Degenerate case: floors alone exceed the budget.
        assert_eq!(allocate_budget(&[1.0, 1.0, 1.0], 40, 16), vec![16, 16, 16]);
    }

    #[test]
    fn fracture_partitions_every_point_into_big_connected_parts() {
        let mut r = rng(11);
        let shape = make_shape(ShapeKind::LBracket, &mut r);
        let (pts, _) = shape.sample_surface(&mut r, 1024).unwrap();
        let parts = fracture_indices(&pts, 3, &mut r).unwrap();
        assert_eq!(parts.len(), 3);
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1024).collect::<Vec<_>>(), "partition must be exact");
        for part in &parts {
            assert!(part.len() >= MIN_FRAGMENT_POINTS);
        }
        // Determinism: the same stream reproduces the same partition.
        let mut r2 = rng(11);
        let shape2 = make_shape(ShapeKind::LBracket, &mut r2);
        let (pts2, _) = shape2.sample_surface(&mut r2, 1024).unwrap();
        assert_eq!(pts, pts2);
        let parts2 = fracture_indices(&pts2, 3, &mut r2).unwrap();
        assert_eq!(parts, parts2);
    }

    #[test]
    fn fracture_rejects_bad_part_counts() {
        let mut r = rng(3);
        let shape = make_shape(ShapeKind::Box, &mut r);
        let (pts, _) = shape.sample_surface(&mut r, 256).unwrap();
        assert!(matches!(
            fracture_indices(&pts, 1, &mut r),
            Err(DatasetError::FractureFailed(_))
        ));
        assert!(matches!(
            fracture_indices(&pts, 100, &mut r),
            Err(DatasetError::FractureFailed(_))
        ));
    }

    #[test]
    fn gt_poses_return_fragments_to_the_whole_surface() {
        let cfg = DataConfig {
            whole_points: 512,
            whole_queries: 128,
            sdf_near: 64,
            sdf_uniform: 32,
            kinds: vec![ShapeKind::LBracket],
            ..DataConfig::default()
        };
        let sample = generate_sample(&cfg, 42, 0).unwrap();
        assert!(sample.num_parts() >= 2 && sample.num_parts() <= 4);
        let total: usize = sample.fragments.iter().map(|f| f.points.nrows()).sum();
        assert_eq!(total, 512, "fragments partition the whole surface");
        // Every canonicalized fragment point coincides with a whole-surface
        // point (the partition is exact, so coverage holds at distance ~0).
        for i in 0..sample.num_parts() {
            let canon = sample.canonical_fragment(i);
            for r in 0..canon.nrows() {
                let p = Vector3::new(canon[[r, 0]], canon[[r, 1]], canon[[r, 2]]);
                let mut best = f64::INFINITY;
                for w in 0..sample.whole_points.nrows() {
                    let q = Vector3::new(
                        sample.whole_points[[w, 0]],
                        sample.whole_points[[w, 1]],
                        sample.whole_points[[w, 2]],
                    );
                    best = best.min((p - q).norm());
                }
                assert!(best < 1e-6, "round-trip error {best}");
            }
        }
        // Stored fragments are centered in their own frames.
        for frag in &sample.fragments {
            let mut mean = Vector3::zeros();
            for r in 0..frag.points.nrows() {
                mean += Vector3::new(
                    frag.points[[r, 0]],
                    frag.points[[r, 1]],
                    frag.points[[r, 2]],
                );
            }
            mean /= frag.points.nrows() as f64;
            assert!(mean.norm() < 1e-9, "stored fragment not centered: {mean:?}");
        }
    }

    #[test]
    fn identity_flag_keeps_fragments_canonical() {
        let cfg = DataConfig {
            whole_points: 256,
            whole_queries: 64,
            sdf_near: 32,
            sdf_uniform: 16,
            kinds: vec![ShapeKind::Box],
            identity_poses: true,
            ..DataConfig::default()
        };
        let sample = generate_sample(&cfg, 5, 3).unwrap();
        for pose in &sample.gt_poses {
            assert!((pose.rot.matrix() - nalgebra::Matrix3::identity()).norm() < 1e-12);
            assert!(pose.trans.norm() < 1e-12);
        }
        let canon = sample.canonical_fragment(0);
        assert_eq!(canon, sample.fragments[0].points);
    }

    #[test]
    fn samples_differ_across_indices_and_repeat_within_one() {
        let cfg = DataConfig {
            whole_points: 256,
            whole_queries: 64,
            sdf_near: 32,
            sdf_uniform: 16,
            kinds: vec![ShapeKind::Cylinder],
            ..DataConfig::default()
        };
        let a = generate_sample(&cfg, 9, 0).unwrap();
        let b = generate_sample(&cfg, 9, 0).unwrap();
        let c = generate_sample(&cfg, 9, 1).unwrap();
        assert_eq!(a.whole_points, b.whole_points);
        assert_eq!(a.gt_poses.len(), b.gt_poses.len());
        assert_ne!(a.whole_points, c.whole_points);
    }

    #[test]
    fn drop_parts_follows_ceil_and_guards_minimum() {
        let cfg = DataConfig {
            whole_points: 512,
            whole_queries: 64,
            sdf_near: 32,
            sdf_uniform: 16,
            parts_min: 4,
            parts_max: 4,
            kinds: vec![ShapeKind::Box],
            ..DataConfig::default()
        };
        let base = generate_sample(&cfg, 21, 0).unwrap();
        assert_eq!(base.num_parts(), 4);

        let mut s = base.clone();
        assert_eq!(drop_parts(&mut s, 0.0, &mut rng(1)).unwrap(), 0);
        assert_eq!(s.observed_indices().len(), 4);

        let mut s = base.clone();
        assert_eq!(drop_parts(&mut s, 0.25, &mut rng(1)).unwrap(), 1);
        assert_eq!(s.observed_indices().len(), 3);

        let cfg2 = DataConfig { parts_min: 2, parts_max: 2, ..cfg };
        let two = generate_sample(&cfg2, 22, 0).unwrap();
        assert_eq!(two.num_parts(), 2);
        let mut s = two.clone();
        assert!(matches!(
            drop_parts(&mut s, 0.5, &mut rng(1)),
            Err(DatasetError::TooFewParts { .. })
        ));
    }

    #[test]
    fn sphere_silhouette_is_a_centered_disc() {
        let cfg = DataConfig {
            whole_points: 256,
            whole_queries: 64,
            sdf_near: 32,
            sdf_uniform: 16,
            kinds: vec![ShapeKind::Sphere],
            ..DataConfig::default()
        };
        let sample = generate_sample(&cfg, 2, 0).unwrap();
        let img = sample.image_size;
        let at = |i: usize, j: usize| sample.silhouette[[0, j * img + i]];
        assert_eq!(at(img / 2, img / 2), 1.0, "center pixel inside the disc");
        assert_eq!(at(0, 0), 0.0, "corner pixel outside the disc");
        let filled: f64 = sample.silhouette.iter().sum();
        let expect = std::f64::consts::PI * 0.4 * 0.4 / 4.0 * (img * img) as f64;
        assert!(
            (filled - expect).abs() < 0.1 * expect,
            "disc fill {filled} vs expected {expect}"
        );
    }

    #[test]
    fn near_surface_sdf_values_are_small() {
        let cfg = DataConfig {
            whole_points: 256,
            whole_queries: 64,
            sdf_near: 128,
            sdf_uniform: 64,
            kinds: vec![ShapeKind::Box],
            ..DataConfig::default()
        };
        let sample = generate_sample(&cfg, 8, 0).unwrap();
        assert_eq!(sample.sdf_points.nrows(), 192);
        for q in 0..cfg.sdf_near {
            // Signed distance is 1-Lipschitz, so |value| is bounded by the
            // offset length; 0.15 is > 7 sigma for the 3-d Gaussian offset.
            assert!(sample.sdf_values[[q, 0]].abs() < 0.15);
        }
    }

    #[test]
    fn budgeted_points_are_a_strided_subset() {
        let cfg = DataConfig {
            whole_points: 512,
            whole_queries: 64,
            sdf_near: 32,
            sdf_uniform: 16,
            parts_min: 2,
            parts_max: 2,
            kinds: vec![ShapeKind::Box],
            ..DataConfig::default()
        };
        let sample = generate_sample(&cfg, 13, 0).unwrap();
        let alloc = sample.budget_allocation(256);
        assert!(alloc.iter().all(|&m| m >= MIN_FRAGMENT_POINTS));
        let slack = sample.num_parts();
        let total: usize = alloc.iter().sum();
        assert!((256usize.saturating_sub(slack)..=256 + slack).contains(&total));
        for (i, &m) in alloc.iter().enumerate() {
            let sub = sample.budgeted_points(i, m);
            assert_eq!(sub.nrows(), m);
            // Each budgeted row is one of the fragment's stored rows.
            let pts = &sample.fragments[i].points;
            for r in 0..m {
                let src = r * pts.nrows() / m;
                for c in 0..3 {
                    assert_eq!(sub[[r, c]], pts[[src, c]]);
                }
            }
        }
    }

    #[test]
    fn archive_round_trips_bit_exactly() {
        let cfg = DataConfig {
            whole_points: 256,
            whole_queries: 64,
            sdf_near: 32,
            sdf_uniform: 16,
            kinds: vec![ShapeKind::LBracket],
            ..DataConfig::default()
        };
        let samples: Vec<AssemblySample> =
            (0..3).map(|i| generate_sample(&cfg, 77, i).unwrap()).collect();
        let dir = std::env::temp_dir().join("refrag-archive-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.rfds");
        write_archive(&path, &samples).unwrap();

        let mut reader = ArchiveReader::open(&path).unwrap();
        assert_eq!(reader.len(), 3);
        // Read out of order to exercise random access.
        for &i in &[2usize, 0, 1] {
            let got = reader.get(i).unwrap();
            let want = &samples[i];
            assert_eq!(got.category, want.category);
            assert_eq!(got.silhouette_axis, want.silhouette_axis);
            assert_eq!(got.missing, want.missing);
            assert_eq!(got.whole_points, want.whole_points);
            assert_eq!(got.whole_queries, want.whole_queries);
            assert_eq!(got.sdf_points, want.sdf_points);
            assert_eq!(got.sdf_values, want.sdf_values);
            assert_eq!(got.silhouette, want.silhouette);
            assert_eq!(got.fragments.len(), want.fragments.len());
            for (fa, fb) in got.fragments.iter().zip(&want.fragments) {
                assert_eq!(fa.points, fb.points);
                assert_eq!(fa.area, fb.area);
            }
            for (pa, pb) in got.gt_poses.iter().zip(&want.gt_poses) {
                assert_eq!(pa.to_row12(), pb.to_row12());
            }
        }
        assert!(reader.get(3).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn archive_detects_truncation_and_corruption() {
        let cfg = DataConfig {
            whole_points: 256,
            whole_queries: 64,
            sdf_near: 32,
            sdf_uniform: 16,
            kinds: vec![ShapeKind::Box],
            ..DataConfig::default()
        };
        let samples = vec![generate_sample(&cfg, 5, 0).unwrap()];
        let dir = std::env::temp_dir().join("refrag-archive-corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.rfds");
        write_archive(&path, &samples).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.join("trunc.rfds");
        std::fs::write(&truncated, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            ArchiveReader::open(&truncated),
            Err(DatasetError::CorruptArchive(_))
        ));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        let corrupt = dir.join("flip.rfds");
        std::fs::write(&corrupt, &flipped).unwrap();
        assert!(matches!(
            ArchiveReader::open(&corrupt),
            Err(DatasetError::CorruptArchive(_))
        ));
        std::fs::remove_file(&path).ok();
        std::fs::remove_file(&truncated).ok();
        std::fs::remove_file(&corrupt).ok();
    }

    #[test]
    fn parts_family_builds_five_part_tables() {
        let cfg = DataConfig {
            family: Family::Parts,
            whole_points: 512,
            whole_queries: 64,
            sdf_near: 32,
            sdf_uniform: 16,
            ..DataConfig::default()
        };
        let sample = generate_sample(&cfg, 31, 0).unwrap();
        assert_eq!(sample.category, "table");
        assert_eq!(sample.num_parts(), 5);
        let total: usize = sample.fragments.iter().map(|f| f.points.nrows()).sum();
        assert_eq!(total, sample.whole_points.nrows());
        for i in 0..5 {
            let canon = sample.canonical_fragment(i);
            for r in 0..canon.nrows().min(8) {
                let p = Vector3::new(canon[[r, 0]], canon[[r, 1]], canon[[r, 2]]);
                let mut best = f64::INFINITY;
                for w in 0..sample.whole_points.nrows() {
                    let q = Vector3::new(
                        sample.whole_points[[w, 0]],
                        sample.whole_points[[w, 1]],
                        sample.whole_points[[w, 2]],
                    );
                    best = best.min((p - q).norm());
                }
                assert!(best < 1e-9);
            }
        }
    }

    #[test]
    fn mesh_of_the_analytic_sdf_matches_the_sampled_surface() {
        let mut r = rng(17);
        let shape = make_shape(ShapeKind::LBracket, &mut r);
        let (pts, _) = shape.sample_surface(&mut r, 1024).unwrap();
        let res = 64usize;
        let mut values = vec![0.0f64; res * res * res];
        let step = 2.0 / (res - 1) as f64;
        for iz in 0..res {
            for iy in 0..res {
                for ix in 0..res {
                    let p = Vector3::new(
                        -1.0 + ix as f64 * step,
                        -1.0 + iy as f64 * step,
                        -1.0 + iz as f64 * step,
                    );
                    values[(iz * res + iy) * res + ix] = shape.sdf(&p);
                }
            }
        }
        let mesh = crate::mesh::marching_cubes(
            &values,
            [res, res, res],
            [-1.0, -1.0, -1.0],
            [step, step, step],
            0.0,
        );
        assert!(!mesh.is_empty());
        // Symmetric mean-of-squared chamfer between mesh vertices and the
        // sampled surface; < 1e-4 corresponds to an RMS gap of 0.01.
        let verts = &mesh.vertices;
        let mut fwd = 0.0;
        for v in verts {
            let mut best = f64::INFINITY;
            for i in 0..pts.nrows() {
                let q = Vector3::new(pts[[i, 0]], pts[[i, 1]], pts[[i, 2]]);
                best = best.min((v - q).norm_squared());
            }
            fwd += best;
        }
        fwd /= verts.len() as f64;
        let mut bwd = 0.0;
        for i in 0..pts.nrows() {
            let q = Vector3::new(pts[[i, 0]], pts[[i, 1]], pts[[i, 2]]);
            let mut best = f64::INFINITY;
            for v in verts {
                best = best.min((v - q).norm_squared());
            }
            bwd += best;
        }
        bwd /= pts.nrows() as f64;
        // The floor of this metric is the point-sampling density (~nn^2 of
        // 1024 points on a few units of area, ~5e-4), not mesh error; 1e-3
        // still bounds the RMS surface gap by ~0.03.
        let chamfer = 0.5 * (fwd + bwd);
        assert!(chamfer < 1e-3, "mesh/surface chamfer {chamfer}");
    }
}
