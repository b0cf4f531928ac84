//! Orientation frames and 64-element rank-ordered gradient histograms.
//!
//! The local support of a keypoint is resampled on a regular grid aligned
//! with the keypoint frame. Each sample is the lower median of a small odd
//! voxel box around the nearest voxel, and the samples are replaced by their
//! dense rank within the patch before gradients are taken. Medians and ranks
//! commute with any strictly increasing intensity map, so frames, histograms
//! and descriptors are unchanged by such maps.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::detector::RawKeypoint;
use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DESCRIPTOR_LEN: usize = 64;

/// Grid cells per axis of the orientation window (radius 3 sigma).
const ORIENTATION_CELLS: usize = 12;
/// Grid cells per axis of the descriptor cube (side 4 sigma).
const DESCRIPTOR_CELLS: usize = 16;
const MAX_BOX_RADIUS: i64 = 2;

pub type Frame = [[f32; 3]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub pos: [f32; 3],
    pub sigma: f32,
    /// Rows are the local axes; right-handed.
    pub frame: Frame,
    pub dog_value: f32,
    pub descr: [u8; DESCRIPTOR_LEN],
}

/// The keypoint set of one image together with its identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    pub image_id: String,
    pub subject_id: String,
    pub keypoints: Vec<Keypoint>,
    pub source_dims: [u32; 3],
    pub source_voxel_bytes: u32,
}

impl Signature {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

pub fn cross_f32(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Builds a frame from its first two rows; the third is their cross product.
/// Stored signatures keep only two rows and rebuild the third with this.
pub fn complete_frame(r0: [f32; 3], r1: [f32; 3]) -> Frame {
    [r0, r1, cross_f32(r0, r1)]
}

/// Orthonormal within `tol` and right-handed.
pub fn is_rotation(f: &Frame, tol: f32) -> bool {
    let dot = |a: [f32; 3], b: [f32; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot(f[i], f[j]) - want).abs() > tol {
                return false;
            }
        }
    }
    let det = dot(f[0], cross_f32(f[1], f[2]));
    (det - 1.0).abs() <= tol
}

pub fn is_rank_permutation(d: &[u8; DESCRIPTOR_LEN]) -> bool {
    let mut seen = [false; DESCRIPTOR_LEN];
    for &r in d {
        if r as usize >= DESCRIPTOR_LEN || seen[r as usize] {
            return false;
        }
        seen[r as usize] = true;
    }
    true
}

/// Rank-equalized samples on an m^3 grid (m = cells + 2), x-fastest.
struct Patch {
    m: usize,
    spacing: f64,
    ranks: Vec<f32>,
}

impl Patch {
    fn sample(v: &Volume, centre: [f64; 3], axes: &[[f64; 3]; 3], cells: usize, spacing: f64) -> Result<Patch> {
        let m = cells + 2;
        let dims = v.dims();
        let half = (m - 1) as f64 / 2.0;
        let r = ((spacing / 2.0).floor() as i64).clamp(0, MAX_BOX_RADIUS);
        let mut values = Vec::with_capacity(m * m * m);
        let mut inside = 0usize;
        let mut scratch = Vec::with_capacity(((2 * r + 1) as usize).pow(3));
        for k in 0..m {
            for j in 0..m {
                for i in 0..m {
                    let u = [
                        (i as f64 - half) * spacing,
                        (j as f64 - half) * spacing,
                        (k as f64 - half) * spacing,
                    ];
                    let mut q = [0.0; 3];
                    for a in 0..3 {
                        q[a] = centre[a] + u[0] * axes[0][a] + u[1] * axes[1][a] + u[2] * axes[2][a];
                    }
                    if (0..3).all(|a| q[a] >= -0.5 && q[a] <= dims[a] as f64 - 0.5) {
                        inside += 1;
                    }
                    let c = [q[0].round() as i64, q[1].round() as i64, q[2].round() as i64];
                    let value = if r == 0 {
                        v.get_clamped(c[0], c[1], c[2])
                    } else {
                        scratch.clear();
                        for dz in -r..=r {
                            for dy in -r..=r {
                                for dx in -r..=r {
                                    scratch.push(v.get_clamped(c[0] + dx, c[1] + dy, c[2] + dz));
                                }
                            }
                        }
                        let mid = (scratch.len() - 1) / 2;
                        *scratch.select_nth_unstable_by(mid, f32::total_cmp).1
                    };
                    values.push(value);
                }
            }
        }
        if inside == 0 {
            return Err(Error::EmptySupport);
        }
        let mut levels = values.clone();
        levels.sort_by(f32::total_cmp);
        levels.dedup();
        let ranks = values
            .iter()
            .map(|x| levels.partition_point(|l| l < x) as f32)
            .collect();
        Ok(Patch { m, spacing, ranks })
    }

    /// Calls `f(offset, gradient)` for every interior sample; the offset is
    /// in voxel units along the patch axes, the gradient in patch axes.
    fn for_each_gradient(&self, mut f: impl FnMut([usize; 3], [f64; 3], [f64; 3])) {
        let m = self.m;
        let half = (m - 1) as f64 / 2.0;
        let at = |i: usize, j: usize, k: usize| self.ranks[i + m * (j + m * k)] as f64;
        for k in 1..m - 1 {
            for j in 1..m - 1 {
                for i in 1..m - 1 {
                    let g = [
                        (at(i + 1, j, k) - at(i - 1, j, k)) / 2.0,
                        (at(i, j + 1, k) - at(i, j - 1, k)) / 2.0,
                        (at(i, j, k + 1) - at(i, j, k - 1)) / 2.0,
                    ];
                    let u = [
                        (i as f64 - half) * self.spacing,
                        (j as f64 - half) * self.spacing,
                        (k as f64 - half) * self.spacing,
                    ];
                    f([i - 1, j - 1, k - 1], u, g);
                }
            }
        }
    }
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn weight(u: [f64; 3], sigma: f64) -> f64 {
    (-(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) / (2.0 * sigma * sigma)).exp()
}

/// Flips `e` so the weighted third moment of the gradients along it is
/// non-negative; exact symmetry falls back to making the largest component
/// positive.
fn orient_sign(e: Vector3<f64>, samples: &[(f64, Vector3<f64>)]) -> Vector3<f64> {
    let skew: f64 = samples.iter().map(|(w, g)| w * g.dot(&e).powi(3)).sum();
    let energy: f64 = samples.iter().map(|(w, g)| w * g.norm_squared().powf(1.5)).sum();
    if skew.abs() > 1e-9 * energy {
        return if skew < 0.0 { -e } else { e };
    }
    let imax = e.iamax();
    if e[imax] < 0.0 {
        -e
    } else {
        e
    }
}

fn principal_axis(m: &Matrix3<f64>) -> (Vector3<f64>, f64) {
    let eig = SymmetricEigen::new(*m);
    let i = eig.eigenvalues.imax();
    (eig.eigenvectors.column(i).into_owned(), eig.eigenvalues[i])
}

/// Canonical 3D orientation: primary axis along the Gaussian-weighted mean
/// gradient, secondary along the dominant gradient direction orthogonal to
/// it, third completing a right-handed frame. Rows of the result are axes.
pub fn assign_orientation(v: &Volume, k: &RawKeypoint) -> Result<[[f64; 3]; 3]> {
    let spacing = 6.0 * k.sigma / ORIENTATION_CELLS as f64;
    let patch = Patch::sample(v, k.pos, &IDENTITY, ORIENTATION_CELLS, spacing)?;
    let window = 1.5 * k.sigma;
    let mut samples = Vec::with_capacity(ORIENTATION_CELLS.pow(3));
    patch.for_each_gradient(|_, u, g| {
        samples.push((weight(u, window), Vector3::from(g)));
    });

    let energy: f64 = samples.iter().map(|(w, g)| w * g.norm_squared()).sum();
    if !(energy > 1e-12) {
        return Err(Error::DegenerateOrientation);
    }
    let mean: Vector3<f64> = samples.iter().map(|(w, g)| g * *w).sum();
    let abs_sum: f64 = samples.iter().map(|(w, g)| w * g.norm()).sum();
    let second: Matrix3<f64> = samples.iter().map(|(w, g)| g * g.transpose() * *w).sum();

    let e1 = if mean.norm() > 1e-3 * abs_sum {
        mean.normalize()
    } else {
        orient_sign(principal_axis(&second).0, &samples)
    };

    let perp: Vec<(f64, Vector3<f64>)> = samples
        .iter()
        .map(|(w, g)| (*w, g - e1 * g.dot(&e1)))
        .collect();
    let perp_second: Matrix3<f64> = perp.iter().map(|(w, g)| g * g.transpose() * *w).sum();
    let (cand, lambda) = principal_axis(&perp_second);
    let e2 = if lambda > 1e-9 * energy {
        let g = (cand - e1 * cand.dot(&e1)).normalize();
        orient_sign(g, &perp)
    } else {
        // gradients all parallel to e1: take the coordinate axis least
        // aligned with it
        let a = (0..3)
            .min_by(|&a, &b| e1[a].abs().total_cmp(&e1[b].abs()))
            .unwrap();
        let mut axis = Vector3::zeros();
        axis[a] = 1.0;
        (axis - e1 * axis.dot(&e1)).normalize()
    };
    let e3 = e1.cross(&e2);
    Ok([
        [e1[0], e1[1], e1[2]],
        [e2[0], e2[1], e2[2]],
        [e3[0], e3[1], e3[2]],
    ])
}

/// Octant of a frame-space gradient, with the magnitude split evenly across
/// both sides of any exactly-zero component.
fn accumulate_bins(g: [f64; 3], mass: f64, out: &mut [f64]) {
    for (b, slot) in out.iter_mut().enumerate().take(8) {
        let mut share = mass;
        for (a, &c) in g.iter().enumerate() {
            let negative = b >> a & 1 == 1;
            share *= if c == 0.0 {
                0.5
            } else if (c < 0.0) == negative {
                1.0
            } else {
                0.0
            };
        }
        *slot += share;
    }
}

/// Raw 64-bin histogram: 2x2x2 subregions (x fastest) of a 4-sigma cube in
/// the keypoint frame, each with 8 bins for the cube-diagonal directions
/// (bit a of the bin index set when component a is negative).
pub fn compute_descriptor(v: &Volume, k: &RawKeypoint, frame: &[[f64; 3]; 3]) -> Result<[f64; DESCRIPTOR_LEN]> {
    let spacing = 4.0 * k.sigma / DESCRIPTOR_CELLS as f64;
    let patch = Patch::sample(v, k.pos, frame, DESCRIPTOR_CELLS, spacing)?;
    let window = 2.0 * k.sigma;
    let half = DESCRIPTOR_CELLS / 2;
    let mut hist = [0f64; DESCRIPTOR_LEN];
    patch.for_each_gradient(|cell, u, g| {
        let mag = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if mag == 0.0 {
            return;
        }
        let sub = cell[0] / half + 2 * (cell[1] / half) + 4 * (cell[2] / half);
        accumulate_bins(g, mag * weight(u, window), &mut hist[sub * 8..sub * 8 + 8]);
    });
    Ok(hist)
}

/// Rank of each element in ascending order; ties go to the lower index.
pub fn rank_transform(h: &[f64; DESCRIPTOR_LEN]) -> [u8; DESCRIPTOR_LEN] {
    let mut order: Vec<usize> = (0..DESCRIPTOR_LEN).collect();
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]));
    let mut out = [0u8; DESCRIPTOR_LEN];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank as u8;
    }
    out
}

fn describe_one(v: &Volume, k: &RawKeypoint) -> Option<Keypoint> {
    let frame = assign_orientation(v, k).ok()?;
    let hist = compute_descriptor(v, k, &frame).ok()?;
    let descr = rank_transform(&hist);
    let f32_row = |r: [f64; 3]| [r[0] as f32, r[1] as f32, r[2] as f32];
    let frame = complete_frame(f32_row(frame[0]), f32_row(frame[1]));
    let kp = Keypoint {
        pos: [k.pos[0] as f32, k.pos[1] as f32, k.pos[2] as f32],
        sigma: k.sigma as f32,
        frame,
        dog_value: k.dog_value as f32,
        descr,
    };
    let finite = kp.pos.iter().chain(kp.frame.iter().flatten()).all(|x| x.is_finite())
        && kp.sigma.is_finite()
        && kp.dog_value.is_finite();
    if !finite || !is_rotation(&kp.frame, 1e-5) || !is_rank_permutation(&kp.descr) {
        log::warn!("dropping keypoint at {:?}: failed output invariants", k.pos);
        return None;
    }
    Some(kp)
}

/// Describes every raw keypoint; keypoints without a valid frame or support
/// are dropped, the rest keep their order.
pub fn describe(v: &Volume, raw: &[RawKeypoint]) -> Signature {
    let keypoints = raw.par_iter().filter_map(|k| describe_one(v, k)).collect();
    let d = v.dims();
    Signature {
        image_id: v.id().to_string(),
        subject_id: String::new(),
        keypoints,
        source_dims: [d[0] as u32, d[1] as u32, d[2] as u32],
        source_voxel_bytes: v.voxel_bytes(),
    }
}
