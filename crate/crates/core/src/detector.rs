//! Difference-of-Gaussians scale space and 3D extremum detection.

use nalgebra::{Matrix3, Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Octaves are built only while every axis is longer than this many voxels.
pub const MIN_OCTAVE_AXIS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleSpaceParams {
    /// Blur of the first Gaussian level, in voxels.
    pub base_sigma: f64,
    pub scales_per_octave: usize,
    /// `None` keeps halving until an axis drops to `MIN_OCTAVE_AXIS`.
    pub max_octaves: Option<usize>,
    /// Minimum |DoG| after refinement, on [0,1]-normalized intensities.
    pub contrast_threshold: f64,
    /// Maximum ratio between the largest and smallest spatial Hessian
    /// eigenvalue magnitudes.
    pub edge_ratio: f64,
}

impl Default for ScaleSpaceParams {
    fn default() -> Self {
        ScaleSpaceParams {
            base_sigma: 1.6,
            scales_per_octave: 3,
            max_octaves: None,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
        }
    }
}

impl ScaleSpaceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_sigma > 0.0) {
            return Err(Error::Config("base_sigma must be > 0".into()));
        }
        if self.scales_per_octave < 1 {
            return Err(Error::Config("scales_per_octave must be >= 1".into()));
        }
        if !(self.edge_ratio > 1.0) {
            return Err(Error::Config("edge_ratio must be > 1".into()));
        }
        if !(self.contrast_threshold >= 0.0) {
            return Err(Error::Config("contrast_threshold must be >= 0".into()));
        }
        Ok(())
    }

    fn step(&self) -> f64 {
        2f64.powf(1.0 / self.scales_per_octave as f64)
    }

    /// Absolute blur of Gaussian level `level` in octave `octave`.
    pub fn gaussian_sigma(&self, octave: usize, level: f64) -> f64 {
        self.base_sigma * 2f64.powi(octave as i32) * self.step().powf(level)
    }

    /// Absolute scale of DoG level `level`: the geometric mean of the two
    /// Gaussian levels it is the difference of.
    pub fn dog_sigma(&self, octave: usize, level: f64) -> f64 {
        self.gaussian_sigma(octave, level + 0.5)
    }
}

/// A detected scale-space extremum, in original-volume voxel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawKeypoint {
    pub pos: [f64; 3],
    pub sigma: f64,
    pub dog_value: f64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter().map(|x| (x / sum) as f32).collect()
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn convolve_axis(src: &[f32], dims: [usize; 3], axis: usize, kernel: &[f32]) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let radius = (kernel.len() / 2) as i64;
    let slice = nx * ny;
    let mut out = vec![0f32; src.len()];
    out.par_chunks_mut(slice).enumerate().for_each(|(z, plane)| match axis {
        0 => {
            for y in 0..ny {
                let row = &src[z * slice + y * nx..z * slice + (y + 1) * nx];
                let dst = &mut plane[y * nx..(y + 1) * nx];
                for (x, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0f32;
                    for (k, &w) in kernel.iter().enumerate() {
                        acc += w * row[reflect(x as i64 + k as i64 - radius, nx)];
                    }
                    *d = acc;
                }
            }
        }
        1 => {
            for y in 0..ny {
                let dst = &mut plane[y * nx..(y + 1) * nx];
                for (k, &w) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + k as i64 - radius, ny);
                    let row = &src[z * slice + sy * nx..z * slice + (sy + 1) * nx];
                    for (d, &s) in dst.iter_mut().zip(row) {
                        *d += w * s;
                    }
                }
            }
        }
        _ => {
            for (k, &w) in kernel.iter().enumerate() {
                let sz = reflect(z as i64 + k as i64 - radius, nz);
                let src_plane = &src[sz * slice..(sz + 1) * slice];
                for (d, &s) in plane.iter_mut().zip(src_plane) {
                    *d += w * s;
                }
            }
        }
    });
    out
}

fn blur_data(data: &[f32], dims: [usize; 3], sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let a = convolve_axis(data, dims, 0, &kernel);
    let b = convolve_axis(&a, dims, 1, &kernel);
    convolve_axis(&b, dims, 2, &kernel)
}

/// Separable Gaussian blur with a truncated kernel of radius `ceil(3 sigma)`
/// and reflected borders. `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Volume {
    v.with_data(blur_data(v.data(), v.dims(), sigma), v.dims())
}

fn downsample(data: &[f32], dims: [usize; 3]) -> (Vec<f32>, [usize; 3]) {
    let nd = [dims[0].div_ceil(2), dims[1].div_ceil(2), dims[2].div_ceil(2)];
    let mut out = Vec::with_capacity(nd[0] * nd[1] * nd[2]);
    for z in 0..nd[2] {
        for y in 0..nd[1] {
            let base = 2 * y * dims[0] + 2 * z * dims[0] * dims[1];
            out.extend((0..nd[0]).map(|x| data[base + 2 * x]));
        }
    }
    (out, nd)
}

/// One octave of the scale space. Level volumes share `dims`.
#[derive(Debug, Clone)]
pub struct Octave {
    pub index: usize,
    pub dims: [usize; 3],
    pub gaussians: Vec<Vec<f32>>,
    pub dogs: Vec<Vec<f32>>,
}

impl Octave {
    #[inline]
    fn at(&self, level: usize, x: usize, y: usize, z: usize) -> f32 {
        self.dogs[level][x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

#[derive(Debug, Clone)]
pub struct DogPyramid {
    pub params: ScaleSpaceParams,
    pub octaves: Vec<Octave>,
}

impl DogPyramid {
    /// Absolute sigma for every (octave, DoG level), in pyramid order.
    pub fn level_sigmas(&self) -> Vec<(usize, usize, f64)> {
        self.octaves
            .iter()
            .flat_map(|o| {
                (0..o.dogs.len()).map(move |l| (o.index, l, self.params.dog_sigma(o.index, l as f64)))
            })
            .collect()
    }
}

/// Builds `scales_per_octave + 3` Gaussian levels and their successive
/// differences per octave, halving resolution between octaves.
pub fn build_dog_pyramid(v: &Volume, p: &ScaleSpaceParams) -> DogPyramid {
    let s = p.scales_per_octave;
    let levels = s + 3;
    let k = p.step();
    let mut octaves = Vec::new();
    let mut dims = v.dims();
    let mut first = blur_data(v.data(), dims, p.base_sigma);
    let mut index = 0;
    while dims.iter().all(|&d| d > MIN_OCTAVE_AXIS) && p.max_octaves.map_or(true, |m| index < m)
    {
        let mut gaussians = Vec::with_capacity(levels);
        gaussians.push(first);
        for i in 1..levels {
            let prev = p.base_sigma * k.powi(i as i32 - 1);
            let cur = prev * k;
            let inc = (cur * cur - prev * prev).sqrt();
            let next = blur_data(&gaussians[i - 1], dims, inc);
            gaussians.push(next);
        }
        let dogs = gaussians
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
            .collect();
        let (next, next_dims) = downsample(&gaussians[s], dims);
        octaves.push(Octave {
            index,
            dims,
            gaussians,
            dogs,
        });
        first = next;
        dims = next_dims;
        index += 1;
    }
    DogPyramid {
        params: p.clone(),
        octaves,
    }
}

fn is_extremum(o: &Octave, l: usize, x: usize, y: usize, z: usize) -> bool {
    let v = o.at(l, x, y, z);
    let (mut is_max, mut is_min) = (true, true);
    for dl in 0..3 {
        let ll = l + dl - 1;
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let same = dl == 1 && dx == 1 && dy == 1 && dz == 1;
                    if same {
                        continue;
                    }
                    let n = o.at(ll, x + dx - 1, y + dy - 1, z + dz - 1);
                    if dl == 1 {
                        is_max &= v > n;
                        is_min &= v < n;
                    } else {
                        is_max &= v >= n;
                        is_min &= v <= n;
                    }
                    if !is_max && !is_min {
                        return false;
                    }
                }
            }
        }
    }
    is_max != is_min
}

/// Spatial 3x3 Hessian at an integer DoG sample.
fn spatial_hessian(o: &Octave, l: usize, c: [usize; 3]) -> Matrix3<f64> {
    let f = |d: [i64; 3]| {
        o.at(
            l,
            (c[0] as i64 + d[0]) as usize,
            (c[1] as i64 + d[1]) as usize,
            (c[2] as i64 + d[2]) as usize,
        ) as f64
    };
    let v = f([0, 0, 0]);
    let mut h = Matrix3::zeros();
    for a in 0..3 {
        let mut e = [0i64; 3];
        e[a] = 1;
        let m = [-e[0], -e[1], -e[2]];
        h[(a, a)] = f(e) + f(m) - 2.0 * v;
        for b in a + 1..3 {
            let mut pp = [0i64; 3];
            pp[a] = 1;
            pp[b] = 1;
            let mut pm = pp;
            pm[b] = -1;
            let mut mp = pp;
            mp[a] = -1;
            let mut mm = [0i64; 3];
            mm[a] = -1;
            mm[b] = -1;
            let x = (f(pp) - f(pm) - f(mp) + f(mm)) / 4.0;
            h[(a, b)] = x;
            h[(b, a)] = x;
        }
    }
    h
}

fn passes_edge_test(h: &Matrix3<f64>, edge_ratio: f64) -> bool {
    let eig = h.symmetric_eigenvalues();
    let all_pos = eig.iter().all(|&e| e > 0.0);
    let all_neg = eig.iter().all(|&e| e < 0.0);
    if !(all_pos || all_neg) {
        return false;
    }
    let mags: Vec<f64> = eig.iter().map(|e| e.abs()).collect();
    let max = mags.iter().cloned().fold(0.0, f64::max);
    let min = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min <= edge_ratio
}

/// One Newton step on the 4D (x, y, z, scale) quadratic model, each offset
/// component clamped to [-0.5, 0.5]. Returns (offset, refined value).
fn refine(o: &Octave, l: usize, c: [usize; 3]) -> Option<([f64; 4], f64)> {
    let f = |d: [i64; 4]| {
        o.at(
            (l as i64 + d[3]) as usize,
            (c[0] as i64 + d[0]) as usize,
            (c[1] as i64 + d[1]) as usize,
            (c[2] as i64 + d[2]) as usize,
        ) as f64
    };
    let v = f([0; 4]);
    let unit = |a: usize, s: i64| {
        let mut d = [0i64; 4];
        d[a] = s;
        d
    };
    let mut g = Vector4::zeros();
    let mut h = Matrix4::zeros();
    for a in 0..4 {
        g[a] = (f(unit(a, 1)) - f(unit(a, -1))) / 2.0;
        h[(a, a)] = f(unit(a, 1)) + f(unit(a, -1)) - 2.0 * v;
        for b in a + 1..4 {
            let mut pp = [0i64; 4];
            pp[a] = 1;
            pp[b] = 1;
            let mut pm = pp;
            pm[b] = -1;
            let mut mp = pp;
            mp[a] = -1;
            let mut mm = [0i64; 4];
            mm[a] = -1;
            mm[b] = -1;
            let x = (f(pp) - f(pm) - f(mp) + f(mm)) / 4.0;
            h[(a, b)] = x;
            h[(b, a)] = x;
        }
    }
    let step = h.lu().solve(&(-g))?;
    if step.iter().any(|s| !s.is_finite()) {
        return None;
    }
    let off = [
        step[0].clamp(-0.5, 0.5),
        step[1].clamp(-0.5, 0.5),
        step[2].clamp(-0.5, 0.5),
        step[3].clamp(-0.5, 0.5),
    ];
    let refined = v + 0.5 * (g[0] * off[0] + g[1] * off[1] + g[2] * off[2] + g[3] * off[3]);
    Some((off, refined))
}

fn octave_keypoints(o: &Octave, p: &ScaleSpaceParams, full_dims: [usize; 3]) -> Vec<RawKeypoint> {
    let [nx, ny, nz] = o.dims;
    let scale = 2f64.powi(o.index as i32);
    let prefilter = (0.5 * p.contrast_threshold) as f32;
    (1..=p.scales_per_octave)
        .flat_map(|l| (1..nz - 1).map(move |z| (l, z)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .flat_map_iter(|(l, z)| {
            let mut found = Vec::new();
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    if o.at(l, x, y, z).abs() < prefilter || !is_extremum(o, l, x, y, z) {
                        continue;
                    }
                    let c = [x, y, z];
                    if !passes_edge_test(&spatial_hessian(o, l, c), p.edge_ratio) {
                        continue;
                    }
                    let Some((off, value)) = refine(o, l, c) else {
                        continue;
                    };
                    if value.abs() < p.contrast_threshold {
                        continue;
                    }
                    let mut pos = [0.0; 3];
                    for a in 0..3 {
                        pos[a] = ((c[a] as f64 + off[a]) * scale).clamp(0.0, (full_dims[a] - 1) as f64);
                    }
                    found.push(RawKeypoint {
                        pos,
                        sigma: p.dog_sigma(o.index, l as f64 + off[3]),
                        dog_value: value,
                    });
                }
            }
            found
        })
        .collect()
}

/// Detects DoG scale-space extrema of a [0,1]-normalized volume, sorted by
/// descending |DoG| response.
pub fn detect(v: &Volume, p: &ScaleSpaceParams) -> Vec<RawKeypoint> {
    let pyr = build_dog_pyramid(v, p);
    detect_in_pyramid(&pyr, v.dims())
}

pub fn detect_in_pyramid(pyr: &DogPyramid, dims: [usize; 3]) -> Vec<RawKeypoint> {
    let mut kps: Vec<RawKeypoint> = pyr
        .octaves
        .iter()
        .flat_map(|o| octave_keypoints(o, &pyr.params, dims))
        .collect();
    kps.sort_by(|a, b| {
        b.dog_value
            .abs()
            .total_cmp(&a.dog_value.abs())
            .then_with(|| a.pos.partial_cmp(&b.pos).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| a.sigma.total_cmp(&b.sigma))
    });
    kps
}
