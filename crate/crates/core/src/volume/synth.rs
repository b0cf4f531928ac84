//! Deterministic synthetic volumes. Every generator is a pure function of
//! its arguments: same seed, same bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{normalize, Volume};
use crate::detector::gaussian_blur;

/// An isotropic Gaussian bump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub sigma: f64,
    pub amplitude: f64,
}

impl Blob {
    pub fn new(center: [f64; 3], sigma: f64, amplitude: f64) -> Self {
        assert!(sigma > 0.0, "blob sigma must be positive");
        Blob {
            center,
            sigma,
            amplitude,
        }
    }
}

/// Smooth pseudo-random background added under the blobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Background {
    pub amplitude: f64,
    /// Correlation length of the noise, in voxels.
    pub smoothness: f64,
}

fn white_noise(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Sum of Gaussian bumps on a grid plus an optional seeded smooth background.
pub fn synth_blobs(
    seed: u64,
    dims: [usize; 3],
    blobs: &[Blob],
    background: Option<Background>,
) -> Volume {
    let n = dims[0] * dims[1] * dims[2];
    let mut data = vec![0f32; n];
    for (i, d) in data.iter_mut().enumerate() {
        let x = (i % dims[0]) as f64;
        let y = ((i / dims[0]) % dims[1]) as f64;
        let z = (i / (dims[0] * dims[1])) as f64;
        let mut acc = 0f64;
        for b in blobs {
            let r2 = (x - b.center[0]).powi(2) + (y - b.center[1]).powi(2) + (z - b.center[2]).powi(2);
            acc += b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        *d = acc as f32;
    }
    let mut v = Volume::new(format!("blobs-{seed}"), dims, [1.0; 3], data).expect("valid dims");
    if let Some(bg) = background {
        let tex = smooth_noise(seed, dims, bg.smoothness);
        for (d, t) in v.data_mut().iter_mut().zip(tex.data()) {
            *d += (bg.amplitude as f32) * t;
        }
    }
    v
}

/// Band-limited random texture normalized to [0, 1]: white noise blurred at
/// `smoothness` voxels.
pub fn smooth_noise(seed: u64, dims: [usize; 3], smoothness: f64) -> Volume {
    let n = dims[0] * dims[1] * dims[2];
    let v = Volume::new(format!("noise-{seed}"), dims, [1.0; 3], white_noise(seed, n))
        .expect("valid dims");
    normalize(&gaussian_blur(&v, smoothness))
}

/// Piecewise-constant "tissue" texture standing in for anatomy: a coarse and
/// a fine random field are summed and quantized into four intensity classes,
/// then lightly smoothed so boundaries are sharp but band-limited.
/// Normalized to [0, 1].
pub fn textured(seed: u64, dims: [usize; 3]) -> Volume {
    quantize_tissue(&tissue_field(seed, dims), dims)
}

fn tissue_field(seed: u64, dims: [usize; 3]) -> Vec<f32> {
    let coarse = smooth_noise(seed.wrapping_mul(2).wrapping_add(1), dims, 4.0);
    let fine = smooth_noise(seed.wrapping_mul(2).wrapping_add(2), dims, 2.0);
    coarse.data().iter().zip(fine.data()).map(|(c, f)| 0.7 * c + 0.3 * f).collect()
}

fn quantize_tissue(field: &[f32], dims: [usize; 3]) -> Volume {
    const LEVELS: [f32; 4] = [0.05, 0.35, 0.65, 0.95];
    let mut sorted = field.to_vec();
    sorted.sort_by(f32::total_cmp);
    let cut = |q: f64| sorted[((sorted.len() - 1) as f64 * q) as usize];
    let (t1, t2, t3) = (cut(0.25), cut(0.5), cut(0.75));
    let classes = field
        .iter()
        .map(|&x| {
            let i = (x > t1) as usize + (x > t2) as usize + (x > t3) as usize;
            LEVELS[i]
        })
        .collect();
    let v = Volume::new("tissue", dims, [1.0; 3], classes).expect("valid dims");
    normalize(&gaussian_blur(&v, 1.0))
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma`.
pub fn add_noise(v: &Volume, seed: u64, sigma: f64) -> Volume {
    let noise = white_noise(seed, v.data().len());
    let data = v
        .data()
        .iter()
        .zip(&noise)
        .map(|(x, e)| x + sigma as f32 * e)
        .collect();
    v.with_data(data, v.dims())
}

/// Nearest-voxel rotation by 90 degrees about the z axis:
/// `out(x', y', z) = in(y', nx-1-x', z)` so that a point (x, y) moves to
/// (ny-1-y, x).
pub fn rotate_z90(v: &Volume) -> Volume {
    let [nx, ny, nz] = v.dims();
    let nd = [ny, nx, nz];
    let mut data = vec![0f32; v.data().len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (xr, yr) = (ny - 1 - y, x);
                data[xr + nd[0] * (yr + nd[1] * z)] = v.get(x, y, z);
            }
        }
    }
    let sp = v.spacing();
    Volume::new(v.id(), nd, [sp[1], sp[0], sp[2]], data).expect("same voxel count")
}

/// Image of a point under [`rotate_z90`].
pub fn rotate_z90_point(p: [f64; 3], dims: [usize; 3]) -> [f64; 3] {
    [(dims[1] - 1) as f64 - p[1], p[0], p[2]]
}

/// A synthetic multi-subject dataset: each subject is a random texture,
/// each image of it a noisy, intensity-remapped acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub subjects: usize,
    pub images_per_subject: usize,
    pub dims: [usize; 3],
    pub noise_sigma: f64,
    /// Number of subjects whose last image receives a transposed-digit ID.
    pub id_errors: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            subjects: 50,
            images_per_subject: 2,
            dims: [64; 3],
            noise_sigma: 0.02,
            id_errors: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CohortImage {
    pub volume: Volume,
    pub true_subject: String,
    pub labeled_subject: String,
    pub database: String,
}

fn subject_code(i: usize) -> String {
    format!("sub-{i:04}")
}

impl CohortSpec {
    /// Image ids of the images whose label was corrupted.
    pub fn generate(&self) -> Vec<CohortImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.subjects * self.images_per_subject);
        let bad: Vec<usize> = {
            let mut idx: Vec<usize> = (0..self.subjects).collect();
            for i in 0..idx.len() {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(self.id_errors.min(self.subjects));
            idx
        };
        for s in 0..self.subjects {
            let anatomy = textured(self.seed ^ (0x5eed_0000 + s as u64 * 7919), self.dims);
            for r in 0..self.images_per_subject {
                let gamma: f64 = rng.gen_range(0.8..1.25);
                let noise_seed: u64 = rng.gen();
                let remapped = anatomy.map(|x| (x as f64).powf(gamma) as f32);
                let mut vol = normalize(&add_noise(&remapped, noise_seed, self.noise_sigma));
                let id = format!("img-{s:04}-{r}");
                vol.set_id(id);
                let truth = subject_code(s);
                let labeled = if r + 1 == self.images_per_subject && bad.contains(&s) {
                    // transposed digits, e.g. sub-0012 -> sub-2100; always unused
                    let mut t: Vec<char> = format!("{s:04}").chars().collect();
                    t.reverse();
                    format!("sub-x{}", t.into_iter().collect::<String>())
                } else {
                    truth.clone()
                };
                out.push(CohortImage {
                    volume: vol,
                    true_subject: truth,
                    labeled_subject: labeled,
                    database: "synth".into(),
                });
            }
        }
        out
    }
}
