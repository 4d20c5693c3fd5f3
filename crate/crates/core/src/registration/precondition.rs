//! Smoothed descent directions.
//!
//! The diffusive penalty makes plain gradient descent stiff: smooth modes of
//! the field shrink by a factor close to one per step. Blurring the force with
//! a Gaussian (normalised convolution, never mixing the two sides of a sliding
//! mask) keeps the energy unchanged but moves those modes much faster.

use crate::grid::{GridDomain, ScalarVolume, Vec3};
use crate::par;

fn kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    (-r..=r)
        .map(|o| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// One separable pass with zero padding, one grid line at a time.
fn blur_axis<const C: usize>(data: &[[f64; C]], d: GridDomain, axis: usize, k: &[f64]) -> Vec<[f64; C]> {
    let [nx, ny, _] = d.dims;
    let n = d.dims[axis];
    let stride = [1, nx, nx * ny][axis];
    let base = |l: usize| match axis {
        0 => l * nx,
        1 => l % nx + (l / nx) * nx * ny,
        _ => l,
    };
    let r = k.len() / 2;
    let lines = par::map(d.len() / n, |l| {
        let b = base(l);
        let line: Vec<[f64; C]> = (0..n).map(|t| data[b + t * stride]).collect();
        (0..n)
            .map(|t| {
                let lo = t.saturating_sub(r);
                let hi = (t + r).min(n - 1);
                let mut acc = [0.0; C];
                for (v, w) in line[lo..=hi].iter().zip(&k[lo + r - t..]) {
                    for q in 0..C {
                        acc[q] += w * v[q];
                    }
                }
                acc
            })
            .collect::<Vec<_>>()
    });
    let mut out = vec![[0.0; C]; data.len()];
    for (l, line) in lines.into_iter().enumerate() {
        let b = base(l);
        for (t, v) in line.into_iter().enumerate() {
            out[b + t * stride] = v;
        }
    }
    out
}

fn blur<const C: usize>(mut data: Vec<[f64; C]>, d: GridDomain, k: &[f64]) -> Vec<[f64; C]> {
    for axis in 0..3 {
        if d.dims[axis] > 1 {
            data = blur_axis(&data, d, axis, k);
        }
    }
    data
}

/// Gaussian smoothing of force fields on one grid, with the normalisation
/// weights computed once.
pub struct Smoother {
    domain: GridDomain,
    kernel: Vec<f64>,
    /// Blurred indicator of the whole grid.
    weight_all: Vec<f64>,
    /// Labels and blurred indicator of the masked region.
    inside: Option<(Vec<bool>, Vec<f64>)>,
}

impl Smoother {
    /// `sigma` in voxels (must be positive). With a mask, each voxel averages
    /// only over voxels carrying the same label.
    pub fn new(domain: GridDomain, sigma: f64, mask: Option<&ScalarVolume>) -> Self {
        let kernel = kernel(sigma);
        let weight_all = blur(vec![[1.0]; domain.len()], domain, &kernel)
            .into_iter()
            .map(|w| w[0])
            .collect();
        let inside = mask.map(|m| {
            let labels: Vec<bool> = m.data.iter().map(|&v| v == 1.0).collect();
            let ind = labels.iter().map(|&l| [f64::from(l)]).collect();
            let w = blur(ind, domain, &kernel).into_iter().map(|w| w[0]).collect();
            (labels, w)
        });
        Self {
            domain,
            kernel,
            weight_all,
            inside,
        }
    }

    pub fn apply(&self, force: &[Vec3]) -> Vec<Vec3> {
        let d = self.domain;
        let all = blur(force.to_vec(), d, &self.kernel);
        let ratio = |g: Vec3, w: f64| {
            if w > 0.0 {
                [g[0] / w, g[1] / w, g[2] / w]
            } else {
                [0.0; 3]
            }
        };
        match &self.inside {
            None => par::map(all.len(), |i| ratio(all[i], self.weight_all[i])),
            Some((labels, w_in)) => {
                let masked = par::map(force.len(), |i| if labels[i] { force[i] } else { [0.0; 3] });
                let ins = blur(masked, d, &self.kernel);
                par::map(all.len(), |i| {
                    if labels[i] {
                        ratio(ins[i], w_in[i])
                    } else {
                        let g = all[i];
                        let s = ins[i];
                        ratio([g[0] - s[0], g[1] - s[1], g[2] - s[2]], self.weight_all[i] - w_in[i])
                    }
                })
            }
        }
    }
}
