//! Image distances and their gradients with respect to the displacement.

use crate::error::{Error, Result};
use crate::grid::{add, scale, DisplacementField, GridDomain, ScalarVolume, Vec3};
use crate::par;

/// One pull-back sample of the moving image.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WarpSample {
    pub value: f64,
    /// Gradient (per mm) of the moving image's interpolant at the sample point.
    pub gradient: Vec3,
    /// False when the sample point fell outside the moving image.
    pub inside: bool,
}

/// A moving image pulled back onto the fixed grid, with the derivative
/// information the distance forces need.
#[derive(Clone, Debug)]
pub struct WarpedImage {
    pub domain: GridDomain,
    pub samples: Vec<WarpSample>,
}

impl WarpedImage {
    pub fn warp(moving: &ScalarVolume, field: &DisplacementField) -> Self {
        let d = field.domain;
        let samples = par::map(d.len(), |idx| {
            match moving.sample_with_gradient(add(d.position(idx), field.u[idx])) {
                Some((value, gradient)) => WarpSample {
                    value,
                    gradient,
                    inside: true,
                },
                None => WarpSample {
                    value: moving.background,
                    gradient: [0.0; 3],
                    inside: false,
                },
            }
        });
        Self { domain: d, samples }
    }

    /// Treats an already-warped volume as fully overlapping; gradients by
    /// central differences (one-sided at borders).
    pub fn from_volume(vol: &ScalarVolume) -> Self {
        let d = vol.domain;
        let samples = par::map(d.len(), |idx| {
            let c = d.coords(idx);
            let mut g = [0.0; 3];
            for (axis, ga) in g.iter_mut().enumerate() {
                let n = d.dims[axis];
                if n < 2 {
                    continue;
                }
                let (lo, hi) = (c[axis].saturating_sub(1), (c[axis] + 1).min(n - 1));
                let mut a = c;
                let mut b = c;
                a[axis] = lo;
                b[axis] = hi;
                *ga = (vol.data[d.index(b[0], b[1], b[2])] - vol.data[d.index(a[0], a[1], a[2])])
                    / ((hi - lo) as f64 * d.spacing[axis]);
            }
            WarpSample {
                value: vol.data[idx],
                gradient: g,
                inside: true,
            }
        });
        Self { domain: d, samples }
    }

    pub fn overlap(&self) -> usize {
        self.samples.iter().filter(|s| s.inside).count()
    }

    pub fn to_volume(&self, background: f64) -> ScalarVolume {
        ScalarVolume {
            domain: self.domain,
            data: self.samples.iter().map(|s| s.value).collect(),
            background,
        }
    }
}

/// Energy and its gradient with respect to `u` at every voxel.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub energy: f64,
    pub force: Vec<Vec3>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    /// Mean squared intensity difference.
    Ssd,
    /// Mean squared difference of per-image standardised intensities.
    Nssd,
}

impl DistanceKind {
    pub fn evaluate(self, fixed: &ScalarVolume, warped: &WarpedImage) -> Result<Evaluation> {
        match self {
            DistanceKind::Ssd => distance_ssd(fixed, warped),
            DistanceKind::Nssd => distance_nssd(fixed, warped),
        }
    }
}

fn overlap_count(warped: &WarpedImage) -> Result<usize> {
    let n = warped.overlap();
    if n == 0 {
        return Err(Error::Numerical("fixed and warped images do not overlap".into()));
    }
    Ok(n)
}

/// `E = (1/|O|) sum_O (fixed - warped)^2` over the overlap `O`.
pub fn distance_ssd(fixed: &ScalarVolume, warped: &WarpedImage) -> Result<Evaluation> {
    fixed.domain.ensure_compatible(&warped.domain, "distance_ssd")?;
    let n = overlap_count(warped)? as f64;
    let s = &warped.samples;
    let energy = par::sum(s.len(), |i| {
        if s[i].inside {
            (fixed.data[i] - s[i].value).powi(2)
        } else {
            0.0
        }
    }) / n;
    let force = par::map(s.len(), |i| {
        if s[i].inside {
            scale(s[i].gradient, 2.0 * (s[i].value - fixed.data[i]) / n)
        } else {
            [0.0; 3]
        }
    });
    Ok(Evaluation { energy, force })
}

struct Moments {
    n: f64,
    mean_f: f64,
    mean_w: f64,
    std_f: f64,
    std_w: f64,
}

fn overlap_moments(fixed: &ScalarVolume, warped: &WarpedImage) -> Result<Moments> {
    let s = &warped.samples;
    let n = overlap_count(warped)? as f64;
    let (sf, sw) = par::reduce(
        s.len(),
        (0.0, 0.0),
        |r| {
            r.filter(|&i| s[i].inside)
                .fold((0.0, 0.0), |(a, b), i| (a + fixed.data[i], b + s[i].value))
        },
        |x, y| (x.0 + y.0, x.1 + y.1),
    );
    let (mean_f, mean_w) = (sf / n, sw / n);
    let (vf, vw) = par::reduce(
        s.len(),
        (0.0, 0.0),
        |r| {
            r.filter(|&i| s[i].inside).fold((0.0, 0.0), |(a, b), i| {
                (a + (fixed.data[i] - mean_f).powi(2), b + (s[i].value - mean_w).powi(2))
            })
        },
        |x, y| (x.0 + y.0, x.1 + y.1),
    );
    let (std_f, std_w) = ((vf / n).sqrt(), (vw / n).sqrt());
    let degenerate = |sd: f64, m: f64| !(sd > 1e-12 * m.abs().max(1.0));
    if degenerate(std_f, mean_f) {
        return Err(Error::Invalid("fixed image has zero variance over the overlap".into()));
    }
    if degenerate(std_w, mean_w) {
        return Err(Error::Invalid("warped image has zero variance over the overlap".into()));
    }
    Ok(Moments {
        n,
        mean_f,
        mean_w,
        std_f,
        std_w,
    })
}

/// SSD between the two images after each is standardised to zero mean and
/// unit variance over the overlap. Equals `2 - 2 rho` with `rho` the
/// correlation coefficient; the force differentiates through the warped
/// image's mean and variance.
pub fn distance_nssd(fixed: &ScalarVolume, warped: &WarpedImage) -> Result<Evaluation> {
    fixed.domain.ensure_compatible(&warped.domain, "distance_nssd")?;
    let m = overlap_moments(fixed, warped)?;
    let s = &warped.samples;
    let fhat = |i: usize| (fixed.data[i] - m.mean_f) / m.std_f;
    let what = |i: usize| (s[i].value - m.mean_w) / m.std_w;
    let (sq, cross) = par::reduce(
        s.len(),
        (0.0, 0.0),
        |r| {
            r.filter(|&i| s[i].inside).fold((0.0, 0.0), |(a, b), i| {
                let (f, w) = (fhat(i), what(i));
                (a + (w - f).powi(2), b + w * f)
            })
        },
        |x, y| (x.0 + y.0, x.1 + y.1),
    );
    let energy = sq / m.n;
    let rho = cross / m.n;
    let k = -2.0 / (m.n * m.std_w);
    let force = par::map(s.len(), |i| {
        if s[i].inside {
            scale(s[i].gradient, k * (fhat(i) - rho * what(i)))
        } else {
            [0.0; 3]
        }
    });
    Ok(Evaluation { energy, force })
}
