//! Regular 3D grids: scalar volumes and displacement fields.
//!
//! Voxels are stored x-fastest: `idx = x + nx * (y + ny * z)`. World
//! coordinates (mm) of voxel `(i, j, k)` are `origin + (i, j, k) * spacing`;
//! there is no direction matrix.

use crate::error::{Error, Result};
use crate::par;

/// Fill value for intensities sampled outside the image (air, in HU).
pub const AIR_HU: f64 = -1000.0;

/// Relative tolerance under which two grids are treated as identical.
pub const GRID_TOLERANCE: f64 = 1e-9;

/// Continuous indices this close to an integer snap onto the node.
const NODE_SNAP: f64 = 1e-9;

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridDomain {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl GridDomain {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&h| !(h.is_finite() && h > 0.0)) {
            return Err(Error::Invalid(format!(
                "grid spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Invalid(format!("grid origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Cubic grid with isotropic spacing and the origin at zero.
    pub fn cube(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n; 3], [spacing; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn position(&self, idx: usize) -> Vec3 {
        let c = self.coords(idx);
        [
            self.origin[0] + c[0] as f64 * self.spacing[0],
            self.origin[1] + c[1] as f64 * self.spacing[1],
            self.origin[2] + c[2] as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn continuous_index(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World position of the grid center.
    pub fn center(&self) -> Vec3 {
        std::array::from_fn(|a| self.origin[a] + 0.5 * (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    /// Physical size `(n - 1) * h` of the voxel-center bounding box.
    pub fn extent(&self) -> Vec3 {
        std::array::from_fn(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_compatible(&self, other: &GridDomain) -> bool {
        fn close(a: f64, b: f64) -> bool {
            (a - b).abs() <= GRID_TOLERANCE * a.abs().max(b.abs()).max(1.0)
        }
        self.dims == other.dims
            && (0..3).all(|a| close(self.spacing[a], other.spacing[a]))
            && (0..3).all(|a| close(self.origin[a], other.origin[a]))
    }

    pub fn ensure_compatible(&self, other: &GridDomain, what: &str) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} spacing {:?} origin {:?} vs dims {:?} spacing {:?} origin {:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }

    /// Locates a continuous index along one axis. Returns the lower node and
    /// the fractional offset, or `None` outside `[0, n - 1]`.
    #[inline]
    fn axis_cell(c: f64, n: usize) -> Option<(usize, f64)> {
        let last = (n - 1) as f64;
        let r = c.round();
        let c = if (c - r).abs() < NODE_SNAP { r } else { c };
        if !(c >= 0.0 && c <= last) {
            return None;
        }
        if n == 1 {
            return Some((0, 0.0));
        }
        let i0 = (c.floor() as usize).min(n - 2);
        Some((i0, c - i0 as f64))
    }

    /// Like `axis_cell`, but clamps out-of-range indices to the border.
    #[inline]
    fn axis_cell_clamped(c: f64, n: usize) -> (usize, f64) {
        let last = (n - 1) as f64;
        let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, last) };
        Self::axis_cell(c, n).unwrap_or((0, 0.0))
    }

    #[inline]
    fn cell(&self, p: Vec3) -> Option<([usize; 3], Vec3)> {
        let c = self.continuous_index(p);
        let (i, tx) = Self::axis_cell(c[0], self.dims[0])?;
        let (j, ty) = Self::axis_cell(c[1], self.dims[1])?;
        let (k, tz) = Self::axis_cell(c[2], self.dims[2])?;
        Some(([i, j, k], [tx, ty, tz]))
    }

    #[inline]
    fn cell_clamped(&self, p: Vec3) -> ([usize; 3], Vec3) {
        let c = self.continuous_index(p);
        let (i, tx) = Self::axis_cell_clamped(c[0], self.dims[0]);
        let (j, ty) = Self::axis_cell_clamped(c[1], self.dims[1]);
        let (k, tz) = Self::axis_cell_clamped(c[2], self.dims[2]);
        ([i, j, k], [tx, ty, tz])
    }

    /// Strides to the +1 neighbour along each axis, zero on singleton axes.
    #[inline]
    fn strides(&self, base: [usize; 3]) -> [usize; 3] {
        let nx = self.dims[0];
        let nxy = nx * self.dims[1];
        [
            usize::from(base[0] + 1 < self.dims[0]),
            if base[1] + 1 < self.dims[1] { nx } else { 0 },
            if base[2] + 1 < self.dims[2] { nxy } else { 0 },
        ]
    }

    /// Nearest voxel to a world point, if it lies on the grid.
    #[inline]
    pub fn nearest_voxel(&self, p: Vec3) -> Option<usize> {
        let c = self.continuous_index(p);
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if !(r >= 0.0 && r <= (self.dims[a] - 1) as f64) {
                return None;
            }
            ijk[a] = r as usize;
        }
        Some(self.index(ijk[0], ijk[1], ijk[2]))
    }
}

/// Exact at both ends and for equal endpoints.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

#[inline]
fn trilerp(c: [f64; 8], t: Vec3) -> f64 {
    let [tx, ty, tz] = t;
    let x00 = lerp(c[0], c[1], tx);
    let x10 = lerp(c[2], c[3], tx);
    let x01 = lerp(c[4], c[5], tx);
    let x11 = lerp(c[6], c[7], tx);
    lerp(lerp(x00, x10, ty), lerp(x01, x11, ty), tz)
}

#[inline]
fn corner_offsets(base: usize, s: [usize; 3]) -> [usize; 8] {
    [
        base,
        base + s[0],
        base + s[1],
        base + s[0] + s[1],
        base + s[2],
        base + s[0] + s[2],
        base + s[1] + s[2],
        base + s[0] + s[1] + s[2],
    ]
}

/// A scalar image on a regular grid (CT intensities or binary masks).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    pub domain: GridDomain,
    pub data: Vec<f64>,
    /// Value returned when sampling outside the grid.
    pub background: f64,
}

impl ScalarVolume {
    pub fn new(domain: GridDomain, data: Vec<f64>, background: f64) -> Result<Self> {
        if data.len() != domain.len() {
            return Err(Error::Invalid(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                domain.dims,
                domain.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite intensity at voxel {i}")));
        }
        if !background.is_finite() {
            return Err(Error::Invalid("background must be finite".into()));
        }
        Ok(Self {
            domain,
            data,
            background,
        })
    }

    pub fn filled(domain: GridDomain, value: f64, background: f64) -> Self {
        Self {
            domain,
            data: vec![value; domain.len()],
            background,
        }
    }

    /// Evaluates `f` at every voxel center (world coordinates).
    pub fn from_fn<F>(domain: GridDomain, background: f64, f: F) -> Self
    where
        F: Fn(Vec3) -> f64 + Sync + Send,
    {
        let data = par::map(domain.len(), |idx| f(domain.position(idx)));
        Self {
            domain,
            data,
            background,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.domain.index(i, j, k)]
    }

    /// Trilinear interpolation at a world point, `None` outside the grid box.
    #[inline]
    pub fn sample(&self, p: Vec3) -> Option<f64> {
        let (ijk, t) = self.domain.cell(p)?;
        let base = self.domain.index(ijk[0], ijk[1], ijk[2]);
        let idx = corner_offsets(base, self.domain.strides(ijk));
        Some(trilerp(idx.map(|i| self.data[i]), t))
    }

    /// Trilinear interpolation; `background` outside the grid box.
    #[inline]
    pub fn sample_trilinear(&self, p: Vec3) -> f64 {
        self.sample(p).unwrap_or(self.background)
    }

    /// Interpolated value and the exact spatial gradient (per mm) of the
    /// trilinear interpolant, `None` outside the grid box.
    #[inline]
    pub fn sample_with_gradient(&self, p: Vec3) -> Option<(f64, Vec3)> {
        let (ijk, [tx, ty, tz]) = self.domain.cell(p)?;
        let base = self.domain.index(ijk[0], ijk[1], ijk[2]);
        let [c000, c100, c010, c110, c001, c101, c011, c111] =
            corner_offsets(base, self.domain.strides(ijk)).map(|i| self.data[i]);
        // Edges along x at the four (y, z) corners.
        let x00 = lerp(c000, c100, tx);
        let x10 = lerp(c010, c110, tx);
        let x01 = lerp(c001, c101, tx);
        let x11 = lerp(c011, c111, tx);
        let y0 = lerp(x00, x10, ty);
        let y1 = lerp(x01, x11, ty);
        let value = lerp(y0, y1, tz);

        let dx0 = (1.0 - ty) * (c100 - c000) + ty * (c110 - c010);
        let dx1 = (1.0 - ty) * (c101 - c001) + ty * (c111 - c011);
        let dx = (1.0 - tz) * dx0 + tz * dx1;
        let dy = (1.0 - tz) * (x10 - x00) + tz * (x11 - x01);
        let dz = y1 - y0;
        let h = self.domain.spacing;
        let g = [
            if self.domain.dims[0] > 1 { dx / h[0] } else { 0.0 },
            if self.domain.dims[1] > 1 { dy / h[1] } else { 0.0 },
            if self.domain.dims[2] > 1 { dz / h[2] } else { 0.0 },
        ];
        Some((value, g))
    }

    pub fn mean(&self) -> f64 {
        par::sum(self.data.len(), |i| self.data[i]) / self.data.len() as f64
    }

    /// Population standard deviation over all voxels.
    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (par::sum(self.data.len(), |i| (self.data[i] - m).powi(2)) / self.data.len() as f64).sqrt()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn ensure_binary(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            None => Ok(()),
            Some(i) => Err(Error::NotBinary(format!("{what}: voxel {i} holds {}", self.data[i]))),
        }
    }

    /// Number of voxels equal to 1 (binary masks).
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    /// Applies `f` to every intensity, keeping the grid.
    pub fn map_values<F: Fn(f64) -> f64 + Sync + Send>(&self, f: F) -> Self {
        Self {
            domain: self.domain,
            data: par::map(self.data.len(), |i| f(self.data[i])),
            background: f(self.background),
        }
    }
}

/// A dense displacement field `u`, representing the pull-back map
/// `phi(x) = x + u(x)` in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub domain: GridDomain,
    pub u: Vec<Vec3>,
}

impl DisplacementField {
    pub fn new(domain: GridDomain, u: Vec<Vec3>) -> Result<Self> {
        if u.len() != domain.len() {
            return Err(Error::Invalid(format!(
                "field has {} vectors, grid {:?} needs {}",
                u.len(),
                domain.dims,
                domain.len()
            )));
        }
        if let Some(i) = u.iter().position(|d| d.iter().any(|c| !c.is_finite())) {
            return Err(Error::Invalid(format!("non-finite displacement at voxel {i}")));
        }
        Ok(Self { domain, u })
    }

    pub fn identity(domain: GridDomain) -> Self {
        Self {
            domain,
            u: vec![[0.0; 3]; domain.len()],
        }
    }

    pub fn constant(domain: GridDomain, shift: Vec3) -> Self {
        Self {
            domain,
            u: vec![shift; domain.len()],
        }
    }

    /// Evaluates `f` at every voxel center (world coordinates).
    pub fn from_fn<F>(domain: GridDomain, f: F) -> Self
    where
        F: Fn(Vec3) -> Vec3 + Sync + Send,
    {
        let u = par::map(domain.len(), |idx| f(domain.position(idx)));
        Self { domain, u }
    }

    /// Trilinear interpolation of the displacement. Points outside the grid
    /// take the value at the nearest border point.
    #[inline]
    pub fn sample(&self, p: Vec3) -> Vec3 {
        let (ijk, t) = self.domain.cell_clamped(p);
        let base = self.domain.index(ijk[0], ijk[1], ijk[2]);
        let idx = corner_offsets(base, self.domain.strides(ijk));
        std::array::from_fn(|k| trilerp(idx.map(|i| self.u[i][k]), t))
    }

    /// Largest displacement magnitude (mm).
    pub fn max_norm(&self) -> f64 {
        par::max(self.u.len(), |i| norm(self.u[i]))
    }

    /// Extracts one displacement component as a scalar volume.
    pub fn component(&self, axis: usize) -> ScalarVolume {
        ScalarVolume {
            domain: self.domain,
            data: self.u.iter().map(|d| d[axis]).collect(),
            background: 0.0,
        }
    }
}

#[inline]
pub fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
