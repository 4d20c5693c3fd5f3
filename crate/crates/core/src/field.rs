//! Displacement-field algebra: warping, composition, inversion, resampling
//! and the Jacobian determinant.
//!
//! All fields are pull-back maps `phi(x) = x + u(x)`: warping a moving image
//! by `phi` yields `out(x) = moving(phi(x))`.

use crate::error::{Error, Result};
use crate::grid::{add, norm, sub, DisplacementField, GridDomain, ScalarVolume, Vec3};
use crate::par;

pub const DEFAULT_INVERSION_TOL: f64 = 0.01;
pub const DEFAULT_INVERSION_MAX_ITER: usize = 50;

/// Pulls `moving` back through `field`; the result lives on the field's grid.
pub fn warp_volume(moving: &ScalarVolume, field: &DisplacementField) -> ScalarVolume {
    let d = field.domain;
    let data = par::map(d.len(), |idx| {
        moving.sample_trilinear(add(d.position(idx), field.u[idx]))
    });
    ScalarVolume {
        domain: d,
        data,
        background: moving.background,
    }
}

/// Nearest-neighbour pull-back of a binary mask. Samples outside the mask's
/// grid are 0.
pub fn warp_mask_nn(mask: &ScalarVolume, field: &DisplacementField) -> Result<ScalarVolume> {
    mask.ensure_binary("warp_mask_nn input")?;
    let d = field.domain;
    let data = par::map(d.len(), |idx| {
        mask.domain
            .nearest_voxel(add(d.position(idx), field.u[idx]))
            .map_or(0.0, |j| mask.data[j])
    });
    Ok(ScalarVolume {
        domain: d,
        data,
        background: 0.0,
    })
}

/// `outer ∘ inner` (inner applied first). The result lives on `inner`'s grid:
/// `u(x) = u_in(x) + u_out(x + u_in(x))`.
pub fn compose_fields(outer: &DisplacementField, inner: &DisplacementField) -> DisplacementField {
    let d = inner.domain;
    let u = par::map(d.len(), |idx| {
        let ui = inner.u[idx];
        add(ui, outer.sample(add(d.position(idx), ui)))
    });
    DisplacementField { domain: d, u }
}

/// Trilinear resampling of a displacement field onto another grid.
pub fn resample_field(field: &DisplacementField, domain: GridDomain) -> DisplacementField {
    if field.domain == domain {
        return field.clone();
    }
    let u = par::map(domain.len(), |idx| field.sample(domain.position(idx)));
    DisplacementField { domain, u }
}

/// Outcome of a fixed-point inversion.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub field: DisplacementField,
    pub iterations: usize,
    /// Largest voxel update (mm) in the final iteration.
    pub last_update: f64,
    pub converged: bool,
}

/// Inverts `field` on its own grid. See [`invert_field_on`].
pub fn invert_field(field: &DisplacementField, tol: f64, max_iter: usize) -> Inversion {
    invert_field_on(field, field.domain, tol, max_iter)
}

/// Fixed-point inversion `v_{k+1}(y) = -u(y + v_k(y))`, `v_0 = 0`, evaluated on
/// `domain` (the grid of the map's image). Stops once the largest update
/// drops below `tol` mm; non-convergence is reported, not raised.
pub fn invert_field_on(field: &DisplacementField, domain: GridDomain, tol: f64, max_iter: usize) -> Inversion {
    let mut v = vec![[0.0; 3]; domain.len()];
    let mut next = v.clone();
    let mut last_update = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        par::fill(&mut next, |idx| {
            let s = field.sample(add(domain.position(idx), v[idx]));
            [-s[0], -s[1], -s[2]]
        });
        last_update = par::max(v.len(), |i| norm(sub(next[i], v[i])));
        std::mem::swap(&mut v, &mut next);
        iterations += 1;
        if last_update < tol {
            break;
        }
    }
    if max_iter == 0 {
        last_update = field.max_norm();
    }
    Inversion {
        field: DisplacementField { domain, u: v },
        iterations,
        last_update,
        converged: last_update < tol,
    }
}

/// `max_x |compose(field, inverse)(x)|`: how far `phi ∘ phi^{-1}` is from the
/// identity, measured on the inverse's grid.
pub fn inversion_residual(field: &DisplacementField, inverse: &DisplacementField) -> f64 {
    compose_fields(field, inverse).max_norm()
}

/// `det(I + grad u)` by central differences (one-sided at borders).
pub fn jacobian_determinant(field: &DisplacementField) -> Result<ScalarVolume> {
    let d = field.domain;
    if d.dims.iter().any(|&n| n < 2) {
        return Err(Error::Invalid(format!(
            "jacobian needs at least 2 voxels per axis, got {:?}",
            d.dims
        )));
    }
    let data = par::map(d.len(), |idx| {
        let c = d.coords(idx);
        let mut jac = [[0.0; 3]; 3];
        for axis in 0..3 {
            let n = d.dims[axis];
            let (lo, hi) = (c[axis].saturating_sub(1), (c[axis] + 1).min(n - 1));
            let mut a = c;
            let mut b = c;
            a[axis] = lo;
            b[axis] = hi;
            let ua = field.u[d.index(a[0], a[1], a[2])];
            let ub = field.u[d.index(b[0], b[1], b[2])];
            let dx = (hi - lo) as f64 * d.spacing[axis];
            for comp in 0..3 {
                jac[comp][axis] = (ub[comp] - ua[comp]) / dx;
            }
        }
        for (k, row) in jac.iter_mut().enumerate() {
            row[k] += 1.0;
        }
        det3(&jac)
    });
    Ok(ScalarVolume {
        domain: d,
        data,
        background: 1.0,
    })
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Min and max of a volume's values.
pub fn value_range(v: &ScalarVolume) -> (f64, f64) {
    v.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// Translates a field's content by a constant world vector `shift` (mm) so
/// that `out(x) = field(x - shift)`; convenience for tests and phantoms.
pub fn shift_field(field: &DisplacementField, shift: Vec3) -> DisplacementField {
    let d = field.domain;
    let u = par::map(d.len(), |idx| field.sample(sub(d.position(idx), shift)));
    DisplacementField { domain: d, u }
}
