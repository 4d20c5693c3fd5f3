//! Smoothness penalties on displacement fields.
//!
//! Both regularisers sum squared forward differences of the displacement
//! components (Neumann boundary) and divide by the voxel count. The sliding
//! variant drops the tangential terms on differences that cross a mask
//! boundary, so organs may slide along the interface while the normal
//! component stays coupled.

use crate::error::Result;
use crate::grid::{DisplacementField, ScalarVolume};
use crate::par;

use super::distance::Evaluation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerKind {
    Diffusive,
    SlidingAware,
}

/// `E = (1/|Ω|) Σ_x Σ_c |∇u_c(x)|²`, force `-2 Δu / |Ω|`.
pub fn reg_diffusive(u: &DisplacementField) -> Evaluation {
    membrane(u, None)
}

/// Diffusive penalty with the coupling across the `mask` interface reduced
/// to the component along the difference direction.
pub fn reg_sliding(u: &DisplacementField, mask: &ScalarVolume) -> Result<Evaluation> {
    mask.ensure_binary("sliding mask")?;
    u.domain.ensure_compatible(&mask.domain, "reg_sliding mask")?;
    let labels: Vec<bool> = mask.data.iter().map(|&v| v == 1.0).collect();
    Ok(membrane(u, Some(&labels)))
}

fn membrane(u: &DisplacementField, labels: Option<&[bool]>) -> Evaluation {
    let d = u.domain;
    let n = d.len() as f64;
    let inv_h2 = d.spacing.map(|h| 1.0 / (h * h));
    let stride = [1, d.dims[0], d.dims[0] * d.dims[1]];
    let f = &u.u;
    // Whether component `comp` of the difference between voxels a and b
    // (neighbours along `axis`) is penalised.
    let coupled = |a: usize, b: usize, comp: usize, axis: usize| match labels {
        None => true,
        Some(l) => l[a] == l[b] || comp == axis,
    };

    let energy = par::sum(d.len(), |idx| {
        let c = d.coords(idx);
        let mut e = 0.0;
        for axis in 0..3 {
            if c[axis] + 1 >= d.dims[axis] {
                continue;
            }
            let j = idx + stride[axis];
            for comp in 0..3 {
                if coupled(idx, j, comp, axis) {
                    let diff = f[j][comp] - f[idx][comp];
                    e += diff * diff * inv_h2[axis];
                }
            }
        }
        e
    }) / n;

    let force = par::map(d.len(), |idx| {
        let c = d.coords(idx);
        let mut g = [0.0; 3];
        for axis in 0..3 {
            let mut neighbours = [None, None];
            if c[axis] > 0 {
                neighbours[0] = Some(idx - stride[axis]);
            }
            if c[axis] + 1 < d.dims[axis] {
                neighbours[1] = Some(idx + stride[axis]);
            }
            for j in neighbours.into_iter().flatten() {
                for (comp, gc) in g.iter_mut().enumerate() {
                    if coupled(idx, j, comp, axis) {
                        *gc += (f[idx][comp] - f[j][comp]) * inv_h2[axis];
                    }
                }
            }
        }
        g.map(|x| 2.0 * x / n)
    });
    Evaluation { energy, force }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridDomain;

    #[test]
    fn zero_and_constant_fields_cost_nothing() {
        let d = GridDomain::cube(5, 1.0).unwrap();
        for f in [
            DisplacementField::identity(d),
            DisplacementField::constant(d, [1.0, -2.0, 3.0]),
        ] {
            let e = reg_diffusive(&f);
            assert_eq!(e.energy, 0.0);
            assert!(e.force.iter().all(|g| *g == [0.0; 3]));
        }
    }

    #[test]
    fn linear_field_by_hand() {
        // u_x = s * x on a 4^3 grid (h = 1): each of the 3 * 16 x-edges
        // carries s^2; the last x-slice has no forward edge.
        let d = GridDomain::cube(4, 1.0).unwrap();
        let s = 0.3;
        let f = DisplacementField::from_fn(d, |p| [s * p[0], 0.0, 0.0]);
        let mut by_hand = 0.0;
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..3 {
                    let a = f.u[d.index(i, j, k)][0];
                    let b = f.u[d.index(i + 1, j, k)][0];
                    by_hand += (b - a) * (b - a);
                }
            }
        }
        by_hand /= 64.0;
        let e = reg_diffusive(&f).energy;
        approx::assert_relative_eq!(e, by_hand, max_relative = 1e-12);
        approx::assert_relative_eq!(e, s * s * 0.75, max_relative = 1e-12);
    }

    #[test]
    fn uniform_mask_matches_diffusive() {
        let d = GridDomain::cube(6, 1.5).unwrap();
        let f = DisplacementField::from_fn(d, |p| [p[0].sin(), (p[1] * p[2]).cos(), p[2] * 0.1]);
        let plain = reg_diffusive(&f);
        for value in [0.0, 1.0] {
            let s = reg_sliding(&f, &ScalarVolume::filled(d, value, 0.0)).unwrap();
            assert!((s.energy - plain.energy).abs() <= 1e-12);
            assert_eq!(s.force, plain.force);
        }
    }

    /// Two slabs split at z = 3.5 with a jump in one displacement component.
    fn slab_case(jump_component: usize) -> (f64, f64) {
        let d = GridDomain::cube(8, 1.0).unwrap();
        let mask = ScalarVolume::from_fn(d, 0.0, |p| f64::from(p[2] < 3.5));
        let f = DisplacementField::from_fn(d, |p| {
            let mut u = [0.0; 3];
            if p[2] >= 3.5 {
                u[jump_component] = 2.0;
            }
            u
        });
        // Enumerate straddling differences (k = 3 -> 4) and the rest.
        let mut straddling = 0.0;
        for j in 0..8 {
            for i in 0..8 {
                let a = d.index(i, j, 3);
                let b = d.index(i, j, 4);
                // Only the z component (normal to the interface) is coupled.
                straddling += (f.u[b][2] - f.u[a][2]).powi(2);
            }
        }
        let e = reg_sliding(&f, &mask).unwrap().energy * d.len() as f64;
        (straddling, e)
    }

    #[test]
    fn tangential_jump_slides_freely() {
        for comp in [0, 1] {
            let (straddling, total) = slab_case(comp);
            assert_eq!(straddling, 0.0);
            assert_eq!(total, 0.0);
        }
    }

    #[test]
    fn normal_jump_is_penalised() {
        let (straddling, total) = slab_case(2);
        assert_eq!(straddling, 64.0 * 4.0);
        assert_eq!(total, straddling);
    }

    #[test]
    fn sliding_rejects_non_binary_mask() {
        let d = GridDomain::cube(3, 1.0).unwrap();
        let m = ScalarVolume::filled(d, 0.3, 0.0);
        assert!(reg_sliding(&DisplacementField::identity(d), &m).is_err());
    }
}
