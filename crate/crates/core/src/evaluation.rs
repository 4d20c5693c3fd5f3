//! Overlap and endpoint-error scoring.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{compose_fields, invert_field, warp_mask_nn};
use crate::grid::{norm, sub, DisplacementField, ScalarVolume};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    pub structure: String,
    pub phase: usize,
    pub dice: f64,
    pub voxels_a: usize,
    pub voxels_b: usize,
    pub voxels_intersect: usize,
    /// Both masks were empty; `dice` is reported as 0.
    pub both_empty: bool,
}

/// Dice overlap `2 |A ∩ B| / (|A| + |B|)` of two binary masks on one grid.
pub fn dice(a: &ScalarVolume, b: &ScalarVolume) -> Result<OverlapReport> {
    a.ensure_binary("dice operand a")?;
    b.ensure_binary("dice operand b")?;
    a.domain.ensure_compatible(&b.domain, "dice operands")?;
    let (na, nb, ni) = par::reduce(
        a.data.len(),
        (0usize, 0usize, 0usize),
        |r| {
            r.fold((0, 0, 0), |(x, y, z), i| {
                let (ia, ib) = (a.data[i] == 1.0, b.data[i] == 1.0);
                (x + ia as usize, y + ib as usize, z + (ia && ib) as usize)
            })
        },
        |p, q| (p.0 + q.0, p.1 + q.1, p.2 + q.2),
    );
    let both_empty = na + nb == 0;
    let dice = if both_empty {
        0.0
    } else {
        2.0 * ni as f64 / (na + nb) as f64
    };
    Ok(OverlapReport {
        structure: String::new(),
        phase: 0,
        dice,
        voxels_a: na,
        voxels_b: nb,
        voxels_intersect: ni,
        both_empty,
    })
}

/// Per-phase masks of one structure on the 4D patient, and the expert mask
/// of the same structure on the new patient.
#[derive(Clone, Debug)]
pub struct StructureChain<'a> {
    pub name: &'a str,
    pub phase_masks: &'a [ScalarVolume],
    pub target_mask: &'a ScalarVolume,
}

/// Carries every 4D phase mask into the new patient's space and scores it
/// against that patient's mask. Phase masks reach the reference phase through
/// the inverse of their phase field, then the new patient through
/// `phi_inter`; the chain is composed first so each mask is resampled once.
pub fn atlas_chain_dice(
    structures: &[StructureChain<'_>],
    phase_fields: &[DisplacementField],
    phi_inter: &DisplacementField,
    inversion_tol: f64,
    inversion_max_iter: usize,
) -> Result<Vec<OverlapReport>> {
    for s in structures {
        if s.phase_masks.len() != phase_fields.len() {
            return Err(Error::Invalid(format!(
                "structure {}: {} phase masks for {} phase fields",
                s.name,
                s.phase_masks.len(),
                phase_fields.len()
            )));
        }
        phi_inter.domain.ensure_compatible(
            &s.target_mask.domain,
            &format!("target mask of {} vs inter-patient field", s.name),
        )?;
    }
    let chains = par::map_items(phase_fields, |_, f| {
        compose_fields(&invert_field(f, inversion_tol, inversion_max_iter).field, phi_inter)
    });
    let mut out = Vec::new();
    for s in structures {
        for (j, chain) in chains.iter().enumerate() {
            s.phase_masks[j].domain.ensure_compatible(
                &phase_fields[j].domain,
                &format!("{} mask of phase {j} vs its field", s.name),
            )?;
            let warped = warp_mask_nn(&s.phase_masks[j], chain)
                .map_err(|e| e.in_stage(format!("warp {} mask of phase {j}", s.name)))?;
            let mut r = dice(&warped, s.target_mask)?;
            r.structure = s.name.to_owned();
            r.phase = j;
            out.push(r);
        }
    }
    Ok(out)
}

/// Mean and maximum of `|est - truth|` over `mask` (or the whole grid).
pub fn endpoint_error(
    est: &DisplacementField,
    truth: &DisplacementField,
    mask: Option<&ScalarVolume>,
) -> Result<(f64, f64)> {
    est.domain.ensure_compatible(&truth.domain, "endpoint_error")?;
    if let Some(m) = mask {
        m.ensure_binary("endpoint_error mask")?;
        est.domain.ensure_compatible(&m.domain, "endpoint_error mask")?;
    }
    let selected = |i: usize| mask.is_none_or(|m| m.data[i] == 1.0);
    let (sum, max, count) = par::reduce(
        est.u.len(),
        (0.0, 0.0f64, 0usize),
        |r| {
            r.filter(|&i| selected(i)).fold((0.0, 0.0f64, 0), |(s, m, c), i| {
                let e = norm(sub(est.u[i], truth.u[i]));
                (s + e, m.max(e), c + 1)
            })
        },
        |a, b| (a.0 + b.0, a.1.max(b.1), a.2 + b.2),
    );
    if count == 0 {
        return Err(Error::Invalid("endpoint_error mask selects no voxels".into()));
    }
    Ok((sum / count as f64, max))
}

pub const DICE_CSV_HEADER: &str = "structure,phase,dice,voxels_a,voxels_b,voxels_intersect";

pub fn write_dice_csv(reports: &[OverlapReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from(DICE_CSV_HEADER);
    s.push('\n');
    for r in reports {
        if r.structure.contains([',', '"', '\n']) {
            return Err(Error::Invalid(format!(
                "structure name {:?} cannot be written as CSV",
                r.structure
            )));
        }
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.structure, r.phase, r.dice, r.voxels_a, r.voxels_b, r.voxels_intersect
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridDomain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_mask(d: GridDomain, lo: [usize; 3], hi: [usize; 3]) -> ScalarVolume {
        let mut m = ScalarVolume::filled(d, 0.0, 0.0);
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    m.data[d.index(i, j, k)] = 1.0;
                }
            }
        }
        m
    }

    #[test]
    fn identical_disjoint_and_half_overlap() {
        let d = GridDomain::cube(20, 1.0).unwrap();
        let a = cube_mask(d, [0, 0, 0], [10, 10, 10]);
        assert_eq!(dice(&a, &a).unwrap().dice, 1.0);
        let far = cube_mask(d, [10, 10, 10], [20, 20, 20]);
        assert_eq!(dice(&a, &far).unwrap().dice, 0.0);
        let half = cube_mask(d, [5, 0, 0], [15, 10, 10]);
        let r = dice(&a, &half).unwrap();
        assert_eq!((r.voxels_a, r.voxels_b, r.voxels_intersect), (1000, 1000, 500));
        assert_eq!(r.dice, 0.5);
    }

    #[test]
    fn empty_pair_is_flagged() {
        let d = GridDomain::cube(4, 1.0).unwrap();
        let e = ScalarVolume::filled(d, 0.0, 0.0);
        let r = dice(&e, &e).unwrap();
        assert!(r.both_empty);
        assert_eq!(r.dice, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = GridDomain::cube(4, 1.0).unwrap();
        let e = ScalarVolume::filled(d, 0.0, 0.0);
        assert!(matches!(
            dice(&e, &ScalarVolume::filled(d, 0.5, 0.0)),
            Err(Error::NotBinary(_))
        ));
        let other = ScalarVolume::filled(GridDomain::cube(5, 1.0).unwrap(), 0.0, 0.0);
        assert!(matches!(dice(&e, &other), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn erosion_never_raises_dice_of_nested_masks() {
        let d = GridDomain::cube(16, 1.0).unwrap();
        let b = cube_mask(d, [2, 2, 2], [14, 14, 14]);
        let mut prev = f64::INFINITY;
        for shrink in 0..6 {
            let a = cube_mask(d, [2 + shrink; 3], [14 - shrink; 3]);
            let v = dice(&a, &b).unwrap().dice;
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn identity_chain_equals_direct_dice() {
        let d = GridDomain::cube(12, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let masks: Vec<ScalarVolume> = (0..3)
            .map(|_| {
                let data = (0..d.len()).map(|_| f64::from(rng.gen_bool(0.3))).collect();
                ScalarVolume::new(d, data, 0.0).unwrap()
            })
            .collect();
        let target = masks[1].clone();
        let fields = vec![DisplacementField::identity(d); 3];
        let reports = atlas_chain_dice(
            &[StructureChain {
                name: "x",
                phase_masks: &masks,
                target_mask: &target,
            }],
            &fields,
            &DisplacementField::identity(d),
            0.01,
            50,
        )
        .unwrap();
        assert_eq!(reports.len(), 3);
        for (j, r) in reports.iter().enumerate() {
            assert_eq!(r.dice, dice(&masks[j], &target).unwrap().dice);
            assert_eq!(r.phase, j);
        }
        assert_eq!(reports[1].dice, 1.0);
    }

    #[test]
    fn chain_follows_phase_motion() {
        // Phase 0 is the reference shifted by +2 voxels in x: its mask is
        // carried back onto the reference mask exactly.
        let d = GridDomain::cube(16, 1.0).unwrap();
        let reference = cube_mask(d, [4, 4, 4], [10, 10, 10]);
        let moved = cube_mask(d, [6, 4, 4], [12, 10, 10]);
        // moved(x) = reference(x + u) with u = -2.
        let fields = vec![
            DisplacementField::constant(d, [-2.0, 0.0, 0.0]),
            DisplacementField::identity(d),
        ];
        let masks = vec![moved, reference.clone()];
        let reports = atlas_chain_dice(
            &[StructureChain {
                name: "cube",
                phase_masks: &masks,
                target_mask: &reference,
            }],
            &fields,
            &DisplacementField::identity(d),
            1e-6,
            50,
        )
        .unwrap();
        assert!(reports.iter().all(|r| r.dice == 1.0), "{reports:?}");
    }

    #[test]
    fn endpoint_error_cases() {
        let d = GridDomain::cube(8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut random = || {
            let u = (0..d.len())
                .map(|_| std::array::from_fn(|_| rng.gen_range(-3.0..3.0)))
                .collect();
            DisplacementField::new(d, u).unwrap()
        };
        let (a, b) = (random(), random());
        assert_eq!(endpoint_error(&a, &a, None).unwrap(), (0.0, 0.0));
        let shifted = DisplacementField::new(d, a.u.iter().map(|v| [v[0] + 1.0, v[1], v[2]]).collect()).unwrap();
        let (mean, max) = endpoint_error(&shifted, &a, None).unwrap();
        assert!((mean - 1.0).abs() < 1e-12 && (max - 1.0).abs() < 1e-12);

        let (mut s, mut m) = (0.0, 0.0f64);
        for i in 0..d.len() {
            let e =
                ((a.u[i][0] - b.u[i][0]).powi(2) + (a.u[i][1] - b.u[i][1]).powi(2) + (a.u[i][2] - b.u[i][2]).powi(2))
                    .sqrt();
            s += e;
            m = m.max(e);
        }
        let (mean, max) = endpoint_error(&a, &b, None).unwrap();
        assert!((mean - s / d.len() as f64).abs() <= 1e-12 && max == m);

        let mask = cube_mask(d, [0, 0, 0], [2, 2, 2]);
        let (mean, _) = endpoint_error(&a, &b, Some(&mask)).unwrap();
        assert!(mean.is_finite());
        assert!(endpoint_error(&a, &b, Some(&ScalarVolume::filled(d, 0.0, 0.0))).is_err());
    }

    #[test]
    fn csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dice.csv");
        let r = OverlapReport {
            structure: "liver".into(),
            phase: 3,
            dice: 0.5,
            voxels_a: 1000,
            voxels_b: 1000,
            voxels_intersect: 500,
            both_empty: false,
        };
        write_dice_csv(&[r], &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "structure,phase,dice,voxels_a,voxels_b,voxels_intersect\nliver,3,0.5,1000,1000,500\n"
        );
    }
}
