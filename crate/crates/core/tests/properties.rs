use proptest::prelude::*;

use respmotion::evaluation::{atlas_chain_dice, dice};
use respmotion::field::{
    compose_fields, inversion_residual, invert_field, jacobian_determinant, warp_mask_nn, warp_volume,
};
use respmotion::io::{read_field, read_volume, write_field, write_volume};
use respmotion::model::{evaluate_model, fit_model, load_model, save_model, MotionModel, PhaseObservation};
use respmotion::pyramid::{downsample, upsample_replicate};
use respmotion::transfer::transfer_phase_field;
use respmotion::{DisplacementField, GridDomain, ScalarVolume, Vec3};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

/// Low-frequency field vanishing at the border, scaled to `amp` (voxels).
fn smooth_field(d: GridDomain, phase: [f64; 3], amp: f64) -> DisplacementField {
    let ext = d.extent();
    let raw = DisplacementField::from_fn(d, |p| {
        let s: Vec3 = std::array::from_fn(|k| (p[k] - d.origin[k]) / ext[k]);
        let w: f64 = s.iter().map(|x| (std::f64::consts::PI * x).sin().powi(2)).product();
        std::array::from_fn(|k| w * (std::f64::consts::PI * (s[(k + 1) % 3] + 2.0 * phase[k])).cos())
    });
    let m = raw.max_norm();
    let f = amp * d.min_spacing() / m;
    DisplacementField {
        domain: d,
        u: raw.u.iter().map(|v| v.map(|c| c * f)).collect(),
    }
}

fn box_mask(d: GridDomain, lo: [usize; 3], hi: [usize; 3]) -> ScalarVolume {
    ScalarVolume::from_fn(d, 0.0, |p| {
        let c = d.continuous_index(p);
        f64::from((0..3).all(|k| c[k] >= lo[k] as f64 && c[k] < hi[k] as f64))
    })
}

fn sup_diff(a: &DisplacementField, b: &DisplacementField, margin: usize) -> f64 {
    let [nx, ny, nz] = a.domain.dims;
    let mut worst = 0.0f64;
    for k in margin..nz - margin {
        for j in margin..ny - margin {
            for i in margin..nx - margin {
                let idx = a.domain.index(i, j, k);
                for c in 0..3 {
                    worst = worst.max((a.u[idx][c] - b.u[idx][c]).abs());
                }
            }
        }
    }
    worst
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn trilinear_reproduces_affine_functions(
        c in prop::array::uniform4(-10.0f64..10.0),
        h in 0.5f64..3.0,
        p in prop::array::uniform3(0.0f64..1.0),
    ) {
        let d = GridDomain::new([6, 7, 5], [h, 1.3 * h, 0.8 * h], [2.0, -1.0, 0.5]).unwrap();
        let f = |x: Vec3| c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[2];
        let vol = ScalarVolume::from_fn(d, 0.0, f);
        let ext = d.extent();
        let x: Vec3 = std::array::from_fn(|k| d.origin[k] + p[k] * ext[k]);
        let got = vol.sample(x).unwrap();
        let want = f(x);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn identity_warp_is_bitwise_identity(seed in 0u64..1000) {
        let d = GridDomain::cube(7, 1.5).unwrap();
        let vol = ScalarVolume::from_fn(d, -1000.0, |p| ((p[0] * 1.7 + p[1] * 0.3 + seed as f64).sin() * 500.0).round() / 7.0);
        let out = warp_volume(&vol, &DisplacementField::identity(d));
        prop_assert_eq!(out.data, vol.data);
    }

    #[test]
    fn constant_fields_have_unit_jacobian(shift in prop::array::uniform3(-20.0f64..20.0)) {
        let d = GridDomain::new([5, 6, 7], [1.0, 2.0, 0.5], [0.0; 3]).unwrap();
        let j = jacobian_determinant(&DisplacementField::constant(d, shift)).unwrap();
        prop_assert!(j.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn down_then_up_preserves_mean(data in prop::collection::vec(-1000.0f64..1000.0, 8 * 6 * 4)) {
        let d = GridDomain::new([8, 6, 4], [1.0; 3], [0.0; 3]).unwrap();
        let vol = ScalarVolume::new(d, data, 0.0).unwrap();
        let back = upsample_replicate(&downsample(&vol, 2).unwrap(), d, 2);
        prop_assert!((back.mean() - vol.mean()).abs() <= 1e-9 * vol.data.iter().map(|v| v.abs()).fold(1.0, f64::max));
    }

    #[test]
    fn composition_is_associative_for_smooth_fields(
        phases in prop::array::uniform3(prop::array::uniform3(0.0f64..1.0)),
        amps in prop::array::uniform3(0.0f64..3.0),
    ) {
        // Large enough that a 3-voxel field varies slowly from voxel to voxel.
        let d = GridDomain::cube(32, 1.0).unwrap();
        let [a, b, c] = [0, 1, 2].map(|i| smooth_field(d, phases[i], amps[i]));
        let left = compose_fields(&compose_fields(&a, &b), &c);
        let right = compose_fields(&a, &compose_fields(&b, &c));
        let dev = sup_diff(&left, &right, 0);
        prop_assert!(dev < 0.05, "deviation {dev} voxel");
    }

    #[test]
    fn inversion_round_trip(phase in prop::array::uniform3(0.0f64..1.0), frac in 0.02f64..0.12) {
        let d = GridDomain::cube(20, 2.0).unwrap();
        let field = smooth_field(d, phase, frac * 19.0);
        let tol = 0.01;
        let inv = invert_field(&field, tol, 200);
        prop_assert!(inv.converged);
        let r = inversion_residual(&field, &inv.field);
        prop_assert!(r < 10.0 * tol, "residual {r} mm");
    }

    #[test]
    fn identity_conjugation_is_exact(phase in prop::array::uniform3(0.0f64..1.0), amp in 0.0f64..4.0) {
        let d = GridDomain::cube(10, 1.5).unwrap();
        let f = smooth_field(d, phase, amp);
        let id = DisplacementField::identity(d);
        let out = transfer_phase_field(&id, &id, &f).unwrap();
        prop_assert!(sup_diff(&out, &f, 0) <= 1e-9);
    }

    #[test]
    fn dice_is_symmetric(a in prop::collection::vec(any::<bool>(), 216), b in prop::collection::vec(any::<bool>(), 216)) {
        let d = GridDomain::cube(6, 1.0).unwrap();
        let m = |v: &[bool]| ScalarVolume::new(d, v.iter().map(|&x| f64::from(x)).collect(), 0.0).unwrap();
        let (ma, mb) = (m(&a), m(&b));
        prop_assert_eq!(dice(&ma, &mb).unwrap().dice.to_bits(), dice(&mb, &ma).unwrap().dice.to_bits());
    }

    #[test]
    fn eroding_a_nested_cube_never_raises_dice(lo in 1usize..4, width in 2usize..5, outer in 1usize..3) {
        let d = GridDomain::cube(12, 1.0).unwrap();
        let b = box_mask(d, [lo.saturating_sub(outer); 3], [lo + width + outer; 3]);
        let a = box_mask(d, [lo; 3], [lo + width; 3]);
        let eroded = box_mask(d, [lo + 1; 3], [lo + width; 3]);
        prop_assert!(dice(&eroded, &b).unwrap().dice <= dice(&a, &b).unwrap().dice);
    }

    #[test]
    fn atlas_chain_with_identity_fields_is_direct_dice(lo in 0usize..4, hi in 5usize..8) {
        let d = GridDomain::cube(8, 1.0).unwrap();
        let phase_masks = vec![box_mask(d, [lo; 3], [hi; 3]), box_mask(d, [lo + 1; 3], [hi; 3])];
        let target = box_mask(d, [2; 3], [6; 3]);
        let id = DisplacementField::identity(d);
        let chains = [respmotion::evaluation::StructureChain { name: "s", phase_masks: &phase_masks, target_mask: &target }];
        let rows = atlas_chain_dice(&chains, &[id.clone(), id.clone()], &id, 0.01, 50).unwrap();
        for (j, r) in rows.iter().enumerate() {
            let direct = dice(&warp_mask_nn(&phase_masks[j], &id).unwrap(), &target).unwrap();
            prop_assert_eq!(r.dice, direct.dice);
        }
    }
}

/// Coefficient fields and `n` distinct full-rank signal states.
fn synthetic(seed: u64, n: usize) -> (MotionModel, Vec<(f64, f64)>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = GridDomain::new([3, 4, 2], [1.0, 1.5, 2.0], [0.0; 3]).unwrap();
    let mut coef = |s: f64| {
        (0..d.len())
            .map(|_| std::array::from_fn(|_| rng.gen_range(-s..s)))
            .collect::<Vec<Vec3>>()
    };
    let model = MotionModel {
        domain: d,
        a1: coef(0.1),
        a2: coef(0.3),
        a3: coef(5.0),
        j_ref: 0,
        provenance: String::new(),
    };
    let states = (0..n)
        .map(|j| {
            let t = j as f64 / n as f64 * std::f64::consts::TAU;
            (
                250.0 * t.sin() + rng.gen_range(-5.0..5.0),
                300.0 * t.cos() + rng.gen_range(-5.0..5.0),
            )
        })
        .collect();
    (model, states)
}

fn observations(model: &MotionModel, states: &[(f64, f64)], noise: u64) -> Vec<PhaseObservation> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise);
    states
        .iter()
        .enumerate()
        .map(|(j, &(v, vprime))| {
            let mut field = evaluate_model(model, v, vprime).unwrap();
            if noise > 0 {
                field
                    .u
                    .iter_mut()
                    .for_each(|u| u.iter_mut().for_each(|c| *c += rng.gen_range(-0.5..0.5)));
            }
            PhaseObservation {
                field,
                v,
                vprime,
                phase_index: j,
            }
        })
        .collect()
}

fn rel_dev(a: &[Vec3], b: &[Vec3]) -> f64 {
    let scale = b.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn fit_recovers_generating_coefficients(seed in 0u64..10_000, n in 3usize..12) {
        let (truth, states) = synthetic(seed, n);
        let fit = fit_model(&observations(&truth, &states, 0), 0).unwrap();
        prop_assert!(rel_dev(&fit.a1, &truth.a1) <= 1e-9);
        prop_assert!(rel_dev(&fit.a2, &truth.a2) <= 1e-9);
        prop_assert!(rel_dev(&fit.a3, &truth.a3) <= 1e-9);
    }

    #[test]
    fn fit_residuals_are_orthogonal_to_the_design(seed in 0u64..10_000, n in 4usize..12) {
        let (truth, states) = synthetic(seed, n);
        let obs = observations(&truth, &states, seed + 1);
        let fit = fit_model(&obs, 0).unwrap();
        let d = truth.domain;
        let mut sums = vec![[[0.0f64; 3]; 3]; d.len()];
        for o in &obs {
            let pred = evaluate_model(&fit, o.v, o.vprime).unwrap();
            for i in 0..d.len() {
                for c in 0..3 {
                    let r = o.field.u[i][c] - pred.u[i][c];
                    sums[i][0][c] += r * o.v;
                    sums[i][1][c] += r * o.vprime;
                    sums[i][2][c] += r;
                }
            }
        }
        let vmax = obs.iter().map(|o| o.v.abs()).fold(1.0, f64::max);
        let dmax = obs.iter().map(|o| o.vprime.abs()).fold(1.0, f64::max);
        let ymax = obs.iter().flat_map(|o| o.field.u.iter().flatten()).fold(0.0f64, |m, x| m.max(x.abs()));
        for s in &sums {
            for c in 0..3 {
                prop_assert!(s[0][c].abs() <= 1e-6 * ymax * vmax * n as f64);
                prop_assert!(s[1][c].abs() <= 1e-6 * ymax * dmax * n as f64);
                prop_assert!(s[2][c].abs() <= 1e-6 * ymax * n as f64);
            }
        }
    }

    #[test]
    fn fit_is_equivariant_under_signal_units(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let (truth, states) = synthetic(seed, 6);
        let obs = observations(&truth, &states, seed + 7);
        let scaled: Vec<_> = obs.iter().map(|o| PhaseObservation { v: o.v * scale, vprime: o.vprime * scale, ..o.clone() }).collect();
        let (a, b) = (fit_model(&obs, 0).unwrap(), fit_model(&scaled, 0).unwrap());
        let a1_scaled: Vec<Vec3> = a.a1.iter().map(|c| c.map(|x| x / scale)).collect();
        prop_assert!(rel_dev(&b.a1, &a1_scaled) <= 1e-9);
        let (v, vp) = (37.0, -12.0);
        let pa = evaluate_model(&a, v, vp).unwrap();
        let pb = evaluate_model(&b, v * scale, vp * scale).unwrap();
        prop_assert!(rel_dev(&pb.u, &pa.u) <= 1e-9);
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn volume_and_field_files_round_trip_bitwise(
        values in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 60),
        comps in prop::collection::vec(-1e3f64..1e3, 180),
        h in prop::array::uniform3(0.1f64..5.0),
        origin in prop::array::uniform3(-500.0f64..500.0),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let d = GridDomain::new([3, 4, 5], h, origin).unwrap();
        let vol = ScalarVolume::new(d, values.iter().map(|&x| f64::from(x)).collect(), -1000.0).unwrap();
        write_volume(&vol, dir.path().join("v.mhd")).unwrap();
        let back = read_volume(dir.path().join("v.mhd")).unwrap();
        prop_assert_eq!(back.domain, d);
        prop_assert_eq!(back.data, vol.data);

        let f = DisplacementField::new(d, comps.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
        write_field(&f, dir.path().join("f.mhd")).unwrap();
        prop_assert_eq!(read_field(dir.path().join("f.mhd")).unwrap(), f);
    }

    #[test]
    fn model_files_round_trip_bitwise(seed in 0u64..10_000) {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = synthetic(seed, 3);
        let m = m.with_provenance(format!("seed {seed}"));
        save_model(&m, dir.path().join("m.bin")).unwrap();
        prop_assert_eq!(load_model(dir.path().join("m.bin")).unwrap(), m);
    }
}
