//! Transfer of a 4D reference patient's motion onto a static 3D patient.
//!
//! Each reference phase field is conjugated by the inter-patient map,
//! `phi_j' = phi_inter^{-1} ∘ phi_j ∘ phi_inter`, and the surrogate model is
//! refit on the new patient's grid.

use crate::error::{Error, Result};
use crate::field::{
    compose_fields, inversion_residual, invert_field_on, jacobian_determinant, value_range, DEFAULT_INVERSION_MAX_ITER,
    DEFAULT_INVERSION_TOL,
};
use crate::grid::{DisplacementField, ScalarVolume};
use crate::model::{fit_model, MotionModel, PhaseObservation};
use crate::par;
use crate::registration::{register, register_phases_masked, RegistrationParams, RegistrationReport};
use crate::signal::{derive_signal, SurrogateSignal};

/// Registers the new patient's reference image (fixed) to the 4D patient's
/// reference phase (moving). The field lives on the new patient's grid and
/// maps it into the 4D patient: `pat4d(x + u(x)) ≈ pat3d(x)`.
pub fn register_inter_patient(
    pat3d_ref: &ScalarVolume,
    pat4d_ref: &ScalarVolume,
    params: &RegistrationParams,
) -> Result<(DisplacementField, RegistrationReport)> {
    register(pat3d_ref, pat4d_ref, params, None)
}

/// `phi_inter^{-1} ∘ phi_4d ∘ phi_inter` on the grid of `phi_inter`.
/// `phi_inter_inv` must share the grid of `phi_4d`.
pub fn transfer_phase_field(
    phi_inter: &DisplacementField,
    phi_inter_inv: &DisplacementField,
    phi_4d: &DisplacementField,
) -> Result<DisplacementField> {
    phi_4d
        .domain
        .ensure_compatible(&phi_inter_inv.domain, "4D phase field vs inverse inter-patient field")?;
    let inner = compose_fields(phi_4d, phi_inter);
    Ok(compose_fields(phi_inter_inv, &inner))
}

/// Which signal drives the transferred model after fitting.
#[derive(Clone, Debug, PartialEq)]
pub enum SignalSource {
    Reference,
    Target(SurrogateSignal),
    /// Reference signal multiplied by a factor.
    Scaled(f64),
}

#[derive(Clone, Debug)]
pub struct TransferParams {
    /// Maximum-inhalation phase of the 4D series.
    pub j_ref: Option<usize>,
    pub intra: RegistrationParams,
    pub inter: RegistrationParams,
    pub inversion_tol: f64,
    pub inversion_max_iter: usize,
    pub signal_source: SignalSource,
}

impl Default for TransferParams {
    fn default() -> Self {
        Self {
            j_ref: None,
            intra: RegistrationParams::intra_phase(None),
            inter: RegistrationParams::inter_patient(),
            inversion_tol: DEFAULT_INVERSION_TOL,
            inversion_max_iter: DEFAULT_INVERSION_MAX_ITER,
            signal_source: SignalSource::Reference,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseDiagnostics {
    pub phase: usize,
    /// Largest displacement (mm).
    pub max_norm: f64,
    pub jacobian_min: f64,
    pub jacobian_max: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TransferReport {
    pub inter_registration: RegistrationReport,
    /// `max |phi_inter ∘ phi_inter^{-1} - id|` (mm).
    pub inversion_residual: f64,
    pub inversion_iterations: usize,
    pub inversion_converged: bool,
    /// One entry per transferred field.
    pub phases: Vec<PhaseDiagnostics>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TransferBundle {
    /// New patient -> 4D patient, on the new patient's grid.
    pub phi_inter: DisplacementField,
    /// On the 4D patient's grid.
    pub phi_inter_inv: DisplacementField,
    /// 4D phase fields (phase -> reference phase).
    pub phase_fields: Vec<DisplacementField>,
    /// Conjugated phase fields on the new patient's grid.
    pub transferred_fields: Vec<DisplacementField>,
    /// Model of the 4D patient fitted on its own grid.
    pub reference_model: MotionModel,
    /// Signal to animate the transferred model with.
    pub animation_signal: SurrogateSignal,
    pub report: TransferReport,
}

fn with_derivative(signal: &SurrogateSignal) -> Result<SurrogateSignal> {
    match signal.derivative() {
        Some(_) => Ok(signal.clone()),
        None => derive_signal(signal),
    }
}

fn observations(fields: &[DisplacementField], signal: &SurrogateSignal) -> Result<Vec<PhaseObservation>> {
    fields
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let (v, vprime) = signal.state(j)?;
            Ok(PhaseObservation {
                field: f.clone(),
                v,
                vprime,
                phase_index: j,
            })
        })
        .collect()
}

fn diagnostics(phase: usize, f: &DisplacementField) -> Result<PhaseDiagnostics> {
    let (jacobian_min, jacobian_max) = value_range(&jacobian_determinant(f)?);
    Ok(PhaseDiagnostics {
        phase,
        max_norm: f.max_norm(),
        jacobian_min,
        jacobian_max,
    })
}

/// Full pipeline: register every phase to `j_ref`, register the new patient
/// to the reference phase, conjugate each phase field and refit.
/// `sliding_masks` are optional per-phase masks for the intra-patient step.
pub fn transfer_model(
    phases: &[ScalarVolume],
    signal: &SurrogateSignal,
    pat3d_ref: &ScalarVolume,
    params: &TransferParams,
    sliding_masks: Option<&[ScalarVolume]>,
) -> Result<(MotionModel, TransferBundle)> {
    let j_ref = params
        .j_ref
        .ok_or_else(|| Error::Invalid("no reference (maximum inhalation) phase designated".into()))?;
    if signal.len() != phases.len() {
        return Err(Error::Invalid(format!(
            "signal has {} samples for {} phases",
            signal.len(),
            phases.len()
        )));
    }
    let fields = register_phases_masked(phases, j_ref, &params.intra, sliding_masks)
        .map_err(|e| e.in_stage("intra-patient registration"))?
        .fields;
    transfer_fields(fields, &phases[j_ref], signal, pat3d_ref, params)
}

/// As [`transfer_model`] with the 4D phase fields already computed.
pub fn transfer_fields(
    phase_fields: Vec<DisplacementField>,
    pat4d_ref: &ScalarVolume,
    signal: &SurrogateSignal,
    pat3d_ref: &ScalarVolume,
    params: &TransferParams,
) -> Result<(MotionModel, TransferBundle)> {
    let j_ref = params
        .j_ref
        .ok_or_else(|| Error::Invalid("no reference (maximum inhalation) phase designated".into()))?;
    if j_ref >= phase_fields.len() {
        return Err(Error::Invalid(format!(
            "reference phase {j_ref} out of range for {} phases",
            phase_fields.len()
        )));
    }
    if signal.len() != phase_fields.len() {
        return Err(Error::Invalid(format!(
            "signal has {} samples for {} phase fields",
            signal.len(),
            phase_fields.len()
        )));
    }
    for (j, f) in phase_fields.iter().enumerate() {
        pat4d_ref
            .domain
            .ensure_compatible(&f.domain, &format!("phase field {j} vs 4D reference"))?;
    }
    let signal = with_derivative(signal)?;

    let reference_model = fit_model(&observations(&phase_fields, &signal)?, j_ref)
        .map_err(|e| e.in_stage("reference model fit"))?
        .with_provenance("reference patient");

    let (phi_inter, inter_report) = register_inter_patient(pat3d_ref, pat4d_ref, &params.inter)
        .map_err(|e| e.in_stage("inter-patient registration"))?;

    let inv = invert_field_on(
        &phi_inter,
        pat4d_ref.domain,
        params.inversion_tol,
        params.inversion_max_iter,
    );
    let mut report = TransferReport {
        inter_registration: inter_report,
        inversion_residual: inversion_residual(&phi_inter, &inv.field),
        inversion_iterations: inv.iterations,
        inversion_converged: inv.converged,
        ..Default::default()
    };
    if !inv.converged {
        report.warnings.push(format!(
            "inter-patient inversion did not converge in {} iterations (last update {:.4} mm)",
            inv.iterations, inv.last_update
        ));
    }

    let transferred = par::map_items(&phase_fields, |j, f| {
        transfer_phase_field(&phi_inter, &inv.field, f).map_err(|e| e.in_stage(format!("transfer phase {j}")))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    report.phases = transferred
        .iter()
        .enumerate()
        .map(|(j, f)| diagnostics(j, f))
        .collect::<Result<_>>()?;
    for d in &report.phases {
        if d.jacobian_min <= 0.0 {
            report.warnings.push(format!(
                "transferred field of phase {} folds (min Jacobian {:.3})",
                d.phase, d.jacobian_min
            ));
        }
    }

    let model = fit_model(&observations(&transferred, &signal)?, j_ref)
        .map_err(|e| e.in_stage("transferred model fit"))?
        .with_provenance("transferred");

    let animation_signal = match &params.signal_source {
        SignalSource::Reference => signal.clone(),
        SignalSource::Target(s) => with_derivative(s)?,
        SignalSource::Scaled(k) => {
            if !k.is_finite() {
                return Err(Error::Invalid(format!("signal scale factor {k} is not finite")));
            }
            signal.scaled(*k)
        }
    };

    let bundle = TransferBundle {
        phi_inter,
        phi_inter_inv: inv.field,
        phase_fields,
        transferred_fields: transferred,
        reference_model,
        animation_signal,
        report,
    };
    Ok((model, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{norm, sub, GridDomain, Vec3};

    fn random_smooth_field(d: GridDomain, seed: u64) -> DisplacementField {
        let s = seed as f64;
        DisplacementField::from_fn(d, |p| {
            [
                2.0 * (0.11 * p[0] + s).sin() * (0.07 * p[1]).cos(),
                -1.5 * (0.09 * p[2] + 0.3 * s).cos(),
                1.0 * (0.05 * (p[0] + p[1]) + s).sin(),
            ]
        })
    }

    #[test]
    fn identity_conjugation_returns_input() {
        let d = GridDomain::new([12, 10, 9], [2.0, 2.5, 3.0], [1.0, -4.0, 0.5]).unwrap();
        let f = random_smooth_field(d, 3);
        let id = DisplacementField::identity(d);
        let out = transfer_phase_field(&id, &id, &f).unwrap();
        let worst = out
            .u
            .iter()
            .zip(&f.u)
            .map(|(a, b)| norm(sub(*a, *b)))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-9, "{worst}");
    }

    #[test]
    fn conjugating_identity_gives_identity() {
        let d = GridDomain::cube(16, 2.0).unwrap();
        let phi = random_smooth_field(d, 1);
        let inv = invert_field_on(&phi, d, 1e-6, 200).field;
        let out = transfer_phase_field(&phi, &inv, &DisplacementField::identity(d)).unwrap();
        // Interior only: the border extension of the inverse is approximate.
        let mut worst = 0.0f64;
        for k in 3..13 {
            for j in 3..13 {
                for i in 3..13 {
                    worst = worst.max(norm(out.u[d.index(i, j, k)]));
                }
            }
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn scaling_conjugates_translation_to_scaled_translation() {
        // phi_inter(x) = c + (x - c) / s; shifting by t in the 4D frame is a
        // shift by s * t in the new patient's frame.
        let d = GridDomain::cube(24, 1.0).unwrap();
        let c = d.center();
        let s = 1.1;
        let t: Vec3 = [1.0, -0.5, 2.0];
        let phi_inter = DisplacementField::from_fn(d, |p| std::array::from_fn(|k| (c[k] + (p[k] - c[k]) / s) - p[k]));
        let inv = DisplacementField::from_fn(d, |p| std::array::from_fn(|k| (c[k] + (p[k] - c[k]) * s) - p[k]));
        let shift = DisplacementField::constant(d, t);
        let out = transfer_phase_field(&phi_inter, &inv, &shift).unwrap();
        let expect: Vec3 = std::array::from_fn(|k| s * t[k]);
        let worst = (0..d.len())
            .filter(|&i| norm(sub(d.position(i), c)) < 8.0)
            .map(|i| norm(sub(out.u[i], expect)))
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = GridDomain::cube(8, 1.0).unwrap();
        let b = GridDomain::cube(9, 1.0).unwrap();
        let err = transfer_phase_field(
            &DisplacementField::identity(a),
            &DisplacementField::identity(a),
            &DisplacementField::identity(b),
        );
        assert!(matches!(err, Err(Error::GridMismatch(_))));
    }

    #[test]
    fn missing_reference_phase_is_an_error() {
        let d = GridDomain::cube(8, 1.0).unwrap();
        let img = ScalarVolume::filled(d, 0.0, 0.0);
        let sig = SurrogateSignal::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.0]).unwrap();
        let phases = vec![img.clone(), img.clone(), img.clone()];
        let err = transfer_model(&phases, &sig, &img, &TransferParams::default(), None).unwrap_err();
        assert!(err.to_string().contains("reference"));
    }
}
