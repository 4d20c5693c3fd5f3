//! Variational deformable registration: minimise `D(fixed, moving ∘ φ) + α R(u)`
//! over a dense displacement field by multi-resolution gradient descent
//! with backtracking.

pub mod distance;
pub mod precondition;
pub mod regularizer;

pub use distance::{distance_nssd, distance_ssd, DistanceKind, Evaluation, WarpSample, WarpedImage};
pub use regularizer::{reg_diffusive, reg_sliding, RegularizerKind};

use crate::error::{Error, Result};
use crate::field::resample_field;
use crate::grid::{norm, DisplacementField, ScalarVolume, Vec3};
use crate::par;
use crate::pyramid::{downsample, downsample_mask};
use precondition::Smoother;

/// Regulariser weight for intra-patient inter-phase registration.
pub const ALPHA_INTRA: f64 = 0.1;
/// Regulariser weight for inter-patient registration.
pub const ALPHA_INTER: f64 = 1.0;

/// Coarse levels stop before any axis would fall below this many voxels.
const MIN_LEVEL_DIM: usize = 4;

#[derive(Clone, Debug)]
pub struct RegistrationParams {
    pub distance: DistanceKind,
    pub regularizer: RegularizerKind,
    pub alpha: f64,
    /// Pyramid depth (1 = full resolution only).
    pub levels: usize,
    pub iters_per_level: usize,
    /// Largest displacement update per iteration, in voxels of the current level.
    pub step0: f64,
    pub step_shrink: f64,
    /// A level stops once `|Ω| · max |force|` falls below this.
    pub grad_tol: f64,
    /// Rejected trial steps before a level is declared stalled.
    pub max_backtracks: usize,
    /// Rescale both images by the fixed image's mean and standard deviation
    /// before optimising, so `alpha` does not depend on intensity units.
    pub normalize_intensity: bool,
    /// Width in voxels of the Gaussian applied to the force before each
    /// step (0 = plain gradient).
    pub smoothing_sigma: f64,
    /// Binary interface mask on the fixed grid (required for `SlidingAware`).
    pub sliding_mask: Option<ScalarVolume>,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self::inter_patient()
    }
}

impl RegistrationParams {
    /// SSD distance with diffusive regularisation, `alpha = 1`.
    pub fn inter_patient() -> Self {
        Self {
            distance: DistanceKind::Ssd,
            regularizer: RegularizerKind::Diffusive,
            alpha: ALPHA_INTER,
            levels: 3,
            iters_per_level: 100,
            step0: 0.5,
            step_shrink: 0.5,
            grad_tol: 1e-4,
            max_backtracks: 12,
            normalize_intensity: true,
            smoothing_sigma: 2.0,
            sliding_mask: None,
        }
    }

    /// NSSD distance, `alpha = 0.1`; sliding-aware when a mask is supplied,
    /// plain diffusive otherwise.
    pub fn intra_phase(sliding_mask: Option<ScalarVolume>) -> Self {
        Self {
            distance: DistanceKind::Nssd,
            regularizer: if sliding_mask.is_some() {
                RegularizerKind::SlidingAware
            } else {
                RegularizerKind::Diffusive
            },
            alpha: ALPHA_INTRA,
            sliding_mask,
            ..Self::inter_patient()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if self.levels < 1 || self.iters_per_level < 1 {
            return bad("levels and iters_per_level must be at least 1".into());
        }
        if !(self.step0.is_finite() && self.step0 > 0.0) {
            return bad(format!("step0 must be positive, got {}", self.step0));
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return bad(format!("step_shrink must lie in (0, 1), got {}", self.step_shrink));
        }
        if !(self.smoothing_sigma.is_finite() && self.smoothing_sigma >= 0.0) {
            return bad(format!(
                "smoothing_sigma must be non-negative, got {}",
                self.smoothing_sigma
            ));
        }
        if !(self.grad_tol >= 0.0) {
            return bad("grad_tol must be non-negative".into());
        }
        match (&self.regularizer, &self.sliding_mask) {
            (RegularizerKind::SlidingAware, None) => bad("sliding-aware regulariser requires a sliding mask".into()),
            (_, Some(m)) => m.ensure_binary("sliding mask"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyRecord {
    /// 0 is the finest level.
    pub level: usize,
    /// 0 is the state on entry to the level.
    pub iter: usize,
    pub distance: f64,
    pub regularizer: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RegistrationReport {
    /// Entry state and every accepted step, coarse to fine.
    pub energy_trace: Vec<EnergyRecord>,
    /// True when the finest level stopped on the gradient tolerance or
    /// stalled in backtracking rather than exhausting its budget.
    pub converged: bool,
    pub final_step: f64,
}

struct Level {
    fixed: ScalarVolume,
    moving: ScalarVolume,
    mask: Option<ScalarVolume>,
}

struct State {
    distance: f64,
    regularizer: f64,
    total: f64,
    force: Vec<Vec3>,
}

fn evaluate(level: &Level, params: &RegistrationParams, u: &DisplacementField) -> Result<State> {
    let warped = WarpedImage::warp(&level.moving, u);
    let d = params.distance.evaluate(&level.fixed, &warped)?;
    let r = match (params.regularizer, &level.mask) {
        (RegularizerKind::SlidingAware, Some(mask)) => reg_sliding(u, mask)?,
        _ => reg_diffusive(u),
    };
    let total = d.energy + params.alpha * r.energy;
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "registration energy is not finite (distance {}, regulariser {})",
            d.energy, r.energy
        )));
    }
    let alpha = params.alpha;
    let force = par::map(d.force.len(), |i| {
        let (a, b) = (d.force[i], r.force[i]);
        [a[0] + alpha * b[0], a[1] + alpha * b[1], a[2] + alpha * b[2]]
    });
    Ok(State {
        distance: d.energy,
        regularizer: r.energy,
        total,
        force,
    })
}

fn build_pyramid(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    mask: Option<&ScalarVolume>,
    levels: usize,
) -> Result<Vec<Level>> {
    let mut out = vec![Level {
        fixed: fixed.clone(),
        moving: moving.clone(),
        mask: mask.cloned(),
    }];
    while out.len() < levels {
        let last = out.last().expect("non-empty");
        let can_halve = |v: &ScalarVolume| v.domain.dims.iter().all(|&n| n >= 2 * MIN_LEVEL_DIM);
        if !can_halve(&last.fixed) || !can_halve(&last.moving) {
            break;
        }
        let next = Level {
            fixed: downsample(&last.fixed, 2)?,
            moving: downsample(&last.moving, 2)?,
            mask: last.mask.as_ref().map(|m| downsample_mask(m, 2)).transpose()?,
        };
        out.push(next);
    }
    Ok(out)
}

/// Registers `moving` onto `fixed`, returning `u` on the fixed grid such that
/// `moving(x + u(x)) ≈ fixed(x)`.
pub fn register(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    params: &RegistrationParams,
    init: Option<&DisplacementField>,
) -> Result<(DisplacementField, RegistrationReport)> {
    params.validate()?;
    if let Some(f) = init {
        fixed
            .domain
            .ensure_compatible(&f.domain, "initial field vs fixed image")?;
    }
    if let Some(m) = &params.sliding_mask {
        fixed
            .domain
            .ensure_compatible(&m.domain, "sliding mask vs fixed image")?;
    }

    let (fixed_n, moving_n);
    let (fixed, moving) = if params.normalize_intensity && params.distance == DistanceKind::Ssd {
        let (mu, sd) = (fixed.mean(), fixed.std_dev());
        if sd > 0.0 {
            fixed_n = fixed.map_values(|v| (v - mu) / sd);
            moving_n = moving.map_values(|v| (v - mu) / sd);
            (&fixed_n, &moving_n)
        } else {
            (fixed, moving)
        }
    } else {
        (fixed, moving)
    };

    let pyramid = build_pyramid(fixed, moving, params.sliding_mask.as_ref(), params.levels)?;
    let coarsest = pyramid.last().expect("non-empty").fixed.domain;
    let mut u = match init {
        Some(f) => resample_field(f, coarsest),
        None => DisplacementField::identity(coarsest),
    };
    let mut report = RegistrationReport::default();

    for (level_idx, level) in pyramid.iter().enumerate().rev() {
        u = resample_field(&u, level.fixed.domain);
        let voxels = level.fixed.domain.len() as f64;
        let h = level.fixed.domain.min_spacing();
        let mut state = evaluate(level, params, &u)?;
        let record = |iter: usize, s: &State| EnergyRecord {
            level: level_idx,
            iter,
            distance: s.distance,
            regularizer: s.regularizer,
            total: s.total,
        };
        report.energy_trace.push(record(0, &state));
        let mut step = params.step0;
        let mut converged = false;
        let smoother = (params.smoothing_sigma > 0.0).then(|| {
            let sliding = match params.regularizer {
                RegularizerKind::SlidingAware => level.mask.as_ref(),
                RegularizerKind::Diffusive => None,
            };
            Smoother::new(level.fixed.domain, params.smoothing_sigma, sliding)
        });

        for iter in 1..=params.iters_per_level {
            let gmax = par::max(state.force.len(), |i| norm(state.force[i]));
            if gmax * voxels < params.grad_tol || gmax == 0.0 {
                converged = true;
                break;
            }
            let smoothed = smoother.as_ref().map(|sm| sm.apply(&state.force));
            // Fall back to the raw force if the smoothed direction finds no descent.
            let directions: Vec<&[Vec3]> = match &smoothed {
                Some(p) => vec![p, &state.force],
                None => vec![&state.force],
            };
            let mut accepted = None;
            'search: for dir in directions {
                let dmax = par::max(dir.len(), |i| norm(dir[i]));
                if dmax == 0.0 {
                    continue;
                }
                let mut trial_step = step;
                for _ in 0..=params.max_backtracks {
                    let k = trial_step * h / dmax;
                    let trial = DisplacementField {
                        domain: u.domain,
                        u: par::map(u.u.len(), |i| {
                            let (a, g) = (u.u[i], dir[i]);
                            [a[0] - k * g[0], a[1] - k * g[1], a[2] - k * g[2]]
                        }),
                    };
                    let s = evaluate(level, params, &trial)?;
                    if s.total < state.total {
                        step = trial_step;
                        accepted = Some((trial, s));
                        break 'search;
                    }
                    trial_step *= params.step_shrink;
                }
            }
            match accepted {
                Some((trial, s)) => {
                    u = trial;
                    state = s;
                    report.energy_trace.push(record(iter, &state));
                    step = (step / params.step_shrink).min(params.step0);
                }
                None => {
                    converged = true;
                    break;
                }
            }
        }
        report.converged = converged;
        report.final_step = step;
    }
    Ok((u, report))
}

/// Result of registering every phase of a 4D series to its reference phase.
#[derive(Clone, Debug)]
pub struct PhaseFields {
    /// `fields[j]` maps phase `j` onto the reference phase; identity at `j_ref`.
    pub fields: Vec<DisplacementField>,
    /// `None` at the reference phase.
    pub reports: Vec<Option<RegistrationReport>>,
}

/// Registers every phase (fixed) to the reference phase (moving).
pub fn register_phases(phases: &[ScalarVolume], j_ref: usize, params: &RegistrationParams) -> Result<PhaseFields> {
    register_phases_masked(phases, j_ref, params, None)
}

/// As [`register_phases`], with an optional per-phase sliding mask (on each
/// phase's grid) overriding `params.sliding_mask`.
pub fn register_phases_masked(
    phases: &[ScalarVolume],
    j_ref: usize,
    params: &RegistrationParams,
    sliding_masks: Option<&[ScalarVolume]>,
) -> Result<PhaseFields> {
    if phases.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 phases, got {}", phases.len())));
    }
    if j_ref >= phases.len() {
        return Err(Error::Invalid(format!(
            "reference phase {j_ref} out of range for {} phases",
            phases.len()
        )));
    }
    if let Some(m) = sliding_masks {
        if m.len() != phases.len() {
            return Err(Error::Invalid(format!(
                "{} sliding masks for {} phases",
                m.len(),
                phases.len()
            )));
        }
    }
    let domain = phases[j_ref].domain;
    for (j, p) in phases.iter().enumerate() {
        domain.ensure_compatible(&p.domain, &format!("phase {j} vs reference phase"))?;
    }
    let results = par::map_items(phases, |j, phase| {
        if j == j_ref {
            return Ok((DisplacementField::identity(domain), None));
        }
        let mut p = params.clone();
        if let Some(masks) = sliding_masks {
            p.sliding_mask = Some(masks[j].clone());
        }
        register(phase, &phases[j_ref], &p, None)
            .map(|(f, r)| (f, Some(r)))
            .map_err(|e| e.in_stage(format!("register phase {j}")))
    });
    let mut fields = Vec::with_capacity(phases.len());
    let mut reports = Vec::with_capacity(phases.len());
    for r in results {
        let (f, rep) = r?;
        fields.push(f);
        reports.push(rep);
    }
    Ok(PhaseFields { fields, reports })
}
