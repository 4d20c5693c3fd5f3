//! Analytic 4D breathing phantom with known motion.
//!
//! The anatomy is a set of soft-edged ellipsoids. Motion follows
//! `u(x, t) = a1(x) v(t) + a2(x) v'(t)` with `v` relative to the reference
//! (maximum inhalation) phase, so the ground truth lies exactly inside the
//! surrogate model family.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{add, sub, DisplacementField, GridDomain, ScalarVolume, Vec3, AIR_HU};
use crate::model::{evaluate_model, MotionModel};
use crate::par;
use crate::signal::{derive_signal, simulate_signal, SignalKind, SignalSpec, SurrogateSignal};

pub const BODY_HU: f64 = 40.0;
pub const LIVER_HU: f64 = 80.0;
pub const LUNG_HU: f64 = -800.0;
pub const RIB_HU: f64 = 400.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    /// Offset of the centre from the grid centre (mm).
    pub offset: Vec3,
    pub radii: Vec3,
}

impl Ellipsoid {
    /// Normalised radius: `< 1` inside, `1` on the surface.
    fn q(&self, center: Vec3, p: Vec3) -> f64 {
        (0..3)
            .map(|k| ((p[k] - center[k] - self.offset[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn contains(&self, center: Vec3, p: Vec3) -> bool {
        self.q(center, p) <= 1.0
    }

    /// Smooth indicator whose edge ramps over `2 * half_width` mm.
    fn soft(&self, center: Vec3, p: Vec3, half_width: f64) -> f64 {
        let rmin = self.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let d = (self.q(center, p) - 1.0) * rmin;
        let t = ((d + half_width) / (2.0 * half_width)).clamp(0.0, 1.0);
        1.0 - t * t * (3.0 - 2.0 * t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub liver: Ellipsoid,
    pub ribs: bool,
    /// Peak-to-peak superior-inferior displacement at the diaphragm (mm).
    pub amplitude_z: f64,
    /// Lag of the anterior-posterior motion behind the volume signal (rad);
    /// 0 disables hysteresis.
    pub hysteresis_phase: f64,
    pub n_phases: usize,
    /// Tidal volume amplitude (ml) and period (s) of the simulated signal.
    pub tidal_volume: f64,
    pub period: f64,
    /// Relative amplitude jitter of the simulated signal.
    pub amp_jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::with_grid([64; 3], [5.0; 3])
    }
}

impl PhantomSpec {
    /// Default anatomy laid out proportionally to the field of view.
    pub fn with_grid(dims: [usize; 3], spacing: Vec3) -> Self {
        let fov: Vec3 = std::array::from_fn(|k| (dims[k] - 1) as f64 * spacing[k]);
        let e = |o: Vec3, r: Vec3| Ellipsoid {
            offset: std::array::from_fn(|k| o[k] * fov[k]),
            radii: std::array::from_fn(|k| r[k] * fov[k]),
        };
        Self {
            dims,
            spacing,
            body: e([0.0, 0.0, 0.0], [0.40, 0.30, 0.42]),
            lungs: [
                e([-0.17, 0.0, 0.14], [0.12, 0.17, 0.20]),
                e([0.17, 0.0, 0.14], [0.12, 0.17, 0.20]),
            ],
            liver: e([-0.13, 0.0, -0.16], [0.17, 0.14, 0.10]),
            ribs: false,
            amplitude_z: 25.0,
            hysteresis_phase: 0.4,
            n_phases: 14,
            tidal_volume: 250.0,
            period: 4.0,
            amp_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn domain(&self) -> Result<GridDomain> {
        GridDomain::new(self.dims, self.spacing, [0.0; 3])
    }

    /// Index of the maximum-inhalation phase.
    pub fn j_ref(&self) -> usize {
        self.n_phases / 2
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.domain()?;
        if self.n_phases < 2 {
            return Err(Error::Invalid(format!(
                "n_phases must be at least 2, got {}",
                self.n_phases
            )));
        }
        for (name, v) in [
            ("amplitude_z", self.amplitude_z),
            ("hysteresis_phase", self.hysteresis_phase),
            ("tidal_volume", self.tidal_volume),
            ("period", self.period),
        ] {
            if !v.is_finite() {
                return Err(Error::Invalid(format!("{name} must be finite")));
            }
        }
        if self.amplitude_z < 0.0 || self.tidal_volume <= 0.0 || self.period <= 0.0 {
            return Err(Error::Invalid(
                "amplitude_z must be non-negative; tidal_volume and period positive".into(),
            ));
        }
        let c = d.center();
        let ext = d.extent();
        let named = [
            ("body", &self.body),
            ("left lung", &self.lungs[0]),
            ("right lung", &self.lungs[1]),
            ("liver", &self.liver),
        ];
        for (name, e) in named {
            if e.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::Invalid(format!("{name} radii must be positive")));
            }
            for k in 0..3 {
                let lo = c[k] + e.offset[k] - e.radii[k];
                let hi = c[k] + e.offset[k] + e.radii[k];
                // One voxel of margin keeps the soft edge on the grid.
                if lo < self.spacing[k] || hi > ext[k] - self.spacing[k] {
                    return Err(Error::Invalid(format!(
                        "{name} extends beyond the grid along axis {k} ([{lo:.1}, {hi:.1}] mm, grid [0, {:.1}] mm)",
                        ext[k]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Closed-form anatomy and motion coefficients of a phantom, evaluable at
/// any world point.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    pub spec: PhantomSpec,
    center: Vec3,
    edge_width: f64,
    diaphragm_z: f64,
    envelope_sigma: f64,
    /// `amplitude_z / peak-to-peak signal volume` (mm per ml).
    gain: f64,
    omega: f64,
}

impl PhantomGeometry {
    fn new(spec: &PhantomSpec, domain: &GridDomain, volume_pp: f64) -> Self {
        let center = domain.center();
        let lung_base = spec.lungs[0].offset[2] - spec.lungs[0].radii[2];
        let liver_top = spec.liver.offset[2] + spec.liver.radii[2];
        let fov_z = domain.extent()[2];
        Self {
            spec: spec.clone(),
            center,
            edge_width: domain.min_spacing(),
            diaphragm_z: center[2] + 0.5 * (lung_base + liver_top),
            envelope_sigma: 0.25 * fov_z,
            gain: if volume_pp > 0.0 {
                spec.amplitude_z / volume_pp
            } else {
                0.0
            },
            omega: 2.0 * PI / spec.period,
        }
    }

    /// Reference-phase intensity at `p`.
    pub fn intensity(&self, p: Vec3) -> f64 {
        let (c, w, s) = (self.center, self.edge_width, &self.spec);
        let body = s.body.soft(c, p, w);
        if body == 0.0 {
            return AIR_HU;
        }
        let liver = s.liver.soft(c, p, w);
        let lung = 1.0 - s.lungs.iter().map(|l| 1.0 - l.soft(c, p, w)).product::<f64>();
        let mut tissue = BODY_HU + (LIVER_HU - BODY_HU) * liver;
        tissue += (LUNG_HU - tissue) * lung;
        if s.ribs {
            tissue += (RIB_HU - tissue) * self.rib(p);
        }
        AIR_HU + (tissue - AIR_HU) * body
    }

    /// Thin shell just inside the body wall, banded along z above the diaphragm.
    fn rib(&self, p: Vec3) -> f64 {
        if p[2] < self.diaphragm_z {
            return 0.0;
        }
        let q = self.spec.body.q(self.center, p);
        let rmin = self.spec.body.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let shell = (-((q - 0.88) * rmin / self.edge_width).powi(2)).exp();
        let band = 0.5 + 0.5 * (2.0 * PI * (p[2] - self.diaphragm_z) / (6.0 * self.edge_width)).cos();
        shell * band.powi(4)
    }

    pub fn in_body(&self, p: Vec3) -> bool {
        self.spec.body.contains(self.center, p)
    }

    pub fn in_lungs(&self, p: Vec3) -> bool {
        self.spec.lungs.iter().any(|l| l.contains(self.center, p))
    }

    pub fn in_liver(&self, p: Vec3) -> bool {
        self.spec.liver.contains(self.center, p) && !self.in_lungs(p)
    }

    /// Motion envelope: 1 near the diaphragm, 0 on and outside the body surface.
    fn envelope(&self, p: Vec3) -> f64 {
        let q = self.spec.body.q(self.center, p);
        if q >= 1.0 {
            return 0.0;
        }
        let dz = (p[2] - self.diaphragm_z) / self.envelope_sigma;
        (1.0 - q * q).powi(2) * (-0.5 * dz * dz).exp()
    }

    /// Anterior-posterior excursion relative to the superior-inferior one.
    const AP_RATIO: f64 = 0.3;

    /// Coefficients of `v` and `v'` at `p`.
    pub fn coefficients(&self, p: Vec3) -> (Vec3, Vec3) {
        let e = self.envelope(p) * self.gain;
        let th = self.spec.hysteresis_phase;
        let a1 = [0.0, e * Self::AP_RATIO * th.cos(), e];
        let a2 = [0.0, -e * Self::AP_RATIO * th.sin() / self.omega, 0.0];
        (a1, a2)
    }
}

#[derive(Clone, Debug)]
pub struct PhantomTruth {
    pub geometry: PhantomGeometry,
    pub j_ref: usize,
    pub phases: Vec<ScalarVolume>,
    /// Pull-back fields: `phases[j](x) = reference(x + u_j(x))`.
    pub gt_fields: Vec<DisplacementField>,
    pub liver_masks: Vec<ScalarVolume>,
    pub lung_masks: Vec<ScalarVolume>,
    /// Body mask of the reference phase.
    pub body_mask: ScalarVolume,
    /// Signal relative to the reference phase, with its derivative.
    pub signal: SurrogateSignal,
    /// Generating coefficients (`a3 = 0`).
    pub model: MotionModel,
}

impl PhantomTruth {
    pub fn domain(&self) -> GridDomain {
        self.model.domain
    }

    pub fn reference(&self) -> &ScalarVolume {
        &self.phases[self.j_ref]
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Renders phases and masks of `geometry` on `domain`, where `to_anatomy`
/// maps a grid point (already displaced) into the geometry's frame.
fn render(
    geometry: &PhantomGeometry,
    domain: GridDomain,
    fields: &[DisplacementField],
    to_anatomy: impl Fn(Vec3) -> Vec3 + Sync + Send,
) -> (Vec<ScalarVolume>, Vec<ScalarVolume>, Vec<ScalarVolume>) {
    let rendered = par::map_items(fields, |_, f| {
        let point = |idx: usize| to_anatomy(add(domain.position(idx), f.u[idx]));
        let phase = par::map(domain.len(), |i| geometry.intensity(point(i)));
        let liver = par::map(domain.len(), |i| indicator(geometry.in_liver(point(i))));
        let lung = par::map(domain.len(), |i| indicator(geometry.in_lungs(point(i))));
        (
            ScalarVolume {
                domain,
                data: phase,
                background: AIR_HU,
            },
            ScalarVolume {
                domain,
                data: liver,
                background: 0.0,
            },
            ScalarVolume {
                domain,
                data: lung,
                background: 0.0,
            },
        )
    });
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for (p, l, g) in rendered {
        out.0.push(p);
        out.1.push(l);
        out.2.push(g);
    }
    out
}

fn phase_fields(model: &MotionModel, signal: &SurrogateSignal) -> Result<Vec<DisplacementField>> {
    (0..signal.len())
        .map(|j| {
            let (v, vp) = signal.state(j)?;
            evaluate_model(model, v, vp)
        })
        .collect()
}

/// Generates the phantom: one simulated breathing cycle sampled at
/// `n_phases` points, with maximum inhalation at `j_ref`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomTruth> {
    spec.validate()?;
    let domain = spec.domain()?;
    let n = spec.n_phases;
    let j_ref = spec.j_ref();
    let dt = spec.period / n as f64;
    // Place sample j_ref on the peak of the sine.
    let raw = simulate_signal(&SignalSpec {
        kind: if spec.amp_jitter > 0.0 {
            SignalKind::VariableAmplitude
        } else {
            SignalKind::Sinusoid
        },
        amplitude: spec.tidal_volume,
        period: spec.period,
        n,
        dt,
        t0: spec.period / 4.0 - j_ref as f64 * dt,
        amp_jitter: spec.amp_jitter,
        seed: spec.seed,
    })?;
    let v_ref = raw.volumes()[j_ref];
    let rel = SurrogateSignal::new(raw.times().to_vec(), raw.volumes().iter().map(|v| v - v_ref).collect())?;
    let signal = derive_signal(&rel)?;
    let (vmin, vmax) = signal
        .volumes()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let geometry = PhantomGeometry::new(spec, &domain, vmax - vmin);

    let coefs = par::map(domain.len(), |i| geometry.coefficients(domain.position(i)));
    let model = MotionModel {
        domain,
        a1: coefs.iter().map(|c| c.0).collect(),
        a2: coefs.iter().map(|c| c.1).collect(),
        a3: vec![[0.0; 3]; domain.len()],
        j_ref,
        provenance: "phantom ground truth".into(),
    };
    let gt_fields = phase_fields(&model, &signal)?;
    let (phases, liver_masks, lung_masks) = render(&geometry, domain, &gt_fields, |p| p);
    let body_mask = ScalarVolume {
        domain,
        data: par::map(domain.len(), |i| indicator(geometry.in_body(domain.position(i)))),
        background: 0.0,
    };
    Ok(PhantomTruth {
        geometry,
        j_ref,
        phases,
        gt_fields,
        liver_masks,
        lung_masks,
        body_mask,
        signal,
        model,
    })
}

pub const MIN_TARGET_SCALE: f64 = 0.8;
pub const MAX_TARGET_SCALE: f64 = 1.25;

fn check_scale(scale: Vec3, offset: Vec3) -> Result<()> {
    if let Some(s) = scale
        .iter()
        .find(|s| !(MIN_TARGET_SCALE..=MAX_TARGET_SCALE).contains(*s))
    {
        return Err(Error::Invalid(format!(
            "target scale {s} outside [{MIN_TARGET_SCALE}, {MAX_TARGET_SCALE}]"
        )));
    }
    if offset.iter().any(|o| !o.is_finite()) {
        return Err(Error::Invalid("target offset must be finite".into()));
    }
    Ok(())
}

/// Target-to-reference point map `ψ(y) = c + (y - c - offset) / scale`.
fn target_map(center: Vec3, scale: Vec3, offset: Vec3) -> impl Fn(Vec3) -> Vec3 + Sync + Send + Copy {
    move |y| std::array::from_fn(|k| center[k] + (y[k] - center[k] - offset[k]) / scale[k])
}

/// Exact correspondence from the target grid into the reference phantom:
/// `x + u(x) = ψ(x)`.
pub fn target_correspondence(domain: GridDomain, center: Vec3, scale: Vec3, offset: Vec3) -> Result<DisplacementField> {
    check_scale(scale, offset)?;
    let psi = target_map(center, scale, offset);
    Ok(DisplacementField::from_fn(domain, |p| sub(psi(p), p)))
}

/// A new patient: the reference anatomy scaled by `scale` about the grid
/// centre and shifted by `offset` (mm), with the reference motion carried
/// along (`u'(x) = scale ⊙ u(ψ(x))`). Returns the target's reference phase
/// and its full ground truth.
pub fn make_target_variant(truth: &PhantomTruth, scale: Vec3, offset: Vec3) -> Result<(ScalarVolume, PhantomTruth)> {
    check_scale(scale, offset)?;
    let geometry = &truth.geometry;
    let domain = truth.domain();
    let psi = target_map(geometry.center, scale, offset);

    let coefs = par::map(domain.len(), |i| {
        let (a1, a2) = geometry.coefficients(psi(domain.position(i)));
        (
            std::array::from_fn::<f64, 3, _>(|k| scale[k] * a1[k]),
            std::array::from_fn::<f64, 3, _>(|k| scale[k] * a2[k]),
        )
    });
    let model = MotionModel {
        domain,
        a1: coefs.iter().map(|c| c.0).collect(),
        a2: coefs.iter().map(|c| c.1).collect(),
        a3: vec![[0.0; 3]; domain.len()],
        j_ref: truth.j_ref,
        provenance: "phantom target ground truth".into(),
    };
    let gt_fields = phase_fields(&model, &truth.signal)?;
    let (phases, liver_masks, lung_masks) = render(geometry, domain, &gt_fields, psi);
    let body_mask = ScalarVolume {
        domain,
        data: par::map(domain.len(), |i| indicator(geometry.in_body(psi(domain.position(i))))),
        background: 0.0,
    };
    let target = PhantomTruth {
        geometry: geometry.clone(),
        j_ref: truth.j_ref,
        phases,
        gt_fields,
        liver_masks,
        lung_masks,
        body_mask,
        signal: truth.signal.clone(),
        model,
    };
    Ok((target.reference().clone(), target))
}

/// Peak signal-to-noise ratio (dB) of `test` against `reference`, with the
/// reference's value range as peak.
pub fn psnr(reference: &ScalarVolume, test: &ScalarVolume) -> Result<f64> {
    reference.domain.ensure_compatible(&test.domain, "psnr")?;
    let n = reference.data.len();
    let mse = par::sum(n, |i| (reference.data[i] - test.data[i]).powi(2)) / n as f64;
    let (lo, hi) = crate::field::value_range(reference);
    let peak = hi - lo;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
