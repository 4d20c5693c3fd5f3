//! Pipeline configuration (TOML). Unknown keys are rejected; every command
//! writes the resolved configuration next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use respmotion::field::{DEFAULT_INVERSION_MAX_ITER, DEFAULT_INVERSION_TOL};
use respmotion::phantom::PhantomSpec;
use respmotion::registration::{DistanceKind, RegistrationParams, RegularizerKind, ALPHA_INTER, ALPHA_INTRA};
use respmotion::transfer::SignalSource;
use respmotion::{Error, Result};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub registration: RegistrationSection,
    pub model: ModelSection,
    pub transfer: TransferSection,
    pub io: IoSection,
    pub phantom: PhantomSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationSection {
    /// Regulariser weight between phases of one patient.
    pub alpha_s: f64,
    /// Regulariser weight between patients.
    pub alpha_d: f64,
    pub levels: usize,
    pub iters: usize,
    pub step0: f64,
    pub step_shrink: f64,
    pub grad_tol: f64,
    pub max_backtracks: usize,
    pub normalize_intensity: bool,
    /// Gaussian width (voxels) applied to the descent direction.
    pub smoothing_sigma: f64,
    /// Use the sliding-aware regulariser between phases when masks are given.
    pub sliding: bool,
    pub inversion_tol: f64,
    pub inversion_max_iter: usize,
}

impl Default for RegistrationSection {
    fn default() -> Self {
        let p = RegistrationParams::inter_patient();
        Self {
            alpha_s: ALPHA_INTRA,
            alpha_d: ALPHA_INTER,
            levels: p.levels,
            iters: p.iters_per_level,
            step0: p.step0,
            step_shrink: p.step_shrink,
            grad_tol: p.grad_tol,
            max_backtracks: p.max_backtracks,
            normalize_intensity: p.normalize_intensity,
            smoothing_sigma: p.smoothing_sigma,
            sliding: true,
            inversion_tol: DEFAULT_INVERSION_TOL,
            inversion_max_iter: DEFAULT_INVERSION_MAX_ITER,
        }
    }
}

impl RegistrationSection {
    fn common(&self, p: RegistrationParams) -> RegistrationParams {
        RegistrationParams {
            levels: self.levels,
            iters_per_level: self.iters,
            step0: self.step0,
            step_shrink: self.step_shrink,
            grad_tol: self.grad_tol,
            max_backtracks: self.max_backtracks,
            normalize_intensity: self.normalize_intensity,
            smoothing_sigma: self.smoothing_sigma,
            ..p
        }
    }

    /// Between phases: NSSD, diffusive until a sliding mask is attached.
    pub fn intra(&self) -> RegistrationParams {
        self.common(RegistrationParams {
            distance: DistanceKind::Nssd,
            regularizer: RegularizerKind::Diffusive,
            alpha: self.alpha_s,
            ..RegistrationParams::intra_phase(None)
        })
    }

    pub fn inter(&self) -> RegistrationParams {
        self.common(RegistrationParams {
            alpha: self.alpha_d,
            ..RegistrationParams::inter_patient()
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Maximum-inhalation phase.
    pub j_ref: Option<usize>,
    /// Signal sample paired with each phase (default: phase j uses sample j).
    pub phase_signal: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalChoice {
    #[default]
    Reference,
    Target,
    Scaled,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub signal_source: SignalChoice,
    pub scale: f64,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            signal_source: SignalChoice::Reference,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureFiles {
    pub name: String,
    /// One mask per phase of the 4D patient.
    pub phase_masks: Vec<PathBuf>,
    /// Mask on the new patient.
    pub target_mask: PathBuf,
}

/// Input paths. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub phases: Vec<PathBuf>,
    pub sliding_masks: Vec<PathBuf>,
    pub fields: Vec<PathBuf>,
    pub signal: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub target_signal: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub volume: Option<PathBuf>,
    pub phi_inter: Option<PathBuf>,
    pub mask_a: Option<PathBuf>,
    pub mask_b: Option<PathBuf>,
    pub structures: Vec<StructureFiles>,
    /// Estimated and true fields for endpoint-error scoring, paired by index.
    pub est_fields: Vec<PathBuf>,
    pub truth_fields: Vec<PathBuf>,
    pub error_mask: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_phases: usize,
    pub amplitude_z: f64,
    pub hysteresis_phase: f64,
    pub ribs: bool,
    pub tidal_volume: f64,
    pub period: f64,
    pub amp_jitter: f64,
    /// When set, also write a scaled and shifted target patient.
    pub target_scale: Option<[f64; 3]>,
    pub target_offset: [f64; 3],
}

impl Default for PhantomSection {
    fn default() -> Self {
        let s = PhantomSpec::default();
        Self {
            dims: s.dims,
            spacing: s.spacing,
            n_phases: s.n_phases,
            amplitude_z: s.amplitude_z,
            hysteresis_phase: s.hysteresis_phase,
            ribs: s.ribs,
            tidal_volume: s.tidal_volume,
            period: s.period,
            amp_jitter: s.amp_jitter,
            target_scale: None,
            target_offset: [0.0; 3],
        }
    }
}

impl PhantomSection {
    pub fn spec(&self, seed: u64) -> Result<PhantomSpec> {
        if self.dims.iter().any(|&n| n < 8) {
            return Err(Error::Invalid(format!(
                "phantom dims {:?}: need at least 8 per axis",
                self.dims
            )));
        }
        Ok(PhantomSpec {
            n_phases: self.n_phases,
            amplitude_z: self.amplitude_z,
            hysteresis_phase: self.hysteresis_phase,
            ribs: self.ribs,
            tidal_volume: self.tidal_volume,
            period: self.period,
            amp_jitter: self.amp_jitter,
            seed,
            ..PhantomSpec::with_grid(self.dims, self.spacing)
        })
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.io.resolve(&base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn signal_source(&self, target_signal: Option<respmotion::signal::SurrogateSignal>) -> Result<SignalSource> {
        Ok(match self.transfer.signal_source {
            SignalChoice::Reference => SignalSource::Reference,
            SignalChoice::Scaled => SignalSource::Scaled(self.transfer.scale),
            SignalChoice::Target => {
                SignalSource::Target(target_signal.ok_or_else(|| {
                    Error::Invalid("transfer.signal_source = \"target\" needs io.target_signal".into())
                })?)
            }
        })
    }
}

impl IoSection {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in self
            .phases
            .iter_mut()
            .chain(&mut self.sliding_masks)
            .chain(&mut self.fields)
        {
            fix(p);
        }
        for p in self.est_fields.iter_mut().chain(&mut self.truth_fields) {
            fix(p);
        }
        for p in [
            &mut self.signal,
            &mut self.target,
            &mut self.target_signal,
            &mut self.model,
            &mut self.volume,
            &mut self.phi_inter,
            &mut self.mask_a,
            &mut self.mask_b,
            &mut self.error_mask,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for s in &mut self.structures {
            s.phase_masks.iter_mut().for_each(fix);
            fix(&mut s.target_mask);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_weights() {
        let c = Config::default();
        assert_eq!(c.registration.alpha_s, 0.1);
        assert_eq!(c.registration.alpha_d, 1.0);
        assert_eq!(c.phantom.n_phases, 14);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[registration]\nalpha = 2.0\n").is_err());
        assert!(toml::from_str::<Config>("bogus = 1\n").is_err());
        let c: Config = toml::from_str("[registration]\nalpha_d = 2.0\n").unwrap();
        assert_eq!(c.registration.alpha_d, 2.0);
        assert_eq!(c.registration.levels, 3);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = Config::default();
        c.io.phases = vec!["a.mhd".into()];
        c.model.j_ref = Some(3);
        let back: Config = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back.to_toml(), c.to_toml());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[io]\nphases = [\"x.mhd\", \"/abs/y.mhd\"]\n").unwrap();
        let c = Config::load(&p).unwrap();
        assert_eq!(c.io.phases[0], dir.path().join("x.mhd"));
        assert_eq!(c.io.phases[1], PathBuf::from("/abs/y.mhd"));
    }
}
