use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use respmotion::evaluation::{atlas_chain_dice, dice, endpoint_error, OverlapReport, StructureChain};
use respmotion::field::warp_volume;
use respmotion::io::{read_field, read_mask, read_volume};
use respmotion::model::{evaluate_model, fit_model, load_model, PhaseObservation};
use respmotion::phantom::{generate_phantom, make_target_variant};
use respmotion::registration::{register_phases_masked, RegistrationParams, RegistrationReport, RegularizerKind};
use respmotion::signal::{derive_signal, load_signal, SurrogateSignal};
use respmotion::transfer::{register_inter_patient, transfer_fields, transfer_model, TransferParams};
use respmotion::{DisplacementField, Error, Result, ScalarVolume};

use crate::config::Config;
use crate::output::{Artifact, Outputs};
use crate::render::coronal_slice;

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Invalid(format!("io.{key} is required")))
}

fn read_all<T>(paths: &[PathBuf], what: &str, read: fn(&Path) -> Result<T>) -> Result<Vec<T>> {
    paths
        .iter()
        .map(|p| read(p).map_err(|e| e.in_stage(format!("read {what}"))))
        .collect()
}

fn volume(p: &Path) -> Result<ScalarVolume> {
    read_volume(p)
}

fn mask(p: &Path) -> Result<ScalarVolume> {
    read_mask(p)
}

fn field(p: &Path) -> Result<DisplacementField> {
    read_field(p)
}

fn signal_with_derivative(p: &Path) -> Result<SurrogateSignal> {
    load_signal(p)
        .and_then(|s| derive_signal(&s))
        .map_err(|e| e.in_stage("read signal"))
}

/// Signal sample index for each phase (identity unless configured).
fn phase_samples(cfg: &Config, n_phases: usize, signal: &SurrogateSignal) -> Result<Vec<usize>> {
    let map = cfg
        .model
        .phase_signal
        .clone()
        .unwrap_or_else(|| (0..n_phases).collect());
    if map.len() != n_phases {
        return Err(Error::Invalid(format!(
            "model.phase_signal has {} entries for {n_phases} phases",
            map.len()
        )));
    }
    if let Some(i) = map.iter().find(|&&i| i >= signal.len()) {
        return Err(Error::Invalid(format!(
            "model.phase_signal refers to sample {i}, signal has {} samples",
            signal.len()
        )));
    }
    Ok(map)
}

/// Configured reference phase, else the phase with the largest paired volume.
fn resolve_j_ref(cfg: &mut Config, paired_volumes: Option<&[f64]>, n_phases: usize) -> Result<usize> {
    let j = match (cfg.model.j_ref, paired_volumes) {
        (Some(j), _) => j,
        (None, Some(v)) => v
            .iter()
            .enumerate()
            .fold(0, |best, (j, &x)| if x > v[best] { j } else { best }),
        (None, None) => {
            return Err(Error::Invalid("model.j_ref is required when no signal is given".into()));
        }
    };
    if j >= n_phases {
        return Err(Error::Invalid(format!(
            "model.j_ref = {j} out of range for {n_phases} phases"
        )));
    }
    cfg.model.j_ref = Some(j);
    Ok(j)
}

fn paired_volumes(signal: &SurrogateSignal, map: &[usize]) -> Vec<f64> {
    map.iter().map(|&i| signal.volumes()[i]).collect()
}

fn sliding_masks(cfg: &Config, n_phases: usize) -> Result<Option<Vec<ScalarVolume>>> {
    if !cfg.registration.sliding || cfg.io.sliding_masks.is_empty() {
        return Ok(None);
    }
    if cfg.io.sliding_masks.len() != n_phases {
        return Err(Error::Invalid(format!(
            "{} sliding masks for {n_phases} phases",
            cfg.io.sliding_masks.len()
        )));
    }
    read_all(&cfg.io.sliding_masks, "sliding masks", mask).map(Some)
}

fn intra_params(cfg: &Config, sliding: bool) -> RegistrationParams {
    let mut p = cfg.registration.intra();
    if sliding {
        p.regularizer = RegularizerKind::SlidingAware;
    }
    p
}

fn summarize(out: &mut String, label: &str, r: &RegistrationReport) {
    let last = r.energy_trace.last().copied();
    let _ = match last {
        Some(e) => writeln!(
            out,
            "{label}: distance {:.6e} regularizer {:.6e} total {:.6e} steps {} converged {}",
            e.distance,
            e.regularizer,
            e.total,
            r.energy_trace.len(),
            r.converged
        ),
        None => writeln!(out, "{label}: no iterations"),
    };
}

fn check_same_grid(vols: &[ScalarVolume], what: &str) -> Result<()> {
    for (j, v) in vols.iter().enumerate() {
        vols[0]
            .domain
            .ensure_compatible(&v.domain, &format!("{what} {j} vs {what} 0"))?;
    }
    Ok(())
}

pub fn phantom(cfg: &mut Config) -> Result<Outputs> {
    let spec = cfg.phantom.spec(cfg.seed)?;
    let truth = generate_phantom(&spec).map_err(|e| e.in_stage("phantom"))?;
    let target = match cfg.phantom.target_scale {
        Some(scale) => Some(make_target_variant(&truth, scale, cfg.phantom.target_offset)?),
        None => None,
    };
    let mut out = Outputs::default();
    for (j, p) in truth.phases.iter().enumerate() {
        out.add(format!("phase_{j:02}.mhd"), Artifact::Volume(p.clone()));
        out.add(
            format!("truth_field_{j:02}.mhd"),
            Artifact::Field(truth.gt_fields[j].clone()),
        );
        out.add(
            format!("liver_mask_{j:02}.mhd"),
            Artifact::Volume(truth.liver_masks[j].clone()),
        );
        out.add(
            format!("lung_mask_{j:02}.mhd"),
            Artifact::Volume(truth.lung_masks[j].clone()),
        );
    }
    out.add("body_mask.mhd", Artifact::Volume(truth.body_mask.clone()));
    out.add("signal.csv", Artifact::Signal(truth.signal.clone()));
    out.add("truth_model.bin", Artifact::Model(truth.model.clone()));
    if let Some((image, t)) = target {
        let j = t.j_ref;
        out.add("target.mhd", Artifact::Volume(image));
        out.add("target_liver_mask.mhd", Artifact::Volume(t.liver_masks[j].clone()));
        out.add("target_lung_mask.mhd", Artifact::Volume(t.lung_masks[j].clone()));
        out.add("target_truth_model.bin", Artifact::Model(t.model));
    }
    cfg.model.j_ref = Some(truth.j_ref);
    Ok(out)
}

pub fn register(cfg: &mut Config) -> Result<Outputs> {
    let phases = read_all(&cfg.io.phases, "phases", volume)?;
    if phases.len() < 2 {
        return Err(Error::Invalid(format!(
            "io.phases lists {} volumes, need at least 2",
            phases.len()
        )));
    }
    check_same_grid(&phases, "phase")?;
    let signal = cfg.io.signal.as_deref().map(signal_with_derivative).transpose()?;
    let paired = match &signal {
        Some(s) => Some(paired_volumes(s, &phase_samples(cfg, phases.len(), s)?)),
        None => None,
    };
    let j_ref = resolve_j_ref(cfg, paired.as_deref(), phases.len())?;
    let masks = sliding_masks(cfg, phases.len())?;
    let target = cfg
        .io
        .target
        .as_deref()
        .map(volume)
        .transpose()
        .map_err(|e| e.in_stage("read target"))?;

    let params = intra_params(cfg, masks.is_some());
    let pf = register_phases_masked(&phases, j_ref, &params, masks.as_deref())
        .map_err(|e| e.in_stage("intra-patient registration"))?;
    let inter = match &target {
        Some(t) => Some(
            register_inter_patient(t, &phases[j_ref], &cfg.registration.inter())
                .map_err(|e| e.in_stage("inter-patient registration"))?,
        ),
        None => None,
    };

    let mut out = Outputs::default();
    let mut report = format!("reference phase {j_ref}\n");
    for (j, (f, r)) in pf.fields.into_iter().zip(&pf.reports).enumerate() {
        if let Some(r) = r {
            summarize(&mut report, &format!("phase {j}"), r);
        }
        out.add(format!("field_{j:02}.mhd"), Artifact::Field(f));
    }
    if let Some((f, r)) = inter {
        summarize(&mut report, "inter-patient", &r);
        out.add("phi_inter.mhd", Artifact::Field(f));
    }
    out.text("report.txt", report);
    Ok(out)
}

pub fn fit(cfg: &mut Config) -> Result<Outputs> {
    let fields = read_all(&cfg.io.fields, "fields", field)?;
    let signal = signal_with_derivative(need(&cfg.io.signal, "signal")?)?;
    let map = phase_samples(cfg, fields.len(), &signal)?;
    let j_ref = resolve_j_ref(cfg, Some(&paired_volumes(&signal, &map)), fields.len().max(1))?;
    let obs = fields
        .into_iter()
        .zip(&map)
        .enumerate()
        .map(|(j, (f, &i))| {
            let (v, vprime) = signal.state(i)?;
            Ok(PhaseObservation {
                field: f,
                v,
                vprime,
                phase_index: j,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = fit_model(&obs, j_ref)
        .map_err(|e| e.in_stage("fit"))?
        .with_provenance("fit");
    let mut out = Outputs::default();
    out.add("model.bin", Artifact::Model(model));
    Ok(out)
}

pub fn transfer(cfg: &mut Config) -> Result<Outputs> {
    let phases = read_all(&cfg.io.phases, "phases", volume)?;
    if phases.len() < 3 {
        return Err(Error::Invalid(format!(
            "io.phases lists {} volumes, need at least 3",
            phases.len()
        )));
    }
    check_same_grid(&phases, "phase")?;
    let fields = if cfg.io.fields.is_empty() {
        None
    } else if cfg.io.fields.len() != phases.len() {
        return Err(Error::Invalid(format!(
            "{} fields for {} phases",
            cfg.io.fields.len(),
            phases.len()
        )));
    } else {
        Some(read_all(&cfg.io.fields, "fields", field)?)
    };
    let full_signal = signal_with_derivative(need(&cfg.io.signal, "signal")?)?;
    let map = phase_samples(cfg, phases.len(), &full_signal)?;
    let signal = full_signal
        .select(&map)
        .map_err(|e| e.in_stage("pair phases with signal samples"))?;
    let j_ref = resolve_j_ref(cfg, Some(signal.volumes()), phases.len())?;
    let target = volume(need(&cfg.io.target, "target")?).map_err(|e| e.in_stage("read target"))?;
    let target_signal = cfg
        .io
        .target_signal
        .as_deref()
        .map(signal_with_derivative)
        .transpose()?;
    let masks = sliding_masks(cfg, phases.len())?;
    let params = TransferParams {
        j_ref: Some(j_ref),
        intra: intra_params(cfg, masks.is_some()),
        inter: cfg.registration.inter(),
        inversion_tol: cfg.registration.inversion_tol,
        inversion_max_iter: cfg.registration.inversion_max_iter,
        signal_source: cfg.signal_source(target_signal)?,
    };

    let computed_fields = fields.is_none();
    let (model, bundle) = match fields {
        Some(f) => transfer_fields(f, &phases[j_ref], &signal, &target, &params),
        None => transfer_model(&phases, &signal, &target, &params, masks.as_deref()),
    }
    .map_err(|e| e.in_stage("transfer"))?;

    let rep = &bundle.report;
    let mut report = format!("reference phase {j_ref}\n");
    summarize(&mut report, "inter-patient", &rep.inter_registration);
    let _ = writeln!(
        report,
        "inversion residual {:.6} mm after {} iterations, converged {}",
        rep.inversion_residual, rep.inversion_iterations, rep.inversion_converged
    );
    for d in &rep.phases {
        let _ = writeln!(
            report,
            "phase {}: max |u| {:.4} mm, jacobian [{:.4}, {:.4}]",
            d.phase, d.max_norm, d.jacobian_min, d.jacobian_max
        );
    }
    for w in &rep.warnings {
        let _ = writeln!(report, "warning: {w}");
        eprintln!("warning: {w}");
    }

    let mut out = Outputs::default();
    out.add("model.bin", Artifact::Model(model));
    out.add("reference_model.bin", Artifact::Model(bundle.reference_model));
    out.add("phi_inter.mhd", Artifact::Field(bundle.phi_inter));
    out.add("phi_inter_inv.mhd", Artifact::Field(bundle.phi_inter_inv));
    out.add("animation_signal.csv", Artifact::Signal(bundle.animation_signal));
    if computed_fields {
        for (j, f) in bundle.phase_fields.into_iter().enumerate() {
            out.add(format!("field_{j:02}.mhd"), Artifact::Field(f));
        }
    }
    for (j, f) in bundle.transferred_fields.into_iter().enumerate() {
        out.add(format!("transferred_field_{j:02}.mhd"), Artifact::Field(f));
    }
    out.text("report.txt", report);
    Ok(out)
}

pub fn evaluate(cfg: &mut Config) -> Result<Outputs> {
    let io = &cfg.io;
    let mut rows: Vec<OverlapReport> = Vec::new();
    let mut scored = false;

    match (&io.mask_a, &io.mask_b) {
        (Some(a), Some(b)) => {
            let mut r = dice(&mask(a)?, &mask(b)?)?;
            r.structure = "mask".into();
            rows.push(r);
            scored = true;
        }
        (None, None) => {}
        _ => return Err(Error::Invalid("io.mask_a and io.mask_b must be given together".into())),
    }

    if !io.structures.is_empty() {
        let phi_inter = field(need(&io.phi_inter, "phi_inter")?).map_err(|e| e.in_stage("read phi_inter"))?;
        let fields = read_all(&io.fields, "fields", field)?;
        let loaded = io
            .structures
            .iter()
            .map(|s| {
                let masks = read_all(&s.phase_masks, &format!("{} phase masks", s.name), mask)?;
                let target = mask(&s.target_mask)?;
                Ok((s.name.as_str(), masks, target))
            })
            .collect::<Result<Vec<_>>>()?;
        let chains: Vec<StructureChain<'_>> = loaded
            .iter()
            .map(|(name, masks, target)| StructureChain {
                name,
                phase_masks: masks,
                target_mask: target,
            })
            .collect();
        rows.extend(
            atlas_chain_dice(
                &chains,
                &fields,
                &phi_inter,
                cfg.registration.inversion_tol,
                cfg.registration.inversion_max_iter,
            )
            .map_err(|e| e.in_stage("atlas-chain DICE"))?,
        );
        scored = true;
    }

    let mut out = Outputs::default();
    if !io.est_fields.is_empty() || !io.truth_fields.is_empty() {
        if io.est_fields.len() != io.truth_fields.len() {
            return Err(Error::Invalid(format!(
                "{} estimated fields for {} truth fields",
                io.est_fields.len(),
                io.truth_fields.len()
            )));
        }
        let error_mask = io.error_mask.as_deref().map(mask).transpose()?;
        let mut csv = String::from("index,mean,max\n");
        for (j, (e, t)) in io.est_fields.iter().zip(&io.truth_fields).enumerate() {
            let (mean, max) = endpoint_error(&field(e)?, &field(t)?, error_mask.as_ref())
                .map_err(|err| err.in_stage(format!("endpoint error {}", e.display())))?;
            let _ = writeln!(csv, "{j},{mean},{max}");
        }
        out.text("endpoint_error.csv", csv);
        scored = true;
    }
    if !scored {
        return Err(Error::Invalid(
            "nothing to evaluate: set io.mask_a/mask_b, io.structures or io.est_fields/truth_fields".into(),
        ));
    }
    if !rows.is_empty() {
        for r in &rows {
            println!("{} phase {}: dice {:.4}", r.structure, r.phase, r.dice);
        }
        out.add("dice.csv", Artifact::Dice(rows));
    }
    Ok(out)
}

pub fn animate(cfg: &mut Config) -> Result<Outputs> {
    let model = load_model(need(&cfg.io.model, "model")?).map_err(|e| e.in_stage("read model"))?;
    let vol = volume(need(&cfg.io.volume, "volume")?).map_err(|e| e.in_stage("read volume"))?;
    let signal = signal_with_derivative(need(&cfg.io.signal, "signal")?)?;
    model.domain.ensure_compatible(&vol.domain, "model vs volume")?;

    let mut out = Outputs::default();
    for i in 0..signal.len() {
        let (v, vprime) = signal.state(i)?;
        let u = evaluate_model(&model, v, vprime).map_err(|e| e.in_stage(format!("evaluate model at sample {i}")))?;
        let frame = warp_volume(&vol, &u);
        out.add(
            format!("frame_{i:02}.pgm"),
            Artifact::Bytes(coronal_slice(&frame, Some(&u)).to_pgm()),
        );
        out.add(format!("frame_{i:02}.mhd"), Artifact::Volume(frame));
    }
    Ok(out)
}
