//! Per-voxel linear surrogate motion model
//! `u(x, t) = a1(x) v(t) + a2(x) v'(t) + a3(x)`.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, GridDomain, Vec3};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionModel {
    pub domain: GridDomain,
    /// mm per ml.
    pub a1: Vec<Vec3>,
    /// mm per (ml/s).
    pub a2: Vec<Vec3>,
    /// mm.
    pub a3: Vec<Vec3>,
    pub j_ref: usize,
    pub provenance: String,
}

/// One registered phase paired with its surrogate state.
#[derive(Clone, Debug)]
pub struct PhaseObservation {
    pub field: DisplacementField,
    pub v: f64,
    pub vprime: f64,
    pub phase_index: usize,
}

const COLUMN_NAMES: [&str; 3] = ["v", "v'", "intercept"];

/// Least-squares weights: `coef[k] = Σ_j weights[k][j] · y_j` for every
/// voxel and component.
fn regression_weights(design: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    let n = design.len();
    // Column scaling keeps the Gram matrix well conditioned for signals in ml.
    let scale: [f64; 3] = std::array::from_fn(|c| design.iter().map(|r| r[c] * r[c]).sum::<f64>().sqrt());
    if let Some(c) = (0..3).find(|&c| scale[c] == 0.0) {
        return Err(Error::RankDeficient(format!(
            "column {} is identically zero",
            COLUMN_NAMES[c]
        )));
    }
    let x: Vec<[f64; 3]> = design
        .iter()
        .map(|r| std::array::from_fn(|c| r[c] / scale[c]))
        .collect();
    let mut gram = Matrix3::<f64>::zeros();
    for r in &x {
        let v = Vector3::from_column_slice(r);
        gram += v * v.transpose();
    }
    let eig = SymmetricEigen::new(gram);
    let (imin, lmin) = eig.eigenvalues.argmin();
    let lmax = eig.eigenvalues.max();
    if !(lmin > 1e-12 * lmax) {
        let null = eig.eigenvectors.column(imin);
        let involved: Vec<&str> = (0..3)
            .filter(|&c| null[c].abs() > 1e-3)
            .map(|c| COLUMN_NAMES[c])
            .collect();
        let what = match involved.as_slice() {
            [one] => format!("column {one} carries no information"),
            [a, "intercept"] => format!("{a} is constant across observations"),
            _ => format!("columns {} are linearly dependent", involved.join(", ")),
        };
        return Err(Error::RankDeficient(what));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("normal matrix is not positive definite".into()))?;
    let inv = chol.inverse();
    Ok((0..n)
        .map(|j| {
            let w = inv * Vector3::from_column_slice(&x[j]);
            std::array::from_fn(|k| w[k] / scale[k])
        })
        .collect::<Vec<[f64; 3]>>())
}

/// Ordinary least squares of each voxel's displacement against `(v, v', 1)`,
/// sharing one 3×3 normal-equation factorisation across all voxels.
pub fn fit_model(observations: &[PhaseObservation], j_ref: usize) -> Result<MotionModel> {
    if observations.len() < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 observations, got {}",
            observations.len()
        )));
    }
    let domain = observations[0].field.domain;
    for o in observations {
        domain.ensure_compatible(&o.field.domain, &format!("observation of phase {}", o.phase_index))?;
        if !(o.v.is_finite() && o.vprime.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite surrogate state for phase {}",
                o.phase_index
            )));
        }
    }
    let design: Vec<[f64; 3]> = observations.iter().map(|o| [o.v, o.vprime, 1.0]).collect();
    let weights = regression_weights(&design)?;

    let coefs = par::map(domain.len(), |idx| {
        let mut c = [[0.0; 3]; 3];
        for (w, o) in weights.iter().zip(observations) {
            let y = o.field.u[idx];
            for (k, ck) in c.iter_mut().enumerate() {
                ck[0] += w[k] * y[0];
                ck[1] += w[k] * y[1];
                ck[2] += w[k] * y[2];
            }
        }
        c
    });
    Ok(MotionModel {
        domain,
        a1: coefs.iter().map(|c| c[0]).collect(),
        a2: coefs.iter().map(|c| c[1]).collect(),
        a3: coefs.iter().map(|c| c[2]).collect(),
        j_ref,
        provenance: String::new(),
    })
}

/// `u(x) = a1(x) v + a2(x) v' + a3(x)`.
pub fn evaluate_model(model: &MotionModel, v: f64, vprime: f64) -> Result<DisplacementField> {
    if !(v.is_finite() && vprime.is_finite()) {
        return Err(Error::Invalid(format!("surrogate state ({v}, {vprime}) is not finite")));
    }
    let u = par::map(model.domain.len(), |i| {
        let (a, b, c) = (model.a1[i], model.a2[i], model.a3[i]);
        std::array::from_fn(|k| a[k] * v + b[k] * vprime + c[k])
    });
    Ok(DisplacementField {
        domain: model.domain,
        u,
    })
}

impl MotionModel {
    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    /// Model with every coefficient zero.
    pub fn zero(domain: GridDomain, j_ref: usize) -> Self {
        let z = vec![[0.0; 3]; domain.len()];
        Self {
            domain,
            a1: z.clone(),
            a2: z.clone(),
            a3: z,
            j_ref,
            provenance: String::new(),
        }
    }

    /// Largest coefficient-field deviation from another model on the same
    /// grid, as `(a1, a2, a3)` maxima of the vector norm.
    pub fn max_deviation(&self, other: &MotionModel) -> Result<[f64; 3]> {
        self.domain.ensure_compatible(&other.domain, "model comparison")?;
        let dev = |a: &[Vec3], b: &[Vec3]| par::max(a.len(), |i| crate::grid::norm(crate::grid::sub(a[i], b[i])));
        Ok([
            dev(&self.a1, &other.a1),
            dev(&self.a2, &other.a2),
            dev(&self.a3, &other.a3),
        ])
    }
}

// Model file layout (little-endian):
//   magic "RESPMDL\0" | version u32 | dims 3×u64 | spacing 3×f64 | origin 3×f64
//   | j_ref u64 | provenance length u32 + UTF-8 bytes | a1, a2, a3 as N×3 f64
const MAGIC: &[u8; 8] = b"RESPMDL\0";
const VERSION: u32 = 1;

pub fn save_model(model: &MotionModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = model.domain.len();
    let mut buf = Vec::with_capacity(96 + model.provenance.len() + 72 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in model.domain.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in model.domain.spacing.iter().chain(&model.domain.origin) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&(model.j_ref as u64).to_le_bytes());
    let prov = model.provenance.as_bytes();
    let prov_len = u32::try_from(prov.len()).map_err(|_| Error::Invalid("provenance too long".into()))?;
    buf.extend_from_slice(&prov_len.to_le_bytes());
    buf.extend_from_slice(prov);
    for field in [&model.a1, &model.a2, &model.a3] {
        for v in field.iter() {
            for c in v {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MotionModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg);
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a motion model file (bad magic)"));
    }
    match c.u32() {
        Some(VERSION) => {}
        Some(v) => return Err(bad(&format!("unsupported model version {v} (expected {VERSION})"))),
        None => return Err(bad("truncated header")),
    }
    let truncated = || bad("truncated header");
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = usize::try_from(c.u64().ok_or_else(truncated)?).map_err(|_| bad("dims overflow"))?;
    }
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for x in spacing.iter_mut().chain(origin.iter_mut()) {
        *x = c.f64().ok_or_else(truncated)?;
    }
    let j_ref = c.u64().ok_or_else(truncated)? as usize;
    let plen = c.u32().ok_or_else(truncated)? as usize;
    let provenance = std::str::from_utf8(c.take(plen).ok_or_else(truncated)?)
        .map_err(|_| bad("provenance is not UTF-8"))?
        .to_owned();
    let domain = GridDomain::new(dims, spacing, origin).map_err(|e| bad(&e.to_string()))?;
    let n = domain.len();
    let expected = n.checked_mul(72).ok_or_else(|| bad("dims overflow"))?;
    let remaining = bytes.len() - c.pos;
    if remaining != expected {
        return Err(bad(&format!(
            "payload has {remaining} bytes but dims {dims:?} require {expected}"
        )));
    }
    let mut read_field = || -> Vec<Vec3> {
        (0..n)
            .map(|_| std::array::from_fn(|_| c.f64().expect("length checked")))
            .collect()
    };
    let (a1, a2, a3) = (read_field(), read_field(), read_field());
    Ok(MotionModel {
        domain,
        a1,
        a2,
        a3,
        j_ref,
        provenance,
    })
}
