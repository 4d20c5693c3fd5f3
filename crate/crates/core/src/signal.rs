//! Spirometry surrogate signals: loading, differentiation and synthesis.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A breathing signal: lung volume `v` (ml) sampled at times `t` (s), with the
/// time derivative `v'` (ml/s) once derived.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSignal {
    t: Vec<f64>,
    v: Vec<f64>,
    vprime: Option<Vec<f64>>,
}

impl SurrogateSignal {
    pub fn new(t: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if t.len() != v.len() {
            return Err(Error::Invalid(format!("{} times but {} volumes", t.len(), v.len())));
        }
        if t.is_empty() {
            return Err(Error::Invalid("signal has no samples".into()));
        }
        if let Some(i) = t.iter().chain(&v).position(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("non-finite signal value at position {i}")));
        }
        if let Some(i) = t.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(format!(
                "sample times must be strictly increasing (sample {} at t={} after t={})",
                i + 1,
                t[i + 1],
                t[i]
            )));
        }
        Ok(Self { t, v, vprime: None })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn volumes(&self) -> &[f64] {
        &self.v
    }

    pub fn derivative(&self) -> Option<&[f64]> {
        self.vprime.as_deref()
    }

    /// `(v, v')` at sample `i`; requires the derivative.
    pub fn state(&self, i: usize) -> Result<(f64, f64)> {
        let d = self
            .vprime
            .as_ref()
            .ok_or_else(|| Error::Invalid("signal derivative has not been computed".into()))?;
        match (self.v.get(i), d.get(i)) {
            (Some(&v), Some(&dv)) => Ok((v, dv)),
            _ => Err(Error::Invalid(format!(
                "sample {i} out of range for {} samples",
                self.len()
            ))),
        }
    }

    /// Multiplies every volume by `factor` (any derivative scales with it).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            t: self.t.clone(),
            v: self.v.iter().map(|x| x * factor).collect(),
            vprime: self.vprime.as_ref().map(|d| d.iter().map(|x| x * factor).collect()),
        }
    }

    /// The listed samples (in increasing time order), keeping any derivative
    /// computed on the full signal.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Invalid(format!(
                "sample {i} out of range for {} samples",
                self.len()
            )));
        }
        let pick = |x: &[f64]| indices.iter().map(|&i| x[i]).collect::<Vec<_>>();
        let mut out = Self::new(pick(&self.t), pick(&self.v))?;
        out.vprime = self.vprime.as_deref().map(pick);
        Ok(out)
    }

    /// `(v, v')` for each listed sample index, in the given order.
    pub fn states(&self, indices: &[usize]) -> Result<Vec<(f64, f64)>> {
        indices.iter().map(|&i| self.state(i)).collect()
    }
}

/// Reads a `t,v` CSV (seconds, millilitres).
pub fn load_signal(path: impl AsRef<Path>) -> Result<SurrogateSignal> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_signal(&text).map_err(|msg| Error::format(path, msg))
}

fn parse_signal(text: &str) -> std::result::Result<SurrogateSignal, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| format!("line 1: {e}"))?.clone();
    if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "v" {
        return Err(format!(
            "line 1: expected header `t,v`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        ));
    }
    let mut t = Vec::new();
    let mut v = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            format!("line {line}: {e}")
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(format!("line {line}: expected 2 fields, found {}", record.len()));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("line {line}: `{s}` is not a finite number"))
        };
        let (ti, vi) = (parse(&record[0])?, parse(&record[1])?);
        if let Some(&prev) = t.last() {
            if ti <= prev {
                return Err(format!("line {line}: time {ti} does not increase (previous {prev})"));
            }
        }
        t.push(ti);
        v.push(vi);
    }
    if t.len() < 2 {
        return Err(format!("need at least 2 samples, found {}", t.len()));
    }
    SurrogateSignal::new(t, v).map_err(|e| e.to_string())
}

/// Writes the signal as a `t,v` CSV. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn write_signal(sig: &SurrogateSignal, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("t,v\n");
    for (t, v) in sig.t.iter().zip(&sig.v) {
        out.push_str(&format!("{t},{v}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Adds `v'` by central differences (one-sided at the ends).
pub fn derive_signal(sig: &SurrogateSignal) -> Result<SurrogateSignal> {
    let n = sig.len();
    if n < 2 {
        return Err(Error::Invalid(format!("derivative needs at least 2 samples, got {n}")));
    }
    let (t, v) = (&sig.t, &sig.v);
    let d = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (v[b] - v[a]) / (t[b] - t[a])
        })
        .collect();
    Ok(SurrogateSignal {
        t: t.clone(),
        v: v.clone(),
        vprime: Some(d),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    /// Constant-amplitude sine.
    Sinusoid,
    /// Sine whose amplitude is redrawn for every breathing cycle.
    VariableAmplitude,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalSpec {
    pub kind: SignalKind,
    /// Peak volume deviation (ml).
    pub amplitude: f64,
    /// Breathing period (s).
    pub period: f64,
    pub n: usize,
    /// Sampling interval (s).
    pub dt: f64,
    /// Start time of the first sample (s).
    pub t0: f64,
    /// Relative half-width of the per-cycle amplitude range.
    pub amp_jitter: f64,
    pub seed: u64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            kind: SignalKind::Sinusoid,
            amplitude: 250.0,
            period: 4.0,
            n: 14,
            dt: 4.0 / 14.0,
            t0: 0.0,
            amp_jitter: 0.0,
            seed: 0,
        }
    }
}

/// `v(t) = A_c sin(2π t / period)` where `A_c` is the amplitude of cycle
/// `c = floor(t / period)`: fixed for `Sinusoid`, drawn uniformly from
/// `amplitude · [1 - jitter, 1 + jitter]` for `VariableAmplitude`.
/// Deterministic for a given seed.
pub fn simulate_signal(spec: &SignalSpec) -> Result<SurrogateSignal> {
    if spec.n < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples, got {}", spec.n)));
    }
    if !(spec.period > 0.0 && spec.dt > 0.0) {
        return Err(Error::Invalid("period and dt must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.amp_jitter) {
        return Err(Error::Invalid(format!(
            "amp_jitter must lie in [0, 1), got {}",
            spec.amp_jitter
        )));
    }
    let t: Vec<f64> = (0..spec.n).map(|i| spec.t0 + i as f64 * spec.dt).collect();
    let first_cycle = (t[0] / spec.period).floor() as i64;
    let last_cycle = (t[spec.n - 1] / spec.period).floor() as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amps: Vec<f64> = (first_cycle..=last_cycle)
        .map(|_| match spec.kind {
            SignalKind::Sinusoid => spec.amplitude,
            SignalKind::VariableAmplitude if spec.amp_jitter > 0.0 => {
                spec.amplitude * rng.gen_range(1.0 - spec.amp_jitter..=1.0 + spec.amp_jitter)
            }
            SignalKind::VariableAmplitude => spec.amplitude,
        })
        .collect();
    let omega = 2.0 * PI / spec.period;
    let v = t
        .iter()
        .map(|&ti| {
            let c = ((ti / spec.period).floor() as i64 - first_cycle) as usize;
            amps[c] * (omega * ti).sin()
        })
        .collect();
    SurrogateSignal::new(t, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_keeps_full_signal_derivative() {
        let s =
            derive_signal(&SurrogateSignal::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 1.0, 4.0, 9.0]).unwrap()).unwrap();
        let sub = s.select(&[1, 3]).unwrap();
        assert_eq!(sub.volumes(), &[1.0, 9.0]);
        assert_eq!(sub.derivative().unwrap(), &[2.0, 5.0]);
        assert!(s.select(&[3, 1]).is_err());
        assert!(s.select(&[4]).is_err());
    }

    #[test]
    fn parses_minimal_file() {
        let s = parse_signal("t,v\n0,0\n1,100\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.volumes(), &[0.0, 100.0]);
    }

    #[test]
    fn rejects_out_of_order_rows() {
        let err = parse_signal("t,v\n0,0\n2,1\n1,3\n").unwrap_err();
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn rejects_malformed_and_short_files() {
        assert!(parse_signal("t,v\n0,0\n1,abc\n").unwrap_err().contains("line 3"));
        assert!(parse_signal("t,v\n0,0\n").is_err());
        assert!(parse_signal("time,volume\n0,0\n1,1\n").is_err());
        assert!(parse_signal("t,v\n0,0,1\n1,1\n").is_err());
    }

    #[test]
    fn keeps_fourteen_samples() {
        let mut text = String::from("t,v\n");
        for i in 0..14 {
            text.push_str(&format!("{},{}\n", i as f64 * 0.3, (i * 10) as f64));
        }
        assert_eq!(parse_signal(&text).unwrap().len(), 14);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = SurrogateSignal::new(vec![0.1, 0.2 + 1e-17, 1.0 / 3.0], vec![-1.0 / 7.0, 1e300, 5.0]).unwrap();
        write_signal(&s, &p).unwrap();
        assert_eq!(load_signal(&p).unwrap(), s);
    }

    #[test]
    fn derivative_of_constant_and_linear() {
        let t: Vec<f64> = (0..10).map(|i| i as f64 * 0.25).collect();
        let flat = derive_signal(&SurrogateSignal::new(t.clone(), vec![3.0; 10]).unwrap()).unwrap();
        assert!(flat.derivative().unwrap().iter().all(|&d| d == 0.0));
        let lin = SurrogateSignal::new(t.clone(), t.iter().map(|x| 100.0 * x).collect()).unwrap();
        let d = derive_signal(&lin).unwrap();
        for &x in d.derivative().unwrap() {
            approx::assert_relative_eq!(x, 100.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn derivative_of_dense_sine() {
        let t: Vec<f64> = (0..2000).map(|i| i as f64 * 0.005).collect();
        let s = SurrogateSignal::new(t.clone(), t.iter().map(|x| x.sin()).collect()).unwrap();
        let d = derive_signal(&s).unwrap();
        let d = d.derivative().unwrap();
        for i in 1..t.len() - 1 {
            assert!((d[i] - t[i].cos()).abs() <= 0.01 * t[i].cos().abs().max(0.05));
        }
    }

    #[test]
    fn derivative_needs_two_samples() {
        let s = SurrogateSignal::new(vec![0.0], vec![1.0]).unwrap();
        assert!(derive_signal(&s).is_err());
    }

    #[test]
    fn sinusoid_peak_equals_amplitude() {
        let spec = SignalSpec {
            n: 400,
            dt: 0.01,
            amplitude: 300.0,
            ..Default::default()
        };
        let s = simulate_signal(&spec).unwrap();
        let peak = s.volumes().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= 300.0 && peak > 299.9);
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = SignalSpec {
            kind: SignalKind::VariableAmplitude,
            amp_jitter: 0.3,
            n: 100,
            dt: 0.1,
            seed: 11,
            ..Default::default()
        };
        assert_eq!(simulate_signal(&spec).unwrap(), simulate_signal(&spec).unwrap());
    }

    #[test]
    fn variable_amplitude_cycles() {
        // Four cycles sampled densely; each cycle's peak is its amplitude.
        let spec = SignalSpec {
            kind: SignalKind::VariableAmplitude,
            amplitude: 200.0,
            period: 4.0,
            amp_jitter: 0.3,
            n: 1600,
            dt: 0.01,
            seed: 5,
            ..Default::default()
        };
        let s = simulate_signal(&spec).unwrap();
        let peaks: Vec<f64> = (0..4)
            .map(|c| {
                s.volumes()[c * 400..(c + 1) * 400]
                    .iter()
                    .fold(f64::MIN, |m, &v| m.max(v))
            })
            .collect();
        for p in &peaks {
            assert!(*p >= 200.0 * 0.7 - 1.0 && *p <= 200.0 * 1.3, "peak {p}");
        }
        assert!(peaks.windows(2).any(|w| (w[0] - w[1]).abs() > 1.0), "{peaks:?}");
    }

    #[test]
    fn states_and_scale() {
        let s = derive_signal(&SurrogateSignal::new(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 6.0]).unwrap()).unwrap();
        assert_eq!(s.states(&[2, 0]).unwrap(), vec![(6.0, 4.0), (0.0, 2.0)]);
        assert!(s.states(&[3]).is_err());
        assert_eq!(s.scaled(2.0).state(1).unwrap(), (4.0, 6.0));
    }
}
