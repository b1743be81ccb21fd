//! Synthetic conditional targets `p_data(x_0 | c)` and their datasets.
//!
//! Each condition is a Gaussian mixture with diagonal covariances, so the
//! density, samples and the optimal noise predictor are all available in
//! closed form.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! magic "SPDNDATA" | version u32 | dim u32 | conditions u32 | records u64
//! | seed u64 | spec_len u32 | spec JSON | (label u32, x0 f64 * dim) * records
//! | sha256 of everything above
//! ```

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, domain, Rng};
use crate::score_net::checkpoint::{verified_body, Reader};

pub const MAGIC: &[u8; 8] = b"SPDNDATA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub dim: usize,
    /// One mixture per condition label.
    pub conditions: Vec<Vec<Component>>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn diag_gauss_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((x - m).powi(2) / v + v.ln() + ln_2pi))
        .sum()
}

impl TargetSpec {
    /// Four conditions in the plane. Eight centres sit on a circle of
    /// radius 2; condition `c` mixes centres `2c` and `2c + 2` (mod 8) with
    /// weights 0.6/0.4, so neighbouring conditions share a component.
    pub fn default_task() -> Self {
        let centre = |k: usize| {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            vec![2.0 * a.cos(), 2.0 * a.sin()]
        };
        let var = vec![0.35f64.powi(2); 2];
        let conditions = (0..4)
            .map(|c| {
                vec![
                    Component { weight: 0.6, mean: centre(2 * c), var: var.clone() },
                    Component { weight: 0.4, mean: centre((2 * c + 2) % 8), var: var.clone() },
                ]
            })
            .collect();
        TargetSpec { dim: 2, conditions }
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.conditions.is_empty() {
            return Err(Error::config("target needs a positive dimension and at least one condition"));
        }
        for (c, mix) in self.conditions.iter().enumerate() {
            if mix.is_empty() {
                return Err(Error::config(format!("condition {c} has no components")));
            }
            let mut total = 0.0;
            for comp in mix {
                if !(comp.weight > 0.0 && comp.weight.is_finite()) {
                    return Err(Error::config(format!("condition {c}: weights must be positive")));
                }
                if comp.mean.len() != self.dim || comp.var.len() != self.dim {
                    return Err(Error::Dimension { expected: self.dim, got: comp.mean.len().min(comp.var.len()) });
                }
                if comp.mean.iter().any(|m| !m.is_finite()) || comp.var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(Error::config(format!("condition {c}: means finite, variances positive")));
                }
                total += comp.weight;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("condition {c}: weights sum to {total}, not 1")));
            }
        }
        Ok(())
    }

    fn mixture(&self, condition: usize) -> Result<&[Component]> {
        self.conditions.get(condition).map(Vec::as_slice).ok_or_else(|| {
            Error::config(format!("condition {condition} out of range 0..{}", self.conditions.len()))
        })
    }

    pub fn sample(&self, condition: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let mix = self.mixture(condition)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &mix[mix.len() - 1];
        for comp in mix {
            acc += comp.weight;
            if u < acc {
                chosen = comp;
                break;
            }
        }
        let z = rng::standard_normal(rng, self.dim);
        Ok(chosen.mean.iter().zip(&chosen.var).zip(z).map(|((m, v), z)| m + v.sqrt() * z).collect())
    }

    pub fn logpdf(&self, condition: usize, x: &[f64]) -> Result<f64> {
        self.noised_logpdf(condition, x, 1.0)
    }

    /// Log-density of `x_t = sqrt(alpha) x_0 + sqrt(1 - alpha) eps`.
    pub fn noised_logpdf(&self, condition: usize, x: &[f64], alpha: f64) -> Result<f64> {
        let mix = self.mixture(condition)?;
        if x.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: x.len() });
        }
        let terms: Vec<f64> = mix
            .iter()
            .map(|c| {
                let (m, v) = noised_moments(c, alpha);
                c.weight.ln() + diag_gauss_logpdf(x, &m, &v)
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// `E[eps | x_t, c]`, the minimiser of the noise-prediction risk.
    pub fn optimal_eps(&self, condition: usize, x_t: &[f64], alpha: f64) -> Result<Vec<f64>> {
        let mix = self.mixture(condition)?;
        if x_t.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: x_t.len() });
        }
        let logs: Vec<f64> = mix
            .iter()
            .map(|c| {
                let (m, v) = noised_moments(c, alpha);
                c.weight.ln() + diag_gauss_logpdf(x_t, &m, &v)
            })
            .collect();
        let norm = log_sum_exp(&logs);
        let s = (1.0 - alpha).sqrt();
        let mut out = vec![0.0; self.dim];
        for (c, l) in mix.iter().zip(&logs) {
            let r = (l - norm).exp();
            let (m, v) = noised_moments(c, alpha);
            for j in 0..self.dim {
                out[j] += r * s * (x_t[j] - m[j]) / v[j];
            }
        }
        Ok(out)
    }
}

fn noised_moments(c: &Component, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let m = c.mean.iter().map(|m| alpha.sqrt() * m).collect();
    let v = c.var.iter().map(|v| alpha * v + (1.0 - alpha)).collect();
    (m, v)
}

/// How record labels are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionDistribution {
    #[default]
    Uniform,
    Weights(Vec<f64>),
}

impl ConditionDistribution {
    fn draw(&self, count: usize, rng: &mut Rng) -> usize {
        match self {
            ConditionDistribution::Uniform => rng.random_range(0..count),
            ConditionDistribution::Weights(w) => {
                let total: f64 = w.iter().sum();
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                for (i, wi) in w.iter().enumerate() {
                    acc += wi;
                    if u < acc {
                        return i;
                    }
                }
                w.len() - 1
            }
        }
    }

    fn validate(&self, count: usize) -> Result<()> {
        if let ConditionDistribution::Weights(w) = self {
            if w.len() != count || w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config(format!("need {count} nonnegative condition weights")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: usize,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TargetSpec,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn num_conditions(&self) -> usize {
        self.spec.num_conditions()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.records.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        for r in &self.records {
            if r.label >= self.num_conditions() {
                return Err(Error::config(format!("record label {} out of range", r.label)));
            }
            if r.x0.len() != self.dim() {
                return Err(Error::Dimension { expected: self.dim(), got: r.x0.len() });
            }
            if r.x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset record".into()));
            }
        }
        Ok(())
    }

    /// Record counts per condition.
    pub fn counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_conditions()];
        for r in &self.records {
            out[r.label] += 1;
        }
        out
    }
}

/// `n` i.i.d. records; record `i` uses its own stream, so the result does
/// not depend on the thread count.
pub fn generate_dataset(spec: &TargetSpec, n: usize, labels: &ConditionDistribution, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    labels.validate(spec.num_conditions())?;
    if n == 0 {
        return Err(Error::config("dataset size must be positive"));
    }
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, domain::DATASET, i as u64);
            let label = labels.draw(spec.num_conditions(), &mut r);
            Ok(Record { label, x0: spec.sample(label, &mut r)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: spec.clone(), seed, records })
}

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let spec = serde_json::to_vec(&ds.spec).map_err(|e| Error::format(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + spec.len() + ds.len() * (4 + 8 * ds.dim()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_conditions() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    for r in &ds.records {
        out.extend_from_slice(&(r.label as u32).to_le_bytes());
        for v in &r.x0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("not a dataset file (bad magic)"));
    }
    let body = verified_body(bytes)?;
    let mut r = Reader::new(body);
    r.take(MAGIC.len())?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let dim = r.u32()? as usize;
    let conditions = r.u32()? as usize;
    let n = r.u64()? as usize;
    let seed = r.u64()?;
    let spec_len = r.u32()? as usize;
    let spec: TargetSpec = serde_json::from_slice(r.take(spec_len)?).map_err(|e| Error::format(e.to_string()))?;
    if spec.dim != dim || spec.num_conditions() != conditions {
        return Err(Error::format("header disagrees with embedded target"));
    }
    if n == 0 {
        return Err(Error::format("dataset is empty"));
    }
    if r.remaining() != n * (4 + 8 * dim) {
        return Err(Error::format("record section has the wrong length"));
    }
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.u32()? as usize;
        let x0 = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        records.push(Record { label, x0 });
    }
    let ds = Dataset { spec, seed, records };
    ds.validate().map_err(|e| Error::format(e.to_string()))?;
    Ok(ds)
}

pub fn persist(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode(ds)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mean: Vec<f64>, var: Vec<f64>) -> TargetSpec {
        TargetSpec { dim: mean.len(), conditions: vec![vec![Component { weight: 1.0, mean, var }]] }
    }

    #[test]
    fn default_task_is_valid() {
        let t = TargetSpec::default_task();
        t.validate().unwrap();
        assert_eq!(t.num_conditions(), 4);
        // condition 0 and 1 share the centre at angle pi/2
        assert_eq!(t.conditions[0][1].mean, t.conditions[1][0].mean);
    }

    #[test]
    fn sampling_examples() {
        let t = single(vec![1.0, -2.0], vec![1e-12, 1e-12]);
        let x = t.sample(0, &mut rng::seeded(1)).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] + 2.0).abs() < 1e-5);
        assert!(t.sample(1, &mut rng::seeded(1)).is_err());

        let two = TargetSpec {
            dim: 2,
            conditions: vec![vec![
                Component { weight: 0.5, mean: vec![2.0, 0.0], var: vec![0.01, 0.01] },
                Component { weight: 0.5, mean: vec![-2.0, 0.0], var: vec![0.01, 0.01] },
            ]],
        };
        let mut r = rng::seeded(2);
        let right = (0..10_000).filter(|_| two.sample(0, &mut r).unwrap()[0] > 0.0).count();
        assert!((right as f64 / 1e4 - 0.5).abs() < 0.02);
        assert_eq!(two.sample(0, &mut rng::seeded(5)).unwrap(), two.sample(0, &mut rng::seeded(5)).unwrap());
    }

    #[test]
    fn logpdf_examples() {
        let std2 = single(vec![0.0, 0.0], vec![1.0, 1.0]);
        let v = std2.logpdf(0, &[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((v + 1.83788).abs() < 1e-5);

        let comp = Component { weight: 0.5, mean: vec![0.3, -0.1], var: vec![0.4, 2.0] };
        let dup = TargetSpec { dim: 2, conditions: vec![vec![comp.clone(), comp.clone()]] };
        let one = single(comp.mean.clone(), comp.var.clone());
        for x in [[0.0, 0.0], [1.5, -2.0], [-0.7, 0.9]] {
            assert!((dup.logpdf(0, &x).unwrap() - one.logpdf(0, &x).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let t = TargetSpec {
            dim: 1,
            conditions: vec![vec![
                Component { weight: 0.3, mean: vec![-1.0], var: vec![0.25] },
                Component { weight: 0.7, mean: vec![1.5], var: vec![0.6] },
            ]],
        };
        // composite Simpson on [-12, 12]
        let (a, b, n) = (-12.0, 12.0, 24_000);
        let h = (b - a) / n as f64;
        let f = |x: f64| t.logpdf(0, &[x]).unwrap().exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn optimal_eps_for_single_gaussian() {
        // x_t ~ N(sqrt(a) m, a v + 1 - a); E[eps | x_t] = sqrt(1-a)(x_t - sqrt(a) m)/(a v + 1 - a)
        let t = single(vec![0.5], vec![0.2]);
        let a: f64 = 0.3;
        let e = t.optimal_eps(0, &[1.1], a).unwrap()[0];
        let expected = (1.0 - a).sqrt() * (1.1 - a.sqrt() * 0.5) / (a * 0.2 + 1.0 - a);
        assert!((e - expected).abs() < 1e-14);
    }

    #[test]
    fn dataset_generation_and_round_trip() {
        let spec = TargetSpec::default_task();
        let ds = generate_dataset(&spec, 4096, &ConditionDistribution::Uniform, 3).unwrap();
        let n = 4096.0f64;
        let tol = 4.0 * (n * 0.25 * 0.75).sqrt();
        for c in ds.counts() {
            assert!((c as f64 - n / 4.0).abs() < tol);
        }
        let bytes = encode(&ds).unwrap();
        assert_eq!(decode(&bytes).unwrap(), ds);
        let again = generate_dataset(&spec, 4096, &ConditionDistribution::Uniform, 3).unwrap();
        assert_eq!(again, ds);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        persist(&ds, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ds);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let spec = TargetSpec::default_task();
        let ds = generate_dataset(&spec, 10, &ConditionDistribution::Uniform, 3).unwrap();
        let bytes = encode(&ds).unwrap();
        assert!(decode(&bytes[..bytes.len() - 5]).is_err());
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Format(_))));

        let mut v2 = bytes[..bytes.len() - 32].to_vec();
        v2[8] = 2;
        let digest: [u8; 32] = Sha256::digest(&v2).into();
        v2.extend_from_slice(&digest);
        assert!(decode(&v2).unwrap_err().to_string().contains("version"));

        let empty = Dataset { spec: spec.clone(), seed: 0, records: vec![] };
        assert!(decode(&encode(&empty).unwrap()).is_err());
        assert!(generate_dataset(&spec, 0, &ConditionDistribution::Uniform, 0).is_err());
    }
}
