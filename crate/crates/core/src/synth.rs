//! Von Mises-Fisher sampling, density and concentration estimation, and
//! clustered synthetic datasets built from vMF mixtures.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::embedding::{dot, norm};
use crate::error::{Error, Result};
use crate::rng::Rng;

const UNIT_TOL: f64 = 1e-9;

/// `ln I_ν(x)` for the modified Bessel function of the first kind.
///
/// Uses the power series (all terms positive, summed in log space) for
/// moderate arguments and the large-argument Hankel expansion otherwise.
pub fn ln_bessel_i(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x >= 0.0, "ln_bessel_i requires nu, x >= 0");
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x > 50.0_f64.max(4.0 * nu * nu) {
        ln_bessel_i_asymptotic(nu, x)
    } else {
        ln_bessel_i_series(nu, x)
    }
}

fn ln_bessel_i_series(nu: f64, x: f64) -> f64 {
    let half_ln = (x / 2.0).ln();
    let term = |k: f64| (2.0 * k + nu) * half_ln - ln_gamma(k + 1.0) - ln_gamma(k + nu + 1.0);
    // Terms peak near k ≈ x/2; sum relative to the peak.
    let peak_k = (x / 2.0).floor();
    let peak = term(peak_k);
    let mut sum = 0.0;
    let mut k = 0.0;
    loop {
        let r = (term(k) - peak).exp();
        sum += r;
        if k > peak_k && r < 1e-18 * sum {
            break;
        }
        k += 1.0;
    }
    peak + sum.ln()
}

fn ln_bessel_i_asymptotic(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut series = 1.0;
    let mut term = 1.0;
    for k in 1..40 {
        let j = (2 * k - 1) as f64;
        let next = -term * (mu - j * j) / (k as f64 * 8.0 * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        series += term;
        if term.abs() < 1e-17 * series.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + series.ln()
}

/// Surface area of the unit sphere `S^{d−1}` in `ℝ^d`.
pub fn sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * PI.powf(h) / ln_gamma(h).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "vMF needs dimension >= 2, got {}",
                mu.len()
            )));
        }
        if ((norm(&mu)) - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidArgument(format!(
                "mean direction must be a unit vector, norm = {}",
                norm(&mu)
            )));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidArgument(format!("kappa must be >= 0, got {kappa}")));
        }
        Ok(Self { mu, kappa })
    }

    /// Normalizes `direction` before building the parameters.
    pub fn from_direction(direction: &[f64], kappa: f64) -> Result<Self> {
        let n = norm(direction);
        if n == 0.0 {
            return Err(Error::DegenerateVector { row: 0 });
        }
        Self::new(direction.iter().map(|v| v / n).collect(), kappa)
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `ln C_d(κ)`.
    pub fn ln_normalizer(&self) -> f64 {
        let d = self.dim() as f64;
        if self.kappa == 0.0 {
            return -sphere_area(self.dim()).ln();
        }
        let nu = d / 2.0 - 1.0;
        nu * self.kappa.ln() - (d / 2.0) * (2.0 * PI).ln() - ln_bessel_i(nu, self.kappa)
    }
}

/// `C_d(κ)·exp(κ μᵀx)` on the unit sphere.
pub fn vmf_density(x: &[f64], params: &VmfParams) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            actual: x.len(),
        });
    }
    if (norm(x) - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidArgument(format!(
            "density point must be a unit vector, norm = {}",
            norm(x)
        )));
    }
    Ok((params.ln_normalizer() + params.kappa * dot(params.mu(), x)).exp())
}

/// Uniform draw on `S^{d−1}`.
pub fn sample_sphere(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&g);
        if n > 1e-12 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

/// One vMF draw by Wood's rejection scheme on the tangent-normal split
/// `x = w·μ + √(1 − w²)·ξ`, `ξ ⟂ μ` uniform.
pub fn sample_vmf(params: &VmfParams, rng: &mut Rng) -> Vec<f64> {
    let d = params.dim();
    if params.kappa == 0.0 {
        return sample_sphere(d, rng);
    }
    let mu = params.mu();
    let kappa = params.kappa;
    let dm1 = (d - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta parameters");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    let tangent = loop {
        let mut g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let along = dot(&g, mu);
        for (gi, mi) in g.iter_mut().zip(mu) {
            *gi -= along * mi;
        }
        let n = norm(&g);
        if n > 1e-12 {
            break g.into_iter().map(|v| v / n).collect::<Vec<_>>();
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    let x: Vec<f64> = mu.iter().zip(&tangent).map(|(m, t)| w * m + s * t).collect();
    let n = norm(&x);
    x.into_iter().map(|v| v / n).collect()
}

/// Banerjee et al. approximation `κ̂ = r̄(d − r̄²)/(1 − r̄²)`.
pub fn estimate_kappa(samples: &Array2<f64>) -> Result<f64> {
    let (m, d) = samples.dim();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples, got {m}"
        )));
    }
    if let Some((i, _)) = samples
        .rows()
        .into_iter()
        .enumerate()
        .find(|(_, r)| (r.dot(r).sqrt() - 1.0).abs() > 1e-6)
    {
        return Err(Error::InvalidArgument(format!("sample {i} is not unit norm")));
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty");
    let r = mean.dot(&mean).sqrt();
    if r >= 1.0 - 1e-12 {
        return Err(Error::DegenerateConcentration(r));
    }
    if r <= 1e-12 {
        return Ok(0.0);
    }
    let d = d as f64;
    Ok(r * (d - r * r) / (1.0 - r * r))
}

/// Layout of a clustered synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_classes: usize,
    /// Tight groups inside each class (views / walking conditions).
    pub subclusters_per_class: usize,
    pub samples_per_subcluster: usize,
    pub input_dim: usize,
    /// Spread of subcluster means around the class mean.
    pub class_kappa: f64,
    /// Spread of samples around their subcluster mean.
    pub subcluster_kappa: f64,
    /// Fraction of samples drawn from another class's component while
    /// keeping their own label.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 32,
            subclusters_per_class: 2,
            samples_per_subcluster: 50,
            input_dim: 32,
            class_kappa: 20.0,
            subcluster_kappa: 80.0,
            noise_fraction: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let count = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::InvalidSpec(format!("{what} must be >= 1")))
            } else {
                Ok(())
            }
        };
        count(self.n_classes, "n_classes")?;
        count(self.subclusters_per_class, "subclusters_per_class")?;
        count(self.samples_per_subcluster, "samples_per_subcluster")?;
        if self.input_dim < 2 {
            return Err(Error::InvalidSpec("input_dim must be >= 2".into()));
        }
        for (name, k) in [("class_kappa", self.class_kappa), ("subcluster_kappa", self.subcluster_kappa)] {
            if !(k >= 0.0) || !k.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be finite and >= 0, got {k}")));
            }
        }
        if self.subcluster_kappa < self.class_kappa {
            return Err(Error::InvalidSpec(format!(
                "subcluster_kappa ({}) must be >= class_kappa ({})",
                self.subcluster_kappa, self.class_kappa
            )));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::InvalidSpec(format!(
                "noise_fraction must lie in [0, 1), got {}",
                self.noise_fraction
            )));
        }
        if self.noise_fraction > 0.0 && self.n_classes < 2 {
            return Err(Error::InvalidSpec("label noise needs at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.n_classes * self.subclusters_per_class * self.samples_per_subcluster
    }

    pub fn noisy_samples(&self) -> usize {
        (self.noise_fraction * self.total_samples() as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub subclusters: Vec<usize>,
    pub noise: Vec<bool>,
}

/// Draws a dataset: class means uniform on the sphere, subcluster means
/// `vMF(class mean, class_kappa)`, samples `vMF(subcluster mean,
/// subcluster_kappa)`. Rows are ordered by class, then subcluster.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = crate::rng::seeded(spec.seed);
    let d = spec.input_dim;
    let class_means: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| sample_sphere(d, &mut rng)).collect();
    let mut components = Vec::with_capacity(spec.n_classes);
    for mean in &class_means {
        let around = VmfParams::new(mean.clone(), spec.class_kappa)?;
        let subs = (0..spec.subclusters_per_class)
            .map(|_| VmfParams::new(sample_vmf(&around, &mut rng), spec.subcluster_kappa))
            .collect::<Result<Vec<_>>>()?;
        components.push(subs);
    }

    let total = spec.total_samples();
    let mut noise = vec![false; total];
    for i in index::sample(&mut rng, total, spec.noisy_samples()) {
        noise[i] = true;
    }

    let mut features = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut subclusters = Vec::with_capacity(total);
    let mut row = 0;
    for class in 0..spec.n_classes {
        for sub in 0..spec.subclusters_per_class {
            for _ in 0..spec.samples_per_subcluster {
                let component = if noise[row] {
                    let other = (class + 1 + rng.random_range(0..spec.n_classes - 1)) % spec.n_classes;
                    &components[other][rng.random_range(0..spec.subclusters_per_class)]
                } else {
                    &components[class][sub]
                };
                let x = sample_vmf(component, &mut rng);
                features.row_mut(row).assign(&ndarray::ArrayView1::from(&x));
                labels.push(class);
                subclusters.push(sub);
                row += 1;
            }
        }
    }
    Ok(SynthDataset {
        features,
        labels,
        subclusters,
        noise,
    })
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            subclusters: rows.iter().map(|&i| self.subclusters[i]).collect(),
            noise: rows.iter().map(|&i| self.noise[i]).collect(),
        }
    }

    /// CSV with header `label,subcluster,noise,f0..f{D-1}`; features are
    /// written in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,subcluster,noise");
        for j in 0..self.dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for (i, row) in self.features.rows().into_iter().enumerate() {
            let _ = write!(
                out,
                "{},{},{}",
                self.labels[i],
                self.subclusters[i],
                u8::from(self.noise[i])
            );
            for v in row {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..3] != ["label", "subcluster", "noise"] {
            return Err(Error::Parse(format!("unexpected header `{header}`")));
        }
        for (j, c) in cols[3..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::Parse(format!("unexpected feature column `{c}`")));
            }
        }
        let d = cols.len() - 3;
        let (mut labels, mut subclusters, mut noise, mut values) = (vec![], vec![], vec![], vec![]);
        let parse_err = |line: usize, e: &dyn std::fmt::Display| Error::Parse(format!("line {}: {e}", line + 2));
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != d + 3 {
                return Err(parse_err(i, &format!("expected {} cells, got {}", d + 3, cells.len())));
            }
            labels.push(cells[0].parse::<usize>().map_err(|e| parse_err(i, &e))?);
            subclusters.push(cells[1].parse::<usize>().map_err(|e| parse_err(i, &e))?);
            noise.push(match cells[2] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(i, &format!("noise flag `{other}`"))),
            });
            for c in &cells[3..] {
                values.push(c.parse::<f64>().map_err(|e| parse_err(i, &e))?);
            }
        }
        let features = Array2::from_shape_vec((labels.len(), d), values)
            .map_err(|e| Error::Parse(e.to_string()))?;
        Ok(Self {
            features,
            labels,
            subclusters,
            noise,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}
