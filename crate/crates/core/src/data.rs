//! Synthetic distributions, the generator's noise source, and CSV datasets.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    GaussianGrid,
    GaussianRing,
    TwoMoons,
    SwissRoll2d,
    File,
}

/// Where training data comes from. Only the fields relevant to `source` are
/// read; the rest keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: Source,
    /// Ring: number of modes.
    pub modes: usize,
    /// Ring: radius of the circle carrying the mode centers.
    pub radius: f64,
    /// Grid and ring: isotropic standard deviation around each center.
    pub sigma: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub spacing: f64,
    /// Moons and swiss roll: additive Gaussian noise scale.
    pub noise: f64,
    pub path: Option<PathBuf>,
    /// Number of points materialized from a synthetic source.
    pub size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: Source::GaussianRing,
            modes: 8,
            radius: 2.0,
            sigma: 0.02,
            grid_rows: 5,
            grid_cols: 5,
            spacing: 2.0,
            noise: 0.05,
            path: None,
            size: 10_000,
            train_fraction: 0.9,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn ring(modes: usize, radius: f64, sigma: f64) -> Self {
        Self {
            source: Source::GaussianRing,
            modes,
            radius,
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(contract(format!(
                "train_fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        match self.source {
            Source::GaussianRing if self.modes == 0 => Err(contract("ring needs at least one mode")),
            Source::GaussianGrid if self.grid_rows == 0 || self.grid_cols == 0 => {
                Err(contract("grid needs at least one row and column"))
            }
            Source::GaussianRing | Source::GaussianGrid if !(self.sigma > 0.0) => {
                Err(contract(format!("sigma must be positive, got {}", self.sigma)))
            }
            Source::TwoMoons | Source::SwissRoll2d if !(self.noise >= 0.0) => {
                Err(contract("noise must be non-negative"))
            }
            Source::File if self.path.is_none() => Err(contract("file source needs a path")),
            _ => Ok(()),
        }
    }

    /// Mode centers of the grid and ring sources.
    pub fn centers(&self) -> Option<Tensor> {
        match self.source {
            Source::GaussianRing => Some(ring_centers(self.modes, self.radius)),
            Source::GaussianGrid => {
                let (r, c) = (self.grid_rows, self.grid_cols);
                let mut rows = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        rows.push(vec![
                            (i as f64 - (r - 1) as f64 / 2.0) * self.spacing,
                            (j as f64 - (c - 1) as f64 / 2.0) * self.spacing,
                        ]);
                    }
                }
                Tensor::from_rows(&rows).ok()
            }
            _ => None,
        }
    }
}

pub fn ring_centers(modes: usize, radius: f64) -> Tensor {
    Tensor::from_fn(modes, 2, |k, j| {
        let angle = 2.0 * PI * k as f64 / modes as f64;
        radius * if j == 0 { angle.cos() } else { angle.sin() }
    })
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws `b` i.i.d. points from a synthetic source.
pub fn sample(spec: &DatasetSpec, b: usize, rng: &mut Rng) -> Result<Tensor> {
    if b == 0 {
        return Err(contract("sample size must be at least 1"));
    }
    spec.validate()?;
    let mut data = Vec::with_capacity(2 * b);
    match spec.source {
        Source::GaussianRing | Source::GaussianGrid => {
            let centers = spec.centers().expect("grid and ring have centers");
            for _ in 0..b {
                let k = rng.random_range(0..centers.rows());
                let c = centers.row(k);
                data.push(c[0] + spec.sigma * normal(rng));
                data.push(c[1] + spec.sigma * normal(rng));
            }
        }
        Source::TwoMoons => {
            for _ in 0..b {
                let t = PI * rng.random::<f64>();
                let (x, y) = if rng.random::<bool>() {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                data.push(x + spec.noise * normal(rng));
                data.push(y + spec.noise * normal(rng));
            }
        }
        Source::SwissRoll2d => {
            for _ in 0..b {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                // Scaled so the roll fits roughly in [-2, 2]².
                data.push(t * t.cos() / 7.5 + spec.noise * normal(rng));
                data.push(t * t.sin() / 7.5 + spec.noise * normal(rng));
            }
        }
        Source::File => {
            let all = read_csv(spec.path.as_deref().expect("validated"))?;
            if all.rows() == 0 {
                return Err(contract("cannot sample from an empty file"));
            }
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..all.rows())).collect();
            return Ok(all.select_rows(&idx));
        }
    }
    Tensor::new(b, 2, data)
}

/// The full dataset: `size` seeded draws for synthetic sources, the file
/// contents otherwise.
pub fn materialize(spec: &DatasetSpec) -> Result<Tensor> {
    spec.validate()?;
    match spec.source {
        Source::File => read_csv(spec.path.as_deref().expect("validated")),
        _ => sample(spec, spec.size, &mut rng::stream(spec.seed, 0)),
    }
}

/// Seeded shuffle, then the first `round(fraction·n)` rows go to training.
pub fn split(spec: &DatasetSpec, data: &Tensor) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let n = data.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(spec.seed, 1));
    let n_train = ((spec.train_fraction * n as f64).round() as usize).min(n);
    let (a, b) = idx.split_at(n_train);
    Ok((data.select_rows(a), data.select_rows(b)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    StandardNormal,
    /// Uniform on `(−1, 1)` per coordinate.
    Uniform,
}

impl NoiseFamily {
    pub fn code(self) -> u8 {
        match self {
            NoiseFamily::StandardNormal => 0,
            NoiseFamily::Uniform => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(NoiseFamily::StandardNormal),
            1 => Some(NoiseFamily::Uniform),
            _ => None,
        }
    }
}

/// Base distribution the generator transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub dim: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            family: NoiseFamily::StandardNormal,
            dim: 4,
        }
    }
}

impl NoiseSpec {
    pub fn sample(&self, b: usize, rng: &mut Rng) -> Result<Tensor> {
        if self.dim == 0 {
            return Err(contract("noise dimension must be at least 1"));
        }
        let data = (0..b * self.dim)
            .map(|_| match self.family {
                NoiseFamily::StandardNormal => normal(rng),
                NoiseFamily::Uniform => rng.random_range(-1.0..1.0),
            })
            .collect();
        Tensor::new(b, self.dim, data)
    }
}

/// Headerless CSV, one vector per row.
pub fn read_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, path)
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("bad number {f:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(format!(
                    "expected {} columns, found {}",
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

/// Writes rows with shortest round-trip float formatting.
pub fn write_csv(path: &Path, data: &Tensor) -> Result<()> {
    let mut out = String::with_capacity(data.len() * 20);
    for r in data.iter_rows() {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_samples_stay_near_centers() {
        let spec = DatasetSpec::ring(8, 2.0, 0.02);
        let centers = spec.centers().unwrap();
        let x = sample(&spec, 10_000, &mut rng::seeded(1)).unwrap();
        for p in x.iter_rows() {
            let near = centers.iter_rows().any(|c| {
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() <= 6.0 * 0.02
            });
            assert!(near, "{p:?} far from every center");
        }
    }

    #[test]
    fn noise_mean_converges() {
        let n = 100_000;
        let z = NoiseSpec::default().sample(n, &mut rng::seeded(3)).unwrap();
        for m in z.column_means().data() {
            assert!(m.abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let x = sample(&DatasetSpec::default(), 50, &mut rng::seeded(9)).unwrap();
        write_csv(&p, &x).unwrap();
        assert_eq!(read_csv(&p).unwrap(), x);
    }

    #[test]
    fn malformed_row_names_line() {
        let err = parse_csv("1,2\n3,4\n5,oops\n", Path::new("d.csv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        assert!(parse_csv("1,2\n3\n", Path::new("d.csv")).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = DatasetSpec::default();
        let data = Tensor::from_fn(1000, 2, |i, j| (i * 2 + j) as f64);
        let (a, b) = split(&spec, &data).unwrap();
        assert_eq!((a.rows(), b.rows()), (900, 100));
        let (a2, b2) = split(&spec, &data).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn split_is_a_partition() {
        let spec = DatasetSpec::default();
        let data = Tensor::from_fn(257, 2, |i, j| ((i * 31 + j * 7) % 13) as f64);
        let (a, b) = split(&spec, &data).unwrap();
        let key = |r: &[f64]| (r[0].to_bits(), r[1].to_bits());
        let mut union: Vec<_> = a.iter_rows().chain(b.iter_rows()).map(key).collect();
        let mut orig: Vec<_> = data.iter_rows().map(key).collect();
        union.sort();
        orig.sort();
        assert_eq!(union, orig);
    }

    #[test]
    fn samplers_are_seeded_and_finite() {
        for source in [Source::GaussianGrid, Source::GaussianRing, Source::TwoMoons, Source::SwissRoll2d] {
            let spec = DatasetSpec {
                source,
                ..DatasetSpec::default()
            };
            let a = sample(&spec, 300, &mut rng::seeded(5)).unwrap();
            let b = sample(&spec, 300, &mut rng::seeded(5)).unwrap();
            assert_eq!(a, b);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = DatasetSpec::default();
        spec.train_fraction = 1.0;
        assert!(spec.validate().is_err());
        let spec = DatasetSpec::ring(8, 2.0, 0.0);
        assert!(spec.validate().is_err());
    }
}
