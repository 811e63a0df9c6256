//! Synthetic source and target distributions.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::NumArray;
use crate::paths::{AffineMap, Coupling};
use crate::rng::{normal, uniform, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    StandardGaussian {
        dim: usize,
    },
    /// Isotropic Gaussian `N(mean, std² I)`.
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
    /// Eight isotropic Gaussians centred at angles `kπ/4` on a circle.
    EightGaussians {
        radius: f64,
        std: f64,
    },
    TwoMoons {
        noise: f64,
    },
    /// Uniform on the "black" cells (even `i + j`) of a `cells x cells`
    /// board covering `[-extent, extent]²`.
    Checkerboard {
        cells: usize,
        extent: f64,
    },
}

impl DistributionSpec {
    pub fn eight_gaussians() -> Self {
        DistributionSpec::EightGaussians {
            radius: 4.0,
            std: 0.3,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::StandardGaussian { dim } => *dim,
            DistributionSpec::Gaussian { mean, .. } => mean.len(),
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        match self {
            DistributionSpec::StandardGaussian { dim } if *dim == 0 => {
                bad("gaussian dimension must be >= 1".into())
            }
            DistributionSpec::Gaussian { mean, std } => {
                if mean.is_empty() {
                    bad("gaussian mean must be non-empty".into())
                } else if !(*std > 0.0) {
                    bad(format!("gaussian std must be positive, got {std}"))
                } else {
                    Ok(())
                }
            }
            DistributionSpec::EightGaussians { radius, std } => {
                if !(*std > 0.0) || !(*radius > 0.0) {
                    bad(format!(
                        "eight-gaussians needs positive radius and std, got {radius}, {std}"
                    ))
                } else {
                    Ok(())
                }
            }
            DistributionSpec::TwoMoons { noise } if !(*noise >= 0.0) => {
                bad(format!("two-moons noise {noise} < 0"))
            }
            DistributionSpec::Checkerboard { cells, extent } => {
                if *cells < 2 {
                    bad(format!("checkerboard needs at least 2 cells, got {cells}"))
                } else if !(*extent > 0.0) {
                    bad(format!(
                        "checkerboard extent must be positive, got {extent}"
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Centres of the eight-Gaussians mixture (empty for other kinds).
    pub fn centers(&self) -> Vec<[f64; 2]> {
        match self {
            DistributionSpec::EightGaussians { radius, .. } => (0..8)
                .map(|k| {
                    let a = k as f64 * std::f64::consts::FRAC_PI_4;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// `n` i.i.d. draws as an `[n, d]` array.
pub fn sample(spec: &DistributionSpec, n: usize, rng: &mut Rng) -> Result<NumArray> {
    spec.validate()?;
    let d = spec.dim();
    let mut data = Vec::with_capacity(n * d);
    match spec {
        DistributionSpec::StandardGaussian { .. } => {
            data.extend((0..n * d).map(|_| normal(rng)));
        }
        DistributionSpec::Gaussian { mean, std } => {
            for _ in 0..n {
                data.extend(mean.iter().map(|m| m + std * normal(rng)));
            }
        }
        DistributionSpec::EightGaussians { std, .. } => {
            let centers = spec.centers();
            for _ in 0..n {
                let c = centers[rng.random_range(0..8)];
                data.push(c[0] + std * normal(rng));
                data.push(c[1] + std * normal(rng));
            }
        }
        DistributionSpec::TwoMoons { noise } => {
            for _ in 0..n {
                let upper = rng.random_bool(0.5);
                let a = uniform(rng, 0.0, std::f64::consts::PI);
                let (x, y) = if upper {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                if *noise > 0.0 {
                    data.push(x + noise * normal(rng));
                    data.push(y + noise * normal(rng));
                } else {
                    data.push(x);
                    data.push(y);
                }
            }
        }
        DistributionSpec::Checkerboard { cells, extent } => {
            let black: Vec<(usize, usize)> = (0..*cells)
                .flat_map(|i| (0..*cells).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            let size = 2.0 * extent / *cells as f64;
            for _ in 0..n {
                let (i, j) = black[rng.random_range(0..black.len())];
                data.push(-extent + size * (i as f64 + rng.random::<f64>()));
                data.push(-extent + size * (j as f64 + rng.random::<f64>()));
            }
        }
    }
    NumArray::new(vec![n, d], data)
}

/// Deterministic coupling `x1 = A x0 + b` over the given source.
pub fn make_affine_coupling(
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
    source: DistributionSpec,
) -> Result<Coupling> {
    let map = AffineMap::new(matrix, offset)?;
    if map.dim() != source.dim() {
        return Err(Error::Shape(format!(
            "affine map of dim {} over source of dim {}",
            map.dim(),
            source.dim()
        )));
    }
    source.validate()?;
    Ok(Coupling::Affine { source, map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn standard_gaussian_moments() {
        let n = 100_000;
        let x = sample(
            &DistributionSpec::StandardGaussian { dim: 2 },
            n,
            &mut stream_rng(1, Stream::Data),
        )
        .unwrap();
        for c in 0..2 {
            let col: Vec<f64> = x.iter_rows().map(|r| r[c]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn eight_gaussians_stay_near_centers() {
        let spec = DistributionSpec::EightGaussians {
            radius: 4.0,
            std: 0.1,
        };
        let centers = spec.centers();
        let x = sample(&spec, 5000, &mut stream_rng(2, Stream::Data)).unwrap();
        for r in x.iter_rows() {
            let best = centers
                .iter()
                .map(|c| ((r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.6, "{r:?}");
        }
    }

    #[test]
    fn noiseless_moons_lie_on_half_circles() {
        let x = sample(
            &DistributionSpec::TwoMoons { noise: 0.0 },
            2000,
            &mut stream_rng(3, Stream::Data),
        )
        .unwrap();
        for r in x.iter_rows() {
            let upper = (r[0].powi(2) + r[1].powi(2) - 1.0).abs() < 1e-12 && r[1] >= 0.0;
            let lower =
                ((r[0] - 1.0).powi(2) + (r[1] - 0.5).powi(2) - 1.0).abs() < 1e-12 && r[1] <= 0.5;
            assert!(upper || lower, "{r:?}");
        }
    }

    #[test]
    fn checkerboard_points_on_black_cells() {
        let spec = DistributionSpec::Checkerboard {
            cells: 4,
            extent: 2.0,
        };
        let x = sample(&spec, 2000, &mut stream_rng(4, Stream::Data)).unwrap();
        for r in x.iter_rows() {
            let i = ((r[0] + 2.0) / 1.0).floor() as usize;
            let j = ((r[1] + 2.0) / 1.0).floor() as usize;
            assert_eq!((i + j) % 2, 0);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut rng = stream_rng(0, Stream::Data);
        assert!(sample(
            &DistributionSpec::Gaussian {
                mean: vec![0.0],
                std: 0.0
            },
            1,
            &mut rng
        )
        .is_err());
        assert!(sample(
            &DistributionSpec::EightGaussians {
                radius: 4.0,
                std: -1.0
            },
            1,
            &mut rng
        )
        .is_err());
        assert!(sample(
            &DistributionSpec::Checkerboard {
                cells: 1,
                extent: 1.0
            },
            1,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        for spec in [
            DistributionSpec::eight_gaussians(),
            DistributionSpec::TwoMoons { noise: 0.1 },
            DistributionSpec::Checkerboard {
                cells: 4,
                extent: 2.0,
            },
            DistributionSpec::Gaussian {
                mean: vec![1.0, 2.0, 3.0],
                std: 0.5,
            },
        ] {
            let a = sample(&spec, 64, &mut stream_rng(9, Stream::Data)).unwrap();
            let b = sample(&spec, 64, &mut stream_rng(9, Stream::Data)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn affine_coupling_constructors() {
        let src = DistributionSpec::StandardGaussian { dim: 2 };
        assert!(make_affine_coupling(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            src.clone()
        )
        .is_ok());
        assert!(make_affine_coupling(vec![vec![1.0]], vec![0.0], src).is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = DistributionSpec::eight_gaussians();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"kind":"eight-gaussians","radius":4.0,"std":0.3}"#);
        assert_eq!(
            serde_json::from_str::<DistributionSpec>(&text).unwrap(),
            spec
        );
        assert!(serde_json::from_str::<DistributionSpec>(
            r#"{"kind":"two-moons","noise":0.1,"nosie":1}"#
        )
        .is_err());
    }
}
