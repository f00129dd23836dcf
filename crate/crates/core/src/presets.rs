//! Named experiment setups: the six benchmark problems with their agent
//! counts, tolerances and tuned method parameters, plus small built-in
//! problems that need no data files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::datasets::{self, Dataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optimizers::{BaselineParams, IpsgParams, Method, MethodId, StepSize};

/// Optimizer epsilon for the adaptive baselines.
pub const ADAPTIVE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Benchmark {
    Cleveland,
    Ash608,
    Abtaha1,
    Mnist,
    Gre343,
    Illc1850,
}

impl Benchmark {
    pub const ALL: [Benchmark; 6] = [
        Benchmark::Cleveland,
        Benchmark::Ash608,
        Benchmark::Abtaha1,
        Benchmark::Mnist,
        Benchmark::Gre343,
        Benchmark::Illc1850,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Benchmark::Cleveland => "cleveland",
            Benchmark::Ash608 => "ash608",
            Benchmark::Abtaha1 => "abtaha1",
            Benchmark::Mnist => "mnist",
            Benchmark::Gre343 => "gre_343",
            Benchmark::Illc1850 => "illc1850",
        }
    }

    /// File expected inside the data directory.
    pub fn file_name(&self) -> &'static str {
        match self {
            Benchmark::Cleveland => "cleveland.csv",
            Benchmark::Ash608 => "ash608.mtx",
            Benchmark::Abtaha1 => "abtaha1.mtx",
            Benchmark::Mnist => "mnist_train.csv",
            Benchmark::Gre343 => "gre_343.mtx",
            Benchmark::Illc1850 => "illc1850.mtx",
        }
    }

    pub fn agents(&self) -> usize {
        match self {
            Benchmark::Cleveland | Benchmark::Abtaha1 => 4,
            Benchmark::Ash608 => 8,
            Benchmark::Gre343 => 7,
            Benchmark::Mnist | Benchmark::Illc1850 => 10,
        }
    }

    pub fn eps_tol(&self) -> f64 {
        match self {
            Benchmark::Cleveland => 1.5e-3,
            Benchmark::Ash608 => 1e-4,
            Benchmark::Abtaha1 => 1e-3,
            Benchmark::Mnist => 2.6e-3,
            Benchmark::Gre343 => 4e-3,
            Benchmark::Illc1850 => 0.2,
        }
    }

    /// Default iteration budget, a few times the slowest reported count.
    pub fn t_max(&self) -> u64 {
        match self {
            Benchmark::Cleveland => 20_000,
            Benchmark::Ash608 => 40_000,
            Benchmark::Abtaha1 => 100_000,
            Benchmark::Mnist => 50_000,
            Benchmark::Gre343 => 500_000,
            Benchmark::Illc1850 => 500_000,
        }
    }

    pub fn x0(&self, d: usize) -> Vec<f64> {
        match self {
            Benchmark::Cleveland => vec![10.0; d],
            _ => vec![0.0; d],
        }
    }

    pub fn ipsg(&self) -> IpsgParams {
        let (alpha, delta, beta) = match self {
            Benchmark::Cleveland => (0.0031, 0.5, 30.0),
            Benchmark::Ash608 => (0.1163, 1.0, 1.0),
            Benchmark::Abtaha1 => (0.0052, 2.0, 5.0),
            Benchmark::Mnist => (0.0003, 0.1, 1.0),
            Benchmark::Gre343 => (1.2, 2.5, 0.5),
            Benchmark::Illc1850 => (0.4436, 2.0, 1.0),
        };
        IpsgParams { alpha, delta, beta }
    }

    /// Tuned parameters for `method` on this problem.
    pub fn method(&self, method: MethodId) -> Method {
        use StepSize::{Constant, InvSqrt};
        let eps = ADAPTIVE_EPS;
        match method {
            MethodId::Ipsg => Method::Ipsg(self.ipsg()),
            MethodId::Sgd => Method::Baseline(BaselineParams::sgd(match self {
                Benchmark::Gre343 => 1.96,
                _ => self.ipsg().alpha,
            })),
            MethodId::AdaGrad => Method::Baseline(BaselineParams::adagrad(Constant(1.0), eps)),
            MethodId::AmsGrad => {
                let (step, b2) = match self {
                    Benchmark::Cleveland => (Constant(0.05), 0.999),
                    Benchmark::Ash608 => (InvSqrt(0.5), 0.99),
                    Benchmark::Abtaha1 => (InvSqrt(1.0), 0.99),
                    Benchmark::Mnist => (Constant(1.0), 0.999),
                    Benchmark::Gre343 => (InvSqrt(0.1), 0.999),
                    Benchmark::Illc1850 => (InvSqrt(0.5), 0.99),
                };
                Method::Baseline(BaselineParams::amsgrad(step, 0.9, b2, eps))
            }
            MethodId::Adam => {
                let step = match self {
                    Benchmark::Cleveland => Constant(0.05),
                    Benchmark::Ash608 => InvSqrt(0.1),
                    Benchmark::Abtaha1 => InvSqrt(0.5),
                    Benchmark::Mnist => Constant(0.1),
                    Benchmark::Gre343 => InvSqrt(0.2),
                    Benchmark::Illc1850 => InvSqrt(0.5),
                };
                Method::Baseline(BaselineParams::adam(step, 0.9, 0.999, eps))
            }
        }
    }

    /// Loads the problem from `data_dir`.
    pub fn load(&self, data_dir: &Path) -> Result<Dataset> {
        let path = datasets::data_path(data_dir, self.file_name());
        if !path.exists() {
            return Err(Error::invalid(format!(
                "{} not found; place the {} file in the data directory",
                path.display(),
                self.name()
            )));
        }
        match self {
            Benchmark::Cleveland => datasets::tabular_dataset(self.name(), &path, "num", 212),
            Benchmark::Mnist => datasets::mnist_dataset(&path, 1500),
            _ => datasets::collection_dataset(self.name(), &path),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name() == key || b.name().replace('_', "") == key)
            .ok_or_else(|| Error::invalid(format!("unknown benchmark '{s}'")))
    }
}

/// Problems generated in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Builtin {
    /// One row `a = [1]`, `b = 1`.
    Scalar,
    /// 50×8 Gaussian design with noisy outputs.
    Rand50x8,
    /// 20×5 Gaussian design with noisy outputs.
    Rand20x5,
    /// 40×4 Gaussian design with exact outputs, so every row shares the minimizer.
    Consistent40x4,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [
        Builtin::Scalar,
        Builtin::Rand50x8,
        Builtin::Rand20x5,
        Builtin::Consistent40x4,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Builtin::Scalar => "scalar",
            Builtin::Rand50x8 => "rand50x8",
            Builtin::Rand20x5 => "rand20x5",
            Builtin::Consistent40x4 => "consistent40x4",
        }
    }

    pub fn agents(&self) -> usize {
        match self {
            Builtin::Scalar => 1,
            Builtin::Rand50x8 => 5,
            Builtin::Rand20x5 => 4,
            Builtin::Consistent40x4 => 4,
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match self {
            Builtin::Scalar => Dataset::new("scalar", Matrix::from_diag(&[1.0]), vec![1.0])?
                .with_provenance("builtin scalar problem")
                .with_consistent_minimizer(vec![1.0]),
            Builtin::Rand50x8 => datasets::synthetic_dataset(self.name(), 50, 8, 0.1, 508),
            Builtin::Rand20x5 => datasets::synthetic_dataset(self.name(), 20, 5, 0.1, 205),
            Builtin::Consistent40x4 => datasets::synthetic_dataset(self.name(), 40, 4, 0.0, 404),
        }
    }

    /// Conservative IPSG parameters that satisfy the small-step hypotheses.
    pub fn ipsg(&self) -> IpsgParams {
        match self {
            Builtin::Scalar => IpsgParams { alpha: 0.5, delta: 1.0, beta: 1.0 },
            _ => IpsgParams { alpha: 0.02, delta: 0.5, beta: 1.0 },
        }
    }
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Builtin::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown builtin problem '{s}'")))
    }
}
