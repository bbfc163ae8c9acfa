use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Incompressible,
    Compressible,
}

impl System {
    pub fn channels(self) -> Vec<String> {
        let names: &[&str] = match self {
            System::Incompressible => &["u", "v"],
            System::Compressible => &["rho", "u", "v", "p"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Name of the PDE coefficient that differs between regimes.
    pub fn coefficient_name(self) -> &'static str {
        match self {
            System::Incompressible => "nu",
            System::Compressible => "gamma",
        }
    }

    /// Side length of the periodic square.
    pub fn domain_length(self) -> f64 {
        match self {
            System::Incompressible => 2.0,
            System::Compressible => 1.0,
        }
    }

    pub fn domain_origin(self) -> f64 {
        match self {
            System::Incompressible => -1.0,
            System::Compressible => 0.0,
        }
    }
}

/// One simulation: initial-condition parameters, PDE coefficient and
/// discretisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub system: System,
    pub alpha: f64,
    pub beta: f64,
    /// ν (incompressible) or γ (compressible).
    pub coefficient: f64,
    pub grid: usize,
    pub dt: f64,
    pub t_final: f64,
}

impl SimParams {
    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn spacing(&self) -> f64 {
        self.system.domain_length() / self.grid as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub coefficient: f64,
}

impl ParamRanges {
    pub fn train(system: System) -> Self {
        match system {
            System::Incompressible => Self {
                alpha: (0.5, 1.0),
                beta: (0.5, 1.0),
                coefficient: 0.001,
            },
            System::Compressible => Self {
                alpha: (0.1, 0.5),
                beta: (1.0, 5.0),
                coefficient: 5.0 / 3.0,
            },
        }
    }

    pub fn ood(system: System) -> Self {
        match system {
            System::Incompressible => Self {
                alpha: (0.1, 0.5),
                beta: (0.1, 0.5),
                coefficient: 0.01,
            },
            System::Compressible => Self {
                alpha: (0.5, 1.0),
                beta: (5.0, 10.0),
                coefficient: 2.0 / 3.0,
            },
        }
    }
}

/// `n` points in `[0, 1)^dims`, exactly one per stratum per dimension.
pub fn latin_hypercube(n: usize, dims: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(CoreError::Config("Latin hypercube needs n >= 1".into()));
    }
    let mut r = rng::stream(seed, "lhs");
    let mut pts = vec![vec![0.0; dims]; n];
    for d in 0..dims {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        for (i, p) in pts.iter_mut().enumerate() {
            p[d] = (perm[i] as f64 + r.gen::<f64>()) / n as f64;
        }
    }
    Ok(pts)
}

pub fn sample_params(
    system: System,
    ranges: &ParamRanges,
    n: usize,
    grid: usize,
    dt: f64,
    t_final: f64,
    seed: u64,
) -> Result<Vec<SimParams>> {
    for (name, (lo, hi)) in [("alpha", ranges.alpha), ("beta", ranges.beta)] {
        if !(hi > lo) {
            return Err(CoreError::Config(format!("empty {name} range [{lo}, {hi}]")));
        }
    }
    Ok(latin_hypercube(n, 2, seed)?
        .into_iter()
        .map(|p| SimParams {
            system,
            alpha: ranges.alpha.0 + p[0] * (ranges.alpha.1 - ranges.alpha.0),
            beta: ranges.beta.0 + p[1] * (ranges.beta.1 - ranges.beta.0),
            coefficient: ranges.coefficient,
            grid,
            dt,
            t_final,
        })
        .collect())
}
