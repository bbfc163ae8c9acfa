//! Produce the five dataset splits of one system.

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::compressible::solve_compressible;
use super::dataset::{Dataset, NormStats, Split, Trajectory};
use super::incompressible::solve_incompressible;
use super::params::{sample_params, ParamRanges, SimParams, System};
use crate::error::{CoreError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub system: System,
    /// Solver grid per axis.
    pub grid: usize,
    pub dt: f64,
    /// Horizon of the train, test and OOD splits.
    pub t_final: f64,
    /// Horizon of the extrapolation splits.
    pub t_extrapolate: f64,
    pub t_stride: usize,
    pub x_stride: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub train_ranges: ParamRanges,
    pub ood_ranges: ParamRanges,
}

impl GenConfig {
    pub fn desk(system: System) -> Self {
        let (t_final, t_extrapolate, t_stride) = match system {
            System::Incompressible => (0.25, 0.5, 10),
            System::Compressible => (1.0, 2.0, 20),
        };
        Self {
            system,
            grid: 64,
            dt: 0.001,
            t_final,
            t_extrapolate,
            t_stride,
            x_stride: 2,
            n_train: 64,
            n_test: 8,
            n_ood: 8,
            train_ranges: ParamRanges::train(system),
            ood_ranges: ParamRanges::ood(system),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let steps = |t: f64| (t / self.dt).round() as usize;
        let ok = self.dt > 0.0
            && self.t_final > 0.0
            && self.t_extrapolate >= self.t_final
            && self.t_stride > 0
            && self.x_stride > 0
            && self.grid % self.x_stride == 0
            && steps(self.t_final) % self.t_stride == 0
            && steps(self.t_extrapolate) % self.t_stride == 0
            && self.n_train > 0
            && self.n_test > 0
            && self.n_ood > 0;
        if !ok {
            return Err(CoreError::Config(format!("inconsistent generation settings {self:?}")));
        }
        Ok(())
    }

    /// Frames per trajectory in the train/test/OOD splits.
    pub fn frames(&self) -> usize {
        (self.t_final / self.dt).round() as usize / self.t_stride + 1
    }
}

fn simulate(params: &[SimParams], cfg: &GenConfig) -> Result<Vec<Trajectory>> {
    params
        .par_iter()
        .map(|p| {
            let tr = match p.system {
                System::Incompressible => solve_incompressible(p, cfg.t_stride)?,
                System::Compressible => solve_compressible(p, cfg.t_stride)?,
            };
            tr.subsample(1, cfg.x_stride)
        })
        .collect()
}

/// All five splits, in [`Split::ALL`] order. Test and OOD trajectories are
/// simulated to the extrapolation horizon once and truncated for the
/// shorter splits. Every split carries the training statistics.
pub fn generate_splits(cfg: &GenConfig, seed: u64, config_hash: Option<&str>) -> Result<Vec<Dataset>> {
    cfg.validate()?;
    let sys = cfg.system;
    let draw = |ranges: &ParamRanges, n: usize, t: f64, tag: &str| {
        sample_params(sys, ranges, n, cfg.grid, cfg.dt, t, rng::derive_seed(seed, tag))
    };
    info!("simulating {} training trajectories", cfg.n_train);
    let train = simulate(&draw(&cfg.train_ranges, cfg.n_train, cfg.t_final, "train")?, cfg)?;
    info!("simulating {} test and {} OOD trajectories", cfg.n_test, cfg.n_ood);
    let test_long = simulate(&draw(&cfg.train_ranges, cfg.n_test, cfg.t_extrapolate, "test")?, cfg)?;
    let ood_long = simulate(&draw(&cfg.ood_ranges, cfg.n_ood, cfg.t_extrapolate, "ood")?, cfg)?;
    let stats = NormStats::from_trajectories(&train)?;
    stats.warn_degenerate(&sys.channels());
    let short = |v: &[Trajectory]| v.iter().map(|t| t.truncated(cfg.frames())).collect::<Result<Vec<_>>>();
    let h = cfg.domain_spacing();
    let make = |split: Split, trajectories: Vec<Trajectory>| Dataset {
        name: split.name().to_string(),
        split,
        system: sys,
        channels: sys.channels(),
        dx: h,
        dy: h,
        trajectories,
        stats: Some(stats.clone()),
        seed,
        config_hash: config_hash.map(str::to_string),
    };
    Ok(vec![
        make(Split::Train, train),
        make(Split::Test, short(&test_long)?),
        make(Split::TExtrapolate, test_long),
        make(Split::Ood, short(&ood_long)?),
        make(Split::OodTExtrapolate, ood_long),
    ])
}

impl GenConfig {
    /// Grid spacing after spatial subsampling.
    pub fn domain_spacing(&self) -> f64 {
        self.system.domain_length() * self.x_stride as f64 / self.grid as f64
    }
}
