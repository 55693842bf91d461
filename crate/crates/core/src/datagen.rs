//! Synthetic trajectory datasets: Gaussian-bell initial conditions, a
//! high-resolution adaptive solve, and point subsampling onto the coarse
//! training grid in space and time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode_solve::{solve_with, SolveConfig, Trajectory};
use crate::pde_library::{PdeParams, PdeSystem};
use crate::tensor_grid::{GridField, Shape};

/// Background added to density and temperature so gas states stay positive.
pub const GAS_OFFSET: f64 = 1.5;

/// Growth allowed over the horizon before a first-order/wave/Burgers run is
/// declared blown up.
const BLOWUP_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConditionSpec {
    pub n_gaussians: usize,
    pub amp_range: (f64, f64),
    pub center_range: (f64, f64),
    pub seed: u64,
}

impl InitialConditionSpec {
    pub fn new(n_gaussians: usize, seed: u64) -> Self {
        Self {
            n_gaussians,
            amp_range: (-1.0, 1.0),
            center_range: (-5.0, 5.0),
            seed,
        }
    }
}

/// Coordinate of grid index `j` out of `n` when evaluating initial conditions.
/// The grid covers `[lo, hi)` with spacing `(hi - lo) / n`.
pub fn ic_coordinate(j: usize, n: usize, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * j as f64 / n as f64
}

/// `Σ_i a_i exp(-(x - μ_i)² - (y - ν_i)²)` over bells `(a_i, μ_i, ν_i)`,
/// evaluated on an `h x w` grid whose coordinates cover `range` on both axes.
pub fn bell_field(bells: &[(f64, f64, f64)], h: usize, w: usize, range: (f64, f64)) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = ic_coordinate(i, h, range);
        for j in 0..w {
            let x = ic_coordinate(j, w, range);
            out.push(
                bells
                    .iter()
                    .map(|&(a, mu, nu)| a * (-(x - mu).powi(2) - (y - nu).powi(2)).exp())
                    .sum(),
            );
        }
    }
    out
}

/// Draws `(a_i, μ_i, ν_i)` in that order for each bell.
fn gaussian_bells(spec: &InitialConditionSpec, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let bells: Vec<(f64, f64, f64)> = (0..spec.n_gaussians)
        .map(|_| {
            let a = rng.gen_range(spec.amp_range.0..spec.amp_range.1);
            let mu = rng.gen_range(spec.center_range.0..spec.center_range.1);
            let nu = rng.gen_range(spec.center_range.0..spec.center_range.1);
            (a, mu, nu)
        })
        .collect();
    bell_field(&bells, h, w, spec.center_range)
}

/// Initial solver state for `system` on an `h x w` grid with spacing `dx`.
///
/// Every physical channel gets an independent bell draw from one RNG stream;
/// gas density and temperature are offset by [`GAS_OFFSET`]; the wave velocity
/// channel starts at zero.
pub fn sample_initial_condition(
    system: &PdeSystem,
    spec: &InitialConditionSpec,
    h: usize,
    w: usize,
    dx: f64,
    dy: f64,
) -> Result<GridField> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(system.state_channels() * h * w);
    match system.params {
        PdeParams::Wave { .. } => {
            data.extend(gaussian_bells(spec, &mut rng, h, w));
            data.extend(std::iter::repeat_n(0.0, h * w));
        }
        PdeParams::GasDynamics { .. } => {
            for c in 0..4 {
                let offset = if c < 2 { GAS_OFFSET } else { 0.0 };
                data.extend(gaussian_bells(spec, &mut rng, h, w).into_iter().map(|v| v + offset));
            }
        }
        _ => {
            for _ in 0..system.state_channels() {
                data.extend(gaussian_bells(spec, &mut rng, h, w));
            }
        }
    }
    GridField::new(Shape::new(system.state_channels(), h, w), dx, dy, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub system: PdeSystem,
    /// Physical side length of the square periodic domain.
    pub domain: f64,
    pub high_res: usize,
    pub low_res: usize,
    pub t_end: f64,
    pub save_dt_high: f64,
    pub save_dt_low: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_gaussians: usize,
    pub rtol: f64,
    pub atol: f64,
    pub master_seed: u64,
}

impl GenerationConfig {
    /// 100x100 solve subsampled to 10x10, t in [0, 501], 50/10/10 trajectories.
    pub fn full(system: PdeSystem, master_seed: u64) -> Self {
        Self {
            system,
            domain: 1.0,
            high_res: 100,
            low_res: 10,
            t_end: 501.0,
            save_dt_high: 0.1,
            save_dt_low: 1.0,
            n_train: 50,
            n_val: 10,
            n_test: 10,
            n_gaussians: 5,
            rtol: 1e-8,
            atol: 1e-8,
            master_seed,
        }
    }

    /// Desk-scale preset: 50x50 solve to 10x10, t in [0, 64], 10/4/4 trajectories.
    pub fn small(system: PdeSystem, master_seed: u64) -> Self {
        Self {
            high_res: 50,
            t_end: 64.0,
            n_train: 10,
            n_val: 4,
            n_test: 4,
            ..Self::full(system, master_seed)
        }
    }

    pub fn preset(name: &str, system: PdeSystem, master_seed: u64) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(system, master_seed)),
            "small" => Ok(Self::small(system, master_seed)),
            _ => Err(Error::InvalidConfig(format!(
                "unknown scale preset `{name}` (expected full or small)"
            ))),
        }
    }

    pub fn dx_high(&self) -> f64 {
        self.domain / self.high_res as f64
    }

    pub fn dx_low(&self) -> f64 {
        self.domain / self.low_res as f64
    }

    pub fn spatial_stride(&self) -> usize {
        self.high_res / self.low_res
    }

    pub fn temporal_stride(&self) -> usize {
        (self.save_dt_low / self.save_dt_high).round() as usize
    }

    /// Saved high-resolution frames, including t = 0.
    pub fn high_frames(&self) -> usize {
        (self.t_end / self.save_dt_high).round() as usize + 1
    }

    pub fn low_frames(&self) -> usize {
        (self.t_end / self.save_dt_low).floor() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.low_res == 0 || self.high_res == 0 || !self.high_res.is_multiple_of(self.low_res) {
            return bad(format!(
                "low-res grid {} must evenly divide high-res grid {}",
                self.low_res, self.high_res
            ));
        }
        if !(self.save_dt_high > 0.0 && self.save_dt_low > 0.0 && self.t_end > 0.0 && self.domain > 0.0) {
            return bad("time steps, horizon and domain must be positive".into());
        }
        let ratio = self.save_dt_low / self.save_dt_high;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return bad(format!(
                "save_dt_low {} is not an integer multiple of save_dt_high {}",
                self.save_dt_low, self.save_dt_high
            ));
        }
        let frames = self.t_end / self.save_dt_high;
        if (frames - frames.round()).abs() > 1e-6 {
            return bad(format!("t_end {} is not a multiple of save_dt_high", self.t_end));
        }
        if self.n_gaussians == 0 {
            return bad("n_gaussians must be at least 1".into());
        }
        Ok(())
    }

    fn solver(&self) -> SolveConfig {
        let save_at = (0..self.high_frames())
            .map(|k| k as f64 * self.save_dt_high)
            .collect();
        SolveConfig::adaptive(self.rtol, self.atol, 0.0, save_at)
    }

    /// Initial-condition seeds for the train, validation and test splits.
    /// Distinct global indices map to distinct seeds (splitmix64 is a bijection).
    pub fn split_seeds(&self) -> [Vec<u64>; 3] {
        let mut g = 0u64;
        let mut take = |n: usize| -> Vec<u64> {
            (0..n)
                .map(|_| {
                    let s = splitmix64(self.master_seed.wrapping_add(g));
                    g += 1;
                    s
                })
                .collect()
        };
        [take(self.n_train), take(self.n_val), take(self.n_test)]
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Point-samples every `stride`-th grid point (offset 0) along both axes and
/// keeps the first `channels` channels.
pub fn subsample(field: &GridField, stride: usize, channels: usize) -> Result<GridField> {
    let (h, w) = (field.height() / stride, field.width() / stride);
    GridField::from_fn(
        Shape::new(channels, h, w),
        field.dx() * stride as f64,
        field.dy() * stride as f64,
        |c, i, j| field.get(c, i * stride, j * stride),
    )
}

fn run_solve(
    system: &PdeSystem,
    seed: u64,
    cfg: &GenerationConfig,
    mut on_frame: impl FnMut(usize, f64, &GridField) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let dx = cfg.dx_high();
    let spec = InitialConditionSpec::new(cfg.n_gaussians, seed);
    let u0 = sample_initial_condition(system, &spec, cfg.high_res, cfg.high_res, dx, dx)?;
    let guard = match system.params {
        PdeParams::GasDynamics { .. } => None,
        _ => Some(BLOWUP_FACTOR * u0.max_abs().max(f64::MIN_POSITIVE)),
    };
    let solver = cfg.solver();
    solve_with(|_, y: &GridField| system.rhs(y), &u0, &solver, |k, t, y| {
        if let Some(limit) = guard {
            let max_abs = y.max_abs();
            if max_abs > limit {
                return Err(Error::Blowup { t, max_abs, limit });
            }
        }
        on_frame(k, t, y)
    })
    .map_err(|e| Error::Generation {
        seed,
        source: Box::new(e),
    })
}

/// Solves one trajectory and returns both the high-resolution solution (every
/// saved frame, full state) and its low-resolution observation.
pub fn generate_trajectory(
    system: &PdeSystem,
    seed: u64,
    cfg: &GenerationConfig,
) -> Result<(Trajectory, Trajectory)> {
    let mut high = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
    };
    let mut low = high.clone();
    let stride_t = cfg.temporal_stride();
    let stride_x = cfg.spatial_stride();
    let observed = system.observed_channels();
    run_solve(system, seed, cfg, |k, t, y| {
        if k % stride_t == 0 {
            low.times.push((k / stride_t) as f64 * cfg.save_dt_low);
            low.states.push(subsample(y, stride_x, observed)?);
        }
        high.times.push(t);
        high.states.push(y.clone());
        Ok(())
    })?;
    Ok((high, low))
}

/// Low-resolution frames only; memory stays proportional to the coarse grid.
pub fn generate_low_res(system: &PdeSystem, seed: u64, cfg: &GenerationConfig) -> Result<Vec<GridField>> {
    let mut frames = Vec::with_capacity(cfg.low_frames());
    let stride_t = cfg.temporal_stride();
    let stride_x = cfg.spatial_stride();
    let observed = system.observed_channels();
    run_solve(system, seed, cfg, |k, _, y| {
        if k % stride_t == 0 {
            frames.push(subsample(y, stride_x, observed)?);
        }
        Ok(())
    })?;
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub system: PdeSystem,
    pub split: String,
    pub channel_labels: Vec<String>,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    pub seeds: Vec<u64>,
    /// `trajectories[n][k]` is frame `k` (time `k * dt`) of trajectory `n`.
    pub trajectories: Vec<Vec<GridField>>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.len())
    }

    pub fn frame_shape(&self) -> Option<Shape> {
        self.trajectories.first().and_then(|t| t.first()).map(|f| f.shape())
    }

    pub fn channels(&self) -> usize {
        self.frame_shape().map_or(0, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.frame_shape();
        let frames = self.frames();
        for (n, traj) in self.trajectories.iter().enumerate() {
            if traj.len() != frames || traj.iter().any(|f| Some(f.shape()) != shape) {
                return Err(Error::InvalidField(format!(
                    "trajectory {n} of split {} does not match the dataset shape",
                    self.split
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: TrajectoryDataset,
    pub val: TrajectoryDataset,
    pub test: TrajectoryDataset,
}

impl DatasetSplits {
    pub fn iter(&self) -> impl Iterator<Item = &TrajectoryDataset> {
        [&self.train, &self.val, &self.test].into_iter()
    }
}

/// Solves every trajectory of the three splits. Work fans out over the rayon
/// pool; results are ordered by seed index.
pub fn build_dataset(cfg: &GenerationConfig) -> Result<DatasetSplits> {
    cfg.validate()?;
    let [train, val, test] = cfg.split_seeds();
    let make = |split: &str, seeds: Vec<u64>| -> Result<TrajectoryDataset> {
        let trajectories = seeds
            .par_iter()
            .map(|&s| generate_low_res(&cfg.system, s, cfg))
            .collect::<Result<Vec<_>>>()?;
        let labels = cfg.system.channel_labels()[..cfg.system.observed_channels()]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Ok(TrajectoryDataset {
            system: cfg.system.clone(),
            split: split.to_string(),
            channel_labels: labels,
            dx: cfg.dx_low(),
            dy: cfg.dx_low(),
            dt: cfg.save_dt_low,
            seeds,
            trajectories,
        })
    };
    Ok(DatasetSplits {
        train: make("train", train)?,
        val: make("val", val)?,
        test: make("test", test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still_system() -> PdeSystem {
        PdeSystem::new(PdeParams::AdvectionDiffusion { c_x: 0.0, c_y: 0.0, d: 0.0 }, 0.1).unwrap()
    }

    fn tiny(system: PdeSystem) -> GenerationConfig {
        GenerationConfig {
            high_res: 20,
            t_end: 4.0,
            n_train: 2,
            n_val: 1,
            n_test: 1,
            ..GenerationConfig::small(system, 7)
        }
    }

    #[test]
    fn single_bell_peaks_at_origin() {
        let n = 100;
        let f = bell_field(&[(1.0, 0.0, 0.0)], n, n, (-5.0, 5.0));
        assert_eq!(ic_coordinate(50, n, (-5.0, 5.0)), 0.0);
        assert_eq!(f[50 * n + 50], 1.0);
        let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, 1.0);
        for d in 1..5 {
            let v = f[50 * n + 50 + d];
            assert_eq!(v, f[(50 + d) * n + 50]);
            assert_eq!(v, f[50 * n + 50 - d]);
            assert_eq!(v, f[(50 - d) * n + 50]);
        }
    }

    #[test]
    fn empty_sum_is_zero() {
        let spec = InitialConditionSpec::new(0, 3);
        let f = sample_initial_condition(&PdeSystem::advection_diffusion(), &spec, 8, 8, 0.1, 0.1).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn matches_scripted_formula() {
        let spec = InitialConditionSpec::new(5, 42);
        let f = sample_initial_condition(&PdeSystem::advection_diffusion(), &spec, 30, 30, 0.1, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut p = Vec::new();
        for _ in 0..5 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let mu: f64 = rng.gen_range(-5.0..5.0);
            let nu: f64 = rng.gen_range(-5.0..5.0);
            p.push((a, mu, nu));
        }
        for i in 0..30 {
            for j in 0..30 {
                let x = -5.0 + 10.0 * j as f64 / 30.0;
                let y = -5.0 + 10.0 * i as f64 / 30.0;
                let mut u = 0.0;
                for &(a, mu, nu) in &p {
                    u += a * (-(x - mu) * (x - mu) - (y - nu) * (y - nu)).exp();
                }
                assert!((f.get(0, i, j) - u).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn channel_layouts() {
        let spec = InitialConditionSpec::new(5, 1);
        let w = sample_initial_condition(&PdeSystem::wave(), &spec, 10, 10, 0.1, 0.1).unwrap();
        assert_eq!(w.channels(), 2);
        assert_eq!(w.select_channels(1..2).unwrap().max_abs(), 0.0);
        let g = sample_initial_condition(&PdeSystem::gas_dynamics(), &spec, 10, 10, 0.1, 0.1).unwrap();
        assert_eq!(g.channels(), 4);
        assert!(g.channel_sum(0) / 100.0 > 1.0);
        let b = sample_initial_condition(&PdeSystem::burgers(), &spec, 10, 10, 0.1, 0.1).unwrap();
        assert_ne!(b.channel(0), b.channel(1));
    }

    #[test]
    fn presets_shape_contract() {
        let full = GenerationConfig::full(PdeSystem::advection_diffusion(), 0);
        full.validate().unwrap();
        assert_eq!((full.n_train, full.n_val, full.n_test), (50, 10, 10));
        assert_eq!(full.low_frames(), 502);
        assert_eq!(full.high_frames(), 5011);
        assert_eq!((full.spatial_stride(), full.temporal_stride()), (10, 10));
        assert!((full.dx_high() - 0.01).abs() < 1e-15 && (full.dx_low() - 0.1).abs() < 1e-15);
        let small = GenerationConfig::small(PdeSystem::advection_diffusion(), 0);
        small.validate().unwrap();
        assert_eq!((small.n_train, small.n_val, small.n_test), (10, 4, 4));
        assert_eq!((small.high_res, small.low_res, small.low_frames()), (50, 10, 65));
    }

    #[test]
    fn invalid_generation_configs() {
        let mut c = GenerationConfig::small(PdeSystem::wave(), 0);
        c.low_res = 7;
        assert!(c.validate().is_err());
        let mut c = GenerationConfig::small(PdeSystem::wave(), 0);
        c.save_dt_low = 0.25;
        assert!(c.validate().is_err());
        assert!(GenerationConfig::preset("medium", PdeSystem::wave(), 0).is_err());
    }

    #[test]
    fn seeds_disjoint() {
        let [a, b, c] = GenerationConfig::full(PdeSystem::wave(), 99).split_seeds();
        let mut all: Vec<u64> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 70);
    }

    #[test]
    fn zero_dynamics_keeps_first_frame() {
        let cfg = tiny(still_system());
        let (high, low) = generate_trajectory(&cfg.system, 5, &cfg).unwrap();
        assert_eq!(high.states.len(), 41);
        assert_eq!(low.states.len(), 5);
        assert_eq!(low.times, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(low.states.iter().all(|s| *s == low.states[0]));
        assert_eq!(low.states[0].shape(), Shape::new(1, 10, 10));
        assert_eq!(low.states[0], subsample(&high.states[0], 2, 1).unwrap());
    }

    #[test]
    fn pure_advection_translates_one_cell_per_step() {
        let system = PdeSystem::new(PdeParams::AdvectionDiffusion { c_x: 1.0, c_y: 1.0, d: 0.0 }, 0.1).unwrap();
        let cfg = GenerationConfig {
            t_end: 3.0,
            ..GenerationConfig::small(system, 1)
        };
        let (_, low) = generate_trajectory(&cfg.system, 11, &cfg).unwrap();
        let f0 = &low.states[0];
        for k in 1..=3usize {
            let fk = &low.states[k];
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for si in 0..10 {
                for sj in 0..10 {
                    let c = fk.dot(&f0.shift(si as isize, sj as isize)).unwrap();
                    if c > best.0 {
                        best = (c, si, sj);
                    }
                }
            }
            assert_eq!((best.1, best.2), (k, k), "frame {k}");
        }
    }

    #[test]
    fn dataset_deterministic_and_shaped() {
        let cfg = tiny(PdeSystem::burgers());
        let a = build_dataset(&cfg).unwrap();
        let b = build_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (2, 1, 1));
        for d in a.iter() {
            d.validate().unwrap();
            assert_eq!(d.frames(), 5);
            assert_eq!(d.channels(), 2);
        }
    }

    #[test]
    fn wave_dataset_observes_amplitude_only() {
        let cfg = tiny(PdeSystem::wave());
        let frames = generate_low_res(&cfg.system, 3, &cfg).unwrap();
        assert_eq!(frames[0].channels(), 1);
        assert!(frames.iter().all(|f| f.is_finite()));
    }

    #[test]
    fn generation_errors_carry_seed() {
        // Anti-diffusion blows up.
        let system = PdeSystem::new(PdeParams::AdvectionDiffusion { c_x: 0.0, c_y: 0.0, d: -1.0 }, 1.0).unwrap();
        let cfg = tiny(system);
        let err = generate_low_res(&cfg.system, 1234, &cfg).unwrap_err();
        assert!(matches!(err, Error::Generation { seed: 1234, .. }), "{err}");
        assert!(err.is_numerical());
    }
}
