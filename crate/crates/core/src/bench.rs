//! Experiment harness: scheme dispatch, seeded sweeps, CSV results, DOT
//! export and training curves.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{direct_topology, greedy_topology, mst_topology, optimal_topology};
use crate::error::{invalid, Error, Result};
use crate::generator::{propose_topology, EpochRecord, GeneratorConfig};
use crate::ib::{allocate, Allocation};
use crate::model::{generate_instance, link_bits, validate_topology, NetworkInstance, SystemParams, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Direct,
    Mst,
    Greedy,
    Opt,
    Proposed,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Direct,
        Scheme::Mst,
        Scheme::Greedy,
        Scheme::Opt,
        Scheme::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Direct => "direct",
            Scheme::Mst => "mst",
            Scheme::Greedy => "greedy",
            Scheme::Opt => "opt",
            Scheme::Proposed => "proposed",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown scheme {s:?}")))
    }
}

/// A topology with balanced slots.
#[derive(Clone, Debug)]
pub struct Solution {
    pub scheme: Scheme,
    pub topology: Topology,
    pub allocation: Allocation,
    /// The proposed scheme replaced an invalid hardened topology by the
    /// direct star.
    pub fallback: bool,
    pub epochs: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Runs one scheme on one instance. `seed` drives the greedy visiting order;
/// the proposed scheme takes its seeds from `config.train`.
pub fn solve(
    instance: &NetworkInstance,
    scheme: Scheme,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<Solution> {
    let n = instance.n_devices();
    let plain = |topology: Topology| -> Result<Solution> {
        Ok(Solution {
            scheme,
            allocation: allocate(instance, &topology, &config.ib)?,
            topology,
            fallback: false,
            epochs: None,
            history: Vec::new(),
        })
    };
    match scheme {
        Scheme::Direct => plain(direct_topology(n)?),
        Scheme::Mst => plain(mst_topology(instance)),
        Scheme::Greedy => plain(greedy_topology(instance, seed)),
        Scheme::Opt => {
            let r = optimal_topology(instance, &config.ib)?;
            Ok(Solution {
                scheme,
                topology: r.topology,
                allocation: r.allocation,
                fallback: false,
                epochs: None,
                history: Vec::new(),
            })
        }
        Scheme::Proposed => {
            let p = propose_topology(instance, config)?;
            Ok(Solution {
                scheme,
                topology: p.topology,
                allocation: p.allocation,
                fallback: p.fallback,
                epochs: Some(p.epochs),
                history: p.history,
            })
        }
    }
}

/// Serializable summary of a [`Solution`], as written by the command-line
/// `solve` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub scheme: Scheme,
    pub parents: Vec<usize>,
    pub slots: Vec<f64>,
    pub min_bits_per_hz: f64,
    pub max_bits_per_hz: f64,
    pub valid: bool,
    pub fallback: bool,
    pub epochs: Option<usize>,
}

impl From<&Solution> for SolutionRecord {
    fn from(s: &Solution) -> Self {
        Self {
            scheme: s.scheme,
            parents: s.topology.parents().to_vec(),
            slots: s.allocation.slots.as_slice().to_vec(),
            min_bits_per_hz: s.allocation.b_ib,
            max_bits_per_hz: s.allocation.b_max,
            valid: validate_topology(&s.topology),
            fallback: s.fallback,
            epochs: s.epochs,
        }
    }
}

impl SolutionRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::new(self.parents.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schemes: Vec<Scheme>,
    pub n_devices: Vec<usize>,
    pub n_beacons: Vec<usize>,
    /// Beacon powers, watts; overrides `system.pb_power_w`.
    pub pb_power_w: Vec<f64>,
    /// Replicates per cell.
    pub seeds: usize,
    pub base_seed: u64,
    pub system: SystemParams,
    #[serde(flatten)]
    pub solver: GeneratorConfig,
    /// Results file name, relative to the output directory.
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schemes: vec![Scheme::Direct, Scheme::Mst, Scheme::Greedy, Scheme::Proposed],
            n_devices: vec![5],
            n_beacons: vec![2],
            pb_power_w: vec![1.0],
            seeds: 10,
            base_seed: 0,
            system: SystemParams::default(),
            solver: GeneratorConfig::default(),
            output: PathBuf::from("results.csv"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty()
            || self.n_devices.is_empty()
            || self.n_beacons.is_empty()
            || self.pb_power_w.is_empty()
        {
            return Err(invalid("scheme, n_devices, n_beacons and pb_power_w lists must be non-empty"));
        }
        if self.seeds == 0 {
            return Err(invalid("seeds must be at least 1"));
        }
        if self.n_devices.contains(&0) {
            return Err(invalid("n_devices entries must be positive"));
        }
        for &p in &self.pb_power_w {
            SystemParams {
                pb_power_w: p,
                ..self.system.clone()
            }
            .validate()?;
        }
        self.solver.train.validate()?;
        self.solver.adam.validate()?;
        self.solver.pt.validate()?;
        self.solver.ib.validate()
    }

    /// Sweep cells in output order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &n_devices in &self.n_devices {
            for &n_beacons in &self.n_beacons {
                for &pb_power_w in &self.pb_power_w {
                    for replicate in 0..self.seeds {
                        cells.push(Cell {
                            n_devices,
                            n_beacons,
                            pb_power_w,
                            replicate,
                            seed: cell_seed(self.base_seed, n_devices, n_beacons, pb_power_w, replicate),
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub n_devices: usize,
    pub n_beacons: usize,
    pub pb_power_w: f64,
    pub replicate: usize,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Platform-independent seed of one sweep cell.
pub fn cell_seed(base: u64, n_devices: usize, n_beacons: usize, pb_power_w: f64, replicate: usize) -> u64 {
    [n_devices as u64, n_beacons as u64, pb_power_w.to_bits(), replicate as u64]
        .into_iter()
        .fold(splitmix64(base), |h, w| splitmix64(h ^ w))
}

/// One CSV line of a sweep. Error rows carry `error` and leave the budget
/// columns empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: Scheme,
    pub n_devices: usize,
    pub n_beacons: usize,
    pub pb_power_w: f64,
    pub seed: u64,
    pub min_bits_per_hz: Option<f64>,
    pub max_bits_per_hz: Option<f64>,
    pub wall_time_s: f64,
    pub epochs: Option<usize>,
    pub valid: bool,
    pub fallback: bool,
    pub error: Option<String>,
}

/// Header line of the results CSV.
pub const RESULT_COLUMNS: &str = "scheme,n_devices,n_beacons,pb_power_w,seed,min_bits_per_hz,\
max_bits_per_hz,wall_time_s,epochs,valid,fallback,error";

fn run_cell(config: &ExperimentConfig, cell: &Cell) -> Vec<ResultRow> {
    let row = |scheme| ResultRow {
        scheme,
        n_devices: cell.n_devices,
        n_beacons: cell.n_beacons,
        pb_power_w: cell.pb_power_w,
        seed: cell.seed,
        min_bits_per_hz: None,
        max_bits_per_hz: None,
        wall_time_s: 0.0,
        epochs: None,
        valid: false,
        fallback: false,
        error: None,
    };
    let params = SystemParams {
        pb_power_w: cell.pb_power_w,
        ..config.system.clone()
    };
    let instance = match generate_instance(cell.seed, cell.n_devices, cell.n_beacons, params) {
        Ok(i) => i,
        Err(e) => {
            return config
                .schemes
                .iter()
                .map(|&s| ResultRow {
                    error: Some(e.to_string()),
                    ..row(s)
                })
                .collect()
        }
    };
    let mut solver = config.solver.clone();
    solver.train.net_seed = splitmix64(cell.seed ^ config.solver.train.net_seed);
    solver.train.latent_seed = splitmix64(cell.seed ^ config.solver.train.latent_seed.rotate_left(32));

    config
        .schemes
        .iter()
        .map(|&scheme| {
            let start = Instant::now();
            let result = solve(&instance, scheme, &solver, cell.seed);
            let wall_time_s = start.elapsed().as_secs_f64();
            match result {
                Ok(s) => ResultRow {
                    min_bits_per_hz: Some(s.allocation.b_ib),
                    max_bits_per_hz: Some(s.allocation.b_max),
                    wall_time_s,
                    epochs: s.epochs,
                    valid: validate_topology(&s.topology),
                    fallback: s.fallback,
                    ..row(scheme)
                },
                Err(e) => {
                    log::warn!("{scheme} failed on cell {cell:?}: {e}");
                    ResultRow {
                        wall_time_s,
                        error: Some(e.to_string()),
                        ..row(scheme)
                    }
                }
            }
        })
        .collect()
}

/// Runs the full sweep on up to `workers` threads (all cores when `None`).
/// Rows come back in cell order, schemes in configuration order; a failing
/// scheme yields an error row instead of aborting the sweep.
pub fn run_experiment(config: &ExperimentConfig, workers: Option<usize>) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_cell(config, cell))
            .collect::<Vec<_>>()
    });
    Ok(rows.into_iter().flatten().collect())
}

pub fn write_results<W: Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: std::io::Read>(reader: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Graphviz description of a topology: devices at their coordinates with
/// their slot share, the sink as a double circle, one edge per device
/// labelled with its link rate.
pub fn export_topology_dot(instance: &NetworkInstance, topology: &Topology, slots: &[f64]) -> Result<String> {
    use std::fmt::Write as _;
    let n = instance.n_devices();
    if topology.n_devices() != n || slots.len() != n {
        return Err(invalid("topology, slots and instance disagree on n_devices"));
    }
    let frame = instance.params().frame_s;
    let name = |k: usize| if k == n { "sink".to_string() } else { format!("d{k}") };
    let mut s = String::new();
    s.push_str("digraph relaytopo {\n  node [shape=circle];\n");
    let [x, y] = instance.position(n);
    writeln!(s, "  sink [shape=doublecircle, label=\"sink\", pos=\"{x:.4},{y:.4}!\"];").unwrap();
    for (k, slot) in slots.iter().enumerate() {
        let [x, y] = instance.position(k);
        writeln!(
            s,
            "  {} [label=\"{}\\n{:.3}\", pos=\"{x:.4},{y:.4}!\"];",
            name(k),
            name(k),
            slot / frame
        )
        .unwrap();
    }
    for (k, &slot) in slots.iter().enumerate() {
        let p = topology.parent(k);
        let rate = if p == k {
            0.0
        } else {
            link_bits(slot, instance.snr_scale(k, p, true))
        };
        writeln!(s, "  {} -> {} [label=\"{rate:.4}\"];", name(k), name(p)).unwrap();
    }
    s.push_str("}\n");
    Ok(s)
}

/// CSV with columns `epoch,loss,running_min_loss,b_min`, one row per epoch.
pub fn emit_training_curves<W: Write>(history: &[EpochRecord], writer: W) -> Result<()> {
    if history.is_empty() {
        return Err(invalid("training history is empty"));
    }
    let mut w = csv::Writer::from_writer(writer);
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("ga".parse::<Scheme>().is_err());
    }

    #[test]
    fn cell_seeds_are_distinct_and_stable() {
        let a = cell_seed(0, 5, 2, 1.0, 0);
        assert_eq!(a, cell_seed(0, 5, 2, 1.0, 0));
        let others = [
            cell_seed(1, 5, 2, 1.0, 0),
            cell_seed(0, 6, 2, 1.0, 0),
            cell_seed(0, 5, 3, 1.0, 0),
            cell_seed(0, 5, 2, 3.0, 0),
            cell_seed(0, 5, 2, 1.0, 1),
        ];
        assert!(others.iter().all(|&o| o != a));
    }

    #[test]
    fn toml_defaults_and_rejections() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let cfg = ExperimentConfig::from_toml(
            "schemes = [\"direct\", \"opt\"]\nn_devices = [3, 4]\nseeds = 2\n[ib]\neps1 = 1e-5\n[train]\nmax_epochs = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.schemes, vec![Scheme::Direct, Scheme::Opt]);
        assert_eq!(cfg.solver.ib.eps1, 1e-5);
        assert_eq!(cfg.solver.train.max_epochs, 5);
        assert!(ExperimentConfig::from_toml("seeds = 0").is_err());
        assert!(ExperimentConfig::from_toml("schemes = []").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn opt_beyond_the_limit_yields_error_rows() {
        let cfg = ExperimentConfig {
            schemes: vec![Scheme::Direct, Scheme::Opt],
            n_devices: vec![9],
            seeds: 1,
            ..ExperimentConfig::default()
        };
        let rows = run_experiment(&cfg, Some(1)).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].error.is_none() && rows[0].valid);
        assert!(rows[1].error.is_some() && rows[1].min_bits_per_hz.is_none());
    }
}
