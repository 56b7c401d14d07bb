//! Network instances and the physical-layer quantities derived from them.
//!
//! Node indexing follows one convention everywhere in the crate: devices are
//! `0..n_devices` and the sink is node `n_devices`. Distances are expressed in
//! a single length unit shared by positions, [`SystemParams::radius`] and
//! [`SystemParams::min_distance`]; path loss is evaluated in that unit.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use io::{read_instance, write_instance};

/// Physical parameters of the simulated deployment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemParams {
    pub pathloss_exponent: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    /// Transmit power of every power beacon, watts.
    pub pb_power_w: f64,
    /// Linear energy-harvesting conversion efficiency.
    pub efficiency: f64,
    /// TDMA frame length, seconds.
    pub frame_s: f64,
    /// Deployment radius around the sink, in the length unit.
    pub radius: f64,
    /// Lower clamp applied to every distance before path loss.
    pub min_distance: f64,
}

impl Default for SystemParams {
    /// Defaults with distances in kilometres: a 0.5 km cell and a 1 m clamp.
    fn default() -> Self {
        Self {
            pathloss_exponent: 3.0,
            bandwidth_hz: 125e3,
            noise_figure_db: 6.0,
            pb_power_w: 1.0,
            efficiency: 0.7,
            frame_s: 0.1,
            radius: 0.5,
            min_distance: 1e-3,
        }
    }
}

impl SystemParams {
    /// Thermal noise over the band, `-174 + NF + 10 log10(BW)` dBm, in watts.
    pub fn noise_power_w(&self) -> f64 {
        let dbm = -174.0 + self.noise_figure_db + 10.0 * self.bandwidth_hz.log10();
        dbm_to_watts(dbm)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let params: Self = toml::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.pathloss_exponent > 0.0, "pathloss_exponent must be positive"),
            (self.bandwidth_hz > 0.0, "bandwidth_hz must be positive"),
            (self.pb_power_w >= 0.0, "pb_power_w must be non-negative"),
            (
                (0.0..=1.0).contains(&self.efficiency),
                "efficiency must lie in [0, 1]",
            ),
            (self.frame_s > 0.0, "frame_s must be positive"),
            (self.radius > 0.0, "radius must be positive"),
            (self.min_distance > 0.0, "min_distance must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(invalid(msg));
            }
        }
        Ok(())
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// One sampled deployment: geometry, block-fading gains and harvested energy.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInstance {
    pub(crate) params: SystemParams,
    pub(crate) seed: u64,
    pub(crate) devices: Vec<[f64; 2]>,
    pub(crate) beacons: Vec<[f64; 2]>,
    /// `|h|^2` from device `i` to node `j`, row-major `n_devices x (n_devices + 1)`.
    pub(crate) device_gains: Vec<f64>,
    /// `|h|^2` from beacon `b` to device `i`, row-major `n_beacons x n_devices`.
    pub(crate) beacon_gains: Vec<f64>,
    pub(crate) energy: Vec<f64>,
}

/// Samples a deployment: devices and beacons uniform over the disk around the
/// sink, unit-mean exponential `|h|^2` for every ordered link.
pub fn generate_instance(
    seed: u64,
    n_devices: usize,
    n_beacons: usize,
    params: SystemParams,
) -> Result<NetworkInstance> {
    if n_devices == 0 {
        return Err(invalid("n_devices must be at least 1"));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| {
        let r = params.radius * rng.random::<f64>().sqrt();
        let theta = std::f64::consts::TAU * rng.random::<f64>();
        [r * theta.cos(), r * theta.sin()]
    };
    let devices: Vec<_> = (0..n_devices).map(|_| point(&mut rng)).collect();
    let beacons: Vec<_> = (0..n_beacons).map(|_| point(&mut rng)).collect();
    let device_gains = (0..n_devices * (n_devices + 1))
        .map(|_| fading(&mut rng))
        .collect();
    let beacon_gains = (0..n_beacons * n_devices)
        .map(|_| fading(&mut rng))
        .collect();
    NetworkInstance::from_parts(params, seed, devices, beacons, device_gains, beacon_gains)
}

fn fading(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let g: f64 = Exp1.sample(rng);
        if g > 0.0 {
            return g;
        }
    }
}

impl NetworkInstance {
    /// Assembles an instance from explicit geometry and gains and computes the
    /// harvested energies.
    pub fn from_parts(
        params: SystemParams,
        seed: u64,
        devices: Vec<[f64; 2]>,
        beacons: Vec<[f64; 2]>,
        device_gains: Vec<f64>,
        beacon_gains: Vec<f64>,
    ) -> Result<Self> {
        params.validate()?;
        let n = devices.len();
        if n == 0 {
            return Err(invalid("n_devices must be at least 1"));
        }
        if device_gains.len() != n * (n + 1) {
            return Err(invalid("device gain matrix must be n_devices x (n_devices + 1)"));
        }
        if beacon_gains.len() != beacons.len() * n {
            return Err(invalid("beacon gain matrix must be n_beacons x n_devices"));
        }
        if device_gains.iter().chain(&beacon_gains).any(|g| !(*g > 0.0)) {
            return Err(invalid("channel gains must be positive"));
        }
        let mut inst = Self {
            params,
            seed,
            devices,
            beacons,
            device_gains,
            beacon_gains,
            energy: Vec::new(),
        };
        inst.energy = harvested_energy(&inst);
        Ok(inst)
    }

    pub fn n_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn n_beacons(&self) -> usize {
        self.beacons.len()
    }

    /// Index of the sink node.
    pub fn sink(&self) -> usize {
        self.devices.len()
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn device_positions(&self) -> &[[f64; 2]] {
        &self.devices
    }

    pub fn beacon_positions(&self) -> &[[f64; 2]] {
        &self.beacons
    }

    /// Harvested energy per device, joules.
    pub fn energy(&self) -> &[f64] {
        &self.energy
    }

    /// Position of a node; the sink sits at the origin.
    pub fn position(&self, node: usize) -> [f64; 2] {
        if node == self.sink() {
            [0.0, 0.0]
        } else {
            self.devices[node]
        }
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        dist(self.position(a), self.position(b))
    }

    /// `|h|^2` from device `from` to node `to`.
    pub fn device_gain(&self, from: usize, to: usize) -> f64 {
        self.device_gains[from * (self.n_devices() + 1) + to]
    }

    /// `|h|^2` from beacon `beacon` to device `device`.
    pub fn beacon_gain(&self, beacon: usize, device: usize) -> f64 {
        self.beacon_gains[beacon * self.n_devices() + device]
    }

    /// Clamped path loss `d^-alpha` between two nodes.
    pub fn path_loss(&self, a: usize, b: usize) -> f64 {
        self.clamped_loss(self.distance(a, b))
    }

    fn clamped_loss(&self, d: f64) -> f64 {
        d.max(self.params.min_distance)
            .powf(-self.params.pathloss_exponent)
    }

    /// `Gamma * t`: the SNR numerator scale of link `from -> to` once divided
    /// by the slot length. `with_fading` selects whether `|h|^2` enters.
    pub fn snr_scale(&self, from: usize, to: usize, with_fading: bool) -> f64 {
        let fade = if with_fading {
            self.device_gain(from, to)
        } else {
            1.0
        };
        self.energy[from] * fade * self.path_loss(from, to) / self.params.noise_power_w()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Energy harvested by each device over one frame under the linear model.
pub fn harvested_energy(instance: &NetworkInstance) -> Vec<f64> {
    let p = &instance.params;
    (0..instance.n_devices())
        .map(|n| {
            let received: f64 = instance
                .beacons
                .iter()
                .enumerate()
                .map(|(b, &pos)| {
                    p.pb_power_w
                        * instance.beacon_gain(b, n)
                        * instance.clamped_loss(dist(pos, instance.devices[n]))
                })
                .sum();
            p.efficiency * p.frame_s * received
        })
        .collect()
}

/// Signal-to-noise ratio of device `from` transmitting to node `to` for a
/// slot of `slot_t` seconds.
pub fn snr(instance: &NetworkInstance, from: usize, to: usize, slot_t: f64) -> Result<f64> {
    if !(slot_t > 0.0) {
        return Err(invalid(format!("slot length must be positive, got {slot_t}")));
    }
    if from >= instance.n_devices() || to > instance.sink() {
        return Err(invalid(format!("no link {from} -> {to}")));
    }
    Ok(instance.snr_scale(from, to, true) / slot_t)
}

/// Bits/Hz delivered by a slot of length `t` over a link whose SNR at unit
/// slot length is `scale`: `t log2(1 + scale / t)`.
pub fn link_bits(t: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        0.0
    } else {
        t * (scale / t).ln_1p() / std::f64::consts::LN_2
    }
}

/// Relay topology: every device forwards to exactly one parent node.
///
/// The one-hot adjacency rows are stored as parent indices, so the one-parent
/// rule holds by construction; reachability of the sink is checked by
/// [`validate_topology`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    parents: Vec<usize>,
}

impl Topology {
    pub fn new(parents: Vec<usize>) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(invalid("topology needs at least one device"));
        }
        if let Some(&p) = parents.iter().find(|&&p| p > n) {
            return Err(invalid(format!("parent {p} out of range for {n} devices")));
        }
        Ok(Self { parents })
    }

    /// Builds a topology from an `n x (n + 1)` 0/1 matrix, rejecting rows that
    /// are not one-hot.
    pub fn from_matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut parents = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n + 1 {
                return Err(invalid(format!("row {i} has {} columns, expected {}", row.len(), n + 1)));
            }
            let ones: Vec<_> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .collect();
            match ones.as_slice() {
                [(j, 1.0)] => parents.push(*j),
                _ => return Err(invalid(format!("row {i} is not one-hot"))),
            }
        }
        Self::new(parents)
    }

    pub fn n_devices(&self) -> usize {
        self.parents.len()
    }

    pub fn sink(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, device: usize) -> usize {
        self.parents[device]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn set_parent(&mut self, device: usize, parent: usize) {
        assert!(parent <= self.sink(), "parent out of range");
        self.parents[device] = parent;
    }

    /// `c[i][j]`, the dense adjacency.
    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.n_devices();
        self.parents
            .iter()
            .map(|&p| {
                let mut row = vec![0.0; n + 1];
                row[p] = 1.0;
                row
            })
            .collect()
    }

    /// Devices whose parent is `node`, excluding `node` itself.
    pub fn children(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |&(i, &p)| p == node && i != node)
            .map(|(i, _)| i)
    }
}

/// Net bits/Hz each device can originate: outbound capacity minus the
/// capacity its children push into it. Self-links carry nothing.
pub fn bits_per_hz(
    instance: &NetworkInstance,
    topology: &Topology,
    slots: &[f64],
) -> Result<Vec<f64>> {
    let n = instance.n_devices();
    if topology.n_devices() != n || slots.len() != n {
        return Err(invalid("topology, slots and instance disagree on n_devices"));
    }
    if slots.iter().any(|&t| !(t > 0.0)) {
        return Err(invalid("slots must be positive"));
    }
    let out: Vec<f64> = (0..n)
        .map(|k| {
            let p = topology.parent(k);
            if p == k {
                0.0
            } else {
                link_bits(slots[k], instance.snr_scale(k, p, true))
            }
        })
        .collect();
    let mut b = out.clone();
    for (k, &p) in topology.parents().iter().enumerate() {
        if p < n && p != k {
            b[p] -= out[k];
        }
    }
    Ok(b)
}

/// Whether every device reaches the sink, checked through powers of
/// the extended adjacency matrix (the sink row holds a self-cycle).
pub fn validate_topology(topology: &Topology) -> bool {
    let n = topology.n_devices();
    let m = n + 1;
    let mut ext = vec![false; m * m];
    for (i, &p) in topology.parents().iter().enumerate() {
        ext[i * m + p] = true;
    }
    ext[n * m + n] = true;

    // C^n by repeated squaring over the boolean semiring.
    let mut acc: Option<Vec<bool>> = None;
    let mut base = ext;
    let mut e = n;
    while e > 0 {
        if e & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(a) => bool_matmul(&a, &base, m),
            });
        }
        e >>= 1;
        if e > 0 {
            base = bool_matmul(&base, &base, m);
        }
    }
    let power = acc.expect("n >= 1");
    (0..n).all(|i| power[i * m + n])
}

fn bool_matmul(a: &[bool], b: &[bool], m: usize) -> Vec<bool> {
    let mut out = vec![false; m * m];
    for i in 0..m {
        for k in 0..m {
            if a[i * m + k] {
                for j in 0..m {
                    out[i * m + j] |= b[k * m + j];
                }
            }
        }
    }
    out
}

impl From<Topology> for Vec<usize> {
    fn from(t: Topology) -> Self {
        t.parents
    }
}

impl TryFrom<Vec<usize>> for Topology {
    type Error = Error;

    fn try_from(parents: Vec<usize>) -> Result<Self> {
        Self::new(parents)
    }
}
