//! Iterative-balancing TDMA slot allocation.
//!
//! For a fixed topology the allocator repeatedly picks the device with the
//! largest budget and the one with the smallest, then bisects the amount of
//! slot time moved between them until the pair is balanced. The outer loop
//! stops once the spread `max B - min B` falls to `eps1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{link_bits, validate_topology, NetworkInstance, Topology};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IbConfig {
    /// Target spread between the largest and smallest budget, bit·s/Hz.
    pub eps1: f64,
    /// Minimum allocatable slot, seconds.
    pub eps2: f64,
    /// Outer iterations before giving up.
    pub max_outer_iterations: usize,
}

impl Default for IbConfig {
    fn default() -> Self {
        Self {
            eps1: 1e-6,
            eps2: 1e-9,
            max_outer_iterations: 1_000_000,
        }
    }
}

impl IbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps1 > 0.0) || !(self.eps2 > 0.0) {
            return Err(invalid("eps1 and eps2 must be positive"));
        }
        if self.max_outer_iterations == 0 {
            return Err(invalid("max_outer_iterations must be positive"));
        }
        Ok(())
    }
}

/// Per-device TDMA slots, seconds; positive and summing to the frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAllocation {
    slots: Vec<f64>,
}

impl SlotAllocation {
    /// Every device gets `frame / n`.
    pub fn uniform(n: usize, frame: f64) -> Self {
        Self {
            slots: vec![frame / n as f64; n],
        }
    }

    pub fn new(slots: Vec<f64>, frame: f64) -> Result<Self> {
        if slots.is_empty() || slots.iter().any(|&t| !(t > 0.0)) {
            return Err(invalid("slots must be non-empty and positive"));
        }
        let sum: f64 = slots.iter().sum();
        if (sum - frame).abs() > 1e-12 * frame {
            return Err(invalid(format!("slots sum to {sum}, frame is {frame}")));
        }
        Ok(Self { slots })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.slots
    }

    pub fn total(&self) -> f64 {
        self.slots.iter().sum()
    }
}

/// Result of one allocation run.
#[derive(Clone, Debug)]
pub struct Allocation {
    pub slots: SlotAllocation,
    /// Balanced minimum budget.
    pub b_ib: f64,
    /// Largest budget at termination; `b_max - b_ib <= eps1`.
    pub b_max: f64,
    pub budgets: Vec<f64>,
    pub outer_iterations: usize,
    /// Whether every device satisfied `B_k(2 eps2) < eps1` at entry. When
    /// false, convergence is not guaranteed.
    pub premise_satisfied: bool,
}

struct Balancer {
    /// SNR at unit slot length of each device's outbound link; zero for
    /// self-links.
    scale: Vec<f64>,
    children: Vec<Vec<usize>>,
    t: Vec<f64>,
}

impl Balancer {
    fn new(instance: &NetworkInstance, topology: &Topology) -> Self {
        let n = instance.n_devices();
        let mut children = vec![Vec::new(); n];
        let scale = (0..n)
            .map(|k| {
                let p = topology.parent(k);
                if p == k {
                    0.0
                } else {
                    if p < n {
                        children[p].push(k);
                    }
                    instance.snr_scale(k, p, true)
                }
            })
            .collect();
        let frame = instance.params().frame_s;
        Self {
            scale,
            children,
            t: vec![frame / n as f64; n],
        }
    }

    fn outbound(&self, k: usize) -> f64 {
        link_bits(self.t[k], self.scale[k])
    }

    fn budget(&self, k: usize) -> f64 {
        self.outbound(k)
            - self.children[k]
                .iter()
                .map(|&c| self.outbound(c))
                .sum::<f64>()
    }

    fn budgets(&self) -> Vec<f64> {
        (0..self.t.len()).map(|k| self.budget(k)).collect()
    }

    /// Moves up to `delta` from `from` to `to`, never leaving `from` below
    /// `floor`. Returns whether anything moved.
    fn transfer(&mut self, from: usize, to: usize, delta: f64, floor: f64) -> bool {
        let amount = delta.min(self.t[from] - floor);
        if amount <= 0.0 {
            return false;
        }
        self.t[from] -= amount;
        self.t[to] += amount;
        true
    }
}

/// Index of the extreme element; ties go to the lowest index.
fn arg_extremes(b: &[f64]) -> (usize, usize) {
    let mut hi = 0;
    let mut lo = 0;
    for (k, &v) in b.iter().enumerate().skip(1) {
        if v > b[hi] {
            hi = k;
        }
        if v < b[lo] {
            lo = k;
        }
    }
    (hi, lo)
}

/// Balances slots for `topology`, returning the allocation and `B_IB`.
///
/// Invalid topologies are accepted; their balanced minimum is never positive.
/// When the loop reaches a fixed point (the bisection can no longer move any
/// time) or exceeds `max_outer_iterations`, [`Error::NonConvergence`] is
/// returned with the minimum budget reached.
pub fn allocate(
    instance: &NetworkInstance,
    topology: &Topology,
    config: &IbConfig,
) -> Result<Allocation> {
    config.validate()?;
    let n = instance.n_devices();
    if topology.n_devices() != n {
        return Err(invalid("topology and instance disagree on n_devices"));
    }
    let (eps1, eps2) = (config.eps1, config.eps2);
    let mut bal = Balancer::new(instance, topology);

    let premise_satisfied = bal.scale.iter().all(|&s| link_bits(2.0 * eps2, s) < eps1);
    if !premise_satisfied {
        log::debug!("B_k(2 eps2) >= eps1 for some device; convergence is not guaranteed");
    }

    let mut delta1 = f64::INFINITY;
    let mut budgets = bal.budgets();
    let mut iterations = 0;
    while eps1 < delta1 {
        if iterations == config.max_outer_iterations {
            return Err(non_convergence(iterations, &budgets));
        }
        iterations += 1;

        let (i, j) = arg_extremes(&budgets);
        if i == j {
            break;
        }
        let mut delta = bal.t[i];
        let mut delta2 = delta1;
        let mut moved = false;
        while delta > 2.0 * eps2 && eps1 < delta2.abs() {
            delta /= 2.0;
            moved |= if delta2 > 0.0 {
                bal.transfer(i, j, delta, eps2)
            } else {
                bal.transfer(j, i, delta, eps2)
            };
            delta2 = bal.budget(i) - bal.budget(j);
        }

        budgets = bal.budgets();
        let (hi, lo) = arg_extremes(&budgets);
        delta1 = budgets[hi] - budgets[lo];
        if !moved && eps1 < delta1 {
            // Nothing moved, so every later iteration would repeat this one.
            return Err(non_convergence(iterations, &budgets));
        }
    }

    let (hi, lo) = arg_extremes(&budgets);
    Ok(Allocation {
        b_ib: budgets[lo],
        b_max: budgets[hi],
        slots: SlotAllocation { slots: bal.t },
        budgets,
        outer_iterations: iterations,
        premise_satisfied,
    })
}

fn non_convergence(iterations: usize, budgets: &[f64]) -> Error {
    let (hi, lo) = arg_extremes(budgets);
    Error::NonConvergence {
        iterations,
        spread: budgets[hi] - budgets[lo],
        b_min: budgets[lo],
    }
}

/// Balanced minimum budget `B_IB(c)` of a topology.
///
/// For an invalid topology whose allocation stalls, the minimum budget at the
/// stall is returned; it is never positive.
pub fn b_ib(instance: &NetworkInstance, topology: &Topology, config: &IbConfig) -> Result<f64> {
    match allocate(instance, topology, config) {
        Ok(a) => Ok(a.b_ib),
        Err(Error::NonConvergence { b_min, .. }) if !validate_topology(topology) => Ok(b_min),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bits_per_hz, generate_instance, snr, SystemParams};

    fn star(n: usize) -> Topology {
        Topology::new(vec![n; n]).unwrap()
    }

    #[test]
    fn single_device_takes_the_whole_frame() {
        let inst = generate_instance(2, 1, 1, SystemParams::default()).unwrap();
        let a = allocate(&inst, &star(1), &IbConfig::default()).unwrap();
        let frame = inst.params().frame_s;
        assert_eq!(a.slots.as_slice(), &[frame]);
        let g = snr(&inst, 0, 1, frame).unwrap();
        assert!((a.b_ib - frame * (1.0 + g).log2()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let params = SystemParams::default();
        let inst = NetworkInstance::from_parts(
            params,
            0,
            vec![[0.2, 0.0], [-0.2, 0.0]],
            vec![[0.0, 0.3]],
            vec![1.0; 6],
            vec![1.0; 2],
        )
        .unwrap();
        let cfg = IbConfig::default();
        let a = allocate(&inst, &star(2), &cfg).unwrap();
        let t = a.slots.as_slice();
        assert!((t[0] - t[1]).abs() <= 2.0 * cfg.eps2);
        assert!((a.budgets[0] - a.budgets[1]).abs() <= cfg.eps1);
    }

    #[test]
    fn slots_sum_to_frame_and_stay_positive() {
        let cfg = IbConfig::default();
        for seed in 0..30 {
            let inst = generate_instance(seed, 6, 2, SystemParams::default()).unwrap();
            let a = allocate(&inst, &star(6), &cfg).unwrap();
            let frame = inst.params().frame_s;
            assert!((a.slots.total() - frame).abs() <= 1e-12 * frame);
            assert!(a.slots.as_slice().iter().all(|&t| t > 0.0));
            assert!(a.b_max - a.b_ib <= cfg.eps1);
            let b = bits_per_hz(&inst, &star(6), a.slots.as_slice()).unwrap();
            assert_eq!(b, a.budgets);
        }
    }

    #[test]
    fn mutual_cycle_is_not_positive() {
        let inst = generate_instance(9, 3, 2, SystemParams::default()).unwrap();
        let cyc = Topology::new(vec![1, 0, 3]).unwrap();
        assert!(b_ib(&inst, &cyc, &IbConfig::default()).unwrap() <= 0.0);
        let selfloop = Topology::new(vec![0, 3, 3]).unwrap();
        assert!(b_ib(&inst, &selfloop, &IbConfig::default()).unwrap() <= 0.0);
    }

    #[test]
    fn wrapper_matches_allocate() {
        let inst = generate_instance(4, 5, 1, SystemParams::default()).unwrap();
        let cfg = IbConfig::default();
        let a = allocate(&inst, &star(5), &cfg).unwrap();
        assert_eq!(b_ib(&inst, &star(5), &cfg).unwrap(), a.b_ib);
    }

    #[test]
    fn rejects_bad_config() {
        let inst = generate_instance(4, 2, 1, SystemParams::default()).unwrap();
        let cfg = IbConfig {
            eps1: 0.0,
            ..IbConfig::default()
        };
        assert!(allocate(&inst, &star(2), &cfg).is_err());
    }
}
