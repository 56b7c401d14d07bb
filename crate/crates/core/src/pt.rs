//! Packet-tracing rate assessment.
//!
//! Rates are granted backwards from the sink, in the manner of ray tracing
//! from a camera. The node in focus keeps a share of the budget it was granted
//! and passes the rest to its inbound links, scaled down when they ask for
//! more than is left. The walk is depth-first in ascending node order and
//! claims each device at most once. Afterwards opposing grants on every device
//! pair are netted, and each device's rate is the sum of its net outbound
//! grants.
//!
//! Everything is recorded on an [`autodiff::Tape`](crate::autodiff::Tape).
//! The inbound sum, the granted budget and the node's own share are detached,
//! so gradients reach the adjacency only through the link-rate factors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::model::{link_bits, NetworkInstance, Topology};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtConfig {
    /// Slot scale `t`, seconds. `None` means `T / N_d` of the instance.
    pub slot_scale: Option<f64>,
    /// Grants below this many bit·s/Hz are not traced further.
    pub budget_threshold: f64,
    /// Include `|h|^2` in the link SNR. Off by default: the tracer uses the
    /// deterministic path-loss SNR.
    pub include_fading: bool,
}

impl Default for PtConfig {
    fn default() -> Self {
        Self {
            slot_scale: None,
            budget_threshold: 0.01,
            include_fading: false,
        }
    }
}

impl PtConfig {
    pub fn slot_for(&self, instance: &NetworkInstance) -> f64 {
        self.slot_scale
            .unwrap_or(instance.params().frame_s / instance.n_devices() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.slot_scale, Some(t) if !(t > 0.0)) {
            return Err(invalid("slot_scale must be positive"));
        }
        if !(self.budget_threshold > 0.0) {
            return Err(invalid("budget_threshold must be positive"));
        }
        Ok(())
    }
}

/// Budget handed to a focused node. The sink starts unbounded.
#[derive(Clone, Copy, Debug)]
enum Budget<'t> {
    Unbounded,
    Finite(Var<'t>),
}

/// Granted and net rates of one assessment. Matrices are row-major
/// `n x (n + 1)`; `None` marks an entry that is structurally zero.
pub struct RateAssessment<'t> {
    n: usize,
    granted: Vec<Option<Var<'t>>>,
    net: Vec<Option<Var<'t>>>,
    /// Per-device assessed rate.
    pub rates: Vec<Var<'t>>,
    /// Devices claimed by the traversal.
    pub visited: Vec<bool>,
    /// Nodes (sink included) whose budget was split.
    pub expansions: usize,
}

impl<'t> RateAssessment<'t> {
    pub fn n_devices(&self) -> usize {
        self.n
    }

    /// Grant on link `from -> to`.
    pub fn granted(&self, from: usize, to: usize) -> Option<Var<'t>> {
        self.granted[from * (self.n + 1) + to]
    }

    pub fn granted_value(&self, from: usize, to: usize) -> f64 {
        self.granted(from, to).map_or(0.0, Var::value)
    }

    pub fn net(&self, from: usize, to: usize) -> Option<Var<'t>> {
        self.net[from * (self.n + 1) + to]
    }

    pub fn net_value(&self, from: usize, to: usize) -> f64 {
        self.net(from, to).map_or(0.0, Var::value)
    }

    pub fn rate_values(&self) -> Vec<f64> {
        self.rates.iter().map(|r| r.value()).collect()
    }
}

struct Tracer<'a, 't> {
    tape: &'t Tape,
    n: usize,
    adjacency: &'a [Var<'t>],
    /// `t log2(1 + Gamma_{j,m})` for every device `j` and node `m`.
    link_rate: Vec<f64>,
    threshold: f64,
    granted: Vec<Option<Var<'t>>>,
    visited: Vec<bool>,
    expansions: usize,
}

impl<'t> Tracer<'_, 't> {
    fn c(&self, j: usize, m: usize) -> Var<'t> {
        self.adjacency[j * (self.n + 1) + m]
    }

    fn expand(&mut self, node: usize, budget: Budget<'t>) -> Result<()> {
        self.expansions += 1;
        let inbound: Vec<usize> = (0..self.n).filter(|&j| j != node).collect();

        // L_j = c_{j,n} t log2(1 + Gamma_{j,n})
        let links: Vec<Var<'t>> = inbound
            .iter()
            .map(|&j| self.c(j, node) * self.link_rate[j * (self.n + 1) + node])
            .collect();
        let total = self.tape.sum(&links).detach();

        let ratio = match budget {
            Budget::Unbounded => None,
            Budget::Finite(b) => {
                let b = b.detach();
                let cs: Vec<Var<'t>> = inbound.iter().map(|&j| self.c(j, node)).collect();
                let connectivity = self.tape.sum(&cs) + 1.0;
                let own = b.div(connectivity)?.detach();
                if total.value() > 0.0 {
                    let one = self.tape.constant(1.0);
                    Some(one.min2((b - own).div(total)?))
                } else {
                    None
                }
            }
        };

        for (&j, &l) in inbound.iter().zip(&links) {
            let grant = match ratio {
                Some(r) => l * r,
                None => l,
            };
            self.granted[j * (self.n + 1) + node] = Some(grant);
        }
        if node < self.n {
            self.visited[node] = true;
        }
        for &j in &inbound {
            if self.visited[j] {
                continue;
            }
            let grant = self.granted[j * (self.n + 1) + node].expect("set above");
            if grant.value() >= self.threshold {
                self.expand(j, Budget::Finite(grant))?;
            }
        }
        Ok(())
    }
}

/// Assesses a (soft or hard) adjacency given as tape variables, row-major
/// `n x (n + 1)` with rows summing to one.
pub fn rate_pt<'t>(
    instance: &NetworkInstance,
    adjacency: &[Var<'t>],
    config: &PtConfig,
    tape: &'t Tape,
) -> Result<RateAssessment<'t>> {
    config.validate()?;
    let n = instance.n_devices();
    let t = config.slot_for(instance);
    let link_rate: Vec<f64> = (0..n)
        .flat_map(|j| (0..=n).map(move |m| (j, m)))
        .map(|(j, m)| {
            if j == m {
                0.0
            } else {
                link_bits(t, instance.snr_scale(j, m, config.include_fading))
            }
        })
        .collect();
    trace(n, &link_rate, adjacency, config.budget_threshold, tape)
}

/// The tracing core: `link_rate[j * (n + 1) + m]` is the full-connectivity
/// rate `t log2(1 + Gamma_{j,m})` of link `j -> m`; diagonal entries are
/// ignored.
pub fn trace<'t>(
    n: usize,
    link_rate: &[f64],
    adjacency: &[Var<'t>],
    threshold: f64,
    tape: &'t Tape,
) -> Result<RateAssessment<'t>> {
    if n == 0 || adjacency.len() != n * (n + 1) || link_rate.len() != n * (n + 1) {
        return Err(invalid(format!(
            "adjacency and link rates must hold {} entries",
            n * (n + 1)
        )));
    }
    for (i, row) in adjacency.chunks(n + 1).enumerate() {
        let s: f64 = row.iter().map(|v| v.value()).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("adjacency row {i} sums to {s}")));
        }
    }
    let link_rate = (0..n * (n + 1))
        .map(|k| if k / (n + 1) == k % (n + 1) { 0.0 } else { link_rate[k] })
        .collect();

    let mut tracer = Tracer {
        tape,
        n,
        adjacency,
        link_rate,
        threshold,
        granted: vec![None; n * (n + 1)],
        visited: vec![false; n],
        expansions: 0,
    };
    tracer.expand(n, Budget::Unbounded)?;

    let Tracer {
        granted,
        visited,
        expansions,
        ..
    } = tracer;
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    let mut net = vec![None; n * (n + 1)];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            net[idx(i, j)] = match (granted[idx(i, j)], granted[idx(j, i)]) {
                (Some(a), Some(b)) => Some((a - b).relu()),
                (Some(a), None) => Some(a.relu()),
                (None, _) => None,
            };
        }
        net[idx(i, n)] = granted[idx(i, n)];
    }
    let rates = (0..n)
        .map(|i| {
            let terms: Vec<Var<'t>> = net[idx(i, 0)..idx(i + 1, 0)].iter().flatten().copied().collect();
            tape.sum(&terms)
        })
        .collect();

    Ok(RateAssessment {
        n,
        granted,
        net,
        rates,
        visited,
        expansions,
    })
}

/// [`rate_pt`] on a hard topology, its one-hot rows placed on the tape as
/// constants.
pub fn rate_pt_hard<'t>(
    instance: &NetworkInstance,
    topology: &Topology,
    config: &PtConfig,
    tape: &'t Tape,
) -> Result<RateAssessment<'t>> {
    let flat: Vec<f64> = topology.to_matrix().concat();
    let adjacency = tape.vars(&flat);
    rate_pt(instance, &adjacency, config, tape)
}

/// `L = mean_i exp(-R_sim_i)`.
pub fn training_loss<'t>(assessment: &RateAssessment<'t>, tape: &'t Tape) -> Var<'t> {
    let terms: Vec<Var<'t>> = assessment.rates.iter().map(|r| (-*r).exp()).collect();
    tape.sum(&terms) * (1.0 / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_instance, SystemParams};

    #[test]
    fn direct_star_gets_full_link_rates() {
        let inst = generate_instance(8, 6, 2, SystemParams::default()).unwrap();
        let tape = Tape::new();
        let cfg = PtConfig::default();
        let top = Topology::new(vec![6; 6]).unwrap();
        let a = rate_pt_hard(&inst, &top, &cfg, &tape).unwrap();
        let t = cfg.slot_for(&inst);
        for i in 0..6 {
            let expected = link_bits(t, inst.snr_scale(i, 6, false));
            assert!((a.rates[i].value() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_rows_not_summing_to_one() {
        let inst = generate_instance(8, 2, 1, SystemParams::default()).unwrap();
        let tape = Tape::new();
        let adj = tape.vars(&[0.2, 0.2, 0.5, 0.0, 0.0, 1.0]);
        assert!(rate_pt(&inst, &adj, &PtConfig::default(), &tape).is_err());
    }

    #[test]
    fn loss_of_zero_rates_is_one() {
        let inst = generate_instance(1, 3, 0, SystemParams::default()).unwrap();
        let tape = Tape::new();
        let top = Topology::new(vec![3; 3]).unwrap();
        let a = rate_pt_hard(&inst, &top, &PtConfig::default(), &tape).unwrap();
        assert_eq!(training_loss(&a, &tape).value(), 1.0);
    }

    #[test]
    fn two_hop_congestion_hand_trace() {
        // device 1 -> device 0 -> sink, L_0 = 1.0 into the sink, L_1 = 0.8
        // into device 0. Device 0 keeps 1.0 / 2 and grants min(0.8, 0.5).
        let tape = Tape::new();
        let mut links = vec![0.0; 6];
        links[2] = 1.0;
        links[3] = 0.8;
        let adj = tape.vars(&[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let a = trace(2, &links, &adj, 0.01, &tape).unwrap();
        assert_eq!(a.rate_values(), vec![1.0, 0.5]);
        assert_eq!(a.expansions, 3);
        let loss = training_loss(&a, &tape).value();
        assert!((loss - ((-1.0f64).exp() + (-0.5f64).exp()) / 2.0).abs() < 1e-15);
        assert!((loss - 0.487_205).abs() < 1e-6);
    }

    #[test]
    fn no_beacons_expands_only_the_sink() {
        let inst = generate_instance(1, 4, 0, SystemParams::default()).unwrap();
        let tape = Tape::new();
        let adj = tape.vars(&[0.2; 20]);
        let a = rate_pt(&inst, &adj, &PtConfig::default(), &tape).unwrap();
        assert_eq!(a.expansions, 1);
        assert!(a.rate_values().iter().all(|&r| r == 0.0));
    }

    fn random_tree(n: usize, seed: u64) -> Topology {
        // Attaching device k below the sink or a device placed earlier in a
        // random permutation always yields a tree.
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut parents = vec![n; n];
        for (pos, &k) in order.iter().enumerate() {
            let pick = rng.random_range(0..=pos);
            parents[k] = if pick == pos { n } else { order[pick] };
        }
        Topology::new(parents).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn hard_equals_one_hot_soft(seed in 0u64..500, n in 1usize..8) {
            let inst = generate_instance(seed, n, 2, SystemParams::default()).unwrap();
            let top = random_tree(n, seed);
            let cfg = PtConfig::default();
            let tape = Tape::new();
            let hard = rate_pt_hard(&inst, &top, &cfg, &tape).unwrap();
            let flat: Vec<f64> = top.to_matrix().concat();
            let adj = tape.vars(&flat);
            let soft = rate_pt(&inst, &adj, &cfg, &tape).unwrap();
            proptest::prop_assert_eq!(hard.rate_values(), soft.rate_values());
            proptest::prop_assert_eq!(hard.visited, soft.visited);
        }

        #[test]
        fn grants_respect_the_residual_budget(seed in 0u64..500, n in 1usize..10) {
            let inst = generate_instance(seed, n, 2, SystemParams::default()).unwrap();
            let top = random_tree(n, seed ^ 0x55);
            let tape = Tape::new();
            let a = rate_pt_hard(&inst, &top, &PtConfig::default(), &tape).unwrap();
            proptest::prop_assert!(a.expansions <= n + 1);
            for k in (0..n).filter(|&k| a.visited[k]) {
                let b = a.granted_value(k, top.parent(k));
                let kids = top.children(k).count() as f64;
                let own = b / (1.0 + kids);
                let inbound: f64 = (0..n).map(|j| a.granted_value(j, k)).sum();
                proptest::prop_assert!(inbound <= (b - own).max(0.0) + 1e-9);
            }
            for i in 0..n {
                let row: f64 = (0..=n).map(|j| a.net_value(i, j)).sum();
                proptest::prop_assert!((row - a.rates[i].value()).abs() <= 1e-12);
                proptest::prop_assert!((0..=n).all(|j| a.net_value(i, j) >= 0.0));
            }
        }

        #[test]
        fn uncongested_trees_get_their_link_rate(seed in 0u64..300, n in 1usize..8) {
            let inst = generate_instance(seed, n, 2, SystemParams::default()).unwrap();
            let top = random_tree(n, seed ^ 0xaa);
            let cfg = PtConfig::default();
            let t = cfg.slot_for(&inst);
            let rate = |k: usize| link_bits(t, inst.snr_scale(k, top.parent(k), false));
            let tape = Tape::new();
            let a = rate_pt_hard(&inst, &top, &cfg, &tape).unwrap();
            let uncongested = (0..n).all(|k| {
                let kids: Vec<usize> = top.children(k).collect();
                let inbound: f64 = kids.iter().map(|&c| rate(c)).sum();
                let b = a.granted_value(k, top.parent(k));
                b - b / (1.0 + kids.len() as f64) >= inbound && (kids.is_empty() || b >= cfg.budget_threshold)
            });
            proptest::prop_assume!(uncongested);
            for k in 0..n {
                proptest::prop_assert!((a.rates[k].value() - rate(k)).abs() <= 1e-12);
            }
        }
    }
}
