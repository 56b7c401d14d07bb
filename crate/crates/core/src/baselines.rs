//! Comparison topologies: direct star, minimum spanning tree, greedy relay
//! selection and the exhaustive optimum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::ib::{allocate, Allocation, IbConfig};
use crate::model::{bits_per_hz, link_bits, validate_topology, NetworkInstance, Topology};

/// Largest network the exhaustive search accepts.
pub const MAX_OPTIMAL_DEVICES: usize = 8;

/// Every device transmits straight to the sink.
pub fn direct_topology(n_devices: usize) -> Result<Topology> {
    if n_devices == 0 {
        return Err(invalid("n_devices must be at least 1"));
    }
    Topology::new(vec![n_devices; n_devices])
}

/// Link capacity at uniform slots, `t log2(1 + Gamma)` with `t = T / N_d`.
fn uniform_capacity(instance: &NetworkInstance, from: usize, to: usize) -> f64 {
    let t = instance.params().frame_s / instance.n_devices() as f64;
    link_bits(t, instance.snr_scale(from, to, true))
}

/// Prim's tree grown from the sink; the cost of attaching device `i` below
/// tree node `j` is the reciprocal of the link capacity `i -> j` at uniform
/// slots. Ties go to the lowest `(parent, child)` pair.
pub fn mst_topology(instance: &NetworkInstance) -> Topology {
    let n = instance.n_devices();
    let sink = n;
    let cost = |i: usize, j: usize| 1.0 / uniform_capacity(instance, i, j);

    let mut parents = vec![sink; n];
    let mut in_tree = vec![false; n];
    // Cheapest known attachment per device, as (cost, parent).
    let mut best: Vec<(f64, usize)> = (0..n).map(|i| (cost(i, sink), sink)).collect();
    for _ in 0..n {
        let mut pick: Option<usize> = None;
        for i in (0..n).filter(|&i| !in_tree[i]) {
            pick = match pick {
                Some(k) if (best[k].0, best[k].1, k) <= (best[i].0, best[i].1, i) => Some(k),
                _ => Some(i),
            };
        }
        let child = pick.expect("a device remains outside the tree");
        in_tree[child] = true;
        parents[child] = best[child].1;
        for i in (0..n).filter(|&i| !in_tree[i]) {
            let c = cost(i, child);
            if c < best[i].0 || (c == best[i].0 && child < best[i].1) {
                best[i] = (c, child);
            }
        }
    }
    Topology::new(parents).expect("parents in range")
}

/// Greedy relaying: one pass over the devices in a seeded random order, each
/// reattaching to the node maximising `min(t log2(1 + Gamma_ij), B_j)` with
/// `B_sink = inf`. Moves that would disconnect the sink are rejected.
pub fn greedy_topology(instance: &NetworkInstance, seed: u64) -> Topology {
    let n = instance.n_devices();
    let sink = n;
    let uniform = vec![instance.params().frame_s / n as f64; n];
    let mut topology = direct_topology(n).expect("n >= 1");
    let mut budgets = bits_per_hz(instance, &topology, &uniform).expect("shapes agree");

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    for i in order {
        let mut best = (f64::NEG_INFINITY, sink);
        for j in (0..=n).filter(|&j| j != i) {
            let b_j = if j == sink { f64::INFINITY } else { budgets[j] };
            let score = uniform_capacity(instance, i, j).min(b_j);
            if score > best.0 {
                best = (score, j);
            }
        }
        if best.1 == topology.parent(i) {
            continue;
        }
        let mut candidate = topology.clone();
        candidate.set_parent(i, best.1);
        if validate_topology(&candidate) {
            topology = candidate;
            budgets = bits_per_hz(instance, &topology, &uniform).expect("shapes agree");
        }
    }
    topology
}

/// Outcome of the exhaustive search.
#[derive(Clone, Debug)]
pub struct OptimalResult {
    pub topology: Topology,
    pub allocation: Allocation,
    /// Parent assignments enumerated before the validity filter.
    pub enumerated: u64,
    /// Assignments that passed [`validate_topology`].
    pub valid: u64,
}

/// Decodes assignment number `code` in mixed radix: device `i` picks the
/// `digit`-th entry of `N - {i}`.
fn decode_assignment(mut code: u64, n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let digit = (code % n as u64) as usize;
            code /= n as u64;
            if digit >= i {
                digit + 1
            } else {
                digit
            }
        })
        .collect()
}

/// Exhaustive search over every parent assignment, balancing each valid one
/// with the IB allocator and keeping the best `B_IB` (ties: first enumerated).
pub fn optimal_topology(instance: &NetworkInstance, config: &IbConfig) -> Result<OptimalResult> {
    let n = instance.n_devices();
    if n > MAX_OPTIMAL_DEVICES {
        return Err(invalid(format!(
            "exhaustive search is limited to {MAX_OPTIMAL_DEVICES} devices, got {n}"
        )));
    }
    let enumerated = (n as u64).pow(n as u32);
    let evaluated: Vec<(u64, Topology, Allocation)> = (0..enumerated)
        .into_par_iter()
        .filter_map(|code| {
            let top = Topology::new(decode_assignment(code, n)).expect("parents in range");
            validate_topology(&top).then_some((code, top))
        })
        .map(|(code, top)| allocate(instance, &top, config).map(|a| (code, top, a)))
        .collect::<Result<_>>()?;

    let valid = evaluated.len() as u64;
    let (_, topology, allocation) = evaluated
        .into_iter()
        .reduce(|best, cur| if cur.2.b_ib > best.2.b_ib { cur } else { best })
        .expect("the direct star is always valid");
    Ok(OptimalResult {
        topology,
        allocation,
        enumerated,
        valid,
    })
}
