use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relaytopo::baselines::{direct_topology, greedy_topology, mst_topology};
use relaytopo::generator::init_net;
use relaytopo::ib::{allocate, IbConfig};
use relaytopo::model::{
    bits_per_hz, generate_instance, link_bits, snr, validate_topology, NetworkInstance, SystemParams, Topology,
};

fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> Topology {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut parents = vec![n; n];
    for (pos, &k) in order.iter().enumerate() {
        let pick = rng.random_range(0..=pos);
        parents[k] = if pick == pos { n } else { order[pick] };
    }
    Topology::new(parents).unwrap()
}

/// Follows parent pointers; a device reaches the sink unless it revisits a
/// node first.
fn reaches_sink_by_walking(parents: &[usize]) -> bool {
    let n = parents.len();
    (0..n).all(|start| {
        let mut seen = vec![false; n];
        let mut k = start;
        while k != n {
            if seen[k] {
                return false;
            }
            seen[k] = true;
            k = parents[k];
        }
        true
    })
}

#[test]
fn matrix_power_validity_matches_walks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut valid = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=9);
        let parents: Vec<usize> = (0..n).map(|_| rng.random_range(0..=n)).collect();
        let expected = reaches_sink_by_walking(&parents);
        valid += usize::from(expected);
        assert_eq!(validate_topology(&Topology::new(parents.clone()).unwrap()), expected, "{parents:?}");
    }
    // Both outcomes must be exercised.
    assert!(valid > 50 && valid < 950, "{valid}");
}

#[test]
fn snr_decreases_with_slot_and_distance() {
    let inst = generate_instance(3, 4, 2, SystemParams::default()).unwrap();
    let mut last = f64::INFINITY;
    for k in 1..50 {
        let g = snr(&inst, 0, 4, k as f64 * 1e-3).unwrap();
        assert!(g < last);
        last = g;
    }
    // Device pushed further out along a ray, beacon at the sink.
    let mut last = f64::INFINITY;
    for k in 1..10 {
        let d = 0.05 * k as f64;
        let inst = NetworkInstance::from_parts(
            SystemParams::default(),
            0,
            vec![[d, 0.0]],
            vec![[0.0, 0.0]],
            vec![1.0, 1.0],
            vec![1.0],
        )
        .unwrap();
        let g = snr(&inst, 0, 1, 0.01).unwrap();
        assert!(g > 0.0 && g < last);
        last = g;
    }
}

#[test]
fn ib_terminates_on_random_trees() {
    let cfg = IbConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..1000 {
        let n = rng.random_range(1..=10);
        let inst = generate_instance(seed, n, rng.random_range(1..=3), SystemParams::default()).unwrap();
        let top = random_tree(n, &mut rng);
        let a = allocate(&inst, &top, &cfg).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(a.b_max - a.b_ib <= cfg.eps1);
        assert!(a.outer_iterations < cfg.max_outer_iterations);
    }
}

#[test]
fn ib_matches_a_fine_grid_for_two_devices() {
    let cfg = IbConfig::default();
    for seed in 0..10 {
        let inst = generate_instance(40 + seed, 2, 2, SystemParams::default()).unwrap();
        for parents in [[2, 2], [2, 0], [1, 2]] {
            let top = Topology::new(parents.to_vec()).unwrap();
            let ib = allocate(&inst, &top, &cfg).unwrap().b_ib;
            let frame = inst.params().frame_s;
            let steps = 1_000_000;
            let best = (1..steps)
                .map(|a| {
                    let t = a as f64 * frame / steps as f64;
                    let b = bits_per_hz(&inst, &top, &[t, frame - t]).unwrap();
                    b[0].min(b[1])
                })
                .fold(f64::NEG_INFINITY, f64::max);
            // Grid spacing 1e-7 s moves a budget by well under 1e-5.
            assert!((ib - best).abs() < 1e-4, "seed {seed} {parents:?}: {ib} vs {best}");
        }
    }
}

proptest! {
    #[test]
    fn budgets_telescope_on_trees(seed in 0u64..10_000, n in 1usize..12, split in proptest::collection::vec(0.01f64..1.0, 12)) {
        let inst = generate_instance(seed, n, 2, SystemParams::default()).unwrap();
        let top = random_tree(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let frame = inst.params().frame_s;
        let total: f64 = split[..n].iter().sum();
        let slots: Vec<f64> = split[..n].iter().map(|s| s / total * frame).collect();
        let b = bits_per_hz(&inst, &top, &slots).unwrap();
        let sink_links: f64 = (0..n)
            .filter(|&k| top.parent(k) == n)
            .map(|k| link_bits(slots[k], inst.snr_scale(k, n, true)))
            .sum();
        let sum: f64 = b.iter().sum();
        prop_assert!((sum - sink_links).abs() <= 1e-9 * sink_links.abs().max(1.0));
    }

    #[test]
    fn baselines_are_valid_trees(seed in 0u64..10_000, n in 1usize..15, nb in 0usize..4) {
        let inst = generate_instance(seed, n, nb, SystemParams::default()).unwrap();
        prop_assert!(validate_topology(&direct_topology(n).unwrap()));
        let mst = mst_topology(&inst);
        prop_assert!(validate_topology(&mst));
        prop_assert_eq!(&mst, &mst_topology(&inst));
        let greedy = greedy_topology(&inst, seed);
        prop_assert!(validate_topology(&greedy));
        prop_assert_eq!(greedy, greedy_topology(&inst, seed));
    }

    #[test]
    fn generator_rows_are_distributions(n in 1usize..9, seed in 0u64..1000, z in proptest::collection::vec(0.0f64..1.0, 27)) {
        let net = init_net(n, seed).unwrap();
        let z: Vec<f64> = z.iter().cycle().take(net.latent_size()).copied().collect();
        let soft = net.infer(&z).unwrap();
        for row in soft.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
