use relaytopo::generator::{propose_topology, GeneratorConfig};
use relaytopo::model::{generate_instance, SystemParams};

#[test]
fn large_network_training_profile() {
    let mut stops = Vec::new();
    for seed in 0..5 {
        let inst = generate_instance(seed, 25, 2, SystemParams::default()).unwrap();
        let p = propose_topology(&inst, &GeneratorConfig::default()).unwrap();
        let first = p.history.first().unwrap();
        let last = p.history.last().unwrap();
        assert!((first.loss - 1.0).abs() <= 0.02, "seed {seed}: initial loss {}", first.loss);
        assert!(
            last.running_min_loss > 0.6 && last.running_min_loss < 0.9,
            "seed {seed}: final loss {}",
            last.running_min_loss
        );
        assert!(last.b_min > first.b_min, "seed {seed}: B_min {} -> {}", first.b_min, last.b_min);
        assert!(!p.fallback);
        stops.push(p.epochs);
    }
    stops.sort_unstable();
    let median = stops[2];
    assert!((41..=141).contains(&median), "stop epochs {stops:?}");
}
