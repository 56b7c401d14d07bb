//! Topology generator: a four-layer fully connected network mapping a uniform
//! latent vector to a row-stochastic soft adjacency, trained without labels by
//! minimising the packet-tracing loss.
//!
//! One epoch draws one latent sample, runs the forward pass and the rate
//! assessment on a fresh tape, and takes one ADAM step. The soft adjacency
//! with the lowest loss seen so far (the champion) is hardened by row argmax
//! at the end.

use std::io::{Read, Write};

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines::direct_topology;
use crate::error::{invalid, Error, Result};
use crate::ib::{allocate, b_ib, Allocation, IbConfig};
use crate::model::{validate_topology, NetworkInstance, Topology};
use crate::pt::{rate_pt, training_loss, PtConfig};

/// Checkpoint format version written by [`Checkpoint::save`].
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layer widths `s_0..=s_4` for `n` devices: `s_0 = ceil(n sqrt n)`,
/// `s_4 = n (n + 1)` and the middle three on the arithmetic sequence between
/// them, rounded to the nearest integer.
pub fn layer_sizes(n_devices: usize) -> [usize; 5] {
    let n = n_devices;
    // Smallest s with s^2 >= n^3, computed exactly in integers.
    let cube = (n as u128).pow(3);
    let mut s0 = (cube as f64).sqrt() as u128;
    while s0 * s0 < cube {
        s0 += 1;
    }
    while s0 > 0 && (s0 - 1) * (s0 - 1) >= cube {
        s0 -= 1;
    }
    let s0 = s0 as usize;
    let s4 = n * (n + 1);
    let step = (s4 as f64 - s0 as f64) / 4.0;
    let mid = |k: f64| (s0 as f64 + k * step).round() as usize;
    [s0, mid(1.0), mid(2.0), mid(3.0), s4]
}

/// One fully connected layer, weights row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNet {
    n_devices: usize,
    layers: Vec<Layer>,
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_net(n_devices: usize, seed: u64) -> Result<GeneratorNet> {
    if n_devices == 0 {
        return Err(invalid("n_devices must be at least 1"));
    }
    let sizes = layer_sizes(n_devices);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = sizes
        .windows(2)
        .map(|w| {
            let (inputs, outputs) = (w[0], w[1]);
            let limit = (6.0 / (inputs + outputs) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            Layer {
                inputs,
                outputs,
                weights: (0..inputs * outputs).map(|_| dist.sample(&mut rng)).collect(),
                biases: vec![0.0; outputs],
            }
        })
        .collect();
    Ok(GeneratorNet { n_devices, layers })
}

/// Tape handles of one forward pass.
pub struct Forward<'t> {
    /// Parameters in [`GeneratorNet::params`] order.
    pub params: Vec<Var<'t>>,
    /// Soft adjacency, row-major `n x (n + 1)`.
    pub adjacency: Vec<Var<'t>>,
}

impl GeneratorNet {
    pub fn n_devices(&self) -> usize {
        self.n_devices
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn latent_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Flattened parameters: weights then biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(invalid("parameter count mismatch"));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            let (b, r) = r.split_at(l.biases.len());
            l.weights.copy_from_slice(w);
            l.biases.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    /// Records `softmax_rows(FC4(relu(FC3(relu(FC2(relu(FC1(z))))))))` on
    /// `tape`.
    pub fn forward<'t>(&self, z: &[f64], tape: &'t Tape) -> Result<Forward<'t>> {
        if z.len() != self.latent_size() {
            return Err(invalid(format!(
                "latent vector has {} entries, expected {}",
                z.len(),
                self.latent_size()
            )));
        }
        let mut params = Vec::with_capacity(self.n_params());
        let mut h = tape.vars(z);
        for (k, l) in self.layers.iter().enumerate() {
            let start = params.len();
            params.extend(tape.vars(&l.weights));
            params.extend(tape.vars(&l.biases));
            let (w, b) = params[start..].split_at(l.weights.len());
            h = tape.matvec(w, &h, b);
            if k + 1 < self.layers.len() {
                h = h.into_iter().map(Var::relu).collect();
            }
        }
        let adjacency = h
            .chunks(self.n_devices + 1)
            .flat_map(|row| tape.softmax(row))
            .collect();
        Ok(Forward { params, adjacency })
    }

    /// Forward pass without gradients.
    pub fn infer(&self, z: &[f64]) -> Result<SoftAdjacency> {
        let tape = Tape::new();
        let f = self.forward(z, &tape)?;
        Ok(SoftAdjacency::from_vars(self.n_devices, &f.adjacency))
    }
}

/// Row-stochastic relaxation of a topology, row-major `n x (n + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftAdjacency {
    n_devices: usize,
    values: Vec<f64>,
}

impl SoftAdjacency {
    pub fn new(n_devices: usize, values: Vec<f64>) -> Result<Self> {
        if n_devices == 0 || values.len() != n_devices * (n_devices + 1) {
            return Err(invalid("soft adjacency must be n x (n + 1)"));
        }
        Ok(Self { n_devices, values })
    }

    fn from_vars(n_devices: usize, vars: &[Var<'_>]) -> Self {
        Self {
            n_devices,
            values: vars.iter().map(|v| v.value()).collect(),
        }
    }

    pub fn n_devices(&self) -> usize {
        self.n_devices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_devices + 1)
    }
}

/// Row argmax hardening; ties go to the lowest column.
pub fn post_process(soft: &SoftAdjacency) -> Topology {
    let parents = soft
        .rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
        })
        .collect();
    Topology::new(parents).expect("argmax within row")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate > 0.0)
            || !beta_ok(self.beta1)
            || !beta_ok(self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(invalid("ADAM needs lr > 0, 0 <= beta < 1, epsilon > 0"));
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One bias-corrected ADAM update of `theta` in place.
    pub fn step(&mut self, cfg: &AdamConfig, theta: &mut [f64], grads: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid("gradient and parameter counts differ"));
        }
        let c1 = 1.0 - cfg.beta1.powf((self.t + 1) as f64);
        let c2 = 1.0 - cfg.beta2.powf((self.t + 1) as f64);
        for (((p, &g), m), v) in theta.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        self.t += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seed of the Glorot initialisation.
    pub net_seed: u64,
    /// Seed of the latent stream; one stream serves the whole run.
    pub latent_seed: u64,
    /// Epochs without a new minimum loss before stopping. `None` means
    /// `ceil(30 + 500 / N_d)`.
    pub patience: Option<usize>,
    pub max_epochs: usize,
    /// Record `B_IB` of the hardened champion every epoch.
    pub track_b_min: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net_seed: 0,
            latent_seed: 1,
            patience: None,
            max_epochs: 2000,
            track_b_min: true,
        }
    }
}

impl TrainConfig {
    pub fn patience_for(&self, n_devices: usize) -> usize {
        self.patience.unwrap_or(30 + 500_usize.div_ceil(n_devices))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == Some(0) || self.max_epochs == 0 {
            return Err(invalid("patience and max_epochs must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub running_min_loss: f64,
    /// `B_IB` of the hardened champion; NaN when not tracked.
    pub b_min: f64,
}

/// Configuration bundle for a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub pt: PtConfig,
    pub ib: IbConfig,
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.train.validate()?;
        cfg.adam.validate()?;
        cfg.pt.validate()?;
        cfg.ib.validate()?;
        Ok(cfg)
    }
}

/// Resumable training state for one instance.
pub struct Trainer<'a> {
    instance: &'a NetworkInstance,
    config: GeneratorConfig,
    net: GeneratorNet,
    adam: AdamState,
    latent: ChaCha8Rng,
    history: Vec<EpochRecord>,
    champion: Option<(f64, SoftAdjacency)>,
    since_improvement: usize,
    /// Hardened champion and its `B_IB`, reused while the champion's argmax
    /// pattern does not change.
    b_min_cache: Option<(Topology, f64)>,
}

impl<'a> Trainer<'a> {
    pub fn new(instance: &'a NetworkInstance, config: GeneratorConfig) -> Result<Self> {
        config.train.validate()?;
        config.adam.validate()?;
        config.pt.validate()?;
        config.ib.validate()?;
        let net = init_net(instance.n_devices(), config.train.net_seed)?;
        let adam = AdamState::new(net.n_params());
        let latent = ChaCha8Rng::seed_from_u64(config.train.latent_seed);
        Ok(Self {
            instance,
            config,
            net,
            adam,
            latent,
            history: Vec::new(),
            champion: None,
            since_improvement: 0,
            b_min_cache: None,
        })
    }

    pub fn net(&self) -> &GeneratorNet {
        &self.net
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epochs(&self) -> usize {
        self.history.len()
    }

    pub fn champion(&self) -> Option<&SoftAdjacency> {
        self.champion.as_ref().map(|(_, s)| s)
    }

    pub fn champion_loss(&self) -> Option<f64> {
        self.champion.as_ref().map(|(l, _)| *l)
    }

    /// Whether the patience window or the epoch cap has been reached.
    pub fn converged(&self) -> bool {
        let patience = self.config.train.patience_for(self.instance.n_devices());
        self.since_improvement >= patience || self.epochs() >= self.config.train.max_epochs
    }

    /// Runs one epoch.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let epoch = self.epochs();
        self.epoch_inner().map_err(|e| Error::Training {
            epoch,
            source: Box::new(e),
        })
    }

    fn epoch_inner(&mut self) -> Result<EpochRecord> {
        let z: Vec<f64> = (0..self.net.latent_size())
            .map(|_| self.latent.random::<f64>())
            .collect();
        let edges = 2 * self.net.n_params();
        let tape = Tape::with_capacity(self.net.n_params() + edges / 4, edges + edges / 4);
        let fwd = self.net.forward(&z, &tape)?;
        let assessment = rate_pt(self.instance, &fwd.adjacency, &self.config.pt, &tape)?;
        let loss = training_loss(&assessment, &tape);
        let grads = tape.backward(loss).wrt_all(&fwd.params);

        let loss_value = loss.value();
        if !loss_value.is_finite() {
            return Err(Error::Domain {
                op: "training_loss",
                value: loss_value,
            });
        }
        if self.champion.as_ref().is_none_or(|(best, _)| loss_value < *best) {
            let soft = SoftAdjacency::from_vars(self.net.n_devices(), &fwd.adjacency);
            self.champion = Some((loss_value, soft));
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }

        let mut theta = self.net.params();
        self.adam.step(&self.config.adam, &mut theta, &grads)?;
        self.net.set_params(&theta)?;

        let (running_min_loss, champion) = self.champion.as_ref().expect("set above");
        let running_min_loss = *running_min_loss;
        let b_min = if self.config.train.track_b_min {
            let hard = post_process(champion);
            match &self.b_min_cache {
                Some((top, b)) if *top == hard => *b,
                _ => {
                    let b = b_ib(self.instance, &hard, &self.config.ib).unwrap_or_else(|e| {
                        log::warn!("B_min diagnostic failed: {e}");
                        f64::NAN
                    });
                    self.b_min_cache = Some((hard, b));
                    b
                }
            }
        } else {
            f64::NAN
        };
        let record = EpochRecord {
            epoch: self.epochs(),
            loss: loss_value,
            running_min_loss,
            b_min,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Steps until [`Trainer::converged`].
    pub fn run(&mut self) -> Result<()> {
        while !self.converged() {
            self.step()?;
        }
        log::debug!(
            "training stopped after {} epochs, champion loss {:?}",
            self.epochs(),
            self.champion_loss()
        );
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            net: self.net.clone(),
            adam: self.adam.clone(),
            epoch: self.epochs(),
        }
    }
}

/// Outcome of training followed by hardening and slot balancing.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub topology: Topology,
    pub allocation: Allocation,
    pub b_ib: f64,
    /// The hardened champion was invalid and the direct star was used.
    pub fallback: bool,
    pub epochs: usize,
    pub history: Vec<EpochRecord>,
    pub champion: SoftAdjacency,
}

/// Trains on `instance`, hardens the champion and balances its slots.
pub fn propose_topology(instance: &NetworkInstance, config: &GeneratorConfig) -> Result<Proposal> {
    let mut trainer = Trainer::new(instance, config.clone())?;
    trainer.run()?;
    let champion = trainer.champion().expect("at least one epoch").clone();
    let hard = post_process(&champion);
    let fallback = !validate_topology(&hard);
    let topology = if fallback {
        log::info!("hardened topology is invalid; using the direct star");
        direct_topology(instance.n_devices())?
    } else {
        hard
    };
    let allocation = allocate(instance, &topology, &config.ib)?;
    Ok(Proposal {
        b_ib: allocation.b_ib,
        topology,
        allocation,
        fallback,
        epochs: trainer.epochs(),
        history: trainer.history,
        champion,
    })
}

/// Serialized generator weights and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub net: GeneratorNet,
    pub adam: AdamState,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, self)?;
        Ok(())
    }

    pub fn load<R: Read>(reader: R) -> Result<Self> {
        let c: Self = serde_json::from_reader(reader)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {}", c.version)));
        }
        if c.adam.m.len() != c.net.n_params() || c.adam.v.len() != c.net.n_params() {
            return Err(invalid("checkpoint moments do not match the network"));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_instance, SystemParams};

    #[test]
    fn layer_sizes_follow_the_arithmetic_sequence() {
        assert_eq!(layer_sizes(1), [1, 1, 2, 2, 2]);
        assert_eq!(layer_sizes(4), [8, 11, 14, 17, 20]);
        assert_eq!(layer_sizes(25), [125, 256, 388, 519, 650]);
        for n in 1..40 {
            let s = layer_sizes(n);
            assert!(s[0] * s[0] >= n * n * n && (s[0] - 1) * (s[0] - 1) < n * n * n);
            assert_eq!(s[4], n * (n + 1));
            assert!(s.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn init_is_glorot_with_zero_bias() {
        let net = init_net(6, 3).unwrap();
        for l in net.layers() {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= limit));
            assert!(l.biases.iter().all(|&b| b == 0.0));
        }
        assert_eq!(net, init_net(6, 3).unwrap());
        assert_ne!(net, init_net(6, 4).unwrap());
        assert!(init_net(0, 1).is_err());
    }

    #[test]
    fn forward_rows_are_distributions() {
        let net = init_net(5, 1).unwrap();
        let z = vec![0.5; net.latent_size()];
        let soft = net.infer(&z).unwrap();
        for row in soft.rows() {
            assert_eq!(row.len(), 6);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(soft, net.infer(&z).unwrap());
        assert!(net.infer(&z[1..]).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut s = AdamState::new(1);
        let mut theta = [0.0];
        s.step(&AdamConfig::default(), &mut theta, &[1.0]).unwrap();
        assert!((s.m[0] - 0.1).abs() < 1e-15);
        assert!((s.v[0] - 0.001).abs() < 1e-15);
        assert!((theta[0] - -0.001 / (1.0 + 1e-8)).abs() < 1e-18);
        assert!((theta[0] - -0.000_999_999_990).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_and_independence() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(2);
        let mut theta = [0.3, -0.2];
        s.step(&cfg, &mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, [0.3, -0.2]);

        let mut joint = AdamState::new(2);
        let mut a = AdamState::new(1);
        let mut b = AdamState::new(1);
        let (mut tj, mut ta, mut tb) = ([1.0, 2.0], [1.0], [2.0]);
        for g in [[0.5, -3.0], [0.1, 2.0], [-1.0, 0.0]] {
            joint.step(&cfg, &mut tj, &g).unwrap();
            a.step(&cfg, &mut ta, &g[..1]).unwrap();
            b.step(&cfg, &mut tb, &g[1..]).unwrap();
        }
        assert_eq!(tj, [ta[0], tb[0]]);
    }

    #[test]
    fn post_process_argmax_and_ties() {
        let soft = SoftAdjacency::new(2, vec![0.1, 0.7, 0.2, 0.5, 0.5, 0.0]).unwrap();
        assert_eq!(post_process(&soft).parents(), &[1, 0]);
    }

    #[test]
    fn patience_rounds_up() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.patience_for(25), 50);
        assert_eq!(cfg.patience_for(3), 30 + 167);
        assert_eq!(cfg.patience_for(1), 530);
    }

    #[test]
    fn single_device_proposes_direct() {
        let inst = generate_instance(3, 1, 2, SystemParams::default()).unwrap();
        let mut cfg = GeneratorConfig::default();
        cfg.train.max_epochs = 20;
        let p = propose_topology(&inst, &cfg).unwrap();
        assert_eq!(p.topology.parents(), &[1]);
        assert_eq!(p.b_ib, b_ib(&inst, &p.topology, &cfg.ib).unwrap());
    }

    #[test]
    fn training_is_reproducible_and_champion_monotone() {
        let inst = generate_instance(5, 4, 2, SystemParams::default()).unwrap();
        let mut cfg = GeneratorConfig::default();
        cfg.train.max_epochs = 40;
        let a = propose_topology(&inst, &cfg).unwrap();
        let b = propose_topology(&inst, &cfg).unwrap();
        let bits = |h: &[EpochRecord]| -> Vec<(u64, u64)> {
            h.iter().map(|r| (r.loss.to_bits(), r.b_min.to_bits())).collect()
        };
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.champion, b.champion);
        assert!(a
            .history
            .windows(2)
            .all(|w| w[1].running_min_loss <= w[0].running_min_loss));
        assert!(a.history.iter().all(|r| r.loss > 0.0 && r.loss <= 1.0));
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let inst = generate_instance(5, 3, 1, SystemParams::default()).unwrap();
        let mut trainer = Trainer::new(&inst, GeneratorConfig::default()).unwrap();
        for _ in 0..3 {
            trainer.step().unwrap();
        }
        let ck = trainer.checkpoint();
        let mut buf = Vec::new();
        ck.save(&mut buf).unwrap();
        assert_eq!(Checkpoint::load(buf.as_slice()).unwrap(), ck);
        let mut bad = ck.clone();
        bad.version = 99;
        let mut buf = Vec::new();
        bad.save(&mut buf).unwrap();
        assert!(Checkpoint::load(buf.as_slice()).is_err());
    }
}
