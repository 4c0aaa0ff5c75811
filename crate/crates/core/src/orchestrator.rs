//! The federation loop: broadcast, local training at every node, the
//! simulated network, aggregation.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::aggregation::{self, ServerOptState, Strategy};
use crate::error::{Error, Result};
use crate::mae::{self, ImageSample, MaeParams, MaeShape, MaskSet, PatchSet};
use crate::numeric::ParamVector;
use crate::partition::{self, SplitAssignment, SERVER_NODE};
use crate::rng::{stream_id, SeededRng, StreamPurpose};
use crate::synth::{self, SynthSpec};
use crate::trainer::{self, ClientUpdate, TrainerConfig};
use crate::wire::{self, UpdateMessage, PROTOCOL_VERSION};

/// How sample ids are handed to nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitMode {
    Homogeneous {
        per_client: usize,
        server: usize,
    },
    Heterogeneous {
        a_clients: usize,
        b_clients: usize,
        server: usize,
    },
    Custom(SplitAssignment),
}

/// Seeded message faults on the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FaultConfig {
    pub drop_prob: f64,
    pub corrupt_prob: f64,
}

impl FaultConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("drop", self.drop_prob), ("corrupt", self.corrupt_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.drop_prob > 0.0 || self.corrupt_prob > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub strategy: Strategy,
    pub trainer: TrainerConfig,
    pub split: SplitMode,
    pub model: MaeShape,
    pub synth: SynthSpec,
    pub seed: u64,
    /// Weights start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Images per class and domain in the fixed loss-tracking batch.
    pub eval_per_class: usize,
    pub faults: FaultConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 5,
            rounds: 150,
            strategy: Strategy::fedavg(),
            trainer: TrainerConfig::default(),
            split: SplitMode::Heterogeneous {
                a_clients: 3,
                b_clients: 2,
                server: 190,
            },
            model: MaeShape::default(),
            synth: SynthSpec::default(),
            seed: 0,
            init_scale: 0.05,
            eval_per_class: 4,
            faults: FaultConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("a federation needs at least one round"));
        }
        self.strategy.validate()?;
        self.trainer.validate()?;
        self.synth.validate()?;
        self.faults.validate()?;
        if self.model.patch != self.synth.patch {
            return Err(Error::invalid(format!(
                "model patch size {} differs from data patch size {}",
                self.model.patch, self.synth.patch
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("init scale must be finite and non-negative"));
        }
        let clients = match &self.split {
            SplitMode::Homogeneous { .. } => self.num_clients,
            SplitMode::Heterogeneous {
                a_clients, b_clients, ..
            } => a_clients + b_clients,
            SplitMode::Custom(s) => s.num_clients(),
        };
        if clients != self.num_clients {
            return Err(Error::invalid(format!(
                "split defines {clients} clients but the config asks for {}",
                self.num_clients
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    /// Initial global model, a pure function of the master seed.
    pub fn initial_params(&self) -> Result<ParamVector> {
        let mut rng = SeededRng::for_purpose(self.seed, StreamPurpose::Init, 0);
        Ok(MaeParams::init(self.model, self.init_scale, &mut rng)?.flatten())
    }

    /// Builds the split over `samples` described by `self.split`.
    pub fn materialize_split(&self, samples: &[ImageSample]) -> Result<SplitAssignment> {
        let (a, b) = synth::pools(samples);
        let mut rng = SeededRng::for_purpose(self.seed, StreamPurpose::Split, 0);
        let split = match &self.split {
            SplitMode::Homogeneous { per_client, server } => {
                partition::homogeneous_split(&a, &b, self.num_clients, *per_client, *server, &mut rng)?
            }
            SplitMode::Heterogeneous {
                a_clients,
                b_clients,
                server,
            } => partition::heterogeneous_split(&a, &b, *a_clients, *b_clients, *server, &mut rng)?,
            SplitMode::Custom(s) => s.clone(),
        };
        split.validate(&[&a, &b])?;
        Ok(split)
    }
}

/// The pretraining corpus, its split, and the fixed loss-tracking batch.
#[derive(Debug, Clone)]
pub struct FederationData {
    pub samples: Vec<ImageSample>,
    pub split: SplitAssignment,
    pub eval: Vec<ImageSample>,
}

impl FederationData {
    pub fn from_config(cfg: &FederationConfig) -> Result<Self> {
        cfg.validate()?;
        let samples = synth::generate_synth(&cfg.synth)?;
        let split = cfg.materialize_split(&samples)?;
        let eval = synth::generate_split(&cfg.synth, 2, [cfg.eval_per_class; 2])?;
        Ok(FederationData { samples, split, eval })
    }

    /// Same corpus and eval batch with a different split.
    pub fn with_split(&self, split: SplitAssignment) -> Self {
        FederationData {
            samples: self.samples.clone(),
            split,
            eval: self.eval.clone(),
        }
    }
}

/// Telemetry for one completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    /// Mean masked loss of the new global model on the fixed eval batch.
    pub global_loss: f64,
    /// Last local loss of each node whose update arrived, by node id.
    pub node_losses: Vec<(u32, f64)>,
    pub delta_norm: f64,
    pub checksum: u64,
    /// Nodes whose updates were dropped in transit this round.
    pub dropped: Vec<u32>,
    pub elapsed: Duration,
}

/// Everything needed to continue a federation where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub round: u64,
    pub theta: ParamVector,
    pub opt: ServerOptState,
    /// `(stream, counter)` for every generator the loop owns.
    pub rng_counters: Vec<(u64, u128)>,
}

struct Node {
    id: u32,
    shard: Vec<PatchSet>,
    rng: SeededRng,
}

pub struct Federation {
    cfg: FederationConfig,
    nodes: Vec<Node>,
    theta: ParamVector,
    opt: ServerOptState,
    fault_rng: SeededRng,
    network_rng: SeededRng,
    eval: Vec<(PatchSet, MaskSet)>,
    round: u64,
}

impl Federation {
    pub fn new(cfg: FederationConfig, data: &FederationData) -> Result<Self> {
        cfg.validate()?;
        let split = &data.split;
        if split.num_clients() != cfg.num_clients {
            return Err(Error::invalid(format!(
                "split has {} clients, config has {}",
                split.num_clients(),
                cfg.num_clients
            )));
        }
        let nodes = (0..split.num_nodes() as u32)
            .map(|id| {
                let ids = split.node(id).expect("node in range");
                if ids.is_empty() {
                    return Err(Error::invalid(format!("node {id} has an empty shard")));
                }
                let shard = ids
                    .iter()
                    .map(|&sid| {
                        let img = data
                            .samples
                            .get(sid as usize)
                            .ok_or_else(|| Error::invalid(format!("sample id {sid} not in corpus")))?;
                        mae::patchify(img, cfg.model.patch)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Node {
                    id,
                    shard,
                    rng: SeededRng::new(cfg.seed, stream_id(StreamPurpose::NodeTraining, id)),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut eval_rng = SeededRng::for_purpose(cfg.seed, StreamPurpose::EvalBatch, 0);
        let eval = data
            .eval
            .iter()
            .map(|img| {
                let ps = mae::patchify(img, cfg.model.patch)?;
                let m = mae::sample_mask(ps.len(), cfg.trainer.mask_ratio, &mut eval_rng)?;
                Ok((ps, m))
            })
            .collect::<Result<Vec<_>>>()?;
        if eval.is_empty() {
            return Err(Error::invalid("loss-tracking batch is empty"));
        }

        let theta = cfg.initial_params()?;
        Ok(Federation {
            opt: ServerOptState::new(theta.len()),
            theta,
            nodes,
            fault_rng: SeededRng::for_purpose(cfg.seed, StreamPurpose::Fault, 0),
            network_rng: SeededRng::for_purpose(cfg.seed, StreamPurpose::Network, 0),
            eval,
            round: 0,
            cfg,
        })
    }

    pub fn from_config(cfg: FederationConfig) -> Result<Self> {
        let data = FederationData::from_config(&cfg)?;
        Federation::new(cfg, &data)
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Total local samples across nodes.
    pub fn total_samples(&self) -> usize {
        self.nodes.iter().map(|n| n.shard.len()).sum()
    }

    pub fn state(&self) -> FederationState {
        let mut rng_counters: Vec<(u64, u128)> = self.nodes.iter().map(|n| (n.rng.stream(), n.rng.counter())).collect();
        rng_counters.push((self.fault_rng.stream(), self.fault_rng.counter()));
        rng_counters.push((self.network_rng.stream(), self.network_rng.counter()));
        FederationState {
            round: self.round,
            theta: self.theta.clone(),
            opt: self.opt.clone(),
            rng_counters,
        }
    }

    /// Resumes from a saved state taken from a federation with the same config.
    pub fn restore(&mut self, state: &FederationState) -> Result<()> {
        state.theta.check_len(self.theta.len())?;
        state.opt.validate()?;
        state.opt.momentum.check_len(self.theta.len())?;
        let seed = self.cfg.seed;
        let mut rngs: Vec<&mut SeededRng> = self.nodes.iter_mut().map(|n| &mut n.rng).collect();
        rngs.push(&mut self.fault_rng);
        rngs.push(&mut self.network_rng);
        if rngs.len() != state.rng_counters.len() {
            return Err(Error::invalid(format!(
                "state carries {} generators, federation has {}",
                state.rng_counters.len(),
                rngs.len()
            )));
        }
        for (rng, &(stream, counter)) in rngs.into_iter().zip(&state.rng_counters) {
            if rng.stream() != stream {
                return Err(Error::invalid(format!(
                    "generator stream {stream:#x} does not belong to this federation"
                )));
            }
            *rng = SeededRng::at(seed, stream, counter);
        }
        self.theta = state.theta.clone();
        self.opt = state.opt.clone();
        self.round = state.round;
        Ok(())
    }

    /// Mean masked loss of `theta` on the fixed eval batch.
    pub fn eval_loss(&self, theta: &ParamVector) -> Result<f64> {
        let params = MaeParams::unflatten(self.cfg.model, theta.clone())?;
        let batch: Vec<mae::MaskedSample<'_>> = self.eval.iter().map(|(p, m)| (p, m)).collect();
        mae::batch_loss(&params, &batch)
    }

    /// Runs one round and returns its record.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        let t = self.round;
        let shape = self.cfg.model;
        let tcfg = self.cfg.trainer;
        let theta = &self.theta;

        let runs: Vec<Result<ClientUpdate>> = self
            .nodes
            .par_iter_mut()
            .map(|node| {
                trainer::local_train_patches(node.id, theta, &node.shard, shape, &tcfg, &mut node.rng)
                    .map(|r| r.update)
                    .map_err(|e| match e {
                        Error::Domain(what) => Error::Numeric {
                            round: t,
                            what: format!("node {}: {what}", node.id),
                        },
                        other => other,
                    })
            })
            .collect();

        // clients put frames on the wire
        let mut wire_frames: Vec<(u32, Vec<u8>)> = Vec::with_capacity(runs.len());
        let mut dropped = Vec::new();
        for run in runs {
            let update = run?;
            let mut bytes = wire::encode_update(&update, t, PROTOCOL_VERSION)?.to_bytes();
            let drop_draw = self.fault_rng.uniform();
            let corrupt_draw = self.fault_rng.uniform();
            let corrupt_at = self.fault_rng.below(update.delta.len() as u64 * 8) as usize;
            if drop_draw < self.cfg.faults.drop_prob {
                dropped.push(update.node_id);
                continue;
            }
            if corrupt_draw < self.cfg.faults.corrupt_prob {
                bytes[wire::DELTA_OFFSET + corrupt_at] ^= 0x01;
            }
            wire_frames.push((update.node_id, bytes));
        }
        self.network_rng.shuffle(&mut wire_frames);

        // the server receives in whatever order the network delivered
        let mut updates = Vec::with_capacity(wire_frames.len());
        for (_, bytes) in &wire_frames {
            let msg = UpdateMessage::from_bytes(bytes)?;
            updates.push(wire::decode_update(&msg, PROTOCOL_VERSION)?);
        }
        updates.sort_by_key(|u| u.node_id);

        let (delta_norm, next_theta, next_opt) = if updates.is_empty() {
            (0.0, self.theta.clone(), self.opt.clone())
        } else {
            let delta_bar = aggregation::combine_deltas(&updates, self.cfg.strategy.weighting)?;
            let (theta_next, opt_next) = aggregation::step(&self.cfg.strategy, &self.opt, &self.theta, &delta_bar)?;
            (delta_bar.norm(), theta_next, opt_next)
        };

        let global_loss = self.eval_loss(&next_theta).map_err(|e| match e {
            Error::Domain(what) => Error::Numeric { round: t, what },
            other => other,
        })?;
        if !global_loss.is_finite() {
            return Err(Error::Numeric {
                round: t,
                what: "global loss".into(),
            });
        }

        self.theta = next_theta;
        self.opt = next_opt;
        self.round += 1;
        Ok(RoundRecord {
            round: t,
            global_loss,
            node_losses: updates
                .iter()
                .map(|u| (u.node_id, u.final_loss().unwrap_or(f64::NAN)))
                .collect(),
            delta_norm,
            checksum: self.theta.checksum(),
            dropped,
            elapsed: started.elapsed(),
        })
    }

    /// Runs until `rounds` rounds have completed in total.
    pub fn run_until(&mut self, rounds: u64) -> Result<Vec<RoundRecord>> {
        let mut out = Vec::new();
        while self.round < rounds {
            out.push(self.run_round()?);
        }
        Ok(out)
    }

    /// Runs the configured number of rounds.
    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        self.run_until(self.cfg.rounds as u64)
    }

    /// The server's shard, patchified.
    pub fn server_shard(&self) -> &[PatchSet] {
        &self.nodes[SERVER_NODE as usize].shard
    }
}

/// Builds the corpus from `cfg`, runs every round, and returns the final model.
pub fn run_federation(cfg: &FederationConfig) -> Result<(ParamVector, Vec<RoundRecord>)> {
    let mut fed = Federation::from_config(cfg.clone())?;
    let records = fed.run()?;
    Ok((fed.theta().clone(), records))
}
