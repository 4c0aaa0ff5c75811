//! Server-side optimizers: FedAvg, FedAvgM, FedAdam and FedAdagrad.
//!
//! The server treats `-Δ̄` as a pseudo-gradient, so every strategy moves the
//! global model *towards* the clients' averaged progress:
//!
//! | strategy   | state update                                   | model update                     |
//! |------------|------------------------------------------------|----------------------------------|
//! | FedAvg     |                                                | `θ + η·Δ̄`                        |
//! | FedAvgM    | `u ← α·u + Δ̄`                                  | `θ + η·u`                        |
//! | FedAdam    | `m ← β1·m + (1-β1)·Δ̄`, `v ← β2·v + (1-β2)·Δ̄²` | `θ + η·m̂/(√v + ε)`, `m̂ = m/(1-β1^(t+1))` |
//! | FedAdagrad | `m ← β1·m + (1-β1)·Δ̄`, `v ← v + Δ̄²`           | `θ + η·m/√(v + ε)`               |
//!
//! Only the first moment of FedAdam is bias-corrected, and the two adaptive
//! strategies place `ε` differently. Setting `literal_signs` flips every model
//! update to `θ - …`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ParamVector;
use crate::trainer::ClientUpdate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    FedAvg,
    FedAvgM,
    FedAdam,
    FedAdagrad,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::FedAvg,
        StrategyKind::FedAvgM,
        StrategyKind::FedAdam,
        StrategyKind::FedAdagrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedAvgM => "fedavgm",
            StrategyKind::FedAdam => "fedadam",
            StrategyKind::FedAdagrad => "fedadagrad",
        }
    }

    /// Default server learning rate for this kind.
    pub fn default_server_lr(self) -> f64 {
        match self {
            StrategyKind::FedAvg | StrategyKind::FedAvgM => 1.0,
            StrategyKind::FedAdam | StrategyKind::FedAdagrad => 1e-2,
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

/// How client deltas are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Uniform,
    SampleWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub server_lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weighting: Weighting,
    /// Subtract the server step instead of adding it.
    pub literal_signs: bool,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Strategy {
            kind,
            server_lr: kind.default_server_lr(),
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weighting: Weighting::SampleWeighted,
            literal_signs: false,
        }
    }

    pub fn fedavg() -> Self {
        Strategy::new(StrategyKind::FedAvg)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must lie in [0, 1)")))
            }
        };
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "server learning rate {} must be positive",
                self.server_lr
            )));
        }
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }

    fn sign(&self) -> f64 {
        if self.literal_signs {
            -1.0
        } else {
            1.0
        }
    }
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::fedavg()
    }
}

/// Persistent optimizer state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptState {
    pub round: u64,
    pub momentum: ParamVector,
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
}

impl ServerOptState {
    pub fn new(len: usize) -> Self {
        ServerOptState {
            round: 0,
            momentum: ParamVector::zeros(len),
            first_moment: ParamVector::zeros(len),
            second_moment: ParamVector::zeros(len),
        }
    }

    pub fn len(&self) -> usize {
        self.momentum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.momentum.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.momentum.len();
        self.first_moment.check_len(n)?;
        self.second_moment.check_len(n)?;
        if self.second_moment.as_slice().iter().any(|v| *v < 0.0) {
            return Err(Error::Domain("second moment has a negative entry".into()));
        }
        Ok(())
    }
}

/// Averages client deltas, sorted by node id first so arrival order is irrelevant.
pub fn combine_deltas(updates: &[ClientUpdate], weighting: Weighting) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::invalid("no client updates to combine"));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.node_id);
    let deltas: Vec<ParamVector> = sorted.iter().map(|u| u.delta.clone()).collect();
    let weights: Vec<f64> = match weighting {
        Weighting::Uniform => vec![1.0; sorted.len()],
        Weighting::SampleWeighted => sorted.iter().map(|u| u.num_samples as f64).collect(),
    };
    ParamVector::weighted_mean(&deltas, &weights)
}

/// One server optimizer step. Inputs are left untouched.
pub fn step(
    strategy: &Strategy,
    state: &ServerOptState,
    theta: &ParamVector,
    delta_bar: &ParamVector,
) -> Result<(ParamVector, ServerOptState)> {
    state.validate()?;
    theta.check_len(state.len())?;
    delta_bar.check_len(state.len())?;
    if !delta_bar.is_finite() {
        return Err(Error::Numeric {
            round: state.round,
            what: "aggregated delta".into(),
        });
    }

    let s = strategy.sign() * strategy.server_lr;
    let d = delta_bar.as_slice();
    let th = theta.as_slice();
    let mut next = state.clone();
    next.round = state.round + 1;

    let theta_next: Vec<f64> = match strategy.kind {
        StrategyKind::FedAvg => th.iter().zip(d).map(|(t, di)| t + s * di).collect(),
        StrategyKind::FedAvgM => {
            let a = strategy.momentum;
            let u: Vec<f64> = state
                .momentum
                .as_slice()
                .iter()
                .zip(d)
                .map(|(u, di)| a * u + di)
                .collect();
            let out = th.iter().zip(&u).map(|(t, ui)| t + s * ui).collect();
            next.momentum = numeric(u, state.round, "momentum buffer")?;
            out
        }
        StrategyKind::FedAdam => {
            let (b1, b2, eps) = (strategy.beta1, strategy.beta2, strategy.epsilon);
            let m: Vec<f64> = state
                .first_moment
                .as_slice()
                .iter()
                .zip(d)
                .map(|(m, di)| b1 * m + (1.0 - b1) * di)
                .collect();
            let v: Vec<f64> = state
                .second_moment
                .as_slice()
                .iter()
                .zip(d)
                .map(|(v, di)| b2 * v + (1.0 - b2) * di * di)
                .collect();
            let correction = 1.0 - b1.powi(exponent(next.round)?);
            let out = th
                .iter()
                .zip(&m)
                .zip(&v)
                .map(|((t, mi), vi)| t + s * (mi / correction) / (vi.sqrt() + eps))
                .collect();
            next.first_moment = numeric(m, state.round, "first moment")?;
            next.second_moment = numeric(v, state.round, "second moment")?;
            out
        }
        StrategyKind::FedAdagrad => {
            let (b1, eps) = (strategy.beta1, strategy.epsilon);
            let m: Vec<f64> = state
                .first_moment
                .as_slice()
                .iter()
                .zip(d)
                .map(|(m, di)| b1 * m + (1.0 - b1) * di)
                .collect();
            let v: Vec<f64> = state
                .second_moment
                .as_slice()
                .iter()
                .zip(d)
                .map(|(v, di)| v + di * di)
                .collect();
            let out = th
                .iter()
                .zip(&m)
                .zip(&v)
                .map(|((t, mi), vi)| t + s * mi / (vi + eps).sqrt())
                .collect();
            next.first_moment = numeric(m, state.round, "first moment")?;
            next.second_moment = numeric(v, state.round, "second moment")?;
            out
        }
    };
    Ok((numeric(theta_next, state.round, "global model")?, next))
}

fn exponent(round: u64) -> Result<i32> {
    i32::try_from(round).map_err(|_| Error::invalid(format!("round {round} too large for bias correction")))
}

fn numeric(values: Vec<f64>, round: u64, what: &str) -> Result<ParamVector> {
    ParamVector::new(values).map_err(|_| Error::Numeric {
        round,
        what: what.to_string(),
    })
}
