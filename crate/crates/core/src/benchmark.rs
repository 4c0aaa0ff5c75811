//! Lower bound, upper bound and federated pretraining under one step budget,
//! plus a frozen-encoder classification probe.
//!
//! Every kind trains for `R·K` local steps per node: the lower bound is a
//! single node on the server shard, the upper bound a single node on all
//! shards pooled, and FedFound the configured federation.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{Strategy, StrategyKind};
use crate::error::{Error, Result};
use crate::mae::{self, ImageSample, MaeParams, MaeShape};
use crate::numeric::ParamVector;
use crate::orchestrator::{Federation, FederationConfig, FederationData, RoundRecord, SplitMode};
use crate::partition::SplitAssignment;
use crate::rng::{SeededRng, StreamPurpose};
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundKind {
    Lower,
    Upper,
    FedFound(Strategy),
}

impl BoundKind {
    /// `lower`, `upper`, or `fedfound-<strategy>`.
    pub fn label(&self) -> String {
        match self {
            BoundKind::Lower => "lower".into(),
            BoundKind::Upper => "upper".into(),
            BoundKind::FedFound(s) => format!("fedfound-{}", s.kind.name()),
        }
    }

    /// Parses a label; a FedFound label takes the strategy's default hyperparameters.
    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "lower" => Ok(BoundKind::Lower),
            "upper" => Ok(BoundKind::Upper),
            other => {
                let kind: StrategyKind = other
                    .strip_prefix("fedfound-")
                    .ok_or_else(|| Error::invalid(format!("unknown bound kind {other:?}")))?
                    .parse()?;
                Ok(BoundKind::FedFound(Strategy::new(kind)))
            }
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The federation that realizes `kind` on `data`.
pub fn bound_setup(
    kind: BoundKind,
    cfg: &FederationConfig,
    data: &FederationData,
) -> Result<(FederationConfig, FederationData)> {
    cfg.validate()?;
    let single = |server: Vec<u64>| {
        let mut leftover: Vec<u64> = Vec::new();
        let held: std::collections::HashSet<u64> = server.iter().copied().collect();
        for id in data
            .split
            .server
            .iter()
            .chain(data.split.clients.iter().flatten())
            .chain(&data.split.leftover)
        {
            if !held.contains(id) {
                leftover.push(*id);
            }
        }
        let split = SplitAssignment {
            server,
            clients: Vec::new(),
            leftover,
        };
        let c = FederationConfig {
            num_clients: 0,
            strategy: Strategy::fedavg(),
            split: SplitMode::Custom(split.clone()),
            faults: Default::default(),
            ..cfg.clone()
        };
        (c, data.with_split(split))
    };
    Ok(match kind {
        BoundKind::Lower => single(data.split.server.clone()),
        BoundKind::Upper => single(
            data.split
                .server
                .iter()
                .chain(data.split.clients.iter().flatten())
                .copied()
                .collect(),
        ),
        BoundKind::FedFound(strategy) => (
            FederationConfig {
                strategy,
                ..cfg.clone()
            },
            data.clone(),
        ),
    })
}

/// Output of one bound's pretraining run.
#[derive(Debug, Clone)]
pub struct BoundRun {
    pub kind: BoundKind,
    pub theta: ParamVector,
    pub records: Vec<RoundRecord>,
    /// Global model after each requested round (0 is the initialization).
    pub snapshots: BTreeMap<u64, ParamVector>,
    /// Local gradient steps taken by each node.
    pub steps_per_node: u64,
}

/// Pretrains `kind` for `cfg.rounds` rounds, keeping snapshots at `keep`.
pub fn train_bound_on(
    kind: BoundKind,
    cfg: &FederationConfig,
    data: &FederationData,
    keep: &[u64],
) -> Result<BoundRun> {
    let (bcfg, bdata) = bound_setup(kind, cfg, data)?;
    let mut fed = Federation::new(bcfg, &bdata)?;
    let mut snapshots = BTreeMap::new();
    let mut records = Vec::with_capacity(cfg.rounds);
    let rounds = cfg.rounds as u64;
    if keep.contains(&0) {
        snapshots.insert(0, fed.theta().clone());
    }
    while fed.round() < rounds {
        records.push(fed.run_round()?);
        if keep.contains(&fed.round()) {
            snapshots.insert(fed.round(), fed.theta().clone());
        }
    }
    Ok(BoundRun {
        kind,
        theta: fed.theta().clone(),
        records,
        snapshots,
        steps_per_node: rounds * cfg.trainer.local_steps as u64,
    })
}

/// Pretrains `kind` on the corpus described by `cfg`.
pub fn train_bound(kind: BoundKind, cfg: &FederationConfig) -> Result<ParamVector> {
    let data = FederationData::from_config(cfg)?;
    train_bound_on(kind, cfg, &data, &[]).map(|r| r.theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classifier {
    Linear,
    Mlp,
}

impl Classifier {
    pub fn name(self) -> &'static str {
        match self {
            Classifier::Linear => "linear",
            Classifier::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Classifier::Linear),
            "mlp" => Ok(Classifier::Mlp),
            _ => Err(Error::invalid(format!("unknown classifier {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub classifier: Classifier,
    /// Full-batch gradient epochs; the best one on validation is kept.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Hidden width of the MLP.
    pub hidden: usize,
    /// Labeled probe images per class, domain A and domain B.
    pub per_class: [usize; 2],
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            classifier: Classifier::Linear,
            epochs: 300,
            learning_rate: 0.5,
            hidden: 32,
            per_class: [60, 60],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("probe needs at least one epoch"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("probe learning rate must be positive"));
        }
        if self.classifier == Classifier::Mlp && self.hidden == 0 {
            return Err(Error::invalid("MLP probe needs a hidden layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub kind: Option<BoundKind>,
    pub classifier: Classifier,
    pub accuracy: f64,
    /// Distinct labels in ascending order; rows and columns of `confusion`.
    pub labels: Vec<usize>,
    pub per_class_accuracy: Vec<f64>,
    /// Test-set counts, `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub best_epoch: usize,
    pub seed: u64,
}

/// Per-class 70/15/15 split with at least one sample in each part.
fn stratify(labels: &[usize], classes: &[usize], rng: &mut SeededRng) -> Result<[Vec<usize>; 3]> {
    let mut parts: [Vec<usize>; 3] = Default::default();
    for &c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let n = idx.len();
        if n < 3 {
            return Err(Error::invalid(format!(
                "class {c} has {n} samples; at least 3 are needed to stratify"
            )));
        }
        rng.shuffle(&mut idx);
        let n_val = ((0.15 * n as f64).round() as usize).max(1);
        let n_test = ((0.15 * n as f64).round() as usize).max(1);
        let n_train = n - n_val - n_test;
        if n_train == 0 {
            return Err(Error::invalid(format!("class {c} is too small to stratify")));
        }
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    Ok(parts)
}

/// Softmax classifier, optionally behind one tanh hidden layer. Weights are
/// row-major: `w1` is hidden×dim, `w2` is classes×(hidden or dim).
struct Net {
    dim: usize,
    hidden: Option<usize>,
    classes: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Net {
    fn new(dim: usize, hidden: Option<usize>, classes: usize, rng: &mut SeededRng) -> Self {
        let (w1, b1, head_in) = match hidden {
            Some(h) => {
                let s = (1.0 / dim as f64).sqrt();
                (
                    (0..h * dim).map(|_| rng.uniform_range(-s, s)).collect(),
                    vec![0.0; h],
                    h,
                )
            }
            None => (Vec::new(), Vec::new(), dim),
        };
        Net {
            dim,
            hidden,
            classes,
            w1,
            b1,
            w2: vec![0.0; classes * head_in],
            b2: vec![0.0; classes],
        }
    }

    fn head_in(&self) -> usize {
        self.hidden.unwrap_or(self.dim)
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        match self.hidden {
            Some(h) => (0..h)
                .map(|j| {
                    let row = &self.w1[j * self.dim..(j + 1) * self.dim];
                    (self.b1[j] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()).tanh()
                })
                .collect(),
            None => x.to_vec(),
        }
    }

    fn logits(&self, a: &[f64]) -> Vec<f64> {
        let k = self.head_in();
        (0..self.classes)
            .map(|c| {
                self.b2[c]
                    + self.w2[c * k..(c + 1) * k]
                        .iter()
                        .zip(a)
                        .map(|(w, ai)| w * ai)
                        .sum::<f64>()
            })
            .collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(&self.hidden_act(x));
        let mut best = 0;
        for (c, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = c;
            }
        }
        best
    }

    /// One full-batch gradient step on mean cross-entropy.
    fn step(&mut self, xs: &[&[f64]], ys: &[usize], lr: f64) {
        let k = self.head_in();
        let mut gw2 = vec![0.0; self.w2.len()];
        let mut gb2 = vec![0.0; self.classes];
        let mut gw1 = vec![0.0; self.w1.len()];
        let mut gb1 = vec![0.0; self.b1.len()];
        let inv = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let a = self.hidden_act(x);
            let z = self.logits(&a);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let total: f64 = e.iter().sum();
            let mut da = vec![0.0; k];
            for c in 0..self.classes {
                let dz = (e[c] / total - if c == y { 1.0 } else { 0.0 }) * inv;
                gb2[c] += dz;
                for j in 0..k {
                    gw2[c * k + j] += dz * a[j];
                    da[j] += dz * self.w2[c * k + j];
                }
            }
            if self.hidden.is_some() {
                for j in 0..k {
                    let dh = da[j] * (1.0 - a[j] * a[j]);
                    gb1[j] += dh;
                    for (g, xi) in gw1[j * self.dim..(j + 1) * self.dim].iter_mut().zip(x.iter()) {
                        *g += dh * xi;
                    }
                }
            }
        }
        for (w, g) in self.w2.iter_mut().zip(&gw2) {
            *w -= lr * g;
        }
        for (w, g) in self.b2.iter_mut().zip(&gb2) {
            *w -= lr * g;
        }
        for (w, g) in self.w1.iter_mut().zip(&gw1) {
            *w -= lr * g;
        }
        for (w, g) in self.b1.iter_mut().zip(&gb1) {
            *w -= lr * g;
        }
    }
}

/// Probes precomputed features. `features[i]` belongs to `labels[i]`.
pub fn probe_features(features: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: features.len(),
        });
    }
    let dim = features.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::invalid("features must be non-empty and of equal length"));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("probe needs at least two classes"));
    }
    let class_index = |l: usize| classes.binary_search(&l).expect("label is known");
    let ys: Vec<usize> = labels.iter().map(|&l| class_index(l)).collect();

    let mut rng = SeededRng::for_purpose(seed, StreamPurpose::Probe, 0);
    let [train, val, test] = stratify(labels, &classes, &mut rng)?;

    // standardize with training statistics only
    let n_train = train.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| train.iter().map(|&i| features[i][j]).sum::<f64>() / n_train)
        .collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let var = train.iter().map(|&i| (features[i][j] - mean[j]).powi(2)).sum::<f64>() / n_train;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();

    let hidden = match cfg.classifier {
        Classifier::Linear => None,
        Classifier::Mlp => Some(cfg.hidden),
    };
    let mut net = Net::new(dim, hidden, classes.len(), &mut rng);
    let train_x: Vec<&[f64]> = train.iter().map(|&i| x[i].as_slice()).collect();
    let train_y: Vec<usize> = train.iter().map(|&i| ys[i]).collect();
    let correct = |net: &Net, part: &[usize]| part.iter().filter(|&&i| net.predict(&x[i]) == ys[i]).count();

    let mut best_val = correct(&net, &val);
    let mut best_epoch = 0;
    let mut confusion = confusion_of(&net, &x, &ys, &test, classes.len());
    for epoch in 1..=cfg.epochs {
        net.step(&train_x, &train_y, cfg.learning_rate);
        let v = correct(&net, &val);
        if v > best_val {
            best_val = v;
            best_epoch = epoch;
            confusion = confusion_of(&net, &x, &ys, &test, classes.len());
        }
    }

    let hits: usize = (0..classes.len()).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| row[c] as f64 / row.iter().sum::<usize>().max(1) as f64)
        .collect();
    Ok(ProbeResult {
        kind: None,
        classifier: cfg.classifier,
        accuracy: hits as f64 / test.len() as f64,
        labels: classes,
        per_class_accuracy,
        confusion,
        train_size: train.len(),
        val_size: val.len(),
        test_size: test.len(),
        best_epoch,
        seed,
    })
}

fn confusion_of(net: &Net, x: &[Vec<f64>], ys: &[usize], part: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for &i in part {
        m[ys[i]][net.predict(&x[i])] += 1;
    }
    m
}

/// Frozen encoder features of every image.
pub fn features(theta: &ParamVector, shape: MaeShape, images: &[ImageSample]) -> Result<Vec<Vec<f64>>> {
    let params = MaeParams::unflatten(shape, theta.clone())?;
    images
        .par_iter()
        .map(|img| mae::encode(&params, &mae::patchify(img, shape.patch)?))
        .collect()
}

/// Encodes `labeled` with the frozen encoder `theta` and probes the features.
pub fn probe(
    theta: &ParamVector,
    shape: MaeShape,
    labeled: &[ImageSample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let feats = features(theta, shape, labeled)?;
    let labels: Vec<usize> = labeled.iter().map(|s| s.label).collect();
    probe_features(&feats, &labels, cfg, seed)
}

/// The labeled probe set for `cfg`'s corpus: fresh draws from the same templates.
pub fn probe_set(cfg: &FederationConfig, probe: &ProbeConfig) -> Result<Vec<ImageSample>> {
    synth::generate_split(&cfg.synth, 1, probe.per_class)
}

/// One point of an accuracy-versus-round curve.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub round: u64,
    pub kind: BoundKind,
    pub result: ProbeResult,
}

/// Probes stored snapshots at `rounds`.
pub fn probe_snapshots(
    kind: BoundKind,
    snapshots: &BTreeMap<u64, ParamVector>,
    rounds: &[u64],
    shape: MaeShape,
    labeled: &[ImageSample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    rounds
        .iter()
        .map(|r| {
            let theta = snapshots
                .get(r)
                .ok_or_else(|| Error::NotFound(format!("no {kind} checkpoint at round {r}")))?;
            let mut result = probe(theta, shape, labeled, cfg, seed)?;
            result.kind = Some(kind);
            Ok(SweepPoint {
                round: *r,
                kind,
                result,
            })
        })
        .collect()
}

/// Pretrains the lower bound, the upper bound and FedFound with `cfg.strategy`,
/// then probes each at `checkpoints`.
pub fn sweep_epochs(cfg: &FederationConfig, checkpoints: &[u64], probe_cfg: &ProbeConfig) -> Result<Vec<SweepPoint>> {
    if let Some(r) = checkpoints.iter().find(|&&r| r > cfg.rounds as u64) {
        return Err(Error::NotFound(format!(
            "checkpoint round {r} is beyond the {} configured rounds",
            cfg.rounds
        )));
    }
    let data = FederationData::from_config(cfg)?;
    let labeled = probe_set(cfg, probe_cfg)?;
    let kinds = [BoundKind::Lower, BoundKind::Upper, BoundKind::FedFound(cfg.strategy)];
    let runs = kinds
        .into_par_iter()
        .map(|k| train_bound_on(k, cfg, &data, checkpoints))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for run in &runs {
        out.extend(probe_snapshots(
            run.kind,
            &run.snapshots,
            checkpoints,
            cfg.model,
            &labeled,
            probe_cfg,
            cfg.seed,
        )?);
    }
    Ok(out)
}

/// Final probe accuracy of each bound kind for one master seed.
pub fn compare_bounds(
    cfg: &FederationConfig,
    kinds: &[BoundKind],
    probe_cfg: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    let data = FederationData::from_config(cfg)?;
    let labeled = probe_set(cfg, probe_cfg)?;
    kinds
        .par_iter()
        .map(|&k| {
            let theta = train_bound_on(k, cfg, &data, &[])?.theta;
            let mut r = probe(&theta, cfg.model, &labeled, probe_cfg, cfg.seed)?;
            r.kind = Some(k);
            Ok(r)
        })
        .collect()
}

/// First round at which `curve` reaches `fraction` of its final value.
pub fn rounds_to_fraction(curve: &[(u64, f64)], fraction: f64) -> Option<u64> {
    let last = curve.last()?.1;
    curve.iter().find(|(_, a)| *a >= fraction * last).map(|(r, _)| *r)
}
