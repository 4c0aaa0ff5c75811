//! Local SGD at a single node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{self, ImageSample, MaeParams, MaeShape, MaskSet, PatchSet};
use crate::numeric::ParamVector;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub local_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            local_steps: 5,
            learning_rate: 0.05,
            batch_size: 16,
            mask_ratio: 0.6,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::invalid("local steps must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        Ok(())
    }
}

/// One node's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub node_id: u32,
    pub num_samples: u64,
    pub delta: ParamVector,
    pub loss_trace: Vec<f64>,
}

impl ClientUpdate {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

/// A local run plus the per-step gradient norms it took.
#[derive(Debug, Clone)]
pub struct LocalRun {
    pub update: ClientUpdate,
    pub grad_norms: Vec<f64>,
    /// Local parameters after the last step.
    pub final_params: ParamVector,
}

/// Runs `cfg.local_steps` SGD steps from `theta` on `data`.
///
/// The node's data is shuffled once with `rng` and then cycled in minibatches
/// of `min(batch_size, |data|)`; every sample in every step draws a fresh mask.
/// Trace entry `k` is the loss after step `k` on the first step's batch and masks.
/// Parameters are carried as `theta + delta`, so adding the returned delta to
/// `theta` gives the final local model exactly.
pub fn local_train(
    node_id: u32,
    theta: &ParamVector,
    data: &[ImageSample],
    shape: MaeShape,
    cfg: &TrainerConfig,
    rng: &mut SeededRng,
) -> Result<ClientUpdate> {
    let patches = data
        .iter()
        .map(|img| mae::patchify(img, shape.patch))
        .collect::<Result<Vec<_>>>()?;
    local_train_patches(node_id, theta, &patches, shape, cfg, rng).map(|r| r.update)
}

/// [`local_train`] over pre-patchified data.
pub fn local_train_patches(
    node_id: u32,
    theta: &ParamVector,
    data: &[PatchSet],
    shape: MaeShape,
    cfg: &TrainerConfig,
    rng: &mut SeededRng,
) -> Result<LocalRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid(format!("node {node_id} has no local data")));
    }
    theta.check_len(shape.num_params())?;

    let n = data.len();
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);

    let theta_s = theta.as_slice();
    let mut delta = vec![0.0; theta.len()];
    let mut working = theta_s.to_vec();
    let mut loss_trace = Vec::with_capacity(cfg.local_steps);
    let mut monitor: Vec<(usize, MaskSet)> = Vec::new();
    let mut grad_norms = Vec::with_capacity(cfg.local_steps);

    for step in 0..cfg.local_steps {
        for ((w, t), d) in working.iter_mut().zip(theta_s).zip(&delta) {
            *w = t + d;
        }
        let params = MaeParams::unflatten(shape, ParamVector::from_vec_unchecked(working.clone()))?;
        let picks: Vec<usize> = (0..batch).map(|j| order[(step * batch + j) % n]).collect();
        let masks = picks
            .iter()
            .map(|&i| mae::sample_mask(data[i].len(), cfg.mask_ratio, rng))
            .collect::<Result<Vec<MaskSet>>>()?;
        let samples: Vec<mae::MaskedSample<'_>> = picks.iter().zip(&masks).map(|(&i, m)| (&data[i], m)).collect();
        let g = mae::grad(&params, &samples)?;
        grad_norms.push(g.norm());
        for (d, gi) in delta.iter_mut().zip(g.as_slice()) {
            *d -= cfg.learning_rate * gi;
        }
        if step == 0 {
            monitor = picks.iter().copied().zip(masks).collect();
        }
        for ((w, t), d) in working.iter_mut().zip(theta_s).zip(&delta) {
            *w = t + d;
        }
        let params = MaeParams::unflatten(shape, ParamVector::from_vec_unchecked(working.clone()))?;
        let probe: Vec<mae::MaskedSample<'_>> = monitor.iter().map(|(i, m)| (&data[*i], m)).collect();
        loss_trace.push(mae::batch_loss(&params, &probe)?);
    }
    let delta =
        ParamVector::new(delta).map_err(|_| Error::Domain(format!("node {node_id} produced a non-finite delta")))?;
    Ok(LocalRun {
        final_params: ParamVector::new(working)?,
        update: ClientUpdate {
            node_id,
            num_samples: n as u64,
            delta,
            loss_trace,
        },
        grad_norms,
    })
}

/// `theta + delta`, element by element; the trainer's own final parameters.
pub fn apply_delta(theta: &ParamVector, delta: &ParamVector) -> Result<ParamVector> {
    delta.check_len(theta.len())?;
    ParamVector::new(
        theta
            .as_slice()
            .iter()
            .zip(delta.as_slice())
            .map(|(t, d)| t + d)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::Domain;

    fn toy_data(n: usize, seed: u64) -> Vec<ImageSample> {
        let mut rng = SeededRng::new(seed, 99);
        (0..n)
            .map(|_| {
                let px = (0..64).map(|_| rng.uniform()).collect();
                ImageSample::new(px, 8, 8, Domain::A, 0).unwrap()
            })
            .collect()
    }

    fn shape() -> MaeShape {
        MaeShape {
            patch: 2,
            hidden: 8,
            latent: 4,
        }
    }

    fn theta(seed: u64) -> ParamVector {
        MaeParams::init(shape(), 0.3, &mut SeededRng::new(seed, 0))
            .unwrap()
            .flatten()
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let cfg = TrainerConfig {
            local_steps: 1,
            learning_rate: 0.0,
            ..TrainerConfig::default()
        };
        let u = local_train(3, &theta(1), &toy_data(5, 1), shape(), &cfg, &mut SeededRng::new(1, 1)).unwrap();
        assert!(u.delta.as_slice().iter().all(|d| *d == 0.0));
        assert_eq!(u.node_id, 3);
        assert_eq!(u.num_samples, 5);
        assert_eq!(u.loss_trace.len(), 1);
    }

    #[test]
    fn empty_data_rejected() {
        let err = local_train(
            0,
            &theta(1),
            &[],
            shape(),
            &TrainerConfig::default(),
            &mut SeededRng::new(0, 0),
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = TrainerConfig {
            local_steps: 4,
            batch_size: 3,
            ..TrainerConfig::default()
        };
        let data = toy_data(7, 2);
        let a = local_train(0, &theta(2), &data, shape(), &cfg, &mut SeededRng::new(5, 5)).unwrap();
        let b = local_train(0, &theta(2), &data, shape(), &cfg, &mut SeededRng::new(5, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn delta_bounded_by_step_norms() {
        let cfg = TrainerConfig {
            local_steps: 6,
            batch_size: 2,
            learning_rate: 0.2,
            ..TrainerConfig::default()
        };
        let data = toy_data(5, 3);
        let patches: Vec<_> = data.iter().map(|d| mae::patchify(d, 2).unwrap()).collect();
        let run = local_train_patches(0, &theta(3), &patches, shape(), &cfg, &mut SeededRng::new(3, 3)).unwrap();
        let bound = cfg.local_steps as f64 * cfg.learning_rate * run.grad_norms.iter().cloned().fold(0.0, f64::max);
        assert!(run.update.delta.norm() <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn two_step_matches_hand_rolled_sgd() {
        let cfg = TrainerConfig {
            local_steps: 2,
            batch_size: 4,
            learning_rate: 0.1,
            ..TrainerConfig::default()
        };
        let data = toy_data(4, 4);
        let patches: Vec<_> = data.iter().map(|d| mae::patchify(d, 2).unwrap()).collect();
        let t0 = theta(4);
        let u = local_train(0, &t0, &data, shape(), &cfg, &mut SeededRng::new(8, 8)).unwrap();

        // replay the documented discipline: one shuffle, then a mask per sample per step
        let mut rng = SeededRng::new(8, 8);
        let mut order: Vec<usize> = (0..4).collect();
        rng.shuffle(&mut order);
        let mut params = t0.as_slice().to_vec();
        let mut gsum = vec![0.0; params.len()];
        for _ in 0..2 {
            let masks: Vec<_> = order
                .iter()
                .map(|_| mae::sample_mask(16, 0.6, &mut rng).unwrap())
                .collect();
            let batch: Vec<_> = order.iter().zip(&masks).map(|(&i, m)| (&patches[i], m)).collect();
            let p = MaeParams::unflatten(shape(), ParamVector::new(params.clone()).unwrap()).unwrap();
            let g = mae::grad(&p, &batch).unwrap();
            for ((w, s), gi) in params.iter_mut().zip(gsum.iter_mut()).zip(g.as_slice()) {
                *w -= cfg.learning_rate * gi;
                *s += gi;
            }
        }
        for (d, s) in u.delta.as_slice().iter().zip(&gsum) {
            let want = -cfg.learning_rate * s;
            assert!((d - want).abs() <= 1e-12 * want.abs().max(1e-6), "{d} vs {want}");
        }
    }

    #[test]
    fn delta_reproduces_final_parameters() {
        let cfg = TrainerConfig {
            local_steps: 3,
            batch_size: 2,
            learning_rate: 0.3,
            ..TrainerConfig::default()
        };
        let data = toy_data(3, 6);
        let patches: Vec<_> = data.iter().map(|d| mae::patchify(d, 2).unwrap()).collect();
        let t0 = theta(6);
        let run = local_train_patches(0, &t0, &patches, shape(), &cfg, &mut SeededRng::new(1, 2)).unwrap();
        assert_eq!(apply_delta(&t0, &run.update.delta).unwrap(), run.final_params);
        assert_ne!(run.final_params, t0);
    }

    #[test]
    fn small_step_loss_trace_mostly_non_increasing() {
        let shape = MaeShape::default();
        let mut ok = 0;
        let trials = 20;
        for trial in 0..trials {
            let t0 = MaeParams::init(shape, 0.05, &mut SeededRng::new(trial, 0))
                .unwrap()
                .flatten();
            let mut rng = SeededRng::new(trial, 1);
            let data: Vec<ImageSample> = (0..6)
                .map(|_| ImageSample::new((0..256).map(|_| rng.uniform()).collect(), 16, 16, Domain::A, 0).unwrap())
                .collect();
            let cfg = TrainerConfig {
                local_steps: 5,
                batch_size: 6,
                learning_rate: 1e-3,
                ..TrainerConfig::default()
            };
            let patches: Vec<_> = data.iter().map(|d| mae::patchify(d, 4).unwrap()).collect();
            let u = local_train_patches(0, &t0, &patches, shape, &cfg, &mut SeededRng::new(trial, 2)).unwrap();
            let trace = &u.update.loss_trace;
            assert_eq!(trace.len(), 5);
            let mono = trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
            if mono {
                ok += 1;
            }
        }
        assert!(
            ok as f64 >= 0.8 * trials as f64,
            "only {ok}/{trials} traces non-increasing"
        );
    }
}
