//! FedOpt: server-side first-order optimization of the pseudo-gradient
//! Δ = θ_prev − weighted_mean(θ_c). Momentum gives FedAvgM; the adaptive
//! variant is Adam-style with bias correction.

use crate::config::{AlgorithmConfig, ServerOptimizerKind};
use crate::error::Result;
use crate::models::ModelParams;
use crate::protocol::{aggregate, ClientUpdate, ServerBehavior, ServerCtx};

use super::registry::{reject_param, AlgorithmDescriptor};

pub const DEFAULT_SERVER_LR: f64 = 1.0;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// The server-side update rule applied to the pseudo-gradient.
pub enum ServerOptimizer {
    Momentum {
        beta: f64,
        velocity: Option<ModelParams>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        step: usize,
        first: Option<ModelParams>,
        second: Option<ModelParams>,
    },
}

impl ServerOptimizer {
    /// θ ← optimizer_step(θ_prev, Δ) with server learning rate `lr`.
    pub fn step(
        &mut self,
        prev: &ModelParams,
        pseudo_grad: &ModelParams,
        lr: f64,
    ) -> Result<ModelParams> {
        match self {
            ServerOptimizer::Momentum { beta, velocity } => {
                let v = velocity.get_or_insert_with(|| pseudo_grad.zeros_like());
                v.scale(*beta);
                v.scaled_add(1.0, pseudo_grad)?;
                let mut next = prev.clone();
                next.scaled_add(-lr, v)?;
                Ok(next)
            }
            ServerOptimizer::Adam {
                beta1,
                beta2,
                epsilon,
                step,
                first,
                second,
            } => {
                *step += 1;
                let m = first.get_or_insert_with(|| pseudo_grad.zeros_like());
                m.scale(*beta1);
                m.scaled_add(1.0 - *beta1, pseudo_grad)?;
                let v = second.get_or_insert_with(|| pseudo_grad.zeros_like());
                v.scale(*beta2);
                let squared = pseudo_grad.zip_map(pseudo_grad, |a, b| a * b)?;
                v.scaled_add(1.0 - *beta2, &squared)?;

                let bias1 = 1.0 - beta1.powi(*step as i32);
                let bias2 = 1.0 - beta2.powi(*step as i32);
                let eps = *epsilon;
                let direction =
                    m.zip_map(v, |mi, vi| (mi / bias1) / ((vi / bias2).sqrt() + eps))?;
                let mut next = prev.clone();
                next.scaled_add(-lr, &direction)?;
                Ok(next)
            }
        }
    }
}

pub struct FedOptServer {
    learning_rate: f64,
    optimizer: ServerOptimizer,
}

impl FedOptServer {
    pub fn new(learning_rate: f64, optimizer: ServerOptimizer) -> Self {
        Self {
            learning_rate,
            optimizer,
        }
    }
}

impl ServerBehavior for FedOptServer {
    fn aggregate(&mut self, ctx: &mut ServerCtx, updates: Vec<ClientUpdate>) -> Result<ModelParams> {
        let models: Vec<ModelParams> = updates.iter().map(|u| u.model.clone()).collect();
        let weights: Vec<f64> = updates.iter().map(|u| u.weight).collect();
        let mean = aggregate(&models, &weights)?;
        let pseudo_grad = ctx.global_model.sub(&mean)?;
        self.optimizer
            .step(&ctx.global_model, &pseudo_grad, self.learning_rate)
    }
}

fn validate(cfg: &AlgorithmConfig) -> Result<()> {
    reject_param(&cfg.client.mu, "client.mu", "fedopt")?;
    let kind = cfg
        .server
        .optimizer
        .unwrap_or(ServerOptimizerKind::Momentum);
    match kind {
        ServerOptimizerKind::Momentum => {
            reject_param(&cfg.server.beta1, "server.beta1", "fedopt(momentum)")?;
            reject_param(&cfg.server.beta2, "server.beta2", "fedopt(momentum)")?;
            reject_param(&cfg.server.epsilon, "server.epsilon", "fedopt(momentum)")?;
            if let Some(beta) = cfg.server.momentum {
                if !(0.0..1.0).contains(&beta) {
                    return Err(crate::error::Error::config(
                        "server.momentum",
                        "must be in [0, 1)",
                    ));
                }
            }
        }
        ServerOptimizerKind::Adam => {
            reject_param(&cfg.server.momentum, "server.momentum", "fedopt(adam)")?;
            for (value, key) in [
                (cfg.server.beta1, "server.beta1"),
                (cfg.server.beta2, "server.beta2"),
            ] {
                if let Some(beta) = value {
                    if !(0.0..1.0).contains(&beta) {
                        return Err(crate::error::Error::config(key, "must be in [0, 1)"));
                    }
                }
            }
            if let Some(eps) = cfg.server.epsilon {
                if eps.is_nan() || eps <= 0.0 {
                    return Err(crate::error::Error::config(
                        "server.epsilon",
                        "must be positive",
                    ));
                }
            }
        }
    }
    Ok(())
}

fn make_server(cfg: &AlgorithmConfig) -> Result<Box<dyn ServerBehavior>> {
    let lr = cfg.server.learning_rate.unwrap_or(DEFAULT_SERVER_LR);
    let optimizer = match cfg
        .server
        .optimizer
        .unwrap_or(ServerOptimizerKind::Momentum)
    {
        ServerOptimizerKind::Momentum => ServerOptimizer::Momentum {
            beta: cfg.server.momentum.unwrap_or(DEFAULT_MOMENTUM),
            velocity: None,
        },
        ServerOptimizerKind::Adam => ServerOptimizer::Adam {
            beta1: cfg.server.beta1.unwrap_or(DEFAULT_BETA1),
            beta2: cfg.server.beta2.unwrap_or(DEFAULT_BETA2),
            epsilon: cfg.server.epsilon.unwrap_or(DEFAULT_EPSILON),
            step: 0,
            first: None,
            second: None,
        },
    };
    Ok(Box::new(FedOptServer::new(lr, optimizer)))
}

pub fn descriptor() -> AlgorithmDescriptor {
    AlgorithmDescriptor {
        name: "fedopt".into(),
        defaults: &[
            ("server.learning_rate", DEFAULT_SERVER_LR),
            ("server.momentum", DEFAULT_MOMENTUM),
            ("server.beta1", DEFAULT_BETA1),
            ("server.beta2", DEFAULT_BETA2),
            ("server.epsilon", DEFAULT_EPSILON),
        ],
        validate,
        make_server,
        make_client: |_, _| Ok(Box::new(crate::protocol::BaseClient)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{max_abs_diff, ModelParams, TensorEntry};

    fn params(values: &[f64]) -> ModelParams {
        ModelParams::new(vec![TensorEntry {
            name: "w".into(),
            shape: vec![values.len()],
            values: values.to_vec(),
        }])
        .unwrap()
    }

    #[test]
    fn zero_momentum_unit_lr_recovers_plain_averaging() {
        let prev = params(&[1.0, -2.0]);
        let mean = params(&[0.5, 1.0]);
        let delta = prev.sub(&mean).unwrap();
        let mut opt = ServerOptimizer::Momentum {
            beta: 0.0,
            velocity: None,
        };
        let next = opt.step(&prev, &delta, 1.0).unwrap();
        assert!(max_abs_diff(&next, &mean).unwrap() < 1e-12);
    }

    #[test]
    fn momentum_matches_hand_unrolled_geometric_series() {
        // constant Δ: v_t = (1 + β + ... + β^{t-1})·Δ
        let beta = 0.9;
        let lr = 0.5;
        let delta = params(&[2.0]);
        let mut theta = params(&[10.0]);
        let mut opt = ServerOptimizer::Momentum {
            beta,
            velocity: None,
        };
        let mut expected = 10.0;
        let mut v = 0.0;
        for _ in 0..4 {
            theta = opt.step(&theta, &delta, lr).unwrap();
            v = beta * v + 2.0;
            expected -= lr * v;
            assert!((theta.flat_get(0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_step_magnitude_is_bounded_by_the_server_lr() {
        let lr = 0.3;
        let mut opt = ServerOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: None,
            second: None,
        };
        // constant pseudo-gradient with mixed signs and magnitudes
        let delta = params(&[4.0, -0.25, 1e-3]);
        let mut theta = params(&[0.0, 0.0, 0.0]);
        for _ in 0..5 {
            let next = opt.step(&theta, &delta, lr).unwrap();
            for i in 0..3 {
                let step = (next.flat_get(i) - theta.flat_get(i)).abs();
                assert!(step <= lr * (1.0 + 1e-9), "step {step} exceeds lr {lr}");
            }
            theta = next;
        }
        // and it actually moves against the pseudo-gradient
        assert!(theta.flat_get(0) < 0.0);
        assert!(theta.flat_get(1) > 0.0);
    }
}
