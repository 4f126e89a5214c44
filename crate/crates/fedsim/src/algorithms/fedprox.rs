//! FedProx: local objective augmented with a proximal pull toward the
//! global model received at the start of the round.

use crate::config::AlgorithmConfig;
use crate::error::Result;
use crate::models::{ModelParams, ProximalTerm};
use crate::protocol::{train_on, ClientBehavior, ClientCtx, FitOptions};

use super::registry::{reject_param, AlgorithmDescriptor};

pub const DEFAULT_MU: f64 = 0.01;

/// Client minimizing local loss + (mu/2)·‖θ − θ_global‖².
pub struct FedProxClient {
    pub mu: f64,
}

impl ClientBehavior for FedProxClient {
    fn fit(&mut self, ctx: &mut ClientCtx, start: ModelParams) -> Result<ModelParams> {
        let penalty = ProximalTerm {
            reference: start.clone(),
            coefficient: self.mu,
        };
        let ClientCtx {
            arch,
            train,
            work,
            opt,
            rng,
            ..
        } = ctx;
        let (trained, _) = train_on(
            arch,
            start,
            train,
            work,
            opt,
            rng,
            FitOptions {
                regularizer: Some(&penalty),
                grad_offset: None,
            },
        )?;
        Ok(trained)
    }
}

fn validate(cfg: &AlgorithmConfig) -> Result<()> {
    reject_param(&cfg.server.learning_rate, "server.learning_rate", "fedprox")?;
    reject_param(&cfg.server.optimizer, "server.optimizer", "fedprox")?;
    reject_param(&cfg.server.momentum, "server.momentum", "fedprox")?;
    reject_param(&cfg.server.beta1, "server.beta1", "fedprox")?;
    reject_param(&cfg.server.beta2, "server.beta2", "fedprox")?;
    reject_param(&cfg.server.epsilon, "server.epsilon", "fedprox")?;
    Ok(())
}

pub fn descriptor() -> AlgorithmDescriptor {
    AlgorithmDescriptor {
        name: "fedprox".into(),
        defaults: &[("client.mu", DEFAULT_MU)],
        validate,
        make_server: |_| Ok(Box::new(crate::protocol::BaseServer)),
        make_client: |cfg, _| {
            Ok(Box::new(FedProxClient {
                mu: cfg.client.mu.unwrap_or(DEFAULT_MU),
            }))
        },
    }
}
