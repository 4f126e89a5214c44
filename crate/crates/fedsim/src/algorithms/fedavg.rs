//! Federated averaging: the unmodified base protocol.

use crate::config::AlgorithmConfig;
use crate::error::Result;
use crate::protocol::{BaseClient, BaseServer};

use super::registry::{reject_param, AlgorithmDescriptor};

fn validate(cfg: &AlgorithmConfig) -> Result<()> {
    reject_param(&cfg.client.mu, "client.mu", "fedavg")?;
    reject_param(&cfg.server.learning_rate, "server.learning_rate", "fedavg")?;
    reject_param(&cfg.server.optimizer, "server.optimizer", "fedavg")?;
    reject_param(&cfg.server.momentum, "server.momentum", "fedavg")?;
    reject_param(&cfg.server.beta1, "server.beta1", "fedavg")?;
    reject_param(&cfg.server.beta2, "server.beta2", "fedavg")?;
    reject_param(&cfg.server.epsilon, "server.epsilon", "fedavg")?;
    Ok(())
}

pub fn descriptor() -> AlgorithmDescriptor {
    AlgorithmDescriptor {
        name: "fedavg".into(),
        defaults: &[],
        validate,
        make_server: |_| Ok(Box::new(BaseServer)),
        make_client: |_, _| Ok(Box::new(BaseClient)),
    }
}
