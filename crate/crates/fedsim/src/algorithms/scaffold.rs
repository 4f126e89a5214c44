//! SCAFFOLD: drift-corrected local steps via control variates.
//!
//! Clients step with θ ← θ − lr·(g − c_i + c) and refresh their control
//! with the gradient-free rule c_i ← c_i − c + (x − y)/(K·lr). The server
//! applies the averaged model drift with its own learning rate and keeps
//! c ← c + (|E|/|C|)·mean(Δc_i). Control variates travel through the
//! channel as control messages, so they count toward traffic.

use std::sync::{Arc, Mutex};

use crate::config::AlgorithmConfig;
use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::protocol::{
    aggregate, train_on, ClientBehavior, ClientCtx, ClientUpdate, FitOptions, ServerBehavior,
    ServerCtx,
};

use super::registry::{reject_param, AlgorithmDescriptor};

pub const DEFAULT_SERVER_LR: f64 = 1.0;

/// What the server saw in one round; enough to replay the control update.
#[derive(Clone)]
pub struct RoundControlLog {
    pub round: usize,
    pub participants: usize,
    pub n_clients: usize,
    pub client_deltas: Vec<ModelParams>,
    pub server_control_after: ModelParams,
}

pub type ControlLog = Arc<Mutex<Vec<RoundControlLog>>>;

pub struct ScaffoldServer {
    server_lr: f64,
    control: Option<ModelParams>,
    log: ControlLog,
}

impl ScaffoldServer {
    pub fn new(server_lr: f64) -> Self {
        Self {
            server_lr,
            control: None,
            log: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Handle onto the per-round control history (for diagnostics).
    pub fn control_log(&self) -> ControlLog {
        Arc::clone(&self.log)
    }
}

impl ServerBehavior for ScaffoldServer {
    fn broadcast(&mut self, ctx: &mut ServerCtx, eligible: &[usize]) -> Result<()> {
        if self.control.is_none() {
            self.control = Some(ctx.global_model.zeros_like());
        }
        ctx.broadcast_model(eligible)?;
        let control = self.control.as_ref().unwrap();
        for &client in eligible {
            ctx.send_control_to(client, control.clone())?;
        }
        Ok(())
    }

    fn receive_update(&mut self, ctx: &mut ServerCtx, client: usize) -> Result<ClientUpdate> {
        let model = ctx.receive_model_from(client)?;
        let delta = ctx.receive_control_from(client)?;
        Ok(ClientUpdate {
            client,
            model,
            control: Some(delta),
            weight: ctx.client_weight(client),
        })
    }

    fn aggregate(&mut self, ctx: &mut ServerCtx, updates: Vec<ClientUpdate>) -> Result<ModelParams> {
        let models: Vec<ModelParams> = updates.iter().map(|u| u.model.clone()).collect();
        let weights: Vec<f64> = updates.iter().map(|u| u.weight).collect();
        let mean = aggregate(&models, &weights)?;

        // x ← x + η_g · (weighted mean of y_i − x)
        let drift = mean.sub(&ctx.global_model)?;
        let mut next = ctx.global_model.clone();
        next.scaled_add(self.server_lr, &drift)?;

        // c ← c + (|E|/|C|) · mean(Δc_i)
        let participants = updates.len();
        let mut mean_delta = ctx.global_model.zeros_like();
        let mut deltas = Vec::with_capacity(participants);
        for update in &updates {
            let delta = update.control.as_ref().ok_or_else(|| {
                Error::Protocol(format!(
                    "client {} sent no control update in round {}",
                    update.client, ctx.round
                ))
            })?;
            mean_delta.scaled_add(1.0 / participants as f64, delta)?;
            deltas.push(delta.clone());
        }
        let control = self.control.as_mut().expect("initialized at broadcast");
        control.scaled_add(participants as f64 / ctx.n_clients() as f64, &mean_delta)?;

        self.log.lock().unwrap().push(RoundControlLog {
            round: ctx.round,
            participants,
            n_clients: ctx.n_clients(),
            client_deltas: deltas,
            server_control_after: control.clone(),
        });
        Ok(next)
    }
}

pub struct ScaffoldClient {
    control: Option<ModelParams>,
}

impl ScaffoldClient {
    pub fn new() -> Self {
        Self { control: None }
    }
}

impl Default for ScaffoldClient {
    fn default() -> Self {
        Self::new()
    }
}

impl ClientBehavior for ScaffoldClient {
    fn local_training(&mut self, ctx: &mut ClientCtx) -> Result<()> {
        let global = ctx.receive_model()?;
        let server_control = ctx.receive_control()?;
        if self.control.is_none() {
            self.control = Some(global.zeros_like());
        }
        let own_control = self.control.as_ref().unwrap();

        // every mini-batch gradient becomes g − c_i + c
        let offset = server_control.sub(own_control)?;
        let (trained, steps) = {
            let ClientCtx {
                arch,
                train,
                work,
                opt,
                rng,
                ..
            } = &mut *ctx;
            train_on(
                arch,
                global.clone(),
                train,
                work,
                opt,
                rng,
                FitOptions {
                    regularizer: None,
                    grad_offset: Some(&offset),
                },
            )?
        };
        let lr = ctx.opt.learning_rate;
        if steps == 0 || lr <= 0.0 {
            return Err(Error::Protocol(
                "scaffold needs a positive learning rate and at least one step".into(),
            ));
        }

        // Δc_i = −c + (x − y)/(K·lr), gradient-free control refresh
        let mut delta = global.sub(&trained)?;
        delta.scale(1.0 / (steps as f64 * lr));
        delta.scaled_add(-1.0, &server_control)?;
        self.control.as_mut().unwrap().scaled_add(1.0, &delta)?;

        ctx.local_model = Some(trained.clone());
        ctx.send_model(trained)?;
        ctx.send_control(delta)
    }
}

fn validate(cfg: &AlgorithmConfig) -> Result<()> {
    reject_param(&cfg.client.mu, "client.mu", "scaffold")?;
    reject_param(&cfg.server.optimizer, "server.optimizer", "scaffold")?;
    reject_param(&cfg.server.momentum, "server.momentum", "scaffold")?;
    reject_param(&cfg.server.beta1, "server.beta1", "scaffold")?;
    reject_param(&cfg.server.beta2, "server.beta2", "scaffold")?;
    reject_param(&cfg.server.epsilon, "server.epsilon", "scaffold")?;
    if cfg.client.optimizer.learning_rate <= 0.0 {
        return Err(Error::config(
            "client.optimizer.learning_rate",
            "scaffold divides by K·lr and needs a positive learning rate",
        ));
    }
    Ok(())
}

pub fn descriptor() -> AlgorithmDescriptor {
    AlgorithmDescriptor {
        name: "scaffold".into(),
        defaults: &[("server.learning_rate", DEFAULT_SERVER_LR)],
        validate,
        make_server: |cfg| {
            Ok(Box::new(ScaffoldServer::new(
                cfg.server.learning_rate.unwrap_or(DEFAULT_SERVER_LR),
            )))
        },
        make_client: |_, _| Ok(Box::new(ScaffoldClient::new())),
    }
}
