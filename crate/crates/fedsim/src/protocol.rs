//! Base server and client behaviors for synchronous centralized federated
//! learning: select, broadcast, local training, aggregate, evaluate.
//!
//! Algorithms specialize the round by overriding hooks on
//! [`ClientBehavior`] and [`ServerBehavior`]; the defaults implement plain
//! federated averaging. All model exchange goes through the channel, so
//! every byte is accounted; direct method calls only trigger events.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{ActorId, Channel, Message, Payload, TrafficLog};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{
    combine_client_scores, metrics, EvalSchedule, MetricScope, MetricsReport,
};
use crate::models::{
    self, ModelArchitecture, ModelParams, OptimizerSpec, Regularizer,
};
use crate::rng;

/// Local work per round: a number of sweeps or a number of mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkMode {
    Epochs,
    Steps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalWorkSpec {
    pub mode: WorkMode,
    pub amount: usize,
    pub batch_size: usize,
}

impl Default for LocalWorkSpec {
    fn default() -> Self {
        Self {
            mode: WorkMode::Epochs,
            amount: 1,
            batch_size: 32,
        }
    }
}

impl LocalWorkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.amount == 0 {
            return Err(Error::config("client.local.amount", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(
                "client.local.batch_size",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// How aggregation weights clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Weight by local train-set size (standard federated averaging).
    #[default]
    Size,
    Uniform,
}

/// Which test data to evaluate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalScope {
    #[default]
    Server,
    Clients,
    Both,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub schedule: EvalSchedule,
    pub scope: EvalScope,
    /// Weight the client_mean row by client test sizes.
    pub client_mean_weighted: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            schedule: EvalSchedule { frequency: 1 },
            scope: EvalScope::Server,
            client_mean_weighted: true,
        }
    }
}

/// Extra terms a specialized fit threads into the SGD loop.
#[derive(Default, Clone, Copy)]
pub struct FitOptions<'a> {
    /// Additional loss term (e.g. a proximal penalty).
    pub regularizer: Option<&'a dyn Regularizer>,
    /// Constant correction added to every mini-batch gradient.
    pub grad_offset: Option<&'a ModelParams>,
}

/// Mini-batch SGD on one dataset. Returns the trained parameters and the
/// number of optimizer steps taken. Deterministic given the rng state,
/// which persists across calls so consecutive rounds continue one shuffle
/// stream.
pub fn train_on(
    arch: &ModelArchitecture,
    params: ModelParams,
    data: &Dataset,
    work: &LocalWorkSpec,
    opt: &OptimizerSpec,
    rng: &mut ChaCha20Rng,
    extras: FitOptions<'_>,
) -> Result<(ModelParams, usize)> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot train on an empty dataset".into()));
    }
    work.validate()?;
    opt.validate()?;

    let mut params = params;
    let mut velocity = params.zeros_like();
    let mut steps = 0usize;
    let target_steps = match work.mode {
        WorkMode::Steps => work.amount,
        WorkMode::Epochs => usize::MAX,
    };
    let epochs = match work.mode {
        WorkMode::Epochs => work.amount,
        WorkMode::Steps => usize::MAX,
    };

    'outer: for _ in 0..epochs {
        // fresh identity permutation per epoch, so the batch schedule is a
        // pure function of the rng state however the epochs are chunked
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng::shuffle(&mut order, rng);
        for batch in order.chunks(work.batch_size) {
            let local = data.subset(batch)?;
            let (_, mut grad) = models::loss_and_grad(
                arch,
                &params,
                &local.features.view(),
                &local.labels,
                extras.regularizer,
            )?;
            if let Some(offset) = extras.grad_offset {
                grad.scaled_add(1.0, offset)?;
            }
            models::sgd_step(&mut params, &grad, opt, &mut velocity)?;
            steps += 1;
            if steps >= target_steps {
                break 'outer;
            }
        }
    }
    Ok((params, steps))
}

/// Everything a client owns: identity, data, local model, optimizer
/// settings, its channel handle, and its private batching stream.
pub struct ClientCtx {
    pub index: usize,
    pub arch: ModelArchitecture,
    pub local_model: Option<ModelParams>,
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub work: LocalWorkSpec,
    pub opt: OptimizerSpec,
    pub channel: Channel,
    pub rng: ChaCha20Rng,
}

impl ClientCtx {
    pub fn id(&self) -> ActorId {
        ActorId::Client(self.index)
    }

    /// Receive the global model from the server through the channel.
    pub fn receive_model(&self) -> Result<ModelParams> {
        self.channel
            .receive(self.id(), Some(ActorId::Server))?
            .into_model()
    }

    /// Send a model to the server through the channel.
    pub fn send_model(&self, model: ModelParams) -> Result<()> {
        self.channel.send(Message::new(
            Payload::Model(model),
            self.id(),
            ActorId::Server,
        ))
    }

    pub fn receive_control(&self) -> Result<ModelParams> {
        self.channel
            .receive(self.id(), Some(ActorId::Server))?
            .into_control()
    }

    pub fn send_control(&self, tensors: ModelParams) -> Result<()> {
        self.channel.send(Message::new(
            Payload::Control(tensors),
            self.id(),
            ActorId::Server,
        ))
    }

    pub fn train_size(&self) -> usize {
        self.train.len()
    }
}

/// Client-side override surface. Defaults implement the plain protocol:
/// receive the model, fit it locally, send it back.
pub trait ClientBehavior {
    fn local_training(&mut self, ctx: &mut ClientCtx) -> Result<()> {
        let global = ctx.receive_model()?;
        let trained = self.fit(ctx, global)?;
        ctx.local_model = Some(trained.clone());
        ctx.send_model(trained)
    }

    fn fit(&mut self, ctx: &mut ClientCtx, start: ModelParams) -> Result<ModelParams> {
        let ClientCtx {
            arch,
            train,
            work,
            opt,
            rng,
            ..
        } = ctx;
        let (trained, _) = train_on(arch, start, train, work, opt, rng, FitOptions::default())?;
        Ok(trained)
    }

    fn finalize(&mut self, _ctx: &mut ClientCtx) -> Result<()> {
        Ok(())
    }
}

/// The unmodified protocol client.
pub struct BaseClient;

impl ClientBehavior for BaseClient {}

pub struct Client {
    pub ctx: ClientCtx,
    behavior: Box<dyn ClientBehavior>,
}

impl Client {
    pub fn new(ctx: ClientCtx, behavior: Box<dyn ClientBehavior>) -> Self {
        Self { ctx, behavior }
    }

    /// Triggered by the server; carries no payload itself.
    pub fn local_training(&mut self) -> Result<()> {
        self.behavior.local_training(&mut self.ctx)
    }

    pub fn finalize(&mut self) -> Result<()> {
        self.behavior.finalize(&mut self.ctx)
    }
}

/// One client's contribution to a round.
pub struct ClientUpdate {
    pub client: usize,
    pub model: ModelParams,
    pub control: Option<ModelParams>,
    pub weight: f64,
}

/// Server-side state shared with behavior hooks.
pub struct ServerCtx {
    pub arch: ModelArchitecture,
    pub global_model: ModelParams,
    pub clients: Vec<Client>,
    pub channel: Channel,
    pub selection_rng: ChaCha20Rng,
    pub round: usize,
    pub eligibility: f64,
    pub weighting: Weighting,
    pub test_set: Option<Dataset>,
    pub eval: EvalSettings,
}

impl ServerCtx {
    /// Broadcast the current global model to the eligible clients.
    pub fn broadcast_model(&self, eligible: &[usize]) -> Result<()> {
        if eligible.is_empty() {
            return Err(Error::Precondition("broadcast to an empty round".into()));
        }
        let recipients: Vec<ActorId> = eligible.iter().map(|&c| ActorId::Client(c)).collect();
        self.channel.broadcast(
            Payload::Model(self.global_model.clone()),
            ActorId::Server,
            &recipients,
        )
    }

    pub fn send_control_to(&self, client: usize, tensors: ModelParams) -> Result<()> {
        self.channel.send(Message::new(
            Payload::Control(tensors),
            ActorId::Server,
            ActorId::Client(client),
        ))
    }

    pub fn receive_model_from(&self, client: usize) -> Result<ModelParams> {
        self.channel
            .receive(ActorId::Server, Some(ActorId::Client(client)))
            .map_err(|e| match e {
                Error::NoMessage { .. } => Error::Protocol(format!(
                    "client {client} did not send a model in round {}",
                    self.round
                )),
                other => other,
            })?
            .into_model()
    }

    pub fn receive_control_from(&self, client: usize) -> Result<ModelParams> {
        self.channel
            .receive(ActorId::Server, Some(ActorId::Client(client)))?
            .into_control()
    }

    pub fn client_weight(&self, client: usize) -> f64 {
        match self.weighting {
            Weighting::Size => self.clients[client].ctx.train_size() as f64,
            Weighting::Uniform => 1.0,
        }
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    fn evaluate(&self, round: usize) -> Result<(Option<MetricsReport>, Option<MetricsReport>)> {
        let mut server_report = None;
        let mut client_report = None;
        if matches!(self.eval.scope, EvalScope::Server | EvalScope::Both) {
            if let Some(test) = &self.test_set {
                let preds = models::predict(&self.arch, &self.global_model, &test.features.view())?;
                let scores = metrics(&test.labels, &preds, test.n_classes)?;
                server_report = Some(scores.into_report(round, MetricScope::ServerGlobal));
            }
        }
        if matches!(self.eval.scope, EvalScope::Clients | EvalScope::Both) {
            let mut per_client = Vec::new();
            for client in &self.clients {
                if let Some(test) = &client.ctx.test {
                    let preds =
                        models::predict(&self.arch, &self.global_model, &test.features.view())?;
                    per_client.push(metrics(&test.labels, &preds, test.n_classes)?);
                }
            }
            client_report = combine_client_scores(&per_client, self.eval.client_mean_weighted)
                .map(|s| s.into_report(round, MetricScope::ClientMean));
        }
        Ok((server_report, client_report))
    }
}

/// Server-side override surface. Defaults implement federated averaging.
pub trait ServerBehavior {
    /// Called at the beginning of each round.
    fn broadcast(&mut self, ctx: &mut ServerCtx, eligible: &[usize]) -> Result<()> {
        ctx.broadcast_model(eligible)
    }

    /// Collect one finished client's update from the channel.
    fn receive_update(&mut self, ctx: &mut ServerCtx, client: usize) -> Result<ClientUpdate> {
        let model = ctx.receive_model_from(client)?;
        Ok(ClientUpdate {
            client,
            model,
            control: None,
            weight: ctx.client_weight(client),
        })
    }

    /// Combine the round's updates into the next global model.
    fn aggregate(&mut self, ctx: &mut ServerCtx, updates: Vec<ClientUpdate>) -> Result<ModelParams> {
        let _ = ctx;
        let models: Vec<ModelParams> = updates.iter().map(|u| u.model.clone()).collect();
        let weights: Vec<f64> = updates.iter().map(|u| u.weight).collect();
        aggregate(&models, &weights)
    }

    /// Called once after the last round, before client finalization.
    fn finalize(&mut self, _ctx: &mut ServerCtx) -> Result<()> {
        Ok(())
    }
}

/// The unmodified protocol server.
pub struct BaseServer;

impl ServerBehavior for BaseServer {}

/// Entrywise weighted average with normalized weights.
pub fn aggregate(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::Precondition("nothing to aggregate".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::Precondition(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Precondition("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Precondition("weights sum to zero".into()));
    }
    for m in &models[1..] {
        models[0].ensure_compatible(m)?;
    }
    let mut out = models[0].zeros_like();
    for (model, &w) in models.iter().zip(weights) {
        out.scaled_add(w / total, model)?;
    }
    Ok(out)
}

/// Uniform sample without replacement of size max(1, round(rate·|C|)),
/// canonicalized to ascending client order.
pub fn select_clients(n_clients: usize, rate: f64, rng: &mut ChaCha20Rng) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Precondition(format!(
            "participation rate must be in (0, 1], got {rate}"
        )));
    }
    let count = ((rate * n_clients as f64).round() as usize)
        .max(1)
        .min(n_clients);
    Ok(rng::sample_without_replacement(n_clients, count, rng))
}

/// Per-round outcome: who participated, what was measured, what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub server_metrics: Option<MetricsReport>,
    pub client_metrics: Option<MetricsReport>,
    pub bytes_down: u64,
    pub bytes_up: u64,
}

/// Everything a federation run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationResult {
    pub rounds: Vec<RoundRecord>,
    pub final_model: ModelParams,
    pub traffic: TrafficLog,
}

pub struct Server {
    pub ctx: ServerCtx,
    behavior: Box<dyn ServerBehavior>,
}

impl Server {
    pub fn new(ctx: ServerCtx, behavior: Box<dyn ServerBehavior>) -> Self {
        Self { ctx, behavior }
    }

    /// Run `total_rounds` rounds of select -> broadcast -> local training ->
    /// gather -> aggregate, evaluating on schedule, then finalize.
    pub fn fit(&mut self, total_rounds: usize) -> Result<FederationResult> {
        if self.ctx.clients.is_empty() {
            return Err(Error::Protocol("no clients registered".into()));
        }
        let mut rounds = Vec::with_capacity(total_rounds);
        for t in 1..=total_rounds {
            self.ctx.round = t;
            self.ctx.channel.begin_round(t);
            let eligible = select_clients(
                self.ctx.n_clients(),
                self.ctx.eligibility,
                &mut self.ctx.selection_rng,
            )?;
            self.behavior.broadcast(&mut self.ctx, &eligible)?;

            // Synchronous barrier: every selected client trains and reports
            // before any aggregation happens. Clients are visited in
            // ascending index order so logs are canonical.
            let mut updates = Vec::with_capacity(eligible.len());
            for &c in &eligible {
                self.ctx.clients[c].local_training()?;
                updates.push(self.behavior.receive_update(&mut self.ctx, c)?);
            }
            if updates.len() != eligible.len() {
                return Err(Error::Protocol(format!(
                    "round {t}: {} updates for {} selected clients",
                    updates.len(),
                    eligible.len()
                )));
            }
            let next = self.behavior.aggregate(&mut self.ctx, updates)?;
            self.ctx
                .global_model
                .ensure_compatible(&next)
                .map_err(|_| Error::IncompatibleParams("aggregate changed the model shape".into()))?;
            self.ctx.global_model = next;

            let (server_metrics, client_metrics) =
                if self.ctx.eval.schedule.due(t, total_rounds) {
                    self.ctx.evaluate(t)?
                } else {
                    (None, None)
                };
            let traffic = self.ctx.channel.traffic_report();
            let counters = traffic
                .round(t)
                .map(|r| r.counters.clone())
                .unwrap_or_default();
            rounds.push(RoundRecord {
                round: t,
                selected: eligible,
                server_metrics,
                client_metrics,
                bytes_down: counters.bytes_down(),
                bytes_up: counters.bytes_up(),
            });
        }

        // Finalization: server first, then every client gets the trigger.
        self.behavior.finalize(&mut self.ctx)?;
        for client in &mut self.ctx.clients {
            client.finalize()?;
        }
        if total_rounds == 0 {
            // No rounds ran; the final evaluation covers the initial model.
            let (server_metrics, client_metrics) = self.ctx.evaluate(0)?;
            rounds.push(RoundRecord {
                round: 0,
                selected: Vec::new(),
                server_metrics,
                client_metrics,
                bytes_down: 0,
                bytes_up: 0,
            });
        }
        Ok(FederationResult {
            rounds,
            final_model: self.ctx.global_model.clone(),
            traffic: self.ctx.channel.traffic_report(),
        })
    }
}

/// Federation-level knobs shared by every experiment type.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub arch: ModelArchitecture,
    pub work: LocalWorkSpec,
    pub opt: OptimizerSpec,
    pub eligibility: f64,
    pub weighting: Weighting,
    pub eval: EvalSettings,
    pub seed: u64,
}

/// Wire a server and its clients to one channel. The global model comes
/// from the seeded init; clients start blank and adopt the first
/// broadcast. Client batching streams are derived per index from the seed
/// so they are independent of round count and algorithm choice.
pub fn build_federation(
    cfg: &FederationConfig,
    train: &Dataset,
    partition: &crate::data::Partition,
    server_test: Option<Dataset>,
    mut client_tests: Vec<Option<Dataset>>,
    server_behavior: Box<dyn ServerBehavior>,
    mut client_behavior: impl FnMut(usize) -> Box<dyn ClientBehavior>,
) -> Result<Server> {
    if !(cfg.eligibility > 0.0 && cfg.eligibility <= 1.0) {
        return Err(Error::config("eligibility", "must be in (0,1]"));
    }
    cfg.work.validate()?;
    cfg.opt.validate()?;
    let n_clients = partition.n_clients();
    if n_clients == 0 {
        return Err(Error::Protocol("partition holds no clients".into()));
    }
    client_tests.resize_with(n_clients, || None);

    let channel = Channel::new();
    channel.register(ActorId::Server);
    let mut clients = Vec::with_capacity(n_clients);
    for (index, test) in (0..n_clients).zip(client_tests) {
        channel.register(ActorId::Client(index));
        let ctx = ClientCtx {
            index,
            arch: cfg.arch.clone(),
            local_model: None,
            train: partition.client_dataset(train, index)?,
            test,
            work: cfg.work,
            opt: cfg.opt,
            channel: channel.clone(),
            rng: rng::indexed_stream(cfg.seed, "client-batching", index),
        };
        clients.push(Client::new(ctx, client_behavior(index)));
    }

    let ctx = ServerCtx {
        arch: cfg.arch.clone(),
        global_model: models::init_params(&cfg.arch, cfg.seed)?,
        clients,
        channel,
        selection_rng: rng::stream(cfg.seed, "server-selection"),
        round: 0,
        eligibility: cfg.eligibility,
        weighting: cfg.weighting,
        test_set: server_test,
        eval: cfg.eval,
    };
    Ok(Server::new(ctx, server_behavior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, partition, PartitionSpec, PartitionStrategy};
    use crate::models::{max_abs_diff, TensorEntry};
    use proptest::prelude::*;

    fn scalar_params(values: &[f64]) -> ModelParams {
        ModelParams::new(vec![TensorEntry {
            name: "w".into(),
            shape: vec![values.len()],
            values: values.to_vec(),
        }])
        .unwrap()
    }

    #[test]
    fn aggregate_identity_and_symmetric_mean() {
        let single = scalar_params(&[1.5, -2.0]);
        let out = aggregate(std::slice::from_ref(&single), &[42.0]).unwrap();
        assert_eq!(out, single);

        let a = scalar_params(&[1.0, 3.0]);
        let b = scalar_params(&[3.0, 5.0]);
        let out = aggregate(&[a, b], &[1.0, 1.0]).unwrap();
        assert_eq!(out, scalar_params(&[2.0, 4.0]));
    }

    #[test]
    fn aggregate_weighted_scalar_case() {
        // (1·1 + 2·2 + 4·3) / 6 = 17/6
        let models = [
            scalar_params(&[1.0]),
            scalar_params(&[2.0]),
            scalar_params(&[4.0]),
        ];
        let out = aggregate(&models, &[1.0, 2.0, 3.0]).unwrap();
        assert!((out.flat_get(0) - 17.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        let a = scalar_params(&[1.0]);
        let b = scalar_params(&[1.0, 2.0]);
        assert!(matches!(
            aggregate(&[a.clone(), b], &[1.0, 1.0]),
            Err(Error::IncompatibleParams(_))
        ));
        assert!(matches!(
            aggregate(&[a.clone(), a.clone()], &[0.0, 0.0]),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            aggregate(std::slice::from_ref(&a), &[1.0, 2.0]),
            Err(Error::Precondition(_))
        ));
        assert!(aggregate(&[], &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn aggregate_is_convex_and_scale_invariant(
            values in prop::collection::vec(
                prop::collection::vec(-10.0f64..10.0, 4), 1..5),
            raw_weights in prop::collection::vec(0.01f64..5.0, 5),
            scale in 0.01f64..100.0,
        ) {
            let models: Vec<ModelParams> =
                values.iter().map(|v| scalar_params(v)).collect();
            let weights = raw_weights[..models.len()].to_vec();
            let out = aggregate(&models, &weights).unwrap();
            for i in 0..4 {
                let coords: Vec<f64> = models.iter().map(|m| m.flat_get(i)).collect();
                let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = out.flat_get(i);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
            let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
            let out2 = aggregate(&models, &scaled).unwrap();
            prop_assert!(max_abs_diff(&out, &out2).unwrap() < 1e-12);
        }
    }

    #[test]
    fn select_clients_counts() {
        let mut rng = rng::stream(1, "select");
        let all = select_clients(7, 1.0, &mut rng).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(select_clients(100, 0.2, &mut rng).unwrap().len(), 20);
        assert_eq!(select_clients(3, 0.1, &mut rng).unwrap().len(), 1);
        assert!(select_clients(5, 0.0, &mut rng).is_err());
        assert!(select_clients(5, 1.5, &mut rng).is_err());
    }

    #[test]
    fn select_clients_is_deterministic_per_stream() {
        let mut a = rng::stream(3, "server-selection");
        let mut b = rng::stream(3, "server-selection");
        for _ in 0..10 {
            assert_eq!(
                select_clients(20, 0.3, &mut a).unwrap(),
                select_clients(20, 0.3, &mut b).unwrap()
            );
        }
    }

    fn two_class_blobs(n: usize, seed: u64) -> Dataset {
        generate_blobs(n, 4, 2, 6.0, seed).unwrap()
    }

    fn quick_config(n_features: usize, eligibility: f64, seed: u64) -> FederationConfig {
        FederationConfig {
            arch: ModelArchitecture::linear(n_features, 2),
            work: LocalWorkSpec {
                mode: WorkMode::Epochs,
                amount: 1,
                batch_size: 16,
            },
            opt: OptimizerSpec {
                learning_rate: 0.1,
                ..Default::default()
            },
            eligibility,
            weighting: Weighting::Size,
            eval: EvalSettings::default(),
            seed,
        }
    }

    fn iid_partition(data: &Dataset, n_clients: usize, seed: u64) -> crate::data::Partition {
        partition(
            data,
            n_clients,
            &PartitionSpec {
                strategy: PartitionStrategy::Iid,
                seed,
            },
        )
        .unwrap()
    }

    fn base_federation(
        cfg: &FederationConfig,
        train: &Dataset,
        part: &crate::data::Partition,
        test: Option<Dataset>,
    ) -> Server {
        build_federation(cfg, train, part, test, Vec::new(), Box::new(BaseServer), |_| {
            Box::new(BaseClient)
        })
        .unwrap()
    }

    #[test]
    fn zero_rounds_runs_finalize_only() {
        let data = two_class_blobs(40, 1);
        let part = iid_partition(&data, 2, 1);
        let cfg = quick_config(4, 1.0, 7);
        let mut server = base_federation(&cfg, &data, &part, Some(data.clone()));
        let initial = server.ctx.global_model.clone();
        let result = server.fit(0).unwrap();
        assert_eq!(result.final_model, initial);
        assert_eq!(result.rounds.len(), 1);
        assert_eq!(result.rounds[0].round, 0);
        assert!(result.rounds[0].server_metrics.is_some());
        assert_eq!(result.traffic.totals.total_sent(), 0);
    }

    #[test]
    fn single_client_round_adopts_the_local_model() {
        let data = two_class_blobs(30, 2);
        let part = iid_partition(&data, 1, 2);
        let cfg = quick_config(4, 1.0, 5);
        let mut server = base_federation(&cfg, &data, &part, None);
        let start = server.ctx.global_model.clone();
        let result = server.fit(1).unwrap();

        // replay the client's work with an identical stream
        let mut replay_rng = rng::indexed_stream(cfg.seed, "client-batching", 0);
        let local = part.client_dataset(&data, 0).unwrap();
        let (expected, _) = train_on(
            &cfg.arch,
            start,
            &local,
            &cfg.work,
            &cfg.opt,
            &mut replay_rng,
            FitOptions::default(),
        )
        .unwrap();
        assert!(max_abs_diff(&result.final_model, &expected).unwrap() < 1e-15);
    }

    #[test]
    fn half_eligibility_selects_two_of_four_and_meters_traffic() {
        let data = two_class_blobs(80, 3);
        let part = iid_partition(&data, 4, 3);
        let cfg = quick_config(4, 0.5, 11);
        let mut server = base_federation(&cfg, &data, &part, None);
        let p = server.ctx.global_model.num_params() as u64;
        let result = server.fit(2).unwrap();
        let per_message = 8 * p + 64;
        for record in &result.rounds {
            assert_eq!(record.selected.len(), 2);
            assert_eq!(record.bytes_down, 2 * per_message);
            assert_eq!(record.bytes_up, 2 * per_message);
        }
        let total = result.traffic.totals.total_sent();
        assert_eq!(total, 2 * 2 * 2 * per_message);
        // synchrony: nothing left in flight after a run
        assert_eq!(server.ctx.channel.mailbox_len(ActorId::Server), 0);
    }

    #[test]
    fn local_training_without_a_pending_model_is_an_error() {
        let data = two_class_blobs(20, 4);
        let part = iid_partition(&data, 1, 4);
        let cfg = quick_config(4, 1.0, 13);
        let mut server = base_federation(&cfg, &data, &part, None);
        let err = server.ctx.clients[0].local_training().unwrap_err();
        assert!(matches!(err, Error::NoMessage { .. }));
    }

    #[test]
    fn client_traffic_counts_one_model_upload() {
        let data = two_class_blobs(20, 5);
        let part = iid_partition(&data, 1, 5);
        let cfg = quick_config(4, 1.0, 17);
        let mut server = base_federation(&cfg, &data, &part, None);
        let p = server.ctx.global_model.num_params() as u64;
        server.fit(1).unwrap();
        let report = server.ctx.channel.traffic_report();
        assert_eq!(report.totals.sent_by(ActorId::Client(0)), 8 * p + 64);
        assert_eq!(report.totals.received_by(ActorId::Server), 8 * p + 64);
    }

    #[test]
    fn zero_learning_rate_training_is_a_no_op() {
        let data = two_class_blobs(24, 6);
        let arch = ModelArchitecture::linear(4, 2);
        let params = models::init_params(&arch, 1).unwrap();
        let mut rng = rng::stream(1, "no-op");
        let (out, steps) = train_on(
            &arch,
            params.clone(),
            &data,
            &LocalWorkSpec {
                mode: WorkMode::Steps,
                amount: 1,
                batch_size: 8,
            },
            &OptimizerSpec {
                learning_rate: 0.0,
                ..Default::default()
            },
            &mut rng,
            FitOptions::default(),
        )
        .unwrap();
        assert_eq!(out, params);
        assert_eq!(steps, 1);
    }

    #[test]
    fn one_full_batch_step_matches_finite_difference_gradient() {
        let data = two_class_blobs(16, 7);
        let arch = ModelArchitecture::linear(4, 2);
        let params = models::init_params(&arch, 2).unwrap();
        let lr = 0.1;
        let mut rng = rng::stream(2, "fd-step");
        let (out, _) = train_on(
            &arch,
            params.clone(),
            &data,
            &LocalWorkSpec {
                mode: WorkMode::Steps,
                amount: 1,
                batch_size: data.len(),
            },
            &OptimizerSpec {
                learning_rate: lr,
                ..Default::default()
            },
            &mut rng,
            FitOptions::default(),
        )
        .unwrap();

        let eps = 1e-5;
        for i in 0..params.num_params() {
            let mut plus = params.clone();
            plus.flat_set(i, plus.flat_get(i) + eps);
            let mut minus = params.clone();
            minus.flat_set(i, minus.flat_get(i) - eps);
            let (lp, _) =
                models::loss_and_grad(&arch, &plus, &data.features.view(), &data.labels, None)
                    .unwrap();
            let (lm, _) =
                models::loss_and_grad(&arch, &minus, &data.features.view(), &data.labels, None)
                    .unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let expected = params.flat_get(i) - lr * fd;
            let got = out.flat_get(i);
            let denom = expected.abs().max(got.abs()).max(1e-6);
            assert!(
                ((got - expected) / denom).abs() < 1e-4,
                "coord {i}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn five_steps_mostly_decrease_the_loss_and_match_manual_unroll() {
        let data = two_class_blobs(200, 8);
        let arch = ModelArchitecture::linear(4, 2);
        let params = models::init_params(&arch, 3).unwrap();
        let opt = OptimizerSpec {
            learning_rate: 0.1,
            ..Default::default()
        };
        let work = LocalWorkSpec {
            mode: WorkMode::Steps,
            amount: 5,
            batch_size: 32,
        };

        // manual unroll with an identical rng stream
        let mut manual_rng = rng::stream(9, "five-steps");
        let mut manual = params.clone();
        let mut velocity = manual.zeros_like();
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng::shuffle(&mut order, &mut manual_rng);
        let full_loss = |p: &ModelParams| {
            models::loss_and_grad(&arch, p, &data.features.view(), &data.labels, None)
                .unwrap()
                .0
        };
        let mut losses = vec![full_loss(&manual)];
        for batch in order.chunks(32).take(5) {
            let local = data.subset(batch).unwrap();
            let (_, grad) =
                models::loss_and_grad(&arch, &manual, &local.features.view(), &local.labels, None)
                    .unwrap();
            models::sgd_step(&mut manual, &grad, &opt, &mut velocity).unwrap();
            losses.push(full_loss(&manual));
        }
        let decreases = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(decreases >= 4, "only {decreases}/5 steps decreased the loss");

        let mut rng = rng::stream(9, "five-steps");
        let (fast, steps) =
            train_on(&arch, params, &data, &work, &opt, &mut rng, FitOptions::default()).unwrap();
        assert_eq!(steps, 5);
        assert!(max_abs_diff(&fast, &manual).unwrap() < 1e-15);
    }

    #[test]
    fn runs_are_deterministic_given_the_seed() {
        let data = two_class_blobs(120, 9);
        let part = iid_partition(&data, 5, 9);
        let cfg = quick_config(4, 0.4, 23);
        let run = || {
            let mut server = base_federation(&cfg, &data, &part, Some(data.clone()));
            server.fit(4).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_client_federation_equals_continued_training() {
        let data = two_class_blobs(60, 10);
        let part = iid_partition(&data, 1, 10);
        let mut cfg = quick_config(4, 1.0, 31);
        cfg.work = LocalWorkSpec {
            mode: WorkMode::Epochs,
            amount: 2,
            batch_size: 16,
        };
        let rounds = 3;
        let mut server = base_federation(&cfg, &data, &part, None);
        let start = server.ctx.global_model.clone();
        let result = server.fit(rounds).unwrap();

        // centralized: same init, same stream, 6 epochs straight through
        let mut rng = rng::indexed_stream(cfg.seed, "client-batching", 0);
        let local = part.client_dataset(&data, 0).unwrap();
        let mut central = start;
        for _ in 0..rounds {
            let (next, _) = train_on(
                &cfg.arch,
                central,
                &local,
                &cfg.work,
                &cfg.opt,
                &mut rng,
                FitOptions::default(),
            )
            .unwrap();
            central = next;
        }
        assert!(max_abs_diff(&result.final_model, &central).unwrap() < 1e-9);
    }

    #[test]
    fn eval_scope_both_reports_server_and_clients() {
        let data = two_class_blobs(100, 11);
        let part = iid_partition(&data, 4, 11);
        let mut cfg = quick_config(4, 1.0, 37);
        cfg.eval.scope = EvalScope::Both;
        let client_tests: Vec<Option<Dataset>> = (0..4)
            .map(|i| Some(generate_blobs(20, 4, 2, 6.0, 100 + i).unwrap()))
            .collect();
        let mut server = build_federation(
            &cfg,
            &data,
            &part,
            Some(data.clone()),
            client_tests,
            Box::new(BaseServer),
            |_| Box::new(BaseClient),
        )
        .unwrap();
        let result = server.fit(2).unwrap();
        for record in &result.rounds {
            let server_report = record.server_metrics.unwrap();
            let client_report = record.client_metrics.unwrap();
            assert_eq!(server_report.scope, MetricScope::ServerGlobal);
            assert_eq!(client_report.scope, MetricScope::ClientMean);
            assert_eq!(client_report.scores.n_samples, 80);
        }
    }

    #[test]
    fn eval_frequency_limits_reports() {
        let data = two_class_blobs(60, 12);
        let part = iid_partition(&data, 2, 12);
        let mut cfg = quick_config(4, 1.0, 41);
        cfg.eval.schedule = EvalSchedule::new(5).unwrap();
        let mut server = base_federation(&cfg, &data, &part, Some(data.clone()));
        let result = server.fit(12).unwrap();
        let evaluated: Vec<usize> = result
            .rounds
            .iter()
            .filter(|r| r.server_metrics.is_some())
            .map(|r| r.round)
            .collect();
        assert_eq!(evaluated, vec![5, 10, 12]);

        // no test set anywhere: no reports, no error
        let mut cfg2 = quick_config(4, 1.0, 41);
        cfg2.eval.schedule = EvalSchedule::new(1).unwrap();
        let mut server = base_federation(&cfg2, &data, &part, None);
        let result = server.fit(3).unwrap();
        assert!(result.rounds.iter().all(|r| r.server_metrics.is_none()));
    }
}
