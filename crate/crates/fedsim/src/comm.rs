//! Simulated communication channel between server and clients.
//!
//! All model and tensor exchange goes through a [`Channel`]: messages are
//! enqueued per receiver in FIFO order and every byte is metered, bucketed
//! by round. Direct method calls between parties only trigger events and
//! never carry payload.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::models::ModelParams;

/// Fixed serialization overhead charged per message.
pub const MESSAGE_HEADER_BYTES: u64 = 64;
/// Serialized size of one tensor element (double precision).
pub const BYTES_PER_ELEMENT: u64 = 8;

/// Parties on the channel: the one server and indexed clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActorId {
    Server,
    Client(usize),
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorId::Server => write!(f, "server"),
            ActorId::Client(i) => write!(f, "client {i}"),
        }
    }
}

/// Payload-free event tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    RoundStart,
    Finalize,
}

/// What a message carries.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Model parameters (the usual cargo).
    Model(ModelParams),
    /// Auxiliary named tensors, e.g. control variates.
    Control(ModelParams),
    /// A bare signal; only the header is charged.
    Signal(Signal),
}

impl Payload {
    fn element_count(&self) -> usize {
        match self {
            Payload::Model(p) | Payload::Control(p) => p.num_params(),
            Payload::Signal(_) => 0,
        }
    }
}

/// A message in flight. The size is fixed at construction:
/// 8 bytes per tensor element plus a 64-byte header.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub payload: Payload,
    pub sender: ActorId,
    pub receiver: ActorId,
    size_bytes: u64,
}

impl Message {
    pub fn new(payload: Payload, sender: ActorId, receiver: ActorId) -> Self {
        let size_bytes =
            payload.element_count() as u64 * BYTES_PER_ELEMENT + MESSAGE_HEADER_BYTES;
        Self {
            payload,
            sender,
            receiver,
            size_bytes,
        }
    }

    pub fn size_bytes(&self) -> u64 {
        self.size_bytes
    }

    /// The model inside, or a protocol error if this is not a model message.
    pub fn into_model(self) -> Result<ModelParams> {
        match self.payload {
            Payload::Model(p) => Ok(p),
            other => Err(Error::Protocol(format!(
                "expected a model message, got {other:?}"
            ))),
        }
    }

    /// The control tensors inside, or a protocol error.
    pub fn into_control(self) -> Result<ModelParams> {
        match self.payload {
            Payload::Control(p) => Ok(p),
            other => Err(Error::Protocol(format!(
                "expected a control message, got {other:?}"
            ))),
        }
    }
}

/// Bytes sent/received per actor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficCounters {
    pub bytes_sent: BTreeMap<ActorId, u64>,
    pub bytes_received: BTreeMap<ActorId, u64>,
}

impl TrafficCounters {
    pub fn sent_by(&self, actor: ActorId) -> u64 {
        self.bytes_sent.get(&actor).copied().unwrap_or(0)
    }

    pub fn received_by(&self, actor: ActorId) -> u64 {
        self.bytes_received.get(&actor).copied().unwrap_or(0)
    }

    pub fn total_sent(&self) -> u64 {
        self.bytes_sent.values().sum()
    }

    pub fn total_received(&self) -> u64 {
        self.bytes_received.values().sum()
    }

    /// Server-to-clients bytes.
    pub fn bytes_down(&self) -> u64 {
        self.sent_by(ActorId::Server)
    }

    /// Clients-to-server bytes.
    pub fn bytes_up(&self) -> u64 {
        self.total_sent() - self.bytes_down()
    }

    fn add_sent(&mut self, actor: ActorId, bytes: u64) {
        *self.bytes_sent.entry(actor).or_insert(0) += bytes;
    }

    fn add_received(&mut self, actor: ActorId, bytes: u64) {
        *self.bytes_received.entry(actor).or_insert(0) += bytes;
    }
}

/// Traffic for one protocol round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundTraffic {
    pub round: usize,
    pub counters: TrafficCounters,
}

/// Snapshot of everything the channel has metered.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLog {
    pub per_round: Vec<RoundTraffic>,
    pub totals: TrafficCounters,
}

impl TrafficLog {
    pub fn round(&self, round: usize) -> Option<&RoundTraffic> {
        self.per_round.iter().find(|r| r.round == round)
    }
}

#[derive(Default)]
struct ChannelState {
    mailboxes: BTreeMap<ActorId, VecDeque<Message>>,
    per_round: Vec<RoundTraffic>,
    totals: TrafficCounters,
}

impl ChannelState {
    fn current(&mut self) -> &mut TrafficCounters {
        if self.per_round.is_empty() {
            self.per_round.push(RoundTraffic::default());
        }
        &mut self.per_round.last_mut().unwrap().counters
    }
}

/// The shared medium. Handles are cheap clones of one synchronized state,
/// so concurrent client calls serialize on the internal lock.
#[derive(Clone, Default)]
pub struct Channel {
    inner: Arc<Mutex<ChannelState>>,
}

impl Channel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Create a mailbox for `actor`. Idempotent.
    pub fn register(&self, actor: ActorId) {
        let mut state = self.inner.lock().unwrap();
        state.mailboxes.entry(actor).or_default();
    }

    /// Open the traffic bucket for round `round`.
    pub fn begin_round(&self, round: usize) {
        let mut state = self.inner.lock().unwrap();
        state.per_round.push(RoundTraffic {
            round,
            counters: TrafficCounters::default(),
        });
    }

    /// Enqueue a message and charge the sender.
    pub fn send(&self, message: Message) -> Result<()> {
        let mut state = self.inner.lock().unwrap();
        if !state.mailboxes.contains_key(&message.receiver) {
            return Err(Error::UnregisteredActor(message.receiver.to_string()));
        }
        let bytes = message.size_bytes;
        let sender = message.sender;
        state.current().add_sent(sender, bytes);
        state.totals.add_sent(sender, bytes);
        state
            .mailboxes
            .get_mut(&message.receiver)
            .unwrap()
            .push_back(message);
        Ok(())
    }

    /// Dequeue the first message for `actor`, optionally filtered by sender,
    /// and charge the receiver.
    pub fn receive(&self, actor: ActorId, from: Option<ActorId>) -> Result<Message> {
        let mut state = self.inner.lock().unwrap();
        let mailbox = state
            .mailboxes
            .get_mut(&actor)
            .ok_or_else(|| Error::UnregisteredActor(actor.to_string()))?;
        let position = match from {
            None => {
                if mailbox.is_empty() {
                    None
                } else {
                    Some(0)
                }
            }
            Some(wanted) => mailbox.iter().position(|m| m.sender == wanted),
        };
        let index = position.ok_or_else(|| Error::NoMessage {
            actor: actor.to_string(),
            filter: from.map(|f| f.to_string()),
        })?;
        let message = mailbox.remove(index).unwrap();
        state.current().add_received(actor, message.size_bytes);
        state.totals.add_received(actor, message.size_bytes);
        Ok(message)
    }

    /// One independent message per recipient; traffic accrues per recipient.
    pub fn broadcast(
        &self,
        payload: Payload,
        sender: ActorId,
        recipients: &[ActorId],
    ) -> Result<()> {
        if recipients.is_empty() {
            return Err(Error::Precondition("broadcast to no recipients".into()));
        }
        for &receiver in recipients {
            self.send(Message::new(payload.clone(), sender, receiver))?;
        }
        Ok(())
    }

    /// Snapshot of per-round and total counters.
    pub fn traffic_report(&self) -> TrafficLog {
        let state = self.inner.lock().unwrap();
        TrafficLog {
            per_round: state.per_round.clone(),
            totals: state.totals.clone(),
        }
    }

    pub fn mailbox_len(&self, actor: ActorId) -> usize {
        let state = self.inner.lock().unwrap();
        state.mailboxes.get(&actor).map_or(0, VecDeque::len)
    }

    /// Total size of messages sent but not yet received.
    pub fn pending_bytes(&self) -> u64 {
        let state = self.inner.lock().unwrap();
        state
            .mailboxes
            .values()
            .flat_map(|mb| mb.iter().map(Message::size_bytes))
            .sum()
    }
}
