//! Sessions: one rollout thread each, an instruction channel into it, and a
//! message log fanned out to connected clients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc as std_mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use switchfold::config::Cs0Policy;
use switchfold::pipeline::{rollout, ChannelSource, Model, RolloutEvent, RolloutOptions};
use switchfold::taskworld::{EpisodeSpec, GarmentState, InstructionSignal, PhaseLabel, World, POSITION_COUNT};
use tokio::sync::mpsc::UnboundedSender;

use crate::protocol::{BranchMessage, ServerMessage, Signal, StartRequest, StateMessage};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    Invalid(String),
    #[error("no session {0}")]
    NotFound(u64),
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    /// Attach a PNG frame every this many steps; 0 never.
    pub frame_stride: usize,
    /// How long a session with no client survives.
    pub reconnect_timeout: Duration,
    /// Abort the rollout if an instruction takes longer than this.
    pub instruction_timeout: Option<Duration>,
    pub feature_jitter: f64,
    pub cs0: Cs0Policy,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            frame_stride: 1,
            reconnect_timeout: Duration::from_secs(60),
            instruction_timeout: None,
            feature_jitter: 0.01,
            cs0: Cs0Policy::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    AwaitingInstruction,
    Executing,
    Finished,
}

struct Inner {
    phase: Phase,
    log: Vec<ServerMessage>,
    /// Latest state and all branch results of the running episode.
    last_state: Option<ServerMessage>,
    branches: Vec<ServerMessage>,
    instructions: Option<std_mpsc::Sender<InstructionSignal>>,
    clients: HashMap<u64, UnboundedSender<ServerMessage>>,
    next_client: u64,
    ever_connected: bool,
    idle_since: Option<Instant>,
}

pub struct Session {
    pub id: u64,
    inner: Mutex<Inner>,
}

impl Session {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase
    }

    pub fn client_count(&self) -> usize {
        self.lock().clients.len()
    }

    /// Every message published so far, in order.
    pub fn log(&self) -> Vec<ServerMessage> {
        self.lock().log.clone()
    }

    fn publish(&self, msg: ServerMessage) {
        let mut inner = self.lock();
        match &msg {
            ServerMessage::State(s) => {
                inner.phase = if s.awaiting {
                    Phase::AwaitingInstruction
                } else {
                    Phase::Executing
                };
                inner.last_state = Some(msg.clone());
            }
            ServerMessage::BranchResult(_) => inner.branches.push(msg.clone()),
            ServerMessage::Done { .. } => {
                inner.phase = Phase::Finished;
                inner.instructions = None;
            }
            ServerMessage::Error { .. } => {}
        }
        inner.clients.retain(|_, tx| tx.send(msg.clone()).is_ok());
        inner.log.push(msg);
    }

    /// Registers a client. The first client receives the whole log; later
    /// ones get a snapshot: branch results so far, the latest state and, if
    /// finished, the report.
    pub fn attach(&self, tx: UnboundedSender<ServerMessage>) -> u64 {
        let mut inner = self.lock();
        let backlog: Vec<ServerMessage> = if !inner.ever_connected {
            inner.log.clone()
        } else {
            let mut snapshot = inner.branches.clone();
            snapshot.extend(inner.last_state.clone());
            if inner.phase == Phase::Finished {
                snapshot.extend(inner.log.iter().rev().find(|m| matches!(m, ServerMessage::Done { .. })).cloned());
            }
            snapshot
        };
        for m in backlog {
            let _ = tx.send(m);
        }
        inner.ever_connected = true;
        inner.idle_since = None;
        let id = inner.next_client;
        inner.next_client += 1;
        inner.clients.insert(id, tx);
        id
    }

    pub fn detach(&self, client: u64) {
        let mut inner = self.lock();
        inner.clients.remove(&client);
        if inner.clients.is_empty() {
            inner.idle_since = Some(Instant::now());
        }
    }

    /// Forwards an instruction to the rollout if, and only if, it is waiting
    /// for one. Nothing changes on rejection.
    pub fn instruct(&self, signal: Signal) -> Result<(), SessionError> {
        let mut inner = self.lock();
        match inner.phase {
            Phase::Finished => return Err(SessionError::Invalid("session finished".into())),
            Phase::Executing => return Err(SessionError::Invalid("not awaiting an instruction".into())),
            Phase::AwaitingInstruction => {}
        }
        let tx = inner.instructions.as_ref().ok_or_else(|| SessionError::Invalid("rollout stopped".into()))?;
        tx.send(signal.into()).map_err(|_| SessionError::Invalid("rollout stopped".into()))?;
        inner.phase = Phase::Executing;
        Ok(())
    }

    fn idle_for(&self, now: Instant) -> Option<Duration> {
        let inner = self.lock();
        inner.clients.is_empty().then(|| inner.idle_since.map_or(Duration::ZERO, |t| now.saturating_duration_since(t)))
    }

    /// Drops the instruction channel, which aborts a waiting rollout.
    fn close(&self) {
        self.lock().instructions = None;
    }
}

/// Validated episode parameters.
#[derive(Clone, Debug)]
pub struct EpisodeRequest {
    pub position: u8,
    pub episode: Option<EpisodeSpec>,
    pub seed: u64,
}

impl EpisodeRequest {
    pub fn parse(position: u8, pattern: Option<u8>, seed: Option<u64>) -> Result<Self, SessionError> {
        if !(1..=POSITION_COUNT).contains(&position) {
            return Err(SessionError::Invalid(format!("position must be in 1..={POSITION_COUNT}, got {position}")));
        }
        let episode = pattern
            .map(|p| EpisodeSpec::pattern(p, position))
            .transpose()
            .map_err(|e| SessionError::Invalid(e.to_string()))?;
        Ok(Self {
            position,
            episode,
            seed: seed.unwrap_or(0),
        })
    }
}

impl TryFrom<&StartRequest> for EpisodeRequest {
    type Error = SessionError;

    fn try_from(r: &StartRequest) -> Result<Self, SessionError> {
        Self::parse(r.position, r.pattern, r.seed)
    }
}

pub struct SessionManager {
    model: Arc<Model>,
    config: SessionConfig,
    sessions: Mutex<HashMap<u64, Arc<Session>>>,
    next_id: AtomicU64,
}

impl SessionManager {
    pub fn new(model: Arc<Model>, config: SessionConfig) -> Self {
        Self {
            model,
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    fn sessions(&self) -> MutexGuard<'_, HashMap<u64, Arc<Session>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn get(&self, id: u64) -> Result<Arc<Session>, SessionError> {
        self.sessions().get(&id).cloned().ok_or(SessionError::NotFound(id))
    }

    pub fn len(&self) -> usize {
        self.sessions().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates a session and starts its rollout thread.
    pub fn create(&self, request: EpisodeRequest) -> Arc<Session> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let session = Arc::new(Session {
            id,
            inner: Mutex::new(Inner {
                phase: Phase::Executing,
                log: Vec::new(),
                last_state: None,
                branches: Vec::new(),
                instructions: None,
                clients: HashMap::new(),
                next_client: 0,
                ever_connected: false,
                idle_since: Some(Instant::now()),
            }),
        });
        self.sessions().insert(id, session.clone());
        self.launch(&session, request);
        session
    }

    /// Starts a new episode in a finished session.
    pub fn restart(&self, session: &Arc<Session>, request: EpisodeRequest) -> Result<(), SessionError> {
        if session.phase() != Phase::Finished {
            return Err(SessionError::Invalid("an episode is already running".into()));
        }
        self.launch(session, request);
        Ok(())
    }

    fn launch(&self, session: &Arc<Session>, request: EpisodeRequest) {
        let (tx, rx) = std_mpsc::channel();
        {
            let mut inner = session.lock();
            inner.instructions = Some(tx);
            inner.phase = Phase::Executing;
            inner.last_state = None;
            inner.branches.clear();
        }
        let model = self.model.clone();
        let config = self.config.clone();
        let session = session.clone();
        std::thread::spawn(move || run_episode(&model, &config, &session, request, rx));
    }

    /// Removes sessions that have had no client for the reconnect timeout.
    /// Returns the ids removed.
    pub fn reap(&self, now: Instant) -> Vec<u64> {
        let mut sessions = self.sessions();
        let stale: Vec<u64> = sessions
            .iter()
            .filter(|(_, s)| s.idle_for(now).is_some_and(|idle| idle >= self.config.reconnect_timeout))
            .map(|(id, _)| *id)
            .collect();
        for id in &stale {
            if let Some(s) = sessions.remove(id) {
                s.close();
            }
        }
        stale
    }
}

fn run_episode(model: &Model, config: &SessionConfig, session: &Session, request: EpisodeRequest, rx: std_mpsc::Receiver<InstructionSignal>) {
    let stride = config.frame_stride;
    let with_frame = |step: usize| stride > 0 && step.is_multiple_of(stride);
    let state = |world: &World, step, subtask, phase, awaiting| {
        match StateMessage::from_world(world, step, subtask, phase, awaiting, with_frame(step)) {
            Ok(s) => ServerMessage::State(s),
            Err(e) => ServerMessage::error(e.to_string()),
        }
    };
    let fresh = match GarmentState::fresh(request.position) {
        Ok(g) => g,
        Err(e) => {
            session.publish(ServerMessage::error(e.to_string()));
            return;
        }
    };
    session.publish(state(&World::new(fresh), 0, 0, PhaseLabel::Instruction, false));
    let options = RolloutOptions {
        position: request.position,
        episode: request.episode.clone(),
        subtasks: 4,
        feature_jitter: config.feature_jitter,
        seed: request.seed,
        cs0: config.cs0,
    };
    let mut source = ChannelSource::new(rx, config.instruction_timeout);
    let result = rollout(model, &options, &mut source, &mut |event| {
        let msg = match event {
            RolloutEvent::Awaiting { index, step, world } => state(world, step, index, PhaseLabel::Instruction, true),
            RolloutEvent::Step { index, step, phase, world, .. } => state(world, step, index, phase, false),
            RolloutEvent::Branch(b) => ServerMessage::BranchResult(BranchMessage::from(b)),
        };
        session.publish(msg);
    });
    match result {
        Ok(report) => session.publish(ServerMessage::Done { report: Box::new(report) }),
        Err(e) => {
            session.publish(ServerMessage::error(e.to_string()));
            session.publish_finished();
        }
    }
}

impl Session {
    fn publish_finished(&self) {
        let mut inner = self.lock();
        inner.phase = Phase::Finished;
        inner.instructions = None;
    }
}
