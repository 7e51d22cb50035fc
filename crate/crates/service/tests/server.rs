mod common;

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use futures::{SinkExt, StreamExt};
use switchfold::pipeline::{scheduled_rollout, Model};
use switchfold::taskworld::{EpisodeSpec, InstructionSignal};
use switchfold_service::protocol::{ServerMessage, SessionCreated};
use switchfold_service::session::{SessionConfig, SessionManager};
use switchfold_service::{router, Phase};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

const STEPS_PER_SUBTASK: usize = 60;

fn model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(common::tiny_model)
}

fn config() -> SessionConfig {
    SessionConfig {
        frame_stride: 10,
        reconnect_timeout: Duration::from_secs(30),
        instruction_timeout: None,
        feature_jitter: 0.01,
        ..SessionConfig::default()
    }
}

async fn start_server(config: SessionConfig) -> (SocketAddr, Arc<SessionManager>) {
    let manager = Arc::new(SessionManager::new(Arc::new(model().clone()), config));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(manager.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (addr, manager)
}

async fn create(addr: SocketAddr, body: serde_json::Value) -> reqwest::Response {
    reqwest::Client::new()
        .post(format!("http://{addr}/sessions"))
        .json(&body)
        .send()
        .await
        .unwrap()
}

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(addr: SocketAddr, id: u64) -> Socket {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/stream")).await.unwrap();
    ws
}

async fn next_message(ws: &mut Socket) -> ServerMessage {
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(60), ws.next())
            .await
            .expect("server went quiet")
            .expect("stream ended")
            .unwrap();
        if let Message::Text(t) = frame {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

async fn send(ws: &mut Socket, json: serde_json::Value) {
    ws.send(Message::Text(json.to_string().into())).await.unwrap();
}

fn signal_name(s: InstructionSignal) -> &'static str {
    match s {
        InstructionSignal::Right => "right",
        InstructionSignal::Left => "left",
        InstructionSignal::Up => "up",
        InstructionSignal::None => "none",
    }
}

/// Answers every awaiting state with the next scheduled instruction and
/// collects the episode's messages up to and including `done`.
async fn drive(ws: &mut Socket, schedule: &[InstructionSignal], mut extra_after_instruct: bool) -> Vec<ServerMessage> {
    let mut messages = Vec::new();
    let mut next = 0;
    loop {
        let msg = next_message(ws).await;
        let awaiting = matches!(&msg, ServerMessage::State(s) if s.awaiting);
        let done = matches!(msg, ServerMessage::Done { .. });
        messages.push(msg);
        if awaiting {
            send(ws, serde_json::json!({"type": "instruct", "signal": signal_name(schedule[next])})).await;
            if extra_after_instruct {
                // Arrives while the subtask executes: must bounce.
                send(ws, serde_json::json!({"type": "instruct", "signal": "up"})).await;
                extra_after_instruct = false;
            }
            next += 1;
        }
        if done {
            return messages;
        }
    }
}

#[tokio::test]
async fn health_and_session_validation() {
    let (addr, _) = start_server(config()).await;
    let health: serde_json::Value = reqwest::get(format!("http://{addr}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");

    let bad = create(addr, serde_json::json!({"position": 9})).await;
    assert_eq!(bad.status(), 400);
    let body: serde_json::Value = bad.json().await.unwrap();
    assert_eq!(body["type"], "error");
    assert_eq!(create(addr, serde_json::json!({"position": 2, "pattern": 8})).await.status(), 400);
    assert_eq!(create(addr, serde_json::json!({"nonsense": true})).await.status(), 400);

    let a: SessionCreated = create(addr, serde_json::json!({"position": 2})).await.json().await.unwrap();
    let b: SessionCreated = create(addr, serde_json::json!({"position": 5, "pattern": 4})).await.json().await.unwrap();
    assert_ne!(a.id, b.id);
    let missing = reqwest::get(format!("http://{addr}/sessions/999/stream")).await.unwrap();
    assert_eq!(missing.status(), 404);
}

#[tokio::test]
async fn steered_episode_matches_scheduled_rollout() {
    let (addr, manager) = start_server(config()).await;
    let episode = EpisodeSpec::pattern(4, 2).unwrap();
    let created: SessionCreated = create(addr, serde_json::json!({"position": 2, "pattern": 4, "seed": 3})).await.json().await.unwrap();
    let mut ws = connect(addr, created.id).await;
    let messages = drive(&mut ws, &episode.instructions, true).await;

    // Initial state: fresh garment, arm at home, not yet awaiting.
    let ServerMessage::State(first) = &messages[0] else { panic!("first message {:?}", messages[0]) };
    assert!(!first.awaiting);
    assert_eq!(first.step, 0);
    assert_eq!((first.arm.x, first.arm.y, first.arm.grip), (0.5, 0.85, 0.0));
    assert!(!first.garment.left_sleeve_folded && !first.garment.right_sleeve_folded);

    // The bounced instruction is the only error.
    let errors: Vec<_> = messages.iter().filter(|m| matches!(m, ServerMessage::Error { .. })).collect();
    assert_eq!(errors.len(), 1, "{errors:?}");
    let episode_messages: Vec<_> = messages[1..].iter().filter(|m| !matches!(m, ServerMessage::Error { .. })).collect();

    // Per subtask: one awaiting state, one state per step, one branch result.
    assert_eq!(episode_messages.len(), 4 * (STEPS_PER_SUBTASK + 2) + 1);
    for (k, chunk) in episode_messages[..4 * (STEPS_PER_SUBTASK + 2)].chunks(STEPS_PER_SUBTASK + 2).enumerate() {
        let ServerMessage::State(awaiting) = chunk[0] else { panic!() };
        assert!(awaiting.awaiting);
        assert_eq!(awaiting.step, k * STEPS_PER_SUBTASK);
        for (i, m) in chunk[1..=STEPS_PER_SUBTASK].iter().enumerate() {
            let ServerMessage::State(s) = m else { panic!("expected state, got {m:?}") };
            assert!(!s.awaiting);
            assert_eq!(s.step, k * STEPS_PER_SUBTASK + i + 1);
            assert_eq!(s.frame.is_some(), s.step % 10 == 0);
        }
        assert!(matches!(chunk[STEPS_PER_SUBTASK + 1], ServerMessage::BranchResult(b) if b.index == k));
    }
    let ServerMessage::Done { report } = episode_messages.last().unwrap() else { panic!() };
    let expected = scheduled_rollout(model(), &episode, 0.01, 3, switchfold::config::Cs0Policy::Mean).unwrap();
    assert_eq!(**report, expected);
    assert_eq!(manager.get(created.id).unwrap().phase(), Phase::Finished);

    // Finished: instructions bounce, a new episode can start.
    send(&mut ws, serde_json::json!({"type": "instruct", "signal": "left"})).await;
    assert!(matches!(next_message(&mut ws).await, ServerMessage::Error { message } if message.contains("finished")));
    send(&mut ws, serde_json::json!({"type": "start", "position": 9})).await;
    assert!(matches!(next_message(&mut ws).await, ServerMessage::Error { .. }));
    send(&mut ws, serde_json::json!({"type": "start", "position": 3})).await;
    let ServerMessage::State(restart) = next_message(&mut ws).await else { panic!() };
    assert!(!restart.awaiting);
    assert_eq!(restart.garment.position, switchfold::taskworld::position_offset(3).unwrap());
}

#[tokio::test]
async fn reconnect_resumes_from_a_snapshot() {
    let (addr, manager) = start_server(config()).await;
    let created: SessionCreated = create(addr, serde_json::json!({"position": 1})).await.json().await.unwrap();
    let mut ws = connect(addr, created.id).await;
    // Play the first subtask, then drop the connection while awaiting the second.
    let mut awaiting_seen = 0;
    loop {
        if let ServerMessage::State(s) = next_message(&mut ws).await {
            if s.awaiting {
                awaiting_seen += 1;
                if awaiting_seen == 2 {
                    break;
                }
                send(&mut ws, serde_json::json!({"type": "instruct", "signal": "right"})).await;
            }
        }
    }
    ws.close(None).await.unwrap();
    drop(ws);
    let session = manager.get(created.id).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while session.client_count() > 0 {
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(session.phase(), Phase::AwaitingInstruction);

    let mut ws = connect(addr, created.id).await;
    let ServerMessage::BranchResult(b) = next_message(&mut ws).await else { panic!("snapshot starts with branch history") };
    assert_eq!(b.index, 0);
    let ServerMessage::State(s) = next_message(&mut ws).await else { panic!() };
    assert!(s.awaiting);
    assert_eq!(s.step, STEPS_PER_SUBTASK);
    assert_eq!(s.subtask, 1);
    send(&mut ws, serde_json::json!({"type": "instruct", "signal": "left"})).await;
    let ServerMessage::State(s) = next_message(&mut ws).await else { panic!() };
    assert_eq!(s.step, STEPS_PER_SUBTASK + 1);
}

#[tokio::test]
async fn abandoned_sessions_expire() {
    let (addr, manager) = start_server(SessionConfig {
        reconnect_timeout: Duration::from_millis(50),
        ..config()
    })
    .await;
    let created: SessionCreated = create(addr, serde_json::json!({"position": 4})).await.json().await.unwrap();
    let session = manager.get(created.id).unwrap();
    tokio::time::sleep(Duration::from_millis(80)).await;
    assert_eq!(manager.reap(Instant::now()), vec![created.id]);
    assert!(manager.get(created.id).is_err());
    // The rollout thread sees its channel close and reports an abort.
    let deadline = Instant::now() + Duration::from_secs(30);
    while session.phase() != Phase::Finished {
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let ServerMessage::Done { report } = session.log().last().cloned().unwrap() else { panic!() };
    assert!(report.aborted.is_some());
    assert!(!report.success);
}
