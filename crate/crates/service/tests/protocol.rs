use proptest::prelude::*;
use serde_json::{json, Value};
use switchfold::pipeline::{BranchResult, RolloutReport};
use switchfold::taskworld::{FinalFold, GarmentState, InstructionSignal, PhaseLabel, SubtaskId, World};
use switchfold_service::protocol::{BranchMessage, ClientMessage, ServerMessage, Signal, StartRequest, StateMessage};

fn state_at(position: u8, step: usize, awaiting: bool, frame: bool) -> StateMessage {
    let world = World::new(GarmentState::fresh(position).unwrap());
    StateMessage::from_world(&world, step, 1, PhaseLabel::Behavior, awaiting, frame).unwrap()
}

#[test]
fn state_message_has_the_documented_shape() {
    let v: Value = serde_json::to_value(ServerMessage::State(state_at(2, 5, true, false))).unwrap();
    assert_eq!(v["type"], "state");
    assert_eq!(v["step"], 5);
    assert_eq!(v["phase"], "behavior");
    assert_eq!(v["awaiting"], true);
    assert_eq!(v["arm"], json!({"x": 0.5, "y": 0.85, "grip": 0.0}));
    assert_eq!(v["garment"]["left_sleeve_folded"], false);
    assert_eq!(v["garment"]["final_fold"], "none");
    assert!(v.get("frame").is_none());
    assert_eq!(v["outline"].as_array().unwrap().len(), 3);
}

#[test]
fn frames_are_base64_png() {
    use base64::Engine;
    let s = state_at(1, 0, false, true);
    let bytes = base64::engine::general_purpose::STANDARD.decode(s.frame.unwrap()).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
}

#[test]
fn branch_result_uses_match_key() {
    let b = BranchResult {
        index: 0,
        commanded: InstructionSignal::Right,
        expected: Some(SubtaskId::A),
        classified: Some(SubtaskId::A),
        matched: true,
        ambiguous: false,
    };
    let v: Value = serde_json::to_value(ServerMessage::BranchResult(BranchMessage::from(&b))).unwrap();
    assert_eq!(v["type"], "branch_result");
    assert_eq!(v["subtask"], "A");
    assert_eq!(v["match"], true);
    assert_eq!(v["commanded"], "right");
}

#[test]
fn client_messages_parse_from_documented_json() {
    let m: ClientMessage = serde_json::from_str(r#"{"type":"instruct","signal":"left"}"#).unwrap();
    assert_eq!(m, ClientMessage::Instruct { signal: Signal::Left });
    let m: ClientMessage = serde_json::from_str(r#"{"type":"start","position":2}"#).unwrap();
    assert_eq!(
        m,
        ClientMessage::Start {
            pattern: None,
            position: 2,
            seed: None
        }
    );
    assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"instruct","signal":"none"}"#).is_err());
    assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"instruct","signal":"sideways"}"#).is_err());
    assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"jump"}"#).is_err());
    let r: StartRequest = serde_json::from_str(r#"{"position":5,"pattern":4}"#).unwrap();
    assert_eq!((r.position, r.pattern, r.seed), (5, Some(4), None));
}

#[test]
fn done_message_carries_the_report() {
    let report = RolloutReport {
        episode: None,
        position: 3,
        seed: 1,
        branches: vec![],
        motor_mse: None,
        final_garment: GarmentState::fresh(3).unwrap(),
        motor: vec![[0.5, 0.85, 0.0]],
        trace: Default::default(),
        success: false,
        aborted: Some("timeout".into()),
    };
    let msg = ServerMessage::Done { report: Box::new(report) };
    let back: ServerMessage = serde_json::from_str(&msg.to_json()).unwrap();
    assert_eq!(back, msg);
    let v: Value = serde_json::from_str(&msg.to_json()).unwrap();
    assert_eq!(v["type"], "done");
    assert_eq!(v["report"]["position"], 3);
}

fn signal() -> impl Strategy<Value = Signal> {
    prop_oneof![Just(Signal::Right), Just(Signal::Left), Just(Signal::Up)]
}

fn subtask() -> impl Strategy<Value = Option<SubtaskId>> {
    prop_oneof![
        Just(None),
        Just(Some(SubtaskId::A)),
        Just(Some(SubtaskId::B)),
        Just(Some(SubtaskId::C)),
        Just(Some(SubtaskId::D)),
        Just(Some(SubtaskId::E)),
    ]
}

fn server_message() -> impl Strategy<Value = ServerMessage> {
    let state = (
        0usize..1000,
        0usize..4,
        any::<bool>(),
        0.0f64..1.0,
        0.0f64..1.0,
        0.0f64..0.4,
        0.2f64..0.8,
        any::<[bool; 3]>(),
    )
        .prop_map(|(step, subtask, awaiting, x, y, g, pos, flags)| {
            let mut world = World::new(GarmentState {
                position: pos,
                left_sleeve_folded: flags[0],
                right_sleeve_folded: flags[1],
                bottom_folded: flags[2],
                final_fold: FinalFold::None,
            });
            world.step([x, y, g]);
            ServerMessage::State(StateMessage::from_world(&world, step, subtask, PhaseLabel::Instruction, awaiting, false).unwrap())
        });
    let branch = (0usize..4, signal(), subtask(), subtask(), any::<bool>(), any::<bool>()).prop_map(|(index, s, a, b, m, amb)| {
        ServerMessage::BranchResult(BranchMessage {
            index,
            commanded: s.into(),
            subtask: a,
            matched: m,
            expected: b,
            ambiguous: amb,
        })
    });
    let error = "[ -~]{0,40}".prop_map(ServerMessage::error);
    prop_oneof![state, branch, error]
}

proptest! {
    #[test]
    fn server_messages_round_trip(msg in server_message()) {
        let back: ServerMessage = serde_json::from_str(&msg.to_json()).unwrap();
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn client_messages_round_trip(s in signal(), pattern in proptest::option::of(1u8..=4), position in 1u8..=6, seed in proptest::option::of(any::<u64>())) {
        for msg in [ClientMessage::Instruct { signal: s }, ClientMessage::Start { pattern, position, seed }] {
            let text = serde_json::to_string(&msg).unwrap();
            prop_assert_eq!(serde_json::from_str::<ClientMessage>(&text).unwrap(), msg);
        }
    }
}
