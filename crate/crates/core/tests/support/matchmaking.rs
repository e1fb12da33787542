//! Reference model for the matchmaking queue, shared by the matchmaking
//! property tests and the acceptance run.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use wozsim_core::logging::MemoryStore;
use wozsim_core::scene::{Role, ScenarioLibrary};
use wozsim_core::session::{ConnId, Lobby, LobbyConfig, Mode, Participant, Phase, SessionError};

pub const SCENARIOS: [&str; 2] = ["shopping", "navigation"];

pub fn lobby() -> Lobby {
    Lobby::new(
        Arc::new(ScenarioLibrary::builtin()),
        Box::new(MemoryStore::new()),
        LobbyConfig::default(),
    )
}

pub fn participant(role: Role, n: usize) -> Participant {
    let prefix = if role == Role::User { "u" } else { "w" };
    Participant {
        participant_id: format!("{prefix}{n}"),
        role,
        conn: ConnId(n as u64 + if role == Role::User { 0 } else { 100 }),
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Enqueue {
        role: Role,
        who: usize,
        scenario: usize,
    },
    TryMatch {
        scenario: usize,
    },
    /// Ends the oldest live session, freeing its participants.
    EndOldest,
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        5 => (prop::sample::select(vec![Role::User, Role::Wizard]), 0usize..6, 0usize..2)
            .prop_map(|(role, who, scenario)| Op::Enqueue { role, who, scenario }),
        3 => (0usize..2).prop_map(|scenario| Op::TryMatch { scenario }),
        1 => Just(Op::EndOldest),
    ]
}

/// Reference model: plain FIFO lists and a set of busy participants.
#[derive(Default)]
struct Model {
    queues: BTreeMap<(Role, usize), VecDeque<String>>,
    live: VecDeque<(String, [String; 2])>,
}

impl Model {
    fn queued(&self, id: &str) -> bool {
        self.queues.values().any(|q| q.iter().any(|x| x == id))
    }

    fn busy(&self, id: &str) -> bool {
        self.live.iter().any(|(_, pair)| pair.iter().any(|x| x == id))
    }

    fn queued_count(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

/// Runs `ops` against a fresh lobby and the model, checking conservation,
/// FIFO order and the one-live-session rule after every step.
pub fn check_ops(ops: Vec<Op>) -> Result<(), TestCaseError> {
    let mut lobby = lobby();
    let mut model = Model::default();
    let mut enqueued = 0usize;
    let mut matched = 0usize;
    let mut released = 0usize;
    let mut now = 0;
    for op in ops {
        now += 1;
        match op {
            Op::Enqueue { role, who, scenario } => {
                let p = participant(role, who);
                let id = p.participant_id.clone();
                let got = lobby.enqueue(p, SCENARIOS[scenario], Mode::Collection);
                if model.queued(&id) {
                    prop_assert!(matches!(got, Err(SessionError::AlreadyEnqueued(_))), "{got:?}");
                } else if model.busy(&id) {
                    prop_assert!(matches!(got, Err(SessionError::AlreadyInSession(_))), "{got:?}");
                } else {
                    let q = model.queues.entry((role, scenario)).or_default();
                    q.push_back(id);
                    prop_assert_eq!(got.unwrap(), q.len());
                    enqueued += 1;
                }
            }
            Op::TryMatch { scenario } => {
                let got = lobby.try_match(SCENARIOS[scenario], Mode::Collection, now).unwrap();
                let users = model.queues.get(&(Role::User, scenario)).map_or(0, VecDeque::len);
                let wizards = model.queues.get(&(Role::Wizard, scenario)).map_or(0, VecDeque::len);
                if users > 0 && wizards > 0 {
                    let sid = got.expect("a compatible pair was waiting");
                    let u = model
                        .queues
                        .get_mut(&(Role::User, scenario))
                        .unwrap()
                        .pop_front()
                        .unwrap();
                    let w = model
                        .queues
                        .get_mut(&(Role::Wizard, scenario))
                        .unwrap()
                        .pop_front()
                        .unwrap();
                    let s = lobby.session(&sid).unwrap();
                    prop_assert_eq!(&s.user.participant_id, &u);
                    prop_assert_eq!(&s.assistant.participant_id, &w);
                    prop_assert_eq!(s.phase, Phase::Forming);
                    prop_assert_eq!(s.scene.version, 0);
                    model.live.push_back((sid, [u, w]));
                    matched += 2;
                } else {
                    prop_assert!(got.is_none());
                }
            }
            Op::EndOldest => {
                if let Some((sid, _)) = model.live.pop_front() {
                    lobby.transition(&sid, Phase::Abandoned, Some("test"), now).unwrap();
                    prop_assert!(lobby.session(&sid).unwrap().is_sealed());
                    released += 2;
                }
            }
        }
        // Conservation: nothing lost, nothing duplicated.
        prop_assert_eq!(enqueued, matched + lobby.queue().len());
        prop_assert_eq!(lobby.queue().len(), model.queued_count());
        prop_assert_eq!(model.live.len() * 2, matched - released);
        for ((role, scenario), q) in &model.queues {
            prop_assert_eq!(
                &lobby.queue().waiting(*role, SCENARIOS[*scenario]),
                &q.iter().cloned().collect::<Vec<_>>()
            );
        }
        // At most one live session per participant.
        for role in [Role::User, Role::Wizard] {
            for n in 0..6 {
                let id = participant(role, n).participant_id;
                let live = lobby.sessions_of(&id).filter(|s| !s.phase.is_terminal()).count();
                prop_assert!(live <= 1);
                prop_assert!(!(live == 1 && lobby.queue().contains(&id)));
            }
        }
    }
    Ok(())
}

/// Enqueues `n` users and `n` wizards in the order given by `order` and
/// matches until the queues run dry.
pub fn check_pairs(n: usize, order: Vec<bool>) -> Result<(), TestCaseError> {
    let mut lobby = lobby();
    let (mut users, mut wizards) = (0, 0);
    // Interleave enqueues in a random order.
    for pick_user in order {
        if (pick_user && users < n) || wizards == n {
            if users < n {
                lobby
                    .enqueue(participant(Role::User, users), "shopping", Mode::Collection)
                    .unwrap();
                users += 1;
            }
        } else {
            lobby
                .enqueue(participant(Role::Wizard, wizards), "shopping", Mode::Collection)
                .unwrap();
            wizards += 1;
        }
    }
    while users < n {
        lobby
            .enqueue(participant(Role::User, users), "shopping", Mode::Collection)
            .unwrap();
        users += 1;
    }
    while wizards < n {
        lobby
            .enqueue(participant(Role::Wizard, wizards), "shopping", Mode::Collection)
            .unwrap();
        wizards += 1;
    }
    let mut sessions = Vec::new();
    while let Some(sid) = lobby.try_match("shopping", Mode::Collection, 0).unwrap() {
        sessions.push(sid);
    }
    prop_assert_eq!(sessions.len(), n);
    prop_assert!(lobby.queue().is_empty());
    // Sessions form in user arrival order.
    for (i, sid) in sessions.iter().enumerate() {
        let expected = participant(Role::User, i).participant_id;
        prop_assert_eq!(&lobby.session(sid).unwrap().user.participant_id, &expected);
    }
    Ok(())
}
