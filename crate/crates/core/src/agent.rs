//! Evaluation-mode agents: registration, load accounting and the bundled
//! policies that drive the assistant seat programmatically.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::scene::{color_hex, Catalog, CommandKind, Role, SceneCommand, SceneState, Transform, PATTERNS};
use crate::session::ConnId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentRegistration {
    pub agent_id: String,
    /// Maximum concurrent sessions.
    pub capacity: u32,
    pub scenario_ids: Vec<String>,
}

impl AgentRegistration {
    pub fn new(agent_id: impl Into<String>, scenario_ids: &[&str]) -> Self {
        AgentRegistration {
            agent_id: agent_id.into(),
            capacity: 1,
            scenario_ids: scenario_ids.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("agent id '{0}' is already registered")]
    DuplicateAgentId(String),
    #[error("invalid registration: {0}")]
    InvalidRegistration(String),
}

impl AgentError {
    pub fn code(&self) -> &'static str {
        match self {
            AgentError::DuplicateAgentId(_) => "duplicate_agent_id",
            AgentError::InvalidRegistration(_) => "invalid_registration",
        }
    }
}

#[derive(Debug, Clone)]
struct AgentSlot {
    registration: AgentRegistration,
    conn: ConnId,
    load: u32,
    order: u64,
}

/// Live agent registrations and how many sessions each is serving.
#[derive(Debug, Default)]
pub struct AgentRegistry {
    slots: BTreeMap<String, AgentSlot>,
    next_order: u64,
}

impl AgentRegistry {
    pub fn register(&mut self, registration: AgentRegistration, conn: ConnId) -> Result<(), AgentError> {
        if registration.agent_id.is_empty() {
            return Err(AgentError::InvalidRegistration("empty agent_id".into()));
        }
        if registration.capacity == 0 {
            return Err(AgentError::InvalidRegistration("capacity must be at least 1".into()));
        }
        if registration.scenario_ids.is_empty() {
            return Err(AgentError::InvalidRegistration("no scenario_ids".into()));
        }
        if self.slots.contains_key(&registration.agent_id) {
            return Err(AgentError::DuplicateAgentId(registration.agent_id));
        }
        let order = self.next_order;
        self.next_order += 1;
        self.slots.insert(
            registration.agent_id.clone(),
            AgentSlot {
                registration,
                conn,
                load: 0,
                order,
            },
        );
        Ok(())
    }

    /// Drops a registration; its live sessions are the caller's concern.
    pub fn unregister(&mut self, agent_id: &str) -> bool {
        self.slots.remove(agent_id).is_some()
    }

    pub fn is_registered(&self, agent_id: &str) -> bool {
        self.slots.contains_key(agent_id)
    }

    pub fn conn_of(&self, agent_id: &str) -> Option<ConnId> {
        self.slots.get(agent_id).map(|s| s.conn)
    }

    pub fn load_of(&self, agent_id: &str) -> Option<u32> {
        self.slots.get(agent_id).map(|s| s.load)
    }

    pub fn agents_on(&self, conn: ConnId) -> Vec<String> {
        self.slots
            .values()
            .filter(|s| s.conn == conn)
            .map(|s| s.registration.agent_id.clone())
            .collect()
    }

    /// Least-loaded agent with spare capacity for `scenario_id`; ties go to
    /// the earliest registration.
    pub fn available_for(&self, scenario_id: &str) -> Option<&str> {
        self.slots
            .values()
            .filter(|s| s.load < s.registration.capacity)
            .filter(|s| s.registration.scenario_ids.iter().any(|id| id == scenario_id))
            .min_by_key(|s| (s.load, s.order))
            .map(|s| s.registration.agent_id.as_str())
    }

    pub(crate) fn claim(&mut self, agent_id: &str) -> Option<ConnId> {
        let slot = self.slots.get_mut(agent_id)?;
        slot.load += 1;
        Some(slot.conn)
    }

    pub(crate) fn release(&mut self, agent_id: &str) {
        if let Some(slot) = self.slots.get_mut(agent_id) {
            slot.load = slot.load.saturating_sub(1);
        }
    }
}

/// What an assistant does in response to one user message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssistantAction {
    Say(String),
    Command(CommandKind),
}

/// Decides the assistant's actions for each user message. Implemented by
/// the bundled agents and by scripted wizards in tests.
pub trait AssistantPolicy: Send {
    fn respond(&mut self, text: &str, scene: &SceneState, catalog: &Catalog) -> Vec<AssistantAction>;
}

/// Echoes every user message and, on the n-th message, also performs the
/// n-th scripted step.
#[derive(Debug, Clone, Default)]
pub struct EchoAgent {
    script: Vec<Vec<CommandKind>>,
    turn: usize,
}

impl EchoAgent {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_script(script: Vec<Vec<CommandKind>>) -> Self {
        EchoAgent { script, turn: 0 }
    }
}

impl AssistantPolicy for EchoAgent {
    fn respond(&mut self, text: &str, _scene: &SceneState, _catalog: &Catalog) -> Vec<AssistantAction> {
        let mut actions: Vec<AssistantAction> = self
            .script
            .get(self.turn)
            .into_iter()
            .flatten()
            .cloned()
            .map(AssistantAction::Command)
            .collect();
        self.turn += 1;
        actions.push(AssistantAction::Say(format!("echo: {text}")));
        actions
    }
}

/// Rule-based assistant: answers attribute questions from the catalog and
/// follows "rotate", "zoom" and "show me" requests on the focal object.
#[derive(Debug, Clone, Default)]
pub struct ReferenceAgent;

impl ReferenceAgent {
    pub fn new() -> Self {
        ReferenceAgent
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

fn has(words: &[String], w: &str) -> bool {
    words.iter().any(|x| x == w)
}

/// The object a request refers to: one named in the text, else the focal
/// object, else the first object.
fn target_object<'a>(said: &[String], scene: &'a SceneState, catalog: &Catalog) -> Option<&'a str> {
    let named = scene.objects.iter().find(|o| {
        catalog.get(&o.item_id).is_some_and(|item| {
            has(said, &item.category.to_ascii_lowercase()) || words(&item.display_name).iter().any(|n| has(said, n))
        })
    });
    named
        .map(|o| o.object_id.as_str())
        .or(scene.focal_object.as_deref())
        .or(scene.objects.first().map(|o| o.object_id.as_str()))
}

fn describe(object_id: &str, scene: &SceneState, catalog: &Catalog) -> Option<String> {
    let obj = scene.object(object_id)?;
    let item = catalog.get(&obj.item_id)?;
    let attrs: Vec<String> = obj.attributes.iter().map(|(k, v)| format!("{k} {v}")).collect();
    let dollars = item.price_cents / 100;
    let cents = item.price_cents % 100;
    Some(format!(
        "The {} has {} and costs ${dollars}.{cents:02}.",
        item.display_name,
        attrs.join(", ")
    ))
}

/// A walkable cell next to the user, for newly shown items.
fn spot_near_user(scene: &SceneState) -> Option<Transform> {
    let (col, row) = scene.user_cell()?;
    [(0, 1), (1, 0), (-1, 0), (0, -1), (1, 1), (-1, 1), (1, -1), (-1, -1)]
        .into_iter()
        .map(|(dc, dr)| (col + dc, row + dr))
        .find(|&(c, r)| scene.floor.is_walkable(c, r))
        .map(|(c, r)| {
            let (x, y) = scene.floor.cell_center(c, r);
            Transform::at(x, y)
        })
}

impl AssistantPolicy for ReferenceAgent {
    fn respond(&mut self, text: &str, scene: &SceneState, catalog: &Catalog) -> Vec<AssistantAction> {
        let w = words(text);
        let target = target_object(&w, scene, catalog).map(str::to_string);
        let mut actions = Vec::new();

        if has(&w, "show") {
            let wanted = catalog.items().iter().find(|item| {
                has(&w, &item.category.to_ascii_lowercase()) || words(&item.display_name).iter().any(|n| has(&w, n))
            });
            let Some(item) = wanted else {
                return vec![AssistantAction::Say("Sorry, we don't carry that.".into())];
            };
            let existing = scene.objects.iter().find(|o| o.item_id == item.item_id);
            let object_id = match existing {
                Some(o) => o.object_id.clone(),
                None => {
                    let Some(transform) = spot_near_user(scene) else {
                        return vec![AssistantAction::Say("There is no room to show that here.".into())];
                    };
                    actions.push(AssistantAction::Command(CommandKind::AddObject {
                        item_id: item.item_id.clone(),
                        transform,
                    }));
                    format!("o{}", scene.next_object_index)
                }
            };
            actions.push(AssistantAction::Command(CommandKind::FocusItem { object_id }));
            actions.push(AssistantAction::Say(format!("Here is the {}.", item.display_name)));
            return actions;
        }

        let Some(object_id) = target else {
            return vec![AssistantAction::Say(
                "There is nothing here yet. What would you like to see?".into(),
            )];
        };

        if has(&w, "rotate") || has(&w, "turn") || has(&w, "spin") {
            let dyaw_deg = if has(&w, "left") || has(&w, "counterclockwise") {
                -90
            } else {
                90
            };
            actions.push(AssistantAction::Command(CommandKind::RotateItem {
                object_id: object_id.clone(),
                dyaw_deg,
            }));
            actions.push(AssistantAction::Say("Rotated it for you.".into()));
        } else if has(&w, "zoom") || has(&w, "closer") || has(&w, "bigger") || has(&w, "smaller") {
            let out = has(&w, "out") || has(&w, "smaller");
            actions.push(AssistantAction::Command(CommandKind::ZoomItem {
                object_id: object_id.clone(),
                dzoom_steps: if out { -1 } else { 1 },
            }));
            actions.push(AssistantAction::Say(
                if out { "Zoomed out." } else { "Zoomed in." }.into(),
            ));
        } else if let Some(value) = w.iter().find(|x| {
            (has(&w, "make") || has(&w, "in") || has(&w, "change"))
                && (color_hex(x).is_some() || PATTERNS.contains(&x.as_str()))
        }) {
            let key = if PATTERNS.contains(&value.as_str()) {
                "pattern"
            } else {
                "color"
            };
            actions.push(AssistantAction::Command(CommandKind::SetAttribute {
                object_id: object_id.clone(),
                key: key.into(),
                value: value.clone(),
            }));
            actions.push(AssistantAction::Say(format!("Here it is in {value}.")));
        } else if let Some(description) = describe(&object_id, scene, catalog) {
            actions.push(AssistantAction::Say(description));
        }
        if actions.is_empty() {
            actions.push(AssistantAction::Say(
                "Could you tell me more about what you are looking for?".into(),
            ));
        }
        actions
    }
}

/// Wraps an action as a command from the assistant seat `role`.
pub fn as_command(kind: CommandKind, role: Role) -> SceneCommand {
    SceneCommand {
        kind,
        issuer_role: role,
    }
}
