use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::render::{color_hex, PATTERNS};
use super::{check_transform, Role, SceneContext, SceneError, SceneObject, SceneState, Transform};
use super::{ROTATION_STEP_DEG, ZOOM_LADDER};

/// The closed vocabulary of scene mutations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CommandKind {
    Navigate {
        dx_cells: i32,
        dy_cells: i32,
    },
    TurnUser {
        dyaw_deg: i32,
    },
    RotateItem {
        object_id: String,
        dyaw_deg: i32,
    },
    ZoomItem {
        object_id: String,
        dzoom_steps: i32,
    },
    FocusItem {
        object_id: String,
    },
    SetAttribute {
        object_id: String,
        key: String,
        value: String,
    },
    AddObject {
        item_id: String,
        transform: Transform,
    },
    RemoveObject {
        object_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCommand {
    #[serde(flatten)]
    pub kind: CommandKind,
    pub issuer_role: Role,
}

impl SceneCommand {
    pub fn new(kind: CommandKind, issuer_role: Role) -> Self {
        SceneCommand { kind, issuer_role }
    }
}

/// Fieldless mirror of [`CommandKind`], used as the permission table key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandVariant {
    Navigate,
    TurnUser,
    RotateItem,
    ZoomItem,
    FocusItem,
    SetAttribute,
    AddObject,
    RemoveObject,
}

impl CommandVariant {
    pub const ALL: [CommandVariant; 8] = [
        CommandVariant::Navigate,
        CommandVariant::TurnUser,
        CommandVariant::RotateItem,
        CommandVariant::ZoomItem,
        CommandVariant::FocusItem,
        CommandVariant::SetAttribute,
        CommandVariant::AddObject,
        CommandVariant::RemoveObject,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CommandVariant::Navigate => "navigate",
            CommandVariant::TurnUser => "turn_user",
            CommandVariant::RotateItem => "rotate_item",
            CommandVariant::ZoomItem => "zoom_item",
            CommandVariant::FocusItem => "focus_item",
            CommandVariant::SetAttribute => "set_attribute",
            CommandVariant::AddObject => "add_object",
            CommandVariant::RemoveObject => "remove_object",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for CommandVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl CommandKind {
    pub fn variant(&self) -> CommandVariant {
        match self {
            CommandKind::Navigate { .. } => CommandVariant::Navigate,
            CommandKind::TurnUser { .. } => CommandVariant::TurnUser,
            CommandKind::RotateItem { .. } => CommandVariant::RotateItem,
            CommandKind::ZoomItem { .. } => CommandVariant::ZoomItem,
            CommandKind::FocusItem { .. } => CommandVariant::FocusItem,
            CommandKind::SetAttribute { .. } => CommandVariant::SetAttribute,
            CommandKind::AddObject { .. } => CommandVariant::AddObject,
            CommandKind::RemoveObject { .. } => CommandVariant::RemoveObject,
        }
    }
}

/// Which roles may issue which command variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PermissionTable {
    allowed: BTreeMap<CommandVariant, Vec<Role>>,
}

impl Default for PermissionTable {
    /// The user moves and turns; either participant may rotate or zoom; only
    /// the assistant seat (wizard or agent) edits the scene.
    fn default() -> Self {
        use CommandVariant::*;
        let user = vec![Role::User];
        let any = vec![Role::User, Role::Wizard, Role::Agent];
        let assistant = vec![Role::Wizard, Role::Agent];
        let allowed = BTreeMap::from([
            (Navigate, user.clone()),
            (TurnUser, user),
            (RotateItem, any.clone()),
            (ZoomItem, any),
            (FocusItem, assistant.clone()),
            (SetAttribute, assistant.clone()),
            (AddObject, assistant.clone()),
            (RemoveObject, assistant),
        ]);
        PermissionTable { allowed }
    }
}

impl PermissionTable {
    pub fn allows(&self, variant: CommandVariant, role: Role) -> bool {
        self.allowed.get(&variant).is_some_and(|roles| roles.contains(&role))
    }

    /// Replaces the role set of one variant.
    pub fn set(&mut self, variant: CommandVariant, mut roles: Vec<Role>) {
        roles.sort();
        roles.dedup();
        self.allowed.insert(variant, roles);
    }

    pub fn roles(&self, variant: CommandVariant) -> &[Role] {
        self.allowed.get(&variant).map_or(&[], Vec::as_slice)
    }
}

/// Applies one command, producing the next state. The input is never
/// modified; on error no new state exists and the version does not advance.
pub fn apply_command(state: &SceneState, cmd: &SceneCommand, ctx: &SceneContext) -> Result<SceneState, SceneError> {
    let variant = cmd.kind.variant();
    if !ctx.permissions.allows(variant, cmd.issuer_role) {
        return Err(SceneError::PermissionDenied {
            role: cmd.issuer_role,
            variant,
        });
    }

    let mut next = state.clone();
    match &cmd.kind {
        CommandKind::Navigate { dx_cells, dy_cells } => {
            let floor = &next.floor;
            let x = next.user_pose.x_mm + i64::from(*dx_cells) * floor.cell_mm;
            let y = next.user_pose.y_mm + i64::from(*dy_cells) * floor.cell_mm;
            match floor.cell_of(x, y) {
                Some((col, row)) if floor.is_walkable(col, row) => {
                    next.user_pose.x_mm = x;
                    next.user_pose.y_mm = y;
                }
                Some((col, row)) => return Err(SceneError::OutOfBounds(format!("cell ({col}, {row}) is blocked"))),
                None => return Err(SceneError::OutOfBounds("destination outside the floor".into())),
            }
        }
        CommandKind::TurnUser { dyaw_deg } => {
            next.user_pose.yaw_deg = rotate(next.user_pose.yaw_deg, *dyaw_deg)?;
        }
        CommandKind::RotateItem { object_id, dyaw_deg } => {
            let obj = object_mut(&mut next, object_id)?;
            obj.transform.yaw_deg = rotate(obj.transform.yaw_deg, *dyaw_deg)?;
        }
        CommandKind::ZoomItem { object_id, dzoom_steps } => {
            if *dzoom_steps != 1 && *dzoom_steps != -1 {
                return Err(SceneError::InvalidCommand(format!(
                    "zoom step must be -1 or +1, got {dzoom_steps}"
                )));
            }
            let obj = object_mut(&mut next, object_id)?;
            let idx = ZOOM_LADDER
                .iter()
                .position(|z| *z == obj.transform.zoom_pct)
                .ok_or_else(|| SceneError::InvalidState("zoom off the ladder".into()))?;
            let target = idx as i64 + i64::from(*dzoom_steps);
            if !(0..ZOOM_LADDER.len() as i64).contains(&target) {
                return Err(SceneError::OutOfBounds(format!(
                    "zoom ladder end reached at {}%",
                    obj.transform.zoom_pct
                )));
            }
            obj.transform.zoom_pct = ZOOM_LADDER[target as usize];
        }
        CommandKind::FocusItem { object_id } => {
            object_mut(&mut next, object_id)?;
            next.focal_object = Some(object_id.clone());
        }
        CommandKind::SetAttribute { object_id, key, value } => {
            let obj = object_mut(&mut next, object_id)?;
            validate_attribute(key, value)?;
            obj.attributes.insert(key.clone(), value.clone());
        }
        CommandKind::AddObject { item_id, transform } => {
            let item = ctx
                .catalog
                .get(item_id)
                .ok_or_else(|| SceneError::UnknownCatalogItem(item_id.clone()))?;
            if !next.floor.contains_mm(transform.x_mm, transform.y_mm) {
                return Err(SceneError::OutOfBounds(format!(
                    "placement ({}, {}) outside the floor",
                    transform.x_mm, transform.y_mm
                )));
            }
            check_transform(&next.floor, transform).map_err(SceneError::InvalidCommand)?;
            let object_id = format!("o{}", next.next_object_index);
            next.next_object_index += 1;
            next.objects.push(SceneObject {
                object_id,
                item_id: item.item_id.clone(),
                attributes: item.attributes.clone(),
                footprint_mm: item.footprint_mm,
                transform: *transform,
            });
        }
        CommandKind::RemoveObject { object_id } => {
            let idx = next
                .objects
                .iter()
                .position(|o| &o.object_id == object_id)
                .ok_or_else(|| SceneError::UnknownObject(object_id.clone()))?;
            next.objects.remove(idx);
            if next.focal_object.as_deref() == Some(object_id.as_str()) {
                next.focal_object = None;
            }
        }
    }
    next.version += 1;
    Ok(next)
}

fn object_mut<'a>(state: &'a mut SceneState, object_id: &str) -> Result<&'a mut SceneObject, SceneError> {
    state
        .objects
        .iter_mut()
        .find(|o| o.object_id == object_id)
        .ok_or_else(|| SceneError::UnknownObject(object_id.to_string()))
}

fn rotate(yaw: i32, delta: i32) -> Result<i32, SceneError> {
    if delta % ROTATION_STEP_DEG != 0 {
        return Err(SceneError::InvalidCommand(format!(
            "rotation {delta} is not a multiple of {ROTATION_STEP_DEG}"
        )));
    }
    Ok((i64::from(yaw) + i64::from(delta)).rem_euclid(360) as i32)
}

fn validate_attribute(key: &str, value: &str) -> Result<(), SceneError> {
    let key_ok = !key.is_empty()
        && key.len() <= 32
        && key.starts_with(|c: char| c.is_ascii_lowercase())
        && key
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
    if !key_ok {
        return Err(SceneError::InvalidAttribute(format!("bad attribute key '{key}'")));
    }
    if value.is_empty() || value.len() > 64 || value.chars().any(char::is_control) {
        return Err(SceneError::InvalidAttribute(format!("bad value for '{key}'")));
    }
    match key {
        "color" if color_hex(value).is_none() => Err(SceneError::InvalidAttribute(format!("unknown color '{value}'"))),
        "pattern" if !PATTERNS.contains(&value) => {
            Err(SceneError::InvalidAttribute(format!("unknown pattern '{value}'")))
        }
        _ => Ok(()),
    }
}
