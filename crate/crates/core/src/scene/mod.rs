//! Deterministic scene representation.
//!
//! All geometry is integral: positions in millimeters, headings in degrees,
//! zoom as a percentage taken from a fixed ladder. The canonical JSON
//! serialization of a [`SceneState`] is byte-stable, which makes the SHA-256
//! digest usable for replica verification across processes.

mod command;
mod render;
mod scenario;

pub use command::{apply_command, CommandKind, CommandVariant, PermissionTable, SceneCommand};
pub use render::{color_hex, render_snapshot, PATTERNS};
pub use scenario::{
    load_scenario, LoadedScenario, ScenarioError, ScenarioLibrary, NAVIGATION_SCENARIO, SHOPPING_SCENARIO,
};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Zoom steps available to [`CommandKind::ZoomItem`].
pub const ZOOM_LADDER: [i32; 8] = [25, 50, 75, 100, 150, 200, 300, 400];

/// Rotation granularity in degrees.
pub const ROTATION_STEP_DEG: i32 = 15;

/// Who issued a command, or which seat a participant occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Wizard,
    Agent,
    System,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::User, Role::Wizard, Role::Agent, Role::System];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Wizard => "wizard",
            Role::Agent => "agent",
            Role::System => "system",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transform {
    pub x_mm: i64,
    pub y_mm: i64,
    pub yaw_deg: i32,
    pub zoom_pct: i32,
}

impl Transform {
    pub fn at(x_mm: i64, y_mm: i64) -> Self {
        Transform {
            x_mm,
            y_mm,
            yaw_deg: 0,
            zoom_pct: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: String,
    pub category: String,
    pub display_name: String,
    pub attributes: BTreeMap<String, String>,
    pub price_cents: u64,
    pub footprint_mm: (i64, i64),
}

/// The item set a session can draw from. Item ids are unique.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Catalog {
    items: Vec<CatalogItem>,
}

impl Catalog {
    pub fn new(items: Vec<CatalogItem>) -> Result<Self, SceneError> {
        let mut seen = std::collections::BTreeSet::new();
        for item in &items {
            if !seen.insert(item.item_id.as_str()) {
                return Err(SceneError::InvalidCommand(format!(
                    "duplicate catalog item '{}'",
                    item.item_id
                )));
            }
            for key in ["color", "pattern"] {
                if !item.attributes.contains_key(key) {
                    return Err(SceneError::InvalidAttribute(format!(
                        "catalog item '{}' lacks required attribute '{key}'",
                        item.item_id
                    )));
                }
            }
            if item.footprint_mm.0 <= 0 || item.footprint_mm.1 <= 0 {
                return Err(SceneError::InvalidCommand(format!(
                    "catalog item '{}' has a non-positive footprint",
                    item.item_id
                )));
            }
        }
        Ok(Catalog { items })
    }

    pub fn get(&self, item_id: &str) -> Option<&CatalogItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A placed catalog item. Attributes and footprint are copied from the
/// catalog on placement so a state can be rendered without the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: String,
    pub item_id: String,
    pub attributes: BTreeMap<String, String>,
    pub footprint_mm: (i64, i64),
    pub transform: Transform,
}

/// Walkable/blocked occupancy grid. `rows[0]` is the northmost row; `.` is
/// walkable and `#` is blocked. Cell `(col, row)` counts rows from the south.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Floor {
    pub cell_mm: i64,
    pub rows: Vec<String>,
}

impl Floor {
    pub fn cols(&self) -> i64 {
        self.rows.first().map_or(0, |r| r.len() as i64)
    }

    pub fn row_count(&self) -> i64 {
        self.rows.len() as i64
    }

    pub fn width_mm(&self) -> i64 {
        self.cols() * self.cell_mm
    }

    pub fn depth_mm(&self) -> i64 {
        self.row_count() * self.cell_mm
    }

    pub fn contains_mm(&self, x_mm: i64, y_mm: i64) -> bool {
        (0..self.width_mm()).contains(&x_mm) && (0..self.depth_mm()).contains(&y_mm)
    }

    pub fn cell_of(&self, x_mm: i64, y_mm: i64) -> Option<(i64, i64)> {
        self.contains_mm(x_mm, y_mm)
            .then(|| (x_mm.div_euclid(self.cell_mm), y_mm.div_euclid(self.cell_mm)))
    }

    pub fn is_walkable(&self, col: i64, row: i64) -> bool {
        if col < 0 || row < 0 || col >= self.cols() || row >= self.row_count() {
            return false;
        }
        let line = &self.rows[(self.row_count() - 1 - row) as usize];
        line.as_bytes()[col as usize] == b'.'
    }

    pub fn cell_center(&self, col: i64, row: i64) -> (i64, i64) {
        (
            col * self.cell_mm + self.cell_mm / 2,
            row * self.cell_mm + self.cell_mm / 2,
        )
    }

    pub fn blocked_cells(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        let rows = self.row_count();
        self.rows.iter().enumerate().flat_map(move |(line, text)| {
            text.bytes()
                .enumerate()
                .filter(|(_, b)| *b == b'#')
                .map(move |(col, _)| (col as i64, rows - 1 - line as i64))
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.cell_mm <= 0 {
            return Err("cell_mm must be positive".into());
        }
        let cols = self.cols();
        if cols == 0 {
            return Err("floor must have at least one cell".into());
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() as i64 != cols {
                return Err(format!("floor row {} has {} cells, expected {cols}", i + 1, row.len()));
            }
            if let Some(c) = row.chars().find(|c| *c != '.' && *c != '#') {
                return Err(format!("floor row {} contains invalid cell '{c}'", i + 1));
            }
        }
        Ok(())
    }
}

/// Versioned authoritative world state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneState {
    pub version: u64,
    pub floor: Floor,
    pub objects: Vec<SceneObject>,
    pub user_pose: Transform,
    pub focal_object: Option<String>,
    /// Count of objects ever placed; the next id is `o{next_object_index}`.
    pub next_object_index: u64,
}

/// SHA-256 over the canonical serialization of a [`SceneState`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl SceneState {
    /// Canonical serialization: compact JSON with struct fields in
    /// declaration order and attributes in key order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("scene state is always serializable")
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, SceneError> {
        let state: SceneState = serde_json::from_slice(bytes)
            .map_err(|e| SceneError::InvalidState(format!("undecodable scene state: {e}")))?;
        state.validate()?;
        Ok(state)
    }

    pub fn digest(&self) -> Digest {
        digest(self)
    }

    pub fn object(&self, object_id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn user_cell(&self) -> Option<(i64, i64)> {
        self.floor.cell_of(self.user_pose.x_mm, self.user_pose.y_mm)
    }

    /// Checks every structural invariant of the state.
    pub fn validate(&self) -> Result<(), SceneError> {
        self.floor.validate().map_err(SceneError::InvalidState)?;
        let (col, row) = self
            .user_cell()
            .ok_or_else(|| SceneError::InvalidState("user pose outside the floor".into()))?;
        if !self.floor.is_walkable(col, row) {
            return Err(SceneError::InvalidState(format!(
                "user pose on blocked cell ({col}, {row})"
            )));
        }
        check_transform(&self.floor, &self.user_pose).map_err(SceneError::InvalidState)?;
        let mut ids = std::collections::BTreeSet::new();
        for obj in &self.objects {
            if !ids.insert(obj.object_id.as_str()) {
                return Err(SceneError::InvalidState(format!(
                    "duplicate object id '{}'",
                    obj.object_id
                )));
            }
            check_transform(&self.floor, &obj.transform).map_err(SceneError::InvalidState)?;
        }
        if let Some(focal) = &self.focal_object {
            if self.object(focal).is_none() {
                return Err(SceneError::InvalidState(format!(
                    "focal object '{focal}' does not exist"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_transform(floor: &Floor, t: &Transform) -> Result<(), String> {
    if !floor.contains_mm(t.x_mm, t.y_mm) {
        return Err(format!("position ({}, {}) outside the floor", t.x_mm, t.y_mm));
    }
    if !(0..360).contains(&t.yaw_deg) || t.yaw_deg % ROTATION_STEP_DEG != 0 {
        return Err(format!(
            "yaw {} not a multiple of {ROTATION_STEP_DEG} in [0, 360)",
            t.yaw_deg
        ));
    }
    if !ZOOM_LADDER.contains(&t.zoom_pct) {
        return Err(format!("zoom {} not on the zoom ladder", t.zoom_pct));
    }
    Ok(())
}

/// Digest of the canonical serialization.
pub fn digest(state: &SceneState) -> Digest {
    Digest(Sha256::digest(state.canonical_bytes()).into())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SceneError {
    #[error("role '{role}' may not issue {variant}")]
    PermissionDenied { role: Role, variant: CommandVariant },
    #[error("unknown object '{0}'")]
    UnknownObject(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("unknown catalog item '{0}'")]
    UnknownCatalogItem(String),
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("invalid attribute: {0}")]
    InvalidAttribute(String),
    #[error("invalid scene state: {0}")]
    InvalidState(String),
}

impl SceneError {
    /// Stable machine-readable code used on the wire and in logs.
    pub fn code(&self) -> &'static str {
        match self {
            SceneError::PermissionDenied { .. } => "permission_denied",
            SceneError::UnknownObject(_) => "unknown_object",
            SceneError::OutOfBounds(_) => "out_of_bounds",
            SceneError::UnknownCatalogItem(_) => "unknown_catalog_item",
            SceneError::InvalidCommand(_) => "invalid_command",
            SceneError::InvalidAttribute(_) => "invalid_attribute",
            SceneError::InvalidState(_) => "invalid_state",
        }
    }
}

/// Catalog plus permission table: everything besides the state itself that
/// [`apply_command`] consults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneContext {
    pub catalog: Catalog,
    pub permissions: PermissionTable,
}

impl SceneContext {
    pub fn new(catalog: Catalog) -> Self {
        SceneContext {
            catalog,
            permissions: PermissionTable::default(),
        }
    }
}
