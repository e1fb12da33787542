//! Scenario documents (TOML) and the scenario library.
//!
//! See `docs/scenario-format.md` for the schema. The shipped `shopping` and
//! `navigation` scenarios are compiled in.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use super::command::{CommandVariant, PermissionTable};
use super::{check_transform, Catalog, CatalogItem, Floor, Role, SceneContext, SceneObject, SceneState, Transform};

pub const SHOPPING_SCENARIO: &str = include_str!("../../scenarios/shopping.toml");
pub const NAVIGATION_SCENARIO: &str = include_str!("../../scenarios/navigation.toml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("malformed scenario{}: {field}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    MalformedScenario {
        line: Option<usize>,
        field: String,
        message: String,
    },
    #[error("duplicate scenario id '{0}'")]
    DuplicateScenario(String),
    #[error("reading scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    description: String,
    floor: FloorDoc,
    user: toml::Spanned<UserDoc>,
    focus: Option<toml::Spanned<String>>,
    #[serde(default)]
    catalog: Vec<toml::Spanned<CatalogDoc>>,
    #[serde(default)]
    placements: Vec<toml::Spanned<PlacementDoc>>,
    #[serde(default)]
    permissions: Vec<toml::Spanned<PermissionDoc>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FloorDoc {
    cell_mm: i64,
    rows: toml::Spanned<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserDoc {
    col: i64,
    row: i64,
    #[serde(default)]
    yaw_deg: i32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogDoc {
    item_id: String,
    category: String,
    display_name: String,
    price_cents: u64,
    footprint_mm: (i64, i64),
    attributes: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlacementDoc {
    item_id: String,
    col: Option<i64>,
    row: Option<i64>,
    x_mm: Option<i64>,
    y_mm: Option<i64>,
    #[serde(default)]
    yaw_deg: i32,
    #[serde(default = "default_zoom")]
    zoom_pct: i32,
}

fn default_zoom() -> i32 {
    100
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PermissionDoc {
    command: String,
    roles: Vec<Role>,
}

/// A parsed scenario: initial state at version 0 plus the session rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedScenario {
    pub scenario_id: String,
    pub title: String,
    pub description: String,
    pub state: SceneState,
    pub catalog: Catalog,
    /// Per-variant role sets that replace the default permission entries.
    pub permission_overrides: Vec<(CommandVariant, Vec<Role>)>,
}

impl LoadedScenario {
    pub fn context(&self) -> SceneContext {
        let mut permissions = PermissionTable::default();
        for (variant, roles) in &self.permission_overrides {
            permissions.set(*variant, roles.clone());
        }
        SceneContext {
            catalog: self.catalog.clone(),
            permissions,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

struct Diag<'a> {
    text: &'a str,
}

impl Diag<'_> {
    fn err(&self, span: Option<Range<usize>>, field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
        ScenarioError::MalformedScenario {
            line: span.map(|s| line_of(self.text, s.start)),
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<LoadedScenario, ScenarioError> {
    let diag = Diag { text };
    if text.trim().is_empty() {
        return Err(diag.err(None, "document", "scenario document is empty"));
    }
    let doc: ScenarioDoc = toml::from_str(text).map_err(|e| {
        let field = e
            .message()
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "document".to_string());
        diag.err(e.span(), field, e.message().trim().to_string())
    })?;

    if doc.id.is_empty()
        || !doc
            .id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(diag.err(None, "id", "scenario id must be a non-empty [A-Za-z0-9_-] string"));
    }

    let floor = Floor {
        cell_mm: doc.floor.cell_mm,
        rows: doc.floor.rows.get_ref().clone(),
    };
    floor
        .validate()
        .map_err(|m| diag.err(Some(doc.floor.rows.span()), "floor", m))?;

    if doc.catalog.is_empty() {
        return Err(diag.err(None, "catalog", "catalog must list at least one item"));
    }
    let mut items = Vec::with_capacity(doc.catalog.len());
    for (i, entry) in doc.catalog.iter().enumerate() {
        let c = entry.get_ref();
        let field = format!("catalog[{i}]");
        if c.item_id.is_empty() {
            return Err(diag.err(Some(entry.span()), format!("{field}.item_id"), "item id is empty"));
        }
        if items.iter().any(|it: &CatalogItem| it.item_id == c.item_id) {
            return Err(diag.err(
                Some(entry.span()),
                format!("{field}.item_id"),
                format!("duplicate item id '{}'", c.item_id),
            ));
        }
        for key in ["color", "pattern"] {
            if !c.attributes.contains_key(key) {
                return Err(diag.err(
                    Some(entry.span()),
                    format!("{field}.attributes.{key}"),
                    "required attribute missing",
                ));
            }
        }
        if super::color_hex(&c.attributes["color"]).is_none() {
            return Err(diag.err(Some(entry.span()), format!("{field}.attributes.color"), "unknown color"));
        }
        if !super::PATTERNS.contains(&c.attributes["pattern"].as_str()) {
            return Err(diag.err(
                Some(entry.span()),
                format!("{field}.attributes.pattern"),
                "unknown pattern",
            ));
        }
        if c.footprint_mm.0 <= 0 || c.footprint_mm.1 <= 0 {
            return Err(diag.err(
                Some(entry.span()),
                format!("{field}.footprint_mm"),
                "footprint must be positive",
            ));
        }
        items.push(CatalogItem {
            item_id: c.item_id.clone(),
            category: c.category.clone(),
            display_name: c.display_name.clone(),
            attributes: c.attributes.clone(),
            price_cents: c.price_cents,
            footprint_mm: c.footprint_mm,
        });
    }
    let catalog = Catalog::new(items).map_err(|e| diag.err(None, "catalog", e.to_string()))?;

    let user = doc.user.get_ref();
    if !floor.is_walkable(user.col, user.row) {
        return Err(diag.err(
            Some(doc.user.span()),
            "user",
            format!("start cell ({}, {}) is not walkable", user.col, user.row),
        ));
    }
    let (ux, uy) = floor.cell_center(user.col, user.row);
    let user_pose = Transform {
        x_mm: ux,
        y_mm: uy,
        yaw_deg: user.yaw_deg,
        zoom_pct: 100,
    };
    check_transform(&floor, &user_pose).map_err(|m| diag.err(Some(doc.user.span()), "user.yaw_deg", m))?;

    let mut objects = Vec::with_capacity(doc.placements.len());
    for (i, entry) in doc.placements.iter().enumerate() {
        let p = entry.get_ref();
        let field = format!("placements[{i}]");
        let item = catalog.get(&p.item_id).ok_or_else(|| {
            diag.err(
                Some(entry.span()),
                format!("{field}.item_id"),
                format!("unknown catalog item '{}'", p.item_id),
            )
        })?;
        let (x_mm, y_mm) = match (p.col, p.row, p.x_mm, p.y_mm) {
            (Some(col), Some(row), None, None) => floor.cell_center(col, row),
            (None, None, Some(x), Some(y)) => (x, y),
            _ => return Err(diag.err(Some(entry.span()), field, "placement needs either col/row or x_mm/y_mm")),
        };
        let transform = Transform {
            x_mm,
            y_mm,
            yaw_deg: p.yaw_deg,
            zoom_pct: p.zoom_pct,
        };
        check_transform(&floor, &transform).map_err(|m| diag.err(Some(entry.span()), field.clone(), m))?;
        objects.push(SceneObject {
            object_id: format!("o{i}"),
            item_id: item.item_id.clone(),
            attributes: item.attributes.clone(),
            footprint_mm: item.footprint_mm,
            transform,
        });
    }

    let focal_object = match &doc.focus {
        None => None,
        Some(f) => {
            let id = f.get_ref();
            if !objects.iter().any(|o| &o.object_id == id) {
                return Err(diag.err(Some(f.span()), "focus", format!("no placed object '{id}'")));
            }
            Some(id.clone())
        }
    };

    let mut permission_overrides = Vec::new();
    for (i, entry) in doc.permissions.iter().enumerate() {
        let p = entry.get_ref();
        let variant = CommandVariant::parse(&p.command).ok_or_else(|| {
            diag.err(
                Some(entry.span()),
                format!("permissions[{i}].command"),
                format!("unknown command '{}'", p.command),
            )
        })?;
        let mut roles = p.roles.clone();
        roles.sort();
        roles.dedup();
        permission_overrides.push((variant, roles));
    }

    let state = SceneState {
        version: 0,
        floor,
        next_object_index: objects.len() as u64,
        objects,
        user_pose,
        focal_object,
    };
    state.validate().map_err(|e| diag.err(None, "scene", e.to_string()))?;

    Ok(LoadedScenario {
        scenario_id: doc.id,
        title: doc.title,
        description: doc.description,
        state,
        catalog,
        permission_overrides,
    })
}

/// Scenarios available to a server, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct ScenarioLibrary {
    scenarios: BTreeMap<String, Arc<LoadedScenario>>,
}

impl ScenarioLibrary {
    /// The two shipped scenarios.
    pub fn builtin() -> Self {
        let mut lib = ScenarioLibrary::default();
        for text in [SHOPPING_SCENARIO, NAVIGATION_SCENARIO] {
            lib.insert(load_scenario(text).expect("shipped scenarios are valid"))
                .expect("shipped scenario ids are distinct");
        }
        lib
    }

    /// Builtins plus every `*.toml` in `dir`; a file may replace a builtin
    /// with the same id but two files may not share one.
    pub fn with_dir(dir: &Path) -> Result<Self, ScenarioError> {
        let mut lib = Self::builtin();
        let io = |e| ScenarioError::Io {
            path: dir.display().to_string(),
            source: e,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        let mut from_files = std::collections::BTreeSet::new();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(|e| ScenarioError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            let scenario = load_scenario(&text)?;
            if !from_files.insert(scenario.scenario_id.clone()) {
                return Err(ScenarioError::DuplicateScenario(scenario.scenario_id));
            }
            lib.scenarios.insert(scenario.scenario_id.clone(), Arc::new(scenario));
        }
        Ok(lib)
    }

    pub fn insert(&mut self, scenario: LoadedScenario) -> Result<(), ScenarioError> {
        if self.scenarios.contains_key(&scenario.scenario_id) {
            return Err(ScenarioError::DuplicateScenario(scenario.scenario_id));
        }
        self.scenarios.insert(scenario.scenario_id.clone(), Arc::new(scenario));
        Ok(())
    }

    pub fn get(&self, scenario_id: &str) -> Option<&Arc<LoadedScenario>> {
        self.scenarios.get(scenario_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.scenarios.keys().map(String::as_str)
    }
}
