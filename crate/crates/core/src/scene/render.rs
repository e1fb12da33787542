//! Top-down SVG snapshots.
//!
//! Coordinates stay in millimeters (the `viewBox` is the floor extent) and
//! every number written is an integer, so output is byte-stable. The world
//! y axis points north; SVG's points down, hence the flip in [`svg_y`].

use std::fmt::Write as _;

use super::SceneState;

/// Hatch styles available for the `pattern` attribute.
pub const PATTERNS: [&str; 6] = ["solid", "striped", "checkered", "dotted", "floral", "plaid"];

const PALETTE: [(&str, &str); 16] = [
    ("beige", "#d8c8a8"),
    ("black", "#222222"),
    ("blue", "#1f5fbf"),
    ("brown", "#7b4a2a"),
    ("gray", "#8c8c8c"),
    ("green", "#2e8b3e"),
    ("grey", "#8c8c8c"),
    ("navy", "#1b2a5a"),
    ("orange", "#e8812c"),
    ("pink", "#e89ab8"),
    ("purple", "#6e3b9e"),
    ("red", "#c8302c"),
    ("teal", "#1f8a8a"),
    ("walnut", "#5c3a21"),
    ("white", "#f7f7f7"),
    ("yellow", "#e8c92c"),
];

/// Resolves a color attribute to `#rrggbb`: a palette name or a literal hex.
pub fn color_hex(value: &str) -> Option<String> {
    if let Some((_, hex)) = PALETTE.iter().find(|(name, _)| *name == value) {
        return Some((*hex).to_string());
    }
    let digits = value.strip_prefix('#')?;
    (digits.len() == 6 && digits.chars().all(|c| c.is_ascii_hexdigit()))
        .then(|| format!("#{}", digits.to_ascii_lowercase()))
}

fn pattern_def(pattern: &str) -> &'static str {
    match pattern {
        "striped" => {
            r##"<pattern id="hatch-striped" patternUnits="userSpaceOnUse" width="80" height="80" patternTransform="rotate(45)"><rect width="40" height="80" fill="#ffffff" fill-opacity="0.45"/></pattern>"##
        }
        "checkered" => {
            r##"<pattern id="hatch-checkered" patternUnits="userSpaceOnUse" width="120" height="120"><rect width="60" height="60" fill="#ffffff" fill-opacity="0.45"/><rect x="60" y="60" width="60" height="60" fill="#ffffff" fill-opacity="0.45"/></pattern>"##
        }
        "dotted" => {
            r##"<pattern id="hatch-dotted" patternUnits="userSpaceOnUse" width="80" height="80"><circle cx="40" cy="40" r="15" fill="#ffffff" fill-opacity="0.6"/></pattern>"##
        }
        "floral" => {
            r##"<pattern id="hatch-floral" patternUnits="userSpaceOnUse" width="160" height="160"><circle cx="80" cy="55" r="25" fill="#ffffff" fill-opacity="0.5"/><circle cx="55" cy="95" r="25" fill="#ffffff" fill-opacity="0.5"/><circle cx="105" cy="95" r="25" fill="#ffffff" fill-opacity="0.5"/></pattern>"##
        }
        "plaid" => {
            r##"<pattern id="hatch-plaid" patternUnits="userSpaceOnUse" width="120" height="120"><rect width="120" height="30" fill="#ffffff" fill-opacity="0.35"/><rect width="30" height="120" fill="#000000" fill-opacity="0.2"/></pattern>"##
        }
        _ => "",
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn svg_y(state: &SceneState, y_mm: i64) -> i64 {
    state.floor.depth_mm() - y_mm
}

/// Renders the state as an SVG document. Equal states give identical bytes.
pub fn render_snapshot(state: &SceneState) -> String {
    let floor = &state.floor;
    let (w, h, cell) = (floor.width_mm(), floor.depth_mm(), floor.cell_mm);
    let mut out = String::with_capacity(2048 + state.objects.len() * 512);

    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" width="{}" height="{}" data-version="{}">"#,
        w / 10,
        h / 10,
        state.version
    );

    let mut used: Vec<&str> = state
        .objects
        .iter()
        .filter_map(|o| o.attributes.get("pattern").map(String::as_str))
        .filter(|p| !pattern_def(p).is_empty())
        .collect();
    used.sort_unstable();
    used.dedup();
    if !used.is_empty() {
        out.push_str("<defs>");
        for p in used {
            out.push_str(pattern_def(p));
        }
        out.push_str("</defs>");
    }

    out.push_str(r#"<g class="grid">"#);
    let _ = write!(
        out,
        r##"<rect class="floor" x="0" y="0" width="{w}" height="{h}" fill="#f4f1ea"/>"##
    );
    for (col, row) in floor.blocked_cells() {
        let _ = write!(
            out,
            r##"<rect class="blocked" x="{}" y="{}" width="{cell}" height="{cell}" fill="#5a5a5a"/>"##,
            col * cell,
            svg_y(state, (row + 1) * cell)
        );
    }
    out.push_str(r#"<path class="gridlines" d=""#);
    for c in 0..=floor.cols() {
        let _ = write!(out, "M{} 0V{h}", c * cell);
    }
    for r in 0..=floor.row_count() {
        let _ = write!(out, "M0 {}H{w}", r * cell);
    }
    out.push_str(r##"" stroke="#c9c3b8" stroke-width="10" fill="none"/></g>"##);

    if !state.objects.is_empty() {
        out.push_str(r#"<g class="objects">"#);
        for obj in &state.objects {
            let t = &obj.transform;
            let (cx, cy) = (t.x_mm, svg_y(state, t.y_mm));
            let ow = obj.footprint_mm.0 * i64::from(t.zoom_pct) / 100;
            let od = obj.footprint_mm.1 * i64::from(t.zoom_pct) / 100;
            let fill = obj
                .attributes
                .get("color")
                .and_then(|c| color_hex(c))
                .unwrap_or_else(|| "#999999".to_string());
            let pattern = obj.attributes.get("pattern").map(String::as_str).unwrap_or("solid");
            let _ = write!(
                out,
                r#"<g class="item" data-object-id="{}" data-item-id="{}" transform="translate({cx} {cy}) rotate({})">"#,
                escape(&obj.object_id),
                escape(&obj.item_id),
                t.yaw_deg
            );
            let _ = write!(
                out,
                r##"<rect class="object" x="{}" y="{}" width="{ow}" height="{od}" fill="{fill}" stroke="#333333" stroke-width="15"/>"##,
                -ow / 2,
                -od / 2
            );
            if !pattern_def(pattern).is_empty() {
                let _ = write!(
                    out,
                    r#"<rect class="hatch" x="{}" y="{}" width="{ow}" height="{od}" fill="url(#hatch-{pattern})"/>"#,
                    -ow / 2,
                    -od / 2
                );
            }
            if state.focal_object.as_deref() == Some(obj.object_id.as_str()) {
                let _ = write!(
                    out,
                    r##"<rect class="focal-ring" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#ff9f1c" stroke-width="40"/>"##,
                    -ow / 2 - 40,
                    -od / 2 - 40,
                    ow + 80,
                    od + 80
                );
            }
            out.push_str("</g>");
            let _ = write!(
                out,
                r##"<text class="label" x="{cx}" y="{}" font-size="120" text-anchor="middle" fill="#111111">{} {}</text>"##,
                cy + od / 2 + 140,
                escape(&obj.object_id),
                escape(&obj.item_id)
            );
        }
        out.push_str("</g>");
    }

    let pose = &state.user_pose;
    let r = (cell / 4).max(1);
    let _ = write!(
        out,
        r##"<g class="user" transform="translate({} {}) rotate({})"><circle r="{r}" fill="#2b6cb0"/><polygon class="heading" points="0,{} {},{} {},{}" fill="#2b6cb0"/></g>"##,
        pose.x_mm,
        svg_y(state, pose.y_mm),
        pose.yaw_deg,
        -2 * r,
        -r / 2,
        -r / 2,
        r / 2,
        -r / 2
    );
    out.push_str("</svg>\n");
    out
}
