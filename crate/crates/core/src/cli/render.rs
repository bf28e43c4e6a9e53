//! Bird's-eye SVG drawings of a scene and its candidate plans. Forward is up
//! and left is left; one metre is [`PX_PER_M`] pixels.

use std::fmt::Write;

use crate::geometry::{Vec2, BEV_WINDOW};
use crate::scenesim::{ego_footprint, Pose, SceneSpec};
use crate::trajspace::Trajectory;

pub const PX_PER_M: f64 = 8.0;

fn to_px(p: Vec2) -> (f64, f64) {
    ((BEV_WINDOW.y_max() - p.y) * PX_PER_M, (BEV_WINDOW.x_max() - p.x) * PX_PER_M)
}

fn points(pts: impl IntoIterator<Item = Vec2>) -> String {
    let mut s = String::new();
    for p in pts.into_iter().filter(|p| p.is_finite()) {
        let (x, y) = to_px(p);
        if !s.is_empty() {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s
}

fn path(pts: &[Vec2], close: bool) -> String {
    let mut d = String::new();
    for (i, &p) in pts.iter().enumerate() {
        let (x, y) = to_px(p);
        let _ = write!(d, "{}{x:.2},{y:.2}", if i == 0 { "M" } else { " L" });
    }
    if close {
        d.push_str(" Z");
    }
    d
}

/// Corridor outline: left edge forward, right edge back.
fn corridor_outline(scene: &SceneSpec) -> Vec<Vec2> {
    let pts = scene.centerline.points();
    let n = pts.len();
    let normal = |i: usize| {
        let d = pts[(i + 1).min(n - 1)] - pts[i.saturating_sub(1)];
        d.perp() * (1.0 / d.norm())
    };
    let hw = scene.corridor_half_width;
    let left = (0..n).map(|i| pts[i] + normal(i) * hw);
    let right: Vec<Vec2> = (0..n).map(|i| pts[i] - normal(i) * hw).collect();
    left.chain(right.into_iter().rev()).collect()
}

/// The scene, every candidate as a `<polyline>` starting at the ego origin,
/// and `selected` (an index into `candidates`) drawn last and highlighted.
pub fn render_svg(scene: &SceneSpec, candidates: &[Trajectory], selected: Option<usize>) -> String {
    let w = BEV_WINDOW.size * PX_PER_M;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{w:.0}" viewBox="0 0 {w:.0} {w:.0}">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w:.0}" height="{w:.0}" fill="#3b3b3b"/>"##);
    let _ = writeln!(
        s,
        r##"<path class="corridor" d="{}" fill="#9a9a9a" stroke="#ffffff" stroke-width="1.5"/>"##,
        path(&corridor_outline(scene), true)
    );
    let _ = writeln!(
        s,
        r##"<path class="centerline" d="{}" fill="none" stroke="#ffffff" stroke-width="1" stroke-dasharray="6,6"/>"##,
        path(scene.centerline.points(), false)
    );
    for ob in &scene.obstacles {
        let _ = writeln!(
            s,
            r##"<polygon class="obstacle" points="{}" fill="#d9534f" stroke="#7a1f1c" stroke-width="1"/>"##,
            points(ob.rect_at(0.0).corners())
        );
    }
    let _ = writeln!(
        s,
        r##"<polygon class="ego" points="{}" fill="#2a7bd3" stroke="#0b2f57" stroke-width="1"/>"##,
        points(ego_footprint(Pose::new(0.0, 0.0, 0.0)).corners())
    );
    let line = |s: &mut String, t: &Trajectory, class: &str, style: &str| {
        let _ = writeln!(
            s,
            r#"<polyline class="{class}" points="{}" fill="none" {style}/>"#,
            points(t.with_origin())
        );
    };
    for (i, t) in candidates.iter().enumerate() {
        if Some(i) != selected {
            line(&mut s, t, "candidate", r##"stroke="#f0c419" stroke-width="1.2" stroke-opacity="0.7""##);
        }
    }
    if let Some(t) = selected.and_then(|i| candidates.get(i)) {
        line(&mut s, t, "selected", r##"stroke="#2ecc71" stroke-width="3""##);
    }
    s.push_str("</svg>\n");
    s
}
