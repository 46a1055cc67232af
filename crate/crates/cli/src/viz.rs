//! SVG rendering of a learned nav mode map.

use std::fmt::Write;

use modeground::envs::PolygonChainEnv;
use modeground::error::Result;
use modeground::evalkit::grid_points;
use modeground::grounding::GroundingModel;
use modeground::trajectory::Trajectory;

/// Pixel size of the rendered square.
const CANVAS: f64 = 600.0;

/// Fill colours by predicted mode; mode `m` uses `PALETTE[(m - 1) % len]`.
const PALETTE: [&str; 8] = [
    "#f2f2f2", "#8dd3c7", "#ffffb3", "#bebada", "#fb8072", "#80b1d3", "#fdb462", "#b3de69",
];

fn px(v: f64) -> f64 {
    v * CANVAS
}

/// Workspace y points up; SVG y points down.
fn py(v: f64) -> f64 {
    (1.0 - v) * CANVAS
}

/// Renders a `grid x grid` raster of predicted modes with the true polygons
/// outlined and, optionally, demo paths. Equal neighbouring cells in a
/// column are merged into one rectangle to keep the file small.
pub fn render_nav_svg(
    env: &PolygonChainEnv,
    model: &GroundingModel,
    demos: Option<&[Trajectory]>,
    grid: usize,
) -> Result<String> {
    let pts = grid_points(grid);
    let modes = model.classify_batch(&pts)?;
    let cell = CANVAS / grid as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">"#
    );
    let _ = writeln!(svg, r#"<g shape-rendering="crispEdges">"#);
    // Cell (i, j) sits at x index i, y index j.
    for i in 0..grid {
        let mut j = 0;
        while j < grid {
            let m = modes[i * grid + j];
            let mut end = j + 1;
            while end < grid && modes[i * grid + end] == m {
                end += 1;
            }
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" data-mode="{m}"/>"#,
                i as f64 * cell,
                CANVAS - end as f64 * cell,
                cell,
                (end - j) as f64 * cell,
                PALETTE[(m - 1) % PALETTE.len()],
            );
            j = end;
        }
    }
    let _ = writeln!(svg, "</g>");
    for (idx, poly) in env.polygons.iter().enumerate() {
        let points: Vec<String> = poly
            .vertices
            .iter()
            .map(|v| format!("{:.2},{:.2}", px(v.x), py(v.y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="none" stroke="black" stroke-width="1.5" data-true-mode="{}"/>"#,
            points.join(" "),
            idx + 2
        );
    }
    for t in demos.unwrap_or(&[]) {
        let points: Vec<String> = t
            .positions()
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.x), py(p.y)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#333333" stroke-width="1" stroke-dasharray="3,2"/>"##,
            points.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use modeground::envs::generate_polygon_chain;
    use modeground::grounding::{build_feasibility, train::init_model, TrainConfig};
    use modeground::llmclient::features::{FeatureRegistry, FeatureSpec};

    fn untrained(env: &PolygonChainEnv) -> GroundingModel {
        let f = build_feasibility(&modeground::envs::chain_adjacency(env.k), env.k).unwrap();
        let spec = FeatureSpec::new(&FeatureRegistry::nav(), vec!["x".into(), "y".into()]).unwrap();
        let demos = modeground::demos::demo_batch(&modeground::envs::EnvSpec::Nav(env.clone()), 2, 1).unwrap();
        init_model(&demos, &f, &spec, &TrainConfig::default()).unwrap().0
    }

    #[test]
    fn rects_cover_every_column_exactly() {
        let env = generate_polygon_chain(4, 3, 500).unwrap();
        let model = untrained(&env);
        let grid = 20;
        let svg = render_nav_svg(&env, &model, None, grid).unwrap();
        let heights: f64 = svg
            .lines()
            .filter(|l| l.starts_with("<rect"))
            .map(|l| {
                let h = l.split("height=\"").nth(1).unwrap();
                h[..h.find('"').unwrap()].parse::<f64>().unwrap()
            })
            .sum();
        assert!((heights - CANVAS * grid as f64).abs() < 1e-6 * CANVAS * grid as f64 + 0.5);
        assert_eq!(svg.matches("<polygon").count(), env.polygons.len());
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn demos_are_drawn_when_given() {
        let env = generate_polygon_chain(2, 3, 500).unwrap();
        let model = untrained(&env);
        let demos = modeground::demos::demo_batch(&modeground::envs::EnvSpec::Nav(env.clone()), 3, 0).unwrap();
        let svg = render_nav_svg(&env, &model, Some(&demos), 10).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
    }
}
