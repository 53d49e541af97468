//! Static quiver plots of reconstructed fields as SVG.
//!
//! Polar cells are placed at `x = r sin(theta)`, `z = r cos(theta)` with depth
//! increasing downwards, as on an echo display. Arrows are colored by the
//! radial velocity on a blue-white-red scale.

use std::fmt::Write as _;

use crate::error::{Result, VfmError};
use crate::field::VelocityField;
use crate::grid::PolarGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotOptions {
    /// Draw one arrow every `decimation` cells along each axis.
    pub decimation: usize,
    /// Width of the drawing in pixels.
    pub width: f64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            decimation: 4,
            width: 800.0,
        }
    }
}

/// Blue for flow towards the probe, red away from it; `t` in `[-1, 1]`.
fn diverging(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(-1.0, 1.0);
    let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
    if t >= 0.0 {
        (255, fade(t), fade(t))
    } else {
        (fade(-t), fade(-t), 255)
    }
}

fn hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

pub fn quiver_svg(grid: &PolarGrid, field: &VelocityField, opts: &PlotOptions) -> Result<String> {
    field.check_grid(grid)?;
    if opts.decimation == 0 || !(opts.width > 0.0) {
        return Err(VfmError::InvalidArgument("decimation and width must be positive".into()));
    }
    let (nr, nt) = grid.shape();
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for &i in &[0, nr - 1] {
        for j in 0..nt {
            let (r, t) = grid.position(i, j);
            xs.push(r * t.sin());
            zs.push(r * t.cos());
        }
    }
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (z0, z1) = zs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &z| (a.min(z), b.max(z)));
    let margin = 40.0;
    let legend_h = 60.0;
    let scale = (opts.width - 2.0 * margin) / (x1 - x0).max(f64::MIN_POSITIVE);
    let height = (z1 - z0) * scale + 2.0 * margin + legend_h;
    let px = |x: f64| margin + (x - x0) * scale;
    let pz = |z: f64| margin + (z - z0) * scale;

    let vmax_r = field.v_r().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let speed_max = field
        .v_r()
        .iter()
        .zip(field.v_theta())
        .fold(0.0f64, |m, (a, b)| m.max(a.hypot(*b)));
    let arrow_len = grid.dr().max(grid.r0() * grid.dtheta()) * opts.decimation as f64 * scale * 0.9;

    let mut s = String::new();
    let w = opts.width;
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{height:.0}" viewBox="0 0 {w:.0} {height:.0}">"#
    )
    .expect("write to string");
    writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).expect("write to string");

    // Sector outline.
    let mut outline = String::new();
    let edge = |i: usize, j: usize| {
        let (r, t) = grid.position(i, j);
        (px(r * t.sin()), pz(r * t.cos()))
    };
    for j in 0..nt {
        let (x, z) = edge(0, j);
        write!(outline, "{}{x:.2},{z:.2} ", if j == 0 { "M" } else { "L" }).expect("write to string");
    }
    for j in (0..nt).rev() {
        let (x, z) = edge(nr - 1, j);
        write!(outline, "L{x:.2},{z:.2} ").expect("write to string");
    }
    writeln!(s, r##"<path d="{}Z" fill="none" stroke="#888888" stroke-width="1"/>"##, outline).expect("write to string");

    writeln!(s, r#"<g stroke-linecap="round">"#).expect("write to string");
    for i in (0..nr).step_by(opts.decimation) {
        for j in (0..nt).step_by(opts.decimation) {
            let (r, t) = grid.position(i, j);
            let (vr, vt) = (field.v_r()[[i, j]], field.v_theta()[[i, j]]);
            let (st, ct) = t.sin_cos();
            let (vx, vz) = (vr * st + vt * ct, vr * ct - vt * st);
            let color = hex(diverging(if vmax_r > 0.0 { vr / vmax_r } else { 0.0 }));
            let (cx, cz) = (px(r * st), pz(r * ct));
            let k = if speed_max > 0.0 { arrow_len / speed_max } else { 0.0 };
            let (ex, ez) = (cx + vx * k, cz + vz * k);
            if vx == 0.0 && vz == 0.0 {
                writeln!(s, r#"<circle cx="{cx:.2}" cy="{cz:.2}" r="1.2" fill="{color}"/>"#).expect("write to string");
                continue;
            }
            writeln!(
                s,
                r#"<line x1="{cx:.2}" y1="{cz:.2}" x2="{ex:.2}" y2="{ez:.2}" stroke="{color}" stroke-width="1.4"/>"#
            )
            .expect("write to string");
            // Arrow head.
            let len = (ex - cx).hypot(ez - cz);
            if len > 1e-9 {
                let (ux, uz) = ((ex - cx) / len, (ez - cz) / len);
                let h = (0.3 * len).min(6.0);
                let (ax, az) = (ex - h * (ux + 0.5 * uz), ez - h * (uz - 0.5 * ux));
                let (bx, bz) = (ex - h * (ux - 0.5 * uz), ez - h * (uz + 0.5 * ux));
                writeln!(
                    s,
                    r#"<path d="M{ax:.2},{az:.2} L{ex:.2},{ez:.2} L{bx:.2},{bz:.2}" fill="none" stroke="{color}" stroke-width="1.4"/>"#
                )
                .expect("write to string");
            }
        }
    }
    writeln!(s, "</g>").expect("write to string");

    // Legend.
    let ly = height - legend_h + 10.0;
    let lw = (w - 2.0 * margin).min(300.0);
    let steps = 32;
    for k in 0..steps {
        let t = -1.0 + 2.0 * (k as f64 + 0.5) / steps as f64;
        let x = margin + lw * k as f64 / steps as f64;
        writeln!(
            s,
            r#"<rect x="{x:.2}" y="{ly:.2}" width="{:.2}" height="12" fill="{}"/>"#,
            lw / steps as f64 + 0.5,
            hex(diverging(t))
        )
        .expect("write to string");
    }
    let ty = ly + 28.0;
    writeln!(
        s,
        r#"<text x="{margin:.2}" y="{ty:.2}" font-family="sans-serif" font-size="11">{:.3}</text>"#,
        -vmax_r
    )
    .expect("write to string");
    writeln!(
        s,
        r#"<text x="{:.2}" y="{ty:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
        margin + lw,
        vmax_r
    )
    .expect("write to string");
    writeln!(
        s,
        r#"<text x="{:.2}" y="{ty:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">v_r [m/s]</text>"#,
        margin + 0.5 * lw
    )
    .expect("write to string");
    writeln!(s, "</svg>").expect("write to string");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::sector_segmentation;
    use crate::phantom::{stream_function_field, StreamFunctionSpec};

    #[test]
    fn zero_field_draws_only_dots() {
        let grid = PolarGrid::sector(12, 16).unwrap();
        let svg = quiver_svg(&grid, &VelocityField::zeros(&grid), &PlotOptions::default()).unwrap();
        assert!(!svg.contains("<line"));
        assert_eq!(svg.matches("<circle").count(), 3 * 4);
    }

    #[test]
    fn output_is_stable_and_decimation_applies() {
        let grid = PolarGrid::sector(12, 16).unwrap();
        let seg = sector_segmentation(&grid, 1).unwrap();
        let f = stream_function_field(&StreamFunctionSpec::single_vortex(0.01), &grid, &seg).unwrap();
        let a = quiver_svg(&grid, &f, &PlotOptions::default()).unwrap();
        assert_eq!(a, quiver_svg(&grid, &f, &PlotOptions::default()).unwrap());
        let dense = quiver_svg(
            &grid,
            &f,
            &PlotOptions {
                decimation: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let marks = |s: &str| s.matches("<line").count() + s.matches("<circle").count();
        assert_eq!(marks(&a), 12);
        assert_eq!(marks(&dense), 12 * 16);
    }

    #[test]
    fn colormap_ends() {
        assert_eq!(diverging(1.0), (255, 0, 0));
        assert_eq!(diverging(-1.0), (0, 0, 255));
        assert_eq!(diverging(0.0), (255, 255, 255));
    }
}
