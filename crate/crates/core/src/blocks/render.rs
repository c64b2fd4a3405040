//! Block placement and the soft rasterizer.
//!
//! Scene units are cell widths; pixel coordinates grow rightwards and
//! downwards with pixel `(i, j)` centred at `(j + 0.5, i + 0.5)`.

use crate::ad::sigmoid;

use super::{Blocks2DConfig, SceneParse};

/// An axis-aligned square block in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    /// Half the side length.
    pub half: f64,
    pub color: [f64; 3],
}

/// Per-primitive side lengths (scene units) and RGB colors.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitives {
    pub sizes: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// Geometry of one placed block, kept for the backward pass.
#[derive(Clone, Copy, Debug)]
struct Placed {
    prim: usize,
    /// Slot of the supporting block in the placement list.
    support: Option<usize>,
    span_w: f64,
    raw: f64,
    side: f64,
    left: f64,
    bottom: f64,
}

/// Ground line (pixel y) of cell row `r`; row 0 is the back row.
fn ground(cfg: &Blocks2DConfig, r: usize) -> f64 {
    let shift = cfg.height as f64 / (4.0 * cfg.grid as f64);
    cfg.height as f64 - (cfg.grid - 1 - r) as f64 * shift
}

fn cell_width(cfg: &Blocks2DConfig) -> f64 {
    cfg.width as f64 / cfg.grid as f64
}

fn layout(cfg: &Blocks2DConfig, parse: &SceneParse, raw: &[f64], sizes: &[f64]) -> Vec<Placed> {
    let cw = cell_width(cfg);
    let mut out = Vec::with_capacity(raw.len());
    let mut k = 0;
    for (cell, idx) in parse.indices.iter().enumerate() {
        let (r, c) = (cell / cfg.grid, cell % cfg.grid);
        let mut span = (c as f64 * cw, cw);
        let mut bottom = ground(cfg, r);
        let mut support = None;
        for &p in idx {
            let side = sizes[p as usize] * cw;
            let left = span.0 + sigmoid(raw[k]) * (span.1 - side);
            out.push(Placed {
                prim: p as usize,
                support,
                span_w: span.1,
                raw: raw[k],
                side,
                left,
                bottom,
            });
            support = Some(out.len() - 1);
            span = (left, side);
            bottom -= side;
            k += 1;
        }
    }
    out
}

/// Absolute block squares in painter order: back row first, columns left to
/// right, each tower bottom-up.
pub fn place_blocks(
    cfg: &Blocks2DConfig,
    parse: &SceneParse,
    raw: &[f64],
    prims: &Primitives,
) -> Vec<Rect> {
    layout(cfg, parse, raw, &prims.sizes)
        .iter()
        .map(|b| Rect {
            cx: b.left + b.side / 2.0,
            cy: b.bottom - b.side / 2.0,
            half: b.side / 2.0,
            color: prims.colors[b.prim],
        })
        .collect()
}

/// Soft edge profile along one axis and its derivatives with respect to the
/// center and the half extent.
fn profile(n: usize, center: f64, half: f64, tau: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut v = Vec::with_capacity(n);
    let mut dc = Vec::with_capacity(n);
    let mut dh = Vec::with_capacity(n);
    for i in 0..n {
        let d = i as f64 + 0.5 - center;
        let s = sigmoid((half - d.abs()) / tau);
        let ds = s * (1.0 - s) / tau;
        v.push(s);
        dc.push(ds * d.signum());
        dh.push(ds);
    }
    (v, dc, dh)
}

/// Composites `rects` over the background; `[height, width, 3]` row-major.
pub fn render(cfg: &Blocks2DConfig, rects: &[Rect]) -> Vec<f64> {
    render_layers(cfg, rects, false).0
}

/// Final image plus, optionally, the canvas before each block.
fn render_layers(cfg: &Blocks2DConfig, rects: &[Rect], keep: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (h, w) = (cfg.height, cfg.width);
    let mut img: Vec<f64> = (0..h * w).flat_map(|_| cfg.background).collect();
    let mut layers = Vec::new();
    for r in rects {
        if keep {
            layers.push(img.clone());
        }
        let (ax, _, _) = profile(w, r.cx, r.half, cfg.tau);
        let (ay, _, _) = profile(h, r.cy, r.half, cfg.tau);
        for (i, &a_i) in ay.iter().enumerate() {
            if a_i == 0.0 {
                continue;
            }
            for (j, &a_j) in ax.iter().enumerate() {
                let a = a_i * a_j;
                let px = &mut img[(i * w + j) * 3..(i * w + j) * 3 + 3];
                for ch in 0..3 {
                    px[ch] = a * r.color[ch] + (1.0 - a) * px[ch];
                }
            }
        }
    }
    (img, layers)
}

/// Gradients of a scalar loss through [`place_blocks`] and [`render`].
pub struct RenderGrad {
    pub raw: Vec<f64>,
    /// With respect to the side lengths in scene units.
    pub sizes: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// Renders the scene and returns a closure mapping an image adjoint to
/// parameter adjoints.
pub fn render_with_grad(
    cfg: &Blocks2DConfig,
    parse: &SceneParse,
    raw: &[f64],
    prims: &Primitives,
) -> (
    Vec<f64>,
    impl Fn(&[f64]) -> RenderGrad + Send + Sync + 'static,
) {
    let placed = layout(cfg, parse, raw, &prims.sizes);
    let rects: Vec<Rect> = place_blocks(cfg, parse, raw, prims);
    let (img, layers) = render_layers(cfg, &rects, true);
    let cfg = cfg.clone();
    let n_prims = prims.sizes.len();
    let back = move |g_img: &[f64]| {
        let (h, w) = (cfg.height, cfg.width);
        let cw = cell_width(&cfg);
        let mut g = g_img.to_vec();
        let nb = rects.len();
        let (mut g_cx, mut g_cy, mut g_half) = (vec![0.0; nb], vec![0.0; nb], vec![0.0; nb]);
        let mut colors = vec![[0.0; 3]; n_prims];
        for k in (0..nb).rev() {
            let r = &rects[k];
            let prev = &layers[k];
            let (ax, ax_c, ax_h) = profile(w, r.cx, r.half, cfg.tau);
            let (ay, ay_c, ay_h) = profile(h, r.cy, r.half, cfg.tau);
            let mut g_color = [0.0; 3];
            for i in 0..h {
                for j in 0..w {
                    let a = ay[i] * ax[j];
                    let o = (i * w + j) * 3;
                    let mut g_a = 0.0;
                    for ch in 0..3 {
                        let gp = g[o + ch];
                        g_a += gp * (r.color[ch] - prev[o + ch]);
                        g_color[ch] += gp * a;
                        g[o + ch] = gp * (1.0 - a);
                    }
                    if g_a != 0.0 {
                        g_cx[k] += g_a * ay[i] * ax_c[j];
                        g_cy[k] += g_a * ax[j] * ay_c[i];
                        g_half[k] += g_a * (ay[i] * ax_h[j] + ax[j] * ay_h[i]);
                    }
                }
            }
            for ch in 0..3 {
                colors[placed[k].prim][ch] += g_color[ch];
            }
        }
        // Geometry, top of each tower first.
        let mut g_left = vec![0.0; nb];
        let mut g_side = vec![0.0; nb];
        let mut g_bottom = vec![0.0; nb];
        let mut g_raw = vec![0.0; nb];
        for k in (0..nb).rev() {
            let b = &placed[k];
            g_left[k] += g_cx[k];
            g_side[k] += g_cx[k] / 2.0 + g_half[k] / 2.0 - g_cy[k] / 2.0;
            g_bottom[k] += g_cy[k];
            let s = sigmoid(b.raw);
            let gl = g_left[k];
            g_raw[k] += gl * s * (1.0 - s) * (b.span_w - b.side);
            g_side[k] -= gl * s;
            if let Some(sup) = b.support {
                g_left[sup] += gl;
                g_side[sup] += gl * s;
                g_bottom[sup] += g_bottom[k];
                g_side[sup] -= g_bottom[k];
            }
        }
        let mut sizes = vec![0.0; n_prims];
        for (b, gs) in placed.iter().zip(&g_side) {
            sizes[b.prim] += gs * cw;
        }
        RenderGrad {
            raw: g_raw,
            sizes,
            colors,
        }
    };
    (img, back)
}

/// `Σ log N(observed; rendered, σ²)` over all pixels and channels.
pub fn pixel_loglik(rendered: &[f64], observed: &[f64], sigma: f64) -> crate::Result<f64> {
    if rendered.len() != observed.len() {
        return Err(crate::Error::LengthMismatch(rendered.len(), observed.len()));
    }
    Ok(rendered
        .iter()
        .zip(observed)
        .map(|(r, o)| crate::prob::normal_log_pdf(*o, *r, sigma))
        .sum())
}
