//! Kernel evaluation and raw-parameter sensitivities.
//!
//! Raw parameters are unconstrained. Scales, lengthscales and periods are
//! `softplus(raw)`; the linear offset is used as is. Every terminal except `C`
//! carries an output scale `s` and is multiplied by `s²`:
//!
//! | token | raw params | kernel |
//! |-------|------------|--------|
//! | `C`   | λ          | `λ` |
//! | `WN`  | s          | `s² 1[x₁ = x₂]` |
//! | `SE`  | s, l       | `s² exp(−(x₁ − x₂)² / 2l²)` |
//! | `LIN` | s, c       | `s² (x₁ − c)(x₂ − c)` |
//! | `PER` | s, p, l    | `s² exp(−2 sin²(π ∣x₁ − x₂∣ / p) / l²)` |

use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::grammar::{KernelExpr, Token};
use crate::ad::{sigmoid, softplus};

/// Inverse of `softplus`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Constrained parameter values of one terminal.
pub fn constrained(token: Token, raw: &[f64]) -> Vec<f64> {
    match token {
        Token::Linear => vec![softplus(raw[0]), raw[1]],
        _ => raw.iter().map(|&r| softplus(r)).collect(),
    }
}

/// Splits a flat raw vector into per-terminal slices in token order.
pub fn split_params<'a>(expr: &KernelExpr, raw: &'a [f64]) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    let mut off = 0;
    for t in expr.tokens() {
        let n = t.num_params();
        if !t.is_operator() {
            out.push(&raw[off..off + n]);
        }
        off += n;
    }
    out
}

/// Kernel value of one terminal and its derivatives with respect to the raw
/// parameters, at lag `d = x₁ − x₂` (and the inputs themselves for `LIN`).
fn terminal(token: Token, raw: &[f64], x1: f64, x2: f64, grads: &mut [f64]) -> f64 {
    let d = x1 - x2;
    match token {
        Token::Plus | Token::Times => unreachable!("operators are not terminals"),
        Token::Const => {
            grads[0] = sigmoid(raw[0]);
            softplus(raw[0])
        }
        Token::WhiteNoise => {
            let s = softplus(raw[0]);
            if d == 0.0 {
                grads[0] = 2.0 * s * sigmoid(raw[0]);
                s * s
            } else {
                grads[0] = 0.0;
                0.0
            }
        }
        Token::SquaredExp => {
            let (s, l) = (softplus(raw[0]), softplus(raw[1]));
            let e = (-d * d / (2.0 * l * l)).exp();
            let k = s * s * e;
            grads[0] = 2.0 * s * e * sigmoid(raw[0]);
            grads[1] = k * d * d / (l * l * l) * sigmoid(raw[1]);
            k
        }
        Token::Linear => {
            let (s, c) = (softplus(raw[0]), raw[1]);
            let base = (x1 - c) * (x2 - c);
            grads[0] = 2.0 * s * base * sigmoid(raw[0]);
            grads[1] = -s * s * (x1 + x2 - 2.0 * c);
            s * s * base
        }
        Token::Periodic(_) => {
            let (s, p, l) = (softplus(raw[0]), softplus(raw[1]), softplus(raw[2]));
            let ad = d.abs();
            let u = PI * ad / p;
            let sn = u.sin();
            let e = (-2.0 * sn * sn / (l * l)).exp();
            let k = s * s * e;
            grads[0] = 2.0 * s * e * sigmoid(raw[0]);
            grads[1] = k * 2.0 * PI * ad * (2.0 * u).sin() / (l * l * p * p) * sigmoid(raw[1]);
            grads[2] = k * 4.0 * sn * sn / (l * l * l) * sigmoid(raw[2]);
            k
        }
    }
}

/// `k(x₁, x₂)` for a valid expression with flat raw parameters.
pub fn eval_kernel(expr: &KernelExpr, raw: &[f64], x1: f64, x2: f64) -> f64 {
    let k = kernel_matrix(expr, raw, &[x1], &[x2], false);
    k.value[(0, 0)]
}

/// Kernel matrix and, optionally, `∂K/∂raw_j` for every flat raw parameter.
pub struct KernelMatrix {
    pub value: DMatrix<f64>,
    /// `(flat parameter index, ∂K/∂raw)`.
    pub grads: Vec<(usize, DMatrix<f64>)>,
}

/// Inputs whose pairwise differences are shared when the grid is regular.
fn is_regular(t: &[f64]) -> bool {
    if t.len() < 3 {
        return false;
    }
    let h = t[1] - t[0];
    t.windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-12 * h.abs().max(1.0))
}

fn terminal_matrix(
    token: Token,
    raw: &[f64],
    a: &[f64],
    b: &[f64],
    with_grads: bool,
) -> KernelMatrix {
    let (n, m) = (a.len(), b.len());
    let np = token.num_params();
    let mut value = DMatrix::zeros(n, m);
    let mut grads: Vec<DMatrix<f64>> = if with_grads {
        (0..np).map(|_| DMatrix::zeros(n, m)).collect()
    } else {
        Vec::new()
    };
    let mut g = [0.0; 3];
    let same = std::ptr::eq(a, b) || a == b;
    let stationary = token != Token::Linear;
    if same && stationary && is_regular(a) {
        // Toeplitz: one evaluation per lag.
        let lag: Vec<(f64, [f64; 3])> = (0..n)
            .map(|i| {
                let v = terminal(token, raw, a[i], a[0], &mut g);
                (v, g)
            })
            .collect();
        for i in 0..n {
            for j in 0..n {
                let (v, gl) = &lag[i.abs_diff(j)];
                value[(i, j)] = *v;
                for (p, gm) in grads.iter_mut().enumerate() {
                    gm[(i, j)] = gl[p];
                }
            }
        }
    } else if same {
        for i in 0..n {
            for j in i..n {
                let v = terminal(token, raw, a[i], a[j], &mut g);
                value[(i, j)] = v;
                value[(j, i)] = v;
                for (p, gm) in grads.iter_mut().enumerate() {
                    gm[(i, j)] = g[p];
                    gm[(j, i)] = g[p];
                }
            }
        }
    } else {
        for i in 0..n {
            for j in 0..m {
                value[(i, j)] = terminal(token, raw, a[i], b[j], &mut g);
                for (p, gm) in grads.iter_mut().enumerate() {
                    gm[(i, j)] = g[p];
                }
            }
        }
    }
    KernelMatrix {
        value,
        grads: grads.into_iter().enumerate().collect(),
    }
}

/// Evaluates the expression on all pairs of `a × b`.
pub fn kernel_matrix(
    expr: &KernelExpr,
    raw: &[f64],
    a: &[f64],
    b: &[f64],
    with_grads: bool,
) -> KernelMatrix {
    fn go(
        tokens: &[Token],
        pos: &mut usize,
        off: &mut usize,
        raw: &[f64],
        a: &[f64],
        b: &[f64],
        wg: bool,
    ) -> KernelMatrix {
        let t = tokens[*pos];
        *pos += 1;
        match t {
            Token::Plus | Token::Times => {
                let l = go(tokens, pos, off, raw, a, b, wg);
                let r = go(tokens, pos, off, raw, a, b, wg);
                if t == Token::Plus {
                    let mut grads = l.grads;
                    grads.extend(r.grads);
                    KernelMatrix {
                        value: l.value + r.value,
                        grads,
                    }
                } else {
                    let mut grads = Vec::with_capacity(l.grads.len() + r.grads.len());
                    for (i, g) in l.grads {
                        grads.push((i, g.component_mul(&r.value)));
                    }
                    for (i, g) in r.grads {
                        grads.push((i, g.component_mul(&l.value)));
                    }
                    KernelMatrix {
                        value: l.value.component_mul(&r.value),
                        grads,
                    }
                }
            }
            _ => {
                let np = t.num_params();
                let start = *off;
                *off += np;
                let mut km = terminal_matrix(t, &raw[start..start + np], a, b, wg);
                for (i, _) in km.grads.iter_mut() {
                    *i += start;
                }
                km
            }
        }
    }
    go(expr.tokens(), &mut 0, &mut 0, raw, a, b, with_grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Token::*;

    fn expr(t: Vec<Token>) -> KernelExpr {
        KernelExpr::new(t, 9).unwrap()
    }

    fn one() -> f64 {
        softplus_inv(1.0)
    }

    #[test]
    fn terminal_values() {
        assert!(
            (eval_kernel(&expr(vec![Const]), &[softplus_inv(0.7)], 0.1, 5.0) - 0.7).abs() < 1e-12
        );
        let wn = expr(vec![WhiteNoise]);
        assert!((eval_kernel(&wn, &[one()], 0.3, 0.3) - 1.0).abs() < 1e-12);
        assert_eq!(eval_kernel(&wn, &[one()], 0.3, 0.4), 0.0);
        let se = expr(vec![SquaredExp]);
        let v = eval_kernel(&se, &[one(), one()], 2f64.sqrt(), 0.0);
        assert!((v - 0.367879).abs() < 1e-6);
        let per = expr(vec![Periodic(4)]);
        let p = 0.37;
        assert!(
            (eval_kernel(&per, &[one(), softplus_inv(p), 0.4], 1.0 + p, 1.0) - 1.0).abs() < 1e-12
        );
        let lin = expr(vec![Linear]);
        assert!((eval_kernel(&lin, &[one(), 1.0], 2.0, 3.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn composite_values() {
        let e = expr(vec![Plus, Times, SquaredExp, Periodic(2), WhiteNoise]);
        let raw = [0.1, -0.3, 0.5, 0.2, -0.7, 0.05];
        let (x1, x2) = (0.2, 0.45);
        let g = &mut [0.0; 3];
        let se = terminal(SquaredExp, &raw[0..2], x1, x2, g);
        let per = terminal(Periodic(2), &raw[2..5], x1, x2, g);
        let wn = terminal(WhiteNoise, &raw[5..6], x1, x2, g);
        assert!((eval_kernel(&e, &raw, x1, x2) - (se * per + wn)).abs() < 1e-14);
    }

    #[test]
    fn regular_grid_matches_pairwise() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let t2 = t.clone();
        let e = expr(vec![Times, SquaredExp, Plus, Periodic(7), Linear]);
        let raw = [0.3, -1.0, 0.2, -1.5, 0.4, 0.1, 0.6];
        let a = kernel_matrix(&e, &raw, &t, &t, true);
        for i in 0..20 {
            for j in 0..20 {
                let v = eval_kernel(&e, &raw, t2[i], t2[j]);
                assert!((a.value[(i, j)] - v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn raw_gradients_match_finite_differences() {
        let t: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let e = expr(vec![
            Plus,
            Times,
            SquaredExp,
            Periodic(3),
            Plus,
            Linear,
            Plus,
            WhiteNoise,
            Const,
        ]);
        let raw = [0.3, -1.0, 0.2, -1.5, 0.4, 0.1, 0.6, -0.2, 0.9];
        let km = kernel_matrix(&e, &raw, &t, &t, true);
        assert_eq!(km.grads.len(), raw.len());
        for (p, g) in &km.grads {
            let h = 1e-6;
            let mut up = raw;
            up[*p] += h;
            let mut dn = raw;
            dn[*p] -= h;
            let fd = (kernel_matrix(&e, &up, &t, &t, false).value
                - kernel_matrix(&e, &dn, &t, &t, false).value)
                / (2.0 * h);
            let err = (&fd - g).abs().max();
            assert!(err < 1e-7, "param {p}: {err}");
        }
    }

    proptest! {
        #[test]
        fn kernels_are_symmetric(
            raw in proptest::collection::vec(-2.0f64..2.0, 7),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let e = expr(vec![Times, SquaredExp, Plus, Periodic(7), Linear]);
            let x = eval_kernel(&e, &raw, a, b);
            let y = eval_kernel(&e, &raw, b, a);
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
