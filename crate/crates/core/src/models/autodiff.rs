//! Minimal scalar reverse-mode tape.
//!
//! Used to express losses containing the stop-gradient operator `⊥` and to
//! cross-check the hand-derived gradients of the training losses. Each node
//! stores at most two parents with their local partial derivatives.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [(usize, f64); 2],
    arity: u8,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, parents: [(usize, f64); 2], arity: u8) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, arity });
        nodes.len() - 1
    }

    /// A new independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push([(0, 0.0); 2], 0);
        Var { tape: self, idx, value }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    value: f64,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    fn unary(&self, value: f64, d: f64) -> Var<'t> {
        let idx = self.tape.push([(self.idx, d), (0, 0.0)], 1);
        Var {
            tape: self.tape,
            idx,
            value,
        }
    }

    fn binary(&self, other: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        let idx = self.tape.push([(self.idx, da), (other.idx, db)], 2);
        Var {
            tape: self.tape,
            idx,
            value,
        }
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = crate::domain::sigmoid(self.value);
        self.unary(s, s * (1.0 - s))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(self.value * self.value, 2.0 * self.value)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(self.value * c, c)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.unary(self.value + c, 1.0)
    }

    /// `max(self, c)`; the derivative is zero on the clamped side.
    pub fn max_const(self, c: f64) -> Var<'t> {
        if self.value >= c {
            self.unary(self.value, 1.0)
        } else {
            self.unary(c, 0.0)
        }
    }

    /// Same value, no path back to any input.
    pub fn detach(self) -> Var<'t> {
        let idx = self.tape.push([(0, 0.0); 2], 0);
        Var {
            tape: self.tape,
            idx,
            value: self.value,
        }
    }

    /// Adjoints `∂self/∂node` for every node on the tape, indexed by
    /// [`Var::index`].
    pub fn grad(&self) -> Vec<f64> {
        let nodes = self.tape.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[self.idx] = 1.0;
        for k in (0..=self.idx).rev() {
            let a = adj[k];
            if a == 0.0 {
                continue;
            }
            let node = nodes[k];
            for &(p, d) in &node.parents[..node.arity as usize] {
                adj[p] += a * d;
            }
        }
        adj
    }
}

/// The stop-gradient operator `⊥`: identity forward, zero derivative backward.
pub fn stop_gradient(x: Var<'_>) -> Var<'_> {
    x.detach()
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self.value / rhs.value;
        self.binary(rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let t = Tape::new();
        let x = t.var(3.0);
        let y = t.var(-2.0);
        let z = x * y + x.square();
        let g = z.grad();
        assert_eq!(z.value(), 3.0);
        assert_eq!(g[x.index()], -2.0 + 6.0);
        assert_eq!(g[y.index()], 3.0);
    }

    #[test]
    fn stop_gradient_preserves_value_and_blocks_gradient() {
        let t = Tape::new();
        let theta = t.var(0.4);
        let f = theta.scale(2.0).sigmoid();
        let stopped = stop_gradient(f);
        assert_eq!(stopped.value(), f.value());
        let g = stopped.grad();
        assert_eq!(g[theta.index()], 0.0);
        assert!(f.grad()[theta.index()] > 0.0);
    }

    #[test]
    fn targeted_error_forward_and_backward() {
        // ẽ = (f − g − ω − ⊥f)²: forward (g + ω)², ∂ẽ/∂θ = −2(g + ω) ∂f/∂θ.
        let t = Tape::new();
        let theta = t.var(0.7);
        let g = t.var(0.15);
        let omega = 0.05;
        let f = theta.sigmoid();
        let e_tilde = (f - g).add_const(-omega) - stop_gradient(f);
        let e_tilde = e_tilde.square();
        assert!((e_tilde.value() - (0.15f64 + 0.05).powi(2)).abs() < 1e-15);
        let grad = e_tilde.grad();
        let df = f.value() * (1.0 - f.value());
        let expected = -2.0 * (0.15 + 0.05) * df;
        assert!((grad[theta.index()] - expected).abs() < 1e-15);

        // Numeric check along the live path only: perturb θ, keep ⊥f fixed.
        let f0 = f.value();
        let live = |th: f64| (crate::domain::sigmoid(th) - 0.15 - omega - f0).powi(2);
        let h = 1e-4;
        let fd = (live(0.7 + h) - live(0.7 - h)) / (2.0 * h);
        assert!((fd - expected).abs() < 1e-8);
    }

    #[test]
    fn max_const_blocks_clamped_side() {
        let t = Tape::new();
        let x = t.var(0.02);
        let y = x.max_const(0.05);
        assert_eq!(y.value(), 0.05);
        assert_eq!(y.grad()[x.index()], 0.0);
        let z = x.max_const(0.01);
        assert_eq!(z.grad()[x.index()], 1.0);
    }
}
