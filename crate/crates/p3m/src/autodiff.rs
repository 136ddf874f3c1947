//! Reverse-mode automatic differentiation over a flat arena tape.
//!
//! Nodes hold vectors of `f64` (a scalar is a length-1 vector) and are
//! evaluated eagerly as they are pushed, so construction order is already a
//! topological order and the backward pass is a single reverse sweep. The
//! operation set is fixed: `input`, `add`, `sub`, `mul`, `div`, `exp`,
//! `log`, `dot`, `scale`, `softplus`, `l2norm`. Parameters are bound as
//! input nodes carrying an offset into one flat parameter vector, so a
//! [`Gradient`] aligns with that vector element for element.

use crate::error::{Error, Result};

/// Operation performed by a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// Leaf holding externally supplied values (parameter or constant).
    Input,
    /// Elementwise sum of two equal-length vectors.
    Add,
    /// Elementwise difference.
    Sub,
    /// Elementwise product.
    Mul,
    /// Elementwise quotient.
    Div,
    /// Elementwise exponential.
    Exp,
    /// Elementwise natural logarithm.
    Log,
    /// Inner product of two equal-length vectors; yields a scalar.
    Dot,
    /// Scalar times vector; first argument must have length 1.
    Scale,
    /// Numerically stable `ln(1 + e^x)`, elementwise.
    Softplus,
    /// Vector divided by its Euclidean norm.
    L2Norm,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const NO_PARAM: usize = usize::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: OpKind,
    a: usize,
    b: usize,
    /// Start of this node's values in the arena.
    off: usize,
    len: usize,
    /// Offset into the flat parameter vector, or `NO_PARAM`.
    param_off: usize,
}

/// Gradient of a scalar root with respect to the flat parameter vector.
/// Indexing matches the offsets passed to [`Tape::param`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Gradient(vec![0.0; n])
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Gradient(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Arena tape. Values live in one contiguous buffer; each node records its
/// slice. Dropping the tape frees the whole step's graph at once.
pub struct Tape {
    n_params: usize,
    vals: Vec<f64>,
    nodes: Vec<Node>,
    poison: Option<OpKind>,
}

pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Creates a tape differentiating with respect to `n_params` flat
    /// parameters.
    pub fn new(n_params: usize) -> Self {
        Tape {
            n_params,
            vals: Vec::new(),
            nodes: Vec::new(),
            poison: None,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// First operation that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<OpKind> {
        self.poison
    }

    /// Values of a node.
    pub fn value(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id.0];
        &self.vals[n.off..n.off + n.len]
    }

    /// Value of a length-1 node. Panics if the node is not a scalar.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.len, 1, "scalar() on a node of length {}", n.len);
        self.vals[n.off]
    }

    pub fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].len
    }

    fn push(&mut self, kind: OpKind, a: usize, b: usize, param_off: usize, out: &[f64]) -> NodeId {
        if self.poison.is_none() && out.iter().any(|v| !v.is_finite()) {
            self.poison = Some(kind);
        }
        let off = self.vals.len();
        self.vals.extend_from_slice(out);
        self.nodes.push(Node {
            kind,
            a,
            b,
            off,
            len: out.len(),
            param_off,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Binds a slice of the flat parameter vector as a differentiable input.
    /// `offset` is the slice's start within that vector.
    pub fn param(&mut self, offset: usize, values: &[f64]) -> NodeId {
        assert!(!values.is_empty(), "param of length 0");
        assert!(
            offset + values.len() <= self.n_params,
            "param slice {}..{} exceeds n_params {}",
            offset,
            offset + values.len(),
            self.n_params
        );
        self.push(OpKind::Input, 0, 0, offset, values)
    }

    /// An input the gradient does not flow into.
    pub fn constant(&mut self, values: &[f64]) -> NodeId {
        assert!(!values.is_empty(), "constant of length 0");
        self.push(OpKind::Input, 0, 0, NO_PARAM, values)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(&[v])
    }

    fn binary_elementwise(
        &mut self,
        kind: OpKind,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> NodeId {
        let (na, nb) = (self.nodes[a.0], self.nodes[b.0]);
        assert_eq!(na.len, nb.len, "{kind:?} on lengths {} and {}", na.len, nb.len);
        let out: Vec<f64> = (0..na.len)
            .map(|k| f(self.vals[na.off + k], self.vals[nb.off + k]))
            .collect();
        self.push(kind, a.0, b.0, NO_PARAM, &out)
    }

    fn unary_elementwise(&mut self, kind: OpKind, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let na = self.nodes[a.0];
        let out: Vec<f64> = (0..na.len).map(|k| f(self.vals[na.off + k])).collect();
        self.push(kind, a.0, a.0, NO_PARAM, &out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(OpKind::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(OpKind::Div, a, b, |x, y| x / y)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(OpKind::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(OpKind::Log, a, f64::ln)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(OpKind::Softplus, a, softplus)
    }

    /// Inner product; the result is a length-1 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (self.nodes[a.0], self.nodes[b.0]);
        assert_eq!(na.len, nb.len, "dot on lengths {} and {}", na.len, nb.len);
        let mut acc = 0.0;
        for k in 0..na.len {
            acc += self.vals[na.off + k] * self.vals[nb.off + k];
        }
        self.push(OpKind::Dot, a.0, b.0, NO_PARAM, &[acc])
    }

    /// Scalar `s` (length 1) times vector `v`.
    pub fn scale(&mut self, s: NodeId, v: NodeId) -> NodeId {
        let (ns, nv) = (self.nodes[s.0], self.nodes[v.0]);
        assert_eq!(ns.len, 1, "scale factor must be a scalar, got length {}", ns.len);
        let s0 = self.vals[ns.off];
        let out: Vec<f64> = (0..nv.len).map(|k| s0 * self.vals[nv.off + k]).collect();
        self.push(OpKind::Scale, s.0, v.0, NO_PARAM, &out)
    }

    /// `v / ‖v‖₂`. A zero vector poisons the tape (0/0).
    pub fn l2norm(&mut self, v: NodeId) -> NodeId {
        let nv = self.nodes[v.0];
        let r = (0..nv.len)
            .map(|k| self.vals[nv.off + k] * self.vals[nv.off + k])
            .sum::<f64>()
            .sqrt();
        let out: Vec<f64> = (0..nv.len).map(|k| self.vals[nv.off + k] / r).collect();
        self.push(OpKind::L2Norm, v.0, v.0, NO_PARAM, &out)
    }

    /// Reverse sweep from a scalar root. Inputs not reachable from the root
    /// receive gradient 0. The tape is not consumed; calling this twice on
    /// the same root gives bit-identical results.
    pub fn backward(&self, root: NodeId) -> Result<Gradient> {
        let r = self.nodes[root.0];
        if r.len != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar root, got length {}",
                r.len
            )));
        }
        if let Some(op) = self.poison {
            return Err(Error::Numeric {
                op: Some(op),
                context: "tape holds a non-finite forward value".into(),
            });
        }

        let mut adj = vec![0.0; self.vals.len()];
        adj[r.off] = 1.0;
        let mut grad = vec![0.0; self.n_params];

        for idx in (0..=root.0).rev() {
            let n = self.nodes[idx];
            let (ao, bo, o) = (self.nodes[n.a].off, self.nodes[n.b].off, n.off);
            match n.kind {
                OpKind::Input => {
                    if n.param_off != NO_PARAM {
                        for k in 0..n.len {
                            grad[n.param_off + k] += adj[o + k];
                        }
                    }
                }
                OpKind::Add => {
                    for k in 0..n.len {
                        let g = adj[o + k];
                        adj[ao + k] += g;
                        adj[bo + k] += g;
                    }
                }
                OpKind::Sub => {
                    for k in 0..n.len {
                        let g = adj[o + k];
                        adj[ao + k] += g;
                        adj[bo + k] -= g;
                    }
                }
                OpKind::Mul => {
                    for k in 0..n.len {
                        let g = adj[o + k];
                        adj[ao + k] += g * self.vals[bo + k];
                        adj[bo + k] += g * self.vals[ao + k];
                    }
                }
                OpKind::Div => {
                    for k in 0..n.len {
                        let g = adj[o + k];
                        let vb = self.vals[bo + k];
                        adj[ao + k] += g / vb;
                        adj[bo + k] -= g * self.vals[ao + k] / (vb * vb);
                    }
                }
                OpKind::Exp => {
                    for k in 0..n.len {
                        adj[ao + k] += adj[o + k] * self.vals[o + k];
                    }
                }
                OpKind::Log => {
                    for k in 0..n.len {
                        adj[ao + k] += adj[o + k] / self.vals[ao + k];
                    }
                }
                OpKind::Dot => {
                    let g = adj[o];
                    if g != 0.0 {
                        for k in 0..self.nodes[n.a].len {
                            adj[ao + k] += g * self.vals[bo + k];
                            adj[bo + k] += g * self.vals[ao + k];
                        }
                    }
                }
                OpKind::Scale => {
                    let s0 = self.vals[ao];
                    for k in 0..n.len {
                        let g = adj[o + k];
                        adj[ao] += g * self.vals[bo + k];
                        adj[bo + k] += g * s0;
                    }
                }
                OpKind::Softplus => {
                    for k in 0..n.len {
                        adj[ao + k] += adj[o + k] * sigmoid(self.vals[ao + k]);
                    }
                }
                OpKind::L2Norm => {
                    // d(v/r) pulls back g to (g - u (g·u)) / r with u = v/r.
                    let r = (0..n.len)
                        .map(|k| self.vals[ao + k] * self.vals[ao + k])
                        .sum::<f64>()
                        .sqrt();
                    let mut gu = 0.0;
                    for k in 0..n.len {
                        gu += adj[o + k] * self.vals[o + k];
                    }
                    for k in 0..n.len {
                        adj[ao + k] += (adj[o + k] - self.vals[o + k] * gu) / r;
                    }
                }
            }
        }

        if let Some(bad) = grad.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: None,
                context: format!("gradient entry is {bad}"),
            });
        }
        Ok(Gradient(grad))
    }
}

/// Central-difference gradient of `objective` at `params`:
/// `(f(p + εe) − f(p − εe)) / 2ε` per coordinate. The oracle every backward
/// implementation is checked against.
pub fn finite_difference<F>(mut objective: F, params: &[f64], eps: f64) -> Result<Gradient>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Usage(format!("finite_difference eps must be > 0, got {eps}")));
    }
    let mut probe = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let hi = objective(&probe)?;
        probe[i] = params[i] - eps;
        let lo = objective(&probe)?;
        probe[i] = params[i];
        let d = (hi - lo) / (2.0 * eps);
        if !d.is_finite() {
            return Err(Error::Numeric {
                op: None,
                context: format!("finite difference at coordinate {i} is {d}"),
            });
        }
        grad[i] = d;
    }
    Ok(Gradient(grad))
}

/// Guarded relative error `|a − b| / max(1, |a|, |b|)`, applied entrywise
/// and maximized. The floor keeps exact-zero gradient entries (clamped
/// brackets) from turning finite-difference noise into spurious failures.
pub fn max_rel_err(a: &Gradient, b: &Gradient) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.0.iter()
        .zip(&b.0)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_via_dot() {
        let mut t = Tape::new(1);
        let p = t.param(0, &[3.0]);
        let y = t.dot(p, p);
        assert_eq!(t.scalar(y), 9.0);
        let g = t.backward(y).unwrap();
        assert!((g.values()[0] - 6.0).abs() < 1e-6);
        let fd = finite_difference(
            |p| {
                let mut t = Tape::new(1);
                let x = t.param(0, p);
                let y = t.dot(x, x);
                Ok(t.scalar(y))
            },
            &[3.0],
            1e-6,
        )
        .unwrap();
        assert!((g.values()[0] - fd.values()[0]).abs() < 1e-6);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new(2);
        let a = t.param(0, &[2.0]);
        let b = t.param(1, &[3.0]);
        let y = t.mul(a, b);
        let g = t.backward(y).unwrap();
        assert_eq!(g.values(), &[3.0, 2.0]);
    }

    #[test]
    fn softplus_at_zero() {
        let mut t = Tape::new(1);
        let z = t.param(0, &[0.0]);
        let y = t.softplus(z);
        assert!((t.scalar(y) - std::f64::consts::LN_2).abs() < 1e-15);
        let g = t.backward(y).unwrap();
        assert!((g.values()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exp_at_zero() {
        let mut t = Tape::new(1);
        let z = t.param(0, &[0.0]);
        let y = t.exp(z);
        let g = t.backward(y).unwrap();
        assert!((g.values()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn l2norm_values_and_pullback() {
        let mut t = Tape::new(2);
        let v = t.param(0, &[3.0, 4.0]);
        let u = t.l2norm(v);
        assert_eq!(t.value(u), &[0.6, 0.8]);
        let c = t.constant(&[1.0, 0.0]);
        let y = t.dot(u, c);
        let g = t.backward(y).unwrap();
        // d(v0/r)/dv = (1 - u0^2)/r, -u0 u1 / r at r = 5.
        assert!((g.values()[0] - (1.0 - 0.36) / 5.0).abs() < 1e-12);
        assert!((g.values()[1] - (-0.6 * 0.8) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_input_gets_zero() {
        let mut t = Tape::new(2);
        let a = t.param(0, &[1.5]);
        let _unused = t.param(1, &[7.0]);
        let y = t.mul(a, a);
        let g = t.backward(y).unwrap();
        assert_eq!(g.values()[1], 0.0);
    }

    #[test]
    fn backward_is_pure_and_deterministic() {
        let build = || {
            let mut t = Tape::new(4);
            let p = t.param(0, &[0.3, -0.7, 1.1, 0.2]);
            let e = t.exp(p);
            let s = t.softplus(p);
            let u = t.l2norm(e);
            let y0 = t.dot(u, s);
            let c = t.constant_scalar(0.25);
            let y = t.scale(c, y0);
            (t, y)
        };
        let (t1, y1) = build();
        let g1 = t1.backward(y1).unwrap();
        let g2 = t1.backward(y1).unwrap();
        assert_eq!(g1, g2);
        let (t2, y2) = build();
        let g3 = t2.backward(y2).unwrap();
        // Identical graphs yield bit-identical gradients.
        for (a, b) in g1.values().iter().zip(g3.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn linearity_of_backward() {
        let p0 = [0.4, -0.9, 0.6];
        let (alpha, beta) = (1.7, -0.3);
        let mut t = Tape::new(3);
        let p = t.param(0, &p0);
        let f = t.dot(p, p);
        let sp = t.softplus(p);
        let c = t.constant(&[1.0, 1.0, 1.0]);
        let g = t.dot(sp, c);
        let ca = t.constant_scalar(alpha);
        let cb = t.constant_scalar(beta);
        let af = t.scale(ca, f);
        let bg = t.scale(cb, g);
        let sum = t.add(af, bg);
        let grad_sum = t.backward(sum).unwrap();
        let grad_f = t.backward(f).unwrap();
        let grad_g = t.backward(g).unwrap();
        for k in 0..3 {
            let lin = alpha * grad_f.values()[k] + beta * grad_g.values()[k];
            assert!((grad_sum.values()[k] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut t = Tape::new(2);
        let p = t.param(0, &[1.0, 2.0]);
        let y = t.exp(p);
        assert!(matches!(t.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn division_by_zero_poisons_tape() {
        let mut t = Tape::new(1);
        let a = t.param(0, &[1.0]);
        let z = t.constant_scalar(0.0);
        let y = t.div(a, z);
        assert_eq!(t.poisoned(), Some(OpKind::Div));
        match t.backward(y) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, Some(OpKind::Div)),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn log_of_negative_poisons_tape() {
        let mut t = Tape::new(1);
        let a = t.param(0, &[-2.0]);
        let y = t.log(a);
        assert_eq!(t.poisoned(), Some(OpKind::Log));
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn finite_difference_rejects_bad_eps() {
        let r = finite_difference(|_| Ok(0.0), &[1.0], 0.0);
        assert!(matches!(r, Err(Error::Usage(_))));
        let r = finite_difference(|_| Ok(0.0), &[1.0], -1e-6);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn finite_difference_reports_nan_objective() {
        let r = finite_difference(|_| Ok(f64::NAN), &[1.0], 1e-6);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    /// Per-op agreement with central differences at random points.
    #[test]
    fn every_op_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 5usize;

        // Each case builds a scalar objective exercising one op-kind; the
        // sampler keeps inputs inside the op's smooth domain.
        type Builder = fn(&mut Tape, &[f64]) -> NodeId;
        let cases: Vec<(OpKind, Builder, fn(&mut ChaCha8Rng) -> f64)> = vec![
            (OpKind::Add, add_case, sample_any),
            (OpKind::Sub, sub_case, sample_any),
            (OpKind::Mul, mul_case, sample_any),
            (OpKind::Div, div_case, sample_away_from_zero),
            (OpKind::Exp, exp_case, sample_any),
            (OpKind::Log, log_case, sample_positive),
            (OpKind::Dot, dot_case, sample_any),
            (OpKind::Scale, scale_case, sample_any),
            (OpKind::Softplus, softplus_case, sample_any),
            (OpKind::L2Norm, l2norm_case, sample_away_from_zero),
        ];

        for (kind, build, sample) in cases {
            for trial in 0..100 {
                let params: Vec<f64> = (0..2 * d).map(|_| sample(&mut rng)).collect();
                let mut t = Tape::new(params.len());
                let y = build(&mut t, &params);
                let analytic = t.backward(y).unwrap();
                let fd = finite_difference(
                    |p| {
                        let mut t = Tape::new(p.len());
                        let y = build(&mut t, p);
                        Ok(t.scalar(y))
                    },
                    &params,
                    1e-6,
                )
                .unwrap();
                let err = max_rel_err(&analytic, &fd);
                assert!(err < 1e-6, "{kind:?} trial {trial}: rel err {err:.3e}");
            }
        }
    }

    fn sample_any(r: &mut ChaCha8Rng) -> f64 {
        r.gen_range(-2.0..2.0)
    }

    fn sample_positive(r: &mut ChaCha8Rng) -> f64 {
        r.gen_range(0.5..2.5)
    }

    fn sample_away_from_zero(r: &mut ChaCha8Rng) -> f64 {
        let v: f64 = r.gen_range(0.5..2.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    }

    fn split_params<'a>(t: &mut Tape, p: &'a [f64]) -> (NodeId, NodeId) {
        let half = p.len() / 2;
        (t.param(0, &p[..half]), t.param(half, &p[half..]))
    }

    fn reduce(t: &mut Tape, v: NodeId) -> NodeId {
        let w: Vec<f64> = (0..t.len_of(v)).map(|k| 0.3 + 0.1 * k as f64).collect();
        let c = t.constant(&w);
        t.dot(v, c)
    }

    fn add_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let (a, b) = split_params(t, p);
        let v = t.add(a, b);
        reduce(t, v)
    }

    fn sub_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let (a, b) = split_params(t, p);
        let v = t.sub(a, b);
        reduce(t, v)
    }

    fn mul_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let (a, b) = split_params(t, p);
        let v = t.mul(a, b);
        reduce(t, v)
    }

    fn div_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let (a, b) = split_params(t, p);
        let v = t.div(a, b);
        reduce(t, v)
    }

    fn exp_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let a = t.param(0, p);
        let v = t.exp(a);
        reduce(t, v)
    }

    fn log_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let a = t.param(0, p);
        let v = t.log(a);
        reduce(t, v)
    }

    fn dot_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let (a, b) = split_params(t, p);
        t.dot(a, b)
    }

    fn scale_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let s = t.param(0, &p[..1]);
        let v = t.param(1, &p[1..]);
        let sv = t.scale(s, v);
        reduce(t, sv)
    }

    fn softplus_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let a = t.param(0, p);
        let v = t.softplus(a);
        reduce(t, v)
    }

    fn l2norm_case(t: &mut Tape, p: &[f64]) -> NodeId {
        let a = t.param(0, p);
        let v = t.l2norm(a);
        reduce(t, v)
    }

    /// A three-layer random composition mixing every vector op.
    #[test]
    fn random_composition_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = 8usize;
        for trial in 0..20 {
            let params: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let build = |t: &mut Tape, p: &[f64]| {
                let x = t.param(0, &p[..d]);
                let w1 = t.param(d, &p[d..2 * d]);
                let w2 = t.param(2 * d, &p[2 * d..]);
                let h1 = t.mul(x, w1);
                let h1 = t.softplus(h1);
                let h1 = t.l2norm(h1);
                let h2 = t.add(h1, w2);
                let h2 = t.exp(h2);
                let s = t.dot(h2, w1);
                let sv = t.scale(s, h1);
                let sv = t.softplus(sv);
                reduce(t, sv)
            };
            let mut t = Tape::new(params.len());
            let y = build(&mut t, &params);
            let analytic = t.backward(y).unwrap();
            let fd = finite_difference(
                |p| {
                    let mut t = Tape::new(p.len());
                    let y = build(&mut t, p);
                    Ok(t.scalar(y))
                },
                &params,
                1e-6,
            )
            .unwrap();
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-6, "trial {trial}: rel err {err:.3e}");
        }
    }
}
