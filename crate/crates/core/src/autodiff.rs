//! Reverse-mode automatic differentiation on a scalar Wengert tape.
//!
//! Every intermediate scalar of a computation is recorded as a node holding
//! its value, its operation, and the indices of its parents. [`Var`] is a
//! cheap copyable handle (tape reference + node id + cached value); arithmetic
//! on `Var`s appends nodes. Two backward passes are provided:
//!
//! * [`Tape::grad`]: terminal reverse sweep over plain `f64` adjoints. Fast,
//!   allocates no nodes, used for parameter gradients.
//! * [`Tape::grad_vars`]: differentiable reverse sweep that records the
//!   adjoint computation itself as new tape nodes, so the returned gradients
//!   can be differentiated once more.
//!
//! Differentiation order is tracked per node: leaves are order 0 and
//! `grad_vars` emits nodes at order `output + 1`. Requesting a derivative of
//! an order-2 quantity fails with [`AdError::ThirdOrder`]; second order is
//! the supported ceiling. Forward-mode tangent expressions built manually
//! (e.g. by the network layer) should be recorded under
//! [`Tape::raise_min_order`] so the ceiling stays honest.
//!
//! Non-finite values do not panic and are not silently carried to the caller:
//! the first op producing a NaN/Inf poisons the tape, and poisoning surfaces
//! as an `Err` when a value or gradient is extracted.
//!
//! Nodes that consume many parents (dense dot products, large sums) are fused
//! into single nodes over contiguous id ranges or an argument arena, which is
//! what makes a scalar tape viable for MLP-sized graphs.

use std::cell::RefCell;
use std::fmt;

/// Errors surfaced when extracting values or gradients from a tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdError {
    /// `lift` was handed a NaN or infinite input.
    NonFiniteInput,
    /// An operation produced a NaN or infinite value; `op` names the first
    /// offender recorded on the tape.
    NonFinite { op: &'static str },
    /// A third-order derivative was requested; the tape supports order <= 2.
    ThirdOrder,
}

impl fmt::Display for AdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdError::NonFiniteInput => write!(f, "non-finite input lifted onto tape"),
            AdError::NonFinite { op } => {
                write!(f, "non-finite value produced by op `{op}`")
            }
            AdError::ThirdOrder => {
                write!(f, "third-order derivative requested; tape supports order <= 2")
            }
        }
    }
}

impl std::error::Error for AdError {}

/// Tape operation. Parent references are node indices; wide ops reference
/// either contiguous id ranges (`DotRange*`, weights/activations pushed
/// back-to-back) or a span of the argument arena (`DotPairs`, `Sum`).
#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    /// x + k; the constant only affects the recorded value, not the pullback.
    AddK(u32),
    /// x * k
    MulK(u32, f64),
    /// k - x; like `AddK`, the constant is baked into the value.
    RsubK(u32),
    Exp(u32),
    Ln(u32),
    Sqrt(u32),
    Tanh(u32),
    Sigmoid(u32),
    Silu(u32),
    Powi(u32, i32),
    Powf(u32, f64),
    /// a * b + c (single rounding is irrelevant here; we use mul_add for
    /// speed and to keep gradients exact w.r.t. the recorded value).
    MulAdd(u32, u32, u32),
    /// sum_i vals[w + i] * vals[x + i]
    DotRange { w: u32, x: u32, len: u32 },
    /// bias + sum_i vals[w + i] * vals[x + i]
    DotRangeBias { w: u32, x: u32, len: u32, b: u32 },
    /// sum over arena pairs: vals[args[off + 2i]] * vals[args[off + 2i + 1]]
    DotPairs { off: u32, len: u32 },
    /// sum_i vals[args[off + i]]
    Sum { off: u32, len: u32 },
}

struct Inner {
    ops: Vec<Op>,
    vals: Vec<f64>,
    /// Derivative order of each node: 0 for leaves/forward values, n for
    /// nodes created while materializing an n-th derivative.
    order: Vec<u8>,
    /// Parent arena for `DotPairs` / `Sum`.
    args: Vec<u32>,
    /// Nodes pushed while this is m carry order >= m.
    min_order: u8,
    /// First non-finite op observed, if any. Forward computation continues
    /// (NaNs propagate); extraction reports the error.
    poison: Option<AdError>,
}

/// Records a scalar computation graph. See the module docs.
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a tape node. Copyable; carries its value so reads never touch
/// the tape. A `Var` is only meaningful with the tape that created it, and
/// the lifetime ties it to that tape; mixing handles from two live tapes is
/// detected and panics.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.id, self.val)
    }
}

/// Restores the tape's previous minimum node order when dropped.
pub struct OrderGuard<'t> {
    tape: &'t Tape,
    prev: u8,
}

impl Drop for OrderGuard<'_> {
    fn drop(&mut self) {
        self.tape.inner.borrow_mut().min_order = self.prev;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                ops: Vec::new(),
                vals: Vec::new(),
                order: Vec::new(),
                args: Vec::new(),
                min_order: 0,
                poison: None,
            }),
        }
    }

    /// Number of nodes currently recorded.
    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all nodes but keeps allocated capacity. Requires `&mut self`,
    /// so no `Var` from the previous generation can survive the call.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.ops.clear();
        inner.vals.clear();
        inner.order.clear();
        inner.args.clear();
        inner.min_order = 0;
        inner.poison = None;
    }

    /// First numerical error recorded on the tape, if any.
    pub fn error(&self) -> Option<AdError> {
        self.inner.borrow().poison.clone()
    }

    /// Places a leaf on the tape. Rejects non-finite inputs up front so a
    /// poisoned data point is distinguishable from a numerical blow-up.
    pub fn lift(&self, x: f64) -> Result<Var<'_>, AdError> {
        if !x.is_finite() {
            return Err(AdError::NonFiniteInput);
        }
        Ok(self.push(Op::Leaf, x, "lift"))
    }

    /// Leaf for a compile-time constant. Panics on non-finite input; use
    /// [`Tape::lift`] for data.
    pub fn constant(&self, x: f64) -> Var<'_> {
        assert!(x.is_finite(), "constant() requires a finite value");
        self.push(Op::Leaf, x, "constant")
    }

    /// Lifts a slice as consecutive leaves. The returned handles are
    /// guaranteed to occupy a contiguous id range, which downstream fused
    /// ops rely on.
    pub fn lift_slice(&self, xs: &[f64]) -> Result<Vec<Var<'_>>, AdError> {
        if let Some(&bad) = xs.iter().find(|v| !v.is_finite()) {
            let _ = bad;
            return Err(AdError::NonFiniteInput);
        }
        Ok(xs.iter().map(|&x| self.push(Op::Leaf, x, "lift")).collect())
    }

    /// Raises the minimum derivative order assigned to newly created nodes
    /// until the guard drops. Used when hand-building derivative expressions
    /// (forward-mode tangents) so the third-order guard accounts for them.
    pub fn raise_min_order(&self, order: u8) -> OrderGuard<'_> {
        let mut inner = self.inner.borrow_mut();
        let prev = inner.min_order;
        inner.min_order = inner.min_order.max(order);
        drop(inner);
        OrderGuard { tape: self, prev }
    }

    fn push(&self, op: Op, val: f64, name: &'static str) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let ord = {
            let o = &inner.order;
            let parent_ord = match op {
                Op::Leaf => 0,
                Op::Neg(a)
                | Op::AddK(a)
                | Op::MulK(a, _)
                | Op::RsubK(a)
                | Op::Exp(a)
                | Op::Ln(a)
                | Op::Sqrt(a)
                | Op::Tanh(a)
                | Op::Sigmoid(a)
                | Op::Silu(a)
                | Op::Powi(a, _)
                | Op::Powf(a, _) => o[a as usize],
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    o[a as usize].max(o[b as usize])
                }
                Op::MulAdd(a, b, c) => o[a as usize].max(o[b as usize]).max(o[c as usize]),
                Op::DotRange { w, x, len } => {
                    let mut m = 0;
                    for i in 0..len {
                        m = m.max(o[(w + i) as usize]).max(o[(x + i) as usize]);
                    }
                    m
                }
                Op::DotRangeBias { w, x, len, b } => {
                    let mut m = o[b as usize];
                    for i in 0..len {
                        m = m.max(o[(w + i) as usize]).max(o[(x + i) as usize]);
                    }
                    m
                }
                Op::DotPairs { off, len } => {
                    let mut m = 0;
                    for i in 0..2 * len {
                        m = m.max(o[inner.args[(off + i) as usize] as usize]);
                    }
                    m
                }
                Op::Sum { off, len } => {
                    let mut m = 0;
                    for i in 0..len {
                        m = m.max(o[inner.args[(off + i) as usize] as usize]);
                    }
                    m
                }
            };
            parent_ord.max(inner.min_order)
        };
        if !val.is_finite() && inner.poison.is_none() {
            inner.poison = Some(AdError::NonFinite { op: name });
        }
        let id = inner.ops.len() as u32;
        inner.ops.push(op);
        inner.vals.push(val);
        inner.order.push(ord);
        Var {
            tape: self,
            id,
            val,
        }
    }

    fn binary(&self, op: Op, val: f64, name: &'static str) -> Var<'_> {
        self.push(op, val, name)
    }

    /// Sum of the given terms as a single node. Empty input yields a
    /// constant zero; a single term is returned unchanged.
    pub fn sum<'t>(&'t self, terms: &[Var<'t>]) -> Var<'t> {
        match terms.len() {
            0 => self.constant(0.0),
            1 => terms[0],
            _ => {
                let mut inner = self.inner.borrow_mut();
                let off = inner.args.len() as u32;
                let mut val = 0.0;
                for t in terms {
                    debug_assert!(std::ptr::eq(t.tape, self), "Var from a different tape");
                    inner.args.push(t.id);
                    val += t.val;
                }
                drop(inner);
                self.push(
                    Op::Sum {
                        off,
                        len: terms.len() as u32,
                    },
                    val,
                    "sum",
                )
            }
        }
    }

    /// Sum of elementwise products as a single node.
    pub fn dot_pairs<'t>(&'t self, pairs: &[(Var<'t>, Var<'t>)]) -> Var<'t> {
        match pairs.len() {
            0 => self.constant(0.0),
            _ => {
                let mut inner = self.inner.borrow_mut();
                let off = inner.args.len() as u32;
                let mut val = 0.0;
                for (a, b) in pairs {
                    debug_assert!(
                        std::ptr::eq(a.tape, self) && std::ptr::eq(b.tape, self),
                        "Var from a different tape"
                    );
                    inner.args.push(a.id);
                    inner.args.push(b.id);
                    val += a.val * b.val;
                }
                drop(inner);
                self.push(
                    Op::DotPairs {
                        off,
                        len: pairs.len() as u32,
                    },
                    val,
                    "dot",
                )
            }
        }
    }

    /// Fused dot product over two contiguous id ranges, plus optional bias.
    /// `pub(crate)`: callers must guarantee contiguity by construction.
    pub(crate) fn dot_range(&self, w0: u32, x0: u32, len: u32, bias: Option<u32>) -> Var<'_> {
        let inner = self.inner.borrow();
        let mut val = match bias {
            Some(b) => inner.vals[b as usize],
            None => 0.0,
        };
        for i in 0..len as usize {
            val += inner.vals[w0 as usize + i] * inner.vals[x0 as usize + i];
        }
        drop(inner);
        match bias {
            Some(b) => self.push(
                Op::DotRangeBias {
                    w: w0,
                    x: x0,
                    len,
                    b,
                },
                val,
                "affine",
            ),
            None => self.push(Op::DotRange { w: w0, x: x0, len }, val, "dot"),
        }
    }

    /// Reconstructs a handle for an existing node id.
    pub(crate) fn var_at(&self, id: u32) -> Var<'_> {
        let val = self.inner.borrow().vals[id as usize];
        Var {
            tape: self,
            id,
            val,
        }
    }

    pub(crate) fn order_of_id(&self, id: u32) -> u8 {
        self.inner.borrow().order[id as usize]
    }

    /// Gradient of `output` w.r.t. each of `wrt`, as plain numbers.
    ///
    /// This is the terminal pass: it cannot be differentiated again. Errors
    /// if the tape is poisoned, if `output` already has derivative order 2
    /// (the result would be third order), or if an adjoint turns non-finite.
    pub fn grad(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<f64>, AdError> {
        assert!(
            std::ptr::eq(output.tape, self),
            "output Var from a different tape"
        );
        if let Some(e) = self.error() {
            return Err(e);
        }
        if self.order_of_id(output.id) >= 2 {
            return Err(AdError::ThirdOrder);
        }
        let inner = self.inner.borrow();
        let n = output.id as usize + 1;
        let mut adj = vec![0.0f64; n];
        adj[output.id as usize] = 1.0;
        for id in (0..n).rev() {
            let g = adj[id];
            if g == 0.0 {
                continue;
            }
            let v = &inner.vals;
            match inner.ops[id] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a as usize] += g * v[b as usize];
                    adj[b as usize] += g * v[a as usize];
                }
                Op::Div(a, b) => {
                    let vb = v[b as usize];
                    adj[a as usize] += g / vb;
                    adj[b as usize] -= g * v[id] / vb;
                }
                Op::Neg(a) => adj[a as usize] -= g,
                Op::AddK(a) => adj[a as usize] += g,
                Op::MulK(a, k) => adj[a as usize] += g * k,
                Op::RsubK(a) => adj[a as usize] -= g,
                Op::Exp(a) => adj[a as usize] += g * v[id],
                Op::Ln(a) => adj[a as usize] += g / v[a as usize],
                Op::Sqrt(a) => adj[a as usize] += g * 0.5 / v[id],
                Op::Tanh(a) => {
                    let t = v[id];
                    adj[a as usize] += g * (1.0 - t * t);
                }
                Op::Sigmoid(a) => {
                    let s = v[id];
                    adj[a as usize] += g * s * (1.0 - s);
                }
                Op::Silu(a) => {
                    let x = v[a as usize];
                    let s = 1.0 / (1.0 + (-x).exp());
                    adj[a as usize] += g * s * (1.0 + x * (1.0 - s));
                }
                Op::Powi(a, k) => {
                    adj[a as usize] += g * f64::from(k) * v[a as usize].powi(k - 1);
                }
                Op::Powf(a, k) => {
                    adj[a as usize] += g * k * v[a as usize].powf(k - 1.0);
                }
                Op::MulAdd(a, b, c) => {
                    adj[a as usize] += g * v[b as usize];
                    adj[b as usize] += g * v[a as usize];
                    adj[c as usize] += g;
                }
                Op::DotRange { w, x, len } => {
                    for i in 0..len as usize {
                        adj[w as usize + i] += g * v[x as usize + i];
                        adj[x as usize + i] += g * v[w as usize + i];
                    }
                }
                Op::DotRangeBias { w, x, len, b } => {
                    for i in 0..len as usize {
                        adj[w as usize + i] += g * v[x as usize + i];
                        adj[x as usize + i] += g * v[w as usize + i];
                    }
                    adj[b as usize] += g;
                }
                Op::DotPairs { off, len } => {
                    for i in 0..len as usize {
                        let a = inner.args[off as usize + 2 * i] as usize;
                        let b = inner.args[off as usize + 2 * i + 1] as usize;
                        adj[a] += g * v[b];
                        adj[b] += g * v[a];
                    }
                }
                Op::Sum { off, len } => {
                    for i in 0..len as usize {
                        adj[inner.args[off as usize + i] as usize] += g;
                    }
                }
            }
        }
        let out: Vec<f64> = wrt
            .iter()
            .map(|w| {
                assert!(std::ptr::eq(w.tape, self), "wrt Var from a different tape");
                if (w.id as usize) < n {
                    adj[w.id as usize]
                } else {
                    0.0
                }
            })
            .collect();
        if let Some(&bad) = out.iter().find(|g| !g.is_finite()) {
            let _ = bad;
            return Err(AdError::NonFinite { op: "grad" });
        }
        Ok(out)
    }

    /// Differentiable gradient: records the adjoint computation as new tape
    /// nodes and returns them as `Var`s, so they can be fed back into
    /// [`Tape::grad`] (or another loss) for second-order derivatives.
    ///
    /// The emitted nodes carry derivative order `order(output) + 1`; calling
    /// this on an order-2 output errors with [`AdError::ThirdOrder`].
    pub fn grad_vars<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, AdError> {
        assert!(
            std::ptr::eq(output.tape, self),
            "output Var from a different tape"
        );
        if let Some(e) = self.error() {
            return Err(e);
        }
        let out_order = self.order_of_id(output.id);
        if out_order >= 2 {
            return Err(AdError::ThirdOrder);
        }
        let _guard = self.raise_min_order(out_order + 1);
        let n = output.id as usize + 1;
        let mut adj: Vec<Option<Var<'t>>> = vec![None; n];
        adj[output.id as usize] = Some(self.constant(1.0));
        // Accumulate `term` into the adjoint of node `a`.
        fn acc<'t>(adj: &mut [Option<Var<'t>>], a: u32, term: Var<'t>) {
            let slot = &mut adj[a as usize];
            *slot = Some(match slot.take() {
                None => term,
                Some(prev) => prev + term,
            });
        }
        for id in (0..n).rev() {
            let Some(g) = adj[id] else { continue };
            let op = self.inner.borrow().ops[id];
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut adj, a, g);
                    acc(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, a, g);
                    acc(&mut adj, b, -g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.var_at(a), self.var_at(b));
                    acc(&mut adj, a, g * vb);
                    acc(&mut adj, b, g * va);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.var_at(a), self.var_at(b));
                    let ga = g / vb;
                    acc(&mut adj, a, ga);
                    acc(&mut adj, b, -(ga * va / vb));
                }
                Op::Neg(a) => acc(&mut adj, a, -g),
                Op::AddK(a) => acc(&mut adj, a, g),
                Op::MulK(a, k) => acc(&mut adj, a, g * k),
                Op::RsubK(a) => acc(&mut adj, a, -g),
                Op::Exp(a) => {
                    let out = self.var_at(id as u32);
                    acc(&mut adj, a, g * out);
                }
                Op::Ln(a) => {
                    let va = self.var_at(a);
                    acc(&mut adj, a, g / va);
                }
                Op::Sqrt(a) => {
                    let out = self.var_at(id as u32);
                    acc(&mut adj, a, g * 0.5 / out);
                }
                Op::Tanh(a) => {
                    let out = self.var_at(id as u32);
                    acc(&mut adj, a, g * (out * out).rsub(1.0));
                }
                Op::Sigmoid(a) => {
                    let out = self.var_at(id as u32);
                    acc(&mut adj, a, g * (out * out.rsub(1.0)));
                }
                Op::Silu(a) => {
                    // silu'(x) = s(x) * (1 + x * (1 - s(x)))
                    let va = self.var_at(a);
                    let s = va.sigmoid();
                    let p = s * (va * s.rsub(1.0) + 1.0);
                    acc(&mut adj, a, g * p);
                }
                Op::Powi(a, k) => {
                    let va = self.var_at(a);
                    acc(&mut adj, a, g * (va.powi(k - 1) * f64::from(k)));
                }
                Op::Powf(a, k) => {
                    let va = self.var_at(a);
                    acc(&mut adj, a, g * (va.powf(k - 1.0) * k));
                }
                Op::MulAdd(a, b, c) => {
                    let (va, vb) = (self.var_at(a), self.var_at(b));
                    acc(&mut adj, a, g * vb);
                    acc(&mut adj, b, g * va);
                    acc(&mut adj, c, g);
                }
                Op::DotRange { w, x, len } => {
                    for i in 0..len {
                        acc(&mut adj, w + i, g * self.var_at(x + i));
                        acc(&mut adj, x + i, g * self.var_at(w + i));
                    }
                }
                Op::DotRangeBias { w, x, len, b } => {
                    for i in 0..len {
                        acc(&mut adj, w + i, g * self.var_at(x + i));
                        acc(&mut adj, x + i, g * self.var_at(w + i));
                    }
                    acc(&mut adj, b, g);
                }
                Op::DotPairs { off, len } => {
                    for i in 0..len {
                        let (a, b) = {
                            let inner = self.inner.borrow();
                            (
                                inner.args[(off + 2 * i) as usize],
                                inner.args[(off + 2 * i + 1) as usize],
                            )
                        };
                        acc(&mut adj, a, g * self.var_at(b));
                        acc(&mut adj, b, g * self.var_at(a));
                    }
                }
                Op::Sum { off, len } => {
                    for i in 0..len {
                        let a = self.inner.borrow().args[(off + i) as usize];
                        acc(&mut adj, a, g);
                    }
                }
            }
        }
        let out = wrt
            .iter()
            .map(|w| {
                assert!(std::ptr::eq(w.tape, self), "wrt Var from a different tape");
                match adj.get(w.id as usize).and_then(|o| *o) {
                    Some(v) => v,
                    None => self.constant(0.0),
                }
            })
            .collect();
        if let Some(e) = self.error() {
            return Err(e);
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    /// The recorded value. Never fails; may be NaN if upstream math blew up.
    /// Use [`Var::checked_value`] at loss-extraction points.
    pub fn value(self) -> f64 {
        self.val
    }

    /// The recorded value, failing if the tape has been poisoned by any
    /// non-finite intermediate.
    pub fn checked_value(self) -> Result<f64, AdError> {
        if let Some(e) = self.tape.error() {
            return Err(e);
        }
        Ok(self.val)
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub(crate) fn id(self) -> u32 {
        self.id
    }

    fn same_tape(self, other: Var<'t>) -> &'t Tape {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "cannot combine Vars from different tapes"
        );
        self.tape
    }

    /// k - self, as one node.
    pub fn rsub(self, k: f64) -> Var<'t> {
        self.tape
            .push(Op::RsubK(self.id), k - self.val, "rsub")
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.push(Op::Exp(self.id), self.val.exp(), "exp")
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.push(Op::Ln(self.id), self.val.ln(), "ln")
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.push(Op::Sqrt(self.id), self.val.sqrt(), "sqrt")
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.push(Op::Tanh(self.id), self.val.tanh(), "tanh")
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = 1.0 / (1.0 + (-self.val).exp());
        self.tape.push(Op::Sigmoid(self.id), s, "sigmoid")
    }

    /// silu(x) = x * sigmoid(x); derivative s(x)(1 + x(1 - s(x))).
    pub fn silu(self) -> Var<'t> {
        let s = self.val / (1.0 + (-self.val).exp());
        self.tape.push(Op::Silu(self.id), s, "silu")
    }

    pub fn powi(self, k: i32) -> Var<'t> {
        self.tape
            .push(Op::Powi(self.id, k), self.val.powi(k), "powi")
    }

    pub fn powf(self, k: f64) -> Var<'t> {
        self.tape
            .push(Op::Powf(self.id, k), self.val.powf(k), "powf")
    }

    /// self * b + c as a single fused node.
    pub fn mul_add(self, b: Var<'t>, c: Var<'t>) -> Var<'t> {
        let t = self.same_tape(b);
        b.same_tape(c);
        t.push(
            Op::MulAdd(self.id, b.id, c.id),
            self.val.mul_add(b.val, c.val),
            "mul_add",
        )
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let t = self.same_tape(rhs);
        t.binary(Op::Add(self.id, rhs.id), self.val + rhs.val, "add")
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let t = self.same_tape(rhs);
        t.binary(Op::Sub(self.id, rhs.id), self.val - rhs.val, "sub")
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let t = self.same_tape(rhs);
        t.binary(Op::Mul(self.id, rhs.id), self.val * rhs.val, "mul")
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let t = self.same_tape(rhs);
        t.binary(Op::Div(self.id, rhs.id), self.val / rhs.val, "div")
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.push(Op::Neg(self.id), -self.val, "neg")
    }
}

impl<'t> std::ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, k: f64) -> Var<'t> {
        self.tape.push(Op::AddK(self.id), self.val + k, "addk")
    }
}

impl<'t> std::ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, k: f64) -> Var<'t> {
        self.tape
            .push(Op::AddK(self.id), self.val - k, "subk")
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, k: f64) -> Var<'t> {
        self.tape.push(Op::MulK(self.id, k), self.val * k, "mulk")
    }
}

impl<'t> std::ops::Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, k: f64) -> Var<'t> {
        self.tape
            .push(Op::MulK(self.id, 1.0 / k), self.val / k, "divk")
    }
}

pub mod dual {
    //! Forward-mode tangents layered over the reverse-mode tape.
    //!
    //! Derivatives with respect to network *inputs* are propagated forward as
    //! tangent expressions recorded on the same tape, one direction per input
    //! of interest. The resulting first-derivative nodes can then be pushed
    //! through the terminal reverse pass, giving mixed-mode second order
    //! (forward over reverse) at the cost of `k` extra forward sweeps instead
    //! of one reverse sweep per latent output.
    //!
    //! Tangent nodes are recorded at derivative order >= 1 so the tape's
    //! third-order guard keeps counting correctly.

    use super::{Tape, Var};

    /// Maximum number of simultaneous tangent directions. Three covers the
    /// widest input space used anywhere (spatial coordinate plus two bundle
    /// parameters).
    pub const MAX_DIRS: usize = 3;

    /// A tangent component: structurally zero, a unit seed, or a tape node.
    #[derive(Clone, Copy, Debug)]
    pub enum Tangent<'t> {
        Zero,
        One,
        V(Var<'t>),
    }

    impl<'t> Tangent<'t> {
        pub fn is_zero(self) -> bool {
            matches!(self, Tangent::Zero)
        }

        /// Materializes the tangent as a tape node.
        pub fn to_var(self, tape: &'t Tape) -> Var<'t> {
            match self {
                Tangent::Zero => tape.constant(0.0),
                Tangent::One => {
                    let _g = tape.raise_min_order(1);
                    tape.constant(1.0)
                }
                Tangent::V(v) => v,
            }
        }

        pub fn value(self) -> f64 {
            match self {
                Tangent::Zero => 0.0,
                Tangent::One => 1.0,
                Tangent::V(v) => v.value(),
            }
        }

        fn add(self, other: Tangent<'t>, tape: &'t Tape) -> Tangent<'t> {
            use Tangent::*;
            let _g = tape.raise_min_order(1);
            match (self, other) {
                (Zero, t) | (t, Zero) => t,
                (One, One) => V(tape.constant(2.0)),
                (One, V(v)) | (V(v), One) => V(v + 1.0),
                (V(a), V(b)) => V(a + b),
            }
        }

        fn sub(self, other: Tangent<'t>, tape: &'t Tape) -> Tangent<'t> {
            use Tangent::*;
            let _g = tape.raise_min_order(1);
            match (self, other) {
                (t, Zero) => t,
                (Zero, One) => V(tape.constant(-1.0)),
                (Zero, V(v)) => V(-v),
                (One, One) => Zero,
                (One, V(v)) => V(v.rsub(1.0)),
                (V(v), One) => V(v - 1.0),
                (V(a), V(b)) => V(a - b),
            }
        }

        /// Tangent scaled by a tape value (chain-rule factor).
        fn scale(self, f: Var<'t>) -> Tangent<'t> {
            match self {
                Tangent::Zero => Tangent::Zero,
                Tangent::One => Tangent::V(f),
                Tangent::V(v) => {
                    let _g = f.tape().raise_min_order(1);
                    Tangent::V(v * f)
                }
            }
        }

        fn scale_k(self, k: f64, tape: &'t Tape) -> Tangent<'t> {
            match self {
                Tangent::Zero => Tangent::Zero,
                Tangent::One => {
                    let _g = tape.raise_min_order(1);
                    Tangent::V(tape.constant(k))
                }
                Tangent::V(v) => {
                    let _g = tape.raise_min_order(1);
                    Tangent::V(v * k)
                }
            }
        }
    }

    /// A tape value bundled with its tangents along up to [`MAX_DIRS`]
    /// directions. Copyable; arithmetic applies the chain rule per direction.
    #[derive(Clone, Copy, Debug)]
    pub struct DualNum<'t> {
        pub v: Var<'t>,
        pub d: [Tangent<'t>; MAX_DIRS],
    }

    impl<'t> DualNum<'t> {
        /// Constant in every tangent direction.
        pub fn plain(v: Var<'t>) -> Self {
            DualNum {
                v,
                d: [Tangent::Zero; MAX_DIRS],
            }
        }

        /// Unit seed along direction `dir`.
        pub fn seed(v: Var<'t>, dir: usize) -> Self {
            let mut d = [Tangent::Zero; MAX_DIRS];
            d[dir] = Tangent::One;
            DualNum { v, d }
        }

        pub fn tangent_var(&self, dir: usize) -> Var<'t> {
            self.d[dir].to_var(self.v.tape())
        }

        fn tape(&self) -> &'t Tape {
            self.v.tape()
        }

        fn map2(self, rhs: Self, f: impl Fn(Tangent<'t>, Tangent<'t>) -> Tangent<'t>) -> [Tangent<'t>; MAX_DIRS] {
            let mut out = [Tangent::Zero; MAX_DIRS];
            for i in 0..MAX_DIRS {
                out[i] = f(self.d[i], rhs.d[i]);
            }
            out
        }
    }

    impl<'t> std::ops::Add for DualNum<'t> {
        type Output = DualNum<'t>;
        fn add(self, rhs: Self) -> Self {
            let t = self.tape();
            DualNum {
                v: self.v + rhs.v,
                d: self.map2(rhs, |a, b| a.add(b, t)),
            }
        }
    }

    impl<'t> std::ops::Sub for DualNum<'t> {
        type Output = DualNum<'t>;
        fn sub(self, rhs: Self) -> Self {
            let t = self.tape();
            DualNum {
                v: self.v - rhs.v,
                d: self.map2(rhs, |a, b| a.sub(b, t)),
            }
        }
    }

    impl<'t> std::ops::Mul for DualNum<'t> {
        type Output = DualNum<'t>;
        fn mul(self, rhs: Self) -> Self {
            let t = self.tape();
            DualNum {
                v: self.v * rhs.v,
                d: self.map2(rhs, |a, b| a.scale(rhs.v).add(b.scale(self.v), t)),
            }
        }
    }

    impl<'t> std::ops::Div for DualNum<'t> {
        type Output = DualNum<'t>;
        fn div(self, rhs: Self) -> Self {
            let t = self.tape();
            let q = self.v / rhs.v;
            let mut d = [Tangent::Zero; MAX_DIRS];
            for i in 0..MAX_DIRS {
                // (a' - q b') / b
                let num = self.d[i].sub(rhs.d[i].scale(q), t);
                d[i] = match num {
                    Tangent::Zero => Tangent::Zero,
                    other => {
                        let _g = t.raise_min_order(1);
                        Tangent::V(other.to_var(t) / rhs.v)
                    }
                };
            }
            DualNum { v: q, d }
        }
    }

    impl<'t> std::ops::Neg for DualNum<'t> {
        type Output = DualNum<'t>;
        fn neg(self) -> Self {
            let t = self.tape();
            let mut d = [Tangent::Zero; MAX_DIRS];
            for i in 0..MAX_DIRS {
                d[i] = self.d[i].scale_k(-1.0, t);
            }
            DualNum { v: -self.v, d }
        }
    }

    impl<'t> std::ops::Add<f64> for DualNum<'t> {
        type Output = DualNum<'t>;
        fn add(self, k: f64) -> Self {
            DualNum {
                v: self.v + k,
                d: self.d,
            }
        }
    }

    impl<'t> std::ops::Sub<f64> for DualNum<'t> {
        type Output = DualNum<'t>;
        fn sub(self, k: f64) -> Self {
            DualNum {
                v: self.v - k,
                d: self.d,
            }
        }
    }

    impl<'t> std::ops::Mul<f64> for DualNum<'t> {
        type Output = DualNum<'t>;
        fn mul(self, k: f64) -> Self {
            let t = self.tape();
            let mut d = [Tangent::Zero; MAX_DIRS];
            for i in 0..MAX_DIRS {
                d[i] = self.d[i].scale_k(k, t);
            }
            DualNum { v: self.v * k, d }
        }
    }

    /// Minimal scalar interface shared by `f64`, [`Var`], and [`DualNum`],
    /// so differential-equation residuals and constraint maps can be written
    /// once and exercised both on the tape and against plain-number oracles.
    pub trait Field:
        Copy
        + std::ops::Add<Output = Self>
        + std::ops::Sub<Output = Self>
        + std::ops::Mul<Output = Self>
        + std::ops::Neg<Output = Self>
        + std::ops::Add<f64, Output = Self>
        + std::ops::Sub<f64, Output = Self>
        + std::ops::Mul<f64, Output = Self>
    {
        fn exp(self) -> Self;
        fn powi(self, n: i32) -> Self;
        /// k - self
        fn rsub_from(self, k: f64) -> Self {
            -self + k
        }
    }

    impl Field for f64 {
        fn exp(self) -> f64 {
            f64::exp(self)
        }
        fn powi(self, n: i32) -> f64 {
            f64::powi(self, n)
        }
    }

    impl<'t> Field for Var<'t> {
        fn exp(self) -> Self {
            Var::exp(self)
        }
        fn powi(self, n: i32) -> Self {
            Var::powi(self, n)
        }
        fn rsub_from(self, k: f64) -> Self {
            self.rsub(k)
        }
    }

    impl<'t> Field for DualNum<'t> {
        fn exp(self) -> Self {
            let t = self.tape();
            let e = self.v.exp();
            let mut d = [Tangent::Zero; MAX_DIRS];
            for i in 0..MAX_DIRS {
                d[i] = self.d[i].scale(e);
            }
            let _ = t;
            DualNum { v: e, d }
        }

        fn powi(self, n: i32) -> Self {
            let p = self.v.powi(n);
            let any = self.d.iter().any(|t| !t.is_zero());
            let mut d = [Tangent::Zero; MAX_DIRS];
            if any {
                let f = {
                    let _g = self.tape().raise_min_order(1);
                    self.v.powi(n - 1) * f64::from(n)
                };
                for i in 0..MAX_DIRS {
                    d[i] = self.d[i].scale(f);
                }
            }
            DualNum { v: p, d }
        }
    }

}
