//! Fully connected networks: shared bodies and per-family-member heads.
//!
//! An [`Mlp`] owns its parameters as flat `f64` buffers (weights row-major,
//! one weight matrix and bias vector per layer). To differentiate, the
//! parameters are *lifted* onto a [`Tape`] once per step; forward passes then
//! record fused affine nodes over the contiguous id ranges the lift produced.
//! [`LiftedMlp::forward_dual`] additionally pushes tangent expressions for up
//! to [`MAX_DIRS`] input directions, which is how solution derivatives with
//! respect to sampling coordinates are obtained.
//!
//! Plain `f64` twins ([`Mlp::forward_f64`], [`Mlp::forward_dual_f64`]) run
//! the identical arithmetic without recording, for evaluation and for
//! frozen-body passes where no parameter gradient is needed.
//!
//! Initialization is Glorot-uniform with zero biases from a counter-based
//! seeded stream, so a spec plus a seed pins every parameter bitwise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::dual::{DualNum, Tangent, MAX_DIRS};
use crate::autodiff::{AdError, Tape, Var};

/// Hidden / output nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

/// Architecture description: `input_dim -> hidden[0] -> ... -> output_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// When true (the usual case) the last affine layer has no activation.
    pub final_linear: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Tanh,
            final_linear: true,
        }
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }

    /// Total parameter count: sum over consecutive widths of
    /// `w_i * w_{i+1} + w_{i+1}`.
    pub fn param_count(&self) -> usize {
        self.widths()
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.input_dim == 0 {
            return Err("input_dim must be at least 1".into());
        }
        if self.output_dim == 0 {
            return Err("output_dim must be at least 1".into());
        }
        if let Some(i) = self.hidden.iter().position(|&h| h == 0) {
            return Err(format!("hidden layer {i} has width 0"));
        }
        Ok(())
    }
}

struct Layer {
    /// Row-major `[rows][cols]`.
    w: Vec<f64>,
    b: Vec<f64>,
    rows: usize,
    cols: usize,
}

/// A multi-layer perceptron with owned parameters.
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. Layers are drawn in order,
    /// weights row-major, from a ChaCha stream seeded with `seed`; the same
    /// spec and seed reproduce identical parameters bitwise.
    pub fn init(spec: MlpSpec, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .map(|p| {
                let (cols, rows) = (p[0], p[1]);
                let limit = (6.0 / (cols + rows) as f64).sqrt();
                let w = (0..rows * cols)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect();
                Layer {
                    w,
                    b: vec![0.0; rows],
                    rows,
                    cols,
                }
            })
            .collect();
        Mlp { spec, layers }
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// `(name, len)` pairs in flat-parameter order:
    /// `layer0.weight, layer0.bias, layer1.weight, ...`.
    pub fn param_layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.rows * l.cols));
            out.push((format!("layer{i}.bias"), l.rows));
        }
        out
    }

    /// All parameters concatenated in layout order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Overwrites all parameters from a flat buffer in layout order.
    /// Panics if the length does not match the spec.
    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter length mismatch");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.rows * l.cols;
            l.w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            l.b.copy_from_slice(&flat[off..off + l.rows]);
            off += l.rows;
        }
    }

    fn act_f64(&self, z: f64) -> f64 {
        match self.spec.activation {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn act_prime_f64(&self, z: f64) -> f64 {
        match self.spec.activation {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    /// Forward pass on plain numbers.
    pub fn forward_f64(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.spec.input_dim, "input dimension mismatch");
        let n_layers = self.layers.len();
        let mut cur = x.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let last = li + 1 == n_layers;
            let mut next = Vec::with_capacity(l.rows);
            for j in 0..l.rows {
                let row = &l.w[j * l.cols..(j + 1) * l.cols];
                let mut z = l.b[j];
                for (wi, xi) in row.iter().zip(&cur) {
                    z += wi * xi;
                }
                next.push(if last && self.spec.final_linear {
                    z
                } else {
                    self.act_f64(z)
                });
            }
            cur = next;
        }
        cur
    }

    /// Forward pass with `k` forward-mode tangent directions on plain
    /// numbers. `seeds[m]` is the input tangent vector for direction `m`.
    /// Returns `(outputs, tangents)` with `tangents[m][j] = d out_j / d dir_m`.
    pub fn forward_dual_f64(&self, x: &[f64], seeds: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        assert_eq!(x.len(), self.spec.input_dim, "input dimension mismatch");
        for s in seeds {
            assert_eq!(s.len(), x.len(), "seed dimension mismatch");
        }
        let k = seeds.len();
        let n_layers = self.layers.len();
        let mut cur = x.to_vec();
        let mut curd: Vec<Vec<f64>> = seeds.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let last = li + 1 == n_layers;
            let linear = last && self.spec.final_linear;
            let mut next = Vec::with_capacity(l.rows);
            let mut nextd = vec![Vec::with_capacity(l.rows); k];
            for j in 0..l.rows {
                let row = &l.w[j * l.cols..(j + 1) * l.cols];
                let mut z = l.b[j];
                for (wi, xi) in row.iter().zip(&cur) {
                    z += wi * xi;
                }
                let (h, p) = if linear {
                    (z, 1.0)
                } else {
                    (self.act_f64(z), self.act_prime_f64(z))
                };
                next.push(h);
                for m in 0..k {
                    let mut zd = 0.0;
                    for (wi, xdi) in row.iter().zip(&curd[m]) {
                        zd += wi * xdi;
                    }
                    nextd[m].push(p * zd);
                }
            }
            cur = next;
            curd = nextd;
        }
        (cur, curd)
    }

    /// Places all parameters on the tape as leaves (each layer's weights and
    /// biases in contiguous id ranges) and returns a handle for recording
    /// forward passes.
    pub fn lift<'t>(&self, tape: &'t Tape) -> Result<LiftedMlp<'t>, AdError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.lift_slice(&l.w)?;
            let b = tape.lift_slice(&l.b)?;
            layers.push(LiftedLayer {
                w0: w[0].id(),
                b0: b[0].id(),
                rows: l.rows as u32,
                cols: l.cols as u32,
            });
        }
        Ok(LiftedMlp {
            tape,
            layers,
            activation: self.spec.activation,
            final_linear: self.spec.final_linear,
        })
    }
}

struct LiftedLayer {
    w0: u32,
    b0: u32,
    rows: u32,
    cols: u32,
}

/// Tape-resident view of an [`Mlp`]'s parameters.
pub struct LiftedMlp<'t> {
    tape: &'t Tape,
    layers: Vec<LiftedLayer>,
    activation: Activation,
    final_linear: bool,
}

/// Tangent column state per direction while sweeping layers: once past the
/// first layer every unit's tangent is a node and the ids are contiguous,
/// which allows fused dot products against contiguous weight rows.
enum TanCol<'t> {
    Dense { start: u32, len: u32 },
    General(Vec<Tangent<'t>>),
}

impl<'t> LiftedMlp<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// All parameter nodes in flat layout order (for gradient gathering).
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for l in &self.layers {
            for i in 0..l.rows * l.cols {
                out.push(self.tape.var_at(l.w0 + i));
            }
            for i in 0..l.rows {
                out.push(self.tape.var_at(l.b0 + i));
            }
        }
        out
    }

    fn act(&self, z: Var<'t>) -> Var<'t> {
        match self.activation {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z.silu(),
        }
    }

    /// Activation derivative as tape nodes, given pre- and post-activation.
    fn act_prime(&self, z: Var<'t>, h: Var<'t>) -> Var<'t> {
        match self.activation {
            Activation::Tanh => (h * h).rsub(1.0),
            Activation::Silu => {
                let s = z.sigmoid();
                s * (z * s.rsub(1.0) + 1.0)
            }
        }
    }

    /// Forward pass without tangents.
    pub fn forward(&self, x: &[Var<'t>]) -> Vec<Var<'t>> {
        self.forward_dual(
            &x.iter().map(|&v| DualNum::plain(v)).collect::<Vec<_>>(),
            0,
        )
        .into_iter()
        .map(|d| d.v)
        .collect()
    }

    /// Forward pass carrying `k` tangent directions from the inputs.
    ///
    /// Tangent nodes are recorded at derivative order >= 1; each returned
    /// output bundles its value node with per-direction tangent nodes.
    pub fn forward_dual(&self, x: &[DualNum<'t>], k: usize) -> Vec<DualNum<'t>> {
        assert!(k <= MAX_DIRS, "at most {MAX_DIRS} tangent directions");
        assert_eq!(
            x.len(),
            self.layers.first().map(|l| l.cols as usize).unwrap_or(0),
            "input dimension mismatch"
        );
        let tape = self.tape;
        let n_layers = self.layers.len();

        // Current activations: contiguous range when possible.
        let mut cur: Vec<Var<'t>> = x.iter().map(|d| d.v).collect();
        let mut cols: Vec<TanCol<'t>> = (0..k)
            .map(|m| TanCol::General(x.iter().map(|d| d.d[m]).collect()))
            .collect();

        for (li, l) in self.layers.iter().enumerate() {
            let last = li + 1 == n_layers;
            let linear = last && self.final_linear;
            let m = l.cols as usize;
            let rows = l.rows as usize;

            let cur_start = contiguous_start(&cur);

            // Pre-activations, pushed back-to-back.
            let mut zs = Vec::with_capacity(rows);
            for j in 0..rows {
                let wrow = l.w0 + (j as u32) * l.cols;
                let z = match cur_start {
                    Some(x0) => tape.dot_range(wrow, x0, l.cols, Some(l.b0 + j as u32)),
                    None => {
                        let pairs: Vec<(Var, Var)> = (0..m)
                            .map(|i| (tape.var_at(wrow + i as u32), cur[i]))
                            .collect();
                        tape.dot_pairs(&pairs) + tape.var_at(l.b0 + j as u32)
                    }
                };
                zs.push(z);
            }

            // Activations (contiguous) and, if tangents flow, primes.
            let hs: Vec<Var<'t>> = if linear {
                zs.clone()
            } else {
                zs.iter().map(|&z| self.act(z)).collect()
            };
            let primes: Option<Vec<Var<'t>>> = if linear || k == 0 {
                None
            } else {
                Some(
                    zs.iter()
                        .zip(&hs)
                        .map(|(&z, &h)| self.act_prime(z, h))
                        .collect(),
                )
            };

            // Tangent columns, one contiguous block per direction.
            let mut new_cols = Vec::with_capacity(k);
            for col in cols.iter() {
                let _guard = tape.raise_min_order(1);
                let zdots: Vec<Tangent<'t>> = match col {
                    TanCol::Dense { start, len } => {
                        debug_assert_eq!(*len, l.cols);
                        (0..rows)
                            .map(|j| {
                                let wrow = l.w0 + (j as u32) * l.cols;
                                Tangent::V(tape.dot_range(wrow, *start, l.cols, None))
                            })
                            .collect()
                    }
                    TanCol::General(tv) => (0..rows)
                        .map(|j| {
                            let wrow = l.w0 + (j as u32) * l.cols;
                            let mut pairs: Vec<(Var, Var)> = Vec::new();
                            let mut singles: Vec<Var> = Vec::new();
                            for (i, t) in tv.iter().enumerate() {
                                match t {
                                    Tangent::Zero => {}
                                    Tangent::One => singles.push(tape.var_at(wrow + i as u32)),
                                    Tangent::V(v) => {
                                        pairs.push((tape.var_at(wrow + i as u32), *v))
                                    }
                                }
                            }
                            match (pairs.is_empty(), singles.len()) {
                                (true, 0) => Tangent::Zero,
                                (true, 1) => Tangent::V(singles[0]),
                                (true, _) => Tangent::V(tape.sum(&singles)),
                                (false, 0) => Tangent::V(tape.dot_pairs(&pairs)),
                                (false, _) => {
                                    Tangent::V(tape.dot_pairs(&pairs) + tape.sum(&singles))
                                }
                            }
                        })
                        .collect(),
                };
                // Through the activation: hdot = prime * zdot, pushed
                // back-to-back so the next layer sees a dense column.
                let new_col = match &primes {
                    Some(ps) => {
                        let hdots: Vec<Var<'t>> = zdots
                            .iter()
                            .zip(ps)
                            .map(|(t, &p)| match t {
                                Tangent::Zero => tape.constant(0.0),
                                Tangent::One => p * 1.0,
                                Tangent::V(v) => p * *v,
                            })
                            .collect();
                        dense_or_general(hdots)
                    }
                    None => {
                        // Linear output layer: tangent is the plain dot.
                        let all_v: Option<Vec<Var<'t>>> = zdots
                            .iter()
                            .map(|t| match t {
                                Tangent::V(v) => Some(*v),
                                _ => None,
                            })
                            .collect();
                        match all_v {
                            Some(vs) if !vs.is_empty() => dense_or_general(vs),
                            _ => TanCol::General(zdots),
                        }
                    }
                };
                new_cols.push(new_col);
            }

            cur = hs;
            cols = new_cols;
        }

        // Bundle the outputs. Any tangent that is still a raw order-0 node
        // (possible only for a degenerate single-linear-layer net) is passed
        // through a scaling node so the order guard keeps counting.
        (0..cur.len())
            .map(|j| {
                let mut d = [Tangent::Zero; MAX_DIRS];
                for (mi, col) in cols.iter().enumerate() {
                    let t = match col {
                        TanCol::Dense { start, .. } => {
                            Tangent::V(tape.var_at(start + j as u32))
                        }
                        TanCol::General(tv) => tv[j],
                    };
                    d[mi] = match t {
                        Tangent::V(v) if tape.order_of_id(v.id()) == 0 => {
                            let _g = tape.raise_min_order(1);
                            Tangent::V(v * 1.0)
                        }
                        other => other,
                    };
                }
                DualNum { v: cur[j], d }
            })
            .collect()
    }
}

fn contiguous_start(vs: &[Var<'_>]) -> Option<u32> {
    if vs.is_empty() {
        return None;
    }
    let start = vs[0].id();
    for (i, v) in vs.iter().enumerate() {
        if v.id() != start + i as u32 {
            return None;
        }
    }
    Some(start)
}

fn dense_or_general(vs: Vec<Var<'_>>) -> TanCol<'_> {
    match contiguous_start(&vs) {
        Some(start) => TanCol::Dense {
            start,
            len: vs.len() as u32,
        },
        None => TanCol::General(vs.into_iter().map(Tangent::V).collect()),
    }
}

/// A set of shared bodies plus one head per body per family member.
/// `heads[b][a]` maps body `b`'s latent output through member `a`'s head.
pub struct MultiHeadModel {
    pub bodies: Vec<Mlp>,
    pub heads: Vec<Vec<Mlp>>,
}

impl MultiHeadModel {
    /// Initializes every network from one seeded stream: bodies first, then
    /// heads grouped by body. Head input dims must match body latent dims.
    pub fn init(body_specs: &[MlpSpec], head_specs: &[MlpSpec], n_members: usize, seed: u64) -> Self {
        assert_eq!(body_specs.len(), head_specs.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next_seed = || rng.gen::<u64>();
        let bodies: Vec<Mlp> = body_specs
            .iter()
            .map(|s| Mlp::init(s.clone(), next_seed()))
            .collect();
        let heads: Vec<Vec<Mlp>> = head_specs
            .iter()
            .enumerate()
            .map(|(b, hs)| {
                assert_eq!(
                    hs.input_dim, body_specs[b].output_dim,
                    "head input must match body latent dimension"
                );
                (0..n_members).map(|_| Mlp::init(hs.clone(), next_seed())).collect()
            })
            .collect();
        MultiHeadModel { bodies, heads }
    }

    pub fn n_bodies(&self) -> usize {
        self.bodies.len()
    }

    pub fn n_members(&self) -> usize {
        self.heads.first().map(|h| h.len()).unwrap_or(0)
    }
}
