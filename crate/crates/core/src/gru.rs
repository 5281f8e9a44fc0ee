//! Gated recurrent unit: forward pass, analytic backward pass, two-layer
//! stacking strategies and closed-form parameter counts.
//!
//! With row vectors `x` (input) and `h` (previous state):
//!
//! ```text
//! r  = σ(x·W_r + h·U_r + b_r)
//! z  = σ(x·W_z + h·U_z + b_z)
//! h̃  = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! Stacks come in three shapes ([`StackKind`]):
//!
//! * `Single`: one cell, `h' = GRU(x, h)`.
//! * `Conventional`: layer 1 sees `(x, h₁)`, layer 2 sees `(h₁', h₂)`.
//! * `Feedback`: layer 1 sees `(x, h₂)`, i.e. the top layer's previous state
//!   replaces its own recurrence, and layer 2 sees `(h₁', 0)`. The second
//!   layer has no recurrent state, so its `U` matrices stay zero and are not
//!   counted as parameters.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{init_uniform, sigmoid, tanh, Matrix, Rng, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_r: Matrix,
    pub w_z: Matrix,
    pub w_h: Matrix,
    pub u_r: Matrix,
    pub u_z: Matrix,
    pub u_h: Matrix,
    pub b_r: Vector,
    pub b_z: Vector,
    pub b_h: Vector,
}

pub const GRU_TENSOR_NAMES: [&str; 9] = ["W_r", "W_z", "W_h", "U_r", "U_z", "U_h", "b_r", "b_z", "b_h"];

impl GruParams {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        GruParams {
            w_r: Matrix::zeros(d_in, hidden),
            w_z: Matrix::zeros(d_in, hidden),
            w_h: Matrix::zeros(d_in, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            u_z: Matrix::zeros(hidden, hidden),
            u_h: Matrix::zeros(hidden, hidden),
            b_r: Vector::zeros(hidden),
            b_z: Vector::zeros(hidden),
            b_h: Vector::zeros(hidden),
        }
    }

    /// Uniform `[-scale, scale]` weights and zero biases. When `recurrent` is
    /// false the `U` matrices are left at zero.
    pub fn random(rng: &mut Rng, d_in: usize, hidden: usize, scale: f64, recurrent: bool) -> Result<Self> {
        let mut p = GruParams::zeros(d_in, hidden);
        p.w_r = init_uniform(rng, d_in, hidden, scale)?;
        p.w_z = init_uniform(rng, d_in, hidden, scale)?;
        p.w_h = init_uniform(rng, d_in, hidden, scale)?;
        if recurrent {
            p.u_r = init_uniform(rng, hidden, hidden, scale)?;
            p.u_z = init_uniform(rng, hidden, hidden, scale)?;
            p.u_h = init_uniform(rng, hidden, hidden, scale)?;
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        GruParams::zeros(self.input_dim(), self.hidden_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_r.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (d, h) = (self.input_dim(), self.hidden_dim());
        for (name, m) in [("W_r", &self.w_r), ("W_z", &self.w_z), ("W_h", &self.w_h)] {
            if m.shape() != (d, h) {
                return Err(Error::shape(name, format!("{d}x{h}"), format!("{}x{}", m.rows(), m.cols())));
            }
        }
        for (name, m) in [("U_r", &self.u_r), ("U_z", &self.u_z), ("U_h", &self.u_h)] {
            if m.shape() != (h, h) {
                return Err(Error::shape(name, format!("{h}x{h}"), format!("{}x{}", m.rows(), m.cols())));
            }
        }
        for (name, b) in [("b_z", &self.b_z), ("b_h", &self.b_h)] {
            if b.len() != h {
                return Err(Error::shape(name, h, b.len()));
            }
        }
        Ok(())
    }

    /// Tensors in [`GRU_TENSOR_NAMES`] order as `(rows, cols, data)`.
    pub fn tensors(&self) -> [(usize, usize, &[f64]); 9] {
        let h = self.hidden_dim();
        [
            (self.w_r.rows(), self.w_r.cols(), self.w_r.as_slice()),
            (self.w_z.rows(), self.w_z.cols(), self.w_z.as_slice()),
            (self.w_h.rows(), self.w_h.cols(), self.w_h.as_slice()),
            (self.u_r.rows(), self.u_r.cols(), self.u_r.as_slice()),
            (self.u_z.rows(), self.u_z.cols(), self.u_z.as_slice()),
            (self.u_h.rows(), self.u_h.cols(), self.u_h.as_slice()),
            (1, h, self.b_r.as_slice()),
            (1, h, self.b_z.as_slice()),
            (1, h, self.b_h.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_r.as_mut_slice(),
            self.w_z.as_mut_slice(),
            self.w_h.as_mut_slice(),
            self.u_r.as_mut_slice(),
            self.u_z.as_mut_slice(),
            self.u_h.as_mut_slice(),
            self.b_r.as_mut_slice(),
            self.b_z.as_mut_slice(),
            self.b_h.as_mut_slice(),
        ]
    }

    /// Sum of squares of the weight matrices (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        [&self.w_r, &self.w_z, &self.w_h, &self.u_r, &self.u_z, &self.u_h]
            .iter()
            .map(|m| m.frobenius_sq())
            .sum()
    }
}

/// Values recorded by [`gru_forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub r: Vector,
    pub z: Vector,
    pub h_tilde: Vector,
    pub h: Vector,
}

fn affine3(x: &[f64], w: &Matrix, h: &[f64], u: &Matrix, b: &[f64]) -> Result<Vector> {
    let mut a = w.vecmat(x)?;
    a.add_assign(&u.vecmat(h)?);
    a.add_assign(b);
    Ok(a)
}

pub fn gru_forward(p: &GruParams, x: &[f64], h_prev: &[f64]) -> Result<(Vector, GruCache)> {
    if x.len() != p.input_dim() {
        return Err(Error::shape("gru_forward input", p.input_dim(), x.len()));
    }
    if h_prev.len() != p.hidden_dim() {
        return Err(Error::shape("gru_forward state", p.hidden_dim(), h_prev.len()));
    }
    let r = sigmoid(&affine3(x, &p.w_r, h_prev, &p.u_r, &p.b_r)?);
    let z = sigmoid(&affine3(x, &p.w_z, h_prev, &p.u_z, &p.b_z)?);
    let gated: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let h_tilde = tanh(&affine3(x, &p.w_h, &gated, &p.u_h, &p.b_h)?);
    let h: Vector = h_prev
        .iter()
        .zip(z.iter())
        .zip(h_tilde.iter())
        .map(|((hp, zt), ht)| (1.0 - zt) * hp + zt * ht)
        .collect();
    let cache = GruCache {
        x: x.into(),
        h_prev: h_prev.into(),
        r,
        z,
        h_tilde,
        h: h.clone(),
    };
    Ok((h, cache))
}

/// Accumulates parameter gradients into `grads` and returns `(dx, dh_prev)`
/// for upstream gradient `dh` on the cell output.
pub fn gru_backward_into(
    p: &GruParams,
    cache: &GruCache,
    dh: &[f64],
    grads: &mut GruParams,
) -> Result<(Vector, Vector)> {
    let hdim = p.hidden_dim();
    if dh.len() != hdim {
        return Err(Error::shape("gru_backward", hdim, dh.len()));
    }
    if cache.h_prev.len() != hdim || cache.x.len() != p.input_dim() {
        return Err(Error::shape("gru_backward cache", hdim, cache.h_prev.len()));
    }
    let GruCache { x, h_prev, r, z, h_tilde, .. } = cache;

    let mut dh_prev: Vector = dh.iter().zip(z.iter()).map(|(d, zt)| d * (1.0 - zt)).collect();

    // candidate
    let da_h: Vec<f64> = (0..hdim)
        .map(|i| dh[i] * z[i] * (1.0 - h_tilde[i] * h_tilde[i]))
        .collect();
    let gated: Vec<f64> = r.iter().zip(h_prev.iter()).map(|(a, b)| a * b).collect();
    grads.w_h.add_outer(x, &da_h)?;
    grads.u_h.add_outer(&gated, &da_h)?;
    grads.b_h.add_assign(&da_h);
    let mut dx = p.w_h.matvec(&da_h)?;
    let dgated = p.u_h.matvec(&da_h)?;
    for i in 0..hdim {
        dh_prev[i] += dgated[i] * r[i];
    }

    // update gate
    let da_z: Vec<f64> = (0..hdim)
        .map(|i| dh[i] * (h_tilde[i] - h_prev[i]) * z[i] * (1.0 - z[i]))
        .collect();
    grads.w_z.add_outer(x, &da_z)?;
    grads.u_z.add_outer(h_prev, &da_z)?;
    grads.b_z.add_assign(&da_z);
    dx.add_assign(&p.w_z.matvec(&da_z)?);
    dh_prev.add_assign(&p.u_z.matvec(&da_z)?);

    // reset gate
    let da_r: Vec<f64> = (0..hdim)
        .map(|i| dgated[i] * h_prev[i] * r[i] * (1.0 - r[i]))
        .collect();
    grads.w_r.add_outer(x, &da_r)?;
    grads.u_r.add_outer(h_prev, &da_r)?;
    grads.b_r.add_assign(&da_r);
    dx.add_assign(&p.w_r.matvec(&da_r)?);
    dh_prev.add_assign(&p.u_r.matvec(&da_r)?);

    Ok((dx, dh_prev))
}

pub fn gru_backward(p: &GruParams, cache: &GruCache, dh: &[f64]) -> Result<(GruParams, Vector, Vector)> {
    let mut grads = p.zeros_like();
    let (dx, dh_prev) = gru_backward_into(p, cache, dh, &mut grads)?;
    Ok((grads, dx, dh_prev))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StackKind {
    Single,
    Conventional,
    Feedback,
}

impl StackKind {
    pub fn layer_count(self) -> usize {
        match self {
            StackKind::Single => 1,
            StackKind::Conventional | StackKind::Feedback => 2,
        }
    }

    /// Whether layer `index` carries its own recurrent weights.
    pub fn layer_is_recurrent(self, index: usize) -> bool {
        !(self == StackKind::Feedback && index == 1)
    }

    pub fn code(self) -> u8 {
        match self {
            StackKind::Single => 0,
            StackKind::Conventional => 1,
            StackKind::Feedback => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(StackKind::Single),
            1 => Some(StackKind::Conventional),
            2 => Some(StackKind::Feedback),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StackKind::Single => "single",
            StackKind::Conventional => "conventional",
            StackKind::Feedback => "feedback",
        }
    }
}

impl fmt::Display for StackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(StackKind::Single),
            "conventional" => Ok(StackKind::Conventional),
            "feedback" => Ok(StackKind::Feedback),
            other => Err(Error::Config(format!("unknown stack kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackCache {
    pub layers: Vec<GruCache>,
}

fn check_stack(kind: StackKind, layers: &[GruParams], states: usize) -> Result<()> {
    if layers.len() != kind.layer_count() {
        return Err(Error::Config(format!(
            "{kind} stack needs {} layer(s), got {}",
            kind.layer_count(),
            layers.len()
        )));
    }
    if states != layers.len() {
        return Err(Error::Config(format!(
            "expected {} per-layer states, got {states}",
            layers.len()
        )));
    }
    Ok(())
}

/// One time step through the stack. `h_prev` holds each layer's state from
/// the previous step; the returned vector holds the new states, the last of
/// which is the stack output.
pub fn stack_forward(
    kind: StackKind,
    layers: &[GruParams],
    x: &[f64],
    h_prev: &[Vector],
) -> Result<(Vec<Vector>, StackCache)> {
    check_stack(kind, layers, h_prev.len())?;
    match kind {
        StackKind::Single => {
            let (h, c) = gru_forward(&layers[0], x, &h_prev[0])?;
            Ok((vec![h], StackCache { layers: vec![c] }))
        }
        StackKind::Conventional => {
            let (h1, c1) = gru_forward(&layers[0], x, &h_prev[0])?;
            let (h2, c2) = gru_forward(&layers[1], &h1, &h_prev[1])?;
            Ok((vec![h1, h2], StackCache { layers: vec![c1, c2] }))
        }
        StackKind::Feedback => {
            let (h1, c1) = gru_forward(&layers[0], x, &h_prev[1])?;
            let none = Vector::zeros(layers[1].hidden_dim());
            let (h2, c2) = gru_forward(&layers[1], &h1, &none)?;
            Ok((vec![h1, h2], StackCache { layers: vec![c1, c2] }))
        }
    }
}

/// Backward through one stack step. `dh_new[j]` is the total gradient
/// reaching layer `j`'s new state (from the output head and from the next
/// time step). Returns `(dx, dh_prev)` and accumulates into `grads`.
pub fn stack_backward_into(
    kind: StackKind,
    layers: &[GruParams],
    cache: &StackCache,
    dh_new: &[Vector],
    grads: &mut [GruParams],
) -> Result<(Vector, Vec<Vector>)> {
    check_stack(kind, layers, dh_new.len())?;
    if grads.len() != layers.len() || cache.layers.len() != layers.len() {
        return Err(Error::Config("gradient/cache layer count mismatch".into()));
    }
    match kind {
        StackKind::Single => {
            let (dx, dh) = gru_backward_into(&layers[0], &cache.layers[0], &dh_new[0], &mut grads[0])?;
            Ok((dx, vec![dh]))
        }
        StackKind::Conventional => {
            let (g0, g1) = grads.split_at_mut(1);
            let (dx2, dh2_prev) = gru_backward_into(&layers[1], &cache.layers[1], &dh_new[1], &mut g1[0])?;
            let dh1 = dh_new[0].add(&dx2)?;
            let (dx, dh1_prev) = gru_backward_into(&layers[0], &cache.layers[0], &dh1, &mut g0[0])?;
            Ok((dx, vec![dh1_prev, dh2_prev]))
        }
        StackKind::Feedback => {
            let (g0, g1) = grads.split_at_mut(1);
            let (dx2, _) = gru_backward_into(&layers[1], &cache.layers[1], &dh_new[1], &mut g1[0])?;
            let dh1 = dh_new[0].add(&dx2)?;
            let (dx, dh2_prev) = gru_backward_into(&layers[0], &cache.layers[0], &dh1, &mut g0[0])?;
            let dh1_prev = Vector::zeros(layers[0].hidden_dim());
            Ok((dx, vec![dh1_prev, dh2_prev]))
        }
    }
}

pub fn stack_backward(
    kind: StackKind,
    layers: &[GruParams],
    cache: &StackCache,
    dh_new: &[Vector],
) -> Result<(Vec<GruParams>, Vector, Vec<Vector>)> {
    let mut grads: Vec<GruParams> = layers.iter().map(GruParams::zeros_like).collect();
    let (dx, dh_prev) = stack_backward_into(kind, layers, cache, dh_new, &mut grads)?;
    Ok((grads, dx, dh_prev))
}

/// Builds randomly initialized layers for `kind` (layer 1 takes `d_in`,
/// layer 2 takes `hidden`).
pub fn init_stack(rng: &mut Rng, kind: StackKind, d_in: usize, hidden: usize, scale: f64) -> Result<Vec<GruParams>> {
    (0..kind.layer_count())
        .map(|j| {
            let d = if j == 0 { d_in } else { hidden };
            GruParams::random(rng, d, hidden, scale, kind.layer_is_recurrent(j))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Gru,
    Lstm,
}

impl Unit {
    /// Number of gated affine maps per cell.
    pub fn gates(self) -> usize {
        match self {
            Unit::Gru => 3,
            Unit::Lstm => 4,
        }
    }
}

/// Trainable parameter count of a recurrent stack. Each gate owns an input
/// matrix, a recurrent matrix (absent on a feedback stack's second layer) and
/// a bias.
pub fn param_count(unit: Unit, d_in: usize, hidden: usize, stack: StackKind) -> usize {
    let g = unit.gates();
    let cell = |d: usize, recurrent: bool| g * (d * hidden + if recurrent { hidden * hidden } else { 0 } + hidden);
    (0..stack.layer_count())
        .map(|j| {
            let d = if j == 0 { d_in } else { hidden };
            cell(d, stack.layer_is_recurrent(j))
        })
        .sum()
}

/// The plain tanh-RNN stacks that the GRU stacks generalize:
///
/// ```text
/// conventional: h_j(t) = tanh(h_{j-1}(t)·W_j + h_j(t-1)·U_j),  h_0(t) = x_t
/// feedback:     h_1(t) = tanh(x_t·W_1 + h_2(t-1)·U_21)
///               h_2(t) = tanh(h_1(t)·W_2)
/// ```
///
/// No biases, matching the bare recurrences. Used as a reference model in
/// property tests.
pub mod plain {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    pub struct PlainStack {
        pub kind: StackKind,
        pub w: Vec<Matrix>,
        pub u: Vec<Option<Matrix>>,
    }

    impl PlainStack {
        pub fn random(rng: &mut Rng, kind: StackKind, d_in: usize, hidden: usize, scale: f64) -> Result<Self> {
            let mut w = Vec::new();
            let mut u = Vec::new();
            for j in 0..kind.layer_count() {
                let d = if j == 0 { d_in } else { hidden };
                w.push(init_uniform(rng, d, hidden, scale)?);
                u.push(if kind.layer_is_recurrent(j) {
                    Some(init_uniform(rng, hidden, hidden, scale)?)
                } else {
                    None
                });
            }
            Ok(PlainStack { kind, w, u })
        }

        pub fn zeros(kind: StackKind, d_in: usize, hidden: usize) -> Self {
            PlainStack {
                kind,
                w: (0..kind.layer_count())
                    .map(|j| Matrix::zeros(if j == 0 { d_in } else { hidden }, hidden))
                    .collect(),
                u: (0..kind.layer_count())
                    .map(|j| kind.layer_is_recurrent(j).then(|| Matrix::zeros(hidden, hidden)))
                    .collect(),
            }
        }

        pub fn param_count(&self) -> usize {
            self.w.iter().map(|m| m.rows() * m.cols()).sum::<usize>()
                + self.u.iter().flatten().map(|m| m.rows() * m.cols()).sum::<usize>()
        }

        pub fn step(&self, x: &[f64], h_prev: &[Vector]) -> Result<Vec<Vector>> {
            if h_prev.len() != self.kind.layer_count() {
                return Err(Error::Config(format!(
                    "expected {} per-layer states, got {}",
                    self.kind.layer_count(),
                    h_prev.len()
                )));
            }
            let layer = |j: usize, input: &[f64], rec: Option<&[f64]>| -> Result<Vector> {
                let mut a = self.w[j].vecmat(input)?;
                if let (Some(u), Some(h)) = (&self.u[j], rec) {
                    a.add_assign(&u.vecmat(h)?);
                }
                Ok(tanh(&a))
            };
            match self.kind {
                StackKind::Single => Ok(vec![layer(0, x, Some(&h_prev[0]))?]),
                StackKind::Conventional => {
                    let h1 = layer(0, x, Some(&h_prev[0]))?;
                    let h2 = layer(1, &h1, Some(&h_prev[1]))?;
                    Ok(vec![h1, h2])
                }
                StackKind::Feedback => {
                    let h1 = layer(0, x, Some(&h_prev[1]))?;
                    let h2 = layer(1, &h1, None)?;
                    Ok(vec![h1, h2])
                }
            }
        }
    }
}
