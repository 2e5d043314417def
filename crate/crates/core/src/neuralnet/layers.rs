//! Layer definitions. Every layer owns a name prefix; its parameters live in
//! a [`ParamSet`] under `"<prefix>.<symbol>"` and are looked up in a [`Bound`]
//! at forward time. Row-vector convention: a batch is `[B × features]` and a
//! dense map is `x·W` with `W` stored `[in × out]`.

use std::sync::Arc;

use rand::Rng;

use super::{Bound, ParamSet, Tape, Var};
use crate::error::{Error, Result};

fn name(prefix: &str, sym: &str) -> String {
    format!("{prefix}.{sym}")
}

/// `x·W + b`
#[derive(Clone, Debug)]
pub struct Dense {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Dense {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        params.init_uniform(name(&self.prefix, "W"), [self.input, self.output], self.input, rng);
        params.init_zeros(name(&self.prefix, "b"), [self.output]);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&name(&self.prefix, "W"))?;
        let b = p.var(&name(&self.prefix, "b"))?;
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

/// Elman cell: `h' = tanh(x·W_xh + h·W_hh + b_h)`.
#[derive(Clone, Debug)]
pub struct RnnCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl RnnCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        RnnCell {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        let (i, h) = (self.input, self.hidden);
        params.init_uniform(name(&self.prefix, "W_xh"), [i, h], i, rng);
        params.init_uniform(name(&self.prefix, "W_hh"), [h, h], h, rng);
        params.init_zeros(name(&self.prefix, "b_h"), [h]);
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let wx = p.var(&name(&self.prefix, "W_xh"))?;
        let wh = p.var(&name(&self.prefix, "W_hh"))?;
        let b = p.var(&name(&self.prefix, "b_h"))?;
        let a = tape.matmul(x, wx)?;
        let c = tape.matmul(h, wh)?;
        let s = tape.add(a, c)?;
        let s = tape.add_bias(s, b)?;
        Ok(tape.tanh(s))
    }
}

/// Gated recurrent unit with update gate `z`, reset gate `r`:
///
/// ```text
/// z  = σ(x·W_z + h·U_z + b_z)
/// r  = σ(x·W_r + h·U_r + b_r)
/// h̃  = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        GruCell {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        let (i, h) = (self.input, self.hidden);
        for g in ["z", "r", "h"] {
            params.init_uniform(name(&self.prefix, &format!("W_{g}")), [i, h], i, rng);
            params.init_uniform(name(&self.prefix, &format!("U_{g}")), [h, h], h, rng);
            params.init_zeros(name(&self.prefix, &format!("b_{g}")), [h]);
        }
    }

    fn gate_pre(&self, tape: &mut Tape, p: &Bound, g: &str, x: Var, h: Var) -> Result<Var> {
        let w = p.var(&name(&self.prefix, &format!("W_{g}")))?;
        let u = p.var(&name(&self.prefix, &format!("U_{g}")))?;
        let b = p.var(&name(&self.prefix, &format!("b_{g}")))?;
        let a = tape.matmul(x, w)?;
        let c = tape.matmul(h, u)?;
        let s = tape.add(a, c)?;
        tape.add_bias(s, b)
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let zp = self.gate_pre(tape, p, "z", x, h)?;
        let z = tape.sigmoid(zp);
        let rp = self.gate_pre(tape, p, "r", x, h)?;
        let r = tape.sigmoid(rp);
        let rh = tape.mul(r, h)?;
        let cand = self.gate_pre(tape, p, "h", x, rh)?;
        let cand = tape.tanh(cand);
        update(tape, z, h, cand)
    }
}

/// `(1 − z) ⊙ h + z ⊙ h̃`
fn update(tape: &mut Tape, z: Var, h: Var, cand: Var) -> Result<Var> {
    let keep = tape.one_minus(z);
    let a = tape.mul(keep, h)?;
    let b = tape.mul(z, cand)?;
    tape.add(a, b)
}

/// Graph convolution `X' = ReLU(Â·X·W)` applied to a batch of graphs stacked
/// as `[blocks·n × f]`, where `Â` is the `n×n` normalized adjacency.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl GcnLayer {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        GcnLayer {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        params.init_uniform(name(&self.prefix, "W"), [self.input, self.output], self.input, rng);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, adj: &Arc<super::Tensor>, x: Var) -> Result<Var> {
        let w = p.var(&name(&self.prefix, "W"))?;
        let xw = tape.matmul(x, w)?;
        let ax = tape.propagate(Arc::clone(adj), xw)?;
        Ok(tape.relu(ax))
    }
}

/// Edge lists of attention neighborhoods in CSR form. Segment `i` spans
/// `offsets[i]..offsets[i+1]`; `owner[e] = i` and `nbr[e]` is the neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhoods {
    pub n: usize,
    pub owner: Arc<[usize]>,
    pub nbr: Arc<[usize]>,
    pub offsets: Arc<[usize]>,
}

impl Neighborhoods {
    /// Builds neighborhoods from adjacency lists, adding each node itself.
    pub fn with_self_loops(lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        let mut owner = Vec::new();
        let mut nbr = Vec::new();
        let mut offsets = vec![0];
        for (i, l) in lists.iter().enumerate() {
            let mut members: Vec<usize> = l.iter().copied().filter(|&j| j != i).collect();
            members.push(i);
            members.sort_unstable();
            members.dedup();
            if let Some(&bad) = members.iter().find(|&&j| j >= n) {
                return Err(Error::InvalidArgument(format!("neighbor {bad} of node {i} out of range {n}")));
            }
            for j in members {
                owner.push(i);
                nbr.push(j);
            }
            offsets.push(nbr.len());
        }
        Ok(Neighborhoods {
            n,
            owner: owner.into(),
            nbr: nbr.into(),
            offsets: offsets.into(),
        })
    }

    pub fn n_edges(&self) -> usize {
        self.nbr.len()
    }

    /// The same neighborhoods repeated over `blocks` stacked graphs.
    pub fn tiled(&self, blocks: usize) -> Self {
        let e = self.n_edges();
        let mut owner = Vec::with_capacity(e * blocks);
        let mut nbr = Vec::with_capacity(e * blocks);
        let mut offsets = Vec::with_capacity(self.n * blocks + 1);
        offsets.push(0);
        for b in 0..blocks {
            let shift = b * self.n;
            owner.extend(self.owner.iter().map(|&i| i + shift));
            nbr.extend(self.nbr.iter().map(|&j| j + shift));
            offsets.extend(self.offsets[1..].iter().map(|&o| o + b * e));
        }
        Neighborhoods {
            n: self.n * blocks,
            owner: owner.into(),
            nbr: nbr.into(),
            offsets: offsets.into(),
        }
    }
}

/// Single-head graph attention:
///
/// ```text
/// e_ij = LeakyReLU(aᵀ[W x_i ‖ W x_j]),  α_ij = softmax_{j∈N(i)} e_ij
/// x̂_i  = ReLU(Σ_j α_ij W x_j)
/// ```
///
/// `W` is stored `[in × out]` and `a` as `[2·out × 1]` (first half pairs with
/// `x_i`, second with `x_j`).
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl GatLayer {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        GatLayer {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        params.init_uniform(name(&self.prefix, "W"), [self.input, self.output], self.input, rng);
        params.init_uniform(name(&self.prefix, "a"), [2 * self.output, 1], 2 * self.output, rng);
    }

    /// Returns `(x̂, α)` where `α` is `[edges × 1]` in neighborhood order.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        nb: &Neighborhoods,
        x: Var,
    ) -> Result<(Var, Var)> {
        let w = p.var(&name(&self.prefix, "W"))?;
        let a = p.var(&name(&self.prefix, "a"))?;
        if tape.shape(x).first() != Some(&nb.n) {
            return Err(Error::shape("gat_layer", tape.shape(x), &[nb.n, self.input]));
        }
        let h = tape.matmul(x, w)?;
        let a_self = tape.slice(a, 0, 0, self.output)?;
        let a_nbr = tape.slice(a, 0, self.output, self.output)?;
        let s_self = tape.matmul(h, a_self)?;
        let s_nbr = tape.matmul(h, a_nbr)?;
        let e_self = tape.gather_rows(s_self, Arc::clone(&nb.owner))?;
        let e_nbr = tape.gather_rows(s_nbr, Arc::clone(&nb.nbr))?;
        let e = tape.add(e_self, e_nbr)?;
        let e = tape.leaky_relu(e, LEAKY_SLOPE);
        let alpha = tape.segment_softmax(e, Arc::clone(&nb.offsets))?;
        let agg = tape.edge_weighted_sum(alpha, h, Arc::clone(&nb.nbr), Arc::clone(&nb.offsets))?;
        Ok((tape.relu(agg), alpha))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, nb: &Neighborhoods, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, p, nb, x)?.0)
    }
}

/// Convolutional GRU over `[B × C × rows × cols]` maps with square odd kernels:
///
/// ```text
/// Z  = σ(Conv_z(X) + Conv_hz(H))
/// R  = σ(Conv_r(X) + Conv_hr(H))
/// H̃  = tanh(Conv_h(X) + Conv_hh(R ⊙ H))
/// H' = (1 − Z) ⊙ H + Z ⊙ H̃
/// ```
#[derive(Clone, Debug)]
pub struct ConvGruCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl ConvGruCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, kernel: usize) -> Self {
        ConvGruCell {
            prefix: prefix.into(),
            input,
            hidden,
            kernel,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        let (i, h, k) = (self.input, self.hidden, self.kernel);
        for g in ["z", "r", "h"] {
            params.init_uniform(name(&self.prefix, &format!("Conv_{g}")), [h, i, k, k], i * k * k, rng);
            params.init_uniform(name(&self.prefix, &format!("Conv_h{g}")), [h, h, k, k], h * k * k, rng);
        }
    }

    fn gate_pre(&self, tape: &mut Tape, p: &Bound, g: &str, x: Var, h: Var) -> Result<Var> {
        let kx = p.var(&name(&self.prefix, &format!("Conv_{g}")))?;
        let kh = p.var(&name(&self.prefix, &format!("Conv_h{g}")))?;
        let a = tape.conv2d(x, kx)?;
        let c = tape.conv2d(h, kh)?;
        tape.add(a, c)
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let zp = self.gate_pre(tape, p, "z", x, h)?;
        let z = tape.sigmoid(zp);
        let rp = self.gate_pre(tape, p, "r", x, h)?;
        let r = tape.sigmoid(rp);
        let rh = tape.mul(r, h)?;
        let cand = self.gate_pre(tape, p, "h", x, rh)?;
        let cand = tape.tanh(cand);
        update(tape, z, h, cand)
    }
}
