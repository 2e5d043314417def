//! Forward passes of the neural forecasters over batches of samples. All
//! outputs are in normalized target units.

use std::sync::Arc;

use rand::Rng;

use super::ModelKind;
use crate::error::{Error, Result};
use crate::neuralnet::{ConvGruCell, Dense, GatLayer, GcnLayer, GruCell, Neighborhoods, ParamSet, RnnCell, Tape, Tensor, Var};
use crate::neuralnet::Bound;
use crate::represent::{GraphSample, GridSample, SeriesSample};

#[derive(Clone, Debug)]
enum Recurrent {
    Rnn(RnnCell),
    Gru(GruCell),
}

impl Recurrent {
    fn new(gru: bool, prefix: String, input: usize, hidden: usize) -> Self {
        if gru {
            Recurrent::Gru(GruCell::new(prefix, input, hidden))
        } else {
            Recurrent::Rnn(RnnCell::new(prefix, input, hidden))
        }
    }

    fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        match self {
            Recurrent::Rnn(c) => c.init(ps, rng),
            Recurrent::Gru(c) => c.init(ps, rng),
        }
    }

    fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        match self {
            Recurrent::Rnn(c) => c.step(tape, p, x, h),
            Recurrent::Gru(c) => c.step(tape, p, x, h),
        }
    }
}

/// Static shape of a network, enough to rebuild it from a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub n_features: usize,
    pub static_dim: usize,
    pub window: usize,
    pub horizon: usize,
}

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, &[got], &[want]));
    }
    Ok(())
}

/// Stacked RNN/GRU encoder with a dense multi-horizon head.
#[derive(Clone, Debug)]
pub struct SeriesNet {
    shape: NetShape,
    cells: Vec<Recurrent>,
    head: Dense,
}

impl SeriesNet {
    pub fn new(shape: NetShape) -> Self {
        let gru = shape.kind != ModelKind::Rnn;
        let cells = (0..shape.layers)
            .map(|l| {
                let input = if l == 0 { shape.n_features } else { shape.hidden };
                Recurrent::new(gru, format!("rec{l}"), input, shape.hidden)
            })
            .collect();
        let head = Dense::new("head", shape.hidden + shape.static_dim, 2 * shape.horizon);
        SeriesNet { shape, cells, head }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        self.cells.iter().for_each(|c| c.init(ps, rng));
        self.head.init(ps, rng);
    }

    /// `[B × 2H]`, row `b` laid out like the sample target (`h*2 + pollutant`).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &[&SeriesSample]) -> Result<Var> {
        let NetShape { n_features: f, window: w, hidden, static_dim, .. } = self.shape;
        let b = batch.len();
        for s in batch {
            check_len("series input (window × features)", s.input.len(), w * f)?;
            check_len("series static features", s.static_features.len(), static_dim)?;
        }
        let mut hs: Vec<Var> = (0..self.cells.len())
            .map(|_| tape.constant(Tensor::zeros([b, hidden])))
            .collect();
        for t in 0..w {
            let mut x_t = Vec::with_capacity(b * f);
            for s in batch {
                x_t.extend_from_slice(&s.input[t * f..(t + 1) * f]);
            }
            let mut x = tape.constant(Tensor::new([b, f], x_t)?);
            for (cell, h) in self.cells.iter().zip(hs.iter_mut()) {
                *h = cell.step(tape, p, x, *h)?;
                x = *h;
            }
        }
        let mut last = *hs.last().ok_or_else(|| Error::InvalidArgument("series model needs a layer".into()))?;
        if static_dim > 0 {
            let st: Vec<f64> = batch.iter().flat_map(|s| s.static_features.iter().copied()).collect();
            let st = tape.constant(Tensor::new([b, static_dim], st)?);
            last = tape.concat(&[last, st], 1)?;
        }
        self.head.forward(tape, p, last)
    }
}

/// Graph inputs shared by every sample of a batch.
#[derive(Clone, Debug)]
pub struct GraphCtx {
    pub n: usize,
    pub norm_adj: Arc<Tensor>,
    pub neighborhoods: Neighborhoods,
}

#[derive(Clone, Debug)]
enum GraphLayer {
    Gcn(GcnLayer),
    Gat(GatLayer),
}

/// Per-bin graph layers (shared over time) feeding one GRU, dense head per node.
#[derive(Clone, Debug)]
pub struct GraphNet {
    shape: NetShape,
    layers: Vec<GraphLayer>,
    gru: GruCell,
    head: Dense,
}

impl GraphNet {
    pub fn new(shape: NetShape) -> Self {
        let layers = (0..shape.layers)
            .map(|l| {
                let input = if l == 0 { shape.n_features } else { shape.hidden };
                match shape.kind {
                    ModelKind::GatGru => GraphLayer::Gat(GatLayer::new(format!("gat{l}"), input, shape.hidden)),
                    _ => GraphLayer::Gcn(GcnLayer::new(format!("gcn{l}"), input, shape.hidden)),
                }
            })
            .collect();
        let gru_in = if shape.layers == 0 { shape.n_features } else { shape.hidden };
        GraphNet {
            shape,
            layers,
            // same names as a one-layer series GRU, so layers = 0 reduces to it
            gru: GruCell::new("rec0", gru_in, shape.hidden),
            head: Dense::new("head", shape.hidden + shape.static_dim, 2 * shape.horizon),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        for l in &self.layers {
            match l {
                GraphLayer::Gcn(g) => g.init(ps, rng),
                GraphLayer::Gat(g) => g.init(ps, rng),
            }
        }
        self.gru.init(ps, rng);
        self.head.init(ps, rng);
    }

    /// `[B·N × 2H]`: sample-major, then node, then `h*2 + pollutant`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, ctx: &GraphCtx, batch: &[&GraphSample]) -> Result<Var> {
        let NetShape { n_features: f, window: w, hidden, static_dim, .. } = self.shape;
        let n = ctx.n;
        let b = batch.len();
        for s in batch {
            check_len("graph input (window × nodes × features)", s.input.len(), w * n * f)?;
            check_len("graph static features", s.static_features.len(), n * static_dim)?;
        }
        let nb = if b == 1 {
            ctx.neighborhoods.clone()
        } else {
            ctx.neighborhoods.tiled(b)
        };
        let mut h = tape.constant(Tensor::zeros([b * n, hidden]));
        for t in 0..w {
            let mut x_t = Vec::with_capacity(b * n * f);
            for s in batch {
                x_t.extend_from_slice(&s.input[t * n * f..(t + 1) * n * f]);
            }
            let mut x = tape.constant(Tensor::new([b * n, f], x_t)?);
            for l in &self.layers {
                x = match l {
                    GraphLayer::Gcn(g) => g.forward(tape, p, &ctx.norm_adj, x)?,
                    GraphLayer::Gat(g) => g.forward(tape, p, &nb, x)?,
                };
            }
            h = self.gru.step(tape, p, x, h)?;
        }
        if static_dim > 0 {
            let st: Vec<f64> = batch.iter().flat_map(|s| s.static_features.iter().copied()).collect();
            let st = tape.constant(Tensor::new([b * n, static_dim], st)?);
            h = tape.concat(&[h, st], 1)?;
        }
        self.head.forward(tape, p, h)
    }
}

/// Stacked ConvGRU with a 1×1 convolution head.
#[derive(Clone, Debug)]
pub struct GridNet {
    shape: NetShape,
    cells: Vec<ConvGruCell>,
}

impl GridNet {
    pub fn new(shape: NetShape) -> Self {
        let cells = (0..shape.layers)
            .map(|l| {
                let input = if l == 0 { shape.n_features } else { shape.hidden };
                ConvGruCell::new(format!("cgru{l}"), input, shape.hidden, shape.kernel)
            })
            .collect();
        GridNet { shape, cells }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        self.cells.iter().for_each(|c| c.init(ps, rng));
        let (c_in, c_out) = (self.shape.hidden + self.shape.static_dim, 2 * self.shape.horizon);
        ps.init_uniform("head.K", [c_out, c_in, 1, 1], c_in, rng);
        ps.init_zeros("head.b", [c_out]);
    }

    /// `[B × 2H × rows × cols]`, channel `h*2 + pollutant`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &[&GridSample]) -> Result<Var> {
        let NetShape { n_features: f, window: w, hidden, static_dim, .. } = self.shape;
        let b = batch.len();
        let (rows, cols) = batch
            .first()
            .map(|s| s.shape)
            .ok_or_else(|| Error::Empty("grid batch".into()))?;
        let px = rows * cols;
        for s in batch {
            if s.shape != (rows, cols) {
                return Err(Error::shape("grid batch", &[s.shape.0, s.shape.1], &[rows, cols]));
            }
            check_len("grid input (window × features × pixels)", s.input.len(), w * f * px)?;
            check_len("grid static features", s.static_features.len(), static_dim * px)?;
        }
        let mut hs: Vec<Var> = (0..self.cells.len())
            .map(|_| tape.constant(Tensor::zeros([b, hidden, rows, cols])))
            .collect();
        for t in 0..w {
            let mut x_t = Vec::with_capacity(b * f * px);
            for s in batch {
                x_t.extend_from_slice(&s.input[t * f * px..(t + 1) * f * px]);
            }
            let mut x = tape.constant(Tensor::new([b, f, rows, cols], x_t)?);
            for (cell, h) in self.cells.iter().zip(hs.iter_mut()) {
                *h = cell.step(tape, p, x, *h)?;
                x = *h;
            }
        }
        let mut last = *hs.last().ok_or_else(|| Error::InvalidArgument("grid model needs a layer".into()))?;
        if static_dim > 0 {
            let st: Vec<f64> = batch.iter().flat_map(|s| s.static_features.iter().copied()).collect();
            let st = tape.constant(Tensor::new([b, static_dim, rows, cols], st)?);
            last = tape.concat(&[last, st], 1)?;
        }
        let k = p.var("head.K")?;
        let bias = p.var("head.b")?;
        let out = tape.conv2d(last, k)?;
        tape.add_channel_bias(out, bias)
    }
}
