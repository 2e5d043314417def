mod common;

use std::sync::Arc;

use aqcast::domain::CellId;
use aqcast::graph::{normalize_adjacency, Adjacency};
use aqcast::models::{
    Forecaster, ForecasterConfig, GraphCtx, GraphNet, GridNet, ModelKind, NetShape, SeriesNet, Split, TrainConfig,
};
use aqcast::neuralnet::{ParamSet, Tape};
use aqcast::represent::{GraphSample, GridSample, SeriesSample};
use aqcast::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const F: usize = 3;
const W: usize = 4;
const H: usize = 2;
const HIDDEN: usize = 5;

fn shape(kind: ModelKind, layers: usize) -> NetShape {
    NetShape {
        kind,
        layers,
        hidden: HIDDEN,
        kernel: 3,
        n_features: F,
        static_dim: 0,
        window: W,
        horizon: H,
    }
}

fn random(len: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn ctx(n: usize, edges: &[(usize, usize)]) -> GraphCtx {
    let adj = Adjacency::from_edges(n, edges).unwrap();
    GraphCtx {
        n,
        norm_adj: Arc::new(normalize_adjacency(&adj)),
        neighborhoods: adj.neighborhoods(),
    }
}

fn graph_sample(input: Vec<f64>) -> GraphSample {
    GraphSample {
        anchor: 0,
        input,
        target: Vec::new(),
        mask: Vec::new(),
        static_features: Vec::new(),
        max_bin_read: 0,
    }
}

fn series_sample(input: Vec<f64>) -> SeriesSample {
    SeriesSample {
        cell: CellId { row: 0, col: 0 },
        anchor: 0,
        input,
        target: Vec::new(),
        mask: Vec::new(),
        static_features: Vec::new(),
        max_bin_read: 0,
    }
}

fn run_graph(net: &GraphNet, ps: &ParamSet, ctx: &GraphCtx, samples: &[GraphSample]) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = ps.bind_frozen(&mut tape);
    let batch: Vec<&GraphSample> = samples.iter().collect();
    let y = net.forward(&mut tape, &p, ctx, &batch).unwrap();
    tape.value(y).data().to_vec()
}

fn graph_params(kind: ModelKind, layers: usize, seed: u64) -> (GraphNet, ParamSet) {
    let net = GraphNet::new(shape(kind, layers));
    let mut ps = ParamSet::new();
    net.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
    (net, ps)
}

const EDGES: [(usize, usize); 5] = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 4)];

#[test]
fn graph_without_graph_layers_is_a_series_gru() {
    let n = 5;
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (gnet, ps) = graph_params(ModelKind::GcnGru, 0, 2);
    let snet = SeriesNet::new(shape(ModelKind::Gru, 1));
    let input = random(W * n * F, &mut r);
    let g = run_graph(&gnet, &ps, &ctx(n, &EDGES), &[graph_sample(input.clone())]);

    let series: Vec<SeriesSample> = (0..n)
        .map(|i| series_sample((0..W).flat_map(|t| input[(t * n + i) * F..(t * n + i + 1) * F].to_vec()).collect()))
        .collect();
    let mut tape = Tape::new();
    let p = ps.bind_frozen(&mut tape);
    let batch: Vec<&SeriesSample> = series.iter().collect();
    let y = snet.forward(&mut tape, &p, &batch).unwrap();
    let s = tape.value(y).data().to_vec();
    assert_eq!(g.len(), s.len());
    for (a, b) in g.iter().zip(&s) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn graph_models_are_node_permutation_equivariant() {
    let n = 5;
    let perm = [3, 0, 4, 1, 2]; // new node j is old node perm[j]
    let mut inv = [0; 5];
    for (j, &o) in perm.iter().enumerate() {
        inv[o] = j;
    }
    let edges_p: Vec<(usize, usize)> = EDGES.iter().map(|&(a, b)| (inv[a], inv[b])).collect();
    for kind in [ModelKind::GcnGru, ModelKind::GatGru] {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (net, ps) = graph_params(kind, 2, 6);
        let input = random(W * n * F, &mut r);
        let mut input_p = vec![0.0; input.len()];
        for t in 0..W {
            for (j, &pj) in perm.iter().enumerate() {
                let (dst, src) = ((t * n + j) * F, (t * n + pj) * F);
                input_p[dst..dst + F].copy_from_slice(&input[src..src + F]);
            }
        }
        let y = run_graph(&net, &ps, &ctx(n, &EDGES), &[graph_sample(input)]);
        let yp = run_graph(&net, &ps, &ctx(n, &edges_p), &[graph_sample(input_p)]);
        let per = 2 * H;
        for j in 0..n {
            for k in 0..per {
                let (a, b) = (yp[j * per + k], y[perm[j] * per + k]);
                assert!((a - b).abs() < 1e-12, "{kind}: node {j} out {k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn isolated_node_ignores_other_nodes() {
    let n = 5;
    let edges = [(0, 1), (1, 2), (2, 3)];
    for kind in [ModelKind::GcnGru, ModelKind::GatGru] {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let (net, ps) = graph_params(kind, 2, 10);
        let input = random(W * n * F, &mut r);
        let mut other = random(W * n * F, &mut r);
        for t in 0..W {
            let at = (t * n + 4) * F;
            other[at..at + F].copy_from_slice(&input[at..at + F]);
        }
        let c = ctx(n, &edges);
        let a = run_graph(&net, &ps, &c, &[graph_sample(input)]);
        let b = run_graph(&net, &ps, &c, &[graph_sample(other)]);
        assert_eq!(a[4 * 2 * H..], b[4 * 2 * H..], "{kind}");
        assert_ne!(a[..2 * H], b[..2 * H]);
    }
}

#[test]
fn graph_batches_match_single_samples() {
    let n = 5;
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (net, ps) = graph_params(ModelKind::GatGru, 1, 12);
    let c = ctx(n, &EDGES);
    let samples: Vec<GraphSample> = (0..3).map(|_| graph_sample(random(W * n * F, &mut r))).collect();
    let batched = run_graph(&net, &ps, &c, &samples);
    let single: Vec<f64> = samples
        .iter()
        .flat_map(|s| run_graph(&net, &ps, &c, std::slice::from_ref(s)))
        .collect();
    for (a, b) in batched.iter().zip(&single) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn convgru_is_translation_equivariant_away_from_borders() {
    let (rows, cols) = (20, 5);
    let px = rows * cols;
    let net = GridNet::new(shape(ModelKind::ConvGru, 1));
    let mut ps = ParamSet::new();
    let mut r = ChaCha8Rng::seed_from_u64(13);
    net.init(&mut ps, &mut r);
    let x = random(W * F * px, &mut r);
    // shift everything down one row; row 0 gets fresh values
    let mut xs = random(W * F * px, &mut r);
    for tf in 0..W * F {
        for row in 1..rows {
            for col in 0..cols {
                xs[tf * px + row * cols + col] = x[tf * px + (row - 1) * cols + col];
            }
        }
    }
    let run = |input: Vec<f64>| {
        let s = GridSample {
            anchor: 0,
            input,
            target: Vec::new(),
            mask: Vec::new(),
            static_features: Vec::new(),
            max_bin_read: 0,
            shape: (rows, cols),
        };
        let mut tape = Tape::new();
        let p = ps.bind_frozen(&mut tape);
        let y = net.forward(&mut tape, &p, &[&s]).unwrap();
        tape.value(y).data().to_vec()
    };
    let (y, ys) = (run(x), run(xs));
    // the candidate convolves r⊙h and r already looks one cell out, so each
    // step widens the receptive field by two cells
    let reach = 2 * W;
    for ch in 0..2 * H {
        for row in reach + 1..rows - reach {
            for col in 0..cols {
                let a = ys[ch * px + row * cols + col];
                let b = y[ch * px + (row - 1) * cols + col];
                assert!((a - b).abs() < 1e-12, "ch {ch} ({row},{col}): {a} vs {b}");
            }
        }
    }
}

#[test]
fn wrong_input_length_is_shape_error() {
    let net = SeriesNet::new(shape(ModelKind::Gru, 1));
    let mut ps = ParamSet::new();
    net.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0));
    let s = series_sample(vec![0.0; (W - 1) * F]);
    let mut tape = Tape::new();
    let p = ps.bind_frozen(&mut tape);
    let e = net.forward(&mut tape, &p, &[&s]).unwrap_err();
    assert!(matches!(e, Error::ShapeMismatch { .. }), "{e}");
}

fn cfg(kind: ModelKind) -> ForecasterConfig {
    ForecasterConfig {
        kind,
        layers: 1,
        hidden: 8,
        k_neighbors: 3,
        ..ForecasterConfig::default()
    }
}

fn tc(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs: Some(epochs),
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_same_parameters_and_predictions() {
    let f = common::small();
    let ds = common::dataset(&f, common::short_windows(12, 6));
    for kind in [ModelKind::Gru, ModelKind::GatGru] {
        let (a, ra) = Forecaster::fit(cfg(kind), &tc(2), &ds).unwrap();
        let (b, rb) = Forecaster::fit(cfg(kind), &tc(2), &ds).unwrap();
        assert_eq!(a.params.max_abs_diff(&b.params), 0.0, "{kind}");
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(
            a.predict_split(&ds, Split::Test).unwrap(),
            b.predict_split(&ds, Split::Test).unwrap()
        );
    }
}

#[test]
fn zero_epochs_keeps_initial_parameters() {
    let f = common::small();
    let ds = common::dataset(&f, common::short_windows(12, 6));
    for kind in [ModelKind::Rnn, ModelKind::GcnGru, ModelKind::ConvGru] {
        let init = Forecaster::init(cfg(kind), &ds).unwrap();
        let (fit, report) = Forecaster::fit(cfg(kind), &tc(0), &ds).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(init.params.max_abs_diff(&fit.params), 0.0, "{kind}");
    }
}

#[test]
fn training_lowers_the_loss() {
    let f = common::small();
    let ds = common::dataset(&f, common::short_windows(12, 6));
    let mut t = tc(6);
    t.adam.lr = 3e-3;
    let (_, report) = Forecaster::fit(cfg(ModelKind::Gru), &t, &ds).unwrap();
    let first = report.losses[0];
    let last = *report.losses.last().unwrap();
    assert!(last < first, "{:?}", report.losses);
}

#[test]
fn predictions_do_not_read_targets() {
    let f = common::small();
    let ds = common::dataset(&f, common::short_windows(12, 6));
    let (m, _) = Forecaster::fit(cfg(ModelKind::Gru), &tc(1), &ds).unwrap();
    let samples = ds.series_samples().test;
    let mut scrambled = samples.clone();
    for s in &mut scrambled {
        s.target.iter_mut().for_each(|v| *v = -1e6);
        s.mask.iter_mut().for_each(|k| *k = !*k);
    }
    let a = m.predict_series(&samples).unwrap();
    let b = m.predict_series(&scrambled).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|p| p.len() == 2 * 6));
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let f = common::small();
    let ds = common::dataset(&f, common::short_windows(12, 6));
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Gru, ModelKind::GcnGru, ModelKind::ConvGru, ModelKind::Ridge, ModelKind::IdwBase] {
        let (m, _) = Forecaster::fit(cfg(kind), &tc(1), &ds).unwrap();
        let path = dir.path().join(format!("{kind}.ckpt"));
        m.save(&path).unwrap();
        let back = Forecaster::load(&path).unwrap();
        assert_eq!(back.meta, m.meta);
        assert_eq!(back.params.max_abs_diff(&m.params), 0.0);
        for split in [Split::Test, Split::Extended] {
            assert_eq!(
                back.predict_split(&ds, split).unwrap(),
                m.predict_split(&ds, split).unwrap(),
                "{kind} {split}"
            );
        }
    }
}

#[test]
fn window_mismatch_between_model_and_dataset_is_error() {
    let f = common::small();
    let ds = common::dataset(&f, common::short_windows(12, 6));
    let other = common::dataset(&f, common::short_windows(24, 6));
    let (m, _) = Forecaster::fit(cfg(ModelKind::Gru), &tc(1), &ds).unwrap();
    assert!(matches!(
        m.predict_split(&other, Split::Test),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn use_static_without_sidecar_is_config_error() {
    let f = common::small();
    let ds = common::dataset(&f, common::short_windows(12, 6));
    let mut c = cfg(ModelKind::Gru);
    c.use_static = true;
    assert!(matches!(Forecaster::init(c, &ds), Err(Error::Config(_))));
}
