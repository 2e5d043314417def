//! Acceptance gate: one PASS/FAIL line per criterion on stdout (written past
//! the test harness capture), then a single assertion over all of them.
//!
//! Criterion 12 needs the AirDelhi readings: set `AQCAST_AIRDELHI` to the CSV
//! and optionally `AQCAST_AIRDELHI_CONFIG` to a run config (format, grid,
//! epochs). Without them it is reported as SKIP.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use aqcast::cli::{RunConfig, Runner};
use aqcast::domain::{categorize, AqiCategory, Pollutant};
use aqcast::eval::{evaluate, EvalReport};
use aqcast::graph::{knn_graph, normalize_adjacency, Adjacency};
use aqcast::impute::{idw_brute, idw_query, Candidate, IdwConfig, SpatialIndex};
use aqcast::models::{Forecaster, ForecasterConfig, ModelKind, NetShape, SeriesNet, Split, TrainConfig};
use aqcast::neuralnet::{
    grad_check, ConvGruCell, GatLayer, GcnLayer, GruCell, Neighborhoods, ParamSet, RnnCell, Tape, Tensor, Var,
};
use aqcast::represent::{Dataset, SeriesSample, WindowConfig};
use aqcast::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Runs one criterion; a panic counts as FAIL.
fn criterion(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome::Fail(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Outcome::Pass(d) => ("PASS", d, true),
        Outcome::Fail(d) => ("FAIL", d, false),
        Outcome::Skip(d) => ("SKIP", d, true),
    };
    emit(&format!("criterion {n:>2} {tag}  {name}: {detail} [{secs:.1}s]"));
    ok
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

const EPS: f64 = 1e-5;
// The stacked model has reset-gate gradients near 1e-7, where a 1e-5 step is
// dominated by roundoff; a wider step keeps the central difference accurate.
const MODEL_EPS: f64 = 1e-4;

fn readout(tape: &mut Tape, out: Var, coef: &Tensor) -> Result<Var> {
    let c = tape.constant(coef.clone());
    let m = tape.mul(out, c)?;
    Ok(tape.sum(m))
}

fn ring(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![(i + 1) % n, (i + n - 1) % n]).collect()
}

fn ring_adjacency(n: usize) -> Tensor {
    let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    normalize_adjacency(&Adjacency::from_edges(n, &edges).unwrap())
}

/// Max relative error over a few seeds of each differentiable block. Inputs
/// and initial states are registered as parameters so their gradients are
/// checked too.
fn gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let worst = |f: &mut dyn FnMut(u64) -> f64| (0..4).map(&mut *f).fold(0.0, f64::max);

    out.push((
        "rnn_step",
        worst(&mut |s| {
            let mut r = rng(s);
            let cell = RnnCell::new("rnn", 3, 4);
            let mut ps = ParamSet::new();
            cell.init(&mut ps, &mut r);
            ps.insert("rnn.b_h", Tensor::uniform([4], 0.5, &mut r));
            ps.insert("x", Tensor::uniform([2, 3], 1.0, &mut r));
            ps.insert("h", Tensor::uniform([2, 4], 1.0, &mut r));
            let coef = Tensor::uniform([2, 4], 1.0, &mut r);
            grad_check(
                |t, p| {
                    let o = cell.step(t, p, p.var("x")?, p.var("h")?)?;
                    readout(t, o, &coef)
                },
                &ps,
                EPS,
            )
            .unwrap()
        }),
    ));

    out.push((
        "gru_step",
        worst(&mut |s| {
            let mut r = rng(100 + s);
            let cell = GruCell::new("gru", 3, 4);
            let mut ps = ParamSet::new();
            cell.init(&mut ps, &mut r);
            for g in ["b_z", "b_r", "b_h"] {
                ps.insert(format!("gru.{g}"), Tensor::uniform([4], 0.5, &mut r));
            }
            let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform([2, 3], 1.0, &mut r)).collect();
            ps.insert("h0", Tensor::uniform([2, 4], 1.0, &mut r));
            let coef = Tensor::uniform([2, 4], 1.0, &mut r);
            grad_check(
                |t, p| {
                    let mut h = p.var("h0")?;
                    for x in &xs {
                        let xv = t.constant(x.clone());
                        h = cell.step(t, p, xv, h)?;
                    }
                    readout(t, h, &coef)
                },
                &ps,
                EPS,
            )
            .unwrap()
        }),
    ));

    out.push((
        "gcn_layer",
        worst(&mut |s| {
            let mut r = rng(200 + s);
            let n = 6;
            let layer = GcnLayer::new("gcn", 4, 3);
            let mut ps = ParamSet::new();
            layer.init(&mut ps, &mut r);
            ps.insert("x", Tensor::uniform([2 * n, 4], 1.0, &mut r));
            let adj = Arc::new(ring_adjacency(n));
            let coef = Tensor::uniform([2 * n, 3], 1.0, &mut r);
            grad_check(
                |t, p| {
                    let o = layer.forward(t, p, &adj, p.var("x")?)?;
                    readout(t, o, &coef)
                },
                &ps,
                EPS,
            )
            .unwrap()
        }),
    ));

    out.push((
        "gat_layer",
        worst(&mut |s| {
            let mut r = rng(300 + s);
            let n = 5;
            let layer = GatLayer::new("gat", 3, 4);
            let mut ps = ParamSet::new();
            layer.init(&mut ps, &mut r);
            ps.insert("x", Tensor::uniform([2 * n, 3], 1.0, &mut r));
            let nb = Neighborhoods::with_self_loops(&ring(n)).unwrap().tiled(2);
            let coef = Tensor::uniform([2 * n, 4], 1.0, &mut r);
            grad_check(
                |t, p| {
                    let o = layer.forward(t, p, &nb, p.var("x")?)?;
                    readout(t, o, &coef)
                },
                &ps,
                EPS,
            )
            .unwrap()
        }),
    ));

    out.push((
        "convgru_step",
        worst(&mut |s| {
            let mut r = rng(400 + s);
            let cell = ConvGruCell::new("cg", 2, 3, 3);
            let mut ps = ParamSet::new();
            cell.init(&mut ps, &mut r);
            ps.insert("h", Tensor::uniform([1, 3, 3, 3], 1.0, &mut r));
            ps.insert("x", Tensor::uniform([1, 2, 3, 3], 1.0, &mut r));
            let coef = Tensor::uniform([1, 3, 3, 3], 1.0, &mut r);
            grad_check(
                |t, p| {
                    let o = cell.step(t, p, p.var("x")?, p.var("h")?)?;
                    readout(t, o, &coef)
                },
                &ps,
                EPS,
            )
            .unwrap()
        }),
    ));

    out.push((
        "masked_mse(model)",
        worst(&mut |s| {
            let mut r = rng(500 + s);
            let (net, ps, samples) = tiny_series_model(&mut r);
            let (target, mask) = tiny_targets(&mut r, samples.len());
            grad_check(
                |t, p| {
                    let batch: Vec<&SeriesSample> = samples.iter().collect();
                    let y = net.forward(t, p, &batch)?;
                    let flat = t.reshape(y, [target.len()])?;
                    t.masked_mse(flat, Arc::clone(&target), Arc::clone(&mask))
                },
                &ps,
                MODEL_EPS,
            )
            .unwrap()
        }),
    ));
    out
}

const TW: usize = 3;
const TH: usize = 2;

fn tiny_series_model(r: &mut ChaCha8Rng) -> (SeriesNet, ParamSet, Vec<SeriesSample>) {
    let f = 4;
    let net = SeriesNet::new(NetShape {
        kind: ModelKind::Gru,
        layers: 2,
        hidden: 3,
        kernel: 3,
        n_features: f,
        static_dim: 0,
        window: TW,
        horizon: TH,
    });
    let mut ps = ParamSet::new();
    net.init(&mut ps, r);
    for (_, t) in ps.iter_mut() {
        // non-zero biases so every parameter carries gradient signal
        if t.ndim() == 1 {
            *t = Tensor::uniform(t.shape().to_vec(), 0.3, r);
        }
    }
    let samples = (0..3)
        .map(|_| SeriesSample {
            cell: aqcast::domain::CellId { row: 0, col: 0 },
            anchor: 0,
            input: Tensor::uniform([TW * f], 1.0, r).into_data(),
            target: Vec::new(),
            mask: Vec::new(),
            static_features: Vec::new(),
            max_bin_read: 0,
        })
        .collect();
    (net, ps, samples)
}

fn tiny_targets(r: &mut ChaCha8Rng, b: usize) -> (Arc<Tensor>, Arc<[bool]>) {
    let len = b * 2 * TH;
    let target = Arc::new(Tensor::uniform([len], 1.0, r));
    let mask: Arc<[bool]> = (0..len).map(|i| i % 3 != 1).collect();
    (target, mask)
}

fn c1_gradients() -> Outcome {
    let errs = gradient_errors();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst < 1e-6, detail)
}

// ---------------------------------------------------------------- 2

fn c2_idw() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut exact = true;
    let instances = 1000;
    for i in 0..instances {
        let n = r.random_range(1..=200);
        let cands: Vec<Candidate> = (0..n)
            .map(|_| Candidate {
                lon: r.random_range(77.0..77.3),
                lat: r.random_range(28.4..28.7),
                tod_min: r.random_range(330.0..1320.0),
                value: [r.random_range(0.0..500.0), r.random_range(0.0..500.0)],
            })
            .collect();
        let cfg = IdwConfig {
            k: 1 + i % 6,
            ..IdwConfig::default()
        };
        let index = SpatialIndex::from_candidates(&cands, &cfg).unwrap();
        for _ in 0..3 {
            let q = (r.random_range(77.0..77.3), r.random_range(28.4..28.7), r.random_range(330.0..1320.0));
            let a = idw_query(&index, q.0, q.1, q.2, &cfg).unwrap();
            let b = idw_brute(&cands, q.0, q.1, q.2, &cfg).unwrap();
            for p in 0..2 {
                worst = worst.max((a[p] - b[p]).abs() / (1.0 + b[p].abs()));
            }
        }
        let c = &cands[r.random_range(0..n)];
        exact &= idw_query(&index, c.lon, c.lat, c.tod_min, &cfg).unwrap() == c.value;
        exact &= idw_brute(&cands, c.lon, c.lat, c.tod_min, &cfg).unwrap() == c.value;
    }
    check(
        worst <= 1e-9 && exact,
        format!("{instances} candidate sets, max rel diff {worst:.1e}, zero-distance exact: {exact}"),
    )
}

// ---------------------------------------------------------------- 3

fn c3_convgru_gru() -> Outcome {
    let (i, h) = (3, 4);
    let mut r = rng(3);
    let gru = GruCell::new("g", i, h);
    let conv = ConvGruCell::new("c", i, h, 1);
    let mut ps = ParamSet::new();
    gru.init(&mut ps, &mut r); // biases start at zero, matching the bias-free ConvGRU
    for g in ["z", "r", "h"] {
        let w = ps.get(&format!("g.W_{g}")).unwrap().clone();
        let u = ps.get(&format!("g.U_{g}")).unwrap().clone();
        // Conv weight [out, in, 1, 1] is the transposed dense weight.
        let kx = w.transpose2().unwrap().reshape([h, i, 1, 1]).unwrap();
        let kh = u.transpose2().unwrap().reshape([h, h, 1, 1]).unwrap();
        ps.insert(format!("c.Conv_{g}"), kx);
        ps.insert(format!("c.Conv_h{g}"), kh);
    }
    let h0 = Tensor::uniform([1, h], 1.0, &mut r);
    let mut tape = Tape::new();
    let p = ps.bind_frozen(&mut tape);
    let mut hg = tape.constant(h0.clone());
    let mut hc = tape.constant(h0.reshape([1, h, 1, 1]).unwrap());
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = Tensor::uniform([1, i], 1.0, &mut r);
        let xg = tape.constant(x.clone());
        let xc = tape.constant(x.reshape([1, i, 1, 1]).unwrap());
        hg = gru.step(&mut tape, &p, xg, hg).unwrap();
        hc = conv.step(&mut tape, &p, xc, hc).unwrap();
        for (a, b) in tape.value(hg).data().iter().zip(tape.value(hc).data()) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, format!("10-step rollout, max |diff| {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn c4_gcn_norm() -> Outcome {
    let two = normalize_adjacency(&Adjacency::from_edges(2, &[(0, 1)]).unwrap());
    let exact = two.data() == [0.5, 0.5, 0.5, 0.5];
    let mut r = rng(4);
    let mut symmetric = true;
    for g in 0..100 {
        let k = 2 + g % 6;
        let n = r.random_range(k + 1..=40);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (r.random_range(0.0..10_000.0), r.random_range(0.0..10_000.0)))
            .collect();
        let a = normalize_adjacency(&knn_graph(&pts, k).unwrap());
        for i in 0..n {
            for j in 0..n {
                symmetric &= a.get(&[i, j]) == a.get(&[j, i]);
            }
        }
    }
    check(
        exact && symmetric,
        format!("two-node graph exact: {exact}, 100 random k-NN graphs (k 2..7) symmetric: {symmetric}"),
    )
}

// ---------------------------------------------------------------- 5

fn c5_gat_attention() -> Outcome {
    let mut r = rng(5);
    let n = 6;
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && r.random_bool(0.5)).collect())
        .collect();
    let nb = Neighborhoods::with_self_loops(&lists).unwrap();
    let layer = GatLayer::new("gat", 4, 3);
    let mut ps = ParamSet::new();
    layer.init(&mut ps, &mut r);
    let attention = |x: Tensor| -> Vec<f64> {
        let mut tape = Tape::new();
        let p = ps.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let (_, alpha) = layer.forward_with_attention(&mut tape, &p, &nb, xv).unwrap();
        tape.value(alpha).data().to_vec()
    };
    let a = attention(Tensor::uniform([n, 4], 1.0, &mut r));
    let mut sum_err = 0.0f64;
    for i in 0..n {
        let s: f64 = a[nb.offsets[i]..nb.offsets[i + 1]].iter().sum();
        sum_err = sum_err.max((s - 1.0).abs());
    }
    let row = Tensor::uniform([1, 4], 1.0, &mut r).into_data();
    let same = Tensor::new([n, 4], row.repeat(n)).unwrap();
    let u = attention(same);
    let mut uni_err = 0.0f64;
    for i in 0..n {
        let deg = (nb.offsets[i + 1] - nb.offsets[i]) as f64;
        for &v in &u[nb.offsets[i]..nb.offsets[i + 1]] {
            uni_err = uni_err.max((v - 1.0 / deg).abs());
        }
    }
    check(
        sum_err <= 1e-12 && uni_err <= 1e-12,
        format!("row-sum err {sum_err:.1e}, uniform err {uni_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 6

fn c6_masked_loss() -> Outcome {
    let mut r = rng(6);
    let (net, ps, samples) = tiny_series_model(&mut r);
    let (target, mask) = tiny_targets(&mut r, samples.len());
    let run = |delta: &Tensor, tgt: &Arc<Tensor>| {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let batch: Vec<&SeriesSample> = samples.iter().collect();
        let y = net.forward(&mut tape, &p, &batch).unwrap();
        let flat = tape.reshape(y, [tgt.len()]).unwrap();
        let d = tape.constant(delta.clone());
        let pred = tape.add(flat, d).unwrap();
        let loss = tape.masked_mse(pred, Arc::clone(tgt), Arc::clone(&mask)).unwrap();
        let l = tape.value(loss).item();
        let mut g = tape.backward(loss).unwrap();
        (l, p.grads(&tape, &mut g))
    };
    let zero = Tensor::zeros([target.len()]);
    let mut junk = Tensor::zeros([target.len()]);
    let mut junk_target = (*target).clone();
    for (i, &k) in mask.iter().enumerate() {
        if !k {
            junk.data_mut()[i] = r.random_range(-1e3..1e3);
            junk_target.data_mut()[i] = r.random_range(-1e3..1e3);
        }
    }
    let (l0, g0) = run(&zero, &target);
    let (l1, g1) = run(&junk, &Arc::new(junk_target));
    let same_grads = g0.len() == g1.len() && g0.iter().all(|(k, v)| g1.get(k).is_some_and(|w| w == v));
    check(
        l0 == l1 && same_grads,
        format!(
            "loss identical: {}, all {} parameter gradients identical: {same_grads}",
            l0 == l1,
            g0.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_leakage(f: &common::Fixture) -> Outcome {
    let ds = Dataset::new(&f.views, f.split.clone(), f.tsplit.clone(), WindowConfig::default(), None).unwrap();
    let test_start = f.tsplit.test_bins.start;
    let train_end = f.tsplit.train_bins.end;
    let h = ds.windows.horizon;
    let mut problems = Vec::new();

    let series = ds.series_samples();
    let graph = ds.graph_samples(aqcast::graph::DEFAULT_K).unwrap();
    let grid = ds.grid_samples();
    let reads: Vec<(usize, usize)> = series
        .train
        .iter()
        .map(|s| (s.anchor, s.max_bin_read))
        .chain(graph.samples.train.iter().map(|s| (s.anchor, s.max_bin_read)))
        .chain(grid.train.iter().map(|s| (s.anchor, s.max_bin_read)))
        .collect();
    for &(anchor, max_read) in &reads {
        if max_read >= test_start || anchor + h > train_end {
            problems.push(format!("anchor {anchor} reads bin {max_read}"));
        }
    }
    if ds.normalizer.fit_bins.end > train_end {
        problems.push(format!("normalizer fitted on {:?}", ds.normalizer.fit_bins));
    }

    // Scramble every test bin of both views; nothing used for training may move.
    let mut views = f.views.clone();
    for frames in [&mut views.train.frames, &mut views.eval.frames] {
        for c in 0..frames.n_cells() {
            for b in test_start..frames.n_bins() {
                let mut e = frames.entry(c, b);
                e.pm25 = e.pm25.map(|v| 3.0 * v + 100.0);
                e.pm10 = e.pm10.map(|v| 0.5 * v + 7.0);
                e.speed = Some(33.0);
                frames.set_entry(c, b, e);
            }
        }
    }
    let ds2 = Dataset::new(&views, f.split.clone(), f.tsplit.clone(), WindowConfig::default(), None).unwrap();
    if ds2.normalizer != ds.normalizer {
        problems.push("normalizer depends on test bins".into());
    }
    if ds2.series_samples().train != series.train {
        problems.push("series train samples depend on test bins".into());
    }
    if ds2.graph_samples(aqcast::graph::DEFAULT_K).unwrap().samples.train != graph.samples.train {
        problems.push("graph train samples depend on test bins".into());
    }
    if ds2.grid_samples().train != grid.train {
        problems.push("grid train samples depend on test bins".into());
    }
    if problems.is_empty() {
        Outcome::Pass(format!(
            "{} train samples scanned, test bins from {test_start}, normalizer bins {:?}",
            reads.len(),
            ds.normalizer.fit_bins
        ))
    } else {
        Outcome::Fail(problems.join("; "))
    }
}

// ---------------------------------------------------------------- 8

fn c8_aqi() -> Outcome {
    use AqiCategory::*;
    // (pollutant, category, lowest value, highest value) per published range
    let table: [(Pollutant, AqiCategory, f64, f64); 12] = [
        (Pollutant::Pm25, Good, 0.0, 30.0),
        (Pollutant::Pm25, Satisfactory, 31.0, 60.0),
        (Pollutant::Pm25, ModeratelyPolluted, 61.0, 90.0),
        (Pollutant::Pm25, Poor, 91.0, 120.0),
        (Pollutant::Pm25, VeryPoor, 121.0, 250.0),
        (Pollutant::Pm25, Severe, 250.000001, 1e4),
        (Pollutant::Pm10, Good, 0.0, 50.0),
        (Pollutant::Pm10, Satisfactory, 51.0, 100.0),
        (Pollutant::Pm10, ModeratelyPolluted, 101.0, 250.0),
        (Pollutant::Pm10, Poor, 251.0, 350.0),
        (Pollutant::Pm10, VeryPoor, 351.0, 430.0),
        (Pollutant::Pm10, Severe, 430.000001, 1e4),
    ];
    let mut bad = Vec::new();
    for (p, cat, lo, hi) in table {
        for v in [lo, hi, (lo + hi) / 2.0] {
            let got = categorize(v, p).unwrap();
            if got != cat {
                bad.push(format!("{p} {v} -> {got:?}, want {cat:?}"));
            }
        }
    }
    // values between the integer ranges belong to the lower category
    for (p, v, cat) in [(Pollutant::Pm25, 30.5, Satisfactory), (Pollutant::Pm10, 50.5, Satisfactory)] {
        if categorize(v, p).unwrap() != cat {
            bad.push(format!("{p} {v}"));
        }
    }
    check(bad.is_empty(), if bad.is_empty() { "12 ranges, both endpoints".into() } else { bad.join("; ") })
}

// ---------------------------------------------------------------- 9, 10

struct GateRun {
    reports: Vec<EvalReport>,
    seconds: f64,
}

fn r2(reports: &[EvalReport], kind: ModelKind, p: Pollutant, split: Split) -> f64 {
    reports
        .iter()
        .find(|r| r.model == kind.as_str() && r.pollutant == p && r.split == split)
        .map(|r| r.r2)
        .unwrap_or(f64::NAN)
}

fn gate_model(kind: ModelKind) -> (ForecasterConfig, TrainConfig) {
    let fc = ForecasterConfig {
        kind,
        layers: 1,
        hidden: 32,
        seed: 1,
        ..ForecasterConfig::default()
    };
    let mut tc = TrainConfig {
        epochs: Some(if kind.is_graph() { 80 } else { 20 }),
        batch_size: if kind.is_graph() { 2 } else { 32 },
        ..TrainConfig::default()
    };
    tc.adam.lr = 3e-3;
    (fc, tc)
}

/// Default synthetic field (10×10, 30 days, ≈20% coverage), 15 held-out
/// cells, W = 2 days, H = 1 day.
fn gate_run(f: &common::Fixture, start: Instant) -> GateRun {
    let ds = Dataset::new(&f.views, f.split.clone(), f.tsplit.clone(), WindowConfig::default(), None).unwrap();
    let mut reports = Vec::new();
    for kind in [ModelKind::Ridge, ModelKind::Gru, ModelKind::GcnGru, ModelKind::GatGru] {
        let (fc, tc) = gate_model(kind);
        let (m, _) = Forecaster::fit(fc, &tc, &ds).unwrap();
        reports.extend(evaluate(&m, &ds).unwrap());
    }
    GateRun {
        reports,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn c9_gate(run: &GateRun) -> Outcome {
    let rs = &run.reports;
    let mut ok = run.seconds < 900.0;
    let mut parts = Vec::new();
    for p in Pollutant::ALL {
        let gru = r2(rs, ModelKind::Gru, p, Split::Test);
        let gcn = r2(rs, ModelKind::GcnGru, p, Split::Test);
        let gat = r2(rs, ModelKind::GatGru, p, Split::Test);
        let ridge = r2(rs, ModelKind::Ridge, p, Split::Test);
        ok &= gru >= 0.85 && gcn >= gru - 0.02 && gat >= gru - 0.02 && ridge <= gru - 0.10;
        parts.push(format!("{p}: GRU {gru:.3} GCN {gcn:.3} GAT {gat:.3} ridge {ridge:.3}"));
    }
    parts.push(format!("{:.0}s", run.seconds));
    check(ok, parts.join("; "))
}

fn c10_extended(run: &GateRun, f: &common::Fixture) -> Outcome {
    let rs = &run.reports;
    let mut ok = true;
    let mut parts = vec![format!("{} held-out cells", f.split.extended_cells.len())];
    for p in Pollutant::ALL {
        let test = r2(rs, ModelKind::Gru, p, Split::Test);
        let ext = r2(rs, ModelKind::Gru, p, Split::Extended);
        ok &= (ext - test).abs() <= 0.05;
        let gcn = r2(rs, ModelKind::GcnGru, p, Split::Extended);
        let gat = r2(rs, ModelKind::GatGru, p, Split::Extended);
        parts.push(format!("{p}: GRU test {test:.3} ext {ext:.3} (GCN ext {gcn:.3}, GAT ext {gat:.3})"));
    }
    check(ok && f.split.extended_cells.len() >= 15, parts.join("; "))
}

// ---------------------------------------------------------------- 11

fn determinism_config(out: &std::path::Path) -> RunConfig {
    let text = format!(
        r#"
[paths]
output_dir = "{}"
[grid]
n_rows = 6
n_cols = 6
[synth]
n_days = 12
n_buses = 4
[split]
random_holdout = 3
[windows]
input_bins = 16
horizon_bins = 8
[model]
layers = 1
hidden = 6
k_neighbors = 3
[train]
epochs = 2
batch_size = 8
[pipeline]
synth = true
"#,
        out.display()
    );
    RunConfig::from_toml(&text, &[]).unwrap()
}

fn c11_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runners: Vec<Runner> = dirs
        .iter()
        .map(|d| {
            let mut r = Runner::new(determinism_config(d.path()));
            r.quiet = true;
            r.pipeline().unwrap();
            r
        })
        .collect();
    let mut bad = Vec::new();
    let mut files = vec!["reports/summary.csv".to_string(), "synth/readings.csv".into(), "split.json".into()];
    files.extend(ModelKind::ALL.iter().map(|k| format!("reports/{k}.csv")));
    for rel in &files {
        let a = std::fs::read(dirs[0].path().join(rel)).unwrap();
        let b = std::fs::read(dirs[1].path().join(rel)).unwrap();
        if a != b {
            bad.push(rel.clone());
        }
    }
    let mut worst = 0.0f64;
    for kind in ModelKind::ALL {
        let a = Forecaster::load(&runners[0].checkpoint_path(kind)).unwrap();
        let b = Forecaster::load(&runners[1].checkpoint_path(kind)).unwrap();
        worst = worst.max(a.params.max_abs_diff(&b.params));
    }
    check(
        bad.is_empty() && worst <= 1e-12,
        format!(
            "{} CSVs byte-identical{}, 7 checkpoints max |diff| {worst:.1e}",
            files.len() - bad.len(),
            if bad.is_empty() { String::new() } else { format!(" (differ: {})", bad.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 12

fn c12_airdelhi() -> Outcome {
    let Some(path) = std::env::var_os("AQCAST_AIRDELHI").filter(|p| std::path::Path::new(p).exists()) else {
        return Outcome::Skip("AirDelhi readings not present (set AQCAST_AIRDELHI)".into());
    };
    let out = tempfile::tempdir().unwrap();
    let base = std::env::var_os("AQCAST_AIRDELHI_CONFIG")
        .map(|p| std::fs::read_to_string(p).unwrap())
        .unwrap_or_else(|| "[ingest]\nauto_grid = true\n".into());
    let ov = vec![
        format!("--paths.readings={}", toml::Value::String(path.to_string_lossy().into())),
        format!("--paths.output_dir={}", toml::Value::String(out.path().display().to_string())),
        "--model.kind=GRU".into(),
    ];
    let mut r = Runner::new(RunConfig::from_toml(&base, &ov).unwrap());
    r.quiet = true;
    r.ingest().unwrap();
    r.impute().unwrap();
    r.train(&[ModelKind::Gru]).unwrap();
    let reports = r.evaluate(&[ModelKind::Gru]).unwrap();
    let v = r2(&reports, ModelKind::Gru, Pollutant::Pm25, Split::Test);
    check(v >= 0.80, format!("GRU PM25 test R² {v:.3}"))
}

#[test]
fn acceptance() {
    let mut ok = Vec::new();
    emit("");
    ok.push(criterion(1, "gradient integrity", c1_gradients));
    ok.push(criterion(2, "IDW oracle equivalence", c2_idw));
    ok.push(criterion(3, "ConvGRU/GRU equivalence", c3_convgru_gru));
    ok.push(criterion(4, "GCN normalization", c4_gcn_norm));
    ok.push(criterion(5, "GAT attention", c5_gat_attention));
    ok.push(criterion(6, "masked-loss contract", c6_masked_loss));

    let start = Instant::now();
    let fixture = common::fixture(10, 30, 10, 15, 1);
    ok.push(criterion(7, "leakage freedom", || c7_leakage(&fixture)));
    ok.push(criterion(8, "AQI categorization", c8_aqi));

    let run = catch_unwind(AssertUnwindSafe(|| gate_run(&fixture, start)));
    match &run {
        Ok(run) => {
            ok.push(criterion(9, "synthetic end-to-end gate", || c9_gate(run)));
            ok.push(criterion(10, "extended-coordinate gate", || c10_extended(run, &fixture)));
        }
        Err(_) => {
            ok.push(criterion(9, "synthetic end-to-end gate", || Outcome::Fail("training failed".into())));
            ok.push(criterion(10, "extended-coordinate gate", || Outcome::Fail("training failed".into())));
        }
    }
    ok.push(criterion(11, "determinism", c11_determinism));
    ok.push(criterion(12, "AirDelhi GRU (optional)", c12_airdelhi));

    let failed: Vec<usize> = ok.iter().enumerate().filter(|(_, &o)| !o).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
