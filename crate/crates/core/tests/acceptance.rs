//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde_json::Value;

use common::*;
use zonoverify_core::enclosure::{propagate, EncloseTrace, Provenance};
use zonoverify_core::engine::{expand, score_splits, BranchItem, SplitChoice, UnknownReason};
use zonoverify_core::network::{load_network, Activation, Layer, Network};
use zonoverify_core::oracle::{exact_box_bounds, exhaustive_reach_tiny, Reachability};
use zonoverify_core::refine::unsafe_input_constraints;
use zonoverify_core::setlib::{tighten_factor_bounds, ConstraintSet, FactorBox, Zonotope};
use zonoverify_core::specparse::{parse_vnnlib, parse_witness, write_witness};
use zonoverify_core::{verify, EngineConfig, Outcome};

type Criterion = (&'static str, fn() -> Report);

struct Report {
    passed: bool,
    detail: String,
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    (a - b).abs().max()
}

fn zono_err(z: &Zonotope, c: &[f64], g_rows: usize, g: &[f64]) -> f64 {
    let dc = (z.center() - DVector::from_row_slice(c)).abs().max();
    let expected = DMatrix::from_row_slice(g_rows, g.len() / g_rows, g);
    dc.max(max_abs_diff(z.generators(), &expected))
}

fn criterion_1() -> Report {
    let start = Instant::now();
    let net = worked_net();
    let root = Zonotope::from_interval(&worked_box());
    let trace = propagate(&net, &root).unwrap();
    let h1 = &trace.activations[0].pre.zono;
    let e_h1 = zono_err(h1, &[1.0, 0.0], 2, &[0.5, -0.5, 0.5, 0.5]);
    let e_y = zono_err(&trace.output.zono, &[1.0, 0.25], 2, &[0.5, -0.5, 0.0, 0.25, 0.25, 0.25]);
    let cons = unsafe_input_constraints(&trace, &y0_at_least(1.5), 2).unwrap();
    let e_c = max_abs_diff(&cons.c, &DMatrix::from_row_slice(1, 2, &[-0.5, 0.5]));
    let e_d = (cons.d[0] + 0.5).abs();
    let secs = start.elapsed().as_secs_f64();
    let worst = e_h1.max(e_y).max(e_c).max(e_d);
    Report {
        passed: worst <= 1e-12 && secs < 1.0,
        detail: format!("H1 err {e_h1:.1e}, Y err {e_y:.1e}, C err {e_c:.1e}, d err {e_d:.1e}, {secs:.3}s"),
    }
}

fn fuzz_config() -> EngineConfig {
    EngineConfig { max_subproblems: 10_000, timeout_seconds: 60.0, ..EngineConfig::default() }
}

fn criterion_2() -> Report {
    let start = Instant::now();
    let mut disagreements = Vec::new();
    let mut bad_witness = 0;
    let (mut verified, mut falsified, mut unknown) = (0, 0, 0);
    for seed in 0..200 {
        let inst = fuzz_instance(seed);
        let verdict = verify(&inst.net, &inst.task, &fuzz_config()).unwrap();
        let truth = exhaustive_reach_tiny(&inst.net, &inst.task.input_box, &inst.task.unsafe_sets[0]).unwrap();
        match (&verdict.outcome, &truth) {
            (Outcome::Verified, Reachability::UnsafeWitness(_)) => disagreements.push(seed),
            (Outcome::Falsified { .. }, Reachability::Safe) => disagreements.push(seed),
            _ => {}
        }
        match &verdict.outcome {
            Outcome::Verified => verified += 1,
            Outcome::Falsified { input, .. } => {
                falsified += 1;
                let y = inst.net.forward(input).unwrap();
                if !inst.task.input_box.contains(input, 1e-12) || !inst.task.unsafe_sets[0].contains(&y, 1e-6) {
                    bad_witness += 1;
                }
            }
            Outcome::Unknown(_) => unknown += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Report {
        passed: disagreements.is_empty() && bad_witness == 0 && secs < 180.0,
        detail: format!(
            "unsat {verified}, sat {falsified}, unknown {unknown}; disagreements {disagreements:?}, bad witnesses {bad_witness}, {secs:.1}s"
        ),
    }
}

fn criterion_3() -> Report {
    let start = Instant::now();
    let (mut with, mut without, mut both) = (0usize, 0usize, 0usize);
    for seed in 0..200 {
        let inst = fuzz_instance(seed);
        let on = verify(&inst.net, &inst.task, &fuzz_config()).unwrap();
        let off_cfg = EngineConfig { refine_on: false, ..fuzz_config() };
        let off = verify(&inst.net, &inst.task, &off_cfg).unwrap();
        if matches!(on.outcome, Outcome::Unknown(_)) || matches!(off.outcome, Outcome::Unknown(_)) {
            continue;
        }
        both += 1;
        with += on.stats.subproblems;
        without += off.stats.subproblems;
    }
    let ratio = if without == 0 { f64::NAN } else { with as f64 / without as f64 };
    let secs = start.elapsed().as_secs_f64();
    Report {
        passed: both > 0 && ratio <= 0.7,
        detail: format!(
            "{both} instances solved by both; mean subproblems {:.2} with refinement vs {:.2} without; ratio {ratio:.3}, {secs:.1}s",
            with as f64 / both.max(1) as f64,
            without as f64 / both.max(1) as f64
        ),
    }
}

fn random_constrained_box(rng: &mut rand_chacha::ChaCha8Rng) -> (ConstraintSet, FactorBox) {
    let q = rng.random_range(1..=6);
    let p = rng.random_range(1..=4);
    let lower = DVector::from_fn(q, |_, _| rng.random_range(-1.0..=0.5));
    let upper = DVector::from_fn(q, |i, _| rng.random_range(lower[i]..=1.0));
    let bx = FactorBox::new(lower, upper).unwrap();
    let c = DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..=1.0));
    let anchor = DVector::from_fn(q, |i, _| rng.random_range(bx.lower()[i]..=bx.upper()[i]));
    let d = DVector::from_fn(p, |i, _| {
        let at = (c.row(i) * &anchor)[0];
        at + rng.random_range(-0.3..=0.8)
    });
    (ConstraintSet::new(c, d).unwrap(), bx)
}

fn criterion_4() -> Report {
    let start = Instant::now();
    let mut rng = rng(4);
    let (mut unsound, mut non_monotone, mut empties) = (0, 0, 0);
    for _ in 0..300 {
        let (cons, bx) = random_constrained_box(&mut rng);
        let exact = exact_box_bounds(&cons, &bx).unwrap();
        let mut previous: Option<FactorBox> = Some(bx.clone());
        for iters in 1..=6 {
            let tight = tighten_factor_bounds(&cons, &bx, iters).unwrap();
            match (&exact, &tight) {
                (Some(e), Some(t)) if !e.is_subset_of(t, 1e-9) => unsound += 1,
                (Some(_), None) => unsound += 1,
                _ => {}
            }
            match (&previous, &tight) {
                (Some(p), Some(t)) if !t.is_subset_of(p, 1e-12) => non_monotone += 1,
                (None, Some(_)) => non_monotone += 1,
                _ => {}
            }
            previous = tight;
        }
        if exact.is_none() {
            empties += 1;
        }
    }
    let unit = FactorBox::unit(2);
    let worked = [
        ConstraintSet::new(DMatrix::from_row_slice(1, 2, &[-0.5, 0.5]), DVector::from_element(1, -0.5)).unwrap(),
        ConstraintSet::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, -1.0)).unwrap(),
    ];
    let worked_ok = worked.iter().all(|cons| {
        let t = tighten_factor_bounds(cons, &unit, 4).unwrap();
        let e = exact_box_bounds(cons, &unit).unwrap();
        matches!((t, e), (Some(t), Some(e)) if t.approx_eq(&e, 1e-12))
    });
    let secs = start.elapsed().as_secs_f64();
    Report {
        passed: unsound == 0 && non_monotone == 0 && worked_ok && secs < 30.0,
        detail: format!(
            "300 boxes ({empties} exactly empty): unsound {unsound}, non-monotone {non_monotone}, worked instances exact {worked_ok}, {secs:.2}s"
        ),
    }
}

/// Which source to scale when re-propagating under the frozen model.
#[derive(Clone, Copy, PartialEq)]
enum Source {
    Input(usize),
    Neuron(usize, usize),
}

/// Output F-radius with the slopes and error radii of `trace` held fixed and the radius of
/// `source` multiplied by `scale`.
fn frozen_radius(net: &Network, trace: &EncloseTrace, source: Source, scale: f64) -> f64 {
    let mut g = trace.input.zono.generators().clone();
    if let Source::Input(j) = source {
        g.column_mut(j).scale_mut(scale);
    }
    let mut records = trace.activations.iter();
    for (k, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Linear { weights, .. } => g = weights * g,
            Layer::Activation { .. } => {
                let rec = records.next().unwrap();
                assert_eq!(rec.layer, k);
                for (i, lambda) in rec.slopes.iter().enumerate() {
                    g.row_mut(i).scale_mut(*lambda);
                }
                let rad = rec.error_radius();
                for (i, r) in rad.iter().enumerate() {
                    if *r > 0.0 {
                        let s = if source == Source::Neuron(k, i) { scale } else { 1.0 };
                        let last = g.ncols();
                        g = g.insert_column(last, 0.0);
                        g[(i, last)] = r * s;
                    }
                }
            }
        }
    }
    g.norm()
}

fn random_smooth_net(rng: &mut rand_chacha::ChaCha8Rng) -> Network {
    let n0 = rng.random_range(2..=3);
    let w = rng.random_range(2..=6);
    let func = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Sigmoid };
    Network::new(vec![
        Layer::Linear {
            weights: DMatrix::from_fn(w, n0, |_, _| rng.random_range(-1.0..=1.0)),
            bias: DVector::from_fn(w, |_, _| rng.random_range(-0.5..=0.5)),
        },
        Layer::Activation { func, width: w },
        Layer::Linear {
            weights: DMatrix::from_fn(2, w, |_, _| rng.random_range(-1.0..=1.0)),
            bias: DVector::zeros(2),
        },
    ])
    .unwrap()
}

fn criterion_5() -> Report {
    let start = Instant::now();
    let mut rng = rng(5);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut frozen_mismatch = 0;
    for t in 0..100 {
        let net = if t % 4 == 3 { random_smooth_net(&mut rng) } else { random_relu_net(&mut rng) };
        let bx = random_box(&mut rng, net.input_dim());
        let trace = propagate(&net, &Zonotope::from_interval(&bx)).unwrap();
        let base = frozen_radius(&net, &trace, Source::Input(0), 1.0);
        if (base - trace.output.zono.generators().norm()).abs() > 1e-12 * base.max(1.0) {
            frozen_mismatch += 1;
        }
        let scores = score_splits(&trace);
        let mut sources: Vec<(Source, f64)> =
            scores.input.iter().enumerate().map(|(i, s)| (Source::Input(i), *s)).collect();
        sources.extend(scores.neurons.iter().map(|((k, i), s)| (Source::Neuron(*k, *i), *s)));
        for (source, score) in sources {
            // Step sized from the source's share of F²: small shares need wide steps to beat
            // roundoff, and their truncation error shrinks with the share.
            let share = (base * base - frozen_radius(&net, &trace, source, 0.0).powi(2)).max(0.0) / (base * base).max(1e-300);
            let h = (1e-4 / share.sqrt().max(1e-300)).min(0.5);
            let fd = (frozen_radius(&net, &trace, source, 1.0 + h) - frozen_radius(&net, &trace, source, 1.0 - h)) / (2.0 * h);
            let rel = (fd - score).abs() / fd.abs().max(score.abs()).max(1e-12);
            if fd.abs().max(score.abs()) > 1e-12 {
                worst = worst.max(rel);
            }
            checked += 1;
        }
    }
    let trace = propagate(&worked_net(), &Zonotope::from_interval(&worked_box())).unwrap();
    let scores = score_splits(&trace);
    let ex = [scores.input[0], scores.input[1], scores.neurons.iter().map(|(_, s)| *s).fold(0.0, f64::max)];
    let expected = [0.3769, 0.3769, 0.0754];
    let ex_ok = ex.iter().zip(expected).all(|(a, b)| (a - b).abs() < 5e-5);
    let best = scores.best().map(|(c, _)| c);
    let tie_ok = best == Some(SplitChoice::InputDim(0));
    let err_col = trace.output.column_of(Provenance::NeuronError { layer: 1, neuron: 1 });
    let secs = start.elapsed().as_secs_f64();
    Report {
        passed: worst <= 1e-6 && frozen_mismatch == 0 && ex_ok && tie_ok && err_col == Some(2),
        detail: format!(
            "{checked} scores on 100 traces, worst relative FD error {worst:.1e}, frozen replay mismatches {frozen_mismatch}; worked-example scores ({:.4}, {:.4}, {:.4}), best {best:?}, {secs:.2}s",
            ex[0], ex[1], ex[2]
        ),
    }
}

fn criterion_6() -> Report {
    let start = Instant::now();
    let mut mismatched = Vec::new();
    for seed in 0..50 {
        let inst = fuzz_instance(seed);
        let runs: Vec<_> = [1, 7, 128]
            .into_iter()
            .map(|batch| {
                let cfg = EngineConfig { batch_size: batch, timeout_seconds: 600.0, ..fuzz_config() };
                verify(&inst.net, &inst.task, &cfg).unwrap()
            })
            .collect();
        let same = runs.windows(2).all(|w| w[0].outcome == w[1].outcome && w[0].stats.subproblems == w[1].stats.subproblems);
        let timed_out = runs.iter().any(|r| r.outcome == Outcome::Unknown(UnknownReason::Timeout));
        if !same || timed_out {
            mismatched.push(seed);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Report { passed: mismatched.is_empty(), detail: format!("50 instances, mismatches {mismatched:?}, {secs:.1}s") }
}

fn criterion_7() -> Report {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest.as_array().unwrap();
    let mut wrong = Vec::new();
    for entry in entries {
        let file = entry["file"].as_str().unwrap();
        let path = dir.join(file);
        let expect_ok = entry["expect"] == "ok";
        let dims: Vec<usize> =
            entry["dims"].as_array().map(|d| d.iter().map(|v| v.as_u64().unwrap() as usize).collect()).unwrap_or_default();
        let result: Result<(), String> = match entry["kind"].as_str().unwrap() {
            "network" => load_network(&path).map_err(|e| e.to_string()).and_then(|net| {
                if (net.input_dim(), net.output_dim()) == (dims[0], dims[1]) {
                    Ok(())
                } else {
                    Err(format!("dims {} -> {}", net.input_dim(), net.output_dim()))
                }
            }),
            "vnnlib" => {
                let text = std::fs::read_to_string(&path).unwrap();
                parse_vnnlib(&text, dims[0], dims[1]).map_err(|e| e.to_string()).and_then(|task| {
                    match entry["unsafe_sets"].as_u64() {
                        Some(n) if n as usize != task.unsafe_sets.len() => {
                            Err(format!("{} unsafe sets", task.unsafe_sets.len()))
                        }
                        _ => Ok(()),
                    }
                })
            }
            "witness" => {
                let text = std::fs::read_to_string(&path).unwrap();
                parse_witness(&text).map_err(|e| e.to_string()).and_then(|(x, y)| {
                    let again = parse_witness(&write_witness(&x, &y)).map_err(|e| e.to_string())?;
                    if again == (x.clone(), y.clone()) && x.len() == dims[0] && y.len() == dims[1] {
                        Ok(())
                    } else {
                        Err("round trip changed the witness".into())
                    }
                })
            }
            other => Err(format!("unknown kind {other}")),
        };
        let ok = match (&result, expect_ok) {
            (Ok(()), true) => true,
            (Err(msg), false) => entry["error"].as_str().is_none_or(|want| msg.contains(want)),
            _ => false,
        };
        if !ok {
            wrong.push(format!("{file}: {result:?}"));
        }
    }
    // Witness round trip on engine output and random vectors.
    let net = worked_net();
    let task = zonoverify_core::VerificationTask::new(worked_box(), vec![y0_at_least(1.5)]).unwrap();
    let verdict = verify(&net, &task, &EngineConfig::default()).unwrap();
    let mut round_trips = 0;
    if let Outcome::Falsified { input, output, .. } = &verdict.outcome {
        if parse_witness(&write_witness(input, output)).ok() == Some((input.clone(), output.clone())) {
            round_trips += 1;
        }
    }
    let mut rng = rng(7);
    for _ in 0..100 {
        let x = DVector::from_fn(rng.random_range(1..=5), |_, _| rng.random_range(-1e3..1e3));
        let y = DVector::from_fn(rng.random_range(1..=5), |_, _| rng.random::<f64>() * 10f64.powi(rng.random_range(-8..8)));
        if parse_witness(&write_witness(&x, &y)).ok() == Some((x, y)) {
            round_trips += 1;
        }
    }
    Report {
        passed: entries.len() >= 10 && wrong.is_empty() && round_trips == 101,
        detail: format!("{} fixtures, {} wrong {wrong:?}; witness round trips {round_trips}/101", entries.len(), wrong.len()),
    }
}

fn criterion_8() -> Report {
    let start = Instant::now();
    let mut escapes = 0usize;
    let mut short = Vec::new();
    let mut total = 0usize;
    let cfg = EngineConfig::default();
    for seed in 0..100 {
        let inst = reachable_instance(seed);
        let bx = &inst.task.input_box;
        let unsafe_set = &inst.task.unsafe_sets[0];
        let root = BranchItem { factor_box: FactorBox::unit(bx.dim()), unsafe_index: 0, depth: 0 };
        let children: Vec<FactorBox> = expand(&inst.net, &inst.task, &root, &cfg)
            .unwrap()
            .unwrap_or_default()
            .into_iter()
            .map(|c| c.factor_box)
            .collect();
        let (mid, rad) = (bx.midpoint(), bx.radius());
        let mut rng = rng(800 + seed);
        let mut found = 0;
        for _ in 0..2_000_000 {
            if found == 10_000 {
                break;
            }
            let x = sample_in(&mut rng, bx);
            if !unsafe_set.contains(&inst.net.forward(&x).unwrap(), 0.0) {
                continue;
            }
            found += 1;
            let beta = (&x - &mid).component_div(&rad);
            if !children.iter().any(|c| c.contains(&beta, 1e-9)) {
                escapes += 1;
            }
        }
        if found < 10_000 {
            short.push(seed);
        }
        total += found;
    }
    let secs = start.elapsed().as_secs_f64();
    Report {
        passed: escapes == 0 && short.is_empty(),
        detail: format!("{total} unsafe samples over 100 instances, escapes {escapes}, short instances {short:?}, {secs:.1}s"),
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("worked example exactness", criterion_1),
        ("soundness fuzz", criterion_2),
        ("refinement ablation", criterion_3),
        ("factor bound tightening", criterion_4),
        ("heuristic consistency", criterion_5),
        ("batch invariance", criterion_6),
        ("parser fixtures", criterion_7),
        ("containment", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string()) {
            continue;
        }
        let report = run();
        let word = if report.passed { "PASS" } else { "FAIL" };
        println!("criterion {n} [{name}]: {word}: {}", report.detail);
        if !report.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
