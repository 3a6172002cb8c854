//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmpsched::config::{parse_config, RunConfig};
use tmpsched::costs::{build_cost_vectors, BlockCosts, CostVectors, HardwareProfile};
use tmpsched::model::{ModelGraph, ModelSpec};
use tmpsched::planner::{
    brute_force, edge_costs, memory_usage, objective, rank_correlation, solve, Strategy, DEFAULT_BRUTE_FORCE_CAP,
};
use tmpsched::presets::{gpt_spec, nvlink_3090, pcie_3090};
use tmpsched::report::{cmd_plan, cmd_simulate, verify_numerics, ELISION_TOLERANCE, IDENTITY_TOLERANCE};
use tmpsched::schedule::{schedule, Variant};
use tmpsched::sim::{breakdown, simulate_variant, SimOptions};

type Check = Result<String, String>;

fn small_spec(layers: u32) -> ModelSpec {
    ModelSpec {
        hidden_size: 64,
        num_layers: layers,
        seq_len: 16,
        attention_heads: 4,
        global_batch: 4,
        bytes_per_element: 2,
        recompute_enabled: true,
    }
}

/// Random per-block costs on the block graph of a small model.
/// `gen` fills one block at one degree index.
fn random_instance(
    rng: &mut ChaCha8Rng,
    layers: u32,
    mut gen: impl FnMut(&mut ChaCha8Rng, &mut BlockCosts, usize),
) -> (ModelGraph, CostVectors) {
    let g = ModelGraph::from_spec(&small_spec(layers)).unwrap();
    let p = 3;
    let k = g.len();
    let blocks = (0..k)
        .map(|_| {
            let mut b = BlockCosts::zeros(p);
            for j in 0..p {
                gen(rng, &mut b, j);
            }
            b
        })
        .collect();
    let mut costs = CostVectors {
        degrees: vec![1, 2, 4],
        recompute: true,
        blocks,
        resharding: vec![vec![vec![0.0; p]; p]; k - 1],
    };
    for m in &mut costs.resharding {
        for (i, row) in m.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                if i != j {
                    *x = rng.gen_range(0.0..1.0);
                }
            }
        }
    }
    (g, costs)
}

fn criterion_1() -> Check {
    let t = Instant::now();
    let r = verify_numerics(7, 100);
    let secs = t.elapsed().as_secs_f64();
    let worst = r
        .identity
        .iter()
        .map(|row| row.max_fd_deviation.max(row.max_autodiff_deviation))
        .fold(0.0, f64::max);
    let msg = format!(
        "identity max dev {worst:.2e} (< {IDENTITY_TOLERANCE:e}), elision max dev {:.2e} (< {ELISION_TOLERANCE:e}), {secs:.2} s",
        r.max_elision_deviation
    );
    if r.passed && r.identity.len() == 4 && secs < 10.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_2() -> Check {
    let mut counts = Vec::new();
    for layers in 1..=8 {
        let g = ModelGraph::from_spec(&small_spec(layers)).unwrap();
        let default = schedule(Variant::Default, &g).logical_comm_count();
        let oases = schedule(Variant::Oases, &g).logical_comm_count();
        if 3 * oases != 2 * default {
            return Err(format!("L={layers}: Default {default}, Oases {oases}"));
        }
        counts.push(format!("{default}->{oases}"));
    }
    Ok(format!("L=1..8 comm counts {}", counts.join(" ")))
}

fn criterion_3() -> Check {
    let opts = SimOptions::default();
    let mut violations = Vec::new();
    let tables = 600;
    for seed in 0..tables {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = rng.gen_range(1..5);
        let (g, costs) = random_instance(&mut rng, layers, |rng, b, j| {
            b.d_fwd[j] = rng.gen_range(0.0..2.0);
            b.d_bwd[j] = b.d_fwd[j] * rng.gen_range(1.0..3.5);
            b.c_fwd[j] = rng.gen_range(0.0..3.0);
            b.c_bwd[j] = b.c_fwd[j];
        });
        let k = g.len();
        let strategy = if seed % 2 == 0 {
            Strategy::uniform(2, k)
        } else {
            Strategy::new((0..k).map(|_| [1, 2, 4][rng.gen_range(0..3)]).collect())
        };
        let results: Vec<_> = Variant::ALL
            .iter()
            .map(|&v| simulate_variant(v, &g, &costs, &strategy, &opts).unwrap())
            .collect();
        let tol = 1e-12 * results[0].makespan;
        for w in results.windows(2) {
            if w[1].makespan > w[0].makespan + tol {
                violations.push(format!("seed {seed}: {} > {}", w[1].makespan, w[0].makespan));
            }
        }
        for r in &results {
            let bound = r.compute_time().max(r.comm_time());
            if r.makespan + 1e-12 * bound < bound {
                violations.push(format!("seed {seed}: makespan {} below bound {bound}", r.makespan));
            }
        }
    }
    if violations.is_empty() {
        Ok(format!("{tables} tables, zero violations"))
    } else {
        Err(format!("{} violations, first: {}", violations.len(), violations[0]))
    }
}

fn criterion_4() -> Check {
    let profile = pcie_3090();
    let mut parts = Vec::new();
    let mut ok = true;
    for h in [3072, 2048] {
        let spec = gpt_spec(h);
        let g = ModelGraph::from_spec(&spec).unwrap();
        let costs = build_cost_vectors(&g, &spec, &profile).unwrap();
        let s = Strategy::uniform(4, g.len());
        let frac = |v| breakdown(&simulate_variant(v, &g, &costs, &s, &SimOptions::default()).unwrap()).unwrap().comm_fraction;
        let (d, o) = (frac(Variant::Default), frac(Variant::Oases));
        ok &= (0.55..=0.75).contains(&d) && o < d;
        parts.push(format!("H={h}: Default {d:.3}, Oases {o:.3}"));
    }
    let msg = parts.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_5() -> Check {
    let opts = SimOptions::default();
    let mut exact = 0;
    let mut seed = 0u64;
    // comm-bound and compute-bound regimes, alternating
    while exact < 100 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let comm_bound = seed % 2 == 0;
        let layers = rng.gen_range(1..5);
        let (g, costs) = random_instance(&mut rng, layers, |rng, b, j| {
            b.d_fwd[j] = rng.gen_range(0.1..1.0);
            b.d_bwd[j] = 3.0 * b.d_fwd[j];
            b.c_fwd[j] = if comm_bound { rng.gen_range(3.5..6.0) } else { rng.gen_range(0.0..0.1) };
            b.c_bwd[j] = b.c_fwd[j];
        });
        let degree = [1, 2, 4][rng.gen_range(0..3)];
        let s = Strategy::uniform(degree, g.len());
        let edges = edge_costs(&costs).unwrap();
        let predicted = objective(&costs, &edges, &s).unwrap();
        let simulated = simulate_variant(Variant::Oases, &g, &costs, &s, &opts).unwrap().makespan;
        if (predicted - simulated).abs() > 1e-12 * simulated {
            return Err(format!(
                "regime instance {seed} ({}): predicted {predicted}, simulated {simulated}",
                if comm_bound { "comm-bound" } else { "compute-bound" }
            ));
        }
        exact += 1;
        seed += 1;
    }
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
        let layers = rng.gen_range(1..5);
        let (g, costs) = random_instance(&mut rng, layers, |rng, b, j| {
            b.d_fwd[j] = rng.gen_range(0.1..1.0);
            b.d_bwd[j] = 3.0 * b.d_fwd[j];
            b.c_fwd[j] = rng.gen_range(0.0..3.0);
            b.c_bwd[j] = b.c_fwd[j];
        });
        let s = Strategy::new((0..g.len()).map(|_| [1, 2, 4][rng.gen_range(0..3)]).collect());
        let edges = edge_costs(&costs).unwrap();
        let predicted = objective(&costs, &edges, &s).unwrap();
        let simulated = simulate_variant(Variant::Oases, &g, &costs, &s, &opts).unwrap().makespan;
        worst = worst.max((predicted - simulated).abs() / simulated);
    }
    let msg = format!("{exact} regime instances exact (1e-12 relative), mixed max relative error {:.2}%", 100.0 * worst);
    if worst <= 0.10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn planner_table(rng: &mut ChaCha8Rng, k: usize, p: usize) -> CostVectors {
    let degrees: Vec<u32> = (0..p).map(|j| 1 << j).collect();
    let blocks = (0..k)
        .map(|_| {
            let mut b = BlockCosts::zeros(p);
            for j in 0..p {
                b.d_fwd[j] = rng.gen_range(0.1..2.0);
                b.d_bwd[j] = b.d_fwd[j] * rng.gen_range(1.0..3.5);
                b.c_fwd[j] = if j == 0 { 0.0 } else { rng.gen_range(0.0..3.0) };
                b.c_bwd[j] = b.c_fwd[j];
                b.m_param[j] = rng.gen_range(1.0..100.0);
                b.m_saved[j] = rng.gen_range(1.0..50.0);
                b.m_runtime[j] = rng.gen_range(1.0..80.0);
            }
            b
        })
        .collect();
    let mut costs = CostVectors { degrees, recompute: true, blocks, resharding: vec![vec![vec![0.0; p]; p]; k - 1] };
    for m in &mut costs.resharding {
        for (i, row) in m.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                if i != j {
                    *x = rng.gen_range(0.0..1.0);
                }
            }
        }
    }
    costs
}

fn criterion_6() -> Check {
    let t = Instant::now();
    let mut instances = 0;
    let mut seed = 0u64;
    while instances < 200 {
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + seed);
        seed += 1;
        let k = rng.gen_range(2..=6);
        let p = rng.gen_range(1..=3);
        let costs = planner_table(&mut rng, k, p);
        let edges = edge_costs(&costs).unwrap();
        let usages: Vec<f64> = (0..p)
            .map(|j| memory_usage(&costs, &Strategy::uniform(costs.degrees[j], k)).unwrap())
            .collect();
        let lo = usages.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = usages.iter().copied().fold(0.0, f64::max);
        let budget = lo * 0.8 + rng.gen_range(0.0..1.0) * (hi * 1.1 - lo * 0.8);
        let Ok(oracle) = brute_force(&costs, &edges, budget, DEFAULT_BRUTE_FORCE_CAP) else { continue };
        let plan = solve(&costs, &edges, budget, budget / 1024.0)
            .map_err(|e| format!("instance {seed}: solve failed ({e}) where brute force found a strategy"))?;
        let (a, b) = (plan.predicted_time, oracle.result.predicted_time);
        if plan.strategy != oracle.result.strategy && (a - b).abs() > 1e-12 * b {
            return Err(format!(
                "instance {seed}: solve {} = {a}, brute force {} = {b}",
                plan.strategy, oracle.result.strategy
            ));
        }
        instances += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    let msg = format!("{instances} feasible instances match brute force, {secs:.2} s");
    if secs < 60.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7() -> Check {
    let spec = ModelSpec {
        hidden_size: 2048,
        num_layers: 3,
        seq_len: 1024,
        attention_heads: 32,
        global_batch: 16,
        bytes_per_element: 2,
        recompute_enabled: true,
    };
    let g = ModelGraph::from_spec(&spec).unwrap();
    let costs = build_cost_vectors(&g, &spec, &pcie_3090()).unwrap();
    let edges = edge_costs(&costs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let strategies: Vec<Strategy> = (0..30)
        .map(|_| Strategy::new((0..g.len()).map(|_| costs.degrees[rng.gen_range(0..costs.degrees.len())]).collect()))
        .collect();
    let makespans: Vec<f64> = strategies
        .iter()
        .map(|s| simulate_variant(Variant::Oases, &g, &costs, s, &SimOptions::default()).unwrap().makespan)
        .collect();
    let rho = rank_correlation(&costs, &edges, &strategies, &makespans).map_err(|e| e.to_string())?;
    let msg = format!("Spearman {rho:.4} over 30 strategies on {} blocks", g.len());
    if rho >= 0.9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// NVLink pairs; groups of four or eight span hosts over a high-latency
/// network.
fn two_tier() -> HardwareProfile {
    let mut p = nvlink_3090();
    p.name = Some("two-tier".into());
    p.latency_by_group.insert(4, 5e-3);
    p.latency_by_group.insert(8, 7.5e-3);
    p
}

fn criterion_8() -> Check {
    let spec = gpt_spec(2048);
    let g = ModelGraph::from_spec(&spec).unwrap();
    let costs = build_cost_vectors(&g, &spec, &two_tier()).unwrap();
    let edges = edge_costs(&costs).unwrap();
    let budget = 11.0 * (1u64 << 30) as f64;
    let plan = solve(&costs, &edges, budget, (1u64 << 20) as f64).map_err(|e| e.to_string())?;
    let opts = SimOptions::default();
    let planned = simulate_variant(Variant::Oases, &g, &costs, &plan.strategy, &opts).unwrap().makespan;
    let mut best_uniform = f64::INFINITY;
    for &d in &costs.degrees {
        let s = Strategy::uniform(d, g.len());
        if memory_usage(&costs, &s).unwrap() < budget {
            best_uniform = best_uniform.min(simulate_variant(Variant::Oases, &g, &costs, &s, &opts).unwrap().makespan);
        }
    }
    let runs = plan.strategy.runs();
    let shape = runs.len() == 2 && runs[0].0 == 2 && runs[1].0 == 4;
    let msg = format!("plan {} simulates {planned:.4} s, best feasible uniform {best_uniform:.4} s", plan.rendered);
    if shape && planned < best_uniform {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn config(extra: &str) -> RunConfig {
    parse_config(&format!(
        r#"{{
        "model": {{"hidden_size": 2048, "num_layers": 24, "seq_len": 1024, "attention_heads": 32,
                  "global_batch": 16, "bytes_per_element": 2, "recompute_enabled": true}},
        "hardware": "pcie-3090", "seed": 11{extra}
    }}"#
    ))
    .unwrap()
}

fn criterion_9(dir: &Path) -> Check {
    let cfg = config("");
    let t = Instant::now();
    let plan = cmd_plan(&cfg, dir).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let msg = format!("48 blocks, p=3 planned in {secs:.3} s (solver {:.1} ms)", plan.solve_time_ms);
    if plan.strategy.len() == 48 && secs < 5.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn plan_bytes(dir: &Path) -> Vec<u8> {
    let text = fs::read_to_string(dir.join("plan.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["solve_time_ms"] = serde_json::json!(0.0);
    serde_json::to_vec(&v).unwrap()
}

fn criterion_10(dir: &Path) -> Check {
    let cfg = config("");
    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.join(n)).collect();
    for out in &runs {
        cmd_simulate(&cfg, out).map_err(|e| e.to_string())?;
    }
    let mut compared = 0;
    for v in Variant::ALL {
        for suffix in ["result.json", "trace.json"] {
            let name = format!("{v}.{suffix}");
            if fs::read(runs[0].join(&name)).unwrap() != fs::read(runs[1].join(&name)).unwrap() {
                return Err(format!("{name} differs between runs"));
            }
            compared += 1;
        }
    }
    if plan_bytes(&runs[0]) != plan_bytes(&runs[1]) {
        return Err("plan.json differs between runs".into());
    }
    Ok(format!("{compared} simulation artifacts and the plan are byte-identical"))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let checks: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("gradient identities", Box::new(criterion_1)),
        ("communication elision count", Box::new(criterion_2)),
        ("schedule dominance", Box::new(criterion_3)),
        ("communication breakdown range", Box::new(criterion_4)),
        ("cost model fidelity", Box::new(criterion_5)),
        ("planner optimality", Box::new(criterion_6)),
        ("rank correlation", Box::new(criterion_7)),
        ("plan shape", Box::new(criterion_8)),
        ("solver latency", Box::new(|| criterion_9(&dir.path().join("plan")))),
        ("determinism", Box::new(|| criterion_10(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("[PASS] {:>2}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
