//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::time::Instant;

use cocmt::heads::{assignment_cost, hungarian};
use cocmt::numerics::Rng;
use cocmt::sim::{
    ego_only, eval_seeds, gen_scenario, late_fusion_baseline, run_pipeline, smoothed, train_toy, Emulator, Model,
    PipelineOptions, SimConfig, Supervision, TrainConfig, WireMode,
};
use cocmt::verify::{self, CheckResult};
use cocmt::wire::{bandwidth_bits, format_mb};
use rayon::prelude::*;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: usize, name: &'static str, passed: bool, detail: String, t: Instant) {
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("{tag} [{id:>2}] {name}: {detail} ({:.1}s)", t.elapsed().as_secs_f64());
    lines.push(Line { id, name, passed, detail });
}

fn checks(results: &[CheckResult]) -> (bool, String) {
    let passed = results.iter().all(|r| r.passed);
    let detail = results.iter().map(|r| r.line()).collect::<Vec<_>>().join("; ");
    (passed, detail)
}

fn bandwidth() -> (bool, String) {
    let bits = bandwidth_bits(50, 256, 1);
    let shown = format_mb(bits);
    let vs_feature_map = 134.2e6 / bits as f64;
    (
        bits == 416_000 && shown == "0.416 Mb",
        format!("{bits} bits = {shown}, {vs_feature_map:.1}x below a 134.2 Mb feature map"),
    )
}

fn sweep() -> (bool, String) {
    let bits: Vec<u64> = (20..=120).step_by(10).map(|k| bandwidth_bits(k, 256, 1)).collect();
    let linear = bits.windows(2).all(|w| w[1] - w[0] == 10 * 260 * 32) && bits[0] == 20 * 260 * 32;
    let top = format_mb(*bits.last().unwrap());
    (linear && top == "0.998 Mb", format!("{} rows, linear {linear}, k=120 → {top}", bits.len()))
}

/// Exhaustive minimum over all injective row→column maps, in exact integer arithmetic.
fn exhaustive_min(cost: &[i64], rows: usize, cols: usize) -> i64 {
    fn go(r: usize, rows: usize, cols: usize, cost: &[i64], used: &mut [bool]) -> i64 {
        if r == rows {
            return 0;
        }
        let mut best = i64::MAX;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[r * cols + c] + go(r + 1, rows, cols, cost, used));
                used[c] = false;
            }
        }
        best
    }
    go(0, rows, cols, cost, &mut vec![false; cols])
}

fn hungarian_exact() -> (bool, String) {
    let mut rng = Rng::new(4242);
    let mut worst = String::new();
    let mut ok = 0;
    for trial in 0..500 {
        let n = 1 + rng.index(7);
        let m = n + rng.index(8 - n);
        let int_cost: Vec<i64> = (0..n * m).map(|_| rng.index(1000) as i64 - 500).collect();
        let cost: Vec<f64> = int_cost.iter().map(|&c| c as f64).collect();
        let pairs = hungarian(&cost, n, m);
        let got = assignment_cost(&cost, m, &pairs);
        let best = exhaustive_min(&int_cost, n, m);
        if pairs.len() == n && got == best as f64 {
            ok += 1;
        } else if worst.is_empty() {
            worst = format!(", trial {trial}: {got} vs {best}");
        }
    }
    (ok == 500, format!("{ok}/500 optimal{worst}"))
}

fn wire_integrity() -> (bool, String) {
    let (rt_ok, rt) = checks(&[verify::check_wire(0, 1000)]);
    let cfg = SimConfig::default();
    let emu = Emulator::new(cfg.emulator);
    let model = Model::init(1, &cfg.model);
    let wired = PipelineOptions::from_config(&cfg);
    let bypass = PipelineOptions {
        wire: WireMode::Bypass,
        ..wired
    };
    let same = (0..20u64).all(|s| {
        let scn = gen_scenario(700_000 + s, &cfg.scenario).unwrap();
        run_pipeline(&scn, &emu, &model, &cfg, &wired).unwrap()
            == run_pipeline(&scn, &emu, &model, &cfg, &bypass).unwrap()
    });
    (rt_ok && same, format!("{rt}; wire vs bypass identical on 20 scenes: {same}"))
}

fn mean_ap(seeds: &[u64], f: impl Fn(u64) -> f64 + Sync) -> f64 {
    seeds.par_iter().map(|&s| f(s)).sum::<f64>() / seeds.len() as f64
}

fn main() {
    let mut lines = Vec::new();
    let total = Instant::now();

    let t = Instant::now();
    let (p, d) = bandwidth();
    report(&mut lines, 1, "bandwidth exactness", p, d, t);

    let t = Instant::now();
    let (p, d) = sweep();
    report(&mut lines, 2, "bandwidth sweep", p, d, t);

    let t = Instant::now();
    let (p, d) = checks(&[verify::check_mask_oracles(3, 1000)]);
    report(&mut lines, 3, "mask oracle equivalence", p, d, t);

    let t = Instant::now();
    let (p, d) = checks(&[verify::check_masked_key_non_influence(4, 200, verify::Fault::None)]);
    report(&mut lines, 4, "masked-key non-influence", p, d, t);

    let t = Instant::now();
    let (p, d) = checks(&[
        verify::check_padding_invariance(5, 100),
        verify::check_agent_permutation(5, 100),
        verify::check_slot_permutation(5, 100),
    ]);
    report(&mut lines, 5, "padding invariance and permutation equivariance", p, d, t);

    let t = Instant::now();
    let (p, d) = checks(&[verify::check_unmasked_degeneration(6, 50)]);
    report(&mut lines, 6, "unmasked degeneration", p, d, t);

    let t = Instant::now();
    let (p, d) = checks(&[verify::check_gradients(7)]);
    report(&mut lines, 7, "gradient verification", p, d, t);

    let t = Instant::now();
    let (p, d) = hungarian_exact();
    report(&mut lines, 8, "Hungarian correctness", p, d, t);

    let t = Instant::now();
    let (p, d) = checks(&[verify::check_iou(9, 200, 1_000_000)]);
    report(&mut lines, 9, "rotated BEV IoU", p, d, t);

    let t = Instant::now();
    let (p, d) = wire_integrity();
    report(&mut lines, 10, "wire integrity", p, d, t);

    // trained desk-scale model shared by 11 and 13
    let t = Instant::now();
    let cfg = SimConfig::default();
    let emu = Emulator::new(cfg.emulator);
    let model = train_toy(&cfg, &TrainConfig::default()).expect("default training converges").model;
    let seeds = eval_seeds(20);
    let scene = |s: u64| gen_scenario(s, &cfg.scenario).unwrap();
    let opts = PipelineOptions::from_config(&cfg);
    let coop = mean_ap(&seeds, |s| run_pipeline(&scene(s), &emu, &model, &cfg, &opts).unwrap().eval.ap50);
    let ego = mean_ap(&seeds, |s| ego_only(&scene(s), &emu, &model, &cfg).unwrap().eval.ap50);
    let late = mean_ap(&seeds, |s| late_fusion_baseline(&scene(s), &emu, &model, &cfg).unwrap().eval.ap50);
    report(
        &mut lines,
        11,
        "collaboration payoff",
        coop - ego >= 0.15 && coop >= late,
        format!("coop {coop:.4}, ego-only {ego:.4}, late fusion {late:.4}"),
        t,
    );

    let t = Instant::now();
    let quarter = |k: usize| k.div_ceil(4);
    let small_ratio = {
        let low = PipelineOptions { k: quarter(cfg.k), ..opts };
        let ap = mean_ap(&seeds, |s| run_pipeline(&scene(s), &emu, &model, &cfg, &low).unwrap().eval.ap50);
        ap / coop
    };
    let mut wide = cfg;
    wide.k = 32;
    let wide_model = train_toy(&wide, &TrainConfig::default()).expect("k=32 training converges").model;
    let wide_opts = PipelineOptions::from_config(&wide);
    let at_train = mean_ap(&seeds, |s| run_pipeline(&scene(s), &emu, &wide_model, &wide, &wide_opts).unwrap().eval.ap50);
    let low = PipelineOptions { k: quarter(wide.k), ..wide_opts };
    let at_quarter = mean_ap(&seeds, |s| run_pipeline(&scene(s), &emu, &wide_model, &wide, &low).unwrap().eval.ap50);
    report(
        &mut lines,
        12,
        "Top-k robustness",
        at_quarter >= 0.95 * at_train,
        format!(
            "k_train 32: AP50 {at_train:.4} → k 8: {at_quarter:.4} (ratio {:.3}); k_train 8 → k 2 ratio {small_ratio:.3}",
            at_quarter / at_train
        ),
        t,
    );

    let t = Instant::now();
    let mut open = cfg;
    open.mask.tau = f64::INFINITY;
    let per_seed: Vec<(u64, f64)> = seeds
        .par_iter()
        .map(|&s| (s, run_pipeline(&scene(s), &emu, &model, &open, &opts).unwrap().eval.ap50))
        .collect();
    let inf = per_seed.iter().map(|x| x.1).sum::<f64>() / seeds.len() as f64;
    let csv: String = per_seed.iter().map(|(s, ap)| format!("{s},{ap:.6}\n")).collect();
    let csv_path = std::env::temp_dir().join("acceptance_tau_inf_seeds.csv");
    let _ = std::fs::write(&csv_path, format!("seed,ap50\n{csv}"));
    report(
        &mut lines,
        13,
        "PCM directional ablation",
        inf <= coop,
        format!("tau inf {inf:.4} vs tau 10 {coop:.4}, margin {:.4}; seeds in {}", coop - inf, csv_path.display()),
        t,
    );

    let t = Instant::now();
    let outcomes: Vec<(f64, f64)> = (0..5u64)
        .map(|seed| {
            let run = |supervision| {
                let tc = TrainConfig {
                    steps: 2000,
                    seed,
                    supervision,
                    val_every: 0,
                    ..TrainConfig::default()
                };
                let r = train_toy(&cfg, &tc).expect("training converges");
                *smoothed(&r.final_layer_losses(), tc.smoothing_window).last().unwrap()
            };
            (run(Supervision::AllLayers), run(Supervision::FinalLayer))
        })
        .collect();
    let wins = outcomes.iter().filter(|(a, f)| a <= f).count();
    let pairs: Vec<String> = outcomes.iter().map(|(a, f)| format!("{a:.3}/{f:.3}")).collect();
    report(
        &mut lines,
        14,
        "SDS directional ablation",
        wins >= 4,
        format!("all-layers ≤ final-only on {wins}/5 seeds ({})", pairs.join(", ")),
        t,
    );

    let failed: Vec<String> = lines.iter().filter(|l| !l.passed).map(|l| format!("{} {}", l.id, l.name)).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        lines.len() - failed.len(),
        lines.len(),
        total.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        for l in &lines {
            if !l.passed {
                eprintln!("failed: {} {}: {}", l.id, l.name, l.detail);
            }
        }
        std::process::exit(1);
    }
}
