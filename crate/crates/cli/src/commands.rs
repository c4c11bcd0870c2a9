use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use cocmt::fusion::checkpoint::{load_checkpoint_into, save_checkpoint};
use cocmt::fusion::MaskConfig;
use cocmt::heads::Target;
use cocmt::sim::{
    gen_scenario, pooled_pr_curve, run_pipeline, smoothed, train_toy, write_atomic, Emulator, Model, PipelineOptions,
    PipelineResult, SimConfig, SimError,
};
use cocmt::verify::{run_suite, Fault, VerifyOptions};
use cocmt::wire::{bandwidth_bits, format_mb};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::svg::{line_plot, Series};
use crate::CliError;

pub const ABLATION_TAUS: [f64; 5] = [5.0, 10.0, 20.0, 30.0, f64::INFINITY];
pub const ABLATION_KS: [usize; 8] = [120, 100, 80, 60, 50, 40, 30, 20];

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(CliError::from)
}

/// Timestamps live only here so every other output stays byte-reproducible.
fn log_line(out: &Path, msg: &str) -> Result<(), CliError> {
    let path = out.join("run.log");
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    writeln!(f, "{secs} {msg}").map_err(|e| io_err(&path, e))
}

fn prepare_out(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    write(&cfg.out_dir.join("config.json"), &cfg.to_json())?;
    log_line(&cfg.out_dir, &format!("start {command}"))
}

fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint not found: {}", path.display())));
    }
    let mut model = Model::init(0, &cfg.sim.model);
    load_checkpoint_into(&path, &mut model)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
    Ok(model)
}

fn fmt_tau(tau: f64) -> String {
    if tau.is_infinite() {
        "inf".into()
    } else {
        format!("{tau}")
    }
}

struct SceneRun {
    seed: u64,
    result: PipelineResult,
    gts: Vec<Target>,
}

fn run_scenes(sim: &SimConfig, model: &Model, seeds: &[u64]) -> Result<Vec<SceneRun>, SimError> {
    let emu = Emulator::new(sim.emulator);
    let opts = PipelineOptions::from_config(sim);
    seeds
        .par_iter()
        .map(|&seed| {
            let scn = gen_scenario(seed, &sim.scenario)?;
            let result = run_pipeline(&scn, &emu, model, sim, &opts)?;
            Ok(SceneRun {
                seed,
                result,
                gts: scn.ground_truth(),
            })
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    prepare_out(cfg, "simulate")?;
    let model = match &cfg.checkpoint {
        Some(_) => load_model(cfg)?,
        None => Model::init(cfg.train.seed, &cfg.sim.model),
    };
    let runs = run_scenes(&cfg.sim, &model, &cfg.seeds.seeds())?;

    let mut dets = String::from("seed,x,y,z,l,w,h,yaw,score,class_id\n");
    let mut metrics = String::from("seed,ap50,ap70,bandwidth_bits\n");
    for r in &runs {
        for d in &r.result.detections {
            let (c, s) = (d.bbox.center(), d.bbox.size());
            let _ = writeln!(
                dets,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.seed,
                c[0],
                c[1],
                c[2],
                s[0],
                s[1],
                s[2],
                d.bbox.yaw(),
                d.score,
                d.class_id
            );
        }
        let e = &r.result.eval;
        let _ = writeln!(metrics, "{},{:.6},{:.6},{}", r.seed, e.ap50, e.ap70, r.result.bandwidth_bits);
    }
    let out = &cfg.out_dir;
    write(&out.join("detections.csv"), &dets)?;
    write(&out.join("metrics.csv"), &metrics)?;

    let scenes: Vec<_> = runs.iter().map(|r| (r.result.detections.clone(), r.gts.clone())).collect();
    let pr = Series {
        label: "IoU 0.5",
        color: "steelblue",
        points: pooled_pr_curve(&scenes, 0.5),
    };
    write(&out.join("pr_curve.svg"), &line_plot("Precision-recall", "recall", "precision", &[pr], true))?;

    let ap50 = mean(runs.iter().map(|r| r.result.eval.ap50));
    let ap70 = mean(runs.iter().map(|r| r.result.eval.ap70));
    let bits = mean(runs.iter().map(|r| r.result.bandwidth_bits as f64));
    println!("scenes {}  AP50 {ap50:.4}  AP70 {ap70:.4}  mean bandwidth {bits:.1} bits", runs.len());
    log_line(out, "done simulate")
}

/// `a:b:s` (inclusive, either direction), `a,b,c`, or a single value.
pub fn parse_k_sweep(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = |m: String| CliError::Config(format!("--k `{s}`: {m}"));
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| bad(e.to_string()));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if step == 0 {
                return Err(bad("step must be positive".into()));
            }
            let mut ks: Vec<u64> = (a.min(b)..=a.max(b)).step_by(step as usize).collect();
            if a > b {
                ks = (0..)
                    .map(|i| a as i128 - i as i128 * step as i128)
                    .take_while(|&v| v >= b as i128)
                    .map(|v| v as u64)
                    .collect();
            }
            Ok(ks)
        }
        [one] => one.split(',').map(num).collect(),
        _ => Err(bad("expected K, K1,K2,.. or START:END:STEP".into())),
    }
}

pub fn bandwidth_table(ks: &[u64], dim: u64, classes: u64) -> String {
    let mut s = format!("{:>6} {:>6} {:>4} {:>12} {:>10}\n", "k", "D", "C", "bits", "Mb");
    for &k in ks {
        let bits = bandwidth_bits(k, dim, classes);
        let _ = writeln!(s, "{k:>6} {dim:>6} {classes:>4} {bits:>12} {:>10}", format_mb(bits));
    }
    s
}

struct Cell {
    group: &'static str,
    sim: SimConfig,
}

fn ablation_cells(base: &SimConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for bits in 0..8u8 {
        let mask = MaskConfig {
            use_qsm: bits & 4 != 0,
            use_pcm: bits & 2 != 0,
            use_ssm: bits & 1 != 0,
            ..base.mask
        };
        cells.push(Cell { group: "mask", sim: SimConfig { mask, ..*base } });
    }
    for tau in ABLATION_TAUS {
        let mask = MaskConfig { tau, ..base.mask };
        cells.push(Cell { group: "tau", sim: SimConfig { mask, ..*base } });
    }
    let n = base.emulator.n_queries.max(ABLATION_KS[0]);
    for k in ABLATION_KS {
        let mut sim = SimConfig { k, ..*base };
        sim.emulator.n_queries = n;
        cells.push(Cell { group: "k", sim });
    }
    cells
}

fn cell_key(c: &Cell) -> String {
    let m = &c.sim.mask;
    format!(
        "{},{},{},{},{},{}",
        c.group, m.use_qsm as u8, m.use_pcm as u8, m.use_ssm as u8, fmt_tau(m.tau), c.sim.k
    )
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    prepare_out(cfg, "ablate")?;
    let cells = ablation_cells(&cfg.sim);
    for c in &cells {
        c.sim.validate()?;
    }
    let seeds = cfg.seeds.seeds();
    let runs: Vec<Vec<SceneRun>> = cells
        .iter()
        .map(|c| run_scenes(&c.sim, &model, &seeds))
        .collect::<Result<_, _>>()?;

    let head = "group,qsm,pcm,ssm,tau,k";
    let mut grid = format!("{head},ap50,ap70,bandwidth_bits_per_cav,mean_bandwidth_bits\n");
    let mut per_seed = format!("{head},seed,ap50,ap70,bandwidth_bits\n");
    for (c, rs) in cells.iter().zip(&runs) {
        let key = cell_key(c);
        let per_cav = bandwidth_bits(c.sim.k as u64, c.sim.model.dim as u64, c.sim.model.classes as u64);
        let _ = writeln!(
            grid,
            "{key},{:.6},{:.6},{per_cav},{:.1}",
            mean(rs.iter().map(|r| r.result.eval.ap50)),
            mean(rs.iter().map(|r| r.result.eval.ap70)),
            mean(rs.iter().map(|r| r.result.bandwidth_bits as f64)),
        );
        for r in rs {
            let e = &r.result.eval;
            let _ = writeln!(per_seed, "{key},{},{:.6},{:.6},{}", r.seed, e.ap50, e.ap70, r.result.bandwidth_bits);
        }
    }
    write(&cfg.out_dir.join("ablation.csv"), &grid)?;
    write(&cfg.out_dir.join("ablation_seeds.csv"), &per_seed)?;
    print!("{grid}");
    log_line(&cfg.out_dir, "done ablate")
}

pub fn verify(seed: u64, fault: Option<&str>, iou_samples: Option<usize>) -> Result<(), CliError> {
    let fault = match fault {
        None | Some("none") => Fault::None,
        Some("flip-mask-bit") => Fault::FlipMaskBit,
        Some(other) => return Err(CliError::Config(format!("unknown fault `{other}`"))),
    };
    let mut opts = VerifyOptions {
        seed,
        fault,
        ..VerifyOptions::default()
    };
    if let Some(n) = iou_samples {
        opts.iou_samples = n;
    }
    let results = run_suite(&opts);
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    if failed > 0 {
        Err(CliError::Verify)
    } else {
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    prepare_out(cfg, "train")?;
    let out = &cfg.out_dir;
    let ckpt = cfg.checkpoint_path();
    let result = match train_toy(&cfg.sim, &cfg.train) {
        Ok(r) => r,
        Err(SimError::Diverged { step, last_good }) => {
            let path = ckpt.with_extension("last_good.cqck");
            save_checkpoint(&path, &*last_good).map_err(|e| io_err(&path, e))?;
            log_line(out, &format!("diverged at step {step}"))?;
            return Err(CliError::Run(format!(
                "training diverged at step {step}; last finite weights saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&ckpt, &result.model).map_err(|e| io_err(&ckpt, e))?;
    write(&out.join("train_log.jsonl"), &result.log_jsonl())?;

    let w = cfg.train.smoothing_window;
    let curve = |vals: Vec<f64>| -> Vec<(f64, f64)> {
        smoothed(&vals, w).into_iter().enumerate().map(|(i, v)| (i as f64, v)).collect()
    };
    let series = [
        Series {
            label: "total",
            color: "black",
            points: curve(result.log.iter().map(|r| r.total).collect()),
        },
        Series {
            label: "final layer",
            color: "firebrick",
            points: curve(result.final_layer_losses()),
        },
    ];
    write(&out.join("loss.svg"), &line_plot("Training loss (smoothed)", "step", "loss", &series, false))?;

    if let (Some(first), Some(last)) = (result.log.first(), result.log.last()) {
        println!("steps {}  loss {:.4} -> {:.4}", result.log.len(), first.total, last.total);
        if let Some(ap) = last.val_ap50 {
            println!("validation AP50 {ap:.4}");
        }
    }
    println!("checkpoint {}", ckpt.display());
    log_line(out, "done train")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_syntax() {
        assert_eq!(parse_k_sweep("10:120:10").unwrap().len(), 12);
        assert_eq!(parse_k_sweep("120:20:20").unwrap(), vec![120, 100, 80, 60, 40, 20]);
        assert_eq!(parse_k_sweep("8,16").unwrap(), vec![8, 16]);
        assert!(parse_k_sweep("10:20:0").is_err());
        assert!(parse_k_sweep("x").is_err());
    }

    #[test]
    fn table_rows() {
        let t = bandwidth_table(&[50, 0], 256, 1);
        assert!(t.contains("416000"));
        assert!(t.contains("0.416 Mb"));
        assert!(t.lines().last().unwrap().ends_with("0 Mb"));
    }

    #[test]
    fn grid_shape() {
        let cells = ablation_cells(&SimConfig::default());
        assert_eq!(cells.iter().filter(|c| c.group == "mask").count(), 8);
        let taus: Vec<String> = cells.iter().filter(|c| c.group == "tau").map(|c| fmt_tau(c.sim.mask.tau)).collect();
        assert_eq!(taus, ["5", "10", "20", "30", "inf"]);
        for c in &cells {
            c.sim.validate().unwrap();
        }
    }
}
