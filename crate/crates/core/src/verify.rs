//! Self-contained property suite: every mechanism is checked against a definitional oracle
//! on seeded random instances, and each failure names its module, property and seed.

use crate::fusion::{
    align_and_concat, build_pcm, build_qsm, build_ssm, combine_masks, eqformer_forward,
    eqformer_forward_cached, masked_mhsa, AlignedBatch, AttnMask, EqFormerConfig, EqFormerParams,
    MaskConfig, MlnParams,
};
use crate::geometry::{bev_iou, BBox3D, Pose};
use crate::heads::{assignment_cost, hungarian};
use crate::numerics::{ffn_cached, finite_diff_check, layer_norm, mhsa, MhsaParams, Rng, Tensor};
use crate::sim::{
    build_sample, gen_scenario, loss_and_grad, loss_only, Emulator, Model, ModelConfig, SimConfig,
    Supervision,
};
use crate::wire::{bandwidth_bits, deserialize, format_mb, serialize, top_k_select, QueryPayload};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub property: &'static str,
    pub passed: bool,
    pub trials: usize,
    /// First failing seed and what went wrong.
    pub counterexample: Option<(u64, String)>,
}

impl CheckResult {
    pub fn line(&self) -> String {
        match &self.counterexample {
            None => format!("PASS {}: {} ({} trials)", self.module, self.property, self.trials),
            Some((seed, why)) => format!("FAIL {}: {} (seed {seed}): {why}", self.module, self.property),
        }
    }
}

/// Deliberate defects for checking that the suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Opens one blocked entry of the mask handed to attention.
    FlipMaskBit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Fault,
    /// Monte-Carlo samples per IoU pair.
    pub iou_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            fault: Fault::None,
            iou_samples: 1_000_000,
        }
    }
}

fn run(
    module: &'static str,
    property: &'static str,
    base: u64,
    trials: usize,
    mut f: impl FnMut(u64) -> Result<(), String>,
) -> CheckResult {
    let counterexample = (0..trials as u64)
        .map(|t| base.wrapping_mul(1_000_003).wrapping_add(t))
        .find_map(|s| f(s).err().map(|e| (s, e)));
    CheckResult {
        module,
        property,
        passed: counterexample.is_none(),
        trials,
        counterexample,
    }
}

pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let s = opts.seed;
    vec![
        check_bandwidth(),
        check_mask_oracles(s, 1000),
        check_masked_key_non_influence(s, 200, opts.fault),
        check_padding_invariance(s, 100),
        check_slot_permutation(s, 100),
        check_agent_permutation(s, 100),
        check_unmasked_degeneration(s, 20),
        check_hungarian(s, 500),
        check_iou(s, 200, opts.iou_samples),
        check_wire(s, 1000),
        check_gradients(s),
    ]
}

pub fn check_bandwidth() -> CheckResult {
    run("wire", "bandwidth exactness", 0, 1, |_| {
        let b = bandwidth_bits(50, 256, 1);
        if b != 416_000 || format_mb(b) != "0.416 Mb" {
            return Err(format!("k=50: {b} bits, {}", format_mb(b)));
        }
        for k in (20..=120).step_by(10) {
            if bandwidth_bits(k, 256, 1) != k * 8320 {
                return Err(format!("k={k} is off the line"));
            }
        }
        let top = bandwidth_bits(120, 256, 1);
        if format_mb(top) != "0.998 Mb" || format_mb(0) != "0 Mb" {
            return Err(format!("k=120 renders {}", format_mb(top)));
        }
        Ok(())
    })
}

/// Random centers on a coarse grid so exact-threshold distances occur.
pub fn random_mask_inputs(rng: &mut Rng, n: usize) -> (Vec<bool>, Tensor, Tensor) {
    let valid: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.75)).collect();
    let mut c = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        for j in 0..3 {
            c.set(i, j, (rng.index(9) as f64 - 4.0) * 2.5);
        }
    }
    let classes = 1 + rng.index(3);
    let mut s = Tensor::zeros(&[n, classes]);
    for v in s.data_mut() {
        *v = (rng.index(11) as f64) / 10.0;
    }
    (valid, c, s)
}

pub fn check_mask_oracles(seed: u64, trials: usize) -> CheckResult {
    run("fusion", "mask oracle equivalence", seed, trials, |t| {
        let mut rng = Rng::new(t);
        let n = 1 + rng.index(16);
        let (valid, c, s) = random_mask_inputs(&mut rng, n);
        let tau = [2.5, 5.0, 7.5, 10.0][rng.index(4)];
        let theta = (rng.index(11) as f64) / 10.0;
        let qsm = build_qsm(&valid);
        let pcm = build_pcm(&c, tau);
        let ssm = build_ssm(&s, theta);
        let all = combine_masks(&[&qsm, &pcm, &ssm]).map_err(|e| e.to_string())?;
        let key = |i: usize| s.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..n {
            for j in 0..n {
                let mut d2 = 0.0;
                for a in 0..3 {
                    d2 += (c.get(i, a) - c.get(j, a)).powi(2);
                }
                let q = !valid[i] || !valid[j];
                let p = d2.sqrt() > tau;
                let sc = key(i) <= theta || key(j) <= theta;
                let m = i != j && (q || p || sc);
                let got = [qsm.is_blocked(i, j), pcm.is_blocked(i, j), ssm.is_blocked(i, j), all.is_blocked(i, j)];
                if got != [q, p, sc, m] {
                    return Err(format!("entry ({i}, {j}): got {got:?}, oracle {:?}", [q, p, sc, m]));
                }
            }
        }
        Ok(())
    })
}

fn random_mhsa(rng: &mut Rng, d: usize, heads: usize) -> MhsaParams {
    let mut p = MhsaParams::init(rng, d, heads);
    for l in [&mut p.query, &mut p.key, &mut p.value, &mut p.output] {
        for v in l.bias.data_mut() {
            *v = 0.3 * rng.normal();
        }
    }
    p
}

pub fn check_masked_key_non_influence(seed: u64, trials: usize, fault: Fault) -> CheckResult {
    run("numerics", "masked-key non-influence", seed, trials, |t| {
        let mut rng = Rng::new(t);
        let n = 2 + rng.index(14);
        let d = [4, 8, 12][rng.index(3)];
        let heads = [1, 2, 4][rng.index(3)];
        let p = random_mhsa(&mut rng, d, heads);
        let x = rng.normal_tensor(&[n, d], 1.0);
        let coin: Vec<bool> = (0..n * n).map(|_| rng.bernoulli(0.5)).collect();
        let mut mask = AttnMask::from_fn(n, |i, j| i != j && coin[i * n + j]);
        let j = rng.index(n);
        if (0..n).all(|i| !mask.is_blocked(i, j)) {
            let i = (j + 1) % n;
            mask.set(i, j, true);
        }
        let mut used = mask.clone();
        if fault == Fault::FlipMaskBit {
            let i = (0..n).find(|&i| mask.is_blocked(i, j)).expect("a blocked entry");
            used.set(i, j, false);
        }
        let mut xp = x.clone();
        let delta = 10f64.powi(rng.index(7) as i32 - 3);
        for v in xp.row_mut(j) {
            *v += delta * rng.normal();
        }
        let a = masked_mhsa(&x, &used, &p).map_err(|e| e.to_string())?;
        let b = masked_mhsa(&xp, &used, &p).map_err(|e| e.to_string())?;
        for i in (0..n).filter(|&i| mask.is_blocked(i, j)) {
            if a.row(i) != b.row(i) {
                return Err(format!("row {i} moved when blocked key {j} was perturbed by {delta:e}"));
            }
        }
        Ok(())
    })
}

/// A fusion batch with `valid` real slots followed by zero padding up to `n`.
pub fn random_batch(rng: &mut Rng, n: usize, valid: usize, d: usize) -> AlignedBatch {
    let mut features = rng.normal_tensor(&[n, d], 1.0);
    let mut centers = rng.normal_tensor(&[n, 3], 6.0);
    let mut scores = Tensor::from_vec(vec![n, 1], (0..n).map(|_| rng.uniform(0.0, 1.0)).collect())
        .expect("n scores");
    for i in valid..n {
        features.row_mut(i).fill(0.0);
        centers.row_mut(i).fill(0.0);
        scores.row_mut(i).fill(0.0);
    }
    AlignedBatch {
        features,
        centers,
        scores,
        valid: (0..n).map(|i| i < valid).collect(),
        slot_agent: (0..n).map(|i| (i < valid).then_some(0)).collect(),
    }
}

pub fn permute_batch(b: &AlignedBatch, perm: &[usize]) -> AlignedBatch {
    AlignedBatch {
        features: b.features.select_rows(perm),
        centers: b.centers.select_rows(perm),
        scores: b.scores.select_rows(perm),
        valid: perm.iter().map(|&i| b.valid[i]).collect(),
        slot_agent: perm.iter().map(|&i| b.slot_agent[i]).collect(),
    }
}

fn random_eqformer(rng: &mut Rng) -> (EqFormerParams, MaskConfig) {
    let d = [8, 16][rng.index(2)];
    let p = EqFormerParams::init(rng, &EqFormerConfig::new(d));
    let cfg = MaskConfig {
        tau: [5.0, 10.0, f64::INFINITY][rng.index(3)],
        theta: rng.uniform(0.0, 0.4),
        ..MaskConfig::default()
    };
    (p, cfg)
}

pub fn check_padding_invariance(seed: u64, trials: usize) -> CheckResult {
    run("fusion", "padding invariance", seed, trials, |t| {
        let mut rng = Rng::new(t);
        let (p, cfg) = random_eqformer(&mut rng);
        let d = p.blocks[0].attn.dim();
        let valid = 1 + rng.index(10);
        let n = valid + 1 + rng.index(12);
        let b = random_batch(&mut rng, n, valid, d);
        let keep: Vec<usize> = (0..valid).collect();
        let full = eqformer_forward(&b, &cfg, &p).map_err(|e| e.to_string())?;
        let short = eqformer_forward(&permute_batch(&b, &keep), &cfg, &p).map_err(|e| e.to_string())?;
        for (l, (f, s)) in full.iter().zip(&short).enumerate() {
            if &f.select_rows(&keep) != s {
                return Err(format!("layer {l} valid rows differ with {} padded slots", n - valid));
            }
        }
        Ok(())
    })
}

pub fn check_slot_permutation(seed: u64, trials: usize) -> CheckResult {
    run("fusion", "slot permutation equivariance", seed, trials, |t| {
        let mut rng = Rng::new(t);
        let (p, cfg) = random_eqformer(&mut rng);
        let d = p.blocks[0].attn.dim();
        let n = 2 + rng.index(16);
        let valid = 1 + rng.index(n);
        let b = random_batch(&mut rng, n, valid, d);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let out = eqformer_forward(&b, &cfg, &p).map_err(|e| e.to_string())?;
        let out_p = eqformer_forward(&permute_batch(&b, &perm), &cfg, &p).map_err(|e| e.to_string())?;
        for (l, (a, c)) in out.iter().zip(&out_p).enumerate() {
            if &a.select_rows(&perm) != c {
                return Err(format!("layer {l} is not equivariant under {perm:?}"));
            }
        }
        Ok(())
    })
}

fn random_payload(rng: &mut Rng, id: u32, k: usize, d: usize, pose: &Pose) -> QueryPayload {
    let n = k + rng.index(4);
    let q = rng.normal_tensor(&[n, d], 1.0);
    let c = rng.normal_tensor(&[n, 3], 15.0);
    let s = Tensor::from_vec(vec![n, 1], (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).expect("n scores");
    top_k_select(id, pose, &q, &c, &s, k).expect("k ≤ n")
}

pub fn check_agent_permutation(seed: u64, trials: usize) -> CheckResult {
    run("fusion", "agent permutation equivariance", seed, trials, |t| {
        let mut rng = Rng::new(t);
        let (p, cfg) = random_eqformer(&mut rng);
        let d = p.blocks[0].attn.dim();
        let mln = MlnParams::init(&mut rng, d, d);
        let k = 1 + rng.index(5);
        let ego_pose = Pose::identity();
        let ego = random_payload(&mut rng, 0, k, d, &ego_pose);
        let n_cav = 1 + rng.index(cfg.max_agents - 1);
        let mut ids: Vec<u32> = (1..100).collect();
        rng.shuffle(&mut ids);
        let cavs: Vec<QueryPayload> = ids[..n_cav]
            .iter()
            .map(|&id| {
                let pose = Pose::planar(rng.uniform(-30.0, 30.0), rng.uniform(-30.0, 30.0), 0.0, rng.uniform(-3.0, 3.0));
                random_payload(&mut rng, id, k, d, &pose)
            })
            .collect();
        let mut shuffled = cavs.clone();
        rng.shuffle(&mut shuffled);
        let fwd = |cs: &[QueryPayload]| -> Result<(AlignedBatch, Vec<Tensor>), String> {
            let b = align_and_concat(&ego, cs, &ego_pose, &cfg, &mln).map_err(|e| e.to_string())?;
            let o = eqformer_forward(&b, &cfg, &p).map_err(|e| e.to_string())?;
            Ok((b, o))
        };
        let (ba, oa) = fwd(&cavs)?;
        let (bb, ob) = fwd(&shuffled)?;
        for i in (0..ba.len()).filter(|&i| ba.valid[i]) {
            let j = (0..bb.len())
                .find(|&j| bb.slot_agent[j] == ba.slot_agent[i] && bb.features.row(j) == ba.features.row(i))
                .ok_or_else(|| format!("slot {i} of agent {:?} vanished", ba.slot_agent[i]))?;
            for (l, (x, y)) in oa.iter().zip(&ob).enumerate() {
                if x.row(i) != y.row(j) {
                    return Err(format!("layer {l}, slot {i} differs after reordering agents"));
                }
            }
        }
        Ok(())
    })
}

/// With every gate open, the first block must equal a plain post-norm transformer block.
pub fn check_unmasked_degeneration(seed: u64, trials: usize) -> CheckResult {
    run("fusion", "unmasked degeneration", seed, trials, |t| {
        let mut rng = Rng::new(t);
        let d = [8, 16][rng.index(2)];
        let p = EqFormerParams::init(&mut rng, &EqFormerConfig::new(d));
        let n = 1 + rng.index(16);
        let mut b = random_batch(&mut rng, n, n, d);
        for v in b.scores.data_mut() {
            *v = rng.uniform(0.01, 1.0);
        }
        let cfg = MaskConfig {
            tau: f64::INFINITY,
            theta: 0.0,
            ..MaskConfig::default()
        };
        let (out, cache) = eqformer_forward_cached(&b, &cfg, &p).map_err(|e| e.to_string())?;
        let blk = &p.blocks[0];
        let plain = mhsa(&b.features, &Tensor::zeros(&[n, n]), &blk.attn).map_err(|e| e.to_string())?;
        let h = layer_norm(&b.features.add(&plain).map_err(|e| e.to_string())?, &blk.norm1).map_err(|e| e.to_string())?;
        let (f, _) = ffn_cached(&h, &blk.ffn).map_err(|e| e.to_string())?;
        let y = layer_norm(&h.add(&f).map_err(|e| e.to_string())?, &blk.norm2).map_err(|e| e.to_string())?;
        let err = out[0].data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err > 1e-12 {
            return Err(format!("block output deviates by {err:e}"));
        }
        let w = cache.attention(0, 0);
        if (0..n).any(|i| (0..n).any(|j| w.get(i, j) == 0.0)) {
            return Err("an attention weight is exactly zero with every gate open".into());
        }
        Ok(())
    })
}

fn brute_force_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(r: usize, rows: usize, cols: usize, cost: &[f64], used: &mut Vec<bool>, acc: &mut Vec<(usize, usize)>, best: &mut f64) {
        if r == rows {
            *best = best.min(assignment_cost(cost, cols, acc));
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                acc.push((r, c));
                go(r + 1, rows, cols, cost, used, acc, best);
                acc.pop();
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, rows, cols, cost, &mut vec![false; cols], &mut Vec::new(), &mut best);
    best
}

pub fn check_hungarian(seed: u64, trials: usize) -> CheckResult {
    run("heads", "Hungarian brute-force optimality", seed, trials, |t| {
        let mut rng = Rng::new(t);
        let rows = 1 + rng.index(7);
        let cols = 1 + rng.index(7);
        let cost: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.bernoulli(0.3) { rng.index(4) as f64 } else { rng.uniform(-5.0, 5.0) })
            .collect();
        let pairs = hungarian(&cost, rows, cols);
        if pairs.len() != rows.min(cols) {
            return Err(format!("{} pairs for a {rows}×{cols} matrix", pairs.len()));
        }
        // brute force over the short side, summed the same way as the solver's pairs
        let got = assignment_cost(&cost, cols, &pairs);
        let best = if rows <= cols {
            brute_force_min(&cost, rows, cols)
        } else {
            let mut tr = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    tr[c * rows + r] = cost[r * cols + c];
                }
            }
            brute_force_min(&tr, cols, rows)
        };
        if (got - best).abs() > 1e-9 {
            return Err(format!("{rows}×{cols}: cost {got}, optimum {best}"));
        }
        Ok(())
    })
}

fn inside(b: &BBox3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw().sin_cos();
    let (dx, dy) = (x - b.center()[0], y - b.center()[1]);
    (c * dx + s * dy).abs() <= b.size()[0] / 2.0 && (-s * dx + c * dy).abs() <= b.size()[1] / 2.0
}

/// Hit-or-miss estimate of BEV IoU over the joint bounding square.
pub fn monte_carlo_iou(a: &BBox3D, b: &BBox3D, samples: usize, rng: &mut Rng) -> f64 {
    let r = |x: &BBox3D| 0.5 * x.size()[0].hypot(x.size()[1]);
    let lo_x = (a.center()[0] - r(a)).min(b.center()[0] - r(b));
    let hi_x = (a.center()[0] + r(a)).max(b.center()[0] + r(b));
    let lo_y = (a.center()[1] - r(a)).min(b.center()[1] - r(b));
    let hi_y = (a.center()[1] + r(a)).max(b.center()[1] + r(b));
    let (mut inter, mut union) = (0u64, 0u64);
    for _ in 0..samples {
        let x = rng.uniform(lo_x, hi_x);
        let y = rng.uniform(lo_y, hi_y);
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        inter += (ia && ib) as u64;
        union += (ia || ib) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn check_iou(seed: u64, trials: usize, samples: usize) -> CheckResult {
    run("geometry", "rotated BEV IoU vs Monte Carlo", seed, trials, |t| {
        let mut rng = Rng::new(t);
        let bx = |rng: &mut Rng| {
            BBox3D::new(
                [rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), 0.0],
                [rng.uniform(0.5, 4.0), rng.uniform(0.5, 3.0), 1.0],
                rng.uniform(-3.2, 3.2),
            )
            .expect("positive sizes")
        };
        let a = bx(&mut rng);
        let b = bx(&mut rng);
        let got = bev_iou(&a, &b);
        let mc = monte_carlo_iou(&a, &b, samples, &mut rng);
        if (got - mc).abs() > 1e-2 {
            return Err(format!("analytic {got:.5}, Monte Carlo {mc:.5}"));
        }
        if t % 50 == 0 {
            let s1 = BBox3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).expect("unit");
            let s2 = BBox3D::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).expect("unit");
            let far = BBox3D::new([50.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).expect("unit");
            if (bev_iou(&a, &a) - 1.0).abs() > 1e-12 || bev_iou(&a, &far) != 0.0 || (bev_iou(&s1, &s2) - 1.0 / 3.0).abs() > 1e-12 {
                return Err("an analytic case is off".into());
            }
        }
        Ok(())
    })
}

pub fn check_wire(seed: u64, trials: usize) -> CheckResult {
    run("wire", "payload round-trip", seed, trials, |t| {
        let mut rng = Rng::new(t);
        let k = rng.index(20);
        let d = 1 + rng.index(40);
        let c = 1 + rng.index(4);
        let bits = |n: usize, rng: &mut Rng| -> Vec<f32> {
            (0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect()
        };
        let p = QueryPayload {
            agent_id: rng.next_u64() as u32,
            k,
            dim: d,
            classes: c,
            features: bits(k * d, &mut rng),
            centers: bits(k * 3, &mut rng),
            scores: bits(k * c, &mut rng),
            pose: bits(16, &mut rng).try_into().expect("16 floats"),
        };
        let bytes = serialize(&p).map_err(|e| e.to_string())?;
        let back = deserialize(&bytes).map_err(|e| e.to_string())?;
        if !back.bit_identical(&p) {
            return Err(format!("k={k}, D={d}, C={c} changed in transit"));
        }
        Ok(())
    })
}

/// Toy setup for whole-model gradient checks: two agents, `k = 4`, `D = 16`.
pub fn gradcheck_config() -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.model = ModelConfig::for_dim(16, 1);
    cfg.emulator.dim = 16;
    cfg.k = 4;
    cfg.k_ego = 4;
    cfg.scenario.agents_min = 2;
    cfg.scenario.agents_max = 2;
    cfg
}

pub fn check_gradients(seed: u64) -> CheckResult {
    run("sim", "end-to-end gradients vs finite differences", seed, 1, |t| {
        let cfg = gradcheck_config();
        let scn = gen_scenario(t, &cfg.scenario).map_err(|e| e.to_string())?;
        let emu = Emulator::new(cfg.emulator);
        let sample = build_sample(&scn, &emu, &cfg).map_err(|e| e.to_string())?;
        let mut model = Model::init(t, &cfg.model);
        // move the alignment encoder off its identity start so it carries gradient
        let mut rng = Rng::derive(t, 1);
        for v in model.mln.encoder_output.weight.data_mut() {
            *v = 0.05 * rng.normal();
        }
        for sup in [Supervision::AllLayers, Supervision::FinalLayer] {
            let (_, grad) = loss_and_grad(&model, &sample, &cfg, sup).map_err(|e| e.to_string())?;
            let f = |m: &Model| loss_only(m, &sample, &cfg, sup).map(|l| l.total).unwrap_or(f64::NAN);
            let r = finite_diff_check(f, &model, &grad, 1e-6, 1e-4).map_err(|e| e.to_string())?;
            if !r.passed {
                return Err(format!("{sup:?}: worst tensor {:?}", r.worst()));
            }
        }
        Ok(())
    })
}
