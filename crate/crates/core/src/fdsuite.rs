//! Randomized finite-difference audit of the whole differentiable surface.
//!
//! Each instance builds a small random problem (dims kept under 8), runs the
//! central-difference harness over every registered parameter, and folds the
//! worst disagreement into one battery report. Instance kinds cycle so a
//! battery of n covers every tensor op and every training loss roughly n/7
//! times. Domains are chosen to keep each instance smooth at the probe step:
//! log and reciprocal inputs are bounded away from zero, normalized vectors
//! away from the eps floor, and max selections either pinned by construction
//! or separated by a margin the probe cannot cross.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::ImageRecord;
use crate::encoders::{FeatureBundle, BOS, EOS};
use crate::error::{Error, Result};
use crate::losses::{
    loss_p2p, loss_q2t, loss_t2t, register_tau, sim, total_loss, Batch, LossConfig, Pooling,
    TAU_PARAM,
};
use crate::ndcore::{check_gradients, FdReport, Graph, Tensor};
use crate::textgen::Generator;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// A battery passes when every relative error stays below this.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Margin required between the top two cosines wherever a max selects among
/// candidate rows; the probe step moves each cosine far less than this.
const GAP_MIN: f64 = 5e-3;
/// Floor on the norm of any vector that gets normalized or divides a cosine.
const NORM_MIN: f64 = 0.2;
const DRAW_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Case {
    Ops,
    Sim,
    QueryToTarget,
    TextToTarget,
    Prototype,
    Combined,
    LanguageModel,
}

impl Case {
    const ALL: [Case; 7] = [
        Case::Ops,
        Case::Sim,
        Case::QueryToTarget,
        Case::TextToTarget,
        Case::Prototype,
        Case::Combined,
        Case::LanguageModel,
    ];

    fn name(self) -> &'static str {
        match self {
            Case::Ops => "ops",
            Case::Sim => "sim",
            Case::QueryToTarget => "loss_q2t",
            Case::TextToTarget => "loss_t2t",
            Case::Prototype => "loss_p2p",
            Case::Combined => "total_loss",
            Case::LanguageModel => "lm_loss",
        }
    }
}

/// Worst observed analytic-vs-numeric disagreement across a whole battery.
#[derive(Debug, Clone, Serialize)]
pub struct BatteryReport {
    pub instances: usize,
    /// Total scalar parameter elements probed.
    pub elements: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub worst_case: String,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Worst relative error per instance kind.
    pub per_case: BTreeMap<String, f64>,
}

impl BatteryReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Run `instances` randomized gradient checks seeded by `seed`, cycling
/// through every instance kind, and report the worst disagreement found.
pub fn fd_battery(seed: u64, instances: usize) -> Result<BatteryReport> {
    if instances == 0 {
        return Err(Error::contract("gradient battery needs at least one instance"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BatteryReport {
        instances: 0,
        elements: 0,
        tolerance: FD_TOLERANCE,
        max_rel_err: 0.0,
        worst_case: String::new(),
        worst_param: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        per_case: BTreeMap::new(),
    };
    for i in 0..instances {
        let case = Case::ALL[i % Case::ALL.len()];
        let fd = match case {
            Case::Ops => check_ops_mix(&mut rng)?,
            Case::Sim => check_sim(&mut rng)?,
            Case::QueryToTarget | Case::TextToTarget | Case::Prototype | Case::Combined => {
                check_loss(&mut rng, case)?
            }
            Case::LanguageModel => check_lm(&mut rng)?,
        };
        report.instances += 1;
        report.elements += fd.elements;
        let slot = report.per_case.entry(case.name().to_string()).or_insert(0.0);
        if fd.max_rel_err > *slot {
            *slot = fd.max_rel_err;
        }
        if fd.max_rel_err > report.max_rel_err {
            report.max_rel_err = fd.max_rel_err;
            report.worst_case = case.name().to_string();
            report.worst_param = fd.worst_param;
            report.worst_analytic = fd.analytic;
            report.worst_numeric = fd.numeric;
        }
    }
    Ok(report)
}

/// Values with magnitude in `[lo, hi)` and independent random signs.
fn signed_uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

fn random_pooling(rng: &mut ChaCha8Rng) -> Pooling {
    if rng.random::<bool>() {
        Pooling::Cls
    } else {
        Pooling::AvgWithCls
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Plain-arithmetic replica of the query pooling, used only to pre-screen
/// random instances for degenerate geometry.
fn pooled_plain(vals: &[f64], n: usize, d: usize, pooling: Pooling) -> Vec<f64> {
    match pooling {
        Pooling::Cls => vals[..d].to_vec(),
        Pooling::AvgWithCls => {
            let mut out = vec![0.0; d];
            for r in 0..n {
                for (c, slot) in out.iter_mut().enumerate() {
                    *slot += vals[r * d + c];
                }
            }
            for (c, slot) in out.iter_mut().enumerate() {
                *slot = (*slot + vals[c]) / (n as f64 + 1.0);
            }
            out
        }
    }
}

/// True when the pooled query is well-normed and, for multi-row targets, the
/// two largest query-row cosines are separated by at least `GAP_MIN`.
fn sim_gap_ok(q_vals: &[f64], t_vals: &[f64], n: usize, d: usize, pooling: Pooling) -> bool {
    let q = pooled_plain(q_vals, n, d, pooling);
    let qn = norm(&q);
    if qn < NORM_MIN {
        return false;
    }
    let mut cos: Vec<f64> = (0..n)
        .map(|r| {
            let row = &t_vals[r * d..(r + 1) * d];
            let dot: f64 = q.iter().zip(row).map(|(a, b)| a * b).sum();
            dot / (qn * norm(row))
        })
        .collect();
    cos.sort_by(|a, b| b.total_cmp(a));
    n < 2 || cos[0] - cos[1] >= GAP_MIN
}

/// One composite expression exercising every differentiable tensor op. The
/// nonlinearity inputs stay in safe ranges by construction and the max picks
/// a branch offset by one, so no kink is ever within a probe step.
fn check_ops_mix(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let r = rng.random_range(2..=3usize);
    let c = rng.random_range(2..=4usize);
    let k = rng.random_range(2..=4usize);
    let t_rows = rng.random_range(3..=6usize);

    let g = Graph::new();
    g.param("a", Tensor::from_vec(vec![r, c], signed_uniform(rng, r * c, 0.1, 0.8))?)?;
    g.param("w", Tensor::from_vec(vec![c, k], signed_uniform(rng, c * k, 0.1, 0.8))?)?;
    g.param("s", Tensor::scalar(rng.random_range(0.5..1.5)))?;
    g.param(
        "tbl",
        Tensor::from_vec(vec![t_rows, k], signed_uniform(rng, t_rows * k, 0.1, 0.8))?,
    )?;
    // Every element's magnitude is at least 0.5, so the normalized vector's
    // denominator never approaches the eps floor.
    g.param("v", Tensor::from_vec(vec![k], signed_uniform(rng, k, 0.5, 1.0))?)?;

    let mut idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..t_rows)).collect();
    // A repeated row makes the gather's backward accumulate two contributions.
    idx[1] = idx[0];

    check_gradients(&g, FD_STEP, || {
        let a = g.param_tensor("a")?;
        let w = g.param_tensor("w")?;
        let s = g.param_tensor("s")?;
        let tbl = g.param_tensor("tbl")?;
        let v = g.param_tensor("v")?;

        let m = a.matmul(&w)?;
        let ms = m.scale(0.7)?.mul_scalar(&s)?;
        let e = ms.tanh()?.scale(0.5)?.exp()?;
        // e lies in (0.60, 1.65), so pos = e^2 stays in (0.36, 2.72) and both
        // the reciprocal and the log see safely positive inputs.
        let pos = e.mul(&e)?;
        let dif = pos.recip()?.sub(&pos.ln()?)?;
        let wide = dif.concat_cols(&ms)?;
        let tall = dif.concat_rows(&tbl.gather_rows(&idx)?)?;
        let mr = tall.mean_rows()?;
        let unit = v.l2_normalize(1e-12)?;
        let d1 = mr.dot(&unit)?;
        let lse = mr.logsumexp()?;
        let piece = wide.row(1)?.reshape(vec![2, k])?.sum()?;
        // Max over (z, z + 1): the argmax is pinned to the offset branch, so
        // the selection cannot flip under the probe step.
        let z = d1.reshape(vec![1, 1])?;
        let mx = z
            .concat_rows(&z.add(&Tensor::ones(vec![1, 1]))?)?
            .max_all()?;
        d1.add(&lse)?.add(&piece)?.add(&mx)
    })
}

/// The max-cosine similarity kernel on raw feature parameters.
fn check_sim(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let n = rng.random_range(1..=3usize);
    let d = rng.random_range(2..=4usize);
    let pooling = random_pooling(rng);
    for _ in 0..DRAW_ATTEMPTS {
        let q_vals = signed_uniform(rng, n * d, 0.2, 0.9);
        let t_vals = signed_uniform(rng, n * d, 0.2, 0.9);
        if !sim_gap_ok(&q_vals, &t_vals, n, d, pooling) {
            continue;
        }
        let g = Graph::new();
        g.param("f_q", Tensor::from_vec(vec![n, d], q_vals)?)?;
        g.param("f_t", Tensor::from_vec(vec![n, d], t_vals)?)?;
        return check_gradients(&g, FD_STEP, || {
            sim(&g.param_tensor("f_q")?, &g.param_tensor("f_t")?, pooling)
        });
    }
    Err(Error::contract("could not draw a well-separated similarity instance"))
}

/// The batch losses on raw feature parameters; reverse anchors are fixed
/// value tensors so the finite differences agree with the stop-gradient.
fn check_loss(rng: &mut ChaCha8Rng, case: Case) -> Result<FdReport> {
    let b = rng.random_range(2..=3usize);
    let n = rng.random_range(1..=2usize);
    let d = rng.random_range(2..=4usize);
    let pooling = random_pooling(rng);

    'draw: for _ in 0..DRAW_ATTEMPTS {
        let draw =
            |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..b).map(|_| signed_uniform(rng, n * d, 0.2, 0.9)).collect()
            };
        let qs = draw(rng);
        let ms = draw(rng);
        let ts = draw(rng);
        let rs = draw(rng);
        let anchors = draw(rng);

        let query_sets: &[&Vec<Vec<f64>>] = match case {
            Case::QueryToTarget => &[&qs],
            Case::TextToTarget => &[&ms],
            Case::Combined => &[&qs, &ms],
            _ => &[],
        };
        for queries in query_sets {
            for q in queries.iter() {
                for t in &ts {
                    if !sim_gap_ok(q, t, n, d, pooling) {
                        continue 'draw;
                    }
                }
            }
        }

        let g = Graph::new();
        for i in 0..b {
            g.param(&format!("f_q{i}"), Tensor::from_vec(vec![n, d], qs[i].clone())?)?;
            g.param(&format!("f_m{i}"), Tensor::from_vec(vec![n, d], ms[i].clone())?)?;
            g.param(&format!("f_t{i}"), Tensor::from_vec(vec![n, d], ts[i].clone())?)?;
            g.param(&format!("f_r{i}"), Tensor::from_vec(vec![n, d], rs[i].clone())?)?;
        }
        let anchors: Vec<Tensor> = anchors
            .into_iter()
            .map(|v| Tensor::from_vec(vec![n, d], v))
            .collect::<Result<_>>()?;
        if case != Case::Prototype {
            register_tau(&g, rng.random_range(0.3..1.0))?;
        }

        let bundles = |g: &Graph| -> Result<Batch> {
            let mut out = Vec::with_capacity(b);
            for i in 0..b {
                out.push(FeatureBundle {
                    f_r2t: g.param_tensor(&format!("f_r{i}"))?,
                    f_t2r: Some(anchors[i].clone()),
                    f_q: g.param_tensor(&format!("f_q{i}"))?,
                    f_t: g.param_tensor(&format!("f_t{i}"))?,
                    f_m: g.param_tensor(&format!("f_m{i}"))?,
                });
            }
            Batch::new(out)
        };

        return check_gradients(&g, FD_STEP, || match case {
            Case::QueryToTarget => loss_q2t(&bundles(&g)?, &g.param_tensor(TAU_PARAM)?, pooling),
            Case::TextToTarget => loss_t2t(&bundles(&g)?, &g.param_tensor(TAU_PARAM)?, pooling),
            Case::Prototype => {
                let frs: Vec<Tensor> = (0..b)
                    .map(|i| g.param_tensor(&format!("f_r{i}")))
                    .collect::<Result<_>>()?;
                let pairs: Vec<(&Tensor, &Tensor)> = frs.iter().zip(&anchors).collect();
                loss_p2p(&pairs)
            }
            Case::Combined => {
                let cfg = LossConfig {
                    alpha: 0.6,
                    w_t2t: 0.4,
                    tau_init: 0.07,
                    pooling,
                };
                total_loss(&bundles(&g)?, &cfg, &g.param_tensor(TAU_PARAM)?).map(|(t, _)| t)
            }
            _ => unreachable!("non-loss case"),
        });
    }
    Err(Error::contract("could not draw a well-separated batch instance"))
}

/// The generator's teacher-forced likelihood, differentiated through its
/// whole private encoder stack and decoder.
fn check_lm(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let records = vec![ImageRecord::new("r0"), ImageRecord::new("r1")];
    let vocab_size = rng.random_range(6..=8usize);
    let n_tokens = rng.random_range(1..=2usize);
    let dim = rng.random_range(2..=3usize);
    let d_llm = rng.random_range(2..=3usize);
    let gen = Generator::new(&records, vocab_size, n_tokens, dim, 2, d_llm, rng)?;

    let instruction: Vec<usize> = (0..2).map(|_| rng.random_range(4..vocab_size)).collect();
    let mut modifier = vec![BOS];
    for _ in 0..rng.random_range(2..=4usize) {
        modifier.push(rng.random_range(4..vocab_size));
    }
    modifier.push(EOS);

    check_gradients(gen.graph(), FD_STEP, || {
        let input = gen.assemble_input("r0", "r1", &instruction)?;
        gen.lm_loss(&input, &modifier)
    })
}
