//! The training objective: max-cosine similarity, two InfoNCE terms with a
//! shared learnable temperature, a prototype squared-error term with a
//! stop-gradient on the reverse branch, and their weighted sum.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};
use crate::ndcore::{stack_scalars, Graph, Tensor};

pub const EPS_NORM: f64 = 1e-12;
/// Name of the learnable temperature in the parameter graph.
pub const TAU_PARAM: &str = "loss.tau";
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

/// How the query matrix is pooled into one vector before the cosine max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Row 0 alone.
    Cls,
    /// Mean of all token rows with the CLS row counted twice.
    AvgWithCls,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Pooling> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "avg_with_cls" => Ok(Pooling::AvgWithCls),
            other => Err(Error::config(format!(
                "unknown pooling `{other}` (expected cls or avg_with_cls)"
            ))),
        }
    }
}

impl Pooling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pooling::Cls => "cls",
            Pooling::AvgWithCls => "avg_with_cls",
        }
    }
}

/// Loss weights and temperature initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the prototype term.
    pub alpha: f64,
    /// Weight of the text-to-target term.
    pub w_t2t: f64,
    pub tau_init: f64,
    pub pooling: Pooling,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            alpha: 0.5,
            w_t2t: 0.4,
            tau_init: 0.07,
            pooling: Pooling::Cls,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.w_t2t < 0.0 {
            return Err(Error::config(format!("w_t2t must be >= 0, got {}", self.w_t2t)));
        }
        if self.tau_init <= 0.0 {
            return Err(Error::config(format!(
                "tau_init must be positive, got {}",
                self.tau_init
            )));
        }
        Ok(())
    }
}

/// Register the learnable temperature on the graph.
pub fn register_tau(graph: &Graph, tau_init: f64) -> Result<Tensor> {
    graph.param(TAU_PARAM, Tensor::scalar(tau_init))
}

/// Clamp the temperature into its legal range after an optimizer step.
pub fn clamp_tau(graph: &Graph) -> Result<()> {
    let tau = graph.param_value(TAU_PARAM)?.item();
    let clamped = tau.clamp(TAU_MIN, TAU_MAX);
    if clamped != tau {
        graph.set_param_data(TAU_PARAM, vec![clamped])?;
    }
    Ok(())
}

/// One training mini-batch; targets are distinct images by construction.
#[derive(Debug, Clone)]
pub struct Batch {
    pub bundles: Vec<FeatureBundle>,
}

impl Batch {
    pub fn new(bundles: Vec<FeatureBundle>) -> Result<Batch> {
        if bundles.is_empty() {
            return Err(Error::contract("batch must contain at least one example".to_string()));
        }
        Ok(Batch { bundles })
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }
}

/// Per-term values of one optimization step, one JSON line per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    #[serde(rename = "L_q2t")]
    pub l_q2t: f64,
    #[serde(rename = "L_t2t")]
    pub l_t2t: f64,
    #[serde(rename = "L_p2p")]
    pub l_p2p: f64,
    pub total: f64,
    pub tau: f64,
}

fn pooled_query(f_q: &Tensor, pooling: Pooling) -> Result<Tensor> {
    match pooling {
        Pooling::Cls => f_q.row(0),
        Pooling::AvgWithCls => {
            let d = f_q.shape()[1];
            let cls = f_q.row(0)?.reshape(vec![1, d])?;
            f_q.concat_rows(&cls)?.mean_rows()
        }
    }
}

/// Max over target token rows of the cosine between the pooled query vector
/// and each row. Result lies in [-1, 1].
pub fn sim(f_q: &Tensor, f_t: &Tensor, pooling: Pooling) -> Result<Tensor> {
    if f_q.shape() != f_t.shape() || f_q.shape().len() != 2 {
        return Err(Error::Shape {
            op: "sim",
            lhs: f_q.shape().to_vec(),
            rhs: f_t.shape().to_vec(),
        });
    }
    let q = pooled_query(f_q, pooling)?.l2_normalize(EPS_NORM)?;
    let n = f_t.shape()[0];
    let mut cosines = Vec::with_capacity(n);
    for k in 0..n {
        let row = f_t.row(k)?.l2_normalize(EPS_NORM)?;
        cosines.push(q.dot(&row)?);
    }
    stack_scalars(&cosines)?.max_all()
}

fn check_tau(tau: &Tensor) -> Result<()> {
    if !tau.is_scalar() {
        return Err(Error::Shape {
            op: "temperature",
            lhs: tau.shape().to_vec(),
            rhs: vec![1],
        });
    }
    let v = tau.values()[0];
    if v <= 0.0 {
        return Err(Error::contract(format!("temperature must be positive, got {v}")));
    }
    Ok(())
}

/// InfoNCE over a precomputed scalar similarity matrix: row i holds the
/// similarities of query i to every target, with the positive on the
/// diagonal.
pub fn info_nce_from_sims(sims: &[Vec<Tensor>], tau: &Tensor) -> Result<Tensor> {
    check_tau(tau)?;
    let b = sims.len();
    if b == 0 {
        return Err(Error::contract("empty similarity matrix".to_string()));
    }
    if sims.iter().any(|row| row.len() != b) {
        return Err(Error::contract("similarity matrix must be square".to_string()));
    }
    let inv_tau = tau.recip()?;
    let mut total: Option<Tensor> = None;
    for (i, row) in sims.iter().enumerate() {
        let z = stack_scalars(row)?.mul_scalar(&inv_tau)?;
        let li = z.logsumexp()?.sub(&z.row(i)?)?;
        total = Some(match total {
            None => li,
            Some(t) => t.add(&li)?,
        });
    }
    total.expect("b >= 1").scale(1.0 / b as f64)
}

fn contrastive<'a>(
    queries: impl Iterator<Item = &'a Tensor>,
    batch: &Batch,
    tau: &Tensor,
    pooling: Pooling,
) -> Result<Tensor> {
    let mut sims = Vec::with_capacity(batch.len());
    for q in queries {
        let mut row = Vec::with_capacity(batch.len());
        for b in &batch.bundles {
            row.push(sim(q, &b.f_t, pooling)?);
        }
        sims.push(row);
    }
    info_nce_from_sims(&sims, tau)
}

/// Query-to-target contrastive loss with in-batch negatives.
pub fn loss_q2t(batch: &Batch, tau: &Tensor, pooling: Pooling) -> Result<Tensor> {
    contrastive(batch.bundles.iter().map(|b| &b.f_q), batch, tau, pooling)
}

/// Text-to-target auxiliary loss: the same contrast with the text-only
/// feature standing in as the query.
pub fn loss_t2t(batch: &Batch, tau: &Tensor, pooling: Pooling) -> Result<Tensor> {
    contrastive(batch.bundles.iter().map(|b| &b.f_m), batch, tau, pooling)
}

/// Prototype loss: mean over the batch of the squared distance between the
/// token-mean of the forward feature and the token-mean of the detached
/// reverse feature. The detach makes the reverse branch a fixed anchor.
pub fn loss_p2p(pairs: &[(&Tensor, &Tensor)]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::contract("prototype loss needs at least one pair".to_string()));
    }
    let mut total: Option<Tensor> = None;
    for (f_r2t, f_t2r) in pairs {
        if f_r2t.shape() != f_t2r.shape() {
            return Err(Error::Shape {
                op: "loss_p2p",
                lhs: f_r2t.shape().to_vec(),
                rhs: f_t2r.shape().to_vec(),
            });
        }
        let diff = f_r2t
            .mean_rows()?
            .sub(&f_t2r.detach().mean_rows()?)?;
        let sq = diff.mul(&diff)?.sum()?;
        total = Some(match total {
            None => sq,
            Some(t) => t.add(&sq)?,
        });
    }
    total.expect("non-empty").scale(1.0 / pairs.len() as f64)
}

/// Weighted total `L_q2t + w_t2t * L_t2t + alpha * L_p2p` plus the per-term
/// breakdown used for logging and ablation.
pub fn total_loss(
    batch: &Batch,
    cfg: &LossConfig,
    tau: &Tensor,
) -> Result<(Tensor, LossBreakdown)> {
    cfg.validate()?;
    let l_q2t = loss_q2t(batch, tau, cfg.pooling)?;
    let l_t2t = loss_t2t(batch, tau, cfg.pooling)?;

    let reverse_pairs: Vec<(&Tensor, &Tensor)> = batch
        .bundles
        .iter()
        .filter_map(|b| b.f_t2r.as_ref().map(|r| (&b.f_r2t, r)))
        .collect();
    let l_p2p = if reverse_pairs.len() == batch.len() {
        Some(loss_p2p(&reverse_pairs)?)
    } else if cfg.alpha > 0.0 {
        return Err(Error::config(format!(
            "alpha = {} requires a reverse feature on every example; {} of {} have one",
            cfg.alpha,
            reverse_pairs.len(),
            batch.len()
        )));
    } else {
        None
    };

    let mut total = l_q2t.add(&l_t2t.scale(cfg.w_t2t)?)?;
    if let Some(lp) = &l_p2p {
        total = total.add(&lp.scale(cfg.alpha)?)?;
    }
    let breakdown = LossBreakdown {
        step: 0,
        l_q2t: l_q2t.item(),
        l_t2t: l_t2t.item(),
        l_p2p: l_p2p.as_ref().map(|t| t.item()).unwrap_or(0.0),
        total: total.item(),
        tau: tau.values()[0],
    };
    Ok((total, breakdown))
}
