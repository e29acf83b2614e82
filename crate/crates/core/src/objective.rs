//! Training objective: two-direction softmax cross-entropy plus the soft
//! orthogonality and unit-norm penalties on the generated mapping matrices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, GradTape, Var};
use crate::data::{FilterIndex, Triple};
use crate::error::{MeimError, Result};
use crate::model::{
    forward_queries, Direction, MappingMatrices, Mode, ModelConfig, ModelParams, ParamVars, Query,
    QueryForward, Sampling,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ortho: f64,
    pub lambda_unitnorm: f64,
    pub p: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ortho: 0.0,
            lambda_unitnorm: 0.0,
            p: 3,
        }
    }
}

impl LossWeights {
    pub fn from_config(config: &ModelConfig) -> Self {
        LossWeights {
            lambda_ortho: config.lambda_ortho,
            lambda_unitnorm: config.lambda_unitnorm,
            p: config.p_norm,
        }
    }
}

/// Sparse target rows over all entities; each row sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution {
    pub num_entities: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl TargetDistribution {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows.len().max(1), self.num_entities]);
        for (i, row) in self.rows.iter().enumerate() {
            for &(e, p) in row {
                out.row_mut(i)[e] += p;
            }
        }
        out
    }
}

/// Batch mean of
/// `lambda_ortho * (sum_k ||M_k^T M_k - I||_F^2 + lambda_unitnorm * sum_k |r_k^T r_k - 1|^p)`.
pub fn ortho_loss(m: &MappingMatrices, r_partitions: &Tensor, w: &LossWeights) -> Result<f64> {
    let (b, k, c) = (m.batch(), m.partitions(), m.size());
    if r_partitions.rank() != 3 {
        return Err(MeimError::dim(
            "relation partition rank",
            3,
            r_partitions.rank(),
        ));
    }
    if r_partitions.dim(0) != b {
        return Err(MeimError::dim("relation batch", b, r_partitions.dim(0)));
    }
    if r_partitions.dim(1) != k {
        return Err(MeimError::dim(
            "relation partitions",
            k,
            r_partitions.dim(1),
        ));
    }
    let cr = r_partitions.dim(2);
    let mut total = 0.0;
    for n in 0..b {
        let mut frob = 0.0;
        let mut unit = 0.0;
        for kk in 0..k {
            let mk = m.block(n, kk);
            for i in 0..c {
                for j in 0..c {
                    let g: f64 = (0..c).map(|a| mk[a * c + i] * mk[a * c + j]).sum();
                    let d = g - if i == j { 1.0 } else { 0.0 };
                    frob += d * d;
                }
            }
            let rk = &r_partitions.data()[(n * k + kk) * cr..(n * k + kk + 1) * cr];
            let sq: f64 = rk.iter().map(|x| x * x).sum();
            unit += (sq - 1.0).abs().powi(w.p as i32);
        }
        total += frob + w.lambda_unitnorm * unit;
    }
    Ok(w.lambda_ortho * total / b as f64)
}

/// Target rows for the `direction` queries of `batch`.
///
/// `filter` should index the training split only.
pub fn build_targets(
    batch: &[Triple],
    direction: Direction,
    filter: &FilterIndex,
    sampling: Sampling,
    num_entities: usize,
) -> Result<TargetDistribution> {
    let mut rows = Vec::with_capacity(batch.len());
    for t in batch {
        let answer = match direction {
            Direction::Tail => t.tail,
            Direction::Head => t.head,
        };
        if answer >= num_entities {
            return Err(MeimError::Lookup {
                kind: "entity",
                id: answer,
                size: num_entities,
            });
        }
        let row = match sampling {
            Sampling::OneVsAll => vec![(answer, 1.0)],
            Sampling::KVsAll => {
                let set = match direction {
                    Direction::Tail => filter.true_tails(t.head, t.relation),
                    Direction::Head => filter.true_heads(t.tail, t.relation),
                };
                if set.is_empty() {
                    return Err(MeimError::Validation(format!(
                        "no known answers for {direction:?} query of {t:?}; \
                         k-vs-all targets need a training-split filter"
                    )));
                }
                let p = 1.0 / set.len() as f64;
                set.iter().map(|&e| (e, p)).collect()
            }
        };
        rows.push(row);
    }
    Ok(TargetDistribution { num_entities, rows })
}

/// Tail queries for every triple followed by head queries for every triple.
pub fn batch_queries(batch: &[Triple]) -> Vec<Query> {
    let tails = batch.iter().map(|t| Query {
        anchor: t.head,
        relation: t.relation,
        direction: Direction::Tail,
    });
    let heads = batch.iter().map(|t| Query {
        anchor: t.tail,
        relation: t.relation,
        direction: Direction::Head,
    });
    tails.chain(heads).collect()
}

/// Loss nodes recorded on a tape.
pub struct LossGraph {
    pub total: Var,
    pub link: Var,
    pub ortho: Option<Var>,
    pub forward: QueryForward,
}

/// Records the full objective for `batch` on `tape`.
///
/// The penalty is evaluated once per distinct relation and weighted by its
/// share of the batch, which equals the per-triple batch mean.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape(
    params: &ModelParams,
    tape: &mut GradTape,
    vars: &ParamVars,
    batch: &[Triple],
    targets_tail: &TargetDistribution,
    targets_head: &TargetDistribution,
    w: &LossWeights,
    mode: Mode<'_>,
) -> Result<LossGraph> {
    let b = batch.len();
    if b == 0 {
        return Err(MeimError::Validation("empty batch".into()));
    }
    for (name, t) in [
        ("tail targets", targets_tail),
        ("head targets", targets_head),
    ] {
        if t.len() != b {
            return Err(MeimError::dim(name, b, t.len()));
        }
    }
    let forward = forward_queries(params, tape, vars, &batch_queries(batch), mode)?;
    let rows: Vec<Vec<(usize, f64)>> = targets_tail
        .rows
        .iter()
        .chain(&targets_head.rows)
        .cloned()
        .collect();
    let ce = tape.softmax_cross_entropy(forward.logits, rows)?;
    let link = tape.scale(ce, 1.0 / b as f64);

    if w.lambda_ortho == 0.0 {
        return Ok(LossGraph {
            total: link,
            link,
            ortho: None,
            forward,
        });
    }
    let mut weights = vec![0.0; forward.unique_relations.len()];
    for t in batch {
        let slot = forward
            .unique_relations
            .iter()
            .position(|&r| r == t.relation)
            .expect("batch relation present in forward pass");
        weights[slot] += 1.0 / b as f64;
    }
    let frob = tape.ortho_penalty(forward.maps, &weights)?;
    let mut penalty = frob;
    if w.lambda_unitnorm > 0.0 {
        let unit = tape.unit_norm_penalty(forward.relations, params.config.k, &weights, w.p)?;
        let unit = tape.scale(unit, w.lambda_unitnorm);
        penalty = tape.add(penalty, unit)?;
    }
    let ortho = tape.scale(penalty, w.lambda_ortho);
    let total = tape.add(link, ortho)?;
    Ok(LossGraph {
        total,
        link,
        ortho: Some(ortho),
        forward,
    })
}

/// Mean two-direction cross-entropy in evaluation mode.
pub fn link_prediction_loss(
    params: &ModelParams,
    batch: &[Triple],
    targets_tail: &TargetDistribution,
    targets_head: &TargetDistribution,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let g = loss_on_tape(
        params,
        &mut tape,
        &vars,
        batch,
        targets_tail,
        targets_head,
        &LossWeights::default(),
        Mode::Eval,
    )?;
    Ok(tape.scalar(g.link))
}

/// Link-prediction loss plus the orthogonality penalty, in evaluation mode.
pub fn total_loss(
    params: &ModelParams,
    batch: &[Triple],
    targets_tail: &TargetDistribution,
    targets_head: &TargetDistribution,
    w: &LossWeights,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let g = loss_on_tape(
        params,
        &mut tape,
        &vars,
        batch,
        targets_tail,
        targets_head,
        w,
        Mode::Eval,
    )?;
    Ok(tape.scalar(g.total))
}

/// Training-mode loss and gradients with respect to every trainable tensor.
///
/// Dropout masks come from `dropout_seed`, so repeated calls at the same
/// point agree exactly.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[Triple],
    targets_tail: &TargetDistribution,
    targets_head: &TargetDistribution,
    w: &LossWeights,
    dropout_seed: u64,
) -> Result<(f64, Vec<(&'static str, Tensor)>)> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let g = loss_on_tape(
        params,
        &mut tape,
        &vars,
        batch,
        targets_tail,
        targets_head,
        w,
        Mode::Train { rng: &mut rng },
    )?;
    let mut grads = tape.backward(g.total)?;
    let out = params
        .trainable()
        .into_iter()
        .map(|(name, _)| {
            let var = vars.by_name(name).expect("registered parameter");
            (name, grads.take(var))
        })
        .collect();
    Ok((tape.scalar(g.total), out))
}

/// Largest relative disagreement between the analytic gradient of the
/// training objective and central finite differences.
pub fn gradient_audit(
    params: &ModelParams,
    batch: &[Triple],
    targets_tail: &TargetDistribution,
    targets_head: &TargetDistribution,
    w: &LossWeights,
    step: f64,
) -> Result<f64> {
    // surface configuration errors before probing
    loss_and_grads(params, batch, targets_tail, targets_head, w, 0)?;
    let flat: Vec<f64> = params
        .trainable()
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect();
    let mut probe = params.clone();
    let eval = |x: &[f64]| {
        let mut offset = 0;
        for (_, t) in probe.trainable_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&x[offset..offset + n]);
            offset += n;
        }
        match loss_and_grads(&probe, batch, targets_tail, targets_head, w, 0) {
            Ok((loss, grads)) => (
                loss,
                grads.into_iter().flat_map(|(_, g)| g.into_data()).collect(),
            ),
            Err(_) => (f64::NAN, Vec::new()),
        }
    };
    Ok(finite_diff_check(eval, &flat, step))
}
