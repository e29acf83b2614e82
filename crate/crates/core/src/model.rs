//! The multi-partition embedding interaction model.
//!
//! Entity and relation embeddings are split into `k` partitions. Partition
//! `k` of a relation generates a `ce x ce` mapping matrix from its core
//! tensor, and the score sums the `k` local bilinear scores
//! `h_k^T M_k t_k`. Cores are either one tensor shared by every partition
//! or `k` independent tensors stacked along a leading axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, GradTape, NormStats, Var};
use crate::error::{MeimError, Result};
use crate::par::Exec;
use crate::tensor::{self, n_mode_product, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreMode {
    Shared,
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    OneVsAll,
    KVsAll,
}

/// Batch-normalization granularity for the input and hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Off,
    /// One statistic per feature of the flattened `k * ce` vector.
    Flattened,
    /// One statistic per partition, pooled over its `ce` features.
    PerPartition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreForm {
    /// Successive mode-1, mode-2 and mode-3 contractions of each core.
    BlockTerm,
    /// `h_k^T M_k t_k` with `M_k` generated from the relation partition.
    Bilinear,
}

/// Which side of a triple is being predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Rank candidate tails for `(head, relation)`.
    Tail,
    /// Rank candidate heads for `(tail, relation)`.
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub k: usize,
    pub ce: usize,
    pub cr: usize,
    pub core_mode: CoreMode,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    pub lambda_ortho: f64,
    pub lambda_unitnorm: f64,
    pub p_norm: u32,
    pub sampling: Sampling,
    pub norm: NormMode,
    /// Keeps the core tensor constant during training.
    pub freeze_core: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_entities: usize, num_relations: usize, k: usize, ce: usize, cr: usize) -> Self {
        ModelConfig {
            num_entities,
            num_relations,
            k,
            ce,
            cr,
            core_mode: CoreMode::Independent,
            input_dropout: 0.0,
            hidden_dropout: 0.0,
            lambda_ortho: 0.0,
            lambda_unitnorm: 0.0,
            p_norm: 3,
            sampling: Sampling::OneVsAll,
            norm: NormMode::Flattened,
            freeze_core: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_entities", self.num_entities),
            ("num_relations", self.num_relations),
            ("k", self.k),
            ("ce", self.ce),
            ("cr", self.cr),
            ("p_norm", self.p_norm as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MeimError::Config(format!("{name} must be positive")));
        }
        for (name, rate) in [
            ("input_dropout", self.input_dropout),
            ("hidden_dropout", self.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(MeimError::Config(format!(
                    "{name} must lie in [0, 1), got {rate}"
                )));
            }
        }
        for (name, v) in [
            ("lambda_ortho", self.lambda_ortho),
            ("lambda_unitnorm", self.lambda_unitnorm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MeimError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn entity_dim(&self) -> usize {
        self.k * self.ce
    }

    pub fn relation_dim(&self) -> usize {
        self.k * self.cr
    }

    pub fn core_count(&self) -> usize {
        match self.core_mode {
            CoreMode::Shared => 1,
            CoreMode::Independent => self.k,
        }
    }

    pub fn core_shape(&self) -> [usize; 4] {
        [self.core_count(), self.ce, self.ce, self.cr]
    }

    /// `(groups, group_size)` of the normalization layers, if enabled.
    pub fn norm_groups(&self) -> Option<(usize, usize)> {
        match self.norm {
            NormMode::Off => None,
            NormMode::Flattened => Some((self.k * self.ce, 1)),
            NormMode::PerPartition => Some((self.k, self.ce)),
        }
    }
}

/// Affine batch-normalization layer with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(groups: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[groups], 1.0),
            beta: Tensor::zeros(&[groups]),
            running_mean: Tensor::zeros(&[groups]),
            running_var: Tensor::full(&[groups], 1.0),
        }
    }

    pub fn groups(&self) -> usize {
        self.gamma.len()
    }

    /// Folds running statistics into per-feature `(scale, shift)`.
    pub fn eval_affine(&self, group_size: usize) -> (Vec<f64>, Vec<f64>) {
        let features = self.groups() * group_size;
        let mut scale = Vec::with_capacity(features);
        let mut shift = Vec::with_capacity(features);
        for f in 0..features {
            let c = f / group_size;
            let s = self.gamma.data()[c] / (self.running_var.data()[c] + BN_EPS).sqrt();
            scale.push(s);
            shift.push(self.beta.data()[c] - s * self.running_mean.data()[c]);
        }
        (scale, shift)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        if let Some(var) = &stats.unbiased_var {
            for (r, v) in self.running_var.data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

/// The complete trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[num_entities, k, ce]`
    pub entity_emb: Tensor,
    /// `[num_relations, k, cr]`
    pub relation_emb: Tensor,
    /// `[k or 1, ce, ce, cr]`
    pub core: Tensor,
    pub bn_input: Option<BatchNorm>,
    pub bn_hidden: Option<BatchNorm>,
}

/// Mapping matrices for a batch, `[batch, k, ce, ce]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingMatrices {
    pub m: Tensor,
}

impl MappingMatrices {
    pub fn batch(&self) -> usize {
        self.m.dim(0)
    }

    pub fn partitions(&self) -> usize {
        self.m.dim(1)
    }

    pub fn size(&self) -> usize {
        self.m.dim(2)
    }

    /// Row-major `ce x ce` block for example `n`, partition `k`.
    pub fn block(&self, n: usize, k: usize) -> &[f64] {
        let c = self.size();
        let start = (n * self.partitions() + k) * c * c;
        &self.m.data()[start..start + c * c]
    }
}

/// Tape handles of the trainable tensors.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub entity: Var,
    pub relation: Var,
    pub core: Var,
    pub bn_input: Option<(Var, Var)>,
    pub bn_hidden: Option<(Var, Var)>,
}

impl ParamVars {
    /// Tape handle for a name returned by [`ModelParams::trainable`].
    pub fn by_name(&self, name: &str) -> Option<Var> {
        match name {
            "entity_emb" => Some(self.entity),
            "relation_emb" => Some(self.relation),
            "core" => Some(self.core),
            "bn_input.gamma" => self.bn_input.map(|p| p.0),
            "bn_input.beta" => self.bn_input.map(|p| p.1),
            "bn_hidden.gamma" => self.bn_hidden.map(|p| p.0),
            "bn_hidden.beta" => self.bn_hidden.map(|p| p.1),
            _ => None,
        }
    }
}

/// One ranking query: the known entity, the relation and the side to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub anchor: usize,
    pub relation: usize,
    pub direction: Direction,
}

/// Forward pass switches.
pub enum Mode<'a> {
    /// Dropout off, normalization with running statistics.
    Eval,
    /// Dropout on, normalization with batch statistics.
    Train { rng: &'a mut ChaCha8Rng },
}

/// Statistics measured by the normalization layers during a training pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormUpdates {
    pub input: Option<BatchStats>,
    pub hidden: Option<BatchStats>,
}

/// Result of [`forward_queries`].
pub struct QueryForward {
    /// `[queries, num_entities]` candidate scores.
    pub logits: Var,
    /// `[unique relations, k, ce, ce]` mapping matrices.
    pub maps: Var,
    /// `[unique relations, k * cr]` relation rows used to build `maps`.
    pub relations: Var,
    pub unique_relations: Vec<usize>,
    pub norm_updates: NormUpdates,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

impl ModelParams {
    /// Seeded initialization; every tensor slice is drawn uniformly from
    /// `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (k, ce, cr) = (config.k, config.ce, config.cr);
        let ent_bound = (6.0 / (k + ce) as f64).sqrt();
        let rel_bound = (6.0 / (k + cr) as f64).sqrt();
        // each core slice maps a relation partition (cr) to a ce x ce matrix
        let core_bound = (6.0 / (cr + ce * ce) as f64).sqrt();
        let entity_emb = uniform(&[config.num_entities, k, ce], ent_bound, &mut rng);
        let relation_emb = uniform(&[config.num_relations, k, cr], rel_bound, &mut rng);
        let core = uniform(&config.core_shape(), core_bound, &mut rng);
        let (bn_input, bn_hidden) = match config.norm_groups() {
            Some((groups, _)) => (Some(BatchNorm::new(groups)), Some(BatchNorm::new(groups))),
            None => (None, None),
        };
        Ok(ModelParams {
            config: config.clone(),
            entity_emb,
            relation_emb,
            core,
            bn_input,
            bn_hidden,
        })
    }

    /// Initializes as [`ModelParams::init`] and then installs `core`.
    pub fn with_core(config: &ModelConfig, core: Tensor) -> Result<Self> {
        let mut params = Self::init(config)?;
        if core.shape() != config.core_shape() {
            return Err(MeimError::Validation(format!(
                "core shape {:?} does not match {:?}",
                core.shape(),
                config.core_shape()
            )));
        }
        params.core = core;
        Ok(params)
    }

    pub fn entity(&self, id: usize) -> Result<&[f64]> {
        if id >= self.config.num_entities {
            return Err(MeimError::Lookup {
                kind: "entity",
                id,
                size: self.config.num_entities,
            });
        }
        Ok(self.entity_emb.row(id))
    }

    pub fn relation(&self, id: usize) -> Result<&[f64]> {
        if id >= self.config.num_relations {
            return Err(MeimError::Lookup {
                kind: "relation",
                id,
                size: self.config.num_relations,
            });
        }
        Ok(self.relation_emb.row(id))
    }

    /// Core tensor for partition `k` as a rank-3 `[ce, ce, cr]` tensor.
    pub fn core_slice(&self, k: usize) -> Tensor {
        let c = &self.config;
        let idx = if self.core.dim(0) == 1 { 0 } else { k };
        let len = c.ce * c.ce * c.cr;
        Tensor::new(
            vec![c.ce, c.ce, c.cr],
            self.core.data()[idx * len..(idx + 1) * len].to_vec(),
        )
        .expect("core slice shape")
    }

    /// Named trainable tensors in a fixed order.
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("entity_emb", &self.entity_emb),
            ("relation_emb", &self.relation_emb),
        ];
        if !self.config.freeze_core {
            out.push(("core", &self.core));
        }
        if let Some(bn) = &self.bn_input {
            out.push(("bn_input.gamma", &bn.gamma));
            out.push(("bn_input.beta", &bn.beta));
        }
        if let Some(bn) = &self.bn_hidden {
            out.push(("bn_hidden.gamma", &bn.gamma));
            out.push(("bn_hidden.beta", &bn.beta));
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("entity_emb", &mut self.entity_emb),
            ("relation_emb", &mut self.relation_emb),
        ];
        if !self.config.freeze_core {
            out.push(("core", &mut self.core));
        }
        if let Some(bn) = &mut self.bn_input {
            out.push(("bn_input.gamma", &mut bn.gamma));
            out.push(("bn_input.beta", &mut bn.beta));
        }
        if let Some(bn) = &mut self.bn_hidden {
            out.push(("bn_hidden.gamma", &mut bn.gamma));
            out.push(("bn_hidden.beta", &mut bn.beta));
        }
        out
    }

    /// Every stored tensor (trainable or not) by name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("entity_emb".to_string(), &self.entity_emb),
            ("relation_emb".to_string(), &self.relation_emb),
            ("core".to_string(), &self.core),
        ];
        for (prefix, bn) in [("bn_input", &self.bn_input), ("bn_hidden", &self.bn_hidden)] {
            if let Some(bn) = bn {
                out.push((format!("{prefix}.gamma"), &bn.gamma));
                out.push((format!("{prefix}.beta"), &bn.beta));
                out.push((format!("{prefix}.running_mean"), &bn.running_mean));
                out.push((format!("{prefix}.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn named_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (prefix, field) = name.split_once('.').unwrap_or((name, ""));
        let bn = match prefix {
            "entity_emb" => return Some(&mut self.entity_emb),
            "relation_emb" => return Some(&mut self.relation_emb),
            "core" => return Some(&mut self.core),
            "bn_input" => self.bn_input.as_mut()?,
            "bn_hidden" => self.bn_hidden.as_mut()?,
            _ => return None,
        };
        match field {
            "gamma" => Some(&mut bn.gamma),
            "beta" => Some(&mut bn.beta),
            "running_mean" => Some(&mut bn.running_mean),
            "running_var" => Some(&mut bn.running_var),
            _ => None,
        }
    }

    pub fn register(&self, tape: &mut GradTape) -> ParamVars {
        let entity = tape.leaf(self.entity_emb.clone());
        let relation = tape.leaf(self.relation_emb.clone());
        let core = tape.leaf(self.core.clone());
        let mut leaf_pair = |bn: &Option<BatchNorm>| {
            bn.as_ref()
                .map(|bn| (tape.leaf(bn.gamma.clone()), tape.leaf(bn.beta.clone())))
        };
        let bn_input = leaf_pair(&self.bn_input);
        let bn_hidden = leaf_pair(&self.bn_hidden);
        ParamVars {
            entity,
            relation,
            core,
            bn_input,
            bn_hidden,
        }
    }

    pub fn apply_norm_updates(&mut self, updates: &NormUpdates) {
        if let (Some(bn), Some(stats)) = (&mut self.bn_input, &updates.input) {
            bn.update_running(stats);
        }
        if let (Some(bn), Some(stats)) = (&mut self.bn_hidden, &updates.hidden) {
            bn.update_running(stats);
        }
    }

    fn eval_affine(&self, bn: &Option<BatchNorm>) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.entity_dim();
        match (bn, self.config.norm_groups()) {
            (Some(bn), Some((_, group_size))) => bn.eval_affine(group_size),
            _ => (vec![1.0; d], vec![0.0; d]),
        }
    }
}

/// Views a flat `[k * c]` embedding as `[k, c]`.
pub fn partition(flat: &Tensor, k: usize, c: usize) -> Result<Tensor> {
    if k == 0 || c == 0 || flat.len() != k * c {
        return Err(MeimError::Config(format!(
            "cannot split {} values into {k} partitions of size {c}",
            flat.len()
        )));
    }
    Tensor::new(vec![k, c], flat.data().to_vec())
}

pub fn flatten(t: &Tensor) -> Tensor {
    Tensor::vector(t.data().to_vec())
}

/// Builds `M[n, k] = W_k x_3 r_{n,k}` for each relation id.
pub fn generate_mappings(params: &ModelParams, relation_ids: &[usize]) -> Result<MappingMatrices> {
    let c = &params.config;
    let slices: Vec<Tensor> = (0..c.k).map(|k| params.core_slice(k)).collect();
    let mut data = Vec::with_capacity(relation_ids.len() * c.k * c.ce * c.ce);
    for &rid in relation_ids {
        let r = partition(&Tensor::vector(params.relation(rid)?.to_vec()), c.k, c.cr)?;
        for (k, slice) in slices.iter().enumerate() {
            let rk = Tensor::vector(r.row(k).to_vec());
            data.extend_from_slice(n_mode_product(slice, &rk, 3)?.data());
        }
    }
    if relation_ids.is_empty() {
        return Err(MeimError::Validation("no relation ids given".into()));
    }
    Ok(MappingMatrices {
        m: Tensor::new(vec![relation_ids.len(), c.k, c.ce, c.ce], data)?,
    })
}

/// Scores one triple in evaluation mode.
///
/// With normalization enabled, the input layer acts on `h` and the hidden
/// layer on `h^T M`, each folded into a per-feature affine map from the
/// running statistics. Both forms then compute the same quantity by
/// different contraction orders.
pub fn score(params: &ModelParams, h: usize, t: usize, r: usize, form: ScoreForm) -> Result<f64> {
    let c = &params.config;
    let (in_scale, in_shift) = params.eval_affine(&params.bn_input);
    let (hid_scale, hid_shift) = params.eval_affine(&params.bn_hidden);
    let hv = params.entity(h)?;
    let tv = params.entity(t)?;
    let rv = params.relation(r)?;
    let h_in: Vec<f64> = hv
        .iter()
        .zip(&in_scale)
        .zip(&in_shift)
        .map(|((x, s), b)| s * x + b)
        .collect();
    let t_scaled: Vec<f64> = tv.iter().zip(&hid_scale).map(|(x, s)| s * x).collect();
    let bias: f64 = tensor::dot(&hid_shift, tv);

    let mut total = 0.0;
    for k in 0..c.k {
        let w = params.core_slice(k);
        let hk = Tensor::vector(h_in[k * c.ce..(k + 1) * c.ce].to_vec());
        let tk = &t_scaled[k * c.ce..(k + 1) * c.ce];
        let rk = Tensor::vector(rv[k * c.cr..(k + 1) * c.cr].to_vec());
        total += match form {
            ScoreForm::BlockTerm => {
                // W x_1 h -> [ce, cr]; then x_2 t -> [cr]; then x_3 r
                let wh = n_mode_product(&w, &hk, 1)?;
                let cols = wh.dim(1);
                let mut whr = vec![0.0; cols];
                for (row, &tj) in wh.data().chunks_exact(cols).zip(tk) {
                    for (acc, w) in whr.iter_mut().zip(row) {
                        *acc += w * tj;
                    }
                }
                tensor::dot(&whr, rk.data())
            }
            ScoreForm::Bilinear => {
                let m = n_mode_product(&w, &rk, 3)?;
                let mt: Vec<f64> = (0..c.ce)
                    .map(|i| tensor::dot(&m.data()[i * c.ce..(i + 1) * c.ce], tk))
                    .collect();
                tensor::dot(hk.data(), &mt)
            }
        };
    }
    Ok(total + bias)
}

fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Scores every candidate entity for a batch of queries on `tape`.
///
/// The query entity passes through input normalization and dropout, is
/// mapped by the relation's block-diagonal matrix (`h^T M` for tail
/// queries, `M t` for head queries), passes through hidden normalization
/// and dropout, and is finally matched against all entity embeddings.
pub fn forward_queries(
    params: &ModelParams,
    tape: &mut GradTape,
    vars: &ParamVars,
    queries: &[Query],
    mode: Mode<'_>,
) -> Result<QueryForward> {
    let c = &params.config;
    if queries.is_empty() {
        return Err(MeimError::Validation("empty query batch".into()));
    }
    let mut unique_relations: Vec<usize> = Vec::new();
    let mut slot = vec![usize::MAX; c.num_relations];
    let mut map_row = Vec::with_capacity(queries.len());
    let mut anchors = Vec::with_capacity(queries.len());
    for q in queries {
        params.entity(q.anchor)?;
        params.relation(q.relation)?;
        if slot[q.relation] == usize::MAX {
            slot[q.relation] = unique_relations.len();
            unique_relations.push(q.relation);
        }
        map_row.push(slot[q.relation]);
        anchors.push(q.anchor);
    }
    let transpose: Vec<bool> = queries
        .iter()
        .map(|q| q.direction == Direction::Head)
        .collect();

    let relations = tape.gather(vars.relation, &unique_relations)?;
    let maps = tape.mapping(vars.core, relations, c.k)?;

    let (mut rng, training) = match mode {
        Mode::Eval => (None, false),
        Mode::Train { rng } => (Some(rng), true),
    };
    let mut updates = NormUpdates::default();

    let mut x = tape.gather(vars.entity, &anchors)?;
    if let (Some((g, b)), Some(bn), Some((_, group))) =
        (vars.bn_input, &params.bn_input, c.norm_groups())
    {
        let stats = if training {
            NormStats::Batch { eps: BN_EPS }
        } else {
            NormStats::Fixed {
                mean: bn.running_mean.data(),
                var: bn.running_var.data(),
                eps: BN_EPS,
            }
        };
        let (y, measured) = tape.batch_norm(x, g, b, group, stats)?;
        x = y;
        updates.input = measured;
    }
    if let Some(rng) = rng.as_deref_mut() {
        if c.input_dropout > 0.0 {
            let mask = dropout_mask(tape.value(x).len(), c.input_dropout, rng);
            x = tape.mul_const(x, mask)?;
        }
    }

    let mut hidden = tape.query_map(x, maps, &map_row, &transpose)?;
    if let (Some((g, b)), Some(bn), Some((_, group))) =
        (vars.bn_hidden, &params.bn_hidden, c.norm_groups())
    {
        let stats = if training {
            NormStats::Batch { eps: BN_EPS }
        } else {
            NormStats::Fixed {
                mean: bn.running_mean.data(),
                var: bn.running_var.data(),
                eps: BN_EPS,
            }
        };
        let (y, measured) = tape.batch_norm(hidden, g, b, group, stats)?;
        hidden = y;
        updates.hidden = measured;
    }
    if let Some(rng) = rng {
        if c.hidden_dropout > 0.0 {
            let mask = dropout_mask(tape.value(hidden).len(), c.hidden_dropout, rng);
            hidden = tape.mul_const(hidden, mask)?;
        }
    }

    let logits = tape.matmul_nt(hidden, vars.entity)?;
    Ok(QueryForward {
        logits,
        maps,
        relations,
        unique_relations,
        norm_updates: updates,
    })
}

/// Evaluation-mode scores of all entities for each query, `[queries, entities]`.
pub fn score_queries(params: &ModelParams, queries: &[Query], exec: Exec) -> Result<Tensor> {
    let mut tape = GradTape::with_exec(exec);
    let vars = params.register(&mut tape);
    let fwd = forward_queries(params, &mut tape, &vars, queries, Mode::Eval)?;
    Ok(tape.value(fwd.logits).clone())
}

/// Scores `(h, e, r)` for every entity `e`.
pub fn score_all_tails(params: &ModelParams, h: usize, r: usize) -> Result<Tensor> {
    let q = Query {
        anchor: h,
        relation: r,
        direction: Direction::Tail,
    };
    let n = params.config.num_entities;
    score_queries(params, &[q], Exec::default())?.reshape(vec![n])
}

/// Scores `(e, t, r)` for every entity `e` through the transposed mapping.
pub fn score_all_heads(params: &ModelParams, t: usize, r: usize) -> Result<Tensor> {
    let q = Query {
        anchor: t,
        relation: r,
        direction: Direction::Head,
    };
    let n = params.config.num_entities;
    score_queries(params, &[q], Exec::default())?.reshape(vec![n])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecialCase {
    DistMult,
    ComplEx,
    Rescal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialCaseSizes {
    pub num_entities: usize,
    pub num_relations: usize,
    pub k: usize,
    pub ce: usize,
    pub cr: usize,
}

/// Configuration plus a constant core under which the model reproduces a
/// classic bilinear scorer.
///
/// * DistMult (`ce = cr = 1`): `sum_k h_k t_k r_k`.
/// * ComplEx (`ce = cr = 2`): each partition is one complex component and
///   `M_k = [[re r, -im r], [im r, re r]]`, so the score is
///   `Re(sum_k conj(h_k) r_k t_k)`.
/// * RESCAL (`k = 1`, `cr = ce^2`): `M` is `r` reshaped row-major.
pub fn make_special_case(
    kind: SpecialCase,
    sizes: SpecialCaseSizes,
) -> Result<(ModelConfig, Tensor)> {
    let SpecialCaseSizes { k, ce, cr, .. } = sizes;
    let ok = match kind {
        SpecialCase::DistMult => ce == 1 && cr == 1,
        SpecialCase::ComplEx => ce == 2 && cr == 2,
        SpecialCase::Rescal => k == 1 && cr == ce * ce,
    };
    if !ok || k == 0 || ce == 0 {
        return Err(MeimError::Config(format!(
            "{kind:?} requires {}; got k={k}, ce={ce}, cr={cr}",
            match kind {
                SpecialCase::DistMult => "ce = cr = 1",
                SpecialCase::ComplEx => "ce = cr = 2",
                SpecialCase::Rescal => "k = 1 and cr = ce^2",
            }
        )));
    }
    let mut core = Tensor::zeros(&[1, ce, ce, cr]);
    match kind {
        SpecialCase::DistMult => core.set(&[0, 0, 0, 0], 1.0),
        SpecialCase::ComplEx => {
            core.set(&[0, 0, 0, 0], 1.0);
            core.set(&[0, 0, 1, 1], -1.0);
            core.set(&[0, 1, 0, 1], 1.0);
            core.set(&[0, 1, 1, 0], 1.0);
        }
        SpecialCase::Rescal => {
            for i in 0..ce {
                for j in 0..ce {
                    core.set(&[0, i, j, i * ce + j], 1.0);
                }
            }
        }
    }
    let mut config = ModelConfig::new(sizes.num_entities, sizes.num_relations, k, ce, cr);
    config.core_mode = CoreMode::Shared;
    config.norm = NormMode::Off;
    config.freeze_core = true;
    config.validate()?;
    Ok((config, core))
}

/// Embedding plus core parameters; normalization affine terms are excluded.
pub fn count_params(config: &ModelConfig) -> u64 {
    let (e, r) = (config.num_entities as u64, config.num_relations as u64);
    let (k, ce, cr) = (config.k as u64, config.ce as u64, config.cr as u64);
    e * k * ce + r * k * cr + config.core_count() as u64 * ce * ce * cr
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn plain_config(e: usize, r: usize, k: usize, ce: usize, cr: usize, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::new(e, r, k, ce, cr);
        c.norm = NormMode::Off;
        c.seed = seed;
        c
    }

    /// sum_{k,i,j,l} W[k,i,j,l] h[k,i] t[k,j] r[k,l]
    fn brute_force(p: &ModelParams, h: usize, t: usize, r: usize) -> f64 {
        let c = &p.config;
        let (hv, tv, rv) = (
            p.entity_emb.row(h),
            p.entity_emb.row(t),
            p.relation_emb.row(r),
        );
        let mut s = 0.0;
        for k in 0..c.k {
            let wk = if p.core.dim(0) == 1 { 0 } else { k };
            for i in 0..c.ce {
                for j in 0..c.ce {
                    for l in 0..c.cr {
                        s += p.core.get(&[wk, i, j, l])
                            * hv[k * c.ce + i]
                            * tv[k * c.ce + j]
                            * rv[k * c.cr + l];
                    }
                }
            }
        }
        s
    }

    #[test]
    fn partition_examples() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = partition(&x, 3, 2).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.row(1), &[3.0, 4.0]);
        let one = partition(&x, 1, 6).unwrap();
        assert_eq!(one.row(0), x.data());
        assert!(matches!(partition(&x, 4, 2), Err(MeimError::Config(_))));
    }

    #[test]
    fn single_cell_score() {
        let config = plain_config(2, 1, 1, 1, 1, 0);
        let mut p = ModelParams::with_core(&config, Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        p.entity_emb = Tensor::new(vec![2, 1, 1], vec![2.0, 3.0]).unwrap();
        p.relation_emb = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        for form in [ScoreForm::BlockTerm, ScoreForm::Bilinear] {
            assert_eq!(score(&p, 0, 1, 0, form).unwrap(), 30.0);
        }
    }

    #[test]
    fn zero_relation_scores_zero() {
        let config = plain_config(4, 2, 2, 3, 2, 1);
        let mut p = ModelParams::init(&config).unwrap();
        p.relation_emb = Tensor::zeros(p.relation_emb.shape());
        for form in [ScoreForm::BlockTerm, ScoreForm::Bilinear] {
            assert_eq!(score(&p, 0, 1, 1, form).unwrap(), 0.0);
        }
    }

    #[test]
    fn invalid_ids_are_lookup_errors() {
        let p = ModelParams::init(&plain_config(3, 2, 1, 2, 2, 0)).unwrap();
        assert!(matches!(
            score(&p, 3, 0, 0, ScoreForm::Bilinear),
            Err(MeimError::Lookup { kind: "entity", .. })
        ));
        assert!(matches!(
            generate_mappings(&p, &[2]),
            Err(MeimError::Lookup {
                kind: "relation",
                ..
            })
        ));
        assert!(score_all_tails(&p, 0, 5).is_err());
    }

    #[test]
    fn mappings_zero_and_identity() {
        let config = plain_config(3, 2, 2, 2, 2, 0);
        let zero = ModelParams::with_core(&config, Tensor::zeros(&config.core_shape())).unwrap();
        assert!(generate_mappings(&zero, &[0, 1])
            .unwrap()
            .m
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let mut core = Tensor::zeros(&config.core_shape());
        for k in 0..2 {
            for i in 0..2 {
                core.set(&[k, i, i, 0], 1.0);
            }
        }
        let mut p = ModelParams::with_core(&config, core).unwrap();
        p.relation_emb =
            Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.5, 0.0, 0.5, 0.0]).unwrap();
        let m = generate_mappings(&p, &[0]).unwrap();
        for k in 0..2 {
            assert_eq!(m.block(0, k), &[1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn mappings_match_triple_loop() {
        for mode in [CoreMode::Shared, CoreMode::Independent] {
            let mut config = plain_config(3, 3, 2, 2, 2, 7);
            config.core_mode = mode;
            let p = ModelParams::init(&config).unwrap();
            let ids = [2, 0, 2];
            let m = generate_mappings(&p, &ids).unwrap();
            for (n, &rid) in ids.iter().enumerate() {
                for k in 0..2 {
                    let wk = if mode == CoreMode::Shared { 0 } else { k };
                    for i in 0..2 {
                        for j in 0..2 {
                            let want: f64 = (0..2)
                                .map(|l| {
                                    p.core.get(&[wk, i, j, l]) * p.relation_emb.get(&[rid, k, l])
                                })
                                .sum();
                            let got = m.block(n, k)[i * 2 + j];
                            assert!((got - want).abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn score_forms_match_brute_force() {
        for seed in 0..20 {
            let mut config = plain_config(5, 3, 1 + seed as usize % 3, 2, 3, seed);
            config.core_mode = if seed % 2 == 0 {
                CoreMode::Shared
            } else {
                CoreMode::Independent
            };
            let p = ModelParams::init(&config).unwrap();
            let want = brute_force(&p, 1, 4, 2);
            for form in [ScoreForm::BlockTerm, ScoreForm::Bilinear] {
                let got = score(&p, 1, 4, 2, form).unwrap();
                assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forms_agree_with_normalization() {
        let mut config = ModelConfig::new(6, 2, 2, 3, 2);
        config.seed = 3;
        for norm in [NormMode::Flattened, NormMode::PerPartition] {
            config.norm = norm;
            let mut p = ModelParams::init(&config).unwrap();
            for bn in [p.bn_input.as_mut().unwrap(), p.bn_hidden.as_mut().unwrap()] {
                for (i, v) in bn.gamma.data_mut().iter_mut().enumerate() {
                    *v = 0.5 + 0.1 * i as f64;
                }
                for (i, v) in bn.running_mean.data_mut().iter_mut().enumerate() {
                    *v = 0.05 * i as f64 - 0.1;
                }
                for (i, v) in bn.running_var.data_mut().iter_mut().enumerate() {
                    *v = 0.3 + 0.2 * i as f64;
                }
                bn.beta.data_mut().iter_mut().for_each(|v| *v = 0.07);
            }
            let a = score(&p, 0, 5, 1, ScoreForm::BlockTerm).unwrap();
            let b = score(&p, 0, 5, 1, ScoreForm::Bilinear).unwrap();
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            let all = score_all_tails(&p, 0, 1).unwrap();
            for e in 0..6 {
                let s = score(&p, 0, e, 1, ScoreForm::Bilinear).unwrap();
                assert!((all.data()[e] - s).abs() <= 1e-10 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn all_tails_and_heads_match_per_triple() {
        let p = ModelParams::init(&plain_config(3, 2, 2, 2, 3, 4)).unwrap();
        let tails = score_all_tails(&p, 1, 1).unwrap();
        let heads = score_all_heads(&p, 2, 0).unwrap();
        for e in 0..3 {
            let t = score(&p, 1, e, 1, ScoreForm::Bilinear).unwrap();
            let h = score(&p, e, 2, 0, ScoreForm::Bilinear).unwrap();
            assert!((tails.data()[e] - t).abs() <= 1e-10 * t.abs().max(1.0));
            assert!((heads.data()[e] - h).abs() <= 1e-10 * h.abs().max(1.0));
        }
    }

    #[test]
    fn zero_embeddings_give_zero_vectors() {
        let mut p = ModelParams::init(&plain_config(4, 1, 2, 2, 2, 0)).unwrap();
        p.entity_emb = Tensor::zeros(p.entity_emb.shape());
        assert!(score_all_tails(&p, 0, 0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(score_all_heads(&p, 0, 0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn scores_stay_finite_with_shifted_core() {
        let mut p = ModelParams::init(&plain_config(5, 1, 2, 2, 2, 0)).unwrap();
        p.core.data_mut().iter_mut().for_each(|v| *v += 3.0);
        assert!(score_all_tails(&p, 0, 0).unwrap().all_finite());
    }

    #[test]
    fn symmetric_mapping_gives_symmetric_directions() {
        let config = plain_config(4, 1, 1, 2, 1, 9);
        let mut core = Tensor::zeros(&config.core_shape());
        core.set(&[0, 0, 0, 0], 1.0);
        core.set(&[0, 1, 1, 0], 2.0);
        let p = ModelParams::with_core(&config, core).unwrap();
        let tails = score_all_tails(&p, 2, 0).unwrap();
        let heads = score_all_heads(&p, 2, 0).unwrap();
        assert_eq!(tails, heads);
    }

    #[test]
    fn distmult_example() {
        let sizes = SpecialCaseSizes {
            num_entities: 2,
            num_relations: 1,
            k: 2,
            ce: 1,
            cr: 1,
        };
        let (config, core) = make_special_case(SpecialCase::DistMult, sizes).unwrap();
        let mut p = ModelParams::with_core(&config, core).unwrap();
        p.entity_emb = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        p.relation_emb = Tensor::new(vec![1, 2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(score(&p, 0, 1, 0, ScoreForm::Bilinear).unwrap(), 63.0);
        assert_eq!(score(&p, 0, 1, 0, ScoreForm::BlockTerm).unwrap(), 63.0);
    }

    #[test]
    fn rescal_matches_matrix_product() {
        let sizes = SpecialCaseSizes {
            num_entities: 3,
            num_relations: 2,
            k: 1,
            ce: 3,
            cr: 9,
        };
        let (config, core) = make_special_case(SpecialCase::Rescal, sizes).unwrap();
        let p = ModelParams::with_core(&ModelConfig { seed: 5, ..config }, core).unwrap();
        let (h, t, r) = (
            p.entity_emb.row(0),
            p.entity_emb.row(2),
            p.relation_emb.row(1),
        );
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                want += h[i] * r[i * 3 + j] * t[j];
            }
        }
        let got = score(&p, 0, 2, 1, ScoreForm::Bilinear).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn special_case_size_checks() {
        let bad = SpecialCaseSizes {
            num_entities: 2,
            num_relations: 1,
            k: 2,
            ce: 2,
            cr: 1,
        };
        for kind in [
            SpecialCase::DistMult,
            SpecialCase::ComplEx,
            SpecialCase::Rescal,
        ] {
            assert!(matches!(
                make_special_case(kind, bad),
                Err(MeimError::Config(_))
            ));
        }
    }

    #[test]
    fn count_params_examples() {
        let mut c = ModelConfig::new(1, 1, 1, 1, 1);
        assert_eq!(count_params(&c), 3);
        c = ModelConfig::new(14541, 237, 3, 100, 100);
        assert_eq!(count_params(&c), 7_433_400);
        c = ModelConfig::new(40943, 11, 3, 100, 100);
        assert_eq!(count_params(&c), 15_286_200);
        c.core_mode = CoreMode::Shared;
        assert_eq!(count_params(&c), 15_286_200 - 2_000_000);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(3, 1, 1, 2, 2);
        assert!(c.validate().is_ok());
        c.input_dropout = 1.0;
        assert!(c.validate().is_err());
        c.input_dropout = 0.0;
        c.k = 0;
        assert!(c.validate().is_err());
        c.k = 1;
        c.lambda_ortho = -1.0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn partition_round_trip(k in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[k * c], |_| rng.gen_range(-1.0..1.0));
            prop_assert_eq!(flatten(&partition(&x, k, c).unwrap()), x);
        }

        #[test]
        fn count_params_closed_form(e in 1usize..50_000, r in 1usize..500, k in 1usize..6,
                                    ce in 1usize..120, cr in 1usize..120, shared in any::<bool>()) {
            let mut c = ModelConfig::new(e, r, k, ce, cr);
            c.core_mode = if shared { CoreMode::Shared } else { CoreMode::Independent };
            let cores = if shared { 1 } else { k };
            prop_assert_eq!(count_params(&c), (e * k * ce + r * k * cr + cores * ce * ce * cr) as u64);
        }
    }
}
