//! Multi-neighborhood attention: one multi-head attention kernel per hop
//! count, combined per node by learned scores.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sparse::SparseMatrix;
use crate::tensor::Scalar;

/// Queries and keys come from `Â^qk_hops H`, values from `Â^value_hops H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub qk_hops: usize,
    pub value_hops: usize,
}

impl KernelSpec {
    /// The `(Â^k H, Â^k H, H)` kernel.
    pub fn hop(k: usize) -> Self {
        Self { qk_hops: k, value_hops: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Adaptive,
    Sum,
    Average,
    #[serde(alias = "concat")]
    Concatenate,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [Aggregator::Sum, Aggregator::Average, Aggregator::Concatenate, Aggregator::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Adaptive => "adaptive",
            Aggregator::Sum => "sum",
            Aggregator::Average => "average",
            Aggregator::Concatenate => "concat",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "sum" => Ok(Self::Sum),
            "average" | "mean" => Ok(Self::Average),
            "concat" | "concatenate" => Ok(Self::Concatenate),
            other => Err(Error::Config(format!(
                "unknown aggregator `{other}` (expected adaptive, sum, average or concat)"
            ))),
        }
    }
}

/// Nonlinearity applied to `z W` before scoring against `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreActivation {
    #[default]
    Tanh,
    Identity,
    Relu,
}

/// Which kernels each layer runs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelPlan {
    /// Hops `0..=c` in every layer.
    #[default]
    MultiNeighborhood,
    /// The listed hops in every layer.
    Hops { hops: Vec<usize> },
    /// `(Â^α X, Â^α X, Â^α X)` in the first layer, `(X, X, X)` afterwards.
    GraphTransLike { alpha: usize },
    /// `(Â^β X, Â^β X, X)` in every layer.
    SatLike { beta: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialCase {
    GraphTransLike,
    SatLike,
}

/// Single-kernel plans that existing graph transformers reduce to.
pub fn special_case_kernel(kind: SpecialCase, hop: usize) -> KernelPlan {
    match kind {
        SpecialCase::GraphTransLike => KernelPlan::GraphTransLike { alpha: hop },
        SpecialCase::SatLike => KernelPlan::SatLike { beta: hop },
    }
}

impl KernelPlan {
    pub fn layer_kernels(&self, layer: usize, max_hop: usize) -> Vec<KernelSpec> {
        match self {
            KernelPlan::MultiNeighborhood => (0..=max_hop).map(KernelSpec::hop).collect(),
            KernelPlan::Hops { hops } => hops.iter().copied().map(KernelSpec::hop).collect(),
            KernelPlan::GraphTransLike { alpha } if layer == 0 => {
                vec![KernelSpec { qk_hops: *alpha, value_hops: *alpha }]
            }
            KernelPlan::GraphTransLike { .. } => vec![KernelSpec::hop(0)],
            KernelPlan::SatLike { beta } => vec![KernelSpec::hop(*beta)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let KernelPlan::Hops { hops } = self {
            if hops.is_empty() {
                return Err(Error::Config("kernel hop list is empty".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnaConfig {
    /// Largest hop count `c`.
    pub max_hop: usize,
    pub heads: usize,
    pub dim: usize,
    pub head_dim: usize,
    pub aggregator: Aggregator,
    pub score_activation: ScoreActivation,
    pub dropout: f64,
}

impl Default for MnaConfig {
    fn default() -> Self {
        Self {
            max_hop: 3,
            heads: 3,
            dim: 128,
            head_dim: 8,
            aggregator: Aggregator::Adaptive,
            score_activation: ScoreActivation::Tanh,
            dropout: 0.2,
        }
    }
}

impl MnaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.head_dim == 0 {
            return Err(Error::Config("heads, dim and head_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// All heads of one kernel: `w_q`, `w_k`, `w_v` are `d x (m d_h)` with head
/// `j` in column block `j`; `w_o` is `(m d_h) x d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl KernelParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &MnaConfig, rng: &mut R) -> Self {
        let inner = cfg.heads * cfg.head_dim;
        Self {
            w_q: store.add_xavier(format!("{name}.w_q"), cfg.dim, inner, rng),
            w_k: store.add_xavier(format!("{name}.w_k"), cfg.dim, inner, rng),
            w_v: store.add_xavier(format!("{name}.w_v"), cfg.dim, inner, rng),
            w_o: store.add_xavier(format!("{name}.w_o"), inner, cfg.dim, rng),
        }
    }
}

/// `W` is `d x d`, `score` is the `1 x d` vector `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptiveParams {
    pub w: ParamId,
    pub score: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnaParams {
    pub kernels: Vec<KernelSpec>,
    pub kernel_params: Vec<KernelParams>,
    pub adaptive: Option<AdaptiveParams>,
    /// `(K d) x d` projection for the concatenating aggregator.
    pub concat: Option<ParamId>,
}

impl MnaParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &MnaConfig,
        kernels: Vec<KernelSpec>,
        rng: &mut R,
    ) -> Self {
        let kernel_params = (0..kernels.len())
            .map(|i| KernelParams::init(store, &format!("{name}.kernel{i}"), cfg, rng))
            .collect();
        let adaptive = (cfg.aggregator == Aggregator::Adaptive).then(|| AdaptiveParams {
            w: store.add_xavier(format!("{name}.adaptive.w"), cfg.dim, cfg.dim, rng),
            score: store.add_xavier(format!("{name}.adaptive.score"), 1, cfg.dim, rng),
        });
        let concat = (cfg.aggregator == Aggregator::Concatenate)
            .then(|| store.add_xavier(format!("{name}.concat"), kernels.len() * cfg.dim, cfg.dim, rng));
        Self { kernels, kernel_params, adaptive, concat }
    }
}

/// Block-diagonal structure shared by every kernel of a batch.
#[derive(Debug, Clone, Copy)]
pub struct GraphContext<'a, T> {
    pub a_hat: &'a Arc<SparseMatrix<T>>,
    pub blocks: &'a Arc<[usize]>,
}

pub struct MnaOutput {
    pub z: Var,
    /// `n x K` kernel weights, for the adaptive aggregator only.
    pub alpha: Option<Var>,
    pub kernel_outputs: Vec<Var>,
}

/// Shorter-lived copy of an optional RNG handle, usable once per call.
pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Single-head `softmax(q k^T / sqrt(d_h)) v` within each block.
pub fn scaled_dot_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, blocks: &Arc<[usize]>) -> Result<Var> {
    tape.attention(q, k, v, 1, blocks, None)
}

/// Multi-head attention over already-propagated query/key and value sources.
#[allow(clippy::too_many_arguments)]
pub fn kernel_mha_from_sources<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    qk_source: Var,
    value_source: Var,
    params: &KernelParams,
    heads: usize,
    blocks: &Arc<[usize]>,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<Var> {
    let q = tape.matmul(qk_source, bound.var(params.w_q))?;
    let k = tape.matmul(qk_source, bound.var(params.w_k))?;
    let v = tape.matmul(value_source, bound.var(params.w_v))?;
    let heads_out = tape.attention(q, k, v, heads, blocks, dropout)?;
    tape.matmul(heads_out, bound.var(params.w_o))
}

/// Output `Z^k` of one attention kernel.
#[allow(clippy::too_many_arguments)]
pub fn kernel_mha<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    h: Var,
    ctx: GraphContext<'_, T>,
    spec: KernelSpec,
    params: &KernelParams,
    heads: usize,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<Var> {
    let qk = tape.propagate(ctx.a_hat, h, spec.qk_hops)?;
    let v = tape.propagate(ctx.a_hat, h, spec.value_hops)?;
    kernel_mha_from_sources(tape, bound, qk, v, params, heads, ctx.blocks, dropout)
}

/// `Z^k` for every kernel, computing `Â^k h` incrementally from `Â^{k-1} h`.
pub fn make_kernel_outputs<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    h: Var,
    ctx: GraphContext<'_, T>,
    cfg: &MnaConfig,
    params: &MnaParams,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Vec<Var>> {
    if params.kernels.len() != params.kernel_params.len() || params.kernels.is_empty() {
        return Err(Error::Config(format!(
            "{} kernels but {} parameter sets",
            params.kernels.len(),
            params.kernel_params.len()
        )));
    }
    let deepest = params.kernels.iter().map(|s| s.qk_hops.max(s.value_hops)).max().unwrap_or(0);
    let mut powers = vec![h];
    for _ in 0..deepest {
        let next = tape.propagate_once(ctx.a_hat, *powers.last().unwrap())?;
        powers.push(next);
    }
    let mut outs = Vec::with_capacity(params.kernels.len());
    for (spec, kp) in params.kernels.iter().zip(&params.kernel_params) {
        let dropout = match &mut rng {
            Some(r) if cfg.dropout > 0.0 => Some((cfg.dropout, &mut **r as &mut dyn RngCore)),
            _ => None,
        };
        outs.push(kernel_mha_from_sources(
            tape,
            bound,
            powers[spec.qk_hops],
            powers[spec.value_hops],
            kp,
            cfg.heads,
            ctx.blocks,
            dropout,
        )?);
    }
    Ok(outs)
}

/// Per-node softmax over kernels of `act(z_v^k W) w^T`, then the
/// corresponding convex combination of the `z_v^k`. Returns `(Z, alpha)`.
pub fn adaptive_aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    zs: &[Var],
    params: &AdaptiveParams,
    activation: ScoreActivation,
) -> Result<(Var, Var)> {
    let Some(&first) = zs.first() else {
        return Err(Error::Config("no kernel outputs to aggregate".into()));
    };
    let shape = tape.value(first).shape().to_vec();
    let w = bound.var(params.w);
    let score_t = tape.transpose(bound.var(params.score));
    let mut scores = Vec::with_capacity(zs.len());
    for &z in zs {
        if tape.value(z).shape() != shape.as_slice() {
            return Err(Error::shape("adaptive_aggregate", &shape, tape.value(z).shape()));
        }
        let projected = tape.matmul(z, w)?;
        let activated = match activation {
            ScoreActivation::Tanh => tape.tanh(projected),
            ScoreActivation::Relu => tape.relu(projected),
            ScoreActivation::Identity => projected,
        };
        scores.push(tape.matmul(activated, score_t)?);
    }
    let logits = tape.concat_cols(&scores)?;
    let alpha = tape.softmax_rows(logits)?;
    let z = tape.weighted_sum(alpha, zs)?;
    Ok((z, alpha))
}

/// The non-adaptive aggregators.
pub fn aggregate_variant<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    zs: &[Var],
    variant: Aggregator,
    concat: Option<ParamId>,
) -> Result<Var> {
    let Some(&first) = zs.first() else {
        return Err(Error::Config("no kernel outputs to aggregate".into()));
    };
    match variant {
        Aggregator::Sum | Aggregator::Average => {
            let mut acc = first;
            for &z in &zs[1..] {
                acc = tape.add(acc, z)?;
            }
            if variant == Aggregator::Average && zs.len() > 1 {
                acc = tape.scale(acc, T::from_f64(1.0 / zs.len() as f64));
            }
            Ok(acc)
        }
        Aggregator::Concatenate => {
            let proj = concat.ok_or_else(|| Error::Config("concatenate aggregator needs a projection".into()))?;
            let cat = tape.concat_cols(zs)?;
            tape.matmul(cat, bound.var(proj))
        }
        Aggregator::Adaptive => Err(Error::Config("adaptive aggregation needs adaptive parameters".into())),
    }
}

/// Kernel outputs followed by the configured aggregation.
pub fn mna_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    h: Var,
    ctx: GraphContext<'_, T>,
    cfg: &MnaConfig,
    params: &MnaParams,
    rng: Option<&mut dyn RngCore>,
) -> Result<MnaOutput> {
    let kernel_outputs = make_kernel_outputs(tape, bound, h, ctx, cfg, params, rng)?;
    let (z, alpha) = match (cfg.aggregator, &params.adaptive) {
        (Aggregator::Adaptive, Some(ap)) => {
            let (z, alpha) = adaptive_aggregate(tape, bound, &kernel_outputs, ap, cfg.score_activation)?;
            (z, Some(alpha))
        }
        (variant, _) => (aggregate_variant(tape, bound, &kernel_outputs, variant, params.concat)?, None),
    };
    Ok(MnaOutput { z, alpha, kernel_outputs })
}
