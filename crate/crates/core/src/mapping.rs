//! Software mapping search: tensor/pipeline parallel sizes, micro-batch
//! schedules, per-GEMM partitioning strategies and the collectives they
//! imply.
//!
//! Each layer is three sub-stages in execution order: attention (QKV GEMM,
//! attention, output GEMM), FFN-in (first FFN GEMM plus elementwise work)
//! and FFN-out. Attention's two GEMMs form one pair `(A, B)` with
//! `A: C×M, B: M×C` where `C = d_model, M = d_attn`; the FFN pair uses
//! `M = d_ff`. Splitting a weight by row shards its input, by column its
//! output.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::server::ServerDesign;
use crate::sparsity::{footprint_ratio_at_density, TileShape};
use crate::workload::{kv_bytes_per_token, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Row,
    Col,
}

/// Serialized as `"<a>-<b>"`, e.g. `"row-col"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PairStrategy {
    pub a: Split,
    pub b: Split,
}

impl PairStrategy {
    pub const ALL: [PairStrategy; 4] = [
        PairStrategy::new(Split::Row, Split::Row),
        PairStrategy::new(Split::Col, Split::Col),
        PairStrategy::new(Split::Row, Split::Col),
        PairStrategy::new(Split::Col, Split::Row),
    ];

    pub const fn new(a: Split, b: Split) -> Self {
        PairStrategy { a, b }
    }

    /// Row split of `A` consumes a sharded input.
    pub fn input(self) -> Format {
        match self.a {
            Split::Row => Format::Sharded,
            Split::Col => Format::Whole,
        }
    }

    pub fn output(self) -> Format {
        match (self.a, self.b) {
            (Split::Row, Split::Row) | (Split::Row, Split::Col) => Format::Sharded,
            (Split::Col, Split::Col) | (Split::Col, Split::Row) => Format::Whole,
        }
    }
}

impl fmt::Display for PairStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |x: Split| match x {
            Split::Row => "row",
            Split::Col => "col",
        };
        write!(f, "{}-{}", s(self.a), s(self.b))
    }
}

impl std::str::FromStr for PairStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let split = |x: &str| match x {
            "row" => Ok(Split::Row),
            "col" => Ok(Split::Col),
            _ => Err(Error::Config(format!("unknown split `{x}` in strategy `{s}`"))),
        };
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("strategy `{s}` is not of the form a-b")))?;
        Ok(PairStrategy::new(split(a)?, split(b)?))
    }
}

impl TryFrom<String> for PairStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PairStrategy> for String {
    fn from(p: PairStrategy) -> String {
        p.to_string()
    }
}

/// How an activation is laid out across the `t` chips of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Sharded,
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveKind {
    ReduceScatter,
    AllGather,
    AllReduce,
    Reduce,
    Broadcast,
    Gather,
    PointToPoint,
    /// All-reduce on a √t × √t mesh used by the 2D weight-stationary FFN.
    Mesh2dAllReduce,
}

/// Where in a GEMM pair a collective happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectivePoint {
    AfterA,
    AfterB,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Collective {
    pub kind: CollectiveKind,
    /// Full tensor size per token, bytes.
    pub payload_bytes: u64,
    pub point: CollectivePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmDims {
    /// Outer dimension (input of `A`, output of `B`).
    pub c: u64,
    /// Intermediate dimension.
    pub m: u64,
}

/// Collectives for one token through a GEMM pair split `t` ways.
pub fn derive_collectives(
    strategy: PairStrategy,
    dims: GemmDims,
    t: u64,
    bytes_per_act: f64,
) -> Result<Vec<Collective>> {
    if t <= 1 {
        return Ok(Vec::new());
    }
    for dim in [dims.c, dims.m] {
        if dim % t != 0 {
            return Err(Error::IndivisibleSplit { dim, t });
        }
    }
    let bytes = |n: u64| (n as f64 * bytes_per_act).round() as u64;
    let op = |kind, n, point| Collective {
        kind,
        payload_bytes: bytes(n),
        point,
    };
    use CollectiveKind::*;
    use CollectivePoint::*;
    Ok(match (strategy.a, strategy.b) {
        (Split::Row, Split::Row) => vec![op(ReduceScatter, dims.m, AfterA), op(ReduceScatter, dims.c, AfterB)],
        (Split::Col, Split::Col) => vec![op(AllGather, dims.m, AfterA), op(AllGather, dims.c, AfterB)],
        (Split::Row, Split::Col) => vec![op(AllReduce, dims.m, AfterA)],
        (Split::Col, Split::Row) => vec![op(AllReduce, dims.c, AfterB)],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnLayout {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

/// Handling of an all-reduce that ends a stage whose successor sits on
/// another server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Complete the all-reduce; every chip forwards its replica.
    AllReduce,
    /// Reduce to one chip, send once, broadcast on the next server.
    ReduceBroadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Pipeline stages hold whole layers.
    #[default]
    Layer,
    /// Pipeline stages may cut between the three sub-stages of a layer.
    Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubStage {
    Attention,
    FfnIn,
    FfnOut,
}

impl SubStage {
    pub const ORDER: [SubStage; 3] = [SubStage::Attention, SubStage::FfnIn, SubStage::FfnOut];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Contents of one pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    /// Number of attention, FFN-in and FFN-out sub-stages.
    pub counts: [u64; 3],
    pub last: SubStage,
}

/// Splits the `3 · n_layers` sub-stages into `p` equal contiguous stages.
pub fn stage_shapes(n_layers: u64, p: u64, granularity: Granularity) -> Result<Vec<StageShape>> {
    let units = match granularity {
        Granularity::Layer => n_layers,
        Granularity::Stage => 3 * n_layers,
    };
    if p == 0 || units % p != 0 {
        return Err(Error::Config(format!(
            "pipeline size {p} must divide {units} ({granularity:?} granularity)"
        )));
    }
    let per = 3 * n_layers / p;
    Ok((0..p)
        .map(|s| {
            let (start, end) = (s * per, (s + 1) * per);
            let mut counts = [0u64; 3];
            for (r, count) in counts.iter_mut().enumerate() {
                let r = r as u64;
                // sub-stage indices i in [start, end) with i % 3 == r
                let below = |x: u64| x / 3 + u64::from(x % 3 > r);
                *count = below(end) - below(start);
            }
            StageShape {
                counts,
                last: SubStage::ORDER[((end - 1) % 3) as usize],
            }
        })
        .collect())
}

/// Whether the boundary after stage `s` moves to a different server, with
/// stages laid out contiguously `t` chips at a time.
pub fn crosses_server(s: u64, t: u64, chips_per_server: u64) -> bool {
    let last_chip = (s + 1) * t - 1;
    let next_chip = (s + 1) * t;
    last_chip / chips_per_server != next_chip / chips_per_server
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkTraffic {
    /// Bytes per generated token sent by one chip over on-board links.
    pub intra_server: f64,
    /// Bytes per generated token crossing one server's network port.
    pub inter_server: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub t: u64,
    pub p: u64,
    pub batch: u64,
    pub micro_batches: u64,
    pub micro_batch_size: u64,
    pub context: u64,
    /// Fraction of weights pruned to zero; 0 stores weights dense.
    pub sparsity: f64,
    pub n_servers: u64,
    pub granularity: Granularity,
    pub attn: PairStrategy,
    pub ffn: PairStrategy,
    pub ffn_layout: FfnLayout,
    pub boundary: BoundaryMode,
    pub memory_per_chip: f64,
    pub per_link_traffic: LinkTraffic,
}

impl MappingPlan {
    pub fn chips_used(&self) -> u64 {
        self.t * self.p
    }

    pub fn id(&self) -> String {
        let g = match self.granularity {
            Granularity::Layer => "L",
            Granularity::Stage => "S",
        };
        let layout = match self.ffn_layout {
            FfnLayout::OneD => self.ffn.to_string(),
            FfnLayout::TwoD => "2d".to_string(),
        };
        let b = match self.boundary {
            BoundaryMode::AllReduce => "ar",
            BoundaryMode::ReduceBroadcast => "rb",
        };
        format!(
            "t{}-p{}{g}-N{}-n{}-attn:{}-ffn:{layout}-{b}",
            self.t, self.p, self.batch, self.micro_batches, self.attn
        )
    }

    /// Canonical ordering used for deterministic tie-breaks.
    pub fn sort_key(&self) -> impl Ord {
        (
            self.t,
            self.p,
            self.batch,
            self.micro_batches,
            self.granularity,
            self.attn,
            self.ffn_layout,
            self.ffn,
            self.boundary,
        )
    }

    pub fn ffn_input(&self) -> Format {
        match self.ffn_layout {
            FfnLayout::OneD => self.ffn.input(),
            FfnLayout::TwoD => Format::Sharded,
        }
    }

    pub fn ffn_output(&self) -> Format {
        match self.ffn_layout {
            FfnLayout::OneD => self.ffn.output(),
            FfnLayout::TwoD => Format::Sharded,
        }
    }
}

/// Divisors of `n` in increasing order.
pub fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut i = 1;
    while i * i <= n {
        if n % i == 0 {
            small.push(i);
            if i * i != n {
                large.push(n / i);
            }
        }
        i += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// `⌈dim / t⌉`, the widest shard when `dim` is split `t` ways.
pub fn shard(dim: u64, t: u64) -> u64 {
    dim.div_ceil(t)
}

/// Width of shard `i` when `dim` rows are dealt out as evenly as possible.
pub fn shard_width(dim: u64, t: u64, i: u64) -> u64 {
    dim / t + u64::from(i < dim % t)
}

/// Weight elements held by the widest chip for one GEMM of shape `rows×cols`.
fn gemm_shard(rows: u64, cols: u64, split: Split, t: u64) -> u64 {
    match split {
        Split::Row => shard(rows, t) * cols,
        Split::Col => rows * shard(cols, t),
    }
}

/// Per-chip weight elements of each sub-stage under a plan's strategies.
pub fn substage_weight_elements(spec: &ModelSpec, plan: &MappingPlan) -> [u64; 3] {
    let d = spec.d_model;
    let t = plan.t;
    let qkv_out = spec.d_attn + 2 * spec.kv_dim();
    let attn = gemm_shard(d, qkv_out, plan.attn.a, t) + gemm_shard(spec.d_attn, d, plan.attn.b, t);
    let ffn_in_cols = (spec.ffn_matrices - 1) * spec.d_ff;
    let (ffn_in, ffn_out) = match plan.ffn_layout {
        FfnLayout::OneD => (
            gemm_shard(d, ffn_in_cols, plan.ffn.a, t),
            gemm_shard(spec.d_ff, d, plan.ffn.b, t),
        ),
        FfnLayout::TwoD => {
            let k = (t as f64).sqrt().floor() as u64;
            let (r, c) = (k.max(1), (t / k.max(1)).max(1));
            (
                shard(d, r) * shard(ffn_in_cols, c),
                shard(spec.d_ff, c) * shard(d, r),
            )
        }
    };
    [attn, ffn_in, ffn_out]
}

/// Stored bytes per dense weight byte at a given sparsity.
pub fn weight_storage_ratio(sparsity: f64) -> f64 {
    if sparsity > 0.0 {
        footprint_ratio_at_density(1.0 - sparsity, TileShape::default())
    } else {
        1.0
    }
}

/// KV bytes per chip for one attention sub-stage holding all `batch`
/// sequences at full `context`.
pub fn kv_bytes_per_chip(spec: &ModelSpec, t: u64, batch: u64, context: u64) -> f64 {
    let width = shard(spec.kv_dim(), t) as f64 / spec.kv_dim() as f64;
    kv_bytes_per_token(spec) * width * (batch * context) as f64
}

/// Double-buffered activations for one micro-batch, bytes per chip.
pub fn activation_buffer_bytes(spec: &ModelSpec, micro_batch_size: u64) -> f64 {
    let widest = (spec.d_attn + 2 * spec.kv_dim())
        .max((spec.ffn_matrices - 1) * spec.d_ff)
        .max(spec.d_model);
    2.0 * micro_batch_size as f64 * widest as f64 * spec.bytes_per_act
}

/// Peak SRAM needed on any chip of the plan.
pub fn memory_per_chip(spec: &ModelSpec, plan: &MappingPlan) -> Result<f64> {
    let shapes = stage_shapes(spec.n_layers, plan.p, plan.granularity)?;
    Ok(resident_bytes(spec, plan, &shapes) + activation_buffer_bytes(spec, plan.micro_batch_size))
}

/// Weights and KV cache on the fullest chip, excluding activation buffers.
fn resident_bytes(spec: &ModelSpec, plan: &MappingPlan, shapes: &[StageShape]) -> f64 {
    let w = substage_weight_elements(spec, plan);
    let wratio = weight_storage_ratio(plan.sparsity) * spec.bytes_per_param;
    let kv = kv_bytes_per_chip(spec, plan.t, plan.batch, plan.context);
    shapes
        .iter()
        .map(|s| {
            let weights: f64 = (0..3).map(|i| s.counts[i] as f64 * w[i] as f64).sum();
            weights * wratio + s.counts[0] as f64 * kv
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub batch: u64,
    pub context: u64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingOptions {
    pub granularity: Granularity,
    /// Largest system considered, in servers.
    pub max_servers: u64,
    /// Largest tensor group, in whole servers.
    pub max_tensor_servers: u64,
}

impl Default for MappingOptions {
    fn default() -> Self {
        MappingOptions {
            granularity: Granularity::Layer,
            max_servers: 256,
            max_tensor_servers: 4,
        }
    }
}

fn tensor_sizes(chips_per_server: u64, opts: &MappingOptions) -> Vec<u64> {
    let mut t = divisors(chips_per_server);
    t.extend((2..=opts.max_tensor_servers).map(|k| k * chips_per_server));
    t
}

fn pipeline_sizes(spec: &ModelSpec, g: Granularity) -> Vec<u64> {
    match g {
        Granularity::Layer => divisors(spec.n_layers),
        Granularity::Stage => divisors(3 * spec.n_layers),
    }
}

/// Whether any server-crossing cut ends on an all-reduce.
fn all_reduce_at_crossing(plan: &MappingPlan, shapes: &[StageShape], chips_per_server: u64) -> bool {
    plan.t >= 2
        && shapes.iter().enumerate().take(shapes.len().saturating_sub(1)).any(|(s, shape)| {
            crosses_server(s as u64, plan.t, chips_per_server) && ends_with_all_reduce(plan, shape.last)
        })
}

/// The collective finishing a sub-stage, if it is an all-reduce.
pub fn ends_with_all_reduce(plan: &MappingPlan, sub: SubStage) -> bool {
    let col_row = PairStrategy::new(Split::Col, Split::Row);
    let row_col = PairStrategy::new(Split::Row, Split::Col);
    match sub {
        SubStage::Attention => plan.attn == col_row,
        SubStage::FfnIn => plan.ffn_layout == FfnLayout::OneD && plan.ffn == row_col,
        SubStage::FfnOut => match plan.ffn_layout {
            FfnLayout::OneD => plan.ffn == col_row,
            FfnLayout::TwoD => true,
        },
    }
}

/// Every plan satisfying divisibility and SRAM capacity, in canonical order.
///
/// Errors with [`Error::ModelDoesNotFit`] when no tensor/pipeline size fits
/// within `max_servers`.
pub fn enumerate_mappings(
    spec: &ModelSpec,
    server: &ServerDesign,
    scenario: Scenario,
    opts: &MappingOptions,
) -> Result<Vec<MappingPlan>> {
    if scenario.batch == 0 {
        return Err(Error::ZeroBatch);
    }
    if scenario.context == 0 || scenario.context > spec.max_context {
        return Err(Error::ContextOutOfRange {
            pos: scenario.context,
            max: spec.max_context,
        });
    }
    let chips = server.chips_total;
    let sram = server.chiplet.sram_bytes();
    let batch = scenario.batch;
    let mut out = Vec::new();
    for t in tensor_sizes(chips, opts) {
        let layouts: &[FfnLayout] = if t >= 4 {
            &[FfnLayout::OneD, FfnLayout::TwoD]
        } else {
            &[FfnLayout::OneD]
        };
        for p in pipeline_sizes(spec, opts.granularity) {
            let n_servers = (t * p).div_ceil(chips);
            if n_servers > opts.max_servers {
                continue;
            }
            let shapes = stage_shapes(spec.n_layers, p, opts.granularity)?;
            for attn in PairStrategy::ALL {
                for &layout in layouts {
                    let ffns: &[PairStrategy] = match layout {
                        FfnLayout::OneD => &PairStrategy::ALL,
                        FfnLayout::TwoD => &PairStrategy::ALL[2..3],
                    };
                    for &ffn in ffns {
                        let mut plan = MappingPlan {
                            t,
                            p,
                            batch,
                            micro_batches: 1,
                            micro_batch_size: batch,
                            context: scenario.context,
                            sparsity: scenario.sparsity,
                            n_servers,
                            granularity: opts.granularity,
                            attn,
                            ffn,
                            ffn_layout: layout,
                            boundary: BoundaryMode::AllReduce,
                            memory_per_chip: 0.0,
                            per_link_traffic: LinkTraffic {
                                intra_server: 0.0,
                                inter_server: 0.0,
                            },
                        };
                        let resident = resident_bytes(spec, &plan, &shapes);
                        if resident > sram {
                            continue;
                        }
                        plan.per_link_traffic = link_traffic(spec, &plan, chips, Topology::Ring)?;
                        let variants: &[BoundaryMode] = if all_reduce_at_crossing(&plan, &shapes, chips) {
                            &[BoundaryMode::AllReduce, BoundaryMode::ReduceBroadcast]
                        } else {
                            &[BoundaryMode::AllReduce]
                        };
                        for n in divisors(batch) {
                            let mbs = batch / n;
                            let memory = resident + activation_buffer_bytes(spec, mbs);
                            if memory > sram {
                                continue;
                            }
                            for &boundary in variants {
                                out.push(MappingPlan {
                                    micro_batches: n,
                                    micro_batch_size: mbs,
                                    memory_per_chip: memory,
                                    boundary,
                                    ..plan.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::ModelDoesNotFit {
            model: spec.name.clone(),
            max_servers: opts.max_servers,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heuristic {
    /// Keep tensor groups inside one server.
    NoCrossServerTensor = 1,
    /// Prefer the one-all-reduce-per-pair row/col strategy.
    PreferRowCol = 2,
    /// Prefer col/col FFN when a stage is exactly one server of one GEMM.
    ColColSingleGemmServer = 3,
    /// Reduce then broadcast instead of all-reduce at server exits.
    ReduceAtServerExit = 4,
}

impl Heuristic {
    pub const ALL: [Heuristic; 4] = [
        Heuristic::NoCrossServerTensor,
        Heuristic::PreferRowCol,
        Heuristic::ColColSingleGemmServer,
        Heuristic::ReduceAtServerExit,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }
}

/// A stage-level plan whose stages are single GEMM sub-stages filling one
/// server each.
fn single_gemm_server_stage(plan: &MappingPlan, chips_per_server: u64, n_layers: u64) -> bool {
    plan.granularity == Granularity::Stage && plan.t == chips_per_server && plan.p == 3 * n_layers
}

/// Returns the first enabled heuristic that rejects `plan`.
pub fn pruned_by(
    plan: &MappingPlan,
    chips_per_server: u64,
    n_layers: u64,
    enabled: &[Heuristic],
) -> Option<Heuristic> {
    let row_col = PairStrategy::new(Split::Row, Split::Col);
    let col_col = PairStrategy::new(Split::Col, Split::Col);
    let single = single_gemm_server_stage(plan, chips_per_server, n_layers);
    enabled.iter().copied().find(|h| match h {
        Heuristic::NoCrossServerTensor => plan.t > chips_per_server || chips_per_server % plan.t != 0,
        Heuristic::PreferRowCol => {
            plan.attn != row_col || (!single && plan.ffn_layout == FfnLayout::OneD && plan.ffn != row_col)
        }
        Heuristic::ColColSingleGemmServer => {
            single && (plan.ffn_layout != FfnLayout::OneD || plan.ffn != col_col)
        }
        Heuristic::ReduceAtServerExit => {
            plan.boundary == BoundaryMode::AllReduce
                && stage_shapes(n_layers, plan.p, plan.granularity)
                    .map(|shapes| all_reduce_at_crossing(plan, &shapes, chips_per_server))
                    .unwrap_or(false)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub plan_id: String,
    pub heuristic: u8,
}

/// Filters plans by the enabled heuristics, logging each removal.
pub fn apply_heuristics(
    plans: Vec<MappingPlan>,
    chips_per_server: u64,
    n_layers: u64,
    enabled: &[Heuristic],
) -> (Vec<MappingPlan>, Vec<PruneRecord>) {
    let mut kept = Vec::with_capacity(plans.len());
    let mut log = Vec::new();
    for plan in plans {
        match pruned_by(&plan, chips_per_server, n_layers, enabled) {
            Some(h) => log.push(PruneRecord {
                plan_id: plan.id(),
                heuristic: h.id(),
            }),
            None => kept.push(plan),
        }
    }
    (kept, log)
}

/// Pipeline depth and micro-batch count minimizing `max(1/n, 1/p)` with
/// `n | batch`, `n ≤ n_max`, `p ≤ p_max`. Among ties the smallest `p` and
/// then the smallest `n` (largest micro-batch) win.
pub fn choose_schedule(batch: u64, p_max: u64, n_max: u64) -> (u64, u64) {
    let n_cap = n_max.min(batch).max(1);
    let n_best = divisors(batch).into_iter().filter(|&n| n <= n_cap).max().unwrap_or(1);
    let p = p_max.max(1).min(n_best);
    let n = divisors(batch)
        .into_iter()
        .find(|&n| n >= p && n <= n_cap)
        .unwrap_or(n_best);
    (p, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Ring,
    Torus2d,
}

/// Bytes one chip sends for a collective over `t` nodes.
pub fn collective_bytes_per_node(kind: CollectiveKind, payload: f64, t: u64) -> f64 {
    if t <= 1 {
        return 0.0;
    }
    let share = (t - 1) as f64 / t as f64 * payload;
    match kind {
        CollectiveKind::ReduceScatter | CollectiveKind::AllGather => share,
        CollectiveKind::AllReduce => 2.0 * share,
        CollectiveKind::Reduce | CollectiveKind::Broadcast | CollectiveKind::Gather => share,
        CollectiveKind::PointToPoint => payload,
        CollectiveKind::Mesh2dAllReduce => 2.0 * payload / (t as f64).sqrt(),
    }
}

/// A collective placed in a layer's sub-stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedCollective {
    pub sub: SubStage,
    pub collective: Collective,
    /// The collective completes its sub-stage, so a pipeline cut right after
    /// the sub-stage coincides with it.
    pub ends_substage: bool,
}

/// Collectives of one layer under a plan, per token, with the sub-stage
/// that pays for each.
pub fn layer_collectives(spec: &ModelSpec, plan: &MappingPlan) -> Result<Vec<PlacedCollective>> {
    let t = plan.t;
    let bpa = spec.bytes_per_act;
    let pad = |x: u64| shard(x, t) * t;
    let mut out = Vec::new();
    if t <= 1 {
        return Ok(out);
    }
    let place = |sub, collective: Collective, ends_substage| PlacedCollective {
        sub,
        collective,
        ends_substage,
    };
    let attn_dims = GemmDims {
        c: pad(spec.d_model),
        m: pad(spec.d_attn),
    };
    for c in derive_collectives(plan.attn, attn_dims, t, bpa)? {
        out.push(place(SubStage::Attention, c, c.point == CollectivePoint::AfterB));
    }
    let transition = |sub, from: Format, to: Format| {
        (from == Format::Sharded && to == Format::Whole).then(|| {
            let c = Collective {
                kind: CollectiveKind::AllGather,
                payload_bytes: (spec.d_model as f64 * bpa).round() as u64,
                point: CollectivePoint::AfterA,
            };
            place(sub, c, false)
        })
    };
    out.extend(transition(SubStage::FfnIn, plan.attn.output(), plan.ffn_input()));
    match plan.ffn_layout {
        FfnLayout::OneD => {
            let ffn_dims = GemmDims {
                c: pad(spec.d_model),
                m: pad(spec.d_ff),
            };
            for c in derive_collectives(plan.ffn, ffn_dims, t, bpa)? {
                let sub = match c.point {
                    CollectivePoint::AfterA => SubStage::FfnIn,
                    CollectivePoint::AfterB => SubStage::FfnOut,
                };
                out.push(place(sub, c, true));
            }
        }
        FfnLayout::TwoD => out.push(place(
            SubStage::FfnOut,
            Collective {
                kind: CollectiveKind::Mesh2dAllReduce,
                payload_bytes: (spec.d_model as f64 * bpa).round() as u64,
                point: CollectivePoint::AfterB,
            },
            true,
        )),
    }
    out.extend(transition(SubStage::Attention, plan.ffn_output(), plan.attn.input()));
    Ok(out)
}

/// Activation bytes per token leaving a sub-stage.
pub fn cut_payload(spec: &ModelSpec, last: SubStage) -> f64 {
    let width = match last {
        SubStage::FfnIn => spec.d_ff,
        SubStage::Attention | SubStage::FfnOut => spec.d_model,
    };
    width as f64 * spec.bytes_per_act
}

/// Per-token traffic of a plan: bytes per chip on on-board links (averaged
/// over the stage's chips) and bytes per server port.
pub fn link_traffic(
    spec: &ModelSpec,
    plan: &MappingPlan,
    chips_per_server: u64,
    topology: Topology,
) -> Result<LinkTraffic> {
    let links = match topology {
        Topology::Ring => 1.0,
        Topology::Torus2d => 2.0,
    };
    let per_layer: f64 = layer_collectives(spec, plan)?
        .iter()
        .map(|pc| collective_bytes_per_node(pc.collective.kind, pc.collective.payload_bytes as f64, plan.t))
        .sum();
    let spans = plan.t > chips_per_server;
    let collective = per_layer * spec.n_layers as f64 / links;
    let shapes = stage_shapes(spec.n_layers, plan.p, plan.granularity)?;
    let (mut intra, mut inter) = (if spans { 0.0 } else { collective }, if spans { collective } else { 0.0 });
    for (s, shape) in shapes.iter().enumerate().take(shapes.len().saturating_sub(1)) {
        let d = cut_payload(spec, shape.last);
        if crosses_server(s as u64, plan.t, chips_per_server) {
            inter += d;
        } else {
            intra += d / plan.t as f64;
        }
    }
    Ok(LinkTraffic {
        intra_server: intra,
        inter_server: inter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::{assemble_server, ServerConstraints};
    use crate::silicon::{size_chiplet, SiliconConstants};
    use crate::workload::{param_count, presets};

    fn server(sram: f64, tflops: f64, bw: f64, per_lane: u64) -> ServerDesign {
        let chip = size_chiplet(sram, tflops, bw, &SiliconConstants::default()).unwrap();
        assemble_server(&chip, per_lane, &ServerConstraints::default())
    }

    #[test]
    fn collective_counts_by_strategy() {
        let dims = GemmDims { c: 64, m: 256 };
        let kinds = |s| {
            derive_collectives(s, dims, 8, 2.0)
                .unwrap()
                .iter()
                .map(|c| c.kind)
                .collect::<Vec<_>>()
        };
        use CollectiveKind::*;
        assert_eq!(kinds(PairStrategy::new(Split::Row, Split::Row)), vec![ReduceScatter, ReduceScatter]);
        assert_eq!(kinds(PairStrategy::new(Split::Col, Split::Col)), vec![AllGather, AllGather]);
        assert_eq!(kinds(PairStrategy::new(Split::Row, Split::Col)), vec![AllReduce]);
        assert_eq!(kinds(PairStrategy::new(Split::Col, Split::Row)), vec![AllReduce]);
        assert!(derive_collectives(PairStrategy::ALL[0], dims, 1, 2.0).unwrap().is_empty());
        assert!(matches!(
            derive_collectives(PairStrategy::ALL[0], GemmDims { c: 60, m: 256 }, 8, 2.0),
            Err(Error::IndivisibleSplit { dim: 60, t: 8 })
        ));
    }

    #[test]
    fn row_col_payload_is_one_activation() {
        let dims = GemmDims { c: 12288, m: 12288 };
        let c = derive_collectives(PairStrategy::new(Split::Row, Split::Col), dims, 8, 2.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].payload_bytes, 24576);
    }

    #[test]
    fn stage_shapes_layer_and_stage() {
        let s = stage_shapes(4, 2, Granularity::Layer).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|x| x.counts == [2, 2, 2] && x.last == SubStage::FfnOut));

        let s = stage_shapes(2, 6, Granularity::Stage).unwrap();
        let lasts: Vec<_> = s.iter().map(|x| x.last).collect();
        assert_eq!(lasts, [SubStage::Attention, SubStage::FfnIn, SubStage::FfnOut].repeat(2));
        assert!(s.iter().all(|x| x.counts.iter().sum::<u64>() == 1));

        let s = stage_shapes(2, 3, Granularity::Stage).unwrap();
        assert_eq!(s[0].counts, [1, 1, 0]);
        assert_eq!(s[1].counts, [1, 0, 1]);
        assert_eq!(s[2].counts, [0, 1, 1]);
        assert!(stage_shapes(4, 3, Granularity::Layer).is_err());
    }

    #[test]
    fn server_crossings() {
        // 8 chips per server, t = 4: every second boundary crosses
        let c: Vec<_> = (0..4).map(|s| crosses_server(s, 4, 8)).collect();
        assert_eq!(c, [false, true, false, true]);
        assert!(crosses_server(0, 16, 8));
    }

    #[test]
    fn shards_sum_to_total() {
        for dim in [1u64, 7, 12288, 12289] {
            for t in [1u64, 3, 8, 136] {
                let sum: u64 = (0..t).map(|i| shard_width(dim, t, i)).sum();
                assert_eq!(sum, dim);
                assert_eq!((0..t).map(|i| shard_width(dim, t, i)).max().unwrap(), shard(dim, t));
            }
        }
    }

    #[test]
    fn gpt3_table_plan_enumerated() {
        let spec = presets::gpt3();
        let srv = server(225.8, 5.5, 2750.0, 17);
        assert_eq!(srv.chips_total, 136);
        let scenario = Scenario {
            batch: 256,
            context: 2048,
            sparsity: 0.0,
        };
        let plans = enumerate_mappings(&spec, &srv, scenario, &MappingOptions::default()).unwrap();
        assert!(plans
            .iter()
            .any(|p| p.t == 136 && p.p == 96 && p.batch == 256 && p.micro_batch_size == 2));
        for p in &plans {
            assert!(p.memory_per_chip <= srv.chiplet.sram_bytes());
            assert_eq!(p.batch % p.micro_batches, 0);
            assert!(p.t * p.p <= p.n_servers * srv.chips_total);
        }
    }

    #[test]
    fn single_chip_only_trivial_family() {
        let spec = ModelSpec::standard("tiny", 64, 1, 4, 64);
        let mut srv = server(64.0, 2.0, 1000.0, 1);
        srv.chips_total = 1;
        let opts = MappingOptions {
            max_servers: 1,
            max_tensor_servers: 1,
            ..Default::default()
        };
        let plans = enumerate_mappings(
            &spec,
            &srv,
            Scenario {
                batch: 1,
                context: 64,
                sparsity: 0.0,
            },
            &opts,
        )
        .unwrap();
        assert!(plans.iter().all(|p| p.t == 1 && p.p == 1));
    }

    #[test]
    fn model_too_large_errors() {
        let spec = presets::gpt3();
        let srv = server(16.0, 1.0, 500.0, 1);
        let opts = MappingOptions {
            max_servers: 2,
            ..Default::default()
        };
        let err = enumerate_mappings(
            &spec,
            &srv,
            Scenario {
                batch: 1,
                context: 2048,
                sparsity: 0.0,
            },
            &opts,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ModelDoesNotFit { .. }));
    }

    /// Fewest chips whose SRAM holds all weights and KV, counted directly.
    fn min_chips_oracle(spec: &ModelSpec, sram_bytes: f64, batch: u64, context: u64) -> f64 {
        let weights = param_count(spec).total as f64 * spec.bytes_per_param;
        let kv = crate::workload::kv_cache_bytes(spec, batch, context).unwrap();
        (weights + kv) / sram_bytes
    }

    #[test]
    fn halving_sram_doubles_min_chips() {
        let spec = presets::gpt3();
        let a = min_chips_oracle(&spec, 200e6, 64, 2048);
        let b = min_chips_oracle(&spec, 100e6, 64, 2048);
        assert!((b / a - 2.0).abs() < 1e-12);

        // the enumerator's smallest feasible system tracks the same ratio
        let min_chips = |sram: f64| {
            let srv = server(sram, 4.0, 1000.0, 10);
            let opts = MappingOptions {
                max_servers: 4096,
                ..Default::default()
            };
            enumerate_mappings(
                &spec,
                &srv,
                Scenario {
                    batch: 64,
                    context: 2048,
                    sparsity: 0.0,
                },
                &opts,
            )
            .unwrap()
            .iter()
            .map(|p| p.chips_used())
            .min()
            .unwrap() as f64
        };
        let ratio = min_chips(100.0) / min_chips(200.0);
        assert!((1.6..=2.6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn heuristics_off_keeps_everything() {
        let spec = presets::gpt2();
        let srv = server(64.0, 5.0, 2000.0, 16);
        let plans = enumerate_mappings(
            &spec,
            &srv,
            Scenario {
                batch: 16,
                context: 1024,
                sparsity: 0.0,
            },
            &MappingOptions::default(),
        )
        .unwrap();
        let (kept, log) = apply_heuristics(plans.clone(), srv.chips_total, spec.n_layers, &[]);
        assert_eq!(kept, plans);
        assert!(log.is_empty());

        let (kept, log) = apply_heuristics(plans.clone(), srv.chips_total, spec.n_layers, &Heuristic::ALL);
        assert_eq!(kept.len() + log.len(), plans.len());
        assert!(kept.iter().all(|p| p.t <= srv.chips_total));
    }

    #[test]
    fn cross_server_tensor_pruned() {
        let spec = presets::gpt2();
        let srv = server(64.0, 5.0, 2000.0, 16);
        let mut plan = enumerate_mappings(
            &spec,
            &srv,
            Scenario {
                batch: 1,
                context: 1024,
                sparsity: 0.0,
            },
            &MappingOptions::default(),
        )
        .unwrap()
        .remove(0);
        plan.t = 2 * srv.chips_total;
        assert_eq!(
            pruned_by(&plan, srv.chips_total, spec.n_layers, &[Heuristic::NoCrossServerTensor]),
            Some(Heuristic::NoCrossServerTensor)
        );
    }

    #[test]
    fn schedule_table_anchor() {
        let (p, n) = choose_schedule(256, 96, 256);
        assert_eq!((p, n, 256 / n), (96, 128, 2));
        assert_eq!(choose_schedule(1, 96, 1), (1, 1));
    }

    /// Exhaustive argmin of max(1/n, 1/p) with the same tie-break.
    fn schedule_oracle(batch: u64, p_max: u64, n_max: u64) -> (u64, u64) {
        let mut best: Option<(f64, u64, u64)> = None;
        for p in 1..=p_max {
            for n in 1..=n_max.min(batch) {
                if batch % n != 0 {
                    continue;
                }
                let score = (1.0 / n as f64).max(1.0 / p as f64);
                let better = match best {
                    None => true,
                    Some((s, bp, bn)) => score < s || (score == s && (p, n) < (bp, bn)),
                };
                if better {
                    best = Some((score, p, n));
                }
            }
        }
        let (_, p, n) = best.unwrap();
        (p, n)
    }

    #[test]
    fn schedule_matches_exhaustive_search() {
        for batch in 1..=64 {
            for p_max in 1..=32 {
                for n_max in 1..=32 {
                    assert_eq!(
                        choose_schedule(batch, p_max, n_max),
                        schedule_oracle(batch, p_max, n_max),
                        "N={batch} p_max={p_max} n_max={n_max}"
                    );
                }
            }
        }
    }

    #[test]
    fn ring_all_reduce_traffic() {
        let mb = 1e6;
        assert_eq!(collective_bytes_per_node(CollectiveKind::AllReduce, mb, 4), 1.5e6);
    }

    #[test]
    fn pipeline_only_traffic_is_activations() {
        let spec = presets::gpt2();
        let srv = server(64.0, 5.0, 2000.0, 16);
        let plan = MappingPlan {
            t: 1,
            p: 2,
            batch: 1,
            micro_batches: 1,
            micro_batch_size: 1,
            context: 128,
            sparsity: 0.0,
            n_servers: 1,
            granularity: Granularity::Layer,
            attn: PairStrategy::ALL[2],
            ffn: PairStrategy::ALL[2],
            ffn_layout: FfnLayout::OneD,
            boundary: BoundaryMode::AllReduce,
            memory_per_chip: 0.0,
            per_link_traffic: LinkTraffic {
                intra_server: 0.0,
                inter_server: 0.0,
            },
        };
        let lt = link_traffic(&spec, &plan, srv.chips_total, Topology::Ring).unwrap();
        assert_eq!(lt.intra_server, 2.0 * spec.d_model as f64);
        assert_eq!(lt.inter_server, 0.0);
    }

    #[test]
    fn mesh_2d_traffic_scales_inverse_sqrt() {
        let at = |t| collective_bytes_per_node(CollectiveKind::Mesh2dAllReduce, 1e6, t);
        assert!((at(64) / at(16) - 0.5).abs() < 1e-12);
    }
}
