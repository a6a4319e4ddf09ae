//! Analytical inference simulation: roofline kernel latencies, ring
//! collectives, pipeline stage latencies, prefill and end-to-end generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{
    crosses_server, cut_payload, layer_collectives, shard, stage_shapes, substage_weight_elements, CollectiveKind,
    MappingPlan, PlacedCollective, StageShape,
};
use crate::server::ServerDesign;
use crate::silicon::ChipletDesign;
use crate::sparsity::{effective_bandwidth_factor, TileShape};
use crate::workload::{flops_per_token, layer_kernels, param_count, Kernel, ModelSpec, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// GB/s of the slowest link a collective crosses.
    pub bandwidth: f64,
    /// Collective start-up latency, seconds.
    pub t_init: f64,
}

impl LinkModel {
    fn bytes_per_s(&self) -> f64 {
        self.bandwidth * 1e9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfConfig {
    pub eff_compute: f64,
    pub eff_bandwidth: f64,
    /// Chip-to-chip links on the server board.
    pub intra_link: LinkModel,
    /// Server-to-server Ethernet.
    pub inter_link: LinkModel,
    /// Prompt length per request; generation fills the rest of the context.
    pub prompt_tokens: u64,
    /// Average KV reads over every decode position instead of using the
    /// mid-context position.
    pub exact_kv_positions: bool,
    /// Dense words the sparse decoder emits per dense word of raw SRAM
    /// bandwidth.
    pub decoder_cap: f64,
}

impl Default for PerfConfig {
    fn default() -> Self {
        PerfConfig {
            eff_compute: 1.0,
            eff_bandwidth: 1.0,
            intra_link: LinkModel {
                bandwidth: 25.0,
                t_init: 1e-6,
            },
            inter_link: LinkModel {
                bandwidth: 12.5,
                t_init: 2e-6,
            },
            prompt_tokens: 128,
            exact_kv_positions: false,
            decoder_cap: 1.0,
        }
    }
}

impl PerfConfig {
    pub fn validate(&self) -> Result<()> {
        let eff_ok = |e: f64| e > 0.0 && e <= 1.0;
        if !eff_ok(self.eff_compute) || !eff_ok(self.eff_bandwidth) {
            return Err(Error::InvalidConstants("efficiencies must lie in (0, 1]".into()));
        }
        for l in [self.intra_link, self.inter_link] {
            if !(l.bandwidth > 0.0) || !(l.t_init >= 0.0) {
                return Err(Error::InvalidConstants("links need bandwidth > 0 and t_init >= 0".into()));
            }
        }
        if self.prompt_tokens == 0 || !(self.decoder_cap > 0.0) {
            return Err(Error::InvalidConstants("prompt_tokens and decoder_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Compute,
    Memory,
    Network,
    Pipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelTime {
    pub seconds: f64,
    pub compute: f64,
    pub memory: f64,
    pub bound: Bound,
}

pub fn kernel_latency(k: &Kernel, chip: &ChipletDesign, cfg: &PerfConfig) -> KernelTime {
    let compute = k.flops as f64 / (chip.flops_per_s() * cfg.eff_compute);
    let memory = k.total_bytes() as f64 / (chip.bytes_per_s() * cfg.eff_bandwidth);
    KernelTime {
        seconds: compute.max(memory),
        compute,
        memory,
        bound: if compute >= memory { Bound::Compute } else { Bound::Memory },
    }
}

/// `(N−1)·(D/N)/B + T_init` over a ring of `nodes`.
pub fn reduce_scatter_time(bytes: f64, nodes: u64, link: &LinkModel) -> Result<f64> {
    if nodes < 2 {
        return Err(Error::TooFewNodes(nodes));
    }
    Ok((nodes - 1) as f64 * (bytes / nodes as f64) / link.bytes_per_s() + link.t_init)
}

pub fn all_gather_time(bytes: f64, nodes: u64, link: &LinkModel) -> Result<f64> {
    reduce_scatter_time(bytes, nodes, link)
}

/// A reduce-scatter followed by an all-gather, each paying its own start-up.
pub fn all_reduce_time(bytes: f64, nodes: u64, link: &LinkModel) -> Result<f64> {
    Ok(reduce_scatter_time(bytes, nodes, link)? + all_gather_time(bytes, nodes, link)?)
}

/// Time of one collective with a `bytes` tensor over `t` nodes; zero when
/// there is nothing to exchange.
pub fn collective_time(kind: CollectiveKind, bytes: f64, t: u64, link: &LinkModel) -> f64 {
    if t < 2 {
        return 0.0;
    }
    // t >= 2 below, so the ring formulas cannot fail
    let rs = reduce_scatter_time(bytes, t, link).unwrap_or(0.0);
    match kind {
        CollectiveKind::ReduceScatter
        | CollectiveKind::AllGather
        | CollectiveKind::Reduce
        | CollectiveKind::Broadcast
        | CollectiveKind::Gather => rs,
        CollectiveKind::AllReduce => 2.0 * rs,
        CollectiveKind::PointToPoint => bytes / link.bytes_per_s() + link.t_init,
        CollectiveKind::Mesh2dAllReduce => {
            2.0 * bytes / (t as f64).sqrt() / link.bytes_per_s() + 2.0 * link.t_init
        }
    }
}

/// `l_prefill + (tokens − 1) · max(l_mb, n · l_s)`.
pub fn e2e_latency(l_prefill: f64, tokens: u64, l_mb: f64, n: u64, l_s: f64) -> f64 {
    l_prefill + tokens.saturating_sub(1) as f64 * l_mb.max(n as f64 * l_s)
}

/// Everything needed to time one plan on one server design.
pub struct System<'a> {
    pub spec: &'a ModelSpec,
    pub server: &'a ServerDesign,
    pub plan: &'a MappingPlan,
    pub cfg: &'a PerfConfig,
}

#[derive(Debug, Clone, Copy, Default)]
struct SubStageTime {
    compute_bound: f64,
    memory_bound: f64,
    network: f64,
    /// Time of the collective that completes the sub-stage.
    end_collective: f64,
    end_kind: Option<CollectiveKind>,
}

#[derive(Debug, Clone, Copy, Default)]
struct StageTime {
    compute_bound: f64,
    memory_bound: f64,
    network: f64,
}

impl StageTime {
    fn total(&self) -> f64 {
        self.compute_bound + self.memory_bound + self.network
    }

    fn bound(&self) -> Bound {
        if self.network >= self.compute_bound && self.network >= self.memory_bound {
            Bound::Network
        } else if self.compute_bound >= self.memory_bound {
            Bound::Compute
        } else {
            Bound::Memory
        }
    }
}

impl<'a> System<'a> {
    fn chips_per_server(&self) -> u64 {
        self.server.chips_total
    }

    fn tensor_link(&self) -> &LinkModel {
        if self.plan.t > self.chips_per_server() {
            &self.cfg.inter_link
        } else {
            &self.cfg.intra_link
        }
    }

    fn weight_read_factor(&self) -> f64 {
        if self.plan.sparsity > 0.0 {
            effective_bandwidth_factor(1.0 - self.plan.sparsity, self.cfg.decoder_cap, TileShape::default())
        } else {
            1.0
        }
    }

    /// One layer's kernels as seen by a single chip of a stage.
    fn chip_kernels(&self, phase: Phase, context: u64, sequences: u64) -> [Kernel; 6] {
        let spec = self.spec;
        let t = self.plan.t;
        let full = layer_kernels(spec, phase, context, sequences, 0);
        let params = param_count(spec).layer;
        let w = substage_weight_elements(spec, self.plan);
        let frac = [
            w[0] as f64 / params.attention as f64,
            w[1] as f64 / params.ffn_in as f64,
            w[2] as f64 / params.ffn_out as f64,
        ];
        let attn_frac = shard(spec.d_attn, t) as f64 / spec.d_attn as f64;
        let kv_frac = shard(spec.kv_dim(), t) as f64 / spec.kv_dim() as f64;
        let wf = self.weight_read_factor();
        let scale = |k: Kernel, flops: f64, weights: f64, kv: f64| Kernel {
            flops: (k.flops as f64 * flops).round() as u64,
            weight_bytes: (k.weight_bytes as f64 * weights / wf).round() as u64,
            act_bytes: (k.act_bytes as f64 / t as f64).round() as u64,
            kv_bytes_touched: (k.kv_bytes_touched as f64 * kv).round() as u64,
            ..k
        };
        let even = 1.0 / t as f64;
        [
            scale(full[0], frac[0], frac[0], 0.0),
            scale(full[1], attn_frac, 0.0, kv_frac),
            scale(full[2], attn_frac, 0.0, kv_frac),
            scale(full[3], frac[1], frac[1], 0.0),
            scale(full[4], frac[2], frac[2], 0.0),
            scale(full[5], even, 0.0, 0.0),
        ]
    }

    fn substage_times(
        &self,
        phase: Phase,
        context: u64,
        sequences: u64,
        collectives: &[PlacedCollective],
    ) -> [SubStageTime; 3] {
        let kernels = self.chip_kernels(phase, context, sequences);
        let tokens = match phase {
            Phase::Generate => sequences,
            Phase::Prefill => sequences * context,
        };
        let groups: [&[usize]; 3] = [&[0, 1, 2], &[3, 5], &[4]];
        let mut out = [SubStageTime::default(); 3];
        for (sub, idx) in groups.iter().enumerate() {
            for &i in idx.iter() {
                let kt = kernel_latency(&kernels[i], &self.server.chiplet, self.cfg);
                match kt.bound {
                    Bound::Compute => out[sub].compute_bound += kt.seconds,
                    _ => out[sub].memory_bound += kt.seconds,
                }
            }
        }
        let link = self.tensor_link();
        for pc in collectives {
            let bytes = pc.collective.payload_bytes as f64 * tokens as f64;
            let time = collective_time(pc.collective.kind, bytes, self.plan.t, link);
            let slot = &mut out[pc.sub.index()];
            slot.network += time;
            if pc.ends_substage {
                slot.end_collective = time;
                slot.end_kind = Some(pc.collective.kind);
            }
        }
        out
    }

    /// Outgoing transfer after stage `s`, replacing the closing collective
    /// where the boundary makes it redundant. Returns the adjustment to the
    /// stage's network time.
    fn boundary_time(&self, s: u64, shape: &StageShape, subs: &[SubStageTime; 3], tokens: u64) -> f64 {
        let cfg = self.cfg;
        let t = self.plan.t;
        let bytes = cut_payload(self.spec, shape.last) * tokens as f64;
        let intra = &cfg.intra_link;
        if !crosses_server(s, t, self.chips_per_server()) {
            return bytes / intra.bytes_per_s() + intra.t_init;
        }
        let eth = &cfg.inter_link;
        let send_once = bytes / eth.bytes_per_s() + eth.t_init;
        let fan_out = collective_time(CollectiveKind::Broadcast, bytes, t, intra);
        let last = subs[shape.last.index()];
        match last.end_kind {
            Some(CollectiveKind::AllReduce) | Some(CollectiveKind::Mesh2dAllReduce) => match self.plan.boundary {
                crate::mapping::BoundaryMode::AllReduce => t as f64 * bytes / eth.bytes_per_s() + eth.t_init,
                crate::mapping::BoundaryMode::ReduceBroadcast => {
                    let reduce = collective_time(CollectiveKind::Reduce, bytes, t, self.tensor_link());
                    reduce - last.end_collective + send_once + fan_out
                }
            },
            // chips send their own shards; the next server broadcasts them
            Some(CollectiveKind::AllGather) => send_once + fan_out - last.end_collective,
            _ => send_once,
        }
    }

    fn stage_times(&self, phase: Phase, context: u64, sequences: u64) -> Result<Vec<StageTime>> {
        let collectives = layer_collectives(self.spec, self.plan)?;
        let subs = self.substage_times(phase, context, sequences, &collectives);
        let tokens = match phase {
            Phase::Generate => sequences,
            Phase::Prefill => sequences * context,
        };
        let shapes = stage_shapes(self.spec.n_layers, self.plan.p, self.plan.granularity)?;
        let p = shapes.len() as u64;
        Ok(shapes
            .iter()
            .enumerate()
            .map(|(s, shape)| {
                let mut st = StageTime::default();
                for (i, sub) in subs.iter().enumerate() {
                    let c = shape.counts[i] as f64;
                    st.compute_bound += c * sub.compute_bound;
                    st.memory_bound += c * sub.memory_bound;
                    st.network += c * sub.network;
                }
                if (s as u64) + 1 < p {
                    st.network += self.boundary_time(s as u64, shape, &subs, tokens);
                }
                st
            })
            .collect())
    }

    fn kv_position(&self) -> u64 {
        (self.plan.context / 2).max(1)
    }

    /// `(l_mb, l_s)` for one decode step of one micro-batch, plus the
    /// slowest stage's bound.
    pub fn microbatch_latency(&self) -> Result<(f64, f64, Bound)> {
        let mbs = self.plan.micro_batch_size;
        let positions: Vec<u64> = if self.cfg.exact_kv_positions {
            (1..=self.plan.context).collect()
        } else {
            vec![self.kv_position()]
        };
        let mut acc: Vec<StageTime> = Vec::new();
        for &pos in &positions {
            let st = self.stage_times(Phase::Generate, pos, mbs)?;
            if acc.is_empty() {
                acc = st;
            } else {
                for (a, b) in acc.iter_mut().zip(st) {
                    a.compute_bound += b.compute_bound;
                    a.memory_bound += b.memory_bound;
                    a.network += b.network;
                }
            }
        }
        let k = positions.len() as f64;
        for a in acc.iter_mut() {
            a.compute_bound /= k;
            a.memory_bound /= k;
            a.network /= k;
        }
        let l_mb = acc.iter().map(StageTime::total).sum();
        let slowest = acc
            .iter()
            .copied()
            .fold(StageTime::default(), |a, b| if b.total() > a.total() { b } else { a });
        Ok((l_mb, slowest.total(), slowest.bound()))
    }

    /// Prompt pass with whole sequences per micro-batch, pipelined over the
    /// plan's micro-batches.
    pub fn prefill_latency(&self, context: u64) -> Result<f64> {
        if context == 0 {
            return Err(Error::ContextOutOfRange {
                pos: 0,
                max: self.spec.max_context,
            });
        }
        let stages = self.stage_times(Phase::Prefill, context, self.plan.micro_batch_size)?;
        let first: f64 = stages.iter().map(StageTime::total).sum();
        let slowest = stages.iter().map(StageTime::total).fold(0.0, f64::max);
        Ok(first + self.plan.micro_batches.saturating_sub(1) as f64 * slowest)
    }

    /// `(prompt, generated)` token counts per sequence for the plan's context.
    pub fn token_split(&self) -> (u64, u64) {
        let ctx = self.plan.context.max(1);
        let prompt = self.cfg.prompt_tokens.min(ctx.saturating_sub(1)).max(1);
        (prompt, ctx.saturating_sub(prompt).max(1))
    }

    /// Model flops per generated token at the decode position used for KV.
    pub fn flops_per_generated_token(&self) -> Result<f64> {
        let layer = if self.cfg.exact_kv_positions {
            let ctx = self.plan.context;
            let first = flops_per_token(self.spec, 1)?;
            let last = flops_per_token(self.spec, ctx)?;
            // attention flops are linear in position, so the mean is the midpoint
            (first.total() as f64 + last.total() as f64) / 2.0
        } else {
            flops_per_token(self.spec, self.kv_position())?.total() as f64
        };
        Ok(layer * self.spec.n_layers as f64)
    }

    pub fn system_chips(&self) -> u64 {
        self.plan.n_servers * self.server.chips_total
    }

    pub fn simulate(&self) -> Result<PerfReport> {
        let plan = self.plan;
        let (l_mb, l_s, stage_bound) = self.microbatch_latency()?;
        let (prompt, tokens) = self.token_split();
        let l_prefill = self.prefill_latency(prompt)?;
        let l_all = e2e_latency(l_prefill, tokens, l_mb, plan.micro_batches, l_s);
        let step = l_mb.max(plan.micro_batches as f64 * l_s);
        if !(step > 0.0) {
            return Err(Error::ZeroThroughput);
        }
        let decode_throughput = plan.batch as f64 / step;
        let chips = self.system_chips();
        let flops = self.flops_per_generated_token()?;
        let utilization = decode_throughput * flops / (chips as f64 * self.server.chiplet.flops_per_s());
        let bound = if l_mb > plan.micro_batches as f64 * l_s {
            Bound::Pipeline
        } else {
            stage_bound
        };
        let throughput = (plan.batch * tokens) as f64 / l_all;
        Ok(PerfReport {
            l_mb,
            l_s,
            l_prefill,
            l_all,
            tokens_generated: tokens,
            throughput,
            decode_throughput,
            tokens_per_chip: throughput / chips as f64,
            utilization,
            bound,
            chips,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    /// Seconds for one micro-batch to traverse every stage.
    pub l_mb: f64,
    /// Seconds of the slowest stage.
    pub l_s: f64,
    pub l_prefill: f64,
    /// Seconds to prefill and generate `tokens_generated` tokens per sequence.
    pub l_all: f64,
    pub tokens_generated: u64,
    /// Tokens per second including prefill: `batch · tokens / l_all`.
    pub throughput: f64,
    /// Steady-state generation rate, `batch / max(l_mb, n · l_s)`.
    pub decode_throughput: f64,
    pub tokens_per_chip: f64,
    pub utilization: f64,
    pub bound: Bound,
    pub chips: u64,
}

pub fn simulate(
    spec: &ModelSpec,
    server: &ServerDesign,
    plan: &MappingPlan,
    cfg: &PerfConfig,
) -> Result<PerfReport> {
    System {
        spec,
        server,
        plan,
        cfg,
    }
    .simulate()
}
