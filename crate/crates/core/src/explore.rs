//! Two-phase exploration: hardware enumeration, then per-server mapping
//! search and simulation, merged in canonical order into the run artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{read_json, ModelRef, RunConfig, ScheduleSearch};
use crate::economics::{
    amortized_cost_per_token, baseline_cost, cost_report, multi_model_objective, nre_breakeven, pareto_indices,
    select_optimal, CostReport, DesignPoint, Direction, MultiModelChoice,
};
use crate::error::{Error, Result};
use crate::mapping::{
    enumerate_mappings, link_traffic, memory_per_chip, pruned_by, BoundaryMode, FfnLayout, Granularity,
    Heuristic, LinkTraffic, MappingPlan, PairStrategy, Scenario, Topology,
};
use crate::output::{
    csv_bytes_with_header, jsonl_bytes, read_csv, write_file, DesignRow, PlotRow, RejectionRow, SummaryRow,
    DESIGN_COLUMNS, PLOT_COLUMNS, REJECTION_COLUMNS,
};
use crate::perfsim::{simulate, PerfReport};
use crate::server::{assemble_server, ServerDesign};
use crate::silicon::{enumerate_chiplets, size_chiplet, ChipletDesign, SiliconConstants};
use crate::sparsity::{footprint_ratio_at_density, TileShape};
use crate::workload::ModelSpec;

/// Phase-1 result: every feasible server and every logged rejection.
#[derive(Debug, Clone)]
pub struct Hardware {
    pub chiplets: Vec<ChipletDesign>,
    pub servers: Vec<ServerDesign>,
    pub rejections: Vec<RejectionRow>,
}

fn hw_rejection(stage: &str, chip: (f64, f64, f64, f64), chips_per_lane: u64, reason: String) -> RejectionRow {
    RejectionRow {
        stage: stage.into(),
        model: String::new(),
        sram_mb: chip.0,
        tflops: chip.1,
        bandwidth: chip.2,
        die_area: chip.3,
        chips_per_lane,
        batch: 0,
        context: 0,
        sparsity: 0.0,
        reason,
        count: 1,
    }
}

pub fn explore_hardware(cfg: &RunConfig) -> Result<Hardware> {
    let chips = enumerate_chiplets(&cfg.chiplet_sweep, &cfg.silicon)?;
    let mut rejections: Vec<RejectionRow> = chips
        .rejections
        .iter()
        .map(|r| {
            let reason = r.reasons.iter().map(|x| x.as_str()).collect::<Vec<_>>().join("|");
            hw_rejection("chiplet", (r.sram_mb, r.tflops, r.bandwidth, r.die_area), 0, reason)
        })
        .collect();
    let mut servers = Vec::new();
    for chip in &chips.designs {
        for k in cfg.server.min_chips_per_lane..=cfg.server.max_chips_per_lane {
            let s = assemble_server(chip, k, &cfg.server);
            if s.feasible() {
                servers.push(s);
            } else {
                let reason = s.reasons.iter().map(|x| x.as_str()).collect::<Vec<_>>().join("|");
                rejections.push(hw_rejection(
                    "server",
                    (chip.sram_mb, chip.tflops, chip.bandwidth, chip.die_area),
                    k,
                    reason,
                ));
            }
        }
    }
    Ok(Hardware {
        chiplets: chips.designs,
        servers,
        rejections,
    })
}

/// Outcome of searching every mapping of one model on one server.
#[derive(Debug, Clone, Default)]
pub struct ServerSearch {
    pub best: Option<DesignPoint>,
    pub fits: bool,
    pub simulated: u64,
    /// Plans removed per heuristic id.
    pub pruned: BTreeMap<u8, u64>,
}

/// Keeps, for each plan shape, only the micro-batch count minimizing
/// `max(1/n, 1/p)`; ties go to fewer micro-batches.
fn schedule_filter(plans: Vec<MappingPlan>) -> Vec<MappingPlan> {
    let mut best: BTreeMap<_, MappingPlan> = BTreeMap::new();
    let shape = |p: &MappingPlan| (p.t, p.p, p.granularity, p.attn, p.ffn_layout, p.ffn, p.boundary);
    let score = |p: &MappingPlan| (std::cmp::Reverse(p.micro_batches.min(p.p)), p.micro_batches);
    let mut order = Vec::new();
    for plan in plans {
        let key = shape(&plan);
        match best.get(&key) {
            Some(cur) if score(cur) <= score(&plan) => {}
            Some(_) => {
                best.insert(key, plan);
            }
            None => {
                order.push(key);
                best.insert(key, plan);
            }
        }
    }
    order.into_iter().filter_map(|k| best.remove(&k)).collect()
}

/// Cost and performance of one plan on one server.
pub fn evaluate_plan(
    spec: &ModelSpec,
    server: &ServerDesign,
    plan: &MappingPlan,
    cfg: &RunConfig,
    config_hash: &str,
) -> Result<DesignPoint> {
    let perf: PerfReport = simulate(spec, server, plan, &cfg.perf)?;
    let n = plan.n_servers;
    let hardware = server.capex.total().dollars() * n as f64;
    let cost: CostReport = cost_report(
        hardware,
        server.tdp_wall * n as f64,
        perf.utilization,
        perf.throughput,
        &cfg.cost,
    )?;
    Ok(DesignPoint {
        model: spec.name.clone(),
        server: server.clone(),
        n_servers: n,
        plan: plan.clone(),
        perf,
        cost,
        config_hash: config_hash.to_string(),
    })
}

/// Candidate plans after heuristic and schedule filtering, with prune counts.
pub fn candidate_plans(
    spec: &ModelSpec,
    server: &ServerDesign,
    scenario: Scenario,
    cfg: &RunConfig,
) -> Result<(Vec<MappingPlan>, BTreeMap<u8, u64>)> {
    let plans = enumerate_mappings(spec, server, scenario, &cfg.mapping)?;
    let mut pruned = BTreeMap::new();
    let plans: Vec<MappingPlan> = if cfg.heuristics {
        plans
            .into_iter()
            .filter(|p| match pruned_by(p, server.chips_total, spec.n_layers, &Heuristic::ALL) {
                Some(h) => {
                    *pruned.entry(h.id()).or_insert(0) += 1;
                    false
                }
                None => true,
            })
            .collect()
    } else {
        plans
    };
    let plans = match cfg.schedule {
        ScheduleSearch::Auto => schedule_filter(plans),
        ScheduleSearch::Exhaustive => plans,
    };
    Ok((plans, pruned))
}

pub fn search_server(
    spec: &ModelSpec,
    server: &ServerDesign,
    scenario: Scenario,
    cfg: &RunConfig,
    config_hash: &str,
) -> Result<ServerSearch> {
    let (plans, pruned) = match candidate_plans(spec, server, scenario, cfg) {
        Ok(v) => v,
        Err(Error::ModelDoesNotFit { .. }) => return Ok(ServerSearch::default()),
        Err(e) => return Err(e),
    };
    let mut out = ServerSearch {
        fits: true,
        pruned,
        ..Default::default()
    };
    let mut best_any: Option<DesignPoint> = None;
    for plan in &plans {
        let point = evaluate_plan(spec, server, plan, cfg, config_hash)?;
        out.simulated += 1;
        let better = |cur: &Option<DesignPoint>| match cur {
            None => true,
            Some(c) => cfg.objective.compare(&point, c).is_lt(),
        };
        if cfg.constraints.violations(&point).is_empty() {
            if better(&out.best) {
                out.best = Some(point.clone());
            }
        } else if out.best.is_none() && better(&best_any) {
            best_any = Some(point);
        }
    }
    if out.best.is_none() {
        out.best = best_any;
    }
    Ok(out)
}

/// Everything a run produces, before it is written to disk.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub config_hash: String,
    pub points: Vec<DesignPoint>,
    pub frontier: Vec<DesignPoint>,
    pub optimal: BTreeMap<String, DesignPoint>,
    pub multi_model: Option<MultiModelChoice>,
    pub rejections: Vec<RejectionRow>,
    pub summary: Vec<SummaryRow>,
}

fn scenarios(cfg: &RunConfig) -> Vec<Scenario> {
    let s = &cfg.scenarios;
    let mut out = Vec::new();
    for &batch in &s.batch {
        for &context in &s.context {
            for &sparsity in &s.sparsity {
                out.push(Scenario {
                    batch,
                    context,
                    sparsity,
                });
            }
        }
    }
    out
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn scenario_rejection(model: &str, sc: Scenario, reason: &str, count: u64) -> RejectionRow {
    RejectionRow {
        stage: "mapping".into(),
        model: model.into(),
        sram_mb: 0.0,
        tflops: 0.0,
        bandwidth: 0.0,
        die_area: 0.0,
        chips_per_lane: 0,
        batch: sc.batch,
        context: sc.context,
        sparsity: sc.sparsity,
        reason: reason.into(),
        count,
    }
}

/// Pareto front of throughput (maximized) against TCO/Token (minimized),
/// per model.
pub fn model_frontiers(points: &[DesignPoint]) -> Vec<DesignPoint> {
    let mut by_model: BTreeMap<&str, Vec<&DesignPoint>> = BTreeMap::new();
    for p in points {
        by_model.entry(p.model.as_str()).or_default().push(p);
    }
    let mut out = Vec::new();
    for pts in by_model.values() {
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.perf.throughput, p.cost.tco_per_mtok)).collect();
        for i in pareto_indices(&xy, [Direction::Maximize, Direction::Minimize]) {
            out.push(pts[i].clone());
        }
    }
    out
}

/// Runs both phases without touching the filesystem.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let hash = cfg.hash();
    let specs = cfg.model_specs()?;
    let hw = explore_hardware(cfg)?;
    let mut rejections = hw.rejections;
    let scs = scenarios(cfg);

    let mut tasks = Vec::new();
    let mut summary = Vec::new();
    for (mi, spec) in specs.iter().enumerate() {
        for (si, sc) in scs.iter().enumerate() {
            if sc.context > spec.max_context {
                rejections.push(scenario_rejection(&spec.name, *sc, "CONTEXT_OUT_OF_RANGE", 1));
                continue;
            }
            for vi in 0..hw.servers.len() {
                tasks.push((mi, si, vi));
            }
        }
    }
    let results: Vec<Result<ServerSearch>> = with_pool(cfg.workers, || {
        tasks
            .par_iter()
            .map(|&(mi, si, vi)| search_server(&specs[mi], &hw.servers[vi], scs[si], cfg, &hash))
            .collect()
    })?;

    let mut points = Vec::new();
    let mut cursor = 0;
    for spec in &specs {
        for sc in &scs {
            if sc.context > spec.max_context {
                continue;
            }
            let n = hw.servers.len();
            let mut row = SummaryRow {
                model: spec.name.clone(),
                batch: sc.batch,
                context: sc.context,
                sparsity: sc.sparsity,
                servers_evaluated: n as u64,
                servers_fitting: 0,
                plans_simulated: 0,
                plans_pruned: 0,
                best_tco_per_mtok: None,
                best_tokens_per_chip: None,
            };
            let mut pruned: BTreeMap<u8, u64> = BTreeMap::new();
            let mut no_fit = 0u64;
            for r in &results[cursor..cursor + n] {
                let r = r.as_ref().map_err(|e| Error::Config(e.to_string()))?;
                if r.fits {
                    row.servers_fitting += 1;
                } else {
                    no_fit += 1;
                }
                row.plans_simulated += r.simulated;
                for (h, c) in &r.pruned {
                    *pruned.entry(*h).or_insert(0) += c;
                    row.plans_pruned += c;
                }
                if let Some(p) = &r.best {
                    row.best_tco_per_mtok = Some(match row.best_tco_per_mtok {
                        Some(b) => b.min(p.cost.tco_per_mtok),
                        None => p.cost.tco_per_mtok,
                    });
                    row.best_tokens_per_chip = Some(match row.best_tokens_per_chip {
                        Some(b) => b.max(p.perf.tokens_per_chip),
                        None => p.perf.tokens_per_chip,
                    });
                    points.push(p.clone());
                }
            }
            cursor += n;
            if no_fit > 0 {
                rejections.push(scenario_rejection(&spec.name, *sc, "MODEL_DOES_NOT_FIT", no_fit));
            }
            for (h, c) in pruned {
                rejections.push(RejectionRow {
                    stage: "heuristic".into(),
                    ..scenario_rejection(&spec.name, *sc, &format!("H{h}"), c)
                });
            }
            summary.push(row);
        }
    }

    let mut optimal = BTreeMap::new();
    let mut by_model: BTreeMap<String, Vec<DesignPoint>> = BTreeMap::new();
    for p in &points {
        by_model.entry(p.model.clone()).or_default().push(p.clone());
    }
    for (model, pts) in &by_model {
        if let Ok(best) = select_optimal(pts, &cfg.constraints, cfg.objective) {
            optimal.insert(model.clone(), best.clone());
        }
    }
    let multi_model = if by_model.len() > 1 {
        multi_model_objective(&by_model).ok()
    } else {
        None
    };
    let frontier = model_frontiers(&points);
    Ok(SweepResult {
        config_hash: hash,
        points,
        frontier,
        optimal,
        multi_model,
        rejections,
        summary,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_json_bytes(v: &Value) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| Error::Config(e.to_string()))?;
    b.push(b'\n');
    Ok(b)
}

fn optimal_json(res: &SweepResult, cfg: &RunConfig) -> Value {
    let per_model: Vec<Value> = res
        .optimal
        .values()
        .map(|p| {
            json!({
                "model": p.model,
                "die_area": p.server.chiplet.die_area,
                "sram_mb": p.server.chiplet.sram_mb,
                "tflops": p.server.chiplet.tflops,
                "bandwidth": p.server.chiplet.bandwidth,
                "chips_per_server": p.server.chips_total,
                "n_servers": p.n_servers,
                "t": p.plan.t,
                "p": p.plan.p,
                "batch": p.plan.batch,
                "micro_batch_size": p.plan.micro_batch_size,
                "micro_batches": p.plan.micro_batches,
                "context": p.plan.context,
                "sparsity": p.plan.sparsity,
                "tokens_per_chip": p.perf.tokens_per_chip,
                "tco_per_mtok": p.cost.tco_per_mtok,
                "design": DesignRow::from(p),
            })
        })
        .collect();
    let multi = res.multi_model.as_ref().map(|m| {
        json!({
            "chiplet": {
                "sram_mb": m.chiplet.sram_mb as f64 / 1e4,
                "tflops": m.chiplet.tflops as f64 / 1e4,
                "bandwidth": m.chiplet.bandwidth as f64 / 1e4,
            },
            "die_area": m.die_area,
            "geomean_tco_per_mtok": m.geomean,
            "mean_overhead": m.mean_overhead,
            "overhead": m.overhead,
            "per_model_optimum": m.per_model_optimum,
        })
    });
    json!({
        "config_hash": res.config_hash,
        "objective": cfg.objective,
        "constraints": cfg.constraints,
        "per_model": per_model,
        "multi_model": multi,
    })
}

/// Runs the sweep and writes every artifact into `cfg.out`.
///
/// Artifacts are written even when nothing is feasible; the call then
/// returns [`Error::NoFeasiblePoint`].
pub fn cmd_explore(cfg: &RunConfig) -> Result<SweepResult> {
    let res = run_sweep(cfg)?;
    let dir = &cfg.out;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<DesignRow> = res.points.iter().map(DesignRow::from).collect();
    let front: Vec<DesignRow> = res.frontier.iter().map(DesignRow::from).collect();
    let summary_cols = [
        "model",
        "batch",
        "context",
        "sparsity",
        "servers_evaluated",
        "servers_fitting",
        "plans_simulated",
        "plans_pruned",
        "best_tco_per_mtok",
        "best_tokens_per_chip",
    ];
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("designpoints.csv", csv_bytes_with_header(&rows, DESIGN_COLUMNS)?),
        ("designpoints.jsonl", jsonl_bytes(&rows)?),
        ("frontier.csv", csv_bytes_with_header(&front, DESIGN_COLUMNS)?),
        ("optimal.json", to_json_bytes(&optimal_json(&res, cfg))?),
        ("rejections.csv", csv_bytes_with_header(&res.rejections, REJECTION_COLUMNS)?),
        ("sweep_summary.csv", csv_bytes_with_header(&res.summary, &summary_cols)?),
    ];
    let mut hashes = BTreeMap::new();
    for (name, bytes) in &files {
        write_file(&dir.join(name), bytes)?;
        hashes.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": res.config_hash,
        "config": cfg.resolved_snapshot(),
        "outputs": hashes,
    });
    write_file(&dir.join("manifest.json"), &to_json_bytes(&manifest)?)?;
    if res.points.is_empty() {
        return Err(Error::NoFeasiblePoint(format!(
            "{} rejections logged in {}",
            res.rejections.len(),
            dir.join("rejections.csv").display()
        )));
    }
    Ok(res)
}

/// One fixed design to evaluate without search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub model: ModelRef,
    pub chiplet: ChipletSpec,
    pub chips_per_lane: u64,
    pub mapping: MappingSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipletSpec {
    pub sram_mb: f64,
    pub tflops: f64,
    /// GB/s.
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingSpec {
    pub t: u64,
    pub p: u64,
    pub batch: u64,
    pub micro_batch_size: u64,
    pub context: u64,
    #[serde(default)]
    pub sparsity: f64,
    #[serde(default = "row_col")]
    pub attn: PairStrategy,
    #[serde(default = "row_col")]
    pub ffn: PairStrategy,
    #[serde(default = "one_d")]
    pub ffn_layout: FfnLayout,
    #[serde(default = "reduce_broadcast")]
    pub boundary: BoundaryMode,
    #[serde(default)]
    pub granularity: Granularity,
}

fn row_col() -> PairStrategy {
    PairStrategy::from_str("row-col").unwrap_or(PairStrategy::ALL[2])
}

fn one_d() -> FfnLayout {
    FfnLayout::OneD
}

fn reduce_broadcast() -> BoundaryMode {
    BoundaryMode::ReduceBroadcast
}

/// Either a chiplet-system design or a purchased baseline accelerator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalInput {
    Design(EvalRequest),
    Baseline { baseline: crate::economics::BaselineAccelerator },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub feasible: bool,
    /// Reason codes from every phase; empty when feasible.
    pub reasons: Vec<String>,
    pub chiplet: Option<ChipletDesign>,
    pub server: Option<ServerDesign>,
    pub plan: Option<MappingPlan>,
    pub perf: Option<PerfReport>,
    pub cost: Option<CostReport>,
    pub config_hash: String,
}

/// Evaluates one fixed point; infeasibility is reported, not an error.
pub fn cmd_evaluate(cfg: &RunConfig, input: &EvalInput) -> Result<EvalReport> {
    let hash = cfg.hash();
    let req = match input {
        EvalInput::Baseline { baseline } => {
            return Ok(EvalReport {
                feasible: true,
                reasons: Vec::new(),
                chiplet: None,
                server: None,
                plan: None,
                perf: None,
                cost: Some(baseline_cost(baseline, &cfg.cost)?),
                config_hash: hash,
            })
        }
        EvalInput::Design(r) => r,
    };
    let spec = req.model.resolve()?;
    let mut report = EvalReport {
        feasible: false,
        reasons: Vec::new(),
        chiplet: None,
        server: None,
        plan: None,
        perf: None,
        cost: None,
        config_hash: hash.clone(),
    };
    let c = req.chiplet;
    let chip = match size_chiplet(c.sram_mb, c.tflops, c.bandwidth, &cfg.silicon) {
        Ok(chip) => chip,
        Err(r) => {
            report.reasons = r.reasons.iter().map(|x| x.as_str().to_string()).collect();
            return Ok(report);
        }
    };
    let server = assemble_server(&chip, req.chips_per_lane, &cfg.server);
    report.chiplet = Some(chip);
    report.reasons.extend(server.reasons.iter().map(|x| x.as_str().to_string()));
    let m = &req.mapping;
    if m.micro_batch_size == 0 || m.batch % m.micro_batch_size != 0 {
        return Err(Error::Config(format!(
            "micro_batch_size {} must divide batch {}",
            m.micro_batch_size, m.batch
        )));
    }
    let mut plan = MappingPlan {
        t: m.t,
        p: m.p,
        batch: m.batch,
        micro_batches: m.batch / m.micro_batch_size,
        micro_batch_size: m.micro_batch_size,
        context: m.context,
        sparsity: m.sparsity,
        n_servers: (m.t * m.p).div_ceil(server.chips_total),
        granularity: m.granularity,
        attn: m.attn,
        ffn: m.ffn,
        ffn_layout: m.ffn_layout,
        boundary: m.boundary,
        memory_per_chip: 0.0,
        per_link_traffic: LinkTraffic {
            intra_server: 0.0,
            inter_server: 0.0,
        },
    };
    plan.memory_per_chip = memory_per_chip(&spec, &plan)?;
    plan.per_link_traffic = link_traffic(&spec, &plan, server.chips_total, Topology::Ring)?;
    if plan.memory_per_chip > server.chiplet.sram_bytes() {
        report.reasons.push("SRAM_CAPACITY".into());
    }
    let point = evaluate_plan(&spec, &server, &plan, cfg, &hash)?;
    report.feasible = report.reasons.is_empty();
    report.server = Some(server);
    report.plan = Some(plan);
    report.perf = Some(point.perf);
    report.cost = Some(point.cost);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Figure {
    Frontier,
    BatchSweep,
    PSweep,
    NreBreakeven,
    Sparsity,
}

impl Figure {
    pub const ALL: [Figure; 5] = [
        Figure::Frontier,
        Figure::BatchSweep,
        Figure::PSweep,
        Figure::NreBreakeven,
        Figure::Sparsity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Frontier => "frontier",
            Figure::BatchSweep => "batch_sweep",
            Figure::PSweep => "p_sweep",
            Figure::NreBreakeven => "nre_breakeven",
            Figure::Sparsity => "sparsity",
        }
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFigure(s.to_string()))
    }
}

fn load_run(dir: &Path) -> Result<(RunConfig, Vec<DesignRow>)> {
    let manifest = read_json(&dir.join("manifest.json"))?;
    let cfg = RunConfig::from_value(manifest.get("config").cloned().unwrap_or(Value::Null))?;
    let rows: Vec<DesignRow> = read_csv(&dir.join("designpoints.csv"))?;
    if rows.is_empty() {
        return Err(Error::NoFeasiblePoint(format!("{} has no design points", dir.display())));
    }
    Ok((cfg, rows))
}

fn best_rows_by<K: Ord + Clone>(rows: &[DesignRow], key: impl Fn(&DesignRow) -> K) -> BTreeMap<K, &DesignRow> {
    let mut out: BTreeMap<K, &DesignRow> = BTreeMap::new();
    for r in rows {
        out.entry(key(r))
            .and_modify(|cur| {
                if r.tco_per_mtok < cur.tco_per_mtok {
                    *cur = r;
                }
            })
            .or_insert(r);
    }
    out
}

/// Rebuilds the server a row was measured on.
pub fn server_of(row: &DesignRow, silicon: &SiliconConstants, cfg: &RunConfig) -> Result<ServerDesign> {
    let chip = size_chiplet(row.sram_mb, row.tflops, row.bandwidth, silicon)
        .map_err(|r| Error::Config(format!("row chiplet no longer feasible: {:?}", r.reasons)))?;
    Ok(assemble_server(&chip, row.chips_per_lane, &cfg.server))
}

/// Best TCO/Token for each pipeline depth on a fixed server and scenario.
pub fn p_sweep(spec: &ModelSpec, server: &ServerDesign, scenario: Scenario, cfg: &RunConfig) -> Result<Vec<DesignPoint>> {
    let hash = cfg.hash();
    let (plans, _) = candidate_plans(spec, server, scenario, cfg)?;
    let mut best: BTreeMap<u64, DesignPoint> = BTreeMap::new();
    for plan in &plans {
        let point = evaluate_plan(spec, server, plan, cfg, &hash)?;
        match best.get(&plan.p) {
            Some(cur) if !cfg.objective.compare(&point, cur).is_lt() => {}
            _ => {
                best.insert(plan.p, point);
            }
        }
    }
    Ok(best.into_values().collect())
}

pub fn plot_rows(dir: &Path, figure: Figure) -> Result<Vec<PlotRow>> {
    let (cfg, rows) = load_run(dir)?;
    let label_of = |r: &DesignRow| format!("t={} p={} N={} mbs={}", r.t, r.p, r.batch, r.micro_batch_size);
    let mut out = Vec::new();
    match figure {
        Figure::Frontier => {
            let front: Vec<DesignRow> = read_csv(&dir.join("frontier.csv"))?;
            out.extend(front.iter().map(|r| PlotRow {
                series: r.model.clone(),
                x: r.throughput,
                y: r.tco_per_mtok,
                label: label_of(r),
            }));
        }
        Figure::BatchSweep => {
            for ((model, batch), r) in best_rows_by(&rows, |r| (r.model.clone(), r.batch)) {
                out.push(PlotRow {
                    series: model,
                    x: batch as f64,
                    y: r.tco_per_mtok,
                    label: format!("{} mm^2, {}", r.die_area, label_of(r)),
                });
            }
        }
        Figure::Sparsity => {
            for ((model, s), r) in best_rows_by(&rows, |r| (r.model.clone(), (r.sparsity * 1e4).round() as i64)) {
                out.push(PlotRow {
                    series: model,
                    x: s as f64 / 1e4,
                    y: r.tco_per_mtok,
                    label: label_of(r),
                });
            }
            for pct in (0..=95).step_by(5) {
                let s = pct as f64 / 100.0;
                out.push(PlotRow {
                    series: "capacity_multiplier".into(),
                    x: s,
                    y: 1.0 / footprint_ratio_at_density(1.0 - s, TileShape::default()),
                    label: String::new(),
                });
            }
        }
        Figure::NreBreakeven => {
            for q in 1..=12 {
                let h = q as f64 * 0.25;
                if let Ok(f) = nre_breakeven(cfg.cost.baseline_spend_per_year, cfg.cost.nre, h) {
                    out.push(PlotRow {
                        series: "required_improvement".into(),
                        x: h,
                        y: f,
                        label: format!("horizon {h} yr"),
                    });
                }
            }
            let specs = cfg.model_specs()?;
            for (model, r) in best_rows_by(&rows, |r| r.model.clone()) {
                let spec = specs.iter().find(|s| s.name == model).cloned();
                let Some(spec) = spec else { continue };
                let point = row_point(&spec, r, &cfg)?;
                for e in 0..=10 {
                    let tokens = 10f64.powf(10.0 + e as f64 * 0.6);
                    out.push(PlotRow {
                        series: format!("{model}_amortized"),
                        x: tokens,
                        y: amortized_cost_per_token(&point, cfg.cost.nre, tokens)? * 1e6,
                        label: "usd_per_mtok".into(),
                    });
                }
            }
        }
        Figure::PSweep => {
            let specs = cfg.model_specs()?;
            for (model, r) in best_rows_by(&rows, |r| r.model.clone()) {
                let Some(spec) = specs.iter().find(|s| s.name == model) else { continue };
                let server = server_of(r, &cfg.silicon, &cfg)?;
                let sc = Scenario {
                    batch: r.batch,
                    context: r.context,
                    sparsity: r.sparsity,
                };
                for p in p_sweep(spec, &server, sc, &cfg)? {
                    out.push(PlotRow {
                        series: model.clone(),
                        x: p.plan.p as f64,
                        y: p.cost.tco_per_mtok,
                        label: format!("t={} n={}", p.plan.t, p.plan.micro_batches),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Re-simulates a stored row into a full design point.
pub fn row_point(spec: &ModelSpec, r: &DesignRow, cfg: &RunConfig) -> Result<DesignPoint> {
    let server = server_of(r, &cfg.silicon, cfg)?;
    let req = EvalRequest {
        model: ModelRef::Inline(spec.clone()),
        chiplet: ChipletSpec {
            sram_mb: r.sram_mb,
            tflops: r.tflops,
            bandwidth: r.bandwidth,
        },
        chips_per_lane: r.chips_per_lane,
        mapping: MappingSpec {
            t: r.t,
            p: r.p,
            batch: r.batch,
            micro_batch_size: r.micro_batch_size,
            context: r.context,
            sparsity: r.sparsity,
            attn: r.attn.parse()?,
            ffn: r.ffn.parse()?,
            ffn_layout: r.ffn_layout,
            boundary: serde_json::from_value(Value::String(r.boundary.clone()))
                .map_err(|e| Error::Config(e.to_string()))?,
            granularity: serde_json::from_value(Value::String(r.granularity.clone()))
                .map_err(|e| Error::Config(e.to_string()))?,
        },
    };
    let rep = cmd_evaluate(cfg, &EvalInput::Design(req))?;
    let (Some(plan), Some(perf), Some(cost)) = (rep.plan, rep.perf, rep.cost) else {
        return Err(Error::Config("stored design point could not be re-evaluated".into()));
    };
    Ok(DesignPoint {
        model: spec.name.clone(),
        n_servers: plan.n_servers,
        server,
        plan,
        perf,
        cost,
        config_hash: rep.config_hash,
    })
}

/// Writes `<figure>.csv` into the run directory and returns its path.
pub fn cmd_plotdata(dir: &Path, figure: Figure) -> Result<PathBuf> {
    let rows = plot_rows(dir, figure)?;
    let path = dir.join(format!("{}.csv", figure.name()));
    write_file(&path, &csv_bytes_with_header(&rows, PLOT_COLUMNS)?)?;
    Ok(path)
}

/// Published chiplet design points used to fit the SRAM area constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceChip {
    pub model: &'static str,
    pub die_area: f64,
    pub sram_mb: f64,
    pub tflops: f64,
}

pub const REFERENCE_CHIPS: [ReferenceChip; 8] = [
    ReferenceChip { model: "GPT-2", die_area: 60.0, sram_mb: 32.8, tflops: 5.60 },
    ReferenceChip { model: "Megatron", die_area: 40.0, sram_mb: 27.0, tflops: 2.87 },
    ReferenceChip { model: "GPT-3", die_area: 140.0, sram_mb: 225.8, tflops: 5.50 },
    ReferenceChip { model: "Gopher", die_area: 100.0, sram_mb: 151.0, tflops: 4.83 },
    ReferenceChip { model: "MT-NLG", die_area: 160.0, sram_mb: 198.0, tflops: 6.32 },
    ReferenceChip { model: "BLOOM", die_area: 120.0, sram_mb: 137.5, tflops: 7.02 },
    ReferenceChip { model: "PaLM", die_area: 100.0, sram_mb: 95.0, tflops: 12.07 },
    ReferenceChip { model: "Llama-2", die_area: 80.0, sram_mb: 82.5, tflops: 7.62 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// mm² per MB of SRAM including the crossbar.
    pub mem_area_per_mb: f64,
    /// Implied MB/mm² with the configured crossbar overhead.
    pub mem_density: f64,
    pub aux_area: f64,
    pub rmse: f64,
    pub residuals: Vec<(String, f64, f64)>,
}

/// Least-squares fit of `die_area − compute_density·tflops = k·sram + aux`.
pub fn fit_constants(chips: &[ReferenceChip], base: &SiliconConstants) -> Result<FitResult> {
    if chips.len() < 2 {
        return Err(Error::Config("need at least two reference chips".into()));
    }
    let n = chips.len() as f64;
    let xs: Vec<f64> = chips.iter().map(|c| c.sram_mb).collect();
    let ys: Vec<f64> = chips.iter().map(|c| c.die_area - base.compute_density * c.tflops).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Config("reference chips need distinct SRAM sizes".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let k = sxy / sxx;
    let aux = my - k * mx;
    let residuals: Vec<(String, f64, f64)> = chips
        .iter()
        .map(|c| {
            let fitted = k * c.sram_mb + base.compute_density * c.tflops + aux;
            (c.model.to_string(), c.die_area, fitted)
        })
        .collect();
    let rmse = (residuals.iter().map(|(_, a, f)| (a - f).powi(2)).sum::<f64>() / n).sqrt();
    Ok(FitResult {
        mem_area_per_mb: k,
        mem_density: (1.0 + base.crossbar_overhead) / k,
        aux_area: aux,
        rmse,
        residuals,
    })
}
