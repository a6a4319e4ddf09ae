//! Total cost of ownership, cost per generated token, NRE amortization,
//! Pareto fronts and optimal-design selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::MappingPlan;
use crate::perfsim::PerfReport;
use crate::server::ServerDesign;

pub const HOURS_PER_YEAR: f64 = 8760.0;
pub const SECONDS_PER_YEAR: f64 = HOURS_PER_YEAR * 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConstants {
    /// Years.
    pub server_life: f64,
    /// $/kWh.
    pub electricity_price: f64,
    /// $ per provisioned W of datacenter build-out.
    pub datacenter_capex_per_watt: f64,
    /// Years over which the datacenter build-out is amortized.
    pub datacenter_life: f64,
    /// $ per provisioned W per year.
    pub datacenter_opex_per_watt_year: f64,
    pub pue: f64,
    /// $ of one-off engineering cost.
    pub nre: f64,
    /// Fraction of provisioned power drawn at zero utilization.
    pub idle_fraction: f64,
    /// $/year spent on the incumbent deployment, used for NRE break-even.
    pub baseline_spend_per_year: f64,
}

impl Default for CostConstants {
    fn default() -> Self {
        CostConstants {
            server_life: 1.5,
            electricity_price: 0.07,
            datacenter_capex_per_watt: 10.0,
            datacenter_life: 10.0,
            datacenter_opex_per_watt_year: 0.5,
            pue: 1.1,
            nre: 35e6,
            idle_fraction: 0.1,
            baseline_spend_per_year: 255e6,
        }
    }
}

impl CostConstants {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.server_life,
            self.electricity_price,
            self.datacenter_capex_per_watt,
            self.datacenter_opex_per_watt_year,
            self.nre,
            self.idle_fraction,
            self.baseline_spend_per_year,
        ];
        if vals.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConstants("cost constants must be non-negative".into()));
        }
        if !(self.pue >= 1.0) {
            return Err(Error::InvalidConstants("pue must be at least 1".into()));
        }
        if !(self.datacenter_life > 0.0) || self.idle_fraction > 1.0 {
            return Err(Error::InvalidConstants("datacenter_life must be positive and idle_fraction <= 1".into()));
        }
        Ok(())
    }

    pub fn life_seconds(&self) -> f64 {
        self.server_life * SECONDS_PER_YEAR
    }
}

/// Dollar amounts; converted to cents only when written out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub capex: f64,
    pub opex_per_year: f64,
    pub tco: f64,
    pub tco_per_mtok: f64,
    pub capex_share: f64,
}

/// Average draw at `utilization` for a system provisioned at `provisioned_watts`.
pub fn average_power(provisioned_watts: f64, utilization: f64, c: &CostConstants) -> f64 {
    let u = utilization.clamp(0.0, 1.0);
    provisioned_watts * (c.idle_fraction + (1.0 - c.idle_fraction) * u)
}

/// `(capex, opex_per_year, tco)` for hardware bought at `hardware_capex`
/// drawing `avg_power_watts` out of `provisioned_watts`.
pub fn tco(hardware_capex: f64, avg_power_watts: f64, provisioned_watts: f64, c: &CostConstants) -> (f64, f64, f64) {
    let dc_capex = c.datacenter_capex_per_watt * provisioned_watts * (c.server_life / c.datacenter_life);
    let capex = hardware_capex + dc_capex;
    let energy = avg_power_watts * c.pue * HOURS_PER_YEAR / 1000.0 * c.electricity_price;
    let opex = energy + c.datacenter_opex_per_watt_year * provisioned_watts;
    (capex, opex, capex + c.server_life * opex)
}

/// `$` per 10⁶ generated tokens over the server life.
pub fn tco_per_mtok(tco_total: f64, throughput: f64, c: &CostConstants) -> Result<f64> {
    if !(throughput > 0.0) {
        return Err(Error::ZeroThroughput);
    }
    Ok(tco_total / (throughput * c.life_seconds()) * 1e6)
}

pub fn cost_report(
    hardware_capex: f64,
    provisioned_watts: f64,
    utilization: f64,
    throughput: f64,
    c: &CostConstants,
) -> Result<CostReport> {
    let avg = average_power(provisioned_watts, utilization, c);
    let (capex, opex_per_year, total) = tco(hardware_capex, avg, provisioned_watts, c);
    Ok(CostReport {
        capex,
        opex_per_year,
        tco: total,
        tco_per_mtok: tco_per_mtok(total, throughput, c)?,
        capex_share: if total > 0.0 { capex / total } else { 0.0 },
    })
}

/// A conventional accelerator costed as a single purchased device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineAccelerator {
    pub name: String,
    /// Retail $ per device.
    pub price: f64,
    /// W.
    pub tdp: f64,
    pub utilization: f64,
}

impl Default for BaselineAccelerator {
    fn default() -> Self {
        BaselineAccelerator {
            name: "A100".into(),
            price: 19_000.0,
            tdp: 400.0,
            utilization: 0.5,
        }
    }
}

/// Capex share of a purchased device over the server life; throughput is
/// irrelevant to the share so a unit rate is used.
pub fn baseline_cost(b: &BaselineAccelerator, c: &CostConstants) -> Result<CostReport> {
    cost_report(b.price, b.tdp, b.utilization, 1.0, c)
}

/// Factor by which a new design must cut TCO/Token to repay `nre` within
/// `horizon_years` against a baseline spending `baseline_rate` $/year.
pub fn nre_breakeven(baseline_rate: f64, nre: f64, horizon_years: f64) -> Result<f64> {
    let spend = baseline_rate * horizon_years;
    if nre >= spend {
        return Err(Error::BreakEvenImpossible { nre, baseline: spend });
    }
    Ok(spend / (spend - nre))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub model: String,
    pub server: ServerDesign,
    pub n_servers: u64,
    pub plan: MappingPlan,
    pub perf: PerfReport,
    pub cost: CostReport,
    /// Hash of the resolved configuration the point was produced under.
    pub config_hash: String,
}

impl DesignPoint {
    pub fn total_chips(&self) -> u64 {
        self.n_servers * self.server.chips_total
    }

    pub fn provisioned_watts(&self) -> f64 {
        self.n_servers as f64 * self.server.tdp_wall
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::TcoPerMtok => self.cost.tco_per_mtok,
            Metric::Throughput => self.perf.throughput,
            Metric::Tco => self.cost.tco,
            Metric::Latency => self.perf.l_all,
            Metric::TokensPerChip => self.perf.tokens_per_chip,
            Metric::DieArea => self.server.chiplet.die_area,
        }
    }

    /// Deterministic tie-break: smaller die, fewer chips, then plan order.
    pub fn tie_break(&self, other: &DesignPoint) -> Ordering {
        self.server
            .chiplet
            .die_area
            .total_cmp(&other.server.chiplet.die_area)
            .then(self.total_chips().cmp(&other.total_chips()))
            .then(self.plan.sort_key().cmp(&other.plan.sort_key()))
            .then(self.server.chiplet.sram_mb.total_cmp(&other.server.chiplet.sram_mb))
            .then(self.server.chiplet.tflops.total_cmp(&other.server.chiplet.tflops))
            .then(self.server.chiplet.bandwidth.total_cmp(&other.server.chiplet.bandwidth))
            .then(self.plan.context.cmp(&other.plan.context))
            .then(self.plan.sparsity.total_cmp(&other.plan.sparsity))
            .then(self.model.cmp(&other.model))
    }
}

/// NRE spread over `tokens_total` added to the running cost per token.
pub fn amortized_cost_per_token(point: &DesignPoint, nre: f64, tokens_total: f64) -> Result<f64> {
    if !(tokens_total > 0.0) {
        return Err(Error::InvalidConstants("tokens_total must be positive".into()));
    }
    Ok(point.cost.tco_per_mtok / 1e6 + nre / tokens_total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TcoPerMtok,
    Throughput,
    Tco,
    Latency,
    TokensPerChip,
    DieArea,
}

impl Metric {
    pub fn default_direction(self) -> Direction {
        match self {
            Metric::Throughput | Metric::TokensPerChip => Direction::Maximize,
            _ => Direction::Minimize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    fn normalize(self, v: f64) -> f64 {
        match self {
            Direction::Minimize => v,
            Direction::Maximize => -v,
        }
    }
}

/// Indices of the non-dominated points, ordered by the first axis (ties in
/// input order). Identical points are all kept.
pub fn pareto_indices(points: &[(f64, f64)], dirs: [Direction; 2]) -> Vec<usize> {
    let norm: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| (dirs[0].normalize(x), dirs[1].normalize(y)))
        .collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        norm[a]
            .0
            .total_cmp(&norm[b].0)
            .then(norm[a].1.total_cmp(&norm[b].1))
            .then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    let mut best_y = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let x = norm[order[i]].0;
        let mut j = i;
        while j < order.len() && norm[order[j]].0.total_cmp(&x) == Ordering::Equal {
            j += 1;
        }
        // the group is sorted by y, so only its leading minimum can survive
        let y_min = norm[order[i]].1;
        if y_min < best_y {
            keep.extend(
                order[i..j]
                    .iter()
                    .copied()
                    .filter(|&k| norm[k].1.total_cmp(&y_min) == Ordering::Equal),
            );
            best_y = y_min;
        }
        i = j;
    }
    keep.sort_by(|&a, &b| norm[a].0.total_cmp(&norm[b].0).then(a.cmp(&b)));
    keep
}

pub fn pareto_front<'a>(points: &'a [DesignPoint], axes: [Metric; 2], dirs: [Direction; 2]) -> Vec<&'a DesignPoint> {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.metric(axes[0]), p.metric(axes[1]))).collect();
    pareto_indices(&xy, dirs).into_iter().map(|i| &points[i]).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Constraints {
    /// Seconds for prefill plus generation.
    pub max_latency: Option<f64>,
    /// Tokens/s.
    pub min_throughput: Option<f64>,
    /// $.
    pub max_tco: Option<f64>,
}

impl Constraints {
    /// Names of the violated constraints.
    pub fn violations(&self, p: &DesignPoint) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.max_latency.is_some_and(|m| p.perf.l_all > m) {
            v.push("max_latency");
        }
        if self.min_throughput.is_some_and(|m| p.perf.throughput < m) {
            v.push("min_throughput");
        }
        if self.max_tco.is_some_and(|m| p.cost.tco > m) {
            v.push("max_tco");
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    TcoPerToken,
    Throughput,
    Tco,
}

impl Objective {
    fn metric(self) -> Metric {
        match self {
            Objective::TcoPerToken => Metric::TcoPerMtok,
            Objective::Throughput => Metric::Throughput,
            Objective::Tco => Metric::Tco,
        }
    }

    /// Ordering where `Less` is better.
    pub fn compare(self, a: &DesignPoint, b: &DesignPoint) -> Ordering {
        let m = self.metric();
        let dir = m.default_direction();
        dir.normalize(a.metric(m))
            .total_cmp(&dir.normalize(b.metric(m)))
            .then_with(|| a.tie_break(b))
    }
}

pub fn select_optimal<'a>(
    points: &'a [DesignPoint],
    constraints: &Constraints,
    objective: Objective,
) -> Result<&'a DesignPoint> {
    let best = points
        .iter()
        .filter(|p| constraints.violations(p).is_empty())
        .min_by(|a, b| objective.compare(a, b));
    if let Some(p) = best {
        return Ok(p);
    }
    let nearest = points.iter().min_by(|a, b| {
        constraints
            .violations(a)
            .len()
            .cmp(&constraints.violations(b).len())
            .then_with(|| objective.compare(a, b))
    });
    let detail = match nearest {
        None => "no candidate points".to_string(),
        Some(p) => format!(
            "{} candidates; nearest miss {} on {} mm^2 x {} chips violates {}",
            points.len(),
            p.plan.id(),
            p.server.chiplet.die_area,
            p.total_chips(),
            constraints.violations(p).join(", ")
        ),
    };
    Err(Error::NoFeasiblePoint(detail))
}

/// Identity of a chiplet design across sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChipletKey {
    /// Values in 1/10000 units, matching the sweep's rounding.
    pub sram_mb: i64,
    pub tflops: i64,
    pub bandwidth: i64,
}

impl ChipletKey {
    pub fn of(server: &ServerDesign) -> Self {
        let q = |v: f64| (v * 1e4).round() as i64;
        ChipletKey {
            sram_mb: q(server.chiplet.sram_mb),
            tflops: q(server.chiplet.tflops),
            bandwidth: q(server.chiplet.bandwidth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModelChoice {
    pub chiplet: ChipletKey,
    pub die_area: f64,
    /// Geometric mean of the per-model best TCO/Token on the shared chiplet.
    pub geomean: f64,
    pub per_model: BTreeMap<String, DesignPoint>,
    /// Per-model best TCO/Token with a free choice of chiplet.
    pub per_model_optimum: BTreeMap<String, f64>,
    /// Shared-chiplet TCO/Token over the per-model optimum.
    pub overhead: BTreeMap<String, f64>,
    pub mean_overhead: f64,
}

/// Picks the chiplet minimizing the geometric mean of per-model best
/// TCO/Token, re-optimizing server and mapping per model on that chiplet.
pub fn multi_model_objective(per_model: &BTreeMap<String, Vec<DesignPoint>>) -> Result<MultiModelChoice> {
    let obj = Objective::TcoPerToken;
    // model -> chiplet -> best point on that chiplet
    let mut best: BTreeMap<&str, BTreeMap<ChipletKey, &DesignPoint>> = BTreeMap::new();
    for (model, points) in per_model {
        let slot = best.entry(model.as_str()).or_default();
        for p in points {
            slot.entry(ChipletKey::of(&p.server))
                .and_modify(|cur| {
                    if obj.compare(p, cur) == Ordering::Less {
                        *cur = p;
                    }
                })
                .or_insert(p);
        }
    }
    if best.is_empty() || best.values().any(BTreeMap::is_empty) {
        return Err(Error::NoCommonChiplet);
    }
    let mut common: Vec<ChipletKey> = best.values().next().map(|m| m.keys().copied().collect()).unwrap_or_default();
    common.retain(|k| best.values().all(|m| m.contains_key(k)));
    let n = best.len() as f64;
    let scored = common
        .iter()
        .map(|k| {
            let log_sum: f64 = best.values().map(|m| m[k].cost.tco_per_mtok.ln()).sum();
            let area = best.values().next().map(|m| m[k].server.chiplet.die_area).unwrap_or(0.0);
            (*k, (log_sum / n).exp(), area)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .ok_or(Error::NoCommonChiplet)?;
    let (key, geomean, die_area) = scored;
    let mut chosen = BTreeMap::new();
    let mut optimum = BTreeMap::new();
    let mut overhead = BTreeMap::new();
    for (model, m) in &best {
        let shared = m[&key];
        let opt = m
            .values()
            .map(|p| p.cost.tco_per_mtok)
            .fold(f64::INFINITY, f64::min);
        chosen.insert(model.to_string(), shared.clone());
        optimum.insert(model.to_string(), opt);
        overhead.insert(model.to_string(), shared.cost.tco_per_mtok / opt);
    }
    let mean_overhead = overhead.values().sum::<f64>() / n;
    Ok(MultiModelChoice {
        chiplet: key,
        die_area,
        geomean,
        per_model: chosen,
        per_model_optimum: optimum,
        overhead,
        mean_overhead,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_front(points: &[(f64, f64)], dirs: [Direction; 2]) -> Vec<usize> {
        let n: Vec<(f64, f64)> = points
            .iter()
            .map(|&(x, y)| (dirs[0].normalize(x), dirs[1].normalize(y)))
            .collect();
        let mut keep: Vec<usize> = (0..n.len())
            .filter(|&i| {
                !(0..n.len()).any(|j| n[j].0 <= n[i].0 && n[j].1 <= n[i].1 && (n[j].0 < n[i].0 || n[j].1 < n[i].1))
            })
            .collect();
        keep.sort_by(|&a, &b| n[a].0.total_cmp(&n[b].0).then(a.cmp(&b)));
        keep
    }

    #[test]
    fn pareto_small_cases() {
        let dirs = [Direction::Minimize; 2];
        assert_eq!(pareto_indices(&[(1.0, 1.0)], dirs), vec![0]);
        assert_eq!(pareto_indices(&[(1.0, 3.0), (2.0, 2.0), (3.0, 1.0), (3.0, 3.0)], dirs), vec![0, 1, 2]);
        assert_eq!(pareto_indices(&[(1.0, 1.0), (1.0, 1.0)], dirs), vec![0, 1]);
        assert!(pareto_indices(&[], dirs).is_empty());
    }

    #[test]
    fn pareto_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..20 {
            // coarse values force many ties
            let pts: Vec<(f64, f64)> = (0..2000)
                .map(|_| (rng.gen_range(0..60) as f64, rng.gen_range(0..60) as f64))
                .collect();
            let dirs = if case % 2 == 0 {
                [Direction::Minimize, Direction::Maximize]
            } else {
                [Direction::Minimize; 2]
            };
            assert_eq!(pareto_indices(&pts, dirs), brute_front(&pts, dirs));
        }
    }

    proptest! {
        #[test]
        fn frontier_of_frontiers(pts in proptest::collection::vec((0u8..40, 0u8..40), 1..200), split in 0usize..200) {
            let pts: Vec<(f64, f64)> = pts.into_iter().map(|(a, b)| (a as f64, b as f64)).collect();
            let dirs = [Direction::Minimize; 2];
            let k = split.min(pts.len());
            let mut merged: Vec<(f64, f64)> = pareto_indices(&pts[..k], dirs).into_iter().map(|i| pts[i]).collect();
            merged.extend(pareto_indices(&pts[k..], dirs).into_iter().map(|i| pts[k + i]));
            let mut a: Vec<(f64, f64)> = pareto_indices(&merged, dirs).into_iter().map(|i| merged[i]).collect();
            let mut b: Vec<(f64, f64)> = pareto_indices(&pts, dirs).into_iter().map(|i| pts[i]).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn breakeven_monotone(nre in 0.0f64..100e6, h in 1.0f64..3.0) {
            let base = 255e6;
            let f = nre_breakeven(base, nre, h).unwrap();
            prop_assert!(f >= 1.0);
            prop_assert!(nre_breakeven(base, nre + 1e6, h).unwrap() > f);
            prop_assert!(nre_breakeven(base, nre, h + 0.1).unwrap() <= f);
        }
    }

    #[test]
    fn tco_identities() {
        let c = CostConstants::default();
        let r = cost_report(1e6, 5000.0, 0.4, 1e4, &c).unwrap();
        assert_eq!(r.tco, r.capex + c.server_life * r.opex_per_year);
        assert_eq!(r.capex_share, r.capex / r.tco);
        let zero_life = CostConstants {
            server_life: 0.0,
            ..c.clone()
        };
        let (capex, _, total) = tco(1e6, 3000.0, 5000.0, &zero_life);
        assert_eq!(total, capex);
        assert_eq!(capex, 1e6);
        let (capex, opex, total) = tco(1e6, 0.0, 5000.0, &c);
        assert_eq!(opex, 0.5 * 5000.0);
        assert_eq!(total, capex + 1.5 * 2500.0);
    }

    #[test]
    fn tco_by_hand() {
        let c = CostConstants::default();
        let (capex, opex, total) = tco(100_000.0, 2000.0, 4000.0, &c);
        let dc = 10.0 * 4000.0 * 0.15;
        let energy = 2000.0 * 1.1 * 8760.0 * 0.07 / 1000.0;
        assert!((capex - (100_000.0 + dc)).abs() < 1e-9);
        assert!((opex - (energy + 2000.0)).abs() < 1e-9);
        assert!((total - (capex + 1.5 * opex)).abs() < 1e-9);
    }

    #[test]
    fn per_token_proportionality() {
        let c = CostConstants::default();
        let a = tco_per_mtok(1e6, 1000.0, &c).unwrap();
        let b = tco_per_mtok(1e6, 2000.0, &c).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!(matches!(tco_per_mtok(1e6, 0.0, &c), Err(Error::ZeroThroughput)));
    }

    #[test]
    fn baseline_capex_share() {
        let r = baseline_cost(&BaselineAccelerator::default(), &CostConstants::default()).unwrap();
        assert!((r.capex_share - 0.977).abs() <= 0.01, "{}", r.capex_share);
    }

    #[test]
    fn breakeven_examples() {
        assert!((nre_breakeven(255e6, 35e6, 1.0).unwrap() - 255.0 / 220.0).abs() < 1e-12);
        assert!((nre_breakeven(255e6, 35e6, 1.5).unwrap() - 382.5 / 347.5).abs() < 1e-12);
        assert_eq!(nre_breakeven(255e6, 0.0, 1.0).unwrap(), 1.0);
        assert!(matches!(
            nre_breakeven(10e6, 35e6, 1.0),
            Err(Error::BreakEvenImpossible { .. })
        ));
    }
}
