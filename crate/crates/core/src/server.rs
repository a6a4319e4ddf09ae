//! 1U server assembly: lane population under silicon, power and count caps,
//! CapEx breakdown and at-the-wall power.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::money::Cents;
use crate::silicon::ChipletDesign;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConstraints {
    pub lanes: u64,
    /// mm² of silicon per lane.
    pub silicon_per_lane: f64,
    /// W of chip TDP per lane.
    pub power_per_lane: f64,
    pub min_chips_per_lane: u64,
    pub max_chips_per_lane: u64,
    pub psu_efficiency: f64,
    pub dcdc_efficiency: f64,
    pub ethernet_cost: f64,
    pub package_cost_per_chip: f64,
    pub pcb_cost: f64,
    pub psu_cost_per_watt: f64,
    pub heatsink_cost_per_chip: f64,
    pub fan_cost_per_lane: f64,
    pub controller_cost: f64,
    /// W drawn by the control processor and NIC.
    pub controller_power: f64,
    pub fan_power_per_lane: f64,
}

impl Default for ServerConstraints {
    fn default() -> Self {
        ServerConstraints {
            lanes: 8,
            silicon_per_lane: 6000.0,
            power_per_lane: 250.0,
            min_chips_per_lane: 1,
            max_chips_per_lane: 20,
            psu_efficiency: 0.95,
            dcdc_efficiency: 0.95,
            ethernet_cost: 450.0,
            package_cost_per_chip: 20.0,
            pcb_cost: 300.0,
            psu_cost_per_watt: 0.15,
            heatsink_cost_per_chip: 5.0,
            fan_cost_per_lane: 20.0,
            controller_cost: 500.0,
            controller_power: 20.0,
            fan_power_per_lane: 4.0,
        }
    }
}

impl ServerConstraints {
    pub fn validate(&self) -> Result<()> {
        let eff_ok = |e: f64| e > 0.0 && e <= 1.0;
        if !eff_ok(self.psu_efficiency) || !eff_ok(self.dcdc_efficiency) {
            return Err(Error::InvalidConstants("efficiencies must lie in (0, 1]".into()));
        }
        if self.lanes == 0 || !(self.silicon_per_lane > 0.0) || !(self.power_per_lane > 0.0) {
            return Err(Error::InvalidConstants("lane caps must be positive".into()));
        }
        if self.min_chips_per_lane == 0 || self.min_chips_per_lane > self.max_chips_per_lane {
            return Err(Error::InvalidConstants("chips per lane range must be 1 <= min <= max".into()));
        }
        let costs = [
            self.ethernet_cost,
            self.package_cost_per_chip,
            self.pcb_cost,
            self.psu_cost_per_watt,
            self.heatsink_cost_per_chip,
            self.fan_cost_per_lane,
            self.controller_cost,
            self.controller_power,
            self.fan_power_per_lane,
        ];
        if costs.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::InvalidConstants("server costs and overheads must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServerReason {
    SiliconPerLane,
    PowerPerLane,
    Range,
}

impl ServerReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ServerReason::SiliconPerLane => "SILICON_PER_LANE",
            ServerReason::PowerPerLane => "POWER_PER_LANE",
            ServerReason::Range => "RANGE",
        }
    }
}

impl fmt::Display for ServerReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapexBreakdown {
    pub dies: Cents,
    pub packages: Cents,
    pub pcb: Cents,
    pub psu: Cents,
    pub heatsinks: Cents,
    pub fans: Cents,
    pub ethernet: Cents,
    pub controller: Cents,
}

impl CapexBreakdown {
    pub fn items(&self) -> [Cents; 8] {
        [
            self.dies,
            self.packages,
            self.pcb,
            self.psu,
            self.heatsinks,
            self.fans,
            self.ethernet,
            self.controller,
        ]
    }

    pub fn total(&self) -> Cents {
        self.items().into_iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerDesign {
    pub chiplet: ChipletDesign,
    pub chips_per_lane: u64,
    pub chips_total: u64,
    pub capex: CapexBreakdown,
    /// Sum of chip TDPs, W.
    pub tdp_chips: f64,
    /// At-the-wall power including conversion losses and overheads, W.
    pub tdp_wall: f64,
    /// Empty when the server is feasible.
    pub reasons: Vec<ServerReason>,
}

impl ServerDesign {
    pub fn feasible(&self) -> bool {
        self.reasons.is_empty()
    }

    pub fn sram_bytes(&self) -> f64 {
        self.chiplet.sram_bytes() * self.chips_total as f64
    }
}

fn wall_power(chips_total: u64, chip_tdp: f64, c: &ServerConstraints) -> f64 {
    let chips = chips_total as f64 * chip_tdp;
    chips / (c.psu_efficiency * c.dcdc_efficiency) + c.controller_power + c.fan_power_per_lane * c.lanes as f64
}

/// Builds a fully populated server; infeasible designs carry reason codes.
pub fn assemble_server(chiplet: &ChipletDesign, chips_per_lane: u64, c: &ServerConstraints) -> ServerDesign {
    let mut reasons = Vec::new();
    if chips_per_lane < c.min_chips_per_lane || chips_per_lane > c.max_chips_per_lane {
        reasons.push(ServerReason::Range);
    }
    if chips_per_lane as f64 * chiplet.die_area > c.silicon_per_lane {
        reasons.push(ServerReason::SiliconPerLane);
    }
    if chips_per_lane as f64 * chiplet.tdp > c.power_per_lane {
        reasons.push(ServerReason::PowerPerLane);
    }
    let chips_total = chips_per_lane * c.lanes;
    let tdp_chips = chips_total as f64 * chiplet.tdp;
    let tdp_wall = wall_power(chips_total, chiplet.tdp, c);
    let mut design = ServerDesign {
        chiplet: chiplet.clone(),
        chips_per_lane,
        chips_total,
        capex: CapexBreakdown::default(),
        tdp_chips,
        tdp_wall,
        reasons,
    };
    design.capex = server_capex(&design, c);
    design
}

pub fn server_capex(design: &ServerDesign, c: &ServerConstraints) -> CapexBreakdown {
    let n = design.chips_total as i64;
    CapexBreakdown {
        dies: Cents::from_dollars(design.chiplet.die_cost) * n,
        packages: Cents::from_dollars(c.package_cost_per_chip) * n,
        pcb: Cents::from_dollars(c.pcb_cost),
        psu: Cents::from_dollars(c.psu_cost_per_watt * design.tdp_wall),
        heatsinks: Cents::from_dollars(c.heatsink_cost_per_chip) * n,
        fans: Cents::from_dollars(c.fan_cost_per_lane) * c.lanes as i64,
        ethernet: Cents::from_dollars(c.ethernet_cost),
        controller: Cents::from_dollars(c.controller_cost),
    }
}

/// Feasible servers for every chiplet and chips-per-lane count, chiplet-major.
pub fn enumerate_servers<'a>(
    chiplets: impl IntoIterator<Item = &'a ChipletDesign>,
    c: &ServerConstraints,
) -> Vec<ServerDesign> {
    chiplets
        .into_iter()
        .flat_map(|chip| {
            (c.min_chips_per_lane..=c.max_chips_per_lane)
                .map(move |k| assemble_server(chip, k, c))
                .filter(ServerDesign::feasible)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::silicon::{size_chiplet, SiliconConstants};

    fn chip(area: f64, tdp: f64) -> ChipletDesign {
        let mut d = size_chiplet(225.8, 5.5, 2750.0, &SiliconConstants::default()).unwrap();
        d.die_area = area;
        d.tdp = tdp;
        d.die_cost = 25.6;
        d
    }

    #[test]
    fn gpt3_server_feasible() {
        let c = ServerConstraints::default();
        let s = assemble_server(&chip(140.0, 7.15), 17, &c);
        assert!(s.feasible(), "{:?}", s.reasons);
        assert_eq!(s.chips_total, 136);
        assert_eq!(s.capex.dies, Cents(2560 * 136));
        assert_eq!(s.capex.total(), s.capex.items().iter().copied().sum());
        assert!(s.tdp_wall > s.tdp_chips);
    }

    #[test]
    fn lane_caps() {
        let c = ServerConstraints::default();
        let s = assemble_server(&chip(6001.0, 1.0), 1, &c);
        assert_eq!(s.reasons, vec![ServerReason::SiliconPerLane]);
        let s = assemble_server(&chip(100.0, 13.0), 20, &c);
        assert_eq!(s.reasons, vec![ServerReason::PowerPerLane]);
        let s = assemble_server(&chip(100.0, 1.0), 21, &c);
        assert_eq!(s.reasons, vec![ServerReason::Range]);
    }

    #[test]
    fn zero_costs_leave_only_dies() {
        let c = ServerConstraints {
            ethernet_cost: 0.0,
            package_cost_per_chip: 0.0,
            pcb_cost: 0.0,
            psu_cost_per_watt: 0.0,
            heatsink_cost_per_chip: 0.0,
            fan_cost_per_lane: 0.0,
            controller_cost: 0.0,
            ..Default::default()
        };
        let s = assemble_server(&chip(140.0, 7.15), 17, &c);
        assert_eq!(s.capex.total(), Cents(2560) * 136);
    }

    #[test]
    fn doubling_chips_scales_per_chip_items_only() {
        let c = ServerConstraints::default();
        let a = assemble_server(&chip(140.0, 7.15), 5, &c);
        let b = assemble_server(&chip(140.0, 7.15), 10, &c);
        assert_eq!(b.capex.dies, a.capex.dies * 2);
        assert_eq!(b.capex.packages, a.capex.packages * 2);
        assert_eq!(b.capex.heatsinks, a.capex.heatsinks * 2);
        assert_eq!(b.capex.ethernet, a.capex.ethernet);
        assert_eq!(b.capex.controller, a.capex.controller);
        assert_eq!(b.capex.pcb, a.capex.pcb);
    }

    #[test]
    fn enumeration_cardinality() {
        let c = ServerConstraints::default();
        let small = chip(20.0, 1.0);
        assert_eq!(enumerate_servers([&small], &c).len(), 20);
        assert!(enumerate_servers(std::iter::empty(), &c).is_empty());
    }
}
