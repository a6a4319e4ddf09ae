//! Single-chiplet model: area decomposition, power, bandwidth ceiling,
//! dies per wafer, yield and unit die cost.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sweep::Axis;

/// Largest die a lithography reticle can expose, mm².
pub const RETICLE_LIMIT_MM2: f64 = 858.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiliconConstants {
    /// mm² per dense TFLOPS.
    pub compute_density: f64,
    /// W per TFLOPS.
    pub power_per_tflops: f64,
    /// W/mm² ceiling.
    pub max_power_density: f64,
    /// SRAM MB per mm² before crossbar overhead.
    pub mem_density: f64,
    /// Fractional area added to the SRAM arrays for the bank crossbar.
    pub crossbar_overhead: f64,
    /// GB/s delivered by one SRAM bank.
    pub mem_bw_per_bank: f64,
    /// MB per SRAM bank.
    pub bank_size: f64,
    /// IO, controller and clocking area, mm².
    pub aux_area: f64,
    /// GB/s per chip-to-chip link.
    pub io_link_bw: f64,
    pub io_links: u32,
    pub min_die_area: f64,
    pub max_die_area: f64,
    pub wafer_diameter: f64,
    pub wafer_cost: f64,
    /// Defects per cm².
    pub defect_density: f64,
    pub cluster_alpha: f64,
    pub test_cost: f64,
}

impl Default for SiliconConstants {
    fn default() -> Self {
        SiliconConstants {
            compute_density: 2.65,
            power_per_tflops: 1.3,
            max_power_density: 1.0,
            mem_density: 2.0,
            crossbar_overhead: 0.05,
            mem_bw_per_bank: 128.0,
            bank_size: 1.0,
            aux_area: 10.0,
            io_link_bw: 25.0,
            io_links: 4,
            min_die_area: 20.0,
            max_die_area: 800.0,
            wafer_diameter: 300.0,
            wafer_cost: 10_000.0,
            defect_density: 0.1,
            cluster_alpha: 3.0,
            test_cost: 0.0,
        }
    }
}

impl SiliconConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("compute_density", self.compute_density),
            ("power_per_tflops", self.power_per_tflops),
            ("max_power_density", self.max_power_density),
            ("mem_density", self.mem_density),
            ("mem_bw_per_bank", self.mem_bw_per_bank),
            ("bank_size", self.bank_size),
            ("io_link_bw", self.io_link_bw),
            ("max_die_area", self.max_die_area),
            ("wafer_diameter", self.wafer_diameter),
            ("wafer_cost", self.wafer_cost),
            ("cluster_alpha", self.cluster_alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConstants(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("crossbar_overhead", self.crossbar_overhead),
            ("aux_area", self.aux_area),
            ("min_die_area", self.min_die_area),
            ("defect_density", self.defect_density),
            ("test_cost", self.test_cost),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConstants(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.max_die_area > RETICLE_LIMIT_MM2 || self.min_die_area > self.max_die_area {
            return Err(Error::InvalidConstants(format!(
                "die area range [{}, {}] must lie within the {RETICLE_LIMIT_MM2} mm^2 reticle",
                self.min_die_area, self.max_die_area
            )));
        }
        Ok(())
    }

    /// SRAM area per MB including the crossbar, mm²/MB.
    pub fn mem_area_per_mb(&self) -> f64 {
        (1.0 + self.crossbar_overhead) / self.mem_density
    }
}

/// Dies fully patterned on a circular wafer of square `√A × √A` dies.
pub fn dies_per_wafer(die_area: f64, wafer_diameter: f64) -> Result<u64> {
    if !(die_area > 0.0) {
        return Err(Error::NonPositiveArea(die_area));
    }
    let r = wafer_diameter / 2.0;
    let n = PI * r * r / die_area - PI * wafer_diameter / (2.0 * die_area).sqrt();
    Ok(n.max(0.0).floor() as u64)
}

/// Negative-binomial yield; `area_mm2` is converted to cm² for `d0`.
pub fn die_yield(area_mm2: f64, d0: f64, alpha: f64) -> f64 {
    let area_cm2 = area_mm2 / 100.0;
    (1.0 + area_cm2 * d0 / alpha).powf(-alpha)
}

/// Cost of one good die: `(wafer/DPW + test) / yield`.
pub fn die_cost(area: f64, c: &SiliconConstants) -> Result<f64> {
    if area > RETICLE_LIMIT_MM2 {
        return Err(Error::ReticleExceeded {
            area,
            limit: RETICLE_LIMIT_MM2,
        });
    }
    let dpw = dies_per_wafer(area, c.wafer_diameter)?;
    if dpw == 0 {
        return Err(Error::InvalidConstants(format!(
            "a {area} mm^2 die does not fit on a {} mm wafer",
            c.wafer_diameter
        )));
    }
    let y = die_yield(area, c.defect_density, c.cluster_alpha);
    Ok((c.wafer_cost / dpw as f64 + c.test_cost) / y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaBreakdown {
    pub mem: f64,
    pub compute: f64,
    pub aux: f64,
}

impl AreaBreakdown {
    pub fn total(&self) -> f64 {
        self.mem + self.compute + self.aux
    }
}

pub fn chiplet_area(sram_mb: f64, tflops: f64, c: &SiliconConstants) -> AreaBreakdown {
    AreaBreakdown {
        mem: sram_mb * c.mem_area_per_mb(),
        compute: tflops * c.compute_density,
        aux: c.aux_area,
    }
}

/// One feasible chiplet candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipletDesign {
    pub sram_mb: f64,
    pub tflops: f64,
    /// On-chip SRAM bandwidth, GB/s.
    pub bandwidth: f64,
    pub die_area: f64,
    pub area: AreaBreakdown,
    pub tdp: f64,
    pub die_cost: f64,
    pub die_yield: f64,
    pub dies_per_wafer: u64,
    /// Aggregate chip-to-chip IO bandwidth, GB/s.
    pub io_bw: f64,
}

impl ChipletDesign {
    pub fn sram_bytes(&self) -> f64 {
        self.sram_mb * 1e6
    }

    pub fn flops_per_s(&self) -> f64 {
        self.tflops * 1e12
    }

    pub fn bytes_per_s(&self) -> f64 {
        self.bandwidth * 1e9
    }

    /// Operational intensity at which compute and memory time are equal.
    pub fn ridge_point(&self) -> f64 {
        self.flops_per_s() / self.bytes_per_s()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChipletReason {
    /// Die area outside the allowed range or above the reticle.
    DieArea,
    PowerDensity,
    /// Requested bandwidth exceeds what the SRAM banks can deliver.
    Bandwidth,
    /// Non-positive compute or bandwidth request.
    EmptyCapability,
}

impl ChipletReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ChipletReason::DieArea => "DIE_AREA",
            ChipletReason::PowerDensity => "POWER_DENSITY",
            ChipletReason::Bandwidth => "BANDWIDTH",
            ChipletReason::EmptyCapability => "EMPTY_CAPABILITY",
        }
    }
}

impl fmt::Display for ChipletReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipletRejection {
    pub sram_mb: f64,
    pub tflops: f64,
    pub bandwidth: f64,
    pub die_area: f64,
    pub reasons: Vec<ChipletReason>,
}

/// Maximum bandwidth the banks of an `sram_mb` array can deliver, GB/s.
pub fn bank_bandwidth(sram_mb: f64, c: &SiliconConstants) -> f64 {
    (sram_mb / c.bank_size).ceil() * c.mem_bw_per_bank
}

pub fn size_chiplet(
    sram_mb: f64,
    tflops: f64,
    bandwidth: f64,
    c: &SiliconConstants,
) -> std::result::Result<ChipletDesign, ChipletRejection> {
    let area = chiplet_area(sram_mb, tflops, c);
    let die_area = area.total();
    let tdp = tflops * c.power_per_tflops;

    let mut reasons = Vec::new();
    if !(tflops > 0.0) || !(bandwidth > 0.0) || !(sram_mb > 0.0) {
        reasons.push(ChipletReason::EmptyCapability);
    }
    if die_area < c.min_die_area || die_area > c.max_die_area || die_area > RETICLE_LIMIT_MM2 {
        reasons.push(ChipletReason::DieArea);
    }
    if tdp / die_area > c.max_power_density {
        reasons.push(ChipletReason::PowerDensity);
    }
    if bandwidth > bank_bandwidth(sram_mb, c) {
        reasons.push(ChipletReason::Bandwidth);
    }
    let reject = |reasons| ChipletRejection {
        sram_mb,
        tflops,
        bandwidth,
        die_area,
        reasons,
    };
    if !reasons.is_empty() {
        return Err(reject(reasons));
    }
    let cost = match die_cost(die_area, c) {
        Ok(v) => v,
        Err(_) => return Err(reject(vec![ChipletReason::DieArea])),
    };
    Ok(ChipletDesign {
        sram_mb,
        tflops,
        bandwidth,
        die_area,
        area,
        tdp,
        die_cost: cost,
        die_yield: die_yield(die_area, c.defect_density, c.cluster_alpha),
        // die_cost succeeded, so the area is positive
        dies_per_wafer: dies_per_wafer(die_area, c.wafer_diameter).unwrap_or(0),
        io_bw: c.io_link_bw * c.io_links as f64,
    })
}

/// Phase-1 chiplet sweep axes. SRAM in MB, compute in TFLOPS, bandwidth in GB/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipletSweep {
    pub sram_mb: Axis,
    pub tflops: Axis,
    pub bandwidth: Axis,
}

impl Default for ChipletSweep {
    fn default() -> Self {
        ChipletSweep {
            sram_mb: Axis::Geometric {
                min: 8.0,
                max: 512.0,
                steps: 25,
            },
            tflops: Axis::Geometric {
                min: 1.0,
                max: 16.0,
                steps: 13,
            },
            bandwidth: Axis::Geometric {
                min: 500.0,
                max: 8000.0,
                steps: 9,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChipletEnumeration {
    pub designs: Vec<ChipletDesign>,
    pub rejections: Vec<ChipletRejection>,
}

/// Every grid point in (sram, tflops, bandwidth) order, split into feasible
/// designs and logged rejections.
pub fn enumerate_chiplets(sweep: &ChipletSweep, c: &SiliconConstants) -> Result<ChipletEnumeration> {
    let sram = sweep.sram_mb.values()?;
    let tflops = sweep.tflops.values()?;
    let bw = sweep.bandwidth.values()?;
    let mut out = ChipletEnumeration::default();
    for &s in &sram {
        for &f in &tflops {
            for &b in &bw {
                match size_chiplet(s, f, b, c) {
                    Ok(d) => out.designs.push(d),
                    Err(r) => out.rejections.push(r),
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dpw_reference_points() {
        assert_eq!(dies_per_wafer(140.0, 300.0).unwrap(), 448);
        assert_eq!(dies_per_wafer(750.0, 300.0).unwrap(), 69);
        assert_eq!(dies_per_wafer(150.0, 300.0).unwrap(), 416);
        let wafer = PI * 150.0 * 150.0;
        assert_eq!(dies_per_wafer(wafer, 300.0).unwrap(), 0);
        assert!(matches!(dies_per_wafer(0.0, 300.0), Err(Error::NonPositiveArea(_))));
        assert!(dies_per_wafer(-3.0, 300.0).is_err());
    }

    /// Counts whole √A squares on a grid offset to the wafer center, trying a
    /// few grid phases and keeping the best.
    fn packed_dies(area: f64, diameter: f64) -> u64 {
        let s = area.sqrt();
        let r = diameter / 2.0;
        let n = (diameter / s).ceil() as i64 + 2;
        let mut best = 0;
        for phase in [0.0, 0.25, 0.5, 0.75] {
            for phase_y in [0.0, 0.5] {
                let mut count = 0;
                for i in -n..n {
                    for j in -n..n {
                        let x0 = (i as f64 + phase) * s;
                        let y0 = (j as f64 + phase_y) * s;
                        let corners = [(x0, y0), (x0 + s, y0), (x0, y0 + s), (x0 + s, y0 + s)];
                        if corners.iter().all(|(x, y)| x * x + y * y <= r * r) {
                            count += 1;
                        }
                    }
                }
                best = best.max(count);
            }
        }
        best
    }

    #[test]
    fn dpw_close_to_grid_packing() {
        let formula = dies_per_wafer(140.0, 300.0).unwrap() as f64;
        let packed = packed_dies(140.0, 300.0) as f64;
        assert!((formula / packed - 1.0).abs() < 0.05, "{formula} vs {packed}");
    }

    #[test]
    fn yield_reference_points() {
        assert_eq!(die_yield(140.0, 0.0, 3.0), 1.0);
        assert!((die_yield(140.0, 0.1, 3.0) - 0.8722).abs() < 5e-4);
        let poisson = (-1.4f64 * 0.1).exp();
        assert!((die_yield(140.0, 0.1, 1e6) - poisson).abs() < 1e-4);
        assert!((poisson - 0.8694).abs() < 1e-4);
    }

    #[test]
    fn die_cost_reference() {
        let c = SiliconConstants::default();
        let cost = die_cost(140.0, &c).unwrap();
        let y = (1.0 + 1.4 * 0.1 / 3.0f64).powi(-3);
        let oracle = (10_000.0 / 448.0) / y;
        assert!((cost - oracle).abs() < 1e-9);
        assert!((cost - 25.6).abs() < 0.5, "{cost}");
        assert!(matches!(die_cost(900.0, &c), Err(Error::ReticleExceeded { .. })));
    }

    #[test]
    fn die_cost_single_die_wafer() {
        // a 70 mm wafer fits exactly one 400 mm^2 die under the formula
        let c = SiliconConstants {
            wafer_diameter: 70.0,
            defect_density: 0.0,
            ..Default::default()
        };
        assert_eq!(dies_per_wafer(400.0, 70.0).unwrap(), 1);
        assert_eq!(die_cost(400.0, &c).unwrap(), c.wafer_cost);
    }

    #[test]
    fn cost_ratio_750_vs_150() {
        let c = SiliconConstants::default();
        let per = |a: f64| die_cost(a, &c).unwrap() / a;
        let ratio = per(750.0) / per(150.0);
        assert!((1.7..=2.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn gpt3_chiplet_area() {
        let c = SiliconConstants::default();
        let d = size_chiplet(225.8, 5.5, 2750.0, &c).unwrap();
        assert!((d.die_area / 140.0 - 1.0).abs() < 0.15, "{}", d.die_area);
        assert!((d.area.total() - d.die_area).abs() < 1e-9);
        assert!((d.tdp - 7.15).abs() < 1e-9);
    }

    #[test]
    fn empty_chip_is_aux_only() {
        let c = SiliconConstants::default();
        assert_eq!(chiplet_area(0.0, 0.0, &c).total(), c.aux_area);
    }

    #[test]
    fn power_density_rejected() {
        // defaults burn 1.3 / 2.65 W per compute mm^2, so a denser compute
        // fabric is needed to cross 1 W/mm^2
        let c = SiliconConstants {
            compute_density: 1.0,
            ..Default::default()
        };
        let r = size_chiplet(1.0, 100.0, 100.0, &c).unwrap_err();
        assert_eq!(r.reasons, vec![ChipletReason::PowerDensity]);
    }

    #[test]
    fn oversized_and_bandwidth_rejected() {
        let c = SiliconConstants::default();
        let big = size_chiplet(2000.0, 5.0, 1000.0, &c).unwrap_err();
        assert_eq!(big.reasons, vec![ChipletReason::DieArea]);
        let bw = size_chiplet(10.0, 5.0, 10.0 * 128.0 + 1.0, &c).unwrap_err();
        assert_eq!(bw.reasons, vec![ChipletReason::Bandwidth]);
    }

    #[test]
    fn enumeration_counts() {
        let c = SiliconConstants::default();
        let sweep = ChipletSweep {
            sram_mb: Axis::List(vec![50.0, 100.0, 150.0]),
            tflops: Axis::List(vec![2.0, 4.0, 6.0]),
            bandwidth: Axis::List(vec![1000.0, 2000.0, 3000.0]),
        };
        let e = enumerate_chiplets(&sweep, &c).unwrap();
        assert_eq!(e.designs.len(), 27);
        assert!(e.rejections.is_empty());

        let sweep = ChipletSweep {
            sram_mb: Axis::List(vec![50.0, 1500.0]),
            ..sweep
        };
        let e = enumerate_chiplets(&sweep, &c).unwrap();
        assert_eq!(e.designs.len(), 9);
        assert_eq!(e.rejections.len(), 9);
        assert!(e.rejections.iter().all(|r| r.sram_mb == 1500.0));
    }

    #[test]
    fn empty_sweep_is_an_error() {
        let sweep = ChipletSweep {
            sram_mb: Axis::List(vec![]),
            ..Default::default()
        };
        assert!(matches!(
            enumerate_chiplets(&sweep, &SiliconConstants::default()),
            Err(Error::EmptySweep(_))
        ));
    }

    #[test]
    fn default_sweep_contains_gpt3_chip() {
        let c = SiliconConstants::default();
        let e = enumerate_chiplets(&ChipletSweep::default(), &c).unwrap();
        let near = |v: f64, r: f64| (v / r - 1.0).abs() <= 0.15;
        assert!(e
            .designs
            .iter()
            .any(|d| near(d.die_area, 140.0) && near(d.sram_mb, 225.8) && near(d.tflops, 5.5)));
    }
}
