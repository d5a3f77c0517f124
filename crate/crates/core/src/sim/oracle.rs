//! Brute-force searches over the simulator: per-phase optimal configs and
//! one-knob static sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::{SimCostModel, SimError, SimState, SimWorkload};
use crate::space::{ParamConfig, ParamSpace};

/// Exhaustive search refuses spaces with more joint configs than this.
pub const MAX_ORACLE_CONFIGS: u128 = 10_000;

/// Everything needed to instantiate a simulation.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub workload: SimWorkload,
    pub space: ParamSpace,
    pub cost: SimCostModel,
    pub fast_capacity: u32,
}

impl SimSetup {
    pub fn new(workload: SimWorkload, space: ParamSpace, cost: SimCostModel) -> Self {
        let fast_capacity = workload.fast_capacity;
        Self {
            workload,
            space,
            cost,
            fast_capacity,
        }
    }

    pub fn fresh_state(&self) -> Result<SimState, SimError> {
        self.cost.validate()?;
        SimState::new(&self.workload, self.fast_capacity)
    }

    /// Mean IPC of `steps` intervals from `state` under a fixed config.
    pub fn run_static(
        &self,
        state: &mut SimState,
        cfg: &ParamConfig,
        steps: u32,
    ) -> Result<f64, SimError> {
        let mut total = 0.0;
        for _ in 0..steps {
            total += state.step(&self.workload, &self.space, cfg, &self.cost)?.ipc;
        }
        Ok(total / steps.max(1) as f64)
    }
}

/// State right before `phase_index` begins, reached by running every earlier
/// phase under the default config.
pub fn phase_start_state(setup: &SimSetup, phase_index: usize) -> Result<SimState, SimError> {
    let phases = &setup.workload.phases;
    if phase_index >= phases.len() {
        return Err(SimError::PhaseOutOfRange {
            index: phase_index,
            phases: phases.len(),
        });
    }
    let mut state = setup.fresh_state()?;
    let warm: u32 = phases[..phase_index].iter().map(|p| p.duration).sum();
    setup.run_static(&mut state, &setup.space.default_config(), warm)?;
    Ok(state)
}

/// Best static config for one phase and its mean IPC over the phase.
///
/// Every config starts from the same [`phase_start_state`]; ties go to the
/// lexicographically smallest config.
pub fn oracle_best_config(
    setup: &SimSetup,
    phase_index: usize,
) -> Result<(ParamConfig, f64), SimError> {
    let card = setup.space.cardinality();
    if card > MAX_ORACLE_CONFIGS {
        return Err(SimError::SpaceTooLarge(card));
    }
    let start = phase_start_state(setup, phase_index)?;
    let duration = setup.workload.phases[phase_index].duration;
    let configs = setup.space.enumerate();
    let scores: Vec<f64> = configs
        .par_iter()
        .map(|cfg| {
            let mut st = start.clone();
            setup.run_static(&mut st, cfg, duration)
        })
        .collect::<Result<_, _>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((configs[best].clone(), scores[best]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub phase: usize,
    pub phase_name: String,
    pub duration: u32,
    pub config: ParamConfig,
    pub ipc: f64,
}

pub fn oracle_table(setup: &SimSetup) -> Result<Vec<OracleRow>, SimError> {
    (0..setup.workload.phases.len())
        .map(|i| {
            let (config, ipc) = oracle_best_config(setup, i)?;
            let p = &setup.workload.phases[i];
            Ok(OracleRow {
                phase: i,
                phase_name: p.name.clone(),
                duration: p.duration,
                config,
                ipc,
            })
        })
        .collect()
}

/// CSV with columns `phase, <one per parameter>, ipc`.
pub fn write_oracle_csv(
    space: &ParamSpace,
    rows: &[OracleRow],
    w: impl Write,
) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["phase".to_string()];
    header.extend(space.specs.iter().map(|s| s.name.clone()));
    header.push("ipc".to_string());
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.phase.to_string()];
        rec.extend(r.config.values.iter().map(|v| v.to_string()));
        rec.push(format!("{:.6}", r.ipc));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: i64,
    pub ipc: f64,
    pub speedup: f64,
}

/// Static sensitivity sweep of one knob: one full pass per candidate value
/// with every other knob at its default, normalized by the default run.
pub fn param_sweep(setup: &SimSetup, spec_name: &str) -> Result<Vec<SweepRow>, SimError> {
    let dim = setup.space.position(spec_name)?;
    let spec = &setup.space.specs[dim];
    let steps = setup.workload.pass_len();
    let mean_ipc = |value: i64| -> Result<f64, SimError> {
        let mut cfg = setup.space.default_config();
        cfg.values[dim] = value;
        let mut st = setup.fresh_state()?;
        setup.run_static(&mut st, &cfg, steps)
    };
    let base = mean_ipc(spec.default)?;
    spec.candidates
        .iter()
        .map(|&value| {
            let ipc = mean_ipc(value)?;
            Ok(SweepRow {
                value,
                ipc,
                speedup: ipc / base,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl Write) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["value", "ipc", "speedup"])?;
    for r in rows {
        out.write_record([
            r.value.to_string(),
            format!("{:.6}", r.ipc),
            format!("{:.6}", r.speedup),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Whitespace-separated columns with a `#` header, ready for gnuplot.
pub fn write_sweep_dat(param: &str, rows: &[SweepRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "# {param} ipc speedup")?;
    for r in rows {
        writeln!(w, "{} {:.6} {:.6}", r.value, r.ipc, r.speedup)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_scenario, sim_space};
    use crate::space::ParamSpec;

    fn setup(name: &str) -> SimSetup {
        SimSetup::new(
            make_scenario(name, 1).unwrap(),
            sim_space(),
            SimCostModel::default(),
        )
    }

    fn single(scans: Vec<i64>) -> ParamSpace {
        let d = scans[0];
        ParamSpace::new(
            "sim",
            vec![
                ParamSpec::new("scan_size_mb", scans, d).unwrap(),
                ParamSpec::new("hot_threshold", vec![2], 2).unwrap(),
                ParamSpec::new("watermark_scale_factor", vec![10], 10).unwrap(),
                ParamSpec::new("demote_scale_factor", vec![200], 200).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_candidate_space() {
        let mut s = setup("stable-hot");
        s.space = single(vec![1024]);
        let (cfg, _) = oracle_best_config(&s, 0).unwrap();
        assert_eq!(cfg, s.space.default_config());
        let rows = param_sweep(&s, "scan_size_mb").unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].speedup, 1.0);
    }

    #[test]
    fn free_profiling_prefers_widest_scan_when_hot_set_fits() {
        let mut s = setup("stable-hot");
        s.space = single(vec![256, 1024, 2048, 4096]);
        s.cost.profiling_cost = 0.0;
        let (cfg, _) = oracle_best_config(&s, 0).unwrap();
        assert_eq!(cfg.values[0], 4096);
    }

    #[test]
    fn refuses_huge_spaces() {
        let mut s = setup("stable-hot");
        let specs = (0..5)
            .map(|i| ParamSpec::new(&format!("k{i}"), (0..7).collect(), 0).unwrap())
            .collect();
        s.space = ParamSpace::new("sim", specs).unwrap();
        assert!(matches!(
            oracle_best_config(&s, 0),
            Err(SimError::SpaceTooLarge(16807))
        ));
    }

    #[test]
    fn inert_knob_sweep_is_flat() {
        let mut s = setup("stable-hot");
        s.cost.migration_cost = 0.0;
        s.fast_capacity = s.workload.page_count() * 2;
        for row in param_sweep(&s, "demote_scale_factor").unwrap() {
            assert!((row.speedup - 1.0).abs() < 1e-3, "{row:?}");
        }
    }

    #[test]
    fn unknown_param_rejected() {
        assert!(param_sweep(&setup("stable-hot"), "nope").is_err());
        assert!(phase_start_state(&setup("stable-hot"), 3).is_err());
    }
}
