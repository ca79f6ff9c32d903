use std::io::{self, Write};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based decision step.
    pub step: usize,
    pub clock: u32,
    pub total_queue: u64,
    /// Completed trips so far.
    pub throughput: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripRecord {
    pub vehicle: usize,
    pub flow: usize,
    pub enter_time: u32,
    /// Episode end for vehicles still in the network.
    pub exit_time: u32,
    pub completed: bool,
}

impl TripRecord {
    pub fn travel_time(&self) -> u32 {
        self.exit_time - self.enter_time
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Average travel time in seconds over all spawned vehicles.
    pub att: f64,
    pub throughput: u64,
    pub spawned: u64,
    pub steps: Vec<StepRecord>,
    pub trips: Vec<TripRecord>,
}

impl MetricsRecord {
    pub fn from_trips(trips: Vec<TripRecord>, steps: Vec<StepRecord>) -> Self {
        let total: u64 = trips.iter().map(|t| t.travel_time() as u64).sum();
        let att = if trips.is_empty() { 0.0 } else { total as f64 / trips.len() as f64 };
        Self {
            att,
            throughput: trips.iter().filter(|t| t.completed).count() as u64,
            spawned: trips.len() as u64,
            steps,
            trips,
        }
    }
}

/// `step,total_queue,throughput` per decision step, then a
/// `summary,<att>,<throughput>` row.
pub fn write_step_csv<W: Write>(m: &MetricsRecord, mut out: W) -> io::Result<()> {
    writeln!(out, "step,total_queue,throughput")?;
    for s in &m.steps {
        writeln!(out, "{},{},{}", s.step, s.total_queue, s.throughput)?;
    }
    writeln!(out, "summary,{},{}", m.att, m.throughput)
}

pub fn write_vehicle_csv<W: Write>(m: &MetricsRecord, mut out: W) -> io::Result<()> {
    writeln!(out, "vehicle,flow,enter_time,exit_time,completed")?;
    for t in &m.trips {
        writeln!(out, "{},{},{},{},{}", t.vehicle, t.flow, t.enter_time, t.exit_time, t.completed)?;
    }
    Ok(())
}
