//! Schmidt-gap tracking during sampling, with an optional cut-off that stops
//! the chain once the lowest levels have settled.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lattice::SymmetryMap;
use crate::rdm::{FinalizeOptions, RdmAccumulator};
use crate::spectrum::{compute_spectrum, SpectrumOptions};
use crate::sse::{BoundarySnapshot, SnapshotSink};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub n_samples: u64,
    /// ξ₁ − ξ₀; `None` when the checkpoint could not be diagonalized.
    pub gap: Option<f64>,
    pub xi0: Option<f64>,
    /// Lowest levels with multiplicity, ascending.
    pub lowest: Vec<f64>,
}

/// Stop once the lowest `top_k` levels move by less than `tol` between
/// `patience` consecutive checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    pub top_k: usize,
    pub tol: f64,
    pub patience: usize,
}

#[derive(Debug, Clone)]
pub struct MonitorOptions {
    /// Samples between checkpoints.
    pub period: u64,
    pub finalize: FinalizeOptions,
    pub spectrum: SpectrumOptions,
    /// Levels kept in each `GapPoint::lowest`.
    pub track: usize,
    pub stop: Option<StopRule>,
}

impl MonitorOptions {
    pub fn new(period: u64) -> Self {
        MonitorOptions {
            period,
            finalize: FinalizeOptions {
                element_errors: false,
                ..FinalizeOptions::default()
            },
            spectrum: SpectrumOptions {
                spin_labels: false,
                ..SpectrumOptions::default()
            },
            track: 10,
            stop: None,
        }
    }
}

/// Accumulating sink that finalizes at every checkpoint and records the gap.
#[derive(Debug, Clone)]
pub struct SchmidtGapMonitor {
    pub acc: RdmAccumulator,
    pub series: Vec<GapPoint>,
    sym: SymmetryMap,
    opts: MonitorOptions,
    stable: usize,
    stopped: bool,
}

impl SchmidtGapMonitor {
    pub fn new(acc: RdmAccumulator, sym: SymmetryMap, opts: MonitorOptions) -> Self {
        assert!(opts.period > 0, "monitor period must be positive");
        SchmidtGapMonitor {
            acc,
            series: Vec::new(),
            sym,
            opts,
            stable: 0,
            stopped: false,
        }
    }

    pub fn stopped_early(&self) -> bool {
        self.stopped
    }

    /// Finalizes the current counts and appends one point to the series.
    pub fn checkpoint(&mut self) -> &GapPoint {
        let point = match self.evaluate() {
            Ok(p) => p,
            Err(_) => GapPoint {
                n_samples: self.acc.n_total(),
                gap: None,
                xi0: None,
                lowest: vec![],
            },
        };
        if let (Some(rule), Some(prev)) = (self.opts.stop, self.series.last()) {
            let k = rule.top_k;
            let settled = point.lowest.len() >= k
                && prev.lowest.len() >= k
                && point.lowest[..k]
                    .iter()
                    .zip(&prev.lowest[..k])
                    .all(|(a, b)| (a - b).abs() < rule.tol);
            self.stable = if settled { self.stable + 1 } else { 0 };
            if self.stable >= rule.patience {
                self.stopped = true;
            }
        }
        self.series.push(point);
        self.series.last().unwrap()
    }

    fn evaluate(&self) -> Result<GapPoint> {
        let rdm = self.acc.finalize(&self.opts.finalize)?;
        let es = compute_spectrum(&rdm.blocks, &self.sym, &self.opts.spectrum)?;
        let mut lowest = es.xi_values();
        lowest.truncate(self.opts.track);
        Ok(GapPoint {
            n_samples: self.acc.n_total(),
            gap: es.schmidt_gap(),
            xi0: Some(es.xi0),
            lowest,
        })
    }

    fn after_sweep(&mut self) {
        if self.acc.n_total().is_multiple_of(self.opts.period) {
            self.checkpoint();
        }
    }

    pub fn into_parts(self) -> (RdmAccumulator, Vec<GapPoint>) {
        (self.acc, self.series)
    }
}

impl SnapshotSink for SchmidtGapMonitor {
    fn record(&mut self, snapshot: BoundarySnapshot) -> Result<()> {
        self.acc.record(snapshot)?;
        self.after_sweep();
        Ok(())
    }

    fn record_expanded(&mut self, configs: &[(BoundarySnapshot, u64)]) -> Result<()> {
        self.acc.record_expanded(configs)?;
        self.after_sweep();
        Ok(())
    }

    fn done(&self) -> bool {
        self.stopped
    }
}

/// CSV with columns `n_samples,gap,xi0`.
pub fn series_csv(series: &[GapPoint]) -> String {
    let mut out = String::from("n_samples,gap,xi0\n");
    for p in series {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.12}")).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", p.n_samples, f(p.gap), f(p.xi0)));
    }
    out
}
