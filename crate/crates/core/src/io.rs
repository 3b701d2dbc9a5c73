//! File formats: marginals and solutions as JSON, option quotes as CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::marginals::{MarginalSequence, OptionQuote};
use crate::solver::{DualPotentials, SolveReport, Solution};

/// `{"grid": [...], "times": [...], "weights": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalFile {
    pub grid: Vec<f64>,
    pub times: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl MarginalFile {
    pub fn from_sequence(seq: &MarginalSequence) -> Self {
        Self {
            grid: seq.grid().points().to_vec(),
            times: seq.times().to_vec(),
            weights: seq.marginals().iter().map(|m| m.weights().to_vec()).collect(),
        }
    }

    pub fn into_sequence(self) -> Result<MarginalSequence> {
        let grid = Arc::new(Grid::from_points(self.grid)?);
        MarginalSequence::from_weights(grid, self.times, self.weights)
    }
}

/// `{"u": [[...]], "h": [[...]], "epsilon": ..., "grid": [...], "report": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub u: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub grid: Vec<f64>,
    pub report: SolveReport,
}

impl SolutionFile {
    pub fn from_solution(sol: &Solution) -> Self {
        let mut report = sol.report.clone();
        // Histories can be long; the file keeps the summary only.
        report.per_iter_error.clear();
        report.per_iter_change.clear();
        report.per_iter_dual.clear();
        Self {
            u: sol.potentials.u.clone(),
            h: sol.potentials.h.clone(),
            epsilon: sol.epsilon,
            grid: sol.plan.grid().points().to_vec(),
            report,
        }
    }

    pub fn potentials(&self) -> DualPotentials {
        DualPotentials {
            u: self.u.clone(),
            h: self.h.clone(),
        }
    }

    /// Fails unless the file was written for `grid`.
    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if self.grid.as_slice() != grid.points() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let reader = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(reader)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_marginals(path: &Path) -> Result<MarginalSequence> {
    read_json::<MarginalFile>(path)?.into_sequence()
}

pub fn write_marginals(path: &Path, seq: &MarginalSequence) -> Result<()> {
    write_json(path, &MarginalFile::from_sequence(seq))
}

/// Quotes from CSV with header `maturity,strike,mid,spread`.
pub fn parse_quotes(reader: impl Read) -> Result<Vec<OptionQuote>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["maturity", "strike", "mid", "spread"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::InvalidInput(format!(
            "quote header must be {}, got {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn read_quotes(path: &Path) -> Result<Vec<OptionQuote>> {
    parse_quotes(File::open(path)?)
}

pub fn write_quotes(path: &Path, quotes: &[OptionQuote]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for q in quotes {
        w.serialize(q)?;
    }
    w.flush()?;
    Ok(())
}
