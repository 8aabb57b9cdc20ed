//! `fedls spectrum`: DFT magnitude profile of a saved vector.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use fedls::fedsim::read_model;
use fedls::lapsmooth::{spectrum, SpectrumDump};
use serde_json::{json, Value};

use crate::error::{CliError, Result};

/// Reads a model file, writes `freq,magnitude` rows to `out` when given,
/// and returns the dump with a JSON record of its log-log slope.
pub fn cmd_spectrum(input: &Path, out: Option<&Path>) -> Result<(SpectrumDump, Value)> {
    let file = File::open(input).map_err(|e| CliError::io(input, e))?;
    let v = read_model(BufReader::new(file))?;
    let dump = spectrum(&v)?;
    if let Some(out) = out {
        let mut w = BufWriter::new(File::create(out).map_err(|e| CliError::io(out, e))?);
        dump.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(out, e))?;
    }
    let record = json!({
        "dim": v.len(),
        "bins": dump.frequencies.len(),
        "loglog_slope": dump.loglog_slope(),
    });
    Ok((dump, record))
}
