use std::path::Path;

use super::EpochTrace;
use crate::error::{Error, Result};

pub const CURVES_HEADER: [&str; 6] = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "val_qwk"];

/// One row per epoch, floats with six decimals, `val_qwk` empty when absent.
pub fn write_curves_csv(trace: &[EpochTrace], path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Other(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(CURVES_HEADER).map_err(err)?;
    for t in trace {
        w.write_record([
            t.epoch.to_string(),
            format!("{:.6}", t.train_loss),
            format!("{:.6}", t.val_loss),
            format!("{:.6}", t.train_accuracy),
            format!("{:.6}", t.val_accuracy),
            t.val_qwk.map(|q| format!("{q:.6}")).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<EpochTrace>> {
    let err = |msg: String| Error::Other(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = r.headers().map_err(|e| err(e.to_string()))?.clone();
    if header.iter().ne(CURVES_HEADER) {
        return Err(err(format!("expected header {}", CURVES_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let row = i + 2;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| err(format!("row {row}: bad {} `{}`", CURVES_HEADER[k], &rec[k])))
        };
        out.push(EpochTrace {
            epoch: rec[0]
                .parse()
                .map_err(|_| err(format!("row {row}: bad epoch `{}`", &rec[0])))?,
            train_loss: num(1)?,
            val_loss: num(2)?,
            train_accuracy: num(3)?,
            val_accuracy: num(4)?,
            val_qwk: if rec[5].is_empty() { None } else { Some(num(5)?) },
        });
    }
    Ok(out)
}
