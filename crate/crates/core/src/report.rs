//! CSV outputs and atomic file writes.

use std::io::Write;
use std::path::Path;

use crate::benchmark::{ProbeResult, SweepPoint};
use crate::error::{Error, Result};
use crate::orchestrator::RoundRecord;

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn to_csv<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let run = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
        w.write_record(header)?;
        fill(w)?;
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// `round,global_loss,delta_norm,checksum,dropped`; the checksum is 16 hex
/// digits and `dropped` lists node ids separated by `;`.
pub fn rounds_csv(records: &[RoundRecord]) -> Result<Vec<u8>> {
    to_csv(&["round", "global_loss", "delta_norm", "checksum", "dropped"], |w| {
        for r in records {
            let dropped: Vec<String> = r.dropped.iter().map(u32::to_string).collect();
            w.write_record([
                r.round.to_string(),
                format!("{:e}", r.global_loss),
                format!("{:e}", r.delta_norm),
                format!("{:016x}", r.checksum),
                dropped.join(";"),
            ])?;
        }
        Ok(())
    })
}

fn kind_label(r: &ProbeResult) -> String {
    r.kind.map(|k| k.label()).unwrap_or_else(|| "checkpoint".into())
}

/// `kind,seed,classifier,accuracy,best_epoch,train,val,test`.
pub fn probe_csv(results: &[ProbeResult]) -> Result<Vec<u8>> {
    to_csv(
        &[
            "kind",
            "seed",
            "classifier",
            "accuracy",
            "best_epoch",
            "train",
            "val",
            "test",
        ],
        |w| {
            for r in results {
                w.write_record([
                    kind_label(r),
                    r.seed.to_string(),
                    r.classifier.name().to_string(),
                    format!("{:.6}", r.accuracy),
                    r.best_epoch.to_string(),
                    r.train_size.to_string(),
                    r.val_size.to_string(),
                    r.test_size.to_string(),
                ])?;
            }
            Ok(())
        },
    )
}

/// `round,kind,seed,accuracy`.
pub fn sweep_csv(points: &[SweepPoint]) -> Result<Vec<u8>> {
    to_csv(&["round", "kind", "seed", "accuracy"], |w| {
        for p in points {
            w.write_record([
                p.round.to_string(),
                p.kind.label(),
                p.result.seed.to_string(),
                format!("{:.6}", p.result.accuracy),
            ])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn rounds_csv_layout() {
        let r = RoundRecord {
            round: 1,
            global_loss: 0.25,
            node_losses: vec![],
            delta_norm: 2.0,
            checksum: 0xab,
            dropped: vec![2, 4],
            elapsed: Duration::ZERO,
        };
        let text = String::from_utf8(rounds_csv(&[r]).unwrap()).unwrap();
        assert_eq!(
            text,
            "round,global_loss,delta_norm,checksum,dropped\n1,2.5e-1,2e0,00000000000000ab,2;4\n"
        );
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_atomic(&dir.path().join("no/such/file"), b"x").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
