//! Merging result CSVs from several runs.

use std::path::Path;

use crate::error::CliError;

/// Concatenates CSV files with identical headers, in argument order.
pub fn merge_csv(inputs: &[&Path], out: &mut dyn std::io::Write) -> Result<usize, CliError> {
    let mut header: Option<csv::StringRecord> = None;
    let mut writer = csv::Writer::from_writer(out);
    let mut rows = 0;
    for path in inputs {
        let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let h = reader.headers().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.clone();
        match &header {
            None => {
                writer.write_record(&h).map_err(|e| CliError::Other(e.to_string()))?;
                header = Some(h);
            }
            Some(first) if *first != h => {
                return Err(CliError::Data(format!("{}: header differs from the first file", path.display())));
            }
            Some(_) => {}
        }
        for rec in reader.records() {
            let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            writer.write_record(&rec).map_err(|e| CliError::Other(e.to_string()))?;
            rows += 1;
        }
    }
    writer.flush().map_err(|e| CliError::Other(e.to_string()))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_and_checks_headers() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let c = dir.path().join("c.csv");
        std::fs::write(&a, "x,y\n1,2\n").unwrap();
        std::fs::write(&b, "x,y\n3,4\n5,6\n").unwrap();
        std::fs::write(&c, "x,z\n1,2\n").unwrap();
        let mut out = Vec::new();
        assert_eq!(merge_csv(&[&a, &b], &mut out).unwrap(), 3);
        assert_eq!(String::from_utf8(out).unwrap(), "x,y\n1,2\n3,4\n5,6\n");
        assert!(matches!(merge_csv(&[&a, &c], &mut Vec::new()), Err(CliError::Data(_))));
    }
}
