use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::data::Example;
use crate::error::{MariError, Result};

pub const CHECKSUM_HEADER: &str = "# manifest-checksum: ";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(MariError::MissingArtifact(path.display().to_string()));
    }
    Ok(sha256_hex(&fs::read(path)?))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

/// One JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(MariError::MissingArtifact(path.display().to_string()));
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| MariError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Lines of `{"id", "regime", "prompt", "options", "gold", "label"}`.
pub fn save_dataset(path: &Path, data: &[Example]) -> Result<()> {
    write_jsonl(path, data)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Example>> {
    let data: Vec<Example> = read_jsonl(path)?;
    if let Some(e) = data.iter().find(|e| e.gold >= e.options.len()) {
        return Err(MariError::Invalid(format!(
            "example {} has gold {} with {} options",
            e.id,
            e.gold,
            e.options.len()
        )));
    }
    Ok(data)
}

/// CSV table whose first line names the manifest it came from.
pub fn write_metrics_csv(
    path: &Path,
    checksum: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    ensure_parent(path)?;
    let mut out = format!("{CHECKSUM_HEADER}{checksum}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a table written by [`write_metrics_csv`]: (checksum, header, rows).
pub fn read_metrics_csv(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    if !path.exists() {
        return Err(MariError::MissingArtifact(path.display().to_string()));
    }
    let text = fs::read_to_string(path)?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let checksum = first.strip_prefix(CHECKSUM_HEADER).ok_or_else(|| {
        MariError::Invalid(format!("{} lacks the checksum header", path.display()))
    })?;
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(String::from).collect())
                .map_err(csv_err)
        })
        .collect::<Result<_>>()?;
    Ok((checksum.to_string(), header, rows))
}

fn csv_err(e: csv::Error) -> MariError {
    MariError::Invalid(format!("csv: {e}"))
}

/// `{"manifest_checksum": …, "data": …}`, pretty-printed.
pub fn write_metrics_json<T: Serialize>(path: &Path, checksum: &str, data: &T) -> Result<()> {
    ensure_parent(path)?;
    let v = serde_json::json!({ "manifest_checksum": checksum, "data": data });
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &v)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_metrics_json<T: DeserializeOwned>(path: &Path) -> Result<(String, T)> {
    if !path.exists() {
        return Err(MariError::MissingArtifact(path.display().to_string()));
    }
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let checksum = v["manifest_checksum"]
        .as_str()
        .ok_or_else(|| MariError::Invalid(format!("{} lacks manifest_checksum", path.display())))?
        .to_string();
    Ok((checksum, serde_json::from_value(v["data"].take())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{Applicability, Regime};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let data = vec![Example {
            id: 7,
            regime: Regime::RB,
            prompt: vec![1, 2, 3],
            options: vec![vec![4], vec![5]],
            gold: 1,
            label: Applicability::Applicable,
        }];
        save_dataset(&p, &data).unwrap();
        let line = fs::read_to_string(&p).unwrap();
        assert_eq!(line, "{\"id\":7,\"regime\":\"RB\",\"prompt\":[1,2,3],\"options\":[[4],[5]],\"gold\":1,\"label\":\"applicable\"}\n");
        assert_eq!(load_dataset(&p).unwrap(), data);
    }

    #[test]
    fn csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_csv(&p, "abc", &["a", "b"], &[vec!["1".into(), "x,y".into()]]).unwrap();
        let (c, h, rows) = read_metrics_csv(&p).unwrap();
        assert_eq!(
            (c.as_str(), h, rows),
            (
                "abc",
                vec!["a".to_string(), "b".into()],
                vec![vec!["1".to_string(), "x,y".into()]]
            )
        );
    }
}
