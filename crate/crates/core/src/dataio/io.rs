use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::{DataError, Interaction, Item};

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let s = serde_json::to_string(row).map_err(|e| parse_err(path, 0, e.to_string()))?;
        writeln!(w, "{s}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn required_str(obj: &serde_json::Map<String, Value>, key: &str, path: &Path, line: usize) -> Result<String, DataError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(parse_err(path, line, format!("key `{key}` must be a string"))),
        None => Err(parse_err(path, line, format!("missing required key `{key}`"))),
    }
}

/// Loads a JSON-lines catalog. Unknown keys are ignored; `description`
/// may be absent or null.
pub fn load_catalog(path: &Path) -> Result<Vec<Item>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut items = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(parse_err(path, lineno, "expected a JSON object"));
        };
        let item_id = required_str(&obj, "item_id", path, lineno)?;
        let title = required_str(&obj, "title", path, lineno)?;
        let category = required_str(&obj, "category", path, lineno)?;
        let description = match obj.get("description") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None => String::new(),
            Some(other) => other.to_string(),
        };
        if item_id.is_empty() {
            return Err(parse_err(path, lineno, "empty item_id"));
        }
        if title.trim().is_empty() {
            return Err(parse_err(path, lineno, format!("empty title for `{item_id}`")));
        }
        if let Some(&first) = seen.get(&item_id) {
            return Err(DataError::DuplicateItem {
                id: item_id,
                first,
                second: lineno,
            });
        }
        seen.insert(item_id.clone(), lineno);
        items.push(Item {
            item_id,
            title,
            description,
            category,
        });
    }
    Ok(items)
}

pub fn write_catalog(path: &Path, items: &[Item]) -> Result<(), DataError> {
    write_jsonl(path, items)
}

/// Loads interactions from `.csv` (header `user_id,item_id,timestamp`) or JSON lines.
pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>, DataError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        return read_jsonl(path);
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let row: Interaction = row.map_err(|e| parse_err(path, i + 2, e.to_string()))?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<(), DataError> {
    write_jsonl(path, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn two_line_catalog_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"item_id\":\"b\",\"title\":\"B\",\"description\":\"\",\"category\":\"x\"}\n\
             {\"item_id\":\"a\",\"title\":\"A\",\"description\":\"d\",\"category\":\"y\"}\n",
        );
        let items = load_catalog(&p).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].item_id, "b");
        assert_eq!(items[1].description, "d");
    }

    #[test]
    fn duplicate_id_cites_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for i in 1..=8 {
            let id = if i == 3 || i == 7 { "dup".to_string() } else { format!("i{i}") };
            body.push_str(&format!("{{\"item_id\":\"{id}\",\"title\":\"t\",\"category\":\"c\"}}\n"));
        }
        let p = write(dir.path(), "c.jsonl", &body);
        match load_catalog(&p).unwrap_err() {
            DataError::DuplicateItem { id, first, second } => {
                assert_eq!((id.as_str(), first, second), ("dup", 3, 7));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_key_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"item_id\":\"a\",\"title\":\"A\",\"category\":\"c\"}\n{\"item_id\":\"b\",\"category\":\"c\"}\n",
        );
        let err = load_catalog(&p).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("title"), "{err}");
    }

    #[test]
    fn interactions_csv_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "x.csv", "user_id,item_id,timestamp\nu1,i1,10\nu1,i2,11\n");
        let j = write(
            dir.path(),
            "x.jsonl",
            "{\"user_id\":\"u1\",\"item_id\":\"i1\",\"timestamp\":10}\n{\"user_id\":\"u1\",\"item_id\":\"i2\",\"timestamp\":11}\n",
        );
        assert_eq!(load_interactions(&c).unwrap(), load_interactions(&j).unwrap());
    }
}
