//! Canonical JSON output: sorted keys, fixed float precision, trailing newline.

use serde::Serialize;
use serde_json::Value;

/// Rounds half away from zero to `places` decimals.
pub fn round_to(x: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    let r = (x * scale).round() / scale;
    // avoid "-0.0"
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Serializes a chrF value at 4 decimals.
pub fn chrf4<S: serde::Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_to(*x, 4))
}

/// Serializes a chrF value at 1 decimal, as in comparison tables.
pub fn chrf1<S: serde::Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_to(*x, 1))
}

pub fn chrf4_map<S, K>(m: &std::collections::BTreeMap<K, f64>, s: S) -> Result<S::Ok, S::Error>
where
    S: serde::Serializer,
    K: Serialize + Ord,
{
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &round_to(*v, 4))?;
    }
    map.end()
}

pub fn chrf1_map<S, K>(m: &std::collections::BTreeMap<K, f64>, s: S) -> Result<S::Ok, S::Error>
where
    S: serde::Serializer,
    K: Serialize + Ord,
{
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &round_to(*v, 1))?;
    }
    map.end()
}

/// Renders any report as canonical JSON text. Object keys are sorted
/// recursively so the bytes depend only on the report's content.
pub fn emit_report<T: Serialize + ?Sized>(report: &T) -> serde_json::Result<String> {
    let value = serde_json::to_value(report)?;
    let mut text = serde_json::to_string_pretty(&sort_keys(value))?;
    text.push('\n');
    Ok(text)
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Writes a report to `path`, creating parent directories.
pub fn write_report<T: Serialize + ?Sized>(path: &std::path::Path, report: &T) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = emit_report(report).map_err(std::io::Error::other)?;
    std::fs::write(path, text)
}
