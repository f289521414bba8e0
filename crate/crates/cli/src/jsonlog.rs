//! Line-delimited JSON event log on stderr.

use serde_json::{json, Value};

pub fn log_event(event: &str, fields: Value) {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let mut record = json!({ "ts": ts, "event": event });
    if let (Some(obj), Value::Object(extra)) = (record.as_object_mut(), fields) {
        for (k, v) in extra {
            obj.insert(k, v);
        }
    }
    eprintln!("{record}");
}
