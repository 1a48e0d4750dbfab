//! JSON-Lines event log on stderr.

use std::io::Write;

use serde_json::{Map, Value};

pub fn event(level: &str, event: &str, fields: Value) {
    let mut obj = Map::new();
    obj.insert("level".into(), level.into());
    obj.insert("event".into(), event.into());
    if let Value::Object(extra) = fields {
        obj.extend(extra);
    }
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{}", Value::Object(obj));
}

/// `MPATH_LOG=error` suppresses everything but errors.
pub fn info(name: &str, fields: Value) {
    if std::env::var("MPATH_LOG").is_ok_and(|v| v.eq_ignore_ascii_case("error")) {
        return;
    }
    event("info", name, fields);
}

pub fn error(message: &str) {
    event("error", "error", serde_json::json!({ "message": message }));
}
