//! Shared helpers for the CLI integration tests: running the binary,
//! loading reports, stripping run-to-run volatile fields, and a minimal
//! structural validator for the shipped report schema.

// Each integration-test binary compiles this module on its own and uses a
// different subset of the helpers.
#![allow(dead_code)]

use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_kronlora")
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn load_json(path: &Path) -> Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

pub fn schema() -> Value {
    load_json(&workspace_root().join("schemas/report.schema.json"))
}

/// Drop the fields that legitimately differ between two identical runs:
/// the manifest timestamp and every wall-clock-derived number.
pub fn strip_volatile(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|k, _| {
                k != "timestamp_unix" && !k.ends_with("_seconds") && !k.contains("throughput")
            });
            for child in map.values_mut() {
                strip_volatile(child);
            }
        }
        Value::Array(items) => {
            for child in items {
                strip_volatile(child);
            }
        }
        _ => {}
    }
}

fn type_matches(value: &Value, ty: &str) -> bool {
    match ty {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        "number" => value.is_number(),
        "integer" => value.is_i64() || value.is_u64(),
        other => panic!("schema uses unsupported type {other}"),
    }
}

/// Structural validation covering the subset of JSON Schema the shipped
/// schema uses: `type` (string or list), `enum`, `required`, `properties`,
/// `additionalProperties` (as a schema), `items`, and `minimum`.
pub fn validate(value: &Value, schema: &Value, path: &str, errors: &mut Vec<String>) {
    let obj = schema.as_object().expect("schema node is an object");

    if let Some(allowed) = obj.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            errors.push(format!("{path}: {value} not in {allowed:?}"));
            return;
        }
    }
    if let Some(ty) = obj.get("type") {
        let ok = match ty {
            Value::String(s) => type_matches(value, s),
            Value::Array(list) => list
                .iter()
                .any(|t| type_matches(value, t.as_str().expect("type name"))),
            other => panic!("unsupported type spec {other}"),
        };
        if !ok {
            errors.push(format!("{path}: expected {ty}, got {value}"));
            return;
        }
    }
    if let Some(min) = obj.get("minimum").and_then(Value::as_f64) {
        if let Some(n) = value.as_f64() {
            if n < min {
                errors.push(format!("{path}: {n} below minimum {min}"));
            }
        }
    }
    if let Some(map) = value.as_object() {
        if let Some(required) = obj.get("required").and_then(Value::as_array) {
            for key in required {
                let key = key.as_str().expect("required key");
                if !map.contains_key(key) {
                    errors.push(format!("{path}: missing required field {key}"));
                }
            }
        }
        let properties = obj.get("properties").and_then(Value::as_object);
        if let Some(props) = properties {
            for (key, sub) in props {
                if let Some(child) = map.get(key) {
                    validate(child, sub, &format!("{path}.{key}"), errors);
                }
            }
        }
        if let Some(extra) = obj.get("additionalProperties").filter(|v| v.is_object()) {
            for (key, child) in map {
                let covered = properties.is_some_and(|p| p.contains_key(key));
                if !covered {
                    validate(child, extra, &format!("{path}.{key}"), errors);
                }
            }
        }
    }
    if let Some(items) = value.as_array() {
        if let Some(item_schema) = obj.get("items") {
            for (i, child) in items.iter().enumerate() {
                validate(child, item_schema, &format!("{path}[{i}]"), errors);
            }
        }
    }
}

/// Validate a report envelope against the shipped schema, including the
/// presence and shape of the payload named by its `command` tag.
pub fn assert_valid_report(envelope: &Value) {
    let schema = schema();
    let mut errors = Vec::new();
    validate(envelope, &schema, "$", &mut errors);
    let command = envelope["command"].as_str().expect("command tag");
    if envelope.get(command).is_none() {
        errors.push(format!("$: missing payload field {command}"));
    }
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}
