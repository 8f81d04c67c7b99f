//! JSON encoding with 17 significant digits.

use std::io;

use num_complex::Complex64;
use qpot::numkit::{Mat, Vector};
use serde::Serialize;
use serde_json::{json, Value};

pub const REPORT_VERSION: u32 = 1;

struct SigFigs;

impl serde_json::ser::Formatter for SigFigs {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }
}

pub fn to_string(value: &Value) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigFigs);
    value.serialize(&mut ser).expect("serializing a Value cannot fail");
    String::from_utf8(out).expect("JSON is UTF-8")
}

pub fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn vector(v: &Vector) -> Value {
    Value::Array(v.iter().map(|x| num(*x)).collect())
}

pub fn matrix(m: &Mat) -> Value {
    Value::Array((0..m.nrows()).map(|i| Value::Array((0..m.ncols()).map(|j| num(m[(i, j)])).collect())).collect())
}

pub fn complex_list(values: &[Complex64]) -> Value {
    Value::Array(values.iter().map(|c| json!([num(c.re), num(c.im)])).collect())
}

/// Wraps a deterministic payload with tool metadata kept outside it.
pub fn envelope(report: Value) -> Value {
    let generated = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    json!({
        "tool": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION"), "generated_unix": generated },
        "report": report,
    })
}
