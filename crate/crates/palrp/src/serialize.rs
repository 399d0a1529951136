//! Deterministic JSON writing.
//!
//! Every float is emitted with 17 significant digits (`d.16e` scientific
//! form), enough to round-trip any finite `f64` exactly, and the writer is
//! pure — the same value always serializes to the same bytes. All referee
//! outputs go through here so repeated runs are byte-identical.

use serde::Serialize;
use std::io;

struct FixedPrecision;

impl serde_json::ser::Formatter for FixedPrecision {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize to a compact JSON string with fixed-precision floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedPrecision);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serializer emits UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn floats_use_seventeen_significant_digits() {
        let s = to_json_string(&json!({"x": 0.1, "y": 1.0, "z": -0.25})).unwrap();
        assert_eq!(
            s,
            r#"{"x":1.0000000000000001e-1,"y":1.0000000000000000e0,"z":-2.5000000000000000e-1}"#
        );
    }

    #[test]
    fn integers_stay_integers() {
        let s = to_json_string(&json!({"n": 42, "list": [1, 2, 3]})).unwrap();
        assert_eq!(s, r#"{"list":[1,2,3],"n":42}"#);
    }

    #[test]
    fn output_round_trips_exactly() {
        let values = [0.1, -0.000123456789, 1e300, 5e-324, std::f64::consts::PI, 0.0];
        for v in values {
            let s = to_json_string(&v).unwrap();
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "value {v} must survive the round trip");
        }
    }

    #[test]
    fn serialization_is_reproducible() {
        let v = json!({"a": [0.25, 0.3333333333333333], "b": {"c": 7}});
        assert_eq!(to_json_string(&v).unwrap(), to_json_string(&v).unwrap());
    }
}
