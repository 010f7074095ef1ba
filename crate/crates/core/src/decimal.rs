//! Serde helpers that encode `f64` amounts as decimal strings.
//!
//! Rust's `Display` for `f64` prints the shortest string that parses back to
//! the same bits, so a parse/serialize cycle is lossless.

use std::collections::BTreeMap;

use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

pub fn to_string(value: f64) -> String {
    format!("{value}")
}

pub fn parse(text: &str) -> Result<f64, String> {
    let value: f64 = text
        .trim()
        .parse()
        .map_err(|_| format!("not a decimal number: {text:?}"))?;
    if !value.is_finite() {
        return Err(format!("non-finite amount: {text:?}"));
    }
    Ok(value)
}

/// Rounds to `digits` significant digits and renders the shortest form of the
/// rounded value. Used for human-facing reports.
pub fn to_significant(value: f64, digits: usize) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{}", if value == 0.0 { 0.0 } else { value });
    }
    let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), value)
        .parse()
        .unwrap_or(value);
    format!("{rounded}")
}

pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.serialize_str(&to_string(*value))
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    let text = String::deserialize(deserializer)?;
    parse(&text).map_err(D::Error::custom)
}

pub mod pair {
    use super::*;

    pub fn serialize<S: Serializer>(value: &[f64; 2], serializer: S) -> Result<S::Ok, S::Error> {
        use serde::Serialize;
        [to_string(value[0]), to_string(value[1])].serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<[f64; 2], D::Error> {
        let [a, b] = <[String; 2]>::deserialize(deserializer)?;
        Ok([
            parse(&a).map_err(D::Error::custom)?,
            parse(&b).map_err(D::Error::custom)?,
        ])
    }
}

pub mod map {
    use super::*;

    pub fn serialize<K, S>(value: &BTreeMap<K, f64>, serializer: S) -> Result<S::Ok, S::Error>
    where
        K: serde::Serialize + Ord,
        S: Serializer,
    {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(value.len()))?;
        for (k, v) in value {
            map.serialize_entry(k, &to_string(*v))?;
        }
        map.end()
    }

    pub fn deserialize<'de, K, D>(deserializer: D) -> Result<BTreeMap<K, f64>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        D: Deserializer<'de>,
    {
        let raw = BTreeMap::<K, String>::deserialize(deserializer)?;
        raw.into_iter()
            .map(|(k, v)| parse(&v).map(|v| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(to_significant(19.0 - 8.0 * 3f64.sqrt(), 12), "5.14359353945");
        assert_eq!(to_significant(4.0, 12), "4");
        assert_eq!(to_significant(0.0, 12), "0");
        assert_eq!(to_significant(-1.25e-9, 3), "-0.00000000125");
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse("abc").is_err());
        assert!(parse("inf").is_err());
        assert_eq!(parse(" 1.5 ").unwrap(), 1.5);
    }
}
