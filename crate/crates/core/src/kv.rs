//! `key=value` text used for configs, provenance, manifests and reports.

use crate::error::{Error, Result};

/// Parses one `key=value` pair per line. Blank lines and lines starting
/// with `#` are skipped; keys and values are trimmed.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            position: i + 1,
            message: format!("expected key=value, got '{line}'"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                position: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn render_kv<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> String {
    pairs.iter().map(|(k, v)| format!("{}={}\n", k.as_ref(), v.as_ref())).collect()
}

/// Parses the value of `key` with `FromStr`, naming the key on failure.
pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("invalid value '{value}' for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let pairs = vec![("a".to_string(), "1".to_string()), ("b c".to_string(), "x=y".to_string())];
        assert_eq!(parse_kv(&render_kv(&pairs)).unwrap(), pairs);
    }

    #[test]
    fn comments_and_errors() {
        assert_eq!(parse_kv("# c\n\n k = v \n").unwrap(), vec![("k".into(), "v".into())]);
        assert!(matches!(parse_kv("a=1\nnope"), Err(Error::Parse { position: 2, .. })));
        assert!(parse_value::<usize>("n", "x").is_err());
    }
}
