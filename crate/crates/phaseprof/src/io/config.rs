//! Flat INI-style `key = value` config files.
//!
//! One key per line; `#` and `;` start comments; section headers are not
//! used. Later duplicates win, which is also how CLI `--set` overrides
//! are applied on top of a file.

use std::collections::BTreeMap;

use super::{IoError, Result};

pub fn parse_ini(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(IoError::Config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn render_ini(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Applies `key=value` override strings (e.g. from repeated `--set` flags).
pub fn apply_overrides(map: &mut BTreeMap<String, String>, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let Some((key, value)) = item.split_once('=') else {
            return Err(IoError::Config(format!(
                "override '{item}' is not of the form key=value"
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(())
}

pub fn get_parsed<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
            IoError::Config(format!("key '{key}': cannot parse value '{raw}'"))
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_spacing() {
        let text = "# comment\n\nfoo = 10\nbar=1/2\n; another\nbaz =  hello world \n";
        let map = parse_ini(text).unwrap();
        assert_eq!(map["foo"], "10");
        assert_eq!(map["bar"], "1/2");
        assert_eq!(map["baz"], "hello world");
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse_ini("just some text").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut map = parse_ini("epochs = 10").unwrap();
        apply_overrides(&mut map, &["epochs=25".to_string()]).unwrap();
        assert_eq!(map["epochs"], "25");
    }

    #[test]
    fn roundtrips_through_render() {
        let text = "alpha = 1\nbeta = x y\n";
        let map = parse_ini(text).unwrap();
        assert_eq!(render_ini(&map), text);
    }
}
