//! Flat `key = value` text: one pair per line, dotted keys, `#` comments.

use crate::error::{HatError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str, path: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(HatError::Parse {
                path: path.to_string(),
                line,
                detail: format!("expected `key = value`, found `{content}`"),
            });
        };
        let key = k.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) || key.contains(char::is_whitespace)
        {
            return Err(HatError::Parse {
                path: path.to_string(),
                line,
                detail: format!("invalid key `{key}`"),
            });
        }
        out.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off, found `{v}`")),
    }
}

pub fn parse_num<N: std::str::FromStr>(v: &str) -> std::result::Result<N, String> {
    v.parse::<N>().map_err(|_| format!("invalid number `{v}`"))
}

pub fn parse_list<N: std::str::FromStr>(v: &str) -> std::result::Result<Vec<N>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

pub fn join<N: std::fmt::Display>(items: &[N]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
