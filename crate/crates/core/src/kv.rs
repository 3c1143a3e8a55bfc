//! Flat `key=value` configuration text with optional `[section]` headers.

use std::path::Path;

use crate::error::{Result, StoaError};

/// One parsed section; the unnamed leading section has `name == None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvSection {
    pub name: Option<String>,
    pub entries: Vec<(String, String)>,
}

impl KvSection {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn parse(text: &str) -> Result<Vec<KvSection>> {
    let mut sections = vec![KvSection::default()];
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| StoaError::Config(format!("line {}: unterminated section", lineno + 1)))?;
            sections.push(KvSection {
                name: Some(name.trim().to_string()),
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| StoaError::Config(format!("line {}: expected key=value", lineno + 1)))?;
        sections
            .last_mut()
            .expect("at least one section")
            .entries
            .push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(sections)
}

pub fn read(path: &Path) -> Result<Vec<KvSection>> {
    let text = std::fs::read_to_string(path).map_err(|e| StoaError::io(path, e))?;
    parse(&text)
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| StoaError::Config(format!("{key}: cannot parse {value:?}")))
}

pub(crate) fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(StoaError::Config(format!("{key}: expected on/off, got {value:?}"))),
    }
}

pub(crate) fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}
