//! Text exposition format: rendering and a small validating parser.

use std::fmt::Write as _;

use super::Snapshot;
use crate::error::{Error, Result};

pub const CPU_PERCENT: &str = "fedharness_cpu_percent";
pub const BYTES_IN: &str = "fedharness_net_bytes_in_total";
pub const BYTES_OUT: &str = "fedharness_net_bytes_out_total";
pub const ROUND: &str = "fedharness_round";
pub const ACCURACY: &str = "fedharness_accuracy_distributed";

fn escape(v: &str) -> String {
    v.replace('\\', r"\\").replace('"', "\\\"").replace('\n', r"\n")
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "+Inf" } else { "-Inf" }.into()
    } else {
        v.to_string()
    }
}

pub(super) fn render(snap: &Snapshot) -> String {
    let mut out = String::new();
    let families: [(&str, &str, fn(&super::ResourceSample) -> f64); 3] = [
        (CPU_PERCENT, "gauge", |s| s.cpu_percent),
        (BYTES_IN, "counter", |s| s.bytes_in as f64),
        (BYTES_OUT, "counter", |s| s.bytes_out as f64),
    ];
    for (name, kind, get) in families {
        if snap.resources.is_empty() {
            continue;
        }
        writeln!(out, "# TYPE {name} {kind}").unwrap();
        for ((role, id), s) in &snap.resources {
            writeln!(out, "{name}{{role=\"{}\",id=\"{id}\"}} {}", escape(role), fmt_value(get(s))).unwrap();
        }
    }
    writeln!(out, "# TYPE {ROUND} gauge").unwrap();
    writeln!(out, "{ROUND}{{role=\"server\",id=\"0\"}} {}", snap.round).unwrap();
    if let Some(acc) = snap.accuracy_distributed {
        writeln!(out, "# TYPE {ACCURACY} gauge").unwrap();
        writeln!(out, "{ACCURACY}{{role=\"server\",id=\"0\"}} {}", fmt_value(acc)).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpositionSample {
    pub name: String,
    pub labels: Vec<(String, String)>,
    pub value: f64,
}

impl ExpositionSample {
    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn is_name(s: &str, colon: bool) -> bool {
    let mut chars = s.chars();
    let ok_first = |c: char| c.is_ascii_alphabetic() || c == '_' || (colon && c == ':');
    matches!(chars.next(), Some(c) if ok_first(c))
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || (colon && c == ':'))
}

fn parse_value(s: &str) -> Option<f64> {
    match s {
        "NaN" => Some(f64::NAN),
        "+Inf" => Some(f64::INFINITY),
        "-Inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

fn parse_labels(s: &str, line: usize) -> Result<Vec<(String, String)>> {
    let bad = |why: &str| Error::Protocol(format!("exposition line {line}: {why}"));
    let mut labels = Vec::new();
    let mut rest = s;
    while !rest.is_empty() {
        let eq = rest.find('=').ok_or_else(|| bad("label without '='"))?;
        let key = &rest[..eq];
        if !is_name(key, false) {
            return Err(bad("bad label name"));
        }
        let mut chars = rest[eq + 1..].char_indices();
        if chars.next().map(|(_, c)| c) != Some('"') {
            return Err(bad("label value must be quoted"));
        }
        let mut value = String::new();
        let mut end = None;
        while let Some((i, c)) = chars.next() {
            match c {
                '\\' => match chars.next().map(|(_, c)| c) {
                    Some('n') => value.push('\n'),
                    Some(c @ ('\\' | '"')) => value.push(c),
                    _ => return Err(bad("bad escape")),
                },
                '"' => {
                    end = Some(eq + 1 + i + 1);
                    break;
                }
                c => value.push(c),
            }
        }
        let end = end.ok_or_else(|| bad("unterminated label value"))?;
        labels.push((key.to_string(), value));
        rest = &rest[end..];
        if let Some(r) = rest.strip_prefix(',') {
            rest = r;
        } else if !rest.is_empty() {
            return Err(bad("expected ',' between labels"));
        }
    }
    Ok(labels)
}

/// Parses exposition text, rejecting anything outside the grammar.
/// Comment lines must be `# TYPE`/`# HELP` or free text; samples of a family
/// with a `# TYPE` line must follow it.
pub fn parse_exposition(text: &str) -> Result<Vec<ExpositionSample>> {
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let bad = |why: &str| Error::Protocol(format!("exposition line {line_no}: {why}"));
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut parts = comment.split_whitespace();
            if parts.next() == Some("TYPE") {
                let name = parts.next().ok_or_else(|| bad("TYPE without name"))?;
                let kind = parts.next().ok_or_else(|| bad("TYPE without kind"))?;
                if !is_name(name, true)
                    || !["counter", "gauge", "histogram", "summary", "untyped"].contains(&kind)
                    || parts.next().is_some()
                {
                    return Err(bad("malformed TYPE line"));
                }
            }
            continue;
        }
        let (series, rest) = match line.find('{') {
            Some(open) => {
                let close = line.rfind('}').ok_or_else(|| bad("unclosed label set"))?;
                if close < open {
                    return Err(bad("unclosed label set"));
                }
                let name = &line[..open];
                ((name, parse_labels(&line[open + 1..close], line_no)?), &line[close + 1..])
            }
            None => {
                let sp = line.find(' ').ok_or_else(|| bad("missing value"))?;
                ((&line[..sp], Vec::new()), &line[sp..])
            }
        };
        let (name, labels) = series;
        if !is_name(name, true) {
            return Err(bad("bad metric name"));
        }
        let mut fields = rest.split_whitespace();
        let value = fields.next().and_then(parse_value).ok_or_else(|| bad("bad value"))?;
        if let Some(ts) = fields.next() {
            ts.parse::<i64>().map_err(|_| bad("bad timestamp"))?;
        }
        if fields.next().is_some() || !rest.starts_with(' ') {
            return Err(bad("trailing garbage"));
        }
        samples.push(ExpositionSample {
            name: name.to_string(),
            labels,
            value,
        });
    }
    Ok(samples)
}
