//! JSON Lines encodings for score records and preference pairs.
//!
//! Field order is fixed and reals are written with 17 significant digits in
//! exponent form, so files are byte-stable across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::prefdata::PreferencePair;
use crate::scoring::ScoreRecord;
use crate::seqcore::AttributeId;

/// A finite real with 17 significant digits, e.g. `-1.2500000000000000e-1`.
pub fn fmt_real(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::InvalidArgument(format!("cannot serialize non-finite value {x}")));
    }
    Ok(format!("{x:.16e}"))
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn write_map(out: &mut String, map: &BTreeMap<AttributeId, f64>) -> Result<()> {
    out.push('{');
    for (i, (k, v)) in map.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{}:{}", quote(k.as_str()), fmt_real(*v)?).unwrap();
    }
    out.push('}');
    Ok(())
}

pub fn score_record_line(r: &ScoreRecord) -> Result<String> {
    let mut out = String::new();
    write!(
        out,
        "{{\"id\":{},\"energy\":{},\"gamma\":{},\"tau_raw\":",
        quote(&r.id),
        fmt_real(r.energy)?,
        fmt_real(r.gamma)?
    )
    .unwrap();
    write_map(&mut out, &r.tau_raw)?;
    out.push_str(",\"tau\":");
    write_map(&mut out, &r.tau)?;
    out.push('}');
    Ok(out)
}

pub fn pair_line(p: &PreferencePair) -> Result<String> {
    Ok(format!(
        "{{\"winner\":{},\"loser\":{},\"rho_w\":{},\"rho_l\":{},\"delta_rho\":{}}}",
        quote(&p.winner_id),
        quote(&p.loser_id),
        fmt_real(p.rho_w)?,
        fmt_real(p.rho_l)?,
        fmt_real(p.delta_rho)?
    ))
}

fn lines_to_string(lines: Vec<String>) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

pub fn score_records_jsonl(records: &[ScoreRecord]) -> Result<String> {
    Ok(lines_to_string(
        records.iter().map(score_record_line).collect::<Result<_>>()?,
    ))
}

pub fn pairs_jsonl(pairs: &[PreferencePair]) -> Result<String> {
    Ok(lines_to_string(pairs.iter().map(pair_line).collect::<Result<_>>()?))
}

fn field<'a>(v: &'a Value, key: &str, line: usize) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| {
        Error::InvalidArgument(format!("line {line}: missing field '{key}'"))
    })
}

fn real(v: &Value, key: &str, line: usize) -> Result<f64> {
    field(v, key, line)?
        .as_f64()
        .ok_or_else(|| Error::InvalidArgument(format!("line {line}: '{key}' is not a number")))
}

fn string(v: &Value, key: &str, line: usize) -> Result<String> {
    Ok(field(v, key, line)?
        .as_str()
        .ok_or_else(|| Error::InvalidArgument(format!("line {line}: '{key}' is not a string")))?
        .to_string())
}

fn attr_map(v: &Value, key: &str, line: usize) -> Result<BTreeMap<AttributeId, f64>> {
    let obj = field(v, key, line)?
        .as_object()
        .ok_or_else(|| Error::InvalidArgument(format!("line {line}: '{key}' is not an object")))?;
    obj.iter()
        .map(|(k, x)| {
            let val = x.as_f64().ok_or_else(|| {
                Error::InvalidArgument(format!("line {line}: '{key}.{k}' is not a number"))
            })?;
            Ok((AttributeId::new(k.clone())?, val))
        })
        .collect()
}

pub fn parse_score_records(text: &str) -> Result<Vec<ScoreRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line = i + 1;
            let v: Value = serde_json::from_str(l)?;
            Ok(ScoreRecord {
                id: string(&v, "id", line)?,
                energy: real(&v, "energy", line)?,
                gamma: real(&v, "gamma", line)?,
                tau_raw: attr_map(&v, "tau_raw", line)?,
                tau: attr_map(&v, "tau", line)?,
            })
        })
        .collect()
}

pub fn parse_pairs(text: &str) -> Result<Vec<PreferencePair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line = i + 1;
            let v: Value = serde_json::from_str(l)?;
            Ok(PreferencePair {
                winner_id: string(&v, "winner", line)?,
                loser_id: string(&v, "loser", line)?,
                rho_w: real(&v, "rho_w", line)?,
                rho_l: real(&v, "rho_l", line)?,
                delta_rho: real(&v, "delta_rho", line)?,
            })
        })
        .collect()
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_real(0.1).unwrap(), "1.0000000000000001e-1");
        assert_eq!(fmt_real(-300.0).unwrap(), "-3.0000000000000000e2");
        assert!(fmt_real(f64::NAN).is_err());
        let x = 0.123_456_789_012_345_67_f64;
        assert_eq!(fmt_real(x).unwrap().parse::<f64>().unwrap(), x);
    }

    #[test]
    fn score_record_layout_and_round_trip() {
        let a = AttributeId::new("A").unwrap();
        let r = ScoreRecord {
            id: "c1".into(),
            energy: -0.25,
            gamma: 1.0,
            tau_raw: [(a.clone(), -0.5)].into(),
            tau: [(a, 0.0)].into(),
        };
        let line = score_record_line(&r).unwrap();
        assert_eq!(
            line,
            "{\"id\":\"c1\",\"energy\":-2.5000000000000000e-1,\"gamma\":1.0000000000000000e0,\
             \"tau_raw\":{\"A\":-5.0000000000000000e-1},\"tau\":{\"A\":0.0000000000000000e0}}"
        );
        let back = parse_score_records(&score_records_jsonl(&[r.clone()]).unwrap()).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn pair_layout_and_round_trip() {
        let p = PreferencePair {
            winner_id: "a".into(),
            loser_id: "b".into(),
            rho_w: 1.5,
            rho_l: 0.25,
            delta_rho: 1.25,
        };
        let text = pairs_jsonl(&[p.clone()]).unwrap();
        assert!(text.starts_with("{\"winner\":\"a\",\"loser\":\"b\",\"rho_w\":"));
        assert_eq!(parse_pairs(&text).unwrap(), vec![p]);
    }
}
