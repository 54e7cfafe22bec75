//! The interaction CSV format.
//!
//! One question-level interaction per row:
//!
//! ```text
//! student_id,question_id,kc_ids,response,timestamp
//! s001,17,3_12,1,1600000000
//! ```
//!
//! `kc_ids` joins the question's KC ids with `_`, `response` is `0` or `1`
//! and `timestamp` is an integer. Columns may appear in any order; missing
//! or unknown columns are schema errors.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use atdkt_core::data::RawInteraction;

pub const COLUMNS: [&str; 5] = [
    "student_id",
    "question_id",
    "kc_ids",
    "response",
    "timestamp",
];

pub fn load_interactions(path: &Path) -> Result<Vec<RawInteraction>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_interactions(file).with_context(|| format!("in {}", path.display()))
}

pub fn read_interactions<R: Read>(reader: R) -> Result<Vec<RawInteraction>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().context("unreadable header")?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Vec::new());
    }
    let mut index = [usize::MAX; 5];
    for (i, h) in headers.iter().enumerate() {
        let Some(c) = COLUMNS.iter().position(|&c| c == h) else {
            bail!(
                "line 1: unknown column `{h}`; expected {}",
                COLUMNS.join(",")
            );
        };
        if index[c] != usize::MAX {
            bail!("line 1: duplicate column `{h}`");
        }
        index[c] = i;
    }
    if let Some(c) = index.iter().position(|&i| i == usize::MAX) {
        bail!("line 1: missing column `{}`", COLUMNS[c]);
    }

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.context("malformed row")?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| rec.get(index[c]).unwrap_or("");
        let row = parse_row(field(0), field(1), field(2), field(3), field(4))
            .with_context(|| format!("line {line}"))?;
        out.push(row);
    }
    Ok(out)
}

fn parse_row(
    student: &str,
    question: &str,
    kcs: &str,
    response: &str,
    timestamp: &str,
) -> Result<RawInteraction> {
    if student.is_empty() {
        bail!("empty student_id");
    }
    let question: usize = question
        .parse()
        .map_err(|_| anyhow!("bad question_id `{question}`"))?;
    let kc_ids = kcs
        .split('_')
        .map(|k| {
            k.parse::<usize>()
                .map_err(|_| anyhow!("bad kc_ids `{kcs}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = match response {
        "1" => true,
        "0" => false,
        other => bail!("response must be 0 or 1, got `{other}`"),
    };
    let timestamp: i64 = timestamp
        .parse()
        .map_err(|_| anyhow!("bad timestamp `{timestamp}`"))?;
    Ok(RawInteraction::new(
        student, question, kc_ids, correct, timestamp,
    )?)
}

pub fn write_interactions<W: Write>(writer: W, rows: &[RawInteraction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COLUMNS)?;
    for r in rows {
        let kcs: Vec<String> = r.kc_ids.iter().map(|k| k.to_string()).collect();
        w.write_record([
            r.student_id.clone(),
            r.question_id.to_string(),
            kcs.join("_"),
            (r.correct as u8).to_string(),
            r.timestamp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_interactions(path: &Path, rows: &[RawInteraction]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    write_interactions(file, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<RawInteraction>> {
        read_interactions(text.as_bytes())
    }

    #[test]
    fn round_trip() {
        let text = "student_id,question_id,kc_ids,response,timestamp\na,3,2_0,1,10\nb,0,1,0,-4\n";
        let rows = parse(text).unwrap();
        assert_eq!(
            rows[0],
            RawInteraction::new("a", 3, [0, 2], true, 10).unwrap()
        );
        assert_eq!(
            rows[1],
            RawInteraction::new("b", 0, [1], false, -4).unwrap()
        );
        let mut buf = Vec::new();
        write_interactions(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text.replace("2_0", "0_2"));
    }

    #[test]
    fn column_order_is_free() {
        let rows = parse("response,timestamp,kc_ids,question_id,student_id\n0,5,4,2,x\n").unwrap();
        assert_eq!(rows[0], RawInteraction::new("x", 2, [4], false, 5).unwrap());
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("student_id,question_id,kc_ids,response,timestamp\n")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn schema_errors_name_the_line() {
        let e = parse("student_id,question_id,kc_ids,response,timestamp,extra\n").unwrap_err();
        assert!(format!("{e:#}").contains("unknown column `extra`"));
        let e = parse("student_id,question_id,kc_ids,response\n").unwrap_err();
        assert!(format!("{e:#}").contains("missing column `timestamp`"));
        let e = parse("student_id,question_id,kc_ids,response,timestamp\na,1,1,1,1\na,1,1,2,2\n")
            .unwrap_err();
        assert!(format!("{e:#}").contains("line 3"), "{e:#}");
        let e = parse("student_id,question_id,kc_ids,response,timestamp\na,1,,1,1\n").unwrap_err();
        assert!(format!("{e:#}").contains("bad kc_ids"));
    }
}
