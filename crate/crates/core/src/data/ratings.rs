use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use super::InteractionSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingsFormat {
    /// `UserID::MovieID::Rating::Timestamp`, as in MovieLens `ratings.dat`.
    MovielensDat,
    /// Header `user_id,item_id,rating[,timestamp]`.
    Csv,
}

impl RatingsFormat {
    /// `.dat` files are MovieLens, anything else is CSV.
    pub fn from_path(path: &std::path::Path) -> RatingsFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("dat") => RatingsFormat::MovielensDat,
            _ => RatingsFormat::Csv,
        }
    }
}

impl FromStr for RatingsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens_dat" | "dat" => Ok(RatingsFormat::MovielensDat),
            "csv" => Ok(RatingsFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown ratings format {other:?}"))),
        }
    }
}

fn parse_error(line: usize, text: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        text: text.to_owned(),
        message: message.into(),
    }
}

pub fn parse_ratings<R: Read>(source: R, format: RatingsFormat) -> Result<InteractionSet> {
    let mut reader = BufReader::new(source);
    let mut set = InteractionSet::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    let mut has_timestamp_column = false;
    let mut saw_header = false;

    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| parse_error(line_no + 1, "", format!("read failed: {e}")))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line = std::str::from_utf8(&buf)
            .map_err(|_| parse_error(line_no, &String::from_utf8_lossy(&buf), "invalid UTF-8"))?
            .trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }

        let fields: Vec<&str> = match format {
            RatingsFormat::MovielensDat => line.split("::").collect(),
            RatingsFormat::Csv => line.split(',').map(str::trim).collect(),
        };

        if format == RatingsFormat::Csv && !saw_header {
            saw_header = true;
            match fields.as_slice() {
                ["user_id", "item_id", "rating"] => {}
                ["user_id", "item_id", "rating", "timestamp"] => has_timestamp_column = true,
                _ => {
                    return Err(parse_error(
                        line_no,
                        line,
                        "expected header user_id,item_id,rating[,timestamp]",
                    ))
                }
            }
            continue;
        }

        let expected: &[usize] = match format {
            RatingsFormat::MovielensDat => &[3, 4],
            RatingsFormat::Csv if has_timestamp_column => &[4],
            RatingsFormat::Csv => &[3],
        };
        if !expected.contains(&fields.len()) {
            return Err(parse_error(
                line_no,
                line,
                format!("expected {:?} fields, found {}", expected, fields.len()),
            ));
        }
        let rating: f64 = fields[2]
            .parse()
            .map_err(|_| parse_error(line_no, line, "rating is not a number"))?;
        if !rating.is_finite() {
            return Err(parse_error(line_no, line, "rating is not finite"));
        }
        let timestamp = match fields.get(3) {
            Some(ts) if !ts.is_empty() => Some(
                ts.parse::<i64>()
                    .map_err(|_| parse_error(line_no, line, "timestamp is not an integer"))?,
            ),
            _ => None,
        };
        set.push(fields[0], fields[1], rating, timestamp, line_no)?;
    }
    Ok(set)
}

pub fn write_ratings<W: Write>(set: &InteractionSet, format: RatingsFormat, mut out: W) -> std::io::Result<()> {
    let with_ts = set.records().iter().any(|r| r.timestamp.is_some());
    match format {
        RatingsFormat::Csv => {
            if with_ts {
                writeln!(out, "user_id,item_id,rating,timestamp")?;
            } else {
                writeln!(out, "user_id,item_id,rating")?;
            }
            for r in set.records() {
                write!(out, "{},{},{}", r.user_id, r.item_id, r.rating)?;
                if with_ts {
                    match r.timestamp {
                        Some(ts) => write!(out, ",{ts}")?,
                        None => write!(out, ",")?,
                    }
                }
                writeln!(out)?;
            }
        }
        RatingsFormat::MovielensDat => {
            for r in set.records() {
                write!(out, "{}::{}::{}", r.user_id, r.item_id, r.rating)?;
                if let Some(ts) = r.timestamp {
                    write!(out, "::{ts}")?;
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}
