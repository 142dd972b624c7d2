//! Flat float dumps to EMB1.
//!
//! Accepted inputs:
//! - CSV, one row per line as `id,v1,...,vd`. Blank lines and `#` comments are
//!   skipped, and a first line whose second field is not a number is treated
//!   as a header.
//! - Raw little-endian f32 (`--dim` required), with row ids from `--ids` (one
//!   per line) or `row-<i>`.
//! - `.npy` arrays of shape (N, d), dtype `<f4` or `<f8`, C order.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use refine_core::EmbeddingTable;

use crate::error::{CliError, CliResult};
use crate::files::save_table;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    F32,
    Npy,
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "f32" | "raw" => Ok(Self::F32),
            "npy" => Ok(Self::Npy),
            _ => Err(format!("unknown input format {s:?} (expected csv, f32 or npy)")),
        }
    }
}

pub struct ConvertArgs {
    pub input: PathBuf,
    pub format: Option<InputFormat>,
    pub dim: Option<usize>,
    pub ids: Option<PathBuf>,
    pub out: PathBuf,
}

fn guess_format(path: &Path) -> Option<InputFormat> {
    match path.extension()?.to_str()? {
        "csv" => Some(InputFormat::Csv),
        "npy" => Some(InputFormat::Npy),
        "f32" | "bin" | "raw" => Some(InputFormat::F32),
        _ => None,
    }
}

fn parse_csv(path: &Path, text: &str) -> CliResult<(usize, Vec<f32>, Vec<String>)> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut ids = Vec::new();
    let mut first = true;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let id = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        let parsed: Result<Vec<f32>, _> = values.iter().map(|v| v.parse::<f32>()).collect();
        let parsed = match parsed {
            Ok(v) => v,
            Err(_) if first => {
                first = false;
                continue;
            }
            Err(e) => return Err(CliError::data_at(path, format!("line {}: {e}", lineno + 1))),
        };
        first = false;
        match dim {
            None => dim = Some(parsed.len()),
            Some(d) if d != parsed.len() => {
                return Err(CliError::data_at(
                    path,
                    format!("line {}: {} values, expected {d}", lineno + 1, parsed.len()),
                ))
            }
            _ => {}
        }
        ids.push(id.to_string());
        data.extend(parsed);
    }
    let dim = dim.ok_or_else(|| CliError::data_at(path, "no data rows"))?;
    Ok((dim, data, ids))
}

fn parse_f32(path: &Path, bytes: &[u8], dim: usize) -> CliResult<Vec<f32>> {
    if dim == 0 {
        return Err(CliError::config("--dim must be >= 1"));
    }
    if bytes.len() % (4 * dim) != 0 {
        return Err(CliError::data_at(
            path,
            format!("{} bytes is not a whole number of {dim}-float rows", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find(',').unwrap_or(rest.len())
    };
    Some(rest[..end].trim())
}

fn parse_npy(path: &Path, bytes: &[u8]) -> CliResult<(usize, Vec<f32>)> {
    let bad = |m: &str| CliError::data_at(path, format!("not a supported .npy file: {m}"));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("missing magic"));
    }
    let (header_len, offset) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12),
        _ => return Err(bad("unknown version")),
    };
    let header = bytes
        .get(offset..offset + header_len)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad("truncated header"))?;
    let descr = header_value(header, "descr").ok_or_else(|| bad("no descr"))?.trim_matches('\'');
    if header_value(header, "fortran_order") != Some("False") {
        return Err(bad("only C order is supported"));
    }
    let shape: Vec<usize> = header_value(header, "shape")
        .ok_or_else(|| bad("no shape"))?
        .trim_matches(|c| c == '(' || c == ')')
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("bad shape"))?;
    let [n, d] = shape[..] else {
        return Err(bad("array must be 2-D"));
    };
    let body = &bytes[offset + header_len..];
    let data: Vec<f32> = match descr {
        "<f4" => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        "<f8" => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
        other => return Err(bad(&format!("dtype {other}"))),
    };
    if data.len() != n * d {
        return Err(bad(&format!("expected {} values, found {}", n * d, data.len())));
    }
    Ok((d, data))
}

fn read_ids(path: &Path, count: usize) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data_at(path, e))?;
    let ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if ids.len() != count {
        return Err(CliError::data_at(path, format!("{} ids for {count} rows", ids.len())));
    }
    Ok(ids)
}

/// `refine-kit convert`. Returns the written table.
pub fn cmd_convert(args: &ConvertArgs) -> CliResult<EmbeddingTable> {
    let format = args
        .format
        .or_else(|| guess_format(&args.input))
        .ok_or_else(|| CliError::config("cannot infer input format; pass --format"))?;
    let bytes = fs::read(&args.input).map_err(|e| CliError::data_at(&args.input, e))?;
    let (dim, data, ids) = match format {
        InputFormat::Csv => {
            let text = String::from_utf8(bytes).map_err(|e| CliError::data_at(&args.input, e))?;
            parse_csv(&args.input, &text)?
        }
        InputFormat::F32 | InputFormat::Npy => {
            let (dim, data) = if format == InputFormat::F32 {
                let dim = args.dim.ok_or_else(|| CliError::config("raw f32 input needs --dim"))?;
                (dim, parse_f32(&args.input, &bytes, dim)?)
            } else {
                parse_npy(&args.input, &bytes)?
            };
            let count = if dim == 0 { 0 } else { data.len() / dim };
            let ids = match &args.ids {
                Some(p) => read_ids(p, count)?,
                None => (0..count).map(|i| format!("row-{i}")).collect(),
            };
            (dim, data, ids)
        }
    };
    if let Some(d) = args.dim {
        if d != dim {
            return Err(CliError::data_at(&args.input, format!("found d={dim} but --dim {d}")));
        }
    }
    let table = EmbeddingTable::new(dim, data, ids).map_err(|e| CliError::data_at(&args.input, e))?;
    save_table(&args.out, &table)?;
    Ok(table)
}
