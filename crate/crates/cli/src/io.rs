//! CSV reading and writing. Floats are written with 17 significant digits so
//! every value parses back to the identical `f64`.

use std::path::Path;

use crate::error::CliError;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// `%.{digits}g`-style formatting: fixed notation for moderate exponents,
/// scientific otherwise, trailing zeros removed.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// A numeric table: optional header and rows of equal width.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericTable {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
}

impl NumericTable {
    /// Indices of the columns whose header starts with `prefix`, or every
    /// column when there is no header or no match.
    pub fn columns_with_prefix(&self, prefix: &str) -> Vec<usize> {
        let width = self.header.as_ref().map(Vec::len).or_else(|| self.rows.first().map(Vec::len)).unwrap_or(0);
        let picked: Vec<usize> = match &self.header {
            Some(h) => h.iter().enumerate().filter(|(_, n)| n.starts_with(prefix)).map(|(i, _)| i).collect(),
            None => Vec::new(),
        };
        if picked.is_empty() {
            (0..width).collect()
        } else {
            picked
        }
    }
}

/// Parses a numeric CSV. A first record containing a non-numeric field is a
/// header; any later non-numeric field or ragged row is a usage error naming
/// the 1-based line.
pub fn read_numeric_csv(path: &Path) -> Result<NumericTable, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| CliError::Usage(format!("{}: row {line}: {e}", path.display())))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => {
                if let Some(first) = rows.first() {
                    if first.len() != v.len() {
                        return Err(CliError::Usage(format!(
                            "{}: row {line}: expected {} fields, found {}",
                            path.display(),
                            first.len(),
                            v.len()
                        )));
                    }
                }
                rows.push(v);
            }
            Err(_) if i == 0 => header = Some(rec.iter().map(str::to_string).collect()),
            Err(_) => {
                let bad = rec.iter().find(|f| f.parse::<f64>().is_err()).unwrap_or_default();
                return Err(CliError::Usage(format!("{}: row {line}: not a number: {bad:?}", path.display())));
            }
        }
    }
    Ok(NumericTable { header, rows })
}

/// Comma-separated list of numbers, e.g. `"1,2.5,3"`.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|_| CliError::Usage(format!("invalid {what} entry {t:?}"))))
        .collect()
}
