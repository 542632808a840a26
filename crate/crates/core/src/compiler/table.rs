//! Tab-delimited table files with a fixed header row.

use crate::report::{Finding, FindingCode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    /// 1-based line number in the file.
    pub line: usize,
    pub cells: Vec<String>,
}

impl Row {
    pub fn get(&self, i: usize) -> &str {
        self.cells.get(i).map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    /// Decodes UTF-8, splits lines (accepting CRLF) and tabs, trims cells,
    /// skips blank lines. A leading BOM is ignored.
    pub fn parse(name: &str, bytes: &[u8]) -> Result<Table, Finding> {
        let text = std::str::from_utf8(bytes).map_err(|e| {
            Finding::error(FindingCode::InvalidEncoding, name, format!("table is not valid UTF-8 (byte {})", e.valid_up_to()))
        })?;
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
        let header = match lines.next() {
            Some((_, l)) if !l.trim().is_empty() => split(l),
            _ => {
                return Err(Finding::error(FindingCode::MalformedHeader, name, "missing header row").at_row(1));
            }
        };
        let rows = lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(line, l)| Row { line, cells: split(l) })
            .collect();
        Ok(Table { name: name.to_owned(), header, rows })
    }

    /// Exact header match, or a finding describing the first difference.
    pub fn expect_header(&self, expected: &[String]) -> Result<(), Finding> {
        if self.header == expected {
            return Ok(());
        }
        Err(Finding::error(
            FindingCode::MalformedHeader,
            &self.name,
            format!("expected header [{}], found [{}]", expected.join(", "), self.header.join(", ")),
        )
        .at_row(1))
    }

    /// Rows whose cell count differs from the header are reported and
    /// dropped.
    pub fn well_formed_rows(&self, findings: &mut Vec<Finding>) -> Vec<&Row> {
        let width = self.header.len();
        self.rows
            .iter()
            .filter(|row| {
                if row.cells.len() == width {
                    true
                } else {
                    findings.push(
                        Finding::error(
                            FindingCode::MalformedRow,
                            &self.name,
                            format!("expected {width} cells, found {}", row.cells.len()),
                        )
                        .at_row(row.line),
                    );
                    false
                }
            })
            .collect()
    }
}

fn split(line: &str) -> Vec<String> {
    line.split('\t').map(|c| c.trim().to_owned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows_with_line_numbers() {
        let t = Table::parse("pages", b"page\ttitle:en\r\n1\tIntro\n\n2\t Next \n").unwrap();
        assert_eq!(t.header, vec!["page", "title:en"]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[1].line, 4);
        assert_eq!(t.rows[1].get(1), "Next");
        assert_eq!(t.rows[1].get(9), "");
    }

    #[test]
    fn rejects_bad_encoding_and_empty() {
        assert_eq!(Table::parse("x", &[0xff, 0xfe, 0x00]).unwrap_err().code, FindingCode::InvalidEncoding);
        assert_eq!(Table::parse("x", b"").unwrap_err().code, FindingCode::MalformedHeader);
        assert_eq!(Table::parse("x", b"\n\n").unwrap_err().code, FindingCode::MalformedHeader);
    }

    #[test]
    fn header_and_width_checks() {
        let t = Table::parse("x", b"a\tb\n1\t2\n1\n1\t2\t3\n").unwrap();
        assert!(t.expect_header(&["a".into(), "b".into()]).is_ok());
        assert!(t.expect_header(&["a".into()]).is_err());
        let mut findings = Vec::new();
        assert_eq!(t.well_formed_rows(&mut findings).len(), 1);
        assert_eq!(findings.len(), 2);
        assert_eq!(findings[0].row, Some(3));
    }
}
