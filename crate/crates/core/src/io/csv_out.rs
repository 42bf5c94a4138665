use std::path::Path;

/// Writes an RFC 4180 CSV file. Numbers should be formatted with `Display`,
/// which prints the shortest string that parses back to the same value.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), csv::Error> {
    let bytes = csv_bytes(header, rows)?;
    super::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn csv_bytes<S: AsRef<str>>(header: &[S], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(header.iter().map(|h| h.as_ref()))?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// Numeric matrix with a generated header (`prefix0, prefix1, ...`) after
/// the given leading columns.
pub fn matrix_rows<T: ToString>(rows: &[Vec<T>]) -> Vec<Vec<String>> {
    rows.iter().map(|r| r.iter().map(|v| v.to_string()).collect()).collect()
}
