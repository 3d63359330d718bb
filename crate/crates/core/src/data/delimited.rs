use std::path::Path;

use super::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::estimator::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderMode {
    /// Treat the first row as a header when any of its cells is not a number.
    Auto,
    Present,
    Absent,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Label column indices; negative values count from the end (`-1` is the
    /// last column).
    pub label_columns: Vec<i64>,
    pub delimiter: u8,
    pub header: HeaderMode,
    /// For classification, exactly one label column holding class ids
    /// `0..n_classes`, expanded to one-hot rows.
    pub task: Task,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            label_columns: vec![-1],
            delimiter: b',',
            header: HeaderMode::Auto,
            task: Task::Regression,
        }
    }
}

/// Parse a rectangular numeric table. Numbers use `.` as the decimal
/// separator regardless of locale.
pub fn load_delimited(path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(0, format!("cannot read file: {e}")))?;

    let mut width: Option<usize> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut first = true;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let parsed: Vec<Option<f64>> = rec.iter().map(|c| c.parse::<f64>().ok()).collect();
        if first {
            first = false;
            let is_header = match opts.header {
                HeaderMode::Present => true,
                HeaderMode::Absent => false,
                HeaderMode::Auto => parsed.iter().any(Option::is_none),
            };
            if is_header {
                width = Some(rec.len());
                continue;
            }
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(parse_err(line, format!("expected {w} columns, found {}", rec.len())));
        }
        let mut row = Vec::with_capacity(w);
        for (c, v) in parsed.into_iter().enumerate() {
            match v {
                Some(x) if x.is_finite() => row.push(x),
                _ => {
                    return Err(parse_err(
                        line,
                        format!("column {}: {:?} is not a finite number", c + 1, &rec[c]),
                    ))
                }
            }
        }
        rows.push(row);
    }
    let width = width.ok_or_else(|| parse_err(0, "no rows".into()))?;
    if rows.is_empty() {
        return Err(parse_err(0, "no data rows".into()));
    }

    let mut labels: Vec<usize> = Vec::new();
    for &c in &opts.label_columns {
        let idx = if c < 0 { width as i64 + c } else { c };
        if idx < 0 || idx >= width as i64 {
            return Err(parse_err(0, format!("label column {c} out of range for {width} columns")));
        }
        if labels.contains(&(idx as usize)) {
            return Err(parse_err(0, format!("label column {c} given twice")));
        }
        labels.push(idx as usize);
    }
    if labels.is_empty() || labels.len() >= width {
        return Err(parse_err(0, "need at least one label and one input column".into()));
    }
    let inputs_idx: Vec<usize> = (0..width).filter(|c| !labels.contains(c)).collect();

    let n = rows.len();
    let mut x = Vec::with_capacity(n * inputs_idx.len());
    let mut y = Vec::with_capacity(n * labels.len());
    for r in &rows {
        x.extend(inputs_idx.iter().map(|&c| r[c]));
        y.extend(labels.iter().map(|&c| r[c]));
    }
    let inputs = Matrix::new(n, inputs_idx.len(), x)?;
    match opts.task {
        Task::Regression => Dataset::new(inputs, Matrix::new(n, labels.len(), y)?, Task::Regression),
        Task::Classification => {
            if labels.len() != 1 {
                return Err(parse_err(0, "classification takes exactly one label column".into()));
            }
            let mut classes = Vec::with_capacity(n);
            for (i, &v) in y.iter().enumerate() {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(parse_err(0, format!("data row {}: class {v} is not a non-negative integer", i + 1)));
                }
                classes.push(v as usize);
            }
            let k = classes.iter().max().map_or(0, |m| m + 1);
            Dataset::from_classes(inputs, &classes, k)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn last_column_is_label() {
        let f = file("1,2,3\n4,5,6\n7,8,9\n");
        let d = load_delimited(f.path(), &LoadOptions::default()).unwrap();
        assert_eq!((d.inputs.rows(), d.inputs.cols()), (3, 2));
        assert_eq!((d.labels.rows(), d.labels.cols()), (3, 1));
        assert_eq!(d.labels.data(), &[3.0, 6.0, 9.0]);
        assert_eq!(d.inputs.row(1), &[4.0, 5.0]);
    }

    #[test]
    fn header_detection_and_delimiters() {
        let f = file("a;b;y\n1.5;-2e-1;0\n3;4;1\n");
        let opts = LoadOptions {
            delimiter: b';',
            ..LoadOptions::default()
        };
        let d = load_delimited(f.path(), &opts).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.inputs.row(0), &[1.5, -0.2]);
        let absent = LoadOptions { header: HeaderMode::Absent, ..opts };
        assert!(matches!(load_delimited(f.path(), &absent), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn multiple_label_columns() {
        let f = file("1,2,3,4\n5,6,7,8\n");
        let opts = LoadOptions {
            label_columns: vec![-2, -1],
            ..LoadOptions::default()
        };
        let d = load_delimited(f.path(), &opts).unwrap();
        assert_eq!(d.labels.row(1), &[7.0, 8.0]);
        assert_eq!(d.inputs.row(1), &[5.0, 6.0]);
    }

    #[test]
    fn reports_line_numbers() {
        let f = file("1,2,3\n4,5\n");
        match load_delimited(f.path(), &LoadOptions::default()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("columns"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let f = file("1,2,3\n4,x,6\n");
        assert!(matches!(load_delimited(f.path(), &LoadOptions::default()), Err(Error::Parse { line: 2, .. })));
        assert!(load_delimited(Path::new("/nonexistent/file.csv"), &LoadOptions::default()).is_err());
    }

    #[test]
    fn classification_labels_become_one_hot() {
        let f = file("0.1,0.2,2\n0.3,0.4,0\n");
        let opts = LoadOptions {
            task: Task::Classification,
            ..LoadOptions::default()
        };
        let d = load_delimited(f.path(), &opts).unwrap();
        assert_eq!(d.labels.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(d.class_of(1), 0);
    }

    #[test]
    fn laboratory_tables_load_with_expected_dimensions() {
        // A stand-in shaped like the 118-column music-origin table: 116
        // features followed by latitude and longitude.
        let mut s = String::new();
        for i in 0..5 {
            let row: Vec<String> = (0..118).map(|c| format!("{}", (i * 118 + c) as f64 * 0.01)).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        let f = file(&s);
        let opts = LoadOptions {
            label_columns: vec![-2, -1],
            ..LoadOptions::default()
        };
        let d = load_delimited(f.path(), &opts).unwrap();
        assert_eq!(d.input_dim(), 116);
        assert_eq!(d.label_dim(), 2);
    }
}
