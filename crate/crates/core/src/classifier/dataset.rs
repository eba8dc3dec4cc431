use std::io::{Read, Write};

use super::forest::Dataset;
use super::{stateful_features, ClassifierError};
use crate::session::{AttributeVector, StateLabel, NUM_ATTRIBUTES};

/// One labeled interval, with the session's previous true states.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSample {
    pub attrs: AttributeVector,
    /// Oldest first.
    pub past: Vec<StateLabel>,
    pub label: StateLabel,
}

/// CSV with columns `A1..A40`, `P1..Pn` (oldest past state first, empty
/// when the session is younger), `label`.
pub fn write_interval_csv<W: Write>(w: W, rows: &[IntervalSample], n_past: usize) -> Result<(), ClassifierError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=NUM_ATTRIBUTES).map(|i| format!("A{i}")).collect();
    header.extend((1..=n_past).map(|i| format!("P{i}")));
    header.push("label".into());
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec: Vec<String> = r.attrs.as_slice().iter().map(|v| v.to_string()).collect();
        let recent = &r.past[r.past.len().saturating_sub(n_past)..];
        rec.extend(std::iter::repeat_n(String::new(), n_past - recent.len()));
        rec.extend(recent.iter().map(|s| s.to_string()));
        rec.push(r.label.to_string());
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> ClassifierError {
    ClassifierError::BadDataset(e.to_string())
}

/// Reads the interval CSV; returns the rows and the number of past-state
/// columns.
pub fn read_interval_csv<R: Read>(r: R) -> Result<(Vec<IntervalSample>, usize), ClassifierError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let bad = |m: String| ClassifierError::BadDataset(m);
    for i in 0..NUM_ATTRIBUTES {
        if header.get(i) != Some(format!("A{}", i + 1).as_str()) {
            return Err(bad(format!("column {} should be A{}", i + 1, i + 1)));
        }
    }
    if header.get(header.len().wrapping_sub(1)) != Some("label") {
        return Err(bad("last column should be 'label'".into()));
    }
    let n_past = header.len() - NUM_ATTRIBUTES - 1;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let mut attrs = [0.0; NUM_ATTRIBUTES];
        for (i, a) in attrs.iter_mut().enumerate() {
            *a = rec[i].trim().parse().map_err(|_| bad(format!("row {}: A{} is not a number", line + 1, i + 1)))?;
        }
        let mut past = Vec::new();
        for j in 0..n_past {
            let cell = rec[NUM_ATTRIBUTES + j].trim();
            if !cell.is_empty() {
                past.push(cell.parse().map_err(|e: String| bad(format!("row {}: {e}", line + 1)))?);
            }
        }
        let label = rec[NUM_ATTRIBUTES + n_past].trim().parse().map_err(|e: String| bad(format!("row {}: {e}", line + 1)))?;
        rows.push(IntervalSample { attrs: AttributeVector(attrs), past, label });
    }
    Ok((rows, n_past))
}

pub fn stateless_dataset(rows: &[IntervalSample]) -> Dataset {
    let mut d = Dataset::default();
    for r in rows {
        d.push(r.attrs.as_slice().to_vec(), r.label);
    }
    d
}

/// Rows with a full history of `n` past states, encoded as one-hots.
pub fn stateful_dataset(rows: &[IntervalSample], label_space: &[StateLabel], n: usize) -> Dataset {
    let mut d = Dataset::default();
    for r in rows.iter().filter(|r| r.past.len() >= n) {
        d.push(stateful_features(r.attrs.as_slice(), &r.past, label_space, n), r.label);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut a = [0.0; NUM_ATTRIBUTES];
        a[0] = 1.5;
        a[39] = 1e-7;
        let rows = vec![
            IntervalSample { attrs: AttributeVector(a), past: vec![], label: StateLabel::HS },
            IntervalSample {
                attrs: AttributeVector([3.25; NUM_ATTRIBUTES]),
                past: vec![StateLabel::HS, StateLabel::MH, StateLabel::MH],
                label: StateLabel::SUE,
            },
        ];
        let mut buf = Vec::new();
        write_interval_csv(&mut buf, &rows, 2).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("A1,A2,"));
        assert!(text.lines().next().unwrap().ends_with("A40,P1,P2,label"));
        let (back, n) = read_interval_csv(&buf[..]).unwrap();
        assert_eq!(n, 2);
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1].past, vec![StateLabel::MH, StateLabel::MH]);
        assert_eq!(back[1].attrs, rows[1].attrs);
    }

    #[test]
    fn bad_header() {
        assert!(matches!(read_interval_csv("x,y\n1,2\n".as_bytes()), Err(ClassifierError::BadDataset(_))));
    }

    #[test]
    fn stateful_rows_need_full_history() {
        let rows = vec![
            IntervalSample { attrs: AttributeVector::default(), past: vec![StateLabel::HS], label: StateLabel::HS },
            IntervalSample {
                attrs: AttributeVector::default(),
                past: vec![StateLabel::HS, StateLabel::HS],
                label: StateLabel::MH,
            },
        ];
        let d = stateful_dataset(&rows, &[StateLabel::HS, StateLabel::MH], 2);
        assert_eq!(d.len(), 1);
        assert_eq!(d.x[0].len(), 44);
    }
}
