//! CSV input and output for the three data layouts.
//!
//! * univariate: `y,variance`
//! * diagnostic accuracy: `tp,fp,fn,tn` or `yA,yB,vA,vB`
//! * network, arm level: `study,treatment,events,n`
//! * network, contrast level: `study,treatments,y,S` where the list fields
//!   are `;`-separated and `S` is row-major.
//!
//! Headers are matched case-insensitively and columns may appear in any
//! order. Parse errors carry the 1-based line number of the offending row.

use std::io::{Read, Write};

use csv::{ReaderBuilder, StringRecord, WriterBuilder};

use crate::bivariate::{DtaData, DtaStudy};
use crate::error::{Error, Result};
use crate::network::{ArmRecord, ContrastStudy};
use crate::univariate::UnivariateData;

/// Diagnostic-accuracy input after conversion to logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DtaInput {
    pub data: DtaData,
    /// Tables that received the 0.5 zero-cell correction.
    pub zero_cell_corrections: usize,
}

/// Network input in either layout.
#[derive(Debug, Clone, PartialEq)]
pub enum NetworkInput {
    Arms(Vec<ArmRecord>),
    Contrasts(Vec<ContrastStudy>),
}

struct Table {
    context: &'static str,
    header: Vec<String>,
    rows: Vec<(u64, StringRecord)>,
}

impl Table {
    fn read<R: Read>(reader: R, context: &'static str) -> Result<Self> {
        let mut rdr = ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| parse_error(context, 1, e.to_string()))?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_error(context, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        if rows.is_empty() {
            return Err(parse_error(context, 2, "no data rows"));
        }
        Ok(Table {
            context,
            header,
            rows,
        })
    }

    fn has(&self, names: &[&str]) -> bool {
        names.iter().all(|n| self.header.iter().any(|h| h == n))
    }

    fn columns(&self, names: &[&str]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.header.iter().position(|h| h == n).ok_or_else(|| {
                    parse_error(self.context, 1, format!("missing column '{n}'"))
                })
            })
            .collect()
    }

    fn number(&self, line: u64, rec: &StringRecord, col: usize) -> Result<f64> {
        let field = rec.get(col).unwrap_or("");
        let v: f64 = field.parse().map_err(|_| {
            parse_error(
                self.context,
                line,
                format!("'{field}' in column '{}' is not a number", self.header[col]),
            )
        })?;
        if !v.is_finite() {
            return Err(parse_error(self.context, line, format!("'{field}' is not finite")));
        }
        Ok(v)
    }

    fn count(&self, line: u64, rec: &StringRecord, col: usize) -> Result<f64> {
        let v = self.number(line, rec, col)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(parse_error(
                self.context,
                line,
                format!("column '{}' needs a nonnegative integer", self.header[col]),
            ));
        }
        Ok(v)
    }

    fn list(&self, line: u64, rec: &StringRecord, col: usize) -> Result<Vec<f64>> {
        rec.get(col)
            .unwrap_or("")
            .split(';')
            .map(|s| {
                s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    parse_error(
                        self.context,
                        line,
                        format!("'{s}' in column '{}' is not a number", self.header[col]),
                    )
                })
            })
            .collect()
    }
}

fn parse_error(context: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.to_string(),
        line,
        message: message.into(),
    }
}

fn at_line<T>(context: &str, line: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidInput(m) | Error::Numerical(m) => parse_error(context, line, m),
        other => other,
    })
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::InvalidInput(format!("{other:?}")),
    }
}

pub fn read_univariate<R: Read>(reader: R) -> Result<UnivariateData> {
    let t = Table::read(reader, "univariate input")?;
    let cols = t.columns(&["y", "variance"])?;
    let (mut y, mut v) = (Vec::new(), Vec::new());
    for (line, rec) in &t.rows {
        y.push(t.number(*line, rec, cols[0])?);
        let var = t.number(*line, rec, cols[1])?;
        if var <= 0.0 {
            return Err(parse_error(t.context, *line, "variance must be positive"));
        }
        v.push(var);
    }
    at_line(t.context, t.rows[0].0, UnivariateData::new(y, v))
}

pub fn write_univariate<W: Write>(writer: W, data: &UnivariateData) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(writer);
    w.write_record(["y", "variance"]).map_err(csv_error)?;
    for (y, v) in data.y().iter().zip(data.sigma2()) {
        w.write_record([y.to_string(), v.to_string()]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads either counts (`tp,fp,fn,tn`) or logit summaries (`ya,yb,va,vb`),
/// chosen by the header.
pub fn read_dta<R: Read>(reader: R) -> Result<DtaInput> {
    let t = Table::read(reader, "diagnostic accuracy input")?;
    let mut studies = Vec::with_capacity(t.rows.len());
    let mut corrections = 0;
    if t.has(&["tp", "fp", "fn", "tn"]) {
        let c = t.columns(&["tp", "fp", "fn", "tn"])?;
        for (line, rec) in &t.rows {
            let v: Vec<f64> = c.iter().map(|&j| t.count(*line, rec, j)).collect::<Result<_>>()?;
            let (study, corrected) = at_line(t.context, *line, DtaStudy::from_counts(v[0], v[1], v[2], v[3]))?;
            corrections += usize::from(corrected);
            studies.push(study);
        }
    } else if t.has(&["ya", "yb", "va", "vb"]) {
        let c = t.columns(&["ya", "yb", "va", "vb"])?;
        for (line, rec) in &t.rows {
            let v: Vec<f64> = c.iter().map(|&j| t.number(*line, rec, j)).collect::<Result<_>>()?;
            studies.push(at_line(t.context, *line, DtaStudy::new(v[0], v[1], v[2], v[3]))?);
        }
    } else {
        return Err(parse_error(
            t.context,
            1,
            "expected columns tp,fp,fn,tn or yA,yB,vA,vB",
        ));
    }
    Ok(DtaInput {
        data: at_line(t.context, t.rows[0].0, DtaData::new(studies))?,
        zero_cell_corrections: corrections,
    })
}

/// Writes the logit summary layout.
pub fn write_dta<W: Write>(writer: W, data: &DtaData) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(writer);
    w.write_record(["yA", "yB", "vA", "vB"]).map_err(csv_error)?;
    for s in data.studies() {
        w.write_record([s.ya, s.yb, s.va, s.vb].map(|v| v.to_string()))
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads arm-level or contrast-level network data, chosen by the header.
pub fn read_network<R: Read>(reader: R) -> Result<NetworkInput> {
    let t = Table::read(reader, "network input")?;
    if t.has(&["study", "treatment", "events", "n"]) {
        let c = t.columns(&["study", "treatment", "events", "n"])?;
        let mut arms = Vec::with_capacity(t.rows.len());
        for (line, rec) in &t.rows {
            let study = t.count(*line, rec, c[0])? as u64;
            let treatment = t.count(*line, rec, c[1])? as usize;
            let events = t.count(*line, rec, c[2])?;
            let n = t.count(*line, rec, c[3])?;
            if n == 0.0 || events > n {
                return Err(parse_error(t.context, *line, "need 0 <= events <= n and n > 0"));
            }
            arms.push(ArmRecord {
                study,
                treatment,
                events,
                n,
            });
        }
        Ok(NetworkInput::Arms(arms))
    } else if t.has(&["study", "treatments", "y", "s"]) {
        let c = t.columns(&["study", "treatments", "y", "s"])?;
        let mut studies = Vec::with_capacity(t.rows.len());
        for (line, rec) in &t.rows {
            let treatments: Vec<usize> = t
                .list(*line, rec, c[1])?
                .into_iter()
                .map(|v| {
                    if v >= 1.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(parse_error(t.context, *line, "treatment ids must be positive integers"))
                    }
                })
                .collect::<Result<_>>()?;
            let y = t.list(*line, rec, c[2])?;
            let flat = t.list(*line, rec, c[3])?;
            let m = treatments.len();
            if y.len() != m || flat.len() != m * m {
                return Err(parse_error(
                    t.context,
                    *line,
                    format!("{m} treatments need {m} contrasts and {} covariance entries", m * m),
                ));
            }
            let s = flat.chunks(m).map(<[f64]>::to_vec).collect();
            studies.push(at_line(t.context, *line, ContrastStudy::new(treatments, y, s))?);
        }
        Ok(NetworkInput::Contrasts(studies))
    } else {
        Err(parse_error(
            t.context,
            1,
            "expected columns study,treatment,events,n or study,treatments,y,S",
        ))
    }
}

pub fn write_arms<W: Write>(writer: W, arms: &[ArmRecord]) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(writer);
    w.write_record(["study", "treatment", "events", "n"]).map_err(csv_error)?;
    for a in arms {
        w.write_record([
            a.study.to_string(),
            a.treatment.to_string(),
            a.events.to_string(),
            a.n.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes contrast-level data; studies are numbered from 1.
pub fn write_contrasts<W: Write>(writer: W, studies: &[ContrastStudy]) -> Result<()> {
    fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
        v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
    }
    let mut w = WriterBuilder::new().from_writer(writer);
    w.write_record(["study", "treatments", "y", "S"]).map_err(csv_error)?;
    for (i, s) in studies.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            join(&s.treatments),
            join(&s.y),
            join(s.s.iter().flatten()),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse_line(e: Error) -> u64 {
        match e {
            Error::Parse { line, .. } => line,
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn univariate_reads_any_column_order() {
        let d = read_univariate("variance,y\n0.1,0.5\n0.2,-0.3\n".as_bytes()).unwrap();
        assert_eq!(d.y(), &[0.5, -0.3]);
        assert_eq!(d.sigma2(), &[0.1, 0.2]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = read_univariate("y,variance\n0.1,0.2\n0.3,abc\n".as_bytes()).unwrap_err();
        assert_eq!(parse_line(e), 3);
        let e = read_univariate("y,variance\n0.1,0.2\n0.3,-1\n".as_bytes()).unwrap_err();
        assert_eq!(parse_line(e), 3);
        let e = read_univariate("y,var\n0.1,0.2\n".as_bytes()).unwrap_err();
        assert_eq!(parse_line(e), 1);
        let e = read_dta("tp,fp,fn,tn\n1,2,3,4\n5,6,7\n".as_bytes()).unwrap_err();
        assert_eq!(parse_line(e), 3);
        let e = read_network("study,treatment,events,n\n1,0,3,10\n1,1,12,10\n".as_bytes()).unwrap_err();
        assert_eq!(parse_line(e), 3);
        let e = read_network("study,treatments,y,S\n1,1;2,0.1,1;0;0;1\n".as_bytes()).unwrap_err();
        assert_eq!(parse_line(e), 2);
    }

    #[test]
    fn dta_layouts_are_detected() {
        let c = read_dta("TP,FP,FN,TN\n10,5,2,40\n8,0,4,30\n".as_bytes()).unwrap();
        assert_eq!(c.zero_cell_corrections, 1);
        assert!((c.data.studies()[0].ya - 5f64.ln()).abs() < 1e-15);
        assert!((c.data.studies()[1].yb - (30.5f64 / 0.5).ln()).abs() < 1e-12);
        let s = read_dta("yA,yB,vA,vB\n1,2,0.1,0.2\n0.5,1.5,0.3,0.1\n".as_bytes()).unwrap();
        assert_eq!(s.zero_cell_corrections, 0);
        assert_eq!(s.data.studies()[1].va, 0.3);
    }

    #[test]
    fn network_layouts_are_detected() {
        let arms = read_network("study,treatment,events,n\n1,0,3,10\n1,2,5,10\n".as_bytes()).unwrap();
        assert!(matches!(arms, NetworkInput::Arms(ref a) if a.len() == 2 && a[1].treatment == 2));
        let c = read_network("study,treatments,y,S\n1,1;3,0.1;0.4,0.5;0.2;0.2;0.6\n".as_bytes()).unwrap();
        let NetworkInput::Contrasts(c) = c else { panic!() };
        assert_eq!(c[0].treatments, vec![1, 3]);
        assert_eq!(c[0].s, vec![vec![0.5, 0.2], vec![0.2, 0.6]]);
    }

    fn finite() -> impl Strategy<Value = f64> {
        -1e3..1e3f64
    }

    fn positive() -> impl Strategy<Value = f64> {
        1e-4..1e2f64
    }

    proptest! {
        #[test]
        fn univariate_round_trip(rows in prop::collection::vec((finite(), positive()), 2..12)) {
            let (y, v): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
            let d = UnivariateData::new(y, v).unwrap();
            let mut buf = Vec::new();
            write_univariate(&mut buf, &d).unwrap();
            prop_assert_eq!(read_univariate(buf.as_slice()).unwrap(), d);
        }

        #[test]
        fn dta_round_trip(rows in prop::collection::vec((finite(), finite(), positive(), positive()), 2..10)) {
            let studies = rows.into_iter().map(|(a, b, c, d)| DtaStudy::new(a, b, c, d).unwrap()).collect();
            let d = DtaData::new(studies).unwrap();
            let mut buf = Vec::new();
            write_dta(&mut buf, &d).unwrap();
            prop_assert_eq!(read_dta(buf.as_slice()).unwrap().data, d);
        }

        #[test]
        fn arm_round_trip(rows in prop::collection::vec((0u64..50, 0usize..5, 0u32..100, 0u32..100), 1..20)) {
            let arms: Vec<ArmRecord> = rows
                .into_iter()
                .map(|(study, treatment, e, extra)| ArmRecord {
                    study,
                    treatment,
                    events: f64::from(e),
                    n: f64::from(e + extra + 1),
                })
                .collect();
            let mut buf = Vec::new();
            write_arms(&mut buf, &arms).unwrap();
            prop_assert_eq!(read_network(buf.as_slice()).unwrap(), NetworkInput::Arms(arms));
        }

        #[test]
        fn contrast_round_trip(
            rows in prop::collection::vec((prop::collection::vec(finite(), 1..4), positive(), 0.0..0.9f64), 1..8)
        ) {
            let studies: Vec<ContrastStudy> = rows
                .into_iter()
                .map(|(y, d, r)| {
                    let m = y.len();
                    let s = (0..m)
                        .map(|i| (0..m).map(|j| if i == j { d } else { r * d }).collect())
                        .collect();
                    ContrastStudy::new((1..=m).collect(), y, s).unwrap()
                })
                .collect();
            let mut buf = Vec::new();
            write_contrasts(&mut buf, &studies).unwrap();
            prop_assert_eq!(read_network(buf.as_slice()).unwrap(), NetworkInput::Contrasts(studies));
        }
    }
}
