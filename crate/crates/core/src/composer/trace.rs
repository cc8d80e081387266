use std::io::Write;

use super::objective::Phase;
use crate::detector::BBox;
use crate::error::Result;

/// One optimization iteration, recorded before the update is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: Phase,
    pub lr: f64,
    /// Weighted term values, in the objective's term order.
    pub terms: Vec<f64>,
    pub total: f64,
    pub best_total: f64,
    pub border_l1: Vec<f64>,
    pub bboxes: Vec<BBox>,
    /// The boxes were re-detected before this iteration.
    pub reeval: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    /// `key=value` lines written as `#` comments above the table.
    pub meta: Vec<(String, String)>,
    pub labels: Vec<String>,
    pub rows: Vec<TraceRow>,
}

fn bbox_cell(b: &BBox) -> String {
    format!("{}:{}:{}:{}", b.row, b.col, b.height, b.width)
}

impl Trace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for (k, v) in &self.meta {
            writeln!(out, "# {k}={v}")?;
        }
        let n_insets = self.rows.first().map_or(0, |r| r.border_l1.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = vec!["iteration".into(), "phase".into(), "lr".into()];
        header.extend(self.labels.iter().cloned());
        header.push("total".into());
        header.push("best_total".into());
        for k in 0..n_insets {
            header.push(format!("border_l1_{k}"));
        }
        for k in 0..n_insets {
            header.push(format!("bbox_{k}"));
        }
        header.push("reeval".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec: Vec<String> = vec![r.iteration.to_string(), r.phase.to_string(), r.lr.to_string()];
            rec.extend(r.terms.iter().map(f64::to_string));
            rec.push(r.total.to_string());
            rec.push(r.best_total.to_string());
            rec.extend(r.border_l1.iter().map(f64::to_string));
            rec.extend(r.bboxes.iter().map(bbox_cell));
            rec.push(u8::from(r.reeval).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let t = Trace {
            meta: vec![("mode".into(), "joint_refine".into())],
            labels: vec!["LA_inset0".into()],
            rows: vec![TraceRow {
                iteration: 0,
                phase: Phase::Inset(0),
                lr: 0.002,
                terms: vec![1.5],
                total: 1.5,
                best_total: 1.5,
                border_l1: vec![0.25],
                bboxes: vec![BBox::new(1, 2, 3, 4)],
                reeval: false,
            }],
        };
        let s = t.to_csv_string().unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# mode=joint_refine");
        assert_eq!(
            lines[1],
            "iteration,phase,lr,LA_inset0,total,best_total,border_l1_0,bbox_0,reeval"
        );
        assert_eq!(lines[2], "0,inset0,0.002,1.5,1.5,1.5,0.25,1:2:3:4,0");
    }
}
