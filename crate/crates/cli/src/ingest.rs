//! Panel count data as CSV: `unit,time,S_native,I_native,S_invasive,I_invasive`
//! plus optional juvenile columns.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use panelpomp::panel::PanelDataset;
use panelpomp::pomp::Observation;

use crate::error::{io_err, CliError, CliResult};

pub const ADULT_LABELS: [&str; 4] = ["S_native", "I_native", "S_invasive", "I_invasive"];
pub const JUVENILE_LABELS: [&str; 2] = ["J_native", "J_invasive"];

/// Adult counts for the likelihood; juvenile counts, when present, are kept
/// apart for validation only.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestedPanel {
    pub data: PanelDataset,
    pub juveniles: Option<PanelDataset>,
}

fn data_err(line: u64, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("row {line}: {msg}"))
}

fn parse_count(cell: &str, label: &str, line: u64) -> CliResult<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() || cell == "NA" {
        return Ok(None);
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| data_err(line, format!("`{label}` = `{cell}` is not a number")))?;
    if !(v >= 0.0 && v.fract() == 0.0 && v.is_finite()) {
        return Err(data_err(line, format!("`{label}` = {cell} is not a non-negative integer count")));
    }
    Ok(Some(v))
}

pub fn read_panel_csv(reader: impl Read) -> CliResult<IngestedPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 || header[0] != "unit" || header[1] != "time" {
        return Err(CliError::Data("header must start with `unit,time`".into()));
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    for h in &header[2..] {
        if !ADULT_LABELS.contains(&h.as_str()) && !JUVENILE_LABELS.contains(&h.as_str()) {
            return Err(CliError::Data(format!("unexpected column `{h}`")));
        }
    }
    if header.iter().collect::<std::collections::BTreeSet<_>>().len() != header.len() {
        return Err(CliError::Data("repeated column in header".into()));
    }
    let adult: Vec<usize> = ADULT_LABELS
        .iter()
        .map(|l| col(l).ok_or_else(|| CliError::Data(format!("missing column `{l}`"))))
        .collect::<CliResult<_>>()?;
    let juvenile: Vec<Option<usize>> = JUVENILE_LABELS.iter().map(|l| col(l)).collect();
    let has_juveniles = match juvenile.iter().filter(|c| c.is_some()).count() {
        0 => false,
        2 => true,
        _ => return Err(CliError::Data("juvenile columns must come as a pair".into())),
    };

    let mut adults: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    let mut juv: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let unit = rec[0].to_string();
        if unit.is_empty() {
            return Err(data_err(line, "empty unit id"));
        }
        let time: f64 = rec[1]
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| data_err(line, format!("time `{}` is not a finite number", &rec[1])))?;
        let series = adults.entry(unit.clone()).or_default();
        if let Some(last) = series.last() {
            if time == last.time {
                return Err(data_err(line, format!("duplicate (unit, time) = ({unit}, {time})")));
            }
            if time < last.time {
                return Err(data_err(line, format!("time {time} for unit `{unit}` decreases from {}", last.time)));
            }
        }
        let values = adult
            .iter()
            .zip(ADULT_LABELS)
            .map(|(&c, l)| parse_count(&rec[c], l, line))
            .collect::<CliResult<_>>()?;
        series.push(Observation::new(time, values));
        if has_juveniles {
            let values = juvenile
                .iter()
                .zip(JUVENILE_LABELS)
                .map(|(c, l)| parse_count(&rec[c.expect("pair checked")], l, line))
                .collect::<CliResult<_>>()?;
            juv.entry(unit).or_default().push(Observation::new(time, values));
        }
    }
    if adults.is_empty() {
        return Err(CliError::Data("no data rows".into()));
    }
    let labels = |ls: &[&str]| ls.iter().map(|s| s.to_string()).collect();
    Ok(IngestedPanel {
        data: PanelDataset::new(labels(&ADULT_LABELS), adults)?,
        juveniles: if has_juveniles {
            Some(PanelDataset::new(labels(&JUVENILE_LABELS), juv)?)
        } else {
            None
        },
    })
}

pub fn ingest_panel_csv(path: &Path) -> CliResult<IngestedPanel> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    read_panel_csv(f).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_panel_csv(panel: &IngestedPanel, writer: impl Write) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unit", "time"];
    header.extend(ADULT_LABELS);
    if panel.juveniles.is_some() {
        header.extend(JUVENILE_LABELS);
    }
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    let cell = |v: &Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (unit, obs) in &panel.data.units {
        for (n, o) in obs.iter().enumerate() {
            let mut row = vec![unit.clone(), o.time.to_string()];
            row.extend(o.values.iter().map(cell));
            if let Some(j) = &panel.juveniles {
                row.extend(j.units[unit][n].values.iter().map(cell));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

pub fn emit_panel_csv(panel: &IngestedPanel, path: &Path) -> CliResult<()> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_panel_csv(panel, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str) -> CliResult<IngestedPanel> {
        read_panel_csv(s.as_bytes())
    }

    #[test]
    fn two_rows_one_unit() {
        let p = read("unit,time,S_native,I_native,S_invasive,I_invasive\nA,7,10,0,3,\nA,12,11,1,2,0\n").unwrap();
        assert_eq!(p.data.n_obs("A"), 2);
        assert_eq!(p.data.units["A"][0].values[3], None);
        assert!(p.juveniles.is_none());
    }

    #[test]
    fn experiment_schedule() {
        let mut s = String::from("unit,time,S_native,I_native,S_invasive,I_invasive,J_native,J_invasive\n");
        for n in 1..=10 {
            s += &format!("tank1,{},5,1,0,0,2,0\n", 5 * n + 2);
        }
        let p = read(&s).unwrap();
        let times: Vec<f64> = p.data.units["tank1"].iter().map(|o| o.time).collect();
        assert_eq!(times, (1..=10).map(|n| (5 * n + 2) as f64).collect::<Vec<_>>());
        assert_eq!(p.data.labels, ADULT_LABELS);
        assert_eq!(p.juveniles.unwrap().units["tank1"][0].values, vec![Some(2.0), Some(0.0)]);
    }

    #[test]
    fn contract_violations_name_the_row() {
        let head = "unit,time,S_native,I_native,S_invasive,I_invasive\n";
        for (body, needle) in [
            ("A,12,1,0,0,0\nA,7,1,0,0,0\n", "row 3"),
            ("A,7,1,0,0,0\nB,7,1,0,0,0\nA,7,2,0,0,0\n", "row 4: duplicate"),
            ("A,7,1.5,0,0,0\n", "row 2"),
            ("A,7,-1,0,0,0\n", "row 2"),
            ("A,x,1,0,0,0\n", "row 2"),
        ] {
            let e = read(&format!("{head}{body}")).unwrap_err();
            assert!(matches!(e, CliError::Data(_)));
            assert!(e.to_string().contains(needle), "{e}");
        }
        assert!(read("unit,time,S_native,I_native,S_invasive\nA,7,1,0,0\n").is_err());
        assert!(read("unit,time,S_native,I_native,S_invasive,I_invasive,J_native\nA,7,1,0,0,0,1\n").is_err());
        assert!(read("time,unit,S_native,I_native,S_invasive,I_invasive\n7,A,1,0,0,0\n").is_err());
    }
}
