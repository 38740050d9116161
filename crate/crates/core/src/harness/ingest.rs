//! CSV input and output for subject, event and counting-process files.
//!
//! Subject files have the header `id,end_time,treatment_time,<covariates...>`
//! (an optional `entry_time` column is also recognised), event files
//! `id,time`, and counting-process files `id,start,stop,status,<covariates...>`
//! with an optional `stratum` column.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::types::{validate_subject, CountingRow, SubjectRecord, ValidationError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("{file}: missing required column `{column}`")]
    MissingColumn { file: String, column: &'static str },
    #[error("{file} line {line}: {message}")]
    Malformed {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file} line {line}: duplicate subject id `{id}`")]
    DuplicateId { file: String, line: u64, id: String },
    #[error("{file} line {line}: event for unknown subject id `{id}`")]
    UnknownId { file: String, line: u64, id: String },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

const SUBJECT_FIXED: [&str; 4] = ["id", "entry_time", "end_time", "treatment_time"];

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn column(headers: &csv::StringRecord, name: &'static str, file: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IngestError::MissingColumn {
            file: file.to_string(),
            column: name,
        })
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn number(value: &str, column: &str, file: &str, line: u64) -> Result<f64, IngestError> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(IngestError::Malformed {
            file: file.to_string(),
            line,
            message: format!("`{column}` is not a finite number: `{value}`"),
        }),
    }
}

fn csv_error(file: &str) -> impl Fn(csv::Error) -> IngestError + '_ {
    move |source| IngestError::Csv {
        file: file.to_string(),
        source,
    }
}

/// Reads subjects in file order, without events and without validation.
pub fn read_subjects_csv<R: Read>(input: R, file: &str) -> Result<Vec<SubjectRecord>, IngestError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_error(file))?.clone();
    let id_col = column(&headers, "id", file)?;
    let end_col = column(&headers, "end_time", file)?;
    let trt_col = column(&headers, "treatment_time", file)?;
    let entry_col = headers.iter().position(|h| h == "entry_time");
    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !SUBJECT_FIXED.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut seen = HashMap::new();
    let mut subjects = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error(file))?;
        let line = line_of(&record);
        let id = record[id_col].to_string();
        if id.is_empty() {
            return Err(IngestError::Malformed {
                file: file.to_string(),
                line,
                message: "empty id".into(),
            });
        }
        if seen.insert(id.clone(), line).is_some() {
            return Err(IngestError::DuplicateId {
                file: file.to_string(),
                line,
                id,
            });
        }
        let mut subject = SubjectRecord::new(id, number(&record[end_col], "end_time", file, line)?);
        if let Some(c) = entry_col {
            if !record[c].is_empty() {
                subject.entry_time = number(&record[c], "entry_time", file, line)?;
            }
        }
        let treatment = &record[trt_col];
        if !treatment.is_empty() {
            subject.treatment_time = Some(number(treatment, "treatment_time", file, line)?);
        }
        for (c, name) in &covariate_cols {
            if !record[*c].is_empty() {
                subject.covariates.insert(name.clone(), record[*c].to_string());
            }
        }
        subjects.push(subject);
    }
    Ok(subjects)
}

/// Reads `(id, time, line)` triples in file order.
pub fn read_events_csv<R: Read>(input: R, file: &str) -> Result<Vec<(String, f64, u64)>, IngestError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_error(file))?.clone();
    let id_col = column(&headers, "id", file)?;
    let time_col = column(&headers, "time", file)?;
    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error(file))?;
        let line = line_of(&record);
        let time = number(&record[time_col], "time", file, line)?;
        events.push((record[id_col].to_string(), time, line));
    }
    Ok(events)
}

/// Joins subjects with their events and validates every record. Event rows
/// may appear in any order; each subject's times are sorted before
/// validation.
pub fn ingest_subjects(subject_csv: &Path, events_csv: &Path) -> Result<Vec<SubjectRecord>, IngestError> {
    let open = |path: &Path| {
        std::fs::File::open(path).map_err(|source| IngestError::Io {
            file: path.display().to_string(),
            source,
        })
    };
    let subject_name = subject_csv.display().to_string();
    let events_name = events_csv.display().to_string();
    let subjects = read_subjects_csv(open(subject_csv)?, &subject_name)?;
    let events = read_events_csv(open(events_csv)?, &events_name)?;
    join_events(subjects, events, &events_name)
}

pub fn join_events(
    mut subjects: Vec<SubjectRecord>,
    events: Vec<(String, f64, u64)>,
    file: &str,
) -> Result<Vec<SubjectRecord>, IngestError> {
    let index: HashMap<String, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), i))
        .collect();
    for (id, time, line) in events {
        match index.get(&id) {
            Some(&i) => subjects[i].event_times.push(time),
            None => {
                return Err(IngestError::UnknownId {
                    file: file.to_string(),
                    line,
                    id,
                })
            }
        }
    }
    subjects
        .into_iter()
        .map(|mut s| {
            s.event_times.sort_by(f64::total_cmp);
            validate_subject(s).map_err(IngestError::from)
        })
        .collect()
}

/// Writes the subject file. `entry_time` is emitted only when some subject
/// enters after time 0; covariate columns are the union of all names.
pub fn write_subjects_csv<W: Write>(subjects: &[SubjectRecord], output: W) -> Result<(), csv::Error> {
    let with_entry = subjects.iter().any(|s| s.entry_time != 0.0);
    let names: BTreeSet<&String> = subjects.iter().flat_map(|s| s.covariates.keys()).collect();
    let mut wtr = csv::Writer::from_writer(output);
    let mut header = vec!["id"];
    if with_entry {
        header.push("entry_time");
    }
    header.extend(["end_time", "treatment_time"]);
    header.extend(names.iter().map(|n| n.as_str()));
    wtr.write_record(&header)?;
    for s in subjects {
        let mut row = vec![s.id.clone()];
        if with_entry {
            row.push(s.entry_time.to_string());
        }
        row.push(s.end_time.to_string());
        row.push(s.treatment_time.map(|t| t.to_string()).unwrap_or_default());
        for name in &names {
            row.push(s.covariates.get(*name).cloned().unwrap_or_default());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_events_csv<W: Write>(subjects: &[SubjectRecord], output: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(output);
    wtr.write_record(["id", "time"])?;
    for s in subjects {
        for t in &s.event_times {
            wtr.write_record([s.id.as_str(), &t.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Counting-process rows read from a file, with the labels needed to report
/// on them.
#[derive(Debug, Clone, PartialEq)]
pub struct CountingTable {
    pub rows: Vec<CountingRow>,
    /// Subject labels indexed by `CountingRow::subject_id`.
    pub subject_ids: Vec<String>,
    pub covariate_names: Vec<String>,
}

/// Reads `id,start,stop,status,<covariates...>`; an optional integer
/// `stratum` column is taken as the baseline stratum. Rows of the same id
/// share a cluster.
pub fn read_counting_csv<R: Read>(input: R, file: &str) -> Result<CountingTable, IngestError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_error(file))?.clone();
    let id_col = column(&headers, "id", file)?;
    let start_col = column(&headers, "start", file)?;
    let stop_col = column(&headers, "stop", file)?;
    let status_col = column(&headers, "status", file)?;
    let stratum_col = headers.iter().position(|h| h == "stratum");
    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !["id", "start", "stop", "status", "stratum"].contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut subject_ids = Vec::new();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error(file))?;
        let line = line_of(&record);
        let malformed = |message: String| IngestError::Malformed {
            file: file.to_string(),
            line,
            message,
        };
        let id = record[id_col].to_string();
        let next = ids.len();
        let subject = *ids.entry(id.clone()).or_insert_with(|| {
            subject_ids.push(id);
            next
        });
        let start = number(&record[start_col], "start", file, line)?;
        let stop = number(&record[stop_col], "stop", file, line)?;
        if !(stop > start) {
            return Err(malformed(format!("interval ({start}, {stop}] is empty")));
        }
        let status = match &record[status_col] {
            "0" => false,
            "1" => true,
            other => return Err(malformed(format!("status must be 0 or 1, got `{other}`"))),
        };
        let stratum_id = match stratum_col {
            Some(c) => record[c]
                .parse::<u32>()
                .map_err(|_| malformed(format!("stratum must be a non-negative integer, got `{}`", &record[c])))?,
            None => 0,
        };
        let covariates = covariate_cols
            .iter()
            .map(|(c, name)| number(&record[*c], name, file, line))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(CountingRow {
            subject_id: subject,
            cluster_id: subject,
            stratum_id,
            start,
            stop,
            status,
            covariates,
        });
    }
    Ok(CountingTable {
        rows,
        subject_ids,
        covariate_names: covariate_cols.into_iter().map(|(_, n)| n).collect(),
    })
}
