//! CSV ingestion and canonical serialization of a cohort.
//!
//! Topic probabilities are read in long format (`upload_id, topic_id,
//! probability`) or wide format (`upload_id` followed by one column per topic,
//! headed `12` or `topic_12`). Absent pairs are densified to `0.0`. Writing
//! always emits long format with zero entries omitted, so a second
//! load/write pass is byte-identical to the first.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, TimeZone, Utc};
use csv::StringRecord;
use thiserror::Error;

use super::{
    Channel, CohortDataset, DatasetConfig, DatePrecision, EventKind, Gender, Group, ReferenceEvent,
    TopicMeta, Upload,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub channels: PathBuf,
    pub uploads: PathBuf,
    pub topics: PathBuf,
    pub topic_meta: PathBuf,
}

impl DatasetPaths {
    /// Standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            channels: dir.join("channels.csv"),
            uploads: dir.join("uploads.csv"),
            topics: dir.join("topics_long.csv"),
            topic_meta: dir.join("topic_meta.csv"),
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{file}: {message}")]
    Read { file: PathBuf, message: String },
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: PathBuf, column: String },
    #[error("{file}:{row}: field `{field}`: {message}")]
    Field { file: PathBuf, row: u64, field: String, message: String },
    #[error("{file}:{row}: duplicate id `{id}`")]
    DuplicateId { file: PathBuf, row: u64, id: String },
    #[error("{file}:{row}: field `{field}` references unknown id `{id}`")]
    DanglingReference { file: PathBuf, row: u64, field: String, id: String },
    #[error("{file}:{row}: upload `{upload_id}` topic {topic_id}: probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { file: PathBuf, row: u64, upload_id: String, topic_id: u32, value: f64 },
}

impl LoadError {
    pub fn row(&self) -> Option<u64> {
        match self {
            LoadError::Field { row, .. }
            | LoadError::DuplicateId { row, .. }
            | LoadError::DanglingReference { row, .. }
            | LoadError::ProbabilityOutOfRange { row, .. } => Some(*row),
            _ => None,
        }
    }
}

struct Table {
    file: PathBuf,
    columns: HashMap<String, usize>,
    rows: Vec<(u64, StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, LoadError> {
        let file = path.to_path_buf();
        let read_err = |e: &dyn std::fmt::Display| LoadError::Read { file: file.clone(), message: e.to_string() };
        let handle = File::open(path).map_err(|e| read_err(&e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(handle);
        let headers = rdr.headers().map_err(|e| read_err(&e))?.clone();
        let columns = headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| read_err(&e))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            rows.push((line, rec));
        }
        Ok(Table { file, columns, rows })
    }

    fn require(&self, names: &[&str]) -> Result<Vec<usize>, LoadError> {
        names
            .iter()
            .map(|n| {
                self.columns.get(*n).copied().ok_or_else(|| LoadError::MissingColumn {
                    file: self.file.clone(),
                    column: n.to_string(),
                })
            })
            .collect()
    }

    fn field_err(&self, row: u64, field: &str, message: impl Into<String>) -> LoadError {
        LoadError::Field { file: self.file.clone(), row, field: field.to_string(), message: message.into() }
    }

    fn parse<T: std::str::FromStr>(&self, row: u64, rec: &StringRecord, col: usize, field: &str) -> Result<T, LoadError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = rec.get(col).unwrap_or("");
        raw.parse::<T>().map_err(|e| self.field_err(row, field, format!("cannot parse `{raw}`: {e}")))
    }

    fn parse_opt<T: std::str::FromStr>(
        &self,
        row: u64,
        rec: &StringRecord,
        col: usize,
        field: &str,
    ) -> Result<Option<T>, LoadError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = rec.get(col).unwrap_or("");
        if raw.is_empty() {
            Ok(None)
        } else {
            self.parse(row, rec, col, field).map(Some)
        }
    }

    fn parse_bool(&self, row: u64, rec: &StringRecord, col: usize, field: &str) -> Result<Option<bool>, LoadError> {
        match rec.get(col).unwrap_or("").to_ascii_lowercase().as_str() {
            "" => Ok(None),
            "true" | "1" | "yes" => Ok(Some(true)),
            "false" | "0" | "no" => Ok(Some(false)),
            other => Err(self.field_err(row, field, format!("not a boolean: `{other}`"))),
        }
    }
}

fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    if let Ok(ndt) = NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S") {
        return Some(Utc.from_utc_datetime(&ndt));
    }
    if let Ok(ndt) = NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S") {
        return Some(Utc.from_utc_datetime(&ndt));
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .map(|d| Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).expect("midnight")))
}

const CHANNEL_COLUMNS: [&str; 10] = [
    "channel_id",
    "group",
    "gender",
    "age",
    "minority_flag",
    "follower_count",
    "event_kind",
    "event_date",
    "event_precision",
    "excluded_flag",
];

const UPLOAD_COLUMNS: [&str; 9] = [
    "upload_id",
    "channel_id",
    "timestamp",
    "duration_s",
    "views",
    "likes",
    "comments",
    "valid",
    "narrative_flag",
];

fn load_channels(path: &Path, config: &DatasetConfig) -> Result<Vec<Channel>, LoadError> {
    let t = Table::read(path)?;
    let c = t.require(&CHANNEL_COLUMNS)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (row, rec) in &t.rows {
        let row = *row;
        let channel_id = rec.get(c[0]).unwrap_or("").to_string();
        if channel_id.is_empty() {
            return Err(t.field_err(row, "channel_id", "empty id"));
        }
        if !seen.insert(channel_id.clone()) {
            return Err(LoadError::DuplicateId { file: t.file.clone(), row, id: channel_id });
        }
        let group: Group = t.parse(row, rec, c[1], "group")?;
        let gender: Gender = t.parse(row, rec, c[2], "gender")?;
        let age = t.parse_opt::<u32>(row, rec, c[3], "age")?;
        let minority_flag = t.parse_bool(row, rec, c[4], "minority_flag")?;
        let follower_count = t.parse_opt::<u64>(row, rec, c[5], "follower_count")?;
        let kind = t.parse_opt::<EventKind>(row, rec, c[6], "event_kind")?;
        let precision = t.parse::<DatePrecision>(row, rec, c[8], "event_precision")?;
        let reference_event = match kind {
            None => None,
            Some(kind) => {
                let raw = rec.get(c[7]).unwrap_or("");
                let date = config
                    .resolve_event_date(raw, precision)
                    .ok_or_else(|| t.field_err(row, "event_date", format!("cannot resolve `{raw}`")))?;
                Some(ReferenceEvent { kind, date, precision })
            }
        };
        let excluded_flag = t.parse_bool(row, rec, c[9], "excluded_flag")?.unwrap_or(false);
        out.push(Channel {
            channel_id,
            group,
            gender,
            age,
            minority_flag,
            follower_count,
            reference_event,
            excluded_flag,
        });
    }
    Ok(out)
}

fn load_uploads(path: &Path, channels: &HashSet<&str>) -> Result<(Vec<Upload>, HashMap<String, u64>), LoadError> {
    let t = Table::read(path)?;
    let c = t.require(&UPLOAD_COLUMNS)?;
    let mut rows_by_id = HashMap::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (row, rec) in &t.rows {
        let row = *row;
        let upload_id = rec.get(c[0]).unwrap_or("").to_string();
        if upload_id.is_empty() {
            return Err(t.field_err(row, "upload_id", "empty id"));
        }
        if rows_by_id.insert(upload_id.clone(), row).is_some() {
            return Err(LoadError::DuplicateId { file: t.file.clone(), row, id: upload_id });
        }
        let channel_id = rec.get(c[1]).unwrap_or("").to_string();
        if !channels.contains(channel_id.as_str()) {
            return Err(LoadError::DanglingReference {
                file: t.file.clone(),
                row,
                field: "channel_id".into(),
                id: channel_id,
            });
        }
        let raw_ts = rec.get(c[2]).unwrap_or("");
        let timestamp = parse_timestamp(raw_ts)
            .ok_or_else(|| t.field_err(row, "timestamp", format!("not ISO-8601: `{raw_ts}`")))?;
        let duration_s: f64 = t.parse(row, rec, c[3], "duration_s")?;
        if !(duration_s.is_finite() && duration_s >= 0.0) {
            return Err(t.field_err(row, "duration_s", "must be a nonnegative number"));
        }
        out.push(Upload {
            upload_id,
            channel_id,
            timestamp,
            duration_s,
            views: t.parse_opt(row, rec, c[4], "views")?,
            likes: t.parse_opt(row, rec, c[5], "likes")?,
            comments: t.parse_opt(row, rec, c[6], "comments")?,
            valid: t.parse_bool(row, rec, c[7], "valid")?.unwrap_or(false),
            narrative_flag: t.parse_bool(row, rec, c[8], "narrative_flag")?.unwrap_or(false),
            topic_probabilities: Vec::new(),
        });
    }
    Ok((out, rows_by_id))
}

fn load_topic_meta(path: &Path) -> Result<Vec<TopicMeta>, LoadError> {
    let t = Table::read(path)?;
    let c = t.require(&["topic_id", "label", "expert_flag"])?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (row, rec) in &t.rows {
        let topic_id: u32 = t.parse(*row, rec, c[0], "topic_id")?;
        if !seen.insert(topic_id) {
            return Err(LoadError::DuplicateId { file: t.file.clone(), row: *row, id: topic_id.to_string() });
        }
        out.push(TopicMeta {
            topic_id,
            label: rec.get(c[1]).unwrap_or("").to_string(),
            expert_flag: t.parse_bool(*row, rec, c[2], "expert_flag")?.unwrap_or(false),
            top_words: Vec::new(),
        });
    }
    Ok(out)
}

fn wide_topic_id(header: &str) -> Option<u32> {
    header.strip_prefix("topic_").unwrap_or(header).parse().ok()
}

/// Fills `uploads[*].topic_probabilities` from long or wide topic tables.
fn load_topic_matrix(
    path: &Path,
    uploads: &mut [Upload],
    topics: &[TopicMeta],
) -> Result<(), LoadError> {
    let t = Table::read(path)?;
    let col_of: HashMap<u32, usize> = topics.iter().enumerate().map(|(i, m)| (m.topic_id, i)).collect();
    let upload_pos: HashMap<String, usize> =
        uploads.iter().enumerate().map(|(i, u)| (u.upload_id.clone(), i)).collect();
    for u in uploads.iter_mut() {
        u.topic_probabilities = vec![0.0; topics.len()];
    }
    let check_prob = |row: u64, upload_id: &str, topic_id: u32, value: f64| -> Result<(), LoadError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(LoadError::ProbabilityOutOfRange {
                file: t.file.clone(),
                row,
                upload_id: upload_id.to_string(),
                topic_id,
                value,
            });
        }
        Ok(())
    };

    let is_long = ["upload_id", "topic_id", "probability"].iter().all(|c| t.columns.contains_key(*c));
    if is_long {
        let c = t.require(&["upload_id", "topic_id", "probability"])?;
        let mut seen = HashSet::new();
        for (row, rec) in &t.rows {
            let row = *row;
            let upload_id = rec.get(c[0]).unwrap_or("");
            let Some(&ui) = upload_pos.get(upload_id) else {
                return Err(LoadError::DanglingReference {
                    file: t.file.clone(),
                    row,
                    field: "upload_id".into(),
                    id: upload_id.to_string(),
                });
            };
            let topic_id: u32 = t.parse(row, rec, c[1], "topic_id")?;
            let Some(&col) = col_of.get(&topic_id) else {
                return Err(LoadError::DanglingReference {
                    file: t.file.clone(),
                    row,
                    field: "topic_id".into(),
                    id: topic_id.to_string(),
                });
            };
            if !seen.insert((ui, col)) {
                return Err(LoadError::DuplicateId {
                    file: t.file.clone(),
                    row,
                    id: format!("{upload_id}/{topic_id}"),
                });
            }
            let p: f64 = t.parse(row, rec, c[2], "probability")?;
            check_prob(row, upload_id, topic_id, p)?;
            uploads[ui].topic_probabilities[col] = p;
        }
        return Ok(());
    }

    let id_col = t.require(&["upload_id"])?[0];
    let mut header: Vec<(&String, &usize)> = t.columns.iter().collect();
    header.sort_by_key(|(_, i)| **i);
    let mut wide_cols = Vec::new();
    for (name, &idx) in header {
        if idx == id_col {
            continue;
        }
        let topic_id = wide_topic_id(name).ok_or_else(|| LoadError::MissingColumn {
            file: t.file.clone(),
            column: "topic_id/probability (long) or numeric topic columns (wide)".into(),
        })?;
        let col = *col_of.get(&topic_id).ok_or_else(|| LoadError::DanglingReference {
            file: t.file.clone(),
            row: 1,
            field: name.clone(),
            id: topic_id.to_string(),
        })?;
        wide_cols.push((idx, topic_id, col));
    }
    let mut seen = HashSet::new();
    for (row, rec) in &t.rows {
        let row = *row;
        let upload_id = rec.get(id_col).unwrap_or("");
        let Some(&ui) = upload_pos.get(upload_id) else {
            return Err(LoadError::DanglingReference {
                file: t.file.clone(),
                row,
                field: "upload_id".into(),
                id: upload_id.to_string(),
            });
        };
        if !seen.insert(ui) {
            return Err(LoadError::DuplicateId { file: t.file.clone(), row, id: upload_id.to_string() });
        }
        for &(idx, topic_id, col) in &wide_cols {
            let p: Option<f64> = t.parse_opt(row, rec, idx, &format!("topic_{topic_id}"))?;
            let p = p.unwrap_or(0.0);
            check_prob(row, upload_id, topic_id, p)?;
            uploads[ui].topic_probabilities[col] = p;
        }
    }
    Ok(())
}

/// Loads and cross-links the four cohort tables.
pub fn load_dataset(paths: &DatasetPaths, config: &DatasetConfig) -> Result<CohortDataset, LoadError> {
    let channels = load_channels(&paths.channels, config)?;
    let topics = load_topic_meta(&paths.topic_meta)?;
    let ids: HashSet<&str> = channels.iter().map(|c| c.channel_id.as_str()).collect();
    let (mut uploads, rows) = load_uploads(&paths.uploads, &ids)?;
    load_topic_matrix(&paths.topics, &mut uploads, &topics)?;
    CohortDataset::new(channels, uploads, topics).map_err(|e| {
        // Row-level checks above make these unreachable in practice; keep the
        // file attribution if one slips through.
        let row = match &e {
            super::DatasetError::DuplicateUpload(id) => rows.get(id).copied().unwrap_or(0),
            _ => 0,
        };
        LoadError::Field { file: paths.uploads.clone(), row, field: "upload_id".into(), message: e.to_string() }
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Writes the canonical long-format serialization into `dir`.
pub fn write_dataset(ds: &CohortDataset, dir: &Path) -> std::io::Result<DatasetPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = DatasetPaths::in_dir(dir);

    let mut w = csv::Writer::from_path(&paths.channels).map_err(csv_err)?;
    w.write_record(CHANNEL_COLUMNS).map_err(csv_err)?;
    for c in ds.channels() {
        let (kind, date, precision) = match &c.reference_event {
            Some(ev) => (
                ev.kind.as_str().to_string(),
                ev.date.format("%Y-%m-%d").to_string(),
                ev.precision.as_str().to_string(),
            ),
            None => (String::new(), String::new(), DatePrecision::Exact.as_str().to_string()),
        };
        w.write_record([
            c.channel_id.clone(),
            c.group.as_str().to_string(),
            c.gender.as_str().to_string(),
            opt(c.age),
            opt(c.minority_flag),
            opt(c.follower_count),
            kind,
            date,
            precision,
            c.excluded_flag.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.uploads).map_err(csv_err)?;
    w.write_record(UPLOAD_COLUMNS).map_err(csv_err)?;
    for u in ds.uploads() {
        w.write_record([
            u.upload_id.clone(),
            u.channel_id.clone(),
            u.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            u.duration_s.to_string(),
            opt(u.views),
            opt(u.likes),
            opt(u.comments),
            u.valid.to_string(),
            u.narrative_flag.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.topics).map_err(csv_err)?;
    w.write_record(["upload_id", "topic_id", "probability"]).map_err(csv_err)?;
    for u in ds.uploads() {
        for (meta, &p) in ds.topics().iter().zip(&u.topic_probabilities) {
            if p != 0.0 {
                w.write_record([u.upload_id.clone(), meta.topic_id.to_string(), p.to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.topic_meta).map_err(csv_err)?;
    w.write_record(["topic_id", "label", "expert_flag"]).map_err(csv_err)?;
    for t in ds.topics() {
        w.write_record([t.topic_id.to_string(), t.label.clone(), t.expert_flag.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn fixture(dir: &Path, uploads_extra: &str, topics_extra: &str) -> DatasetPaths {
        write(
            dir,
            "channels.csv",
            "channel_id,group,gender,age,minority_flag,follower_count,event_kind,event_date,event_precision,excluded_flag\n\
             c1,attempted_during,female,24,false,1200,attempt,2017-05-02,exact,false\n\
             c2,attempted_before,male,31,,,,,,false\n\
             c3,control_major_life_event,other,,true,50,major_life_event,2018-early,year_part,true\n",
        );
        write(
            dir,
            "uploads.csv",
            &format!(
                "upload_id,channel_id,timestamp,duration_s,views,likes,comments,valid,narrative_flag\n\
                 u1,c1,2017-04-01T10:00:00Z,300,10,1,0,true,false\n\
                 u2,c1,2017-06-01T10:00:00Z,420.5,,,,true,true\n\
                 u3,c2,2016-01-01,100,5,0,0,false,false\n\
                 u4,c3,2018-03-01T00:00:00Z,90,7,2,1,true,false\n{uploads_extra}"
            ),
        );
        write(
            dir,
            "topics_long.csv",
            &format!(
                "upload_id,topic_id,probability\n\
                 u1,0,0.25\nu1,7,0.5\nu2,7,1\nu4,0,0.125\n{topics_extra}"
            ),
        );
        write(dir, "topic_meta.csv", "topic_id,label,expert_flag\n0,Mental Health,true\n7,Gaming,false\n");
        DatasetPaths::in_dir(dir)
    }

    #[test]
    fn loads_three_channel_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), "", "");
        let ds = load_dataset(&paths, &DatasetConfig::default()).unwrap();
        assert_eq!(ds.channels().len(), 3);
        assert_eq!(ds.uploads().len(), 4);
        let u1 = ds.uploads().iter().find(|u| u.upload_id == "u1").unwrap();
        assert_eq!(u1.topic_probabilities, vec![0.25, 0.5]);
        let u3 = ds.uploads().iter().find(|u| u.upload_id == "u3").unwrap();
        assert_eq!(u3.topic_probabilities, vec![0.0, 0.0]);
        let u2 = ds.uploads().iter().find(|u| u.upload_id == "u2").unwrap();
        assert_eq!(u2.likes, None);
        assert!(u2.narrative_flag);
        let c3 = ds.channel("c3").unwrap();
        assert_eq!(c3.reference_event.unwrap().date, NaiveDate::from_ymd_opt(2018, 2, 15).unwrap());
        assert_eq!(c3.age, None);
        assert!(c3.excluded_flag);
        for u in ds.uploads() {
            assert!(ds.channel(&u.channel_id).is_some());
        }
    }

    #[test]
    fn out_of_range_probability_names_row_and_topic() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), "", "u3,7,1.2\n");
        let err = load_dataset(&paths, &DatasetConfig::default()).unwrap_err();
        match err {
            LoadError::ProbabilityOutOfRange { row, topic_id, ref upload_id, value, .. } => {
                assert_eq!(row, 6);
                assert_eq!(topic_id, 7);
                assert_eq!(upload_id, "u3");
                assert_eq!(value, 1.2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_channel_is_a_dangling_reference() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), "u9,x9,2018-01-01,10,,,,true,false\n", "");
        let err = load_dataset(&paths, &DatasetConfig::default()).unwrap_err();
        match err {
            LoadError::DanglingReference { row, ref field, ref id, .. } => {
                assert_eq!((row, field.as_str(), id.as_str()), (6, "channel_id", "x9"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), "u1,c1,2018-01-01,10,,,,true,false\n", "");
        assert!(matches!(
            load_dataset(&paths, &DatasetConfig::default()).unwrap_err(),
            LoadError::DuplicateId { row: 6, .. }
        ));

        let paths = fixture(dir.path(), "u5,c1,2018-01-01,ten,,,,true,false\n", "");
        let err = load_dataset(&paths, &DatasetConfig::default()).unwrap_err();
        assert!(matches!(err, LoadError::Field { ref field, row: 6, .. } if field == "duration_s"));

        fs::write(dir.path().join("topic_meta.csv"), "topic_id,label\n0,x\n").unwrap();
        assert!(matches!(
            load_dataset(&paths, &DatasetConfig::default()).unwrap_err(),
            LoadError::MissingColumn { ref column, .. } if column == "expert_flag"
        ));
    }

    #[test]
    fn wide_format_matches_long_format() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), "", "");
        let long = load_dataset(&paths, &DatasetConfig::default()).unwrap();
        fs::write(
            &paths.topics,
            "upload_id,topic_0,topic_7\nu1,0.25,0.5\nu2,0,1\nu4,0.125,\n",
        )
        .unwrap();
        let wide = load_dataset(&paths, &DatasetConfig::default()).unwrap();
        assert_eq!(long, wide);
    }

    #[test]
    fn canonical_serialization_is_a_fixpoint() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), "", "");
        let cfg = DatasetConfig::default();
        let first = load_dataset(&paths, &cfg).unwrap();
        let out1 = dir.path().join("pass1");
        let p1 = write_dataset(&first, &out1).unwrap();
        let second = load_dataset(&p1, &cfg).unwrap();
        assert_eq!(first, second);
        let out2 = dir.path().join("pass2");
        let p2 = write_dataset(&second, &out2).unwrap();
        for (a, b) in [
            (&p1.channels, &p2.channels),
            (&p1.uploads, &p2.uploads),
            (&p1.topics, &p2.topics),
            (&p1.topic_meta, &p2.topic_meta),
        ] {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }
}
