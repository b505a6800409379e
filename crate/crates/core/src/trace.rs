//! Log-line data model, trace normalization and serialization.
//!
//! A trace is an ordered sequence of PDU messages. The canonical on-disk
//! format is JSONL (one message object per line); CSV is supported for
//! spreadsheet interop. Timestamps are integer microseconds throughout —
//! no floating-point time anywhere.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};

/// Operation mode of the vehicle when a message was logged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivityState {
    #[serde(rename = "normal")]
    NormalOperation,
    #[serde(rename = "startup_shutdown")]
    StartupShutdown,
    #[serde(rename = "not_initialized")]
    NotInitialized,
}

impl ActivityState {
    pub fn tag(&self) -> &'static str {
        match self {
            ActivityState::NormalOperation => "normal",
            ActivityState::StartupShutdown => "startup_shutdown",
            ActivityState::NotInitialized => "not_initialized",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "normal" => Some(ActivityState::NormalOperation),
            "startup_shutdown" => Some(ActivityState::StartupShutdown),
            "not_initialized" => Some(ActivityState::NotInitialized),
            _ => None,
        }
    }
}

/// One log line: a protocol data unit with the header-level fields kept
/// for analysis.
///
/// `delta_time_us` is the time since the previous occurrence of the same
/// `pdu_name`; the first occurrence in a trace carries the sentinel 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PduMessage {
    pub pdu_name: String,
    pub source: String,
    pub src_ip: String,
    pub src_port: u16,
    pub dst_ip: String,
    pub dst_port: u16,
    pub timestamp_us: u64,
    pub delta_time_us: u64,
    pub activity_state: ActivityState,
}

/// An ordered message sequence plus a file/scenario identifier.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub messages: Vec<PduMessage>,
    pub source_tag: String,
}

impl Trace {
    pub fn new(messages: Vec<PduMessage>, source_tag: impl Into<String>) -> Self {
        Trace { messages, source_tag: source_tag.into() }
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Whether a label vector is synthetic ground truth or the output of the
/// (unreliable) rule-based labeler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelKind {
    #[serde(rename = "true")]
    TrueLabels,
    #[serde(rename = "observed")]
    ObservedLabels,
}

/// Per-line binary anomaly labels, same length as the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineLabels {
    pub kind: LabelKind,
    pub flags: Vec<u8>,
}

impl LineLabels {
    pub fn new(kind: LabelKind, flags: Vec<u8>) -> Result<Self, TraceError> {
        if let Some(bad) = flags.iter().find(|&&f| f > 1) {
            return Err(TraceError::Label(format!("flag value {bad} is not 0/1")));
        }
        Ok(LineLabels { kind, flags })
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 1).count()
    }
}

/// Supported trace serialization formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field {field}: {message}")]
    Schema { line: usize, field: &'static str, message: String },
    #[error("label error: {0}")]
    Label(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const CSV_HEADER: [&str; 9] = [
    "pduName",
    "source",
    "srcIp",
    "srcPort",
    "dstIp",
    "dstPort",
    "timestampUs",
    "deltaTimeUs",
    "activityState",
];

fn field_str(
    value: &serde_json::Value,
    line: usize,
    field: &'static str,
) -> Result<String, TraceError> {
    match value.get(field) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(TraceError::Schema { line, field, message: "expected a string".into() }),
        None => Err(TraceError::Schema { line, field, message: "missing field".into() }),
    }
}

fn field_u64(
    value: &serde_json::Value,
    line: usize,
    field: &'static str,
) -> Result<u64, TraceError> {
    match value.get(field) {
        Some(v) => v.as_u64().ok_or_else(|| TraceError::Schema {
            line,
            field,
            message: format!("expected a non-negative integer, got {v}"),
        }),
        None => Err(TraceError::Schema { line, field, message: "missing field".into() }),
    }
}

fn build_message(
    line: usize,
    get: impl Fn(&'static str) -> Result<String, TraceError>,
    get_u64: impl Fn(&'static str) -> Result<u64, TraceError>,
) -> Result<PduMessage, TraceError> {
    let port = |field: &'static str| -> Result<u16, TraceError> {
        let raw = get_u64(field)?;
        u16::try_from(raw).map_err(|_| TraceError::Schema {
            line,
            field,
            message: format!("port {raw} out of range 0-65535"),
        })
    };
    let state_tag = get("activityState")?;
    let activity_state = ActivityState::from_tag(&state_tag).ok_or(TraceError::Schema {
        line,
        field: "activityState",
        message: "expected one of normal|startup_shutdown|not_initialized".into(),
    })?;
    Ok(PduMessage {
        pdu_name: get("pduName")?,
        source: get("source")?,
        src_ip: get("srcIp")?,
        src_port: port("srcPort")?,
        dst_ip: get("dstIp")?,
        dst_port: port("dstPort")?,
        timestamp_us: get_u64("timestampUs")?,
        delta_time_us: get_u64("deltaTimeUs")?,
        activity_state,
    })
}

/// Parses a trace in file order (not yet normalized). Errors name the
/// 1-based line number and the offending field.
pub fn parse_trace<R: BufRead>(reader: R, format: TraceFormat) -> Result<Trace, TraceError> {
    match format {
        TraceFormat::Jsonl => parse_jsonl(reader),
        TraceFormat::Csv => parse_csv(reader),
    }
}

fn parse_jsonl<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
    let mut messages = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| TraceError::Parse { line: line_no, message: e.to_string() })?;
        let msg = build_message(
            line_no,
            |f| field_str(&value, line_no, f),
            |f| field_u64(&value, line_no, f),
        )?;
        messages.push(msg);
    }
    Ok(Trace::new(messages, ""))
}

fn parse_csv<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| TraceError::Parse { line: 1, message: e.to_string() })?
        .clone();
    let mut col: HashMap<&str, usize> = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        col.insert(h, i);
    }
    for required in CSV_HEADER {
        if !col.contains_key(required) {
            return Err(TraceError::Schema {
                line: 1,
                field: required,
                message: "missing CSV column".into(),
            });
        }
    }
    let mut messages = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line_no = idx + 2; // header is line 1
        let record = record.map_err(|e| TraceError::Parse { line: line_no, message: e.to_string() })?;
        let cell = |field: &'static str| -> Result<String, TraceError> {
            record
                .get(col[field])
                .map(str::to_string)
                .ok_or(TraceError::Schema { line: line_no, field, message: "missing cell".into() })
        };
        let cell_u64 = |field: &'static str| -> Result<u64, TraceError> {
            let raw = cell(field)?;
            raw.parse::<u64>().map_err(|_| TraceError::Schema {
                line: line_no,
                field,
                message: format!("expected a non-negative integer, got {raw:?}"),
            })
        };
        messages.push(build_message(line_no, cell, cell_u64)?);
    }
    Ok(Trace::new(messages, ""))
}

/// Serializes a trace; `parse_trace(write_trace(t))` reproduces `t`
/// field-for-field.
pub fn write_trace<W: Write>(
    trace: &Trace,
    format: TraceFormat,
    writer: &mut W,
) -> Result<(), TraceError> {
    match format {
        TraceFormat::Jsonl => {
            for msg in &trace.messages {
                let line = serde_json::to_string(msg)
                    .map_err(|e| TraceError::Parse { line: 0, message: e.to_string() })?;
                writeln!(writer, "{line}")?;
            }
        }
        TraceFormat::Csv => {
            let mut wtr = csv::Writer::from_writer(writer);
            wtr.write_record(CSV_HEADER)
                .map_err(|e| TraceError::Parse { line: 0, message: e.to_string() })?;
            for msg in &trace.messages {
                wtr.write_record([
                    msg.pdu_name.as_str(),
                    msg.source.as_str(),
                    msg.src_ip.as_str(),
                    &msg.src_port.to_string(),
                    msg.dst_ip.as_str(),
                    &msg.dst_port.to_string(),
                    &msg.timestamp_us.to_string(),
                    &msg.delta_time_us.to_string(),
                    msg.activity_state.tag(),
                ])
                .map_err(|e| TraceError::Parse { line: 0, message: e.to_string() })?;
            }
            wtr.flush()?;
        }
    }
    Ok(())
}

pub fn write_trace_to_string(trace: &Trace, format: TraceFormat) -> Result<String, TraceError> {
    let mut buf = Vec::new();
    write_trace(trace, format, &mut buf)?;
    Ok(String::from_utf8(buf).expect("trace serialization is always UTF-8"))
}

/// Sorts by (timestampUs, pduName) and recomputes each message's
/// deltaTimeUs from the previous occurrence of the same PDU. Idempotent;
/// the first occurrence of a PDU gets the sentinel 0.
pub fn normalize_trace(trace: &Trace) -> Trace {
    let mut messages = trace.messages.clone();
    // Stable sort: equal (timestamp, name) keys keep their file order.
    messages.sort_by(|a, b| {
        a.timestamp_us.cmp(&b.timestamp_us).then_with(|| a.pdu_name.cmp(&b.pdu_name))
    });
    let mut last_seen: HashMap<String, u64> = HashMap::new();
    for msg in &mut messages {
        let delta = match last_seen.get(&msg.pdu_name) {
            Some(&prev) => msg.timestamp_us - prev,
            None => 0,
        };
        msg.delta_time_us = delta;
        last_seen.insert(msg.pdu_name.clone(), msg.timestamp_us);
    }
    Trace::new(messages, trace.source_tag.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn msg(name: &str, t: u64) -> PduMessage {
        PduMessage {
            pdu_name: name.to_string(),
            source: "HCP1".to_string(),
            src_ip: "1.1.1.1".to_string(),
            src_port: 9,
            dst_ip: "2.2.2.2".to_string(),
            dst_port: 8,
            timestamp_us: t,
            delta_time_us: 0,
            activity_state: ActivityState::NormalOperation,
        }
    }

    #[test]
    fn parse_empty_stream_gives_empty_trace() {
        let t = parse_trace("".as_bytes(), TraceFormat::Jsonl).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn jsonl_single_record_round_trips_field_values() {
        let line = r#"{"pduName":"EngineRpm","source":"HCP1","srcIp":"1.1.1.1","srcPort":9,"dstIp":"2.2.2.2","dstPort":8,"timestampUs":7000,"deltaTimeUs":0,"activityState":"normal"}"#;
        let t = parse_trace(line.as_bytes(), TraceFormat::Jsonl).unwrap();
        assert_eq!(t.len(), 1);
        let m = &t.messages[0];
        assert_eq!(m.pdu_name, "EngineRpm");
        assert_eq!(m.src_port, 9);
        assert_eq!(m.timestamp_us, 7000);
        assert_eq!(m.activity_state, ActivityState::NormalOperation);
    }

    #[test]
    fn out_of_range_port_is_a_schema_error() {
        let line = r#"{"pduName":"A","source":"s","srcIp":"1.1.1.1","srcPort":70000,"dstIp":"2.2.2.2","dstPort":8,"timestampUs":0,"deltaTimeUs":0,"activityState":"normal"}"#;
        let err = parse_trace(line.as_bytes(), TraceFormat::Jsonl).unwrap_err();
        match err {
            TraceError::Schema { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "srcPort");
            }
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn missing_field_is_a_schema_error() {
        let line = r#"{"pduName":"A","source":"s","srcIp":"1.1.1.1","srcPort":1,"dstIp":"2.2.2.2","dstPort":8,"timestampUs":0,"activityState":"normal"}"#;
        let err = parse_trace(line.as_bytes(), TraceFormat::Jsonl).unwrap_err();
        assert!(matches!(err, TraceError::Schema { field: "deltaTimeUs", .. }));
    }

    #[test]
    fn malformed_json_names_the_line() {
        let good = r#"{"pduName":"A","source":"s","srcIp":"1.1.1.1","srcPort":1,"dstIp":"2.2.2.2","dstPort":8,"timestampUs":0,"deltaTimeUs":0,"activityState":"normal"}"#;
        let input = format!("{good}\n{{bad\n");
        let err = parse_trace(input.as_bytes(), TraceFormat::Jsonl).unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 2, .. }));
    }

    #[test]
    fn normalize_empty_is_empty() {
        let t = normalize_trace(&Trace::default());
        assert!(t.is_empty());
    }

    #[test]
    fn normalize_recomputes_deltas_for_one_pdu() {
        let t = Trace::new(vec![msg("A", 0), msg("A", 10_000), msg("A", 20_000)], "t");
        let n = normalize_trace(&t);
        let deltas: Vec<u64> = n.messages.iter().map(|m| m.delta_time_us).collect();
        assert_eq!(deltas, vec![0, 10_000, 10_000]);
    }

    #[test]
    fn normalize_breaks_timestamp_ties_by_name() {
        let t = Trace::new(vec![msg("B", 5000), msg("A", 5000)], "t");
        let n = normalize_trace(&t);
        let names: Vec<&str> = n.messages.iter().map(|m| m.pdu_name.as_str()).collect();
        assert_eq!(names, vec!["A", "B"]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let t = Trace::new(
            vec![msg("B", 100), msg("A", 100), msg("A", 50), msg("B", 300)],
            "t",
        );
        let once = normalize_trace(&t);
        let twice = normalize_trace(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn csv_round_trip_preserves_all_activity_states() {
        let mut t = Trace::new(vec![msg("A", 0), msg("B", 10), msg("C", 20)], "t");
        t.messages[1].activity_state = ActivityState::StartupShutdown;
        t.messages[2].activity_state = ActivityState::NotInitialized;
        let text = write_trace_to_string(&t, TraceFormat::Csv).unwrap();
        let parsed = parse_trace(text.as_bytes(), TraceFormat::Csv).unwrap();
        assert_eq!(parsed.messages, t.messages);
    }

    #[test]
    fn empty_csv_trace_writes_header_only() {
        let text = write_trace_to_string(&Trace::default(), TraceFormat::Csv).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("pduName,"));
    }

    #[test]
    fn labels_reject_non_binary_flags() {
        assert!(LineLabels::new(LabelKind::TrueLabels, vec![0, 1, 2]).is_err());
    }
}
