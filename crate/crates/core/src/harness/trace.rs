//! Timestamped packet-length sequences and their CSV form.
//!
//! One event per line: `flow_id,direction,t_micros,bytes,dir`, where
//! `direction` is the observation point (`ingress` for real connections,
//! `egress` for the proxy-to-proxy segment) and `dir` is `to_service` or
//! `to_client`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::FRAME_HEADER_LEN;

pub type FlowId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ingress,
    Egress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketDir {
    ToService,
    ToClient,
}

impl PacketDir {
    pub const BOTH: [PacketDir; 2] = [PacketDir::ToService, PacketDir::ToClient];
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Ingress => "ingress",
            Direction::Egress => "egress",
        })
    }
}

impl FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ingress" => Ok(Direction::Ingress),
            "egress" => Ok(Direction::Egress),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowEvent {
    pub t_micros: u64,
    pub bytes: u32,
    pub dir: PacketDir,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("flow {flow}: timestamp {t} precedes previous event at {prev}")]
    OutOfOrder { flow: FlowId, t: u64, prev: u64 },
    #[error("flow {flow}: zero-length event at {t}")]
    Empty { flow: FlowId, t: u64 },
}

/// Packet sequence of one flow as seen at one observation point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowTrace {
    flow_id: FlowId,
    direction: Direction,
    events: Vec<FlowEvent>,
}

impl FlowTrace {
    pub fn new(flow_id: FlowId, direction: Direction) -> Self {
        FlowTrace {
            flow_id,
            direction,
            events: Vec::new(),
        }
    }

    pub fn from_events(
        flow_id: FlowId,
        direction: Direction,
        events: Vec<FlowEvent>,
    ) -> Result<Self, TraceError> {
        let mut trace = FlowTrace::new(flow_id, direction);
        for e in events {
            trace.push(e)?;
        }
        Ok(trace)
    }

    pub fn push(&mut self, event: FlowEvent) -> Result<(), TraceError> {
        if event.bytes == 0 {
            return Err(TraceError::Empty {
                flow: self.flow_id,
                t: event.t_micros,
            });
        }
        if let Some(last) = self.events.last() {
            if event.t_micros < last.t_micros {
                return Err(TraceError::OutOfOrder {
                    flow: self.flow_id,
                    t: event.t_micros,
                    prev: last.t_micros,
                });
            }
        }
        self.events.push(event);
        Ok(())
    }

    pub fn flow_id(&self) -> FlowId {
        self.flow_id
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn events(&self) -> &[FlowEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn start(&self) -> Option<u64> {
        self.events.first().map(|e| e.t_micros)
    }

    pub fn end(&self) -> Option<u64> {
        self.events.last().map(|e| e.t_micros)
    }

    pub fn total_bytes(&self) -> u64 {
        self.events.iter().map(|e| e.bytes as u64).sum()
    }

    /// True for events that carry no application bytes: on the egress
    /// segment these are bare 8-byte control frames. Relay frames always
    /// carry at least one payload byte.
    pub fn is_control(&self, event: &FlowEvent) -> bool {
        self.direction == Direction::Egress && event.bytes as usize == FRAME_HEADER_LEN
    }

    pub fn payload_events(&self) -> impl Iterator<Item = &FlowEvent> + '_ {
        self.events.iter().filter(|e| !self.is_control(e))
    }

    /// Merges several traces into one, ordered by time (stable for ties).
    pub fn merged<'a>(
        flow_id: FlowId,
        direction: Direction,
        traces: impl IntoIterator<Item = &'a FlowTrace>,
    ) -> FlowTrace {
        let mut events: Vec<FlowEvent> = traces
            .into_iter()
            .flat_map(|t| t.events.iter().copied())
            .collect();
        events.sort_by_key(|e| e.t_micros);
        FlowTrace {
            flow_id,
            direction,
            events,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    flow_id: FlowId,
    direction: Direction,
    t_micros: u64,
    bytes: u32,
    dir: PacketDir,
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_traces_csv<W: Write>(traces: &[FlowTrace], out: W) -> Result<(), CsvError> {
    let mut writer = csv::Writer::from_writer(out);
    let mut ordered: Vec<&FlowTrace> = traces.iter().collect();
    ordered.sort_by_key(|t| (t.direction, t.flow_id));
    for trace in ordered {
        for e in &trace.events {
            writer.serialize(Record {
                flow_id: trace.flow_id,
                direction: trace.direction,
                t_micros: e.t_micros,
                bytes: e.bytes,
                dir: e.dir,
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Parses a trace CSV. Errors carry the 1-based line number.
pub fn read_traces_csv<R: Read>(input: R) -> Result<Vec<FlowTrace>, CsvError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut flows: BTreeMap<(Direction, FlowId), FlowTrace> = BTreeMap::new();
    let headers = reader.headers()?.clone();
    for result in reader.records() {
        let parse_err = |line: u64, err: &dyn fmt::Display| CsvError::Parse {
            line,
            message: err.to_string(),
        };
        let row = result.map_err(|err| parse_err(err.position().map_or(0, |p| p.line()), &err))?;
        let line = row.position().map_or(0, |p| p.line());
        let record: Record = row
            .deserialize(Some(&headers))
            .map_err(|err| parse_err(line, &err))?;
        let trace = flows
            .entry((record.direction, record.flow_id))
            .or_insert_with(|| FlowTrace::new(record.flow_id, record.direction));
        trace
            .push(FlowEvent {
                t_micros: record.t_micros,
                bytes: record.bytes,
                dir: record.dir,
            })
            .map_err(|err| CsvError::Parse {
                line,
                message: err.to_string(),
            })?;
    }
    Ok(flows.into_values().collect())
}
