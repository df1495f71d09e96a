//! Newline-delimited JSON traces.
//!
//! The first line is a [`Header`]; every other line is one [`Record`]
//! tagged by `kind`. A complete trace ends with an `end` record.

use std::io::{self, BufRead, Write};

use duobft_core::messages::FaultModel;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Hybrid,
    Bft,
}

impl From<FaultModel> for Model {
    fn from(m: FaultModel) -> Self {
        match m {
            FaultModel::Hybrid => Model::Hybrid,
            FaultModel::Bft => Model::Bft,
        }
    }
}

impl Model {
    pub const ALL: [Model; 2] = [Model::Hybrid, Model::Bft];

    pub fn name(self) -> &'static str {
        match self {
            Model::Hybrid => "hybrid",
            Model::Bft => "bft",
        }
    }
}

/// Run parameters the checkers need. The protocol name is deliberately
/// absent, so runs that behave identically produce identical traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub seed: u64,
    pub n: usize,
    pub f: usize,
    pub lanes: u32,
    /// Replicas running a fault script.
    pub faulty: Vec<u32>,
    /// Replicas whose trusted counter is compromised.
    pub compromised: Vec<u32>,
    pub gst_ms: u64,
    pub submit_until_ms: u64,
    pub matrix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Deliver {
        t: u64,
        from: u32,
        to: u32,
        msg: String,
        /// Hex SHA-256 of the canonical message encoding.
        digest: String,
    },
    Drop {
        t: u64,
        from: u32,
        to: u32,
        msg: String,
    },
    Timer {
        t: u64,
        node: u32,
        timer: String,
    },
    Request {
        t: u64,
        client: u32,
        seq: u64,
        awaits: Vec<Model>,
    },
    Accept {
        t: u64,
        client: u32,
        seq: u64,
        model: Model,
        latency: u64,
    },
    Committed {
        t: u64,
        node: u32,
        model: Model,
        lane: u32,
        index: u64,
        digest: String,
    },
    Executed {
        t: u64,
        node: u32,
        model: Model,
        /// `(client, sequence)` pairs in execution order.
        commands: Vec<(u32, u64)>,
    },
    ViewInstall {
        t: u64,
        node: u32,
        view: u64,
    },
    EnterVc {
        t: u64,
        node: u32,
        view: u64,
        requests: usize,
    },
    Evidence {
        t: u64,
        node: u32,
        detail: String,
    },
    End {
        t: u64,
        deliveries: u64,
        protocol_deliveries: u64,
        drops: u64,
        /// True if the run stopped at the time limit with work still queued.
        truncated: bool,
    },
}

impl Record {
    pub fn time(&self) -> u64 {
        match self {
            Record::Deliver { t, .. }
            | Record::Drop { t, .. }
            | Record::Timer { t, .. }
            | Record::Request { t, .. }
            | Record::Accept { t, .. }
            | Record::Committed { t, .. }
            | Record::Executed { t, .. }
            | Record::ViewInstall { t, .. }
            | Record::EnterVc { t, .. }
            | Record::Evidence { t, .. }
            | Record::End { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub header: Option<Header>,
    pub records: Vec<Record>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] io::Error),
    #[error("trace line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("trace has no header")]
    MissingHeader,
}

impl Trace {
    pub fn new(header: Header) -> Self {
        Trace {
            header: Some(header),
            records: Vec::new(),
        }
    }

    pub fn header(&self) -> Result<&Header, TraceError> {
        self.header.as_ref().ok_or(TraceError::MissingHeader)
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.records.last(), Some(Record::End { .. }))
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let header = self.header()?;
        serde_json::to_writer(&mut w, header).map_err(|source| TraceError::Json { line: 1, source })?;
        w.write_all(b"\n")?;
        for (i, r) in self.records.iter().enumerate() {
            serde_json::to_writer(&mut w, r).map_err(|source| TraceError::Json { line: i + 2, source })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("in-memory write");
        buf
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut trace = Trace::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let json = |source| TraceError::Json { line: i + 1, source };
            if trace.header.is_none() {
                trace.header = Some(serde_json::from_str(&line).map_err(json)?);
            } else {
                trace.records.push(serde_json::from_str(&line).map_err(json)?);
            }
        }
        trace.header()?;
        Ok(trace)
    }
}
