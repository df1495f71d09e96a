//! Scenario files: what to run and which faults to inject.

use std::collections::BTreeSet;
use std::path::Path;

use duobft_core::messages::{ResponseModel, DEFAULT_BATCH_SIZE, DEFAULT_PAYLOAD_SIZE};
use duobft_core::quorum::{duobft_params, flexminbft_params, QuorumError, QuorumParams};
use duobft_core::replica::{CommPattern, Pacing};
use serde::{Deserialize, Serialize};

use crate::matrix::MatrixName;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Quorum(#[from] QuorumError),
    #[error("DuoBFT needs n = 3f + 1 (got n = {n}, f = {f})")]
    DuoSize { n: usize, f: usize },
    #[error("{count} faulty replicas exceed the budget f = {f}")]
    FaultBudget { count: usize, f: usize },
    #[error("fault script names replica {0}, which does not exist")]
    UnknownNode(u32),
    #[error("replica {0} has more than one fault entry")]
    DuplicateFault(u32),
    #[error("fault `{behavior}` needs `{field}`")]
    MissingField {
        behavior: &'static str,
        field: &'static str,
    },
    #[error("bad response mix `{0}`; expected both, hybrid, bft or a percentage like 50%")]
    ResponseMix(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    FlexMinbft,
    Duobft,
    McDuobft,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::FlexMinbft => "flex_minbft",
            Protocol::Duobft => "duobft",
            Protocol::McDuobft => "mc_duobft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Comm {
    #[default]
    Quadratic,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PacingName {
    HybridQc,
    #[default]
    BftQc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    /// Every delivery, drop and timer, plus protocol events.
    #[default]
    Full,
    /// Protocol events only.
    Events,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    /// Replica groups that cannot reach each other; unlisted replicas form one more group.
    pub groups: Vec<Vec<u32>>,
    pub from_ms: u64,
    pub to_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Network {
    pub drop_prob: f64,
    pub dup_prob: f64,
    pub jitter_ms: u64,
    /// Before this time, deliveries may take up to `pre_gst_extra_ms` longer.
    pub gst_ms: u64,
    pub pre_gst_extra_ms: u64,
    pub retransmit_ms: u64,
    pub partitions: Vec<Partition>,
}

impl Default for Network {
    fn default() -> Self {
        Network {
            drop_prob: 0.0,
            dup_prob: 0.0,
            jitter_ms: 0,
            gst_ms: 0,
            pre_gst_extra_ms: 0,
            retransmit_ms: 50,
            partitions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stop {
    /// Clients issue no new requests after this time.
    pub submit_until_ms: u64,
    /// Hard limit on simulated time.
    pub max_time_ms: u64,
}

impl Default for Stop {
    fn default() -> Self {
        Stop {
            submit_until_ms: 10_000,
            max_time_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Crash,
    SilentPrimary,
    Equivocate,
    CompromisedUsig,
    DropOutbound,
    TruncateLog,
    Repropose,
}

/// One faulty replica, as written in the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub node: u32,
    pub behavior: BehaviorKind,
    #[serde(default)]
    pub at_ms: Option<u64>,
    #[serde(default)]
    pub from_view: Option<u64>,
    #[serde(default)]
    pub prob: Option<f64>,
    /// Number of own log entries a truncating replica omits.
    #[serde(default)]
    pub omit: Option<usize>,
}

/// A validated fault.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Behavior {
    Crash {
        at_ms: u64,
    },
    /// Sends nothing while it is the primary of its current view.
    SilentPrimary {
        from_view: u64,
    },
    /// Sends conflicting proposals reusing one attestation.
    Equivocate {
        at_ms: u64,
    },
    /// Forges a second attestation for one counter and splits the replicas.
    CompromisedUsig {
        at_ms: u64,
    },
    DropOutbound {
        prob: f64,
    },
    TruncateLog {
        omit: usize,
    },
    /// Proposes every batch twice under fresh counters.
    Repropose,
}

impl Behavior {
    pub fn is_compromised(&self) -> bool {
        matches!(self, Behavior::CompromisedUsig { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub protocol: Protocol,
    pub n: usize,
    pub f: usize,
    #[serde(default)]
    pub comm: Comm,
    #[serde(default)]
    pub pacing: PacingName,
    #[serde(default = "one")]
    pub instances: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_payload")]
    pub payload_size: usize,
    #[serde(default = "one_usize")]
    pub clients: usize,
    /// `both`, `hybrid`, `bft`, or the percentage of hybrid clients (`"50%"`).
    #[serde(default = "default_response")]
    pub response: String,
    /// Requests each client issues; unlimited until `stop.submit_until_ms` if absent.
    #[serde(default)]
    pub requests_per_client: Option<u64>,
    #[serde(default = "default_matrix")]
    pub matrix: MatrixName,
    #[serde(default = "default_timeout")]
    pub base_timeout_ms: u64,
    #[serde(default = "default_client_timeout")]
    pub client_timeout_ms: u64,
    #[serde(default)]
    pub trace: TraceLevel,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub network: Network,
    #[serde(default)]
    pub stop: Stop,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

fn one() -> u32 {
    1
}
fn one_usize() -> usize {
    1
}
fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_payload() -> usize {
    DEFAULT_PAYLOAD_SIZE
}
fn default_response() -> String {
    "both".into()
}
fn default_matrix() -> MatrixName {
    MatrixName::Unit
}
fn default_timeout() -> u64 {
    500
}
fn default_client_timeout() -> u64 {
    5_000
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl Scenario {
    /// A fault-free scenario with defaults for everything but the size.
    pub fn new(protocol: Protocol, n: usize, f: usize) -> Self {
        Scenario {
            protocol,
            n,
            f,
            comm: Comm::default(),
            pacing: PacingName::default(),
            instances: 1,
            batch_size: DEFAULT_BATCH_SIZE,
            payload_size: DEFAULT_PAYLOAD_SIZE,
            clients: 1,
            response: default_response(),
            requests_per_client: None,
            matrix: MatrixName::Unit,
            base_timeout_ms: default_timeout(),
            client_timeout_ms: default_client_timeout(),
            trace: TraceLevel::Full,
            seeds: default_seeds(),
            network: Network::default(),
            stop: Stop::default(),
            faults: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn params(&self) -> Result<QuorumParams, ScenarioError> {
        match self.protocol {
            Protocol::FlexMinbft => Ok(flexminbft_params(self.n, self.f)?),
            Protocol::Duobft | Protocol::McDuobft => {
                let p = duobft_params(self.f)?;
                if p.n != self.n {
                    return Err(ScenarioError::DuoSize { n: self.n, f: self.f });
                }
                Ok(p)
            }
        }
    }

    pub fn lanes(&self) -> u32 {
        match self.protocol {
            Protocol::McDuobft => self.instances.max(1),
            Protocol::Duobft | Protocol::FlexMinbft => 1,
        }
    }

    pub fn comm_pattern(&self) -> CommPattern {
        match self.comm {
            Comm::Quadratic => CommPattern::Quadratic,
            Comm::Linear => CommPattern::Linear,
        }
    }

    pub fn pacing_mode(&self) -> Pacing {
        match self.pacing {
            PacingName::HybridQc => Pacing::HybridQc,
            PacingName::BftQc => Pacing::BftQc,
        }
    }

    /// Response model of each client.
    pub fn client_models(&self) -> Result<Vec<ResponseModel>, ScenarioError> {
        let r = self.response.trim();
        let fixed = match r {
            "both" => Some(ResponseModel::Both),
            "hybrid" => Some(ResponseModel::Hybrid),
            "bft" => Some(ResponseModel::Bft),
            _ => None,
        };
        if let Some(m) = fixed {
            return Ok(vec![m; self.clients]);
        }
        let pct: f64 = r
            .strip_suffix('%')
            .and_then(|p| p.trim().parse().ok())
            .filter(|p| (0.0..=100.0).contains(p))
            .ok_or_else(|| ScenarioError::ResponseMix(self.response.clone()))?;
        let hybrid = (self.clients as f64 * pct / 100.0).round() as usize;
        Ok((0..self.clients)
            .map(|i| {
                if i < hybrid {
                    ResponseModel::Hybrid
                } else {
                    ResponseModel::Bft
                }
            })
            .collect())
    }

    /// Validated behaviors indexed by replica.
    pub fn behaviors(&self) -> Result<Vec<Option<Behavior>>, ScenarioError> {
        let mut out = vec![None; self.n];
        for spec in &self.faults {
            let slot = out
                .get_mut(spec.node as usize)
                .ok_or(ScenarioError::UnknownNode(spec.node))?;
            if slot.is_some() {
                return Err(ScenarioError::DuplicateFault(spec.node));
            }
            let need = |v: Option<u64>, behavior, field| v.ok_or(ScenarioError::MissingField { behavior, field });
            *slot = Some(match spec.behavior {
                BehaviorKind::Crash => Behavior::Crash {
                    at_ms: need(spec.at_ms, "crash", "at_ms")?,
                },
                BehaviorKind::SilentPrimary => Behavior::SilentPrimary {
                    from_view: spec.from_view.unwrap_or(0),
                },
                BehaviorKind::Equivocate => Behavior::Equivocate {
                    at_ms: spec.at_ms.unwrap_or(0),
                },
                BehaviorKind::CompromisedUsig => Behavior::CompromisedUsig {
                    at_ms: spec.at_ms.unwrap_or(0),
                },
                BehaviorKind::DropOutbound => {
                    let prob = spec.prob.ok_or(ScenarioError::MissingField {
                        behavior: "drop_outbound",
                        field: "prob",
                    })?;
                    Behavior::DropOutbound { prob }
                }
                BehaviorKind::TruncateLog => Behavior::TruncateLog {
                    omit: spec.omit.unwrap_or(1).max(1),
                },
                BehaviorKind::Repropose => Behavior::Repropose,
            });
        }
        let count = out.iter().filter(|b| b.is_some()).count();
        if count > self.f {
            return Err(ScenarioError::FaultBudget { count, f: self.f });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.params()?;
        self.behaviors()?;
        self.client_models()?;
        let invalid = |m: &str| Err(ScenarioError::Invalid(m.into()));
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if self.instances == 0 {
            return invalid("instances must be positive");
        }
        for (name, p) in [
            ("drop_prob", self.network.drop_prob),
            ("dup_prob", self.network.dup_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ScenarioError::Invalid(format!("{name} must be in [0, 1]")));
            }
        }
        if self.network.retransmit_ms == 0 {
            return invalid("retransmit_ms must be positive");
        }
        for part in &self.network.partitions {
            let mut seen = BTreeSet::new();
            for r in part.groups.iter().flatten() {
                if *r as usize >= self.n {
                    return Err(ScenarioError::UnknownNode(*r));
                }
                if !seen.insert(*r) {
                    return invalid("a replica appears in two partition groups");
                }
            }
        }
        Ok(())
    }

    /// A copy with one setting replaced. `key` is a top-level field or a
    /// dotted path such as `network.drop_prob`; `value` is parsed as a TOML
    /// value and falls back to a plain string.
    pub fn with_param(&self, key: &str, value: &str) -> Result<Self, ScenarioError> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml())?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let (path, last) = match key.rsplit_once('.') {
            Some((path, last)) => (path.split('.').collect::<Vec<_>>(), last),
            None => (Vec::new(), key),
        };
        let mut table = &mut doc;
        for part in path {
            table = table
                .entry(part)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ScenarioError::Invalid(format!("`{part}` is not a section")))?;
        }
        table.insert(last.to_string(), parsed);
        Self::from_toml(&toml::to_string(&doc).expect("table serializes"))
    }

    pub fn faulty(&self) -> Vec<u32> {
        self.faults.iter().map(|f| f.node).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
protocol = "duobft"
n = 4
f = 1
clients = 2
response = "50%"
[network]
drop_prob = 0.1
[[faults]]
node = 3
behavior = "crash"
at_ms = 100
"#;

    #[test]
    fn parses_and_validates() {
        let s = Scenario::from_toml(BASIC).unwrap();
        assert_eq!(s.params().unwrap().commit_bft, Some(3));
        assert_eq!(s.behaviors().unwrap()[3], Some(Behavior::Crash { at_ms: 100 }));
        assert_eq!(
            s.client_models().unwrap(),
            vec![ResponseModel::Hybrid, ResponseModel::Bft]
        );
        assert_eq!(s.batch_size, 200);
        assert_eq!(s.payload_size, 512);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = BASIC.replace("at_ms = 100", "at_ms = 100\natt_ms = 5");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Parse(_))));
        let text = BASIC.replace("clients = 2", "client = 2");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn fault_budget_is_enforced() {
        let text = format!("{BASIC}\n[[faults]]\nnode = 2\nbehavior = \"silent_primary\"\n");
        assert!(matches!(
            Scenario::from_toml(&text),
            Err(ScenarioError::FaultBudget { count: 2, f: 1 })
        ));
    }

    #[test]
    fn duobft_size_must_match() {
        let text = BASIC.replace("n = 4", "n = 5");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::DuoSize { .. })));
    }

    #[test]
    fn flexible_minbft_accepts_small_clusters() {
        let mut s = Scenario::new(Protocol::FlexMinbft, 3, 1);
        assert!(s.validate().is_ok());
        s.n = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn missing_fault_parameters_are_reported() {
        let text = BASIC.replace("at_ms = 100", "");
        assert!(matches!(
            Scenario::from_toml(&text),
            Err(ScenarioError::MissingField { behavior: "crash", .. })
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::from_toml(BASIC).unwrap();
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn with_param_sets_top_level_and_nested_fields() {
        let s = Scenario::new(Protocol::Duobft, 4, 1);
        assert_eq!(s.with_param("batch_size", "10").unwrap().batch_size, 10);
        assert_eq!(
            s.with_param("network.drop_prob", "0.25").unwrap().network.drop_prob,
            0.25
        );
        assert_eq!(s.with_param("response", "50%").unwrap().response, "50%");
        assert!(matches!(s.with_param("batch_sise", "10"), Err(ScenarioError::Parse(_))));
        assert!(s.with_param("batch_size", "0").is_err());
    }
}
