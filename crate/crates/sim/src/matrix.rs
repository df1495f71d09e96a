//! Built-in latency matrices and node placement.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixName {
    /// Every hop, loopback included, takes one time unit.
    Unit,
    /// Ten cloud regions, round-trip times in milliseconds.
    Azure10,
    /// One datacenter: 1 ms hops.
    Lan,
}

pub const AZURE10_REGIONS: [&str; 10] = [
    "East US",
    "West US",
    "South Central US",
    "Canada Central",
    "Canada East",
    "North Central US",
    "UK South",
    "North Europe",
    "West Europe",
    "South East Asia",
];

/// Round-trip times between regions, in milliseconds. Bands: North America
/// under 30, North America to Europe under 150, Canada to South East Asia
/// around 240. Pairs without a quoted band are interpolated.
#[rustfmt::skip]
const AZURE10_RTT: [[u64; 10]; 10] = [
    //  EUS  WUS SCUS   CC   CE NCUS  UKS   NE   WE  SEA
    [    2,  28,  22,  18,  20,  16,  80,  86,  90, 230], // East US
    [   28,   2,  26,  28,  29,  24, 140, 146, 148, 170], // West US
    [   22,  26,   2,  27,  29,  18, 110, 116, 120, 210], // South Central US
    [   18,  28,  27,   2,  12,  14,  90,  96, 100, 240], // Canada Central
    [   20,  29,  29,  12,   2,  20,  84,  90,  96, 244], // Canada East
    [   16,  24,  18,  14,  20,   2,  96, 100, 106, 220], // North Central US
    [   80, 140, 110,  90,  84,  96,   2,  14,  10, 160], // UK South
    [   86, 146, 116,  96,  90, 100,  14,   2,  18, 170], // North Europe
    [   90, 148, 120, 100,  96, 106,  10,  18,   2, 156], // West Europe
    [  230, 170, 210, 240, 244, 220, 160, 170, 156,   2], // South East Asia
];

/// One-way delays between placed nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    name: MatrixName,
    replicas: Vec<usize>,
    clients: Vec<usize>,
}

impl Placement {
    /// Replicas and clients are assigned to regions round-robin, so replica 0
    /// (the first primary) sits in the first region.
    pub fn new(name: MatrixName, replicas: usize, clients: usize) -> Self {
        let regions = match name {
            MatrixName::Azure10 => AZURE10_REGIONS.len(),
            MatrixName::Unit | MatrixName::Lan => 1,
        };
        Placement {
            name,
            replicas: (0..replicas).map(|i| i % regions).collect(),
            clients: (0..clients).map(|i| i % regions).collect(),
        }
    }

    pub fn name(&self) -> MatrixName {
        self.name
    }

    pub fn replica_region(&self, r: usize) -> usize {
        self.replicas[r]
    }

    pub fn client_region(&self, c: usize) -> usize {
        self.clients[c]
    }

    pub fn region_delay(&self, a: usize, b: usize) -> u64 {
        match self.name {
            MatrixName::Unit | MatrixName::Lan => 1,
            MatrixName::Azure10 => (AZURE10_RTT[a][b] / 2).max(1),
        }
    }

    pub fn replica_delay(&self, a: usize, b: usize) -> u64 {
        self.region_delay(self.replicas[a], self.replicas[b])
    }

    pub fn client_delay(&self, client: usize, replica: usize) -> u64 {
        self.region_delay(self.clients[client], self.replicas[replica])
    }

    /// Whether latency figures from this matrix approximate a real deployment
    /// rather than being exact by construction.
    pub fn is_approximation(&self) -> bool {
        self.name == MatrixName::Azure10
    }
}
