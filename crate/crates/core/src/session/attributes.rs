use serde::{Deserialize, Serialize};

use crate::capture::Transport;
use crate::flowtable::{DomainType, FlowKey};

pub const NUM_ATTRIBUTES: usize = 40;

/// Attribute names, in vector order.
pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = [
    "tcp_prim_mdn_vol",
    "tcp_prim_mdn_pkt_ct",
    "tcp_prim_mdn_pkt_sz",
    "tcp_prim_std_vol",
    "tcp_prim_std_pkt_ct",
    "tcp_prim_std_pkt_sz",
    "tcp_actv_mdn_vol",
    "tcp_actv_mdn_pkt_ct",
    "tcp_actv_mdn_pkt_sz",
    "tcp_actv_std_vol",
    "tcp_actv_std_pkt_ct",
    "tcp_actv_std_pkt_sz",
    "udp_prim_mdn_vol",
    "udp_prim_mdn_pkt_ct",
    "udp_prim_mdn_pkt_sz",
    "udp_prim_std_vol",
    "udp_prim_std_pkt_ct",
    "udp_prim_std_pkt_sz",
    "udp_actv_mdn_vol",
    "udp_actv_mdn_pkt_ct",
    "udp_actv_mdn_pkt_sz",
    "udp_actv_std_vol",
    "udp_actv_std_pkt_ct",
    "udp_actv_std_pkt_sz",
    "tcp_prim_#_cncr_flow",
    "tcp_prim_#_new_flow",
    "tcp_prim_vol",
    "tcp_prim_pkt_ct",
    "tcp_actv_#_cncr_flow",
    "tcp_actv_#_new_flow",
    "tcp_actv_vol",
    "tcp_actv_pkt_ct",
    "udp_prim_#_cncr_flow",
    "udp_prim_#_new_flow",
    "udp_prim_vol",
    "udp_prim_pkt_ct",
    "udp_actv_#_cncr_flow",
    "udp_actv_#_new_flow",
    "udp_actv_vol",
    "udp_actv_pkt_ct",
];

/// Traffic class of a tracked flow, in attribute-block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlowClass {
    TcpPrimary = 0,
    TcpTimeCritical = 1,
    UdpPrimary = 2,
    UdpTimeCritical = 3,
}

impl FlowClass {
    pub const ALL: [FlowClass; 4] =
        [FlowClass::TcpPrimary, FlowClass::TcpTimeCritical, FlowClass::UdpPrimary, FlowClass::UdpTimeCritical];

    pub fn of(transport: Transport, domain: DomainType) -> FlowClass {
        match (transport, domain) {
            (Transport::Udp, DomainType::Primary) => FlowClass::UdpPrimary,
            (Transport::Udp, DomainType::TimeCritical) => FlowClass::UdpTimeCritical,
            (_, DomainType::Primary) => FlowClass::TcpPrimary,
            (_, DomainType::TimeCritical) => FlowClass::TcpTimeCritical,
        }
    }

    /// First index of this class's six flow-level attributes.
    pub fn flow_block(self) -> usize {
        6 * self as usize
    }

    /// First index of this class's four host-level attributes.
    pub fn host_block(self) -> usize {
        24 + 4 * self as usize
    }
}

/// One tracked flow's counters within one interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowIntervalStats {
    pub key: FlowKey,
    pub domain_type: DomainType,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub pkts_up: u64,
    pub pkts_down: u64,
    /// Started being tracked during this interval.
    pub is_new: bool,
}

impl FlowIntervalStats {
    pub fn class(&self) -> FlowClass {
        FlowClass::of(self.key.transport, self.domain_type)
    }

    pub fn volume(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }

    pub fn packets(&self) -> u64 {
        self.pkts_up + self.pkts_down
    }

    pub fn mean_packet_size(&self) -> f64 {
        match self.packets() {
            0 => 0.0,
            n => self.volume() as f64 / n as f64,
        }
    }
}

/// Statistics of one closed monitoring interval: every flow counted as
/// concurrent in it, ordered by key.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub index: u64,
    pub flows: Vec<FlowIntervalStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeVector(pub [f64; NUM_ATTRIBUTES]);

impl Serialize for AttributeVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AttributeVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        let n = v.len();
        v.try_into()
            .map(AttributeVector)
            .map_err(|_| serde::de::Error::invalid_length(n, &"40 attributes"))
    }
}

impl Default for AttributeVector {
    fn default() -> Self {
        AttributeVector([0.0; NUM_ATTRIBUTES])
    }
}

impl AttributeVector {
    /// Attribute by its 1-based label number (A1..A40).
    pub fn get(&self, label: usize) -> f64 {
        self.0[label - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Median; the mean of the two middle values for an even count.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Population standard deviation (divides by n).
pub fn population_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

pub fn compute_attributes(stats: &IntervalStats) -> AttributeVector {
    let mut a = [0.0; NUM_ATTRIBUTES];
    for class in FlowClass::ALL {
        let flows: Vec<&FlowIntervalStats> = stats.flows.iter().filter(|f| f.class() == class).collect();
        if flows.is_empty() {
            continue;
        }
        let mut vol: Vec<f64> = flows.iter().map(|f| f.volume() as f64).collect();
        let mut pkts: Vec<f64> = flows.iter().map(|f| f.packets() as f64).collect();
        let mut size: Vec<f64> = flows.iter().map(|f| f.mean_packet_size()).collect();
        let b = class.flow_block();
        a[b + 3] = population_std(&vol);
        a[b + 4] = population_std(&pkts);
        a[b + 5] = population_std(&size);
        a[b] = median(&mut vol);
        a[b + 1] = median(&mut pkts);
        a[b + 2] = median(&mut size);

        let h = class.host_block();
        a[h] = flows.len() as f64;
        a[h + 1] = flows.iter().filter(|f| f.is_new).count() as f64;
        a[h + 2] = flows.iter().map(|f| f.volume()).sum::<u64>() as f64;
        a[h + 3] = flows.iter().map(|f| f.packets()).sum::<u64>() as f64;
    }
    AttributeVector(a)
}
