//! Deterministic synthetic ECU/UDP traces with injected cycle-time
//! anomalies.
//!
//! A scenario schedules each PDU at `t = k * cycle_time_us` plus optional
//! uniform jitter. Anomalies are explicit delay/drop events; ground truth
//! marks the line whose delta time falls outside the PDU's jitter envelope
//! (the line *after* a gap, which is what a delta-based detector can see).
//! The rule-based labeler emulates an unreliable traditional analyzer:
//! it misses flags, invents spurious ones, and optionally suppresses
//! everything outside normal operation.

use crate::trace::{
    normalize_trace, ActivityState, LabelKind, LineLabels, PduMessage, Trace,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("config error: {0}")]
    Config(String),
    #[error("anomaly spec error: {0}")]
    Spec(String),
}

/// Static description of one periodic PDU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PduSpec {
    pub pdu_name: String,
    pub cycle_time_us: u64,
    pub jitter_fraction: f64,
    pub source: String,
    pub src_ip: String,
    pub src_port: u16,
    pub dst_ip: String,
    pub dst_port: u16,
}

impl PduSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.cycle_time_us == 0 {
            return Err(SynthError::Config(format!("{}: cycleTimeUs must be > 0", self.pdu_name)));
        }
        if !(0.0..0.5).contains(&self.jitter_fraction) {
            return Err(SynthError::Config(format!(
                "{}: jitterFraction must be in [0, 0.5)",
                self.pdu_name
            )));
        }
        Ok(())
    }

    /// Largest legitimate |delta - cycle| under uniform jitter: both ends
    /// of a gap may be displaced by up to jitter*cycle.
    pub fn jitter_envelope_us(&self) -> u64 {
        (2.0 * self.jitter_fraction * self.cycle_time_us as f64).ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "normal")]
    NormalOperation,
    #[serde(rename = "restart")]
    SystemRestart,
}

/// Full description of one synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioConfig {
    pub pdus: Vec<PduSpec>,
    pub duration_us: u64,
    pub scenario: ScenarioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restart_at_us: Option<u64>,
    pub seed: u64,
}

impl ScenarioConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.pdus.is_empty() {
            return Err(SynthError::Config("pdus list must not be empty".into()));
        }
        for pdu in &self.pdus {
            pdu.validate()?;
        }
        match (self.scenario, self.restart_at_us) {
            (ScenarioKind::SystemRestart, Some(at)) if at >= self.duration_us => Err(
                SynthError::Config("restartAtUs must be smaller than durationUs".into()),
            ),
            (ScenarioKind::SystemRestart, None) => {
                Err(SynthError::Config("SystemRestart requires restartAtUs".into()))
            }
            (ScenarioKind::NormalOperation, Some(_)) => {
                Err(SynthError::Config("restartAtUs is only valid for SystemRestart".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn nominal_cycles(&self) -> BTreeMap<String, u64> {
        self.pdus.iter().map(|p| (p.pdu_name.clone(), p.cycle_time_us)).collect()
    }
}

// Restart model: a silent gap of GAP cycles for every PDU, then
// BURST cycles of startup-state lines, then normal operation.
const RESTART_GAP_CYCLES: u64 = 5;
const RESTART_BURST_CYCLES: u64 = 3;

/// Generates a normalized trace; byte-identical for identical configs.
pub fn generate_trace(config: &ScenarioConfig) -> Result<Trace, SynthError> {
    config.validate()?;
    let mut messages = Vec::new();
    for (pdu_idx, pdu) in config.pdus.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        rng.set_stream(pdu_idx as u64);
        let max_jitter = pdu.jitter_fraction * pdu.cycle_time_us as f64;
        let mut k = 0u64;
        loop {
            let base = k * pdu.cycle_time_us;
            if base >= config.duration_us {
                break;
            }
            // One draw per slot keeps the stream aligned even when jitter
            // is zero or the slot is silenced by a restart.
            let jitter = if max_jitter > 0.0 { rng.gen_range(-max_jitter..=max_jitter) } else { 0.0 };
            let state = match (config.scenario, config.restart_at_us) {
                (ScenarioKind::SystemRestart, Some(restart_at)) => {
                    let k0 = restart_at.div_ceil(pdu.cycle_time_us);
                    if k >= k0 && k < k0 + RESTART_GAP_CYCLES {
                        k += 1;
                        continue; // silent gap
                    } else if k == k0 + RESTART_GAP_CYCLES {
                        ActivityState::NotInitialized
                    } else if k < k0 + RESTART_GAP_CYCLES + RESTART_BURST_CYCLES {
                        ActivityState::StartupShutdown
                    } else {
                        ActivityState::NormalOperation
                    }
                }
                _ => ActivityState::NormalOperation,
            };
            let t = (base as f64 + jitter).max(0.0).round() as u64;
            messages.push(PduMessage {
                pdu_name: pdu.pdu_name.clone(),
                source: pdu.source.clone(),
                src_ip: pdu.src_ip.clone(),
                src_port: pdu.src_port,
                dst_ip: pdu.dst_ip.clone(),
                dst_port: pdu.dst_port,
                timestamp_us: t,
                delta_time_us: 0,
                activity_state: state,
            });
            k += 1;
        }
    }
    let tag = format!("synth-{:?}-seed{}", config.scenario, config.seed);
    Ok(normalize_trace(&Trace::new(messages, tag)))
}

/// Delays one occurrence of a PDU by `(delay_factor - 1) * cycle`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DelayEvent {
    pub pdu_name: String,
    pub occurrence_index: usize,
    pub delay_factor: f64,
}

/// Removes `drop_count` consecutive occurrences starting at an index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DropEvent {
    pub pdu_name: String,
    pub occurrence_index: usize,
    pub drop_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnomalySpec {
    #[serde(default)]
    pub delay_events: Vec<DelayEvent>,
    #[serde(default)]
    pub drop_events: Vec<DropEvent>,
}

impl AnomalySpec {
    pub fn is_empty(&self) -> bool {
        self.delay_events.is_empty() && self.drop_events.is_empty()
    }

    /// Builds a seeded spec of coordinated blackout events: every PDU drops
    /// `drop_choices`-many cycles starting at a common occurrence index.
    /// This is the stand-in for bus-wide stalls, and produces regions of
    /// consecutive anomalous lines (one per PDU right after each gap).
    pub fn random_blackouts(
        pdus: &[PduSpec],
        occurrence_count: usize,
        events: usize,
        drop_choices: &[usize],
        seed: u64,
    ) -> AnomalySpec {
        assert!(!drop_choices.is_empty());
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let max_drop = *drop_choices.iter().max().unwrap();
        let mut drop_events = Vec::new();
        let mut used: Vec<usize> = Vec::new();
        let lo = 2usize;
        let hi = occurrence_count.saturating_sub(max_drop + 2);
        if hi <= lo {
            return AnomalySpec::default();
        }
        for _ in 0..events {
            // Keep events far enough apart that their regions never touch.
            let idx = loop {
                let cand = rng.gen_range(lo..hi);
                if used.iter().all(|&u| cand.abs_diff(u) > 2 * max_drop + 4) {
                    break cand;
                }
            };
            used.push(idx);
            let count = drop_choices[rng.gen_range(0..drop_choices.len())];
            for pdu in pdus {
                drop_events.push(DropEvent {
                    pdu_name: pdu.pdu_name.clone(),
                    occurrence_index: idx,
                    drop_count: count,
                });
            }
        }
        drop_events.sort_by(|a, b| {
            (a.occurrence_index, &a.pdu_name).cmp(&(b.occurrence_index, &b.pdu_name))
        });
        AnomalySpec { delay_events: Vec::new(), drop_events }
    }
}

/// Applies the spec to a normalized trace and derives true labels.
///
/// A line is marked anomalous when its recomputed delta time deviates from
/// the PDU's nominal cycle by more than the jitter envelope; the first
/// occurrence of a PDU (delta sentinel 0) is exempt.
pub fn inject_anomalies(
    trace: &Trace,
    spec: &AnomalySpec,
    pdus: &[PduSpec],
) -> Result<(Trace, LineLabels), SynthError> {
    let by_name: HashMap<&str, &PduSpec> =
        pdus.iter().map(|p| (p.pdu_name.as_str(), p)).collect();

    // Occurrence lists in normalized order, indexed per PDU.
    let mut occurrence_positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (pos, msg) in trace.messages.iter().enumerate() {
        occurrence_positions.entry(msg.pdu_name.as_str()).or_default().push(pos);
    }

    let lookup = |name: &str, index: usize| -> Result<usize, SynthError> {
        let positions = occurrence_positions
            .get(name)
            .ok_or_else(|| SynthError::Spec(format!("unknown pduName {name:?}")))?;
        positions.get(index).copied().ok_or_else(|| {
            SynthError::Spec(format!(
                "{name}: occurrence index {index} out of range (have {})",
                positions.len()
            ))
        })
    };

    let mut messages = trace.messages.clone();
    let mut dropped: HashSet<usize> = HashSet::new();

    for delay in &spec.delay_events {
        if delay.delay_factor <= 1.0 {
            return Err(SynthError::Spec(format!(
                "{}: delayFactor must be > 1, got {}",
                delay.pdu_name, delay.delay_factor
            )));
        }
        let pdu = by_name
            .get(delay.pdu_name.as_str())
            .ok_or_else(|| SynthError::Spec(format!("unknown pduName {:?}", delay.pdu_name)))?;
        let pos = lookup(&delay.pdu_name, delay.occurrence_index)?;
        let shift = ((delay.delay_factor - 1.0) * pdu.cycle_time_us as f64).round() as u64;
        messages[pos].timestamp_us += shift;
    }
    for drop in &spec.drop_events {
        if drop.drop_count == 0 {
            return Err(SynthError::Spec(format!("{}: dropCount must be > 0", drop.pdu_name)));
        }
        for i in 0..drop.drop_count {
            dropped.insert(lookup(&drop.pdu_name, drop.occurrence_index + i)?);
        }
    }

    let kept: Vec<PduMessage> = messages
        .into_iter()
        .enumerate()
        .filter_map(|(pos, msg)| (!dropped.contains(&pos)).then_some(msg))
        .collect();
    let out = normalize_trace(&Trace::new(kept, trace.source_tag.clone()));
    let labels = true_labels(&out, pdus)?;
    Ok((out, labels))
}

/// Deviation-based ground truth over a normalized trace.
pub fn true_labels(trace: &Trace, pdus: &[PduSpec]) -> Result<LineLabels, SynthError> {
    let by_name: HashMap<&str, &PduSpec> =
        pdus.iter().map(|p| (p.pdu_name.as_str(), p)).collect();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut flags = Vec::with_capacity(trace.len());
    for msg in &trace.messages {
        let pdu = by_name
            .get(msg.pdu_name.as_str())
            .ok_or_else(|| SynthError::Spec(format!("unknown pduName {:?}", msg.pdu_name)))?;
        let first = seen.insert(msg.pdu_name.as_str());
        let deviation = msg.delta_time_us.abs_diff(pdu.cycle_time_us);
        let flag = if first { 0 } else { u8::from(deviation > pdu.jitter_envelope_us()) };
        flags.push(flag);
    }
    Ok(LineLabels::new(LabelKind::TrueLabels, flags).expect("flags are binary"))
}

/// Knobs of the unreliable rule-based labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LabelerConfig {
    pub tolerance_fraction: f64,
    pub miss_probability: f64,
    pub false_positive_rate: f64,
    pub suppress_during_startup: bool,
    pub seed: u64,
}

impl LabelerConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.tolerance_fraction <= 0.0 {
            return Err(SynthError::Config("toleranceFraction must be > 0".into()));
        }
        for (name, p) in
            [("missProbability", self.miss_probability), ("falsePositiveRate", self.false_positive_rate)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Emulates the flawed traditional analyzer: threshold rule on delta
/// deviation, then seeded misses, spurious flags, and optional suppression
/// outside normal operation. First occurrences (delta sentinel 0) are not
/// flagged.
pub fn rule_labeler(
    trace: &Trace,
    cfg: &LabelerConfig,
    nominal_cycles: &BTreeMap<String, u64>,
) -> Result<LineLabels, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut seen: HashSet<&str> = HashSet::new();
    let mut flags = Vec::with_capacity(trace.len());
    for msg in &trace.messages {
        let nominal = *nominal_cycles.get(&msg.pdu_name).ok_or_else(|| {
            SynthError::Config(format!("no nominal cycle for pduName {:?}", msg.pdu_name))
        })?;
        let first = seen.insert(msg.pdu_name.as_str());
        let deviation = msg.delta_time_us.abs_diff(nominal) as f64;
        let base = !first && deviation > cfg.tolerance_fraction * nominal as f64;
        // One uniform draw per line keeps the stream aligned across
        // configurations that share a seed.
        let u: f64 = rng.gen();
        let mut flag = if base { u >= cfg.miss_probability } else { u < cfg.false_positive_rate };
        if cfg.suppress_during_startup && msg.activity_state != ActivityState::NormalOperation {
            flag = false;
        }
        flags.push(u8::from(flag));
    }
    Ok(LineLabels::new(LabelKind::ObservedLabels, flags).expect("flags are binary"))
}

/// Convenience: fills the RNG stream deterministically; exposed so tests
/// and sweeps can derive sub-seeds without collisions.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.next_u64()
}
