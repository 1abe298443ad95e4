//! Machine-readable step trace. Each block is one pass of an algorithm's
//! loop body; phases inside a block never go backwards.

use serde::{Deserialize, Serialize};

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Rollout,
    Evaluate,
    Aggregate,
    Improve,
    Emit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub block: u64,
    pub phase: Phase,
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLog {
    pub events: Vec<TraceEvent>,
}

impl TraceLog {
    pub fn new() -> Self {
        TraceLog::default()
    }

    pub fn push(&mut self, block: u64, phase: Phase, label: &str, count: usize) {
        self.events.push(TraceEvent {
            seq: self.events.len() as u64,
            block,
            phase,
            label: label.to_string(),
            count,
        });
    }

    pub fn next_block(&self) -> u64 {
        self.events.last().map_or(0, |e| e.block + 1)
    }

    /// Appends `other`, shifting its blocks after ours and renumbering.
    pub fn append(&mut self, other: TraceLog) {
        let offset = self.next_block();
        for e in other.events {
            self.push(e.block + offset, e.phase, &e.label, e.count);
        }
    }
}

/// Checks sequence numbering, block order, phase order within each block,
/// that every block holds each `required` phase and ends with an emit.
pub fn validate_trace(events: &[TraceEvent], required: &[Phase]) -> Result<(), PipelineError> {
    let err = |m: String| Err(PipelineError::Trace(m));
    if events.is_empty() {
        return err("empty trace".into());
    }
    for (i, e) in events.iter().enumerate() {
        if e.seq != i as u64 {
            return err(format!("event {i} has seq {}", e.seq));
        }
    }
    let mut start = 0;
    while start < events.len() {
        let block = events[start].block;
        let end = events[start..]
            .iter()
            .position(|e| e.block != block)
            .map_or(events.len(), |p| start + p);
        if end < events.len() && events[end].block < block {
            return err(format!("block {} follows block {block}", events[end].block));
        }
        let slice = &events[start..end];
        if let Some(w) = slice.windows(2).find(|w| w[1].phase < w[0].phase) {
            return err(format!("block {block}: {:?} after {:?}", w[1].phase, w[0].phase));
        }
        for p in required {
            if !slice.iter().any(|e| e.phase == *p) {
                return err(format!("block {block} lacks {p:?}"));
            }
        }
        if slice.last().map(|e| e.phase) != Some(Phase::Emit) {
            return err(format!("block {block} does not end with emit"));
        }
        start = end;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(log: &mut TraceLog, b: u64) {
        for p in [
            Phase::Rollout,
            Phase::Evaluate,
            Phase::Aggregate,
            Phase::Improve,
            Phase::Emit,
        ] {
            log.push(b, p, "x", 1);
        }
    }

    const ALL: [Phase; 5] = [
        Phase::Rollout,
        Phase::Evaluate,
        Phase::Aggregate,
        Phase::Improve,
        Phase::Emit,
    ];

    #[test]
    fn ordered_blocks_pass() {
        let mut log = TraceLog::new();
        full(&mut log, 0);
        full(&mut log, 1);
        validate_trace(&log.events, &ALL).unwrap();
    }

    #[test]
    fn backwards_phase_fails() {
        let mut log = TraceLog::new();
        log.push(0, Phase::Evaluate, "e", 1);
        log.push(0, Phase::Rollout, "r", 1);
        log.push(0, Phase::Emit, "x", 1);
        assert!(validate_trace(&log.events, &[]).is_err());
    }

    #[test]
    fn missing_phase_fails() {
        let mut log = TraceLog::new();
        log.push(0, Phase::Rollout, "r", 1);
        log.push(0, Phase::Emit, "x", 1);
        assert!(validate_trace(&log.events, &ALL).is_err());
        validate_trace(&log.events, &[Phase::Rollout]).unwrap();
    }

    #[test]
    fn append_renumbers() {
        let mut a = TraceLog::new();
        full(&mut a, 0);
        let mut b = TraceLog::new();
        full(&mut b, 0);
        a.append(b);
        assert_eq!(a.events.last().unwrap().block, 1);
        assert_eq!(a.events.last().unwrap().seq, 9);
        validate_trace(&a.events, &ALL).unwrap();
    }
}
