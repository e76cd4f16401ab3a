//! Time-ordered event queue. Ties at equal time break by scheduling order.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::digest::Digest;
use crate::ledger::{BlockHeader, BlockHeight, HalfTx, ShardId, SimTime, Transaction};

#[derive(Debug, Clone)]
pub enum Message {
    Tx(Transaction),
    Header(BlockHeader),
    /// Θ1 forwarded to the destination shard.
    Watch {
        theta1: HalfTx,
        source: ShardId,
        deadline: BlockHeight,
    },
    /// The CTX succeeded; its source lock may be released after the window.
    Success(Digest),
}

#[derive(Debug, Clone)]
pub enum EventKind {
    /// Index into the workload.
    Inject(usize),
    BlockTick(ShardId),
    EpochBoundary,
    Deliver { to: ShardId, msg: Message },
    /// Resend the failure proof if the CTX is still unresolved.
    GammaRetry(Digest),
}

#[derive(Debug, Clone)]
pub struct SimEvent {
    pub at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<SimEvent>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, at: SimTime, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(SimEvent { at, seq, kind }));
        seq
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse(e)| e.at)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_break_by_schedule_order() {
        let mut q = EventQueue::new();
        q.push(SimTime(5), EventKind::EpochBoundary);
        q.push(SimTime(5), EventKind::BlockTick(ShardId(0)));
        q.push(SimTime(1), EventKind::Inject(0));
        assert!(matches!(q.pop().unwrap().kind, EventKind::Inject(0)));
        assert!(matches!(q.pop().unwrap().kind, EventKind::EpochBoundary));
        assert!(matches!(q.pop().unwrap().kind, EventKind::BlockTick(_)));
        assert!(q.is_empty());
    }

    proptest! {
        #[test]
        fn pops_in_time_then_seq_order(times in prop::collection::vec(0u64..20, 1..60)) {
            let mut q = EventQueue::new();
            for (i, t) in times.iter().enumerate() {
                q.push(SimTime(*t), EventKind::Inject(i));
            }
            let mut last = (SimTime(0), 0u64);
            while let Some(e) = q.pop() {
                prop_assert!((e.at, e.seq) >= last);
                last = (e.at, e.seq);
            }
        }
    }
}
