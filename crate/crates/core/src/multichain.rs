//! Multi-chain support: command dispatch over lanes and the round barrier.
//!
//! A replica running `m` lanes commits blocks per lane independently. Round
//! `r` consists of the height-`r` block of every lane; it executes only once
//! all `m` blocks are committed, lanes in ascending order.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use crate::messages::{Block, CommandId};

/// Round-robin lane assignment with per-command pinning.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Dispatcher {
    lanes: u32,
    cursor: u32,
    pinned: BTreeMap<CommandId, u32>,
}

impl Dispatcher {
    pub fn new(lanes: u32) -> Self {
        assert!(lanes >= 1, "at least one lane");
        Dispatcher {
            lanes,
            cursor: 0,
            pinned: BTreeMap::new(),
        }
    }

    pub fn lanes(&self) -> u32 {
        self.lanes
    }

    /// Lane for `id`; a command seen before keeps its lane.
    pub fn dispatch(&mut self, id: CommandId) -> u32 {
        if let Some(l) = self.pinned.get(&id) {
            return *l;
        }
        let lane = self.cursor;
        self.cursor = (self.cursor + 1) % self.lanes;
        self.pinned.insert(id, lane);
        lane
    }

    pub fn lane_of(&self, id: &CommandId) -> Option<u32> {
        self.pinned.get(id).copied()
    }
}

/// Committed blocks waiting for their round to complete.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoundExecutor {
    queues: Vec<VecDeque<Block>>,
    next_round: u64,
}

impl RoundExecutor {
    pub fn new(lanes: u32) -> Self {
        RoundExecutor {
            queues: (0..lanes).map(|_| VecDeque::new()).collect(),
            next_round: 1,
        }
    }

    /// Next round to execute (rounds start at 1).
    pub fn next_round(&self) -> u64 {
        self.next_round
    }

    /// Adds the next committed block of `lane`. Blocks arrive per lane in
    /// height order; heights below the next round are ignored.
    pub fn push(&mut self, lane: u32, block: Block) {
        let q = &mut self.queues[lane as usize];
        let expected = self.next_round + q.len() as u64;
        if block.height == expected {
            q.push_back(block);
        }
    }

    /// Removes and returns every complete round, oldest first, each with its
    /// blocks in lane order.
    pub fn drain_ready(&mut self) -> Vec<(u64, Vec<Block>)> {
        let mut out = Vec::new();
        while self.queues.iter().all(|q| !q.is_empty()) {
            let blocks: Vec<Block> = self.queues.iter_mut().filter_map(|q| q.pop_front()).collect();
            out.push((self.next_round, blocks));
            self.next_round += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::ClientId;
    use alloc::vec;

    fn id(c: u32, s: u64) -> CommandId {
        CommandId {
            client: ClientId(c),
            sequence: s,
        }
    }

    fn block(lane: u32, height: u64) -> Block {
        Block {
            height,
            parent: None,
            commands: vec![],
            instance: lane,
        }
    }

    #[test]
    fn round_robin_with_pinning() {
        let mut d = Dispatcher::new(4);
        let lanes: Vec<u32> = (1..=5).map(|s| d.dispatch(id(1, s))).collect();
        assert_eq!(lanes, vec![0, 1, 2, 3, 0]);
        assert_eq!(d.dispatch(id(1, 1)), 0);
        assert_eq!(d.dispatch(id(1, 6)), 1);
    }

    #[test]
    fn barrier_waits_for_every_lane() {
        let mut r = RoundExecutor::new(4);
        for lane in 0..3 {
            r.push(lane, block(lane, 1));
        }
        assert!(r.drain_ready().is_empty());
        r.push(3, block(3, 1));
        let ready = r.drain_ready();
        assert_eq!(ready.len(), 1);
        let order: Vec<u32> = ready[0].1.iter().map(|b| b.instance).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
        assert_eq!(r.next_round(), 2);
    }

    #[test]
    fn single_lane_executes_each_block() {
        let mut r = RoundExecutor::new(1);
        r.push(0, block(0, 1));
        r.push(0, block(0, 2));
        r.push(0, block(0, 2));
        assert_eq!(r.drain_ready().len(), 2);
    }
}
