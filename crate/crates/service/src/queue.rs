//! Bounded hand-off queue between pipeline stages.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};

/// What a full queue does with a new item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FullPolicy {
    /// Discard the oldest queued item; the producer never waits.
    DropOldest,
    /// Wait for the consumer.
    Block,
}

#[derive(Debug)]
pub struct BoundedQueue<T> {
    capacity: usize,
    policy: FullPolicy,
    state: Mutex<State<T>>,
    changed: Condvar,
}

#[derive(Debug)]
struct State<T> {
    items: VecDeque<T>,
    closed: bool,
    dropped: u64,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize, policy: FullPolicy) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            policy,
            state: Mutex::new(State {
                items: VecDeque::with_capacity(capacity),
                closed: false,
                dropped: 0,
            }),
            changed: Condvar::new(),
        }
    }

    /// Enqueues `item`; returns it back if the queue is closed.
    pub fn push(&self, item: T) -> Result<(), T> {
        let mut s = self.state.lock().unwrap();
        loop {
            if s.closed {
                return Err(item);
            }
            if s.items.len() < self.capacity {
                break;
            }
            match self.policy {
                FullPolicy::DropOldest => {
                    s.items.pop_front();
                    s.dropped += 1;
                    break;
                }
                FullPolicy::Block => s = self.changed.wait(s).unwrap(),
            }
        }
        s.items.push_back(item);
        self.changed.notify_all();
        Ok(())
    }

    /// Next item, waiting if empty. `None` once closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut s = self.state.lock().unwrap();
        loop {
            if let Some(item) = s.items.pop_front() {
                self.changed.notify_all();
                return Some(item);
            }
            if s.closed {
                return None;
            }
            s = self.changed.wait(s).unwrap();
        }
    }

    /// Refuses further pushes; queued items can still be popped.
    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.changed.notify_all();
    }

    /// Items discarded by [`FullPolicy::DropOldest`].
    pub fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }
}
