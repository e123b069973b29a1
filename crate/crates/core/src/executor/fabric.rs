//! Point-to-point queues between adjacent ranks with an exact deadlock
//! watchdog: all queues and wait states live under one lock, so "every
//! unfinished worker waits on a condition nobody can satisfy" is decided
//! without timeouts.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Condvar, Mutex, MutexGuard};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Direction of a message between rank `r` and its neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Channel {
    /// Activations from `r` to `r + 1`.
    Act(usize),
    /// Gradients from `r + 1` to `r`.
    Grad(usize),
}

impl Channel {
    fn index(self) -> usize {
        match self {
            Channel::Act(r) => 2 * r,
            Channel::Grad(r) => 2 * r + 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Wait {
    Recv(Channel),
    Send(Channel),
}

/// Where each rank was stuck when the watchdog fired.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadlockReport {
    pub blocked: Vec<BlockedRank>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockedRank {
    pub rank: usize,
    pub index: usize,
    pub instruction: String,
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "deadlock: all unfinished ranks are blocked")?;
        for b in &self.blocked {
            write!(f, "; rank {} at #{} {}", b.rank, b.index, b.instruction)?;
        }
        Ok(())
    }
}

struct State<T> {
    queues: Vec<VecDeque<(usize, Tensor<T>)>>,
    capacity: usize,
    waiting: Vec<Option<(Wait, usize, String)>>,
    finished: Vec<bool>,
    failure: Option<Error>,
}

impl<T> State<T> {
    fn unsatisfiable(&self, w: Wait) -> bool {
        match w {
            Wait::Recv(ch) => self.queues[ch.index()].is_empty(),
            Wait::Send(ch) => self.queues[ch.index()].len() >= self.capacity,
        }
    }

    fn deadlocked(&self) -> bool {
        self.finished
            .iter()
            .zip(&self.waiting)
            .all(|(&done, w)| done || w.as_ref().is_some_and(|(w, _, _)| self.unsatisfiable(*w)))
            && self.finished.iter().any(|d| !d)
    }

    fn report(&self) -> DeadlockReport {
        DeadlockReport {
            blocked: self
                .waiting
                .iter()
                .enumerate()
                .filter_map(|(rank, w)| {
                    w.as_ref().map(|(_, index, ins)| BlockedRank {
                        rank,
                        index: *index,
                        instruction: ins.clone(),
                    })
                })
                .collect(),
        }
    }
}

pub(crate) struct Fabric<T> {
    state: Mutex<State<T>>,
    cv: Condvar,
}

impl<T: Clone> Fabric<T> {
    pub(crate) fn new(ranks: usize, capacity: usize) -> Self {
        Self {
            state: Mutex::new(State {
                queues: vec![VecDeque::new(); 2 * ranks],
                capacity: capacity.max(1),
                waiting: vec![None; ranks],
                finished: vec![false; ranks],
                failure: None,
            }),
            cv: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn aborted(rank: usize, cause: &Error) -> Error {
        match cause {
            Error::Deadlock(_) => cause.clone(),
            other => Error::Worker {
                rank,
                reason: format!("aborted after failure elsewhere: {other}"),
            },
        }
    }

    /// Blocks until `wait` can be satisfied, or fails on deadlock/abort.
    fn block_on<'a>(
        &'a self,
        mut st: MutexGuard<'a, State<T>>,
        rank: usize,
        wait: Wait,
        at: (usize, &str),
    ) -> Result<MutexGuard<'a, State<T>>> {
        loop {
            if let Some(cause) = &st.failure {
                return Err(Self::aborted(rank, cause));
            }
            if !st.unsatisfiable(wait) {
                st.waiting[rank] = None;
                return Ok(st);
            }
            st.waiting[rank] = Some((wait, at.0, at.1.to_string()));
            if st.deadlocked() {
                let err = Error::Deadlock(st.report());
                st.failure = Some(err.clone());
                self.cv.notify_all();
                return Err(err);
            }
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub(crate) fn send(
        &self,
        rank: usize,
        ch: Channel,
        micro_batch: usize,
        t: Tensor<T>,
        at: (usize, &str),
    ) -> Result<()> {
        let st = self.lock();
        let mut st = self.block_on(st, rank, Wait::Send(ch), at)?;
        st.queues[ch.index()].push_back((micro_batch, t));
        self.cv.notify_all();
        Ok(())
    }

    pub(crate) fn recv(&self, rank: usize, ch: Channel, micro_batch: usize, at: (usize, &str)) -> Result<Tensor<T>> {
        let st = self.lock();
        let mut st = self.block_on(st, rank, Wait::Recv(ch), at)?;
        let (got, t) = st.queues[ch.index()].pop_front().expect("queue checked non-empty");
        self.cv.notify_all();
        if got != micro_batch {
            return Err(Error::Worker {
                rank,
                reason: format!("expected micro-batch {micro_batch} on {ch:?}, received {got}"),
            });
        }
        Ok(t)
    }

    pub(crate) fn finish(&self, rank: usize) {
        let mut st = self.lock();
        st.finished[rank] = true;
        st.waiting[rank] = None;
        self.cv.notify_all();
    }

    /// Records a worker failure so blocked peers stop waiting.
    pub(crate) fn fail(&self, rank: usize, err: &Error) {
        let mut st = self.lock();
        if st.failure.is_none() {
            st.failure = Some(err.clone());
        }
        st.finished[rank] = true;
        st.waiting[rank] = None;
        self.cv.notify_all();
    }

    /// Root-cause failure, if any worker failed.
    pub(crate) fn failure(&self) -> Option<Error> {
        self.lock().failure.clone()
    }
}
