//! In-process simulated network.
//!
//! A [`SimConn`] pair exchanges the same framed bytes as the TCP transport,
//! through seeded lossy/delayed unidirectional links. Delivery order within a
//! link is FIFO: a sampled latency never reorders frames, it only pushes the
//! delivery instant forward.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

use super::{frame, unframe_bytes, Connection, Envelope, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latency {
    FixedMs(u64),
    UniformMs { lo: u64, hi: u64 },
}

/// Loss and delay characteristics of one direction of a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub latency: Latency,
    pub drop_probability: f64,
    pub seed: u64,
}

impl LinkModel {
    /// Lossless zero-latency link.
    pub fn ideal() -> Self {
        LinkModel {
            latency: Latency::FixedMs(0),
            drop_probability: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> bool {
        (0.0..1.0).contains(&self.drop_probability)
    }

    /// Samples the fate of one frame: `None` means a silent drop, otherwise
    /// the added delivery delay.
    pub fn sample(&self, rng: &mut SplitMix64) -> Option<Duration> {
        if self.drop_probability > 0.0 && rng.next_f64() < self.drop_probability {
            return None;
        }
        let ms = match self.latency {
            Latency::FixedMs(ms) => ms,
            Latency::UniformMs { lo, hi } => {
                if hi > lo {
                    lo + rng.below(hi - lo + 1)
                } else {
                    lo
                }
            }
        };
        Some(Duration::from_millis(ms))
    }
}

struct LinkState {
    queue: VecDeque<(Instant, Vec<u8>)>,
    rng: SplitMix64,
    last_delivery: Instant,
    closed: bool,
}

struct Link {
    model: LinkModel,
    state: Mutex<LinkState>,
    wake: Condvar,
}

impl Link {
    fn new(model: LinkModel) -> Arc<Self> {
        Arc::new(Link {
            state: Mutex::new(LinkState {
                queue: VecDeque::new(),
                rng: SplitMix64::new(model.seed),
                last_delivery: Instant::now(),
                closed: false,
            }),
            wake: Condvar::new(),
            model,
        })
    }

    /// Schedules a frame for delivery after the sampled latency, or drops it.
    fn deliver(&self, bytes: Vec<u8>) {
        let mut state = self.state.lock().unwrap();
        let Some(delay) = self.model.sample(&mut state.rng) else {
            return;
        };
        // FIFO: delivery instants are monotone within the link.
        let at = (Instant::now() + delay).max(state.last_delivery);
        state.last_delivery = at;
        state.queue.push_back((at, bytes));
        self.wake.notify_one();
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.wake.notify_all();
    }

    fn take_ready(&self, deadline: Instant) -> Result<Option<Vec<u8>>, TransportError> {
        let mut state = self.state.lock().unwrap();
        loop {
            let now = Instant::now();
            match state.queue.front() {
                Some(&(at, _)) if at <= now => {
                    let (_, bytes) = state.queue.pop_front().unwrap();
                    return Ok(Some(bytes));
                }
                Some(&(at, _)) => {
                    if now >= deadline {
                        return Ok(None);
                    }
                    let wait = at.min(deadline) - now;
                    let (next, _) = self.wake.wait_timeout(state, wait).unwrap();
                    state = next;
                }
                None => {
                    if state.closed {
                        return Err(TransportError::Closed);
                    }
                    if now >= deadline {
                        return Ok(None);
                    }
                    let (next, _) = self.wake.wait_timeout(state, deadline - now).unwrap();
                    state = next;
                }
            }
        }
    }
}

/// One endpoint of a simulated duplex connection.
pub struct SimConn {
    outgoing: Arc<Link>,
    incoming: Arc<Link>,
}

impl Drop for SimConn {
    fn drop(&mut self) {
        self.outgoing.close();
    }
}

/// Builds a connected pair; the two link models govern the two directions
/// (first: a-to-b, second: b-to-a).
pub fn sim_pair(a_to_b: LinkModel, b_to_a: LinkModel) -> (SimConn, SimConn) {
    let forward = Link::new(a_to_b);
    let backward = Link::new(b_to_a);
    (
        SimConn { outgoing: forward.clone(), incoming: backward.clone() },
        SimConn { outgoing: backward, incoming: forward },
    )
}

impl Connection for SimConn {
    fn send(&mut self, envelope: &Envelope) -> Result<(), TransportError> {
        let bytes = frame(envelope)?;
        self.outgoing.deliver(bytes);
        Ok(())
    }

    fn try_recv(&mut self, timeout: Duration) -> Result<Option<Envelope>, TransportError> {
        let deadline = Instant::now() + timeout;
        match self.incoming.take_ready(deadline)? {
            None => Ok(None),
            Some(bytes) => match unframe_bytes(&bytes)? {
                Some((env, used)) if used == bytes.len() => Ok(Some(env)),
                _ => Err(TransportError::TruncatedFrame),
            },
        }
    }
}
