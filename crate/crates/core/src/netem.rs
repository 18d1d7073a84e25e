//! Deterministic link emulation: one-way delay, half-normal jitter, Bernoulli
//! loss and optional reordering, all driven by a per-link seeded generator and
//! a caller-supplied virtual clock.

use std::collections::VecDeque;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetemError {
    #[error("invalid link config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    /// Seconds; half the round-trip time.
    pub one_way_delay: f64,
    /// Standard deviation of the half-normal jitter, seconds.
    pub jitter_stddev: f64,
    pub loss_probability: f64,
    pub seed: u64,
    pub reorder_allowed: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            one_way_delay: 0.0,
            jitter_stddev: 0.0,
            loss_probability: 0.0,
            seed: 0,
            reorder_allowed: false,
        }
    }
}

impl LinkConfig {
    /// Symmetric link for a given round-trip time in seconds.
    pub fn with_rtt(rtt: f64, seed: u64) -> Self {
        Self {
            one_way_delay: rtt / 2.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetemError> {
        if !(self.one_way_delay >= 0.0 && self.one_way_delay.is_finite()) {
            return Err(NetemError::InvalidConfig("delay must be a finite value >= 0"));
        }
        if !(self.jitter_stddev >= 0.0 && self.jitter_stddev.is_finite()) {
            return Err(NetemError::InvalidConfig("jitter must be a finite value >= 0"));
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(NetemError::InvalidConfig("loss probability must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InFlightDatagram {
    /// Submission counter on this link, starting at 0.
    pub id: u64,
    pub payload: Vec<u8>,
    pub submit_time: f64,
    pub delivery_time: f64,
    pub dropped: bool,
}

/// Counters for conservation checks: `delivered + dropped + in_flight == submitted`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub submitted: u64,
    pub dropped: u64,
    pub delivered: u64,
    pub bytes_submitted: u64,
}

/// One direction of an emulated network path. Single owner; the session
/// loop submits and drains it under virtual time.
#[derive(Debug, Clone)]
pub struct Link {
    config: LinkConfig,
    rng: ChaCha8Rng,
    queue: VecDeque<InFlightDatagram>,
    last_delivery: f64,
    last_now: f64,
    stats: LinkStats,
}

impl Link {
    pub fn new(config: LinkConfig) -> Result<Self, NetemError> {
        config.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            queue: VecDeque::new(),
            last_delivery: f64::NEG_INFINITY,
            last_now: f64::NEG_INFINITY,
            stats: LinkStats::default(),
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.config
    }

    /// Replaces delay/jitter/loss settings. The generator keeps its stream so
    /// a reconfigured run stays reproducible; datagrams already in flight keep
    /// their schedule.
    pub fn reconfigure(&mut self, config: LinkConfig) -> Result<(), NetemError> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn submit(&mut self, payload: Vec<u8>, now: f64) -> InFlightDatagram {
        debug_assert!(now >= self.last_now, "link time went backwards: {now} < {}", self.last_now);
        self.last_now = now;
        let id = self.stats.submitted;
        self.stats.submitted += 1;
        self.stats.bytes_submitted += payload.len() as u64;

        let dropped = self.rng.random::<f64>() < self.config.loss_probability;
        if dropped {
            self.stats.dropped += 1;
            return InFlightDatagram {
                id,
                payload,
                submit_time: now,
                delivery_time: f64::INFINITY,
                dropped: true,
            };
        }
        let jitter = if self.config.jitter_stddev > 0.0 {
            Normal::new(0.0, self.config.jitter_stddev)
                .expect("validated stddev")
                .sample(&mut self.rng)
                .abs()
        } else {
            0.0
        };
        let mut delivery_time = now + self.config.one_way_delay + jitter;
        if !self.config.reorder_allowed {
            delivery_time = delivery_time.max(self.last_delivery);
        }
        self.last_delivery = self.last_delivery.max(delivery_time);

        let record = InFlightDatagram {
            id,
            payload,
            submit_time: now,
            delivery_time,
            dropped: false,
        };
        // Stable insertion: equal delivery times keep submission order.
        let at = self.queue.partition_point(|d| d.delivery_time <= delivery_time);
        self.queue.insert(at, record.clone());
        record
    }

    /// Removes and returns every datagram due at or before `now`, in delivery order.
    pub fn drain(&mut self, now: f64) -> Vec<InFlightDatagram> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|d| d.delivery_time <= now) {
            out.push(self.queue.pop_front().unwrap());
        }
        self.stats.delivered += out.len() as u64;
        out
    }
}

/// Wall-clock front end for live demos: timestamps come from a monotonic clock.
#[derive(Debug)]
pub struct WallClockLink {
    link: Link,
    start: Instant,
}

impl WallClockLink {
    pub fn new(config: LinkConfig) -> Result<Self, NetemError> {
        Ok(Self {
            link: Link::new(config)?,
            start: Instant::now(),
        })
    }

    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn submit(&mut self, payload: Vec<u8>) -> InFlightDatagram {
        let now = self.now();
        self.link.submit(payload, now)
    }

    pub fn drain(&mut self) -> Vec<InFlightDatagram> {
        let now = self.now();
        self.link.drain(now)
    }
}

/// Thin real-UDP transport for live demos. Acceptance runs never touch it.
#[derive(Debug)]
pub struct UdpEndpoint {
    socket: UdpSocket,
    peer: SocketAddr,
}

impl UdpEndpoint {
    pub fn bind(local: impl ToSocketAddrs, peer: SocketAddr) -> io::Result<Self> {
        let socket = UdpSocket::bind(local)?;
        socket.set_nonblocking(true)?;
        Ok(Self { socket, peer })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn set_peer(&mut self, peer: SocketAddr) {
        self.peer = peer;
    }

    pub fn send(&self, payload: &[u8]) -> io::Result<usize> {
        self.socket.send_to(payload, self.peer)
    }

    /// Non-blocking receive; `Ok(None)` when nothing is pending.
    pub fn try_recv(&self) -> io::Result<Option<Vec<u8>>> {
        let mut buf = [0u8; 2048];
        match self.socket.recv_from(&mut buf) {
            Ok((n, _)) => Ok(Some(buf[..n].to_vec())),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(delay: f64, jitter: f64, loss: f64, seed: u64, reorder: bool) -> Link {
        Link::new(LinkConfig {
            one_way_delay: delay,
            jitter_stddev: jitter,
            loss_probability: loss,
            seed,
            reorder_allowed: reorder,
        })
        .unwrap()
    }

    #[test]
    fn fixed_delay_delivery_time() {
        let mut l = link(0.05, 0.0, 0.0, 1, false);
        let rec = l.submit(vec![1], 1.0);
        assert!(!rec.dropped);
        assert!((rec.delivery_time - 1.05).abs() < 1e-12);
    }

    #[test]
    fn total_loss_drops_everything() {
        let mut l = link(0.0, 0.0, 1.0, 3, false);
        for i in 0..100 {
            assert!(l.submit(vec![i], i as f64).dropped);
        }
        assert!(l.drain(1e9).is_empty());
        assert_eq!(l.stats().dropped, 100);
    }

    #[test]
    fn zero_delay_delivers_at_submit_time() {
        let mut l = link(0.0, 0.0, 0.0, 3, false);
        let rec = l.submit(vec![7], 2.5);
        assert_eq!(rec.delivery_time, 2.5);
        assert_eq!(l.drain(2.5).len(), 1);
    }

    #[test]
    fn drain_before_due_is_empty() {
        let mut l = link(0.1, 0.0, 0.0, 3, false);
        l.submit(vec![1], 0.0);
        assert!(l.drain(0.05).is_empty());
        assert_eq!(l.drain(0.1).len(), 1);
        assert!(l.drain(0.2).is_empty(), "delivered exactly once");
    }

    #[test]
    fn fifo_clamp_keeps_order_under_jitter() {
        let mut l = link(0.01, 0.02, 0.0, 11, false);
        for i in 0..200u32 {
            l.submit(i.to_le_bytes().to_vec(), i as f64 * 1e-3);
        }
        let out = l.drain(10.0);
        let ids: Vec<u64> = out.iter().map(|d| d.id).collect();
        assert_eq!(ids, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn reordering_happens_when_allowed() {
        let mut l = link(0.01, 0.02, 0.0, 11, true);
        for i in 0..200u32 {
            l.submit(i.to_le_bytes().to_vec(), i as f64 * 1e-3);
        }
        let out = l.drain(10.0);
        assert!(out.windows(2).all(|w| w[0].delivery_time <= w[1].delivery_time));
        assert!(out.windows(2).any(|w| w[0].id > w[1].id));
    }

    #[test]
    fn mean_delay_matches_config_without_jitter() {
        let mut l = link(0.05, 0.0, 0.0, 5, false);
        let n = 10_000;
        let total: f64 = (0..n)
            .map(|i| {
                let now = i as f64 * 1e-3;
                l.submit(vec![0; 46], now).delivery_time - now
            })
            .sum();
        let mean = total / n as f64;
        assert!((mean - 0.05).abs() <= 0.01 * 0.05, "mean {mean}");
    }

    #[test]
    fn config_validation() {
        assert!(Link::new(LinkConfig {
            loss_probability: 1.5,
            ..LinkConfig::default()
        })
        .is_err());
        assert!(Link::new(LinkConfig {
            one_way_delay: -1.0,
            ..LinkConfig::default()
        })
        .is_err());
    }

    #[test]
    fn udp_loopback() {
        let a = UdpEndpoint::bind("127.0.0.1:0", "127.0.0.1:9".parse().unwrap()).unwrap();
        let mut b = UdpEndpoint::bind("127.0.0.1:0", a.local_addr().unwrap()).unwrap();
        b.set_peer(a.local_addr().unwrap());
        b.send(&[1, 2, 3]).unwrap();
        let mut got = None;
        for _ in 0..200 {
            if let Some(p) = a.try_recv().unwrap() {
                got = Some(p);
                break;
            }
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
        assert_eq!(got, Some(vec![1, 2, 3]));
    }

    fn trace(cfg: LinkConfig, submits: &[(f64, u8)]) -> Vec<(u64, bool, u64)> {
        let mut l = Link::new(cfg).unwrap();
        let mut out = Vec::new();
        for &(now, b) in submits {
            let r = l.submit(vec![b], now);
            out.push((r.id, r.dropped, r.delivery_time.to_bits()));
        }
        out
    }

    proptest! {
        #[test]
        fn deterministic_and_conserving(
            seed in any::<u64>(),
            loss in 0.0f64..1.0,
            jitter in 0.0f64..0.01,
            gaps in prop::collection::vec(0.0f64..0.01, 1..200),
        ) {
            let cfg = LinkConfig { one_way_delay: 0.02, jitter_stddev: jitter, loss_probability: loss, seed, reorder_allowed: false };
            let mut now = 0.0;
            let submits: Vec<(f64, u8)> = gaps.iter().enumerate().map(|(i, g)| { now += g; (now, i as u8) }).collect();
            prop_assert_eq!(trace(cfg, &submits), trace(cfg, &submits));

            let mut l = Link::new(cfg).unwrap();
            for &(t, b) in &submits { l.submit(vec![b], t); }
            let delivered = l.drain(f64::MAX).len() as u64;
            let s = l.stats();
            prop_assert_eq!(delivered + s.dropped, s.submitted);
        }

        #[test]
        fn lossless_fifo_preserves_submission_order(
            seed in any::<u64>(),
            jitter in 0.0f64..0.05,
            n in 1usize..300,
        ) {
            let cfg = LinkConfig { one_way_delay: 0.01, jitter_stddev: jitter, loss_probability: 0.0, seed, reorder_allowed: false };
            let mut l = Link::new(cfg).unwrap();
            for i in 0..n { l.submit(vec![], i as f64 * 1e-3); }
            let ids: Vec<u64> = l.drain(f64::MAX).iter().map(|d| d.id).collect();
            prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
        }
    }
}
