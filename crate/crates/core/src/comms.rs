//! SPMD communicator over private-memory workers.
//!
//! A group of `P` workers (P a power of two) runs the same program. Each owns a
//! [`Communicator`] and shares nothing else; data moves only through the
//! collectives below. Reductions and scans use a fixed butterfly pairing
//! (partners at rank distance 1, 2, 4, ...) so floating-point results are
//! identical on every rank and across repeated runs.
//!
//! Every collective adds the number of message rounds it used to a per-rank
//! counter, which the resampling code uses to check its round budget.

use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{Error, Result};
use crate::wire::Wire;

/// Upper bound on the group size accepted by [`spawn_group`].
pub const MAX_RANKS: usize = 256;

/// Environment variable selecting the transport.
pub const BACKEND_ENV: &str = "SMC2_BACKEND";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Threads in this process connected by blocking message queues.
    InProcess,
    /// Multi-process message passing. Not compiled into this build.
    MpiLike,
}

impl Backend {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "" | "inprocess" => Ok(Backend::InProcess),
            "mpi-like" => Ok(Backend::MpiLike),
            other => Err(Error::Config(format!(
                "unknown {BACKEND_ENV} value {other:?} (expected inprocess or mpi-like)"
            ))),
        }
    }

    pub fn from_env() -> Result<Self> {
        match std::env::var(BACKEND_ENV) {
            Ok(v) => Backend::parse(&v),
            Err(_) => Ok(Backend::InProcess),
        }
    }
}

/// Direction of a rotation in [`Communicator::exchange_at_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Rank `p` sends to `(p - d) mod P`.
    Down,
    /// Rank `p` sends to `(p + d) mod P`.
    Up,
}

/// Point-to-point byte transport between ranks of one group.
///
/// Messages between a fixed (sender, receiver) pair are delivered in order.
pub trait Transport: Send {
    fn send(&mut self, to: usize, bytes: Vec<u8>) -> Result<()>;
    fn recv(&mut self, from: usize) -> Result<Vec<u8>>;
}

struct InProcessTransport {
    rank: usize,
    outboxes: Vec<Sender<Vec<u8>>>,
    inboxes: Vec<Receiver<Vec<u8>>>,
}

impl Transport for InProcessTransport {
    fn send(&mut self, to: usize, bytes: Vec<u8>) -> Result<()> {
        self.outboxes[to].send(bytes).map_err(|_| Error::Disconnected {
            rank: self.rank,
            peer: to,
        })
    }

    fn recv(&mut self, from: usize) -> Result<Vec<u8>> {
        self.inboxes[from].recv().map_err(|_| Error::Disconnected {
            rank: self.rank,
            peer: from,
        })
    }
}

fn in_process_transports(size: usize) -> Vec<InProcessTransport> {
    // channels[src][dst]
    let mut senders: Vec<Vec<Option<Sender<Vec<u8>>>>> = (0..size).map(|_| Vec::new()).collect();
    let mut receivers: Vec<Vec<Option<Receiver<Vec<u8>>>>> =
        (0..size).map(|_| (0..size).map(|_| None).collect()).collect();
    for (src, row) in senders.iter_mut().enumerate() {
        for dst in 0..size {
            let (tx, rx) = channel();
            row.push(Some(tx));
            receivers[dst][src] = Some(rx);
        }
    }
    senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(rank, (outboxes, inboxes))| InProcessTransport {
            rank,
            outboxes: outboxes.into_iter().map(Option::unwrap).collect(),
            inboxes: inboxes.into_iter().map(Option::unwrap).collect(),
        })
        .collect()
}

/// Values that can be combined by the prefix-sum collectives.
pub trait ScanValue: Wire + Clone {
    fn zero(&self) -> Self;
    /// `self` precedes `rhs` in rank order.
    fn combine(&self, rhs: &Self) -> Self;
}

impl ScanValue for f64 {
    fn zero(&self) -> Self {
        0.0
    }
    fn combine(&self, rhs: &Self) -> Self {
        self + rhs
    }
}

impl ScanValue for u64 {
    fn zero(&self) -> Self {
        0
    }
    fn combine(&self, rhs: &Self) -> Self {
        self + rhs
    }
}

impl ScanValue for usize {
    fn zero(&self) -> Self {
        0
    }
    fn combine(&self, rhs: &Self) -> Self {
        self + rhs
    }
}

impl<A: ScanValue, B: ScanValue> ScanValue for (A, B) {
    fn zero(&self) -> Self {
        (self.0.zero(), self.1.zero())
    }
    fn combine(&self, rhs: &Self) -> Self {
        (self.0.combine(&rhs.0), self.1.combine(&rhs.1))
    }
}

/// Handle owned by one rank of an SPMD group.
pub struct Communicator {
    rank: usize,
    size: usize,
    root_seed: u64,
    rounds: u64,
    transport: Box<dyn Transport>,
}

impl std::fmt::Debug for Communicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Communicator")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .field("rounds", &self.rounds)
            .finish_non_exhaustive()
    }
}

impl Communicator {
    /// Wraps an arbitrary transport. `size` must be a power of two.
    pub fn new(
        rank: usize,
        size: usize,
        root_seed: u64,
        transport: Box<dyn Transport>,
    ) -> Result<Self> {
        check_group_size(size)?;
        if rank >= size {
            return Err(Error::Config(format!("rank {rank} outside group of {size}")));
        }
        Ok(Communicator {
            rank,
            size,
            root_seed,
            rounds: 0,
            transport,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    /// log2 of the group size.
    pub fn depth(&self) -> u32 {
        self.size.trailing_zeros()
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn reset_rounds(&mut self) {
        self.rounds = 0;
    }

    fn send<T: Wire>(&mut self, to: usize, value: &T) -> Result<()> {
        self.transport.send(to, value.to_bytes())
    }

    fn recv<T: Wire>(&mut self, from: usize) -> Result<T> {
        let bytes = self.transport.recv(from)?;
        T::from_bytes(&bytes)
    }

    fn all_reduce_with(&mut self, local: &[f64], op: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let mut acc = local.to_vec();
        let mut d = 1;
        while d < self.size {
            let partner = self.rank ^ d;
            self.send(partner, &acc)?;
            let theirs: Vec<f64> = self.recv(partner)?;
            if theirs.len() != acc.len() {
                return Err(Error::Collective(format!(
                    "all-reduce length mismatch: rank {} has {}, rank {partner} has {}",
                    self.rank,
                    acc.len(),
                    theirs.len()
                )));
            }
            // lower rank block always on the left so both partners agree bitwise
            let (lo, hi) = if partner < self.rank {
                (&theirs, &acc)
            } else {
                (&acc, &theirs)
            };
            acc = lo.iter().zip(hi).map(|(&a, &b)| op(a, b)).collect();
            self.rounds += 1;
            d <<= 1;
        }
        Ok(acc)
    }

    /// Elementwise sum over ranks; identical on every rank.
    pub fn all_reduce_sum(&mut self, local: &[f64]) -> Result<Vec<f64>> {
        self.all_reduce_with(local, |a, b| a + b)
    }

    /// Elementwise maximum over ranks.
    pub fn all_reduce_max(&mut self, local: &[f64]) -> Result<Vec<f64>> {
        self.all_reduce_with(local, f64::max)
    }

    /// Exclusive prefix over ranks together with the group total.
    pub fn exclusive_scan_with_total<T: ScanValue>(&mut self, local: T) -> Result<(T, T)> {
        let mut prefix = local.zero();
        let mut total = local;
        let mut d = 1;
        while d < self.size {
            let partner = self.rank ^ d;
            self.send(partner, &total)?;
            let theirs: T = self.recv(partner)?;
            if partner < self.rank {
                prefix = theirs.combine(&prefix);
                total = theirs.combine(&total);
            } else {
                total = total.combine(&theirs);
            }
            self.rounds += 1;
            d <<= 1;
        }
        Ok((prefix, total))
    }

    /// Sum of `local` over ranks `0..rank`; rank 0 receives zero.
    pub fn exclusive_scan_sum<T: ScanValue>(&mut self, local: T) -> Result<T> {
        Ok(self.exclusive_scan_with_total(local)?.0)
    }

    /// Binomial-tree broadcast of `value` from `root`. Non-root inputs are ignored.
    pub fn broadcast<T: Wire>(&mut self, root: usize, value: T) -> Result<T> {
        if root >= self.size {
            return Err(Error::Config(format!(
                "broadcast root {root} outside group of {}",
                self.size
            )));
        }
        let relative = (self.rank + self.size - root) % self.size;
        let mut value = Some(value).filter(|_| relative == 0);
        let mut d = 1;
        while d < self.size {
            if relative < d {
                let to = (relative + d + root) % self.size;
                let v = value.as_ref().expect("holder has value");
                self.send(to, v)?;
            } else if relative < 2 * d {
                let from = (relative - d + root) % self.size;
                value = Some(self.recv(from)?);
            }
            self.rounds += 1;
            d <<= 1;
        }
        Ok(value.expect("every rank holds the value after log2(P) rounds"))
    }

    /// Sends `outgoing` `d` ranks away (circularly) and returns what arrived
    /// from the opposite neighbour at the same distance. One round.
    pub fn exchange_at_distance<T: Wire>(
        &mut self,
        d: usize,
        direction: Direction,
        outgoing: T,
    ) -> Result<T> {
        if d < 1 || d >= self.size {
            return Err(Error::Config(format!(
                "exchange distance {d} outside [1, {})",
                self.size
            )));
        }
        let down = (self.rank + self.size - d) % self.size;
        let up = (self.rank + d) % self.size;
        let (to, from) = match direction {
            Direction::Down => (down, up),
            Direction::Up => (up, down),
        };
        self.send(to, &outgoing)?;
        let incoming = self.recv(from)?;
        self.rounds += 1;
        Ok(incoming)
    }

    /// Every rank receives all ranks' values in rank order.
    pub fn all_gather<T: Wire + Clone>(&mut self, local: T) -> Result<Vec<T>> {
        let mut blocks: Vec<(usize, T)> = vec![(self.rank, local)];
        let mut d = 1;
        while d < self.size {
            let partner = self.rank ^ d;
            self.send(partner, &blocks)?;
            let theirs: Vec<(usize, T)> = self.recv(partner)?;
            blocks.extend(theirs);
            self.rounds += 1;
            d <<= 1;
        }
        blocks.sort_by_key(|(r, _)| *r);
        Ok(blocks.into_iter().map(|(_, v)| v).collect())
    }

    pub fn barrier(&mut self) -> Result<()> {
        self.all_reduce_sum(&[]).map(|_| ())
    }
}

fn check_group_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_power_of_two() {
        return Err(Error::Config(format!(
            "group size must be a power of two, got {size}"
        )));
    }
    if size > MAX_RANKS {
        return Err(Error::Config(format!(
            "group size {size} exceeds the worker limit {MAX_RANKS}"
        )));
    }
    Ok(())
}

/// Runs `worker` on `size` ranks using the backend named by `SMC2_BACKEND`.
pub fn spawn_group<R, F>(size: usize, root_seed: u64, worker: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut Communicator) -> Result<R> + Sync,
{
    spawn_group_with(Backend::from_env()?, size, root_seed, worker)
}

/// Runs `worker` once per rank and returns the per-rank results in rank order.
///
/// If any rank fails, the group fails. A rank that errors out drops its
/// communicator, which unblocks peers waiting on it; the first error that is
/// not a knock-on disconnect is reported.
pub fn spawn_group_with<R, F>(backend: Backend, size: usize, root_seed: u64, worker: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut Communicator) -> Result<R> + Sync,
{
    check_group_size(size)?;
    if backend == Backend::MpiLike {
        return Err(Error::Config(
            "the mpi-like backend is not available in this build; use SMC2_BACKEND=inprocess".into(),
        ));
    }

    let transports = in_process_transports(size);
    let worker = &worker;
    let outcomes: Vec<std::thread::Result<Result<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = transports
            .into_iter()
            .enumerate()
            .map(|(rank, transport)| {
                std::thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .spawn_scoped(scope, move || {
                        let mut comm = Communicator {
                            rank,
                            size,
                            root_seed,
                            rounds: 0,
                            transport: Box::new(transport),
                        };
                        worker(&mut comm)
                    })
                    .expect("failed to spawn rank thread")
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });

    let mut results = Vec::with_capacity(size);
    let mut primary: Option<Error> = None;
    let mut knock_on: Option<Error> = None;
    for (rank, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(Ok(r)) => results.push(r),
            Ok(Err(e)) => {
                let disconnected = matches!(e.root_cause(), Error::Disconnected { .. });
                let wrapped = Error::Worker {
                    rank,
                    source: Box::new(e),
                };
                if disconnected {
                    knock_on.get_or_insert(wrapped);
                } else {
                    primary.get_or_insert(wrapped);
                }
            }
            Err(panic) => {
                let message = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "unknown panic".into());
                primary.get_or_insert(Error::WorkerPanic { rank, message });
            }
        }
    }
    match primary.or(knock_on) {
        Some(e) => Err(e),
        None => Ok(results),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_returns_ranks_in_order() {
        assert_eq!(spawn_group(1, 0, |c| Ok(c.rank())).unwrap(), vec![0]);
        assert_eq!(spawn_group(4, 0, |c| Ok(c.rank())).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn non_power_of_two_group_is_rejected() {
        for p in [0, 3, 6, 12] {
            let err = spawn_group(p, 0, |c| Ok(c.rank())).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{p}: {err}");
        }
    }

    #[test]
    fn all_reduce_examples() {
        let out = spawn_group(4, 0, |c| c.all_reduce_sum(&[1.0])).unwrap();
        assert!(out.iter().all(|v| v == &[4.0]));

        let out = spawn_group(2, 0, |c| {
            let local = if c.rank() == 0 { [1.0, 2.0] } else { [3.0, 4.0] };
            c.all_reduce_sum(&local)
        })
        .unwrap();
        assert!(out.iter().all(|v| v == &[4.0, 6.0]));

        let out = spawn_group(1, 0, |c| c.all_reduce_sum(&[2.5])).unwrap();
        assert_eq!(out, vec![vec![2.5]]);
    }

    #[test]
    fn all_reduce_counts_log2_rounds() {
        let out = spawn_group(4, 0, |c| {
            c.reset_rounds();
            c.all_reduce_sum(&[1.0])?;
            Ok(c.rounds())
        })
        .unwrap();
        assert_eq!(out, vec![2; 4]);
    }

    #[test]
    fn mismatched_reduce_lengths_fail_the_group() {
        let err = spawn_group(2, 0, |c| {
            let local = vec![1.0; c.rank() + 1];
            c.all_reduce_sum(&local)
        })
        .unwrap_err();
        assert!(matches!(err.root_cause(), Error::Collective(_)), "{err}");
    }

    #[test]
    fn exclusive_scan_examples() {
        let out = spawn_group(4, 0, |c| c.exclusive_scan_sum((c.rank() + 1) as u64)).unwrap();
        assert_eq!(out, vec![0, 1, 3, 6]);
        let out = spawn_group(1, 0, |c| c.exclusive_scan_sum(7u64)).unwrap();
        assert_eq!(out, vec![0]);
        let out = spawn_group(2, 0, |c| {
            c.exclusive_scan_sum(if c.rank() == 0 { 0.5 } else { 0.25 })
        })
        .unwrap();
        assert_eq!(out, vec![0.0, 0.5]);
    }

    #[test]
    fn scan_total_matches_everywhere() {
        let out = spawn_group(8, 0, |c| c.exclusive_scan_with_total((c.rank() as u64, 1u64))).unwrap();
        for (rank, (prefix, total)) in out.iter().enumerate() {
            let r = rank as u64;
            assert_eq!(*prefix, (r * r.saturating_sub(1) / 2, r));
            assert_eq!(*total, (28, 8));
        }
    }

    #[test]
    fn broadcast_examples() {
        let out = spawn_group(4, 0, |c| c.broadcast(0, if c.rank() == 0 { 0.3 } else { -1.0 })).unwrap();
        assert_eq!(out, vec![0.3; 4]);
        let out = spawn_group(2, 0, |c| {
            let v = if c.rank() == 1 { "cfg".to_string() } else { String::new() };
            c.broadcast(1, v)
        })
        .unwrap();
        assert_eq!(out, vec!["cfg".to_string(), "cfg".to_string()]);
        let out = spawn_group(1, 0, |c| {
            c.reset_rounds();
            let v = c.broadcast(0, 9u64)?;
            Ok((v, c.rounds()))
        })
        .unwrap();
        assert_eq!(out, vec![(9, 0)]);
    }

    #[test]
    fn broadcast_from_every_root_of_eight() {
        for root in 0..8 {
            let out = spawn_group(8, 0, |c| c.broadcast(root, c.rank() as u64 * 10)).unwrap();
            assert_eq!(out, vec![root as u64 * 10; 8]);
        }
    }

    #[test]
    fn broadcast_rejects_bad_root() {
        let err = spawn_group(2, 0, |c| c.broadcast(2, 0u64)).unwrap_err();
        assert!(matches!(err.root_cause(), Error::Config(_)));
    }

    #[test]
    fn exchange_examples() {
        let out = spawn_group(4, 0, |c| c.exchange_at_distance(1, Direction::Down, c.rank() as u64)).unwrap();
        assert_eq!(out, vec![1, 2, 3, 0]);

        let out = spawn_group(2, 0, |c| {
            let v = if c.rank() == 0 { "A" } else { "B" }.to_string();
            c.exchange_at_distance(1, Direction::Up, v)
        })
        .unwrap();
        assert_eq!(out, vec!["B".to_string(), "A".to_string()]);

        let out = spawn_group(4, 0, |c| {
            c.reset_rounds();
            let v = c.exchange_at_distance(2, Direction::Down, c.rank() as u64)?;
            Ok((v, c.rounds()))
        })
        .unwrap();
        assert_eq!(out, vec![(2, 1), (3, 1), (0, 1), (1, 1)]);
    }

    #[test]
    fn exchange_distance_out_of_range() {
        for d in [0, 4, 5] {
            let err = spawn_group(4, 0, |c| c.exchange_at_distance(d, Direction::Up, 0u64)).unwrap_err();
            assert!(matches!(err.root_cause(), Error::Config(_)));
        }
    }

    #[test]
    fn gather_concatenates_in_rank_order() {
        let out = spawn_group(8, 0, |c| c.all_gather(vec![c.rank() as u64; 2])).unwrap();
        let expected: Vec<Vec<u64>> = (0..8).map(|r| vec![r; 2]).collect();
        assert!(out.iter().all(|g| g == &expected));
    }

    #[test]
    fn failing_worker_is_reported_with_its_rank() {
        let err = spawn_group(4, 0, |c| {
            if c.rank() == 2 {
                return Err(Error::Domain("boom".into()));
            }
            c.barrier()?;
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::Worker { rank, source } => {
                assert_eq!(rank, 2);
                assert!(matches!(*source, Error::Domain(_)));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn panicking_worker_does_not_hang_the_group() {
        let err = spawn_group(2, 0, |c| {
            if c.rank() == 1 {
                panic!("rank one exploded");
            }
            c.barrier()
        })
        .unwrap_err();
        assert!(matches!(err, Error::WorkerPanic { rank: 1, .. }), "{err}");
    }

    #[test]
    fn backend_names() {
        assert_eq!(Backend::parse("inprocess").unwrap(), Backend::InProcess);
        assert_eq!(Backend::parse("mpi-like").unwrap(), Backend::MpiLike);
        assert!(Backend::parse("tcp").is_err());
        let err = spawn_group_with(Backend::MpiLike, 2, 0, |c| Ok(c.rank())).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
