//! Distributed systematic resampling.
//!
//! Resampling runs in three collective steps over a population that is split
//! evenly across ranks (`n = N / P` items per rank, global index `p·n + j`):
//!
//! 1. [`systematic_choice`] turns normalized weights and a shared offset `u`
//!    into duplication counts `ncopies`, with `Σ ncopies = N`.
//! 2. [`parallel_redistribute`] materializes the copies. For `P > 1` it packs
//!    surviving items to the front ([`rotational_nearly_sort`]), spreads the
//!    pending copies so every rank owns exactly `n` of them
//!    ([`rotational_split`]), and finishes with a per-rank sequential pass.
//!    The result equals [`sequential_redistribute`] on the gathered arrays.
//! 3. The caller resets the weights ([`reset_log_weight`]).
//!
//! Rotations are circular shifts by powers of two. Shifts shorter than the
//! rank width are combined into one local move plus a single neighbour
//! exchange; longer shifts are one [`Communicator::exchange_at_distance`]
//! each. A redistribution therefore costs `3·log2(P) + 2` message rounds.

use std::fmt;

use crate::comms::{Communicator, Direction, ScanValue};
use crate::error::{Error, Result};
use crate::wire::Wire;

/// Fixed-point scale for the cumulative weights: 64 fractional bits.
const FRAC_BITS: u32 = 64;

/// Exact, associative accumulator for `N · Σ w̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Fixed(u128);

impl Fixed {
    fn from_scaled(x: f64) -> Self {
        Fixed((x * (FRAC_BITS as f64).exp2()).round() as u128)
    }

    fn to_f64(self) -> f64 {
        self.0 as f64 / (FRAC_BITS as f64).exp2()
    }

    /// `⌈self − u⌉` clamped below at zero.
    fn ceil_minus(self, u: Fixed) -> usize {
        if self.0 <= u.0 {
            return 0;
        }
        let diff = self.0 - u.0;
        ((diff + (1u128 << FRAC_BITS) - 1) >> FRAC_BITS) as usize
    }
}

impl Wire for Fixed {
    fn encode(&self, out: &mut Vec<u8>) {
        (self.0 as u64).encode(out);
        ((self.0 >> 64) as u64).encode(out);
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        let lo = u64::decode(input)? as u128;
        let hi = u64::decode(input)? as u128;
        Ok(Fixed(lo | (hi << 64)))
    }
}

impl ScanValue for Fixed {
    fn zero(&self) -> Self {
        Fixed(0)
    }
    fn combine(&self, rhs: &Self) -> Self {
        Fixed(self.0 + rhs.0)
    }
}

/// Duplication counts for this rank's slice of normalized weights.
///
/// `u` must be identical on every rank. The cumulative weights are accumulated
/// in 64-bit fixed point so the count at each rank boundary is the same no
/// matter how the slice is split, which makes `Σ ncopies = N` exact.
pub fn systematic_choice(comm: &mut Communicator, weights: &[f64], u: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Domain(format!("resampling offset u={u} outside [0, 1)")));
    }
    if let Some(bad) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Contract(format!("normalized weight {bad} is not a finite non-negative number")));
    }
    let n_local = weights.len();
    let n_total = n_local * comm.size();
    let scale = n_total as f64;
    let terms: Vec<Fixed> = weights.iter().map(|w| Fixed::from_scaled(scale * w)).collect();
    let local = terms.iter().fold(Fixed(0), |acc, t| acc.combine(t));
    let (prefix, total) = comm.exclusive_scan_with_total(local)?;
    let total_weight = total.to_f64() / scale;
    if n_total == 0 || (total_weight - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "weights are not normalized: global sum {total_weight}"
        )));
    }

    let u = Fixed::from_scaled(u);
    let is_last_rank = comm.rank() + 1 == comm.size();
    let mut acc = prefix;
    let mut prev = acc.ceil_minus(u).min(n_total);
    let mut out = Vec::with_capacity(n_local);
    for (j, t) in terms.iter().enumerate() {
        acc = acc.combine(t);
        let mut c = acc.ceil_minus(u).min(n_total);
        if is_last_rank && j + 1 == n_local {
            c = n_total;
        }
        out.push(c - prev);
        prev = c;
    }
    Ok(out)
}

/// Checks `0 ≤ ncopies ≤ N` and `Σ ncopies = N` on a gathered array.
pub fn check_workload(ncopies: &[usize]) -> Result<()> {
    let n = ncopies.len();
    if let Some((i, c)) = ncopies.iter().enumerate().find(|(_, c)| **c > n) {
        return Err(Error::Contract(format!(
            "copy-count range invariant violated: ncopies[{i}] = {c} > N = {n}"
        )));
    }
    let sum: usize = ncopies.iter().sum();
    if sum != n {
        return Err(Error::Contract(format!(
            "workload invariant violated: sum of ncopies = {sum}, expected N = {n}"
        )));
    }
    Ok(())
}

/// Textbook in-order expansion: item `j` repeated `ncopies[j]` times.
pub fn sequential_redistribute<T: Clone>(items: &[T], ncopies: &[usize]) -> Result<Vec<T>> {
    if items.len() != ncopies.len() {
        return Err(Error::Contract(format!(
            "{} items but {} copy counts",
            items.len(),
            ncopies.len()
        )));
    }
    check_workload(ncopies)?;
    let mut out = Vec::with_capacity(items.len());
    for (item, &c) in items.iter().zip(ncopies) {
        out.extend(std::iter::repeat_n(item, c).cloned());
    }
    Ok(out)
}

/// Per-element bookkeeping derived from one prefix sum over `ncopies`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftLedger {
    /// Global index of local element 0.
    pub offset: usize,
    /// Number of zero counts strictly before each element (global).
    pub shifts: Vec<usize>,
    /// Inclusive prefix sum of `ncopies` (global).
    pub csum: Vec<usize>,
    pub ncopies: Vec<usize>,
}

impl ShiftLedger {
    pub fn compute(comm: &mut Communicator, ncopies: &[usize]) -> Result<Self> {
        let n_local = ncopies.len();
        let n_total = n_local * comm.size();
        if let Some(c) = ncopies.iter().find(|c| **c > n_total) {
            return Err(Error::Contract(format!(
                "copy-count range invariant violated: ncopies {c} > N = {n_total}"
            )));
        }
        let zeros = ncopies.iter().filter(|c| **c == 0).count() as u64;
        let copies: u64 = ncopies.iter().map(|&c| c as u64).sum();
        let ((zeros_before, copies_before), (_, copies_total)) =
            comm.exclusive_scan_with_total((zeros, copies))?;
        if copies_total as usize != n_total {
            return Err(Error::Contract(format!(
                "workload invariant violated: sum of ncopies = {copies_total}, expected N = {n_total}"
            )));
        }
        let mut shifts = Vec::with_capacity(n_local);
        let mut csum = Vec::with_capacity(n_local);
        let (mut z, mut c) = (zeros_before as usize, copies_before as usize);
        for &nc in ncopies {
            shifts.push(z);
            c += nc;
            csum.push(c);
            if nc == 0 {
                z += 1;
            }
        }
        Ok(ShiftLedger {
            offset: comm.rank() * n_local,
            shifts,
            csum,
            ncopies: ncopies.to_vec(),
        })
    }

    /// Smallest distance any copy of local element `j` travels during the split,
    /// assuming the element already sits at its nearly-sorted position `pos`.
    pub fn min_shift(csum: usize, ncopies: usize, pos: usize) -> i64 {
        csum as i64 - ncopies as i64 - pos as i64
    }

    pub fn max_shift(csum: usize, pos: usize) -> i64 {
        csum as i64 - pos as i64 - 1
    }
}

/// One occupied slot during redistribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub item: T,
    pub ncopies: usize,
    /// Global end (exclusive) of this entry's copy range in the output.
    pub csum: usize,
    /// Remaining downward shift while nearly sorting, in ranks after the
    /// sub-rank part has been applied.
    pub shift: usize,
}

impl<T: Wire> Wire for Entry<T> {
    fn encode(&self, out: &mut Vec<u8>) {
        self.item.encode(out);
        self.ncopies.encode(out);
        self.csum.encode(out);
        self.shift.encode(out);
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        Ok(Entry {
            item: T::decode(input)?,
            ncopies: usize::decode(input)?,
            csum: usize::decode(input)?,
            shift: usize::decode(input)?,
        })
    }
}

/// A rank's `n` slots; `None` marks a slot holding zero copies.
pub type Slots<T> = Vec<Option<Entry<T>>>;

/// Copy counts per slot.
pub fn slot_counts<T>(slots: &Slots<T>) -> Vec<usize> {
    slots.iter().map(|s| s.as_ref().map_or(0, |e| e.ncopies)).collect()
}

/// One line of the optional redistribution trace: `round,rank,i,ncopies`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRow {
    pub round: usize,
    pub rank: usize,
    pub index: usize,
    pub ncopies: usize,
}

impl TraceRow {
    pub const HEADER: &'static str = "round,rank,i,ncopies";
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.round, self.rank, self.index, self.ncopies)
    }
}

struct Tracer<'a> {
    rows: Option<&'a mut Vec<TraceRow>>,
    round: usize,
}

impl Tracer<'_> {
    fn none() -> Tracer<'static> {
        Tracer { rows: None, round: 0 }
    }

    fn record<T>(&mut self, rank: usize, offset: usize, slots: &Slots<T>) {
        if let Some(rows) = self.rows.as_deref_mut() {
            rows.extend(slot_counts(slots).into_iter().enumerate().map(|(j, ncopies)| TraceRow {
                round: self.round,
                rank,
                index: offset + j,
                ncopies,
            }));
        }
        self.round += 1;
    }
}

fn place<T>(slots: &mut Slots<T>, local: usize, entry: Entry<T>, offset: usize) -> Result<()> {
    let slot = slots.get_mut(local).ok_or_else(|| {
        Error::Contract(format!("internal: slot {local} outside rank of {} slots", offset))
    })?;
    if slot.is_some() {
        return Err(Error::Contract(format!(
            "internal: two entries rotated onto global slot {}",
            offset + local
        )));
    }
    *slot = Some(entry);
    Ok(())
}

fn place_all<T>(slots: &mut Slots<T>, incoming: Vec<(usize, Entry<T>)>, offset: usize) -> Result<()> {
    for (local, entry) in incoming {
        place(slots, local, entry, offset)?;
    }
    Ok(())
}

/// Packs items with `ncopies > 0` into the lowest global slots, keeping their
/// relative order. Every item moves down by the number of zero counts before
/// it, applied least-significant bit first.
pub fn rotational_nearly_sort<T: Wire + Clone>(
    comm: &mut Communicator,
    items: Vec<T>,
    ncopies: Vec<usize>,
) -> Result<Slots<T>> {
    nearly_sort_traced(comm, items, ncopies, &mut Tracer::none())
}

fn nearly_sort_traced<T: Wire + Clone>(
    comm: &mut Communicator,
    items: Vec<T>,
    ncopies: Vec<usize>,
    trace: &mut Tracer<'_>,
) -> Result<Slots<T>> {
    if items.len() != ncopies.len() {
        return Err(Error::Contract(format!(
            "{} items but {} copy counts",
            items.len(),
            ncopies.len()
        )));
    }
    let n = items.len();
    let (rank, size) = (comm.rank(), comm.size());
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Contract(format!(
            "each rank must hold a power-of-two number of items, got {n}"
        )));
    }
    let ledger = ShiftLedger::compute(comm, &ncopies)?;
    let offset = ledger.offset;

    let mut slots: Slots<T> = (0..n).map(|_| None).collect();
    trace.record(
        rank,
        offset,
        &items
            .iter()
            .zip(&ncopies)
            .map(|(it, &c)| Some(Entry { item: it.clone(), ncopies: c, csum: 0, shift: 0 }).filter(|_| c > 0))
            .collect::<Slots<T>>(),
    );

    // Sub-rank part of every shift: one local move, overflow goes one rank down.
    let mut spill = Vec::new();
    for (j, item) in items.into_iter().enumerate() {
        let c = ncopies[j];
        if c == 0 {
            continue;
        }
        let shift = ledger.shifts[j];
        let low = shift % n;
        let entry = Entry {
            item,
            ncopies: c,
            csum: ledger.csum[j],
            shift: (shift - low) / n,
        };
        let target = offset + j - low;
        if target >= offset {
            place(&mut slots, target - offset, entry, offset)?;
        } else {
            spill.push((target + n - offset, entry));
        }
    }
    if size > 1 {
        let incoming = comm.exchange_at_distance(1, Direction::Down, spill)?;
        place_all(&mut slots, incoming, offset)?;
    } else if !spill.is_empty() {
        return Err(Error::Contract("internal: single rank spilled during nearly sort".into()));
    }
    trace.record(rank, offset, &slots);

    // Whole-rank part, one bit of the remaining rank distance per round.
    let mut distance = 1;
    while distance < size {
        let mut outgoing = Vec::new();
        for (j, slot) in slots.iter_mut().enumerate() {
            if slot.as_ref().is_some_and(|e| e.shift & distance != 0) {
                let mut e = slot.take().expect("checked");
                e.shift -= distance;
                outgoing.push((j, e));
            }
        }
        let incoming = comm.exchange_at_distance(distance, Direction::Down, outgoing)?;
        place_all(&mut slots, incoming, offset)?;
        trace.record(rank, offset, &slots);
        distance <<= 1;
    }
    Ok(slots)
}

fn check_nearly_sorted<T>(slots: &Slots<T>, offset: usize) -> Result<()> {
    let mut seen_gap = false;
    for (j, slot) in slots.iter().enumerate() {
        match slot {
            None => seen_gap = true,
            Some(e) => {
                let pos = offset + j;
                if seen_gap || e.ncopies == 0 {
                    return Err(Error::Contract(format!(
                        "input to rotational split is not nearly sorted at global slot {pos}"
                    )));
                }
                if ShiftLedger::min_shift(e.csum, e.ncopies, pos) < 0 {
                    return Err(Error::Contract(format!(
                        "input to rotational split is not nearly sorted: copy range of slot {pos} starts at {}",
                        e.csum as i64 - e.ncopies as i64
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Moves copies up until every rank holds exactly `n` pending copies.
///
/// Entries straddling a power-of-two distance are split: copies whose
/// destination lies at least that far away move, the rest stay. The output has
/// each positive count followed by `count − 1` empty slots, with an entry split
/// at a rank boundary where its copies span two ranks.
pub fn rotational_split<T: Wire + Clone>(comm: &mut Communicator, slots: Slots<T>) -> Result<Slots<T>> {
    split_traced(comm, slots, &mut Tracer::none())
}

fn split_traced<T: Wire + Clone>(
    comm: &mut Communicator,
    mut slots: Slots<T>,
    trace: &mut Tracer<'_>,
) -> Result<Slots<T>> {
    let n = slots.len();
    let (rank, size) = (comm.rank(), comm.size());
    let offset = rank * n;
    check_nearly_sorted(&slots, offset)?;

    // Whole-rank distances, most significant first.
    let mut ranks = size / 2;
    while ranks >= 1 {
        let d = ranks * n;
        let mut outgoing = Vec::new();
        for (j, slot) in slots.iter_mut().enumerate() {
            let Some(e) = slot.as_mut() else { continue };
            let end_offset = e.csum as i64 - (offset + j) as i64;
            let moving = (end_offset - d as i64).clamp(0, e.ncopies as i64) as usize;
            if moving == 0 {
                continue;
            }
            if moving == e.ncopies {
                outgoing.push((j, slot.take().expect("occupied")));
            } else {
                let moved = Entry {
                    item: e.item.clone(),
                    ncopies: moving,
                    csum: e.csum,
                    shift: 0,
                };
                e.ncopies -= moving;
                e.csum -= moving;
                outgoing.push((j, moved));
            }
        }
        let incoming = comm.exchange_at_distance(ranks, Direction::Up, outgoing)?;
        place_all(&mut slots, incoming, offset)?;
        trace.record(rank, offset, &slots);
        ranks /= 2;
    }

    // Remaining shifts are shorter than a rank: place each entry at the start
    // of its copy range, cutting it at the next rank boundary.
    let mut out: Slots<T> = (0..n).map(|_| None).collect();
    let mut spill = Vec::new();
    let next_rank = offset + n;
    for e in slots.into_iter().flatten() {
        let start = e.csum - e.ncopies;
        if start < offset {
            return Err(Error::Contract(format!(
                "internal: copy range starting at {start} left behind on rank {rank}"
            )));
        }
        if e.csum <= next_rank {
            let local = start - offset;
            place(&mut out, local, e, offset)?;
        } else if start >= next_rank {
            spill.push((start - next_rank, e));
        } else {
            let tail = e.csum - next_rank;
            let head = Entry {
                item: e.item.clone(),
                ncopies: e.ncopies - tail,
                csum: next_rank,
                shift: 0,
            };
            place(&mut out, start - offset, head, offset)?;
            spill.push((0, Entry { ncopies: tail, ..e }));
        }
    }
    if size > 1 {
        if rank + 1 == size && !spill.is_empty() {
            return Err(Error::Contract("internal: copies spilled past the last rank".into()));
        }
        let incoming = comm.exchange_at_distance(1, Direction::Up, spill)?;
        place_all(&mut out, incoming, offset)?;
    } else if !spill.is_empty() {
        return Err(Error::Contract("internal: single rank spilled during split".into()));
    }
    trace.record(rank, offset, &out);

    let held: usize = slot_counts(&out).iter().sum();
    if held != n {
        return Err(Error::Contract(format!(
            "internal: rank {rank} holds {held} copies after split, expected {n}"
        )));
    }
    Ok(out)
}

/// Sequential expansion of one rank's balanced slots.
fn expand_slots<T: Clone>(slots: Slots<T>, n: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(n);
    for e in slots.into_iter().flatten() {
        out.extend(std::iter::repeat_n(e.item, e.ncopies));
    }
    if out.len() != n {
        return Err(Error::Contract(format!(
            "rank expanded to {} items, expected {n}",
            out.len()
        )));
    }
    Ok(out)
}

/// Replaces this rank's items with its share of the resampled population.
///
/// Collective. The concatenation of every rank's output in rank order equals
/// [`sequential_redistribute`] of the concatenated inputs.
pub fn parallel_redistribute<T: Wire + Clone>(
    comm: &mut Communicator,
    items: Vec<T>,
    ncopies: Vec<usize>,
) -> Result<Vec<T>> {
    redistribute_inner(comm, items, ncopies, &mut Tracer::none())
}

/// [`parallel_redistribute`] that also appends this rank's slot counts after
/// every movement step to `trace`.
pub fn parallel_redistribute_traced<T: Wire + Clone>(
    comm: &mut Communicator,
    items: Vec<T>,
    ncopies: Vec<usize>,
    trace: &mut Vec<TraceRow>,
) -> Result<Vec<T>> {
    redistribute_inner(
        comm,
        items,
        ncopies,
        &mut Tracer {
            rows: Some(trace),
            round: 0,
        },
    )
}

fn redistribute_inner<T: Wire + Clone>(
    comm: &mut Communicator,
    items: Vec<T>,
    ncopies: Vec<usize>,
    trace: &mut Tracer<'_>,
) -> Result<Vec<T>> {
    let n = items.len();
    if comm.size() == 1 {
        return sequential_redistribute(&items, &ncopies);
    }
    let sorted = nearly_sort_traced(comm, items, ncopies, trace)?;
    let balanced = split_traced(comm, sorted, trace)?;
    expand_slots(balanced, n)
}

/// Log-weight every sample receives after resampling: the mean of the
/// pre-resampling weights, so the total weight is unchanged.
pub fn reset_log_weight(log_total: f64, n_total: usize) -> f64 {
    log_total - (n_total as f64).ln()
}
