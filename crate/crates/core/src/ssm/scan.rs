//! Linear-recurrence scans `h_t = a_t ⊙ h_{t-1} + b_t` over a diagonal state.
//!
//! Arrays are `[len, state]` row-major. The parallel variant splits time into
//! fixed chunks, reduces each chunk to one affine map, runs a Blelloch
//! up-sweep/down-sweep over the chunk maps to get every chunk's carry-in, then
//! replays the chunks. Chunk boundaries and tree shape depend only on `len`
//! and `chunk`, never on the worker count, so results are reproducible.

use rayon::prelude::*;

/// An affine map `h ↦ a·h + b`.
pub type Affine = (f64, f64);

pub const IDENTITY: Affine = (1.0, 0.0);

/// `later ∘ earlier`: apply `earlier` first, then `later`.
#[inline]
pub fn combine(later: Affine, earlier: Affine) -> Affine {
    (later.0 * earlier.0, later.0 * earlier.1 + later.1)
}

pub fn scan_diag_sequential(a: &[f64], b: &[f64], state: usize) -> Vec<f64> {
    let mut h = vec![0.0; a.len()];
    let mut prev = vec![0.0; state];
    for (t, (at, bt)) in a.chunks(state).zip(b.chunks(state)).enumerate() {
        for n in 0..state {
            prev[n] = at[n] * prev[n] + bt[n];
        }
        h[t * state..(t + 1) * state].copy_from_slice(&prev);
    }
    h
}

/// Exclusive Blelloch scan, in place, of `maps` (`[count, state]`) with
/// `count` a power of two. Afterwards entry `i` is the composition of entries
/// `0..i` (identity for `i = 0`).
pub fn blelloch_exclusive(maps: &mut [Affine], count: usize, state: usize) {
    debug_assert!(count.is_power_of_two());
    debug_assert_eq!(maps.len(), count * state);
    // up-sweep
    let mut stride = 1;
    while stride < count {
        for right in (2 * stride - 1..count).step_by(2 * stride) {
            let left = right - stride;
            for n in 0..state {
                maps[right * state + n] = combine(maps[right * state + n], maps[left * state + n]);
            }
        }
        stride *= 2;
    }
    // down-sweep
    for n in 0..state {
        maps[(count - 1) * state + n] = IDENTITY;
    }
    let mut stride = count / 2;
    while stride >= 1 {
        for right in (2 * stride - 1..count).step_by(2 * stride) {
            let left = right - stride;
            for n in 0..state {
                let carry = maps[right * state + n];
                let l = maps[left * state + n];
                maps[left * state + n] = carry;
                maps[right * state + n] = combine(l, carry);
            }
        }
        stride /= 2;
    }
}

pub fn scan_diag_parallel(a: &[f64], b: &[f64], state: usize, chunk: usize) -> Vec<f64> {
    let len = a.len() / state;
    let chunk = chunk.max(1);
    let chunks = len.div_ceil(chunk);
    let count = chunks.next_power_of_two();
    let span = chunk * state;

    let mut maps = vec![IDENTITY; count * state];
    maps[..chunks * state].par_chunks_mut(state).zip(a.par_chunks(span).zip(b.par_chunks(span))).for_each(|(agg, (ac, bc))| {
        for (at, bt) in ac.chunks(state).zip(bc.chunks(state)) {
            for n in 0..state {
                agg[n] = combine((at[n], bt[n]), agg[n]);
            }
        }
    });

    blelloch_exclusive(&mut maps, count, state);

    let mut h = vec![0.0; a.len()];
    h.par_chunks_mut(span).zip(a.par_chunks(span).zip(b.par_chunks(span))).zip(maps.par_chunks(state)).for_each(
        |((hc, (ac, bc)), carry)| {
            // the zero initial state makes each carry-in equal to its offset
            let mut prev: Vec<f64> = carry.iter().map(|m| m.1).collect();
            for (t, (at, bt)) in ac.chunks(state).zip(bc.chunks(state)).enumerate() {
                for n in 0..state {
                    prev[n] = at[n] * prev[n] + bt[n];
                }
                hc[t * state..(t + 1) * state].copy_from_slice(&prev);
            }
        },
    );
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_ones_is_prefix_sum() {
        let len = 37;
        let a = vec![1.0; len];
        let b = vec![1.0; len];
        for h in [scan_diag_sequential(&a, &b, 1), scan_diag_parallel(&a, &b, 1, 4)] {
            let want: Vec<f64> = (1..=len).map(|t| t as f64).collect();
            assert_eq!(h, want);
        }
    }

    #[test]
    fn blelloch_matches_running_composition() {
        let count = 8;
        let items: Vec<Affine> = (0..count).map(|i| (0.5 + 0.05 * i as f64, i as f64 - 3.0)).collect();
        let mut maps = items.clone();
        blelloch_exclusive(&mut maps, count, 1);
        let mut acc = IDENTITY;
        for i in 0..count {
            assert!((maps[i].0 - acc.0).abs() < 1e-12 && (maps[i].1 - acc.1).abs() < 1e-12, "entry {i}");
            acc = combine(items[i], acc);
        }
    }

    proptest! {
        #[test]
        fn combine_is_associative(v in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let (p, q, r) = ((v[0], v[1]), (v[2], v[3]), (v[4], v[5]));
            let left = combine(combine(r, q), p);
            let right = combine(r, combine(q, p));
            prop_assert!((left.0 - right.0).abs() <= 1e-12);
            prop_assert!((left.1 - right.1).abs() <= 1e-12);
        }

        #[test]
        fn parallel_equals_sequential(
            len in 1usize..300,
            state in 1usize..5,
            chunk in 1usize..70,
            seed in any::<u64>(),
        ) {
            let mut s = seed | 1;
            let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s >> 11) as f64 / (1u64 << 53) as f64 };
            let a: Vec<f64> = (0..len * state).map(|_| next()).collect();
            let b: Vec<f64> = (0..len * state).map(|_| next() * 2.0 - 1.0).collect();
            let seq = scan_diag_sequential(&a, &b, state);
            let par = scan_diag_parallel(&a, &b, state, chunk);
            for (x, y) in seq.iter().zip(&par) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
