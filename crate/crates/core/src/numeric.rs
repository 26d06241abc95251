//! Small numeric utilities: order-independent summation, stable logistic
//! helpers, and deterministic seed/hash derivation.

/// Sums finite `f64` values with correct rounding of the exact real sum.
///
/// The result is independent of the order of the addends, which the fused
/// attention path relies on for bit-exact permutation properties. This is
/// Shewchuk's non-overlapping-partials scheme with a final round that
/// resolves half-ulp ties the same way regardless of input order.
pub fn exact_sum<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let mut partials: Vec<f64> = Vec::with_capacity(8);
    for mut x in values {
        debug_assert!(x.is_finite(), "exact_sum expects finite addends");
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }

    // Round the non-overlapping partials (ascending magnitude) to one f64.
    let mut n = partials.len();
    let mut total = 0.0;
    if n > 0 {
        n -= 1;
        total = partials[n];
        let mut lo = 0.0;
        while n > 0 {
            let hi = total;
            n -= 1;
            let y = partials[n];
            total = hi + y;
            lo = y - (total - hi);
            if lo != 0.0 {
                break;
            }
        }
        // Half-even correction: if the discarded tail pushes past a half ulp,
        // nudge the total by one ulp in the tail's direction.
        if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = total + y;
            if y == x - total {
                total = x;
            }
        }
    }
    total
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(-|x|))`, the shared tail of the stable logistic loss.
pub fn log1p_exp_neg_abs(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p()
}

/// FNV-1a over a byte slice; used for content hashes and seed derivation.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One SplitMix64 scrambling step.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a stream tag.
///
/// Every consumer of randomness (init, shuffling, dropout, synthesis) draws
/// from its own tagged stream so adding one consumer cannot silently shift
/// the draws of another.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    splitmix64(base ^ fnv1a64(tag.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_sum_matches_naive_on_small_integers() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(exact_sum(xs.iter().copied()), 15.0);
        assert_eq!(exact_sum(std::iter::empty()), 0.0);
    }

    #[test]
    fn exact_sum_recovers_cancelled_tail() {
        // Naive left-to-right summation loses the 1.0 entirely.
        let xs = [1e16, 1.0, -1e16];
        assert_eq!(exact_sum(xs.iter().copied()), 1.0);
        let xs = [1e100, 1.0, -1e100, 0.5];
        assert_eq!(exact_sum(xs.iter().copied()), 1.5);
    }

    proptest! {
        #[test]
        fn exact_sum_is_order_independent(
            mut xs in proptest::collection::vec(-1e12f64..1e12, 1..40),
            seed in any::<u64>(),
        ) {
            let forward = exact_sum(xs.iter().copied());
            // Deterministic shuffle driven by the proptest seed.
            let mut s = seed;
            for i in (1..xs.len()).rev() {
                s = splitmix64(s);
                xs.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let shuffled = exact_sum(xs.iter().copied());
            prop_assert_eq!(forward.to_bits(), shuffled.to_bits());
        }

        #[test]
        fn sigmoid_is_bounded_and_monotone(x in -700f64..700.0, y in -700f64..700.0) {
            let (sx, sy) = (sigmoid(x), sigmoid(y));
            prop_assert!((0.0..=1.0).contains(&sx));
            if x < y {
                prop_assert!(sx <= sy);
            }
        }
    }

    #[test]
    fn sigmoid_extremes_do_not_overflow() {
        assert_eq!(sigmoid(1e4), 1.0);
        assert_eq!(sigmoid(-1e4), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(7, "init");
        let b = derive_seed(7, "shuffle");
        let c = derive_seed(8, "init");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "init"));
    }

    #[test]
    fn fnv_matches_published_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_ne!(fnv1a64(b"a"), fnv1a64(b"b"));
    }
}
