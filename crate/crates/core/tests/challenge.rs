use proptest::prelude::*;
use puf_forge::challenge::{generate, popcount_histogram, quadratic_expand, quadratic_len, split_blocks};
use puf_forge::{Challenge, SchemeType};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn type_a_positions_are_fair() {
    // one chi-square test over the 121 per-position activation counts
    let count = 4000;
    let chs = generate(11, SchemeType::A, count, 17).unwrap();
    let mut ones = [0usize; 121];
    for ch in &chs {
        for (i, b) in ch.bits().iter().enumerate() {
            ones[i] += *b as usize;
        }
    }
    let expected = count as f64 / 2.0;
    let stat: f64 = ones
        .iter()
        .map(|&o| {
            let (a, z) = (o as f64, (count - o) as f64);
            (a - expected).powi(2) / expected + (z - expected).powi(2) / expected
        })
        .sum();
    let p = 1.0 - ChiSquared::new(121.0).unwrap().cdf(stat);
    assert!(p > 1e-4, "chi-square {stat}, p = {p}");
}

#[test]
fn popcount_follows_binomial() {
    let chs = generate(5, SchemeType::A, 20000, 3).unwrap();
    let hist = popcount_histogram(&chs).unwrap();
    let binom = statrs::distribution::Binomial::new(0.5, 25).unwrap();
    use statrs::distribution::Discrete;
    let stat: f64 = (5..=20u64)
        .map(|k| {
            let e = binom.pmf(k) * 20000.0;
            let o = *hist.get(&(k as usize)).unwrap_or(&0) as f64;
            (o - e).powi(2) / e
        })
        .sum();
    // 16 cells, df 15; p > 1e-4 corresponds to a statistic below about 45
    assert!(stat < 45.0, "chi-square {stat}");
}

#[test]
fn type_b_leaves_odd_cells_dark_on_any_grid() {
    for l in [3, 5, 7, 9] {
        let chs = generate(l, SchemeType::B, 200, l as u64).unwrap();
        for ch in &chs {
            for r in 0..l {
                for c in 0..l {
                    if (r + c) % 2 == 1 {
                        assert!(!ch.get(r, c));
                    }
                }
            }
        }
        let mut seen = vec![false; l * l];
        chs.iter().for_each(|ch| ch.bits().iter().enumerate().for_each(|(i, b)| seen[i] |= *b));
        assert_eq!(seen.iter().filter(|s| **s).count(), (l * l).div_ceil(2));
    }
}

proptest! {
    #[test]
    fn quadratic_expansion_counts_active_pairs(bits in prop::collection::vec(any::<bool>(), 1..40)) {
        let q = quadratic_expand(&bits);
        let a = bits.iter().filter(|b| **b).count();
        prop_assert_eq!(q.len(), quadratic_len(bits.len()));
        prop_assert_eq!(q.iter().filter(|v| **v == 1.0).count(), a * (a + 1) / 2);
        prop_assert!(q.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn split_multiplies_popcount(bits in prop::collection::vec(any::<bool>(), 9), factor in 1usize..5) {
        let ch = Challenge::new(3, bits).unwrap();
        let s = split_blocks(&ch, factor).unwrap();
        prop_assert_eq!(s.grid_side(), 3 * factor);
        prop_assert_eq!(s.popcount(), factor * factor * ch.popcount());
    }

    #[test]
    fn caps_hold_for_every_seed(seed in any::<u64>(), l in prop::sample::select(vec![3usize, 5, 7, 11])) {
        let n = l * l;
        for ch in generate(l, SchemeType::C, 20, seed).unwrap() {
            prop_assert!(ch.popcount() <= n / 2);
        }
        for ch in generate(l, SchemeType::D, 20, seed).unwrap() {
            prop_assert!(ch.popcount() <= 2 * n / 3);
        }
    }
}
