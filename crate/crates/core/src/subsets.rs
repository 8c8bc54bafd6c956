//! Size-`k` subsets of the `K` excluded instruments: counting, lexicographic
//! enumeration, unranking and seeded uniform sampling without replacement.

use std::collections::HashSet;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default cap on the number of subsets [`enumerate_subsets`] will materialize.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Default number of random subsets per `k` when the complete subset is larger.
pub const DEFAULT_DRAWS: usize = 1000;

/// Sorted, duplicate-free instrument indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubsetIndex(Vec<usize>);

impl SubsetIndex {
    pub fn new(mut members: Vec<usize>, total: usize) -> Result<Self> {
        members.sort_unstable();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(format!(
                "subset {members:?} has repeated members"
            )));
        }
        if members.last().is_some_and(|&m| m >= total) {
            return Err(Error::InvalidParameter(format!(
                "subset {members:?} out of range for {total} instruments"
            )));
        }
        Ok(SubsetIndex(members))
    }

    /// All `total` instruments.
    pub fn full(total: usize) -> Self {
        SubsetIndex((0..total).collect())
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }
}

/// `M(K, k) = K! / (k! (K-k)!)`, exact.
pub fn binomial_count(total: usize, k: usize) -> Result<BigUint> {
    if k > total {
        return Err(Error::InvalidParameter(format!(
            "subset size {k} outside [0, {total}]"
        )));
    }
    let k = k.min(total - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= BigUint::from(total - i);
        acc /= BigUint::from(i + 1);
    }
    Ok(acc)
}

/// `M(K, k)` when it fits in a `u128`.
pub fn binomial_u128(total: usize, k: usize) -> Option<u128> {
    binomial_count(total, k).ok()?.to_u128()
}

/// `M(K, k)` as a float, for weights and ratios.
pub(crate) fn binomial_f64(total: usize, k: usize) -> f64 {
    if k > total {
        return 0.0;
    }
    let k = k.min(total - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (total - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// The complete subset of size `k`, lexicographically ordered.
pub fn enumerate_subsets(total: usize, k: usize, cap: u64) -> Result<Vec<SubsetIndex>> {
    let count = binomial_count(total, k)?;
    let fits = count.to_u64().filter(|&c| c <= cap);
    let Some(count) = fits else {
        return Err(Error::EnumerationCap {
            k,
            count: count.to_string(),
            cap,
        });
    };
    let mut out = Vec::with_capacity(count as usize);
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(SubsetIndex(cur.clone()));
        // rightmost position that can still advance
        let Some(pos) = (0..k).rev().find(|&i| cur[i] < total - k + i) else {
            break;
        };
        cur[pos] += 1;
        for i in pos + 1..k {
            cur[i] = cur[i - 1] + 1;
        }
    }
    Ok(out)
}

/// Subset at lexicographic position `rank` of the complete subset.
pub fn unrank(total: usize, k: usize, mut rank: u128) -> Result<SubsetIndex> {
    let count = binomial_u128(total, k)
        .ok_or_else(|| Error::InvalidParameter("subset count exceeds u128".into()))?;
    if rank >= count {
        return Err(Error::InvalidParameter(format!(
            "rank {rank} outside [0, {count})"
        )));
    }
    let mut members = Vec::with_capacity(k);
    let mut next = 0usize;
    for slot in 0..k {
        loop {
            // subsets whose `slot`-th member is `next`
            let block = binomial_u128(total - next - 1, k - slot - 1).unwrap_or(u128::MAX);
            if rank < block {
                members.push(next);
                next += 1;
                break;
            }
            rank -= block;
            next += 1;
        }
    }
    Ok(SubsetIndex(members))
}

/// Lexicographic position of `s` among size-`s.len()` subsets of `total`.
pub fn rank(total: usize, s: &SubsetIndex) -> Option<u128> {
    let k = s.len();
    let mut r = 0u128;
    let mut next = 0usize;
    for (slot, &m) in s.members().iter().enumerate() {
        while next < m {
            r = r.checked_add(binomial_u128(total - next - 1, k - slot - 1)?)?;
            next += 1;
        }
        next = m + 1;
    }
    Some(r)
}

/// `draws` distinct size-`k` subsets drawn uniformly, or the full enumeration
/// when `draws >= M(K, k)`. Deterministic in `seed`.
pub fn sample_subsets(total: usize, k: usize, draws: usize, seed: u64) -> Result<Vec<SubsetIndex>> {
    if draws == 0 {
        return Err(Error::InvalidParameter(
            "number of draws must be positive".into(),
        ));
    }
    let count = binomial_count(total, k)?;
    if count <= BigUint::from(draws) {
        return enumerate_subsets(total, k, u64::MAX);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(draws);
    match count.to_u128() {
        Some(m) => {
            let mut seen = HashSet::with_capacity(draws);
            while out.len() < draws {
                let r = rng.random_range(0..m);
                if seen.insert(r) {
                    out.push(unrank(total, k, r)?);
                }
            }
        }
        None => {
            let mut seen = HashSet::with_capacity(draws);
            while out.len() < draws {
                let s = floyd_sample(&mut rng, total, k);
                if seen.insert(s.clone()) {
                    out.push(s);
                }
            }
        }
    }
    Ok(out)
}

// Uniform k-subset without enumeration, for counts beyond u128.
fn floyd_sample<R: Rng>(rng: &mut R, total: usize, k: usize) -> SubsetIndex {
    let mut chosen = Vec::with_capacity(k);
    for j in total - k..total {
        let t = rng.random_range(0..=j);
        if chosen.contains(&t) {
            chosen.push(j);
        } else {
            chosen.push(t);
        }
    }
    chosen.sort_unstable();
    SubsetIndex(chosen)
}

/// How the subsets for one `k` are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Every subset of the complete subset.
    Exact,
    /// `draws` distinct random subsets.
    Sampled { draws: usize, seed: u64 },
}

/// The subset collection averaged for a given `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetPlan {
    total: usize,
    k: usize,
    mode: SamplingMode,
}

impl SubsetPlan {
    /// Exact when `M(K, k) <= max_draws` (or `max_draws` is `None`), sampled otherwise.
    pub fn new(total: usize, k: usize, max_draws: Option<usize>, seed: u64) -> Result<Self> {
        if k == 0 || k > total {
            return Err(Error::InvalidParameter(format!(
                "subset size {k} outside [1, {total}]"
            )));
        }
        let mode = match max_draws {
            None => SamplingMode::Exact,
            Some(0) => {
                return Err(Error::InvalidParameter(
                    "number of draws must be positive".into(),
                ))
            }
            Some(r) => {
                if binomial_count(total, k)? <= BigUint::from(r) {
                    SamplingMode::Exact
                } else {
                    SamplingMode::Sampled { draws: r, seed }
                }
            }
        };
        Ok(SubsetPlan { total, k, mode })
    }

    pub fn exact(total: usize, k: usize) -> Result<Self> {
        Self::new(total, k, None, 0)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn is_exact(&self) -> bool {
        self.mode == SamplingMode::Exact
    }

    /// Number of subsets the plan averages over.
    pub fn planned_count(&self) -> BigUint {
        match self.mode {
            SamplingMode::Exact => binomial_count(self.total, self.k).unwrap_or_default(),
            SamplingMode::Sampled { draws, .. } => BigUint::from(draws),
        }
    }

    /// Materializes the subsets; exact plans respect `cap`.
    pub fn subsets(&self, cap: u64) -> Result<Vec<SubsetIndex>> {
        match self.mode {
            SamplingMode::Exact => enumerate_subsets(self.total, self.k, cap),
            SamplingMode::Sampled { draws, seed } => {
                sample_subsets(self.total, self.k, draws, seed)
            }
        }
    }
}

/// Mixes a master seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
