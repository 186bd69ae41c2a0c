//! Decoding-time watermarks used as distillation teachers and comparison
//! points: the green-list bias scheme (KGW) with a binomial detector, and
//! the exponential-minimum scheme (KTH) with a permutation-style detector.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab};
use crate::error::{Result, WmError};
use crate::lm::{LogitBias, NextToken};
use crate::stats::binomial_upper_tail;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function applied to `state`.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based stream: the i-th output is `mix64(seed + (i + 1)·φ)`,
/// i.e. plain SplitMix64 started at `seed`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `0..bound` via the high half of a 128-bit product.
    pub fn below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

/// Green-list seed for a context: the key mixed with the sum of the
/// previous token ids (additive left hash).
pub fn kgw_seed(key: u64, prev: &[TokenId]) -> u64 {
    let sum: u64 = prev.iter().map(|&t| t as u64).sum();
    mix64(key ^ mix64(sum.wrapping_add(GOLDEN)))
}

/// Permutation of `0..v` by Fisher–Yates driven by [`CounterRng`]: for
/// `i = v−1 … 1`, swap `i` with `below(i + 1)`.
pub fn seeded_permutation(seed: u64, v: usize) -> Vec<usize> {
    let mut rng = CounterRng::new(seed);
    let mut perm: Vec<usize> = (0..v).collect();
    for i in (1..v).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KgwScheme {
    pub key: u64,
    /// Number of previous tokens hashed into the green-list seed.
    pub k: usize,
    pub gamma: f64,
    pub delta: f64,
    pub vocab: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KgwDetection {
    pub green_count: usize,
    pub n_scored: usize,
    pub p_value: f64,
    /// One-proportion z statistic, kept for ranking.
    pub z: f64,
}

impl KgwScheme {
    pub fn new(key: u64, k: usize, gamma: f64, delta: f64) -> Result<Self> {
        let s = KgwScheme { key, k, gamma, delta, vocab: Vocab::SIZE };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(WmError::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(WmError::Config(format!("delta {} must be finite and non-negative", self.delta)));
        }
        if self.vocab == 0 {
            return Err(WmError::Config("vocab must be positive".into()));
        }
        Ok(())
    }

    pub fn green_size(&self) -> usize {
        (self.gamma * self.vocab as f64).round() as usize
    }

    /// Green mask for the `k` tokens preceding a position.
    pub fn green_mask(&self, prev: &[TokenId]) -> Result<Vec<bool>> {
        if prev.len() != self.k {
            return Err(WmError::InvalidArgument(format!("expected {} previous tokens, got {}", self.k, prev.len())));
        }
        let perm = seeded_permutation(kgw_seed(self.key, prev), self.vocab);
        let mut mask = vec![false; self.vocab];
        for &t in &perm[..self.green_size()] {
            mask[t] = true;
        }
        Ok(mask)
    }

    pub fn is_green(&self, prev: &[TokenId], token: TokenId) -> Result<bool> {
        Ok(self.green_mask(prev)?.get(token as usize).copied().unwrap_or(false))
    }

    pub fn bias(&self, prev: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.green_mask(prev)?.into_iter().map(|g| if g { self.delta } else { 0.0 }).collect())
    }

    /// Green count over positions `k..len`, each under its own context.
    pub fn green_count(&self, text: &[TokenId]) -> Result<(usize, usize)> {
        if text.len() <= self.k {
            return Err(WmError::InsufficientLength { need: self.k, got: text.len() });
        }
        let mut green = 0;
        for t in self.k..text.len() {
            if self.is_green(&text[t - self.k..t], text[t])? {
                green += 1;
            }
        }
        Ok((green, text.len() - self.k))
    }

    /// `p = P(B > green_count)` for `B ~ Bin(len − k, γ)`.
    pub fn detect(&self, text: &[TokenId]) -> Result<KgwDetection> {
        let (green_count, n) = self.green_count(text)?;
        let p_value = binomial_upper_tail(n, green_count, self.gamma);
        let z = (green_count as f64 - self.gamma * n as f64) / (n as f64 * self.gamma * (1.0 - self.gamma)).sqrt();
        Ok(KgwDetection { green_count, n_scored: n, p_value, z })
    }
}

impl LogitBias for KgwScheme {
    /// Contexts shorter than `k` are left unbiased.
    fn add_bias(&self, context: &[TokenId], logits: &mut [f64]) -> Result<()> {
        if context.len() < self.k {
            return Ok(());
        }
        let mask = self.green_mask(&context[context.len() - self.k..])?;
        for (l, g) in logits.iter_mut().zip(mask) {
            if g {
                *l += self.delta;
            }
        }
        Ok(())
    }
}

/// Key sequence of `m` vectors in `[0,1]^V`, drawn from ChaCha8 seeded with
/// the key seed, and the set of generation shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct KthScheme {
    pub key_seed: u64,
    pub m: usize,
    pub s: usize,
    pub vocab: usize,
    xi: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KthDetection {
    pub d_min: f64,
    pub p_value: f64,
}

impl KthScheme {
    pub fn new(key_seed: u64, m: usize, s: usize, vocab: usize) -> Result<Self> {
        if m == 0 || s == 0 || s > m || vocab == 0 {
            return Err(WmError::Config(format!("KTH needs 1 <= s <= m and a vocabulary (m={m}, s={s})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key_seed);
        let xi = (0..m * vocab).map(|_| rng.random::<f32>()).collect();
        Ok(KthScheme { key_seed, m, s, vocab, xi })
    }

    /// Builds a scheme from explicit key vectors (row-major `m × V`).
    pub fn from_keys(m: usize, s: usize, vocab: usize, xi: Vec<f32>) -> Result<Self> {
        if xi.len() != m * vocab || xi.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(WmError::InvalidArgument("key entries must be m·V values in [0, 1]".into()));
        }
        if m == 0 || s == 0 || s > m {
            return Err(WmError::Config(format!("KTH needs 1 <= s <= m (m={m}, s={s})")));
        }
        Ok(KthScheme { key_seed: 0, m, s, vocab, xi })
    }

    pub fn key_row(&self, r: usize) -> &[f32] {
        &self.xi[r * self.vocab..(r + 1) * self.vocab]
    }

    pub fn shifts(&self) -> Vec<usize> {
        (0..self.s).map(|i| i * (self.m / self.s)).collect()
    }

    /// `argmax_i ξ_i / p_i` with the key row for 1-based `position` under
    /// shift `tau`; tokens with `p_i < 1e-12` are excluded.
    pub fn select_token(&self, p: &[f64], position: usize, tau: usize) -> Result<TokenId> {
        if position == 0 {
            return Err(WmError::InvalidArgument("positions are 1-based".into()));
        }
        if p.len() != self.vocab {
            return Err(WmError::shape("kth_select_token", format!("{} probabilities for vocab {}", p.len(), self.vocab)));
        }
        let row = self.key_row((position + tau - 1) % self.m);
        let mut best: Option<(usize, f64)> = None;
        for (i, (&pi, &x)) in p.iter().zip(row).enumerate() {
            if pi < 1e-12 {
                continue;
            }
            let r = x as f64 / pi;
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((i, r));
            }
        }
        best.map(|(i, _)| i as TokenId).ok_or_else(|| WmError::InvalidArgument("probability vector has no mass".into()))
    }

    /// `d = Σ_t log(1 − ξ^{(t+τ)}_{x_t})` aligned at offset `tau`.
    pub fn alignment_cost(&self, text: &[TokenId], tau: usize) -> f64 {
        text.iter()
            .enumerate()
            .map(|(t, &x)| {
                let row = self.key_row((t + tau) % self.m);
                let xi = row.get(x as usize).copied().unwrap_or(0.0) as f64;
                (1.0 - xi.min(1.0 - 1e-9)).ln()
            })
            .sum()
    }

    /// Minimum alignment cost over every cyclic offset of the key.
    pub fn d_min(&self, text: &[TokenId]) -> f64 {
        (0..self.m).map(|tau| self.alignment_cost(text, tau)).fold(f64::INFINITY, f64::min)
    }

    /// `p = (1 + #{refs with d_min ≤ observed}) / (T + 1)`.
    pub fn detect(&self, text: &[TokenId], reference_null: &[Vec<TokenId>]) -> Result<KthDetection> {
        let refs: Vec<f64> = reference_null.iter().map(|r| self.d_min(r)).collect();
        self.detect_with_reference(text, &refs)
    }

    /// As [`KthScheme::detect`] with precomputed reference statistics.
    pub fn detect_with_reference(&self, text: &[TokenId], ref_d_min: &[f64]) -> Result<KthDetection> {
        if ref_d_min.len() < 20 {
            return Err(WmError::TooFewSamples { need: 20, got: ref_d_min.len() });
        }
        if text.is_empty() {
            return Err(WmError::InsufficientLength { need: 0, got: 0 });
        }
        let d_min = self.d_min(text);
        let below = ref_d_min.iter().filter(|&&r| r <= d_min).count();
        Ok(KthDetection { d_min, p_value: (1 + below) as f64 / (ref_d_min.len() + 1) as f64 })
    }

    /// A sampler for one text with a shift drawn from the shift set.
    pub fn sampler(&self, shift_seed: u64) -> KthSampler<'_> {
        let shifts = self.shifts();
        let tau = shifts[ChaCha8Rng::seed_from_u64(shift_seed).random_range(0..shifts.len())];
        KthSampler { scheme: self, tau, start: None }
    }
}

/// Deterministic KTH decoding; the position counter starts at the first
/// generated token.
pub struct KthSampler<'a> {
    scheme: &'a KthScheme,
    pub tau: usize,
    start: Option<usize>,
}

impl NextToken for KthSampler<'_> {
    fn next_token(&mut self, context: &[TokenId], logits: &[f32], _rng: &mut ChaCha8Rng) -> Result<TokenId> {
        let start = *self.start.get_or_insert(context.len());
        let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let w: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / total).collect();
        self.scheme.select_token(&p, context.len() - start + 1, self.tau)
    }
}

/// Decoding-watermark key material as stored on disk. The seed is the
/// secret; the file should be kept out of version control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum SchemeKey {
    Kgw { seed: u64, k: usize, gamma: f64, delta: f64 },
    Kth { seed: u64, m: usize, s: usize },
}

pub enum DecodingScheme {
    Kgw(KgwScheme),
    Kth(KthScheme),
}

impl SchemeKey {
    pub fn build(&self) -> Result<DecodingScheme> {
        Ok(match *self {
            SchemeKey::Kgw { seed, k, gamma, delta } => DecodingScheme::Kgw(KgwScheme::new(seed, k, gamma, delta)?),
            SchemeKey::Kth { seed, m, s } => DecodingScheme::Kth(KthScheme::new(seed, m, s, Vocab::SIZE)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| WmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| WmError::io(path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::binomial_pmf;

    #[test]
    fn counter_rng_matches_reference_splitmix() {
        // reference SplitMix64 outputs for seed 0
        let mut r = CounterRng::new(0);
        assert_eq!(r.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(r.next_u64(), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = seeded_permutation(42, 259);
        assert_ne!(p, (0..259).collect::<Vec<_>>());
        p.sort_unstable();
        assert_eq!(p, (0..259).collect::<Vec<_>>());
    }

    #[test]
    fn green_mask_contracts() {
        let s = KgwScheme::new(7, 1, 0.25, 2.0).unwrap();
        let m = s.green_mask(&[12]).unwrap();
        assert_eq!(m, s.green_mask(&[12]).unwrap());
        assert_eq!(m.iter().filter(|&&g| g).count(), 65);
        assert!(s.green_mask(&[]).is_err());
        let s0 = KgwScheme::new(7, 0, 0.25, 2.0).unwrap();
        let b = s0.bias(&[]).unwrap();
        assert_eq!(b.iter().filter(|&&x| x == 2.0).count(), 65);
        let z = KgwScheme::new(7, 0, 0.25, 0.0).unwrap();
        assert!(z.bias(&[]).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equal_sums_share_masks_and_others_rarely_agree() {
        let s = KgwScheme::new(3, 2, 0.25, 1.0).unwrap();
        assert_eq!(s.green_mask(&[10, 20]).unwrap(), s.green_mask(&[15, 15]).unwrap());
        // two independent lists of size γV overlap on about γ² V tokens
        let mut overlap = 0.0;
        let trials = 200;
        for c in 0..trials {
            let a = s.green_mask(&[c, 0]).unwrap();
            let b = s.green_mask(&[c + 1000, 0]).unwrap();
            overlap += a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        }
        let mean = overlap / trials as f64 / 259.0;
        assert!((mean - 65.0 * 65.0 / 259.0 / 259.0).abs() < 0.01, "{mean}");
    }

    fn oracle_tail(n: usize, c: usize, p: f64) -> f64 {
        1.0 - (0..=c).map(|j| binomial_pmf(n, j, p)).sum::<f64>()
    }

    #[test]
    fn detection_hand_cases() {
        let s = KgwScheme::new(11, 0, 0.25, 2.0).unwrap();
        let mask = s.green_mask(&[]).unwrap();
        let red = mask.iter().position(|&g| !g).unwrap() as TokenId;
        let green = mask.iter().position(|&g| g).unwrap() as TokenId;
        let d = s.detect(&[red; 20]).unwrap();
        assert_eq!(d.green_count, 0);
        assert!((d.p_value - (1.0 - 0.75f64.powi(20))).abs() < 1e-12);
        assert!((d.p_value - 0.99683).abs() < 1e-5);
        assert!(s.detect(&[green; 20]).unwrap().p_value < 1e-11);
        assert!(s.detect(&[]).is_err());
        let mut last = 2.0;
        for g in 0..=20 {
            let p = binomial_upper_tail(20, g, 0.25);
            assert!(p <= last);
            assert!((p - oracle_tail(20, g, 0.25)).abs() < 1e-12);
            last = p;
        }
    }

    #[test]
    fn kth_hand_case_and_invariance() {
        let s = KthScheme::from_keys(1, 1, 3, vec![0.9, 0.5, 0.1]).unwrap();
        assert_eq!(s.select_token(&[0.5, 0.25, 0.25], 1, 0).unwrap(), 1);
        let s = KthScheme::new(5, 16, 4, 50).unwrap();
        assert_eq!(s.shifts(), vec![0, 4, 8, 12]);
        let u = vec![1.0 / 50.0; 50];
        let row = s.key_row(2);
        let best = (0..50).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(s.select_token(&u, 3, 0).unwrap() as usize, best);
        let mut p: Vec<f64> = (1..=50).map(|i| i as f64).collect();
        let tot: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= tot);
        let scaled: Vec<f64> = p.iter().map(|x| x * 3.0).collect();
        assert_eq!(s.select_token(&p, 5, 4).unwrap(), s.select_token(&scaled, 5, 4).unwrap());
        // the key row moves with the shift
        assert_eq!(s.select_token(&p, 1, 4).unwrap(), s.select_token(&p, 5, 0).unwrap());
    }

    #[test]
    fn kth_detection_bounds_and_separation() {
        let s = KthScheme::new(9, 32, 1, 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rand_text = |rng: &mut ChaCha8Rng| (0..30).map(|_| rng.random_range(0..40)).collect::<Vec<TokenId>>();
        let refs: Vec<Vec<TokenId>> = (0..30).map(|_| rand_text(&mut rng)).collect();
        let p = vec![1.0 / 40.0; 40];
        let wm: Vec<TokenId> = (1..=30).map(|t| s.select_token(&p, t, 0).unwrap()).collect();
        let d = s.detect(&wm, &refs).unwrap();
        assert!((d.p_value - 1.0 / 31.0).abs() < 1e-12);
        for r in &refs {
            let q = s.detect(r, &refs).unwrap().p_value;
            assert!((1.0 / 31.0..=1.0).contains(&q));
        }
        assert!(s.detect(&wm, &refs[..10]).is_err());
    }

    #[test]
    fn key_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("key.json");
        let k = SchemeKey::Kgw { seed: 1, k: 1, gamma: 0.25, delta: 2.0 };
        k.save(&p).unwrap();
        assert_eq!(SchemeKey::load(&p).unwrap(), k);
        let raw = std::fs::read_to_string(&p).unwrap();
        assert!(raw.contains("\"scheme\": \"kgw\""));
    }
}
