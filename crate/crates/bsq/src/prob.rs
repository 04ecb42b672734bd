//! Next-symbol probability models for the arithmetic coder.
//!
//! The coder never sees floating point: every prediction is a [`FreqTable`]
//! of integer frequencies over a power-of-two scale, built by an exact
//! integer quantization. That is what makes encoder and decoder stay
//! synchronized across platforms — both sides run the same predict/update
//! sequence and get bit-identical tables at every step.
//!
//! Three model kinds are provided behind the [`Model`] trait: a static
//! uniform model, a per-bit-position Bernoulli model that exploits the
//! near-factorized structure of BSQ token bits, and an order-k token-level
//! context model. All adaptive counts use Laplace add-one smoothing so no
//! symbol ever has zero frequency.

use std::collections::HashMap;

use thiserror::Error;

/// Default frequency scale (2^14). Small enough to keep the coder's interval
/// arithmetic exact in 32-bit registers, large enough that quantization costs
/// well under a thousandth of a bit per symbol.
pub const DEFAULT_SCALE: u32 = 1 << 14;

/// Hard ceiling on the frequency scale; the coder's register math relies on
/// `scale <= 2^16`.
pub const MAX_SCALE: u32 = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum ProbError {
    #[error("symbol {symbol} out of range for alphabet of {k}")]
    SymbolOutOfRange { symbol: usize, k: usize },
    #[error("alphabet of {k} symbols exceeds the maximum scale {max}")]
    TooManySymbols { k: usize, max: u32 },
    #[error("unsupported model shape: {reason}")]
    BadShape { reason: String },
}

/// Integer frequency table over `K` symbols: `cumulative` has `K + 1` strictly
/// increasing entries from 0 to `scale`, so symbol `s` owns the slice
/// `[cumulative[s], cumulative[s+1])` and has frequency at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    cumulative: Vec<u32>,
    scale: u32,
}

impl FreqTable {
    /// Quantizes positive weights onto the scale. With prefix sums `P_i` over
    /// total `W`, `cumulative[i] = i + (scale - K) * P_i / W` in exact integer
    /// arithmetic — each symbol keeps its reserved unit of frequency and the
    /// remaining mass is split proportionally, so the table is strictly
    /// monotone and ends at `scale` by construction.
    pub fn from_weights(weights: &[u64], scale: u32) -> Result<Self, ProbError> {
        let k = weights.len();
        assert!(k >= 1, "need at least one symbol");
        assert!(scale.is_power_of_two() && scale <= MAX_SCALE, "scale must be a power of two <= 2^16");
        if (k as u64) > scale as u64 {
            return Err(ProbError::TooManySymbols { k, max: scale });
        }
        assert!(weights.iter().all(|&w| w >= 1), "weights must be positive");
        let total: u128 = weights.iter().map(|&w| w as u128).sum();
        let spare = (scale as u64 - k as u64) as u128;
        let mut cumulative = Vec::with_capacity(k + 1);
        let mut prefix: u128 = 0;
        cumulative.push(0);
        for (i, &w) in weights.iter().enumerate() {
            prefix += w as u128;
            cumulative.push((i as u64 + 1 + (spare * prefix / total) as u64) as u32);
        }
        debug_assert_eq!(*cumulative.last().unwrap(), scale);
        Ok(FreqTable { cumulative, scale })
    }

    pub fn uniform(k: usize, scale: u32) -> Result<Self, ProbError> {
        Self::from_weights(&vec![1u64; k], scale)
    }

    pub fn num_symbols(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    /// Half-open cumulative range `[low, high)` owned by `symbol`.
    pub fn range(&self, symbol: usize) -> (u32, u32) {
        (self.cumulative[symbol], self.cumulative[symbol + 1])
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.cumulative[symbol + 1] - self.cumulative[symbol]
    }

    /// Inverse lookup for the decoder: the unique symbol whose range contains
    /// `target`. `target` must be below `scale`.
    pub fn symbol_for(&self, target: u32) -> usize {
        assert!(target < self.scale, "target beyond table scale");
        // partition_point finds the first entry > target; its predecessor owns it.
        self.cumulative.partition_point(|&c| c <= target) - 1
    }
}

/// Smallest power-of-two scale that fits `k` symbols, never below the
/// default. Errors once `k` outgrows [`MAX_SCALE`].
pub fn scale_for(k: usize) -> Result<u32, ProbError> {
    if k == 0 || k as u64 > MAX_SCALE as u64 {
        return Err(ProbError::TooManySymbols { k, max: MAX_SCALE });
    }
    Ok(DEFAULT_SCALE.max((k as u32).next_power_of_two()))
}

/// A sequential probability model. The coder drives it in strict
/// predict-then-update lockstep, and the decoder replays the identical
/// sequence, so `predict` must be a pure function of the update history.
pub trait Model {
    fn num_symbols(&self) -> usize;
    fn predict(&self) -> FreqTable;
    fn update(&mut self, symbol: usize) -> Result<(), ProbError>;
}

/// Fixed uniform model; `update` is a no-op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniformModel {
    k: usize,
    scale: u32,
}

impl UniformModel {
    pub fn new(k: usize) -> Result<Self, ProbError> {
        Ok(UniformModel { k, scale: scale_for(k)? })
    }
}

impl Model for UniformModel {
    fn num_symbols(&self) -> usize {
        self.k
    }

    fn predict(&self) -> FreqTable {
        FreqTable::uniform(self.k, self.scale).expect("scale_for sized the scale")
    }

    fn update(&mut self, symbol: usize) -> Result<(), ProbError> {
        if symbol >= self.k {
            return Err(ProbError::SymbolOutOfRange { symbol, k: self.k });
        }
        Ok(())
    }
}

/// Bit-level Bernoulli model with one adaptive counter pair per bit position.
/// Symbols are single bits; the position cycles 0, 1, ..., `positions - 1`
/// and wraps, matching a stream of tokens decomposed into a fixed number of
/// bits each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptiveBitModel {
    counts: Vec<[u64; 2]>,
    pos: usize,
}

impl AdaptiveBitModel {
    pub fn new(positions: usize) -> Result<Self, ProbError> {
        if positions == 0 {
            return Err(ProbError::BadShape { reason: "need at least one bit position".into() });
        }
        Ok(AdaptiveBitModel { counts: vec![[0, 0]; positions], pos: 0 })
    }

    pub fn positions(&self) -> usize {
        self.counts.len()
    }
}

impl Model for AdaptiveBitModel {
    fn num_symbols(&self) -> usize {
        2
    }

    fn predict(&self) -> FreqTable {
        let [zeros, ones] = self.counts[self.pos];
        FreqTable::from_weights(&[zeros + 1, ones + 1], DEFAULT_SCALE)
            .expect("two symbols always fit")
    }

    fn update(&mut self, symbol: usize) -> Result<(), ProbError> {
        if symbol >= 2 {
            return Err(ProbError::SymbolOutOfRange { symbol, k: 2 });
        }
        self.counts[self.pos][symbol] += 1;
        self.pos = (self.pos + 1) % self.counts.len();
        Ok(())
    }
}

/// Order-`k` token-level context model: one adaptive count table per distinct
/// window of the `k` most recent symbols, Laplace-smoothed. History starts
/// zero-padded, so the first predictions condition on an all-zeros window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextModel {
    k: usize,
    order: usize,
    scale: u32,
    history: Vec<usize>,
    counts: HashMap<u64, Vec<u64>>,
}

/// Longest supported context window; windows pack 16 bits per symbol into a
/// 64-bit key.
pub const MAX_CONTEXT_ORDER: usize = 4;

impl ContextModel {
    pub fn new(k: usize, order: usize) -> Result<Self, ProbError> {
        let scale = scale_for(k)?;
        if order == 0 || order > MAX_CONTEXT_ORDER {
            return Err(ProbError::BadShape {
                reason: format!("context order {order} outside 1..={MAX_CONTEXT_ORDER}"),
            });
        }
        Ok(ContextModel { k, order, scale, history: vec![0; order], counts: HashMap::new() })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn context_key(&self) -> u64 {
        self.history.iter().fold(0u64, |key, &sym| (key << 16) | sym as u64)
    }
}

impl Model for ContextModel {
    fn num_symbols(&self) -> usize {
        self.k
    }

    fn predict(&self) -> FreqTable {
        let key = self.context_key();
        let table = match self.counts.get(&key) {
            Some(counts) => {
                let weights: Vec<u64> = counts.iter().map(|&c| c + 1).collect();
                FreqTable::from_weights(&weights, self.scale)
            }
            None => FreqTable::uniform(self.k, self.scale),
        };
        table.expect("scale_for sized the scale")
    }

    fn update(&mut self, symbol: usize) -> Result<(), ProbError> {
        if symbol >= self.k {
            return Err(ProbError::SymbolOutOfRange { symbol, k: self.k });
        }
        let key = self.context_key();
        let counts = self.counts.entry(key).or_insert_with(|| vec![0; self.k]);
        counts[symbol] += 1;
        self.history.rotate_left(1);
        *self.history.last_mut().unwrap() = symbol;
        Ok(())
    }
}

/// Ideal code length in bits for `symbols` under the model's own quantized
/// probabilities: the sum of `-log2(freq/scale)` along a fresh replay. The
/// arithmetic coder's measured output exceeds this by at most its fixed
/// register slack.
pub fn stream_bits_lower_bound<M: Model>(
    model: &mut M,
    symbols: &[usize],
) -> Result<f64, ProbError> {
    let mut bits = 0.0f64;
    for &sym in symbols {
        let table = model.predict();
        if sym >= table.num_symbols() {
            return Err(ProbError::SymbolOutOfRange { symbol: sym, k: table.num_symbols() });
        }
        bits -= (table.freq(sym) as f64 / table.scale() as f64).log2();
        model.update(sym)?;
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_valid(table: &FreqTable) {
        let k = table.num_symbols();
        assert_eq!(table.range(0).0, 0);
        assert_eq!(table.range(k - 1).1, table.scale());
        for s in 0..k {
            assert!(table.freq(s) >= 1, "symbol {s} starved");
        }
    }

    #[test]
    fn uniform_table_splits_exactly_when_k_divides_scale() {
        let table = FreqTable::uniform(4, DEFAULT_SCALE).unwrap();
        for s in 0..4 {
            assert_eq!(table.freq(s), DEFAULT_SCALE / 4);
        }
        assert_valid(&table);
    }

    #[test]
    fn skewed_weights_never_starve_a_symbol() {
        let table = FreqTable::from_weights(&[1, 1_000_000_000_000, 1], DEFAULT_SCALE).unwrap();
        assert_valid(&table);
        assert!(table.freq(1) > DEFAULT_SCALE - 16);
    }

    #[test]
    fn full_alphabet_at_max_scale_gets_frequency_one_each() {
        let table = FreqTable::uniform(MAX_SCALE as usize, MAX_SCALE).unwrap();
        assert_eq!(table.freq(0), 1);
        assert_eq!(table.freq(MAX_SCALE as usize - 1), 1);
    }

    #[test]
    fn oversized_alphabet_is_rejected() {
        assert!(matches!(
            FreqTable::uniform(MAX_SCALE as usize + 1, MAX_SCALE),
            Err(ProbError::TooManySymbols { .. })
        ));
        assert!(matches!(scale_for(MAX_SCALE as usize + 1), Err(ProbError::TooManySymbols { .. })));
    }

    #[test]
    fn scale_for_prefers_the_default_until_it_must_grow() {
        assert_eq!(scale_for(2).unwrap(), DEFAULT_SCALE);
        assert_eq!(scale_for(16384).unwrap(), DEFAULT_SCALE);
        assert_eq!(scale_for(16385).unwrap(), 1 << 15);
        assert_eq!(scale_for(1 << 16).unwrap(), 1 << 16);
    }

    #[test]
    fn symbol_lookup_inverts_the_ranges_exhaustively() {
        let table = FreqTable::from_weights(&[3, 1, 7, 2], 16).unwrap();
        for target in 0..table.scale() {
            let sym = table.symbol_for(target);
            let (low, high) = table.range(sym);
            assert!(low <= target && target < high);
        }
    }

    #[test]
    fn laplace_counts_give_the_expected_bernoulli_split() {
        let mut model = AdaptiveBitModel::new(1).unwrap();
        for _ in 0..10 {
            model.update(1).unwrap();
        }
        let table = model.predict();
        // Counts (0, 10) plus add-one smoothing quantize 11/12 onto the scale.
        let p_one = table.freq(1) as f64 / table.scale() as f64;
        assert!((p_one - 11.0 / 12.0).abs() <= 4.0 / table.scale() as f64, "p_one = {p_one}");
        assert_eq!(table.freq(1), 15018);
    }

    #[test]
    fn bit_positions_adapt_independently() {
        let mut model = AdaptiveBitModel::new(2).unwrap();
        // Feed tokens whose low bit is always 1 and high bit always 0.
        for _ in 0..50 {
            model.update(1).unwrap();
            model.update(0).unwrap();
        }
        let low_bit = model.predict();
        assert!(low_bit.freq(1) > low_bit.freq(0) * 20);
        model.update(1).unwrap();
        let high_bit = model.predict();
        assert!(high_bit.freq(0) > high_bit.freq(1) * 20);
    }

    #[test]
    fn uniform_update_is_a_no_op() {
        let mut model = UniformModel::new(7).unwrap();
        let before = model.predict();
        model.update(3).unwrap();
        assert_eq!(model.predict(), before);
        assert_eq!(model.update(7), Err(ProbError::SymbolOutOfRange { symbol: 7, k: 7 }));
    }

    #[test]
    fn context_model_learns_an_alternating_stream() {
        let mut model = ContextModel::new(2, 1).unwrap();
        let mut last_p = 0.0;
        for step in 0..30 {
            model.update(0).unwrap();
            // After seeing "0", predict the next symbol.
            let table = model.predict();
            let p_one = table.freq(1) as f64 / table.scale() as f64;
            if step > 0 {
                assert!(p_one >= last_p - 1e-9, "P(1|0) regressed at step {step}");
            }
            last_p = p_one;
            model.update(1).unwrap();
        }
        assert!(last_p > 0.9, "P(1|0) only reached {last_p}");
    }

    #[test]
    fn context_model_distinguishes_contexts() {
        let mut model = ContextModel::new(3, 1).unwrap();
        // After 0 always comes 1; after 1 always comes 2; after 2 always 0.
        let stream = [0usize, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2];
        for &s in &stream {
            model.update(s).unwrap();
        }
        // History now ends in 2; the favored successor is 0.
        let table = model.predict();
        assert!(table.freq(0) > table.freq(1) + table.freq(2));
    }

    #[test]
    fn context_model_rejects_bad_shapes() {
        assert!(matches!(ContextModel::new(2, 0), Err(ProbError::BadShape { .. })));
        assert!(matches!(
            ContextModel::new(2, MAX_CONTEXT_ORDER + 1),
            Err(ProbError::BadShape { .. })
        ));
    }

    #[test]
    fn replayed_streams_produce_identical_tables_each_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stream: Vec<usize> = (0..400).map(|_| rng.gen_range(0..4)).collect();
        let mut a = ContextModel::new(4, 2).unwrap();
        let mut b = ContextModel::new(4, 2).unwrap();
        for &sym in &stream {
            assert_eq!(a.predict(), b.predict());
            a.update(sym).unwrap();
            b.update(sym).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_two_symbol_stream_costs_exactly_one_bit_each() {
        let mut model = UniformModel::new(2).unwrap();
        let bits = stream_bits_lower_bound(&mut model, &[0, 1, 1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(bits, 8.0);
    }

    #[test]
    fn near_deterministic_model_approaches_the_formula_cost() {
        // A fixed table putting nearly all mass on symbol 0 costs
        // log2(scale/freq(0)) per true symbol. The quantizer's forced
        // endpoint leaves freq(0) at scale-K for arbitrarily skewed weights
        // (the spare unit lands on the last symbol).
        struct Fixed(FreqTable);
        impl Model for Fixed {
            fn num_symbols(&self) -> usize {
                self.0.num_symbols()
            }
            fn predict(&self) -> FreqTable {
                self.0.clone()
            }
            fn update(&mut self, _symbol: usize) -> Result<(), ProbError> {
                Ok(())
            }
        }
        let k = 4u32;
        let scale = DEFAULT_SCALE;
        let table =
            FreqTable::from_weights(&[u64::from(scale) * 1000, 1, 1, 1], scale).unwrap();
        assert_eq!(table.freq(0), scale - k);
        let n = 100;
        let mut model = Fixed(table);
        let bits = stream_bits_lower_bound(&mut model, &vec![0usize; n]).unwrap();
        let expected = n as f64 * (scale as f64 / (scale - k) as f64).log2();
        assert!((bits - expected).abs() <= 1e-9, "bits {bits} vs {expected}");
    }

    #[test]
    fn lower_bound_rejects_out_of_range_symbols() {
        let mut model = UniformModel::new(2).unwrap();
        assert!(stream_bits_lower_bound(&mut model, &[0, 5]).is_err());
    }

    proptest! {
        #[test]
        fn quantized_tables_are_always_valid(
            weights in prop::collection::vec(1u64..1_000_000, 1..64),
        ) {
            let scale = scale_for(weights.len()).unwrap();
            let table = FreqTable::from_weights(&weights, scale).unwrap();
            assert_valid(&table);
            // Quantization error per symbol is bounded by K/scale.
            let total: u64 = weights.iter().sum();
            let k = weights.len() as f64;
            for (s, &w) in weights.iter().enumerate() {
                let p_true = w as f64 / total as f64;
                let p_quant = table.freq(s) as f64 / table.scale() as f64;
                prop_assert!((p_true - p_quant).abs() <= (k + 2.0) / table.scale() as f64);
            }
        }

        #[test]
        fn symbol_lookup_matches_linear_scan(
            weights in prop::collection::vec(1u64..50, 2..10),
            target_frac in 0.0f64..1.0,
        ) {
            let table = FreqTable::from_weights(&weights, 1 << 14).unwrap();
            let target = ((table.scale() - 1) as f64 * target_frac) as u32;
            let sym = table.symbol_for(target);
            let (low, high) = table.range(sym);
            prop_assert!(low <= target && target < high);
        }
    }
}
