//! Token and cost accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::provider::Price;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelUsage {
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Monetary estimate from the configured per-million prices.
    pub cost: f64,
}

/// Per-model token totals and monetary estimates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub per_model: BTreeMap<String, ModelUsage>,
}

impl CostLedger {
    pub fn record(&mut self, model: &str, tokens_in: u64, tokens_out: u64, price: &Price) {
        let entry = self.per_model.entry(model.to_string()).or_default();
        entry.tokens_in += tokens_in;
        entry.tokens_out += tokens_out;
        entry.cost += tokens_in as f64 * price.input_per_million / 1_000_000.0
            + tokens_out as f64 * price.output_per_million / 1_000_000.0;
    }

    /// Fold another ledger into this one; ledger(A then B) = ledger(A) + ledger(B).
    pub fn merge(&mut self, other: &CostLedger) {
        for (model, usage) in &other.per_model {
            let entry = self.per_model.entry(model.clone()).or_default();
            entry.tokens_in += usage.tokens_in;
            entry.tokens_out += usage.tokens_out;
            entry.cost += usage.cost;
        }
    }

    pub fn total_cost(&self) -> f64 {
        self.per_model.values().map(|u| u.cost).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.per_model.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_price_arithmetic() {
        let mut ledger = CostLedger::default();
        let price = Price {
            input_per_million: 2.5,
            output_per_million: 10.0,
        };
        ledger.record("m", 1000, 500, &price);
        assert!((ledger.total_cost() - 0.0075).abs() < 1e-12);
        assert_eq!(ledger.per_model["m"].tokens_in, 1000);
    }

    #[test]
    fn merge_is_additive() {
        let price = Price {
            input_per_million: 1.0,
            output_per_million: 2.0,
        };
        let mut a = CostLedger::default();
        a.record("m1", 10, 20, &price);
        let mut b = CostLedger::default();
        b.record("m1", 1, 2, &price);
        b.record("m2", 5, 5, &price);

        let mut sequential = CostLedger::default();
        sequential.record("m1", 10, 20, &price);
        sequential.record("m1", 1, 2, &price);
        sequential.record("m2", 5, 5, &price);

        let mut merged = a.clone();
        merged.merge(&b);
        assert_eq!(merged, sequential);
    }
}
