//! Laplace mechanism and sequential-composition accounting.
//!
//! Draws are seeded for reproducibility. A seeded run is a research artifact,
//! not a deployable privacy release: anyone holding the seed can strip the noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LEDGER_SLACK: f64 = 1e-12;

/// Inverse-CDF draw from Laplace(0, `scale`).
pub fn laplace_draw<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    debug_assert!(scale > 0.0);
    // u in (-1/2, 1/2); the endpoint -1/2 would give ln(0).
    let mut u: f64 = rng.random::<f64>() - 0.5;
    while u == -0.5 {
        u = rng.random::<f64>() - 0.5;
    }
    -u.signum() * scale * (1.0 - 2.0 * u.abs()).ln()
}

/// Laplace scale `sensitivity / epsilon`.
pub fn laplace_scale(sensitivity: f64, epsilon: f64) -> f64 {
    sensitivity / epsilon
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub amount: f64,
}

/// Running record of privacy spends under pure-epsilon composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    total: f64,
    entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn new(total: f64) -> Result<Self> {
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidParameter(format!("ledger total must be positive, got {total}")));
        }
        Ok(Self { total, entries: Vec::new() })
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn spent(&self) -> f64 {
        self.entries.iter().map(|e| e.amount).sum()
    }

    pub fn remaining(&self) -> f64 {
        self.total - self.spent()
    }

    pub fn spend(&mut self, label: impl Into<String>, amount: f64) -> Result<()> {
        let label = label.into();
        if !(amount > 0.0 && amount.is_finite()) {
            return Err(Error::InvalidParameter(format!("spend on '{label}' must be positive, got {amount}")));
        }
        let remaining = self.remaining();
        if self.spent() + amount > self.total + LEDGER_SLACK {
            return Err(Error::BudgetExceeded { label, requested: amount, remaining });
        }
        self.entries.push(LedgerEntry { label, amount });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn laplace_moments() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut draws: Vec<f64> = (0..100_000).map(|_| laplace_draw(1.0, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var - 2.0).abs() < 0.06, "variance {var}");
        draws.sort_by(f64::total_cmp);
        assert!(draws[50_000].abs() < 0.01, "median {}", draws[50_000]);
    }

    #[test]
    fn laplace_is_deterministic_under_seed() {
        let a: Vec<f64> = {
            let mut rng = ChaCha20Rng::seed_from_u64(7);
            (0..10).map(|_| laplace_draw(0.5, &mut rng)).collect()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let b: Vec<f64> = (0..10).map(|_| laplace_draw(0.5, &mut rng)).collect();
        assert_eq!(a, b);
        assert_eq!(laplace_scale(1.0, 2.0), 0.5);
    }

    #[test]
    fn ledger_enforces_total() {
        let mut ledger = BudgetLedger::new(1.0).unwrap();
        assert_eq!(ledger.spent(), 0.0);
        ledger.spend("a", 0.5).unwrap();
        ledger.spend("b", 0.5).unwrap();
        assert!(matches!(ledger.spend("c", 0.01), Err(Error::BudgetExceeded { .. })));
        assert_eq!(ledger.entries().len(), 2);
        assert!(ledger.spend("d", 0.0).is_err());
    }
}
