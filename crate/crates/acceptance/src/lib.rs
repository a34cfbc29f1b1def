//! Bookkeeping for the acceptance suite in `tests/acceptance.rs`.

use std::fmt::Display;

/// Collects one verdict per criterion and prints each as it arrives.
#[derive(Debug, Default)]
pub struct Ledger {
    verdicts: Vec<(String, bool)>,
}

impl Ledger {
    pub fn record(&mut self, criterion: &str, ok: bool, detail: impl Display) {
        println!("{} {criterion}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.verdicts.push((criterion.to_owned(), ok));
    }

    pub fn failures(&self) -> Vec<&str> {
        self.verdicts.iter().filter(|v| !v.1).map(|v| v.0.as_str()).collect()
    }

    pub fn summary(&self) -> String {
        let passed = self.verdicts.iter().filter(|v| v.1).count();
        format!("{passed}/{} criteria passed", self.verdicts.len())
    }
}
