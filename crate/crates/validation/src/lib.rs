//! Pass/fail bookkeeping for the acceptance suite in `tests/acceptance.rs`.

/// Outcome of one criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: usize,
    pub name: String,
    pub pass: bool,
}

/// Collects criterion outcomes and prints one line per criterion.
#[derive(Debug, Default)]
pub struct Ledger {
    pub results: Vec<Outcome>,
}

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    pub fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        println!("{}", line(id, name, pass, &detail));
        self.results.push(Outcome { id, name: name.to_string(), pass });
    }

    /// `"<id> <name>"` for every failed criterion.
    pub fn failed(&self) -> Vec<String> {
        self.results.iter().filter(|r| !r.pass).map(|r| format!("{} {}", r.id, r.name)).collect()
    }
}

pub fn line(id: usize, name: &str, pass: bool, detail: &str) -> String {
    format!("[{}] criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" })
}
