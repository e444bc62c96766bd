#![allow(dead_code)]

pub mod checks;
pub mod gradients;

/// Outcome of one acceptance check.
#[derive(Debug)]
pub struct Check {
    pub ok: bool,
    pub detail: String,
}

impl Check {
    pub fn new(ok: bool, detail: impl Into<String>) -> Self {
        Check {
            ok,
            detail: detail.into(),
        }
    }

    pub fn all(parts: Vec<Check>) -> Check {
        let ok = parts.iter().all(|c| c.ok);
        let detail = parts
            .iter()
            .map(|c| format!("{}{}", if c.ok { "" } else { "FAIL " }, c.detail))
            .collect::<Vec<_>>()
            .join("; ");
        Check { ok, detail }
    }

    pub fn assert(self) {
        assert!(self.ok, "{}", self.detail);
        println!("{}", self.detail);
    }
}
