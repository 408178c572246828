//! Small shared helpers for the training pipelines.

use std::io::Write;

/// Collects training-progress lines and optionally echoes them to stderr.
/// The collected lines become the `.log` file written next to a model.
#[derive(Debug, Default)]
pub struct TrainLog {
    lines: Vec<String>,
    pub echo: bool,
}

impl TrainLog {
    pub fn new(echo: bool) -> Self {
        TrainLog {
            lines: Vec::new(),
            echo,
        }
    }

    pub fn log(&mut self, line: impl Into<String>) {
        let line = line.into();
        if self.echo {
            let _ = writeln!(std::io::stderr(), "{line}");
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn to_text(&self) -> String {
        let mut s = self.lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }
}

/// Independent per-stage RNG streams from one base seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    // SplitMix64 step over base xor salt.
    let mut z = base ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
