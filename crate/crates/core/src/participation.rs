//! Per-round participation indicators under Bernoulli, Markovian and cyclic patterns.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, SimRng, Stream};

/// Default 0 -> 1 transition probability of the Markovian pattern.
pub const DEFAULT_P01: f64 = 0.05;
/// Default cycle length of the cyclic pattern.
pub const DEFAULT_CYCLE: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Bernoulli,
    Markovian { p01: f64 },
    Cyclic { cycle: u64 },
}

impl Pattern {
    pub fn name(&self) -> &'static str {
        match self {
            Pattern::Bernoulli => "bernoulli",
            Pattern::Markovian { .. } => "markovian",
            Pattern::Cyclic { .. } => "cyclic",
        }
    }

    fn stream_key(&self) -> u64 {
        match self {
            Pattern::Bernoulli => 0,
            Pattern::Markovian { .. } => 1,
            Pattern::Cyclic { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Pattern::Bernoulli => Ok(()),
            Pattern::Markovian { p01 } if p01 > 0.0 && p01 <= 1.0 => Ok(()),
            Pattern::Markovian { p01 } => Err(Error::invalid(format!(
                "Markov transition probability must lie in (0, 1], got {p01}"
            ))),
            Pattern::Cyclic { cycle } if cycle >= 1 => Ok(()),
            Pattern::Cyclic { .. } => Err(Error::invalid("cycle length must be at least 1")),
        }
    }
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("participation frequency must lie in [0, 1], got {p}")))
    }
}

pub fn bernoulli_indicator<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    // random() is in [0, 1): p = 0 never fires, p = 1 always does
    rng.random::<f64>() < p
}

/// 1 -> 0 transition probability, `(1 - p) * p01`.
pub fn markov_p10(p: f64, p01: f64) -> f64 {
    (1.0 - p) * p01
}

/// Stationary participation probability of the two-state chain, `p01 / (p01 + p10)`.
pub fn markov_stationary(p: f64, p01: f64) -> f64 {
    p01 / (p01 + markov_p10(p, p01))
}

pub fn markov_indicator<R: Rng + ?Sized>(state: bool, p: f64, p01: f64, rng: &mut R) -> bool {
    let u = rng.random::<f64>();
    if state {
        u >= markov_p10(p, p01)
    } else {
        u < p01
    }
}

/// `(t - offset) mod cycle < p * cycle`, with the modulo normalized to `[0, cycle)`.
pub fn cyclic_indicator(p: f64, round: i64, cycle: u64, offset: u64) -> bool {
    let phase = (round - offset as i64).rem_euclid(cycle as i64);
    (phase as f64) < p * cycle as f64
}

/// Indicator generator for one node.
#[derive(Debug, Clone)]
pub struct ParticipationSchedule {
    pattern: Pattern,
    p: f64,
    offset: u64,
    state: bool,
    round: i64,
    rng: SimRng,
}

impl ParticipationSchedule {
    /// The node's stream is keyed by `(seed, node, pattern)`, so a node's
    /// schedule does not depend on how many other nodes exist.
    pub fn new(pattern: Pattern, p: f64, seed: u64, node: usize) -> Result<Self> {
        pattern.validate()?;
        check_probability(p)?;
        let mut rng = stream_rng(seed, Stream::Participation, node as u64, pattern.stream_key());
        let (offset, state) = match pattern {
            Pattern::Bernoulli => (0, false),
            Pattern::Markovian { p01 } => (0, bernoulli_indicator(markov_stationary(p, p01), &mut rng)),
            Pattern::Cyclic { cycle } => (rng.random_range(0..cycle), false),
        };
        Ok(Self {
            pattern,
            p,
            offset,
            state,
            round: 0,
            rng,
        })
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Indicator for the next round.
    pub fn next_indicator(&mut self) -> bool {
        let a = match self.pattern {
            Pattern::Bernoulli => bernoulli_indicator(self.p, &mut self.rng),
            Pattern::Markovian { p01 } => {
                // round 0 uses the stationary initial draw
                if self.round > 0 {
                    self.state = markov_indicator(self.state, self.p, p01, &mut self.rng);
                }
                self.state
            }
            Pattern::Cyclic { cycle } => cyclic_indicator(self.p, self.round, cycle, self.offset),
        };
        self.round += 1;
        a
    }

    pub fn trace(&mut self, rounds: usize) -> Vec<bool> {
        (0..rounds).map(|_| self.next_indicator()).collect()
    }
}

/// Participation matrix indexed `[round][node]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationTraces {
    pub rounds: Vec<Vec<bool>>,
}

impl ParticipationTraces {
    pub fn generate(pattern: Pattern, frequencies: &[f64], rounds: usize, seed: u64) -> Result<Self> {
        let per_node = frequencies
            .iter()
            .enumerate()
            .map(|(k, &p)| ParticipationSchedule::new(pattern, p, seed, k).map(|mut s| s.trace(rounds)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rounds: (0..rounds)
                .map(|t| per_node.iter().map(|trace| trace[t]).collect())
                .collect(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.rounds.first().map_or(0, Vec::len)
    }

    pub fn node_trace(&self, node: usize) -> Vec<bool> {
        self.rounds.iter().map(|r| r[node]).collect()
    }

    /// CSV with a `round` column followed by one 0/1 column per node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round".to_string()];
        header.extend((0..self.num_nodes()).map(|k| format!("node_{k}")));
        w.write_record(&header)?;
        for (t, row) in self.rounds.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|&a| if a { "1" } else { "0" }.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("participation csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn bernoulli_degenerate_cases() {
        let mut rng = rng_from_seed(0);
        assert!((0..1000).all(|_| !bernoulli_indicator(0.0, &mut rng)));
        assert!((0..1000).all(|_| bernoulli_indicator(1.0, &mut rng)));
    }

    #[test]
    fn markov_full_frequency_is_absorbing() {
        let mut rng = rng_from_seed(1);
        assert_eq!(markov_p10(1.0, 0.05), 0.0);
        let mut s = true;
        for _ in 0..10_000 {
            s = markov_indicator(s, 1.0, 0.05, &mut rng);
            assert!(s);
        }
    }

    #[test]
    fn markov_stationary_value() {
        assert!((markov_stationary(0.1, 0.05) - 0.05 / 0.095).abs() < 1e-15);
        for p in [0.02, 0.3, 0.9] {
            assert!((markov_stationary(p, 0.05) - 1.0 / (2.0 - p)).abs() < 1e-12);
        }
    }

    #[test]
    fn cyclic_enumeration() {
        let on: Vec<i64> = (0..300).filter(|&t| cyclic_indicator(0.1, t, 100, 0)).collect();
        let expected: Vec<i64> = (0..3).flat_map(|c| (0..10).map(move |j| c * 100 + j)).collect();
        assert_eq!(on, expected);
        assert!((0..300).all(|t| cyclic_indicator(1.0, t, 100, 0)));
        for t in 0..300 {
            assert_eq!(cyclic_indicator(0.1, t + 37, 100, 37), cyclic_indicator(0.1, t, 100, 0));
        }
        // negative phase wraps into [0, cycle)
        assert!(!cyclic_indicator(0.1, 0, 100, 37));
        assert!(cyclic_indicator(0.1, 40, 100, 37));
    }

    #[test]
    fn schedules_are_deterministic_and_node_keyed() {
        let freqs = [0.1, 0.4, 0.02];
        let a = ParticipationTraces::generate(Pattern::Markovian { p01: 0.05 }, &freqs, 200, 3).unwrap();
        let b = ParticipationTraces::generate(Pattern::Markovian { p01: 0.05 }, &freqs, 200, 3).unwrap();
        assert_eq!(a, b);
        let more = ParticipationTraces::generate(
            Pattern::Markovian { p01: 0.05 },
            &[0.1, 0.4, 0.02, 0.5],
            200,
            3,
        )
        .unwrap();
        for k in 0..3 {
            assert_eq!(a.node_trace(k), more.node_trace(k));
        }
    }

    #[test]
    fn cyclic_offset_in_range() {
        for k in 0..50 {
            let s = ParticipationSchedule::new(Pattern::Cyclic { cycle: 7 }, 0.5, 11, k).unwrap();
            assert!(s.offset() < 7);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ParticipationSchedule::new(Pattern::Bernoulli, 1.5, 0, 0).is_err());
        assert!(ParticipationSchedule::new(Pattern::Markovian { p01: 0.0 }, 0.5, 0, 0).is_err());
        assert!(ParticipationSchedule::new(Pattern::Cyclic { cycle: 0 }, 0.5, 0, 0).is_err());
    }

    #[test]
    fn csv_export_shape() {
        let t = ParticipationTraces::generate(Pattern::Cyclic { cycle: 4 }, &[0.5, 1.0], 3, 0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,node_0,node_1");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(",1"));
    }
}
