//! Request generation: Poisson arrivals with pattern-determined lengths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::kv::RequestId;
use crate::units::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    PrefillHeavy,
    DecodeHeavy,
}

impl Pattern {
    pub fn other(self) -> Pattern {
        match self {
            Pattern::PrefillHeavy => Pattern::DecodeHeavy,
            Pattern::DecodeHeavy => Pattern::PrefillHeavy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lengths {
    pub input: u32,
    pub output: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    /// Pattern in effect from t=0.
    pub first: Pattern,
    /// Arrival times at which the pattern flips.
    pub shift_at: Vec<SimTime>,
    /// Requests per second.
    pub rate: f64,
    pub count: usize,
    /// Uniform ±25% length jitter instead of fixed lengths.
    pub jitter: bool,
    pub prefill_heavy: Lengths,
    pub decode_heavy: Lengths,
}

impl WorkloadSpec {
    pub fn fixed(pattern: Pattern, rate: f64, count: usize) -> Self {
        WorkloadSpec {
            first: pattern,
            shift_at: Vec::new(),
            rate,
            count,
            jitter: false,
            prefill_heavy: Lengths { input: 512, output: 16 },
            decode_heavy: Lengths { input: 128, output: 512 },
        }
    }

    pub fn pattern_at(&self, t: SimTime) -> Pattern {
        let flips = self.shift_at.iter().filter(|&&s| s <= t).count();
        if flips % 2 == 0 {
            self.first
        } else {
            self.first.other()
        }
    }

    pub fn lengths(&self, p: Pattern) -> Lengths {
        match p {
            Pattern::PrefillHeavy => self.prefill_heavy,
            Pattern::DecodeHeavy => self.decode_heavy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: RequestId,
    pub arrival: SimTime,
    pub input_len: u32,
    pub output_len: u32,
    pub pattern: Pattern,
}

fn jittered(rng: &mut ChaCha8Rng, mean: u32) -> u32 {
    let f: f64 = rng.random_range(0.75..=1.25);
    ((mean as f64 * f).round() as u32).max(1)
}

pub fn generate_workload(spec: &WorkloadSpec, seed: u64) -> Vec<Request> {
    assert!(spec.rate > 0.0, "arrival rate must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(spec.rate).expect("positive rate");
    let mut t = 0.0f64;
    (0..spec.count)
        .map(|i| {
            if i > 0 {
                t += gap.sample(&mut rng);
            }
            let arrival = SimTime::from_secs_f64(t);
            let pattern = spec.pattern_at(arrival);
            let l = spec.lengths(pattern);
            let (input_len, output_len) = if spec.jitter {
                (jittered(&mut rng, l.input), jittered(&mut rng, l.output))
            } else {
                (l.input, l.output)
            };
            Request {
                id: i as RequestId,
                arrival,
                input_len,
                output_len,
                pattern,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefill_heavy_counts_and_means() {
        let w = generate_workload(&WorkloadSpec::fixed(Pattern::PrefillHeavy, 4.0, 200), 1);
        assert_eq!(w.len(), 200);
        assert!(w.iter().all(|r| r.input_len == 512 && r.output_len == 16));
        assert!(w.windows(2).all(|p| p[0].arrival <= p[1].arrival));
    }

    #[test]
    fn jitter_stays_in_band() {
        let mut spec = WorkloadSpec::fixed(Pattern::DecodeHeavy, 4.0, 500);
        spec.jitter = true;
        let w = generate_workload(&spec, 3);
        assert!(w.iter().all(|r| (96..=160).contains(&r.input_len) && (384..=640).contains(&r.output_len)));
        let mean = w.iter().map(|r| r.input_len as f64).sum::<f64>() / 500.0;
        assert!((mean - 128.0).abs() < 5.0);
    }

    #[test]
    fn huge_rate_is_a_burst() {
        let w = generate_workload(&WorkloadSpec::fixed(Pattern::PrefillHeavy, 1e12, 50), 9);
        assert!(w.last().unwrap().arrival < SimTime::from_micros(1));
    }

    #[test]
    fn same_seed_same_requests() {
        let spec = WorkloadSpec::fixed(Pattern::PrefillHeavy, 2.0, 30);
        assert_eq!(generate_workload(&spec, 5), generate_workload(&spec, 5));
        assert_ne!(generate_workload(&spec, 5), generate_workload(&spec, 6));
    }

    #[test]
    fn shift_schedule_alternates() {
        let mut spec = WorkloadSpec::fixed(Pattern::PrefillHeavy, 10.0, 400);
        spec.shift_at = vec![SimTime::from_millis(10_000), SimTime::from_millis(20_000)];
        let w = generate_workload(&spec, 2);
        for r in &w {
            let expected = if r.arrival < SimTime::from_millis(10_000) || r.arrival >= SimTime::from_millis(20_000) {
                Pattern::PrefillHeavy
            } else {
                Pattern::DecodeHeavy
            };
            assert_eq!(r.pattern, expected);
        }
    }
}
