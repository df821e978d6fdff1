//! Batch latency model for prefill and decode steps, plus its least-squares fit.
//!
//! Prefill of a batch with prompt lengths `l_i` costs
//! `a + b * sum(l_i) + c * sum(l_i^2)`; one decode iteration over a batch of
//! `B` requests with current lengths `l_i` costs `a' + b' * sum(l_i) + c' * B`.
//! The same model doubles as the simulator's execution oracle and the
//! scheduler's predictor.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Phase, Result};
use crate::linalg::least_squares;
use crate::scalar::Scalar;

/// Batch sizes used when profiling a deployment.
pub const PROFILE_BATCH_SIZES: [usize; 11] = [1, 2, 4, 8, 16, 32, 64, 96, 128, 160, 192];

/// Prompt lengths used when profiling a deployment.
pub const PROFILE_INPUT_LENGTHS: [u32; 16] = [
    4, 8, 16, 32, 48, 64, 96, 128, 192, 256, 284, 512, 768, 1024, 1536, 2020,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel<T> {
    /// Fixed prefill overhead, seconds.
    pub a: T,
    /// Prefill seconds per prompt token.
    pub b: T,
    /// Prefill seconds per squared prompt token.
    pub c: T,
    /// Fixed decode-iteration overhead, seconds.
    pub a_prime: T,
    /// Decode seconds per resident token.
    pub b_prime: T,
    /// Decode seconds per batched request.
    pub c_prime: T,
}

impl<T: Scalar> LatencyModel<T> {
    pub fn new(a: T, b: T, c: T, a_prime: T, b_prime: T, c_prime: T) -> Result<Self> {
        let model = Self {
            a,
            b,
            c,
            a_prime,
            b_prime,
            c_prime,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn coefficients(&self) -> [T; 6] {
        [
            self.a,
            self.b,
            self.c,
            self.a_prime,
            self.b_prime,
            self.c_prime,
        ]
    }

    /// Checks that every coefficient is finite and nonnegative.
    pub fn validate(&self) -> Result<()> {
        const NAMES: [&str; 6] = ["a", "b", "c", "a_prime", "b_prime", "c_prime"];
        for (name, v) in NAMES.iter().zip(self.coefficients()) {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::InvalidArgument(format!(
                    "latency coefficient {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Prefill latency for a batch given `sum(l)` and `sum(l^2)`.
    pub fn prefill_from_sums(&self, sum: u64, sum_sq: u64) -> T {
        self.a + self.b * T::from_count(sum) + self.c * T::from_count(sum_sq)
    }

    /// Decode-iteration latency given `sum(l_cur)` and the batch size.
    pub fn decode_from_sums(&self, sum: u64, batch: usize) -> T {
        self.a_prime
            + self.b_prime * T::from_count(sum)
            + self.c_prime * T::from_count(batch as u64)
    }

    pub fn predict_prefill(&self, input_lengths: &[u32]) -> Result<T> {
        if input_lengths.is_empty() {
            return Err(Error::InvalidArgument("prefill batch is empty".into()));
        }
        if input_lengths.contains(&0) {
            return Err(Error::InvalidArgument("prompt lengths must be >= 1".into()));
        }
        let (sum, sum_sq) = input_lengths.iter().fold((0u64, 0u64), |(s, q), &l| {
            let l = u64::from(l);
            (s + l, q + l * l)
        });
        Ok(self.prefill_from_sums(sum, sum_sq))
    }

    pub fn predict_decode_step(&self, current_lengths: &[u32]) -> Result<T> {
        if current_lengths.is_empty() {
            return Err(Error::InvalidArgument("decode batch is empty".into()));
        }
        let sum = current_lengths.iter().map(|&l| u64::from(l)).sum();
        Ok(self.decode_from_sums(sum, current_lengths.len()))
    }

    /// Fits all six coefficients, discarding diagnostics.
    pub fn fit(samples: &[ProfileSample<T>]) -> Result<Self> {
        Ok(Self::fit_report(samples)?.model)
    }

    /// Fits prefill and decode coefficients independently from the same
    /// records, minimizing the summed squared relative error of each phase.
    pub fn fit_report(samples: &[ProfileSample<T>]) -> Result<FitReport<T>> {
        for s in samples {
            s.validate()?;
        }

        let prefill_rows: Vec<[T; 3]> = samples
            .iter()
            .map(|s| {
                let (sum, sum_sq) = s.sums();
                let w = T::one() / s.prefill_time;
                [w, T::from_count(sum) * w, T::from_count(sum_sq) * w]
            })
            .collect();
        let decode_rows: Vec<[T; 3]> = samples
            .iter()
            .map(|s| {
                let (sum, _) = s.sums();
                let w = T::one() / s.decode_step_time;
                [
                    w,
                    T::from_count(sum) * w,
                    T::from_count(s.batch_size as u64) * w,
                ]
            })
            .collect();
        let ones = vec![T::one(); samples.len()];

        let underdetermined = |phase: Phase, column: usize| Error::FitUnderdetermined {
            phase,
            detail: format!(
                "{} sample(s) do not determine 3 coefficients (rank lost at column {column})",
                samples.len()
            ),
        };
        let p = least_squares(&prefill_rows, &ones)
            .map_err(|e| underdetermined(Phase::Prefill, e.column))?;
        let d = least_squares(&decode_rows, &ones)
            .map_err(|e| underdetermined(Phase::Decode, e.column))?;

        let mut raw = [p[0], p[1], p[2], d[0], d[1], d[2]];
        let mut warnings = Vec::new();
        const NAMES: [&str; 6] = ["a", "b", "c", "a_prime", "b_prime", "c_prime"];
        for (name, v) in NAMES.iter().zip(raw.iter_mut()) {
            if *v < T::zero() {
                warnings.push(format!(
                    "coefficient {name} fitted negative ({v}); clamped to 0"
                ));
                *v = T::zero();
            }
        }
        let model = Self {
            a: raw[0],
            b: raw[1],
            c: raw[2],
            a_prime: raw[3],
            b_prime: raw[4],
            c_prime: raw[5],
        };

        let mut max_prefill = T::zero();
        let mut max_decode = T::zero();
        for s in samples {
            let (sum, sum_sq) = s.sums();
            let rp =
                ((model.prefill_from_sums(sum, sum_sq) - s.prefill_time) / s.prefill_time).abs();
            let rd = ((model.decode_from_sums(sum, s.batch_size) - s.decode_step_time)
                / s.decode_step_time)
                .abs();
            max_prefill = max_prefill.max(rp);
            max_decode = max_decode.max(rd);
        }

        Ok(FitReport {
            model,
            samples: samples.len(),
            max_rel_residual_prefill: max_prefill,
            max_rel_residual_decode: max_decode,
            warnings,
        })
    }

    pub fn cast<U: Scalar>(&self) -> LatencyModel<U> {
        let c = |v: T| U::from(v).expect("coefficient representable in target scalar");
        LatencyModel {
            a: c(self.a),
            b: c(self.b),
            c: c(self.c),
            a_prime: c(self.a_prime),
            b_prime: c(self.b_prime),
            c_prime: c(self.c_prime),
        }
    }
}

impl LatencyModel<f64> {
    /// Built-in coefficient sets keyed by model size (`7B`, `32B`, `70B`).
    ///
    /// These are synthetic, hand-picked to land in a plausible range for a
    /// single accelerator instance; fit real coefficients with `fit`.
    pub fn profile(name: &str) -> Result<Self> {
        let m = match name.to_ascii_uppercase().as_str() {
            "7B" => Self {
                a: 0.015,
                b: 1.2e-4,
                c: 2e-9,
                a_prime: 0.012,
                b_prime: 1.5e-6,
                c_prime: 4e-4,
            },
            "32B" => Self {
                a: 0.03,
                b: 3e-4,
                c: 5e-9,
                a_prime: 0.025,
                b_prime: 4e-6,
                c_prime: 8e-4,
            },
            "70B" => Self {
                a: 0.04,
                b: 2.5e-4,
                c: 5e-9,
                a_prime: 0.03,
                b_prime: 3e-6,
                c_prime: 1e-3,
            },
            _ => return Err(Error::UnknownModelProfile(name.to_string())),
        };
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

/// Outcome of a fit, with residual diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport<T> {
    pub model: LatencyModel<T>,
    pub samples: usize,
    pub max_rel_residual_prefill: T,
    pub max_rel_residual_decode: T,
    pub warnings: Vec<String>,
}

/// One profiled batch: prompt lengths with measured prefill and decode-step times.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSample<T> {
    pub batch_size: usize,
    pub input_lengths: Vec<u32>,
    pub prefill_time: T,
    pub decode_step_time: T,
}

impl<T: Scalar> ProfileSample<T> {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size != self.input_lengths.len() {
            return Err(Error::InvalidArgument(format!(
                "batch_size {} does not match {} input lengths",
                self.batch_size,
                self.input_lengths.len()
            )));
        }
        if self.input_lengths.contains(&0) {
            return Err(Error::InvalidArgument(
                "profile input lengths must be >= 1".into(),
            ));
        }
        if !(self.prefill_time > T::zero()) || !(self.decode_step_time > T::zero()) {
            return Err(Error::InvalidArgument("profile times must be > 0".into()));
        }
        Ok(())
    }

    fn sums(&self) -> (u64, u64) {
        self.input_lengths.iter().fold((0, 0), |(s, q), &l| {
            let l = u64::from(l);
            (s + l, q + l * l)
        })
    }
}

/// Cartesian product of profiled batch sizes and prompt lengths, batch-major.
pub fn profiling_grid() -> Vec<(usize, u32)> {
    PROFILE_BATCH_SIZES
        .iter()
        .flat_map(|&b| PROFILE_INPUT_LENGTHS.iter().map(move |&l| (b, l)))
        .collect()
}

/// Multiplicative Gaussian measurement noise for synthetic profiles.
#[derive(Debug, Clone, Copy)]
pub struct Noise {
    /// Relative standard deviation (0.01 = 1%).
    pub relative_std: f64,
    pub seed: u64,
}

/// Generates samples from `model` over `grid` using uniform batches, where the
/// decode step is measured on the freshly prefilled batch.
pub fn synthetic_samples<T: Scalar>(
    model: &LatencyModel<T>,
    grid: &[(usize, u32)],
    noise: Option<Noise>,
) -> Vec<ProfileSample<T>> {
    let mut rng = noise.map(|n| ChaCha8Rng::seed_from_u64(n.seed));
    let mut jitter = |v: T| -> T {
        match (&mut rng, noise) {
            (Some(rng), Some(n)) => {
                let z: f64 = StandardNormal.sample(rng);
                let f = (1.0 + n.relative_std * z).max(1e-3);
                v * T::lit(f)
            }
            _ => v,
        }
    };
    grid.iter()
        .map(|&(batch, len)| {
            let input_lengths = vec![len; batch];
            let prefill = model
                .predict_prefill(&input_lengths)
                .expect("non-empty batch");
            let decode = model
                .predict_decode_step(&input_lengths)
                .expect("non-empty batch");
            ProfileSample {
                batch_size: batch,
                input_lengths,
                prefill_time: jitter(prefill),
                decode_step_time: jitter(decode),
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    batch_size: usize,
    input_lengths: String,
    prefill_s: f64,
    decode_step_s: f64,
}

/// Reads profile samples from CSV (`batch_size,input_lengths,prefill_s,decode_step_s`,
/// lengths separated by `;`).
pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<ProfileSample<f64>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<SampleRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        let input_lengths = row
            .input_lengths
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed {
                line,
                detail: format!("input_lengths: {e}"),
            })?;
        let sample = ProfileSample {
            batch_size: row.batch_size,
            input_lengths,
            prefill_time: row.prefill_s,
            decode_step_time: row.decode_step_s,
        };
        sample.validate().map_err(|e| Error::Malformed {
            line,
            detail: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_samples_csv<W: Write>(writer: W, samples: &[ProfileSample<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in samples {
        let lengths: Vec<String> = s.input_lengths.iter().map(u32::to_string).collect();
        wtr.serialize(SampleRow {
            batch_size: s.batch_size,
            input_lengths: lengths.join(";"),
            prefill_s: s.prefill_time,
            decode_step_s: s.decode_step_time,
        })?;
    }
    wtr.flush()?;
    Ok(())
}
