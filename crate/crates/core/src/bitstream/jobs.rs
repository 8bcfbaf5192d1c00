//! Independent coding jobs, the boundary an external coder engine plugs into.
//!
//! A job names a stream, carries its tables and contexts, and either
//! symbols to encode or bytes to decode. Results come back per job so one
//! bad job never aborts its siblings.

use serde::{Deserialize, Serialize};

use super::golden::TableSpec;
use super::range_coder::{decode_symbols, encode_symbols};
use super::CoderError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobPayload {
    Encode {
        symbols: Vec<i32>,
    },
    /// `count` symbols are expected back.
    Decode {
        bytes: Vec<u8>,
        count: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingJob {
    pub stream: String,
    pub tables: Vec<TableSpec>,
    /// One table index per symbol.
    pub contexts: Vec<usize>,
    pub payload: JobPayload,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JobOutput {
    Bytes(Vec<u8>),
    Symbols(Vec<i32>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JobResult {
    pub stream: String,
    pub output: Result<JobOutput, CoderError>,
}

pub fn run_job(job: &CodingJob) -> Result<JobOutput, CoderError> {
    let tables = job
        .tables
        .iter()
        .map(TableSpec::to_table)
        .collect::<Result<Vec<_>, _>>()?;
    match &job.payload {
        JobPayload::Encode { symbols } => {
            encode_symbols(symbols, &tables, &job.contexts).map(JobOutput::Bytes)
        }
        JobPayload::Decode { bytes, count } => {
            if *count != job.contexts.len() {
                return Err(CoderError::CountMismatch {
                    symbols: *count,
                    contexts: job.contexts.len(),
                });
            }
            decode_symbols(bytes, &tables, &job.contexts).map(JobOutput::Symbols)
        }
    }
}

/// Runs every job; results are in input order.
pub fn batch_code(jobs: &[CodingJob]) -> Vec<JobResult> {
    jobs.iter()
        .map(|j| JobResult {
            stream: j.stream.clone(),
            output: run_job(j),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream::golden::{random_stream, random_tables};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn jobs(n: usize) -> Vec<CodingJob> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|k| {
                let tables = random_tables(&mut rng, 3, 40);
                let s = random_stream(&mut rng, &tables, 200);
                CodingJob {
                    stream: format!("latent_y[{k}]"),
                    tables: tables.iter().map(TableSpec::from_table).collect(),
                    contexts: s.contexts,
                    payload: JobPayload::Encode { symbols: s.symbols },
                }
            })
            .collect()
    }

    #[test]
    fn batch_matches_single_calls_in_any_order() {
        let js = jobs(6);
        let batch = batch_code(&js);
        for (j, r) in js.iter().zip(&batch) {
            assert_eq!(r.output, run_job(j));
        }
        let mut rev = js.clone();
        rev.reverse();
        let mut back = batch_code(&rev);
        back.reverse();
        assert_eq!(back, batch);
    }

    #[test]
    fn poisoned_job_leaves_others_intact() {
        let mut js = jobs(3);
        js[1].contexts[0] = 99;
        let r = batch_code(&js);
        assert!(r[1].output.is_err());
        assert!(r[0].output.is_ok() && r[2].output.is_ok());
    }

    #[test]
    fn decode_jobs_invert_encode_jobs() {
        for j in jobs(2) {
            let JobOutput::Bytes(bytes) = run_job(&j).unwrap() else {
                panic!()
            };
            let JobPayload::Encode { symbols } = &j.payload else {
                panic!()
            };
            let d = CodingJob {
                payload: JobPayload::Decode {
                    bytes,
                    count: symbols.len(),
                },
                ..j.clone()
            };
            assert_eq!(run_job(&d).unwrap(), JobOutput::Symbols(symbols.clone()));
        }
    }
}
