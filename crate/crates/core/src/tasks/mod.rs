//! Synthetic datasets with difficulty knobs: prefix-sum parity over bit
//! strings (difficulty = length) and matrix inversion (difficulty =
//! condition number).

mod dump;
mod inversion;
mod prefix_sum;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dump::{decode_dataset, decode_header, encode_dataset, read_dataset, write_dataset, Dataset, DumpHeader};
pub use inversion::{gen_inversion, inversion_error, log_spaced_singular_values, per_example_mse, InversionBatch};
pub use prefix_sum::{
    bit_accuracy, gen_prefix_sum, predictions, prefix_parity, prefix_sum_loss, prefix_sum_loss_value,
    string_accuracy, strings_correct, PrefixSumBatch,
};

use crate::error::Error;

/// Validation lengths for prefix sum.
pub const PREFIX_EVAL_LENGTHS: [usize; 5] = [16, 32, 64, 128, 256];
/// Examples per prefix-sum validation split.
pub const PREFIX_EVAL_COUNT: usize = 300;
/// Condition-number range of the inversion training distribution.
pub const INVERSION_TRAIN_KAPPA: (f64, f64) = (1.0, 10.0);
/// Harder inversion split.
pub const INVERSION_OOD_KAPPA: (f64, f64) = (10.0, 30.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PrefixSum,
    MatrixInversion,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::PrefixSum => "prefix_sum",
            Task::MatrixInversion => "matrix_inversion",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "prefix_sum" => Ok(Task::PrefixSum),
            "matrix_inversion" => Ok(Task::MatrixInversion),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}
