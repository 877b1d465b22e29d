use serde::{Deserialize, Serialize};

use super::svd::thin_q;
use super::{Matrix, RandomSource};

fn unit_gain() -> f64 {
    1.0
}

/// Weight initialization schemes. `rows` plays fan-out (`d_out`) and `cols`
/// plays fan-in (`d_in`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    /// i.i.d. normal with std `gain · √(2 / cols)`.
    Kaiming {
        #[serde(default = "unit_gain")]
        gain: f64,
    },
    /// i.i.d. uniform in `± gain · √(6 / (rows + cols))`.
    Xavier {
        #[serde(default = "unit_gain")]
        gain: f64,
    },
    /// Semi-orthogonal matrix scaled by `gain · √(rows / cols)`.
    SemiOrthogonal {
        #[serde(default = "unit_gain")]
        gain: f64,
    },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::SemiOrthogonal { gain: 1.0 }
    }
}

impl InitScheme {
    pub fn kaiming() -> Self {
        InitScheme::Kaiming { gain: 1.0 }
    }

    pub fn xavier() -> Self {
        InitScheme::Xavier { gain: 1.0 }
    }

    pub fn semi_orthogonal() -> Self {
        InitScheme::SemiOrthogonal { gain: 1.0 }
    }

    pub fn gain(&self) -> f64 {
        match *self {
            InitScheme::Kaiming { gain }
            | InitScheme::Xavier { gain }
            | InitScheme::SemiOrthogonal { gain } => gain,
        }
    }

    pub fn with_gain(self, gain: f64) -> Self {
        match self {
            InitScheme::Kaiming { .. } => InitScheme::Kaiming { gain },
            InitScheme::Xavier { .. } => InitScheme::Xavier { gain },
            InitScheme::SemiOrthogonal { .. } => InitScheme::SemiOrthogonal { gain },
        }
    }
}

/// Draws a `rows x cols` matrix from `scheme`.
pub fn init_matrix(rows: usize, cols: usize, scheme: InitScheme, rng: &mut RandomSource) -> Matrix {
    match scheme {
        InitScheme::Kaiming { gain } => {
            let std = gain * (2.0 / cols as f64).sqrt();
            rng.normal_matrix(rows, cols).scale(std)
        }
        InitScheme::Xavier { gain } => {
            let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
            rng.uniform_matrix(rows, cols, -bound, bound)
        }
        InitScheme::SemiOrthogonal { gain } => {
            let scale = gain * (rows as f64 / cols as f64).sqrt();
            let q = if rows <= cols {
                thin_q(&rng.normal_matrix(cols, rows))
                    .expect("tall gaussian")
                    .transpose()
            } else {
                thin_q(&rng.normal_matrix(rows, cols)).expect("tall gaussian")
            };
            q.scale(scale)
        }
    }
}
