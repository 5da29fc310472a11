//! Central finite-difference gradient checking (test support).

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates sampled across all inputs together.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            samples: 25,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input, element, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl GradCheck {
    /// Compares tape gradients of `f` against central differences on
    /// randomly sampled coordinates of `inputs`.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        let grads = tape.backward(&loss)?;
        let analytic: Vec<Tensor> = leaves
            .iter()
            .map(|v| grads.get(v).cloned().expect("leaf gradient"))
            .collect();

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::no_grad();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
            f(&mut tape, &vars)?.item()
        };

        let total: usize = inputs.iter().map(Tensor::numel).sum();
        let mut state = self.seed;
        let mut report = GradCheckReport::default();
        let mut work = inputs.to_vec();
        for _ in 0..self.samples.min(total) {
            let mut flat = (splitmix(&mut state) % total as u64) as usize;
            let mut which = 0;
            while flat >= inputs[which].numel() {
                flat -= inputs[which].numel();
                which += 1;
            }
            let original = work[which].data()[flat];
            work[which].data_mut()[flat] = original + self.step;
            let plus = eval(&work)?;
            work[which].data_mut()[flat] = original - self.step;
            let minus = eval(&work)?;
            work[which].data_mut()[flat] = original;

            let numeric = (plus - minus) / (2.0 * self.step);
            let exact = analytic[which].data()[flat];
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(self.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((which, flat, exact, numeric));
            }
        }
        Ok(report)
    }
}
