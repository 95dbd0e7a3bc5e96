use crate::error::{config_err, Result};
use crate::model::ModelParams;
use crate::numcore::ParamSet;

/// Stochastic-weight-averaged teacher: the running mean of the student
/// snapshots taken at rounds `t_start, t_start + omega, ...`.
///
/// Until the first snapshot the teacher holds whatever it was created with
/// (the pre-trained model); the first snapshot replaces it outright.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub weights: ModelParams,
    /// Snapshots averaged so far.
    pub count: usize,
    pub omega: usize,
    pub t_start: usize,
}

impl TeacherState {
    pub fn new(initial: ModelParams, omega: usize, t_start: usize) -> Result<Self> {
        if omega == 0 {
            return config_err("teacher snapshot period must be positive");
        }
        Ok(Self {
            weights: initial,
            count: 0,
            omega,
            t_start,
        })
    }

    /// Whether round `t` is a snapshot round.
    pub fn is_due(&self, t: usize) -> bool {
        t >= self.t_start && (t - self.t_start).is_multiple_of(self.omega)
    }

    /// `w <- (w * n + student) / (n + 1)`, `n <- n + 1`.
    pub fn swa_update(&mut self, student: &ModelParams, t: usize) -> Result<()> {
        if !self.is_due(t) {
            return config_err(format!(
                "round {t} is not a snapshot round (start {}, period {})",
                self.t_start, self.omega
            ));
        }
        let expected = (t - self.t_start) / self.omega;
        if self.count != expected {
            return config_err(format!(
                "teacher has {} snapshots but round {t} is snapshot #{expected}",
                self.count
            ));
        }
        let n = self.count as f64;
        let students = student.tensors();
        for (w, s) in self.weights.tensors_mut().into_iter().zip(students) {
            for (a, b) in w.as_mut_slice().iter_mut().zip(s.as_slice()) {
                *a = (*a * n + b) / (n + 1.0);
            }
        }
        self.count += 1;
        Ok(())
    }
}
