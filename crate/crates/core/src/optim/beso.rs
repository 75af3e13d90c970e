//! Bi-directional evolutionary structural optimization with soft-kill
//! elements.

use crate::error::{Error, Result};
use crate::fea::X_MIN;

use super::filter::RadialFilter;

#[derive(Debug, Clone)]
pub struct BesoState {
    pub x: Vec<f64>,
    /// Evolutionary rate: largest relative volume change per update.
    pub er: f64,
    /// Volume fraction reached by the last update.
    pub volume: f64,
    prev_alpha: Option<Vec<f64>>,
}

impl BesoState {
    /// All-solid start.
    pub fn new(n: usize, er: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("beso needs at least one element".into()));
        }
        if !(er > 0.0 && er <= 1.0) {
            return Err(Error::Invalid(format!(
                "evolutionary rate {er} outside (0, 1]"
            )));
        }
        Ok(Self {
            x: vec![1.0; n],
            er,
            volume: 1.0,
            prev_alpha: None,
        })
    }

    pub fn solid_count(&self) -> usize {
        self.x.iter().filter(|&&v| v == 1.0).count()
    }

    /// Volume fraction for the next step, moving towards `target` by at
    /// most `er` of the current volume.
    pub fn next_volume(&self, target: f64) -> f64 {
        if self.volume > target {
            target.max(self.volume * (1.0 - self.er))
        } else {
            target.min(self.volume * (1.0 + self.er))
        }
    }

    /// Ranks the (filtered, history-averaged) sensitivity numbers and keeps
    /// the highest ones solid. Ties go to the lower element index.
    pub fn update(
        &mut self,
        alpha: &[f64],
        target: f64,
        filter: Option<&RadialFilter>,
    ) -> Result<&[f64]> {
        let n = self.x.len();
        if alpha.len() != n {
            return Err(Error::Invalid(format!(
                "expected {n} sensitivity numbers, got {}",
                alpha.len()
            )));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Numerical(
                "beso sensitivity numbers must be finite and nonnegative".into(),
            ));
        }
        if !(target > 0.0 && target <= 1.0) || target * (n as f64) < 1.0 {
            return Err(Error::Invalid(format!(
                "beso volume target {target} is below one element"
            )));
        }
        let mut a = match filter {
            Some(f) => f.apply(alpha),
            None => alpha.to_vec(),
        };
        if let Some(prev) = &self.prev_alpha {
            a.iter_mut()
                .zip(prev)
                .for_each(|(v, p)| *v = 0.5 * (*v + p));
        }
        let v_next = self.next_volume(target);
        let keep = ((v_next * n as f64).round() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
        self.x.iter_mut().for_each(|v| *v = X_MIN);
        for &e in &order[..keep] {
            self.x[e] = 1.0;
        }
        self.volume = v_next;
        self.prev_alpha = Some(a);
        Ok(&self.x)
    }
}
