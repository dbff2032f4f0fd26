//! Uniformly sampled record of the applied control.
//!
//! The history realizes the transport-PDE state `u(x, t) = U(t + D (x - 1))`
//! for `x` in `[0, 1]` and the estimate `û(x, t)` obtained by substituting the
//! delay estimate. Values between samples are linearly interpolated; queries
//! outside the stored window are errors.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::HistoryError;

/// Extra samples kept beyond the window so centered stencils have neighbours.
const GUARD_SAMPLES: usize = 2;

#[derive(Debug, Clone)]
pub struct InputHistory {
    sample_period: f64,
    window_length: f64,
    capacity: usize,
    /// Time of the sample with global index 0.
    origin: f64,
    /// Global index of the newest sample.
    newest: i64,
    values: VecDeque<f64>,
    /// Running trapezoid integral of the record at each sample, in units of
    /// the sample period.
    cum: VecDeque<f64>,
}

/// Trapezoidal integrals over a trailing window of the history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowFunctionals {
    pub int_u2: f64,
    pub int_abs_u: f64,
    pub int_abs_udot: f64,
    pub int_abs_uddot: f64,
}

impl InputHistory {
    /// Empty history; the first push may happen at any time.
    pub fn new(sample_period: f64, window_length: f64) -> Result<Self, HistoryError> {
        if !(sample_period > 0.0) || !sample_period.is_finite() {
            return Err(HistoryError::Invalid(format!("sample period must be positive, got {sample_period}")));
        }
        if !(window_length >= sample_period) || !window_length.is_finite() {
            return Err(HistoryError::Invalid(format!(
                "window length {window_length} must be at least one sample period"
            )));
        }
        let capacity = (window_length / sample_period).ceil() as usize + 1 + GUARD_SAMPLES;
        Ok(InputHistory {
            sample_period,
            window_length,
            capacity,
            origin: 0.0,
            newest: -1,
            values: VecDeque::with_capacity(capacity),
            cum: VecDeque::with_capacity(capacity),
        })
    }

    /// History holding `value` on the whole window, with the newest sample at `t_now`.
    pub fn prefilled(sample_period: f64, window_length: f64, t_now: f64, value: f64) -> Result<Self, HistoryError> {
        let mut h = Self::new(sample_period, window_length)?;
        let k = h.capacity as i64 - 1;
        h.origin = t_now - k as f64 * sample_period;
        h.newest = k;
        h.values.extend(std::iter::repeat(value).take(h.capacity));
        h.cum.extend((0..h.capacity).map(|i| i as f64 * value));
        Ok(h)
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn window_length(&self) -> f64 {
        self.window_length
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn time_of(&self, global: i64) -> f64 {
        self.origin + global as f64 * self.sample_period
    }

    /// Time of the newest sample (`None` before the first push).
    pub fn current_time(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.time_of(self.newest))
    }

    pub fn earliest_time(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.time_of(self.oldest_index()))
    }

    pub fn latest_value(&self) -> Option<f64> {
        self.values.back().copied()
    }

    fn oldest_index(&self) -> i64 {
        self.newest - self.values.len() as i64 + 1
    }

    /// Appends the control applied at time `t`, which must be exactly one
    /// sample period after the newest sample.
    pub fn push(&mut self, t: f64, value: f64) -> Result<(), HistoryError> {
        if self.values.is_empty() {
            self.origin = t;
            self.newest = 0;
            self.values.push_back(value);
            self.cum.push_back(0.0);
            return Ok(());
        }
        let expected = self.time_of(self.newest + 1);
        if (t - expected).abs() > 1e-6 * self.sample_period {
            return Err(HistoryError::NonUniformPush { expected, got: t });
        }
        let prev = *self.values.back().unwrap();
        let acc = *self.cum.back().unwrap() + 0.5 * (prev + value);
        if self.values.len() == self.capacity {
            self.values.pop_front();
            self.cum.pop_front();
        }
        self.values.push_back(value);
        self.cum.push_back(acc);
        self.newest += 1;
        Ok(())
    }

    /// Fractional position of `theta` measured from the oldest stored sample.
    fn position(&self, theta: f64) -> Result<f64, HistoryError> {
        let (Some(earliest), Some(latest)) = (self.earliest_time(), self.current_time()) else {
            return Err(HistoryError::BeforeHistory { requested: theta, earliest: f64::NAN });
        };
        let tol = 1e-9 * self.sample_period;
        if theta < earliest - tol {
            return Err(HistoryError::BeforeHistory { requested: theta, earliest });
        }
        if theta > latest + tol {
            return Err(HistoryError::AfterHistory { requested: theta, latest });
        }
        let last = (self.values.len() - 1) as f64;
        let pos = last - (latest - theta) / self.sample_period;
        Ok(pos.clamp(0.0, last))
    }

    /// Splits a position into a base index and interpolation weight, snapping
    /// to the nearest sample when within rounding noise.
    fn split(pos: f64, len: usize) -> (usize, f64) {
        let nearest = pos.round();
        if (pos - nearest).abs() < 1e-9 {
            let j = nearest as usize;
            return (j.min(len - 1), 0.0);
        }
        let j = pos.floor() as usize;
        (j, pos - j as f64)
    }

    /// `U(theta)` by linear interpolation between samples.
    pub fn sample(&self, theta: f64) -> Result<f64, HistoryError> {
        let pos = self.position(theta)?;
        let (j, w) = Self::split(pos, self.values.len());
        if w == 0.0 {
            return Ok(self.values[j]);
        }
        Ok((1.0 - w) * self.values[j] + w * self.values[j + 1])
    }

    fn check_delay(&self, delay: f64, x: f64) -> Result<(), HistoryError> {
        if !(delay > 0.0) || delay > self.window_length * (1.0 + 1e-12) {
            return Err(HistoryError::Invalid(format!(
                "delay {delay} outside (0, {}]",
                self.window_length
            )));
        }
        if !(0.0..=1.0).contains(&x) {
            return Err(HistoryError::Invalid(format!("x = {x} outside [0, 1]")));
        }
        Ok(())
    }

    /// `u(x, t) = U(t + delay (x - 1))` at the newest time `t`.
    pub fn distributed_input(&self, delay: f64, x: f64) -> Result<f64, HistoryError> {
        let t = self.current_time().ok_or(HistoryError::BeforeHistory { requested: x, earliest: f64::NAN })?;
        self.distributed_input_at(t, delay, x)
    }

    /// `U(t_ref + delay (x - 1))` for an explicit reference time.
    pub fn distributed_input_at(&self, t_ref: f64, delay: f64, x: f64) -> Result<f64, HistoryError> {
        self.check_delay(delay, x)?;
        self.sample(t_ref + delay * (x - 1.0))
    }

    /// Centered first difference at a stored sample.
    fn node_derivative(&self, j: usize) -> Option<f64> {
        if j == 0 || j + 1 >= self.values.len() {
            return None;
        }
        Some((self.values[j + 1] - self.values[j - 1]) / (2.0 * self.sample_period))
    }

    /// `U(theta)` with `theta` clamped into the stored record.
    ///
    /// Used where the newest instant is not yet available, e.g. when
    /// assembling the actuator profile before the current control is applied.
    pub fn sample_clamped(&self, theta: f64) -> f64 {
        match (self.earliest_time(), self.current_time()) {
            (Some(lo), Some(hi)) => self.sample(theta.clamp(lo, hi)).unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// Mean of the interpolant over `[a, b]`, held constant outside the
    /// stored record. Falls back to a point sample when `b <= a`.
    pub fn average_clamped(&self, a: f64, b: f64) -> f64 {
        let (Some(lo), Some(hi)) = (self.earliest_time(), self.current_time()) else {
            return 0.0;
        };
        if !(b > a) {
            return self.sample_clamped(0.5 * (a + b));
        }
        let first = self.values[0];
        let last_v = *self.values.back().unwrap();
        let mut acc = (b.min(lo) - a).max(0.0) * first + (b - a.max(hi)).max(0.0) * last_v;
        let (p, q) = (a.max(lo), b.min(hi));
        if q > p {
            let len = self.values.len();
            let last = (len - 1) as f64;
            let to_pos = |theta: f64| (last - (hi - theta) / self.sample_period).clamp(0.0, last);
            // Running integral at a position; positions are nonnegative, so
            // truncation is floor.
            let running = |pos: f64| {
                let j = (pos as usize).min(len.saturating_sub(2));
                let w = pos - j as f64;
                let v0 = self.values[j];
                let v1 = self.values[(j + 1).min(len - 1)];
                self.cum[j] + w * v0 + 0.5 * w * w * (v1 - v0)
            };
            acc += (running(to_pos(q)) - running(to_pos(p))) * self.sample_period;
        }
        acc / (b - a)
    }

    /// `U'(theta)`: centered differences at the samples, linearly interpolated.
    pub fn derivative(&self, theta: f64) -> Result<f64, HistoryError> {
        let pos = self.position(theta)?;
        let (j, w) = Self::split(pos, self.values.len());
        let margin = || HistoryError::InsufficientMargin {
            requested: theta,
            earliest: self.earliest_time().unwrap_or(f64::NAN),
            latest: self.current_time().unwrap_or(f64::NAN),
        };
        let dj = self.node_derivative(j).ok_or_else(margin)?;
        if w == 0.0 {
            return Ok(dj);
        }
        let dj1 = self.node_derivative(j + 1).ok_or_else(margin)?;
        Ok((1.0 - w) * dj + w * dj1)
    }

    /// `d/dx u(x, t) = delay * U'(t + delay (x - 1))` at the newest time.
    pub fn distributed_input_xderiv(&self, delay: f64, x: f64) -> Result<f64, HistoryError> {
        let t = self.current_time().ok_or(HistoryError::BeforeHistory { requested: x, earliest: f64::NAN })?;
        self.distributed_input_xderiv_at(t, delay, x)
    }

    pub fn distributed_input_xderiv_at(&self, t_ref: f64, delay: f64, x: f64) -> Result<f64, HistoryError> {
        self.check_delay(delay, x)?;
        Ok(delay * self.derivative(t_ref + delay * (x - 1.0))?)
    }

    /// Integrals of `U^2`, `|U|`, `|U'|`, `|U''|` over `[t - horizon, t]`.
    ///
    /// Derivatives use centered stencils at interior samples and second-order
    /// one-sided stencils at the ends of the stored record.
    pub fn window_functionals(&self, horizon: f64) -> Result<WindowFunctionals, HistoryError> {
        self.window_functionals_about(horizon, 0.0)
    }

    /// As [`Self::window_functionals`], with the two undifferentiated terms
    /// taken of `U - offset`.
    pub fn window_functionals_about(&self, horizon: f64, offset: f64) -> Result<WindowFunctionals, HistoryError> {
        let t = self.current_time().ok_or(HistoryError::HorizonTooLong { horizon, available: 0.0 })?;
        let available = t - self.earliest_time().unwrap_or(t);
        if !(horizon >= 0.0) || horizon > self.window_length * (1.0 + 1e-12) || horizon > available + 1e-9 * self.sample_period {
            return Err(HistoryError::HorizonTooLong { horizon, available });
        }
        if horizon == 0.0 {
            return Ok(WindowFunctionals { int_u2: 0.0, int_abs_u: 0.0, int_abs_udot: 0.0, int_abs_uddot: 0.0 });
        }
        let len = self.values.len();
        let start_pos = self.position(t - horizon)?;
        let (j0, _) = Self::split(start_pos, len);
        // Nodes needed: j0 ..= len-1 (plus j0's stencil neighbours).
        let first = j0.saturating_sub(0);
        let h = self.sample_period;
        let v = &self.values;
        let d1 = |j: usize| -> f64 {
            if j > 0 && j + 1 < len {
                (v[j + 1] - v[j - 1]) / (2.0 * h)
            } else if j + 1 >= len && j >= 2 {
                (3.0 * v[j] - 4.0 * v[j - 1] + v[j - 2]) / (2.0 * h)
            } else if j == 0 && len >= 3 {
                (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
            } else if len >= 2 {
                let (a, b) = if j + 1 < len { (j, j + 1) } else { (j - 1, j) };
                (v[b] - v[a]) / h
            } else {
                0.0
            }
        };
        let d2 = |j: usize| -> f64 {
            if j > 0 && j + 1 < len {
                (v[j + 1] - 2.0 * v[j] + v[j - 1]) / (h * h)
            } else if j + 1 >= len && j >= 3 {
                (2.0 * v[j] - 5.0 * v[j - 1] + 4.0 * v[j - 2] - v[j - 3]) / (h * h)
            } else if j == 0 && len >= 4 {
                (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / (h * h)
            } else {
                0.0
            }
        };
        let mut acc = [0.0f64; 4];
        let node = |j: usize| -> [f64; 4] {
            let u = v[j] - offset;
            [u * u, u.abs(), d1(j).abs(), d2(j).abs()]
        };
        // Partial leading segment from start_pos to the next node.
        let frac = start_pos - first as f64;
        let mut prev = node(first);
        let mut seg_start = start_pos;
        if frac > 0.0 {
            let next = node(first + 1);
            let at_start: Vec<f64> = (0..4).map(|k| (1.0 - frac) * prev[k] + frac * next[k]).collect();
            for k in 0..4 {
                // Integrating the interpolants of each node quantity; U^2 uses
                // the interpolated U squared at the cut point.
                acc[k] += 0.5 * (at_start[k] + next[k]) * (1.0 - frac) * h;
            }
            let u_cut = (1.0 - frac) * v[first] + frac * v[first + 1] - offset;
            acc[0] += 0.5 * (u_cut * u_cut - at_start[0]) * (1.0 - frac) * h;
            acc[1] += 0.5 * (u_cut.abs() - at_start[1]) * (1.0 - frac) * h;
            prev = next;
            seg_start = (first + 1) as f64;
        }
        let mut j = seg_start as usize;
        while j + 1 < len {
            let next = node(j + 1);
            for k in 0..4 {
                acc[k] += 0.5 * (prev[k] + next[k]) * h;
            }
            prev = next;
            j += 1;
        }
        Ok(WindowFunctionals { int_u2: acc[0], int_abs_u: acc[1], int_abs_udot: acc[2], int_abs_uddot: acc[3] })
    }

    /// Iterator over `(time, U)` pairs from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let first = self.oldest_index();
        self.values.iter().enumerate().map(move |(k, &u)| (self.time_of(first + k as i64), u))
    }

    /// Writes the stored samples as CSV with header `time,U`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "time,U")?;
        for (t, u) in self.iter() {
            writeln!(w, "{t},{u}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(dt: f64, t_end: f64, window: f64, f: impl Fn(f64) -> f64) -> InputHistory {
        let mut h = InputHistory::new(dt, window).unwrap();
        let steps = (t_end / dt).round() as i64;
        for k in 0..=steps {
            let t = k as f64 * dt;
            h.push(t, f(t)).unwrap();
        }
        h
    }

    #[test]
    fn push_then_sample_same_instant() {
        let mut h = InputHistory::new(0.01, 1.0).unwrap();
        h.push(0.0, 1.5).unwrap();
        h.push(0.01, -2.25).unwrap();
        assert_eq!(h.sample(0.01).unwrap(), -2.25);
        assert_eq!(h.sample(0.0).unwrap(), 1.5);
    }

    #[test]
    fn constant_history_samples_constant() {
        let h = filled(0.01, 3.0, 2.0, |_| 0.7);
        for k in 0..50 {
            let theta = 1.0 + k as f64 * 0.0391;
            assert_eq!(h.sample(theta).unwrap(), 0.7);
        }
    }

    #[test]
    fn sine_interpolation_accuracy() {
        let h = filled(1e-3, 4.0, 4.0, f64::sin);
        assert!((h.sample(1.234).unwrap() - 1.234f64.sin()).abs() < 1e-5);
    }

    #[test]
    fn rejects_non_uniform_push() {
        let mut h = InputHistory::new(0.1, 1.0).unwrap();
        h.push(0.0, 0.0).unwrap();
        assert!(matches!(h.push(0.25, 0.0), Err(HistoryError::NonUniformPush { .. })));
        assert!(matches!(h.push(0.0, 0.0), Err(HistoryError::NonUniformPush { .. })));
    }

    #[test]
    fn window_slides_and_evicts() {
        let h = filled(0.1, 10.0, 1.0, |t| t);
        let earliest = h.earliest_time().unwrap();
        assert!(earliest > 8.5);
        let err = h.sample(5.0).unwrap_err();
        match err {
            HistoryError::BeforeHistory { earliest: e, .. } => assert!((e - earliest).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(h.sample(10.5), Err(HistoryError::AfterHistory { .. })));
    }

    #[test]
    fn distributed_input_boundaries() {
        let h = filled(0.01, 10.0, 4.0, |t| t);
        assert!((h.distributed_input(2.0, 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((h.distributed_input(2.0, 0.0).unwrap() - 8.0).abs() < 1e-9);
        assert!((h.distributed_input(2.0, 0.25).unwrap() - 8.5).abs() < 1e-9);
    }

    #[test]
    fn distributed_input_before_history_reports_earliest() {
        let h = filled(0.01, 1.0, 4.0, |t| t);
        match h.distributed_input(2.0, 0.0) {
            Err(HistoryError::BeforeHistory { earliest, .. }) => assert_eq!(earliest, 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn xderiv_examples() {
        let c = filled(0.01, 5.0, 4.0, |_| 3.0);
        for x in [0.1, 0.5, 0.9] {
            assert_eq!(c.distributed_input_xderiv(2.0, x).unwrap(), 0.0);
        }
        let ramp = filled(0.01, 10.0, 4.0, |t| t);
        for x in [0.0, 0.33, 0.5, 0.99] {
            assert!((ramp.distributed_input_xderiv(2.0, x).unwrap() - 2.0).abs() < 1e-9);
        }
        let s = filled(1e-3, 5.0, 4.0, f64::sin);
        let got = s.distributed_input_xderiv(1.5, 0.5).unwrap();
        assert!((got - 1.5 * 4.25f64.cos()).abs() < 1e-4);
    }

    #[test]
    fn xderiv_needs_margin_at_newest_sample() {
        let ramp = filled(0.01, 10.0, 4.0, |t| t);
        assert!(matches!(
            ramp.distributed_input_xderiv(2.0, 1.0),
            Err(HistoryError::InsufficientMargin { .. })
        ));
    }

    #[test]
    fn window_functional_examples() {
        let z = filled(0.01, 3.0, 4.0, |_| 0.0);
        let w = z.window_functionals(2.0).unwrap();
        assert_eq!((w.int_u2, w.int_abs_u, w.int_abs_udot, w.int_abs_uddot), (0.0, 0.0, 0.0, 0.0));

        let one = filled(0.01, 3.0, 4.0, |_| 1.0);
        let w = one.window_functionals(2.0).unwrap();
        assert!((w.int_u2 - 2.0).abs() < 1e-9);
        assert!((w.int_abs_u - 2.0).abs() < 1e-9);
        assert!(w.int_abs_udot.abs() < 1e-9 && w.int_abs_uddot.abs() < 1e-9);

        let ramp = filled(0.01, 1.0, 1.0, |t| t);
        let w = ramp.window_functionals(1.0).unwrap();
        assert!((w.int_abs_udot - 1.0).abs() < 1e-9, "{w:?}");
        assert!((w.int_abs_u - 0.5).abs() < 1e-9);
        assert!(w.int_abs_uddot < 1e-6);
    }

    #[test]
    fn window_functional_off_grid_horizon() {
        let one = filled(0.01, 3.0, 4.0, |_| 1.0);
        let w = one.window_functionals(1.234).unwrap();
        assert!((w.int_u2 - 1.234).abs() < 1e-9);
        let ramp = filled(0.01, 3.0, 4.0, |t| t);
        let w = ramp.window_functionals(1.234).unwrap();
        let exact = (3.0f64.powi(2) - (3.0f64 - 1.234).powi(2)) / 2.0;
        assert!((w.int_abs_u - exact).abs() < 1e-9);
    }

    #[test]
    fn horizon_longer_than_record_is_error() {
        let h = filled(0.01, 1.0, 4.0, |_| 1.0);
        assert!(matches!(h.window_functionals(2.0), Err(HistoryError::HorizonTooLong { .. })));
    }

    #[test]
    fn average_matches_quadrature_of_interpolant() {
        let h = filled(0.01, 3.0, 2.0, |t| (3.0 * t).sin() + 0.2 * t);
        let (lo, hi) = (h.earliest_time().unwrap(), h.current_time().unwrap());
        for &(a, b) in &[(0.5, 0.5371), (1.234, 1.9), (lo - 0.3, lo + 0.05), (hi - 0.02, hi + 0.4), (0.7, 0.7001)] {
            let k = 20_000;
            let mid: f64 = (0..k).map(|i| h.sample_clamped(a + (i as f64 + 0.5) * (b - a) / k as f64)).sum::<f64>() / k as f64;
            assert!((h.average_clamped(a, b) - mid).abs() < 1e-7, "[{a}, {b}]");
        }
        assert_eq!(h.average_clamped(1.0, 1.0), h.sample_clamped(1.0));
    }

    #[test]
    fn prefilled_covers_window() {
        let h = InputHistory::prefilled(1e-3, 4.0, -1e-3, 0.0).unwrap();
        assert!(h.earliest_time().unwrap() <= -4.0);
        assert_eq!(h.distributed_input(4.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let h = filled(0.5, 1.0, 2.0, |t| 2.0 * t);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "time,U\n0,0\n0.5,1\n1,2\n");
    }
}
