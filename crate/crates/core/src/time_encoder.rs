//! Calendar-date embedding: day of week and day of year, one-hot, projected.

use chrono::{DateTime, Datelike};
use rand::Rng;

use crate::error::ModelError;
use crate::nn::{join, Params};
use crate::tensor::Mat;

/// One-hot width: 7 weekdays followed by 366 days of the year.
pub const TIME_FEATURES: usize = 7 + 366;

/// `(day_of_week, day_of_year)` with Monday = 0 and January 1st = 1, UTC.
pub fn timestamp_to_fields(ts: i64) -> (u8, u16) {
    let dt = DateTime::from_timestamp(ts, 0).expect("timestamp within chrono range");
    (dt.weekday().num_days_from_monday() as u8, dt.ordinal() as u16)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeEncoder {
    /// `373 × dim`
    pub table: Mat,
    pub bias: Mat,
}

impl TimeEncoder {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidConfig("time dimension must be >= 1".into()));
        }
        let scale = 1.0 / (TIME_FEATURES as f64).sqrt();
        Ok(Self { table: Mat::uniform(TIME_FEATURES, dim, scale, rng), bias: Mat::zeros(1, dim) })
    }

    pub fn dim(&self) -> usize {
        self.table.cols
    }

    fn rows(dow: u8, doy: u16) -> Result<(usize, usize), ModelError> {
        if dow > 6 {
            return Err(ModelError::FieldOutOfRange(format!("day of week {dow}")));
        }
        if !(1..=366).contains(&doy) {
            return Err(ModelError::FieldOutOfRange(format!("day of year {doy}")));
        }
        Ok((dow as usize, 7 + doy as usize - 1))
    }

    /// Sum of the weekday row, the day-of-year row and the bias.
    pub fn encode_time(&self, dow: u8, doy: u16) -> Result<Vec<f64>, ModelError> {
        let (a, b) = Self::rows(dow, doy)?;
        Ok((0..self.dim())
            .map(|c| self.table.get(a, c) + self.table.get(b, c) + self.bias.data[c])
            .collect())
    }

    pub fn backward(&self, dow: u8, doy: u16, dout: &[f64], grad: &mut TimeEncoder) {
        let (a, b) = Self::rows(dow, doy).expect("fields validated in forward");
        for (c, &g) in dout.iter().enumerate() {
            grad.table.data[a * self.dim() + c] += g;
            grad.table.data[b * self.dim() + c] += g;
            grad.bias.data[c] += g;
        }
    }
}

impl Params for TimeEncoder {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "table"), &self.table));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        out.push((join(prefix, "table"), &mut self.table));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Days since 1970-01-01 for a proleptic Gregorian date (civil-from-days inverse).
    fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
        let y = if m <= 2 { y - 1 } else { y };
        let era = y.div_euclid(400);
        let yoe = y - era * 400;
        let mp = (m + 9) % 12;
        let doy = (153 * mp + 2) / 5 + d - 1;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        era * 146_097 + doe - 719_468
    }

    fn oracle(y: i64, m: i64, d: i64) -> (u8, u16) {
        let days = days_from_civil(y, m, d);
        let dow = (days + 3).rem_euclid(7) as u8;
        let doy = days - days_from_civil(y, 1, 1) + 1;
        (dow, doy as u16)
    }

    #[test]
    fn epoch_is_thursday_day_one() {
        assert_eq!(timestamp_to_fields(0), (3, 1));
        assert_eq!(oracle(1970, 1, 1), (3, 1));
    }

    #[test]
    fn forum_dates_match_calendar_oracle() {
        for (y, m, d, expected) in [(2013, 7, 20, (5, 201)), (2013, 9, 25, (2, 268))] {
            assert_eq!(oracle(y, m, d), expected);
            let ts = days_from_civil(y, m, d) * 86_400 + 13 * 3600;
            assert_eq!(timestamp_to_fields(ts), expected);
        }
    }

    #[test]
    fn leap_day_index_366_is_reachable() {
        let ts = days_from_civil(2012, 12, 31) * 86_400;
        assert_eq!(timestamp_to_fields(ts).1, 366);
    }

    #[test]
    fn oracle_agrees_over_a_decade() {
        for day in (days_from_civil(2010, 1, 1)..days_from_civil(2020, 1, 1)).step_by(7) {
            let (dow, doy) = timestamp_to_fields(day * 86_400 + 86_399);
            let date = chrono::DateTime::from_timestamp(day * 86_400, 0).unwrap();
            assert_eq!((dow, doy), oracle(date.year() as i64, date.month() as i64, date.day() as i64));
        }
    }

    #[test]
    fn zero_parameters_give_zero_embedding() {
        let mut enc = TimeEncoder::new(4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        enc.table.fill(0.0);
        assert_eq!(enc.encode_time(2, 100).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn embedding_is_row_sum_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = TimeEncoder::new(5, &mut rng).unwrap();
        enc.bias = Mat::uniform(1, 5, 1.0, &mut rng);
        let h = enc.encode_time(4, 200).unwrap();
        for c in 0..5 {
            let expected = enc.table.get(4, c) + enc.table.get(7 + 199, c) + enc.bias.data[c];
            assert_eq!(h[c], expected);
        }
    }

    #[test]
    fn same_date_same_embedding_and_range_errors() {
        let enc = TimeEncoder::new(3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let morning = timestamp_to_fields(1_374_300_000);
        let evening = timestamp_to_fields(1_374_300_000 + 36_000);
        assert_eq!(morning, evening);
        assert_eq!(enc.encode_time(morning.0, morning.1), enc.encode_time(evening.0, evening.1));
        assert!(matches!(enc.encode_time(7, 1), Err(ModelError::FieldOutOfRange(_))));
        assert!(matches!(enc.encode_time(0, 0), Err(ModelError::FieldOutOfRange(_))));
        assert!(matches!(enc.encode_time(0, 367), Err(ModelError::FieldOutOfRange(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = TimeEncoder::new(3, &mut rng).unwrap();
        let w = [0.3, -1.2, 0.7];
        let loss = |e: &TimeEncoder| -> f64 {
            e.encode_time(1, 45).unwrap().iter().zip(&w).map(|(a, b)| a * a * b).sum()
        };
        let h = enc.encode_time(1, 45).unwrap();
        let dout: Vec<f64> = h.iter().zip(&w).map(|(a, b)| 2.0 * a * b).collect();
        let mut grad = enc.zeros_like();
        enc.backward(1, 45, &dout, &mut grad);
        for (row, c) in [(1usize, 0usize), (51, 2), (0, 1)] {
            let mut p = enc.clone();
            let mut m = enc.clone();
            p.table.data[row * 3 + c] += 1e-5;
            m.table.data[row * 3 + c] -= 1e-5;
            let num = (loss(&p) - loss(&m)) / 2e-5;
            let ana = grad.table.get(row, c);
            assert!((num - ana).abs() <= 1e-3 * ana.abs().max(1e-8), "{num} vs {ana}");
        }
    }
}
