use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::SensorSample;
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Magnitudes of the full-length DFT `X[k] = sum_t x[t] exp(-2 pi i k t / N)`.
pub fn dft_magnitude(signal: &[f64]) -> Vec<f64> {
    if signal.is_empty() {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()).process(&mut buf));
    buf.iter().map(|c| c.norm()).collect()
}

/// Replaces every channel of every sensor by its DFT magnitude spectrum.
pub fn fft_transform(sample: &SensorSample) -> SensorSample {
    let mut out = sample.clone();
    for data in out.modalities.values_mut() {
        *data = channel_spectra(data);
    }
    out
}

fn channel_spectra(data: &Tensor) -> Tensor {
    let (len, ch) = (data.rows(), data.cols());
    let mut out = Tensor::zeros(&[len, ch]);
    let mut column = vec![0.0; len];
    for c in 0..ch {
        for (t, v) in column.iter_mut().enumerate() {
            *v = data.at(t, c);
        }
        for (t, m) in dft_magnitude(&column).into_iter().enumerate() {
            out.data_mut()[t * ch + c] = m;
        }
    }
    out
}

/// What the network sees of each sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputMode {
    #[default]
    Raw,
    Fft,
    /// Raw channels followed by their spectra, doubling the channel count.
    RawAndFft,
}

impl InputMode {
    pub fn channel_multiplier(self) -> usize {
        match self {
            InputMode::RawAndFft => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Raw => "raw",
            InputMode::Fft => "fft",
            InputMode::RawAndFft => "raw_and_fft",
        }
    }

    /// Converts a raw sample into the network input for this mode.
    pub fn prepare(self, sample: &SensorSample) -> Result<SensorSample> {
        Ok(match self {
            InputMode::Raw => sample.clone(),
            InputMode::Fft => fft_transform(sample),
            InputMode::RawAndFft => {
                let mut out = sample.clone();
                for data in out.modalities.values_mut() {
                    let spectra = channel_spectra(data);
                    *data = Tensor::concat_cols(&[data, &spectra])?;
                }
                out
            }
        })
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "raw" => Ok(InputMode::Raw),
            "fft" => Ok(InputMode::Fft),
            "raw_and_fft" | "raw_fft" | "raw&fft" => Ok(InputMode::RawAndFft),
            other => Err(config_err!("unknown input mode {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn constant_signal_is_dc_only() {
        let spectrum = dft_magnitude(&[2.5; 40]);
        assert!((spectrum[0] - 100.0).abs() < 1e-12);
        assert!(spectrum[1..].iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn cosine_peaks_at_its_bins() {
        let n = 500;
        let k = 7;
        let signal: Vec<f64> = (0..n).map(|t| (TAU * (k * t) as f64 / n as f64).cos()).collect();
        let spectrum = dft_magnitude(&signal);
        for (bin, &m) in spectrum.iter().enumerate() {
            let expected = if bin == k || bin == n - k { n as f64 / 2.0 } else { 0.0 };
            assert!((m - expected).abs() < 1e-9, "bin {bin}: {m}");
        }
    }

    #[test]
    fn raw_and_fft_doubles_channels() {
        use crate::data::Modality;
        use std::collections::BTreeMap;
        let mut map = BTreeMap::new();
        map.insert(Modality::Accelerometer, Tensor::filled(&[8, 3], 1.0));
        let s = SensorSample::new(map, None);
        let out = InputMode::RawAndFft.prepare(&s).unwrap();
        let acc = out.get(Modality::Accelerometer).unwrap();
        assert_eq!(acc.shape(), &[8, 6]);
        assert_eq!(acc.row(0), &[1.0, 1.0, 1.0, 8.0, 8.0, 8.0]);
        assert_eq!(acc.row(1)[..3], [1.0; 3]);
        assert!(acc.row(1)[3..].iter().all(|&v| v < 1e-12));
    }
}
