use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::codec::Waveform;
use crate::error::{Error, Result};

/// Write mono 16-bit PCM. Samples must lie in `[-1, 1]`.
pub fn write_wav(w: &Waveform, path: &Path) -> Result<()> {
    if let Some(v) = w.samples().iter().find(|v| v.abs() > 1.0) {
        return Err(Error::Wav(format!("sample {v} outside [-1, 1]")));
    }
    let spec = WavSpec { channels: 1, sample_rate: w.sample_rate(), bits_per_sample: 16, sample_format: SampleFormat::Int };
    let tmp = path.with_extension("wav.tmp");
    let mut writer = WavWriter::create(&tmp, spec).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    for &v in w.samples() {
        let q = (v as f64 * 32767.0).round() as i16;
        writer.write_sample(q).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    }
    writer.finalize().map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a mono 16-bit PCM file, checking the rate when one is expected.
/// No resampling is ever performed.
pub fn read_wav(path: &Path, expected_rate: Option<u32>) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = WavReader::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Wav(format!("{}: expected mono, found {} channels", path.display(), spec.channels)));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: expected 16-bit integer PCM, found {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::Wav(format!("{}: sample rate {} Hz, expected {rate} Hz", path.display(), spec.sample_rate)));
        }
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32767.0))
        .collect::<Result<Vec<f32>, _>>()
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    Waveform::new(samples.into_iter().map(|v| v.max(-1.0)).collect(), spec.sample_rate)
}
