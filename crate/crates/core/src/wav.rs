//! Mono RIFF/WAVE I/O: PCM 16/24-bit and 32-bit float in, 32-bit float out.

use std::fs;
use std::path::Path;

use thiserror::Error;

/// Rate the model family was trained at. Other rates load, with a warning.
pub const NATIVE_SAMPLE_RATE: u32 = 44_100;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("expected mono input, found {0} channels")]
    MultichannelInput(u16),
    #[error("corrupt WAV: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wav {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
    bits: u16,
}

fn parse_fmt(body: &[u8]) -> Result<Format, WavError> {
    if body.len() < 16 {
        return Err(WavError::Corrupt(format!("fmt chunk of {} bytes", body.len())));
    }
    let mut tag = u16_at(body, 0);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 40 {
            return Err(WavError::Corrupt("short WAVE_FORMAT_EXTENSIBLE chunk".into()));
        }
        // The sub-format GUID starts with the plain format tag.
        tag = u16_at(body, 24);
    }
    Ok(Format {
        tag,
        channels: u16_at(body, 2),
        sample_rate: u32_at(body, 4),
        block_align: u16_at(body, 12),
        bits: u16_at(body, 14),
    })
}

pub fn read_wav(bytes: &[u8]) -> Result<Wav, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::Corrupt("missing RIFF/WAVE header".into()));
    }
    let mut fmt = None;
    let mut data = None;
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = u32_at(bytes, at + 4) as usize;
        let start = at + 8;
        let end = start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| WavError::Corrupt(format!("chunk {:?} runs past end of file", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[start..end])?),
            b"data" => data = Some(&bytes[start..end]),
            _ => {}
        }
        at = end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| WavError::Corrupt("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| WavError::Corrupt("no data chunk".into()))?;

    if fmt.channels != 1 {
        if fmt.channels == 0 {
            return Err(WavError::Corrupt("zero channels".into()));
        }
        return Err(WavError::MultichannelInput(fmt.channels));
    }
    if fmt.sample_rate == 0 {
        return Err(WavError::Corrupt("sample rate 0".into()));
    }
    let width = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_PCM, 24) => 3,
        (FORMAT_FLOAT, 32) => 4,
        (tag, bits) => {
            return Err(WavError::UnsupportedFormat(format!("format tag {tag}, {bits} bits")))
        }
    };
    if fmt.block_align as usize != width {
        return Err(WavError::Corrupt(format!(
            "block align {} for {}-bit mono",
            fmt.block_align, fmt.bits
        )));
    }
    if data.len() % width != 0 {
        return Err(WavError::Corrupt("data size is not a whole number of frames".into()));
    }
    let samples: Vec<f32> = match width {
        2 => data
            .chunks_exact(2)
            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f32 / 32_768.0)
            .collect(),
        3 => data
            .chunks_exact(3)
            .map(|s| (i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8) as f32 / 8_388_608.0)
            .collect(),
        _ => data
            .chunks_exact(4)
            .map(|s| f32::from_le_bytes([s[0], s[1], s[2], s[3]]))
            .collect(),
    };
    if fmt.sample_rate != NATIVE_SAMPLE_RATE {
        log::warn!(
            "sample rate {} Hz; the model was trained at {NATIVE_SAMPLE_RATE} Hz and is not resampled",
            fmt.sample_rate
        );
    }
    Ok(Wav {
        samples,
        sample_rate: fmt.sample_rate,
    })
}

/// Canonical 44-byte-header IEEE float mono WAV.
pub fn write_wav(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 4) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 4);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_FLOAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 4).to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn read_wav_file(path: impl AsRef<Path>) -> Result<Wav, WavError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_wav(&bytes)
}

pub fn write_wav_file(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<(), WavError> {
    let path = path.as_ref();
    fs::write(path, write_wav(samples, sample_rate)).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm(tag: u16, channels: u16, bits: u16, data: &[u8]) -> Vec<u8> {
        let align = channels * bits / 8;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&44_100u32.to_le_bytes());
        out.extend_from_slice(&(44_100 * align as u32).to_le_bytes());
        out.extend_from_slice(&align.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let x = vec![0.0, -1.0, 1.0, 0.123_456_79, f32::MIN_POSITIVE, -0.5, 3.5];
        let w = read_wav(&write_wav(&x, 48_000)).unwrap();
        assert_eq!(w.sample_rate, 48_000);
        assert_eq!(
            w.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn header_layout() {
        let b = write_wav(&[0.5, -0.5], 44_100);
        assert_eq!(b.len(), 52);
        assert_eq!(&b[0..4], b"RIFF");
        assert_eq!(u32_at(&b, 4), 44);
        assert_eq!(&b[8..16], b"WAVEfmt ");
        assert_eq!(u32_at(&b, 16), 16);
        assert_eq!(u16_at(&b, 20), 3);
        assert_eq!(u16_at(&b, 22), 1);
        assert_eq!(u32_at(&b, 24), 44_100);
        assert_eq!(u32_at(&b, 28), 176_400);
        assert_eq!(u16_at(&b, 32), 4);
        assert_eq!(u16_at(&b, 34), 32);
        assert_eq!(&b[36..40], b"data");
        assert_eq!(u32_at(&b, 40), 8);
        assert_eq!(&b[44..48], &0.5f32.to_le_bytes());
    }

    #[test]
    fn empty_signal_is_valid() {
        let b = write_wav(&[], 44_100);
        assert_eq!(b.len(), 44);
        assert_eq!(read_wav(&b).unwrap().samples, Vec::<f32>::new());
    }

    #[test]
    fn pcm16_normalization() {
        let data: Vec<u8> = [i16::MAX, i16::MIN, 0, 16_384].iter().flat_map(|v| v.to_le_bytes()).collect();
        let w = read_wav(&pcm(1, 1, 16, &data)).unwrap();
        assert_eq!(w.samples, vec![32_767.0 / 32_768.0, -1.0, 0.0, 0.5]);
    }

    #[test]
    fn pcm24_normalization() {
        let data = [0xFF, 0xFF, 0x7F, 0x00, 0x00, 0x80, 0x00, 0x00, 0x40];
        let w = read_wav(&pcm(1, 1, 24, &data)).unwrap();
        assert_eq!(w.samples, vec![8_388_607.0 / 8_388_608.0, -1.0, 0.5]);
    }

    #[test]
    fn extensible_float_is_accepted() {
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF\0\0\0\0WAVEfmt ");
        b.extend_from_slice(&40u32.to_le_bytes());
        b.extend_from_slice(&FORMAT_EXTENSIBLE.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&44_100u32.to_le_bytes());
        b.extend_from_slice(&176_400u32.to_le_bytes());
        b.extend_from_slice(&4u16.to_le_bytes());
        b.extend_from_slice(&32u16.to_le_bytes());
        b.extend_from_slice(&22u16.to_le_bytes());
        b.extend_from_slice(&32u16.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&3u16.to_le_bytes());
        b.extend_from_slice(&[0, 0, 0, 0, 0x10, 0, 0x80, 0, 0, 0xAA, 0, 0x38, 0x9B, 0x71]);
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(b"data");
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&0.25f32.to_le_bytes());
        assert_eq!(read_wav(&b).unwrap().samples, vec![0.25]);
    }

    #[test]
    fn error_taxonomy() {
        let stereo = pcm(1, 2, 16, &[0; 8]);
        assert!(matches!(read_wav(&stereo), Err(WavError::MultichannelInput(2))));
        assert!(matches!(read_wav(&pcm(1, 1, 8, &[0; 4])), Err(WavError::UnsupportedFormat(_))));
        assert!(matches!(read_wav(&pcm(3, 1, 64, &[0; 8])), Err(WavError::UnsupportedFormat(_))));
        assert!(matches!(read_wav(&pcm(2, 1, 16, &[0; 4])), Err(WavError::UnsupportedFormat(_))));
        assert!(matches!(read_wav(b"RIFX"), Err(WavError::Corrupt(_))));
        let mut truncated = write_wav(&[0.1; 10], 44_100);
        truncated.truncate(60);
        assert!(matches!(read_wav(&truncated), Err(WavError::Corrupt(_))));
        assert!(matches!(read_wav(&pcm(1, 1, 16, &[0; 3])), Err(WavError::Corrupt(_))));
    }
}
