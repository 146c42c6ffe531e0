use std::path::{Path, PathBuf};

use dargan::dsp::{read_wav, stft, StftConfig};
use image::{GrayImage, Luma};

use crate::CliError;

/// Dynamic range shown below the loudest bin, in dB.
const RANGE_DB: f64 = 80.0;
/// Blank rows between stacked panels.
const GAP: u32 = 4;

/// Stacks the log-magnitude spectrograms of the given files top to bottom,
/// low frequencies at the bottom of each panel. Brighter is louder.
pub fn spectrogram_panels(panels: &[(&str, PathBuf)], cfg: StftConfig, dest: &Path) -> Result<(), CliError> {
    let mut mags = Vec::new();
    for (label, path) in panels {
        let wave = read_wav::<f64>(path).map_err(|e| CliError::Runtime(format!("{label} plot: {e}")))?;
        mags.push(stft(&wave, cfg)?.magnitude().data);
    }
    let width = mags.iter().map(|m| m.nrows()).max().unwrap_or(1).max(1) as u32;
    let bins = cfg.num_bins() as u32;
    let height = bins * mags.len() as u32 + GAP * (mags.len() as u32).saturating_sub(1);
    let peak = mags
        .iter()
        .flat_map(|m| m.iter())
        .fold(1e-12_f64, |a, &v| a.max(v));
    let top_db = 20.0 * peak.log10();
    let mut img = GrayImage::new(width, height);
    for (k, m) in mags.iter().enumerate() {
        let y0 = k as u32 * (bins + GAP);
        for ((t, f), &v) in m.indexed_iter() {
            let db = 20.0 * v.max(1e-12).log10();
            let level = ((db - top_db + RANGE_DB) / RANGE_DB).clamp(0.0, 1.0);
            img.put_pixel(t as u32, y0 + bins - 1 - f as u32, Luma([(level * 255.0).round() as u8]));
        }
    }
    img.save(dest)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dest.display())))
}
