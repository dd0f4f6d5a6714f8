//! DTMF codec: dual-tone synthesis at telephony sample rates, a
//! Goertzel-based decoder, an additive-gaussian line noise model, and the
//! affine transmission-time model for the three transport paths (analogue
//! in-band audio, digital RTP-style events, out-of-band signaling messages).

use crate::time::SimDuration;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Telephony default sample rate.
pub const DEFAULT_SAMPLE_RATE: u32 = 8_000;

/// RFC 4733 minimum mark and space for digital event paths, milliseconds.
pub const MIN_DIGITAL_MARK_SPACE_MS: u32 = 40;

/// Nominal mean-square power of a clean two-tone signal at amplitude 0.5 per
/// tone; the reference for SNR in [`NoiseModel::AdditiveGaussian`].
pub const REFERENCE_SIGNAL_POWER: f64 = 0.25;

const LOW_FREQS: [f64; 4] = [697.0, 770.0, 852.0, 941.0];
const HIGH_FREQS: [f64; 4] = [1209.0, 1336.0, 1477.0, 1633.0];
const SYMBOL_GRID: [[char; 4]; 4] = [
    ['1', '2', '3', 'A'],
    ['4', '5', '6', 'B'],
    ['7', '8', '9', 'C'],
    ['*', '0', '#', 'D'],
];

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum DtmfError {
    #[error("invalid DTMF symbol {0:?}")]
    InvalidSymbol(char),
}

/// One of the 16 keypad symbols; each maps to a unique (low, high) pair of
/// the 8 standard frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DtmfSymbol {
    row: u8,
    col: u8,
}

impl DtmfSymbol {
    pub fn from_char(c: char) -> Result<Self, DtmfError> {
        for (row, line) in SYMBOL_GRID.iter().enumerate() {
            for (col, &sym) in line.iter().enumerate() {
                if sym == c {
                    return Ok(Self {
                        row: row as u8,
                        col: col as u8,
                    });
                }
            }
        }
        Err(DtmfError::InvalidSymbol(c))
    }

    pub fn to_char(self) -> char {
        SYMBOL_GRID[self.row as usize][self.col as usize]
    }

    pub fn low_hz(self) -> f64 {
        LOW_FREQS[self.row as usize]
    }

    pub fn high_hz(self) -> f64 {
        HIGH_FREQS[self.col as usize]
    }

    pub fn all() -> impl Iterator<Item = DtmfSymbol> {
        (0..4u8).flat_map(|row| (0..4u8).map(move |col| DtmfSymbol { row, col }))
    }
}

pub fn symbols_from_str(s: &str) -> Result<Vec<DtmfSymbol>, DtmfError> {
    s.chars().map(DtmfSymbol::from_char).collect()
}

pub fn symbols_to_string(symbols: &[DtmfSymbol]) -> String {
    symbols.iter().map(|s| s.to_char()).collect()
}

/// Tone duration (mark) and inter-tone gap (space).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub mark_ms: u32,
    pub space_ms: u32,
}

impl TimingConfig {
    pub fn new(mark_ms: u32, space_ms: u32) -> Self {
        Self { mark_ms, space_ms }
    }

    /// SIP in-call events: both set to 50 ms.
    pub fn sip_incall() -> Self {
        Self::new(50, 50)
    }

    /// Analogue landline sends: both set to 100 ms for reliability headroom.
    pub fn analogue_landline() -> Self {
        Self::new(100, 100)
    }

    pub fn meets_digital_minimum(&self) -> bool {
        self.mark_ms >= MIN_DIGITAL_MARK_SPACE_MS && self.space_ms >= MIN_DIGITAL_MARK_SPACE_MS
    }
}

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn silence(num_samples: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; num_samples],
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Debug export as 16-bit mono PCM WAV for manual listening.
    pub fn write_wav<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let data_len = (self.samples.len() * 2) as u32;
        w.write_all(b"RIFF")?;
        w.write_all(&(36 + data_len).to_le_bytes())?;
        w.write_all(b"WAVE")?;
        w.write_all(b"fmt ")?;
        w.write_all(&16u32.to_le_bytes())?;
        w.write_all(&1u16.to_le_bytes())?; // PCM
        w.write_all(&1u16.to_le_bytes())?; // mono
        w.write_all(&self.sample_rate.to_le_bytes())?;
        w.write_all(&(self.sample_rate * 2).to_le_bytes())?;
        w.write_all(&2u16.to_le_bytes())?;
        w.write_all(&16u16.to_le_bytes())?;
        w.write_all(b"data")?;
        w.write_all(&data_len.to_le_bytes())?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32) as i16;
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Line condition applied to in-band audio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    None,
    AdditiveGaussian { snr_db: f64 },
}

impl NoiseModel {
    pub fn is_none(&self) -> bool {
        matches!(self, NoiseModel::None)
    }
}

/// Digitally signaled DTMF: symbol values plus durations, no audio content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtmfEventSequence {
    pub events: Vec<(DtmfSymbol, u32)>,
}

impl DtmfEventSequence {
    pub fn from_symbols(symbols: &[DtmfSymbol], cfg: &TimingConfig) -> Self {
        Self {
            events: symbols.iter().map(|&s| (s, cfg.mark_ms)).collect(),
        }
    }

    pub fn symbols(&self) -> Vec<DtmfSymbol> {
        self.events.iter().map(|&(s, _)| s).collect()
    }
}

fn samples_for_ms(ms: u32, sample_rate: u32) -> usize {
    ((ms as u64 * sample_rate as u64 + 500) / 1_000) as usize
}

/// Renders a symbol string as audio: per digit, `mark_ms` of the two summed
/// sinusoids (amplitude 0.5 each) followed by `space_ms` of silence. The
/// trailing space after the last digit is included, so the total duration is
/// n x (mark + space).
pub fn synthesize(symbols: &[DtmfSymbol], cfg: &TimingConfig, sample_rate: u32) -> AudioBuffer {
    let mark_n = samples_for_ms(cfg.mark_ms, sample_rate);
    let space_n = samples_for_ms(cfg.space_ms, sample_rate);
    let mut samples = Vec::with_capacity(symbols.len() * (mark_n + space_n));
    for &sym in symbols {
        let w_lo = std::f64::consts::TAU * sym.low_hz() / sample_rate as f64;
        let w_hi = std::f64::consts::TAU * sym.high_hz() / sample_rate as f64;
        for n in 0..mark_n {
            let t = n as f64;
            samples.push((0.5 * (w_lo * t).sin() + 0.5 * (w_hi * t).sin()) as f32);
        }
        samples.extend(std::iter::repeat(0.0f32).take(space_n));
    }
    AudioBuffer {
        samples,
        sample_rate,
    }
}

/// Adds white gaussian noise at the configured SNR (relative to the nominal
/// two-tone power). Length and sample rate are unchanged.
pub fn apply_noise<R: Rng + ?Sized>(
    audio: &AudioBuffer,
    model: &NoiseModel,
    rng: &mut R,
) -> AudioBuffer {
    match model {
        NoiseModel::None => audio.clone(),
        NoiseModel::AdditiveGaussian { snr_db } => {
            let noise_power = REFERENCE_SIGNAL_POWER / 10f64.powf(snr_db / 10.0);
            if noise_power == 0.0 {
                return audio.clone();
            }
            let normal = Normal::new(0.0, noise_power.sqrt()).expect("valid sigma");
            let samples = audio
                .samples
                .iter()
                .map(|&s| s + normal.sample(rng) as f32)
                .collect();
            AudioBuffer {
                samples,
                sample_rate: audio.sample_rate,
            }
        }
    }
}

// Decoder tuning, detector-style: tone segments are located from the energy
// envelope, then scanned in fixed 12 ms frames. A frame is valid when the
// dominant tone in each frequency group clears the runner-up by 8 dB and
// both tones clear an absolute level gate sized just under the nominal
// per-tone power. A digit registers once MIN_VALID_FRAMES frames agree, so
// longer marks buy noise immunity and short marks lose digits first.
const ENVELOPE_BLOCK_MS: u32 = 5;
const SEGMENT_THRESHOLD_REL: f64 = 0.3;
const MIN_SEGMENT_BLOCKS: usize = 3;
const GAP_MIN_BLOCKS: usize = 2;
const DETECT_FRAME_MS: u32 = 12;
const MIN_VALID_FRAMES: usize = 2;
const DOMINANCE_RATIO: f64 = 6.309_573_444_801_932; // 8 dB
const MIN_SPECTRAL_CONCENTRATION: f64 = 0.25;
// Clean per-tone power is (amplitude/2)^2 = 0.0625 of N^2.
const MIN_TONE_POWER_NORM: f64 = 0.043;
const SILENCE_FLOOR: f64 = 1e-9;

fn goertzel_power(samples: &[f32], freq: f64, sample_rate: u32) -> f64 {
    let w = std::f64::consts::TAU * freq / sample_rate as f64;
    let coeff = 2.0 * w.cos();
    let mut s1 = 0.0f64;
    let mut s2 = 0.0f64;
    for &x in samples {
        let s0 = x as f64 + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    s1 * s1 + s2 * s2 - coeff * s1 * s2
}

fn max_and_second(values: &[f64; 4]) -> (usize, f64, f64) {
    let mut best = 0;
    let mut max = values[0];
    let mut second = f64::MIN;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > max {
            second = max;
            max = v;
            best = i;
        } else if v > second {
            second = v;
        }
    }
    (best, max, second)
}

fn classify_frame(frame: &[f32], sample_rate: u32) -> Option<DtmfSymbol> {
    let energy: f64 = frame.iter().map(|&x| (x as f64) * (x as f64)).sum();
    if energy < SILENCE_FLOOR {
        return None;
    }
    let mut low = [0.0; 4];
    let mut high = [0.0; 4];
    for i in 0..4 {
        low[i] = goertzel_power(frame, LOW_FREQS[i], sample_rate);
        high[i] = goertzel_power(frame, HIGH_FREQS[i], sample_rate);
    }
    let (row, low_max, low_second) = max_and_second(&low);
    let (col, high_max, high_second) = max_and_second(&high);
    if low_max < low_second * DOMINANCE_RATIO || high_max < high_second * DOMINANCE_RATIO {
        return None;
    }
    // Both tones must clear the absolute level gate.
    let n2 = (frame.len() as f64) * (frame.len() as f64);
    if low_max < MIN_TONE_POWER_NORM * n2 || high_max < MIN_TONE_POWER_NORM * n2 {
        return None;
    }
    // Reject frames whose energy is not concentrated in the winning pair;
    // broadband noise passes the dominance test occasionally but fails here.
    let concentration = (low_max + high_max) / (frame.len() as f64 * energy);
    if concentration < MIN_SPECTRAL_CONCENTRATION {
        return None;
    }
    Some(DtmfSymbol {
        row: row as u8,
        col: col as u8,
    })
}

/// Decodes a buffer into the symbol sequence it carries. Tone segments are
/// found from the short-term energy envelope; each segment's interior (edge
/// blocks trimmed) is scanned in fixed Goertzel frames and a symbol
/// registers when enough frames agree. Undecodable segments are skipped
/// rather than reported; the caller compares against its expectation.
pub fn decode(audio: &AudioBuffer, cfg: &TimingConfig) -> Vec<DtmfSymbol> {
    let rate = audio.sample_rate;
    let block_n = samples_for_ms(ENVELOPE_BLOCK_MS, rate).max(1);
    if audio.samples.is_empty() {
        return Vec::new();
    }
    let block_power: Vec<f64> = audio
        .samples
        .chunks(block_n)
        .map(|b| b.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / b.len() as f64)
        .collect();
    let peak = block_power.iter().cloned().fold(0.0f64, f64::max);
    if peak < SILENCE_FLOOR {
        return Vec::new();
    }
    let threshold = peak * SEGMENT_THRESHOLD_REL;

    // Maximal runs of loud blocks; quiet runs shorter than GAP_MIN_BLOCKS do
    // not split a tone.
    let mut segments: Vec<(usize, usize)> = Vec::new(); // block index ranges
    let mut start: Option<usize> = None;
    let mut quiet = 0usize;
    for (i, &p) in block_power.iter().enumerate() {
        if p >= threshold {
            if start.is_none() {
                start = Some(i);
            }
            quiet = 0;
        } else if let Some(s) = start {
            quiet += 1;
            if quiet >= GAP_MIN_BLOCKS {
                segments.push((s, i + 1 - quiet));
                start = None;
                quiet = 0;
            }
        }
    }
    if let Some(s) = start {
        segments.push((s, block_power.len() - quiet));
    }

    // Analysis never needs to look past two expected marks into a segment.
    let window_cap = (samples_for_ms(cfg.mark_ms, rate) * 2).max(16);
    let frame_n = samples_for_ms(DETECT_FRAME_MS, rate).max(8);
    let mut out = Vec::new();
    for (b0, b1) in segments {
        if b1 - b0 < MIN_SEGMENT_BLOCKS {
            continue;
        }
        // Trim one block per side to avoid straddle contamination.
        let s0 = (b0 + 1) * block_n;
        let s1 = ((b1 - 1) * block_n).min(audio.samples.len());
        if s1 <= s0 {
            continue;
        }
        let seg = &audio.samples[s0..s1.min(s0 + window_cap)];
        let mut votes: Vec<(DtmfSymbol, usize)> = Vec::new();
        for frame in seg.chunks_exact(frame_n) {
            if let Some(sym) = classify_frame(frame, rate) {
                match votes.iter_mut().find(|(v, _)| *v == sym) {
                    Some((_, n)) => *n += 1,
                    None => votes.push((sym, 1)),
                }
            }
        }
        votes.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
        match votes.as_slice() {
            [(sym, n)] if *n >= MIN_VALID_FRAMES => out.push(*sym),
            [(sym, n), (_, m), ..] if *n >= MIN_VALID_FRAMES && n > m => out.push(*sym),
            _ => {}
        }
    }
    out
}

pub fn decode_to_string(audio: &AudioBuffer, cfg: &TimingConfig) -> String {
    symbols_to_string(&decode(audio, cfg))
}

/// Transport path a DTMF sequence takes end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtmfPath {
    AnalogueInband,
    DigitalEvent,
    OutOfBand,
}

/// Calibrated per-path costs: a fixed overhead plus a per-digit cost that
/// for analogue paths comes on top of the mark + space signal time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCosts {
    pub fixed: SimDuration,
    pub per_digit: SimDuration,
}

/// Affine transmission-time model: fixed path overhead + n x per-digit cost.
/// Analogue in-band digits can never be faster than their own signal time.
pub fn transmission_time(
    num_digits: usize,
    path: DtmfPath,
    cfg: &TimingConfig,
    costs: &PathCosts,
) -> SimDuration {
    let per_digit = match path {
        DtmfPath::AnalogueInband => {
            SimDuration::from_ms((cfg.mark_ms + cfg.space_ms) as u64) + costs.per_digit
        }
        DtmfPath::DigitalEvent | DtmfPath::OutOfBand => costs.per_digit,
    };
    costs.fixed + per_digit * num_digits as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn syms(s: &str) -> Vec<DtmfSymbol> {
        symbols_from_str(s).unwrap()
    }

    #[test]
    fn sixteen_symbols_with_unique_frequency_pairs() {
        let all: Vec<_> = DtmfSymbol::all().collect();
        assert_eq!(all.len(), 16);
        let mut pairs: Vec<_> = all.iter().map(|s| (s.low_hz() as u32, s.high_hz() as u32)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs.len(), 16);
        assert_eq!(DtmfSymbol::from_char('5').unwrap().low_hz(), 770.0);
        assert_eq!(DtmfSymbol::from_char('5').unwrap().high_hz(), 1336.0);
        assert_eq!(DtmfSymbol::from_char('q'), Err(DtmfError::InvalidSymbol('q')));
    }

    #[test]
    fn synthesis_duration_arithmetic() {
        let buf = synthesize(&syms("5"), &TimingConfig::new(50, 50), 8000);
        assert_eq!(buf.samples.len(), 800);
        let buf = synthesize(&syms("1234"), &TimingConfig::new(50, 50), 8000);
        assert_eq!(buf.samples.len(), 3200);
        let buf = synthesize(&[], &TimingConfig::new(50, 50), 8000);
        assert!(buf.samples.is_empty());
    }

    #[test]
    fn synthesis_peak_amplitude_bounded() {
        let buf = synthesize(&syms("0123456789*#ABCD"), &TimingConfig::new(50, 50), 8000);
        assert!(buf.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn clean_round_trips() {
        let cfg = TimingConfig::new(50, 50);
        assert_eq!(decode_to_string(&synthesize(&syms("0391"), &cfg, 8000), &cfg), "0391");
        let cfg = TimingConfig::new(100, 100);
        assert_eq!(decode_to_string(&synthesize(&syms("7#2A"), &cfg, 8000), &cfg), "7#2A");
        // Repeated symbols must not merge.
        let cfg = TimingConfig::new(60, 40);
        assert_eq!(decode_to_string(&synthesize(&syms("1111"), &cfg, 8000), &cfg), "1111");
    }

    #[test]
    fn decode_silence_is_empty() {
        let cfg = TimingConfig::new(50, 50);
        assert!(decode(&AudioBuffer::silence(8000, 8000), &cfg).is_empty());
        assert!(decode(&AudioBuffer::silence(0, 8000), &cfg).is_empty());
    }

    #[test]
    fn noise_none_and_infinite_snr_are_identity() {
        let cfg = TimingConfig::new(50, 50);
        let buf = synthesize(&syms("42"), &cfg, 8000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_noise(&buf, &NoiseModel::None, &mut rng), buf);
        let inf = apply_noise(
            &buf,
            &NoiseModel::AdditiveGaussian { snr_db: f64::INFINITY },
            &mut rng,
        );
        assert_eq!(inf, buf);
    }

    #[test]
    fn noise_preserves_length_and_rate() {
        let cfg = TimingConfig::new(50, 50);
        let buf = synthesize(&syms("42"), &cfg, 8000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = apply_noise(&buf, &NoiseModel::AdditiveGaussian { snr_db: 10.0 }, &mut rng);
        assert_eq!(noisy.samples.len(), buf.samples.len());
        assert_eq!(noisy.sample_rate, buf.sample_rate);
        assert_ne!(noisy, buf);
    }

    #[test]
    fn event_sequence_transport_is_lossless() {
        let cfg = TimingConfig::sip_incall();
        let symbols = syms("048#B");
        let seq = DtmfEventSequence::from_symbols(&symbols, &cfg);
        assert_eq!(seq.symbols(), symbols);
        assert!(seq.events.iter().all(|&(_, d)| d == 50));
    }

    #[test]
    fn transmission_time_affine_and_ordered() {
        let digital = PathCosts {
            fixed: SimDuration::ZERO,
            per_digit: SimDuration::from_ms(75),
        };
        let analogue = PathCosts {
            fixed: SimDuration::ZERO,
            per_digit: SimDuration::from_ms(150),
        };
        let cfg = TimingConfig::new(100, 100);
        assert_eq!(
            transmission_time(0, DtmfPath::AnalogueInband, &cfg, &analogue),
            SimDuration::ZERO
        );
        // 4 analogue digits at 100/100 carry at least 800 ms of signal.
        let t4 = transmission_time(4, DtmfPath::AnalogueInband, &cfg, &analogue);
        assert!(t4 >= SimDuration::from_ms(800));
        // Exact affinity: consecutive differences are constant per path.
        for path in [DtmfPath::AnalogueInband, DtmfPath::DigitalEvent, DtmfPath::OutOfBand] {
            let costs = if path == DtmfPath::AnalogueInband { &analogue } else { &digital };
            let d1 = transmission_time(1, path, &cfg, costs) - transmission_time(0, path, &cfg, costs);
            for n in 2..=8 {
                let d = transmission_time(n, path, &cfg, costs)
                    - transmission_time(n - 1, path, &cfg, costs);
                assert_eq!(d, d1);
            }
        }
        let dig = transmission_time(4, DtmfPath::DigitalEvent, &cfg, &digital);
        assert!(dig < t4);
    }

    #[test]
    fn wav_export_header() {
        let cfg = TimingConfig::new(50, 50);
        let buf = synthesize(&syms("1"), &cfg, 8000);
        let mut out = Vec::new();
        buf.write_wav(&mut out).unwrap();
        assert_eq!(&out[0..4], b"RIFF");
        assert_eq!(&out[8..12], b"WAVE");
        assert_eq!(out.len(), 44 + buf.samples.len() * 2);
    }

    // Development aid: prints decode success rates over a grid of SNR and
    // mark values to choose the shipped noise calibration. Run with
    // `cargo test -p civ-core snr_survey -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn snr_survey() {
        let marks = [20u32, 30, 40, 50, 60, 80, 100];
        for snr in [3.0f64, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 12.0] {
            print!("snr {snr:>5.1}:");
            for &mark in &marks {
                let cfg = TimingConfig::new(mark, 150);
                let mut ok = 0;
                let trials = 100;
                for t in 0..trials {
                    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed + t);
                    let code = crate::domain::generate_challenge(4, &mut rng).unwrap();
                    let symbols = symbols_from_str(code.digits()).unwrap();
                    let clean = synthesize(&symbols, &cfg, 8000);
                    let noisy = apply_noise(&clean, &NoiseModel::AdditiveGaussian { snr_db: snr }, &mut rng);
                    if decode(&noisy, &cfg) == symbols {
                        ok += 1;
                    }
                }
                print!(" m{mark}:{ok:>3}");
            }
            println!();
        }
    }
}
