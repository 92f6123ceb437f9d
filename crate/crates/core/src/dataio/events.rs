//! Event-camera streams: CSV IO, sliding-window clips, stream-level voting and
//! a synthetic three-gesture generator.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, PatError, Result};
use crate::geometry::PointCloud;
use crate::model::{Label, Sample};
use crate::tensor::{Real, Tensor};

pub const SENSOR_SIZE: u16 = 128;
pub const EVENTS_HEADER: &str = "t_us,x,y,polarity";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> PatError {
    PatError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses event CSV text; `path` only labels errors.
pub fn parse_events(text: &str, path: &Path) -> Result<Vec<EventRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != EVENTS_HEADER {
        return Err(parse_err(path, 1, format!("header must be {EVENTS_HEADER:?}, got {header:?}")));
    }
    let mut out: Vec<EventRecord> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize, name: &str| -> Result<u64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err(path, line, format!("bad {name} {:?}", rec.get(i).unwrap_or(""))))
        };
        let (t, x, y, p) = (field(0, "t_us")?, field(1, "x")?, field(2, "y")?, field(3, "polarity")?);
        if x >= SENSOR_SIZE as u64 || y >= SENSOR_SIZE as u64 {
            return Err(PatError::Format(format!(
                "{}:{line}: coordinate ({x}, {y}) outside the {SENSOR_SIZE}×{SENSOR_SIZE} sensor",
                path.display()
            )));
        }
        if p > 1 {
            return Err(PatError::Format(format!("{}:{line}: polarity must be 0 or 1, got {p}", path.display())));
        }
        if let Some(prev) = out.last() {
            if t < prev.t {
                return Err(PatError::Format(format!(
                    "{}:{line}: timestamps not sorted ({t} after {})",
                    path.display(),
                    prev.t
                )));
            }
        }
        out.push(EventRecord {
            t,
            x: x as u16,
            y: y as u16,
            polarity: p as u8,
        });
    }
    Ok(out)
}

pub fn load_events(path: &Path) -> Result<Vec<EventRecord>> {
    parse_events(&fs::read_to_string(path)?, path)
}

pub fn format_events(events: &[EventRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVENTS_HEADER.split(',')).map_err(|e| PatError::Format(e.to_string()))?;
    for e in events {
        w.write_record([e.t.to_string(), e.x.to_string(), e.y.to_string(), e.polarity.to_string()])
            .map_err(|e| PatError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| PatError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

pub fn save_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    fs::write(path, format_events(events)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSpec {
    pub window_ms: f64,
    pub step_ms: f64,
    pub n_sample: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            window_ms: 750.0,
            step_ms: 100.0,
            n_sample: 256,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_ms > 0.0 && self.window_ms > 0.0 && self.step_ms <= self.window_ms) || self.n_sample == 0 {
            return Err(PatError::Config(format!("invalid clip spec {self:?}")));
        }
        Ok(())
    }
}

/// Stream span in microseconds: the half-open interval from the first event
/// to just past the last.
pub fn span_us(stream: &[EventRecord]) -> u64 {
    match (stream.first(), stream.last()) {
        (Some(a), Some(b)) => b.t - a.t + 1,
        _ => 0,
    }
}

/// Number of windows that fit: `⌊(span − window)/step⌋ + 1`, or 0.
pub fn clip_count(span_us: u64, spec: &ClipSpec) -> usize {
    let (span, w, s) = (span_us as f64, spec.window_ms * 1e3, spec.step_ms * 1e3);
    if span < w {
        0
    } else {
        ((span - w) / s).floor() as usize + 1
    }
}

fn scale_coord(v: u16) -> f64 {
    2.0 * v as f64 / (SENSOR_SIZE - 1) as f64 - 1.0
}

/// Cuts `stream` into clips of `spec.n_sample` points `(x, y, t_norm, polarity)`.
///
/// Window `k` covers `[k·step, k·step + window)` after the first event; only
/// windows lying fully inside the stream are used. `x` and `y` are scaled to
/// `[−1, 1]`, `t_norm` to `[0, 1)`. Points are drawn without replacement, or
/// with replacement when a window holds fewer events than `n_sample`.
/// Windows without any event yield no clip.
pub fn window_events<T: Real, R: Rng + ?Sized>(
    stream: &[EventRecord],
    spec: &ClipSpec,
    rng: &mut R,
) -> Result<Vec<PointCloud<T>>> {
    spec.validate()?;
    if stream.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(contract("event stream must be sorted by time"));
    }
    let Some(first) = stream.first() else {
        return Ok(Vec::new());
    };
    let (w_us, s_us) = (spec.window_ms * 1e3, spec.step_ms * 1e3);
    let mut clips = Vec::new();
    for k in 0..clip_count(span_us(stream), spec) {
        let start = first.t as f64 + k as f64 * s_us;
        let lo = stream.partition_point(|e| (e.t as f64) < start);
        let hi = stream.partition_point(|e| (e.t as f64) < start + w_us);
        let events = &stream[lo..hi];
        if events.is_empty() {
            continue;
        }
        let picks: Vec<usize> = if events.len() >= spec.n_sample {
            let mut p = sample(rng, events.len(), spec.n_sample).into_vec();
            p.sort_unstable();
            p
        } else {
            (0..spec.n_sample).map(|_| rng.random_range(0..events.len())).collect()
        };
        let mut data = Vec::with_capacity(4 * spec.n_sample);
        for i in picks {
            let e = &events[i];
            let t_norm = ((e.t as f64 - start) / w_us).clamp(0.0, 1.0 - f64::EPSILON);
            data.extend([scale_coord(e.x), scale_coord(e.y), t_norm, e.polarity as f64].map(T::of));
        }
        clips.push(PointCloud::new(Tensor::new(&[spec.n_sample, 4], data)?)?);
    }
    Ok(clips)
}

/// Most frequent label; ties go to the lowest class id.
pub fn system_prediction(clip_predictions: &[usize]) -> Result<usize> {
    let max = *clip_predictions
        .iter()
        .max()
        .ok_or_else(|| contract("system prediction needs at least one clip"))?;
    let mut counts = vec![0usize; max + 1];
    for &p in clip_predictions {
        counts[p] += 1;
    }
    let best = *counts.iter().max().unwrap();
    Ok(counts.iter().position(|&c| c == best).unwrap())
}

/// Windows every labelled stream into training samples. The second vector
/// maps each clip back to the stream it came from.
pub fn clip_dataset<T: Real, R: Rng + ?Sized>(
    streams: &[(Vec<EventRecord>, usize)],
    spec: &ClipSpec,
    rng: &mut R,
) -> Result<(Vec<Sample<T>>, Vec<usize>)> {
    let (mut samples, mut owner) = (Vec::new(), Vec::new());
    for (i, (events, label)) in streams.iter().enumerate() {
        for cloud in window_events(events, spec, rng)? {
            samples.push(Sample { cloud, label: Label::Class(*label) });
            owner.push(i);
        }
    }
    Ok((samples, owner))
}

/// Per-stream votes over clip predictions. Streams that produced no clip get
/// `None`.
pub fn stream_predictions(clip_predictions: &[usize], stream_of: &[usize], n_streams: usize) -> Result<Vec<Option<usize>>> {
    if clip_predictions.len() != stream_of.len() {
        return Err(contract("one stream index per clip prediction"));
    }
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); n_streams];
    for (&p, &s) in clip_predictions.iter().zip(stream_of) {
        per.get_mut(s).ok_or_else(|| contract(format!("stream index {s} out of range")))?.push(p);
    }
    per.iter()
        .map(|v| if v.is_empty() { Ok(None) } else { system_prediction(v).map(Some) })
        .collect()
}

/// Fraction of streams whose vote matches `truth`; clipless streams count as misses.
pub fn stream_accuracy(clip_predictions: &[usize], stream_of: &[usize], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(contract("stream accuracy needs at least one stream"));
    }
    let votes = stream_predictions(clip_predictions, stream_of, truth.len())?;
    let hits = votes.iter().zip(truth).filter(|(v, t)| **v == Some(**t)).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gesture {
    HorizontalWave,
    VerticalWave,
    Circle,
}

impl Gesture {
    pub const ALL: [Gesture; 3] = [Gesture::HorizontalWave, Gesture::VerticalWave, Gesture::Circle];

    pub fn name(&self) -> &'static str {
        match self {
            Gesture::HorizontalWave => "horizontal_wave",
            Gesture::VerticalWave => "vertical_wave",
            Gesture::Circle => "circle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GestureSpec {
    pub duration_ms: f64,
    /// Mean events per millisecond.
    pub rate_per_ms: f64,
    /// Fraction of uniformly scattered background events.
    pub noise_frac: f64,
}

impl Default for GestureSpec {
    fn default() -> Self {
        Self {
            duration_ms: 1500.0,
            rate_per_ms: 8.0,
            noise_frac: 0.1,
        }
    }
}

/// One synthetic stream: a blob (the "hand") moving left-right, up-down or
/// around a circle, with randomized centre, amplitude, frequency and phase.
/// Polarity follows the sign of the motion along its main axis.
pub fn gesture_stream<R: Rng + ?Sized>(gesture: Gesture, spec: &GestureSpec, rng: &mut R) -> Vec<EventRecord> {
    let n = (spec.duration_ms * spec.rate_per_ms).round() as usize;
    let dur_us = (spec.duration_ms * 1e3) as u64;
    let mut times: Vec<u64> = (0..n).map(|_| rng.random_range(0..dur_us)).collect();
    times.sort_unstable();
    let cx = 64.0 + rng.random_range(-10.0..10.0);
    let cy = 64.0 + rng.random_range(-10.0..10.0);
    let amp = rng.random_range(28.0..42.0);
    let freq_hz = rng.random_range(1.0..2.0);
    let phase = rng.random_range(0.0..TAU);
    let spread = Normal::new(0.0, 4.0).unwrap();
    let clamp = |v: f64| v.round().clamp(0.0, (SENSOR_SIZE - 1) as f64) as u16;
    times
        .into_iter()
        .map(|t| {
            if rng.random::<f64>() < spec.noise_frac {
                return EventRecord {
                    t,
                    x: rng.random_range(0..SENSOR_SIZE),
                    y: rng.random_range(0..SENSOR_SIZE),
                    polarity: rng.random_range(0..2),
                };
            }
            let a = TAU * freq_hz * t as f64 / 1e6 + phase;
            let (px, py, velocity) = match gesture {
                Gesture::HorizontalWave => (cx + amp * a.sin(), cy, a.cos()),
                Gesture::VerticalWave => (cx, cy + amp * a.sin(), a.cos()),
                Gesture::Circle => (cx + amp * a.cos(), cy + amp * a.sin(), -a.sin()),
            };
            EventRecord {
                t,
                x: clamp(px + spread.sample(rng)),
                y: clamp(py + spread.sample(rng)),
                polarity: (velocity >= 0.0) as u8,
            }
        })
        .collect()
}

/// Balanced labelled streams; stream `i` shows gesture `i mod 3`.
pub fn gen_gestures<R: Rng + ?Sized>(n_per_class: usize, spec: &GestureSpec, rng: &mut R) -> Vec<(Vec<EventRecord>, usize)> {
    (0..3 * n_per_class)
        .map(|i| (gesture_stream(Gesture::ALL[i % 3], spec, rng), i % 3))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn parse(text: &str) -> Result<Vec<EventRecord>> {
        parse_events(text, Path::new("events.csv"))
    }

    /// One event every millisecond, closing with one at the last microsecond
    /// so the stream spans exactly `[0, ms)`.
    fn uniform_stream(ms: u64) -> Vec<EventRecord> {
        let ev = |t: u64, i: u64| EventRecord {
            t,
            x: (i % 128) as u16,
            y: 5,
            polarity: (i % 2) as u8,
        };
        let mut s: Vec<_> = (0..ms).map(|i| ev(i * 1000, i)).collect();
        s.push(ev(ms * 1000 - 1, ms));
        s
    }

    #[test]
    fn csv_examples() {
        let one = parse("t_us,x,y,polarity\n0,5,5,1\n").unwrap();
        assert_eq!(one, vec![EventRecord { t: 0, x: 5, y: 5, polarity: 1 }]);
        let e = parse("t_us,x,y,polarity\n10,1,1,0\n5,1,1,0\n").unwrap_err().to_string();
        assert!(e.contains(":3:") && e.contains("sorted"), "{e}");
        let e = parse("t_us,x,y,polarity\n0,1,1,0\n1,128,1,0\n").unwrap_err().to_string();
        assert!(e.contains(":3:"), "{e}");
        assert!(parse("t_us,x,y,polarity\n0,1,1,2\n").is_err());
        assert!(parse("t,x,y,p\n0,1,1,0\n").is_err());
        assert!(parse("t_us,x,y,polarity\n0,1,one,0\n").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let events = gesture_stream(Gesture::Circle, &GestureSpec { duration_ms: 1250.0, ..Default::default() }, &mut rng(1));
        assert_eq!(events.len(), 10_000);
        let text = format_events(&events).unwrap();
        assert_eq!(parse(&text).unwrap(), events);
    }

    #[test]
    fn window_counts() {
        let spec = ClipSpec::default();
        let stream = uniform_stream(1050);
        let clips: Vec<PointCloud<f32>> = window_events(&stream, &spec, &mut rng(2)).unwrap();
        assert_eq!(clips.len(), 4);
        assert!(window_events::<f32, _>(&uniform_stream(700), &spec, &mut rng(2)).unwrap().is_empty());
        assert!(window_events::<f32, _>(&[], &spec, &mut rng(2)).unwrap().is_empty());
        let tiling = ClipSpec { step_ms: 750.0, ..spec };
        assert_eq!(window_events::<f32, _>(&uniform_stream(3000), &tiling, &mut rng(2)).unwrap().len(), 4);
        for ms in [750u64, 751, 849, 850, 851, 2000] {
            let span = span_us(&uniform_stream(ms));
            let want = ((span as f64 - 750e3) / 100e3).floor() as usize + 1;
            assert_eq!(clip_count(span, &spec), want);
        }
    }

    #[test]
    fn clip_contents() {
        let spec = ClipSpec { n_sample: 1024, ..ClipSpec::default() };
        let stream = uniform_stream(1050);
        let clips: Vec<PointCloud<f64>> = window_events(&stream, &spec, &mut rng(3)).unwrap();
        for (k, c) in clips.iter().enumerate() {
            assert_eq!((c.len(), c.channels()), (1024, 4));
            for i in 0..c.len() {
                let r = c.points().row(i);
                assert!(r[0] >= -1.0 && r[0] <= 1.0 && r[1] >= -1.0 && r[1] <= 1.0);
                assert!(r[2] >= 0.0 && r[2] < 1.0);
                assert!(r[3] == 0.0 || r[3] == 1.0);
            }
            // 750 events per window, fewer than 1024: drawn with replacement from the right window.
            let t_first = c.points().row(0)[2];
            assert!(t_first >= 0.0, "clip {k}");
        }
        let dense = ClipSpec { n_sample: 100, ..ClipSpec::default() };
        let clips: Vec<PointCloud<f64>> = window_events(&stream, &dense, &mut rng(4)).unwrap();
        for c in &clips {
            let ts: Vec<f64> = (0..100).map(|i| c.points().row(i)[2]).collect();
            assert!(ts.windows(2).all(|w| w[0] < w[1]), "without replacement, distinct and ordered");
        }
    }

    #[test]
    fn voting() {
        assert_eq!(system_prediction(&[3, 3, 1]).unwrap(), 3);
        assert_eq!(system_prediction(&[1, 2]).unwrap(), 1);
        assert_eq!(system_prediction(&[0]).unwrap(), 0);
        assert_eq!(system_prediction(&[2, 0, 2, 0, 1]).unwrap(), 0);
        assert_eq!(system_prediction(&[4, 4, 2, 2, 2, 4, 1]).unwrap(), 2);
        assert!(system_prediction(&[]).is_err());
    }

    #[test]
    fn gestures_are_balanced_and_sorted() {
        let data = gen_gestures(2, &GestureSpec::default(), &mut rng(5));
        assert_eq!(data.len(), 6);
        for (s, label) in &data {
            assert!(s.windows(2).all(|w| w[0].t <= w[1].t));
            assert!(*label < 3);
        }
    }

    #[test]
    fn stream_votes_and_clip_datasets() {
        let preds = [1, 1, 0, 2, 2, 2, 0];
        let owner = [0, 0, 0, 1, 1, 2, 2];
        assert_eq!(stream_predictions(&preds, &owner, 4).unwrap(), vec![Some(1), Some(2), Some(0), None]);
        assert_eq!(stream_accuracy(&preds, &owner, &[1, 2, 2, 0]).unwrap(), 0.5);
        assert!(stream_accuracy(&preds, &owner[1..], &[1, 2, 2]).is_err());
        assert!(stream_predictions(&preds, &owner, 2).is_err());

        let spec = GestureSpec { duration_ms: 1000.0, ..GestureSpec::default() };
        let streams = gen_gestures(1, &spec, &mut rng(6));
        let clip = ClipSpec { n_sample: 64, ..ClipSpec::default() };
        let (samples, owner) = clip_dataset::<f32, _>(&streams, &clip, &mut rng(7)).unwrap();
        assert_eq!(samples.len(), owner.len());
        for (s, &o) in samples.iter().zip(&owner) {
            assert_eq!(s.label, Label::Class(streams[o].1));
            assert_eq!(s.cloud.len(), 64);
        }
        let per_stream: Vec<usize> = (0..3).map(|i| owner.iter().filter(|&&o| o == i).count()).collect();
        for (i, n) in per_stream.iter().enumerate() {
            assert_eq!(*n, clip_count(span_us(&streams[i].0), &clip), "stream {i}");
        }
    }
}
