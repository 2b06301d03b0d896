//! Client-side performance engine.
//!
//! Input stems arrive in host-sized blocks at the playback head. Each time
//! the head crosses a step boundary the engine emits the mixture of the
//! non-predicted stems for the step just played; predictions come back
//! with the step id they answer and are written, with a crossfaded prelude,
//! at the write interval of the boundary that triggered them.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::stems::{Stem, STEM_COUNT};
use crate::window::{SampleSpan, WindowConfig};

/// Sorted, disjoint, half-open sample ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionSet {
    spans: Vec<(i64, i64)>,
}

impl RegionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.spans.clear();
    }

    pub fn spans(&self) -> impl Iterator<Item = SampleSpan> + '_ {
        self.spans.iter().map(|&(a, b)| SampleSpan::new(a, b))
    }

    pub fn insert(&mut self, span: SampleSpan) {
        if span.is_empty() {
            return;
        }
        let (mut lo, mut hi) = (span.start, span.end);
        let mut out = Vec::with_capacity(self.spans.len() + 1);
        let mut placed = false;
        for &(a, b) in &self.spans {
            if b < lo {
                out.push((a, b));
            } else if a > hi {
                if !placed {
                    out.push((lo, hi));
                    placed = true;
                }
                out.push((a, b));
            } else {
                lo = lo.min(a);
                hi = hi.max(b);
            }
        }
        if !placed {
            out.push((lo, hi));
        }
        self.spans = out;
    }

    pub fn covers(&self, span: SampleSpan) -> bool {
        self.first_gap(span).is_none()
    }

    pub fn overlaps(&self, span: SampleSpan) -> bool {
        self.spans
            .iter()
            .any(|&(a, b)| a < span.end && span.start < b)
    }

    /// First sub-range of `span` not covered.
    pub fn first_gap(&self, span: SampleSpan) -> Option<SampleSpan> {
        let mut pos = span.start;
        for &(a, b) in &self.spans {
            if b <= pos {
                continue;
            }
            if a > pos {
                return Some(SampleSpan::new(pos, a.min(span.end))).filter(|s| !s.is_empty());
            }
            pos = b;
            if pos >= span.end {
                return None;
            }
        }
        (pos < span.end).then(|| SampleSpan::new(pos, span.end))
    }

    /// Every uncovered piece of `span`.
    pub fn gaps(&self, span: SampleSpan) -> Vec<SampleSpan> {
        let mut out = Vec::new();
        let mut rest = span;
        while let Some(g) = self.first_gap(rest) {
            out.push(g);
            rest = SampleSpan::new(g.end, span.end);
            if rest.is_empty() {
                break;
            }
        }
        out
    }

    /// Forget everything before `pos`.
    pub fn trim_before(&mut self, pos: i64) {
        self.spans.retain(|&(_, b)| b > pos);
        if let Some(first) = self.spans.first_mut() {
            first.0 = first.0.max(pos);
        }
    }
}

/// Per-stem audio indexed by absolute sample position from the start of
/// the session.
#[derive(Debug, Clone, Default)]
pub struct StepBuffer {
    stems: [Vec<f32>; STEM_COUNT],
    committed: [RegionSet; STEM_COUNT],
}

impl StepBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stem(&self, stem: Stem) -> &[f32] {
        &self.stems[stem.index()]
    }

    pub fn committed(&self, stem: Stem) -> &RegionSet {
        &self.committed[stem.index()]
    }

    /// Appends input samples at `pos`; earlier gaps are zero-filled.
    fn put(&mut self, stem: Stem, pos: usize, data: &[f32]) {
        let buf = &mut self.stems[stem.index()];
        if buf.len() < pos + data.len() {
            buf.resize(pos + data.len(), 0.0);
        }
        buf[pos..pos + data.len()].copy_from_slice(data);
    }

    fn get(&self, stem: Stem, pos: i64) -> f32 {
        if pos < 0 {
            return 0.0;
        }
        self.stems[stem.index()].get(pos as usize).copied().unwrap_or(0.0)
    }

    pub fn read(&self, stem: Stem, span: SampleSpan) -> Vec<f32> {
        (span.start..span.end).map(|p| self.get(stem, p)).collect()
    }

    fn clear_stem(&mut self, stem: Stem) {
        self.stems[stem.index()].clear();
        self.committed[stem.index()].clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Context for the boundary `curr`: the mixture over
    /// `[curr - step, curr)`.
    SendContext {
        step_id: u32,
        curr: i64,
        cfg: WindowConfig,
        stem: Stem,
        audio: Vec<f32>,
    },
    /// A new configuration went live at a boundary; it precedes the
    /// context it applies to.
    ConfigChanged { cfg: WindowConfig, stem: Stem },
    /// Playback reached predicted-stem samples with nothing committed.
    Underrun { region: SampleSpan },
    /// Playback passed the end of a step's write interval before its
    /// prediction arrived.
    Expired { step_id: u32, curr: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommitError {
    #[error("step {step_id}: prediction has {got} samples, expected {expected}")]
    LengthMismatch {
        step_id: u32,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropKind {
    /// Older than a step already committed.
    Stale,
    /// Already committed.
    Duplicate,
    /// Never requested, or given up on.
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommitOutcome {
    Committed {
        step_id: u32,
        curr: i64,
        write: SampleSpan,
        /// Part of the write interval had already been played.
        late: bool,
        /// Part of the write interval was played with nothing committed.
        underrun: bool,
    },
    Dropped { step_id: u32, kind: DropKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingStep {
    pub curr: i64,
    pub cfg: WindowConfig,
    pub stem: Stem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FileDriven,
    Live,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    cfg: WindowConfig,
    staged_cfg: Option<WindowConfig>,
    predict: Stem,
    staged_stem: Option<Stem>,
    mode: Mode,
    buffer: StepBuffer,
    cursor: i64,
    next_boundary: i64,
    last_boundary: Option<i64>,
    warmup_end: i64,
    next_step_id: u32,
    pending: BTreeMap<u32, PendingStep>,
    committed_ids: BTreeMap<u32, i64>,
    last_committed: Option<u32>,
    played_gaps: RegionSet,
    in_gap: bool,
    underruns: u64,
}

impl SessionState {
    pub fn new(cfg: WindowConfig, predict: Stem, mode: Mode) -> Self {
        Self {
            cfg,
            staged_cfg: None,
            predict,
            staged_stem: None,
            mode,
            buffer: StepBuffer::new(),
            cursor: 0,
            next_boundary: 0,
            last_boundary: None,
            warmup_end: warmup(&cfg, 0),
            next_step_id: 0,
            pending: BTreeMap::new(),
            committed_ids: BTreeMap::new(),
            last_committed: None,
            played_gaps: RegionSet::new(),
            in_gap: false,
            underruns: 0,
        }
    }

    pub fn cfg(&self) -> &WindowConfig {
        &self.cfg
    }

    pub fn staged_cfg(&self) -> Option<&WindowConfig> {
        self.staged_cfg.as_ref()
    }

    pub fn predicted(&self) -> Stem {
        self.predict
    }

    pub fn staged_stem(&self) -> Option<Stem> {
        self.staged_stem
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn cursor(&self) -> i64 {
        self.cursor
    }

    pub fn next_boundary(&self) -> i64 {
        self.next_boundary
    }

    pub fn warmup_end(&self) -> i64 {
        self.warmup_end
    }

    pub fn underruns(&self) -> u64 {
        self.underruns
    }

    pub fn buffer(&self) -> &StepBuffer {
        &self.buffer
    }

    pub fn pending(&self) -> &BTreeMap<u32, PendingStep> {
        &self.pending
    }

    /// Samples of predicted-stem playback that had nothing committed.
    pub fn played_gaps(&self) -> &RegionSet {
        &self.played_gaps
    }

    /// Takes effect at the next boundary.
    pub fn stage_config(&mut self, cfg: WindowConfig) {
        assert_eq!(
            cfg.window_samples(),
            self.cfg.window_samples(),
            "the receptive field is fixed per session"
        );
        self.staged_cfg = Some(cfg);
    }

    pub fn stage_stem(&mut self, stem: Stem) {
        self.staged_stem = Some(stem);
    }

    /// Processes one host block, one slice per stem (the predicted stem's
    /// slice is ignored), at the playback head.
    pub fn on_audio_block(&mut self, block: &[&[f32]; STEM_COUNT]) -> Vec<Action> {
        let n = block.iter().map(|b| b.len()).max().unwrap_or(0);
        let start = self.cursor;
        let end = start + n as i64;
        let mut actions = Vec::new();
        let mut padded = vec![0.0f32; n];
        for stem in Stem::ALL {
            if stem == self.predict {
                continue;
            }
            let src = block[stem.index()];
            padded[..src.len()].copy_from_slice(src);
            padded[src.len()..].fill(0.0);
            self.buffer.put(stem, start as usize, &padded);
        }

        let play_from = start.max(self.warmup_end);
        let mut gap_here = false;
        if play_from < end {
            let play = SampleSpan::new(play_from, end);
            for g in self.buffer.committed(self.predict).gaps(play) {
                gap_here = true;
                self.played_gaps.insert(g);
                actions.push(Action::Underrun { region: g });
            }
        }
        if gap_here && !self.in_gap {
            self.underruns += 1;
        }
        self.in_gap = gap_here;

        self.cursor = end;
        while self.next_boundary <= end {
            let curr = self.next_boundary;
            actions.extend(self.boundary(curr));
        }
        actions.extend(self.expire());
        actions
    }

    /// Forces a cycle at the most recent boundary without moving the
    /// playback head.
    pub fn force_send(&mut self) -> Vec<Action> {
        match self.last_boundary {
            Some(curr) => vec![self.send(curr)],
            None => {
                let curr = self.next_boundary;
                self.boundary(curr)
            }
        }
    }

    fn boundary(&mut self, curr: i64) -> Vec<Action> {
        let mut actions = Vec::new();
        let swapped_cfg = self.staged_cfg.take();
        let swapped_stem = self.staged_stem.take();
        if let Some(cfg) = swapped_cfg {
            self.cfg = cfg;
        }
        if let Some(stem) = swapped_stem {
            if stem != self.predict {
                self.buffer.clear_stem(stem);
                self.predict = stem;
                self.committed_ids.clear();
                self.pending.clear();
                self.warmup_end = warmup(&self.cfg, curr);
            }
        }
        if swapped_cfg.is_some() || swapped_stem.is_some() {
            actions.push(Action::ConfigChanged {
                cfg: self.cfg,
                stem: self.predict,
            });
        }
        actions.push(self.send(curr));
        self.last_boundary = Some(curr);
        self.next_boundary = curr + self.cfg.step_samples() as i64;
        actions
    }

    fn send(&mut self, curr: i64) -> Action {
        let step_id = self.next_step_id;
        self.next_step_id += 1;
        self.pending.insert(
            step_id,
            PendingStep {
                curr,
                cfg: self.cfg,
                stem: self.predict,
            },
        );
        Action::SendContext {
            step_id,
            curr,
            cfg: self.cfg,
            stem: self.predict,
            audio: self.mixdown(self.cfg.context_read_interval(curr)),
        }
    }

    fn expire(&mut self) -> Vec<Action> {
        let cursor = self.cursor;
        let gone: Vec<u32> = self
            .pending
            .iter()
            .filter(|(_, p)| p.cfg.write_interval(p.curr).end <= cursor)
            .map(|(&id, _)| id)
            .collect();
        gone.into_iter()
            .map(|id| {
                let p = self.pending.remove(&id).expect("listed above");
                Action::Expired {
                    step_id: id,
                    curr: p.curr,
                }
            })
            .collect()
    }

    /// Sum of the non-predicted stems over `interval`, clamped to
    /// `[-1, 1]`. Positions before the session start read as zero.
    pub fn mixdown(&self, interval: SampleSpan) -> Vec<f32> {
        let mut out = vec![0.0f32; interval.len()];
        for stem in Stem::ALL {
            if stem == self.predict {
                continue;
            }
            for (o, p) in out.iter_mut().zip(interval.start..interval.end) {
                *o += self.buffer.get(stem, p);
            }
        }
        for v in &mut out {
            *v = v.clamp(-1.0, 1.0);
        }
        out
    }

    /// Writes a prediction at the write interval of the boundary that
    /// requested it; the prelude crossfades into what is already there.
    pub fn commit_prediction(&mut self, step_id: u32, audio: &[f32]) -> Result<CommitOutcome, CommitError> {
        let Some(p) = self.pending.get(&step_id).copied() else {
            let kind = if self.committed_ids.contains_key(&step_id) {
                DropKind::Duplicate
            } else if self.last_committed.is_some_and(|last| step_id < last) {
                DropKind::Stale
            } else {
                DropKind::Unknown
            };
            return Ok(CommitOutcome::Dropped { step_id, kind });
        };
        if self.last_committed.is_some_and(|last| step_id < last) {
            self.pending.remove(&step_id);
            return Ok(CommitOutcome::Dropped {
                step_id,
                kind: DropKind::Stale,
            });
        }
        let expected = p.cfg.response_samples();
        if audio.len() != expected {
            return Err(CommitError::LengthMismatch {
                step_id,
                expected,
                got: audio.len(),
            });
        }
        self.pending.remove(&step_id);
        let fade = p.cfg.fade();
        let write = p.cfg.write_interval(p.curr);
        let stem = p.stem;
        let prelude_start = write.start - fade as i64;
        let mut mixed = Vec::with_capacity(audio.len());
        for (i, &new) in audio[..fade].iter().enumerate() {
            let alpha = (i + 1) as f32 / fade as f32;
            let old = self.buffer.get(stem, prelude_start + i as i64);
            mixed.push(new * alpha + old * (1.0 - alpha));
        }
        mixed.extend_from_slice(&audio[fade..]);
        let skip = (-prelude_start).max(0) as usize;
        if skip < mixed.len() {
            self.buffer.put(stem, (prelude_start + skip as i64) as usize, &mixed[skip..]);
        }
        self.buffer.committed[stem.index()].insert(SampleSpan::new(write.start.max(0), write.end));
        self.committed_ids.insert(step_id, p.curr);
        self.last_committed = Some(self.last_committed.map_or(step_id, |l| l.max(step_id)));
        Ok(CommitOutcome::Committed {
            step_id,
            curr: p.curr,
            write,
            late: self.cursor > write.start,
            underrun: self.played_gaps.overlaps(write),
        })
    }

    /// Drops predictions, pending steps and underrun history, and restarts
    /// the warm-up from the next boundary. Inputs are kept.
    pub fn clean(&mut self) {
        self.buffer.clear_stem(self.predict);
        self.pending.clear();
        self.committed_ids.clear();
        self.played_gaps.clear();
        self.in_gap = false;
        self.warmup_end = warmup(&self.cfg, self.next_boundary);
    }
}

/// End of the structurally silent lead-in for boundaries starting at
/// `from`.
fn warmup(cfg: &WindowConfig, from: i64) -> i64 {
    from + (i64::from(cfg.lookahead()) + 1) * cfg.step_samples() as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::StepRatio;
    use proptest::prelude::*;

    fn cfg() -> WindowConfig {
        WindowConfig::default()
    }

    fn block<'a>(data: &'a [Vec<f32>; 4], at: usize, n: usize) -> [&'a [f32]; 4] {
        std::array::from_fn(|i| &data[i][at..at + n])
    }

    fn sends(actions: &[Action]) -> Vec<i64> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::SendContext { curr, .. } => Some(*curr),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn boundaries_at_multiples_of_the_step() {
        let mut s = SessionState::new(cfg(), Stem::Guitar, Mode::FileDriven);
        let data: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; 200_000]);
        let mut fired = Vec::new();
        let mut pos = 0;
        while pos + 64 <= 200_000 {
            fired.extend(sends(&s.on_audio_block(&block(&data, pos, 64))));
            pos += 64;
        }
        assert_eq!(fired, vec![0, 66_150, 132_300, 198_450]);
        assert!((64.0 / 44_100.0 * 1000.0 - 1.45f64).abs() < 0.01);
    }

    #[test]
    fn mixdown_sums_and_clamps() {
        let mut s = SessionState::new(cfg(), Stem::Piano, Mode::FileDriven);
        let mut data: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; 1000]);
        let span = SampleSpan::new(0, 1000);
        s.on_audio_block(&block(&data, 0, 1000));
        assert!(s.mixdown(span).iter().all(|&v| v == 0.0));

        let mut s = SessionState::new(cfg(), Stem::Piano, Mode::FileDriven);
        data[1] = (0..1000).map(|i| (i as f32 * 0.01).sin() * 0.7).collect();
        data[3] = vec![0.9; 1000]; // predicted stem, ignored
        s.on_audio_block(&block(&data, 0, 1000));
        assert_eq!(s.mixdown(span), data[1]);

        let mut s = SessionState::new(cfg(), Stem::Piano, Mode::FileDriven);
        data[0] = vec![0.5; 1000];
        data[1] = vec![0.5; 1000];
        data[2] = vec![0.0; 1000];
        s.on_audio_block(&block(&data, 0, 1000));
        assert!(s.mixdown(span).iter().all(|&v| v == 1.0));
        data[2] = vec![0.5; 1000];
        let mut s = SessionState::new(cfg(), Stem::Piano, Mode::FileDriven);
        s.on_audio_block(&block(&data, 0, 1000));
        assert!(s.mixdown(span).iter().all(|&v| v == 1.0));
        // before the session start reads as silence
        assert!(s.mixdown(SampleSpan::new(-10, 0)).iter().all(|&v| v == 0.0));
    }

    fn small_cfg(fade: usize) -> WindowConfig {
        WindowConfig::new(64, 64, 4, StepRatio::new(16, 64).unwrap(), 1, fade).unwrap()
    }

    fn commit_all(s: &mut SessionState, id: u32, audio: &[f32]) -> CommitOutcome {
        s.commit_prediction(id, audio).unwrap()
    }

    #[test]
    fn crossfade_over_the_prelude() {
        let c = small_cfg(4);
        let mut s = SessionState::new(c, Stem::Bass, Mode::FileDriven);
        let zeros: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; 64]);
        // boundaries at 0 and 16 -> writes at [16, 32) and [32, 48)
        s.on_audio_block(&block(&zeros, 0, 16));
        let mut first = vec![1.0f32; 20];
        first[..4].fill(1.0);
        commit_all(&mut s, 0, &first);
        commit_all(&mut s, 1, &[0.0; 20]);
        let out = &s.buffer().stem(Stem::Bass)[28..32];
        assert_eq!(out, &[0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn zero_fade_is_a_pure_write() {
        let c = small_cfg(0);
        let mut s = SessionState::new(c, Stem::Bass, Mode::FileDriven);
        let zeros: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; 64]);
        s.on_audio_block(&block(&zeros, 0, 16));
        commit_all(&mut s, 0, &[1.0; 16]);
        commit_all(&mut s, 1, &[2.0; 16]);
        let b = s.buffer().stem(Stem::Bass);
        assert!(b[16..32].iter().all(|&v| v == 1.0));
        assert!(b[32..48].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn duplicate_stale_and_bad_length() {
        let c = small_cfg(4);
        let mut s = SessionState::new(c, Stem::Bass, Mode::FileDriven);
        let zeros: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; 64]);
        s.on_audio_block(&block(&zeros, 0, 17));
        assert_eq!(s.pending().len(), 2);
        assert!(matches!(
            s.commit_prediction(1, &[0.0; 5]),
            Err(CommitError::LengthMismatch { expected: 20, .. })
        ));
        assert!(matches!(commit_all(&mut s, 1, &[0.5; 20]), CommitOutcome::Committed { .. }));
        assert_eq!(
            commit_all(&mut s, 1, &[0.7; 20]),
            CommitOutcome::Dropped {
                step_id: 1,
                kind: DropKind::Duplicate
            }
        );
        assert_eq!(
            commit_all(&mut s, 0, &[0.7; 20]),
            CommitOutcome::Dropped {
                step_id: 0,
                kind: DropKind::Stale
            }
        );
        assert!(s.buffer().stem(Stem::Bass)[32..48].iter().all(|&v| v == 0.5));
        assert_eq!(
            commit_all(&mut s, 99, &[0.7; 20]),
            CommitOutcome::Dropped {
                step_id: 99,
                kind: DropKind::Unknown
            }
        );
    }

    #[test]
    fn underrun_when_prediction_is_late() {
        let c = small_cfg(0);
        let mut s = SessionState::new(c, Stem::Bass, Mode::FileDriven);
        let zeros: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; 200]);
        // warm-up covers [0, 32); step 0 (written at [16, 32)) is never needed
        let mut under = Vec::new();
        let mut expired = Vec::new();
        for pos in (0..64).step_by(4) {
            for a in s.on_audio_block(&block(&zeros, pos, 4)) {
                match a {
                    Action::Underrun { region } => under.push(region),
                    Action::Expired { step_id, .. } => expired.push(step_id),
                    _ => {}
                }
            }
            if pos == 12 {
                // step 1 (boundary 16) lands before playback reaches 32
                commit_all(&mut s, 0, &[0.1; 16]);
            }
            if pos == 16 {
                commit_all(&mut s, 1, &[0.1; 16]);
            }
        }
        // step 2 (boundary 32, writes [48, 64)) never arrives
        assert_eq!(under, vec![SampleSpan::new(48, 52), SampleSpan::new(52, 56), SampleSpan::new(56, 60), SampleSpan::new(60, 64)]);
        assert_eq!(s.underruns(), 1);
        assert_eq!(expired, vec![2]);

        // a late arrival is committed but flagged
        let mut s = SessionState::new(c, Stem::Bass, Mode::FileDriven);
        for pos in (0..40).step_by(4) {
            s.on_audio_block(&block(&zeros, pos, 4));
        }
        match commit_all(&mut s, 1, &[0.1; 16]) {
            CommitOutcome::Committed { late, underrun, .. } => assert!(late && underrun),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn staged_config_applies_at_the_boundary() {
        let mut s = SessionState::new(cfg(), Stem::Guitar, Mode::FileDriven);
        let data: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; 140_000]);
        let eighth = cfg().with_ratio(StepRatio::new(8, 64).unwrap()).unwrap();
        let mut fired = Vec::new();
        let mut config_at = Vec::new();
        let mut pos = 0;
        while pos + 100 <= 140_000 {
            if pos == 1000 {
                s.stage_config(eighth);
                assert_eq!(s.cfg().step_samples(), 66_150);
            }
            for a in s.on_audio_block(&block(&data, pos, 100)) {
                match a {
                    Action::SendContext { curr, cfg, .. } => fired.push((curr, cfg.step_samples())),
                    Action::ConfigChanged { .. } => config_at.push(pos),
                    _ => {}
                }
            }
            pos += 100;
        }
        assert_eq!(fired, vec![(0, 66_150), (66_150, 33_075), (99_225, 33_075), (132_300, 33_075)]);
        assert_eq!(config_at.len(), 1);
    }

    #[test]
    fn force_send_repeats_the_last_boundary() {
        let mut s = SessionState::new(cfg(), Stem::Guitar, Mode::FileDriven);
        assert_eq!(sends(&s.force_send()), vec![0]);
        let data: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; 70_000]);
        let mut fired = Vec::new();
        fired.extend(sends(&s.on_audio_block(&block(&data, 0, 70_000))));
        assert_eq!(fired, vec![66_150]);
        assert_eq!(sends(&s.force_send()), vec![66_150]);
        assert_eq!(s.pending().len(), 3);
    }

    #[test]
    fn region_set_merges_and_finds_gaps() {
        let mut r = RegionSet::new();
        r.insert(SampleSpan::new(10, 20));
        r.insert(SampleSpan::new(30, 40));
        r.insert(SampleSpan::new(20, 25));
        assert_eq!(r.spans().collect::<Vec<_>>(), vec![SampleSpan::new(10, 25), SampleSpan::new(30, 40)]);
        assert_eq!(r.first_gap(SampleSpan::new(12, 35)), Some(SampleSpan::new(25, 30)));
        assert!(r.covers(SampleSpan::new(31, 40)));
        assert_eq!(r.gaps(SampleSpan::new(0, 50)).len(), 3);
        r.insert(SampleSpan::new(0, 100));
        assert!(r.covers(SampleSpan::new(0, 100)));
        r.trim_before(50);
        assert_eq!(r.spans().collect::<Vec<_>>(), vec![SampleSpan::new(50, 100)]);
    }

    proptest! {
        #[test]
        fn region_set_matches_a_bitmap(ops in prop::collection::vec((0i64..200, 0i64..40), 0..30), q in (0i64..200, 0i64..60)) {
            let mut r = RegionSet::new();
            let mut bits = vec![false; 300];
            for (a, len) in ops {
                r.insert(SampleSpan::new(a, a + len));
                for b in &mut bits[a as usize..(a + len) as usize] { *b = true; }
            }
            let span = SampleSpan::new(q.0, q.0 + q.1);
            let covered = bits[q.0 as usize..(q.0 + q.1) as usize].iter().all(|&b| b);
            prop_assert_eq!(r.covers(span), covered);
            let gap_total: usize = r.gaps(span).iter().map(|g| g.len()).sum();
            let missing = bits[q.0 as usize..(q.0 + q.1) as usize].iter().filter(|&&b| !b).count();
            prop_assert_eq!(gap_total, missing);
            let spans: Vec<_> = r.spans().collect();
            for w in spans.windows(2) { prop_assert!(w[0].end < w[1].start); }
        }

        /// Fade continuity: a crossfade between two constant levels moves
        /// monotonically and never overshoots either.
        #[test]
        fn crossfade_stays_between_levels(old in -1.0f32..1.0, new in -1.0f32..1.0, fade in 1usize..16) {
            let c = WindowConfig::new(64, 64, 4, StepRatio::new(16, 64).unwrap(), 1, fade.min(15)).unwrap();
            let fade = c.fade();
            let mut s = SessionState::new(c, Stem::Bass, Mode::FileDriven);
            let zeros: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; 64]);
            s.on_audio_block(&block(&zeros, 0, 16));
            s.commit_prediction(0, &vec![old; 16 + fade]).unwrap();
            s.commit_prediction(1, &vec![new; 16 + fade]).unwrap();
            let b = s.buffer().stem(Stem::Bass);
            let region = &b[32 - fade - 1..33];
            let (lo, hi) = (old.min(new) - 1e-6, old.max(new) + 1e-6);
            let max_step = (old - new).abs() / fade as f32 + 1e-6;
            for w in region.windows(2) {
                prop_assert!(w[1] >= lo && w[1] <= hi);
                prop_assert!((w[1] - w[0]).abs() <= max_step);
            }
        }
    }
}
