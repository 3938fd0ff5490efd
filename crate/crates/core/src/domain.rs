//! Events, sequences, observation windows and datasets.
//!
//! An event is a point `x = (t, m)` in the observation space `[0, T) × M`,
//! where `M` is an axis-aligned box of marks. A sequence is a strictly
//! time-ordered list of such points; a dataset is a set of sequences that
//! share one [`Domain`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("mark bounds have different lengths ({lo} vs {hi})")]
    MarkDimMismatch { lo: usize, hi: usize },
    #[error("mark axis {axis}: lower bound {lo} must be below upper bound {hi}")]
    EmptyMarkAxis { axis: usize, lo: f64, hi: f64 },
    #[error("sequence {index} has a different domain than the dataset")]
    MixedDomains { index: usize },
    #[error("sequence {index}: {violation}")]
    InvalidSequence { index: usize, violation: Violation },
    #[error("degenerate axis `{axis}`: raw range has zero or non-finite extent")]
    DegenerateAxis { axis: String },
    #[error("normalization record is not invertible on axis `{axis}`")]
    SingularAffine { axis: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// The observation window `[0, T) × [lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    horizon: f64,
    mark_lo: Vec<f64>,
    mark_hi: Vec<f64>,
}

impl Domain {
    pub fn new(horizon: f64, mark_lo: Vec<f64>, mark_hi: Vec<f64>) -> Result<Self, DomainError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(DomainError::BadHorizon(horizon));
        }
        if mark_lo.len() != mark_hi.len() {
            return Err(DomainError::MarkDimMismatch { lo: mark_lo.len(), hi: mark_hi.len() });
        }
        for (axis, (&lo, &hi)) in mark_lo.iter().zip(&mark_hi).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(DomainError::EmptyMarkAxis { axis, lo, hi });
            }
        }
        Ok(Self { horizon, mark_lo, mark_hi })
    }

    /// A pure temporal window `[0, T)` with no marks.
    pub fn temporal(horizon: f64) -> Result<Self, DomainError> {
        Self::new(horizon, Vec::new(), Vec::new())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn mark_dim(&self) -> usize {
        self.mark_lo.len()
    }

    pub fn mark_lo(&self) -> &[f64] {
        &self.mark_lo
    }

    pub fn mark_hi(&self) -> &[f64] {
        &self.mark_hi
    }

    /// `|M|`; 1 for a mark-free domain.
    pub fn mark_volume(&self) -> f64 {
        self.mark_lo.iter().zip(&self.mark_hi).map(|(lo, hi)| hi - lo).product()
    }

    /// `|X| = T · |M|`.
    pub fn volume(&self) -> f64 {
        self.horizon * self.mark_volume()
    }

    /// Dimension of a point `(t, m)`.
    pub fn point_dim(&self) -> usize {
        1 + self.mark_dim()
    }

    /// Lower corner and extent of every coordinate, time first.
    pub fn axis_ranges(&self) -> Vec<(f64, f64)> {
        std::iter::once((0.0, self.horizon))
            .chain(self.mark_lo.iter().zip(&self.mark_hi).map(|(&lo, &hi)| (lo, hi - lo)))
            .collect()
    }

    pub fn check_point(&self, x: &EventPoint) -> Result<(), ViolationKind> {
        if x.m.len() != self.mark_dim() {
            return Err(ViolationKind::MarkDimMismatch { expected: self.mark_dim(), found: x.m.len() });
        }
        if !(x.t.is_finite() && x.t >= 0.0 && x.t < self.horizon) {
            return Err(ViolationKind::TimeOutOfWindow);
        }
        for (axis, ((&v, &lo), &hi)) in x.m.iter().zip(&self.mark_lo).zip(&self.mark_hi).enumerate() {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(ViolationKind::MarkOutOfBox { axis });
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &EventPoint) -> bool {
        self.check_point(x).is_ok()
    }

    /// Draws a mark uniformly from the mark box.
    pub fn sample_mark<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mark_lo
            .iter()
            .zip(&self.mark_hi)
            .map(|(&lo, &hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    /// Draws a point uniformly from `[0, T) × M`.
    pub fn sample_point<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> EventPoint {
        let t = self.horizon * rng.random::<f64>();
        EventPoint { t, m: self.sample_mark(rng) }
    }
}

/// One event `x = (t, m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPoint {
    pub t: f64,
    pub m: Vec<f64>,
}

impl EventPoint {
    pub fn new(t: f64, m: Vec<f64>) -> Self {
        Self { t, m }
    }

    pub fn temporal(t: f64) -> Self {
        Self { t, m: Vec::new() }
    }

    /// Coordinates with time first.
    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.t).chain(self.m.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NonIncreasingTime,
    TimeOutOfWindow,
    MarkOutOfBox { axis: usize },
    MarkDimMismatch { expected: usize, found: usize },
}

/// The first invariant a sequence breaks, and where.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.index;
        match self.kind {
            ViolationKind::NonIncreasingTime => write!(f, "non-increasing time at index {i}"),
            ViolationKind::TimeOutOfWindow => write!(f, "time outside [0, T) at index {i}"),
            ViolationKind::MarkOutOfBox { axis } => {
                write!(f, "mark out of box at index {i} (axis {axis})")
            }
            ViolationKind::MarkDimMismatch { expected, found } => {
                write!(f, "mark dimension {found} != {expected} at index {i}")
            }
        }
    }
}

impl std::error::Error for Violation {}

/// Checks that events lie in the domain with strictly increasing times.
pub fn validate_events(domain: &Domain, events: &[EventPoint]) -> Result<(), Violation> {
    let mut prev = f64::NEG_INFINITY;
    for (index, x) in events.iter().enumerate() {
        domain.check_point(x).map_err(|kind| Violation { index, kind })?;
        if x.t <= prev {
            return Err(Violation { index, kind: ViolationKind::NonIncreasingTime });
        }
        prev = x.t;
    }
    Ok(())
}

/// A time-ordered trajectory observed on a [`Domain`].
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    events: Vec<EventPoint>,
    domain: Domain,
}

impl EventSequence {
    pub fn new(events: Vec<EventPoint>, domain: Domain) -> Result<Self, Violation> {
        validate_events(&domain, &events)?;
        Ok(Self { events, domain })
    }

    pub fn empty(domain: Domain) -> Self {
        Self { events: Vec::new(), domain }
    }

    /// Builds a sequence without checking invariants; pair with [`validate_sequence`].
    pub fn new_unchecked(events: Vec<EventPoint>, domain: Domain) -> Self {
        Self { events, domain }
    }

    pub fn events(&self) -> &[EventPoint] {
        &self.events
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of events strictly before `t`, i.e. the size of `H_t`.
    pub fn history_len(&self, t: f64) -> usize {
        self.events.partition_point(|e| e.t < t)
    }

    /// Events strictly before `t`.
    pub fn history(&self, t: f64) -> &[EventPoint] {
        &self.events[..self.history_len(t)]
    }

    /// `∫ f dN` restricted to events selected by `keep`: a plain sum over events.
    pub fn counting_integral<F, P>(&self, keep: P, f: F) -> f64
    where
        F: Fn(&EventPoint) -> f64,
        P: Fn(&EventPoint) -> bool,
    {
        self.events.iter().filter(|x| keep(x)).map(f).sum()
    }

    pub fn into_events(self) -> Vec<EventPoint> {
        self.events
    }
}

/// Checks every [`EventSequence`] invariant.
pub fn validate_sequence(seq: &EventSequence) -> Result<(), Violation> {
    validate_events(&seq.domain, &seq.events)
}

/// Per-axis affine map `normalized = raw · scale + offset`, time first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Self { scale: vec![1.0; dim], offset: vec![0.0; dim] }
    }

    pub fn apply(&self, x: &EventPoint) -> EventPoint {
        EventPoint {
            t: x.t * self.scale[0] + self.offset[0],
            m: x.m.iter().enumerate().map(|(i, v)| v * self.scale[i + 1] + self.offset[i + 1]).collect(),
        }
    }

    pub fn invert(&self, x: &EventPoint) -> EventPoint {
        EventPoint {
            t: (x.t - self.offset[0]) / self.scale[0],
            m: x.m.iter().enumerate().map(|(i, v)| (v - self.offset[i + 1]) / self.scale[i + 1]).collect(),
        }
    }

    /// `other ∘ self`: apply `self` first.
    pub fn then(&self, other: &Affine) -> Affine {
        let scale = self.scale.iter().zip(&other.scale).map(|(a, b)| a * b).collect();
        let offset = self
            .offset
            .iter()
            .zip(&other.scale)
            .zip(&other.offset)
            .map(|((o, s2), o2)| o * s2 + o2)
            .collect();
        Affine { scale, offset }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.iter().all(|&s| s == 1.0) && self.offset.iter().all(|&o| o == 0.0)
    }

    fn check_invertible(&self) -> Result<(), DomainError> {
        for (i, s) in self.scale.iter().enumerate() {
            if !(s.is_finite() && *s != 0.0) {
                return Err(DomainError::SingularAffine { axis: axis_name(i) });
            }
        }
        Ok(())
    }
}

fn axis_name(i: usize) -> String {
    if i == 0 {
        "t".to_string()
    } else {
        format!("m{i}")
    }
}

/// Sequences sharing one domain, with an optional raw→normalized record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    domain: Domain,
    sequences: Vec<EventSequence>,
    normalization: Option<Affine>,
}

impl Dataset {
    pub fn new(domain: Domain, sequences: Vec<EventSequence>) -> Result<Self, DomainError> {
        for (index, s) in sequences.iter().enumerate() {
            if s.domain != domain {
                return Err(DomainError::MixedDomains { index });
            }
        }
        Ok(Self { domain, sequences, normalization: None })
    }

    /// Builds a dataset from raw event lists, validating each sequence.
    pub fn from_events(domain: Domain, sequences: Vec<Vec<EventPoint>>) -> Result<Self, DomainError> {
        let seqs = sequences
            .into_iter()
            .enumerate()
            .map(|(index, ev)| {
                EventSequence::new(ev, domain.clone())
                    .map_err(|violation| DomainError::InvalidSequence { index, violation })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { domain, sequences: seqs, normalization: None })
    }

    pub fn with_normalization(mut self, record: Affine) -> Result<Self, DomainError> {
        record.check_invertible()?;
        self.normalization = Some(record);
        Ok(self)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn sequences(&self) -> &[EventSequence] {
        &self.sequences
    }

    pub fn normalization(&self) -> Option<&Affine> {
        self.normalization.as_ref()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// A dataset made of the sequences at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            domain: self.domain.clone(),
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            normalization: self.normalization.clone(),
        }
    }
}

/// Maps a dataset affinely onto `[0, target_hi)` in time and `[0, target_hi]`
/// per mark axis, using the dataset's domain as the raw range.
///
/// The stored record composes with any earlier normalization, so it always
/// maps the original raw coordinates to the returned ones.
pub fn normalize_dataset(ds: &Dataset, target_hi: f64) -> Result<Dataset, DomainError> {
    if ds.is_empty() {
        return Err(DomainError::EmptyDataset);
    }
    if !(target_hi.is_finite() && target_hi > 0.0) {
        return Err(DomainError::BadHorizon(target_hi));
    }
    let ranges = ds.domain.axis_ranges();
    let mut step = Affine { scale: Vec::with_capacity(ranges.len()), offset: Vec::with_capacity(ranges.len()) };
    for (i, &(lo, extent)) in ranges.iter().enumerate() {
        if !(extent.is_finite() && extent > 0.0) {
            return Err(DomainError::DegenerateAxis { axis: axis_name(i) });
        }
        let scale = target_hi / extent;
        step.scale.push(scale);
        step.offset.push(if lo == 0.0 { 0.0 } else { -lo * scale });
    }
    let d = ds.domain.mark_dim();
    let domain = Domain::new(target_hi, vec![0.0; d], vec![target_hi; d])?;
    let sequences = ds
        .sequences
        .iter()
        .map(|s| {
            let events = s.events.iter().map(|x| clamp_into(step.apply(x), &domain)).collect();
            EventSequence { events, domain: domain.clone() }
        })
        .collect::<Vec<_>>();
    for (index, s) in sequences.iter().enumerate() {
        validate_sequence(s).map_err(|violation| DomainError::InvalidSequence { index, violation })?;
    }
    let record = match &ds.normalization {
        Some(prev) => prev.then(&step),
        None => step,
    };
    record.check_invertible()?;
    Ok(Dataset { domain, sequences, normalization: Some(record) })
}

// Round-off can push a mark at the upper box edge a hair past target_hi.
fn clamp_into(mut x: EventPoint, domain: &Domain) -> EventPoint {
    for (v, (&lo, &hi)) in x.m.iter_mut().zip(domain.mark_lo.iter().zip(&domain.mark_hi)) {
        *v = v.clamp(lo, hi);
    }
    if x.t < 0.0 {
        x.t = 0.0;
    }
    x
}
