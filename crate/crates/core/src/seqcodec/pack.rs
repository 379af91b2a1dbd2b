use alloc::vec::Vec;

use super::{targets, SampleKind, Step, Targets, Vocab};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_SEQ_LEN: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaidOutSample {
    pub id: u32,
    pub kind: Option<SampleKind>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedSample {
    pub id: u32,
    pub kind: Option<SampleKind>,
    pub start: usize,
    pub len: usize,
}

/// Several samples flattened into one sequence. Attention and rotary
/// positions are confined to each sample's `start..start+len` range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub steps: Vec<Step>,
    pub samples: Vec<PackedSample>,
}

impl PackedSequence {
    pub fn single(sample: LaidOutSample) -> Self {
        let len = sample.steps.len();
        Self { steps: sample.steps, samples: alloc::vec![PackedSample { id: sample.id, kind: sample.kind, start: 0, len }] }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(start, len)` attention blocks, one per sample.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.samples.iter().map(|s| (s.start, s.len)).collect()
    }

    /// Position of each step within its own sample.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = alloc::vec![0; self.steps.len()];
        for s in &self.samples {
            for i in 0..s.len {
                pos[s.start + i] = i;
            }
        }
        pos
    }

    pub fn targets(&self, vocab: &Vocab) -> Vec<Targets> {
        let mut out = Vec::with_capacity(self.steps.len());
        for s in &self.samples {
            out.extend(targets(&self.steps[s.start..s.start + s.len], vocab));
        }
        out
    }

    pub fn sample(&self, k: usize) -> &[Step] {
        let s = &self.samples[k];
        &self.steps[s.start..s.start + s.len]
    }

    /// Checks that sample ranges tile the sequence in order.
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let mut at = 0;
        for s in &self.samples {
            if s.start != at {
                return Err(Error::Layout(alloc::format!("sample {} starts at {} instead of {at}", s.id, s.start)));
            }
            at += s.len;
        }
        if at != self.steps.len() {
            return Err(Error::Layout(alloc::format!("samples cover {at} of {} steps", self.steps.len())));
        }
        if at > max_seq_len {
            return Err(Error::Layout(alloc::format!("sequence length {at} exceeds {max_seq_len}")));
        }
        Ok(())
    }
}

/// First-fit-decreasing bin assignment. Returns item indices per bin, in
/// placement order. Ties in length keep input order.
pub fn ffd_bins(lengths: &[usize], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((i, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > max_len) {
        return Err(Error::Oversized { id: i, len, max: max_len });
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    for i in order {
        let len = lengths[i];
        match free.iter().position(|&f| f >= len) {
            Some(b) => {
                bins[b].push(i);
                free[b] -= len;
            }
            None => {
                bins.push(alloc::vec![i]);
                free.push(max_len - len);
            }
        }
    }
    Ok(bins)
}

pub fn pack(samples: Vec<LaidOutSample>, max_seq_len: usize) -> Result<Vec<PackedSequence>> {
    let lengths: Vec<usize> = samples.iter().map(|s| s.steps.len()).collect();
    let bins = ffd_bins(&lengths, max_seq_len).map_err(|e| match e {
        Error::Oversized { id, len, max } => Error::Oversized { id: samples[id].id as usize, len, max },
        e => e,
    })?;
    let mut slots: Vec<Option<LaidOutSample>> = samples.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(bins.len());
    for bin in bins {
        let mut seq = PackedSequence { steps: Vec::new(), samples: Vec::new() };
        for i in bin {
            let s = slots[i].take().expect("each sample packed once");
            seq.samples.push(PackedSample { id: s.id, kind: s.kind, start: seq.steps.len(), len: s.steps.len() });
            seq.steps.extend(s.steps);
        }
        out.push(seq);
    }
    Ok(out)
}
