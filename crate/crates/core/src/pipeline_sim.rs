//! Pipeline-parallel schedule simulator comparing a plain linear stage split
//! with a V-shaped one that folds the loss module back onto the device that
//! holds the embedding.
//!
//! Components run in the fixed order embed, layers, head, loss. A mapping
//! cuts that chain into chunks and places each chunk on a device. The
//! simulator replays forward and backward passes of every microbatch with a
//! greedy backward-first list scheduler.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, Error, Result};

/// Latencies (time units) of the profiled components.
#[derive(Debug, Clone, PartialEq)]
pub struct StageProfile {
    pub embed: f64,
    pub layer: f64,
    pub head: f64,
    pub loss: f64,
    pub n_layers: usize,
    pub n_devices: usize,
    pub n_microbatches: usize,
    /// Loss latency of microbatch `m` is `loss · multipliers[m % len]`.
    pub loss_multipliers: Vec<f64>,
    /// Activation positions per microbatch, for the communication proxy.
    pub positions: usize,
    pub hidden: usize,
}

impl Default for StageProfile {
    fn default() -> Self {
        Self {
            embed: 2.0,
            layer: 1.0,
            head: 1.0,
            loss: 3.0,
            n_layers: 12,
            n_devices: 4,
            n_microbatches: 8,
            loss_multipliers: vec![1.0],
            positions: 4096,
            hidden: 1024,
        }
    }
}

impl StageProfile {
    /// Latencies may be zero (a component that costs nothing) but not negative.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("embed", self.embed), ("layer", self.layer), ("head", self.head), ("loss", self.loss)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err!("{name} latency must be finite and non-negative, got {v}"));
            }
        }
        if self.n_devices == 0 || self.n_microbatches == 0 {
            return Err(config_err!("need at least one device and one microbatch"));
        }
        if self.n_layers < self.n_devices {
            return Err(config_err!("{} layers cannot cover {} devices", self.n_layers, self.n_devices));
        }
        if self.loss_multipliers.is_empty() || self.loss_multipliers.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(config_err!("loss multipliers must be a non-empty list of non-negative numbers"));
        }
        Ok(())
    }

    pub fn loss_at(&self, micro: usize) -> f64 {
        self.loss * self.loss_multipliers[micro % self.loss_multipliers.len()]
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss * self.loss_multipliers.iter().sum::<f64>() / self.loss_multipliers.len() as f64
    }

    pub fn latency(&self, c: Component, micro: usize) -> f64 {
        match c {
            Component::Embed => self.embed,
            Component::Layer(_) => self.layer,
            Component::Head => self.head,
            Component::Loss => self.loss_at(micro),
        }
    }

    pub fn components(&self) -> Vec<Component> {
        let mut out = vec![Component::Embed];
        out.extend((0..self.n_layers).map(Component::Layer));
        out.push(Component::Head);
        out.push(Component::Loss);
        out
    }

    /// Forward plus backward work of one microbatch.
    pub fn work(&self, micro: usize) -> f64 {
        (1.0 + BACKWARD_FACTOR) * (self.embed + self.n_layers as f64 * self.layer + self.head + self.loss_at(micro))
    }
}

/// Backward latency relative to forward.
pub const BACKWARD_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Embed,
    Layer(usize),
    Head,
    Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub device: usize,
    pub components: Vec<Component>,
}

impl Chunk {
    pub fn latency(&self, p: &StageProfile, micro: usize) -> f64 {
        self.components.iter().map(|&c| p.latency(c, micro)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingKind {
    Linear,
    VShape,
}

impl MappingKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "linear" => Ok(Self::Linear),
            "vshape" | "v" => Ok(Self::VShape),
            other => Err(config_err!("unknown mapping '{other}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::VShape => "vshape",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mapping {
    pub kind: MappingKind,
    pub chunks: Vec<Chunk>,
    pub n_devices: usize,
    /// Static per-device forward load at the mean loss multiplier.
    pub loads: Vec<f64>,
    pub warnings: Vec<String>,
}

impl Mapping {
    fn build(kind: MappingKind, p: &StageProfile, chunks: Vec<Chunk>, warnings: Vec<String>) -> Self {
        let mut loads = vec![0.0; p.n_devices];
        for c in &chunks {
            for &comp in &c.components {
                loads[c.device] += match comp {
                    Component::Loss => p.mean_loss(),
                    other => p.latency(other, 0),
                };
            }
        }
        Self { kind, chunks, n_devices: p.n_devices, loads, warnings }
    }

    pub fn device_of(&self, c: Component) -> Option<usize> {
        self.chunks.iter().find(|ch| ch.components.contains(&c)).map(|ch| ch.device)
    }

    /// Chunks must cover the component chain in order, each non-empty, on valid devices.
    pub fn validate(&self, p: &StageProfile) -> Result<()> {
        let flat: Vec<Component> = self.chunks.iter().flat_map(|c| c.components.iter().copied()).collect();
        if flat != p.components() {
            return Err(Error::Mapping(String::from("chunks do not follow the embed → layers → head → loss order")));
        }
        if let Some((i, c)) = self.chunks.iter().enumerate().find(|(_, c)| c.components.is_empty() || c.device >= p.n_devices) {
            return Err(Error::Mapping(format!("chunk {i} is empty or on missing device {}", c.device)));
        }
        Ok(())
    }
}

fn layer_range(start: usize, n: usize) -> impl Iterator<Item = Component> {
    (start..start + n).map(Component::Layer)
}

/// One chunk per device with layers split as evenly as possible by count
/// (remainder to the first devices); embed on the first, head and loss on the last.
pub fn assign_linear(p: &StageProfile) -> Result<Mapping> {
    p.validate()?;
    let d = p.n_devices;
    let mut chunks = Vec::with_capacity(d);
    let mut next = 0;
    for dev in 0..d {
        let n = p.n_layers / d + usize::from(dev < p.n_layers % d);
        let mut comps = Vec::new();
        if dev == 0 {
            comps.push(Component::Embed);
        }
        comps.extend(layer_range(next, n));
        next += n;
        if dev == d - 1 {
            comps.push(Component::Head);
            comps.push(Component::Loss);
        }
        chunks.push(Chunk { device: dev, components: comps });
    }
    Ok(Mapping::build(MappingKind::Linear, p, chunks, Vec::new()))
}

/// Layer counts per device minimizing the maximum device load, given fixed
/// per-device base loads. Each layer goes to the least-loaded device (lowest
/// index on ties), which is optimal for identical items.
pub fn water_fill(base: &[f64], layer: f64, n_layers: usize) -> Vec<usize> {
    let mut counts = vec![0; base.len()];
    let mut loads = base.to_vec();
    for _ in 0..n_layers {
        let mut best = 0;
        for i in 1..loads.len() {
            if loads[i] < loads[best] {
                best = i;
            }
        }
        counts[best] += 1;
        loads[best] += layer;
    }
    counts
}

/// `D + 1` chunks: embed and the first layers on device 0, one layer group
/// per device up to device `D−1` (which also holds the head), then the loss
/// folded back onto device 0.
pub fn assign_vshape(p: &StageProfile) -> Result<Mapping> {
    p.validate()?;
    let d = p.n_devices;
    if d == 1 {
        let chunk = Chunk { device: 0, components: p.components() };
        let warn = String::from("single device: V-shape degenerates to one co-located chunk");
        return Ok(Mapping::build(MappingKind::VShape, p, vec![chunk], vec![warn]));
    }
    let mut base = vec![0.0; d];
    base[0] = p.embed + p.mean_loss();
    base[d - 1] += p.head;
    let counts = water_fill(&base, p.layer, p.n_layers);
    let mut chunks = Vec::with_capacity(d + 1);
    let mut next = 0;
    for (dev, &n) in counts.iter().enumerate() {
        let mut comps = Vec::new();
        if dev == 0 {
            comps.push(Component::Embed);
        }
        comps.extend(layer_range(next, n));
        next += n;
        if dev == d - 1 {
            comps.push(Component::Head);
        }
        if !comps.is_empty() {
            chunks.push(Chunk { device: dev, components: comps });
        }
    }
    chunks.push(Chunk { device: 0, components: vec![Component::Loss] });
    Ok(Mapping::build(MappingKind::VShape, p, chunks, Vec::new()))
}

pub fn assign(kind: MappingKind, p: &StageProfile) -> Result<Mapping> {
    match kind {
        MappingKind::Linear => assign_linear(p),
        MappingKind::VShape => assign_vshape(p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskEvent {
    pub chunk: usize,
    pub micro: usize,
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommKind {
    Activation,
    Gradient,
    /// Embedding-side inputs consumed by the loss module.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommEvent {
    pub src: usize,
    pub dst: usize,
    pub micro: usize,
    pub kind: CommKind,
    pub time: f64,
    /// Positions × hidden.
    pub volume: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// Per device, in start order. Zero-duration tasks are not listed.
    pub devices: Vec<Vec<TaskEvent>>,
    pub comm: Vec<CommEvent>,
    pub makespan: f64,
    pub busy: Vec<f64>,
    pub bubble: f64,
    pub comm_volume: u64,
}

impl Schedule {
    /// Embed → loss transfers that crossed devices.
    pub fn skip_events(&self) -> usize {
        self.comm.iter().filter(|c| c.kind == CommKind::Skip).count()
    }
}

#[derive(Debug, Clone, Copy)]
struct Task {
    chunk: usize,
    micro: usize,
    phase: Phase,
}

/// Event-driven replay. Whenever a device is free it starts the ready task
/// with the best priority: backward before forward, then the earliest
/// microbatch, then the later chunk. Zero-latency tasks finish the moment
/// their inputs are available and never occupy a device.
pub fn simulate(mapping: &Mapping, p: &StageProfile) -> Result<Schedule> {
    p.validate()?;
    mapping.validate(p)?;
    let k = mapping.chunks.len();
    let m = p.n_microbatches;
    let d = p.n_devices;
    let id = |phase: Phase, chunk: usize, micro: usize| (usize::from(phase == Phase::Backward) * k + chunk) * m + micro;
    let mut tasks = Vec::with_capacity(2 * k * m);
    for phase in [Phase::Forward, Phase::Backward] {
        for chunk in 0..k {
            for micro in 0..m {
                tasks.push(Task { chunk, micro, phase });
            }
        }
    }
    let dur = |t: &Task| {
        let f = mapping.chunks[t.chunk].latency(p, t.micro);
        if t.phase == Phase::Backward { f * BACKWARD_FACTOR } else { f }
    };
    let dep = |t: &Task| -> Option<usize> {
        match t.phase {
            Phase::Forward if t.chunk == 0 => None,
            Phase::Forward => Some(id(Phase::Forward, t.chunk - 1, t.micro)),
            Phase::Backward if t.chunk == k - 1 => Some(id(Phase::Forward, t.chunk, t.micro)),
            Phase::Backward => Some(id(Phase::Backward, t.chunk + 1, t.micro)),
        }
    };

    let mut end: Vec<Option<f64>> = vec![None; tasks.len()];
    let mut start: Vec<f64> = vec![0.0; tasks.len()];
    let mut free = vec![0.0f64; d];
    let mut devices: Vec<Vec<TaskEvent>> = vec![Vec::new(); d];
    let mut pending = tasks.len();
    let mut now = 0.0f64;
    let ready_at = |end: &[Option<f64>], t: &Task| -> Option<f64> {
        match dep(t) {
            None => Some(0.0),
            Some(j) => end[j],
        }
    };

    while pending > 0 {
        // zero-latency tasks resolve as soon as their input time is known
        let mut changed = true;
        while changed {
            changed = false;
            for (i, t) in tasks.iter().enumerate() {
                if end[i].is_none() && dur(t) == 0.0 {
                    if let Some(r) = ready_at(&end, t) {
                        start[i] = r;
                        end[i] = Some(r);
                        pending -= 1;
                        changed = true;
                    }
                }
            }
        }
        if pending == 0 {
            break;
        }
        let mut started = false;
        for dev in 0..d {
            if free[dev] > now {
                continue;
            }
            let mut best: Option<usize> = None;
            for (i, t) in tasks.iter().enumerate() {
                if end[i].is_some() || mapping.chunks[t.chunk].device != dev {
                    continue;
                }
                match ready_at(&end, t) {
                    Some(r) if r <= now => {}
                    _ => continue,
                }
                let better = match best {
                    None => true,
                    Some(b) => priority(t) < priority(&tasks[b]),
                };
                if better {
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                let t = tasks[i];
                let e = now + dur(&t);
                start[i] = now;
                end[i] = Some(e);
                free[dev] = e;
                pending -= 1;
                started = true;
                devices[dev].push(TaskEvent { chunk: t.chunk, micro: t.micro, phase: t.phase, start: now, end: e });
            }
        }
        if pending == 0 {
            break;
        }
        // advance to the next moment something can change
        let mut next = f64::INFINITY;
        for &f in &free {
            if f > now {
                next = next.min(f);
            }
        }
        for (i, t) in tasks.iter().enumerate() {
            if end[i].is_none() {
                if let Some(r) = ready_at(&end, t) {
                    if r > now {
                        next = next.min(r);
                    }
                }
            }
        }
        if next.is_infinite() {
            if started {
                continue;
            }
            return Err(Error::Mapping(String::from("schedule stalled: dependency cycle")));
        }
        now = next;
    }

    let makespan = end.iter().map(|e| e.unwrap_or(0.0)).fold(0.0, f64::max);
    let busy: Vec<f64> = devices.iter().map(|evs| evs.iter().map(|e| e.end - e.start).sum()).collect();
    let total_busy: f64 = busy.iter().sum();
    let bubble = if makespan > 0.0 { (d as f64 * makespan - total_busy) / (d as f64 * makespan) } else { 0.0 };

    let volume = (p.positions * p.hidden) as u64;
    let mut comm = Vec::new();
    for micro in 0..m {
        for c in 1..k {
            let (a, b) = (mapping.chunks[c - 1].device, mapping.chunks[c].device);
            if a != b {
                let fwd = end[id(Phase::Forward, c - 1, micro)].unwrap_or(0.0);
                let bwd = end[id(Phase::Backward, c, micro)].unwrap_or(0.0);
                comm.push(CommEvent { src: a, dst: b, micro, kind: CommKind::Activation, time: fwd, volume });
                comm.push(CommEvent { src: b, dst: a, micro, kind: CommKind::Gradient, time: bwd, volume });
            }
        }
        let (e, l) = (mapping.device_of(Component::Embed), mapping.device_of(Component::Loss));
        if let (Some(e), Some(l)) = (e, l) {
            if e != l {
                let time = end[id(Phase::Forward, 0, micro)].unwrap_or(0.0);
                comm.push(CommEvent { src: e, dst: l, micro, kind: CommKind::Skip, time, volume });
            }
        }
    }
    let comm_volume = comm.iter().map(|c| c.volume).sum();
    Ok(Schedule { devices, comm, makespan, busy, bubble, comm_volume })
}

fn priority(t: &Task) -> (u8, usize, core::cmp::Reverse<usize>) {
    (u8::from(t.phase == Phase::Forward), t.micro, core::cmp::Reverse(t.chunk))
}

/// Checks per-device exclusivity and data dependencies of a schedule.
pub fn check_schedule(s: &Schedule, mapping: &Mapping, p: &StageProfile) -> Result<()> {
    let k = mapping.chunks.len();
    let mut fwd_end = vec![vec![None; p.n_microbatches]; k];
    let mut bwd_end = vec![vec![None; p.n_microbatches]; k];
    let mut all = Vec::new();
    for (dev, evs) in s.devices.iter().enumerate() {
        for w in evs.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::Mapping(format!("device {dev} runs two tasks at time {}", w[1].start)));
            }
        }
        for e in evs {
            if mapping.chunks[e.chunk].device != dev {
                return Err(Error::Mapping(format!("chunk {} ran on device {dev}", e.chunk)));
            }
            let slot = if e.phase == Phase::Forward { &mut fwd_end } else { &mut bwd_end };
            slot[e.chunk][e.micro] = Some(e.end);
            all.push(*e);
        }
    }
    let known = |v: Option<f64>| v.unwrap_or(0.0);
    for e in all {
        let need = match e.phase {
            Phase::Forward => (0..e.chunk).map(|c| known(fwd_end[c][e.micro])).fold(0.0, f64::max),
            Phase::Backward => {
                let f = (0..k).map(|c| known(fwd_end[c][e.micro])).fold(0.0, f64::max);
                (e.chunk + 1..k).map(|c| known(bwd_end[c][e.micro])).fold(f, f64::max)
            }
        };
        if e.start + 1e-12 < need {
            return Err(Error::Mapping(format!(
                "chunk {} microbatch {} starts at {} before its input at {need}",
                e.chunk, e.micro, e.start
            )));
        }
    }
    Ok(())
}

/// One text row per device, `width` columns. Forward work shows the
/// microbatch digit, backward a letter, idle time a dot.
pub fn timeline(s: &Schedule, width: usize) -> String {
    let mut out = String::new();
    if s.makespan <= 0.0 || width == 0 {
        return out;
    }
    let scale = s.makespan / width as f64;
    for (dev, evs) in s.devices.iter().enumerate() {
        let mut row = vec!['.'; width];
        for e in evs {
            let a = ((e.start / scale) as usize).min(width - 1);
            let b = ((e.end / scale) as usize).clamp(a + 1, width);
            let ch = match e.phase {
                Phase::Forward => char::from(b'0' + (e.micro % 10) as u8),
                Phase::Backward => char::from(b'a' + (e.micro % 26) as u8),
            };
            row[a..b].iter_mut().for_each(|c| *c = ch);
        }
        out.push_str(&format!("dev{dev:<2} |"));
        out.extend(row);
        out.push_str("|\n");
    }
    out
}

/// Random profile with heterogeneous latencies where the loss costs at least
/// twice a layer and the embedding lookup at most one layer.
pub fn random_profile<R: Rng + ?Sized>(rng: &mut R) -> StageProfile {
    let layer = rng.gen_range(0.5..2.0);
    let n_devices = rng.gen_range(2..=6);
    StageProfile {
        embed: rng.gen_range(0.1..1.0) * layer,
        layer,
        head: rng.gen_range(0.1..2.0) * layer,
        loss: rng.gen_range(2.0..6.0) * layer,
        n_layers: n_devices * rng.gen_range(1..=4) + rng.gen_range(0..n_devices),
        n_devices,
        n_microbatches: rng.gen_range(2..=12),
        loss_multipliers: (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1.0..1.5)).collect(),
        positions: 2048,
        hidden: 512,
    }
}
