//! Sliding windows over the frame axis, tent weighting, normalized overlap
//! aggregation and the hot/cold residency schedule.
//!
//! Frame indices in [`Window`] are 1-based and inclusive. Everything that
//! touches tensors converts to 0-based offsets at the boundary.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub l: usize,
    pub r: usize,
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.l, self.r)
    }
}

impl Window {
    pub fn len(&self) -> usize {
        self.r - self.l + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.l <= i && i <= self.r
    }

    /// 1-based frame indices covered.
    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.l..=self.r
    }

    /// 0-based half-open range, for tensor slicing.
    pub fn zero_based(&self) -> std::ops::Range<usize> {
        self.l - 1..self.r
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    frames: usize,
    size: usize,
    stride: usize,
    windows: Vec<Window>,
}

impl WindowPlan {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Per-frame sum of weights over all windows (index 0 is frame 1).
    pub fn weight_sums(&self, profile: &WeightProfile) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.frames];
        for w in &self.windows {
            for i in w.frames() {
                sums[i - 1] += frame_weight(w.l, i, w.r, profile);
            }
        }
        sums
    }

    /// Normalized coefficient of window `k` at frame `i`.
    pub fn coefficient(&self, profile: &WeightProfile, k: usize, i: usize) -> f64 {
        let w = self.windows[k];
        let total: f64 = self
            .windows
            .iter()
            .map(|o| frame_weight(o.l, i, o.r, profile))
            .sum();
        frame_weight(w.l, i, w.r, profile) / total
    }

    /// Index of the last window covering each frame (index 0 is frame 1).
    pub fn last_cover(&self) -> Vec<usize> {
        let mut last = vec![0; self.frames];
        for (k, w) in self.windows.iter().enumerate() {
            for i in w.frames() {
                last[i - 1] = k;
            }
        }
        last
    }
}

/// Windows `[i, min(i + d - 1, N)]` for every start `i ≡ 1 (mod s)`.
pub fn enumerate_windows(frames: usize, size: usize, stride: usize) -> Result<WindowPlan> {
    if frames == 0 {
        return Err(Error::Parameter("frame count must be at least 1".into()));
    }
    if stride == 0 {
        return Err(Error::Parameter("window stride must be at least 1".into()));
    }
    if stride >= size {
        return Err(Error::Parameter(format!(
            "window stride {stride} must be smaller than window size {size} (s<d)"
        )));
    }
    let windows = (1..=frames)
        .step_by(stride)
        .map(|l| Window {
            l,
            r: (l + size - 1).min(frames),
        })
        .collect();
    Ok(WindowPlan {
        frames,
        size,
        stride,
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightProfile {
    epsilon: f64,
}

impl Default for WeightProfile {
    fn default() -> Self {
        Self { epsilon: 1e-2 }
    }
}

impl WeightProfile {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Parameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Tent weight: `1 + eps` at the window center falling to `eps` at either end,
/// zero outside the window. A single-frame window gets `1 + eps`.
pub fn frame_weight(l: usize, i: usize, r: usize, profile: &WeightProfile) -> f64 {
    if i < l || i > r {
        return 0.0;
    }
    if r == l {
        return profile.epsilon + 1.0;
    }
    // |i - (l+r)/2| / ((r-l)/2) == |2i - l - r| / (r - l), exact in integers
    let offset = (2 * i).abs_diff(l + r) as f64;
    profile.epsilon + (1.0 - offset / (r - l) as f64)
}

/// Streaming form of the overlap aggregation.
///
/// Window outputs may arrive in any order. They are folded into the f64
/// accumulators strictly in window-index order (out-of-order arrivals wait in
/// a pending buffer), so the result does not depend on evaluation order.
pub struct OverlapAccumulator<'a> {
    plan: &'a WindowPlan,
    profile: WeightProfile,
    frame_dims: [usize; 3],
    numerator: Vec<f64>,
    weights: Vec<f64>,
    next: usize,
    pending: BTreeMap<usize, Tensor4>,
}

impl<'a> OverlapAccumulator<'a> {
    pub fn new(plan: &'a WindowPlan, profile: WeightProfile, frame_dims: [usize; 3]) -> Self {
        let frame_len = frame_dims.iter().product::<usize>();
        Self {
            plan,
            profile,
            frame_dims,
            numerator: vec![0.0; plan.frames() * frame_len],
            weights: vec![0.0; plan.frames()],
            next: 0,
            pending: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, window_index: usize, output: Tensor4) -> Result<()> {
        let window = *self.plan.windows().get(window_index).ok_or_else(|| {
            Error::Parameter(format!(
                "window index {window_index} out of range for {} windows",
                self.plan.len()
            ))
        })?;
        let expected = [
            window.len(),
            self.frame_dims[0],
            self.frame_dims[1],
            self.frame_dims[2],
        ];
        if output.shape() != expected {
            return Err(Error::Shape(format!(
                "output for window {window} has shape {:?}, expected {expected:?}",
                output.shape()
            )));
        }
        if window_index < self.next || self.pending.contains_key(&window_index) {
            return Err(Error::Parameter(format!(
                "duplicate output for window {window}"
            )));
        }
        self.pending.insert(window_index, output);
        while let Some(out) = self.pending.remove(&self.next) {
            self.fold(self.next, &out);
            self.next += 1;
        }
        Ok(())
    }

    fn fold(&mut self, k: usize, out: &Tensor4) {
        let w = self.plan.windows()[k];
        let len = out.frame_len();
        for (j, i) in w.frames().enumerate() {
            let weight = frame_weight(w.l, i, w.r, &self.profile);
            self.weights[i - 1] += weight;
            let dst = &mut self.numerator[(i - 1) * len..i * len];
            for (acc, &v) in dst.iter_mut().zip(out.frame(j)) {
                *acc += weight * v as f64;
            }
        }
    }

    pub fn finish(self) -> Result<Tensor4> {
        if self.next < self.plan.len() {
            return Err(Error::Completeness(self.plan.windows()[self.next]));
        }
        let len = self.frame_dims.iter().product::<usize>();
        let mut data = Vec::with_capacity(self.numerator.len());
        for (i, chunk) in self.numerator.chunks(len).enumerate() {
            let total = self.weights[i];
            debug_assert!(total > 0.0, "frame {} uncovered", i + 1);
            data.extend(chunk.iter().map(|&v| (v / total) as f32));
        }
        let [h, w, c] = self.frame_dims;
        Tensor4::from_vec([self.plan.frames(), h, w, c], data)
    }
}

/// Weighted, per-frame normalized blend of window outputs.
pub fn aggregate(
    plan: &WindowPlan,
    profile: &WeightProfile,
    outputs: impl IntoIterator<Item = (usize, Tensor4)>,
) -> Result<Tensor4> {
    let mut outputs = outputs.into_iter().peekable();
    let frame_dims = match outputs.peek() {
        Some((_, t)) => t.frame_dims(),
        None => return Err(Error::Completeness(plan.windows()[0])),
    };
    let mut acc = OverlapAccumulator::new(plan, *profile, frame_dims);
    for (k, t) in outputs {
        acc.push(k, t)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidencyAction {
    /// Move a frame (1-based) from the cold tier into the hot tier.
    Load(usize),
    /// Drop a frame from the hot tier after its last covering window.
    Evict(usize),
    /// Run the denoiser on window `k`.
    Evaluate(usize),
}

/// Hot-tier schedule: before each window, evict frames no later window
/// needs and load the window's missing frames; evict the rest at the end.
pub fn residency_plan(plan: &WindowPlan, hot_capacity: usize) -> Result<Vec<ResidencyAction>> {
    if hot_capacity < plan.size() {
        return Err(Error::Capacity {
            capacity: hot_capacity,
            window_size: plan.size(),
        });
    }
    let last = plan.last_cover();
    let mut hot = BTreeSet::new();
    let mut actions = Vec::new();
    for (k, w) in plan.windows().iter().enumerate() {
        let done: Vec<usize> = hot.iter().copied().filter(|&i| last[i - 1] < k).collect();
        for i in done {
            hot.remove(&i);
            actions.push(ResidencyAction::Evict(i));
        }
        for i in w.frames() {
            if hot.insert(i) {
                actions.push(ResidencyAction::Load(i));
            }
        }
        actions.push(ResidencyAction::Evaluate(k));
    }
    actions.extend(hot.into_iter().map(ResidencyAction::Evict));
    Ok(actions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidencyAudit {
    pub peak_hot: usize,
    pub evaluations: usize,
}

/// Replays an action sequence and checks every residency guarantee: windows
/// only see hot frames, the hot tier never exceeds `hot_capacity`, no frame is
/// evicted before its last covering window, and nothing stays resident.
pub fn audit_residency(
    plan: &WindowPlan,
    actions: &[ResidencyAction],
    hot_capacity: usize,
) -> Result<ResidencyAudit> {
    let last = plan.last_cover();
    let mut hot = BTreeSet::new();
    let mut evaluated = vec![false; plan.len()];
    let mut peak = 0;
    let mut evaluations = 0;
    for action in actions {
        match *action {
            ResidencyAction::Load(i) => {
                if i == 0 || i > plan.frames() || !hot.insert(i) {
                    return Err(Error::Residency(format!("invalid load of frame {i}")));
                }
                peak = peak.max(hot.len());
                if hot.len() > hot_capacity {
                    return Err(Error::Residency(format!(
                        "{} hot frames exceed capacity {hot_capacity}",
                        hot.len()
                    )));
                }
            }
            ResidencyAction::Evict(i) => {
                if !hot.remove(&i) {
                    return Err(Error::Residency(format!("evicting cold frame {i}")));
                }
                if !evaluated[last[i - 1]] {
                    return Err(Error::Residency(format!(
                        "frame {i} evicted before window {} ran",
                        plan.windows()[last[i - 1]]
                    )));
                }
            }
            ResidencyAction::Evaluate(k) => {
                let w = plan
                    .windows()
                    .get(k)
                    .ok_or_else(|| Error::Residency(format!("evaluate of unknown window {k}")))?;
                if let Some(cold) = w.frames().find(|i| !hot.contains(i)) {
                    return Err(Error::Residency(format!(
                        "window {w} evaluated with cold frame {cold}"
                    )));
                }
                evaluated[k] = true;
                evaluations += 1;
            }
        }
    }
    if let Some(k) = evaluated.iter().position(|e| !e) {
        return Err(Error::Completeness(plan.windows()[k]));
    }
    if let Some(i) = hot.first() {
        return Err(Error::Residency(format!("frame {i} never evicted")));
    }
    Ok(ResidencyAudit {
        peak_hot: peak,
        evaluations,
    })
}
