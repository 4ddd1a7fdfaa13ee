use super::memory::{MemoryBank, MemoryEntry};
use super::params::{TrackerParams, Variant};
use super::window::CosineWindow;
use crate::error::{Error, Result};
use crate::geom::{BBox, CropRule};
use crate::image::Frame;
use crate::matcher::{AdaptiveState, MatcherWeights, Mode, ResponseMap};
use crate::meta::{delta_from_caches, MetaWeights, PatchCache};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Center, size and size relative to the first frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetState {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub scale: f64,
}

impl TargetState {
    pub fn from_bbox(b: &BBox) -> Self {
        let (cx, cy) = b.center();
        TargetState {
            cx,
            cy,
            w: b.w,
            h: b.h,
            scale: 1.0,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Outcome of one tracked frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    pub frame: usize,
    pub state: TargetState,
    pub confidence: f64,
    /// Whether the frame ended with a weight update (meta or fine-tune).
    pub updated: bool,
}

/// Winning scale and position after windowing and scale penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Choice {
    pub scale_index: usize,
    pub row: usize,
    pub col: usize,
    /// Windowed probability at the chosen position, before the scale penalty.
    pub peak: f64,
}

/// Picks the global maximum over per-scale probability maps after
/// multiplying by `window` and penalizing the peaks of non-unit scales.
/// Ties keep the earlier scale and, within a map, the first position.
pub fn locate(maps: &[Vec<f64>], window: &CosineWindow, scales: &[f64], penalty: f64) -> Choice {
    let mut best: Option<(f64, Choice)> = None;
    for (si, (map, &s)) in maps.iter().zip(scales).enumerate() {
        let windowed = window.apply(map);
        let mut arg = 0;
        for (i, v) in windowed.iter().enumerate() {
            if *v > windowed[arg] {
                arg = i;
            }
        }
        let peak = windowed[arg];
        let score = if s == 1.0 { peak } else { peak * penalty };
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((
                score,
                Choice {
                    scale_index: si,
                    row: arg / window.cols(),
                    col: arg % window.cols(),
                    peak,
                },
            ));
        }
    }
    best.expect("at least one scale").1
}

/// One online tracking run over a single sequence.
#[derive(Clone, Debug)]
pub struct TrackerSession<'a> {
    params: TrackerParams,
    variant: Variant,
    base: &'a MatcherWeights,
    theta: Option<&'a MetaWeights>,
    rule: CropRule,
    window: CosineWindow,
    stride: f64,
    exemplar: Tensor,
    exemplar_cache: PatchCache,
    active: MatcherWeights,
    exemplar_features: Tensor,
    adaptation: Option<AdaptiveState>,
    memory: MemoryBank,
    adam: Adam,
    state: TargetState,
    initial: (f64, f64),
    frame_index: usize,
    updates: usize,
}

impl<'a> TrackerSession<'a> {
    /// Starts tracking `bbox` in `frame`. `theta` is required for
    /// [`Variant::Meta`] and ignored otherwise.
    pub fn init(
        frame: &Frame,
        bbox: &BBox,
        base: &'a MatcherWeights,
        theta: Option<&'a MetaWeights>,
        params: &TrackerParams,
        variant: Variant,
    ) -> Result<Self> {
        params.validate()?;
        if !(bbox.is_finite() && bbox.w > 0.0 && bbox.h > 0.0)
            || !bbox.intersects_frame(frame.width(), frame.height())
        {
            return Err(Error::geometry(
                "tracker init",
                format!(
                    "box {:?} is degenerate or outside the {}x{} frame",
                    bbox,
                    frame.width(),
                    frame.height()
                ),
            ));
        }
        if base.adaptation().is_some() {
            return Err(Error::invalid("tracker needs the unadapted matcher"));
        }
        let theta = match variant {
            Variant::Meta => {
                let t = theta
                    .ok_or_else(|| Error::invalid("meta variant needs meta-learner weights"))?;
                t.config().check_matcher(base.config())?;
                Some(t)
            }
            _ => None,
        };
        let config = base.config();
        let rule = config.crop_rule();
        let r = config.response_size()?;
        let exemplar = rule.exemplar(frame, bbox)?;
        let exemplar_features = base.extract_features(&exemplar, None, Mode::Eval)?;
        Ok(TrackerSession {
            params: params.clone(),
            variant,
            base,
            theta,
            rule,
            window: CosineWindow::new(r, r, params.window_influence),
            stride: config.total_stride() as f64,
            exemplar_cache: PatchCache::new(base, &exemplar)?,
            exemplar,
            active: base.clone(),
            exemplar_features,
            adaptation: None,
            memory: MemoryBank::new(params.memory_capacity),
            adam: Adam::new(params.finetune_lr),
            state: TargetState::from_bbox(bbox),
            initial: (bbox.w, bbox.h),
            frame_index: 0,
            updates: 0,
        })
    }

    pub fn state(&self) -> TargetState {
        self.state
    }

    pub fn exemplar(&self) -> &Tensor {
        &self.exemplar
    }

    pub fn memory(&self) -> &MemoryBank {
        &self.memory
    }

    pub fn adaptation(&self) -> Option<&AdaptiveState> {
        self.adaptation.as_ref()
    }

    /// Weights currently used for matching.
    pub fn active_matcher(&self) -> &MatcherWeights {
        &self.active
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    /// Response of the active matcher to a search crop.
    pub fn respond(&self, crop: &Tensor) -> Result<ResponseMap> {
        let fz = self.active.extract_features(crop, None, Mode::Eval)?;
        self.active
            .response_from_features(&self.exemplar_features, &fz)
    }

    /// Locates the target in the next frame, stores the frame in memory when
    /// confident, and runs the periodic update of the session's variant.
    pub fn step(&mut self, frame: &Frame) -> Result<FrameResult> {
        let s = self.state;
        let mut maps = Vec::with_capacity(self.params.scales.len());
        for &scale in &self.params.scales {
            let crop = self.rule.search(frame, s.cx, s.cy, s.w, s.h, scale)?;
            maps.push(self.respond(&crop)?);
        }
        let probs: Vec<Vec<f64>> = maps.iter().map(ResponseMap::probabilities).collect();
        let choice = locate(
            &probs,
            &self.window,
            &self.params.scales,
            self.params.scale_penalty,
        );
        let scale = self.params.scales[choice.scale_index];

        let side = self.rule.search_side(s.w, s.h) * scale;
        let px = side / self.rule.search_size as f64;
        let center_r = (self.window.rows() - 1) as f64 / 2.0;
        let center_c = (self.window.cols() - 1) as f64 / 2.0;
        let cx = s.cx + (choice.col as f64 - center_c) * self.stride * px;
        let cy = s.cy + (choice.row as f64 - center_r) * self.stride * px;

        let d = self.params.scale_damping;
        let (w0, h0) = self.initial;
        let w = ((1.0 - d) * s.w + d * s.w * scale)
            .clamp(w0 * self.params.min_scale, w0 * self.params.max_scale);
        let h = ((1.0 - d) * s.h + d * s.h * scale)
            .clamp(h0 * self.params.min_scale, h0 * self.params.max_scale);
        self.state = TargetState {
            cx: cx.clamp(0.0, frame.width() as f64),
            cy: cy.clamp(0.0, frame.height() as f64),
            w,
            h,
            scale: w / w0,
        };
        self.frame_index += 1;

        if choice.peak > self.params.confidence_threshold {
            let t = self.state;
            let crop = self.rule.search(frame, t.cx, t.cy, t.w, t.h, 1.0)?;
            self.memory.push(MemoryEntry {
                crop,
                response: maps.swap_remove(choice.scale_index),
                frame: self.frame_index,
                confidence: choice.peak,
            });
        }

        let updated = match self.variant {
            Variant::Meta if self.frame_index.is_multiple_of(self.params.update_period) => {
                self.update()?
            }
            Variant::Finetune if self.frame_index.is_multiple_of(self.params.finetune_period) => {
                self.finetune()?
            }
            _ => false,
        };
        Ok(FrameResult {
            frame: self.frame_index,
            state: self.state,
            confidence: choice.peak,
            updated,
        })
    }

    fn selected_caches(&self, matcher: &MatcherWeights) -> Result<Option<Vec<PatchCache>>> {
        let picks = match self.memory.select(self.params.samples) {
            Ok(p) => p,
            Err(Error::MemoryUnderflow { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        picks
            .iter()
            .map(|&i| PatchCache::new(matcher, &self.memory.get(i).expect("selected index").crop))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Regenerates the adaptive weights from the lowest-entropy memory
    /// samples. Returns `false` (and changes nothing) when the memory holds
    /// fewer than M entries or the session has no meta-learner.
    pub fn update(&mut self) -> Result<bool> {
        let Some(theta) = self.theta else {
            return Ok(false);
        };
        let Some(caches) = self.selected_caches(self.base)? else {
            return Ok(false);
        };
        let refs: Vec<&PatchCache> = caches.iter().collect();
        let delta = delta_from_caches(self.base, &self.exemplar_cache, &refs)?;
        let state = theta.generate(&delta, Mode::Eval, None)?;
        self.active = self.base.adapt(&state)?;
        self.exemplar_features = self
            .active
            .extract_features(&self.exemplar, None, Mode::Eval)?;
        self.adaptation = Some(state);
        self.updates += 1;
        Ok(true)
    }

    /// Adam steps on the last kernel over the lowest-entropy memory
    /// samples, each assumed centered on the target.
    pub fn finetune(&mut self) -> Result<bool> {
        let Some(caches) = self.selected_caches(&self.active)? else {
            return Ok(false);
        };
        let refs: Vec<&PatchCache> = caches.iter().collect();
        let xc = PatchCache::new(&self.active, &self.exemplar)?;
        for _ in 0..self.params.finetune_iterations {
            let grad = delta_from_caches(&self.active, &xc, &refs)?.scaled(-1.0);
            self.adam
                .step(&mut [self.active.last_kernel_mut()], &[&grad])?;
        }
        self.exemplar_features = self
            .active
            .extract_features(&self.exemplar, None, Mode::Eval)?;
        self.updates += 1;
        Ok(true)
    }
}

/// Per-frame results of a whole sequence; entry 0 is the initial box.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub results: Vec<FrameResult>,
    /// Wall-clock seconds spent on each frame (initialization for frame 0).
    pub seconds: Vec<f64>,
}

impl Track {
    pub fn boxes(&self) -> Vec<BBox> {
        self.results.iter().map(|r| r.state.bbox()).collect()
    }

    /// One `frame,x,y,width,height,confidence` line per frame, with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,x,y,width,height,confidence\n");
        for r in &self.results {
            let b = r.state.bbox();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.frame, b.x, b.y, b.w, b.h, r.confidence
            ));
        }
        s
    }

    pub fn mean_fps(&self) -> f64 {
        let t: f64 = self.seconds.iter().skip(1).sum();
        let n = self.seconds.len().saturating_sub(1);
        if t > 0.0 {
            n as f64 / t
        } else {
            0.0
        }
    }
}

/// Tracks `frames` from `init` in frame 0.
pub fn track_sequence(
    frames: &[Frame],
    init: &BBox,
    base: &MatcherWeights,
    theta: Option<&MetaWeights>,
    params: &TrackerParams,
    variant: Variant,
) -> Result<Track> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Data("empty sequence".into()))?;
    let clock = std::time::Instant::now();
    let mut session = TrackerSession::init(first, init, base, theta, params, variant)?;
    let mut seconds = vec![clock.elapsed().as_secs_f64()];
    let mut results = vec![FrameResult {
        frame: 0,
        state: session.state(),
        confidence: 1.0,
        updated: false,
    }];
    for f in &frames[1..] {
        let clock = std::time::Instant::now();
        results.push(session.step(f)?);
        seconds.push(clock.elapsed().as_secs_f64());
    }
    Ok(Track { results, seconds })
}
