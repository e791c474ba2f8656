//! Window segmentation and masking.
//!
//! A look-back window is cut into coarse patches of length `p` at stride
//! `stride`; each coarse patch splits into `n_sub = p / sp` sub-patches of
//! length `sp`, and `n_sub` must be a power of two so that the encoder can
//! halve the token count once per hierarchy. Masking happens at the coarse
//! level: a masked coarse patch hides all of its sub-patches, and the
//! reconstruction targets at level `l` are the corresponding contiguous
//! slices of length `sp·2^(l-1)` from the raw window.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::num::{lit, Element};
use crate::params::{ParamKind, Params, Pass};
use crate::rng::trunc_normal;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Patch geometry: coarse length `p`, stride, sub-patch length `sp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub p: usize,
    pub stride: usize,
    pub sp: usize,
    pub n_sub: usize,
    pub levels: usize,
}

impl PatchSpec {
    pub fn new(p: usize, stride: usize, sp: usize) -> Result<Self> {
        if p == 0 || stride == 0 || sp == 0 {
            return Err(Error::config(format!(
                "patch sizes must be positive, got p={p} stride={stride} sp={sp}"
            )));
        }
        if !p.is_multiple_of(sp) {
            return Err(Error::config(format!(
                "sub-patch length {sp} must divide patch length {p}"
            )));
        }
        let n_sub = p / sp;
        if !n_sub.is_power_of_two() {
            return Err(Error::config(format!(
                "p/sp must be a power of two so each hierarchy can halve the \
                 token count, got {p}/{sp} = {n_sub}"
            )));
        }
        let levels = n_sub.trailing_zeros() as usize + 1;
        Ok(PatchSpec {
            p,
            stride,
            sp,
            n_sub,
            levels,
        })
    }

    /// Number of coarse patches in a window: `floor((lookback - p)/stride) + 1`.
    pub fn n_coarse(&self, lookback: usize) -> Result<usize> {
        if lookback < self.p {
            return Err(Error::config(format!(
                "look-back {lookback} is shorter than the patch length {}",
                self.p
            )));
        }
        Ok((lookback - self.p) / self.stride + 1)
    }

    /// Timesteps covered by the patch grid; `lookback - covered(lookback)`
    /// trailing points are dropped when the stride does not tile the window.
    pub fn covered(&self, lookback: usize) -> Result<usize> {
        Ok((self.n_coarse(lookback)? - 1) * self.stride + self.p)
    }

    /// Token segment length at 1-based level `l`: `sp · 2^(l-1)`.
    pub fn seg_len(&self, level: usize) -> usize {
        debug_assert!(level >= 1 && level <= self.levels);
        self.sp << (level - 1)
    }

    /// Tokens contributed by each coarse patch at level `l`.
    pub fn groups_per_coarse(&self, level: usize) -> usize {
        self.n_sub >> (level - 1)
    }

    /// Total token count at level `l` for a window with `n_coarse` patches.
    pub fn tokens_at_level(&self, n_coarse: usize, level: usize) -> usize {
        n_coarse * self.groups_per_coarse(level)
    }
}

/// A per-window masking decision over coarse patch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_coarse: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

/// Pick `round(ratio · n_coarse)` coarse patches to mask, half rounding up,
/// uniformly without replacement. Both all-masked and all-visible plans are
/// rejected because the two encoder streams each need at least one token.
pub fn make_mask_plan(n_coarse: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!(
            "mask ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let count = (ratio * n_coarse as f64 + 0.5).floor() as usize;
    if count == 0 || count >= n_coarse {
        return Err(Error::config(format!(
            "mask ratio {ratio} over {n_coarse} coarse patches would leave a \
             stream empty ({count} masked)"
        )));
    }
    let mut masked: Vec<usize> = sample(rng, n_coarse, count).into_iter().collect();
    masked.sort_unstable();
    let mut in_masked = vec![false; n_coarse];
    for &m in &masked {
        in_masked[m] = true;
    }
    let visible = (0..n_coarse).filter(|&i| !in_masked[i]).collect();
    Ok(MaskPlan {
        n_coarse,
        masked,
        visible,
    })
}

/// One segmented window: the raw values plus the flattened fine tokens,
/// `tokens[i·sp .. (i+1)·sp]` being fine token `i` (coarse patch `i / n_sub`).
#[derive(Debug, Clone)]
pub struct PatchSet<T> {
    pub spec: PatchSpec,
    pub n_coarse: usize,
    pub window: Vec<T>,
    pub tokens: Vec<T>,
}

/// Cut a window into fine tokens.
pub fn segment_series<T: Element>(window: &[T], spec: PatchSpec) -> Result<PatchSet<T>> {
    let n_coarse = spec.n_coarse(window.len())?;
    let mut tokens = Vec::with_capacity(n_coarse * spec.n_sub * spec.sp);
    for c in 0..n_coarse {
        let base = c * spec.stride;
        for s in 0..spec.n_sub {
            let start = base + s * spec.sp;
            tokens.extend_from_slice(&window[start..start + spec.sp]);
        }
    }
    Ok(PatchSet {
        spec,
        n_coarse,
        window: window.to_vec(),
        tokens,
    })
}

/// Fine tokens and their grid positions for one stream (visible or masked).
#[derive(Debug, Clone)]
pub struct TokenGroup<T> {
    /// `[len(positions), sp]` row-major.
    pub values: Vec<T>,
    /// Fine-grid index of each token, ascending.
    pub positions: Vec<usize>,
}

fn gather_tokens<T: Element>(set: &PatchSet<T>, coarse: &[usize]) -> TokenGroup<T> {
    let sp = set.spec.sp;
    let n_sub = set.spec.n_sub;
    let mut values = Vec::with_capacity(coarse.len() * n_sub * sp);
    let mut positions = Vec::with_capacity(coarse.len() * n_sub);
    for &c in coarse {
        for s in 0..n_sub {
            let fine = c * n_sub + s;
            positions.push(fine);
            values.extend_from_slice(&set.tokens[fine * sp..(fine + 1) * sp]);
        }
    }
    TokenGroup { values, positions }
}

/// Split the fine tokens of a window into the visible and masked streams.
pub fn split_visible_masked<T: Element>(
    set: &PatchSet<T>,
    plan: &MaskPlan,
) -> Result<(TokenGroup<T>, TokenGroup<T>)> {
    if plan.n_coarse != set.n_coarse {
        return Err(Error::contract(format!(
            "mask plan covers {} coarse patches but the window has {}",
            plan.n_coarse, set.n_coarse
        )));
    }
    Ok((
        gather_tokens(set, &plan.visible),
        gather_tokens(set, &plan.masked),
    ))
}

/// Level-`l` token positions of the masked coarse patches, ascending:
/// coarse patch `c` owns positions `c·g .. (c+1)·g` where
/// `g = n_sub / 2^(l-1)`.
pub fn masked_positions_at_level(plan: &MaskPlan, spec: PatchSpec, level: usize) -> Vec<usize> {
    let g = spec.groups_per_coarse(level);
    let mut out = Vec::with_capacity(plan.masked.len() * g);
    for &c in &plan.masked {
        for i in 0..g {
            out.push(c * g + i);
        }
    }
    out
}

/// Reconstruction targets at level `l`: for each masked coarse patch, its
/// `n_sub/2^(l-1)` contiguous raw slices of length `sp·2^(l-1)`. Returned
/// flattened row-major as `[n_targets, seg_len(l)]`.
pub fn targets_at_level<T: Element>(
    set: &PatchSet<T>,
    plan: &MaskPlan,
    level: usize,
) -> Result<Vec<T>> {
    if level < 1 || level > set.spec.levels {
        return Err(Error::contract(format!(
            "level {level} outside 1..={}",
            set.spec.levels
        )));
    }
    let seg = set.spec.seg_len(level);
    let g = set.spec.groups_per_coarse(level);
    let mut out = Vec::with_capacity(plan.masked.len() * g * seg);
    for &c in &plan.masked {
        let base = c * set.spec.stride;
        for i in 0..g {
            let start = base + i * seg;
            out.extend_from_slice(&set.window[start..start + seg]);
        }
    }
    Ok(out)
}

// ── patch embedding ─────────────────────────────────────────────────────────

/// Shared embedding for both streams: a linear map over each sub-patch plus
/// a learned positional table indexed by fine-grid position. The positional
/// table starts at zero; the value projection starts truncated-normal.
pub struct PatchEmbed<T> {
    pub name: String,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub w_pos: Tensor<T>,
    pub sp: usize,
    pub max_positions: usize,
}

impl<T: Element> PatchEmbed<T> {
    pub fn init(
        name: impl Into<String>,
        sp: usize,
        d: usize,
        max_positions: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let data: Vec<T> = (0..sp * d).map(|_| lit(trunc_normal(rng, 0.02))).collect();
        PatchEmbed {
            name: name.into(),
            w: Tensor::new(vec![sp, d], data).expect("sized buffer"),
            b: Tensor::zeros(&[d]),
            w_pos: Tensor::zeros(&[max_positions, d]),
            sp,
            max_positions,
        }
    }

    /// Embed a batch of token groups. `tokens: [batch, k, sp]`; `positions`
    /// holds `batch·k` fine-grid indices, sample-major.
    pub fn forward(
        &self,
        pass: &mut Pass<'_, T>,
        tokens: &Tensor<T>,
        positions: &[usize],
    ) -> Result<Var> {
        let shape = tokens.shape().to_vec();
        if shape.len() != 3 || shape[2] != self.sp {
            return Err(Error::contract(format!(
                "patch embed expects [batch, tokens, {}], got {:?}",
                self.sp, shape
            )));
        }
        if positions.len() != shape[0] * shape[1] {
            return Err(Error::contract(format!(
                "patch embed got {} positions for {}x{} tokens",
                positions.len(),
                shape[0],
                shape[1]
            )));
        }
        let w = pass.param(&format!("{}.w", self.name), &self.w);
        let b = pass.param(&format!("{}.b", self.name), &self.b);
        let table = pass.param(&format!("{}.w_pos", self.name), &self.w_pos);
        let x = pass.constant(tokens.clone());
        let h = pass.tape.matmul(x, w)?;
        let h = pass.tape.add(h, b)?;
        let d = self.w.shape()[1];
        let pos = pass.tape.gather_rows(table, positions)?;
        let pos = pass.tape.reshape(pos, vec![shape[0], shape[1], d])?;
        pass.tape.add(h, pos)
    }
}

impl<T: Element> Params<T> for PatchEmbed<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&format!("{}.w", self.name), ParamKind::Learnable, &self.w);
        f(&format!("{}.b", self.name), ParamKind::Learnable, &self.b);
        f(&format!("{}.w_pos", self.name), ParamKind::Learnable, &self.w_pos);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&format!("{}.w", self.name), ParamKind::Learnable, &mut self.w);
        f(&format!("{}.b", self.name), ParamKind::Learnable, &mut self.b);
        f(
            &format!("{}.w_pos", self.name),
            ParamKind::Learnable,
            &mut self.w_pos,
        );
    }
}
