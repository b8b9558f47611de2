//! Sequence layouts and additive self-attention masks.
//!
//! A joint sequence is laid out as
//! `[CLS, v_1 .. v_K, SEP_V, (CLS_L), w_1 .. w_N, SEP_L]`. The first three
//! groups form the vision block, the rest form the language block. A mask is
//! an `S x S` matrix of `0` (attention allowed) and `neg` (blocked) that is
//! added to the attention logits before the softmax.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Default blocked-entry value. `exp(-1e9)` underflows to exactly zero.
pub const DEFAULT_NEG: f64 = -1.0e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskScheme {
    /// Every position attends to every position.
    Bi,
    /// Vision attends vision only; language attends vision plus its causal prefix.
    S2S,
    /// Vision attends everything; language attends vision plus its causal prefix.
    Bar,
    /// Attention stays within each modality. Uses an extra language CLS token.
    NonCrossing,
}

impl MaskScheme {
    pub const ALL: [MaskScheme; 4] = [
        MaskScheme::Bi,
        MaskScheme::S2S,
        MaskScheme::Bar,
        MaskScheme::NonCrossing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskScheme::Bi => "bi",
            MaskScheme::S2S => "s2s",
            MaskScheme::Bar => "bar",
            MaskScheme::NonCrossing => "noncross",
        }
    }

    pub fn has_language_cls(self) -> bool {
        self == MaskScheme::NonCrossing
    }
}

impl fmt::Display for MaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" => Ok(MaskScheme::Bi),
            "s2s" => Ok(MaskScheme::S2S),
            "bar" => Ok(MaskScheme::Bar),
            "noncross" => Ok(MaskScheme::NonCrossing),
            other => Err(Error::Config(format!("unknown mask scheme '{other}'"))),
        }
    }
}

/// Probability of drawing S2S (otherwise Bi) for the mixed pre-training schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedSchedule {
    s2s_prob: f64,
}

impl MixedSchedule {
    pub fn new(s2s_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s2s_prob) {
            return Err(Error::Config(format!(
                "s2s_prob must lie in [0,1], got {s2s_prob}"
            )));
        }
        Ok(Self { s2s_prob })
    }

    pub fn s2s_prob(&self) -> f64 {
        self.s2s_prob
    }
}

impl Default for MixedSchedule {
    fn default() -> Self {
        Self { s2s_prob: 0.75 }
    }
}

pub fn sample_scheme<R: Rng + ?Sized>(schedule: &MixedSchedule, rng: &mut R) -> MaskScheme {
    if rng.random::<f64>() < schedule.s2s_prob {
        MaskScheme::S2S
    } else {
        MaskScheme::Bi
    }
}

/// Which block a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Vision,
    Language,
}

/// Token-block geometry of one joint sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    visual: usize,
    tokens: usize,
    language_cls: bool,
}

impl SequenceLayout {
    pub fn visual_count(&self) -> usize {
        self.visual
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn has_language_cls(&self) -> bool {
        self.language_cls
    }

    /// Total sequence length `S`.
    pub fn len(&self) -> usize {
        self.visual + self.tokens + if self.language_cls { 4 } else { 3 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cls(&self) -> usize {
        0
    }

    pub fn visual_range(&self) -> Range<usize> {
        1..1 + self.visual
    }

    pub fn sep_v(&self) -> usize {
        self.visual + 1
    }

    pub fn language_cls(&self) -> Option<usize> {
        self.language_cls.then_some(self.visual + 2)
    }

    /// First position of the language block (CLS_L when present).
    pub fn language_block_start(&self) -> usize {
        self.visual + 2
    }

    pub fn token_range(&self) -> Range<usize> {
        let start = self.language_block_start() + usize::from(self.language_cls);
        start..start + self.tokens
    }

    pub fn sep_l(&self) -> usize {
        self.len() - 1
    }

    pub fn block_of(&self, pos: usize) -> Block {
        if pos < self.language_block_start() {
            Block::Vision
        } else {
            Block::Language
        }
    }
}

pub fn build_layout(visual: usize, tokens: usize, scheme: MaskScheme) -> Result<SequenceLayout> {
    if visual == 0 || tokens == 0 {
        return Err(Error::Invalid(format!(
            "degenerate sequence: K={visual}, N={tokens} (both must be >= 1)"
        )));
    }
    Ok(SequenceLayout {
        visual,
        tokens,
        language_cls: scheme.has_language_cls(),
    })
}

fn allowed(layout: &SequenceLayout, scheme: MaskScheme, q: usize, k: usize) -> bool {
    let qb = layout.block_of(q);
    let kb = layout.block_of(k);
    match scheme {
        MaskScheme::Bi => true,
        MaskScheme::NonCrossing => qb == kb,
        MaskScheme::S2S | MaskScheme::Bar => match (qb, kb) {
            (Block::Vision, Block::Vision) => true,
            (Block::Vision, Block::Language) => scheme == MaskScheme::Bar,
            (Block::Language, Block::Vision) => true,
            (Block::Language, Block::Language) => k <= q,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    matrix: Array2<f64>,
    layout: SequenceLayout,
    scheme: MaskScheme,
    neg: f64,
}

impl AttentionMask {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn scheme(&self) -> MaskScheme {
        self.scheme
    }

    pub fn neg(&self) -> f64 {
        self.neg
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.matrix[[q, k]] != 0.0
    }

    /// Row-major CSV with `0` for allowed and `-inf` for blocked entries.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.matrix.rows() {
            let line: Vec<&str> = row
                .iter()
                .map(|&x| if x == 0.0 { "0" } else { "-inf" })
                .collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

pub fn build_mask(layout: &SequenceLayout, scheme: MaskScheme) -> Result<AttentionMask> {
    build_mask_with(layout, scheme, DEFAULT_NEG)
}

pub fn build_mask_with(
    layout: &SequenceLayout,
    scheme: MaskScheme,
    neg: f64,
) -> Result<AttentionMask> {
    if layout.has_language_cls() != scheme.has_language_cls() {
        return Err(Error::Invalid(format!(
            "layout (language CLS: {}) was not built for the {scheme} scheme",
            layout.has_language_cls()
        )));
    }
    if !(neg < 0.0) || !neg.is_finite() {
        return Err(Error::Config(format!(
            "mask constant must be finite and negative, got {neg}"
        )));
    }
    let s = layout.len();
    let matrix = Array2::from_shape_fn((s, s), |(q, k)| {
        if allowed(layout, scheme, q, k) {
            0.0
        } else {
            neg
        }
    });
    Ok(AttentionMask {
        matrix,
        layout: layout.clone(),
        scheme,
        neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn allowed_cols(mask: &AttentionMask, row: usize) -> Vec<usize> {
        (0..mask.layout().len())
            .filter(|&k| !mask.is_blocked(row, k))
            .collect()
    }

    #[test]
    fn layout_lengths() {
        let l = build_layout(2, 2, MaskScheme::Bi).unwrap();
        assert_eq!(l.len(), 7);
        assert_eq!((0..7).filter(|&p| l.block_of(p) == Block::Vision).count(), 4);
        assert_eq!(build_layout(256, 253, MaskScheme::Bi).unwrap().len(), 512);
        let nc = build_layout(1, 1, MaskScheme::NonCrossing).unwrap();
        assert_eq!(nc.len(), 6);
        assert_eq!(nc.language_cls(), Some(3));
        assert_eq!(nc.token_range(), 4..5);
        assert_eq!(nc.sep_l(), 5);
    }

    #[test]
    fn degenerate_layouts_rejected() {
        assert!(build_layout(0, 3, MaskScheme::Bi).is_err());
        assert!(build_layout(3, 0, MaskScheme::Bar).is_err());
    }

    #[test]
    fn bi_is_all_zero() {
        let l = build_layout(2, 2, MaskScheme::Bi).unwrap();
        let m = build_mask(&l, MaskScheme::Bi).unwrap();
        assert_eq!(m.matrix().dim(), (7, 7));
        assert!(m.matrix().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn s2s_small_case() {
        let l = build_layout(1, 2, MaskScheme::S2S).unwrap();
        let m = build_mask(&l, MaskScheme::S2S).unwrap();
        for r in 0..3 {
            assert_eq!(allowed_cols(&m, r), vec![0, 1, 2]);
        }
        assert_eq!(allowed_cols(&m, 3), vec![0, 1, 2, 3]);
        assert_eq!(allowed_cols(&m, 4), vec![0, 1, 2, 3, 4]);
        assert_eq!(allowed_cols(&m, 5), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn bar_small_case() {
        let l = build_layout(1, 2, MaskScheme::Bar).unwrap();
        let m = build_mask(&l, MaskScheme::Bar).unwrap();
        for r in 0..3 {
            assert_eq!(allowed_cols(&m, r), (0..6).collect::<Vec<_>>());
        }
        assert_eq!(allowed_cols(&m, 3), vec![0, 1, 2, 3]);
        assert_eq!(allowed_cols(&m, 4), vec![0, 1, 2, 3, 4]);
        assert_eq!(allowed_cols(&m, 5), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn noncrossing_needs_language_cls() {
        let plain = build_layout(2, 2, MaskScheme::Bi).unwrap();
        assert!(build_mask(&plain, MaskScheme::NonCrossing).is_err());
        let nc = build_layout(2, 2, MaskScheme::NonCrossing).unwrap();
        assert!(build_mask(&nc, MaskScheme::S2S).is_err());
        let m = build_mask(&nc, MaskScheme::NonCrossing).unwrap();
        assert_eq!(m.matrix(), &m.matrix().t().to_owned());
    }

    #[test]
    fn csv_export() {
        let l = build_layout(1, 1, MaskScheme::S2S).unwrap();
        let m = build_mask(&l, MaskScheme::S2S).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, "0,0,0,-inf,-inf");
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn schedule_bounds() {
        assert!(MixedSchedule::new(1.5).is_err());
        assert!(MixedSchedule::new(-0.1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let always = MixedSchedule::new(1.0).unwrap();
        let never = MixedSchedule::new(0.0).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_scheme(&always, &mut rng), MaskScheme::S2S);
            assert_eq!(sample_scheme(&never, &mut rng), MaskScheme::Bi);
        }
    }

    #[test]
    fn schedule_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let sched = MixedSchedule::default();
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_scheme(&sched, &mut rng) == MaskScheme::S2S)
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.01, "{frac}");
    }
}
