//! Full-sequence attention masks.
//!
//! Masks are boolean allow-matrices: `true` is an additive 0 and `false` an
//! additive −∞. Every strategy starts from the causal mask and rewrites only
//! the object × object block (and, with the instruction override, the
//! object × instruction block).

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SlimError};
use crate::geo::{fixed_neighbors, geo_object_mask, GeoMask, GeoParams};
use crate::matrix::Matrix;
use crate::scene::{SceneObjects, SegmentSpans, TokenLayout};

pub const MASK_MAGIC: &str = "SLIMMASK";
pub const DEFAULT_N_FIXED: usize = 5;

/// How the object × object block is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskVariant {
    /// Standard lower-triangular mask.
    Causal,
    /// Every token attends to every token.
    FullAll,
    /// All objects attend to all objects.
    FullObjectBlock,
    /// Objects attend only to themselves.
    DiagonalObjectBlock,
    /// Each object attends to its `n` nearest neighbors.
    FixedN(usize),
    /// Density-adaptive neighborhoods.
    Geo(GeoParams),
}

/// A mask variant plus the optional object → instruction override.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskStrategy {
    pub variant: MaskVariant,
    pub inst_mask: bool,
}

impl MaskStrategy {
    pub const CAUSAL: MaskStrategy = MaskStrategy {
        variant: MaskVariant::Causal,
        inst_mask: false,
    };

    pub fn new(variant: MaskVariant, inst_mask: bool) -> Result<Self> {
        if let MaskVariant::FixedN(0) = variant {
            return Err(SlimError::config("fixedn needs a positive neighbor count"));
        }
        Ok(MaskStrategy { variant, inst_mask })
    }

    pub fn geo(params: GeoParams, inst_mask: bool) -> Self {
        MaskStrategy {
            variant: MaskVariant::Geo(params),
            inst_mask,
        }
    }

    /// Parses `causal | fullall | full | diag | fixedn:<k> | geo`, each with
    /// an optional `+inst` suffix. `geo` takes its bounds from `geo_params`.
    pub fn parse(spec: &str, geo_params: GeoParams) -> Result<Self> {
        let spec = spec.trim().to_ascii_lowercase();
        let (base, inst_mask) = match spec.strip_suffix("+inst") {
            Some(base) => (base, true),
            None => (spec.as_str(), false),
        };
        let variant = match base {
            "causal" => MaskVariant::Causal,
            "fullall" => MaskVariant::FullAll,
            "full" => MaskVariant::FullObjectBlock,
            "diag" => MaskVariant::DiagonalObjectBlock,
            "geo" => MaskVariant::Geo(geo_params),
            other => match other.strip_prefix("fixedn:") {
                Some(k) => MaskVariant::FixedN(k.parse().map_err(|_| {
                    SlimError::config(format!("fixedn count `{k}` is not a positive integer"))
                })?),
                None => {
                    return Err(SlimError::config(format!(
                        "unknown strategy `{spec}`; expected causal|fullall|full|diag|fixedn:<k>|geo with optional +inst"
                    )))
                }
            },
        };
        MaskStrategy::new(variant, inst_mask)
    }

    /// Short human-readable label.
    pub fn label(&self) -> String {
        let base = match self.variant {
            MaskVariant::Causal => "Causal".to_string(),
            MaskVariant::FullAll => "FullAll".to_string(),
            MaskVariant::FullObjectBlock => "Full".to_string(),
            MaskVariant::DiagonalObjectBlock => "Diagonal".to_string(),
            MaskVariant::FixedN(n) => format!("FixedN({n})"),
            MaskVariant::Geo(p) => format!("Geo({},{})", p.k_min(), p.k_max()),
        };
        if self.inst_mask {
            format!("{base}+Inst")
        } else {
            base
        }
    }
}

/// Round-trips through [`MaskStrategy::parse`] except that `geo` drops its
/// bounds.
impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            MaskVariant::Causal => f.write_str("causal")?,
            MaskVariant::FullAll => f.write_str("fullall")?,
            MaskVariant::FullObjectBlock => f.write_str("full")?,
            MaskVariant::DiagonalObjectBlock => f.write_str("diag")?,
            MaskVariant::FixedN(n) => write!(f, "fixedn:{n}")?,
            MaskVariant::Geo(_) => f.write_str("geo")?,
        }
        if self.inst_mask {
            f.write_str("+inst")?;
        }
        Ok(())
    }
}

impl FromStr for MaskStrategy {
    type Err = SlimError;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::parse(s, GeoParams::default())
    }
}

/// Boolean allow-matrix over a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    allow: Matrix<bool>,
    layout: Option<TokenLayout>,
}

impl AttentionMask {
    /// Wraps an arbitrary square allow-matrix.
    pub fn from_allow(allow: Matrix<bool>, layout: Option<TokenLayout>) -> Result<Self> {
        if allow.rows() != allow.cols() || allow.rows() == 0 {
            return Err(SlimError::config(format!(
                "mask must be square and non-empty, got {}x{}",
                allow.rows(),
                allow.cols()
            )));
        }
        if let Some(l) = layout {
            if l.len() != allow.rows() {
                return Err(SlimError::config(format!(
                    "mask has {} rows but the layout has {} tokens",
                    allow.rows(),
                    l.len()
                )));
            }
        }
        Ok(AttentionMask { allow, layout })
    }

    pub fn len(&self) -> usize {
        self.allow.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.allow.rows() == 0
    }

    #[inline]
    pub fn allows(&self, p: usize, q: usize) -> bool {
        self.allow[(p, q)]
    }

    pub fn allow(&self) -> &Matrix<bool> {
        &self.allow
    }

    pub fn layout(&self) -> Option<&TokenLayout> {
        self.layout.as_ref()
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.count_true()
    }

    /// Column indices allowed in row `p`, ascending.
    pub fn allowed_columns(&self, p: usize) -> Vec<usize> {
        self.allow
            .row(p)
            .iter()
            .enumerate()
            .filter_map(|(q, &a)| a.then_some(q))
            .collect()
    }

    /// Compressed sparse row view of the allowed entries.
    pub fn to_sparse(&self) -> SparseMask {
        let mut row_ptr = Vec::with_capacity(self.len() + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for p in 0..self.len() {
            cols.extend(
                self.allow
                    .row(p)
                    .iter()
                    .enumerate()
                    .filter_map(|(q, &a)| a.then_some(q)),
            );
            row_ptr.push(cols.len());
        }
        SparseMask { row_ptr, cols }
    }

    /// The index of the first row with no allowed entry, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        self.allow
            .iter_rows()
            .position(|row| !row.iter().any(|&a| a))
    }

    /// Mask of the same sequence with object tokens reordered so that new
    /// object `i` is old object `perm[i]`.
    pub fn permute_objects(&self, perm: &[usize]) -> Result<Self> {
        let layout = self
            .layout
            .ok_or_else(|| SlimError::config("mask has no layout to permute"))?;
        crate::scene::check_permutation(perm, layout.n_objects)?;
        let token_map = object_token_permutation(&layout, perm);
        let n = self.len();
        let allow = Matrix::from_fn(n, n, |p, q| self.allow[(token_map[p], token_map[q])]);
        AttentionMask::from_allow(allow, Some(layout))
    }
}

/// Maps each new token position to the old token position under an object
/// permutation.
pub fn object_token_permutation(layout: &TokenLayout, perm: &[usize]) -> Vec<usize> {
    let spans = layout.spans();
    let mut map: Vec<usize> = (0..layout.len()).collect();
    for (new_obj, &old_obj) in perm.iter().enumerate() {
        for (new_tok, old_tok) in spans.objects[new_obj]
            .clone()
            .zip(spans.objects[old_obj].clone())
        {
            map[new_tok] = old_tok;
        }
    }
    map
}

/// CSR form of an [`AttentionMask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
}

impl SparseMask {
    pub fn row(&self, p: usize) -> &[usize] {
        &self.cols[self.row_ptr[p]..self.row_ptr[p + 1]]
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}

/// Lower-triangular mask of size `n`.
pub fn causal_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(SlimError::config("causal mask needs n >= 1"));
    }
    AttentionMask::from_allow(Matrix::from_fn(n, n, |p, q| q <= p), None)
}

/// Object-level allow matrix for a strategy; `None` leaves the causal block
/// untouched.
pub fn object_block(scene: &SceneObjects, variant: MaskVariant) -> Option<Matrix<bool>> {
    let n = scene.len();
    match variant {
        MaskVariant::Causal | MaskVariant::FullAll => None,
        MaskVariant::FullObjectBlock => Some(Matrix::filled(n, n, true)),
        MaskVariant::DiagonalObjectBlock => Some(Matrix::from_fn(n, n, |i, j| i == j)),
        MaskVariant::FixedN(k) => Some(geo_object_mask(&fixed_neighbors(scene, k))),
        MaskVariant::Geo(params) => Some(GeoMask::build(scene, params).allow),
    }
}

/// Builds the full-sequence mask for `strategy`.
///
/// A layout with no objects yields the causal mask whatever the scene.
pub fn compose(
    scene: &SceneObjects,
    layout: &TokenLayout,
    strategy: &MaskStrategy,
) -> Result<AttentionMask> {
    let n = layout.len();
    if layout.n_objects > 0 {
        layout.check_scene(scene)?;
    }
    if let MaskVariant::FullAll = strategy.variant {
        return AttentionMask::from_allow(Matrix::filled(n, n, true), Some(*layout));
    }
    let mut allow = Matrix::from_fn(n, n, |p, q| q <= p);
    let spans = layout.spans();

    if layout.n_objects > 0 {
        if let Some(block) = object_block(scene, strategy.variant) {
            for (i, rows) in spans.objects.iter().enumerate() {
                for (j, cols) in spans.objects.iter().enumerate() {
                    let value = i == j || block[(i, j)];
                    for p in rows.clone() {
                        for q in cols.clone() {
                            allow[(p, q)] = value;
                        }
                    }
                }
            }
        }
    }
    if strategy.inst_mask {
        for p in spans.object_segment() {
            for q in spans.instruction.clone() {
                allow[(p, q)] = true;
            }
        }
    }
    AttentionMask::from_allow(allow, Some(*layout))
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

pub const SEGMENT_NAMES: [&str; 4] = ["sys", "obj", "inst", "resp"];

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub n: usize,
    pub total_allowed: usize,
    /// `block_allowed[a][b]`: allowed entries with row in segment `a` and
    /// column in segment `b`, segments ordered as [`SEGMENT_NAMES`].
    pub block_allowed: [[usize; 4]; 4],
    /// Allowed fraction of the object × object token block.
    pub object_block_density: Option<f64>,
    /// Per-object count of other objects visible from the object's first
    /// token.
    pub neighbor_counts: Vec<usize>,
    /// `k_histogram[k]` = number of objects with `k` visible neighbors.
    pub k_histogram: Vec<usize>,
}

impl fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} allowed={} density={:.6}",
            self.n,
            self.total_allowed,
            self.total_allowed as f64 / (self.n * self.n) as f64
        )?;
        match self.object_block_density {
            Some(d) => write!(f, " object_block_density={d:.6}")?,
            None => f.write_str(" object_block_density=n/a")?,
        }
        if !self.neighbor_counts.is_empty() {
            let mean = self.neighbor_counts.iter().sum::<usize>() as f64
                / self.neighbor_counts.len() as f64;
            write!(f, " mean_k={mean:.3} k_hist=")?;
            let hist: Vec<String> = self
                .k_histogram
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(k, c)| format!("{k}:{c}"))
                .collect();
            f.write_str(&hist.join(","))?;
        }
        Ok(())
    }
}

fn segment_ranges(spans: &SegmentSpans) -> [std::ops::Range<usize>; 4] {
    [
        spans.system.clone(),
        spans.object_segment(),
        spans.instruction.clone(),
        spans.response.clone(),
    ]
}

pub fn sparsity_stats(mask: &AttentionMask) -> SparsityReport {
    let n = mask.len();
    let layout = mask
        .layout()
        .copied()
        .unwrap_or_else(|| TokenLayout::new(n, 0, 1, 0, 0).expect("non-empty mask"));
    let spans = layout.spans();
    let segments = segment_ranges(&spans);
    let mut block_allowed = [[0usize; 4]; 4];
    for (a, rows) in segments.iter().enumerate() {
        for (b, cols) in segments.iter().enumerate() {
            block_allowed[a][b] = rows
                .clone()
                .map(|p| cols.clone().filter(|&q| mask.allows(p, q)).count())
                .sum();
        }
    }
    let obj_tokens = layout.n_object_tokens();
    let object_block_density =
        (obj_tokens > 0).then(|| block_allowed[1][1] as f64 / (obj_tokens * obj_tokens) as f64);

    let neighbor_counts: Vec<usize> = spans
        .objects
        .iter()
        .enumerate()
        .map(|(i, rows)| {
            spans
                .objects
                .iter()
                .enumerate()
                .filter(|&(j, cols)| j != i && mask.allows(rows.start, cols.start))
                .count()
        })
        .collect();
    let mut k_histogram = vec![0usize; neighbor_counts.iter().max().map_or(0, |m| m + 1)];
    for &k in &neighbor_counts {
        k_histogram[k] += 1;
    }
    SparsityReport {
        n,
        total_allowed: mask.count_allowed(),
        block_allowed,
        object_block_density,
        neighbor_counts,
        k_histogram,
    }
}

// ---------------------------------------------------------------------------
// SLIMMASK files
// ---------------------------------------------------------------------------

pub fn format_mask(allow: &Matrix<bool>) -> String {
    let mut out = String::with_capacity(allow.rows() * (allow.cols() + 1) + 32);
    writeln!(out, "{MASK_MAGIC} v1 {} {}", allow.rows(), allow.cols()).unwrap();
    for row in allow.iter_rows() {
        out.extend(row.iter().map(|&a| if a { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

pub fn parse_mask(text: &str, origin: &Path) -> Result<Matrix<bool>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| SlimError::parse(origin, 1, "empty file, expected mask header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (rows, cols) = match fields.as_slice() {
        [magic, "v1", r, c] if *magic == MASK_MAGIC => {
            let dim = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| SlimError::parse(origin, 1, format!("bad dimension `{s}`")))
            };
            (dim(r)?, dim(c)?)
        }
        _ => {
            return Err(SlimError::parse(
                origin,
                1,
                format!("expected `{MASK_MAGIC} v1 <rows> <cols>`, found `{header}`"),
            ))
        }
    };
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let lineno = r + 2;
        let line = lines
            .next()
            .ok_or_else(|| SlimError::parse(origin, lineno, format!("missing row {r}")))?;
        if line.len() != cols {
            return Err(SlimError::parse(
                origin,
                lineno,
                format!("row {r} has {} columns, expected {cols}", line.len()),
            ));
        }
        for (c, ch) in line.chars().enumerate() {
            data.push(match ch {
                '1' => true,
                '0' => false,
                other => {
                    return Err(SlimError::parse(
                        origin,
                        lineno,
                        format!("column {c}: expected 0 or 1, found `{other}`"),
                    ))
                }
            });
        }
    }
    if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
        return Err(SlimError::parse(
            origin,
            rows + 2,
            format!("unexpected trailing line `{extra}`"),
        ));
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn save_mask(mask: &AttentionMask, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_mask(mask.allow()))?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Matrix<bool>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_mask(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_scene(xs: &[f64]) -> SceneObjects {
        SceneObjects::from_centers(xs.iter().map(|&x| [x, 0.3 * x * x, 0.0])).unwrap()
    }

    #[test]
    fn causal_small_cases() {
        assert_eq!(causal_mask(1).unwrap().allow().as_slice(), &[true]);
        let m = causal_mask(3).unwrap();
        assert_eq!(m.count_allowed(), 6);
        assert!(m.allows(2, 0) && !m.allows(0, 2));
        assert!(causal_mask(0).is_err());
    }

    #[test]
    fn strategy_grammar() {
        let g = GeoParams::new(1, 4).unwrap();
        let cases = [
            ("causal", MaskVariant::Causal, false),
            ("fullall", MaskVariant::FullAll, false),
            ("full+inst", MaskVariant::FullObjectBlock, true),
            ("diag", MaskVariant::DiagonalObjectBlock, false),
            ("fixedn:5", MaskVariant::FixedN(5), false),
            ("geo+inst", MaskVariant::Geo(g), true),
        ];
        for (text, variant, inst) in cases {
            let s = MaskStrategy::parse(text, g).unwrap();
            assert_eq!(
                s,
                MaskStrategy {
                    variant,
                    inst_mask: inst
                },
                "{text}"
            );
            assert_eq!(s.to_string(), text);
        }
        for bad in ["fixedn:0", "fixedn:x", "geo+", "sparse", "inst"] {
            assert!(MaskStrategy::parse(bad, g).is_err(), "{bad}");
        }
    }

    #[test]
    fn empty_object_segment_is_causal() {
        let scene = line_scene(&[0.0, 1.0]);
        let layout = TokenLayout::new(2, 0, 1, 3, 1).unwrap();
        for spec in [
            "causal",
            "fullall",
            "full+inst",
            "diag",
            "fixedn:1",
            "geo+inst",
        ] {
            let strategy: MaskStrategy = spec.parse().unwrap();
            let m = compose(&scene, &layout, &strategy).unwrap();
            if strategy.variant == MaskVariant::FullAll {
                continue;
            }
            assert_eq!(
                m.allow(),
                causal_mask(layout.len()).unwrap().allow(),
                "{spec}"
            );
        }
    }

    #[test]
    fn geo_inst_on_chat_style_layout() {
        let scene = line_scene(&[0.0, 0.4, 0.5, 3.0, 3.2, 9.0, 9.1, 9.5, 20.0, 4.4, 1.7, 6.6]);
        let layout = TokenLayout::new(3, scene.len(), 1, 5, 2).unwrap();
        let strategy = MaskStrategy::geo(GeoParams::default(), true);
        let m = compose(&scene, &layout, &strategy).unwrap();
        let spans = layout.spans();
        let obj = spans.object_segment();
        for p in 0..layout.len() {
            for q in 0..layout.len() {
                let in_obj_obj = obj.contains(&p) && obj.contains(&q);
                let in_obj_inst = obj.contains(&p) && spans.instruction.contains(&q);
                if in_obj_inst {
                    assert!(m.allows(p, q));
                } else if !in_obj_obj {
                    assert_eq!(m.allows(p, q), q <= p, "({p},{q})");
                }
            }
        }
    }

    #[test]
    fn rejects_object_count_mismatch() {
        let scene = line_scene(&[0.0, 1.0, 2.0]);
        let layout = TokenLayout::new(1, 2, 1, 1, 0).unwrap();
        assert!(matches!(
            compose(&scene, &layout, &MaskStrategy::CAUSAL),
            Err(SlimError::Config(_))
        ));
    }

    #[test]
    fn multi_token_objects_attend_within_block() {
        let scene = line_scene(&[0.0, 1.0, 5.0]);
        let layout = TokenLayout::new(1, 3, 2, 1, 1).unwrap();
        let diag = compose(&scene, &layout, &"diag".parse().unwrap()).unwrap();
        // Object 1 owns tokens 3..5.
        assert!(diag.allows(3, 4) && diag.allows(4, 3));
        assert!(!diag.allows(3, 1) && !diag.allows(4, 2));
        let causal = compose(&scene, &layout, &MaskStrategy::CAUSAL).unwrap();
        assert!(!causal.allows(3, 4));
    }

    #[test]
    fn stats_for_reference_cases() {
        let causal = causal_mask(4).unwrap();
        assert_eq!(sparsity_stats(&causal).total_allowed, 10);

        // Five points on a line with spacing chosen so every k_i = 2 under
        // Geo(2,2).
        let scene = line_scene(&[0.0, 1.0, 2.5, 4.5, 7.0]);
        let layout = TokenLayout::new(0, 5, 1, 0, 0).unwrap();
        let geo = compose(
            &scene,
            &layout,
            &MaskStrategy::geo(GeoParams::new(2, 2).unwrap(), false),
        )
        .unwrap();
        let report = sparsity_stats(&geo);
        assert_eq!(report.block_allowed[1][1], 15);
        assert_eq!(report.object_block_density, Some(0.6));
        assert_eq!(report.k_histogram, vec![0, 0, 5]);

        let full = compose(&scene, &layout, &"full".parse().unwrap()).unwrap();
        assert_eq!(sparsity_stats(&full).object_block_density, Some(1.0));
    }

    #[test]
    fn mask_file_format_is_exact() {
        let m = causal_mask(3).unwrap();
        let text = format_mask(m.allow());
        assert_eq!(text, "SLIMMASK v1 3 3\n100\n110\n111\n");
        assert_eq!(&parse_mask(&text, Path::new("m")).unwrap(), m.allow());
        assert!(parse_mask("SLIMMASK v1 2 2\n10\n1x\n", Path::new("m")).is_err());
        assert!(parse_mask("SLIMMASK v1 2 2\n10\n", Path::new("m")).is_err());
        assert!(parse_mask("SLIMMASK v1 1 2\n100\n", Path::new("m")).is_err());
    }

    #[test]
    fn sparse_view_matches_dense() {
        let m = causal_mask(5).unwrap();
        let s = m.to_sparse();
        assert_eq!(s.nnz(), 15);
        assert_eq!(s.row(2), &[0, 1, 2]);
        assert_eq!(s.rows(), 5);
    }

    proptest! {
        #[test]
        fn causal_popcount(n in 1usize..80) {
            prop_assert_eq!(causal_mask(n).unwrap().count_allowed(), n * (n + 1) / 2);
        }

        #[test]
        fn mask_text_round_trips(bits in proptest::collection::vec(any::<bool>(), 1..200), cols in 1usize..20) {
            let rows = bits.len() / cols;
            prop_assume!(rows > 0);
            let m = Matrix::from_vec(rows, cols, bits[..rows * cols].to_vec());
            prop_assert_eq!(parse_mask(&format_mask(&m), Path::new("m")).unwrap(), m);
        }
    }
}
