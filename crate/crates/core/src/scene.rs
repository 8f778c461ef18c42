//! Scene and token-layout domain types, plus the `SLIMSCENE` / `SLIMLAYOUT`
//! text formats.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Result, SlimError};

pub const SCENE_MAGIC: &str = "SLIMSCENE";
pub const LAYOUT_MAGIC: &str = "SLIMLAYOUT";
pub const FORMAT_VERSION: &str = "v1";

/// A point in scene space. Units are meters by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn first_non_finite_axis(&self) -> Option<char> {
        [('x', self.x), ('y', self.y), ('z', self.z)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(axis, _)| axis)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(v: [f64; 3]) -> Self {
        Point3::new(v[0], v[1], v[2])
    }
}

/// One detected object: an identifier and its center.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: String,
    pub center: Point3,
}

/// Ordered, non-empty set of objects with unique ids.
///
/// The order is the order in which object tokens appear in the decoder input
/// and carries no geometric meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObjects {
    objects: Vec<SceneObject>,
}

impl SceneObjects {
    pub fn new(objects: Vec<SceneObject>) -> Result<Self> {
        if objects.is_empty() {
            return Err(SlimError::config("a scene needs at least one object"));
        }
        let mut seen = HashSet::with_capacity(objects.len());
        for obj in &objects {
            if obj.id.is_empty() || obj.id.chars().any(char::is_whitespace) {
                return Err(SlimError::config(format!(
                    "object id `{}` must be non-empty and free of whitespace",
                    obj.id
                )));
            }
            if let Some(axis) = obj.center.first_non_finite_axis() {
                return Err(SlimError::NonFiniteCoordinate {
                    id: obj.id.clone(),
                    axis,
                });
            }
            if !seen.insert(obj.id.as_str()) {
                return Err(SlimError::DuplicateId(obj.id.clone()));
            }
        }
        Ok(SceneObjects { objects })
    }

    /// Builds a scene from bare centers, naming objects `OBJ000`, `OBJ001`, ...
    pub fn from_centers<I, P>(centers: I) -> Result<Self>
    where
        I: IntoIterator<Item = P>,
        P: Into<Point3>,
    {
        let objects = centers
            .into_iter()
            .enumerate()
            .map(|(i, c)| SceneObject {
                id: format!("OBJ{i:03}"),
                center: c.into(),
            })
            .collect();
        SceneObjects::new(objects)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn centers(&self) -> impl ExactSizeIterator<Item = Point3> + '_ {
        self.objects.iter().map(|o| o.center)
    }

    pub fn center(&self, i: usize) -> Point3 {
        self.objects[i].center
    }

    /// Returns the scene with objects reordered so that new position `i`
    /// holds old object `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.len())?;
        let objects = perm.iter().map(|&p| self.objects[p].clone()).collect();
        Ok(SceneObjects { objects })
    }

    /// Applies `f` to every center, keeping ids and order.
    pub fn map_centers(&self, mut f: impl FnMut(Point3) -> Point3) -> Result<Self> {
        let objects = self
            .objects
            .iter()
            .map(|o| SceneObject {
                id: o.id.clone(),
                center: f(o.center),
            })
            .collect();
        SceneObjects::new(objects)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(SlimError::config(format!(
            "permutation has length {} but {n} items were expected",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(SlimError::config("not a permutation"));
        }
    }
    Ok(())
}

/// Segment sizes of the multi-modal token sequence.
///
/// Segments always appear in the order system, objects, instruction,
/// response. Each object occupies `tokens_per_object` consecutive tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenLayout {
    pub n_system: usize,
    pub n_objects: usize,
    pub tokens_per_object: usize,
    pub n_instruction: usize,
    pub n_response: usize,
}

/// Half-open token ranges for each segment of a [`TokenLayout`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSpans {
    pub system: Range<usize>,
    pub objects: Vec<Range<usize>>,
    pub instruction: Range<usize>,
    pub response: Range<usize>,
}

impl SegmentSpans {
    /// The whole object segment as one range.
    pub fn object_segment(&self) -> Range<usize> {
        self.system.end..self.instruction.start
    }
}

impl TokenLayout {
    pub fn new(
        n_system: usize,
        n_objects: usize,
        tokens_per_object: usize,
        n_instruction: usize,
        n_response: usize,
    ) -> Result<Self> {
        if tokens_per_object == 0 {
            return Err(SlimError::config("tokens_per_object must be positive"));
        }
        let layout = TokenLayout {
            n_system,
            n_objects,
            tokens_per_object,
            n_instruction,
            n_response,
        };
        if layout.is_empty() {
            return Err(SlimError::config("layout describes an empty sequence"));
        }
        Ok(layout)
    }

    /// One token per object, the default for object-centric decoders.
    pub fn single_token(
        n_system: usize,
        n_objects: usize,
        n_instruction: usize,
        n_response: usize,
    ) -> Result<Self> {
        TokenLayout::new(n_system, n_objects, 1, n_instruction, n_response)
    }

    pub fn n_object_tokens(&self) -> usize {
        self.n_objects * self.tokens_per_object
    }

    /// Total sequence length.
    pub fn len(&self) -> usize {
        self.n_system + self.n_object_tokens() + self.n_instruction + self.n_response
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spans(&self) -> SegmentSpans {
        let obj_start = self.n_system;
        let inst_start = obj_start + self.n_object_tokens();
        let resp_start = inst_start + self.n_instruction;
        let tpo = self.tokens_per_object;
        SegmentSpans {
            system: 0..obj_start,
            objects: (0..self.n_objects)
                .map(|i| obj_start + i * tpo..obj_start + (i + 1) * tpo)
                .collect(),
            instruction: inst_start..resp_start,
            response: resp_start..resp_start + self.n_response,
        }
    }

    /// Object index owning token `p`, if `p` lies in the object segment.
    pub fn object_of_token(&self, p: usize) -> Option<usize> {
        let start = self.n_system;
        (start..start + self.n_object_tokens())
            .contains(&p)
            .then(|| (p - start) / self.tokens_per_object)
    }

    pub fn check_scene(&self, scene: &SceneObjects) -> Result<()> {
        if self.n_objects != scene.len() {
            return Err(SlimError::config(format!(
                "layout declares {} objects but the scene has {}",
                self.n_objects,
                scene.len()
            )));
        }
        Ok(())
    }
}

/// Free-function form of [`TokenLayout::spans`].
pub fn segment_spans(layout: &TokenLayout) -> SegmentSpans {
    layout.spans()
}

// ---------------------------------------------------------------------------
// Scene files
// ---------------------------------------------------------------------------

pub fn format_scene(scene: &SceneObjects) -> String {
    let mut out = format!("{SCENE_MAGIC} {FORMAT_VERSION} {}\n", scene.len());
    for obj in scene.objects() {
        let c = obj.center;
        // `{}` on f64 prints the shortest representation that round-trips.
        writeln!(out, "{} {} {} {}", obj.id, c.x, c.y, c.z).unwrap();
    }
    out
}

pub fn parse_scene(text: &str, origin: &Path) -> Result<SceneObjects> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| SlimError::parse(origin, 1, "empty file, expected scene header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let declared = match fields.as_slice() {
        [magic, version, count] if *magic == SCENE_MAGIC && *version == FORMAT_VERSION => {
            count.parse::<usize>().map_err(|_| {
                SlimError::parse(
                    origin,
                    1,
                    format!("object count `{count}` is not an integer"),
                )
            })?
        }
        _ => {
            return Err(SlimError::parse(
                origin,
                1,
                format!("expected `{SCENE_MAGIC} {FORMAT_VERSION} <N>`, found `{header}`"),
            ))
        }
    };

    let mut objects = Vec::with_capacity(declared);
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if objects.len() == declared {
            return Err(SlimError::parse(
                origin,
                lineno,
                format!("more object lines than the declared {declared}"),
            ));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, xs, ys, zs] = fields.as_slice() else {
            return Err(SlimError::parse(
                origin,
                lineno,
                format!("expected `<id> <x> <y> <z>`, found {} fields", fields.len()),
            ));
        };
        let mut coord = [0.0; 3];
        for ((slot, text), axis) in coord.iter_mut().zip([xs, ys, zs]).zip(['x', 'y', 'z']) {
            *slot = text.parse::<f64>().map_err(|_| {
                SlimError::parse(
                    origin,
                    lineno,
                    format!("{axis} coordinate `{text}` is not a number"),
                )
            })?;
        }
        objects.push(SceneObject {
            id: id.to_string(),
            center: coord.into(),
        });
    }
    if objects.len() != declared {
        return Err(SlimError::parse(
            origin,
            text.lines().count().max(1),
            format!(
                "header declares {declared} objects but {} were found",
                objects.len()
            ),
        ));
    }
    SceneObjects::new(objects)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneObjects> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_scene(&text, path)
}

pub fn save_scene(scene: &SceneObjects, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_scene(scene))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Layout files
// ---------------------------------------------------------------------------

const LAYOUT_KEYS: [&str; 5] = [
    "system",
    "tokens_per_object",
    "objects",
    "instruction",
    "response",
];

pub fn format_layout(layout: &TokenLayout) -> String {
    let values = [
        layout.n_system,
        layout.tokens_per_object,
        layout.n_objects,
        layout.n_instruction,
        layout.n_response,
    ];
    let mut out = format!("{LAYOUT_MAGIC} {FORMAT_VERSION}\n");
    for (key, value) in LAYOUT_KEYS.iter().zip(values) {
        writeln!(out, "{key}={value}").unwrap();
    }
    out
}

pub fn parse_layout(text: &str, origin: &Path) -> Result<TokenLayout> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, header)) if header.split_whitespace().eq([LAYOUT_MAGIC, FORMAT_VERSION]) => {}
        Some((lineno, header)) => {
            return Err(SlimError::parse(
                origin,
                lineno,
                format!("expected `{LAYOUT_MAGIC} {FORMAT_VERSION}`, found `{header}`"),
            ))
        }
        None => {
            return Err(SlimError::parse(
                origin,
                1,
                "empty file, expected layout header",
            ))
        }
    }

    let mut values = [0usize; 5];
    let mut last_line = 1;
    for (slot, key) in values.iter_mut().zip(LAYOUT_KEYS) {
        let (lineno, line) = lines.next().ok_or_else(|| {
            SlimError::parse(origin, last_line + 1, format!("missing `{key}=` line"))
        })?;
        last_line = lineno;
        let (found_key, value) = line.split_once('=').ok_or_else(|| {
            SlimError::parse(
                origin,
                lineno,
                format!("expected `{key}=<int>`, found `{line}`"),
            )
        })?;
        if found_key.trim() != key {
            return Err(SlimError::parse(
                origin,
                lineno,
                format!("expected key `{key}`, found `{}`", found_key.trim()),
            ));
        }
        *slot = value.trim().parse().map_err(|_| {
            SlimError::parse(
                origin,
                lineno,
                format!(
                    "value of `{key}` is not a non-negative integer: `{}`",
                    value.trim()
                ),
            )
        })?;
    }
    if let Some((lineno, line)) = lines.next() {
        return Err(SlimError::parse(
            origin,
            lineno,
            format!("unexpected trailing line `{line}`"),
        ));
    }
    let [system, tokens_per_object, objects, instruction, response] = values;
    TokenLayout::new(system, objects, tokens_per_object, instruction, response)
        .map_err(|e| SlimError::parse(origin, last_line, e.to_string()))
}

pub fn load_layout(path: impl AsRef<Path>) -> Result<TokenLayout> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_layout(&text, path)
}

pub fn save_layout(layout: &TokenLayout, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_layout(layout))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn here() -> &'static Path {
        Path::new("<test>")
    }

    #[test]
    fn parses_two_objects_in_order() {
        let text = "SLIMSCENE v1 2\nB 0 0 0\nA 1 0 0\n";
        let scene = parse_scene(text, here()).unwrap();
        assert_eq!(scene.len(), 2);
        assert_eq!(scene.objects()[0].id, "B");
        assert_eq!(scene.objects()[1].center, Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let text = "SLIMSCENE v1 2\nOBJ000 0 0 0\nOBJ000 1 0 0\n";
        let err = parse_scene(text, here()).unwrap_err();
        assert!(
            matches!(err, SlimError::DuplicateId(ref id) if id == "OBJ000"),
            "{err}"
        );
    }

    #[test]
    fn rejects_nan_coordinate() {
        let text = "SLIMSCENE v1 1\nOBJ000 0 NaN 0\n";
        let err = parse_scene(text, here()).unwrap_err();
        assert!(
            matches!(err, SlimError::NonFiniteCoordinate { axis: 'y', .. }),
            "{err}"
        );
    }

    #[test]
    fn reports_line_of_bad_field() {
        let text = "SLIMSCENE v1 2\nA 0 0 0\nB 0 zero 0\n";
        match parse_scene(text, here()).unwrap_err() {
            SlimError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("y coordinate"), "{message}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn rejects_count_mismatch_and_bad_header() {
        assert!(parse_scene("SLIMSCENE v1 3\nA 0 0 0\n", here()).is_err());
        assert!(parse_scene("SLIMSCENE v2 1\nA 0 0 0\n", here()).is_err());
        assert!(parse_scene("SLIMSCENE v1 1\nA 0 0 0\nB 1 1 1\n", here()).is_err());
        assert!(parse_scene("SLIMSCENE v1 0\n", here()).is_err());
        assert!(parse_scene("", here()).is_err());
    }

    #[test]
    fn spans_with_all_segments() {
        let layout = TokenLayout::new(2, 2, 1, 3, 0).unwrap();
        let spans = layout.spans();
        assert_eq!(spans.system, 0..2);
        assert_eq!(spans.objects, vec![2..3, 3..4]);
        assert_eq!(spans.instruction, 4..7);
        assert_eq!(spans.response, 7..7);
    }

    #[test]
    fn spans_with_multi_token_objects() {
        let layout = TokenLayout::new(0, 2, 3, 0, 0).unwrap();
        assert_eq!(layout.spans().objects, vec![0..3, 3..6]);
        assert_eq!(layout.object_of_token(4), Some(1));
        assert_eq!(layout.object_of_token(6), None);
    }

    #[test]
    fn spans_single_object() {
        let layout = TokenLayout::new(0, 1, 1, 0, 0).unwrap();
        let spans = segment_spans(&layout);
        assert_eq!(spans.objects, vec![0..1]);
        assert_eq!(layout.len(), 1);
    }

    #[test]
    fn layout_round_trip_and_errors() {
        let layout = TokenLayout::new(3, 7, 2, 4, 1).unwrap();
        let text = format_layout(&layout);
        assert_eq!(
            text,
            "SLIMLAYOUT v1\nsystem=3\ntokens_per_object=2\nobjects=7\ninstruction=4\nresponse=1\n"
        );
        assert_eq!(parse_layout(&text, here()).unwrap(), layout);

        let swapped =
            "SLIMLAYOUT v1\ntokens_per_object=1\nsystem=3\nobjects=7\ninstruction=4\nresponse=1\n";
        assert!(parse_layout(swapped, here()).is_err());
        let zero_tpo =
            "SLIMLAYOUT v1\nsystem=3\ntokens_per_object=0\nobjects=7\ninstruction=4\nresponse=1\n";
        assert!(parse_layout(zero_tpo, here()).is_err());
        let negative =
            "SLIMLAYOUT v1\nsystem=-1\ntokens_per_object=1\nobjects=7\ninstruction=4\nresponse=1\n";
        assert!(parse_layout(negative, here()).is_err());
    }

    #[test]
    fn permuted_rejects_non_permutations() {
        let scene = SceneObjects::from_centers([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(scene.permuted(&[0, 0]).is_err());
        assert!(scene.permuted(&[0]).is_err());
        let p = scene.permuted(&[1, 0]).unwrap();
        assert_eq!(p.objects()[0].id, "OBJ001");
    }

    proptest! {
        #[test]
        fn spans_partition_the_sequence(
            sys in 0usize..6, n in 0usize..9, tpo in 1usize..4, inst in 0usize..6, resp in 0usize..4,
        ) {
            prop_assume!(sys + n * tpo + inst + resp > 0);
            let layout = TokenLayout::new(sys, n, tpo, inst, resp).unwrap();
            let spans = layout.spans();
            let mut ranges = vec![spans.system.clone()];
            ranges.extend(spans.objects.iter().cloned());
            ranges.push(spans.instruction.clone());
            ranges.push(spans.response.clone());
            let mut cursor = 0;
            for r in &ranges {
                prop_assert_eq!(r.start, cursor);
                prop_assert!(r.end >= r.start);
                cursor = r.end;
            }
            prop_assert_eq!(cursor, layout.len());
            for r in &spans.objects {
                prop_assert_eq!(r.len(), tpo);
            }
        }

        #[test]
        fn scene_text_round_trips(
            coords in proptest::collection::vec(
                (-1e6f64..1e6, -1e6f64..1e6, -1e-3f64..1e-3), 1..20),
        ) {
            let scene = SceneObjects::from_centers(coords.iter().map(|&(x, y, z)| [x, y, z])).unwrap();
            let back = parse_scene(&format_scene(&scene), here()).unwrap();
            prop_assert_eq!(back, scene);
        }
    }
}
