//! CSS-style textual scene layouts.
//!
//! ```text
//! room { width: 400cm; depth: 350cm; }
//! bed-0 { length: 200cm; width: 180cm; height: 90cm; left: 200cm; top: 100cm; orientation: 90deg; }
//! ```
//!
//! `left`/`top` give the footprint center. Lengths accept `cm`, `mm` and `m`;
//! angles accept `deg` and `rad`. The canonical form written by
//! [`serialize_layout`] is a fixed point of [`parse_layout`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{
    normalize_orientation, FloorPlan, ObjectTag, Point2, Scene, SceneError, SceneObject, Size3,
};

pub const ROOM_SELECTOR: &str = "room";
pub const ROOM_PROPERTIES: [&str; 2] = ["width", "depth"];
pub const OBJECT_PROPERTIES: [&str; 6] =
    ["length", "width", "height", "left", "top", "orientation"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Declaration {
    pub name: String,
    pub value: String,
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CssRule {
    pub selector: String,
    pub declarations: Vec<Declaration>,
    pub line: usize,
    pub column: usize,
}

impl CssRule {
    fn get(&self, name: &str) -> Option<&Declaration> {
        self.declarations.iter().find(|d| d.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CssLayoutDocument {
    pub room_rule: Option<CssRule>,
    pub object_rules: Vec<CssRule>,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLayout {
    pub document: CssLayoutDocument,
    pub scene: Scene,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    Strict,
    /// Accepts reordered and unknown properties, bare numbers, upper-case
    /// selectors and markdown code fences, collecting warnings instead.
    Lenient,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    pub mode: ParseMode,
    /// Floor used when the text carries no `room` rule (lenient mode only).
    pub default_floor: Option<FloorPlan>,
}

impl ParseOptions {
    pub fn lenient() -> Self {
        ParseOptions {
            mode: ParseMode::Lenient,
            default_floor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutErrorKind {
    #[error("unexpected end of input, expected {0}")]
    UnexpectedEof(&'static str),
    #[error("unexpected character {found:?}, expected {expected}")]
    Unexpected { found: char, expected: &'static str },
    #[error("invalid selector {0:?}")]
    InvalidSelector(String),
    #[error("duplicate selector {0:?}")]
    DuplicateSelector(String),
    #[error("unknown property {0:?}")]
    UnknownProperty(String),
    #[error("duplicate property {0:?}")]
    DuplicateProperty(String),
    #[error("missing required properties: {}", .0.join(", "))]
    MissingProperties(Vec<String>),
    #[error("property {found:?} out of canonical order (expected {expected:?})")]
    PropertyOrder { found: String, expected: String },
    #[error("malformed number {0:?}")]
    MalformedNumber(String),
    #[error("unsupported unit {unit:?} for {property}")]
    BadUnit { property: String, unit: String },
    #[error("missing room rule")]
    MissingRoom,
    #[error("room rule must come first")]
    RoomNotFirst,
    #[error("unterminated comment")]
    UnterminatedComment,
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct LayoutParseError {
    pub line: usize,
    pub column: usize,
    pub selector: Option<String>,
    pub kind: LayoutErrorKind,
}

impl fmt::Display for LayoutParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}", self.line, self.column)?;
        if let Some(sel) = &self.selector {
            write!(f, " in `{sel}`")?;
        }
        write!(f, ": {}", self.kind)
    }
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    line: usize,
    column: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Cursor {
            chars: text.char_indices().peekable(),
            line: 1,
            column: 1,
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().map(|&(_, c)| c)
    }

    fn bump(&mut self) -> Option<char> {
        let (_, c) = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn pos(&self) -> (usize, usize) {
        (self.line, self.column)
    }

    fn err(&self, kind: LayoutErrorKind) -> LayoutParseError {
        LayoutParseError {
            line: self.line,
            column: self.column,
            selector: None,
            kind,
        }
    }

    /// Skips whitespace and `/* */` comments.
    fn skip_trivia(&mut self) -> Result<(), LayoutParseError> {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('/') => {
                    let mut look = self.chars.clone();
                    look.next();
                    if look.peek().map(|&(_, c)| c) != Some('*') {
                        return Ok(());
                    }
                    let start = self.err(LayoutErrorKind::UnterminatedComment);
                    self.bump();
                    self.bump();
                    let mut prev = '\0';
                    loop {
                        match self.bump() {
                            Some('/') if prev == '*' => break,
                            Some(c) => prev = c,
                            None => return Err(start),
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn expect(&mut self, want: char, expected: &'static str) -> Result<(), LayoutParseError> {
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            Some(found) => Err(self.err(LayoutErrorKind::Unexpected { found, expected })),
            None => Err(self.err(LayoutErrorKind::UnexpectedEof(expected))),
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> String {
        let mut out = String::new();
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            out.push(c);
            self.bump();
        }
        out
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '_'
}

fn parse_rules(text: &str) -> Result<Vec<CssRule>, LayoutParseError> {
    let mut cur = Cursor::new(text);
    let mut rules = Vec::new();
    loop {
        cur.skip_trivia()?;
        if cur.peek().is_none() {
            return Ok(rules);
        }
        let (line, column) = cur.pos();
        let selector = cur.take_while(is_ident_char);
        if selector.is_empty() {
            let found = cur.peek().unwrap_or('\0');
            return Err(cur.err(LayoutErrorKind::Unexpected {
                found,
                expected: "selector",
            }));
        }
        let with_sel = |mut e: LayoutParseError, sel: &str| {
            e.selector = Some(sel.to_string());
            e
        };
        cur.skip_trivia().map_err(|e| with_sel(e, &selector))?;
        cur.expect('{', "'{'").map_err(|e| with_sel(e, &selector))?;
        let declarations = parse_declarations(&mut cur).map_err(|e| with_sel(e, &selector))?;
        rules.push(CssRule {
            selector,
            declarations,
            line,
            column,
        });
    }
}

fn parse_declarations(cur: &mut Cursor<'_>) -> Result<Vec<Declaration>, LayoutParseError> {
    let mut decls = Vec::new();
    loop {
        cur.skip_trivia()?;
        match cur.peek() {
            None => return Err(cur.err(LayoutErrorKind::UnexpectedEof("'}'"))),
            Some('}') => {
                cur.bump();
                return Ok(decls);
            }
            Some(';') => {
                cur.bump();
                continue;
            }
            _ => {}
        }
        let (line, column) = cur.pos();
        let name = cur.take_while(is_ident_char);
        if name.is_empty() {
            let found = cur.peek().unwrap_or('\0');
            return Err(cur.err(LayoutErrorKind::Unexpected {
                found,
                expected: "property name",
            }));
        }
        cur.skip_trivia()?;
        cur.expect(':', "':'")?;
        let mut value = String::new();
        loop {
            cur.skip_trivia()?;
            let chunk = cur.take_while(|c| c != ';' && c != '}' && c != '/' && !c.is_whitespace());
            if chunk.is_empty() {
                match cur.peek() {
                    // a lone '/' that does not open a comment
                    Some('/') => {
                        value.push('/');
                        cur.bump();
                        continue;
                    }
                    _ => break,
                }
            }
            if !value.is_empty() {
                value.push(' ');
            }
            value.push_str(&chunk);
        }
        match cur.peek() {
            Some(';') => {
                cur.bump();
            }
            Some('}') => {}
            _ => return Err(cur.err(LayoutErrorKind::UnexpectedEof("';' or '}'"))),
        }
        decls.push(Declaration {
            name: name.to_ascii_lowercase(),
            value,
            line,
            column,
        });
    }
}

#[derive(Clone, Copy)]
enum Quantity {
    Length,
    Angle,
}

fn parse_quantity(
    decl: &Declaration,
    quantity: Quantity,
    mode: ParseMode,
    warnings: &mut Vec<String>,
    selector: &str,
) -> Result<f64, LayoutParseError> {
    let err = |kind| LayoutParseError {
        line: decl.line,
        column: decl.column,
        selector: Some(selector.to_string()),
        kind,
    };
    let v = decl.value.trim();
    let split = v
        .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
        .unwrap_or(v.len());
    let (num, unit) = v.split_at(split);
    let number: f64 = num
        .trim()
        .parse()
        .ok()
        .filter(|n: &f64| n.is_finite())
        .ok_or_else(|| err(LayoutErrorKind::MalformedNumber(decl.value.clone())))?;
    let unit = unit.trim().to_ascii_lowercase();
    let bad_unit = || {
        err(LayoutErrorKind::BadUnit {
            property: decl.name.clone(),
            unit: unit.clone(),
        })
    };
    let value = match (quantity, unit.as_str()) {
        (Quantity::Length, "cm") => number / 100.0,
        (Quantity::Length, "mm") => number / 1000.0,
        (Quantity::Length, "m") => number,
        (Quantity::Angle, "deg") => number,
        (Quantity::Angle, "rad") => number.to_degrees(),
        (_, "") if mode == ParseMode::Lenient => {
            warnings.push(format!(
                "{selector}: {} has no unit, assuming {}",
                decl.name,
                match quantity {
                    Quantity::Length => "cm",
                    Quantity::Angle => "deg",
                }
            ));
            match quantity {
                Quantity::Length => number / 100.0,
                Quantity::Angle => number,
            }
        }
        _ => return Err(bad_unit()),
    };
    if !value.is_finite() {
        return Err(err(LayoutErrorKind::MalformedNumber(decl.value.clone())));
    }
    Ok(value)
}

/// Checks the declaration set of one rule against its required properties.
fn check_properties(
    rule: &CssRule,
    required: &[&str],
    mode: ParseMode,
    warnings: &mut Vec<String>,
) -> Result<(), LayoutParseError> {
    let err = |line, column, kind| LayoutParseError {
        line,
        column,
        selector: Some(rule.selector.clone()),
        kind,
    };
    let mut seen = HashSet::new();
    for d in &rule.declarations {
        if !seen.insert(d.name.as_str()) {
            return Err(err(
                d.line,
                d.column,
                LayoutErrorKind::DuplicateProperty(d.name.clone()),
            ));
        }
        if !required.contains(&d.name.as_str()) {
            if mode == ParseMode::Strict {
                return Err(err(
                    d.line,
                    d.column,
                    LayoutErrorKind::UnknownProperty(d.name.clone()),
                ));
            }
            warnings.push(format!(
                "{}: ignoring unknown property {:?}",
                rule.selector, d.name
            ));
        }
    }
    let missing: Vec<String> = required
        .iter()
        .filter(|p| !seen.contains(**p))
        .map(|p| p.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(err(
            rule.line,
            rule.column,
            LayoutErrorKind::MissingProperties(missing),
        ));
    }
    if mode == ParseMode::Strict {
        for (d, expected) in rule.declarations.iter().zip(required) {
            if d.name != *expected {
                return Err(err(
                    d.line,
                    d.column,
                    LayoutErrorKind::PropertyOrder {
                        found: d.name.clone(),
                        expected: expected.to_string(),
                    },
                ));
            }
        }
    }
    Ok(())
}

/// Blanks code fences and top-level prose lines, keeping line numbers.
/// Returns the cleaned text and the number of prose lines dropped.
fn strip_noise(text: &str) -> (String, usize) {
    let mut depth = 0usize;
    let mut dropped = 0;
    let lines: Vec<&str> = text
        .lines()
        .map(|l| {
            let t = l.trim();
            if t.starts_with("```") {
                return "";
            }
            let selector_like = !t.is_empty()
                && t.chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            let keep =
                depth > 0 || t.is_empty() || t.contains('{') || t.contains('}') || selector_like;
            for c in l.chars() {
                match c {
                    '{' => depth += 1,
                    '}' => depth = depth.saturating_sub(1),
                    _ => {}
                }
            }
            if keep {
                l
            } else {
                dropped += 1;
                ""
            }
        })
        .collect();
    (lines.join("\n"), dropped)
}

/// Parses canonical layout text in strict mode.
pub fn parse_layout(text: &str) -> Result<ParsedLayout, LayoutParseError> {
    parse_layout_with(text, &ParseOptions::default())
}

pub fn parse_layout_with(
    text: &str,
    options: &ParseOptions,
) -> Result<ParsedLayout, LayoutParseError> {
    let mode = options.mode;
    let mut warnings = Vec::new();
    let source = match mode {
        ParseMode::Strict => text.to_string(),
        ParseMode::Lenient => {
            let (cleaned, dropped) = strip_noise(text);
            if dropped > 0 {
                warnings.push(format!("ignored {dropped} line(s) of non-CSS text"));
            }
            cleaned
        }
    };
    let rules = parse_rules(&source)?;
    let mut room_rule = None;
    let mut object_rules = Vec::new();
    let mut objects = Vec::new();
    let mut selectors = HashSet::new();

    for (i, mut rule) in rules.into_iter().enumerate() {
        if mode == ParseMode::Lenient {
            rule.selector = rule.selector.to_ascii_lowercase();
        }
        let rule_err = |kind| LayoutParseError {
            line: rule.line,
            column: rule.column,
            selector: Some(rule.selector.clone()),
            kind,
        };
        if !selectors.insert(rule.selector.clone()) {
            return Err(rule_err(LayoutErrorKind::DuplicateSelector(
                rule.selector.clone(),
            )));
        }
        if rule.selector == ROOM_SELECTOR {
            if mode == ParseMode::Strict && i != 0 {
                return Err(rule_err(LayoutErrorKind::RoomNotFirst));
            }
            check_properties(&rule, &ROOM_PROPERTIES, mode, &mut warnings)?;
            room_rule = Some(rule);
            continue;
        }
        let tag: ObjectTag = rule
            .selector
            .parse()
            .map_err(|_| rule_err(LayoutErrorKind::InvalidSelector(rule.selector.clone())))?;
        check_properties(&rule, &OBJECT_PROPERTIES, mode, &mut warnings)?;
        let sel = rule.selector.as_str();
        let q = |name: &str, quantity, warnings: &mut Vec<String>| {
            parse_quantity(
                rule.get(name).expect("checked"),
                quantity,
                mode,
                warnings,
                sel,
            )
        };
        let size = Size3 {
            length: q("length", Quantity::Length, &mut warnings)?,
            width: q("width", Quantity::Length, &mut warnings)?,
            height: q("height", Quantity::Length, &mut warnings)?,
        };
        let location = Point2 {
            x: q("left", Quantity::Length, &mut warnings)?,
            y: q("top", Quantity::Length, &mut warnings)?,
        };
        let orientation = q("orientation", Quantity::Angle, &mut warnings)?;
        let object = SceneObject::new(tag, size, location, orientation)
            .map_err(|e| rule_err(LayoutErrorKind::Scene(e)))?;
        objects.push(object);
        object_rules.push(rule);
    }

    let floor = match &room_rule {
        Some(rule) => {
            let sel = ROOM_SELECTOR;
            let width = parse_quantity(
                rule.get("width").expect("checked"),
                Quantity::Length,
                mode,
                &mut warnings,
                sel,
            )?;
            let depth = parse_quantity(
                rule.get("depth").expect("checked"),
                Quantity::Length,
                mode,
                &mut warnings,
                sel,
            )?;
            FloorPlan::new(width, depth).map_err(|e| LayoutParseError {
                line: rule.line,
                column: rule.column,
                selector: Some(sel.to_string()),
                kind: LayoutErrorKind::Scene(e),
            })?
        }
        None => match (mode, options.default_floor) {
            (ParseMode::Lenient, Some(f)) => f,
            _ => {
                let lines = source.lines().count().max(1);
                return Err(LayoutParseError {
                    line: lines,
                    column: 1,
                    selector: None,
                    kind: LayoutErrorKind::MissingRoom,
                });
            }
        },
    };

    let scene = Scene::new(floor, objects).map_err(|e| LayoutParseError {
        line: 1,
        column: 1,
        selector: None,
        kind: LayoutErrorKind::Scene(e),
    })?;
    Ok(ParsedLayout {
        document: CssLayoutDocument {
            room_rule,
            object_rules,
            raw: text.to_string(),
        },
        scene,
        warnings,
    })
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn format_number(x: f64) -> String {
    let r = round2(x);
    let s = if (r - r.round()).abs() < 1e-9 {
        format!("{:.0}", r.round())
    } else {
        format!("{r:.2}")
    };
    if s == "-0" || s == "-0.00" {
        "0".to_string()
    } else {
        s
    }
}

fn format_cm(meters: f64) -> String {
    format!("{}cm", format_number(meters * 100.0))
}

fn format_deg(deg: f64) -> String {
    let d = normalize_orientation(round2(deg)).unwrap_or(0.0);
    format!("{}deg", format_number(d))
}

/// The canonical room rule for a floor plan.
pub fn room_rule(floor: &FloorPlan) -> String {
    format!(
        "{ROOM_SELECTOR} {{ width: {}; depth: {}; }}",
        format_cm(floor.width),
        format_cm(floor.depth)
    )
}

/// Writes the canonical text form: the room rule, then one rule per object in
/// scene order. Lines are joined with `\n` without a trailing newline.
pub fn serialize_layout(scene: &Scene) -> String {
    let mut lines = Vec::with_capacity(scene.objects.len() + 1);
    lines.push(room_rule(&scene.floor));
    for o in &scene.objects {
        lines.push(format!(
            "{} {{ length: {}; width: {}; height: {}; left: {}; top: {}; orientation: {}; }}",
            o.tag(),
            format_cm(o.size.length),
            format_cm(o.size.width),
            format_cm(o.size.height),
            format_cm(o.location.x),
            format_cm(o.location.y),
            format_deg(o.orientation),
        ));
    }
    lines.join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsViolation {
    pub selector: String,
    pub overhang: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPair {
    pub first: String,
    pub second: String,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayoutValidationReport {
    pub in_bounds_violations: Vec<BoundsViolation>,
    pub overlap_pairs: Vec<OverlapPair>,
    pub parse_warnings: Vec<String>,
}

impl LayoutValidationReport {
    pub fn is_clean(&self) -> bool {
        self.in_bounds_violations.is_empty()
            && self.overlap_pairs.is_empty()
            && self.parse_warnings.is_empty()
    }
}

/// Reports footprints leaving the floor by more than `bounds_tol` meters and
/// footprint pairs intersecting by more than `overlap_tol` square meters.
///
/// Both lists are sorted by selector, and each overlap pair is stored with
/// its selectors in ascending order, so the report does not depend on the
/// order of objects in the scene.
pub fn validate_layout(scene: &Scene, bounds_tol: f64, overlap_tol: f64) -> LayoutValidationReport {
    let floor = scene.floor.bounds();
    let boxes: Vec<(String, _)> = scene
        .objects
        .iter()
        .map(|o| (o.tag().to_string(), o.footprint()))
        .collect();

    let mut in_bounds_violations: Vec<BoundsViolation> = boxes
        .iter()
        .filter_map(|(sel, r)| {
            let overhang = r.overhang(&floor);
            (overhang > bounds_tol).then(|| BoundsViolation {
                selector: sel.clone(),
                overhang,
            })
        })
        .collect();
    in_bounds_violations.sort_by(|a, b| a.selector.cmp(&b.selector));

    let mut overlap_pairs = Vec::new();
    for (i, (sa, ra)) in boxes.iter().enumerate() {
        for (sb, rb) in &boxes[i + 1..] {
            let area = ra.intersection_area(rb);
            if area > overlap_tol {
                let (first, second) = if sa <= sb { (sa, sb) } else { (sb, sa) };
                overlap_pairs.push(OverlapPair {
                    first: first.clone(),
                    second: second.clone(),
                    area,
                });
            }
        }
    }
    overlap_pairs.sort_by(|a, b| (&a.first, &a.second).cmp(&(&b.first, &b.second)));

    LayoutValidationReport {
        in_bounds_violations,
        overlap_pairs,
        parse_warnings: Vec::new(),
    }
}
