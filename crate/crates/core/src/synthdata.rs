//! Procedural synthetic streams, where some classes can only be told apart by
//! what happened earlier, plus the feature and annotation file formats.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::error::{HatError, Result};
use crate::kvfile::{self, parse_list, parse_num};
use crate::numerics::Tensor;
use crate::prediction::GroundTruthInstance;

const FEATURE_MAGIC: &[u8; 4] = b"HATF";
const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralGrammar {
    pub classes: usize,
    /// Number of previous actions the transition rule looks at.
    pub order: usize,
    pub feature_dim: usize,
    pub noise: f64,
    /// Inclusive `(min, max)` action duration per class.
    pub durations: Vec<(u32, u32)>,
    /// Inclusive `(min, max)` background gap before every action.
    pub gap: (u32, u32),
    /// Pairs of classes that share one prototype.
    pub ambiguous: Vec<(usize, usize)>,
    /// Context the walk starts from (`order` classes).
    pub start: Vec<usize>,
    /// Last-`order` classes → next-class distribution. Unlisted contexts are uniform.
    pub transitions: BTreeMap<Vec<usize>, Vec<(usize, f64)>>,
    pub prototype_seed: u64,
    pub prototype_scale: f64,
}

impl Default for ProceduralGrammar {
    /// Cycle `U1 → U2 → A`: `U1 ∈ {0,1}` and `U2 ∈ {2,3}` are drawn uniformly,
    /// and `A ∈ {4..7}` is fixed by both. `4/5` and `6/7` look identical, so
    /// telling them apart requires remembering `U1`.
    fn default() -> Self {
        let mut transitions = BTreeMap::new();
        for u1 in 0..2 {
            for u2 in 2..4 {
                transitions.insert(vec![u1, u2], vec![(4 + u1 + 2 * (u2 - 2), 1.0)]);
            }
        }
        for a in 4..8 {
            for u1 in 0..2 {
                transitions.insert(vec![a, u1], vec![(2, 0.5), (3, 0.5)]);
            }
            for u2 in 2..4 {
                transitions.insert(vec![u2, a], vec![(0, 0.5), (1, 0.5)]);
            }
        }
        ProceduralGrammar {
            classes: 8,
            order: 2,
            feature_dim: 32,
            noise: 0.1,
            durations: vec![(4, 10); 8],
            gap: (2, 6),
            ambiguous: vec![(4, 5), (6, 7)],
            start: vec![2, 4],
            transitions,
            prototype_seed: 7,
            prototype_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationReport {
    pub unreachable: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    /// `T × feature_dim`
    pub features: Tensor<f32>,
    pub annotations: Vec<GroundTruthInstance>,
    pub seed: u64,
}

fn parse_pair(v: &str) -> std::result::Result<(u32, u32), String> {
    match parse_list::<u32>(v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected `min,max`, found `{v}`")),
    }
}

fn parse_distribution(v: &str) -> std::result::Result<Vec<(usize, f64)>, String> {
    v.split(',')
        .map(|item| {
            let (c, p) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("expected `class:probability`, found `{}`", item.trim()))?;
            Ok((parse_num(c.trim())?, parse_num(p.trim())?))
        })
        .collect()
}

impl ProceduralGrammar {
    /// Parses a grammar file. Keys missing from the file keep the defaults,
    /// except that any `transition.*` line replaces the whole default table.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let entries = kvfile::parse(text, path)?;
        let mut g = ProceduralGrammar::default();
        let mut errors = Vec::new();
        let mut lines: BTreeMap<String, usize> = BTreeMap::new();
        let mut default_duration: Option<(u32, u32)> = None;
        let mut per_class: Vec<(usize, (u32, u32), usize)> = Vec::new();
        let mut transitions = BTreeMap::new();
        let mut ambiguous = Vec::new();
        for e in &entries {
            lines.insert(e.key.clone(), e.line);
            let parts: Vec<&str> = e.key.split('.').collect();
            let r: std::result::Result<(), String> = (|| {
                match parts.as_slice() {
                    ["classes"] => g.classes = parse_num(&e.value)?,
                    ["order"] => g.order = parse_num(&e.value)?,
                    ["feature_dim"] => g.feature_dim = parse_num(&e.value)?,
                    ["noise"] => g.noise = parse_num(&e.value)?,
                    ["gap"] => g.gap = parse_pair(&e.value)?,
                    ["duration"] => default_duration = Some(parse_pair(&e.value)?),
                    ["duration", c] => per_class.push((parse_num(c)?, parse_pair(&e.value)?, e.line)),
                    ["start"] => g.start = parse_list(&e.value)?,
                    ["prototype_seed"] => g.prototype_seed = parse_num(&e.value)?,
                    ["prototype_scale"] => g.prototype_scale = parse_num(&e.value)?,
                    ["ambiguous", _] => match parse_list::<usize>(&e.value)?.as_slice() {
                        [a, b] => ambiguous.push((*a, *b)),
                        _ => return Err(format!("expected `a,b`, found `{}`", e.value)),
                    },
                    ["transition", ctx @ ..] => {
                        let ctx: Vec<usize> = ctx.iter().map(|c| parse_num(c)).collect::<std::result::Result<_, _>>()?;
                        transitions.insert(ctx, (parse_distribution(&e.value)?, e.line));
                    }
                    _ => return Err(format!("unknown key `{}`", e.key)),
                }
                Ok(())
            })();
            if let Err(msg) = r {
                errors.push(format!("{path}:{}: {msg}", e.line));
            }
        }
        if let Some(d) = default_duration {
            g.durations = vec![d; g.classes];
        } else {
            g.durations.resize(g.classes, (4, 10));
        }
        for (c, d, line) in per_class {
            if c < g.classes {
                g.durations[c] = d;
            } else {
                errors.push(format!("{path}:{line}: duration for class {c} outside 0..{}", g.classes));
            }
        }
        if lines.keys().any(|k| k.starts_with("ambiguous.")) {
            g.ambiguous = ambiguous;
        }
        if !transitions.is_empty() {
            g.transitions = transitions.iter().map(|(k, (v, _))| (k.clone(), v.clone())).collect();
        }
        let line_of = |key: &str| -> usize {
            lines
                .iter()
                .filter(|(k, _)| *k == key || k.starts_with(&format!("{key}.")))
                .map(|(_, l)| *l)
                .min()
                .unwrap_or(0)
        };
        for (key, msg) in g.violations() {
            errors.push(format!("{path}:{}: {key}: {msg}", line_of(key)));
        }
        if errors.is_empty() {
            Ok(g)
        } else {
            Err(HatError::ConfigViolations(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HatError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if self.classes == 0 {
            v.push(("classes", "must be at least 1".to_string()));
        }
        if self.order == 0 {
            v.push(("order", "must be at least 1".to_string()));
        }
        if self.feature_dim == 0 {
            v.push(("feature_dim", "must be at least 1".to_string()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            v.push(("noise", format!("must be nonnegative, got {}", self.noise)));
        }
        if self.gap.0 > self.gap.1 {
            v.push(("gap", "min exceeds max".to_string()));
        }
        if self.durations.iter().any(|&(a, b)| a == 0 || a > b) {
            v.push(("duration", "each range needs 1 ≤ min ≤ max".to_string()));
        }
        if self.start.len() != self.order || self.start.iter().any(|&c| c >= self.classes) {
            v.push(("start", format!("needs {} class ids below {}", self.order, self.classes)));
        }
        for &(a, b) in &self.ambiguous {
            if a >= self.classes || b >= self.classes || a == b {
                v.push(("ambiguous", format!("pair ({a},{b}) is not two distinct classes")));
            }
        }
        for (ctx, dist) in &self.transitions {
            if ctx.len() != self.order || ctx.iter().any(|&c| c >= self.classes) {
                v.push(("transition", format!("context {ctx:?} is not {} valid class ids", self.order)));
            }
            if dist.iter().any(|&(c, p)| c >= self.classes || !(p >= 0.0)) {
                v.push(("transition", format!("context {ctx:?} has an invalid class or probability")));
            }
            let total: f64 = dist.iter().map(|d| d.1).sum();
            if (total - 1.0).abs() > 1e-9 {
                v.push(("transition", format!("context {ctx:?} sums to {total}, not 1")));
            }
        }
        v
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "order = {}", self.order);
        let _ = writeln!(s, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "gap = {},{}", self.gap.0, self.gap.1);
        for (c, (a, b)) in self.durations.iter().enumerate() {
            let _ = writeln!(s, "duration.{c} = {a},{b}");
        }
        let _ = writeln!(s, "start = {}", kvfile::join(&self.start));
        let _ = writeln!(s, "prototype_seed = {}", self.prototype_seed);
        let _ = writeln!(s, "prototype_scale = {}", self.prototype_scale);
        for (i, (a, b)) in self.ambiguous.iter().enumerate() {
            let _ = writeln!(s, "ambiguous.{i} = {a},{b}");
        }
        for (ctx, dist) in &self.transitions {
            let key: Vec<String> = ctx.iter().map(|c| c.to_string()).collect();
            let val: Vec<String> = dist.iter().map(|(c, p)| format!("{c}:{p}")).collect();
            let _ = writeln!(s, "transition.{} = {}", key.join("."), val.join(", "));
        }
        s
    }

    /// Next-class distribution for a context.
    pub fn next(&self, context: &[usize]) -> Vec<(usize, f64)> {
        match self.transitions.get(context) {
            Some(d) => d.clone(),
            None => (0..self.classes).map(|c| (c, 1.0 / self.classes as f64)).collect(),
        }
    }

    /// Per-class prototype; ambiguous partners copy their first member.
    pub fn prototypes(&self) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let normal = Normal::new(0.0, self.prototype_scale).expect("finite scale");
        let mut protos: Vec<Vec<f32>> = (0..self.classes)
            .map(|_| (0..self.feature_dim).map(|_| normal.sample(&mut rng) as f32).collect())
            .collect();
        for &(a, b) in &self.ambiguous {
            protos[b] = protos[a].clone();
        }
        protos
    }

    /// Classes that can never be emitted from the start context.
    pub fn unreachable_classes(&self) -> Vec<usize> {
        let mut seen_ctx: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut emitted = BTreeSet::new();
        let mut queue = VecDeque::from([self.start.clone()]);
        while let Some(ctx) = queue.pop_front() {
            if !seen_ctx.insert(ctx.clone()) {
                continue;
            }
            for (c, p) in self.next(&ctx) {
                if p > 0.0 {
                    emitted.insert(c);
                    let mut n = ctx[1..].to_vec();
                    n.push(c);
                    queue.push_back(n);
                }
            }
        }
        (0..self.classes).filter(|c| !emitted.contains(c)).collect()
    }

    pub fn report(&self) -> GenerationReport {
        let unreachable = self.unreachable_classes();
        let warnings = unreachable
            .iter()
            .map(|c| format!("class {c} is unreachable from start context {:?}", self.start))
            .collect();
        GenerationReport { unreachable, warnings }
    }
}

fn sample(dist: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(c, p) in dist {
        acc += p;
        if u < acc {
            return c;
        }
    }
    dist.iter().rev().find(|d| d.1 > 0.0).map_or(dist[0].0, |d| d.0)
}

/// Walks the grammar emitting `(gap, action)` blocks; an action that would run
/// past `T` is not started.
pub fn generate(grammar: &ProceduralGrammar, t_len: usize, seed: u64) -> Result<(SyntheticVideo, GenerationReport)> {
    let v = grammar.violations();
    if !v.is_empty() {
        return Err(HatError::ConfigViolations(
            v.into_iter().map(|(k, m)| format!("{k}: {m}")).collect(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut context = grammar.start.clone();
    let mut annotations = Vec::new();
    let mut pos = 0usize;
    loop {
        pos += rng.random_range(grammar.gap.0..=grammar.gap.1) as usize;
        let class = sample(&grammar.next(&context), &mut rng);
        let (lo, hi) = grammar.durations[class];
        let dur = rng.random_range(lo..=hi) as usize;
        if pos + dur > t_len {
            break;
        }
        annotations.push(GroundTruthInstance {
            start: pos as u32,
            end: (pos + dur) as u32,
            class,
        });
        pos += dur;
        context.remove(0);
        context.push(class);
    }
    let protos = grammar.prototypes();
    let mut labels = vec![None; t_len];
    for a in &annotations {
        for l in &mut labels[a.start as usize..a.end as usize] {
            *l = Some(a.class);
        }
    }
    let noise = Normal::new(0.0, grammar.noise).expect("finite noise");
    let d = grammar.feature_dim;
    let mut data = Vec::with_capacity(t_len * d);
    for l in &labels {
        for k in 0..d {
            let base = l.map_or(0.0, |c| protos[c][k] as f64);
            data.push((base + noise.sample(&mut rng)) as f32);
        }
    }
    Ok((
        SyntheticVideo {
            features: Tensor::new(vec![t_len, d], data)?,
            annotations,
            seed,
        },
        grammar.report(),
    ))
}

pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    if features.shape().len() != 2 {
        return Err(HatError::dim("write_features", "features must be T×D"));
    }
    let mut w = ByteWriter::new();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.u32(features.rows() as u32);
    w.u32(features.cols() as u32);
    w.f32s(features.data());
    w.write_to(path)
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let data = read_file(path)?;
    let mut r = ByteReader::new(path, &data);
    r.magic(FEATURE_MAGIC)?;
    r.version(FEATURE_VERSION)?;
    let t = r.u32("T")? as usize;
    let d = r.u32("D")? as usize;
    let expected = FEATURE_HEADER as u64 + 4 * t as u64 * d as u64;
    if data.len() as u64 != expected {
        return Err(HatError::Format {
            path: path.display().to_string(),
            offset: FEATURE_HEADER as u64,
            detail: format!("expected {expected} bytes for {t}×{d} features, found {}", data.len()),
        });
    }
    let values = r.f32s(t * d, "features")?;
    r.finish()?;
    Tensor::new(vec![t, d], values)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub video_id: String,
    pub start_step: u32,
    pub end_step: u32,
    pub class_id: usize,
}

impl Annotation {
    pub fn new(video_id: &str, g: &GroundTruthInstance) -> Self {
        Annotation {
            video_id: video_id.to_string(),
            start_step: g.start,
            end_step: g.end,
            class_id: g.class,
        }
    }

    pub fn instance(&self) -> GroundTruthInstance {
        GroundTruthInstance {
            start: self.start_step,
            end: self.end_step,
            class: self.class_id,
        }
    }
}

pub fn write_annotations(path: &Path, rows: &[Annotation]) -> Result<()> {
    let csv_err = |e: csv::Error| HatError::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(["video_id", "start_step", "end_step", "class_id"])
            .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HatError::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let display = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| HatError::Config(format!("{display}: {e}")))?;
    let headers = r.headers().map_err(|e| HatError::Parse {
        path: display.clone(),
        line: 1,
        detail: e.to_string(),
    })?;
    if headers != vec!["video_id", "start_step", "end_step", "class_id"] {
        return Err(HatError::Parse {
            path: display,
            line: 1,
            detail: "expected header `video_id,start_step,end_step,class_id`".into(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let line = i + 2;
        let a: Annotation = rec.map_err(|e| HatError::Parse {
            path: display.clone(),
            line,
            detail: e.to_string(),
        })?;
        if a.end_step <= a.start_step {
            return Err(HatError::Parse {
                path: display.clone(),
                line,
                detail: format!("end_step {} is not after start_step {}", a.end_step, a.start_step),
            });
        }
        out.push(a);
    }
    Ok(out)
}

/// Groups annotation rows by video, preserving file order within each video.
pub fn by_video(rows: &[Annotation]) -> BTreeMap<String, Vec<GroundTruthInstance>> {
    let mut m: BTreeMap<String, Vec<GroundTruthInstance>> = BTreeMap::new();
    for r in rows {
        m.entry(r.video_id.clone()).or_default().push(r.instance());
    }
    m
}
