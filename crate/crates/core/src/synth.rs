//! Synthetic single-actor household episodes with templated questions.
//!
//! Each episode is simulated as an action log, rendered into one scene graph
//! per raw frame, compacted, and then questioned. Answers are always
//! recomputed from the compacted frames ([`events_from_frames`]), never from
//! the simulator's private state, and [`answer_question`] can re-derive the
//! answer of any generated question from its text alone.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{compact, DynamicGraph, Edge, Node, QaSample, SceneGraph, Split};

pub const PERSON: &str = "person";

/// Person-to-object action predicates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verb {
    PicksUp,
    Holds,
    PutsDown,
    Opens,
    Closes,
    SitsOn,
    Throws,
    LooksAt,
}

impl Verb {
    pub const ALL: [Verb; 8] = [
        Verb::PicksUp,
        Verb::Holds,
        Verb::PutsDown,
        Verb::Opens,
        Verb::Closes,
        Verb::SitsOn,
        Verb::Throws,
        Verb::LooksAt,
    ];

    pub fn predicate(self) -> &'static str {
        match self {
            Verb::PicksUp => "picks_up",
            Verb::Holds => "holds",
            Verb::PutsDown => "puts_down",
            Verb::Opens => "opens",
            Verb::Closes => "closes",
            Verb::SitsOn => "sits_on",
            Verb::Throws => "throws",
            Verb::LooksAt => "looks_at",
        }
    }

    pub fn base(self) -> &'static str {
        match self {
            Verb::PicksUp => "pick up",
            Verb::Holds => "hold",
            Verb::PutsDown => "put down",
            Verb::Opens => "open",
            Verb::Closes => "close",
            Verb::SitsOn => "sit on",
            Verb::Throws => "throw",
            Verb::LooksAt => "look at",
        }
    }

    pub fn past(self) -> &'static str {
        match self {
            Verb::PicksUp => "picked up",
            Verb::Holds => "held",
            Verb::PutsDown => "put down",
            Verb::Opens => "opened",
            Verb::Closes => "closed",
            Verb::SitsOn => "sat on",
            Verb::Throws => "threw",
            Verb::LooksAt => "looked at",
        }
    }

    pub fn from_predicate(p: &str) -> Option<Verb> {
        Verb::ALL.into_iter().find(|v| v.predicate() == p)
    }

    fn from_base(s: &str) -> Option<Verb> {
        Verb::ALL.into_iter().find(|v| v.base() == s)
    }

    fn from_past(s: &str) -> Option<Verb> {
        Verb::ALL.into_iter().find(|v| v.past() == s)
    }
}

/// Vocabulary and distribution knobs for the simulated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub holdables: Vec<String>,
    pub openables: Vec<String>,
    /// Openables that can contain holdables.
    pub containers: Vec<String>,
    pub seats: Vec<String>,
    pub surfaces: Vec<String>,
    pub holdables_per_scene: (usize, usize),
    pub openables_per_scene: (usize, usize),
    pub seats_per_scene: (usize, usize),
    pub surfaces_per_scene: (usize, usize),
    /// Median of the log-normal number of actions per episode.
    pub events_median: f64,
    pub events_sigma: f64,
    pub events_range: (usize, usize),
    /// Raw frames a held object stays in hand.
    pub hold_frames: (u64, u64),
    /// Raw frames for the other actions.
    pub action_frames: (u64, u64),
    pub idle_probability: f64,
    pub questions_per_episode: (usize, usize),
    /// Draw every object in every frame instead of the person's surroundings.
    pub full_scene: bool,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            holdables: words(&[
                "cup", "dish", "book", "towel", "pillow", "sandwich", "bag", "shoe", "blanket",
                "clothes", "broom", "paper", "picture", "food", "bottle", "vase",
            ]),
            openables: words(&[
                "fridge", "door", "cabinet", "drawer", "closet", "window", "box", "laptop",
            ]),
            containers: words(&["fridge", "cabinet", "drawer", "closet", "box"]),
            seats: words(&["chair", "sofa", "bed"]),
            surfaces: words(&["table", "shelf", "counter", "desk", "floor"]),
            holdables_per_scene: (2, 4),
            openables_per_scene: (1, 2),
            seats_per_scene: (1, 1),
            surfaces_per_scene: (2, 2),
            events_median: 6.5,
            events_sigma: 0.55,
            events_range: (2, 24),
            hold_frames: (2, 12),
            action_frames: (1, 3),
            idle_probability: 0.3,
            questions_per_episode: (3, 6),
            full_scene: false,
        }
    }
}

impl WorldSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: WorldSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let pools = [
            ("holdables", &self.holdables, self.holdables_per_scene),
            ("openables", &self.openables, self.openables_per_scene),
            ("seats", &self.seats, self.seats_per_scene),
            ("surfaces", &self.surfaces, self.surfaces_per_scene),
        ];
        for (name, pool, (lo, hi)) in pools {
            if lo == 0 || lo > hi || hi > pool.len() {
                return Err(Error::Config(format!(
                    "{name}: per-scene range ({lo}, {hi}) does not fit a pool of {}",
                    pool.len()
                )));
            }
        }
        if self.hold_frames.0 < 1 || self.hold_frames.0 > self.hold_frames.1 {
            return Err(Error::Config("hold_frames must be a non-empty range ≥ 1".into()));
        }
        if self.action_frames.0 < 1 || self.action_frames.0 > self.action_frames.1 {
            return Err(Error::Config("action_frames must be a non-empty range ≥ 1".into()));
        }
        if self.events_range.0 < 1 || self.events_range.0 > self.events_range.1 {
            return Err(Error::Config("events_range must be a non-empty range ≥ 1".into()));
        }
        let (qlo, qhi) = self.questions_per_episode;
        if qlo == 0 || qlo > qhi {
            return Err(Error::Config("questions_per_episode must be a non-empty range ≥ 1".into()));
        }
        let all = self.objects();
        let unique: BTreeSet<&String> = all.iter().collect();
        if unique.len() != all.len() || all.iter().any(|w| w == PERSON || w.is_empty()) {
            return Err(Error::Config("object vocabulary must be unique and non-empty".into()));
        }
        Ok(())
    }

    /// All object nouns.
    pub fn objects(&self) -> Vec<String> {
        self.holdables
            .iter()
            .chain(&self.openables)
            .chain(&self.seats)
            .chain(&self.surfaces)
            .cloned()
            .collect()
    }

    /// Every string a generated answer can take.
    pub fn answer_vocabulary(&self) -> Vec<String> {
        let mut v = self.objects();
        v.extend(["yes", "no"].map(String::from));
        v.extend(COUNT_WORDS.iter().map(|s| s.to_string()));
        v
    }
}

const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Person,
    Holdable,
    Openable { container: bool },
    Seat,
    Surface,
}

struct Sim<'a> {
    spec: &'a WorldSpec,
    labels: Vec<String>,
    kinds: Vec<Kind>,
    near: Option<usize>,
    /// holdable -> (predicate, location node)
    location: BTreeMap<usize, (&'static str, usize)>,
    /// seat -> surface it stands near
    seat_anchor: BTreeMap<usize, usize>,
    open: BTreeSet<usize>,
    held: Option<usize>,
    frames: Vec<SceneGraph>,
}

impl<'a> Sim<'a> {
    fn new(spec: &'a WorldSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut labels = vec![PERSON.to_string()];
        let mut kinds = vec![Kind::Person];
        let mut pick = |pool: &[String], (lo, hi): (usize, usize), kind: &dyn Fn(&str) -> Kind, rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(lo..=hi);
            for w in pool.choose_multiple(rng, n) {
                labels.push(w.clone());
                kinds.push(kind(w));
            }
        };
        pick(&spec.surfaces, spec.surfaces_per_scene, &|_| Kind::Surface, rng);
        pick(&spec.seats, spec.seats_per_scene, &|_| Kind::Seat, rng);
        pick(
            &spec.openables,
            spec.openables_per_scene,
            &|w| Kind::Openable {
                container: spec.containers.iter().any(|c| c == w),
            },
            rng,
        );
        pick(&spec.holdables, spec.holdables_per_scene, &|_| Kind::Holdable, rng);

        let mut sim = Sim {
            spec,
            labels,
            kinds,
            near: None,
            location: BTreeMap::new(),
            seat_anchor: BTreeMap::new(),
            open: BTreeSet::new(),
            held: None,
            frames: Vec::new(),
        };
        let surfaces = sim.of_kind(|k| k == Kind::Surface);
        let containers = sim.of_kind(|k| k == Kind::Openable { container: true });
        for s in sim.of_kind(|k| k == Kind::Seat) {
            sim.seat_anchor.insert(s, *surfaces.choose(rng).expect("scene has a surface"));
        }
        for h in sim.of_kind(|k| k == Kind::Holdable) {
            let loc = if !containers.is_empty() && rng.gen_bool(0.25) {
                ("inside", *containers.choose(rng).unwrap())
            } else {
                ("on", *surfaces.choose(rng).unwrap())
            };
            sim.location.insert(h, loc);
        }
        sim
    }

    fn of_kind(&self, f: impl Fn(Kind) -> bool) -> Vec<usize> {
        (0..self.kinds.len()).filter(|&i| f(self.kinds[i])).collect()
    }

    /// Person-centric frame: the person, what they are near, what they act
    /// on, and where those objects rest. With `full_scene` every object and
    /// every spatial relation is drawn.
    fn render(&self, action: Option<(Verb, usize)>) -> SceneGraph {
        let mut keep = BTreeSet::from([0usize]);
        if self.spec.full_scene {
            keep.extend(0..self.labels.len());
        } else {
            keep.extend(self.near);
            keep.extend(action.map(|a| a.1));
            let focus: Vec<usize> = keep.iter().copied().collect();
            for x in focus {
                keep.extend(self.location.get(&x).map(|l| l.1));
                keep.extend(self.seat_anchor.get(&x).copied());
            }
        }
        let nodes = keep
            .iter()
            .map(|&i| Node {
                id: i as u32,
                label: self.labels[i].clone(),
            })
            .collect();
        let mut edges = Vec::new();
        let mut push = |s: usize, d: usize, p: &str| {
            if keep.contains(&s) && keep.contains(&d) {
                edges.push(Edge {
                    src: s as u32,
                    dst: d as u32,
                    predicate: p.to_string(),
                })
            }
        };
        for (&seat, &surface) in &self.seat_anchor {
            push(seat, surface, "near");
        }
        for (&h, &(pred, loc)) in &self.location {
            push(h, loc, pred);
        }
        if let Some(n) = self.near {
            push(0, n, "near");
        }
        if let Some((verb, obj)) = action {
            push(0, obj, verb.predicate());
        }
        SceneGraph::new(nodes, edges).expect("simulator renders valid graphs")
    }

    fn emit(&mut self, action: Option<(Verb, usize)>, frames: u64) {
        for _ in 0..frames {
            let g = self.render(action);
            self.frames.push(g);
        }
    }

    fn walk_to(&mut self, target: usize) {
        if self.near != Some(target) {
            self.near = Some(target);
            self.emit(None, 1);
        }
    }

    fn reachable(&self, h: usize) -> bool {
        match self.location.get(&h) {
            Some(("inside", c)) => self.open.contains(c),
            Some(_) => true,
            None => false,
        }
    }

    /// Perform one high-level activity, emitting its frames.
    fn act(&mut self, rng: &mut ChaCha8Rng) {
        let spec = self.spec;
        let holdables: Vec<usize> = self
            .of_kind(|k| k == Kind::Holdable)
            .into_iter()
            .filter(|&h| self.reachable(h))
            .collect();
        let closed: Vec<usize> = self
            .of_kind(|k| matches!(k, Kind::Openable { .. }))
            .into_iter()
            .filter(|o| !self.open.contains(o))
            .collect();
        let opened: Vec<usize> = self.open.iter().copied().collect();
        let seats = self.of_kind(|k| k == Kind::Seat);
        let everything: Vec<usize> = (1..self.labels.len()).collect();

        #[derive(Clone, Copy)]
        enum Activity {
            Carry,
            Open,
            Close,
            Sit,
            Look,
        }
        let mut options: Vec<(Activity, f64)> = vec![(Activity::Look, 0.8), (Activity::Sit, 0.7)];
        if !holdables.is_empty() {
            options.push((Activity::Carry, 2.0));
        }
        if !closed.is_empty() {
            options.push((Activity::Open, 1.2));
        }
        if !opened.is_empty() {
            options.push((Activity::Close, 1.0));
        }
        let activity = options
            .choose_weighted(rng, |o| o.1)
            .expect("non-empty activity list")
            .0;
        let short = |rng: &mut ChaCha8Rng| rng.gen_range(spec.action_frames.0..=spec.action_frames.1);

        match activity {
            Activity::Carry => {
                let h = *holdables.choose(rng).unwrap();
                self.walk_to(h);
                self.emit(Some((Verb::PicksUp, h)), 1);
                self.location.remove(&h);
                self.held = Some(h);
                let d = rng.gen_range(spec.hold_frames.0..=spec.hold_frames.1);
                self.emit(Some((Verb::Holds, h)), d);
                let surfaces = self.of_kind(|k| k == Kind::Surface);
                let throw = rng.gen_bool(0.3);
                let verb = if throw { Verb::Throws } else { Verb::PutsDown };
                self.emit(Some((verb, h)), 1);
                self.held = None;
                let dest = if throw {
                    self.labels
                        .iter()
                        .position(|l| l == "floor")
                        .filter(|i| surfaces.contains(i))
                        .unwrap_or_else(|| *surfaces.choose(rng).unwrap())
                } else {
                    *surfaces.choose(rng).unwrap()
                };
                self.location.insert(h, ("on", dest));
            }
            Activity::Open => {
                let o = *closed.choose(rng).unwrap();
                self.walk_to(o);
                let n = short(rng);
                self.emit(Some((Verb::Opens, o)), n);
                self.open.insert(o);
            }
            Activity::Close => {
                let o = *opened.choose(rng).unwrap();
                self.walk_to(o);
                let n = short(rng);
                self.emit(Some((Verb::Closes, o)), n);
                self.open.remove(&o);
            }
            Activity::Sit => {
                let s = *seats.choose(rng).unwrap();
                self.walk_to(s);
                let n = short(rng) + 1;
                self.emit(Some((Verb::SitsOn, s)), n);
            }
            Activity::Look => {
                let x = *everything.choose(rng).unwrap();
                let n = short(rng);
                self.emit(Some((Verb::LooksAt, x)), n);
            }
        }
        if rng.gen_bool(spec.idle_probability) {
            let n = rng.gen_range(1..=2);
            self.emit(None, n);
        }
    }
}

/// One maximal run of a person-to-object action in a dynamic graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub verb: Verb,
    pub object: String,
    /// Raw index of the first frame showing the action.
    pub start: u64,
    /// Raw index of the first frame after the run.
    pub end: u64,
}

impl Event {
    pub fn duration(&self) -> u64 {
        self.end - self.start
    }
}

fn frame_action(g: &SceneGraph) -> Option<(Verb, String)> {
    let labels: BTreeMap<u32, &str> = g.nodes().iter().map(|n| (n.id, n.label.as_str())).collect();
    g.edges().iter().find_map(|e| {
        let verb = Verb::from_predicate(&e.predicate)?;
        (labels[&e.src] == PERSON).then(|| (verb, labels[&e.dst].to_string()))
    })
}

/// Recover the action log from compacted frames.
pub fn events_from_frames(dg: &DynamicGraph) -> Vec<Event> {
    let frames = dg.frames();
    let mut events: Vec<Event> = Vec::new();
    let mut prev: Option<(Verb, String)> = None;
    for (i, f) in frames.iter().enumerate() {
        let cur = frame_action(&f.graph);
        if let Some(last) = events.last_mut() {
            if last.end == u64::MAX && cur != prev {
                last.end = f.t;
            }
        }
        if let Some((verb, object)) = &cur {
            if cur != prev {
                events.push(Event {
                    verb: *verb,
                    object: object.clone(),
                    start: f.t,
                    end: u64::MAX,
                });
            }
        }
        if i + 1 == frames.len() {
            if let Some(last) = events.last_mut() {
                if last.end == u64::MAX {
                    last.end = f.t + 1;
                }
            }
        }
        prev = cur;
    }
    events
}

/// Question templates. `id()` is the `template_id` written to samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Template {
    After,
    Before,
    HeldFirst,
    HeldLast,
    Exists,
    DurationCompare,
    CountDistinct,
}

impl Template {
    pub const ALL: [Template; 7] = [
        Template::After,
        Template::Before,
        Template::HeldFirst,
        Template::HeldLast,
        Template::Exists,
        Template::DurationCompare,
        Template::CountDistinct,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Template::After => "after",
            Template::Before => "before",
            Template::HeldFirst => "held-first",
            Template::HeldLast => "held-last",
            Template::Exists => "exists",
            Template::DurationCompare => "duration-compare",
            Template::CountDistinct => "count-distinct",
        }
    }

    pub fn from_id(id: &str) -> Option<Template> {
        Template::ALL.into_iter().find(|t| t.id() == id)
    }
}

/// Structured content of a question; rendering and parsing are inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Query {
    /// Object of the first `target` action after the unique `anchor` action.
    After { target: Verb, anchor: Verb, object: String },
    /// Object of the last `target` action before the unique `anchor` action.
    Before { target: Verb, anchor: Verb, object: String },
    HeldFirst,
    HeldLast,
    Exists { verb: Verb, object: String },
    /// Was `first` held for more raw frames in total than `second`?
    HeldLonger { first: String, second: String },
    CountPickedUp,
}

impl Query {
    pub fn template(&self) -> Template {
        match self {
            Query::After { .. } => Template::After,
            Query::Before { .. } => Template::Before,
            Query::HeldFirst => Template::HeldFirst,
            Query::HeldLast => Template::HeldLast,
            Query::Exists { .. } => Template::Exists,
            Query::HeldLonger { .. } => Template::DurationCompare,
            Query::CountPickedUp => Template::CountDistinct,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Query::After { target, anchor, object } => format!(
                "which object did the person {} after they {} the {object} ?",
                target.base(),
                anchor.past()
            ),
            Query::Before { target, anchor, object } => format!(
                "which object did the person {} before they {} the {object} ?",
                target.base(),
                anchor.past()
            ),
            Query::HeldFirst => "which object did the person hold first ?".into(),
            Query::HeldLast => "which object did the person hold last ?".into(),
            Query::Exists { verb, object } => {
                format!("did the person ever {} the {object} ?", verb.base())
            }
            Query::HeldLonger { first, second } => {
                format!("did the person hold the {first} longer than the {second} ?")
            }
            Query::CountPickedUp => "how many different objects did the person pick up ?".into(),
        }
    }

    pub fn parse(question: &str) -> Option<Query> {
        let q = question.trim().strip_suffix('?')?.trim_end();
        match q {
            "which object did the person hold first" => return Some(Query::HeldFirst),
            "which object did the person hold last" => return Some(Query::HeldLast),
            "how many different objects did the person pick up" => return Some(Query::CountPickedUp),
            _ => {}
        }
        if let Some(rest) = q.strip_prefix("which object did the person ") {
            for (sep, after) in [(" after they ", true), (" before they ", false)] {
                if let Some((target, tail)) = rest.split_once(sep) {
                    let (anchor, object) = tail.split_once(" the ")?;
                    let target = Verb::from_base(target)?;
                    let anchor = Verb::from_past(anchor)?;
                    let object = object.to_string();
                    return Some(if after {
                        Query::After { target, anchor, object }
                    } else {
                        Query::Before { target, anchor, object }
                    });
                }
            }
            return None;
        }
        if let Some(rest) = q.strip_prefix("did the person ever ") {
            let (verb, object) = rest.split_once(" the ")?;
            return Some(Query::Exists {
                verb: Verb::from_base(verb)?,
                object: object.to_string(),
            });
        }
        if let Some(rest) = q.strip_prefix("did the person hold the ") {
            let (first, second) = rest.split_once(" longer than the ")?;
            return Some(Query::HeldLonger {
                first: first.to_string(),
                second: second.to_string(),
            });
        }
        None
    }

    /// Answer from an event log; `None` when the question does not apply.
    pub fn answer(&self, events: &[Event]) -> Option<String> {
        let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
        match self {
            Query::After { target, anchor, object } | Query::Before { target, anchor, object } => {
                let mut anchors = events
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.verb == *anchor && &e.object == object);
                let (at, _) = anchors.next()?;
                if anchors.next().is_some() {
                    return None;
                }
                if matches!(self, Query::After { .. }) {
                    events[at + 1..].iter().find(|e| e.verb == *target)
                } else {
                    events[..at].iter().rev().find(|e| e.verb == *target)
                }
                .map(|e| e.object.clone())
            }
            Query::HeldFirst => holds(events).next().map(|e| e.object.clone()),
            Query::HeldLast => holds(events).last().map(|e| e.object.clone()),
            Query::Exists { verb, object } => {
                Some(yes_no(events.iter().any(|e| e.verb == *verb && &e.object == object)))
            }
            Query::HeldLonger { first, second } => {
                let total = |o: &str| -> Option<u64> {
                    let spans: Vec<u64> = holds(events).filter(|e| e.object == o).map(Event::duration).collect();
                    (!spans.is_empty()).then(|| spans.iter().sum())
                };
                let (a, b) = (total(first)?, total(second)?);
                (a != b).then(|| yes_no(a > b))
            }
            Query::CountPickedUp => {
                let n = events
                    .iter()
                    .filter(|e| e.verb == Verb::PicksUp)
                    .map(|e| e.object.as_str())
                    .collect::<BTreeSet<_>>()
                    .len();
                (1..=COUNT_WORDS.len()).contains(&n).then(|| COUNT_WORDS[n - 1].to_string())
            }
        }
    }
}

fn holds(events: &[Event]) -> impl DoubleEndedIterator<Item = &Event> + '_ {
    events.iter().filter(|e| e.verb == Verb::Holds)
}

/// Rule-based answer to a generated question, read off the frames.
pub fn answer_question(dg: &DynamicGraph, question: &str) -> Option<String> {
    Query::parse(question)?.answer(&events_from_frames(dg))
}

fn verb_compatible(verb: Verb, kind: Kind) -> bool {
    match verb {
        Verb::PicksUp | Verb::Holds | Verb::PutsDown | Verb::Throws => kind == Kind::Holdable,
        Verb::Opens | Verb::Closes => matches!(kind, Kind::Openable { .. }),
        Verb::SitsOn => kind == Kind::Seat,
        Verb::LooksAt => kind != Kind::Person,
    }
}

/// Sample a question of the given template, or `None` if the episode cannot
/// support one.
fn instantiate(
    template: Template,
    events: &[Event],
    scene: &[(String, Kind)],
    rng: &mut ChaCha8Rng,
) -> Option<Query> {
    let query = match template {
        Template::After | Template::Before => {
            let after = template == Template::After;
            let mut candidates = Vec::new();
            for anchor in events {
                for target in Verb::ALL {
                    let (object, verb) = (anchor.object.clone(), anchor.verb);
                    let fwd = if after {
                        Query::After { target, anchor: verb, object }
                    } else {
                        Query::Before { target, anchor: verb, object }
                    };
                    let Some(ans) = fwd.answer(events) else { continue };
                    // The mirrored question must not share the answer, so the
                    // answer flips under time reversal.
                    let mirrored = match &fwd {
                        Query::After { target, anchor, object } => Query::Before {
                            target: *target,
                            anchor: *anchor,
                            object: object.clone(),
                        },
                        Query::Before { target, anchor, object } => Query::After {
                            target: *target,
                            anchor: *anchor,
                            object: object.clone(),
                        },
                        _ => unreachable!(),
                    };
                    if mirrored.answer(events).as_deref() != Some(ans.as_str()) {
                        candidates.push(fwd);
                    }
                }
            }
            candidates.choose(rng)?.clone()
        }
        Template::HeldFirst | Template::HeldLast => {
            let distinct: BTreeSet<&str> = holds(events).map(|e| e.object.as_str()).collect();
            if distinct.len() < 2 {
                return None;
            }
            if template == Template::HeldFirst {
                Query::HeldFirst
            } else {
                Query::HeldLast
            }
        }
        Template::Exists => {
            let want_yes = rng.gen_bool(0.5);
            let mut yes = Vec::new();
            let mut no = Vec::new();
            for verb in Verb::ALL {
                for (object, kind) in scene {
                    if !verb_compatible(verb, *kind) {
                        continue;
                    }
                    let q = Query::Exists {
                        verb,
                        object: object.clone(),
                    };
                    if q.answer(events).as_deref() == Some("yes") {
                        yes.push(q);
                    } else {
                        no.push(q);
                    }
                }
            }
            let (first, second) = if want_yes { (&yes, &no) } else { (&no, &yes) };
            first.choose(rng).or_else(|| second.choose(rng))?.clone()
        }
        Template::DurationCompare => {
            let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
            for e in holds(events) {
                *totals.entry(e.object.as_str()).or_default() += e.duration();
            }
            let objs: Vec<(&str, u64)> = totals.into_iter().collect();
            let mut pairs = Vec::new();
            for i in 0..objs.len() {
                for j in i + 1..objs.len() {
                    if objs[i].1 != objs[j].1 {
                        pairs.push((objs[i], objs[j]));
                    }
                }
            }
            let &(a, b) = pairs.choose(rng)?;
            let (long, short) = if a.1 > b.1 { (a.0, b.0) } else { (b.0, a.0) };
            let (first, second) = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
            Query::HeldLonger {
                first: first.to_string(),
                second: second.to_string(),
            }
        }
        Template::CountDistinct => Query::CountPickedUp,
    };
    query.answer(events).is_some().then_some(query)
}

/// A simulated episode before questioning.
pub struct Episode {
    pub raw_frames: usize,
    pub dg: DynamicGraph,
    scene: Vec<(String, Kind)>,
}

/// Simulate episode `index` of the stream rooted at `seed`.
pub fn simulate_episode(spec: &WorldSpec, seed: u64, index: u64) -> Episode {
    let mut rng = episode_rng(seed, index);
    simulate(spec, &mut rng)
}

fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn simulate(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Episode {
    let mut sim = Sim::new(spec, rng);
    let dist = LogNormal::new(spec.events_median.ln(), spec.events_sigma).expect("valid log-normal");
    let n_events = (dist.sample(rng).round() as usize).clamp(spec.events_range.0, spec.events_range.1);
    sim.emit(None, 1);
    for _ in 0..n_events {
        sim.act(rng);
    }
    sim.emit(None, 1);
    let scene = sim
        .labels
        .iter()
        .zip(&sim.kinds)
        .skip(1)
        .map(|(l, k)| (l.clone(), *k))
        .collect();
    let raw_frames = sim.frames.len();
    let dg = compact(std::mem::take(&mut sim.frames)).expect("episodes have frames");
    Episode { raw_frames, dg, scene }
}

pub fn split_for_episode(index: u64) -> Split {
    match index % 10 {
        0 => Split::Val,
        1 => Split::Test,
        _ => Split::Train,
    }
}

/// Generate `n_episodes` episodes and their questions. Deterministic in
/// `(spec, seed)`; episode `i` depends only on its own substream.
pub fn generate_corpus(spec: &WorldSpec, n_episodes: usize, seed: u64) -> Result<Vec<QaSample>> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    spec.validate()?;
    let mut out = Vec::new();
    for e in 0..n_episodes as u64 {
        out.extend(generate_episode_samples(spec, seed, e)?);
    }
    Ok(out)
}

pub fn generate_episode_samples(spec: &WorldSpec, seed: u64, index: u64) -> Result<Vec<QaSample>> {
    let mut rng = episode_rng(seed, index);
    let ep = simulate(spec, &mut rng);
    let events = events_from_frames(&ep.dg);
    let want = rng.gen_range(spec.questions_per_episode.0..=spec.questions_per_episode.1);
    let mut order = Template::ALL.to_vec();
    order.shuffle(&mut rng);
    let split = split_for_episode(index);
    let mut out = Vec::new();
    for t in order {
        if out.len() == want {
            break;
        }
        let Some(q) = instantiate(t, &events, &ep.scene, &mut rng) else { continue };
        let question = q.render();
        // Re-derive from the text and the frames; a template never emits an
        // answer its own extractor disagrees with.
        let Some(answer) = answer_question(&ep.dg, &question) else { continue };
        out.push(QaSample::new(ep.dg.clone(), question, answer, t.id(), split)?);
    }
    Ok(out)
}

/// Compacted lengths of `n` episodes, for checking the length distribution.
pub fn compacted_lengths(spec: &WorldSpec, n: usize, seed: u64) -> Vec<usize> {
    (0..n as u64).map(|i| simulate_episode(spec, seed, i).dg.len()).collect()
}
