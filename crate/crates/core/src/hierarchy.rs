//! Two-level class taxonomy, incremental task schedule and label visibility.
//!
//! Class ids are dense and follow introduction order once a schedule has been
//! built, so the classes of the initial step are exactly `0..n_0` and the
//! classes seen through step `t` are exactly `0..n_t`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl ClassId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub type LabelSet = BTreeSet<ClassId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Superclass,
    Subclass,
    Orphan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: ClassId,
    pub name: String,
    pub parent: Option<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NonContiguousIds { expected: usize, found: ClassId },
    MultipleParents { class: String },
    DuplicateName { name: String },
    UnknownParent { class: String, parent: ClassId },
    SelfParent { class: String },
    ThreeLevels { class: String, parent: String, grandparent: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonContiguousIds { expected, found } => {
                write!(f, "expected class id {expected}, found {found}")
            }
            Violation::MultipleParents { class } => write!(f, "`{class}` has more than one parent"),
            Violation::DuplicateName { name } => write!(f, "name `{name}` used by two classes"),
            Violation::UnknownParent { class, parent } => {
                write!(f, "`{class}` points to missing parent {parent}")
            }
            Violation::SelfParent { class } => write!(f, "`{class}` is its own parent"),
            Violation::ThreeLevels {
                class,
                parent,
                grandparent,
            } => write!(f, "three levels: `{grandparent}` -> `{parent}` -> `{class}`"),
        }
    }
}

/// A two-level taxonomy. Construct freely; call [`validate_hierarchy`] (or
/// [`Hierarchy::validated`]) before using lookups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    nodes: Vec<Node>,
}

impl Hierarchy {
    pub fn from_nodes(nodes: Vec<Node>) -> Self {
        Self { nodes }
    }

    /// Builds a hierarchy from `(name, parent name)` edges. Ids are assigned
    /// by first appearance of each name; repeating a name with another parent
    /// produces a second node with the same id, which validation reports.
    pub fn from_edges(edges: &[(&str, Option<&str>)]) -> Self {
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        let mut intern = |name: &str| -> usize {
            if let Some(&id) = ids.get(name) {
                return id;
            }
            ids.insert(name.to_string(), order.len());
            order.push(name.to_string());
            order.len() - 1
        };
        let mut declared: Vec<(usize, Option<usize>)> = Vec::new();
        for (name, parent) in edges {
            let id = intern(name);
            let parent_id = parent.map(&mut intern);
            if !declared.contains(&(id, parent_id)) {
                declared.push((id, parent_id));
            }
        }
        let mut nodes: Vec<Node> = declared
            .iter()
            .map(|&(id, parent)| Node {
                id: ClassId(id),
                name: order[id].clone(),
                parent: parent.map(ClassId),
            })
            .collect();
        // Names that only appear as parents become root nodes.
        for (id, name) in order.iter().enumerate() {
            if !declared.iter().any(|&(d, _)| d == id) {
                nodes.push(Node {
                    id: ClassId(id),
                    name: name.clone(),
                    parent: None,
                });
            }
        }
        nodes.sort_by_key(|n| n.id);
        Self { nodes }
    }

    pub fn validated(self) -> Result<Self> {
        let violations = validate_hierarchy(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidHierarchy(violations))
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn node(&self, id: ClassId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownClass(id))
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Result<ClassId> {
        self.nodes
            .iter()
            .find(|n| n.name == name)
            .map(|n| n.id)
            .ok_or_else(|| Error::UnknownClassName(name.to_string()))
    }

    pub fn parent(&self, id: ClassId) -> Option<ClassId> {
        self.nodes.get(id.0).and_then(|n| n.parent)
    }

    pub fn children(&self, id: ClassId) -> impl Iterator<Item = ClassId> + '_ {
        self.nodes
            .iter()
            .filter(move |n| n.parent == Some(id))
            .map(|n| n.id)
    }

    pub fn kind(&self, id: ClassId) -> NodeKind {
        if self.parent(id).is_some() {
            NodeKind::Subclass
        } else if self.children(id).next().is_some() {
            NodeKind::Superclass
        } else {
            NodeKind::Orphan
        }
    }

    pub fn is_superclass(&self, id: ClassId) -> bool {
        self.kind(id) == NodeKind::Superclass
    }

    pub fn superclasses(&self) -> LabelSet {
        self.ids().filter(|&c| self.is_superclass(c)).collect()
    }

    /// Classes that carry samples: subclasses and orphans.
    pub fn leaves(&self) -> Vec<ClassId> {
        self.ids().filter(|&c| !self.is_superclass(c)).collect()
    }

    /// Every label that applies to a sample of `leaf`: the class itself plus
    /// its parent, if any.
    pub fn full_labels(&self, leaf: ClassId) -> Result<LabelSet> {
        let node = self.node(leaf)?;
        let mut set = LabelSet::new();
        set.insert(leaf);
        if let Some(p) = node.parent {
            set.insert(p);
        }
        Ok(set)
    }

    /// Labels of `leaf` that the model is expected to predict given the
    /// classes seen so far.
    pub fn eval_truth(&self, leaf: ClassId, seen: &LabelSet) -> LabelSet {
        match self.full_labels(leaf) {
            Ok(full) => full.intersection(seen).copied().collect(),
            Err(_) => LabelSet::new(),
        }
    }

    /// Renumbers classes so that `order[i]` becomes `ClassId(i)`.
    fn reindexed(&self, order: &[ClassId]) -> (Hierarchy, Vec<ClassId>) {
        let mut map = vec![ClassId(usize::MAX); self.nodes.len()];
        for (new, old) in order.iter().enumerate() {
            map[old.0] = ClassId(new);
        }
        let nodes = order
            .iter()
            .enumerate()
            .map(|(new, old)| {
                let n = &self.nodes[old.0];
                Node {
                    id: ClassId(new),
                    name: n.name.clone(),
                    parent: n.parent.map(|p| map[p.0]),
                }
            })
            .collect();
        (Hierarchy { nodes }, map)
    }
}

/// Reports every structural problem; an empty list means the taxonomy is a
/// valid two-level forest with dense ids.
pub fn validate_hierarchy(h: &Hierarchy) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut by_id: BTreeMap<ClassId, Vec<&Node>> = BTreeMap::new();
    for n in &h.nodes {
        by_id.entry(n.id).or_default().push(n);
    }
    for (expected, id) in by_id.keys().enumerate() {
        if id.0 != expected {
            out.push(Violation::NonContiguousIds {
                expected,
                found: *id,
            });
            break;
        }
    }
    let mut names: BTreeMap<&str, ClassId> = BTreeMap::new();
    for (id, group) in &by_id {
        let parents: BTreeSet<Option<ClassId>> = group.iter().map(|n| n.parent).collect();
        if parents.len() > 1 {
            out.push(Violation::MultipleParents {
                class: group[0].name.clone(),
            });
        }
        for n in group {
            if let Some(other) = names.insert(n.name.as_str(), *id) {
                if other != *id {
                    out.push(Violation::DuplicateName {
                        name: n.name.clone(),
                    });
                }
            }
        }
    }
    let mut seen_three = BTreeSet::new();
    for n in &h.nodes {
        let Some(p) = n.parent else { continue };
        if p == n.id {
            out.push(Violation::SelfParent {
                class: n.name.clone(),
            });
            continue;
        }
        let Some(parents) = by_id.get(&p) else {
            out.push(Violation::UnknownParent {
                class: n.name.clone(),
                parent: p,
            });
            continue;
        };
        for pn in parents {
            if let Some(gp) = pn.parent {
                if seen_three.insert((n.id, p, gp)) {
                    let gp_name = by_id
                        .get(&gp)
                        .map(|g| g[0].name.clone())
                        .unwrap_or_else(|| gp.to_string());
                    out.push(Violation::ThreeLevels {
                        class: n.name.clone(),
                        parent: pn.name.clone(),
                        grandparent: gp_name,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledClass {
    pub class: ClassId,
    pub budget: usize,
}

/// Ordered incremental steps. Step 0 is the initial step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    steps: Vec<Vec<ScheduledClass>>,
}

impl TaskSchedule {
    pub fn new(steps: Vec<Vec<ScheduledClass>>) -> Self {
        Self { steps }
    }

    pub fn steps(&self) -> &[Vec<ScheduledClass>] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> &[ScheduledClass] {
        self.steps.get(t).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn step_classes(&self, t: usize) -> impl Iterator<Item = ClassId> + '_ {
        self.step(t).iter().map(|c| c.class)
    }

    /// Number of classes introduced through step `t` inclusive (`n_t`).
    pub fn classes_through(&self, t: usize) -> usize {
        self.steps.iter().take(t + 1).map(Vec::len).sum()
    }

    /// `n_0`: number of classes introduced by the initial step.
    pub fn initial_count(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    pub fn total_classes(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn seen_through(&self, t: usize) -> LabelSet {
        self.steps
            .iter()
            .take(t + 1)
            .flatten()
            .map(|c| c.class)
            .collect()
    }

    pub fn step_of(&self, class: ClassId) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.iter().any(|c| c.class == class))
    }

    pub fn budget_of(&self, class: ClassId) -> Option<usize> {
        self.steps
            .iter()
            .flatten()
            .find(|c| c.class == class)
            .map(|c| c.budget)
    }

    /// Checks every schedule invariant against `h`, returning a description
    /// of each failure.
    pub fn violations(&self, h: &Hierarchy) -> Vec<String> {
        let mut out = Vec::new();
        let mut count: BTreeMap<ClassId, usize> = BTreeMap::new();
        for c in self.steps.iter().flatten() {
            *count.entry(c.class).or_default() += 1;
        }
        for id in h.ids() {
            match count.get(&id) {
                None => out.push(format!("`{}` is never introduced", h.name(id))),
                Some(&k) if k > 1 => out.push(format!("`{}` appears {k} times", h.name(id))),
                _ => {}
            }
        }
        for id in count.keys() {
            if h.node(*id).is_err() {
                out.push(format!("schedule references unknown class {id}"));
            }
        }
        for (t, s) in self.steps.iter().enumerate() {
            for c in s {
                if let Some(p) = h.parent(c.class) {
                    match self.step_of(p) {
                        Some(tp) if tp < t => {}
                        _ => out.push(format!(
                            "`{}` is not introduced before its subclass `{}`",
                            h.name(p),
                            h.name(c.class)
                        )),
                    }
                    if let Some(pb) = self.budget_of(p) {
                        if pb <= c.budget {
                            out.push(format!(
                                "budget of `{}` ({pb}) must exceed that of `{}` ({})",
                                h.name(p),
                                h.name(c.class),
                                c.budget
                            ));
                        }
                    }
                }
            }
        }
        let order: Vec<ClassId> = self.steps.iter().flatten().map(|c| c.class).collect();
        if order.iter().enumerate().any(|(i, c)| c.0 != i) {
            out.push("class ids are not in introduction order".to_string());
        }
        out
    }
}

/// Number of classes introduced by each step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLayout {
    pub sizes: Vec<usize>,
}

impl StepLayout {
    pub fn uniform(steps: usize, per_step: usize) -> Self {
        Self {
            sizes: vec![per_step; steps],
        }
    }

    /// `initial` classes first, then `per_step` per step until `total`
    /// classes are placed; the last step may be short.
    pub fn with_initial(initial: usize, per_step: usize, total: usize) -> Self {
        let mut sizes = vec![initial.min(total)];
        let mut left = total.saturating_sub(initial);
        while left > 0 && per_step > 0 {
            let s = per_step.min(left);
            sizes.push(s);
            left -= s;
        }
        Self { sizes }
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub superclass: usize,
    pub subclass: usize,
    pub orphan: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            superclass: 60,
            subclass: 15,
            orphan: 15,
        }
    }
}

impl Budgets {
    pub fn for_kind(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Superclass => self.superclass,
            NodeKind::Subclass => self.subclass,
            NodeKind::Orphan => self.orphan,
        }
    }
}

/// A hierarchy renumbered in introduction order together with its schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Benchmark {
    pub hierarchy: Hierarchy,
    pub schedule: TaskSchedule,
}

/// Places every class of `h` into the slots described by `layout`.
///
/// Superclasses (in seeded random order) take the earliest slots. Each
/// remaining slot, in order, is given to a class drawn uniformly from those
/// whose parent already sits in a strictly earlier step. The returned
/// hierarchy is renumbered so that ids follow introduction order.
pub fn build_schedule<R: Rng + ?Sized>(
    h: &Hierarchy,
    layout: &StepLayout,
    budgets: &Budgets,
    rng: &mut R,
) -> Result<Benchmark> {
    let violations = validate_hierarchy(h);
    if !violations.is_empty() {
        return Err(Error::InvalidHierarchy(violations));
    }
    if layout.total() != h.len() {
        return Err(Error::InvalidSchedule(format!(
            "layout holds {} classes but the hierarchy has {}",
            layout.total(),
            h.len()
        )));
    }
    if budgets.superclass <= budgets.subclass {
        return Err(Error::InvalidConfig(format!(
            "superclass budget {} must exceed subclass budget {}",
            budgets.superclass, budgets.subclass
        )));
    }
    if budgets.superclass == 0 || budgets.subclass == 0 || budgets.orphan == 0 {
        return Err(Error::InvalidConfig("budgets must be positive".into()));
    }

    let slot_step: Vec<usize> = layout
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| std::iter::repeat_n(t, n))
        .collect();

    let mut supers: Vec<ClassId> = h.superclasses().into_iter().collect();
    supers.shuffle(rng);
    let mut rest: Vec<ClassId> = h.ids().filter(|c| !h.is_superclass(*c)).collect();
    rest.shuffle(rng);

    let mut placed_step: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut order: Vec<ClassId> = Vec::with_capacity(h.len());
    for (slot, &c) in supers.iter().enumerate() {
        placed_step.insert(c, slot_step[slot]);
        order.push(c);
    }
    for &t in &slot_step[supers.len()..] {
        let eligible: Vec<usize> = rest
            .iter()
            .enumerate()
            .filter(|(_, c)| match h.parent(**c) {
                None => true,
                Some(p) => placed_step.get(&p).is_some_and(|&tp| tp < t),
            })
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            let stuck = rest[0];
            let parent = h.parent(stuck).map(|p| h.name(p).to_string());
            return Err(Error::InfeasibleSchedule {
                class: h.name(stuck).to_string(),
                reason: format!(
                    "no free slot after step of parent `{}`",
                    parent.unwrap_or_default()
                ),
            });
        }
        let pick = eligible[rng.random_range(0..eligible.len())];
        let c = rest.remove(pick);
        placed_step.insert(c, t);
        order.push(c);
    }

    let (hierarchy, map) = h.reindexed(&order);
    let mut steps: Vec<Vec<ScheduledClass>> = vec![Vec::new(); layout.sizes.len()];
    for (slot, old) in order.iter().enumerate() {
        let new = map[old.0];
        steps[slot_step[slot]].push(ScheduledClass {
            class: new,
            budget: budgets.for_kind(hierarchy.kind(new)),
        });
    }
    Ok(Benchmark {
        hierarchy,
        schedule: TaskSchedule { steps },
    })
}

/// The class a sample of `leaf` is presented as during step `step`.
pub fn training_label(
    h: &Hierarchy,
    schedule: &TaskSchedule,
    step: usize,
    leaf: ClassId,
) -> Result<ClassId> {
    h.node(leaf)?;
    let classes = schedule.step(step);
    if classes.iter().any(|c| c.class == leaf) {
        return Ok(leaf);
    }
    if let Some(p) = h.parent(leaf) {
        if classes.iter().any(|c| c.class == p) {
            return Ok(p);
        }
    }
    Err(Error::NotTrainedAtStep { class: leaf, step })
}

/// Desk-scale taxonomy of 15 classes: four superclass families of three
/// classes each (the superclass and two subclasses) plus three orphan
/// subclasses.
pub fn default_hierarchy() -> Hierarchy {
    let edges: &[(&str, Option<&str>)] = &[
        ("bear", None),
        ("whale", None),
        ("tree", None),
        ("vehicle", None),
        ("polar_bear", Some("bear")),
        ("grizzly_bear", Some("bear")),
        ("blue_whale", Some("whale")),
        ("orca", Some("whale")),
        ("oak", Some("tree")),
        ("pine", Some("tree")),
        ("bus", Some("vehicle")),
        ("truck", Some("vehicle")),
        ("rose", None),
        ("castle", None),
        ("cloud", None),
    ];
    Hierarchy::from_edges(edges)
}

/// Seven steps over the default taxonomy: the four superclasses first, then
/// two classes per step (the last step introduces one).
pub fn default_layout() -> StepLayout {
    StepLayout::with_initial(4, 2, 15)
}
