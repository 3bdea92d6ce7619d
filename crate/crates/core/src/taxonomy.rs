//! Unified semantic-atom taxonomy.
//!
//! Every dataset label is a union of mutually exclusive semantic atoms. For
//! each dataset the atom groups of its labels form an exact partition of the
//! atom set, with atom 0 (`"void"`) always inside the group of label 0.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const VOID_ATOM_NAME: &str = "void";

/// On-disk representation of a taxonomy file, before validation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyFile {
    pub atoms: Vec<String>,
    pub datasets: BTreeMap<String, LabelSpaceFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<HierarchyNode>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LabelSpaceFile {
    pub labels: Vec<String>,
    pub groups: Vec<Vec<usize>>,
}

/// One classifier of the optional hierarchy. A class that has a child
/// classifier is refined by it at decode time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HierarchyNode {
    pub name: String,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub children: BTreeMap<String, HierarchyNode>,
}

impl HierarchyNode {
    /// A node without children.
    pub fn leaf(name: &str, classes: &[&str]) -> Self {
        HierarchyNode {
            name: name.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            children: BTreeMap::new(),
        }
    }

    pub fn with_child(mut self, class: &str, child: HierarchyNode) -> Self {
        self.children.insert(class.to_string(), child);
        self
    }

    /// Classes that are not refined by a child classifier, in depth-first
    /// order. This is the label enumeration emitted by hierarchical decoding.
    pub fn leaf_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<String>) {
        for class in &self.classes {
            match self.children.get(class) {
                Some(child) => child.collect_leaves(out),
                None => out.push(class.clone()),
            }
        }
    }

    /// All nodes of the tree, depth-first, root first.
    pub fn nodes(&self) -> Vec<&HierarchyNode> {
        let mut out = vec![self];
        for class in &self.classes {
            if let Some(child) = self.children.get(class) {
                out.extend(child.nodes());
            }
        }
        out
    }

    fn check(&self, report: &mut ValidationReport, seen_names: &mut HashSet<String>) {
        if !seen_names.insert(self.name.clone()) {
            report.violation(
                None,
                ViolationKind::Hierarchy,
                format!("classifier name `{}` used more than once", self.name),
            );
        }
        let mut classes = HashSet::new();
        for class in &self.classes {
            if !classes.insert(class.as_str()) {
                report.violation(
                    None,
                    ViolationKind::Hierarchy,
                    format!("class `{class}` repeated in classifier `{}`", self.name),
                );
            }
        }
        for (key, child) in &self.children {
            if !classes.contains(key.as_str()) {
                report.violation(
                    None,
                    ViolationKind::Hierarchy,
                    format!(
                        "child key `{key}` of classifier `{}` is not one of its classes",
                        self.name
                    ),
                );
            }
            child.check(report, seen_names);
        }
    }

    fn count_classes(&self, counts: &mut HashMap<String, usize>) {
        for class in &self.classes {
            *counts.entry(class.clone()).or_default() += 1;
        }
        for child in self.children.values() {
            child.count_classes(counts);
        }
    }
}

/// A dataset label space with its atom groups.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    labels: Vec<String>,
    groups: Vec<Vec<usize>>,
    atom_to_label: Vec<usize>,
}

impl LabelSpace {
    /// Builds a label space over `atom_count` atoms, checking the partition.
    pub fn new(
        dataset: &str,
        labels: Vec<String>,
        groups: Vec<Vec<usize>>,
        atom_count: usize,
    ) -> Result<Self> {
        let partition_err = |atom: usize, reason: String| Error::Partition {
            dataset: dataset.to_string(),
            atom,
            reason,
        };
        if labels.len() != groups.len() {
            return Err(invalid(format!(
                "dataset `{dataset}` has {} labels but {} groups",
                labels.len(),
                groups.len()
            )));
        }
        if labels.is_empty() {
            return Err(invalid(format!("dataset `{dataset}` has no labels")));
        }
        let mut atom_to_label = vec![usize::MAX; atom_count];
        for (label, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(invalid(format!(
                    "dataset `{dataset}` label {label} (`{}`) has an empty atom group",
                    labels[label]
                )));
            }
            for &atom in group {
                if atom >= atom_count {
                    return Err(partition_err(
                        atom,
                        format!("atom id out of range (atom count {atom_count})"),
                    ));
                }
                if atom_to_label[atom] != usize::MAX {
                    return Err(partition_err(
                        atom,
                        format!(
                            "atom assigned to both label {} and label {label}",
                            atom_to_label[atom]
                        ),
                    ));
                }
                atom_to_label[atom] = label;
            }
        }
        if let Some(atom) = atom_to_label.iter().position(|&l| l == usize::MAX) {
            return Err(partition_err(atom, "atom not assigned to any label".into()));
        }
        if atom_count > 0 && atom_to_label[0] != 0 {
            return Err(partition_err(
                0,
                format!(
                    "void atom belongs to label {} instead of label 0",
                    atom_to_label[0]
                ),
            ));
        }
        Ok(LabelSpace {
            labels,
            groups,
            atom_to_label,
        })
    }

    /// Singleton groups: label `k` is atom `k`.
    pub fn identity(atom_names: &[String]) -> Self {
        let n = atom_names.len();
        LabelSpace {
            labels: atom_names.to_vec(),
            groups: (0..n).map(|a| vec![a]).collect(),
            atom_to_label: (0..n).collect(),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, label: usize) -> &[usize] {
        &self.groups[label]
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn atom_count(&self) -> usize {
        self.atom_to_label.len()
    }

    pub fn label_of_atom(&self, atom: usize) -> Option<usize> {
        self.atom_to_label.get(atom).copied()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }
}

/// Validated taxonomy. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomTaxonomy {
    atoms: Vec<String>,
    datasets: BTreeMap<String, LabelSpace>,
    hierarchy: Option<HierarchyNode>,
}

impl AtomTaxonomy {
    pub fn atoms(&self) -> &[String] {
        &self.atoms
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn datasets(&self) -> &BTreeMap<String, LabelSpace> {
        &self.datasets
    }

    pub fn dataset(&self, name: &str) -> Result<&LabelSpace> {
        self.datasets
            .get(name)
            .ok_or_else(|| invalid(format!("unknown dataset `{name}`")))
    }

    pub fn hierarchy(&self) -> Option<&HierarchyNode> {
        self.hierarchy.as_ref()
    }

    /// The label of `dataset` whose group contains `atom`.
    pub fn label_of_atom(&self, dataset: &str, atom: usize) -> Result<usize> {
        let space = self.dataset(dataset)?;
        space.label_of_atom(atom).ok_or_else(|| {
            invalid(format!(
                "atom id {atom} out of range (atom count {})",
                self.atoms.len()
            ))
        })
    }

    pub fn to_file(&self) -> TaxonomyFile {
        TaxonomyFile {
            atoms: self.atoms.clone(),
            datasets: self
                .datasets
                .iter()
                .map(|(name, space)| {
                    (
                        name.clone(),
                        LabelSpaceFile {
                            labels: space.labels.clone(),
                            groups: space.groups.clone(),
                        },
                    )
                })
                .collect(),
            hierarchy: self.hierarchy.clone(),
        }
    }
}

impl TryFrom<TaxonomyFile> for AtomTaxonomy {
    type Error = Error;

    fn try_from(file: TaxonomyFile) -> Result<Self> {
        check_atoms(&file.atoms)?;
        if file.datasets.is_empty() {
            return Err(invalid("taxonomy declares no datasets"));
        }
        let atom_count = file.atoms.len();
        let mut datasets = BTreeMap::new();
        for (name, space) in file.datasets {
            let space = LabelSpace::new(&name, space.labels, space.groups, atom_count)?;
            datasets.insert(name, space);
        }
        let tax = AtomTaxonomy {
            atoms: file.atoms,
            datasets,
            hierarchy: file.hierarchy,
        };
        let report = validate_atom_properties(&tax);
        if let Some(v) = report.violations.first() {
            return Err(invalid(v.to_string()));
        }
        Ok(tax)
    }
}

fn check_atoms(atoms: &[String]) -> Result<()> {
    match atoms.first() {
        None => return Err(invalid("taxonomy declares no atoms")),
        Some(first) if first != VOID_ATOM_NAME => {
            return Err(invalid(format!(
                "atom 0 must be named `{VOID_ATOM_NAME}`, found `{first}`"
            )))
        }
        _ => {}
    }
    let mut seen = HashSet::new();
    for (id, name) in atoms.iter().enumerate() {
        if name.is_empty() {
            return Err(invalid(format!("atom {id} has an empty name")));
        }
        if !seen.insert(name.as_str()) {
            return Err(invalid(format!("atom name `{name}` is not unique")));
        }
    }
    Ok(())
}

/// Reads, parses and validates a taxonomy file.
pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<AtomTaxonomy> {
    let text = fs::read_to_string(path)?;
    let file: TaxonomyFile = serde_json::from_str(&text)?;
    AtomTaxonomy::try_from(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Schema,
    Partition,
    IsA,
    HasA,
    VoidPlacement,
    Hierarchy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub kind: ViolationKind,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.dataset {
            Some(d) => write!(f, "[{:?}] dataset `{d}`: {}", self.kind, self.detail),
            None => write!(f, "[{:?}] {}", self.kind, self.detail),
        }
    }
}

/// Outcome of a taxonomy check. Violations make the taxonomy unusable;
/// warnings are informational.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn violation(&mut self, dataset: Option<&str>, kind: ViolationKind, detail: String) {
        self.violations.push(Violation {
            dataset: dataset.map(str::to_string),
            kind,
            detail,
        });
    }
}

/// Checks every atom and partition property of a raw taxonomy file and
/// collects all violations instead of stopping at the first one.
pub fn validate_file(file: &TaxonomyFile) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Err(e) = check_atoms(&file.atoms) {
        report.violation(None, ViolationKind::Schema, e.to_string());
    }
    if file.datasets.is_empty() {
        report.violation(None, ViolationKind::Schema, "no datasets declared".into());
    }
    let atom_count = file.atoms.len();
    for (name, space) in &file.datasets {
        let ds = Some(name.as_str());
        if space.labels.len() != space.groups.len() {
            report.violation(
                ds,
                ViolationKind::Schema,
                format!(
                    "{} labels but {} groups",
                    space.labels.len(),
                    space.groups.len()
                ),
            );
        }
        let mut owner: Vec<Vec<usize>> = vec![Vec::new(); atom_count];
        for (label, group) in space.groups.iter().enumerate() {
            if group.is_empty() {
                let label_name = space.labels.get(label).map(String::as_str).unwrap_or("?");
                report.violation(
                    ds,
                    ViolationKind::HasA,
                    format!("label {label} (`{label_name}`) contains no atom"),
                );
            }
            for &atom in group {
                match owner.get_mut(atom) {
                    Some(o) => o.push(label),
                    None => report.violation(
                        ds,
                        ViolationKind::Partition,
                        format!("atom id {atom} out of range (atom count {atom_count})"),
                    ),
                }
            }
        }
        for (atom, labels) in owner.iter().enumerate() {
            match labels.len() {
                0 => report.violation(
                    ds,
                    ViolationKind::Partition,
                    format!("atom {atom} is not assigned to any label"),
                ),
                1 => {}
                _ => report.violation(
                    ds,
                    ViolationKind::IsA,
                    format!("atom {atom} is assigned to labels {labels:?}"),
                ),
            }
        }
        if atom_count > 0 && !space.groups.first().is_some_and(|g| g.contains(&0)) {
            report.violation(
                ds,
                ViolationKind::VoidPlacement,
                "void atom 0 is not in the group of label 0".into(),
            );
        }
    }
    if let Some(h) = &file.hierarchy {
        check_hierarchy(
            h,
            file.datasets
                .iter()
                .map(|(n, s)| (n.as_str(), s.labels.as_slice())),
            &mut report,
        );
    }
    if report.violations.is_empty() {
        report.warnings = void_warnings(
            &file.atoms,
            file.datasets
                .iter()
                .map(|(n, s)| (n.as_str(), s.groups.as_slice())),
        );
    }
    report
}

/// Property report for an already loaded taxonomy: hierarchy coverage and
/// warnings for atoms that are void in one dataset but meaningful in another.
pub fn validate_atom_properties(tax: &AtomTaxonomy) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (name, space) in &tax.datasets {
        for (label, group) in space.groups.iter().enumerate() {
            if group.is_empty() {
                report.violation(
                    Some(name),
                    ViolationKind::HasA,
                    format!("label {label} contains no atom"),
                );
            }
        }
        if space.atom_to_label.len() != tax.atoms.len() {
            report.violation(
                Some(name),
                ViolationKind::Partition,
                "group map does not cover the atom set".into(),
            );
        }
    }
    if let Some(h) = &tax.hierarchy {
        check_hierarchy(
            h,
            tax.datasets
                .iter()
                .map(|(n, s)| (n.as_str(), s.labels.as_slice())),
            &mut report,
        );
    }
    report.warnings = void_warnings(
        &tax.atoms,
        tax.datasets
            .iter()
            .map(|(n, s)| (n.as_str(), s.groups.as_slice())),
    );
    report
}

fn check_hierarchy<'a>(
    root: &HierarchyNode,
    datasets: impl Iterator<Item = (&'a str, &'a [String])>,
    report: &mut ValidationReport,
) {
    root.check(report, &mut HashSet::new());
    let mut counts = HashMap::new();
    root.count_classes(&mut counts);
    let mut reported = BTreeSet::new();
    for (name, labels) in datasets {
        // label 0 is the dataset void class and is not classified
        for label in labels.iter().skip(1) {
            let n = counts.get(label).copied().unwrap_or(0);
            if n != 1 && reported.insert(label.clone()) {
                report.violation(
                    Some(name),
                    ViolationKind::Hierarchy,
                    format!("label `{label}` appears {n} times in the hierarchy, expected once"),
                );
            }
        }
    }
}

fn void_warnings<'a>(
    atoms: &[String],
    datasets: impl Iterator<Item = (&'a str, &'a [Vec<usize>])>,
) -> Vec<String> {
    let mut void_in: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    let mut meaningful_in: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (name, groups) in datasets {
        for (label, group) in groups.iter().enumerate() {
            for &atom in group.iter().filter(|&&a| a != 0) {
                let map = if label == 0 {
                    &mut void_in
                } else {
                    &mut meaningful_in
                };
                map.entry(atom).or_default().push(name);
            }
        }
    }
    void_in
        .iter()
        .filter_map(|(atom, void_ds)| {
            let mean = meaningful_in.get(atom)?;
            Some(format!(
                "atom {atom} (`{}`) is void in {:?} but labeled in {:?}",
                atoms.get(*atom).map(String::as_str).unwrap_or("?"),
                void_ds,
                mean
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    type DatasetSpec<'a> = (&'a str, &'a [&'a str], Vec<Vec<usize>>);

    fn file(atoms: &[&str], datasets: &[DatasetSpec]) -> TaxonomyFile {
        TaxonomyFile {
            atoms: atoms.iter().map(|s| s.to_string()).collect(),
            datasets: datasets
                .iter()
                .map(|(n, labels, groups)| {
                    (
                        n.to_string(),
                        LabelSpaceFile {
                            labels: labels.iter().map(|s| s.to_string()).collect(),
                            groups: groups.clone(),
                        },
                    )
                })
                .collect(),
            hierarchy: None,
        }
    }

    #[test]
    fn minimal_identity_taxonomy() {
        let f = file(
            &["void", "road"],
            &[("d", &["void", "road"], vec![vec![0], vec![1]])],
        );
        let tax = AtomTaxonomy::try_from(f).unwrap();
        assert_eq!(tax.atom_count(), 2);
        assert_eq!(tax.label_of_atom("d", 1).unwrap(), 1);
    }

    #[test]
    fn atom_in_two_groups_is_rejected() {
        let f = file(
            &["void", "road"],
            &[("d", &["void", "road"], vec![vec![0], vec![0, 1]])],
        );
        match AtomTaxonomy::try_from(f.clone()) {
            Err(Error::Partition { atom, dataset, .. }) => {
                assert_eq!(atom, 0);
                assert_eq!(dataset, "d");
            }
            other => panic!("expected partition error, got {other:?}"),
        }
        let report = validate_file(&f);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::IsA));
    }

    #[test]
    fn coarse_label_absorbs_two_atoms() {
        let f = file(
            &["void", "car", "truck"],
            &[("d", &["void", "vehicle"], vec![vec![0], vec![1, 2]])],
        );
        let tax = AtomTaxonomy::try_from(f).unwrap();
        assert_eq!(tax.dataset("d").unwrap().group(1).len(), 2);
        assert_eq!(tax.label_of_atom("d", 2).unwrap(), 1);
        assert_eq!(tax.label_of_atom("d", 0).unwrap(), 0);
    }

    #[test]
    fn empty_group_is_has_a_violation() {
        let f = file(
            &["void", "road"],
            &[(
                "d",
                &["void", "road", "ghost"],
                vec![vec![0], vec![1], vec![]],
            )],
        );
        let report = validate_file(&f);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::HasA);
    }

    #[test]
    fn missing_atom_is_partition_violation() {
        let f = file(
            &["void", "road", "sky"],
            &[("d", &["void", "road"], vec![vec![0], vec![1]])],
        );
        let report = validate_file(&f);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::Partition);
        assert!(AtomTaxonomy::try_from(f).is_err());
    }

    #[test]
    fn valid_taxonomy_reports_nothing() {
        let f = file(
            &["void", "road"],
            &[("d", &["void", "road"], vec![vec![0], vec![1]])],
        );
        let report = validate_file(&f);
        assert!(report.is_valid());
        assert!(report.warnings.is_empty());
        let tax = AtomTaxonomy::try_from(f).unwrap();
        assert!(validate_atom_properties(&tax).is_valid());
    }

    #[test]
    fn void_in_one_dataset_meaningful_in_other_warns() {
        let f = file(
            &["void", "road", "sign"],
            &[
                ("a", &["void", "road"], vec![vec![0, 2], vec![1]]),
                (
                    "b",
                    &["void", "road", "sign"],
                    vec![vec![0], vec![1], vec![2]],
                ),
            ],
        );
        let report = validate_file(&f);
        assert!(report.is_valid());
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("sign"));
    }

    #[test]
    fn void_atom_outside_label_zero() {
        let f = file(
            &["void", "road"],
            &[("d", &["void", "road"], vec![vec![1], vec![0]])],
        );
        assert!(matches!(
            AtomTaxonomy::try_from(f.clone()),
            Err(Error::Partition { atom: 0, .. })
        ));
        assert!(validate_file(&f)
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::VoidPlacement));
    }

    #[test]
    fn first_atom_must_be_void() {
        let f = file(
            &["road", "void"],
            &[("d", &["void", "road"], vec![vec![0], vec![1]])],
        );
        assert!(AtomTaxonomy::try_from(f).is_err());
    }

    #[test]
    fn label_of_atom_errors() {
        let f = file(
            &["void", "road"],
            &[("d", &["void", "road"], vec![vec![0], vec![1]])],
        );
        let tax = AtomTaxonomy::try_from(f).unwrap();
        assert!(tax.label_of_atom("nope", 0).is_err());
        assert!(tax.label_of_atom("d", 2).is_err());
    }

    #[test]
    fn hierarchy_coverage() {
        let mut f = file(
            &["void", "road", "person", "rider"],
            &[(
                "d",
                &["void", "road", "person", "rider"],
                vec![vec![0], vec![1], vec![2], vec![3]],
            )],
        );
        let tree = HierarchyNode::leaf("root", &["road", "human"])
            .with_child("human", HierarchyNode::leaf("human", &["person", "rider"]));
        f.hierarchy = Some(tree.clone());
        assert!(validate_file(&f).is_valid());
        assert_eq!(tree.leaf_labels(), vec!["road", "person", "rider"]);

        let bad = HierarchyNode::leaf("root", &["road", "person"])
            .with_child("cyclist", HierarchyNode::leaf("c", &["person"]));
        f.hierarchy = Some(bad);
        let report = validate_file(&f);
        // orphan child key, `person` twice, `rider` missing
        assert_eq!(
            report
                .violations
                .iter()
                .filter(|v| v.kind == ViolationKind::Hierarchy)
                .count(),
            3
        );
    }
}
