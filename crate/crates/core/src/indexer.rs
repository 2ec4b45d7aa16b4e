//! User identifiers: quantized semantic ids (P-ID), sequential numbers
//! (N-ID) and the dataset's own strings (O-ID).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedUserVector;
use crate::linalg;
use crate::rqvae::{CodebookStack, RqvaeModel};

pub const MAX_LEVELS: usize = 26;

/// Hierarchical codeword tuple, rendered as `<a_12> <b_3> <c_200>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId(pub Vec<usize>);

fn level_letter(level: usize) -> char {
    (b'a' + level as u8) as char
}

impl SemanticId {
    pub fn codes(&self) -> &[usize] {
        &self.0
    }

    pub fn render(&self) -> String {
        self.to_string()
    }

    /// Parse a rendered id; tokens must appear in level order `a, b, c, ...`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::data(format!("malformed semantic id {s:?}"));
        let mut codes = Vec::new();
        for token in s.split_whitespace() {
            let inner = token
                .strip_prefix('<')
                .and_then(|t| t.strip_suffix('>'))
                .ok_or_else(bad)?;
            let (letter, code) = inner.split_once('_').ok_or_else(bad)?;
            if codes.len() >= MAX_LEVELS
                || letter.len() != 1
                || !letter.starts_with(level_letter(codes.len()))
            {
                return Err(bad());
            }
            if code.is_empty() || !code.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            codes.push(code.parse().map_err(|_| bad())?);
        }
        if codes.is_empty() {
            return Err(bad());
        }
        Ok(SemanticId(codes))
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (level, code) in self.0.iter().enumerate() {
            if level > 0 {
                f.write_str(" ")?;
            }
            write!(f, "<{}_{}>", level_letter(level), code)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IndexMode {
    #[serde(rename = "P-ID")]
    Pid,
    #[serde(rename = "N-ID")]
    Nid,
    #[serde(rename = "O-ID")]
    Oid,
}

impl IndexMode {
    pub const ALL: [IndexMode; 3] = [IndexMode::Pid, IndexMode::Nid, IndexMode::Oid];

    pub fn as_str(&self) -> &'static str {
        match self {
            IndexMode::Pid => "P-ID",
            IndexMode::Nid => "N-ID",
            IndexMode::Oid => "O-ID",
        }
    }

    /// Lowercase tag used for directory and file names.
    pub fn slug(&self) -> &'static str {
        match self {
            IndexMode::Pid => "pid",
            IndexMode::Nid => "nid",
            IndexMode::Oid => "oid",
        }
    }
}

impl fmt::Display for IndexMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndexMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "pid" => Ok(IndexMode::Pid),
            "nid" => Ok(IndexMode::Nid),
            "oid" => Ok(IndexMode::Oid),
            _ => Err(Error::Config(format!("unknown index mode {s:?}"))),
        }
    }
}

/// Injective map from user id to rendered identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexAssignment {
    mode: IndexMode,
    ids: BTreeMap<String, String>,
}

impl IndexAssignment {
    pub fn new(mode: IndexMode, ids: BTreeMap<String, String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        for (user, rendered) in &ids {
            if rendered.is_empty() || rendered.contains(['\t', '\n']) {
                return Err(Error::data(format!(
                    "invalid id {rendered:?} for user {user}"
                )));
            }
            if mode == IndexMode::Pid {
                SemanticId::parse(rendered)?;
            }
            if !seen.insert(rendered.as_str()) {
                return Err(Error::data(format!(
                    "id {rendered} assigned to more than one user"
                )));
            }
        }
        Ok(IndexAssignment { mode, ids })
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn rendered(&self, user_id: &str) -> Option<&str> {
        self.ids.get(user_id).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.ids.iter().map(|(u, r)| (u.as_str(), r.as_str()))
    }

    /// Set of all rendered ids.
    pub fn rendered_set(&self) -> HashSet<&str> {
        self.ids.values().map(String::as_str).collect()
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (user, rendered) in &self.ids {
            writeln!(out, "{user}\t{rendered}\t{}", self.mode)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let mut mode = None;
        let mut ids = BTreeMap::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<assignment>", e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [user, rendered, m] = fields[..] else {
                return Err(Error::data(format!(
                    "assignment line {}: expected 3 fields",
                    n + 1
                )));
            };
            let m: IndexMode = m.parse()?;
            if *mode.get_or_insert(m) != m {
                return Err(Error::data("assignment file mixes index modes"));
            }
            if ids.insert(user.to_string(), rendered.to_string()).is_some() {
                return Err(Error::data(format!("user {user} listed twice")));
            }
        }
        let mode = mode.ok_or_else(|| Error::data("assignment file is empty"))?;
        Self::new(mode, ids)
    }
}

/// Raw quantization of one user: selected codes and the residual each level
/// quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCode {
    pub codes: Vec<usize>,
    pub residuals: Vec<Vec<f64>>,
}

/// Quantize every user's fused vector and make the result injective.
pub fn assign_pid(model: &RqvaeModel, fused: &[FusedUserVector]) -> Result<IndexAssignment> {
    let capacity = model.stack.capacity();
    if fused.len() as u128 > capacity {
        return Err(Error::Capacity {
            users: fused.len(),
            capacity,
        });
    }
    if model.stack.depth() > MAX_LEVELS {
        return Err(Error::Config(format!(
            "at most {MAX_LEVELS} codebook levels can be rendered"
        )));
    }
    let mut raw = BTreeMap::new();
    for user in fused {
        let q = model.stack.quantize(&model.encode(&user.x));
        let mut residuals = q.residuals;
        residuals.pop();
        let prev = raw.insert(
            user.user_id.clone(),
            RawCode {
                codes: q.codes,
                residuals,
            },
        );
        if prev.is_some() {
            return Err(Error::data(format!("user {} listed twice", user.user_id)));
        }
    }
    let resolved = resolve_collisions(&model.stack, &raw)?;
    let ids = resolved
        .into_iter()
        .map(|(user, codes)| (user, SemanticId(codes).render()))
        .collect();
    IndexAssignment::new(IndexMode::Pid, ids)
}

/// Candidate codes at one level, nearest to `residual` first, excluding `skip`.
fn ranked_codes(stack: &CodebookStack, level: usize, residual: &[f64], skip: usize) -> Vec<usize> {
    let cb = &stack.levels[level];
    let mut order: Vec<(f64, usize)> = (0..cb.size())
        .filter(|&k| k != skip)
        .map(|k| (linalg::squared_distance(cb.vector(k), residual), k))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, k)| k).collect()
}

/// Level subsets of size `h`, deepest levels first.
fn level_sets(depth: usize, h: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, h: usize, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if h == 0 {
            out.push(acc.clone());
            return;
        }
        for l in (h - 1..start).rev() {
            acc.push(l);
            go(l, h - 1, acc, out);
            acc.pop();
        }
    }
    let mut out = Vec::new();
    go(depth, h, &mut Vec::new(), &mut out);
    out
}

/// Search for a free tuple that changes exactly the levels in `set`.
/// The shallowest changed level varies slowest.
fn search_set(
    raw: &RawCode,
    set: &[usize],
    ranked: &[Vec<usize>],
    taken: &HashSet<Vec<usize>>,
) -> Option<Vec<usize>> {
    // `set` is deepest-first; iterate shallowest level in the outer loop
    let levels: Vec<usize> = set.iter().rev().copied().collect();
    let mut cursor = vec![0usize; levels.len()];
    let mut candidate = raw.codes.clone();
    loop {
        for (slot, &level) in levels.iter().enumerate() {
            candidate[level] = ranked[level][cursor[slot]];
        }
        if !taken.contains(&candidate) {
            return Some(candidate);
        }
        // odometer increment, innermost (deepest) slot first
        let mut slot = levels.len();
        loop {
            if slot == 0 {
                return None;
            }
            slot -= 1;
            cursor[slot] += 1;
            if cursor[slot] < ranked[levels[slot]].len() {
                break;
            }
            cursor[slot] = 0;
        }
    }
}

/// Make raw codeword tuples unique.
///
/// Users with a unique tuple keep it, as does the lexicographically first
/// user of each colliding group. The remaining users, in user-id order, take
/// the closest free tuple: fewest changed levels first, deeper levels changed
/// before shallower ones, and within a level the codeword nearest to that
/// level's residual.
pub fn resolve_collisions(
    stack: &CodebookStack,
    raw: &BTreeMap<String, RawCode>,
) -> Result<BTreeMap<String, Vec<usize>>> {
    if raw.len() as u128 > stack.capacity() {
        return Err(Error::Capacity {
            users: raw.len(),
            capacity: stack.capacity(),
        });
    }
    let mut groups: BTreeMap<&[usize], Vec<&str>> = BTreeMap::new();
    for (user, code) in raw {
        if code.codes.len() != stack.depth() {
            return Err(Error::Dimension {
                expected: stack.depth(),
                found: code.codes.len(),
            });
        }
        groups.entry(code.codes.as_slice()).or_default().push(user);
    }

    let mut out = BTreeMap::new();
    let mut taken: HashSet<Vec<usize>> = HashSet::with_capacity(raw.len());
    let mut displaced = Vec::new();
    for (codes, users) in &groups {
        // BTreeMap iteration already sorted users within the group
        out.insert(users[0].to_string(), codes.to_vec());
        taken.insert(codes.to_vec());
        displaced.extend(users[1..].iter().copied());
    }
    displaced.sort_unstable();

    let depth = stack.depth();
    for user in displaced {
        let code = &raw[user];
        let ranked: Vec<Vec<usize>> = (0..depth)
            .map(|l| ranked_codes(stack, l, &code.residuals[l], code.codes[l]))
            .collect();
        let found = (1..=depth)
            .flat_map(|h| level_sets(depth, h))
            .find_map(|set| search_set(code, &set, &ranked, &taken))
            .ok_or_else(|| Error::Capacity {
                users: raw.len(),
                capacity: stack.capacity(),
            })?;
        taken.insert(found.clone());
        out.insert(user.to_string(), found);
    }
    Ok(out)
}

fn check_unique(users: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(users.len());
    for u in users {
        if !seen.insert(u.as_str()) {
            return Err(Error::data(format!("duplicate user id {u}")));
        }
    }
    if users.is_empty() {
        return Err(Error::data("no users to index"));
    }
    Ok(())
}

/// Sequential numbers in lexicographic user order, starting at 1.
pub fn assign_nid(users: &[String]) -> Result<IndexAssignment> {
    check_unique(users)?;
    let mut sorted: Vec<&String> = users.iter().collect();
    sorted.sort();
    let ids = sorted
        .into_iter()
        .enumerate()
        .map(|(i, u)| (u.clone(), (i + 1).to_string()))
        .collect();
    IndexAssignment::new(IndexMode::Nid, ids)
}

/// The dataset's own user ids.
pub fn assign_oid(users: &[String]) -> Result<IndexAssignment> {
    check_unique(users)?;
    let ids = users.iter().map(|u| (u.clone(), u.clone())).collect();
    IndexAssignment::new(IndexMode::Oid, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::rqvae::Codebook;
    use proptest::prelude::*;

    fn line_stack(k: usize, p: usize) -> CodebookStack {
        // level l, code c sits at (c, 0)
        let levels = (0..p)
            .map(|l| {
                let data = (0..k).flat_map(|c| [c as f64, 0.0]).collect();
                Codebook::new(l, Matrix::from_vec(k, 2, data)).unwrap()
            })
            .collect();
        CodebookStack::new(levels).unwrap()
    }

    fn raw(codes: &[usize]) -> RawCode {
        RawCode {
            codes: codes.to_vec(),
            residuals: codes.iter().map(|&c| vec![c as f64, 0.0]).collect(),
        }
    }

    #[test]
    fn render_matches_token_format() {
        let id = SemanticId(vec![219, 2, 95, 238]);
        assert_eq!(id.render(), "<a_219> <b_2> <c_95> <d_238>");
        assert_eq!(SemanticId::parse(&id.render()).unwrap(), id);
    }

    #[test]
    fn parse_rejects_out_of_order_levels() {
        assert!(SemanticId::parse("<b_1> <a_2>").is_err());
        assert!(SemanticId::parse("<a_1> <a_2>").is_err());
        assert!(SemanticId::parse("<a_x>").is_err());
        assert!(SemanticId::parse("").is_err());
        assert!(SemanticId::parse("a_1").is_err());
    }

    #[test]
    fn unique_tuples_pass_through() {
        let stack = line_stack(4, 2);
        let input: BTreeMap<String, RawCode> = [("u1", [0, 1]), ("u2", [1, 1]), ("u3", [3, 2])]
            .iter()
            .map(|(u, c)| (u.to_string(), raw(c)))
            .collect();
        let out = resolve_collisions(&stack, &input).unwrap();
        for (u, r) in &input {
            assert_eq!(out[u], r.codes);
        }
    }

    #[test]
    fn three_way_collision_single_level() {
        let stack = line_stack(4, 1);
        let input: BTreeMap<String, RawCode> = ["c", "a", "b"]
            .iter()
            .map(|u| (u.to_string(), raw(&[1])))
            .collect();
        let out = resolve_collisions(&stack, &input).unwrap();
        assert_eq!(out["a"], vec![1]);
        // nearest to residual (1, 0) among {0, 2, 3}: 0 and 2 tie, lowest wins
        assert_eq!(out["b"], vec![0]);
        assert_eq!(out["c"], vec![2]);
    }

    #[test]
    fn backs_off_to_shallower_level_when_deepest_is_full() {
        let stack = line_stack(2, 2);
        // (0, 0) and (0, 1) both taken; a second (0, 0) must change level 0
        let input: BTreeMap<String, RawCode> = [("a", [0, 0]), ("b", [0, 1]), ("c", [0, 0])]
            .iter()
            .map(|(u, c)| (u.to_string(), raw(c)))
            .collect();
        let out = resolve_collisions(&stack, &input).unwrap();
        assert_eq!(out["c"], vec![1, 0]);
    }

    #[test]
    fn capacity_is_enforced() {
        let stack = line_stack(2, 1);
        let input: BTreeMap<String, RawCode> = ["a", "b", "c"]
            .iter()
            .map(|u| (u.to_string(), raw(&[0])))
            .collect();
        assert!(matches!(
            resolve_collisions(&stack, &input),
            Err(Error::Capacity {
                users: 3,
                capacity: 2
            })
        ));
    }

    #[test]
    fn level_sets_prefer_deep_levels() {
        assert_eq!(level_sets(3, 1), vec![vec![2], vec![1], vec![0]]);
        assert_eq!(level_sets(3, 2), vec![vec![2, 1], vec![2, 0], vec![1, 0]]);
        assert_eq!(level_sets(3, 3), vec![vec![2, 1, 0]]);
    }

    #[test]
    fn nid_sorts_users() {
        let a = assign_nid(&["B".into(), "A".into()]).unwrap();
        assert_eq!(a.rendered("A"), Some("1"));
        assert_eq!(a.rendered("B"), Some("2"));
    }

    #[test]
    fn oid_keeps_original_strings() {
        let a = assign_oid(&["A1GNYV0RA0EQSS".into()]).unwrap();
        assert_eq!(a.rendered("A1GNYV0RA0EQSS"), Some("A1GNYV0RA0EQSS"));
        assert!(assign_oid(&["x".into(), "x".into()]).is_err());
        assert!(assign_nid(&["x".into(), "x".into()]).is_err());
    }

    #[test]
    fn assignment_tsv_round_trip() {
        let a = assign_nid(&["u2".into(), "u1".into()]).unwrap();
        let mut buf = Vec::new();
        a.write_tsv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "u1\t1\tN-ID\nu2\t2\tN-ID\n"
        );
        assert_eq!(IndexAssignment::read_tsv(buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn duplicate_rendered_ids_are_rejected() {
        let ids = [
            ("a".to_string(), "<a_1>".to_string()),
            ("b".to_string(), "<a_1>".to_string()),
        ]
        .into_iter()
        .collect();
        assert!(IndexAssignment::new(IndexMode::Pid, ids).is_err());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(codes in proptest::collection::vec(0usize..100_000, 1..=MAX_LEVELS)) {
            let id = SemanticId(codes);
            prop_assert_eq!(SemanticId::parse(&id.render()).unwrap(), id);
        }

        #[test]
        fn nid_is_injective(users in proptest::collection::btree_set("[a-z0-9]{1,6}", 1..50)) {
            let users: Vec<String> = users.into_iter().collect();
            let a = assign_nid(&users).unwrap();
            prop_assert_eq!(a.rendered_set().len(), users.len());
        }
    }
}
