//! Prefix tree over entity phoneme sequences and fuzzy span detection on a
//! CTC-collapsed posteriorgram.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::Serialize;

use crate::phoneme::{EntityDb, Posteriorgram, BLANK, PAD};

pub const DEFAULT_EDIT_BUDGET: usize = 1;
pub const DEFAULT_MAX_CANDIDATES: usize = 16;

#[derive(Debug, Clone, Default)]
pub struct TrieNode {
    pub children: BTreeMap<usize, usize>,
    /// Ids (and db positions) of entities whose sequence ends at this node.
    pub terminal: Vec<(String, usize)>,
}

/// Arena-allocated trie; node 0 is the root.
#[derive(Debug, Clone)]
pub struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    pub fn build(db: &EntityDb) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for (pos, e) in db.iter().enumerate() {
            let mut cur = 0;
            for &p in &e.phonemes {
                debug_assert!(p != PAD && p != BLANK);
                cur = match nodes[cur].children.get(&p) {
                    Some(&next) => next,
                    None => {
                        nodes.push(TrieNode::default());
                        let next = nodes.len() - 1;
                        nodes[cur].children.insert(p, next);
                        next
                    }
                };
            }
            if !nodes[cur].terminal.iter().any(|(id, _)| id == &e.id) {
                nodes[cur].terminal.push((e.id.clone(), pos));
            }
        }
        Trie { nodes }
    }

    pub fn root(&self) -> &TrieNode {
        &self.nodes[0]
    }

    pub fn node(&self, idx: usize) -> &TrieNode {
        &self.nodes[idx]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Follows `seq` exactly; returns the node index reached.
    pub fn lookup(&self, seq: &[usize]) -> Option<usize> {
        let mut cur = 0;
        for p in seq {
            cur = *self.nodes[cur].children.get(p)?;
        }
        Some(cur)
    }
}

pub fn build_trie(db: &EntityDb) -> Trie {
    Trie::build(db)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub phoneme: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Phonemes accepted at no cost here; always starts with `phoneme`.
    pub alternatives: Vec<usize>,
}

impl Segment {
    fn accepts(&self, p: usize) -> bool {
        self.alternatives.contains(&p)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CollapsedPath {
    pub segments: Vec<Segment>,
}

impl CollapsedPath {
    pub fn phonemes(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.phoneme).collect()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Path with one frame per segment and no alternatives.
    pub fn from_phonemes(ids: &[usize]) -> Self {
        CollapsedPath {
            segments: ids
                .iter()
                .enumerate()
                .map(|(i, &p)| Segment {
                    phoneme: p,
                    start_frame: i,
                    end_frame: i,
                    alternatives: vec![p],
                })
                .collect(),
        }
    }
}

/// Greedy CTC collapse. With `top_k > 1` each segment also accepts the phonemes
/// with the highest mean posterior over its frames.
pub fn collapse_path(pg: &Posteriorgram, top_k: usize) -> CollapsedPath {
    let top_k = top_k.max(1);
    let mut merged: Vec<Segment> = Vec::new();
    let mut prev = None;
    for t in 0..pg.num_frames() {
        let a = pg.argmax(t);
        // PAD never labels a real frame; if it wins it separates like blank
        let silent = a == BLANK || a == PAD;
        if Some(a) == prev && !silent {
            merged.last_mut().expect("open segment").end_frame = t;
        } else if !silent {
            merged.push(Segment {
                phoneme: a,
                start_frame: t,
                end_frame: t,
                alternatives: vec![a],
            });
        }
        prev = Some(a);
    }
    if top_k > 1 {
        let p = pg.num_phonemes();
        for s in &mut merged {
            let mut mean = vec![0.0f64; p];
            for t in s.start_frame..=s.end_frame {
                for (m, &v) in mean.iter_mut().zip(pg.row(t)) {
                    *m += v as f64;
                }
            }
            let mut order: Vec<usize> = (0..p).filter(|&i| i != PAD && i != BLANK).collect();
            order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
            for cand in order {
                if s.alternatives.len() >= top_k {
                    break;
                }
                if !s.alternatives.contains(&cand) {
                    s.alternatives.push(cand);
                }
            }
        }
    }
    CollapsedPath { segments: merged }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpanCandidate {
    pub entity_id: String,
    #[serde(skip)]
    pub entity_index: usize,
    #[serde(rename = "start")]
    pub start_frame: usize,
    #[serde(rename = "end")]
    pub end_frame: usize,
    #[serde(skip)]
    pub start_segment: usize,
    #[serde(skip)]
    pub end_segment: usize,
    #[serde(rename = "cost")]
    pub edit_cost: usize,
}

impl SpanCandidate {
    pub fn num_segments(&self) -> usize {
        self.end_segment - self.start_segment + 1
    }
}

fn rank(a: &SpanCandidate, b: &SpanCandidate) -> std::cmp::Ordering {
    a.edit_cost
        .cmp(&b.edit_cost)
        .then(b.num_segments().cmp(&a.num_segments()))
        .then(a.entity_id.cmp(&b.entity_id))
        .then(a.start_segment.cmp(&b.start_segment))
}

/// Every `(entity, contiguous sub-path)` whose edit distance is within `budget`,
/// in ranking order.
pub fn detect_all(path: &CollapsedPath, trie: &Trie, budget: usize) -> Vec<SpanCandidate> {
    let mut out = Vec::new();
    let n = path.len();
    let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..n {
        // row[j] = distance between the trie prefix and path[i..i + j]
        let width = n - i;
        let root_row: Vec<usize> = (0..=width).collect();
        stack.clear();
        stack.push((0, root_row));
        while let Some((node_idx, row)) = stack.pop() {
            let node = trie.node(node_idx);
            for (entity_id, entity_index) in &node.terminal {
                for (j, &d) in row.iter().enumerate().skip(1) {
                    if d <= budget {
                        out.push(SpanCandidate {
                            entity_id: entity_id.clone(),
                            entity_index: *entity_index,
                            start_frame: path.segments[i].start_frame,
                            end_frame: path.segments[i + j - 1].end_frame,
                            start_segment: i,
                            end_segment: i + j - 1,
                            edit_cost: d,
                        });
                    }
                }
            }
            for (&p, &child) in &node.children {
                let mut next = Vec::with_capacity(row.len());
                next.push(row[0] + 1);
                for j in 1..row.len() {
                    let sub = row[j - 1] + usize::from(!path.segments[i + j - 1].accepts(p));
                    let v = sub.min(row[j] + 1).min(next[j - 1] + 1);
                    next.push(v);
                }
                if next.iter().min().copied().unwrap_or(usize::MAX) <= budget {
                    stack.push((child, next));
                }
            }
        }
    }
    out.sort_by(rank);
    out
}

/// Best-ranked span per entity, then the top `max_candidates` of those.
pub fn detect_spans(
    path: &CollapsedPath,
    trie: &Trie,
    edit_budget: usize,
    max_candidates: usize,
) -> Vec<SpanCandidate> {
    let mut seen: HashMap<usize, ()> = HashMap::new();
    detect_all(path, trie, edit_budget)
        .into_iter()
        .filter(|c| seen.insert(c.entity_index, ()).is_none())
        .take(max_candidates)
        .collect()
}

pub fn candidates_to_jsonl(cands: &[SpanCandidate]) -> String {
    cands
        .iter()
        .map(|c| serde_json::to_string(c).expect("serializable") + "\n")
        .collect()
}
