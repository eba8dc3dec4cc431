use std::collections::BTreeMap;

use super::SignatureSet;
use crate::flowtable::{DomainType, FlowLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome<'a> {
    Match(&'a FlowLabel),
    /// A strict prefix of at least one signature.
    Pending,
    Reject,
}

#[derive(Debug, Default, Clone)]
struct Node {
    children: Vec<(u32, usize)>,
    label: Option<usize>,
}

/// Trie over successive payload sizes.
#[derive(Debug, Clone)]
struct Trie {
    nodes: Vec<Node>,
}

impl Trie {
    fn new() -> Self {
        Trie { nodes: vec![Node::default()] }
    }

    fn insert(&mut self, seq: &[u32], label: usize) {
        let mut at = 0;
        for &size in seq {
            at = match self.nodes[at].children.iter().find(|(s, _)| *s == size) {
                Some(&(_, next)) => next,
                None => {
                    self.nodes.push(Node::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[at].children.push((size, next));
                    next
                }
            };
        }
        // The model validator rejects duplicates; keep the first if one slips by.
        self.nodes[at].label.get_or_insert(label);
    }

    fn lookup(&self, seq: &[u32]) -> Result<Option<usize>, ()> {
        let mut at = 0;
        for size in seq {
            match self.nodes[at].children.iter().find(|(s, _)| s == size) {
                Some(&(_, next)) => at = next,
                None => return Err(()),
            }
        }
        let node = &self.nodes[at];
        if node.label.is_some() {
            Ok(node.label)
        } else if node.children.is_empty() {
            Err(())
        } else {
            Ok(None)
        }
    }
}

/// Exact-match runtime matcher built once from an immutable model.
#[derive(Debug, Clone)]
pub struct SignatureMatcher {
    labels: Vec<FlowLabel>,
    primary: Trie,
    udp: BTreeMap<u16, Trie>,
}

impl SignatureMatcher {
    pub fn new(set: &SignatureSet) -> Self {
        let mut labels = Vec::new();
        let mut primary = Trie::new();
        for sig in set.primaries() {
            labels.push(FlowLabel {
                metaverse: sig.metaverse.to_string(),
                domain_type: DomainType::Primary,
                prefix: Some(sig.prefix.to_string()),
            });
            primary.insert(sig.size_seq, labels.len() - 1);
        }
        let mut udp: BTreeMap<u16, Trie> = BTreeMap::new();
        for sig in set.udp() {
            labels.push(FlowLabel {
                metaverse: sig.metaverse.to_string(),
                domain_type: DomainType::TimeCritical,
                prefix: None,
            });
            udp.entry(sig.port).or_insert_with(Trie::new).insert(sig.size_seq, labels.len() - 1);
        }
        SignatureMatcher { labels, primary, udp }
    }

    fn outcome(&self, found: Result<Option<usize>, ()>) -> MatchOutcome<'_> {
        match found {
            Ok(Some(i)) => MatchOutcome::Match(&self.labels[i]),
            Ok(None) => MatchOutcome::Pending,
            Err(()) => MatchOutcome::Reject,
        }
    }

    pub fn match_primary(&self, seq: &[u32]) -> MatchOutcome<'_> {
        self.outcome(self.primary.lookup(seq))
    }

    pub fn match_udp(&self, port: u16, seq: &[u32]) -> MatchOutcome<'_> {
        match self.udp.get(&port) {
            Some(trie) => self.outcome(trie.lookup(seq)),
            None => MatchOutcome::Reject,
        }
    }
}
