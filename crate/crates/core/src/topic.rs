//! Topic names, topic filters and wildcard matching.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("empty topic")]
    Empty,
    #[error("invalid topic filter {0:?}: {1}")]
    InvalidFilter(String, &'static str),
    #[error("invalid topic name {0:?}: wildcards are not allowed")]
    WildcardInName(String),
}

pub fn validate_topic_name(topic: &str) -> Result<(), TopicError> {
    if topic.is_empty() {
        return Err(TopicError::Empty);
    }
    if topic.contains(['+', '#']) {
        return Err(TopicError::WildcardInName(topic.to_string()));
    }
    Ok(())
}

pub fn validate_filter(filter: &str) -> Result<(), TopicError> {
    if filter.is_empty() {
        return Err(TopicError::Empty);
    }
    let levels: Vec<&str> = filter.split('/').collect();
    for (i, level) in levels.iter().enumerate() {
        match *level {
            "#" if i + 1 != levels.len() => {
                return Err(TopicError::InvalidFilter(
                    filter.to_string(),
                    "'#' must be the last level",
                ))
            }
            "#" | "+" => {}
            l if l.contains(['+', '#']) => {
                return Err(TopicError::InvalidFilter(
                    filter.to_string(),
                    "wildcards must occupy a whole level",
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn has_wildcard(filter: &str) -> bool {
    filter.split('/').any(|l| l == "+" || l == "#")
}

/// MQTT 3.1.1 filter matching. Topics starting with `$` never match a
/// wildcard in the first level.
pub fn match_filter(filter: &str, topic: &str) -> bool {
    if topic.starts_with('$') && (filter.starts_with('+') || filter.starts_with('#')) {
        return false;
    }
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(fl), Some(tl)) if fl == tl => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

#[derive(Debug)]
struct Node<V> {
    children: BTreeMap<String, Node<V>>,
    plus: Option<Box<Node<V>>>,
    hash: Option<V>,
    value: Option<V>,
}

impl<V> Default for Node<V> {
    fn default() -> Self {
        Self {
            children: BTreeMap::new(),
            plus: None,
            hash: None,
            value: None,
        }
    }
}

impl<V> Node<V> {
    fn is_empty(&self) -> bool {
        self.children.is_empty() && self.plus.is_none() && self.hash.is_none() && self.value.is_none()
    }
}

/// Per-level trie over topic filters with dedicated `+` and `#` branches.
#[derive(Debug)]
pub struct FilterTrie<V> {
    root: Node<V>,
    len: usize,
}

impl<V> Default for FilterTrie<V> {
    fn default() -> Self {
        Self {
            root: Node::default(),
            len: 0,
        }
    }
}

impl<V> FilterTrie<V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn slot_mut<'a>(root: &'a mut Node<V>, filter: &str) -> &'a mut Option<V> {
        let mut node = root;
        let mut levels = filter.split('/').peekable();
        while let Some(level) = levels.next() {
            if level == "#" {
                return &mut node.hash;
            }
            node = if level == "+" {
                node.plus.get_or_insert_with(Default::default)
            } else {
                node.children.entry(level.to_string()).or_default()
            };
            if levels.peek().is_none() {
                break;
            }
        }
        &mut node.value
    }

    /// Value stored at `filter`, created with `init` when absent.
    pub fn entry_or_insert_with(&mut self, filter: &str, init: impl FnOnce() -> V) -> &mut V {
        let slot = Self::slot_mut(&mut self.root, filter);
        if slot.is_none() {
            *slot = Some(init());
            self.len += 1;
        }
        slot.as_mut().unwrap()
    }

    pub fn insert(&mut self, filter: &str, value: V) -> Option<V> {
        let old = Self::slot_mut(&mut self.root, filter).replace(value);
        if old.is_none() {
            self.len += 1;
        }
        old
    }

    pub fn get_mut(&mut self, filter: &str) -> Option<&mut V> {
        let mut node = &mut self.root;
        let mut levels = filter.split('/').peekable();
        while let Some(level) = levels.next() {
            if level == "#" {
                return node.hash.as_mut();
            }
            node = if level == "+" {
                node.plus.as_deref_mut()?
            } else {
                node.children.get_mut(level)?
            };
            if levels.peek().is_none() {
                break;
            }
        }
        node.value.as_mut()
    }

    pub fn remove(&mut self, filter: &str) -> Option<V> {
        let levels: Vec<&str> = filter.split('/').collect();
        let out = Self::remove_at(&mut self.root, &levels);
        if out.is_some() {
            self.len -= 1;
        }
        out
    }

    fn remove_at(node: &mut Node<V>, levels: &[&str]) -> Option<V> {
        let (first, rest) = levels.split_first()?;
        if *first == "#" {
            return node.hash.take();
        }
        let out = if *first == "+" {
            let child = node.plus.as_deref_mut()?;
            let out = if rest.is_empty() {
                child.value.take()
            } else {
                Self::remove_at(child, rest)
            };
            if child.is_empty() {
                node.plus = None;
            }
            out
        } else {
            let child = node.children.get_mut(*first)?;
            let out = if rest.is_empty() {
                child.value.take()
            } else {
                Self::remove_at(child, rest)
            };
            if child.is_empty() {
                node.children.remove(*first);
            }
            out
        };
        out
    }

    /// Values of every filter matching `topic`.
    pub fn matches<'a>(&'a self, topic: &str) -> Vec<&'a V> {
        let levels: Vec<&str> = topic.split('/').collect();
        let mut out = Vec::new();
        let dollar = topic.starts_with('$');
        Self::collect(&self.root, &levels, dollar, &mut out);
        out
    }

    fn collect<'a>(node: &'a Node<V>, levels: &[&str], at_dollar_root: bool, out: &mut Vec<&'a V>) {
        if !at_dollar_root {
            if let Some(v) = &node.hash {
                out.push(v);
            }
        }
        let Some((first, rest)) = levels.split_first() else {
            if let Some(v) = &node.value {
                out.push(v);
            }
            return;
        };
        if let Some(child) = node.children.get(*first) {
            Self::visit(child, rest, out);
        }
        if !at_dollar_root {
            if let Some(child) = &node.plus {
                Self::visit(child, rest, out);
            }
        }
    }

    fn visit<'a>(node: &'a Node<V>, rest: &[&str], out: &mut Vec<&'a V>) {
        if rest.is_empty() {
            if let Some(v) = &node.value {
                out.push(v);
            }
            // "a/#" also matches "a".
            if let Some(v) = &node.hash {
                out.push(v);
            }
        } else {
            Self::collect(node, rest, false, out);
        }
    }
}
