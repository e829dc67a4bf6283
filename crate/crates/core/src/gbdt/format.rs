//! Line-delimited text serialization of ensembles.
//!
//! ```text
//! gbdt-model v1
//! base_score <f64>
//! learning_rate <f64>
//! feature_count <n>
//! feature <index> <name>            (n lines)
//! tree_count <t>
//! tree <index> <node count>
//! <id> split <feature> <threshold> <left|right> <left id> <right id> <cover>
//! <id> leaf <weight> <cover>
//! ```
//!
//! `left|right` is where non-finite values go. Floats are written in Rust's
//! shortest round-trip form, so reading a model back is exact.

use super::{Ensemble, Node, Tree};
use crate::error::{Error, Result};

const MAGIC: &str = "gbdt-model v1";

pub fn write_model(model: &Ensemble) -> String {
    let mut out = format!(
        "{MAGIC}\nbase_score {}\nlearning_rate {}\nfeature_count {}\n",
        model.base_score,
        model.learning_rate,
        model.feature_names.len()
    );
    for (i, n) in model.feature_names.iter().enumerate() {
        out.push_str(&format!("feature {i} {n}\n"));
    }
    out.push_str(&format!("tree_count {}\n", model.trees.len()));
    for (t, tree) in model.trees.iter().enumerate() {
        out.push_str(&format!("tree {t} {}\n", tree.nodes.len()));
        for (id, node) in tree.nodes.iter().enumerate() {
            match node {
                Node::Split { feature, threshold, missing_left, left, right, cover } => out.push_str(&format!(
                    "{id} split {feature} {threshold} {} {left} {right} {cover}\n",
                    if *missing_left { "left" } else { "right" }
                )),
                Node::Leaf { value, cover } => out.push_str(&format!("{id} leaf {value} {cover}\n")),
            }
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let (i, l) = self.inner.next().ok_or_else(|| self.err("unexpected end of file"))?;
        self.line = i + 1;
        Ok(l)
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::ModelFormat { line: self.line, reason: reason.into() }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next()?;
        l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| self.err(format!("expected `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("bad number `{s}`")))
    }
}

pub fn read_model(text: &str) -> Result<Ensemble> {
    let mut lines = Lines { inner: text.lines().enumerate(), line: 0 };
    if lines.next()? != MAGIC {
        return Err(lines.err("not a gbdt model file"));
    }
    let raw = lines.keyed("base_score")?;
    let base_score: f64 = lines.num(raw)?;
    let raw = lines.keyed("learning_rate")?;
    let learning_rate: f64 = lines.num(raw)?;
    let raw = lines.keyed("feature_count")?;
    let nf: usize = lines.num(raw)?;
    let mut feature_names = Vec::with_capacity(nf);
    for i in 0..nf {
        let rest = lines.keyed("feature")?;
        let (idx, name) = rest.split_once(' ').ok_or_else(|| lines.err("feature line needs index and name"))?;
        if lines.num::<usize>(idx)? != i {
            return Err(lines.err("feature indices out of order"));
        }
        feature_names.push(name.to_string());
    }
    let raw = lines.keyed("tree_count")?;
    let nt: usize = lines.num(raw)?;
    let mut trees = Vec::with_capacity(nt);
    for t in 0..nt {
        let rest = lines.keyed("tree")?;
        let f: Vec<&str> = rest.split(' ').collect();
        if f.len() != 2 || lines.num::<usize>(f[0])? != t {
            return Err(lines.err("bad tree header"));
        }
        let count: usize = lines.num(f[1])?;
        let mut nodes = Vec::with_capacity(count);
        for id in 0..count {
            let l = lines.next()?;
            let f: Vec<&str> = l.split(' ').collect();
            if f.first().map(|s| lines.num::<usize>(s)).transpose()? != Some(id) {
                return Err(lines.err("node ids out of order"));
            }
            let node = match f.get(1).copied() {
                Some("split") if f.len() == 8 => {
                    let node = Node::Split {
                        feature: lines.num(f[2])?,
                        threshold: lines.num(f[3])?,
                        missing_left: match f[4] {
                            "left" => true,
                            "right" => false,
                            _ => return Err(lines.err("missing direction must be left or right")),
                        },
                        left: lines.num(f[5])?,
                        right: lines.num(f[6])?,
                        cover: lines.num(f[7])?,
                    };
                    if let Node::Split { feature, threshold, left, right, .. } = node {
                        if feature >= nf
                            || !threshold.is_finite()
                            || left >= count
                            || right >= count
                            || left <= id
                            || right <= id
                        {
                            return Err(lines.err("split refers outside the tree or feature list"));
                        }
                    }
                    node
                }
                Some("leaf") if f.len() == 4 => {
                    let value: f64 = lines.num(f[2])?;
                    if !value.is_finite() {
                        return Err(lines.err("leaf weight must be finite"));
                    }
                    Node::Leaf { value, cover: lines.num(f[3])? }
                }
                _ => return Err(lines.err("expected a split or leaf node")),
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
    }
    Ok(Ensemble { base_score, learning_rate, feature_names, trees })
}
