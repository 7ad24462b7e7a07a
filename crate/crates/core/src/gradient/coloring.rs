//! Incidence structure, conflict graph and sequential coloring.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Zero-one mask of which parameters move which measurements, stored as
/// sorted column lists per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceMatrix {
    rows: Vec<Vec<usize>>,
    ncols: usize,
}

impl IncidenceMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            rows: vec![Vec::new(); nrows],
            ncols,
        }
    }

    pub fn from_rows(mut rows: Vec<Vec<usize>>, ncols: usize) -> Result<Self> {
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            if let Some(&c) = row.last() {
                if c >= ncols {
                    return Err(Error::dim("incidence column", ncols, c + 1));
                }
            }
        }
        Ok(Self { rows, ncols })
    }

    /// Entries whose magnitude exceeds `threshold`.
    pub fn from_dense(h: &DMatrix<f64>, threshold: f64) -> Self {
        let rows = (0..h.nrows())
            .map(|i| (0..h.ncols()).filter(|&j| h[(i, j)].abs() > threshold).collect())
            .collect();
        Self { rows, ncols: h.ncols() }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: (0..n).map(|i| vec![i]).collect(),
            ncols: n,
        }
    }

    pub fn dense(m: usize, n: usize) -> Self {
        Self {
            rows: vec![(0..n).collect(); m],
            ncols: n,
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &j in row {
                out[(i, j)] = 1.0;
            }
        }
        out
    }

    /// Element-wise or.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.nrows() != other.nrows() || self.ncols != other.ncols {
            return Err(Error::dim("incidence union", self.nrows(), other.nrows()));
        }
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| {
                let mut r: Vec<usize> = a.iter().chain(b).copied().collect();
                r.sort_unstable();
                r.dedup();
                r
            })
            .collect();
        Ok(Self { rows, ncols: self.ncols })
    }

    /// Stacks row blocks, e.g. one per horizon interval.
    pub fn vstack(blocks: &[IncidenceMatrix]) -> Result<Self> {
        let ncols = blocks.first().map_or(0, |b| b.ncols);
        if let Some(b) = blocks.iter().find(|b| b.ncols != ncols) {
            return Err(Error::dim("incidence stack", ncols, b.ncols));
        }
        Ok(Self {
            rows: blocks.iter().flat_map(|b| b.rows.iter().cloned()).collect(),
            ncols,
        })
    }

    /// Conflict graph adjacency, built by joining the columns of each row.
    pub fn conflict_graph(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.ncols];
        for row in &self.rows {
            for (a, &u) in row.iter().enumerate() {
                for &v in &row[a + 1..] {
                    adj[u].push(v);
                    adj[v].push(u);
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("incidence {} {}\n", self.nrows(), self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            if row.is_empty() {
                continue;
            }
            let cols: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{i}: {}", cols.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (line_no, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing incidence header".into(),
        })?;
        let (m, n) = parse_header(header, "incidence", line_no)?;
        let mut rows = vec![Vec::new(); m];
        for (line_no, line) in lines {
            let (head, tail) = line.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected `<row>: <columns...>`".into(),
            })?;
            let i = parse_index(head, m, line_no, "row")?;
            for tok in tail.split_whitespace() {
                rows[i].push(parse_index(tok, n, line_no, "column")?);
            }
        }
        Self::from_rows(rows, n)
    }
}

/// Per-parameter color labels, equivalent to the n x p zero-one matrix D.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorAssignment {
    colors: Vec<usize>,
    num_colors: usize,
}

impl ColorAssignment {
    pub fn new(colors: Vec<usize>) -> Self {
        let num_colors = colors.iter().map(|c| c + 1).max().unwrap_or(0);
        Self { colors, num_colors }
    }

    /// Every parameter in its own group.
    pub fn identity(n: usize) -> Self {
        Self::new((0..n).collect())
    }

    pub fn num_params(&self) -> usize {
        self.colors.len()
    }

    pub fn num_colors(&self) -> usize {
        self.num_colors
    }

    pub fn color_of(&self, param: usize) -> usize {
        self.colors[param]
    }

    pub fn colors(&self) -> &[usize] {
        &self.colors
    }

    /// Parameters grouped by color.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.num_colors];
        for (j, &c) in self.colors.iter().enumerate() {
            g[c].push(j);
        }
        g
    }

    pub fn d_matrix(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.colors.len(), self.num_colors);
        for (j, &c) in self.colors.iter().enumerate() {
            d[(j, c)] = 1.0;
        }
        d
    }

    /// Checks that no incidence row holds two columns of the same color.
    pub fn validate(&self, incidence: &IncidenceMatrix) -> Result<()> {
        if incidence.ncols() != self.colors.len() {
            return Err(Error::dim("coloring size", incidence.ncols(), self.colors.len()));
        }
        let mut seen = vec![usize::MAX; self.num_colors];
        for i in 0..incidence.nrows() {
            for &j in incidence.row(i) {
                let c = self.colors[j];
                if seen[c] != usize::MAX {
                    return Err(Error::InvalidColoring {
                        a: seen[c],
                        b: j,
                        color: c,
                        row: i,
                    });
                }
                seen[c] = j;
            }
            for &j in incidence.row(i) {
                seen[self.colors[j]] = usize::MAX;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("coloring {} {}\n", self.colors.len(), self.num_colors);
        for (j, c) in self.colors.iter().enumerate() {
            let _ = writeln!(s, "{j} {c}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (line_no, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing coloring header".into(),
        })?;
        let (n, p) = parse_header(header, "coloring", line_no)?;
        let mut colors = vec![usize::MAX; n];
        for (line_no, line) in lines {
            let mut toks = line.split_whitespace();
            let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected `<param> <color>`".into(),
                });
            };
            let j = parse_index(a, n, line_no, "parameter")?;
            colors[j] = parse_index(b, p, line_no, "color")?;
        }
        if let Some(j) = colors.iter().position(|c| *c == usize::MAX) {
            return Err(Error::Parse {
                line: 0,
                message: format!("parameter {j} has no color"),
            });
        }
        let out = Self::new(colors);
        if out.num_colors != p {
            return Err(Error::Parse {
                line: line_no,
                message: format!("header declares {p} colors, {} used", out.num_colors),
            });
        }
        Ok(out)
    }
}

/// Greedy first-fit coloring of the conflict graph, visiting parameters in
/// `order`.
pub fn sequential_color(incidence: &IncidenceMatrix, order: &[usize]) -> Result<ColorAssignment> {
    let adj = incidence.conflict_graph();
    sequential_color_graph(&adj, order)
}

fn sequential_color_graph(adj: &[Vec<usize>], order: &[usize]) -> Result<ColorAssignment> {
    let n = adj.len();
    let mut is_perm = vec![false; n];
    if order.len() != n || order.iter().any(|&v| v >= n || std::mem::replace(&mut is_perm[v], true)) {
        return Err(Error::InvalidArgument("coloring order is not a permutation".into()));
    }
    let mut colors = vec![usize::MAX; n];
    let mut blocked = vec![usize::MAX; n.max(1)];
    for &v in order {
        for &u in &adj[v] {
            if colors[u] != usize::MAX {
                blocked[colors[u]] = v;
            }
        }
        colors[v] = (0..).find(|&c| blocked[c] != v).unwrap_or(0);
    }
    Ok(ColorAssignment::new(colors))
}

/// Best coloring over the natural order plus `num_orders` seeded shuffles.
/// Ties keep the earliest result.
pub fn multi_start_color(incidence: &IncidenceMatrix, num_orders: usize, seed: u64) -> Result<ColorAssignment> {
    let adj = incidence.conflict_graph();
    let n = adj.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = sequential_color_graph(&adj, &order)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..num_orders {
        order.shuffle(&mut rng);
        let cand = sequential_color_graph(&adj, &order)?;
        if cand.num_colors() < best.num_colors() {
            best = cand;
        }
    }
    Ok(best)
}

/// Degree summary of the conflict graph: (min, mean, max).
pub fn conflict_degree_stats(incidence: &IncidenceMatrix) -> (usize, f64, usize) {
    let adj = incidence.conflict_graph();
    if adj.is_empty() {
        return (0, 0.0, 0);
    }
    let degs: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mean = degs.iter().sum::<usize>() as f64 / degs.len() as f64;
    (*degs.iter().min().unwrap(), mean, *degs.iter().max().unwrap())
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_header(line: &str, keyword: &str, line_no: usize) -> Result<(usize, usize)> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let bad = || Error::Parse {
        line: line_no,
        message: format!("expected `{keyword} <a> <b>`"),
    };
    if toks.len() != 3 || toks[0] != keyword {
        return Err(bad());
    }
    Ok((toks[1].parse().map_err(|_| bad())?, toks[2].parse().map_err(|_| bad())?))
}

fn parse_index(tok: &str, bound: usize, line_no: usize, what: &str) -> Result<usize> {
    let v: usize = tok.trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        message: format!("invalid {what} index `{}`", tok.trim()),
    })?;
    if v >= bound {
        return Err(Error::Parse {
            line: line_no,
            message: format!("{what} index {v} out of range (< {bound})"),
        });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn cyclic_six() -> IncidenceMatrix {
        let rows = (0..6).map(|i| vec![(i + 5) % 6, i, (i + 1) % 6]).collect();
        IncidenceMatrix::from_rows(rows, 6).unwrap()
    }

    /// Smallest k for which a proper k-coloring exists, by backtracking.
    fn chromatic_number(adj: &[Vec<usize>]) -> usize {
        fn extend(v: usize, k: usize, adj: &[Vec<usize>], colors: &mut Vec<usize>) -> bool {
            if v == adj.len() {
                return true;
            }
            for c in 0..k {
                if adj[v].iter().all(|&u| u >= v || colors[u] != c) {
                    colors[v] = c;
                    if extend(v + 1, k, adj, colors) {
                        return true;
                    }
                }
            }
            false
        }
        (1..=adj.len().max(1))
            .find(|&k| extend(0, k, adj, &mut vec![usize::MAX; adj.len()]))
            .unwrap()
    }

    /// Crown graph on 2k vertices: u_i adjacent to v_j for i != j. The order
    /// u_1, v_1, u_2, v_2, ... forces greedy to use k colors.
    fn crown(k: usize) -> IncidenceMatrix {
        let mut rows = Vec::new();
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    rows.push(vec![2 * i, 2 * j + 1]);
                }
            }
        }
        IncidenceMatrix::from_rows(rows, 2 * k).unwrap()
    }

    #[test]
    fn cyclic_pattern_first_row() {
        let inc = cyclic_six();
        assert_eq!(inc.to_dense().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cyclic_natural_order_three_colors() {
        let c = sequential_color(&cyclic_six(), &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(c.num_colors(), 3);
        c.validate(&cyclic_six()).unwrap();
    }

    #[test]
    fn cyclic_multi_start_three_colors() {
        let c = multi_start_color(&cyclic_six(), 30, 42).unwrap();
        assert_eq!(c.num_colors(), 3);
        c.validate(&cyclic_six()).unwrap();
    }

    #[test]
    fn diagonal_one_color_dense_n_colors() {
        assert_eq!(multi_start_color(&IncidenceMatrix::identity(7), 5, 1).unwrap().num_colors(), 1);
        assert_eq!(multi_start_color(&IncidenceMatrix::dense(3, 8), 5, 1).unwrap().num_colors(), 8);
    }

    #[test]
    fn crown_graph_multi_start_reaches_chromatic_number() {
        for k in 3..=5 {
            let inc = crown(k);
            let natural: Vec<usize> = (0..2 * k).collect();
            let greedy = sequential_color(&inc, &natural).unwrap().num_colors();
            let chi = chromatic_number(&inc.conflict_graph());
            let multi = multi_start_color(&inc, 30, 9).unwrap();
            multi.validate(&inc).unwrap();
            assert_eq!(greedy, k);
            assert_eq!(chi, 2);
            assert!(multi.num_colors() >= chi && multi.num_colors() <= greedy);
            assert_eq!(multi.num_colors(), 2);
        }
    }

    #[test]
    fn invalid_coloring_reports_row() {
        let err = ColorAssignment::new(vec![0, 0, 1, 2, 1, 2]).validate(&cyclic_six()).unwrap_err();
        assert!(matches!(err, Error::InvalidColoring { row: 0, .. }));
    }

    #[test]
    fn non_permutation_rejected() {
        assert!(sequential_color(&cyclic_six(), &[0, 0, 1, 2, 3, 4]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let inc = cyclic_six();
        assert_eq!(IncidenceMatrix::parse(&inc.to_text()).unwrap(), inc);
        let c = multi_start_color(&inc, 3, 0).unwrap();
        assert_eq!(ColorAssignment::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn malformed_text_reports_line() {
        let err = IncidenceMatrix::parse("incidence 2 2\n0: 1\n1: 5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = IncidenceMatrix::parse("# header next\nincidence x 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    fn arb_incidence() -> impl Strategy<Value = IncidenceMatrix> {
        (1usize..12, 1usize..12).prop_flat_map(|(m, n)| {
            prop::collection::vec(prop::collection::vec(any::<bool>(), n), m).prop_map(move |bits| {
                let rows = bits
                    .iter()
                    .map(|r| r.iter().enumerate().filter(|(_, b)| **b).map(|(j, _)| j).collect())
                    .collect();
                IncidenceMatrix::from_rows(rows, n).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn greedy_is_valid_and_bounded(inc in arb_incidence(), seed in any::<u64>()) {
            let natural: Vec<usize> = (0..inc.ncols()).collect();
            let greedy = sequential_color(&inc, &natural).unwrap();
            let multi = multi_start_color(&inc, 8, seed).unwrap();
            greedy.validate(&inc).unwrap();
            multi.validate(&inc).unwrap();
            let max_deg = inc.conflict_graph().iter().map(Vec::len).max().unwrap_or(0);
            prop_assert!(greedy.num_colors() <= max_deg + 1);
            prop_assert!(multi.num_colors() <= greedy.num_colors());
        }

        #[test]
        fn conflict_graph_matches_column_pair_scan(inc in arb_incidence()) {
            let adj = inc.conflict_graph();
            for a in 0..inc.ncols() {
                for b in 0..inc.ncols() {
                    let share = a != b && (0..inc.nrows()).any(|i| inc.get(i, a) && inc.get(i, b));
                    prop_assert_eq!(share, adj[a].contains(&b));
                }
            }
        }
    }
}
