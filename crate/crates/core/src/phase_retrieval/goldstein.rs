//! Goldstein branch-cut unwrapping.
//!
//! Residues are joined into charge-neutral trees by branch cuts: starting from
//! each unbalanced residue, a box around every tree member is searched for the
//! nearest other residue or the frame border, the box half-width doubling
//! after each unsuccessful sweep. Integration then flood-fills wrapped
//! differences from a seed pixel without entering cut pixels; cut pixels and
//! regions sealed off by cuts are filled afterwards from their unwrapped
//! neighbours and flagged.

use std::collections::VecDeque;

use ndarray::Array2;

use super::residues::{find_residues, wrap, Residue};
use crate::error::{QpiError, Result};
use crate::forward_model::PhaseMap;

#[derive(Debug, Clone, PartialEq)]
pub struct UnwrapOutput {
    pub phase: PhaseMap,
    pub residues: Vec<Residue>,
    pub cuts: Array2<bool>,
    /// Pixels reached only by continuation across cuts.
    pub flagged: Array2<bool>,
    pub seed: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Border(usize, usize),
    Residue(usize),
}

/// Marks the 8-connected digital line between two pixels.
fn draw_line(cuts: &mut Array2<bool>, from: (usize, usize), to: (usize, usize)) {
    let (mut r, mut c) = (from.0 as i64, from.1 as i64);
    let (r1, c1) = (to.0 as i64, to.1 as i64);
    let dr = (r1 - r).abs();
    let dc = (c1 - c).abs();
    let sr = if r1 >= r { 1 } else { -1 };
    let sc = if c1 >= c { 1 } else { -1 };
    let mut err = dc - dr;
    loop {
        cuts[[r as usize, c as usize]] = true;
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 > -dr {
            err -= dr;
            c += sc;
        }
        if e2 < dc {
            err += dc;
            r += sr;
        }
    }
}

fn nearest_border(pos: (usize, usize), rows: usize, cols: usize) -> ((usize, usize), usize) {
    let (r, c) = pos;
    [
        ((0, c), r),
        ((rows - 1, c), rows - 1 - r),
        ((r, 0), c),
        ((r, cols - 1), cols - 1 - c),
    ]
    .into_iter()
    .min_by_key(|&(p, d)| (d, p))
    .expect("four candidates")
}

/// Places branch cuts for the given residues.
pub fn branch_cuts(residues: &[Residue], shape: (usize, usize)) -> Array2<bool> {
    let (rows, cols) = shape;
    let mut cuts = Array2::from_elem(shape, false);
    if residues.is_empty() {
        return cuts;
    }
    let mut at = Array2::<Option<usize>>::from_elem(shape, None);
    for (i, res) in residues.iter().enumerate() {
        at[[res.row, res.col]] = Some(i);
        cuts[[res.row, res.col]] = true;
    }
    // tree id per residue; usize::MAX = never visited.
    let mut tree_of = vec![usize::MAX; residues.len()];
    let max_radius = rows.max(cols);

    for start in 0..residues.len() {
        if tree_of[start] != usize::MAX {
            continue;
        }
        let tree_id = start;
        tree_of[start] = tree_id;
        let mut tree = vec![start];
        let mut charge = residues[start].charge as i32;
        let mut radius = 1usize;
        'grow: loop {
            let mut i = 0;
            while i < tree.len() {
                let member = residues[tree[i]];
                let pos = (member.row, member.col);
                let mut candidates: Vec<(u64, (usize, usize), Target)> = Vec::new();
                let (border, border_dist) = nearest_border(pos, rows, cols);
                if border_dist <= radius {
                    let d2 = (border_dist * border_dist) as u64;
                    candidates.push((d2, border, Target::Border(border.0, border.1)));
                }
                let r0 = member.row.saturating_sub(radius);
                let r1 = (member.row + radius).min(rows - 1);
                let c0 = member.col.saturating_sub(radius);
                let c1 = (member.col + radius).min(cols - 1);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        if let Some(j) = at[[r, c]] {
                            if tree_of[j] == tree_id {
                                continue;
                            }
                            let d2 = ((r as i64 - pos.0 as i64).pow(2) + (c as i64 - pos.1 as i64).pow(2)) as u64;
                            candidates.push((d2, (r, c), Target::Residue(j)));
                        }
                    }
                }
                candidates.sort_by_key(|&(d2, p, _)| (d2, p));
                for (_, p, target) in candidates {
                    match target {
                        Target::Border(..) => {
                            draw_line(&mut cuts, pos, p);
                            break 'grow;
                        }
                        Target::Residue(j) => {
                            if tree_of[j] == tree_id {
                                continue;
                            }
                            draw_line(&mut cuts, pos, p);
                            if tree_of[j] == usize::MAX {
                                charge += residues[j].charge as i32;
                            }
                            tree_of[j] = tree_id;
                            tree.push(j);
                            if charge == 0 {
                                break 'grow;
                            }
                        }
                    }
                }
                i += 1;
            }
            if radius > max_radius {
                let first = residues[start];
                let (border, _) = nearest_border((first.row, first.col), rows, cols);
                draw_line(&mut cuts, (first.row, first.col), border);
                break;
            }
            radius *= 2;
        }
    }
    cuts
}

const NEIGHBORS_4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

fn neighbors(
    pos: (usize, usize),
    rows: usize,
    cols: usize,
) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBORS_4.iter().filter_map(move |&(dr, dc)| {
        let r = pos.0 as isize + dr;
        let c = pos.1 as isize + dc;
        (r >= 0 && c >= 0 && r < rows as isize && c < cols as isize).then_some((r as usize, c as usize))
    })
}

fn choose_seed(cuts: &Array2<bool>, amplitude: Option<&Array2<f64>>) -> (usize, usize) {
    let (rows, cols) = cuts.dim();
    let near_cut = |r: usize, c: usize| {
        let r0 = r.saturating_sub(1);
        let c0 = c.saturating_sub(1);
        (r0..=(r + 1).min(rows - 1)).any(|rr| (c0..=(c + 1).min(cols - 1)).any(|cc| cuts[[rr, cc]]))
    };
    let mut best: Option<((usize, usize), f64)> = None;
    for r in 0..rows {
        for c in 0..cols {
            if near_cut(r, c) {
                continue;
            }
            let a = amplitude.map_or(0.0, |amp| amp[[r, c]]);
            if best.map_or(true, |(_, b)| a > b) {
                best = Some(((r, c), a));
            }
        }
    }
    // Every pixel touches a cut only in pathological frames; fall back to
    // the first pixel off the cut set.
    best.map(|(p, _)| p)
        .or_else(|| cuts.indexed_iter().find(|(_, &cut)| !cut).map(|(p, _)| p))
        .unwrap_or((0, 0))
}

/// Unwraps a wrapped phase map. `amplitude`, when given, chooses the seed
/// pixel (brightest pixel not touching a cut).
pub fn goldstein_unwrap_with(wrapped: &PhaseMap, amplitude: Option<&Array2<f64>>) -> Result<UnwrapOutput> {
    if !wrapped.wrapped {
        return Err(QpiError::Contract("goldstein_unwrap expects a wrapped phase map".into()));
    }
    let (rows, cols) = wrapped.shape();
    if let Some(amp) = amplitude {
        if amp.dim() != (rows, cols) {
            return Err(QpiError::Shape(format!(
                "amplitude {:?} does not match phase {:?}",
                amp.dim(),
                (rows, cols)
            )));
        }
    }
    let residues = find_residues(wrapped)?;
    let cuts = branch_cuts(&residues, (rows, cols));
    let w = &wrapped.values;
    let seed = choose_seed(&cuts, amplitude);

    let mut out = Array2::<f64>::zeros((rows, cols));
    let mut done = Array2::from_elem((rows, cols), false);
    let mut queue = VecDeque::new();
    out[seed] = w[seed];
    done[seed] = true;
    queue.push_back(seed);
    while let Some(p) = queue.pop_front() {
        for n in neighbors(p, rows, cols) {
            if done[n] || cuts[n] {
                continue;
            }
            out[n] = out[p] + wrap(w[n] - w[p]);
            done[n] = true;
            queue.push_back(n);
        }
    }

    let mut flagged = Array2::from_elem((rows, cols), false);
    let mut frontier: VecDeque<(usize, usize)> = done
        .indexed_iter()
        .filter(|&(p, &d)| d && neighbors(p, rows, cols).any(|n| !done[n]))
        .map(|(p, _)| p)
        .collect();
    while let Some(p) = frontier.pop_front() {
        for n in neighbors(p, rows, cols) {
            if done[n] {
                continue;
            }
            out[n] = out[p] + wrap(w[n] - w[p]);
            done[n] = true;
            flagged[n] = true;
            frontier.push_back(n);
        }
    }

    Ok(UnwrapOutput {
        phase: PhaseMap {
            values: out,
            wrapped: false,
            wavelength_um: wrapped.wavelength_um,
        },
        residues,
        cuts,
        flagged,
        seed,
    })
}

/// Unwraps with a uniform amplitude, so the seed is the first pixel in
/// raster order that does not touch a cut.
pub fn goldstein_unwrap(wrapped: &PhaseMap) -> Result<PhaseMap> {
    goldstein_unwrap_with(wrapped, None).map(|o| o.phase)
}
