//! Class-token and masked-patch cross-entropy objectives.

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Result};

/// Which (teacher view, student view) pairs enter the class-token loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMode {
    /// Every teacher global view against every other student view.
    CrossView,
    /// Teacher view `i` against student view `i` only.
    SameView,
}

impl PairMode {
    pub fn pairs(self, teachers: usize, students: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..teachers {
            for j in 0..students {
                let keep = match self {
                    PairMode::CrossView => i != j,
                    PairMode::SameView => i == j,
                };
                if keep {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Mean cross-entropy over view pairs. `teacher[i]` is a distribution over
/// K; `student[j]` is a `1 x K` distribution node. `None` if no pairs.
pub fn loss_dis(g: &mut Graph, teacher: &[Vec<f64>], student: &[Var], mode: PairMode) -> Result<Option<Var>> {
    let pairs = mode.pairs(teacher.len(), student.len());
    if pairs.is_empty() {
        return Ok(None);
    }
    let k = teacher[0].len();
    let mut targets = Vec::with_capacity(pairs.len() * k);
    let mut preds = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        if teacher[i].len() != k || g.shape(student[j]) != [1, k] {
            return Err(dim_err!("loss_dis: view {j} is not a 1x{k} distribution"));
        }
        targets.extend_from_slice(&teacher[i]);
        preds.push(student[j]);
    }
    let t = g.constant_from(vec![pairs.len(), k], targets)?;
    let p = g.concat_rows(&preds)?;
    Ok(Some(g.cross_entropy(t, p)?))
}

/// One view's inputs to the patch loss.
pub struct PatchTerm<'a> {
    /// Teacher distributions, `N x K` row-major.
    pub teacher: &'a [f64],
    /// Student distributions node, `N x K`.
    pub student: Var,
    pub mask: &'a [bool],
}

/// Mean cross-entropy over masked positions of all views (every position
/// when `all_patches`). Returns the loss node (or `None` when no position
/// qualifies) and the number of positions used.
pub fn loss_rec(g: &mut Graph, terms: &[PatchTerm<'_>], all_patches: bool) -> Result<(Option<Var>, usize)> {
    let mut targets = Vec::new();
    let mut preds = Vec::new();
    let mut k = 0;
    for term in terms {
        let shape = g.shape(term.student).to_vec();
        let (n, kk) = (shape[0], shape[1]);
        k = kk;
        if term.mask.len() != n || term.teacher.len() != n * kk {
            return Err(dim_err!("loss_rec: mask/teacher sizes do not match {n}x{kk} student patches"));
        }
        let idx: Vec<usize> = (0..n).filter(|&i| all_patches || term.mask[i]).collect();
        if idx.is_empty() {
            continue;
        }
        for &i in &idx {
            targets.extend_from_slice(&term.teacher[i * kk..(i + 1) * kk]);
        }
        preds.push(if idx.len() == n { term.student } else { g.gather_rows(term.student, &idx)? });
    }
    if preds.is_empty() {
        return Ok((None, 0));
    }
    let rows = targets.len() / k;
    let t = g.constant_from(vec![rows, k], targets)?;
    let p = if preds.len() == 1 { preds[0] } else { g.concat_rows(&preds)? };
    Ok((Some(g.cross_entropy(t, p)?), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn dist(g: &mut Graph, rows: usize, data: Vec<f64>) -> Var {
        let k = data.len() / rows;
        g.leaf(&Tensor::new([rows, k], data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn dis_examples() {
        let mut g = Graph::new();
        let s = dist(&mut g, 1, vec![0.25; 4]);
        let s2 = dist(&mut g, 1, vec![0.0, 1.0, 0.0, 0.0]);
        let t = vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        // cross-view: (0,1) and (1,0)
        let l = loss_dis(&mut g, &t, &[s2, s], PairMode::CrossView).unwrap().unwrap();
        assert!((g.scalar(l) - 0.5 * 4f64.ln()).abs() < 1e-12);
        let l = loss_dis(&mut g, &t[..1], &[s2, s], PairMode::SameView).unwrap().unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let l = loss_dis(&mut g, &t[..1], &[s2, s], PairMode::CrossView).unwrap().unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rec_masked_only() {
        let k = 8;
        let mut teacher = vec![0.0; 3 * k];
        for i in 0..3 {
            teacher[i * k + i] = 1.0;
        }
        let mut student = vec![1.0 / k as f64; 3 * k];
        let mask = [false, true, false];
        let eval = |student: Vec<f64>| {
            let mut g = Graph::new();
            let s = dist(&mut g, 3, student);
            let (l, n) = loss_rec(&mut g, &[PatchTerm { teacher: &teacher, student: s, mask: &mask }], false).unwrap();
            assert_eq!(n, 1);
            g.scalar(l.unwrap())
        };
        let base = eval(student.clone());
        assert!((base - 8f64.ln()).abs() < 1e-12);
        // perturb an unmasked row
        student[..k].copy_from_slice(&[0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]);
        assert_eq!(eval(student), base);
    }

    #[test]
    fn empty_mask_gives_none() {
        let mut g = Graph::new();
        let s = dist(&mut g, 2, vec![0.5; 4]);
        let t = vec![0.5; 4];
        let (l, n) = loss_rec(&mut g, &[PatchTerm { teacher: &t, student: s, mask: &[false, false] }], false).unwrap();
        assert!(l.is_none() && n == 0);
    }
}
