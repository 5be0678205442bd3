//! Logit-lens token ranking: per-layer, per-step ranks of chosen tokens,
//! ground-truth token categories, and stage / layer aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ResidualTrace};
use crate::synthetic::{Scene, Vocab};

/// 1 + tokens with a strictly greater logit + equal-logit tokens with a
/// smaller id.
pub fn rank_token(logits: &[f32], token: u32) -> Result<usize> {
    let t = token as usize;
    if t >= logits.len() {
        return Err(Error::Argument(format!(
            "token {token} out of range for vocabulary of {}",
            logits.len()
        )));
    }
    let v = logits[t];
    let mut rank = 1;
    for (i, &x) in logits.iter().enumerate() {
        if x > v || (x == v && i < t) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Ranks of one token under the lens, `ranks[l - 1][t]` for layers 1..=L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMatrix {
    pub token: u32,
    pub ranks: Vec<Vec<u32>>,
}

impl RankingMatrix {
    pub fn n_layers(&self) -> usize {
        self.ranks.len()
    }

    pub fn n_steps(&self) -> usize {
        self.ranks.first().map_or(0, Vec::len)
    }

    /// Rank at layer `l` (1-based) and step `t` (0-based).
    pub fn rank(&self, l: usize, t: usize) -> u32 {
        self.ranks[l - 1][t]
    }

    pub fn as_f64(&self) -> Vec<Vec<f64>> {
        self.ranks
            .iter()
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect()
    }

    /// Rows are layers 1..L from the top, columns are steps.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["layer".to_string()];
        header.extend((1..=self.n_steps()).map(|t| format!("step_{t}")));
        w.write_record(&header)?;
        for (l, row) in self.ranks.iter().enumerate() {
            let mut rec = vec![(l + 1).to_string()];
            rec.extend(row.iter().map(u32::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

fn check_trace(trace: &ResidualTrace) -> Result<()> {
    if trace.is_empty() || !trace.has_all_layers() {
        return Err(Error::Argument(
            "ranking needs a trace captured with all layers".into(),
        ));
    }
    Ok(())
}

pub fn build_ranking_matrix(model: &Model, trace: &ResidualTrace, token: u32) -> Result<RankingMatrix> {
    Ok(build_ranking_matrices(model, trace, &[token])?.remove(0))
}

/// One matrix per token; the lens is evaluated once per (layer, step).
pub fn build_ranking_matrices(
    model: &Model,
    trace: &ResidualTrace,
    tokens: &[u32],
) -> Result<Vec<RankingMatrix>> {
    check_trace(trace)?;
    let n_layers = trace.n_layers;
    let mut out: Vec<RankingMatrix> = tokens
        .iter()
        .map(|&token| RankingMatrix {
            token,
            ranks: vec![Vec::with_capacity(trace.len()); n_layers],
        })
        .collect();
    for t in 0..trace.len() {
        for l in 1..=n_layers {
            let logits = model.logit_lens(trace.hidden(t, l))?;
            for m in out.iter_mut() {
                m.ranks[l - 1].push(rank_token(&logits, m.token)? as u32);
            }
        }
    }
    Ok(out)
}

/// Ground-truth partition of object tokens for one caption.
///
/// `decoded_genuine`, `hidden_genuine` and `hallucinated` are pairwise
/// disjoint. `confusable` lists the absent prior-associated partners of the
/// scene's objects and may overlap `hallucinated`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCategories {
    pub decoded_genuine: BTreeSet<u32>,
    pub hidden_genuine: BTreeSet<u32>,
    pub hallucinated: BTreeSet<u32>,
    pub confusable: BTreeSet<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    DecodedGenuine,
    HiddenGenuine,
    Hallucinated,
    /// Decoded and hidden genuine together.
    Genuine,
    Confusable,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::DecodedGenuine,
        Category::HiddenGenuine,
        Category::Hallucinated,
        Category::Genuine,
        Category::Confusable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::DecodedGenuine => "decoded_genuine",
            Category::HiddenGenuine => "hidden_genuine",
            Category::Hallucinated => "hallucinated",
            Category::Genuine => "genuine",
            Category::Confusable => "confusable",
        }
    }
}

impl TokenCategories {
    /// Set algebra over mentioned and ground-truth object sets.
    pub fn from_sets(
        mentioned: &BTreeSet<u32>,
        truth: &BTreeSet<u32>,
        confusable: &BTreeSet<u32>,
    ) -> Self {
        Self {
            decoded_genuine: mentioned.intersection(truth).copied().collect(),
            hidden_genuine: truth.difference(mentioned).copied().collect(),
            hallucinated: mentioned.difference(truth).copied().collect(),
            confusable: confusable.difference(truth).copied().collect(),
        }
    }

    pub fn tokens(&self, c: Category) -> BTreeSet<u32> {
        match c {
            Category::DecodedGenuine => self.decoded_genuine.clone(),
            Category::HiddenGenuine => self.hidden_genuine.clone(),
            Category::Hallucinated => self.hallucinated.clone(),
            Category::Genuine => self.decoded_genuine.union(&self.hidden_genuine).copied().collect(),
            Category::Confusable => self.confusable.clone(),
        }
    }

    /// Every token appearing in any category, ascending.
    pub fn all_tokens(&self) -> Vec<u32> {
        let mut s: BTreeSet<u32> = BTreeSet::new();
        for c in Category::ALL {
            s.extend(self.tokens(c));
        }
        s.into_iter().collect()
    }
}

/// Classifies the object tokens of a generated caption against its scene.
/// Object names are single tokens, which is also the first-token proxy for
/// multi-token names.
pub fn classify_tokens(tokens: &[u32], scene: &Scene, vocab: &Vocab) -> TokenCategories {
    let mentioned = vocab.mentioned_objects(tokens);
    let truth: BTreeSet<u32> = scene.objects.iter().copied().collect();
    let confusable: BTreeSet<u32> = scene.confusable_pairs.iter().map(|p| p.1).collect();
    TokenCategories::from_sets(&mentioned, &truth, &confusable)
}

/// Splits `n` steps into three near-equal consecutive stages, giving the
/// remainder to the earliest ones. Returns half-open ranges.
pub fn stage_bounds(n: usize) -> Result<[(usize, usize); 3]> {
    if n < 3 {
        return Err(Error::Argument(format!("need at least 3 steps for stages, got {n}")));
    }
    let base = n / 3;
    let rem = n % 3;
    let mut out = [(0, 0); 3];
    let mut start = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let len = base + usize::from(i < rem);
        *o = (start, start + len);
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub layer_window: usize,
    pub n_steps: usize,
    pub stages: [(usize, usize); 3],
    /// Mean rank per stage (early, mid, late); categories with no tokens are
    /// absent.
    pub means: BTreeMap<Category, [f64; 3]>,
}

impl StageSummary {
    pub fn get(&self, c: Category) -> Option<[f64; 3]> {
        self.means.get(&c).copied()
    }
}

fn check_shapes(matrices: &[RankingMatrix]) -> Result<(usize, usize)> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Argument("no ranking matrices".into()))?;
    let (l, t) = (first.n_layers(), first.n_steps());
    if matrices.iter().any(|m| m.n_layers() != l || m.n_steps() != t) {
        return Err(Error::Argument("ranking matrices differ in shape".into()));
    }
    Ok((l, t))
}

/// Entry-wise mean rank per category over its tokens, the last
/// `layer_window` layers and the steps of each stage.
pub fn temporal_summary(
    matrices: &[RankingMatrix],
    categories: &TokenCategories,
    layer_window: usize,
) -> Result<StageSummary> {
    let (n_layers, n_steps) = check_shapes(matrices)?;
    if layer_window == 0 || layer_window > n_layers {
        return Err(Error::Argument(format!(
            "layer window {layer_window} must lie in 1..={n_layers}"
        )));
    }
    let stages = stage_bounds(n_steps)?;
    let by_token: BTreeMap<u32, &RankingMatrix> = matrices.iter().map(|m| (m.token, m)).collect();
    let mut means = BTreeMap::new();
    for c in Category::ALL {
        let toks: Vec<&RankingMatrix> = categories
            .tokens(c)
            .iter()
            .filter_map(|t| by_token.get(t).copied())
            .collect();
        if toks.is_empty() {
            continue;
        }
        let mut m = [0.0; 3];
        for (s, &(a, b)) in stages.iter().enumerate() {
            let mut sum = 0.0;
            let mut n = 0usize;
            for mat in &toks {
                for row in &mat.ranks[n_layers - layer_window..] {
                    for &r in &row[a..b] {
                        sum += r as f64;
                        n += 1;
                    }
                }
            }
            m[s] = sum / n as f64;
        }
        means.insert(c, m);
    }
    Ok(StageSummary {
        layer_window,
        n_steps,
        stages,
        means,
    })
}

/// Mean rank per layer (1..=L) per category over tokens and steps.
pub fn layerwise_summary(
    matrices: &[RankingMatrix],
    categories: &TokenCategories,
) -> Result<BTreeMap<Category, Vec<f64>>> {
    let (n_layers, _) = check_shapes(matrices)?;
    let by_token: BTreeMap<u32, &RankingMatrix> = matrices.iter().map(|m| (m.token, m)).collect();
    let mut out = BTreeMap::new();
    for c in Category::ALL {
        let toks: Vec<&RankingMatrix> = categories
            .tokens(c)
            .iter()
            .filter_map(|t| by_token.get(t).copied())
            .collect();
        if toks.is_empty() {
            continue;
        }
        let layers = (0..n_layers)
            .map(|l| {
                let (sum, n) = toks.iter().fold((0.0, 0usize), |(s, n), m| {
                    (s + m.ranks[l].iter().map(|&r| r as f64).sum::<f64>(), n + m.ranks[l].len())
                });
                sum / n as f64
            })
            .collect();
        out.insert(c, layers);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TraceStep;
    use proptest::prelude::*;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    fn matrix(token: u32, ranks: Vec<Vec<u32>>) -> RankingMatrix {
        RankingMatrix { token, ranks }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_token(&[2.0, 5.0, 3.0], 1).unwrap(), 1);
        assert_eq!(rank_token(&[2.0, 5.0, 3.0], 0).unwrap(), 3);
        assert_eq!(rank_token(&[1.0, 1.0, 1.0], 2).unwrap(), 3);
        assert!(rank_token(&[1.0, 2.0], 2).is_err());
    }

    proptest! {
        #[test]
        fn ranks_form_a_permutation(v in prop::collection::vec(-3i8..3, 1..40)) {
            let logits: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            let mut ranks: Vec<usize> =
                (0..logits.len()).map(|t| rank_token(&logits, t as u32).unwrap()).collect();
            ranks.sort();
            prop_assert_eq!(ranks, (1..=logits.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn categories_by_set_algebra() {
        // scene {dog=10, cat=11}, caption mentions {dog, frisbee=12}
        let c = TokenCategories::from_sets(&set(&[10, 12]), &set(&[10, 11]), &set(&[]));
        assert_eq!(c.decoded_genuine, set(&[10]));
        assert_eq!(c.hidden_genuine, set(&[11]));
        assert_eq!(c.hallucinated, set(&[12]));

        let exact = TokenCategories::from_sets(&set(&[1, 2]), &set(&[1, 2]), &set(&[]));
        assert!(exact.hidden_genuine.is_empty() && exact.hallucinated.is_empty());

        let empty = TokenCategories::from_sets(&set(&[]), &set(&[1, 2]), &set(&[]));
        assert!(empty.decoded_genuine.is_empty() && empty.hallucinated.is_empty());
        assert_eq!(empty.hidden_genuine, set(&[1, 2]));
    }

    proptest! {
        #[test]
        fn categories_partition(m in prop::collection::btree_set(0u32..20, 0..10),
                                t in prop::collection::btree_set(0u32..20, 0..10)) {
            let c = TokenCategories::from_sets(&m, &t, &BTreeSet::new());
            prop_assert!(c.decoded_genuine.is_disjoint(&c.hidden_genuine));
            prop_assert!(c.decoded_genuine.is_disjoint(&c.hallucinated));
            prop_assert!(c.hidden_genuine.is_disjoint(&c.hallucinated));
            let covered: BTreeSet<u32> = c.decoded_genuine.union(&c.hallucinated).copied().collect();
            prop_assert_eq!(covered, m);
        }
    }

    #[test]
    fn stage_partitions() {
        assert_eq!(stage_bounds(9).unwrap(), [(0, 3), (3, 6), (6, 9)]);
        assert_eq!(stage_bounds(10).unwrap(), [(0, 4), (4, 7), (7, 10)]);
        assert_eq!(stage_bounds(11).unwrap(), [(0, 4), (4, 8), (8, 11)]);
        assert!(stage_bounds(2).is_err());
    }

    proptest! {
        #[test]
        fn stages_partition_steps(n in 3usize..500) {
            let s = stage_bounds(n).unwrap();
            prop_assert_eq!(s[0].0, 0);
            prop_assert_eq!(s[2].1, n);
            prop_assert_eq!(s[0].1, s[1].0);
            prop_assert_eq!(s[1].1, s[2].0);
            let lens: Vec<usize> = s.iter().map(|(a, b)| b - a).collect();
            prop_assert!(lens[0] >= lens[1] && lens[1] >= lens[2] && lens[0] - lens[2] <= 1);
        }
    }

    #[test]
    fn constant_ranks_give_constant_stage_means() {
        let cats = TokenCategories::from_sets(&set(&[1]), &set(&[1, 2]), &set(&[3]));
        let ms: Vec<_> = [1, 2, 3].iter().map(|&t| matrix(t, vec![vec![7; 9]; 6])).collect();
        let s = temporal_summary(&ms, &cats, 5).unwrap();
        for (_, m) in s.means {
            assert_eq!(m, [7.0; 3]);
        }
    }

    #[test]
    fn stage_means_restrict_to_final_layers() {
        let mut ranks = vec![vec![100; 3]; 4];
        ranks[2] = vec![1, 2, 3];
        ranks[3] = vec![3, 4, 5];
        let cats = TokenCategories::from_sets(&set(&[4]), &set(&[4]), &set(&[]));
        let s = temporal_summary(&[matrix(4, ranks)], &cats, 2).unwrap();
        assert_eq!(s.get(Category::DecodedGenuine).unwrap(), [2.0, 3.0, 4.0]);
        assert!(s.get(Category::Hallucinated).is_none());
        assert!(temporal_summary(&[matrix(4, vec![vec![1; 2]; 4])], &cats, 2).is_err());
    }

    #[test]
    fn layer_means() {
        let cats = TokenCategories::from_sets(&set(&[1, 2]), &set(&[1, 2]), &set(&[]));
        let one = layerwise_summary(&[matrix(1, vec![vec![5]])], &cats).unwrap();
        assert_eq!(one[&Category::DecodedGenuine], vec![5.0]);
        let two = layerwise_summary(
            &[matrix(1, vec![vec![1, 3], vec![2, 2]]), matrix(2, vec![vec![5, 7], vec![4, 8]])],
            &cats,
        )
        .unwrap();
        assert_eq!(two[&Category::DecodedGenuine], vec![4.0, 4.0]);
    }

    #[test]
    fn matrix_from_constant_trace_has_identical_columns() {
        use crate::model::ModelConfig;
        let m = Model::random(ModelConfig::small(16, 2, 8, 2), true).unwrap();
        let h: Vec<Vec<f32>> = (0..3).map(|l| vec![0.1 * l as f32 + 0.3; 8]).collect();
        let mut tr = ResidualTrace::new(2, 8);
        for _ in 0..4 {
            tr.steps.push(TraceStep {
                hidden: h.clone(),
                attn: None,
                mlp: None,
                steer: None,
            });
        }
        let r = build_ranking_matrix(&m, &tr, 5).unwrap();
        assert_eq!((r.n_layers(), r.n_steps()), (2, 4));
        for row in &r.ranks {
            assert!(row.iter().all(|&x| x == row[0]));
        }
        for l in 1..=2 {
            let direct = rank_token(&m.lens(&h[l]), 5).unwrap() as u32;
            assert_eq!(r.rank(l, 0), direct);
        }
        assert!(build_ranking_matrix(&m, &ResidualTrace::new(2, 8), 5).is_err());
    }
}
