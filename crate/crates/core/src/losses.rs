//! Objective functions: supervised cross-entropy, cross-modal InfoNCE in
//! three variants, and their weighted joint combination.
//!
//! All InfoNCE variants share one similarity model: a QA-text row is
//! projected into image space by a learnable linear map and compared to
//! image rows by cosine. Anchors are QA rows; the paired image is the
//! positive. The variants differ only in the per-anchor index sets:
//!
//! - vanilla: every image in the batch is a candidate;
//! - graph-pruned: the denominator keeps the anchor's own pair plus images
//!   outside the anchor's connected component (anchors with no negatives
//!   contribute zero);
//! - multi-positive: every member of the anchor's component is a positive,
//!   averaged, with the denominator spanning the whole batch.
//!
//! Every loss returns its value together with analytic gradients for all
//! inputs it touches. Per-anchor terms are evaluated and summed in index
//! order so results are bitwise reproducible. Denominators go through
//! `log_sum_exp`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::numcore::{cosine_similarity, dot, log_sum_exp, row_norms, Matrix, NORM_EPS};

/// A mini-batch of paired embeddings: row `m` of `text_qa` is the QA text
/// matched to row `m` of `image`. Both are `M x D`, `M >= 2`, rows non-zero.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    image: Matrix,
    text_qa: Matrix,
}

impl EmbeddingBatch {
    pub fn new(image: Matrix, text_qa: Matrix) -> Result<Self> {
        if image.rows() != text_qa.rows() || image.cols() != text_qa.cols() {
            return Err(Error::DimensionMismatch {
                expected: image.cols(),
                got: text_qa.cols(),
            });
        }
        if image.rows() < 2 {
            return Err(Error::BatchTooSmall { got: image.rows() });
        }
        row_norms(&image)?;
        row_norms(&text_qa)?;
        Ok(EmbeddingBatch { image, text_qa })
    }

    pub fn image(&self) -> &Matrix {
        &self.image
    }

    pub fn text_qa(&self) -> &Matrix {
        &self.text_qa
    }

    pub fn batch_size(&self) -> usize {
        self.image.rows()
    }

    pub fn dim(&self) -> usize {
        self.image.cols()
    }
}

/// The learnable linear transformation that aligns text embeddings with
/// image space before the cosine comparison. Square `D x D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    weight: Matrix,
}

impl AlignmentMap {
    pub fn new(weight: Matrix) -> Result<Self> {
        if weight.rows() != weight.cols() {
            return Err(Error::DimensionMismatch {
                expected: weight.rows(),
                got: weight.cols(),
            });
        }
        Ok(AlignmentMap { weight })
    }

    pub fn identity(dim: usize) -> Self {
        AlignmentMap {
            weight: Matrix::identity(dim),
        }
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Which per-anchor index-set rule the contrastive loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    Vanilla,
    GraphNegatives,
    MultiPositive,
}

/// Temperature, joint-loss weight, and index-set mode for the contrastive
/// objective. Defaults: `tau = 1.0`, `lambda = 0.5`, multi-positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub lambda: f64,
    pub mode: ContrastiveMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 1.0,
            lambda: 0.5,
            mode: ContrastiveMode::MultiPositive,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// A loss value plus analytic gradients for whichever inputs the loss
/// touches. Cross-entropy fills `grad_logits`; the contrastive losses fill
/// the embedding and alignment gradients.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub value: f64,
    /// d loss / d logits, `M x K`.
    pub grad_logits: Option<Matrix>,
    /// d loss / d image rows, `M x D`.
    pub grad_image: Option<Matrix>,
    /// d loss / d QA-text rows, `M x D`.
    pub grad_text: Option<Matrix>,
    /// d loss / d alignment weight, `D x D`.
    pub grad_alignment: Option<Matrix>,
}

/// Similarity of a QA-text row and an image row: cosine of the projected
/// text against the image.
pub fn similarity_h(text_row: &[f64], image_row: &[f64], map: &AlignmentMap) -> Result<f64> {
    if text_row.len() != map.dim() {
        return Err(Error::DimensionMismatch {
            expected: map.dim(),
            got: text_row.len(),
        });
    }
    let projected = map.weight.matvec(text_row);
    cosine_similarity(&projected, image_row)
}

/// Mean cross-entropy of `M x K` logits against integer labels, with the
/// `(softmax - onehot) / M` gradient.
pub fn supervised_ce(logits: &Matrix, labels: &[usize]) -> Result<LossReport> {
    let m = logits.rows();
    let k = logits.cols();
    if labels.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: labels.len(),
        });
    }
    let mut grad = Matrix::zeros(m, k);
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                num_classes: k,
            });
        }
        let z = logits.row(row);
        let lse = log_sum_exp(z)?;
        total += lse - z[label];
        let grow = grad.row_mut(row);
        for (j, g) in grow.iter_mut().enumerate() {
            let p = (z[j] - lse).exp();
            *g = (p - if j == label { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    Ok(LossReport {
        value: total / m as f64,
        grad_logits: Some(grad),
        ..LossReport::default()
    })
}

/// Pairwise similarity table `s[m][j] = cos(W t_m, v_j)` with the cached
/// pieces needed to differentiate through it.
struct SimilarityCtx {
    /// Projected text rows `u_m = W t_m`, `M x D`.
    proj: Matrix,
    proj_norm: Vec<f64>,
    image_norm: Vec<f64>,
    /// `M x M` cosine table.
    sim: Matrix,
}

fn similarity_ctx(batch: &EmbeddingBatch, map: &AlignmentMap) -> Result<SimilarityCtx> {
    let m = batch.batch_size();
    let d = batch.dim();
    if map.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: map.dim(),
        });
    }
    let mut proj = Matrix::zeros(m, d);
    for i in 0..m {
        let u = map.weight.matvec(batch.text_qa.row(i));
        proj.row_mut(i).copy_from_slice(&u);
    }
    let mut proj_norm = Vec::with_capacity(m);
    for i in 0..m {
        let n = crate::numcore::norm(proj.row(i));
        if n <= NORM_EPS {
            return Err(Error::ZeroNormVector { row: Some(i) });
        }
        proj_norm.push(n);
    }
    let image_norm = row_norms(&batch.image)?;
    let mut sim = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let s = dot(proj.row(i), batch.image.row(j)) / (proj_norm[i] * image_norm[j]);
            sim.set(i, j, s);
        }
    }
    Ok(SimilarityCtx {
        proj,
        proj_norm,
        image_norm,
        sim,
    })
}

/// Pushes `d loss / d s[m][j]` weights back through the cosine and the
/// alignment map, producing gradients for image rows, text rows, and the
/// map weight.
fn backprop_similarity(
    batch: &EmbeddingBatch,
    map: &AlignmentMap,
    ctx: &SimilarityCtx,
    sim_grad: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let m = batch.batch_size();
    let d = batch.dim();
    let mut grad_image = Matrix::zeros(m, d);
    let mut grad_proj = Matrix::zeros(m, d);
    for am in 0..m {
        let u = ctx.proj.row(am);
        let nu = ctx.proj_norm[am];
        for j in 0..m {
            let g = sim_grad.get(am, j);
            if g == 0.0 {
                continue;
            }
            let v = batch.image.row(j);
            let nv = ctx.image_norm[j];
            let s = ctx.sim.get(am, j);
            let inv = 1.0 / (nu * nv);
            // d cos / d u = v/(|u||v|) - s u/|u|^2 ; symmetric for v.
            let gu = grad_proj.row_mut(am);
            for a in 0..d {
                gu[a] += g * (v[a] * inv - s * u[a] / (nu * nu));
            }
            let gv = grad_image.row_mut(j);
            for a in 0..d {
                gv[a] += g * (u[a] * inv - s * v[a] / (nv * nv));
            }
        }
    }
    // u_m = W t_m : d/dt = W^T du, d/dW = du t^T.
    let mut grad_text = Matrix::zeros(m, d);
    let mut grad_alignment = Matrix::zeros(d, d);
    for am in 0..m {
        let du = grad_proj.row(am);
        grad_text
            .row_mut(am)
            .copy_from_slice(&map.weight.matvec_t(du));
        grad_alignment.add_outer(du, batch.text_qa.row(am), 1.0);
    }
    (grad_image, grad_text, grad_alignment)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidSpec(format!(
            "tau must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn contrastive_report(
    batch: &EmbeddingBatch,
    map: &AlignmentMap,
    ctx: &SimilarityCtx,
    value: f64,
    sim_grad: &Matrix,
) -> LossReport {
    let (grad_image, grad_text, grad_alignment) = backprop_similarity(batch, map, ctx, sim_grad);
    LossReport {
        value,
        grad_logits: None,
        grad_image: Some(grad_image),
        grad_text: Some(grad_text),
        grad_alignment: Some(grad_alignment),
    }
}

/// InfoNCE with QA rows as anchors and every image in the batch as a
/// candidate: `-(1/M) sum_m log softmax_j(s[m][j]/tau)[m]`.
pub fn infonce_vanilla(batch: &EmbeddingBatch, map: &AlignmentMap, tau: f64) -> Result<LossReport> {
    check_tau(tau)?;
    let m = batch.batch_size();
    let ctx = similarity_ctx(batch, map)?;
    let mut sim_grad = Matrix::zeros(m, m);
    let mut total = 0.0;
    let scale = 1.0 / (m as f64 * tau);
    for am in 0..m {
        let z: Vec<f64> = (0..m).map(|j| ctx.sim.get(am, j) / tau).collect();
        let lse = log_sum_exp(&z)?;
        total += lse - z[am];
        let grow = sim_grad.row_mut(am);
        for (j, zj) in z.iter().enumerate() {
            let p = (zj - lse).exp();
            grow[j] = (p - if j == am { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok(contrastive_report(
        batch,
        map,
        &ctx,
        total / m as f64,
        &sim_grad,
    ))
}

/// Graph-pruned InfoNCE: the denominator for anchor `m` keeps only the
/// anchor's own pair plus images outside its connected component. Anchors
/// whose negative set is empty contribute exactly zero.
pub fn infonce_graph(
    batch: &EmbeddingBatch,
    map: &AlignmentMap,
    tau: f64,
    graph: &NeighborGraph,
) -> Result<LossReport> {
    check_tau(tau)?;
    let m = batch.batch_size();
    if graph.num_nodes() != m {
        return Err(Error::GraphBatchMismatch {
            graph_nodes: graph.num_nodes(),
            batch_rows: m,
        });
    }
    let ctx = similarity_ctx(batch, map)?;
    let labels = graph.component_of();
    let mut sim_grad = Matrix::zeros(m, m);
    let mut total = 0.0;
    let scale = 1.0 / (m as f64 * tau);
    for am in 0..m {
        // Ascending index order keeps the arithmetic identical to the
        // vanilla loss when every component is a singleton.
        let included: Vec<usize> = (0..m)
            .filter(|&j| j == am || labels[j] != labels[am])
            .collect();
        if included.len() < 2 {
            continue; // no negatives anywhere: term is defined as 0
        }
        let z: Vec<f64> = included.iter().map(|&j| ctx.sim.get(am, j) / tau).collect();
        let lse = log_sum_exp(&z)?;
        let own = included.iter().position(|&j| j == am).expect("anchor in set");
        total += lse - z[own];
        let grow = sim_grad.row_mut(am);
        for (pos, &j) in included.iter().enumerate() {
            let p = (z[pos] - lse).exp();
            grow[j] = (p - if j == am { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok(contrastive_report(
        batch,
        map,
        &ctx,
        total / m as f64,
        &sim_grad,
    ))
}

/// Multi-positive InfoNCE: every image in the anchor's component is a
/// positive; their log-ratio terms are averaged, and the denominator spans
/// the whole batch.
pub fn infonce_multipos(
    batch: &EmbeddingBatch,
    map: &AlignmentMap,
    tau: f64,
    graph: &NeighborGraph,
) -> Result<LossReport> {
    check_tau(tau)?;
    let m = batch.batch_size();
    if graph.num_nodes() != m {
        return Err(Error::GraphBatchMismatch {
            graph_nodes: graph.num_nodes(),
            batch_rows: m,
        });
    }
    let ctx = similarity_ctx(batch, map)?;
    let mut sim_grad = Matrix::zeros(m, m);
    let mut total = 0.0;
    let scale = 1.0 / (m as f64 * tau);
    for am in 0..m {
        let z: Vec<f64> = (0..m).map(|j| ctx.sim.get(am, j) / tau).collect();
        let lse = log_sum_exp(&z)?;
        let members = graph.positives_for(am)?;
        let count = members.len() as f64;
        let mean_pos: f64 = members.iter().map(|&c| z[c]).sum::<f64>() / count;
        total += lse - mean_pos;
        let grow = sim_grad.row_mut(am);
        for (j, zj) in z.iter().enumerate() {
            let p = (zj - lse).exp();
            let pos = if members.binary_search(&j).is_ok() {
                1.0 / count
            } else {
                0.0
            };
            grow[j] = (p - pos) * scale;
        }
    }
    Ok(contrastive_report(
        batch,
        map,
        &ctx,
        total / m as f64,
        &sim_grad,
    ))
}

/// Dispatch over [`ContrastiveMode`]; graph modes require the batch graph.
pub fn infonce(
    batch: &EmbeddingBatch,
    map: &AlignmentMap,
    config: &ContrastiveConfig,
    graph: Option<&NeighborGraph>,
) -> Result<LossReport> {
    config.validate()?;
    match config.mode {
        ContrastiveMode::Vanilla => infonce_vanilla(batch, map, config.tau),
        ContrastiveMode::GraphNegatives => {
            let graph = graph.ok_or_else(|| {
                Error::InvalidSpec("graph_negatives mode needs a neighbor graph".into())
            })?;
            infonce_graph(batch, map, config.tau, graph)
        }
        ContrastiveMode::MultiPositive => {
            let graph = graph.ok_or_else(|| {
                Error::InvalidSpec("multi_positive mode needs a neighbor graph".into())
            })?;
            infonce_multipos(batch, map, config.tau, graph)
        }
    }
}

/// `L = sup + lambda * cl`, gradients combined linearly field by field.
pub fn joint_loss(sup: &LossReport, cl: &LossReport, lambda: f64) -> Result<LossReport> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidSpec(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(LossReport {
        value: sup.value + lambda * cl.value,
        grad_logits: combine(&sup.grad_logits, &cl.grad_logits, lambda)?,
        grad_image: combine(&sup.grad_image, &cl.grad_image, lambda)?,
        grad_text: combine(&sup.grad_text, &cl.grad_text, lambda)?,
        grad_alignment: combine(&sup.grad_alignment, &cl.grad_alignment, lambda)?,
    })
}

fn combine(a: &Option<Matrix>, b: &Option<Matrix>, lambda: f64) -> Result<Option<Matrix>> {
    match (a, b) {
        (None, None) => Ok(None),
        (Some(a), None) => Ok(Some(a.clone())),
        (None, Some(b)) => {
            let mut out = b.clone();
            out.scale(lambda);
            Ok(Some(out))
        }
        (Some(a), Some(b)) => {
            if a.rows() != b.rows() || a.cols() != b.cols() {
                return Err(Error::DimensionMismatch {
                    expected: a.rows() * a.cols(),
                    got: b.rows() * b.cols(),
                });
            }
            let mut out = a.clone();
            out.add_scaled(b, lambda);
            Ok(Some(out))
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::build_knn_graph;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, m: usize, d: usize) -> EmbeddingBatch {
        EmbeddingBatch::new(random_matrix(rng, m, d), random_matrix(rng, m, d)).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, d: usize) -> AlignmentMap {
        let mut w = Matrix::identity(d);
        for v in w.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        AlignmentMap::new(w).unwrap()
    }

    #[test]
    fn similarity_h_identity_map() {
        let map = AlignmentMap::identity(3);
        let row = [0.5, -1.0, 2.0];
        assert!((similarity_h(&row, &row, &map).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            similarity_h(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &map).unwrap(),
            0.0
        );
    }

    #[test]
    fn similarity_h_matches_compose_then_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d = rng.gen_range(2..6);
            let map = random_map(&mut rng, d);
            let t: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let projected = map.weight().matvec(&t);
            let expect = cosine_similarity(&projected, &v).unwrap();
            assert!((similarity_h(&t, &v, &map).unwrap() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_uniform_logits_is_ln_k() {
        let logits = Matrix::zeros(3, 4);
        let report = supervised_ce(&logits, &[0, 2, 3]).unwrap();
        assert!((report.value - (4.0f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_dominant_logit_is_near_zero() {
        let mut logits = Matrix::zeros(2, 5);
        logits.set(0, 1, 1000.0);
        logits.set(1, 4, 1000.0);
        let report = supervised_ce(&logits, &[1, 4]).unwrap();
        assert!(report.value.abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            supervised_ce(&logits, &[0, 3]),
            Err(Error::LabelOutOfRange { row: 1, label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn vanilla_constant_similarities_is_ln_m() {
        // All image rows identical: s[m][j] constant in j for each m.
        let m = 5;
        let image = Matrix::from_rows(&vec![vec![1.0, 0.0, 0.0]; m]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let text = random_matrix(&mut rng, m, 3);
        let batch = EmbeddingBatch::new(image, text).unwrap();
        let report = infonce_vanilla(&batch, &AlignmentMap::identity(3), 1.0).unwrap();
        assert!((report.value - (m as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn vanilla_two_by_two_closed_form() {
        // s = [[1,0],[0,1]] at tau = 1; hand value ln(1 + e^{-1}).
        let image = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let text = image.clone();
        let batch = EmbeddingBatch::new(image, text).unwrap();
        let report = infonce_vanilla(&batch, &AlignmentMap::identity(2), 1.0).unwrap();
        assert!((report.value - 0.31326168751822286).abs() < 1e-15);
    }

    #[test]
    fn graph_single_component_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_batch(&mut rng, 4, 3);
        let graph = NeighborGraph::from_components(4, vec![vec![0, 1, 2, 3]]).unwrap();
        let report =
            infonce_graph(&batch, &random_map(&mut rng, 3), 0.7, &graph).unwrap();
        assert_eq!(report.value, 0.0);
        assert_eq!(report.grad_image.unwrap().max_abs_diff(&Matrix::zeros(4, 3)), 0.0);
    }

    #[test]
    fn graph_and_multipos_reduce_to_vanilla_on_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let m = rng.gen_range(2..8);
            let d = rng.gen_range(2..5);
            let batch = random_batch(&mut rng, m, d);
            let map = random_map(&mut rng, d);
            let tau = rng.gen_range(0.2..2.0);
            let singles = NeighborGraph::singletons(m);
            let base = infonce_vanilla(&batch, &map, tau).unwrap();
            let g = infonce_graph(&batch, &map, tau, &singles).unwrap();
            let mp = infonce_multipos(&batch, &map, tau, &singles).unwrap();
            for other in [&g, &mp] {
                assert!((other.value - base.value).abs() <= 1e-12);
                for (a, b) in [
                    (&base.grad_image, &other.grad_image),
                    (&base.grad_text, &other.grad_text),
                    (&base.grad_alignment, &other.grad_alignment),
                ] {
                    assert!(a.as_ref().unwrap().max_abs_diff(b.as_ref().unwrap()) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn multipos_identical_rows_is_ln_m() {
        let m = 6;
        let image = Matrix::from_rows(&vec![vec![0.4, 0.3]; m]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let text = random_matrix(&mut rng, m, 2);
        let batch = EmbeddingBatch::new(image.clone(), text).unwrap();
        let graph = build_knn_graph(&image).unwrap();
        assert_eq!(graph.num_components(), 1);
        let report = infonce_multipos(&batch, &AlignmentMap::identity(2), 1.0, &graph).unwrap();
        assert!((report.value - (m as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_matches_index_set_brute_force() {
        // Independent oracle: materialize the per-anchor index sets and sum
        // exponentials directly, without log_sum_exp.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let m = rng.gen_range(3..9);
            let d = rng.gen_range(2..5);
            let batch = random_batch(&mut rng, m, d);
            let map = random_map(&mut rng, d);
            let tau = rng.gen_range(0.3..1.5);
            let graph = build_knn_graph(batch.image()).unwrap();

            let mut expected = 0.0;
            for am in 0..m {
                let negs = graph.negatives_for(am).unwrap();
                if negs.is_empty() {
                    continue;
                }
                let own = (similarity_h(batch.text_qa().row(am), batch.image().row(am), &map)
                    .unwrap()
                    / tau)
                    .exp();
                let mut denom = own;
                for &j in &negs {
                    denom += (similarity_h(batch.text_qa().row(am), batch.image().row(j), &map)
                        .unwrap()
                        / tau)
                        .exp();
                }
                expected -= (own / denom).ln();
            }
            expected /= m as f64;

            let report = infonce_graph(&batch, &map, tau, &graph).unwrap();
            assert!((report.value - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn multipos_matches_double_sum_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let m = rng.gen_range(3..9);
            let d = rng.gen_range(2..5);
            let batch = random_batch(&mut rng, m, d);
            let map = random_map(&mut rng, d);
            let tau = rng.gen_range(0.3..1.5);
            let graph = build_knn_graph(batch.image()).unwrap();

            let mut expected = 0.0;
            for am in 0..m {
                let mut denom = 0.0;
                for j in 0..m {
                    denom += (similarity_h(batch.text_qa().row(am), batch.image().row(j), &map)
                        .unwrap()
                        / tau)
                        .exp();
                }
                let members = graph.positives_for(am).unwrap();
                let mut term = 0.0;
                for &c in &members {
                    let num = (similarity_h(batch.text_qa().row(am), batch.image().row(c), &map)
                        .unwrap()
                        / tau)
                        .exp();
                    term += (num / denom).ln();
                }
                expected -= term / members.len() as f64;
            }
            expected /= m as f64;

            let report = infonce_multipos(&batch, &map, tau, &graph).unwrap();
            assert!((report.value - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn joint_loss_combines_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = random_matrix(&mut rng, 3, 4);
        let sup = supervised_ce(&logits, &[1, 0, 3]).unwrap();
        let batch = random_batch(&mut rng, 3, 3);
        let map = random_map(&mut rng, 3);
        let cl = infonce_vanilla(&batch, &map, 1.0).unwrap();

        let zero = joint_loss(&sup, &cl, 0.0).unwrap();
        assert_eq!(zero.value, sup.value);
        assert_eq!(
            zero.grad_image.as_ref().unwrap().max_abs_diff(&Matrix::zeros(3, 3)),
            0.0
        );

        let half = joint_loss(&sup, &cl, 0.5).unwrap();
        assert!((half.value - (sup.value + 0.5 * cl.value)).abs() < 1e-15);
        let mut scaled = cl.grad_text.clone().unwrap();
        scaled.scale(0.5);
        assert_eq!(half.grad_text.as_ref().unwrap().max_abs_diff(&scaled), 0.0);

        let with_zero_cl = joint_loss(
            &sup,
            &LossReport {
                value: 0.0,
                ..LossReport::default()
            },
            1.0,
        )
        .unwrap();
        assert_eq!(with_zero_cl.value, sup.value);
    }

    #[test]
    fn rejects_invalid_tau_and_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = random_batch(&mut rng, 2, 2);
        let map = AlignmentMap::identity(2);
        assert!(infonce_vanilla(&batch, &map, 0.0).is_err());
        assert!(infonce_vanilla(&batch, &map, -1.0).is_err());
        assert!(joint_loss(&LossReport::default(), &LossReport::default(), -0.1).is_err());
    }

    #[test]
    fn graph_batch_mismatch_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = random_batch(&mut rng, 4, 3);
        let graph = NeighborGraph::singletons(5);
        assert!(matches!(
            infonce_graph(&batch, &AlignmentMap::identity(3), 1.0, &graph),
            Err(Error::GraphBatchMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // Non-negativity of all three InfoNCE variants.
        #[test]
        fn infonce_nonnegative(seed in 0u64..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(2..10);
            let d = rng.gen_range(2..6);
            let batch = random_batch(&mut rng, m, d);
            let map = random_map(&mut rng, d);
            let tau = rng.gen_range(0.2..3.0);
            let graph = build_knn_graph(batch.image()).unwrap();
            prop_assert!(infonce_vanilla(&batch, &map, tau).unwrap().value >= 0.0);
            prop_assert!(infonce_graph(&batch, &map, tau, &graph).unwrap().value >= 0.0);
            prop_assert!(infonce_multipos(&batch, &map, tau, &graph).unwrap().value >= 0.0);
        }

        // Jointly permuting (image row, text row) pairs leaves every loss
        // value unchanged (graphs rebuilt on the permuted batch).
        #[test]
        fn anchor_permutation_invariance(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5000));
            let m = rng.gen_range(2..9);
            let d = rng.gen_range(2..5);
            let batch = random_batch(&mut rng, m, d);
            let map = random_map(&mut rng, d);
            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let image: Vec<Vec<f64>> = perm.iter().map(|&p| batch.image().row(p).to_vec()).collect();
            let text: Vec<Vec<f64>> = perm.iter().map(|&p| batch.text_qa().row(p).to_vec()).collect();
            let permuted = EmbeddingBatch::new(
                Matrix::from_rows(&image).unwrap(),
                Matrix::from_rows(&text).unwrap(),
            ).unwrap();

            let g = build_knn_graph(batch.image()).unwrap();
            let gp = build_knn_graph(permuted.image()).unwrap();
            let pairs = [
                (infonce_vanilla(&batch, &map, 1.0).unwrap().value,
                 infonce_vanilla(&permuted, &map, 1.0).unwrap().value),
                (infonce_graph(&batch, &map, 1.0, &g).unwrap().value,
                 infonce_graph(&permuted, &map, 1.0, &gp).unwrap().value),
                (infonce_multipos(&batch, &map, 1.0, &g).unwrap().value,
                 infonce_multipos(&permuted, &map, 1.0, &gp).unwrap().value),
            ];
            for (a, b) in pairs {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        // Scaling an image row by s > 0 keeps all loss values (cosine is
        // scale-free); gradients are allowed to change.
        #[test]
        fn image_row_scale_value_invariance(seed in 0u64..200, s in 0.05f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(9000));
            let m = rng.gen_range(2..8);
            let d = rng.gen_range(2..5);
            let batch = random_batch(&mut rng, m, d);
            let map = random_map(&mut rng, d);
            let row = rng.gen_range(0..m);
            let mut image = batch.image().clone();
            for v in image.row_mut(row) {
                *v *= s;
            }
            let scaled = EmbeddingBatch::new(image, batch.text_qa().clone()).unwrap();
            let g = build_knn_graph(batch.image()).unwrap();
            let gs = build_knn_graph(scaled.image()).unwrap();
            let a = infonce_vanilla(&batch, &map, 1.0).unwrap().value;
            let b = infonce_vanilla(&scaled, &map, 1.0).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-9);
            let a = infonce_multipos(&batch, &map, 1.0, &g).unwrap().value;
            let b = infonce_multipos(&scaled, &map, 1.0, &gs).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
