//! Dense reconstructions the incremental results are checked against.

use nalgebra::DMatrix;

use crate::belief::{StateLayout, VariableKey};
use crate::recovery::{ChangeData, InferenceChange};

/// Scatters block columns over `keys` into a dense m × dim(layout) matrix.
pub fn scatter_columns(
    layout: &StateLayout,
    keys: &[VariableKey],
    block: &DMatrix<f64>,
) -> DMatrix<f64> {
    let m = block.nrows();
    let mut out = DMatrix::zeros(m, layout.dim());
    let mut src = 0;
    for &k in keys {
        let r = layout.range_of(k).expect("key belongs to layout");
        out.view_mut((0, r.start), (m, k.dim()))
            .copy_from(&block.view((0, src), (m, k.dim())));
        src += k.dim();
    }
    out
}

/// Dense posterior information matrix and layout after a change, built by
/// direct zero-padding and Jacobian outer products.
pub fn posterior_information(
    layout: &StateLayout,
    lambda: &DMatrix<f64>,
    change: &InferenceChange,
) -> (StateLayout, DMatrix<f64>) {
    let post_layout = layout.extended(change.new_vars());
    let n_post = post_layout.dim();
    let mut post = DMatrix::zeros(n_post, n_post);
    post.view_mut((0, 0), (layout.dim(), layout.dim()))
        .copy_from(lambda);

    match &change.data {
        ChangeData::NotAugmented { block } => {
            let a = scatter_columns(&post_layout, &change.involved, block);
            post += a.transpose() * a;
        }
        ChangeData::Rectangular {
            old_block,
            new_block,
            new_vars,
        }
        | ChangeData::Squared {
            old_block,
            new_block,
            new_vars,
        } => {
            let a_old = scatter_columns(&post_layout, &change.involved, old_block);
            let a_new = scatter_columns(&post_layout, new_vars, new_block);
            let a = a_old + a_new;
            post += a.transpose() * a;
        }
        ChangeData::Relinearization {
            block_before,
            block_after,
        } => {
            let before = scatter_columns(&post_layout, &change.involved, block_before);
            let after = scatter_columns(&post_layout, &change.involved, block_after);
            post -= before.transpose() * before;
            post += after.transpose() * after;
        }
    }
    (post_layout, post)
}

/// Block of a dense covariance over the given keys.
pub fn sigma_block(
    sigma: &DMatrix<f64>,
    layout: &StateLayout,
    rows: &[VariableKey],
    cols: &[VariableKey],
) -> DMatrix<f64> {
    let ri: Vec<usize> = rows
        .iter()
        .flat_map(|&k| layout.range_of(k).expect("key belongs to layout"))
        .collect();
    let ci: Vec<usize> = cols
        .iter()
        .flat_map(|&k| layout.range_of(k).expect("key belongs to layout"))
        .collect();
    DMatrix::from_fn(ri.len(), ci.len(), |r, c| sigma[(ri[r], ci[c])])
}

/// Dense conditional covariance of `targets` given `conditioning`:
/// the inverse of Λ's unconditioned block, sliced.
pub fn conditional_sigma(
    lambda: &DMatrix<f64>,
    layout: &StateLayout,
    targets: &[VariableKey],
    conditioning: &[VariableKey],
) -> DMatrix<f64> {
    let u_keys: Vec<VariableKey> = layout
        .keys()
        .iter()
        .copied()
        .filter(|k| !conditioning.contains(k))
        .collect();
    let ui: Vec<usize> = u_keys
        .iter()
        .flat_map(|&k| layout.range_of(k).expect("key belongs to layout"))
        .collect();
    let luu = DMatrix::from_fn(ui.len(), ui.len(), |r, c| lambda[(ui[r], ui[c])]);
    let suu = luu.try_inverse().expect("unconditioned block invertible");

    // positions of targets inside the U frame
    let mut u_layout = StateLayout::default();
    for &k in &u_keys {
        u_layout.push(k);
    }
    sigma_block(&suu, &u_layout, targets, targets)
}
