use crate::error::{Error, Result};
use crate::numerics::ValueGrid;
use crate::softdtw::band::{apply_band, build_band, BandParams, BandSpec};
use crate::softdtw::cost::{cosine_cost, cosine_cost_backward};
use crate::softdtw::recursion::{soft_dtw, SoftDtwResult};

/// Debiased Soft-DTW divergence between two sequences, with the pieces the
/// alignment dump and the backward pass need.
#[derive(Debug, Clone)]
pub struct Ndtw {
    /// `s_γ(X, Y) − ½[s_γ(X, X) + s_γ(Y, Y)]`.
    pub value: f64,
    /// Unbanded cross cost `C(X, Y)`.
    pub cost: ValueGrid,
    /// Banded cross cost `C̃(X, Y)` (equal to `cost` without a band).
    pub banded_cost: ValueGrid,
    pub cross: SoftDtwResult,
    pub self_x: f64,
    pub self_y: f64,
    pub grad_x: ValueGrid,
    pub grad_y: ValueGrid,
}

/// Cross term on the banded cosine cost; both self terms on unbanded costs.
pub fn ndtw(x: &ValueGrid, y: &ValueGrid, band: Option<&BandSpec>, gamma: f64) -> Result<Ndtw> {
    let cost = cosine_cost(x, y)?;
    let banded_cost = match band {
        Some(b) => apply_band(&cost, b)?,
        None => cost.clone(),
    };
    let cross = soft_dtw(&banded_cost, gamma)?;
    let (mut grad_x, mut grad_y) = cosine_cost_backward(x, y, &cross.grad)?;

    let xx = cosine_cost(x, x)?;
    let sxx = soft_dtw(&xx, gamma)?;
    let (a, b) = cosine_cost_backward(x, x, &sxx.grad.scaled(-0.5))?;
    grad_x.add_assign(&a)?;
    grad_x.add_assign(&b)?;

    let yy = cosine_cost(y, y)?;
    let syy = soft_dtw(&yy, gamma)?;
    let (a, b) = cosine_cost_backward(y, y, &syy.grad.scaled(-0.5))?;
    grad_y.add_assign(&a)?;
    grad_y.add_assign(&b)?;

    Ok(Ndtw {
        value: cross.score - 0.5 * (sxx.score + syy.score),
        cost,
        banded_cost,
        cross,
        self_x: sxx.score,
        self_y: syy.score,
        grad_x,
        grad_y,
    })
}

/// Sum of the hidden-level and embedding-level divergences, with gradients
/// for all four input sequences.
#[derive(Debug, Clone)]
pub struct DtwLoss {
    pub total: f64,
    pub band: BandSpec,
    pub embed: Ndtw,
    pub hidden: Ndtw,
}

impl DtwLoss {
    pub fn grad_student_embeddings(&self) -> &ValueGrid {
        &self.embed.grad_x
    }

    pub fn grad_teacher_embeddings(&self) -> &ValueGrid {
        &self.embed.grad_y
    }

    pub fn grad_student_hidden(&self) -> &ValueGrid {
        &self.hidden.grad_x
    }

    pub fn grad_teacher_hidden(&self) -> &ValueGrid {
        &self.hidden.grad_y
    }
}

/// `nDTW(H_s, H̃_t) + nDTW(E_s, Ẽ_t)`, both banded by the band derived from
/// the student→teacher attention `attention` (`S × T`).
pub fn dtw_loss(
    student_embeddings: &ValueGrid,
    teacher_embeddings: &ValueGrid,
    student_hidden: &ValueGrid,
    teacher_hidden: &ValueGrid,
    attention: &ValueGrid,
    params: BandParams,
    gamma: f64,
) -> Result<DtwLoss> {
    let band = build_band(attention, params)?;
    dtw_loss_with_band(
        student_embeddings,
        teacher_embeddings,
        student_hidden,
        teacher_hidden,
        band,
        gamma,
    )
}

/// As [`dtw_loss`] with a precomputed (frozen) band.
pub fn dtw_loss_with_band(
    student_embeddings: &ValueGrid,
    teacher_embeddings: &ValueGrid,
    student_hidden: &ValueGrid,
    teacher_hidden: &ValueGrid,
    band: BandSpec,
    gamma: f64,
) -> Result<DtwLoss> {
    let s = student_embeddings.rows();
    let t = teacher_embeddings.rows();
    if student_hidden.rows() != s || teacher_hidden.rows() != t {
        return Err(Error::shape(
            "dtw_loss sequence lengths",
            format!("embeddings {s}×{t}"),
            format!("hidden {}×{}", student_hidden.rows(), teacher_hidden.rows()),
        ));
    }
    let embed = ndtw(student_embeddings, teacher_embeddings, Some(&band), gamma)?;
    let hidden = ndtw(student_hidden, teacher_hidden, Some(&band), gamma)?;
    Ok(DtwLoss {
        total: hidden.value + embed.value,
        band,
        embed,
        hidden,
    })
}
