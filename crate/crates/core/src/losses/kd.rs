use super::KdReduction;
use crate::error::{Error, Result};
use crate::geometry::{dot, l2_normalize, norm};

fn check(teacher: &[f64], student: &[f64]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::DimensionMismatch {
            expected: teacher.len(),
            actual: student.len(),
        });
    }
    if teacher.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Mean squared error between teacher and student embeddings.
pub fn kd_embedding_loss(teacher: &[f64], student: &[f64]) -> Result<f64> {
    kd_embedding_loss_with(teacher, student, KdReduction::Mean)
}

pub fn kd_embedding_loss_with(
    teacher: &[f64],
    student: &[f64],
    reduction: KdReduction,
) -> Result<f64> {
    check(teacher, student)?;
    let sum: f64 = teacher
        .iter()
        .zip(student)
        .map(|(t, s)| (s - t) * (s - t))
        .sum();
    Ok(match reduction {
        KdReduction::Mean => sum / teacher.len() as f64,
        KdReduction::Sum => sum,
    })
}

/// Distillation loss and its gradient with respect to the raw student embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct KdGradient {
    pub loss: f64,
    pub d_student: Vec<f64>,
}

/// With `normalized`, both embeddings are projected to the unit sphere first
/// and the gradient is carried back through the student's normalization.
pub fn kd_embedding_grad(
    teacher: &[f64],
    student: &[f64],
    reduction: KdReduction,
    normalized: bool,
) -> Result<KdGradient> {
    check(teacher, student)?;
    let scale = match reduction {
        KdReduction::Mean => 2.0 / teacher.len() as f64,
        KdReduction::Sum => 2.0,
    };
    if !normalized {
        let loss = kd_embedding_loss_with(teacher, student, reduction)?;
        let d_student = student
            .iter()
            .zip(teacher)
            .map(|(s, t)| scale * (s - t))
            .collect();
        return Ok(KdGradient { loss, d_student });
    }
    let t = l2_normalize(teacher)?;
    let u = l2_normalize(student)?;
    let loss = kd_embedding_loss_with(&t, &u, reduction)?;
    let d_u: Vec<f64> = u.iter().zip(&t).map(|(a, b)| scale * (a - b)).collect();
    let radial = dot(&d_u, &u);
    let n = norm(student);
    let d_student = d_u
        .iter()
        .zip(&u)
        .map(|(g, ui)| (g - radial * ui) / n)
        .collect();
    Ok(KdGradient { loss, d_student })
}

/// `cls + λ·kd`.
pub fn total_loss(cls_loss: f64, kd_loss: f64, lambda: f64) -> f64 {
    cls_loss + lambda * kd_loss
}
