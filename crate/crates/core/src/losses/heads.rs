use rand_distr::{Distribution, StandardNormal};

use super::{clip_norm, ClassPrototypes, MarginConfig, NormStats, UnitPrototypes};
use crate::error::{Error, Result};
use crate::geometry::{dot, l2_normalize, norm};
use crate::rng::Rng;

/// Cosines are kept this far inside `[-1, 1]` wherever the angle's sine
/// appears in a denominator.
pub const COS_CLAMP_EPS: f64 = 1e-7;

/// How the target-class logit is formed from its cosine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetMargin {
    /// `s·cos(θ + m)`, continued as `s·(cos θ − m·sin m)` once `θ + m` passes π.
    Angular { m: f64 },
    /// `s·(cos(θ + angle) − additive)` with `θ + angle` clipped at π.
    Adaptive { angle: f64, additive: f64 },
}

/// Target logit and its derivative with respect to the target cosine.
///
/// `cos(θ + a)` is expanded as `c·cos a − sin θ·sin a` so no arccos is taken;
/// the clamp only guards the `1 / sin θ` in the derivative.
fn target_logit(c: f64, s: f64, target: TargetMargin) -> (f64, f64) {
    let sin_theta = (1.0 - c * c).max(0.0).sqrt();
    let clamped = c.clamp(-1.0 + COS_CLAMP_EPS, 1.0 - COS_CLAMP_EPS);
    let sin_theta_safe = (1.0 - clamped * clamped).sqrt();
    let shifted = |a: f64| {
        let (sa, ca) = a.sin_cos();
        let value = c * ca - sin_theta * sa;
        let deriv = ca + clamped / sin_theta_safe * sa;
        (value, deriv)
    };
    match target {
        TargetMargin::Angular { m } => {
            if m == 0.0 {
                (s * c, s)
            } else if c > -m.cos() {
                let (v, d) = shifted(m);
                (s * v, s * d)
            } else {
                (s * (c - m * m.sin()), s)
            }
        }
        TargetMargin::Adaptive { angle, additive } => {
            if angle == 0.0 {
                (s * (c - additive), s)
            } else if angle > 0.0 && c < -angle.cos() {
                (s * (-1.0 - additive), 0.0)
            } else {
                let (v, d) = shifted(angle);
                (s * (v - additive), s * d)
            }
        }
    }
}

fn check_head_inputs(embedding: &[f64], unit: &UnitPrototypes, y: usize) -> Result<()> {
    if y >= unit.classes() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: unit.classes(),
        });
    }
    if embedding.len() != unit.dim() {
        return Err(Error::DimensionMismatch {
            expected: unit.dim(),
            actual: embedding.len(),
        });
    }
    Ok(())
}

/// Cosines between the normalized embedding and every prototype.
fn cosines(u: &[f64], unit: &UnitPrototypes) -> Vec<f64> {
    (0..unit.classes()).map(|j| dot(u, unit.row(j))).collect()
}

/// Margin logits against pre-normalized prototypes.
pub fn margin_logits(
    embedding: &[f64],
    unit: &UnitPrototypes,
    y: usize,
    s: f64,
    target: TargetMargin,
) -> Result<Vec<f64>> {
    check_head_inputs(embedding, unit, y)?;
    let u = l2_normalize(embedding)?;
    let mut logits = cosines(&u, unit);
    let cy = logits[y];
    for l in logits.iter_mut() {
        *l *= s;
    }
    logits[y] = target_logit(cy, s, target).0;
    Ok(logits)
}

pub fn margin_logits_arcface(
    embedding: &[f64],
    prototypes: &ClassPrototypes,
    y: usize,
    cfg: &MarginConfig,
) -> Result<Vec<f64>> {
    margin_logits(
        embedding,
        &prototypes.unit()?,
        y,
        cfg.s,
        TargetMargin::Angular { m: cfg.m },
    )
}

/// Draws one elastic margin `m_i ~ N(m, std)`. Always consumes one normal
/// variate so the stream position does not depend on `std`.
pub fn sample_elastic_margin(cfg: &MarginConfig, rng: &mut Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    cfg.m + cfg.std * z
}

pub fn margin_logits_elastic(
    embedding: &[f64],
    prototypes: &ClassPrototypes,
    y: usize,
    cfg: &MarginConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let unit = prototypes.unit()?;
    check_head_inputs(embedding, &unit, y)?;
    let m = sample_elastic_margin(cfg, rng);
    margin_logits(embedding, &unit, y, cfg.s, TargetMargin::Angular { m })
}

/// Adaptive margins for an embedding of raw norm `raw_norm`.
///
/// `norm_hat = clip((‖z‖ − μ) / (σ / h), −1, 1)`, angle `−m·norm_hat`,
/// additive `m·norm_hat + m`. The result is a constant for differentiation.
pub fn adaface_margins(
    raw_norm: f64,
    cfg: &MarginConfig,
    stats: &NormStats,
) -> Result<TargetMargin> {
    let (mean, std) = stats.get()?;
    let norm_hat = ((clip_norm(raw_norm) - mean) / (std / cfg.h)).clamp(-1.0, 1.0);
    Ok(TargetMargin::Adaptive {
        angle: -cfg.m * norm_hat,
        additive: cfg.m * norm_hat + cfg.m,
    })
}

/// AdaFace logits. The statistics are read first, then moved by one EMA
/// step towards this embedding's norm.
pub fn margin_logits_adaface(
    embedding: &[f64],
    prototypes: &ClassPrototypes,
    y: usize,
    cfg: &MarginConfig,
    stats: &mut NormStats,
) -> Result<Vec<f64>> {
    let raw = norm(embedding);
    let target = adaface_margins(raw, cfg, stats)?;
    let logits = margin_logits(embedding, &prototypes.unit()?, y, cfg.s, target)?;
    stats.update(&[raw], cfg.ema_momentum)?;
    Ok(logits)
}

fn check_logits(logits: &[f64], y: usize) -> Result<()> {
    if y >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: logits.len(),
        });
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite { what: "logits" });
    }
    Ok(())
}

/// `−log softmax(logits)[y]` with max subtraction.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    check_logits(logits, y)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    Ok((lse - logits[y]).max(0.0))
}

/// Cross-entropy and its gradient `softmax(logits) − onehot(y)`.
pub fn cross_entropy_with_grad(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    check_logits(logits, y)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = (total.ln() + max - logits[y]).max(0.0);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Forward and backward pass of `cross_entropy ∘ margin_logits`.
///
/// Returns the loss and `∂loss/∂embedding`; `∂loss/∂prototypes` (raw,
/// row-major `C×D`) is accumulated into `d_prototypes` when given.
pub fn head_backward(
    embedding: &[f64],
    unit: &UnitPrototypes,
    y: usize,
    s: f64,
    target: TargetMargin,
    d_prototypes: Option<&mut [f64]>,
) -> Result<(f64, Vec<f64>)> {
    check_head_inputs(embedding, unit, y)?;
    let dim = unit.dim();
    let z_norm = norm(embedding);
    let u = l2_normalize(embedding)?;
    let cos = cosines(&u, unit);

    let mut logits: Vec<f64> = cos.iter().map(|c| s * c).collect();
    let (ty, dty) = target_logit(cos[y], s, target);
    logits[y] = ty;
    let (loss, d_logits) = cross_entropy_with_grad(&logits, y)?;

    // ∂loss/∂cos_j
    let mut d_cos: Vec<f64> = d_logits.iter().map(|g| g * s).collect();
    d_cos[y] = d_logits[y] * dty;

    let mut d_u = vec![0.0; dim];
    for (j, &g) in d_cos.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (du, w) in d_u.iter_mut().zip(unit.row(j)) {
            *du += g * w;
        }
    }
    let radial = dot(&d_u, &u);
    let d_z: Vec<f64> = d_u
        .iter()
        .zip(&u)
        .map(|(du, ui)| (du - radial * ui) / z_norm)
        .collect();

    if let Some(dp) = d_prototypes {
        if dp.len() != unit.classes() * dim {
            return Err(Error::ShapeMismatch(format!(
                "prototype gradient buffer has {} entries, expected {}",
                dp.len(),
                unit.classes() * dim
            )));
        }
        for (j, &g) in d_cos.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let w = unit.row(j);
            let scale = g / unit.raw_norm(j);
            let out = &mut dp[j * dim..(j + 1) * dim];
            for ((o, ui), wi) in out.iter_mut().zip(&u).zip(w) {
                *o += scale * (ui - cos[j] * wi);
            }
        }
    }
    Ok((loss, d_z))
}

/// Loss and full gradients of one classification head at one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub loss: f64,
    pub d_embedding: Vec<f64>,
    /// Row-major `C×D`, with respect to the raw prototype weights.
    pub d_prototypes: Vec<f64>,
}

pub fn loss_gradients(
    embedding: &[f64],
    prototypes: &ClassPrototypes,
    y: usize,
    s: f64,
    target: TargetMargin,
) -> Result<HeadGradients> {
    let unit = prototypes.unit()?;
    let mut d_prototypes = vec![0.0; prototypes.classes() * prototypes.dim()];
    let (loss, d_embedding) =
        head_backward(embedding, &unit, y, s, target, Some(&mut d_prototypes))?;
    Ok(HeadGradients {
        loss,
        d_embedding,
        d_prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn axis_protos() -> ClassPrototypes {
        ClassPrototypes::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn arcface_examples() {
        let p = axis_protos();
        let l =
            margin_logits_arcface(&[1.0, 0.0], &p, 0, &MarginConfig::arcface(1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(l[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1], 0.0, epsilon = 1e-12);

        let l =
            margin_logits_arcface(&[1.0, 0.0], &p, 0, &MarginConfig::arcface(64.0, 0.5)).unwrap();
        assert_abs_diff_eq!(l[0], 56.165, epsilon = 1e-3);
        assert_abs_diff_eq!(l[1], 0.0, epsilon = 1e-12);

        // θ_y = π/3 against prototype 0
        let e = [(PI / 3.0).cos(), (PI / 3.0).sin()];
        let l = margin_logits_arcface(&e, &p, 0, &MarginConfig::arcface(64.0, 0.5)).unwrap();
        assert_abs_diff_eq!(l[0], 1.510, epsilon = 1e-2);
        assert_abs_diff_eq!(l[0], 64.0 * (PI / 3.0 + 0.5).cos(), epsilon = 1e-12);
    }

    #[test]
    fn arcface_fallback_past_pi() {
        let p = axis_protos();
        let cfg = MarginConfig::arcface(10.0, 0.5);
        // θ = π − 0.2, so θ + m > π
        let theta = PI - 0.2;
        let e = [theta.cos(), theta.sin()];
        let l = margin_logits_arcface(&e, &p, 0, &cfg).unwrap();
        assert_abs_diff_eq!(
            l[0],
            10.0 * (theta.cos() - 0.5 * 0.5f64.sin()),
            epsilon = 1e-12
        );
        // monotone: smaller angle gives a larger target logit across the boundary
        let mut prev = f64::NEG_INFINITY;
        for k in (0..=200).rev() {
            let th = PI * k as f64 / 200.0;
            let l = margin_logits_arcface(&[th.cos(), th.sin()], &p, 0, &cfg).unwrap()[0];
            assert!(l >= prev - 1e-9, "non-monotone at θ={th}");
            prev = l;
        }
    }

    #[test]
    fn head_errors() {
        let p = axis_protos();
        let cfg = MarginConfig::arcface(64.0, 0.5);
        assert!(matches!(
            margin_logits_arcface(&[0.0, 0.0], &p, 0, &cfg),
            Err(Error::ZeroVector { .. })
        ));
        assert!(matches!(
            margin_logits_arcface(&[1.0, 0.0], &p, 2, &cfg),
            Err(Error::IndexOutOfRange { .. })
        ));
        let mut stats = NormStats::uninitialized();
        assert!(matches!(
            margin_logits_adaface(
                &[1.0, 0.0],
                &p,
                0,
                &MarginConfig::adaface_default(),
                &mut stats
            ),
            Err(Error::UninitializedStats)
        ));
    }

    #[test]
    fn elastic_examples() {
        let p = axis_protos();
        let e = [0.3, 0.7];
        let zero = MarginConfig::elastic_arcface(64.0, 0.5, 0.0);
        let arc = margin_logits_arcface(&e, &p, 1, &MarginConfig::arcface(64.0, 0.5)).unwrap();
        for seed in 0..10 {
            let el = margin_logits_elastic(&e, &p, 1, &zero, &mut rng_from_seed(seed)).unwrap();
            assert_eq!(
                el.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                arc.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
        let cfg = MarginConfig::elastic_default();
        let a = margin_logits_elastic(&e, &p, 1, &cfg, &mut rng_from_seed(3)).unwrap();
        let b = margin_logits_elastic(&e, &p, 1, &cfg, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);

        let mut rng = rng_from_seed(11);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| sample_elastic_margin(&cfg, &mut rng))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean margin {mean}");
    }

    #[test]
    fn adaface_examples() {
        let p = axis_protos();
        let cfg = MarginConfig::adaface(60.0, 0.4);
        let mut stats = NormStats::new(1.0, 0.5).unwrap();
        let l = margin_logits_adaface(&[1.0, 0.0], &p, 0, &cfg, &mut stats).unwrap();
        assert_abs_diff_eq!(l[0], 36.0, epsilon = 1e-6);

        let mut stats = NormStats::new(1.0, 0.5).unwrap();
        let l = margin_logits_adaface(&[50.0, 0.0], &p, 0, &cfg, &mut stats).unwrap();
        assert_abs_diff_eq!(l[0], 7.263, epsilon = 1e-2);
        assert_abs_diff_eq!(l[0], 60.0 * ((-0.4f64).cos() - 0.8), epsilon = 1e-9);
        // EMA step after use: 0.01·50 + 0.99·1
        assert_abs_diff_eq!(stats.mean_norm().unwrap(), 1.49, epsilon = 1e-12);

        let free = MarginConfig::adaface(60.0, 0.0);
        for scale in [0.01, 1.0, 90.0] {
            let mut stats = NormStats::new(1.0, 0.5).unwrap();
            let e = [0.6 * scale, 0.8 * scale];
            let l = margin_logits_adaface(&e, &p, 1, &free, &mut stats).unwrap();
            assert_abs_diff_eq!(l[0], 36.0, epsilon = 1e-9);
            assert_abs_diff_eq!(l[1], 48.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert_abs_diff_eq!(
            cross_entropy(&[0.0, 0.0], 0).unwrap(),
            0.69315,
            epsilon = 1e-5
        );
        assert!(cross_entropy(&[100.0, 0.0], 0).unwrap() < 1e-10);
        assert_abs_diff_eq!(
            cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap(),
            0.40761,
            epsilon = 1e-5
        );
        assert!(matches!(
            cross_entropy(&[1.0], 1),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(cross_entropy(&[f64::NAN, 0.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_grad_sums_to_zero(
            logits in prop::collection::vec(-50.0f64..50.0, 2..12),
            shift in -100.0f64..100.0,
            yi in any::<usize>(),
        ) {
            let y = yi % logits.len();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let (l0, g0) = cross_entropy_with_grad(&logits, y).unwrap();
            let (l1, g1) = cross_entropy_with_grad(&shifted, y).unwrap();
            prop_assert!(g1.iter().sum::<f64>().abs() < 1e-12);
            prop_assert!((l0 - l1).abs() < 1e-9);
            for (a, b) in g0.iter().zip(&g1) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn zero_margin_is_scaled_cosine(
            e in prop::collection::vec(-5.0f64..5.0, 4),
            w in prop::collection::vec(-5.0f64..5.0, 12),
            yi in 0usize..3,
            s in 0.5f64..64.0,
        ) {
            prop_assume!(norm(&e) > 1e-3);
            let rows: Vec<Vec<f64>> = w.chunks(4).map(|c| c.to_vec()).collect();
            prop_assume!(rows.iter().all(|r| norm(r) > 1e-3));
            let p = ClassPrototypes::from_rows(&rows).unwrap();
            let l = margin_logits_arcface(&e, &p, yi, &MarginConfig::arcface(s, 0.0)).unwrap();
            for (j, r) in rows.iter().enumerate() {
                let c = crate::geometry::cosine_similarity(&e, r).unwrap();
                prop_assert!((l[j] - s * c).abs() < 1e-9);
            }
        }
    }
}
