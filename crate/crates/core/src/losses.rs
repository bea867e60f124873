//! Training objectives and the per-image evaluation metric.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::domain::{GrayImage, SegMask};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// How the L1 terms of the feature matching and Gram losses are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_df: f64,
    pub lambda_l2: f64,
    pub lambda_style: f64,
    pub lambda_gram: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_gan: 10.0, lambda_df: 10.0, lambda_l2: 15.0, lambda_style: 0.5, lambda_gram: 1e4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_gan, self.lambda_df, self.lambda_l2, self.lambda_style, self.lambda_gram];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn l1<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, reduction: Reduction) -> Var<'t, T> {
    let d = (a - b).abs();
    match reduction {
        Reduction::Mean => d.mean(),
        Reduction::Sum => d.sum(),
    }
}

fn same_shape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn scale_mean<'t, T: Scalar>(terms: Vec<Var<'t, T>>, what: &'static str) -> Result<Var<'t, T>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next().ok_or(Error::Empty(what))?;
    Ok(it.fold(first, |acc, t| acc + t).scale(T::one() / T::of(n as f64)))
}

/// Hinge loss for the discriminator, averaged over scales:
/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn gan_loss_d<'t, T: Scalar>(real: &[Var<'t, T>], fake: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!("{} real scales vs {} fake scales", real.len(), fake.len())));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| (-r).add_scalar(T::one()).relu().mean() + f.add_scalar(T::one()).relu().mean())
        .collect();
    scale_mean(terms, "gan_loss_d needs at least one scale")
}

/// Generator adversarial loss `-mean(fake)`, averaged over scales.
pub fn gan_loss_g<'t, T: Scalar>(fake: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let terms = fake.iter().map(|&f| -f.mean()).collect();
    scale_mean(terms, "gan_loss_g needs at least one scale")
}

/// L1 distance between discriminator features of generated and real inputs,
/// summed over scales and over layers 2..m. Real features are detached.
pub fn feature_matching_loss<'t, T: Scalar>(
    fake: &[Vec<Var<'t, T>>],
    real: &[Vec<Var<'t, T>>],
    reduction: Reduction,
) -> Result<Var<'t, T>> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(Error::Shape(format!("{} fake scales vs {} real scales", fake.len(), real.len())));
    }
    let mut terms = Vec::new();
    for (f, r) in fake.iter().zip(real) {
        if f.len() != r.len() || f.len() < 2 {
            return Err(Error::Shape(format!("feature lists of length {} and {} (need >= 2)", f.len(), r.len())));
        }
        for (&a, &b) in f[1..].iter().zip(&r[1..]) {
            same_shape(&a, &b, "feature_matching_loss")?;
            terms.push(l1(a, b.detach(), reduction));
        }
    }
    Ok(terms.into_iter().reduce(|acc, t| acc + t).expect("non-empty"))
}

/// Mean squared error between two image batches.
pub fn l2_pixel_loss<'t, T: Scalar>(fake: Var<'t, T>, real: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(&fake, &real, "l2_pixel_loss")?;
    Ok((fake - real).square().mean())
}

/// Euclidean distance between target and predicted style codes `[N, d_s]`,
/// averaged over the batch. The target is detached.
pub fn style_code_loss<'t, T: Scalar>(target: Var<'t, T>, predicted: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(&target, &predicted, "style_code_loss")?;
    if target.shape().len() != 2 {
        return Err(Error::Shape(format!("style codes must be [N, d_s], got {:?}", target.shape())));
    }
    Ok((target.detach() - predicted).row_norm().mean())
}

/// Per-sample Gram matrix normalized by `C*H*W`: `[N, C, H, W] -> [N, C, C]`.
pub fn gram_matrix<T: Scalar>(features: Var<'_, T>) -> Var<'_, T> {
    features.gram()
}

/// L1 distance between Gram matrices of encoder features, summed over
/// stages 2..m. Real features are detached.
pub fn gram_loss<'t, T: Scalar>(fake: &[Var<'t, T>], real: &[Var<'t, T>], reduction: Reduction) -> Result<Var<'t, T>> {
    if fake.len() != real.len() || fake.len() < 2 {
        return Err(Error::Shape(format!("feature lists of length {} and {} (need >= 2)", fake.len(), real.len())));
    }
    let mut total: Option<Var<'t, T>> = None;
    for (&a, &b) in fake[1..].iter().zip(&real[1..]) {
        same_shape(&a, &b, "gram_loss")?;
        let t = l1(a.gram(), b.detach().gram(), reduction);
        total = Some(match total {
            Some(acc) => acc + t,
            None => t,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Pixel-wise softmax cross-entropy of `[N, C, H, W]` logits against masks.
pub fn segmenter_loss<'t, T: Scalar>(logits: Var<'t, T>, masks: &[&SegMask]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 4 || shape[0] != masks.len() {
        return Err(Error::Shape(format!("{} masks for logits {shape:?}", masks.len())));
    }
    let mut targets = Vec::with_capacity(masks.len() * shape[2] * shape[3]);
    for m in masks {
        if m.height() != shape[2] || m.width() != shape[3] {
            return Err(Error::Shape(format!("mask {}x{} vs logits {shape:?}", m.height(), m.width())));
        }
        if let Some(&value) = m.data().iter().find(|&&v| v as usize >= shape[1]) {
            return Err(Error::ClassOutOfRange { value, num_classes: shape[1] });
        }
        targets.extend_from_slice(m.data());
    }
    Ok(logits.cross_entropy(&targets))
}

/// Mean squared error of the refined image against the target.
pub fn refiner_loss<'t, T: Scalar>(refined: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    l2_pixel_loss(refined, target)
}

/// Per-image challenge score on 8-bit values:
/// `sqrt(sum((fake - real)^2)) / (H*W)`. Lower is better.
pub fn challenge_metric(fake: &GrayImage, real: &GrayImage) -> Result<f64> {
    if fake.height() != real.height() || fake.width() != real.width() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            fake.height(),
            fake.width(),
            real.height(),
            real.width()
        )));
    }
    Ok(challenge_metric_u8(&fake.to_u8(), &real.to_u8(), fake.height(), fake.width()))
}

/// Challenge score on raw 8-bit pixel buffers of equal length `h*w`.
pub fn challenge_metric_u8(fake: &[u8], real: &[u8], h: usize, w: usize) -> f64 {
    let ss: f64 = fake.iter().zip(real).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    ss.sqrt() / (h * w) as f64
}

/// The five generator terms; each must be present to form the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<V> {
    pub gan: Option<V>,
    pub feature_matching: Option<V>,
    pub l2: Option<V>,
    pub style: Option<V>,
    pub gram: Option<V>,
}

impl<V> Default for LossTerms<V> {
    fn default() -> Self {
        LossTerms { gan: None, feature_matching: None, l2: None, style: None, gram: None }
    }
}

impl<V: Copy> LossTerms<V> {
    fn weighted(&self, w: &LossWeights) -> Result<[(&'static str, V, f64); 5]> {
        let need = |v: Option<V>, name: &'static str| v.ok_or(Error::Empty(name));
        Ok([
            ("gan", need(self.gan, "generator objective is missing the gan term")?, w.lambda_gan),
            ("feature_matching", need(self.feature_matching, "generator objective is missing the feature_matching term")?, w.lambda_df),
            ("l2", need(self.l2, "generator objective is missing the l2 term")?, w.lambda_l2),
            ("style", need(self.style, "generator objective is missing the style term")?, w.lambda_style),
            ("gram", need(self.gram, "generator objective is missing the gram term")?, w.lambda_gram),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Unweighted value and weight of every term together with the weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<TermReport>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// One metrics-log record: `{"step": .., <term>: .., "total": ..}`.
    pub fn to_json_line(&self, step: u64) -> String {
        let mut map = serde_json::Map::new();
        map.insert("step".into(), step.into());
        for t in &self.terms {
            map.insert(t.name.clone(), t.value.into());
        }
        map.insert("total".into(), self.total.into());
        serde_json::Value::Object(map).to_string()
    }
}

/// Weighted generator objective from plain term values.
pub fn generator_objective(terms: &LossTerms<f64>, w: &LossWeights) -> Result<LossReport> {
    let parts = terms.weighted(w)?;
    let total = parts.iter().map(|(_, v, wt)| v * wt).sum();
    Ok(LossReport {
        terms: parts.iter().map(|&(name, value, weight)| TermReport { name: name.into(), value, weight }).collect(),
        total,
    })
}

/// Weighted generator objective as a differentiable scalar plus its report.
pub fn generator_objective_var<'t, T: Scalar>(
    terms: &LossTerms<Var<'t, T>>,
    w: &LossWeights,
) -> Result<(Var<'t, T>, LossReport)> {
    let parts = terms.weighted(w)?;
    let tape = parts[0].1.tape();
    let total = tape.weighted_sum(&parts.map(|(_, v, wt)| (v, T::of(wt))));
    let report = LossReport {
        terms: parts
            .iter()
            .map(|(name, v, weight)| TermReport { name: (*name).into(), value: v.item().as_f64(), weight: *weight })
            .collect(),
        total: total.item().as_f64(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn t<'a>(tape: &'a Tape<f64>, shape: &[usize], v: &[f64]) -> Var<'a, f64> {
        tape.constant(Tensor::new(shape, v.to_vec()))
    }

    #[test]
    fn hinge_examples() {
        let tape = Tape::new();
        let real = t(&tape, &[1], &[0.5]);
        let fake = t(&tape, &[1], &[-0.5]);
        assert!((gan_loss_d(&[real], &[fake]).unwrap().item() - 1.0).abs() < 1e-12);
        let real = t(&tape, &[2], &[1.0, 3.0]);
        let fake = t(&tape, &[2], &[-1.0, -2.0]);
        assert_eq!(gan_loss_d(&[real], &[fake]).unwrap().item(), 0.0);
        let zero = t(&tape, &[3], &[0.0; 3]);
        assert_eq!(gan_loss_g(&[zero]).unwrap().item(), 0.0);
    }

    #[test]
    fn feature_matching_example() {
        let tape = Tape::new();
        let l1f = t(&tape, &[1, 1, 1, 1], &[5.0]);
        let l1r = t(&tape, &[1, 1, 1, 1], &[-5.0]);
        let zeros = t(&tape, &[1, 2, 2, 2], &[0.0; 8]);
        let ones = t(&tape, &[1, 2, 2, 2], &[1.0; 8]);
        let v = feature_matching_loss(&[vec![l1f, zeros]], &[vec![l1r, ones]], Reduction::Mean).unwrap();
        assert_eq!(v.item(), 1.0);
        let v = feature_matching_loss(&[vec![l1f, zeros]], &[vec![l1r, ones]], Reduction::Sum).unwrap();
        assert_eq!(v.item(), 8.0);
    }

    #[test]
    fn pixel_and_style_examples() {
        let tape = Tape::new();
        let a = t(&tape, &[1, 1, 2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let b = t(&tape, &[1, 1, 2, 2], &[0.2, 0.3, 0.4, 0.5]);
        assert!((l2_pixel_loss(b, a).unwrap().item() - 0.01).abs() < 1e-12);
        let s = t(&tape, &[1, 2], &[3.0, 0.0]);
        let sh = t(&tape, &[1, 2], &[0.0, 4.0]);
        assert_eq!(style_code_loss(s, sh).unwrap().item(), 5.0);
        assert!(l2_pixel_loss(a, s).is_err());
    }

    #[test]
    fn gram_example() {
        let tape = Tape::new();
        let f = t(&tape, &[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(gram_matrix(f).value().data(), &[0.25, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn objective_examples() {
        let w = LossWeights::default();
        let ones = LossTerms { gan: Some(1.0), feature_matching: Some(1.0), l2: Some(1.0), style: Some(1.0), gram: Some(1.0) };
        assert_eq!(generator_objective(&ones, &w).unwrap().total, 10035.5);
        let mixed = LossTerms { gan: Some(0.2), feature_matching: Some(0.1), l2: Some(0.05), style: Some(0.4), gram: Some(1e-4) };
        assert!((generator_objective(&mixed, &w).unwrap().total - 4.95).abs() < 1e-12);
        let missing = LossTerms { gram: None, ..ones };
        assert!(matches!(generator_objective(&missing, &w), Err(Error::Empty(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let mask = SegMask::from_rows(&[&[0, 1], &[2, 3]]).unwrap();
        let uniform = t(&tape, &[1, 4, 2, 2], &[0.0; 16]);
        assert!((segmenter_loss(uniform, &[&mask]).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let oh = mask.one_hot::<f64>(4).unwrap().map(|v| v * 40.0);
        assert!(segmenter_loss(tape.constant(oh), &[&mask]).unwrap().item() < 1e-3);
        let bad = SegMask::from_rows(&[&[0, 1], &[2, 3]]).unwrap();
        let three = t(&tape, &[1, 3, 2, 2], &[0.0; 12]);
        assert!(matches!(segmenter_loss(three, &[&bad]), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn challenge_examples() {
        let a = GrayImage::from_u8(2, 2, &[100, 100, 100, 100]).unwrap();
        let b = GrayImage::from_u8(2, 2, &[110, 110, 110, 110]).unwrap();
        assert_eq!(challenge_metric(&a, &a).unwrap(), 0.0);
        assert_eq!(challenge_metric(&a, &b).unwrap(), 5.0);
    }
}
